#pragma once

// Shared value types, error hierarchy and small deterministic helpers.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <mutex>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace emore {

using cplx = std::complex<double>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid shapes, parameters or configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Iterative solver failure (CG divergence, non-finite iterates).
class SolverError : public Error {
 public:
  using Error::Error;
};

class GatingError : public Error {
 public:
  using Error::Error;
};

class GenerationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

/// Spatial extents and motion-bin layout of a reconstruction.
///
/// Flat bin ordering is respiratory-major: k = r * cardiac_bins + c with
/// zero-based cardiac index c and respiratory index r. Volumes are stored
/// x-fastest: voxel = (z * ny + y) * nx + x. The x axis is superior-inferior
/// and is also the frequency-encode (readout) direction.
struct ImageGrid {
  int nx = 64;
  int ny = 64;
  int nz = 1;
  double voxel_mm = 3.0;
  int cardiac_bins = 10;
  int respiratory_bins = 4;

  bool is3d() const { return nz > 1; }
  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  int bins() const { return cardiac_bins * respiratory_bins; }
  int flat_bin(int cardiac, int respiratory) const {
    return respiratory * cardiac_bins + cardiac;
  }
  int cardiac_of(int k) const { return k % cardiac_bins; }
  int respiratory_of(int k) const { return k / cardiac_bins; }

  void validate() const {
    if (nx < 4 || ny < 4 || (nz != 1 && nz < 4)) {
      throw ConfigError("image grid extents must be >= 4 (nz may be 1 for 2D)");
    }
    if (cardiac_bins < 1 || respiratory_bins < 1) {
      throw ConfigError("grid needs at least one cardiac and one respiratory bin");
    }
    if (!(voxel_mm > 0.0)) throw ConfigError("voxel size must be positive");
  }

  bool operator==(const ImageGrid&) const = default;
};

/// One complex volume per valid motion bin, stored contiguously.
struct ImageStack {
  ImageGrid grid;
  std::vector<cplx> data;

  ImageStack() = default;
  explicit ImageStack(const ImageGrid& g)
      : grid(g), data(g.voxels() * static_cast<std::size_t>(g.bins())) {}

  int bins() const { return grid.bins(); }
  std::size_t voxels() const { return grid.voxels(); }
  std::span<cplx> bin(int k) {
    return {data.data() + static_cast<std::size_t>(k) * voxels(), voxels()};
  }
  std::span<const cplx> bin(int k) const {
    return {data.data() + static_cast<std::size_t>(k) * voxels(), voxels()};
  }
};

inline double squared_norm(std::span<const cplx> v) {
  double s = 0.0;
  for (const cplx& a : v) s += std::norm(a);
  return s;
}

/// <a, b> = sum conj(a_i) b_i, accumulated in index order.
inline cplx inner(std::span<const cplx> a, std::span<const cplx> b) {
  cplx s{0.0, 0.0};
  for (std::size_t i = 0; i < a.size(); ++i) s += std::conj(a[i]) * b[i];
  return s;
}

/// Fixed-order pairwise summation; the result depends only on the input
/// order, never on how the terms were produced.
inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  const std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

/// Values persisted as complex64 are rounded at creation so that
/// export/import round-trips are exact.
inline cplx round_to_c64(cplx v) {
  return {static_cast<double>(static_cast<float>(v.real())),
          static_cast<double>(static_cast<float>(v.imag()))};
}

inline void round_to_c64(std::span<cplx> v) {
  for (cplx& a : v) a = round_to_c64(a);
}

/// Runs fn(i) for i in [0, count) on up to `threads` workers. Work is split
/// into fixed contiguous chunks; callers write results to per-index slots so
/// the output is independent of the thread count.
template <typename Fn>
void parallel_for(std::size_t count, int threads, Fn&& fn) {
  const std::size_t workers =
      std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex failure_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = count * w / workers;
      const std::size_t end = count * (w + 1) / workers;
      pool.emplace_back([&, begin, end] {
        try {
          for (std::size_t i = begin; i < end; ++i) fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      });
    }
  }
  if (failure) std::rethrow_exception(failure);
}

namespace detail {

/// Equal-occupancy quantile bins by rank; ties broken by index.
inline std::vector<int> quantile_bins(std::span<const double> values, int bins) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<int> out(values.size());
  const std::size_t n = values.size();
  for (std::size_t rank = 0; rank < n; ++rank) {
    out[order[rank]] = static_cast<int>(rank * static_cast<std::size_t>(bins) / n);
  }
  return out;
}

}  // namespace detail

}  // namespace emore

#pragma once

// Independent reference implementations: explicit dense operators and
// straight-line scalar formulas, written without the library's fast paths.

#include <random>

#include "emore/emore.hpp"

namespace oracle {

using emore::cplx;

/// Row-major dense matrix, rows x cols.
struct Dense {
  std::size_t rows = 0, cols = 0;
  std::vector<cplx> a;
  cplx& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
  cplx operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }

  std::vector<cplx> apply(std::span<const cplx> x) const {
    std::vector<cplx> y(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) y[i] += (*this)(i, j) * x[j];
    }
    return y;
  }
  std::vector<cplx> apply_adjoint(std::span<const cplx> y) const {
    std::vector<cplx> x(cols);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) x[j] += std::conj((*this)(i, j)) * y[i];
    }
    return x;
  }
};

/// Explicit DFT, orthonormal, over an nx x ny (x nz) grid, unshifted indices.
inline cplx dft_entry(const emore::ImageGrid& g, std::size_t k, std::size_t v) {
  const int kx = static_cast<int>(k % g.nx), ky = static_cast<int>((k / g.nx) % g.ny),
            kz = static_cast<int>(k / (static_cast<std::size_t>(g.nx) * g.ny));
  const int x = static_cast<int>(v % g.nx), y = static_cast<int>((v / g.nx) % g.ny),
            z = static_cast<int>(v / (static_cast<std::size_t>(g.nx) * g.ny));
  const double phase = -2.0 * std::numbers::pi *
                       (static_cast<double>(kx * x) / g.nx + static_cast<double>(ky * y) / g.ny +
                        static_cast<double>(kz * z) / g.nz);
  return std::polar(1.0 / std::sqrt(static_cast<double>(g.voxels())), phase);
}

/// A = S F C for one readout, built entry by entry from the definition.
inline Dense dense_forward(const emore::CoilMaps& maps, std::span<const emore::KIndex> sampling) {
  const auto& g = maps.grid;
  Dense d{sampling.size() * maps.coils, g.voxels(), {}};
  d.a.resize(d.rows * d.cols);
  for (int c = 0; c < maps.coils; ++c) {
    const auto s = maps.coil(c);
    for (std::size_t j = 0; j < sampling.size(); ++j) {
      for (std::size_t v = 0; v < g.voxels(); ++v) {
        d(c * sampling.size() + j, v) = dft_entry(g, sampling[j], v) * s[v];
      }
    }
  }
  return d;
}

inline double sq(std::span<const cplx> v) {
  double s = 0.0;
  for (const cplx& a : v) s += std::norm(a);
  return s;
}

/// One posterior row straight from the formula: valid bins weigh
/// theta * exp(-r / (L sigma^2)), the outlier bin theta * exp(-tau^2 / sigma^2)
/// with tau = tau_sigmas * sigma. Plain exponentials, so keep residuals small.
inline std::vector<double> e_step_row(std::span<const double> residual_energy, std::span<const double> prior,
                                      double sigma, double tau_sigmas, std::size_t L) {
  const std::size_t K = residual_energy.size();
  std::vector<double> num(K + 1);
  const double tau = tau_sigmas * sigma;
  for (std::size_t k = 0; k < K; ++k) {
    num[k] = prior[k] * std::exp(-residual_energy[k] / (static_cast<double>(L) * sigma * sigma));
  }
  num[K] = prior[K] * std::exp(-(tau * tau) / (sigma * sigma));
  double z = 0.0;
  for (double v : num) z += v;
  for (double& v : num) v /= z;
  return num;
}

inline std::vector<cplx> random_vector(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> d;
  std::vector<cplx> v(n);
  for (auto& a : v) a = {d(rng), d(rng)};
  return v;
}

inline emore::CoilMaps random_maps(const emore::ImageGrid& g, int coils, std::mt19937_64& rng) {
  emore::CoilMaps m(g, coils);
  m.data = random_vector(m.data.size(), rng);
  return m;
}


/// Anisotropic TV term along one axis from explicit coordinates.
inline double tv_l1(const emore::ImageStack& x, emore::Axis axis) {
  const auto& g = x.grid;
  double s = 0.0;
  for (int r = 0; r < g.respiratory_bins; ++r) {
    for (int c = 0; c < g.cardiac_bins; ++c) {
      for (int z = 0; z < g.nz; ++z) {
        for (int y = 0; y < g.ny; ++y) {
          for (int xx = 0; xx < g.nx; ++xx) {
            int c2 = c, r2 = r, z2 = z, y2 = y, x2 = xx;
            switch (axis) {
              case emore::Axis::X: x2 = xx + 1; break;
              case emore::Axis::Y: y2 = y + 1; break;
              case emore::Axis::Z: z2 = z + 1; break;
              case emore::Axis::Cardiac: c2 = (c + 1) % g.cardiac_bins; break;
              case emore::Axis::Respiratory: r2 = r + 1; break;
            }
            if (x2 >= g.nx || y2 >= g.ny || z2 >= g.nz || r2 >= g.respiratory_bins) continue;
            auto at = [&](int cc, int rr, int zz, int yy, int xi) {
              return x.bin(g.flat_bin(cc, rr))[(static_cast<std::size_t>(zz) * g.ny + yy) * g.nx + xi];
            };
            s += std::abs(at(c2, r2, z2, y2, x2) - at(c, r, z, y, xx));
          }
        }
      }
    }
  }
  return s;
}

/// sum_n sum_k w ||A x_k - y_n||^2 / (L sigma^2) + sum_a lambda_a TV_a, with
/// dense per-readout operators.
template <typename Weights>
double objective(const emore::ImageStack& x, const emore::AcquiredDataset& ds, const Weights& w,
                 const emore::SolverParams& p) {
  const double L = static_cast<double>(ds.readout_length());
  double data = 0.0;
  for (std::size_t n = 0; n < ds.readout_count(); ++n) {
    const auto a = dense_forward(ds.maps, ds.sampling_indices(n));
    const auto y = ds.readout(n);
    for (int k = 0; k < x.bins(); ++k) {
      const auto ax = a.apply(x.bin(k));
      double r = 0.0;
      for (std::size_t i = 0; i < ax.size(); ++i) r += std::norm(ax[i] - y[i]);
      data += w(n, static_cast<std::size_t>(k)) * r / (L * ds.sigma * ds.sigma);
    }
  }
  double tv = 0.0;
  for (emore::Axis a : emore::tv_axes(x.grid)) {
    const double lambda = a == emore::Axis::Cardiac        ? p.lambda_cardiac
                          : a == emore::Axis::Respiratory ? p.lambda_respiratory
                                                          : p.lambda_spatial;
    tv += lambda * tv_l1(x, a);
  }
  return data + tv;
}

}  // namespace oracle

namespace testing_support {

/// Small but complete experiment: 16x16 grid, 2x2 bins, 30 s scan.
inline emore::ExperimentConfig tiny_config() {
  emore::ExperimentConfig c;
  c.grid.nx = 16;
  c.grid.ny = 16;
  c.grid.voxel_mm = 12.0;
  c.grid.cardiac_bins = 2;
  c.grid.respiratory_bins = 2;
  c.coils = 4;
  c.scan_seconds = 30.0;
  c.seeds = {1};
  c.corruption_fractions = {0.0, 0.2};
  return c;
}

/// Random dataset on a small grid: every readout samples `samples` random
/// k-space locations; data = A x_true for a drawn bin plus complex noise.
struct Toy {
  emore::AcquiredDataset ds;
  emore::ImageStack truth;
  std::vector<int> bin;
};

inline Toy make_toy(std::mt19937_64& rng, int nx, int ny, int bins, int coils, std::size_t readouts, std::size_t samples,
             double sigma) {
  Toy t;
  emore::ImageGrid g;
  g.nx = nx;
  g.ny = ny;
  g.cardiac_bins = bins;
  g.respiratory_bins = 1;
  t.truth = emore::ImageStack(g);
  t.truth.data = oracle::random_vector(t.truth.data.size(), rng);
  emore::AcquiredDataset& ds = t.ds;
  ds.grid = g;
  ds.maps = oracle::random_maps(g, coils, rng);
  ds.samples_per_readout = samples;
  ds.sigma = sigma;
  std::uniform_int_distribution<emore::KIndex> pick(0, static_cast<emore::KIndex>(g.voxels() - 1));
  std::uniform_int_distribution<int> pick_bin(0, bins - 1);
  std::normal_distribution<double> noise(0.0, sigma / std::sqrt(2.0));
  const emore::SenseOperator op(ds.maps);
  for (std::size_t n = 0; n < readouts; ++n) {
    std::vector<emore::KIndex> idx(samples);
    for (auto& i : idx) i = pick(rng);
    const int k = pick_bin(rng);
    t.bin.push_back(k);
    auto y = op.forward(t.truth.bin(k), idx);
    for (auto& v : y) v += emore::cplx{noise(rng), noise(rng)};
    ds.kspace_index.insert(ds.kspace_index.end(), idx.begin(), idx.end());
    ds.readouts.insert(ds.readouts.end(), y.begin(), y.end());
    ds.self_gating.push_back(0);
    ds.time_ms.push_back(4.0 * n);
  }
  ds.validate();
  return t;
}

/// 8x8, two cardiac bins, 2 coils, 16 readouts of one full frequency-encode
/// line each; returns the dataset and the true bin of every readout.
inline std::pair<emore::AcquiredDataset, std::vector<int>> two_bin_line_instance(std::mt19937_64& rng) {
  using namespace emore;
  ImageGrid g;
  g.nx = g.ny = 8;
  g.cardiac_bins = 2;
  g.respiratory_bins = 1;
  AcquiredDataset ds;
  ds.grid = g;
  ds.maps = make_coil_maps(g, 2, CoilLayout::BiotSavart);
  ds.samples_per_readout = 8;
  ImageStack truth(g);
  for (int k = 0; k < 2; ++k) {
    for (int y = 0; y < 8; ++y) {
      for (int x = 0; x < 8; ++x) {
        const double r = std::hypot(x - 3.5, y - 3.5);
        truth.bin(k)[static_cast<std::size_t>(y * 8 + x)] = r < 2.0 + k ? 1.0 : 0.3;
      }
    }
  }
  const SenseOperator op(ds.maps);
  std::uniform_int_distribution<int> line(0, 7);
  std::normal_distribution<double> noise(0.0, 0.02);
  std::vector<int> bins;
  for (int n = 0; n < 16; ++n) {
    const int k = n % 2;
    std::vector<KIndex> idx;
    const int ky = line(rng);
    for (int i = 0; i < 8; ++i) idx.push_back(static_cast<KIndex>(ky * 8 + i));
    auto y = op.forward(truth.bin(k), idx);
    for (auto& v : y) v += cplx{noise(rng), noise(rng)};
    ds.kspace_index.insert(ds.kspace_index.end(), idx.begin(), idx.end());
    ds.readouts.insert(ds.readouts.end(), y.begin(), y.end());
    ds.self_gating.push_back(0);
    ds.time_ms.push_back(4.0 * n);
    bins.push_back(k);
  }
  ds.sigma = 0.02 * std::sqrt(2.0);
  return {std::move(ds), std::move(bins)};
}

}  // namespace testing_support

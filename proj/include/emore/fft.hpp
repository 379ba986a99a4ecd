#pragma once

// Orthonormal n-D FFT on an ImageGrid, backed by FFTW.

#include <fftw3.h>

#include <cstring>
#include <memory>
#include <mutex>

#include "emore/core.hpp"

namespace emore {

namespace detail {

// FFTW's planner is not thread-safe; execution with the new-array interface is.
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwPlans {
  fftw_plan forward = nullptr;
  fftw_plan inverse = nullptr;

  FftwPlans() = default;
  FftwPlans(const FftwPlans&) = delete;
  FftwPlans& operator=(const FftwPlans&) = delete;
  ~FftwPlans() {
    std::lock_guard lock(fftw_planner_mutex());
    if (forward) fftw_destroy_plan(forward);
    if (inverse) fftw_destroy_plan(inverse);
  }
};

}  // namespace detail

/// In-place unitary DFT over the spatial axes of `grid`: ||F x|| = ||x||.
///
/// Plans use FFTW_ESTIMATE so the chosen algorithm (and thus every rounding
/// error) is identical from run to run. Data always passes through an
/// aligned per-thread buffer, so the SIMD path never depends on where the
/// caller's array happens to live.
class Fft {
 public:
  explicit Fft(const ImageGrid& grid) : size_(grid.voxels()) {
    int dims[3];
    int rank = 0;
    if (grid.is3d()) dims[rank++] = grid.nz;
    dims[rank++] = grid.ny;
    dims[rank++] = grid.nx;
    scale_ = 1.0 / std::sqrt(static_cast<double>(size_));

    plans_ = std::make_shared<detail::FftwPlans>();
    std::lock_guard lock(detail::fftw_planner_mutex());
    auto* scratch = fftw_alloc_complex(size_);
    const unsigned flags = FFTW_ESTIMATE;
    plans_->forward = fftw_plan_dft(rank, dims, scratch, scratch, FFTW_FORWARD, flags);
    plans_->inverse = fftw_plan_dft(rank, dims, scratch, scratch, FFTW_BACKWARD, flags);
    fftw_free(scratch);
    if (!plans_->forward || !plans_->inverse) throw ConfigError("FFTW planning failed");
  }

  std::size_t size() const { return size_; }

  void forward(std::span<cplx> x) const { run(plans_->forward, x); }
  void inverse(std::span<cplx> x) const { run(plans_->inverse, x); }

 private:
  struct AlignedBuffer {
    fftw_complex* data = nullptr;
    std::size_t size = 0;
    ~AlignedBuffer() { fftw_free(data); }
  };

  static fftw_complex* buffer(std::size_t n) {
    thread_local AlignedBuffer buf;
    if (buf.size < n) {
      fftw_free(buf.data);
      buf.data = fftw_alloc_complex(n);
      buf.size = n;
    }
    return buf.data;
  }

  void run(fftw_plan plan, std::span<cplx> x) const {
    if (x.size() != size_) throw ConfigError("FFT input size does not match grid");
    fftw_complex* b = buffer(size_);
    std::memcpy(b, x.data(), size_ * sizeof(fftw_complex));
    fftw_execute_dft(plan, b, b);
    for (std::size_t i = 0; i < size_; ++i) x[i] = cplx{b[i][0] * scale_, b[i][1] * scale_};
  }

  std::size_t size_ = 0;
  double scale_ = 1.0;
  std::shared_ptr<detail::FftwPlans> plans_;
};

}  // namespace emore

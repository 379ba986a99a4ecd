#pragma once

// Multi-coil Cartesian forward/adjoint operators restricted to one readout's
// k-space samples, and the finite-difference operators used by the TV prior.

#include <array>
#include <string_view>

#include "emore/core.hpp"
#include "emore/fft.hpp"

namespace emore {

using KIndex = std::uint32_t;

/// Complex receive sensitivities, one spatial volume per coil.
struct CoilMaps {
  ImageGrid grid;
  int coils = 0;
  std::vector<cplx> data;  // coils x voxels

  CoilMaps() = default;
  CoilMaps(const ImageGrid& g, int c) : grid(g), coils(c), data(g.voxels() * c) {}

  std::span<cplx> coil(int c) {
    return {data.data() + static_cast<std::size_t>(c) * grid.voxels(), grid.voxels()};
  }
  std::span<const cplx> coil(int c) const {
    return {data.data() + static_cast<std::size_t>(c) * grid.voxels(), grid.voxels()};
  }

  double root_sum_of_squares(std::size_t voxel) const {
    double s = 0.0;
    for (int c = 0; c < coils; ++c) s += std::norm(coil(c)[voxel]);
    return std::sqrt(s);
  }
};

/// k-space sample set of one readout. Indices address the unshifted k-space
/// grid (same layout as the image) and are shared by every coil.
struct ReadoutSampling {
  std::span<const KIndex> indices;
  std::size_t readout = 0;
  bool self_gating = false;
  double time_ms = 0.0;
};

/// A_(n,k) for any readout n, realized as coil weighting, unitary FFT and
/// sample selection. The per-readout forward/adjoint are reference
/// implementations; the reconstruction works on whole coil k-spaces.
class SenseOperator {
 public:
  explicit SenseOperator(const CoilMaps& maps) : maps_(&maps), fft_(maps.grid) {}

  const CoilMaps& maps() const { return *maps_; }
  int coils() const { return maps_->coils; }
  std::size_t voxels() const { return maps_->grid.voxels(); }
  const Fft& fft() const { return fft_; }

  /// Output is coil-major: y[c * S + j] for coil c and sample j.
  std::vector<cplx> forward(std::span<const cplx> image, std::span<const KIndex> sampling) const {
    check_image(image);
    check_sampling(sampling);
    const std::size_t s = sampling.size();
    std::vector<cplx> y(s * coils());
    std::vector<cplx> buf(voxels());
    for (int c = 0; c < coils(); ++c) {
      weight_and_transform(image, c, buf);
      for (std::size_t j = 0; j < s; ++j) y[c * s + j] = buf[sampling[j]];
    }
    return y;
  }

  std::vector<cplx> adjoint(std::span<const cplx> data, std::span<const KIndex> sampling) const {
    check_sampling(sampling);
    const std::size_t s = sampling.size();
    if (data.size() != s * coils()) {
      throw ConfigError("adjoint: data length does not match coils x samples");
    }
    std::vector<cplx> image(voxels());
    std::vector<cplx> buf(voxels());
    for (int c = 0; c < coils(); ++c) {
      std::fill(buf.begin(), buf.end(), cplx{});
      for (std::size_t j = 0; j < s; ++j) buf[sampling[j]] += data[c * s + j];
      fft_.inverse(buf);
      const auto sens = maps_->coil(c);
      for (std::size_t v = 0; v < voxels(); ++v) image[v] += std::conj(sens[v]) * buf[v];
    }
    return image;
  }

  /// Full coil k-spaces F(S_c x), coils x voxels.
  void coil_kspace(std::span<const cplx> image, std::span<cplx> out) const {
    check_image(image);
    for (int c = 0; c < coils(); ++c) {
      weight_and_transform(image, c, out.subspan(static_cast<std::size_t>(c) * voxels(), voxels()));
    }
  }

  /// sum_c conj(S_c) F^H k_c; consumes `kspace` as scratch.
  void coil_combine(std::span<cplx> kspace, std::span<cplx> image) const {
    std::fill(image.begin(), image.end(), cplx{});
    for (int c = 0; c < coils(); ++c) {
      auto kc = kspace.subspan(static_cast<std::size_t>(c) * voxels(), voxels());
      fft_.inverse(kc);
      const auto sens = maps_->coil(c);
      for (std::size_t v = 0; v < voxels(); ++v) image[v] += std::conj(sens[v]) * kc[v];
    }
  }

  /// out = sum_c conj(S_c) F^H diag(kweight) F S_c x. `scratch` holds one volume.
  void weighted_normal(std::span<const cplx> image, std::span<const double> kweight,
                       std::span<cplx> out, std::span<cplx> scratch) const {
    std::fill(out.begin(), out.end(), cplx{});
    for (int c = 0; c < coils(); ++c) {
      weight_and_transform(image, c, scratch);
      for (std::size_t v = 0; v < voxels(); ++v) scratch[v] *= kweight[v];
      fft_.inverse(scratch);
      const auto sens = maps_->coil(c);
      for (std::size_t v = 0; v < voxels(); ++v) out[v] += std::conj(sens[v]) * scratch[v];
    }
  }

 private:
  void weight_and_transform(std::span<const cplx> image, int c, std::span<cplx> out) const {
    const auto sens = maps_->coil(c);
    for (std::size_t v = 0; v < voxels(); ++v) out[v] = sens[v] * image[v];
    fft_.forward(out);
  }

  void check_image(std::span<const cplx> image) const {
    if (image.size() != voxels()) throw ConfigError("image size does not match coil-map grid");
  }

  void check_sampling(std::span<const KIndex> sampling) const {
    for (KIndex i : sampling) {
      if (i >= voxels()) throw ConfigError("k-space index outside the grid");
    }
  }

  const CoilMaps* maps_;
  Fft fft_;
};

inline std::vector<cplx> forward(std::span<const cplx> image, const CoilMaps& maps,
                                 const ReadoutSampling& sampling) {
  return SenseOperator(maps).forward(image, sampling.indices);
}

inline std::vector<cplx> adjoint(std::span<const cplx> data, const CoilMaps& maps,
                                 const ReadoutSampling& sampling) {
  return SenseOperator(maps).adjoint(data, sampling.indices);
}

// ---------------------------------------------------------------------------
// Finite differences over the motion-resolved stack.

enum class Axis { X, Y, Z, Cardiac, Respiratory };

inline std::string_view axis_name(Axis a) {
  switch (a) {
    case Axis::X: return "spatial-x";
    case Axis::Y: return "spatial-y";
    case Axis::Z: return "spatial-z";
    case Axis::Cardiac: return "cardiac";
    case Axis::Respiratory: return "respiratory";
  }
  return "unknown";
}

namespace detail {

struct AxisLayout {
  std::size_t stride;
  std::size_t extent;
  bool periodic;
};

inline AxisLayout axis_layout(const ImageGrid& g, Axis a) {
  const std::size_t m = g.voxels();
  switch (a) {
    case Axis::X: return {1, static_cast<std::size_t>(g.nx), false};
    case Axis::Y: return {static_cast<std::size_t>(g.nx), static_cast<std::size_t>(g.ny), false};
    case Axis::Z:
      if (!g.is3d()) throw ConfigError("spatial-z difference requested on a 2D grid");
      return {static_cast<std::size_t>(g.nx) * g.ny, static_cast<std::size_t>(g.nz), false};
    case Axis::Cardiac: return {m, static_cast<std::size_t>(g.cardiac_bins), true};
    case Axis::Respiratory:
      return {m * g.cardiac_bins, static_cast<std::size_t>(g.respiratory_bins), false};
  }
  throw ConfigError("unknown difference axis");
}

}  // namespace detail

/// Forward difference along `axis`: periodic on the cardiac axis, zero at the
/// last sample (replicate boundary) elsewhere.
inline void diff(const ImageGrid& g, Axis axis, std::span<const cplx> in, std::span<cplx> out) {
  const auto [stride, n, periodic] = detail::axis_layout(g, axis);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t pos = (i / stride) % n;
    if (pos + 1 < n) {
      out[i] = in[i + stride] - in[i];
    } else if (periodic) {
      out[i] = in[i - pos * stride] - in[i];
    } else {
      out[i] = cplx{};
    }
  }
}

inline void diff_adjoint(const ImageGrid& g, Axis axis, std::span<const cplx> in,
                         std::span<cplx> out) {
  const auto [stride, n, periodic] = detail::axis_layout(g, axis);
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t pos = (i / stride) % n;
    cplx v{};
    if (periodic) {
      const std::size_t prev = pos == 0 ? i + (n - 1) * stride : i - stride;
      v = in[prev] - in[i];
    } else {
      if (pos >= 1) v += in[i - stride];
      if (pos + 1 < n) v -= in[i];
    }
    out[i] = v;
  }
}

inline ImageStack diff(const ImageStack& x, Axis axis) {
  ImageStack out(x.grid);
  diff(x.grid, axis, x.data, out.data);
  return out;
}

inline ImageStack diff_adjoint(const ImageStack& z, Axis axis) {
  ImageStack out(z.grid);
  diff_adjoint(z.grid, axis, z.data, out.data);
  return out;
}

/// Axes that carry a TV term on this grid.
inline std::vector<Axis> tv_axes(const ImageGrid& g) {
  std::vector<Axis> axes{Axis::X, Axis::Y};
  if (g.is3d()) axes.push_back(Axis::Z);
  if (g.cardiac_bins > 1) axes.push_back(Axis::Cardiac);
  if (g.respiratory_bins > 1) axes.push_back(Axis::Respiratory);
  return axes;
}

}  // namespace emore

#pragma once

// Geometric dynamic phantom, coil maps, self-gated Cartesian sampling,
// bulk-motion episodes and noisy k-space simulation.

#include <array>
#include <numbers>
#include <numeric>
#include <random>

#include "emore/dataset.hpp"

namespace emore {

using Vec3 = std::array<double, 3>;  // (x = SI, y = AP, z = LR), millimetres

enum class MotionRole {
  Static,       // never moves
  Respiratory,  // shifts superior-inferior with breathing
  Cardiac,      // shifts with breathing and scales with contraction
};

/// Ellipse (2D) or ellipsoid (3D) with additive complex contrast.
struct Primitive {
  std::string name;
  Vec3 center{};
  Vec3 semi_axes{};
  cplx contrast{};
  MotionRole role = MotionRole::Static;
  /// Radius reduction per unit contraction (Cardiac role only).
  double contraction = 0.0;
};

struct PhantomScene {
  std::vector<Primitive> primitives;
  /// Superior-inferior shift per respiratory phase (end-expiration first).
  std::vector<double> respiratory_shift_mm;
  /// Contraction level in [0, 1] per cardiac phase; cyclic.
  std::vector<double> cardiac_contraction;

  /// Primitive geometry at a given motion state.
  Primitive instance(const Primitive& p, int cardiac, int respiratory) const {
    Primitive out = p;
    if (p.role != MotionRole::Static) out.center[0] += respiratory_shift_mm[respiratory];
    if (p.role == MotionRole::Cardiac) {
      const double scale = 1.0 - p.contraction * cardiac_contraction[cardiac];
      for (double& a : out.semi_axes) a *= scale;
    }
    return out;
  }

  const Primitive* find(std::string_view name) const {
    for (const auto& p : primitives) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }
};

/// Voxel centre in millimetres relative to the rotation/FOV centre.
inline Vec3 voxel_position(const ImageGrid& g, int ix, int iy, int iz) {
  return {(ix - g.nx / 2) * g.voxel_mm, (iy - g.ny / 2) * g.voxel_mm, (iz - g.nz / 2) * g.voxel_mm};
}

/// Cardiac contraction profile: zero at the R-wave, broad near end-systole.
inline double contraction_at_phase(double phase) {
  return std::sqrt(std::abs(std::sin(std::numbers::pi * phase)));
}

/// Body with lungs, spine and aorta, a breathing liver with vessels, and a
/// beating heart (myocardium + blood pool), scaled to the field of view.
/// The small structures put energy into the outer phase encodes, as real
/// anatomy does.
inline PhantomScene make_scene(const ImageGrid& g, const PhysiologyParams& phys) {
  const double hx = g.nx * g.voxel_mm / 2.0;
  const double hy = g.ny * g.voxel_mm / 2.0;
  const double hz = g.is3d() ? g.nz * g.voxel_mm / 2.0 : hx;
  const double h = std::min({hx, hy, hz});

  PhantomScene s;
  auto add = [&](std::string name, Vec3 c, Vec3 a, double contrast, MotionRole role, double contraction = 0.0) {
    s.primitives.push_back({std::move(name), c, a, {contrast, 0}, role, contraction});
  };
  add("body", {0, 0, 0}, {0.70 * hx, 0.62 * hy, 0.70 * hz}, 0.25, MotionRole::Static);
  add("lung", {-0.42 * hx, -0.22 * hy, 0}, {0.18 * hx, 0.14 * hy, 0.30 * hz}, -0.15, MotionRole::Static);
  add("aorta", {-0.30 * hx, 0.30 * hy, 0}, {0.06 * h, 0.06 * h, 0.06 * h}, 0.45, MotionRole::Static);
  for (int v = 0; v < 6; ++v) {
    add("vertebra" + std::to_string(v), {(-0.50 + 0.20 * v) * hx, -0.48 * hy, 0}, {0.07 * hx, 0.07 * hy, 0.07 * hz},
        0.30, MotionRole::Static);
  }
  add("liver", {0.42 * hx, -0.05 * hy, 0}, {0.24 * hx, 0.42 * hy, 0.45 * hz}, 0.35, MotionRole::Respiratory);
  for (int v = 0; v < 3; ++v) {
    add("liver_vessel" + std::to_string(v), {(0.36 + 0.08 * v) * hx, (-0.25 + 0.2 * v) * hy, 0},
        {0.04 * h, 0.04 * h, 0.04 * h}, 0.30, MotionRole::Respiratory);
  }
  add("myocardium", {-0.14 * hx, 0.08 * hy, 0}, {0.31 * h, 0.31 * h, 0.31 * h}, 0.35, MotionRole::Cardiac,
      0.4 * phys.cardiac_contraction);
  add("blood_pool", {-0.14 * hx, 0.08 * hy, 0}, {0.21 * h, 0.21 * h, 0.21 * h}, 0.40, MotionRole::Cardiac,
      phys.cardiac_contraction);

  const int nr = g.respiratory_bins;
  for (int r = 0; r < nr; ++r) {
    s.respiratory_shift_mm.push_back(nr > 1 ? phys.resp_shift_mm * r / (nr - 1) : 0.0);
  }
  const int nc = g.cardiac_bins;
  for (int c = 0; c < nc; ++c) s.cardiac_contraction.push_back(contraction_at_phase((c + 0.5) / nc));
  return s;
}

inline PhantomScene make_scene(const ExperimentConfig& cfg) { return make_scene(cfg.grid, cfg.physiology); }

/// Rasterizes the scene for every (cardiac, respiratory) state; voxels whose
/// centre lies inside a primitive receive its contrast.
inline ImageStack render_truth(const PhantomScene& scene, const ImageGrid& g) {
  g.validate();
  if (static_cast<int>(scene.respiratory_shift_mm.size()) != g.respiratory_bins ||
      static_cast<int>(scene.cardiac_contraction.size()) != g.cardiac_bins) {
    throw ConfigError("scene motion tables do not match the grid's bin counts");
  }
  const Vec3 lo{-(g.nx / 2) * g.voxel_mm, -(g.ny / 2) * g.voxel_mm, -(g.nz / 2) * g.voxel_mm};
  const Vec3 hi{(g.nx - 1 - g.nx / 2) * g.voxel_mm, (g.ny - 1 - g.ny / 2) * g.voxel_mm,
                (g.nz - 1 - g.nz / 2) * g.voxel_mm};
  const int dims = g.is3d() ? 3 : 2;

  ImageStack stack(g);
  for (int r = 0; r < g.respiratory_bins; ++r) {
    for (int c = 0; c < g.cardiac_bins; ++c) {
      auto vol = stack.bin(g.flat_bin(c, r));
      for (const auto& proto : scene.primitives) {
        const Primitive p = scene.instance(proto, c, r);
        for (int d = 0; d < dims; ++d) {
          if (p.center[d] - p.semi_axes[d] < lo[d] || p.center[d] + p.semi_axes[d] > hi[d]) {
            throw GenerationError("primitive '" + p.name + "' leaves the field of view");
          }
        }
        for (int iz = 0; iz < g.nz; ++iz) {
          for (int iy = 0; iy < g.ny; ++iy) {
            for (int ix = 0; ix < g.nx; ++ix) {
              const Vec3 q = voxel_position(g, ix, iy, iz);
              double rr = 0.0;
              for (int d = 0; d < dims; ++d) {
                const double u = (q[d] - p.center[d]) / p.semi_axes[d];
                rr += u * u;
              }
              if (rr <= 1.0) vol[(static_cast<std::size_t>(iz) * g.ny + iy) * g.nx + ix] += p.contrast;
            }
          }
        }
      }
    }
  }
  return stack;
}

// ---------------------------------------------------------------------------
// Bulk-motion outlier states

struct OutlierState {
  int id = 0;
  Vec3 translation_mm{};
  int rotation_axis = 0;  // 0 = SI, 1 = AP, 2 = LR
  double rotation_deg = 0.0;
};

constexpr int kOutlierStateCount = 7;

/// The seven rigid bulk-motion states; id 0 is the resting reference.
inline OutlierState outlier_state(int id) {
  switch (id) {
    case 0: return {0, {0, 0, 0}, 0, 0.0};
    case 1: return {1, {20, 0, 0}, 0, 0.0};
    case 2: return {2, {-20, 0, 0}, 0, 0.0};
    case 3: return {3, {0, 0, 0}, 1, 10.0};
    case 4: return {4, {0, 0, 0}, 1, -10.0};
    case 5: return {5, {0, 0, 0}, 0, 10.0};
    case 6: return {6, {0, 0, 0}, 0, -10.0};
    case 7: return {7, {0, 0, 0}, 2, -10.0};
    default: throw ConfigError("outlier state id must lie in 0..7");
  }
}

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 rotation_matrix(int axis, double deg) {
  const double a = deg * std::numbers::pi / 180.0;
  const double c = std::cos(a), s = std::sin(a);
  switch (axis) {
    case 0: return {{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
    case 1: return {{{c, 0, s}, {0, 1, 0}, {-s, 0, c}}};
    default: return {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
  }
}

/// Trilinear sample at fractional voxel coordinates; zero outside the grid.
inline cplx sample_linear(std::span<const cplx> vol, const ImageGrid& g, double fx, double fy, double fz) {
  const int x0 = static_cast<int>(std::floor(fx));
  const int y0 = static_cast<int>(std::floor(fy));
  const int z0 = static_cast<int>(std::floor(fz));
  const double tx = fx - x0, ty = fy - y0, tz = fz - z0;
  cplx acc{};
  for (int dz = 0; dz < (g.is3d() ? 2 : 1); ++dz) {
    const int z = z0 + dz;
    if (z < 0 || z >= g.nz) continue;
    const double wz = g.is3d() ? (dz ? tz : 1.0 - tz) : 1.0;
    for (int dy = 0; dy < 2; ++dy) {
      const int y = y0 + dy;
      if (y < 0 || y >= g.ny) continue;
      const double wy = dy ? ty : 1.0 - ty;
      for (int dx = 0; dx < 2; ++dx) {
        const int x = x0 + dx;
        if (x < 0 || x >= g.nx) continue;
        const double wx = dx ? tx : 1.0 - tx;
        acc += wz * wy * wx * vol[(static_cast<std::size_t>(z) * g.ny + y) * g.nx + x];
      }
    }
  }
  return acc;
}

}  // namespace detail

/// Rigid transform p -> R p + t about the field-of-view centre, resampled with
/// linear interpolation. On 2D grids (sagittal SI/AP plane) every rotation is
/// applied in-plane with its signed angle.
inline std::vector<cplx> apply_outlier_state(std::span<const cplx> volume, const ImageGrid& g,
                                             const OutlierState& state) {
  if (volume.size() != g.voxels()) throw ConfigError("volume size does not match grid");
  if (state.id == 0) return {volume.begin(), volume.end()};

  const detail::Mat3 rot = g.is3d() ? detail::rotation_matrix(state.rotation_axis, state.rotation_deg)
                                    : detail::rotation_matrix(2, state.rotation_deg);
  std::vector<cplx> out(volume.size());
  for (int iz = 0; iz < g.nz; ++iz) {
    for (int iy = 0; iy < g.ny; ++iy) {
      for (int ix = 0; ix < g.nx; ++ix) {
        const Vec3 p = voxel_position(g, ix, iy, iz);
        Vec3 d{p[0] - state.translation_mm[0], p[1] - state.translation_mm[1],
               g.is3d() ? p[2] - state.translation_mm[2] : 0.0};
        // Inverse rotation is the transpose.
        Vec3 q{};
        for (int i = 0; i < 3; ++i) q[i] = rot[0][i] * d[0] + rot[1][i] * d[1] + rot[2][i] * d[2];
        const double fx = q[0] / g.voxel_mm + g.nx / 2;
        const double fy = q[1] / g.voxel_mm + g.ny / 2;
        const double fz = g.is3d() ? q[2] / g.voxel_mm + g.nz / 2 : 0.0;
        out[(static_cast<std::size_t>(iz) * g.ny + iy) * g.nx + ix] = detail::sample_linear(volume, g, fx, fy, fz);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Motion schedule

namespace detail {

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

}  // namespace detail

/// Draws breathing cycles, heartbeats and bulk-motion episodes for one scan.
inline MotionSchedule build_schedule(const ExperimentConfig& cfg, double corruption_fraction,
                                     std::uint64_t seed) {
  if (!(corruption_fraction >= 0.0 && corruption_fraction <= 0.9)) {
    throw ConfigError("corruption fraction must lie in [0, 0.9]");
  }
  const auto& phys = cfg.physiology;
  const std::size_t n = cfg.readout_count();
  const double scan_ms = n * cfg.tr_ms;
  auto rng = detail::make_rng(seed, 0x5c4ed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  MotionSchedule s;
  s.respiratory_amplitude.resize(n);
  s.cardiac_phase.resize(n);
  s.cardiac.resize(n);
  s.outlier_state.assign(n, 0);

  // Breathing: sin^4 waveform (long end-expiratory rest), irregular periods.
  const double resp_base_s =
      phys.resp_period_min_s + (phys.resp_period_max_s - phys.resp_period_min_s) * unit(rng);
  {
    double period = resp_base_s + phys.resp_jitter_s * unit(rng);
    double start = -unit(rng) * period * 1000.0;
    s.respiratory_periods_s.push_back(period);
    std::size_t i = 0;
    while (i < n) {
      const double end = start + period * 1000.0;
      for (; i < n && i * cfg.tr_ms < end; ++i) {
        const double psi = (i * cfg.tr_ms - start) / (period * 1000.0);
        s.respiratory_amplitude[i] = std::pow(std::sin(std::numbers::pi * psi), 4);
      }
      if (end >= scan_ms) break;
      start = end;
      period = resp_base_s + phys.resp_jitter_s * unit(rng);
      s.respiratory_periods_s.push_back(period);
    }
  }

  // Heartbeats: base R-R from the heart rate plus per-beat jitter.
  const double hr = phys.heart_rate_min_bpm + (phys.heart_rate_max_bpm - phys.heart_rate_min_bpm) * unit(rng);
  const double rr_base_ms = 60000.0 / hr;
  {
    double rr = rr_base_ms + phys.rr_jitter_ms * unit(rng);
    double start = -unit(rng) * rr;
    s.rr_intervals_ms.push_back(rr);
    std::size_t i = 0;
    const int nc = cfg.grid.cardiac_bins;
    while (i < n) {
      const double end = start + rr;
      for (; i < n && i * cfg.tr_ms < end; ++i) {
        const double phase = (i * cfg.tr_ms - start) / rr;
        s.cardiac_phase[i] = phase;
        s.cardiac[i] = std::min(nc - 1, static_cast<int>(phase * nc));
      }
      if (end >= scan_ms) break;
      start = end;
      rr = rr_base_ms + phys.rr_jitter_ms * unit(rng);
      s.rr_intervals_ms.push_back(rr);
    }
  }
  s.respiratory = detail::quantile_bins(s.respiratory_amplitude, cfg.grid.respiratory_bins);

  // Bulk-motion episodes: exact readout budget split across disjoint episodes.
  const auto corrupted = static_cast<std::size_t>(std::llround(corruption_fraction * n));
  if (corrupted > 0) {
    const std::size_t episodes = std::min<std::size_t>(cfg.outlier_episodes, corrupted);
    std::vector<std::size_t> lengths(episodes, corrupted / episodes);
    for (std::size_t e = 0; e < corrupted % episodes; ++e) ++lengths[e];

    // Interior gaps of at least one readout keep episodes separate.
    const std::size_t free_total = n - corrupted;
    const std::size_t reserved = free_total >= episodes - 1 ? episodes - 1 : 0;
    std::uniform_int_distribution<std::size_t> cut(0, free_total - reserved);
    std::vector<std::size_t> cuts(episodes);
    for (auto& c : cuts) c = cut(rng);
    std::sort(cuts.begin(), cuts.end());
    std::uniform_int_distribution<int> pick_state(1, kOutlierStateCount);

    std::size_t pos = 0, prev_cut = 0;
    for (std::size_t e = 0; e < episodes; ++e) {
      pos += cuts[e] - prev_cut + (e > 0 && reserved > 0 ? 1 : 0);
      prev_cut = cuts[e];
      const int state = pick_state(rng);
      s.episodes.push_back({pos, lengths[e], state});
      for (std::size_t i = pos; i < pos + lengths[e]; ++i) s.outlier_state[i] = state;
      pos += lengths[e];
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Coil sensitivities

enum class CoilLayout { Uniform, BiotSavart };

/// Loop coils split between anterior and posterior planes just outside the
/// field of view. Receive sensitivity is the transverse field B_y + i B_z of
/// a unit-current loop (B0 along SI), normalized to unit peak root-sum-of-squares.
inline CoilMaps make_coil_maps(const ImageGrid& g, int coils, CoilLayout layout) {
  if (coils < 1) throw ConfigError("coil count must be >= 1");
  CoilMaps maps(g, coils);
  if (layout == CoilLayout::Uniform) {
    std::fill(maps.data.begin(), maps.data.end(), cplx{1.0, 0.0});
    return maps;
  }

  const double hx = g.nx * g.voxel_mm / 2.0;
  const double hy = g.ny * g.voxel_mm / 2.0;
  const double hz = g.is3d() ? g.nz * g.voxel_mm / 2.0 : hx;
  const double radius = 0.35 * std::min(hx, hz);
  constexpr int kSegments = 64;

  struct Loop {
    Vec3 center;
  };
  std::vector<Loop> loops;
  const int anterior = (coils + 1) / 2;
  for (int plane = 0; plane < 2; ++plane) {
    const int count = plane == 0 ? anterior : coils - anterior;
    if (count == 0) continue;
    const int rows = count >= 4 ? 2 : 1;
    const int cols = (count + rows - 1) / rows;
    const double y0 = (plane == 0 ? 1.0 : -1.0) * 1.1 * hy;
    for (int i = 0; i < count; ++i) {
      const int col = i % cols, row = i / cols;
      const double x = ((col + 0.5) / cols * 2.0 - 1.0) * 0.55 * hx;
      const double z = rows > 1 ? ((row + 0.5) / rows * 2.0 - 1.0) * 0.45 * hz : 0.0;
      loops.push_back({{x, y0, z}});
    }
  }

  for (int c = 0; c < coils; ++c) {
    const Vec3& o = loops[static_cast<std::size_t>(c)].center;
    auto sens = maps.coil(c);
    for (int iz = 0; iz < g.nz; ++iz) {
      for (int iy = 0; iy < g.ny; ++iy) {
        for (int ix = 0; ix < g.nx; ++ix) {
          const Vec3 p = voxel_position(g, ix, iy, iz);
          Vec3 b{};
          for (int s = 0; s < kSegments; ++s) {
            const double th = 2.0 * std::numbers::pi * (s + 0.5) / kSegments;
            const double dth = 2.0 * std::numbers::pi / kSegments;
            const Vec3 w{o[0] + radius * std::cos(th), o[1], o[2] + radius * std::sin(th)};
            const Vec3 dl{-radius * std::sin(th) * dth, 0.0, radius * std::cos(th) * dth};
            const Vec3 r{p[0] - w[0], p[1] - w[1], p[2] - w[2]};
            const double d = std::sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2]);
            const double inv = 1.0 / (d * d * d);
            b[0] += (dl[1] * r[2] - dl[2] * r[1]) * inv;
            b[1] += (dl[2] * r[0] - dl[0] * r[2]) * inv;
            b[2] += (dl[0] * r[1] - dl[1] * r[0]) * inv;
          }
          sens[(static_cast<std::size_t>(iz) * g.ny + iy) * g.nx + ix] = cplx{b[1], b[2]};
        }
      }
    }
  }
  double peak = 0.0;
  for (std::size_t v = 0; v < g.voxels(); ++v) peak = std::max(peak, maps.root_sum_of_squares(v));
  for (cplx& s : maps.data) s = round_to_c64(s / peak);
  return maps;
}

inline CoilLayout parse_coil_layout(const std::string& s) {
  if (s == "uniform") return CoilLayout::Uniform;
  if (s == "biot-savart") return CoilLayout::BiotSavart;
  throw ConfigError("unknown coil layout '" + s + "'");
}

// ---------------------------------------------------------------------------
// Sampling

/// One full frequency-encode line (along x) per readout. Every `sg_every`-th
/// readout is the self-gating line through the k-space centre; the others
/// follow a golden-ratio sequence through a centre-weighted phase-encode density.
struct SamplingPattern {
  std::size_t samples_per_readout = 0;
  std::vector<KIndex> indices;
  std::vector<std::uint8_t> self_gating;
};

namespace detail {

inline std::vector<double> density_cdf(int n, const SamplingParams& sp) {
  std::vector<double> cdf(static_cast<std::size_t>(n));
  double acc = 0.0;
  for (int i = 0; i < n; ++i) {
    const int centred = i - n / 2;
    const double r = std::abs(centred) / (n / 2.0);
    acc += sp.density_floor + std::pow(std::max(0.0, 1.0 - r), sp.density_power);
    cdf[static_cast<std::size_t>(i)] = acc;
  }
  for (double& c : cdf) c /= acc;
  return cdf;
}

inline int draw_line(const std::vector<double>& cdf, double u) {
  const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
  const int centred = static_cast<int>(std::min<std::ptrdiff_t>(it - cdf.begin(), static_cast<std::ptrdiff_t>(cdf.size()) - 1));
  const int n = static_cast<int>(cdf.size());
  return (centred - n / 2 + n) % n;  // unshifted FFT index
}

}  // namespace detail

inline SamplingPattern make_sampling(const ImageGrid& g, std::size_t readouts, int sg_every,
                                     const SamplingParams& sp, std::uint64_t seed) {
  SamplingPattern pat;
  pat.samples_per_readout = static_cast<std::size_t>(g.nx);
  pat.indices.resize(readouts * pat.samples_per_readout);
  pat.self_gating.resize(readouts);

  auto rng = detail::make_rng(seed, 0x5a3b1e);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double u0 = unit(rng), v0 = unit(rng);
  const auto cdf_y = detail::density_cdf(g.ny, sp);
  const auto cdf_z = detail::density_cdf(g.nz, sp);
  constexpr double kGolden = 0.6180339887498949;
  constexpr double kPlastic = 1.324717957244746;  // R2 low-discrepancy sequence

  std::size_t counter = 0;
  for (std::size_t n = 0; n < readouts; ++n) {
    int ky = 0, kz = 0;
    const bool sg = n % static_cast<std::size_t>(sg_every) == 0;
    if (!sg) {
      const double t = static_cast<double>(counter++);
      if (g.is3d()) {
        const double u = std::fmod(u0 + t / kPlastic, 1.0);
        const double v = std::fmod(v0 + t / (kPlastic * kPlastic), 1.0);
        ky = detail::draw_line(cdf_y, u);
        kz = detail::draw_line(cdf_z, v);
      } else {
        ky = detail::draw_line(cdf_y, std::fmod(u0 + t * kGolden, 1.0));
      }
    }
    pat.self_gating[n] = sg ? 1 : 0;
    const std::size_t base = (static_cast<std::size_t>(kz) * g.ny + ky) * g.nx;
    for (int kx = 0; kx < g.nx; ++kx) {
      pat.indices[n * pat.samples_per_readout + kx] = static_cast<KIndex>(base + kx);
    }
  }
  return pat;
}

/// Nominal per-bin acceleration: phase-encode lines x bins / imaging readouts.
inline double nominal_acceleration(const ImageGrid& g, const SamplingPattern& pat) {
  const auto imaging = std::count(pat.self_gating.begin(), pat.self_gating.end(), std::uint8_t{0});
  if (imaging == 0) return 0.0;
  return static_cast<double>(g.ny) * g.nz * g.bins() / static_cast<double>(imaging);
}

// ---------------------------------------------------------------------------
// Acquisition

struct AcquisitionSpec {
  CoilMaps maps;
  SamplingPattern sampling;
  double tr_ms = 4.0;
  std::optional<double> snr_db;  // nullopt: noiseless
  std::uint64_t noise_seed = 0;
};

/// Each readout samples the truth volume of its scheduled motion state (rigidly
/// transformed during bulk-motion episodes), plus circular Gaussian noise with
/// E|n|^2 = sigma^2 per complex sample. All values are rounded to complex64.
inline AcquiredDataset simulate_acquisition(const ImageStack& truth, const MotionSchedule& schedule,
                                            const AcquisitionSpec& spec, int threads = 1) {
  const ImageGrid& g = truth.grid;
  const std::size_t n = schedule.size();
  if (spec.sampling.self_gating.size() != n) throw ConfigError("sampling and schedule lengths differ");
  if (spec.maps.grid.voxels() != g.voxels()) throw ConfigError("coil maps do not match truth grid");

  AcquiredDataset ds;
  ds.grid = g;
  ds.maps = spec.maps;
  ds.samples_per_readout = spec.sampling.samples_per_readout;
  ds.kspace_index = spec.sampling.indices;
  ds.self_gating = spec.sampling.self_gating;
  ds.tr_ms = spec.tr_ms;
  ds.time_ms.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.time_ms[i] = i * spec.tr_ms;
  const std::size_t len = ds.readout_length();
  const std::size_t spr = ds.samples_per_readout;
  ds.readouts.assign(n * len, cplx{});

  const SenseOperator op(ds.maps);
  const std::size_t m = g.voxels();
  const int coils = ds.maps.coils;
  for (int state = 0; state <= kOutlierStateCount; ++state) {
    if (std::find(schedule.outlier_state.begin(), schedule.outlier_state.end(), state) ==
        schedule.outlier_state.end()) {
      continue;
    }
    const OutlierState os = outlier_state(state);
    std::vector<cplx> kspace(static_cast<std::size_t>(g.bins()) * coils * m);
    parallel_for(static_cast<std::size_t>(g.bins()), threads, [&](std::size_t k) {
      const auto vol = apply_outlier_state(truth.bin(static_cast<int>(k)), g, os);
      op.coil_kspace(vol, std::span<cplx>(kspace).subspan(k * coils * m, coils * m));
    });
    for (std::size_t i = 0; i < n; ++i) {
      if (schedule.outlier_state[i] != state) continue;
      const int k = g.flat_bin(schedule.cardiac[i], schedule.respiratory[i]);
      const cplx* ks = kspace.data() + static_cast<std::size_t>(k) * coils * m;
      const KIndex* idx = ds.kspace_index.data() + i * spr;
      cplx* y = ds.readouts.data() + i * len;
      for (int c = 0; c < coils; ++c) {
        for (std::size_t j = 0; j < spr; ++j) y[c * spr + j] = ks[c * m + idx[j]];
      }
    }
  }

  if (spec.snr_db) {
    const double energy = squared_norm(ds.readouts);
    ds.sigma = std::sqrt(energy / (static_cast<double>(ds.readouts.size()) * std::pow(10.0, *spec.snr_db / 10.0)));
    auto rng = detail::make_rng(spec.noise_seed, 0x9015e);
    std::normal_distribution<double> normal(0.0, ds.sigma / std::sqrt(2.0));
    for (cplx& y : ds.readouts) y += cplx{normal(rng), normal(rng)};
  }
  round_to_c64(ds.readouts);
  ds.schedule = schedule;
  ImageStack t = truth;
  round_to_c64(t.data);
  ds.truth = std::move(t);
  return ds;
}

/// Full generation chain for one (seed, corruption fraction) pair.
inline AcquiredDataset generate_dataset(const ExperimentConfig& cfg, std::uint64_t seed,
                                        double corruption_fraction) {
  cfg.validate();
  const auto scene = make_scene(cfg);
  const auto truth = render_truth(scene, cfg.grid);
  const auto schedule = build_schedule(cfg, corruption_fraction, seed);
  AcquisitionSpec spec;
  spec.maps = make_coil_maps(cfg.grid, cfg.coils, parse_coil_layout(cfg.coil_layout));
  spec.sampling = make_sampling(cfg.grid, schedule.size(), cfg.sg_every, cfg.sampling, seed);
  spec.tr_ms = cfg.tr_ms;
  spec.snr_db = cfg.snr_db;
  spec.noise_seed = seed;
  return simulate_acquisition(truth, schedule, spec, cfg.threads);
}

}  // namespace emore

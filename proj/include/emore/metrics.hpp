#pragma once

// Image quality (PSNR, SSIM, edge sharpness) and bin-assignment quality
// (Brier score, outlier precision/recall).

#include <Eigen/Dense>

#include <limits>

#include "emore/phantom.hpp"
#include "emore/recon.hpp"

namespace emore {

namespace detail {

inline void check_same_shape(const ImageStack& a, const ImageStack& b) {
  if (a.grid != b.grid || a.data.size() != b.data.size()) throw ConfigError("image stacks differ in shape");
}

inline double max_magnitude(const ImageStack& x) {
  double m = 0.0;
  for (const cplx& v : x.data) m = std::max(m, std::abs(v));
  return m;
}

}  // namespace detail

/// 20 log10(max|truth| / RMS(|est| - |truth|)) over all voxels and bins.
/// Identical magnitudes give +inf (reported as "exact").
inline double psnr(const ImageStack& estimate, const ImageStack& truth) {
  detail::check_same_shape(estimate, truth);
  const double peak = detail::max_magnitude(truth);
  if (!(peak > 0.0)) throw MetricError("PSNR undefined for an all-zero reference");
  double se = 0.0;
  for (std::size_t i = 0; i < truth.data.size(); ++i) {
    const double d = std::abs(estimate.data[i]) - std::abs(truth.data[i]);
    se += d * d;
  }
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  const double rmse = std::sqrt(se / static_cast<double>(truth.data.size()));
  return 20.0 * std::log10(peak / rmse);
}

inline std::string format_psnr(double db) { return std::isinf(db) && db > 0 ? "exact" : io::format_double(db); }

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
};

namespace detail {

/// Separable normalized Gaussian smoothing of an nx x ny slice with
/// half-sample symmetric boundaries.
inline std::vector<double> gaussian_blur(std::span<const double> img, int nx, int ny, const SsimOptions& o) {
  const int half = o.window / 2;
  std::vector<double> kernel(static_cast<std::size_t>(o.window));
  double total = 0.0;
  for (int i = 0; i < o.window; ++i) {
    const double d = i - half;
    kernel[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * o.sigma * o.sigma));
    total += kernel[static_cast<std::size_t>(i)];
  }
  for (double& k : kernel) k /= total;
  auto reflect = [](int i, int n) {
    while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
    return i;
  };
  std::vector<double> tmp(img.size()), out(img.size());
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      double s = 0.0;
      for (int i = 0; i < o.window; ++i) s += kernel[static_cast<std::size_t>(i)] * img[y * nx + reflect(x + i - half, nx)];
      tmp[static_cast<std::size_t>(y * nx + x)] = s;
    }
  }
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      double s = 0.0;
      for (int i = 0; i < o.window; ++i) s += kernel[static_cast<std::size_t>(i)] * tmp[reflect(y + i - half, ny) * nx + x];
      out[static_cast<std::size_t>(y * nx + x)] = s;
    }
  }
  return out;
}

}  // namespace detail

/// Mean SSIM of two real nx x ny images with dynamic range `range`.
inline double ssim_slice(std::span<const double> a, std::span<const double> b, int nx, int ny, double range,
                         const SsimOptions& o = {}) {
  const double c1 = (o.k1 * range) * (o.k1 * range);
  const double c2 = (o.k2 * range) * (o.k2 * range);
  const std::size_t n = a.size();
  std::vector<double> aa(n), bb(n), ab(n);
  for (std::size_t i = 0; i < n; ++i) {
    aa[i] = a[i] * a[i];
    bb[i] = b[i] * b[i];
    ab[i] = a[i] * b[i];
  }
  const auto ma = detail::gaussian_blur(a, nx, ny, o), mb = detail::gaussian_blur(b, nx, ny, o);
  const auto saa = detail::gaussian_blur(aa, nx, ny, o), sbb = detail::gaussian_blur(bb, nx, ny, o);
  const auto sab = detail::gaussian_blur(ab, nx, ny, o);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
    total += ((2 * ma[i] * mb[i] + c1) * (2 * cov + c2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
  }
  return total / static_cast<double>(n);
}

/// Slice-wise SSIM of magnitude images, averaged over slices and bins.
inline double ssim(const ImageStack& estimate, const ImageStack& truth, const SsimOptions& o = {}) {
  detail::check_same_shape(estimate, truth);
  const double range = detail::max_magnitude(truth);
  if (!(range > 0.0)) throw MetricError("SSIM undefined for an all-zero reference");
  const ImageGrid& g = truth.grid;
  const std::size_t plane = static_cast<std::size_t>(g.nx) * g.ny;
  std::vector<double> scores;
  std::vector<double> a(plane), b(plane);
  for (int k = 0; k < g.bins(); ++k) {
    for (int z = 0; z < g.nz; ++z) {
      for (std::size_t i = 0; i < plane; ++i) {
        a[i] = std::abs(estimate.bin(k)[z * plane + i]);
        b[i] = std::abs(truth.bin(k)[z * plane + i]);
      }
      scores.push_back(ssim_slice(a, b, g.nx, g.ny, range, o));
    }
  }
  return pairwise_sum(scores) / static_cast<double>(scores.size());
}

// ---------------------------------------------------------------------------
// Edge sharpness

struct EdgeProfileSpec {
  struct Segment {
    int bin = 0;
    Vec3 start{};  // voxel coordinates (x, y, z)
    Vec3 end{};
  };
  std::vector<Segment> segments;
  int samples = 16;
};

/// Radial profiles across the blood-pool boundary of every bin, in the slice
/// through the heart centre: from 0.4 to 1.25 of the blood-pool radius.
inline EdgeProfileSpec blood_pool_profiles(const PhantomScene& scene, const ImageGrid& g, int per_bin = 8,
                                           int samples = 16) {
  const Primitive* pool = scene.find("blood_pool");
  if (!pool) throw MetricError("scene has no blood pool to place edge profiles on");
  EdgeProfileSpec spec;
  spec.samples = samples;
  for (int k = 0; k < g.bins(); ++k) {
    const Primitive p = scene.instance(*pool, g.cardiac_of(k), g.respiratory_of(k));
    const Vec3 c{p.center[0] / g.voxel_mm + g.nx / 2, p.center[1] / g.voxel_mm + g.ny / 2,
                 std::round(p.center[2] / g.voxel_mm) + g.nz / 2};
    for (int i = 0; i < per_bin; ++i) {
      const double ang = 2.0 * std::numbers::pi * (i + 0.5) / per_bin;
      const double dx = std::cos(ang), dy = std::sin(ang);
      const double rx = p.semi_axes[0] / g.voxel_mm, ry = p.semi_axes[1] / g.voxel_mm;
      const double r = 1.0 / std::sqrt(dx * dx / (rx * rx) + dy * dy / (ry * ry));
      spec.segments.push_back({k, {c[0] + 0.4 * r * dx, c[1] + 0.4 * r * dy, c[2]},
                               {c[0] + 1.25 * r * dx, c[1] + 1.25 * r * dy, c[2]}});
    }
  }
  return spec;
}

/// Magnitude samples along a segment (bilinear in-plane, nearest slice).
inline std::vector<double> sample_profile(const ImageStack& x, const EdgeProfileSpec::Segment& s, int samples) {
  const ImageGrid& g = x.grid;
  const auto vol = x.bin(s.bin);
  const int z = std::clamp(static_cast<int>(std::lround(s.start[2])), 0, g.nz - 1);
  auto at = [&](int ix, int iy) {
    ix = std::clamp(ix, 0, g.nx - 1);
    iy = std::clamp(iy, 0, g.ny - 1);
    return std::abs(vol[(static_cast<std::size_t>(z) * g.ny + iy) * g.nx + ix]);
  };
  std::vector<double> out(static_cast<std::size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    const double t = samples > 1 ? static_cast<double>(i) / (samples - 1) : 0.0;
    const double fx = s.start[0] + t * (s.end[0] - s.start[0]);
    const double fy = s.start[1] + t * (s.end[1] - s.start[1]);
    const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
    const double ax = fx - x0, ay = fy - y0;
    out[static_cast<std::size_t>(i)] = (1 - ax) * (1 - ay) * at(x0, y0) + ax * (1 - ay) * at(x0 + 1, y0) +
                                       (1 - ax) * ay * at(x0, y0 + 1) + ax * ay * at(x0 + 1, y0 + 1);
  }
  return out;
}

struct SigmoidFit {
  double a = 0.0, b = 0.0, c = 0.0, p0 = 0.0;
  bool converged = false;
  bool degenerate = false;  // flat profile, no edge to fit
};

/// Least-squares fit of a + b / (1 + exp(-c (p - p0))) with a damped
/// Gauss-Newton (Levenberg-Marquardt) iteration. |c| is capped at `max_slope`
/// so an ideal step (unbounded c) still yields a finite, converged fit.
inline SigmoidFit fit_sigmoid(std::span<const double> pos, std::span<const double> val, double max_slope = 20.0) {
  SigmoidFit f;
  const auto [lo_it, hi_it] = std::minmax_element(val.begin(), val.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi - lo > 1e-9 * std::max(1.0, std::abs(hi)))) {
    f.degenerate = true;
    return f;
  }
  const bool rising = val.back() >= val.front();
  const double mid = 0.5 * (lo + hi);
  f.a = lo;
  f.b = hi - lo;
  f.c = rising ? 1.0 : -1.0;
  f.p0 = 0.5 * (pos.front() + pos.back());
  for (std::size_t i = 0; i + 1 < val.size(); ++i) {
    if ((val[i] - mid) * (val[i + 1] - mid) <= 0 && val[i] != val[i + 1]) {
      f.p0 = pos[i] + (mid - val[i]) / (val[i + 1] - val[i]) * (pos[i + 1] - pos[i]);
      break;
    }
  }

  using Vec4 = Eigen::Vector4d;
  auto cost = [&](const Vec4& q) {
    double s = 0.0;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double e = q[0] + q[1] / (1.0 + std::exp(-q[2] * (pos[i] - q[3]))) - val[i];
      s += e * e;
    }
    return s;
  };
  Vec4 q(f.a, f.b, f.c, f.p0);
  double lambda = 1e-3;
  double current = cost(q);
  const double scale = (hi - lo) * (hi - lo) * static_cast<double>(val.size());
  for (int it = 0; it < 500; ++it) {
    Eigen::Matrix4d jtj = Eigen::Matrix4d::Zero();
    Vec4 jtr = Vec4::Zero();
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double d = pos[i] - q[3];
      const double s = 1.0 / (1.0 + std::exp(-q[2] * d));
      const double ds = s * (1.0 - s);
      const Vec4 j(1.0, s, q[1] * ds * d, -q[1] * ds * q[2]);
      const double r = q[0] + q[1] * s - val[i];
      jtj += j * j.transpose();
      jtr += j * r;
    }
    if (jtr.norm() < 1e-12 * scale) {
      f.converged = true;
      break;
    }
    bool improved = false;
    for (int tries = 0; tries < 30 && !improved; ++tries) {
      Eigen::Matrix4d damped = jtj;
      damped.diagonal() += lambda * (jtj.diagonal().array() + 1e-12).matrix();
      Vec4 next = q - damped.ldlt().solve(jtr);
      next[2] = std::clamp(next[2], -max_slope, max_slope);
      const double c_next = cost(next);
      if (std::isfinite(c_next) && c_next <= current) {
        const double gain = current - c_next;
        q = next;
        current = c_next;
        lambda = std::max(lambda / 3.0, 1e-12);
        improved = true;
        if (gain <= 1e-14 * scale || std::abs(q[2]) >= max_slope) f.converged = true;
      } else {
        lambda *= 4.0;
      }
    }
    if (!improved) {
      // No descent direction left at any damping: a stationary point.
      f.converged = std::isfinite(current);
      break;
    }
    if (f.converged) break;
  }
  f.a = q[0];
  f.b = q[1];
  f.c = q[2];
  f.p0 = q[3];
  if (!std::isfinite(f.c) || !std::isfinite(f.b)) f.converged = false;
  return f;
}

/// Mean contrast-normalized maximum slope |c| / 4 (per voxel) of sigmoids
/// fitted to every profile. Flat profiles are excluded.
inline double edge_sharpness(const ImageStack& x, const EdgeProfileSpec& spec) {
  if (spec.samples < 8) throw MetricError("edge profiles need at least 8 samples");
  std::vector<double> slopes;
  std::size_t failed = 0, fitted = 0;
  for (const auto& s : spec.segments) {
    const auto val = sample_profile(x, s, spec.samples);
    const double len = std::hypot(s.end[0] - s.start[0], s.end[1] - s.start[1]);
    std::vector<double> pos(val.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = len * static_cast<double>(i) / (pos.size() - 1);
    const auto f = fit_sigmoid(pos, val);
    if (f.degenerate) continue;
    ++fitted;
    if (!f.converged) {
      ++failed;
      continue;
    }
    slopes.push_back(std::abs(f.c) / 4.0);
  }
  if (fitted == 0) throw MetricError("no edge profile crosses an intensity transition");
  if (2 * failed > fitted) throw MetricError("sigmoid fit failed on more than half of the edge profiles");
  return pairwise_sum(slopes) / static_cast<double>(slopes.size());
}

// ---------------------------------------------------------------------------
// Assignment quality

using TrueWeights = WeightMatrix;

/// One-hot on the scheduled bin; corrupted readouts on the outlier bin.
inline TrueWeights true_weights(const MotionSchedule& s, const ImageGrid& g) {
  TrueWeights w(s.size(), static_cast<std::size_t>(g.bins()) + 1);
  for (std::size_t n = 0; n < s.size(); ++n) w(n, static_cast<std::size_t>(s.true_bin(n, g))) = 1.0;
  return w;
}

/// Mean over readouts of the squared distance between weight rows, all K+1 columns.
inline double brier(const WeightMatrix& w, const TrueWeights& truth) {
  if (w.rows != truth.rows || w.cols != truth.cols) throw ConfigError("brier: shapes differ");
  if (w.rows == 0) throw MetricError("brier: no readouts");
  std::vector<double> rows(w.rows);
  for (std::size_t n = 0; n < w.rows; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < w.cols; ++k) {
      const double d = truth(n, k) - w(n, k);
      s += d * d;
    }
    rows[n] = s;
  }
  return pairwise_sum(rows) / static_cast<double>(w.rows);
}

struct DetectionScores {
  double precision = 1.0;
  double recall = 1.0;
  std::size_t true_positive = 0, false_positive = 0, false_negative = 0;
};

/// A readout is flagged when its outlier-bin weight exceeds 0.5. Precision
/// with nothing flagged and recall with nothing corrupted are both 1.
inline DetectionScores outlier_detection_scores(const WeightMatrix& w, const MotionSchedule& s) {
  if (w.rows != s.size()) throw ConfigError("detection scores: weights and schedule lengths differ");
  DetectionScores d;
  for (std::size_t n = 0; n < w.rows; ++n) {
    const bool flagged = w(n, w.outlier()) > 0.5;
    const bool corrupt = s.outlier_state[n] != 0;
    d.true_positive += flagged && corrupt;
    d.false_positive += flagged && !corrupt;
    d.false_negative += !flagged && corrupt;
  }
  const auto tp = static_cast<double>(d.true_positive);
  if (d.true_positive + d.false_positive > 0) d.precision = tp / static_cast<double>(d.true_positive + d.false_positive);
  if (d.true_positive + d.false_negative > 0) d.recall = tp / static_cast<double>(d.true_positive + d.false_negative);
  return d;
}

}  // namespace emore

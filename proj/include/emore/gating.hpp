#pragma once

// Self-gating: surrogate extraction from the repeated centre line and the
// initial hard bin assignment g_n.

#include <numeric>

#include "emore/dataset.hpp"
#include "emore/io.hpp"

namespace emore {

// ---------------------------------------------------------------------------
// Zero-phase Butterworth band-pass

/// Second-order section, a0 normalized to 1.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

namespace detail {

// Pole-pair quality factors of a 4th-order Butterworth prototype.
constexpr std::array<double, 2> kButterworth4Q{0.54119610014619701, 1.3065629648763766};

inline Biquad rbj_lowpass(double f0, double fs, double q) {
  const double w = 2.0 * std::numbers::pi * f0 / fs;
  const double cw = std::cos(w), alpha = std::sin(w) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  return {(1.0 - cw) / 2.0 / a0, (1.0 - cw) / a0, (1.0 - cw) / 2.0 / a0, -2.0 * cw / a0, (1.0 - alpha) / a0};
}

inline Biquad rbj_highpass(double f0, double fs, double q) {
  const double w = 2.0 * std::numbers::pi * f0 / fs;
  const double cw = std::cos(w), alpha = std::sin(w) / (2.0 * q);
  const double a0 = 1.0 + alpha;
  return {(1.0 + cw) / 2.0 / a0, -(1.0 + cw) / a0, (1.0 + cw) / 2.0 / a0, -2.0 * cw / a0, (1.0 - alpha) / a0};
}

inline void run_sections(std::span<double> x, std::span<const Biquad> sections) {
  for (const Biquad& s : sections) {
    double z1 = 0.0, z2 = 0.0;  // transposed direct form II
    for (double& v : x) {
      const double in = v;
      const double out = s.b0 * in + z1;
      z1 = s.b1 * in - s.a1 * out + z2;
      z2 = s.b2 * in - s.a2 * out;
      v = out;
    }
  }
}

}  // namespace detail

/// 4th-order Butterworth high-pass at `low_hz` cascaded with a 4th-order
/// low-pass at `high_hz`; the low-pass is dropped at or above Nyquist.
inline std::vector<Biquad> butterworth_bandpass(double low_hz, double high_hz, double fs) {
  if (!(low_hz > 0 && high_hz > low_hz && fs > 0)) throw ConfigError("invalid band-pass edges");
  std::vector<Biquad> s;
  for (double q : detail::kButterworth4Q) s.push_back(detail::rbj_highpass(low_hz, fs, q));
  if (high_hz < fs / 2.0) {
    for (double q : detail::kButterworth4Q) s.push_back(detail::rbj_lowpass(high_hz, fs, q));
  }
  return s;
}

/// Forward-backward filtering with odd reflection padding of `pad` samples.
inline std::vector<double> filtfilt(std::span<const double> x, std::span<const Biquad> sections,
                                    std::size_t pad) {
  const std::size_t n = x.size();
  if (n < 2) return {x.begin(), x.end()};
  pad = std::min(pad, n - 1);
  std::vector<double> ext(n + 2 * pad);
  for (std::size_t i = 0; i < pad; ++i) {
    ext[i] = 2.0 * x[0] - x[pad - i];
    ext[n + pad + i] = 2.0 * x[n - 1] - x[n - 2 - i];
  }
  std::copy(x.begin(), x.end(), ext.begin() + static_cast<std::ptrdiff_t>(pad));
  detail::run_sections(ext, sections);
  std::reverse(ext.begin(), ext.end());
  detail::run_sections(ext, sections);
  std::reverse(ext.begin(), ext.end());
  return {ext.begin() + static_cast<std::ptrdiff_t>(pad), ext.begin() + static_cast<std::ptrdiff_t>(pad + n)};
}

// ---------------------------------------------------------------------------
// Surrogates

struct SurrogateSignals {
  std::vector<double> sg_time_ms;
  std::vector<double> respiratory;  // per self-gating readout, unit variance
  std::vector<double> cardiac;      // per self-gating readout, unit variance
  std::vector<double> triggers_ms;  // strictly increasing
  std::vector<double> readout_respiratory;    // per readout, interpolated
  std::vector<double> readout_cardiac_phase;  // per readout, [0, 1)
};

/// Bin index per readout (0-based flat k, see ImageGrid).
struct HardAssignment {
  ImageGrid grid;
  std::vector<int> bin;

  std::size_t size() const { return bin.size(); }
};

namespace detail {

struct PrincipalMode {
  std::vector<double> spatial;   // unit norm, one weight per feature row
  std::vector<double> temporal;  // zero mean, unit variance
};

inline std::vector<double> project(const std::vector<std::vector<double>>& rows, std::span<const double> v) {
  std::vector<double> t(rows.empty() ? 0 : rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < t.size(); ++j) t[j] += v[i] * rows[i][j];
  }
  return t;
}

/// Standardizes in place; false when the signal has zero variance.
inline bool standardize(std::vector<double>& t) {
  const double mean = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
  double var = 0.0;
  for (double& x : t) {
    x -= mean;
    var += x * x;
  }
  var /= static_cast<double>(t.size());
  if (!(var > 0.0)) return false;
  for (double& x : t) x /= std::sqrt(var);
  return true;
}

/// Leading principal mode of a (features x time) real matrix by power
/// iteration on X X^T, started from the row energies. Only the time samples
/// flagged in `use` (all when empty) shape the spatial mode; the temporal
/// signal is the projection of every sample. Empty on zero energy.
inline PrincipalMode principal_mode(const std::vector<std::vector<double>>& rows,
                                    const std::vector<bool>& use = {}) {
  const std::size_t f = rows.size();
  PrincipalMode mode;
  std::vector<std::vector<double>> kept_storage;
  const std::vector<std::vector<double>>* fit = &rows;
  if (!use.empty()) {
    kept_storage.resize(f);
    for (std::size_t i = 0; i < f; ++i) {
      for (std::size_t j = 0; j < use.size(); ++j) {
        if (use[j]) kept_storage[i].push_back(rows[i][j]);
      }
    }
    fit = &kept_storage;
  }
  const auto& x = *fit;
  std::vector<double> v(f);
  double total = 0.0;
  for (std::size_t i = 0; i < f; ++i) {
    v[i] = std::sqrt(std::inner_product(x[i].begin(), x[i].end(), x[i].begin(), 0.0));
    total += v[i] * v[i];
  }
  if (!(total > 0.0)) return mode;
  for (double& x : v) x /= std::sqrt(total);
  for (int it = 0; it < 1000; ++it) {
    const auto t = project(x, v);
    std::vector<double> next(f);
    double norm = 0.0;
    for (std::size_t i = 0; i < f; ++i) {
      next[i] = std::inner_product(x[i].begin(), x[i].end(), t.begin(), 0.0);
      norm += next[i] * next[i];
    }
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) return mode;
    double delta = 0.0;
    for (std::size_t i = 0; i < f; ++i) {
      next[i] /= norm;
      delta = std::max(delta, std::abs(next[i] - v[i]));
    }
    v = std::move(next);
    if (delta < 1e-12) break;
  }
  auto t = project(rows, v);
  if (!standardize(t)) return mode;
  mode.spatial = std::move(v);
  mode.temporal = std::move(t);
  return mode;
}

inline double skewness(std::span<const double> x) {
  double m2 = 0.0, m3 = 0.0;
  for (double v : x) {
    m2 += v * v;
    m3 += v * v * v;
  }
  m2 /= static_cast<double>(x.size());
  m3 /= static_cast<double>(x.size());
  return m2 > 0 ? m3 / std::pow(m2, 1.5) : 0.0;
}

inline double median(std::vector<double> x) {
  const auto mid = x.begin() + static_cast<std::ptrdiff_t>(x.size() / 2);
  std::nth_element(x.begin(), mid, x.end());
  return *mid;
}

/// Time samples whose band-passed energy stays within a multiple of the
/// median energy. Filter ringing from abrupt bulk motion concentrates
/// energy in few samples and would otherwise dominate the principal mode.
inline std::vector<bool> typical_samples(const std::vector<std::vector<double>>& rows) {
  const std::size_t n = rows.empty() ? 0 : rows.front().size();
  std::vector<double> e(n, 0.0);
  for (const auto& r : rows) {
    for (std::size_t j = 0; j < n; ++j) e[j] += r[j] * r[j];
  }
  const double limit = 3.0 * median(e);
  std::vector<bool> use(n);
  for (std::size_t j = 0; j < n; ++j) use[j] = e[j] <= limit;
  return use;
}

}  // namespace detail

/// Quantile skewness (q_hi + q_lo - 2 median) / (q_hi - q_lo) at q_lo = p.
/// Unlike the moment skewness it ignores a minority of large transients.
inline double bowley_skewness(std::span<const double> x, double p = 0.10) {
  std::vector<double> v(x.begin(), x.end());
  std::sort(v.begin(), v.end());
  auto q = [&](double f) { return v[static_cast<std::size_t>(f * static_cast<double>(v.size() - 1))]; };
  const double lo = q(p), hi = q(1.0 - p), med = q(0.5);
  return hi > lo ? (hi + lo - 2.0 * med) / (hi - lo) : 0.0;
}

/// Band-passed first principal components of a Casorati matrix given as real
/// feature rows over time. Returns {respiratory, cardiac}, each unit variance.
/// Default orientation: the most-populated respiratory extreme (end-expiration)
/// low, and the sharp cardiac extreme as a positive peak.
inline std::pair<std::vector<double>, std::vector<double>> casorati_surrogates(
    const std::vector<std::vector<double>>& rows, double sample_rate_hz, const GatingParams& gp) {
  if (rows.empty() || rows.front().size() < 4) throw GatingError("self-gating matrix is empty");
  // Variation about each row's mean, against the raw energy; filter roundoff
  // alone must not pass for a motion signal.
  double spread = 0.0, energy = 0.0;
  for (const auto& r : rows) {
    const double m = std::accumulate(r.begin(), r.end(), 0.0) / static_cast<double>(r.size());
    for (double v : r) {
      spread += (v - m) * (v - m);
      energy += v * v;
    }
  }
  if (!(spread > 1e-24 * energy)) throw GatingError("self-gating signal has zero variance");

  auto band = [&](double lo, double hi) {
    const auto sections = butterworth_bandpass(lo, hi, sample_rate_hz);
    const auto pad = static_cast<std::size_t>(std::ceil(3.0 * sample_rate_hz / lo));
    std::vector<std::vector<double>> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(filtfilt(r, sections, pad));
    return detail::principal_mode(out, detail::typical_samples(out)).temporal;
  };

  auto resp = band(gp.resp_band_low_hz, gp.resp_band_high_hz);
  auto card = band(gp.cardiac_band_low_hz, gp.cardiac_band_high_hz);
  if (resp.empty() || card.empty()) throw GatingError("self-gating signal has zero variance");

  if (bowley_skewness(resp) < 0) {
    for (double& v : resp) v = -v;
  }
  if (bowley_skewness(card) < 0) {
    for (double& v : card) v = -v;
  }
  return {std::move(resp), std::move(card)};
}

/// First-order superior-inferior displacement (voxels, + = toward +x) of each
/// self-gating projection relative to the mean projection. The self-gating
/// line is a full frequency-encode line, so its inverse DFT along x is the
/// coil-wise 1D projection of the volume. Empty when the line is incomplete.
inline std::vector<double> si_displacement(const AcquiredDataset& ds, std::span<const std::size_t> sg) {
  const int nx = ds.grid.nx;
  if (ds.samples_per_readout != static_cast<std::size_t>(nx)) return {};
  ImageGrid line_grid;
  line_grid.nx = nx;
  line_grid.ny = 1;
  line_grid.nz = 1;
  const Fft fft(line_grid);
  std::vector<std::vector<double>> profile(sg.size(), std::vector<double>(static_cast<std::size_t>(nx)));
  std::vector<cplx> line(static_cast<std::size_t>(nx));
  for (std::size_t j = 0; j < sg.size(); ++j) {
    const auto idx = ds.sampling_indices(sg[j]);
    const auto y = ds.readout(sg[j]);
    for (int c = 0; c < ds.maps.coils; ++c) {
      std::fill(line.begin(), line.end(), cplx{});
      for (int i = 0; i < nx; ++i) line[idx[i] % static_cast<KIndex>(nx)] = y[static_cast<std::size_t>(c * nx + i)];
      fft.inverse(line);
      for (int x = 0; x < nx; ++x) profile[j][static_cast<std::size_t>(x)] += std::norm(line[static_cast<std::size_t>(x)]);
    }
  }
  std::vector<double> mean(static_cast<std::size_t>(nx)), slope(static_cast<std::size_t>(nx));
  for (const auto& p : profile) {
    for (int x = 0; x < nx; ++x) mean[static_cast<std::size_t>(x)] += p[static_cast<std::size_t>(x)] / static_cast<double>(profile.size());
  }
  double slope_energy = 0.0;
  for (int x = 0; x < nx; ++x) {
    slope[static_cast<std::size_t>(x)] = 0.5 * (mean[static_cast<std::size_t>((x + 1) % nx)] - mean[static_cast<std::size_t>((x + nx - 1) % nx)]);
    slope_energy += slope[static_cast<std::size_t>(x)] * slope[static_cast<std::size_t>(x)];
  }
  if (!(slope_energy > 0.0)) return {};
  // P_t(x) ~ P(x - d) ~ P(x) - d P'(x)
  std::vector<double> d(sg.size());
  for (std::size_t j = 0; j < sg.size(); ++j) {
    double s = 0.0;
    for (std::size_t x = 0; x < mean.size(); ++x) s += (profile[j][x] - mean[x]) * slope[x];
    d[j] = -s / slope_energy;
  }
  return d;
}

/// Local maxima above zero, at least `min_separation` samples apart (taller
/// peaks win), refined to sub-sample position by parabolic interpolation.
inline std::vector<double> detect_peaks(std::span<const double> x, double min_separation) {
  std::vector<std::size_t> cand;
  for (std::size_t i = 1; i + 1 < x.size(); ++i) {
    if (x[i] > 0 && x[i] > x[i - 1] && x[i] >= x[i + 1]) cand.push_back(i);
  }
  std::stable_sort(cand.begin(), cand.end(), [&](std::size_t a, std::size_t b) { return x[a] > x[b]; });
  std::vector<std::size_t> kept;
  for (std::size_t c : cand) {
    const bool clear = std::all_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return std::abs(static_cast<double>(c) - static_cast<double>(k)) >= min_separation;
    });
    if (clear) kept.push_back(c);
  }
  std::sort(kept.begin(), kept.end());
  std::vector<double> pos;
  for (std::size_t i : kept) {
    const double denom = x[i - 1] - 2.0 * x[i] + x[i + 1];
    const double delta = denom != 0.0 ? 0.5 * (x[i - 1] - x[i + 1]) / denom : 0.0;
    pos.push_back(static_cast<double>(i) + std::clamp(delta, -0.5, 0.5));
  }
  return pos;
}

/// Phase in [0, 1) of time t relative to a strictly increasing trigger list;
/// outside the covered range the nearest R-R interval is extrapolated.
inline double cardiac_phase_at(std::span<const double> triggers, double t) {
  const std::size_t m = triggers.size();
  double phase = 0.0;
  if (t < triggers.front()) {
    phase = (t - triggers[0]) / (triggers[1] - triggers[0]);
  } else if (t >= triggers.back()) {
    phase = (t - triggers[m - 1]) / (triggers[m - 1] - triggers[m - 2]);
  } else {
    const auto it = std::upper_bound(triggers.begin(), triggers.end(), t);
    const std::size_t i = static_cast<std::size_t>(it - triggers.begin()) - 1;
    phase = (t - triggers[i]) / (triggers[i + 1] - triggers[i]);
  }
  phase -= std::floor(phase);
  return phase >= 1.0 ? 0.0 : phase;
}

constexpr double kMinGatingDurationS = 20.0;

inline SurrogateSignals extract_surrogates(const AcquiredDataset& ds, const GatingParams& gp) {
  std::vector<std::size_t> sg;
  for (std::size_t n = 0; n < ds.readout_count(); ++n) {
    if (ds.self_gating[n]) sg.push_back(n);
  }
  if (sg.size() < 8) throw GatingError("too few self-gating readouts");
  const double duration_s = (ds.time_ms[sg.back()] - ds.time_ms[sg.front()]) / 1000.0;
  if (duration_s < kMinGatingDurationS) throw GatingError("scan too short for respiratory gating");
  const double dt_ms = (ds.time_ms[sg.back()] - ds.time_ms[sg.front()]) / static_cast<double>(sg.size() - 1);
  const double fs = 1000.0 / dt_ms;

  // Casorati matrix: real and imaginary parts of every coil sample over time.
  const std::size_t len = ds.readout_length();
  std::vector<std::vector<double>> rows(2 * len, std::vector<double>(sg.size()));
  for (std::size_t j = 0; j < sg.size(); ++j) {
    const auto y = ds.readout(sg[j]);
    for (std::size_t i = 0; i < len; ++i) {
      rows[2 * i][j] = y[i].real();
      rows[2 * i + 1][j] = y[i].imag();
    }
  }

  SurrogateSignals out;
  for (std::size_t n : sg) out.sg_time_ms.push_back(ds.time_ms[n]);
  std::tie(out.respiratory, out.cardiac) = casorati_surrogates(rows, fs, gp);

  // Both respiratory extremes can be equally populated (equal-efficiency
  // motion states), so when the projection geometry is available the sign is
  // anchored physically instead: organs move toward +x (inferior) on
  // inspiration, and end-expiration is the low end of the surrogate.
  const auto disp = si_displacement(ds, sg);
  if (!disp.empty()) {
    const auto smooth = filtfilt(disp, butterworth_bandpass(gp.resp_band_low_hz, gp.resp_band_high_hz, fs),
                                 static_cast<std::size_t>(std::ceil(3.0 * fs / gp.resp_band_low_hz)));
    if (std::inner_product(smooth.begin(), smooth.end(), out.respiratory.begin(), 0.0) < 0) {
      for (double& v : out.respiratory) v = -v;
    }
  }

  const double min_sep = (60.0 / gp.max_heart_rate_bpm) * fs;
  for (double p : detect_peaks(out.cardiac, min_sep)) {
    out.triggers_ms.push_back(out.sg_time_ms.front() + p * dt_ms);
  }

  const std::size_t n = ds.readout_count();
  out.readout_respiratory.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double t = ds.time_ms[i];
    const auto& ts = out.sg_time_ms;
    if (t <= ts.front()) {
      out.readout_respiratory[i] = out.respiratory.front();
    } else if (t >= ts.back()) {
      out.readout_respiratory[i] = out.respiratory.back();
    } else {
      const auto it = std::upper_bound(ts.begin(), ts.end(), t);
      const std::size_t j = static_cast<std::size_t>(it - ts.begin());
      const double w = (t - ts[j - 1]) / (ts[j] - ts[j - 1]);
      out.readout_respiratory[i] = (1.0 - w) * out.respiratory[j - 1] + w * out.respiratory[j];
    }
  }
  if (out.triggers_ms.size() >= 2) {
    out.readout_cardiac_phase.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      out.readout_cardiac_phase[i] = cardiac_phase_at(out.triggers_ms, ds.time_ms[i]);
    }
  }
  return out;
}

/// Respiratory bins are amplitude quantiles (equal data efficiency); cardiac
/// bins split each R-R interval into equal-duration phases.
inline HardAssignment assign_bins(const SurrogateSignals& s, const ImageGrid& g) {
  if (s.triggers_ms.size() < 2 || s.readout_cardiac_phase.size() != s.readout_respiratory.size()) {
    throw GatingError("fewer than two cardiac triggers detected");
  }
  HardAssignment a;
  a.grid = g;
  const auto resp = detail::quantile_bins(s.readout_respiratory, g.respiratory_bins);
  a.bin.resize(resp.size());
  for (std::size_t n = 0; n < resp.size(); ++n) {
    const int c = std::min(g.cardiac_bins - 1, static_cast<int>(s.readout_cardiac_phase[n] * g.cardiac_bins));
    a.bin[n] = g.flat_bin(c, resp[n]);
  }
  return a;
}

/// Columns: readout, time_ms, resp_amplitude, cardiac_phase, g_n (1-based).
inline void write_assignment_csv(const io::fs::path& path, const AcquiredDataset& ds,
                                 const SurrogateSignals& s, const HardAssignment& a) {
  auto f = io::open_out(path);
  f << "readout,time_ms,resp_amplitude,cardiac_phase,g_n\n";
  for (std::size_t n = 0; n < a.size(); ++n) {
    f << n << ',' << io::format_double(ds.time_ms[n]) << ',' << io::format_double(s.readout_respiratory[n])
      << ',' << io::format_double(s.readout_cardiac_phase[n]) << ',' << (a.bin[n] + 1) << '\n';
  }
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

struct AssignmentTable {
  HardAssignment assignment;
  std::vector<double> resp_amplitude;
};

inline AssignmentTable read_assignment_csv(const io::fs::path& path, const ImageGrid& g) {
  const auto t = io::read_csv(path);
  const auto cg = t.column("g_n"), cr = t.column("resp_amplitude");
  AssignmentTable out;
  out.assignment.grid = g;
  for (const auto& row : t.rows) {
    const auto k = io::parse_int(row[cg]) - 1;
    if (k < 0 || k >= g.bins()) throw IoError("assignment bin out of range");
    out.assignment.bin.push_back(static_cast<int>(k));
    out.resp_amplitude.push_back(io::parse_double(row[cr]));
  }
  return out;
}

}  // namespace emore

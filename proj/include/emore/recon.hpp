#pragma once

// EM-guided soft bin correction with an outlier bin, the ADMM/TV M-step and
// the compressed-sensing baseline (frozen one-hot weights).

#include <functional>
#include <limits>
#include <optional>

#include "emore/dataset.hpp"
#include "emore/gating.hpp"

namespace emore {

/// N x cols matrix whose rows are probability vectors.
template <typename Tag>
struct RowStochastic {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  RowStochastic() = default;
  RowStochastic(std::size_t n, std::size_t c) : rows(n), cols(c), data(n * c) {}

  std::span<double> row(std::size_t n) { return {data.data() + n * cols, cols}; }
  std::span<const double> row(std::size_t n) const { return {data.data() + n * cols, cols}; }
  double operator()(std::size_t n, std::size_t k) const { return data[n * cols + k]; }
  double& operator()(std::size_t n, std::size_t k) { return data[n * cols + k]; }
  /// Index of the outlier column.
  std::size_t outlier() const { return cols - 1; }

  /// Largest |row sum - 1| over all rows; throws if an entry leaves [0, 1].
  double max_row_error() const {
    double worst = 0.0;
    for (std::size_t n = 0; n < rows; ++n) {
      double s = 0.0;
      for (double v : row(n)) {
        if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("probability entry outside [0, 1]");
        s += v;
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
    return worst;
  }

  bool operator==(const RowStochastic&) const = default;
};

struct WeightTag {};
struct PriorTag {};
using WeightMatrix = RowStochastic<WeightTag>;
using PriorMatrix = RowStochastic<PriorTag>;

/// theta = alpha_g on g_n, alpha_o on the outlier bin, the rest spread evenly.
inline PriorMatrix make_prior(const HardAssignment& a, double alpha_g, double alpha_o) {
  const int k_valid = a.grid.bins();
  if (alpha_g < 0 || alpha_o < 0 || alpha_g + alpha_o > 1.0 + 1e-12) {
    throw ConfigError("prior needs alpha_g, alpha_o >= 0 and alpha_g + alpha_o <= 1");
  }
  PriorMatrix p(a.size(), static_cast<std::size_t>(k_valid) + 1);
  const double rest = k_valid > 1 ? std::max(0.0, 1.0 - alpha_g - alpha_o) / (k_valid - 1) : 0.0;
  // With a single valid bin the leftover mass has nowhere else to go.
  const double on_g = k_valid > 1 ? alpha_g : 1.0 - alpha_o;
  for (std::size_t n = 0; n < a.size(); ++n) {
    auto r = p.row(n);
    std::fill(r.begin(), r.end() - 1, rest);
    r[static_cast<std::size_t>(a.bin[n])] = on_g;
    r.back() = alpha_o;
  }
  return p;
}

/// w(0): one-hot on the self-gating bin, nothing on the outlier bin.
inline WeightMatrix one_hot(const HardAssignment& a) {
  WeightMatrix w(a.size(), static_cast<std::size_t>(a.grid.bins()) + 1);
  for (std::size_t n = 0; n < a.size(); ++n) {
    const int k = a.bin[n];
    if (k < 0 || k >= a.grid.bins()) throw ConfigError("assignment bin out of range");
    w(n, static_cast<std::size_t>(k)) = 1.0;
  }
  return w;
}

inline void check_consistent(const AcquiredDataset& ds, const ImageGrid& g, std::size_t rows) {
  if (ds.grid.voxels() != g.voxels() || ds.grid.bins() != g.bins()) {
    throw ConfigError("dataset grid does not match the reconstruction grid");
  }
  if (rows != ds.readout_count()) throw ConfigError("weights/assignment length does not match readouts");
}

/// ||A_(n,k) x_k - y_n||^2 via the reference per-readout forward operator.
inline double residual_energy(const ImageStack& x, const AcquiredDataset& ds, std::size_t n, int k) {
  if (k < 0 || k >= x.bins()) throw ConfigError("residual_energy: bin index out of range");
  const auto ax = SenseOperator(ds.maps).forward(x.bin(k), ds.sampling_indices(n));
  const auto y = ds.readout(n);
  double s = 0.0;
  for (std::size_t i = 0; i < ax.size(); ++i) s += std::norm(ax[i] - y[i]);
  return s;
}

namespace detail {

/// Full coil k-spaces of every bin: bins x coils x voxels.
inline std::vector<cplx> bin_kspaces(const ImageStack& x, const SenseOperator& op, int threads) {
  const std::size_t block = static_cast<std::size_t>(op.coils()) * op.voxels();
  std::vector<cplx> out(static_cast<std::size_t>(x.bins()) * block);
  parallel_for(static_cast<std::size_t>(x.bins()), threads, [&](std::size_t k) {
    op.coil_kspace(x.bin(static_cast<int>(k)), std::span<cplx>(out).subspan(k * block, block));
  });
  return out;
}

/// Readouts grouped by identical sample sets (a Cartesian line is revisited
/// many times), in order of first appearance.
inline std::vector<std::vector<std::size_t>> group_by_sampling(const AcquiredDataset& ds) {
  std::vector<std::vector<std::size_t>> groups;
  std::vector<std::vector<std::size_t>> by_first(ds.grid.voxels());
  for (std::size_t n = 0; n < ds.readout_count(); ++n) {
    const auto idx = ds.sampling_indices(n);
    auto& candidates = by_first[idx.empty() ? 0 : idx[0]];
    bool placed = false;
    for (std::size_t g : candidates) {
      const auto ref = ds.sampling_indices(groups[g].front());
      if (std::equal(idx.begin(), idx.end(), ref.begin(), ref.end())) {
        groups[g].push_back(n);
        placed = true;
        break;
      }
    }
    if (!placed) {
      candidates.push_back(groups.size());
      groups.push_back({n});
    }
  }
  return groups;
}

}  // namespace detail

/// Residual energies for all readouts and valid bins, N x K.
inline std::vector<double> residual_matrix(const ImageStack& x, const AcquiredDataset& ds, int threads) {
  const SenseOperator op(ds.maps);
  const auto ks = detail::bin_kspaces(x, op, threads);
  const std::size_t kb = static_cast<std::size_t>(x.bins());
  const std::size_t m = op.voxels();
  const std::size_t coils = static_cast<std::size_t>(op.coils());
  const std::size_t len = ds.readout_length();
  const auto groups = detail::group_by_sampling(ds);
  std::vector<double> r(ds.readout_count() * kb);
  parallel_for(groups.size(), threads, [&](std::size_t gi) {
    const auto& members = groups[gi];
    const auto idx = ds.sampling_indices(members.front());
    const std::size_t s = idx.size();
    // This sample set's model values for every bin: bins x coils x samples.
    std::vector<cplx> model(kb * len);
    for (std::size_t k = 0; k < kb; ++k) {
      for (std::size_t c = 0; c < coils; ++c) {
        const cplx* src = ks.data() + (k * coils + c) * m;
        cplx* dst = model.data() + k * len + c * s;
        for (std::size_t j = 0; j < s; ++j) dst[j] = src[idx[j]];
      }
    }
    for (std::size_t n : members) {
      const cplx* y = ds.readout(n).data();
      for (std::size_t k = 0; k < kb; ++k) {
        const cplx* a = model.data() + k * len;
        // Four fixed partial sums; the order never depends on threading.
        double acc[4] = {0.0, 0.0, 0.0, 0.0};
        std::size_t i = 0;
        for (; i + 2 <= len; i += 2) {
          const double d0 = a[i].real() - y[i].real(), d1 = a[i].imag() - y[i].imag();
          const double d2 = a[i + 1].real() - y[i + 1].real(), d3 = a[i + 1].imag() - y[i + 1].imag();
          acc[0] += d0 * d0;
          acc[1] += d1 * d1;
          acc[2] += d2 * d2;
          acc[3] += d3 * d3;
        }
        for (; i < len; ++i) acc[0] += std::norm(a[i] - y[i]);
        r[n * kb + k] = (acc[0] + acc[1]) + (acc[2] + acc[3]);
      }
    }
  });
  return r;
}

/// Posterior bin probabilities with an outlier class. Valid bins have
/// likelihood exp(-r/(L sigma^2)), the outlier bin exp(-tau^2/sigma^2) with
/// tau = tau_sigmas * sigma. Evaluated in the log domain.
inline WeightMatrix e_step(const ImageStack& x, const AcquiredDataset& ds, const PriorMatrix& prior,
                           const SolverParams& p) {
  if (!(ds.sigma > 0.0)) throw ConfigError("e_step needs a positive noise level sigma");
  check_consistent(ds, x.grid, prior.rows);
  const std::size_t kb = static_cast<std::size_t>(x.bins());
  if (prior.cols != kb + 1) throw ConfigError("prior must have K + 1 columns");

  const auto r = residual_matrix(x, ds, p.threads);
  const double scale = 1.0 / (static_cast<double>(ds.readout_length()) * ds.sigma * ds.sigma);
  const double outlier_nll = p.tau_sigmas * p.tau_sigmas;
  WeightMatrix w(prior.rows, prior.cols);
  parallel_for(prior.rows, p.threads, [&](std::size_t n) {
    auto out = w.row(n);
    const auto th = prior.row(n);
    double peak = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k <= kb; ++k) {
      const double nll = k < kb ? r[n * kb + k] * scale : outlier_nll;
      out[k] = th[k] > 0.0 ? std::log(th[k]) - nll : -std::numeric_limits<double>::infinity();
      peak = std::max(peak, out[k]);
    }
    if (!std::isfinite(peak)) throw SolverError("e_step: prior row has no support");
    double total = 0.0;
    for (double& v : out) {
      v = std::exp(v - peak);
      total += v;
    }
    for (double& v : out) v /= total;
  });
  return w;
}

inline double tv_weight(const SolverParams& p, Axis a) {
  switch (a) {
    case Axis::Cardiac: return p.lambda_cardiac;
    case Axis::Respiratory: return p.lambda_respiratory;
    default: return p.lambda_spatial;
  }
}

inline double l1_norm(std::span<const cplx> v) {
  double s = 0.0;
  for (const cplx& a : v) s += std::abs(a);
  return s;
}

/// Direct evaluation of the weighted least-squares + anisotropic TV objective.
inline double m_step_objective(const ImageStack& x, const AcquiredDataset& ds, const WeightMatrix& w,
                               const SolverParams& p) {
  if (!(ds.sigma > 0.0)) throw ConfigError("objective needs a positive noise level sigma");
  check_consistent(ds, x.grid, w.rows);
  const auto r = residual_matrix(x, ds, p.threads);
  const std::size_t kb = static_cast<std::size_t>(x.bins());
  const double scale = 1.0 / (static_cast<double>(ds.readout_length()) * ds.sigma * ds.sigma);
  std::vector<double> terms(w.rows);
  for (std::size_t n = 0; n < w.rows; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < kb; ++k) s += w(n, k) * r[n * kb + k];
    terms[n] = s * scale;
  }
  double obj = pairwise_sum(terms);
  for (Axis a : tv_axes(x.grid)) obj += tv_weight(p, a) * l1_norm(diff(x, a).data);
  return obj;
}

/// Complex soft-thresholding: magnitude shrinks by t, phase is kept.
inline cplx soft_threshold(cplx v, double t) {
  const double m = std::abs(v);
  if (m <= t) return {0.0, 0.0};
  return v * ((m - t) / m);
}

// ---------------------------------------------------------------------------
// ADMM

/// Solver state that fully determines the next ADMM iterate.
struct AdmmState {
  ImageStack x;
  std::vector<ImageStack> z;  // one per TV axis
  std::vector<ImageStack> u;  // scaled duals
  double rho = 0.0;
};

/// ADMM for  sum_k ||W_k^(1/2)(A x_k - y)||^2/(L sigma^2) + sum_a lambda_a ||D_a x||_1
/// with one split z_a = D_a x per TV axis. The weighted data term is diagonal
/// in each coil's k-space because all coils share a readout's samples.
class AdmmSolver {
 public:
  AdmmSolver(const AcquiredDataset& ds, const SolverParams& p)
      : ds_(&ds), params_(p), op_(ds.maps), axes_(tv_axes(ds.grid)), groups_(detail::group_by_sampling(ds)) {
    if (!(ds.sigma > 0.0)) throw ConfigError("reconstruction needs a positive noise level sigma");
    p.validate();
    const ImageGrid& g = ds.grid;
    state_.x = ImageStack(g);
    for (std::size_t a = 0; a < axes_.size(); ++a) {
      state_.z.emplace_back(g);
      state_.u.emplace_back(g);
    }
    const std::size_t kb = static_cast<std::size_t>(g.bins());
    kweight_.assign(kb * g.voxels(), 0.0);
    rhs_.assign(kb * g.voxels(), cplx{});
    rss2_mean_ = 0.0;
    for (std::size_t v = 0; v < g.voxels(); ++v) {
      const double s = ds.maps.root_sum_of_squares(v);
      rss2_mean_ += s * s;
    }
    rss2_mean_ /= static_cast<double>(g.voxels());
  }

  const ImageGrid& grid() const { return ds_->grid; }
  const std::vector<Axis>& axes() const { return axes_; }
  const ImageStack& image() const { return state_.x; }
  const AdmmState& state() const { return state_; }
  double rho() const { return state_.rho; }

  /// Starts from `x`; splits initialized to D x and zero duals.
  void set_image(const ImageStack& x) {
    if (x.grid != grid()) throw ConfigError("initial image does not match the grid");
    state_.x = x;
    for (std::size_t a = 0; a < axes_.size(); ++a) {
      diff(grid(), axes_[a], x.data, state_.z[a].data);
      std::fill(state_.u[a].data.begin(), state_.u[a].data.end(), cplx{});
    }
  }

  void set_state(AdmmState s) {
    if (s.x.grid != grid() || s.z.size() != axes_.size() || s.u.size() != axes_.size()) {
      throw ConfigError("ADMM state does not match the solver layout");
    }
    state_ = std::move(s);
  }

  /// Rebuilds the weighted data term. On first use rho is fixed to
  /// rho_scale times the mean diagonal of the data-term Hessian.
  void set_weights(const WeightMatrix& w) {
    check_consistent(*ds_, grid(), w.rows);
    const std::size_t kb = static_cast<std::size_t>(grid().bins());
    if (w.cols != kb + 1) throw ConfigError("weights must have K + 1 columns");
    const AcquiredDataset& ds = *ds_;
    const std::size_t m = grid().voxels();
    const int coils = ds.maps.coils;
    const std::size_t spr = ds.samples_per_readout;
    const std::size_t len = ds.readout_length();
    const double scale = 1.0 / (static_cast<double>(len) * ds.sigma * ds.sigma);
    std::vector<double> constants(kb);
    parallel_for(kb, params_.threads, [&](std::size_t k) {
      std::span<double> kw(kweight_.data() + k * m, m);
      std::fill(kw.begin(), kw.end(), 0.0);
      std::vector<cplx> acc(static_cast<std::size_t>(coils) * m);
      std::vector<cplx> line(len);
      double constant = 0.0;
      for (const auto& members : groups_) {
        // Weighted sum of this sample set's readouts, then one scatter.
        std::fill(line.begin(), line.end(), cplx{});
        double mass = 0.0;
        for (std::size_t n : members) {
          const double wk = w(n, k);
          if (wk <= 0.0 || wk < params_.weight_skip) continue;
          const double s = wk * scale;
          const cplx* y = ds.readout(n).data();
          for (std::size_t i = 0; i < len; ++i) line[i] += s * y[i];
          mass += s;
          constant += s * squared_norm(ds.readout(n));
        }
        if (mass == 0.0) continue;
        const auto idx = ds.sampling_indices(members.front());
        for (std::size_t j = 0; j < spr; ++j) kw[idx[j]] += mass;
        for (int c = 0; c < coils; ++c) {
          cplx* ac = acc.data() + static_cast<std::size_t>(c) * m;
          const cplx* lc = line.data() + static_cast<std::size_t>(c) * spr;
          for (std::size_t j = 0; j < spr; ++j) ac[idx[j]] += lc[j];
        }
      }
      op_.coil_combine(acc, std::span<cplx>(rhs_.data() + k * m, m));
      constants[k] = constant;
    });
    data_constant_ = pairwise_sum(constants);
    if (state_.rho == 0.0) {
      const double mean_kw = std::accumulate(kweight_.begin(), kweight_.end(), 0.0) /
                             static_cast<double>(kweight_.size());
      state_.rho = params_.rho_scale * rss2_mean_ * mean_kw;
      if (!(state_.rho > 0.0)) throw SolverError("data term is empty; cannot choose the ADMM penalty");
    }
  }

  /// Runs `iterations` ADMM sweeps (x-update by warm-started CG, shrinkage,
  /// dual ascent).
  void iterate(int iterations) {
    const ImageGrid& g = grid();
    const std::size_t total = state_.x.data.size();
    ImageStack b(g), tmp(g);
    for (int it = 0; it < iterations; ++it) {
      // rhs = A^H W y + rho sum_a D_a^H (z_a - u_a)
      b.data = rhs_;
      for (std::size_t a = 0; a < axes_.size(); ++a) {
        for (std::size_t i = 0; i < total; ++i) tmp.data[i] = state_.z[a].data[i] - state_.u[a].data[i];
        ImageStack dt(g);
        diff_adjoint(g, axes_[a], tmp.data, dt.data);
        for (std::size_t i = 0; i < total; ++i) b.data[i] += state_.rho * dt.data[i];
      }
      conjugate_gradient(b);

      for (std::size_t a = 0; a < axes_.size(); ++a) {
        const double t = tv_weight(params_, axes_[a]) / state_.rho;
        diff(g, axes_[a], state_.x.data, tmp.data);
        auto& z = state_.z[a].data;
        auto& u = state_.u[a].data;
        for (std::size_t i = 0; i < total; ++i) {
          z[i] = soft_threshold(tmp.data[i] + u[i], t);
          u[i] += tmp.data[i] - z[i];
        }
      }
    }
  }

  /// Objective at the current image under the current weights, from the
  /// quadratic form of the data term.
  double objective() const { return objective(state_.x); }

  double objective(const ImageStack& x) const {
    const std::size_t kb = static_cast<std::size_t>(grid().bins());
    const std::size_t m = grid().voxels();
    std::vector<double> parts(kb);
    parallel_for(kb, params_.threads, [&](std::size_t k) {
      std::vector<cplx> hx(m), scratch(m);
      const auto xk = x.bin(static_cast<int>(k));
      op_.weighted_normal(xk, std::span<const double>(kweight_.data() + k * m, m), hx, scratch);
      const std::span<const cplx> bk(rhs_.data() + k * m, m);
      parts[k] = inner(xk, hx).real() - 2.0 * inner(xk, bk).real();
    });
    double obj = pairwise_sum(parts) + data_constant_;
    for (Axis a : axes_) obj += tv_weight(params_, a) * l1_norm(diff(x, a).data);
    return obj;
  }

 private:
  /// y = (H + rho sum_a D_a^H D_a) x
  void apply_system(const ImageStack& x, ImageStack& y) const {
    const ImageGrid& g = grid();
    const std::size_t m = g.voxels();
    parallel_for(static_cast<std::size_t>(g.bins()), params_.threads, [&](std::size_t k) {
      std::vector<cplx> scratch(m);
      op_.weighted_normal(x.bin(static_cast<int>(k)), std::span<const double>(kweight_.data() + k * m, m),
                          y.bin(static_cast<int>(k)), scratch);
    });
    ImageStack d(g), dd(g);
    for (Axis a : axes_) {
      diff(g, a, x.data, d.data);
      diff_adjoint(g, a, d.data, dd.data);
      for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += state_.rho * dd.data[i];
    }
  }

  /// Re <a, b> summed per bin, then pairwise across bins.
  double dot(const ImageStack& a, const ImageStack& b) const {
    std::vector<double> parts(static_cast<std::size_t>(a.bins()));
    for (int k = 0; k < a.bins(); ++k) parts[static_cast<std::size_t>(k)] = inner(a.bin(k), b.bin(k)).real();
    return pairwise_sum(parts);
  }

  void conjugate_gradient(const ImageStack& b) {
    const ImageGrid& g = grid();
    ImageStack& x = state_.x;
    ImageStack r(g), p(g), q(g);
    apply_system(x, q);
    for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = b.data[i] - q.data[i];
    const double b_norm = std::sqrt(dot(b, b));
    double rr = dot(r, r);
    const double r0 = std::sqrt(rr);
    if (!std::isfinite(rr)) throw SolverError("CG: non-finite residual at start");
    if (b_norm == 0.0 && rr == 0.0) return;
    p.data = r.data;
    for (int it = 0; it < params_.cg_max_iterations; ++it) {
      if (std::sqrt(rr) <= params_.cg_tolerance * b_norm) break;
      apply_system(p, q);
      const double pq = dot(p, q);
      if (!(pq > 0.0)) throw SolverError("CG: system is not positive definite (p^H A p = " + std::to_string(pq) + ")");
      const double alpha = rr / pq;
      for (std::size_t i = 0; i < x.data.size(); ++i) {
        x.data[i] += alpha * p.data[i];
        r.data[i] -= alpha * q.data[i];
      }
      const double rr_next = dot(r, r);
      if (!std::isfinite(rr_next) || std::sqrt(rr_next) > 10.0 * r0) {
        throw SolverError("CG diverged: residual " + std::to_string(std::sqrt(rr_next)) + " vs initial " +
                          std::to_string(r0) + " at iteration " + std::to_string(it + 1));
      }
      const double beta = rr_next / rr;
      rr = rr_next;
      for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] = r.data[i] + beta * p.data[i];
    }
  }

  const AcquiredDataset* ds_;
  SolverParams params_;
  SenseOperator op_;
  std::vector<Axis> axes_;
  std::vector<std::vector<std::size_t>> groups_;
  AdmmState state_;
  std::vector<double> kweight_;  // bins x voxels, shared by all coils
  std::vector<cplx> rhs_;        // bins x voxels, A^H W y
  double data_constant_ = 0.0;   // sum w ||y||^2 / (L sigma^2)
  double rss2_mean_ = 0.0;
};

/// Generalized M-step: `iterations` ADMM sweeps from `x_init`.
inline ImageStack m_step(const ImageStack& x_init, const AcquiredDataset& ds, const WeightMatrix& w,
                         const SolverParams& p, int iterations) {
  if (iterations < 1) throw ConfigError("m_step needs at least one iteration");
  AdmmSolver s(ds, p);
  s.set_image(x_init);
  s.set_weights(w);
  s.iterate(iterations);
  return s.image();
}

/// Robust noise estimate from the outer half of every readout's samples:
/// |n|^2 is exponential with mean sigma^2, so sigma^2 = median / ln 2.
/// Biased upward by residual signal; the simulator's sigma is used by default.
inline double estimate_sigma(const AcquiredDataset& ds) {
  const std::size_t s = ds.samples_per_readout;
  std::vector<double> e;
  for (std::size_t n = 0; n < ds.readout_count(); ++n) {
    const auto idx = ds.sampling_indices(n);
    const auto y = ds.readout(n);
    for (int c = 0; c < ds.maps.coils; ++c) {
      for (std::size_t j = 0; j < s; ++j) {
        const auto kx = static_cast<int>(idx[j] % static_cast<KIndex>(ds.grid.nx));
        const int centred = std::min(kx, ds.grid.nx - kx);
        if (4 * centred >= ds.grid.nx) e.push_back(std::norm(y[c * s + j]));
      }
    }
  }
  if (e.empty()) throw ConfigError("no outer k-space samples to estimate noise from");
  return std::sqrt(detail::median(e) / std::numbers::ln2);
}

// ---------------------------------------------------------------------------
// EM driver

enum class Method { Cs, Emore };

inline std::string_view method_name(Method m) { return m == Method::Cs ? "cs" : "emore"; }

inline Method parse_method(std::string_view s) {
  if (s == "cs") return Method::Cs;
  if (s == "emore") return Method::Emore;
  throw ConfigError("method must be 'cs' or 'emore'");
}

struct TraceRow {
  int iteration = 0;
  double objective = 0.0;
  double image_change = std::numeric_limits<double>::quiet_NaN();  // undefined at t = 0
  double outlier_mass = 0.0;  // mean outlier-bin weight
};

/// Everything needed to continue a run bit-identically after iteration t.
struct EmState {
  int iteration = 0;
  AdmmState admm;
  WeightMatrix weights;
  std::vector<TraceRow> trace;
};

struct ReconResult {
  ImageStack image;
  WeightMatrix weights;
  std::vector<TraceRow> trace;
  int iterations = 0;
  bool converged = false;  // stopped by the eta rule rather than J
};

struct ReconHooks {
  /// Called after every EM iteration (including t = 0, the initialization).
  std::function<void(const EmState&)> on_iteration;
  /// Resume from a saved state instead of initializing.
  std::optional<EmState> resume;
};

inline double relative_change(const ImageStack& now, const ImageStack& before) {
  std::vector<double> num(static_cast<std::size_t>(now.bins())), den(num.size());
  for (int k = 0; k < now.bins(); ++k) {
    const auto a = now.bin(k), b = before.bin(k);
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::norm(a[i] - b[i]);
    num[static_cast<std::size_t>(k)] = s;
    den[static_cast<std::size_t>(k)] = squared_norm(b);
  }
  const double d = pairwise_sum(den);
  return d > 0.0 ? pairwise_sum(num) / d : std::numeric_limits<double>::infinity();
}

inline double outlier_mass(const WeightMatrix& w) {
  std::vector<double> col(w.rows);
  for (std::size_t n = 0; n < w.rows; ++n) col[n] = w(n, w.outlier());
  return w.rows ? pairwise_sum(col) / static_cast<double>(w.rows) : 0.0;
}

/// Generalized EM. The CS baseline runs the same loop with the one-hot
/// weights frozen. Stops when the relative squared image change drops below
/// eta or after J iterations, whichever comes first.
inline ReconResult reconstruct(const AcquiredDataset& ds, const HardAssignment& a, const SolverParams& p,
                               Method method, const ReconHooks& hooks = {}) {
  p.validate();
  check_consistent(ds, a.grid, a.size());
  const PriorMatrix prior = make_prior(a, p.alpha_g, p.alpha_o);
  AdmmSolver solver(ds, p);

  EmState st;
  if (hooks.resume) {
    st = *hooks.resume;
    solver.set_state(st.admm);
    solver.set_weights(st.weights);
  } else {
    st.weights = one_hot(a);
    solver.set_weights(st.weights);
    solver.iterate(p.init_admm_iterations);
    st.admm = solver.state();
    st.trace.push_back({0, solver.objective(), std::numeric_limits<double>::quiet_NaN(), 0.0});
    if (hooks.on_iteration) hooks.on_iteration(st);
  }

  bool converged = !st.trace.empty() && st.trace.back().image_change < p.eta;
  while (!converged && st.iteration < p.max_outer_iterations) {
    ++st.iteration;
    const ImageStack previous = solver.image();
    if (method == Method::Emore) {
      st.weights = e_step(previous, ds, prior, p);
      solver.set_weights(st.weights);
    }
    solver.iterate(p.admm_iterations);
    const double change = relative_change(solver.image(), previous);
    if (!std::isfinite(change)) throw SolverError("non-finite image update at EM iteration " + std::to_string(st.iteration));
    st.admm = solver.state();
    st.trace.push_back({st.iteration, solver.objective(), change, outlier_mass(st.weights)});
    converged = change < p.eta;
    if (hooks.on_iteration) hooks.on_iteration(st);
  }

  ReconResult out;
  out.image = solver.image();
  out.weights = std::move(st.weights);
  out.trace = std::move(st.trace);
  out.iterations = st.iteration;
  out.converged = converged;
  return out;
}

inline ReconResult run_emore(const AcquiredDataset& ds, const HardAssignment& a, const SolverParams& p,
                         const ReconHooks& hooks = {}) {
  return reconstruct(ds, a, p, Method::Emore, hooks);
}

inline ReconResult cs_baseline(const AcquiredDataset& ds, const HardAssignment& a, const SolverParams& p,
                               const ReconHooks& hooks = {}) {
  return reconstruct(ds, a, p, Method::Cs, hooks);
}

}  // namespace emore

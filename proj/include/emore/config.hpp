#pragma once

// Experiment and solver parameters with JSON (de)serialization.
//
// Solver defaults are the published phantom-study reconstruction settings;
// geometry defaults are a desk-scale 2D acquisition.

#include <string>
#include <vector>

#include "emore/core.hpp"
#include "json.hpp"

namespace emore {

struct SolverParams {
  double lambda_spatial = 2e-2;
  double lambda_cardiac = 10e-2;
  double lambda_respiratory = 6e-2;
  /// Outlier threshold tau in units of the noise standard deviation.
  double tau_sigmas = 3.0;
  double eta = 1e-4;
  int max_outer_iterations = 60;  // J
  int init_admm_iterations = 10;  // I1
  int admm_iterations = 4;        // I2
  double alpha_g = 0.85;
  double alpha_o = 0.05;
  /// rho = rho_scale * mean diagonal of the data-term Hessian.
  double rho_scale = 0.1;
  int cg_max_iterations = 10;
  double cg_tolerance = 1e-6;
  /// Readouts below this weight are left out of a bin's normal equations.
  double weight_skip = 1e-6;
  int threads = 1;

  void validate() const {
    const bool positive = lambda_spatial >= 0 && lambda_cardiac >= 0 && lambda_respiratory >= 0 &&
                          tau_sigmas > 0 && eta > 0 && rho_scale > 0 && cg_tolerance > 0;
    if (!positive) throw ConfigError("solver parameters must be positive");
    if (max_outer_iterations < 1 || init_admm_iterations < 1 || admm_iterations < 1 ||
        cg_max_iterations < 1) {
      throw ConfigError("iteration counts must be >= 1");
    }
    if (alpha_g < 0 || alpha_o < 0 || alpha_g + alpha_o > 1.0 + 1e-12) {
      throw ConfigError("prior probabilities need alpha_g, alpha_o >= 0 and alpha_g + alpha_o <= 1");
    }
    if (weight_skip < 0 || weight_skip >= 1) throw ConfigError("weight_skip must lie in [0, 1)");
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }

  bool operator==(const SolverParams&) const = default;
};

struct PhysiologyParams {
  double resp_period_min_s = 3.25;
  double resp_period_max_s = 4.75;
  /// Per-cycle respiratory period variation, uniform in [0, resp_jitter_s].
  double resp_jitter_s = 1.0;
  double heart_rate_min_bpm = 62.0;
  double heart_rate_max_bpm = 83.0;
  /// Beat-to-beat R-R variation, uniform in [0, rr_jitter_ms].
  double rr_jitter_ms = 160.0;
  /// Superior-inferior heart displacement at end-inspiration.
  double resp_shift_mm = 12.0;
  /// Fractional blood-pool radius reduction at peak contraction.
  double cardiac_contraction = 0.3;

  bool operator==(const PhysiologyParams&) const = default;
};

struct GatingParams {
  double resp_band_low_hz = 0.1;
  double resp_band_high_hz = 0.5;
  double cardiac_band_low_hz = 0.5;
  double cardiac_band_high_hz = 3.0;
  /// Upper heart-rate bound for trigger detection (minimum peak spacing).
  double max_heart_rate_bpm = 100.0;

  bool operator==(const GatingParams&) const = default;
};

struct SamplingParams {
  /// Phase-encode density ~ floor + (1 - |k|/kmax)^power.
  double density_power = 2.0;
  double density_floor = 0.15;

  bool operator==(const SamplingParams&) const = default;
};

struct ExperimentConfig {
  ImageGrid grid;
  int coils = 8;
  std::string coil_layout = "biot-savart";  // or "uniform"
  double tr_ms = 4.0;
  double scan_seconds = 120.0;
  double snr_db = 30.0;
  int sg_every = 10;
  int outlier_episodes = 10;
  std::vector<double> corruption_fractions{0.0, 0.2};
  std::vector<std::uint64_t> seeds{1};
  PhysiologyParams physiology;
  GatingParams gating;
  SamplingParams sampling;
  SolverParams solver;
  int threads = 1;
  std::string output_dir = "out";

  std::size_t readout_count() const {
    return static_cast<std::size_t>(std::llround(scan_seconds * 1000.0 / tr_ms));
  }

  void validate() const {
    grid.validate();
    solver.validate();
    if (coils < 1) throw ConfigError("coil count must be >= 1");
    if (coil_layout != "biot-savart" && coil_layout != "uniform") {
      throw ConfigError("coil_layout must be 'biot-savart' or 'uniform'");
    }
    if (!(tr_ms > 0) || !(scan_seconds > 0)) throw ConfigError("TR and scan time must be positive");
    if (sg_every < 1) throw ConfigError("sg_every must be >= 1");
    if (outlier_episodes < 1) throw ConfigError("outlier_episodes must be >= 1");
    for (double f : corruption_fractions) {
      if (!(f >= 0.0 && f <= 0.9)) throw ConfigError("corruption fractions must lie in [0, 0.9]");
    }
    if (threads < 1) throw ConfigError("threads must be >= 1");
  }

  bool operator==(const ExperimentConfig&) const = default;
};

// JSON mapping; absent keys keep their defaults.
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ImageGrid, nx, ny, nz, voxel_mm, cardiac_bins,
                                                respiratory_bins)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SolverParams, lambda_spatial, lambda_cardiac,
                                                lambda_respiratory, tau_sigmas, eta,
                                                max_outer_iterations, init_admm_iterations,
                                                admm_iterations, alpha_g, alpha_o, rho_scale,
                                                cg_max_iterations, cg_tolerance, weight_skip,
                                                threads)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(PhysiologyParams, resp_period_min_s,
                                                resp_period_max_s, resp_jitter_s,
                                                heart_rate_min_bpm, heart_rate_max_bpm,
                                                rr_jitter_ms, resp_shift_mm, cardiac_contraction)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GatingParams, resp_band_low_hz, resp_band_high_hz,
                                                cardiac_band_low_hz, cardiac_band_high_hz,
                                                max_heart_rate_bpm)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SamplingParams, density_power, density_floor)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, grid, coils, coil_layout, tr_ms,
                                                scan_seconds, snr_db, sg_every, outlier_episodes,
                                                corruption_fractions, seeds, physiology, gating,
                                                sampling, solver, threads, output_dir)

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  try {
    cfg = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline nlohmann::json config_to_json(const ExperimentConfig& cfg) { return cfg; }

}  // namespace emore

#pragma once

// Acquired readouts plus the simulator's ground truth.

#include <optional>

#include "emore/config.hpp"
#include "emore/operators.hpp"

namespace emore {

struct OutlierEpisode {
  std::size_t start = 0;   // first readout
  std::size_t length = 0;  // readouts
  int state = 0;           // 1..7

  bool operator==(const OutlierEpisode&) const = default;
};

/// Per-readout truth labels and the physiological draws behind them.
struct MotionSchedule {
  std::vector<int> respiratory;                // true respiratory phase, 0-based
  std::vector<int> cardiac;                    // true cardiac phase, 0-based
  std::vector<int> outlier_state;              // 0 = rest, 1..7 bulk motion
  std::vector<double> respiratory_amplitude;   // continuous waveform in [0, 1]
  std::vector<double> cardiac_phase;           // position within the R-R interval, [0, 1)
  std::vector<double> respiratory_periods_s;   // one per breathing cycle
  std::vector<double> rr_intervals_ms;         // one per heartbeat
  std::vector<OutlierEpisode> episodes;

  std::size_t size() const { return outlier_state.size(); }

  /// True flat bin, or grid.bins() (the outlier bin) for corrupted readouts.
  int true_bin(std::size_t n, const ImageGrid& g) const {
    if (outlier_state[n] != 0) return g.bins();
    return g.flat_bin(cardiac[n], respiratory[n]);
  }

  std::size_t corrupted_count() const {
    return static_cast<std::size_t>(
        std::count_if(outlier_state.begin(), outlier_state.end(), [](int s) { return s != 0; }));
  }

  bool operator==(const MotionSchedule&) const = default;
};

/// Ordered readouts y_n with their sampling, coil maps and noise level.
struct AcquiredDataset {
  ImageGrid grid;
  CoilMaps maps;
  std::size_t samples_per_readout = 0;  // per coil
  std::vector<KIndex> kspace_index;     // readouts x samples_per_readout
  std::vector<std::uint8_t> self_gating;
  std::vector<double> time_ms;
  std::vector<cplx> readouts;           // readouts x (coils x samples), coil-major
  double sigma = 0.0;
  double tr_ms = 4.0;
  std::optional<ImageStack> truth;
  std::optional<MotionSchedule> schedule;

  std::size_t readout_count() const { return time_ms.size(); }
  /// L: samples of one readout across all coils.
  std::size_t readout_length() const { return samples_per_readout * static_cast<std::size_t>(maps.coils); }

  std::span<const cplx> readout(std::size_t n) const {
    return {readouts.data() + n * readout_length(), readout_length()};
  }
  std::span<const KIndex> sampling_indices(std::size_t n) const {
    return {kspace_index.data() + n * samples_per_readout, samples_per_readout};
  }
  ReadoutSampling sampling(std::size_t n) const {
    return {sampling_indices(n), n, self_gating[n] != 0, time_ms[n]};
  }

  void validate() const {
    const std::size_t n = readout_count();
    if (maps.grid != grid) {
      // Coil maps carry spatial extents only; bin counts may differ.
      if (maps.grid.nx != grid.nx || maps.grid.ny != grid.ny || maps.grid.nz != grid.nz) {
        throw ConfigError("coil maps do not match the image grid");
      }
    }
    if (self_gating.size() != n || kspace_index.size() != n * samples_per_readout ||
        readouts.size() != n * readout_length()) {
      throw ConfigError("dataset arrays have inconsistent lengths");
    }
    for (KIndex i : kspace_index) {
      if (i >= grid.voxels()) throw ConfigError("dataset sampling index outside the k-space grid");
    }
    if (truth && truth->grid != grid) throw ConfigError("truth stack does not match grid");
    if (schedule && schedule->size() != n) throw ConfigError("schedule length does not match readouts");
  }
};

}  // namespace emore

#pragma once

// Dataset directory: manifest.json, raw little-endian arrays and a truth CSV.
//
//   manifest.json      grid, sigma, TR, seed, config, schedule summary
//   readouts.c64       complex64, readouts x coils x samples
//   sampling.u32       k-space sample indices, readouts x samples
//   self_gating.u8     one flag per readout
//   coil_maps.c64      complex64, coils x voxels
//   truth.c64          complex64, bins x voxels (optional)
//   labels.csv         per-readout truth labels (optional)
//
// Every stored value is exactly representable in its file format, so a
// write/read/write cycle reproduces identical bytes.

#include "emore/config.hpp"
#include "emore/dataset.hpp"
#include "emore/io.hpp"

namespace emore {

inline constexpr int kDatasetFormatVersion = 1;

/// Provenance stored next to the arrays.
struct DatasetMeta {
  std::uint64_t seed = 0;
  double corruption_fraction = 0.0;
  ExperimentConfig config;
};

struct LoadedDataset {
  AcquiredDataset data;
  DatasetMeta meta;
};

namespace detail {

inline nlohmann::json schedule_summary(const MotionSchedule& s) {
  nlohmann::json episodes = nlohmann::json::array();
  for (const auto& e : s.episodes) episodes.push_back({{"start", e.start}, {"length", e.length}, {"state", e.state}});
  return {{"corrupted_readouts", s.corrupted_count()},
          {"episodes", episodes},
          {"respiratory_periods_s", s.respiratory_periods_s},
          {"rr_intervals_ms", s.rr_intervals_ms}};
}

inline void write_labels(const io::fs::path& p, const MotionSchedule& s) {
  auto f = io::open_out(p);
  f << "readout,respiratory,cardiac,outlier_state,respiratory_amplitude,cardiac_phase\n";
  for (std::size_t n = 0; n < s.size(); ++n) {
    f << n << ',' << s.respiratory[n] << ',' << s.cardiac[n] << ',' << s.outlier_state[n] << ','
      << io::format_double(s.respiratory_amplitude[n]) << ',' << io::format_double(s.cardiac_phase[n]) << '\n';
  }
  if (!f) throw IoError("write failed for '" + p.string() + "'");
}

inline MotionSchedule read_labels(const io::fs::path& p, const nlohmann::json& summary) {
  const auto t = io::read_csv(p);
  const std::size_t c_resp = t.column("respiratory"), c_card = t.column("cardiac");
  const std::size_t c_out = t.column("outlier_state"), c_amp = t.column("respiratory_amplitude");
  const std::size_t c_phase = t.column("cardiac_phase"), c_idx = t.column("readout");
  MotionSchedule s;
  for (std::size_t n = 0; n < t.rows.size(); ++n) {
    const auto& r = t.rows[n];
    if (io::parse_int(r[c_idx]) != static_cast<long long>(n)) throw IoError("labels.csv rows are out of order");
    s.respiratory.push_back(static_cast<int>(io::parse_int(r[c_resp])));
    s.cardiac.push_back(static_cast<int>(io::parse_int(r[c_card])));
    s.outlier_state.push_back(static_cast<int>(io::parse_int(r[c_out])));
    s.respiratory_amplitude.push_back(io::parse_double(r[c_amp]));
    s.cardiac_phase.push_back(io::parse_double(r[c_phase]));
  }
  s.respiratory_periods_s = summary.at("respiratory_periods_s").get<std::vector<double>>();
  s.rr_intervals_ms = summary.at("rr_intervals_ms").get<std::vector<double>>();
  for (const auto& e : summary.at("episodes")) {
    s.episodes.push_back({e.at("start").get<std::size_t>(), e.at("length").get<std::size_t>(), e.at("state").get<int>()});
  }
  return s;
}

inline void check_representable(std::span<const cplx> v, const char* what) {
  for (const cplx& a : v) {
    if (round_to_c64(a) != a) throw IoError(std::string(what) + " holds values that complex64 cannot store exactly");
  }
}

}  // namespace detail

inline void write_dataset(const io::fs::path& dir, const AcquiredDataset& ds, const DatasetMeta& meta) {
  ds.validate();
  detail::check_representable(ds.readouts, "readouts");
  detail::check_representable(ds.maps.data, "coil maps");
  if (ds.truth) detail::check_representable(ds.truth->data, "truth");
  std::error_code ec;
  io::fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

  io::write_complex64(dir / "readouts.c64", ds.readouts);
  io::write_raw<std::uint32_t, KIndex>(dir / "sampling.u32", ds.kspace_index);
  io::write_raw<std::uint8_t, std::uint8_t>(dir / "self_gating.u8", ds.self_gating);
  io::write_complex64(dir / "coil_maps.c64", ds.maps.data);
  if (ds.truth) io::write_complex64(dir / "truth.c64", ds.truth->data);
  if (ds.schedule) detail::write_labels(dir / "labels.csv", *ds.schedule);

  nlohmann::json m;
  m["format"] = "emore-dataset";
  m["version"] = kDatasetFormatVersion;
  m["grid"] = ds.grid;
  m["coils"] = ds.maps.coils;
  m["readouts"] = ds.readout_count();
  m["samples_per_readout"] = ds.samples_per_readout;
  m["sigma"] = ds.sigma;
  m["tr_ms"] = ds.tr_ms;
  m["seed"] = meta.seed;
  m["corruption_fraction"] = meta.corruption_fraction;
  m["config"] = config_to_json(meta.config);
  m["has_truth"] = ds.truth.has_value();
  m["has_labels"] = ds.schedule.has_value();
  if (ds.schedule) m["schedule"] = detail::schedule_summary(*ds.schedule);
  auto f = io::open_out(dir / "manifest.json");
  f << m.dump(2) << '\n';
  if (!f) throw IoError("write failed for manifest in '" + dir.string() + "'");
}

inline LoadedDataset read_dataset(const io::fs::path& dir) {
  nlohmann::json m;
  try {
    auto f = io::open_in(dir / "manifest.json");
    m = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in '" + dir.string() + "': " + e.what());
  }
  LoadedDataset out;
  AcquiredDataset& ds = out.data;
  try {
    if (m.at("format") != "emore-dataset" || m.at("version") != kDatasetFormatVersion) {
      throw IoError("'" + dir.string() + "' is not a supported dataset directory");
    }
    ds.grid = m.at("grid").get<ImageGrid>();
    ds.samples_per_readout = m.at("samples_per_readout").get<std::size_t>();
    ds.sigma = m.at("sigma").get<double>();
    ds.tr_ms = m.at("tr_ms").get<double>();
    out.meta.seed = m.at("seed").get<std::uint64_t>();
    out.meta.corruption_fraction = m.at("corruption_fraction").get<double>();
    out.meta.config = m.at("config").get<ExperimentConfig>();
    const std::size_t n = m.at("readouts").get<std::size_t>();
    const int coils = m.at("coils").get<int>();

    ds.maps = CoilMaps(ds.grid, coils);
    ds.maps.data = io::read_complex64(dir / "coil_maps.c64");
    ds.readouts = io::read_complex64(dir / "readouts.c64");
    ds.kspace_index = io::read_raw<std::uint32_t>(dir / "sampling.u32");
    ds.self_gating = io::read_raw<std::uint8_t>(dir / "self_gating.u8");
    if (ds.maps.data.size() != ds.grid.voxels() * static_cast<std::size_t>(coils)) {
      throw IoError("coil_maps.c64 has the wrong length");
    }
    ds.time_ms.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.time_ms[i] = i * ds.tr_ms;
    if (m.value("has_truth", false)) {
      ImageStack t(ds.grid);
      t.data = io::read_complex64(dir / "truth.c64");
      if (t.data.size() != ds.grid.voxels() * static_cast<std::size_t>(ds.grid.bins())) {
        throw IoError("truth.c64 has the wrong length");
      }
      ds.truth = std::move(t);
    }
    if (m.value("has_labels", false)) ds.schedule = detail::read_labels(dir / "labels.csv", m.at("schedule"));
    ds.validate();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest in '" + dir.string() + "': " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("inconsistent dataset in '" + dir.string() + "': " + e.what());
  }
  return out;
}

}  // namespace emore

#pragma once

// generate / reconstruct / report: the experiment driver behind the CLI.
//
// Layouts
//   <out>/seed<S>_frac<F>/              dataset directory (dataset_io.hpp)
//   <out>/<dataset name>/<method>/      one reconstruction:
//       result.json, image.c64, trace.csv, assignment.csv,
//       weights.f32 (emore only), timing.json, checkpoints/iter_NNNN/
//   <report>/metrics.csv, summary.csv, timing.csv, images/, readouts/
//
// Wall-clock time is kept in timing.json / timing.csv so every other file is
// byte-reproducible.

#include <chrono>
#include <cstdio>
#include <iomanip>
#include <map>
#include <set>

#include "emore/dataset_io.hpp"
#include "emore/gating.hpp"
#include "emore/metrics.hpp"
#include "emore/phantom.hpp"
#include "emore/recon.hpp"

namespace emore {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitSolver = 3;
inline constexpr int kExitIo = 4;

/// Maps the error hierarchy onto process exit codes.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const IoError*>(&e)) return kExitIo;
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const GenerationError*>(&e)) return kExitConfig;
  if (dynamic_cast<const SolverError*>(&e) || dynamic_cast<const GatingError*>(&e) ||
      dynamic_cast<const MetricError*>(&e)) {
    return kExitSolver;
  }
  if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return kExitIo;
  return kExitSolver;
}

inline ExperimentConfig load_config(const io::fs::path& p) {
  std::ifstream f(p);
  if (!f) throw IoError("cannot open config '" + p.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + p.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// "seed3_frac0.20": fraction printed with two decimals (three if needed).
inline std::string dataset_name(std::uint64_t seed, double fraction) {
  char buf[64];
  const double hundredths = fraction * 100.0;
  if (std::abs(hundredths - std::round(hundredths)) < 1e-9) {
    std::snprintf(buf, sizeof buf, "seed%llu_frac%.2f", static_cast<unsigned long long>(seed), fraction);
  } else {
    std::snprintf(buf, sizeof buf, "seed%llu_frac%.3f", static_cast<unsigned long long>(seed), fraction);
  }
  return buf;
}

namespace detail {

inline void write_json(const io::fs::path& p, const nlohmann::json& j) {
  auto f = io::open_out(p);
  f << j.dump(2) << '\n';
  if (!f) throw IoError("write failed for '" + p.string() + "'");
}

inline nlohmann::json read_json(const io::fs::path& p) {
  auto f = io::open_in(p);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("'" + p.string() + "' is not valid JSON: " + e.what());
  }
}

inline void make_dirs(const io::fs::path& p) {
  std::error_code ec;
  io::fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create '" + p.string() + "': " + ec.message());
}

inline void write_f64_complex(std::ofstream& f, std::span<const cplx> v) {
  for (const cplx& a : v) {
    const double re = io::to_little_endian(a.real()), im = io::to_little_endian(a.imag());
    f.write(reinterpret_cast<const char*>(&re), sizeof re);
    f.write(reinterpret_cast<const char*>(&im), sizeof im);
  }
}

inline void write_trace_csv(const io::fs::path& p, std::span<const TraceRow> trace) {
  auto f = io::open_out(p);
  f << "iteration,objective,image_change,outlier_mass\n";
  for (const auto& r : trace) {
    f << r.iteration << ',' << io::format_double(r.objective) << ',' << io::format_double(r.image_change) << ','
      << io::format_double(r.outlier_mass) << '\n';
  }
  if (!f) throw IoError("write failed for '" + p.string() + "'");
}

inline std::vector<TraceRow> read_trace_csv(const io::fs::path& p) {
  const auto t = io::read_csv(p);
  const auto ci = t.column("iteration"), co = t.column("objective"), cc = t.column("image_change"),
             cm = t.column("outlier_mass");
  std::vector<TraceRow> out;
  for (const auto& r : t.rows) {
    out.push_back({static_cast<int>(io::parse_int(r[ci])), io::parse_double(r[co]), io::parse_double(r[cc]),
                   io::parse_double(r[cm])});
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Checkpoints: weights.f32 (N x (K+1)) for plotting, plus the exact solver
// state (weights.f64, admm.f64) so a resumed run matches an uninterrupted one.

inline void write_checkpoint(const io::fs::path& dir, const EmState& st, Method method) {
  detail::make_dirs(dir);
  io::write_raw<float, double>(dir / "weights.f32", st.weights.data);
  io::write_raw<double, double>(dir / "weights.f64", st.weights.data);
  {
    auto f = io::open_out(dir / "admm.f64", true);
    detail::write_f64_complex(f, st.admm.x.data);
    for (const auto& z : st.admm.z) detail::write_f64_complex(f, z.data);
    for (const auto& u : st.admm.u) detail::write_f64_complex(f, u.data);
    if (!f) throw IoError("write failed for '" + (dir / "admm.f64").string() + "'");
  }
  detail::write_trace_csv(dir / "trace.csv", st.trace);
  nlohmann::json m;
  m["format"] = "emore-checkpoint";
  m["method"] = std::string(method_name(method));
  m["iteration"] = st.iteration;
  m["readouts"] = st.weights.rows;
  m["columns"] = st.weights.cols;
  m["grid"] = st.admm.x.grid;
  m["splits"] = st.admm.z.size();
  m["rho"] = st.admm.rho;
  m["files"] = {"weights.f32", "weights.f64", "admm.f64", "trace.csv"};
  detail::write_json(dir / "manifest.json", m);
}

inline std::pair<EmState, Method> read_checkpoint(const io::fs::path& dir) {
  const auto m = detail::read_json(dir / "manifest.json");
  EmState st;
  Method method;
  try {
    if (m.at("format") != "emore-checkpoint") throw IoError("'" + dir.string() + "' is not a checkpoint");
    method = parse_method(m.at("method").get<std::string>());
    st.iteration = m.at("iteration").get<int>();
    st.weights.rows = m.at("readouts").get<std::size_t>();
    st.weights.cols = m.at("columns").get<std::size_t>();
    const auto g = m.at("grid").get<ImageGrid>();
    const auto splits = m.at("splits").get<std::size_t>();
    st.admm.rho = m.at("rho").get<double>();
    st.weights.data = io::read_raw<double>(dir / "weights.f64");
    if (st.weights.data.size() != st.weights.rows * st.weights.cols) throw IoError("checkpoint weights truncated");
    const auto flat = io::read_raw<double>(dir / "admm.f64");
    const std::size_t block = g.voxels() * static_cast<std::size_t>(g.bins());
    if (flat.size() != 2 * block * (1 + 2 * splits)) throw IoError("checkpoint solver state truncated");
    std::size_t at = 0;
    auto next = [&] {
      ImageStack s(g);
      for (cplx& v : s.data) {
        v = {flat[at], flat[at + 1]};
        at += 2;
      }
      return s;
    };
    st.admm.x = next();
    for (std::size_t a = 0; a < splits; ++a) st.admm.z.push_back(next());
    for (std::size_t a = 0; a < splits; ++a) st.admm.u.push_back(next());
    st.trace = detail::read_trace_csv(dir / "trace.csv");
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed checkpoint manifest in '" + dir.string() + "': " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("malformed checkpoint in '" + dir.string() + "': " + e.what());
  }
  return {std::move(st), method};
}

// ---------------------------------------------------------------------------
// generate

struct GenerateOptions {
  ExperimentConfig config;
  io::fs::path out = "out";
  std::optional<std::uint64_t> seed;   // overrides config.seeds
  std::optional<double> fraction;      // overrides config.corruption_fractions
};

/// Writes one dataset directory per (seed, fraction); returns their paths.
inline std::vector<io::fs::path> cmd_generate(const GenerateOptions& o) {
  ExperimentConfig cfg = o.config;
  if (o.seed) cfg.seeds = {*o.seed};
  if (o.fraction) cfg.corruption_fractions = {*o.fraction};
  cfg.validate();
  if (cfg.seeds.empty() || cfg.corruption_fractions.empty()) {
    throw ConfigError("need at least one seed and one corruption fraction");
  }
  // Thread count is an execution setting; keeping it out of the manifest
  // makes datasets byte-identical whatever --threads was.
  ExperimentConfig stored = cfg;
  stored.threads = 1;
  stored.solver.threads = 1;
  std::vector<io::fs::path> dirs;
  for (std::uint64_t seed : cfg.seeds) {
    for (double f : cfg.corruption_fractions) {
      const auto ds = generate_dataset(cfg, seed, f);
      const auto dir = o.out / dataset_name(seed, f);
      // Each manifest describes its own dataset, not the sweep it came from.
      stored.seeds = {seed};
      stored.corruption_fractions = {f};
      write_dataset(dir, ds, {seed, f, stored});
      dirs.push_back(dir);
    }
  }
  return dirs;
}

// ---------------------------------------------------------------------------
// reconstruct

struct ReconstructOptions {
  io::fs::path dataset;
  std::vector<Method> methods{Method::Cs, Method::Emore};
  io::fs::path out = "results";
  std::optional<ExperimentConfig> config;  // default: the config stored with the dataset
  std::optional<int> threads;
  int checkpoint_every = 0;                // 0: no checkpoints
  std::optional<io::fs::path> resume;      // checkpoint directory
};

inline io::fs::path run_directory(const io::fs::path& out, const io::fs::path& dataset, Method m) {
  auto name = dataset.filename();
  if (name.empty()) name = dataset.parent_path().filename();
  return out / name / std::string(method_name(m));
}

/// Reconstructs one dataset with each requested method; returns run directories.
inline std::vector<io::fs::path> cmd_reconstruct(const ReconstructOptions& o) {
  const LoadedDataset loaded = read_dataset(o.dataset);
  ExperimentConfig cfg = o.config ? *o.config : loaded.meta.config;
  if (o.threads) cfg.threads = *o.threads;
  cfg.solver.threads = cfg.threads;
  cfg.validate();
  if (o.checkpoint_every < 0) throw ConfigError("--checkpoint-every must be >= 0");
  const AcquiredDataset& ds = loaded.data;
  if (cfg.grid != ds.grid) cfg.grid = ds.grid;

  std::optional<std::pair<EmState, Method>> resume;
  if (o.resume) {
    resume = read_checkpoint(*o.resume);
    if (o.methods.size() != 1 || o.methods.front() != resume->second) {
      throw ConfigError("--resume needs --method matching the checkpoint");
    }
  }

  const SurrogateSignals sig = extract_surrogates(ds, cfg.gating);
  const HardAssignment a = assign_bins(sig, ds.grid);

  std::vector<io::fs::path> runs;
  for (Method m : o.methods) {
    const auto dir = run_directory(o.out, o.dataset, m);
    detail::make_dirs(dir);
    write_assignment_csv(dir / "assignment.csv", ds, sig, a);

    ReconHooks hooks;
    if (resume) hooks.resume = resume->first;
    if (o.checkpoint_every > 0) {
      hooks.on_iteration = [&, m](const EmState& st) {
        if (st.iteration % o.checkpoint_every != 0) return;
        char name[32];
        std::snprintf(name, sizeof name, "iter_%04d", st.iteration);
        write_checkpoint(dir / "checkpoints" / name, st, m);
      };
    }
    const auto t0 = std::chrono::steady_clock::now();
    const ReconResult r = reconstruct(ds, a, cfg.solver, m, hooks);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    io::write_complex64(dir / "image.c64", r.image.data);
    if (m == Method::Emore) io::write_raw<float, double>(dir / "weights.f32", r.weights.data);
    detail::write_trace_csv(dir / "trace.csv", r.trace);

    nlohmann::json res;
    res["format"] = "emore-result";
    res["method"] = std::string(method_name(m));
    // Relative to the run directory so that relocated trees stay valid and
    // identical runs under different roots produce identical files.
    res["dataset"] = io::fs::absolute(o.dataset).lexically_normal().lexically_relative(
                         io::fs::absolute(dir).lexically_normal()).generic_string();
    res["dataset_name"] = run_directory("", o.dataset, m).parent_path().string();
    res["seed"] = loaded.meta.seed;
    res["corruption_fraction"] = loaded.meta.corruption_fraction;
    res["grid"] = ds.grid;
    res["image"] = "image.c64";
    res["weights"] = m == Method::Emore ? nlohmann::json("weights.f32") : nlohmann::json(nullptr);
    res["weight_columns"] = r.weights.cols;
    res["iterations"] = r.iterations;
    res["converged"] = r.converged;
    res["solver"] = cfg.solver;
    res["solver"].erase("threads");
    res["gating"] = cfg.gating;
    detail::write_json(dir / "result.json", res);
    detail::write_json(dir / "timing.json", {{"wall_time_s", wall}});
    runs.push_back(dir);
  }
  return runs;
}

// ---------------------------------------------------------------------------
// report

struct RunRecord {
  io::fs::path dir;
  Method method;
  std::string dataset_name;
  std::uint64_t seed = 0;
  double fraction = 0.0;
  int iterations = 0;
  bool converged = false;
  double psnr = std::numeric_limits<double>::quiet_NaN();
  double ssim = std::numeric_limits<double>::quiet_NaN();
  double edge = std::numeric_limits<double>::quiet_NaN();
  double brier = std::numeric_limits<double>::quiet_NaN();
  double precision = std::numeric_limits<double>::quiet_NaN();
  double recall = std::numeric_limits<double>::quiet_NaN();
  std::optional<double> wall_time_s;
};

struct ReportOptions {
  io::fs::path results;
  io::fs::path out;  // default: <results>/report
};

namespace detail {

/// Magnitude image scaled to 16 bits; returns the scale so that
/// |x| = value / scale.
inline double write_pgm16(const io::fs::path& p, std::span<const cplx> img, int nx, int ny, double peak) {
  const double scale = peak > 0.0 ? 65535.0 / peak : 0.0;
  auto f = io::open_out(p, true);
  f << "P5\n" << nx << ' ' << ny << "\n65535\n";
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      const double v = std::min(65535.0, std::round(std::abs(img[static_cast<std::size_t>(y) * nx + x]) * scale));
      const auto u = static_cast<std::uint16_t>(v);
      const unsigned char be[2] = {static_cast<unsigned char>(u >> 8), static_cast<unsigned char>(u & 0xff)};
      f.write(reinterpret_cast<const char*>(be), 2);
    }
  }
  if (!f) throw IoError("write failed for '" + p.string() + "'");
  return scale;
}

inline std::string fmt(double v) { return io::format_double(v); }

inline std::vector<io::fs::path> find_runs(const io::fs::path& root) {
  std::vector<io::fs::path> runs;
  std::error_code ec;
  if (!io::fs::is_directory(root, ec)) throw IoError("results root '" + root.string() + "' is not a directory");
  for (auto it = io::fs::recursive_directory_iterator(root, ec); it != io::fs::recursive_directory_iterator();
       it.increment(ec)) {
    if (ec) throw IoError("cannot scan '" + root.string() + "': " + ec.message());
    if (it->is_regular_file() && it->path().filename() == "result.json") runs.push_back(it->path().parent_path());
  }
  std::sort(runs.begin(), runs.end());
  return runs;
}

}  // namespace detail

/// Scores every run below the results root. Datasets without a truth stack
/// are scored on edge sharpness only.
inline std::vector<RunRecord> cmd_report(const ReportOptions& o) {
  const auto run_dirs = detail::find_runs(o.results);
  if (run_dirs.empty()) throw IoError("nothing to report: no result.json below '" + o.results.string() + "'");
  const io::fs::path out = o.out.empty() ? o.results / "report" : o.out;
  detail::make_dirs(out / "images");
  detail::make_dirs(out / "readouts");

  std::vector<RunRecord> records;
  nlohmann::json image_manifest = nlohmann::json::array();
  std::map<std::string, LoadedDataset> datasets;

  for (const auto& dir : run_dirs) {
    const auto res = detail::read_json(dir / "result.json");
    RunRecord rec;
    ImageGrid g;
    std::string dataset_path;
    std::size_t columns = 0;
    try {
      rec.dir = dir;
      rec.method = parse_method(res.at("method").get<std::string>());
      rec.dataset_name = res.at("dataset_name").get<std::string>();
      rec.seed = res.at("seed").get<std::uint64_t>();
      rec.fraction = res.at("corruption_fraction").get<double>();
      rec.iterations = res.at("iterations").get<int>();
      rec.converged = res.at("converged").get<bool>();
      g = res.at("grid").get<ImageGrid>();
      dataset_path = res.at("dataset").get<std::string>();
      columns = res.at("weight_columns").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError("malformed '" + (dir / "result.json").string() + "': " + e.what());
    } catch (const ConfigError& e) {
      throw IoError("malformed '" + (dir / "result.json").string() + "': " + e.what());
    }
    if (io::fs::exists(dir / "timing.json")) {
      rec.wall_time_s = detail::read_json(dir / "timing.json").value("wall_time_s", 0.0);
    }

    dataset_path = (dir / dataset_path).lexically_normal().string();
    if (!datasets.count(dataset_path)) datasets.emplace(dataset_path, read_dataset(dataset_path));
    const LoadedDataset& ld = datasets.at(dataset_path);
    const AcquiredDataset& ds = ld.data;
    if (ds.grid != g) throw IoError("run '" + dir.string() + "' does not match its dataset grid");

    ImageStack img(g);
    img.data = io::read_complex64(dir / "image.c64");
    if (img.data.size() != g.voxels() * static_cast<std::size_t>(g.bins())) {
      throw IoError("'" + (dir / "image.c64").string() + "' has the wrong length");
    }
    const auto table = read_assignment_csv(dir / "assignment.csv", g);
    WeightMatrix w;
    if (rec.method == Method::Emore) {
      w.rows = ds.readout_count();
      w.cols = columns;
      const auto f = io::read_raw<float>(dir / "weights.f32");
      if (f.size() != w.rows * w.cols) throw IoError("'" + (dir / "weights.f32").string() + "' has the wrong length");
      w.data.assign(f.begin(), f.end());
    } else {
      w = one_hot(table.assignment);
    }

    const auto scene = make_scene(g, ld.meta.config.physiology);
    rec.edge = edge_sharpness(img, blood_pool_profiles(scene, g));
    if (ds.truth) {
      rec.psnr = psnr(img, *ds.truth);
      rec.ssim = ssim(img, *ds.truth);
    }
    if (ds.schedule) {
      rec.brier = brier(w, true_weights(*ds.schedule, g));
      const auto det = outlier_detection_scores(w, *ds.schedule);
      rec.precision = det.precision;
      rec.recall = det.recall;
    }

    // Representative bins: end-expiration at the R-wave and at mid-cycle.
    const std::string tag = rec.dataset_name + "_" + std::string(method_name(rec.method));
    const double peak = detail::max_magnitude(img);
    const int slice = g.nz / 2;
    for (int c : {0, g.cardiac_bins / 2}) {
      const int k = g.flat_bin(c, 0);
      const std::size_t plane = static_cast<std::size_t>(g.nx) * g.ny;
      const auto vol = img.bin(k).subspan(static_cast<std::size_t>(slice) * plane, plane);
      const std::string name = tag + "_bin" + std::to_string(k + 1) + ".pgm";
      const double scale = detail::write_pgm16(out / "images" / name, vol, g.nx, g.ny, peak);
      image_manifest.push_back({{"file", name}, {"run", rec.dir.lexically_relative(o.results).string()},
                                {"bin", k + 1}, {"slice", slice}, {"scale", scale},
                                {"inverse", "magnitude = value / scale"}});
    }

    // Per-readout outlier overlay.
    {
      auto f = io::open_out(out / "readouts" / (tag + ".csv"));
      f << "time_ms,resp_amplitude,outlier_weight,true_outlier\n";
      for (std::size_t n = 0; n < w.rows; ++n) {
        f << detail::fmt(ds.time_ms[n]) << ',' << detail::fmt(table.resp_amplitude[n]) << ','
          << detail::fmt(w(n, w.outlier())) << ',';
        if (ds.schedule) {
          f << (ds.schedule->outlier_state[n] != 0 ? 1 : 0);
        } else {
          f << "nan";
        }
        f << '\n';
      }
      if (!f) throw IoError("write failed for readout overlay '" + tag + "'");
    }
    records.push_back(std::move(rec));
  }
  detail::write_json(out / "images" / "manifest.json", image_manifest);

  {
    auto f = io::open_out(out / "metrics.csv");
    f << "dataset,seed,fraction,method,iterations,converged,psnr_db,ssim,edge_sharpness,brier,precision,recall\n";
    for (const auto& r : records) {
      f << r.dataset_name << ',' << r.seed << ',' << detail::fmt(r.fraction) << ',' << method_name(r.method) << ','
        << r.iterations << ',' << (r.converged ? 1 : 0) << ',' << format_psnr(r.psnr) << ',' << detail::fmt(r.ssim)
        << ',' << detail::fmt(r.edge) << ',' << detail::fmt(r.brier) << ',' << detail::fmt(r.precision) << ','
        << detail::fmt(r.recall) << '\n';
    }
    if (!f) throw IoError("write failed for metrics.csv");
  }
  {
    auto f = io::open_out(out / "timing.csv");
    f << "dataset,method,wall_time_s\n";
    for (const auto& r : records) {
      f << r.dataset_name << ',' << method_name(r.method) << ','
        << (r.wall_time_s ? detail::fmt(*r.wall_time_s) : std::string("nan")) << '\n';
    }
  }

  // Per-fraction means over paired datasets and mean paired differences.
  struct Pair {
    const RunRecord* cs = nullptr;
    const RunRecord* em = nullptr;
  };
  std::map<double, std::map<std::string, Pair>> by_fraction;
  for (const auto& r : records) {
    auto& p = by_fraction[r.fraction][r.dataset_name];
    (r.method == Method::Cs ? p.cs : p.em) = &r;
  }
  auto f = io::open_out(out / "summary.csv");
  const std::vector<std::pair<std::string, double RunRecord::*>> metrics{
      {"psnr_db", &RunRecord::psnr}, {"ssim", &RunRecord::ssim}, {"edge_sharpness", &RunRecord::edge},
      {"brier", &RunRecord::brier}};
  f << "fraction,pairs";
  for (const auto& [name, _] : metrics) f << ',' << name << "_cs," << name << "_emore,delta_" << name;
  f << ",precision_emore,recall_emore\n";
  for (const auto& [fraction, pairs] : by_fraction) {
    std::vector<Pair> complete;
    for (const auto& [_, p] : pairs) {
      if (p.cs && p.em) complete.push_back(p);
    }
    f << detail::fmt(fraction) << ',' << complete.size();
    auto mean = [&](auto get) {
      if (complete.empty()) return std::numeric_limits<double>::quiet_NaN();
      double s = 0.0;
      for (const auto& p : complete) s += get(p);
      return s / static_cast<double>(complete.size());
    };
    for (const auto& [name, member] : metrics) {
      const double cs = mean([&](const Pair& p) { return p.cs->*member; });
      const double em = mean([&](const Pair& p) { return p.em->*member; });
      const double d = mean([&](const Pair& p) { return p.em->*member - p.cs->*member; });
      if (name == "psnr_db") {
        f << ',' << format_psnr(cs) << ',' << format_psnr(em) << ',' << detail::fmt(d);
      } else {
        f << ',' << detail::fmt(cs) << ',' << detail::fmt(em) << ',' << detail::fmt(d);
      }
    }
    f << ',' << detail::fmt(mean([](const Pair& p) { return p.em->precision; })) << ','
      << detail::fmt(mean([](const Pair& p) { return p.em->recall; })) << '\n';
  }
  if (!f) throw IoError("write failed for summary.csv");
  return records;
}

}  // namespace emore

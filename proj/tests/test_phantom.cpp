#include <gtest/gtest.h>
#include <unistd.h>

#include "oracles.hpp"

using namespace emore;

namespace {

ImageGrid small_grid(int n, double mm, int nc = 1, int nr = 1) {
  ImageGrid g;
  g.nx = n;
  g.ny = n;
  g.voxel_mm = mm;
  g.cardiac_bins = nc;
  g.respiratory_bins = nr;
  return g;
}

PhantomScene empty_scene(const ImageGrid& g) {
  PhantomScene s;
  s.respiratory_shift_mm.assign(static_cast<std::size_t>(g.respiratory_bins), 0.0);
  s.cardiac_contraction.assign(static_cast<std::size_t>(g.cardiac_bins), 0.0);
  return s;
}

std::vector<cplx> gaussian_blob(const ImageGrid& g, double width_mm, Vec3 centre = {}) {
  std::vector<cplx> v(g.voxels());
  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 0; ix < g.nx; ++ix) {
      const Vec3 p = voxel_position(g, ix, iy, 0);
      const double d2 = std::pow(p[0] - centre[0], 2) + std::pow(p[1] - centre[1], 2);
      v[static_cast<std::size_t>(iy) * g.nx + ix] = std::exp(-d2 / (2 * width_mm * width_mm));
    }
  }
  return v;
}

double max_abs_diff(std::span<const cplx> a, std::span<const cplx> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

std::vector<char> bytes(const std::filesystem::path& p) { return io::read_bytes(p); }

std::filesystem::path scratch_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / ("emore_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(d);
  return d;
}

}  // namespace

TEST(RenderTruth, NoPrimitivesGivesZeros) {
  const auto g = small_grid(16, 3.0, 2, 2);
  const auto t = render_truth(empty_scene(g), g);
  for (const cplx& v : t.data) EXPECT_EQ(v, cplx{});
}

TEST(RenderTruth, StaticDiskIsMaskTimesContrast) {
  const auto g = small_grid(16, 2.0);
  auto s = empty_scene(g);
  s.primitives.push_back({"disk", {2.0, -4.0, 0.0}, {7.0, 7.0, 7.0}, {0.5, 0.25}, MotionRole::Static, 0.0});
  const auto t = render_truth(s, g);
  for (int iy = 0; iy < 16; ++iy) {
    for (int ix = 0; ix < 16; ++ix) {
      const Vec3 p = voxel_position(g, ix, iy, 0);
      const bool inside = std::pow(p[0] - 2.0, 2) + std::pow(p[1] + 4.0, 2) <= 49.0;
      EXPECT_EQ(t.data[static_cast<std::size_t>(iy) * 16 + ix], inside ? cplx(0.5, 0.25) : cplx{});
    }
  }
}

TEST(RenderTruth, RespiratoryPhasesDifferByTheConfiguredShift) {
  // 4 mm voxels and a 12 mm end-inspiration shift: exactly three voxels along x.
  const auto g = small_grid(32, 4.0, 20, 4);
  auto s = empty_scene(g);
  s.respiratory_shift_mm = {0.0, 4.0, 8.0, 12.0};
  s.primitives.push_back({"heart", {-10.0, 6.0, 0.0}, {18.0, 14.0, 14.0}, {1.0, 0.0}, MotionRole::Cardiac, 0.0});
  const auto t = render_truth(s, g);
  const auto first = t.bin(g.flat_bin(0, 0)), last = t.bin(g.flat_bin(0, 3));
  std::vector<cplx> shifted(g.voxels());
  for (int iy = 0; iy < g.ny; ++iy) {
    for (int ix = 3; ix < g.nx; ++ix) shifted[iy * g.nx + ix] = first[iy * g.nx + ix - 3];
  }
  EXPECT_EQ(max_abs_diff(shifted, last), 0.0);
}

TEST(RenderTruth, PrimitiveLeavingTheFieldOfViewIsAGenerationError) {
  const auto g = small_grid(16, 2.0);
  auto s = empty_scene(g);
  s.primitives.push_back({"big", {0, 0, 0}, {40.0, 4.0, 4.0}, {1, 0}, MotionRole::Static, 0.0});
  EXPECT_THROW(render_truth(s, g), GenerationError);
}

TEST(RenderTruth, MismatchedMotionTablesAreAConfigError) {
  const auto g = small_grid(16, 2.0, 3, 2);
  auto s = empty_scene(small_grid(16, 2.0, 2, 2));
  EXPECT_THROW(render_truth(s, g), ConfigError);
}

TEST(Scene, DefaultPhantomFitsAndCardiacCycleWraps) {
  ExperimentConfig cfg;
  const auto scene = make_scene(cfg);
  EXPECT_NO_THROW(render_truth(scene, cfg.grid));
  const auto& c = scene.cardiac_contraction;
  ASSERT_EQ(c.size(), 10u);
  // The last phase sits next to the first: both near the R-wave.
  EXPECT_LT(std::abs(c.back() - c.front()), 1e-12);
  EXPECT_GT(*std::max_element(c.begin(), c.end()), 0.9);
  EXPECT_NE(scene.find("blood_pool"), nullptr);
}

TEST(OutlierStates, FixedSevenElementSet) {
  int translations = 0, rotations = 0;
  for (int id = 1; id <= kOutlierStateCount; ++id) {
    const auto s = outlier_state(id);
    if (s.rotation_deg == 0.0) {
      ++translations;
      EXPECT_EQ(std::abs(s.translation_mm[0]), 20.0);
    } else {
      ++rotations;
      EXPECT_EQ(std::abs(s.rotation_deg), 10.0);
    }
  }
  EXPECT_EQ(translations, 2);
  EXPECT_EQ(rotations, 5);
  EXPECT_EQ(outlier_state(7).rotation_deg, -10.0);
  EXPECT_THROW(outlier_state(8), ConfigError);
}

TEST(ApplyOutlierState, RestStateIsIdentity) {
  const auto g = small_grid(16, 3.0);
  std::mt19937_64 rng(1);
  const auto v = oracle::random_vector(g.voxels(), rng);
  EXPECT_EQ(apply_outlier_state(v, g, outlier_state(0)), v);
}

TEST(ApplyOutlierState, TranslationRoundTripWithinInterpolationTolerance) {
  const auto g = small_grid(64, 3.0);
  const auto v = gaussian_blob(g, 12.0);
  const auto there = apply_outlier_state(v, g, outlier_state(1));
  const auto back = apply_outlier_state(there, g, outlier_state(2));
  EXPECT_GT(max_abs_diff(there, v), 0.1);  // it really moved
  EXPECT_LE(max_abs_diff(back, v), 0.02);
}

TEST(ApplyOutlierState, RotationLeavesACentredDiskUnchanged) {
  const auto g = small_grid(64, 3.0);
  const auto v = gaussian_blob(g, 15.0);
  for (int id : {3, 4, 5, 6, 7}) EXPECT_LE(max_abs_diff(apply_outlier_state(v, g, outlier_state(id)), v), 0.02);
  // An off-centre blob does move.
  const auto off = gaussian_blob(g, 6.0, {40.0, 0.0, 0.0});
  EXPECT_GT(max_abs_diff(apply_outlier_state(off, g, outlier_state(3)), off), 0.2);
}

TEST(BuildSchedule, ZeroFractionHasNoOutliers) {
  const auto cfg = testing_support::tiny_config();
  const auto s = build_schedule(cfg, 0.0, 3);
  EXPECT_EQ(s.corrupted_count(), 0u);
  EXPECT_TRUE(s.episodes.empty());
}

TEST(BuildSchedule, CorruptedReadoutCountMatchesTheFraction) {
  ExperimentConfig cfg;
  cfg.scan_seconds = 40.0;  // 10000 readouts at 4 ms
  ASSERT_EQ(cfg.readout_count(), 10000u);
  for (double f : {0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.9}) {
    for (std::uint64_t seed : {1u, 2u, 7u}) {
      const auto s = build_schedule(cfg, f, seed);
      EXPECT_LE(std::abs(static_cast<double>(s.corrupted_count()) - f * 10000.0), 1.0) << f;
      // Disjoint, ordered episodes covering exactly the corrupted readouts.
      std::size_t covered = 0, end = 0;
      for (std::size_t e = 0; e < s.episodes.size(); ++e) {
        const auto& ep = s.episodes[e];
        if (e > 0) EXPECT_GT(ep.start, end);
        EXPECT_GE(ep.state, 1);
        EXPECT_LE(ep.state, 7);
        covered += ep.length;
        end = ep.start + ep.length;
      }
      EXPECT_LE(end, 10000u);
      EXPECT_EQ(covered, s.corrupted_count());
      EXPECT_EQ(s.episodes.size(), 10u);
    }
  }
}

TEST(BuildSchedule, FivePercentEpisodesLastAboutOneAndAHalfSeconds) {
  ExperimentConfig cfg;
  cfg.scan_seconds = 300.0;
  ASSERT_EQ(cfg.readout_count(), 75000u);
  const auto s = build_schedule(cfg, 0.05, 1);
  for (const auto& e : s.episodes) EXPECT_NEAR(e.length * cfg.tr_ms / 1000.0, 1.5, 0.01);
}

TEST(BuildSchedule, PhysiologyStaysInItsConfiguredRanges) {
  ExperimentConfig cfg;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = build_schedule(cfg, 0.2, seed);
    const auto [rmin, rmax] = std::minmax_element(s.respiratory_periods_s.begin(), s.respiratory_periods_s.end());
    EXPECT_GE(*rmin, cfg.physiology.resp_period_min_s);
    EXPECT_LE(*rmax - *rmin, cfg.physiology.resp_jitter_s);
    const auto [cmin, cmax] = std::minmax_element(s.rr_intervals_ms.begin(), s.rr_intervals_ms.end());
    EXPECT_LE(*cmax - *cmin, cfg.physiology.rr_jitter_ms);
    // Base heart rate sets the shortest possible beat.
    EXPECT_GE(*cmin, 60000.0 / cfg.physiology.heart_rate_max_bpm);
    EXPECT_LE(*cmin, 60000.0 / cfg.physiology.heart_rate_min_bpm + cfg.physiology.rr_jitter_ms);
    for (double p : s.cardiac_phase) {
      EXPECT_GE(p, 0.0);
      EXPECT_LT(p, 1.0);
    }
    // Respiratory truth bins have equal occupancy.
    std::vector<int> counts(4, 0);
    for (int r : s.respiratory) ++counts[static_cast<std::size_t>(r)];
    EXPECT_LE(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()), 1);
  }
}

TEST(BuildSchedule, RejectsFractionsAboveNinetyPercent) {
  const auto cfg = testing_support::tiny_config();
  EXPECT_THROW(build_schedule(cfg, 0.95, 1), ConfigError);
  EXPECT_THROW(build_schedule(cfg, -0.1, 1), ConfigError);
  EXPECT_NO_THROW(build_schedule(cfg, 0.9, 1));
}

TEST(BuildSchedule, IsDeterministicPerSeed) {
  const auto cfg = testing_support::tiny_config();
  EXPECT_EQ(build_schedule(cfg, 0.2, 4), build_schedule(cfg, 0.2, 4));
  EXPECT_NE(build_schedule(cfg, 0.2, 4).outlier_state, build_schedule(cfg, 0.2, 5).outlier_state);
}

TEST(Acquisition, NoiselessFullSamplingReproducesTheForwardModel) {
  const auto g = small_grid(8, 6.0);
  auto scene = empty_scene(g);
  scene.primitives.push_back({"disk", {3, -2, 0}, {15, 12, 12}, {0.7, 0.1}, MotionRole::Static, 0.0});
  const auto truth = render_truth(scene, g);
  MotionSchedule s;
  s.respiratory.assign(8, 0);
  s.cardiac.assign(8, 0);
  s.outlier_state.assign(8, 0);
  s.respiratory_amplitude.assign(8, 0.0);
  s.cardiac_phase.assign(8, 0.0);
  AcquisitionSpec spec;
  std::mt19937_64 rng(2);
  spec.maps = oracle::random_maps(g, 3, rng);
  for (cplx& v : spec.maps.data) v = round_to_c64(v);
  spec.sampling.samples_per_readout = 8;
  spec.sampling.self_gating.assign(8, 0);
  for (KIndex i = 0; i < 64; ++i) spec.sampling.indices.push_back(i);
  const auto ds = simulate_acquisition(truth, s, spec);
  EXPECT_EQ(ds.sigma, 0.0);
  const SenseOperator op(ds.maps);
  for (std::size_t n = 0; n < 8; ++n) {
    auto want = op.forward(truth.bin(0), ds.sampling_indices(n));
    round_to_c64(want);
    const auto got = ds.readout(n);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(got[i], want[i]);
  }
}

TEST(Acquisition, ThirtyDecibelSnrIsMet) {
  const auto cfg = testing_support::tiny_config();
  const auto scene = make_scene(cfg);
  const auto truth = render_truth(scene, cfg.grid);
  const auto sched = build_schedule(cfg, 0.0, 1);
  AcquisitionSpec spec;
  spec.maps = make_coil_maps(cfg.grid, cfg.coils, CoilLayout::BiotSavart);
  spec.sampling = make_sampling(cfg.grid, sched.size(), cfg.sg_every, cfg.sampling, 1);
  const auto clean = simulate_acquisition(truth, sched, spec);
  spec.snr_db = 30.0;
  spec.noise_seed = 1;
  const auto noisy = simulate_acquisition(truth, sched, spec);
  std::vector<cplx> noise(clean.readouts.size());
  for (std::size_t i = 0; i < noise.size(); ++i) noise[i] = noisy.readouts[i] - clean.readouts[i];
  const double snr = 10.0 * std::log10(squared_norm(clean.readouts) / squared_norm(noise));
  EXPECT_NEAR(snr, 30.0, 0.2);
  EXPECT_NEAR(squared_norm(noise) / noise.size(), noisy.sigma * noisy.sigma, 0.05 * noisy.sigma * noisy.sigma);

  // White noise: normalized autocorrelation at small lags.
  const double bound = 3.0 / std::sqrt(static_cast<double>(noise.size()));
  const double e0 = squared_norm(noise);
  for (std::size_t lag = 1; lag <= 5; ++lag) {
    cplx acc{};
    for (std::size_t i = 0; i + lag < noise.size(); ++i) acc += std::conj(noise[i]) * noise[i + lag];
    EXPECT_LT(std::abs(acc) / e0, bound) << "lag " << lag;
  }
}

TEST(Acquisition, ReadoutCountFollowsScanTimeOverTr) {
  ExperimentConfig cfg;
  cfg.scan_seconds = 300.0;
  cfg.tr_ms = 4.0;
  EXPECT_EQ(cfg.readout_count(), 75000u);
  const auto tiny = testing_support::tiny_config();
  EXPECT_EQ(generate_dataset(tiny, 1, 0.0).readout_count(), tiny.readout_count());
}

TEST(Acquisition, CorruptedReadoutsSampleTheTransformedVolume) {
  auto cfg = testing_support::tiny_config();
  cfg.snr_db = 200.0;  // effectively noiseless, still a positive sigma
  const auto ds = generate_dataset(cfg, 2, 0.2);
  const auto& s = *ds.schedule;
  const SenseOperator op(ds.maps);
  int checked = 0;
  for (std::size_t n = 0; n < ds.readout_count() && checked < 20; ++n) {
    if (s.outlier_state[n] == 0) continue;
    const int k = cfg.grid.flat_bin(s.cardiac[n], s.respiratory[n]);
    const auto moved = apply_outlier_state(ds.truth->bin(k), cfg.grid, outlier_state(s.outlier_state[n]));
    const auto want = op.forward(moved, ds.sampling_indices(n));
    const auto got = ds.readout(n);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(std::abs(got[i] - want[i]), 0.0, 1e-5);
    ++checked;
  }
  EXPECT_EQ(checked, 20);
}

TEST(Acquisition, SelfGatingLineEveryTenthReadoutAndCoverage) {
  ExperimentConfig cfg;
  const auto pat = make_sampling(cfg.grid, cfg.readout_count(), cfg.sg_every, cfg.sampling, 1);
  std::vector<bool> seen(cfg.grid.voxels(), false);
  for (std::size_t n = 0; n < cfg.readout_count(); ++n) {
    EXPECT_EQ(pat.self_gating[n] != 0, n % 10 == 0);
    for (std::size_t j = 0; j < pat.samples_per_readout; ++j) {
      const KIndex idx = pat.indices[n * pat.samples_per_readout + j];
      if (pat.self_gating[n]) {
        EXPECT_EQ(idx, static_cast<KIndex>(j));  // the ky = 0 line through the centre
      } else {
        seen[idx] = true;
      }
    }
  }
  const double coverage = std::count(seen.begin(), seen.end(), true) / static_cast<double>(seen.size());
  EXPECT_GE(coverage, 0.95);
  // Phase-encode lines x bins over imaging readouts; below 1 at this scan length.
  const double imaging = cfg.readout_count() - cfg.readout_count() / cfg.sg_every;
  EXPECT_DOUBLE_EQ(nominal_acceleration(cfg.grid, pat), cfg.grid.ny * cfg.grid.bins() / imaging);
}

TEST(CoilMaps, UniformSingleCoilIsAllOnes) {
  const auto maps = make_coil_maps(small_grid(8, 3.0), 1, CoilLayout::Uniform);
  for (const cplx& v : maps.data) EXPECT_EQ(v, cplx(1.0, 0.0));
}

TEST(CoilMaps, BiotSavartMapsArePositiveAndSmooth) {
  ExperimentConfig cfg;
  const auto& g = cfg.grid;
  const auto maps = make_coil_maps(g, 8, CoilLayout::BiotSavart);
  EXPECT_EQ(maps.data, make_coil_maps(g, 8, CoilLayout::BiotSavart).data);
  double peak = 0.0;
  for (std::size_t v = 0; v < g.voxels(); ++v) {
    EXPECT_GT(maps.root_sum_of_squares(v), 0.0);
    peak = std::max(peak, maps.root_sum_of_squares(v));
  }
  EXPECT_NEAR(peak, 1.0, 1e-6);
  // Locally linear: mean |second difference| well below mean |first
  // difference| (white noise gives about 1.7).
  double worst = 0.0;
  for (int c = 0; c < 8; ++c) {
    const auto s = maps.coil(c);
    double d1 = 0.0, d2 = 0.0;
    for (int iy = 1; iy + 1 < g.ny; ++iy) {
      for (int ix = 1; ix + 1 < g.nx; ++ix) {
        const std::size_t v = static_cast<std::size_t>(iy) * g.nx + ix;
        d1 += std::abs(s[v + 1] - s[v]) + std::abs(s[v + g.nx] - s[v]);
        d2 += std::abs(s[v + 1] - 2.0 * s[v] + s[v - 1]) + std::abs(s[v + g.nx] - 2.0 * s[v] + s[v - g.nx]);
      }
    }
    worst = std::max(worst, d2 / d1);
  }
  EXPECT_LT(worst, 0.5);
}

TEST(GenerateDataset, IsBitIdenticalForTheSameSeed) {
  const auto cfg = testing_support::tiny_config();
  const auto a = generate_dataset(cfg, 1, 0.2), b = generate_dataset(cfg, 1, 0.2);
  EXPECT_EQ(a.readouts, b.readouts);
  EXPECT_EQ(a.kspace_index, b.kspace_index);
  EXPECT_EQ(a.sigma, b.sigma);
  EXPECT_EQ(*a.schedule, *b.schedule);
  auto threaded = cfg;
  threaded.threads = 3;
  EXPECT_EQ(generate_dataset(threaded, 1, 0.2).readouts, a.readouts);
  EXPECT_NE(generate_dataset(cfg, 2, 0.2).readouts, a.readouts);
}

TEST(DatasetIo, RoundTripIsBitExact) {
  const auto cfg = testing_support::tiny_config();
  const auto ds = generate_dataset(cfg, 1, 0.2);
  const auto d1 = scratch_dir("rt1"), d2 = scratch_dir("rt2");
  write_dataset(d1, ds, {1, 0.2, cfg});
  const auto back = read_dataset(d1);
  EXPECT_EQ(back.data.readouts, ds.readouts);
  EXPECT_EQ(back.data.maps.data, ds.maps.data);
  EXPECT_EQ(back.data.truth->data, ds.truth->data);
  EXPECT_EQ(*back.data.schedule, *ds.schedule);
  EXPECT_EQ(back.data.time_ms, ds.time_ms);
  EXPECT_EQ(back.data.sigma, ds.sigma);
  EXPECT_EQ(back.meta.config, cfg);
  write_dataset(d2, back.data, back.meta);
  for (const char* f : {"manifest.json", "readouts.c64", "sampling.u32", "self_gating.u8", "coil_maps.c64",
                        "truth.c64", "labels.csv"}) {
    EXPECT_EQ(bytes(d1 / f), bytes(d2 / f)) << f;
  }
  std::filesystem::remove_all(d1);
  std::filesystem::remove_all(d2);
}

TEST(DatasetIo, MissingOrTruncatedFilesAreIoErrors) {
  const auto cfg = testing_support::tiny_config();
  const auto ds = generate_dataset(cfg, 1, 0.0);
  const auto d = scratch_dir("bad");
  EXPECT_THROW(read_dataset(d), IoError);
  write_dataset(d, ds, {1, 0.0, cfg});
  std::filesystem::resize_file(d / "coil_maps.c64", 16);
  EXPECT_THROW(read_dataset(d), IoError);
  { std::ofstream(d / "manifest.json") << "{ not json"; }
  EXPECT_THROW(read_dataset(d), IoError);
  std::filesystem::remove_all(d);
}

TEST(DatasetIo, RejectsValuesComplex64CannotHold) {
  const auto cfg = testing_support::tiny_config();
  auto ds = generate_dataset(cfg, 1, 0.0);
  ds.readouts[0] += cplx{1e-13, 0.0};
  const auto d = scratch_dir("repr");
  EXPECT_THROW(write_dataset(d, ds, {1, 0.0, cfg}), IoError);
  std::filesystem::remove_all(d);
}

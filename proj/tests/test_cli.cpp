// End-to-end checks of the emore binary: exit codes, file layout, determinism.

#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>
#include <unistd.h>

#include "emore/emore.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace emore;

namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + EMORE_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("emore_cli_" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  f << s;
}

std::vector<char> bytes(const fs::path& p) { return io::read_bytes(p); }

// Every regular file below a, relative path -> contents.
std::map<std::string, std::vector<char>> tree(const fs::path& root) {
  std::map<std::string, std::vector<char>> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (e.is_regular_file()) out[fs::relative(e.path(), root).generic_string()] = bytes(e.path());
  }
  return out;
}

ExperimentConfig cli_config() {
  auto c = testing_support::tiny_config();
  c.solver.max_outer_iterations = 4;
  return c;
}

// One generate + reconstruct + report shared by the pipeline tests.
class CliPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = new fs::path(scratch("pipeline"));
    write_text(*root_ / "config.json", config_to_json(cli_config()).dump(2));
    gen_code_ = run_cli("generate --config \"" + (*root_ / "config.json").string() + "\" --out \"" +
                        (*root_ / "data").string() + "\"");
    rec_code_ = run_cli("reconstruct \"" + (*root_ / "data" / "seed1_frac0.00").string() + "\" \"" +
                        (*root_ / "data" / "seed1_frac0.20").string() + "\" --method both --out \"" +
                        (*root_ / "results").string() + "\"");
    rep_code_ = run_cli("report \"" + (*root_ / "results").string() + "\"");
  }
  static void TearDownTestSuite() {
    fs::remove_all(root_->parent_path());
    delete root_;
  }
  static fs::path* root_;
  static int gen_code_, rec_code_, rep_code_;
};
fs::path* CliPipeline::root_ = nullptr;
int CliPipeline::gen_code_ = -1;
int CliPipeline::rec_code_ = -1;
int CliPipeline::rep_code_ = -1;

double cell(const io::CsvTable& t, std::size_t row, const std::string& col) {
  return io::parse_double(t.rows.at(row).at(t.column(col)));
}

}  // namespace

TEST(CliExitCodes, MissingSubcommandIsConfigError) { EXPECT_EQ(run_cli(""), kExitConfig); }

TEST(CliExitCodes, UnknownMethodIsConfigError) {
  const auto d = scratch("badmethod");
  EXPECT_EQ(run_cli("reconstruct \"" + d.string() + "\" --method sgd"), kExitConfig);
}

TEST(CliExitCodes, MalformedConfigIsConfigError) {
  const auto d = scratch("badjson");
  write_text(d / "c.json", "{ not json");
  EXPECT_EQ(run_cli("generate --config \"" + (d / "c.json").string() + "\" --out \"" + d.string() + "\""),
            kExitConfig);
}

TEST(CliExitCodes, OutOfRangeConfigValueIsConfigError) {
  const auto d = scratch("badvalue");
  auto j = config_to_json(cli_config());
  j["grid"]["nx"] = 2;
  write_text(d / "c.json", j.dump());
  EXPECT_EQ(run_cli("generate --config \"" + (d / "c.json").string() + "\" --out \"" + d.string() + "\""),
            kExitConfig);
}

TEST(CliExitCodes, DirectoryWithoutDatasetIsIoError) {
  const auto d = scratch("empty");
  EXPECT_EQ(run_cli("reconstruct \"" + d.string() + "\" --method cs --out \"" + (d / "r").string() + "\""), kExitIo);
}

TEST(CliExitCodes, ReportOnEmptyRootIsIoError) {
  const auto d = scratch("noruns");
  EXPECT_EQ(run_cli("report \"" + d.string() + "\""), kExitIo);
  EXPECT_THROW(cmd_report({d, {}}), IoError);
}

TEST(CliConfig, JsonRoundTripIsLossless) {
  const auto c = cli_config();
  EXPECT_EQ(config_from_json(nlohmann::json::parse(config_to_json(c).dump())), c);
  const ExperimentConfig d;
  EXPECT_EQ(config_from_json(config_to_json(d)), d);
}

TEST(CliConfig, DatasetNames) {
  EXPECT_EQ(dataset_name(3, 0.2), "seed3_frac0.20");
  EXPECT_EQ(dataset_name(1, 0.0), "seed1_frac0.00");
  EXPECT_EQ(dataset_name(7, 0.125), "seed7_frac0.125");
}

TEST_F(CliPipeline, AllStagesSucceed) {
  EXPECT_EQ(gen_code_, kExitOk);
  EXPECT_EQ(rec_code_, kExitOk);
  EXPECT_EQ(rep_code_, kExitOk);
}

TEST_F(CliPipeline, GenerateWritesOneDirectoryPerFraction) {
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(*root_ / "data")) names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"seed1_frac0.00", "seed1_frac0.20"}));
  for (const char* f : {"manifest.json", "readouts.c64", "sampling.u32", "labels.csv", "truth.c64"}) {
    EXPECT_TRUE(fs::exists(*root_ / "data" / "seed1_frac0.20" / f)) << f;
  }
}

TEST_F(CliPipeline, GenerateIsByteIdenticalAcrossRunsAndThreads) {
  const auto again = scratch("again");
  ASSERT_EQ(run_cli("generate --config \"" + (*root_ / "config.json").string() + "\" --seed 1 --fraction 0.2 "
                    "--threads 2 --out \"" + again.string() + "\""),
            kExitOk);
  const auto a = tree(again / "seed1_frac0.20"), b = tree(*root_ / "data" / "seed1_frac0.20");
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [name, content] : a) EXPECT_TRUE(b.count(name) && b.at(name) == content) << name;
}

TEST_F(CliPipeline, RunLayoutPerMethod) {
  const auto run = *root_ / "results" / "seed1_frac0.20";
  for (const char* m : {"cs", "emore"}) {
    for (const char* f : {"image.c64", "trace.csv", "result.json", "timing.json", "assignment.csv"}) {
      EXPECT_TRUE(fs::exists(run / m / f)) << m << '/' << f;
    }
  }
  EXPECT_FALSE(fs::exists(run / "cs" / "weights.f32"));
  ASSERT_TRUE(fs::exists(run / "emore" / "weights.f32"));
  const auto g = cli_config().grid;
  const auto n = read_dataset(*root_ / "data" / "seed1_frac0.20").data.readout_count();
  EXPECT_EQ(fs::file_size(run / "emore" / "weights.f32"), n * (g.bins() + 1) * sizeof(float));
}

TEST_F(CliPipeline, EmoreWeightsAreRowStochastic) {
  const auto f = io::read_raw<float>(*root_ / "results" / "seed1_frac0.20" / "emore" / "weights.f32");
  const std::size_t cols = cli_config().grid.bins() + 1;
  ASSERT_EQ(f.size() % cols, 0u);
  for (std::size_t n = 0; n < f.size() / cols; ++n) {
    double s = 0.0;
    for (std::size_t k = 0; k < cols; ++k) {
      ASSERT_GE(f[n * cols + k], 0.0f);
      s += f[n * cols + k];
    }
    ASSERT_NEAR(s, 1.0, 1e-5) << "row " << n;
  }
}

TEST_F(CliPipeline, ReportFilesExist) {
  const auto rep = *root_ / "results" / "report";
  for (const char* f : {"metrics.csv", "summary.csv", "timing.csv", "images/manifest.json"}) {
    EXPECT_TRUE(fs::exists(rep / f)) << f;
  }
  EXPECT_EQ(io::read_csv(rep / "metrics.csv").rows.size(), 4u);
  EXPECT_TRUE(fs::exists(rep / "readouts" / "seed1_frac0.20_emore.csv"));
}

TEST_F(CliPipeline, SummaryDeltaIsPairedMean) {
  const auto m = io::read_csv(*root_ / "results" / "report" / "metrics.csv");
  const auto s = io::read_csv(*root_ / "results" / "report" / "summary.csv");
  for (std::size_t r = 0; r < s.rows.size(); ++r) {
    const double frac = cell(s, r, "fraction");
    double cs = 0.0, em = 0.0;
    for (std::size_t i = 0; i < m.rows.size(); ++i) {
      if (std::abs(cell(m, i, "fraction") - frac) > 1e-12) continue;
      (m.rows[i][m.column("method")] == "cs" ? cs : em) = cell(m, i, "psnr_db");
    }
    EXPECT_NEAR(cell(s, r, "delta_psnr_db"), em - cs, 1e-9);
    EXPECT_EQ(cell(s, r, "pairs"), 1.0);
  }
}

TEST_F(CliPipeline, CsBrierMatchesHardAssignment) {
  const auto ld = read_dataset(*root_ / "data" / "seed1_frac0.20");
  const auto& g = ld.data.grid;
  const auto table = read_assignment_csv(*root_ / "results" / "seed1_frac0.20" / "cs" / "assignment.csv", g);
  const double expect = brier(one_hot(table.assignment), true_weights(*ld.data.schedule, g));
  const auto m = io::read_csv(*root_ / "results" / "report" / "metrics.csv");
  bool found = false;
  for (std::size_t i = 0; i < m.rows.size(); ++i) {
    if (m.rows[i][m.column("dataset")] == "seed1_frac0.20" && m.rows[i][m.column("method")] == "cs") {
      EXPECT_NEAR(cell(m, i, "brier"), expect, 1e-12 * std::max(1.0, expect));
      found = true;
    }
  }
  EXPECT_TRUE(found);
}

TEST_F(CliPipeline, ReconstructIsByteIdenticalAcrossThreads) {
  const auto again = scratch("rerun");
  ASSERT_EQ(run_cli("reconstruct \"" + (*root_ / "data" / "seed1_frac0.20").string() +
                    "\" --method emore --threads 2 --out \"" + again.string() + "\""),
            kExitOk);
  const auto a = *root_ / "results" / "seed1_frac0.20" / "emore";
  const auto b = again / "seed1_frac0.20" / "emore";
  for (const char* f : {"image.c64", "weights.f32", "trace.csv", "assignment.csv"}) {
    EXPECT_EQ(bytes(a / f), bytes(b / f)) << f;
  }
}

TEST_F(CliPipeline, CheckpointsAreWrittenAndResumable) {
  const auto out = scratch("ckpt");
  const auto data = *root_ / "data" / "seed1_frac0.20";
  ASSERT_EQ(run_cli("reconstruct \"" + data.string() + "\" --method emore --checkpoint-every 1 --out \"" +
                    out.string() + "\""),
            kExitOk);
  const auto ck = out / "seed1_frac0.20" / "emore" / "checkpoints" / "iter_0001";
  ASSERT_TRUE(fs::exists(ck / "manifest.json"));
  ASSERT_TRUE(fs::exists(ck / "weights.f32"));
  const auto [st, method] = read_checkpoint(ck);
  EXPECT_EQ(method, Method::Emore);
  EXPECT_EQ(st.iteration, 1);
  EXPECT_LT(st.weights.max_row_error(), 1e-9);

  const auto resumed = scratch("resumed");
  ASSERT_EQ(run_cli("reconstruct \"" + data.string() + "\" --method emore --resume \"" + ck.string() +
                    "\" --out \"" + resumed.string() + "\""),
            kExitOk);
  const auto full = out / "seed1_frac0.20" / "emore";
  const auto cont = resumed / "seed1_frac0.20" / "emore";
  EXPECT_EQ(bytes(full / "image.c64"), bytes(cont / "image.c64"));
  EXPECT_EQ(bytes(full / "weights.f32"), bytes(cont / "weights.f32"));
}

TEST_F(CliPipeline, ResumeWithWrongMethodIsConfigError) {
  const auto out = scratch("ckpt2");
  const auto data = *root_ / "data" / "seed1_frac0.20";
  ASSERT_EQ(run_cli("reconstruct \"" + data.string() + "\" --method emore --checkpoint-every 2 --out \"" +
                    out.string() + "\""),
            kExitOk);
  const auto ck = out / "seed1_frac0.20" / "emore" / "checkpoints" / "iter_0002";
  ASSERT_TRUE(fs::exists(ck));
  EXPECT_EQ(run_cli("reconstruct \"" + data.string() + "\" --method cs --resume \"" + ck.string() + "\" --out \"" +
                    out.string() + "\""),
            kExitConfig);
}

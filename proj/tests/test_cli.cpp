#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <memory>
#include <sstream>

#include <sys/wait.h>

#include "doamo/commands.hpp"
#include "doamo/image_io.hpp"
#include "doamo/model_io.hpp"
#include "test_support.hpp"

namespace doamo {
namespace {

namespace fs = std::filesystem;

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path write_config(const fs::path& path, const std::string& text) {
  std::ofstream(path) << text;
  return path;
}

// One tiny dataset shared by every test in the suite.
class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = new testing::TempDir("cli");
    cli::CommandOptions o;
    o.config = write_config(dir_->path() / "gen.cfg", "train_images = 8\ntest_images = 6\n");
    o.seed = 5;
    o.out = data_root();
    cli::cmd_generate_data(o);
  }
  static void TearDownTestSuite() {
    delete dir_;
    dir_ = nullptr;
  }
  static fs::path root() { return dir_->path(); }
  static fs::path data_root() { return dir_->path() / "data"; }

  static cli::CommandOptions train_options(const std::string& name, const std::string& cfg) {
    cli::CommandOptions o;
    o.config = write_config(root() / (name + ".cfg"), cfg);
    o.seed = 11;
    o.data_root = data_root();
    o.out = root() / name;
    return o;
  }

  static testing::TempDir* dir_;
};

testing::TempDir* Cli::dir_ = nullptr;

TEST_F(Cli, GeneratedDatasetValidates) {
  cli::CommandOptions o;
  o.data_root = data_root();
  const auto j = cli::cmd_validate_dataset(o);
  EXPECT_TRUE(j["ok"].get<bool>());
  EXPECT_TRUE(j["train"]["report"]["ok"].get<bool>());
  o.config = write_config(root() / "preset.cfg", "preset = opixray-train\n");
  const auto p = cli::cmd_validate_dataset(o);
  EXPECT_FALSE(p["ok"].get<bool>());
  EXPECT_FALSE(p["train"]["report"]["mismatches"].empty());
}

TEST_F(Cli, TrainWritesCheckpointsLogAndMetrics) {
  const auto o = train_options("smoke", "epochs = 2\nbatch_size = 4\n");
  const auto res = cli::cmd_train(o);
  ASSERT_EQ(res.epochs.size(), 2u);
  for (const char* f : {"epoch_001.ckpt", "epoch_002.ckpt", "final.ckpt", "metrics.json"}) {
    EXPECT_TRUE(fs::exists(*o.out / f)) << f;
  }
  EXPECT_EQ(file_bytes(*o.out / "epoch_002.ckpt"), file_bytes(*o.out / "final.ckpt"));
  std::ifstream log(*o.out / "train_log.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("L_i"));
    ++lines;
  }
  EXPECT_EQ(lines, 4u);  // 2 epochs x 2 batches, no replays
  EXPECT_EQ(res.metrics["total_optimizer_steps"], 4);
  EXPECT_EQ(res.metrics["strategy"], "none");
}

TEST_F(Cli, TrainIsByteReproducible) {
  const std::string cfg = "epochs = 2\nbatch_size = 4\nuse_doam = true\nstrategy = hard\n";
  const auto a = cli::cmd_train(train_options("rep_a", cfg));
  const auto b = cli::cmd_train(train_options("rep_b", cfg));
  EXPECT_EQ(file_bytes(a.final_checkpoint), file_bytes(b.final_checkpoint));
  EXPECT_EQ(file_bytes(root() / "rep_a" / "epoch_001.ckpt"),
            file_bytes(root() / "rep_b" / "epoch_001.ckpt"));
  EXPECT_EQ(file_bytes(root() / "rep_a" / "train_log.jsonl"),
            file_bytes(root() / "rep_b" / "train_log.jsonl"));
  auto other = train_options("rep_c", cfg);
  other.seed = 12;
  EXPECT_NE(file_bytes(cli::cmd_train(other).final_checkpoint), file_bytes(a.final_checkpoint));
}

TEST_F(Cli, HardPoolReplaysAndFlagOverridesConfig) {
  auto o = train_options("hard", "epochs = 2\nbatch_size = 2\nthreshold = -inf\npool_capacity = 3\n");
  o.strategy = "hard";
  const auto res = cli::cmd_train(o);
  for (const auto& e : res.epochs) EXPECT_EQ(e.replay_count(), 3u);
  EXPECT_EQ(res.metrics["total_optimizer_steps"], 2 * (4 + 3));
  o.strategy = "none";
  o.out = root() / "none";
  for (const auto& e : cli::cmd_train(o).epochs) EXPECT_EQ(e.replay_count(), 0u);
}

std::vector<eval::Detection> ground_truth_detections(const data::Dataset& ds) {
  std::vector<eval::Detection> out;
  for (const auto& r : ds.records) {
    for (const auto& a : r.annotations) out.push_back({r.image_id, a.category, a.box, 1.0});
  }
  return out;
}

TEST_F(Cli, EvaluateDetectionsFile) {
  const data::Dataset ds = data::load_dataset(data_root(), "test");
  const fs::path perfect = root() / "perfect.jsonl";
  {
    std::ofstream out(perfect);
    eval::write_detections(out, ground_truth_detections(ds));
  }
  std::ofstream(root() / "empty.jsonl");
  cli::CommandOptions o;
  o.data_root = data_root();
  o.detections = perfect;
  o.out = root() / "eval_perfect";
  const eval::EvalReport rep = cli::cmd_evaluate(o);
  EXPECT_EQ(rep.overall.mean_ap, 1.0);
  for (const auto& [level, g] : rep.by_level) {
    EXPECT_TRUE(level == "OL1" || level == "OL2" || level == "OL3") << level;
    EXPECT_EQ(g.mean_ap, 1.0) << level;
  }
  EXPECT_TRUE(fs::exists(*o.out / "eval.json"));
  EXPECT_TRUE(fs::exists(*o.out / "detections.jsonl"));
  o.detections = root() / "empty.jsonl";
  o.out.reset();
  EXPECT_EQ(cli::cmd_evaluate(o).overall.mean_ap, 0.0);
}

TEST_F(Cli, EvaluateCheckpointAndRejectClassMismatch) {
  const auto trained = cli::cmd_train(train_options("for_eval", "epochs = 1\nbatch_size = 4\n"));
  cli::CommandOptions o;
  o.data_root = data_root();
  o.checkpoint = trained.final_checkpoint;
  const auto a = cli::cmd_evaluate(o).to_json();
  const auto b = cli::cmd_evaluate(o).to_json();
  EXPECT_EQ(a, b);
  EXPECT_GE(a["mAP"].get<double>(), 0.0);
  EXPECT_LE(a["mAP"].get<double>(), 1.0);

  detector::DetectorConfig c;
  c.num_classes = 2;
  detector::save_checkpoint(root() / "two.ckpt", detector::Detector(c, 1));
  o.checkpoint = root() / "two.ckpt";
  EXPECT_THROW(cli::cmd_evaluate(o), std::invalid_argument);
}

TEST_F(Cli, VisualisationWritesSourceSizedPngs) {
  const auto trained =
      cli::cmd_train(train_options("for_viz", "epochs = 1\nbatch_size = 4\nuse_doam = true\n"));
  cli::CommandOptions o;
  o.data_root = data_root();
  o.checkpoint = trained.final_checkpoint;
  o.config = write_config(root() / "viz.cfg", "viz_limit = 2\n");
  o.out = root() / "viz_att";
  const auto att = cli::cmd_viz_attention(o);
  EXPECT_EQ(att.size(), 6u);
  o.out = root() / "viz_cam";
  const auto cam = cli::cmd_viz_gradcam(o);
  EXPECT_EQ(cam.size(), 4u);
  const data::Dataset ds = data::load_dataset(data_root(), "test");
  const Image8 src = read_image(ds.records[0].image_path);
  for (const auto& p : {att[1], att[2], cam[1]}) {
    const Image8 img = read_image(p);
    EXPECT_EQ(img.width, src.width) << p;
    EXPECT_EQ(img.height, src.height) << p;
  }
  const auto plain = cli::cmd_train(train_options("plain_viz", "epochs = 1\nbatch_size = 4\n"));
  o.checkpoint = plain.final_checkpoint;
  o.out = root() / "viz_plain";
  EXPECT_THROW(cli::cmd_viz_attention(o), std::invalid_argument);
}

TEST_F(Cli, ConfigErrors) {
  auto o = train_options("bad_key", "epochs = 1\nlearnig_rate = 0.1\n");
  EXPECT_THROW(cli::cmd_train(o), std::invalid_argument);
  o = train_options("no_seed", "epochs = 1\n");
  o.seed.reset();
  EXPECT_THROW(cli::cmd_train(o), std::invalid_argument);
  o = train_options("bad_value", "epochs = 1\nlearning_rate = -0.1\n");
  EXPECT_THROW(cli::cmd_train(o), std::invalid_argument);
}

TEST(Complexity, DoamShareFromConfig) {
  testing::TempDir dir("cx");
  cli::CommandOptions o;
  o.config = write_config(dir.path() / "m.cfg", "use_doam = true\n");
  const auto j = cli::cmd_complexity(o);
  const auto doam = j["doam_params"].get<std::size_t>();
  EXPECT_GT(doam, 0u);
  EXPECT_EQ(doam + j["detector_params_without_doam"].get<std::size_t>(), j["params"].get<std::size_t>());
  EXPECT_GT(j["doam_to_backbone_ratio"].get<double>(), 0.0);
  o.config = write_config(dir.path() / "p.cfg", "use_doam = false\n");
  EXPECT_EQ(cli::cmd_complexity(o)["doam_params"], 0);
}

struct Exec {
  int status;
  std::string output;
};

Exec run_cli(const std::string& args) {
  const std::string cmd = std::string(DOAMO_CLI_PATH) + " " + args + " 2>&1";
  std::unique_ptr<FILE, int (*)(FILE*)> pipe(popen(cmd.c_str(), "r"), pclose);
  std::string out;
  char buf[256];
  while (std::fgets(buf, sizeof buf, pipe.get())) out += buf;
  const int raw = pclose(pipe.release());
  return {WIFEXITED(raw) ? WEXITSTATUS(raw) : -1, out};
}

TEST(Executable, ErrorsAreOneLine) {
  const Exec usage = run_cli("train --no-such-flag");
  EXPECT_EQ(usage.status, 2);
  EXPECT_EQ(usage.output.rfind("error: usage: ", 0), 0u) << usage.output;
  EXPECT_EQ(std::count(usage.output.begin(), usage.output.end(), '\n'), 1);

  const Exec missing = run_cli("train --data-root /nonexistent --out /tmp/x");
  EXPECT_EQ(missing.status, 1);
  EXPECT_EQ(missing.output, "error: train: missing required flag --seed\n");

  const Exec ok = run_cli("complexity");
  EXPECT_EQ(ok.status, 0);
  EXPECT_NO_THROW(nlohmann::json::parse(ok.output));
}

}  // namespace
}  // namespace doamo

// doamo: command-line entry point. Every command prints one JSON summary
// line on success; failures print one "error: <command>: <message>" line to
// stderr and exit 1 (2 for bad usage).

#include <malloc.h>

#include <algorithm>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "doamo/commands.hpp"

namespace {

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

void add_common(CLI::App* cmd, doamo::cli::CommandOptions& o) {
  cmd->add_option("--config", o.config, "flat key = value config file");
  cmd->add_option("--seed", o.seed, "random seed");
  cmd->add_option("--data-root", o.data_root, "dataset root with train/ and test/");
  cmd->add_option("--checkpoint", o.checkpoint, "model checkpoint");
  cmd->add_option("--out", o.out, "output directory");
}

}  // namespace

int main(int argc, char** argv) {
  // Keep freed tensor buffers in the heap instead of returning them to the
  // kernel; otherwise every large allocation page-faults afresh.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  namespace cli = doamo::cli;
  CLI::App app{"DOAM-O detector training, evaluation and visualisation"};
  app.require_subcommand(1);
  cli::CommandOptions o;

  auto* gen = app.add_subcommand("generate-data", "write a synthetic occluded-object dataset");
  auto* train = app.add_subcommand("train", "train a detector");
  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint or a detections file");
  auto* viz_att = app.add_subcommand("viz-attention", "write edge and attention overlays");
  auto* viz_cam = app.add_subcommand("viz-gradcam", "write Grad-CAM overlays");
  auto* validate = app.add_subcommand("validate-dataset", "check split counts");
  auto* complexity = app.add_subcommand("complexity", "parameter, size and FLOP report");
  for (auto* c : {gen, train, evaluate, viz_att, viz_cam, validate, complexity}) add_common(c, o);
  train->add_option("--strategy", o.strategy, "hard|easy|random|focal|none")
      ->check(CLI::IsMember({"hard", "easy", "random", "focal", "none"}));
  evaluate->add_option("--detections", o.detections, "JSON-lines detections to score");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    nlohmann::json summary;
    if (*gen) {
      summary = cli::cmd_generate_data(o);
    } else if (*train) {
      const auto res = cli::cmd_train(o);
      summary = res.metrics;
      summary["checkpoint"] = res.final_checkpoint.string();
    } else if (*evaluate) {
      summary = cli::cmd_evaluate(o).to_json();
    } else if (*viz_att || *viz_cam) {
      const auto files = *viz_att ? cli::cmd_viz_attention(o) : cli::cmd_viz_gradcam(o);
      summary["written"] = files.size();
    } else if (*validate) {
      summary = cli::cmd_validate_dataset(o);
      std::cout << summary.dump() << "\n";
      return summary["ok"].get<bool>() ? 0 : 1;
    } else if (*complexity) {
      summary = cli::cmd_complexity(o);
    }
    std::cout << summary.dump() << "\n";
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << name << ": " << one_line(e.what()) << "\n";
    return 1;
  }
}

#include <iostream>

#include "CLI11.hpp"

#include "admkd/commands.hpp"

int main(int argc, char** argv) {
  using namespace admkd;
  CLI::App app{"Online knowledge distillation with asymmetric decision-making"};
  app.require_subcommand(1);

  std::string config;
  TrainOptions train_opts;
  auto* train = app.add_subcommand("train", "Run the experiment described by a JSON config");
  train->add_option("config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_flag("--resume", train_opts.resume, "Continue from the newest checkpoint in the output directory");

  std::string checkpoint, data;
  DataOptions data_opts;
  std::string labels;
  auto* eval = app.add_subcommand("eval", "Top-1 accuracy and mean cross-entropy of one checkpoint");
  eval->add_option("checkpoint", checkpoint, "Model manifest (.json)")->required();
  eval->add_option("data", data, "Run config (.json), CSV dataset or IDX image file")->required();
  eval->add_option("--split", data_opts.split, "Split to use with a run config")
      ->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--labels", labels, "IDX label file");

  std::string ckpt_dir, out_dir, reference;
  AnalyzeOptions analyze_opts;
  auto* analyze = app.add_subcommand("analyze", "CAM and similarity-region curves over saved checkpoints");
  analyze->add_option("checkpoints", ckpt_dir, "Run output directory or its checkpoints/ directory")->required();
  analyze->add_option("data", data, "Run config (.json), CSV dataset or IDX image file")->required();
  analyze->add_option("out", out_dir, "Directory for curves, tables and masks")->required();
  analyze->add_option("--split", analyze_opts.data.split, "Split to use with a run config")
      ->check(CLI::IsMember({"train", "test"}));
  analyze->add_option("--labels", labels, "IDX label file");
  analyze->add_option("--reference", reference, "Reference manifest (default: best teacher checkpoint)");
  analyze->add_option("--threshold", analyze_opts.cam_threshold, "CAM fraction-of-max threshold")
      ->check(CLI::Range(0.0, 1.0));
  analyze->add_option("--dump", analyze_opts.dump_samples, "Samples to dump as PGM masks");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every op and loss");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  if (*train) return cmd_train(config, train_opts, std::cout, std::cerr);
  if (!labels.empty()) data_opts.labels = analyze_opts.data.labels = labels;
  if (*eval) return cmd_eval(checkpoint, data, data_opts, std::cout, std::cerr);
  if (*analyze) {
    if (!reference.empty()) analyze_opts.reference = reference;
    return cmd_analyze(ckpt_dir, data, out_dir, analyze_opts, std::cout, std::cerr);
  }
  if (*gradcheck) return cmd_gradcheck(std::cout, std::cerr);
  return kExitConfig;
}

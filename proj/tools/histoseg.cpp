// histoseg command-line front end:
//   histoseg normalize|patchify|train|predict|evaluate --config <path> [options]

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "histoseg/pipeline.hpp"

namespace {

using namespace histoseg;

void print_error(std::string_view kind, std::string_view message) {
  std::cerr << "histoseg: error kind=" << kind << " message=\"" << message << "\"\n";
}

struct CommonOptions {
  std::string config;
  std::string manifest;
  std::string checkpoint;
  std::size_t jobs = 1;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool needs_manifest, bool needs_checkpoint) {
  cmd->add_option("--config", o.config, "Pipeline configuration file")->required()->check(CLI::ExistingFile);
  auto* m = cmd->add_option("--manifest", o.manifest, "Dataset manifest CSV (image_path,mask_path,split)");
  if (needs_manifest) m->required();
  auto* c = cmd->add_option("--checkpoint", o.checkpoint, "Model checkpoint path (default <output_dir>/model.ckpt)");
  if (needs_checkpoint) c->check(CLI::ExistingFile);
  cmd->add_option("--jobs", o.jobs, "Worker threads for per-image stages")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", o.seed, "Override both model and training seeds");
}

RunContext make_context(const CommonOptions& o, const Logger& log) {
  RunContext ctx = load_context(o.config);
  if (o.seed) {
    ctx.config.model_seed = *o.seed;
    ctx.config.train.seed = *o.seed;
  }
  ctx.jobs = o.jobs;
  ctx.log = &log;
  return ctx;
}

fs::path checkpoint_path(const RunContext& ctx, const CommonOptions& o) {
  return o.checkpoint.empty() ? ctx.layout().checkpoint() : fs::path(o.checkpoint);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Local+global view nuclei segmentation pipeline"};
  app.require_subcommand(1);

  CommonOptions opts;
  std::string image_path;
  bool gt_as_prediction = false;

  auto* normalize = app.add_subcommand("normalize", "Fit the target stain profile and normalize every manifest image");
  add_common(normalize, opts, true, false);
  auto* patchify = app.add_subcommand("patchify", "Write local/global patch archives for normalized images");
  add_common(patchify, opts, true, false);
  auto* train_cmd = app.add_subcommand("train", "Train on the train split; writes a checkpoint and history.csv");
  add_common(train_cmd, opts, true, false);
  auto* predict = app.add_subcommand("predict", "Segment one image into probability and mask PNGs");
  add_common(predict, opts, false, true);
  predict->add_option("--image", image_path, "Input RGB PNG")->required()->check(CLI::ExistingFile);
  auto* evaluate = app.add_subcommand("evaluate", "Dice evaluation on the test split");
  add_common(evaluate, opts, true, true);
  evaluate->add_flag("--gt-as-prediction", gt_as_prediction,
                     "Diagnostic: use each ground-truth mask as its own prediction");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code != 0) print_error("usage", e.what());
    return code;
  }

  const Logger log = Logger::from_env();
  try {
    RunContext ctx = make_context(opts, log);
    if (*normalize) {
      const std::size_t failed = cmd_normalize(ctx, load_manifest(opts.manifest));
      if (failed > 0) {
        print_error("normalize", std::to_string(failed) + " image(s) failed");
        return 1;
      }
    } else if (*patchify) {
      cmd_patchify(ctx, load_manifest(opts.manifest));
    } else if (*train_cmd) {
      cmd_train(ctx, load_manifest(opts.manifest), checkpoint_path(ctx, opts));
    } else if (*predict) {
      cmd_predict(ctx, checkpoint_path(ctx, opts), image_path);
    } else if (*evaluate) {
      cmd_evaluate(ctx, checkpoint_path(ctx, opts), load_manifest(opts.manifest), gt_as_prediction);
    }
  } catch (const Error& e) {
    print_error(to_string(e.kind()), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("internal", e.what());
    return 1;
  }
  return 0;
}

#include <cstdio>

#include "CLI11.hpp"
#include "commands.hpp"
#include "cracknet/tensor.hpp"

using namespace cracknet;
using namespace cracknet::cli;

int main(int argc, char** argv) {
  CLI::App app{"cracknet: crack segmentation with CNN and transformer U-shaped networks"};
  app.set_version_flag("--version", std::string(kToolVersion));
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* p = app.add_subcommand("prepare", "tile a photo set or synthesize a dataset");
  p->add_option("--images", prep.images, "source image directory (tiling mode)");
  p->add_option("--masks", prep.masks, "source mask directory (tiling mode)");
  p->add_option("--tile", prep.tile, "tile size")->capture_default_str();
  p->add_option("--stride", prep.stride, "tile stride")->capture_default_str();
  p->add_option("--synthesize", prep.synthesize, "number of synthetic samples");
  p->add_option("--size", prep.size, "synthetic image size")->capture_default_str();
  p->add_option("--seed", prep.seed, "synthetic seed")->capture_default_str();
  p->add_option("--noise", prep.noise, "none | shadow | blotch")->capture_default_str();
  p->add_option("--out", prep.out, "output dataset directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train one model on one fold");
  t->add_option("--config", tr.config, "key = value config file")->required();
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--fold", tr.fold, "1 or 2")->capture_default_str();
  t->add_option("--out", tr.out, "run directory")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "score a checkpoint");
  e->add_option("--checkpoint", ev.checkpoint, "model.ckpt from a run")->required();
  e->add_option("--config", ev.config, "config (default: config.txt next to the checkpoint)");
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--split", ev.split, "train | val (from the run's split.csv) | test | all")->capture_default_str();
  e->add_option("--bins", ev.bins, "IoU histogram bins")->capture_default_str();
  e->add_option("--out", ev.out, "output directory")->required();

  CompareArgs cmp;
  auto* c = app.add_subcommand("compare-losses", "train one arch under several losses");
  c->add_option("--data", cmp.data, "dataset directory")->required();
  c->add_option("--arch", cmp.arch, "architecture (toy preset)")->capture_default_str();
  c->add_option("--config", cmp.config, "base config instead of the toy preset");
  c->add_option("--losses", cmp.losses, "comma-separated loss names")->delimiter(',')->default_str(
      "bce,dice,combine1,combine2,lovasz");
  c->add_option("--epochs", cmp.epochs, "epochs per run")->capture_default_str();
  c->add_option("--fold", cmp.fold, "1 or 2")->capture_default_str();
  c->add_option("--out", cmp.out, "output directory")->required();

  PredictArgs pr;
  auto* d = app.add_subcommand("predict", "write 0/255 masks for a directory of images");
  d->add_option("--checkpoint", pr.checkpoint, "model.ckpt from a run")->required();
  d->add_option("--config", pr.config, "config (default: config.txt next to the checkpoint)");
  d->add_option("--images", pr.images, "input image directory")->required();
  d->add_option("--out", pr.out, "output mask directory")->required();

  ReportArgs rep;
  auto* r = app.add_subcommand("report", "comparison tables over finished runs");
  r->add_option("--runs", rep.runs, "run directories")->required()->expected(1, -1);
  r->add_option("--window", rep.window, "rolling window (epochs)")->capture_default_str();
  r->add_option("--tail", rep.tail, "tail-average length (epochs)")->capture_default_str();
  r->add_option("--out", rep.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (cmp.losses.empty()) cmp.losses = {"bce", "dice", "combine1", "combine2", "lovasz"};
    if (*p) return cmd_prepare(prep);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*c) return cmd_compare_losses(cmp);
    if (*d) return cmd_predict(pr);
    if (*r) return cmd_report(rep);
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric error: %s\n", err.what());
    return kNumeric;
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kUsage;
  } catch (const ContractError& err) {
    std::fprintf(stderr, "usage error: %s\n", err.what());
    return kUsage;
  } catch (const Error& err) {
    std::fprintf(stderr, "data error: %s\n", err.what());
    return kData;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kData;
  }
  return kUsage;
}

#include "commands.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <set>

#include "cracknet/config.hpp"
#include "cracknet/data.hpp"
#include "cracknet/io.hpp"
#include "cracknet/metrics.hpp"
#include "cracknet/models.hpp"
#include "cracknet/train.hpp"

namespace cracknet::cli {

namespace fs = std::filesystem;
using data::SegmentationSample;

bool deterministic_mode() {
  const char* v = std::getenv("CRACKNET_THREADS");
  return v && std::string(v) == "1";
}

namespace {

std::string path_in(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

// FNV-1a over relative paths and contents, files in sorted order.
struct Digest {
  std::uint64_t hash = 1469598103934665603ull;
  std::size_t files = 0;

  void feed(const std::string& bytes) {
    for (unsigned char c : bytes) {
      hash ^= c;
      hash *= 1099511628211ull;
    }
  }
  std::string hex() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
    return buf;
  }
};

Digest dataset_digest(const std::string& dir) {
  std::vector<std::string> rel;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), dir).generic_string());
  std::sort(rel.begin(), rel.end());
  Digest d;
  for (const auto& r : rel) {
    d.feed(r);
    d.feed(io::read_file(path_in(dir, r)));
    ++d.files;
  }
  return d;
}

// data/images + data/masks, restricted to manifest ids when a manifest exists.
std::vector<SegmentationSample> load_data_dir(const std::string& dir) {
  auto all = data::load_dataset(path_in(dir, "images"), path_in(dir, "masks"));
  const auto manifest = path_in(dir, "manifest.csv");
  if (!fs::exists(manifest)) return all;
  std::set<std::string> wanted;
  for (const auto& r : data::read_manifest(manifest)) wanted.insert(r.id);
  std::vector<SegmentationSample> out;
  for (auto& s : all)
    if (wanted.erase(s.id)) out.push_back(std::move(s));
  if (!wanted.empty()) throw DataError("manifest lists '" + *wanted.begin() + "' but no image/mask pair exists");
  return out;
}

std::vector<std::string> ids_of(const std::vector<SegmentationSample>& ds) {
  std::vector<std::string> ids;
  for (const auto& s : ds) ids.push_back(s.id);
  return ids;
}

std::vector<const SegmentationSample*> pick(const std::vector<SegmentationSample>& ds,
                                            const std::vector<std::string>& ids) {
  std::map<std::string, const SegmentationSample*> by_id;
  for (const auto& s : ds) by_id[s.id] = &s;
  std::vector<const SegmentationSample*> out;
  for (const auto& id : ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("sample '" + id + "' is not in the dataset");
    out.push_back(it->second);
  }
  return out;
}

std::vector<data::ManifestRow> split_rows(const data::FoldSplit& split) {
  std::vector<data::ManifestRow> rows;
  for (const auto& id : split.train) rows.push_back({id, "train", split.fold});
  for (const auto& id : split.val) rows.push_back({id, "val", split.fold});
  return rows;
}

// Config next to a checkpoint unless given explicitly.
RunConfig config_for(const std::string& checkpoint, const std::string& explicit_config) {
  const std::string path =
      explicit_config.empty() ? path_in(fs::path(checkpoint).parent_path().string(), "config.txt") : explicit_config;
  if (!fs::exists(path)) throw ConfigError("no config for checkpoint (looked for " + path + ")");
  return load_run_config(path);
}

void progress(const std::string& tag, const train::EpochRecord& e) {
  std::fprintf(stderr, "%s epoch %lld loss %.6f", tag.c_str(), static_cast<long long>(e.epoch), e.train_loss);
  if (e.evaluated) std::fprintf(stderr, " val_iou %.6f", e.val.iou);
  std::fprintf(stderr, "\n");
}

}  // namespace

// ---------------------------------------------------------------- prepare

int cmd_prepare(const PrepareArgs& a) {
  const bool tiling = !a.images.empty() || !a.masks.empty();
  const bool synth = a.synthesize >= 0;
  if (tiling == synth) throw ConfigError("prepare needs exactly one source: --images/--masks or --synthesize");
  if (tiling && (a.images.empty() || a.masks.empty())) throw ConfigError("tiling needs both --images and --masks");

  std::vector<SegmentationSample> out;
  if (synth) {
    out = data::synth_cracks(a.synthesize, a.size, a.seed, data::parse_noise(a.noise));
  } else {
    for (const auto& s : data::load_dataset(a.images, a.masks))
      for (auto& t : data::tile_crop(s, a.tile, a.stride)) out.push_back(std::move(t));
  }
  make_dir(path_in(a.out, "images"));
  make_dir(path_in(a.out, "masks"));
  std::vector<data::ManifestRow> rows;
  for (const auto& s : out) {
    data::save_sample(s, path_in(a.out, "images"), path_in(a.out, "masks"));
    rows.push_back({s.id, "all", 0});
  }
  data::write_manifest(path_in(a.out, "manifest.csv"), rows);
  std::printf("wrote %zu samples to %s\n", out.size(), a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------- train

int cmd_train(const TrainArgs& a) {
  const RunConfig rc = load_run_config(a.config);
  const auto ds = load_data_dir(a.data);
  if (ds.empty()) throw DataError("dataset " + a.data + " is empty");
  const auto split = data::split_folds(ids_of(ds), rc.split_ratio, a.fold, rc.train.seed);
  const bool det = deterministic_mode();

  make_dir(a.out);
  const Digest digest = dataset_digest(a.data);
  std::string manifest;
  manifest += "tool_version = " + std::string(kToolVersion) + "\n";
  manifest += "data = " + a.data + "\n";
  manifest += "dataset_files = " + std::to_string(digest.files) + "\n";
  manifest += "dataset_fnv1a64 = " + digest.hex() + "\n";
  manifest += "fold = " + std::to_string(a.fold) + "\n";
  manifest += "seed = " + std::to_string(rc.train.seed) + "\n";
  manifest += "deterministic = " + std::string(det ? "1" : "0") + "\n";
  manifest += "train_count = " + std::to_string(split.train.size()) + "\n";
  manifest += "val_count = " + std::to_string(split.val.size()) + "\n";
  manifest += "artifacts = config.txt split.csv runlog.csv timing.csv model.ckpt summary.csv\n";
  manifest += "[config]\n" + rc.to_text();
  io::write_file_atomic(path_in(a.out, "config.txt"), rc.to_text());
  data::write_manifest(path_in(a.out, "split.csv"), split_rows(split));
  io::write_file_atomic(path_in(a.out, "manifest.txt"), manifest);

  Model<float> model(rc.model, rc.train.seed);
  train::TrainHooks hooks;
  hooks.on_epoch = [](const train::EpochRecord& e) {
    progress("train", e);
    return true;
  };
  const auto log = train::train(model, ds, split, rc.train, hooks);
  save_checkpoint(model, path_in(a.out, "model.ckpt"));
  io::write_file_atomic(path_in(a.out, "runlog.csv"), log.to_csv(!det));
  std::string timing = "epoch,seconds\n";
  for (const auto& e : log.epochs) timing += io::csv_row({std::to_string(e.epoch), io::fixed6(e.seconds)});
  io::write_file_atomic(path_in(a.out, "timing.csv"), timing);

  const auto& probe_ids = split.val.empty() ? split.train : split.val;
  const double speed = train::measure_throughput(model, pick(ds, probe_ids), rc.train.batch_size);
  io::write_file_atomic(path_in(a.out, "summary.csv"),
                        "model,params,size_mb,img_per_sec\n" +
                            io::csv_row({arch_name(rc.model.arch), std::to_string(model.param_count()),
                                         io::fixed6(model_size_mb(model)), io::fixed6(speed)}));
  std::printf("trained %s for %zu epochs -> %s\n", arch_name(rc.model.arch).c_str(), log.epochs.size(), a.out.c_str());
  return kOk;
}

// ---------------------------------------------------------------- eval

int cmd_eval(const EvalArgs& a) {
  const RunConfig rc = config_for(a.checkpoint, a.config);
  auto model = load_checkpoint<float>(a.checkpoint, rc.model);
  const auto ds = load_data_dir(a.data);

  std::vector<std::string> ids;
  int fold = 0;
  if (a.split == "test" || a.split == "all") {
    ids = ids_of(ds);
  } else if (a.split == "train" || a.split == "val") {
    const auto split_path = path_in(fs::path(a.checkpoint).parent_path().string(), "split.csv");
    for (const auto& r : data::read_manifest(split_path)) {
      if (r.split == a.split) {
        ids.push_back(r.id);
        fold = r.fold;
      }
    }
  } else {
    throw ConfigError("--split must be one of train, val, test, all");
  }
  if (ids.empty()) throw DataError("no samples for split '" + a.split + "'");

  const auto res = train::evaluate(model, pick(ds, ids), rc.train.threshold, rc.train.batch_size);
  make_dir(a.out);
  const std::string name = arch_name(rc.model.arch);
  io::write_file_atomic(path_in(a.out, "metrics.csv"), std::string(metrics::kMetricCsvHeader) + "\n" +
                                                           metrics::metric_csv_row(name, a.split + "/micro", fold, res.micro) +
                                                           metrics::metric_csv_row(name, a.split + "/macro", fold, res.macro));

  std::string per = "id,iou,f1,tp,fp,fn,tn\n";
  for (std::size_t i = 0; i < res.ids.size(); ++i) {
    const auto& c = res.per_image[i];
    per += io::csv_row({res.ids[i], io::fixed6(res.per_image_iou[i]), io::fixed6(metrics::f1(c)), std::to_string(c.tp),
                        std::to_string(c.fp), std::to_string(c.fn), std::to_string(c.tn)});
  }
  io::write_file_atomic(path_in(a.out, "per_image.csv"), per);

  const auto hist = metrics::histogram(res.per_image_iou, a.bins, 0.0, 1.0);
  std::string hs = "bin_lo,bin_hi,count\n";
  for (std::size_t i = 0; i < hist.counts.size(); ++i)
    hs += io::csv_row({io::fixed6(hist.edges[i]), io::fixed6(hist.edges[i + 1]), std::to_string(hist.counts[i])});
  io::write_file_atomic(path_in(a.out, "histogram.csv"), hs);

  std::string gs = "amplitude,mu,sigma,fwhm,residual_norm,iterations,converged\n";
  const auto centers = hist.centers();
  std::vector<double> counts(hist.counts.begin(), hist.counts.end());
  try {
    const auto g = metrics::gaussian_fit(centers, counts);
    gs += io::csv_row({io::fixed6(g.amplitude), io::fixed6(g.mu), io::fixed6(g.sigma), io::fixed6(g.fwhm),
                       io::fixed6(g.residual_norm), std::to_string(g.iterations), g.converged ? "1" : "0"});
  } catch (const ContractError&) {
    gs += "nan,nan,nan,nan,nan,0,0\n";  // fewer than 4 occupied bins
  }
  io::write_file_atomic(path_in(a.out, "gauss_fit.csv"), gs);
  std::printf("%s %s: micro iou %.6f f1 %.6f | macro iou %.6f over %zu images\n", name.c_str(), a.split.c_str(),
              res.micro.iou, res.micro.f1, res.macro.iou, res.ids.size());
  return kOk;
}

// ---------------------------------------------------------------- compare-losses

int cmd_compare_losses(const CompareArgs& a) {
  if (a.losses.size() < 2) throw ConfigError("compare-losses needs at least two loss names");
  std::vector<losses::LossKind> kinds;
  for (const auto& n : a.losses) kinds.push_back(losses::parse_loss(n));

  RunConfig base;
  if (!a.config.empty()) {
    base = load_run_config(a.config);
  } else {
    base.model = ModelConfig::preset(parse_arch(a.arch), Scale::Toy);
  }
  base.train.epochs = a.epochs;
  base.validate();

  const auto ds = load_data_dir(a.data);
  if (ds.empty()) throw DataError("dataset " + a.data + " is empty");
  const auto split = data::split_folds(ids_of(ds), base.split_ratio, a.fold, base.train.seed);
  make_dir(a.out);
  data::write_manifest(path_in(a.out, "split.csv"), split_rows(split));
  io::write_file_atomic(path_in(a.out, "config.txt"), base.to_text());

  std::string csv = "loss_name,epoch,train_loss,val_iou,val_f1\n";
  for (auto kind : kinds) {
    RunConfig rc = base;
    rc.train.loss = losses::LossSpec::of(kind);
    Model<float> model(rc.model, rc.train.seed);
    const std::string tag = losses::loss_name(kind);
    train::TrainHooks hooks;
    hooks.on_epoch = [&](const train::EpochRecord& e) {
      progress(tag, e);
      return true;
    };
    const auto log = train::train(model, ds, split, rc.train, hooks);
    for (const auto& e : log.epochs) {
      csv += io::csv_row({tag, std::to_string(e.epoch), io::fixed6(e.train_loss),
                          e.evaluated ? io::fixed6(e.val.iou) : "", e.evaluated ? io::fixed6(e.val.f1) : ""});
    }
  }
  io::write_file_atomic(path_in(a.out, "compare_losses.csv"), csv);
  std::printf("compared %zu losses -> %s\n", kinds.size(), path_in(a.out, "compare_losses.csv").c_str());
  return kOk;
}

// ---------------------------------------------------------------- predict

int cmd_predict(const PredictArgs& a) {
  const RunConfig rc = config_for(a.checkpoint, a.config);
  auto model = load_checkpoint<float>(a.checkpoint, rc.model);
  std::vector<std::string> failures;
  const auto images = data::load_images(a.images, &failures);
  make_dir(a.out);
  const int th = rc.model.height, tw = rc.model.width;
  NoGradGuard guard;
  std::size_t written = 0;
  for (const auto& img : images) {
    if (img.height < th || img.width < tw) {
      failures.push_back(img.id + ": image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " is smaller than the model input " + std::to_string(th) + "x" + std::to_string(tw));
      continue;
    }
    // model-sized tiles, far-edge anchored; later tiles overwrite overlaps
    data::RawImage out{img.width, img.height, 1, std::vector<std::uint8_t>(img.mask.size(), 0)};
    for (int y0 : data::tile_offsets(img.height, th, th)) {
      for (int x0 : data::tile_offsets(img.width, tw, tw)) {
        SegmentationSample tile;
        tile.id = img.id;
        tile.height = th;
        tile.width = tw;
        for (int y = 0; y < th; ++y) {
          const auto row = img.image.begin() + (static_cast<std::ptrdiff_t>(y0 + y) * img.width + x0) * 3;
          tile.image.insert(tile.image.end(), row, row + static_cast<std::ptrdiff_t>(tw) * 3);
        }
        const auto mask = predict_mask(model.forward(data::stack_images<float>({&tile})), rc.train.threshold);
        for (int y = 0; y < th; ++y)
          for (int x = 0; x < tw; ++x)
            out.pixels[static_cast<std::size_t>(y0 + y) * img.width + x0 + x] =
                mask[static_cast<std::size_t>(y) * tw + x] ? 255 : 0;
      }
    }
    data::write_png(path_in(a.out, img.id + ".png"), out);
    ++written;
  }
  for (const auto& f : failures) std::fprintf(stderr, "predict: %s\n", f.c_str());
  std::printf("predicted %zu masks -> %s\n", written, a.out.c_str());
  return failures.empty() ? kOk : kData;
}

// ---------------------------------------------------------------- report

int cmd_report(const ReportArgs& a) {
  std::string table =
      "model,run,epochs,tail_epochs,train_loss,iou,f1,precision,recall,accuracy,speed_img_s,size_mb,params\n";
  std::string rolling = "model,run,window,mean,std\n";
  std::string bubble = "model,run,speed_img_s,iou,size_mb\n";
  int valid = 0;
  for (const auto& dir : a.runs) {
    const std::string run = fs::path(dir).filename().string();
    try {
      for (const char* f : {"config.txt", "runlog.csv", "summary.csv"})
        if (!fs::exists(path_in(dir, f))) throw DataError(std::string("missing ") + f);
      const auto rc = load_run_config(path_in(dir, "config.txt"));
      const auto log = train::RunLog::from_csv(io::read_file(path_in(dir, "runlog.csv")));
      const auto summary = io::read_csv(path_in(dir, "summary.csv"));
      if (summary.rows.empty()) throw DataError("summary.csv has no row");
      std::vector<double> loss, iou_s, f1_s, prec_s, rec_s, acc_s;
      for (const auto& e : log.epochs) {
        loss.push_back(e.train_loss);
        if (!e.evaluated) continue;
        iou_s.push_back(e.val.iou);
        f1_s.push_back(e.val.f1);
        prec_s.push_back(e.val.precision);
        rec_s.push_back(e.val.recall);
        acc_s.push_back(e.val.accuracy);
      }
      if (iou_s.empty()) throw DataError("run has no evaluated epochs");
      const int n = std::min<int>(a.tail, static_cast<int>(iou_s.size()));
      const int nl = std::min<int>(a.tail, static_cast<int>(loss.size()));
      const auto& srow = summary.rows[0];
      const std::string model = arch_name(rc.model.arch);
      const std::string speed = srow[summary.column("img_per_sec")];
      const std::string size = srow[summary.column("size_mb")];
      const std::string iou = io::fixed6(metrics::tail_average(iou_s, n));
      table += io::csv_row({model, run, std::to_string(log.epochs.size()), std::to_string(n),
                            io::fixed6(metrics::tail_average(loss, nl)), iou,
                            io::fixed6(metrics::tail_average(f1_s, n)), io::fixed6(metrics::tail_average(prec_s, n)),
                            io::fixed6(metrics::tail_average(rec_s, n)), io::fixed6(metrics::tail_average(acc_s, n)),
                            speed, size, srow[summary.column("params")]});
      if (static_cast<int>(iou_s.size()) >= a.window) {
        const auto stats = metrics::rolling_stats(iou_s, a.window);
        for (std::size_t w = 0; w < stats.size(); ++w)
          rolling += io::csv_row({model, run, std::to_string(w + 1), io::fixed6(stats[w].mean), io::fixed6(stats[w].std)});
      }
      bubble += io::csv_row({model, run, speed, iou, size});
      ++valid;
    } catch (const Error& e) {
      std::fprintf(stderr, "report: skipping %s: %s\n", dir.c_str(), e.what());
    }
  }
  if (valid == 0) throw DataError("no complete run directories among the --runs given");
  make_dir(a.out);
  io::write_file_atomic(path_in(a.out, "table.csv"), table);
  io::write_file_atomic(path_in(a.out, "rolling.csv"), rolling);
  io::write_file_atomic(path_in(a.out, "bubble.csv"), bubble);
  std::printf("reported %d run(s) -> %s\n", valid, a.out.c_str());
  return kOk;
}

}  // namespace cracknet::cli

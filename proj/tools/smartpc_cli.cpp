// smartpc: command-line front end for data generation, pretraining,
// evaluation, test-time adaptation, benchmarking and gradient checks.
//
// Exit codes: 0 success, 1 user or file error, 2 internal error.

#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "smartpc/smartpc.hpp"

namespace fs = std::filesystem;
using namespace smartpc;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUser = 1;
constexpr int kExitInternal = 2;

// Internal failures that are not caused by arguments or input files.
struct InternalFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void banner(const std::string& command, std::uint64_t seed, const nlohmann::json& resolved) {
  std::cerr << "smartpc " << command << " seed=" << seed << "\n" << resolved.dump(2) << "\n";
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  for (auto& part : split(s, ','))
    if (!part.empty()) out.push_back(part);
  return out;
}

DatasetFormat parse_format(const std::string& s) {
  if (s == "manifest") return DatasetFormat::manifest;
  if (s == "packed") return DatasetFormat::packed;
  throw InvalidArgument("unknown dataset format '" + s + "' (manifest, packed)");
}

void write_predictions(const LabeledDataset& data, const std::vector<std::size_t>& preds,
                       const std::vector<char>& flagged, const fs::path& path) {
  std::vector<CsvRow> rows;
  for (std::size_t i = 0; i < data.size(); ++i)
    rows.push_back({data.id(i), std::to_string(data.labels[i]), std::to_string(preds[i]),
                    std::to_string(flagged.empty() ? 0 : flagged[i])});
  write_csv(path, {"id", "label", "prediction", "flagged"}, rows);
}

RunConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig cfg = path.empty() ? RunConfig{} : load_run_config(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

void require_classes(const ModelConfig& m, const LabeledDataset& d, const std::string& what) {
  if (m.classes != d.class_names.size())
    throw InvalidArgument(what + ": model has " + std::to_string(m.classes) + " classes, dataset has " +
                          std::to_string(d.class_names.size()) + " (set model.classes in the config)");
}

const char* kDatasetHelp =
    "Dataset paths: a directory holding manifest.json {class_names, entries: [{file, label}]}\n"
    "plus one whitespace-separated 'x y z' .xyz file per cloud ('#' starts a comment), or a\n"
    "packed SPCD file (magic, version, counts, class names, labels, little-endian float32 xyz).";

const char* kMetricsHelp =
    "Metrics CSV columns: corruption, severity, mode, views, samples, accuracy (4 decimals),\n"
    "samples_per_second, samples_per_second_std.";

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Skeleton-based test-time adaptation for point-cloud classifiers"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // gen-data
  std::size_t per_class = 100, points = 256;
  std::uint64_t gen_seed = 0;
  double split_frac = 1.0;
  std::string gen_out, gen_format = "manifest";
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic 8-class shape dataset");
  gen->add_option("--per-class", per_class, "Clouds per class (>= 2)")->capture_default_str();
  gen->add_option("--points", points, "Points per cloud (>= 32)")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Root seed; sample i uses seed XOR i")->capture_default_str();
  gen->add_option("--split", split_frac,
                  "Train fraction. 1 writes everything to --out; below 1 writes --out/train and --out/test")
      ->capture_default_str();
  gen->add_option("--format", gen_format, "manifest (directory) or packed (SPCD file)")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory, or file for --format packed")->required();
  gen->footer(kDatasetHelp);

  // corrupt
  std::string cor_in, cor_out, cor_kind, cor_format = "manifest";
  int cor_severity = 1;
  std::uint64_t cor_seed = 0;
  auto* cor = app.add_subcommand("corrupt", "Apply one corruption to every cloud of a dataset");
  cor->add_option("--in", cor_in, "Input dataset")->required();
  cor->add_option("--kind", cor_kind,
                  "uniform-noise, gaussian-noise, impulse-noise, background-noise, upsampling, density-decrease, "
                  "shear, rotation, occlusion, scale")
      ->required();
  cor->add_option("--severity", cor_severity, "1..5")->capture_default_str();
  cor->add_option("--seed", cor_seed, "Root seed; cloud i uses seed XOR i")->capture_default_str();
  cor->add_option("--format", cor_format, "manifest or packed")->capture_default_str();
  cor->add_option("--out", cor_out, "Output dataset")->required();
  cor->footer(kDatasetHelp);

  // pretrain
  std::string pre_data, pre_config, pre_out, pre_history, pre_test;
  std::optional<std::uint64_t> pre_seed;
  std::optional<std::size_t> pre_epochs;
  auto* pre = app.add_subcommand("pretrain", "Train the classifier jointly on skeletal and classification losses");
  pre->add_option("--data", pre_data, "Training dataset")->required();
  pre->add_option("--config", pre_config, "RunConfig JSON; omitted keys keep their defaults");
  pre->add_option("--seed", pre_seed, "Overrides the config seed");
  pre->add_option("--epochs", pre_epochs, "Overrides train.epochs");
  pre->add_option("--test", pre_test, "Optional test dataset scored after every epoch");
  pre->add_option("--out", pre_out, "Checkpoint path (SPCK)")->required();
  pre->add_option("--history", pre_history,
                  "Per-epoch CSV: epoch, loss_total, loss_skeletal, loss_cls, train_accuracy, test_accuracy");
  pre->footer(std::string(kDatasetHelp) +
              "\nRunConfig keys: model, loss, n_per_sphere, optimizer, train, adapt, seed. Unknown keys are errors.");

  // eval
  std::string ev_model, ev_data, ev_out, ev_preds, ev_corruption = "clean";
  int ev_severity = 0;
  auto* ev = app.add_subcommand("eval", "Source-only top-1 accuracy (eval-mode BatchNorm)");
  ev->add_option("--model", ev_model, "Checkpoint (SPCK)")->required();
  ev->add_option("--data", ev_data, "Test dataset")->required();
  ev->add_option("--out", ev_out, "Metrics CSV")->required();
  ev->add_option("--predictions", ev_preds, "Per-sample CSV: id, label, prediction, flagged");
  ev->add_option("--corruption", ev_corruption, "Label written to the corruption column")->capture_default_str();
  ev->add_option("--severity", ev_severity, "Label written to the severity column")->capture_default_str();
  ev->footer(std::string(kDatasetHelp) + "\n" + kMetricsHelp);

  // adapt
  std::string ad_model, ad_data, ad_out, ad_config, ad_mode, ad_aug, ad_bn, ad_preds, ad_corruption = "clean";
  std::optional<std::size_t> ad_views, ad_iterations, ad_batch;
  std::optional<double> ad_momentum, ad_lr;
  std::optional<std::uint64_t> ad_seed;
  int ad_severity = 0;
  auto* ad = app.add_subcommand("adapt", "Run one adaptation protocol over a test stream");
  ad->add_option("--model", ad_model, "Checkpoint (SPCK)")->required();
  ad->add_option("--data", ad_data, "Test stream, in dataset order")->required();
  ad->add_option("--config", ad_config, "RunConfig JSON (adapt, loss, n_per_sphere, seed are used)");
  ad->add_option("--mode", ad_mode, "online-bn, online-bp or standard (default online-bn)");
  ad->add_option("--views", ad_views, "Views per sample (default 48)");
  ad->add_option("--momentum", ad_momentum, "BatchNorm momentum during adaptation (default 0.1)");
  ad->add_option("--iterations", ad_iterations, "Optimizer steps per sample (default 1 online, 20 standard)");
  ad->add_option("--lr", ad_lr, "Adaptation learning rate (default 1e-4)");
  ad->add_option("--augmentation", ad_aug, "rotation, hflip, translation or none (default rotation)");
  ad->add_option("--batch-size", ad_batch, "Samples adapted together in standard mode (default 1)");
  ad->add_option("--seed", ad_seed, "Overrides the config seed");
  ad->add_option("--out", ad_out, "Metrics CSV")->required();
  ad->add_option("--predictions", ad_preds, "Per-sample CSV: id, label, prediction, flagged");
  ad->add_option("--bn-snapshot", ad_bn, "PRE.csv,POST.csv: BatchNorm running stats before and after the stream");
  ad->add_option("--corruption", ad_corruption, "Label written to the corruption column")->capture_default_str();
  ad->add_option("--severity", ad_severity, "Label written to the severity column")->capture_default_str();
  ad->footer(std::string(kDatasetHelp) + "\n" + kMetricsHelp +
             "\nBN snapshot CSV columns: layer, channel, running_mean, running_var.");

  // bench
  std::string be_model, be_data, be_out, be_config, be_modes = "online-bn,online-bp,standard", be_views = "48",
                                                    be_corruption = "clean";
  std::size_t be_reps = 3, be_warmup = 2, be_limit = 0;
  int be_severity = 0;
  std::optional<std::uint64_t> be_seed;
  auto* be = app.add_subcommand("bench", "Throughput and accuracy per (mode, views), single-threaded");
  be->add_option("--model", be_model, "Checkpoint (SPCK)")->required();
  be->add_option("--data", be_data, "Test stream")->required();
  be->add_option("--config", be_config, "RunConfig JSON (adapt, loss, n_per_sphere, seed are used)");
  be->add_option("--modes", be_modes, "Comma-separated modes")->capture_default_str();
  be->add_option("--views", be_views, "Comma-separated view counts")->capture_default_str();
  be->add_option("--reps", be_reps, "Timed repetitions (>= 1)")->capture_default_str();
  be->add_option("--warmup", be_warmup, "Untimed samples at the start of each repetition")->capture_default_str();
  be->add_option("--limit", be_limit, "Use only the first N samples (0 = all)")->capture_default_str();
  be->add_option("--seed", be_seed, "Overrides the config seed");
  be->add_option("--corruption", be_corruption, "Label written to the corruption column")->capture_default_str();
  be->add_option("--severity", be_severity, "Label written to the severity column")->capture_default_str();
  be->add_option("--out", be_out, "Metrics CSV")->required();
  be->footer(std::string(kDatasetHelp) + "\n" + kMetricsHelp);

  // skeleton
  std::string sk_model, sk_cloud, sk_out, sk_surface;
  std::size_t sk_nps = 8;
  auto* sk = app.add_subcommand("skeleton", "Predict the skeletal spheres of one cloud");
  sk->add_option("--model", sk_model, "Checkpoint (SPCK)")->required();
  sk->add_option("--cloud", sk_cloud, "Input .xyz cloud")->required();
  sk->add_option("--out", sk_out, "Skeleton CSV: cx, cy, cz, r")->required();
  sk->add_option("--surface", sk_surface, "Optional .xyz of points sampled on every sphere");
  sk->add_option("--n-per-sphere", sk_nps, "Surface samples per sphere")->capture_default_str();

  // gradcheck
  bool gc_tiny = false;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every op, loss and the network");
  gc->add_flag("--tiny", gc_tiny, "Check the tiny network (M=4, K=4, d=16) on every coordinate");
  gc->footer("Without --tiny the default network is checked on a seeded subset of 256 coordinates.");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitUser;
  }

  try {
    if (*gen) {
      banner("gen-data", gen_seed,
             {{"per_class", per_class}, {"points", points}, {"split", split_frac}, {"format", gen_format},
              {"out", gen_out}});
      const auto format = parse_format(gen_format);
      auto [train, test] = gen_dataset(per_class, points, gen_seed, split_frac);
      const bool packed = format == DatasetFormat::packed;
      if (split_frac >= 1.0) {
        save_dataset(train, gen_out, format);
      } else {
        const fs::path root(gen_out);
        fs::create_directories(root);
        save_dataset(train, root / (packed ? "train.spcd" : "train"), format);
        save_dataset(test, root / (packed ? "test.spcd" : "test"), format);
      }
      std::cerr << "wrote " << train.size() << " train / " << test.size() << " test clouds\n";
    } else if (*cor) {
      CorruptionSpec spec{parse_corruption_kind(cor_kind), cor_severity, cor_seed};
      spec.validate();
      banner("corrupt", cor_seed,
             {{"in", cor_in}, {"kind", cor_kind}, {"severity", cor_severity}, {"format", cor_format}, {"out", cor_out}});
      const auto format = parse_format(cor_format);
      save_dataset(corrupt_dataset(load_dataset(cor_in), spec), cor_out, format);
    } else if (*pre) {
      RunConfig cfg = resolve_config(pre_config, pre_seed);
      if (pre_epochs) cfg.train.epochs = *pre_epochs;
      cfg.validate();
      banner("pretrain", cfg.seed, cfg);
      const auto data = load_dataset(pre_data);
      std::optional<LabeledDataset> test;
      if (!pre_test.empty()) test = load_dataset(pre_test);
      require_classes(cfg.model, data, "pretrain");
      auto model = model_init<float>(cfg.model_config());
      const auto history = pretrain(model, data, cfg, test ? &*test : nullptr, [](const EpochRecord& r) {
        std::cerr << "epoch " << r.epoch << " loss " << format_fixed(r.loss_total, 5) << " (skel "
                  << format_fixed(r.loss_skeletal, 5) << ", cls " << format_fixed(r.loss_cls, 5) << ") train_acc "
                  << format_fixed(r.train_accuracy, 4);
        if (!std::isnan(r.test_accuracy)) std::cerr << " test_acc " << format_fixed(r.test_accuracy, 4);
        std::cerr << "\n";
      });
      save_checkpoint(model, pre_out);
      if (!pre_history.empty()) write_history(history, pre_history);
    } else if (*ev) {
      banner("eval", 0, {{"model", ev_model}, {"data", ev_data}, {"out", ev_out}});
      const auto model = load_checkpoint<float>(ev_model);
      const auto data = load_dataset(ev_data);
      require_classes(model.config, data, "eval");
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = evaluate(model, data);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      write_metrics({{ev_corruption, ev_severity, "source-only", 1, data.size(), r.accuracy,
                      secs > 0.0 ? static_cast<double>(data.size()) / secs : 0.0, 0.0}},
                    ev_out);
      if (!ev_preds.empty()) write_predictions(data, r.predictions, {}, ev_preds);
      std::cout << "accuracy " << format_fixed(r.accuracy, 4) << "\n";
    } else if (*ad) {
      RunConfig cfg = resolve_config(ad_config, ad_seed);
      if (!ad_mode.empty()) cfg.adapt.mode = parse_adapt_mode(ad_mode);
      if (ad_views) cfg.adapt.views = *ad_views;
      if (ad_momentum) cfg.adapt.momentum = *ad_momentum;
      if (ad_iterations) cfg.adapt.iterations = *ad_iterations;
      if (ad_lr) cfg.adapt.optimizer.lr = *ad_lr;
      if (!ad_aug.empty()) cfg.adapt.augmentation = parse_augmentation(ad_aug);
      if (ad_batch) cfg.adapt.batch_size = *ad_batch;
      cfg.validate();
      std::vector<std::string> snapshots;
      if (!ad_bn.empty()) {
        snapshots = split_list(ad_bn);
        if (snapshots.size() != 2) throw InvalidArgument("--bn-snapshot expects PRE.csv,POST.csv");
      }
      banner("adapt", cfg.seed,
             {{"adapt", cfg.adapt}, {"loss", cfg.loss}, {"n_per_sphere", cfg.n_per_sphere}, {"model", ad_model},
              {"data", ad_data}});
      const auto model = load_checkpoint<float>(ad_model);
      const auto data = load_dataset(ad_data);
      require_classes(model.config, data, "adapt");
      if (!snapshots.empty()) export_bn_snapshot(model, snapshots[0]);
      AdaptSession session(model, cfg.adapt, cfg.loss, cfg.n_per_sphere, cfg.seed);
      const auto r = session.run(data.clouds);
      const double acc = score(r.predictions, data.labels, model.config.classes).accuracy;
      write_metrics({{ad_corruption, ad_severity, to_string(cfg.adapt.mode), cfg.adapt.views, data.size(), acc,
                      r.seconds > 0.0 ? static_cast<double>(data.size()) / r.seconds : 0.0, 0.0}},
                    ad_out);
      if (!ad_preds.empty()) write_predictions(data, r.predictions, r.flagged, ad_preds);
      if (!snapshots.empty()) export_bn_snapshot(session.live(), snapshots[1]);
      std::cout << "accuracy " << format_fixed(acc, 4) << " flagged " << r.flagged_count << "\n";
    } else if (*be) {
      RunConfig cfg = resolve_config(be_config, be_seed);
      cfg.validate();
      BenchOptions opt;
      opt.modes.clear();
      for (const auto& m : split_list(be_modes)) opt.modes.push_back(parse_adapt_mode(m));
      opt.views.clear();
      for (const auto& v : split_list(be_views)) {
        const auto n = parse_double(v);
        if (!n || *n < 1 || *n != static_cast<double>(static_cast<std::size_t>(*n)))
          throw InvalidArgument("--views: '" + v + "' is not a positive integer");
        opt.views.push_back(static_cast<std::size_t>(*n));
      }
      opt.repetitions = be_reps;
      opt.warmup = be_warmup;
      opt.corruption = be_corruption;
      opt.severity = be_severity;
      banner("bench", cfg.seed,
             {{"adapt", cfg.adapt}, {"modes", be_modes}, {"views", be_views}, {"reps", be_reps},
              {"warmup", be_warmup}, {"limit", be_limit}});
      const auto model = load_checkpoint<float>(be_model);
      auto data = load_dataset(be_data);
      require_classes(model.config, data, "bench");
      if (be_limit > 0 && be_limit < data.size()) {
        data.clouds.resize(be_limit);
        data.labels.resize(be_limit);
        if (!data.ids.empty()) data.ids.resize(be_limit);
      }
      const auto rows = bench_throughput(model, cfg.adapt, data, opt, cfg.loss, cfg.n_per_sphere, cfg.seed);
      write_metrics(rows, be_out);
      for (const auto& r : rows)
        std::cout << r.mode << " views=" << r.views << " accuracy " << format_fixed(r.accuracy, 4)
                  << " samples/s " << format_fixed(r.samples_per_second, 2) << " +- "
                  << format_fixed(r.samples_per_second_std, 2) << "\n";
    } else if (*sk) {
      banner("skeleton", 0, {{"model", sk_model}, {"cloud", sk_cloud}, {"n_per_sphere", sk_nps}});
      if (sk_nps < 1) throw InvalidArgument("--n-per-sphere must be >= 1");
      auto model = load_checkpoint<float>(sk_model);
      const auto cloud = read_xyz(sk_cloud);
      const PatchSet patches = tokenize_for(model.config, cloud);
      const auto out = forward(model, std::span<const PatchSet>(&patches, 1), BnMode::eval);
      const auto& skel = out.skeletons.front();
      export_skeleton(skel, sk_out);
      if (!sk_surface.empty()) write_xyz(reconstruct(skel, sk_nps), sk_surface);
      std::cout << "chamfer " << format_double(chamfer_distance(cloud, reconstruct(skel, sk_nps))) << "\n";
    } else if (*gc) {
      banner("gradcheck", GradcheckSuiteOptions{}.seed, {{"tiny", gc_tiny}});
      GradcheckSuiteOptions opt;
      opt.tiny = gc_tiny;
      bool all = true;
      for (const auto& c : run_gradcheck_suite(opt)) {
        all = all && c.report.passed;
        std::cout << (c.report.passed ? "PASS " : "FAIL ") << c.name << " max_rel "
                  << format_double(c.report.max_rel_error) << " tol " << format_double(c.tolerance) << " checked "
                  << c.report.checked << " skipped " << c.report.skipped_kinks << "\n";
      }
      if (!all) throw InternalFailure("gradient check failed");
    }
  } catch (const InvalidArgument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUser;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kExitInternal;
  }
  return kExitOk;
}

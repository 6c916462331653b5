// fastsnn: train quantized networks, convert them to spiking networks, simulate, fine-tune and report.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fastsnn/fastsnn.hpp"

#ifndef FASTSNN_VERSION
#define FASTSNN_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace fastsnn;

namespace {

constexpr const char* version = FASTSNN_VERSION;

/// Plain `key = value` lines in a config file apply to the subcommand being run.
class SubcommandConfig : public CLI::ConfigINI {
public:
  std::string section;

  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    auto parsed = CLI::ConfigINI::from_config(input);
    if (!section.empty())
      for (auto& item : parsed)
        if (item.parents.empty()) item.parents = {section};
    return parsed;
  }
};

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string percent(double fraction) { return fixed(100.0 * fraction, 4); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

/// Resolved option values, in declaration order, for config echoes.
json resolved_config(const CLI::App& sub) {
  json cfg;
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_name() == "--help" || opt->get_name() == "--config") continue;
    const auto results = opt->results();
    std::string name = opt->get_name();
    while (!name.empty() && name.front() == '-') name.erase(name.begin());
    if (opt->get_type_size() == 0) {
      cfg[name] = opt->count() > 0;
    } else if (opt->get_expected_max() > 1) {
      cfg[name] = results;
    } else {
      cfg[name] = results.empty() ? opt->get_default_str() : results.front();
    }
  }
  return cfg;
}

std::string config_comment(const json& cfg) {
  std::string out = "# fastsnn " + std::string(version) + "\n";
  for (const auto& [key, value] : cfg.items()) out += "# " + key + "=" + (value.is_string() ? value.get<std::string>() : value.dump()) + "\n";
  return out;
}

// ---------------------------------------------------------------------------------------------
// Dataset options shared by subcommands.

struct DataOptions {
  std::string dir;
  bool synthetic = false;
  std::uint64_t data_seed = 1;
  std::size_t train_count = 6000;
  std::size_t test_count = 2000;
  double mean = 0.1307;
  double stddev = 0.3081;

  void add(CLI::App* app) {
    app->add_option("--data", dir, "Directory with the four MNIST-layout IDX files");
    app->add_flag("--synthetic", synthetic, "Use the seeded synthetic digit generator instead of --data");
    app->add_option("--data-seed", data_seed, "Synthetic generator seed")->capture_default_str();
    app->add_option("--train-count", train_count, "Synthetic training samples")->capture_default_str();
    app->add_option("--test-count", test_count, "Synthetic test samples")->capture_default_str();
    app->add_option("--mean", mean, "Pixel normalization mean")->capture_default_str();
    app->add_option("--std", stddev, "Pixel normalization standard deviation")->capture_default_str()->check(
        CLI::PositiveNumber);
  }

  TrainTestSplit load() const {
    const Normalization norm{mean, stddev};
    if (synthetic) {
      if (!dir.empty()) throw Error("give either --data or --synthetic, not both");
      SyntheticConfig cfg;
      cfg.seed = data_seed;
      cfg.train_count = train_count;
      cfg.test_count = test_count;
      return synthetic_dataset(cfg, norm);
    }
    if (dir.empty())
      throw Error(std::string("no dataset given: pass --synthetic or --data DIR containing ") + IdxLayout::files[0] +
                  ", " + IdxLayout::files[1] + ", " + IdxLayout::files[2] + ", " + IdxLayout::files[3]);
    return load_idx_dir(dir, norm);
  }
};

Dataset limit(const Dataset& d, std::size_t n) { return n == 0 || n >= d.size() ? d : d.slice(0, n); }

struct TrainOptions {
  double lr = 0.04;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int epochs = 60;
  std::size_t batch_size = 64;

  void add(CLI::App* app) {
    app->add_option("--epochs", epochs, "Training epochs")->capture_default_str()->check(CLI::NonNegativeNumber);
    app->add_option("--lr", lr, "Learning rate")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--momentum", momentum, "SGD momentum")->capture_default_str()->check(CLI::Range(0.0, 0.999999));
    app->add_option("--weight-decay", weight_decay, "Weight decay")->capture_default_str()->check(
        CLI::NonNegativeNumber);
    app->add_option("--batch-size", batch_size, "Minibatch size")->capture_default_str()->check(CLI::PositiveNumber);
  }

  TrainConfig config(std::uint64_t seed) const {
    TrainConfig tc;
    tc.sgd = {lr, momentum, weight_decay, step_schedule(epochs)};
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.seed = seed;
    return tc;
  }
};

struct FinetuneOptions {
  double lr = 1e-4;
  double momentum = 0.9;
  int passes = 1;
  std::size_t batch_size = 32;
  std::size_t max_samples = 0;

  void add(CLI::App* app, const std::string& prefix) {
    app->add_option("--" + prefix + "lr", lr, "Fine-tuning learning rate")->capture_default_str()->check(
        CLI::PositiveNumber);
    app->add_option("--" + prefix + "momentum", momentum, "Fine-tuning momentum")->capture_default_str();
    app->add_option("--" + prefix + "passes", passes, "Passes over the data per layer")->capture_default_str()->check(
        CLI::PositiveNumber);
    app->add_option("--" + prefix + "batch-size", batch_size, "Fine-tuning batch size")->capture_default_str()->check(
        CLI::PositiveNumber);
    app->add_option("--" + prefix + "max-samples", max_samples, "Training samples used (0 = all)")
        ->capture_default_str();
  }

  FinetuneConfig config(std::uint64_t seed) const {
    FinetuneConfig fc;
    fc.optimizer = {lr, momentum, 0.0, {}};
    fc.passes = passes;
    fc.batch_size = batch_size;
    fc.max_samples = max_samples;
    fc.seed = seed;
    return fc;
  }
};

NeuronModel parse_neuron(const std::string& s) {
  return s == "sif" ? NeuronModel::signed_integrate_fire : NeuronModel::integrate_fire;
}

ScheduleMode parse_schedule(const std::string& s) {
  return s == "full-wait" ? ScheduleMode::full_wait : ScheduleMode::pipelined;
}

const char* neuron_name(NeuronModel n) { return n == NeuronModel::signed_integrate_fire ? "sif" : "if"; }
const char* schedule_name(ScheduleMode m) { return m == ScheduleMode::full_wait ? "full-wait" : "pipelined"; }

std::string metrics_csv(const std::vector<EpochMetrics>& history, const json& cfg) {
  std::string out = config_comment(cfg) + "epoch,learning_rate,train_loss,train_accuracy,test_accuracy\n";
  for (const auto& m : history)
    out += std::to_string(m.epoch) + "," + fixed(m.learning_rate, 8) + "," + fixed(m.train_loss, 8) + "," +
           percent(m.train_accuracy) + "," + percent(m.test_accuracy) + "\n";
  return out;
}

std::string loss_csv(const std::vector<LayerLossCurve>& curves) {
  std::ostringstream os;
  write_loss_csv(os, curves);
  return os.str();
}

SpikingNetwork build_snn(const NetworkDef& folded, NeuronModel neuron, ScheduleMode mode, double neg_threshold,
                         ThresholdSource source, const Dataset& calibration) {
  SpikingNetwork snn = convert(folded, neuron, mode, neg_threshold);
  if (source != ThresholdSource::learned)
    apply_thresholds(snn, baseline_thresholds(folded, limit(calibration, 128).images, source));
  return snn;
}

// ---------------------------------------------------------------------------------------------
// Subcommands

struct GenSyntheticCmd {
  std::string out;
  SyntheticConfig cfg;

  void add(CLI::App* app) {
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--seed", cfg.seed, "Generator seed")->capture_default_str();
    app->add_option("--train-count", cfg.train_count, "Training samples")->capture_default_str();
    app->add_option("--test-count", cfg.test_count, "Test samples")->capture_default_str();
  }

  int run() const {
    write_synthetic(out, cfg);
    std::cout << "wrote " << cfg.train_count << " training and " << cfg.test_count << " test samples to " << out
              << "\n";
    return 0;
  }
};

struct TrainCmd {
  std::string arch = "mlp3";
  int bits = 2;
  std::uint64_t seed = 1;
  std::string out = "model.qann";
  std::string metrics;
  DataOptions data;
  TrainOptions opts;

  void add(CLI::App* app) {
    app->add_option("--arch", arch, "Architecture")->capture_default_str()->check(
        CLI::IsMember({"mlp3", "convnet5", "resnet10"}));
    app->add_option("--bits", bits, "Activation bit-width")->capture_default_str()->check(CLI::Range(1, 8));
    app->add_option("--seed", seed, "Initialization and shuffling seed")->capture_default_str();
    app->add_option("--out", out, "Model file")->capture_default_str();
    app->add_option("--metrics", metrics, "Per-epoch metrics CSV (default: <out>.csv)");
    data.add(app);
    opts.add(app);
  }

  int run(const CLI::App& app) const {
    const auto split = data.load();
    const json cfg = resolved_config(app);
    const auto result = train(make_architecture(arch, bits, seed), split.train, split.test, opts.config(seed),
                              [](const EpochMetrics& m) {
                                std::cerr << "epoch " << m.epoch << " loss " << fixed(m.train_loss, 4) << " train "
                                          << percent(m.train_accuracy) << "% test " << percent(m.test_accuracy)
                                          << "%\n";
                              });
    save(result.net, out);
    write_text(metrics.empty() ? out + ".csv" : metrics, metrics_csv(result.history, cfg));
    std::cout << "test_accuracy=" << percent(evaluate(result.net, split.test)) << "\n";
    return 0;
  }
};

struct ConvertCmd {
  std::string model;
  std::string out = "model.qsnn";
  std::string neuron = "if";
  std::string schedule = "pipelined";
  std::string threshold = "learned";
  double neg_threshold = -1e-3;
  DataOptions data;

  void add(CLI::App* app) {
    app->add_option("--model", model, "Trained model file")->required()->check(CLI::ExistingFile);
    app->add_option("--out", out, "Spiking network file")->capture_default_str();
    app->add_option("--neuron", neuron, "Neuron model")->capture_default_str()->check(CLI::IsMember({"if", "sif"}));
    app->add_option("--schedule", schedule, "Layer schedule")->capture_default_str()->check(
        CLI::IsMember({"full-wait", "pipelined"}));
    app->add_option("--threshold", threshold, "Threshold source")->capture_default_str()->check(
        CLI::IsMember({"learned", "max", "p99", "p99.9"}));
    app->add_option("--neg-threshold", neg_threshold, "Negative threshold of signed neurons")->capture_default_str();
    data.add(app);
  }

  int run() const {
    const NetworkDef folded = fold_batchnorm(load_network(model));
    const ThresholdSource source = threshold_source_from_name(threshold);
    Dataset calibration;
    if (source != ThresholdSource::learned) calibration = data.load().train;
    const SpikingNetwork snn =
        build_snn(folded, parse_neuron(neuron), parse_schedule(schedule), neg_threshold, source, calibration);
    save(snn, out);
    std::cout << "layers=" << snn.depth() << " T=" << snn.time_steps << " total_steps=" << snn.schedule.total_steps
              << "\n";
    return 0;
  }
};

struct SimulateCmd {
  std::string snn_path;
  std::string split = "test";
  std::size_t limit_n = 0;
  std::string trace_dir;
  std::size_t trace_samples = 1;
  DataOptions data;

  void add(CLI::App* app) {
    app->add_option("--snn", snn_path, "Spiking network file")->required()->check(CLI::ExistingFile);
    app->add_option("--split", split, "Dataset split")->capture_default_str()->check(CLI::IsMember({"train", "test"}));
    app->add_option("--limit", limit_n, "Evaluate only the first N samples (0 = all)")->capture_default_str();
    app->add_option("--trace", trace_dir, "Write per-layer spike CSVs and a JSON summary to this directory");
    app->add_option("--trace-samples", trace_samples, "Samples recorded in the trace")->capture_default_str();
    data.add(app);
  }

  int run() const {
    const SpikingNetwork snn = load_spiking(snn_path);
    const auto tt = data.load();
    const Dataset d = limit(split == "train" ? tt.train : tt.test, limit_n);
    const Simulator sim(snn);
    const auto res = simulate(sim, d.images, trace_dir.empty() ? 0 : trace_samples);
    const double acc = accuracy_of(res.predictions, d.labels);
    std::cout << "accuracy=" << percent(acc) << " ann_ops=" << res.ops.ann_ops * d.size()
              << " snn_ops=" << res.ops.snn_ops << " ratio=" << fixed(ratio(res.ops, d.size())) << "\n";
    if (!trace_dir.empty()) write_trace(snn, res, acc, d.size());
    return 0;
  }

  static double ratio(const OpCounters& batch_ops, std::size_t n) {
    return n == 0 ? 0.0 : static_cast<double>(batch_ops.snn_ops) / static_cast<double>(batch_ops.ann_ops * n);
  }

  void write_trace(const SpikingNetwork& snn, const BatchResult& res, double acc, std::size_t n) const {
    fs::create_directories(trace_dir);
    json summary;
    summary["version"] = version;
    summary["time_steps"] = snn.time_steps;
    summary["schedule"] = schedule_name(snn.schedule.mode);
    summary["neuron"] = neuron_name(snn.neuron);
    summary["samples"] = n;
    summary["accuracy"] = acc;
    summary["ops"] = {{"ann_ops_per_sample", res.ops.ann_ops},
                      {"snn_ops_total", res.ops.snn_ops},
                      {"input_ops_total", res.ops.input_ops},
                      {"ratio", ratio(res.ops, n)}};
    for (std::size_t l = 0; l + 1 < snn.layers.size(); ++l) {
      std::string csv = "sample,step,neuron,spike\n";
      json layer;
      layer["layer"] = l + 1;
      layer["neurons"] = snn.layers[l].size();
      json rates = json::array();
      for (std::size_t s = 0; s < res.traces.size(); ++s) {
        const auto& L = res.traces[s].layers[l];
        for (int t = 0; t < res.traces[s].time_steps; ++t)
          for (std::size_t i = 0; i < L.neurons; ++i)
            if (const int sp = L.at(t, i); sp != 0)
              csv += std::to_string(s) + "," + std::to_string(L.window_start + t) + "," + std::to_string(i) + "," +
                     std::to_string(sp) + "\n";
        const auto r = res.traces[s].rates(l);
        double mean = 0;
        for (double v : r) mean += v;
        rates.push_back({{"sample", s}, {"mean_rate", r.empty() ? 0.0 : mean / static_cast<double>(r.size())}, {"rates", r}});
      }
      layer["traced"] = rates;
      summary["layers"].push_back(layer);
      write_text(fs::path(trace_dir) / ("layer_" + std::to_string(l + 1) + ".csv"), csv);
    }
    write_text(fs::path(trace_dir) / "summary.json", summary.dump(2) + "\n");
  }
};

struct FinetuneCmd {
  std::string model;
  std::string snn_path;
  std::string out = "finetuned.qsnn";
  std::string loss_path;
  std::uint64_t seed = 1;
  FinetuneOptions opts;
  DataOptions data;

  void add(CLI::App* app) {
    app->add_option("--model", model, "Trained model file (reference activations)")->required()->check(
        CLI::ExistingFile);
    app->add_option("--snn", snn_path, "Spiking network converted from --model")->required()->check(CLI::ExistingFile);
    app->add_option("--out", out, "Fine-tuned spiking network file")->capture_default_str();
    app->add_option("--loss-csv", loss_path, "Per-layer loss curve CSV (default: <out>.loss.csv)");
    app->add_option("--seed", seed, "Batch order seed")->capture_default_str();
    opts.add(app, "");
    data.add(app);
  }

  int run() const {
    const NetworkDef folded = fold_batchnorm(load_network(model));
    const auto tt = data.load();
    const auto res = finetune(folded, load_spiking(snn_path), tt.train, opts.config(seed), [](const LayerLossCurve& c) {
      std::cerr << "layer " << c.layer + 1 << " loss " << fixed(c.first_pass_mean(), 4) << " -> "
                << fixed(c.last_pass_mean(), 4) << "\n";
    });
    save(res.snn, out);
    write_text(loss_path.empty() ? out + ".loss.csv" : loss_path, loss_csv(res.curves));
    std::cout << "tuned_layers=" << res.curves.size() << "\n";
    return 0;
  }
};

struct EvalCmd {
  std::string model;
  std::string split = "test";
  std::size_t limit_n = 0;
  DataOptions data;

  void add(CLI::App* app) {
    app->add_option("--model", model, "Model file (.qann or .qsnn)")->required()->check(CLI::ExistingFile);
    app->add_option("--split", split, "Dataset split")->capture_default_str()->check(CLI::IsMember({"train", "test"}));
    app->add_option("--limit", limit_n, "Evaluate only the first N samples (0 = all)")->capture_default_str();
    data.add(app);
  }

  int run() const {
    const auto tt = data.load();
    const Dataset d = limit(split == "train" ? tt.train : tt.test, limit_n);
    const std::string kind = model_kind(model);
    double acc = 0;
    if (kind == "QANN")
      acc = evaluate(load_network(model), d);
    else if (kind == "QSNN")
      acc = snn_accuracy(load_spiking(model), d);
    else
      throw Error(model + ": not a model file (unknown magic)");
    std::cout << "accuracy=" << percent(acc) << "\n";
    return 0;
  }
};

struct CountOpsCmd {
  std::string snn_path;
  std::size_t limit_n = 100;
  DataOptions data;

  void add(CLI::App* app) {
    app->add_option("--snn", snn_path, "Spiking network file")->required()->check(CLI::ExistingFile);
    app->add_option("--limit", limit_n, "Test samples to average over (0 = all)")->capture_default_str();
    data.add(app);
  }

  int run() const {
    const SpikingNetwork snn = load_spiking(snn_path);
    const Dataset d = limit(data.load().test, limit_n);
    OpCounters ops;
    snn_accuracy(snn, d, &ops);
    const double n = static_cast<double>(std::max<std::size_t>(d.size(), 1));
    json out;
    out["samples"] = d.size();
    out["ann_ops_per_sample"] = ann_operation_count(snn);
    out["snn_ops_total"] = ops.snn_ops;
    out["snn_ops_per_sample"] = static_cast<double>(ops.snn_ops) / n;
    out["input_ops_per_sample"] = static_cast<double>(ops.input_ops) / n;
    out["ratio"] = static_cast<double>(ops.snn_ops) / (static_cast<double>(ann_operation_count(snn)) * n);
    std::cout << out.dump(2) << "\n";
    return 0;
  }
};

// ---------------------------------------------------------------------------------------------
// pipeline: train (or load) -> fold -> convert (IF) -> swap in signed IF -> fine-tune -> report.

struct VariantResult {
  double accuracy = 0;
  std::uint64_t snn_ops = 0;  // summed over the evaluation set
};

struct SeedResult {
  std::uint64_t seed = 0;
  double ann = 0;
  VariantResult alpha, beta, gamma;
  std::uint64_t ann_ops = 0;  // per sample
  std::optional<EquivalenceReport> equivalence;
};

class StageFailure : public Error {
public:
  StageFailure(std::string name, const std::string& what) : Error(what), stage(std::move(name)) {}
  std::string stage;
};

struct PipelineCmd {
  std::string arch = "mlp3";
  int bits = 2;
  std::vector<std::uint64_t> seeds{1};
  std::string model;
  std::string out = "report";
  bool full_wait = false;
  std::string threshold = "learned";
  double neg_threshold = -1e-3;
  std::size_t eval_limit = 0;
  DataOptions data;
  TrainOptions train_opts;
  FinetuneOptions ft_opts;

  void add(CLI::App* app) {
    app->add_option("--arch", arch, "Architecture")->capture_default_str()->check(
        CLI::IsMember({"mlp3", "convnet5", "resnet10"}));
    app->add_option("--bits", bits, "Activation bit-width")->capture_default_str()->check(CLI::Range(1, 8));
    app->add_option("--seeds", seeds, "Seeds (one trained model each)")->capture_default_str()->delimiter(',');
    app->add_option("--model", model, "Use this trained model instead of training (single seed)")->check(
        CLI::ExistingFile);
    app->add_option("--out", out, "Output directory")->capture_default_str();
    app->add_flag("--full-wait", full_wait, "Use the full-wait schedule (latency T x L) instead of pipelined");
    app->add_option("--threshold", threshold, "Threshold source")->capture_default_str()->check(
        CLI::IsMember({"learned", "max", "p99", "p99.9"}));
    app->add_option("--neg-threshold", neg_threshold, "Negative threshold of signed neurons")->capture_default_str();
    app->add_option("--eval-limit", eval_limit, "Evaluate on the first N test samples (0 = all)")
        ->capture_default_str();
    data.add(app);
    train_opts.add(app);
    ft_opts.add(app, "ft-");
  }

  int run(const CLI::App& app) const {
    const json cfg = resolved_config(app);
    const auto started = std::chrono::steady_clock::now();
    fs::create_directories(out);
    std::vector<SeedResult> results;
    std::string failed_stage, failure;
    std::vector<std::string> validation;
    std::size_t eval_samples = 0;
    json timing = json::object();

    auto stage = [&](const std::string& name, auto&& fn) {
      const auto t0 = std::chrono::steady_clock::now();
      try {
        fn();
      } catch (const std::exception& e) {
        throw StageFailure(name, e.what());
      }
      timing[name] = timing.value(name, 0.0) +
                     std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    try {
      TrainTestSplit tt;
      stage("data", [&] { tt = data.load(); });
      const Dataset eval_set = limit(tt.test, eval_limit);
      eval_samples = eval_set.size();
      if (!model.empty() && seeds.size() != 1) throw StageFailure("config", "--model requires exactly one seed");
      const ScheduleMode mode = full_wait ? ScheduleMode::full_wait : ScheduleMode::pipelined;
      const ThresholdSource source = threshold_source_from_name(threshold);

      for (const std::uint64_t seed : seeds) {
        SeedResult r;
        r.seed = seed;
        const std::string tag = "seed" + std::to_string(seed);
        NetworkDef trained;
        stage("train", [&] {
          if (!model.empty()) {
            trained = load_network(model);
            return;
          }
          const auto res = train(make_architecture(arch, bits, seed), tt.train, tt.test, train_opts.config(seed));
          trained = res.net;
          save(trained, fs::path(out) / (tag + ".qann"));
          write_text(fs::path(out) / (tag + "_train.csv"), metrics_csv(res.history, cfg));
        });
        NetworkDef folded;
        stage("fold", [&] { folded = fold_batchnorm(trained); });
        stage("evaluate_ann", [&] { r.ann = evaluate(folded, eval_set); });
        SpikingNetwork alpha;
        stage("convert", [&] {
          alpha = build_snn(folded, NeuronModel::integrate_fire, mode, neg_threshold, source, tt.train);
        });
        auto run_variant = [&](const SpikingNetwork& snn, VariantResult& v) {
          OpCounters ops;
          v.accuracy = snn_accuracy(snn, eval_set, &ops);
          v.snn_ops = ops.snn_ops;
          r.ann_ops = ann_operation_count(snn);
        };
        stage("simulate_alpha", [&] { run_variant(alpha, r.alpha); });
        if (full_wait && source == ThresholdSource::learned)
          stage("equivalence", [&] { r.equivalence = equivalence_check(folded, alpha, limit(eval_set, 200).images); });
        const SpikingNetwork beta = with_dynamics(alpha, NeuronModel::signed_integrate_fire, mode);
        stage("simulate_beta", [&] { run_variant(beta, r.beta); });
        SpikingNetwork gamma;
        stage("finetune", [&] {
          const auto ft = finetune(folded, beta, tt.train, ft_opts.config(seed));
          gamma = ft.snn;
          write_text(fs::path(out) / (tag + "_finetune_loss.csv"), loss_csv(ft.curves));
        });
        stage("simulate_gamma", [&] { run_variant(gamma, r.gamma); });

        if (r.equivalence && !r.equivalence->passed())
          validation.push_back(tag + ": full-wait equivalence failed: " + r.equivalence->describe());
        if (full_wait && source == ThresholdSource::learned && r.alpha.accuracy != r.ann)
          validation.push_back(tag + ": full-wait SNN accuracy " + percent(r.alpha.accuracy) +
                               " differs from ANN accuracy " + percent(r.ann));
        results.push_back(std::move(r));
      }
    } catch (const StageFailure& e) {
      failed_stage = e.stage;
      failure = e.what();
    }

    write_reports(cfg, results, eval_samples, failed_stage, failure, validation, timing,
                  std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count());
    if (!failed_stage.empty()) {
      std::cerr << "stage '" << failed_stage << "' failed: " << failure << "\n";
      return 1;
    }
    for (const auto& v : validation) std::cerr << "validation: " << v << "\n";
    return validation.empty() ? 0 : 2;
  }

  void write_reports(const json& cfg, const std::vector<SeedResult>& results, std::size_t eval_samples,
                     const std::string& failed_stage,
                     const std::string& failure, const std::vector<std::string>& validation, const json& timing,
                     double seconds) const {
    const double n = static_cast<double>(std::max<std::size_t>(results.size(), 1));
    double ann = 0;
    VariantResult mean[3];
    std::uint64_t ann_ops = 0;
    for (const auto& r : results) {
      ann += r.ann / n;
      const VariantResult* v[3] = {&r.alpha, &r.beta, &r.gamma};
      for (int k = 0; k < 3; ++k) {
        mean[k].accuracy += v[k]->accuracy / n;
        mean[k].snn_ops += v[k]->snn_ops;
      }
      ann_ops = r.ann_ops;
    }
    const char* names[3] = {"alpha", "beta", "gamma"};
    const char* descr[3] = {"native IF", "signed IF", "signed IF + fine-tuning"};
    std::string csv = config_comment(cfg);
    if (!failed_stage.empty()) csv += "# failed_stage=" + failed_stage + "\n";
    csv += "variant,description,accuracy,delta_acc,snn_ops_per_sample,ann_ops_per_sample,op_ratio\n";
    json rows = json::array();
    const std::string ann_acc = percent(ann);
    csv += "ANN,quantized ANN (BN folded)," + ann_acc + ",0.0000,," + std::to_string(ann_ops) + ",\n";
    rows.push_back({{"variant", "ANN"}, {"accuracy", ann_acc}, {"delta_acc", "0.0000"}});
    for (int k = 0; k < 3; ++k) {
      const std::string acc = percent(mean[k].accuracy);
      const std::string delta = fixed(std::stod(acc) - std::stod(ann_acc), 4);
      const double per_sample = results.empty() || eval_samples == 0
                                    ? 0.0
                                    : static_cast<double>(mean[k].snn_ops) / (n * static_cast<double>(eval_samples));
      const std::string ratio = ann_ops ? fixed(per_sample / static_cast<double>(ann_ops)) : "";
      csv += std::string(names[k]) + "," + descr[k] + "," + acc + "," + delta + "," + fixed(per_sample, 2) + "," +
             std::to_string(ann_ops) + "," + ratio + "\n";
      rows.push_back({{"variant", names[k]},
                      {"accuracy", acc},
                      {"delta_acc", delta},
                      {"snn_ops_per_sample", fixed(per_sample, 2)},
                      {"op_ratio", ratio}});
    }
    write_text(fs::path(out) / "report.csv", csv);

    std::string seed_csv = config_comment(cfg) + "seed,ann,alpha,beta,gamma\n";
    json per_seed = json::array();
    for (const auto& r : results) {
      seed_csv += std::to_string(r.seed) + "," + percent(r.ann) + "," + percent(r.alpha.accuracy) + "," +
                  percent(r.beta.accuracy) + "," + percent(r.gamma.accuracy) + "\n";
      json s{{"seed", r.seed},
             {"ann", percent(r.ann)},
             {"alpha", percent(r.alpha.accuracy)},
             {"beta", percent(r.beta.accuracy)},
             {"gamma", percent(r.gamma.accuracy)}};
      if (r.equivalence) s["equivalence_max_deviation"] = r.equivalence->worst();
      per_seed.push_back(s);
    }
    write_text(fs::path(out) / "report_seeds.csv", seed_csv);

    json report;
    report["version"] = version;
    report["config"] = cfg;
    report["status"] = !failed_stage.empty() ? "failed" : validation.empty() ? "ok" : "validation_failed";
    if (!failed_stage.empty()) report["failed_stage"] = failed_stage, report["error"] = failure;
    report["validation"] = validation;
    report["rows"] = rows;
    report["seeds"] = per_seed;
    report["timing_seconds"] = timing;
    report["total_seconds"] = seconds;
    write_text(fs::path(out) / "report.json", report.dump(2) + "\n");
    std::cout << csv;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Quantized ANN to spiking network conversion toolkit", "fastsnn"};
  app.set_version_flag("--version", version);
  app.require_subcommand(1);
  app.fallthrough();
  auto config = std::make_shared<SubcommandConfig>();
  app.config_formatter(config);
  app.set_config("--config", "", "key=value file with options for the subcommand");

  GenSyntheticCmd gen;
  TrainCmd train_cmd;
  ConvertCmd convert_cmd;
  SimulateCmd simulate_cmd;
  FinetuneCmd finetune_cmd;
  EvalCmd eval_cmd;
  CountOpsCmd count_cmd;
  PipelineCmd pipeline_cmd;

  auto* gen_app = app.add_subcommand("gen-synthetic", "Write a synthetic digit dataset in IDX format");
  auto* train_app = app.add_subcommand("train", "Train a quantized network");
  auto* convert_app = app.add_subcommand("convert", "Fold batch norm and convert a model to a spiking network");
  auto* simulate_app = app.add_subcommand("simulate", "Run a spiking network on a dataset split");
  auto* finetune_app = app.add_subcommand("finetune", "Layer-wise fine-tuning of a spiking network");
  auto* eval_app = app.add_subcommand("eval", "Accuracy of a model or spiking network");
  auto* count_app = app.add_subcommand("count-ops", "ANN and SNN operation counts");
  auto* pipeline_app = app.add_subcommand("pipeline", "Train, convert, fine-tune and report the ablation table");
  gen.add(gen_app);
  train_cmd.add(train_app);
  convert_cmd.add(convert_app);
  simulate_cmd.add(simulate_app);
  finetune_cmd.add(finetune_app);
  eval_cmd.add(eval_app);
  count_cmd.add(count_app);
  pipeline_cmd.add(pipeline_app);

  for (int i = 1; i < argc; ++i)
    for (const CLI::App* sub : app.get_subcommands({}))
      if (sub->get_name() == argv[i] && config->section.empty()) config->section = argv[i];

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen_app) return gen.run();
    if (*train_app) return train_cmd.run(*train_app);
    if (*convert_app) return convert_cmd.run();
    if (*simulate_app) return simulate_cmd.run();
    if (*finetune_app) return finetune_cmd.run();
    if (*eval_app) return eval_cmd.run();
    if (*count_app) return count_cmd.run();
    if (*pipeline_app) return pipeline_cmd.run(*pipeline_app);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any criterion fails.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "fastsnn/fastsnn.hpp"
#include "support/oracles.hpp"

using namespace fastsnn;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string pct(double a) { return fmt("%.2f%%", 100 * a); }

// Shared desk-scale data and models.

const TrainTestSplit& desk_data() {
  static const TrainTestSplit data = synthetic_dataset(SyntheticConfig{});
  return data;
}

constexpr int kBits = 2;
constexpr int kMlpEpochs = 20;
constexpr int kResnetEpochs = 10;
constexpr int kSeeds = 5;

NetworkDef train_folded(std::string_view arch, std::uint64_t seed, int epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.sgd.schedule = step_schedule(epochs);
  return fold_batchnorm(train(make_architecture(arch, kBits, seed), desk_data().train, {}, cfg).net);
}

std::map<std::pair<std::string, std::uint64_t>, NetworkDef>& model_cache() {
  static std::map<std::pair<std::string, std::uint64_t>, NetworkDef> cache;
  return cache;
}

const NetworkDef& desk_model(const std::string& arch, std::uint64_t seed) {
  auto& cache = model_cache();
  const auto key = std::pair{arch, seed};
  if (auto it = cache.find(key); it != cache.end()) return it->second;
  return cache.emplace(key, train_folded(arch, seed, arch == "mlp3" ? kMlpEpochs : kResnetEpochs)).first->second;
}

struct Ablation {
  double ann = 0, alpha = 0, beta = 0, gamma = 0;
};

Ablation ablation(const NetworkDef& folded, std::uint64_t seed) {
  const auto& d = desk_data();
  Ablation r;
  r.ann = evaluate(folded, d.test);
  const auto alpha = convert(folded, NeuronModel::integrate_fire, ScheduleMode::pipelined);
  r.alpha = snn_accuracy(alpha, d.test);
  const auto beta = with_dynamics(alpha, NeuronModel::signed_integrate_fire, ScheduleMode::pipelined);
  r.beta = snn_accuracy(beta, d.test);
  FinetuneConfig ft;  // one pass over the whole training set
  ft.seed = seed;
  r.gamma = snn_accuracy(finetune(folded, beta, d.train, ft).snn, d.test);
  return r;
}

// Criteria.

Outcome lossless_at_bound() {
  const auto t0 = Clock::now();
  Rng rng(2024);
  int nets = 0, inputs = 0;
  double worst = 0;
  std::size_t agree = 0, decisions = 0, level_mismatches = 0, oracle_decision_mismatches = 0;
  std::string first_failure;
  for (int n = 0; n < 120; ++n) {
    const int bits = 1 + n % 3;
    const int hidden = 1 + (n / 3) % 5;  // 2..6 weight layers
    const NetworkDef net = oracle::random_network(rng, bits, hidden);
    const Tensor x = oracle::random_inputs(net, 12, rng);
    for (auto neuron : {NeuronModel::integrate_fire, NeuronModel::signed_integrate_fire}) {
      const auto snn = convert(net, neuron, ScheduleMode::full_wait);
      const auto rep = equivalence_check(net, snn, x);
      worst = std::max(worst, rep.worst());
      agree += rep.decision_agreements;
      decisions += rep.samples;
      if (!rep.passed() && first_failure.empty()) first_failure = net.name + ": " + rep.describe();
      const Simulator sim(snn);
      for (std::size_t b = 0; b < x.dim(0); ++b) {
        std::vector<long double> logits;
        const auto levels = oracle::network_forward(net, x.row(b), &logits);
        const auto r = sim.run(x.row(b));
        for (std::size_t l = 0; l < levels.size(); ++l)
          for (std::size_t i = 0; i < levels[l].size(); ++i)
            level_mismatches += r.trace.layers[l].counts[i] != static_cast<int>(levels[l][i]);
        const auto oracle_arg = std::max_element(logits.begin(), logits.end()) - logits.begin();
        const auto snn_arg = std::max_element(r.readout.begin(), r.readout.end()) - r.readout.begin();
        oracle_decision_mismatches += oracle_arg != snn_arg;
      }
    }
    ++nets;
    inputs += static_cast<int>(x.dim(0));
  }
  const double t = seconds_since(t0);
  Outcome o;
  o.pass = worst <= 1e-5 && agree == decisions && level_mismatches == 0 && oracle_decision_mismatches == 0 &&
           first_failure.empty() && t <= 120;
  o.detail = fmt("%d nets x %d inputs, IF and signed IF: max |rate - Q/s| = %.3g, argmax agreement %zu/%zu, "
                 "spike counts differing from oracle levels: %zu, oracle argmax mismatches: %zu, %.1f s (limit 120 s)",
                 nets, inputs / nets, worst, agree, decisions, level_mismatches, oracle_decision_mismatches, t);
  if (!first_failure.empty()) o.detail += "; first failure: " + first_failure;
  return o;
}

Outcome sequential_error_vignette() {
  const auto t0 = Clock::now();
  struct Row {
    double z;
    int spike;
    double v;
  };
  struct Case {
    const char* name;
    NeuronModel model;
    std::vector<Row> expected;
    double rate;
  };
  const std::vector<Case> cases = {
      {"IF (-1,-1,2)", NeuronModel::integrate_fire, {{-1, 0, -1}, {-1, 0, -2}, {2, 0, 0}}, 0.0},
      {"IF (2,-1,-1)", NeuronModel::integrate_fire, {{2, 1, 1}, {-1, 0, 0}, {-1, 0, -1}}, 1.0 / 3},
      {"SIF (2,-1,-1)", NeuronModel::signed_integrate_fire, {{2, 1, 1}, {-1, 0, 0}, {-1, -1, 0}}, 0.0},
  };
  bool ok = true;
  std::ostringstream table;
  for (const auto& c : cases) {
    NeuronState s = NeuronState::charged(0.0);
    table << "\n      " << c.name << "  t: z, Theta, V =";
    for (std::size_t t = 0; t < c.expected.size(); ++t) {
      const auto& e = c.expected[t];
      const int spike = neuron_step(c.model, s, e.z, 1.0, -1e-3);
      table << "  " << t + 1 << ": " << e.z << ", " << spike << ", " << s.potential;
      ok = ok && spike == e.spike && s.potential == e.v;
    }
    const double rate = static_cast<double>(s.count) / 3.0;
    table << "  -> rate " << fmt("%.4f", rate);
    ok = ok && rate == c.rate;
  }
  const double t = seconds_since(t0);
  return {ok && t < 1.0, fmt("threshold 1, rest 0, %.4f s (limit 1 s)", t) + table.str()};
}

Outcome quantizer_levels() {
  const auto t0 = Clock::now();
  // value set of the 2-bit quantizer with s = 1, and the firing-rate set of a 3-step IF neuron
  std::set<double> values, rates;
  for (int i = -200; i <= 1200; ++i) {
    const double x = i / 1000.0;
    values.insert(quantize_value(x, 1.0, 2));
    NeuronState s = NeuronState::charged(0.5);
    for (int t = 0; t < 3; ++t) if_step(s, x, 1.0);
    rates.insert(s.count / 3.0);
  }
  const std::set<double> expected = {0.0, 1.0 / 3, 2.0 / 3, 1.0};
  // floor/round identity over a dense sweep
  constexpr long kPoints = 1'000'000;
  long mismatches = 0;
  for (long i = 0; i < kPoints; ++i) {
    const double x = -0.5 + 2.0 * static_cast<double>(i) / (kPoints - 1);
    mismatches += quantize_level(x, 1.0, 2) != quantize_level_floor_form(x, 1.0, 2);
  }
  const double t = seconds_since(t0);
  std::string vs;
  for (double v : values) vs += fmt("%.6f ", v);
  return {values == expected && rates == expected && mismatches == 0 && t <= 10,
          fmt("values {%s}, rate set %s the value set, floor/round mismatches %ld of %ld, %.2f s (limit 10 s)",
              vs.c_str(), rates == expected ? "equals" : "differs from", mismatches, kPoints, t)};
}

Outcome batchnorm_folding() {
  const auto t0 = Clock::now();
  Rng rng(77);
  NetworkBuilder b("bn", {2, 8, 8}, 5);
  b.conv(6, 3, 1, 1).batchnorm().quant_relu(2, 1.1f);
  const int skip = b.last();
  b.conv(6, 3, 1, 1).batchnorm().add_shortcut(skip).quant_relu(2, 0.9f).avgpool(2).fc(12).batchnorm().quant_relu(2, 1.3f)
      .fc(4).batchnorm();
  NetworkDef net = b.build();
  for (auto& l : net.layers)
    if (auto* bn = l.get<BatchNorm>()) {
      bn->gamma = oracle::random_tensor(bn->gamma.shape(), rng, 0.3f, 2.0f);
      bn->beta = oracle::random_tensor(bn->beta.shape(), rng, -0.5f, 0.5f);
      bn->running_mean = oracle::random_tensor(bn->running_mean.shape(), rng, -0.5f, 0.5f);
      bn->running_var = oracle::random_tensor(bn->running_var.shape(), rng, 0.2f, 3.0f);
    }
  const NetworkDef folded = fold_batchnorm(net);
  const Tensor x = oracle::random_tensor({1000, 2, 8, 8}, rng, -1.0f, 2.0f);
  const auto a = forward<double>(net, x), f = forward<double>(folded, x);
  double worst = 0;
  for (std::size_t i = 0; i < a.logits.size(); ++i) worst = std::max(worst, std::abs(a.logits[i] - f.logits[i]));
  std::size_t level_flips = 0;
  for (std::size_t l = 0; l < a.activations.size(); ++l)
    for (std::size_t i = 0; i < a.activations[l].size(); ++i) level_flips += a.activations[l][i] != f.activations[l][i];

  // the folded threshold is the pre-normalization input that BN maps exactly onto theta
  std::uniform_real_distribution<double> u(-2, 2), pos(0.2, 3), var(0.01, 4);
  double theta_worst = 0;
  for (int k = 0; k < 100; ++k) {
    const double theta = pos(rng), gamma = (k % 2 ? 1 : -1) * pos(rng), beta = u(rng), mean = u(rng), v = var(rng);
    const double eps = 1e-5;
    const double tb = folded_threshold(theta, gamma, beta, mean, v, eps);
    theta_worst = std::max(theta_worst, std::abs((tb - mean) / std::sqrt(v + eps) * gamma + beta - theta));
  }
  const double t = seconds_since(t0);
  return {worst <= 1e-4 && theta_worst <= 1e-6 && t <= 30,
          fmt("1000 inputs: max |logit diff| = %.3g (quantized levels changed: %zu of %zu); "
              "100 parameter draws: max |BN(theta_bar) - theta| = %.3g; %.1f s (limit 30 s)",
              worst, level_flips, a.activations.size() * a.activations[0].size(), theta_worst, t)};
}

Outcome desk_end_to_end() {
  const auto t0 = Clock::now();
  const NetworkDef& folded = desk_model("mlp3", 1);
  const double train_s = seconds_since(t0);
  const auto& d = desk_data();
  const double ann = evaluate(folded, d.test);
  const double full =
      snn_accuracy(convert(folded, NeuronModel::integrate_fire, ScheduleMode::full_wait), d.test);
  const Ablation r = ablation(folded, 1);
  const double gap = 100 * std::abs(r.gamma - ann);
  return {ann >= 0.95 && full == ann && gap <= 1.5 && train_s <= 1200,
          fmt("2-bit MLP-3, %d epochs on %zu synthetic digits (training %.0f s, limit 1200 s): ANN %s, "
              "full-wait SNN %s, pipelined T=3 signed IF + fine-tuning %s (|gap| %.2f pp, limit 1.5)",
              kMlpEpochs, d.train.size(), train_s, pct(ann).c_str(), pct(full).c_str(), pct(r.gamma).c_str(), gap)};
}

Outcome ablation_ordering() {
  Ablation res_mean, mlp_mean;
  std::string rows;
  for (std::uint64_t seed = 1; seed <= kSeeds; ++seed) {
    const Ablation res = ablation(desk_model("resnet10", seed), seed);
    const Ablation mlp = ablation(desk_model("mlp3", seed), seed);
    for (auto [acc, r] : {std::pair{&res_mean, &res}, std::pair{&mlp_mean, &mlp}}) {
      acc->ann += r->ann / kSeeds;
      acc->alpha += r->alpha / kSeeds;
      acc->beta += r->beta / kSeeds;
      acc->gamma += r->gamma / kSeeds;
    }
    rows += fmt("\n      seed %llu  ResNet-10 ANN %s a %s b %s g %s | MLP-3 ANN %s a %s b %s g %s",
                static_cast<unsigned long long>(seed), pct(res.ann).c_str(), pct(res.alpha).c_str(),
                pct(res.beta).c_str(), pct(res.gamma).c_str(), pct(mlp.ann).c_str(), pct(mlp.alpha).c_str(),
                pct(mlp.beta).c_str(), pct(mlp.gamma).c_str());
  }
  const double res_gain = 100 * (res_mean.gamma - res_mean.beta), mlp_gain = 100 * (mlp_mean.gamma - mlp_mean.beta);
  const bool ordered = res_mean.gamma >= res_mean.beta && res_mean.beta >= res_mean.alpha;
  return {ordered && res_gain > mlp_gain,
          fmt("means over %d seeds, pipelined T=3: ResNet-10 alpha %s <= beta %s <= gamma %s; fine-tuning gain "
              "ResNet-10 %+.2f pp vs MLP-3 %+.2f pp",
              kSeeds, pct(res_mean.alpha).c_str(), pct(res_mean.beta).c_str(), pct(res_mean.gamma).c_str(), res_gain,
              mlp_gain) +
              rows};
}

Outcome threshold_comparison() {
  const NetworkDef& folded = desk_model("mlp3", 1);
  const auto& d = desk_data();
  const Tensor calib = d.train.slice(0, 128).images;
  bool ok = true;
  std::string detail = "2-bit MLP-3, thresholds from one 128-sample batch:";
  for (auto mode : {ScheduleMode::full_wait, ScheduleMode::pipelined}) {
    double learned = 0, best_other = 0;
    detail += mode == ScheduleMode::full_wait ? " full-wait" : "; pipelined T=3";
    for (auto src : {ThresholdSource::learned, ThresholdSource::max, ThresholdSource::p99, ThresholdSource::p99_9}) {
      auto snn = convert(folded, NeuronModel::integrate_fire, mode);
      apply_thresholds(snn, baseline_thresholds(folded, calib, src));
      const double acc = snn_accuracy(snn, d.test);
      if (src == ThresholdSource::learned)
        learned = acc;
      else
        best_other = std::max(best_other, acc);
      detail += " " + std::string(threshold_source_name(src)) + " " + pct(acc);
    }
    ok = ok && learned > best_other;
  }
  return {ok, detail};
}

Outcome op_accounting() {
  const auto& d = desk_data();
  const Dataset probe = d.test.slice(0, 200);
  auto count = [&] {
    const auto snn = convert(train_folded("convnet5", 1, 5), NeuronModel::integrate_fire, ScheduleMode::pipelined);
    OpCounters ops;
    snn_accuracy(snn, probe, &ops);
    return ops;
  };
  const OpCounters a = count(), b = count();
  const bool same = a.snn_ops == b.snn_ops && a.ann_ops == b.ann_ops && a.input_ops == b.input_ops;
  return {a.snn_ops < a.ann_ops && same,
          fmt("ConvNet-5 (5 epochs), pipelined T=3 over %zu samples: SNN ops %llu vs ANN ops %llu (ratio %.4f); "
              "retrain and rerun gives SNN ops %llu, ANN ops %llu (%s)",
              probe.size(), static_cast<unsigned long long>(a.snn_ops), static_cast<unsigned long long>(a.ann_ops),
              a.ratio(), static_cast<unsigned long long>(b.snn_ops), static_cast<unsigned long long>(b.ann_ops),
              same ? "identical" : "different")};
}

}  // namespace

/// Runs every criterion, or only those whose numbers are given as arguments.
/// `--report FILE` also writes the result lines to FILE.
int main(int argc, char** argv) {
  std::set<std::size_t> only;
  std::ofstream report;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--report" && i + 1 < argc)
      report.open(argv[++i]);
    else
      only.insert(std::stoul(arg));
  }
  auto emit = [&](const std::string& line) {
    std::cout << line << std::endl;
    if (report.is_open()) report << line << std::endl;
  };
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"lossless full-wait conversion on random networks", lossless_at_bound},
      {"sequential-error vignette", sequential_error_vignette},
      {"2-bit quantizer levels and floor/round identity", quantizer_levels},
      {"batch-norm folding", batchnorm_folding},
      {"desk-scale MLP-3 end to end", desk_end_to_end},
      {"ablation ordering and depth dependence", ablation_ordering},
      {"learned versus statistical thresholds", threshold_comparison},
      {"operation accounting on ConvNet-5", op_accounting},
  };
  int failed = 0, ran = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++ran;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    emit(std::string(o.pass ? "PASS" : "FAIL") + " [" + std::to_string(i + 1) + "] " + criteria[i].first + " (" +
         fmt("%.1f s", seconds_since(t0)) + "): " + o.detail);
  }
  emit(std::to_string(ran - failed) + "/" + std::to_string(ran) + " criteria passed");
  return failed ? 1 : 0;
}

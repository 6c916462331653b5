#include <gtest/gtest.h>

#include <array>

#include "fastsnn/fastsnn.hpp"
#include "support/oracles.hpp"

using namespace fastsnn;

namespace {

struct Step {
  double z;
  int spike;
  double v;
};

std::vector<Step> run_neuron(NeuronModel model, const std::vector<double>& charges, double theta = 1.0,
                             double neg = -1e-3, double mu = 0.0) {
  NeuronState s = NeuronState::charged(mu);
  std::vector<Step> out;
  for (double z : charges) {
    const int spike = neuron_step(model, s, z, theta, neg);
    out.push_back({z, spike, s.potential});
  }
  return out;
}

void expect_table(const std::vector<Step>& got, const std::vector<Step>& want) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t t = 0; t < got.size(); ++t) {
    EXPECT_EQ(got[t].z, want[t].z) << "t=" << t + 1;
    EXPECT_EQ(got[t].spike, want[t].spike) << "t=" << t + 1;
    EXPECT_EQ(got[t].v, want[t].v) << "t=" << t + 1;
  }
}

/// Input 2 -> fc(2) -> quant -> fc(3) -> quant -> fc(2) readout, with saturating weights.
NetworkDef saturated_232() {
  NetworkDef net = NetworkBuilder("232", {2}, 1).fc(2).quant_relu(2).fc(3).quant_relu(2).fc(2).build();
  for (auto& l : net.layers)
    if (auto* p = l.get<Linear>()) {
      p->weight.fill(1.0f);
      p->bias.fill(5.0f);
    }
  return net;
}

}  // namespace

TEST(Neuron, LateExcitationMatchesAnn) {
  const auto t = run_neuron(NeuronModel::integrate_fire, {-1, -1, 2});
  expect_table(t, {{-1, 0, -1}, {-1, 0, -2}, {2, 0, 0}});
}

TEST(Neuron, EarlyExcitationMisfires) {
  const auto t = run_neuron(NeuronModel::integrate_fire, {2, -1, -1});
  expect_table(t, {{2, 1, 1}, {-1, 0, 0}, {-1, 0, -1}});
}

TEST(Neuron, SignedNeuronCancelsMisfire) {
  const auto t = run_neuron(NeuronModel::signed_integrate_fire, {2, -1, -1});
  expect_table(t, {{2, 1, 1}, {-1, 0, 0}, {-1, -1, 0}});
}

TEST(Neuron, ZeroChargeNeverFires) {
  for (auto m : {NeuronModel::integrate_fire, NeuronModel::signed_integrate_fire})
    for (const auto& s : run_neuron(m, std::vector<double>(50, 0.0), 1.0, -1e-3, 0.5)) EXPECT_EQ(s.spike, 0);
}

TEST(Neuron, NegativeSpikeNeedsPriorPositive) {
  const auto t = run_neuron(NeuronModel::signed_integrate_fire, {-0.5, -3.0});
  EXPECT_EQ(t[0].spike, 0);
  EXPECT_EQ(t[1].spike, 0);
  EXPECT_EQ(t[1].v, -3.5);
}

TEST(Neuron, PositiveBranchHasPriority) {
  // a charge that would satisfy both branches in sequence still emits only one spike per step
  NeuronState s = NeuronState::charged(0.0);
  EXPECT_EQ(sif_step(s, 5.0, 1.0, -1e-3), 1);
  EXPECT_EQ(s.potential, 4.0);
  EXPECT_EQ(s.count, 1);
}

TEST(Neuron, ConservationAndNonNegativeCount) {
  Rng rng(2);
  std::uniform_real_distribution<double> z(-1.5, 1.8);
  for (auto m : {NeuronModel::integrate_fire, NeuronModel::signed_integrate_fire})
    for (int trial = 0; trial < 200; ++trial) {
      const double theta = 0.7, mu = theta / 2;
      NeuronState s = NeuronState::charged(mu);
      double total = 0;
      for (int t = 0; t < 15; ++t) {
        const double c = z(rng);
        total += c;
        neuron_step(m, s, c, theta, -1e-3);
        EXPECT_GE(s.count, 0);
        EXPECT_NEAR(s.potential, mu + total - theta * s.count, 1e-12);
      }
    }
}

TEST(Neuron, SignedEqualsPlainOnNonNegativeStreams) {
  Rng rng(3);
  std::uniform_real_distribution<double> z(0.0, 1.3);
  for (int trial = 0; trial < 500; ++trial) {
    NeuronState a = NeuronState::charged(0.5), b = NeuronState::charged(0.5);
    for (int t = 0; t < 7; ++t) {
      const double c = z(rng);
      EXPECT_EQ(if_step(a, c, 1.0), sif_step(b, c, 1.0, -1e-3));
      EXPECT_EQ(a.potential, b.potential);
    }
  }
}

TEST(Simulator, SingleStepBinaryThreshold) {
  NetworkDef net = NetworkBuilder("t1", {1}, 1).fc(1).quant_relu(1, 1.0f).fc(1).build();
  net.layers[0].get<Linear>()->weight[0] = 1.0f;
  for (auto mode : {ScheduleMode::full_wait, ScheduleMode::pipelined}) {
    const auto snn = convert(net, NeuronModel::integrate_fire, mode);
    ASSERT_EQ(snn.time_steps, 1);
    const Simulator sim(snn);
    for (float x : {-1.0f, 0.0f, 0.25f, 0.49f, 0.5f, 0.51f, 0.9f, 3.0f}) {
      const auto r = sim.run(std::array{x});
      EXPECT_EQ(r.trace.layers[0].counts[0], x + 0.5 >= 1.0 ? 1 : 0) << "x=" << x;
    }
  }
}

TEST(Simulator, LayerConservationOverWindow) {
  Rng rng(6);
  const NetworkDef net = oracle::random_network(rng, 3, 2);
  for (auto mode : {ScheduleMode::full_wait, ScheduleMode::pipelined})
    for (auto neuron : {NeuronModel::integrate_fire, NeuronModel::signed_integrate_fire}) {
      const auto snn = convert(net, neuron, mode);
      const auto x = oracle::random_inputs(net, 3, rng);
      const auto& L = snn.layers[0];
      for (std::size_t b = 0; b < 3; ++b) {
        const auto r = Simulator(snn).run(x.row(b));
        // first-layer charge per step: bias + W x (constant), so V = mu + T (b + W x) - theta N
        ForwardCache<double> cache;
        Shape one{1};
        one.insert(one.end(), net.input_shape.begin(), net.input_shape.end());
        forward<double>(net, Tensor(one, std::vector<float>(x.row(b).begin(), x.row(b).end())), false, &cache);
        const auto& pre = cache.outputs[static_cast<std::size_t>(L.ann_layer) - 1];
        for (std::size_t i = 0; i < L.size(); ++i) {
          const double expect = L.initial_charge + snn.time_steps * pre[i] - L.threshold * r.trace.layers[0].counts[i];
          EXPECT_NEAR(r.final_potential[i], expect, 1e-9);
        }
      }
    }
}

TEST(Simulator, RatesBoundedAndDeterministic) {
  Rng rng(7);
  for (int n = 0; n < 10; ++n) {
    const NetworkDef net = oracle::random_network(rng, 2, 4);
    const auto snn = convert(net, NeuronModel::signed_integrate_fire, ScheduleMode::pipelined);
    const auto x = oracle::random_inputs(net, 4, rng);
    const auto a = simulate(snn, x, 4), b = simulate(snn, x, 4);
    EXPECT_EQ(a.readout, b.readout);
    EXPECT_EQ(a.ops.snn_ops, b.ops.snn_ops);
    for (std::size_t s = 0; s < 4; ++s)
      for (std::size_t l = 0; l < a.traces[s].layers.size(); ++l) {
        EXPECT_EQ(a.traces[s].layers[l].spikes, b.traces[s].layers[l].spikes);
        for (double r : a.traces[s].rates(l)) {
          EXPECT_GE(r, 0.0);
          EXPECT_LE(r, 1.0);
        }
      }
  }
}

TEST(Simulator, FullWaitWindowsAreSequential) {
  const auto snn = convert(saturated_232(), NeuronModel::integrate_fire, ScheduleMode::full_wait);
  const auto r = Simulator(snn).run(std::array{1.0f, 1.0f});
  EXPECT_EQ(r.trace.layers[0].window_start, 3);
  EXPECT_EQ(r.trace.layers[1].window_start, 6);
}

TEST(Simulator, RejectsInconsistentSchedule) {
  auto snn = convert(saturated_232(), NeuronModel::integrate_fire, ScheduleMode::full_wait);
  snn.schedule.total_steps = 3;
  EXPECT_THROW(Simulator{snn}, Error);
  snn = convert(saturated_232(), NeuronModel::integrate_fire, ScheduleMode::full_wait);
  EXPECT_THROW(Simulator(snn).run(std::array{1.0f}), ShapeError);
}

TEST(Ops, SaturatedMlpHandCount) {
  const auto snn = convert(saturated_232(), NeuronModel::integrate_fire, ScheduleMode::pipelined);
  const auto r = Simulator(snn).run(std::array{1.0f, 1.0f});
  for (const auto& L : r.trace.layers)
    for (int c : L.counts) ASSERT_EQ(c, 3);
  // 2 neurons x fan-out 3 + 3 neurons x fan-out 2, every one of 3 steps
  EXPECT_EQ(r.ops.snn_ops, 3u * (2 * 3 + 3 * 2));
  // fan-in x neurons: 2x2 + 2x3 + 3x2
  EXPECT_EQ(r.ops.ann_ops, 16u);
  EXPECT_EQ(r.ops.input_ops, 3u * 2 * 2);
  const auto recount = count_ops(snn, r.trace);
  EXPECT_EQ(recount.snn_ops, r.ops.snn_ops);
  EXPECT_EQ(recount.ann_ops, r.ops.ann_ops);
}

TEST(Ops, ZeroTraceCountsNothing) {
  const auto snn = convert(saturated_232(), NeuronModel::integrate_fire, ScheduleMode::pipelined);
  SpikeTrace empty;
  empty.time_steps = 3;
  for (const auto& L : snn.layers)
    if (!L.readout) empty.layers.push_back({L.size(), 0, std::vector<std::int8_t>(3 * L.size(), 0), std::vector<int>(L.size(), 0)});
  const auto ops = count_ops(snn, empty);
  EXPECT_EQ(ops.snn_ops, 0u);
  EXPECT_EQ(ops.ratio(), 0.0);
}

TEST(Ops, NegativeSpikesCountLikePositive) {
  // one hidden layer feeding a second one through the sign-flip ordering
  NetworkDef net = NetworkBuilder("flip", {2}, 1).fc(2).quant_relu(2).fc(1).quant_relu(2).fc(2).build();
  net.layers[0].get<Linear>()->weight = Tensor({2, 2}, {1, 0, 0, 1});
  net.layers[2].get<Linear>()->weight = Tensor({1, 2}, {1, -2});
  const auto snn = convert(net, NeuronModel::signed_integrate_fire, ScheduleMode::pipelined);
  const auto r = Simulator(snn).run(std::array{0.6f, 0.4f});
  const auto& L1 = r.trace.layers[1];
  EXPECT_EQ(L1.at(0, 0), 1);
  EXPECT_EQ(L1.at(1, 0), -1);
  // layer 0 emits 3 spikes (fan-out 1 each), layer 1 emits two signed spikes (fan-out 2 each)
  EXPECT_EQ(r.ops.snn_ops, 3u * 1 + 2u * 2);
}

TEST(Ops, ConvFanOutMatchesEnumeration) {
  NetworkDef net = NetworkBuilder("conv", {1, 5, 5}, 1).conv(2, 3, 1, 1).quant_relu(2).conv(3, 3, 2, 0).quant_relu(2).fc(2).build();
  const auto snn = convert(net, NeuronModel::integrate_fire, ScheduleMode::pipelined);
  const auto fo = fan_out(snn, 0);
  // enumerate every (output pixel, tap) pair of the stride-2 convolution
  std::vector<std::uint32_t> ref(2 * 5 * 5, 0);
  for (std::size_t oy = 0; oy < 2; ++oy)
    for (std::size_t ox = 0; ox < 2; ++ox)
      for (std::size_t ky = 0; ky < 3; ++ky)
        for (std::size_t kx = 0; kx < 3; ++kx)
          for (std::size_t c = 0; c < 2; ++c) ref[(c * 5 + oy * 2 + ky) * 5 + ox * 2 + kx] += 3;
  EXPECT_EQ(fo, ref);
}

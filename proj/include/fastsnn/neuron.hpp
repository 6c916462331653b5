#pragma once

#include <cstdint>

namespace fastsnn {

enum class NeuronModel : std::uint32_t { integrate_fire = 0, signed_integrate_fire = 1 };

/// Membrane state of one neuron. `count` is positive minus negative spikes and never drops below 0.
struct NeuronState {
  double potential = 0.0;
  int count = 0;
  int last_spike = 0;  // -1, 0 or +1

  static NeuronState charged(double initial_charge) { return {initial_charge, 0, 0}; }
};

/// Integrate-and-fire with reset by subtraction: V += z; fire +1 and V -= theta when V >= theta.
inline int if_step(NeuronState& s, double charge, double threshold) {
  s.potential += charge;
  if (s.potential >= threshold) {
    s.potential -= threshold;
    ++s.count;
    return s.last_spike = 1;
  }
  return s.last_spike = 0;
}

/// Signed integrate-and-fire. After V += z: fire +1 when V >= theta; otherwise fire -1 (and restore
/// V += theta) when V <= theta' and at least one positive spike is outstanding. At most one spike per
/// step, the positive branch taking priority.
inline int sif_step(NeuronState& s, double charge, double threshold, double neg_threshold) {
  s.potential += charge;
  if (s.potential >= threshold) {
    s.potential -= threshold;
    ++s.count;
    return s.last_spike = 1;
  }
  if (s.potential <= neg_threshold && s.count >= 1) {
    s.potential += threshold;
    --s.count;
    return s.last_spike = -1;
  }
  return s.last_spike = 0;
}

inline int neuron_step(NeuronModel model, NeuronState& s, double charge, double threshold, double neg_threshold) {
  return model == NeuronModel::signed_integrate_fire ? sif_step(s, charge, threshold, neg_threshold)
                                                     : if_step(s, charge, threshold);
}

}  // namespace fastsnn

#pragma once

#include <vector>

#include "sca/tensor.hpp"

namespace sca {

enum class NeuronKind { IF, LIF };

struct NeuronConfig {
    NeuronKind kind = NeuronKind::LIF;
    scalar v_th = scalar(1.0);
    scalar v_reset = scalar(0.0);
    scalar tau_m = scalar(2.0);   // LIF membrane time constant, > 1
    scalar alpha = scalar(4.0);   // surrogate smoothness

    void validate() const;
};

// Charge: IF   h = v_prev + x
//         LIF  h = v_prev + (1/tau_m) * (-(v_prev - v_reset) + x)
Tensor4 charge(const Tensor4& v_prev, const Tensor4& x, const NeuronConfig& cfg);

// Heaviside with the closed convention theta(0) = 1: s = [h >= v_th].
Tensor4 fire(const Tensor4& h, const NeuronConfig& cfg);

// Sigmoid-smoothed spike sigma(alpha * (h - v_th)); gradient-check mode only.
Tensor4 fire_smooth(const Tensor4& h, const NeuronConfig& cfg);

// Hard reset v = h * (1 - s) + v_reset * s. Requires binary s.
Tensor4 reset(const Tensor4& h, const Tensor4& s, const NeuronConfig& cfg);

// Same formula without the binary check, for smoothed spikes.
Tensor4 reset_soft_valued(const Tensor4& h, const Tensor4& s, const NeuronConfig& cfg);

// d(spike)/d(membrane) surrogate: alpha * sigma(alpha u) * (1 - sigma(alpha u)),
// evaluated at u = h - v_th by callers. Exactly even in u.
Tensor4 surrogate_grad(const Tensor4& u, scalar alpha);
scalar surrogate_grad_value(scalar u, scalar alpha);

struct MembraneState {
    Tensor4 v;
    std::vector<Tensor4> h_cache;  // pre-reset potentials per recorded step
    std::vector<Tensor4> s_cache;  // spikes per recorded step

    void init(const Shape4& shape, const NeuronConfig& cfg);
    int recorded_steps() const { return int(h_cache.size()); }
};

// One charge -> fire -> reset step; returns the spike map. The reset always
// uses the spikes produced here, so downstream gating leaves neuron dynamics
// untouched. With record set, (H_t, S_t) are appended for BPTT and scoring.
Tensor4 neuron_step(MembraneState& state, const Tensor4& x, const NeuronConfig& cfg, bool record);

}  // namespace sca

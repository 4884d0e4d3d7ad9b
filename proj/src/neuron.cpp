#include "sca/neuron.hpp"

#include <cmath>

namespace sca {

void NeuronConfig::validate() const {
    if (!(v_th > v_reset)) throw ConfigError("neuron: v_th must exceed v_reset");
    if (kind == NeuronKind::LIF && !(tau_m > scalar(1))) {
        throw ConfigError("neuron: tau_m must be > 1 for LIF");
    }
    if (!(alpha > scalar(0))) throw ConfigError("neuron: alpha must be positive");
}

Tensor4 charge(const Tensor4& v_prev, const Tensor4& x, const NeuronConfig& cfg) {
    require_same_shape(v_prev, x, "charge");
    Tensor4 h = Tensor4::zeros_like(x);
    const scalar* vp = v_prev.data();
    const scalar* xp = x.data();
    scalar* hp = h.data();
    const std::size_t total = x.size();
    if (cfg.kind == NeuronKind::IF) {
        for (std::size_t i = 0; i < total; ++i) hp[i] = vp[i] + xp[i];
    } else {
        const scalar inv_tau = scalar(1) / cfg.tau_m;
        for (std::size_t i = 0; i < total; ++i) {
            hp[i] = vp[i] + inv_tau * (-(vp[i] - cfg.v_reset) + xp[i]);
        }
    }
    SCA_CHECK_FINITE(h, "charge");
    return h;
}

Tensor4 fire(const Tensor4& h, const NeuronConfig& cfg) {
    Tensor4 s = Tensor4::zeros_like(h);
    const scalar* hp = h.data();
    scalar* sp = s.data();
    for (std::size_t i = 0; i < h.size(); ++i) {
        sp[i] = hp[i] >= cfg.v_th ? scalar(1) : scalar(0);
    }
    return s;
}

Tensor4 fire_smooth(const Tensor4& h, const NeuronConfig& cfg) {
    Tensor4 s = Tensor4::zeros_like(h);
    const scalar* hp = h.data();
    scalar* sp = s.data();
    for (std::size_t i = 0; i < h.size(); ++i) {
        const scalar u = cfg.alpha * (hp[i] - cfg.v_th);
        sp[i] = scalar(1) / (scalar(1) + std::exp(-u));
    }
    return s;
}

namespace {

Tensor4 reset_impl(const Tensor4& h, const Tensor4& s, const NeuronConfig& cfg, bool binary) {
    require_same_shape(h, s, "reset");
    Tensor4 v = Tensor4::zeros_like(h);
    const scalar* hp = h.data();
    const scalar* sp = s.data();
    scalar* vp = v.data();
    for (std::size_t i = 0; i < h.size(); ++i) {
        if (binary && sp[i] != scalar(0) && sp[i] != scalar(1)) {
            throw NumericError("reset: non-binary spike value at flat index " + std::to_string(i));
        }
        vp[i] = hp[i] * (scalar(1) - sp[i]) + cfg.v_reset * sp[i];
    }
    return v;
}

}  // namespace

Tensor4 reset(const Tensor4& h, const Tensor4& s, const NeuronConfig& cfg) {
    return reset_impl(h, s, cfg, true);
}

Tensor4 reset_soft_valued(const Tensor4& h, const Tensor4& s, const NeuronConfig& cfg) {
    return reset_impl(h, s, cfg, false);
}

scalar surrogate_grad_value(scalar u, scalar alpha) {
    // alpha * e / (1 + e)^2 with e = exp(-alpha*|u|): symmetric by
    // construction and saturates to 0 without overflow.
    const scalar e = std::exp(-alpha * std::abs(u));
    const scalar d = scalar(1) + e;
    return alpha * e / (d * d);
}

Tensor4 surrogate_grad(const Tensor4& u, scalar alpha) {
    if (!(alpha > scalar(0))) throw ConfigError("surrogate_grad: alpha must be positive");
    Tensor4 g = Tensor4::zeros_like(u);
    const scalar* up = u.data();
    scalar* gp = g.data();
    for (std::size_t i = 0; i < u.size(); ++i) gp[i] = surrogate_grad_value(up[i], alpha);
    return g;
}

void MembraneState::init(const Shape4& shape, const NeuronConfig& cfg) {
    v = Tensor4(shape, cfg.v_reset);
    h_cache.clear();
    s_cache.clear();
}

Tensor4 neuron_step(MembraneState& state, const Tensor4& x, const NeuronConfig& cfg, bool record) {
    Tensor4 h = charge(state.v, x, cfg);
    Tensor4 s = fire(h, cfg);
    state.v = reset(h, s, cfg);
    if (record) {
        state.h_cache.push_back(h);
        state.s_cache.push_back(s);
    }
    return s;
}

}  // namespace sca

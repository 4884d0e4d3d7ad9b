#include "sca/network.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include "sca/rng.hpp"
#include "sca/tensor_io.hpp"

namespace sca {

LayerSpec LayerSpec::conv(int c_out, int k, int stride, int pad, int from) {
    LayerSpec s;
    s.kind = LayerKind::Conv;
    s.conv_out = c_out;
    s.conv_k = k;
    s.conv_stride = stride;
    s.conv_pad = pad < 0 ? (k - 1) / 2 : pad;
    s.input_from = from;
    return s;
}
LayerSpec LayerSpec::batchnorm(int from) {
    LayerSpec s;
    s.kind = LayerKind::BatchNorm;
    s.input_from = from;
    return s;
}
LayerSpec LayerSpec::spiking(const NeuronConfig& cfg, int from) {
    LayerSpec s;
    s.kind = LayerKind::SpikingNeuron;
    s.neuron = cfg;
    s.input_from = from;
    return s;
}
LayerSpec LayerSpec::avgpool2(int from) {
    LayerSpec s;
    s.kind = LayerKind::AvgPool2;
    s.input_from = from;
    return s;
}
LayerSpec LayerSpec::flatten(int from) {
    LayerSpec s;
    s.kind = LayerKind::Flatten;
    s.input_from = from;
    return s;
}
LayerSpec LayerSpec::linear(int out, int from) {
    LayerSpec s;
    s.kind = LayerKind::Linear;
    s.linear_out = out;
    s.input_from = from;
    return s;
}
LayerSpec LayerSpec::add(int from, int joined) {
    LayerSpec s;
    s.kind = LayerKind::Add;
    s.input_from = from;
    s.add_from = joined;
    return s;
}

namespace {

int resolve_producer(const NetworkDef& def, int layer) {
    const int from = def.layers[std::size_t(layer)].input_from;
    if (from == LayerSpec::kPrev) return layer == 0 ? LayerSpec::kInput : layer - 1;
    return from;
}

struct LayerDims {
    int c = 0, h = 0, w = 0;
};

// Walks the graph in order and computes every layer's output dims.
std::vector<LayerDims> infer_shapes(const NetworkDef& def) {
    std::vector<LayerDims> dims(def.layers.size());
    auto input_dims = [&](int li) -> LayerDims {
        int p = resolve_producer(def, li);
        if (p == LayerSpec::kInput) return {def.input_c, def.input_h, def.input_w};
        if (p < 0 || p >= li) {
            throw ConfigError("layer " + std::to_string(li) + ": input_from must reference an earlier layer");
        }
        return dims[std::size_t(p)];
    };
    for (int li = 0; li < int(def.layers.size()); ++li) {
        const LayerSpec& s = def.layers[std::size_t(li)];
        LayerDims in = input_dims(li);
        LayerDims out = in;
        switch (s.kind) {
            case LayerKind::Conv: {
                if (s.conv_out < 1) throw ConfigError("conv layer with no output channels");
                auto [oh, ow] = conv_out_hw(in.h, in.w, s.conv_k, s.conv_stride, s.conv_pad);
                out = {s.conv_out, oh, ow};
                break;
            }
            case LayerKind::BatchNorm:
            case LayerKind::SpikingNeuron:
                break;
            case LayerKind::AvgPool2:
                if (in.h % 2 != 0 || in.w % 2 != 0) {
                    throw ConfigError("avgpool2 at layer " + std::to_string(li) +
                                      " needs even spatial dims, got " + std::to_string(in.h) +
                                      "x" + std::to_string(in.w));
                }
                out = {in.c, in.h / 2, in.w / 2};
                break;
            case LayerKind::Flatten:
                out = {in.c * in.h * in.w, 1, 1};
                break;
            case LayerKind::Linear:
                if (in.h != 1 || in.w != 1) {
                    throw ConfigError("linear layer " + std::to_string(li) +
                                      " requires flattened input");
                }
                out = {s.linear_out, 1, 1};
                break;
            case LayerKind::Add: {
                if (s.add_from < 0 || s.add_from >= li) {
                    throw ConfigError("add layer " + std::to_string(li) + ": bad add_from");
                }
                LayerDims other = dims[std::size_t(s.add_from)];
                if (other.c != in.c || other.h != in.h || other.w != in.w) {
                    throw ConfigError("add layer " + std::to_string(li) +
                                      ": stream shapes disagree");
                }
                break;
            }
        }
        dims[std::size_t(li)] = out;
    }
    return dims;
}

std::vector<std::vector<int>> build_consumers(const NetworkDef& def) {
    std::vector<std::vector<int>> cons(def.layers.size());
    for (int li = 0; li < int(def.layers.size()); ++li) {
        int p = resolve_producer(def, li);
        if (p >= 0) cons[std::size_t(p)].push_back(li);
        const LayerSpec& s = def.layers[std::size_t(li)];
        if (s.kind == LayerKind::Add && s.add_from >= 0) {
            cons[std::size_t(s.add_from)].push_back(li);
        }
    }
    return cons;
}

// True if zeroing this SN's output channel would reach a residual join
// without first passing through a Conv/Linear — gating there would corrupt
// the joined stream, so such convs stay unprunable.
bool leaks_into_add(const NetworkDef& def, const std::vector<std::vector<int>>& cons, int sn) {
    std::vector<int> stack = cons[std::size_t(sn)];
    std::vector<char> seen(def.layers.size(), 0);
    while (!stack.empty()) {
        int li = stack.back();
        stack.pop_back();
        if (seen[std::size_t(li)]) continue;
        seen[std::size_t(li)] = 1;
        switch (def.layers[std::size_t(li)].kind) {
            case LayerKind::Add:
                return true;
            case LayerKind::Conv:
            case LayerKind::Linear:
                break;  // the channel dissolves into weights here
            default:
                for (int c : cons[std::size_t(li)]) stack.push_back(c);
        }
    }
    return false;
}

}  // namespace

void NetworkDef::validate() const {
    if (layers.empty()) throw ConfigError("network has no layers");
    if (t_steps < 1) throw ConfigError("t_steps must be >= 1");
    if (input_c < 1 || input_h < 1 || input_w < 1) throw ConfigError("bad input dims");
    if (layers.back().kind != LayerKind::Linear) {
        throw ConfigError("final layer must be Linear");
    }
    for (int li = 0; li < int(layers.size()); ++li) {
        if (layers[std::size_t(li)].kind == LayerKind::Linear && li != int(layers.size()) - 1) {
            throw ConfigError("Linear is only supported as the final layer");
        }
        if (layers[std::size_t(li)].kind == LayerKind::Add && block_style == BlockStyle::Plain) {
            throw ConfigError("plain networks cannot contain Add layers");
        }
        layers[std::size_t(li)].neuron.validate();
    }
    auto cons = build_consumers(*this);
    for (int li = 0; li < int(layers.size()); ++li) {
        const LayerSpec& s = layers[std::size_t(li)];
        if (s.kind != LayerKind::Conv) continue;
        const auto& cl = cons[std::size_t(li)];
        if (block_style == BlockStyle::Plain) {
            // Plain chains: every conv is governed by the BN/SN right after it.
            bool ok = cl.size() == 1 && layers[std::size_t(cl[0])].kind == LayerKind::BatchNorm;
            if (ok) {
                const auto& cb = cons[std::size_t(cl[0])];
                ok = cb.size() == 1 && layers[std::size_t(cb[0])].kind == LayerKind::SpikingNeuron;
            }
            if (!ok) {
                throw ConfigError("conv layer " + std::to_string(li) +
                                  " has no governing BN/SN pair");
            }
        } else {
            bool ok = cl.size() >= 1;
            for (int c : cl) {
                auto k = layers[std::size_t(c)].kind;
                ok = ok && (k == LayerKind::BatchNorm || k == LayerKind::Add);
            }
            if (!ok) {
                throw ConfigError("conv layer " + std::to_string(li) +
                                  " must feed a BN or a residual join");
            }
        }
    }
    infer_shapes(*this);
}

std::vector<PrunableUnit> map_prunable_channels(const NetworkDef& def) {
    auto cons = build_consumers(def);
    std::vector<PrunableUnit> units;
    for (int li = 0; li < int(def.layers.size()); ++li) {
        if (def.layers[std::size_t(li)].kind != LayerKind::Conv) continue;
        const auto& cl = cons[std::size_t(li)];
        if (cl.size() == 1 && def.layers[std::size_t(cl[0])].kind == LayerKind::BatchNorm) {
            const int bn = cl[0];
            const auto& cb = cons[std::size_t(bn)];
            if (cb.size() == 1 && def.layers[std::size_t(cb[0])].kind == LayerKind::SpikingNeuron) {
                const int sn = cb[0];
                if (!leaks_into_add(def, cons, sn)) {
                    units.push_back({li, bn, sn, true});
                }
            }
            continue;
        }
        // Pre-activation: a branch conv feeding the join is governed by the
        // BN1/SN1 that read the joined stream in the next block.
        if (def.block_style == BlockStyle::PreActResidual && cl.size() == 1 &&
            def.layers[std::size_t(cl[0])].kind == LayerKind::Add) {
            const int p = resolve_producer(def, li);
            if (p < 0 || def.layers[std::size_t(p)].kind != LayerKind::SpikingNeuron) {
                continue;  // shortcut conv, not a branch tail
            }
            const int join = cl[0];
            int bn = -1;
            std::vector<int> stack = cons[std::size_t(join)];
            while (!stack.empty() && bn < 0) {
                int c = stack.back();
                stack.pop_back();
                switch (def.layers[std::size_t(c)].kind) {
                    case LayerKind::BatchNorm:
                        bn = c;
                        break;
                    case LayerKind::AvgPool2:
                        for (int cc : cons[std::size_t(c)]) stack.push_back(cc);
                        break;
                    default:
                        break;
                }
            }
            if (bn < 0) continue;  // network tail: no following block
            const auto& cb = cons[std::size_t(bn)];
            if (cb.size() == 1 && def.layers[std::size_t(cb[0])].kind == LayerKind::SpikingNeuron &&
                !leaks_into_add(def, cons, cb[0])) {
                units.push_back({li, bn, cb[0], false});
            }
        }
    }
    return units;
}

NetworkDef parse_architecture(const std::string& arch, BlockStyle style, int t_steps,
                              int input_c, int input_h, int input_w, const NeuronConfig& cfg) {
    if (style != BlockStyle::Plain) {
        throw ConfigError("architecture strings describe plain chains only");
    }
    NetworkDef def;
    def.block_style = style;
    def.t_steps = t_steps;
    def.input_c = input_c;
    def.input_h = input_h;
    def.input_w = input_w;

    std::vector<std::string> tokens;
    std::string cur;
    for (char ch : arch) {
        if (ch == '-') {
            tokens.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(ch);
        }
    }
    tokens.push_back(cur);

    bool saw_fc = false;
    for (const auto& tok : tokens) {
        if (tok.empty()) throw ConfigError("architecture: empty token in '" + arch + "'");
        if (saw_fc) throw ConfigError("architecture: tokens after the FC head");
        if (tok == "AP2") {
            def.layers.push_back(LayerSpec::avgpool2());
            continue;
        }
        auto cpos = tok.find('C');
        if (cpos != std::string::npos && cpos > 0 && cpos + 1 < tok.size()) {
            int c_out = 0, k = 0;
            auto r1 = std::from_chars(tok.data(), tok.data() + cpos, c_out);
            auto r2 = std::from_chars(tok.data() + cpos + 1, tok.data() + tok.size(), k);
            if (r1.ec == std::errc() && r2.ec == std::errc() && r1.ptr == tok.data() + cpos &&
                r2.ptr == tok.data() + tok.size() && c_out > 0 && k > 0) {
                def.layers.push_back(LayerSpec::conv(c_out, k));
                def.layers.push_back(LayerSpec::batchnorm());
                def.layers.push_back(LayerSpec::spiking(cfg));
                continue;
            }
        }
        if (tok.size() > 2 && tok.substr(tok.size() - 2) == "FC") {
            int out = 0;
            auto r = std::from_chars(tok.data(), tok.data() + tok.size() - 2, out);
            if (r.ec == std::errc() && r.ptr == tok.data() + tok.size() - 2 && out > 0) {
                def.layers.push_back(LayerSpec::flatten());
                def.layers.push_back(LayerSpec::linear(out));
                saw_fc = true;
                continue;
            }
        }
        throw ConfigError("architecture: cannot parse token '" + tok + "'");
    }
    if (!saw_fc) throw ConfigError("architecture must end in an FC head");
    def.validate();
    return def;
}

std::string format_architecture(const NetworkDef& def) {
    if (def.block_style != BlockStyle::Plain) {
        throw ConfigError("only plain chains have an architecture string");
    }
    std::ostringstream os;
    bool first = true;
    auto sep = [&]() {
        if (!first) os << "-";
        first = false;
    };
    for (const auto& s : def.layers) {
        switch (s.kind) {
            case LayerKind::Conv:
                sep();
                os << s.conv_out << "C" << s.conv_k;
                break;
            case LayerKind::AvgPool2:
                sep();
                os << "AP2";
                break;
            case LayerKind::Linear:
                sep();
                os << s.linear_out << "FC";
                break;
            default:
                break;
        }
    }
    return os.str();
}

NetworkDef residual_network_def(BlockStyle style, int stem_channels,
                                const std::vector<ResidualStage>& stages, int tail_pools,
                                int classes, int t_steps, int input_c, int input_h, int input_w,
                                const NeuronConfig& cfg) {
    if (style == BlockStyle::Plain) throw ConfigError("residual builder needs a residual style");
    NetworkDef def;
    def.block_style = style;
    def.t_steps = t_steps;
    def.input_c = input_c;
    def.input_h = input_h;
    def.input_w = input_w;
    auto& L = def.layers;

    L.push_back(LayerSpec::conv(stem_channels, 3));
    if (style == BlockStyle::PostActResidual) {
        L.push_back(LayerSpec::batchnorm());
        L.push_back(LayerSpec::spiking(cfg));
    }
    int tip = int(L.size()) - 1;  // layer producing the current trunk
    int channels = stem_channels;

    for (const auto& stage : stages) {
        for (int b = 0; b < stage.blocks; ++b) {
            const int stride = b == 0 ? stage.stride : 1;
            const bool reshape = stride != 1 || channels != stage.channels;
            if (style == BlockStyle::PostActResidual) {
                L.push_back(LayerSpec::conv(stage.channels, 3, stride, 1, tip));
                L.push_back(LayerSpec::batchnorm());
                L.push_back(LayerSpec::spiking(cfg));
                L.push_back(LayerSpec::conv(stage.channels, 3, 1, 1));
                L.push_back(LayerSpec::batchnorm());
                int branch = int(L.size()) - 1;
                int shortcut = tip;
                if (reshape) {
                    L.push_back(LayerSpec::conv(stage.channels, 1, stride, 0, tip));
                    shortcut = int(L.size()) - 1;
                }
                L.push_back(LayerSpec::add(branch, shortcut));
                L.push_back(LayerSpec::spiking(cfg));
            } else {
                L.push_back(LayerSpec::batchnorm(tip));
                L.push_back(LayerSpec::spiking(cfg));
                L.push_back(LayerSpec::conv(stage.channels, 3, stride, 1));
                L.push_back(LayerSpec::batchnorm());
                L.push_back(LayerSpec::spiking(cfg));
                L.push_back(LayerSpec::conv(stage.channels, 3, 1, 1));
                int branch = int(L.size()) - 1;
                int shortcut = tip;
                if (reshape) {
                    L.push_back(LayerSpec::conv(stage.channels, 1, stride, 0, tip));
                    shortcut = int(L.size()) - 1;
                }
                L.push_back(LayerSpec::add(branch, shortcut));
            }
            tip = int(L.size()) - 1;
            channels = stage.channels;
        }
    }
    for (int i = 0; i < tail_pools; ++i) L.push_back(LayerSpec::avgpool2());
    L.push_back(LayerSpec::flatten());
    L.push_back(LayerSpec::linear(classes));
    def.validate();
    return def;
}

int Network::producer_of(int layer) const {
    return resolve_producer(def, layer);
}

Network build_network(const NetworkDef& def, std::uint64_t seed) {
    def.validate();
    Network net;
    net.def = def;
    net.mapping = map_prunable_channels(def);
    net.layers.resize(def.layers.size());

    auto dims = infer_shapes(def);
    SplitMix64 rng(derive_seed(seed, 0xA11C));

    for (int li = 0; li < int(def.layers.size()); ++li) {
        Layer& layer = net.layers[std::size_t(li)];
        layer.spec = def.layers[std::size_t(li)];
        int p = resolve_producer(def, li);
        LayerDims in = p == LayerSpec::kInput ? LayerDims{def.input_c, def.input_h, def.input_w}
                                              : dims[std::size_t(p)];
        layer.in_c = in.c;
        layer.in_h = in.h;
        layer.in_w = in.w;
        layer.out_c = dims[std::size_t(li)].c;
        layer.out_h = dims[std::size_t(li)].h;
        layer.out_w = dims[std::size_t(li)].w;

        switch (layer.spec.kind) {
            case LayerKind::Conv: {
                const int k = layer.spec.conv_k;
                layer.weight = Tensor4(layer.spec.conv_out, in.c, k, k);
                const double bound = std::sqrt(6.0 / (double(in.c) * k * k));
                for (std::size_t i = 0; i < layer.weight.size(); ++i) {
                    layer.weight.data()[i] = scalar(rng.uniform(-bound, bound));
                }
                break;
            }
            case LayerKind::Linear: {
                layer.weight = Tensor4(layer.spec.linear_out, in.c, 1, 1);
                const double bound = std::sqrt(6.0 / double(in.c));
                for (std::size_t i = 0; i < layer.weight.size(); ++i) {
                    layer.weight.data()[i] = scalar(rng.uniform(-bound, bound));
                }
                break;
            }
            case LayerKind::BatchNorm:
                layer.bn = BNParams(in.c);
                break;
            default:
                break;
        }
    }
    return net;
}

ChannelMask ChannelMask::ones_for(const Network& net) {
    ChannelMask mask;
    mask.m.reserve(net.mapping.size());
    for (const auto& u : net.mapping) {
        mask.m.emplace_back(std::size_t(net.layers[std::size_t(u.conv)].out_c), std::uint8_t(1));
    }
    return mask;
}

int ChannelMask::total_channels() const {
    int t = 0;
    for (const auto& v : m) t += int(v.size());
    return t;
}

int ChannelMask::dead_channels() const {
    int d = 0;
    for (const auto& v : m) {
        for (auto b : v) d += (b == 0);
    }
    return d;
}

double ChannelMask::sparsity() const {
    const int t = total_channels();
    return t == 0 ? 0.0 : double(dead_channels()) / double(t);
}

int ChannelMask::alive_in_unit(int u) const {
    int a = 0;
    for (auto b : m[std::size_t(u)]) a += (b != 0);
    return a;
}

std::int64_t SynopsCounter::per_sample() const {
    if (samples == 0) return 0;
    return std::llround(weighted / double(samples));
}

namespace {

void validate_mask(const Network& net, const ChannelMask& mask) {
    if (mask.m.size() != net.mapping.size()) {
        throw ShapeError("mask has " + std::to_string(mask.m.size()) + " units, network has " +
                         std::to_string(net.mapping.size()));
    }
    for (std::size_t u = 0; u < mask.m.size(); ++u) {
        const int c = net.layers[std::size_t(net.mapping[u].conv)].out_c;
        if (int(mask.m[u].size()) != c) {
            throw ShapeError("mask unit " + std::to_string(u) + " has " +
                             std::to_string(mask.m[u].size()) + " channels, conv has " +
                             std::to_string(c));
        }
    }
}

// unit index gating each SN layer's output, or -1
std::vector<int> gate_units(const Network& net) {
    std::vector<int> g(net.layers.size(), -1);
    for (int u = 0; u < int(net.mapping.size()); ++u) {
        g[std::size_t(net.mapping[std::size_t(u)].sn)] = u;
    }
    return g;
}

std::vector<int> conv_units(const Network& net) {
    std::vector<int> g(net.layers.size(), -1);
    for (int u = 0; u < int(net.mapping.size()); ++u) {
        g[std::size_t(net.mapping[std::size_t(u)].conv)] = u;
    }
    return g;
}

void zero_dead_channels(Tensor4& t, const std::vector<std::uint8_t>& alive) {
    const int hw = t.h() * t.w();
    for (int n = 0; n < t.n(); ++n) {
        for (int c = 0; c < t.c(); ++c) {
            if (!alive[std::size_t(c)]) {
                std::memset(t.plane(n, c), 0, std::size_t(hw) * sizeof(scalar));
            }
        }
    }
}

Tensor4 flatten_tensor(const Tensor4& x) {
    Tensor4 y(x.n(), x.c() * x.h() * x.w(), 1, 1);
    std::memcpy(y.data(), x.data(), x.size() * sizeof(scalar));
    return y;
}

Tensor4 unflatten_tensor(const Tensor4& d, int c, int h, int w) {
    Tensor4 y(d.n(), c, h, w);
    std::memcpy(y.data(), d.data(), d.size() * sizeof(scalar));
    return y;
}

void add_into(Tensor4& dst, const Tensor4& src) {
    if (dst.empty()) {
        dst = src;
        return;
    }
    require_same_shape(dst, src, "gradient accumulation");
    scalar* d = dst.data();
    const scalar* s = src.data();
    for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

}  // namespace

ForwardTrace forward_T(Network& net, const ChannelMask* mask,
                       const std::vector<Tensor4>& input_steps, const ForwardOptions& opt) {
    const int T = net.def.t_steps;
    if (int(input_steps.size()) != T) {
        throw ShapeError("incomplete batch: got " + std::to_string(input_steps.size()) +
                         " step tensors, network has T=" + std::to_string(T));
    }
    const Shape4 in_shape{input_steps[0].n(), net.def.input_c, net.def.input_h, net.def.input_w};
    for (const auto& x : input_steps) {
        if (x.shape() != in_shape) {
            throw ShapeError("input step shape " + x.shape().str() + " != expected " +
                             in_shape.str());
        }
    }
    if (opt.smooth_fire && kScalarBits != 64) {
        throw ConfigError("gradient-check mode requires the 64-bit build");
    }
    if (mask != nullptr) validate_mask(net, *mask);

    const int L = int(net.layers.size());
    const auto gates = gate_units(net);
    const auto cunits = conv_units(net);
    const bool retain = opt.mode != RunMode::Eval;

    ForwardTrace trace;
    trace.train = opt.mode == RunMode::Train || opt.mode == RunMode::Score;
    trace.smooth = opt.smooth_fire;
    trace.t_steps = T;
    trace.outputs.resize(std::size_t(L));
    trace.sn.resize(std::size_t(L));
    trace.bn_cache.resize(std::size_t(L));
    trace.input = input_steps;

    const BNMode bn_mode = opt.mode == RunMode::Train  ? BNMode::Train
                           : opt.mode == RunMode::Eval ? BNMode::Eval
                                                       : BNMode::Score;

    for (int li = 0; li < L; ++li) {
        Layer& layer = net.layers[std::size_t(li)];
        const int p = net.producer_of(li);
        const std::vector<Tensor4>& in_seq =
            p == LayerSpec::kInput ? trace.input : trace.outputs[std::size_t(p)];
        auto& out_seq = trace.outputs[std::size_t(li)];
        out_seq.resize(std::size_t(T));

        switch (layer.spec.kind) {
            case LayerKind::Conv: {
                if (opt.synops != nullptr) {
                    const int alive = (mask != nullptr && cunits[std::size_t(li)] >= 0)
                                          ? mask->alive_in_unit(cunits[std::size_t(li)])
                                          : layer.out_c;
                    const double fan_out = double(layer.spec.conv_k) * layer.spec.conv_k * alive /
                                           (double(layer.spec.conv_stride) * layer.spec.conv_stride);
                    for (const auto& x : in_seq) {
                        opt.synops->weighted += double(count_nonzero(x)) * fan_out;
                    }
                }
                for (int t = 0; t < T; ++t) {
                    out_seq[std::size_t(t)] = conv2d_forward(in_seq[std::size_t(t)], layer.weight,
                                                             layer.spec.conv_stride,
                                                             layer.spec.conv_pad);
                }
                break;
            }
            case LayerKind::BatchNorm: {
                trace.bn_cache[std::size_t(li)] =
                    batchnorm_forward(std::span<const Tensor4>(in_seq), layer.bn, bn_mode,
                                      std::span<Tensor4>(out_seq));
                break;
            }
            case LayerKind::SpikingNeuron: {
                const NeuronConfig& cfg = layer.spec.neuron;
                MembraneState st;
                st.init(in_seq[0].shape(), cfg);
                const int gate = gates[std::size_t(li)];
                const std::vector<std::uint8_t>* alive =
                    (mask != nullptr && gate >= 0) ? &mask->m[std::size_t(gate)] : nullptr;
                for (int t = 0; t < T; ++t) {
                    Tensor4 h = charge(st.v, in_seq[std::size_t(t)], cfg);
                    Tensor4 s = opt.smooth_fire ? fire_smooth(h, cfg) : fire(h, cfg);
                    st.v = opt.smooth_fire ? reset_soft_valued(h, s, cfg) : reset(h, s, cfg);
                    Tensor4 out = s;
                    if (alive != nullptr) zero_dead_channels(out, *alive);
                    if (retain) {
                        trace.sn[std::size_t(li)].h.push_back(std::move(h));
                        trace.sn[std::size_t(li)].s_raw.push_back(std::move(s));
                    }
                    out_seq[std::size_t(t)] = std::move(out);
                }
                break;
            }
            case LayerKind::AvgPool2:
                for (int t = 0; t < T; ++t) {
                    out_seq[std::size_t(t)] = avgpool2_forward(in_seq[std::size_t(t)]);
                }
                break;
            case LayerKind::Flatten:
                for (int t = 0; t < T; ++t) {
                    out_seq[std::size_t(t)] = flatten_tensor(in_seq[std::size_t(t)]);
                }
                break;
            case LayerKind::Linear: {
                if (opt.synops != nullptr) {
                    for (const auto& x : in_seq) {
                        opt.synops->weighted +=
                            double(count_nonzero(x)) * double(layer.spec.linear_out);
                    }
                }
                for (int t = 0; t < T; ++t) {
                    out_seq[std::size_t(t)] = linear_forward(in_seq[std::size_t(t)], layer.weight);
                }
                break;
            }
            case LayerKind::Add: {
                const auto& other = trace.outputs[std::size_t(layer.spec.add_from)];
                for (int t = 0; t < T; ++t) {
                    Tensor4 y = in_seq[std::size_t(t)];
                    require_same_shape(y, other[std::size_t(t)], "residual add");
                    scalar* yp = y.data();
                    const scalar* op = other[std::size_t(t)].data();
                    for (std::size_t i = 0; i < y.size(); ++i) yp[i] += op[i];
                    out_seq[std::size_t(t)] = std::move(y);
                }
                break;
            }
        }
    }

    // Classifier readout: mean over steps of the final linear outputs.
    const auto& head = trace.outputs[std::size_t(L - 1)];
    trace.logits = Tensor4(head[0].n(), head[0].c(), 1, 1);
    {
        scalar* lp = trace.logits.data();
        const scalar inv_t = scalar(1) / scalar(T);
        for (int t = 0; t < T; ++t) {
            const scalar* hp = head[std::size_t(t)].data();
            for (std::size_t i = 0; i < trace.logits.size(); ++i) lp[i] += hp[i];
        }
        for (std::size_t i = 0; i < trace.logits.size(); ++i) lp[i] *= inv_t;
    }
    if (opt.synops != nullptr) opt.synops->samples += in_shape.n;

    if (!retain) {
        trace.outputs.clear();
        trace.sn.clear();
        trace.bn_cache.clear();
        trace.input.clear();
    }
    return trace;
}

void Gradients::init_for(const Network& net) {
    d_weight.assign(net.layers.size(), Tensor4());
    d_gamma.assign(net.layers.size(), {});
    d_beta.assign(net.layers.size(), {});
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Layer& layer = net.layers[li];
        if (layer.spec.kind == LayerKind::Conv || layer.spec.kind == LayerKind::Linear) {
            d_weight[li] = Tensor4::zeros_like(layer.weight);
        } else if (layer.spec.kind == LayerKind::BatchNorm) {
            d_gamma[li].assign(std::size_t(layer.bn.channels()), scalar(0));
            d_beta[li].assign(std::size_t(layer.bn.channels()), scalar(0));
        }
    }
}

Gradients backward_T(const Network& net, const ForwardTrace& trace, const Tensor4& d_logits,
                     std::vector<std::vector<Tensor4>>* conv_dout_tap) {
    if (!trace.train || trace.outputs.empty()) {
        throw Error("backward_T: missing train-mode trace");
    }
    const int T = trace.t_steps;
    const int L = int(net.layers.size());
    if (d_logits.n() != trace.logits.n() || d_logits.c() != trace.logits.c()) {
        throw ShapeError("backward_T: d_logits shape " + d_logits.shape().str() +
                         " vs logits " + trace.logits.shape().str());
    }

    Gradients grads;
    grads.init_for(net);
    if (conv_dout_tap != nullptr) {
        conv_dout_tap->assign(std::size_t(L), {});
    }

    // dbuf[li][t]: gradient w.r.t. layer li's output at step t (lazy).
    std::vector<std::vector<Tensor4>> dbuf(std::size_t(L));
    for (auto& v : dbuf) v.resize(std::size_t(T));

    {
        // logits = mean over t of head outputs
        Tensor4 per_step = d_logits;
        scalar* p = per_step.data();
        for (std::size_t i = 0; i < per_step.size(); ++i) p[i] /= scalar(T);
        for (int t = 0; t < T; ++t) dbuf[std::size_t(L - 1)][std::size_t(t)] = per_step;
    }

    auto send_to = [&](int producer, int t, Tensor4&& g) {
        if (producer == LayerSpec::kInput) return;  // input needs no gradient
        add_into(dbuf[std::size_t(producer)][std::size_t(t)], g);
    };

    for (int li = L - 1; li >= 0; --li) {
        auto& d_seq = dbuf[std::size_t(li)];
        bool any = false;
        for (const auto& d : d_seq) any = any || !d.empty();
        if (!any) continue;
        for (int t = 0; t < T; ++t) {
            if (d_seq[std::size_t(t)].empty()) {
                // untouched step: zero gradient
                Shape4 s{trace.outputs[std::size_t(li)][std::size_t(t)].shape()};
                d_seq[std::size_t(t)] = Tensor4(s);
            }
        }

        const Layer& layer = net.layers[std::size_t(li)];
        const int p = net.producer_of(li);
        const std::vector<Tensor4>& in_seq =
            p == LayerSpec::kInput ? trace.input : trace.outputs[std::size_t(p)];

        switch (layer.spec.kind) {
            case LayerKind::Conv: {
                if (conv_dout_tap != nullptr) (*conv_dout_tap)[std::size_t(li)] = d_seq;
                const bool want_dx = p != LayerSpec::kInput;
                for (int t = 0; t < T; ++t) {
                    Tensor4 dx;
                    conv2d_backward(in_seq[std::size_t(t)], layer.weight, layer.spec.conv_stride,
                                    layer.spec.conv_pad, d_seq[std::size_t(t)],
                                    want_dx ? &dx : nullptr, grads.d_weight[std::size_t(li)]);
                    if (want_dx) send_to(p, t, std::move(dx));
                }
                break;
            }
            case LayerKind::BatchNorm: {
                std::vector<Tensor4> dxs(std::size_t(T));
                batchnorm_backward(std::span<const Tensor4>(in_seq),
                                   trace.bn_cache[std::size_t(li)], layer.bn,
                                   std::span<const Tensor4>(d_seq), std::span<Tensor4>(dxs),
                                   grads.d_gamma[std::size_t(li)], grads.d_beta[std::size_t(li)]);
                for (int t = 0; t < T; ++t) send_to(p, t, std::move(dxs[std::size_t(t)]));
                break;
            }
            case LayerKind::SpikingNeuron: {
                const NeuronConfig& cfg = layer.spec.neuron;
                const SNTrace& snt = trace.sn[std::size_t(li)];
                if (int(snt.h.size()) != T) throw Error("backward_T: incomplete neuron trace");
                const scalar dxdh =
                    cfg.kind == NeuronKind::IF ? scalar(1) : scalar(1) / cfg.tau_m;
                const scalar dvdh =
                    cfg.kind == NeuronKind::IF ? scalar(1) : scalar(1) - scalar(1) / cfg.tau_m;
                Tensor4 d_v;  // gradient flowing into V_t from step t+1
                for (int t = T - 1; t >= 0; --t) {
                    const Tensor4& h = snt.h[std::size_t(t)];
                    const Tensor4& s = snt.s_raw[std::size_t(t)];
                    const Tensor4& ds = d_seq[std::size_t(t)];  // straight-through past the gate
                    Tensor4 dx = Tensor4::zeros_like(h);
                    const bool have_dv = !d_v.empty();
                    Tensor4 d_v_next = Tensor4::zeros_like(h);
                    const scalar* hp = h.data();
                    const scalar* sp = s.data();
                    const scalar* dsp = ds.data();
                    const scalar* dvp = have_dv ? d_v.data() : nullptr;
                    scalar* dxp = dx.data();
                    scalar* dvn = d_v_next.data();
                    const std::size_t total = h.size();
                    if (trace.smooth) {
                        // fully differentiable reset: v = h(1-s) + v_reset*s
                        for (std::size_t i = 0; i < total; ++i) {
                            const scalar g = surrogate_grad_value(hp[i] - cfg.v_th, cfg.alpha);
                            scalar dh = dsp[i] * g;
                            if (have_dv) {
                                dh += dvp[i] * ((scalar(1) - sp[i]) + (cfg.v_reset - hp[i]) * g);
                            }
                            dxp[i] = dh * dxdh;
                            dvn[i] = dh * dvdh;
                        }
                    } else {
                        // detached reset: d v / d h = (1 - s) with s constant
                        for (std::size_t i = 0; i < total; ++i) {
                            const scalar g = surrogate_grad_value(hp[i] - cfg.v_th, cfg.alpha);
                            scalar dh = dsp[i] * g;
                            if (have_dv) dh += dvp[i] * (scalar(1) - sp[i]);
                            dxp[i] = dh * dxdh;
                            dvn[i] = dh * dvdh;
                        }
                    }
                    d_v = std::move(d_v_next);
                    send_to(p, t, std::move(dx));
                }
                break;
            }
            case LayerKind::AvgPool2:
                for (int t = 0; t < T; ++t) {
                    send_to(p, t, avgpool2_backward(d_seq[std::size_t(t)]));
                }
                break;
            case LayerKind::Flatten: {
                for (int t = 0; t < T; ++t) {
                    const Tensor4& x = in_seq[std::size_t(t)];
                    send_to(p, t, unflatten_tensor(d_seq[std::size_t(t)], x.c(), x.h(), x.w()));
                }
                break;
            }
            case LayerKind::Linear: {
                const bool want_dx = p != LayerSpec::kInput;
                for (int t = 0; t < T; ++t) {
                    Tensor4 dx;
                    linear_backward(in_seq[std::size_t(t)], layer.weight, d_seq[std::size_t(t)],
                                    want_dx ? &dx : nullptr, grads.d_weight[std::size_t(li)]);
                    if (want_dx) send_to(p, t, std::move(dx));
                }
                break;
            }
            case LayerKind::Add: {
                for (int t = 0; t < T; ++t) {
                    Tensor4 copy = d_seq[std::size_t(t)];
                    send_to(layer.spec.add_from, t, std::move(copy));
                    send_to(p, t, std::move(d_seq[std::size_t(t)]));
                }
                break;
            }
        }
        // free this layer's buffers early
        d_seq.clear();
    }
    return grads;
}

namespace {

// Walks producers through channel-preserving layers; returns the unit index
// of the first gated SN met, or -1 when the stream is ungated (full width).
int upstream_gate_unit(const Network& net, const std::vector<int>& gates, int from_layer) {
    int p = from_layer;
    while (p >= 0) {
        const Layer& layer = net.layers[std::size_t(p)];
        switch (layer.spec.kind) {
            case LayerKind::SpikingNeuron:
                if (gates[std::size_t(p)] >= 0) return gates[std::size_t(p)];
                p = net.producer_of(p);
                break;
            case LayerKind::BatchNorm:
            case LayerKind::AvgPool2:
                p = net.producer_of(p);
                break;
            default:
                return -1;
        }
    }
    return -1;
}

}  // namespace

ParamCount count_params(const Network& net, const ChannelMask& mask) {
    validate_mask(net, mask);
    const auto gates = gate_units(net);
    const auto cunits = conv_units(net);
    ParamCount pc;

    for (int li = 0; li < int(net.layers.size()); ++li) {
        const Layer& layer = net.layers[std::size_t(li)];
        switch (layer.spec.kind) {
            case LayerKind::Conv: {
                pc.total += std::int64_t(layer.weight.size());
                const int unit = cunits[std::size_t(li)];
                const std::int64_t out_alive = unit >= 0 ? mask.alive_in_unit(unit) : layer.out_c;
                const int in_unit = upstream_gate_unit(net, gates, net.producer_of(li));
                const std::int64_t in_alive =
                    in_unit >= 0 ? mask.alive_in_unit(in_unit) : layer.in_c;
                pc.alive += out_alive * in_alive * layer.spec.conv_k * layer.spec.conv_k;
                break;
            }
            case LayerKind::Linear: {
                pc.total += std::int64_t(layer.weight.size());
                // classifier rows always survive; input features follow the
                // upstream channels
                const int p = net.producer_of(li);
                std::int64_t in_alive = layer.in_c;
                if (p >= 0 && net.layers[std::size_t(p)].spec.kind == LayerKind::Flatten) {
                    const Layer& fl = net.layers[std::size_t(p)];
                    const int in_unit = upstream_gate_unit(net, gates, net.producer_of(p));
                    if (in_unit >= 0) {
                        in_alive = std::int64_t(mask.alive_in_unit(in_unit)) * fl.in_h * fl.in_w;
                    }
                }
                pc.alive += std::int64_t(layer.spec.linear_out) * in_alive;
                break;
            }
            case LayerKind::BatchNorm: {
                pc.total += 2 * layer.bn.channels();
                int unit = -1;
                for (int u = 0; u < int(net.mapping.size()); ++u) {
                    if (net.mapping[std::size_t(u)].bn == li) unit = u;
                }
                pc.alive += 2 * (unit >= 0 ? mask.alive_in_unit(unit) : layer.bn.channels());
                break;
            }
            default:
                break;
        }
    }
    return pc;
}

namespace {

std::string format_float(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string layer_file(int li, const char* what) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "L%03d_%s.scat", li, what);
    return buf;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Network& net,
                     const ChannelMask& mask, int epoch, std::uint64_t seed) {
    validate_mask(net, mask);
    std::filesystem::create_directories(dir);
    std::ofstream mf(dir / "manifest.txt", std::ios::trunc);
    if (!mf) throw IoError("cannot write manifest in '" + dir.string() + "'");
    const NeuronConfig* cfg = nullptr;
    for (const auto& layer : net.layers) {
        if (layer.spec.kind == LayerKind::SpikingNeuron) {
            cfg = &layer.spec.neuron;
            break;
        }
    }
    if (cfg == nullptr) throw ConfigError("network has no spiking layer");
    mf << "arch = " << format_architecture(net.def) << "\n";
    mf << "t_steps = " << net.def.t_steps << "\n";
    mf << "seed = " << seed << "\n";
    mf << "epoch = " << epoch << "\n";
    mf << "sparsity = " << format_float(mask.sparsity()) << "\n";
    mf << "input_c = " << net.def.input_c << "\n";
    mf << "input_h = " << net.def.input_h << "\n";
    mf << "input_w = " << net.def.input_w << "\n";
    mf << "neuron = " << (cfg->kind == NeuronKind::IF ? "IF" : "LIF") << "\n";
    mf << "v_th = " << format_float(double(cfg->v_th)) << "\n";
    mf << "v_reset = " << format_float(double(cfg->v_reset)) << "\n";
    mf << "tau_m = " << format_float(double(cfg->tau_m)) << "\n";
    mf << "alpha = " << format_float(double(cfg->alpha)) << "\n";
    mf.close();

    for (int li = 0; li < int(net.layers.size()); ++li) {
        const Layer& layer = net.layers[std::size_t(li)];
        switch (layer.spec.kind) {
            case LayerKind::Conv:
                save_tensor(dir / layer_file(li, "conv_weight"), layer.weight);
                break;
            case LayerKind::Linear:
                save_tensor(dir / layer_file(li, "linear_weight"), layer.weight);
                break;
            case LayerKind::BatchNorm:
                save_vector(dir / layer_file(li, "bn_gamma"), layer.bn.gamma);
                save_vector(dir / layer_file(li, "bn_beta"), layer.bn.beta);
                save_vector(dir / layer_file(li, "bn_rmean"), layer.bn.running_mean);
                save_vector(dir / layer_file(li, "bn_rvar"), layer.bn.running_var);
                break;
            default:
                break;
        }
    }
    for (int u = 0; u < int(mask.m.size()); ++u) {
        std::vector<scalar> bits(mask.m[std::size_t(u)].size());
        for (std::size_t i = 0; i < bits.size(); ++i) {
            bits[i] = scalar(mask.m[std::size_t(u)][i]);
        }
        char buf[32];
        std::snprintf(buf, sizeof(buf), "mask_%02d.scat", u);
        save_vector(dir / buf, bits);
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.txt");
    if (!mf) throw IoError("missing checkpoint manifest in '" + dir.string() + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(mf, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const char* ws = " \t\r";
            s.erase(0, s.find_first_not_of(ws));
            auto last = s.find_last_not_of(ws);
            s.erase(last == std::string::npos ? 0 : last + 1);
            return s;
        };
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto need = [&](const std::string& k) {
        auto it = kv.find(k);
        if (it == kv.end()) throw IoError("checkpoint manifest missing key '" + k + "'");
        return it->second;
    };

    NeuronConfig cfg;
    cfg.kind = need("neuron") == "IF" ? NeuronKind::IF : NeuronKind::LIF;
    cfg.v_th = scalar(std::stod(need("v_th")));
    cfg.v_reset = scalar(std::stod(need("v_reset")));
    cfg.tau_m = scalar(std::stod(need("tau_m")));
    cfg.alpha = scalar(std::stod(need("alpha")));

    NetworkDef def = parse_architecture(need("arch"), BlockStyle::Plain,
                                        std::stoi(need("t_steps")), std::stoi(need("input_c")),
                                        std::stoi(need("input_h")), std::stoi(need("input_w")),
                                        cfg);
    Checkpoint ck;
    ck.net = build_network(def, 0);
    ck.epoch = std::stoi(need("epoch"));
    ck.seed = std::stoull(need("seed"));

    for (int li = 0; li < int(ck.net.layers.size()); ++li) {
        Layer& layer = ck.net.layers[std::size_t(li)];
        switch (layer.spec.kind) {
            case LayerKind::Conv:
                layer.weight = load_tensor(dir / layer_file(li, "conv_weight"));
                break;
            case LayerKind::Linear:
                layer.weight = load_tensor(dir / layer_file(li, "linear_weight"));
                break;
            case LayerKind::BatchNorm:
                layer.bn.gamma = load_vector(dir / layer_file(li, "bn_gamma"));
                layer.bn.beta = load_vector(dir / layer_file(li, "bn_beta"));
                layer.bn.running_mean = load_vector(dir / layer_file(li, "bn_rmean"));
                layer.bn.running_var = load_vector(dir / layer_file(li, "bn_rvar"));
                break;
            default:
                break;
        }
    }
    ck.mask = ChannelMask::ones_for(ck.net);
    for (int u = 0; u < int(ck.mask.m.size()); ++u) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "mask_%02d.scat", u);
        auto bits = load_vector(dir / buf);
        if (bits.size() != ck.mask.m[std::size_t(u)].size()) {
            throw IoError("checkpoint mask " + std::to_string(u) + " has wrong length");
        }
        for (std::size_t i = 0; i < bits.size(); ++i) {
            if (bits[i] != scalar(0) && bits[i] != scalar(1)) {
                throw IoError("checkpoint mask " + std::to_string(u) + " has non-binary entry");
            }
            ck.mask.m[std::size_t(u)][i] = std::uint8_t(bits[i]);
        }
    }
    return ck;
}

}  // namespace sca

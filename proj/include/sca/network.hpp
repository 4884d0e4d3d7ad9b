#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sca/kernels.hpp"
#include "sca/neuron.hpp"
#include "sca/tensor.hpp"

namespace sca {

enum class BlockStyle { Plain, PostActResidual, PreActResidual };

enum class LayerKind { Conv, BatchNorm, SpikingNeuron, AvgPool2, Flatten, Linear, Add };

struct LayerSpec {
    static constexpr int kPrev = -2;   // consume the previous layer's output
    static constexpr int kInput = -1;  // consume the network input

    LayerKind kind = LayerKind::Conv;
    int conv_out = 0, conv_k = 0, conv_stride = 1, conv_pad = 0;
    int linear_out = 0;
    NeuronConfig neuron{};
    int input_from = kPrev;
    int add_from = -1;  // Add only: layer index of the joining stream

    static LayerSpec conv(int c_out, int k, int stride = 1, int pad = -1, int from = kPrev);
    static LayerSpec batchnorm(int from = kPrev);
    static LayerSpec spiking(const NeuronConfig& cfg, int from = kPrev);
    static LayerSpec avgpool2(int from = kPrev);
    static LayerSpec flatten(int from = kPrev);
    static LayerSpec linear(int out, int from = kPrev);
    static LayerSpec add(int from, int joined);
};

struct NetworkDef {
    BlockStyle block_style = BlockStyle::Plain;
    int t_steps = 1;
    int input_c = 1, input_h = 16, input_w = 16;
    std::vector<LayerSpec> layers;

    void validate() const;
};

// Architecture strings describe plain chains: dash-separated tokens
// "<c>C<k>" (conv + BN + SN, stride 1, same-padding), "AP2", final "<n>FC".
NetworkDef parse_architecture(const std::string& arch, BlockStyle style, int t_steps,
                              int input_c, int input_h, int input_w, const NeuronConfig& cfg);
std::string format_architecture(const NetworkDef& def);

struct ResidualStage {
    int channels = 0;
    int blocks = 1;
    int stride = 1;  // applied by the first block of the stage
};
NetworkDef residual_network_def(BlockStyle style, int stem_channels,
                                const std::vector<ResidualStage>& stages, int tail_pools,
                                int classes, int t_steps, int input_c, int input_h, int input_w,
                                const NeuronConfig& cfg);

// Prunable conv -> governing (BN, SN) triple, in conv layer order. `direct`
// is true when the pair immediately follows the conv (plain and post-
// activation wiring); pre-activation cross-block pairs are indirect.
struct PrunableUnit {
    int conv = -1, bn = -1, sn = -1;
    bool direct = true;
};
std::vector<PrunableUnit> map_prunable_channels(const NetworkDef& def);

struct Layer {
    LayerSpec spec;
    Tensor4 weight;  // Conv: (c_out, c_in, k, k); Linear: (out, features, 1, 1)
    BNParams bn;
    int in_c = 0, in_h = 0, in_w = 0;
    int out_c = 0, out_h = 0, out_w = 0;
};

struct Network {
    NetworkDef def;
    std::vector<Layer> layers;
    std::vector<PrunableUnit> mapping;

    int classes() const { return layers.back().spec.linear_out; }
    int producer_of(int layer) const;  // resolved input index (kInput for the network input)
};

// Allocates and initializes parameters: conv/linear weights uniform in
// +-sqrt(6 / fan_in), gamma = 1, beta = 0. Deterministic in the seed.
Network build_network(const NetworkDef& def, std::uint64_t seed);

// Per prunable unit: one byte per out-channel, 1 = alive.
struct ChannelMask {
    std::vector<std::vector<std::uint8_t>> m;

    static ChannelMask ones_for(const Network& net);
    int total_channels() const;
    int dead_channels() const;
    double sparsity() const;
    int alive_in_unit(int u) const;
};

struct SNTrace {
    std::vector<Tensor4> h;      // pre-reset membrane potential per step
    std::vector<Tensor4> s_raw;  // spikes before mask gating
};

struct ForwardTrace {
    bool train = false;
    bool smooth = false;
    int t_steps = 0;
    std::vector<Tensor4> input;                  // the encoded input sequence
    std::vector<std::vector<Tensor4>> outputs;   // [layer][t]; gated spikes for SN layers
    std::vector<SNTrace> sn;                     // [layer]
    std::vector<BNCache> bn_cache;               // [layer]
    Tensor4 logits;                              // (n, classes, 1, 1), mean over steps
};

enum class RunMode { Train, Eval, Score };

struct SynopsCounter {
    double weighted = 0.0;        // sum over layers/steps of nnz(input) * fan_out
    std::int64_t samples = 0;
    std::int64_t per_sample() const;  // rounded half-up
};

struct ForwardOptions {
    RunMode mode = RunMode::Train;
    bool smooth_fire = false;      // gradient-check mode (requires 64-bit build)
    SynopsCounter* synops = nullptr;
};

// Runs all layers for t = 1..T. Each prunable channel's SN output is
// multiplied by its mask bit (null mask = no gating anywhere); the neuron's
// internal reset always uses the ungated spikes.
ForwardTrace forward_T(Network& net, const ChannelMask* mask,
                       const std::vector<Tensor4>& input_steps, const ForwardOptions& opt);

struct Gradients {
    std::vector<Tensor4> d_weight;                  // per layer (empty when n/a)
    std::vector<std::vector<scalar>> d_gamma;       // per layer
    std::vector<std::vector<scalar>> d_beta;

    void init_for(const Network& net);
};

// Reverse-time BPTT over a train-mode trace. The mask gate is treated as
// identity (straight-through), so weight and gamma gradients keep flowing
// into pruned channels. conv_dout_tap, when given, receives each conv
// layer's per-step output gradient (testing hook).
Gradients backward_T(const Network& net, const ForwardTrace& trace, const Tensor4& d_logits,
                     std::vector<std::vector<Tensor4>>* conv_dout_tap = nullptr);

struct ParamCount {
    std::int64_t total = 0;
    std::int64_t alive = 0;
};
// A conv weight element is alive iff its out-channel is alive and its
// in-channel (as produced by the upstream prunable conv) is alive; BN
// parameters follow their channel; the classifier's rows always survive.
ParamCount count_params(const Network& net, const ChannelMask& mask);

// Checkpoints: manifest.txt plus one tensor container per parameter and one
// per mask vector. Plain-chain architectures only (the CLI's model space).
void save_checkpoint(const std::filesystem::path& dir, const Network& net,
                     const ChannelMask& mask, int epoch, std::uint64_t seed);
struct Checkpoint {
    Network net;
    ChannelMask mask;
    int epoch = 0;
    std::uint64_t seed = 0;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace sca

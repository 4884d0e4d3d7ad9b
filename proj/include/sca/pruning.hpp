#pragma once

#include <cstdint>
#include <vector>

#include "sca/network.hpp"
#include "sca/rng.hpp"

namespace sca {

enum class PruneMode { PruneAndRegrow, OnlyPrune, RandomPrune };

struct PruneConfig {
    double p = 0.0;           // target sparsity fraction
    double q = 0.0;           // churn fraction per structure step
    int interval_epochs = 1;  // structure-step cadence
    int min_channels = 1;     // per-layer alive floor
    PruneMode mode = PruneMode::PruneAndRegrow;

    void validate() const;
};

PruneMode parse_prune_mode(const std::string& s);
std::string prune_mode_name(PruneMode m);

// Exact accumulator: values are quantized to 2^-64 once per contribution and
// summed in 128-bit integers, so accumulation is associative — merging shard
// accumulators reproduces the single-pass result bit for bit.
class FixedAccum {
public:
    void add(double v) { fx_ += __int128(static_cast<long double>(v) * kScale); }
    void merge(const FixedAccum& o) { fx_ += o.fx_; }
    double value() const { return double(static_cast<long double>(fx_) / kScale); }
    bool operator==(const FixedAccum&) const = default;

private:
    static constexpr long double kScale = 18446744073709551616.0L;  // 2^64
    __int128 fx_ = 0;
};

// Running per-channel sums of sum_t ||H_t||_1, one contribution per sample.
struct ImportanceAccumulator {
    std::vector<std::vector<FixedAccum>> sum;  // [unit][channel]
    std::int64_t n_seen = 0;
    int t_steps = 0;

    static ImportanceAccumulator for_network(const Network& net);
    void reset();
    static ImportanceAccumulator merged(const ImportanceAccumulator& a,
                                        const ImportanceAccumulator& b);
};

// Adds every prunable channel's per-sample L1 membrane-potential mass from a
// recorded trace; n_seen grows by the batch size.
void accumulate_importance(ImportanceAccumulator& acc, const ForwardTrace& trace,
                           const Network& net);

using ChannelScores = std::vector<std::vector<double>>;

// r_k = sum / (n_seen * t_steps). The accumulator is left intact.
ChannelScores finalize_scores(const ImportanceAccumulator& acc);

// Running per-channel sums of |dL/dgamma| (straight-through for pruned
// channels), one contribution per processed batch.
struct GammaGradAccumulator {
    std::vector<std::vector<FixedAccum>> sum;  // [unit][channel]

    static GammaGradAccumulator for_network(const Network& net);
    void reset();
};

void accumulate_gamma_grads(GammaGradAccumulator& acc, const Gradients& grads,
                            const Network& net);

struct RankedChannel {
    int unit = 0, channel = 0;
    double score = 0.0;
};

// Alive channels ascending by score; ties by (unit, channel). Total order.
std::vector<RankedChannel> global_rank(const ChannelScores& scores, const ChannelMask& mask);

struct StructureStepAudit {
    int dead_before = 0;
    int dead_after_prune = 0;   // the instrumented mid-step count
    int dead_after_regrow = 0;
    int target_dead = 0;        // floor(p * C)
    int mid_target = 0;         // floor((p + q) * C)
};

// One prune/regrow step: prune lowest-scored alive channels down to
// floor((p+q)*C) dead (respecting min_channels), then revive the dead
// channels with the largest gamma-gradient mass until floor(p*C) remain
// dead. only_prune skips the regrowth; random_prune picks victims uniformly.
void structure_step(ChannelMask& mask, const ChannelScores& scores,
                    const GammaGradAccumulator& gamma_acc, const PruneConfig& cfg,
                    SplitMix64& rng, StructureStepAudit* audit = nullptr);

// Throws InfeasibleError when the mid-step dead target cannot be reached
// under the per-layer floors.
void validate_prune_feasibility(const PruneConfig& cfg, const ChannelMask& mask);

// Physically removes masked channels: sliced conv filters, BN parameter and
// running-stat slices, sliced consumer in-channels, and a remapped classifier.
// Forward results are preserved exactly.
Network compact(const Network& net, const ChannelMask& mask);

// Per-sample synaptic operations on an evaluation set: every nonzero input
// element entering a conv/linear layer contributes its fan-out
// (k^2 * c_out_alive / stride^2 for convs, out_features for linear).
std::int64_t synops(Network& net, const ChannelMask* mask, const Tensor4& images,
                    int batch_size);

}  // namespace sca

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sca/data.hpp"
#include "sca/network.hpp"
#include "sca/pruning.hpp"

namespace sca {

struct TrainConfig {
    int epochs = 1;
    int batch_size = 64;
    double learning_rate = 0.1;
    double momentum = 0.9;
    double l1_lambda = 0.0;
    std::uint64_t seed = 1;
    int t_steps = 4;
    bool exact_importance_pass = false;  // dedicated scoring pass per interval
    PruneConfig prune;
    NeuronConfig neuron;

    void validate() const;
};

struct MetricsRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double test_accuracy = 0.0;
    double sparsity = 0.0;
    std::int64_t alive_params = 0;
    std::int64_t synops = 0;
    std::vector<int> per_layer_alive_counts;
    std::vector<std::int64_t> score_hist_counts;  // fixed 50 bins over [0, max]
    double score_hist_max = 0.0;

    std::string to_json_line() const;
};

inline constexpr int kScoreHistBins = 50;

struct LossResult {
    double loss = 0.0;
    Tensor4 d_logits;
};
// Mean softmax cross-entropy over the batch.
LossResult loss_forward(const Tensor4& logits, const std::vector<int>& labels);

// penalty = lambda * (sum |W| over prunable conv weights + sum |gamma| of
// their governing BNs); the subgradient sign(w) (sign(0) = 0) is added to
// grads when non-null.
double l1_penalty(const Network& net, double lambda, Gradients* grads);

// Classical momentum on flat arrays: v = momentum * v + g; w -= lr * v.
void sgd_update(scalar* w, const scalar* g, scalar* velocity, std::size_t count, double lr,
                double momentum);

struct SgdState {
    std::vector<Tensor4> vel_weight;
    std::vector<std::vector<scalar>> vel_gamma, vel_beta;

    static SgdState for_network(const Network& net);
};
void sgd_step(Network& net, const Gradients& grads, SgdState& state, double lr, double momentum);

struct EpochStats {
    double mean_loss = 0.0;  // data loss + L1 penalty, sample-weighted
    int batches = 0;
};

EpochStats train_epoch(Network& net, const ChannelMask& mask, const DatasetContainer& train,
                       const TrainConfig& cfg, SgdState& sgd, ImportanceAccumulator& importance,
                       GammaGradAccumulator& gamma_acc, int epoch);

struct EvalResult {
    double accuracy = 0.0;
    std::int64_t synops_per_sample = 0;
};
EvalResult evaluate(Network& net, const ChannelMask* mask, const DatasetContainer& test,
                    int batch_size, bool count_synops = false);

struct RunResult {
    Network net;
    ChannelMask mask;
    Network compacted;
    std::vector<MetricsRecord> metrics;
    ChannelScores final_scores;
    double masked_accuracy = 0.0;
    double compacted_accuracy = 0.0;
};

// The full training loop: weight learning each epoch, a structure step every
// interval_epochs (first at the end of epoch 1), final compaction. With an
// out_dir, metrics.ndjson and masked/compacted checkpoints are persisted.
RunResult run_training(const TrainConfig& cfg, const NetworkDef& def,
                       const DatasetContainer& train, const DatasetContainer& test,
                       const std::filesystem::path* out_dir = nullptr,
                       const std::function<void(const MetricsRecord&)>& on_epoch = {});

}  // namespace sca

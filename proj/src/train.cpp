#include "sca/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace sca {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("train: momentum must be in [0, 1)");
    if (l1_lambda < 0.0) throw ConfigError("train: l1_lambda must be >= 0");
    if (t_steps < 1) throw ConfigError("train: t_steps must be >= 1");
    prune.validate();
    neuron.validate();
}

std::string MetricsRecord::to_json_line() const {
    nlohmann::json j;
    j["epoch"] = epoch;
    j["train_loss"] = train_loss;
    j["test_accuracy"] = test_accuracy;
    j["sparsity"] = sparsity;
    j["alive_params"] = alive_params;
    j["synops"] = synops;
    j["per_layer_alive_counts"] = per_layer_alive_counts;
    j["score_histogram"] = {{"max", score_hist_max}, {"counts", score_hist_counts}};
    return j.dump();
}

LossResult loss_forward(const Tensor4& logits, const std::vector<int>& labels) {
    const int n = logits.n(), classes = logits.c();
    if (int(labels.size()) != n) {
        throw ShapeError("loss_forward: " + std::to_string(n) + " rows but " +
                         std::to_string(labels.size()) + " labels");
    }
    LossResult res;
    res.d_logits = Tensor4(n, classes, 1, 1);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        if (labels[std::size_t(i)] < 0 || labels[std::size_t(i)] >= classes) {
            throw ConfigError("loss_forward: label " + std::to_string(labels[std::size_t(i)]) +
                              " out of range [0, " + std::to_string(classes) + ")");
        }
        const scalar* row = logits.data() + std::int64_t(i) * classes;
        scalar mx = row[0];
        for (int c = 1; c < classes; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (int c = 0; c < classes; ++c) denom += std::exp(double(row[c] - mx));
        const double log_denom = std::log(denom);
        total += log_denom - double(row[labels[std::size_t(i)]] - mx);
        scalar* drow = res.d_logits.data() + std::int64_t(i) * classes;
        for (int c = 0; c < classes; ++c) {
            const double p = std::exp(double(row[c] - mx)) / denom;
            drow[c] = scalar((p - (c == labels[std::size_t(i)] ? 1.0 : 0.0)) / n);
        }
    }
    res.loss = total / n;
    return res;
}

double l1_penalty(const Network& net, double lambda, Gradients* grads) {
    if (lambda < 0.0) throw ConfigError("l1_penalty: lambda must be >= 0");
    if (lambda == 0.0) return 0.0;
    double total = 0.0;
    auto apply = [&](const scalar* w, scalar* g, std::size_t count) {
        for (std::size_t i = 0; i < count; ++i) {
            total += std::abs(double(w[i]));
            if (g != nullptr && w[i] != scalar(0)) {
                g[i] += scalar(w[i] > scalar(0) ? lambda : -lambda);
            }
        }
    };
    for (const auto& unit : net.mapping) {
        const Layer& conv = net.layers[std::size_t(unit.conv)];
        apply(conv.weight.data(),
              grads != nullptr ? grads->d_weight[std::size_t(unit.conv)].data() : nullptr,
              conv.weight.size());
        const Layer& bn = net.layers[std::size_t(unit.bn)];
        apply(bn.bn.gamma.data(),
              grads != nullptr ? grads->d_gamma[std::size_t(unit.bn)].data() : nullptr,
              bn.bn.gamma.size());
    }
    return lambda * total;
}

void sgd_update(scalar* w, const scalar* g, scalar* velocity, std::size_t count, double lr,
                double momentum) {
    for (std::size_t i = 0; i < count; ++i) {
        velocity[i] = scalar(momentum) * velocity[i] + g[i];
        w[i] -= scalar(lr) * velocity[i];
    }
}

SgdState SgdState::for_network(const Network& net) {
    SgdState st;
    st.vel_weight.resize(net.layers.size());
    st.vel_gamma.resize(net.layers.size());
    st.vel_beta.resize(net.layers.size());
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Layer& layer = net.layers[li];
        if (layer.spec.kind == LayerKind::Conv || layer.spec.kind == LayerKind::Linear) {
            st.vel_weight[li] = Tensor4::zeros_like(layer.weight);
        } else if (layer.spec.kind == LayerKind::BatchNorm) {
            st.vel_gamma[li].assign(std::size_t(layer.bn.channels()), scalar(0));
            st.vel_beta[li].assign(std::size_t(layer.bn.channels()), scalar(0));
        }
    }
    return st;
}

void sgd_step(Network& net, const Gradients& grads, SgdState& state, double lr, double momentum) {
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        Layer& layer = net.layers[li];
        switch (layer.spec.kind) {
            case LayerKind::Conv:
            case LayerKind::Linear:
                if (!grads.d_weight[li].same_shape(layer.weight)) {
                    throw ShapeError("sgd_step: gradient shape mismatch at layer " +
                                     std::to_string(li));
                }
                sgd_update(layer.weight.data(), grads.d_weight[li].data(),
                           state.vel_weight[li].data(), layer.weight.size(), lr, momentum);
                break;
            case LayerKind::BatchNorm:
                if (grads.d_gamma[li].size() != layer.bn.gamma.size()) {
                    throw ShapeError("sgd_step: gamma gradient mismatch at layer " +
                                     std::to_string(li));
                }
                sgd_update(layer.bn.gamma.data(), grads.d_gamma[li].data(),
                           state.vel_gamma[li].data(), layer.bn.gamma.size(), lr, momentum);
                sgd_update(layer.bn.beta.data(), grads.d_beta[li].data(),
                           state.vel_beta[li].data(), layer.bn.beta.size(), lr, momentum);
                break;
            default:
                break;
        }
    }
}

EpochStats train_epoch(Network& net, const ChannelMask& mask, const DatasetContainer& train,
                       const TrainConfig& cfg, SgdState& sgd, ImportanceAccumulator& importance,
                       GammaGradAccumulator& gamma_acc, int epoch) {
    const EncoderConfig enc{cfg.t_steps};
    const auto batches =
        batch_indices(train.size(), std::min(cfg.batch_size, train.size()), true, cfg.seed, epoch);
    EpochStats stats;
    double weighted_loss = 0.0;
    std::vector<int> labels;
    ForwardOptions fopt;
    fopt.mode = RunMode::Train;
    for (const auto& idx : batches) {
        Tensor4 batch = gather_batch(train, idx, labels);
        auto steps = encode_direct(batch, enc);
        ForwardTrace trace = forward_T(net, &mask, steps, fopt);
        LossResult loss = loss_forward(trace.logits, labels);
        Gradients grads = backward_T(net, trace, loss.d_logits);
        accumulate_importance(importance, trace, net);
        accumulate_gamma_grads(gamma_acc, grads, net);
        const double penalty = l1_penalty(net, cfg.l1_lambda, &grads);
        sgd_step(net, grads, sgd, cfg.learning_rate, cfg.momentum);
        weighted_loss += (loss.loss + penalty) * double(idx.size());
        ++stats.batches;
    }
    stats.mean_loss = weighted_loss / double(train.size());
    return stats;
}

EvalResult evaluate(Network& net, const ChannelMask* mask, const DatasetContainer& test,
                    int batch_size, bool count_synops) {
    if (test.size() == 0) throw Error("evaluate: empty split");
    const EncoderConfig enc{net.def.t_steps};
    SynopsCounter counter;
    ForwardOptions fopt;
    fopt.mode = RunMode::Eval;
    fopt.synops = count_synops ? &counter : nullptr;
    std::vector<int> labels;
    std::int64_t correct = 0;
    for (int start = 0; start < test.size(); start += batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(test.size(), start + batch_size); ++i) idx.push_back(i);
        Tensor4 batch = gather_batch(test, idx, labels);
        ForwardTrace trace = forward_T(net, mask, encode_direct(batch, enc), fopt);
        const int classes = trace.logits.c();
        for (int i = 0; i < int(idx.size()); ++i) {
            const scalar* row = trace.logits.data() + std::int64_t(i) * classes;
            int best = 0;
            for (int c = 1; c < classes; ++c) {
                if (row[c] > row[best]) best = c;
            }
            correct += (best == labels[std::size_t(i)]);
        }
    }
    EvalResult res;
    res.accuracy = double(correct) / double(test.size());
    res.synops_per_sample = counter.per_sample();
    return res;
}

namespace {

void score_histogram(const ChannelScores& scores, MetricsRecord& rec) {
    rec.score_hist_counts.assign(kScoreHistBins, 0);
    double mx = 0.0;
    for (const auto& unit : scores) {
        for (double v : unit) mx = std::max(mx, v);
    }
    rec.score_hist_max = mx;
    for (const auto& unit : scores) {
        for (double v : unit) {
            int bin = mx > 0.0 ? int(v / mx * kScoreHistBins) : 0;
            bin = std::clamp(bin, 0, kScoreHistBins - 1);
            ++rec.score_hist_counts[std::size_t(bin)];
        }
    }
}

// Dedicated scoring pass over the full training set with frozen statistics.
void exact_importance(Network& net, const ChannelMask& mask, const DatasetContainer& train,
                      const TrainConfig& cfg, ImportanceAccumulator& importance) {
    importance.reset();
    const EncoderConfig enc{cfg.t_steps};
    ForwardOptions fopt;
    fopt.mode = RunMode::Score;
    std::vector<int> labels;
    for (int start = 0; start < train.size(); start += cfg.batch_size) {
        std::vector<int> idx;
        for (int i = start; i < std::min(train.size(), start + cfg.batch_size); ++i) {
            idx.push_back(i);
        }
        Tensor4 batch = gather_batch(train, idx, labels);
        ForwardTrace trace = forward_T(net, &mask, encode_direct(batch, enc), fopt);
        accumulate_importance(importance, trace, net);
    }
}

}  // namespace

RunResult run_training(const TrainConfig& cfg, const NetworkDef& def,
                       const DatasetContainer& train, const DatasetContainer& test,
                       const std::filesystem::path* out_dir,
                       const std::function<void(const MetricsRecord&)>& on_epoch) {
    cfg.validate();
    train.validate();
    test.validate();
    if (def.t_steps != cfg.t_steps) {
        throw ConfigError("run_training: network T=" + std::to_string(def.t_steps) +
                          " differs from configured t_steps=" + std::to_string(cfg.t_steps));
    }

    RunResult result;
    result.net = build_network(def, cfg.seed);
    result.mask = ChannelMask::ones_for(result.net);
    if (cfg.prune.p > 0.0) validate_prune_feasibility(cfg.prune, result.mask);

    Network& net = result.net;
    ChannelMask& mask = result.mask;
    auto importance = ImportanceAccumulator::for_network(net);
    auto gamma_acc = GammaGradAccumulator::for_network(net);
    SgdState sgd = SgdState::for_network(net);
    SplitMix64 prune_rng(derive_seed(cfg.seed, 0x9B0));

    std::ofstream metrics_file;
    if (out_dir != nullptr) {
        std::filesystem::create_directories(*out_dir);
        metrics_file.open(*out_dir / "metrics.ndjson", std::ios::trunc);
        if (!metrics_file) throw IoError("cannot write metrics in '" + out_dir->string() + "'");
    }

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        EpochStats stats = train_epoch(net, mask, train, cfg, sgd, importance, gamma_acc, epoch);

        const bool step_now = cfg.prune.p > 0.0 && epoch % cfg.prune.interval_epochs == 0;
        if (step_now && cfg.exact_importance_pass) {
            exact_importance(net, mask, train, cfg, importance);
        }
        ChannelScores scores = finalize_scores(importance);
        if (step_now) {
            structure_step(mask, scores, gamma_acc, cfg.prune, prune_rng);
            importance.reset();
            gamma_acc.reset();
        }

        EvalResult ev = evaluate(net, &mask, test, cfg.batch_size, true);

        MetricsRecord rec;
        rec.epoch = epoch;
        rec.train_loss = stats.mean_loss;
        rec.test_accuracy = ev.accuracy;
        rec.sparsity = mask.sparsity();
        rec.alive_params = count_params(net, mask).alive;
        rec.synops = ev.synops_per_sample;
        for (int u = 0; u < int(mask.m.size()); ++u) {
            rec.per_layer_alive_counts.push_back(mask.alive_in_unit(u));
        }
        score_histogram(scores, rec);
        result.metrics.push_back(rec);
        result.final_scores = std::move(scores);
        if (metrics_file.is_open()) metrics_file << rec.to_json_line() << "\n";
        if (on_epoch) on_epoch(rec);
    }
    if (metrics_file.is_open()) metrics_file.close();

    result.compacted = compact(net, mask);
    ChannelMask full = ChannelMask::ones_for(result.compacted);
    result.masked_accuracy = evaluate(net, &mask, test, cfg.batch_size).accuracy;
    result.compacted_accuracy = evaluate(result.compacted, &full, test, cfg.batch_size).accuracy;

    if (out_dir != nullptr) {
        save_checkpoint(*out_dir / "checkpoints" / "masked", net, mask, cfg.epochs, cfg.seed);
        save_checkpoint(*out_dir / "checkpoints" / "compacted", result.compacted, full, cfg.epochs,
                        cfg.seed);
    }
    return result;
}

}  // namespace sca

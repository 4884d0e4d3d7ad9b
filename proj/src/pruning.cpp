#include "sca/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace sca {

void PruneConfig::validate() const {
    if (p < 0.0 || p >= 1.0) throw ConfigError("prune: p must be in [0, 1)");
    if (q < 0.0) throw ConfigError("prune: q must be >= 0");
    if (p + q >= 1.0) throw ConfigError("prune: p + q must stay below 1");
    if (interval_epochs < 1) throw ConfigError("prune: interval_epochs must be >= 1");
    if (min_channels < 1) throw ConfigError("prune: min_channels must be >= 1");
}

PruneMode parse_prune_mode(const std::string& s) {
    if (s == "prune_and_regrow") return PruneMode::PruneAndRegrow;
    if (s == "only_prune") return PruneMode::OnlyPrune;
    if (s == "random_prune") return PruneMode::RandomPrune;
    throw ConfigError("unknown prune mode '" + s + "'");
}

std::string prune_mode_name(PruneMode m) {
    switch (m) {
        case PruneMode::PruneAndRegrow: return "prune_and_regrow";
        case PruneMode::OnlyPrune: return "only_prune";
        case PruneMode::RandomPrune: return "random_prune";
    }
    return "?";
}

ImportanceAccumulator ImportanceAccumulator::for_network(const Network& net) {
    ImportanceAccumulator acc;
    acc.t_steps = net.def.t_steps;
    acc.sum.reserve(net.mapping.size());
    for (const auto& u : net.mapping) {
        acc.sum.emplace_back(std::size_t(net.layers[std::size_t(u.conv)].out_c));
    }
    return acc;
}

void ImportanceAccumulator::reset() {
    for (auto& unit : sum) unit.assign(unit.size(), FixedAccum{});
    n_seen = 0;
}

ImportanceAccumulator ImportanceAccumulator::merged(const ImportanceAccumulator& a,
                                                    const ImportanceAccumulator& b) {
    if (a.sum.size() != b.sum.size() || a.t_steps != b.t_steps) {
        throw Error("importance merge: accumulator layouts differ");
    }
    ImportanceAccumulator out = a;
    for (std::size_t u = 0; u < out.sum.size(); ++u) {
        if (out.sum[u].size() != b.sum[u].size()) {
            throw Error("importance merge: channel counts differ");
        }
        for (std::size_t k = 0; k < out.sum[u].size(); ++k) out.sum[u][k].merge(b.sum[u][k]);
    }
    out.n_seen += b.n_seen;
    return out;
}

void accumulate_importance(ImportanceAccumulator& acc, const ForwardTrace& trace,
                           const Network& net) {
    if (acc.sum.size() != net.mapping.size()) {
        throw Error("importance: accumulator does not match the prunable mapping");
    }
    if (trace.sn.empty() || trace.t_steps != acc.t_steps) {
        throw Error("importance: trace has no recorded membrane potentials");
    }
    const int T = trace.t_steps;
    int batch = 0;
    for (std::size_t u = 0; u < net.mapping.size(); ++u) {
        const int sn = net.mapping[u].sn;
        const SNTrace& snt = trace.sn[std::size_t(sn)];
        if (int(snt.h.size()) != T) throw Error("importance: incomplete trace at SN layer");
        const int C = snt.h[0].c();
        if (int(acc.sum[u].size()) != C) throw Error("importance: channel count mismatch");
        const int hw = snt.h[0].h() * snt.h[0].w();
        batch = snt.h[0].n();
        for (int n = 0; n < batch; ++n) {
            for (int c = 0; c < C; ++c) {
                double subtotal = 0.0;  // one quantized contribution per sample
                for (int t = 0; t < T; ++t) {
                    const scalar* p = snt.h[std::size_t(t)].plane(n, c);
                    for (int i = 0; i < hw; ++i) subtotal += std::abs(double(p[i]));
                }
                acc.sum[u][std::size_t(c)].add(subtotal);
            }
        }
    }
    acc.n_seen += batch;
}

ChannelScores finalize_scores(const ImportanceAccumulator& acc) {
    if (acc.n_seen <= 0) throw Error("finalize_scores: no samples accumulated");
    ChannelScores scores(acc.sum.size());
    const double denom = double(acc.n_seen) * double(acc.t_steps);
    for (std::size_t u = 0; u < acc.sum.size(); ++u) {
        scores[u].resize(acc.sum[u].size());
        for (std::size_t k = 0; k < acc.sum[u].size(); ++k) {
            scores[u][k] = acc.sum[u][k].value() / denom;
        }
    }
    return scores;
}

GammaGradAccumulator GammaGradAccumulator::for_network(const Network& net) {
    GammaGradAccumulator acc;
    acc.sum.reserve(net.mapping.size());
    for (const auto& u : net.mapping) {
        acc.sum.emplace_back(std::size_t(net.layers[std::size_t(u.conv)].out_c));
    }
    return acc;
}

void GammaGradAccumulator::reset() {
    for (auto& unit : sum) unit.assign(unit.size(), FixedAccum{});
}

void accumulate_gamma_grads(GammaGradAccumulator& acc, const Gradients& grads,
                            const Network& net) {
    if (acc.sum.size() != net.mapping.size()) {
        throw Error("gamma accumulator does not match the prunable mapping");
    }
    for (std::size_t u = 0; u < net.mapping.size(); ++u) {
        const auto& dg = grads.d_gamma[std::size_t(net.mapping[u].bn)];
        if (dg.size() != acc.sum[u].size()) throw Error("gamma accumulator channel mismatch");
        for (std::size_t k = 0; k < dg.size(); ++k) {
            acc.sum[u][k].add(std::abs(double(dg[k])));
        }
    }
}

std::vector<RankedChannel> global_rank(const ChannelScores& scores, const ChannelMask& mask) {
    if (scores.size() != mask.m.size()) throw Error("global_rank: score/mask layout mismatch");
    std::vector<RankedChannel> ranked;
    for (std::size_t u = 0; u < scores.size(); ++u) {
        if (scores[u].size() != mask.m[u].size()) {
            throw Error("global_rank: channel count mismatch in unit " + std::to_string(u));
        }
        for (std::size_t k = 0; k < scores[u].size(); ++k) {
            if (mask.m[u][k]) ranked.push_back({int(u), int(k), scores[u][k]});
        }
    }
    std::sort(ranked.begin(), ranked.end(), [](const RankedChannel& a, const RankedChannel& b) {
        if (a.score != b.score) return a.score < b.score;
        if (a.unit != b.unit) return a.unit < b.unit;
        return a.channel < b.channel;
    });
    return ranked;
}

void validate_prune_feasibility(const PruneConfig& cfg, const ChannelMask& mask) {
    cfg.validate();
    if (cfg.p == 0.0) return;
    const int C = mask.total_channels();
    const int units = int(mask.m.size());
    if (units == 0) throw InfeasibleError("prune: network has no prunable channels");
    int max_dead = 0;
    for (const auto& unit : mask.m) {
        if (int(unit.size()) < cfg.min_channels) {
            throw InfeasibleError("prune: a layer has fewer channels than min_channels");
        }
        max_dead += int(unit.size()) - cfg.min_channels;
    }
    const int mid_target = int(std::floor((cfg.p + cfg.q) * C));
    const int needed = cfg.mode == PruneMode::OnlyPrune ? int(std::floor(cfg.p * C)) : mid_target;
    if (needed > max_dead) {
        throw InfeasibleError("prune: dead-channel target " + std::to_string(needed) +
                              " exceeds the " + std::to_string(max_dead) +
                              " removable under min_channels=" + std::to_string(cfg.min_channels));
    }
}

void structure_step(ChannelMask& mask, const ChannelScores& scores,
                    const GammaGradAccumulator& gamma_acc, const PruneConfig& cfg,
                    SplitMix64& rng, StructureStepAudit* audit) {
    validate_prune_feasibility(cfg, mask);
    const int C = mask.total_channels();
    StructureStepAudit a;
    a.dead_before = mask.dead_channels();
    a.target_dead = int(std::floor(cfg.p * C));
    a.mid_target = int(std::floor((cfg.p + cfg.q) * C));

    std::vector<int> alive_count(mask.m.size());
    for (std::size_t u = 0; u < mask.m.size(); ++u) alive_count[u] = mask.alive_in_unit(int(u));
    int dead = a.dead_before;

    const int phase1_target = cfg.mode == PruneMode::OnlyPrune ? a.target_dead : a.mid_target;

    if (cfg.mode == PruneMode::RandomPrune) {
        std::vector<std::pair<int, int>> candidates;
        for (std::size_t u = 0; u < mask.m.size(); ++u) {
            for (std::size_t k = 0; k < mask.m[u].size(); ++k) {
                if (mask.m[u][k]) candidates.emplace_back(int(u), int(k));
            }
        }
        while (dead < phase1_target && !candidates.empty()) {
            const int idx = rng.uniform_int(int(candidates.size()));
            auto [u, k] = candidates[std::size_t(idx)];
            candidates[std::size_t(idx)] = candidates.back();
            candidates.pop_back();
            if (alive_count[std::size_t(u)] - 1 < cfg.min_channels) continue;
            mask.m[std::size_t(u)][std::size_t(k)] = 0;
            --alive_count[std::size_t(u)];
            ++dead;
        }
    } else {
        for (const auto& rc : global_rank(scores, mask)) {
            if (dead >= phase1_target) break;
            if (alive_count[std::size_t(rc.unit)] - 1 < cfg.min_channels) continue;
            mask.m[std::size_t(rc.unit)][std::size_t(rc.channel)] = 0;
            --alive_count[std::size_t(rc.unit)];
            ++dead;
        }
    }
    if (dead < phase1_target) {
        throw InfeasibleError("prune: could not reach the dead-channel target");
    }
    a.dead_after_prune = dead;

    if (cfg.mode != PruneMode::OnlyPrune) {
        // Selective growth: revive dead channels with the largest
        // gamma-gradient mass until the sparsity target holds again.
        if (gamma_acc.sum.size() != mask.m.size()) {
            throw Error("structure_step: gamma accumulator layout mismatch");
        }
        std::vector<RankedChannel> dead_ranked;
        for (std::size_t u = 0; u < mask.m.size(); ++u) {
            for (std::size_t k = 0; k < mask.m[u].size(); ++k) {
                if (!mask.m[u][k]) {
                    dead_ranked.push_back({int(u), int(k), gamma_acc.sum[u][k].value()});
                }
            }
        }
        std::sort(dead_ranked.begin(), dead_ranked.end(),
                  [](const RankedChannel& x, const RankedChannel& y) {
                      if (x.score != y.score) return x.score > y.score;
                      if (x.unit != y.unit) return x.unit < y.unit;
                      return x.channel < y.channel;
                  });
        for (const auto& rc : dead_ranked) {
            if (dead <= a.target_dead) break;
            mask.m[std::size_t(rc.unit)][std::size_t(rc.channel)] = 1;
            --dead;
        }
    }
    a.dead_after_regrow = dead;
    if (audit != nullptr) *audit = a;
}

namespace {

std::vector<int> alive_indices(const std::vector<std::uint8_t>& bits) {
    std::vector<int> idx;
    for (int k = 0; k < int(bits.size()); ++k) {
        if (bits[std::size_t(k)]) idx.push_back(k);
    }
    return idx;
}

std::vector<int> all_indices(int n) {
    std::vector<int> idx(std::size_t(n));
    for (int i = 0; i < n; ++i) idx[std::size_t(i)] = i;
    return idx;
}

}  // namespace

Network compact(const Network& net, const ChannelMask& mask) {
    if (mask.m.size() != net.mapping.size()) throw Error("compact: mask layout mismatch");
    const int L = int(net.layers.size());

    std::vector<int> cunit(net.layers.size(), -1);
    for (int u = 0; u < int(net.mapping.size()); ++u) {
        cunit[std::size_t(net.mapping[std::size_t(u)].conv)] = u;
    }

    // Kept output-channel indices per layer (feature indices after Flatten).
    std::vector<std::vector<int>> keep(std::size_t(L));
    for (int li = 0; li < L; ++li) {
        const Layer& layer = net.layers[std::size_t(li)];
        const int p = net.producer_of(li);
        const std::vector<int> in_keep =
            p == LayerSpec::kInput ? all_indices(net.def.input_c) : keep[std::size_t(p)];
        switch (layer.spec.kind) {
            case LayerKind::Conv: {
                const int u = cunit[std::size_t(li)];
                if (u >= 0 && net.mapping[std::size_t(u)].direct) {
                    keep[std::size_t(li)] = alive_indices(mask.m[std::size_t(u)]);
                    if (keep[std::size_t(li)].empty()) {
                        throw InfeasibleError("compact: conv layer " + std::to_string(li) +
                                              " has no alive channels");
                    }
                } else {
                    keep[std::size_t(li)] = all_indices(layer.out_c);
                }
                break;
            }
            case LayerKind::Flatten: {
                const int hw = layer.in_h * layer.in_w;
                for (int c : in_keep) {
                    for (int i = 0; i < hw; ++i) keep[std::size_t(li)].push_back(c * hw + i);
                }
                break;
            }
            case LayerKind::Linear:
                keep[std::size_t(li)] = all_indices(layer.spec.linear_out);
                break;
            case LayerKind::Add: {
                if (in_keep != keep[std::size_t(layer.spec.add_from)]) {
                    throw Error("compact: residual streams disagree on kept channels");
                }
                keep[std::size_t(li)] = in_keep;
                break;
            }
            default:
                keep[std::size_t(li)] = in_keep;
                break;
        }
    }

    NetworkDef small_def = net.def;
    for (int li = 0; li < L; ++li) {
        if (small_def.layers[std::size_t(li)].kind == LayerKind::Conv) {
            small_def.layers[std::size_t(li)].conv_out = int(keep[std::size_t(li)].size());
        }
    }
    Network small = build_network(small_def, 0);

    for (int li = 0; li < L; ++li) {
        const Layer& src = net.layers[std::size_t(li)];
        Layer& dst = small.layers[std::size_t(li)];
        const int p = net.producer_of(li);
        const std::vector<int> in_keep =
            p == LayerSpec::kInput ? all_indices(net.def.input_c) : keep[std::size_t(p)];
        switch (src.spec.kind) {
            case LayerKind::Conv: {
                const auto& out_keep = keep[std::size_t(li)];
                const int k = src.spec.conv_k;
                for (int o = 0; o < int(out_keep.size()); ++o) {
                    for (int i = 0; i < int(in_keep.size()); ++i) {
                        std::memcpy(dst.weight.plane(o, i),
                                    src.weight.plane(out_keep[std::size_t(o)],
                                                     in_keep[std::size_t(i)]),
                                    std::size_t(k) * k * sizeof(scalar));
                    }
                }
                break;
            }
            case LayerKind::Linear: {
                for (int o = 0; o < src.spec.linear_out; ++o) {
                    for (int i = 0; i < int(in_keep.size()); ++i) {
                        dst.weight.at(o, i, 0, 0) = src.weight.at(o, in_keep[std::size_t(i)], 0, 0);
                    }
                }
                break;
            }
            case LayerKind::BatchNorm: {
                dst.bn.eps = src.bn.eps;
                dst.bn.momentum = src.bn.momentum;
                for (int i = 0; i < int(in_keep.size()); ++i) {
                    const int c = in_keep[std::size_t(i)];
                    dst.bn.gamma[std::size_t(i)] = src.bn.gamma[std::size_t(c)];
                    dst.bn.beta[std::size_t(i)] = src.bn.beta[std::size_t(c)];
                    dst.bn.running_mean[std::size_t(i)] = src.bn.running_mean[std::size_t(c)];
                    dst.bn.running_var[std::size_t(i)] = src.bn.running_var[std::size_t(c)];
                }
                break;
            }
            default:
                break;
        }
    }

    // Indirectly governed convs (pre-activation branch tails) keep their
    // width: the trunk still carries every channel. Their gate is realized by
    // zeroing the dead in-channel slices of the conv that reads the governing
    // SN's output.
    for (std::size_t u = 0; u < net.mapping.size(); ++u) {
        if (net.mapping[u].direct) continue;
        const int sn = net.mapping[u].sn;
        for (int li = 0; li < L; ++li) {
            if (small.layers[std::size_t(li)].spec.kind != LayerKind::Conv) continue;
            if (small.producer_of(li) != sn) continue;
            Layer& consumer = small.layers[std::size_t(li)];
            const int k = consumer.spec.conv_k;
            for (std::size_t c = 0; c < mask.m[u].size(); ++c) {
                if (mask.m[u][c]) continue;
                for (int o = 0; o < consumer.out_c; ++o) {
                    std::memset(consumer.weight.plane(o, int(c)), 0,
                                std::size_t(k) * k * sizeof(scalar));
                }
            }
        }
    }
    return small;
}

std::int64_t synops(Network& net, const ChannelMask* mask, const Tensor4& images,
                    int batch_size) {
    if (images.n() == 0) throw ShapeError("synops: empty evaluation set");
    const int T = net.def.t_steps;
    SynopsCounter counter;
    ForwardOptions opt;
    opt.mode = RunMode::Eval;
    opt.synops = &counter;
    for (int start = 0; start < images.n(); start += batch_size) {
        const int n = std::min(batch_size, images.n() - start);
        Tensor4 batch(n, images.c(), images.h(), images.w());
        std::memcpy(batch.data(), images.data() + images.index(start, 0, 0, 0),
                    batch.size() * sizeof(scalar));
        std::vector<Tensor4> steps(std::size_t(T), batch);
        forward_T(net, mask, steps, opt);
    }
    return counter.per_sample();
}

}  // namespace sca

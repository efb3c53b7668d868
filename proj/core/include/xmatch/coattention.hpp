#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "xmatch/lstm.hpp"
#include "xmatch/params.hpp"
#include "xmatch/tape.hpp"

namespace xmatch {

/// Stage-2 verifier: spatial attention ties each word to image regions, the
/// joint word-image features are then soft-aligned by a latent semantic
/// attention decoder, and a small head turns the final decoder state into a
/// matching confidence.
struct CoattentionDims {
    std::size_t region = 32;      // D_I
    std::size_t hidden = 64;      // D_H
    std::size_t attn = 32;        // K, spatial attention space
    std::size_t importance = 32;  // hidden width of the importance function
    std::size_t pre = 64;         // width of the two layers before the decoder
    std::size_t decoder = 64;     // decoder LSTM hidden size
    std::size_t head = 32;        // hidden width of the confidence head
    std::size_t steps = 5;        // M decoding steps (latent concepts)
};

struct SpatialAttentionIds {
    std::size_t w_i = 0, w_h = 0, b_h = 0;  // region / word projections into K
    std::size_t w_p = 0, b_p = 0;           // K -> affinity score
};

struct CoattentionIds {
    SpatialAttentionIds spa;
    std::size_t imp_w1 = 0, imp_b1 = 0, imp_w2 = 0, imp_b2 = 0;  // importance function f
    std::size_t pre_w1 = 0, pre_b1 = 0, pre_w2 = 0, pre_b2 = 0;  // aligned feature -> decoder input
    LstmIds dec;
    std::size_t head_w1 = 0, head_b1 = 0, head_w2 = 0, head_b2 = 0;
    bool has_spatial = false;
    bool has_semantic = false;
};

// Ablations: no_spa replaces gated features with the uniform region mean,
// no_sma replaces the decoder with direct classification on pooled joint
// features. Parameter blocks are only created for the parts in use.
struct Stage2Variant {
    bool no_spa = false;
    bool no_sma = false;

    std::string name() const {
        if (no_sma && no_spa) return "no_sma_spa";
        if (no_sma) return "no_sma";
        if (no_spa) return "no_spa";
        return "full";
    }
};

template <typename T>
CoattentionIds add_coattention_params(ParamSet<T>& params, const CoattentionDims& d,
                                      const Stage2Variant& variant, const std::string& prefix = "coa") {
    CoattentionIds ids;
    std::size_t joint = d.region + d.hidden;  // |x_t|
    if (!variant.no_spa) {
        ids.has_spatial = true;
        ids.spa.w_i = params.add(prefix + ".spa.w_i", {d.attn, d.region}, OptimGroup::adam);
        ids.spa.w_h = params.add(prefix + ".spa.w_h", {d.attn, d.hidden}, OptimGroup::adam);
        ids.spa.b_h = params.add(prefix + ".spa.b_h", {d.attn}, OptimGroup::adam);
        ids.spa.w_p = params.add(prefix + ".spa.w_p", {1, d.attn}, OptimGroup::adam);
        ids.spa.b_p = params.add(prefix + ".spa.b_p", {1}, OptimGroup::adam);
    }
    if (!variant.no_sma) {
        ids.has_semantic = true;
        ids.imp_w1 = params.add(prefix + ".imp.w1", {d.importance, d.decoder + joint}, OptimGroup::adam);
        ids.imp_b1 = params.add(prefix + ".imp.b1", {d.importance}, OptimGroup::adam);
        ids.imp_w2 = params.add(prefix + ".imp.w2", {1, d.importance}, OptimGroup::adam);
        ids.imp_b2 = params.add(prefix + ".imp.b2", {1}, OptimGroup::adam);
        ids.pre_w1 = params.add(prefix + ".pre.w1", {d.pre, joint}, OptimGroup::adam);
        ids.pre_b1 = params.add(prefix + ".pre.b1", {d.pre}, OptimGroup::adam);
        ids.pre_w2 = params.add(prefix + ".pre.w2", {d.pre, d.pre}, OptimGroup::adam);
        ids.pre_b2 = params.add(prefix + ".pre.b2", {d.pre}, OptimGroup::adam);
        ids.dec = add_lstm_params(params, prefix + ".dec", d.pre, d.decoder, OptimGroup::adam);
    }
    std::size_t head_in = variant.no_sma ? joint : d.decoder;
    ids.head_w1 = params.add(prefix + ".head.w1", {d.head, head_in}, OptimGroup::adam);
    ids.head_b1 = params.add(prefix + ".head.b1", {d.head}, OptimGroup::adam);
    ids.head_w2 = params.add(prefix + ".head.w2", {1, d.head}, OptimGroup::adam);
    ids.head_b2 = params.add(prefix + ".head.b2", {1}, OptimGroup::adam);
    return ids;
}

/// Spatial attention rows, one per word:
///   e_{t,k} = W_P tanh(W_I i_k + W_H h_t + b_H) + b_P,  a_t = softmax_k(e_t)
/// The printed form of the normalization in the source material is taken as
/// standard softmax (rows must sum to 1).
template <typename T>
std::vector<Var<T>> spatial_attention(Tape<T>& tape, const std::vector<Var<T>>& pv,
                                      const SpatialAttentionIds& ids, const std::vector<Var<T>>& states,
                                      const std::vector<Var<T>>& regions) {
    if (states.empty() || regions.empty()) throw ShapeError("spatial_attention: empty words or regions");
    std::vector<Var<T>> projected_regions;
    projected_regions.reserve(regions.size());
    for (Var<T> r : regions) projected_regions.push_back(tape.matvec(pv[ids.w_i], r));

    std::vector<Var<T>> rows;
    rows.reserve(states.size());
    std::vector<Var<T>> scores(regions.size());
    for (Var<T> h : states) {
        Var<T> q = tape.linear(h, pv[ids.w_h], pv[ids.b_h]);
        for (std::size_t k = 0; k < regions.size(); ++k) {
            Var<T> coupled = tape.tanh_(tape.add(projected_regions[k], q));
            scores[k] = tape.linear(coupled, pv[ids.w_p], pv[ids.b_p]);
        }
        rows.push_back(tape.softmax(tape.concat(scores)));
    }
    return rows;
}

// Gated visual features: i~_t = sum_k a_{t,k} i_k (convex combination of regions).
template <typename T>
std::vector<Var<T>> gate_regions(Tape<T>& tape, const std::vector<Var<T>>& attention_rows,
                                 const std::vector<Var<T>>& regions) {
    std::vector<Var<T>> gated;
    gated.reserve(attention_rows.size());
    for (Var<T> row : attention_rows) gated.push_back(tape.weighted_sum(row, regions));
    return gated;
}

// x_t = [i~_t, h_t]
template <typename T>
std::vector<Var<T>> build_joint(Tape<T>& tape, const std::vector<Var<T>>& states,
                                const std::vector<Var<T>>& gated) {
    if (states.empty()) throw ShapeError("build_joint: empty sequence");
    if (states.size() != gated.size()) {
        throw ShapeError("build_joint: " + std::to_string(gated.size()) + " gated features vs " +
                         std::to_string(states.size()) + " states");
    }
    std::vector<Var<T>> joint;
    joint.reserve(states.size());
    for (std::size_t t = 0; t < states.size(); ++t) {
        joint.push_back(tape.concat({gated[t], states[t]}));
    }
    return joint;
}

template <typename T>
struct SemanticStep {
    Var<T> attention;  // row over word positions, sums to 1
    Var<T> aligned;    // x~_m
};

/// One latent semantic attention step:
///   e'_{m,t} = f(c_{m-1}, x_t),  a'_m = softmax_t(e'_m),  x~_m = sum_t a'_{m,t} x_t
/// f is a shared two-layer perceptron applied per word position, so the
/// aligned feature is invariant to permutations of the inputs.
template <typename T>
SemanticStep<T> semantic_attention_step(Tape<T>& tape, const std::vector<Var<T>>& pv,
                                        const CoattentionIds& ids, Var<T> decoder_state,
                                        const std::vector<Var<T>>& joint) {
    if (joint.empty()) throw ShapeError("semantic_attention_step: empty sequence");
    std::vector<Var<T>> scores(joint.size());
    for (std::size_t t = 0; t < joint.size(); ++t) {
        Var<T> in = tape.concat({decoder_state, joint[t]});
        Var<T> hidden = tape.tanh_(tape.linear(in, pv[ids.imp_w1], pv[ids.imp_b1]));
        scores[t] = tape.linear(hidden, pv[ids.imp_w2], pv[ids.imp_b2]);
    }
    SemanticStep<T> out;
    out.attention = tape.softmax(tape.concat(scores));
    out.aligned = tape.weighted_sum(out.attention, joint);
    return out;
}

template <typename T>
Var<T> confidence_head(Tape<T>& tape, const std::vector<Var<T>>& pv, const CoattentionIds& ids, Var<T> x) {
    Var<T> hidden = tape.tanh_(tape.linear(x, pv[ids.head_w1], pv[ids.head_b1]));
    return tape.sigmoid(tape.linear(hidden, pv[ids.head_w2], pv[ids.head_b2]));
}

/// Matching confidence for one description-image pair, from the joint feature
/// sequence. With semantic attention, M decoder steps consume the aligned
/// features (each passed through two tanh layers) and the head reads the last
/// decoder state; without it, the head reads the time-pooled joint feature.
template <typename T>
Var<T> match_confidence(Tape<T>& tape, const std::vector<Var<T>>& pv, const CoattentionIds& ids,
                        const std::vector<Var<T>>& joint, const CoattentionDims& d) {
    if (joint.empty()) throw ShapeError("match_confidence: empty sequence");
    if (!ids.has_semantic) {
        return confidence_head(tape, pv, ids, tape.mean(joint));
    }
    LstmState<T> state = lstm_initial_state(tape, d.decoder);
    for (std::size_t m = 0; m < d.steps; ++m) {
        SemanticStep<T> step = semantic_attention_step(tape, pv, ids, state.h, joint);
        Var<T> u = tape.tanh_(tape.linear(step.aligned, pv[ids.pre_w1], pv[ids.pre_b1]));
        u = tape.tanh_(tape.linear(u, pv[ids.pre_w2], pv[ids.pre_b2]));
        state = lstm_step(tape, pv, ids.dec, u, state);
    }
    return confidence_head(tape, pv, ids, state.h);
}

/// One verification record: a description-image pair with its identity labels,
/// binary target and predicted confidence.
struct MatchPair {
    std::size_t text_index = 0;
    std::size_t image_index = 0;
    std::size_t text_identity = 0;
    std::size_t image_identity = 0;
    double target = 0;      // 1 iff identities match
    double confidence = 0;  // model prediction in (0,1)
};

inline bool identities_match(const MatchPair& p) { return p.text_identity == p.image_identity; }

/// Binary cross-entropy over predicted confidences, confidences clamped to
/// [1e-7, 1-1e-7] before the logs:
///   E = -(1/N') sum_i [ y_i log C_i + (1-y_i) log(1-C_i) ]
inline double bce_loss(const std::vector<MatchPair>& pairs) {
    if (pairs.empty()) throw InputError("bce_loss: empty pair list");
    double total = 0;
    for (const MatchPair& p : pairs) {
        double c = std::min(1.0 - 1e-7, std::max(1e-7, p.confidence));
        total += -(p.target * std::log(c) + (1.0 - p.target) * std::log(1.0 - c));
    }
    return total / static_cast<double>(pairs.size());
}

// Tape route: mean of bce terms over a batch of confidence nodes.
template <typename T>
Var<T> bce_loss_node(Tape<T>& tape, const std::vector<Var<T>>& confidences, const std::vector<T>& targets) {
    if (confidences.empty()) throw InputError("bce_loss_node: empty batch");
    if (confidences.size() != targets.size()) throw ShapeError("bce_loss_node: target count mismatch");
    std::vector<Var<T>> terms;
    terms.reserve(confidences.size());
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        terms.push_back(tape.bce_term(confidences[i], targets[i]));
    }
    return tape.mean(terms);
}

}  // namespace xmatch

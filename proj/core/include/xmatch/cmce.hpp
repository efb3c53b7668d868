#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "xmatch/array.hpp"
#include "xmatch/errors.hpp"
#include "xmatch/sample_types.hpp"
#include "xmatch/tape.hpp"

namespace xmatch {

/// Per-identity feature table for one modality: row j stores identity j's
/// embedding, refreshed by a running weighted average during training.
/// Rows are kept unit-norm after every update so affinities stay cosines
/// (the renormalization can be switched off for ablations).
template <typename T>
class FeatureBuffer {
public:
    FeatureBuffer(std::size_t identities, std::size_t dim, Modality modality, bool renormalize = true)
        : n_(identities), d_(dim), modality_(modality), renormalize_(renormalize) {
        table_.assign(n_ * d_, T(0));
        counts_.assign(n_, 0);
    }

    std::size_t identities() const { return n_; }
    std::size_t dim() const { return d_; }
    Modality modality() const { return modality_; }
    bool renormalizes() const { return renormalize_; }

    const T* row(std::size_t i) const {
        check_index(i);
        return table_.data() + i * d_;
    }

    Array<T> row_copy(std::size_t i) const {
        check_index(i);
        Array<T> out({d_});
        std::copy(row(i), row(i) + d_, out.v.begin());
        return out;
    }

    std::uint32_t sample_count(std::size_t i) const {
        check_index(i);
        return counts_[i];
    }

    void set_row(std::size_t i, const Array<T>& feat, std::uint32_t count) {
        check_index(i);
        check_dim(feat);
        std::copy(feat.v.begin(), feat.v.end(), table_.begin() + static_cast<std::ptrdiff_t>(i * d_));
        counts_[i] = count;
        if (renormalize_) renormalize_row(i);
    }

    // row <- (1-alpha)*old + alpha*new, then renormalized. alpha=1 replaces
    // the row outright (the rule for single-sample identities).
    void update(std::size_t i, const Array<T>& feat, T alpha) {
        check_index(i);
        check_dim(feat);
        if (!(alpha > T(0)) || alpha > T(1)) {
            throw ConfigError("buffer update weight must be in (0,1], got " + std::to_string(alpha));
        }
        T* r = table_.data() + i * d_;
        for (std::size_t k = 0; k < d_; ++k) r[k] = (T(1) - alpha) * r[k] + alpha * feat.v[k];
        if (renormalize_) renormalize_row(i);
    }

    // Dense [N x D] copy, e.g. for constant-matrix use on a tape.
    Array<T> as_matrix() const {
        Array<T> m({n_, d_});
        m.v = table_;
        return m;
    }

private:
    void check_index(std::size_t i) const {
        if (i >= n_) {
            throw InputError(std::string(modality_name(modality_)) + " buffer row " + std::to_string(i) +
                             " out of range " + std::to_string(n_));
        }
    }
    void check_dim(const Array<T>& feat) const {
        if (feat.numel() != d_) {
            throw ShapeError("buffer feature size " + std::to_string(feat.numel()) + " vs dim " +
                             std::to_string(d_));
        }
    }
    void renormalize_row(std::size_t i) {
        T* r = table_.data() + i * d_;
        T s = 0;
        for (std::size_t k = 0; k < d_; ++k) s += r[k] * r[k];
        T n = std::sqrt(s);
        if (!(n > T(0))) throw NumericError("buffer row " + std::to_string(i) + " has zero norm");
        for (std::size_t k = 0; k < d_; ++k) r[k] /= n;
    }

    std::size_t n_, d_;
    std::vector<T> table_;
    std::vector<std::uint32_t> counts_;
    Modality modality_;
    bool renormalize_;
};

template <typename T>
struct CmceConfig {
    T sigma_v = T(0.04);        // temperature, visual feature vs textual buffer
    T sigma_s = T(0.04);        // temperature, textual feature vs visual buffer
    std::size_t batch_identities = 16;
    T alpha = T(0.5);           // running-average weight for multi-sample identities
    bool renormalize_rows = true;
};

template <typename T>
struct MatchProbabilities {
    std::vector<T> p;          // one entry per identity, sums to 1
    Modality against;          // modality of the buffer the feature was matched to
};

template <typename T>
struct CmceSample {
    Array<T> feature;       // unit-norm joint embedding
    std::size_t identity;
};

/// Softmax over (buffer row . feature) / sigma for all identities, computed
/// with max subtraction so that temperatures as sharp as 0.04 stay finite.
template <typename T>
MatchProbabilities<T> cross_modal_probabilities(const Array<T>& feat, const FeatureBuffer<T>& buf, T sigma) {
    if (!(sigma > T(0))) throw ConfigError("temperature must be positive, got " + std::to_string(sigma));
    if (buf.identities() == 0) throw StateError("feature buffer is empty");
    if (feat.numel() != buf.dim()) {
        throw ShapeError("feature size " + std::to_string(feat.numel()) + " vs buffer dim " +
                         std::to_string(buf.dim()));
    }
    std::size_t n = buf.identities();
    MatchProbabilities<T> out;
    out.against = buf.modality();
    out.p.resize(n);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        const T* r = buf.row(i);
        T a = 0;
        for (std::size_t k = 0; k < buf.dim(); ++k) a += r[k] * feat.v[k];
        out.p[i] = a / sigma;
        mx = std::max(mx, out.p[i]);
    }
    T denom = 0;
    for (T& e : out.p) {
        e = std::exp(e - mx);
        denom += e;
    }
    for (T& e : out.p) e /= denom;
    return out;
}

template <typename T>
void check_cmce_batch(const std::vector<CmceSample<T>>& batch, const FeatureBuffer<T>& buf) {
    for (const CmceSample<T>& s : batch) {
        if (s.identity >= buf.identities()) {
            throw InputError("identity " + std::to_string(s.identity) + " out of range " +
                             std::to_string(buf.identities()));
        }
    }
}

/// CMCE loss: every sampled visual feature is classified against the textual
/// buffer and vice versa; the buffers themselves are constants here, so no
/// gradient ever flows into stored rows.
///   L = -sum_v log p_{t_v}(v | S) - sum_s log p_{t_s}(s | V)
template <typename T>
T cmce_loss(const std::vector<CmceSample<T>>& batch_v, const std::vector<CmceSample<T>>& batch_s,
            const FeatureBuffer<T>& textual, const FeatureBuffer<T>& visual, const CmceConfig<T>& cfg) {
    check_cmce_batch(batch_v, textual);
    check_cmce_batch(batch_s, visual);
    T loss = 0;
    for (const CmceSample<T>& s : batch_v) {
        MatchProbabilities<T> p = cross_modal_probabilities(s.feature, textual, cfg.sigma_v);
        loss -= std::log(p.p[s.identity]);
    }
    for (const CmceSample<T>& s : batch_s) {
        MatchProbabilities<T> p = cross_modal_probabilities(s.feature, visual, cfg.sigma_s);
        loss -= std::log(p.p[s.identity]);
    }
    return loss;
}

/// Closed-form per-sample gradients:
///   dL/dv = (1/sigma_v) [ (p_t - 1) S_t + sum_{j != t} S_j p_j ]
/// and symmetrically for textual samples against the visual buffer.
template <typename T>
Array<T> cmce_gradient_single(const CmceSample<T>& sample, const FeatureBuffer<T>& buf, T sigma) {
    MatchProbabilities<T> probs = cross_modal_probabilities(sample.feature, buf, sigma);
    std::size_t d = buf.dim();
    Array<T> g({d});
    std::size_t t = sample.identity;
    const T* rt = buf.row(t);
    for (std::size_t k = 0; k < d; ++k) g.v[k] = (probs.p[t] - T(1)) * rt[k];
    for (std::size_t j = 0; j < buf.identities(); ++j) {
        if (j == t) continue;
        const T* rj = buf.row(j);
        for (std::size_t k = 0; k < d; ++k) g.v[k] += rj[k] * probs.p[j];
    }
    for (std::size_t k = 0; k < d; ++k) g.v[k] /= sigma;
    return g;
}

template <typename T>
struct CmceGradients {
    std::vector<Array<T>> d_visual;   // per batch_v sample
    std::vector<Array<T>> d_textual;  // per batch_s sample
};

template <typename T>
CmceGradients<T> cmce_gradients(const std::vector<CmceSample<T>>& batch_v,
                                const std::vector<CmceSample<T>>& batch_s, const FeatureBuffer<T>& textual,
                                const FeatureBuffer<T>& visual, const CmceConfig<T>& cfg) {
    check_cmce_batch(batch_v, textual);
    check_cmce_batch(batch_s, visual);
    CmceGradients<T> out;
    out.d_visual.reserve(batch_v.size());
    out.d_textual.reserve(batch_s.size());
    for (const CmceSample<T>& s : batch_v) out.d_visual.push_back(cmce_gradient_single(s, textual, cfg.sigma_v));
    for (const CmceSample<T>& s : batch_s) out.d_textual.push_back(cmce_gradient_single(s, visual, cfg.sigma_s));
    return out;
}

// Tape route for the same loss, used by the three-way gradient agreement
// checks and available to training: features are tape vars, buffers constants.
template <typename T>
Var<T> cmce_loss_node(Tape<T>& tape, const std::vector<Var<T>>& vars_v, const std::vector<std::size_t>& ids_v,
                      const std::vector<Var<T>>& vars_s, const std::vector<std::size_t>& ids_s,
                      const FeatureBuffer<T>& textual, const FeatureBuffer<T>& visual,
                      const CmceConfig<T>& cfg) {
    if (vars_v.size() != ids_v.size() || vars_s.size() != ids_s.size()) {
        throw ShapeError("cmce_loss_node: identity list does not match feature list");
    }
    Array<T> s_mat = textual.as_matrix();
    Array<T> v_mat = visual.as_matrix();
    std::vector<Var<T>> terms;
    terms.reserve(vars_v.size() + vars_s.size());
    for (std::size_t i = 0; i < vars_v.size(); ++i) {
        if (ids_v[i] >= textual.identities()) {
            throw InputError("identity " + std::to_string(ids_v[i]) + " out of range " +
                             std::to_string(textual.identities()));
        }
        Var<T> logits = tape.scale(tape.matvec_const(s_mat, vars_v[i]), T(1) / cfg.sigma_v);
        terms.push_back(tape.cross_entropy_logits(logits, ids_v[i]));
    }
    for (std::size_t i = 0; i < vars_s.size(); ++i) {
        if (ids_s[i] >= visual.identities()) {
            throw InputError("identity " + std::to_string(ids_s[i]) + " out of range " +
                             std::to_string(visual.identities()));
        }
        Var<T> logits = tape.scale(tape.matvec_const(v_mat, vars_s[i]), T(1) / cfg.sigma_s);
        terms.push_back(tape.cross_entropy_logits(logits, ids_s[i]));
    }
    Var<T> total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = tape.add(total, terms[i]);
    return total;
}

/// Buffer rows from per-identity feature lists: row j is the (renormalized)
/// mean of identity j's encoded samples. An identity with no samples in a
/// modality cannot be ranked against and is a dataset defect.
template <typename T>
FeatureBuffer<T> init_buffer(const std::vector<std::vector<Array<T>>>& per_identity, std::size_t dim,
                             Modality modality, bool renormalize = true) {
    FeatureBuffer<T> buf(per_identity.size(), dim, modality, renormalize);
    for (std::size_t j = 0; j < per_identity.size(); ++j) {
        const auto& feats = per_identity[j];
        if (feats.empty()) {
            throw DatasetError("identity " + std::to_string(j) + " has no " + modality_name(modality) +
                               " samples");
        }
        Array<T> mean({dim});
        for (const Array<T>& f : feats) {
            if (f.numel() != dim) throw ShapeError("init_buffer: inconsistent feature size");
            for (std::size_t k = 0; k < dim; ++k) mean.v[k] += f.v[k];
        }
        for (std::size_t k = 0; k < dim; ++k) mean.v[k] /= static_cast<T>(feats.size());
        buf.set_row(j, mean, static_cast<std::uint32_t>(feats.size()));
    }
    return buf;
}

}  // namespace xmatch

#pragma once

#include <chrono>
#include <string>
#include <vector>

#include "xmatch/cmce.hpp"
#include "xmatch/coattention.hpp"
#include "xmatch/encoders.hpp"
#include "xmatch/gradcheck.hpp"
#include "xmatch/lstm.hpp"
#include "xmatch/rng.hpp"

namespace xmatch {

struct SuiteResult {
    std::string name;
    double max_err = 0;
    double tolerance = 0;
    double seconds = 0;
    bool pass() const { return max_err <= tolerance; }
};

template <typename T>
constexpr T grad_tolerance() {
    return sizeof(T) == 4 ? T(1e-4) : T(1e-7);
}

namespace detail {

template <typename T>
Array<T> random_array(Rng& rng, std::vector<std::size_t> shape, double lo = -1.0, double hi = 1.0) {
    Array<T> a(std::move(shape));
    for (T& x : a.v) x = static_cast<T>(rng.uniform(lo, hi));
    return a;
}

template <typename T>
Array<T> random_unit(Rng& rng, std::size_t d) {
    Array<T> a({d});
    T norm2 = 0;
    do {
        for (T& x : a.v) x = static_cast<T>(rng.gauss());
        norm2 = 0;
        for (T x : a.v) norm2 += x * x;
    } while (!(norm2 > T(1e-6)));
    T n = std::sqrt(norm2);
    for (T& x : a.v) x /= n;
    return a;
}

template <typename T>
FeatureBuffer<T> random_buffer(Rng& rng, std::size_t n, std::size_t d, Modality m) {
    FeatureBuffer<T> buf(n, d, m);
    for (std::size_t i = 0; i < n; ++i) buf.set_row(i, random_unit<T>(rng, d), 1);
    return buf;
}

template <typename T>
struct CmceInstance {
    std::vector<CmceSample<T>> batch_v, batch_s;
    FeatureBuffer<T> textual, visual;
    CmceConfig<T> cfg;

    static CmceInstance make(Rng& rng, std::size_t n_ids, std::size_t dim, std::size_t batch,
                             double sigma_lo, double sigma_hi) {
        CmceInstance inst{{},
                          {},
                          random_buffer<T>(rng, n_ids, dim, Modality::textual),
                          random_buffer<T>(rng, n_ids, dim, Modality::visual),
                          {}};
        inst.cfg.sigma_v = static_cast<T>(rng.uniform(sigma_lo, sigma_hi));
        inst.cfg.sigma_s = static_cast<T>(rng.uniform(sigma_lo, sigma_hi));
        inst.cfg.batch_identities = batch;
        for (std::size_t i = 0; i < batch; ++i) {
            inst.batch_v.push_back({random_unit<T>(rng, dim), rng.below(n_ids)});
            inst.batch_s.push_back({random_unit<T>(rng, dim), rng.below(n_ids)});
        }
        return inst;
    }

    // Loss as a function of all features flattened [v_0..v_{b-1}, s_0..s_{b-1}].
    T loss_at(const Array<T>& flat) const {
        CmceInstance copy = *this;
        std::size_t dim = textual.dim();
        for (std::size_t i = 0; i < copy.batch_v.size(); ++i) {
            std::copy(flat.v.begin() + i * dim, flat.v.begin() + (i + 1) * dim,
                      copy.batch_v[i].feature.v.begin());
        }
        std::size_t off = copy.batch_v.size() * dim;
        for (std::size_t i = 0; i < copy.batch_s.size(); ++i) {
            std::copy(flat.v.begin() + off + i * dim, flat.v.begin() + off + (i + 1) * dim,
                      copy.batch_s[i].feature.v.begin());
        }
        return cmce_loss(copy.batch_v, copy.batch_s, copy.textual, copy.visual, copy.cfg);
    }

    Array<T> flatten_features() const {
        std::size_t dim = textual.dim();
        Array<T> flat({(batch_v.size() + batch_s.size()) * dim});
        std::size_t off = 0;
        for (const auto& s : batch_v) {
            std::copy(s.feature.v.begin(), s.feature.v.end(), flat.v.begin() + off);
            off += dim;
        }
        for (const auto& s : batch_s) {
            std::copy(s.feature.v.begin(), s.feature.v.end(), flat.v.begin() + off);
            off += dim;
        }
        return flat;
    }

    Array<T> closed_form_flat() const {
        CmceGradients<T> g = cmce_gradients(batch_v, batch_s, textual, visual, cfg);
        std::size_t dim = textual.dim();
        Array<T> flat({(batch_v.size() + batch_s.size()) * dim});
        std::size_t off = 0;
        for (const auto& a : g.d_visual) {
            std::copy(a.v.begin(), a.v.end(), flat.v.begin() + off);
            off += dim;
        }
        for (const auto& a : g.d_textual) {
            std::copy(a.v.begin(), a.v.end(), flat.v.begin() + off);
            off += dim;
        }
        return flat;
    }

    Array<T> tape_flat() const {
        Tape<T> tape;
        std::vector<Var<T>> vv, sv;
        std::vector<std::size_t> vi, si;
        for (const auto& s : batch_v) {
            vv.push_back(tape.leaf(s.feature, true));
            vi.push_back(s.identity);
        }
        for (const auto& s : batch_s) {
            sv.push_back(tape.leaf(s.feature, true));
            si.push_back(s.identity);
        }
        Var<T> loss = cmce_loss_node(tape, vv, vi, sv, si, textual, visual, cfg);
        tape.backward_scalar(loss);
        std::size_t dim = textual.dim();
        Array<T> flat({(batch_v.size() + batch_s.size()) * dim});
        std::size_t off = 0;
        for (Var<T> v : vv) {
            const Array<T>& g = tape.grad(v);
            std::copy(g.v.begin(), g.v.end(), flat.v.begin() + off);
            off += dim;
        }
        for (Var<T> v : sv) {
            const Array<T>& g = tape.grad(v);
            std::copy(g.v.begin(), g.v.end(), flat.v.begin() + off);
            off += dim;
        }
        return flat;
    }
};

// Cycle a probe vector to length n (fixed projection for vector-valued ops).
template <typename T>
Array<T> probe_for(const Array<T>& probe, std::size_t n) {
    Array<T> out({n});
    for (std::size_t i = 0; i < n; ++i) out.v[i] = probe.v[i % probe.numel()];
    return out;
}

template <typename T>
double max_rel_diff(const Array<T>& a, const Array<T>& b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double x = static_cast<double>(a.v[i]);
        double y = static_cast<double>(b.v[i]);
        worst = std::max(worst, std::abs(x - y) / std::max({1.0, std::abs(x), std::abs(y)}));
    }
    return worst;
}

// FD check of every parameter block of a scalar-valued forward function.
template <typename T, typename Forward>
double check_all_param_blocks(ParamSet<T>& params, Forward&& forward, T eps) {
    Tape<T> tape;
    auto pv = bind_params(tape, params, true);
    Var<T> y = forward(tape, pv);
    tape.backward_scalar(y);
    std::vector<Array<T>> analytic;
    for (std::size_t i = 0; i < params.size(); ++i) analytic.push_back(tape.grad(pv[i]));

    double worst = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::function<T(const Array<T>&)> f = [&params, &forward, i](const Array<T>& x) {
            Array<T> saved = params.at(i);
            params.at(i) = x;
            Tape<T> t;
            auto vars = bind_params(t, params, false);
            T value = t.value(forward(t, vars)).v[0];
            params.at(i) = saved;
            return value;
        };
        worst = std::max(worst,
                         static_cast<double>(gradient_check<T>(f, params.at(i), eps, analytic[i])));
    }
    return worst;
}

}  // namespace detail

/// FD agreement for every tape primitive on random instances.
template <typename T>
SuiteResult suite_primitives(std::uint64_t seed, std::size_t rounds = 100) {
    using detail::random_array;
    Rng rng(seed);
    T eps = default_fd_eps<T>();
    double worst = 0;
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t round = 0; round < rounds; ++round) {
        std::size_t din = 2 + rng.below(4), dout = 2 + rng.below(4);
        Array<T> x0 = random_array<T>(rng, {din});
        Array<T> w0 = random_array<T>(rng, {dout, din});
        Array<T> b0 = random_array<T>(rng, {dout});
        Array<T> probe = random_array<T>(rng, {dout});
        std::size_t target = rng.below(din);

        // linear: gradient w.r.t. x, W and b through a probe projection
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> x) {
                return t.dot(t.linear(x, t.constant(w0), t.constant(b0)), t.constant(probe));
            }, x0, eps));
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> w) {
                return t.dot(t.linear(t.constant(x0), w, t.constant(b0)), t.constant(probe));
            }, w0, eps));
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> b) {
                return t.dot(t.linear(t.constant(x0), t.constant(w0), b), t.constant(probe));
            }, b0, eps));

        // softmax / tanh / sigmoid / l2_normalize under a probe
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> x) { return t.dot(t.softmax(x), t.constant(detail::probe_for(probe, din))); },
            x0, eps));
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> x) { return t.sum(t.tanh_(x)); }, x0, eps));
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> x) { return t.sum(t.sigmoid(x)); }, x0, eps));
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> x) { return t.dot(t.l2_normalize(x), t.constant(detail::probe_for(probe, din))); },
            x0, eps));

        // cross-entropy from logits
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> x) { return t.cross_entropy_logits(x, target); }, x0, eps));

        // elementwise and reshaping ops chained together
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> x) {
                Var<T> y = t.mul(x, t.add(x, t.constant(x0)));
                Var<T> z = t.concat({t.slice(y, 0, din / 2), t.slice(y, din / 2, din - din / 2)});
                return t.sum(t.scale(z, T(0.7)));
            }, x0, eps));

        // weighted_sum w.r.t. weights and items
        std::size_t k = 2 + rng.below(3);
        Array<T> weights = random_array<T>(rng, {k});
        std::vector<Array<T>> items;
        for (std::size_t i = 0; i < k; ++i) items.push_back(random_array<T>(rng, {din}));
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> w) {
                std::vector<Var<T>> iv;
                for (const auto& it : items) iv.push_back(t.constant(it));
                return t.dot(t.weighted_sum(w, iv), t.constant(detail::probe_for(probe, din)));
            }, weights, eps));
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> item0) {
                std::vector<Var<T>> iv{item0};
                for (std::size_t i = 1; i < k; ++i) iv.push_back(t.constant(items[i]));
                return t.dot(t.weighted_sum(t.constant(weights), iv), t.constant(detail::probe_for(probe, din)));
            }, items[0], eps));

        // one LSTM step, gradient w.r.t. the input
        std::size_t hidden = 3;
        ParamSet<T> cell;
        LstmIds lids = add_lstm_params(cell, "lstm", din, hidden);
        cell.init_uniform(rng, -0.5, 0.5);
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> x) {
                std::vector<Var<T>> pv = bind_params(t, cell, false);
                LstmState<T> st = lstm_step(t, pv, lids, x, lstm_initial_state(t, hidden));
                return t.sum(t.add(st.h, st.c));
            }, x0, eps));

        // bce term away from the clamp
        Array<T> c0({1}, {static_cast<T>(rng.uniform(0.05, 0.95))});
        T y = rng.below(2) ? T(1) : T(0);
        worst = std::max(worst, (double)gradient_check_tape<T>(
            [&](Tape<T>& t, Var<T> c) { return t.bce_term(c, y); }, c0, eps));
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return SuiteResult{"primitives", worst, (double)grad_tolerance<T>(), secs};
}

/// Closed-form CMCE gradients vs central differences of the loss.
template <typename T>
SuiteResult suite_cmce_closed_form(std::uint64_t seed, std::size_t instances = 100) {
    Rng rng(seed);
    T eps = default_fd_eps<T>();
    double sigma_lo = sizeof(T) == 4 ? 0.3 : 0.05;
    double sigma_hi = sizeof(T) == 4 ? 1.5 : 1.0;
    double worst = 0;
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < instances; ++i) {
        auto inst = detail::CmceInstance<T>::make(rng, 16, 8, 4, sigma_lo, sigma_hi);
        Array<T> x0 = inst.flatten_features();
        Array<T> analytic = inst.closed_form_flat();
        std::function<T(const Array<T>&)> f = [&inst](const Array<T>& x) { return inst.loss_at(x); };
        worst = std::max(worst, (double)gradient_check<T>(f, x0, eps, analytic));
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return SuiteResult{"cmce_closed_form_vs_fd", worst, (double)grad_tolerance<T>(), secs};
}

/// Three-way agreement: closed form, tape backprop and finite differences.
template <typename T>
SuiteResult suite_cmce_three_way(std::uint64_t seed, std::size_t instances = 25) {
    Rng rng(seed);
    T eps = default_fd_eps<T>();
    double sigma_lo = sizeof(T) == 4 ? 0.3 : 0.05;
    double sigma_hi = sizeof(T) == 4 ? 1.5 : 1.0;
    double worst = 0;
    auto t0 = std::chrono::steady_clock::now();
    for (std::size_t i = 0; i < instances; ++i) {
        auto inst = detail::CmceInstance<T>::make(rng, 16, 8, 4, sigma_lo, sigma_hi);
        Array<T> x0 = inst.flatten_features();
        Array<T> closed = inst.closed_form_flat();
        Array<T> tape = inst.tape_flat();
        std::function<T(const Array<T>&)> f = [&inst](const Array<T>& x) { return inst.loss_at(x); };
        worst = std::max(worst, detail::max_rel_diff(closed, tape));
        worst = std::max(worst, (double)gradient_check<T>(f, x0, eps, closed));
        worst = std::max(worst, (double)gradient_check<T>(f, x0, eps, tape));
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return SuiteResult{"cmce_three_way", worst, (double)grad_tolerance<T>(), secs};
}

/// FD agreement through the encoders (embedding table, LSTM, grid affine).
template <typename T>
SuiteResult suite_encoders(std::uint64_t seed, std::size_t instances = 5) {
    Rng rng(seed);
    T eps = default_fd_eps<T>();
    double worst = 0;
    auto t0 = std::chrono::steady_clock::now();
    EncoderDims dims;
    dims.vocab = 8;
    dims.embed = 4;
    dims.hidden = 5;
    dims.channels = 2;
    dims.region = 4;
    dims.grid = 2;
    dims.joint = 6;
    for (std::size_t i = 0; i < instances; ++i) {
        ParamSet<T> params;
        EncoderIds ids = add_encoder_params(params, dims);
        params.init_uniform(rng, -0.3, 0.3);

        TokenSequence tokens;
        tokens.vocab = static_cast<std::uint32_t>(dims.vocab);
        for (std::size_t t = 0; t < 3 + rng.below(3); ++t) {
            tokens.tokens.push_back(static_cast<std::uint32_t>(rng.below(dims.vocab)));
        }
        ImageGrid img;
        img.grid = dims.grid;
        img.channels = dims.channels;
        img.values.resize(img.grid * img.grid * img.channels);
        for (float& x : img.values) x = static_cast<float>(rng.uniform(-1, 1));

        worst = std::max(worst, detail::check_all_param_blocks<T>(
            params,
            [&](Tape<T>& t, const std::vector<Var<T>>& pv) {
                Var<T> a = t.sum(encode_text(t, pv, ids, tokens, dims).final);
                Var<T> b = t.sum(encode_image(t, pv, ids, img, dims).pooled);
                return t.add(a, b);
            },
            eps));
    }
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return SuiteResult{"encoders", worst, (double)grad_tolerance<T>(), secs};
}

/// End-to-end FD agreement of the stage-2 BCE loss through the confidence
/// head, decoder, both attentions and both encoders on a tiny instance.
template <typename T>
SuiteResult suite_stage2_end_to_end(std::uint64_t seed) {
    Rng rng(seed);
    T eps = default_fd_eps<T>();
    auto t0 = std::chrono::steady_clock::now();

    EncoderDims enc;
    enc.vocab = 8;
    enc.embed = 4;
    enc.hidden = 6;
    enc.channels = 2;
    enc.region = 4;
    enc.grid = 2;  // L = 4
    enc.joint = 6;
    CoattentionDims coa;
    coa.region = enc.region;
    coa.hidden = enc.hidden;
    coa.attn = 4;
    coa.importance = 4;
    coa.pre = 4;
    coa.decoder = 4;
    coa.head = 4;
    coa.steps = 2;

    ParamSet<T> params;
    EncoderIds enc_ids = add_encoder_params(params, enc);
    CoattentionIds coa_ids = add_coattention_params(params, coa, Stage2Variant{});
    params.init_uniform(rng, -0.3, 0.3);

    auto make_tokens = [&](std::size_t len) {
        TokenSequence s;
        s.vocab = static_cast<std::uint32_t>(enc.vocab);
        for (std::size_t t = 0; t < len; ++t) {
            s.tokens.push_back(static_cast<std::uint32_t>(rng.below(enc.vocab)));
        }
        return s;
    };
    auto make_grid = [&]() {
        ImageGrid g;
        g.grid = enc.grid;
        g.channels = enc.channels;
        g.values.resize(g.grid * g.grid * g.channels);
        for (float& x : g.values) x = static_cast<float>(rng.uniform(-1, 1));
        return g;
    };
    TokenSequence text_a = make_tokens(4), text_b = make_tokens(3);
    ImageGrid img_a = make_grid(), img_b = make_grid();

    auto forward = [&](Tape<T>& t, const std::vector<Var<T>>& pv) {
        auto confidence = [&](const TokenSequence& s, const ImageGrid& g) {
            ImageEncoding<T> ie = encode_image(t, pv, enc_ids, g, enc);
            TextEncoding<T> te = encode_text(t, pv, enc_ids, s, enc);
            auto rows = spatial_attention(t, pv, coa_ids.spa, te.states, ie.regions);
            auto gated = gate_regions(t, rows, ie.regions);
            auto joint = build_joint(t, te.states, gated);
            return match_confidence(t, pv, coa_ids, joint, coa);
        };
        std::vector<Var<T>> confs{confidence(text_a, img_a), confidence(text_b, img_b)};
        return bce_loss_node(t, confs, std::vector<T>{T(1), T(0)});
    };

    double worst = detail::check_all_param_blocks<T>(params, forward, eps);
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return SuiteResult{"stage2_end_to_end", worst, (double)grad_tolerance<T>(), secs};
}

template <typename T>
std::vector<SuiteResult> run_gradient_suites(std::uint64_t seed) {
    return {
        suite_primitives<T>(seed),
        suite_cmce_closed_form<T>(seed + 1),
        suite_cmce_three_way<T>(seed + 2),
        suite_encoders<T>(seed + 3),
        suite_stage2_end_to_end<T>(seed + 4),
    };
}

}  // namespace xmatch

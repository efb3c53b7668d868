#pragma once

#include <atomic>
#include <cstdint>
#include <vector>

#include "xmatch/lstm.hpp"
#include "xmatch/params.hpp"
#include "xmatch/sample_types.hpp"
#include "xmatch/tape.hpp"

namespace xmatch {

/// Toy stand-ins for the pretrained visual CNN and the language LSTM:
/// a shared per-cell affine + tanh over grid cells (region features), and a
/// word-LSTM over embedded tokens. Both modalities project into one joint
/// D-dimensional space and are L2-normalized there, so affinities are cosines.
struct EncoderDims {
    std::size_t vocab = 64;
    std::size_t embed = 32;     // word embedding size
    std::size_t hidden = 64;    // encoder LSTM hidden size (paper uses 512)
    std::size_t channels = 3;   // grid cell channels
    std::size_t region = 32;    // region feature size D_I
    std::size_t grid = 4;       // G, so L = G*G regions
    std::size_t joint = 64;     // joint embedding size D (paper uses 512)
};

struct EncoderIds {
    std::size_t embed = 0;
    LstmIds lstm;
    std::size_t cell_w = 0, cell_b = 0;          // per-cell affine ("1x1 conv")
    std::size_t img_proj_w = 0, img_proj_b = 0;  // pooled region -> joint space
    std::size_t txt_proj_w = 0, txt_proj_b = 0;  // last hidden state -> joint space
};

template <typename T>
EncoderIds add_encoder_params(ParamSet<T>& params, const EncoderDims& d, const std::string& prefix = "enc") {
    EncoderIds ids;
    ids.embed = params.add(prefix + ".embed", {d.vocab, d.embed}, OptimGroup::adam);
    ids.lstm = add_lstm_params(params, prefix + ".lstm", d.embed, d.hidden, OptimGroup::adam);
    ids.cell_w = params.add(prefix + ".cell_w", {d.region, d.channels}, OptimGroup::sgd);
    ids.cell_b = params.add(prefix + ".cell_b", {d.region}, OptimGroup::sgd);
    ids.img_proj_w = params.add(prefix + ".img_proj_w", {d.joint, d.region}, OptimGroup::sgd);
    ids.img_proj_b = params.add(prefix + ".img_proj_b", {d.joint}, OptimGroup::sgd);
    ids.txt_proj_w = params.add(prefix + ".txt_proj_w", {d.joint, d.hidden}, OptimGroup::adam);
    ids.txt_proj_b = params.add(prefix + ".txt_proj_b", {d.joint}, OptimGroup::adam);
    return ids;
}

// Instrumentation for the O(N) evaluation claim: every forward pass through
// an encoder bumps the matching counter.
inline std::atomic<std::uint64_t>& image_pass_counter() {
    static std::atomic<std::uint64_t> c{0};
    return c;
}
inline std::atomic<std::uint64_t>& text_pass_counter() {
    static std::atomic<std::uint64_t> c{0};
    return c;
}

template <typename T>
struct ImageEncoding {
    std::vector<Var<T>> regions;  // L region features of size D_I
    Var<T> pooled;                // unit-norm joint feature
};

template <typename T>
struct TextEncoding {
    std::vector<Var<T>> states;  // T hidden states of size D_H
    Var<T> final;                // unit-norm joint feature
};

template <typename T>
ImageEncoding<T> encode_image(Tape<T>& tape, const std::vector<Var<T>>& pv, const EncoderIds& ids,
                              const ImageGrid& img, const EncoderDims& d) {
    img.validate();
    if (img.grid != d.grid || img.channels != d.channels) {
        throw ShapeError("encode_image: grid " + std::to_string(img.grid) + "x" + std::to_string(img.grid) +
                         "x" + std::to_string(img.channels) + " does not match encoder (" +
                         std::to_string(d.grid) + ", " + std::to_string(d.channels) + ")");
    }
    image_pass_counter().fetch_add(1, std::memory_order_relaxed);

    ImageEncoding<T> out;
    out.regions.reserve(img.cell_count());
    for (std::size_t l = 0; l < img.cell_count(); ++l) {
        Array<T> cell({d.channels});
        for (std::size_t c = 0; c < d.channels; ++c) cell.v[c] = static_cast<T>(img.cell(l)[c]);
        Var<T> x = tape.constant(std::move(cell));
        out.regions.push_back(tape.tanh_(tape.linear(x, pv[ids.cell_w], pv[ids.cell_b])));
    }
    Var<T> pooled_region = tape.mean(out.regions);
    out.pooled = tape.l2_normalize(tape.linear(pooled_region, pv[ids.img_proj_w], pv[ids.img_proj_b]));
    return out;
}

template <typename T>
TextEncoding<T> encode_text(Tape<T>& tape, const std::vector<Var<T>>& pv, const EncoderIds& ids,
                            const TokenSequence& s, const EncoderDims& d) {
    s.validate();
    if (s.vocab != d.vocab) {
        throw ShapeError("encode_text: vocabulary " + std::to_string(s.vocab) + " does not match encoder " +
                         std::to_string(d.vocab));
    }
    text_pass_counter().fetch_add(1, std::memory_order_relaxed);

    TextEncoding<T> out;
    out.states.reserve(s.tokens.size());
    LstmState<T> state = lstm_initial_state(tape, d.hidden);
    for (std::uint32_t tok : s.tokens) {
        Var<T> x = tape.row(pv[ids.embed], tok);
        state = lstm_step(tape, pv, ids.lstm, x, state);
        out.states.push_back(state.h);
    }
    out.final = tape.l2_normalize(tape.linear(state.h, pv[ids.txt_proj_w], pv[ids.txt_proj_b]));
    return out;
}

}  // namespace xmatch

#pragma once

#include "xmatch/params.hpp"
#include "xmatch/tape.hpp"

namespace xmatch {

// Parameter-set handles for one LSTM cell. Weights are stacked per gate in
// the row order [input, forget, output, candidate], so w_x is [4H x Dx],
// w_h is [4H x H] and b is [4H].
struct LstmIds {
    std::size_t w_x = 0;
    std::size_t w_h = 0;
    std::size_t b = 0;
};

template <typename T>
struct LstmState {
    Var<T> h;
    Var<T> c;
};

template <typename T>
LstmIds add_lstm_params(ParamSet<T>& params, const std::string& prefix, std::size_t input_dim,
                        std::size_t hidden_dim, OptimGroup group = OptimGroup::adam) {
    LstmIds ids;
    ids.w_x = params.add(prefix + ".w_x", {4 * hidden_dim, input_dim}, group);
    ids.w_h = params.add(prefix + ".w_h", {4 * hidden_dim, hidden_dim}, group);
    ids.b = params.add(prefix + ".b", {4 * hidden_dim}, group);
    return ids;
}

template <typename T>
LstmState<T> lstm_initial_state(Tape<T>& tape, std::size_t hidden_dim) {
    return LstmState<T>{tape.zeros({hidden_dim}), tape.zeros({hidden_dim})};
}

// One recurrence step. With all-zero weights the gates sit at 0.5 and the
// candidate at tanh(0)=0, so the state stays exactly zero.
template <typename T>
LstmState<T> lstm_step(Tape<T>& tape, const std::vector<Var<T>>& pv, const LstmIds& ids, Var<T> x,
                       const LstmState<T>& prev) {
    std::size_t hidden = tape.value(prev.h).numel();
    Var<T> z = tape.add(tape.matvec(pv[ids.w_x], x), tape.add(tape.matvec(pv[ids.w_h], prev.h), pv[ids.b]));
    Var<T> gi = tape.sigmoid(tape.slice(z, 0, hidden));
    Var<T> gf = tape.sigmoid(tape.slice(z, hidden, hidden));
    Var<T> go = tape.sigmoid(tape.slice(z, 2 * hidden, hidden));
    Var<T> gc = tape.tanh_(tape.slice(z, 3 * hidden, hidden));
    Var<T> c = tape.add(tape.mul(gf, prev.c), tape.mul(gi, gc));
    Var<T> h = tape.mul(go, tape.tanh_(c));
    return LstmState<T>{h, c};
}

}  // namespace xmatch

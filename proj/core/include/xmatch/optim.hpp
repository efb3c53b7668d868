#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "xmatch/params.hpp"

namespace xmatch {

/// Per-group optimizer over a ParamSet: Adam for OptimGroup::adam entries,
/// SGD with momentum for OptimGroup::sgd entries. Frozen entries (mask false)
/// are skipped entirely, including their moment updates.
template <typename T>
class Optimizer {
public:
    struct Settings {
        T lr_adam = T(1e-3);
        T lr_sgd = T(1e-2);
        T beta1 = T(0.9);
        T beta2 = T(0.999);
        T adam_eps = T(1e-8);
        T momentum = T(0.9);
    };

    Optimizer(const ParamSet<T>& params, Settings s) : settings_(s) {
        m_.reserve(params.size());
        v_.reserve(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_.emplace_back(params.at(i).shape);
            v_.emplace_back(params.at(i).shape);
        }
    }

    // grads[i] must match params entry i. Throws NumericError if any updated
    // parameter goes non-finite (temperature-scaled losses are the usual culprit).
    void step(ParamSet<T>& params, const std::vector<Array<T>>& grads,
              const std::function<bool(const typename ParamSet<T>::Entry&)>& trainable = nullptr) {
        ++t_;
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& entry = params.entry(i);
            if (trainable && !trainable(entry)) continue;
            const Array<T>& g = grads[i];
            require_same_shape(entry.value, g, "optimizer step");
            if (entry.group == OptimGroup::adam) {
                adam_update(entry.value, g, m_[i], v_[i]);
            } else {
                sgd_update(entry.value, g, m_[i]);
            }
            if (!all_finite(entry.value)) {
                throw NumericError("parameter '" + entry.name + "' non-finite after optimizer step " +
                                   std::to_string(t_));
            }
        }
    }

    std::uint64_t steps() const { return t_; }

private:
    void adam_update(Array<T>& w, const Array<T>& g, Array<T>& m, Array<T>& v) {
        T b1 = settings_.beta1, b2 = settings_.beta2;
        T bias1 = T(1) - std::pow(b1, static_cast<T>(t_));
        T bias2 = T(1) - std::pow(b2, static_cast<T>(t_));
        for (std::size_t i = 0; i < w.numel(); ++i) {
            m.v[i] = b1 * m.v[i] + (T(1) - b1) * g.v[i];
            v.v[i] = b2 * v.v[i] + (T(1) - b2) * g.v[i] * g.v[i];
            T mhat = m.v[i] / bias1;
            T vhat = v.v[i] / bias2;
            w.v[i] -= settings_.lr_adam * mhat / (std::sqrt(vhat) + settings_.adam_eps);
        }
    }

    void sgd_update(Array<T>& w, const Array<T>& g, Array<T>& vel) {
        for (std::size_t i = 0; i < w.numel(); ++i) {
            vel.v[i] = settings_.momentum * vel.v[i] + g.v[i];
            w.v[i] -= settings_.lr_sgd * vel.v[i];
        }
    }

    Settings settings_;
    std::vector<Array<T>> m_;  // Adam first moment / SGD velocity
    std::vector<Array<T>> v_;  // Adam second moment
    std::uint64_t t_ = 0;
};

// Collect gradients for all bound parameter vars, zeros for frozen ones.
template <typename T>
std::vector<Array<T>> collect_grads(const Tape<T>& tape, const ParamSet<T>& params,
                                    const std::vector<Var<T>>& vars) {
    std::vector<Array<T>> grads;
    grads.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        grads.push_back(tape.grad(vars[i]));
    }
    return grads;
}

}  // namespace xmatch

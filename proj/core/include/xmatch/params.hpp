#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "xmatch/array.hpp"
#include "xmatch/rng.hpp"
#include "xmatch/tape.hpp"

namespace xmatch {

// Which update rule a parameter block belongs to. Recurrent and attention
// weights take Adam; the grid-encoder weights take SGD with momentum.
enum class OptimGroup { adam, sgd };

/// Named, ordered collection of parameter blocks. The ordering is the
/// serialization order for checkpoints and the binding order for tapes,
/// so it must stay deterministic.
template <typename T>
class ParamSet {
public:
    struct Entry {
        std::string name;
        Array<T> value;
        OptimGroup group;
    };

    std::size_t add(std::string name, std::vector<std::size_t> shape, OptimGroup group) {
        if (index_.count(name)) throw StateError("duplicate parameter name: " + name);
        index_[name] = entries_.size();
        entries_.push_back(Entry{std::move(name), Array<T>(std::move(shape)), group});
        return entries_.size() - 1;
    }

    std::size_t size() const { return entries_.size(); }
    Entry& entry(std::size_t i) { return entries_[i]; }
    const Entry& entry(std::size_t i) const { return entries_[i]; }
    Array<T>& at(std::size_t i) { return entries_[i].value; }
    const Array<T>& at(std::size_t i) const { return entries_[i].value; }

    bool has(const std::string& name) const { return index_.count(name) != 0; }
    std::size_t id_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw StateError("unknown parameter: " + name);
        return it->second;
    }
    Array<T>& by_name(const std::string& name) { return at(id_of(name)); }

    void init_uniform(Rng& rng, double lo, double hi) {
        for (Entry& e : entries_) {
            for (T& x : e.value.v) x = static_cast<T>(rng.uniform(lo, hi));
        }
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const Entry& e : entries_) n += e.value.numel();
        return n;
    }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

// Bind every parameter block onto a tape; result is indexed by entry id.
template <typename T>
std::vector<Var<T>> bind_params(Tape<T>& tape, const ParamSet<T>& params, bool needs_grad = true) {
    std::vector<Var<T>> vars;
    vars.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
        vars.push_back(tape.leaf(params.at(i), needs_grad));
    }
    return vars;
}

}  // namespace xmatch

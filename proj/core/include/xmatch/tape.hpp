#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "xmatch/array.hpp"
#include "xmatch/errors.hpp"

namespace xmatch {

template <typename T>
class Tape;

// Handle to a tape node. Only valid for the tape that produced it.
template <typename T>
struct Var {
    std::uint32_t id = std::numeric_limits<std::uint32_t>::max();
    bool valid() const { return id != std::numeric_limits<std::uint32_t>::max(); }
};

/// Define-by-run gradient tape. Nodes are appended in forward order, so the
/// backward pass is a single reverse sweep over the node list; every node is
/// visited exactly once and gradients accumulate into per-node buffers.
/// A tape is built, run backward once, and discarded (one per training step).
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<T> leaf(Array<T> value, bool needs_grad) {
        require_finite(value, "leaf");
        return push(std::move(value), needs_grad, {});
    }

    Var<T> constant(Array<T> value) { return leaf(std::move(value), false); }

    Var<T> zeros(std::vector<std::size_t> shape) { return constant(Array<T>(std::move(shape))); }

    const Array<T>& value(Var<T> x) const { return node(x).value; }
    const Array<T>& grad(Var<T> x) const {
        const Node& n = node(x);
        if (!n.needs_grad) throw StateError("gradient requested for a node without gradient tracking");
        return n.grad;
    }
    std::size_t size() const { return nodes_.size(); }

    // y = W x + b with x: [Din], W: [Dout x Din], b: [Dout].
    Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
        const Array<T>& xv = value(x);
        const Array<T>& wv = value(w);
        const Array<T>& bv = value(b);
        if (wv.rank() != 2 || xv.rank() != 1 || bv.rank() != 1 || wv.shape[1] != xv.shape[0] ||
            wv.shape[0] != bv.shape[0]) {
            throw ShapeError("linear: W " + wv.shape_string() + ", x " + xv.shape_string() + ", b " +
                             bv.shape_string());
        }
        std::size_t dout = wv.shape[0], din = wv.shape[1];
        Array<T> y({dout});
        for (std::size_t i = 0; i < dout; ++i) {
            T s = bv.v[i];
            const T* wrow = wv.v.data() + i * din;
            for (std::size_t j = 0; j < din; ++j) s += wrow[j] * xv.v[j];
            y.v[i] = s;
        }
        return push(std::move(y), any_grad({x, w, b}), [this, x, w, b](const Node& out) {
            const Array<T>& xv = value(x);
            const Array<T>& wv = value(w);
            std::size_t dout = wv.shape[0], din = wv.shape[1];
            for (std::size_t i = 0; i < dout; ++i) {
                T g = out.grad.v[i];
                if (grad_slot(x)) {
                    const T* wrow = wv.v.data() + i * din;
                    for (std::size_t j = 0; j < din; ++j) grad_slot(x)->v[j] += wrow[j] * g;
                }
                if (grad_slot(w)) {
                    T* grow = grad_slot(w)->v.data() + i * din;
                    for (std::size_t j = 0; j < din; ++j) grow[j] += g * xv.v[j];
                }
                if (grad_slot(b)) grad_slot(b)->v[i] += g;
            }
        });
    }

    // y = W x with x: [Din], W: [Dout x Din].
    Var<T> matvec(Var<T> w, Var<T> x) {
        const Array<T>& xv = value(x);
        const Array<T>& wv = value(w);
        if (wv.rank() != 2 || xv.rank() != 1 || wv.shape[1] != xv.shape[0]) {
            throw ShapeError("matvec: W " + wv.shape_string() + ", x " + xv.shape_string());
        }
        std::size_t dout = wv.shape[0], din = wv.shape[1];
        Array<T> y({dout});
        for (std::size_t i = 0; i < dout; ++i) {
            T s = 0;
            const T* wrow = wv.v.data() + i * din;
            for (std::size_t j = 0; j < din; ++j) s += wrow[j] * xv.v[j];
            y.v[i] = s;
        }
        return push(std::move(y), any_grad({x, w}), [this, x, w](const Node& out) {
            const Array<T>& xv = value(x);
            const Array<T>& wv = value(w);
            std::size_t dout = wv.shape[0], din = wv.shape[1];
            for (std::size_t i = 0; i < dout; ++i) {
                T g = out.grad.v[i];
                if (grad_slot(x)) {
                    const T* wrow = wv.v.data() + i * din;
                    for (std::size_t j = 0; j < din; ++j) grad_slot(x)->v[j] += wrow[j] * g;
                }
                if (grad_slot(w)) {
                    T* grow = grad_slot(w)->v.data() + i * din;
                    for (std::size_t j = 0; j < din; ++j) grow[j] += g * xv.v[j];
                }
            }
        });
    }

    // y = M x where M is a constant matrix excluded from gradient tracking.
    Var<T> matvec_const(const Array<T>& m, Var<T> x) {
        const Array<T>& xv = value(x);
        if (m.rank() != 2 || xv.rank() != 1 || m.shape[1] != xv.shape[0]) {
            throw ShapeError("matvec_const: M " + m.shape_string() + ", x " + xv.shape_string());
        }
        std::size_t rows = m.shape[0], cols = m.shape[1];
        Array<T> y({rows});
        for (std::size_t i = 0; i < rows; ++i) {
            T s = 0;
            const T* mrow = m.v.data() + i * cols;
            for (std::size_t j = 0; j < cols; ++j) s += mrow[j] * xv.v[j];
            y.v[i] = s;
        }
        Array<T> mc = m;  // keep a copy alive for the backward sweep
        return push(std::move(y), any_grad({x}), [this, x, mc = std::move(mc)](const Node& out) {
            if (!grad_slot(x)) return;
            std::size_t rows = mc.shape[0], cols = mc.shape[1];
            for (std::size_t i = 0; i < rows; ++i) {
                T g = out.grad.v[i];
                const T* mrow = mc.v.data() + i * cols;
                for (std::size_t j = 0; j < cols; ++j) grad_slot(x)->v[j] += mrow[j] * g;
            }
        });
    }

    Var<T> tanh_(Var<T> x) {
        Array<T> y = value(x);
        for (T& e : y.v) e = std::tanh(e);
        return push(std::move(y), any_grad({x}), [this, x](const Node& out) {
            if (!grad_slot(x)) return;
            for (std::size_t i = 0; i < out.value.numel(); ++i) {
                T t = out.value.v[i];
                grad_slot(x)->v[i] += out.grad.v[i] * (T(1) - t * t);
            }
        });
    }

    Var<T> sigmoid(Var<T> x) {
        Array<T> y = value(x);
        for (T& e : y.v) e = T(1) / (T(1) + std::exp(-e));
        return push(std::move(y), any_grad({x}), [this, x](const Node& out) {
            if (!grad_slot(x)) return;
            for (std::size_t i = 0; i < out.value.numel(); ++i) {
                T s = out.value.v[i];
                grad_slot(x)->v[i] += out.grad.v[i] * s * (T(1) - s);
            }
        });
    }

    // Max-subtracted softmax over a vector.
    Var<T> softmax(Var<T> x) {
        const Array<T>& xv = value(x);
        if (xv.numel() == 0) throw ShapeError("softmax: empty input");
        Array<T> y = xv;
        T mx = y.v[0];
        for (T e : y.v) mx = std::max(mx, e);
        T denom = 0;
        for (T& e : y.v) {
            e = std::exp(e - mx);
            denom += e;
        }
        for (T& e : y.v) e /= denom;
        return push(std::move(y), any_grad({x}), [this, x](const Node& out) {
            if (!grad_slot(x)) return;
            T acc = 0;
            for (std::size_t i = 0; i < out.value.numel(); ++i) acc += out.value.v[i] * out.grad.v[i];
            for (std::size_t i = 0; i < out.value.numel(); ++i) {
                grad_slot(x)->v[i] += out.value.v[i] * (out.grad.v[i] - acc);
            }
        });
    }

    // Scalar -log softmax(x)[target], computed from logits for stability.
    Var<T> cross_entropy_logits(Var<T> x, std::size_t target) {
        const Array<T>& xv = value(x);
        if (xv.numel() == 0) throw ShapeError("cross_entropy_logits: empty input");
        if (target >= xv.numel()) {
            throw InputError("cross_entropy_logits: target " + std::to_string(target) + " out of range " +
                             std::to_string(xv.numel()));
        }
        T mx = xv.v[0];
        for (T e : xv.v) mx = std::max(mx, e);
        T denom = 0;
        for (T e : xv.v) denom += std::exp(e - mx);
        Array<T> y({1});
        y.v[0] = std::log(denom) + mx - xv.v[target];
        return push(std::move(y), any_grad({x}), [this, x, target, mx, denom](const Node& out) {
            if (!grad_slot(x)) return;
            const Array<T>& xv = value(x);
            T g = out.grad.v[0];
            for (std::size_t i = 0; i < xv.numel(); ++i) {
                T p = std::exp(xv.v[i] - mx) / denom;
                grad_slot(x)->v[i] += g * (p - (i == target ? T(1) : T(0)));
            }
        });
    }

    Var<T> add(Var<T> a, Var<T> b) {
        require_same_shape(value(a), value(b), "add");
        Array<T> y = value(a);
        for (std::size_t i = 0; i < y.numel(); ++i) y.v[i] += value(b).v[i];
        return push(std::move(y), any_grad({a, b}), [this, a, b](const Node& out) {
            accumulate(a, out.grad);
            accumulate(b, out.grad);
        });
    }

    Var<T> sub(Var<T> a, Var<T> b) {
        require_same_shape(value(a), value(b), "sub");
        Array<T> y = value(a);
        for (std::size_t i = 0; i < y.numel(); ++i) y.v[i] -= value(b).v[i];
        return push(std::move(y), any_grad({a, b}), [this, a, b](const Node& out) {
            accumulate(a, out.grad);
            if (grad_slot(b)) {
                for (std::size_t i = 0; i < out.grad.numel(); ++i) grad_slot(b)->v[i] -= out.grad.v[i];
            }
        });
    }

    // Hadamard product.
    Var<T> mul(Var<T> a, Var<T> b) {
        require_same_shape(value(a), value(b), "mul");
        Array<T> y = value(a);
        for (std::size_t i = 0; i < y.numel(); ++i) y.v[i] *= value(b).v[i];
        return push(std::move(y), any_grad({a, b}), [this, a, b](const Node& out) {
            const Array<T>& av = value(a);
            const Array<T>& bv = value(b);
            for (std::size_t i = 0; i < out.grad.numel(); ++i) {
                if (grad_slot(a)) grad_slot(a)->v[i] += out.grad.v[i] * bv.v[i];
                if (grad_slot(b)) grad_slot(b)->v[i] += out.grad.v[i] * av.v[i];
            }
        });
    }

    Var<T> scale(Var<T> x, T c) {
        Array<T> y = value(x);
        for (T& e : y.v) e *= c;
        return push(std::move(y), any_grad({x}), [this, x, c](const Node& out) {
            if (!grad_slot(x)) return;
            for (std::size_t i = 0; i < out.grad.numel(); ++i) grad_slot(x)->v[i] += c * out.grad.v[i];
        });
    }

    Var<T> sum(Var<T> x) {
        T s = 0;
        for (T e : value(x).v) s += e;
        return push(Array<T>({1}, {s}), any_grad({x}), [this, x](const Node& out) {
            if (!grad_slot(x)) return;
            for (T& g : grad_slot(x)->v) g += out.grad.v[0];
        });
    }

    Var<T> dot(Var<T> a, Var<T> b) {
        require_same_shape(value(a), value(b), "dot");
        T s = 0;
        for (std::size_t i = 0; i < value(a).numel(); ++i) s += value(a).v[i] * value(b).v[i];
        return push(Array<T>({1}, {s}), any_grad({a, b}), [this, a, b](const Node& out) {
            const Array<T>& av = value(a);
            const Array<T>& bv = value(b);
            T g = out.grad.v[0];
            for (std::size_t i = 0; i < av.numel(); ++i) {
                if (grad_slot(a)) grad_slot(a)->v[i] += g * bv.v[i];
                if (grad_slot(b)) grad_slot(b)->v[i] += g * av.v[i];
            }
        });
    }

    Var<T> concat(const std::vector<Var<T>>& parts) {
        if (parts.empty()) throw ShapeError("concat: no inputs");
        std::size_t total = 0;
        for (Var<T> p : parts) total += value(p).numel();
        Array<T> y({total});
        std::size_t off = 0;
        for (Var<T> p : parts) {
            const Array<T>& pv = value(p);
            std::copy(pv.v.begin(), pv.v.end(), y.v.begin() + static_cast<std::ptrdiff_t>(off));
            off += pv.numel();
        }
        bool ng = false;
        for (Var<T> p : parts) ng = ng || node(p).needs_grad;
        return push(std::move(y), ng, [this, parts](const Node& out) {
            std::size_t off = 0;
            for (Var<T> p : parts) {
                std::size_t n = value(p).numel();
                if (grad_slot(p)) {
                    for (std::size_t i = 0; i < n; ++i) grad_slot(p)->v[i] += out.grad.v[off + i];
                }
                off += n;
            }
        });
    }

    Var<T> slice(Var<T> x, std::size_t offset, std::size_t len) {
        const Array<T>& xv = value(x);
        if (offset + len > xv.numel()) {
            throw ShapeError("slice: [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                             ") out of " + std::to_string(xv.numel()));
        }
        Array<T> y({len});
        std::copy(xv.v.begin() + static_cast<std::ptrdiff_t>(offset),
                  xv.v.begin() + static_cast<std::ptrdiff_t>(offset + len), y.v.begin());
        return push(std::move(y), any_grad({x}), [this, x, offset, len](const Node& out) {
            if (!grad_slot(x)) return;
            for (std::size_t i = 0; i < len; ++i) grad_slot(x)->v[offset + i] += out.grad.v[i];
        });
    }

    // Row r of a [R x C] table; gradients accumulate into that row only.
    Var<T> row(Var<T> table, std::size_t r) {
        const Array<T>& tv = value(table);
        if (tv.rank() != 2) throw ShapeError("row: table must be 2-d, got " + tv.shape_string());
        if (r >= tv.shape[0]) {
            throw InputError("row: index " + std::to_string(r) + " out of " + std::to_string(tv.shape[0]));
        }
        std::size_t c = tv.shape[1];
        Array<T> y({c});
        std::copy(tv.v.begin() + static_cast<std::ptrdiff_t>(r * c),
                  tv.v.begin() + static_cast<std::ptrdiff_t>((r + 1) * c), y.v.begin());
        return push(std::move(y), any_grad({table}), [this, table, r, c](const Node& out) {
            if (!grad_slot(table)) return;
            for (std::size_t i = 0; i < c; ++i) grad_slot(table)->v[r * c + i] += out.grad.v[i];
        });
    }

    // y = sum_k w[k] * items[k]; every item must share one shape.
    Var<T> weighted_sum(Var<T> weights, const std::vector<Var<T>>& items) {
        const Array<T>& wv = value(weights);
        if (wv.numel() != items.size()) {
            throw ShapeError("weighted_sum: " + std::to_string(wv.numel()) + " weights vs " +
                             std::to_string(items.size()) + " items");
        }
        if (items.empty()) throw ShapeError("weighted_sum: no items");
        Array<T> y(value(items[0]).shape);
        for (std::size_t k = 0; k < items.size(); ++k) {
            require_same_shape(value(items[0]), value(items[k]), "weighted_sum");
            const Array<T>& iv = value(items[k]);
            for (std::size_t i = 0; i < y.numel(); ++i) y.v[i] += wv.v[k] * iv.v[i];
        }
        bool ng = node(weights).needs_grad;
        for (Var<T> it : items) ng = ng || node(it).needs_grad;
        return push(std::move(y), ng, [this, weights, items](const Node& out) {
            const Array<T>& wv = value(weights);
            for (std::size_t k = 0; k < items.size(); ++k) {
                const Array<T>& iv = value(items[k]);
                if (grad_slot(weights)) {
                    T s = 0;
                    for (std::size_t i = 0; i < iv.numel(); ++i) s += out.grad.v[i] * iv.v[i];
                    grad_slot(weights)->v[k] += s;
                }
                if (grad_slot(items[k])) {
                    for (std::size_t i = 0; i < iv.numel(); ++i) {
                        grad_slot(items[k])->v[i] += wv.v[k] * out.grad.v[i];
                    }
                }
            }
        });
    }

    Var<T> mean(const std::vector<Var<T>>& items) {
        if (items.empty()) throw ShapeError("mean: no items");
        Array<T> w({items.size()});
        for (T& e : w.v) e = T(1) / static_cast<T>(items.size());
        return weighted_sum(constant(std::move(w)), items);
    }

    // x / ||x||; a zero-norm input is a degeneracy, not something to epsilon away.
    Var<T> l2_normalize(Var<T> x) {
        const Array<T>& xv = value(x);
        T n = l2_norm(xv);
        if (!(n > T(0))) throw NumericError("cannot L2-normalize a zero-norm vector");
        Array<T> y = xv;
        for (T& e : y.v) e /= n;
        return push(std::move(y), any_grad({x}), [this, x, n](const Node& out) {
            if (!grad_slot(x)) return;
            T acc = 0;
            for (std::size_t i = 0; i < out.value.numel(); ++i) acc += out.value.v[i] * out.grad.v[i];
            for (std::size_t i = 0; i < out.value.numel(); ++i) {
                grad_slot(x)->v[i] += (out.grad.v[i] - out.value.v[i] * acc) / n;
            }
        });
    }

    // Binary cross-entropy term for one confidence c in (0,1) and target y.
    // c is clamped to [1e-7, 1-1e-7] before the logs.
    Var<T> bce_term(Var<T> c, T target) {
        const Array<T>& cv = value(c);
        if (cv.numel() != 1) throw ShapeError("bce_term: confidence must be scalar");
        const T lo = T(1e-7), hi = T(1) - T(1e-7);
        T cc = std::min(hi, std::max(lo, cv.v[0]));
        Array<T> y({1});
        y.v[0] = -(target * std::log(cc) + (T(1) - target) * std::log(T(1) - cc));
        return push(std::move(y), any_grad({c}), [this, c, target, lo, hi](const Node& out) {
            if (!grad_slot(c)) return;
            T raw = value(c).v[0];
            if (raw < lo || raw > hi) return;  // clamped region: zero gradient
            grad_slot(c)->v[0] += out.grad.v[0] * (-(target / raw) + (T(1) - target) / (T(1) - raw));
        });
    }

    void seed(Var<T> x, const Array<T>& g) {
        Node& n = node_mut(x);
        if (!n.needs_grad) throw StateError("cannot seed gradient on a node without gradient tracking");
        require_same_shape(n.value, g, "seed");
        for (std::size_t i = 0; i < g.numel(); ++i) n.grad.v[i] += g.v[i];
    }

    // Reverse sweep over the whole tape. Seeds must be planted first.
    void backward() {
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.backward) n.backward(n);
        }
    }

    void backward_scalar(Var<T> root) {
        if (value(root).numel() != 1) throw ShapeError("backward_scalar: root must be scalar");
        seed(root, Array<T>({1}, {T(1)}));
        backward();
    }

private:
    struct Node {
        Array<T> value;
        Array<T> grad;
        bool needs_grad = false;
        std::function<void(const Node&)> backward;
    };

    const Node& node(Var<T> x) const {
        if (!x.valid() || x.id >= nodes_.size()) throw StateError("invalid tape variable");
        return nodes_[x.id];
    }
    Node& node_mut(Var<T> x) { return const_cast<Node&>(node(x)); }

    Array<T>* grad_slot(Var<T> x) {
        Node& n = nodes_[x.id];
        return n.needs_grad ? &n.grad : nullptr;
    }

    void accumulate(Var<T> x, const Array<T>& g) {
        if (Array<T>* slot = grad_slot(x)) {
            for (std::size_t i = 0; i < g.numel(); ++i) slot->v[i] += g.v[i];
        }
    }

    bool any_grad(std::initializer_list<Var<T>> xs) const {
        for (Var<T> x : xs) {
            if (node(x).needs_grad) return true;
        }
        return false;
    }

    Var<T> push(Array<T> value, bool needs_grad, std::function<void(const Node&)> backward) {
        require_finite(value, "tape op output");
        Node n;
        n.grad = needs_grad ? Array<T>(value.shape) : Array<T>();
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.backward = needs_grad ? std::move(backward) : nullptr;
        nodes_.push_back(std::move(n));
        return Var<T>{static_cast<std::uint32_t>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
};

}  // namespace xmatch

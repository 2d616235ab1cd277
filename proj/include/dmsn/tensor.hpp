#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dmsn/errors.hpp"
#include "dmsn/rng.hpp"

namespace dmsn {

// A named trainable array. Values persist across forward passes; gradients
// accumulate during backward and are consumed by the optimizer. Rank is kept
// (1 or 2) so checkpoints round-trip the original shape.
struct Parameter {
    std::vector<int> shape;
    std::vector<double> value;
    std::vector<double> grad;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
    bool requires_grad = true;

    int rows() const { return shape.size() == 1 ? 1 : shape[0]; }
    int cols() const { return shape.size() == 1 ? shape[0] : shape[1]; }
    size_t size() const { return value.size(); }

    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }
};

class Tape;

// Lightweight handle to a tape node.
struct T {
    Tape* tape = nullptr;
    int i = -1;
    bool valid() const { return tape != nullptr && i >= 0; }
};

// Reverse-mode autodiff tape. Nodes are recorded in topological order during
// the forward pass; backward() walks them once in reverse. All values are
// dense row-major doubles viewed as rows x cols matrices (vectors are 1 x n).
class Tape {
public:
    struct Node {
        int r = 0, c = 0;
        std::vector<double> val;
        std::vector<double> grad;
        std::function<void()> back;  // empty for leaves and constants
        bool needs_grad = false;
        Parameter* param = nullptr;
    };

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    size_t size() const { return nodes_.size(); }

    void clear() { nodes_.clear(); }

    Node& node(int i) { return nodes_[i]; }
    const Node& node(int i) const { return nodes_[i]; }

    int rows(int i) const { return nodes_[i].r; }
    int cols(int i) const { return nodes_[i].c; }
    std::vector<double>& val(int i) { return nodes_[i].val; }
    std::vector<double>& grad(int i) { return nodes_[i].grad; }

    int alloc(int r, int c, bool needs_grad) {
        Node n;
        n.r = r;
        n.c = c;
        n.val.assign(static_cast<size_t>(r) * c, 0.0);
        n.needs_grad = needs_grad && grad_enabled_;
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Runs reverse accumulation from a scalar loss. Gradients of parameter
    // leaves are added into Parameter::grad; unreachable grads stay untouched.
    void backward(const T& loss) {
        const Node& ln = nodes_[loss.i];
        if (ln.r != 1 || ln.c != 1) {
            throw ContractError("backward requires a scalar loss, got " + std::to_string(ln.r) + "x" + std::to_string(ln.c));
        }
        for (auto& n : nodes_) {
            if (n.needs_grad) n.grad.assign(n.val.size(), 0.0);
        }
        if (!nodes_[loss.i].needs_grad) return;  // loss independent of parameters
        nodes_[loss.i].grad[0] = 1.0;
        for (int i = loss.i; i >= 0; --i) {
            Node& n = nodes_[i];
            if (n.needs_grad && n.back) n.back();
        }
        for (auto& n : nodes_) {
            if (n.param != nullptr && n.needs_grad) {
                for (size_t k = 0; k < n.grad.size(); ++k) n.param->grad[k] += n.grad[k];
            }
        }
    }

private:
    std::vector<Node> nodes_;
    bool grad_enabled_ = true;
};

// ---- node constructors ----

inline T constant(Tape& tape, int r, int c, std::vector<double> data) {
    if (static_cast<size_t>(r) * c != data.size()) {
        throw DimensionError("constant: data size " + std::to_string(data.size()) + " != " + std::to_string(r) + "x" + std::to_string(c));
    }
    int i = tape.alloc(r, c, false);
    tape.val(i) = std::move(data);
    return {&tape, i};
}

inline T zeros(Tape& tape, int r, int c) {
    return {&tape, tape.alloc(r, c, false)};
}

inline T leaf(Tape& tape, Parameter& p) {
    int i = tape.alloc(p.rows(), p.cols(), p.requires_grad);
    tape.val(i) = p.value;
    tape.node(i).param = p.requires_grad ? &p : nullptr;
    return {&tape, i};
}

inline double item(const T& t) {
    const auto& n = t.tape->node(t.i);
    if (n.val.size() != 1) throw ContractError("item() on non-scalar");
    return n.val[0];
}

inline const std::vector<double>& values(const T& t) { return t.tape->val(t.i); }
inline int rows(const T& t) { return t.tape->rows(t.i); }
inline int cols(const T& t) { return t.tape->cols(t.i); }

namespace detail {

inline void check_same_shape(const T& a, const T& b, const char* op) {
    if (rows(a) != rows(b) || cols(a) != cols(b)) {
        throw DimensionError(std::string(op) + ": shapes " + std::to_string(rows(a)) + "x" + std::to_string(cols(a)) + " vs " + std::to_string(rows(b)) + "x" + std::to_string(cols(b)));
    }
}

inline bool any_grad(const T& a) { return a.tape->node(a.i).needs_grad; }
inline bool any_grad(const T& a, const T& b) { return any_grad(a) || any_grad(b); }

}  // namespace detail

// ---- primitive ops ----

inline T matmul(const T& a, const T& b) {
    Tape& tp = *a.tape;
    const int m = rows(a), k = cols(a), k2 = rows(b), n = cols(b);
    if (k != k2) {
        throw DimensionError("matmul: inner extents " + std::to_string(k) + " vs " + std::to_string(k2));
    }
    int out = tp.alloc(m, n, detail::any_grad(a, b));
    {
        const auto& av = tp.val(a.i);
        const auto& bv = tp.val(b.i);
        auto& cv = tp.val(out);
        for (int i = 0; i < m; ++i) {
            for (int kk = 0; kk < k; ++kk) {
                const double aik = av[static_cast<size_t>(i) * k + kk];
                if (aik == 0.0) continue;
                const double* brow = &bv[static_cast<size_t>(kk) * n];
                double* crow = &cv[static_cast<size_t>(i) * n];
                for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
            }
        }
    }
    if (tp.node(out).needs_grad) {
        int ai = a.i, bi = b.i;
        tp.node(out).back = [&tp, out, ai, bi, m, k, n]() {
            const auto& g = tp.grad(out);
            if (tp.node(ai).needs_grad) {
                auto& da = tp.grad(ai);
                const auto& bv = tp.val(bi);
                for (int i = 0; i < m; ++i) {
                    for (int kk = 0; kk < k; ++kk) {
                        const double* grow = &g[static_cast<size_t>(i) * n];
                        const double* brow = &bv[static_cast<size_t>(kk) * n];
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
                        da[static_cast<size_t>(i) * k + kk] += s;
                    }
                }
            }
            if (tp.node(bi).needs_grad) {
                auto& db = tp.grad(bi);
                const auto& av = tp.val(ai);
                for (int i = 0; i < m; ++i) {
                    for (int kk = 0; kk < k; ++kk) {
                        const double aik = av[static_cast<size_t>(i) * k + kk];
                        if (aik == 0.0) continue;
                        const double* grow = &g[static_cast<size_t>(i) * n];
                        double* drow = &db[static_cast<size_t>(kk) * n];
                        for (int j = 0; j < n; ++j) drow[j] += aik * grow[j];
                    }
                }
            }
        };
    }
    return {&tp, out};
}

inline T add(const T& a, const T& b) {
    detail::check_same_shape(a, b, "add");
    Tape& tp = *a.tape;
    int out = tp.alloc(rows(a), cols(a), detail::any_grad(a, b));
    const auto& av = tp.val(a.i);
    const auto& bv = tp.val(b.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    if (tp.node(out).needs_grad) {
        int ai = a.i, bi = b.i;
        tp.node(out).back = [&tp, out, ai, bi]() {
            const auto& g = tp.grad(out);
            if (tp.node(ai).needs_grad) {
                auto& da = tp.grad(ai);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (tp.node(bi).needs_grad) {
                auto& db = tp.grad(bi);
                for (size_t i = 0; i < g.size(); ++i) db[i] += g[i];
            }
        };
    }
    return {&tp, out};
}

inline T sub(const T& a, const T& b) {
    detail::check_same_shape(a, b, "sub");
    Tape& tp = *a.tape;
    int out = tp.alloc(rows(a), cols(a), detail::any_grad(a, b));
    const auto& av = tp.val(a.i);
    const auto& bv = tp.val(b.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    if (tp.node(out).needs_grad) {
        int ai = a.i, bi = b.i;
        tp.node(out).back = [&tp, out, ai, bi]() {
            const auto& g = tp.grad(out);
            if (tp.node(ai).needs_grad) {
                auto& da = tp.grad(ai);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i];
            }
            if (tp.node(bi).needs_grad) {
                auto& db = tp.grad(bi);
                for (size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
            }
        };
    }
    return {&tp, out};
}

inline T mul(const T& a, const T& b) {
    detail::check_same_shape(a, b, "mul");
    Tape& tp = *a.tape;
    int out = tp.alloc(rows(a), cols(a), detail::any_grad(a, b));
    const auto& av = tp.val(a.i);
    const auto& bv = tp.val(b.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    if (tp.node(out).needs_grad) {
        int ai = a.i, bi = b.i;
        tp.node(out).back = [&tp, out, ai, bi]() {
            const auto& g = tp.grad(out);
            if (tp.node(ai).needs_grad) {
                auto& da = tp.grad(ai);
                const auto& bv2 = tp.val(bi);
                for (size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv2[i];
            }
            if (tp.node(bi).needs_grad) {
                auto& db = tp.grad(bi);
                const auto& av2 = tp.val(ai);
                for (size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av2[i];
            }
        };
    }
    return {&tp, out};
}

// X[m x n] + b[1 x n], b broadcast over rows
inline T add_rowvec(const T& x, const T& b) {
    Tape& tp = *x.tape;
    const int m = rows(x), n = cols(x);
    if (rows(b) != 1 || cols(b) != n) {
        throw DimensionError("add_rowvec: bias 1x" + std::to_string(cols(b)) + " vs cols " + std::to_string(n));
    }
    int out = tp.alloc(m, n, detail::any_grad(x, b));
    const auto& xv = tp.val(x.i);
    const auto& bv = tp.val(b.i);
    auto& ov = tp.val(out);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) ov[static_cast<size_t>(i) * n + j] = xv[static_cast<size_t>(i) * n + j] + bv[j];
    if (tp.node(out).needs_grad) {
        int xi = x.i, bi = b.i;
        tp.node(out).back = [&tp, out, xi, bi, m, n]() {
            const auto& g = tp.grad(out);
            if (tp.node(xi).needs_grad) {
                auto& dx = tp.grad(xi);
                for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
            }
            if (tp.node(bi).needs_grad) {
                auto& db = tp.grad(bi);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) db[j] += g[static_cast<size_t>(i) * n + j];
            }
        };
    }
    return {&tp, out};
}

inline T scale(const T& x, double s) {
    Tape& tp = *x.tape;
    int out = tp.alloc(rows(x), cols(x), detail::any_grad(x));
    const auto& xv = tp.val(x.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = s * xv[i];
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi, s]() {
            auto& dx = tp.grad(xi);
            const auto& g = tp.grad(out);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += s * g[i];
        };
    }
    return {&tp, out};
}

inline T add_scalar(const T& x, double s) {
    Tape& tp = *x.tape;
    int out = tp.alloc(rows(x), cols(x), detail::any_grad(x));
    const auto& xv = tp.val(x.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] + s;
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi]() {
            auto& dx = tp.grad(xi);
            const auto& g = tp.grad(out);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        };
    }
    return {&tp, out};
}

// alpha*x + beta*y with compile-time-constant coefficients
inline T axpby(double alpha, const T& x, double beta, const T& y) {
    detail::check_same_shape(x, y, "axpby");
    Tape& tp = *x.tape;
    int out = tp.alloc(rows(x), cols(x), detail::any_grad(x, y));
    const auto& xv = tp.val(x.i);
    const auto& yv = tp.val(y.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = alpha * xv[i] + beta * yv[i];
    if (tp.node(out).needs_grad) {
        int xi = x.i, yi = y.i;
        tp.node(out).back = [&tp, out, xi, yi, alpha, beta]() {
            const auto& g = tp.grad(out);
            if (tp.node(xi).needs_grad) {
                auto& dx = tp.grad(xi);
                for (size_t i = 0; i < g.size(); ++i) dx[i] += alpha * g[i];
            }
            if (tp.node(yi).needs_grad) {
                auto& dy = tp.grad(yi);
                for (size_t i = 0; i < g.size(); ++i) dy[i] += beta * g[i];
            }
        };
    }
    return {&tp, out};
}

// a*x + b*y where a and b are learned 1x1 tensors
inline T lincomb2(const T& a, const T& x, const T& b, const T& y) {
    detail::check_same_shape(x, y, "lincomb2");
    if (rows(a) != 1 || cols(a) != 1 || rows(b) != 1 || cols(b) != 1) {
        throw DimensionError("lincomb2: coefficients must be scalars");
    }
    Tape& tp = *x.tape;
    bool ng = detail::any_grad(a, x) || detail::any_grad(b, y);
    int out = tp.alloc(rows(x), cols(x), ng);
    const double av = tp.val(a.i)[0];
    const double bv = tp.val(b.i)[0];
    const auto& xv = tp.val(x.i);
    const auto& yv = tp.val(y.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = av * xv[i] + bv * yv[i];
    if (tp.node(out).needs_grad) {
        int ai = a.i, xi = x.i, bi = b.i, yi = y.i;
        tp.node(out).back = [&tp, out, ai, xi, bi, yi]() {
            const auto& g = tp.grad(out);
            const auto& xv2 = tp.val(xi);
            const auto& yv2 = tp.val(yi);
            if (tp.node(xi).needs_grad) {
                const double a2 = tp.val(ai)[0];
                auto& dx = tp.grad(xi);
                for (size_t i = 0; i < g.size(); ++i) dx[i] += a2 * g[i];
            }
            if (tp.node(yi).needs_grad) {
                const double b2 = tp.val(bi)[0];
                auto& dy = tp.grad(yi);
                for (size_t i = 0; i < g.size(); ++i) dy[i] += b2 * g[i];
            }
            if (tp.node(ai).needs_grad) {
                double s = 0.0;
                for (size_t i = 0; i < g.size(); ++i) s += g[i] * xv2[i];
                tp.grad(ai)[0] += s;
            }
            if (tp.node(bi).needs_grad) {
                double s = 0.0;
                for (size_t i = 0; i < g.size(); ++i) s += g[i] * yv2[i];
                tp.grad(bi)[0] += s;
            }
        };
    }
    return {&tp, out};
}

inline T relu(const T& x) {
    Tape& tp = *x.tape;
    int out = tp.alloc(rows(x), cols(x), detail::any_grad(x));
    const auto& xv = tp.val(x.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi]() {
            auto& dx = tp.grad(xi);
            const auto& g = tp.grad(out);
            const auto& xv2 = tp.val(xi);
            for (size_t i = 0; i < g.size(); ++i)
                if (xv2[i] > 0.0) dx[i] += g[i];
        };
    }
    return {&tp, out};
}

inline T sigmoid(const T& x) {
    Tape& tp = *x.tape;
    int out = tp.alloc(rows(x), cols(x), detail::any_grad(x));
    const auto& xv = tp.val(x.i);
    auto& ov = tp.val(out);
    for (size_t i = 0; i < ov.size(); ++i) {
        const double v = xv[i];
        ov[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi]() {
            auto& dx = tp.grad(xi);
            const auto& g = tp.grad(out);
            const auto& ov2 = tp.val(out);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * ov2[i] * (1.0 - ov2[i]);
        };
    }
    return {&tp, out};
}

// row-wise softmax with max subtraction
inline T softmax_rows(const T& x) {
    Tape& tp = *x.tape;
    const int m = rows(x), n = cols(x);
    if (n < 1 || m < 1) throw DimensionError("softmax: empty input");
    int out = tp.alloc(m, n, detail::any_grad(x));
    const auto& xv = tp.val(x.i);
    auto& ov = tp.val(out);
    for (int i = 0; i < m; ++i) {
        const double* row = &xv[static_cast<size_t>(i) * n];
        double* orow = &ov[static_cast<size_t>(i) * n];
        double mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            orow[j] = std::exp(row[j] - mx);
            sum += orow[j];
        }
        for (int j = 0; j < n; ++j) orow[j] /= sum;
    }
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi, m, n]() {
            auto& dx = tp.grad(xi);
            const auto& g = tp.grad(out);
            const auto& ov2 = tp.val(out);
            for (int i = 0; i < m; ++i) {
                const double* grow = &g[static_cast<size_t>(i) * n];
                const double* srow = &ov2[static_cast<size_t>(i) * n];
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += grow[j] * srow[j];
                double* drow = &dx[static_cast<size_t>(i) * n];
                for (int j = 0; j < n; ++j) drow[j] += srow[j] * (grow[j] - dot);
            }
        };
    }
    return {&tp, out};
}

inline T concat_cols(const std::vector<T>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    Tape& tp = *parts[0].tape;
    const int m = rows(parts[0]);
    int total = 0;
    bool ng = false;
    for (const auto& p : parts) {
        if (rows(p) != m) throw DimensionError("concat_cols: row mismatch");
        total += cols(p);
        ng = ng || detail::any_grad(p);
    }
    int out = tp.alloc(m, total, ng);
    auto& ov = tp.val(out);
    int off = 0;
    for (const auto& p : parts) {
        const int n = cols(p);
        const auto& pv = tp.val(p.i);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) ov[static_cast<size_t>(i) * total + off + j] = pv[static_cast<size_t>(i) * n + j];
        off += n;
    }
    if (tp.node(out).needs_grad) {
        std::vector<int> idx;
        std::vector<int> widths;
        for (const auto& p : parts) {
            idx.push_back(p.i);
            widths.push_back(cols(p));
        }
        tp.node(out).back = [&tp, out, idx, widths, m, total]() {
            const auto& g = tp.grad(out);
            int off2 = 0;
            for (size_t k = 0; k < idx.size(); ++k) {
                const int n = widths[k];
                if (tp.node(idx[k]).needs_grad) {
                    auto& d = tp.grad(idx[k]);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < n; ++j) d[static_cast<size_t>(i) * n + j] += g[static_cast<size_t>(i) * total + off2 + j];
                }
                off2 += n;
            }
        };
    }
    return {&tp, out};
}

inline T slice_cols(const T& x, int c0, int c1) {
    Tape& tp = *x.tape;
    const int m = rows(x), n = cols(x);
    if (c0 < 0 || c1 > n || c0 >= c1) throw DimensionError("slice_cols: bad range");
    const int w = c1 - c0;
    int out = tp.alloc(m, w, detail::any_grad(x));
    const auto& xv = tp.val(x.i);
    auto& ov = tp.val(out);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < w; ++j) ov[static_cast<size_t>(i) * w + j] = xv[static_cast<size_t>(i) * n + c0 + j];
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi, m, n, w, c0]() {
            auto& dx = tp.grad(xi);
            const auto& g = tp.grad(out);
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j) dx[static_cast<size_t>(i) * n + c0 + j] += g[static_cast<size_t>(i) * w + j];
        };
    }
    return {&tp, out};
}

// same element order, new row/col split
inline T reshape(const T& x, int r, int c) {
    Tape& tp = *x.tape;
    if (static_cast<size_t>(r) * c != tp.val(x.i).size()) throw DimensionError("reshape: size mismatch");
    int out = tp.alloc(r, c, detail::any_grad(x));
    tp.val(out) = tp.val(x.i);
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi]() {
            auto& dx = tp.grad(xi);
            const auto& g = tp.grad(out);
            for (size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
        };
    }
    return {&tp, out};
}

// X[B x d] -> [(B*n) x d], each row repeated n times consecutively
inline T repeat_rows(const T& x, int n) {
    Tape& tp = *x.tape;
    const int B = rows(x), d = cols(x);
    int out = tp.alloc(B * n, d, detail::any_grad(x));
    const auto& xv = tp.val(x.i);
    auto& ov = tp.val(out);
    for (int b = 0; b < B; ++b)
        for (int k = 0; k < n; ++k)
            std::copy(&xv[static_cast<size_t>(b) * d], &xv[static_cast<size_t>(b) * d] + d, &ov[(static_cast<size_t>(b) * n + k) * d]);
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi, B, n, d]() {
            auto& dx = tp.grad(xi);
            const auto& g = tp.grad(out);
            for (int b = 0; b < B; ++b)
                for (int k = 0; k < n; ++k) {
                    const double* grow = &g[(static_cast<size_t>(b) * n + k) * d];
                    double* drow = &dx[static_cast<size_t>(b) * d];
                    for (int j = 0; j < d; ++j) drow[j] += grow[j];
                }
        };
    }
    return {&tp, out};
}

// scales row i of X by s[i]; s is [m x 1]
inline T row_scale(const T& x, const T& s) {
    Tape& tp = *x.tape;
    const int m = rows(x), d = cols(x);
    if (rows(s) != m || cols(s) != 1) throw DimensionError("row_scale: scale must be m x 1");
    int out = tp.alloc(m, d, detail::any_grad(x, s));
    const auto& xv = tp.val(x.i);
    const auto& sv = tp.val(s.i);
    auto& ov = tp.val(out);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < d; ++j) ov[static_cast<size_t>(i) * d + j] = xv[static_cast<size_t>(i) * d + j] * sv[i];
    if (tp.node(out).needs_grad) {
        int xi = x.i, si = s.i;
        tp.node(out).back = [&tp, out, xi, si, m, d]() {
            const auto& g = tp.grad(out);
            if (tp.node(xi).needs_grad) {
                auto& dx = tp.grad(xi);
                const auto& sv2 = tp.val(si);
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < d; ++j) dx[static_cast<size_t>(i) * d + j] += g[static_cast<size_t>(i) * d + j] * sv2[i];
            }
            if (tp.node(si).needs_grad) {
                auto& ds = tp.grad(si);
                const auto& xv2 = tp.val(xi);
                for (int i = 0; i < m; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j < d; ++j) acc += g[static_cast<size_t>(i) * d + j] * xv2[static_cast<size_t>(i) * d + j];
                    ds[i] += acc;
                }
            }
        };
    }
    return {&tp, out};
}

// scores[b, i] = Q[b, :] . V[b*n + i, :]
inline T group_dot(const T& q, const T& v, int n) {
    Tape& tp = *q.tape;
    const int B = rows(q), d = cols(q);
    if (rows(v) != B * n || cols(v) != d) {
        throw DimensionError("group_dot: V must be (B*n) x d");
    }
    int out = tp.alloc(B, n, detail::any_grad(q, v));
    const auto& qv = tp.val(q.i);
    const auto& vv = tp.val(v.i);
    auto& ov = tp.val(out);
    for (int b = 0; b < B; ++b) {
        const double* qrow = &qv[static_cast<size_t>(b) * d];
        for (int i = 0; i < n; ++i) {
            const double* vrow = &vv[(static_cast<size_t>(b) * n + i) * d];
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += qrow[j] * vrow[j];
            ov[static_cast<size_t>(b) * n + i] = s;
        }
    }
    if (tp.node(out).needs_grad) {
        int qi = q.i, vi = v.i;
        tp.node(out).back = [&tp, out, qi, vi, B, n, d]() {
            const auto& g = tp.grad(out);
            const auto& qv2 = tp.val(qi);
            const auto& vv2 = tp.val(vi);
            if (tp.node(qi).needs_grad) {
                auto& dq = tp.grad(qi);
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < n; ++i) {
                        const double gv = g[static_cast<size_t>(b) * n + i];
                        const double* vrow = &vv2[(static_cast<size_t>(b) * n + i) * d];
                        double* drow = &dq[static_cast<size_t>(b) * d];
                        for (int j = 0; j < d; ++j) drow[j] += gv * vrow[j];
                    }
            }
            if (tp.node(vi).needs_grad) {
                auto& dv = tp.grad(vi);
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < n; ++i) {
                        const double gv = g[static_cast<size_t>(b) * n + i];
                        const double* qrow = &qv2[static_cast<size_t>(b) * d];
                        double* drow = &dv[(static_cast<size_t>(b) * n + i) * d];
                        for (int j = 0; j < d; ++j) drow[j] += gv * qrow[j];
                    }
            }
        };
    }
    return {&tp, out};
}

// out[b, :] = sum_i W[b, i] * V[b*n + i, :]
inline T group_weighted_sum(const T& w, const T& v) {
    Tape& tp = *w.tape;
    const int B = rows(w), n = cols(w);
    if (rows(v) % n != 0 || rows(v) / n != B) {
        throw DimensionError("group_weighted_sum: V rows must be B*n");
    }
    const int d = cols(v);
    int out = tp.alloc(B, d, detail::any_grad(w, v));
    const auto& wv = tp.val(w.i);
    const auto& vv = tp.val(v.i);
    auto& ov = tp.val(out);
    for (int b = 0; b < B; ++b) {
        double* orow = &ov[static_cast<size_t>(b) * d];
        for (int i = 0; i < n; ++i) {
            const double wgt = wv[static_cast<size_t>(b) * n + i];
            if (wgt == 0.0) continue;
            const double* vrow = &vv[(static_cast<size_t>(b) * n + i) * d];
            for (int j = 0; j < d; ++j) orow[j] += wgt * vrow[j];
        }
    }
    if (tp.node(out).needs_grad) {
        int wi = w.i, vi = v.i;
        tp.node(out).back = [&tp, out, wi, vi, B, n, d]() {
            const auto& g = tp.grad(out);
            const auto& wv2 = tp.val(wi);
            const auto& vv2 = tp.val(vi);
            if (tp.node(wi).needs_grad) {
                auto& dw = tp.grad(wi);
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < n; ++i) {
                        const double* grow = &g[static_cast<size_t>(b) * d];
                        const double* vrow = &vv2[(static_cast<size_t>(b) * n + i) * d];
                        double s = 0.0;
                        for (int j = 0; j < d; ++j) s += grow[j] * vrow[j];
                        dw[static_cast<size_t>(b) * n + i] += s;
                    }
            }
            if (tp.node(vi).needs_grad) {
                auto& dv = tp.grad(vi);
                for (int b = 0; b < B; ++b)
                    for (int i = 0; i < n; ++i) {
                        const double wgt = wv2[static_cast<size_t>(b) * n + i];
                        if (wgt == 0.0) continue;
                        const double* grow = &g[static_cast<size_t>(b) * d];
                        double* drow = &dv[(static_cast<size_t>(b) * n + i) * d];
                        for (int j = 0; j < d; ++j) drow[j] += wgt * grow[j];
                    }
            }
        };
    }
    return {&tp, out};
}

// cos per row pair; rows with a zero norm contribute 0 (and zero gradient)
inline T rowwise_cosine(const T& a, const T& b) {
    detail::check_same_shape(a, b, "rowwise_cosine");
    Tape& tp = *a.tape;
    const int m = rows(a), d = cols(a);
    int out = tp.alloc(m, 1, detail::any_grad(a, b));
    const auto& av = tp.val(a.i);
    const auto& bv = tp.val(b.i);
    auto& ov = tp.val(out);
    for (int i = 0; i < m; ++i) {
        const double* ar = &av[static_cast<size_t>(i) * d];
        const double* br = &bv[static_cast<size_t>(i) * d];
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int j = 0; j < d; ++j) {
            dot += ar[j] * br[j];
            na += ar[j] * ar[j];
            nb += br[j] * br[j];
        }
        ov[i] = (na == 0.0 || nb == 0.0) ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
    }
    if (tp.node(out).needs_grad) {
        int ai = a.i, bi = b.i;
        tp.node(out).back = [&tp, out, ai, bi, m, d]() {
            const auto& g = tp.grad(out);
            const auto& av2 = tp.val(ai);
            const auto& bv2 = tp.val(bi);
            for (int i = 0; i < m; ++i) {
                if (g[i] == 0.0) continue;
                const double* ar = &av2[static_cast<size_t>(i) * d];
                const double* br = &bv2[static_cast<size_t>(i) * d];
                double dot = 0.0, na = 0.0, nb = 0.0;
                for (int j = 0; j < d; ++j) {
                    dot += ar[j] * br[j];
                    na += ar[j] * ar[j];
                    nb += br[j] * br[j];
                }
                if (na == 0.0 || nb == 0.0) continue;
                const double norm_a = std::sqrt(na), norm_b = std::sqrt(nb);
                const double cosv = dot / (norm_a * norm_b);
                if (tp.node(ai).needs_grad) {
                    auto& da = tp.grad(ai);
                    double* drow = &da[static_cast<size_t>(i) * d];
                    for (int j = 0; j < d; ++j) drow[j] += g[i] * (br[j] / (norm_a * norm_b) - cosv * ar[j] / na);
                }
                if (tp.node(bi).needs_grad) {
                    auto& db = tp.grad(bi);
                    double* drow = &db[static_cast<size_t>(i) * d];
                    for (int j = 0; j < d; ++j) drow[j] += g[i] * (ar[j] / (norm_a * norm_b) - cosv * br[j] / nb);
                }
            }
        };
    }
    return {&tp, out};
}

inline T sum_all(const T& x) {
    Tape& tp = *x.tape;
    int out = tp.alloc(1, 1, detail::any_grad(x));
    const auto& xv = tp.val(x.i);
    double s = 0.0;
    for (double v : xv) s += v;
    tp.val(out)[0] = s;
    if (tp.node(out).needs_grad) {
        int xi = x.i;
        tp.node(out).back = [&tp, out, xi]() {
            auto& dx = tp.grad(xi);
            const double g = tp.grad(out)[0];
            for (size_t i = 0; i < dx.size(); ++i) dx[i] += g;
        };
    }
    return {&tp, out};
}

inline T mean_all(const T& x) {
    const double inv = 1.0 / static_cast<double>(values(x).size());
    return scale(sum_all(x), inv);
}

// gathers rows of a table (typically an embedding parameter leaf); gradient
// scatter-adds back into the table rows
inline T gather_rows(const T& table, const std::vector<int>& idx) {
    Tape& tp = *table.tape;
    const int v_rows = rows(table), d = cols(table);
    const int n = static_cast<int>(idx.size());
    for (int r : idx)
        if (r < 0 || r >= v_rows) throw DimensionError("gather_rows: index " + std::to_string(r) + " out of range");
    int out = tp.alloc(n, d, detail::any_grad(table));
    const auto& tv = tp.val(table.i);
    auto& ov = tp.val(out);
    for (int i = 0; i < n; ++i)
        std::copy(&tv[static_cast<size_t>(idx[i]) * d], &tv[static_cast<size_t>(idx[i]) * d] + d, &ov[static_cast<size_t>(i) * d]);
    if (tp.node(out).needs_grad) {
        int ti = table.i;
        tp.node(out).back = [&tp, out, ti, idx, d, n]() {
            auto& dt = tp.grad(ti);
            const auto& g = tp.grad(out);
            for (int i = 0; i < n; ++i) {
                const double* grow = &g[static_cast<size_t>(i) * d];
                double* drow = &dt[static_cast<size_t>(idx[i]) * d];
                for (int j = 0; j < d; ++j) drow[j] += grow[j];
            }
        };
    }
    return {&tp, out};
}

inline constexpr double kBceClamp = 1e-12;

// mean binary cross entropy with probability clamping at 1e-12
inline T bce_mean(const T& p, const std::vector<double>& y) {
    Tape& tp = *p.tape;
    const int B = rows(p);
    if (cols(p) != 1 || static_cast<size_t>(B) != y.size()) throw DimensionError("bce_mean: p must be B x 1 matching labels");
    constexpr double kClamp = kBceClamp;
    int out = tp.alloc(1, 1, detail::any_grad(p));
    const auto& pv = tp.val(p.i);
    double loss = 0.0;
    for (int b = 0; b < B; ++b) {
        const double pc = std::min(std::max(pv[b], kClamp), 1.0 - kClamp);
        loss -= y[b] * std::log(pc) + (1.0 - y[b]) * std::log(1.0 - pc);
    }
    tp.val(out)[0] = loss / B;
    if (tp.node(out).needs_grad) {
        int pi = p.i;
        tp.node(out).back = [&tp, out, pi, y, B]() {
            auto& dp = tp.grad(pi);
            const auto& pv2 = tp.val(pi);
            const double g = tp.grad(out)[0] / B;
            for (int b = 0; b < B; ++b) {
                const double praw = pv2[b];
                if (praw <= kBceClamp || praw >= 1.0 - kBceClamp) continue;  // clamped region: flat
                dp[b] += g * (-y[b] / praw + (1.0 - y[b]) / (1.0 - praw));
            }
        };
    }
    return {&tp, out};
}

}  // namespace dmsn

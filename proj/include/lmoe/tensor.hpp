#pragma once

// Dense tensor arithmetic with reverse-mode autodiff.
//
// Tensors are rank-1 or rank-2 dense arrays of real values. Every op computes
// in double; tensors tagged f32 round their storage through float after each
// op so 32-bit runs behave like 32-bit math. When gradients are enabled and
// any input requires grad, the op records a pull-back closure on the result
// node; backward() replays them in reverse topological order.
//
// Broadcast policy is deliberately narrow: same shape, scalar-with-tensor,
// or row-vector-with-matrix. Anything else is a shape error.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace lmoe {

enum class DType { f32, f64 };

namespace detail {

inline bool& grad_enabled_flag() {
    thread_local bool enabled = true;
    return enabled;
}

inline bool& finite_checks_flag() {
    thread_local bool enabled = true;
    return enabled;
}

struct Node {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
    DType dtype = DType::f64;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> vjp;  // pulls this->grad into parents' grads
    const char* op = "leaf";
    bool backward_done = false;

    std::size_t size() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

using NodePtr = std::shared_ptr<Node>;

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

[[noreturn]] inline void shape_error(const char* op, const std::vector<int>& a,
                                     const std::vector<int>& b) {
    throw std::runtime_error(std::string("shape mismatch in ") + op + ": " +
                             shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// Disables tape recording in scope (inference / oracle evaluation).
class NoGradGuard {
public:
    NoGradGuard() : prev_(detail::grad_enabled_flag()) { detail::grad_enabled_flag() = false; }
    ~NoGradGuard() { detail::grad_enabled_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Portable seeded generator: mt19937_64 with hand-rolled uniform/normal so
// draw sequences are bit-identical across platforms and standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        // xorshift-free: delegate to mt19937_64, whose output is specified bit-exactly
        return engine_();
    }

    double uniform() {  // [0, 1)
        return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Uniform integer in [0, n)
    std::uint64_t randint(std::uint64_t n) {
        // modulo bias is irrelevant for data generation at desk scale
        return engine_() % n;
    }

    std::uint64_t seed() const { return state_; }

private:
    std::uint64_t state_;
    std::mt19937_64 engine_{state_};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, DType dt = DType::f64, bool requires_grad = false) {
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->data.assign(count(n->shape), 0.0);
        n->dtype = dt;
        n->requires_grad = requires_grad;
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

    static Tensor full(std::vector<int> shape, double v, DType dt = DType::f64) {
        Tensor t = zeros(std::move(shape), dt);
        std::fill(t.n_->data.begin(), t.n_->data.end(), v);
        t.round_if_f32();
        return t;
    }

    static Tensor scalar(double v, DType dt = DType::f64) { return full({1}, v, dt); }

    static Tensor from_data(std::vector<int> shape, std::vector<double> data,
                            DType dt = DType::f64, bool requires_grad = false) {
        if (count(shape) != data.size())
            throw std::runtime_error("from_data: shape does not match data length");
        Tensor t = zeros(std::move(shape), dt, requires_grad);
        t.n_->data = std::move(data);
        t.round_if_f32();
        return t;
    }

    static Tensor randn(std::vector<int> shape, Rng& rng, double stddev = 1.0,
                        DType dt = DType::f64, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), dt, requires_grad);
        for (auto& v : t.n_->data) v = rng.normal() * stddev;
        t.round_if_f32();
        return t;
    }

    static Tensor uniform(std::vector<int> shape, Rng& rng, double lo, double hi,
                          DType dt = DType::f64, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), dt, requires_grad);
        for (auto& v : t.n_->data) v = rng.uniform(lo, hi);
        t.round_if_f32();
        return t;
    }

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    std::size_t size() const { return n_->data.size(); }
    int rows() const { return n_->shape.size() == 2 ? n_->shape[0] : 1; }
    int cols() const { return n_->shape.size() == 2 ? n_->shape[1] : n_->shape[0]; }
    DType dtype() const { return n_->dtype; }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool b) { n_->requires_grad = b; }

    const std::vector<double>& data() const { return n_->data; }
    std::vector<double>& mutable_data() { return n_->data; }

    double item() const {
        if (size() != 1) throw std::runtime_error("item(): tensor is not scalar, shape " +
                                                  detail::shape_str(shape()));
        return n_->data[0];
    }

    double at(int i) const { return n_->data[static_cast<std::size_t>(i)]; }
    double at(int r, int c) const {
        return n_->data[static_cast<std::size_t>(r) * n_->shape[1] + c];
    }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<double>& grad() const {
        if (n_->grad.empty()) throw std::runtime_error("grad(): no gradient populated");
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    detail::NodePtr node() const { return n_; }
    static Tensor wrap(detail::NodePtr n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

    void round_if_f32() {
        if (n_->dtype == DType::f32)
            for (auto& v : n_->data) v = static_cast<double>(static_cast<float>(v));
    }

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t c = 1;
        for (int e : shape) {
            if (e < 0) throw std::runtime_error("negative extent in shape");
            c *= static_cast<std::size_t>(e);
        }
        return c;
    }

private:
    detail::NodePtr n_;
};

namespace detail {

inline DType promote(const Tensor& a, const Tensor& b) {
    return (a.dtype() == DType::f64 || b.dtype() == DType::f64) ? DType::f64 : DType::f32;
}

inline void check_finite(const char* op, const Tensor& t) {
    if (!finite_checks_flag()) return;
    for (double v : t.data())
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("non-finite output in ") + op);
}

// Builds a result node and, when recording, attaches parents + pull-back.
inline Tensor make_result(const char* op, std::vector<int> shape, std::vector<double> data,
                          DType dt, std::initializer_list<Tensor> inputs,
                          std::function<void()> vjp) {
    bool need = false;
    if (grad_enabled_flag())
        for (const auto& in : inputs)
            if (in.requires_grad()) need = true;
    Tensor out = Tensor::from_data(std::move(shape), std::move(data), dt, need);
    if (need) {
        auto n = out.node();
        n->op = op;
        for (const auto& in : inputs) n->parents.push_back(in.node());
        n->vjp = std::move(vjp);
    }
    out.node()->op = op;
    check_finite(op, out);
    return out;
}

enum class Bcast { same, a_scalar, b_scalar, b_rowvec, a_rowvec };

inline Bcast bcast_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return Bcast::same;
    if (b.size() == 1) return Bcast::b_scalar;
    if (a.size() == 1) return Bcast::a_scalar;
    if (a.shape().size() == 2 && b.shape().size() == 1 && b.cols() == a.shape()[1])
        return Bcast::b_rowvec;
    if (b.shape().size() == 2 && a.shape().size() == 1 && a.cols() == b.shape()[1])
        return Bcast::a_rowvec;
    shape_error(op, a.shape(), b.shape());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

namespace detail {

template <class Fwd, class DfA, class DfB>
Tensor ew_binary(const char* op, const Tensor& a, const Tensor& b, Fwd f, DfA dfa, DfB dfb) {
    const Bcast k = bcast_kind(op, a, b);
    const Tensor& big = (k == Bcast::a_scalar || k == Bcast::a_rowvec) ? b : a;
    std::vector<double> out(big.size());
    const auto& ad = a.data();
    const auto& bd = b.data();
    const int c = big.cols();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double av, bv;
        switch (k) {
            case Bcast::same: av = ad[i]; bv = bd[i]; break;
            case Bcast::a_scalar: av = ad[0]; bv = bd[i]; break;
            case Bcast::b_scalar: av = ad[i]; bv = bd[0]; break;
            case Bcast::b_rowvec: av = ad[i]; bv = bd[i % c]; break;
            case Bcast::a_rowvec: av = ad[i % c]; bv = bd[i]; break;
        }
        out[i] = f(av, bv);
    }
    auto an = a.node();
    auto bn = b.node();
    auto shape = big.shape();
    Tensor res = make_result(op, shape, std::move(out), promote(a, b), {a, b}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        res.node()->vjp = [op, k, an, bn, rn, dfa, dfb, c]() {
            const auto& g = rn->grad;
            const bool wa = an->requires_grad;
            const bool wb = bn->requires_grad;
            if (wa) an->ensure_grad();
            if (wb) bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) {
                std::size_t ia = i, ib = i;
                switch (k) {
                    case Bcast::same: break;
                    case Bcast::a_scalar: ia = 0; break;
                    case Bcast::b_scalar: ib = 0; break;
                    case Bcast::b_rowvec: ib = i % static_cast<std::size_t>(c); break;
                    case Bcast::a_rowvec: ia = i % static_cast<std::size_t>(c); break;
                }
                const double av = an->data[ia];
                const double bv = bn->data[ib];
                if (wa) an->grad[ia] += g[i] * dfa(av, bv);
                if (wb) bn->grad[ib] += g[i] * dfb(av, bv);
            }
        };
    }
    return res;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    return detail::ew_binary(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <class Fwd, class Df>
Tensor ew_unary(const char* op, const Tensor& a, Fwd f, Df df) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a.data()[i]);
    auto an = a.node();
    Tensor res = make_result(op, a.shape(), std::move(out), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, df]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i)
                an->grad[i] += rn->grad[i] * df(an->data[i], rn->data[i]);
        };
    }
    return res;
}

}  // namespace detail

inline Tensor neg(const Tensor& a) {
    return detail::ew_unary("neg", a, [](double x) { return -x; },
                            [](double, double) { return -1.0; });
}

inline Tensor exp_(const Tensor& a) {
    return detail::ew_unary("exp", a, [](double x) { return std::exp(x); },
                            [](double, double y) { return y; });
}

inline Tensor log_(const Tensor& a) {
    return detail::ew_unary("log", a, [](double x) { return std::log(x); },
                            [](double x, double) { return 1.0 / x; });
}

inline Tensor sqrt_(const Tensor& a) {
    return detail::ew_unary("sqrt", a, [](double x) { return std::sqrt(x); },
                            [](double, double y) { return 0.5 / y; });
}

inline Tensor rsqrt_(const Tensor& a) {
    return detail::ew_unary("rsqrt", a, [](double x) { return 1.0 / std::sqrt(x); },
                            [](double, double y) { return -0.5 * y * y * y; });
}

inline Tensor sigmoid(const Tensor& a) {
    return detail::ew_unary(
        "sigmoid", a,
        [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                     : std::exp(x) / (1.0 + std::exp(x)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor silu(const Tensor& a) {
    return detail::ew_unary(
        "silu", a,
        [](double x) {
            const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                    : std::exp(x) / (1.0 + std::exp(x));
            return x * s;
        },
        [](double x, double) {
            const double s = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                    : std::exp(x) / (1.0 + std::exp(x));
            return s + x * s * (1.0 - s);
        });
}

inline Tensor softplus(const Tensor& a) {
    return detail::ew_unary(
        "softplus", a,
        [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
        [](double x, double) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                             : std::exp(x) / (1.0 + std::exp(x)); });
}

// elu(x) + 1: strictly positive feature map
inline Tensor elu_plus_one(const Tensor& a) {
    return detail::ew_unary(
        "elu_plus_one", a,
        [](double x) { return x > 0 ? x + 1.0 : std::exp(x); },
        [](double x, double) { return x > 0 ? 1.0 : std::exp(x); });
}

inline Tensor square(const Tensor& a) {
    return detail::ew_unary("square", a, [](double x) { return x * x; },
                            [](double x, double) { return 2.0 * x; });
}

inline Tensor scale(const Tensor& a, double c) {
    return detail::ew_unary("scale", a, [c](double x) { return c * x; },
                            [c](double, double) { return c; });
}

inline Tensor add_const(const Tensor& a, double c) {
    return detail::ew_unary("add_const", a, [c](double x) { return x + c; },
                            [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Linear-algebra ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        detail::shape_error("matmul", a.shape(), b.shape());
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    const auto& ad = a.data();
    const auto& bd = b.data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = ad[static_cast<std::size_t>(i) * k + p];
            if (av == 0.0) continue;
            const std::size_t bo = static_cast<std::size_t>(p) * n;
            const std::size_t oo = static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) out[oo + j] += av * bd[bo + j];
        }
    auto an = a.node();
    auto bn = b.node();
    Tensor res = detail::make_result("matmul", {m, n}, std::move(out),
                                     detail::promote(a, b), {a, b}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, bn, rn, m, k, n]() {
            const auto& g = rn->grad;
            if (an->requires_grad) {
                an->ensure_grad();  // dA = G B^T
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j)
                            s += g[static_cast<std::size_t>(i) * n + j] *
                                 bn->data[static_cast<std::size_t>(p) * n + j];
                        an->grad[static_cast<std::size_t>(i) * k + p] += s;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();  // dB = A^T G
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < m; ++i)
                            s += an->data[static_cast<std::size_t>(i) * k + p] *
                                 g[static_cast<std::size_t>(i) * n + j];
                        bn->grad[static_cast<std::size_t>(p) * n + j] += s;
                    }
            }
        };
    }
    return res;
}

inline Tensor transpose(const Tensor& a) {
    if (a.shape().size() != 2) detail::shape_error("transpose", a.shape(), {});
    const int r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(a.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<std::size_t>(j) * r + i] = a.at(i, j);
    auto an = a.node();
    Tensor res = detail::make_result("transpose", {c, r}, std::move(out), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, r, c]() {
            an->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    an->grad[static_cast<std::size_t>(i) * c + j] +=
                        rn->grad[static_cast<std::size_t>(j) * r + i];
        };
    }
    return res;
}

// outer(u, v)[i,j] = u[i] * v[j]
inline Tensor outer(const Tensor& u, const Tensor& v) {
    if (u.shape().size() != 1 || v.shape().size() != 1)
        detail::shape_error("outer", u.shape(), v.shape());
    const int m = u.cols(), n = v.cols();
    std::vector<double> out(static_cast<std::size_t>(m) * n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            out[static_cast<std::size_t>(i) * n + j] = u.at(i) * v.at(j);
    auto un = u.node();
    auto vn = v.node();
    Tensor res = detail::make_result("outer", {m, n}, std::move(out),
                                     detail::promote(u, v), {u, v}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [un, vn, rn, m, n]() {
            const auto& g = rn->grad;
            if (un->requires_grad) {
                un->ensure_grad();
                for (int i = 0; i < m; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < n; ++j)
                        s += g[static_cast<std::size_t>(i) * n + j] * vn->data[j];
                    un->grad[i] += s;
                }
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int j = 0; j < n; ++j) {
                    double s = 0.0;
                    for (int i = 0; i < m; ++i)
                        s += g[static_cast<std::size_t>(i) * n + j] * un->data[i];
                    vn->grad[j] += s;
                }
            }
        };
    }
    return res;
}

// vecmat(u, M) = u^T M, result is a length-cols vector
inline Tensor vecmat(const Tensor& u, const Tensor& m) {
    if (u.shape().size() != 1 || m.shape().size() != 2 || u.cols() != m.shape()[0])
        detail::shape_error("vecmat", u.shape(), m.shape());
    const int r = m.shape()[0], c = m.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(c), 0.0);
    for (int i = 0; i < r; ++i) {
        const double uv = u.at(i);
        for (int j = 0; j < c; ++j) out[j] += uv * m.at(i, j);
    }
    auto un = u.node();
    auto mn = m.node();
    Tensor res = detail::make_result("vecmat", {c}, std::move(out),
                                     detail::promote(u, m), {u, m}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [un, mn, rn, r, c]() {
            const auto& g = rn->grad;
            if (un->requires_grad) {
                un->ensure_grad();
                for (int i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < c; ++j)
                        s += g[j] * mn->data[static_cast<std::size_t>(i) * c + j];
                    un->grad[i] += s;
                }
            }
            if (mn->requires_grad) {
                mn->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        mn->grad[static_cast<std::size_t>(i) * c + j] += un->data[i] * g[j];
            }
        };
    }
    return res;
}

inline Tensor dot(const Tensor& u, const Tensor& v) {
    if (u.shape() != v.shape() || u.shape().size() != 1)
        detail::shape_error("dot", u.shape(), v.shape());
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) s += u.data()[i] * v.data()[i];
    auto un = u.node();
    auto vn = v.node();
    Tensor res = detail::make_result("dot", {1}, {s}, detail::promote(u, v), {u, v}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [un, vn, rn]() {
            const double g = rn->grad[0];
            if (un->requires_grad) {
                un->ensure_grad();
                for (std::size_t i = 0; i < un->data.size(); ++i)
                    un->grad[i] += g * vn->data[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (std::size_t i = 0; i < vn->data.size(); ++i)
                    vn->grad[i] += g * un->data[i];
            }
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// Reductions (fixed sequential order for determinism)

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    auto an = a.node();
    Tensor res = detail::make_result("sum", {1}, {s}, a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn]() {
            an->ensure_grad();
            for (auto& g : an->grad) g += rn->grad[0];
        };
    }
    return res;
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Sum of each row: (r, c) -> (r)
inline Tensor sum_rows(const Tensor& a) {
    if (a.shape().size() != 2) detail::shape_error("sum_rows", a.shape(), {});
    const int r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(r), 0.0);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[i] += a.at(i, j);
    auto an = a.node();
    Tensor res = detail::make_result("sum_rows", {r}, std::move(out), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, r, c]() {
            an->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    an->grad[static_cast<std::size_t>(i) * c + j] += rn->grad[i];
        };
    }
    return res;
}

// Sum over rows: (r, c) -> (c)
inline Tensor sum_cols(const Tensor& a) {
    if (a.shape().size() != 2) detail::shape_error("sum_cols", a.shape(), {});
    const int r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(c), 0.0);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[j] += a.at(i, j);
    auto an = a.node();
    Tensor res = detail::make_result("sum_cols", {c}, std::move(out), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, r, c]() {
            an->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < c; ++j)
                    an->grad[static_cast<std::size_t>(i) * c + j] += rn->grad[j];
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// Row/column scaling (diagonal-scaling primitives)

// scale_rows(M, v): row i of M multiplied by v[i]; equals diag{v} . M
inline Tensor scale_rows(const Tensor& m, const Tensor& v) {
    if (m.shape().size() != 2 || v.shape().size() != 1 || v.cols() != m.shape()[0])
        detail::shape_error("scale_rows", m.shape(), v.shape());
    const int r = m.shape()[0], c = m.shape()[1];
    std::vector<double> out(m.size());
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out[static_cast<std::size_t>(i) * c + j] = m.at(i, j) * v.at(i);
    auto mn = m.node();
    auto vn = v.node();
    Tensor res = detail::make_result("scale_rows", {r, c}, std::move(out),
                                     detail::promote(m, v), {m, v}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [mn, vn, rn, r, c]() {
            const auto& g = rn->grad;
            if (mn->requires_grad) {
                mn->ensure_grad();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        mn->grad[static_cast<std::size_t>(i) * c + j] +=
                            g[static_cast<std::size_t>(i) * c + j] * vn->data[i];
            }
            if (vn->requires_grad) {
                vn->ensure_grad();
                for (int i = 0; i < r; ++i) {
                    double s = 0.0;
                    for (int j = 0; j < c; ++j)
                        s += g[static_cast<std::size_t>(i) * c + j] *
                             mn->data[static_cast<std::size_t>(i) * c + j];
                    vn->grad[i] += s;
                }
            }
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// Softmax / normalization

// Masked row softmax: entries with mask==0 get probability exactly 0; the
// remaining entries are a max-subtracted softmax over the kept positions.
// mask is a constant 0/1 tensor of the same shape (or empty for no mask).
inline Tensor softmax_rows(const Tensor& a, const Tensor& mask = Tensor()) {
    const bool is_vec = a.shape().size() == 1;
    const int r = is_vec ? 1 : a.shape()[0];
    const int c = is_vec ? a.cols() : a.shape()[1];
    if (mask.defined() && mask.shape() != a.shape())
        detail::shape_error("softmax_rows(mask)", a.shape(), mask.shape());
    std::vector<double> out(a.size(), 0.0);
    for (int i = 0; i < r; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < c; ++j)
            if (!mask.defined() || mask.data()[o + j] != 0.0)
                mx = std::max(mx, a.data()[o + j]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw std::runtime_error("softmax_rows: fully masked row");
        double z = 0.0;
        for (int j = 0; j < c; ++j)
            if (!mask.defined() || mask.data()[o + j] != 0.0) {
                out[o + j] = std::exp(a.data()[o + j] - mx);
                z += out[o + j];
            }
        for (int j = 0; j < c; ++j) out[o + j] /= z;
    }
    auto an = a.node();
    Tensor res = detail::make_result("softmax_rows", a.shape(), std::move(out),
                                     a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, r, c]() {
            an->ensure_grad();
            for (int i = 0; i < r; ++i) {
                const std::size_t o = static_cast<std::size_t>(i) * c;
                double gy = 0.0;
                for (int j = 0; j < c; ++j) gy += rn->grad[o + j] * rn->data[o + j];
                for (int j = 0; j < c; ++j)
                    an->grad[o + j] += rn->data[o + j] * (rn->grad[o + j] - gy);
            }
        };
    }
    return res;
}

// Row-wise L2 normalization; vectors are treated as a single row.
inline Tensor l2_normalize_rows(const Tensor& a, double eps = 1e-12) {
    const bool is_vec = a.shape().size() == 1;
    const int r = is_vec ? 1 : a.shape()[0];
    const int c = is_vec ? a.cols() : a.shape()[1];
    std::vector<double> out(a.size());
    std::vector<double> norms(static_cast<std::size_t>(r));
    for (int i = 0; i < r; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * c;
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += a.data()[o + j] * a.data()[o + j];
        norms[i] = std::sqrt(s + eps);
        for (int j = 0; j < c; ++j) out[o + j] = a.data()[o + j] / norms[i];
    }
    auto an = a.node();
    Tensor res = detail::make_result("l2_normalize_rows", a.shape(), std::move(out),
                                     a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, r, c, norms]() {
            an->ensure_grad();
            for (int i = 0; i < r; ++i) {
                const std::size_t o = static_cast<std::size_t>(i) * c;
                double gy = 0.0;
                for (int j = 0; j < c; ++j) gy += rn->grad[o + j] * rn->data[o + j];
                for (int j = 0; j < c; ++j)
                    an->grad[o + j] += (rn->grad[o + j] - gy * rn->data[o + j]) / norms[i];
            }
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// Slicing / concatenation / gathering

inline Tensor slice_rows(const Tensor& a, int r0, int r1) {
    if (a.shape().size() != 2 || r0 < 0 || r1 > a.shape()[0] || r0 >= r1)
        throw std::runtime_error("slice_rows: bad range on shape " + detail::shape_str(a.shape()));
    const int c = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(r1 - r0) * c);
    std::copy(a.data().begin() + static_cast<std::size_t>(r0) * c,
              a.data().begin() + static_cast<std::size_t>(r1) * c, out.begin());
    auto an = a.node();
    Tensor res = detail::make_result("slice_rows", {r1 - r0, c}, std::move(out),
                                     a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, r0, c]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i)
                an->grad[static_cast<std::size_t>(r0) * c + i] += rn->grad[i];
        };
    }
    return res;
}

inline Tensor slice_cols(const Tensor& a, int c0, int c1) {
    if (a.shape().size() != 2 || c0 < 0 || c1 > a.shape()[1] || c0 >= c1)
        throw std::runtime_error("slice_cols: bad range on shape " + detail::shape_str(a.shape()));
    const int r = a.shape()[0], c = a.shape()[1], w = c1 - c0;
    std::vector<double> out(static_cast<std::size_t>(r) * w);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j)
            out[static_cast<std::size_t>(i) * w + j] = a.at(i, c0 + j);
    auto an = a.node();
    Tensor res = detail::make_result("slice_cols", {r, w}, std::move(out), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, r, c, c0, w]() {
            an->ensure_grad();
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < w; ++j)
                    an->grad[static_cast<std::size_t>(i) * c + c0 + j] +=
                        rn->grad[static_cast<std::size_t>(i) * w + j];
        };
    }
    return res;
}

// Contiguous element range of a rank-1 tensor.
inline Tensor slice_elems(const Tensor& a, int i0, int i1) {
    if (a.shape().size() != 1 || i0 < 0 || i1 > a.shape()[0] || i0 >= i1)
        throw std::runtime_error("slice_elems: bad range on shape " + detail::shape_str(a.shape()));
    std::vector<double> out(a.data().begin() + i0, a.data().begin() + i1);
    auto an = a.node();
    Tensor res = detail::make_result("slice_elems", {i1 - i0}, std::move(out), a.dtype(), {a},
                                     nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, i0]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i) an->grad[i0 + i] += rn->grad[i];
        };
    }
    return res;
}

// Same data, new shape (element count must match).
inline Tensor reshape(const Tensor& a, std::vector<int> shape) {
    if (Tensor::count(shape) != a.size())
        detail::shape_error("reshape", a.shape(), shape);
    auto an = a.node();
    Tensor res = detail::make_result("reshape", std::move(shape),
                                     std::vector<double>(a.data()), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < rn->grad.size(); ++i) an->grad[i] += rn->grad[i];
        };
    }
    return res;
}

// Row i of a matrix as a vector.
inline Tensor row(const Tensor& a, int i) {
    if (a.shape().size() != 2 || i < 0 || i >= a.shape()[0])
        throw std::runtime_error("row: bad index on shape " + detail::shape_str(a.shape()));
    const int c = a.shape()[1];
    std::vector<double> out(a.data().begin() + static_cast<std::size_t>(i) * c,
                            a.data().begin() + static_cast<std::size_t>(i + 1) * c);
    auto an = a.node();
    Tensor res = detail::make_result("row", {c}, std::move(out), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, i, c]() {
            an->ensure_grad();
            for (int j = 0; j < c; ++j)
                an->grad[static_cast<std::size_t>(i) * c + j] += rn->grad[j];
        };
    }
    return res;
}

// Stacks 1-D vectors (as rows) and/or matrices vertically.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_rows: empty input");
    const int c = parts[0].cols();
    int r = 0;
    bool need = false;
    for (const auto& p : parts) {
        if (p.cols() != c) detail::shape_error("concat_rows", parts[0].shape(), p.shape());
        r += p.rows();
        if (detail::grad_enabled_flag() && p.requires_grad()) need = true;
    }
    std::vector<double> out;
    out.reserve(static_cast<std::size_t>(r) * c);
    DType dt = DType::f32;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        if (p.dtype() == DType::f64) dt = DType::f64;
    }
    Tensor res = Tensor::from_data({r, c}, std::move(out), dt, need);
    res.node()->op = "concat_rows";
    if (need) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        std::vector<detail::NodePtr> pn;
        for (const auto& p : parts) pn.push_back(p.node());
        for (const auto& n : pn) rn->parents.push_back(n);
        rn->vjp = [rn, pn]() {
            std::size_t off = 0;
            for (const auto& n : pn) {
                if (n->requires_grad) {
                    n->ensure_grad();
                    for (std::size_t i = 0; i < n->data.size(); ++i)
                        n->grad[i] += rn->grad[off + i];
                }
                off += n->data.size();
            }
        };
    }
    detail::check_finite("concat_rows", res);
    return res;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::runtime_error("concat_cols: empty input");
    const int r = parts[0].shape().size() == 2 ? parts[0].shape()[0] : 1;
    int c = 0;
    bool need = false;
    DType dt = DType::f32;
    for (const auto& p : parts) {
        if (p.rows() != r) detail::shape_error("concat_cols", parts[0].shape(), p.shape());
        c += p.cols();
        if (detail::grad_enabled_flag() && p.requires_grad()) need = true;
        if (p.dtype() == DType::f64) dt = DType::f64;
    }
    std::vector<double> out(static_cast<std::size_t>(r) * c);
    int co = 0;
    for (const auto& p : parts) {
        const int pc = p.cols();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < pc; ++j)
                out[static_cast<std::size_t>(i) * c + co + j] =
                    p.data()[static_cast<std::size_t>(i) * pc + j];
        co += pc;
    }
    Tensor res = Tensor::from_data({r, c}, std::move(out), dt, need);
    res.node()->op = "concat_cols";
    if (need) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        std::vector<detail::NodePtr> pn;
        std::vector<int> widths;
        for (const auto& p : parts) {
            pn.push_back(p.node());
            widths.push_back(p.cols());
            rn->parents.push_back(p.node());
        }
        rn->vjp = [rn, pn, widths, r, c]() {
            int co = 0;
            for (std::size_t k = 0; k < pn.size(); ++k) {
                const int pc = widths[k];
                if (pn[k]->requires_grad) {
                    pn[k]->ensure_grad();
                    for (int i = 0; i < r; ++i)
                        for (int j = 0; j < pc; ++j)
                            pn[k]->grad[static_cast<std::size_t>(i) * pc + j] +=
                                rn->grad[static_cast<std::size_t>(i) * c + co + j];
                }
                co += pc;
            }
        };
    }
    detail::check_finite("concat_cols", res);
    return res;
}

// Gathers rows of a by integer index (embedding lookup, token routing).
inline Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    if (a.shape().size() != 2) detail::shape_error("gather_rows", a.shape(), {});
    const int r = a.shape()[0], c = a.shape()[1];
    std::vector<double> out(idx.size() * static_cast<std::size_t>(c));
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= r)
            throw std::runtime_error("gather_rows: index out of range");
        std::copy(a.data().begin() + static_cast<std::size_t>(idx[i]) * c,
                  a.data().begin() + static_cast<std::size_t>(idx[i] + 1) * c,
                  out.begin() + i * c);
    }
    auto an = a.node();
    Tensor res = detail::make_result("gather_rows", {static_cast<int>(idx.size()), c},
                                     std::move(out), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, idx, c]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < c; ++j)
                    an->grad[static_cast<std::size_t>(idx[i]) * c + j] +=
                        rn->grad[i * c + j];
        };
    }
    return res;
}

// Places rows of a (one per index) into a zero matrix with total_rows rows.
inline Tensor scatter_rows(const Tensor& a, const std::vector<int>& idx, int total_rows) {
    if (a.shape().size() != 2 || static_cast<std::size_t>(a.shape()[0]) != idx.size())
        throw std::runtime_error("scatter_rows: row count does not match index count");
    const int c = a.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(total_rows) * c, 0.0);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= total_rows)
            throw std::runtime_error("scatter_rows: index out of range");
        for (int j = 0; j < c; ++j)
            out[static_cast<std::size_t>(idx[i]) * c + j] += a.data()[i * c + j];
    }
    auto an = a.node();
    Tensor res = detail::make_result("scatter_rows", {total_rows, c}, std::move(out),
                                     a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, idx, c]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (int j = 0; j < c; ++j)
                    an->grad[i * c + j] += rn->grad[static_cast<std::size_t>(idx[i]) * c + j];
        };
    }
    return res;
}

// Picks element (rows[i], col) for each i; used for per-token gate weights.
inline Tensor gather_col_elems(const Tensor& a, const std::vector<int>& rows_idx, int col) {
    if (a.shape().size() != 2 || col < 0 || col >= a.shape()[1])
        throw std::runtime_error("gather_col_elems: bad column");
    const int c = a.shape()[1];
    std::vector<double> out(rows_idx.size());
    for (std::size_t i = 0; i < rows_idx.size(); ++i)
        out[i] = a.at(rows_idx[i], col);
    auto an = a.node();
    Tensor res = detail::make_result("gather_col_elems", {static_cast<int>(rows_idx.size())},
                                     std::move(out), a.dtype(), {a}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [an, rn, rows_idx, col, c]() {
            an->ensure_grad();
            for (std::size_t i = 0; i < rows_idx.size(); ++i)
                an->grad[static_cast<std::size_t>(rows_idx[i]) * c + col] += rn->grad[i];
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// Cross entropy (mean over labelled positions; label < 0 ignores the row)

inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.shape().size() != 2 ||
        static_cast<std::size_t>(logits.shape()[0]) != labels.size())
        throw std::runtime_error("cross_entropy_mean: logits/labels mismatch");
    const int r = logits.shape()[0], c = logits.shape()[1];
    int counted = 0;
    double total = 0.0;
    std::vector<double> probs(logits.size());
    for (int i = 0; i < r; ++i) {
        const std::size_t o = static_cast<std::size_t>(i) * c;
        double mx = logits.data()[o];
        for (int j = 1; j < c; ++j) mx = std::max(mx, logits.data()[o + j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) {
            probs[o + j] = std::exp(logits.data()[o + j] - mx);
            z += probs[o + j];
        }
        for (int j = 0; j < c; ++j) probs[o + j] /= z;
        if (labels[i] >= 0) {
            if (labels[i] >= c) throw std::runtime_error("cross_entropy_mean: label out of range");
            total += -(logits.data()[o + labels[i]] - mx - std::log(z));
            ++counted;
        }
    }
    if (counted == 0) throw std::runtime_error("cross_entropy_mean: no labelled positions");
    auto ln = logits.node();
    Tensor res = detail::make_result("cross_entropy_mean", {1}, {total / counted},
                                     logits.dtype(), {logits}, nullptr);
    if (res.requires_grad()) {
        auto* rn = res.node().get();  // raw: this node owns the closure
        rn->vjp = [ln, rn, labels, probs, counted, r, c]() {
            ln->ensure_grad();
            const double g = rn->grad[0] / counted;
            for (int i = 0; i < r; ++i) {
                if (labels[i] < 0) continue;
                const std::size_t o = static_cast<std::size_t>(i) * c;
                for (int j = 0; j < c; ++j)
                    ln->grad[o + j] += g * (probs[o + j] - (j == labels[i] ? 1.0 : 0.0));
            }
        };
    }
    return res;
}

// ---------------------------------------------------------------------------
// RMS norm (composed shape: y = x * rsqrt(mean(x^2) + eps) * w)

inline Tensor rms_norm(const Tensor& x, const Tensor& w, double eps) {
    if (x.shape().size() != 2 || w.shape().size() != 1 || w.cols() != x.shape()[1])
        detail::shape_error("rms_norm", x.shape(), w.shape());
    Tensor ms = scale(sum_rows(mul(x, x)), 1.0 / x.shape()[1]);
    Tensor inv = rsqrt_(add_const(ms, eps));
    return mul(scale_rows(x, inv), w);
}

// ---------------------------------------------------------------------------
// Backward

// Runs reverse-mode accumulation from a scalar loss. Leaves with
// requires_grad receive populated grad buffers. A second call on the same
// loss without rebuilding the graph is an error.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::runtime_error("backward: loss must be scalar");
    auto root = loss.node();
    if (!root->requires_grad)
        throw std::runtime_error("backward: loss does not depend on any requires_grad leaf");
    if (root->backward_done)
        throw std::runtime_error("backward: already called on this loss; rebuild the graph");
    root->backward_done = true;

    // Iterative post-order topological sort.
    std::vector<detail::Node*> topo;
    std::unordered_set<detail::Node*> visited;
    struct Frame {
        detail::Node* n;
        std::size_t next;
    };
    std::vector<Frame> stack{{root.get(), 0}};
    visited.insert(root.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::Node* p = f.n->parents[f.next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.n);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::Node* n = *it;
        if (n->vjp && !n->grad.empty()) n->vjp();
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle

// Central differences: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps). f must be
// deterministic and return a scalar. Used as the independent gradient check.
inline std::vector<double> finite_diff_grad(const std::function<double(const Tensor&)>& f,
                                            const Tensor& x, double eps = 1e-5) {
    if (eps <= 0.0) throw std::runtime_error("finite_diff_grad: eps must be positive");
    NoGradGuard ng;
    std::vector<double> g(x.size());
    Tensor probe = Tensor::from_data(x.shape(), x.data(), x.dtype());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe.mutable_data()[i];
        probe.mutable_data()[i] = orig + eps;
        const double fp = f(probe);
        probe.mutable_data()[i] = orig - eps;
        const double fm = f(probe);
        probe.mutable_data()[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw std::runtime_error("finite_diff_grad: non-finite function value");
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw std::runtime_error("max_abs_diff: length mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    return max_abs_diff(a.data(), b.data());
}

// Max relative error with an absolute floor, for gradient comparisons.
inline double max_rel_err(const std::vector<double>& got, const std::vector<double>& want,
                          double floor = 1e-6) {
    if (got.size() != want.size()) throw std::runtime_error("max_rel_err: length mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double denom = std::max(std::abs(want[i]), floor);
        m = std::max(m, std::abs(got[i] - want[i]) / denom);
    }
    return m;
}

}  // namespace lmoe

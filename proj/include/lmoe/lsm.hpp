#pragma once

// Linear sequence modeling kernels.
//
// Every instance follows the unified recurrence
//     M_s = Theta_s (*) M_{s-1} + inc_s,   o_s = phi(q_s) M_s [/ phi(q_s) z_s]
// where (*) is a matrix product, a Hadamard/diagonal scaling, or a plain add
// depending on the instance, and inc_s is an outer product of an effective
// key and value (or a test-time-loss gradient for the TTT-style rows).
//
// Two interchangeable evaluation forms:
//   - lsm_forward_sequential: token-by-token fold of recurrent_step. The
//     reference oracle for everything else.
//   - lsm_forward_chunked: block evaluation with inter-chunk state passing.
//     Diagonal-structured decays use a masked-score closed form with
//     cumulative within-chunk decay; outer/full elementwise decays use a
//     pairwise cumulative-decay form; state-dependent updates (delta rule,
//     test-time gradients) run sequentially inside each chunk.

#include <cstdlib>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lmoe/tensor.hpp"

namespace lmoe {

enum class LsmInstance {
    BLA,
    Lightning,
    RetNet,
    GLA,
    DeltaNet,
    GatedDeltaNet,
    Rebased,
    GFW,
    GateLoop,
    TTT,
    Titans,
    S4,
    Mamba,
    Mamba2,
    HGRN2,
    RWKV6,
    RWKV7,
};

enum class FeatureMap { Identity, EluPlusOne, Squared };

// Structure of the decay Theta_s; picks the chunkwise strategy.
enum class DecayKind {
    None,             // BLA, Rebased
    ConstScalar,      // Lightning, RetNet
    TokenScalar,      // Mamba2
    TokenVector,      // GLA, HGRN2, RWKV6
    TokenOuter,       // GFW, GateLoop (rank-1 elementwise gate)
    FullElementwise,  // S4 (static), Mamba (token-varying)
    StateLinear,      // DeltaNet, GatedDeltaNet (projection transition)
    Gradient,         // TTT, Titans, RWKV7 (test-time gradient update)
};

inline DecayKind decay_kind(LsmInstance inst) {
    switch (inst) {
        case LsmInstance::BLA:
        case LsmInstance::Rebased: return DecayKind::None;
        case LsmInstance::Lightning:
        case LsmInstance::RetNet: return DecayKind::ConstScalar;
        case LsmInstance::Mamba2: return DecayKind::TokenScalar;
        case LsmInstance::GLA:
        case LsmInstance::HGRN2:
        case LsmInstance::RWKV6: return DecayKind::TokenVector;
        case LsmInstance::GFW:
        case LsmInstance::GateLoop: return DecayKind::TokenOuter;
        case LsmInstance::S4:
        case LsmInstance::Mamba: return DecayKind::FullElementwise;
        case LsmInstance::DeltaNet:
        case LsmInstance::GatedDeltaNet: return DecayKind::StateLinear;
        case LsmInstance::TTT:
        case LsmInstance::Titans:
        case LsmInstance::RWKV7: return DecayKind::Gradient;
    }
    throw std::runtime_error("unknown LSM instance");
}

// Instances whose chunkwise form is a closed formula; the rest fall back to
// a sequential inner loop but still pass state between chunks.
inline bool has_closed_chunk_form(LsmInstance inst) {
    const DecayKind k = decay_kind(inst);
    return k != DecayKind::StateLinear && k != DecayKind::Gradient;
}

namespace detail_lsm {
inline const char* name_table(int i) {
    static const char* names[] = {"bla",      "lightning",      "retnet",  "gla",
                                  "deltanet", "gated_deltanet", "rebased", "gfw",
                                  "gateloop", "ttt",            "titans",  "s4",
                                  "mamba",    "mamba2",         "hgrn2",   "rwkv6",
                                  "rwkv7"};
    return names[i];
}
}  // namespace detail_lsm

inline const char* instance_name(LsmInstance inst) {
    return detail_lsm::name_table(static_cast<int>(inst));
}

inline std::vector<LsmInstance> all_instances() {
    std::vector<LsmInstance> v;
    for (int i = 0; i <= static_cast<int>(LsmInstance::RWKV7); ++i)
        v.push_back(static_cast<LsmInstance>(i));
    return v;
}

inline std::optional<LsmInstance> instance_from_name(const std::string& name) {
    for (int i = 0; i <= static_cast<int>(LsmInstance::RWKV7); ++i)
        if (name == detail_lsm::name_table(i)) return static_cast<LsmInstance>(i);
    return std::nullopt;
}

// Tagged description of one instance: update-rule family, decay
// parameterization, feature map, head dims. Static (non-per-token)
// parameters live here as tensors so they can be learned and checked
// against finite differences.
struct LsmSpec {
    LsmInstance instance = LsmInstance::BLA;
    FeatureMap feature_map = FeatureMap::Identity;
    bool use_normalizer = false;
    int d_k = 0;
    int d_v = 0;

    double scalar_decay = 1.0;  // Lightning / RetNet fixed a, in (0, 1]

    // S4: decay exp(-softplus(delta)_i * softplus(A)_ij),
    //     increment (softplus(delta) . b)^T v_s
    Tensor s4_delta_raw;  // (d_k)
    Tensor s4_b;          // (d_k)
    Tensor s4_A_raw;      // (d_k, d_v)

    // Mamba: decay exp(-delta_s,i * softplus(A)_ij), delta_s = softplus(a_pre row)
    Tensor mamba_A_raw;  // (d_k, d_v)

    // Mamba2: decay exp(-softplus(a) * b_s), b_s = softplus(b_pre)
    Tensor mamba2_a_raw;  // (1)

    // Defaults mirror the source methods each row abstracts: BLA is
    // elu(x)+1 with a normalizer, Rebased is the squared map with a
    // normalizer, decayed instances use the identity map without one.
    static LsmSpec make(LsmInstance inst, int d_k, int d_v, Rng* rng = nullptr,
                        DType dt = DType::f64) {
        LsmSpec s;
        s.instance = inst;
        s.d_k = d_k;
        s.d_v = d_v;
        switch (inst) {
            case LsmInstance::BLA:
                s.feature_map = FeatureMap::EluPlusOne;
                s.use_normalizer = true;
                break;
            case LsmInstance::Rebased:
                s.feature_map = FeatureMap::Squared;
                s.use_normalizer = true;
                break;
            case LsmInstance::Lightning: s.scalar_decay = 0.95; break;
            case LsmInstance::RetNet: s.scalar_decay = 1.0 - 1.0 / 32.0; break;
            default: break;
        }
        Rng fallback(17);
        Rng& r = rng ? *rng : fallback;
        if (inst == LsmInstance::S4) {
            s.s4_delta_raw = Tensor::randn({d_k}, r, 0.5, dt);
            s.s4_b = Tensor::randn({d_k}, r, 0.5, dt);
            s.s4_A_raw = Tensor::randn({d_k, d_v}, r, 0.5, dt);
        }
        if (inst == LsmInstance::Mamba) s.mamba_A_raw = Tensor::randn({d_k, d_v}, r, 0.5, dt);
        if (inst == LsmInstance::Mamba2) s.mamba2_a_raw = Tensor::randn({1}, r, 0.5, dt);
        return s;
    }

    std::vector<Tensor> static_params() const {
        std::vector<Tensor> p;
        for (const Tensor* t : {&s4_delta_raw, &s4_b, &s4_A_raw, &mamba_A_raw, &mamba2_a_raw})
            if (t->defined()) p.push_back(*t);
        return p;
    }

    void validate() const {
        if (d_k <= 0 || d_v <= 0) throw std::runtime_error("LsmSpec: nonpositive head dims");
        if (use_normalizer) {
            const DecayKind k = decay_kind(instance);
            const bool diagonal = k == DecayKind::None || k == DecayKind::ConstScalar ||
                                  k == DecayKind::TokenScalar || k == DecayKind::TokenVector;
            // HGRN2 (key 1 - a_s) and Mamba2 (key b_s . phi(k)) feed the memory
            // an effective key that differs from the feature-mapped key the
            // normalizer accumulates, so the ratio form is not defined for them.
            if (!diagonal || instance == LsmInstance::HGRN2 ||
                instance == LsmInstance::Mamba2)
                throw std::runtime_error(
                    std::string("LsmSpec: normalizer unsupported for instance ") +
                    instance_name(instance));
        }
    }
};

// Pre-activation gate inputs for one sequence of length N, per instance:
//   GLA / HGRN2 / RWKV6:        a_pre (N, d_k) -> sigmoid decay vector
//   RWKV7:                      a_pre (N, d_k) sigmoid; b_pre (N) sigmoid step
//   DeltaNet / GatedDeltaNet /
//   Titans:                     a_pre (N), b_pre (N) -> sigmoid scalars
//   TTT:                        b_pre (N) -> sigmoid step size
//   GFW / GateLoop:             alpha_pre (N, d_k), beta_pre (N, d_v) -> sigmoid
//   Mamba:                      a_pre (N, d_k) -> softplus = delta_s
//   Mamba2:                     b_pre (N) -> softplus = b_s
// Unused fields stay undefined.
struct LsmGates {
    Tensor a_pre;
    Tensor b_pre;
    Tensor alpha_pre;
    Tensor beta_pre;

    static LsmGates random_for(const LsmSpec& spec, int n, Rng& rng, double stddev = 1.0) {
        LsmGates g;
        switch (spec.instance) {
            case LsmInstance::GLA:
            case LsmInstance::HGRN2:
            case LsmInstance::RWKV6:
            case LsmInstance::Mamba:
                g.a_pre = Tensor::randn({n, spec.d_k}, rng, stddev);
                break;
            case LsmInstance::RWKV7:
                g.a_pre = Tensor::randn({n, spec.d_k}, rng, stddev);
                g.b_pre = Tensor::randn({n}, rng, stddev);
                break;
            case LsmInstance::DeltaNet:
            case LsmInstance::GatedDeltaNet:
            case LsmInstance::Titans:
                g.a_pre = Tensor::randn({n}, rng, stddev);
                g.b_pre = Tensor::randn({n}, rng, stddev);
                break;
            case LsmInstance::TTT:
            case LsmInstance::Mamba2:
                g.b_pre = Tensor::randn({n}, rng, stddev);
                break;
            case LsmInstance::GFW:
            case LsmInstance::GateLoop:
                g.alpha_pre = Tensor::randn({n, spec.d_k}, rng, stddev);
                g.beta_pre = Tensor::randn({n, spec.d_v}, rng, stddev);
                break;
            default: break;
        }
        return g;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p;
        for (const Tensor* t : {&a_pre, &b_pre, &alpha_pre, &beta_pre})
            if (t->defined()) p.push_back(*t);
        return p;
    }
};

// The d_k x d_v recurrent memory M_s plus the optional normalizer z_s.
struct MemoryState {
    Tensor M;
    Tensor z;  // defined only when the spec uses a normalizer
    int step = 0;

    static MemoryState fresh(const LsmSpec& spec, DType dt = DType::f64) {
        MemoryState st;
        st.M = Tensor::zeros({spec.d_k, spec.d_v}, dt);
        if (spec.use_normalizer) st.z = Tensor::zeros({spec.d_k}, dt);
        return st;
    }

    long element_count() const {
        return static_cast<long>(M.size()) + (z.defined() ? static_cast<long>(z.size()) : 0);
    }
};

// One token's inputs: q_s, k_s, v_s plus the pre-activation gate values the
// instance derives its decay/step parameters from.
struct StepInputs {
    Tensor q, k, v;
    Tensor a_row;
    Tensor b_row;
    Tensor alpha_row;
    Tensor beta_row;
};

inline Tensor apply_feature_map(const Tensor& x, FeatureMap fm) {
    switch (fm) {
        case FeatureMap::Identity: return x;
        case FeatureMap::EluPlusOne: return elu_plus_one(x);
        case FeatureMap::Squared: return square(x);
    }
    throw std::runtime_error("unknown feature map");
}

// Multiplicative lower-triangular mask: 1 on and below the diagonal, 0 above.
inline Tensor causal_mask(int n, DType dt = DType::f64) {
    if (n < 1) throw std::runtime_error("causal_mask: N must be >= 1");
    std::vector<double> d(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j <= i; ++j) d[static_cast<std::size_t>(i) * n + j] = 1.0;
    return Tensor::from_data({n, n}, std::move(d), dt);
}

namespace kern {

// Test hook: shifts the cumulative decay by one token inside the chunkwise
// closed form, which breaks oracle equivalence. Exercised by `verify
// --inject-fault` to prove the suite catches regressions.
inline bool& chunk_decay_fault() {
    static bool f = false;
    return f;
}

inline void check_state_finite(const LsmSpec& spec, const Tensor& m) {
    for (double v : m.data())
        if (!std::isfinite(v))
            throw std::runtime_error(std::string("non-finite memory state in instance ") +
                                     instance_name(spec.instance));
}

// Test-time regression loss l(M; k, v) = 1/2 ||k M - v||^2; gradient w.r.t.
// M is k^T (k M - v). TTT/Titans/RWKV7 descend this gradient.
inline Tensor ttt_loss_grad(const Tensor& m, const Tensor& k, const Tensor& v) {
    return outer(k, sub(vecmat(k, m), v));
}

}  // namespace kern

// Advances one token per the instance's update rule. state.step must be s-1.
inline std::pair<MemoryState, Tensor> recurrent_step(const MemoryState& state,
                                                     const StepInputs& in,
                                                     const LsmSpec& spec) {
    spec.validate();
    const Tensor phi_q = apply_feature_map(in.q, spec.feature_map);
    const Tensor phi_k = apply_feature_map(in.k, spec.feature_map);
    MemoryState next;
    next.step = state.step + 1;

    switch (spec.instance) {
        case LsmInstance::BLA:
        case LsmInstance::Rebased:
            next.M = add(state.M, outer(phi_k, in.v));
            if (spec.use_normalizer) next.z = add(state.z, phi_k);
            break;
        case LsmInstance::Lightning:
        case LsmInstance::RetNet:
            next.M = add(scale(state.M, spec.scalar_decay), outer(phi_k, in.v));
            if (spec.use_normalizer) next.z = add(scale(state.z, spec.scalar_decay), phi_k);
            break;
        case LsmInstance::GLA:
        case LsmInstance::RWKV6: {
            const Tensor a = sigmoid(in.a_row);
            next.M = add(scale_rows(state.M, a), outer(phi_k, in.v));
            if (spec.use_normalizer) next.z = add(mul(state.z, a), phi_k);
            break;
        }
        case LsmInstance::HGRN2: {
            const Tensor a = sigmoid(in.a_row);
            const Tensor one_minus = sub(Tensor::full({spec.d_k}, 1.0, a.dtype()), a);
            next.M = add(scale_rows(state.M, a), outer(one_minus, in.v));
            break;
        }
        case LsmInstance::Mamba2: {
            const Tensor b = softplus(in.b_row);
            const Tensor decay = exp_(neg(mul(b, softplus(spec.mamba2_a_raw))));
            next.M = add(mul(state.M, decay), outer(mul(phi_k, b), in.v));
            if (spec.use_normalizer) next.z = add(mul(state.z, decay), phi_k);
            break;
        }
        case LsmInstance::DeltaNet: {
            // (I - a k^ k^T) projection with L2-normalized key keeps the
            // transition a contraction.
            const Tensor kh = l2_normalize_rows(phi_k);
            const Tensor a = sigmoid(in.a_row);
            const Tensor b = sigmoid(in.b_row);
            const Tensor proj = mul(outer(kh, vecmat(kh, state.M)), a);
            next.M = add(sub(state.M, proj), outer(mul(kh, b), in.v));
            break;
        }
        case LsmInstance::GatedDeltaNet: {
            const Tensor kh = l2_normalize_rows(phi_k);
            const Tensor a = sigmoid(in.a_row);
            const Tensor b = sigmoid(in.b_row);
            const Tensor projected = sub(state.M, outer(kh, vecmat(kh, state.M)));
            next.M = add(mul(projected, a), outer(mul(kh, b), in.v));
            break;
        }
        case LsmInstance::GFW:
        case LsmInstance::GateLoop: {
            const Tensor gate = outer(sigmoid(in.alpha_row), sigmoid(in.beta_row));
            next.M = add(mul(gate, state.M), outer(phi_k, in.v));
            break;
        }
        case LsmInstance::TTT: {
            const Tensor b = sigmoid(in.b_row);
            next.M = sub(state.M, mul(kern::ttt_loss_grad(state.M, phi_k, in.v), b));
            break;
        }
        case LsmInstance::Titans: {
            const Tensor a = sigmoid(in.a_row);
            const Tensor b = sigmoid(in.b_row);
            next.M = sub(mul(state.M, a), mul(kern::ttt_loss_grad(state.M, phi_k, in.v), b));
            break;
        }
        case LsmInstance::RWKV7: {
            const Tensor a = sigmoid(in.a_row);
            const Tensor b = sigmoid(in.b_row);
            next.M = sub(scale_rows(state.M, a),
                         mul(kern::ttt_loss_grad(state.M, phi_k, in.v), b));
            break;
        }
        case LsmInstance::S4: {
            const Tensor delta = softplus(spec.s4_delta_raw);
            const Tensor decay = exp_(neg(scale_rows(softplus(spec.s4_A_raw), delta)));
            next.M = add(mul(decay, state.M), outer(mul(delta, spec.s4_b), in.v));
            break;
        }
        case LsmInstance::Mamba: {
            const Tensor delta = softplus(in.a_row);
            const Tensor decay = exp_(neg(scale_rows(softplus(spec.mamba_A_raw), delta)));
            next.M = add(mul(decay, state.M), outer(mul(delta, phi_k), in.v));
            break;
        }
    }
    kern::check_state_finite(spec, next.M);

    Tensor o = vecmat(phi_q, next.M);
    if (spec.use_normalizer) {
        const Tensor denom = dot(phi_q, next.z);
        if (std::abs(denom.item()) < 1e-12)
            throw std::runtime_error(std::string("degenerate normalizer in instance ") +
                                     instance_name(spec.instance));
        o = div(o, denom);
    }
    return {std::move(next), std::move(o)};
}

namespace kern {

inline StepInputs step_inputs_at(const Tensor& q_mat, const Tensor& k_mat, const Tensor& v_mat,
                                 const LsmGates& gates, const LsmSpec& spec, int s) {
    StepInputs in;
    in.q = row(q_mat, s);
    in.k = row(k_mat, s);
    in.v = row(v_mat, s);
    switch (spec.instance) {
        case LsmInstance::GLA:
        case LsmInstance::HGRN2:
        case LsmInstance::RWKV6:
        case LsmInstance::Mamba:
            in.a_row = row(gates.a_pre, s);
            break;
        case LsmInstance::RWKV7:
            in.a_row = row(gates.a_pre, s);
            in.b_row = slice_elems(gates.b_pre, s, s + 1);
            break;
        case LsmInstance::DeltaNet:
        case LsmInstance::GatedDeltaNet:
        case LsmInstance::Titans:
            in.a_row = slice_elems(gates.a_pre, s, s + 1);
            in.b_row = slice_elems(gates.b_pre, s, s + 1);
            break;
        case LsmInstance::TTT:
        case LsmInstance::Mamba2:
            in.b_row = slice_elems(gates.b_pre, s, s + 1);
            break;
        case LsmInstance::GFW:
        case LsmInstance::GateLoop:
            in.alpha_row = row(gates.alpha_pre, s);
            in.beta_row = row(gates.beta_pre, s);
            break;
        default: break;
    }
    return in;
}

// Effective increment rows for chunk evaluation: inc_s = outer(keff_s, v_s).
inline Tensor effective_keys(const Tensor& k_chunk, const LsmGates& gates, const LsmSpec& spec,
                             int r0, int r1) {
    const Tensor phi_k = apply_feature_map(k_chunk, spec.feature_map);
    const int c = r1 - r0;
    switch (spec.instance) {
        case LsmInstance::HGRN2:
            return sub(Tensor::full({c, spec.d_k}, 1.0, gates.a_pre.dtype()),
                       sigmoid(slice_rows(gates.a_pre, r0, r1)));
        case LsmInstance::Mamba2:
            return scale_rows(phi_k, softplus(slice_elems(gates.b_pre, r0, r1)));
        case LsmInstance::Mamba:
            return mul(phi_k, softplus(slice_rows(gates.a_pre, r0, r1)));
        case LsmInstance::S4:
            return mul(Tensor::full({c, spec.d_k}, 1.0, spec.s4_b.dtype()),
                       mul(softplus(spec.s4_delta_raw), spec.s4_b));
        default:
            return phi_k;
    }
}

// Per-token decay vector rows (C, d_k) for the diagonal-structured kinds.
inline Tensor decay_vector_rows(const LsmSpec& spec, const LsmGates& gates, int r0, int r1,
                                DType dt = DType::f64) {
    const int c = r1 - r0;
    switch (decay_kind(spec.instance)) {
        case DecayKind::None: return Tensor::full({c, spec.d_k}, 1.0, dt);
        case DecayKind::ConstScalar: return Tensor::full({c, spec.d_k}, spec.scalar_decay, dt);
        case DecayKind::TokenScalar: {
            const Tensor b = softplus(slice_elems(gates.b_pre, r0, r1));
            const Tensor dvec = exp_(neg(mul(b, softplus(spec.mamba2_a_raw))));
            return scale_rows(Tensor::full({c, spec.d_k}, 1.0, dvec.dtype()), dvec);
        }
        case DecayKind::TokenVector: return sigmoid(slice_rows(gates.a_pre, r0, r1));
        default: throw std::runtime_error("decay_vector_rows: decay is not diagonal-structured");
    }
}

// Per-token full decay matrices for the elementwise kinds.
inline std::vector<Tensor> decay_matrices(const LsmSpec& spec, const LsmGates& gates, int r0,
                                          int r1) {
    std::vector<Tensor> out;
    if (spec.instance == LsmInstance::S4) {
        const Tensor d = exp_(neg(scale_rows(softplus(spec.s4_A_raw),
                                             softplus(spec.s4_delta_raw))));
        for (int s = r0; s < r1; ++s) out.push_back(d);
        return out;
    }
    if (spec.instance == LsmInstance::Mamba) {
        const Tensor a_plus = softplus(spec.mamba_A_raw);
        for (int s = r0; s < r1; ++s) {
            const Tensor delta = softplus(row(gates.a_pre, s));
            out.push_back(exp_(neg(scale_rows(a_plus, delta))));
        }
        return out;
    }
    // GFW / GateLoop
    for (int s = r0; s < r1; ++s)
        out.push_back(outer(sigmoid(row(gates.alpha_pre, s)), sigmoid(row(gates.beta_pre, s))));
    return out;
}

struct ChunkResult {
    Tensor O;
    MemoryState state;
};

// Closed form for diagonal-structured decay. With within-chunk cumulative
// decay p_s (product of per-token decay vectors):
//   O = [(Q~ K~^T) . mask] V + Q~ M_in,   Q~ = phiQ . p,  K~ = Keff / p
//   M_out = diag(p_C) M_in + K2^T V,      K2 = K~ . p_C
// The normalizer denominator reuses the masked score row sums plus Q~ z_in.
inline ChunkResult chunk_forward_separable(const LsmSpec& spec, const Tensor& phi_q,
                                           const Tensor& keff, const Tensor& veff,
                                           const Tensor& decay_rows, const MemoryState& in_state) {
    const int c = phi_q.shape()[0];
    std::vector<Tensor> prows;
    prows.reserve(c);
    Tensor cur = row(decay_rows, 0);
    prows.push_back(cur);
    for (int s = 1; s < c; ++s) {
        cur = mul(cur, row(decay_rows, s));
        prows.push_back(cur);
    }
    Tensor p = concat_rows(prows);
    if (chunk_decay_fault()) {
        // off-by-one: decay aligned to the previous token
        std::vector<Tensor> shifted;
        shifted.push_back(Tensor::full({spec.d_k}, 1.0, decay_rows.dtype()));
        for (int s = 0; s + 1 < c; ++s) shifted.push_back(prows[s]);
        p = concat_rows(shifted);
    }
    const Tensor p_last = row(p, c - 1);

    const Tensor q_t = mul(phi_q, p);
    const Tensor k_t = div(keff, p);
    const Tensor scores = mul(matmul(q_t, transpose(k_t)), causal_mask(c, phi_q.dtype()));
    Tensor o = add(matmul(scores, veff), matmul(q_t, in_state.M));

    ChunkResult res;
    const Tensor k2 = mul(k_t, p_last);
    res.state.M = add(scale_rows(in_state.M, p_last), matmul(transpose(k2), veff));
    res.state.step = in_state.step + c;
    if (spec.use_normalizer) {
        const Tensor denom = add(sum_rows(scores),
                                 reshape(matmul(q_t, reshape(in_state.z, {spec.d_k, 1})), {c}));
        for (double dv : denom.data())
            if (std::abs(dv) < 1e-12)
                throw std::runtime_error(std::string("degenerate normalizer in instance ") +
                                         instance_name(spec.instance));
        o = scale_rows(o, div(Tensor::full({c}, 1.0, denom.dtype()), denom));
        res.state.z = add(mul(in_state.z, p_last), sum_cols(k2));
    }
    res.O = o;
    check_state_finite(spec, res.state.M);
    return res;
}

// Pairwise cumulative-decay form for elementwise (outer or full) decays:
//   o_s = phi(q_s) [ P_s . M_in + sum_{j<=s} (P_s / P_j) . inc_j ]
// Ratios are taken between cumulative products within the same chunk, so the
// magnitudes stay bounded by the chunk length.
inline ChunkResult chunk_forward_elementwise(const LsmSpec& spec, const Tensor& phi_q,
                                             const Tensor& keff, const Tensor& veff,
                                             const std::vector<Tensor>& decays,
                                             const MemoryState& in_state) {
    const int c = phi_q.shape()[0];
    std::vector<Tensor> cum;
    cum.reserve(c);
    Tensor curp = decays[0];
    cum.push_back(curp);
    for (int s = 1; s < c; ++s) {
        curp = mul(curp, decays[s]);
        cum.push_back(curp);
    }
    std::vector<Tensor> incs;
    incs.reserve(c);
    for (int s = 0; s < c; ++s) incs.push_back(outer(row(keff, s), row(veff, s)));

    std::vector<Tensor> orows;
    orows.reserve(c);
    for (int s = 0; s < c; ++s) {
        const int ps = chunk_decay_fault() ? std::max(0, s - 1) : s;
        Tensor acc = mul(cum[ps], in_state.M);
        for (int j = 0; j <= s; ++j) acc = add(acc, mul(div(cum[ps], cum[j]), incs[j]));
        orows.push_back(vecmat(row(phi_q, s), acc));
    }
    ChunkResult res;
    res.O = concat_rows(orows);
    Tensor m_out = mul(cum[c - 1], in_state.M);
    for (int j = 0; j < c; ++j) m_out = add(m_out, mul(div(cum[c - 1], cum[j]), incs[j]));
    res.state.M = m_out;
    res.state.step = in_state.step + c;
    check_state_finite(spec, res.state.M);
    return res;
}

}  // namespace kern

// Token-by-token fold of recurrent_step from the zero state. THE reference
// oracle for the chunkwise form and all parallel schedules.
inline Tensor lsm_forward_sequential(const Tensor& q_mat, const Tensor& k_mat,
                                     const Tensor& v_mat, const LsmGates& gates,
                                     const LsmSpec& spec,
                                     MemoryState* final_state = nullptr) {
    spec.validate();
    if (q_mat.shape().size() != 2 || q_mat.shape()[0] < 1)
        throw std::runtime_error("lsm_forward_sequential: need N >= 1 rows");
    const int n = q_mat.shape()[0];
    MemoryState state = MemoryState::fresh(spec, q_mat.dtype());
    std::vector<Tensor> rows_out;
    rows_out.reserve(n);
    for (int s = 0; s < n; ++s) {
        auto [next, o] = recurrent_step(state, kern::step_inputs_at(q_mat, k_mat, v_mat,
                                                                    gates, spec, s), spec);
        state = std::move(next);
        rows_out.push_back(std::move(o));
    }
    if (final_state) *final_state = state;
    return concat_rows(rows_out);
}

// Chunkwise evaluation. chunk_size need not divide N; the last chunk is
// ragged. State (and normalizer) is carried across chunks for every
// instance; the in-chunk computation is closed-form where the decay
// structure allows and sequential otherwise.
inline Tensor lsm_forward_chunked(const Tensor& q_mat, const Tensor& k_mat, const Tensor& v_mat,
                                  const LsmGates& gates, const LsmSpec& spec, int chunk_size,
                                  MemoryState* final_state = nullptr) {
    spec.validate();
    if (chunk_size < 1) throw std::runtime_error("lsm_forward_chunked: chunk_size must be >= 1");
    const int n = q_mat.shape()[0];
    const DecayKind dk = decay_kind(spec.instance);
    MemoryState state = MemoryState::fresh(spec, q_mat.dtype());
    std::vector<Tensor> parts;
    for (int c0 = 0; c0 < n; c0 += chunk_size) {
        const int c1 = std::min(n, c0 + chunk_size);
        if (dk == DecayKind::StateLinear || dk == DecayKind::Gradient) {
            std::vector<Tensor> rows_out;
            for (int s = c0; s < c1; ++s) {
                auto [next, o] = recurrent_step(
                    state, kern::step_inputs_at(q_mat, k_mat, v_mat, gates, spec, s), spec);
                state = std::move(next);
                rows_out.push_back(std::move(o));
            }
            parts.push_back(concat_rows(rows_out));
            continue;
        }
        const Tensor phi_q = apply_feature_map(slice_rows(q_mat, c0, c1), spec.feature_map);
        const Tensor keff = kern::effective_keys(slice_rows(k_mat, c0, c1), gates, spec, c0, c1);
        const Tensor veff = slice_rows(v_mat, c0, c1);
        kern::ChunkResult cr;
        if (dk == DecayKind::TokenOuter || dk == DecayKind::FullElementwise) {
            cr = kern::chunk_forward_elementwise(spec, phi_q, keff, veff,
                                                 kern::decay_matrices(spec, gates, c0, c1), state);
        } else {
            cr = kern::chunk_forward_separable(spec, phi_q, keff, veff,
                                               kern::decay_vector_rows(spec, gates, c0, c1,
                                                                       q_mat.dtype()),
                                               state);
        }
        state = std::move(cr.state);
        parts.push_back(std::move(cr.O));
    }
    if (final_state) *final_state = state;
    return concat_rows(parts);
}

}  // namespace lmoe

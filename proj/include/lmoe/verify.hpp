#pragma once

// Named verification suites: each checks one module contract against its
// independent oracle and reports pass/fail with a measured deviation. The
// CLI `verify` command and the test binaries share these.

#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "lmoe/attention.hpp"
#include "lmoe/lsm.hpp"
#include "lmoe/model.hpp"
#include "lmoe/moe.hpp"
#include "lmoe/parallel.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

struct SuiteResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

namespace detail_verify {

inline std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

}  // namespace detail_verify

// Chunked evaluation vs the sequential oracle for every instance.
inline SuiteResult verify_chunked() {
    NoGradGuard ng;
    double worst = 0.0;
    std::string worst_case;
    for (LsmInstance inst : all_instances()) {
        Rng rng(101 + static_cast<int>(inst));
        const LsmSpec spec = LsmSpec::make(inst, 4, 4, &rng);
        for (int n : {7, 32}) {
            const Tensor q = Tensor::randn({n, 4}, rng, 0.5);
            const Tensor k = Tensor::randn({n, 4}, rng, 0.5);
            const Tensor v = Tensor::randn({n, 4}, rng, 0.5);
            const LsmGates gates = LsmGates::random_for(spec, n, rng);
            const Tensor ref = lsm_forward_sequential(q, k, v, gates, spec);
            for (int c : {1, 3, 8, n}) {
                const double d = max_abs_diff(ref, lsm_forward_chunked(q, k, v, gates, spec, c));
                if (d > worst) {
                    worst = d;
                    worst_case = std::string(instance_name(inst)) + " N=" +
                                 std::to_string(n) + " C=" + std::to_string(c);
                }
            }
        }
    }
    return {"chunked", worst < 1e-10,
            "max |chunked - sequential| = " + detail_verify::fmt(worst) +
                (worst_case.empty() ? "" : " (" + worst_case + ")")};
}

// SP rank invariance for the unmasked and masked forms.
inline SuiteResult verify_sp() {
    NoGradGuard ng;
    Rng rng(202);
    const int n = 32, d = 4;
    const Tensor q = Tensor::randn({n, d}, rng, 0.5);
    const Tensor k = Tensor::randn({n, d}, rng, 0.5);
    const Tensor v = Tensor::randn({n, d}, rng, 0.5);
    double worst = 0.0;

    LsmSpec plain = LsmSpec::make(LsmInstance::BLA, d, d);
    plain.use_normalizer = false;
    const Tensor phi_q = apply_feature_map(q, plain.feature_map);
    const Tensor phi_k = apply_feature_map(k, plain.feature_map);
    const Tensor nomask_ref = matmul(phi_q, matmul(transpose(phi_k), v));
    for (int t : {1, 2, 4}) {
        RankGroup g(t);
        worst = std::max(worst, max_abs_diff(nomask_ref, sp_forward_nomask(g, q, k, v, plain)));
    }

    for (LsmInstance inst : {LsmInstance::BLA, LsmInstance::GLA, LsmInstance::Mamba2}) {
        const LsmSpec spec = LsmSpec::make(inst, d, d, &rng);
        const LsmGates gates = LsmGates::random_for(spec, n, rng);
        const Tensor ref = lsm_forward_sequential(q, k, v, gates, spec);
        for (int t : {1, 2, 4, 8}) {
            RankGroup g(t);
            worst = std::max(worst,
                             max_abs_diff(ref, sp_forward_masked(g, q, k, v, gates, spec)));
        }
    }

    const Tensor attn_ref = softmax_attention_parallel(q, k, v, true);
    for (int t : {1, 2, 4}) {
        RankGroup g(t);
        worst = std::max(worst, max_abs_diff(attn_ref, sp_attention_allgather(g, q, k, v)));
    }
    return {"sp", worst < 1e-10,
            "max rank-invariance deviation = " + detail_verify::fmt(worst)};
}

// Tensor-parallel shard equivalence.
inline SuiteResult verify_tp() {
    NoGradGuard ng;
    Rng rng(303);
    const int hidden = 8, n = 12;
    const Tensor x = Tensor::randn({n, hidden}, rng, 0.5);
    const Tensor wq = Tensor::randn({hidden, hidden}, rng, 0.3);
    const Tensor wk = Tensor::randn({hidden, hidden}, rng, 0.3);
    const Tensor wv = Tensor::randn({hidden, hidden}, rng, 0.3);
    const Tensor wo = Tensor::randn({hidden, hidden}, rng, 0.3);
    double worst = 0.0;
    for (int t : {2, 4}) {
        LsmSpec spec = LsmSpec::make(LsmInstance::RetNet, hidden / t, hidden / t);
        worst = std::max(
            worst, tp_shard_check(x, wq, wk, wv, wo, spec, LsmGates{}, t).max_abs_dev);
    }
    return {"tp", worst < 1e-10, "max shard deviation = " + detail_verify::fmt(worst)};
}

// MoE: dense equivalence at top_k = E and simplex gate invariants.
inline SuiteResult verify_moe() {
    NoGradGuard ng;
    Rng rng(404);
    double worst = 0.0;
    bool simplex_ok = true;
    for (int e : {1, 4, 8}) {
        const MoeConfig cfg{e, e, 8, 8, 0.01};
        const MoeLayer layer = MoeLayer::init(cfg, rng, DType::f64);
        const Tensor x = Tensor::randn({16, 8}, rng, 0.5);
        auto [y, aux] = layer.forward(x);
        // dense reference: softmax-weighted sum over every expert
        const RoutingDecision dec = route(matmul(x, layer.router), e);
        Tensor ref = Tensor::zeros(y.shape(), y.dtype());
        for (int i = 0; i < e; ++i) {
            std::vector<int> all_rows(16);
            for (int r = 0; r < 16; ++r) all_rows[r] = r;
            ref = add(ref, scale_rows(layer.experts[i].forward(x),
                                      gather_col_elems(dec.full_probs, all_rows, i)));
        }
        worst = std::max(worst, max_abs_diff(y, ref));
        for (int r = 0; r < 16; ++r) {
            double srow = 0.0;
            for (int c = 0; c < e; ++c) {
                if (dec.gates.at(r, c) < 0) simplex_ok = false;
                srow += dec.gates.at(r, c);
            }
            if (std::abs(srow - 1.0) > 1e-12) simplex_ok = false;
        }
        (void)aux;
    }
    return {"moe", worst < 1e-10 && simplex_ok,
            "max dense-equivalence deviation = " + detail_verify::fmt(worst) +
                (simplex_ok ? "" : "; gate simplex violated")};
}

// Reverse-mode gradients vs central finite differences (spot checks; the
// full per-instance sweep lives in the acceptance binary).
inline SuiteResult verify_grad() {
    double worst = 0.0;
    for (LsmInstance inst : {LsmInstance::BLA, LsmInstance::DeltaNet, LsmInstance::TTT,
                             LsmInstance::Mamba}) {
        Rng rng(505 + static_cast<int>(inst));
        const LsmSpec spec = LsmSpec::make(inst, 3, 3, &rng);
        const int n = 5;
        Tensor q = Tensor::randn({n, 3}, rng, 0.5, DType::f64, true);
        const Tensor k = Tensor::randn({n, 3}, rng, 0.5);
        const Tensor v = Tensor::randn({n, 3}, rng, 0.5);
        const LsmGates gates = LsmGates::random_for(spec, n, rng);
        const Tensor loss = sum(square(lsm_forward_sequential(q, k, v, gates, spec)));
        backward(loss);
        const auto fd = finite_diff_grad(
            [&](const Tensor& probe) {
                return sum(square(lsm_forward_sequential(probe, k, v, gates, spec))).item();
            },
            q);
        worst = std::max(worst, max_rel_err(q.grad(), fd, 1e-4));
        q.zero_grad();
    }
    return {"grad", worst < 1e-4, "max grad rel err = " + detail_verify::fmt(worst)};
}

// Packed-batch isolation: per-document equivalence and zero cross-document
// sensitivity.
inline SuiteResult verify_packing() {
    NoGradGuard ng;
    Rng rng(606);
    ModelConfig cfg = ModelConfig::preset("tiny");
    cfg.pattern = "LN";
    const Model m = build_model(cfg, rng);
    const std::vector<std::vector<int>> docs{{5, 9, 2, 7, 1}, {3, 3, 8}};
    const PackedBatch packed = pack_sequences(docs);
    const Tensor packed_logits = model_forward(m, packed).logits;
    double worst = 0.0;
    int off = 0;
    for (const auto& doc : docs) {
        const Tensor solo = model_forward(m, pack_sequences({doc})).logits;
        worst = std::max(
            worst, max_abs_diff(solo, slice_rows(packed_logits, off,
                                                 off + static_cast<int>(doc.size()))));
        off += static_cast<int>(doc.size());
    }
    // perturb document 2; document 1 logits must not move at all
    PackedBatch perturbed = packed;
    perturbed.tokens[5] = 11;
    const Tensor p_logits = model_forward(m, perturbed).logits;
    const double cross =
        max_abs_diff(slice_rows(packed_logits, 0, 5), slice_rows(p_logits, 0, 5));
    return {"packing", worst < 1e-10 && cross == 0.0,
            "per-doc deviation = " + detail_verify::fmt(worst) +
                ", cross-doc sensitivity = " + detail_verify::fmt(cross)};
}

inline std::vector<SuiteResult> run_verify(const std::vector<std::string>& only = {}) {
    const std::vector<std::pair<std::string, std::function<SuiteResult()>>> suites{
        {"chunked", verify_chunked}, {"sp", verify_sp},     {"tp", verify_tp},
        {"moe", verify_moe},         {"grad", verify_grad}, {"packing", verify_packing},
    };
    std::vector<SuiteResult> results;
    for (const auto& [name, fn] : suites) {
        if (!only.empty() &&
            std::find(only.begin(), only.end(), name) == only.end())
            continue;
        try {
            results.push_back(fn());
        } catch (const std::exception& e) {
            results.push_back({name, false, std::string("exception: ") + e.what()});
        }
    }
    if (results.empty()) throw std::runtime_error("verify: no matching suite");
    return results;
}

}  // namespace lmoe

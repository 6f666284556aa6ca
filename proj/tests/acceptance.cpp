// Acceptance gate: ten property-based criteria, one pass/fail line each.
// Exit status is nonzero if any criterion fails.

#include <chrono>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "lmoe/attention.hpp"
#include "lmoe/lsm.hpp"
#include "lmoe/model.hpp"
#include "lmoe/moe.hpp"
#include "lmoe/parallel.hpp"
#include "lmoe/train.hpp"

using namespace lmoe;

namespace {

struct Criterion {
    std::string name;
    std::function<std::string()> body;  // returns detail, throws on failure
};

struct Failure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& msg) {
    if (!ok) throw Failure(msg);
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(3);
    os << std::scientific << v;
    return os.str();
}

// --- 1: chunked vs sequential, full sweep -----------------------------------

std::string c1_kernels() {
    NoGradGuard ng;
    double worst = 0.0;
    for (LsmInstance inst : all_instances())
        for (int d : {4, 8}) {
            Rng rng(1000 + 10 * static_cast<int>(inst) + d);
            const LsmSpec spec = LsmSpec::make(inst, d, d, &rng);
            for (int n : {7, 32, 64}) {
                const Tensor q = Tensor::randn({n, d}, rng, 0.5);
                const Tensor k = Tensor::randn({n, d}, rng, 0.5);
                const Tensor v = Tensor::randn({n, d}, rng, 0.5);
                const LsmGates gates = LsmGates::random_for(spec, n, rng);
                const Tensor ref = lsm_forward_sequential(q, k, v, gates, spec);
                for (int c : {1, 3, 8, n}) {
                    const double dev =
                        max_abs_diff(ref, lsm_forward_chunked(q, k, v, gates, spec, c));
                    worst = std::max(worst, dev);
                    require(dev < 1e-10, std::string(instance_name(inst)) + " N=" +
                                             std::to_string(n) + " d=" + std::to_string(d) +
                                             " C=" + std::to_string(c) +
                                             " deviation " + fmt(dev));
                }
            }
        }
    return "17 instances x N{7,32,64} x d{4,8} x C{1,3,8,N}, max dev " + fmt(worst);
}

// --- 2: SP rank invariance --------------------------------------------------

std::string c2_sp() {
    NoGradGuard ng;
    double worst = 0.0;
    const int n = 32, d = 4;
    Rng rng(2);
    const Tensor q = Tensor::randn({n, d}, rng, 0.5);
    const Tensor k = Tensor::randn({n, d}, rng, 0.5);
    const Tensor v = Tensor::randn({n, d}, rng, 0.5);

    LsmSpec plain = LsmSpec::make(LsmInstance::BLA, d, d);
    plain.use_normalizer = false;
    Tensor nomask_ref;
    for (int t : {1, 2, 4, 8}) {
        RankGroup g(t);
        const Tensor got = sp_forward_nomask(g, q, k, v, plain);
        if (t == 1)
            nomask_ref = got;
        else {
            const double dev = max_abs_diff(nomask_ref, got);
            worst = std::max(worst, dev);
            require(dev < 1e-10, "nomask T=" + std::to_string(t) + " dev " + fmt(dev));
        }
    }
    for (LsmInstance inst : {LsmInstance::BLA, LsmInstance::GLA, LsmInstance::Mamba2,
                             LsmInstance::GFW, LsmInstance::S4}) {
        Rng r2(20 + static_cast<int>(inst));
        const LsmSpec spec = LsmSpec::make(inst, d, d, &r2);
        const LsmGates gates = LsmGates::random_for(spec, n, r2);
        const Tensor ref = lsm_forward_sequential(q, k, v, gates, spec);
        for (int t : {1, 2, 4, 8}) {
            RankGroup g(t);
            const double dev = max_abs_diff(ref, sp_forward_masked(g, q, k, v, gates, spec));
            worst = std::max(worst, dev);
            require(dev < 1e-10, std::string("masked ") + instance_name(inst) + " T=" +
                                     std::to_string(t) + " dev " + fmt(dev));
        }
    }
    return "nomask + masked invariant over T{1,2,4,8}, max dev " + fmt(worst);
}

// --- 3: TP shard equivalence ------------------------------------------------

std::string c3_tp() {
    NoGradGuard ng;
    Rng rng(3);
    const int hidden = 8, n = 10;
    const Tensor x = Tensor::randn({n, hidden}, rng, 0.5);
    const Tensor wq = Tensor::randn({hidden, hidden}, rng, 0.3);
    const Tensor wk = Tensor::randn({hidden, hidden}, rng, 0.3);
    const Tensor wv = Tensor::randn({hidden, hidden}, rng, 0.3);
    const Tensor wo = Tensor::randn({hidden, hidden}, rng, 0.3);
    double worst = 0.0;
    for (int t : {2, 4}) {
        const LsmSpec spec = LsmSpec::make(LsmInstance::RetNet, hidden / t, hidden / t);
        const double dev =
            tp_shard_check(x, wq, wk, wv, wo, spec, LsmGates{}, t).max_abs_dev;
        worst = std::max(worst, dev);
        require(dev < 1e-10, "T=" + std::to_string(t) + " dev " + fmt(dev));
    }
    return "sharded == unsharded for T{2,4}, max dev " + fmt(worst);
}

// --- 4: hybrid SP end-to-end ------------------------------------------------

std::string c4_hybrid() {
    NoGradGuard ng;
    Rng rng(4);
    ModelConfig cfg = ModelConfig::preset("tiny");
    cfg.pattern = "LNLN";
    cfg.num_layers = 4;
    const Model m = build_model(cfg, rng);
    PackedBatch b;
    for (int i = 0; i < 12; ++i) b.tokens.push_back(1 + (i * 7) % 31);
    b.labels.assign(12, -1);
    b.boundaries = {0, 12};
    const Tensor ref = model_forward(m, b).logits;
    double worst = 0.0;
    for (int t : {2, 4}) {
        RankGroup g(t);
        const double dev = max_abs_diff(ref, hybrid_sp_forward(g, m, b));
        worst = std::max(worst, dev);
        require(dev < 1e-9, "T=" + std::to_string(t) + " dev " + fmt(dev));
    }
    return "LNLN logits match single-rank for T{2,4}, max dev " + fmt(worst);
}

// --- 5: gradient correctness ------------------------------------------------

double fd_check(Tensor& leaf, const std::function<Tensor()>& loss_fn, double h = 1e-5) {
    auto f = [&](const Tensor& probe) {
        std::copy(probe.data().begin(), probe.data().end(), leaf.mutable_data().begin());
        return loss_fn().item();
    };
    const Tensor snap = Tensor::from_data(leaf.shape(), leaf.data());
    const auto fd = finite_diff_grad(f, snap, h);
    std::copy(snap.data().begin(), snap.data().end(), leaf.mutable_data().begin());
    if (!leaf.has_grad()) {
        // no tape edge: output must be independent of this leaf
        double m = 0.0;
        for (double g : fd) m = std::max(m, std::abs(g));
        require(m < 1e-8, "missing gradient but finite differences see " + fmt(m));
        return 0.0;
    }
    return max_rel_err(leaf.grad(), fd, 1e-4);
}

std::string c5_gradients() {
    double worst = 0.0;
    for (LsmInstance inst : all_instances()) {
        Rng rng(500 + static_cast<int>(inst));
        LsmSpec spec = LsmSpec::make(inst, 4, 4, &rng);
        for (Tensor* t : {&spec.s4_delta_raw, &spec.s4_b, &spec.s4_A_raw, &spec.mamba_A_raw,
                          &spec.mamba2_a_raw})
            if (t->defined()) t->set_requires_grad(true);
        const int n = 8;
        Tensor q = Tensor::randn({n, 4}, rng, 0.5, DType::f64, true);
        Tensor k = Tensor::randn({n, 4}, rng, 0.5, DType::f64, true);
        Tensor v = Tensor::randn({n, 4}, rng, 0.5, DType::f64, true);
        LsmGates gates = LsmGates::random_for(spec, n, rng);
        for (Tensor t : gates.params()) t.set_requires_grad(true);
        auto loss_fn = [&]() {
            return sum(square(lsm_forward_sequential(q, k, v, gates, spec)));
        };
        backward(loss_fn());
        std::vector<Tensor> leaves{q, k, v};
        for (Tensor t : gates.params()) leaves.push_back(t);
        for (Tensor t : spec.static_params()) leaves.push_back(t);
        for (Tensor leaf : leaves) {
            const double err = fd_check(leaf, loss_fn);
            worst = std::max(worst, err);
            require(err < 1e-4,
                    std::string(instance_name(inst)) + " grad rel err " + fmt(err));
        }
    }
    {  // MoE
        Rng rng(55);
        const MoeLayer layer = MoeLayer::init(MoeConfig{3, 2, 4, 5, 0.01}, rng, DType::f64);
        Tensor x = Tensor::randn({6, 4}, rng, 0.5, DType::f64, true);
        auto loss_fn = [&]() {
            auto [y, aux] = layer.forward(x);
            return add(sum(square(y)), aux);
        };
        backward(loss_fn());
        const double err = fd_check(x, loss_fn);
        worst = std::max(worst, err);
        require(err < 1e-4, "moe grad rel err " + fmt(err));
    }
    {  // attention
        Rng rng(56);
        Tensor q = Tensor::randn({6, 4}, rng, 0.5, DType::f64, true);
        const Tensor k = Tensor::randn({6, 4}, rng, 0.5);
        const Tensor v = Tensor::randn({6, 4}, rng, 0.5);
        auto loss_fn = [&]() { return sum(square(softmax_attention_parallel(q, k, v, true))); };
        backward(loss_fn());
        const double err = fd_check(q, loss_fn);
        worst = std::max(worst, err);
        require(err < 1e-4, "attention grad rel err " + fmt(err));
    }
    {  // 2-layer end-to-end, looser bound
        Rng rng(57);
        ModelConfig cfg = ModelConfig::preset("tiny");
        cfg.pattern = "LN";
        cfg.vocab_size = 16;
        const Model m = build_model(cfg, rng);
        const PackedBatch b = pack_sequences({{1, 2, 3, 4, 5}});
        auto loss_fn = [&]() {
            return lm_loss(model_forward(m, b), b.labels, cfg.aux_loss_weight);
        };
        m.zero_grad();
        backward(loss_fn());
        Tensor leaf = m.blocks[0].lsm.wq;
        // larger step: deep-graph rounding noise dominates tiny FD quotients
        const double err = fd_check(leaf, loss_fn, 1e-3);
        worst = std::max(worst, err);
        require(err < 1e-3, "end-to-end grad rel err " + fmt(err));
    }
    return "all instances + moe + attention + end-to-end, max rel err " + fmt(worst);
}

// --- 6: MoE dense equivalence and simplex ----------------------------------

std::string c6_moe() {
    NoGradGuard ng;
    Rng rng(6);
    double worst = 0.0;
    for (int e : {1, 4, 8}) {
        std::vector<int> ks{1, 2, e};
        for (int k : ks) {
            if (k > e) continue;
            const MoeConfig cfg{e, k, 6, 8, 0.01};
            const MoeLayer layer = MoeLayer::init(cfg, rng, DType::f64);
            const Tensor x = Tensor::randn({16, 6}, rng, 0.5);
            auto [y, aux] = layer.forward(x);
            const RoutingDecision dec = route(matmul(x, layer.router), k);
            for (int t = 0; t < 16; ++t) {
                double srow = 0.0;
                for (int c = 0; c < e; ++c) {
                    require(dec.gates.at(t, c) >= 0.0, "negative gate");
                    srow += dec.gates.at(t, c);
                }
                require(std::abs(srow - 1.0) < 1e-12, "gate row sum != 1");
            }
            // combine oracle (dense reference when k == e)
            for (int t = 0; t < 16; ++t) {
                std::vector<double> want(6, 0.0);
                for (int id : dec.expert_ids[t]) {
                    const Tensor he = layer.experts[id].forward(slice_rows(x, t, t + 1));
                    for (int c = 0; c < 6; ++c) want[c] += dec.gates.at(t, id) * he.at(0, c);
                }
                for (int c = 0; c < 6; ++c)
                    worst = std::max(worst, std::abs(y.at(t, c) - want[c]));
            }
            require(worst < 1e-10, "combine deviation " + fmt(worst));
            (void)aux;
        }
    }
    return "E{1,4,8} x k{1,2,E}: simplex + combine oracle, max dev " + fmt(worst);
}

// --- 7: communication accounting -------------------------------------------

std::string c7_comm() {
    NoGradGuard ng;
    const int d = 4, t = 4;
    LsmSpec spec = LsmSpec::make(LsmInstance::BLA, d, d);
    spec.use_normalizer = false;
    long state_elems = -1;
    for (int n : {8, 16, 32}) {
        Rng rng(70 + n);
        const Tensor q = Tensor::randn({n, d}, rng, 0.5);
        RankGroup g(t);
        (void)sp_forward_nomask(g, q, q, q, spec);
        require(g.comm_log().size() == 1, "expected exactly one state collective");
        const long elems = g.comm_log()[0].elements;
        require(elems == static_cast<long>(t) * d * d,
                "state traffic " + std::to_string(elems) + " != T*dk*dv");
        if (state_elems < 0) state_elems = elems;
        require(elems == state_elems, "state traffic depends on chunk length");
    }
    std::vector<long> kv;
    for (int n : {16, 32, 64}) {
        Rng rng(80 + n);
        const Tensor q = Tensor::randn({n, d}, rng, 0.5);
        RankGroup g(t);
        (void)sp_attention_allgather(g, q, q, q);
        require(g.comm_log().size() == 2, "expected K and V all-gathers");
        require(g.comm_log()[0].elements == static_cast<long>(n) * d, "K traffic != N*d");
        kv.push_back(g.comm_log()[0].elements + g.comm_log()[1].elements);
    }
    require(kv[1] == 2 * kv[0] && kv[2] == 2 * kv[1], "K/V traffic not linear in N");
    return "state traffic == T*dk*dv (length-independent); K/V traffic exactly linear in N";
}

// --- 8: efficiency trend -----------------------------------------------------

std::string c8_efficiency() {
    NoGradGuard ng;
    const int d = 8;
    Rng rng(8);
    const LsmSpec spec = LsmSpec::make(LsmInstance::GLA, d, d, &rng);
    const long budget = 4096;
    const std::vector<int> lens{256, 512, 1024, 2048};
    std::vector<double> lsm_us, attn_us;
    std::vector<long> states, kvs;
    for (int len : lens) {
        const int reps = static_cast<int>(std::max(1L, budget / len));
        const Tensor q = Tensor::randn({len, d}, rng, 0.5);
        const Tensor k = Tensor::randn({len, d}, rng, 0.5);
        const Tensor v = Tensor::randn({len, d}, rng, 0.5);
        const LsmGates gates = LsmGates::random_for(spec, len, rng);
        auto t0 = std::chrono::steady_clock::now();
        MemoryState st;
        for (int r = 0; r < reps; ++r)
            (void)lsm_forward_chunked(q, k, v, gates, spec, 32, &st);
        auto t1 = std::chrono::steady_clock::now();
        lsm_us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() /
                         (double(reps) * len));
        states.push_back(st.element_count());
        t0 = std::chrono::steady_clock::now();
        KvCache cache;
        for (int r = 0; r < reps; ++r) {
            cache = KvCache();
            for (int s = 0; s < len; ++s)
                (void)softmax_attention_step(cache, row(q, s), row(k, s), row(v, s));
        }
        t1 = std::chrono::steady_clock::now();
        attn_us.push_back(std::chrono::duration<double, std::micro>(t1 - t0).count() /
                          (double(reps) * len));
        kvs.push_back(cache.element_count());
    }
    for (std::size_t i = 1; i < states.size(); ++i)
        require(states[i] == states[0], "LSM state memory not constant");
    for (std::size_t i = 0; i < kvs.size(); ++i)
        require(kvs[i] == static_cast<long>(2) * d * lens[i], "KV cache not linear");
    const double lsm_ratio = lsm_us.back() / lsm_us.front();
    const double attn_ratio = attn_us.back() / attn_us.front();
    require(lsm_ratio < attn_ratio,
            "time/token growth: lsm " + fmt(lsm_ratio) + " vs attn " + fmt(attn_ratio));
    return "256->2048 time/token growth: lsm " + fmt(lsm_ratio) + "x < attn " +
           fmt(attn_ratio) + "x; state const, KV linear";
}

// --- 9: recall hybrid advantage ---------------------------------------------

// Hybrid needs two adjacent attention layers for the induction circuit;
// "NNL" vs pure "LLL" with the BLA instance keeps parameter counts identical.
RunConfig c9_config(const std::string& pattern, std::uint64_t seed) {
    RunConfig rc;
    rc.instance = "bla";
    rc.pattern = pattern;
    rc.num_layers = 3;
    rc.hidden = 48;
    rc.ffn_dim = 48;
    rc.num_heads = 2;
    rc.num_experts = 2;
    rc.num_active = 1;
    rc.vocab_size = 16;
    rc.steps = 5000;
    rc.batch_size = 32;
    rc.log_interval = 5000;
    rc.lr_max = 0.002;
    rc.lr_min = 0.0002;
    rc.seed = seed;
    rc.mqar_pairs = 2;
    rc.mqar_queries = 2;
    return rc;
}

std::string c9_recall() {
    auto accuracy = [](const std::string& pattern, std::uint64_t seed) {
        const RunConfig rc = c9_config(pattern, seed);
        const TrainResult res = train_mqar(rc);
        MqarConfig eval;
        eval.vocab = rc.vocab_size;
        eval.num_pairs = rc.mqar_pairs;
        eval.num_queries = rc.mqar_queries;
        eval.num_sequences = 64;
        eval.seed = 999 + seed;
        return mqar_query_accuracy(res.model, gen_mqar(eval).samples);
    };
    double hybrid = 0.0, pure = 0.0;
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        hybrid += accuracy("NNL", seed);
        pure += accuracy("LLL", seed);
    }
    hybrid /= 3.0;
    pure /= 3.0;
    long hybrid_params = 0, pure_params = 0;
    {
        Rng rng(1);
        hybrid_params = build_model(c9_config("NNL", 1).model_config(), rng).param_count();
        pure_params = build_model(c9_config("LLL", 1).model_config(), rng).param_count();
    }
    require(hybrid_params == pure_params, "parameter counts not matched");
    require(hybrid >= pure, "hybrid " + fmt(hybrid) + " < pure " + fmt(pure));
    return "3-seed mean MQAR query accuracy: hybrid " + fmt(hybrid) + " >= pure " +
           fmt(pure) + " (matched " + std::to_string(hybrid_params) + " params)";
}

// --- 10: variable-length isolation ------------------------------------------

std::string c10_packing() {
    NoGradGuard ng;
    Rng rng(10);
    ModelConfig cfg = ModelConfig::preset("tiny");
    cfg.pattern = "LN";
    const Model m = build_model(cfg, rng);
    const std::vector<std::vector<int>> docs{{5, 9, 2, 7, 1, 8}, {3, 3, 8}, {12, 4}};
    const PackedBatch packed = pack_sequences(docs);
    const Tensor packed_logits = model_forward(m, packed).logits;
    double worst = 0.0;
    int off = 0;
    for (const auto& doc : docs) {
        const Tensor solo = model_forward(m, pack_sequences({doc})).logits;
        worst = std::max(worst,
                         max_abs_diff(solo, slice_rows(packed_logits, off,
                                                       off + static_cast<int>(doc.size()))));
        off += static_cast<int>(doc.size());
    }
    require(worst < 1e-10, "per-document deviation " + fmt(worst));
    PackedBatch perturbed = packed;
    perturbed.tokens[7] = 13;  // inside document 2
    const Tensor p_logits = model_forward(m, perturbed).logits;
    const double cross =
        max_abs_diff(slice_rows(packed_logits, 0, 6), slice_rows(p_logits, 0, 6));
    const double tail = max_abs_diff(slice_rows(packed_logits, 9, 11),
                                     slice_rows(p_logits, 9, 11));
    require(cross == 0.0, "cross-document sensitivity " + fmt(cross));
    require(tail == 0.0, "cross-document sensitivity (later doc) " + fmt(tail));
    return "packed == per-doc (max dev " + fmt(worst) + "); cross-doc sensitivity exactly 0";
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria{
        {"criterion-1 kernel oracle equivalence", c1_kernels},
        {"criterion-2 SP rank invariance", c2_sp},
        {"criterion-3 TP shard equivalence", c3_tp},
        {"criterion-4 hybrid SP end-to-end", c4_hybrid},
        {"criterion-5 gradient correctness", c5_gradients},
        {"criterion-6 MoE equivalence and simplex", c6_moe},
        {"criterion-7 communication accounting", c7_comm},
        {"criterion-8 efficiency trend", c8_efficiency},
        {"criterion-9 recall hybrid advantage", c9_recall},
        {"criterion-10 variable-length isolation", c10_packing},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        try {
            const std::string detail = c.body();
            std::cout << "PASS " << c.name << ": " << detail << "\n";
        } catch (const std::exception& e) {
            std::cout << "FAIL " << c.name << ": " << e.what() << "\n";
            ++failures;
        }
    }
    return failures == 0 ? 0 : 1;
}

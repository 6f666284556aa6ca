#pragma once

// Simulated multi-rank parallelism.
//
// Ranks are in-process threads that interact only at collective barriers, so
// outputs and the communication log are schedule-independent. Implements
// sequence parallelism for LSM layers (state all-gather, without and with
// causal masking), all-gather K/V sequence parallelism for attention layers,
// hybrid-model SP, and a tensor-parallel shard equivalence check, all with
// element-count communication accounting.

#include <condition_variable>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "lmoe/attention.hpp"
#include "lmoe/lsm.hpp"
#include "lmoe/model.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

struct CommRecord {
    int seq = 0;            // call-site sequence number (deterministic ordering key)
    std::string layer;
    std::string kind;       // "all_gather" | "reduce_scatter"
    long elements = 0;
};

// T simulated ranks. Every collective is a full barrier: all ranks must call
// it with the same call-site sequence number and kind. A rank that exits
// (normally or by exception) while others wait is reported as a deadlock.
class RankGroup {
public:
    explicit RankGroup(int t) : t_(t) {
        if (t < 1) throw std::runtime_error("RankGroup: world size must be >= 1");
    }

    int world_size() const { return t_; }
    const std::vector<CommRecord>& comm_log() const { return log_; }
    void clear_comm_log() { log_.clear(); }

    // Runs body(rank) on T threads, joins, and rethrows the first body error.
    void run(const std::function<void(int)>& body) {
        seq_.assign(t_, 0);
        finished_.assign(t_, false);
        slots_.clear();
        std::vector<std::exception_ptr> errs(t_);
        std::vector<std::thread> threads;
        threads.reserve(t_);
        for (int r = 0; r < t_; ++r)
            threads.emplace_back([&, r]() {
                try {
                    body(r);
                } catch (...) {
                    errs[r] = std::current_exception();
                }
                std::lock_guard<std::mutex> lk(mu_);
                finished_[r] = true;
                cv_.notify_all();
            });
        for (auto& th : threads) th.join();
        // Prefer a real failure over the secondary deadlock reports it causes.
        std::exception_ptr deadlock;
        for (const auto& e : errs) {
            if (!e) continue;
            try {
                std::rethrow_exception(e);
            } catch (const std::exception& ex) {
                if (std::string(ex.what()).find("deadlock") != std::string::npos) {
                    if (!deadlock) deadlock = e;
                    continue;
                }
                std::rethrow_exception(e);
            }
        }
        if (deadlock) std::rethrow_exception(deadlock);
    }

    // Every rank receives every rank's tensor, in rank order.
    std::vector<Tensor> all_gather(int rank, const Tensor& local,
                                   const std::string& layer = "") {
        std::vector<Tensor> all =
            exchange(rank, local, "all_gather", layer,
                     static_cast<long>(t_) * static_cast<long>(local.size()), true);
        return all;
    }

    // Rank t receives the t-th shard of the elementwise sum (rank-1 tensors).
    Tensor reduce_scatter(int rank, const Tensor& local, const std::string& layer = "") {
        if (local.shape().size() != 1 || local.shape()[0] % t_ != 0)
            throw std::runtime_error(
                "reduce_scatter: payload must be rank-1 with length divisible by T");
        std::vector<Tensor> all = exchange(rank, local, "reduce_scatter", layer,
                                           static_cast<long>(local.size()), true);
        Tensor acc = all[0];
        for (int i = 1; i < t_; ++i) acc = add(acc, all[i]);
        const int w = local.shape()[0] / t_;
        return slice_elems(acc, rank * w, (rank + 1) * w);
    }

private:
    struct Slot {
        std::vector<Tensor> payloads;
        std::string kind;
        std::string error;
        int arrived = 0;
        int departed = 0;
        bool logged = false;
    };

    // Deposits a payload at this rank's next call site, waits for all ranks,
    // returns all payloads (shared nodes, no copy).
    std::vector<Tensor> exchange(int rank, const Tensor& local, const char* kind,
                                 const std::string& layer, long log_elements,
                                 bool check_shapes) {
        std::unique_lock<std::mutex> lk(mu_);
        const int s = seq_[rank]++;
        Slot& slot = slots_[s];
        if (slot.payloads.empty()) {
            slot.payloads.resize(t_);
            slot.kind = kind;
        } else if (slot.kind != kind) {
            slot.error = "collective kind mismatch at call site " + std::to_string(s) +
                         ": " + slot.kind + " vs " + kind;
        }
        slot.payloads[rank] = local;
        slot.arrived++;
        if (slot.arrived == t_) {
            if (check_shapes && slot.error.empty())
                for (int i = 1; i < t_; ++i)
                    if (slot.payloads[i].shape() != slot.payloads[0].shape())
                        slot.error = std::string(kind) +
                                     ": shape mismatch across ranks at call site " +
                                     std::to_string(s);
            if (!slot.logged) {
                slot.logged = true;
                if (slot.error.empty()) log_.push_back({s, layer, kind, log_elements});
            }
            cv_.notify_all();
        } else {
            cv_.wait(lk, [&]() {
                if (slot.arrived == t_ || !slot.error.empty()) return true;
                for (int r = 0; r < t_; ++r)
                    if (finished_[r] && seq_[r] <= s) {
                        slot.error = "deadlock: rank " + std::to_string(r) +
                                     " exited without matching collective at call site " +
                                     std::to_string(s);
                        cv_.notify_all();
                        return true;
                    }
                return false;
            });
        }
        if (!slot.error.empty()) {
            const std::string err = slot.error;
            lk.unlock();
            throw std::runtime_error(err);
        }
        std::vector<Tensor> out = slot.payloads;
        if (++slot.departed == t_) slots_.erase(s);
        return out;
    }

    int t_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::map<int, Slot> slots_;
    std::vector<int> seq_;
    std::vector<bool> finished_;
    std::vector<CommRecord> log_;
};

// One record per collective as line-delimited JSON.
inline void write_comm_trace(const std::string& path, const std::vector<CommRecord>& log,
                             int bytes_per_element = 8) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_comm_trace: cannot open " + path);
    for (const auto& r : log)
        os << "{\"seq\":" << r.seq << ",\"layer\":\"" << r.layer << "\",\"kind\":\""
           << r.kind << "\",\"elements\":" << r.elements << ",\"bytes\":"
           << r.elements * static_cast<long>(bytes_per_element) << "}\n";
}

// Balanced row split: chunk sizes differ by at most one, in rank order.
inline std::pair<int, int> chunk_range(int n, int t, int rank) {
    if (n < t) throw std::runtime_error("chunk_range: need at least one row per rank");
    const int base = n / t, rem = n % t;
    const int r0 = rank * base + std::min(rank, rem);
    return {r0, r0 + base + (rank < rem ? 1 : 0)};
}

// Exclusive prefix sum of per-rank states: rank 0 receives zeros, rank t
// receives the sum over ranks i < t. One all-gather.
inline Tensor prefix_sum_states(RankGroup& g, int rank, const Tensor& m_local,
                                const std::string& layer = "prefix") {
    const auto all = g.all_gather(rank, m_local, layer);
    Tensor acc = Tensor::zeros(m_local.shape(), m_local.dtype());
    for (int i = 0; i < rank; ++i) acc = add(acc, all[i]);
    return acc;
}

// Decay-weighted exclusive prefix: rank t receives
// sum_{i<t} (prod_{j=i+1}^{t-1} D_j) . M_i, with D_j the cumulative decay of
// chunk j (same shape as M or broadcastable). Unit decays reduce to the
// plain prefix sum. Two all-gathers (states, decays).
inline Tensor prefix_sum_states_decayed(RankGroup& g, int rank, const Tensor& m_local,
                                        const Tensor& d_local,
                                        const std::string& layer = "prefix") {
    const auto ms = g.all_gather(rank, m_local, layer);
    const auto ds = g.all_gather(rank, d_local, layer);
    Tensor acc = Tensor::zeros(m_local.shape(), m_local.dtype());
    Tensor factor = Tensor::full(d_local.shape(), 1.0, d_local.dtype());
    for (int i = rank - 1; i >= 0; --i) {
        acc = add(acc, mul(factor, ms[i]));
        factor = mul(factor, ds[i]);
    }
    return acc;
}

namespace detail_sp {

inline LsmGates slice_gates(const LsmGates& gates, int r0, int r1) {
    LsmGates out;
    if (gates.a_pre.defined())
        out.a_pre = gates.a_pre.shape().size() == 2 ? slice_rows(gates.a_pre, r0, r1)
                                                    : slice_elems(gates.a_pre, r0, r1);
    if (gates.b_pre.defined()) out.b_pre = slice_elems(gates.b_pre, r0, r1);
    if (gates.alpha_pre.defined()) out.alpha_pre = slice_rows(gates.alpha_pre, r0, r1);
    if (gates.beta_pre.defined()) out.beta_pre = slice_rows(gates.beta_pre, r0, r1);
    return out;
}

struct LocalChunk {
    kern::ChunkResult fresh;   // chunk evaluated from the zero state
    Tensor total_decay;        // cumulative decay over the chunk (vector or matrix)
    Tensor phi_q, keff, veff;
    Tensor decay_rows;               // separable kinds
    std::vector<Tensor> decay_mats;  // elementwise kinds
    bool elementwise = false;
};

inline LocalChunk local_chunk(const Tensor& q_loc, const Tensor& k_loc, const Tensor& v_loc,
                              const LsmGates& g_loc, const LsmSpec& spec) {
    LocalChunk lc;
    const int c = q_loc.shape()[0];
    lc.phi_q = apply_feature_map(q_loc, spec.feature_map);
    lc.keff = kern::effective_keys(k_loc, g_loc, spec, 0, c);
    lc.veff = v_loc;
    const MemoryState zero = MemoryState::fresh(spec, q_loc.dtype());
    const DecayKind dk = decay_kind(spec.instance);
    if (dk == DecayKind::TokenOuter || dk == DecayKind::FullElementwise) {
        lc.elementwise = true;
        lc.decay_mats = kern::decay_matrices(spec, g_loc, 0, c);
        lc.fresh = kern::chunk_forward_elementwise(spec, lc.phi_q, lc.keff, lc.veff,
                                                   lc.decay_mats, zero);
        Tensor d = lc.decay_mats[0];
        for (int s = 1; s < c; ++s) d = mul(d, lc.decay_mats[s]);
        lc.total_decay = d;
    } else {
        lc.decay_rows = kern::decay_vector_rows(spec, g_loc, 0, c, q_loc.dtype());
        lc.fresh = kern::chunk_forward_separable(spec, lc.phi_q, lc.keff, lc.veff,
                                                 lc.decay_rows, zero);
        Tensor d = row(lc.decay_rows, 0);
        for (int s = 1; s < c; ++s) d = mul(d, row(lc.decay_rows, s));
        lc.total_decay = d;
    }
    return lc;
}

}  // namespace detail_sp

// Non-causal SP for undecayed instances: local state M_t = Keff_t^T V_t, one
// all-gather of the T states, global O_t = phi(Q_t) . sum(M). Exactly one
// state collective of T * d_k * d_v elements per call.
inline Tensor sp_lsm_nomask_rank(RankGroup& g, int rank, const Tensor& q_loc,
                                 const Tensor& k_loc, const Tensor& v_loc,
                                 const LsmSpec& spec, const std::string& layer = "lsm") {
    spec.validate();
    if (decay_kind(spec.instance) != DecayKind::None)
        throw std::runtime_error("sp_forward_nomask: requires an undecayed instance");
    if (spec.use_normalizer)
        throw std::runtime_error("sp_forward_nomask: normalizer unsupported");
    const Tensor phi_q = apply_feature_map(q_loc, spec.feature_map);
    const Tensor phi_k = apply_feature_map(k_loc, spec.feature_map);
    const Tensor m_local = matmul(transpose(phi_k), v_loc);
    const auto all = g.all_gather(rank, m_local, layer);
    Tensor m_global = all[0];
    for (int i = 1; i < g.world_size(); ++i) m_global = add(m_global, all[i]);
    return matmul(phi_q, m_global);
}

// Causal SP for closed-chunk-form instances: intra-chunk masked term from the
// chunkwise kernel plus the decay-weighted exclusive prefix of earlier ranks'
// chunk states. The state (plus normalizer and per-chunk decay where needed)
// travels in a single concatenated all-gather per call.
inline Tensor sp_lsm_masked_rank(RankGroup& g, int rank, const Tensor& q_loc,
                                 const Tensor& k_loc, const Tensor& v_loc,
                                 const LsmGates& g_loc, const LsmSpec& spec,
                                 const std::string& layer = "lsm",
                                 MemoryState* final_state = nullptr) {
    spec.validate();
    if (!has_closed_chunk_form(spec.instance))
        throw std::runtime_error(
            "sp_forward_masked: state-dependent instances have no chunk-parallel form");
    const DecayKind dk = decay_kind(spec.instance);
    detail_sp::LocalChunk lc = detail_sp::local_chunk(q_loc, k_loc, v_loc, g_loc, spec);

    // payload: elementwise kinds stack [S; D] by rows; separable kinds append
    // z and the decay vector as extra columns.
    Tensor payload;
    if (lc.elementwise) {
        payload = concat_rows({lc.fresh.state.M, lc.total_decay});
    } else {
        std::vector<Tensor> cols{lc.fresh.state.M};
        if (spec.use_normalizer)
            cols.push_back(reshape(lc.fresh.state.z, {spec.d_k, 1}));
        if (dk != DecayKind::None)
            cols.push_back(reshape(lc.total_decay, {spec.d_k, 1}));
        payload = cols.size() == 1 ? cols[0] : concat_cols(cols);
    }
    const auto all = g.all_gather(rank, payload, layer);

    // Decay-weighted exclusive prefix of the fresh chunk states.
    MemoryState in_state = MemoryState::fresh(spec, q_loc.dtype());
    Tensor m_acc = in_state.M;
    Tensor z_acc = in_state.z;
    Tensor factor_m;  // matrix factor (elementwise) or vector factor (separable)
    Tensor factor_v;
    if (lc.elementwise)
        factor_m = Tensor::full({spec.d_k, spec.d_v}, 1.0, q_loc.dtype());
    else
        factor_v = Tensor::full({spec.d_k}, 1.0, q_loc.dtype());
    for (int i = rank - 1; i >= 0; --i) {
        const Tensor& p = all[i];
        if (lc.elementwise) {
            const Tensor s_i = slice_rows(p, 0, spec.d_k);
            const Tensor d_i = slice_rows(p, spec.d_k, 2 * spec.d_k);
            m_acc = add(m_acc, mul(factor_m, s_i));
            factor_m = mul(factor_m, d_i);
        } else {
            int col = spec.d_v;
            const Tensor s_i = slice_cols(p, 0, spec.d_v);
            m_acc = add(m_acc, scale_rows(s_i, factor_v));
            if (spec.use_normalizer) {
                const Tensor z_i = reshape(slice_cols(p, col, col + 1), {spec.d_k});
                z_acc = add(z_acc, mul(factor_v, z_i));
                ++col;
            }
            if (dk != DecayKind::None) {
                const Tensor d_i = reshape(slice_cols(p, col, col + 1), {spec.d_k});
                factor_v = mul(factor_v, d_i);
            }
        }
    }
    in_state.M = m_acc;
    if (spec.use_normalizer) in_state.z = z_acc;
    in_state.step = 0;  // step bookkeeping is per-rank local

    // Re-evaluate the chunk with the carried-in state for the final output.
    kern::ChunkResult cr;
    if (lc.elementwise)
        cr = kern::chunk_forward_elementwise(spec, lc.phi_q, lc.keff, lc.veff, lc.decay_mats,
                                             in_state);
    else
        cr = kern::chunk_forward_separable(spec, lc.phi_q, lc.keff, lc.veff, lc.decay_rows,
                                           in_state);
    if (final_state) *final_state = cr.state;
    return cr.O;
}

// Causal attention SP: all-gather K and V, local Q attends to the global
// sequence with its global row offset.
inline Tensor sp_attention_rank(RankGroup& g, int rank, const Tensor& q_loc,
                                const Tensor& k_loc, const Tensor& v_loc, int row_offset,
                                const std::string& layer = "attn") {
    const auto ks = g.all_gather(rank, k_loc, layer);
    const auto vs = g.all_gather(rank, v_loc, layer);
    return softmax_attention_parallel(q_loc, concat_rows(ks), concat_rows(vs), true,
                                      row_offset);
}

// -- whole-sequence wrappers (split rows, run T ranks, reassemble) ----------

inline Tensor sp_forward_nomask(RankGroup& g, const Tensor& q_mat, const Tensor& k_mat,
                                const Tensor& v_mat, const LsmSpec& spec) {
    const int n = q_mat.shape()[0];
    const int t = g.world_size();
    std::vector<Tensor> outs(t);
    g.run([&](int r) {
        const auto [r0, r1] = chunk_range(n, t, r);
        outs[r] = sp_lsm_nomask_rank(g, r, slice_rows(q_mat, r0, r1),
                                     slice_rows(k_mat, r0, r1), slice_rows(v_mat, r0, r1),
                                     spec);
    });
    return concat_rows(outs);
}

inline Tensor sp_forward_masked(RankGroup& g, const Tensor& q_mat, const Tensor& k_mat,
                                const Tensor& v_mat, const LsmGates& gates,
                                const LsmSpec& spec) {
    const int n = q_mat.shape()[0];
    const int t = g.world_size();
    std::vector<Tensor> outs(t);
    g.run([&](int r) {
        const auto [r0, r1] = chunk_range(n, t, r);
        outs[r] = sp_lsm_masked_rank(g, r, slice_rows(q_mat, r0, r1),
                                     slice_rows(k_mat, r0, r1), slice_rows(v_mat, r0, r1),
                                     detail_sp::slice_gates(gates, r0, r1), spec);
    });
    return concat_rows(outs);
}

inline Tensor sp_attention_allgather(RankGroup& g, const Tensor& q_mat, const Tensor& k_mat,
                                     const Tensor& v_mat) {
    const int n = q_mat.shape()[0];
    const int t = g.world_size();
    std::vector<Tensor> outs(t);
    g.run([&](int r) {
        const auto [r0, r1] = chunk_range(n, t, r);
        outs[r] = sp_attention_rank(g, r, slice_rows(q_mat, r0, r1),
                                    slice_rows(k_mat, r0, r1), slice_rows(v_mat, r0, r1),
                                    r0);
    });
    return concat_rows(outs);
}

// -- hybrid-model sequence parallelism --------------------------------------

namespace detail_sp {

// L-block mixer under SP: per-head masked state SP over projected chunks.
inline Tensor lsm_mixer_sp(RankGroup& g, int rank, const LsmMixer& mix, const Tensor& x_loc,
                           const std::string& layer) {
    const int n = x_loc.shape()[0];
    const Tensor q = matmul(x_loc, mix.wq);
    const Tensor k = matmul(x_loc, mix.wk);
    const Tensor v = matmul(x_loc, mix.wv);
    std::vector<Tensor> heads;
    for (int h = 0; h < mix.heads; ++h) {
        const int d = mix.head_specs[h].d_k;
        heads.push_back(sp_lsm_masked_rank(
            g, rank, slice_cols(q, h * d, (h + 1) * d), slice_cols(k, h * d, (h + 1) * d),
            slice_cols(v, h * d, (h + 1) * d), mix.gates_for_head(x_loc, h, n),
            mix.head_specs[h], layer));
    }
    return matmul(concat_cols(heads), mix.wo);
}

inline Tensor attn_mixer_sp(RankGroup& g, int rank, const AttentionMixer& mix,
                            const Tensor& x_loc, int row_offset, const std::string& layer) {
    const Tensor q = matmul(x_loc, mix.wq);
    const Tensor k = matmul(x_loc, mix.wk);
    const Tensor v = matmul(x_loc, mix.wv);
    std::vector<Tensor> heads;
    for (int h = 0; h < mix.heads; ++h) {
        const int c0 = h * mix.head_dim, c1 = (h + 1) * mix.head_dim;
        heads.push_back(sp_attention_rank(g, rank, slice_cols(q, c0, c1),
                                          slice_cols(k, c0, c1), slice_cols(v, c0, c1),
                                          row_offset, layer));
    }
    return matmul(concat_cols(heads), mix.wo);
}

}  // namespace detail_sp

// End-to-end hybrid SP forward: L-blocks use masked state SP, N-blocks use
// all-gather K/V SP; everything else (norms, MoE, LM head) is token-local.
// Single-document batches only: SP chunking and packing boundaries are not
// composed here.
inline Tensor hybrid_sp_forward(RankGroup& g, const Model& m, const PackedBatch& batch) {
    batch.validate();
    if (batch.num_docs() != 1)
        throw std::runtime_error("hybrid_sp_forward: single-document batches only");
    const int n = batch.total();
    const int t = g.world_size();
    std::vector<Tensor> outs(t);
    g.run([&](int r) {
        const auto [r0, r1] = chunk_range(n, t, r);
        const std::vector<int> toks(batch.tokens.begin() + r0, batch.tokens.begin() + r1);
        std::vector<int> positions(toks.size());
        std::iota(positions.begin(), positions.end(), r0);  // single doc: global == local
        Tensor x = add(gather_rows(m.embedding, toks),
                       gather_rows(m.pos_embedding, positions));
        for (std::size_t b = 0; b < m.blocks.size(); ++b) {
            const Block& blk = m.blocks[b];
            const std::string layer = "block" + std::to_string(b);
            const Tensor h = rms_norm(x, blk.norm_mixer, m.config.norm_eps);
            const Tensor mixed =
                blk.kind == 'L'
                    ? detail_sp::lsm_mixer_sp(g, r, blk.lsm, h, layer + ".lsm")
                    : detail_sp::attn_mixer_sp(g, r, blk.attn, h, r0, layer + ".attn");
            x = add(x, mixed);
            const Tensor h2 = rms_norm(x, blk.norm_moe, m.config.norm_eps);
            x = add(x, blk.moe.forward(h2).first);
        }
        outs[r] = matmul(rms_norm(x, m.final_norm, m.config.norm_eps), m.lm_head);
    });
    return concat_rows(outs);
}

// -- tensor-parallel shard equivalence --------------------------------------

struct TpReport {
    double max_abs_dev = 0.0;
    long allreduce_elements = 0;
};

// Column-shards W_Q/W_K/W_V and row-shards W_O over T shards; each shard runs
// its head-block of the LSM kernel; the shard outputs are combined as
// sum_i O_i W_O^i and compared against the unsharded association order.
inline TpReport tp_shard_check(const Tensor& x, const Tensor& wq, const Tensor& wk,
                               const Tensor& wv, const Tensor& wo, const LsmSpec& head_spec,
                               const LsmGates& gates, int t, int chunk_size = 16) {
    const int hidden = wq.shape()[1];
    if (hidden % t != 0)
        throw std::runtime_error("tp_shard_check: hidden not divisible by T");
    const int w = hidden / t;
    if (head_spec.d_k != w || head_spec.d_v != w)
        throw std::runtime_error("tp_shard_check: head spec dims must equal hidden/T");
    const int n = x.shape()[0];

    // Unsharded reference: full projections, per-block kernel, then W_O.
    const Tensor q = matmul(x, wq);
    const Tensor k = matmul(x, wk);
    const Tensor v = matmul(x, wv);
    std::vector<Tensor> blocks;
    for (int i = 0; i < t; ++i)
        blocks.push_back(lsm_forward_chunked(slice_cols(q, i * w, (i + 1) * w),
                                             slice_cols(k, i * w, (i + 1) * w),
                                             slice_cols(v, i * w, (i + 1) * w), gates,
                                             head_spec, chunk_size));
    const Tensor ref = matmul(concat_cols(blocks), wo);

    // Sharded route: project with weight shards, combine with row shards of W_O.
    Tensor combined = Tensor::zeros({n, wo.shape()[1]}, x.dtype());
    for (int i = 0; i < t; ++i) {
        const Tensor qi = matmul(x, slice_cols(wq, i * w, (i + 1) * w));
        const Tensor ki = matmul(x, slice_cols(wk, i * w, (i + 1) * w));
        const Tensor vi = matmul(x, slice_cols(wv, i * w, (i + 1) * w));
        const Tensor oi = lsm_forward_chunked(qi, ki, vi, gates, head_spec, chunk_size);
        combined = add(combined, matmul(oi, slice_rows(wo, i * w, (i + 1) * w)));
    }
    TpReport rep;
    rep.max_abs_dev = max_abs_diff(ref, combined);
    // The cross-shard sum is the all-reduce: each shard contributes a full
    // (n, out) partial.
    rep.allreduce_elements = static_cast<long>(t) * n * wo.shape()[1];
    return rep;
}

}  // namespace lmoe

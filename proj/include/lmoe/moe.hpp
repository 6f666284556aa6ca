#pragma once

// Sparse mixture-of-experts feed-forward layer: top-k softmax routing with
// renormalize-after-top-k gating, dropless token dispatch, and a switch-style
// load-balancing auxiliary loss.

#include <algorithm>
#include <numeric>
#include <vector>

#include "lmoe/tensor.hpp"

namespace lmoe {

struct MoeConfig {
    int num_experts = 1;
    int top_k = 1;
    int hidden = 0;
    int ffn_dim = 0;
    double aux_loss_weight = 0.01;

    void validate() const {
        if (num_experts < 1 || top_k < 1 || top_k > num_experts)
            throw std::runtime_error("MoeConfig: need 1 <= top_k <= num_experts");
        if (hidden <= 0 || ffn_dim <= 0) throw std::runtime_error("MoeConfig: nonpositive dims");
    }
};

// Two-layer gated MLP: down(silu(x Wg) . (x Wu)).
struct Expert {
    Tensor w_gate;  // (hidden, ffn)
    Tensor w_up;    // (hidden, ffn)
    Tensor w_down;  // (ffn, hidden)

    static Expert init(int hidden, int ffn, Rng& rng, DType dt) {
        Expert e;
        const double s1 = 1.0 / std::sqrt(double(hidden));
        const double s2 = 1.0 / std::sqrt(double(ffn));
        e.w_gate = Tensor::randn({hidden, ffn}, rng, s1, dt, true);
        e.w_up = Tensor::randn({hidden, ffn}, rng, s1, dt, true);
        e.w_down = Tensor::randn({ffn, hidden}, rng, s2, dt, true);
        return e;
    }

    Tensor forward(const Tensor& x) const {
        return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down);
    }
};

// Per-token routing choice: selected expert ids (ties broken toward the
// lower id) and gate weights renormalized over the selection.
struct RoutingDecision {
    std::vector<std::vector<int>> expert_ids;  // per token, size top_k
    Tensor gates;                              // (T, E); zero outside the selection
    Tensor full_probs;                         // (T, E); softmax over all logits
};

inline RoutingDecision route(const Tensor& router_logits, int top_k) {
    if (router_logits.shape().size() != 2)
        detail::shape_error("route", router_logits.shape(), {});
    const int t = router_logits.shape()[0];
    const int e = router_logits.shape()[1];
    if (top_k < 1 || top_k > e) throw std::runtime_error("route: bad top_k");
    RoutingDecision dec;
    dec.expert_ids.resize(t);
    std::vector<double> mask(router_logits.size(), 0.0);
    for (int i = 0; i < t; ++i) {
        std::vector<int> order(e);
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            const double la = router_logits.at(i, a);
            const double lb = router_logits.at(i, b);
            if (la != lb) return la > lb;
            return a < b;  // deterministic tie-break
        });
        order.resize(top_k);
        std::sort(order.begin(), order.end());
        dec.expert_ids[i] = order;
        for (int id : order) mask[static_cast<std::size_t>(i) * e + id] = 1.0;
    }
    dec.gates = softmax_rows(router_logits,
                             Tensor::from_data({t, e}, std::move(mask), router_logits.dtype()));
    dec.full_probs = softmax_rows(router_logits);
    return dec;
}

// E * sum_e f_e P_e, with f_e the fraction of token-slots routed to expert e
// (a constant of the routing) and P_e the mean router probability. Equals 1
// exactly when both are uniform and approaches E under full collapse.
inline Tensor load_balance_loss(const RoutingDecision& dec) {
    const int t = dec.full_probs.shape()[0];
    const int e = dec.full_probs.shape()[1];
    std::vector<double> frac(static_cast<std::size_t>(e), 0.0);
    long slots = 0;
    for (const auto& ids : dec.expert_ids) {
        for (int id : ids) frac[id] += 1.0;
        slots += static_cast<long>(ids.size());
    }
    for (auto& f : frac) f /= static_cast<double>(slots);
    const Tensor f_const = Tensor::from_data({e}, std::move(frac), dec.full_probs.dtype());
    const Tensor p_mean = scale(sum_cols(dec.full_probs), 1.0 / t);
    return scale(dot(f_const, p_mean), double(e));
}

struct MoeLayer {
    MoeConfig config;
    Tensor router;  // (hidden, E)
    std::vector<Expert> experts;

    static MoeLayer init(const MoeConfig& cfg, Rng& rng, DType dt) {
        cfg.validate();
        MoeLayer l;
        l.config = cfg;
        l.router = Tensor::randn({cfg.hidden, cfg.num_experts}, rng,
                                 1.0 / std::sqrt(double(cfg.hidden)), dt, true);
        for (int i = 0; i < cfg.num_experts; ++i)
            l.experts.push_back(Expert::init(cfg.hidden, cfg.ffn_dim, rng, dt));
        return l;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p{router};
        for (const auto& e : experts) {
            p.push_back(e.w_gate);
            p.push_back(e.w_up);
            p.push_back(e.w_down);
        }
        return p;
    }

    // Dropless dispatch: every token reaches each of its selected experts;
    // expert outputs are combined with the renormalized gates.
    std::pair<Tensor, Tensor> forward(const Tensor& x) const {
        config.validate();
        const int t = x.shape()[0];
        const RoutingDecision dec = route(matmul(x, router), config.top_k);
        std::vector<std::vector<int>> tokens_of(config.num_experts);
        for (int i = 0; i < t; ++i)
            for (int id : dec.expert_ids[i]) tokens_of[id].push_back(i);
        Tensor y = Tensor::zeros({t, config.hidden}, x.dtype());
        for (int e = 0; e < config.num_experts; ++e) {
            if (tokens_of[e].empty()) continue;
            const Tensor xe = gather_rows(x, tokens_of[e]);
            const Tensor he = experts[e].forward(xe);
            const Tensor ge = gather_col_elems(dec.gates, tokens_of[e], e);
            y = add(y, scatter_rows(scale_rows(he, ge), tokens_of[e], t));
        }
        return {y, load_balance_loss(dec)};
    }
};

}  // namespace lmoe

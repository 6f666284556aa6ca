#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "lmoe/moe.hpp"
#include "lmoe/verify.hpp"

using namespace lmoe;

TEST_CASE("routing picks the top-k logits with ties broken toward lower ids") {
    const Tensor logits = Tensor::from_data({2, 4}, {0.1, 0.9, 0.9, 0.2,
                                                     -1.0, -1.0, -1.0, -1.0});
    const RoutingDecision dec = route(logits, 2);
    CHECK(dec.expert_ids[0] == std::vector<int>{1, 2});
    CHECK(dec.expert_ids[1] == std::vector<int>{0, 1});  // full tie -> lowest ids
    // gates renormalized over the selection
    CHECK(dec.gates.at(0, 0) == 0.0);
    CHECK(dec.gates.at(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(dec.gates.at(1, 0) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK_THROWS_AS(route(logits, 5), std::runtime_error);
}

TEST_CASE("gates lie on the probability simplex for random logits") {
    Rng rng(3);
    const Tensor logits = Tensor::randn({32, 8}, rng, 1.0);
    for (int k : {1, 3, 8}) {
        const RoutingDecision dec = route(logits, k);
        for (int t = 0; t < 32; ++t) {
            double s = 0.0;
            int nonzero = 0;
            for (int e = 0; e < 8; ++e) {
                CHECK(dec.gates.at(t, e) >= 0.0);
                s += dec.gates.at(t, e);
                nonzero += dec.gates.at(t, e) > 0.0;
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(nonzero == k);
        }
    }
}

TEST_CASE("renormalize-after-top-k equals masked softmax over selected logits") {
    const Tensor logits = Tensor::from_data({1, 3}, {1.0, 3.0, 2.0});
    const RoutingDecision dec = route(logits, 2);
    const double z = std::exp(3.0) + std::exp(2.0);
    CHECK(dec.gates.at(0, 1) == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
    CHECK(dec.gates.at(0, 2) == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));
}

TEST_CASE("load balance loss is 1 under perfect uniformity and grows under collapse") {
    // uniform logits: every P_e = 1/E and slots spread evenly by tie-break rotation
    const int t = 8, e = 4;
    const Tensor uniform = Tensor::zeros({t, e});
    RoutingDecision dec = route(uniform, 1);
    // ties all go to expert 0 -> collapsed f; rebuild a uniform assignment manually
    for (int i = 0; i < t; ++i) dec.expert_ids[i] = {i % e};
    CHECK(load_balance_loss(dec).item() == doctest::Approx(1.0).epsilon(1e-12));

    // full collapse: all tokens on expert 0 with P concentrated there too
    const Tensor hot = Tensor::from_data({2, 2}, {50.0, 0.0, 50.0, 0.0});
    const RoutingDecision dhot = route(hot, 1);
    CHECK(load_balance_loss(dhot).item() == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("dropless dispatch: every token reaches its selected experts") {
    Rng rng(5);
    const MoeConfig cfg{4, 2, 6, 8, 0.01};
    const MoeLayer layer = MoeLayer::init(cfg, rng, DType::f64);
    const Tensor x = Tensor::randn({10, 6}, rng, 0.5);
    const RoutingDecision dec = route(matmul(x, layer.router), 2);
    // manual combine oracle
    auto [y, aux] = layer.forward(x);
    for (int t = 0; t < 10; ++t) {
        std::vector<double> want(6, 0.0);
        for (int id : dec.expert_ids[t]) {
            const Tensor he = layer.experts[id].forward(slice_rows(x, t, t + 1));
            for (int c = 0; c < 6; ++c) want[c] += dec.gates.at(t, id) * he.at(0, c);
        }
        for (int c = 0; c < 6; ++c)
            CHECK(y.at(t, c) == doctest::Approx(want[c]).epsilon(1e-10));
    }
    CHECK(aux.item() > 0.0);
}

TEST_CASE("dense equivalence and simplex suite") {
    const SuiteResult r = verify_moe();
    INFO(r.detail);
    CHECK(r.passed);
}

TEST_CASE("moe gradients match finite differences through routing") {
    Rng rng(7);
    const MoeConfig cfg{3, 2, 4, 5, 0.01};
    const MoeLayer layer = MoeLayer::init(cfg, rng, DType::f64);
    Tensor x = Tensor::randn({6, 4}, rng, 0.5, DType::f64, true);
    auto loss_of = [&]() {
        auto [y, aux] = layer.forward(x);
        return add(sum(square(y)), aux);
    };
    backward(loss_of());
    auto f = [&](const Tensor& probe) {
        std::copy(probe.data().begin(), probe.data().end(), x.mutable_data().begin());
        return loss_of().item();
    };
    const Tensor snap = Tensor::from_data(x.shape(), x.data());
    const auto fd = finite_diff_grad(f, snap);
    std::copy(snap.data().begin(), snap.data().end(), x.mutable_data().begin());
    // routing can flip under perturbation; tolerate only tiny relative error
    CHECK(max_rel_err(x.grad(), fd, 1e-3) < 1e-4);
}

TEST_CASE("config validation") {
    CHECK_THROWS_AS((MoeConfig{4, 5, 8, 8, 0.01}).validate(), std::runtime_error);
    CHECK_THROWS_AS((MoeConfig{0, 1, 8, 8, 0.01}).validate(), std::runtime_error);
    CHECK_THROWS_AS((MoeConfig{4, 2, 0, 8, 0.01}).validate(), std::runtime_error);
}

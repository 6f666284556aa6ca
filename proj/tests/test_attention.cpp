#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "lmoe/attention.hpp"

using namespace lmoe;

TEST_CASE("uniform scores average the values") {
    const Tensor q = Tensor::zeros({3, 2});
    const Tensor k = Tensor::zeros({3, 2});
    const Tensor v = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    const Tensor o = softmax_attention_parallel(q, k, v, false);
    for (int i = 0; i < 3; ++i) {
        CHECK(o.at(i, 0) == doctest::Approx(3.0).epsilon(1e-12));
        CHECK(o.at(i, 1) == doctest::Approx(4.0).epsilon(1e-12));
    }
}

TEST_CASE("causal masking: first row sees only itself, later rows prefix-average") {
    const Tensor q = Tensor::zeros({3, 2});
    const Tensor k = Tensor::zeros({3, 2});
    const Tensor v = Tensor::from_data({3, 2}, {1, 2, 3, 4, 5, 6});
    const Tensor o = softmax_attention_parallel(q, k, v, true);
    CHECK(o.at(0, 0) == 1.0);
    CHECK(o.at(0, 1) == 2.0);
    CHECK(o.at(1, 0) == doctest::Approx(2.0));
    CHECK(o.at(2, 1) == doctest::Approx(4.0));
}

TEST_CASE("future-value perturbation does not change past outputs") {
    Rng rng(5);
    const Tensor q = Tensor::randn({6, 4}, rng, 0.5);
    const Tensor k = Tensor::randn({6, 4}, rng, 0.5);
    Tensor v = Tensor::randn({6, 4}, rng, 0.5);
    const Tensor o1 = softmax_attention_parallel(q, k, v, true);
    v.mutable_data()[5 * 4 + 2] += 100.0;  // token 5
    const Tensor o2 = softmax_attention_parallel(q, k, v, true);
    CHECK(max_abs_diff(slice_rows(o1, 0, 5), slice_rows(o2, 0, 5)) == 0.0);
    CHECK(max_abs_diff(row(o1, 5), row(o2, 5)) > 0.0);
}

TEST_CASE("row_offset reproduces a later block of the full computation") {
    Rng rng(6);
    const int n = 8, d = 3;
    const Tensor q = Tensor::randn({n, d}, rng, 0.5);
    const Tensor k = Tensor::randn({n, d}, rng, 0.5);
    const Tensor v = Tensor::randn({n, d}, rng, 0.5);
    const Tensor full = softmax_attention_parallel(q, k, v, true);
    const Tensor part = softmax_attention_parallel(slice_rows(q, 5, 8), k, v, true, 5);
    CHECK(max_abs_diff(slice_rows(full, 5, 8), part) < 1e-14);
}

TEST_CASE("incremental decode equals the parallel form and the cache grows linearly") {
    Rng rng(7);
    const int n = 10, d = 4;
    const Tensor q = Tensor::randn({n, d}, rng, 0.5);
    const Tensor k = Tensor::randn({n, d}, rng, 0.5);
    const Tensor v = Tensor::randn({n, d}, rng, 0.5);
    const Tensor ref = softmax_attention_parallel(q, k, v, true);
    KvCache cache;
    for (int s = 0; s < n; ++s) {
        const Tensor o = softmax_attention_step(cache, row(q, s), row(k, s), row(v, s));
        CHECK(max_abs_diff(o, row(ref, s)) < 1e-12);
        CHECK(cache.length() == s + 1);
        CHECK(cache.element_count() == static_cast<long>(2) * d * (s + 1));
    }
}

TEST_CASE("attention gradients match finite differences") {
    Rng rng(9);
    const int n = 5, d = 3;
    Tensor q = Tensor::randn({n, d}, rng, 0.5, DType::f64, true);
    Tensor k = Tensor::randn({n, d}, rng, 0.5, DType::f64, true);
    Tensor v = Tensor::randn({n, d}, rng, 0.5, DType::f64, true);
    const Tensor loss = sum(square(softmax_attention_parallel(q, k, v, true)));
    backward(loss);
    auto check = [&](Tensor& leaf) {
        auto f = [&](const Tensor& probe) {
            std::copy(probe.data().begin(), probe.data().end(), leaf.mutable_data().begin());
            return sum(square(softmax_attention_parallel(q, k, v, true))).item();
        };
        const Tensor snap = Tensor::from_data(leaf.shape(), leaf.data());
        const auto fd = finite_diff_grad(f, snap);
        std::copy(snap.data().begin(), snap.data().end(), leaf.mutable_data().begin());
        CHECK(max_rel_err(leaf.grad(), fd, 1e-4) < 1e-4);
    };
    check(q);
    check(k);
    check(v);
}

TEST_CASE("shape errors") {
    CHECK_THROWS_AS(softmax_attention_parallel(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}),
                                               Tensor::zeros({2, 4}), true),
                    std::runtime_error);
    KvCache cache;
    CHECK_THROWS_AS(softmax_attention_step(cache, Tensor::zeros({2}), Tensor::zeros({3}),
                                           Tensor::zeros({2})),
                    std::runtime_error);
}

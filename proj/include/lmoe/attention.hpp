#pragma once

// Softmax attention baseline: parallel (training) form and incremental
// decode form with a growing KV cache. The cache's linear growth is the
// memory cost the LSM kernels avoid; bench reports contrast the two.

#include <vector>

#include "lmoe/lsm.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

// O = softmax(Q K^T / sqrt(d)) V. With causal=true, position i attends to
// j <= i only. row_offset shifts the causal frontier: local query row i
// behaves as global row (row_offset + i) against the given keys, which is
// what a sequence-parallel rank with a gathered global K/V needs.
inline Tensor softmax_attention_parallel(const Tensor& q_mat, const Tensor& k_mat,
                                         const Tensor& v_mat, bool causal,
                                         int row_offset = 0) {
    if (q_mat.shape().size() != 2 || q_mat.shape()[0] < 1)
        throw std::runtime_error("softmax_attention_parallel: need N >= 1 rows");
    if (q_mat.shape()[1] != k_mat.shape()[1] || k_mat.shape()[0] != v_mat.shape()[0])
        detail::shape_error("softmax_attention_parallel", q_mat.shape(), k_mat.shape());
    const int nq = q_mat.shape()[0];
    const int nk = k_mat.shape()[0];
    const int d = q_mat.shape()[1];
    Tensor scores = scale(matmul(q_mat, transpose(k_mat)), 1.0 / std::sqrt(double(d)));
    Tensor mask;
    if (causal) {
        std::vector<double> m(static_cast<std::size_t>(nq) * nk, 0.0);
        for (int i = 0; i < nq; ++i)
            for (int j = 0; j < nk && j <= i + row_offset; ++j)
                m[static_cast<std::size_t>(i) * nk + j] = 1.0;
        mask = Tensor::from_data({nq, nk}, std::move(m), q_mat.dtype());
    }
    return matmul(softmax_rows(scores, mask), v_mat);
}

// Growing key/value store for incremental decode.
struct KvCache {
    std::vector<std::vector<double>> keys;
    std::vector<std::vector<double>> values;

    int length() const { return static_cast<int>(keys.size()); }
    long element_count() const {
        long n = 0;
        for (const auto& k : keys) n += static_cast<long>(k.size());
        for (const auto& v : values) n += static_cast<long>(v.size());
        return n;
    }
};

// One decode step: appends (k_s, v_s), returns o_s via a max-subtracted
// softmax over all cached positions. Plain value math, no tape.
inline Tensor softmax_attention_step(KvCache& cache, const Tensor& q_s, const Tensor& k_s,
                                     const Tensor& v_s) {
    if (q_s.shape().size() != 1 || k_s.shape() != q_s.shape())
        detail::shape_error("softmax_attention_step", q_s.shape(), k_s.shape());
    cache.keys.push_back(k_s.data());
    cache.values.push_back(v_s.data());
    const int s = cache.length();
    const int d = q_s.cols();
    const int dv = static_cast<int>(cache.values[0].size());
    const double inv = 1.0 / std::sqrt(double(d));
    std::vector<double> scores(s);
    double mx = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < s; ++i) {
        double acc = 0.0;
        for (int j = 0; j < d; ++j) acc += q_s.data()[j] * cache.keys[i][j];
        scores[i] = acc * inv;
        mx = std::max(mx, scores[i]);
    }
    double z = 0.0;
    for (int i = 0; i < s; ++i) {
        scores[i] = std::exp(scores[i] - mx);
        z += scores[i];
    }
    std::vector<double> o(dv, 0.0);
    for (int i = 0; i < s; ++i) {
        const double w = scores[i] / z;
        for (int j = 0; j < dv; ++j) o[j] += w * cache.values[i][j];
    }
    return Tensor::from_data({dv}, std::move(o), q_s.dtype());
}

}  // namespace lmoe

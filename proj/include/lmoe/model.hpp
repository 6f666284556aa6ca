#pragma once

// Model assembly: pure and hybrid stacks built from a layer-pattern string
// ("L" = linear-sequence-modeling block, "N" = normal attention block), each
// block being pre-norm mixer + residual, pre-norm MoE + residual. Handles
// token embedding, the LM head, next-token loss, variable-length sequence
// packing, and a versioned binary checkpoint container.

#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "lmoe/attention.hpp"
#include "lmoe/lsm.hpp"
#include "lmoe/moe.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

struct ModelConfig {
    int hidden = 64;
    int ffn_dim = 56;
    int num_heads = 4;
    int num_layers = 2;
    int num_experts = 4;
    int num_active = 2;
    int vocab_size = 260;  // byte-level: 256 bytes + specials
    LsmInstance instance = LsmInstance::BLA;
    std::string pattern = "LL";
    int max_seq_len = 256;  // learned positional table length, per document
    double norm_eps = 1e-6;
    double aux_loss_weight = 0.01;
    DType dtype = DType::f64;
    int chunk_size = 16;

    void validate() const {
        if (pattern.empty()) throw std::runtime_error("ModelConfig: empty layer pattern");
        if (static_cast<int>(pattern.size()) != num_layers)
            throw std::runtime_error("ModelConfig: pattern length must equal num_layers");
        for (char c : pattern)
            if (c != 'L' && c != 'N')
                throw std::runtime_error(std::string("ModelConfig: invalid pattern char '") +
                                         c + "' (want L or N)");
        if (hidden % num_heads != 0)
            throw std::runtime_error("ModelConfig: hidden must be divisible by num_heads");
        if (vocab_size < 2 || hidden < 1 || ffn_dim < 1 || num_layers < 1 || max_seq_len < 1)
            throw std::runtime_error("ModelConfig: nonpositive dimension");
        MoeConfig{num_experts, num_active, hidden, ffn_dim, aux_loss_weight}.validate();
    }

    int head_dim() const { return hidden / num_heads; }

    // Table-shape preset mirroring the A0.3B family column ratios at 1/8
    // scale (hidden 128, ffn 112, 8 heads, 12 layers, 64 experts / 8 active).
    static ModelConfig preset(const std::string& name) {
        ModelConfig c;
        if (name == "A0.3B-toy") {
            c.hidden = 128;
            c.ffn_dim = 112;
            c.num_heads = 8;
            c.num_layers = 12;
            c.num_experts = 64;
            c.num_active = 8;
            c.pattern = std::string(12, 'L');
        } else if (name == "tiny") {
            c.hidden = 32;
            c.ffn_dim = 32;
            c.num_heads = 2;
            c.num_layers = 2;
            c.num_experts = 4;
            c.num_active = 2;
            c.vocab_size = 64;
            c.pattern = "LL";
        } else {
            throw std::runtime_error("unknown model preset: " + name);
        }
        return c;
    }
};

// One flat token stream with ascending document boundaries. boundaries[0]
// is 0 and the last entry is the total length; labels are next-token ids
// with -1 at unsupervised positions.
struct PackedBatch {
    std::vector<int> tokens;
    std::vector<int> boundaries;
    std::vector<int> labels;

    int total() const { return static_cast<int>(tokens.size()); }
    int num_docs() const { return static_cast<int>(boundaries.size()) - 1; }

    void validate() const {
        if (boundaries.size() < 2 || boundaries.front() != 0 ||
            boundaries.back() != total())
            throw std::runtime_error("PackedBatch: boundaries must run from 0 to total length");
        for (std::size_t i = 1; i < boundaries.size(); ++i)
            if (boundaries[i] <= boundaries[i - 1])
                throw std::runtime_error("PackedBatch: boundaries must be strictly ascending");
        if (labels.size() != tokens.size())
            throw std::runtime_error("PackedBatch: labels/tokens length mismatch");
    }
};

// Concatenates documents in order; boundaries are the prefix sums of the
// document lengths. Labels are next-token within each document.
inline PackedBatch pack_sequences(const std::vector<std::vector<int>>& docs) {
    PackedBatch b;
    b.boundaries.push_back(0);
    for (const auto& doc : docs) {
        if (doc.empty()) throw std::runtime_error("pack_sequences: empty document");
        for (std::size_t i = 0; i < doc.size(); ++i) {
            b.tokens.push_back(doc[i]);
            b.labels.push_back(i + 1 < doc.size() ? doc[i + 1] : -1);
        }
        b.boundaries.push_back(static_cast<int>(b.tokens.size()));
    }
    b.validate();
    return b;
}

// ---------------------------------------------------------------------------
// Token mixers

// Multi-head LSM mixer. Gate pre-activations are learned projections of the
// input; heads are independent memory states over hidden/num_heads slices.
struct LsmMixer {
    int heads = 1;
    int chunk_size = 16;
    Tensor wq, wk, wv, wo;                  // (hidden, hidden)
    Tensor w_gate_a, w_gate_b;              // per-instance, see gates_for_head
    Tensor w_alpha, w_beta;                 // GFW/GateLoop
    std::vector<LsmSpec> head_specs;        // one per head (own static params)

    static LsmMixer init(const ModelConfig& cfg, Rng& rng) {
        LsmMixer m;
        m.heads = cfg.num_heads;
        m.chunk_size = cfg.chunk_size;
        const int h = cfg.hidden;
        const double s = 1.0 / std::sqrt(double(h));
        const DType dt = cfg.dtype;
        m.wq = Tensor::randn({h, h}, rng, s, dt, true);
        m.wk = Tensor::randn({h, h}, rng, s, dt, true);
        m.wv = Tensor::randn({h, h}, rng, s, dt, true);
        m.wo = Tensor::randn({h, h}, rng, s, dt, true);
        for (int i = 0; i < cfg.num_heads; ++i) {
            LsmSpec spec = LsmSpec::make(cfg.instance, cfg.head_dim(), cfg.head_dim(), &rng,
                                         cfg.dtype);
            for (Tensor* t : {&spec.s4_delta_raw, &spec.s4_b, &spec.s4_A_raw,
                              &spec.mamba_A_raw, &spec.mamba2_a_raw})
                if (t->defined()) t->set_requires_grad(true);
            m.head_specs.push_back(std::move(spec));
        }
        // gate projections
        switch (cfg.instance) {
            case LsmInstance::GLA:
            case LsmInstance::HGRN2:
            case LsmInstance::RWKV6:
            case LsmInstance::Mamba:
                m.w_gate_a = Tensor::randn({h, h}, rng, s, dt, true);
                break;
            case LsmInstance::RWKV7:
                m.w_gate_a = Tensor::randn({h, h}, rng, s, dt, true);
                m.w_gate_b = Tensor::randn({h, m.heads}, rng, s, dt, true);
                break;
            case LsmInstance::DeltaNet:
            case LsmInstance::GatedDeltaNet:
            case LsmInstance::Titans:
                m.w_gate_a = Tensor::randn({h, m.heads}, rng, s, dt, true);
                m.w_gate_b = Tensor::randn({h, m.heads}, rng, s, dt, true);
                break;
            case LsmInstance::TTT:
            case LsmInstance::Mamba2:
                m.w_gate_b = Tensor::randn({h, m.heads}, rng, s, dt, true);
                break;
            case LsmInstance::GFW:
            case LsmInstance::GateLoop:
                m.w_alpha = Tensor::randn({h, h}, rng, s, dt, true);
                m.w_beta = Tensor::randn({h, h}, rng, s, dt, true);
                break;
            default: break;
        }
        return m;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p;
        for (const Tensor* t : {&wq, &wk, &wv, &wo, &w_gate_a, &w_gate_b, &w_alpha, &w_beta})
            if (t->defined()) p.push_back(*t);
        for (const auto& spec : head_specs)
            for (const auto& t : spec.static_params()) p.push_back(t);
        return p;
    }

    LsmGates gates_for_head(const Tensor& x, int head, int n) const {
        const int d = head_specs[head].d_k;
        LsmGates g;
        const LsmInstance inst = head_specs[head].instance;
        switch (inst) {
            case LsmInstance::GLA:
            case LsmInstance::HGRN2:
            case LsmInstance::RWKV6:
            case LsmInstance::Mamba:
                g.a_pre = slice_cols(matmul(x, w_gate_a), head * d, (head + 1) * d);
                break;
            case LsmInstance::RWKV7:
                g.a_pre = slice_cols(matmul(x, w_gate_a), head * d, (head + 1) * d);
                g.b_pre = reshape(slice_cols(matmul(x, w_gate_b), head, head + 1), {n});
                break;
            case LsmInstance::DeltaNet:
            case LsmInstance::GatedDeltaNet:
            case LsmInstance::Titans:
                g.a_pre = reshape(slice_cols(matmul(x, w_gate_a), head, head + 1), {n});
                g.b_pre = reshape(slice_cols(matmul(x, w_gate_b), head, head + 1), {n});
                break;
            case LsmInstance::TTT:
            case LsmInstance::Mamba2:
                g.b_pre = reshape(slice_cols(matmul(x, w_gate_b), head, head + 1), {n});
                break;
            case LsmInstance::GFW:
            case LsmInstance::GateLoop:
                g.alpha_pre = slice_cols(matmul(x, w_alpha), head * d, (head + 1) * d);
                g.beta_pre = slice_cols(matmul(x, w_beta), head * d, (head + 1) * d);
                break;
            default: break;
        }
        return g;
    }

    // One document (state starts fresh).
    Tensor forward(const Tensor& x) const {
        const int n = x.shape()[0];
        const Tensor q = matmul(x, wq);
        const Tensor k = matmul(x, wk);
        const Tensor v = matmul(x, wv);
        std::vector<Tensor> head_outs;
        for (int h = 0; h < heads; ++h) {
            const int d = head_specs[h].d_k;
            head_outs.push_back(lsm_forward_chunked(
                slice_cols(q, h * d, (h + 1) * d), slice_cols(k, h * d, (h + 1) * d),
                slice_cols(v, h * d, (h + 1) * d), gates_for_head(x, h, n), head_specs[h],
                chunk_size));
        }
        return matmul(concat_cols(head_outs), wo);
    }
};

// Multi-head causal softmax attention mixer.
struct AttentionMixer {
    int heads = 1;
    int head_dim = 0;
    Tensor wq, wk, wv, wo;

    static AttentionMixer init(const ModelConfig& cfg, Rng& rng) {
        AttentionMixer m;
        m.heads = cfg.num_heads;
        m.head_dim = cfg.head_dim();
        const int h = cfg.hidden;
        const double s = 1.0 / std::sqrt(double(h));
        m.wq = Tensor::randn({h, h}, rng, s, cfg.dtype, true);
        m.wk = Tensor::randn({h, h}, rng, s, cfg.dtype, true);
        m.wv = Tensor::randn({h, h}, rng, s, cfg.dtype, true);
        m.wo = Tensor::randn({h, h}, rng, s, cfg.dtype, true);
        return m;
    }

    std::vector<Tensor> params() const { return {wq, wk, wv, wo}; }

    Tensor forward(const Tensor& x) const {
        const Tensor q = matmul(x, wq);
        const Tensor k = matmul(x, wk);
        const Tensor v = matmul(x, wv);
        std::vector<Tensor> head_outs;
        for (int h = 0; h < heads; ++h) {
            const int c0 = h * head_dim, c1 = (h + 1) * head_dim;
            head_outs.push_back(softmax_attention_parallel(
                slice_cols(q, c0, c1), slice_cols(k, c0, c1), slice_cols(v, c0, c1), true));
        }
        return matmul(concat_cols(head_outs), wo);
    }
};

struct Block {
    char kind = 'L';  // 'L' or 'N'
    Tensor norm_mixer;  // RMS-norm weights
    Tensor norm_moe;
    LsmMixer lsm;
    AttentionMixer attn;
    MoeLayer moe;

    Tensor mixer_forward(const Tensor& x) const {
        return kind == 'L' ? lsm.forward(x) : attn.forward(x);
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> p{norm_mixer, norm_moe};
        const auto mp = kind == 'L' ? lsm.params() : attn.params();
        p.insert(p.end(), mp.begin(), mp.end());
        const auto ep = moe.params();
        p.insert(p.end(), ep.begin(), ep.end());
        return p;
    }
};

struct Model {
    ModelConfig config;
    Tensor embedding;      // (vocab, hidden)
    Tensor pos_embedding;  // (max_seq_len, hidden), document-relative positions
    std::vector<Block> blocks;
    Tensor final_norm;
    Tensor lm_head;     // (hidden, vocab)

    std::vector<Tensor> params() const {
        std::vector<Tensor> p{embedding, pos_embedding};
        for (const auto& b : blocks) {
            const auto bp = b.params();
            p.insert(p.end(), bp.begin(), bp.end());
        }
        p.push_back(final_norm);
        p.push_back(lm_head);
        return p;
    }

    long param_count() const {
        long n = 0;
        for (const auto& p : params()) n += static_cast<long>(p.size());
        return n;
    }

    void zero_grad() const {
        for (auto p : params()) p.zero_grad();
    }
};

inline Model build_model(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Model m;
    m.config = cfg;
    m.embedding = Tensor::randn({cfg.vocab_size, cfg.hidden}, rng, 0.02, cfg.dtype, true);
    m.pos_embedding = Tensor::randn({cfg.max_seq_len, cfg.hidden}, rng, 0.02, cfg.dtype, true);
    for (char kind : cfg.pattern) {
        Block b;
        b.kind = kind;
        b.norm_mixer = Tensor::full({cfg.hidden}, 1.0, cfg.dtype);
        b.norm_mixer.set_requires_grad(true);
        b.norm_moe = Tensor::full({cfg.hidden}, 1.0, cfg.dtype);
        b.norm_moe.set_requires_grad(true);
        if (kind == 'L')
            b.lsm = LsmMixer::init(cfg, rng);
        else
            b.attn = AttentionMixer::init(cfg, rng);
        b.moe = MoeLayer::init(
            MoeConfig{cfg.num_experts, cfg.num_active, cfg.hidden, cfg.ffn_dim,
                      cfg.aux_loss_weight},
            rng, cfg.dtype);
        m.blocks.push_back(std::move(b));
    }
    m.final_norm = Tensor::full({cfg.hidden}, 1.0, cfg.dtype);
    m.final_norm.set_requires_grad(true);
    m.lm_head = Tensor::randn({cfg.hidden, cfg.vocab_size}, rng,
                              1.0 / std::sqrt(double(cfg.hidden)), cfg.dtype, true);
    return m;
}

// Forward over a packed batch. Mixer state and the attention mask are reset
// at every document boundary: each mixer runs per document slice, so no
// token attends to or carries state from another document.
struct ForwardOut {
    Tensor logits;   // (total, vocab)
    Tensor aux_loss;  // scalar, mean over MoE layers
};

inline ForwardOut model_forward(const Model& m, const PackedBatch& batch) {
    batch.validate();
    for (int id : batch.tokens)
        if (id < 0 || id >= m.config.vocab_size)
            throw std::runtime_error("model_forward: token id out of vocabulary range");
    std::vector<int> positions(batch.tokens.size());
    for (int d = 0; d < batch.num_docs(); ++d) {
        const int len = batch.boundaries[d + 1] - batch.boundaries[d];
        if (len > m.config.max_seq_len)
            throw std::runtime_error("model_forward: document longer than max_seq_len");
        for (int i = 0; i < len; ++i) positions[batch.boundaries[d] + i] = i;
    }
    Tensor x = add(gather_rows(m.embedding, batch.tokens),
                   gather_rows(m.pos_embedding, positions));
    Tensor aux = Tensor::zeros({1}, x.dtype());
    for (const auto& b : m.blocks) {
        const Tensor h = rms_norm(x, b.norm_mixer, m.config.norm_eps);
        std::vector<Tensor> mixed;
        for (int d = 0; d < batch.num_docs(); ++d)
            mixed.push_back(
                b.mixer_forward(slice_rows(h, batch.boundaries[d], batch.boundaries[d + 1])));
        x = add(x, concat_rows(mixed));
        const Tensor h2 = rms_norm(x, b.norm_moe, m.config.norm_eps);
        auto [y, lb] = b.moe.forward(h2);
        x = add(x, y);
        aux = add(aux, lb);
    }
    ForwardOut out;
    out.aux_loss = scale(aux, 1.0 / static_cast<double>(m.blocks.size()));
    out.logits = matmul(rms_norm(x, m.final_norm, m.config.norm_eps), m.lm_head);
    return out;
}

// Mean next-token cross entropy over labelled positions plus the weighted
// MoE balance loss.
inline Tensor lm_loss(const ForwardOut& out, const std::vector<int>& labels,
                      double aux_weight) {
    return add(cross_entropy_mean(out.logits, labels), scale(out.aux_loss, aux_weight));
}

// ---------------------------------------------------------------------------
// Checkpoint container: magic + version, config block, then named tensors.

namespace ckpt {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

inline std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    return v;
}

inline void write_string(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string read_string(std::istream& is) {
    const std::uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace ckpt

inline std::vector<std::pair<std::string, Tensor>> named_params(const Model& m) {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("embedding", m.embedding);
    out.emplace_back("pos_embedding", m.pos_embedding);
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const auto& b = m.blocks[i];
        const std::string pre = "block" + std::to_string(i) + ".";
        out.emplace_back(pre + "norm_mixer", b.norm_mixer);
        out.emplace_back(pre + "norm_moe", b.norm_moe);
        if (b.kind == 'L') {
            const auto& l = b.lsm;
            out.emplace_back(pre + "lsm.wq", l.wq);
            out.emplace_back(pre + "lsm.wk", l.wk);
            out.emplace_back(pre + "lsm.wv", l.wv);
            out.emplace_back(pre + "lsm.wo", l.wo);
            if (l.w_gate_a.defined()) out.emplace_back(pre + "lsm.w_gate_a", l.w_gate_a);
            if (l.w_gate_b.defined()) out.emplace_back(pre + "lsm.w_gate_b", l.w_gate_b);
            if (l.w_alpha.defined()) out.emplace_back(pre + "lsm.w_alpha", l.w_alpha);
            if (l.w_beta.defined()) out.emplace_back(pre + "lsm.w_beta", l.w_beta);
            for (std::size_t h = 0; h < l.head_specs.size(); ++h) {
                const auto& s = l.head_specs[h];
                const std::string hp = pre + "lsm.head" + std::to_string(h) + ".";
                if (s.s4_delta_raw.defined()) out.emplace_back(hp + "s4_delta", s.s4_delta_raw);
                if (s.s4_b.defined()) out.emplace_back(hp + "s4_b", s.s4_b);
                if (s.s4_A_raw.defined()) out.emplace_back(hp + "s4_A", s.s4_A_raw);
                if (s.mamba_A_raw.defined()) out.emplace_back(hp + "mamba_A", s.mamba_A_raw);
                if (s.mamba2_a_raw.defined()) out.emplace_back(hp + "mamba2_a", s.mamba2_a_raw);
            }
        } else {
            out.emplace_back(pre + "attn.wq", b.attn.wq);
            out.emplace_back(pre + "attn.wk", b.attn.wk);
            out.emplace_back(pre + "attn.wv", b.attn.wv);
            out.emplace_back(pre + "attn.wo", b.attn.wo);
        }
        out.emplace_back(pre + "moe.router", b.moe.router);
        for (std::size_t e = 0; e < b.moe.experts.size(); ++e) {
            const std::string ep = pre + "moe.expert" + std::to_string(e) + ".";
            out.emplace_back(ep + "w_gate", b.moe.experts[e].w_gate);
            out.emplace_back(ep + "w_up", b.moe.experts[e].w_up);
            out.emplace_back(ep + "w_down", b.moe.experts[e].w_down);
        }
    }
    out.emplace_back("final_norm", m.final_norm);
    out.emplace_back("lm_head", m.lm_head);
    return out;
}

inline std::string config_to_text(const ModelConfig& c) {
    std::ostringstream os;
    os << "hidden=" << c.hidden << "\nffn_dim=" << c.ffn_dim << "\nnum_heads=" << c.num_heads
       << "\nnum_layers=" << c.num_layers << "\nnum_experts=" << c.num_experts
       << "\nnum_active=" << c.num_active << "\nvocab_size=" << c.vocab_size
       << "\ninstance=" << instance_name(c.instance) << "\npattern=" << c.pattern
       << "\nnorm_eps=" << c.norm_eps << "\naux_loss_weight=" << c.aux_loss_weight
       << "\ndtype=" << (c.dtype == DType::f32 ? "f32" : "f64")
       << "\nchunk_size=" << c.chunk_size << "\n";
    return os.str();
}

inline void save_checkpoint(const std::string& path, const Model& m, long step = 0) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("save_checkpoint: cannot open " + path);
    os.write("LMOECKPT", 8);
    ckpt::write_u32(os, 1);  // version
    ckpt::write_u32(os, static_cast<std::uint32_t>(step));
    ckpt::write_string(os, config_to_text(m.config));
    const auto named = named_params(m);
    ckpt::write_u32(os, static_cast<std::uint32_t>(named.size()));
    for (const auto& [name, t] : named) {
        ckpt::write_string(os, name);
        ckpt::write_u32(os, static_cast<std::uint32_t>(t.shape().size()));
        for (int e : t.shape()) ckpt::write_u32(os, static_cast<std::uint32_t>(e));
        os.write(reinterpret_cast<const char*>(t.data().data()),
                 static_cast<std::streamsize>(t.size() * sizeof(double)));
    }
    if (!os) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

// Loads weights into an already-built model of the same architecture.
inline long load_checkpoint(const std::string& path, Model& m) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::string(magic, 8) != "LMOECKPT")
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    const std::uint32_t version = ckpt::read_u32(is);
    if (version != 1) throw std::runtime_error("load_checkpoint: unsupported version");
    const long step = ckpt::read_u32(is);
    (void)ckpt::read_string(is);  // config text, informational
    const std::uint32_t count = ckpt::read_u32(is);
    auto named = named_params(m);
    if (count != named.size())
        throw std::runtime_error("load_checkpoint: tensor count mismatch");
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = ckpt::read_string(is);
        if (name != named[i].first)
            throw std::runtime_error("load_checkpoint: tensor name mismatch at " + name);
        const std::uint32_t ndim = ckpt::read_u32(is);
        std::vector<int> shape(ndim);
        for (auto& e : shape) e = static_cast<int>(ckpt::read_u32(is));
        Tensor& t = named[i].second;
        if (shape != t.shape())
            throw std::runtime_error("load_checkpoint: shape mismatch for " + name);
        is.read(reinterpret_cast<char*>(t.mutable_data().data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        t.round_if_f32();
    }
    if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return step;
}

}  // namespace lmoe

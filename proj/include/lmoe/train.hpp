#pragma once

// Training utilities: Adam with a cosine learning-rate schedule, the MQAR
// (multi-query associative recall) synthetic task, line-delimited metrics
// records, and the sectioned key-value run-config format.

#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "lmoe/model.hpp"
#include "lmoe/tensor.hpp"

namespace lmoe {

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
};

class Adam {
public:
    Adam(std::vector<Tensor> params, AdamConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].size(), 0.0);
            v_[i].assign(params_[i].size(), 0.0);
        }
    }

    // One update with the given learning rate. Parameters whose grad buffer
    // was not populated this step (e.g. unrouted experts) are treated as
    // zero-gradient: moments decay, weights move only by their momentum.
    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            const bool has = p.has_grad();
            auto& m = m_[i];
            auto& v = v_[i];
            auto& w = p.mutable_data();
            for (std::size_t j = 0; j < w.size(); ++j) {
                const double g = has ? p.grad()[j] : 0.0;
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                const double mh = m[j] / bc1;
                const double vh = v[j] / bc2;
                w[j] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
            }
            p.round_if_f32();
            p.zero_grad();
        }
    }

    long steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

// Cosine decay from lr_max to lr_min over total_steps.
inline double cosine_lr(long step, long total_steps, double lr_max, double lr_min) {
    if (total_steps <= 1) return lr_max;
    const double frac = static_cast<double>(std::min(step, total_steps - 1)) /
                        static_cast<double>(total_steps - 1);
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(3.14159265358979323846 * frac));
}

// ---------------------------------------------------------------------------
// MQAR: sequences of key-value pairs followed by queried keys; the label at
// each query position is the value bound to that key.

struct MqarConfig {
    int vocab = 64;       // token ids split evenly into key and value spaces
    int num_pairs = 4;
    int num_queries = 2;
    int num_sequences = 1;
    std::uint64_t seed = 1;

    int key_base() const { return 1; }               // 0 reserved as separator
    int key_space() const { return (vocab - 1) / 2; }
    int value_base() const { return 1 + key_space(); }
    int value_space() const { return vocab - value_base(); }

    void validate() const {
        if (num_pairs < 1 || num_queries < 1 || num_sequences < 1)
            throw std::runtime_error("MqarConfig: nonpositive counts");
        if (key_space() < num_pairs || value_space() < 1)
            throw std::runtime_error("MqarConfig: infeasible vocab for requested pairs");
    }
};

struct MqarSample {
    std::vector<int> tokens;
    std::vector<int> labels;  // -1 except at query-key positions
};

struct MqarDataset {
    MqarConfig config;
    std::vector<MqarSample> samples;
};

inline MqarDataset gen_mqar(const MqarConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    MqarDataset ds;
    ds.config = cfg;
    for (int s = 0; s < cfg.num_sequences; ++s) {
        // distinct keys per sequence via partial Fisher-Yates
        std::vector<int> keys(cfg.key_space());
        for (int i = 0; i < cfg.key_space(); ++i) keys[i] = cfg.key_base() + i;
        for (int i = 0; i < cfg.num_pairs; ++i) {
            const int j = i + static_cast<int>(rng.randint(cfg.key_space() - i));
            std::swap(keys[i], keys[j]);
        }
        MqarSample smp;
        std::vector<int> bound(cfg.num_pairs);
        for (int i = 0; i < cfg.num_pairs; ++i) {
            bound[i] = cfg.value_base() + static_cast<int>(rng.randint(cfg.value_space()));
            smp.tokens.push_back(keys[i]);
            smp.labels.push_back(bound[i]);  // value is predictable right after its key
            smp.tokens.push_back(bound[i]);
            smp.labels.push_back(-1);
        }
        smp.tokens.push_back(0);  // separator between pairs and queries
        smp.labels.push_back(-1);
        for (int q = 0; q < cfg.num_queries; ++q) {
            const int pick = static_cast<int>(rng.randint(cfg.num_pairs));
            smp.tokens.push_back(keys[pick]);
            smp.labels.push_back(bound[pick]);
        }
        ds.samples.push_back(std::move(smp));
    }
    return ds;
}

inline void save_mqar(const std::string& path, const MqarDataset& ds) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("save_mqar: cannot open " + path);
    nlohmann::json header{{"vocab", ds.config.vocab},
                          {"num_pairs", ds.config.num_pairs},
                          {"num_queries", ds.config.num_queries},
                          {"num_sequences", ds.config.num_sequences},
                          {"seed", ds.config.seed}};
    os << header.dump() << "\n";
    for (const auto& s : ds.samples)
        os << nlohmann::json{{"tokens", s.tokens}, {"labels", s.labels}}.dump() << "\n";
}

inline MqarDataset load_mqar(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_mqar: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("load_mqar: empty file " + path);
    const nlohmann::json header = nlohmann::json::parse(line);
    MqarDataset ds;
    ds.config.vocab = header.at("vocab");
    ds.config.num_pairs = header.at("num_pairs");
    ds.config.num_queries = header.at("num_queries");
    ds.config.num_sequences = header.at("num_sequences");
    ds.config.seed = header.at("seed");
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const nlohmann::json j = nlohmann::json::parse(line);
        MqarSample s;
        s.tokens = j.at("tokens").get<std::vector<int>>();
        s.labels = j.at("labels").get<std::vector<int>>();
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

// Fraction of query positions (labels after the separator) predicted exactly.
inline double mqar_query_accuracy(const Model& m, const std::vector<MqarSample>& samples) {
    NoGradGuard ng;
    long correct = 0, total = 0;
    for (const auto& s : samples) {
        PackedBatch b;
        b.tokens = s.tokens;
        b.labels = s.labels;
        b.boundaries = {0, static_cast<int>(s.tokens.size())};
        const ForwardOut out = model_forward(m, b);
        const int sep = static_cast<int>(
            std::find(s.tokens.begin(), s.tokens.end(), 0) - s.tokens.begin());
        for (std::size_t i = sep; i < s.labels.size(); ++i) {
            if (s.labels[i] < 0) continue;
            int best = 0;
            for (int c = 1; c < out.logits.shape()[1]; ++c)
                if (out.logits.at(static_cast<int>(i), c) >
                    out.logits.at(static_cast<int>(i), best))
                    best = c;
            correct += (best == s.labels[i]);
            ++total;
        }
    }
    return total ? static_cast<double>(correct) / total : 0.0;
}

// ---------------------------------------------------------------------------
// Metrics records (line-delimited JSON; parse(emit(x)) == x)

struct MetricsRecord {
    long step = 0;
    double loss = 0.0;
    double aux_loss = 0.0;
    double tokens_per_sec = 0.0;
    long state_elements = 0;
    long comm_bytes = 0;
};

inline std::string emit_metrics(const MetricsRecord& r) {
    return nlohmann::json{{"step", r.step},
                          {"loss", r.loss},
                          {"aux_loss", r.aux_loss},
                          {"tokens_per_sec", r.tokens_per_sec},
                          {"state_elements", r.state_elements},
                          {"comm_bytes", r.comm_bytes}}
        .dump();
}

inline MetricsRecord parse_metrics(const std::string& line) {
    const nlohmann::json j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.step = j.at("step");
    r.loss = j.at("loss");
    r.aux_loss = j.at("aux_loss");
    r.tokens_per_sec = j.at("tokens_per_sec");
    r.state_elements = j.at("state_elements");
    r.comm_bytes = j.at("comm_bytes");
    return r;
}

// ---------------------------------------------------------------------------
// Run configuration: flat key=value lines under [section] headers. Unknown
// sections or keys are errors; '#' starts a comment.

struct RunConfig {
    // [model]
    std::string preset;          // optional; explicit fields below override
    std::string instance = "bla";
    std::string pattern = "LL";
    int hidden = 32;
    int ffn_dim = 32;
    int num_heads = 2;
    int num_layers = 2;
    int num_experts = 4;
    int num_active = 2;
    int vocab_size = 64;
    int chunk_size = 16;
    int max_seq_len = 256;
    std::string dtype = "f64";
    // [train]
    std::uint64_t seed = 1;
    long steps = 100;
    int batch_size = 4;
    long log_interval = 10;
    double lr_max = 1e-2;
    double lr_min = 1e-3;
    int sp_size = 1;
    std::string out_dir = ".";
    std::string task = "mqar";
    // [mqar]
    int mqar_pairs = 4;
    int mqar_queries = 2;
    // [bench]
    std::vector<int> bench_lengths = {256, 512, 1024, 2048};
    long bench_token_budget = 4096;

    ModelConfig model_config() const {
        ModelConfig c = preset.empty() ? ModelConfig() : ModelConfig::preset(preset);
        if (preset.empty()) {
            c.hidden = hidden;
            c.ffn_dim = ffn_dim;
            c.num_heads = num_heads;
            c.num_layers = num_layers;
            c.num_experts = num_experts;
            c.num_active = num_active;
            c.vocab_size = vocab_size;
            c.pattern = pattern;
            c.chunk_size = chunk_size;
            c.max_seq_len = max_seq_len;
        }
        const auto inst = instance_from_name(instance);
        if (!inst) throw std::runtime_error("RunConfig: unknown instance '" + instance + "'");
        c.instance = *inst;
        if (dtype == "f64")
            c.dtype = DType::f64;
        else if (dtype == "f32")
            c.dtype = DType::f32;
        else
            throw std::runtime_error("RunConfig: dtype must be f32 or f64");
        c.validate();
        return c;
    }
};

namespace detail_cfg {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace detail_cfg

inline RunConfig parse_run_config(std::istream& is) {
    RunConfig c;
    std::string section, line;
    int lineno = 0;
    const std::set<std::string> sections{"model", "train", "mqar", "bench"};
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = detail_cfg::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[' && line.back() == ']') {
            section = line.substr(1, line.size() - 2);
            if (!sections.count(section))
                throw std::runtime_error("config line " + std::to_string(lineno) +
                                         ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": expected key=value");
        const std::string key = detail_cfg::trim(line.substr(0, eq));
        const std::string val = detail_cfg::trim(line.substr(eq + 1));
        const std::string sk = section + "." + key;
        if (sk == "model.preset") c.preset = val;
        else if (sk == "model.instance") c.instance = val;
        else if (sk == "model.pattern") c.pattern = val;
        else if (sk == "model.hidden") c.hidden = std::stoi(val);
        else if (sk == "model.ffn_dim") c.ffn_dim = std::stoi(val);
        else if (sk == "model.num_heads") c.num_heads = std::stoi(val);
        else if (sk == "model.num_layers") c.num_layers = std::stoi(val);
        else if (sk == "model.num_experts") c.num_experts = std::stoi(val);
        else if (sk == "model.num_active") c.num_active = std::stoi(val);
        else if (sk == "model.vocab_size") c.vocab_size = std::stoi(val);
        else if (sk == "model.chunk_size") c.chunk_size = std::stoi(val);
        else if (sk == "model.max_seq_len") c.max_seq_len = std::stoi(val);
        else if (sk == "model.dtype") c.dtype = val;
        else if (sk == "train.seed") c.seed = std::stoull(val);
        else if (sk == "train.steps") c.steps = std::stol(val);
        else if (sk == "train.batch_size") c.batch_size = std::stoi(val);
        else if (sk == "train.log_interval") c.log_interval = std::stol(val);
        else if (sk == "train.lr_max") c.lr_max = std::stod(val);
        else if (sk == "train.lr_min") c.lr_min = std::stod(val);
        else if (sk == "train.sp_size") c.sp_size = std::stoi(val);
        else if (sk == "train.out_dir") c.out_dir = val;
        else if (sk == "train.task") c.task = val;
        else if (sk == "mqar.pairs") c.mqar_pairs = std::stoi(val);
        else if (sk == "mqar.queries") c.mqar_queries = std::stoi(val);
        else if (sk == "bench.token_budget") c.bench_token_budget = std::stol(val);
        else if (sk == "bench.lengths") {
            c.bench_lengths.clear();
            std::istringstream ls(val);
            std::string tok;
            while (std::getline(ls, tok, ','))
                c.bench_lengths.push_back(std::stoi(detail_cfg::trim(tok)));
        } else {
            throw std::runtime_error("config line " + std::to_string(lineno) +
                                     ": unknown key '" + sk + "'");
        }
    }
    return c;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config file " + path);
    return parse_run_config(is);
}

// ---------------------------------------------------------------------------
// Training loop (shared by the CLI and the directional tests)

struct TrainResult {
    std::vector<MetricsRecord> metrics;
    double first_loss = 0.0;
    double final_loss = 0.0;
    Model model;
};

inline TrainResult train_mqar(const RunConfig& rc, std::ostream* metrics_out = nullptr) {
    const ModelConfig mc = rc.model_config();
    Rng rng(rc.seed);
    TrainResult res;
    res.model = build_model(mc, rng);
    Adam opt(res.model.params());
    MqarConfig task;
    task.vocab = mc.vocab_size;
    task.num_pairs = rc.mqar_pairs;
    task.num_queries = rc.mqar_queries;
    task.num_sequences = rc.batch_size;
    for (long step = 0; step < rc.steps; ++step) {
        task.seed = rc.seed * 1000003ull + static_cast<std::uint64_t>(step);
        const MqarDataset batch = gen_mqar(task);
        PackedBatch pb;
        pb.boundaries.push_back(0);
        for (const auto& s : batch.samples) {
            pb.tokens.insert(pb.tokens.end(), s.tokens.begin(), s.tokens.end());
            pb.labels.insert(pb.labels.end(), s.labels.begin(), s.labels.end());
            pb.boundaries.push_back(static_cast<int>(pb.tokens.size()));
        }
        const auto t0 = std::chrono::steady_clock::now();
        const ForwardOut out = model_forward(res.model, pb);
        const Tensor loss = lm_loss(out, pb.labels, mc.aux_loss_weight);
        if (!std::isfinite(loss.item()))
            throw std::runtime_error("non-finite loss at step " + std::to_string(step) +
                                     " (instance " + instance_name(mc.instance) + ")");
        backward(loss);
        opt.step(cosine_lr(step, rc.steps, rc.lr_max, rc.lr_min));
        const auto t1 = std::chrono::steady_clock::now();
        if (step == 0) res.first_loss = loss.item();
        res.final_loss = loss.item();
        if (step % rc.log_interval == 0 || step + 1 == rc.steps) {
            MetricsRecord mr;
            mr.step = step;
            mr.loss = loss.item();
            mr.aux_loss = out.aux_loss.item();
            const double secs =
                std::chrono::duration<double>(t1 - t0).count();
            mr.tokens_per_sec = secs > 0 ? pb.total() / secs : 0.0;
            mr.state_elements = static_cast<long>(mc.num_heads) * mc.head_dim() *
                                mc.head_dim();
            mr.comm_bytes = 0;
            res.metrics.push_back(mr);
            if (metrics_out) (*metrics_out) << emit_metrics(mr) << "\n";
        }
    }
    return res;
}

}  // namespace lmoe

// Command-line driver: verification suites, toy training runs, scaling
// benchmarks, and synthetic-task generation.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lmoe/attention.hpp"
#include "lmoe/lsm.hpp"
#include "lmoe/train.hpp"
#include "lmoe/verify.hpp"

namespace {

std::string out_root() {
    const char* env = std::getenv("LMOE_OUT_ROOT");
    return env ? env : ".";
}

std::string join_path(const std::string& root, const std::string& leaf) {
    return (std::filesystem::path(root) / leaf).string();
}

int cmd_verify(const std::vector<std::string>& only, bool inject_fault,
               const std::string& report_path) {
    lmoe::kern::chunk_decay_fault() = inject_fault;
    const auto results = lmoe::run_verify(only);
    lmoe::kern::chunk_decay_fault() = false;
    bool all_pass = true;
    std::ofstream report;
    if (!report_path.empty()) report.open(report_path);
    for (const auto& r : results) {
        const std::string line = std::string(r.passed ? "PASS" : "FAIL") + " " + r.name +
                                 ": " + r.detail;
        std::cout << line << "\n";
        if (report) report << "{\"suite\":\"" << r.name << "\",\"passed\":"
                           << (r.passed ? "true" : "false") << ",\"detail\":\"" << r.detail
                           << "\"}\n";
        all_pass = all_pass && r.passed;
    }
    return all_pass ? 0 : 1;
}

int cmd_train(const std::string& config_path) {
    const lmoe::RunConfig rc = lmoe::load_run_config(config_path);
    const std::string dir = join_path(out_root(), rc.out_dir);
    std::filesystem::create_directories(dir);
    std::ofstream metrics(join_path(dir, "metrics.jsonl"));
    const lmoe::TrainResult res = lmoe::train_mqar(rc, &metrics);
    lmoe::save_checkpoint(join_path(dir, "final.ckpt"), res.model, rc.steps);
    std::ofstream curve(join_path(dir, "loss_curve.txt"));
    for (const auto& mr : res.metrics) curve << mr.step << " " << mr.loss << "\n";
    std::cout << "steps=" << rc.steps << " first_loss=" << res.first_loss
              << " final_loss=" << res.final_loss << "\n";
    return 0;
}

int cmd_bench(const std::string& config_path) {
    const lmoe::RunConfig rc = lmoe::load_run_config(config_path);
    const lmoe::ModelConfig mc = rc.model_config();
    const int d = mc.head_dim();
    lmoe::Rng rng(rc.seed);
    const lmoe::LsmSpec spec = lmoe::LsmSpec::make(mc.instance, d, d, &rng);
    const std::string dir = join_path(out_root(), rc.out_dir);
    std::filesystem::create_directories(dir);
    std::ofstream table(join_path(dir, "bench.txt"));
    std::ofstream lsm_curve(join_path(dir, "lsm_time_per_token.txt"));
    std::ofstream attn_curve(join_path(dir, "attn_time_per_token.txt"));
    table << "# length lsm_us_per_tok attn_us_per_tok lsm_state_elems attn_kv_elems\n";
    lmoe::NoGradGuard ng;
    for (int len : rc.bench_lengths) {
        const int reps = std::max(1L, rc.bench_token_budget / len);
        const lmoe::Tensor q = lmoe::Tensor::randn({len, d}, rng, 0.5);
        const lmoe::Tensor k = lmoe::Tensor::randn({len, d}, rng, 0.5);
        const lmoe::Tensor v = lmoe::Tensor::randn({len, d}, rng, 0.5);
        const lmoe::LsmGates gates = lmoe::LsmGates::random_for(spec, len, rng);

        long lsm_state = 0;
        auto t0 = std::chrono::steady_clock::now();
        for (int r = 0; r < reps; ++r) {
            lmoe::MemoryState st;
            (void)lmoe::lsm_forward_chunked(q, k, v, gates, spec, mc.chunk_size, &st);
            lsm_state = st.element_count();
        }
        auto t1 = std::chrono::steady_clock::now();
        const double lsm_us =
            std::chrono::duration<double, std::micro>(t1 - t0).count() / (reps * len);

        long kv_elems = 0;
        t0 = std::chrono::steady_clock::now();
        for (int r = 0; r < reps; ++r) {
            lmoe::KvCache cache;
            for (int s = 0; s < len; ++s)
                (void)lmoe::softmax_attention_step(cache, lmoe::row(q, s), lmoe::row(k, s),
                                                   lmoe::row(v, s));
            kv_elems = cache.element_count();
        }
        t1 = std::chrono::steady_clock::now();
        const double attn_us =
            std::chrono::duration<double, std::micro>(t1 - t0).count() / (reps * len);

        table << len << " " << lsm_us << " " << attn_us << " " << lsm_state << " "
              << kv_elems << "\n";
        lsm_curve << len << " " << lsm_us << "\n";
        attn_curve << len << " " << attn_us << "\n";
        std::cout << "len=" << len << " lsm_us/tok=" << lsm_us
                  << " attn_us/tok=" << attn_us << " state=" << lsm_state
                  << " kv=" << kv_elems << "\n";
    }
    return 0;
}

int cmd_gen_mqar(std::uint64_t seed, int pairs, int queries, int sequences, int vocab,
                 const std::string& out) {
    lmoe::MqarConfig cfg;
    cfg.seed = seed;
    cfg.num_pairs = pairs;
    cfg.num_queries = queries;
    cfg.num_sequences = sequences;
    cfg.vocab = vocab;
    lmoe::save_mqar(out, lmoe::gen_mqar(cfg));
    std::cout << "wrote " << sequences << " sequences to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"linear sequence modeling + MoE toolkit"};
    app.require_subcommand(1);

    auto* verify = app.add_subcommand("verify", "run verification suites");
    std::vector<std::string> only;
    bool inject_fault = false;
    std::string report_path;
    verify->add_option("--only", only, "run only the named suites");
    verify->add_flag("--inject-fault", inject_fault,
                     "enable the off-by-one chunk-decay fault (must make chunked fail)");
    verify->add_option("--report", report_path, "machine-readable report file");

    auto* train = app.add_subcommand("train", "train a toy model");
    std::string train_cfg;
    train->add_option("--config", train_cfg, "run config file")->required();

    auto* bench = app.add_subcommand("bench", "sequence-length scaling benchmark");
    std::string bench_cfg;
    bench->add_option("--config", bench_cfg, "run config file")->required();

    auto* gen = app.add_subcommand("gen-mqar", "generate an MQAR dataset");
    std::uint64_t seed = 1;
    int pairs = 4, queries = 2, sequences = 64, vocab = 64;
    std::string out = "mqar.jsonl";
    gen->add_option("--seed", seed)->required();
    gen->add_option("--pairs", pairs)->required();
    gen->add_option("--queries", queries)->required();
    gen->add_option("--sequences", sequences);
    gen->add_option("--vocab", vocab);
    gen->add_option("--out", out)->required();

    CLI11_PARSE(app, argc, argv);
    try {
        if (*verify) return cmd_verify(only, inject_fault, report_path);
        if (*train) return cmd_train(train_cfg);
        if (*bench) return cmd_bench(bench_cfg);
        if (*gen) return cmd_gen_mqar(seed, pairs, queries, sequences, vocab, out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}

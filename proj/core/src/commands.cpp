#include "xmatch/commands.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "xmatch/dataset.hpp"
#include "xmatch/gradsuites.hpp"
#include "xmatch/pipeline.hpp"

namespace xmatch {

namespace fs = std::filesystem;

namespace {

#ifndef XMATCH_BUILD_TYPE
#define XMATCH_BUILD_TYPE "unknown"
#endif

// One process owns a run directory; the lock file makes that explicit.
class RunDir {
public:
    explicit RunDir(const std::string& dir) : dir_(dir), lock_(fs::path(dir) / "lock") {
        fs::create_directories(dir_);
        int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0) {
            throw StateError("run directory '" + dir + "' is locked (remove '" + lock_.string() +
                             "' if no run is active)");
        }
        ::close(fd);
    }
    ~RunDir() {
        std::error_code ec;
        fs::remove(lock_, ec);
    }
    RunDir(const RunDir&) = delete;
    RunDir& operator=(const RunDir&) = delete;

    void write_log(const RunConfig& cfg, std::uint64_t seed, const std::string& note) const {
        std::ofstream log(fs::path(dir_) / "run.log", std::ios::binary);
        log << "build = " << build_identifier() << "\n";
        log << "seed = " << seed << "\n";
        if (!note.empty()) log << "note = " << note << "\n";
        for (const auto& [k, v] : cfg.resolved()) log << k << " = " << v << "\n";
    }

private:
    fs::path dir_;
    fs::path lock_;
};

RunConfig config_from(const std::string& config_path) {
    return config_path.empty() ? RunConfig() : RunConfig::from_file(config_path);
}

GeneratorConfig generator_config_from(const RunConfig& cfg) {
    GeneratorConfig g;
    g.n_identities = static_cast<std::size_t>(cfg.i64("n_identities"));
    g.images_per_id = static_cast<std::size_t>(cfg.i64("images_per_id"));
    g.sents_per_id = static_cast<std::size_t>(cfg.i64("sents_per_id"));
    g.noise_level = cfg.f64("noise_level");
    g.permute_prob = cfg.f64("permute_prob");
    g.synonym_prob = cfg.f64("synonym_prob");
    g.attributes = static_cast<std::size_t>(cfg.i64("attributes"));
    g.grid = static_cast<std::size_t>(cfg.i64("grid"));
    g.channels = static_cast<std::size_t>(cfg.i64("channels"));
    g.vocab = static_cast<std::size_t>(cfg.i64("vocab"));
    g.tokens_per_attribute = static_cast<std::size_t>(cfg.i64("tokens_per_attribute"));
    g.split_mode = parse_split_mode(cfg.str("split_mode"));
    g.seed = static_cast<std::uint64_t>(cfg.i64("seed"));
    return g;
}

// Dataset-derived keys must match the data actually on disk; the config file
// only decides model/training knobs once a dataset exists.
void align_config_with_data(RunConfig& cfg, const Dataset& data) {
    const GeneratorConfig& g = data.config;
    cfg.set("n_identities", std::to_string(g.n_identities));
    cfg.set("images_per_id", std::to_string(g.images_per_id));
    cfg.set("sents_per_id", std::to_string(g.sents_per_id));
    cfg.set("noise_level", std::to_string(g.noise_level));
    cfg.set("permute_prob", std::to_string(g.permute_prob));
    cfg.set("synonym_prob", std::to_string(g.synonym_prob));
    cfg.set("attributes", std::to_string(g.attributes));
    cfg.set("grid", std::to_string(g.grid));
    cfg.set("channels", std::to_string(g.channels));
    cfg.set("vocab", std::to_string(g.vocab));
    cfg.set("tokens_per_attribute", std::to_string(g.tokens_per_attribute));
    cfg.set("split_mode", split_mode_name(g.split_mode));
}

void write_reports(const std::string& out_path, const std::vector<MetricRecord>& records) {
    write_report_json(out_path, records);
    std::string tsv = out_path;
    if (tsv.size() > 5 && tsv.substr(tsv.size() - 5) == ".json") {
        tsv = tsv.substr(0, tsv.size() - 5) + ".tsv";
    } else {
        tsv += ".tsv";
    }
    write_report_tsv(tsv, records);
}

void print_records(const std::vector<MetricRecord>& records) {
    for (const MetricRecord& r : records) {
        std::printf("  %-12s %-14s %-6s seed=%llu  %.4f\n", r.variant.c_str(), r.metric.c_str(),
                    r.split.c_str(), static_cast<unsigned long long>(r.seed), r.value);
    }
}

}  // namespace

std::string build_identifier() {
#if defined(__clang__)
    return std::string("xmatch 0.1.0 clang ") + __clang_version__ + " " + XMATCH_BUILD_TYPE;
#elif defined(__GNUC__)
    return std::string("xmatch 0.1.0 gcc ") + std::to_string(__GNUC__) + "." +
           std::to_string(__GNUC_MINOR__) + "." + std::to_string(__GNUC_PATCHLEVEL__) + " " +
           XMATCH_BUILD_TYPE;
#else
    return std::string("xmatch 0.1.0 ") + XMATCH_BUILD_TYPE;
#endif
}

void cmd_gen_data(const std::string& out_path, const std::string& config_path) {
    RunConfig cfg = config_from(config_path);
    Dataset data = generate(generator_config_from(cfg));
    save(data, out_path);
    std::printf("wrote %zu records (%zu identities, %s splits) to %s\n", data.records.size(),
                data.config.n_identities, split_mode_name(data.config.split_mode), out_path.c_str());
}

void cmd_train_stage1(const std::string& data_path, const std::string& out_dir,
                      const std::string& config_path, std::uint64_t seed) {
    RunConfig cfg = config_from(config_path);
    Dataset data = load(data_path);
    align_config_with_data(cfg, data);
    cfg.set("seed", std::to_string(seed));

    RunDir run(out_dir);
    Stage1Bundle bundle = train_stage1(data, cfg, seed);
    save_checkpoint(out_dir, "stage1", "stage1", cfg.resolved(), bundle.model.params, &bundle.textual,
                    &bundle.visual);
    bundle.trace.save_csv((fs::path(out_dir) / "loss_trace.csv").string());
    run.write_log(cfg, seed, "train-stage1");

    double first = bundle.trace.entries.empty() ? 0.0 : bundle.trace.entries.front().second;
    double last = bundle.trace.entries.empty() ? 0.0 : bundle.trace.entries.back().second;
    std::printf("stage-1 done: %zu steps, loss %.4f -> %.4f, checkpoint in %s\n",
                bundle.trace.entries.size(), first, last, out_dir.c_str());
}

void cmd_train_stage2(const std::string& data_path, const std::string& stage1_dir,
                      const std::string& out_dir, const std::string& config_path, std::uint64_t seed,
                      const Stage2Flags& flags) {
    RunConfig cfg = config_from(config_path);
    Dataset data = load(data_path);
    align_config_with_data(cfg, data);
    cfg.set("seed", std::to_string(seed));
    if (flags.no_sma) cfg.set("no_sma", "1");
    if (flags.no_spa) cfg.set("no_spa", "1");
    if (flags.no_stage1) cfg.set("no_stage1", "1");
    if (flags.no_id) cfg.set("no_id", "1");

    Stage2Options options;
    options.variant.no_sma = cfg.flag("no_sma");
    options.variant.no_spa = cfg.flag("no_spa");
    options.no_stage1 = cfg.flag("no_stage1");
    options.no_id = cfg.flag("no_id");

    Checkpoint stage1;
    const Checkpoint* stage1_ptr = nullptr;
    if (!options.no_stage1) {
        stage1 = load_checkpoint(stage1_dir);
        stage1_ptr = &stage1;
    }

    RunDir run(out_dir);
    Stage2Bundle bundle = train_stage2(data, cfg, seed, options, stage1_ptr);
    std::string variant = options.no_id ? bundle.model.variant.name() + "_no_id"
                                        : bundle.model.variant.name();
    if (options.no_stage1) variant += "_no_stage1";
    save_checkpoint(out_dir, "stage2", variant, cfg.resolved(), bundle.model.params);
    bundle.trace.save_csv((fs::path(out_dir) / "loss_trace.csv").string());
    run.write_log(cfg, seed, "train-stage2 " + variant);

    double first = bundle.trace.entries.empty() ? 0.0 : bundle.trace.entries.front().second;
    double last = bundle.trace.entries.empty() ? 0.0 : bundle.trace.entries.back().second;
    std::printf("stage-2 (%s) done: %zu steps, bce %.4f -> %.4f, checkpoint in %s\n", variant.c_str(),
                bundle.trace.entries.size(), first, last, out_dir.c_str());
}

void cmd_eval(const std::string& data_path, const std::string& stage1_dir, const std::string& stage2_dir,
              std::size_t rerank_k, const std::string& split, const std::string& out_path) {
    Dataset data = load(data_path);
    Checkpoint ck1 = load_checkpoint(stage1_dir);
    Stage1Model stage1 = stage1_from_checkpoint(ck1);
    RunConfig cfg = RunConfig::from_map(ck1.config);
    align_config_with_data(cfg, data);

    EvalOptions options;
    options.split = parse_split(split);
    options.seed = static_cast<std::uint64_t>(cfg.i64("seed"));

    Stage2Model stage2;
    const Stage2Model* stage2_ptr = nullptr;
    if (!stage2_dir.empty()) {
        if (rerank_k == 0) throw ConfigError("--stage2 needs --rerank K");
        Checkpoint ck2 = load_checkpoint(stage2_dir);
        stage2 = stage2_from_checkpoint(ck2);
        stage2_ptr = &stage2;
        options.rerank_k = rerank_k;
        options.variant = ck2.variant;
    }

    auto records = evaluate(data, cfg, stage1, stage2_ptr, options);
    write_reports(out_path, records);
    print_records(records);
}

bool cmd_gradcheck(bool use_f64) {
    const std::uint64_t seed = 20240901;
    std::vector<SuiteResult> results =
        use_f64 ? run_gradient_suites<double>(seed) : run_gradient_suites<float>(seed);
    bool all_pass = true;
    std::printf("gradient checks (%s)\n", use_f64 ? "64-bit" : "32-bit");
    for (const SuiteResult& r : results) {
        std::printf("  %-26s max_err=%.3e tol=%.1e %s (%.2fs)\n", r.name.c_str(), r.max_err, r.tolerance,
                    r.pass() ? "PASS" : "FAIL", r.seconds);
        all_pass = all_pass && r.pass();
    }
    return all_pass;
}

void cmd_ablate(const std::string& data_path, const std::string& out_dir,
                const std::vector<std::uint64_t>& seeds) {
    if (seeds.empty()) throw ConfigError("ablate needs at least one seed");
    Dataset data = load(data_path);
    RunConfig cfg;
    align_config_with_data(cfg, data);
    fs::create_directories(out_dir);

    std::vector<MetricRecord> all;
    auto eval_stage1 = [&](const Stage1Model& model, std::uint64_t seed) {
        EvalOptions opt;
        opt.split = Split::test;
        opt.seed = seed;
        auto records = evaluate(data, cfg, model, nullptr, opt);
        all.insert(all.end(), records.begin(), records.end());
    };
    auto eval_stage2 = [&](const Stage1Model& s1, const Stage2Model& s2, const std::string& variant,
                           std::uint64_t seed) {
        EvalOptions opt;
        opt.split = Split::test;
        opt.seed = seed;
        opt.variant = variant;
        opt.rerank_k = std::min<std::size_t>(static_cast<std::size_t>(cfg.i64("screen_k")),
                                             data.split_items(Split::test, Modality::visual).size());
        auto records = evaluate(data, cfg, s1, &s2, opt);
        all.insert(all.end(), records.begin(), records.end());
    };

    for (std::uint64_t seed : seeds) {
        std::printf("== seed %llu ==\n", static_cast<unsigned long long>(seed));
        RunConfig run_cfg = cfg;
        run_cfg.set("seed", std::to_string(seed));

        Stage1Bundle s1 = train_stage1(data, run_cfg, seed);
        std::string s1_dir = (fs::path(out_dir) / ("seed" + std::to_string(seed)) / "stage1").string();
        fs::create_directories(s1_dir);
        save_checkpoint(s1_dir, "stage1", "stage1", run_cfg.resolved(), s1.model.params, &s1.textual,
                        &s1.visual);
        Checkpoint ck1 = load_checkpoint(s1_dir);
        eval_stage1(s1.model, seed);

        struct VariantSpec {
            const char* name;
            Stage2Options options;
        };
        std::vector<VariantSpec> grid = {
            {"full", {Stage2Variant{false, false}, false, false}},
            {"no_sma", {Stage2Variant{false, true}, false, false}},
            {"no_sma_spa", {Stage2Variant{true, true}, false, false}},
            {"no_sma_spa_stage1", {Stage2Variant{true, true}, true, false}},
        };
        for (const VariantSpec& v : grid) {
            Stage2Bundle s2 =
                train_stage2(data, run_cfg, seed, v.options, v.options.no_stage1 ? nullptr : &ck1);
            if (v.options.no_stage1) {
                // No stage-1 network at all: rank by stage-2 confidence alone.
                auto texts = data.split_items(Split::test, Modality::textual);
                auto images = data.split_items(Split::test, Modality::visual);
                std::vector<std::uint32_t> tids, iids;
                for (auto* r : texts) tids.push_back(r->id);
                for (auto* r : images) iids.push_back(r->id);
                auto lists = rescore_full(s2.model, texts, images, tids, iids);
                all.push_back(MetricRecord{"t2i_top1", topk_accuracy(lists, 1), "test", v.name, seed});
                if (images.size() >= 10) {
                    all.push_back(MetricRecord{"t2i_top10", topk_accuracy(lists, 10), "test", v.name, seed});
                }
            } else {
                eval_stage2(s1.model, s2.model, v.name, seed);
            }
        }

        // Identity annotations withheld from training; evaluation unchanged.
        RunConfig noid_cfg = run_cfg;
        noid_cfg.set("no_id", "1");
        Stage1Bundle s1n = train_stage1(data, noid_cfg, seed);
        std::string s1n_dir =
            (fs::path(out_dir) / ("seed" + std::to_string(seed)) / "stage1_no_id").string();
        fs::create_directories(s1n_dir);
        save_checkpoint(s1n_dir, "stage1", "stage1_no_id", noid_cfg.resolved(), s1n.model.params,
                        &s1n.textual, &s1n.visual);
        Checkpoint ck1n = load_checkpoint(s1n_dir);
        Stage2Options noid_options{Stage2Variant{false, false}, false, true};
        Stage2Bundle s2n = train_stage2(data, noid_cfg, seed, noid_options, &ck1n);
        eval_stage2(s1n.model, s2n.model, "no_id", seed);
    }

    // Per-(metric, variant) means across seeds.
    std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> agg;
    for (const MetricRecord& r : all) {
        auto& [sum, count] = agg[{r.metric, r.variant}];
        sum += r.value;
        ++count;
    }
    std::vector<MetricRecord> summary = all;
    for (const auto& [key, acc] : agg) {
        summary.push_back(MetricRecord{key.first + ".mean", acc.first / acc.second, "test", key.second, 0});
    }
    write_reports((fs::path(out_dir) / "summary.json").string(), summary);
    print_records(summary);
}

}  // namespace xmatch

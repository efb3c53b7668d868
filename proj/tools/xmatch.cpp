// Command-line front end for the two-stage textual-visual matching pipeline.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "xmatch/commands.hpp"
#include "xmatch/errors.hpp"
#include "xmatch/runconfig.hpp"

namespace {

std::vector<std::uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<std::uint64_t> seeds;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
        std::size_t comma = csv.find(',', pos);
        std::string item = csv.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        if (item.empty()) throw xmatch::ConfigError("bad --seeds list: '" + csv + "'");
        try {
            seeds.push_back(std::stoull(item));
        } catch (const std::exception&) {
            throw xmatch::ConfigError("bad seed '" + item + "' in --seeds");
        }
        if (comma == std::string::npos) break;
        pos = comma + 1;
    }
    return seeds;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"xmatch: identity-aware textual-visual matching (two-stage, CPU-only)"};
    app.require_subcommand(1);
    app.footer("Config keys and defaults:\n" + xmatch::RunConfig::documentation());

    std::string data_path, out_path, config_path, stage1_dir, stage2_dir, split = "test", seeds_csv;
    std::uint64_t seed = 0;
    std::size_t rerank_k = 0;
    bool f64 = false;
    xmatch::Stage2Flags flags;

    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic identity-annotated dataset");
    gen->add_option("--out", out_path, "output dataset path")->required();
    gen->add_option("--config", config_path, "key=value config file")->required();

    CLI::App* t1 = app.add_subcommand("train-stage1", "train the stage-1 embedding with the CMCE loss");
    t1->add_option("--data", data_path)->required();
    t1->add_option("--out", out_path, "run directory for checkpoint and traces")->required();
    t1->add_option("--config", config_path)->required();
    t1->add_option("--seed", seed)->required();

    CLI::App* t2 = app.add_subcommand("train-stage2", "train the stage-2 co-attention verifier");
    t2->add_option("--data", data_path)->required();
    t2->add_option("--stage1", stage1_dir, "stage-1 run directory");
    t2->add_option("--out", out_path)->required();
    t2->add_option("--config", config_path)->required();
    t2->add_option("--seed", seed)->required();
    t2->add_flag("--no-sma", flags.no_sma, "drop latent semantic attention");
    t2->add_flag("--no-spa", flags.no_spa, "drop spatial attention");
    t2->add_flag("--no-stage1", flags.no_stage1, "random init, uniform pairs");
    t2->add_flag("--no-id", flags.no_id, "ignore identity annotations during training");

    CLI::App* ev = app.add_subcommand("eval", "retrieval metrics for a trained pipeline");
    ev->add_option("--data", data_path)->required();
    ev->add_option("--stage1", stage1_dir)->required();
    ev->add_option("--stage2", stage2_dir);
    ev->add_option("--rerank", rerank_k, "rescore the top-K block with stage-2");
    ev->add_option("--split", split)->check(CLI::IsMember({"val", "test"}))->required();
    ev->add_option("--out", out_path, "report path (.json; a .tsv twin is written)")->required();

    CLI::App* gc = app.add_subcommand("gradcheck", "run all finite-difference suites");
    gc->add_flag("--f64", f64, "check in 64-bit precision");

    CLI::App* ab = app.add_subcommand("ablate", "train and evaluate the ablation grid");
    ab->add_option("--data", data_path)->required();
    ab->add_option("--out", out_path)->required();
    ab->add_option("--seeds", seeds_csv, "comma-separated seeds")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            xmatch::cmd_gen_data(out_path, config_path);
        } else if (t1->parsed()) {
            xmatch::cmd_train_stage1(data_path, out_path, config_path, seed);
        } else if (t2->parsed()) {
            if (stage1_dir.empty() && !flags.no_stage1) {
                throw xmatch::ConfigError("train-stage2 needs --stage1 DIR (or --no-stage1)");
            }
            xmatch::cmd_train_stage2(data_path, stage1_dir, out_path, config_path, seed, flags);
        } else if (ev->parsed()) {
            xmatch::cmd_eval(data_path, stage1_dir, stage2_dir, rerank_k, split, out_path);
        } else if (gc->parsed()) {
            if (!xmatch::cmd_gradcheck(f64)) return 2;
        } else if (ab->parsed()) {
            xmatch::cmd_ablate(data_path, out_path, parse_seed_list(seeds_csv));
        }
    } catch (const xmatch::NumericError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "%s\n", e.what());
        return 1;
    }
    return 0;
}

#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xmatch {

// Stable identifier of this build, logged with every run.
std::string build_identifier();

struct Stage2Flags {
    bool no_sma = false;
    bool no_spa = false;
    bool no_stage1 = false;
    bool no_id = false;
};

// Subcommand bodies. They throw the library error types; the CLI maps those
// to exit codes (validation errors -> 1, numeric failures -> 2).
void cmd_gen_data(const std::string& out_path, const std::string& config_path);

void cmd_train_stage1(const std::string& data_path, const std::string& out_dir,
                      const std::string& config_path, std::uint64_t seed);

void cmd_train_stage2(const std::string& data_path, const std::string& stage1_dir,
                      const std::string& out_dir, const std::string& config_path, std::uint64_t seed,
                      const Stage2Flags& flags);

void cmd_eval(const std::string& data_path, const std::string& stage1_dir, const std::string& stage2_dir,
              std::size_t rerank_k, const std::string& split, const std::string& out_path);

// Runs every finite-difference suite; returns true when all pass.
bool cmd_gradcheck(bool use_f64);

void cmd_ablate(const std::string& data_path, const std::string& out_dir,
                const std::vector<std::uint64_t>& seeds);

}  // namespace xmatch

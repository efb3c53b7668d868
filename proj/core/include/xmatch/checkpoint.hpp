#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "xmatch/cmce.hpp"
#include "xmatch/params.hpp"

namespace xmatch {

inline constexpr int kCheckpointVersion = 1;

/// On-disk checkpoint: a JSON manifest (version, kind, variant, config
/// snapshot, parameter directory with byte offsets, buffer directory) next to
/// a params.bin blob of little-endian 32-bit floats. Offsets tile the blob
/// exactly; loading reproduces every scalar bitwise.
struct Checkpoint {
    std::string kind;     // "stage1" or "stage2"
    std::string variant;  // "stage1", "full", "no_sma", ...
    std::map<std::string, std::string> config;
    std::vector<std::pair<std::string, Array<float>>> params;  // manifest order
    std::unique_ptr<FeatureBuffer<float>> textual;             // stage-1 only
    std::unique_ptr<FeatureBuffer<float>> visual;

    const Array<float>& param(const std::string& name) const;
};

void save_checkpoint(const std::string& dir, const std::string& kind, const std::string& variant,
                     const std::map<std::string, std::string>& config, const ParamSet<float>& params,
                     const FeatureBuffer<float>* textual = nullptr,
                     const FeatureBuffer<float>* visual = nullptr);

Checkpoint load_checkpoint(const std::string& dir);

// Copy checkpoint values into a freshly built ParamSet; names and shapes must
// line up for the entries present. Entries missing from `from` are left at
// their initialized values when `allow_missing` is set.
void fill_params(ParamSet<float>& into, const Checkpoint& from, bool allow_missing = false);

// Instrumentation: how many checkpoint loads this process performed. Used to
// assert that "no stage-1" training really never touches a stage-1 checkpoint.
std::uint64_t checkpoint_load_count();

}  // namespace xmatch

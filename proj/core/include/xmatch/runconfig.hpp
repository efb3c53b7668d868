#pragma once

#include <cstdint>
#include <map>
#include <string>

namespace xmatch {

/// Flat key=value run configuration. Every key has a registered default and a
/// one-line description; unknown keys are rejected at parse time. The fully
/// resolved map is what gets logged and snapshotted into checkpoints.
class RunConfig {
public:
    RunConfig();

    static RunConfig from_file(const std::string& path);
    static RunConfig from_map(const std::map<std::string, std::string>& values);

    // Apply "key=value" lines from a string (used by tests and from_file).
    void apply_text(const std::string& text, const std::string& origin);

    void set(const std::string& key, const std::string& value);

    const std::string& str(const std::string& key) const;
    std::int64_t i64(const std::string& key) const;
    double f64(const std::string& key) const;
    bool flag(const std::string& key) const;

    // Full key -> value map with defaults filled in (sorted by key).
    std::map<std::string, std::string> resolved() const;

    static std::string documentation();

private:
    std::map<std::string, std::string> values_;
};

}  // namespace xmatch

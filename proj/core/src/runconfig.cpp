#include "xmatch/runconfig.hpp"

#include <fstream>
#include <sstream>
#include <vector>

#include "xmatch/errors.hpp"

namespace xmatch {
namespace {

struct KeySpec {
    const char* key;
    const char* def;
    const char* doc;
};

// Single source of truth for keys, defaults and documentation.
const std::vector<KeySpec>& key_table() {
    static const std::vector<KeySpec> table = {
        // dataset generation
        {"seed", "1234", "dataset generation seed (training seeds come from --seed)"},
        {"n_identities", "100", "number of synthetic identities"},
        {"images_per_id", "2", "images rendered per identity"},
        {"sents_per_id", "2", "descriptions rendered per identity"},
        {"noise_level", "0.3", "stddev of Gaussian noise added to image grids"},
        {"permute_prob", "0.5", "probability that a description's phrase order is shuffled"},
        {"synonym_prob", "0.0", "probability of swapping an attribute token for its synonym"},
        {"attributes", "8", "latent binary attributes per identity (max 16)"},
        {"grid", "4", "image grid side length G (L = G*G regions)"},
        {"channels", "3", "channels per grid cell"},
        {"vocab", "64", "token vocabulary size"},
        {"tokens_per_attribute", "3", "tokens per attribute phrase (>= 2)"},
        {"split_mode", "shared", "shared (same identities, disjoint samples) or disjoint (unseen identities)"},
        // model dimensions
        {"dim_joint", "64", "joint embedding size D (the reference setup uses 512)"},
        {"dim_hidden", "64", "encoder LSTM hidden size D_H"},
        {"dim_region", "32", "region feature size D_I"},
        {"dim_embed", "32", "word embedding size"},
        {"attn_dim", "32", "spatial attention space K"},
        {"importance_dim", "32", "hidden width of the semantic importance function"},
        {"pre_dim", "64", "width of the two layers between aligned features and the decoder"},
        {"decoder_dim", "64", "decoder LSTM hidden size"},
        {"head_dim", "32", "hidden width of the confidence head"},
        {"decoder_steps", "5", "latent semantic decoding steps M"},
        // stage-1 loss
        {"sigma_v", "0.04", "temperature for visual features vs textual buffer"},
        {"sigma_s", "0.04", "temperature for textual features vs visual buffer"},
        {"buffer_alpha", "0.5", "running-average weight for multi-sample identities"},
        {"buffer_renorm", "1", "L2-renormalize buffer rows after init/update"},
        {"batch_identities", "16", "identities sampled per stage-1 step"},
        // training
        {"epochs_stage1", "30", "stage-1 training epochs"},
        {"epochs_stage2_frozen", "10", "stage-2 epochs with encoders frozen"},
        {"epochs_stage2_joint", "5", "stage-2 joint fine-tuning epochs"},
        {"lr_adam", "0.002", "Adam learning rate, recurrent/attention parameters (reference: 0.0001)"},
        {"lr_sgd", "0.02", "SGD learning rate, grid-encoder parameters"},
        {"momentum", "0.9", "SGD momentum"},
        {"batch_pairs", "16", "stage-2 pairs per step"},
        {"pos_fraction", "0.25", "positive share of each stage-2 batch"},
        {"screen_k", "20", "stage-1 candidates kept per query for stage-2"},
        {"ap_cutoff", "50", "retrieval depth for the per-class average precision metric"},
        // ablation switches (CLI flags override these)
        {"no_sma", "0", "disable latent semantic attention"},
        {"no_spa", "0", "disable spatial attention"},
        {"no_stage1", "0", "train stage-2 without stage-1 init or screening"},
        {"no_id", "0", "ignore identity annotations (each sample pair becomes its own identity)"},
    };
    return table;
}

const KeySpec* find_key(const std::string& key) {
    for (const KeySpec& s : key_table()) {
        if (key == s.key) return &s;
    }
    return nullptr;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

RunConfig::RunConfig() {
    for (const KeySpec& s : key_table()) values_[s.key] = s.def;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    RunConfig cfg;
    cfg.apply_text(ss.str(), path);
    return cfg;
}

RunConfig RunConfig::from_map(const std::map<std::string, std::string>& values) {
    RunConfig cfg;
    for (const auto& [k, v] : values) cfg.set(k, v);
    return cfg;
}

void RunConfig::apply_text(const std::string& text, const std::string& origin) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ParseError(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
        }
        std::string key = trim(t.substr(0, eq));
        std::string value = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
        }
        set(key, value);
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (!find_key(key)) throw ConfigError("unknown config key: " + key);
    values_[key] = value;
}

const std::string& RunConfig::str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key: " + key);
    return it->second;
}

std::int64_t RunConfig::i64(const std::string& key) const {
    const std::string& v = str(key);
    try {
        std::size_t pos = 0;
        long long r = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
    }
}

double RunConfig::f64(const std::string& key) const {
    const std::string& v = str(key);
    try {
        std::size_t pos = 0;
        double r = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
    }
}

bool RunConfig::flag(const std::string& key) const {
    const std::string& v = str(key);
    if (v == "1" || v == "true" || v == "on") return true;
    if (v == "0" || v == "false" || v == "off") return false;
    throw ConfigError("key '" + key + "' expects a boolean (0/1/true/false/on/off), got '" + v + "'");
}

std::map<std::string, std::string> RunConfig::resolved() const { return values_; }

std::string RunConfig::documentation() {
    std::ostringstream os;
    for (const KeySpec& s : key_table()) {
        os << s.key << " = " << s.def << "\n    " << s.doc << "\n";
    }
    return os.str();
}

}  // namespace xmatch

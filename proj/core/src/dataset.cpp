#include "xmatch/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

#include "xmatch/errors.hpp"
#include "xmatch/rng.hpp"

#include <json.hpp>

namespace xmatch {

using nlohmann::json;

const char* split_name(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::val: return "val";
        default: return "test";
    }
}

const char* split_mode_name(SplitMode m) {
    return m == SplitMode::shared_identity ? "shared" : "disjoint";
}

SplitMode parse_split_mode(const std::string& s) {
    if (s == "shared") return SplitMode::shared_identity;
    if (s == "disjoint") return SplitMode::disjoint_identity;
    throw ConfigError("split_mode must be 'shared' or 'disjoint', got '" + s + "'");
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "val") return Split::val;
    if (s == "test") return Split::test;
    throw ConfigError("split must be train, val or test, got '" + s + "'");
}

namespace {

// Token layout: 0 is the connector, 1..A are attribute markers, then four
// value tokens per attribute (two truth values x two synonyms).
std::uint32_t attribute_token(std::size_t a) { return static_cast<std::uint32_t>(1 + a); }
std::uint32_t value_token(std::size_t n_attrs, std::size_t a, unsigned bit, unsigned synonym) {
    return static_cast<std::uint32_t>(1 + n_attrs + 4 * a + 2 * bit + synonym);
}
std::size_t tokens_needed(std::size_t n_attrs) { return 1 + 5 * n_attrs; }

void validate_generator(const GeneratorConfig& cfg) {
    if (cfg.n_identities < 1 || cfg.images_per_id < 1 || cfg.sents_per_id < 1) {
        throw ConfigError("identity and per-identity sample counts must be >= 1");
    }
    if (cfg.attributes < 1 || cfg.attributes > 16) {
        throw ConfigError("attributes must be in [1, 16]");
    }
    if (cfg.n_identities > (std::size_t(1) << cfg.attributes)) {
        throw ConfigError("cannot draw " + std::to_string(cfg.n_identities) +
                          " distinct identities from " + std::to_string(cfg.attributes) + " binary attributes");
    }
    if (cfg.grid < 1 || cfg.channels < 1) throw ConfigError("grid and channels must be >= 1");
    if (cfg.tokens_per_attribute < 2) throw ConfigError("tokens_per_attribute must be >= 2");
    if (cfg.vocab < tokens_needed(cfg.attributes)) {
        throw ConfigError("vocab " + std::to_string(cfg.vocab) + " too small; need at least " +
                          std::to_string(tokens_needed(cfg.attributes)));
    }
    if (cfg.noise_level < 0) throw ConfigError("noise_level must be >= 0");
    if (cfg.permute_prob < 0 || cfg.permute_prob > 1) throw ConfigError("permute_prob must be in [0,1]");
    if (cfg.synonym_prob < 0 || cfg.synonym_prob > 1) throw ConfigError("synonym_prob must be in [0,1]");
    if (cfg.split_mode == SplitMode::disjoint_identity && cfg.n_identities < 3) {
        throw ConfigError("disjoint-identity splits need at least 3 identities");
    }
}

SplitSpec make_splits(const GeneratorConfig& cfg, Rng& rng) {
    SplitSpec spec;
    spec.mode = cfg.split_mode;
    spec.seed = cfg.seed;
    std::vector<std::uint32_t> ids(cfg.n_identities);
    std::iota(ids.begin(), ids.end(), 0u);
    if (cfg.split_mode == SplitMode::shared_identity) {
        spec.train_ids = ids;
        spec.val_ids = ids;
        spec.test_ids = ids;
    } else {
        rng.shuffle(ids);
        std::size_t n_test = std::max<std::size_t>(1, cfg.n_identities / 5);
        std::size_t n_val = std::max<std::size_t>(1, cfg.n_identities / 5);
        std::size_t n_train = cfg.n_identities - n_test - n_val;
        spec.train_ids.assign(ids.begin(), ids.begin() + n_train);
        spec.val_ids.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
        spec.test_ids.assign(ids.begin() + n_train + n_val, ids.end());
        std::sort(spec.train_ids.begin(), spec.train_ids.end());
        std::sort(spec.val_ids.begin(), spec.val_ids.end());
        std::sort(spec.test_ids.begin(), spec.test_ids.end());
    }
    return spec;
}

json header_json(const Dataset& data) {
    const GeneratorConfig& cfg = data.config;
    json h;
    h["version"] = 1;
    h["dims"] = {{"grid", cfg.grid},
                 {"channels", cfg.channels},
                 {"attributes", cfg.attributes},
                 {"tokens_per_attribute", cfg.tokens_per_attribute}};
    h["vocab"] = cfg.vocab;
    h["counts"] = {{"n_identities", cfg.n_identities},
                   {"images_per_id", cfg.images_per_id},
                   {"sents_per_id", cfg.sents_per_id}};
    h["gen"] = {{"noise_level", cfg.noise_level},
                {"permute_prob", cfg.permute_prob},
                {"synonym_prob", cfg.synonym_prob},
                {"seed", cfg.seed}};
    h["splits"] = {{"mode", split_mode_name(data.splits.mode)},
                   {"seed", data.splits.seed},
                   {"train", data.splits.train_ids},
                   {"val", data.splits.val_ids},
                   {"test", data.splits.test_ids}};
    h["records"] = data.records.size();
    return h;
}

void header_from_json(const json& h, Dataset& data) {
    if (!h.contains("version") || h["version"].get<int>() != 1) {
        throw ParseError("unsupported dataset version");
    }
    GeneratorConfig& cfg = data.config;
    const json& dims = h.at("dims");
    cfg.grid = dims.at("grid").get<std::size_t>();
    cfg.channels = dims.at("channels").get<std::size_t>();
    cfg.attributes = dims.at("attributes").get<std::size_t>();
    cfg.tokens_per_attribute = dims.at("tokens_per_attribute").get<std::size_t>();
    cfg.vocab = h.at("vocab").get<std::size_t>();
    const json& counts = h.at("counts");
    cfg.n_identities = counts.at("n_identities").get<std::size_t>();
    cfg.images_per_id = counts.at("images_per_id").get<std::size_t>();
    cfg.sents_per_id = counts.at("sents_per_id").get<std::size_t>();
    const json& gen = h.at("gen");
    cfg.noise_level = gen.at("noise_level").get<double>();
    cfg.permute_prob = gen.at("permute_prob").get<double>();
    cfg.synonym_prob = gen.at("synonym_prob").get<double>();
    cfg.seed = gen.at("seed").get<std::uint64_t>();
    const json& splits = h.at("splits");
    data.splits.mode = parse_split_mode(splits.at("mode").get<std::string>());
    data.splits.seed = splits.at("seed").get<std::uint64_t>();
    data.splits.train_ids = splits.at("train").get<std::vector<std::uint32_t>>();
    data.splits.val_ids = splits.at("val").get<std::vector<std::uint32_t>>();
    data.splits.test_ids = splits.at("test").get<std::vector<std::uint32_t>>();
    cfg.split_mode = data.splits.mode;
}

}  // namespace

Dataset generate(const GeneratorConfig& cfg) {
    validate_generator(cfg);
    Rng rng(cfg.seed);

    // Rendering basis: one Gaussian grid pattern per attribute. Distinct
    // attribute vectors then map to distinct (a.s. linearly independent)
    // noise-free grids.
    std::size_t cells = cfg.grid * cfg.grid * cfg.channels;
    std::vector<std::vector<float>> basis(cfg.attributes);
    for (auto& b : basis) {
        b.resize(cells);
        for (float& x : b) x = static_cast<float>(rng.gauss());
    }

    // Distinct attribute codes, one per identity.
    std::vector<std::uint32_t> codes(std::size_t(1) << cfg.attributes);
    std::iota(codes.begin(), codes.end(), 0u);
    rng.shuffle(codes);
    codes.resize(cfg.n_identities);

    Dataset data;
    data.config = cfg;
    data.splits = make_splits(cfg, rng);

    std::vector<std::size_t> phrase_order(cfg.attributes);
    for (std::uint32_t id = 0; id < cfg.n_identities; ++id) {
        std::uint32_t code = codes[id];
        std::vector<float> base(cells, 0.0f);
        for (std::size_t a = 0; a < cfg.attributes; ++a) {
            if ((code >> a) & 1u) {
                for (std::size_t i = 0; i < cells; ++i) base[i] += basis[a][i];
            }
        }
        for (std::uint32_t k = 0; k < cfg.images_per_id; ++k) {
            SampleRecord rec;
            rec.id = id;
            rec.modality = Modality::visual;
            rec.sample = k;
            rec.image.grid = cfg.grid;
            rec.image.channels = cfg.channels;
            rec.image.values = base;
            if (cfg.noise_level > 0) {
                for (float& x : rec.image.values) {
                    x += static_cast<float>(cfg.noise_level * rng.gauss());
                }
            }
            data.records.push_back(std::move(rec));
        }
        for (std::uint32_t k = 0; k < cfg.sents_per_id; ++k) {
            std::iota(phrase_order.begin(), phrase_order.end(), std::size_t(0));
            if (cfg.permute_prob > 0 && rng.uniform() < cfg.permute_prob) {
                rng.shuffle(phrase_order);
            }
            SampleRecord rec;
            rec.id = id;
            rec.modality = Modality::textual;
            rec.sample = k;
            rec.text.vocab = static_cast<std::uint32_t>(cfg.vocab);
            rec.text.tokens.reserve(cfg.attributes * cfg.tokens_per_attribute);
            for (std::size_t a : phrase_order) {
                unsigned bit = (code >> a) & 1u;
                unsigned synonym = 0;
                if (cfg.synonym_prob > 0 && rng.uniform() < cfg.synonym_prob) synonym = 1;
                rec.text.tokens.push_back(attribute_token(a));
                for (std::size_t c = 0; c + 2 < cfg.tokens_per_attribute; ++c) {
                    rec.text.tokens.push_back(0);  // connector
                }
                rec.text.tokens.push_back(value_token(cfg.attributes, a, bit, synonym));
            }
            data.records.push_back(std::move(rec));
        }
    }
    return data;
}

bool Dataset::in_split(const SampleRecord& r, Split split) const {
    const std::vector<std::uint32_t>* ids = &splits.train_ids;
    if (split == Split::val) ids = &splits.val_ids;
    if (split == Split::test) ids = &splits.test_ids;
    if (!std::binary_search(ids->begin(), ids->end(), r.id)) return false;
    if (splits.mode == SplitMode::disjoint_identity) return true;

    // Shared-identity mode assigns samples by index: 0 -> train, the last one
    // -> test, anything in between -> val. With fewer than three samples per
    // modality the val split reuses the test sample.
    std::size_t count = r.modality == Modality::visual ? config.images_per_id : config.sents_per_id;
    if (split == Split::train) return r.sample == 0;
    if (count < 2) return false;  // single sample went to train
    bool is_last = r.sample == count - 1;
    if (split == Split::test) return is_last;
    if (count <= 2) return is_last;  // val aliases test
    return r.sample > 0 && !is_last;
}

std::vector<const SampleRecord*> Dataset::split_items(Split split, Modality modality) const {
    std::vector<const SampleRecord*> out;
    for (const SampleRecord& r : records) {
        if (r.modality == modality && in_split(r, split)) out.push_back(&r);
    }
    return out;
}

void save(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw InputError("cannot write dataset file: " + path);
    out << header_json(data).dump() << "\n";
    for (const SampleRecord& r : data.records) {
        json line;
        line["id"] = r.id;
        line["sample"] = r.sample;
        if (r.modality == Modality::visual) {
            line["modality"] = "image";
            json payload = json::array();
            for (float x : r.image.values) payload.push_back(static_cast<double>(x));
            line["payload"] = std::move(payload);
        } else {
            line["modality"] = "text";
            line["payload"] = r.text.tokens;
        }
        out << line.dump() << "\n";
    }
    if (!out) throw InputError("failed while writing dataset file: " + path);
}

Dataset load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot read dataset file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError(path + ": missing header line");

    Dataset data;
    std::size_t expected = 0;
    try {
        json h = json::parse(line);
        header_from_json(h, data);
        expected = h.at("records").get<std::size_t>();
    } catch (const json::exception& e) {
        throw ParseError(path + ":1: bad header: " + e.what());
    }

    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        SampleRecord rec;
        try {
            json j = json::parse(line);
            rec.id = j.at("id").get<std::uint32_t>();
            rec.sample = j.at("sample").get<std::uint32_t>();
            std::string modality = j.at("modality").get<std::string>();
            if (modality == "image") {
                rec.modality = Modality::visual;
                rec.image.grid = data.config.grid;
                rec.image.channels = data.config.channels;
                auto payload = j.at("payload").get<std::vector<double>>();
                rec.image.values.reserve(payload.size());
                for (double x : payload) rec.image.values.push_back(static_cast<float>(x));
                rec.image.validate();
            } else if (modality == "text") {
                rec.modality = Modality::textual;
                rec.text.vocab = static_cast<std::uint32_t>(data.config.vocab);
                rec.text.tokens = j.at("payload").get<std::vector<std::uint32_t>>();
                rec.text.validate();
            } else {
                throw ParseError("unknown modality '" + modality + "'");
            }
            if (rec.id >= data.config.n_identities) {
                throw ParseError("identity " + std::to_string(rec.id) + " out of range");
            }
        } catch (const json::exception& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        } catch (const std::runtime_error& e) {
            throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        data.records.push_back(std::move(rec));
    }
    if (data.records.size() != expected) {
        throw ParseError(path + ": header promises " + std::to_string(expected) + " records, found " +
                         std::to_string(data.records.size()) + " (truncated file?)");
    }
    return data;
}

IdentityView build_identity_view(const Dataset& data, Split split, bool per_sample_ids) {
    IdentityView view;
    auto images = data.split_items(split, Modality::visual);
    auto texts = data.split_items(split, Modality::textual);

    const std::vector<std::uint32_t>* ids = &data.splits.train_ids;
    if (split == Split::val) ids = &data.splits.val_ids;
    if (split == Split::test) ids = &data.splits.test_ids;

    if (!per_sample_ids) {
        std::map<std::uint32_t, std::uint32_t> dense;
        for (std::uint32_t id : *ids) dense.emplace(id, static_cast<std::uint32_t>(dense.size()));
        view.n_identities = dense.size();
        view.images = images;
        view.texts = texts;
        for (const SampleRecord* r : images) view.image_identity.push_back(dense.at(r->id));
        for (const SampleRecord* r : texts) view.text_identity.push_back(dense.at(r->id));
        return view;
    }

    // Per-sample pseudo-identities: pair the k-th image with the k-th
    // description of each identity; unpaired extras are dropped.
    std::map<std::uint32_t, std::vector<const SampleRecord*>> img_by_id, txt_by_id;
    for (const SampleRecord* r : images) img_by_id[r->id].push_back(r);
    for (const SampleRecord* r : texts) txt_by_id[r->id].push_back(r);
    std::uint32_t next = 0;
    for (std::uint32_t id : *ids) {
        auto ii = img_by_id.find(id);
        auto ti = txt_by_id.find(id);
        if (ii == img_by_id.end() || ti == txt_by_id.end()) {
            throw DatasetError("identity " + std::to_string(id) + " lacks samples in one modality");
        }
        std::size_t n = std::min(ii->second.size(), ti->second.size());
        for (std::size_t k = 0; k < n; ++k) {
            view.images.push_back(ii->second[k]);
            view.texts.push_back(ti->second[k]);
            view.image_identity.push_back(next);
            view.text_identity.push_back(next);
            ++next;
        }
    }
    view.n_identities = next;
    if (next == 0) throw DatasetError("no pairable samples in split");
    return view;
}

}  // namespace xmatch

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "xmatch/sample_types.hpp"

namespace xmatch {

enum class SplitMode { shared_identity, disjoint_identity };
enum class Split { train, val, test };

const char* split_name(Split s);
const char* split_mode_name(SplitMode m);
SplitMode parse_split_mode(const std::string& s);
Split parse_split(const std::string& s);

struct SplitSpec {
    SplitMode mode = SplitMode::shared_identity;
    std::uint64_t seed = 0;
    std::vector<std::uint32_t> train_ids;
    std::vector<std::uint32_t> val_ids;
    std::vector<std::uint32_t> test_ids;
};

struct SampleRecord {
    std::uint32_t id = 0;
    Modality modality = Modality::visual;
    std::uint32_t sample = 0;  // index within (id, modality)
    ImageGrid image;           // set when modality == visual
    TokenSequence text;        // set when modality == textual
};

struct GeneratorConfig {
    std::size_t n_identities = 100;
    std::size_t images_per_id = 2;
    std::size_t sents_per_id = 2;
    double noise_level = 0.3;
    double permute_prob = 0.5;
    double synonym_prob = 0.0;
    std::size_t attributes = 8;
    std::size_t grid = 4;
    std::size_t channels = 3;
    std::size_t vocab = 64;
    std::size_t tokens_per_attribute = 3;
    SplitMode split_mode = SplitMode::shared_identity;
    std::uint64_t seed = 1234;
};

/// Identity-annotated synthetic corpus. Images are attribute-driven grid
/// renderings plus Gaussian noise; descriptions are per-attribute token
/// phrases whose order may be permuted (the structural noise axis).
struct Dataset {
    GeneratorConfig config;
    SplitSpec splits;
    std::vector<SampleRecord> records;

    std::vector<const SampleRecord*> split_items(Split split, Modality modality) const;
    bool in_split(const SampleRecord& r, Split split) const;
};

/// Deterministic generation: one attribute vector per identity (all distinct),
/// images_per_id noisy renderings and sents_per_id phrase sequences per
/// identity. With noise_level = 0 and permute_prob = 0 every sample of an
/// identity is bitwise identical, which makes the retrieval task separable by
/// construction.
Dataset generate(const GeneratorConfig& cfg);

void save(const Dataset& data, const std::string& path);
Dataset load(const std::string& path);

/// Training view: parallel image/text sample lists with dense identity labels
/// in 0..n_identities-1. With per_sample_ids (the "ignore identity
/// annotations" ablation) the k-th image and k-th description of an identity
/// form their own pseudo-identity.
struct IdentityView {
    std::vector<const SampleRecord*> images;
    std::vector<const SampleRecord*> texts;
    std::vector<std::uint32_t> image_identity;  // dense labels, parallel to images
    std::vector<std::uint32_t> text_identity;
    std::size_t n_identities = 0;
};

IdentityView build_identity_view(const Dataset& data, Split split, bool per_sample_ids);

}  // namespace xmatch

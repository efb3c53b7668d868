#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xmatch/checkpoint.hpp"
#include "xmatch/cmce.hpp"
#include "xmatch/coattention.hpp"
#include "xmatch/dataset.hpp"
#include "xmatch/encoders.hpp"
#include "xmatch/metrics.hpp"
#include "xmatch/runconfig.hpp"

namespace xmatch {

struct Stage1Model {
    EncoderDims dims;
    ParamSet<float> params;
    EncoderIds ids;
};

struct Stage2Model {
    EncoderDims enc_dims;
    CoattentionDims coa_dims;
    Stage2Variant variant;
    ParamSet<float> params;
    EncoderIds enc_ids;
    CoattentionIds coa_ids;
};

EncoderDims encoder_dims_from(const RunConfig& cfg);
CoattentionDims coattention_dims_from(const RunConfig& cfg);
CmceConfig<float> cmce_config_from(const RunConfig& cfg);

Stage1Model make_stage1_model(const RunConfig& cfg);
Stage2Model make_stage2_model(const RunConfig& cfg, Stage2Variant variant);

Stage1Model stage1_from_checkpoint(const Checkpoint& ck);
Stage2Model stage2_from_checkpoint(const Checkpoint& ck);

// Plain (gradient-free) joint features; data-parallel over samples.
std::vector<Array<float>> encode_image_features(const Stage1Model& model,
                                                const std::vector<const SampleRecord*>& records);
std::vector<Array<float>> encode_text_features(const Stage1Model& model,
                                               const std::vector<const SampleRecord*>& records);

struct LossTrace {
    std::vector<std::pair<std::uint64_t, double>> entries;  // (step, loss)
    void save_csv(const std::string& path) const;
};

struct Stage1Bundle {
    Stage1Model model;
    FeatureBuffer<float> textual;
    FeatureBuffer<float> visual;
    LossTrace trace;
};

/// Stage-1 training: per step, encode one image and one description for each
/// of n sampled identities, push the closed-form CMCE gradients back through
/// the encoders, take the optimizer step, then fold the new features into the
/// buffers (full overwrite for single-sample identities, running average
/// otherwise).
Stage1Bundle train_stage1(const Dataset& data, const RunConfig& cfg, std::uint64_t seed);

/// Rank every query against the gallery by joint-space inner product. Each
/// item is encoded exactly once (the O(N) evaluation path); ties break by
/// gallery index.
std::vector<RankedList> rank_by_affinity(const std::vector<Array<float>>& query_feats,
                                         const std::vector<std::uint32_t>& query_ids,
                                         const std::vector<Array<float>>& gallery_feats,
                                         const std::vector<std::uint32_t>& gallery_ids,
                                         Direction direction);

std::vector<RankedList> retrieve_stage1(const Stage1Model& model,
                                        const std::vector<const SampleRecord*>& queries,
                                        const std::vector<const SampleRecord*>& gallery,
                                        Direction direction);

// Top-K screening: emit one candidate pair per (query, kept candidate),
// labeled by identity equality.
std::vector<MatchPair> screen_topk(const std::vector<RankedList>& ranked, std::size_t k);

struct Stage2Options {
    Stage2Variant variant;
    bool no_stage1 = false;
    bool no_id = false;
};

struct Stage2Bundle {
    Stage2Model model;
    LossTrace trace;
};

/// Stage-2 training. Unless no_stage1 is set, encoders start from the stage-1
/// checkpoint and training pairs come from stage-1 top-K screening (both
/// directions, deduplicated); otherwise encoders are random and pairs are
/// drawn uniformly. Phase 1 trains attention/decoder/head with encoders
/// frozen, phase 2 fine-tunes everything jointly.
Stage2Bundle train_stage2(const Dataset& data, const RunConfig& cfg, std::uint64_t seed,
                          const Stage2Options& options, const Checkpoint* stage1);

// Confidence of each (text, image) pair under the stage-2 model;
// data-parallel, bumps the pair-evaluation counter once per pair.
std::vector<double> score_pairs(const Stage2Model& model,
                                const std::vector<const SampleRecord*>& texts,
                                const std::vector<const SampleRecord*>& images,
                                const std::vector<MatchPair>& pairs);

std::uint64_t pair_eval_counter();

/// Rescore the top-K block by stage-2 confidence and reorder it (stable, so
/// tied confidences keep stage-1 order); candidates beyond K keep stage-1
/// order. Tail scores are the stage-1 affinities shifted by -2 so the whole
/// list stays non-increasing (confidences live in (0,1), affinities in [-1,1]).
std::vector<RankedList> rerank(const std::vector<RankedList>& ranked, std::size_t k,
                               const Stage2Model& model, const std::vector<const SampleRecord*>& texts,
                               const std::vector<const SampleRecord*>& images);

// Full quadratic stage-2 ranking (every query against every gallery item);
// the evaluation path for stage-2-only ablations.
std::vector<RankedList> rescore_full(const Stage2Model& model,
                                     const std::vector<const SampleRecord*>& texts,
                                     const std::vector<const SampleRecord*>& images,
                                     const std::vector<std::uint32_t>& text_ids,
                                     const std::vector<std::uint32_t>& image_ids);

/// Class-fused text-to-image lists: one query per identity class, built from
/// the renormalized mean of the class's sentence features.
std::vector<RankedList> per_class_text_to_image(const Stage1Model& model,
                                                const std::vector<const SampleRecord*>& texts,
                                                const std::vector<const SampleRecord*>& images);

/// Image-to-text retrieval against fused per-class sentence vectors
/// (a stage-1-only task); returns one ranked class list per image query.
std::vector<RankedList> image_to_text_retrieve(const Stage1Model& model,
                                               const std::vector<const SampleRecord*>& images,
                                               const std::vector<const SampleRecord*>& texts);

struct EvalOptions {
    Split split = Split::test;
    std::size_t rerank_k = 0;  // 0: stage-1 only
    std::string variant = "stage1";
    std::uint64_t seed = 0;
};

std::vector<MetricRecord> evaluate(const Dataset& data, const RunConfig& cfg, const Stage1Model& stage1,
                                   const Stage2Model* stage2, const EvalOptions& options);

}  // namespace xmatch

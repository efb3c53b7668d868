#include "xmatch/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "xmatch/optim.hpp"
#include "xmatch/parallel.hpp"
#include "xmatch/rng.hpp"

namespace xmatch {

namespace {

std::atomic<std::uint64_t> g_pair_evals{0};

constexpr double kInitLo = -0.08;
constexpr double kInitHi = 0.08;

Optimizer<float>::Settings optimizer_settings(const RunConfig& cfg) {
    Optimizer<float>::Settings s;
    s.lr_adam = static_cast<float>(cfg.f64("lr_adam"));
    s.lr_sgd = static_cast<float>(cfg.f64("lr_sgd"));
    s.momentum = static_cast<float>(cfg.f64("momentum"));
    return s;
}

// Group per-identity sample indices for a training view.
std::vector<std::vector<std::size_t>> group_by_identity(const std::vector<std::uint32_t>& labels,
                                                        std::size_t n_identities) {
    std::vector<std::vector<std::size_t>> groups(n_identities);
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
    return groups;
}

FeatureBuffer<float> buffer_from_features(const std::vector<Array<float>>& feats,
                                          const std::vector<std::vector<std::size_t>>& groups,
                                          std::size_t dim, Modality modality, bool renorm) {
    std::vector<std::vector<Array<float>>> per_identity(groups.size());
    for (std::size_t id = 0; id < groups.size(); ++id) {
        for (std::size_t idx : groups[id]) per_identity[id].push_back(feats[idx]);
    }
    return init_buffer(per_identity, dim, modality, renorm);
}

struct PairKey {
    std::size_t text, image;
    bool operator<(const PairKey& o) const { return text < o.text || (text == o.text && image < o.image); }
};

// Strict copy of the encoder blocks out of a stage-1 checkpoint.
void copy_encoder_params(ParamSet<float>& into, const Checkpoint& stage1) {
    for (std::size_t i = 0; i < into.size(); ++i) {
        auto& entry = into.entry(i);
        if (entry.name.rfind("enc.", 0) != 0) continue;
        const Array<float>& src = stage1.param(entry.name);
        if (src.shape != entry.value.shape) {
            throw CheckpointError("parameter '" + entry.name + "' shape mismatch: checkpoint " +
                                  src.shape_string() + " vs model " + entry.value.shape_string());
        }
        entry.value = src;
    }
}

Var<float> stage2_confidence_node(Tape<float>& tape, const std::vector<Var<float>>& pv,
                                  const Stage2Model& model, const SampleRecord* text,
                                  const SampleRecord* image) {
    ImageEncoding<float> ie = encode_image(tape, pv, model.enc_ids, image->image, model.enc_dims);
    TextEncoding<float> te = encode_text(tape, pv, model.enc_ids, text->text, model.enc_dims);
    std::vector<Var<float>> gated;
    if (model.variant.no_spa) {
        Var<float> uniform = tape.mean(ie.regions);
        gated.assign(te.states.size(), uniform);
    } else {
        auto rows = spatial_attention(tape, pv, model.coa_ids.spa, te.states, ie.regions);
        gated = gate_regions(tape, rows, ie.regions);
    }
    auto joint = build_joint(tape, te.states, gated);
    return match_confidence(tape, pv, model.coa_ids, joint, model.coa_dims);
}

double pair_confidence(const Stage2Model& model, const SampleRecord* text, const SampleRecord* image) {
    Tape<float> tape;
    auto pv = bind_params(tape, model.params, false);
    Var<float> c = stage2_confidence_node(tape, pv, model, text, image);
    g_pair_evals.fetch_add(1, std::memory_order_relaxed);
    return static_cast<double>(tape.value(c).v[0]);
}

}  // namespace

EncoderDims encoder_dims_from(const RunConfig& cfg) {
    EncoderDims d;
    d.vocab = static_cast<std::size_t>(cfg.i64("vocab"));
    d.embed = static_cast<std::size_t>(cfg.i64("dim_embed"));
    d.hidden = static_cast<std::size_t>(cfg.i64("dim_hidden"));
    d.channels = static_cast<std::size_t>(cfg.i64("channels"));
    d.region = static_cast<std::size_t>(cfg.i64("dim_region"));
    d.grid = static_cast<std::size_t>(cfg.i64("grid"));
    d.joint = static_cast<std::size_t>(cfg.i64("dim_joint"));
    return d;
}

CoattentionDims coattention_dims_from(const RunConfig& cfg) {
    CoattentionDims d;
    d.region = static_cast<std::size_t>(cfg.i64("dim_region"));
    d.hidden = static_cast<std::size_t>(cfg.i64("dim_hidden"));
    d.attn = static_cast<std::size_t>(cfg.i64("attn_dim"));
    d.importance = static_cast<std::size_t>(cfg.i64("importance_dim"));
    d.pre = static_cast<std::size_t>(cfg.i64("pre_dim"));
    d.decoder = static_cast<std::size_t>(cfg.i64("decoder_dim"));
    d.head = static_cast<std::size_t>(cfg.i64("head_dim"));
    d.steps = static_cast<std::size_t>(cfg.i64("decoder_steps"));
    if (d.steps < 1) throw ConfigError("decoder_steps must be >= 1");
    return d;
}

CmceConfig<float> cmce_config_from(const RunConfig& cfg) {
    CmceConfig<float> c;
    c.sigma_v = static_cast<float>(cfg.f64("sigma_v"));
    c.sigma_s = static_cast<float>(cfg.f64("sigma_s"));
    c.batch_identities = static_cast<std::size_t>(cfg.i64("batch_identities"));
    c.alpha = static_cast<float>(cfg.f64("buffer_alpha"));
    c.renormalize_rows = cfg.flag("buffer_renorm");
    if (!(c.sigma_v > 0) || !(c.sigma_s > 0)) throw ConfigError("temperatures must be positive");
    if (!(c.alpha > 0) || c.alpha > 1) throw ConfigError("buffer_alpha must be in (0,1]");
    if (c.batch_identities < 1) throw ConfigError("batch_identities must be >= 1");
    return c;
}

Stage1Model make_stage1_model(const RunConfig& cfg) {
    Stage1Model m;
    m.dims = encoder_dims_from(cfg);
    m.ids = add_encoder_params(m.params, m.dims);
    return m;
}

Stage2Model make_stage2_model(const RunConfig& cfg, Stage2Variant variant) {
    Stage2Model m;
    m.enc_dims = encoder_dims_from(cfg);
    m.coa_dims = coattention_dims_from(cfg);
    m.variant = variant;
    m.enc_ids = add_encoder_params(m.params, m.enc_dims);
    m.coa_ids = add_coattention_params(m.params, m.coa_dims, variant);
    return m;
}

Stage1Model stage1_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "stage1") throw CheckpointError("expected a stage-1 checkpoint, found kind '" + ck.kind + "'");
    Stage1Model m = make_stage1_model(RunConfig::from_map(ck.config));
    fill_params(m.params, ck);
    return m;
}

Stage2Model stage2_from_checkpoint(const Checkpoint& ck) {
    if (ck.kind != "stage2") throw CheckpointError("expected a stage-2 checkpoint, found kind '" + ck.kind + "'");
    RunConfig cfg = RunConfig::from_map(ck.config);
    Stage2Variant variant;
    variant.no_sma = cfg.flag("no_sma");
    variant.no_spa = cfg.flag("no_spa");
    Stage2Model m = make_stage2_model(cfg, variant);
    fill_params(m.params, ck);
    return m;
}

std::vector<Array<float>> encode_image_features(const Stage1Model& model,
                                                const std::vector<const SampleRecord*>& records) {
    std::vector<Array<float>> out(records.size());
    parallel_for(records.size(), [&](std::size_t i) {
        Tape<float> tape;
        auto pv = bind_params(tape, model.params, false);
        out[i] = tape.value(encode_image(tape, pv, model.ids, records[i]->image, model.dims).pooled);
    });
    return out;
}

std::vector<Array<float>> encode_text_features(const Stage1Model& model,
                                               const std::vector<const SampleRecord*>& records) {
    std::vector<Array<float>> out(records.size());
    parallel_for(records.size(), [&](std::size_t i) {
        Tape<float> tape;
        auto pv = bind_params(tape, model.params, false);
        out[i] = tape.value(encode_text(tape, pv, model.ids, records[i]->text, model.dims).final);
    });
    return out;
}

void LossTrace::save_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write loss trace: " + path);
    f << "step,loss\n";
    char buf[64];
    for (const auto& [step, loss] : entries) {
        std::snprintf(buf, sizeof(buf), "%.8f", loss);
        f << step << "," << buf << "\n";
    }
}

Stage1Bundle train_stage1(const Dataset& data, const RunConfig& cfg, std::uint64_t seed) {
    IdentityView view = build_identity_view(data, Split::train, cfg.flag("no_id"));
    if (view.images.empty() || view.texts.empty()) throw DatasetError("training split is empty");

    Stage1Model model = make_stage1_model(cfg);
    Rng rng(seed);
    model.params.init_uniform(rng, kInitLo, kInitHi);

    CmceConfig<float> cc = cmce_config_from(cfg);
    std::size_t n_ids = view.n_identities;
    std::size_t batch_n = std::min(cc.batch_identities, n_ids);

    auto img_groups = group_by_identity(view.image_identity, n_ids);
    auto txt_groups = group_by_identity(view.text_identity, n_ids);

    // Buffers start as per-identity feature averages under the fresh encoders.
    auto img_feats = encode_image_features(model, view.images);
    auto txt_feats = encode_text_features(model, view.texts);
    FeatureBuffer<float> textual =
        buffer_from_features(txt_feats, txt_groups, model.dims.joint, Modality::textual, cc.renormalize_rows);
    FeatureBuffer<float> visual =
        buffer_from_features(img_feats, img_groups, model.dims.joint, Modality::visual, cc.renormalize_rows);

    Optimizer<float> opt(model.params, optimizer_settings(cfg));
    LossTrace trace;

    std::int64_t epochs = cfg.i64("epochs_stage1");
    std::vector<std::uint32_t> order(n_ids);
    std::iota(order.begin(), order.end(), 0u);
    std::uint64_t step = 0;

    for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < n_ids; start += batch_n) {
            std::size_t end = std::min(n_ids, start + batch_n);

            Tape<float> tape;
            auto pv = bind_params(tape, model.params, true);
            std::vector<Var<float>> v_vars, s_vars;
            std::vector<CmceSample<float>> batch_v, batch_s;
            std::vector<std::size_t> sampled_ids;
            for (std::size_t i = start; i < end; ++i) {
                std::uint32_t id = order[i];
                const auto& imgs = img_groups[id];
                const auto& txts = txt_groups[id];
                if (imgs.empty() || txts.empty()) {
                    throw DatasetError("identity " + std::to_string(id) + " lacks samples in one modality");
                }
                std::size_t ii = imgs.size() == 1 ? imgs[0] : imgs[rng.below(imgs.size())];
                std::size_t ti = txts.size() == 1 ? txts[0] : txts[rng.below(txts.size())];

                auto ie = encode_image(tape, pv, model.ids, view.images[ii]->image, model.dims);
                auto te = encode_text(tape, pv, model.ids, view.texts[ti]->text, model.dims);
                v_vars.push_back(ie.pooled);
                s_vars.push_back(te.final);
                batch_v.push_back({tape.value(ie.pooled), id});
                batch_s.push_back({tape.value(te.final), id});
                sampled_ids.push_back(id);
            }

            double loss = static_cast<double>(cmce_loss(batch_v, batch_s, textual, visual, cc));
            if (!std::isfinite(loss)) {
                throw NumericError("stage-1 loss diverged at step " + std::to_string(step));
            }
            trace.entries.emplace_back(step, loss);

            // Closed-form CMCE gradients seed the backward pass into encoders.
            CmceGradients<float> grads = cmce_gradients(batch_v, batch_s, textual, visual, cc);
            for (std::size_t i = 0; i < v_vars.size(); ++i) {
                tape.seed(v_vars[i], grads.d_visual[i]);
                tape.seed(s_vars[i], grads.d_textual[i]);
            }
            tape.backward();
            auto pgrads = collect_grads(tape, model.params, pv);
            opt.step(model.params, pgrads);

            // Buffers absorb this step's features after the parameter update;
            // single-sample identities are overwritten outright.
            for (std::size_t i = 0; i < sampled_ids.size(); ++i) {
                std::size_t id = sampled_ids[i];
                float a_t = textual.sample_count(id) <= 1 ? 1.0f : cc.alpha;
                float a_v = visual.sample_count(id) <= 1 ? 1.0f : cc.alpha;
                textual.update(id, batch_s[i].feature, a_t);
                visual.update(id, batch_v[i].feature, a_v);
            }
            ++step;
        }
    }

    return Stage1Bundle{std::move(model), std::move(textual), std::move(visual), std::move(trace)};
}

std::vector<RankedList> rank_by_affinity(const std::vector<Array<float>>& query_feats,
                                         const std::vector<std::uint32_t>& query_ids,
                                         const std::vector<Array<float>>& gallery_feats,
                                         const std::vector<std::uint32_t>& gallery_ids,
                                         Direction direction) {
    if (gallery_feats.empty()) throw InputError("retrieval needs a non-empty gallery");
    if (query_feats.size() != query_ids.size() || gallery_feats.size() != gallery_ids.size()) {
        throw ShapeError("feature/identity list size mismatch");
    }
    std::vector<RankedList> lists(query_feats.size());
    parallel_for(query_feats.size(), [&](std::size_t q) {
        RankedList& list = lists[q];
        list.query = q;
        list.query_identity = query_ids[q];
        list.direction = direction;
        list.candidates.resize(gallery_feats.size());
        for (std::size_t g = 0; g < gallery_feats.size(); ++g) {
            list.candidates[g] =
                RankedCandidate{g, gallery_ids[g], static_cast<double>(dot(query_feats[q], gallery_feats[g]))};
        }
        std::stable_sort(list.candidates.begin(), list.candidates.end(),
                         [](const RankedCandidate& a, const RankedCandidate& b) { return a.score > b.score; });
    });
    return lists;
}

std::vector<RankedList> retrieve_stage1(const Stage1Model& model,
                                        const std::vector<const SampleRecord*>& queries,
                                        const std::vector<const SampleRecord*>& gallery,
                                        Direction direction) {
    if (gallery.empty()) throw InputError("retrieval needs a non-empty gallery");
    bool t2i = direction == Direction::text_to_image;
    auto query_feats = t2i ? encode_text_features(model, queries) : encode_image_features(model, queries);
    auto gallery_feats = t2i ? encode_image_features(model, gallery) : encode_text_features(model, gallery);
    std::vector<std::uint32_t> query_ids, gallery_ids;
    for (const SampleRecord* r : queries) query_ids.push_back(r->id);
    for (const SampleRecord* r : gallery) gallery_ids.push_back(r->id);
    return rank_by_affinity(query_feats, query_ids, gallery_feats, gallery_ids, direction);
}

std::vector<MatchPair> screen_topk(const std::vector<RankedList>& ranked, std::size_t k) {
    if (k < 1) throw ConfigError("screening needs k >= 1");
    std::vector<MatchPair> pairs;
    pairs.reserve(ranked.size() * k);
    for (const RankedList& list : ranked) {
        if (k > list.candidates.size()) {
            throw ConfigError("screening k=" + std::to_string(k) + " exceeds gallery size " +
                              std::to_string(list.candidates.size()));
        }
        for (std::size_t i = 0; i < k; ++i) {
            const RankedCandidate& c = list.candidates[i];
            MatchPair p;
            if (list.direction == Direction::text_to_image) {
                p.text_index = list.query;
                p.text_identity = list.query_identity;
                p.image_index = c.item;
                p.image_identity = c.identity;
            } else {
                p.image_index = list.query;
                p.image_identity = list.query_identity;
                p.text_index = c.item;
                p.text_identity = c.identity;
            }
            p.target = identities_match(p) ? 1.0 : 0.0;
            pairs.push_back(p);
        }
    }
    return pairs;
}

Stage2Bundle train_stage2(const Dataset& data, const RunConfig& cfg, std::uint64_t seed,
                          const Stage2Options& options, const Checkpoint* stage1) {
    IdentityView view = build_identity_view(data, Split::train, options.no_id);
    if (view.images.empty() || view.texts.empty()) throw DatasetError("training split is empty");

    Stage2Model model = make_stage2_model(cfg, options.variant);
    Rng rng(seed);
    model.params.init_uniform(rng, kInitLo, kInitHi);

    std::vector<std::uint32_t> text_ids = view.text_identity;
    std::vector<std::uint32_t> image_ids = view.image_identity;

    std::vector<MatchPair> pos_pool, neg_pool;
    if (!options.no_stage1) {
        if (!stage1) throw InputError("stage-2 training needs a stage-1 checkpoint (or --no-stage1)");
        Stage1Model s1 = stage1_from_checkpoint(*stage1);
        copy_encoder_params(model.params, *stage1);

        // Hard pairs: each sample's stage-1 top-K from the other modality.
        auto t_feats = encode_text_features(s1, view.texts);
        auto i_feats = encode_image_features(s1, view.images);
        std::size_t k = static_cast<std::size_t>(cfg.i64("screen_k"));
        auto t2i = rank_by_affinity(t_feats, text_ids, i_feats, image_ids, Direction::text_to_image);
        auto i2t = rank_by_affinity(i_feats, image_ids, t_feats, text_ids, Direction::image_to_text);
        auto pairs_a = screen_topk(t2i, std::min(k, view.images.size()));
        auto pairs_b = screen_topk(i2t, std::min(k, view.texts.size()));
        std::set<PairKey> seen;
        for (const auto& vec : {pairs_a, pairs_b}) {
            for (const MatchPair& p : vec) {
                if (!seen.insert(PairKey{p.text_index, p.image_index}).second) continue;
                (p.target > 0.5 ? pos_pool : neg_pool).push_back(p);
            }
        }
    } else {
        // No screening: every matching pair is a positive, everything else is
        // the negative pool.
        for (std::size_t t = 0; t < view.texts.size(); ++t) {
            for (std::size_t i = 0; i < view.images.size(); ++i) {
                MatchPair p;
                p.text_index = t;
                p.image_index = i;
                p.text_identity = text_ids[t];
                p.image_identity = image_ids[i];
                p.target = identities_match(p) ? 1.0 : 0.0;
                (p.target > 0.5 ? pos_pool : neg_pool).push_back(p);
            }
        }
    }
    if (pos_pool.empty()) throw DatasetError("no positive pairs in the stage-2 training stream");

    Optimizer<float> opt(model.params, optimizer_settings(cfg));
    LossTrace trace;

    std::size_t batch = std::max<std::int64_t>(1, cfg.i64("batch_pairs"));
    double pos_fraction = cfg.f64("pos_fraction");
    if (pos_fraction <= 0 || pos_fraction > 1) throw ConfigError("pos_fraction must be in (0,1]");
    std::size_t pos_per_batch = std::max<std::size_t>(1, static_cast<std::size_t>(batch * pos_fraction));

    std::uint64_t step = 0;
    auto run_phase = [&](std::int64_t epochs, bool joint) {
        auto trainable = [joint](const ParamSet<float>::Entry& e) {
            return joint || e.name.rfind("coa.", 0) == 0;
        };
        for (std::int64_t epoch = 0; epoch < epochs; ++epoch) {
            rng.shuffle(pos_pool);
            if (!neg_pool.empty()) rng.shuffle(neg_pool);
            std::size_t neg_cursor = 0;
            for (std::size_t p0 = 0; p0 < pos_pool.size(); p0 += pos_per_batch) {
                std::vector<const MatchPair*> batch_pairs;
                for (std::size_t i = p0; i < std::min(pos_pool.size(), p0 + pos_per_batch); ++i) {
                    batch_pairs.push_back(&pos_pool[i]);
                }
                while (batch_pairs.size() < batch && !neg_pool.empty()) {
                    batch_pairs.push_back(&neg_pool[neg_cursor]);
                    neg_cursor = (neg_cursor + 1) % neg_pool.size();
                }

                Tape<float> tape;
                auto pv = bind_params(tape, model.params, true);
                std::vector<Var<float>> confs;
                std::vector<float> targets;
                for (const MatchPair* p : batch_pairs) {
                    confs.push_back(stage2_confidence_node(tape, pv, model, view.texts[p->text_index],
                                                           view.images[p->image_index]));
                    targets.push_back(static_cast<float>(p->target));
                }
                Var<float> loss = bce_loss_node(tape, confs, targets);
                double loss_value = static_cast<double>(tape.value(loss).v[0]);
                if (!std::isfinite(loss_value)) {
                    throw NumericError("stage-2 loss diverged at step " + std::to_string(step));
                }
                trace.entries.emplace_back(step, loss_value);
                tape.backward_scalar(loss);
                auto grads = collect_grads(tape, model.params, pv);
                opt.step(model.params, grads, trainable);
                ++step;
            }
        }
    };

    run_phase(cfg.i64("epochs_stage2_frozen"), false);
    run_phase(cfg.i64("epochs_stage2_joint"), true);

    return Stage2Bundle{std::move(model), std::move(trace)};
}

std::vector<double> score_pairs(const Stage2Model& model, const std::vector<const SampleRecord*>& texts,
                                const std::vector<const SampleRecord*>& images,
                                const std::vector<MatchPair>& pairs) {
    std::vector<double> confidences(pairs.size());
    parallel_for(pairs.size(), [&](std::size_t i) {
        confidences[i] = pair_confidence(model, texts[pairs[i].text_index], images[pairs[i].image_index]);
    });
    return confidences;
}

std::uint64_t pair_eval_counter() { return g_pair_evals.load(std::memory_order_relaxed); }

std::vector<RankedList> rerank(const std::vector<RankedList>& ranked, std::size_t k,
                               const Stage2Model& model, const std::vector<const SampleRecord*>& texts,
                               const std::vector<const SampleRecord*>& images) {
    if (k < 1) throw ConfigError("rerank needs k >= 1");
    for (const RankedList& list : ranked) {
        if (k > list.candidates.size()) {
            throw ConfigError("rerank k=" + std::to_string(k) + " exceeds candidate count " +
                              std::to_string(list.candidates.size()));
        }
    }
    std::vector<RankedList> out = ranked;
    parallel_for(out.size(), [&](std::size_t q) {
        RankedList& list = out[q];
        for (std::size_t i = 0; i < list.candidates.size(); ++i) {
            RankedCandidate& c = list.candidates[i];
            if (i < k) {
                const SampleRecord* text = list.direction == Direction::text_to_image
                                               ? texts[list.query]
                                               : texts[c.item];
                const SampleRecord* image = list.direction == Direction::text_to_image
                                                ? images[c.item]
                                                : images[list.query];
                c.score = pair_confidence(model, text, image);
            } else {
                c.score -= 2.0;  // keep the whole list non-increasing
            }
        }
        std::stable_sort(list.candidates.begin(), list.candidates.begin() + static_cast<std::ptrdiff_t>(k),
                         [](const RankedCandidate& a, const RankedCandidate& b) { return a.score > b.score; });
    });
    return out;
}

std::vector<RankedList> rescore_full(const Stage2Model& model,
                                     const std::vector<const SampleRecord*>& texts,
                                     const std::vector<const SampleRecord*>& images,
                                     const std::vector<std::uint32_t>& text_ids,
                                     const std::vector<std::uint32_t>& image_ids) {
    if (images.empty()) throw InputError("retrieval needs a non-empty gallery");
    std::vector<RankedList> lists(texts.size());
    parallel_for(texts.size(), [&](std::size_t q) {
        RankedList& list = lists[q];
        list.query = q;
        list.query_identity = text_ids[q];
        list.direction = Direction::text_to_image;
        list.candidates.resize(images.size());
        for (std::size_t g = 0; g < images.size(); ++g) {
            list.candidates[g] = RankedCandidate{g, image_ids[g], pair_confidence(model, texts[q], images[g])};
        }
        std::stable_sort(list.candidates.begin(), list.candidates.end(),
                         [](const RankedCandidate& a, const RankedCandidate& b) { return a.score > b.score; });
    });
    return lists;
}

namespace {

struct ClassFeatures {
    std::vector<std::uint32_t> class_ids;       // ascending
    std::vector<Array<float>> features;         // fused, unit-norm
    std::map<std::uint32_t, std::vector<std::size_t>> members;  // class -> text indices
};

ClassFeatures fuse_text_by_class(const Stage1Model& model, const std::vector<const SampleRecord*>& texts) {
    if (texts.empty()) throw DatasetError("no sentences to fuse");
    auto feats = encode_text_features(model, texts);
    ClassFeatures out;
    for (std::size_t i = 0; i < texts.size(); ++i) out.members[texts[i]->id].push_back(i);
    for (const auto& [cls, idxs] : out.members) {
        Array<float> mean({feats[0].numel()});
        for (std::size_t i : idxs) {
            for (std::size_t k = 0; k < mean.numel(); ++k) mean.v[k] += feats[i].v[k];
        }
        for (float& x : mean.v) x /= static_cast<float>(idxs.size());
        float n = l2_norm(mean);
        if (!(n > 0)) throw NumericError("fused class feature has zero norm");
        for (float& x : mean.v) x /= n;
        out.class_ids.push_back(cls);
        out.features.push_back(std::move(mean));
    }
    return out;
}

}  // namespace

std::vector<RankedList> per_class_text_to_image(const Stage1Model& model,
                                                const std::vector<const SampleRecord*>& texts,
                                                const std::vector<const SampleRecord*>& images) {
    ClassFeatures classes = fuse_text_by_class(model, texts);
    auto gallery_feats = encode_image_features(model, images);
    std::vector<std::uint32_t> gallery_ids;
    for (const SampleRecord* r : images) gallery_ids.push_back(r->id);
    auto lists = rank_by_affinity(classes.features, classes.class_ids, gallery_feats, gallery_ids,
                                  Direction::text_to_image);
    return lists;
}

std::vector<RankedList> image_to_text_retrieve(const Stage1Model& model,
                                               const std::vector<const SampleRecord*>& images,
                                               const std::vector<const SampleRecord*>& texts) {
    ClassFeatures classes = fuse_text_by_class(model, texts);
    auto query_feats = encode_image_features(model, images);
    std::vector<std::uint32_t> query_ids;
    for (const SampleRecord* r : images) query_ids.push_back(r->id);
    return rank_by_affinity(query_feats, query_ids, classes.features, classes.class_ids,
                            Direction::image_to_text);
}

std::vector<MetricRecord> evaluate(const Dataset& data, const RunConfig& cfg, const Stage1Model& stage1,
                                   const Stage2Model* stage2, const EvalOptions& options) {
    auto texts = data.split_items(options.split, Modality::textual);
    auto images = data.split_items(options.split, Modality::visual);
    if (texts.empty() || images.empty()) {
        throw DatasetError(std::string("split '") + split_name(options.split) + "' is empty");
    }

    std::vector<MetricRecord> records;
    const std::string split = split_name(options.split);
    auto add = [&](const std::string& metric, double value, const std::string& variant) {
        records.push_back(MetricRecord{metric, value, split, variant, options.seed});
    };

    auto lists = retrieve_stage1(stage1, texts, images, Direction::text_to_image);
    add("t2i_top1", topk_accuracy(lists, 1), "stage1");
    if (images.size() >= 10) add("t2i_top10", topk_accuracy(lists, 10), "stage1");

    std::size_t cutoff = static_cast<std::size_t>(cfg.i64("ap_cutoff"));
    auto class_lists = per_class_text_to_image(stage1, texts, images);
    add("t2i_ap@" + std::to_string(cutoff), 100.0 * ap_at_cutoff(class_lists, cutoff), "stage1");

    auto i2t = image_to_text_retrieve(stage1, images, texts);
    add("i2t_top1", topk_accuracy(i2t, 1), "stage1");

    if (stage2 && options.rerank_k > 0) {
        std::size_t k = options.rerank_k;
        auto reranked = rerank(lists, k, *stage2, texts, images);
        add("t2i_top1", topk_accuracy(reranked, 1), options.variant);
        if (images.size() >= 10) add("t2i_top10", topk_accuracy(reranked, 10), options.variant);

        // Class-level reranking: rescore each class's top-K by the mean
        // confidence over the class's sentences.
        ClassFeatures classes = fuse_text_by_class(stage1, texts);
        auto class_reranked = class_lists;
        for (std::size_t q = 0; q < class_reranked.size(); ++q) {
            RankedList& list = class_reranked[q];
            std::size_t kk = std::min(k, list.candidates.size());
            const auto& members = classes.members.at(list.query_identity);
            for (std::size_t i = 0; i < list.candidates.size(); ++i) {
                if (i < kk) {
                    double acc = 0;
                    for (std::size_t t : members) {
                        acc += pair_confidence(*stage2, texts[t], images[list.candidates[i].item]);
                    }
                    list.candidates[i].score = acc / static_cast<double>(members.size());
                } else {
                    list.candidates[i].score -= 2.0;
                }
            }
            std::stable_sort(list.candidates.begin(), list.candidates.begin() + static_cast<std::ptrdiff_t>(kk),
                             [](const RankedCandidate& a, const RankedCandidate& b) { return a.score > b.score; });
        }
        add("t2i_ap@" + std::to_string(cutoff), 100.0 * ap_at_cutoff(class_reranked, cutoff), options.variant);
    }
    return records;
}

}  // namespace xmatch

#include "xmatch/checkpoint.hpp"

#include <atomic>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "xmatch/errors.hpp"

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float32; add byte swapping for this platform");

namespace xmatch {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::atomic<std::uint64_t> g_load_count{0};

void write_floats(std::ofstream& out, const float* data, std::size_t count) {
    out.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(float)));
}

json buffer_manifest(const FeatureBuffer<float>& buf, std::size_t offset) {
    json b;
    b["rows"] = buf.identities();
    b["dim"] = buf.dim();
    b["offset"] = offset;
    b["renormalize"] = buf.renormalizes();
    std::vector<std::uint32_t> counts(buf.identities());
    for (std::size_t i = 0; i < buf.identities(); ++i) counts[i] = buf.sample_count(i);
    b["counts"] = counts;
    return b;
}

std::unique_ptr<FeatureBuffer<float>> buffer_from_manifest(const json& b, Modality modality,
                                                           const std::vector<float>& blob,
                                                           std::size_t blob_floats) {
    std::size_t rows = b.at("rows").get<std::size_t>();
    std::size_t dim = b.at("dim").get<std::size_t>();
    std::size_t offset = b.at("offset").get<std::size_t>();
    bool renorm = b.at("renormalize").get<bool>();
    auto counts = b.at("counts").get<std::vector<std::uint32_t>>();
    if (counts.size() != rows) throw CheckpointError("buffer count list does not match row count");
    if (offset % sizeof(float) != 0 || offset / sizeof(float) + rows * dim > blob_floats) {
        throw CheckpointError("buffer offsets exceed blob size");
    }
    auto buf = std::make_unique<FeatureBuffer<float>>(rows, dim, modality, renorm);
    Array<float> row({dim});
    for (std::size_t i = 0; i < rows; ++i) {
        std::memcpy(row.v.data(), blob.data() + offset / sizeof(float) + i * dim, dim * sizeof(float));
        buf->set_row(i, row, counts[i]);
    }
    return buf;
}

}  // namespace

const Array<float>& Checkpoint::param(const std::string& name) const {
    for (const auto& [n, a] : params) {
        if (n == name) return a;
    }
    throw CheckpointError("checkpoint has no parameter '" + name + "'");
}

void save_checkpoint(const std::string& dir, const std::string& kind, const std::string& variant,
                     const std::map<std::string, std::string>& config, const ParamSet<float>& params,
                     const FeatureBuffer<float>* textual, const FeatureBuffer<float>* visual) {
    fs::create_directories(dir);
    json manifest;
    manifest["version"] = kCheckpointVersion;
    manifest["kind"] = kind;
    manifest["variant"] = variant;
    manifest["config"] = config;

    std::ofstream blob(fs::path(dir) / "params.bin", std::ios::binary);
    if (!blob) throw InputError("cannot write checkpoint blob in " + dir);

    std::size_t offset = 0;
    json directory = json::array();
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& entry = params.entry(i);
        directory.push_back({{"name", entry.name}, {"shape", entry.value.shape}, {"offset", offset}});
        write_floats(blob, entry.value.v.data(), entry.value.numel());
        offset += entry.value.numel() * sizeof(float);
    }
    manifest["params"] = std::move(directory);

    if (textual || visual) {
        if (!textual || !visual) throw StateError("stage-1 checkpoints need both feature buffers");
        json buffers;
        Array<float> t = textual->as_matrix();
        buffers["textual"] = buffer_manifest(*textual, offset);
        write_floats(blob, t.v.data(), t.numel());
        offset += t.numel() * sizeof(float);
        Array<float> v = visual->as_matrix();
        buffers["visual"] = buffer_manifest(*visual, offset);
        write_floats(blob, v.v.data(), v.numel());
        offset += v.numel() * sizeof(float);
        manifest["buffers"] = std::move(buffers);
    }
    manifest["blob_bytes"] = offset;
    blob.close();
    if (!blob) throw InputError("failed writing checkpoint blob in " + dir);

    std::ofstream mf(fs::path(dir) / "manifest.json", std::ios::binary);
    if (!mf) throw InputError("cannot write checkpoint manifest in " + dir);
    mf << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& dir) {
    fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream mf(mpath, std::ios::binary);
    if (!mf) throw CheckpointError("checkpoint not found: " + mpath.string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw CheckpointError("corrupt checkpoint manifest: " + std::string(e.what()));
    }
    int version = manifest.value("version", -1);
    if (version != kCheckpointVersion) {
        throw CheckpointError("checkpoint version mismatch: file has " + std::to_string(version) +
                              ", this build reads " + std::to_string(kCheckpointVersion));
    }

    std::ifstream blob_in(fs::path(dir) / "params.bin", std::ios::binary | std::ios::ate);
    if (!blob_in) throw CheckpointError("checkpoint blob missing in " + dir);
    std::size_t bytes = static_cast<std::size_t>(blob_in.tellg());
    if (bytes != manifest.at("blob_bytes").get<std::size_t>() || bytes % sizeof(float) != 0) {
        throw CheckpointError("checkpoint blob size " + std::to_string(bytes) +
                              " does not match manifest");
    }
    std::vector<float> blob(bytes / sizeof(float));
    blob_in.seekg(0);
    blob_in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
    if (!blob_in) throw CheckpointError("failed reading checkpoint blob in " + dir);

    Checkpoint ck;
    ck.kind = manifest.at("kind").get<std::string>();
    ck.variant = manifest.at("variant").get<std::string>();
    ck.config = manifest.at("config").get<std::map<std::string, std::string>>();

    std::size_t expected_offset = 0;
    for (const json& p : manifest.at("params")) {
        std::string name = p.at("name").get<std::string>();
        auto shape = p.at("shape").get<std::vector<std::size_t>>();
        std::size_t offset = p.at("offset").get<std::size_t>();
        if (offset != expected_offset) {
            throw CheckpointError("parameter '" + name + "' offset " + std::to_string(offset) +
                                  " does not tile the blob (expected " + std::to_string(expected_offset) +
                                  ")");
        }
        Array<float> a(shape);
        if (offset / sizeof(float) + a.numel() > blob.size()) {
            throw CheckpointError("parameter '" + name + "' extends past blob end");
        }
        std::memcpy(a.v.data(), blob.data() + offset / sizeof(float), a.numel() * sizeof(float));
        expected_offset = offset + a.numel() * sizeof(float);
        ck.params.emplace_back(std::move(name), std::move(a));
    }

    if (manifest.contains("buffers")) {
        ck.textual = buffer_from_manifest(manifest["buffers"].at("textual"), Modality::textual, blob,
                                          blob.size());
        ck.visual = buffer_from_manifest(manifest["buffers"].at("visual"), Modality::visual, blob,
                                         blob.size());
    } else if (expected_offset != bytes) {
        throw CheckpointError("blob has " + std::to_string(bytes - expected_offset) +
                              " unaccounted trailing bytes");
    }

    g_load_count.fetch_add(1, std::memory_order_relaxed);
    return ck;
}

void fill_params(ParamSet<float>& into, const Checkpoint& from, bool allow_missing) {
    std::map<std::string, const Array<float>*> by_name;
    for (const auto& [name, a] : from.params) by_name[name] = &a;
    for (std::size_t i = 0; i < into.size(); ++i) {
        auto& entry = into.entry(i);
        auto it = by_name.find(entry.name);
        if (it == by_name.end()) {
            if (allow_missing) continue;
            throw CheckpointError("checkpoint lacks parameter '" + entry.name + "'");
        }
        if (it->second->shape != entry.value.shape) {
            throw CheckpointError("parameter '" + entry.name + "' shape mismatch: checkpoint " +
                                  it->second->shape_string() + " vs model " + entry.value.shape_string());
        }
        entry.value = *it->second;
    }
}

std::uint64_t checkpoint_load_count() { return g_load_count.load(std::memory_order_relaxed); }

}  // namespace xmatch

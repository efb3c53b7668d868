#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace xmatch {

enum class Direction { text_to_image, image_to_text };

struct RankedCandidate {
    std::size_t item = 0;          // index into the gallery
    std::uint32_t identity = 0;
    double score = 0;
};

/// Retrieval result for one query: candidates sorted by non-increasing score,
/// ties broken by gallery index (stable), all candidates distinct.
struct RankedList {
    std::size_t query = 0;
    std::uint32_t query_identity = 0;
    Direction direction = Direction::text_to_image;
    std::vector<RankedCandidate> candidates;
};

void validate_ranked(const RankedList& list);

// Fraction of queries whose top k contains at least one correct-identity item.
double topk_accuracy(const std::vector<RankedList>& lists, std::size_t k);

// Per class, the fraction of correct-identity items among the first `cutoff`
// candidates; averaged over classes. Standard cutoff is 50, smaller values
// suit tiny desk-scale galleries.
double ap_at_cutoff(const std::vector<RankedList>& per_class_lists, std::size_t cutoff);

struct MetricRecord {
    std::string metric;
    double value = 0;
    std::string split;
    std::string variant;
    std::uint64_t seed = 0;
};

void write_report_json(const std::string& path, const std::vector<MetricRecord>& records);
void write_report_tsv(const std::string& path, const std::vector<MetricRecord>& records);

}  // namespace xmatch

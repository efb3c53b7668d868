#include "xmatch/metrics.hpp"

#include <cstdio>
#include <fstream>
#include <set>

#include "xmatch/errors.hpp"

#include <json.hpp>

namespace xmatch {

void validate_ranked(const RankedList& list) {
    std::set<std::size_t> seen;
    for (std::size_t i = 0; i < list.candidates.size(); ++i) {
        if (!seen.insert(list.candidates[i].item).second) {
            throw StateError("ranked list for query " + std::to_string(list.query) +
                             " repeats candidate " + std::to_string(list.candidates[i].item));
        }
        if (i > 0 && list.candidates[i].score > list.candidates[i - 1].score) {
            throw StateError("ranked list for query " + std::to_string(list.query) +
                             " has increasing scores at position " + std::to_string(i));
        }
    }
}

double topk_accuracy(const std::vector<RankedList>& lists, std::size_t k) {
    if (k < 1) throw ConfigError("top-k accuracy needs k >= 1");
    if (lists.empty()) throw InputError("top-k accuracy: no ranked lists");
    std::size_t hits = 0;
    for (const RankedList& list : lists) {
        if (k > list.candidates.size()) {
            throw ConfigError("k=" + std::to_string(k) + " exceeds ranked list length " +
                              std::to_string(list.candidates.size()));
        }
        validate_ranked(list);
        for (std::size_t i = 0; i < k; ++i) {
            if (list.candidates[i].identity == list.query_identity) {
                ++hits;
                break;
            }
        }
    }
    return static_cast<double>(hits) / static_cast<double>(lists.size());
}

double ap_at_cutoff(const std::vector<RankedList>& per_class_lists, std::size_t cutoff) {
    if (cutoff < 1) throw ConfigError("ap cutoff must be >= 1");
    if (per_class_lists.empty()) throw InputError("ap: no ranked lists");
    double total = 0;
    for (const RankedList& list : per_class_lists) {
        if (list.candidates.size() < cutoff) {
            throw ConfigError("gallery of " + std::to_string(list.candidates.size()) +
                              " is smaller than the ap cutoff " + std::to_string(cutoff) +
                              " (reduce ap_cutoff for tiny runs)");
        }
        validate_ranked(list);
        std::size_t matching = 0;
        for (std::size_t i = 0; i < cutoff; ++i) {
            if (list.candidates[i].identity == list.query_identity) ++matching;
        }
        total += static_cast<double>(matching) / static_cast<double>(cutoff);
    }
    return total / static_cast<double>(per_class_lists.size());
}

void write_report_json(const std::string& path, const std::vector<MetricRecord>& records) {
    nlohmann::json out = nlohmann::json::array();
    for (const MetricRecord& r : records) {
        out.push_back({{"metric", r.metric},
                       {"value", r.value},
                       {"split", r.split},
                       {"variant", r.variant},
                       {"seed", r.seed}});
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write report: " + path);
    f << out.dump(2) << "\n";
}

void write_report_tsv(const std::string& path, const std::vector<MetricRecord>& records) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot write report: " + path);
    f << "metric\tvalue\tsplit\tvariant\tseed\n";
    char buf[64];
    for (const MetricRecord& r : records) {
        std::snprintf(buf, sizeof(buf), "%.6f", r.value);
        f << r.metric << "\t" << buf << "\t" << r.split << "\t" << r.variant << "\t" << r.seed << "\n";
    }
}

}  // namespace xmatch

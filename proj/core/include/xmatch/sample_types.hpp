#pragma once

#include <cstdint>
#include <vector>

#include "xmatch/errors.hpp"

namespace xmatch {

enum class Modality { textual, visual };

inline const char* modality_name(Modality m) { return m == Modality::textual ? "textual" : "visual"; }

// Synthetic G x G grid of C-channel cells, row-major cells, channel-minor.
// Stands in for the raw images a pretrained CNN would normally consume.
struct ImageGrid {
    std::size_t grid = 0;
    std::size_t channels = 0;
    std::vector<float> values;  // grid*grid*channels scalars

    std::size_t cell_count() const { return grid * grid; }

    const float* cell(std::size_t l) const { return values.data() + l * channels; }

    void validate() const {
        if (values.size() != grid * grid * channels) {
            throw ShapeError("ImageGrid: " + std::to_string(values.size()) + " values for grid " +
                             std::to_string(grid) + ", channels " + std::to_string(channels));
        }
    }
};

struct TokenSequence {
    std::vector<std::uint32_t> tokens;
    std::uint32_t vocab = 0;

    void validate() const {
        if (tokens.empty()) throw InputError("TokenSequence: empty token list");
        for (std::uint32_t t : tokens) {
            if (t >= vocab) {
                throw InputError("TokenSequence: token " + std::to_string(t) + " outside vocabulary " +
                                 std::to_string(vocab));
            }
        }
    }
};

}  // namespace xmatch

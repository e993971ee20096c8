#pragma once

#include <cstdint>
#include <vector>

#include "mwp/corpus.hpp"

namespace mwp {

// Synthetic one- and two-step arithmetic word problems with rationales built
// from known programs, for desk-scale training and evaluation.
struct SynthConfig {
    size_t n = 1000;
    uint64_t seed = 7;
    double two_step_fraction = 0.35;
};

std::vector<Problem> gen_synth(const SynthConfig& cfg);

}  // namespace mwp

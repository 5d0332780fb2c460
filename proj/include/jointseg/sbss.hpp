#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "jointseg/data.hpp"
#include "jointseg/image.hpp"

namespace jointseg {

// One ranked image-GT pair: score is the composite quality of a predictor's
// map against the pair's ground truth (structure + enhanced-alignment +
// max-F + (1 - MAE), so it lives in [0, 4]).
struct ScoredPair {
    std::string pair_id;
    double score = 0.0;
};

enum class SampleVariant { top_k, bottom_k, random_k };
std::string to_string(SampleVariant v);
SampleVariant sample_variant_from_string(const std::string& s);

struct SamplingPlan {
    SampleVariant variant = SampleVariant::top_k;
    int64_t k = 0;
    uint64_t seed = 0;  // consumed by random_k only
};

// Maps a dataset entry to a prediction map of the mask's shape.
using Predictor = std::function<Image(const DatasetEntry&)>;

Predictor oracle_predictor();  // returns the ground truth itself (score 4)
Predictor checkpoint_predictor(const std::string& ckpt_path, const std::string& task = "");
Predictor map_directory_predictor(const std::string& dir);  // <dir>/<id>.pgm or .png

struct ScoreOutcome {
    std::vector<ScoredPair> scored;  // sorted by (score desc, id asc)
    std::vector<std::pair<std::string, std::string>> failed;  // (id, reason), id asc
};

// Scores every entry; a pair whose prediction cannot be produced or scored
// (shape mismatch, unreadable map, ...) lands in failed instead of aborting
// the run. Input order never affects the output.
ScoreOutcome score_dataset(const Dataset& ds, const Predictor& predictor);

// top_k: k highest (score desc, id asc); bottom_k: k lowest (score asc,
// id asc); random_k: k without replacement from the plan's seed, draw order.
std::vector<std::string> sample(const std::vector<ScoredPair>& scored, const SamplingPlan& plan);

// Restricts the source manifest to the given ids (sorted ascending) and
// writes it to out_path, rewriting data paths relative to the new location.
// Unknown ids abort with all offenders listed; nothing is written then.
void write_subset_manifest(const std::vector<std::string>& ids,
                           const std::string& source_manifest_path, const std::string& out_path);

std::string scores_to_json(const ScoreOutcome& outcome);

}  // namespace jointseg

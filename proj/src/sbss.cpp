#include "jointseg/sbss.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <memory>
#include <set>

#include "jointseg/checkpoint.hpp"
#include "jointseg/metrics.hpp"
#include "jointseg/rng.hpp"

namespace jointseg {

namespace fs = std::filesystem;

std::string to_string(SampleVariant v) {
    switch (v) {
        case SampleVariant::top_k: return "top";
        case SampleVariant::bottom_k: return "bottom";
        case SampleVariant::random_k: return "random";
    }
    throw ConfigError("invalid sample variant enum value");
}

SampleVariant sample_variant_from_string(const std::string& s) {
    if (s == "top") return SampleVariant::top_k;
    if (s == "bottom") return SampleVariant::bottom_k;
    if (s == "random") return SampleVariant::random_k;
    throw ConfigError("unknown sample variant '" + s + "' (want top|bottom|random)");
}

Predictor oracle_predictor() {
    return [](const DatasetEntry& e) { return e.mask; };
}

Predictor checkpoint_predictor(const std::string& ckpt_path, const std::string& task) {
    auto ck = std::make_shared<LoadedCheckpoint>(load_checkpoint(ckpt_path));
    std::string routed = task;
    if (routed.empty()) {
        const auto& tasks = ck->model.config().tasks;
        if (tasks.size() != 1)
            throw ConfigError(ckpt_path + " registers " + std::to_string(tasks.size()) +
                              " tasks; pick one explicitly");
        routed = tasks[0];
    }
    return [ck, routed](const DatasetEntry& e) {
        return image_from_tensor(ck->model.forward(to_tensor(e.image), routed));
    };
}

Predictor map_directory_predictor(const std::string& dir) {
    return [dir](const DatasetEntry& e) {
        for (const char* ext : {".pgm", ".png"}) {
            fs::path p = fs::path(dir) / (e.id + ext);
            if (fs::exists(p)) return read_image(p.string());
        }
        throw IoError("no prediction map for '" + e.id + "' under " + dir);
    };
}

ScoreOutcome score_dataset(const Dataset& ds, const Predictor& predictor) {
    ScoreOutcome out;
    for (const auto& e : ds.entries) {
        try {
            Image pred = predictor(e);
            out.scored.push_back({e.id, composite_score(pred, e.mask, TaskKind::salient)});
        } catch (const Error& err) {
            out.failed.emplace_back(e.id, err.what());
        }
    }
    std::sort(out.scored.begin(), out.scored.end(), [](const ScoredPair& a, const ScoredPair& b) {
        return a.score != b.score ? a.score > b.score : a.pair_id < b.pair_id;
    });
    std::sort(out.failed.begin(), out.failed.end());
    return out;
}

std::vector<std::string> sample(const std::vector<ScoredPair>& scored, const SamplingPlan& plan) {
    const int64_t n = int64_t(scored.size());
    if (plan.k < 1 || plan.k > n)
        throw ContractError("k must be in [1, " + std::to_string(n) + "], got " +
                            std::to_string(plan.k));
    std::set<std::string> ids;
    for (const auto& s : scored)
        if (!ids.insert(s.pair_id).second)
            throw ContractError("duplicate pair id '" + s.pair_id + "' in scored list");

    std::vector<ScoredPair> order(scored);
    std::vector<std::string> out;
    out.reserve(size_t(plan.k));
    switch (plan.variant) {
        case SampleVariant::top_k:
            std::sort(order.begin(), order.end(), [](const ScoredPair& a, const ScoredPair& b) {
                return a.score != b.score ? a.score > b.score : a.pair_id < b.pair_id;
            });
            break;
        case SampleVariant::bottom_k:
            std::sort(order.begin(), order.end(), [](const ScoredPair& a, const ScoredPair& b) {
                return a.score != b.score ? a.score < b.score : a.pair_id < b.pair_id;
            });
            break;
        case SampleVariant::random_k: {
            std::sort(order.begin(), order.end(),
                      [](const ScoredPair& a, const ScoredPair& b) { return a.pair_id < b.pair_id; });
            Rng rng = Rng::derive(plan.seed, "sample-random");
            for (int64_t i = 0; i < plan.k; ++i) {
                int64_t j = i + int64_t(rng.uniform_index(uint64_t(n - i)));
                std::swap(order[size_t(i)], order[size_t(j)]);
            }
            break;
        }
    }
    for (int64_t i = 0; i < plan.k; ++i) out.push_back(order[size_t(i)].pair_id);
    return out;
}

void write_subset_manifest(const std::vector<std::string>& ids,
                           const std::string& source_manifest_path, const std::string& out_path) {
    if (ids.empty()) throw ContractError("subset needs at least one id");
    Manifest src = read_manifest(source_manifest_path);
    std::set<std::string> want;
    for (const auto& id : ids)
        if (!want.insert(id).second) throw ContractError("duplicate id '" + id + "' in subset");

    std::map<std::string, const ManifestEntry*> by_id;
    for (const auto& e : src.entries) by_id[e.id] = &e;
    std::string unknown;
    int64_t unknown_count = 0;
    for (const auto& id : want)
        if (!by_id.count(id)) {
            unknown += "\n  " + id;
            ++unknown_count;
        }
    if (unknown_count > 0)
        throw ContractError(std::to_string(unknown_count) + " id(s) not in " +
                            source_manifest_path + ":" + unknown);

    const fs::path src_dir = fs::absolute(fs::path(source_manifest_path)).parent_path();
    const fs::path out_dir = fs::absolute(fs::path(out_path)).parent_path();
    auto rebase = [&](const std::string& rel) {
        if (rel.empty()) return rel;
        return fs::proximate(src_dir / rel, out_dir).generic_string();
    };

    Manifest sub;
    sub.task_kind = src.task_kind;
    for (const auto& id : want) {  // std::set iterates ascending
        ManifestEntry e = *by_id.at(id);
        e.image_path = rebase(e.image_path);
        e.mask_path = rebase(e.mask_path);
        e.extra_mask_path = rebase(e.extra_mask_path);
        sub.entries.push_back(std::move(e));
    }
    write_manifest(sub, out_path);
}

std::string scores_to_json(const ScoreOutcome& outcome) {
    nlohmann::json j;
    j["count"] = outcome.scored.size();
    j["scores"] = nlohmann::json::array();
    for (const auto& s : outcome.scored)
        j["scores"].push_back({{"id", s.pair_id}, {"score", s.score}});
    j["failed"] = nlohmann::json::array();
    for (const auto& [id, reason] : outcome.failed)
        j["failed"].push_back({{"id", id}, {"error", reason}});
    return j.dump(2) + "\n";
}

}  // namespace jointseg

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "jointseg/image.hpp"

namespace jointseg {

enum class TaskKind { salient, camouflaged };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

// One evaluation unit: a grayscale prediction in [0,1] against a strictly
// binary ground truth of the same shape, plus a stable id.
struct MaskPair {
    std::string id;
    Image pred;
    Image gt;
};

struct MetricValues {
    double mae = 0.0;
    double s_alpha = 0.0;
    double e_phi = 0.0;
    double f_beta_max = 0.0;
    double f_beta_weighted = 0.0;
    double composite = 0.0;  // s_alpha + e_phi + task-kind F + (1 - mae)
    bool degenerate = false;  // empty-gt convention was applied somewhere
};

struct MetricReport {
    TaskKind kind = TaskKind::salient;
    struct Row {
        std::string id;
        MetricValues values;
    };
    std::vector<Row> pairs;  // ascending id
    MetricValues aggregate;  // per-field means; degenerate = any pair degenerate
    int64_t count = 0;
};

// Individual metrics. All validate shapes (ShapeError), gt binarity and
// pred range (ContractError). `degenerate`, when non-null, is set to true if
// an empty-gt convention fired (never cleared).
//
// Determinism note: mae / f_measure_max / f_measure_weighted / e_measure_mean
// are bit-exactly invariant under a simultaneous horizontal flip of pred and
// gt. Where a result is a sum over a pixel population, the summands are
// accumulated in sorted value order, so any spatial permutation that
// preserves the multiset of summands cannot change the result.
double mae_metric(const Image& pred, const Image& gt);
// Max over 256 thresholds {0..255}/255 of (1+b2)PR/(b2*P+R), binarize pred>t.
double f_measure_max(const Image& pred, const Image& gt, double beta2 = 0.3,
                     bool* degenerate = nullptr);
// Margolin-style weighted F with the pinned sub-rules (see implementation).
double f_measure_weighted(const Image& pred, const Image& gt, double beta2 = 0.3,
                          bool* degenerate = nullptr);
// alpha*object + (1-alpha)*region structure similarity; clamped to [0,1].
double s_measure(const Image& pred, const Image& gt, double alpha = 0.5);
// Mean over 256 thresholds of the enhanced-alignment score, binarize pred>t.
double e_measure_mean(const Image& pred, const Image& gt);
// s_alpha + e_phi + F + (1 - mae); F is max-F for salient kind, weighted-F
// for camouflaged kind.
double composite_score(const Image& pred, const Image& gt, TaskKind kind,
                       bool* degenerate = nullptr);

MetricValues evaluate_pair(const Image& pred, const Image& gt, TaskKind kind);

// Fans out across pairs (threads <= 0 means hardware concurrency); results
// are slotted by index and aggregated in ascending id order, so the report is
// identical no matter the thread count.
MetricReport evaluate_pairs(std::vector<MaskPair> pairs, TaskKind kind, int threads = 0);

// Serialization for the eval command: JSON document and aligned text table.
std::string report_to_json(const MetricReport& report);
std::string report_to_table(const MetricReport& report);

}  // namespace jointseg

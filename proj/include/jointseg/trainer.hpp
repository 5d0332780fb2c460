#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "jointseg/data.hpp"
#include "jointseg/image.hpp"
#include "jointseg/metrics.hpp"
#include "jointseg/model.hpp"

namespace jointseg {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with lazily created per-parameter slots. step() consumes whatever
// gradient buffers backward() materialized and then drops them; parameters
// that received no gradient this step are untouched (their moments keep
// their update count, preserving bit-identity for never-trained parameters).
class Adam {
  public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    void step(JointModel& model, double lr);

    bool has_slot(const std::string& name) const { return slots_.count(name) != 0; }
    int64_t update_count(const std::string& name) const;
    const AdamConfig& config() const { return cfg_; }

  private:
    struct Slot {
        std::vector<double> m, v;
        int64_t t = 0;
    };
    std::map<std::string, Slot> slots_;
    AdamConfig cfg_;
};

// lr0 * (1 - iter/max_iter)^power: non-increasing, lr(0) = lr0, lr(max) = 0.
double poly_lr(double lr0, double power, int64_t iter, int64_t max_iter);

enum class TrainMode { scjoint, naive_joint, independent };
std::string to_string(TrainMode m);
TrainMode train_mode_from_string(const std::string& s);

// One task's mini-batch: images and masks are paired by index (augmentation
// already applied to both).
struct TaskBatch {
    std::string task_id;
    std::vector<Image> images;
    std::vector<Image> masks;
    double loss_weight = 1.0;
};

// The per-step loss graph before any update: one scalar loss per batch (mean
// structure-aware loss over its images) plus the weighted total. Built in a
// single graph so one backward() pass covers every contribution. Exposed
// separately from the step so tests can inspect gradients before the update.
struct StepGraph {
    std::vector<std::pair<std::string, Tensor>> per_task;
    Tensor total;
};
StepGraph build_step_graph(JointModel& model, const std::vector<TaskBatch>& batches);

struct StepLosses {
    std::map<std::string, double> per_task;
    double total = 0.0;
};

// Forward every batch through its task's routing, sum the weighted losses,
// backpropagate once, apply one Adam update. Throws NanAbortError with a
// diagnostic dump if any loss is non-finite.
StepLosses scjoint_step(JointModel& model, const std::vector<TaskBatch>& batches, Adam& opt,
                        double lr, int64_t step_index = -1);

struct TaskSpec {
    std::string task_id;
    std::string manifest;
    std::string val_manifest;  // empty: evaluate on the training set
    double loss_weight = 1.0;
};

struct TrainConfig {
    TrainMode mode = TrainMode::scjoint;
    std::vector<TaskSpec> tasks;
    ModelConfig model;  // .tasks is derived from mode + task list, not set here
    int64_t batch_size = 8;
    int64_t epochs = 0;  // exactly one of epochs/steps must be > 0
    int64_t steps = 0;
    double lr0 = 1e-4;
    double poly_power = 0.9;
    double flip_prob = 0.5;
    AdamConfig adam;
    uint64_t seed = 0;
    int64_t eval_limit = 0;  // cap entries per evaluation pass; 0 = all
    std::string out_dir;

    void validate() const;
};

TrainConfig train_config_from_json(const std::string& text);
std::string train_config_to_json(const TrainConfig& cfg);

// Mean loss + metric suite of one model/task routing over a dataset.
struct TaskEval {
    double loss = 0.0;
    MetricValues metrics;
    int64_t count = 0;
};
TaskEval evaluate_model(const JointModel& model, const std::string& routed_task, const Dataset& ds,
                        TaskKind kind, int64_t limit = 0);

struct EvalRecord {
    int64_t step = 0;
    int64_t epoch = 0;
    double lr = 0.0;
    std::vector<std::pair<std::string, TaskEval>> tasks;  // config order
};
using EvalHook = std::function<void(const EvalRecord&)>;

struct TrainResult {
    std::string checkpoint_path;
    std::string log_path;
    EvalRecord final_eval;
    int64_t steps_run = 0;
};

// Full training job: loads datasets, builds the model, runs the configured
// mode, appends one JSONL record per evaluation to <out_dir>/log.jsonl, and
// atomically rewrites <out_dir>/checkpoint.jnt each epoch.
TrainResult train(const TrainConfig& cfg, const EvalHook& hook = nullptr);

}  // namespace jointseg

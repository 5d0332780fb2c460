#include "jointseg/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "jointseg/checkpoint.hpp"
#include "jointseg/losses.hpp"

namespace jointseg {

namespace fs = std::filesystem;

// ---- optimizer ----

void Adam::step(JointModel& model, double lr) {
    for (auto& p : model.parameters()) {
        if (!p.value.has_grad()) continue;
        const auto& g = p.value.grad();
        Slot& s = slots_[p.name];
        if (s.m.empty()) {
            s.m.assign(g.size(), 0.0);
            s.v.assign(g.size(), 0.0);
        }
        s.t += 1;
        const double c1 = 1.0 - std::pow(cfg_.beta1, double(s.t));
        const double c2 = 1.0 - std::pow(cfg_.beta2, double(s.t));
        auto& w = p.value.mutable_data();
        for (size_t i = 0; i < w.size(); ++i) {
            s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g[i];
            s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
            w[i] -= lr * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + cfg_.eps);
        }
        p.value.zero_grad();
    }
}

int64_t Adam::update_count(const std::string& name) const {
    auto it = slots_.find(name);
    return it == slots_.end() ? 0 : it->second.t;
}

double poly_lr(double lr0, double power, int64_t iter, int64_t max_iter) {
    if (max_iter <= 0) throw ContractError("poly_lr needs max_iter > 0");
    iter = std::clamp<int64_t>(iter, 0, max_iter);
    return lr0 * std::pow(1.0 - double(iter) / double(max_iter), power);
}

// ---- modes ----

std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::scjoint: return "scjoint";
        case TrainMode::naive_joint: return "naive_joint";
        case TrainMode::independent: return "independent";
    }
    throw ConfigError("invalid train mode enum value");
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "scjoint") return TrainMode::scjoint;
    if (s == "naive_joint" || s == "naive") return TrainMode::naive_joint;
    if (s == "independent") return TrainMode::independent;
    throw ConfigError("unknown train mode '" + s + "' (want scjoint|naive_joint|independent)");
}

// ---- step ----

namespace {

double scalar_of(const Tensor& t) { return t.item(); }

}  // namespace

StepGraph build_step_graph(JointModel& model, const std::vector<TaskBatch>& batches) {
    if (batches.empty()) throw ContractError("a training step needs at least one batch");
    std::set<std::string> seen;
    StepGraph g;
    bool have_total = false;
    for (const auto& b : batches) {
        if (!seen.insert(b.task_id).second)
            throw ContractError("duplicate batch for task '" + b.task_id + "' in one step");
        if (b.images.empty() || b.images.size() != b.masks.size())
            throw ContractError("batch for task '" + b.task_id +
                                "' needs equally many images and masks (and at least one)");
        Tensor acc;
        bool have_acc = false;
        for (size_t i = 0; i < b.images.size(); ++i) {
            Tensor pred = model.forward(to_tensor(b.images[i]), b.task_id);
            Tensor loss = ppa_loss(pred, to_tensor(b.masks[i]));
            acc = have_acc ? add(acc, loss) : loss;
            have_acc = true;
        }
        Tensor mean_loss = mul(acc, 1.0 / double(b.images.size()));
        g.per_task.emplace_back(b.task_id, mean_loss);
        Tensor contrib = mul(mean_loss, b.loss_weight);
        g.total = have_total ? add(g.total, contrib) : contrib;
        have_total = true;
    }
    return g;
}

StepLosses scjoint_step(JointModel& model, const std::vector<TaskBatch>& batches, Adam& opt,
                        double lr, int64_t step_index) {
    StepGraph g = build_step_graph(model, batches);
    StepLosses out;
    bool finite = true;
    for (const auto& [task, loss] : g.per_task) {
        out.per_task[task] = scalar_of(loss);
        finite = finite && std::isfinite(out.per_task[task]);
    }
    out.total = scalar_of(g.total);
    finite = finite && std::isfinite(out.total);

    backward(g.total);
    if (!finite) {
        double grad_sq = 0.0;
        for (const auto& p : model.parameters())
            if (p.value.has_grad())
                for (double v : p.value.grad()) grad_sq += v * v;
        auto num = [](double v) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "%.6g", v);
            return std::string(buf);
        };
        std::string msg = "non-finite loss";
        if (step_index >= 0) msg += " at step " + std::to_string(step_index);
        msg += " (lr=" + num(lr) + ", grad norm=" + num(std::sqrt(grad_sq)) + "); task losses:";
        for (const auto& [task, v] : out.per_task) msg += " " + task + "=" + num(v);
        throw NanAbortError(msg);
    }
    opt.step(model, lr);
    return out;
}

// ---- config ----

void TrainConfig::validate() const {
    if (tasks.empty()) throw ConfigError("train config needs at least one task");
    std::set<std::string> ids;
    for (const auto& t : tasks) {
        if (t.task_id.empty()) throw ConfigError("task ids must be non-empty");
        if (t.manifest.empty()) throw ConfigError("task '" + t.task_id + "' needs a manifest path");
        if (!ids.insert(t.task_id).second) throw ConfigError("duplicate task id '" + t.task_id + "'");
        if (t.loss_weight < 0.0) throw ConfigError("loss_weight must be >= 0");
    }
    if (mode == TrainMode::independent && tasks.size() != 1)
        throw ConfigError("independent mode trains exactly one task; got " +
                          std::to_string(tasks.size()));
    if (mode != TrainMode::independent && tasks.size() < 2)
        throw ConfigError(to_string(mode) + " mode needs at least two tasks");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if ((epochs > 0) == (steps > 0))
        throw ConfigError("set exactly one of epochs/steps to a positive value");
    if (epochs < 0 || steps < 0) throw ConfigError("epochs/steps must be non-negative");
    if (lr0 <= 0.0) throw ConfigError("lr0 must be positive");
    if (poly_power < 0.0) throw ConfigError("poly_power must be non-negative");
    if (flip_prob < 0.0 || flip_prob > 1.0) throw ConfigError("flip_prob must be in [0,1]");
    if (eval_limit < 0) throw ConfigError("eval_limit must be non-negative");
    if (adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 || adam.beta2 >= 1.0)
        throw ConfigError("adam betas must be in [0,1)");
    if (adam.eps <= 0.0) throw ConfigError("adam eps must be positive");
    ModelConfig probe = model;
    probe.tasks = {"probe"};
    probe.validate();
}

TrainConfig train_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config is not valid JSON: ") + e.what());
    }
    const std::set<std::string> known = {"mode",  "tasks",      "model",     "batch_size",
                                         "epochs", "steps",     "lr0",       "poly_power",
                                         "flip_prob", "adam",   "seed",      "eval_limit",
                                         "out_dir"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw ConfigError("unknown train config key '" + it.key() + "'");
    if (!j.contains("seed")) throw ConfigError("train config needs an explicit seed");
    if (!j.contains("tasks")) throw ConfigError("train config needs a tasks list");

    TrainConfig cfg;
    try {
        if (j.contains("mode")) cfg.mode = train_mode_from_string(j["mode"].get<std::string>());
        for (const auto& tj : j["tasks"]) {
            const std::set<std::string> tkeys = {"task_id", "manifest", "val_manifest", "loss_weight"};
            for (auto it = tj.begin(); it != tj.end(); ++it)
                if (!tkeys.count(it.key()))
                    throw ConfigError("unknown task config key '" + it.key() + "'");
            TaskSpec t;
            t.task_id = tj.at("task_id").get<std::string>();
            t.manifest = tj.at("manifest").get<std::string>();
            if (tj.contains("val_manifest")) t.val_manifest = tj["val_manifest"].get<std::string>();
            if (tj.contains("loss_weight")) t.loss_weight = tj["loss_weight"].get<double>();
            cfg.tasks.push_back(std::move(t));
        }
        if (j.contains("model")) {
            nlohmann::json mj = j["model"];
            if (mj.contains("tasks"))
                throw ConfigError("model.tasks is derived from the task list; do not set it");
            mj["tasks"] = nlohmann::json::array({"placeholder"});
            cfg.model = model_config_from_json(mj.dump());
            cfg.model.tasks.clear();
        }
        if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int64_t>();
        if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int64_t>();
        if (j.contains("steps")) cfg.steps = j["steps"].get<int64_t>();
        if (j.contains("lr0")) cfg.lr0 = j["lr0"].get<double>();
        if (j.contains("poly_power")) cfg.poly_power = j["poly_power"].get<double>();
        if (j.contains("flip_prob")) cfg.flip_prob = j["flip_prob"].get<double>();
        if (j.contains("adam")) {
            const nlohmann::json& aj = j["adam"];
            const std::set<std::string> akeys = {"beta1", "beta2", "eps"};
            for (auto it = aj.begin(); it != aj.end(); ++it)
                if (!akeys.count(it.key()))
                    throw ConfigError("unknown adam config key '" + it.key() + "'");
            if (aj.contains("beta1")) cfg.adam.beta1 = aj["beta1"].get<double>();
            if (aj.contains("beta2")) cfg.adam.beta2 = aj["beta2"].get<double>();
            if (aj.contains("eps")) cfg.adam.eps = aj["eps"].get<double>();
        }
        cfg.seed = j["seed"].get<uint64_t>();
        if (j.contains("eval_limit")) cfg.eval_limit = j["eval_limit"].get<int64_t>();
        if (j.contains("out_dir")) cfg.out_dir = j["out_dir"].get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("train config field has the wrong type: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string train_config_to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["mode"] = to_string(cfg.mode);
    j["tasks"] = nlohmann::json::array();
    for (const auto& t : cfg.tasks) {
        nlohmann::json tj{{"task_id", t.task_id},
                          {"manifest", t.manifest},
                          {"loss_weight", t.loss_weight}};
        if (!t.val_manifest.empty()) tj["val_manifest"] = t.val_manifest;
        j["tasks"].push_back(std::move(tj));
    }
    nlohmann::json mj = nlohmann::json::parse(model_config_to_json(cfg.model));
    mj.erase("tasks");
    j["model"] = std::move(mj);
    j["batch_size"] = cfg.batch_size;
    j["epochs"] = cfg.epochs;
    j["steps"] = cfg.steps;
    j["lr0"] = cfg.lr0;
    j["poly_power"] = cfg.poly_power;
    j["flip_prob"] = cfg.flip_prob;
    j["adam"] = {{"beta1", cfg.adam.beta1}, {"beta2", cfg.adam.beta2}, {"eps", cfg.adam.eps}};
    j["seed"] = cfg.seed;
    j["eval_limit"] = cfg.eval_limit;
    j["out_dir"] = cfg.out_dir;
    return j.dump(2) + "\n";
}

// ---- evaluation ----

TaskEval evaluate_model(const JointModel& model, const std::string& routed_task, const Dataset& ds,
                        TaskKind kind, int64_t limit) {
    int64_t n = int64_t(ds.entries.size());
    if (limit > 0) n = std::min(n, limit);
    if (n == 0) throw ContractError("evaluation needs at least one entry");
    std::vector<MaskPair> pairs;
    pairs.reserve(size_t(n));
    double loss_acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const DatasetEntry& e = ds.entries[size_t(i)];
        Tensor pred = model.forward(to_tensor(e.image), routed_task);
        loss_acc += scalar_of(ppa_loss(pred, to_tensor(e.mask)));
        pairs.push_back({e.id, image_from_tensor(pred), e.mask});
    }
    MetricReport report = evaluate_pairs(std::move(pairs), kind);
    TaskEval out;
    out.loss = loss_acc / double(n);
    out.metrics = report.aggregate;
    out.count = n;
    return out;
}

// ---- training job ----

namespace {

// Deterministic epoch-reshuffled cycle over [0, n). Shares the job PRNG so
// the whole run replays from one seed.
class SampleStream {
  public:
    SampleStream(int64_t n, Rng* rng) : order_(size_t(n)), pos_(n), rng_(rng) {
        for (int64_t i = 0; i < n; ++i) order_[size_t(i)] = i;
    }
    int64_t next() {
        if (pos_ == int64_t(order_.size())) {
            for (int64_t i = int64_t(order_.size()) - 1; i > 0; --i) {
                int64_t k = int64_t(rng_->uniform_index(uint64_t(i) + 1));
                std::swap(order_[size_t(i)], order_[size_t(k)]);
            }
            pos_ = 0;
        }
        return order_[size_t(pos_++)];
    }

  private:
    std::vector<int64_t> order_;
    int64_t pos_;
    Rng* rng_;
};

double kind_f(const MetricValues& m, TaskKind kind) {
    return kind == TaskKind::salient ? m.f_beta_max : m.f_beta_weighted;
}

nlohmann::json record_to_json(const EvalRecord& rec, const std::vector<TaskKind>& kinds) {
    nlohmann::json tasks;
    for (size_t i = 0; i < rec.tasks.size(); ++i) {
        const auto& [id, ev] = rec.tasks[i];
        tasks[id] = {{"loss", ev.loss},
                     {"mae", ev.metrics.mae},
                     {"s_alpha", ev.metrics.s_alpha},
                     {"e_phi", ev.metrics.e_phi},
                     {"f_beta", kind_f(ev.metrics, kinds[i])},
                     {"composite", ev.metrics.composite}};
    }
    return nlohmann::json{
        {"step", rec.step}, {"epoch", rec.epoch}, {"lr", rec.lr}, {"tasks", std::move(tasks)}};
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const EvalHook& hook) {
    cfg.validate();
    if (cfg.out_dir.empty()) throw ConfigError("train config needs an out_dir");
    fs::create_directories(cfg.out_dir);

    struct TaskData {
        TaskSpec spec;
        Dataset train_ds;
        Dataset val_ds;
        TaskKind kind = TaskKind::salient;
    };
    std::vector<TaskData> tasks;
    for (const auto& spec : cfg.tasks) {
        TaskData t;
        t.spec = spec;
        t.train_ds = load_dataset(spec.manifest);
        t.val_ds = spec.val_manifest.empty() ? t.train_ds : load_dataset(spec.val_manifest);
        t.kind = t.train_ds.task_kind == "camouflaged" ? TaskKind::camouflaged : TaskKind::salient;
        const int64_t S = cfg.model.image_size;
        for (const auto& e : t.train_ds.entries)
            if (e.image.height != S || e.image.width != S)
                throw ConfigError("task '" + spec.task_id + "' entry " + e.id + " is " +
                                  std::to_string(e.image.height) + "x" +
                                  std::to_string(e.image.width) + ", model wants " +
                                  std::to_string(S) + "x" + std::to_string(S));
        tasks.push_back(std::move(t));
    }

    ModelConfig mcfg = cfg.model;
    mcfg.tasks.clear();
    if (cfg.mode == TrainMode::naive_joint) {
        mcfg.tasks = {"joint"};
    } else {
        for (const auto& t : cfg.tasks) mcfg.tasks.push_back(t.task_id);
    }
    mcfg.validate();
    Rng init_rng = Rng::derive(cfg.seed, "model-init");
    JointModel model(mcfg, init_rng);
    Adam opt(cfg.adam);
    Rng job_rng = Rng::derive(cfg.seed, "train");

    // In joint mode every pair flows through one mixed stream; otherwise one
    // stream per task, the smaller ones cycling so every step sees all tasks.
    std::vector<std::pair<size_t, int64_t>> mixed;  // (task index, entry index)
    std::vector<SampleStream> streams;
    int64_t steps_per_epoch = 0;
    if (cfg.mode == TrainMode::naive_joint) {
        for (size_t ti = 0; ti < tasks.size(); ++ti)
            for (int64_t i = 0; i < int64_t(tasks[ti].train_ds.entries.size()); ++i)
                mixed.emplace_back(ti, i);
        streams.emplace_back(int64_t(mixed.size()), &job_rng);
        steps_per_epoch = (int64_t(mixed.size()) + cfg.batch_size - 1) / cfg.batch_size;
    } else {
        int64_t largest = 0;
        for (const auto& t : tasks) {
            streams.emplace_back(int64_t(t.train_ds.entries.size()), &job_rng);
            largest = std::max(largest, int64_t(t.train_ds.entries.size()));
        }
        steps_per_epoch = (largest + cfg.batch_size - 1) / cfg.batch_size;
    }
    const int64_t max_iter = cfg.epochs > 0 ? cfg.epochs * steps_per_epoch : cfg.steps;

    const std::string log_path = (fs::path(cfg.out_dir) / "log.jsonl").string();
    const std::string ckpt_path = (fs::path(cfg.out_dir) / "checkpoint.jnt").string();
    std::ofstream log(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open " + log_path + " for writing");

    auto draw_batch = [&](size_t stream_idx, const std::string& task_id,
                          double weight) -> TaskBatch {
        TaskBatch b;
        b.task_id = task_id;
        b.loss_weight = weight;
        for (int64_t k = 0; k < cfg.batch_size; ++k) {
            int64_t idx = streams[stream_idx].next();
            const DatasetEntry* e;
            if (cfg.mode == TrainMode::naive_joint) {
                auto [ti, ei] = mixed[size_t(idx)];
                e = &tasks[ti].train_ds.entries[size_t(ei)];
            } else {
                e = &tasks[stream_idx].train_ds.entries[size_t(idx)];
            }
            const bool flip = job_rng.uniform() < cfg.flip_prob;
            b.images.push_back(flip ? flip_horizontal(e->image) : e->image);
            b.masks.push_back(flip ? flip_horizontal(e->mask) : e->mask);
        }
        return b;
    };

    TrainResult result;
    result.checkpoint_path = ckpt_path;
    result.log_path = log_path;

    for (int64_t iter = 0; iter < max_iter; ++iter) {
        std::vector<TaskBatch> batches;
        if (cfg.mode == TrainMode::naive_joint) {
            batches.push_back(draw_batch(0, "joint", 1.0));
        } else {
            for (size_t ti = 0; ti < tasks.size(); ++ti)
                batches.push_back(draw_batch(ti, tasks[ti].spec.task_id, tasks[ti].spec.loss_weight));
        }
        const double lr = poly_lr(cfg.lr0, cfg.poly_power, iter, max_iter);
        scjoint_step(model, batches, opt, lr, iter);

        const int64_t done = iter + 1;
        if (done % steps_per_epoch == 0 || done == max_iter) {
            EvalRecord rec;
            rec.step = done;
            rec.epoch = (done + steps_per_epoch - 1) / steps_per_epoch;
            rec.lr = lr;
            std::vector<TaskKind> kinds;
            for (const auto& t : tasks) {
                const std::string routed =
                    cfg.mode == TrainMode::naive_joint ? "joint" : t.spec.task_id;
                rec.tasks.emplace_back(
                    t.spec.task_id,
                    evaluate_model(model, routed, t.val_ds, t.kind, cfg.eval_limit));
                kinds.push_back(t.kind);
            }
            log << record_to_json(rec, kinds).dump() << "\n";
            log.flush();
            save_checkpoint(ckpt_path, model, {done, cfg.seed, job_rng.state()});
            if (hook) hook(rec);
            result.final_eval = std::move(rec);
        }
    }
    result.steps_run = max_iter;
    return result;
}

}  // namespace jointseg

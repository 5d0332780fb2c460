// jointseg: one binary for the whole workflow — generate synthetic data, train a
// joint salient/camouflaged model, rank pairs by a predictor's mask quality,
// evaluate predictions, and run single-image inference.
//
// Exit codes: 0 success, 1 unexpected failure, 2 bad configuration or usage,
// 3 filesystem/format problem, 4 training aborted on a non-finite loss.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "jointseg/checkpoint.hpp"
#include "jointseg/data.hpp"
#include "jointseg/errors.hpp"
#include "jointseg/image.hpp"
#include "jointseg/metrics.hpp"
#include "jointseg/model.hpp"
#include "jointseg/sbss.hpp"
#include "jointseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace jointseg;

namespace {

std::string read_text(const std::string& path) {
    std::vector<unsigned char> bytes = read_file_bytes(path);
    return std::string(bytes.begin(), bytes.end());
}

// Pick the task to route through: an explicit id wins, a single-task
// checkpoint needs none, anything else must be disambiguated.
std::string resolve_task(const JointModel& model, const std::string& task) {
    if (!task.empty()) return task;
    const std::vector<std::string>& tasks = model.config().tasks;
    if (tasks.size() == 1) return tasks[0];
    std::string have;
    for (const std::string& t : tasks) {
        if (!have.empty()) have += ", ";
        have += t;
    }
    throw ConfigError("checkpoint registers " + std::to_string(tasks.size()) + " tasks (" +
                      have + "); pick one with --task");
}

void add_gen_data(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("gen-data", "generate a synthetic image/mask dataset");
    auto spec_path = std::make_shared<std::string>();
    auto out_dir = std::make_shared<std::string>();
    auto kind = std::make_shared<std::string>();
    auto count = std::make_shared<int64_t>(0);
    auto image_size = std::make_shared<int64_t>(0);
    auto seed = std::make_shared<uint64_t>(0);
    auto contrast = std::make_shared<double>(0.0);
    auto camo_contrast = std::make_shared<double>(0.0);
    auto grain = std::make_shared<int64_t>(0);
    auto force = std::make_shared<bool>(false);
    cmd->add_option("--spec", *spec_path, "JSON generation spec; flags below override it");
    cmd->add_option("--kind", *kind, "salient | camouflaged | dual");
    cmd->add_option("--count", *count, "number of image/mask pairs");
    cmd->add_option("--image-size", *image_size, "square image side in pixels");
    cmd->add_option("--seed", *seed, "generation seed (required unless --spec provides one)");
    cmd->add_option("--contrast", *contrast, "blob mean-intensity offset");
    cmd->add_option("--camo-contrast", *camo_contrast, "dual images: camouflaged blob offset");
    cmd->add_option("--texture-grain", *grain, "background noise cell size in pixels");
    cmd->add_option("--out", *out_dir, "output directory")->required();
    cmd->add_flag("--force", *force, "overwrite an existing dataset directory");

    cmd->callback([=] {
        GenSpec spec;
        bool have_seed = false;
        if (!spec_path->empty()) {
            spec = gen_spec_from_json(read_text(*spec_path));
            have_seed = true;
        }
        if (cmd->count("--kind")) spec.kind = gen_kind_from_string(*kind);
        if (cmd->count("--count")) spec.count = *count;
        if (cmd->count("--image-size")) spec.image_size = *image_size;
        if (cmd->count("--seed")) {
            spec.seed = *seed;
            have_seed = true;
        }
        if (cmd->count("--contrast")) spec.contrast = *contrast;
        if (cmd->count("--camo-contrast")) spec.camo_contrast = *camo_contrast;
        if (cmd->count("--texture-grain")) spec.texture_grain = *grain;
        if (!have_seed)
            throw ConfigError("a seed is required: pass --seed or provide one in --spec");
        spec.validate();

        Manifest m = generate_dataset(spec, *out_dir, *force);
        atomic_write_text((fs::path(*out_dir) / "resolved_spec.json").string(),
                          gen_spec_to_json(spec));
        std::cout << "wrote " << m.entries.size() << " " << to_string(spec.kind)
                  << " pair(s) to " << *out_dir << "\n";
    });
}

void add_train(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("train", "train a joint segmentation model");
    auto config_path = std::make_shared<std::string>();
    auto mode = std::make_shared<std::string>();
    auto out_dir = std::make_shared<std::string>();
    auto seed = std::make_shared<uint64_t>(0);
    auto batch = std::make_shared<int64_t>(0);
    auto lr0 = std::make_shared<double>(0.0);
    auto steps = std::make_shared<int64_t>(0);
    auto epochs = std::make_shared<int64_t>(0);
    cmd->add_option("--config", *config_path, "training config JSON")->required();
    cmd->add_option("--mode", *mode, "scjoint | naive_joint | independent");
    cmd->add_option("--seed", *seed, "override the config seed");
    cmd->add_option("--out", *out_dir, "override the output directory");
    cmd->add_option("--batch-size", *batch, "override the batch size");
    cmd->add_option("--lr0", *lr0, "override the initial learning rate");
    cmd->add_option("--steps", *steps, "train for a fixed step count");
    cmd->add_option("--epochs", *epochs, "train for a fixed epoch count");

    cmd->callback([=] {
        if (cmd->count("--steps") && cmd->count("--epochs"))
            throw ConfigError("pass only one of --steps / --epochs");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(read_text(*config_path));
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("training config is not valid JSON: ") + e.what());
        }
        if (cmd->count("--mode")) j["mode"] = *mode;
        if (cmd->count("--seed")) j["seed"] = *seed;
        if (cmd->count("--out")) j["out_dir"] = *out_dir;
        if (cmd->count("--batch-size")) j["batch_size"] = *batch;
        if (cmd->count("--lr0")) j["lr0"] = *lr0;
        if (cmd->count("--steps")) {
            j["steps"] = *steps;
            j["epochs"] = 0;
        }
        if (cmd->count("--epochs")) {
            j["epochs"] = *epochs;
            j["steps"] = 0;
        }

        TrainConfig cfg = train_config_from_json(j.dump());
        fs::create_directories(cfg.out_dir);
        atomic_write_text((fs::path(cfg.out_dir) / "resolved_config.json").string(),
                          train_config_to_json(cfg));

        bool header = false;
        TrainResult res = train(cfg, [&header](const EvalRecord& rec) {
            if (!header) {
                std::printf("%6s %5s %10s  %-12s %8s %8s %8s %8s %8s\n", "step", "epoch", "lr",
                            "task", "loss", "mae", "s_alpha", "e_phi", "comp");
                header = true;
            }
            for (const auto& [id, te] : rec.tasks)
                std::printf("%6lld %5lld %10.3e  %-12s %8.4f %8.4f %8.4f %8.4f %8.4f\n",
                            static_cast<long long>(rec.step), static_cast<long long>(rec.epoch),
                            rec.lr, id.c_str(), te.loss, te.metrics.mae, te.metrics.s_alpha,
                            te.metrics.e_phi, te.metrics.composite);
            std::fflush(stdout);
        });
        std::cout << "finished " << res.steps_run << " step(s); checkpoint " << res.checkpoint_path
                  << ", log " << res.log_path << "\n";
    });
}

void add_sbss(CLI::App& app) {
    CLI::App* cmd =
        app.add_subcommand("sbss", "rank pairs by predicted-mask quality and sample a subset");
    auto ds_path = std::make_shared<std::string>();
    auto predictor = std::make_shared<std::string>();
    auto task = std::make_shared<std::string>();
    auto out_path = std::make_shared<std::string>();
    auto scores_path = std::make_shared<std::string>();
    auto variant = std::make_shared<std::string>("top");
    auto k = std::make_shared<int64_t>(0);
    auto seed = std::make_shared<uint64_t>(0);
    cmd->add_option("--dataset", *ds_path, "ground-truth dataset manifest")->required();
    cmd->add_option("--predictor", *predictor,
                    "'oracle', a prediction directory, or a checkpoint file")
        ->required();
    cmd->add_option("--task", *task, "task id for a checkpoint predictor");
    cmd->add_option("--k", *k, "subset size")->required();
    cmd->add_option("--variant", *variant, "top | bottom | random (default top)");
    cmd->add_option("--seed", *seed, "sampling seed (required for random)");
    cmd->add_option("--out", *out_path, "subset manifest to write")->required();
    cmd->add_option("--scores", *scores_path,
                    "scores JSON path (default: --out with a .scores.json extension)");

    cmd->callback([=] {
        SamplingPlan plan;
        plan.variant = sample_variant_from_string(*variant);
        plan.k = *k;
        if (plan.variant == SampleVariant::random_k) {
            if (!cmd->count("--seed"))
                throw ConfigError("random sampling needs an explicit --seed");
            plan.seed = *seed;
        }

        Dataset ds = load_dataset(*ds_path);
        Predictor pred;
        if (*predictor == "oracle")
            pred = oracle_predictor();
        else if (fs::is_directory(*predictor))
            pred = map_directory_predictor(*predictor);
        else
            pred = checkpoint_predictor(*predictor, *task);

        ScoreOutcome outcome = score_dataset(ds, pred);
        if (!outcome.failed.empty()) {
            std::cerr << "warning: " << outcome.failed.size() << " pair(s) failed scoring\n";
            for (const auto& [id, why] : outcome.failed)
                std::cerr << "  " << id << ": " << why << "\n";
        }

        std::vector<std::string> ids = sample(outcome.scored, plan);
        write_subset_manifest(ids, *ds_path, *out_path);

        std::string spath = scores_path->empty()
                                ? fs::path(*out_path).replace_extension(".scores.json").string()
                                : *scores_path;
        nlohmann::json sj = nlohmann::json::parse(scores_to_json(outcome));
        sj["config"] = {{"dataset", *ds_path}, {"predictor", *predictor}, {"task", *task},
                        {"k", *k},             {"variant", *variant}};
        if (plan.variant == SampleVariant::random_k) sj["config"]["seed"] = plan.seed;
        atomic_write_text(spath, sj.dump(2) + "\n");

        std::cout << "scored " << outcome.scored.size() << " pair(s) (" << outcome.failed.size()
                  << " failed); wrote " << ids.size() << "-id " << *variant << " subset to "
                  << *out_path << "\n";
    });
}

void add_eval(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("eval", "score predictions against ground truth");
    auto gt_path = std::make_shared<std::string>();
    auto kind_str = std::make_shared<std::string>();
    auto pred_dir = std::make_shared<std::string>();
    auto ckpt_path = std::make_shared<std::string>();
    auto task = std::make_shared<std::string>();
    auto report_path = std::make_shared<std::string>();
    auto threads = std::make_shared<int>(0);
    cmd->add_option("--gt", *gt_path, "ground-truth dataset manifest")->required();
    cmd->add_option("--task-kind", *kind_str, "salient | camouflaged")->required();
    CLI::Option* pd = cmd->add_option("--pred-dir", *pred_dir, "directory of <id>.pgm/.png masks");
    CLI::Option* ck = cmd->add_option("--ckpt", *ckpt_path, "checkpoint to run instead");
    pd->excludes(ck);
    ck->excludes(pd);
    cmd->add_option("--task", *task, "task id for --ckpt");
    cmd->add_option("--report", *report_path, "write the full per-pair report as JSON");
    cmd->add_option("--threads", *threads, "worker threads (0 = hardware default)");

    cmd->callback([=] {
        TaskKind kind = task_kind_from_string(*kind_str);
        Dataset ds = load_dataset(*gt_path);

        std::vector<MaskPair> pairs;
        if (!pred_dir->empty()) {
            std::vector<std::string> missing;
            for (const DatasetEntry& e : ds.entries) {
                fs::path p = fs::path(*pred_dir) / (e.id + ".pgm");
                if (!fs::exists(p)) p = fs::path(*pred_dir) / (e.id + ".png");
                if (!fs::exists(p)) {
                    missing.push_back(e.id);
                    continue;
                }
                pairs.push_back({e.id, read_image(p.string()), e.mask});
            }
            if (!missing.empty()) {
                std::string msg = std::to_string(missing.size()) + " prediction(s) missing from " +
                                  *pred_dir + ":";
                for (const std::string& id : missing) msg += "\n  " + id;
                throw IoError(msg);
            }
        } else if (!ckpt_path->empty()) {
            LoadedCheckpoint lc = load_checkpoint(*ckpt_path);
            std::string routed = resolve_task(lc.model, *task);
            for (const DatasetEntry& e : ds.entries)
                pairs.push_back(
                    {e.id, image_from_tensor(lc.model.forward(to_tensor(e.image), routed)),
                     e.mask});
        } else {
            throw ConfigError("pass exactly one of --pred-dir / --ckpt");
        }

        MetricReport report = evaluate_pairs(std::move(pairs), kind, *threads);
        std::cout << report_to_table(report);
        if (!report_path->empty()) atomic_write_text(*report_path, report_to_json(report));
    });
}

void add_infer(CLI::App& app) {
    CLI::App* cmd = app.add_subcommand("infer", "run one image through a checkpoint");
    auto ckpt_path = std::make_shared<std::string>();
    auto image_path = std::make_shared<std::string>();
    auto task = std::make_shared<std::string>();
    auto out_path = std::make_shared<std::string>();
    cmd->add_option("--ckpt", *ckpt_path, "checkpoint file")->required();
    cmd->add_option("--image", *image_path, "input image (PGM or PNG)")->required();
    cmd->add_option("--task", *task, "task id (optional for single-task checkpoints)");
    cmd->add_option("--out", *out_path, "prediction image to write")->required();

    cmd->callback([=] {
        LoadedCheckpoint lc = load_checkpoint(*ckpt_path);
        std::string routed = resolve_task(lc.model, *task);
        Image img = read_image(*image_path);
        Image mask = image_from_tensor(lc.model.forward(to_tensor(img), routed));
        write_image_u8(*out_path, mask);
        std::cout << "wrote " << *out_path << " (task " << routed << ")\n";
    });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"joint salient/camouflaged object segmentation toolkit"};
    app.require_subcommand(1);
    add_gen_data(app);
    add_train(app);
    add_sbss(app);
    add_eval(app);
    add_infer(app);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const NanAbortError& e) {
        std::cerr << "training aborted: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

// End-to-end tests that spawn the jointseg binary (path baked in as JOINTSEG_BIN)
// and check behavior a user sees: exit codes, file outputs, determinism.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>
#include <json.hpp>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "jointseg/data.hpp"
#include "jointseg/image.hpp"

using namespace jointseg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("jointseg_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

struct RunResult {
    int code = -1;
    std::string out;
    std::string err;
};

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    fs::path dir = fs::temp_directory_path() / "jointseg_cli_io";
    fs::create_directories(dir);
    fs::path out = dir / ("out" + std::to_string(counter) + ".txt");
    fs::path err = dir / ("err" + std::to_string(counter) + ".txt");
    ++counter;
    std::string cmd = std::string(JOINTSEG_BIN) + " " + args + " > " + out.string() + " 2> " +
                      err.string();
    int rc = std::system(cmd.c_str());
    REQUIRE(rc != -1);
    return {WEXITSTATUS(rc), slurp(out), slurp(err)};
}

bool trees_byte_identical(const fs::path& a, const fs::path& b) {
    std::vector<std::string> names_a, names_b;
    for (const auto& e : fs::directory_iterator(a)) names_a.push_back(e.path().filename().string());
    for (const auto& e : fs::directory_iterator(b)) names_b.push_back(e.path().filename().string());
    std::sort(names_a.begin(), names_a.end());
    std::sort(names_b.begin(), names_b.end());
    if (names_a != names_b) return false;
    for (const std::string& n : names_a)
        if (slurp(a / n) != slurp(b / n)) return false;
    return true;
}

// Shared fixture: two tiny datasets and one short training run, built once.
struct Fixture {
    fs::path root, sal, cod, run;
    std::string config_path;

    Fixture() {
        root = fresh_dir("fixture");
        sal = root / "sal";
        cod = root / "cod";
        run = root / "run";
        RunResult g1 = run_cli("gen-data --kind salient --count 6 --image-size 16 --seed 11 --out " +
                               sal.string());
        RunResult g2 = run_cli(
            "gen-data --kind camouflaged --count 4 --image-size 16 --seed 12 --out " + cod.string());
        REQUIRE(g1.code == 0);
        REQUIRE(g2.code == 0);

        nlohmann::json j = {
            {"mode", "scjoint"},
            {"seed", 5},
            {"batch_size", 3},
            {"epochs", 2},
            {"lr0", 0.001},
            {"out_dir", run.string()},
            {"tasks",
             {{{"task_id", "sod"}, {"manifest", (sal / "manifest.json").string()}},
              {{"task_id", "cod"}, {"manifest", (cod / "manifest.json").string()}}}},
            {"model",
             {{"image_size", 16},
              {"patch_size", 8},
              {"embed_dim", 16},
              {"encoder_depth", 1},
              {"decoder_depth", 1},
              {"heads", 2},
              {"mlp_ratio", 2.0}}},
        };
        config_path = (root / "train.json").string();
        std::ofstream(config_path) << j.dump(2);
        RunResult t = run_cli("train --config " + config_path);
        REQUIRE(t.code == 0);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

TEST_CASE("cli: help succeeds, bad usage exits 2") {
    CHECK(run_cli("--help").code == 0);
    CHECK(run_cli("gen-data --help").code == 0);
    CHECK(run_cli("").code == 2);
    CHECK(run_cli("frobnicate").code == 2);
    CHECK(run_cli("gen-data --no-such-flag 1 --out x").code == 2);
    CHECK(run_cli("train").code == 2);  // --config is required
}

TEST_CASE("cli: gen-data is deterministic and echoes a regenerating spec") {
    fs::path a = fresh_dir("gen_a"), b = fresh_dir("gen_b"), c = fresh_dir("gen_c");
    std::string flags = "gen-data --kind dual --count 5 --image-size 16 --seed 33 --out ";
    CHECK(run_cli(flags + a.string()).code == 0);
    CHECK(run_cli(flags + b.string()).code == 0);
    CHECK(trees_byte_identical(a, b));

    // The resolved spec regenerates the same tree, resolved contrast included.
    RunResult r = run_cli("gen-data --spec " + (a / "resolved_spec.json").string() + " --out " +
                          c.string());
    CHECK(r.code == 0);
    CHECK(trees_byte_identical(a, c));

    CHECK(run_cli("gen-data --kind salient --count 2 --out " + fresh_dir("gen_d").string()).code ==
          2);  // no seed

    RunResult refuse = run_cli(flags + a.string());
    CHECK(refuse.code == 3);  // refuses to clobber
    CHECK(run_cli(flags + a.string() + " --force").code == 0);
}

TEST_CASE("cli: train writes artifacts and reruns bit-identically") {
    Fixture& f = fixture();
    CHECK(fs::exists(f.run / "checkpoint.jnt"));
    CHECK(fs::exists(f.run / "log.jsonl"));
    CHECK(fs::exists(f.run / "resolved_config.json"));

    fs::path run2 = fresh_dir("train_rerun");
    RunResult t2 = run_cli("train --config " + f.config_path + " --out " + run2.string());
    CHECK(t2.code == 0);
    CHECK(t2.out.find("step") != std::string::npos);  // progress table header
    CHECK(slurp(f.run / "checkpoint.jnt") == slurp(run2 / "checkpoint.jnt"));
    CHECK(slurp(f.run / "log.jsonl") == slurp(run2 / "log.jsonl"));
}

TEST_CASE("cli: train flag overrides land in the resolved config") {
    Fixture& f = fixture();
    fs::path run3 = fresh_dir("train_override");
    RunResult t = run_cli("train --config " + f.config_path + " --out " + run3.string() +
                          " --steps 2 --batch-size 2 --lr0 0.0005");
    CHECK(t.code == 0);
    nlohmann::json j = nlohmann::json::parse(slurp(run3 / "resolved_config.json"));
    CHECK(j["steps"] == 2);
    CHECK(j["epochs"] == 0);
    CHECK(j["batch_size"] == 2);
    CHECK(j["lr0"] == 0.0005);

    CHECK(run_cli("train --config " + f.config_path + " --steps 2 --epochs 2 --out " +
                  fresh_dir("train_both").string())
              .code == 2);
}

TEST_CASE("cli: non-finite training loss aborts with exit code 4") {
    Fixture& f = fixture();
    RunResult t = run_cli("train --config " + f.config_path + " --out " +
                          fresh_dir("train_nan").string() + " --lr0 1e300 --steps 4");
    CHECK(t.code == 4);
    CHECK(t.err.find("non-finite loss") != std::string::npos);
}

TEST_CASE("cli: sbss writes a loadable subset and a scores report") {
    Fixture& f = fixture();
    fs::path dir = fresh_dir("sbss");
    fs::path subset = dir / "subset.json";
    RunResult r = run_cli("sbss --dataset " + (f.sal / "manifest.json").string() +
                          " --predictor oracle --k 3 --out " + subset.string());
    CHECK(r.code == 0);
    Dataset sub = load_dataset(subset.string());
    CHECK(sub.entries.size() == 3);

    nlohmann::json sj = nlohmann::json::parse(slurp(dir / "subset.scores.json"));
    CHECK(sj["count"] == 6);
    CHECK(sj["scores"].size() == 6);
    CHECK(sj["config"]["predictor"] == "oracle");

    // random needs a seed, and a fixed seed reproduces the subset bytes.
    CHECK(run_cli("sbss --dataset " + (f.sal / "manifest.json").string() +
                  " --predictor oracle --k 3 --variant random --out " + subset.string())
              .code == 2);
    fs::path r1 = dir / "r1.json", r2 = dir / "r2.json";
    std::string rand_flags = "sbss --dataset " + (f.sal / "manifest.json").string() +
                             " --predictor oracle --k 3 --variant random --seed 9 --out ";
    CHECK(run_cli(rand_flags + r1.string()).code == 0);
    CHECK(run_cli(rand_flags + r2.string()).code == 0);
    CHECK(slurp(r1) == slurp(r2));

    // checkpoint predictor on a two-task checkpoint needs --task.
    std::string ck = (f.run / "checkpoint.jnt").string();
    CHECK(run_cli("sbss --dataset " + (f.sal / "manifest.json").string() + " --predictor " + ck +
                  " --k 2 --out " + (dir / "ck.json").string())
              .code == 2);
    CHECK(run_cli("sbss --dataset " + (f.sal / "manifest.json").string() + " --predictor " + ck +
                  " --task sod --k 2 --out " + (dir / "ck.json").string())
              .code == 0);
}

TEST_CASE("cli: eval reports oracle predictions as near-perfect") {
    Fixture& f = fixture();
    fs::path dir = fresh_dir("eval");
    fs::path preds = dir / "preds";
    fs::create_directories(preds);
    Dataset ds = load_dataset((f.sal / "manifest.json").string());
    for (const DatasetEntry& e : ds.entries)
        write_image_u8((preds / (e.id + ".pgm")).string(), e.mask);

    fs::path report = dir / "report.json";
    RunResult r = run_cli("eval --gt " + (f.sal / "manifest.json").string() +
                          " --task-kind salient --pred-dir " + preds.string() + " --report " +
                          report.string());
    CHECK(r.code == 0);
    CHECK(r.out.find("mean") != std::string::npos);
    nlohmann::json j = nlohmann::json::parse(slurp(report));
    CHECK(j["aggregate"]["mae"].get<double>() == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(j["aggregate"]["composite"].get<double>() == doctest::Approx(4.0).epsilon(1e-4));

    // A missing prediction is an IoError (3) listing every absent id.
    fs::remove(preds / (ds.entries[0].id + ".pgm"));
    fs::remove(preds / (ds.entries[2].id + ".pgm"));
    RunResult miss = run_cli("eval --gt " + (f.sal / "manifest.json").string() +
                             " --task-kind salient --pred-dir " + preds.string());
    CHECK(miss.code == 3);
    CHECK(miss.err.find(ds.entries[0].id) != std::string::npos);
    CHECK(miss.err.find(ds.entries[2].id) != std::string::npos);

    // --pred-dir and --ckpt are mutually exclusive; neither is an error too.
    std::string ck = (f.run / "checkpoint.jnt").string();
    CHECK(run_cli("eval --gt " + (f.sal / "manifest.json").string() +
                  " --task-kind salient --pred-dir " + preds.string() + " --ckpt " + ck)
              .code == 2);
    CHECK(run_cli("eval --gt " + (f.sal / "manifest.json").string() + " --task-kind salient")
              .code == 2);

    CHECK(run_cli("eval --gt " + (f.sal / "manifest.json").string() +
                  " --task-kind salient --ckpt " + ck + " --task sod")
              .code == 0);
}

TEST_CASE("cli: infer writes a probability mask and rejects unknown tasks") {
    Fixture& f = fixture();
    fs::path dir = fresh_dir("infer");
    std::string ck = (f.run / "checkpoint.jnt").string();
    fs::path out = dir / "pred.pgm";

    Dataset ds = load_dataset((f.sal / "manifest.json").string());
    fs::path input = f.sal / (ds.entries[0].id + ".pgm");
    RunResult r = run_cli("infer --ckpt " + ck + " --image " + input.string() + " --task sod " +
                          "--out " + out.string());
    CHECK(r.code == 0);
    Image pred = read_image(out.string());
    CHECK(pred.height == 16);
    CHECK(pred.width == 16);
    for (double v : pred.pix) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    // After training, the two modes disagree even at the 8-bit level.
    fs::path out_cod = dir / "pred_cod.pgm";
    CHECK(run_cli("infer --ckpt " + ck + " --image " + input.string() + " --task cod " +
                  "--out " + out_cod.string())
              .code == 0);
    CHECK(slurp(out) != slurp(out_cod));

    // Two registered tasks: no --task is ambiguous, junk names the registry.
    CHECK(run_cli("infer --ckpt " + ck + " --image " + input.string() + " --out " + out.string())
              .code == 2);
    RunResult bogus = run_cli("infer --ckpt " + ck + " --image " + input.string() +
                              " --task zzz --out " + out.string());
    CHECK(bogus.code == 2);
    CHECK(bogus.err.find("registered") != std::string::npos);

    CHECK(run_cli("infer --ckpt " + dir.string() + "/nope.jnt --image " + input.string() +
                  " --task sod --out " + out.string())
              .code == 3);
}

#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "jointseg/data.hpp"
#include "jointseg/errors.hpp"
#include "jointseg/image.hpp"

using namespace jointseg;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("jointseg_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<std::string> sorted_files(const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) names.push_back(fs::relative(e.path(), dir).string());
    std::sort(names.begin(), names.end());
    return names;
}

bool dirs_byte_identical(const fs::path& a, const fs::path& b) {
    auto fa = sorted_files(a), fb = sorted_files(b);
    if (fa != fb) return false;
    for (const auto& name : fa)
        if (read_file_bytes((a / name).string()) != read_file_bytes((b / name).string()))
            return false;
    return true;
}

double mean_level(const Image& img, const Image& mask, bool inside) {
    double acc = 0.0;
    int64_t n = 0;
    for (size_t i = 0; i < img.pix.size(); ++i) {
        bool fg = mask.pix[i] >= 0.5;
        if (fg == inside) { acc += img.pix[i]; ++n; }
    }
    REQUIRE(n > 0);
    return acc / double(n);
}

GenSpec small_spec(GenKind kind, uint64_t seed = 7) {
    GenSpec s;
    s.kind = kind;
    s.count = 6;
    s.image_size = 48;
    s.seed = seed;
    return s;
}

}  // namespace

TEST_CASE("gen kind strings round trip") {
    for (GenKind k : {GenKind::salient, GenKind::camouflaged, GenKind::dual})
        CHECK(gen_kind_from_string(to_string(k)) == k);
    CHECK(to_string(GenKind::dual) == "dual");
    CHECK_THROWS_AS(gen_kind_from_string("saliency"), ConfigError);
}

TEST_CASE("generation spec validation") {
    GenSpec s = small_spec(GenKind::salient);
    CHECK_NOTHROW(s.validate());

    GenSpec bad = s;
    bad.count = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = s;
    bad.image_size = 8;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = s;
    bad.contrast = 1.5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = s;
    bad.texture_grain = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    bad = small_spec(GenKind::dual);
    bad.contrast = 0.05;  // not above the camouflaged offset
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    CHECK(small_spec(GenKind::salient).effective_contrast() == doctest::Approx(0.8));
    CHECK(small_spec(GenKind::camouflaged).effective_contrast() == doctest::Approx(0.08));
    GenSpec explicit_c = small_spec(GenKind::camouflaged);
    explicit_c.contrast = 0.3;
    CHECK(explicit_c.effective_contrast() == doctest::Approx(0.3));
}

TEST_CASE("same spec generates byte-identical trees") {
    fs::path a = fresh_dir("det_a"), b = fresh_dir("det_b");
    GenSpec s = small_spec(GenKind::dual, 123);
    generate_dataset(s, a.string());
    generate_dataset(s, b.string());
    CHECK(dirs_byte_identical(a, b));

    // A different seed must actually change the pixels.
    fs::path c = fresh_dir("det_c");
    GenSpec s2 = s;
    s2.seed = 124;
    generate_dataset(s2, c.string());
    CHECK_FALSE(dirs_byte_identical(a, c));
}

TEST_CASE("smaller count is a byte-identical prefix of a larger one") {
    fs::path a = fresh_dir("prefix_a"), b = fresh_dir("prefix_b");
    GenSpec s = small_spec(GenKind::salient, 55);
    s.count = 3;
    generate_dataset(s, a.string());
    s.count = 7;
    generate_dataset(s, b.string());
    for (const auto& name : sorted_files(a)) {
        if (name == "manifest.json") continue;
        CHECK(read_file_bytes((a / name).string()) == read_file_bytes((b / name).string()));
    }
}

TEST_CASE("salient entries carry a strong mean offset under the mask") {
    fs::path dir = fresh_dir("salient_contrast");
    GenSpec s = small_spec(GenKind::salient, 9);
    Manifest m = generate_dataset(s, dir.string());
    REQUIRE(m.entries.size() == 6);
    CHECK(m.task_kind == "salient");
    for (const auto& e : m.entries) {
        Image img = read_image((dir / e.image_path).string());
        Image msk = to_mask(read_image((dir / e.mask_path).string()));
        double gap = std::abs(mean_level(img, msk, true) - mean_level(img, msk, false));
        CHECK(gap >= 0.5 * 0.8);
        double area = mask_area_fraction(msk);
        CHECK(area >= 0.02);
        CHECK(area <= 0.30);
        CHECK(e.extra_mask_path.empty());
    }
}

TEST_CASE("camouflaged entries carry only a faint offset") {
    fs::path dir = fresh_dir("camo_contrast");
    GenSpec s = small_spec(GenKind::camouflaged, 11);
    Manifest m = generate_dataset(s, dir.string());
    for (const auto& e : m.entries) {
        Image img = read_image((dir / e.image_path).string());
        Image msk = to_mask(read_image((dir / e.mask_path).string()));
        double gap = std::abs(mean_level(img, msk, true) - mean_level(img, msk, false));
        CHECK(gap >= 0.5 * 0.08);
        CHECK(gap <= 2.0 * 0.08);  // faint means faint
    }
}

TEST_CASE("dual entries keep the two masks disjoint and both plausible") {
    fs::path dir = fresh_dir("dual_masks");
    GenSpec s = small_spec(GenKind::dual, 21);
    s.image_size = 64;
    Manifest m = generate_dataset(s, dir.string());
    CHECK(m.task_kind == "dual");
    for (const auto& e : m.entries) {
        REQUIRE_FALSE(e.extra_mask_path.empty());
        Image a = to_mask(read_image((dir / e.mask_path).string()));
        Image b = to_mask(read_image((dir / e.extra_mask_path).string()));
        double overlap = 0.0;
        for (size_t i = 0; i < a.pix.size(); ++i) overlap += a.pix[i] * b.pix[i];
        CHECK(overlap == 0.0);
        for (const Image* msk : {&a, &b}) {
            double area = mask_area_fraction(*msk);
            CHECK(area >= 0.02);
            CHECK(area <= 0.30);
        }
    }
}

TEST_CASE("generate then load round trips pixel-exactly") {
    fs::path dir = fresh_dir("roundtrip");
    GenSpec s = small_spec(GenKind::dual, 31);
    generate_dataset(s, dir.string());
    Dataset d = load_dataset((dir / "manifest.json").string());
    CHECK(d.task_kind == "dual");
    REQUIRE(d.entries.size() == 6);
    CHECK(std::is_sorted(d.entries.begin(), d.entries.end(),
                         [](const DatasetEntry& x, const DatasetEntry& y) { return x.id < y.id; }));
    for (const auto& e : d.entries) {
        CHECK(e.has_extra);
        CHECK(is_binary(e.mask));
        CHECK(is_binary(e.extra_mask));
        // Loaded pixels sit exactly on the 8-bit lattice: rewriting them
        // reproduces the generated file byte for byte.
        fs::path copy = dir / (e.id + "_rewrite.pgm");
        write_image_u8(copy.string(), e.image);
        CHECK(read_file_bytes(copy.string()) ==
              read_file_bytes((dir / (e.id + ".pgm")).string()));
    }
}

TEST_CASE("existing manifest is refused without force") {
    fs::path dir = fresh_dir("force");
    GenSpec s = small_spec(GenKind::salient, 41);
    generate_dataset(s, dir.string());
    CHECK_THROWS_AS(generate_dataset(s, dir.string()), IoError);
    CHECK_NOTHROW(generate_dataset(s, dir.string(), /*force=*/true));
}

TEST_CASE("manifest parsing rejects malformed inputs") {
    fs::path dir = fresh_dir("manifest_bad");
    auto write = [&](const std::string& text) {
        atomic_write_text((dir / "manifest.json").string(), text);
        return (dir / "manifest.json").string();
    };

    CHECK_THROWS_AS(read_manifest((dir / "missing.json").string()), IoError);
    CHECK_THROWS_AS(read_manifest(write("not json at all")), ConfigError);
    CHECK_THROWS_AS(read_manifest(write(R"({"version":2,"task_kind":"salient","entries":[]})")),
                    ConfigError);
    CHECK_THROWS_AS(read_manifest(write(R"({"version":1,"task_kind":"salient","entries":[],"zebra":1})")),
                    ConfigError);
    CHECK_THROWS_AS(
        read_manifest(write(
            R"({"version":1,"task_kind":"salient","entries":[{"id":"a","image_path":"a.pgm","mask_path":"m.pgm","zork":3}]})")),
        ConfigError);
    CHECK_THROWS_AS(
        read_manifest(write(
            R"({"version":1,"task_kind":"salient","entries":[)"
            R"({"id":"a","image_path":"a.pgm","mask_path":"m.pgm"},)"
            R"({"id":"a","image_path":"b.pgm","mask_path":"n.pgm"}]})")),
        ConfigError);

    Manifest ok;
    ok.task_kind = "salient";
    ok.entries.push_back({"x", "x.pgm", "x_mask.pgm", ""});
    write_manifest(ok, (dir / "manifest.json").string());
    Manifest back = read_manifest((dir / "manifest.json").string());
    CHECK(back.version == 1);
    CHECK(back.entries.size() == 1);
    CHECK(back.entries[0].id == "x");
    CHECK(back.entries[0].extra_mask_path.empty());
}

TEST_CASE("loading collects every invalid entry into one error") {
    fs::path dir = fresh_dir("load_bad");
    GenSpec s = small_spec(GenKind::salient, 51);
    Manifest m = generate_dataset(s, dir.string());

    // Break two entries in different ways; both ids must be reported.
    fs::remove(dir / m.entries[1].image_path);
    Image tiny = Image::zeros(8, 8);
    write_image_u8((dir / m.entries[3].mask_path).string(), tiny);

    std::string msg;
    try {
        load_dataset((dir / "manifest.json").string());
    } catch (const IoError& e) {
        msg = e.what();
    }
    REQUIRE_FALSE(msg.empty());
    CHECK(msg.find(m.entries[1].id) != std::string::npos);
    CHECK(msg.find(m.entries[3].id) != std::string::npos);
    CHECK(msg.find("2 invalid") != std::string::npos);
}

TEST_CASE("image/mask tree discovery pairs files by stem") {
    fs::path root = fresh_dir("tree");
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    Image img = Image::zeros(16, 16);
    for (size_t i = 0; i < img.pix.size(); ++i) img.pix[i] = double(i % 256) / 255.0;
    Image msk = Image::zeros(16, 16);
    for (int64_t r = 4; r < 12; ++r)
        for (int64_t c = 4; c < 12; ++c) msk.pix[size_t(r * 16 + c)] = 1.0;
    for (const char* stem : {"b_item", "a_item", "c_item"}) {
        write_image_u8((root / "images" / (std::string(stem) + ".pgm")).string(), img);
        write_image_u8((root / "masks" / (std::string(stem) + ".pgm")).string(), msk);
    }

    Dataset d = load_image_mask_tree(root.string());
    CHECK(d.task_kind.empty());
    REQUIRE(d.entries.size() == 3);
    CHECK(d.entries[0].id == "a_item");
    CHECK(d.entries[2].id == "c_item");
    CHECK(is_binary(d.entries[0].mask));
    CHECK_FALSE(d.entries[0].has_extra);

    // An image without a matching mask is an error that names the stem.
    write_image_u8((root / "images" / "orphan.pgm").string(), img);
    std::string msg;
    try {
        load_image_mask_tree(root.string());
    } catch (const IoError& e) {
        msg = e.what();
    }
    CHECK(msg.find("orphan") != std::string::npos);

    CHECK_THROWS_AS(load_image_mask_tree((root / "nope").string()), IoError);
    fs::path empty = fresh_dir("tree_empty");
    fs::create_directories(empty / "images");
    fs::create_directories(empty / "masks");
    CHECK_THROWS_AS(load_image_mask_tree(empty.string()), IoError);
}

TEST_CASE("generation specs round-trip through JSON with contrast resolved") {
    GenSpec spec;
    spec.kind = GenKind::camouflaged;
    spec.count = 9;
    spec.image_size = 24;
    spec.seed = 777;
    std::string text = gen_spec_to_json(spec);

    GenSpec back = gen_spec_from_json(text);
    CHECK(back.kind == GenKind::camouflaged);
    CHECK(back.count == 9);
    CHECK(back.image_size == 24);
    CHECK(back.seed == 777);
    // The default camouflage contrast is written out explicitly.
    CHECK(back.contrast == doctest::Approx(0.08).epsilon(1e-12));
    CHECK(gen_spec_to_json(back) == text);

    // Minimal spec: kind + seed suffice, defaults fill the rest.
    GenSpec tiny = gen_spec_from_json(R"({"kind":"salient","seed":3})");
    CHECK(tiny.count == GenSpec{}.count);
    CHECK(tiny.effective_contrast() == doctest::Approx(0.8));

    CHECK_THROWS_AS(gen_spec_from_json("not json"), ConfigError);
    CHECK_THROWS_AS(gen_spec_from_json(R"({"seed":3})"), ConfigError);
    CHECK_THROWS_AS(gen_spec_from_json(R"({"kind":"salient"})"), ConfigError);
    CHECK_THROWS_AS(gen_spec_from_json(R"({"kind":"salient","seed":3,"zebra":1})"), ConfigError);
    CHECK_THROWS_AS(gen_spec_from_json(R"({"kind":"salient","seed":3,"count":"many"})"), ConfigError);
    CHECK_THROWS_AS(gen_spec_from_json(R"({"kind":"dual","seed":3,"count":0})"), ConfigError);
}

#include "jointseg/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>

#include "jointseg/rng.hpp"

namespace fs = std::filesystem;

namespace jointseg {

std::string to_string(GenKind k) {
    switch (k) {
        case GenKind::salient: return "salient";
        case GenKind::camouflaged: return "camouflaged";
        case GenKind::dual: return "dual";
    }
    throw ConfigError("invalid generation kind enum value");
}

GenKind gen_kind_from_string(const std::string& s) {
    if (s == "salient") return GenKind::salient;
    if (s == "camouflaged") return GenKind::camouflaged;
    if (s == "dual") return GenKind::dual;
    throw ConfigError("unknown generation kind '" + s + "' (want salient|camouflaged|dual)");
}

double GenSpec::effective_contrast() const {
    if (contrast > 0.0) return contrast;
    return kind == GenKind::camouflaged ? 0.08 : 0.8;
}

GenSpec gen_spec_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("generation spec is not valid JSON: ") + e.what());
    }
    const std::set<std::string> known = {"kind",          "count",         "image_size",
                                         "seed",          "contrast",      "camo_contrast",
                                         "texture_grain", "distractor_prob"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw ConfigError("unknown generation spec key '" + it.key() + "'");
    if (!j.contains("kind")) throw ConfigError("generation spec needs a kind");
    if (!j.contains("seed")) throw ConfigError("generation spec needs an explicit seed");
    GenSpec spec;
    try {
        spec.kind = gen_kind_from_string(j["kind"].get<std::string>());
        spec.seed = j["seed"].get<uint64_t>();
        if (j.contains("count")) spec.count = j["count"].get<int64_t>();
        if (j.contains("image_size")) spec.image_size = j["image_size"].get<int64_t>();
        if (j.contains("contrast")) spec.contrast = j["contrast"].get<double>();
        if (j.contains("camo_contrast")) spec.camo_contrast = j["camo_contrast"].get<double>();
        if (j.contains("texture_grain")) spec.texture_grain = j["texture_grain"].get<int64_t>();
        if (j.contains("distractor_prob")) spec.distractor_prob = j["distractor_prob"].get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("generation spec field has the wrong type: ") + e.what());
    }
    spec.validate();
    return spec;
}

std::string gen_spec_to_json(const GenSpec& spec) {
    nlohmann::json j;
    j["kind"] = to_string(spec.kind);
    j["count"] = spec.count;
    j["image_size"] = spec.image_size;
    j["seed"] = spec.seed;
    j["contrast"] = spec.effective_contrast();
    j["camo_contrast"] = spec.camo_contrast;
    j["texture_grain"] = spec.texture_grain;
    j["distractor_prob"] = spec.distractor_prob;
    return j.dump(2) + "\n";
}

void GenSpec::validate() const {
    if (count < 1) throw ConfigError("count must be >= 1");
    if (image_size < 16) throw ConfigError("image_size must be >= 16");
    if (effective_contrast() <= 0.0 || effective_contrast() > 1.0)
        throw ConfigError("contrast must be in (0,1]");
    if (texture_grain < 2 || texture_grain > image_size)
        throw ConfigError("texture_grain must be in [2, image_size]");
    if (kind == GenKind::dual) {
        if (camo_contrast <= 0.0 || camo_contrast > 1.0)
            throw ConfigError("camo_contrast must be in (0,1]");
        if (effective_contrast() <= camo_contrast)
            throw ConfigError("dual images need contrast strictly above camo_contrast");
    }
    if (distractor_prob < 0.0 || distractor_prob > 1.0)
        throw ConfigError("distractor_prob must be in [0,1]");
    if (kind == GenKind::dual && distractor_prob != 0.0)
        throw ConfigError("dual images already carry both blob styles; distractor_prob must be 0");
}

namespace {

// Smooth value noise: a coarse grid of uniform values, bilinearly sampled.
struct ValueNoise {
    int64_t grain;
    int64_t cols;
    std::vector<double> grid;

    ValueNoise(Rng& rng, int64_t size, int64_t grain_px, double amp) : grain(grain_px) {
        cols = size / grain + 2;
        grid.resize(static_cast<size_t>(cols) * cols);
        for (auto& v : grid) v = rng.uniform(-amp, amp);
    }
    double at(int64_t y, int64_t x) const {
        double u = static_cast<double>(x) / static_cast<double>(grain);
        double v = static_cast<double>(y) / static_cast<double>(grain);
        int64_t ix = static_cast<int64_t>(u), iy = static_cast<int64_t>(v);
        double fx = u - static_cast<double>(ix), fy = v - static_cast<double>(iy);
        auto g = [&](int64_t gy, int64_t gx) { return grid[static_cast<size_t>(gy) * cols + gx]; };
        double top = g(iy, ix) * (1.0 - fx) + g(iy, ix + 1) * fx;
        double bot = g(iy + 1, ix) * (1.0 - fx) + g(iy + 1, ix + 1) * fx;
        return top * (1.0 - fy) + bot * fy;
    }
};

// A smooth blob: an ellipse whose radius is modulated by three low-frequency
// cosine harmonics.
struct Blob {
    double cy, cx, ry, rx;
    double a[3], phi[3];

    static Blob sample(Rng& rng, int64_t size) {
        Blob b;
        double s = static_cast<double>(size);
        b.cy = rng.uniform(0.25, 0.75) * s;
        b.cx = rng.uniform(0.25, 0.75) * s;
        b.ry = rng.uniform(0.10, 0.22) * s;
        b.rx = rng.uniform(0.10, 0.22) * s;
        for (int k = 0; k < 3; ++k) {
            b.a[k] = rng.uniform(0.0, 0.12);
            b.phi[k] = rng.uniform(0.0, 6.283185307179586);
        }
        return b;
    }
    bool contains(int64_t y, int64_t x) const {
        double dy = (static_cast<double>(y) - cy) / ry;
        double dx = (static_cast<double>(x) - cx) / rx;
        double r = std::sqrt(dy * dy + dx * dx);
        double th = std::atan2(dy, dx);
        double rho = 1.0;
        for (int k = 0; k < 3; ++k) rho += a[k] * std::cos((k + 1) * th + phi[k]);
        return r <= rho;
    }
};

Image blob_mask(const Blob& b, int64_t size) {
    Image m = Image::zeros(static_cast<int>(size), static_cast<int>(size));
    for (int64_t y = 0; y < size; ++y)
        for (int64_t x = 0; x < size; ++x)
            if (b.contains(y, x)) m.at(static_cast<int>(y), static_cast<int>(x)) = 1.0;
    return m;
}

bool area_ok(const Image& mask) {
    double f = mask_area_fraction(mask);
    return f >= 0.02 && f <= 0.30;
}

Image sample_mask(Rng& rng, int64_t size) {
    for (int attempt = 0; attempt < 100; ++attempt) {
        Image m = blob_mask(Blob::sample(rng, size), size);
        if (area_ok(m)) return m;
    }
    throw ContractError("could not sample a blob with 2-30% area in 100 attempts");
}

bool disjoint(const Image& a, const Image& b) {
    for (size_t i = 0; i < a.pix.size(); ++i)
        if (a.pix[i] == 1.0 && b.pix[i] == 1.0) return false;
    return true;
}

// Background level such that level + polarity*offset keeps the textured
// blob inside [0,1] with margin for the noise amplitude.
double feasible_level(Rng& rng, double offset, double polarity, double margin) {
    double lo = margin, hi = 1.0 - margin;
    if (polarity > 0.0)
        hi -= offset;
    else
        lo += offset;
    return rng.uniform(lo, hi);
}

std::string pad4(int64_t i) {
    std::string s = std::to_string(i);
    return s.size() >= 4 ? s : std::string(4 - s.size(), '0') + s;
}

constexpr double kNoiseAmp = 0.06;  // texture half-range around the base level

}  // namespace

Manifest generate_dataset(const GenSpec& spec, const std::string& out_dir, bool force) {
    spec.validate();
    fs::path dir(out_dir);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output dir " + out_dir + ": " + ec.message());
    fs::path manifest_path = dir / "manifest.json";
    if (!force && fs::exists(manifest_path))
        throw IoError("refusing to overwrite existing " + manifest_path.string() +
                      " (pass force to regenerate)");

    const int64_t size = spec.image_size;
    const double c_primary = spec.effective_contrast();
    // Margin shrinks for extreme contrasts so a feasible level always exists.
    const double margin = std::min(kNoiseAmp + 0.01, (1.0 - c_primary) / 2.0);

    Manifest m;
    m.task_kind = to_string(spec.kind);
    for (int64_t i = 0; i < spec.count; ++i) {
        const std::string id = m.task_kind + "_" + pad4(i);
        Rng rng = Rng::derive(spec.seed, id);

        ValueNoise noise(rng, size, spec.texture_grain, kNoiseAmp);
        double polarity = rng.uniform() < 0.5 ? 1.0 : -1.0;
        double level = feasible_level(rng, c_primary, polarity, margin);

        Image mask = sample_mask(rng, size);
        Image extra;
        bool has_extra = spec.kind == GenKind::dual;
        if (has_extra) {
            bool placed = false;
            for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
                extra = sample_mask(rng, size);
                placed = disjoint(mask, extra);
            }
            if (!placed)
                throw ContractError("could not place disjoint blobs in 100 attempts (id " + id + ")");
        }
        // The camouflaged offset keeps whichever polarity stays in range.
        double camo_pol = rng.uniform() < 0.5 ? 1.0 : -1.0;
        if (has_extra) {
            if (level + camo_pol * spec.camo_contrast > 1.0 - kNoiseAmp ||
                level + camo_pol * spec.camo_contrast < kNoiseAmp)
                camo_pol = -camo_pol;
        }

        // Optional unannotated opposite-style blob, rendered as background.
        // The coin is only drawn when the feature is on, so prob = 0 keeps
        // the draw sequence (and every output byte) of older datasets.
        Image distractor;
        bool has_distractor = false;
        const double dist_c = spec.kind == GenKind::salient ? spec.camo_contrast : 0.8;
        double dist_pol = 0.0;
        if (spec.distractor_prob > 0.0 && rng.uniform() < spec.distractor_prob) {
            for (int attempt = 0; attempt < 100 && !has_distractor; ++attempt) {
                distractor = sample_mask(rng, size);
                has_distractor = disjoint(mask, distractor) &&
                                 (!has_extra || disjoint(extra, distractor));
            }
            if (has_distractor) {
                dist_pol = rng.uniform() < 0.5 ? 1.0 : -1.0;
                if (level + dist_pol * dist_c > 1.0 - kNoiseAmp ||
                    level + dist_pol * dist_c < kNoiseAmp)
                    dist_pol = -dist_pol;
            }
        }

        Image img = Image::zeros(static_cast<int>(size), static_cast<int>(size));
        for (int64_t y = 0; y < size; ++y)
            for (int64_t x = 0; x < size; ++x) {
                // The texture continues through every blob; only the mean
                // level shifts. A faint shift is what makes a blob
                // "camouflaged" rather than invisible.
                double v = level + noise.at(y, x);
                if (mask.at(static_cast<int>(y), static_cast<int>(x)) == 1.0)
                    v += polarity * c_primary;
                else if (has_extra && extra.at(static_cast<int>(y), static_cast<int>(x)) == 1.0)
                    v += camo_pol * spec.camo_contrast;
                else if (has_distractor &&
                         distractor.at(static_cast<int>(y), static_cast<int>(x)) == 1.0)
                    v += dist_pol * dist_c;
                img.at(static_cast<int>(y), static_cast<int>(x)) = std::min(1.0, std::max(0.0, v));
            }

        ManifestEntry e;
        e.id = id;
        e.image_path = id + ".pgm";
        e.mask_path = id + "_mask.pgm";
        write_image_u8((dir / e.image_path).string(), img);
        write_image_u8((dir / e.mask_path).string(), mask);
        if (has_extra) {
            e.extra_mask_path = id + "_camo_mask.pgm";
            write_image_u8((dir / e.extra_mask_path).string(), extra);
        }
        m.entries.push_back(std::move(e));
    }
    write_manifest(m, manifest_path.string());
    return m;
}

void write_manifest(const Manifest& m, const std::string& path) {
    nlohmann::json j;
    j["version"] = m.version;
    j["task_kind"] = m.task_kind;
    auto arr = nlohmann::json::array();
    for (const auto& e : m.entries) {
        nlohmann::json je;
        je["id"] = e.id;
        je["image_path"] = e.image_path;
        je["mask_path"] = e.mask_path;
        if (!e.extra_mask_path.empty()) je["extra_mask_path"] = e.extra_mask_path;
        arr.push_back(std::move(je));
    }
    j["entries"] = std::move(arr);
    atomic_write_text(path, j.dump(2) + "\n");
}

Manifest read_manifest(const std::string& path) {
    std::vector<unsigned char> bytes;
    try {
        bytes = read_file_bytes(path);
    } catch (const IoError&) {
        throw IoError("cannot read manifest " + path);
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + path + " is not valid JSON: " + e.what());
    }
    Manifest m;
    try {
        const std::set<std::string> known = {"version", "task_kind", "entries"};
        for (auto it = j.begin(); it != j.end(); ++it)
            if (!known.count(it.key()))
                throw ConfigError("manifest " + path + ": unknown key '" + it.key() + "'");
        m.version = j.at("version").get<int64_t>();
        if (m.version != 1)
            throw ConfigError("manifest " + path + ": unsupported version " +
                              std::to_string(m.version));
        m.task_kind = j.at("task_kind").get<std::string>();
        for (const auto& je : j.at("entries")) {
            const std::set<std::string> ekeys = {"id", "image_path", "mask_path", "extra_mask_path"};
            for (auto it = je.begin(); it != je.end(); ++it)
                if (!ekeys.count(it.key()))
                    throw ConfigError("manifest " + path + ": unknown entry key '" + it.key() + "'");
            ManifestEntry e;
            e.id = je.at("id").get<std::string>();
            e.image_path = je.at("image_path").get<std::string>();
            e.mask_path = je.at("mask_path").get<std::string>();
            if (je.contains("extra_mask_path"))
                e.extra_mask_path = je["extra_mask_path"].get<std::string>();
            m.entries.push_back(std::move(e));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("manifest " + path + " is malformed: " + e.what());
    }
    std::set<std::string> ids;
    for (const auto& e : m.entries)
        if (!ids.insert(e.id).second)
            throw ConfigError("manifest " + path + ": duplicate id '" + e.id + "'");
    return m;
}

namespace {

Dataset load_entries(const std::vector<ManifestEntry>& entries, const fs::path& base,
                     const std::string& task_kind, const std::string& origin) {
    Dataset ds;
    ds.task_kind = task_kind;
    std::vector<std::string> offenders;
    for (const auto& e : entries) {
        DatasetEntry out;
        out.id = e.id;
        try {
            out.image = read_image((base / e.image_path).string());
            Image raw_mask = read_image((base / e.mask_path).string());
            out.mask = to_mask(raw_mask);
            if (out.mask.height != out.image.height || out.mask.width != out.image.width)
                throw ShapeError("image is " + std::to_string(out.image.height) + "x" +
                                 std::to_string(out.image.width) + " but mask is " +
                                 std::to_string(out.mask.height) + "x" +
                                 std::to_string(out.mask.width));
            if (!e.extra_mask_path.empty()) {
                out.extra_mask = to_mask(read_image((base / e.extra_mask_path).string()));
                out.has_extra = true;
                if (out.extra_mask.height != out.image.height ||
                    out.extra_mask.width != out.image.width)
                    throw ShapeError("extra mask shape differs from the image");
            }
        } catch (const std::exception& ex) {
            offenders.push_back(e.id + ": " + ex.what());
            continue;
        }
        ds.entries.push_back(std::move(out));
    }
    if (!offenders.empty()) {
        std::string msg = origin + ": " + std::to_string(offenders.size()) + " invalid entr" +
                          (offenders.size() == 1 ? "y" : "ies") + ":";
        for (const auto& o : offenders) msg += "\n  " + o;
        throw IoError(msg);
    }
    std::sort(ds.entries.begin(), ds.entries.end(),
              [](const DatasetEntry& a, const DatasetEntry& b) { return a.id < b.id; });
    return ds;
}

}  // namespace

Dataset load_dataset(const std::string& manifest_path) {
    Manifest m = read_manifest(manifest_path);
    fs::path base = fs::path(manifest_path).parent_path();
    return load_entries(m.entries, base, m.task_kind, "manifest " + manifest_path);
}

Dataset load_image_mask_tree(const std::string& root) {
    fs::path images = fs::path(root) / "images";
    fs::path masks = fs::path(root) / "masks";
    if (!fs::is_directory(images) || !fs::is_directory(masks))
        throw IoError("expected " + root + " to contain images/ and masks/ directories");

    std::map<std::string, fs::path> mask_by_stem;
    for (const auto& de : fs::directory_iterator(masks))
        if (de.is_regular_file()) mask_by_stem[de.path().stem().string()] = de.path();

    std::vector<ManifestEntry> entries;
    std::vector<std::string> unmatched;
    for (const auto& de : fs::directory_iterator(images)) {
        if (!de.is_regular_file()) continue;
        std::string stem = de.path().stem().string();
        auto it = mask_by_stem.find(stem);
        if (it == mask_by_stem.end()) {
            unmatched.push_back(stem);
            continue;
        }
        ManifestEntry e;
        e.id = stem;
        e.image_path = fs::relative(de.path(), root).string();
        e.mask_path = fs::relative(it->second, root).string();
        entries.push_back(std::move(e));
    }
    if (!unmatched.empty()) {
        std::sort(unmatched.begin(), unmatched.end());
        std::string msg = root + ": images without a matching mask:";
        for (const auto& u : unmatched) msg += " " + u;
        throw IoError(msg);
    }
    if (entries.empty()) throw IoError(root + ": no image/mask pairs found");
    return load_entries(entries, root, "", "tree " + root);
}

}  // namespace jointseg

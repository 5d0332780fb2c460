#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jointseg/errors.hpp"
#include "jointseg/image.hpp"

namespace jointseg {

// What a generated pair looks like: "salient" blobs sit at a strong mean
// offset from the textured background; "camouflaged" blobs continue the
// background texture with only a faint offset; "dual" images carry one of
// each (disjoint), with the camouflaged mask as the extra mask.
enum class GenKind { salient, camouflaged, dual };

std::string to_string(GenKind k);
GenKind gen_kind_from_string(const std::string& s);

struct GenSpec {
    GenKind kind = GenKind::salient;
    int64_t count = 16;
    int64_t image_size = 64;
    uint64_t seed = 0;
    // Mean-intensity offset of the (primary) blob. <= 0 selects the kind
    // default: 0.8 for salient/dual, 0.08 for camouflaged.
    double contrast = -1.0;
    // Dual images only: the offset of the camouflaged blob.
    double camo_contrast = 0.08;
    int64_t texture_grain = 8;  // background value-noise cell size in pixels
    // Probability that an image also carries an unannotated blob styled like
    // the opposite kind (faint in salient images, strong in camouflaged
    // ones), rendered as background. Mirrors photos where the other task's
    // objects appear unlabeled. Must stay 0 for dual images.
    double distractor_prob = 0.0;

    void validate() const;
    double effective_contrast() const;
};

// Strict JSON form of a GenSpec: kind and seed are mandatory, unknown keys
// rejected. gen_spec_to_json writes the resolved form (contrast made
// explicit), which regenerates the dataset bit-exactly.
GenSpec gen_spec_from_json(const std::string& text);
std::string gen_spec_to_json(const GenSpec& spec);

struct ManifestEntry {
    std::string id;
    std::string image_path;             // relative to the manifest's directory
    std::string mask_path;
    std::string extra_mask_path;        // dual datasets only; empty otherwise
};

struct Manifest {
    int64_t version = 1;
    std::string task_kind;              // "salient" | "camouflaged" | "dual"
    std::vector<ManifestEntry> entries;
};

// Writes count image/mask pairs plus manifest.json into out_dir. Fully
// determined by the GenSpec: every entry draws from its own generator derived
// from (seed, id), so outputs are byte-identical across runs and a prefix of
// a larger count. Refuses to overwrite an existing manifest unless force.
Manifest generate_dataset(const GenSpec& spec, const std::string& out_dir, bool force = false);

Manifest read_manifest(const std::string& path);
void write_manifest(const Manifest& m, const std::string& path);

struct DatasetEntry {
    std::string id;
    Image image;
    Image mask;         // binary after the 0.5 threshold
    Image extra_mask;   // dual only
    bool has_extra = false;
};

struct Dataset {
    std::string task_kind;
    std::vector<DatasetEntry> entries;  // ascending id order
};

// Loads every pair named by the manifest; collects ALL invalid entries
// (missing files, shape mismatches) into one error instead of stopping at
// the first.
Dataset load_dataset(const std::string& manifest_path);

// Manifest-free layout: root/images/* and root/masks/* matched by filename
// stem. task_kind is left empty for the caller to assign.
Dataset load_image_mask_tree(const std::string& root);

}  // namespace jointseg

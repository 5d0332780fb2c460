#pragma once

#include <cstdint>
#include <string>

#include "jointseg/model.hpp"

namespace jointseg {

// Training position recorded alongside the weights.
struct CheckpointMeta {
    int64_t step = 0;
    uint64_t seed = 0;
    uint64_t rng_state = 0;  // job PRNG state at save time
};

// File layout (all integers little-endian):
//   bytes 0..3   magic "JNT1"
//   bytes 4..11  u64 length M of the metadata block
//   M bytes      metadata: canonical JSON (sorted keys, no whitespace) with
//                version, the full model config, the task registry, step,
//                seed, rng_state, and a parameter table of
//                {name, shape, offset, count} in parameter order, where
//                offset is the byte offset into the data section
//   rest         raw f32 parameter data, concatenated in table order
//
// Weights are narrowed to f32 on save and re-widened to f64 on load, so
// load -> save reproduces the file byte for byte.
void save_checkpoint(const std::string& path, const JointModel& model, const CheckpointMeta& meta);

struct LoadedCheckpoint {
    CheckpointMeta meta;
    JointModel model;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace jointseg

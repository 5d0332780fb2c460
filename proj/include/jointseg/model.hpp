#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "jointseg/errors.hpp"
#include "jointseg/rng.hpp"
#include "jointseg/tensor.hpp"

namespace jointseg {

// Where the per-task normalization sites sit in the block stack.
enum class DlmPlacement { decoder_all, decoder_last_k, encoder_all, encoder_and_decoder, none };
// What runs at a site: per-task distribution normalization (learned mu/sigma
// per task) or one shared layer norm (the ablation baseline).
enum class NormMode { dlm, layer_norm };

std::string to_string(DlmPlacement p);
DlmPlacement dlm_placement_from_string(const std::string& s);
std::string to_string(NormMode m);
NormMode norm_mode_from_string(const std::string& s);

struct ModelConfig {
    int64_t image_size = 64;
    int64_t patch_size = 8;
    int64_t embed_dim = 128;
    int64_t encoder_depth = 4;
    int64_t decoder_depth = 4;
    int64_t heads = 4;
    double mlp_ratio = 4.0;
    DlmPlacement dlm_placement = DlmPlacement::decoder_all;
    int64_t dlm_last_k = 1;  // only read when dlm_placement == decoder_last_k
    NormMode norm_mode = NormMode::dlm;
    std::vector<std::string> tasks;

    void validate() const;     // throws ConfigError on any violated invariant
    int64_t tokens() const { return (image_size / patch_size) * (image_size / patch_size); }
    // Block positions that carry a normalization site, in forward order
    // (encoder blocks ascending, then decoder blocks ascending).
    struct Site {
        bool in_encoder;
        int64_t block;
    };
    std::vector<Site> dlm_sites() const;
};

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

// [S,S] image -> [(S/P)^2, P^2] tokens, each token the row-major flattening
// of its patch. A pure pixel permutation (lossless, differentiable).
Tensor patchify(const Tensor& image, int64_t patch_size);
// Exact inverse of patchify for the given square image size.
Tensor unpatchify(const Tensor& tokens, int64_t image_size);

// Distribution normalization: (x - mu) / sqrt(sigma^2 + 1e-6), mu and sigma
// broadcast over rows. sigma is unconstrained; it only enters squared.
Tensor dlm_normalize(const Tensor& x, const Tensor& mu, const Tensor& sigma);

struct NamedParam {
    std::string name;
    Tensor value;
};

// Shared ViT encoder-decoder with task-routed normalization sites. All
// parameters are created in one fixed, documented order (the order of
// parameters()), which checkpointing and the optimizer rely on.
class JointModel {
  public:
    JointModel(ModelConfig cfg, Rng& rng);

    const ModelConfig& config() const { return cfg_; }

    // One image [S,S] -> prediction [S,S] in (0,1), routed through the
    // task's sites. Throws RegistryError for an unknown task id.
    Tensor forward(const Tensor& image, const std::string& task) const;

    std::vector<NamedParam>& parameters() { return params_; }
    const std::vector<NamedParam>& parameters() const { return params_; }
    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;

    // Disjoint, exhaustive split of parameter names: shared trunk vs the
    // per-task site parameters.
    struct Partition {
        std::vector<std::string> shared;
        std::map<std::string, std::vector<std::string>> per_task;
    };
    Partition parameter_partition() const;

  private:
    Tensor block_forward(const Tensor& x, const std::string& prefix) const;
    Tensor site_forward(const Tensor& x, size_t site_index, const std::string& task) const;

    ModelConfig cfg_;
    std::vector<NamedParam> params_;
    std::map<std::string, size_t> index_;
};

}  // namespace jointseg

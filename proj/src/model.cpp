#include "jointseg/model.hpp"

#include <json.hpp>

#include <cmath>
#include <set>

namespace jointseg {

std::string to_string(DlmPlacement p) {
    switch (p) {
        case DlmPlacement::decoder_all: return "decoder_all";
        case DlmPlacement::decoder_last_k: return "decoder_last_k";
        case DlmPlacement::encoder_all: return "encoder_all";
        case DlmPlacement::encoder_and_decoder: return "encoder_and_decoder";
        case DlmPlacement::none: return "none";
    }
    throw ConfigError("invalid placement enum value");
}

DlmPlacement dlm_placement_from_string(const std::string& s) {
    if (s == "decoder_all") return DlmPlacement::decoder_all;
    if (s == "decoder_last_k") return DlmPlacement::decoder_last_k;
    if (s == "encoder_all") return DlmPlacement::encoder_all;
    if (s == "encoder_and_decoder") return DlmPlacement::encoder_and_decoder;
    if (s == "none") return DlmPlacement::none;
    throw ConfigError("unknown dlm_placement '" + s +
                      "' (want decoder_all|decoder_last_k|encoder_all|encoder_and_decoder|none)");
}

std::string to_string(NormMode m) { return m == NormMode::dlm ? "dlm" : "layer_norm"; }

NormMode norm_mode_from_string(const std::string& s) {
    if (s == "dlm") return NormMode::dlm;
    if (s == "layer_norm") return NormMode::layer_norm;
    throw ConfigError("unknown norm_mode '" + s + "' (want dlm|layer_norm)");
}

void ModelConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0) throw ConfigError("image_size and patch_size must be positive");
    if (image_size % patch_size != 0) throw ConfigError("patch_size must divide image_size");
    if (embed_dim <= 0 || heads <= 0) throw ConfigError("embed_dim and heads must be positive");
    if (embed_dim % heads != 0) throw ConfigError("heads must divide embed_dim");
    if (encoder_depth < 0 || decoder_depth < 0) throw ConfigError("depths must be non-negative");
    if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
    if (dlm_placement == DlmPlacement::decoder_last_k && (dlm_last_k < 1 || dlm_last_k > decoder_depth))
        throw ConfigError("dlm_last_k must be in [1, decoder_depth]");
    if (tasks.empty()) throw ConfigError("tasks must be non-empty");
    std::set<std::string> seen(tasks.begin(), tasks.end());
    if (seen.size() != tasks.size()) throw ConfigError("task ids must be unique");
    for (const auto& t : tasks)
        if (t.empty()) throw ConfigError("task ids must be non-empty strings");
}

std::vector<ModelConfig::Site> ModelConfig::dlm_sites() const {
    std::vector<Site> sites;
    auto enc = [&] {
        for (int64_t i = 0; i < encoder_depth; ++i) sites.push_back({true, i});
    };
    auto dec = [&](int64_t from) {
        for (int64_t i = from; i < decoder_depth; ++i) sites.push_back({false, i});
    };
    switch (dlm_placement) {
        case DlmPlacement::decoder_all: dec(0); break;
        case DlmPlacement::decoder_last_k: dec(decoder_depth - dlm_last_k); break;
        case DlmPlacement::encoder_all: enc(); break;
        case DlmPlacement::encoder_and_decoder: enc(); dec(0); break;
        case DlmPlacement::none: break;
    }
    return sites;
}

std::string model_config_to_json(const ModelConfig& cfg) {
    nlohmann::json j;
    j["image_size"] = cfg.image_size;
    j["patch_size"] = cfg.patch_size;
    j["embed_dim"] = cfg.embed_dim;
    j["encoder_depth"] = cfg.encoder_depth;
    j["decoder_depth"] = cfg.decoder_depth;
    j["heads"] = cfg.heads;
    j["mlp_ratio"] = cfg.mlp_ratio;
    j["dlm_placement"] = to_string(cfg.dlm_placement);
    j["dlm_last_k"] = cfg.dlm_last_k;
    j["norm_mode"] = to_string(cfg.norm_mode);
    j["tasks"] = cfg.tasks;
    return j.dump();
}

ModelConfig model_config_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config is not valid JSON: ") + e.what());
    }
    ModelConfig cfg;
    const std::set<std::string> known = {"image_size", "patch_size",    "embed_dim", "encoder_depth",
                                         "decoder_depth", "heads",      "mlp_ratio", "dlm_placement",
                                         "dlm_last_k",    "norm_mode",  "tasks"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key())) throw ConfigError("unknown model config key '" + it.key() + "'");
    try {
        if (j.contains("image_size")) cfg.image_size = j["image_size"].get<int64_t>();
        if (j.contains("patch_size")) cfg.patch_size = j["patch_size"].get<int64_t>();
        if (j.contains("embed_dim")) cfg.embed_dim = j["embed_dim"].get<int64_t>();
        if (j.contains("encoder_depth")) cfg.encoder_depth = j["encoder_depth"].get<int64_t>();
        if (j.contains("decoder_depth")) cfg.decoder_depth = j["decoder_depth"].get<int64_t>();
        if (j.contains("heads")) cfg.heads = j["heads"].get<int64_t>();
        if (j.contains("mlp_ratio")) cfg.mlp_ratio = j["mlp_ratio"].get<double>();
        if (j.contains("dlm_placement"))
            cfg.dlm_placement = dlm_placement_from_string(j["dlm_placement"].get<std::string>());
        if (j.contains("dlm_last_k")) cfg.dlm_last_k = j["dlm_last_k"].get<int64_t>();
        if (j.contains("norm_mode")) cfg.norm_mode = norm_mode_from_string(j["norm_mode"].get<std::string>());
        if (j.contains("tasks")) cfg.tasks = j["tasks"].get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("model config field has the wrong type: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

Tensor patchify(const Tensor& image, int64_t patch_size) {
    if (image.rank() != 2 || image.shape()[0] != image.shape()[1])
        throw ShapeError("patchify wants a square [S,S] image, got " + shape_str(image.shape()));
    const int64_t s = image.shape()[0], p = patch_size;
    if (p <= 0 || s % p != 0) throw ShapeError("patch size must divide the image size");
    const int64_t g = s / p;
    std::vector<int64_t> idx(static_cast<size_t>(s) * s);
    for (int64_t ty = 0; ty < g; ++ty)
        for (int64_t tx = 0; tx < g; ++tx)
            for (int64_t py = 0; py < p; ++py)
                for (int64_t px = 0; px < p; ++px)
                    idx[static_cast<size_t>((ty * g + tx) * p * p + py * p + px)] =
                        (ty * p + py) * s + (tx * p + px);
    return gather(image, idx, {g * g, p * p});
}

Tensor unpatchify(const Tensor& tokens, int64_t image_size) {
    if (tokens.rank() != 2) throw ShapeError("unpatchify wants [tokens, P^2], got " + shape_str(tokens.shape()));
    const int64_t s = image_size;
    const int64_t p2 = tokens.shape()[1];
    const int64_t p = static_cast<int64_t>(std::llround(std::sqrt(static_cast<double>(p2))));
    if (p * p != p2 || p <= 0 || s % p != 0 || tokens.shape()[0] * p2 != s * s)
        throw ShapeError("unpatchify: token grid " + shape_str(tokens.shape()) +
                         " does not tile a " + std::to_string(s) + "x" + std::to_string(s) + " image");
    const int64_t g = s / p;
    std::vector<int64_t> idx(static_cast<size_t>(s) * s);
    for (int64_t ty = 0; ty < g; ++ty)
        for (int64_t tx = 0; tx < g; ++tx)
            for (int64_t py = 0; py < p; ++py)
                for (int64_t px = 0; px < p; ++px)
                    idx[static_cast<size_t>((ty * p + py) * s + (tx * p + px))] =
                        (ty * g + tx) * p * p + py * p + px;
    return gather(tokens, idx, {s, s});
}

namespace {

constexpr double kDlmEps = 1e-6;   // stabilizer inside sqrt(sigma^2 + eps)
constexpr double kLnEps = 1e-5;    // layer-norm variance stabilizer

// Layer norm over the last axis of [tokens, d], composed from primitives so
// the tape differentiates it.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    Tensor mu = mean(x, {1}, true);
    Tensor xc = sub(x, mu);
    Tensor var = mean(mul(xc, xc), {1}, true);
    Tensor xn = div(xc, sqrt(add(var, kLnEps)));
    return add(mul(xn, gamma), beta);
}

Tensor gelu(const Tensor& x) { return mul(x, sigmoid(mul(x, 1.702))); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add(matmul(x, w), b);
}

}  // namespace

Tensor dlm_normalize(const Tensor& x, const Tensor& mu, const Tensor& sigma) {
    if (mu.shape() != sigma.shape())
        throw ShapeError("dlm_normalize: mu " + shape_str(mu.shape()) + " vs sigma " +
                         shape_str(sigma.shape()));
    if (x.shape().empty() || x.shape().back() != mu.shape().back())
        throw ShapeError("dlm_normalize: x " + shape_str(x.shape()) + " does not end in dim " +
                         shape_str(mu.shape()));
    return div(sub(x, mu), sqrt(add(mul(sigma, sigma), kDlmEps)));
}

JointModel::JointModel(ModelConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    const int64_t d = cfg_.embed_dim;
    const int64_t p2 = cfg_.patch_size * cfg_.patch_size;
    const int64_t hidden = static_cast<int64_t>(std::llround(cfg_.mlp_ratio * static_cast<double>(d)));

    auto push = [&](const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.push_back({name, std::move(t)});
    };
    auto weight = [&](const std::string& name, int64_t rows, int64_t cols) {
        push(name, Tensor::trunc_normal({rows, cols}, rng, 0.02));
    };
    auto bias = [&](const std::string& name, int64_t nd) { push(name, Tensor::zeros({nd})); };
    auto ln_pair = [&](const std::string& prefix) {
        push(prefix + ".gamma", Tensor::full({d}, 1.0));
        push(prefix + ".beta", Tensor::zeros({d}));
    };
    auto block = [&](const std::string& prefix) {
        ln_pair(prefix + ".ln1");
        for (const char* proj : {"q", "k", "v", "o"}) {
            weight(prefix + ".attn." + proj + ".weight", d, d);
            bias(prefix + ".attn." + proj + ".bias", d);
        }
        ln_pair(prefix + ".ln2");
        weight(prefix + ".mlp.fc1.weight", d, hidden);
        bias(prefix + ".mlp.fc1.bias", hidden);
        weight(prefix + ".mlp.fc2.weight", hidden, d);
        bias(prefix + ".mlp.fc2.bias", d);
    };

    // Fixed construction order: embed, positions, encoder blocks, decoder
    // blocks, shared site norms (layer_norm mode), head, then per-task site
    // parameters grouped by task in config order.
    weight("embed.weight", p2, d);
    bias("embed.bias", d);
    push("pos_embed", Tensor::randn({cfg_.tokens(), d}, rng, 0.02));
    for (int64_t i = 0; i < cfg_.encoder_depth; ++i) block("encoder." + std::to_string(i));
    for (int64_t i = 0; i < cfg_.decoder_depth; ++i) block("decoder." + std::to_string(i));

    const size_t n_sites = cfg_.dlm_sites().size();
    if (cfg_.norm_mode == NormMode::layer_norm) {
        for (size_t s = 0; s < n_sites; ++s) ln_pair("site." + std::to_string(s) + ".ln");
    }
    weight("head.weight", d, p2);
    bias("head.bias", p2);
    if (cfg_.norm_mode == NormMode::dlm) {
        for (const auto& task : cfg_.tasks)
            for (size_t s = 0; s < n_sites; ++s) {
                const std::string prefix = "dlm." + task + "." + std::to_string(s);
                push(prefix + ".mu", Tensor::zeros({d}));
                push(prefix + ".sigma", Tensor::full({d}, 1.0));
            }
    }
}

Tensor& JointModel::param(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw RegistryError("no parameter named '" + name + "'");
    return params_[it->second].value;
}

const Tensor& JointModel::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw RegistryError("no parameter named '" + name + "'");
    return params_[it->second].value;
}

Tensor JointModel::block_forward(const Tensor& x, const std::string& prefix) const {
    const int64_t t = cfg_.tokens(), nh = cfg_.heads, dh = cfg_.embed_dim / cfg_.heads;
    Tensor xn = layer_norm(x, param(prefix + ".ln1.gamma"), param(prefix + ".ln1.beta"));
    auto heads_split = [&](const Tensor& m) {
        // [T, d] -> [heads, T, d/heads]
        return permute_axes(reshape(m, {t, nh, dh}), {1, 0, 2});
    };
    Tensor q = heads_split(linear(xn, param(prefix + ".attn.q.weight"), param(prefix + ".attn.q.bias")));
    Tensor k = heads_split(linear(xn, param(prefix + ".attn.k.weight"), param(prefix + ".attn.k.bias")));
    Tensor v = heads_split(linear(xn, param(prefix + ".attn.v.weight"), param(prefix + ".attn.v.bias")));
    Tensor attend = reshape(permute_axes(softmax_attention(q, k, v), {1, 0, 2}), {t, cfg_.embed_dim});
    Tensor h = add(x, linear(attend, param(prefix + ".attn.o.weight"), param(prefix + ".attn.o.bias")));

    Tensor hn = layer_norm(h, param(prefix + ".ln2.gamma"), param(prefix + ".ln2.beta"));
    Tensor m1 = gelu(linear(hn, param(prefix + ".mlp.fc1.weight"), param(prefix + ".mlp.fc1.bias")));
    Tensor m2 = linear(m1, param(prefix + ".mlp.fc2.weight"), param(prefix + ".mlp.fc2.bias"));
    return add(h, m2);
}

Tensor JointModel::site_forward(const Tensor& x, size_t site_index, const std::string& task) const {
    const std::string s = std::to_string(site_index);
    if (cfg_.norm_mode == NormMode::layer_norm)
        return layer_norm(x, param("site." + s + ".ln.gamma"), param("site." + s + ".ln.beta"));
    return dlm_normalize(x, param("dlm." + task + "." + s + ".mu"),
                         param("dlm." + task + "." + s + ".sigma"));
}

Tensor JointModel::forward(const Tensor& image, const std::string& task) const {
    bool known = false;
    for (const auto& t : cfg_.tasks) known = known || t == task;
    if (!known) {
        std::string have;
        for (const auto& t : cfg_.tasks) have += (have.empty() ? "" : ", ") + t;
        throw RegistryError("unknown task id '" + task + "' (registered: " + have + ")");
    }
    const int64_t s = cfg_.image_size, p = cfg_.patch_size;
    if (image.rank() != 2 || image.shape()[0] != s || image.shape()[1] != s)
        throw ShapeError("forward wants a [" + std::to_string(s) + "," + std::to_string(s) +
                         "] image, got " + shape_str(image.shape()));

    Tensor patches = patchify(image, p);
    Tensor x = add(linear(patches, param("embed.weight"), param("embed.bias")), param("pos_embed"));

    const auto sites = cfg_.dlm_sites();
    auto site_at = [&](bool in_encoder, int64_t block) -> int {
        for (size_t i = 0; i < sites.size(); ++i)
            if (sites[i].in_encoder == in_encoder && sites[i].block == block)
                return static_cast<int>(i);
        return -1;
    };
    for (int64_t i = 0; i < cfg_.encoder_depth; ++i) {
        x = block_forward(x, "encoder." + std::to_string(i));
        if (int si = site_at(true, i); si >= 0) x = site_forward(x, static_cast<size_t>(si), task);
    }
    for (int64_t i = 0; i < cfg_.decoder_depth; ++i) {
        x = block_forward(x, "decoder." + std::to_string(i));
        if (int si = site_at(false, i); si >= 0) x = site_forward(x, static_cast<size_t>(si), task);
    }

    Tensor logits = linear(x, param("head.weight"), param("head.bias"));
    return sigmoid(unpatchify(logits, s));
}

JointModel::Partition JointModel::parameter_partition() const {
    Partition part;
    for (const auto& t : cfg_.tasks) part.per_task[t];  // every task present, even if empty
    for (const auto& np : params_) {
        if (np.name.rfind("dlm.", 0) == 0) {
            size_t dot = np.name.find('.', 4);
            part.per_task[np.name.substr(4, dot - 4)].push_back(np.name);
        } else {
            part.shared.push_back(np.name);
        }
    }
    return part;
}

}  // namespace jointseg

#include "voxpeft/model.hpp"

#include <algorithm>
#include <cmath>

#include "voxpeft/errors.hpp"
#include "voxpeft/ops.hpp"
#include "voxpeft/peft.hpp"

namespace voxpeft {

std::string to_string(ParamRole role) {
    switch (role) {
    case ParamRole::Weight: return "weight";
    case ParamRole::Bias: return "bias";
    case ParamRole::NormScale: return "norm_scale";
    case ParamRole::NormShift: return "norm_shift";
    case ParamRole::Embedding: return "embedding";
    case ParamRole::Injected: return "injected";
    }
    return "weight";
}

ParamRole role_from_string(const std::string& s) {
    for (ParamRole r : {ParamRole::Weight, ParamRole::Bias, ParamRole::NormScale, ParamRole::NormShift,
                        ParamRole::Embedding, ParamRole::Injected}) {
        if (to_string(r) == s) return r;
    }
    throw FormatError("unknown parameter role '" + s + "'");
}

std::string PromptSite::path() const {
    return stack_prefix(stack) + ".prompts.layer" + std::to_string(layer);
}

std::size_t PeftState::prompt_count(Stack s) const {
    std::size_t n = 0;
    for (const auto& p : prompts) {
        if (p.stack == s) n += p.count;
    }
    return n;
}

std::uint64_t fnv1a(const std::string& text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

namespace {

constexpr double kInitStd = 0.02;

// Encoder layers feeding each decoder stage. The deepest skip is the
// bottleneck; the rest go to stages deepest-first, and any surplus joins the
// last (full-resolution) stage.
std::vector<std::vector<std::size_t>> skip_assignment(const ArchConfig& c) {
    std::vector<std::vector<std::size_t>> stages(c.decoder_stages);
    std::vector<std::size_t> rest(c.skip_layer_indices.begin(), c.skip_layer_indices.end() - 1);
    std::reverse(rest.begin(), rest.end());
    for (std::size_t i = 0; i < rest.size(); ++i) {
        stages[std::min(i, c.decoder_stages - 1)].push_back(rest[i]);
    }
    return stages;
}

std::size_t fuse_in_channels(const ArchConfig& c, std::size_t stage, bool has_skip) {
    std::size_t ch = c.decoder_channels[stage];
    std::size_t n = ch;
    if (has_skip) n += ch;
    if (stage + 1 == c.decoder_stages) n += ch;
    return n;
}

void declare_block(std::vector<ParamSpec>& out, const std::string& b, std::size_t d, std::size_t m) {
    out.push_back({b + ".norm1.gamma", {d}, ParamRole::NormScale});
    out.push_back({b + ".norm1.beta", {d}, ParamRole::NormShift});
    for (const char* proj : {"q", "k", "v", "o"}) {
        out.push_back({b + ".attn." + proj + "_weight", {d, d}, ParamRole::Weight});
        out.push_back({b + ".attn." + proj + "_bias", {d}, ParamRole::Bias});
    }
    out.push_back({b + ".norm2.gamma", {d}, ParamRole::NormScale});
    out.push_back({b + ".norm2.beta", {d}, ParamRole::NormShift});
    out.push_back({b + ".mlp.fc1_weight", {m, d}, ParamRole::Weight});
    out.push_back({b + ".mlp.fc1_bias", {m}, ParamRole::Bias});
    out.push_back({b + ".mlp.fc2_weight", {d, m}, ParamRole::Weight});
    out.push_back({b + ".mlp.fc2_bias", {d}, ParamRole::Bias});
}

} // namespace

std::vector<ParamSpec> declare_parameters(const ArchConfig& c) {
    c.validate();
    std::vector<ParamSpec> out;
    std::size_t d = c.embed_dim;
    out.push_back({"encoder.patch_embed.weight", {d, c.patch_voxels()}, ParamRole::Weight});
    out.push_back({"encoder.patch_embed.bias", {d}, ParamRole::Bias});
    out.push_back({"encoder.pos_embed", {c.tokens(), d}, ParamRole::Embedding});
    for (std::size_t i = 1; i <= c.encoder_layers; ++i) {
        declare_block(out, block_path(Stack::Encoder, i), d, c.mlp_dim());
    }
    if (c.variant == Variant::VitVit) {
        out.push_back({"encoder.norm.gamma", {d}, ParamRole::NormScale});
        out.push_back({"encoder.norm.beta", {d}, ParamRole::NormShift});
        for (std::size_t i = 1; i <= c.decoder_layers; ++i) {
            declare_block(out, block_path(Stack::Decoder, i), d, c.mlp_dim());
        }
        out.push_back({"decoder.norm.gamma", {d}, ParamRole::NormScale});
        out.push_back({"decoder.norm.beta", {d}, ParamRole::NormShift});
        out.push_back({"decoder.head.weight", {c.patch_voxels(), d}, ParamRole::Weight});
        out.push_back({"decoder.head.bias", {c.patch_voxels()}, ParamRole::Bias});
        return out;
    }

    std::size_t last = c.decoder_channels.back();
    out.push_back({"decoder.input.conv.weight", {last, 1, 3, 3, 3}, ParamRole::Weight});
    out.push_back({"decoder.input.conv.bias", {last}, ParamRole::Bias});
    out.push_back({"decoder.input.norm.gamma", {last}, ParamRole::NormScale});
    out.push_back({"decoder.input.norm.beta", {last}, ParamRole::NormShift});
    auto skips = skip_assignment(c);
    for (std::size_t j = 0; j < c.decoder_stages; ++j) {
        std::size_t ch = c.decoder_channels[j];
        for (std::size_t k : skips[j]) {
            for (std::size_t m = 1; m <= j + 1; ++m) {
                std::string p = "decoder.skip" + std::to_string(k) + ".up" + std::to_string(m);
                std::size_t in = m == 1 ? d : ch;
                out.push_back({p + ".weight", {in, ch, 2, 2, 2}, ParamRole::Weight});
                out.push_back({p + ".bias", {ch}, ParamRole::Bias});
            }
        }
        std::string s = "decoder.stage" + std::to_string(j + 1);
        std::size_t prev = j == 0 ? d : c.decoder_channels[j - 1];
        out.push_back({s + ".up.weight", {prev, ch, 2, 2, 2}, ParamRole::Weight});
        out.push_back({s + ".up.bias", {ch}, ParamRole::Bias});
        out.push_back({s + ".fuse.weight", {ch, fuse_in_channels(c, j, !skips[j].empty()), 3, 3, 3},
                       ParamRole::Weight});
        out.push_back({s + ".fuse.bias", {ch}, ParamRole::Bias});
        out.push_back({s + ".norm.gamma", {ch}, ParamRole::NormScale});
        out.push_back({s + ".norm.beta", {ch}, ParamRole::NormShift});
    }
    out.push_back({"decoder.head.weight", {1, last, 1, 1, 1}, ParamRole::Weight});
    out.push_back({"decoder.head.bias", {1}, ParamRole::Bias});
    return out;
}

Model::Model(ArchConfig config, std::uint64_t seed, bool meta)
    : config_(std::move(config)), seed_(seed), meta_(meta) {}

Model Model::build(const ArchConfig& config, std::uint64_t seed) {
    auto specs = declare_parameters(config);
    Model model(config, seed, false);
    Rng rng(seed);
    for (const auto& spec : specs) {
        Tensor init;
        switch (spec.role) {
        case ParamRole::Weight:
        case ParamRole::Embedding:
            init = truncated_normal_tensor(spec.shape, rng, kInitStd);
            break;
        case ParamRole::NormScale:
            init = Tensor::ones(spec.shape);
            break;
        default:
            init = Tensor::zeros(spec.shape);
            break;
        }
        model.add_parameter(spec.path, spec.shape, spec.role, init);
    }
    return model;
}

Model Model::build_meta(const ArchConfig& config) {
    auto specs = declare_parameters(config);
    Model model(config, 0, true);
    for (const auto& spec : specs) {
        model.add_parameter(spec.path, spec.shape, spec.role, Tensor());
    }
    return model;
}

Model Model::restore(const ArchConfig& config, std::uint64_t seed, std::vector<Parameter> params,
                     PeftState peft) {
    config.validate();
    Model model(config, seed, false);
    for (auto& p : params) {
        if (!p.value.defined() || p.value.shape() != p.shape) {
            throw FormatError("stored value for '" + p.path + "' does not match shape " + shape_str(p.shape));
        }
        bool trainable = p.trainable;
        model.add_parameter(p.path, p.shape, p.role, p.value);
        model.set_trainable(p.path, trainable);
    }
    model.peft_ = std::move(peft);
    return model;
}

Model Model::clone() const {
    Model copy(config_, seed_, meta_);
    copy.params_.reserve(params_.size());
    for (const auto& p : params_) {
        Parameter q = p;
        if (p.value.defined()) {
            q.value = p.value.clone();
            q.value.set_requires_grad(p.trainable);
        }
        copy.params_.push_back(std::move(q));
    }
    copy.reindex();
    copy.peft_ = peft_;
    return copy;
}

const Parameter& Model::param(const std::string& path) const {
    auto it = index_.find(path);
    if (it == index_.end()) {
        throw ContractError("no parameter named '" + path + "'");
    }
    return params_[it->second];
}

const Tensor& Model::value(const std::string& path) const {
    const Parameter& p = param(path);
    if (!p.value.defined()) {
        throw ContractError("parameter '" + path + "' has no values in a shape-only model");
    }
    return p.value;
}

Tensor Model::mutable_value(const std::string& path) { return value(path); }

void Model::set_trainable(const std::string& path, bool trainable) {
    auto& p = params_[index_.at(param(path).path)];
    p.trainable = trainable;
    if (p.value.defined()) {
        p.value.zero_grad();
        p.value.set_requires_grad(trainable);
    }
}

Parameter& Model::add_parameter(const std::string& path, const Shape& shape, ParamRole role, Tensor init) {
    if (has(path)) {
        throw ContractError("parameter '" + path + "' already exists");
    }
    Parameter p;
    p.path = path;
    p.shape = shape;
    p.role = role;
    p.trainable = true;
    if (!meta_) {
        if (!init.defined() || init.shape() != shape) {
            throw DimensionError("initial value for '" + path + "' must have shape " + shape_str(shape));
        }
        p.value = init;
        p.value.set_requires_grad(true);
    }
    index_[path] = params_.size();
    params_.push_back(std::move(p));
    return params_.back();
}

void Model::remove_parameter(const std::string& path) {
    auto it = index_.find(path);
    if (it == index_.end()) {
        throw ContractError("no parameter named '" + path + "'");
    }
    params_.erase(params_.begin() + static_cast<std::ptrdiff_t>(it->second));
    reindex();
}

void Model::reindex() {
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) {
        index_[params_[i].path] = i;
    }
}

Rng Model::init_rng(const std::string& path) const {
    Rng base(seed_);
    return base.fork(fnv1a(path));
}

namespace {

// Resolves parameters by path and routes every op through the PEFT state.
class Forward {
public:
    explicit Forward(const Model& m) : m_(m), c_(m.config()) {
        if (m.is_meta()) {
            throw ContractError("forward on a shape-only model");
        }
    }

    const Tensor& p(const std::string& path) const { return m_.value(path); }

    Tensor lin(const Tensor& x, const std::string& w, const std::string& b) const {
        auto it = m_.peft().lora.find(w);
        if (it != m_.peft().lora.end()) {
            return lora_forward(x, p(w), p(b), p(w + ".lora_a"), p(w + ".lora_b"), it->second.scaling());
        }
        return linear(x, p(w), p(b));
    }

    Tensor kernel(const std::string& w) const {
        auto it = m_.peft().lora.find(w);
        if (it != m_.peft().lora.end()) {
            return lora_effective_weight(p(w), p(w + ".lora_a"), p(w + ".lora_b"), it->second.scaling());
        }
        return p(w);
    }

    Tensor conv(const Tensor& x, const std::string& prefix, std::size_t pad) const {
        return conv3d(x, kernel(prefix + ".weight"), p(prefix + ".bias"), 1, pad);
    }

    Tensor up(const Tensor& x, const std::string& prefix) const {
        return conv_transpose3d(x, kernel(prefix + ".weight"), p(prefix + ".bias"), 2, 0);
    }

    Tensor ssf(const Tensor& x, const std::string& prefix, bool channel_first) const {
        if (!m_.peft().ssf.count(prefix)) return x;
        return ssf_forward(x, p(prefix + ".gamma"), p(prefix + ".beta"), channel_first);
    }

    Tensor adapter(const Tensor& x, const std::string& prefix) const {
        auto it = m_.peft().adapters.find(prefix);
        if (it == m_.peft().adapters.end()) return x;
        Tensor h;
        if (it->second.convolutional) {
            h = gelu(conv3d(x, p(prefix + ".down_weight"), p(prefix + ".down_bias")));
            h = conv3d(h, p(prefix + ".up_weight"), p(prefix + ".up_bias"));
        } else {
            h = gelu(linear(x, p(prefix + ".down_weight"), p(prefix + ".down_bias")));
            h = linear(h, p(prefix + ".up_weight"), p(prefix + ".up_bias"));
        }
        return add(x, h);
    }

    Tensor attention(const std::string& b, const Tensor& h) const {
        std::size_t t = h.size(0);
        std::size_t heads = c_.num_heads;
        std::size_t hd = c_.head_dim();
        Tensor q = reshape(lin(h, b + ".attn.q_weight", b + ".attn.q_bias"), {t, heads, hd});
        Tensor k = reshape(lin(h, b + ".attn.k_weight", b + ".attn.k_bias"), {t, heads, hd});
        Tensor v = reshape(lin(h, b + ".attn.v_weight", b + ".attn.v_bias"), {t, heads, hd});
        q = permute(q, {1, 0, 2});
        k = permute(k, {1, 2, 0});
        v = permute(v, {1, 0, 2});
        Tensor scores = scale(matmul(q, k), 1.0 / std::sqrt(static_cast<double>(hd)));
        Tensor ctx = matmul(softmax(scores), v);
        ctx = reshape(permute(ctx, {1, 0, 2}), {t, c_.embed_dim});
        return lin(ctx, b + ".attn.o_weight", b + ".attn.o_bias");
    }

    Tensor block(const std::string& b, Tensor x) const {
        Tensor h = ssf(layer_norm(x, p(b + ".norm1.gamma"), p(b + ".norm1.beta")), b + ".ssf_norm1", false);
        x = add(x, ssf(attention(b, h), b + ".ssf_attn", false));
        h = ssf(layer_norm(x, p(b + ".norm2.gamma"), p(b + ".norm2.beta")), b + ".ssf_norm2", false);
        Tensor mlp = lin(gelu(lin(h, b + ".mlp.fc1_weight", b + ".mlp.fc1_bias")), b + ".mlp.fc2_weight",
                         b + ".mlp.fc2_bias");
        mlp = adapter(ssf(mlp, b + ".ssf_mlp", false), b + ".adapter");
        return add(x, mlp);
    }

    // Hidden state after every layer of `s`, prompt slots included.
    std::vector<Tensor> stack(Stack s, Tensor x) const {
        std::vector<Tensor> states;
        for (std::size_t i = 1; i <= c_.stack_layers(s); ++i) {
            for (const auto& site : m_.peft().prompts) {
                if (site.stack == s && site.layer == i && site.count > 0) {
                    x = insert_prompts(p(site.path()), x);
                }
            }
            x = block(block_path(s, i), x);
            states.push_back(x);
        }
        return states;
    }

    Tensor embed(const Tensor& x) const {
        std::size_t g = c_.grid();
        std::size_t ps = c_.patch_size;
        Tensor patches = reshape(x, {g, ps, g, ps, g, ps});
        patches = reshape(permute(patches, {0, 2, 4, 1, 3, 5}), {c_.tokens(), c_.patch_voxels()});
        Tensor tokens = lin(patches, "encoder.patch_embed.weight", "encoder.patch_embed.bias");
        return add(tokens, p("encoder.pos_embed"));
    }

    Tensor unembed(const Tensor& patches) const {
        std::size_t g = c_.grid();
        std::size_t ps = c_.patch_size;
        Tensor v = reshape(patches, {g, g, g, ps, ps, ps});
        v = permute(v, {0, 3, 1, 4, 2, 5});
        return reshape(v, {1, c_.volume_size, c_.volume_size, c_.volume_size});
    }

    // Drops whatever prompt slots precede the patch tokens at this depth.
    Tensor tokens_only(const Tensor& state) const { return strip_prompts(state, state.size(0) - c_.tokens()); }

    Tensor to_grid(const Tensor& tokens) const {
        std::size_t g = c_.grid();
        return reshape(transpose(tokens, 0, 1), {c_.embed_dim, g, g, g});
    }

    void check_input(const Tensor& x) const {
        std::size_t s = c_.volume_size;
        if (x.shape() != Shape{1, s, s, s}) {
            throw DimensionError("model input must be " + shape_str({1, s, s, s}) + ", got " +
                                 shape_str(x.shape()));
        }
    }

    Tensor run(const Tensor& x, std::size_t zeroed_skip) const {
        check_input(x);
        std::vector<Tensor> enc = stack(Stack::Encoder, embed(x));
        Tensor out;
        if (c_.variant == Variant::VitVit) {
            Tensor h = tokens_only(enc.back());
            h = layer_norm(h, p("encoder.norm.gamma"), p("encoder.norm.beta"));
            std::vector<Tensor> dec = stack(Stack::Decoder, h);
            h = tokens_only(dec.back());
            h = layer_norm(h, p("decoder.norm.gamma"), p("decoder.norm.beta"));
            out = unembed(lin(h, "decoder.head.weight", "decoder.head.bias"));
        } else {
            out = cnn_decoder(x, enc, zeroed_skip);
        }
        return c_.residual_output ? add(out, x) : out;
    }

    Tensor cnn_decoder(const Tensor& x, const std::vector<Tensor>& enc, std::size_t zeroed_skip) const {
        auto state = [&](std::size_t layer) {
            Tensor g = to_grid(tokens_only(enc[layer - 1]));
            return layer == zeroed_skip ? Tensor::zeros(g.shape()) : g;
        };
        Tensor in = ssf(conv(x, "decoder.input.conv", 1), "decoder.input.ssf_conv", true);
        in = ssf(channel_norm(in, p("decoder.input.norm.gamma"), p("decoder.input.norm.beta")),
                 "decoder.input.ssf_norm", true);
        in = gelu(in);

        auto skips = skip_assignment(c_);
        Tensor cur = state(c_.skip_layer_indices.back());
        for (std::size_t j = 0; j < c_.decoder_stages; ++j) {
            std::string s = "decoder.stage" + std::to_string(j + 1);
            std::vector<Tensor> parts{ssf(up(cur, s + ".up"), s + ".ssf_up", true)};
            Tensor skip_sum;
            for (std::size_t k : skips[j]) {
                Tensor t = state(k);
                for (std::size_t m = 1; m <= j + 1; ++m) {
                    std::string sp = "decoder.skip" + std::to_string(k);
                    t = ssf(up(t, sp + ".up" + std::to_string(m)), sp + ".ssf_up" + std::to_string(m), true);
                    if (m <= j) t = gelu(t);
                }
                skip_sum = skip_sum.defined() ? add(skip_sum, t) : t;
            }
            if (skip_sum.defined()) parts.push_back(skip_sum);
            if (j + 1 == c_.decoder_stages) parts.push_back(in);
            Tensor f = ssf(conv(concat(parts, 0), s + ".fuse", 1), s + ".ssf_fuse", true);
            f = ssf(channel_norm(f, p(s + ".norm.gamma"), p(s + ".norm.beta")), s + ".ssf_norm", true);
            cur = adapter(gelu(f), s + ".adapter");
        }
        return ssf(conv(cur, "decoder.head", 0), "decoder.head.ssf", true);
    }

private:
    const Model& m_;
    const ArchConfig& c_;
};

} // namespace

Tensor forward(const Model& model, const Tensor& x) { return Forward(model).run(x, 0); }

std::vector<Tensor> encoder_states(const Model& model, const Tensor& x) {
    Forward f(model);
    f.check_input(x);
    return f.stack(Stack::Encoder, f.embed(x));
}

Tensor forward_with_zeroed_skip(const Model& model, const Tensor& x, std::size_t skip_layer) {
    if (model.config().variant != Variant::VitCnn) {
        throw ContractError("skip connections exist only in the convolutional decoder");
    }
    const auto& skips = model.config().skip_layer_indices;
    if (std::find(skips.begin(), skips.end(), skip_layer) == skips.end()) {
        throw ContractError("layer " + std::to_string(skip_layer) + " is not a skip layer");
    }
    return Forward(model).run(x, skip_layer);
}

} // namespace voxpeft

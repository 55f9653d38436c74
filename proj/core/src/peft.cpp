#include "voxpeft/peft.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <unordered_set>

#include "voxpeft/errors.hpp"
#include "voxpeft/ops.hpp"

namespace voxpeft {

std::string to_string(MethodKind kind) {
    switch (kind) {
    case MethodKind::LayerNormTune: return "LayerNorm";
    case MethodKind::BitFit: return "BitFit";
    case MethodKind::LoRA: return "LoRA";
    case MethodKind::Adapters: return "Adapters";
    case MethodKind::SSF: return "SSF";
    case MethodKind::VPT: return "VPT";
    }
    return "BitFit";
}

MethodKind method_kind_from_string(const std::string& s) {
    std::string k;
    for (char c : s) {
        if (c != '-' && c != '_') k.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    if (k == "layernorm" || k == "ln" || k == "layernormtune") return MethodKind::LayerNormTune;
    if (k == "bitfit") return MethodKind::BitFit;
    if (k == "lora") return MethodKind::LoRA;
    if (k == "adapters" || k == "adapter") return MethodKind::Adapters;
    if (k == "ssf") return MethodKind::SSF;
    if (k == "vpt") return MethodKind::VPT;
    throw ConfigError("unknown PEFT method '" + s + "'");
}

bool is_selective(MethodKind kind) {
    return kind == MethodKind::LayerNormTune || kind == MethodKind::BitFit;
}

PeftMethod PeftMethod::layer_norm() {
    PeftMethod m;
    m.kind = MethodKind::LayerNormTune;
    return m;
}

PeftMethod PeftMethod::bitfit() {
    PeftMethod m;
    m.kind = MethodKind::BitFit;
    return m;
}

PeftMethod PeftMethod::lora(std::size_t rank, double alpha) {
    PeftMethod m;
    m.kind = MethodKind::LoRA;
    m.lora_rank = rank;
    m.lora_alpha = alpha == 0.0 ? static_cast<double>(rank) : alpha;
    return m;
}

PeftMethod PeftMethod::adapters(std::size_t reduction) {
    PeftMethod m;
    m.kind = MethodKind::Adapters;
    m.adapter_reduction = reduction;
    return m;
}

PeftMethod PeftMethod::ssf() {
    PeftMethod m;
    m.kind = MethodKind::SSF;
    return m;
}

PeftMethod PeftMethod::vpt(std::size_t prompts, std::size_t start_layer) {
    PeftMethod m;
    m.kind = MethodKind::VPT;
    m.vpt_prompts = prompts;
    m.vpt_start_layer = start_layer;
    return m;
}

void PeftMethod::validate() const {
    switch (kind) {
    case MethodKind::LoRA:
        if (lora_rank == 0) throw ConfigError("LoRA rank must be >= 1");
        if (!(lora_alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
        if (lora_targets.empty()) throw ConfigError("LoRA needs at least one target projection");
        break;
    case MethodKind::Adapters: {
        static const std::set<std::size_t> allowed{1, 4, 8, 16, 32};
        if (!allowed.count(adapter_reduction)) {
            throw ConfigError("adapter reduction factor must be one of 1, 4, 8, 16, 32; got " +
                              std::to_string(adapter_reduction));
        }
        break;
    }
    case MethodKind::SSF:
        if (ssf_sites.empty()) throw ConfigError("SSF needs at least one site kind");
        break;
    case MethodKind::VPT:
        if (vpt_start_layer < 2) throw ConfigError("VPT start layer must be >= 2");
        for (const auto& [layer, count] : vpt_extra_prompts) {
            (void)count;
            if (layer <= vpt_start_layer) {
                throw ConfigError("extra VPT prompt layers must come after the start layer");
            }
        }
        break;
    default:
        break;
    }
}

std::string PeftMethod::label() const {
    switch (kind) {
    case MethodKind::LoRA: return "LoRA(r=" + std::to_string(lora_rank) + ")";
    case MethodKind::Adapters: return "Adapters(rf=" + std::to_string(adapter_reduction) + ")";
    case MethodKind::VPT: {
        std::string s = "VPT(p=" + std::to_string(vpt_prompts);
        for (const auto& [layer, count] : vpt_extra_prompts) {
            s += ",L" + std::to_string(layer) + ":" + std::to_string(count);
        }
        return s + ")";
    }
    default: return to_string(kind);
    }
}

namespace {

bool in_scope(const std::string& path, Selector sel) {
    switch (sel) {
    case Selector::Encoder: return path.rfind("encoder.", 0) == 0;
    case Selector::Decoder: return path.rfind("decoder.", 0) == 0;
    case Selector::WholeModel: return true;
    }
    return false;
}

std::vector<Stack> stacks(Selector sel) {
    switch (sel) {
    case Selector::Encoder: return {Stack::Encoder};
    case Selector::Decoder: return {Stack::Decoder};
    case Selector::WholeModel: return {Stack::Encoder, Stack::Decoder};
    }
    return {};
}

bool cnn_decoder_in_scope(const Model& m, Selector sel) {
    return m.config().variant == Variant::VitCnn && sel != Selector::Encoder;
}

// Transformer blocks that accept injected modules.
std::vector<std::string> injectable_blocks(const Model& m, Selector sel) {
    std::vector<std::string> out;
    for (Stack s : stacks(sel)) {
        for (std::size_t i = 1; i <= m.config().peft_layer_limit(s); ++i) {
            out.push_back(block_path(s, i));
        }
    }
    return out;
}

std::size_t trailing(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
    return n;
}

void add_lora(Model& m, const std::string& weight, std::size_t rank, double alpha) {
    const Shape& ws = m.param(weight).shape;
    std::size_t rows = ws[0];
    std::size_t cols = trailing(ws);
    if (rank > std::min(rows, cols)) {
        throw ConfigError("LoRA rank " + std::to_string(rank) + " exceeds min dims of " + weight + " " +
                          shape_str(ws));
    }
    Tensor a;
    Tensor b;
    if (!m.is_meta()) {
        Rng rng = m.init_rng(weight + ".lora_a");
        double bound = 1.0 / std::sqrt(static_cast<double>(cols));
        a = uniform_tensor({rank, cols}, rng, -bound, bound);
        b = Tensor::zeros({rows, rank});
    }
    m.add_parameter(weight + ".lora_a", {rank, cols}, ParamRole::Injected, a);
    m.add_parameter(weight + ".lora_b", {rows, rank}, ParamRole::Injected, b);
    m.peft().lora[weight] = LoraSite{weight, rank, alpha};
}

void add_adapter(Model& m, const std::string& prefix, std::size_t width, std::size_t reduction, bool conv) {
    std::size_t hidden = std::max<std::size_t>(1, width / reduction);
    Shape down = conv ? Shape{hidden, width, 1, 1, 1} : Shape{hidden, width};
    Shape up = conv ? Shape{width, hidden, 1, 1, 1} : Shape{width, hidden};
    Tensor dw;
    if (!m.is_meta()) {
        Rng rng = m.init_rng(prefix + ".down_weight");
        double bound = 1.0 / std::sqrt(static_cast<double>(width));
        dw = uniform_tensor(down, rng, -bound, bound);
    }
    auto zeros = [&](const Shape& s) { return m.is_meta() ? Tensor() : Tensor::zeros(s); };
    m.add_parameter(prefix + ".down_weight", down, ParamRole::Injected, dw);
    m.add_parameter(prefix + ".down_bias", {hidden}, ParamRole::Injected, zeros({hidden}));
    m.add_parameter(prefix + ".up_weight", up, ParamRole::Injected, zeros(up));
    m.add_parameter(prefix + ".up_bias", {width}, ParamRole::Injected, zeros({width}));
    m.peft().adapters[prefix] = AdapterSite{prefix, hidden, conv};
}

void add_ssf(Model& m, const std::string& prefix, std::size_t width, FoldTarget target, const std::string& weight,
             const std::string& bias) {
    Tensor g;
    Tensor b;
    if (!m.is_meta()) {
        g = Tensor::ones({width});
        b = Tensor::zeros({width});
    }
    m.add_parameter(prefix + ".gamma", {width}, ParamRole::Injected, g);
    m.add_parameter(prefix + ".beta", {width}, ParamRole::Injected, b);
    m.peft().ssf[prefix] = SsfSite{prefix, target, weight, bias};
}

std::size_t out_channels(const Model& m, const std::string& weight, FoldTarget t) {
    const Shape& s = m.param(weight).shape;
    return t == FoldTarget::ConvTranspose ? s[1] : s[0];
}

void add_ssf_on(Model& m, const std::string& prefix, FoldTarget t, const std::string& layer) {
    std::string w = t == FoldTarget::Norm ? layer + ".gamma" : layer + ".weight";
    std::string b = t == FoldTarget::Norm ? layer + ".beta" : layer + ".bias";
    add_ssf(m, prefix, out_channels(m, w, t), t, w, b);
}

void apply_lora(const PeftMethod& method, Selector sel, Model& m) {
    static const std::map<LoraTarget, std::string> names{
        {LoraTarget::Query, "q"}, {LoraTarget::Key, "k"}, {LoraTarget::Value, "v"}, {LoraTarget::Output, "o"}};
    for (const auto& b : injectable_blocks(m, sel)) {
        for (LoraTarget t : method.lora_targets) {
            add_lora(m, b + ".attn." + names.at(t) + "_weight", method.lora_rank, method.lora_alpha);
        }
    }
    if (cnn_decoder_in_scope(m, sel)) {
        for (std::size_t j = 1; j <= m.config().decoder_stages; ++j) {
            std::string s = "decoder.stage" + std::to_string(j);
            add_lora(m, s + ".up.weight", method.lora_rank, method.lora_alpha);
            add_lora(m, s + ".fuse.weight", method.lora_rank, method.lora_alpha);
        }
    }
}

void apply_adapters(const PeftMethod& method, Selector sel, Model& m) {
    for (const auto& b : injectable_blocks(m, sel)) {
        add_adapter(m, b + ".adapter", m.config().embed_dim, method.adapter_reduction, false);
    }
    if (cnn_decoder_in_scope(m, sel)) {
        for (std::size_t j = 1; j <= m.config().decoder_stages; ++j) {
            add_adapter(m, "decoder.stage" + std::to_string(j) + ".adapter", m.config().decoder_channels[j - 1],
                        method.adapter_reduction, true);
        }
    }
}

// CNN decoder sites sit after every conv and norm; the transformer site kinds
// do not apply to them.
void apply_ssf(const PeftMethod& method, Selector sel, Model& m) {
    const auto& kinds = method.ssf_sites;
    for (const auto& b : injectable_blocks(m, sel)) {
        if (kinds.count(SsfSiteKind::PostNorm)) add_ssf_on(m, b + ".ssf_norm1", FoldTarget::Norm, b + ".norm1");
        if (kinds.count(SsfSiteKind::PostAttention)) {
            add_ssf(m, b + ".ssf_attn", m.config().embed_dim, FoldTarget::Linear, b + ".attn.o_weight",
                    b + ".attn.o_bias");
        }
        if (kinds.count(SsfSiteKind::PostNorm)) add_ssf_on(m, b + ".ssf_norm2", FoldTarget::Norm, b + ".norm2");
        if (kinds.count(SsfSiteKind::PostMlp)) {
            add_ssf(m, b + ".ssf_mlp", m.config().embed_dim, FoldTarget::Linear, b + ".mlp.fc2_weight",
                    b + ".mlp.fc2_bias");
        }
    }
    if (!cnn_decoder_in_scope(m, sel)) return;
    const auto& c = m.config();
    add_ssf_on(m, "decoder.input.ssf_conv", FoldTarget::Conv, "decoder.input.conv");
    add_ssf_on(m, "decoder.input.ssf_norm", FoldTarget::Norm, "decoder.input.norm");
    for (std::size_t j = 1; j <= c.decoder_stages; ++j) {
        std::string s = "decoder.stage" + std::to_string(j);
        add_ssf_on(m, s + ".ssf_up", FoldTarget::ConvTranspose, s + ".up");
        add_ssf_on(m, s + ".ssf_fuse", FoldTarget::Conv, s + ".fuse");
        add_ssf_on(m, s + ".ssf_norm", FoldTarget::Norm, s + ".norm");
    }
    for (std::size_t k : c.skip_layer_indices) {
        std::string sp = "decoder.skip" + std::to_string(k);
        for (std::size_t u = 1; m.has(sp + ".up" + std::to_string(u) + ".weight"); ++u) {
            add_ssf_on(m, sp + ".ssf_up" + std::to_string(u), FoldTarget::ConvTranspose,
                       sp + ".up" + std::to_string(u));
        }
    }
    add_ssf_on(m, "decoder.head.ssf", FoldTarget::Conv, "decoder.head");
}

void add_prompts(Model& m, Stack s, std::size_t layer, std::size_t count) {
    if (count == 0) return;
    PromptSite site{s, layer, count};
    Tensor init;
    if (!m.is_meta()) {
        Rng rng = m.init_rng(site.path());
        init = truncated_normal_tensor({count, m.config().embed_dim}, rng, 0.02);
    }
    m.add_parameter(site.path(), {count, m.config().embed_dim}, ParamRole::Injected, init);
    m.peft().prompts.push_back(site);
}

void apply_vpt(const PeftMethod& method, Selector sel, Model& m) {
    const auto& c = m.config();
    std::vector<Stack> targets;
    if (sel == Selector::Decoder) {
        if (c.variant == Variant::VitCnn) {
            throw UnsupportedSiteError("VPT needs a transformer stack; the convolutional decoder has none");
        }
        targets = {Stack::Decoder};
    } else {
        targets = {Stack::Encoder};
    }
    for (Stack s : targets) {
        std::size_t n = c.stack_layers(s);
        std::size_t last = method.vpt_extra_prompts.empty() ? method.vpt_start_layer
                                                            : method.vpt_extra_prompts.rbegin()->first;
        if (n < method.vpt_start_layer || n < last) {
            throw ConfigError("VPT at layer " + std::to_string(last) + " needs that many " + stack_prefix(s) +
                              " layers; it has " + std::to_string(n));
        }
        add_prompts(m, s, method.vpt_start_layer, method.vpt_prompts);
        for (const auto& [layer, count] : method.vpt_extra_prompts) add_prompts(m, s, layer, count);
    }
}

} // namespace

void freeze_all(Model& model) {
    for (const auto& p : model.parameters()) model.set_trainable(p.path, false);
}

std::vector<std::string> apply(const PeftMethod& method, Selector selector, Model& model) {
    method.validate();
    std::unordered_set<std::string> before;
    for (const auto& p : model.parameters()) {
        if (p.trainable) before.insert(p.path);
    }
    switch (method.kind) {
    case MethodKind::LayerNormTune:
    case MethodKind::BitFit:
        for (const auto& p : model.parameters()) {
            bool hit = method.kind == MethodKind::BitFit
                           ? p.role == ParamRole::Bias
                           : (p.role == ParamRole::NormScale || p.role == ParamRole::NormShift);
            if (hit && in_scope(p.path, selector)) model.set_trainable(p.path, true);
        }
        break;
    case MethodKind::LoRA: apply_lora(method, selector, model); break;
    case MethodKind::Adapters: apply_adapters(method, selector, model); break;
    case MethodKind::SSF: apply_ssf(method, selector, model); break;
    case MethodKind::VPT: apply_vpt(method, selector, model); break;
    }
    std::vector<std::string> added;
    for (const auto& p : model.parameters()) {
        if (p.trainable && !before.count(p.path)) added.push_back(p.path);
    }
    return added;
}

Tensor lora_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, const Tensor& lora_a,
                    const Tensor& lora_b, double scaling) {
    if (weight.dim() != 2 || lora_a.dim() != 2 || lora_b.dim() != 2) {
        throw DimensionError("LoRA factors and weight must be matrices");
    }
    std::size_t r = lora_a.size(0);
    if (r > std::min(weight.size(0), weight.size(1))) {
        throw ConfigError("LoRA rank " + std::to_string(r) + " exceeds min dims of weight " +
                          shape_str(weight.shape()));
    }
    if (lora_a.size(1) != weight.size(1) || lora_b.size(0) != weight.size(0) || lora_b.size(1) != r) {
        throw DimensionError("LoRA factors " + shape_str(lora_a.shape()) + ", " + shape_str(lora_b.shape()) +
                             " do not fit weight " + shape_str(weight.shape()));
    }
    Tensor base = linear(x, weight, bias);
    Tensor delta = linear(linear(x, lora_a, Tensor()), lora_b, Tensor());
    return add(base, scale(delta, scaling));
}

Tensor lora_effective_weight(const Tensor& weight, const Tensor& lora_a, const Tensor& lora_b, double scaling) {
    if (lora_b.size(0) != weight.size(0) || lora_a.size(1) != trailing(weight.shape())) {
        throw DimensionError("LoRA factors " + shape_str(lora_a.shape()) + ", " + shape_str(lora_b.shape()) +
                             " do not fit weight " + shape_str(weight.shape()));
    }
    return add(weight, scale(reshape(matmul(lora_b, lora_a), weight.shape()), scaling));
}

Tensor ssf_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, bool channel_first) {
    std::size_t c = channel_first ? x.size(0) : x.size(x.dim() - 1);
    if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
        throw DimensionError("SSF parameters " + shape_str(gamma.shape()) + " do not match " +
                             shape_str(x.shape()));
    }
    if (!channel_first) return add(mul(x, gamma), beta);
    Shape s(x.dim(), 1);
    s[0] = c;
    return add(mul(x, reshape(gamma, s)), reshape(beta, s));
}

Tensor insert_prompts(const Tensor& prompts, const Tensor& layer_input) {
    if (prompts.dim() != 2 || layer_input.dim() != 2 || prompts.size(1) != layer_input.size(1)) {
        throw DimensionError("prompts " + shape_str(prompts.shape()) + " cannot prefix tokens " +
                             shape_str(layer_input.shape()));
    }
    return concat({prompts, layer_input}, 0);
}

Tensor strip_prompts(const Tensor& tokens, std::size_t count) {
    if (count == 0) return tokens;
    if (count >= tokens.size(0)) {
        throw DimensionError("cannot strip " + std::to_string(count) + " prompts from " +
                             shape_str(tokens.shape()));
    }
    return slice(tokens, 0, count, tokens.size(0));
}

void merge_lora(Model& model) {
    auto& state = model.peft();
    if (state.lora_merged) throw ContractError("LoRA factors were already merged");
    if (state.lora.empty()) throw ContractError("no LoRA factors to merge");
    NoGradGuard guard;
    for (const auto& [path, site] : state.lora) {
        Tensor merged = lora_effective_weight(model.value(path), model.value(path + ".lora_a"),
                                              model.value(path + ".lora_b"), site.scaling());
        auto dst = model.mutable_value(path).mutable_data();
        std::copy(merged.data().begin(), merged.data().end(), dst.begin());
        model.remove_parameter(path + ".lora_a");
        model.remove_parameter(path + ".lora_b");
    }
    state.lora.clear();
    state.lora_merged = true;
}

namespace {

// Multiplies the slices of `t` along `axis` by g[i].
void scale_axis(Tensor t, std::size_t axis, std::span<const double> g) {
    const Shape& s = t.shape();
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::size_t n = s[axis];
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= g[(i / inner) % n];
}

} // namespace

FoldReport fold_ssf(Model& model) {
    auto& state = model.peft();
    if (state.ssf_folded) throw ContractError("SSF parameters were already folded");
    if (state.ssf.empty()) throw ContractError("no SSF parameters to fold");
    NoGradGuard guard;
    FoldReport report;
    for (auto it = state.ssf.begin(); it != state.ssf.end();) {
        const SsfSite& site = it->second;
        if (site.target == FoldTarget::None || !model.has(site.target_weight) || !model.has(site.target_bias)) {
            report.retained.push_back(site.prefix);
            ++it;
            continue;
        }
        Tensor g = model.value(site.prefix + ".gamma");
        Tensor b = model.value(site.prefix + ".beta");
        auto gd = g.data();
        auto bd = b.data();
        Tensor w = model.mutable_value(site.target_weight);
        std::size_t axis = site.target == FoldTarget::ConvTranspose ? 1 : 0;
        scale_axis(w, axis, gd);
        auto bias = model.mutable_value(site.target_bias).mutable_data();
        for (std::size_t i = 0; i < bias.size(); ++i) bias[i] = gd[i] * bias[i] + bd[i];

        auto lora = state.lora.find(site.target_weight);
        if (lora != state.lora.end()) {
            if (site.target == FoldTarget::ConvTranspose) {
                // A is [r, c_out * k³]; output channels are the leading block of each row.
                Tensor a = model.mutable_value(site.target_weight + ".lora_a");
                Shape view = model.param(site.target_weight).shape;
                std::size_t per = trailing(view) / view[1];
                auto ad = a.mutable_data();
                std::size_t cols = a.size(1);
                for (std::size_t i = 0; i < ad.size(); ++i) ad[i] *= gd[(i % cols) / per];
            } else {
                scale_axis(model.mutable_value(site.target_weight + ".lora_b"), 0, gd);
            }
        }
        model.remove_parameter(site.prefix + ".gamma");
        model.remove_parameter(site.prefix + ".beta");
        report.folded.push_back(site.prefix);
        it = state.ssf.erase(it);
    }
    state.ssf_folded = true;
    return report;
}

} // namespace voxpeft

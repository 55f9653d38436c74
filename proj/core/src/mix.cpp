#include "voxpeft/mix.hpp"

#include <algorithm>
#include <cctype>
#include <sstream>

#include "voxpeft/errors.hpp"

namespace voxpeft {

MixPlan MixPlan::no_ft() {
    MixPlan p;
    p.baseline = Baseline::NoFT;
    return p;
}

MixPlan MixPlan::full_ft() {
    MixPlan p;
    p.baseline = Baseline::FullFT;
    return p;
}

MixPlan MixPlan::mix(PeftMethod enc, PeftMethod dec, bool bitfit) {
    MixPlan p;
    p.encoder = std::move(enc);
    p.decoder = std::move(dec);
    p.bitfit_all_layers = bitfit;
    return p;
}

MixPlan MixPlan::petite(Variant v) {
    if (v == Variant::VitVit) {
        return mix(method_preset(MethodKind::VPT, v, Stack::Encoder),
                   method_preset(MethodKind::LoRA, v, Stack::Decoder));
    }
    return mix(method_preset(MethodKind::LoRA, v, Stack::Encoder), method_preset(MethodKind::SSF, v, Stack::Decoder));
}

MixPlan MixPlan::single(MethodKind kind, Variant v) {
    MixPlan p;
    p.encoder = method_preset(kind, v, Stack::Encoder);
    if (kind != MethodKind::VPT) p.decoder = method_preset(kind, v, Stack::Decoder);
    return p;
}

void MixPlan::validate(Variant v) const {
    if (baseline != Baseline::None) {
        if (encoder || decoder || bitfit_all_layers) {
            throw FeasibilityError("a baseline plan cannot carry PEFT methods");
        }
        return;
    }
    if (!encoder && !decoder && !bitfit_all_layers) {
        throw FeasibilityError("plan selects nothing to tune");
    }
    if (decoder && decoder->kind == MethodKind::VPT && v == Variant::VitCnn) {
        throw FeasibilityError("VPT cannot be applied to the convolutional decoder");
    }
    if (encoder) encoder->validate();
    if (decoder) decoder->validate();
}

std::string MixPlan::label() const {
    if (baseline == Baseline::NoFT) return "No-FT";
    if (baseline == Baseline::FullFT) return "Full-FT";
    std::vector<std::string> parts;
    if (encoder && decoder && *encoder == *decoder) {
        parts.push_back(encoder->label());
    } else if (encoder && decoder && encoder->kind == decoder->kind) {
        parts.push_back(to_string(encoder->kind) + " (" + encoder->label() + " enc, " + decoder->label() + " dec)");
    } else {
        if (encoder) parts.push_back(encoder->label() + " enc");
        if (decoder) parts.push_back(decoder->label() + " dec");
    }
    if (bitfit_all_layers) parts.push_back("BitFit");
    std::string s;
    for (const auto& p : parts) s += (s.empty() ? "" : " + ") + p;
    return s;
}

PeftMethod method_preset(MethodKind kind, Variant v, Stack role) {
    bool vit = v == Variant::VitVit;
    switch (kind) {
    case MethodKind::LayerNormTune: return PeftMethod::layer_norm();
    case MethodKind::BitFit: return PeftMethod::bitfit();
    case MethodKind::LoRA: return PeftMethod::lora(vit ? 8 : 4);
    case MethodKind::Adapters: return PeftMethod::adapters(vit ? 8 : (role == Stack::Encoder ? 16 : 4));
    case MethodKind::SSF: return PeftMethod::ssf();
    case MethodKind::VPT: return PeftMethod::vpt(vit ? 8 : 50);
    }
    return PeftMethod::bitfit();
}

namespace {

std::string lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, sep)) out.push_back(item);
    return out;
}

std::string kind_key(const PeftMethod& m) { return lower(to_string(m.kind)); }

std::string module_of(const std::string& path) {
    auto first = path.find('.');
    if (first == std::string::npos) return path;
    auto second = path.find('.', first + 1);
    return second == std::string::npos ? path : path.substr(0, second);
}

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

} // namespace

MixPlan plan_from_name(const std::string& raw, Variant v) {
    std::string name = lower(raw);
    if (name == "no-ft" || name == "noft") return MixPlan::no_ft();
    if (name == "full-ft" || name == "fullft") return MixPlan::full_ft();
    if (name == "petite") return MixPlan::petite(v);
    if (name == "petite-vitvit" || name == "petite-i") {
        if (v != Variant::VitVit) throw ConfigError("petite-vitvit needs the vitvit variant");
        return MixPlan::petite(v);
    }
    if (name == "petite-vitcnn" || name == "petite-ii") {
        if (v != Variant::VitCnn) throw ConfigError("petite-vitcnn needs the vitcnn variant");
        return MixPlan::petite(v);
    }
    auto parts = split(name, '+');
    if (parts.size() == 1) return MixPlan::single(method_kind_from_string(parts[0]), v);
    bool bitfit = false;
    if (parts.size() == 3 && parts[2] == "bitfit") {
        bitfit = true;
        parts.pop_back();
    }
    if (parts.size() != 2) throw ConfigError("cannot parse plan name '" + raw + "'");
    MixPlan p = MixPlan::mix(method_preset(method_kind_from_string(parts[0]), v, Stack::Encoder),
                             method_preset(method_kind_from_string(parts[1]), v, Stack::Decoder), bitfit);
    p.validate(v);
    return p;
}

std::string plan_name(const MixPlan& plan) {
    if (plan.baseline == Baseline::NoFT) return "no-ft";
    if (plan.baseline == Baseline::FullFT) return "full-ft";
    std::string s;
    if (plan.encoder && (!plan.decoder || plan.encoder->kind == plan.decoder->kind) && !plan.bitfit_all_layers) {
        return kind_key(*plan.encoder);
    }
    if (plan.encoder) s = kind_key(*plan.encoder);
    if (plan.decoder) s += (s.empty() ? "" : "+") + kind_key(*plan.decoder);
    if (plan.bitfit_all_layers) s += (s.empty() ? "" : "+") + std::string("bitfit");
    return s;
}

ParamReport count_params(const Model& model) {
    ParamReport r;
    for (const auto& p : model.parameters()) {
        std::size_t n = numel(p.shape);
        auto& mod = r.per_module[module_of(p.path)];
        r.total += n;
        mod.total += n;
        if (p.trainable) {
            r.trainable += n;
            mod.trainable += n;
        }
    }
    r.fraction = r.total == 0 ? 0.0 : static_cast<double>(r.trainable) / static_cast<double>(r.total);
    return r;
}

ParamReport compose(const MixPlan& plan, Model& model) {
    plan.validate(model.config().variant);
    if (plan.baseline == Baseline::FullFT) {
        for (const auto& p : model.parameters()) model.set_trainable(p.path, true);
        return count_params(model);
    }
    freeze_all(model);
    if (plan.baseline == Baseline::NoFT) return count_params(model);
    if (plan.encoder) apply(*plan.encoder, Selector::Encoder, model);
    if (plan.decoder) apply(*plan.decoder, Selector::Decoder, model);
    if (plan.bitfit_all_layers) apply(PeftMethod::bitfit(), Selector::WholeModel, model);
    return count_params(model);
}

ParamReport dry_run_count(const ArchConfig& config, const MixPlan& plan) {
    Model meta = Model::build_meta(config);
    return compose(plan, meta);
}

std::vector<MixPlan> enumerate_combinations(Variant v) {
    using K = MethodKind;
    std::vector<std::pair<K, std::vector<K>>> rows;
    if (v == Variant::VitVit) {
        rows = {{K::LoRA, {K::Adapters, K::SSF, K::VPT}},
                {K::Adapters, {K::LoRA, K::SSF, K::VPT}},
                {K::VPT, {K::LoRA, K::Adapters, K::SSF}},
                {K::SSF, {K::LoRA, K::Adapters, K::VPT}}};
    } else {
        rows = {{K::LoRA, {K::Adapters, K::SSF}},
                {K::Adapters, {K::LoRA, K::SSF}},
                {K::VPT, {K::LoRA, K::Adapters, K::SSF}},
                {K::SSF, {K::Adapters, K::LoRA}}};
    }
    std::vector<MixPlan> out;
    for (const auto& [enc, decs] : rows) {
        for (K dec : decs) {
            out.push_back(MixPlan::mix(method_preset(enc, v, Stack::Encoder), method_preset(dec, v, Stack::Decoder)));
        }
    }
    return out;
}

} // namespace voxpeft

#include "config.hpp"

#include <map>
#include <set>
#include <sstream>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>

#include "voxpeft/errors.hpp"
#include "voxpeft/rng.hpp"

namespace voxpeft::cli {

namespace pt = boost::property_tree;

namespace {

const std::map<std::string, std::set<std::string>>& known_keys() {
    static const std::map<std::string, std::set<std::string>> keys{
        {"arch",
         {"variant", "preset", "volume_size", "patch_size", "embed_dim", "num_heads", "encoder_layers", "mlp_ratio",
          "decoder_layers", "decoder_stages", "decoder_channels", "skip_layers", "residual_output",
          "peft_encoder_layers", "peft_decoder_layers"}},
        {"scanner",
         {"source", "target", "pretrain_train", "pretrain_val", "finetune_train", "finetune_val", "frames",
          "max_edge", "min_edge"}},
        {"pretrain", {"learning_rate", "weight_decay", "optimizer", "schedule", "epochs", "batch_size",
                      "warmup_fraction"}},
        {"finetune", {"plan", "desk_presets", "learning_rate", "weight_decay", "optimizer", "schedule", "epochs",
                      "batch_size", "warmup_fraction"}},
        {"peft", {"lora_rank", "lora_alpha", "lora_targets", "adapter_reduction", "vpt_prompts", "vpt_start_layer",
                  "vpt_extra_prompts", "ssf_sites"}},
        {"sweep", {"workers", "baselines"}},
        {"run", {"seed"}},
    };
    return keys;
}

template <typename T>
std::optional<T> opt(const pt::ptree& tree, const std::string& key) {
    auto raw = tree.get_optional<std::string>(pt::ptree::path_type(key, '/'));
    if (!raw) return std::nullopt;
    std::string text = boost::algorithm::trim_copy(*raw);
    if constexpr (std::is_same_v<T, std::string>) {
        return text;
    } else if constexpr (std::is_same_v<T, bool>) {
        std::string l = boost::algorithm::to_lower_copy(text);
        if (l == "true" || l == "1" || l == "yes" || l == "on") return true;
        if (l == "false" || l == "0" || l == "no" || l == "off") return false;
        throw ConfigError("[" + key + "] expects a boolean, got '" + text + "'");
    } else {
        std::istringstream in(text);
        T value{};
        in >> value;
        if (in.fail() || !in.eof()) throw ConfigError(key + ": cannot parse '" + text + "'");
        if constexpr (std::is_unsigned_v<T>) {
            if (text.starts_with('-')) throw ConfigError(key + ": must not be negative");
        }
        return value;
    }
}

std::vector<std::size_t> size_list(const std::string& key, const std::string& text) {
    std::vector<std::string> parts;
    boost::algorithm::split(parts, text, boost::algorithm::is_any_of(", "), boost::algorithm::token_compress_on);
    std::vector<std::size_t> out;
    for (const auto& p : parts) {
        if (p.empty()) continue;
        try {
            std::size_t used = 0;
            unsigned long v = std::stoul(p, &used);
            if (used != p.size() || p.starts_with('-')) throw std::invalid_argument(p);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError(key + ": '" + p + "' is not a non-negative integer");
        }
    }
    return out;
}

HpOverrides read_hp(const pt::ptree& tree, const std::string& section) {
    HpOverrides o;
    auto k = [&](const char* name) { return section + "/" + name; };
    o.learning_rate = opt<double>(tree, k("learning_rate"));
    o.weight_decay = opt<double>(tree, k("weight_decay"));
    if (auto s = opt<std::string>(tree, k("optimizer"))) o.optimizer = optimizer_from_string(*s);
    if (auto s = opt<std::string>(tree, k("schedule"))) o.schedule = schedule_from_string(*s);
    o.epochs = opt<std::size_t>(tree, k("epochs"));
    o.batch_size = opt<std::size_t>(tree, k("batch_size"));
    o.warmup_fraction = opt<double>(tree, k("warmup_fraction"));
    return o;
}

std::set<LoraTarget> parse_targets(const std::string& text) {
    std::set<LoraTarget> out;
    std::vector<std::string> parts;
    boost::algorithm::split(parts, text, boost::algorithm::is_any_of(", "), boost::algorithm::token_compress_on);
    for (auto p : parts) {
        boost::algorithm::to_lower(p);
        if (p.empty()) continue;
        if (p == "q" || p == "query") out.insert(LoraTarget::Query);
        else if (p == "k" || p == "key") out.insert(LoraTarget::Key);
        else if (p == "v" || p == "value") out.insert(LoraTarget::Value);
        else if (p == "o" || p == "out" || p == "output") out.insert(LoraTarget::Output);
        else throw ConfigError("peft.lora_targets: unknown target '" + p + "'");
    }
    if (out.empty()) throw ConfigError("peft.lora_targets must name at least one projection");
    return out;
}

std::set<SsfSiteKind> parse_ssf_sites(const std::string& text) {
    std::set<SsfSiteKind> out;
    std::vector<std::string> parts;
    boost::algorithm::split(parts, text, boost::algorithm::is_any_of(", "), boost::algorithm::token_compress_on);
    for (auto p : parts) {
        boost::algorithm::to_lower(p);
        if (p.empty()) continue;
        if (p == "norm") out.insert(SsfSiteKind::PostNorm);
        else if (p == "attn" || p == "attention") out.insert(SsfSiteKind::PostAttention);
        else if (p == "mlp") out.insert(SsfSiteKind::PostMlp);
        else throw ConfigError("peft.ssf_sites: unknown site '" + p + "'");
    }
    if (out.empty()) throw ConfigError("peft.ssf_sites must name at least one site");
    return out;
}

std::map<std::size_t, std::size_t> parse_extra_prompts(const std::string& text) {
    std::map<std::size_t, std::size_t> out;
    std::vector<std::string> parts;
    boost::algorithm::split(parts, text, boost::algorithm::is_any_of(", "), boost::algorithm::token_compress_on);
    for (const auto& p : parts) {
        if (p.empty()) continue;
        auto colon = p.find(':');
        if (colon == std::string::npos) throw ConfigError("peft.vpt_extra_prompts: expected layer:count, got '" + p + "'");
        auto layer = size_list("peft.vpt_extra_prompts", p.substr(0, colon));
        auto count = size_list("peft.vpt_extra_prompts", p.substr(colon + 1));
        if (layer.size() != 1 || count.size() != 1) throw ConfigError("peft.vpt_extra_prompts: bad entry '" + p + "'");
        out[layer[0]] = count[0];
    }
    return out;
}

} // namespace

void HpOverrides::apply(Hyperparams& hp) const {
    if (learning_rate) hp.learning_rate = *learning_rate;
    if (weight_decay) hp.weight_decay = *weight_decay;
    if (optimizer) hp.optimizer = *optimizer;
    if (schedule) hp.schedule = *schedule;
    if (epochs) hp.epochs = *epochs;
    if (batch_size) hp.batch_size = *batch_size;
    if (warmup_fraction) hp.warmup_fraction = *warmup_fraction;
}

void PeftOverrides::apply(MixPlan& plan) const {
    auto patch = [&](std::optional<PeftMethod>& m) {
        if (!m) return;
        switch (m->kind) {
        case MethodKind::LoRA:
            if (lora_rank) {
                m->lora_rank = *lora_rank;
                if (!lora_alpha) m->lora_alpha = static_cast<double>(*lora_rank);
            }
            if (lora_alpha) m->lora_alpha = *lora_alpha;
            if (lora_targets) m->lora_targets = parse_targets(*lora_targets);
            break;
        case MethodKind::Adapters:
            if (adapter_reduction) m->adapter_reduction = *adapter_reduction;
            break;
        case MethodKind::VPT:
            if (vpt_prompts) m->vpt_prompts = *vpt_prompts;
            if (vpt_start_layer) m->vpt_start_layer = *vpt_start_layer;
            if (vpt_extra_prompts) m->vpt_extra_prompts = parse_extra_prompts(*vpt_extra_prompts);
            break;
        case MethodKind::SSF:
            if (ssf_sites) m->ssf_sites = parse_ssf_sites(*ssf_sites);
            break;
        default:
            break;
        }
        m->validate();
    };
    patch(plan.encoder);
    patch(plan.decoder);
}

void ExperimentConfig::validate() const {
    arch.validate();
    scanner_profile(data.source_scanner);
    scanner_profile(data.target_scanner);
    if (data.source_scanner == data.target_scanner) {
        throw ConfigError("source and target scanner must differ (both " + std::to_string(data.source_scanner) + ")");
    }
    if (data.frames == 0) throw ConfigError("scanner.frames must be >= 1");
    if (data.pretrain_train == 0 || data.pretrain_val == 0 || data.finetune_val == 0) {
        throw ConfigError("dataset sizes must be >= 1");
    }
    for (int id : {data.source_scanner, data.target_scanner}) {
        ScannerProfile p = mini_profile(id, data.max_edge, data.min_edge);
        for (std::size_t edge : p.resolution) {
            if (edge < arch.volume_size) {
                throw ConfigError("scanner " + std::to_string(id) + " mini grid edge " + std::to_string(edge) +
                                  " is smaller than arch.volume_size " + std::to_string(arch.volume_size));
            }
        }
    }
    pretrain_hparams().validate();
    resolve_plan(plan).validate(arch.variant);
}

Hyperparams ExperimentConfig::pretrain_hparams() const {
    Hyperparams hp = hyperparams_preset(arch.variant, MixPlan::full_ft(), desk_presets);
    hp.epochs = desk_presets ? 200 : 1000;
    hp.seed = derived_seed(kSeedPretrainRun);
    pretrain.apply(hp);
    return hp;
}

Hyperparams ExperimentConfig::finetune_hparams(const MixPlan& p) const {
    Hyperparams hp = hyperparams_preset(arch.variant, p, desk_presets);
    hp.seed = derived_seed(kSeedFinetuneRun);
    finetune.apply(hp);
    return hp;
}

MixPlan ExperimentConfig::resolve_plan(const std::string& name) const {
    MixPlan p = plan_from_name(name, arch.variant);
    peft.apply(p);
    p.validate(arch.variant);
    return p;
}

std::uint64_t ExperimentConfig::derived_seed(std::uint64_t purpose) const {
    return Rng(seed).fork(purpose).next_u64();
}

ScannerProfile ExperimentConfig::source_profile() const {
    return mini_profile(data.source_scanner, data.max_edge, data.min_edge);
}

ScannerProfile ExperimentConfig::target_profile() const {
    return mini_profile(data.target_scanner, data.max_edge, data.min_edge);
}

ExperimentConfig config_from_ptree(const pt::ptree& tree) {
    for (const auto& [section, body] : tree) {
        auto it = known_keys().find(section);
        if (it == known_keys().end()) throw ConfigError("unknown config section [" + section + "]");
        for (const auto& [key, value] : body) {
            if (!it->second.count(key)) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
        }
    }

    ExperimentConfig c;
    try {
        Variant v = Variant::VitCnn;
        if (auto s = opt<std::string>(tree, "arch/variant")) v = variant_from_string(*s);
        std::string preset = opt<std::string>(tree, "arch/preset").value_or("desk");
        if (preset == "desk") c.arch = ArchConfig::desk(v);
        else if (preset == "paper-like") c.arch = ArchConfig::paper_like(v);
        else throw ConfigError("arch.preset must be 'desk' or 'paper-like', got '" + preset + "'");

        ArchConfig& a = c.arch;
        if (auto x = opt<std::size_t>(tree, "arch/volume_size")) a.volume_size = *x;
        if (auto x = opt<std::size_t>(tree, "arch/patch_size")) a.patch_size = *x;
        if (auto x = opt<std::size_t>(tree, "arch/embed_dim")) a.embed_dim = *x;
        if (auto x = opt<std::size_t>(tree, "arch/num_heads")) a.num_heads = *x;
        if (auto x = opt<std::size_t>(tree, "arch/encoder_layers")) a.encoder_layers = *x;
        if (auto x = opt<std::size_t>(tree, "arch/mlp_ratio")) a.mlp_ratio = *x;
        if (auto x = opt<std::size_t>(tree, "arch/decoder_layers")) a.decoder_layers = *x;
        if (auto x = opt<std::size_t>(tree, "arch/decoder_stages")) a.decoder_stages = *x;
        if (auto x = opt<std::string>(tree, "arch/decoder_channels")) a.decoder_channels = size_list("arch.decoder_channels", *x);
        if (auto x = opt<std::string>(tree, "arch/skip_layers")) a.skip_layer_indices = size_list("arch.skip_layers", *x);
        if (auto x = opt<bool>(tree, "arch/residual_output")) a.residual_output = *x;
        if (auto x = opt<std::size_t>(tree, "arch/peft_encoder_layers")) a.peft_encoder_layers = *x;
        if (auto x = opt<std::size_t>(tree, "arch/peft_decoder_layers")) a.peft_decoder_layers = *x;

        DataConfig& d = c.data;
        if (auto x = opt<int>(tree, "scanner/source")) d.source_scanner = *x;
        if (auto x = opt<int>(tree, "scanner/target")) d.target_scanner = *x;
        if (auto x = opt<std::size_t>(tree, "scanner/pretrain_train")) d.pretrain_train = *x;
        if (auto x = opt<std::size_t>(tree, "scanner/pretrain_val")) d.pretrain_val = *x;
        if (auto x = opt<std::size_t>(tree, "scanner/finetune_train")) d.finetune_train = *x;
        if (auto x = opt<std::size_t>(tree, "scanner/finetune_val")) d.finetune_val = *x;
        if (auto x = opt<std::size_t>(tree, "scanner/frames")) d.frames = *x;
        if (auto x = opt<std::size_t>(tree, "scanner/max_edge")) d.max_edge = *x;
        if (auto x = opt<std::size_t>(tree, "scanner/min_edge")) d.min_edge = *x;

        c.pretrain = read_hp(tree, "pretrain");
        c.finetune = read_hp(tree, "finetune");
        if (auto x = opt<std::string>(tree, "finetune/plan")) c.plan = *x;
        if (auto x = opt<bool>(tree, "finetune/desk_presets")) c.desk_presets = *x;

        PeftOverrides& p = c.peft;
        p.lora_rank = opt<std::size_t>(tree, "peft/lora_rank");
        p.lora_alpha = opt<double>(tree, "peft/lora_alpha");
        p.lora_targets = opt<std::string>(tree, "peft/lora_targets");
        p.adapter_reduction = opt<std::size_t>(tree, "peft/adapter_reduction");
        p.vpt_prompts = opt<std::size_t>(tree, "peft/vpt_prompts");
        p.vpt_start_layer = opt<std::size_t>(tree, "peft/vpt_start_layer");
        p.vpt_extra_prompts = opt<std::string>(tree, "peft/vpt_extra_prompts");
        p.ssf_sites = opt<std::string>(tree, "peft/ssf_sites");

        if (auto x = opt<std::size_t>(tree, "sweep/workers")) c.sweep_workers = *x;
        if (auto x = opt<bool>(tree, "sweep/baselines")) c.sweep_baselines = *x;
        if (auto x = opt<std::uint64_t>(tree, "run/seed")) c.seed = *x;
    } catch (const pt::ptree_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    if (path.empty()) return ExperimentConfig{};
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    pt::ptree tree;
    try {
        pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    return config_from_ptree(tree);
}

} // namespace voxpeft::cli

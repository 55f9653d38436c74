#include <cstring>

#include <json.hpp>

#include "voxpeft/errors.hpp"
#include "voxpeft/io.hpp"
#include "voxpeft/train.hpp"

namespace voxpeft {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'T', 'I', 'T'};

json arch_to_json(const ArchConfig& c) {
    return {{"variant", to_string(c.variant)},
            {"volume_size", c.volume_size},
            {"patch_size", c.patch_size},
            {"embed_dim", c.embed_dim},
            {"num_heads", c.num_heads},
            {"encoder_layers", c.encoder_layers},
            {"mlp_ratio", c.mlp_ratio},
            {"decoder_layers", c.decoder_layers},
            {"decoder_stages", c.decoder_stages},
            {"decoder_channels", c.decoder_channels},
            {"skip_layer_indices", c.skip_layer_indices},
            {"residual_output", c.residual_output},
            {"peft_encoder_layers", c.peft_encoder_layers},
            {"peft_decoder_layers", c.peft_decoder_layers}};
}

ArchConfig arch_from_json(const json& j) {
    ArchConfig c;
    c.variant = variant_from_string(j.at("variant").get<std::string>());
    j.at("volume_size").get_to(c.volume_size);
    j.at("patch_size").get_to(c.patch_size);
    j.at("embed_dim").get_to(c.embed_dim);
    j.at("num_heads").get_to(c.num_heads);
    j.at("encoder_layers").get_to(c.encoder_layers);
    j.at("mlp_ratio").get_to(c.mlp_ratio);
    j.at("decoder_layers").get_to(c.decoder_layers);
    j.at("decoder_stages").get_to(c.decoder_stages);
    j.at("decoder_channels").get_to(c.decoder_channels);
    j.at("skip_layer_indices").get_to(c.skip_layer_indices);
    j.at("residual_output").get_to(c.residual_output);
    j.at("peft_encoder_layers").get_to(c.peft_encoder_layers);
    j.at("peft_decoder_layers").get_to(c.peft_decoder_layers);
    return c;
}

json method_to_json(const PeftMethod& m) {
    std::vector<int> targets;
    for (auto t : m.lora_targets) targets.push_back(static_cast<int>(t));
    std::vector<int> sites;
    for (auto s : m.ssf_sites) sites.push_back(static_cast<int>(s));
    json extra = json::array();
    for (const auto& [layer, count] : m.vpt_extra_prompts) extra.push_back({layer, count});
    return {{"kind", to_string(m.kind)},
            {"lora_rank", m.lora_rank},
            {"lora_alpha", m.lora_alpha},
            {"lora_targets", targets},
            {"adapter_reduction", m.adapter_reduction},
            {"vpt_prompts", m.vpt_prompts},
            {"vpt_start_layer", m.vpt_start_layer},
            {"vpt_extra_prompts", extra},
            {"ssf_sites", sites}};
}

PeftMethod method_from_json(const json& j) {
    PeftMethod m;
    m.kind = method_kind_from_string(j.at("kind").get<std::string>());
    j.at("lora_rank").get_to(m.lora_rank);
    j.at("lora_alpha").get_to(m.lora_alpha);
    m.lora_targets.clear();
    for (int t : j.at("lora_targets")) m.lora_targets.insert(static_cast<LoraTarget>(t));
    j.at("adapter_reduction").get_to(m.adapter_reduction);
    j.at("vpt_prompts").get_to(m.vpt_prompts);
    j.at("vpt_start_layer").get_to(m.vpt_start_layer);
    for (const auto& e : j.at("vpt_extra_prompts")) m.vpt_extra_prompts[e.at(0)] = e.at(1);
    m.ssf_sites.clear();
    for (int s : j.at("ssf_sites")) m.ssf_sites.insert(static_cast<SsfSiteKind>(s));
    return m;
}

json plan_to_json(const MixPlan& p) {
    return {{"baseline", static_cast<int>(p.baseline)},
            {"bitfit_all_layers", p.bitfit_all_layers},
            {"encoder", p.encoder ? method_to_json(*p.encoder) : json()},
            {"decoder", p.decoder ? method_to_json(*p.decoder) : json()},
            {"name", plan_name(p)}};
}

MixPlan plan_from_json(const json& j) {
    MixPlan p;
    p.baseline = static_cast<Baseline>(j.at("baseline").get<int>());
    j.at("bitfit_all_layers").get_to(p.bitfit_all_layers);
    if (!j.at("encoder").is_null()) p.encoder = method_from_json(j["encoder"]);
    if (!j.at("decoder").is_null()) p.decoder = method_from_json(j["decoder"]);
    return p;
}

json peft_to_json(const PeftState& s) {
    json lora = json::array();
    for (const auto& [k, v] : s.lora) lora.push_back({v.weight, v.rank, v.alpha});
    json adapters = json::array();
    for (const auto& [k, v] : s.adapters) adapters.push_back({v.prefix, v.hidden, v.convolutional});
    json ssf = json::array();
    for (const auto& [k, v] : s.ssf) ssf.push_back({v.prefix, static_cast<int>(v.target), v.target_weight, v.target_bias});
    json prompts = json::array();
    for (const auto& p : s.prompts) prompts.push_back({static_cast<int>(p.stack), p.layer, p.count});
    return {{"lora", lora},       {"adapters", adapters},         {"ssf", ssf},
            {"prompts", prompts}, {"lora_merged", s.lora_merged}, {"ssf_folded", s.ssf_folded}};
}

PeftState peft_from_json(const json& j) {
    PeftState s;
    for (const auto& e : j.at("lora")) {
        LoraSite site{e.at(0), e.at(1), e.at(2)};
        s.lora[site.weight] = site;
    }
    for (const auto& e : j.at("adapters")) {
        AdapterSite site{e.at(0), e.at(1), e.at(2)};
        s.adapters[site.prefix] = site;
    }
    for (const auto& e : j.at("ssf")) {
        SsfSite site{e.at(0), static_cast<FoldTarget>(e.at(1).get<int>()), e.at(2), e.at(3)};
        s.ssf[site.prefix] = site;
    }
    for (const auto& e : j.at("prompts")) {
        s.prompts.push_back(PromptSite{static_cast<Stack>(e.at(0).get<int>()), e.at(1), e.at(2)});
    }
    j.at("lora_merged").get_to(s.lora_merged);
    j.at("ssf_folded").get_to(s.ssf_folded);
    return s;
}

json hp_to_json(const Hyperparams& hp) {
    return {{"learning_rate", hp.learning_rate}, {"weight_decay", hp.weight_decay},
            {"optimizer", to_string(hp.optimizer)}, {"schedule", to_string(hp.schedule)},
            {"epochs", hp.epochs},               {"batch_size", hp.batch_size},
            {"seed", hp.seed},                   {"warmup_fraction", hp.warmup_fraction}};
}

Hyperparams hp_from_json(const json& j) {
    Hyperparams hp;
    j.at("learning_rate").get_to(hp.learning_rate);
    j.at("weight_decay").get_to(hp.weight_decay);
    hp.optimizer = optimizer_from_string(j.at("optimizer"));
    hp.schedule = schedule_from_string(j.at("schedule"));
    j.at("epochs").get_to(hp.epochs);
    j.at("batch_size").get_to(hp.batch_size);
    j.at("seed").get_to(hp.seed);
    j.at("warmup_fraction").get_to(hp.warmup_fraction);
    return hp;
}

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const std::string& s, std::size_t at, int bytes) {
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[at + i])) << (8 * i);
    return v;
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    const Model& m = ck.model;
    if (m.is_meta()) throw ContractError("cannot checkpoint a shape-only model");
    std::string blob;
    json params = json::array();
    for (const auto& p : m.parameters()) {
        params.push_back({{"path", p.path}, {"shape", p.shape}, {"role", to_string(p.role)}, {"trainable", p.trainable}});
        append_f64_le(blob, p.value.data());
    }
    json moments = json::array();
    for (const auto& [path, mo] : ck.optimizer.moments) {
        moments.push_back({{"path", path}, {"size", mo.m.size()}});
        append_f64_le(blob, mo.m);
        append_f64_le(blob, mo.v);
    }
    json best = json::array();
    for (const auto& [path, v] : ck.best_values) {
        best.push_back({{"path", path}, {"size", v.size()}});
        append_f64_le(blob, v);
    }
    json epochs = json::array();
    for (const auto& e : ck.history.epochs) {
        epochs.push_back(e.epoch);
        double row[] = {e.train_loss, e.val_psnr, e.val_ssim, e.val_nrmse, e.lr};
        append_f64_le(blob, row);
    }
    json h = {{"arch", arch_to_json(m.config())},
              {"model_seed", m.seed()},
              {"params", params},
              {"peft", peft_to_json(m.peft())},
              {"plan", ck.plan ? plan_to_json(*ck.plan) : json()},
              {"hp", hp_to_json(ck.hp)},
              {"optimizer",
               {{"kind", to_string(ck.optimizer.kind)},
                {"weight_decay", ck.optimizer.weight_decay},
                {"step", ck.optimizer.step},
                {"moments", moments}}},
              {"epoch", ck.epoch},
              {"rng_state", ck.rng_state},
              {"history_epochs", epochs},
              {"best", best},
              {"blob_bytes", blob.size()}};
    std::string header = h.dump();
    std::string out(kMagic, 4);
    put_u32(out, kCheckpointVersion);
    put_u64(out, header.size());
    out += header;
    out += blob;
    atomic_write(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::string bytes = read_file(path);
    const std::string where = path.string() + ": ";
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw HeaderError(where + "not a checkpoint (bad magic)");
    }
    auto version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
    if (version != kCheckpointVersion) {
        throw VersionError(where + "checkpoint format version " + std::to_string(version) + ", expected " +
                           std::to_string(kCheckpointVersion));
    }
    std::uint64_t header_len = get_le(bytes, 8, 8);
    if (16 + header_len > bytes.size()) throw PayloadError(where + "truncated header");
    json h;
    try {
        h = json::parse(bytes.substr(16, header_len));
    } catch (const json::exception& e) {
        throw HeaderError(where + "unreadable header: " + e.what());
    }
    std::size_t at = 16 + header_len;
    std::size_t blob_bytes = 0;
    try {
        blob_bytes = h.at("blob_bytes");
    } catch (const json::exception& e) {
        throw HeaderError(where + e.what());
    }
    if (bytes.size() - at != blob_bytes) {
        throw PayloadError(where + "payload has " + std::to_string(bytes.size() - at) + " bytes, header expects " +
                           std::to_string(blob_bytes));
    }
    auto take = [&](std::size_t n) {
        if (at + n * 8 > bytes.size()) throw PayloadError(where + "payload shorter than the header describes");
        auto v = parse_f64_le(bytes.data() + at, n);
        at += n * 8;
        return v;
    };
    try {
        ArchConfig arch = arch_from_json(h.at("arch"));
        std::vector<Parameter> params;
        for (const auto& e : h.at("params")) {
            Parameter p;
            p.path = e.at("path");
            p.shape = e.at("shape").get<Shape>();
            p.role = role_from_string(e.at("role"));
            p.trainable = e.at("trainable");
            p.value = Tensor::from(p.shape, take(shape_numel(p.shape)));
            params.push_back(std::move(p));
        }
        Model model = Model::restore(arch, h.at("model_seed").get<std::uint64_t>(), std::move(params),
                                     peft_from_json(h.at("peft")));
        OptimizerState opt;
        const json& o = h.at("optimizer");
        opt.kind = optimizer_from_string(o.at("kind"));
        opt.weight_decay = o.at("weight_decay");
        opt.step = o.at("step");
        for (const auto& e : o.at("moments")) {
            std::size_t n = e.at("size");
            Moments mo;
            mo.m = take(n);
            mo.v = take(n);
            opt.moments[e.at("path").get<std::string>()] = std::move(mo);
        }
        std::map<std::string, std::vector<double>> best;
        for (const auto& e : h.at("best")) best[e.at("path").get<std::string>()] = take(e.at("size").get<std::size_t>());
        History history;
        for (const auto& e : h.at("history_epochs")) {
            auto row = take(5);
            history.epochs.push_back({e.get<std::size_t>(), row[0], row[1], row[2], row[3], row[4]});
        }
        std::optional<MixPlan> plan;
        if (!h.at("plan").is_null()) plan = plan_from_json(h["plan"]);
        return Checkpoint{std::move(model), std::move(plan), hp_from_json(h.at("hp")), std::move(opt),
                          h.at("epoch").get<std::size_t>(), h.at("rng_state").get<std::string>(),
                          std::move(history), std::move(best)};
    } catch (const json::exception& e) {
        throw HeaderError(where + "malformed header: " + e.what());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ArchConfig& expected) {
    Checkpoint ck = load_checkpoint(path);
    if (!(ck.model.config() == expected)) {
        throw ConfigError(path.string() + ": checkpoint was built for a different architecture (" +
                          to_string(ck.model.config().variant) + ", d=" + std::to_string(ck.model.config().embed_dim) +
                          ") than the configured one (" + to_string(expected.variant) +
                          ", d=" + std::to_string(expected.embed_dim) + ")");
    }
    return ck;
}

} // namespace voxpeft

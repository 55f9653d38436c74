#include "voxpeft/gradcheck.hpp"
#include "voxpeft/mix.hpp"
#include "voxpeft/model.hpp"
#include "voxpeft/ops.hpp"
#include "voxpeft/peft.hpp"
#include "voxpeft/rng.hpp"

namespace voxpeft {

namespace {

Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(out, uniform_tensor(out.shape(), rng)));
}

// Keeps whole-model losses O(1) so finite-difference round-off stays below
// the absolute floor.
Tensor weighted_mean(const Tensor& out, std::uint64_t seed) {
    return scale(weighted_sum(out, seed), 1.0 / static_cast<double>(out.numel()));
}

ArchConfig tiny(Variant v) {
    ArchConfig c = ArchConfig::desk(v);
    c.volume_size = 8;
    c.patch_size = 4;
    c.embed_dim = 8;
    c.num_heads = 2;
    c.encoder_layers = 3;
    c.mlp_ratio = 2;
    c.decoder_layers = 2;
    c.decoder_stages = 2;
    c.decoder_channels = {4, 2};
    c.skip_layer_indices = {1, 2, 3};
    c.peft_encoder_layers = 0;
    c.peft_decoder_layers = 0;
    return c;
}

void randomize(Model& m, Rng& rng) {
    for (const auto& p : m.parameters()) {
        auto d = m.mutable_value(p.path).mutable_data();
        for (double& x : d) x = rng.uniform(-0.5, 0.5);
    }
}

GradcheckResult check_model(const std::string& name, Model& m, std::uint64_t seed) {
    Rng rng(seed);
    randomize(m, rng);
    Tensor x = uniform_tensor({1, m.config().volume_size, m.config().volume_size, m.config().volume_size}, rng, 0, 1);
    std::uint64_t wseed = rng.next_u64();
    std::vector<Tensor> params;
    for (const auto& p : m.parameters()) {
        if (p.trainable) params.push_back(p.value);
    }
    params.push_back(x);
    GradcheckOptions opts;
    opts.max_entries = 24;
    opts.seed = seed;
    // The parameters are shared with the model, so the loss ignores its
    // argument and reads them through forward().
    return gradcheck(name, params, [&](const std::vector<Tensor>& in) {
        return weighted_mean(forward(m, in.back()), wseed);
    }, opts);
}

} // namespace

std::vector<GradcheckResult> model_gradchecks(std::uint64_t seed) {
    Rng rng(seed);
    auto u = [&](const Shape& s) { return uniform_tensor(s, rng); };
    std::vector<GradcheckResult> out;
    auto run = [&](const std::string& name, std::vector<Tensor> inputs, auto fn) {
        std::uint64_t wseed = rng.next_u64();
        out.push_back(gradcheck(name, std::move(inputs), [fn, wseed](const std::vector<Tensor>& in) {
            return weighted_sum(fn(in), wseed);
        }));
    };
    run("lora_forward", {u({3, 5}), u({4, 5}), u({4}), u({2, 5}), u({4, 2})},
        [](const auto& in) { return lora_forward(in[0], in[1], in[2], in[3], in[4], 0.5); });
    run("lora_effective_weight", {u({3, 2, 2}), u({2, 4}), u({3, 2})},
        [](const auto& in) { return lora_effective_weight(in[0], in[1], in[2], 2.0); });
    run("ssf_forward", {u({3, 4}), u({4}), u({4})},
        [](const auto& in) { return ssf_forward(in[0], in[1], in[2], false); });
    run("ssf_forward(channels)", {u({2, 2, 2, 3}), u({2}), u({2})},
        [](const auto& in) { return ssf_forward(in[0], in[1], in[2], true); });
    run("insert_prompts", {u({2, 4}), u({3, 4})},
        [](const auto& in) { return insert_prompts(in[0], in[1]); });
    run("strip_prompts", {u({5, 4})}, [](const auto& in) { return strip_prompts(in[0], 2); });

    for (Variant v : {Variant::VitVit, Variant::VitCnn}) {
        Model base = Model::build(tiny(v), seed);
        out.push_back(check_model("model(" + to_string(v) + ")", base, rng.next_u64()));

        Model peft = Model::build(tiny(v), seed);
        freeze_all(peft);
        apply(PeftMethod::lora(2), Selector::WholeModel, peft);
        apply(PeftMethod::adapters(4), Selector::WholeModel, peft);
        apply(PeftMethod::ssf(), Selector::WholeModel, peft);
        apply(PeftMethod::vpt(2), Selector::Encoder, peft);
        apply(PeftMethod::bitfit(), Selector::WholeModel, peft);
        out.push_back(check_model("model(" + to_string(v) + ",peft)", peft, rng.next_u64()));
    }
    return out;
}

} // namespace voxpeft

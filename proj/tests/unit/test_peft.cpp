#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "voxpeft/errors.hpp"
#include "voxpeft/ops.hpp"
#include "voxpeft/peft.hpp"
#include "voxpeft/rng.hpp"
#include "voxpeft/train.hpp"

using namespace voxpeft;

namespace {

Tensor random_volume(std::uint64_t seed, std::size_t s = 16) {
    Rng rng(seed);
    return uniform_tensor({1, s, s, s}, rng, 0.0, 1.0);
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double worst = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
    return worst;
}

std::set<std::string> trainable_paths(const Model& m) {
    std::set<std::string> out;
    for (const auto& p : m.parameters()) {
        if (p.trainable) out.insert(p.path);
    }
    return out;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool in_stack(const std::string& path, Selector sel) {
    if (sel == Selector::WholeModel) return true;
    return path.rfind(sel == Selector::Encoder ? "encoder." : "decoder.", 0) == 0;
}

// Perturbs every injected parameter so equivalence checks are not trivially satisfied.
void randomize_injected(Model& m, std::uint64_t seed, double lo = -0.3, double hi = 0.3) {
    Rng rng(seed);
    for (const auto& p : m.parameters()) {
        if (p.role != ParamRole::Injected) continue;
        auto d = m.mutable_value(p.path).mutable_data();
        for (double& x : d) x += rng.uniform(lo, hi);
    }
}

Model fresh(Variant v, std::uint64_t seed = 4) {
    Model m = Model::build(ArchConfig::desk(v), seed);
    freeze_all(m);
    return m;
}

} // namespace

TEST(FreezeAll, ZeroTrainableAndIdempotent) {
    Model m = Model::build(ArchConfig::desk(Variant::VitCnn), 1);
    freeze_all(m);
    EXPECT_TRUE(trainable_paths(m).empty());
    freeze_all(m);
    EXPECT_TRUE(trainable_paths(m).empty());
}

TEST(FreezeAll, TenOptimizerStepsChangeNothing) {
    Model m = Model::build(ArchConfig::desk(Variant::VitVit), 1);
    // Populate gradients first so the optimizer has something it could apply.
    mse_loss(forward(m, random_volume(3)), random_volume(4)).backward();
    freeze_all(m);
    Model before = m.clone();
    Optimizer opt(OptimizerKind::AdamW, 0.1);
    for (int s = 0; s < 10; ++s) opt.step(m, 1e-1);
    for (const auto& p : m.parameters()) {
        auto a = p.value.data(), b = before.value(p.path).data();
        ASSERT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << p.path;
    }
    EXPECT_TRUE(opt.state().moments.empty());
}

TEST(FreezeAll, PartialFreezeSurvivesRealSteps) {
    Model m = fresh(Variant::VitCnn);
    apply(PeftMethod::bitfit(), Selector::WholeModel, m);
    Model before = m.clone();
    Optimizer opt(OptimizerKind::Adam, 1e-2);
    Tensor x = random_volume(3), y = random_volume(4);
    for (int s = 0; s < 10; ++s) {
        zero_grads(m);
        mse_loss(forward(m, x), y).backward();
        opt.step(m, 1e-2);
    }
    bool moved = false;
    for (const auto& p : m.parameters()) {
        auto a = p.value.data(), b = before.value(p.path).data();
        bool same = std::equal(a.begin(), a.end(), b.begin());
        if (!p.trainable) EXPECT_TRUE(same) << p.path;
        else moved = moved || !same;
    }
    EXPECT_TRUE(moved);
}

TEST(Apply, BitFitSelectsExactlyTheBiases) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        for (auto sel : {Selector::Encoder, Selector::Decoder, Selector::WholeModel}) {
            Model m = fresh(v);
            auto added = apply(PeftMethod::bitfit(), sel, m);
            std::set<std::string> want;
            for (const auto& p : m.parameters()) {
                if ((ends_with(p.path, ".bias") || ends_with(p.path, "_bias")) && in_stack(p.path, sel)) want.insert(p.path);
            }
            EXPECT_EQ(trainable_paths(m), want);
            EXPECT_EQ(std::set<std::string>(added.begin(), added.end()), want);
        }
    }
}

TEST(Apply, BitFitOnSevenBiasModel) {
    // patch_embed.bias + six per transformer block.
    ArchConfig c = ArchConfig::desk(Variant::VitCnn);
    c.encoder_layers = 1;
    c.skip_layer_indices = {1};
    c.decoder_stages = 2;
    Model m = Model::build(c, 1);
    freeze_all(m);
    auto added = apply(PeftMethod::bitfit(), Selector::Encoder, m);
    EXPECT_EQ(added.size(), 7u);
}

TEST(Apply, LayerNormTuneSelectsGammaAndBeta) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        Model m = fresh(v);
        std::size_t before = m.parameters().size();
        apply(PeftMethod::layer_norm(), Selector::WholeModel, m);
        EXPECT_EQ(m.parameters().size(), before); // selective: nothing added
        std::set<std::string> want;
        for (const auto& p : m.parameters()) {
            bool norm = p.path.find("norm") != std::string::npos;
            if (norm && (ends_with(p.path, ".gamma") || ends_with(p.path, ".beta"))) want.insert(p.path);
        }
        EXPECT_EQ(trainable_paths(m), want);
    }
}

TEST(Apply, LoraRankTwoOnOneLayerAdds256) {
    ArchConfig c = ArchConfig::desk(Variant::VitVit);
    c.peft_encoder_layers = 1;
    Model m = Model::build(c, 1);
    freeze_all(m);
    auto added = apply(PeftMethod::lora(2), Selector::Encoder, m);
    std::size_t n = 0;
    for (const auto& p : added) n += shape_numel(m.param(p).shape);
    EXPECT_EQ(n, 2u * (2 * 32 + 32 * 2));
    EXPECT_EQ(added.size(), 4u);
}

TEST(Apply, LoraQkHasFewerParamsThanQkv) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        Model a = fresh(v), b = fresh(v);
        PeftMethod qk = PeftMethod::lora(4);
        PeftMethod qkv = qk;
        qkv.lora_targets.insert(LoraTarget::Value);
        std::size_t na = 0, nb = 0;
        for (const auto& p : apply(qk, Selector::Encoder, a)) na += shape_numel(a.param(p).shape);
        for (const auto& p : apply(qkv, Selector::Encoder, b)) nb += shape_numel(b.param(p).shape);
        EXPECT_LT(na, nb);
    }
}

TEST(Apply, GeneratorInjectionLimitedToLeadingLayers) {
    Model m = fresh(Variant::VitVit);
    apply(PeftMethod::lora(4), Selector::WholeModel, m);
    apply(PeftMethod::adapters(8), Selector::WholeModel, m);
    apply(PeftMethod::ssf(), Selector::WholeModel, m);
    for (const auto& p : m.parameters()) {
        if (p.role != ParamRole::Injected) continue;
        EXPECT_EQ(p.path.find("encoder.block4"), std::string::npos) << p.path;
        EXPECT_EQ(p.path.find("decoder.block3"), std::string::npos) << p.path;
    }
    EXPECT_TRUE(m.has("encoder.block3.attn.q_weight.lora_a"));
    EXPECT_TRUE(m.has("decoder.block2.adapter.up_weight"));
}

TEST(Apply, SsfSiteWalkingCount) {
    ArchConfig c = ArchConfig::desk(Variant::VitCnn);
    Model m = Model::build(c, 1);
    freeze_all(m);
    auto added = apply(PeftMethod::ssf(), Selector::Encoder, m);
    // Independent walk: each block has norm1, norm2, attention output and MLP output sites.
    std::size_t sites = 0;
    for (std::size_t l = 1; l <= c.encoder_layers; ++l) {
        std::string b = "encoder.block" + std::to_string(l);
        for (const char* n : {".norm1.gamma", ".norm2.gamma", ".attn.o_weight", ".mlp.fc2_weight"}) {
            if (m.has(b + n)) ++sites;
        }
    }
    EXPECT_EQ(sites, 16u);
    std::size_t n = 0;
    for (const auto& p : added) n += shape_numel(m.param(p).shape);
    EXPECT_EQ(n, sites * 2 * c.embed_dim);
}

TEST(Apply, AdditiveMethodsFlipNoExistingFlags) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        for (auto method : {PeftMethod::lora(4), PeftMethod::adapters(4), PeftMethod::ssf(), PeftMethod::vpt(4)}) {
            Model m = fresh(v);
            std::set<std::string> base;
            for (const auto& p : m.parameters()) base.insert(p.path);
            Selector sel = method.kind == MethodKind::VPT ? Selector::Encoder : Selector::WholeModel;
            auto added = apply(method, sel, m);
            EXPECT_FALSE(added.empty());
            for (const auto& p : added) {
                EXPECT_FALSE(base.count(p)) << p;
                EXPECT_EQ(m.param(p).role, ParamRole::Injected);
            }
            EXPECT_EQ(trainable_paths(m), std::set<std::string>(added.begin(), added.end()));
        }
    }
}

TEST(Apply, InjectedPathsFollowTheirMethodRule) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        struct Case {
            PeftMethod method;
            const char* marker;
        };
        for (const auto& k : {Case{PeftMethod::lora(4), ".lora_"}, Case{PeftMethod::adapters(4), ".adapter."},
                              Case{PeftMethod::ssf(), "ssf"}, Case{PeftMethod::vpt(4), ".prompts."}}) {
            for (auto sel : {Selector::Encoder, Selector::Decoder}) {
                if (k.method.kind == MethodKind::VPT && sel == Selector::Decoder && v == Variant::VitCnn) continue;
                Model m = fresh(v);
                for (const auto& p : apply(k.method, sel, m)) {
                    EXPECT_NE(p.find(k.marker), std::string::npos) << p;
                    EXPECT_TRUE(in_stack(p, sel)) << p;
                }
            }
        }
    }
}

TEST(Apply, VptSiteErrors) {
    Model m = fresh(Variant::VitCnn);
    EXPECT_THROW(apply(PeftMethod::vpt(8), Selector::Decoder, m), UnsupportedSiteError);
    ArchConfig c = ArchConfig::desk(Variant::VitCnn);
    c.encoder_layers = 1;
    c.skip_layer_indices = {1};
    Model shallow = Model::build(c, 1);
    freeze_all(shallow);
    EXPECT_THROW(apply(PeftMethod::vpt(8), Selector::Encoder, shallow), ConfigError);
    Model deep = fresh(Variant::VitCnn);
    EXPECT_THROW(apply(PeftMethod::vpt(8, 5), Selector::Encoder, deep), ConfigError);
}

TEST(PeftMethod, ValidationRejectsBadHyperparameters) {
    EXPECT_THROW(PeftMethod::adapters(3).validate(), ConfigError);
    EXPECT_THROW(PeftMethod::lora(0).validate(), ConfigError);
    EXPECT_THROW(PeftMethod::vpt(8, 1).validate(), ConfigError);
    for (std::size_t rf : {1, 4, 8, 16, 32}) EXPECT_NO_THROW(PeftMethod::adapters(rf).validate());
    EXPECT_EQ(PeftMethod::lora(8).label(), "LoRA(r=8)");
    EXPECT_EQ(PeftMethod::adapters(16).label(), "Adapters(rf=16)");
    EXPECT_EQ(PeftMethod::vpt(50).label(), "VPT(p=50)");
}

TEST(LoraForward, ZeroBIsBaseline) {
    Rng rng(1);
    Tensor x = uniform_tensor({5, 6}, rng), w = uniform_tensor({4, 6}, rng), b = uniform_tensor({4}, rng);
    Tensor a = uniform_tensor({2, 6}, rng);
    Tensor y = lora_forward(x, w, b, a, Tensor::zeros({4, 2}), 3.0);
    Tensor base = linear(x, w, b);
    EXPECT_EQ(max_abs_diff(y, base), 0.0);
}

TEST(LoraForward, UnitConstructionAddsInputChannel) {
    Rng rng(2);
    Tensor x = uniform_tensor({3, 5}, rng), w = uniform_tensor({4, 5}, rng), b = uniform_tensor({4}, rng);
    std::size_t i = 2, j = 1;
    Tensor a = Tensor::zeros({1, 5});
    a.mutable_data()[i] = 1.0;
    Tensor bb = Tensor::zeros({4, 1});
    bb.mutable_data()[j] = 1.0;
    Tensor y = lora_forward(x, w, b, a, bb, 1.0); // alpha = r = 1
    Tensor base = linear(x, w, b);
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            double want = base.data()[r * 4 + c] + (c == j ? x.data()[r * 5 + i] : 0.0);
            EXPECT_NEAR(y.data()[r * 4 + c], want, 1e-15);
        }
    }
}

TEST(LoraForward, MatchesMergedDenseWeight) {
    Rng rng(3);
    Tensor x = uniform_tensor({7, 8}, rng), w = uniform_tensor({6, 8}, rng), b = uniform_tensor({6}, rng);
    Tensor a = uniform_tensor({3, 8}, rng), bb = uniform_tensor({6, 3}, rng);
    double s = 2.5;
    // W + s·B·A by hand.
    std::vector<double> merged(w.data().begin(), w.data().end());
    for (std::size_t o = 0; o < 6; ++o)
        for (std::size_t i = 0; i < 8; ++i)
            for (std::size_t r = 0; r < 3; ++r) merged[o * 8 + i] += s * bb.data()[o * 3 + r] * a.data()[r * 8 + i];
    Tensor dense = linear(x, Tensor::from({6, 8}, merged), b);
    EXPECT_LT(max_abs_diff(lora_forward(x, w, b, a, bb, s), dense), 1e-9);
}

TEST(LoraForward, RankAboveMinDimsIsConfigError) {
    Tensor w = Tensor::zeros({2, 6});
    EXPECT_THROW(lora_forward(Tensor::zeros({1, 6}), w, Tensor(), Tensor::zeros({3, 6}), Tensor::zeros({2, 3}), 1.0),
                 ConfigError);
    ArchConfig c = ArchConfig::desk(Variant::VitVit);
    c.embed_dim = 8;
    c.num_heads = 2;
    Model m = Model::build(c, 1);
    freeze_all(m);
    EXPECT_THROW(apply(PeftMethod::lora(16), Selector::Encoder, m), ConfigError);
}

TEST(NearIdentity, AdditiveMethodsAtInitialization) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        Model base = Model::build(ArchConfig::desk(v), 8);
        for (auto method : {PeftMethod::lora(4), PeftMethod::adapters(4), PeftMethod::ssf()}) {
            Model m = base.clone();
            freeze_all(m);
            apply(method, Selector::WholeModel, m);
            for (std::uint64_t s = 0; s < 3; ++s) {
                Tensor x = random_volume(100 + s);
                EXPECT_LT(max_abs_diff(forward(m, x), forward(base, x)), 1e-12) << method.label();
            }
        }
        Model m = base.clone();
        freeze_all(m);
        apply(PeftMethod::vpt(0), Selector::Encoder, m);
        Tensor x = random_volume(7);
        EXPECT_EQ(max_abs_diff(forward(m, x), forward(base, x)), 0.0);
    }
}

TEST(InsertPrompts, ConcatenatesAlongTokens) {
    Rng rng(1);
    Tensor p = uniform_tensor({3, 4}, rng), e = uniform_tensor({5, 4}, rng);
    Tensor z = insert_prompts(p, e);
    EXPECT_EQ(z.shape(), (Shape{8, 4}));
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(z.data()[i], p.data()[i]);
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(z.data()[12 + i], e.data()[i]);
    Tensor back = strip_prompts(z, 3);
    EXPECT_EQ(max_abs_diff(back, e), 0.0);
}

TEST(InsertPrompts, TokenCountsPerLayerAndStrippedDecoderInput) {
    for (std::size_t p : {1, 8, 32}) {
        Model m = fresh(Variant::VitCnn);
        apply(PeftMethod::vpt(p), Selector::Encoder, m);
        auto st = encoder_states(m, random_volume(1));
        EXPECT_EQ(st[0].size(0), 64u);
        for (std::size_t l = 1; l < st.size(); ++l) EXPECT_EQ(st[l].size(0), 64u + p);
        // Skips and decoder see 64 tokens whatever p is, so the output keeps its shape.
        EXPECT_EQ(forward(m, random_volume(1)).shape(), (Shape{1, 16, 16, 16}));
    }
    Model g = fresh(Variant::VitVit);
    apply(PeftMethod::vpt(8), Selector::Encoder, g);
    EXPECT_EQ(forward(g, random_volume(1)).shape(), (Shape{1, 16, 16, 16}));
}

TEST(MergeLora, MatchesRuntimeForward) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        Model m = fresh(v);
        apply(PeftMethod::lora(4), Selector::WholeModel, m);
        randomize_injected(m, 5);
        Model merged = m.clone();
        merge_lora(merged);
        for (std::uint64_t s = 0; s < 4; ++s) {
            Tensor x = random_volume(200 + s);
            EXPECT_LT(max_abs_diff(forward(merged, x), forward(m, x)), 1e-9);
        }
        EXPECT_THROW(merge_lora(merged), ContractError);
    }
}

TEST(MergeLora, ZeroBIsNoOpAndCountDrops) {
    Model m = fresh(Variant::VitCnn);
    Model pristine = m.clone();
    auto added = apply(PeftMethod::lora(4), Selector::WholeModel, m);
    std::size_t lora_count = 0;
    for (const auto& p : added) lora_count += shape_numel(m.param(p).shape);
    auto total = [](const Model& x) {
        std::size_t n = 0;
        for (const auto& p : x.parameters()) n += shape_numel(p.shape);
        return n;
    };
    std::size_t before = total(m);
    merge_lora(m);
    EXPECT_EQ(total(m), before - lora_count);
    EXPECT_TRUE(trainable_paths(m).empty());
    for (const auto& p : pristine.parameters()) {
        auto a = p.value.data(), b = m.value(p.path).data();
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << p.path;
    }
}

TEST(FoldSsf, MatchesRuntimeForward) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        Model m = fresh(v);
        apply(PeftMethod::ssf(), Selector::WholeModel, m);
        randomize_injected(m, 9);
        Model folded = m.clone();
        FoldReport r = fold_ssf(folded);
        EXPECT_FALSE(r.folded.empty());
        EXPECT_TRUE(r.retained.empty());
        for (const auto& p : folded.parameters()) EXPECT_EQ(p.path.find("ssf"), std::string::npos) << p.path;
        for (std::uint64_t s = 0; s < 4; ++s) {
            Tensor x = random_volume(300 + s);
            EXPECT_LT(max_abs_diff(forward(folded, x), forward(m, x)), 1e-9);
        }
        EXPECT_THROW(fold_ssf(folded), ContractError);
    }
}

TEST(FoldSsf, IdentityFoldIsNoOp) {
    Model m = fresh(Variant::VitVit);
    Model pristine = m.clone();
    apply(PeftMethod::ssf(), Selector::WholeModel, m);
    fold_ssf(m);
    for (const auto& p : pristine.parameters()) {
        auto a = p.value.data(), b = m.value(p.path).data();
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin())) << p.path;
    }
}

TEST(FoldSsf, WithLoraStillMatches) {
    Model m = fresh(Variant::VitCnn);
    apply(PeftMethod::lora(4), Selector::WholeModel, m);
    apply(PeftMethod::ssf(), Selector::WholeModel, m);
    randomize_injected(m, 10);
    Model folded = m.clone();
    fold_ssf(folded);
    merge_lora(folded);
    Tensor x = random_volume(31);
    EXPECT_LT(max_abs_diff(forward(folded, x), forward(m, x)), 1e-9);
}

TEST(FoldSsf, NothingToFoldIsContractError) {
    Model m = fresh(Variant::VitVit);
    EXPECT_THROW(fold_ssf(m), ContractError);
    EXPECT_THROW(merge_lora(m), ContractError);
}

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "voxpeft/errors.hpp"
#include "voxpeft/model.hpp"
#include "voxpeft/ops.hpp"
#include "voxpeft/peft.hpp"
#include "voxpeft/rng.hpp"

using namespace voxpeft;

namespace {

Tensor random_volume(std::size_t s, std::uint64_t seed) {
    Rng rng(seed);
    return uniform_tensor({1, s, s, s}, rng, 0.0, 1.0);
}

std::size_t vit_block(std::size_t d, std::size_t m) { return 4 * d + 4 * (d * d + d) + (d * m + m) + (m * d + d); }

// Closed-form count for the transformer/transformer variant.
std::size_t vitvit_count(const ArchConfig& c) {
    std::size_t d = c.embed_dim, p = c.patch_voxels(), t = c.tokens(), m = c.mlp_dim();
    return (d * p + d) + t * d + c.encoder_layers * vit_block(d, m) + 2 * d + c.decoder_layers * vit_block(d, m) +
           2 * d + (p * d + p);
}

// Desk VitCnn: bottleneck = layer 4, stage 1 fuses skip 3, stage 2 fuses skips 2 and 1 plus the input branch.
std::size_t vitcnn_desk_count(const ArchConfig& c) {
    std::size_t d = c.embed_dim, p = c.patch_voxels(), t = c.tokens(), m = c.mlp_dim();
    std::size_t c1 = c.decoder_channels[0], c2 = c.decoder_channels[1];
    std::size_t n = (d * p + d) + t * d + c.encoder_layers * vit_block(d, m);
    n += c2 * 27 + c2 + 2 * c2;                 // input conv + norm
    n += d * c1 * 8 + c1;                       // stage1.up
    n += d * c1 * 8 + c1;                       // skip3.up1
    n += c1 * (2 * c1) * 27 + c1 + 2 * c1;      // stage1 fuse + norm
    n += c1 * c2 * 8 + c2;                      // stage2.up
    n += 2 * ((d * c2 * 8 + c2) + (c2 * c2 * 8 + c2)); // skip2, skip1: two upsamplings each
    n += c2 * (3 * c2) * 27 + c2 + 2 * c2;      // stage2 fuse + norm
    n += c2 + 1;                                // head
    return n;
}

std::size_t count(const Model& m) {
    std::size_t n = 0;
    for (const auto& p : m.parameters()) n += shape_numel(p.shape);
    return n;
}

// Plain-loop transformer used as an oracle for encoder_states.
struct Dense {
    std::size_t rows, cols;
    std::vector<double> v;
    double& at(std::size_t r, std::size_t c) { return v[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * cols + c]; }
};

Dense dense(std::size_t r, std::size_t c) { return {r, c, std::vector<double>(r * c, 0.0)}; }

Dense linear_ref(const Dense& x, const Tensor& w, const Tensor& b) {
    std::size_t out = w.size(0), in = w.size(1);
    Dense y = dense(x.rows, out);
    for (std::size_t r = 0; r < x.rows; ++r) {
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b.data()[o];
            for (std::size_t i = 0; i < in; ++i) acc += x.at(r, i) * w.data()[o * in + i];
            y.at(r, o) = acc;
        }
    }
    return y;
}

Dense norm_ref(const Dense& x, const Tensor& g, const Tensor& b) {
    Dense y = x;
    for (std::size_t r = 0; r < x.rows; ++r) {
        double mean = 0, var = 0;
        for (std::size_t i = 0; i < x.cols; ++i) mean += x.at(r, i);
        mean /= static_cast<double>(x.cols);
        for (std::size_t i = 0; i < x.cols; ++i) var += (x.at(r, i) - mean) * (x.at(r, i) - mean);
        var /= static_cast<double>(x.cols);
        for (std::size_t i = 0; i < x.cols; ++i) {
            y.at(r, i) = (x.at(r, i) - mean) / std::sqrt(var + 1e-5) * g.data()[i] + b.data()[i];
        }
    }
    return y;
}

std::vector<Dense> reference_states(const Model& model, const Tensor& x) {
    const ArchConfig& c = model.config();
    std::size_t g = c.grid(), ps = c.patch_size, s = c.volume_size, d = c.embed_dim, h = c.num_heads;
    std::size_t dh = d / h;
    Dense patches = dense(c.tokens(), c.patch_voxels());
    for (std::size_t a = 0; a < g; ++a)
        for (std::size_t b = 0; b < g; ++b)
            for (std::size_t e = 0; e < g; ++e)
                for (std::size_t i = 0; i < ps; ++i)
                    for (std::size_t j = 0; j < ps; ++j)
                        for (std::size_t k = 0; k < ps; ++k) {
                            std::size_t tok = (a * g + b) * g + e;
                            std::size_t pix = (i * ps + j) * ps + k;
                            patches.at(tok, pix) = x.data()[((a * ps + i) * s + (b * ps + j)) * s + (e * ps + k)];
                        }
    Dense cur = linear_ref(patches, model.value("encoder.patch_embed.weight"), model.value("encoder.patch_embed.bias"));
    for (std::size_t i = 0; i < cur.v.size(); ++i) cur.v[i] += model.value("encoder.pos_embed").data()[i];

    std::vector<Dense> out;
    for (std::size_t l = 1; l <= c.encoder_layers; ++l) {
        std::string p = "encoder.block" + std::to_string(l);
        auto P = [&](const std::string& n) { return model.value(p + n); };
        Dense n1 = norm_ref(cur, P(".norm1.gamma"), P(".norm1.beta"));
        Dense q = linear_ref(n1, P(".attn.q_weight"), P(".attn.q_bias"));
        Dense k = linear_ref(n1, P(".attn.k_weight"), P(".attn.k_bias"));
        Dense v = linear_ref(n1, P(".attn.v_weight"), P(".attn.v_bias"));
        Dense att = dense(cur.rows, d);
        for (std::size_t head = 0; head < h; ++head) {
            for (std::size_t r = 0; r < cur.rows; ++r) {
                std::vector<double> sc(cur.rows);
                double mx = -1e300;
                for (std::size_t t = 0; t < cur.rows; ++t) {
                    double acc = 0;
                    for (std::size_t i = 0; i < dh; ++i) acc += q.at(r, head * dh + i) * k.at(t, head * dh + i);
                    sc[t] = acc / std::sqrt(static_cast<double>(dh));
                    mx = std::max(mx, sc[t]);
                }
                double z = 0;
                for (double& e : sc) z += (e = std::exp(e - mx));
                for (std::size_t i = 0; i < dh; ++i) {
                    double acc = 0;
                    for (std::size_t t = 0; t < cur.rows; ++t) acc += sc[t] / z * v.at(t, head * dh + i);
                    att.at(r, head * dh + i) = acc;
                }
            }
        }
        Dense o = linear_ref(att, P(".attn.o_weight"), P(".attn.o_bias"));
        for (std::size_t i = 0; i < cur.v.size(); ++i) cur.v[i] += o.v[i];
        Dense n2 = norm_ref(cur, P(".norm2.gamma"), P(".norm2.beta"));
        Dense f1 = linear_ref(n2, P(".mlp.fc1_weight"), P(".mlp.fc1_bias"));
        for (double& e : f1.v) e = 0.5 * e * (1.0 + std::erf(e / std::sqrt(2.0)));
        Dense f2 = linear_ref(f1, P(".mlp.fc2_weight"), P(".mlp.fc2_bias"));
        for (std::size_t i = 0; i < cur.v.size(); ++i) cur.v[i] += f2.v[i];
        out.push_back(cur);
    }
    return out;
}

} // namespace

TEST(ArchConfig, TokenCounts) {
    ArchConfig c = ArchConfig::desk(Variant::VitCnn);
    EXPECT_EQ(c.volume_size, 16u);
    EXPECT_EQ(c.patch_size, 4u);
    EXPECT_EQ(c.tokens(), 64u);
    ArchConfig v = ArchConfig::desk(Variant::VitVit);
    EXPECT_EQ(v.tokens(), 64u);
}

TEST(ArchConfig, InvalidConfigsNameTheInvariant) {
    ArchConfig c = ArchConfig::desk(Variant::VitCnn);
    c.patch_size = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ArchConfig::desk(Variant::VitCnn);
    c.num_heads = 5;
    EXPECT_THROW(c.validate(), ConfigError);
    c = ArchConfig::desk(Variant::VitCnn);
    c.skip_layer_indices = {1, 3, 2, 4};
    EXPECT_THROW(c.validate(), ConfigError);
    c.skip_layer_indices = {0, 1, 2, 4};
    EXPECT_THROW(c.validate(), ConfigError);
    c.skip_layer_indices = {1, 2, 3, 5};
    EXPECT_THROW(Model::build(c, 1), ConfigError);
    try {
        c = ArchConfig::desk(Variant::VitCnn);
        c.volume_size = 18;
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos) << e.what();
    }
}

TEST(Model, ParameterCountMatchesClosedForm) {
    ArchConfig vv = ArchConfig::desk(Variant::VitVit);
    EXPECT_EQ(count(Model::build(vv, 1)), vitvit_count(vv));
    ArchConfig vc = ArchConfig::desk(Variant::VitCnn);
    EXPECT_EQ(count(Model::build(vc, 1)), vitcnn_desk_count(vc));
    vv.encoder_layers = 6;
    vv.decoder_layers = 3;
    vv.embed_dim = 48;
    vv.num_heads = 6;
    EXPECT_EQ(count(Model::build_meta(vv)), vitvit_count(vv));
}

TEST(Model, PathsAreUniqueAndTrainable) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        Model m = Model::build(ArchConfig::desk(v), 3);
        std::set<std::string> seen;
        for (const auto& p : m.parameters()) {
            EXPECT_TRUE(seen.insert(p.path).second) << p.path;
            EXPECT_TRUE(p.trainable);
            EXPECT_EQ(p.value.shape(), p.shape);
        }
    }
}

TEST(Model, InitializationConvention) {
    Model m = Model::build(ArchConfig::desk(Variant::VitVit), 9);
    for (const auto& p : m.parameters()) {
        auto d = p.value.data();
        if (p.role == ParamRole::Bias || p.role == ParamRole::NormShift) {
            for (double x : d) EXPECT_EQ(x, 0.0) << p.path;
        } else if (p.role == ParamRole::NormScale) {
            for (double x : d) EXPECT_EQ(x, 1.0) << p.path;
        } else {
            double sq = 0;
            for (double x : d) {
                EXPECT_LE(std::abs(x), 0.04 + 1e-12) << p.path; // truncated at 2 std
                sq += x * x;
            }
            EXPECT_NEAR(std::sqrt(sq / static_cast<double>(d.size())), 0.02, 0.006) << p.path;
        }
    }
}

TEST(Model, BuildIsDeterministicInSeed) {
    Model a = Model::build(ArchConfig::desk(Variant::VitCnn), 5);
    Model b = Model::build(ArchConfig::desk(Variant::VitCnn), 5);
    Model c = Model::build(ArchConfig::desk(Variant::VitCnn), 6);
    bool differs = false;
    for (const auto& p : a.parameters()) {
        auto x = p.value.data(), y = b.value(p.path).data(), z = c.value(p.path).data();
        EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin())) << p.path;
        if (!std::equal(x.begin(), x.end(), z.begin())) differs = true;
    }
    EXPECT_TRUE(differs);
}

TEST(Forward, ShapeFinitenessAndPurity) {
    for (auto v : {Variant::VitVit, Variant::VitCnn}) {
        Model m = Model::build(ArchConfig::desk(v), 2);
        Tensor zero = Tensor::zeros({1, 16, 16, 16});
        Tensor y = forward(m, zero);
        EXPECT_EQ(y.shape(), (Shape{1, 16, 16, 16}));
        for (double e : y.data()) ASSERT_TRUE(std::isfinite(e));
        Tensor x = random_volume(16, 4);
        Tensor y1 = forward(m, x), y2 = forward(m, x);
        EXPECT_TRUE(std::equal(y1.data().begin(), y1.data().end(), y2.data().begin()));
    }
}

TEST(Forward, WrongInputShapeIsDimensionError) {
    Model m = Model::build(ArchConfig::desk(Variant::VitCnn), 2);
    EXPECT_THROW(forward(m, Tensor::zeros({1, 8, 8, 8})), DimensionError);
    EXPECT_THROW(forward(m, Tensor::zeros({16, 16, 16})), DimensionError);
}

TEST(EncoderStates, OneStatePerLayer) {
    Model m = Model::build(ArchConfig::desk(Variant::VitCnn), 2);
    auto states = encoder_states(m, random_volume(16, 1));
    ASSERT_EQ(states.size(), 4u);
    for (const auto& s : states) EXPECT_EQ(s.shape(), (Shape{64, 32}));
}

TEST(EncoderStates, VptCarriesPromptsFromLayerTwo) {
    Model m = Model::build(ArchConfig::desk(Variant::VitCnn), 2);
    freeze_all(m);
    apply(PeftMethod::vpt(8), Selector::Encoder, m);
    auto states = encoder_states(m, random_volume(16, 1));
    ASSERT_EQ(states.size(), 4u);
    EXPECT_EQ(states[0].size(0), 64u);
    for (std::size_t i = 1; i < 4; ++i) EXPECT_EQ(states[i].size(0), 72u);
}

TEST(EncoderStates, MatchStraightLineReimplementation) {
    ArchConfig c = ArchConfig::desk(Variant::VitCnn);
    Model m = Model::build(c, 12);
    // Give biases and norms non-trivial values so they are exercised.
    Rng rng(3);
    for (const auto& p : m.parameters()) {
        if (p.role != ParamRole::Weight && p.role != ParamRole::Embedding) {
            auto d = m.mutable_value(p.path).mutable_data();
            for (double& x : d) x += rng.uniform(-0.3, 0.3);
        }
    }
    Tensor x = random_volume(16, 8);
    auto got = encoder_states(m, x);
    auto want = reference_states(m, x);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t l = 0; l < got.size(); ++l) {
        ASSERT_EQ(got[l].numel(), want[l].v.size());
        double worst = 0;
        for (std::size_t i = 0; i < want[l].v.size(); ++i) worst = std::max(worst, std::abs(got[l].data()[i] - want[l].v[i]));
        EXPECT_LT(worst, 1e-10) << "layer " << l + 1;
    }
}

TEST(Forward, CnnDecoderDependsOnEverySkip) {
    ArchConfig c = ArchConfig::desk(Variant::VitCnn);
    Model m = Model::build(c, 21);
    Tensor x = random_volume(16, 2);
    Tensor base = forward(m, x);
    for (std::size_t k : c.skip_layer_indices) {
        Tensor z = forward_with_zeroed_skip(m, x, k);
        double diff = 0;
        for (std::size_t i = 0; i < z.numel(); ++i) diff = std::max(diff, std::abs(z.data()[i] - base.data()[i]));
        EXPECT_GT(diff, 0.0) << "skip " << k;
    }
    EXPECT_THROW(forward_with_zeroed_skip(m, x, 7), ContractError);
}

TEST(Model, CloneIsIndependent) {
    Model a = Model::build(ArchConfig::desk(Variant::VitVit), 1);
    Model b = a.clone();
    b.mutable_value("decoder.head.bias").mutable_data()[0] = 3.0;
    EXPECT_EQ(a.value("decoder.head.bias").data()[0], 0.0);
}

TEST(Model, MetaModelHasShapesOnly) {
    Model m = Model::build_meta(ArchConfig::paper_like(Variant::VitCnn));
    EXPECT_TRUE(m.is_meta());
    EXPECT_FALSE(m.parameters().front().value.defined());
}

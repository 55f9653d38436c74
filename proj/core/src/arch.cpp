#include "voxpeft/arch.hpp"

#include <algorithm>

#include "voxpeft/errors.hpp"

namespace voxpeft {

std::string to_string(Variant v) { return v == Variant::VitVit ? "vitvit" : "vitcnn"; }

Variant variant_from_string(const std::string& s) {
    if (s == "vitvit" || s == "VitVit") return Variant::VitVit;
    if (s == "vitcnn" || s == "VitCnn") return Variant::VitCnn;
    throw ConfigError("unknown model variant '" + s + "' (expected vitvit or vitcnn)");
}

ArchConfig ArchConfig::desk(Variant v) {
    ArchConfig c;
    c.variant = v;
    if (v == Variant::VitVit) {
        c.peft_encoder_layers = 3;
        c.peft_decoder_layers = 2;
    }
    return c;
}

ArchConfig ArchConfig::paper_like(Variant v) {
    ArchConfig c = desk(v);
    c.volume_size = 64;
    c.patch_size = 16;
    c.embed_dim = 256;
    c.num_heads = 8;
    c.encoder_layers = 8;
    c.decoder_layers = 4;
    c.decoder_stages = 4;
    c.decoder_channels = {128, 64, 32, 16};
    c.skip_layer_indices = {2, 4, 6, 8};
    return c;
}

std::size_t ArchConfig::stack_layers(Stack s) const {
    if (s == Stack::Encoder) return encoder_layers;
    return variant == Variant::VitVit ? decoder_layers : 0;
}

std::size_t ArchConfig::peft_layer_limit(Stack s) const {
    std::size_t n = stack_layers(s);
    std::size_t limit = s == Stack::Encoder ? peft_encoder_layers : peft_decoder_layers;
    return limit == 0 ? n : std::min(limit, n);
}

void ArchConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("invalid architecture: " + what); };
    if (volume_size == 0 || patch_size == 0 || embed_dim == 0 || num_heads == 0 || mlp_ratio == 0) {
        fail("sizes must be positive");
    }
    if (volume_size % patch_size != 0) {
        fail("volume_size " + std::to_string(volume_size) + " not divisible by patch_size " +
             std::to_string(patch_size));
    }
    if (embed_dim % num_heads != 0) {
        fail("embed_dim " + std::to_string(embed_dim) + " not divisible by num_heads " +
             std::to_string(num_heads));
    }
    if (encoder_layers == 0) {
        fail("encoder_layers must be >= 1");
    }
    if (peft_encoder_layers > encoder_layers) {
        fail("peft_encoder_layers exceeds encoder_layers");
    }
    if (variant == Variant::VitVit) {
        if (decoder_layers == 0) fail("decoder_layers must be >= 1");
        if (peft_decoder_layers > decoder_layers) fail("peft_decoder_layers exceeds decoder_layers");
        return;
    }
    std::size_t expected_stages = 0;
    for (std::size_t p = patch_size; p > 1; p /= 2) {
        if (p % 2 != 0) fail("patch_size must be a power of two for the convolutional decoder");
        ++expected_stages;
    }
    if (decoder_stages != expected_stages) {
        fail("decoder_stages must equal log2(patch_size) = " + std::to_string(expected_stages));
    }
    if (decoder_channels.size() != decoder_stages) {
        fail("decoder_channels needs one entry per decoder stage");
    }
    for (std::size_t c : decoder_channels) {
        if (c == 0) fail("decoder channel counts must be positive");
    }
    if (skip_layer_indices.empty()) {
        fail("skip_layer_indices must not be empty");
    }
    for (std::size_t i = 0; i < skip_layer_indices.size(); ++i) {
        std::size_t k = skip_layer_indices[i];
        if (k < 1 || k > encoder_layers) {
            fail("skip layer " + std::to_string(k) + " outside [1, " + std::to_string(encoder_layers) + "]");
        }
        if (i > 0 && k <= skip_layer_indices[i - 1]) {
            fail("skip_layer_indices must be strictly increasing");
        }
    }
}

std::string stack_prefix(Stack s) { return s == Stack::Encoder ? "encoder" : "decoder"; }

std::string block_path(Stack s, std::size_t layer) {
    return stack_prefix(s) + ".block" + std::to_string(layer);
}

} // namespace voxpeft

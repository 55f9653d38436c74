#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace voxpeft {

enum class Variant {
    VitVit, // transformer encoder + transformer decoder (generator style)
    VitCnn, // transformer encoder + convolutional decoder with skip connections
};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

enum class Stack { Encoder, Decoder };

struct ArchConfig {
    Variant variant = Variant::VitCnn;
    std::size_t volume_size = 16;
    std::size_t patch_size = 4;
    std::size_t embed_dim = 32;
    std::size_t num_heads = 4;
    std::size_t encoder_layers = 4;
    std::size_t mlp_ratio = 4;

    // VitVit only.
    std::size_t decoder_layers = 2;

    // VitCnn only. Each stage doubles the grid, so stages == log2(patch_size).
    std::size_t decoder_stages = 2;
    std::vector<std::size_t> decoder_channels{16, 8};
    std::vector<std::size_t> skip_layer_indices{1, 2, 3, 4};

    // Adds the input volume to the decoder output.
    bool residual_output = true;

    // Additive PEFT modules are injected only into the first N layers of each
    // transformer stack; 0 means every layer.
    std::size_t peft_encoder_layers = 0;
    std::size_t peft_decoder_layers = 0;

    static ArchConfig desk(Variant v);
    // Larger shapes used for parameter accounting only.
    static ArchConfig paper_like(Variant v);

    void validate() const;

    std::size_t grid() const { return volume_size / patch_size; }
    std::size_t tokens() const { return grid() * grid() * grid(); }
    std::size_t patch_voxels() const { return patch_size * patch_size * patch_size; }
    std::size_t head_dim() const { return embed_dim / num_heads; }
    std::size_t mlp_dim() const { return embed_dim * mlp_ratio; }
    std::size_t stack_layers(Stack s) const;
    // Number of leading layers of `s` that accept injected modules.
    std::size_t peft_layer_limit(Stack s) const;

    bool operator==(const ArchConfig&) const = default;
};

std::string stack_prefix(Stack s);
std::string block_path(Stack s, std::size_t layer); // 1-based layer index

} // namespace voxpeft

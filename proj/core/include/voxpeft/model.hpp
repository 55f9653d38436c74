#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "voxpeft/arch.hpp"
#include "voxpeft/rng.hpp"
#include "voxpeft/tensor.hpp"

namespace voxpeft {

enum class ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
    Embedding,
    Injected, // created by an additive PEFT method
};

std::string to_string(ParamRole role);
ParamRole role_from_string(const std::string& s);

struct Parameter {
    std::string path;
    Shape shape;
    ParamRole role = ParamRole::Weight;
    bool trainable = true;
    Tensor value; // undefined in shape-only (meta) models
};

// Where an SSF scale/shift can be absorbed at inference time.
enum class FoldTarget {
    None,          // retained at runtime
    Linear,        // rows of a [out, in] weight and its bias
    Conv,          // output channels (axis 0) of a conv3d kernel and its bias
    ConvTranspose, // output channels (axis 1) of a transposed-conv kernel
    Norm,          // gamma/beta of the preceding normalization
};

struct LoraSite {
    std::string weight; // path of the frozen weight; factors live at weight + ".lora_a/.lora_b"
    std::size_t rank = 0;
    double alpha = 0.0;
    double scaling() const { return alpha / static_cast<double>(rank); }
};

struct AdapterSite {
    std::string prefix; // parameters live at prefix + ".down_weight" etc.
    std::size_t hidden = 0;
    bool convolutional = false;
};

struct SsfSite {
    std::string prefix; // parameters at prefix + ".gamma" / ".beta"
    FoldTarget target = FoldTarget::None;
    std::string target_weight;
    std::string target_bias;
};

struct PromptSite {
    Stack stack = Stack::Encoder;
    std::size_t layer = 2; // 1-based input layer receiving the prompts
    std::size_t count = 0;
    std::string path() const;
};

// Declarative record of injected modules; forward consults it by site path.
struct PeftState {
    std::map<std::string, LoraSite> lora;       // keyed by weight path
    std::map<std::string, AdapterSite> adapters; // keyed by prefix
    std::map<std::string, SsfSite> ssf;         // keyed by prefix
    std::vector<PromptSite> prompts;
    bool lora_merged = false;
    bool ssf_folded = false;

    bool empty() const { return lora.empty() && adapters.empty() && ssf.empty() && prompts.empty(); }
    std::size_t prompt_count(Stack s) const;
};

// Owns the parameters of one reconstruction network plus its PEFT state.
// Move-only; clone() deep-copies every tensor.
class Model {
public:
    static Model build(const ArchConfig& config, std::uint64_t seed);
    // Same parameter table with shapes only; used for parameter accounting.
    static Model build_meta(const ArchConfig& config);
    // Reassembles a model from stored parameters, e.g. a checkpoint.
    static Model restore(const ArchConfig& config, std::uint64_t seed, std::vector<Parameter> params,
                         PeftState peft);

    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    Model clone() const;

    const ArchConfig& config() const { return config_; }
    std::uint64_t seed() const { return seed_; }
    bool is_meta() const { return meta_; }

    const std::vector<Parameter>& parameters() const { return params_; }
    bool has(const std::string& path) const { return index_.count(path) != 0; }
    const Parameter& param(const std::string& path) const;
    const Tensor& value(const std::string& path) const;
    // Shares storage with the model; writes go straight into the parameter.
    Tensor mutable_value(const std::string& path);

    void set_trainable(const std::string& path, bool trainable);
    Parameter& add_parameter(const std::string& path, const Shape& shape, ParamRole role, Tensor init);
    void remove_parameter(const std::string& path);

    PeftState& peft() { return peft_; }
    const PeftState& peft() const { return peft_; }

    // Deterministic per-path generator for initializing injected parameters.
    Rng init_rng(const std::string& path) const;

private:
    Model(ArchConfig config, std::uint64_t seed, bool meta);
    void reindex();

    ArchConfig config_;
    std::uint64_t seed_ = 0;
    bool meta_ = false;
    std::vector<Parameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
    PeftState peft_;
};

// Base-model parameter table (no PEFT) in declaration order.
struct ParamSpec {
    std::string path;
    Shape shape;
    ParamRole role;
};
std::vector<ParamSpec> declare_parameters(const ArchConfig& config);

// [1, s, s, s] -> [1, s, s, s].
Tensor forward(const Model& model, const Tensor& x);

// Hidden state after every encoder layer, prompt slots included.
std::vector<Tensor> encoder_states(const Model& model, const Tensor& x);

// Decoder output with selected skip connections replaced by zeros; used to
// probe that the convolutional decoder depends on every declared skip.
Tensor forward_with_zeroed_skip(const Model& model, const Tensor& x, std::size_t skip_layer);

std::uint64_t fnv1a(const std::string& text);

} // namespace voxpeft

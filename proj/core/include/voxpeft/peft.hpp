#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "voxpeft/model.hpp"

namespace voxpeft {

enum class MethodKind { LayerNormTune, BitFit, LoRA, Adapters, SSF, VPT };

std::string to_string(MethodKind kind);
MethodKind method_kind_from_string(const std::string& s);
bool is_selective(MethodKind kind);

enum class LoraTarget { Query, Key, Value, Output };
enum class SsfSiteKind { PostNorm, PostAttention, PostMlp };

// Declarative description of one PEFT method and its hyperparameters.
struct PeftMethod {
    MethodKind kind = MethodKind::BitFit;

    std::size_t lora_rank = 4;
    double lora_alpha = 4.0;
    std::set<LoraTarget> lora_targets{LoraTarget::Query, LoraTarget::Key};

    std::size_t adapter_reduction = 8;

    std::size_t vpt_prompts = 8;
    std::size_t vpt_start_layer = 2;
    // Optional additional prompt banks, keyed by 1-based layer, for layers
    // after vpt_start_layer. Empty means prompts enter at one layer only.
    std::map<std::size_t, std::size_t> vpt_extra_prompts;

    std::set<SsfSiteKind> ssf_sites{SsfSiteKind::PostNorm, SsfSiteKind::PostAttention,
                                    SsfSiteKind::PostMlp};

    static PeftMethod layer_norm();
    static PeftMethod bitfit();
    static PeftMethod lora(std::size_t rank, double alpha = 0.0); // alpha 0 -> alpha = rank
    static PeftMethod adapters(std::size_t reduction);
    static PeftMethod ssf();
    static PeftMethod vpt(std::size_t prompts, std::size_t start_layer = 2);

    void validate() const;
    std::string label() const; // e.g. "LoRA(r=8)"

    bool operator==(const PeftMethod&) const = default;
};

enum class Selector { Encoder, Decoder, WholeModel };

// Sets trainable=false on every parameter.
void freeze_all(Model& model);

// Applies one method inside `selector`. Selective methods flip trainable flags;
// additive methods register new trainable parameters and PEFT sites. Returns
// the paths that became trainable, in model order.
std::vector<std::string> apply(const PeftMethod& method, Selector selector, Model& model);

// x·Wᵀ + (x·Aᵀ)·Bᵀ·scaling + bias, with W [out, in], A [r, in], B [out, r].
Tensor lora_forward(const Tensor& x, const Tensor& weight, const Tensor& bias, const Tensor& lora_a,
                    const Tensor& lora_b, double scaling);
// W + scaling·reshape(B·A, W.shape) for any weight viewed as [shape[0], rest].
Tensor lora_effective_weight(const Tensor& weight, const Tensor& lora_a, const Tensor& lora_b,
                             double scaling);

// y = gamma ⊙ x + beta, over the leading axis of [c, ...] inputs when
// channel_first, otherwise over the last axis.
Tensor ssf_forward(const Tensor& x, const Tensor& gamma, const Tensor& beta, bool channel_first);

Tensor insert_prompts(const Tensor& prompts, const Tensor& layer_input);
Tensor strip_prompts(const Tensor& tokens, std::size_t count);

// Folds B·A·(α/r) into every adapted weight and drops the LoRA factors.
void merge_lora(Model& model);

struct FoldReport {
    std::vector<std::string> folded;
    std::vector<std::string> retained;
};

// Absorbs every foldable SSF site into the preceding linear/conv/norm.
FoldReport fold_ssf(Model& model);

} // namespace voxpeft

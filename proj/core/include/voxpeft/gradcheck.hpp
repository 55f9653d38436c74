#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "voxpeft/tensor.hpp"

namespace voxpeft {

struct GradcheckOptions {
    double step = 1e-5;
    double tolerance = 1e-6;
    // Relative error uses max(|analytic|, |numeric|, floor) as denominator so
    // entries with vanishing gradient are judged on an absolute scale.
    double floor = 1e-4;
    // 0 checks every entry; otherwise a seeded sample of this many entries per
    // input plus one random directional derivative per input.
    std::size_t max_entries = 0;
    std::uint64_t seed = 7;
};

struct GradcheckResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

using LossFn = std::function<Tensor(const std::vector<Tensor>&)>;

double relative_error(double analytic, double numeric, double floor);

// Compares the taped gradient of `loss(inputs)` against centered finite
// differences. Inputs are used as leaves; their requires_grad flags are set.
GradcheckResult gradcheck(const std::string& name, std::vector<Tensor> inputs, const LossFn& loss,
                          const GradcheckOptions& options = {});

// One check per differentiable primitive on random inputs in [-1, 1].
std::vector<GradcheckResult> primitive_gradchecks(std::uint64_t seed = 1);

// PEFT building blocks plus one whole-model loss per variant (bare and with
// every additive method injected), on a reduced architecture with weights
// drawn from [-0.5, 0.5].
std::vector<GradcheckResult> model_gradchecks(std::uint64_t seed = 1);

// y = 3x whose backward reports -3; must fail.
GradcheckResult sign_bug_fixture();

} // namespace voxpeft

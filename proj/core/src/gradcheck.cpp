#include "voxpeft/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "voxpeft/ops.hpp"
#include "voxpeft/rng.hpp"

namespace voxpeft {

double relative_error(double analytic, double numeric, double floor) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

GradcheckResult gradcheck(const std::string& name, std::vector<Tensor> inputs, const LossFn& loss,
                          const GradcheckOptions& options) {
    for (Tensor& t : inputs) {
        t.zero_grad();
        t.set_requires_grad(true);
    }
    Tensor out = loss(inputs);
    out.backward();
    std::vector<std::vector<double>> analytic;
    for (const Tensor& t : inputs) {
        if (t.has_grad()) {
            analytic.emplace_back(t.grad().begin(), t.grad().end());
        } else {
            analytic.emplace_back(t.numel(), 0.0);
        }
    }

    auto eval = [&]() {
        NoGradGuard guard;
        return loss(inputs).item();
    };

    GradcheckResult result;
    result.name = name;
    Rng rng(options.seed);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        auto data = inputs[i].mutable_data();
        std::vector<std::size_t> entries(data.size());
        std::iota(entries.begin(), entries.end(), 0);
        if (options.max_entries != 0 && entries.size() > options.max_entries) {
            shuffle(entries, rng);
            entries.resize(options.max_entries);
        }
        for (std::size_t j : entries) {
            double saved = data[j];
            data[j] = saved + options.step;
            double plus = eval();
            data[j] = saved - options.step;
            double minus = eval();
            data[j] = saved;
            double numeric = (plus - minus) / (2.0 * options.step);
            result.max_rel_error =
                std::max(result.max_rel_error, relative_error(analytic[i][j], numeric, options.floor));
            ++result.checked;
        }
        if (options.max_entries != 0) {
            std::vector<double> saved(data.begin(), data.end());
            std::vector<double> dir(data.size());
            for (double& v : dir) v = rng.uniform(-1.0, 1.0);
            double directional = 0.0;
            for (std::size_t j = 0; j < dir.size(); ++j) directional += analytic[i][j] * dir[j];
            for (std::size_t j = 0; j < dir.size(); ++j) data[j] = saved[j] + options.step * dir[j];
            double plus = eval();
            for (std::size_t j = 0; j < dir.size(); ++j) data[j] = saved[j] - options.step * dir[j];
            double minus = eval();
            std::copy(saved.begin(), saved.end(), data.begin());
            double numeric = (plus - minus) / (2.0 * options.step);
            result.max_rel_error =
                std::max(result.max_rel_error, relative_error(directional, numeric, options.floor));
            ++result.checked;
        }
    }
    for (Tensor& t : inputs) {
        t.zero_grad();
    }
    result.passed = result.max_rel_error < options.tolerance;
    return result;
}

namespace {

// Reduces an arbitrary-shape output with fixed random weights so every output
// entry contributes a distinct gradient.
Tensor weighted_sum(const Tensor& out, std::uint64_t seed) {
    Rng rng(seed);
    return sum(mul(out, uniform_tensor(out.shape(), rng)));
}

} // namespace

std::vector<GradcheckResult> primitive_gradchecks(std::uint64_t seed) {
    Rng rng(seed);
    auto u = [&](const Shape& s) { return uniform_tensor(s, rng); };
    std::vector<GradcheckResult> results;
    auto run = [&](const std::string& name, std::vector<Tensor> inputs, auto fn) {
        std::uint64_t wseed = rng.next_u64();
        results.push_back(gradcheck(name, std::move(inputs), [fn, wseed](const std::vector<Tensor>& in) {
            return weighted_sum(fn(in), wseed);
        }));
    };

    run("add(broadcast)", {u({3, 4}), u({4})}, [](const auto& in) { return add(in[0], in[1]); });
    run("sub(broadcast)", {u({2, 1, 3}), u({4, 1})}, [](const auto& in) { return sub(in[0], in[1]); });
    run("mul(broadcast)", {u({2, 3, 4}), u({3, 1})}, [](const auto& in) { return mul(in[0], in[1]); });
    run("scale", {u({5})}, [](const auto& in) { return scale(in[0], -1.7); });
    run("add_scalar", {u({5})}, [](const auto& in) { return add_scalar(in[0], 0.3); });
    run("matmul", {u({3, 4}), u({4, 2})}, [](const auto& in) { return matmul(in[0], in[1]); });
    run("matmul(batched)", {u({2, 3, 4}), u({4, 2})}, [](const auto& in) { return matmul(in[0], in[1]); });
    run("linear", {u({2, 3, 4}), u({5, 4}), u({5})},
        [](const auto& in) { return linear(in[0], in[1], in[2]); });
    run("reshape", {u({2, 6})}, [](const auto& in) { return reshape(in[0], {3, 4}); });
    run("permute", {u({2, 3, 4})}, [](const auto& in) { return permute(in[0], {2, 0, 1}); });
    run("concat", {u({2, 3}), u({2, 2})}, [](const auto& in) { return concat({in[0], in[1]}, 1); });
    run("slice", {u({4, 3})}, [](const auto& in) { return slice(in[0], 0, 1, 3); });
    run("softmax", {u({3, 5})}, [](const auto& in) { return softmax(in[0]); });
    run("gelu", {u({7})}, [](const auto& in) { return gelu(in[0]); });
    run("layer_norm", {u({2, 5}), u({5}), u({5})},
        [](const auto& in) { return layer_norm(in[0], in[1], in[2]); });
    run("channel_norm", {u({3, 2, 2, 2}), u({3}), u({3})},
        [](const auto& in) { return channel_norm(in[0], in[1], in[2]); });
    run("conv3d", {u({2, 4, 4, 4}), u({3, 2, 3, 3, 3}), u({3})},
        [](const auto& in) { return conv3d(in[0], in[1], in[2], 1, 1); });
    run("conv3d(stride2)", {u({2, 5, 5, 5}), u({2, 2, 3, 3, 3}), u({2})},
        [](const auto& in) { return conv3d(in[0], in[1], in[2], 2, 1); });
    run("conv_transpose3d", {u({3, 2, 2, 2}), u({3, 2, 2, 2, 2}), u({2})},
        [](const auto& in) { return conv_transpose3d(in[0], in[1], in[2], 2, 0); });
    run("conv_transpose3d(pad)", {u({2, 3, 3, 3}), u({2, 2, 3, 3, 3}), u({2})},
        [](const auto& in) { return conv_transpose3d(in[0], in[1], in[2], 2, 1); });
    run("sum", {u({4})}, [](const auto& in) { return sum(in[0]); });
    run("mean", {u({4})}, [](const auto& in) { return mean(in[0]); });
    run("mse_loss", {u({2, 3}), u({2, 3})}, [](const auto& in) { return mse_loss(in[0], in[1]); });
    return results;
}

GradcheckResult sign_bug_fixture() {
    auto bad = [](const Tensor& x) {
        std::vector<double> out(x.data().begin(), x.data().end());
        for (double& v : out) v *= 3.0;
        return make_result(x.shape(), std::move(out), {x}, "bad_scale", [](Backprop& bp) {
            auto g = bp.grad_out();
            auto gx = bp.grad_in(0);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] -= 3.0 * g[i];
        });
    };
    Rng rng(1);
    return gradcheck("sign_bug_fixture", {uniform_tensor({4}, rng)},
                     [&](const std::vector<Tensor>& in) { return sum(bad(in[0])); });
}

} // namespace voxpeft

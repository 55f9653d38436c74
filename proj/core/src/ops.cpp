#include "voxpeft/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>

#include "voxpeft/parallel.hpp"

namespace voxpeft {

namespace {

using Index = std::vector<std::size_t>;

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                                 shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// For every flat index of `out`, the flat index into `in` under broadcasting.
std::shared_ptr<Index> broadcast_map(const Shape& out, const Shape& in) {
    auto map = std::make_shared<Index>(shape_numel(out));
    std::size_t rank = out.size();
    std::size_t offset = rank - in.size();
    Index in_stride(rank, 0);
    std::size_t stride = 1;
    for (std::size_t i = rank; i-- > offset;) {
        std::size_t d = in[i - offset];
        in_stride[i] = d == 1 ? 0 : stride;
        stride *= d;
    }
    Index counter(rank, 0);
    std::size_t pos = 0;
    for (std::size_t flat = 0; flat < map->size(); ++flat) {
        (*map)[flat] = pos;
        for (std::size_t axis = rank; axis-- > 0;) {
            ++counter[axis];
            pos += in_stride[axis];
            if (counter[axis] < out[axis]) {
                break;
            }
            pos -= in_stride[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    return map;
}

enum class Binary { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, Binary kind, const char* name) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
    std::size_t n = shape_numel(out_shape);
    std::vector<double> out(n);
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::shared_ptr<Index> amap;
    std::shared_ptr<Index> bmap;
    if (a.shape() != out_shape) {
        amap = broadcast_map(out_shape, a.shape());
    }
    if (b.shape() != out_shape) {
        bmap = broadcast_map(out_shape, b.shape());
    }
    auto ai = [&](std::size_t i) { return amap ? (*amap)[i] : i; };
    auto bi = [&](std::size_t i) { return bmap ? (*bmap)[i] : i; };
    switch (kind) {
    case Binary::Add:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[ai(i)] + bd[bi(i)];
        break;
    case Binary::Sub:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[ai(i)] - bd[bi(i)];
        break;
    case Binary::Mul:
        for (std::size_t i = 0; i < n; ++i) out[i] = ad[ai(i)] * bd[bi(i)];
        break;
    }
    return make_result(out_shape, std::move(out), {a, b}, name, [kind, amap, bmap](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        auto gb = bp.grad_in(1);
        const auto& ad = bp.in(0).data;
        const auto& bd = bp.in(1).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            std::size_t ia = amap ? (*amap)[i] : i;
            std::size_t ib = bmap ? (*bmap)[i] : i;
            switch (kind) {
            case Binary::Add:
                if (!ga.empty()) ga[ia] += g[i];
                if (!gb.empty()) gb[ib] += g[i];
                break;
            case Binary::Sub:
                if (!ga.empty()) ga[ia] += g[i];
                if (!gb.empty()) gb[ib] -= g[i];
                break;
            case Binary::Mul:
                if (!ga.empty()) ga[ia] += g[i] * bd[ib];
                if (!gb.empty()) gb[ib] += g[i] * ad[ia];
                break;
            }
        }
    });
}

std::size_t normalize_axis(std::size_t axis, std::size_t rank, const char* op) {
    if (axis >= rank) {
        throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                             " out of range for rank " + std::to_string(rank));
    }
    return axis;
}

// Row-wise normalization shared by layer_norm and channel_norm. Returns
// normalized values and per-row reciprocal standard deviations.
void normalize_rows(std::span<const double> x, std::size_t rows, std::size_t cols, double eps,
                    std::vector<double>& xhat, std::vector<double>& rstd) {
    xhat.resize(rows * cols);
    rstd.resize(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = x.data() + r * cols;
        double mu = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mu += row[c];
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<double>(cols);
        double rs = 1.0 / std::sqrt(var + eps);
        rstd[r] = rs;
        for (std::size_t c = 0; c < cols; ++c) xhat[r * cols + c] = (row[c] - mu) * rs;
    }
}

// dx for y = xhat (before affine) given upstream dxhat, per row.
void normalize_rows_backward(std::span<const double> dxhat, std::span<const double> xhat,
                             std::span<const double> rstd, std::size_t rows, std::size_t cols,
                             std::span<double> dx) {
    double inv = 1.0 / static_cast<double>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* dh = dxhat.data() + r * cols;
        const double* xh = xhat.data() + r * cols;
        double mean_dh = 0.0;
        double mean_dhx = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            mean_dh += dh[c];
            mean_dhx += dh[c] * xh[c];
        }
        mean_dh *= inv;
        mean_dhx *= inv;
        for (std::size_t c = 0; c < cols; ++c) {
            dx[r * cols + c] += rstd[r] * (dh[c] - mean_dh - xh[c] * mean_dhx);
        }
    }
}

struct Conv3dGeom {
    std::size_t c_in, d, h, w;
    std::size_t c_out, kd, kh, kw;
    std::size_t od, oh, ow;
    std::size_t stride, pad;
};

// Inclusive-exclusive range of output positions `o` with o*stride + k - pad
// inside [0, extent).
std::pair<std::size_t, std::size_t> valid_range(std::size_t k, std::size_t pad, std::size_t stride,
                                                std::size_t extent, std::size_t out_extent) {
    long lo_num = static_cast<long>(pad) - static_cast<long>(k);
    long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(stride) - 1) / static_cast<long>(stride);
    long hi_num = static_cast<long>(extent) - 1 + static_cast<long>(pad) - static_cast<long>(k);
    long hi = hi_num < 0 ? -1 : hi_num / static_cast<long>(stride);
    hi = std::min<long>(hi, static_cast<long>(out_extent) - 1);
    if (hi < lo) {
        return {0, 0};
    }
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi) + 1};
}

void check_bias(const Tensor& bias, std::size_t channels, const char* op) {
    if (bias.defined() && (bias.dim() != 1 || bias.size(0) != channels)) {
        throw DimensionError(std::string(op) + ": bias shape " + shape_str(bias.shape()) +
                             " does not match " + std::to_string(channels) + " channels");
    }
}

} // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Mul, "mul"); }

Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v *= factor;
    return make_result(a.shape(), std::move(out), {a}, "scale", [factor](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
}

Tensor add_scalar(const Tensor& a, double value) {
    std::vector<double> out(a.data().begin(), a.data().end());
    for (double& v : out) v += value;
    return make_result(a.shape(), std::move(out), {a}, "add_scalar", [](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.dim() < 2 || b.dim() < 2) {
        throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    std::size_t m = a.shape()[a.dim() - 2];
    std::size_t k = a.shape()[a.dim() - 1];
    std::size_t kb = b.shape()[b.dim() - 2];
    std::size_t n = b.shape()[b.dim() - 1];
    if (k != kb) {
        throw DimensionError("matmul inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Shape a_batch(a.shape().begin(), a.shape().end() - 2);
    Shape b_batch(b.shape().begin(), b.shape().end() - 2);
    Shape batch;
    try {
        batch = broadcast_shape(a_batch, b_batch, "matmul");
    } catch (const DimensionError&) {
        throw DimensionError("matmul batch dimensions disagree: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    auto amap = broadcast_map(batch, a_batch.empty() ? Shape{1} : a_batch);
    auto bmap = broadcast_map(batch, b_batch.empty() ? Shape{1} : b_batch);
    if (batch.empty()) {
        amap = std::make_shared<Index>(1, 0);
        bmap = std::make_shared<Index>(1, 0);
    }
    std::size_t nb = shape_numel(batch);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<double> out(nb * m * n, 0.0);
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    for (std::size_t bi = 0; bi < nb; ++bi) {
        const double* A = ad + (*amap)[bi] * m * k;
        const double* B = bd + (*bmap)[bi] * k * n;
        double* C = out.data() + bi * m * n;
        for (std::size_t i = 0; i < m; ++i) {
            double* crow = C + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                double av = A[i * k + p];
                const double* brow = B + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }
    return make_result(out_shape, std::move(out), {a, b}, "matmul", [=](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        auto gb = bp.grad_in(1);
        const double* ad = bp.in(0).data.data();
        const double* bd = bp.in(1).data.data();
        for (std::size_t bi = 0; bi < nb; ++bi) {
            const double* G = g.data() + bi * m * n;
            const double* A = ad + (*amap)[bi] * m * k;
            const double* B = bd + (*bmap)[bi] * k * n;
            if (!ga.empty()) {
                double* GA = ga.data() + (*amap)[bi] * m * k;
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* brow = B + p * n;
                        const double* grow = G + i * n;
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                        GA[i * k + p] += acc;
                    }
                }
            }
            if (!gb.empty()) {
                double* GB = gb.data() + (*bmap)[bi] * k * n;
                for (std::size_t i = 0; i < m; ++i) {
                    const double* grow = G + i * n;
                    for (std::size_t p = 0; p < k; ++p) {
                        double av = A[i * k + p];
                        double* gbrow = GB + p * n;
                        for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
                    }
                }
            }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    if (weight.dim() != 2 || x.dim() < 1 || x.shape().back() != weight.size(1)) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    std::size_t in = weight.size(1);
    std::size_t outc = weight.size(0);
    check_bias(bias, outc, "linear");
    std::size_t rows = x.numel() / in;
    Shape out_shape = x.shape();
    out_shape.back() = outc;
    std::vector<double> out(rows * outc);
    const double* xd = x.data().data();
    const double* wd = weight.data().data();
    const double* bd = bias.defined() ? bias.data().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xd + r * in;
        for (std::size_t o = 0; o < outc; ++o) {
            const double* wr = wd + o * in;
            double acc = 0.0;
            for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
            out[r * outc + o] = acc + (bd ? bd[o] : 0.0);
        }
    }
    std::vector<Tensor> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    bool has_bias = bias.defined();
    return make_result(out_shape, std::move(out), inputs, "linear", [=](Backprop& bp) {
        auto g = bp.grad_out();
        auto gx = bp.grad_in(0);
        auto gw = bp.grad_in(1);
        std::span<double> gbias = has_bias ? bp.grad_in(2) : std::span<double>{};
        const double* xd = bp.in(0).data.data();
        const double* wd = bp.in(1).data.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.data() + r * outc;
            const double* xr = xd + r * in;
            for (std::size_t o = 0; o < outc; ++o) {
                double go = gr[o];
                if (!gx.empty()) {
                    double* gxr = gx.data() + r * in;
                    const double* wr = wd + o * in;
                    for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wr[i];
                }
                if (!gw.empty()) {
                    double* gwr = gw.data() + o * in;
                    for (std::size_t i = 0; i < in; ++i) gwr[i] += go * xr[i];
                }
                if (!gbias.empty()) gbias[o] += go;
            }
        }
    });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(shape, std::move(out), {a}, "reshape", [](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& order) {
    std::size_t rank = a.dim();
    if (order.size() != rank) {
        throw DimensionError("permute: order rank does not match " + shape_str(a.shape()));
    }
    std::vector<bool> seen(rank, false);
    for (std::size_t o : order) {
        if (o >= rank || seen[o]) {
            throw DimensionError("permute: invalid axis order for " + shape_str(a.shape()));
        }
        seen[o] = true;
    }
    const Shape& in_shape = a.shape();
    Index in_stride(rank);
    std::size_t stride = 1;
    for (std::size_t i = rank; i-- > 0;) {
        in_stride[i] = stride;
        stride *= in_shape[i];
    }
    Shape out_shape(rank);
    Index src_stride(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = in_shape[order[i]];
        src_stride[i] = in_stride[order[i]];
    }
    auto map = std::make_shared<Index>(a.numel());
    Index counter(rank, 0);
    std::size_t pos = 0;
    for (std::size_t flat = 0; flat < map->size(); ++flat) {
        (*map)[flat] = pos;
        for (std::size_t axis = rank; axis-- > 0;) {
            ++counter[axis];
            pos += src_stride[axis];
            if (counter[axis] < out_shape[axis]) break;
            pos -= src_stride[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    std::vector<double> out(a.numel());
    const auto& ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[(*map)[i]];
    return make_result(out_shape, std::move(out), {a}, "permute", [map](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) ga[(*map)[i]] += g[i];
    });
}

Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1) {
    normalize_axis(axis0, a.dim(), "transpose");
    normalize_axis(axis1, a.dim(), "transpose");
    std::vector<std::size_t> order(a.dim());
    std::iota(order.begin(), order.end(), 0);
    std::swap(order[axis0], order[axis1]);
    return permute(a, order);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) {
        throw DimensionError("concat of zero tensors");
    }
    const Shape& ref = parts.front().shape();
    normalize_axis(axis, ref.size(), "concat");
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const Tensor& t : parts) {
        const Shape& s = t.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) {
            ok = i == axis || s[i] == ref[i];
        }
        if (!ok) {
            throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(ref) +
                                 " along axis " + std::to_string(axis));
        }
        out_shape[axis] += s[axis];
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    std::vector<std::size_t> widths;
    for (const Tensor& t : parts) widths.push_back(t.shape()[axis] * inner);
    std::size_t row = out_shape[axis] * inner;
    std::vector<double> out(outer * row);
    std::size_t col = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const double* src = parts[p].data().data();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(src + o * widths[p], widths[p], out.data() + o * row + col);
        }
        col += widths[p];
    }
    return make_result(out_shape, std::move(out), parts, "concat", [=](Backprop& bp) {
        auto g = bp.grad_out();
        std::size_t col = 0;
        for (std::size_t p = 0; p < widths.size(); ++p) {
            auto gp = bp.grad_in(p);
            if (!gp.empty()) {
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t i = 0; i < widths[p]; ++i) {
                        gp[o * widths[p] + i] += g[o * row + col + i];
                    }
                }
            }
            col += widths[p];
        }
    });
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    normalize_axis(axis, a.dim(), "slice");
    const Shape& s = a.shape();
    if (begin >= end || end > s[axis]) {
        throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) +
                             ") out of range for axis " + std::to_string(axis) + " of " + shape_str(s));
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    std::size_t inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::size_t row = s[axis] * inner;
    std::size_t width = (end - begin) * inner;
    std::size_t off = begin * inner;
    Shape out_shape = s;
    out_shape[axis] = end - begin;
    std::vector<double> out(outer * width);
    const double* src = a.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::copy_n(src + o * row + off, width, out.data() + o * width);
    }
    return make_result(out_shape, std::move(out), {a}, "slice", [=](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < width; ++i) ga[o * row + off + i] += g[o * width + i];
        }
    });
}

Tensor softmax(const Tensor& a) {
    std::size_t cols = a.shape().back();
    std::size_t rows = a.numel() / cols;
    std::vector<double> out(a.numel());
    const double* x = a.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x + r * cols;
        double* yr = out.data() + r * cols;
        double mx = *std::max_element(xr, xr + cols);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            yr[c] = std::exp(xr[c] - mx);
            total += yr[c];
        }
        for (std::size_t c = 0; c < cols; ++c) yr[c] /= total;
    }
    return make_result(a.shape(), std::move(out), {a}, "softmax", [rows, cols](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        const double* y = bp.out().data.data();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* yr = y + r * cols;
            const double* gr = g.data() + r * cols;
            double dot = 0.0;
            for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * yr[c];
            for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] += yr[c] * (gr[c] - dot);
        }
    });
}

Tensor gelu(const Tensor& a) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    std::vector<double> out(a.numel());
    const auto& x = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * kInvSqrt2));
    return make_result(a.shape(), std::move(out), {a}, "gelu", [](Backprop& bp) {
        auto g = bp.grad_out();
        auto ga = bp.grad_in(0);
        const auto& x = bp.in(0).data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x[i] * x[i]);
            ga[i] += g[i] * (cdf + x[i] * pdf);
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    std::size_t cols = x.shape().back();
    if (gamma.numel() != cols || beta.numel() != cols) {
        throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                             shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
    }
    std::size_t rows = x.numel() / cols;
    auto xhat = std::make_shared<std::vector<double>>();
    auto rstd = std::make_shared<std::vector<double>>();
    normalize_rows(x.data(), rows, cols, eps, *xhat, *rstd);
    std::vector<double> out(x.numel());
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = gd[c] * (*xhat)[r * cols + c] + bd[c];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm", [=](Backprop& bp) {
        auto g = bp.grad_out();
        auto gx = bp.grad_in(0);
        auto gg = bp.grad_in(1);
        auto gb = bp.grad_in(2);
        const auto& gd = bp.in(1).data;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                std::size_t i = r * cols + c;
                if (!gg.empty()) gg[c] += g[i] * (*xhat)[i];
                if (!gb.empty()) gb[c] += g[i];
            }
        }
        if (!gx.empty()) {
            std::vector<double> dxhat(g.size());
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) dxhat[r * cols + c] = g[r * cols + c] * gd[c];
            }
            normalize_rows_backward(dxhat, *xhat, *rstd, rows, cols, gx);
        }
    });
}

Tensor channel_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (x.dim() < 2) {
        throw DimensionError("channel_norm needs [c, ...] input, got " + shape_str(x.shape()));
    }
    std::size_t rows = x.size(0);
    std::size_t cols = x.numel() / rows;
    if (gamma.numel() != rows || beta.numel() != rows) {
        throw DimensionError("channel_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
                             shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
    }
    auto xhat = std::make_shared<std::vector<double>>();
    auto rstd = std::make_shared<std::vector<double>>();
    normalize_rows(x.data(), rows, cols, eps, *xhat, *rstd);
    std::vector<double> out(x.numel());
    const auto& gd = gamma.data();
    const auto& bd = beta.data();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out[r * cols + c] = gd[r] * (*xhat)[r * cols + c] + bd[r];
        }
    }
    return make_result(x.shape(), std::move(out), {x, gamma, beta}, "channel_norm", [=](Backprop& bp) {
        auto g = bp.grad_out();
        auto gx = bp.grad_in(0);
        auto gg = bp.grad_in(1);
        auto gb = bp.grad_in(2);
        const auto& gd = bp.in(1).data;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                std::size_t i = r * cols + c;
                if (!gg.empty()) gg[r] += g[i] * (*xhat)[i];
                if (!gb.empty()) gb[r] += g[i];
            }
        }
        if (!gx.empty()) {
            std::vector<double> dxhat(g.size());
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) dxhat[r * cols + c] = g[r * cols + c] * gd[r];
            }
            normalize_rows_backward(dxhat, *xhat, *rstd, rows, cols, gx);
        }
    });
}

Tensor conv3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
              std::size_t pad) {
    if (x.dim() != 4 || kernel.dim() != 5 || kernel.size(1) != x.size(0)) {
        throw DimensionError("conv3d: input " + shape_str(x.shape()) + " does not match kernel " +
                             shape_str(kernel.shape()));
    }
    if (stride == 0) {
        throw DimensionError("conv3d: stride must be positive");
    }
    Conv3dGeom q{x.size(0), x.size(1), x.size(2), x.size(3), kernel.size(0), kernel.size(2),
                 kernel.size(3), kernel.size(4), 0, 0, 0, stride, pad};
    if (q.kd > q.d + 2 * pad || q.kh > q.h + 2 * pad || q.kw > q.w + 2 * pad) {
        throw DimensionError("conv3d: kernel " + shape_str(kernel.shape()) +
                             " larger than padded input " + shape_str(x.shape()) + " (pad " +
                             std::to_string(pad) + ")");
    }
    check_bias(bias, q.c_out, "conv3d");
    q.od = (q.d + 2 * pad - q.kd) / stride + 1;
    q.oh = (q.h + 2 * pad - q.kh) / stride + 1;
    q.ow = (q.w + 2 * pad - q.kw) / stride + 1;
    std::size_t in_vol = q.d * q.h * q.w;
    std::size_t out_vol = q.od * q.oh * q.ow;
    std::size_t ksz = q.kd * q.kh * q.kw;
    std::vector<double> out(q.c_out * out_vol, 0.0);
    const double* xd = x.data().data();
    const double* kd_ = kernel.data().data();
    const double* bd = bias.defined() ? bias.data().data() : nullptr;
    std::size_t work = q.c_out * q.c_in * ksz * out_vol;

    // Visits every output row segment touched by kernel tap (a, b, c);
    // fn(out_start, in_start, count) with the input advancing by `stride`.
    auto for_rows = [q](std::size_t a, std::size_t b, std::size_t c, auto&& fn) {
        auto [od_lo, od_hi] = valid_range(a, q.pad, q.stride, q.d, q.od);
        auto [oh_lo, oh_hi] = valid_range(b, q.pad, q.stride, q.h, q.oh);
        auto [ow_lo, ow_hi] = valid_range(c, q.pad, q.stride, q.w, q.ow);
        if (ow_lo >= ow_hi) return;
        for (std::size_t od = od_lo; od < od_hi; ++od) {
            std::size_t id = od * q.stride + a - q.pad;
            for (std::size_t oh = oh_lo; oh < oh_hi; ++oh) {
                std::size_t ih = oh * q.stride + b - q.pad;
                std::size_t out_start = (od * q.oh + oh) * q.ow + ow_lo;
                std::size_t in_start = (id * q.h + ih) * q.w + ow_lo * q.stride + c - q.pad;
                fn(out_start, in_start, ow_hi - ow_lo);
            }
        }
    };

    parallel_for(q.c_out, work, [&](std::size_t oc) {
        double* o = out.data() + oc * out_vol;
        if (bd) std::fill(o, o + out_vol, bd[oc]);
        for (std::size_t ic = 0; ic < q.c_in; ++ic) {
            const double* xi = xd + ic * in_vol;
            const double* kk = kd_ + (oc * q.c_in + ic) * ksz;
            for (std::size_t a = 0; a < q.kd; ++a)
                for (std::size_t b = 0; b < q.kh; ++b)
                    for (std::size_t c = 0; c < q.kw; ++c) {
                        double kv = kk[(a * q.kh + b) * q.kw + c];
                        for_rows(a, b, c, [&](std::size_t ostart, std::size_t istart, std::size_t count) {
                            double* op = o + ostart;
                            const double* ip = xi + istart;
                            if (q.stride == 1) {
                                for (std::size_t w = 0; w < count; ++w) op[w] += kv * ip[w];
                            } else {
                                for (std::size_t w = 0; w < count; ++w) op[w] += kv * ip[w * q.stride];
                            }
                        });
                    }
        }
    });

    std::vector<Tensor> inputs{x, kernel};
    if (bias.defined()) inputs.push_back(bias);
    bool has_bias = bias.defined();
    Shape out_shape{q.c_out, q.od, q.oh, q.ow};
    return make_result(out_shape, std::move(out), inputs, "conv3d", [=](Backprop& bp) {
        auto g = bp.grad_out();
        auto gx = bp.grad_in(0);
        auto gk = bp.grad_in(1);
        std::span<double> gb = has_bias ? bp.grad_in(2) : std::span<double>{};
        const double* xd = bp.in(0).data.data();
        const double* kdat = bp.in(1).data.data();
        if (!gb.empty()) {
            for (std::size_t oc = 0; oc < q.c_out; ++oc) {
                double acc = 0.0;
                for (std::size_t i = 0; i < out_vol; ++i) acc += g[oc * out_vol + i];
                gb[oc] += acc;
            }
        }
        if (!gx.empty()) {
            parallel_for(q.c_in, work, [&](std::size_t ic) {
                double* gxi = gx.data() + ic * in_vol;
                for (std::size_t oc = 0; oc < q.c_out; ++oc) {
                    const double* go = g.data() + oc * out_vol;
                    const double* kk = kdat + (oc * q.c_in + ic) * ksz;
                    for (std::size_t a = 0; a < q.kd; ++a)
                        for (std::size_t b = 0; b < q.kh; ++b)
                            for (std::size_t c = 0; c < q.kw; ++c) {
                                double kv = kk[(a * q.kh + b) * q.kw + c];
                                for_rows(a, b, c, [&](std::size_t ostart, std::size_t istart, std::size_t count) {
                                    const double* gp = go + ostart;
                                    double* xp = gxi + istart;
                                    if (q.stride == 1) {
                                        for (std::size_t w = 0; w < count; ++w) xp[w] += kv * gp[w];
                                    } else {
                                        for (std::size_t w = 0; w < count; ++w) xp[w * q.stride] += kv * gp[w];
                                    }
                                });
                            }
                }
            });
        }
        if (!gk.empty()) {
            parallel_for(q.c_out, work, [&](std::size_t oc) {
                const double* go = g.data() + oc * out_vol;
                for (std::size_t ic = 0; ic < q.c_in; ++ic) {
                    const double* xi = xd + ic * in_vol;
                    double* gkk = gk.data() + (oc * q.c_in + ic) * ksz;
                    for (std::size_t a = 0; a < q.kd; ++a)
                        for (std::size_t b = 0; b < q.kh; ++b)
                            for (std::size_t c = 0; c < q.kw; ++c) {
                                double acc = 0.0;
                                for_rows(a, b, c, [&](std::size_t ostart, std::size_t istart, std::size_t count) {
                                    const double* gp = go + ostart;
                                    const double* ip = xi + istart;
                                    if (q.stride == 1) {
                                        for (std::size_t w = 0; w < count; ++w) acc += gp[w] * ip[w];
                                    } else {
                                        for (std::size_t w = 0; w < count; ++w) acc += gp[w] * ip[w * q.stride];
                                    }
                                });
                                gkk[(a * q.kh + b) * q.kw + c] += acc;
                            }
                }
            });
        }
    });
}

Tensor conv_transpose3d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride,
                        std::size_t pad) {
    if (x.dim() != 4 || kernel.dim() != 5 || kernel.size(0) != x.size(0)) {
        throw DimensionError("conv_transpose3d: input " + shape_str(x.shape()) +
                             " does not match kernel " + shape_str(kernel.shape()));
    }
    if (stride == 0) {
        throw DimensionError("conv_transpose3d: stride must be positive");
    }
    std::size_t c_in = x.size(0), d = x.size(1), h = x.size(2), w = x.size(3);
    std::size_t c_out = kernel.size(1), kd = kernel.size(2), kh = kernel.size(3), kw = kernel.size(4);
    auto out_extent = [&](std::size_t s, std::size_t k) -> std::size_t {
        long e = static_cast<long>((s - 1) * stride + k) - 2 * static_cast<long>(pad);
        if (e <= 0) {
            throw DimensionError("conv_transpose3d: padding " + std::to_string(pad) +
                                 " leaves no output for input " + shape_str(x.shape()));
        }
        return static_cast<std::size_t>(e);
    };
    std::size_t od = out_extent(d, kd), oh = out_extent(h, kh), ow = out_extent(w, kw);
    check_bias(bias, c_out, "conv_transpose3d");
    std::size_t in_vol = d * h * w;
    std::size_t out_vol = od * oh * ow;
    std::size_t ksz = kd * kh * kw;
    std::size_t work = c_in * c_out * ksz * in_vol;

    // Input voxel i maps to output i*stride + k - pad; iterate input rows whose
    // image lands inside the output.
    auto for_rows = [=](std::size_t a, std::size_t b, std::size_t c, auto&& fn) {
        auto in_range = [&](std::size_t k, std::size_t in_ext, std::size_t out_ext) {
            // need 0 <= i*stride + k - pad < out_ext
            long lo_num = static_cast<long>(pad) - static_cast<long>(k);
            long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(stride) - 1) / static_cast<long>(stride);
            long hi_num = static_cast<long>(out_ext) - 1 + static_cast<long>(pad) - static_cast<long>(k);
            long hi = hi_num < 0 ? -1 : hi_num / static_cast<long>(stride);
            hi = std::min<long>(hi, static_cast<long>(in_ext) - 1);
            return hi < lo ? std::pair<std::size_t, std::size_t>{0, 0}
                           : std::pair<std::size_t, std::size_t>{static_cast<std::size_t>(lo),
                                                                 static_cast<std::size_t>(hi) + 1};
        };
        auto [d_lo, d_hi] = in_range(a, d, od);
        auto [h_lo, h_hi] = in_range(b, h, oh);
        auto [w_lo, w_hi] = in_range(c, w, ow);
        if (w_lo >= w_hi) return;
        for (std::size_t i = d_lo; i < d_hi; ++i) {
            std::size_t o_d = i * stride + a - pad;
            for (std::size_t j = h_lo; j < h_hi; ++j) {
                std::size_t o_h = j * stride + b - pad;
                std::size_t in_start = (i * h + j) * w + w_lo;
                std::size_t out_start = (o_d * oh + o_h) * ow + w_lo * stride + c - pad;
                fn(in_start, out_start, w_hi - w_lo);
            }
        }
    };

    std::vector<double> out(c_out * out_vol, 0.0);
    const double* xd = x.data().data();
    const double* kdat = kernel.data().data();
    const double* bd = bias.defined() ? bias.data().data() : nullptr;
    parallel_for(c_out, work, [&](std::size_t oc) {
        double* o = out.data() + oc * out_vol;
        if (bd) std::fill(o, o + out_vol, bd[oc]);
        for (std::size_t ic = 0; ic < c_in; ++ic) {
            const double* xi = xd + ic * in_vol;
            const double* kk = kdat + (ic * c_out + oc) * ksz;
            for (std::size_t a = 0; a < kd; ++a)
                for (std::size_t b = 0; b < kh; ++b)
                    for (std::size_t c = 0; c < kw; ++c) {
                        double kv = kk[(a * kh + b) * kw + c];
                        for_rows(a, b, c, [&](std::size_t istart, std::size_t ostart, std::size_t count) {
                            const double* ip = xi + istart;
                            double* op = o + ostart;
                            for (std::size_t v = 0; v < count; ++v) op[v * stride] += kv * ip[v];
                        });
                    }
        }
    });

    std::vector<Tensor> inputs{x, kernel};
    if (bias.defined()) inputs.push_back(bias);
    bool has_bias = bias.defined();
    Shape out_shape{c_out, od, oh, ow};
    return make_result(out_shape, std::move(out), inputs, "conv_transpose3d", [=](Backprop& bp) {
        auto g = bp.grad_out();
        auto gx = bp.grad_in(0);
        auto gk = bp.grad_in(1);
        std::span<double> gb = has_bias ? bp.grad_in(2) : std::span<double>{};
        const double* xd = bp.in(0).data.data();
        const double* kdat = bp.in(1).data.data();
        if (!gb.empty()) {
            for (std::size_t oc = 0; oc < c_out; ++oc) {
                double acc = 0.0;
                for (std::size_t i = 0; i < out_vol; ++i) acc += g[oc * out_vol + i];
                gb[oc] += acc;
            }
        }
        if (!gx.empty()) {
            parallel_for(c_in, work, [&](std::size_t ic) {
                double* gxi = gx.data() + ic * in_vol;
                for (std::size_t oc = 0; oc < c_out; ++oc) {
                    const double* go = g.data() + oc * out_vol;
                    const double* kk = kdat + (ic * c_out + oc) * ksz;
                    for (std::size_t a = 0; a < kd; ++a)
                        for (std::size_t b = 0; b < kh; ++b)
                            for (std::size_t c = 0; c < kw; ++c) {
                                double kv = kk[(a * kh + b) * kw + c];
                                for_rows(a, b, c, [&](std::size_t istart, std::size_t ostart, std::size_t count) {
                                    double* xp = gxi + istart;
                                    const double* gp = go + ostart;
                                    for (std::size_t v = 0; v < count; ++v) xp[v] += kv * gp[v * stride];
                                });
                            }
                }
            });
        }
        if (!gk.empty()) {
            parallel_for(c_in, work, [&](std::size_t ic) {
                const double* xi = xd + ic * in_vol;
                for (std::size_t oc = 0; oc < c_out; ++oc) {
                    const double* go = g.data() + oc * out_vol;
                    double* gkk = gk.data() + (ic * c_out + oc) * ksz;
                    for (std::size_t a = 0; a < kd; ++a)
                        for (std::size_t b = 0; b < kh; ++b)
                            for (std::size_t c = 0; c < kw; ++c) {
                                double acc = 0.0;
                                for_rows(a, b, c, [&](std::size_t istart, std::size_t ostart, std::size_t count) {
                                    const double* ip = xi + istart;
                                    const double* gp = go + ostart;
                                    for (std::size_t v = 0; v < count; ++v) acc += ip[v] * gp[v * stride];
                                });
                                gkk[(a * kh + b) * kw + c] += acc;
                            }
                }
            });
        }
    });
}

Tensor sum(const Tensor& a) {
    double total = 0.0;
    for (double v : a.data()) total += v;
    return make_result({1}, {total}, {a}, "sum", [](Backprop& bp) {
        double g = bp.grad_out()[0];
        for (double& v : bp.grad_in(0)) v += g;
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    if (pred.shape() != target.shape()) {
        throw DimensionError("mse_loss: " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
    }
    std::size_t n = pred.numel();
    double total = 0.0;
    const auto& p = pred.data();
    const auto& t = target.data();
    for (std::size_t i = 0; i < n; ++i) total += (p[i] - t[i]) * (p[i] - t[i]);
    return make_result({1}, {total / static_cast<double>(n)}, {pred, target}, "mse_loss", [n](Backprop& bp) {
        double g = bp.grad_out()[0] * 2.0 / static_cast<double>(n);
        const auto& p = bp.in(0).data;
        const auto& t = bp.in(1).data;
        auto gp = bp.grad_in(0);
        auto gt = bp.grad_in(1);
        for (std::size_t i = 0; i < n; ++i) {
            double diff = p[i] - t[i];
            if (!gp.empty()) gp[i] += g * diff;
            if (!gt.empty()) gt[i] -= g * diff;
        }
    });
}

} // namespace voxpeft

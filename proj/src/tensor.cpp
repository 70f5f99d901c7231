#include "alignlab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace alignlab {

namespace {

Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;
thread_local Tape g_tape;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C[m,n] = A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    MutMap(c, m, n).noalias() = ConstMap(a, m, k) * ConstMap(b, k, n);
}

// C[m,n] = A[m,k] * B[n,k]^T
void gemm_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k, std::int64_t n) {
    MutMap(c, m, n).noalias() = ConstMap(a, m, k) * ConstMap(b, n, k).transpose();
}

// C[q,r] = A[p,q]^T * B[p,r]
void gemm_tn(const double* a, const double* b, double* c, std::int64_t p, std::int64_t q, std::int64_t r) {
    MutMap(c, q, r).noalias() = ConstMap(a, p, q).transpose() * ConstMap(b, p, r);
}

void quantize_in_place(std::vector<double>& values) {
    if (g_precision == Precision::f32) {
        for (double& v : values) {
            v = static_cast<double>(static_cast<float>(v));
        }
    }
}

void ensure_grad(TensorNode& node) {
    if (node.grad.empty()) {
        node.grad.assign(node.data.size(), 0.0);
    }
}

// Gradient accumulation honors the active precision so the f32 pipeline stays
// f32 end to end.
inline void acc(double& g, double delta) {
    g = quantize(g + quantize(delta));
}

bool wants_grad(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) {
        return false;
    }
    for (const Tensor* t : inputs) {
        if (t->requires_grad()) {
            return true;
        }
    }
    return false;
}

Tensor finish(Tensor out, std::initializer_list<const Tensor*> inputs, std::function<void()> backward_fn) {
    if (wants_grad(inputs)) {
        out.set_requires_grad(true);
        Tape::current().record(out.node(), std::move(backward_fn));
    }
    return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

Shape strides_of(const Shape& shape) {
    Shape strides(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) {
        strides[i - 1] = strides[i] * shape[i];
    }
    return strides;
}

}  // namespace

Tensor make_tensor(Shape shape, std::vector<double> data) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    return Tensor(std::move(node));
}

Precision global_precision() { return g_precision; }
void set_global_precision(Precision p) { g_precision = p; }

double quantize(double v) {
    return g_precision == Precision::f32 ? static_cast<double>(static_cast<float>(v)) : v;
}

std::int64_t numel(const Shape& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        n *= d;
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ")";
    return os.str();
}

Tensor Tensor::zeros(Shape shape) {
    const auto n = numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
    const auto n = numel(shape);
    return make_tensor(std::move(shape), std::vector<double>(static_cast<std::size_t>(n), quantize(value)));
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values) {
    if (numel(shape) != static_cast<std::int64_t>(values.size())) {
        throw ShapeError("from_values: " + shape_str(shape) + " does not hold " + std::to_string(values.size()) + " values");
    }
    quantize_in_place(values);
    return make_tensor(std::move(shape), std::move(values));
}

Tensor Tensor::scalar(double value) {
    return from_values({1}, {value});
}

double Tensor::item() const {
    if (size() != 1) {
        throw ContractError("item: tensor has shape " + shape_str(shape()) + ", expected a scalar");
    }
    return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
}

Tensor& Tensor::set_param_path(std::string path) {
    node_->param_path = std::move(path);
    return *this;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tape& Tape::current() { return g_tape; }

void Tape::record(std::shared_ptr<TensorNode> output, std::function<void()> backward) {
    records_.push_back({std::move(output), std::move(backward)});
}

void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    }
    auto& records = Tape::current().records();
    std::size_t start = records.size();
    for (std::size_t i = records.size(); i-- > 0;) {
        if (records[i].output == loss.node()) {
            start = i;
            break;
        }
    }
    if (start == records.size()) {
        throw ContractError("backward: loss is not the output of a recorded graph");
    }
    loss.node()->grad.assign(1, 1.0);
    for (std::size_t i = start + 1; i-- > 0;) {
        if (!records[i].output->grad.empty()) {
            records[i].backward();
        }
    }
}

// --------------------------------------------------------------------------
// Elementwise ops
// --------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.values().begin(), a.values().end());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = quantize(out[i] + b.values()[i]);
    }
    Tensor result = make_tensor(a.shape(), std::move(out));
    auto an = a.node(), bn = b.node(), on = result.node();
    return finish(result, {&a, &b}, [an, bn, on] {
        if (an->requires_grad) {
            ensure_grad(*an);
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc(an->grad[i], on->grad[i]);
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc(bn->grad[i], on->grad[i]);
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = quantize(a.values()[i] - b.values()[i]);
    }
    Tensor result = make_tensor(a.shape(), std::move(out));
    auto an = a.node(), bn = b.node(), on = result.node();
    return finish(result, {&a, &b}, [an, bn, on] {
        if (an->requires_grad) {
            ensure_grad(*an);
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc(an->grad[i], on->grad[i]);
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc(bn->grad[i], -on->grad[i]);
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = quantize(a.values()[i] * b.values()[i]);
    }
    Tensor result = make_tensor(a.shape(), std::move(out));
    auto an = a.node(), bn = b.node(), on = result.node();
    return finish(result, {&a, &b}, [an, bn, on] {
        if (an->requires_grad) {
            ensure_grad(*an);
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc(an->grad[i], on->grad[i] * bn->data[i]);
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc(bn->grad[i], on->grad[i] * an->data[i]);
        }
    });
}

Tensor neg(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = -a.values()[i];
    }
    Tensor result = make_tensor(a.shape(), std::move(out));
    auto an = a.node(), on = result.node();
    return finish(result, {&a}, [an, on] {
        if (!an->requires_grad) return;
        ensure_grad(*an);
        for (std::size_t i = 0; i < on->grad.size(); ++i) acc(an->grad[i], -on->grad[i]);
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = quantize(a.values()[i] * c);
    }
    Tensor result = make_tensor(a.shape(), std::move(out));
    auto an = a.node(), on = result.node();
    return finish(result, {&a}, [an, on, c] {
        if (!an->requires_grad) return;
        ensure_grad(*an);
        for (std::size_t i = 0; i < on->grad.size(); ++i) acc(an->grad[i], on->grad[i] * c);
    });
}

Tensor exp_elem(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = quantize(std::exp(a.values()[i]));
    }
    Tensor result = make_tensor(a.shape(), std::move(out));
    auto an = a.node(), on = result.node();
    return finish(result, {&a}, [an, on] {
        if (!an->requires_grad) return;
        ensure_grad(*an);
        for (std::size_t i = 0; i < on->grad.size(); ++i) acc(an->grad[i], on->grad[i] * on->data[i]);
    });
}

Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    if (s.size() != 1) {
        throw ShapeError("mul_scalar: scalar factor has shape " + shape_str(s.shape()));
    }
    const double sv = s.values()[0];
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = quantize(x.values()[i] * sv);
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    auto xn = x.node(), sn = s.node(), on = result.node();
    return finish(result, {&x, &s}, [xn, sn, on] {
        const double sv2 = sn->data[0];
        if (xn->requires_grad) {
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc(xn->grad[i], on->grad[i] * sv2);
        }
        if (sn->requires_grad) {
            ensure_grad(*sn);
            double total = 0.0;
            for (std::size_t i = 0; i < on->grad.size(); ++i) total += on->grad[i] * xn->data[i];
            acc(sn->grad[0], total);
        }
    });
}

Tensor add_row_bias(const Tensor& x, const Tensor& bias) {
    if (bias.rank() != 1 || x.rank() < 1 || x.shape().back() != bias.dim(0)) {
        throw ShapeError("add_row_bias: " + shape_str(x.shape()) + " with bias " + shape_str(bias.shape()));
    }
    const std::int64_t d = bias.dim(0);
    const std::int64_t rows = x.size() / d;
    std::vector<double> out(x.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < d; ++j) {
            out[r * d + j] = quantize(x.values()[r * d + j] + bias.values()[j]);
        }
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    auto xn = x.node(), bn = bias.node(), on = result.node();
    return finish(result, {&x, &bias}, [xn, bn, on, rows, d] {
        if (xn->requires_grad) {
            ensure_grad(*xn);
            for (std::size_t i = 0; i < on->grad.size(); ++i) acc(xn->grad[i], on->grad[i]);
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            for (std::int64_t j = 0; j < d; ++j) {
                double total = 0.0;
                for (std::int64_t r = 0; r < rows; ++r) total += on->grad[r * d + j];
                acc(bn->grad[j], total);
            }
        }
    });
}

// --------------------------------------------------------------------------
// Matrix products
// --------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
    quantize_in_place(out);
    Tensor result = make_tensor({m, n}, std::move(out));
    auto an = a.node(), bn = b.node(), on = result.node();
    return finish(result, {&a, &b}, [an, bn, on, m, k, n] {
        if (an->requires_grad) {
            ensure_grad(*an);
            std::vector<double> tmp(static_cast<std::size_t>(m * k));
            gemm_nt(on->grad.data(), bn->data.data(), tmp.data(), m, n, k);
            for (std::size_t i = 0; i < tmp.size(); ++i) acc(an->grad[i], tmp[i]);
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            std::vector<double> tmp(static_cast<std::size_t>(k * n));
            gemm_tn(an->data.data(), on->grad.data(), tmp.data(), m, k, n);
            for (std::size_t i = 0; i < tmp.size(); ++i) acc(bn->grad[i], tmp[i]);
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw ShapeError("matmul_nt: inner dimensions disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<double> out(static_cast<std::size_t>(m * n));
    gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
    quantize_in_place(out);
    Tensor result = make_tensor({m, n}, std::move(out));
    auto an = a.node(), bn = b.node(), on = result.node();
    return finish(result, {&a, &b}, [an, bn, on, m, k, n] {
        if (an->requires_grad) {
            ensure_grad(*an);
            std::vector<double> tmp(static_cast<std::size_t>(m * k));
            gemm_nn(on->grad.data(), bn->data.data(), tmp.data(), m, n, k);
            for (std::size_t i = 0; i < tmp.size(); ++i) acc(an->grad[i], tmp[i]);
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            std::vector<double> tmp(static_cast<std::size_t>(n * k));
            gemm_tn(on->grad.data(), an->data.data(), tmp.data(), m, n, k);
            for (std::size_t i = 0; i < tmp.size(); ++i) acc(bn->grad[i], tmp[i]);
        }
    });
}

namespace {

void check_bmm(const Tensor& a, const Tensor& b, std::int64_t b_rows_axis, const char* op) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(static_cast<std::size_t>(b_rows_axis))) {
        throw ShapeError(std::string(op) + ": incompatible batched shapes " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

}  // namespace

Tensor bmm(const Tensor& a, const Tensor& b) {
    check_bmm(a, b, 1, "bmm");
    const std::int64_t batches = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(static_cast<std::size_t>(batches * m * n));
    for (std::int64_t i = 0; i < batches; ++i) {
        gemm_nn(a.values().data() + i * m * k, b.values().data() + i * k * n, out.data() + i * m * n, m, k, n);
    }
    quantize_in_place(out);
    Tensor result = make_tensor({batches, m, n}, std::move(out));
    auto an = a.node(), bn = b.node(), on = result.node();
    return finish(result, {&a, &b}, [an, bn, on, batches, m, k, n] {
        std::vector<double> tmp;
        if (an->requires_grad) {
            ensure_grad(*an);
            tmp.resize(static_cast<std::size_t>(m * k));
            for (std::int64_t i = 0; i < batches; ++i) {
                gemm_nt(on->grad.data() + i * m * n, bn->data.data() + i * k * n, tmp.data(), m, n, k);
                double* g = an->grad.data() + i * m * k;
                for (std::size_t j = 0; j < tmp.size(); ++j) acc(g[j], tmp[j]);
            }
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            tmp.resize(static_cast<std::size_t>(k * n));
            for (std::int64_t i = 0; i < batches; ++i) {
                gemm_tn(an->data.data() + i * m * k, on->grad.data() + i * m * n, tmp.data(), m, k, n);
                double* g = bn->grad.data() + i * k * n;
                for (std::size_t j = 0; j < tmp.size(); ++j) acc(g[j], tmp[j]);
            }
        }
    });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    check_bmm(a, b, 2, "bmm_nt");
    const std::int64_t batches = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    std::vector<double> out(static_cast<std::size_t>(batches * m * n));
    for (std::int64_t i = 0; i < batches; ++i) {
        gemm_nt(a.values().data() + i * m * k, b.values().data() + i * n * k, out.data() + i * m * n, m, k, n);
    }
    quantize_in_place(out);
    Tensor result = make_tensor({batches, m, n}, std::move(out));
    auto an = a.node(), bn = b.node(), on = result.node();
    return finish(result, {&a, &b}, [an, bn, on, batches, m, k, n] {
        std::vector<double> tmp;
        if (an->requires_grad) {
            ensure_grad(*an);
            tmp.resize(static_cast<std::size_t>(m * k));
            for (std::int64_t i = 0; i < batches; ++i) {
                gemm_nn(on->grad.data() + i * m * n, bn->data.data() + i * n * k, tmp.data(), m, n, k);
                double* g = an->grad.data() + i * m * k;
                for (std::size_t j = 0; j < tmp.size(); ++j) acc(g[j], tmp[j]);
            }
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            tmp.resize(static_cast<std::size_t>(n * k));
            for (std::int64_t i = 0; i < batches; ++i) {
                gemm_tn(on->grad.data() + i * m * n, an->data.data() + i * m * k, tmp.data(), m, n, k);
                double* g = bn->grad.data() + i * n * k;
                for (std::size_t j = 0; j < tmp.size(); ++j) acc(g[j], tmp[j]);
            }
        }
    });
}

// --------------------------------------------------------------------------
// Layout ops
// --------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    Tensor result = make_tensor(std::move(shape), std::move(out));
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::size_t i = 0; i < on->grad.size(); ++i) acc(xn->grad[i], on->grad[i]);
    });
}

namespace {

// Linear index of the permuted element for every input linear index.
std::int64_t permuted_index(std::int64_t in_linear, const Shape& in_shape, const Shape& in_strides,
                            const Shape& out_strides, const std::vector<std::size_t>& inverse_axes) {
    std::int64_t out_linear = 0;
    for (std::size_t axis = 0; axis < in_shape.size(); ++axis) {
        const std::int64_t coord = (in_linear / in_strides[axis]) % in_shape[axis];
        out_linear += coord * out_strides[inverse_axes[axis]];
    }
    return out_linear;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    if (axes.size() != x.rank()) {
        throw ShapeError("permute: axes count " + std::to_string(axes.size()) + " for tensor " + shape_str(x.shape()));
    }
    std::vector<bool> seen(axes.size(), false);
    Shape out_shape(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (axes[i] >= axes.size() || seen[axes[i]]) {
            throw ShapeError("permute: axes are not a permutation");
        }
        seen[axes[i]] = true;
        out_shape[i] = x.dim(axes[i]);
    }
    std::vector<std::size_t> inverse(axes.size());
    for (std::size_t i = 0; i < axes.size(); ++i) inverse[axes[i]] = i;

    const Shape in_strides = strides_of(x.shape());
    const Shape out_strides = strides_of(out_shape);
    std::vector<double> out(x.size());
    for (std::int64_t i = 0; i < x.size(); ++i) {
        out[permuted_index(i, x.shape(), in_strides, out_strides, inverse)] = x.values()[i];
    }
    Tensor result = make_tensor(out_shape, std::move(out));
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on, in_strides, out_strides, inverse] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(xn->data.size()); ++i) {
            acc(xn->grad[i], on->grad[permuted_index(i, xn->shape, in_strides, out_strides, inverse)]);
        }
    });
}

Tensor transpose2d(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("transpose2d: expected a matrix, got " + shape_str(x.shape()));
    }
    return permute(x, {1, 0});
}

// --------------------------------------------------------------------------
// Nonlinearities and normalizations
// --------------------------------------------------------------------------

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

inline double gelu_value(double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); }
inline double gelu_slope(double v) {
    return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
}

}  // namespace

Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = quantize(gelu_value(x.values()[i]));
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::size_t i = 0; i < on->grad.size(); ++i) {
            acc(xn->grad[i], on->grad[i] * gelu_slope(xn->data[i]));
        }
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) {
        throw ContractError("layer_norm: eps must be positive");
    }
    if (gamma.rank() != 1 || beta.rank() != 1 || x.rank() < 1 || gamma.dim(0) != x.shape().back() ||
        beta.dim(0) != x.shape().back()) {
        throw ShapeError("layer_norm: " + shape_str(x.shape()) + " with gamma " + shape_str(gamma.shape()) +
                         ", beta " + shape_str(beta.shape()));
    }
    const std::int64_t d = x.shape().back();
    const std::int64_t rows = x.size() / d;
    std::vector<double> out(x.size());
    auto normalized = std::make_shared<std::vector<double>>(x.size());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = x.values().data() + r * d;
        double mean = 0.0;
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
            const double c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = istd;
        for (std::int64_t j = 0; j < d; ++j) {
            const double xhat = (row[j] - mean) * istd;
            (*normalized)[r * d + j] = xhat;
            out[r * d + j] = quantize(gamma.values()[j] * xhat + beta.values()[j]);
        }
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = result.node();
    return finish(result, {&x, &gamma, &beta}, [xn, gn, bn, on, normalized, inv_std, rows, d] {
        const auto& xhat = *normalized;
        if (gn->requires_grad) {
            ensure_grad(*gn);
            for (std::int64_t j = 0; j < d; ++j) {
                double total = 0.0;
                for (std::int64_t r = 0; r < rows; ++r) total += on->grad[r * d + j] * xhat[r * d + j];
                acc(gn->grad[j], total);
            }
        }
        if (bn->requires_grad) {
            ensure_grad(*bn);
            for (std::int64_t j = 0; j < d; ++j) {
                double total = 0.0;
                for (std::int64_t r = 0; r < rows; ++r) total += on->grad[r * d + j];
                acc(bn->grad[j], total);
            }
        }
        if (xn->requires_grad) {
            ensure_grad(*xn);
            for (std::int64_t r = 0; r < rows; ++r) {
                double mean_gy = 0.0;
                double mean_gy_xhat = 0.0;
                for (std::int64_t j = 0; j < d; ++j) {
                    const double gy = on->grad[r * d + j] * gn->data[j];
                    mean_gy += gy;
                    mean_gy_xhat += gy * xhat[r * d + j];
                }
                mean_gy /= static_cast<double>(d);
                mean_gy_xhat /= static_cast<double>(d);
                for (std::int64_t j = 0; j < d; ++j) {
                    const double gy = on->grad[r * d + j] * gn->data[j];
                    acc(xn->grad[r * d + j], (*inv_std)[r] * (gy - mean_gy - xhat[r * d + j] * mean_gy_xhat));
                }
            }
        }
    });
}

Tensor softmax_lastdim(const Tensor& x) {
    if (x.rank() < 1) {
        throw ShapeError("softmax_lastdim: scalar input");
    }
    const std::int64_t n = x.shape().back();
    const std::int64_t rows = x.size() / n;
    std::vector<double> out(x.size());
    for (std::int64_t r = 0; r < rows; ++r) {
        const double* row = x.values().data() + r * n;
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double total = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            out[r * n + j] = std::exp(row[j] - mx);
            total += out[r * n + j];
        }
        for (std::int64_t j = 0; j < n; ++j) {
            out[r * n + j] = quantize(out[r * n + j] / total);
        }
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on, rows, n] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::int64_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < n; ++j) dot += on->grad[r * n + j] * on->data[r * n + j];
            for (std::int64_t j = 0; j < n; ++j) {
                acc(xn->grad[r * n + j], on->data[r * n + j] * (on->grad[r * n + j] - dot));
            }
        }
    });
}

Tensor log_softmax_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("log_softmax_rows: expected a matrix, got " + shape_str(x.shape()));
    }
    const std::int64_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(x.size());
    for (std::int64_t r = 0; r < m; ++r) {
        const double* row = x.values().data() + r * n;
        double mx = row[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        double total = 0.0;
        for (std::int64_t j = 0; j < n; ++j) total += std::exp(row[j] - mx);
        const double lse = mx + std::log(total);
        for (std::int64_t j = 0; j < n; ++j) {
            out[r * n + j] = quantize(row[j] - lse);
        }
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on, m, n] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::int64_t r = 0; r < m; ++r) {
            double row_total = 0.0;
            for (std::int64_t j = 0; j < n; ++j) row_total += on->grad[r * n + j];
            for (std::int64_t j = 0; j < n; ++j) {
                acc(xn->grad[r * n + j], on->grad[r * n + j] - std::exp(on->data[r * n + j]) * row_total);
            }
        }
    });
}

Tensor l2_normalize_rows(const Tensor& x) {
    if (x.rank() != 2) {
        throw ShapeError("l2_normalize_rows: expected a matrix, got " + shape_str(x.shape()));
    }
    const std::int64_t m = x.dim(0), d = x.dim(1);
    std::vector<double> out(x.size());
    auto norms = std::make_shared<std::vector<double>>(m);
    for (std::int64_t r = 0; r < m; ++r) {
        const double* row = x.values().data() + r * d;
        double sq = 0.0;
        for (std::int64_t j = 0; j < d; ++j) sq += row[j] * row[j];
        const double norm = std::sqrt(sq);
        if (norm < 1e-12) {
            throw DegenerateEmbeddingError("l2_normalize_rows: row " + std::to_string(r) + " has norm " +
                                           std::to_string(norm));
        }
        (*norms)[r] = norm;
        for (std::int64_t j = 0; j < d; ++j) {
            out[r * d + j] = quantize(row[j] / norm);
        }
    }
    Tensor result = make_tensor(x.shape(), std::move(out));
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on, norms, m, d] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::int64_t r = 0; r < m; ++r) {
            double dot = 0.0;
            for (std::int64_t j = 0; j < d; ++j) dot += on->grad[r * d + j] * on->data[r * d + j];
            for (std::int64_t j = 0; j < d; ++j) {
                acc(xn->grad[r * d + j], (on->grad[r * d + j] - on->data[r * d + j] * dot) / (*norms)[r]);
            }
        }
    });
}

// --------------------------------------------------------------------------
// Reductions and gathers
// --------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.values()) total += v;
    Tensor result = make_tensor({1}, {quantize(total)});
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::size_t i = 0; i < xn->grad.size(); ++i) acc(xn->grad[i], on->grad[0]);
    });
}

Tensor diag(const Tensor& x) {
    if (x.rank() != 2 || x.dim(0) != x.dim(1)) {
        throw ShapeError("diag: expected a square matrix, got " + shape_str(x.shape()));
    }
    const std::int64_t n = x.dim(0);
    std::vector<double> out(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) out[i] = x.values()[i * n + i];
    Tensor result = make_tensor({n}, std::move(out));
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on, n] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::int64_t i = 0; i < n; ++i) acc(xn->grad[i * n + i], on->grad[i]);
    });
}

Tensor rows_lookup(const Tensor& table, const std::vector<std::int32_t>& ids) {
    if (table.rank() != 2) {
        throw ShapeError("rows_lookup: table must be a matrix, got " + shape_str(table.shape()));
    }
    const std::int64_t vocab = table.dim(0), d = table.dim(1);
    for (std::int32_t id : ids) {
        if (id < 0 || id >= vocab) {
            throw VocabError("id " + std::to_string(id) + " outside table of " + std::to_string(vocab) + " rows");
        }
    }
    std::vector<double> out(ids.size() * static_cast<std::size_t>(d));
    for (std::size_t r = 0; r < ids.size(); ++r) {
        const double* src = table.values().data() + static_cast<std::int64_t>(ids[r]) * d;
        std::copy(src, src + d, out.begin() + static_cast<std::int64_t>(r) * d);
    }
    Tensor result = make_tensor({static_cast<std::int64_t>(ids.size()), d}, std::move(out));
    auto tn = table.node(), on = result.node();
    return finish(result, {&table}, [tn, on, ids, d] {
        if (!tn->requires_grad) return;
        ensure_grad(*tn);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            double* dst = tn->grad.data() + static_cast<std::int64_t>(ids[r]) * d;
            const double* g = on->grad.data() + static_cast<std::int64_t>(r) * d;
            for (std::int64_t j = 0; j < d; ++j) acc(dst[j], g[j]);
        }
    });
}

Tensor prepend_token(const Tensor& x, const Tensor& token) {
    if (x.rank() != 3 || token.rank() != 1 || token.dim(0) != x.dim(2)) {
        throw ShapeError("prepend_token: " + shape_str(x.shape()) + " with token " + shape_str(token.shape()));
    }
    const std::int64_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
    std::vector<double> out(static_cast<std::size_t>(b * (s + 1) * d));
    for (std::int64_t i = 0; i < b; ++i) {
        double* dst = out.data() + i * (s + 1) * d;
        std::copy(token.values().begin(), token.values().end(), dst);
        std::copy(x.values().begin() + i * s * d, x.values().begin() + (i + 1) * s * d, dst + d);
    }
    Tensor result = make_tensor({b, s + 1, d}, std::move(out));
    auto xn = x.node(), tn = token.node(), on = result.node();
    return finish(result, {&x, &token}, [xn, tn, on, b, s, d] {
        if (tn->requires_grad) {
            ensure_grad(*tn);
            for (std::int64_t j = 0; j < d; ++j) {
                double total = 0.0;
                for (std::int64_t i = 0; i < b; ++i) total += on->grad[i * (s + 1) * d + j];
                acc(tn->grad[j], total);
            }
        }
        if (xn->requires_grad) {
            ensure_grad(*xn);
            for (std::int64_t i = 0; i < b; ++i) {
                const double* g = on->grad.data() + i * (s + 1) * d + d;
                double* dst = xn->grad.data() + i * s * d;
                for (std::int64_t j = 0; j < s * d; ++j) acc(dst[j], g[j]);
            }
        }
    });
}

Tensor select_token(const Tensor& x, std::int64_t index) {
    if (x.rank() != 3) {
        throw ShapeError("select_token: expected [batch, seq, dim], got " + shape_str(x.shape()));
    }
    const std::int64_t b = x.dim(0), s = x.dim(1), d = x.dim(2);
    if (index < 0 || index >= s) {
        throw ContractError("select_token: index " + std::to_string(index) + " outside sequence of " + std::to_string(s));
    }
    std::vector<double> out(static_cast<std::size_t>(b * d));
    for (std::int64_t i = 0; i < b; ++i) {
        const double* src = x.values().data() + (i * s + index) * d;
        std::copy(src, src + d, out.begin() + i * d);
    }
    Tensor result = make_tensor({b, d}, std::move(out));
    auto xn = x.node(), on = result.node();
    return finish(result, {&x}, [xn, on, b, s, d, index] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for (std::int64_t i = 0; i < b; ++i) {
            double* dst = xn->grad.data() + (i * s + index) * d;
            const double* g = on->grad.data() + i * d;
            for (std::int64_t j = 0; j < d; ++j) acc(dst[j], g[j]);
        }
    });
}

namespace {

// Shared index walk for patchify forward/backward: calls fn(input_linear, output_linear).
template <typename Fn>
void for_each_patch_element(std::int64_t b, std::int64_t c, std::int64_t hw, std::int64_t patch, Fn&& fn) {
    const std::int64_t grid = hw / patch;
    const std::int64_t patch_dim = c * patch * patch;
    const std::int64_t np = grid * grid;
    for (std::int64_t img = 0; img < b; ++img) {
        for (std::int64_t py = 0; py < grid; ++py) {
            for (std::int64_t px = 0; px < grid; ++px) {
                const std::int64_t patch_index = py * grid + px;
                for (std::int64_t ch = 0; ch < c; ++ch) {
                    for (std::int64_t dy = 0; dy < patch; ++dy) {
                        for (std::int64_t dx = 0; dx < patch; ++dx) {
                            const std::int64_t in_linear =
                                ((img * c + ch) * hw + (py * patch + dy)) * hw + (px * patch + dx);
                            const std::int64_t out_linear =
                                (img * np + patch_index) * patch_dim + (ch * patch + dy) * patch + dx;
                            fn(in_linear, out_linear);
                        }
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor patchify(const Tensor& images, std::int64_t patch) {
    if (images.rank() != 4 || images.dim(2) != images.dim(3)) {
        throw ShapeError("patchify: expected square [batch, channels, H, W], got " + shape_str(images.shape()));
    }
    const std::int64_t b = images.dim(0), c = images.dim(1), hw = images.dim(2);
    if (patch <= 0 || hw % patch != 0) {
        throw ShapeError("patchify: patch " + std::to_string(patch) + " does not divide resolution " + std::to_string(hw));
    }
    const std::int64_t grid = hw / patch;
    std::vector<double> out(static_cast<std::size_t>(b * grid * grid * c * patch * patch));
    for_each_patch_element(b, c, hw, patch, [&](std::int64_t in_linear, std::int64_t out_linear) {
        out[out_linear] = images.values()[in_linear];
    });
    Tensor result = make_tensor({b, grid * grid, c * patch * patch}, std::move(out));
    auto xn = images.node(), on = result.node();
    return finish(result, {&images}, [xn, on, b, c, hw, patch] {
        if (!xn->requires_grad) return;
        ensure_grad(*xn);
        for_each_patch_element(b, c, hw, patch, [&](std::int64_t in_linear, std::int64_t out_linear) {
            acc(xn->grad[in_linear], on->grad[out_linear]);
        });
    });
}

// --------------------------------------------------------------------------
// Finite differences
// --------------------------------------------------------------------------

double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double h) {
    if (h <= 0.0) {
        throw ContractError("grad_check: step must be positive");
    }
    for (const Tensor& t : inputs) t.node()->grad.clear();
    Tape::current().clear();
    Tensor loss = f(inputs);
    if (loss.size() != 1) {
        throw ContractError("grad_check: function must be scalar-valued");
    }
    backward(loss);

    std::vector<std::vector<double>> recorded(inputs.size());
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad()) continue;
        const auto g = inputs[i].grad();
        recorded[i] = g.empty() ? std::vector<double>(static_cast<std::size_t>(inputs[i].size()), 0.0)
                                : std::vector<double>(g.begin(), g.end());
    }
    Tape::current().clear();

    double worst = 0.0;
    {
        NoGradGuard no_grad;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            if (!inputs[i].requires_grad()) continue;
            Tensor handle = inputs[i];  // same node, mutable view for the probe
            auto values = handle.values();
            for (std::size_t j = 0; j < values.size(); ++j) {
                const double original = values[j];
                values[j] = original + h;
                const double f_plus = f(inputs).item();
                values[j] = original - h;
                const double f_minus = f(inputs).item();
                values[j] = original;
                const double estimate = (f_plus - f_minus) / (2.0 * h);
                const double reference = recorded[i][j];
                const double rel = std::abs(reference - estimate) /
                                   std::max({std::abs(reference), std::abs(estimate), 1e-8});
                worst = std::max(worst, rel);
            }
        }
    }
    for (const Tensor& t : inputs) t.node()->grad.clear();
    return worst;
}

}  // namespace alignlab

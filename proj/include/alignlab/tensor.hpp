#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "alignlab/errors.hpp"

namespace alignlab {

// Global numeric precision. Values are carried in doubles either way; in f32
// mode every op output, gradient accumulation and initial value is rounded
// through IEEE float, so checkpoints written as float32 round-trip bit-exactly.
// f64 mode is used for finite-difference gradient checks, whose tolerances are
// unreachable in single precision.
enum class Precision { f32, f64 };

Precision global_precision();
void set_global_precision(Precision p);
double quantize(double v);

// Restores the previous precision on scope exit.
class PrecisionGuard {
public:
    explicit PrecisionGuard(Precision p) : previous_(global_precision()) { set_global_precision(p); }
    ~PrecisionGuard() { set_global_precision(previous_); }
    PrecisionGuard(const PrecisionGuard&) = delete;
    PrecisionGuard& operator=(const PrecisionGuard&) = delete;

private:
    Precision previous_;
};

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until backward touches it
    bool requires_grad = false;
    std::string param_path;
};

// Shared-ownership handle over a dense array. Data is immutable once an op has
// produced it; only grad slots accumulate afterwards.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_values(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);

    bool valid() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::int64_t dim(std::size_t axis) const { return node_->shape[axis]; }
    std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }

    std::span<double> values() { return node_->data; }
    std::span<const double> values() const { return node_->data; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool flag);

    const std::string& param_path() const { return node_->param_path; }
    Tensor& set_param_path(std::string path);

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<double> grad() { return node_->grad; }
    std::span<const double> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
    std::shared_ptr<TensorNode> node_;

    friend Tensor make_tensor(Shape shape, std::vector<double> data);
};

// --------------------------------------------------------------------------
// Recording tape
// --------------------------------------------------------------------------

// Gradient recording is on by default; a NoGradGuard turns it off for pure
// evaluation (finite differences, metric computation).
bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// Ordered record of executed ops, one per thread. Records are appended in
// execution order, which is a topological order of the graph; the backward
// sweep walks them once in reverse.
class Tape {
public:
    struct Record {
        std::shared_ptr<TensorNode> output;
        std::function<void()> backward;
    };

    static Tape& current();

    void record(std::shared_ptr<TensorNode> output, std::function<void()> backward);
    void clear() { records_.clear(); }
    std::size_t size() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }

private:
    std::vector<Record> records_;
};

// Populates grad for every tensor with requires_grad reachable from loss.
// Tensors with requires_grad == false are never written.
void backward(const Tensor& loss);

// --------------------------------------------------------------------------
// Ops
// --------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double c);
Tensor exp_elem(const Tensor& a);
// Elementwise x * s where s is a one-element tensor (used for temperature).
Tensor mul_scalar(const Tensor& x, const Tensor& s);
// x has last dimension d, bias has shape [d]; broadcast over leading rows.
Tensor add_row_bias(const Tensor& x, const Tensor& bias);

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
Tensor bmm(const Tensor& a, const Tensor& b);        // [B,m,k] x [B,k,n]
Tensor bmm_nt(const Tensor& a, const Tensor& b);     // [B,m,k] x [B,n,k]^T

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor transpose2d(const Tensor& x);

Tensor gelu(const Tensor& x);  // exact erf form
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);
Tensor softmax_lastdim(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);  // [m,n], stable (row max subtracted)
Tensor l2_normalize_rows(const Tensor& x);

Tensor sum(const Tensor& x);          // -> [1]
Tensor diag(const Tensor& x);         // [n,n] -> [n]
Tensor rows_lookup(const Tensor& table, const std::vector<std::int32_t>& ids);
Tensor prepend_token(const Tensor& x, const Tensor& token);        // [b,s,d] -> [b,s+1,d]
Tensor select_token(const Tensor& x, std::int64_t index);          // [b,s,d] -> [b,d]
Tensor patchify(const Tensor& images, std::int64_t patch);         // [b,c,H,W] -> [b,np,c*p*p]

constexpr double kLayerNormEps = 1e-5;

// --------------------------------------------------------------------------
// Finite-difference oracle
// --------------------------------------------------------------------------

// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h against the recorded
// gradient; returns the worst relative error over every coordinate of every
// input that requires grad. Frozen inputs are skipped. Owns the tape while it
// runs. The probe evaluations never touch the autodiff path being checked.
double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                  const std::vector<Tensor>& inputs, double h);

}  // namespace alignlab

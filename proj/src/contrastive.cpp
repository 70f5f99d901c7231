#include "alignlab/contrastive.hpp"

#include <cmath>

namespace alignlab {

Temperature Temperature::trainable(double initial_tau) {
    Temperature t;
    t.log_tau = Tensor::scalar(std::log(initial_tau));
    t.log_tau.set_requires_grad(true).set_param_path("head.log_tau");
    return t;
}

Temperature Temperature::fixed_unit() {
    Temperature t;
    t.log_tau = Tensor::scalar(0.0);
    t.log_tau.set_param_path("head.log_tau");
    t.paper_literal = true;
    return t;
}

double Temperature::tau() const {
    return std::exp(log_tau.item());
}

Tensor similarity(const Tensor& z_img, const Tensor& z_txt) {
    if (z_img.rank() != 2 || z_txt.rank() != 2 || z_img.dim(0) != z_txt.dim(0)) {
        throw ShapeError("similarity: batch sizes disagree: " + shape_str(z_img.shape()) + " vs " +
                         shape_str(z_txt.shape()));
    }
    return matmul_nt(z_img, z_txt);
}

namespace {

Tensor scaled(const Tensor& s, const Temperature& temperature) {
    // s / tau as s * exp(-log_tau); keeps tau positive and differentiable
    return mul_scalar(s, exp_elem(neg(temperature.log_tau)));
}

Tensor diag_loss(const Tensor& logits) {
    const double b = static_cast<double>(logits.dim(0));
    return scale(diag(log_softmax_rows(logits)), -1.0 / b);
}

}  // namespace

Tensor loss_i2t(const Tensor& s, const Temperature& temperature) {
    return diag_loss(scaled(s, temperature));
}

Tensor loss_t2i(const Tensor& s, const Temperature& temperature) {
    return diag_loss(transpose2d(scaled(s, temperature)));
}

Tensor total_loss(const Tensor& s, const Temperature& temperature) {
    if (s.rank() != 2 || s.dim(0) != s.dim(1)) {
        throw ShapeError("total_loss: similarity matrix must be square, got " + shape_str(s.shape()));
    }
    Tensor logits = scaled(s, temperature);
    Tensor both = add(sum(diag_loss(logits)), sum(diag_loss(transpose2d(logits))));
    return scale(both, 0.5);
}

}  // namespace alignlab

#pragma once

#include "alignlab/tensor.hpp"

namespace alignlab {

// tau > 0 always: stored as log(tau) and exponentiated where used. The
// paper-literal mode pins tau = 1 (log_tau = 0, frozen).
struct Temperature {
    Tensor log_tau;
    bool paper_literal = false;

    static Temperature trainable(double initial_tau);
    static Temperature fixed_unit();

    double tau() const;
};

// s[k][j] = cosine similarity of image k to text j; rows must be unit vectors.
Tensor similarity(const Tensor& z_img, const Tensor& z_txt);

// Per-sample image-to-text loss vector: L_k = -(1/b) log softmax_row(s/tau)[k,k].
Tensor loss_i2t(const Tensor& s, const Temperature& temperature);
// Text-to-image direction: softmax over columns instead of rows.
Tensor loss_t2i(const Tensor& s, const Temperature& temperature);
// 0.5 * sum_k (L_k^img + L_k^txt); equals ln(b) for a constant matrix.
Tensor total_loss(const Tensor& s, const Temperature& temperature);

}  // namespace alignlab

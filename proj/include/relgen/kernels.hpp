#pragma once

#include <cstdint>

#include "relgen/tensor.hpp"

namespace relgen::kernels {

// Matrix-multiply kernels. The default entry points parallelize over output
// rows with OpenMP; the _serial variants are the reference implementations
// kept for the equivalence tests and the benchmark. Both compute each output
// element with the same inner-loop order, so results are bit-identical.
//
// C = op(A) * op(B) (+ C when accumulate), op controlled by trans_a/trans_b.
void matmul(const Mat& A, const Mat& B, Mat& C, bool trans_a = false, bool trans_b = false,
            bool accumulate = false);
void matmul_serial(const Mat& A, const Mat& B, Mat& C, bool trans_a = false, bool trans_b = false,
                   bool accumulate = false);

// Softmax over the prefix [0, valid) of a row; entries at and past `valid`
// are set to 0. Used by causal self-attention.
void softmax_prefix(const double* scores, int n, int valid, double* out);

// Softmax over entries with mask[j] != 0; masked-out entries are set to 0.
void softmax_masked(const double* scores, const uint8_t* mask, int n, double* out);

// d(scores) given y = softmax(scores) restricted to the masked-in set.
void softmax_backward(const double* y, const double* dy, int n, double* dscores);

// y = gamma * (x - mean) / sqrt(var + eps) + beta, per row of length n.
void layernorm_forward(const double* x, int n, const double* gamma, const double* beta, double eps,
                       double* y, double* out_mean, double* out_rstd);
void layernorm_backward(const double* x, int n, const double* gamma, double mean, double rstd,
                        const double* dy, double* dx, double* dgamma, double* dbeta);

}  // namespace relgen::kernels

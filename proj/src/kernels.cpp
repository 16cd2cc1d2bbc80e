#include "relgen/kernels.hpp"

#include <cmath>
#include <stdexcept>

namespace relgen::kernels {

namespace {

// One output row of C = op(A) * op(B). Identical inner-loop order for the
// serial and parallel drivers.
inline void matmul_row(const Mat& A, const Mat& B, Mat& C, bool trans_a, bool trans_b,
                       bool accumulate, int i) {
    const int n = C.cols;
    const int kk = trans_a ? A.rows : A.cols;
    double* crow = C.row(i);
    for (int j = 0; j < n; ++j) {
        double acc = accumulate ? crow[j] : 0.0;
        if (!trans_a && !trans_b) {
            const double* arow = A.row(i);
            for (int l = 0; l < kk; ++l) acc += arow[l] * B.at(l, j);
        } else if (!trans_a && trans_b) {
            const double* arow = A.row(i);
            const double* brow = B.row(j);
            for (int l = 0; l < kk; ++l) acc += arow[l] * brow[l];
        } else if (trans_a && !trans_b) {
            for (int l = 0; l < kk; ++l) acc += A.at(l, i) * B.at(l, j);
        } else {
            for (int l = 0; l < kk; ++l) acc += A.at(l, i) * B.at(j, l);
        }
        crow[j] = acc;
    }
}

inline void check_shapes(const Mat& A, const Mat& B, Mat& C, bool trans_a, bool trans_b) {
    const int m = trans_a ? A.cols : A.rows;
    const int ka = trans_a ? A.rows : A.cols;
    const int kb = trans_b ? B.cols : B.rows;
    const int n = trans_b ? B.rows : B.cols;
    if (ka != kb) throw std::invalid_argument("matmul: inner dimensions differ");
    if (C.rows != m || C.cols != n) {
        C.rows = m;
        C.cols = n;
        C.a.assign(static_cast<size_t>(m) * n, 0.0);
    }
}

}  // namespace

void matmul_serial(const Mat& A, const Mat& B, Mat& C, bool trans_a, bool trans_b,
                   bool accumulate) {
    check_shapes(A, B, C, trans_a, trans_b);
    for (int i = 0; i < C.rows; ++i) matmul_row(A, B, C, trans_a, trans_b, accumulate, i);
}

void matmul(const Mat& A, const Mat& B, Mat& C, bool trans_a, bool trans_b, bool accumulate) {
    check_shapes(A, B, C, trans_a, trans_b);
    const int m = C.rows;
#pragma omp parallel for schedule(static) if (m > 1)
    for (int i = 0; i < m; ++i) matmul_row(A, B, C, trans_a, trans_b, accumulate, i);
}

void softmax_prefix(const double* scores, int n, int valid, double* out) {
    double mx = scores[0];
    for (int j = 1; j < valid; ++j) mx = std::max(mx, scores[j]);
    double sum = 0.0;
    for (int j = 0; j < valid; ++j) {
        out[j] = std::exp(scores[j] - mx);
        sum += out[j];
    }
    for (int j = 0; j < valid; ++j) out[j] /= sum;
    for (int j = valid; j < n; ++j) out[j] = 0.0;
}

void softmax_masked(const double* scores, const uint8_t* mask, int n, double* out) {
    double mx = 0.0;
    bool any = false;
    for (int j = 0; j < n; ++j) {
        if (!mask[j]) continue;
        if (!any || scores[j] > mx) mx = scores[j];
        any = true;
    }
    if (!any) {
        for (int j = 0; j < n; ++j) out[j] = 0.0;
        return;
    }
    double sum = 0.0;
    for (int j = 0; j < n; ++j) {
        if (mask[j]) {
            out[j] = std::exp(scores[j] - mx);
            sum += out[j];
        } else {
            out[j] = 0.0;
        }
    }
    for (int j = 0; j < n; ++j)
        if (mask[j]) out[j] /= sum;
}

void softmax_backward(const double* y, const double* dy, int n, double* dscores) {
    double dot = 0.0;
    for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
    for (int j = 0; j < n; ++j) dscores[j] = y[j] * (dy[j] - dot);
}

void layernorm_forward(const double* x, int n, const double* gamma, const double* beta, double eps,
                       double* y, double* out_mean, double* out_rstd) {
    double mean = 0.0;
    for (int j = 0; j < n; ++j) mean += x[j];
    mean /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) {
        double d = x[j] - mean;
        var += d * d;
    }
    var /= n;
    double rstd = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < n; ++j) y[j] = gamma[j] * (x[j] - mean) * rstd + beta[j];
    *out_mean = mean;
    *out_rstd = rstd;
}

void layernorm_backward(const double* x, int n, const double* gamma, double mean, double rstd,
                        const double* dy, double* dx, double* dgamma, double* dbeta) {
    double sum_dxhat = 0.0;
    double sum_dxhat_xhat = 0.0;
    for (int j = 0; j < n; ++j) {
        double xhat = (x[j] - mean) * rstd;
        double dxhat = dy[j] * gamma[j];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dgamma[j] += dy[j] * xhat;
        dbeta[j] += dy[j];
    }
    const double inv_n = 1.0 / n;
    for (int j = 0; j < n; ++j) {
        double xhat = (x[j] - mean) * rstd;
        double dxhat = dy[j] * gamma[j];
        dx[j] += rstd * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
    }
}

}  // namespace relgen::kernels

#pragma once

// Brute-force reimplementation of the crosscoder equations with plain loops.
// Test-only: the suites treat this as the ground truth for the Eigen path.

#include <cmath>
#include <vector>

#include "xct/crosscoder.hpp"

namespace xct::testing {

struct OracleResult {
    std::vector<std::vector<double>> f;  // per row, feature activations
    double total = 0;
    std::vector<double> recon;
    double sparsity = 0;
};

inline OracleResult oracle_forward(const CrosscoderParams& p,
                                   const std::vector<std::vector<std::vector<double>>>& xs,
                                   double lambda) {
    const std::size_t n = xs.size();
    const std::size_t B = xs[0].size();
    OracleResult out;
    out.recon.assign(n, 0.0);
    out.f.assign(B, std::vector<double>(static_cast<size_t>(p.dict_size), 0.0));
    for (std::size_t r = 0; r < B; ++r) {
        for (int i = 0; i < p.dict_size; ++i) {
            double pre = p.b_enc(i);
            for (std::size_t c = 0; c < n; ++c)
                for (int j = 0; j < p.d_model; ++j)
                    pre += p.w_enc[c](i, j) * xs[c][r][static_cast<size_t>(j)];
            out.f[r][static_cast<size_t>(i)] = pre > 0 ? pre : 0.0;
        }
    }
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t r = 0; r < B; ++r) {
            for (int j = 0; j < p.d_model; ++j) {
                double xhat = p.b_dec[c](j);
                for (int i = 0; i < p.dict_size; ++i)
                    xhat += out.f[r][static_cast<size_t>(i)] * p.w_dec[c](i, j);
                const double diff = xhat - xs[c][r][static_cast<size_t>(j)];
                out.recon[c] += diff * diff;
            }
        }
        out.recon[c] /= static_cast<double>(B);
        out.total += out.recon[c];
    }
    for (std::size_t c = 0; c < n; ++c)
        for (int i = 0; i < p.dict_size; ++i) {
            double norm = 0;
            for (int j = 0; j < p.d_model; ++j) norm += p.w_dec[c](i, j) * p.w_dec[c](i, j);
            norm = std::sqrt(norm);
            double fsum = 0;
            for (std::size_t r = 0; r < B; ++r) fsum += out.f[r][static_cast<size_t>(i)];
            out.sparsity += lambda * fsum * norm / static_cast<double>(B);
        }
    out.total += out.sparsity;
    return out;
}

inline std::vector<std::vector<std::vector<double>>> to_nested(const std::vector<MatrixXd>& xs) {
    std::vector<std::vector<std::vector<double>>> out;
    for (auto& x : xs) {
        std::vector<std::vector<double>> rows;
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            std::vector<double> row;
            for (Eigen::Index j = 0; j < x.cols(); ++j) row.push_back(x(r, j));
            rows.push_back(row);
        }
        out.push_back(rows);
    }
    return out;
}

}  // namespace xct::testing

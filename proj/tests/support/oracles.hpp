#pragma once

// Independent reference computations used as test oracles. They are written
// directly from the textbook formulas with plain loops.

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace oracle {

// Residual-income price at rate r. Year 1 and 2 ROE from EPS over opening book,
// year 3 from EPS2·(1+ltg) (or ROE2), linear fade to the industry median by year T,
// clean surplus with full retention, terminal perpetuity on B_T.
inline double gls_price(double B0, double eps1, double eps2, std::optional<double> ltg,
                        double median_roe, int T, double r) {
    std::vector<double> roe(static_cast<std::size_t>(T + 1)), book(static_cast<std::size_t>(T + 1));
    book[0] = B0;
    roe[1] = eps1 / book[0];
    book[1] = book[0] + eps1;
    roe[2] = eps2 / book[1];
    book[2] = book[1] + eps2;
    roe[3] = ltg ? eps2 * (1 + *ltg) / book[2] : roe[2];
    book[3] = book[2] * (1 + roe[3]);
    for (int k = 4; k <= T; ++k) {
        roe[static_cast<std::size_t>(k)] = roe[3] + (median_roe - roe[3]) * (k - 3) / double(T - 3);
        book[static_cast<std::size_t>(k)] = book[static_cast<std::size_t>(k - 1)] * (1 + roe[static_cast<std::size_t>(k)]);
    }
    double v = B0;
    for (int k = 1; k <= T; ++k)
        v += (roe[static_cast<std::size_t>(k)] - r) * book[static_cast<std::size_t>(k - 1)] / std::pow(1 + r, k);
    v += (roe[static_cast<std::size_t>(T)] - r) * book[static_cast<std::size_t>(T)] / (r * std::pow(1 + r, T));
    return v;
}

/// β = (XᵀX)⁻¹Xᵀy by explicit inversion of the normal matrix.
inline Eigen::VectorXd normal_equations(const Eigen::VectorXd& y, const Eigen::MatrixXd& X) {
    Eigen::MatrixXd xtx = X.transpose() * X;
    return xtx.inverse() * (X.transpose() * y);
}

/// Σ_g (Σ_{i∈g} e_i x_i)(Σ_{i∈g} e_i x_i)ᵀ sandwiched by (XᵀX)⁻¹, no scaling.
inline Eigen::MatrixXd grouped_sandwich(const Eigen::MatrixXd& X, const Eigen::VectorXd& e,
                                        const std::vector<std::string>& group) {
    const auto k = X.cols();
    std::map<std::string, Eigen::VectorXd> sums;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
        auto& s = sums.try_emplace(group[static_cast<std::size_t>(i)], Eigen::VectorXd::Zero(k)).first->second;
        s += e(i) * X.row(i).transpose();
    }
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
    for (const auto& [g, s] : sums) meat += s * s.transpose();
    Eigen::MatrixXd bread = (X.transpose() * X).inverse();
    return bread * meat * bread;
}

/// Newey–West variance of the sample mean, from the autocovariance definition.
inline double nw_variance_of_mean(const std::vector<double>& x, int L) {
    const double T = static_cast<double>(x.size());
    double m = 0;
    for (double v : x) m += v;
    m /= T;
    auto gamma = [&](std::size_t l) {
        double s = 0;
        for (std::size_t t = l; t < x.size(); ++t) s += (x[t] - m) * (x[t - l] - m);
        return s / T;
    };
    double v = gamma(0);
    for (int l = 1; l <= L; ++l) v += 2.0 * (1.0 - l / double(L + 1)) * gamma(static_cast<std::size_t>(l));
    return v / T;
}

}  // namespace oracle

#pragma once

// Quintile sorts, long-only mean-variance optimization against a factor risk
// model, performance analytics and the monthly backtest.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "capsule/core/csv.hpp"
#include "capsule/core/date.hpp"
#include "capsule/core/error.hpp"
#include "capsule/core/series.hpp"
#include "capsule/econometrics.hpp"
#include "capsule/metrics.hpp"
#include "capsule/panel.hpp"

namespace capsule::portfolio {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Quintile sorts

struct QuintileResult {
    std::array<double, 5> means{};
    std::array<std::size_t, 5> sizes{};
    std::vector<int> bin;  // per input row, −1 when excluded
    double spread = 0.0;   // Q5 − Q1
    double t = econ::kNaN; // Welch
    std::size_t n = 0;
};

/// Bin sizes for n items: near-equal, remainder to the lower bins.
inline std::array<std::size_t, 5> quintile_sizes(std::size_t n) {
    std::array<std::size_t, 5> s{};
    for (std::size_t q = 0; q < 5; ++q) s[q] = n / 5 + (q < n % 5 ? 1 : 0);
    return s;
}

inline double welch_t(std::span<const double> hi, std::span<const double> lo) {
    if (hi.size() < 2 || lo.size() < 2) return econ::kNaN;
    const double v = sample_variance(hi) / static_cast<double>(hi.size()) +
                     sample_variance(lo) / static_cast<double>(lo.size());
    if (!(v > 0.0)) return econ::kNaN;
    return (mean(hi) - mean(lo)) / std::sqrt(v);
}

/// Sort by score ascending (ties by firm_id) into five bins. Returns are
/// winsorized at 1/99 over the pooled sample first when `winsor` is set.
inline QuintileResult quintile_sort(const std::vector<std::string>& firm_ids, const OptSeries& scores,
                                    const OptSeries& returns, bool winsor = true) {
    if (firm_ids.size() != scores.size() || scores.size() != returns.size())
        fail(ErrorCode::ShapeError, "quintile inputs not aligned");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (scores[i] && returns[i]) idx.push_back(i);
    if (idx.size() < 5) fail(ErrorCode::TooFewFirms, "quintile sort needs at least 5 firms");
    OptSeries r = returns;
    if (winsor) {
        OptSeries sub(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) sub[k] = returns[idx[k]];
        auto w = metrics::winsorize(sub, 0.01, 0.99);
        for (std::size_t k = 0; k < idx.size(); ++k) r[idx[k]] = w[k];
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (*scores[a] != *scores[b]) return *scores[a] < *scores[b];
        return firm_ids[a] < firm_ids[b];
    });
    QuintileResult out;
    out.n = idx.size();
    out.sizes = quintile_sizes(idx.size());
    out.bin.assign(scores.size(), -1);
    std::array<std::vector<double>, 5> vals;
    std::size_t pos = 0;
    for (int q = 0; q < 5; ++q)
        for (std::size_t k = 0; k < out.sizes[static_cast<std::size_t>(q)]; ++k, ++pos) {
            out.bin[idx[pos]] = q;
            vals[static_cast<std::size_t>(q)].push_back(*r[idx[pos]]);
        }
    for (std::size_t q = 0; q < 5; ++q) out.means[q] = mean(vals[q]);
    out.spread = out.means[4] - out.means[0];
    out.t = welch_t(vals[4], vals[0]);
    return out;
}

/// Residuals of `score` regressed on [1, controls].
inline VectorXd residualize(const VectorXd& score, const MatrixXd& controls) {
    if (controls.rows() != score.size()) fail(ErrorCode::ShapeError, "controls not aligned with score");
    MatrixXd X(score.size(), controls.cols() + 1);
    X.col(0).setOnes();
    X.rightCols(controls.cols()) = controls;
    return econ::ols_core(score, X).residuals;
}

// ---------------------------------------------------------------------------
// Risk model

struct FactorRiskModel {
    std::vector<std::string> firm_ids;
    std::vector<std::string> factors;
    MatrixXd exposures;   // firms × factors
    MatrixXd factor_cov;  // factors × factors, monthly variance units
    VectorXd idio_var;    // per firm

    Index size() const { return static_cast<Index>(firm_ids.size()); }

    void validate() const {
        const Index n = size(), k = static_cast<Index>(factors.size());
        if (exposures.rows() != n || exposures.cols() != k || factor_cov.rows() != k || factor_cov.cols() != k ||
            idio_var.size() != n)
            fail(ErrorCode::RiskModelInvalid, "risk model dimensions do not conform");
        if (!exposures.allFinite() || !factor_cov.allFinite() || !idio_var.allFinite())
            fail(ErrorCode::RiskModelInvalid, "risk model has non-finite entries");
        if ((idio_var.array() < 0.0).any()) fail(ErrorCode::RiskModelInvalid, "negative idiosyncratic variance");
        if (k == 0) return;
        const double scale = std::max(1e-300, factor_cov.cwiseAbs().maxCoeff());
        if ((factor_cov - factor_cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, scale))
            fail(ErrorCode::RiskModelInvalid, "factor covariance is not symmetric");
        Eigen::SelfAdjointEigenSolver<MatrixXd> es(factor_cov, Eigen::EigenvaluesOnly);
        if (es.eigenvalues()(0) < -1e-12 * scale)
            fail(ErrorCode::RiskModelInvalid, "factor covariance is not positive semidefinite");
    }

    /// Σw without forming Σ.
    VectorXd cov_times(const VectorXd& w) const {
        VectorXd out = idio_var.cwiseProduct(w);
        if (!factors.empty()) out.noalias() += exposures * (factor_cov * (exposures.transpose() * w));
        return out;
    }

    MatrixXd dense() const {
        MatrixXd s = exposures * factor_cov * exposures.transpose();
        s.diagonal() += idio_var;
        return s;
    }

    /// Rows for the given firms, in the given order; firms absent from the model are skipped.
    FactorRiskModel select(const std::vector<std::string>& ids) const {
        std::map<std::string, Index> pos;
        for (Index i = 0; i < size(); ++i) pos.emplace(firm_ids[static_cast<std::size_t>(i)], i);
        std::vector<Index> rows;
        FactorRiskModel m;
        m.factors = factors;
        m.factor_cov = factor_cov;
        for (const auto& id : ids)
            if (auto it = pos.find(id); it != pos.end()) {
                rows.push_back(it->second);
                m.firm_ids.push_back(id);
            }
        m.exposures.resize(static_cast<Index>(rows.size()), exposures.cols());
        m.idio_var.resize(static_cast<Index>(rows.size()));
        for (std::size_t r = 0; r < rows.size(); ++r) {
            m.exposures.row(static_cast<Index>(r)) = exposures.row(rows[r]);
            m.idio_var(static_cast<Index>(r)) = idio_var(rows[r]);
        }
        return m;
    }
};

/// exposures.csv (firm_id,factor,loading), factor_cov.csv (factor_i,factor_j,cov), idio.csv (firm_id,var).
/// Exposures are sparse; absent loadings are zero. Covariance entries may be given
/// once per unordered pair or twice with equal values.
inline FactorRiskModel load_risk_model(const std::filesystem::path& dir) {
    auto need = [](const csv::Table& t, const char* name, const std::filesystem::path& p) {
        auto c = t.column(name);
        if (!c) fail(ErrorCode::ParseError, p.string() + ": missing column '" + name + "'");
        return *c;
    };
    auto num = [](const std::string& s, const std::filesystem::path& p, std::size_t line) {
        auto v = csv::parse_number(s);
        if (!v) fail(ErrorCode::ParseError, p.string() + ":" + std::to_string(line) + ": empty value");
        return *v;
    };
    FactorRiskModel m;
    const auto pi = dir / "idio.csv", pc = dir / "factor_cov.csv", pe = dir / "exposures.csv";
    auto ti = csv::read_file(pi);
    std::map<std::string, Index> firm_pos;
    {
        auto cf = need(ti, "firm_id", pi), cv = need(ti, "var", pi);
        std::vector<double> vars;
        for (const auto& r : ti.rows) {
            if (!firm_pos.emplace(r.cells.at(cf), static_cast<Index>(m.firm_ids.size())).second)
                fail(ErrorCode::DuplicateKey, pi.string() + ": duplicate firm " + r.cells[cf]);
            m.firm_ids.push_back(r.cells[cf]);
            vars.push_back(num(r.cells.at(cv), pi, r.line));
        }
        m.idio_var = Eigen::Map<VectorXd>(vars.data(), static_cast<Index>(vars.size()));
    }
    auto tc = csv::read_file(pc);
    std::map<std::string, Index> fac_pos;
    auto ci = need(tc, "factor_i", pc), cj = need(tc, "factor_j", pc), cc = need(tc, "cov", pc);
    for (const auto& r : tc.rows)
        for (auto c : {ci, cj})
            if (fac_pos.emplace(r.cells.at(c), 0).second) m.factors.push_back(r.cells[c]);
    std::sort(m.factors.begin(), m.factors.end());
    for (std::size_t k = 0; k < m.factors.size(); ++k) fac_pos[m.factors[k]] = static_cast<Index>(k);
    const auto K = static_cast<Index>(m.factors.size());
    m.factor_cov = MatrixXd::Constant(K, K, std::numeric_limits<double>::quiet_NaN());
    for (const auto& r : tc.rows) {
        Index a = fac_pos[r.cells[ci]], b = fac_pos[r.cells[cj]];
        double v = num(r.cells.at(cc), pc, r.line);
        for (auto [x, y] : {std::pair{a, b}, std::pair{b, a}}) {
            double& cell = m.factor_cov(x, y);
            if (!std::isnan(cell) && std::abs(cell - v) > 1e-10 * std::max(1.0, std::abs(v)))
                fail(ErrorCode::AsymmetricInput, pc.string() + ": conflicting entries for " + r.cells[ci] + "," +
                                                     r.cells[cj]);
            cell = v;
        }
    }
    if (K > 0 && m.factor_cov.hasNaN()) fail(ErrorCode::RiskModelInvalid, pc.string() + ": incomplete covariance");
    auto te = csv::read_file(pe);
    m.exposures = MatrixXd::Zero(m.size(), K);
    auto ef = need(te, "firm_id", pe), ek = need(te, "factor", pe), el = need(te, "loading", pe);
    for (const auto& r : te.rows) {
        auto f = firm_pos.find(r.cells.at(ef));
        auto k = fac_pos.find(r.cells.at(ek));
        if (f == firm_pos.end() || k == fac_pos.end())
            fail(ErrorCode::ParseError, pe.string() + ":" + std::to_string(r.line) + ": unknown firm or factor");
        m.exposures(f->second, k->second) = num(r.cells.at(el), pe, r.line);
    }
    m.validate();
    return m;
}

inline void write_risk_model(const FactorRiskModel& m, const std::filesystem::path& dir) {
    csv::Writer e({"firm_id", "factor", "loading"}), c({"factor_i", "factor_j", "cov"}), d({"firm_id", "var"});
    for (Index i = 0; i < m.size(); ++i) {
        for (Index k = 0; k < m.exposures.cols(); ++k)
            if (m.exposures(i, k) != 0.0)
                e.add({m.firm_ids[static_cast<std::size_t>(i)], m.factors[static_cast<std::size_t>(k)],
                       csv::format_number(m.exposures(i, k))});
        d.add({m.firm_ids[static_cast<std::size_t>(i)], csv::format_number(m.idio_var(i))});
    }
    for (Index a = 0; a < m.factor_cov.rows(); ++a)
        for (Index b = a; b < m.factor_cov.cols(); ++b)
            c.add({m.factors[static_cast<std::size_t>(a)], m.factors[static_cast<std::size_t>(b)],
                   csv::format_number(m.factor_cov(a, b))});
    e.save(dir / "exposures.csv");
    c.save(dir / "factor_cov.csv");
    d.save(dir / "idio.csv");
}

/// F̃ = (1−α)F + α·diag(F).
inline MatrixXd shrink_factor_cov(const MatrixXd& F, double alpha) {
    if (F.rows() != F.cols()) fail(ErrorCode::ShapeError, "factor covariance is not square");
    if (!(alpha >= 0.0 && alpha <= 1.0)) fail(ErrorCode::InvalidArgument, "shrinkage must lie in [0, 1]");
    if (F.size() && (F - F.transpose()).cwiseAbs().maxCoeff() > 1e-10)
        fail(ErrorCode::AsymmetricInput, "factor covariance is not symmetric");
    MatrixXd out = (1.0 - alpha) * F;
    out.diagonal() = F.diagonal();
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer

struct OptimizerConfig {
    double risk_aversion = 1.0;
    double shrinkage = 0.10;
    double z_clip = 2.5;
    double cap = 0.015;
    double budget = 1.0;
    bool long_only = true;
    double gamma_hat = 0.0074;
    double kkt_tolerance = 1e-8;
    int warm_iterations = 3000;
    int warm_patience = 50;  // stop the warm start once the bound pattern holds this long

    double lower() const { return long_only ? 0.0 : -cap; }

    void validate() const {
        if (!(shrinkage >= 0.0 && shrinkage <= 1.0)) fail(ErrorCode::InvalidArgument, "shrinkage must lie in [0, 1]");
        if (!(cap > 0.0 && cap <= 1.0)) fail(ErrorCode::InvalidArgument, "cap must lie in (0, 1]");
        if (!(risk_aversion > 0.0)) fail(ErrorCode::InvalidArgument, "risk aversion must be positive");
        if (!std::isfinite(budget)) fail(ErrorCode::InvalidArgument, "budget must be finite");
    }
};

/// μ_i = γ̂ · clamp(S̃_i, ±z_clip).
inline VectorXd expected_returns(std::span<const double> scores, const OptimizerConfig& cfg) {
    VectorXd mu(static_cast<Index>(scores.size()));
    for (std::size_t i = 0; i < scores.size(); ++i)
        mu(static_cast<Index>(i)) = cfg.gamma_hat * std::clamp(scores[i], -cfg.z_clip, cfg.z_clip);
    return mu;
}

struct OptimResult {
    VectorXd weights;
    double nu = 0.0;  // budget multiplier
    double kkt_residual = 0.0;
    int warm_iterations = 0;
    int active_set_iterations = 0;
};

/// Largest KKT violation of w for ascent gradient g = μ − 2λΣw under lo ≤ w ≤ hi, 1ᵀw = budget.
/// Free names should share a common gradient ν, names at the lower bound need g ≤ ν and
/// names at the cap g ≥ ν.
inline double kkt_residual(const VectorXd& w, const VectorXd& g, double lo, double hi, double* nu_out = nullptr) {
    const double eps = 1e-12;
    double sum = 0.0;
    Index nf = 0;
    double max_lower = -INFINITY, min_upper = INFINITY;
    for (Index i = 0; i < w.size(); ++i) {
        if (w(i) <= lo + eps) max_lower = std::max(max_lower, g(i));
        else if (w(i) >= hi - eps) min_upper = std::min(min_upper, g(i));
        else {
            sum += g(i);
            ++nf;
        }
    }
    double nu;
    if (nf > 0) nu = sum / static_cast<double>(nf);
    else if (std::isfinite(max_lower) && std::isfinite(min_upper)) nu = 0.5 * (max_lower + min_upper);
    else nu = std::isfinite(max_lower) ? max_lower : min_upper;
    double r = 0.0;
    for (Index i = 0; i < w.size(); ++i) {
        if (w(i) <= lo + eps) r = std::max(r, g(i) - nu);
        else if (w(i) >= hi - eps) r = std::max(r, nu - g(i));
        else r = std::max(r, std::abs(g(i) - nu));
    }
    if (nu_out) *nu_out = nu;
    return r;
}

namespace detail {

/// Euclidean projection onto {lo ≤ w ≤ hi, Σw = budget} by bisection on the shift.
inline VectorXd project_capped_simplex(const VectorXd& v, double lo, double hi, double budget) {
    auto total = [&](double tau) { return (v.array() - tau).max(lo).min(hi).sum(); };
    double a = v.minCoeff() - hi, b = v.maxCoeff() - lo;  // total(a) = N·hi ≥ budget ≥ N·lo = total(b)
    const double tol = 1e-16 * (1.0 + v.cwiseAbs().maxCoeff());
    for (int it = 0; it < 200 && b - a > tol; ++it) {
        const double m = 0.5 * (a + b);
        if (m <= a || m >= b) break;
        (total(m) > budget ? a : b) = m;
    }
    return (v.array() - 0.5 * (a + b)).max(lo).min(hi).matrix();
}

inline double spectral_bound(const FactorRiskModel& m) {
    const Index n = m.size();
    VectorXd x = VectorXd::Ones(n) / std::sqrt(static_cast<double>(n));
    double lam = 0.0;
    for (int it = 0; it < 50; ++it) {
        VectorXd y = m.cov_times(x);
        const double norm = y.norm();
        if (norm == 0.0) break;
        lam = norm;
        x = y / norm;
    }
    return std::max(lam * 1.1, m.idio_var.maxCoeff());
}

/// Equality-constrained solve on the free set: H = 2λΣ_FF.
class FreeSetSolver {
public:
    FreeSetSolver(const FactorRiskModel& m, double lambda) : m_(m), lambda_(lambda) {}

    /// Returns (w_F, ν) for stationarity H w_F = c − ν·1 and 1ᵀw_F = s.
    std::pair<VectorXd, double> solve(const std::vector<Index>& F, const VectorXd& c, double s) const {
        const Index nf = static_cast<Index>(F.size());
        const Index K = static_cast<Index>(m_.factors.size());
        MatrixXd rhs(nf, 2);
        rhs.col(0) = c;
        rhs.col(1).setOnes();
        MatrixXd sol;
        bool woodbury = true;
        for (auto i : F) woodbury = woodbury && m_.idio_var(i) > 0.0;
        if (woodbury) {
            VectorXd dinv(nf);
            MatrixXd B(nf, K);
            for (Index r = 0; r < nf; ++r) {
                dinv(r) = 1.0 / m_.idio_var(F[static_cast<std::size_t>(r)]);
                if (K) B.row(r) = m_.exposures.row(F[static_cast<std::size_t>(r)]);
            }
            // Σ⁻¹ = D⁻¹ − D⁻¹B F̃ (I + BᵀD⁻¹B F̃)⁻¹ BᵀD⁻¹
            MatrixXd Dr = dinv.asDiagonal() * rhs;
            sol = Dr;
            if (K) {
                MatrixXd BtDinvB = B.transpose() * dinv.asDiagonal() * B;
                MatrixXd M = MatrixXd::Identity(K, K) + BtDinvB * m_.factor_cov;
                Eigen::PartialPivLU<MatrixXd> lu(M);
                sol -= dinv.asDiagonal() * (B * (m_.factor_cov * lu.solve(B.transpose() * Dr)));
            }
        } else {
            MatrixXd S(nf, nf);
            for (Index a = 0; a < nf; ++a)
                for (Index b = 0; b < nf; ++b) {
                    const Index i = F[static_cast<std::size_t>(a)], j = F[static_cast<std::size_t>(b)];
                    S(a, b) = K ? m_.exposures.row(i) * m_.factor_cov * m_.exposures.row(j).transpose() : 0.0;
                    if (a == b) S(a, b) += m_.idio_var(i);
                }
            Eigen::LDLT<MatrixXd> ldlt(S);
            if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().array() > 1e-14 * S.diagonal().maxCoeff()).all())
                fail(ErrorCode::RiskModelInvalid, "covariance singular on the free set");
            sol = ldlt.solve(rhs);
        }
        sol /= 2.0 * lambda_;
        const double nu = (sol.col(0).sum() - s) / sol.col(1).sum();
        return {sol.col(0) - nu * sol.col(1), nu};
    }

private:
    const FactorRiskModel& m_;
    double lambda_;
};

}  // namespace detail

/// max μᵀw − λ wᵀΣw s.t. 1ᵀw = budget, lo ≤ w ≤ cap, with Σ = B F̃ Bᵀ + D.
/// Accelerated projected gradient finds the active set approximately; a primal
/// active-set method on the factor-form covariance then solves it exactly.
inline OptimResult mv_optimize(const VectorXd& mu, const FactorRiskModel& model, const OptimizerConfig& cfg) {
    cfg.validate();
    model.validate();
    const Index n = model.size();
    if (mu.size() != n) fail(ErrorCode::ShapeError, "expected returns not aligned with risk model");
    if (!mu.allFinite()) fail(ErrorCode::InvalidArgument, "expected returns must be finite");
    const double lo = cfg.lower(), hi = cfg.cap, lam = cfg.risk_aversion;
    if (n == 0 || hi * static_cast<double>(n) < cfg.budget - 1e-12 || lo * static_cast<double>(n) > cfg.budget)
        fail(ErrorCode::Infeasible, "cap " + std::to_string(hi) + " × " + std::to_string(n) + " names cannot reach budget");

    FactorRiskModel m = model;
    m.factor_cov = shrink_factor_cov(model.factor_cov, cfg.shrinkage);
    m.validate();
    auto grad = [&](const VectorXd& w) -> VectorXd { return mu - 2.0 * lam * m.cov_times(w); };

    OptimResult res;
    // warm start
    const double L = 2.0 * lam * detail::spectral_bound(m);
    VectorXd x = detail::project_capped_simplex(VectorXd::Constant(n, cfg.budget / static_cast<double>(n)), lo, hi,
                                                cfg.budget);
    if (L > 0.0) {
        VectorXd y = x;
        double t = 1.0;
        std::vector<signed char> pattern(static_cast<std::size_t>(n), 2);
        int stable = 0;
        for (int k = 0; k < cfg.warm_iterations; ++k) {
            VectorXd xn = detail::project_capped_simplex(y + grad(y) / L, lo, hi, cfg.budget);
            const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
            const double step = (xn - x).cwiseAbs().maxCoeff();
            y = xn + ((t - 1.0) / tn) * (xn - x);
            x = std::move(xn);
            t = tn;
            res.warm_iterations = k + 1;
            if (step < 1e-13) break;
            // the active-set phase only needs the bound pattern
            bool same = true;
            for (Index i = 0; i < n; ++i) {
                const signed char p = x(i) <= lo + 1e-14 ? -1 : x(i) >= hi - 1e-14 ? 1 : 0;
                same = same && p == pattern[static_cast<std::size_t>(i)];
                pattern[static_cast<std::size_t>(i)] = p;
            }
            stable = same ? stable + 1 : 0;
            if (stable >= cfg.warm_patience) break;
        }
    }

    // active set: −1 at lower bound, +1 at cap, 0 free
    std::vector<int> state(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
        if (x(i) <= lo + 1e-14) {
            state[static_cast<std::size_t>(i)] = -1;
            x(i) = lo;
        } else if (x(i) >= hi - 1e-14) {
            state[static_cast<std::size_t>(i)] = 1;
            x(i) = hi;
        }
    }
    detail::FreeSetSolver solver(m, lam);
    const double dual_tol = 0.1 * cfg.kkt_tolerance;
    const int max_iter = static_cast<int>(10 * n + 100);
    double nu = 0.0;
    bool converged = false;
    for (int it = 0; it < max_iter && !converged; ++it) {
        res.active_set_iterations = it + 1;
        std::vector<Index> F;
        for (Index i = 0; i < n; ++i)
            if (state[static_cast<std::size_t>(i)] == 0) F.push_back(i);
        if (F.empty()) {
            // release the bound whose gradient most favours moving inward
            VectorXd g = grad(x);
            Index best = -1;
            double bv = -INFINITY;
            for (Index i = 0; i < n; ++i) {
                double v = state[static_cast<std::size_t>(i)] < 0 ? g(i) : -g(i);
                if (v > bv) {
                    bv = v;
                    best = i;
                }
            }
            state[static_cast<std::size_t>(best)] = 0;
            continue;
        }
        VectorXd wb = x;
        for (auto i : F) wb(i) = 0.0;
        const VectorXd cross = m.cov_times(wb);
        VectorXd c(static_cast<Index>(F.size()));
        for (std::size_t r = 0; r < F.size(); ++r) c(static_cast<Index>(r)) = mu(F[r]) - 2.0 * lam * cross(F[r]);
        const double s = cfg.budget - wb.sum();
        auto [wf, nu_f] = solver.solve(F, c, s);

        double alpha = 1.0;
        Index block = -1;
        int block_state = 0;
        for (std::size_t r = 0; r < F.size(); ++r) {
            const Index i = F[r];
            const double cur = x(i), tgt = wf(static_cast<Index>(r));
            if (tgt < lo && cur > tgt) {
                double a = (cur - lo) / (cur - tgt);
                if (a < alpha) {
                    alpha = a;
                    block = i;
                    block_state = -1;
                }
            } else if (tgt > hi && tgt > cur) {
                double a = (hi - cur) / (tgt - cur);
                if (a < alpha) {
                    alpha = a;
                    block = i;
                    block_state = 1;
                }
            }
        }
        if (block >= 0) {
            alpha = std::max(0.0, alpha);
            for (std::size_t r = 0; r < F.size(); ++r)
                x(F[r]) += alpha * (wf(static_cast<Index>(r)) - x(F[r]));
            state[static_cast<std::size_t>(block)] = block_state;
            x(block) = block_state < 0 ? lo : hi;
            continue;
        }
        for (std::size_t r = 0; r < F.size(); ++r) x(F[r]) = wf(static_cast<Index>(r));
        nu = nu_f;
        VectorXd g = grad(x);
        Index worst = -1;
        double wv = dual_tol;
        for (Index i = 0; i < n; ++i) {
            const int st = state[static_cast<std::size_t>(i)];
            const double v = st < 0 ? g(i) - nu : st > 0 ? nu - g(i) : 0.0;
            if (v > wv) {
                wv = v;
                worst = i;
            }
        }
        if (worst < 0) converged = true;
        else state[static_cast<std::size_t>(worst)] = 0;
    }
    for (Index i = 0; i < n; ++i) x(i) = std::clamp(x(i), lo, hi);
    res.weights = x;
    res.kkt_residual = kkt_residual(x, grad(x), lo, hi, &res.nu);
    if (converged) res.nu = nu;
    return res;
}

// ---------------------------------------------------------------------------
// Analytics

struct PerfStats {
    double ann_return = 0.0;
    double ann_vol = 0.0;
    double sharpe = 0.0;
    double max_drawdown = 0.0;
    std::size_t periods = 0;
};

/// Most negative V_t / max_{s≤t} V_s − 1 along the compounded value path starting at 1.
inline double max_drawdown(std::span<const double> r) {
    double v = 1.0, peak = 1.0, mdd = 0.0;
    for (double x : r) {
        v *= 1.0 + x;
        peak = std::max(peak, v);
        mdd = std::min(mdd, v / peak - 1.0);
    }
    return mdd;
}

/// Monthly series, risk-free rate zero.
inline PerfStats perf_stats(std::span<const double> monthly) {
    if (monthly.size() < 2) fail(ErrorCode::InsufficientData, "performance needs at least two periods");
    PerfStats p;
    p.periods = monthly.size();
    const double m = mean(monthly);
    const double sd = std::sqrt(sample_variance(monthly));
    p.ann_return = 12.0 * m;
    p.ann_vol = sd * std::sqrt(12.0);
    p.max_drawdown = max_drawdown(monthly);
    if (!(sd > 1e-14 * std::max(1.0, std::abs(m)))) fail(ErrorCode::SharpeUndefined, "zero volatility");
    p.sharpe = p.ann_return / p.ann_vol;
    return p;
}

/// One-way turnover 0.5·Σ|w_next − w_prev| over the union of names.
inline double turnover(const std::map<std::string, double>& prev, const std::map<std::string, double>& next) {
    double s = 0.0;
    for (const auto& [k, v] : prev) {
        auto it = next.find(k);
        s += std::abs((it == next.end() ? 0.0 : it->second) - v);
    }
    for (const auto& [k, v] : next)
        if (!prev.count(k)) s += std::abs(v);
    return 0.5 * s;
}

/// Annualised cost drag: 12 · round-trip cost · mean monthly one-way turnover.
inline double annual_cost_drag(std::span<const double> monthly_turnover, double round_trip_cost) {
    if (monthly_turnover.empty()) return 0.0;
    return 12.0 * round_trip_cost * mean(monthly_turnover);
}

// ---------------------------------------------------------------------------
// Backtest

struct Signal {
    panel::Cutoff cutoff;
    Date analysis_date;
    std::map<std::string, double> scores;  // sector-neutral z-score per firm
};

class RiskModelSeries {
public:
    void add(Date d, FactorRiskModel m) { models_.insert_or_assign(d, std::move(m)); }

    /// Latest model dated on or before d.
    const FactorRiskModel& as_of(const Date& d) const {
        auto it = models_.upper_bound(d);
        if (it == models_.begin()) fail(ErrorCode::InsufficientData, "no risk model on or before " + d.iso());
        return std::prev(it)->second;
    }

    bool empty() const { return models_.empty(); }
    std::size_t size() const { return models_.size(); }

    /// Subdirectories named YYYY-MM-DD under root.
    static RiskModelSeries load(const std::filesystem::path& root) {
        RiskModelSeries s;
        if (!std::filesystem::is_directory(root)) fail(ErrorCode::IoError, "no risk model directory " + root.string());
        std::vector<std::filesystem::path> dirs;
        for (const auto& e : std::filesystem::directory_iterator(root))
            if (e.is_directory()) dirs.push_back(e.path());
        std::sort(dirs.begin(), dirs.end());
        for (const auto& d : dirs) s.add(Date::parse(d.filename().string()), load_risk_model(d));
        return s;
    }

private:
    std::map<Date, FactorRiskModel> models_;
};

struct BacktestConfig {
    OptimizerConfig optimizer{};
    int signal_life = 12;
    double round_trip_cost = 0.002;
    std::vector<std::string> capability_order;
};

struct LedgerRow {
    std::string book;
    std::size_t period = 0;
    Date start;
    Date end;
    std::string signal;  // model whose signal was live
    std::size_t positions = 0;
    double turnover = 0.0;
    bool formation = false;
    double gross = 0.0;
    double cost = 0.0;
    double net = 0.0;
    double benchmark = 0.0;
    double kkt_residual = 0.0;
};

struct BookSummary {
    std::string book;
    std::size_t months = 0;
    std::optional<PerfStats> gross;
    std::optional<PerfStats> net;
    std::optional<PerfStats> benchmark;
    double avg_turnover = 0.0;  // excludes formation rebalances
    double ann_cost_drag = 0.0;
    std::string note;
};

struct BookResult {
    std::vector<LedgerRow> ledger;
    BookSummary summary;
};

/// Last trading day of each calendar month that ends after `after`. The final
/// calendar day counts as a month end.
inline std::vector<Date> month_ends_after(const panel::TradingCalendar& cal, const Date& after) {
    std::vector<Date> out;
    for (std::size_t i = 0; i < cal.size(); ++i) {
        const bool last = i + 1 == cal.size() || cal[i + 1].month() != cal[i].month() ||
                          cal[i + 1].year() != cal[i].year();
        if (last && after < cal[i]) out.push_back(cal[i]);
    }
    return out;
}

/// Rebalance dates r_0..r_L for a signal: the analysis date then the following month ends.
inline std::vector<Date> signal_schedule(const panel::TradingCalendar& cal, const Date& start, int life) {
    if (life < 1) fail(ErrorCode::InvalidArgument, "signal life must be ≥ 1");
    std::vector<Date> out{start};
    auto me = month_ends_after(cal, start);
    for (std::size_t j = 0; j < me.size() && static_cast<int>(out.size()) <= life; ++j) out.push_back(me[j]);
    return out;
}

namespace detail {

struct Segment {
    const Signal* signal;
    Date start;
    Date end;
    bool formation;
};

inline double price_return(const panel::PriceSeries& p, const Date& a, const Date& b) {
    auto p0 = p.as_of(a), p1 = p.as_of(b);
    if (!p0 || !p1 || *p0 <= 0.0) return 0.0;
    return *p1 / *p0 - 1.0;
}

}  // namespace detail

/// Run one book over a schedule of (signal, period) segments.
inline BookResult run_book(const std::string& name, const std::vector<detail::Segment>& segments,
                           const panel::Panel& data, const RiskModelSeries& risk, const BacktestConfig& cfg) {
    BookResult out;
    out.summary.book = name;
    std::map<std::string, double> held;  // drifted weights
    for (const auto& seg : segments) {
        const Signal& sig = *seg.signal;
        const auto& rm = risk.as_of(seg.start);
        std::vector<std::string> ids;
        for (const auto& [firm, z] : sig.scores) {
            auto it = data.prices.find(firm);
            if (it != data.prices.end() && it->second.at(seg.start)) ids.push_back(firm);
        }
        auto sub = rm.select(ids);
        std::vector<double> z;
        z.reserve(sub.firm_ids.size());
        for (const auto& f : sub.firm_ids) z.push_back(sig.scores.at(f));
        auto opt = mv_optimize(expected_returns(z, cfg.optimizer), sub, cfg.optimizer);

        std::map<std::string, double> w;
        for (Index i = 0; i < sub.size(); ++i)
            if (opt.weights(i) != 0.0) w[sub.firm_ids[static_cast<std::size_t>(i)]] = opt.weights(i);

        LedgerRow row;
        row.book = name;
        row.period = out.ledger.size();
        row.start = seg.start;
        row.end = seg.end;
        row.signal = sig.cutoff.model_name;
        row.positions = w.size();
        row.formation = seg.formation;
        row.turnover = turnover(seg.formation ? std::map<std::string, double>{} : held, w);
        row.kkt_residual = opt.kkt_residual;

        double gross = 0.0, bench = 0.0;
        std::map<std::string, double> rets;
        for (const auto& f : sub.firm_ids) {
            double r = detail::price_return(data.prices.at(f), seg.start, seg.end);
            rets[f] = r;
            bench += r;
        }
        bench /= static_cast<double>(std::max<std::size_t>(1, sub.firm_ids.size()));
        for (const auto& [f, wi] : w) gross += wi * rets[f];
        held.clear();
        for (const auto& [f, wi] : w) held[f] = wi * (1.0 + rets[f]) / (1.0 + gross);

        row.gross = gross;
        row.cost = row.turnover * cfg.round_trip_cost;
        row.net = gross - row.cost;
        row.benchmark = bench;
        out.ledger.push_back(row);
    }

    auto& s = out.summary;
    s.months = out.ledger.size();
    std::vector<double> g, n, b, to, all_to;
    for (const auto& r : out.ledger) {
        g.push_back(r.gross);
        n.push_back(r.net);
        b.push_back(r.benchmark);
        all_to.push_back(r.turnover);
        if (!r.formation) to.push_back(r.turnover);
    }
    s.avg_turnover = to.empty() ? 0.0 : mean(to);
    // the formation trade is charged, so it counts toward the drag
    s.ann_cost_drag = annual_cost_drag(all_to, cfg.round_trip_cost);
    auto stats = [&](const std::vector<double>& x, std::optional<PerfStats>& dst, const char* label) {
        try {
            dst = perf_stats(x);
        } catch (const Error& e) {
            s.note += std::string(s.note.empty() ? "" : "; ") + label + ": " + std::string(to_string(e.code()));
        }
    };
    stats(g, s.gross, "gross");
    stats(n, s.net, "net");
    stats(b, s.benchmark, "benchmark");
    return out;
}

struct BacktestResult {
    std::vector<BookResult> books;  // per signal in input order, then the aggregate
};

/// Per-model books for every signal plus an aggregate book that trades, at each
/// rebalance date, the newest live signal among one-model-per-cutoff picks.
/// A signal lives from its analysis date through `signal_life` holding periods.
inline BacktestResult run_backtest(const panel::Panel& data, const std::vector<Signal>& signals,
                                   const RiskModelSeries& risk, const BacktestConfig& cfg) {
    BacktestResult res;
    auto segments_for = [&](const Signal& s) {
        auto sched = signal_schedule(data.calendar, s.analysis_date, cfg.signal_life);
        std::vector<detail::Segment> segs;
        for (std::size_t j = 0; j + 1 < sched.size(); ++j) segs.push_back({&s, sched[j], sched[j + 1], j == 0});
        return segs;
    };
    for (const auto& s : signals) {
        auto segs = segments_for(s);
        if (segs.empty()) fail(ErrorCode::InsufficientData, s.cutoff.model_name + ": no holding period in calendar");
        res.books.push_back(run_book(s.cutoff.model_name, segs, data, risk, cfg));
    }

    // aggregate: one model per cutoff date
    std::map<long, const Signal*> picks;
    for (const auto& s : signals) {
        auto& slot = picks[s.cutoff.knowledge_cutoff.serial()];
        auto rank = [&](const Signal* x) {
            auto it = std::find(cfg.capability_order.begin(), cfg.capability_order.end(), x->cutoff.model_name);
            return static_cast<std::size_t>(it - cfg.capability_order.begin());
        };
        if (!slot || rank(&s) < rank(slot) ||
            (rank(&s) == rank(slot) && s.cutoff.model_name < slot->cutoff.model_name))
            slot = &s;
    }
    std::vector<std::pair<const Signal*, std::vector<Date>>> live;
    std::vector<Date> dates;
    for (const auto& [t, s] : picks) {
        auto sched = signal_schedule(data.calendar, s->analysis_date, cfg.signal_life);
        if (sched.size() < 2) continue;
        dates.insert(dates.end(), sched.begin(), sched.end());
        live.emplace_back(s, std::move(sched));
    }
    std::sort(dates.begin(), dates.end());
    dates.erase(std::unique(dates.begin(), dates.end()), dates.end());
    std::vector<detail::Segment> agg;
    for (std::size_t k = 0; k + 1 < dates.size(); ++k) {
        const Signal* cur = nullptr;
        for (const auto& [s, sched] : live)
            if (!(dates[k] < sched.front()) && dates[k] < sched.back() &&
                (!cur || cur->analysis_date < s->analysis_date))
                cur = s;
        if (!cur) continue;
        const bool formation = agg.empty() || agg.back().end != dates[k];
        agg.push_back({cur, dates[k], dates[k + 1], formation});
    }
    if (!agg.empty()) res.books.push_back(run_book("aggregate", agg, data, risk, cfg));
    return res;
}

}  // namespace capsule::portfolio

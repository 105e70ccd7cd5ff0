#pragma once

// Cross-sectional and pooled OLS with iid, HC, cluster and Driscoll–Kraay
// covariances; Fama–MacBeth with Newey–West; bootstrap; Spearman; Wald tests.

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/distributions/fisher_f.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "capsule/core/error.hpp"
#include "capsule/core/rng.hpp"
#include "capsule/core/series.hpp"
#include "capsule/dataset.hpp"

namespace capsule::econ {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Design

enum class Dim { Model, Sector, Firm, Time };

inline std::string to_string(Dim d) {
    switch (d) {
        case Dim::Model: return "model";
        case Dim::Sector: return "sector";
        case Dim::Firm: return "firm";
        case Dim::Time: return "time";
    }
    return "";
}

struct Interaction {
    std::string left;
    std::string right;
    std::string name() const { return left + "_x_" + right; }
};

struct DesignSpec {
    std::string response;
    std::string predictor;  // may be empty
    std::vector<std::string> controls;
    std::vector<Interaction> interactions;
    std::vector<Dim> fixed_effects;
    bool intercept = true;

    /// Slope columns in design order: predictor, controls, interactions.
    std::vector<std::string> regressors() const {
        std::vector<std::string> out;
        if (!predictor.empty()) out.push_back(predictor);
        out.insert(out.end(), controls.begin(), controls.end());
        for (const auto& i : interactions) out.push_back(i.name());
        return out;
    }

    void validate() const {
        if (response.empty()) fail(ErrorCode::InvalidArgument, "design has no response");
        auto names = regressors();
        std::vector<std::string> sorted = names;
        sorted.push_back(response);
        std::sort(sorted.begin(), sorted.end());
        if (auto it = std::adjacent_find(sorted.begin(), sorted.end()); it != sorted.end())
            fail(ErrorCode::InvalidArgument, "duplicate design column '" + *it + "'");
        auto declared = [&](const std::string& c) {
            return c == predictor || std::find(controls.begin(), controls.end(), c) != controls.end();
        };
        for (const auto& i : interactions)
            if (!declared(i.left) || !declared(i.right))
                fail(ErrorCode::InvalidArgument, "interaction " + i.name() + " references an undeclared column");
        auto fe = fixed_effects;
        std::sort(fe.begin(), fe.end());
        if (std::adjacent_find(fe.begin(), fe.end()) != fe.end())
            fail(ErrorCode::InvalidArgument, "duplicate fixed-effect dimension");
    }
};

struct Design {
    VectorXd y;
    MatrixXd X;
    std::vector<std::string> names;
    std::vector<std::size_t> rows;  // source row of each observation
    std::vector<std::string> firm_ids, sectors, models;
    std::vector<long> times;
    bool intercept = true;

    std::vector<std::string> labels(Dim d) const {
        switch (d) {
            case Dim::Model: return models;
            case Dim::Sector: return sectors;
            case Dim::Firm: return firm_ids;
            case Dim::Time: break;
        }
        std::vector<std::string> out;
        out.reserve(times.size());
        for (long t : times) out.push_back(std::to_string(t));
        return out;
    }
};

inline std::string fe_name(Dim d, const std::string& level) { return "fe_" + to_string(d) + "[" + level + "]"; }

inline Design build_design(const CrossSection& cs, const DesignSpec& spec) {
    spec.validate();
    const auto& y = cs.column(spec.response);
    std::vector<const OptSeries*> base;
    std::vector<std::string> base_names;
    for (const auto& c : spec.regressors()) {
        auto it = std::find_if(spec.interactions.begin(), spec.interactions.end(),
                               [&](const Interaction& i) { return i.name() == c; });
        if (it != spec.interactions.end()) continue;
        base.push_back(&cs.column(c));
        base_names.push_back(c);
    }
    auto col_index = [&](const std::string& c) {
        return static_cast<std::size_t>(std::find(base_names.begin(), base_names.end(), c) - base_names.begin());
    };

    Design d;
    d.intercept = spec.intercept;
    for (std::size_t i = 0; i < cs.rows(); ++i) {
        bool ok = y[i].has_value();
        for (const auto* c : base) ok = ok && (*c)[i].has_value();
        if (ok) d.rows.push_back(i);
    }
    if (d.rows.empty()) fail(ErrorCode::EmptyDesign, "no complete rows for " + spec.response);

    for (auto i : d.rows) {
        d.firm_ids.push_back(cs.firm_ids[i]);
        d.sectors.push_back(cs.sectors[i]);
        d.models.push_back(cs.models[i]);
        d.times.push_back(cs.times[i]);
    }

    // fixed-effect levels among retained rows, first level dropped when redundant
    struct FeBlock {
        Dim dim;
        std::vector<std::string> labels;
        std::vector<std::string> levels;
    };
    std::vector<FeBlock> fe;
    bool absorbed = spec.intercept;
    for (auto dim : spec.fixed_effects) {
        FeBlock b{dim, d.labels(dim), {}};
        b.levels = b.labels;
        std::sort(b.levels.begin(), b.levels.end());
        b.levels.erase(std::unique(b.levels.begin(), b.levels.end()), b.levels.end());
        if (absorbed) b.levels.erase(b.levels.begin());
        absorbed = true;
        fe.push_back(std::move(b));
    }

    if (spec.intercept) d.names.push_back("const");
    for (const auto& c : spec.regressors()) d.names.push_back(c);
    for (const auto& b : fe)
        for (const auto& l : b.levels) d.names.push_back(fe_name(b.dim, l));

    const auto n = static_cast<Index>(d.rows.size());
    d.y.resize(n);
    d.X.setZero(n, static_cast<Index>(d.names.size()));
    for (Index r = 0; r < n; ++r) {
        const auto i = d.rows[static_cast<std::size_t>(r)];
        d.y(r) = *y[i];
        Index c = 0;
        if (spec.intercept) d.X(r, c++) = 1.0;
        if (!spec.predictor.empty()) d.X(r, c++) = *(*base[col_index(spec.predictor)])[i];
        for (const auto& ctl : spec.controls) d.X(r, c++) = *(*base[col_index(ctl)])[i];
        for (const auto& it : spec.interactions)
            d.X(r, c++) = *(*base[col_index(it.left)])[i] * *(*base[col_index(it.right)])[i];
        for (const auto& b : fe) {
            const auto& lab = b.labels[static_cast<std::size_t>(r)];
            auto pos = std::lower_bound(b.levels.begin(), b.levels.end(), lab);
            if (pos != b.levels.end() && *pos == lab) d.X(r, c + (pos - b.levels.begin())) = 1.0;
            c += static_cast<Index>(b.levels.size());
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// OLS core and covariance estimators

struct OlsCore {
    VectorXd beta;
    VectorXd residuals;
    MatrixXd bread;  // (XᵀX)⁻¹
    Index n = 0;
    Index k = 0;
};

inline constexpr double kRankTolerance = 1e-10;

/// Least squares via column-pivoted QR. Rank is judged by the singular values of R.
inline OlsCore ols_core(const VectorXd& y, const MatrixXd& X, const std::vector<std::string>& names = {}) {
    const Index n = X.rows(), k = X.cols();
    if (n == 0 || k == 0) fail(ErrorCode::EmptyDesign, "empty design matrix");
    if (y.size() != n) fail(ErrorCode::ShapeError, "response length differs from design rows");
    auto col_name = [&](Index j) {
        return static_cast<std::size_t>(j) < names.size() ? names[static_cast<std::size_t>(j)]
                                                            : "x" + std::to_string(j);
    };
    if (n < k) fail(ErrorCode::RankDeficient, "fewer rows (" + std::to_string(n) + ") than columns");

    Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
    MatrixXd R = qr.matrixR().topLeftCorner(k, k).triangularView<Eigen::Upper>();
    Eigen::JacobiSVD<MatrixXd> svd(R);
    const auto& sv = svd.singularValues();
    const double cut = kRankTolerance * sv(0);
    if (!(sv(k - 1) > cut)) {
        Index rank = 0;
        for (Index j = 0; j < k; ++j)
            if (std::abs(R(j, j)) > cut) ++rank;
        rank = std::min(rank, k - 1);
        std::string cols;
        const auto& perm = qr.colsPermutation().indices();
        for (Index j = rank; j < k; ++j) cols += (cols.empty() ? "" : ", ") + col_name(perm(j));
        fail(ErrorCode::RankDeficient, "collinear columns: " + cols);
    }

    OlsCore c;
    c.n = n;
    c.k = k;
    c.beta = qr.solve(y);
    c.residuals = y - X * c.beta;
    MatrixXd Rinv = R.triangularView<Eigen::Upper>().solve(MatrixXd::Identity(k, k));
    MatrixXd inner = Rinv * Rinv.transpose();
    const auto& P = qr.colsPermutation();
    c.bread = P * inner * P.transpose();
    c.bread = 0.5 * (c.bread + c.bread.transpose());
    return c;
}

inline MatrixXd iid_cov(const OlsCore& c) {
    if (c.n <= c.k) fail(ErrorCode::InsufficientData, "no residual degrees of freedom");
    const double s2 = c.residuals.squaredNorm() / static_cast<double>(c.n - c.k);
    return s2 * c.bread;
}

namespace detail {
inline MatrixXd sandwich(const MatrixXd& bread, const MatrixXd& meat) {
    MatrixXd v = bread * meat * bread;
    return 0.5 * (v + v.transpose());
}

/// Group index per row; groups numbered by first label in sorted order.
inline std::vector<Index> group_ids(const std::vector<std::string>& labels, Index& count) {
    std::vector<std::string> levels = labels;
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    count = static_cast<Index>(levels.size());
    std::vector<Index> ids(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i)
        ids[i] = std::lower_bound(levels.begin(), levels.end(), labels[i]) - levels.begin();
    return ids;
}
}  // namespace detail

inline MatrixXd hc0_cov(const OlsCore& c, const MatrixXd& X) {
    MatrixXd meat = X.transpose() * c.residuals.array().square().matrix().asDiagonal() * X;
    return detail::sandwich(c.bread, meat);
}

inline MatrixXd hc1_cov(const OlsCore& c, const MatrixXd& X) {
    if (c.n <= c.k) fail(ErrorCode::InsufficientData, "no residual degrees of freedom");
    return static_cast<double>(c.n) / static_cast<double>(c.n - c.k) * hc0_cov(c, X);
}

/// Cluster-robust sandwich with G/(G−1)·(n−1)/(n−k) small-sample factor.
inline MatrixXd cluster_cov(const OlsCore& c, const MatrixXd& X, const std::vector<std::string>& groups,
                            Index* group_count = nullptr) {
    if (static_cast<Index>(groups.size()) != c.n) fail(ErrorCode::ShapeError, "cluster labels not aligned");
    Index G = 0;
    auto ids = detail::group_ids(groups, G);
    if (G < 2) fail(ErrorCode::InsufficientData, "clustering needs at least two groups");
    if (c.n <= c.k) fail(ErrorCode::InsufficientData, "no residual degrees of freedom");
    MatrixXd scores = MatrixXd::Zero(G, c.k);
    for (Index i = 0; i < c.n; ++i) scores.row(ids[static_cast<std::size_t>(i)]) += c.residuals(i) * X.row(i);
    MatrixXd meat = scores.transpose() * scores;
    const double g = static_cast<double>(G), n = static_cast<double>(c.n), k = static_cast<double>(c.k);
    if (group_count) *group_count = G;
    return (g / (g - 1.0)) * ((n - 1.0) / (n - k)) * detail::sandwich(c.bread, meat);
}

/// Driscoll–Kraay: scores summed per time period, Bartlett HAC across periods.
/// No small-sample factor is applied.
inline MatrixXd driscoll_kraay_cov(const OlsCore& c, const MatrixXd& X, const std::vector<long>& times, int lag,
                                   Index* period_count = nullptr) {
    if (static_cast<Index>(times.size()) != c.n) fail(ErrorCode::ShapeError, "time labels not aligned");
    if (lag < 0) fail(ErrorCode::InvalidArgument, "negative lag");
    std::vector<long> levels = times;
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    const auto T = static_cast<Index>(levels.size());
    if (T <= 1) fail(ErrorCode::DegenerateTimeDimension, "Driscoll–Kraay needs more than one period");
    MatrixXd h = MatrixXd::Zero(T, c.k);
    for (Index i = 0; i < c.n; ++i) {
        auto t = std::lower_bound(levels.begin(), levels.end(), times[static_cast<std::size_t>(i)]) - levels.begin();
        h.row(t) += c.residuals(i) * X.row(i);
    }
    MatrixXd omega = h.transpose() * h;
    for (int l = 1; l <= lag && l < T; ++l) {
        const double w = 1.0 - static_cast<double>(l) / static_cast<double>(lag + 1);
        MatrixXd g = h.bottomRows(T - l).transpose() * h.topRows(T - l);
        omega += w * (g + g.transpose());
    }
    if (period_count) *period_count = T;
    return detail::sandwich(c.bread, omega);
}

// ---------------------------------------------------------------------------
// Fitted regressions

struct Iid {};
struct Hc1 {};
struct Cluster {
    Dim by = Dim::Model;
};
struct DriscollKraay {
    int lag = 1;
};
using CovScheme = std::variant<Iid, Hc1, Cluster, DriscollKraay>;

inline std::string describe(const CovScheme& s) {
    return std::visit(
        [](const auto& v) -> std::string {
            using T = std::decay_t<decltype(v)>;
            if constexpr (std::is_same_v<T, Iid>) return "iid";
            else if constexpr (std::is_same_v<T, Hc1>) return "HC1";
            else if constexpr (std::is_same_v<T, Cluster>) return "cluster(" + to_string(v.by) + ")";
            else return "driscoll_kraay(" + std::to_string(v.lag) + ")";
        },
        s);
}

struct RegressionFit {
    std::vector<std::string> names;
    VectorXd beta;
    MatrixXd cov;
    VectorXd residuals;
    Index n = 0;
    Index k = 0;
    double r2 = 0.0;
    std::string scheme;
    Index groups = 0;            // clusters or time periods, 0 for iid/HC1
    double df = 0.0;             // degrees of freedom of the reference t distribution
    double df_resid = 0.0;       // n − k

    Index index(const std::string& name) const {
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) fail(ErrorCode::InvalidArgument, "no coefficient '" + name + "'");
        return it - names.begin();
    }
    double coef(const std::string& name) const { return beta(index(name)); }
    double se(const std::string& name) const {
        auto j = index(name);
        return std::sqrt(std::max(0.0, cov(j, j)));
    }
    double t(const std::string& name) const { return coef(name) / se(name); }
    double p(const std::string& name) const {
        double tv = t(name);
        if (!(df > 0.0) || !std::isfinite(tv)) return kNaN;
        boost::math::students_t dist(df);
        return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(tv)));
    }
};

namespace detail {
inline double r_squared(const VectorXd& y, const VectorXd& e, bool centered) {
    double tss = centered ? (y.array() - y.mean()).square().sum() : y.squaredNorm();
    if (tss == 0.0) return e.squaredNorm() == 0.0 ? 1.0 : 0.0;
    return 1.0 - e.squaredNorm() / tss;
}
}  // namespace detail

/// Fit with labels for grouped schemes passed explicitly.
inline RegressionFit ols_fit(const VectorXd& y, const MatrixXd& X, const CovScheme& scheme,
                             const std::vector<std::string>& names = {},
                             const std::vector<std::string>& cluster_labels = {},
                             const std::vector<long>& time_labels = {}, bool centered_r2 = true) {
    auto c = ols_core(y, X, names);
    RegressionFit f;
    f.names = names;
    if (f.names.empty())
        for (Index j = 0; j < X.cols(); ++j) f.names.push_back("x" + std::to_string(j));
    f.beta = c.beta;
    f.residuals = c.residuals;
    f.n = c.n;
    f.k = c.k;
    f.df_resid = static_cast<double>(c.n - c.k);
    f.r2 = detail::r_squared(y, c.residuals, centered_r2);
    f.scheme = describe(scheme);
    std::visit(
        [&](const auto& s) {
            using T = std::decay_t<decltype(s)>;
            if constexpr (std::is_same_v<T, Iid>) {
                f.cov = iid_cov(c);
                f.df = f.df_resid;
            } else if constexpr (std::is_same_v<T, Hc1>) {
                f.cov = hc1_cov(c, X);
                f.df = f.df_resid;
            } else if constexpr (std::is_same_v<T, Cluster>) {
                f.cov = cluster_cov(c, X, cluster_labels, &f.groups);
                f.df = static_cast<double>(f.groups - 1);
            } else {
                f.cov = driscoll_kraay_cov(c, X, time_labels, s.lag, &f.groups);
                f.df = static_cast<double>(f.groups - 1);
            }
        },
        scheme);
    return f;
}

inline RegressionFit fit(const CrossSection& cs, const DesignSpec& spec, const CovScheme& scheme) {
    auto d = build_design(cs, spec);
    std::vector<std::string> clusters;
    if (auto* cl = std::get_if<Cluster>(&scheme)) clusters = d.labels(cl->by);
    return ols_fit(d.y, d.X, scheme, d.names, clusters, d.times, d.intercept);
}

// ---------------------------------------------------------------------------
// Wald restriction test

struct WaldResult {
    double f = 0.0;
    double p = 1.0;
    Index df1 = 0;
    double df2 = 0.0;
};

/// H0: Rβ = q, F = (Rβ−q)ᵀ[RVRᵀ]⁻¹(Rβ−q)/r against F(r, n−k).
inline WaldResult wald_restriction(const RegressionFit& fit, const MatrixXd& R, const VectorXd& q) {
    if (R.cols() != fit.beta.size() || R.rows() != q.size() || R.rows() == 0)
        fail(ErrorCode::ShapeError, "restriction dimensions do not conform");
    MatrixXd M = R * fit.cov * R.transpose();
    Eigen::FullPivLU<MatrixXd> lu(M);
    lu.setThreshold(1e-12);
    if (lu.rank() < R.rows()) fail(ErrorCode::SingularRestriction, "R V Rᵀ is singular");
    VectorXd d = R * fit.beta - q;
    WaldResult w;
    w.df1 = R.rows();
    w.df2 = fit.df_resid;
    w.f = d.dot(lu.solve(d)) / static_cast<double>(w.df1);
    if (w.f <= 0.0) {
        w.f = std::max(0.0, w.f);
        w.p = 1.0;
    } else if (w.df2 > 0.0) {
        boost::math::fisher_f dist(static_cast<double>(w.df1), w.df2);
        w.p = boost::math::cdf(boost::math::complement(dist, w.f));
    } else {
        w.p = kNaN;
    }
    return w;
}

/// H0: β_a = β_b.
inline WaldResult wald_equal(const RegressionFit& fit, const std::string& a, const std::string& b) {
    MatrixXd R = MatrixXd::Zero(1, fit.beta.size());
    R(0, fit.index(a)) = 1.0;
    R(0, fit.index(b)) = -1.0;
    return wald_restriction(fit, R, VectorXd::Zero(1));
}

// ---------------------------------------------------------------------------
// Bootstrap of the mean

struct BootstrapResult {
    double ci_lo = 0.0;
    double ci_hi = 0.0;
    double p_value = 1.0;
    std::size_t resamples = 0;
    std::uint64_t seed = 0;
};

/// Percentile bootstrap of the mean. Resample b draws from its own substream of
/// `seed`, so results do not depend on `threads`.
inline BootstrapResult bootstrap_mean(std::span<const double> values, std::size_t n_resamples,
                                      std::uint64_t seed, unsigned threads = 1) {
    if (values.size() < 2) fail(ErrorCode::InsufficientData, "bootstrap needs at least two values");
    if (n_resamples < 100) fail(ErrorCode::InvalidArgument, "bootstrap needs at least 100 resamples");
    const std::size_t n = values.size();
    std::vector<double> means(n_resamples);
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t b = begin; b < end; ++b) {
            Rng rng(substream_seed(seed, b));
            // deviations from values[0], so constant input reproduces c exactly
            double s = 0.0;
            for (std::size_t i = 0; i < n; ++i) s += values[rng.index(n)] - values[0];
            means[b] = values[0] + s / static_cast<double>(n);
        }
    };
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n_resamples)));
    if (threads == 1) {
        work(0, n_resamples);
    } else {
        std::vector<std::jthread> pool;
        const std::size_t chunk = (n_resamples + threads - 1) / threads;
        for (unsigned t = 0; t < threads; ++t) {
            std::size_t b0 = t * chunk, b1 = std::min(n_resamples, b0 + chunk);
            if (b0 < b1) pool.emplace_back(work, b0, b1);
        }
    }
    std::size_t le = 0, ge = 0;
    for (double m : means) {
        le += m <= 0.0;
        ge += m >= 0.0;
    }
    std::sort(means.begin(), means.end());
    BootstrapResult r;
    r.resamples = n_resamples;
    r.seed = seed;
    r.ci_lo = quantile_sorted(means, 0.025);
    r.ci_hi = quantile_sorted(means, 0.975);
    const double B = static_cast<double>(n_resamples);
    r.p_value = std::clamp(2.0 * std::min(static_cast<double>(le), static_cast<double>(ge)) / B, 2.0 / B, 1.0);
    return r;
}

// ---------------------------------------------------------------------------
// Fama–MacBeth

struct FMResult {
    std::vector<double> coefficients;
    double mean = 0.0;
    double se_iid = 0.0;             // sample std (n−1) / √T
    double se_iid_population = 0.0;  // population std (n) / √T
    double se_nw = 0.0;
    double t_iid = kNaN;
    double t_nw = kNaN;
    double p_iid = kNaN;
    double p_nw = kNaN;
    int lag = 1;
    bool t_undefined = false;  // zero standard error
    std::optional<BootstrapResult> bootstrap;
};

/// Sample autocovariance at lag l, divided by T.
inline double autocovariance(std::span<const double> x, std::size_t l) {
    const double m = mean(x);
    double s = 0.0;
    for (std::size_t t = l; t < x.size(); ++t) s += (x[t] - m) * (x[t - l] - m);
    return s / static_cast<double>(x.size());
}

/// Bartlett-weighted long-run variance of the mean: (γ₀ + 2Σ w_l γ_l)/T.
inline double newey_west_variance_of_mean(std::span<const double> x, int lag) {
    if (lag < 0) fail(ErrorCode::InvalidArgument, "negative lag");
    double v = autocovariance(x, 0);
    for (int l = 1; l <= lag && static_cast<std::size_t>(l) < x.size(); ++l)
        v += 2.0 * (1.0 - static_cast<double>(l) / static_cast<double>(lag + 1)) *
             autocovariance(x, static_cast<std::size_t>(l));
    return std::max(0.0, v) / static_cast<double>(x.size());
}

inline FMResult fama_macbeth(std::span<const double> coefs, int nw_lag = 1) {
    if (coefs.size() < 2) fail(ErrorCode::InsufficientSections, "Fama–MacBeth needs at least two sections");
    FMResult r;
    r.coefficients.assign(coefs.begin(), coefs.end());
    r.lag = nw_lag;
    const double T = static_cast<double>(coefs.size());
    r.mean = mean(coefs);
    r.se_iid = std::sqrt(sample_variance(coefs) / T);
    r.se_iid_population = std::sqrt(population_variance(coefs) / T);
    r.se_nw = std::sqrt(newey_west_variance_of_mean(coefs, nw_lag));
    boost::math::students_t dist(T - 1.0);
    auto two_sided = [&](double t) { return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))); };
    if (r.se_iid > 0.0) {
        r.t_iid = r.mean / r.se_iid;
        r.p_iid = two_sided(r.t_iid);
    } else {
        r.t_undefined = true;
    }
    if (r.se_nw > 0.0) {
        r.t_nw = r.mean / r.se_nw;
        r.p_nw = two_sided(r.t_nw);
    } else {
        r.t_undefined = true;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Spearman rank correlation

inline std::vector<double> average_ranks(std::span<const double> x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return x[a] < x[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t m = i; m <= j; ++m) r[idx[m]] = avg;
        i = j + 1;
    }
    return r;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
    const double mx = mean(x), my = mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return kNaN;
    return sxy / std::sqrt(sxx * syy);
}

struct SpearmanResult {
    double rho = 0.0;
    double p = 1.0;  // exact when n ≤ 8, otherwise asymptotic
    std::optional<double> p_exact;
    double p_asymptotic = 1.0;
    std::size_t n = 0;
};

inline constexpr std::size_t kSpearmanExactMax = 8;

inline SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) fail(ErrorCode::ShapeError, "spearman inputs differ in length");
    if (x.size() < 3) fail(ErrorCode::InsufficientData, "spearman needs at least three pairs");
    const auto rx = average_ranks(x), ry = average_ranks(y);
    SpearmanResult s;
    s.n = x.size();
    s.rho = pearson(rx, ry);
    if (std::isnan(s.rho)) fail(ErrorCode::InsufficientData, "spearman input has no variation");
    const double n = static_cast<double>(s.n);
    if (std::abs(s.rho) >= 1.0) {
        s.p_asymptotic = 0.0;
    } else {
        const double t = s.rho * std::sqrt((n - 2.0) / (1.0 - s.rho * s.rho));
        boost::math::students_t dist(n - 2.0);
        s.p_asymptotic = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    }
    if (s.n <= kSpearmanExactMax) {
        std::vector<double> perm = ry;
        std::sort(perm.begin(), perm.end());
        std::size_t total = 0, extreme = 0;
        const double obs = std::abs(s.rho) - 1e-12;
        do {
            ++total;
            if (std::abs(pearson(rx, perm)) >= obs) ++extreme;
        } while (std::next_permutation(perm.begin(), perm.end()));
        // with tied ranks next_permutation skips duplicates; each distinct arrangement
        // is equally likely so the ratio is unchanged
        s.p_exact = static_cast<double>(extreme) / static_cast<double>(total);
        s.p = *s.p_exact;
    } else {
        s.p = s.p_asymptotic;
    }
    return s;
}

}  // namespace capsule::econ

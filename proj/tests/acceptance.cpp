// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <boost/math/distributions/students_t.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "capsule/pipeline.hpp"
#include "support/oracles.hpp"
#include "support/schema_fuzz.hpp"

using namespace capsule;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
    std::printf("criterion %2d %-34s %s  %s\n", id, name, ok ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
    failures += !ok;
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double max_rel(const MatrixXd& a, const MatrixXd& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1e-300, b.cwiseAbs().maxCoeff());
}

MatrixXd random_matrix(Rng& rng, Index n, Index k) {
    MatrixXd X(n, k);
    for (Index i = 0; i < n; ++i)
        for (Index j = 0; j < k; ++j) X(i, j) = rng.normal();
    return X;
}

double t_quantile(double df, double two_sided) {
    return boost::math::quantile(boost::math::complement(boost::math::students_t(df), two_sided / 2.0));
}

// 1. Planted-signal recovery
void planted_recovery() {
    const auto t0 = std::chrono::steady_clock::now();
    std::size_t inside = 0, total = 0;
    for (std::uint64_t seed = 1; seed <= 200; ++seed) {
        synth::SynthConfig c;
        c.n_firms = 2000;
        c.n_cutoffs = 6;
        c.gamma = 0.012;
        c.seed = seed;
        auto d = synth::generate_panel(c);
        for (const auto& s : synth::build_sections(d)) {
            auto f = econ::fit(s.section, econ::h2_spec(1), econ::Iid{});
            inside += std::abs(f.coef(col::score) - c.gamma) <= 2.0 * f.se(col::score);
            ++total;
        }
    }
    const double secs = seconds_since(t0);
    const double share = static_cast<double>(inside) / static_cast<double>(total);
    report(1, "planted-signal recovery", share >= 0.95 && secs < 60.0,
           fmt("%zu/%zu per-cutoff fits within 2 SE (%.1f%%, need >= 95%%), %.1f s (need < 60 s)", inside, total,
               100.0 * share, secs));
}

// 2. Inference-scheme discrimination: pooled H2 with model effects, 95% t intervals
void scheme_discrimination() {
    std::size_t iid = 0, dk = 0;
    const int runs = 200;
    for (int seed = 1; seed <= runs; ++seed) {
        synth::SynthConfig c;
        c.n_firms = 300;
        c.n_cutoffs = 24;
        c.common_shock_vol = 0.01;
        c.seed = 5000 + static_cast<std::uint64_t>(seed);
        auto d = synth::generate_panel(c);
        std::vector<CrossSection> sections;
        for (auto& s : synth::build_sections(d)) sections.push_back(std::move(s.section));
        const auto pooled = pool(sections);
        const auto spec = econ::h2_spec(1, {econ::Dim::Model});
        auto covers = [&](const econ::RegressionFit& f) {
            return std::abs(f.coef(col::score) - c.gamma) <= t_quantile(f.df, 0.05) * f.se(col::score);
        };
        iid += covers(econ::fit(pooled, spec, econ::Iid{}));
        dk += covers(econ::fit(pooled, spec, econ::DriscollKraay{1}));
    }
    const double ci = static_cast<double>(iid) / runs, cd = static_cast<double>(dk) / runs;
    report(2, "iid vs Driscoll-Kraay coverage", ci < 0.90 && cd >= 0.90 && cd <= 0.99,
           fmt("iid %.1f%% (need < 90%%), DK %.1f%% (need 90-99%%), 200 seeds", 100 * ci, 100 * cd));
}

// 3. OLS oracle equivalence and covariance reductions
void ols_oracle() {
    Rng rng(303);
    double worst_beta = 0.0, worst_red = 0.0;
    for (int rep = 0; rep < 1000; ++rep) {
        const Index n = 8 + static_cast<Index>(rng.index(60));
        const Index k = 1 + static_cast<Index>(rng.index(5));
        MatrixXd X(n, k);
        X << VectorXd::Ones(n), random_matrix(rng, n, k - 1);
        VectorXd y = X * random_matrix(rng, k, 1) + random_matrix(rng, n, 1);
        auto c = econ::ols_core(y, X);
        worst_beta = std::max(worst_beta, max_rel(c.beta, oracle::normal_equations(y, X)));

        std::vector<std::string> singles, periods;
        std::vector<long> own, times;
        const long T = 2 + static_cast<long>(rng.index(6));
        for (Index i = 0; i < n; ++i) {
            singles.push_back(std::to_string(i));
            own.push_back(static_cast<long>(i));
            times.push_back(static_cast<long>(i) % T);
            periods.push_back(std::to_string(static_cast<long>(i) % T));
        }
        worst_red = std::max(worst_red, max_rel(econ::cluster_cov(c, X, singles), econ::hc1_cov(c, X)));
        worst_red = std::max(worst_red, max_rel(econ::driscoll_kraay_cov(c, X, own, 0), econ::hc0_cov(c, X)));
        worst_red = std::max(worst_red, max_rel(econ::driscoll_kraay_cov(c, X, times, 0),
                                                oracle::grouped_sandwich(X, c.residuals, periods)));
    }
    report(3, "OLS oracle equivalence", worst_beta <= 1e-10 && worst_red <= 1e-9,
           fmt("max coef rel err %.2e (need <= 1e-10), max reduction rel err %.2e (need <= 1e-9)", worst_beta,
               worst_red));
}

// 4. ICE-GLS
void ice_gls() {
    using metrics::IceGlsConfig;
    IceGlsConfig cfg;
    double worst_reprice = 0.0;
    std::size_t solved = 0, no_root = 0;
    synth::SynthConfig sc;
    sc.n_firms = 2000;
    sc.n_cutoffs = 2;
    sc.seed = 44;
    auto d = synth::generate_panel(sc);
    for (const auto& s : d.panel.snapshots) {
        if (!s.price || !s.book_value_per_share || !s.eps_fy1 || !s.eps_fy2 || *s.book_value_per_share <= 0) continue;
        try {
            const double r = metrics::ice_gls(s, cfg);
            const double p = oracle::gls_price(*s.book_value_per_share, *s.eps_fy1, *s.eps_fy2, s.ltg_median,
                                               cfg.industry_median_roe, cfg.fade_years, r);
            worst_reprice = std::max(worst_reprice, std::abs(p / *s.price - 1.0));
            ++solved;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::NoRoot) throw;
            ++no_root;
        }
    }

    double worst_flat = 0.0;
    for (double roe : {0.03, 0.08, 0.12, 0.20}) {
        for (double B : {1.0, 10.0, 73.0}) {
            IceGlsConfig fc;
            fc.industry_median_roe = roe;
            panel::FirmSnapshot s;
            s.firm_id = "flat";
            s.price = B;
            s.book_value_per_share = B;
            s.eps_fy1 = roe * B;
            s.eps_fy2 = roe * B * (1 + roe);
            worst_flat = std::max(worst_flat, std::abs(metrics::ice_gls(s, fc) - roe));
        }
    }

    Rng rng(404);
    double worst_grid = 0.0;
    std::size_t grid_firms = 0;
    while (grid_firms < 100) {
        const double B = rng.uniform(5, 50), eps1 = B * rng.uniform(0.02, 0.25);
        const double eps2 = eps1 * (1 + rng.uniform(0, 0.2)), med = rng.uniform(0.04, 0.15);
        const Opt ltg = rng.uniform() < 0.5 ? Opt(rng.uniform(0.0, 0.15)) : std::nullopt;
        const double P = B * rng.uniform(0.5, 4.0);
        IceGlsConfig gc;
        gc.industry_median_roe = med;
        panel::FirmSnapshot s;
        s.firm_id = "grid";
        s.price = P;
        s.book_value_per_share = B;
        s.eps_fy1 = eps1;
        s.eps_fy2 = eps2;
        s.ltg_median = ltg;
        double r;
        try {
            r = metrics::ice_gls(s, gc);
        } catch (const Error&) {
            continue;
        }
        double best = 0.0, best_err = 1e300;
        for (int i = 0; i <= 599000; ++i) {
            const double x = 0.001 + i * 1e-6;
            const double err = std::abs(oracle::gls_price(B, eps1, eps2, ltg, med, 12, x) - P);
            if (err < best_err) best_err = err, best = x;
        }
        worst_grid = std::max(worst_grid, std::abs(r - best));
        ++grid_firms;
    }
    report(4, "ICE-GLS", solved > 0 && worst_reprice <= 1e-6 && worst_flat <= 1e-8 && worst_grid <= 1e-6,
           fmt("%zu synthetic firms solved (%zu without root), reprice rel err %.1e (need <= 1e-6), flat ROE "
               "err %.1e (need <= 1e-8), grid err %.1e on 100 firms (need <= 1e-6)",
               solved, no_root, worst_reprice, worst_flat, worst_grid));
}

// 5. Optimizer
portfolio::FactorRiskModel random_model(Rng& rng, Index n, Index k) {
    portfolio::FactorRiskModel m;
    for (Index i = 0; i < n; ++i) m.firm_ids.push_back("F" + std::to_string(i));
    for (Index j = 0; j < k; ++j) m.factors.push_back("k" + std::to_string(j));
    m.exposures = random_matrix(rng, n, k);
    MatrixXd A(k, k);
    for (Index i = 0; i < k; ++i)
        for (Index j = 0; j < k; ++j) A(i, j) = rng.normal(0.0, 0.03);
    m.factor_cov = A * A.transpose();
    m.idio_var.resize(n);
    for (Index i = 0; i < n; ++i) m.idio_var(i) = std::pow(rng.uniform(0.04, 0.15), 2);
    return m;
}

// Stationarity on the dense shrunk covariance with ν taken from the free assets.
double dense_stationarity(const VectorXd& w, const VectorXd& mu, const portfolio::FactorRiskModel& m,
                          const portfolio::OptimizerConfig& cfg) {
    MatrixXd F = (1.0 - cfg.shrinkage) * m.factor_cov;
    F.diagonal() = m.factor_cov.diagonal();
    MatrixXd S = m.exposures * F * m.exposures.transpose();
    S.diagonal() += m.idio_var;
    const VectorXd g = mu - 2.0 * cfg.risk_aversion * S * w;
    const double lo = cfg.lower(), hi = cfg.cap, tol = 1e-12;
    double nu = 0.0;
    int nf = 0;
    for (Index i = 0; i < w.size(); ++i)
        if (w(i) > lo + tol && w(i) < hi - tol) nu += g(i), ++nf;
    if (nf == 0) return 0.0;
    nu /= nf;
    double worst = 0.0;
    for (Index i = 0; i < w.size(); ++i) {
        const double v = w(i) <= lo + tol ? g(i) - nu : w(i) >= hi - tol ? nu - g(i) : std::abs(g(i) - nu);
        worst = std::max(worst, v);
    }
    return worst;
}

void optimizer() {
    Rng rng(505);
    double worst_kkt = 0.0, worst_dense = 0.0;
    std::size_t violations = 0;
    for (int rep = 0; rep < 500; ++rep) {
        const Index n = 2 + static_cast<Index>(rng.index(499));
        const Index k = 1 + static_cast<Index>(rng.index(10));
        auto m = random_model(rng, n, k);
        portfolio::OptimizerConfig cfg;
        cfg.cap = std::max(0.015, 1.5 / static_cast<double>(n));
        std::vector<double> z(static_cast<std::size_t>(n));
        for (auto& v : z) v = rng.normal() * 1.5;
        const VectorXd mu = portfolio::expected_returns(z, cfg);
        auto r = portfolio::mv_optimize(mu, m, cfg);
        worst_kkt = std::max(worst_kkt, r.kkt_residual);
        worst_dense = std::max(worst_dense, dense_stationarity(r.weights, mu, m, cfg));
        const bool bad = std::abs(r.weights.sum() - cfg.budget) > 1e-10 || r.weights.minCoeff() < 0.0 ||
                         r.weights.maxCoeff() > cfg.cap + 1e-15;
        violations += bad;
    }

    portfolio::FactorRiskModel two;
    two.firm_ids = {"A", "B"};
    two.exposures = MatrixXd::Zero(2, 0);
    two.factor_cov = MatrixXd::Zero(0, 0);
    two.idio_var = VectorXd::Ones(2);
    portfolio::OptimizerConfig cfg;
    cfg.cap = 1.0;
    cfg.shrinkage = 0.0;
    VectorXd mu(2);
    mu << 0.02, 0.01;
    auto hand = portfolio::mv_optimize(mu, two, cfg);
    const double hand_err = std::max(std::abs(hand.weights(0) - 0.5025), std::abs(hand.weights(1) - 0.4975));

    report(5, "optimizer KKT", worst_kkt < 1e-8 && worst_dense < 1e-8 && hand_err <= 1e-6 && violations == 0,
           fmt("max KKT residual %.1e, dense check %.1e (need < 1e-8) over 500 instances, 2-asset err %.1e, "
               "%zu budget/cap/long-only violations",
               worst_kkt, worst_dense, hand_err, violations));
}

// 6. Fama-MacBeth, Newey-West, bootstrap
void inference_fixtures() {
    const std::vector<std::vector<double>> fixtures{
        {0.01, 0.02, 0.03},
        {0.0122, -0.004, 0.019, 0.007, 0.0151, -0.0023},
        {0.02, -0.01, 0.03, 0.0, 0.015, -0.005, 0.025, 0.01, -0.02, 0.012, 0.008, 0.004},
    };
    double worst = 0.0;
    for (const auto& x : fixtures) {
        for (int L = 0; L <= 3; ++L) {
            worst = std::max(worst, std::abs(econ::newey_west_variance_of_mean(x, L) - oracle::nw_variance_of_mean(x, L)));
            if (x.size() < 2) continue;
            auto fm = econ::fama_macbeth(x, L);
            worst = std::max(worst, std::abs(fm.se_nw - std::sqrt(oracle::nw_variance_of_mean(x, L))));
            worst = std::max(worst,
                             std::abs(fm.mean - std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size())));
        }
    }
    const auto& x = fixtures[2];
    auto a = econ::bootstrap_mean(x, 10000, 42);
    auto b = econ::bootstrap_mean(x, 10000, 42);
    auto t = econ::bootstrap_mean(x, 10000, 42, 4);
    const bool reproducible = a.ci_lo == b.ci_lo && a.ci_hi == b.ci_hi && a.p_value == b.p_value &&
                              t.ci_lo == a.ci_lo && t.ci_hi == a.ci_hi && t.p_value == a.p_value;
    const double c = 0.0078;
    auto flat = econ::bootstrap_mean(std::vector<double>(12, c), 10000, 7);
    const bool degenerate = flat.ci_lo == c && flat.ci_hi == c;
    report(6, "Fama-MacBeth, NW, bootstrap", worst <= 1e-12 && reproducible && degenerate,
           fmt("max err vs brute force %.1e (need <= 1e-12), bootstrap %s, constant CI [%.17g, %.17g]", worst,
               reproducible ? "bit-reproducible" : "NOT reproducible", flat.ci_lo, flat.ci_hi));
}

// 7. Schema gate
void schema_gate() {
    std::size_t false_accept = 0, false_reject = 0, valid = 0;
    for (const auto& c : fuzz::corpus(1000, 2024)) {
        bool accepted = true;
        try {
            scorer::parse_validate(c.text);
        } catch (const Error&) {
            accepted = false;
        }
        valid += c.valid;
        false_accept += accepted && !c.valid;
        false_reject += !accepted && c.valid;
    }
    report(7, "schema gate fuzz corpus", false_accept == 0 && false_reject == 0,
           fmt("1000 cases (%zu valid), %zu false accepts, %zu false rejects", valid, false_accept, false_reject));
}

// 8. Leakage probe calibration
void leakage_probe() {
    synth::SynthConfig c;
    c.n_firms = 200;
    c.n_cutoffs = 3;
    auto d = synth::generate_panel(c);
    const auto probes = synth::generate_probes(d);
    double respecting = 1.0;
    for (const auto& cut : d.cutoffs) {
        std::vector<scorer::Probe> post;
        for (const auto& p : probes)
            if (cut.knowledge_cutoff < p.event_date) post.push_back(p);
        scorer::CutoffRespectingMock frozen(cut.knowledge_cutoff, probes);
        respecting = std::min(respecting, 1.0 - scorer::leakage_probe(frozen, post));
    }
    scorer::AllKnowingMock all(probes);
    const double knowing = scorer::leakage_probe(all, probes);
    report(8, "leakage probe mocks", respecting == 1.0 && knowing == 1.0,
           fmt("cutoff-respecting accuracy %.0f%%, all-knowing accuracy %.0f%% on %zu probes",
               100.0 * (1.0 - respecting), 100.0 * knowing, probes.size()));
}

// 9. Backtest arithmetic
double oracle_mdd(const std::vector<double>& r) {
    std::vector<double> v{1.0};
    for (double x : r) v.push_back(v.back() * (1 + x));
    double worst = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t j = i; j < v.size(); ++j) worst = std::min(worst, v[j] / v[i] - 1.0);
    return worst;
}

double oracle_sharpe(const std::vector<double>& r) {
    double s = 0.0;
    for (double x : r) s += x;
    const double n = static_cast<double>(r.size()), m = s / n;
    double ss = 0.0;
    for (double x : r) ss += (x - m) * (x - m);
    return 12.0 * m / (std::sqrt(ss / (n - 1)) * std::sqrt(12.0));
}

void backtest_arithmetic() {
    std::vector<double> monthly;
    std::map<std::string, double> w;
    for (int i = 0; i < 20; ++i) w["n" + std::to_string(i)] = 0.05;
    for (int m = 0; m < 12; ++m) {
        auto next = w;
        for (int j = 0; j < 3; ++j) next.erase(std::prev(next.end()));
        for (int j = 0; j < 3; ++j) next["a" + std::to_string(m) + "_" + std::to_string(j)] = 0.05;
        monthly.push_back(portfolio::turnover(w, next));
        w = next;
    }
    const double drag = portfolio::annual_cost_drag(monthly, 0.0020);

    const std::vector<std::vector<double>> series{
        {0.10, -0.20},
        {0.01 - 0.02 / std::sqrt(2.0), 0.01 + 0.02 / std::sqrt(2.0)},
        {0.03, -0.05, 0.02, -0.08, 0.04, 0.06, -0.01, -0.03, 0.05, 0.02, -0.04, 0.01},
        {0.012, 0.008, -0.015, 0.021, -0.002, 0.004, 0.017, -0.011, 0.009, 0.003},
    };
    double worst = std::abs(portfolio::max_drawdown(series[0]) - (-0.20));
    worst = std::max(worst, std::abs(portfolio::perf_stats(series[1]).sharpe - 0.12 / (0.02 * std::sqrt(12.0))));
    for (const auto& r : series) {
        auto p = portfolio::perf_stats(r);
        worst = std::max(worst, std::abs(p.max_drawdown - oracle_mdd(r)));
        worst = std::max(worst, std::abs(p.sharpe - oracle_sharpe(r)));
    }
    report(9, "backtest arithmetic", std::abs(drag - 0.0036) <= 0.0002 && worst <= 1e-12,
           fmt("15%% monthly turnover at 20 bps round trip -> %.4f%%/yr drag (need 0.36%% +- 2 bps), "
               "MDD/Sharpe max err %.1e (need <= 1e-12)",
               100.0 * drag, worst));
}

// 10. End-to-end determinism
std::map<std::string, std::string> read_tree(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        std::ifstream f(e.path(), std::ios::binary);
        std::ostringstream ss;
        ss << f.rdbuf();
        out[fs::relative(e.path(), root).generic_string()] = ss.str();
    }
    return out;
}

void determinism() {
    const auto root = fs::temp_directory_path() / "capsule_acceptance_determinism";
    fs::remove_all(root);
    auto run = [&](const std::string& name) {
        pipeline::RunConfig c;
        c.source = "synthetic";
        c.scorer = pipeline::ScorerChoice::Mock;
        c.bootstrap_resamples = 1000;
        c.optimizer.cap = 0.02;
        c.signal_life = 3;
        c.synth.n_firms = 400;
        c.synth.n_cutoffs = 4;
        c.synth.common_shock_vol = 0.005;
        c.seed = 17;
        c.out = root / name;
        pipeline::Pipeline(c).run(pipeline::Target::Report);
        return read_tree(c.out);
    };
    const auto a = run("a"), b = run("b");
    std::size_t differing = 0;
    for (const auto& [name, bytes] : a) {
        auto it = b.find(name);
        differing += it == b.end() || it->second != bytes;
    }
    const bool same = a.size() == b.size() && differing == 0 && a.count("manifest.json") == 1;
    report(10, "end-to-end determinism", same,
           fmt("%zu files per bundle, %zu differ", a.size(), differing + (a.size() != b.size())));
    fs::remove_all(root);
}

}  // namespace

int main() {
    const std::vector<void (*)()> criteria{planted_recovery, scheme_discrimination, ols_oracle,  ice_gls,
                                           optimizer,        inference_fixtures,    schema_gate, leakage_probe,
                                           backtest_arithmetic, determinism};
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        try {
            criteria[i]();
        } catch (const std::exception& e) {
            report(static_cast<int>(i + 1), "(aborted)", false, e.what());
        }
    }
    std::printf("%d of %zu criteria failed\n", failures, criteria.size());
    return failures == 0 ? 0 : 1;
}

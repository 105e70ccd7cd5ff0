#include <catch_amalgamated.hpp>

#include <numeric>

#include "capsule/core/rng.hpp"
#include "capsule/metrics.hpp"
#include "support/oracles.hpp"

using namespace capsule;
using namespace capsule::metrics;

namespace {

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::InvalidArgument;
}

OptSeries opt(std::initializer_list<double> xs) {
    OptSeries out;
    for (double x : xs) out.emplace_back(x);
    return out;
}

panel::FirmSnapshot gls_firm(double P, double B, double eps1, double eps2, Opt ltg = std::nullopt) {
    panel::FirmSnapshot s;
    s.firm_id = "f";
    s.price = P;
    s.book_value_per_share = B;
    s.eps_fy1 = eps1;
    s.eps_fy2 = eps2;
    s.ltg_median = ltg;
    return s;
}

struct SectorStats {
    double mean, sd;
};

std::map<std::string, SectorStats> stats_by_sector(const OptSeries& z, const std::vector<std::string>& sec) {
    std::map<std::string, std::vector<double>> g;
    for (std::size_t i = 0; i < z.size(); ++i)
        if (z[i]) g[sec[i]].push_back(*z[i]);
    std::map<std::string, SectorStats> out;
    for (auto& [k, v] : g) {
        double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
        double s = 0;
        for (double x : v) s += (x - m) * (x - m);
        out[k] = {m, std::sqrt(s / v.size())};
    }
    return out;
}

}  // namespace

TEST_CASE("winsorize examples") {
    OptSeries hundred;
    for (int i = 1; i <= 100; ++i) hundred.emplace_back(i);
    auto w = winsorize(hundred, 0.05, 0.95);
    // positions 0.05·99 and 0.95·99 between order statistics
    CHECK(*w[0] == Catch::Approx(5.95).epsilon(1e-14));
    CHECK(*w[99] == Catch::Approx(95.05).epsilon(1e-14));
    for (int i = 6; i <= 95; ++i) CHECK(*w[static_cast<std::size_t>(i - 1)] == i);

    CHECK(winsorize(opt({4, 4, 4}), 0.01, 0.99) == opt({4, 4, 4}));

    auto spike = winsorize(opt({0, 0, 0, 1000}), 0.01, 0.99);
    CHECK(*spike[3] == Catch::Approx(970.0).epsilon(1e-14));
    CHECK(*spike[0] == 0.0);

    OptSeries gaps{1.0, std::nullopt, 3.0};
    auto g = winsorize(gaps, 0.0, 1.0);
    CHECK_FALSE(g[1]);
    CHECK(code_of([] { winsorize(opt({1}), 0.01, 0.99); }) == ErrorCode::InsufficientData);
    CHECK(code_of([] { winsorize(opt({1, 2}), 0.5, 0.5); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("winsorize is weakly monotone") {
    Rng rng(2);
    for (int t = 0; t < 200; ++t) {
        OptSeries v;
        std::size_t n = 2 + rng.index(60);
        for (std::size_t i = 0; i < n; ++i) {
            if (rng.uniform() < 0.1) v.emplace_back();
            else v.emplace_back(std::exp(rng.normal(0, 2)) * (rng.uniform() < 0.5 ? -1 : 1));
        }
        if (present_values(v).size() < 2) continue;
        auto once = winsorize(v, rng.uniform(0, 0.3), rng.uniform(0.7, 1.0));
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (v[i] && v[j] && *v[i] <= *v[j]) REQUIRE(*once[i] <= *once[j]);
    }
}

// With interpolated percentiles a second pass moves a clamped tail whenever the cut
// falls strictly between two order statistics ({1,2,3,4,5} at 10%: 1.4, then 1.64).
// Idempotence holds exactly when both cuts land on order statistics.
TEST_CASE("winsorize is idempotent when the cuts land on order statistics") {
    CHECK(*winsorize(opt({1, 2, 3, 4, 5}), 0.1, 0.9)[0] == Catch::Approx(1.4));
    Rng rng(21);
    for (int t = 0; t < 200; ++t) {
        OptSeries v;
        std::size_t n = 3 + rng.index(60);
        for (std::size_t i = 0; i < n; ++i) {
            if (rng.uniform() < 0.1) v.emplace_back();
            else v.emplace_back(rng.normal(0, 3));
        }
        const std::size_t m = present_values(v).size();
        if (m < 3) continue;
        const double a = static_cast<double>(rng.index(m / 2)), b = static_cast<double>(m - 1 - rng.index(m / 2));
        const double lo = a / static_cast<double>(m - 1), hi = b / static_cast<double>(m - 1);
        if (!(lo < hi)) continue;
        auto once = winsorize(v, lo, hi);
        auto twice = winsorize(once, lo, hi);
        for (std::size_t i = 0; i < n; ++i) {
            REQUIRE(once[i].has_value() == twice[i].has_value());
            if (once[i]) REQUIRE(*twice[i] == Catch::Approx(*once[i]).epsilon(1e-14).margin(1e-14));
        }
    }
}

TEST_CASE("sector_zscore examples") {
    auto z = sector_zscore(opt({1, 2, 3}), {"A", "A", "A"});
    CHECK(*z.z[0] == Catch::Approx(-1.224744871391589).epsilon(1e-12));
    CHECK(*z.z[1] == Catch::Approx(0.0).margin(1e-15));
    CHECK(*z.z[2] == Catch::Approx(1.224744871391589).epsilon(1e-12));

    auto flat = sector_zscore(opt({5, 5, 5}), {"A", "A", "A"});
    CHECK(flat.z == opt({0, 0, 0}));
    CHECK(flat.degenerate_sectors == std::vector<std::string>{"A"});

    const double a = std::sqrt(1.5);
    auto already = opt({-a, 0, a, -1, 1});
    auto again = sector_zscore(already, {"A", "A", "A", "B", "B"});
    for (std::size_t i = 0; i < already.size(); ++i) CHECK(*again.z[i] == Catch::Approx(*already[i]).margin(1e-12));

    CHECK(code_of([] { sector_zscore(opt({1, 2, 3}), {"A", "A", "B"}); }) == ErrorCode::SectorTooSmall);
    auto lenient = sector_zscore(opt({1, 2, 3}), {"A", "A", "B"}, SmallSector::SetMissing);
    CHECK_FALSE(lenient.z[2]);
}

TEST_CASE("sector_zscore has mean 0 and population std 1 per sector") {
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        std::size_t n = 30 + rng.index(200);
        OptSeries v(n);
        std::vector<std::string> sec(n);
        for (std::size_t i = 0; i < n; ++i) {
            sec[i] = std::string(1, static_cast<char>('A' + i % 5));
            if (rng.uniform() > 0.05) v[i] = rng.normal(rng.uniform(-50, 50), rng.uniform(0.01, 10));
        }
        auto z = sector_zscore(v, sec);
        for (const auto& [s, st] : stats_by_sector(z.z, sec)) {
            REQUIRE(std::abs(st.mean) < 1e-9);
            REQUIRE(std::abs(st.sd - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("inverse forward P/E") {
    CHECK(*inv_pe(5.0, 100.0) == Catch::Approx(0.05).epsilon(1e-15));
    CHECK(*inv_pe(-2.0, 100.0) == Catch::Approx(-0.02).epsilon(1e-15));
    CHECK(code_of([] { inv_pe(1.0, 0.0); }) == ErrorCode::InvalidPrice);
    CHECK_FALSE(inv_pe(std::nullopt, 10.0));
}

TEST_CASE("ICE-GLS prices at book when ROE equals the industry median") {
    IceGlsConfig cfg;
    cfg.industry_median_roe = 0.08;
    // ROE 0.08 in every year: eps1 = 0.08·10, eps2 = 0.08·10.8
    double r = ice_gls(gls_firm(10, 10, 0.8, 0.08 * 10.8), cfg);
    CHECK(std::abs(r - 0.08) < 1e-8);
}

TEST_CASE("ICE-GLS agrees with a brute-force grid search") {
    IceGlsConfig cfg;
    cfg.industry_median_roe = 0.10;
    const double P = 12, B = 10;
    double r = ice_gls(gls_firm(P, B, 1.0, 1.1), cfg);
    double best = 0, best_err = 1e300;
    for (int i = 0; i <= 599000; ++i) {
        double x = 0.001 + i * 1e-6;
        double err = std::abs(oracle::gls_price(B, 1.0, 1.1, std::nullopt, 0.10, 12, x) - P);
        if (err < best_err) best_err = err, best = x;
    }
    CHECK(std::abs(r - best) <= 1e-6);
    CHECK(r < 0.10);  // priced above book: discount below ROE
}

TEST_CASE("ICE-GLS without a root in the bracket") {
    IceGlsConfig cfg;
    cfg.industry_median_roe = 0.02;
    CHECK(code_of([&] { ice_gls(gls_firm(1000, 10, 0.2, 0.204), cfg); }) == ErrorCode::NoRoot);
    CHECK(code_of([&] { ice_gls(gls_firm(10, 0, 0.2, 0.204), cfg); }) == ErrorCode::InvalidBook);
    CHECK(code_of([&] { ice_gls(gls_firm(10, -3, 0.2, 0.204), cfg); }) == ErrorCode::InvalidBook);
    CHECK(code_of([&] { ice_gls(gls_firm(0, 3, 0.2, 0.204), cfg); }) == ErrorCode::InvalidPrice);
}

TEST_CASE("ICE-GLS model price decreases in r and solved roots reprice") {
    Rng rng(8);
    int solved = 0;
    for (int t = 0; t < 100; ++t) {
        double B = rng.uniform(5, 50);
        double eps1 = B * rng.uniform(0.02, 0.25);
        double eps2 = eps1 * (1 + rng.uniform(0, 0.2));
        Opt ltg = rng.uniform() < 0.5 ? Opt(rng.uniform(0.0, 0.15)) : std::nullopt;
        double med = rng.uniform(0.04, 0.15);
        double prev = 1e300;
        for (int i = 0; i <= 1000; ++i) {
            double x = 0.001 + (0.6 - 0.001) * i / 1000.0;
            double p = oracle::gls_price(B, eps1, eps2, ltg, med, 12, x);
            REQUIRE(p < prev);
            prev = p;
        }
        double P = B * rng.uniform(0.5, 4.0);
        IceGlsConfig cfg;
        cfg.industry_median_roe = med;
        try {
            double r = ice_gls(gls_firm(P, B, eps1, eps2, ltg), cfg);
            ++solved;
            REQUIRE(std::abs(oracle::gls_price(B, eps1, eps2, ltg, med, 12, r) / P - 1) < 1e-6);
        } catch (const Error& e) {
            REQUIRE(e.code() == ErrorCode::NoRoot);
        }
    }
    CHECK(solved > 80);
}

TEST_CASE("ICE-PEG closed form") {
    CHECK(ice_peg(4, 5, 100) == Catch::Approx(0.10).epsilon(1e-15));
    CHECK(ice_peg(1, 1.0009, 100) == Catch::Approx(0.003).epsilon(1e-9));
    CHECK(code_of([] { ice_peg(1, 1, 100); }) == ErrorCode::GrowthNonPositive);
    CHECK(code_of([] { ice_peg(1, 2, 0); }) == ErrorCode::InvalidPrice);
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        double e1 = rng.uniform(-5, 5), e2 = e1 + rng.uniform(1e-6, 3), p = rng.uniform(1, 500);
        REQUIRE(ice_peg(e1, e2, p) == std::sqrt((e2 - e1) / p));
    }
}

TEST_CASE("inverse EV/EBITDA") {
    CHECK(inv_eveb(50, 400, 150, 50) == Catch::Approx(0.10).epsilon(1e-15));
    CHECK(code_of([] { inv_eveb(50, 100, 10, 200); }) == ErrorCode::InvalidEnterpriseValue);
    CHECK(inv_eveb(0, 400, 150, 50) == 0.0);
}

TEST_CASE("factor composite examples") {
    Rng rng(6);
    std::size_t n = 60;
    OptSeries x(n), neg(n);
    std::vector<std::string> sec(n);
    for (std::size_t i = 0; i < n; ++i) {
        sec[i] = i % 2 ? "A" : "B";
        x[i] = rng.normal(0, 1);
    }
    auto zx = standardize(x, sec);
    CHECK(factor_composite({x}, sec) == zx);
    CHECK(factor_composite({x, x}, sec) == zx);
    CHECK(factor_composite({x, x, x}, sec) == zx);

    // {z, −z}: standardize the negated z-scores so the winsor clamps mirror exactly
    for (std::size_t i = 0; i < n; ++i) neg[i] = -*zx[i];
    auto cancel = factor_composite({zx, neg}, sec, {0.0, 1.0});
    for (const auto& v : cancel) CHECK(std::abs(*v) < 1e-12);

    OptSeries half(n), sparse(n);
    half[0] = 1.0;  // one sector value is not enough for a z-score
    CHECK(code_of([&] { factor_composite({half}, sec); }) == ErrorCode::InsufficientData);
    CHECK(code_of([&] { factor_composite({}, sec); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("composite needs at least half the components") {
    OptSeries a = opt({1, 2, 3, 4}), b = opt({4, 3, 2, 1});
    OptSeries c{1.0, std::nullopt, std::nullopt, std::nullopt};
    auto out = detail::average_components({a, b, c});
    CHECK(out[0]);
    CHECK(out[1]);  // 2 of 3 present
    auto two = detail::average_components({a, c});
    CHECK(two[1]);  // 1 of 2 is half
    auto three = detail::average_components({c, c, a});
    CHECK_FALSE(three[1]);  // 1 of 3
}

TEST_CASE("mismatch examples") {
    CheapnessSet c;
    c.z_invpe = {-1.0, 0.25, std::nullopt};
    c.z_ice_gls = {1.0, std::nullopt, std::nullopt};
    c.z_ice_peg = {std::nullopt, std::nullopt, std::nullopt};
    c.z_inveveb = {0.0, 0.75, std::nullopt};
    OptSeries s = {1.0, 0.5, 2.0};
    auto m = mismatch(s, c, Leg::InvPE);
    CHECK(*m[0] == 0.0);
    CHECK(*m[1] == 0.75);
    CHECK_FALSE(m[2]);
    auto comp = mismatch(s, c, Leg::Composite);
    CHECK(*comp[0] == Catch::Approx(1.0).epsilon(1e-15));
    CHECK(*comp[1] == Catch::Approx(1.0).epsilon(1e-15));
    CHECK_FALSE(comp[2]);
    CHECK(code_of([&] { mismatch({1.0}, c, Leg::InvPE); }) == ErrorCode::ShapeError);
}

TEST_CASE("cross-section metrics are sector neutral") {
    Rng rng(12);
    std::vector<panel::FirmSnapshot> firms;
    const char* sectors[] = {"Energy", "Utilities", "Materials", "Financials"};
    for (int i = 0; i < 400; ++i) {
        panel::FirmSnapshot s;
        s.firm_id = "F" + std::to_string(i);
        s.sector = sectors[i % 4];
        s.price = rng.uniform(5, 200);
        s.shares_outstanding = rng.uniform(1e6, 1e9);
        double B = *s.price * rng.uniform(0.2, 1.5);
        s.book_value_per_share = B;
        s.eps_fy1 = B * rng.uniform(-0.02, 0.25);
        s.eps_fy2 = *s.eps_fy1 * rng.uniform(0.9, 1.3) + 0.01;
        s.eps_trailing = *s.eps_fy1 * rng.uniform(0.8, 1.1);
        s.ebitda_fwd = *s.price * *s.shares_outstanding * rng.uniform(-0.02, 0.3);
        s.total_debt = *s.price * *s.shares_outstanding * rng.uniform(0, 1);
        s.cash = *s.price * *s.shares_outstanding * rng.uniform(0, 0.3);
        s.total_assets = *s.price * *s.shares_outstanding * rng.uniform(0.5, 3);
        s.roe = rng.uniform(-0.05, 0.3);
        s.gross_profit = *s.total_assets * rng.uniform(0, 0.5);
        s.net_income = *s.total_assets * rng.uniform(-0.05, 0.1);
        s.op_cashflow = *s.total_assets * rng.uniform(-0.05, 0.15);
        s.analyst_count = static_cast<double>(rng.index(30));
        if (rng.uniform() < 0.8) s.pt_mean = *s.price * 1.1;
        s.pt_dispersion = rng.uniform(0, 0.5);
        s.adtv = rng.uniform(1e5, 1e8);
        s.r_1m = rng.normal(0, 0.08);
        s.r_6m = rng.normal(0, 0.2);
        s.r_12m_ex1m = rng.normal(0, 0.3);
        firms.push_back(s);
    }
    auto m = compute_cross_section(firms);
    REQUIRE(m.firm_ids.size() == 400);
    for (const auto* z : {&m.cheap.z_invpe, &m.cheap.z_ice_gls, &m.cheap.z_ice_peg, &m.cheap.z_inveveb, &m.size,
                          &m.analyst_coverage, &m.leverage, &m.trading_volume}) {
        auto st = stats_by_sector(*z, m.sectors);
        REQUIRE(st.size() == 4);
        for (const auto& [s, v] : st) {
            CHECK(std::abs(v.mean) < 1e-9);
            CHECK(std::abs(v.sd - 1.0) < 1e-9);
        }
    }
    // every firm has one record per metric; failures carry their error code
    CHECK(m.records.size() == 4 * 400);
    for (const auto& r : m.records) {
        CHECK(r.raw.has_value() == (r.status == "ok"));
        if (r.metric == "ice_peg" && r.status != "ok") CHECK(r.status == "GrowthNonPositive");
    }
}

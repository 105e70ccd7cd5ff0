#pragma once

// Synthetic panels with a planted outlook-score effect. Firms persist across
// cutoffs; fundamentals are drawn relative to the simulated price, cheapness
// and controls are computed by the metrics module, and each firm's price path
// is bent so the one-month window after every analysis date returns exactly
// the planted value.

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "capsule/core/csv.hpp"
#include "capsule/core/date.hpp"
#include "capsule/core/error.hpp"
#include "capsule/core/rng.hpp"
#include "capsule/dataset.hpp"
#include "capsule/hypothesis.hpp"
#include "capsule/metrics.hpp"
#include "capsule/panel.hpp"
#include "capsule/portfolio.hpp"
#include "capsule/scorer.hpp"

namespace capsule::synth {

struct SynthConfig {
    std::size_t n_firms = 2000;
    std::size_t n_cutoffs = 6;
    std::size_t models_per_cutoff = 1;
    std::size_t n_sectors = 11;
    std::vector<std::size_t> sector_sizes;  // empty → near-equal split of n_firms

    double gamma = 0.012;
    std::array<double, 4> delta{0.002, 0.001, 0.0, 0.001};      // z_invpe, z_ice_gls, z_ice_peg, z_inveveb
    std::array<double, 4> lambda{-0.001, 0.003, 0.002, 0.002};  // size, quality, value, momentum
    double intercept = 0.005;
    double score_cheap_corr = 0.3;
    double residual_vol = 0.058;  // gives R² ≈ 0.06 on the H2 regression
    double common_shock_vol = 0.0;  // sd of the per-cutoff common factor return
    double shock_score_loading = 0.5;  // correlation of factor exposure with S̃
    double model_noise = 0.5;          // extra latent noise for secondary models
    double daily_vol = 0.015;
    double market_daily_vol = 0.008;
    double delist_fraction = 0.0;
    std::array<double, 3> h1_beta{0.02, 0.01, 0.03};

    std::size_t cutoff_spacing = 42;  // trading days between analysis dates
    Date start{2021, 1, 4};
    std::uint64_t seed = 1;

    std::vector<std::size_t> sizes() const {
        if (!sector_sizes.empty()) return sector_sizes;
        std::vector<std::size_t> s(n_sectors, n_firms / n_sectors);
        for (std::size_t i = 0; i < n_firms % n_sectors; ++i) ++s[i];
        return s;
    }

    void validate() const {
        auto bad = [](const std::string& m) { fail(ErrorCode::InvalidArgument, "synth: " + m); };
        if (n_firms == 0 || n_cutoffs == 0 || models_per_cutoff == 0) bad("counts must be positive");
        auto s = sizes();
        std::size_t total = 0;
        for (auto x : s) {
            if (x < 2) bad("every sector needs at least two firms");
            total += x;
        }
        if (total != n_firms) bad("sector sizes do not sum to n_firms");
        for (double v : {residual_vol, common_shock_vol, model_noise, daily_vol, market_daily_vol})
            if (!(v >= 0.0)) bad("volatilities must be non-negative");
        if (!(std::abs(score_cheap_corr) < 1.0)) bad("|score_cheap_corr| must be < 1");
        if (!(std::abs(shock_score_loading) <= 1.0)) bad("|shock_score_loading| must be ≤ 1");
        if (!(delist_fraction >= 0.0 && delist_fraction <= 1.0)) bad("delist_fraction must lie in [0, 1]");
        if (cutoff_spacing < 22) bad("cutoff spacing must be at least 22 trading days");
    }
};

struct SynthTruth {
    double gamma = 0.0;
    std::array<double, 4> delta{};
    std::array<double, 4> lambda{};
    double intercept = 0.0;
    std::vector<double> common_shock;   // f_t per cutoff date
    std::vector<double> cutoff_slope;   // γ + loading·f_t, the slope realised in each cross-section
    std::array<double, 3> h1_beta{};
    std::uint64_t seed = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["gamma"] = gamma;
        j["delta"] = {{"z_invpe", delta[0]}, {"z_ice_gls", delta[1]}, {"z_ice_peg", delta[2]}, {"z_inveveb", delta[3]}};
        j["lambda"] = {{"size", lambda[0]}, {"quality", lambda[1]}, {"value", lambda[2]}, {"momentum", lambda[3]}};
        j["intercept"] = intercept;
        j["common_shock"] = common_shock;
        j["cutoff_slope"] = cutoff_slope;
        j["h1_beta"] = {{col::d_revenue, h1_beta[0]}, {col::d_net_income, h1_beta[1]}, {col::d_target_price, h1_beta[2]}};
        j["seed"] = seed;
        return j;
    }
};

struct SynthData {
    panel::Panel panel;
    std::vector<panel::Cutoff> cutoffs;
    std::map<std::string, std::map<std::string, int>> outlook;  // model → firm → raw outlook
    std::map<long, std::map<std::string, Outcomes>> outcomes;   // analysis date serial → firm
    std::vector<std::string> sectors;                           // per firm index
    std::vector<std::string> firm_ids;
    SynthTruth truth;
    SynthConfig config;
};

inline std::string firm_id(std::size_t i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "SYN%06zu", i + 1);
    return buf;
}

inline std::string model_name(std::size_t cutoff, std::size_t model) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "synth-c%02zu-%c", cutoff + 1, static_cast<char>('a' + model));
    return buf;
}

/// Weekday calendar of `n` days from `start` (rolled forward to a weekday).
inline panel::TradingCalendar weekday_calendar(Date start, std::size_t n) {
    std::vector<Date> d;
    d.reserve(n);
    for (Date x = start; d.size() < n; x = x.plus_days(1))
        if (x.weekday() != 0 && x.weekday() != 6) d.push_back(x);
    return panel::TradingCalendar(std::move(d));
}

namespace detail {

inline constexpr std::size_t kFirstAnalysis = 5;
inline constexpr std::size_t kTail = 275;  // room for the 12-month horizon and twelve month ends

inline double val(const Opt& x) { return x ? *x : 0.0; }

struct FirmStatic {
    std::string id;
    std::string sector;
    double shares;
    double log_p0;
    double value_latent;
    std::size_t delist_day;  // calendar index of the last price, or npos
};

}  // namespace detail

/// Draw a full synthetic dataset. Deterministic for a given config.
inline SynthData generate_panel(const SynthConfig& cfg) {
    cfg.validate();
    SynthData out;
    out.config = cfg;
    const std::size_t N = cfg.n_firms, T = cfg.n_cutoffs;
    const std::size_t n_days = detail::kFirstAnalysis + (T - 1) * cfg.cutoff_spacing + detail::kTail;
    out.panel.calendar = weekday_calendar(cfg.start, n_days);
    const auto& cal = out.panel.calendar;

    // firms
    std::vector<detail::FirmStatic> firms(N);
    {
        Rng rng(substream_seed(cfg.seed, 1));
        auto sizes = cfg.sizes();
        std::size_t i = 0;
        for (std::size_t s = 0; s < sizes.size(); ++s) {
            const std::string sec = "S" + std::to_string(s + 10);
            for (std::size_t k = 0; k < sizes[s]; ++k, ++i) {
                auto& f = firms[i];
                f.id = firm_id(i);
                f.sector = sec;
                f.shares = std::exp(std::log(1e8) + 1.0 * rng.normal());
                f.log_p0 = std::log(40.0) + 0.5 * rng.normal();
                f.value_latent = rng.normal();
                f.delist_day = std::string::npos;
                if (rng.uniform() < cfg.delist_fraction)
                    f.delist_day = detail::kFirstAnalysis + 1 + rng.index(n_days - detail::kFirstAnalysis - 1);
            }
        }
        for (const auto& f : firms) {
            out.firm_ids.push_back(f.id);
            out.sectors.push_back(f.sector);
        }
    }

    // daily log increments: market + idiosyncratic; increments[i][d] moves day d−1 → d
    std::vector<double> market(n_days, 0.0);
    {
        Rng rng(substream_seed(cfg.seed, 2));
        for (std::size_t d = 1; d < n_days; ++d) market[d] = 0.0003 + cfg.market_daily_vol * rng.normal();
    }
    std::vector<std::vector<double>> inc(N, std::vector<double>(n_days, 0.0));
    for (std::size_t i = 0; i < N; ++i) {
        Rng rng(substream_seed(cfg.seed, 10'000 + i));
        for (std::size_t d = 1; d < n_days; ++d) inc[i][d] = market[d] + cfg.daily_vol * rng.normal();
    }
    std::vector<double> logp(N);  // running log price at the current analysis date
    std::vector<std::size_t> logp_day(N, 0);
    for (std::size_t i = 0; i < N; ++i) logp[i] = firms[i].log_p0;
    auto advance = [&](std::size_t i, std::size_t day) {
        for (std::size_t d = logp_day[i] + 1; d <= day; ++d) logp[i] += inc[i][d];
        logp_day[i] = day;
    };

    out.truth.gamma = cfg.gamma;
    out.truth.delta = cfg.delta;
    out.truth.lambda = cfg.lambda;
    out.truth.intercept = cfg.intercept;
    out.truth.h1_beta = cfg.h1_beta;
    out.truth.seed = cfg.seed;

    std::vector<double> value_latent(N);
    for (std::size_t i = 0; i < N; ++i) value_latent[i] = firms[i].value_latent;

    for (std::size_t t = 0; t < T; ++t) {
        const std::size_t a = detail::kFirstAnalysis + t * cfg.cutoff_spacing;
        const Date adate = cal[a];
        Rng rng(substream_seed(cfg.seed, 100 + t));

        // snapshots for live firms
        std::vector<panel::FirmSnapshot> snaps;
        std::vector<std::size_t> idx;
        snaps.reserve(N);
        idx.reserve(N);
        for (std::size_t i = 0; i < N; ++i) {
            const bool live = firms[i].delist_day == std::string::npos || firms[i].delist_day > a;
            value_latent[i] = 0.8 * value_latent[i] + 0.6 * rng.normal();
            // draw everything regardless of liveness so streams stay aligned
            std::array<double, 17> e{};
            for (auto& x : e) x = rng.normal();
            std::array<double, 4> u{};
            for (auto& x : u) x = rng.uniform();
            if (!live) continue;
            advance(i, a);
            const double P = std::exp(logp[i]);
            const double v = value_latent[i];
            panel::FirmSnapshot s;
            s.firm_id = firms[i].id;
            s.name = "Synthetic Holdings " + std::to_string(i + 1);
            s.ticker = "S" + std::to_string(i + 1);
            s.country = "US";
            s.sector = firms[i].sector;
            s.analysis_date = adate;
            s.price = P;
            s.shares_outstanding = firms[i].shares;
            const double mcap = P * firms[i].shares;
            const double bm = std::exp(std::log(0.45) + 0.35 * v + 0.25 * e[0]);
            const double B = bm * P;
            s.book_value_per_share = B;
            const double eps1 = 0.06 * std::exp(0.3 * v + 0.2 * e[1]) * P;
            s.eps_fy1 = eps1;
            if (u[0] > 0.03) s.eps_fy2 = eps1 * (1.0 + 0.08 + 0.06 * e[2]);
            const double eps_tr = eps1 / (1.05 + 0.05 * e[3]);
            s.eps_trailing = eps_tr;
            if (u[1] < 0.85) s.ltg_median = 0.08 + 0.03 * e[4];
            const double debt = mcap * std::exp(std::log(0.3) + 0.5 * e[5]);
            const double cash = mcap * std::exp(std::log(0.08) + 0.5 * e[6]);
            s.total_debt = debt;
            s.cash = cash;
            if (u[2] > 0.03) s.ebitda_fwd = (mcap + debt - cash) * 0.09 * std::exp(0.25 * v + 0.2 * e[7]);
            const double assets = B * firms[i].shares * 1.2 + debt;
            s.total_assets = assets;
            s.roe = eps_tr / B;
            s.gross_profit = assets * std::max(0.01, 0.25 + 0.08 * e[8]);
            s.net_income = eps_tr * firms[i].shares;
            s.op_cashflow = *s.net_income + assets * (0.03 + 0.03 * e[9]);
            s.analyst_count = std::max(1.0, std::round(std::exp(1.8 + 0.2 * std::log(mcap / 4e9) + 0.4 * e[10])));
            if (u[3] < 0.85) s.pt_mean = P * (1.1 + 0.1 * e[11]);
            s.pt_dispersion = std::abs(0.12 + 0.05 * e[12]);
            s.adtv = mcap * std::exp(std::log(0.004) + 0.4 * e[13]);
            s.r_1m = 0.01 + 0.08 * e[14];
            s.r_6m = 0.04 + 0.18 * e[15];
            s.r_12m_ex1m = 0.08 + 0.28 * e[16];
            snaps.push_back(std::move(s));
            idx.push_back(i);
        }

        auto m = metrics::compute_cross_section(snaps);
        const std::size_t n = snaps.size();

        // latent view correlated with standardized cheapness composite
        auto comp = m.cheap.composite();
        {
            auto cz = metrics::sector_zscore(comp, m.sectors, metrics::SmallSector::SetMissing).z;
            for (std::size_t k = 0; k < n; ++k) comp[k] = cz[k];
        }
        Rng srng(substream_seed(cfg.seed, 200 + t));
        std::vector<double> latent(n);
        const double rho = cfg.score_cheap_corr;
        for (std::size_t k = 0; k < n; ++k)
            latent[k] = rho * detail::val(comp[k]) + std::sqrt(1.0 - rho * rho) * srng.normal();
        for (std::size_t mdl = 0; mdl < cfg.models_per_cutoff; ++mdl) {
            const auto name = model_name(t, mdl);
            auto& table = out.outlook[name];
            for (std::size_t k = 0; k < n; ++k) {
                double l = latent[k] + (mdl == 0 ? 0.0 : cfg.model_noise * srng.normal());
                table[snaps[k].firm_id] = static_cast<int>(std::clamp(std::round(2.5 * l), -10.0, 10.0));
            }
            const Date release = adate.plus_days(30 + static_cast<int>(mdl) * 7);
            out.cutoffs.emplace_back(name, adate, release,
                                     mdl % 2 ? panel::Architecture::Reasoning : panel::Architecture::Standard);
        }

        OptSeries raw(n);
        const auto& primary = out.outlook[model_name(t, 0)];
        for (std::size_t k = 0; k < n; ++k) raw[k] = primary.at(snaps[k].firm_id);
        const auto score = metrics::sector_zscore(raw, m.sectors, metrics::SmallSector::SetMissing).z;

        // planted one-month returns
        Rng rrng(substream_seed(cfg.seed, 300 + t));
        const double f_t = cfg.common_shock_vol * rrng.normal();
        const double load = cfg.shock_score_loading;
        out.truth.common_shock.push_back(f_t);
        out.truth.cutoff_slope.push_back(cfg.gamma + load * f_t);
        const std::array<const OptSeries*, 4> cheap{&m.cheap.z_invpe, &m.cheap.z_ice_gls, &m.cheap.z_ice_peg,
                                                    &m.cheap.z_inveveb};
        const std::array<const OptSeries*, 4> ctl{&m.size, &m.quality, &m.value, &m.momentum};
        auto& oc = out.outcomes[adate.serial()];
        Rng orng(substream_seed(cfg.seed, 400 + t));
        for (std::size_t k = 0; k < n; ++k) {
            const double s = detail::val(score[k]);
            double r = cfg.intercept + cfg.gamma * s;
            for (std::size_t j = 0; j < 4; ++j) r += cfg.delta[j] * detail::val((*cheap[j])[k]);
            for (std::size_t j = 0; j < 4; ++j) r += cfg.lambda[j] * detail::val((*ctl[j])[k]);
            const double eta = rrng.normal(), eps = rrng.normal();
            const double exposure = load * s + std::sqrt(1.0 - load * load) * eta;
            r += f_t * exposure + cfg.residual_vol * eps;
            r = std::max(r, -0.95);

            const std::size_t i = idx[k];
            // bend the 20 increments of the window so the one-month return equals r
            const std::size_t open = a + 1, close = a + 1 + static_cast<std::size_t>(panel::horizon_days(1));
            double sum = 0.0;
            for (std::size_t d = open + 1; d <= close; ++d) sum += inc[i][d];
            const double shift = (std::log1p(r) - sum) / static_cast<double>(close - open);
            for (std::size_t d = open + 1; d <= close; ++d) inc[i][d] += shift;

            Outcomes o;
            const double e1 = orng.normal(), e2 = orng.normal(), e3 = orng.normal(), u3 = orng.uniform();
            if (score[k]) {
                o.d_revenue = 0.05 + cfg.h1_beta[0] * s + 0.10 * e1;
                o.d_net_income = 0.03 + cfg.h1_beta[1] * s + 0.25 * e2;
                if (u3 < 0.8) o.d_target_price = 0.02 + cfg.h1_beta[2] * s + 0.15 * e3;
            }
            oc[snaps[k].firm_id] = o;
        }
        for (auto& s : snaps) out.panel.snapshots.push_back(std::move(s));
    }

    // materialise prices
    for (std::size_t i = 0; i < N; ++i) {
        panel::PriceSeries ps;
        ps.reserve(n_days);
        const std::size_t last = firms[i].delist_day == std::string::npos ? n_days - 1 : firms[i].delist_day;
        double lp = firms[i].log_p0;
        for (std::size_t d = 0; d <= last; ++d) {
            if (d) lp += inc[i][d];
            ps.add(cal[d], std::exp(lp));
        }
        out.panel.prices.emplace(firms[i].id, std::move(ps));
    }
    auto by_date_firm = [](const auto& x, const auto& y) {
        if (x.analysis_date != y.analysis_date) return x.analysis_date < y.analysis_date;
        return x.firm_id < y.firm_id;
    };
    if (!std::is_sorted(out.panel.snapshots.begin(), out.panel.snapshots.end(), by_date_firm))
        std::stable_sort(out.panel.snapshots.begin(), out.panel.snapshots.end(), by_date_firm);
    return out;
}

/// Cross-sections for every synthetic model, built from the raw panel the same
/// way the pipeline builds them from files.
inline std::vector<econ::ModelSection> build_sections(const SynthData& d, const SectionOptions& opt = {}) {
    std::vector<econ::ModelSection> out;
    for (const auto& c : d.cutoffs) {
        auto date = panel::analysis_date(c.knowledge_cutoff, d.panel.calendar);
        auto oc = d.outcomes.find(date.serial());
        auto b = build_cross_section(d.panel, c, d.outlook.at(c.model_name),
                                     oc == d.outcomes.end() ? nullptr : &oc->second, opt);
        out.push_back({c, std::move(b.section)});
    }
    return out;
}

/// Monthly factor risk models: sector dummies plus three style factors, dated at
/// the first calendar day and every month end.
inline portfolio::RiskModelSeries generate_risk_models(const SynthData& d) {
    portfolio::RiskModelSeries series;
    Rng rng(substream_seed(d.config.seed, 500));
    std::vector<std::string> sectors = d.sectors;
    std::sort(sectors.begin(), sectors.end());
    sectors.erase(std::unique(sectors.begin(), sectors.end()), sectors.end());
    std::vector<std::string> factors;
    for (const auto& s : sectors) factors.push_back("ind_" + s);
    for (const char* s : {"style_momentum", "style_size", "style_value"}) factors.emplace_back(s);
    std::sort(factors.begin(), factors.end());
    const auto K = static_cast<Eigen::Index>(factors.size());
    const auto N = static_cast<Eigen::Index>(d.firm_ids.size());

    Eigen::MatrixXd style(N, 3);
    for (Eigen::Index i = 0; i < N; ++i)
        for (int j = 0; j < 3; ++j) style(i, j) = rng.normal();
    Eigen::VectorXd idio(N);
    for (Eigen::Index i = 0; i < N; ++i) idio(i) = 0.0049 * std::exp(0.3 * rng.normal());
    Eigen::MatrixXd A(K, K);
    for (Eigen::Index a = 0; a < K; ++a)
        for (Eigen::Index b = 0; b < K; ++b) A(a, b) = rng.normal();

    std::vector<Date> dates{d.panel.calendar.front()};
    auto me = portfolio::month_ends_after(d.panel.calendar, d.panel.calendar.front());
    dates.insert(dates.end(), me.begin(), me.end());
    for (const auto& date : dates) {
        portfolio::FactorRiskModel m;
        m.firm_ids = d.firm_ids;
        m.factors = factors;
        m.exposures = Eigen::MatrixXd::Zero(N, K);
        for (Eigen::Index i = 0; i < N; ++i) {
            auto pos = std::find(factors.begin(), factors.end(), "ind_" + d.sectors[static_cast<std::size_t>(i)]);
            m.exposures(i, pos - factors.begin()) = 1.0;
            for (int j = 0; j < 3; ++j) {
                style(i, j) = 0.95 * style(i, j) + 0.3 * rng.normal();
                static const char* names[] = {"style_momentum", "style_size", "style_value"};
                auto sp = std::find(factors.begin(), factors.end(), names[j]);
                m.exposures(i, sp - factors.begin()) = style(i, j);
            }
        }
        Eigen::MatrixXd F = 0.0004 * (A * A.transpose()) / static_cast<double>(K);
        for (Eigen::Index a = 0; a < K; ++a) F(a, a) += 0.0008;
        m.factor_cov = 0.5 * (F + F.transpose());
        m.idio_var = idio;
        series.add(date, std::move(m));
    }
    return series;
}

/// Post-cutoff probe questions: each names an event dated after the latest cutoff.
inline std::vector<scorer::Probe> generate_probes(const SynthData& d, std::size_t n = 100) {
    Date last = d.cutoffs.empty() ? d.panel.calendar.back() : d.cutoffs.front().knowledge_cutoff;
    for (const auto& c : d.cutoffs) last = std::max(last, c.knowledge_cutoff);
    Rng rng(substream_seed(d.config.seed, 600));
    std::vector<scorer::Probe> out;
    for (std::size_t k = 0; k < n; ++k) {
        const auto& f = d.firm_ids[rng.index(d.firm_ids.size())];
        const Date ev = last.plus_days(static_cast<int>(1 + rng.index(300)));
        out.push_back({"Which firm announced synthetic corporate event #" + std::to_string(k + 1) + " on " + ev.iso() +
                           "? Reply with its identifier.",
                       f, ev});
    }
    return out;
}

/// Write the dataset in the ingestion schemas plus generator side files.
inline void write_dataset(const SynthData& d, const std::filesystem::path& dir, bool with_risk_models = true) {
    panel::write_panel(d.panel, dir);
    panel::write_cutoffs(d.cutoffs, dir / "cutoffs.csv");
    {
        csv::Writer w({"model", "firm_id", "outlook"});
        for (const auto& [model, table] : d.outlook)
            for (const auto& [firm, o] : table) w.add({model, firm, std::to_string(o)});
        w.save(dir / "planted_scores.csv");
    }
    {
        csv::Writer w({"firm_id", "date", col::d_revenue, col::d_net_income, col::d_target_price});
        for (const auto& [date, table] : d.outcomes)
            for (const auto& [firm, o] : table)
                w.add({firm, Date::from_serial(date).iso(), csv::format_number(o.d_revenue),
                       csv::format_number(o.d_net_income), csv::format_number(o.d_target_price)});
        w.save(dir / "outcomes.csv");
    }
    scorer::write_probes(generate_probes(d), dir / "probes.csv");
    {
        std::ofstream f(dir / "truth.json", std::ios::binary);
        if (!f) fail(ErrorCode::IoError, "cannot write " + (dir / "truth.json").string());
        f << d.truth.to_json().dump(2) << '\n';
    }
    if (with_risk_models) {
        auto series = generate_risk_models(d);
        std::vector<Date> dates{d.panel.calendar.front()};
        auto me = portfolio::month_ends_after(d.panel.calendar, d.panel.calendar.front());
        dates.insert(dates.end(), me.begin(), me.end());
        for (const auto& date : dates) portfolio::write_risk_model(series.as_of(date), dir / "riskmodel" / date.iso());
    }
}

/// planted_scores.csv: model,firm_id,outlook
inline std::map<std::string, std::map<std::string, int>> load_planted_scores(const std::filesystem::path& path) {
    auto t = csv::read_file(path);
    auto cm = t.column("model"), cf = t.column("firm_id"), co = t.column("outlook");
    if (!cm || !cf || !co) fail(ErrorCode::ParseError, path.string() + ": need model,firm_id,outlook");
    std::map<std::string, std::map<std::string, int>> out;
    for (const auto& r : t.rows) {
        auto v = csv::parse_number(r.cells.at(*co));
        if (!v) fail(ErrorCode::ParseError, path.string() + ":" + std::to_string(r.line) + ": empty outlook");
        out[r.cells[*cm]][r.cells[*cf]] = static_cast<int>(*v);
    }
    return out;
}

}  // namespace capsule::synth

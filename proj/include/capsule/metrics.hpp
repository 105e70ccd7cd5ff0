#pragma once

// Winsorization, sector-neutral z-scores, the four market-implied cheapness
// metrics, factor composites and the additive valuation mismatch.

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capsule/core/error.hpp"
#include "capsule/core/series.hpp"
#include "capsule/panel.hpp"

namespace capsule::metrics {

/// Clamp values outside the [lo_pct, hi_pct] percentiles (linear interpolation between
/// order statistics). Missing entries pass through.
inline OptSeries winsorize(const OptSeries& values, double lo_pct, double hi_pct) {
    if (!(lo_pct >= 0.0 && lo_pct < hi_pct && hi_pct <= 1.0))
        fail(ErrorCode::InvalidArgument, "winsorize needs 0 ≤ lo < hi ≤ 1");
    auto xs = present_values(values);
    if (xs.size() < 2)
        fail(ErrorCode::InsufficientData, "winsorize needs ≥ 2 values, got " + std::to_string(xs.size()));
    std::sort(xs.begin(), xs.end());
    const double lo = quantile_sorted(xs, lo_pct);
    const double hi = quantile_sorted(xs, hi_pct);
    OptSeries out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
        if (values[i]) out[i] = std::clamp(*values[i], lo, hi);
    return out;
}

enum class SmallSector {
    Throw,       // SectorTooSmall
    SetMissing   // drop the sector's values
};

struct ZScores {
    OptSeries z;
    std::vector<std::string> degenerate_sectors;  // zero variance, z set to 0
};

/// (x − sector mean) / sector population std, per sector label.
inline ZScores sector_zscore(const OptSeries& values, const std::vector<std::string>& sectors,
                             SmallSector small = SmallSector::Throw) {
    if (values.size() != sectors.size())
        fail(ErrorCode::ShapeError, "values and sector labels differ in length");
    std::map<std::string, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!values[i]) continue;
        if (sectors[i].empty()) fail(ErrorCode::InvalidArgument, "missing sector label at row " + std::to_string(i));
        groups[sectors[i]].push_back(i);
    }
    ZScores out;
    out.z.assign(values.size(), std::nullopt);
    for (const auto& [label, idx] : groups) {
        if (idx.size() < 2) {
            if (small == SmallSector::Throw) fail(ErrorCode::SectorTooSmall, label);
            continue;
        }
        std::vector<double> xs;
        xs.reserve(idx.size());
        for (auto i : idx) xs.push_back(*values[i]);
        const double m = mean(xs);
        const double sd = std::sqrt(population_variance(xs));
        // relative test so that constant series with rounding noise count as degenerate
        if (sd <= 1e-14 * std::max(1.0, std::abs(m))) {
            out.degenerate_sectors.push_back(label);
            for (auto i : idx) out.z[i] = 0.0;
            continue;
        }
        for (auto i : idx) out.z[i] = (*values[i] - m) / sd;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cheapness metrics

inline Opt inv_pe(Opt eps_fwd, double price) {
    if (!(price > 0.0)) fail(ErrorCode::InvalidPrice, "price must be > 0");
    if (!eps_fwd) return std::nullopt;
    return *eps_fwd / price;
}

struct IceGlsConfig {
    int fade_years = 12;
    double industry_median_roe = 0.08;
    double r_lo = 0.001;
    double r_hi = 0.60;
    double tolerance = 1e-8;
    double payout_ratio = 0.0;  // clean-surplus retention is 1 − payout

    void validate() const {
        if (!(r_lo < r_hi)) fail(ErrorCode::InvalidArgument, "ICE bracket needs r_lo < r_hi");
        if (!(tolerance > 0.0)) fail(ErrorCode::InvalidArgument, "ICE tolerance must be > 0");
        if (fade_years < 3) fail(ErrorCode::InvalidArgument, "fade horizon must be ≥ 3 years");
    }
};

/// Forecast ROE path and opening book values for the residual-income model.
struct GlsForecast {
    double book0 = 0.0;
    std::vector<double> roe;         // roe[k-1] = ROE for year k, k = 1..T
    std::vector<double> book_open;   // book_open[k-1] = B_{k-1}
    double book_terminal = 0.0;      // B_T
};

inline GlsForecast gls_forecast(double book0, double eps1, double eps2, Opt ltg,
                                const IceGlsConfig& cfg) {
    const int T = cfg.fade_years;
    const double retain = 1.0 - cfg.payout_ratio;
    GlsForecast f;
    f.book0 = book0;
    f.roe.resize(static_cast<std::size_t>(T));
    f.book_open.resize(static_cast<std::size_t>(T));
    double b = book0;
    f.book_open[0] = b;
    f.roe[0] = eps1 / b;
    b += eps1 * retain;
    f.book_open[1] = b;
    f.roe[1] = eps2 / b;
    b += eps2 * retain;
    f.book_open[2] = b;
    const double roe3 = ltg ? eps2 * (1.0 + *ltg) / b : f.roe[1];
    f.roe[2] = roe3;
    b *= 1.0 + roe3 * retain;
    for (int k = 4; k <= T; ++k) {
        const auto i = static_cast<std::size_t>(k - 1);
        f.book_open[i] = b;
        f.roe[i] = roe3 + (cfg.industry_median_roe - roe3) * static_cast<double>(k - 3) /
                              static_cast<double>(T - 3);
        b *= 1.0 + f.roe[i] * retain;
    }
    f.book_terminal = b;
    return f;
}

/// Residual-income model price at discount rate r.
inline double gls_price(const GlsForecast& f, double r) {
    double price = f.book0;
    double disc = 1.0;
    for (std::size_t k = 0; k < f.roe.size(); ++k) {
        disc /= 1.0 + r;
        price += (f.roe[k] - r) * f.book_open[k] * disc;
    }
    price += (f.roe.back() - r) * f.book_terminal * disc / r;
    return price;
}

/// Implied cost of equity from the GLS residual-income model, by bracketed bisection.
inline double ice_gls(const panel::FirmSnapshot& s, const IceGlsConfig& cfg) {
    cfg.validate();
    if (!s.price || !(*s.price > 0.0)) fail(ErrorCode::InvalidPrice, s.firm_id + ": price must be > 0");
    if (!s.book_value_per_share || !(*s.book_value_per_share > 0.0))
        fail(ErrorCode::InvalidBook, s.firm_id + ": book value per share must be > 0");
    if (!s.eps_fy1 || !s.eps_fy2) fail(ErrorCode::InsufficientData, s.firm_id + ": EPS forecasts missing");

    const auto f = gls_forecast(*s.book_value_per_share, *s.eps_fy1, *s.eps_fy2, s.ltg_median, cfg);
    const double target = *s.price;
    double lo = cfg.r_lo, hi = cfg.r_hi;
    double f_lo = gls_price(f, lo) - target;
    double f_hi = gls_price(f, hi) - target;
    if (f_lo == 0.0) return lo;
    if (f_hi == 0.0) return hi;
    if ((f_lo > 0.0) == (f_hi > 0.0))
        fail(ErrorCode::NoRoot, s.firm_id + ": no sign change on [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + "]");
    // Stop once the bracket is within tolerance and the price error is negligible;
    // near r_lo the price is steep enough that a 1e-8 bracket alone is not.
    for (;;) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) return mid;
        const double f_mid = gls_price(f, mid) - target;
        if (f_mid == 0.0) return mid;
        if (hi - lo <= cfg.tolerance && std::abs(f_mid) <= 1e-10 * target) return mid;
        if ((f_mid > 0.0) == (f_lo > 0.0)) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
}

/// Modified PEG implied cost of equity without dividends: sqrt((eps2 − eps1) / P).
inline double ice_peg(double eps_fy1, double eps_fy2, double price) {
    if (!(price > 0.0)) fail(ErrorCode::InvalidPrice, "price must be > 0");
    if (!(eps_fy2 > eps_fy1)) fail(ErrorCode::GrowthNonPositive, "eps_fy2 must exceed eps_fy1");
    return std::sqrt((eps_fy2 - eps_fy1) / price);
}

inline double inv_eveb(double ebitda_fwd, double market_cap, double debt, double cash) {
    const double ev = market_cap + debt - cash;
    if (!(ev > 0.0)) fail(ErrorCode::InvalidEnterpriseValue, "enterprise value " + std::to_string(ev) + " ≤ 0");
    return ebitda_fwd / ev;
}

// ---------------------------------------------------------------------------
// Composites and mismatch

struct WinsorBounds {
    double lo = 0.01;
    double hi = 0.99;
};

namespace detail {

/// Per-row mean over present components; rows need at least half of them present.
inline OptSeries average_components(const std::vector<OptSeries>& z) {
    const std::size_t k = z.size();
    OptSeries out(z.front().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        double m = 0.0;
        std::size_t n = 0;
        for (const auto& zc : z)
            if (zc[i]) m += (*zc[i] - m) / static_cast<double>(++n);  // exact for repeated values
        if (n > 0 && 2 * n >= k) out[i] = m;
    }
    return out;
}

}  // namespace detail

/// Winsorize then sector z-score one characteristic.
inline OptSeries standardize(const OptSeries& values, const std::vector<std::string>& sectors,
                             WinsorBounds w = {}, SmallSector small = SmallSector::Throw) {
    return sector_zscore(winsorize(values, w.lo, w.hi), sectors, small).z;
}

/// Equal-weighted average of standardized components; a firm needs at least half
/// of the components present.
inline OptSeries factor_composite(const std::vector<OptSeries>& components,
                                  const std::vector<std::string>& sectors, WinsorBounds w = {},
                                  SmallSector small = SmallSector::Throw) {
    if (components.empty()) fail(ErrorCode::InvalidArgument, "composite needs ≥ 1 component");
    std::vector<OptSeries> z;
    z.reserve(components.size());
    for (const auto& c : components) {
        if (c.size() != sectors.size()) fail(ErrorCode::ShapeError, "component length mismatch");
        z.push_back(standardize(c, sectors, w, small));
    }
    return detail::average_components(z);
}

enum class Leg { InvPE, IceGls, IcePeg, InvEveb, Composite };

inline std::string_view to_string(Leg l) {
    switch (l) {
        case Leg::InvPE: return "z_invpe";
        case Leg::IceGls: return "z_ice_gls";
        case Leg::IcePeg: return "z_ice_peg";
        case Leg::InvEveb: return "z_inveveb";
        case Leg::Composite: return "cheap_composite";
    }
    return "";
}

/// Sector-neutral cheapness z-scores, one series per metric, aligned by firm.
struct CheapnessSet {
    OptSeries z_invpe;
    OptSeries z_ice_gls;
    OptSeries z_ice_peg;
    OptSeries z_inveveb;

    const OptSeries& leg(Leg l) const {
        switch (l) {
            case Leg::InvPE: return z_invpe;
            case Leg::IceGls: return z_ice_gls;
            case Leg::IcePeg: return z_ice_peg;
            case Leg::InvEveb: return z_inveveb;
            case Leg::Composite: break;
        }
        fail(ErrorCode::InvalidArgument, "composite is not a single leg");
    }

    /// Per-firm mean of the available legs.
    OptSeries composite() const {
        OptSeries out(z_invpe.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            double s = 0.0;
            int n = 0;
            for (const auto* leg : {&z_invpe, &z_ice_gls, &z_ice_peg, &z_inveveb})
                if ((*leg)[i]) {
                    s += *(*leg)[i];
                    ++n;
                }
            if (n) out[i] = s / n;
        }
        return out;
    }
};

/// Additive valuation mismatch S̃ + C̃ for one leg or the composite.
inline OptSeries mismatch(const OptSeries& score, const CheapnessSet& cheap, Leg leg) {
    const OptSeries c = leg == Leg::Composite ? cheap.composite() : cheap.leg(leg);
    if (c.size() != score.size()) fail(ErrorCode::ShapeError, "mismatch inputs not aligned");
    OptSeries out(score.size());
    for (std::size_t i = 0; i < score.size(); ++i)
        if (score[i] && c[i]) out[i] = *score[i] + *c[i];
    return out;
}

// ---------------------------------------------------------------------------
// Cross-section builders

/// One metric value for one firm, as written to the metric output table.
struct MetricRecord {
    std::string firm_id;
    std::string metric;
    Opt raw;
    Opt z;
    std::string status;  // "ok" or the error code that made the metric missing
};

struct CrossSectionMetrics {
    std::vector<std::string> firm_ids;
    std::vector<std::string> sectors;
    CheapnessSet cheap;
    OptSeries size;
    OptSeries quality;
    OptSeries value;
    OptSeries momentum;
    OptSeries log_mcap;
    // information-environment proxies (sector z-scores)
    OptSeries analyst_coverage;
    OptSeries pt_coverage;
    OptSeries pt_dispersion;
    OptSeries leverage;
    OptSeries trading_volume;
    std::vector<MetricRecord> records;
    std::vector<std::string> degenerate_sectors;
};

namespace detail {

inline Opt ratio(Opt num, Opt den) {
    if (!num || !den || *den == 0.0) return std::nullopt;
    return *num / *den;
}

template <class F>
Opt guarded(F&& f, std::string& status) {
    try {
        status = "ok";
        return f();
    } catch (const Error& e) {
        status = std::string(capsule::to_string(e.code()));
        return std::nullopt;
    }
}

inline OptSeries standardize_or_missing(const OptSeries& v, const std::vector<std::string>& sectors) {
    if (present_values(v).size() < 2) return OptSeries(v.size());
    return standardize(v, sectors, {}, SmallSector::SetMissing);
}

inline OptSeries composite_or_missing(const std::vector<OptSeries>& comps,
                                      const std::vector<std::string>& sectors) {
    std::vector<OptSeries> z;
    for (const auto& c : comps) z.push_back(standardize_or_missing(c, sectors));
    return average_components(z);
}

inline double median(std::vector<double> xs) {
    std::sort(xs.begin(), xs.end());
    return quantile_sorted(xs, 0.5);
}

}  // namespace detail

/// Compute every cheapness metric, composite control and interaction proxy for one
/// cross-section. Firm-level metric failures become missing values with a status;
/// sectors with fewer than two observations of a metric get missing z-scores.
inline CrossSectionMetrics compute_cross_section(const std::vector<panel::FirmSnapshot>& firms,
                                                 IceGlsConfig gls = {}) {
    const std::size_t n = firms.size();
    CrossSectionMetrics out;
    out.firm_ids.reserve(n);
    out.sectors.reserve(n);
    for (const auto& f : firms) {
        out.firm_ids.push_back(f.firm_id);
        out.sectors.push_back(f.sector);
    }

    std::map<std::string, std::vector<double>> roe_by_sector;
    std::vector<double> all_roe;
    for (const auto& f : firms)
        if (f.roe) {
            roe_by_sector[f.sector].push_back(*f.roe);
            all_roe.push_back(*f.roe);
        }
    const double fallback_median = all_roe.empty() ? gls.industry_median_roe : detail::median(all_roe);
    std::map<std::string, double> sector_median;
    for (const auto& [sector, v] : roe_by_sector) sector_median[sector] = detail::median(v);

    OptSeries invpe(n), glsr(n), peg(n), eveb(n);
    std::vector<std::array<std::string, 4>> status(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = firms[i];
        invpe[i] = detail::guarded([&]() -> Opt {
            if (!f.price) fail(ErrorCode::InvalidPrice, "missing price");
            if (!f.eps_fy1) fail(ErrorCode::InsufficientData, "missing eps_fy1");
            return inv_pe(f.eps_fy1, *f.price);
        }, status[i][0]);
        glsr[i] = detail::guarded([&]() -> Opt {
            IceGlsConfig c = gls;
            auto it = sector_median.find(f.sector);
            c.industry_median_roe = it != sector_median.end() ? it->second : fallback_median;
            return ice_gls(f, c);
        }, status[i][1]);
        peg[i] = detail::guarded([&]() -> Opt {
            if (!f.price) fail(ErrorCode::InvalidPrice, "missing price");
            if (!f.eps_fy1 || !f.eps_fy2) fail(ErrorCode::InsufficientData, "missing EPS forecasts");
            return ice_peg(*f.eps_fy1, *f.eps_fy2, *f.price);
        }, status[i][2]);
        eveb[i] = detail::guarded([&]() -> Opt {
            auto mcap = f.market_cap();
            if (!mcap || !f.ebitda_fwd) fail(ErrorCode::InsufficientData, "missing EBITDA or market cap");
            return inv_eveb(*f.ebitda_fwd, *mcap, f.total_debt.value_or(0.0), f.cash.value_or(0.0));
        }, status[i][3]);
    }

    auto zscore_metric = [&](const OptSeries& raw) {
        if (present_values(raw).size() < 2) return OptSeries(n);
        auto zs = sector_zscore(winsorize(raw, 0.01, 0.99), out.sectors, SmallSector::SetMissing);
        for (auto& s : zs.degenerate_sectors) out.degenerate_sectors.push_back(s);
        return zs.z;
    };
    out.cheap.z_invpe = zscore_metric(invpe);
    out.cheap.z_ice_gls = zscore_metric(glsr);
    out.cheap.z_ice_peg = zscore_metric(peg);
    out.cheap.z_inveveb = zscore_metric(eveb);

    const std::array<std::pair<const char*, std::pair<const OptSeries*, const OptSeries*>>, 4> legs{{
        {"invpe", {&invpe, &out.cheap.z_invpe}},
        {"ice_gls", {&glsr, &out.cheap.z_ice_gls}},
        {"ice_peg", {&peg, &out.cheap.z_ice_peg}},
        {"inveveb", {&eveb, &out.cheap.z_inveveb}},
    }};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < legs.size(); ++k)
            out.records.push_back({firms[i].firm_id, legs[k].first, (*legs[k].second.first)[i],
                                   (*legs[k].second.second)[i], status[i][k]});

    OptSeries log_mcap(n), gp_assets(n), roe(n), accruals(n), btm(n), ey_trailing(n), mom12(n), mom6(n),
        rev1(n), cov(n), ptcov(n), disp(n), lev(n), vol(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& f = firms[i];
        if (auto m = f.market_cap(); m && *m > 0.0) log_mcap[i] = std::log(*m);
        gp_assets[i] = detail::ratio(f.gross_profit, f.total_assets);
        roe[i] = f.roe;
        if (f.net_income && f.op_cashflow && f.total_assets && *f.total_assets != 0.0)
            accruals[i] = -(*f.net_income - *f.op_cashflow) / *f.total_assets;
        btm[i] = detail::ratio(f.book_value_per_share, f.price);
        ey_trailing[i] = detail::ratio(f.eps_trailing, f.price);
        mom12[i] = f.r_12m_ex1m;
        mom6[i] = f.r_6m;
        if (f.r_1m) rev1[i] = -*f.r_1m;
        if (f.analyst_count) {
            cov[i] = std::log1p(*f.analyst_count);
            ptcov[i] = f.pt_mean ? std::log1p(*f.analyst_count) : 0.0;
        }
        disp[i] = f.pt_dispersion;
        lev[i] = detail::ratio(f.total_debt, f.total_assets);
        if (f.adtv && *f.adtv > 0.0) vol[i] = std::log(*f.adtv);
    }
    out.log_mcap = log_mcap;
    out.size = detail::standardize_or_missing(log_mcap, out.sectors);
    out.quality = detail::composite_or_missing({gp_assets, roe, accruals}, out.sectors);
    out.value = detail::composite_or_missing({invpe, eveb, btm, ey_trailing}, out.sectors);
    out.momentum = detail::composite_or_missing({mom12, mom6, rev1}, out.sectors);
    out.analyst_coverage = detail::standardize_or_missing(cov, out.sectors);
    out.pt_coverage = detail::standardize_or_missing(ptcov, out.sectors);
    out.pt_dispersion = detail::standardize_or_missing(disp, out.sectors);
    out.leverage = detail::standardize_or_missing(lev, out.sectors);
    out.trading_volume = detail::standardize_or_missing(vol, out.sectors);
    std::sort(out.degenerate_sectors.begin(), out.degenerate_sectors.end());
    out.degenerate_sectors.erase(std::unique(out.degenerate_sectors.begin(), out.degenerate_sectors.end()),
                                 out.degenerate_sectors.end());
    return out;
}

}  // namespace capsule::metrics

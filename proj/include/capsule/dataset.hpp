#pragma once

// Regression-ready cross-sections: one row per firm and model, named columns of
// sector-neutral predictors, controls, proxies and forward returns.

#include <algorithm>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "capsule/core/csv.hpp"
#include "capsule/core/date.hpp"
#include "capsule/core/error.hpp"
#include "capsule/core/series.hpp"
#include "capsule/metrics.hpp"
#include "capsule/panel.hpp"

namespace capsule {

namespace col {
inline constexpr const char* score = "score";
inline constexpr const char* outlook_raw = "outlook_raw";
inline constexpr const char* size = "size";
inline constexpr const char* quality = "quality";
inline constexpr const char* value = "value";
inline constexpr const char* momentum = "momentum";
inline constexpr const char* z_invpe = "z_invpe";
inline constexpr const char* z_ice_gls = "z_ice_gls";
inline constexpr const char* z_ice_peg = "z_ice_peg";
inline constexpr const char* z_inveveb = "z_inveveb";
inline constexpr const char* cheap_composite = "cheap_composite";
inline constexpr const char* log_mcap = "log_mcap";
inline constexpr const char* analyst_coverage = "z_analyst_coverage";
inline constexpr const char* pt_coverage = "z_pt_coverage";
inline constexpr const char* pt_dispersion = "z_pt_dispersion";
inline constexpr const char* leverage = "z_leverage";
inline constexpr const char* trading_volume = "z_trading_volume";
inline constexpr const char* d_revenue = "d_revenue_12m";
inline constexpr const char* d_net_income = "d_net_income_12m";
inline constexpr const char* d_target_price = "d_target_price_12m";

inline std::string ret(int months) { return "ret_" + std::to_string(months) + "m"; }
inline std::string mismatch(metrics::Leg leg) {
    return leg == metrics::Leg::Composite ? std::string("mismatch_composite")
                                          : "mismatch_" + std::string(metrics::to_string(leg)).substr(2);
}
}  // namespace col

/// Column table with per-row identifiers. A single model's section and a pooled
/// stack of sections share this representation.
struct CrossSection {
    std::vector<std::string> firm_ids;
    std::vector<std::string> sectors;
    std::vector<std::string> models;
    std::vector<long> times;  // analysis date serial
    std::map<std::string, OptSeries> columns;

    std::size_t rows() const { return firm_ids.size(); }

    bool has(const std::string& name) const { return columns.count(name) > 0; }

    const OptSeries& column(const std::string& name) const {
        auto it = columns.find(name);
        if (it == columns.end()) fail(ErrorCode::InvalidArgument, "no column '" + name + "'");
        return it->second;
    }

    void set(const std::string& name, OptSeries values) {
        if (values.size() != rows())
            fail(ErrorCode::ShapeError, "column '" + name + "' has " + std::to_string(values.size()) +
                                            " rows, table has " + std::to_string(rows()));
        columns[name] = std::move(values);
    }

    /// Rows satisfying `keep`, all columns carried along.
    template <class Pred>
    CrossSection subset(Pred&& keep) const {
        CrossSection out;
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < rows(); ++i)
            if (keep(i)) idx.push_back(i);
        for (auto i : idx) {
            out.firm_ids.push_back(firm_ids[i]);
            out.sectors.push_back(sectors[i]);
            out.models.push_back(models[i]);
            out.times.push_back(times[i]);
        }
        for (const auto& [name, values] : columns) {
            OptSeries v;
            v.reserve(idx.size());
            for (auto i : idx) v.push_back(values[i]);
            out.columns.emplace(name, std::move(v));
        }
        return out;
    }
};

/// Stack sections row-wise. Columns missing from a section are filled as missing.
inline CrossSection pool(const std::vector<CrossSection>& sections) {
    CrossSection out;
    std::vector<std::string> names;
    for (const auto& s : sections)
        for (const auto& [name, v] : s.columns)
            if (std::find(names.begin(), names.end(), name) == names.end()) names.push_back(name);
    for (const auto& s : sections) {
        out.firm_ids.insert(out.firm_ids.end(), s.firm_ids.begin(), s.firm_ids.end());
        out.sectors.insert(out.sectors.end(), s.sectors.begin(), s.sectors.end());
        out.models.insert(out.models.end(), s.models.begin(), s.models.end());
        out.times.insert(out.times.end(), s.times.begin(), s.times.end());
        for (const auto& name : names) {
            auto& dst = out.columns[name];
            auto it = s.columns.find(name);
            if (it == s.columns.end()) dst.insert(dst.end(), s.rows(), std::nullopt);
            else dst.insert(dst.end(), it->second.begin(), it->second.end());
        }
    }
    return out;
}

struct SectionOptions {
    std::size_t top_n = 7000;
    std::vector<std::string> required_fields{"sector", "price", "shares_outstanding"};
    panel::HorizonPolicy horizon_policy = panel::HorizonPolicy::Strict;
    metrics::IceGlsConfig gls{};
};

/// Post-cutoff outcome variables for H1, keyed by firm_id.
struct Outcomes {
    Opt d_revenue;
    Opt d_net_income;
    Opt d_target_price;
};

struct SectionBuild {
    CrossSection section;
    metrics::CrossSectionMetrics metrics;
    Date analysis_date;
};

/// Assemble one model's cross-section from the loaded panel and its raw outlook scores.
inline SectionBuild build_cross_section(const panel::Panel& data, const panel::Cutoff& cutoff,
                                        const std::map<std::string, int>& outlook,
                                        const std::map<std::string, Outcomes>* outcomes = nullptr,
                                        const SectionOptions& opt = {}) {
    SectionBuild b;
    b.analysis_date = panel::analysis_date(cutoff.knowledge_cutoff, data.calendar);
    auto firms = panel::filter_universe(data.snapshots_on(b.analysis_date), opt.top_n, opt.required_fields);
    std::sort(firms.begin(), firms.end(),
              [](const auto& a, const auto& c) { return a.firm_id < c.firm_id; });
    b.metrics = metrics::compute_cross_section(firms, opt.gls);

    auto& s = b.section;
    const std::size_t n = firms.size();
    s.firm_ids = b.metrics.firm_ids;
    s.sectors = b.metrics.sectors;
    s.models.assign(n, cutoff.model_name);
    s.times.assign(n, b.analysis_date.serial());

    OptSeries raw(n);
    for (std::size_t i = 0; i < n; ++i)
        if (auto it = outlook.find(firms[i].firm_id); it != outlook.end()) raw[i] = it->second;
    s.set(col::outlook_raw, raw);
    s.set(col::score, metrics::sector_zscore(raw, s.sectors, metrics::SmallSector::SetMissing).z);

    const auto& m = b.metrics;
    s.set(col::size, m.size);
    s.set(col::quality, m.quality);
    s.set(col::value, m.value);
    s.set(col::momentum, m.momentum);
    s.set(col::z_invpe, m.cheap.z_invpe);
    s.set(col::z_ice_gls, m.cheap.z_ice_gls);
    s.set(col::z_ice_peg, m.cheap.z_ice_peg);
    s.set(col::z_inveveb, m.cheap.z_inveveb);
    s.set(col::cheap_composite, m.cheap.composite());
    s.set(col::log_mcap, m.log_mcap);
    s.set(col::analyst_coverage, m.analyst_coverage);
    s.set(col::pt_coverage, m.pt_coverage);
    s.set(col::pt_dispersion, m.pt_dispersion);
    s.set(col::leverage, m.leverage);
    s.set(col::trading_volume, m.trading_volume);
    for (auto leg : {metrics::Leg::InvPE, metrics::Leg::IceGls, metrics::Leg::IcePeg, metrics::Leg::InvEveb,
                     metrics::Leg::Composite})
        s.set(col::mismatch(leg), metrics::mismatch(s.column(col::score), m.cheap, leg));

    std::vector<OptSeries> rets(panel::kHorizonMonths.size(), OptSeries(n));
    for (std::size_t i = 0; i < n; ++i) {
        auto it = data.prices.find(firms[i].firm_id);
        if (it == data.prices.end()) continue;
        for (std::size_t h = 0; h < panel::kHorizonMonths.size(); ++h) {
            try {
                rets[h][i] = panel::horizon_return(it->second, b.analysis_date, panel::kHorizonMonths[h],
                                                   data.calendar, opt.horizon_policy);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::HorizonUnavailable && e.code() != ErrorCode::MissingPrice) throw;
            }
        }
    }
    for (std::size_t h = 0; h < panel::kHorizonMonths.size(); ++h)
        s.set(col::ret(panel::kHorizonMonths[h]), rets[h]);

    if (outcomes) {
        OptSeries rev(n), ni(n), tp(n);
        for (std::size_t i = 0; i < n; ++i)
            if (auto it = outcomes->find(firms[i].firm_id); it != outcomes->end()) {
                rev[i] = it->second.d_revenue;
                ni[i] = it->second.d_net_income;
                tp[i] = it->second.d_target_price;
            }
        s.set(col::d_revenue, rev);
        s.set(col::d_net_income, ni);
        s.set(col::d_target_price, tp);
    }
    return b;
}

/// outcomes.csv: firm_id,date,d_revenue_12m,d_net_income_12m,d_target_price_12m
inline std::map<long, std::map<std::string, Outcomes>> load_outcomes(const std::filesystem::path& path) {
    auto t = csv::read_file(path);
    auto need = [&](const char* name) {
        auto c = t.column(name);
        if (!c) fail(ErrorCode::ParseError, path.string() + ": missing column '" + name + "'");
        return *c;
    };
    auto cf = need("firm_id"), cd = need("date"), cr = need(col::d_revenue), cn = need(col::d_net_income),
         ct = need(col::d_target_price);
    std::map<long, std::map<std::string, Outcomes>> out;
    for (const auto& row : t.rows) {
        if (row.cells.size() != t.header.size())
            fail(ErrorCode::ParseError, path.string() + ":" + std::to_string(row.line) + ": bad row");
        out[Date::parse(row.cells[cd]).serial()][row.cells[cf]] =
            Outcomes{csv::parse_number(row.cells[cr]), csv::parse_number(row.cells[cn]),
                     csv::parse_number(row.cells[ct])};
    }
    return out;
}

}  // namespace capsule

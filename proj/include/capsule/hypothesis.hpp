#pragma once

// The four hypothesis families as report tables. Every estimate is wrapped so a
// failing regression becomes a diagnostics row rather than aborting the run.

#include <algorithm>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "capsule/dataset.hpp"
#include "capsule/econometrics.hpp"
#include "capsule/panel.hpp"
#include "capsule/report.hpp"

namespace capsule::econ {

inline const std::vector<std::string> kControls4{col::size, col::quality, col::value, col::momentum};
inline const std::vector<std::string> kControls8{col::size,    col::quality,   col::value,     col::momentum,
                                                 col::z_invpe, col::z_ice_gls, col::z_ice_peg, col::z_inveveb};
inline const std::vector<std::string> kProxies{col::analyst_coverage, col::pt_coverage, col::pt_dispersion,
                                               col::leverage, col::trading_volume};

/// Four-control fundamental validation regression.
inline DesignSpec h1_spec(const std::string& outcome) {
    DesignSpec s;
    s.response = outcome;
    s.predictor = col::score;
    s.controls = kControls4;
    return s;
}

/// Eight-control return regression.
inline DesignSpec h2_spec(int horizon_months, std::vector<Dim> fe = {}) {
    DesignSpec s;
    s.response = col::ret(horizon_months);
    s.predictor = col::score;
    s.controls = kControls8;
    s.fixed_effects = std::move(fe);
    return s;
}

struct ModelSection {
    panel::Cutoff cutoff;
    CrossSection section;
};

struct SuiteOptions {
    std::string primary_model;                  // empty → first section
    std::vector<std::string> capability_order;  // most capable first; empty → largest N per cutoff
    int nw_lag = 1;
    int dk_lag = 1;
    std::size_t bootstrap_resamples = 10000;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::set<std::string> presets{"h1", "h2", "h3", "h4"};
};

inline const std::vector<std::string> kCoefHeader{"spec", "model", "horizon", "term", "coef", "se", "t",
                                                  "p",    "n",     "r2",      "scheme"};

namespace detail {

inline void add_fit(ReportTable& t, const std::string& spec, const std::string& model, const std::string& horizon,
                    const RegressionFit& f) {
    for (const auto& name : f.names) {
        if (name.rfind("fe_", 0) == 0) continue;
        t.add({spec, model, horizon, name, fmt(f.coef(name)), fmt(f.se(name)), fmt(f.t(name)), fmt(f.p(name)),
               std::to_string(f.n), fmt(f.r2), f.scheme});
    }
}

/// Run `body`; a capsule::Error becomes a diagnostics row.
template <class F>
bool guarded(Report& r, const std::string& stage, const std::string& spec, const std::string& model, F&& body) {
    try {
        body();
        return true;
    } catch (const Error& e) {
        r.diagnostic(stage, spec, model, std::string(capsule::to_string(e.code())), e.detail());
        return false;
    }
}

inline std::string horizon_label(int m) { return std::to_string(m) + "m"; }

}  // namespace detail

/// Rows of the size tercile `which` (0 small, 1 mid, 2 large) within the design
/// sample of `spec`: equal-count thirds by log market cap, ties by firm_id,
/// remainder to the lower terciles.
inline CrossSection size_tercile(const CrossSection& cs, const DesignSpec& spec, int which) {
    DesignSpec s = spec;
    if (std::find(s.controls.begin(), s.controls.end(), col::log_mcap) == s.controls.end() &&
        s.predictor != col::log_mcap)
        s.controls.push_back(col::log_mcap);
    auto d = build_design(cs, s);
    const auto& lm = cs.column(col::log_mcap);
    auto rows = d.rows;
    std::sort(rows.begin(), rows.end(), [&](std::size_t a, std::size_t b) {
        if (*lm[a] != *lm[b]) return *lm[a] < *lm[b];
        return cs.firm_ids[a] < cs.firm_ids[b];
    });
    const std::size_t n = rows.size(), base = n / 3, extra = n % 3;
    std::size_t begin = 0;
    for (int t = 0; t < which; ++t) begin += base + (static_cast<std::size_t>(t) < extra ? 1 : 0);
    const std::size_t len = base + (static_cast<std::size_t>(which) < extra ? 1 : 0);
    std::vector<char> keep(cs.rows(), 0);
    for (std::size_t i = begin; i < begin + len; ++i) keep[rows[i]] = 1;
    return cs.subset([&](std::size_t i) { return keep[i] != 0; });
}

/// One section per distinct cutoff date: the first model in `order` present at
/// that date, otherwise the model with the most rows (ties by name).
inline std::vector<const ModelSection*> one_per_cutoff(const std::vector<ModelSection>& sections,
                                                       const std::vector<std::string>& order) {
    std::map<long, std::vector<const ModelSection*>> by_time;
    for (const auto& s : sections)
        by_time[s.cutoff.knowledge_cutoff.serial()].push_back(&s);
    std::vector<const ModelSection*> out;
    for (auto& [t, group] : by_time) {
        const ModelSection* pick = nullptr;
        for (const auto& name : order) {
            for (const auto* s : group)
                if (s->cutoff.model_name == name) pick = s;
            if (pick) break;
        }
        if (!pick) {
            pick = group.front();
            for (const auto* s : group)
                if (s->section.rows() > pick->section.rows() ||
                    (s->section.rows() == pick->section.rows() && s->cutoff.model_name < pick->cutoff.model_name))
                    pick = s;
        }
        out.push_back(pick);
    }
    return out;
}

inline void run_h1(const ModelSection& primary, Report& r) {
    auto& t = r.table("h1_validation", kCoefHeader);
    for (const char* outcome : {col::d_revenue, col::d_net_income, col::d_target_price}) {
        const std::string spec = std::string("h1_") + outcome;
        detail::guarded(r, "h1", spec, primary.cutoff.model_name, [&] {
            if (!primary.section.has(outcome))
                fail(ErrorCode::InsufficientData, std::string("no outcome column ") + outcome);
            detail::add_fit(t, spec, primary.cutoff.model_name, "12m", fit(primary.section, h1_spec(outcome), Iid{}));
        });
    }
}

inline const std::vector<std::string> kRobustHeader{
    "spec", "horizon", "estimate", "se", "t", "p", "se_iid", "se_iid_population", "t_iid", "sections", "n",
    "scheme", "boot_ci_lo", "boot_ci_hi", "boot_p"};

namespace detail {

inline void add_fm(ReportTable& t, const std::string& spec, const std::string& horizon, const FMResult& fm,
                   Index n) {
    const auto& b = fm.bootstrap;
    t.add({spec, horizon, fmt(fm.mean), fmt(fm.se_nw), fmt(fm.t_nw), fmt(fm.p_nw), fmt(fm.se_iid),
           fmt(fm.se_iid_population), fmt(fm.t_iid), std::to_string(fm.coefficients.size()), std::to_string(n),
           "fama_macbeth_nw(" + std::to_string(fm.lag) + ")", b ? fmt(b->ci_lo) : "", b ? fmt(b->ci_hi) : "",
           b ? fmt(b->p_value) : ""});
}

}  // namespace detail

inline void run_h2(const std::vector<ModelSection>& sections, const ModelSection& primary,
                   const SuiteOptions& opt, Report& r) {
    auto& per_model = r.table("h2_per_model", kCoefHeader);
    for (const auto& s : sections)
        for (int h : panel::kHorizonMonths)
            detail::guarded(r, "h2", "h2_per_model", s.cutoff.model_name, [&] {
                detail::add_fit(per_model, "h2_per_model", s.cutoff.model_name, detail::horizon_label(h),
                                fit(s.section, h2_spec(h), Iid{}));
            });

    // mismatch decomposition on the primary model
    auto& mm = r.table("h2_mismatch", kCoefHeader);
    auto& wald = r.table("h2_mismatch_wald", {"spec", "model", "restriction", "f", "p", "df1", "df2"});
    const auto& pm = primary.cutoff.model_name;
    auto mm_spec = [&](const std::string& predictor, std::vector<std::string> extra) {
        DesignSpec s;
        s.response = col::ret(1);
        s.predictor = predictor;
        s.controls = std::move(extra);
        s.controls.insert(s.controls.end(), kControls4.begin(), kControls4.end());
        return s;
    };
    const std::vector<std::pair<std::string, DesignSpec>> mm_specs{
        {"mm_cheapness_only", mm_spec(col::cheap_composite, {})},
        {"mm_score_only", mm_spec(col::score, {})},
        {"mm_mismatch_composite", mm_spec(col::mismatch(metrics::Leg::Composite), {})},
        {"mm_score_and_cheapness", mm_spec(col::score, {col::cheap_composite})},
        {"mm_mismatch_invpe", mm_spec(col::mismatch(metrics::Leg::InvPE), {})},
        {"mm_mismatch_ice_gls", mm_spec(col::mismatch(metrics::Leg::IceGls), {})},
        {"mm_mismatch_ice_peg", mm_spec(col::mismatch(metrics::Leg::IcePeg), {})},
        {"mm_mismatch_inveveb", mm_spec(col::mismatch(metrics::Leg::InvEveb), {})},
    };
    for (const auto& [name, spec] : mm_specs)
        detail::guarded(r, "h2", name, pm, [&] {
            auto f = fit(primary.section, spec, Iid{});
            detail::add_fit(mm, name, pm, "1m", f);
            if (name == "mm_score_and_cheapness") {
                auto w = wald_equal(f, col::score, col::cheap_composite);
                wald.add({name, pm, "score = cheap_composite", fmt(w.f), fmt(w.p), std::to_string(w.df1),
                          fmt(w.df2)});
            }
        });

    std::vector<CrossSection> all;
    for (const auto& s : sections) all.push_back(s.section);
    const auto pooled = pool(all);

    auto& pooled_t = r.table("h2_pooled", kCoefHeader);
    for (int h : panel::kHorizonMonths) {
        detail::guarded(r, "h2", "pooled_model_fe", "pooled", [&] {
            detail::add_fit(pooled_t, "pooled_model_fe", "pooled", detail::horizon_label(h),
                            fit(pooled, h2_spec(h, {Dim::Model}), Cluster{Dim::Model}));
        });
        detail::guarded(r, "h2", "pooled_model_sector_fe", "pooled", [&] {
            detail::add_fit(pooled_t, "pooled_model_sector_fe", "pooled", detail::horizon_label(h),
                            fit(pooled, h2_spec(h, {Dim::Model, Dim::Sector}), Cluster{Dim::Model}));
        });
    }

    // overlap-robust panels
    auto& robust = r.table("h2_overlap_robust", kRobustHeader);
    const auto picks = one_per_cutoff(sections, opt.capability_order);
    for (int h : panel::kHorizonMonths) {
        const auto hl = detail::horizon_label(h);
        detail::guarded(r, "h2", "driscoll_kraay_pooled", "pooled", [&] {
            auto f = fit(pooled, h2_spec(h, {Dim::Model}), DriscollKraay{opt.dk_lag});
            robust.add({"driscoll_kraay_pooled", hl, fmt(f.coef(col::score)), fmt(f.se(col::score)),
                        fmt(f.t(col::score)), fmt(f.p(col::score)), "", "", "", std::to_string(f.groups),
                        std::to_string(f.n), f.scheme, "", "", ""});
        });
        auto fm_over = [&](const std::string& name, const std::vector<const ModelSection*>& group,
                           std::uint64_t stream) {
            detail::guarded(r, "h2", name, "pooled", [&] {
                std::vector<double> g;
                Index n = 0;
                for (const auto* s : group) {
                    bool ok = detail::guarded(r, "h2", name, s->cutoff.model_name, [&] {
                        auto f = fit(s->section, h2_spec(h), Iid{});
                        g.push_back(f.coef(col::score));
                        n += f.n;
                    });
                    (void)ok;
                }
                auto fm = fama_macbeth(g, opt.nw_lag);
                if (g.size() >= 2)
                    fm.bootstrap = bootstrap_mean(g, opt.bootstrap_resamples,
                                                  substream_seed(opt.seed, stream * 16 + static_cast<unsigned>(h)),
                                                  opt.threads);
                detail::add_fm(robust, name, hl, fm, n);
            });
        };
        fm_over("fm_one_model_per_cutoff", picks, 1);
        std::vector<const ModelSection*> every;
        for (const auto& s : sections) every.push_back(&s);
        fm_over("fm_all_models", every, 2);
    }
}

inline void run_h3(const std::vector<ModelSection>& sections, const ModelSection& primary, Report& r) {
    const auto& pm = primary.cutoff.model_name;
    auto& terc = r.table("h3_size_terciles", kCoefHeader);
    const char* names[] = {"tercile_small", "tercile_mid", "tercile_large"};
    for (int k = 0; k < 3; ++k)
        detail::guarded(r, "h3", names[k], pm, [&] {
            auto sub = size_tercile(primary.section, h2_spec(1), k);
            detail::add_fit(terc, names[k], pm, "1m", fit(sub, h2_spec(1), Iid{}));
        });
    detail::guarded(r, "h3", "size_interaction", pm, [&] {
        auto s = h2_spec(1);
        s.interactions.push_back({col::score, col::size});
        detail::add_fit(terc, "size_interaction", pm, "1m", fit(primary.section, s, Iid{}));
    });

    std::vector<CrossSection> all;
    for (const auto& s : sections) all.push_back(s.section);
    const auto pooled = pool(all);
    auto& inter = r.table("h3_interactions", kCoefHeader);
    for (const auto& proxy : kProxies) {
        auto s = h2_spec(1);
        s.controls.push_back(proxy);
        s.interactions.push_back({col::score, proxy});
        const std::string single = "interact_" + proxy.substr(2) + "_single";
        const std::string pooled_name = "interact_" + proxy.substr(2) + "_pooled";
        detail::guarded(r, "h3", single, pm, [&] {
            detail::add_fit(inter, single, pm, "1m", fit(primary.section, s, Iid{}));
        });
        detail::guarded(r, "h3", pooled_name, "pooled", [&] {
            auto sp = s;
            sp.fixed_effects = {Dim::Model};
            detail::add_fit(inter, pooled_name, "pooled", "1m", fit(pooled, sp, Cluster{Dim::Model}));
        });
    }
}

inline void run_h4(const std::vector<ModelSection>& sections, const ModelSection& primary, Report& r) {
    auto& gam = r.table("h4_model_gamma", {"model", "knowledge_cutoff", "release_date", "architecture", "gamma",
                                           "se", "t", "p", "n"});
    std::vector<double> recency, gammas;
    for (const auto& s : sections)
        detail::guarded(r, "h4", "model_gamma", s.cutoff.model_name, [&] {
            auto f = fit(s.section, h2_spec(1), Iid{});
            gam.add({s.cutoff.model_name, s.cutoff.knowledge_cutoff.iso(), s.cutoff.release_date.iso(),
                     std::string(panel::to_string(s.cutoff.architecture)), fmt(f.coef(col::score)),
                     fmt(f.se(col::score)), fmt(f.t(col::score)), fmt(f.p(col::score)), std::to_string(f.n)});
            recency.push_back(static_cast<double>(s.cutoff.knowledge_cutoff.serial()));
            gammas.push_back(f.coef(col::score));
        });

    auto& sp = r.table("h4_spearman", {"test", "n", "rho", "p", "p_exact", "p_asymptotic"});
    auto add = [&](const std::string& name, const std::vector<double>& x, const std::vector<double>& y) {
        detail::guarded(r, "h4", name, "", [&] {
            auto s = spearman(x, y);
            sp.add({name, std::to_string(s.n), fmt(s.rho), fmt(s.p), s.p_exact ? fmt(*s.p_exact) : "",
                    fmt(s.p_asymptotic)});
        });
    };
    add("cutoff_recency_vs_gamma", recency, gammas);

    auto& hz = r.table("h4_horizon_gamma", {"spec", "horizon_months", "gamma", "se", "t", "n"});
    std::vector<double> tau, g_single, tau_p, g_pooled;
    std::vector<CrossSection> all;
    for (const auto& s : sections) all.push_back(s.section);
    const auto pooled = pool(all);
    for (int h : panel::kHorizonMonths) {
        detail::guarded(r, "h4", "horizon_single", primary.cutoff.model_name, [&] {
            auto f = fit(primary.section, h2_spec(h), Iid{});
            hz.add({"horizon_single", std::to_string(h), fmt(f.coef(col::score)), fmt(f.se(col::score)),
                    fmt(f.t(col::score)), std::to_string(f.n)});
            tau.push_back(h);
            g_single.push_back(f.coef(col::score));
        });
        detail::guarded(r, "h4", "horizon_pooled", "pooled", [&] {
            auto f = fit(pooled, h2_spec(h, {Dim::Model}), Cluster{Dim::Model});
            hz.add({"horizon_pooled", std::to_string(h), fmt(f.coef(col::score)), fmt(f.se(col::score)),
                    fmt(f.t(col::score)), std::to_string(f.n)});
            tau_p.push_back(h);
            g_pooled.push_back(f.coef(col::score));
        });
    }
    add("horizon_vs_gamma_single", tau, g_single);
    add("horizon_vs_gamma_pooled", tau_p, g_pooled);
}

/// Run the requested hypothesis families over the model sections.
inline Report run_hypothesis_suite(const std::vector<ModelSection>& sections, const SuiteOptions& opt = {}) {
    Report r;
    if (sections.empty()) {
        for (const auto& p : opt.presets)
            r.diagnostic(p, "all", "", std::string(capsule::to_string(ErrorCode::InsufficientSections)),
                         "no model cross-sections supplied");
        return r;
    }
    const ModelSection* primary = &sections.front();
    if (!opt.primary_model.empty()) {
        auto it = std::find_if(sections.begin(), sections.end(),
                               [&](const ModelSection& s) { return s.cutoff.model_name == opt.primary_model; });
        if (it == sections.end())
            fail(ErrorCode::InvalidArgument, "primary model '" + opt.primary_model + "' has no section");
        primary = &*it;
    }
    if (opt.presets.count("h1")) run_h1(*primary, r);
    if (opt.presets.count("h2")) run_h2(sections, *primary, opt, r);
    if (opt.presets.count("h3")) run_h3(sections, *primary, r);
    if (opt.presets.count("h4")) run_h4(sections, *primary, r);
    r.table("diagnostics", {"stage", "spec", "model", "code", "message"});
    return r;
}

}  // namespace capsule::econ

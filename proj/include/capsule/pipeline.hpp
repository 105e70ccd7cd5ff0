#pragma once

// Run configuration and the staged pipeline behind the command-line tool:
// ingest → score → metrics → regress → portfolio, plus probe and synth.
// A run writes <out>/tables/*.csv, <out>/manifest.json and <out>/logs/run.log.

#include <Eigen/Core>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <boost/version.hpp>
#include <nlohmann/json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <memory>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "capsule/core/csv.hpp"
#include "capsule/core/error.hpp"
#include "capsule/core/hash.hpp"
#include "capsule/dataset.hpp"
#include "capsule/hypothesis.hpp"
#include "capsule/panel.hpp"
#include "capsule/portfolio.hpp"
#include "capsule/report.hpp"
#include "capsule/scorer.hpp"
#include "capsule/scorer_http.hpp"
#include "capsule/synth.hpp"

namespace capsule::pipeline {

namespace fs = std::filesystem;

inline constexpr std::string_view kVersion = "1.0.0";

enum class ScorerChoice { Live, Mock, CacheOnly };

inline std::string_view to_string(ScorerChoice s) {
    switch (s) {
        case ScorerChoice::Live: return "live";
        case ScorerChoice::Mock: return "mock";
        case ScorerChoice::CacheOnly: return "cache-only";
    }
    return "unknown";
}

enum class Target { Ingest, Score, Metrics, Regress, Portfolio, Probe, Synth, Report };

inline std::string_view to_string(Target t) {
    switch (t) {
        case Target::Ingest: return "ingest";
        case Target::Score: return "score";
        case Target::Metrics: return "metrics";
        case Target::Regress: return "regress";
        case Target::Portfolio: return "portfolio";
        case Target::Probe: return "probe";
        case Target::Synth: return "synth";
        case Target::Report: return "report";
    }
    return "unknown";
}

struct RunConfig {
    // [data]
    std::string source = "files";  // files | synthetic
    fs::path data_dir;
    fs::path cutoffs;
    fs::path outcomes;
    fs::path risk_models;
    fs::path probes;
    fs::path planted_scores;
    // [scorer]
    ScorerChoice scorer = ScorerChoice::Mock;
    fs::path cache_dir = "cache";
    int max_attempts = 3;
    int backoff_ms = 200;
    // [universe]
    std::size_t top_n = 7000;
    panel::HorizonPolicy horizon_policy = panel::HorizonPolicy::Strict;
    // [regress]
    std::set<std::string> presets{"h1", "h2", "h3", "h4"};
    std::string primary_model;
    std::vector<std::string> capability_order;
    int nw_lag = 1;
    int dk_lag = 1;
    std::size_t bootstrap_resamples = 10000;
    // [portfolio]
    portfolio::OptimizerConfig optimizer{};
    int signal_life = 12;
    double cost_bps = 20.0;  // round trip
    // [synth]
    synth::SynthConfig synth{};
    // [run]
    std::uint64_t seed = 1;
    unsigned threads = 1;
    fs::path out = "out";
    bool strict = false;

    bool synthetic() const { return source == "synthetic"; }

    void validate() const {
        auto bad = [](const std::string& m) { fail(ErrorCode::ConfigError, m); };
        if (source != "files" && source != "synthetic") bad("data.source must be files or synthetic");
        for (const auto& p : presets)
            if (p != "h1" && p != "h2" && p != "h3" && p != "h4") bad("unknown preset '" + p + "'");
        if (max_attempts < 1) bad("scorer.max_attempts must be ≥ 1");
        if (backoff_ms < 0) bad("scorer.backoff_ms must be ≥ 0");
        if (top_n == 0) bad("universe.top_n must be positive");
        if (nw_lag < 0 || dk_lag < 0) bad("lags must be ≥ 0");
        if (bootstrap_resamples < 100) bad("regress.bootstrap_resamples must be ≥ 100");
        if (signal_life < 1) bad("portfolio.signal_life must be ≥ 1");
        if (!(cost_bps >= 0.0)) bad("portfolio.cost_bps must be ≥ 0");
        if (threads == 0) bad("run.threads must be ≥ 1");
        optimizer.validate();
        if (synthetic()) synth.validate();
    }

    /// Settings that determine results. The output directory and thread count are
    /// left out so relocated or differently threaded runs hash alike.
    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        auto& d = j["data"];
        d["source"] = source;
        if (!synthetic()) {
            d["dir"] = data_dir.generic_string();
            d["cutoffs"] = cutoffs.generic_string();
            d["outcomes"] = outcomes.generic_string();
            d["risk_models"] = risk_models.generic_string();
            d["probes"] = probes.generic_string();
            d["planted_scores"] = planted_scores.generic_string();
        }
        auto& s = j["scorer"];
        s["mode"] = std::string(to_string(scorer));
        s["max_attempts"] = max_attempts;
        auto& u = j["universe"];
        u["top_n"] = top_n;
        u["horizon_policy"] = horizon_policy == panel::HorizonPolicy::Strict ? "strict" : "clamp";
        auto& r = j["regress"];
        r["presets"] = std::vector<std::string>(presets.begin(), presets.end());
        r["primary_model"] = primary_model;
        r["capability_order"] = capability_order;
        r["nw_lag"] = nw_lag;
        r["dk_lag"] = dk_lag;
        r["bootstrap_resamples"] = bootstrap_resamples;
        auto& p = j["portfolio"];
        p["risk_aversion"] = optimizer.risk_aversion;
        p["shrinkage"] = optimizer.shrinkage;
        p["z_clip"] = optimizer.z_clip;
        p["cap"] = optimizer.cap;
        p["budget"] = optimizer.budget;
        p["long_only"] = optimizer.long_only;
        p["gamma_hat"] = optimizer.gamma_hat;
        p["kkt_tolerance"] = optimizer.kkt_tolerance;
        p["signal_life"] = signal_life;
        p["cost_bps"] = cost_bps;
        if (synthetic()) {
            auto& y = j["synth"];
            y["n_firms"] = synth.n_firms;
            y["n_cutoffs"] = synth.n_cutoffs;
            y["models_per_cutoff"] = synth.models_per_cutoff;
            y["n_sectors"] = synth.n_sectors;
            y["gamma"] = synth.gamma;
            y["score_cheap_corr"] = synth.score_cheap_corr;
            y["residual_vol"] = synth.residual_vol;
            y["common_shock_vol"] = synth.common_shock_vol;
            y["shock_score_loading"] = synth.shock_score_loading;
            y["delist_fraction"] = synth.delist_fraction;
            y["cutoff_spacing"] = synth.cutoff_spacing;
            y["start"] = synth.start.iso();
        }
        j["run"]["seed"] = seed;
        j["run"]["strict"] = strict;
        return j;
    }

    std::string hash() const { return hash_hex(to_json().dump()); }
};

// ---------------------------------------------------------------------------
// Config file and overrides

namespace detail {

inline std::string trim(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        if (auto t = trim(item); !t.empty()) out.push_back(t);
    return out;
}

inline double to_double(const std::string& key, const std::string& v) {
    double x = 0.0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(x))
        fail(ErrorCode::ConfigError, key + ": not a number '" + v + "'");
    return x;
}

template <class Int>
Int to_int(const std::string& key, const std::string& v) {
    Int x{};
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc{} || p != v.data() + v.size()) fail(ErrorCode::ConfigError, key + ": not an integer '" + v + "'");
    return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    fail(ErrorCode::ConfigError, key + ": not a boolean '" + v + "'");
}

}  // namespace detail

inline ScorerChoice parse_scorer(const std::string& v) {
    if (v == "live") return ScorerChoice::Live;
    if (v == "mock") return ScorerChoice::Mock;
    if (v == "cache-only") return ScorerChoice::CacheOnly;
    fail(ErrorCode::ConfigError, "scorer mode must be live, mock or cache-only, got '" + v + "'");
}

/// "all" or a comma list of h1..h4.
inline std::set<std::string> parse_presets(const std::string& v) {
    std::set<std::string> out;
    for (const auto& p : detail::split_list(v)) {
        if (p == "all") {
            out.insert({"h1", "h2", "h3", "h4"});
        } else if (p == "h1" || p == "h2" || p == "h3" || p == "h4") {
            out.insert(p);
        } else {
            fail(ErrorCode::ConfigError, "unknown preset '" + p + "'");
        }
    }
    if (out.empty()) fail(ErrorCode::ConfigError, "empty preset list");
    return out;
}

/// Set one "section.key" value. Relative paths resolve against `base`.
inline void apply_setting(RunConfig& c, const std::string& key, const std::string& raw, const fs::path& base) {
    using namespace detail;
    const std::string v = trim(raw);
    auto path = [&]() -> fs::path {
        if (v.empty()) return {};
        fs::path p(v);
        return p.is_absolute() ? p : (base / p).lexically_normal();
    };
    auto uint = [&] { return to_int<std::size_t>(key, v); };
    auto dbl = [&] { return to_double(key, v); };

    if (key == "data.source") c.source = v;
    else if (key == "data.dir") c.data_dir = path();
    else if (key == "data.cutoffs") c.cutoffs = path();
    else if (key == "data.outcomes") c.outcomes = path();
    else if (key == "data.risk_models") c.risk_models = path();
    else if (key == "data.probes") c.probes = path();
    else if (key == "data.planted_scores") c.planted_scores = path();
    else if (key == "scorer.mode") c.scorer = parse_scorer(v);
    else if (key == "scorer.cache") c.cache_dir = path();
    else if (key == "scorer.max_attempts") c.max_attempts = to_int<int>(key, v);
    else if (key == "scorer.backoff_ms") c.backoff_ms = to_int<int>(key, v);
    else if (key == "universe.top_n") c.top_n = uint();
    else if (key == "universe.horizon_policy") {
        if (v == "strict") c.horizon_policy = panel::HorizonPolicy::Strict;
        else if (v == "clamp") c.horizon_policy = panel::HorizonPolicy::ClampToAvailable;
        else fail(ErrorCode::ConfigError, key + ": expected strict or clamp");
    }
    else if (key == "regress.presets") c.presets = parse_presets(v);
    else if (key == "regress.primary_model") c.primary_model = v;
    else if (key == "regress.capability_order") c.capability_order = split_list(v);
    else if (key == "regress.nw_lag") c.nw_lag = to_int<int>(key, v);
    else if (key == "regress.dk_lag") c.dk_lag = to_int<int>(key, v);
    else if (key == "regress.bootstrap_resamples") c.bootstrap_resamples = uint();
    else if (key == "portfolio.risk_aversion") c.optimizer.risk_aversion = dbl();
    else if (key == "portfolio.shrinkage") c.optimizer.shrinkage = dbl();
    else if (key == "portfolio.z_clip") c.optimizer.z_clip = dbl();
    else if (key == "portfolio.cap") c.optimizer.cap = dbl();
    else if (key == "portfolio.budget") c.optimizer.budget = dbl();
    else if (key == "portfolio.long_only") c.optimizer.long_only = to_bool(key, v);
    else if (key == "portfolio.gamma_hat") c.optimizer.gamma_hat = dbl();
    else if (key == "portfolio.kkt_tolerance") c.optimizer.kkt_tolerance = dbl();
    else if (key == "portfolio.signal_life") c.signal_life = to_int<int>(key, v);
    else if (key == "portfolio.cost_bps") c.cost_bps = dbl();
    else if (key == "synth.n_firms") c.synth.n_firms = uint();
    else if (key == "synth.n_cutoffs") c.synth.n_cutoffs = uint();
    else if (key == "synth.models_per_cutoff") c.synth.models_per_cutoff = uint();
    else if (key == "synth.n_sectors") c.synth.n_sectors = uint();
    else if (key == "synth.gamma") c.synth.gamma = dbl();
    else if (key == "synth.score_cheap_corr") c.synth.score_cheap_corr = dbl();
    else if (key == "synth.residual_vol") c.synth.residual_vol = dbl();
    else if (key == "synth.common_shock_vol") c.synth.common_shock_vol = dbl();
    else if (key == "synth.shock_score_loading") c.synth.shock_score_loading = dbl();
    else if (key == "synth.delist_fraction") c.synth.delist_fraction = dbl();
    else if (key == "synth.cutoff_spacing") c.synth.cutoff_spacing = uint();
    else if (key == "synth.start") c.synth.start = Date::parse(v);
    else if (key == "run.seed") c.seed = to_int<std::uint64_t>(key, v);
    else if (key == "run.threads") c.threads = to_int<unsigned>(key, v);
    else if (key == "run.out") c.out = path();
    else if (key == "run.strict") c.strict = to_bool(key, v);
    else fail(ErrorCode::ConfigError, "unknown setting '" + key + "'");
}

/// Sectioned key = value file; relative paths are taken from the file's directory.
inline void load_config_file(RunConfig& c, const fs::path& file) {
    if (!fs::exists(file)) fail(ErrorCode::IoError, "missing input file: " + file.string());
    boost::property_tree::ptree pt;
    try {
        boost::property_tree::ini_parser::read_ini(file.string(), pt);
    } catch (const boost::property_tree::ini_parser_error& e) {
        fail(ErrorCode::ConfigError, file.string() + ":" + std::to_string(e.line()) + ": " + e.message());
    }
    const fs::path base = file.has_parent_path() ? file.parent_path() : fs::path(".");
    for (const auto& [section, body] : pt) {
        if (body.empty()) fail(ErrorCode::ConfigError, file.string() + ": setting '" + section + "' outside a section");
        for (const auto& [key, value] : body) apply_setting(c, section + "." + key, value.data(), base);
    }
}

/// Command-line settings layered over the config file.
struct Overrides {
    fs::path config;
    std::vector<std::string> set;  // section.key=value, applied in order
    std::string preset;
    std::string scorer;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    fs::path out;
    bool strict = false;
};

/// Defaults, then the config file, then --set pairs, then dedicated flags.
/// Relative --set paths resolve against `cwd`.
inline RunConfig build_config(const Overrides& o, const fs::path& cwd = fs::current_path()) {
    RunConfig c;
    if (!o.config.empty()) load_config_file(c, o.config);
    for (const auto& kv : o.set) {
        auto eq = kv.find('=');
        if (eq == std::string::npos) fail(ErrorCode::ConfigError, "--set expects key=value: " + kv);
        apply_setting(c, kv.substr(0, eq), kv.substr(eq + 1), cwd);
    }
    if (!o.preset.empty()) c.presets = parse_presets(o.preset);
    if (!o.scorer.empty()) c.scorer = parse_scorer(o.scorer);
    if (o.seed) c.seed = *o.seed;
    if (o.threads) c.threads = *o.threads;
    if (!o.out.empty()) c.out = (o.out.is_absolute() ? o.out : cwd / o.out).lexically_normal();
    if (o.strict) c.strict = true;
    return c;
}

// ---------------------------------------------------------------------------
// Run state

class RunLog {
public:
    void info(const std::string& stage, const std::string& msg) { lines_.push_back("[" + stage + "] " + msg); }
    const std::vector<std::string>& lines() const { return lines_; }
    std::string str() const {
        std::string s;
        for (const auto& l : lines_) s += l + "\n";
        return s;
    }

private:
    std::vector<std::string> lines_;
};

struct InputFile {
    std::string role;
    std::string file;  // relative to its root directory
    std::string hash;
};

struct Bundle {
    Report report;
    RunLog log;
    std::vector<InputFile> inputs;
    std::vector<std::string> stages;
    nlohmann::ordered_json manifest;
};

namespace detail {

inline void require_file(const fs::path& p, const std::string& what) {
    if (p.empty()) fail(ErrorCode::ConfigError, what + " path is not configured");
    if (!fs::exists(p)) fail(ErrorCode::IoError, "missing input file: " + p.string());
}

inline void hash_input(Bundle& b, const std::string& role, const fs::path& p, const fs::path& root) {
    b.inputs.push_back({role, p.lexically_relative(root).generic_string(), hash_file(p)});
}

inline std::string safe_name(const std::string& s) { return scorer::safe_path_component(s); }

}  // namespace detail

/// Resolved inputs after the synth step (if any).
struct Inputs {
    fs::path data_dir, cutoffs, outcomes, risk_models, probes, planted_scores;
};

class Pipeline {
public:
    explicit Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

    /// Run the stages behind `target` and write the bundle.
    Bundle run(Target target) {
        prepare_output();
        try {
            execute(target);
            finish("ok");
        } catch (const Error& e) {
            b_.log.info("error", std::string(capsule::to_string(e.code())) + ": " + e.detail());
            finish("failed");
            throw;
        }
        return std::move(b_);
    }

    const RunConfig& config() const { return cfg_; }

    /// Test hook: supply the client used for live scoring and probing.
    void set_live_client_factory(std::function<std::unique_ptr<scorer::ScorerClient>(const std::string&)> f) {
        live_factory_ = std::move(f);
    }

private:
    RunConfig cfg_;
    Bundle b_;
    Inputs in_;
    panel::Panel panel_;
    std::vector<panel::Cutoff> cutoffs_;
    std::map<std::string, std::map<std::string, int>> outlook_;
    std::vector<econ::ModelSection> sections_;
    std::function<std::unique_ptr<scorer::ScorerClient>(const std::string&)> live_factory_;

    fs::path tables_dir() const { return cfg_.out / "tables"; }

    void prepare_output() {
        fs::create_directories(cfg_.out);
        fs::remove_all(tables_dir());
        fs::remove(cfg_.out / "manifest.json");
        fs::remove(cfg_.out / "logs" / "run.log");
        fs::create_directories(tables_dir());
        fs::create_directories(cfg_.out / "logs");
    }

    void stage(const char* name) { b_.stages.emplace_back(name); }

    void execute(Target t) {
        resolve_inputs(t);
        switch (t) {
            case Target::Synth: return;
            case Target::Probe: probe(true); return;
            case Target::Ingest: ingest(); return;
            case Target::Score: ingest(); score(); return;
            case Target::Metrics: ingest(); score(); metrics(); return;
            case Target::Regress: ingest(); score(); metrics(); regress(); return;
            case Target::Portfolio: ingest(); score(); metrics(); portfolio(); return;
            case Target::Report:
                ingest();
                score();
                metrics();
                regress();
                portfolio();
                probe(false);
                return;
        }
    }

    void resolve_inputs(Target t) {
        if (cfg_.synthetic() || t == Target::Synth) {
            stage("synth");
            auto sc = cfg_.synth;
            sc.seed = cfg_.seed;
            const fs::path dir = cfg_.out / "data";
            fs::remove_all(dir);
            auto d = synth::generate_panel(sc);
            synth::write_dataset(d, dir, true);
            b_.log.info("synth", std::to_string(d.firm_ids.size()) + " firms, " + std::to_string(d.cutoffs.size()) +
                                     " models, " + std::to_string(d.panel.calendar.size()) + " trading days");
            in_ = {dir, dir / "cutoffs.csv", dir / "outcomes.csv", dir / "riskmodel", dir / "probes.csv",
                   dir / "planted_scores.csv"};
            if (t == Target::Synth) {
                std::vector<fs::path> files;
                for (const auto& e : fs::recursive_directory_iterator(dir))
                    if (e.is_regular_file()) files.push_back(e.path());
                std::sort(files.begin(), files.end());
                for (const auto& f : files) detail::hash_input(b_, "synth", f, dir);
                auto& tbl = b_.report.table("synth_truth", {"parameter", "value"});
                tbl.add({"gamma", fmt(d.truth.gamma)});
                for (std::size_t k = 0; k < d.truth.cutoff_slope.size(); ++k)
                    tbl.add({"cutoff_slope_" + std::to_string(k), fmt(d.truth.cutoff_slope[k])});
            }
        } else {
            in_ = {cfg_.data_dir, cfg_.cutoffs, cfg_.outcomes, cfg_.risk_models, cfg_.probes, cfg_.planted_scores};
        }
    }

    void ingest() {
        stage("ingest");
        if (in_.data_dir.empty()) fail(ErrorCode::ConfigError, "data.dir is not configured");
        auto paths = panel::PanelPaths::in_directory(in_.data_dir);
        for (const auto& [role, p] : {std::pair{"calendar", paths.calendar}, {"prices", paths.prices},
                                      {"fundamentals", paths.fundamentals}, {"analyst", paths.analyst}}) {
            detail::require_file(p, role);
            detail::hash_input(b_, role, p, in_.data_dir);
        }
        panel_ = panel::load_panel(paths, cfg_.strict);
        detail::require_file(in_.cutoffs, "cutoffs");
        detail::hash_input(b_, "cutoffs", in_.cutoffs, in_.cutoffs.parent_path());
        cutoffs_ = panel::load_cutoffs(in_.cutoffs);
        if (cutoffs_.empty()) fail(ErrorCode::InsufficientSections, in_.cutoffs.string() + ": no cutoffs");

        auto& s = b_.report.table("ingest_summary", {"item", "value"});
        s.add({"trading_days", std::to_string(panel_.calendar.size())});
        s.add({"snapshots", std::to_string(panel_.snapshots.size())});
        s.add({"price_series", std::to_string(panel_.prices.size())});
        s.add({"rejected_rows", std::to_string(panel_.rejections.size())});
        s.add({"cutoffs", std::to_string(cutoffs_.size())});
        auto& rej = b_.report.table("ingest_rejections", {"file", "line", "reason"});
        for (const auto& r : panel_.rejections)
            rej.add({fs::path(r.file).filename().string(), std::to_string(r.line), r.reason});
        b_.log.info("ingest", std::to_string(panel_.snapshots.size()) + " snapshots, " +
                                  std::to_string(panel_.prices.size()) + " price series, " +
                                  std::to_string(panel_.rejections.size()) + " rejected rows");
    }

    std::unique_ptr<scorer::ScorerClient> live_client(const std::string& model) {
        if (live_factory_) return live_factory_(model);
        return std::make_unique<scorer::HttpScorer>(scorer::HttpSettings::from_env(model));
    }

    std::vector<panel::FirmSnapshot> universe(const panel::Cutoff& c) const {
        SectionOptions so;
        auto date = panel::analysis_date(c.knowledge_cutoff, panel_.calendar);
        return panel::filter_universe(panel_.snapshots_on(date), cfg_.top_n, so.required_fields);
    }

    void score() {
        stage("score");
        std::map<std::string, std::map<std::string, int>> planted;
        if (cfg_.scorer == ScorerChoice::Mock && !in_.planted_scores.empty()) {
            detail::require_file(in_.planted_scores, "planted scores");
            detail::hash_input(b_, "planted_scores", in_.planted_scores, in_.planted_scores.parent_path());
            planted = synth::load_planted_scores(in_.planted_scores);
        }
        std::unique_ptr<scorer::ScoreCache> cache;
        if (cfg_.scorer != ScorerChoice::Mock) cache = std::make_unique<scorer::ScoreCache>(cfg_.cache_dir);

        auto& scores = b_.report.table("scores", {"model", "firm_id", "status", "outlook", "growth", "profitability",
                                                  "risk", "confidence", "knowledge_coverage", "cache_hit", "detail"});
        auto& miss = b_.report.table("scorer_missingness", {"model", "total", "ok", "malformed", "refusal",
                                                            "transport_error", "missingness"});
        for (const auto& c : cutoffs_) {
            auto firms = universe(c);
            std::unique_ptr<scorer::ScorerClient> client;
            if (cfg_.scorer == ScorerChoice::Mock) {
                auto it = planted.find(c.model_name);
                client = std::make_unique<scorer::MockScorer>(it == planted.end() ? std::map<std::string, int>{}
                                                                                  : it->second);
            } else if (cfg_.scorer == ScorerChoice::Live) {
                client = live_client(c.model_name);
            }
            scorer::ScoreOptions so;
            so.parallelism = cfg_.threads;
            so.max_attempts = cfg_.max_attempts;
            so.initial_backoff = std::chrono::milliseconds(cfg_.backoff_ms);
            so.mode = cfg_.scorer == ScorerChoice::CacheOnly ? scorer::ScorerMode::CacheOnly : scorer::ScorerMode::Live;
            auto batch = scorer::score_universe(firms, c, client.get(), cache.get(), so);

            auto& table = outlook_[c.model_name];
            for (const auto& f : batch.firms) {
                std::vector<std::string> row{c.model_name, f.firm_id, std::string(scorer::to_string(f.status))};
                if (f.assessment) {
                    const auto& a = *f.assessment;
                    table[f.firm_id] = a.outlook;
                    for (int v : {a.outlook, a.growth, a.profitability, a.risk, a.confidence, a.knowledge_coverage})
                        row.push_back(std::to_string(v));
                } else {
                    row.insert(row.end(), 6, "");
                }
                row.push_back(f.cache_hit ? "1" : "0");
                row.push_back(f.detail);
                scores.add(row);
            }
            const auto& r = batch.report;
            miss.add({c.model_name, std::to_string(r.total), std::to_string(r.ok), std::to_string(r.malformed),
                      std::to_string(r.refusal), std::to_string(r.transport_error), fmt(r.missingness())});
            b_.log.info("score", c.model_name + ": " + std::to_string(r.ok) + "/" + std::to_string(r.total) +
                                     " ok (" + std::string(to_string(cfg_.scorer)) + ")");
            if (cfg_.strict && r.ok != r.total)
                fail(ErrorCode::SchemaViolation, c.model_name + ": " + std::to_string(r.total - r.ok) +
                                                     " firms without a valid assessment (strict mode)");
        }
    }

    void metrics() {
        stage("metrics");
        std::map<long, std::map<std::string, Outcomes>> outcomes;
        if (!in_.outcomes.empty()) {
            detail::require_file(in_.outcomes, "outcomes");
            detail::hash_input(b_, "outcomes", in_.outcomes, in_.outcomes.parent_path());
            outcomes = load_outcomes(in_.outcomes);
        }
        SectionOptions so;
        so.top_n = cfg_.top_n;
        so.horizon_policy = cfg_.horizon_policy;
        std::vector<std::string> columns;
        for (const auto& c : cutoffs_) {
            auto date = panel::analysis_date(c.knowledge_cutoff, panel_.calendar);
            auto oc = outcomes.find(date.serial());
            auto b = build_cross_section(panel_, c, outlook_[c.model_name],
                                         in_.outcomes.empty() ? nullptr : (oc == outcomes.end() ? &kNoOutcomes : &oc->second),
                                         so);
            for (const auto& [name, _] : b.section.columns)
                if (std::find(columns.begin(), columns.end(), name) == columns.end()) columns.push_back(name);
            b_.log.info("metrics", c.model_name + ": " + std::to_string(b.section.rows()) + " firms at " +
                                       b.analysis_date.iso() + ", " + std::to_string(b.metrics.degenerate_sectors.size()) +
                                       " degenerate sectors");
            sections_.push_back({c, std::move(b.section)});
        }
        std::sort(columns.begin(), columns.end());
        std::vector<std::string> header{"model", "date", "firm_id", "sector"};
        header.insert(header.end(), columns.begin(), columns.end());
        auto& t = b_.report.table("cross_sections", header);
        auto& cov = b_.report.table("metric_coverage", {"model", "column", "present", "rows"});
        for (const auto& ms : sections_) {
            const auto& s = ms.section;
            for (std::size_t i = 0; i < s.rows(); ++i) {
                std::vector<std::string> row{s.models[i], Date::from_serial(s.times[i]).iso(), s.firm_ids[i],
                                             s.sectors[i]};
                for (const auto& c : columns)
                    row.push_back(s.has(c) ? csv::format_number(s.column(c)[i]) : std::string{});
                t.add(row);
            }
            for (const auto& c : columns) {
                std::size_t present = 0;
                if (s.has(c))
                    for (const auto& v : s.column(c)) present += v.has_value();
                cov.add({ms.cutoff.model_name, c, std::to_string(present), std::to_string(s.rows())});
            }
        }
    }

    void regress() {
        stage("regress");
        econ::SuiteOptions so;
        so.primary_model = cfg_.primary_model;
        so.capability_order = cfg_.capability_order;
        so.nw_lag = cfg_.nw_lag;
        so.dk_lag = cfg_.dk_lag;
        so.bootstrap_resamples = cfg_.bootstrap_resamples;
        so.seed = cfg_.seed;
        so.threads = cfg_.threads;
        so.presets = cfg_.presets;
        auto r = econ::run_hypothesis_suite(sections_, so);
        for (auto& t : r.tables) {
            auto& dst = b_.report.table(t.name, t.header);
            for (auto& row : t.rows) dst.add(std::move(row));
        }
        std::size_t fits = 0;
        for (const auto& t : b_.report.tables)
            if (t.name.rfind("h", 0) == 0) fits += t.rows.size();
        const auto* diag = b_.report.get("diagnostics");
        b_.log.info("regress", "presets " + join(cfg_.presets) + ": " + std::to_string(fits) + " result rows, " +
                                   std::to_string(diag ? diag->rows.size() : 0) + " diagnostics");
    }

    void portfolio() {
        stage("portfolio");
        auto& q = b_.report.table("quintile_sorts", {"model", "horizon", "sort", "n", "q1", "q2", "q3", "q4", "q5",
                                                     "spread", "t"});
        for (const auto& ms : sections_) {
            const auto& s = ms.section;
            for (int h : panel::kHorizonMonths) {
                const auto rc = col::ret(h);
                if (!s.has(rc)) continue;
                auto add = [&](const char* kind, const portfolio::QuintileResult& r) {
                    std::vector<std::string> row{ms.cutoff.model_name, std::to_string(h) + "m", kind,
                                                 std::to_string(r.n)};
                    for (double m : r.means) row.push_back(fmt(m));
                    row.push_back(fmt(r.spread));
                    row.push_back(fmt(r.t));
                    q.add(row);
                };
                try {
                    add("raw", portfolio::quintile_sort(s.firm_ids, s.column(col::score), s.column(rc)));
                    add("control_adjusted", adjusted_sort(s, rc));
                } catch (const Error& e) {
                    b_.report.diagnostic("portfolio", "quintile_" + std::to_string(h) + "m", ms.cutoff.model_name,
                                         std::string(capsule::to_string(e.code())), e.detail());
                }
            }
        }
        b_.log.info("portfolio", std::to_string(q.rows.size()) + " quintile sorts");

        if (in_.risk_models.empty()) {
            b_.log.info("portfolio", "no risk models configured; backtest skipped");
            return;
        }
        if (!fs::is_directory(in_.risk_models)) fail(ErrorCode::IoError, "missing input file: " + in_.risk_models.string());
        std::vector<fs::path> files;
        for (const auto& e : fs::recursive_directory_iterator(in_.risk_models))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& f : files) detail::hash_input(b_, "risk_model", f, in_.risk_models);
        auto risk = portfolio::RiskModelSeries::load(in_.risk_models);

        std::vector<portfolio::Signal> signals;
        for (const auto& ms : sections_) {
            portfolio::Signal sig;
            sig.cutoff = ms.cutoff;
            sig.analysis_date = Date::from_serial(ms.section.times.empty() ? 0 : ms.section.times.front());
            if (ms.section.rows() == 0) continue;
            const auto& sc = ms.section.column(col::score);
            for (std::size_t i = 0; i < ms.section.rows(); ++i)
                if (sc[i]) sig.scores[ms.section.firm_ids[i]] = *sc[i];
            signals.push_back(std::move(sig));
        }
        portfolio::BacktestConfig bc;
        bc.optimizer = cfg_.optimizer;
        bc.signal_life = cfg_.signal_life;
        bc.round_trip_cost = cfg_.cost_bps / 10000.0;
        bc.capability_order = cfg_.capability_order;
        auto res = portfolio::run_backtest(panel_, signals, risk, bc);

        auto& sum = b_.report.table(
            "backtest_summary",
            {"book", "months", "gross_ann_return", "gross_ann_vol", "gross_sharpe", "gross_mdd", "net_ann_return",
             "net_ann_vol", "net_sharpe", "net_mdd", "bench_ann_return", "bench_ann_vol", "bench_sharpe", "bench_mdd",
             "avg_turnover", "ann_cost_drag", "note"});
        for (const auto& book : res.books) {
            auto& l = b_.report.table("backtest_ledger_" + detail::safe_name(book.summary.book),
                                      {"period", "start", "end", "signal", "positions", "turnover", "formation",
                                       "gross", "cost", "net", "benchmark", "kkt_residual"});
            for (const auto& r : book.ledger)
                l.add({std::to_string(r.period), r.start.iso(), r.end.iso(), r.signal, std::to_string(r.positions),
                       fmt(r.turnover), r.formation ? "1" : "0", fmt(r.gross), fmt(r.cost), fmt(r.net),
                       fmt(r.benchmark), fmt(r.kkt_residual)});
            const auto& s = book.summary;
            std::vector<std::string> row{s.book, std::to_string(s.months)};
            for (const auto* p : {&s.gross, &s.net, &s.benchmark}) {
                if (*p) {
                    for (double v : {(*p)->ann_return, (*p)->ann_vol, (*p)->sharpe, (*p)->max_drawdown})
                        row.push_back(fmt(v));
                } else {
                    row.insert(row.end(), 4, "");
                }
            }
            row.push_back(fmt(s.avg_turnover));
            row.push_back(fmt(s.ann_cost_drag));
            row.push_back(s.note);
            sum.add(row);
        }
        b_.log.info("portfolio", std::to_string(res.books.size()) + " backtest books over " +
                                     std::to_string(risk.size()) + " risk models");
    }

    portfolio::QuintileResult adjusted_sort(const CrossSection& s, const std::string& rc) const {
        std::vector<std::size_t> rows;
        const auto& sc = s.column(col::score);
        const auto& r = s.column(rc);
        std::vector<const OptSeries*> ctl;
        for (const auto& c : econ::kControls8) ctl.push_back(&s.column(c));
        for (std::size_t i = 0; i < s.rows(); ++i) {
            bool ok = sc[i] && r[i];
            for (const auto* c : ctl) ok = ok && (*c)[i];
            if (ok) rows.push_back(i);
        }
        if (rows.size() < 5) fail(ErrorCode::TooFewFirms, "control-adjusted sort needs at least 5 complete rows");
        Eigen::VectorXd y(static_cast<Eigen::Index>(rows.size()));
        Eigen::MatrixXd X(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ctl.size()));
        for (std::size_t k = 0; k < rows.size(); ++k) {
            y(static_cast<Eigen::Index>(k)) = *sc[rows[k]];
            for (std::size_t j = 0; j < ctl.size(); ++j)
                X(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = *(*ctl[j])[rows[k]];
        }
        auto resid = portfolio::residualize(y, X);
        std::vector<std::string> ids;
        OptSeries adj, ret;
        for (std::size_t k = 0; k < rows.size(); ++k) {
            ids.push_back(s.firm_ids[rows[k]]);
            adj.push_back(resid(static_cast<Eigen::Index>(k)));
            ret.push_back(r[rows[k]]);
        }
        return portfolio::quintile_sort(ids, adj, ret);
    }

    void probe(bool required) {
        if (in_.probes.empty()) {
            if (required) fail(ErrorCode::ConfigError, "data.probes is not configured");
            b_.log.info("probe", "no probe file configured; skipped");
            return;
        }
        stage("probe");
        if (cfg_.scorer == ScorerChoice::CacheOnly) {
            b_.log.info("probe", "cache-only mode performs no scorer calls; skipped");
            return;
        }
        detail::require_file(in_.probes, "probes");
        detail::hash_input(b_, "probes", in_.probes, in_.probes.parent_path());
        auto probes = scorer::load_probes(in_.probes);
        if (cutoffs_.empty()) {
            detail::require_file(in_.cutoffs, "cutoffs");
            detail::hash_input(b_, "cutoffs", in_.cutoffs, in_.cutoffs.parent_path());
            cutoffs_ = panel::load_cutoffs(in_.cutoffs);
        }
        auto& t = b_.report.table("leakage_probe", {"model", "knowledge_cutoff", "probes", "accuracy", "client"});
        for (const auto& c : cutoffs_) {
            std::vector<scorer::Probe> post;
            for (const auto& p : probes)
                if (c.knowledge_cutoff < p.event_date) post.push_back(p);
            if (post.empty()) {
                b_.report.diagnostic("probe", "leakage_probe", c.model_name, "InsufficientData",
                                     "no probe dated after " + c.knowledge_cutoff.iso());
                continue;
            }
            std::unique_ptr<scorer::ScorerClient> client;
            if (cfg_.scorer == ScorerChoice::Mock)
                client = std::make_unique<scorer::CutoffRespectingMock>(c.knowledge_cutoff, probes);
            else
                client = live_client(c.model_name);
            const double acc = scorer::leakage_probe(*client, post);
            t.add({c.model_name, c.knowledge_cutoff.iso(), std::to_string(post.size()), fmt(acc),
                   cfg_.scorer == ScorerChoice::Mock ? "cutoff_respecting_mock" : "live"});
            b_.log.info("probe", c.model_name + ": accuracy " + fmt(acc) + " on " + std::to_string(post.size()) +
                                     " post-cutoff probes");
        }
    }

    static std::string join(const std::set<std::string>& s) {
        std::string out;
        for (const auto& x : s) out += (out.empty() ? "" : ",") + x;
        return out;
    }

    void finish(const std::string& status) {
        b_.report.table("diagnostics", {"stage", "spec", "model", "code", "message"});
        auto written = b_.report.write(tables_dir());

        nlohmann::ordered_json m;
        m["tool"] = "capsule";
        m["version"] = std::string(kVersion);
        m["versions"] = {{"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                       "." + std::to_string(EIGEN_MINOR_VERSION)},
                         {"boost", std::to_string(BOOST_VERSION / 100000) + "." +
                                       std::to_string(BOOST_VERSION / 100 % 1000) + "." +
                                       std::to_string(BOOST_VERSION % 100)},
                         {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                               std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                               std::to_string(NLOHMANN_JSON_VERSION_PATCH)}};
        m["status"] = status;
        m["seed"] = cfg_.seed;
        m["config_hash"] = cfg_.hash();
        m["config"] = cfg_.to_json();
        m["stages"] = b_.stages;
        auto& inputs = m["inputs"] = nlohmann::ordered_json::array();
        for (const auto& f : b_.inputs) inputs.push_back({{"role", f.role}, {"file", f.file}, {"hash", f.hash}});
        auto& tables = m["tables"] = nlohmann::ordered_json::array();
        auto& entries = m["entries"] = nlohmann::ordered_json::array();
        for (std::size_t i = 0; i < b_.report.tables.size(); ++i) {
            const auto& t = b_.report.tables[i];
            tables.push_back({{"name", t.name},
                              {"file", "tables/" + t.name + ".csv"},
                              {"rows", t.rows.size()},
                              {"hash", hash_file(written[i])}});
            // one entry per distinct (spec, model, horizon, n, scheme) in result tables
            auto has = [&](const char* c) { return std::find(t.header.begin(), t.header.end(), c) != t.header.end(); };
            if (!(has("spec") && has("n") && has("scheme"))) continue;
            std::set<std::vector<std::string>> seen;
            for (const auto& r : t.rows) {
                std::vector<std::string> key{r[t.column("spec")], has("model") ? r[t.column("model")] : "",
                                             has("horizon") ? r[t.column("horizon")] : "", r[t.column("n")],
                                             r[t.column("scheme")]};
                if (!seen.insert(key).second) continue;
                entries.push_back({{"table", t.name},
                                   {"spec", key[0]},
                                   {"model", key[1]},
                                   {"horizon", key[2]},
                                   {"n", key[3]},
                                   {"scheme", key[4]}});
            }
        }
        b_.manifest = m;
        {
            std::ofstream f(cfg_.out / "manifest.json", std::ios::binary);
            if (!f) fail(ErrorCode::IoError, "cannot write " + (cfg_.out / "manifest.json").string());
            f << m.dump(2) << '\n';
        }
        b_.log.info("report", std::to_string(written.size()) + " tables written, status " + status);
        std::ofstream lf(cfg_.out / "logs" / "run.log", std::ios::binary);
        if (!lf) fail(ErrorCode::IoError, "cannot write run log");
        lf << b_.log.str();
    }

    static inline const std::map<std::string, Outcomes> kNoOutcomes{};
};

}  // namespace capsule::pipeline

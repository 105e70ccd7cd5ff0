#pragma once

// Outlook scoring: prompt rendering, strict response validation, a pluggable
// client interface, an on-disk response cache and the post-cutoff leakage probe.

#include <algorithm>
#include <array>
#include <atomic>
#include <cctype>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "capsule/core/csv.hpp"
#include "capsule/core/date.hpp"
#include "capsule/core/error.hpp"
#include "capsule/core/hash.hpp"
#include "capsule/core/rng.hpp"
#include "capsule/panel.hpp"
#include "capsule/prompt_template.hpp"

namespace capsule::scorer {

struct PromptPair {
    std::string system_text;
    std::string user_text;

    std::string hash() const {
        return Fnv1a{}.update(system_text).update(std::string_view("\x1f", 1)).update(user_text).hex();
    }
    bool operator==(const PromptPair&) const = default;
};

inline constexpr std::array<std::string_view, 6> kPlaceholders{
    "{CUT_OFF_DATE}", "{COMPANY_NAME}", "{TICKER}", "{ISIN}", "{COUNTRY}", "{INDUSTRY_CODE}"};

namespace detail {

inline std::string substitute(std::string_view tpl, const std::map<std::string_view, std::string>& vals) {
    std::string out;
    out.reserve(tpl.size() + 64);
    std::size_t i = 0;
    while (i < tpl.size()) {
        bool hit = false;
        if (tpl[i] == '{') {
            for (const auto& [key, value] : vals) {
                if (tpl.substr(i, key.size()) == key) {
                    out += value;
                    i += key.size();
                    hit = true;
                    break;
                }
            }
        }
        if (!hit) out.push_back(tpl[i++]);
    }
    return out;
}

}  // namespace detail

/// Fill the prompt templates for one firm. The firm_id is rendered as the ISIN and
/// the GICS sector label as the industry code.
inline PromptPair render_prompt(const panel::FirmSnapshot& firm, const panel::Cutoff& cutoff) {
    const std::array<std::pair<std::string_view, const std::string*>, 5> ids{{
        {"name", &firm.name},
        {"ticker", &firm.ticker},
        {"firm_id", &firm.firm_id},
        {"country", &firm.country},
        {"sector", &firm.sector},
    }};
    for (const auto& [field, value] : ids)
        if (value->empty()) fail(ErrorCode::TemplateError, "empty identifier '" + std::string(field) + "'");

    const std::map<std::string_view, std::string> vals{
        {"{CUT_OFF_DATE}", cutoff.knowledge_cutoff.iso()},
        {"{COMPANY_NAME}", firm.name},
        {"{TICKER}", firm.ticker},
        {"{ISIN}", firm.firm_id},
        {"{COUNTRY}", firm.country},
        {"{INDUSTRY_CODE}", firm.sector},
    };
    PromptPair p{detail::substitute(kSystemTemplate, vals), detail::substitute(kUserTemplate, vals)};
    for (auto ph : kPlaceholders) {
        // an identifier could itself contain a placeholder token
        if (p.system_text.find(ph) != std::string::npos || p.user_text.find(ph) != std::string::npos)
            fail(ErrorCode::TemplateError, "placeholder " + std::string(ph) + " left in prompt");
    }
    return p;
}

// ---------------------------------------------------------------------------
// Structured response

inline constexpr std::array<std::string_view, 12> kDriverTaxonomy{
    "product_cycle", "pricing_power",  "regulation",      "competition",
    "supply_chain",  "capital_needs",  "macro_exposure",  "IP_legal",
    "mgmt_execution", "network_effects", "customer_concentration", "input_costs"};

inline constexpr std::array<std::string_view, 5> kRevenueBins{
    "less_than_minus_10", "minus_10_to_0", "plus_0_to_5", "plus_5_to_10", "greater_than_plus_10"};
inline constexpr std::array<std::string_view, 5> kEpsBins{
    "less_than_minus_20", "minus_20_to_0", "plus_0_to_10", "plus_10_to_25", "greater_than_plus_25"};
inline constexpr std::array<std::string_view, 5> kMarginBins{
    "less_than_minus_2pp", "minus_2pp_to_0pp", "plus_0pp_to_1pp", "plus_1pp_to_2pp",
    "greater_than_plus_2pp"};

inline constexpr std::size_t kMaxRationaleTokens = 30;

using Bins = std::array<int, 5>;

struct OutlookAssessment {
    std::string knowledge_cutoff_date;
    std::string name;
    std::string ticker;
    std::string country;
    std::string industry_code;
    int horizon_months = 12;
    int outlook = 0;
    int growth = 0;
    int profitability = 0;
    int risk = 0;
    int confidence = 0;
    Bins revenue_growth_bins{};
    Bins eps_growth_bins{};
    Bins margin_change_bins{};
    std::vector<std::string> drivers;
    std::string rationale_short;
    int knowledge_coverage = 0;

    bool operator==(const OutlookAssessment&) const = default;
};

inline std::size_t whitespace_tokens(std::string_view s) {
    std::size_t n = 0;
    bool in_token = false;
    for (unsigned char c : s) {
        bool ws = std::isspace(c) != 0;
        if (!ws && !in_token) ++n;
        in_token = !ws;
    }
    return n;
}

namespace detail {

using nlohmann::json;

[[noreturn]] inline void schema(const std::string& field, const std::string& reason) {
    fail(ErrorCode::SchemaViolation, field + ": " + reason);
}

inline const json& member(const json& obj, std::string_view key, const std::string& path) {
    auto it = obj.find(key);
    if (it == obj.end()) schema(path + "." + std::string(key), "missing");
    return *it;
}

inline void exact_keys(const json& obj, std::initializer_list<std::string_view> keys,
                       const std::string& path) {
    if (!obj.is_object()) schema(path, "expected object");
    for (auto it = obj.begin(); it != obj.end(); ++it)
        if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
            schema(path + "." + it.key(), "unexpected field");
    for (auto k : keys) member(obj, k, path);
}

inline int integer(const json& obj, std::string_view key, const std::string& path, int lo, int hi) {
    const auto& v = member(obj, key, path);
    std::string field = path + "." + std::string(key);
    if (!v.is_number_integer()) schema(field, v.is_string() ? "number given as string" : "expected integer");
    auto x = v.get<long long>();
    if (x < lo || x > hi)
        fail(ErrorCode::RangeViolation,
             field + " = " + std::to_string(x) + " outside [" + std::to_string(lo) + ", " +
                 std::to_string(hi) + "]");
    return static_cast<int>(x);
}

inline std::string string(const json& obj, std::string_view key, const std::string& path) {
    const auto& v = member(obj, key, path);
    if (!v.is_string()) schema(path + "." + std::string(key), "expected string");
    return v.get<std::string>();
}

inline Bins bins(const json& dist, std::string_view key, const std::array<std::string_view, 5>& names) {
    std::string path = "distributions." + std::string(key);
    const auto& obj = member(dist, key, "distributions");
    exact_keys(obj, {names[0], names[1], names[2], names[3], names[4]}, path);
    Bins out{};
    long sum = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        out[i] = integer(obj, names[i], path, 0, 100);
        sum += out[i];
    }
    if (sum != 100)
        fail(ErrorCode::BinSumViolation, std::string(key) + " sums to " + std::to_string(sum));
    return out;
}

}  // namespace detail

/// Strict parse of one scorer response. Numbers must be JSON numbers, every bin
/// vector must sum to exactly 100, drivers must come from the fixed taxonomy.
inline OutlookAssessment parse_validate(std::string_view raw) {
    using detail::json;
    json doc;
    try {
        doc = json::parse(raw.begin(), raw.end());
    } catch (const json::parse_error& e) {
        fail(ErrorCode::NotJson, e.what());
    }
    if (!doc.is_object()) fail(ErrorCode::NotJson, "top-level value is not an object");

    detail::exact_keys(doc,
                       {"knowledge_cutoff_date", "firm", "horizon_months", "scores", "distributions",
                        "drivers", "rationale_short", "knowledge_coverage"},
                       "$");
    OutlookAssessment a;
    a.knowledge_cutoff_date = detail::string(doc, "knowledge_cutoff_date", "$");
    try {
        Date::parse(a.knowledge_cutoff_date);
    } catch (const Error&) {
        detail::schema("$.knowledge_cutoff_date", "not an ISO-8601 date");
    }

    const auto& firm = doc["firm"];
    detail::exact_keys(firm, {"name", "ticker", "country", "industry_code"}, "firm");
    a.name = detail::string(firm, "name", "firm");
    a.ticker = detail::string(firm, "ticker", "firm");
    a.country = detail::string(firm, "country", "firm");
    a.industry_code = detail::string(firm, "industry_code", "firm");

    a.horizon_months = detail::integer(doc, "horizon_months", "$", 12, 12);

    const auto& scores = doc["scores"];
    detail::exact_keys(scores, {"outlook", "growth", "profitability", "risk", "confidence"}, "scores");
    a.outlook = detail::integer(scores, "outlook", "scores", -10, 10);
    a.growth = detail::integer(scores, "growth", "scores", -10, 10);
    a.profitability = detail::integer(scores, "profitability", "scores", -10, 10);
    a.risk = detail::integer(scores, "risk", "scores", -10, 10);
    a.confidence = detail::integer(scores, "confidence", "scores", 0, 100);

    const auto& dist = doc["distributions"];
    detail::exact_keys(dist, {"revenue_growth_bins_pct", "eps_growth_bins_pct", "margin_change_bins_pct"},
                       "distributions");
    a.revenue_growth_bins = detail::bins(dist, "revenue_growth_bins_pct", kRevenueBins);
    a.eps_growth_bins = detail::bins(dist, "eps_growth_bins_pct", kEpsBins);
    a.margin_change_bins = detail::bins(dist, "margin_change_bins_pct", kMarginBins);

    const auto& drivers = doc["drivers"];
    if (!drivers.is_array()) detail::schema("$.drivers", "expected array");
    if (drivers.size() < 2 || drivers.size() > 5)
        detail::schema("$.drivers", std::to_string(drivers.size()) + " tags, expected 2-5");
    std::set<std::string> seen;
    for (const auto& d : drivers) {
        if (!d.is_string()) detail::schema("$.drivers", "tag is not a string");
        auto tag = d.get<std::string>();
        if (std::find(kDriverTaxonomy.begin(), kDriverTaxonomy.end(), tag) == kDriverTaxonomy.end())
            fail(ErrorCode::UnknownDriverTag, tag);
        if (!seen.insert(tag).second) detail::schema("$.drivers", "duplicate tag " + tag);
        a.drivers.push_back(std::move(tag));
    }

    a.rationale_short = detail::string(doc, "rationale_short", "$");
    if (auto n = whitespace_tokens(a.rationale_short); n > kMaxRationaleTokens)
        detail::schema("$.rationale_short", std::to_string(n) + " tokens > 30");

    a.knowledge_coverage = detail::integer(doc, "knowledge_coverage", "$", 0, 100);
    return a;
}

/// Inverse of parse_validate, emitting the schema's key order.
inline std::string serialize(const OutlookAssessment& a) {
    using oj = nlohmann::ordered_json;
    auto bins = [](const Bins& b, const std::array<std::string_view, 5>& names) {
        oj o = oj::object();
        for (std::size_t i = 0; i < names.size(); ++i) o[std::string(names[i])] = b[i];
        return o;
    };
    oj doc = oj::object();
    doc["knowledge_cutoff_date"] = a.knowledge_cutoff_date;
    doc["firm"] = {{"name", a.name}, {"ticker", a.ticker}, {"country", a.country},
                   {"industry_code", a.industry_code}};
    doc["horizon_months"] = a.horizon_months;
    doc["scores"] = {{"outlook", a.outlook}, {"growth", a.growth}, {"profitability", a.profitability},
                     {"risk", a.risk}, {"confidence", a.confidence}};
    doc["distributions"] = {{"revenue_growth_bins_pct", bins(a.revenue_growth_bins, kRevenueBins)},
                            {"eps_growth_bins_pct", bins(a.eps_growth_bins, kEpsBins)},
                            {"margin_change_bins_pct", bins(a.margin_change_bins, kMarginBins)}};
    doc["drivers"] = a.drivers;
    doc["rationale_short"] = a.rationale_short;
    doc["knowledge_coverage"] = a.knowledge_coverage;
    return doc.dump();
}

// ---------------------------------------------------------------------------
// Clients

struct DecodeParams {
    double temperature = 0.0;
    double top_p = 1.0;
};

/// A scoring backend bound to one model. Transport failures throw Error(TransportError);
/// anything returned is treated as the model's raw answer.
class ScorerClient {
public:
    virtual ~ScorerClient() = default;
    virtual std::string send(const PromptPair& prompt, const DecodeParams& params) = 0;
};

/// Identifiers recovered from a rendered prompt.
struct PromptFields {
    std::string cutoff;
    std::string name;
    std::string ticker;
    std::string isin;
    std::string country;
    std::string industry_code;
};

inline std::optional<PromptFields> read_prompt_fields(const PromptPair& p) {
    static const std::regex head(R"(\*\* for ([^\n]*)\n\(Ticker: ([^,]*), ISIN: ([^)]*)\))");
    static const std::regex cutoff(R"re("knowledge_cutoff_date": "([^"]*)")re");
    static const std::regex country(R"re("country": "([^"]*)")re");
    static const std::regex industry(R"re("industry_code": "([^"]*)")re");
    std::smatch m;
    PromptFields f;
    if (!std::regex_search(p.user_text, m, head)) return std::nullopt;
    f.name = m[1];
    f.ticker = m[2];
    f.isin = m[3];
    if (!std::regex_search(p.user_text, m, cutoff)) return std::nullopt;
    f.cutoff = m[1];
    if (!std::regex_search(p.user_text, m, country)) return std::nullopt;
    f.country = m[1];
    if (!std::regex_search(p.user_text, m, industry)) return std::nullopt;
    f.industry_code = m[1];
    return f;
}

/// Deterministic offline backend. Outlook scores come from a planted table keyed by
/// firm_id when available, otherwise from a hash of the firm_id; every other field is
/// filled with a valid, hash-derived value.
class MockScorer final : public ScorerClient {
public:
    enum class Fault { Malformed, Refusal, Transport };

    explicit MockScorer(std::map<std::string, int> planted = {}) : planted_(std::move(planted)) {}

    void inject(const std::string& firm_id, Fault f) { faults_[firm_id] = f; }

    std::string send(const PromptPair& prompt, const DecodeParams&) override {
        calls_.fetch_add(1, std::memory_order_relaxed);
        auto f = read_prompt_fields(prompt);
        if (!f) return "I cannot help with that request.";
        if (auto it = faults_.find(f->isin); it != faults_.end()) {
            switch (it->second) {
                case Fault::Malformed: return "{\"scores\": {\"outlook\": \"high\"}";
                case Fault::Refusal: return "";
                case Fault::Transport: fail(ErrorCode::TransportError, "injected failure for " + f->isin);
            }
        }
        std::uint64_t h = Fnv1a{}.update(f->isin).update(f->cutoff).value();
        auto pick = [&h](int lo, int hi) {
            h = splitmix64(h);
            return lo + static_cast<int>(h % static_cast<std::uint64_t>(hi - lo + 1));
        };
        OutlookAssessment a;
        a.knowledge_cutoff_date = f->cutoff;
        a.name = f->name;
        a.ticker = f->ticker;
        a.country = f->country;
        a.industry_code = f->industry_code;
        auto it = planted_.find(f->isin);
        a.outlook = it != planted_.end() ? std::clamp(it->second, -10, 10) : pick(-10, 10);
        a.growth = std::clamp(a.outlook + pick(-2, 2), -10, 10);
        a.profitability = std::clamp(a.outlook + pick(-3, 3), -10, 10);
        a.risk = pick(-10, 10);
        a.confidence = pick(20, 90);
        for (Bins* b : {&a.revenue_growth_bins, &a.eps_growth_bins, &a.margin_change_bins}) {
            int left = 100;
            for (std::size_t i = 0; i + 1 < b->size(); ++i) {
                (*b)[i] = pick(0, left / 2);
                left -= (*b)[i];
            }
            (*b)[4] = left;
        }
        std::size_t first = static_cast<std::size_t>(pick(0, 11));
        std::size_t count = static_cast<std::size_t>(pick(2, 3));
        for (std::size_t i = 0; i < count; ++i)
            a.drivers.emplace_back(kDriverTaxonomy[(first + i * 5) % kDriverTaxonomy.size()]);
        a.rationale_short = "Outlook driven by " + a.drivers[0] + " and " + a.drivers[1] + ".";
        a.knowledge_coverage = pick(10, 100);
        return serialize(a);
    }

    std::size_t calls() const { return calls_.load(); }

private:
    std::map<std::string, int> planted_;
    std::map<std::string, Fault> faults_;
    std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Cache

enum class ScoreStatus { Ok, Malformed, Refusal, TransportError };

inline std::string_view to_string(ScoreStatus s) {
    switch (s) {
        case ScoreStatus::Ok: return "ok";
        case ScoreStatus::Malformed: return "malformed";
        case ScoreStatus::Refusal: return "refusal";
        case ScoreStatus::TransportError: return "transport_error";
    }
    return "unknown";
}

inline std::string safe_path_component(std::string_view s) {
    std::string out;
    for (char c : s) {
        bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' || c == '_';
        out.push_back(ok ? c : '_');
    }
    if (out.empty() || out == "." || out == "..") out = "_" + out;
    return out;
}

struct CacheEntry {
    std::string model;
    std::string firm_id;
    std::string prompt_hash;
    std::string raw;
};

/// Content-addressed response store at <root>/<model>/<firm_id>.json. An entry only
/// hits when its prompt hash matches the current prompt.
class ScoreCache {
public:
    explicit ScoreCache(std::filesystem::path root) : root_(std::move(root)) {}

    std::filesystem::path path_for(const std::string& model, const std::string& firm_id) const {
        return root_ / safe_path_component(model) / (safe_path_component(firm_id) + ".json");
    }

    std::optional<CacheEntry> get(const std::string& model, const std::string& firm_id,
                                  const std::string& prompt_hash) const {
        auto path = path_for(model, firm_id);
        std::ifstream in(path);
        if (!in) return std::nullopt;
        nlohmann::json j;
        try {
            in >> j;
            CacheEntry e{j.at("model").get<std::string>(), j.at("firm_id").get<std::string>(),
                         j.at("prompt_hash").get<std::string>(), j.at("raw").get<std::string>()};
            if (e.model != model || e.firm_id != firm_id || e.prompt_hash != prompt_hash)
                return std::nullopt;
            return e;
        } catch (const nlohmann::json::exception&) {
            return std::nullopt;
        }
    }

    void put(const CacheEntry& e) {
        nlohmann::ordered_json j;
        j["model"] = e.model;
        j["firm_id"] = e.firm_id;
        j["prompt_hash"] = e.prompt_hash;
        j["raw"] = e.raw;
        auto path = path_for(e.model, e.firm_id);
        std::lock_guard lock(mu_);
        std::filesystem::create_directories(path.parent_path());
        auto tmp = path;
        tmp += ".tmp";
        {
            std::ofstream out(tmp, std::ios::binary);
            if (!out) fail(ErrorCode::IoError, "cannot write " + tmp.string());
            out << j.dump(2) << '\n';
        }
        std::filesystem::rename(tmp, path);
    }

    const std::filesystem::path& root() const { return root_; }

private:
    std::filesystem::path root_;
    std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Batch scoring

struct FirmScore {
    std::string firm_id;
    ScoreStatus status = ScoreStatus::TransportError;
    std::optional<OutlookAssessment> assessment;
    std::string detail;
    int attempts = 0;
    bool cache_hit = false;
};

struct ScoreBatchReport {
    std::size_t total = 0;
    std::size_t ok = 0;
    std::size_t malformed = 0;
    std::size_t refusal = 0;
    std::size_t transport_error = 0;

    double missingness() const {
        return total == 0 ? 0.0 : static_cast<double>(total - ok) / static_cast<double>(total);
    }
};

struct ScoreBatch {
    std::vector<FirmScore> firms;  // input order
    ScoreBatchReport report;
};

enum class ScorerMode { Live, CacheOnly };

struct ScoreOptions {
    std::size_t parallelism = 1;
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{200};
    ScorerMode mode = ScorerMode::Live;
    DecodeParams decode{};
};

/// Classify a raw response. Empty text is a refusal; anything else that fails
/// validation is malformed.
inline FirmScore classify(std::string firm_id, const std::string& raw) {
    FirmScore s;
    s.firm_id = std::move(firm_id);
    if (raw.find_first_not_of(" \t\r\n") == std::string::npos) {
        s.status = ScoreStatus::Refusal;
        s.detail = "empty response";
        return s;
    }
    try {
        s.assessment = parse_validate(raw);
        s.status = ScoreStatus::Ok;
    } catch (const Error& e) {
        s.status = ScoreStatus::Malformed;
        s.detail = e.what();
    }
    return s;
}

/// One scored attempt per firm (transport errors retried with exponential backoff,
/// validation failures never retried), cached by (model, firm, prompt hash).
inline ScoreBatch score_universe(const std::vector<panel::FirmSnapshot>& firms,
                                 const panel::Cutoff& cutoff, ScorerClient* client,
                                 ScoreCache* cache, const ScoreOptions& opt = {}) {
    if (opt.mode == ScorerMode::Live && client == nullptr)
        fail(ErrorCode::InvalidArgument, "live scoring needs a client");
    ScoreBatch batch;
    batch.firms.resize(firms.size());

    auto score_one = [&](std::size_t i) {
        const auto& firm = firms[i];
        PromptPair prompt;
        try {
            prompt = render_prompt(firm, cutoff);
        } catch (const Error& e) {
            FirmScore s;
            s.firm_id = firm.firm_id;
            s.status = ScoreStatus::Malformed;
            s.detail = e.what();
            return s;
        }
        const auto key = prompt.hash();
        if (cache) {
            if (auto hit = cache->get(cutoff.model_name, firm.firm_id, key)) {
                auto s = classify(firm.firm_id, hit->raw);
                s.cache_hit = true;
                return s;
            }
        }
        if (opt.mode == ScorerMode::CacheOnly) {
            FirmScore s;
            s.firm_id = firm.firm_id;
            s.status = ScoreStatus::TransportError;
            s.detail = "cache miss in cache-only mode";
            return s;
        }
        auto delay = opt.initial_backoff;
        std::string last_error;
        for (int attempt = 1; attempt <= opt.max_attempts; ++attempt) {
            try {
                std::string raw = client->send(prompt, opt.decode);
                if (cache) cache->put({cutoff.model_name, firm.firm_id, key, raw});
                auto s = classify(firm.firm_id, raw);
                s.attempts = attempt;
                return s;
            } catch (const Error& e) {
                if (e.code() != ErrorCode::TransportError) throw;
                last_error = e.what();
            }
            if (attempt < opt.max_attempts && delay.count() > 0) {
                std::this_thread::sleep_for(delay);
                delay *= 2;
            }
        }
        FirmScore s;
        s.firm_id = firm.firm_id;
        s.status = ScoreStatus::TransportError;
        s.detail = last_error;
        s.attempts = opt.max_attempts;
        return s;
    };

    const std::size_t workers = std::max<std::size_t>(1, std::min(opt.parallelism, firms.size()));
    if (workers == 1) {
        for (std::size_t i = 0; i < firms.size(); ++i) batch.firms[i] = score_one(i);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::jthread> pool;
        std::mutex err_mu;
        std::exception_ptr err;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < firms.size(); i = next++) {
                    try {
                        batch.firms[i] = score_one(i);
                    } catch (...) {
                        std::lock_guard lock(err_mu);
                        if (!err) err = std::current_exception();
                    }
                }
            });
        }
        pool.clear();
        if (err) std::rethrow_exception(err);
    }

    auto& r = batch.report;
    r.total = firms.size();
    for (const auto& s : batch.firms) {
        switch (s.status) {
            case ScoreStatus::Ok: ++r.ok; break;
            case ScoreStatus::Malformed: ++r.malformed; break;
            case ScoreStatus::Refusal: ++r.refusal; break;
            case ScoreStatus::TransportError: ++r.transport_error; break;
        }
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Leakage probe

struct Probe {
    std::string question;
    std::string answer;
    Date event_date;
};

inline std::vector<Probe> load_probes(const std::filesystem::path& path) {
    auto t = csv::read_file(path);
    auto cq = t.column("question"), ca = t.column("answer"), cd = t.column("event_date");
    if (!cq || !ca || !cd) fail(ErrorCode::ParseError, path.string() + ": need question,answer,event_date");
    std::vector<Probe> out;
    for (const auto& row : t.rows) {
        if (row.cells.size() != t.header.size())
            fail(ErrorCode::ParseError, path.string() + ":" + std::to_string(row.line) + ": bad row");
        out.push_back({row.cells[*cq], row.cells[*ca], Date::parse(row.cells[*cd])});
    }
    return out;
}

inline void write_probes(const std::vector<Probe>& probes, const std::filesystem::path& path) {
    csv::Writer w({"question", "answer", "event_date"});
    for (const auto& p : probes) w.add({p.question, p.answer, p.event_date.iso()});
    w.save(path);
}

inline const std::string kProbeSystemText =
    "Answer the question with the shortest possible exact answer and nothing else. "
    "If you do not know the answer, reply with an empty message.";

/// Trimmed, case-folded copy used for exact-match grading.
inline std::string normalize_answer(std::string_view s) {
    auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    auto e = s.find_last_not_of(" \t\r\n.");
    std::string out(s.substr(b, e == std::string_view::npos || e < b ? 0 : e - b + 1));
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

/// Fraction of probes answered with the post-cutoff answer. Transport failures and
/// refusals count as not correct.
inline double leakage_probe(ScorerClient& client, const std::vector<Probe>& probes,
                            const DecodeParams& params = {}) {
    if (probes.empty()) fail(ErrorCode::InvalidArgument, "leakage probe needs at least one question");
    std::size_t correct = 0;
    for (const auto& p : probes) {
        std::string reply;
        try {
            reply = client.send({kProbeSystemText, p.question}, params);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::TransportError) throw;
            continue;
        }
        if (!normalize_answer(p.answer).empty() && normalize_answer(reply) == normalize_answer(p.answer))
            ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(probes.size());
}

/// Probe backend that knows every answer whose event date is on or before its
/// knowledge cutoff, and nothing after.
class CutoffRespectingMock final : public ScorerClient {
public:
    CutoffRespectingMock(Date knowledge_cutoff, const std::vector<Probe>& knowledge)
        : cutoff_(knowledge_cutoff) {
        for (const auto& p : knowledge) facts_[p.question] = {p.answer, p.event_date};
    }

    std::string send(const PromptPair& prompt, const DecodeParams&) override {
        auto it = facts_.find(prompt.user_text);
        if (it == facts_.end() || cutoff_ < it->second.second) return "";
        return it->second.first;
    }

private:
    Date cutoff_;
    std::map<std::string, std::pair<std::string, Date>> facts_;
};

/// Probe backend with no cutoff at all.
class AllKnowingMock final : public ScorerClient {
public:
    explicit AllKnowingMock(const std::vector<Probe>& knowledge) {
        for (const auto& p : knowledge) facts_[p.question] = p.answer;
    }

    std::string send(const PromptPair& prompt, const DecodeParams&) override {
        auto it = facts_.find(prompt.user_text);
        return it == facts_.end() ? std::string{} : it->second;
    }

private:
    std::map<std::string, std::string> facts_;
};

}  // namespace capsule::scorer

#pragma once

// Mutation corpus for the response validator. Each case carries the verdict implied by
// how it was built, so the validator is checked against construction rather than itself.

#include <algorithm>
#include <array>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "capsule/core/rng.hpp"

namespace fuzz {

using oj = nlohmann::ordered_json;

struct Case {
    std::string text;
    bool valid = false;
    std::string label;
};

inline const std::array<const char*, 12> kTags{
    "product_cycle", "pricing_power",  "regulation",      "competition",
    "supply_chain",  "capital_needs",  "macro_exposure",  "IP_legal",
    "mgmt_execution", "network_effects", "customer_concentration", "input_costs"};

inline const std::array<std::array<const char*, 5>, 3> kBinNames{{
    {"less_than_minus_10", "minus_10_to_0", "plus_0_to_5", "plus_5_to_10", "greater_than_plus_10"},
    {"less_than_minus_20", "minus_20_to_0", "plus_0_to_10", "plus_10_to_25", "greater_than_plus_25"},
    {"less_than_minus_2pp", "minus_2pp_to_0pp", "plus_0pp_to_1pp", "plus_1pp_to_2pp", "greater_than_plus_2pp"},
}};
inline const std::array<const char*, 3> kDistNames{"revenue_growth_bins_pct", "eps_growth_bins_pct",
                                                   "margin_change_bins_pct"};
inline const std::array<const char*, 5> kScoreNames{"outlook", "growth", "profitability", "risk", "confidence"};

inline int pick(capsule::Rng& rng, int lo, int hi) {
    return lo + static_cast<int>(rng.index(static_cast<std::uint64_t>(hi - lo + 1)));
}

inline std::string words(int n) {
    std::string s;
    for (int i = 0; i < n; ++i) s += (i ? " w" : "w") + std::to_string(i);
    return s;
}

/// A random document satisfying every rule.
inline oj valid_document(capsule::Rng& rng) {
    oj d = oj::object();
    d["knowledge_cutoff_date"] = "2024-0" + std::to_string(pick(rng, 1, 9)) + "-1" + std::to_string(pick(rng, 0, 9));
    d["firm"] = {{"name", "Firm " + std::to_string(pick(rng, 0, 999))},
                 {"ticker", "T" + std::to_string(pick(rng, 0, 99))},
                 {"country", "US"},
                 {"industry_code", "Energy"}};
    d["horizon_months"] = 12;
    d["scores"] = {{"outlook", pick(rng, -10, 10)},
                   {"growth", pick(rng, -10, 10)},
                   {"profitability", pick(rng, -10, 10)},
                   {"risk", pick(rng, -10, 10)},
                   {"confidence", pick(rng, 0, 100)}};
    oj dist = oj::object();
    for (std::size_t v = 0; v < 3; ++v) {
        oj bins = oj::object();
        int left = 100;
        for (std::size_t i = 0; i < 4; ++i) {
            int x = pick(rng, 0, left);
            bins[kBinNames[v][i]] = x;
            left -= x;
        }
        bins[kBinNames[v][4]] = left;
        dist[kDistNames[v]] = bins;
    }
    d["distributions"] = dist;
    std::vector<std::string> tags(kTags.begin(), kTags.end());
    for (std::size_t i = tags.size(); i > 1; --i) std::swap(tags[i - 1], tags[rng.index(i)]);
    tags.resize(static_cast<std::size_t>(pick(rng, 2, 5)));
    d["drivers"] = tags;
    d["rationale_short"] = words(pick(rng, 0, 30));
    d["knowledge_coverage"] = pick(rng, 0, 100);
    return d;
}

inline oj& random_score(capsule::Rng& rng, oj& d, std::string& which) {
    which = kScoreNames[rng.index(5)];
    return d["scores"][which];
}

inline Case mutate(capsule::Rng& rng, oj d, int kind) {
    const auto v = rng.index(3);
    const auto b = rng.index(5);
    auto& bins = d["distributions"][kDistNames[v]];
    switch (kind) {
        case 0: return {d.dump(), true, "identity"};
        case 1: return {nlohmann::json(d).dump(), true, "reordered keys"};
        case 2: return {d.dump(2), true, "pretty printed"};
        case 3: {
            // move mass between two bins; sum unchanged
            auto b2 = (b + 1 + rng.index(4)) % 5;
            int from = bins[kBinNames[v][b]].get<int>();
            int k = pick(rng, 0, from);
            bins[kBinNames[v][b]] = from - k;
            bins[kBinNames[v][b2]] = bins[kBinNames[v][b2]].get<int>() + k;
            return {d.dump(), true, "bin transfer"};
        }
        case 4: d["rationale_short"] = words(30); return {d.dump(), true, "30-token rationale"};
        case 5: {
            int delta = pick(rng, 1, 5) * (rng.index(2) ? 1 : -1);
            bins[kBinNames[v][b]] = bins[kBinNames[v][b]].get<int>() + delta;
            return {d.dump(), false, "bin sum off by " + std::to_string(delta)};
        }
        case 6: {
            std::string which;
            auto& s = random_score(rng, d, which);
            bool conf = which == "confidence";
            int hi = conf ? 100 : 10, lo = conf ? 0 : -10;
            s = rng.index(2) ? hi + pick(rng, 1, 50) : lo - pick(rng, 1, 50);
            return {d.dump(), false, "score out of range: " + which};
        }
        case 7: {
            std::string which;
            auto& s = random_score(rng, d, which);
            s = std::to_string(s.get<int>());
            return {d.dump(), false, "number as string: " + which};
        }
        case 8: {
            std::string which;
            auto& s = random_score(rng, d, which);
            s = s.get<int>() + 0.5;
            return {d.dump(), false, "fractional score: " + which};
        }
        case 9: {
            auto& dr = d["drivers"];
            dr[rng.index(dr.size())] = rng.index(2) ? "vibes" : "Pricing_Power";
            return {d.dump(), false, "unknown driver"};
        }
        case 10: {
            auto& dr = d["drivers"];
            if (rng.index(2)) {
                dr = oj::array({kTags[rng.index(12)]});
            } else {
                dr = oj::array();
                for (int i = 0; i < 6; ++i) dr.push_back(kTags[static_cast<std::size_t>(i)]);
            }
            return {d.dump(), false, "driver count"};
        }
        case 11: {
            auto& dr = d["drivers"];
            dr.push_back(dr[0]);
            if (dr.size() > 5) dr.erase(dr.begin() + 1);
            return {d.dump(), false, "duplicate driver"};
        }
        case 12: {
            static const std::array<const char*, 8> top{"knowledge_cutoff_date", "firm", "horizon_months", "scores",
                                                        "distributions", "drivers", "rationale_short",
                                                        "knowledge_coverage"};
            switch (rng.index(4)) {
                case 0: d.erase(top[rng.index(8)]); break;
                case 1: d["scores"].erase(kScoreNames[rng.index(5)]); break;
                case 2: bins.erase(kBinNames[v][b]); break;
                default: d["firm"].erase("ticker"); break;
            }
            return {d.dump(), false, "missing key"};
        }
        case 13: {
            if (rng.index(2)) d["comment"] = "extra";
            else d["scores"]["valuation"] = 3;
            return {d.dump(), false, "extra key"};
        }
        case 14: d["rationale_short"] = words(pick(rng, 31, 60)); return {d.dump(), false, "long rationale"};
        case 15: {
            std::string s = d.dump();
            if (rng.index(2)) return {"```json\n" + s + "\n```", false, "code fence"};
            return {s.substr(0, rng.index(s.size())), false, "truncated"};
        }
        case 16: d["horizon_months"] = rng.index(2) ? 6 : 24; return {d.dump(), false, "horizon"};
        case 17: d["knowledge_cutoff_date"] = rng.index(2) ? "June 2024" : "2024-13-01"; return {d.dump(), false, "bad date"};
        case 18: {
            bins[kBinNames[v][b]] = -bins[kBinNames[v][b]].get<int>() - 1;
            return {d.dump(), false, "negative bin"};
        }
        default: {
            d["scores"]["outlook"] = nullptr;
            return {d.dump(), false, "null score"};
        }
    }
}

inline constexpr int kKinds = 20;

/// n cases cycling through every mutation kind.
inline std::vector<Case> corpus(std::size_t n, std::uint64_t seed) {
    capsule::Rng rng(seed);
    std::vector<Case> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(mutate(rng, valid_document(rng), static_cast<int>(i % kKinds)));
    return out;
}

}  // namespace fuzz

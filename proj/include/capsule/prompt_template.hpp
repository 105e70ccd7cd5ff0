#pragma once

#include <string_view>

namespace capsule::scorer {

// Prompt templates, byte-exact. Trailing spaces on some lines are part of the template.

inline constexpr std::string_view kSystemTemplate = R"TPL(You are an unbiased CFA-level equity analyst. Assume 
"today" is {CUT_OFF_DATE}. You must IGNORE any event,
price, or fact that occurred after that date. Base every
judgment solely on information publicly available on or
before {CUT_OFF_DATE} and the identifiers provided 
for the company below. Respond in English.)TPL";

inline constexpr std::string_view kUserTemplate = R"TPL(Using only pre-{CUT_OFF_DATE} knowledge, produce a
12-month forward **business outlook** for {COMPANY_NAME}
(Ticker: {TICKER}, ISIN: {ISIN}) relative to peers in
its industry. Focus exclusively on business 
fundamentals—revenue growth, profitability trends and
key operational risks. DO NOT use or reference valuation
metrics, market prices, or technical indicators.

Your response must follow the JSON schema below **exactly**.
Do not include any additional commentary, formatting, or code
fences. If uncertain, lower confidence and avoid speculation.

OUTPUT FORMAT (strict JSON)
{
  "knowledge_cutoff_date": "{CUT_OFF_DATE}",
  "firm": {
    "name": "{COMPANY_NAME}",
    "ticker": "{TICKER}",
    "country": "{COUNTRY}",
    "industry_code": "{INDUSTRY_CODE}"
  },
  "horizon_months": 12,
  "scores": {
    "outlook": integer [-10..10],
    "growth": integer [-10..10],
    "profitability": integer [-10..10],
    "risk": integer [-10..10],
    "confidence": integer [0..100]
  },
  "distributions": {
    "revenue_growth_bins_pct": {
      "less_than_minus_10": int,
      "minus_10_to_0": int,
      "plus_0_to_5": int,
      "plus_5_to_10": int,
      "greater_than_plus_10": int
    },
    "eps_growth_bins_pct": {
      "less_than_minus_20": int,
      "minus_20_to_0": int,
      "plus_0_to_10": int,
      "plus_10_to_25": int,
      "greater_than_plus_25": int
    },
    "margin_change_bins_pct": {
      "less_than_minus_2pp": int,
      "minus_2pp_to_0pp": int,
      "plus_0pp_to_1pp": int,
      "plus_1pp_to_2pp": int,
      "greater_than_plus_2pp": int
    }
  },
  "drivers": [
    2-5 tags from this set:
    ["product_cycle", "pricing_power", "regulation", "competition",
     "supply_chain", "capital_needs", "macro_exposure", "IP_legal",
     "mgmt_execution", "network_effects", "customer_concentration",
     "input_costs"]
  ],
  "rationale_short": "concise summary < 30 tokens; cite 1-3 key drivers;
                       no facts after {CUT_OFF_DATE}",
  "knowledge_coverage": integer [0..100]
}

HARD CONSTRAINTS
- Return only a valid JSON object (no code fences, markdown, or extra text).
- All numeric fields must be numbers, not strings.
- Each sub-distribution must sum to exactly 100.
- Do not include placeholders (e.g., __REQUIRED__, TODO, ...).
- Lower confidence if the company or industry knowledge is limited.)TPL";

}  // namespace capsule::scorer

#pragma once

// Raw firm/price/analyst tables, their alignment to model cutoffs, and forward
// horizon returns.

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "capsule/core/csv.hpp"
#include "capsule/core/date.hpp"
#include "capsule/core/error.hpp"
#include "capsule/core/series.hpp"

namespace capsule::panel {

class TradingCalendar {
public:
    TradingCalendar() = default;
    explicit TradingCalendar(std::vector<Date> dates) : dates_(std::move(dates)) {
        if (dates_.empty()) fail(ErrorCode::InvalidCalendar, "calendar is empty");
        for (std::size_t i = 1; i < dates_.size(); ++i)
            if (!(dates_[i - 1] < dates_[i]))
                fail(ErrorCode::InvalidCalendar,
                     "calendar not strictly increasing at " + dates_[i].iso());
    }

    std::size_t size() const { return dates_.size(); }
    bool empty() const { return dates_.empty(); }
    const Date& operator[](std::size_t i) const { return dates_[i]; }
    const std::vector<Date>& dates() const { return dates_; }
    const Date& front() const { return dates_.front(); }
    const Date& back() const { return dates_.back(); }

    std::optional<std::size_t> index_of(const Date& d) const {
        auto it = std::lower_bound(dates_.begin(), dates_.end(), d);
        if (it == dates_.end() || *it != d) return std::nullopt;
        return static_cast<std::size_t>(it - dates_.begin());
    }

    /// Index of the last trading date ≤ d.
    std::optional<std::size_t> last_on_or_before(const Date& d) const {
        auto it = std::upper_bound(dates_.begin(), dates_.end(), d);
        if (it == dates_.begin()) return std::nullopt;
        return static_cast<std::size_t>(it - dates_.begin()) - 1;
    }

private:
    std::vector<Date> dates_;
};

enum class Architecture { Standard, Reasoning };

inline std::string_view to_string(Architecture a) {
    return a == Architecture::Standard ? "standard" : "reasoning";
}

inline Architecture parse_architecture(std::string_view s) {
    if (s == "standard") return Architecture::Standard;
    if (s == "reasoning") return Architecture::Reasoning;
    fail(ErrorCode::ParseError, "unknown architecture '" + std::string(s) + "'");
}

struct Cutoff {
    std::string model_name;
    Date knowledge_cutoff;
    Date release_date;
    Architecture architecture = Architecture::Standard;

    Cutoff() = default;
    Cutoff(std::string model, Date knowledge, Date release, Architecture arch)
        : model_name(std::move(model)), knowledge_cutoff(knowledge), release_date(release),
          architecture(arch) {
        if (release_date < knowledge_cutoff)
            fail(ErrorCode::InvalidArgument, model_name + ": knowledge cutoff after release date");
    }
};

struct FirmSnapshot {
    std::string firm_id;
    std::string name;
    std::string ticker;
    std::string country;
    std::string sector;
    Date analysis_date;

    Opt price;
    Opt shares_outstanding;
    Opt book_value_per_share;
    Opt eps_fy1;
    Opt eps_fy2;
    Opt eps_trailing;
    Opt ltg_median;
    Opt ebitda_fwd;
    Opt total_debt;
    Opt cash;
    Opt total_assets;
    Opt roe;
    Opt gross_profit;
    Opt net_income;
    Opt op_cashflow;
    Opt analyst_count;
    Opt pt_mean;
    Opt pt_dispersion;
    Opt adtv;
    Opt r_1m;
    Opt r_6m;
    Opt r_12m_ex1m;

    Opt market_cap() const {
        if (!price || !shares_outstanding) return std::nullopt;
        return *price * *shares_outstanding;
    }
};

struct NumericField {
    std::string_view name;
    Opt FirmSnapshot::*member;
};

// Column order of fundamentals.csv after the identifier/text columns.
inline constexpr std::array<NumericField, 20> kFundamentalFields{{
    {"price", &FirmSnapshot::price},
    {"shares_outstanding", &FirmSnapshot::shares_outstanding},
    {"book_value_per_share", &FirmSnapshot::book_value_per_share},
    {"eps_fy1", &FirmSnapshot::eps_fy1},
    {"eps_fy2", &FirmSnapshot::eps_fy2},
    {"eps_trailing", &FirmSnapshot::eps_trailing},
    {"ltg_median", &FirmSnapshot::ltg_median},
    {"ebitda_fwd", &FirmSnapshot::ebitda_fwd},
    {"total_debt", &FirmSnapshot::total_debt},
    {"cash", &FirmSnapshot::cash},
    {"total_assets", &FirmSnapshot::total_assets},
    {"roe", &FirmSnapshot::roe},
    {"gross_profit", &FirmSnapshot::gross_profit},
    {"net_income", &FirmSnapshot::net_income},
    {"op_cashflow", &FirmSnapshot::op_cashflow},
    {"adtv", &FirmSnapshot::adtv},
    {"r_1m", &FirmSnapshot::r_1m},
    {"r_6m", &FirmSnapshot::r_6m},
    {"r_12m_ex1m", &FirmSnapshot::r_12m_ex1m},
    // derived from price × shares; accepted as a required-field name only
    {"market_cap", nullptr},
}};

inline constexpr std::array<NumericField, 3> kAnalystFields{{
    {"analyst_count", &FirmSnapshot::analyst_count},
    {"pt_mean", &FirmSnapshot::pt_mean},
    {"pt_dispersion", &FirmSnapshot::pt_dispersion},
}};

inline constexpr std::array<std::string_view, 4> kTextFields{"name", "ticker", "country", "sector"};

/// True when the named field is present on the snapshot. Unknown names throw.
inline bool has_field(const FirmSnapshot& s, std::string_view field) {
    if (field == "market_cap") return s.market_cap().has_value();
    if (field == "name") return !s.name.empty();
    if (field == "ticker") return !s.ticker.empty();
    if (field == "country") return !s.country.empty();
    if (field == "sector") return !s.sector.empty();
    for (const auto& f : kFundamentalFields)
        if (f.name == field && f.member) return (s.*f.member).has_value();
    for (const auto& f : kAnalystFields)
        if (f.name == field) return (s.*f.member).has_value();
    fail(ErrorCode::InvalidArgument, "unknown snapshot field '" + std::string(field) + "'");
}

/// Adjusted close prices of one firm, ascending by date.
class PriceSeries {
public:
    void add(Date d, double close) {
        if (!dates_.empty() && !(dates_.back() < d)) {
            auto it = std::lower_bound(dates_.begin(), dates_.end(), d);
            auto pos = it - dates_.begin();
            dates_.insert(it, d);
            closes_.insert(closes_.begin() + pos, close);
            return;
        }
        dates_.push_back(d);
        closes_.push_back(close);
    }

    Opt at(const Date& d) const {
        auto it = std::lower_bound(dates_.begin(), dates_.end(), d);
        if (it == dates_.end() || *it != d) return std::nullopt;
        return closes_[static_cast<std::size_t>(it - dates_.begin())];
    }

    /// Last close on or before d.
    Opt as_of(const Date& d) const {
        auto it = std::upper_bound(dates_.begin(), dates_.end(), d);
        if (it == dates_.begin()) return std::nullopt;
        return closes_[static_cast<std::size_t>(it - dates_.begin()) - 1];
    }

    void reserve(std::size_t n) {
        dates_.reserve(n);
        closes_.reserve(n);
    }
    bool empty() const { return dates_.empty(); }
    std::size_t size() const { return dates_.size(); }
    const Date& last_date() const { return dates_.back(); }
    const std::vector<Date>& dates() const { return dates_; }
    const std::vector<double>& closes() const { return closes_; }

private:
    std::vector<Date> dates_;
    std::vector<double> closes_;
};

using PriceTable = std::map<std::string, PriceSeries>;

// ---------------------------------------------------------------------------
// Date alignment and horizon returns

/// Last trading date on or before the cutoff.
inline Date analysis_date(const Date& cutoff, const TradingCalendar& cal) {
    if (cal.empty()) fail(ErrorCode::InvalidCalendar, "calendar is empty");
    auto idx = cal.last_on_or_before(cutoff);
    if (!idx) fail(ErrorCode::NoTradingDay, "cutoff " + cutoff.iso() + " precedes the calendar");
    return cal[*idx];
}

inline constexpr std::array<int, 5> kHorizonMonths{1, 3, 4, 6, 12};

inline int horizon_days(int months) {
    switch (months) {
        case 1: return 20;
        case 3: return 60;
        case 4: return 80;
        case 6: return 120;
        case 12: return 250;
        default: fail(ErrorCode::InvalidArgument, "unsupported horizon " + std::to_string(months));
    }
}

enum class HorizonPolicy {
    Strict,          // window must fit in the calendar
    ClampToAvailable // shorten the window to the last calendar day
};

/// Return over `days` trading days beginning at calendar index `open`.
/// Only the two endpoints are read; gaps inside the window are ignored.
inline double window_return(const PriceSeries& prices, const TradingCalendar& cal,
                            std::size_t open, std::size_t days,
                            HorizonPolicy policy = HorizonPolicy::Strict) {
    if (open >= cal.size())
        fail(ErrorCode::HorizonUnavailable, "no trading day after window start");
    std::size_t close = open + days;
    if (close >= cal.size()) {
        if (policy == HorizonPolicy::Strict || open + 1 >= cal.size())
            fail(ErrorCode::HorizonUnavailable,
                 "window of " + std::to_string(days) + " days runs past the calendar");
        close = cal.size() - 1;
    }
    if (prices.empty() || prices.last_date() < cal[close]) {
        // delisted before the window closes
        fail(ErrorCode::HorizonUnavailable, "price history ends before " + cal[close].iso());
    }
    Opt p0 = prices.at(cal[open]);
    Opt p1 = prices.at(cal[close]);
    if (!p0) fail(ErrorCode::MissingPrice, "no price at window open " + cal[open].iso());
    if (!p1) fail(ErrorCode::MissingPrice, "no price at window close " + cal[close].iso());
    return *p1 / *p0 - 1.0;
}

/// Cumulative return over the horizon, starting on the first trading day after `start`.
inline double horizon_return(const PriceSeries& prices, const Date& start, int horizon_months,
                             const TradingCalendar& cal,
                             HorizonPolicy policy = HorizonPolicy::Strict) {
    auto s = cal.index_of(start);
    if (!s) fail(ErrorCode::NoTradingDay, start.iso() + " is not a trading day");
    return window_return(prices, cal, *s + 1, static_cast<std::size_t>(horizon_days(horizon_months)),
                         policy);
}

using HorizonReturns = std::array<Opt, kHorizonMonths.size()>;

/// Forward returns for every firm with a price series, keyed by firm_id.
inline std::map<std::string, HorizonReturns> horizon_returns(
    const PriceTable& prices, const Date& start, const TradingCalendar& cal,
    HorizonPolicy policy = HorizonPolicy::Strict) {
    std::map<std::string, HorizonReturns> out;
    for (const auto& [firm, series] : prices) {
        HorizonReturns r{};
        for (std::size_t h = 0; h < kHorizonMonths.size(); ++h) {
            try {
                r[h] = horizon_return(series, start, kHorizonMonths[h], cal, policy);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::HorizonUnavailable && e.code() != ErrorCode::MissingPrice)
                    throw;
            }
        }
        out.emplace(firm, r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Universe

/// Snapshots with all required fields present, largest market cap first, at most top_n.
/// Firms that later delist stay in; survivorship is the ingestion side's concern.
inline std::vector<FirmSnapshot> filter_universe(const std::vector<FirmSnapshot>& snapshots,
                                                 std::size_t top_n,
                                                 const std::vector<std::string>& required_fields) {
    if (top_n < 1) fail(ErrorCode::InvalidArgument, "top_n must be ≥ 1");
    std::vector<const FirmSnapshot*> keep;
    for (const auto& s : snapshots) {
        if (!s.market_cap()) continue;
        bool ok = true;
        for (const auto& f : required_fields) ok = ok && has_field(s, f);
        if (ok) keep.push_back(&s);
    }
    std::stable_sort(keep.begin(), keep.end(), [](const FirmSnapshot* a, const FirmSnapshot* b) {
        double ca = *a->market_cap(), cb = *b->market_cap();
        if (ca != cb) return ca > cb;
        return a->firm_id < b->firm_id;
    });
    if (keep.size() > top_n) keep.resize(top_n);
    std::vector<FirmSnapshot> out;
    out.reserve(keep.size());
    for (const auto* s : keep) out.push_back(*s);
    return out;
}

// ---------------------------------------------------------------------------
// Loading and serialization

struct Rejection {
    std::string file;
    std::size_t line = 0;
    std::string reason;
};

struct Panel {
    TradingCalendar calendar;
    std::vector<FirmSnapshot> snapshots;  // ordered by (analysis_date, firm_id)
    PriceTable prices;
    std::vector<Rejection> rejections;

    std::vector<FirmSnapshot> snapshots_on(const Date& d) const {
        auto before = [](const FirmSnapshot& s, const Date& x) { return s.analysis_date < x; };
        auto after = [](const Date& x, const FirmSnapshot& s) { return x < s.analysis_date; };
        const bool ordered = std::is_sorted(snapshots.begin(), snapshots.end(), [](const auto& a, const auto& b) {
            return a.analysis_date < b.analysis_date;
        });
        if (ordered) {
            auto lo = std::lower_bound(snapshots.begin(), snapshots.end(), d, before);
            auto hi = std::upper_bound(lo, snapshots.end(), d, after);
            return {lo, hi};
        }
        std::vector<FirmSnapshot> out;
        for (const auto& s : snapshots)
            if (s.analysis_date == d) out.push_back(s);
        return out;
    }
};

struct PanelPaths {
    std::filesystem::path prices;
    std::filesystem::path fundamentals;
    std::filesystem::path analyst;
    std::filesystem::path calendar;

    static PanelPaths in_directory(const std::filesystem::path& dir) {
        return {dir / "prices.csv", dir / "fundamentals.csv", dir / "analyst.csv",
                dir / "calendar.csv"};
    }
};

namespace detail {

inline std::size_t require_column(const csv::Table& t, std::string_view name,
                                  const std::filesystem::path& file) {
    auto c = t.column(name);
    if (!c) fail(ErrorCode::ParseError, file.string() + ": missing column '" + std::string(name) + "'");
    return *c;
}

class RowSink {
public:
    RowSink(std::vector<Rejection>& out, std::string file, bool strict)
        : out_(out), file_(std::move(file)), strict_(strict) {}

    void reject(std::size_t line, const std::string& reason) {
        if (strict_)
            fail(ErrorCode::ParseError, file_ + ":" + std::to_string(line) + ": " + reason);
        out_.push_back({file_, line, reason});
    }

    void duplicate(std::size_t line, const std::string& key) {
        if (strict_)
            fail(ErrorCode::DuplicateKey, file_ + ":" + std::to_string(line) + ": " + key);
        out_.push_back({file_, line, "duplicate key " + key});
    }

private:
    std::vector<Rejection>& out_;
    std::string file_;
    bool strict_;
};

}  // namespace detail

/// Load the four input tables. Malformed rows are recorded and skipped unless `strict`.
inline Panel load_panel(const PanelPaths& paths, bool strict = false) {
    Panel panel;

    {
        auto t = csv::read_file(paths.calendar);
        auto c = detail::require_column(t, "date", paths.calendar);
        std::vector<Date> dates;
        for (const auto& row : t.rows) dates.push_back(Date::parse(row.cells.at(c)));
        panel.calendar = TradingCalendar(std::move(dates));
    }

    {
        auto t = csv::read_file(paths.prices);
        detail::RowSink sink(panel.rejections, paths.prices.filename().string(), strict);
        auto cf = detail::require_column(t, "firm_id", paths.prices);
        auto cd = detail::require_column(t, "date", paths.prices);
        auto cp = detail::require_column(t, "close_adj", paths.prices);
        std::set<std::pair<std::string, long>> seen;
        for (const auto& row : t.rows) {
            if (row.cells.size() != t.header.size()) {
                sink.reject(row.line, "expected " + std::to_string(t.header.size()) + " cells");
                continue;
            }
            try {
                const auto& firm = row.cells[cf];
                if (firm.empty()) {
                    sink.reject(row.line, "empty firm_id");
                    continue;
                }
                Date d = Date::parse(row.cells[cd]);
                Opt p = csv::parse_number(row.cells[cp]);
                if (!p) {
                    sink.reject(row.line, "missing close_adj");
                    continue;
                }
                if (*p <= 0.0) {
                    sink.reject(row.line, "price ≤ 0");
                    continue;
                }
                if (!seen.insert({firm, d.serial()}).second) {
                    sink.duplicate(row.line, "(" + firm + ", " + d.iso() + ")");
                    continue;
                }
                panel.prices[firm].add(d, *p);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::ParseError) throw;
                sink.reject(row.line, e.detail());
            }
        }
    }

    std::map<std::pair<std::string, long>, FirmSnapshot> snaps;
    {
        auto t = csv::read_file(paths.fundamentals);
        detail::RowSink sink(panel.rejections, paths.fundamentals.filename().string(), strict);
        auto cf = detail::require_column(t, "firm_id", paths.fundamentals);
        auto cd = detail::require_column(t, "date", paths.fundamentals);
        std::vector<std::pair<Opt FirmSnapshot::*, std::size_t>> numeric;
        for (const auto& f : kFundamentalFields)
            if (f.member)
                if (auto c = t.column(f.name)) numeric.emplace_back(f.member, *c);
        std::vector<std::pair<std::string FirmSnapshot::*, std::size_t>> text;
        const std::array<std::string FirmSnapshot::*, 4> text_members{
            &FirmSnapshot::name, &FirmSnapshot::ticker, &FirmSnapshot::country, &FirmSnapshot::sector};
        for (std::size_t i = 0; i < kTextFields.size(); ++i)
            if (auto c = t.column(kTextFields[i])) text.emplace_back(text_members[i], *c);

        for (const auto& row : t.rows) {
            if (row.cells.size() != t.header.size()) {
                sink.reject(row.line, "expected " + std::to_string(t.header.size()) + " cells");
                continue;
            }
            try {
                FirmSnapshot s;
                s.firm_id = row.cells[cf];
                if (s.firm_id.empty()) {
                    sink.reject(row.line, "empty firm_id");
                    continue;
                }
                s.analysis_date = Date::parse(row.cells[cd]);
                for (auto [m, c] : text) s.*m = row.cells[c];
                for (auto [m, c] : numeric) s.*m = csv::parse_number(row.cells[c]);
                if (s.price && *s.price <= 0.0) {
                    sink.reject(row.line, "price ≤ 0");
                    continue;
                }
                if (s.shares_outstanding && *s.shares_outstanding <= 0.0) {
                    sink.reject(row.line, "shares_outstanding ≤ 0");
                    continue;
                }
                if (!s.price)
                    if (auto it = panel.prices.find(s.firm_id); it != panel.prices.end())
                        s.price = it->second.at(s.analysis_date);
                auto key = std::make_pair(s.firm_id, s.analysis_date.serial());
                if (snaps.count(key)) {
                    sink.duplicate(row.line, "(" + s.firm_id + ", " + s.analysis_date.iso() + ")");
                    continue;
                }
                snaps.emplace(key, std::move(s));
            } catch (const Error& e) {
                if (e.code() != ErrorCode::ParseError) throw;
                sink.reject(row.line, e.detail());
            }
        }
    }

    {
        auto t = csv::read_file(paths.analyst);
        detail::RowSink sink(panel.rejections, paths.analyst.filename().string(), strict);
        auto cf = detail::require_column(t, "firm_id", paths.analyst);
        auto cd = detail::require_column(t, "date", paths.analyst);
        std::vector<std::pair<Opt FirmSnapshot::*, std::size_t>> numeric;
        for (const auto& f : kAnalystFields)
            numeric.emplace_back(f.member, detail::require_column(t, f.name, paths.analyst));
        std::set<std::pair<std::string, long>> seen;
        for (const auto& row : t.rows) {
            if (row.cells.size() != t.header.size()) {
                sink.reject(row.line, "expected " + std::to_string(t.header.size()) + " cells");
                continue;
            }
            try {
                Date d = Date::parse(row.cells[cd]);
                auto key = std::make_pair(row.cells[cf], d.serial());
                std::array<Opt, kAnalystFields.size()> vals;
                for (std::size_t i = 0; i < numeric.size(); ++i)
                    vals[i] = csv::parse_number(row.cells[numeric[i].second]);
                if (vals[0] && *vals[0] < 0.0) {
                    sink.reject(row.line, "analyst_count < 0");
                    continue;
                }
                if (!seen.insert(key).second) {
                    sink.duplicate(row.line, "(" + key.first + ", " + d.iso() + ")");
                    continue;
                }
                auto it = snaps.find(key);
                if (it == snaps.end()) {
                    sink.reject(row.line, "no fundamentals row for (" + key.first + ", " + d.iso() + ")");
                    continue;
                }
                for (std::size_t i = 0; i < numeric.size(); ++i) it->second.*(numeric[i].first) = vals[i];
            } catch (const Error& e) {
                if (e.code() != ErrorCode::ParseError) throw;
                sink.reject(row.line, e.detail());
            }
        }
    }

    std::vector<FirmSnapshot> ordered;
    ordered.reserve(snaps.size());
    for (auto& [k, s] : snaps) ordered.push_back(std::move(s));
    std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
        if (a.analysis_date != b.analysis_date) return a.analysis_date < b.analysis_date;
        return a.firm_id < b.firm_id;
    });
    panel.snapshots = std::move(ordered);
    return panel;
}

/// Write the panel back out in the input schemas.
inline void write_panel(const Panel& panel, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        csv::Writer w({"date"});
        for (const auto& d : panel.calendar.dates()) w.add({d.iso()});
        w.save(dir / "calendar.csv");
    }
    {
        csv::Writer w({"firm_id", "date", "close_adj"});
        for (const auto& [firm, series] : panel.prices)
            for (std::size_t i = 0; i < series.size(); ++i)
                w.add({firm, series.dates()[i].iso(), csv::format_number(series.closes()[i])});
        w.save(dir / "prices.csv");
    }
    {
        std::vector<std::string> header{"firm_id", "date"};
        for (auto f : kTextFields) header.emplace_back(f);
        for (const auto& f : kFundamentalFields)
            if (f.member) header.emplace_back(f.name);
        csv::Writer w(header);
        for (const auto& s : panel.snapshots) {
            std::vector<std::string> cells{s.firm_id, s.analysis_date.iso(), s.name, s.ticker,
                                           s.country, s.sector};
            for (const auto& f : kFundamentalFields)
                if (f.member) cells.push_back(csv::format_number(s.*f.member));
            w.add(cells);
        }
        w.save(dir / "fundamentals.csv");
    }
    {
        std::vector<std::string> header{"firm_id", "date"};
        for (const auto& f : kAnalystFields) header.emplace_back(f.name);
        csv::Writer w(header);
        for (const auto& s : panel.snapshots) {
            std::vector<std::string> cells{s.firm_id, s.analysis_date.iso()};
            for (const auto& f : kAnalystFields) cells.push_back(csv::format_number(s.*f.member));
            w.add(cells);
        }
        w.save(dir / "analyst.csv");
    }
}

/// cutoffs.csv: model,knowledge_cutoff,release_date,architecture
inline std::vector<Cutoff> load_cutoffs(const std::filesystem::path& path) {
    auto t = csv::read_file(path);
    auto cm = detail::require_column(t, "model", path);
    auto ck = detail::require_column(t, "knowledge_cutoff", path);
    auto cr = detail::require_column(t, "release_date", path);
    auto ca = detail::require_column(t, "architecture", path);
    std::vector<Cutoff> out;
    for (const auto& row : t.rows) {
        if (row.cells.size() != t.header.size())
            fail(ErrorCode::ParseError, path.string() + ":" + std::to_string(row.line) + ": bad row");
        out.emplace_back(row.cells[cm], Date::parse(row.cells[ck]), Date::parse(row.cells[cr]),
                         parse_architecture(row.cells[ca]));
    }
    return out;
}

inline void write_cutoffs(const std::vector<Cutoff>& cutoffs, const std::filesystem::path& path) {
    csv::Writer w({"model", "knowledge_cutoff", "release_date", "architecture"});
    for (const auto& c : cutoffs)
        w.add({c.model_name, c.knowledge_cutoff.iso(), c.release_date.iso(),
               std::string(to_string(c.architecture))});
    w.save(path);
}

}  // namespace capsule::panel

#pragma once

#include <chrono>
#include <compare>
#include <cstdio>
#include <string>
#include <string_view>

#include "capsule/core/error.hpp"

namespace capsule {

/// Calendar date backed by days since 1970-01-01.
class Date {
public:
    constexpr Date() = default;
    constexpr explicit Date(std::chrono::sys_days d) : days_(d) {}
    constexpr Date(int y, unsigned m, unsigned d)
        : days_(std::chrono::year_month_day{std::chrono::year{y}, std::chrono::month{m},
                                            std::chrono::day{d}}) {}

    static constexpr Date from_serial(long serial) {
        return Date(std::chrono::sys_days{std::chrono::days{serial}});
    }

    /// Strict YYYY-MM-DD.
    static Date parse(std::string_view s) {
        auto digit = [&](std::size_t i) { return s[i] >= '0' && s[i] <= '9'; };
        bool shape = s.size() == 10 && s[4] == '-' && s[7] == '-';
        for (std::size_t i : {0, 1, 2, 3, 5, 6, 8, 9}) shape = shape && digit(i);
        if (!shape) fail(ErrorCode::ParseError, "bad ISO date '" + std::string(s) + "'");
        auto num = [&](std::size_t from, std::size_t len) {
            int v = 0;
            for (std::size_t i = from; i < from + len; ++i) v = v * 10 + (s[i] - '0');
            return v;
        };
        std::chrono::year_month_day ymd{std::chrono::year{num(0, 4)},
                                        std::chrono::month{static_cast<unsigned>(num(5, 2))},
                                        std::chrono::day{static_cast<unsigned>(num(8, 2))}};
        if (!ymd.ok()) fail(ErrorCode::ParseError, "invalid calendar date '" + std::string(s) + "'");
        return Date(std::chrono::sys_days{ymd});
    }

    std::string iso() const {
        std::chrono::year_month_day ymd{days_};
        char buf[16];
        std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                      static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
        return buf;
    }

    constexpr long serial() const { return days_.time_since_epoch().count(); }
    constexpr std::chrono::sys_days sys() const { return days_; }
    constexpr std::chrono::year_month_day ymd() const { return std::chrono::year_month_day{days_}; }

    constexpr int year() const { return static_cast<int>(ymd().year()); }
    constexpr unsigned month() const { return static_cast<unsigned>(ymd().month()); }
    /// 0 = Sunday ... 6 = Saturday
    constexpr unsigned weekday() const { return std::chrono::weekday{days_}.c_encoding(); }

    constexpr Date plus_days(long n) const { return Date(days_ + std::chrono::days{n}); }

    constexpr auto operator<=>(const Date&) const = default;

private:
    std::chrono::sys_days days_{};
};

}  // namespace capsule

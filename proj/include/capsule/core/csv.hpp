#pragma once

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "capsule/core/error.hpp"

namespace capsule::csv {

struct Row {
    std::size_t line = 0;  // 1-based line number in the source file
    std::vector<std::string> cells;
};

struct Table {
    std::vector<std::string> header;
    std::vector<Row> rows;

    std::optional<std::size_t> column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        return std::nullopt;
    }
};

/// RFC-4180-ish splitter: double-quoted fields may contain commas and "" escapes.
/// Embedded newlines are not supported.
inline std::vector<std::string> split_line(std::string_view line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline Table parse(std::istream& in) {
    Table t;
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!have_header) {
            // tolerate a UTF-8 BOM
            if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);
            t.header = split_line(line);
            have_header = true;
            continue;
        }
        if (line.empty()) continue;
        t.rows.push_back(Row{lineno, split_line(line)});
    }
    if (!have_header) fail(ErrorCode::ParseError, "missing header row");
    return t;
}

inline Table read_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
    try {
        return parse(in);
    } catch (const Error& e) {
        fail(e.code(), path.string() + ": " + e.detail());
    }
}

inline std::optional<double> parse_number(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    if (s.empty()) return std::nullopt;
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || ptr != s.data() + s.size() || !std::isfinite(v))
        fail(ErrorCode::ParseError, "not a number: '" + std::string(s) + "'");
    return v;
}

/// Shortest round-trip representation; empty for missing.
inline std::string format_number(double v) {
    if (std::isnan(v)) return "";
    if (v == 0.0) return "0";
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

inline std::string format_number(const std::optional<double>& v) {
    return v ? format_number(*v) : std::string{};
}

inline std::string quote(std::string_view cell) {
    if (cell.find_first_of(",\"\n") == std::string_view::npos) return std::string(cell);
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += '"';
    return out;
}

class Writer {
public:
    explicit Writer(std::vector<std::string> header) : header_(std::move(header)) {
        add_line(header_);
    }

    void add(const std::vector<std::string>& cells) {
        if (cells.size() != header_.size())
            fail(ErrorCode::ShapeError, "csv row has " + std::to_string(cells.size()) +
                                            " cells, header has " + std::to_string(header_.size()));
        add_line(cells);
        ++rows_;
    }

    const std::string& str() const { return buf_; }
    std::size_t rows() const { return rows_; }

    void save(const std::filesystem::path& path) const {
        if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
        std::ofstream out(path, std::ios::binary);
        if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
        out << buf_;
    }

private:
    void add_line(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) buf_.push_back(',');
            buf_ += quote(cells[i]);
        }
        buf_.push_back('\n');
    }

    std::vector<std::string> header_;
    std::string buf_;
    std::size_t rows_ = 0;
};

}  // namespace capsule::csv

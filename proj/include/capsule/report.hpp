#pragma once

#include <deque>
#include <filesystem>
#include <string>
#include <vector>

#include "capsule/core/csv.hpp"
#include "capsule/core/error.hpp"

namespace capsule {

struct ReportTable {
    std::string name;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    void add(std::vector<std::string> row) {
        if (row.size() != header.size())
            fail(ErrorCode::ShapeError, "table " + name + ": row width " + std::to_string(row.size()) +
                                            " != " + std::to_string(header.size()));
        rows.push_back(std::move(row));
    }

    std::string csv() const {
        csv::Writer w(header);
        for (const auto& r : rows) w.add(r);
        return w.str();
    }

    /// First row whose cells match every (column, value) pair, or nullptr.
    const std::vector<std::string>* find(const std::vector<std::pair<std::string, std::string>>& keys) const {
        for (const auto& r : rows) {
            bool ok = true;
            for (const auto& [c, v] : keys) ok = ok && r[column(c)] == v;
            if (ok) return &r;
        }
        return nullptr;
    }

    std::size_t column(const std::string& c) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == c) return i;
        fail(ErrorCode::InvalidArgument, "table " + name + " has no column " + c);
    }
};

struct Report {
    std::deque<ReportTable> tables;  // deque: references from table() stay valid

    /// Existing table by name, or a new one with the given header.
    ReportTable& table(const std::string& name, const std::vector<std::string>& header) {
        for (auto& t : tables)
            if (t.name == name) return t;
        tables.push_back({name, header, {}});
        return tables.back();
    }

    const ReportTable* get(const std::string& name) const {
        for (const auto& t : tables)
            if (t.name == name) return &t;
        return nullptr;
    }

    void diagnostic(const std::string& stage, const std::string& spec, const std::string& model,
                    const std::string& code, const std::string& message) {
        table("diagnostics", {"stage", "spec", "model", "code", "message"}).add({stage, spec, model, code, message});
    }

    /// One CSV per table under dir; returns written paths.
    std::vector<std::filesystem::path> write(const std::filesystem::path& dir) const {
        std::vector<std::filesystem::path> out;
        for (const auto& t : tables) {
            csv::Writer w(t.header);
            for (const auto& r : t.rows) w.add(r);
            auto p = dir / (t.name + ".csv");
            w.save(p);
            out.push_back(p);
        }
        return out;
    }
};

inline std::string fmt(double v) { return csv::format_number(v); }

}  // namespace capsule

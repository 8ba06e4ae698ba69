#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "phyto/error.hpp"
#include "phyto/util.hpp"

namespace phyto::csv {

using Row = std::vector<std::string>;

struct Table {
    Row header;
    std::vector<Row> rows;

    [[nodiscard]] std::ptrdiff_t column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return static_cast<std::ptrdiff_t>(i);
        return -1;
    }
};

/// RFC 4180 subset: comma separated, double-quote escaping, LF or CRLF line ends.
inline Table parse(std::string_view text) {
    Table table;
    Row row;
    std::string field;
    bool in_quotes = false;
    bool have_row = false;
    auto end_row = [&] {
        row.push_back(std::move(field));
        field.clear();
        if (!(row.size() == 1 && row[0].empty())) {
            if (table.header.empty() && table.rows.empty() && !have_row) {
                table.header = std::move(row);
                have_row = true;
            } else {
                table.rows.push_back(std::move(row));
            }
        }
        row.clear();
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (in_quotes) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    in_quotes = false;
                }
            } else {
                field.push_back(c);
            }
            continue;
        }
        switch (c) {
        case '"': in_quotes = true; break;
        case ',': row.push_back(std::move(field)); field.clear(); break;
        case '\r': break;
        case '\n': end_row(); break;
        default: field.push_back(c);
        }
    }
    if (in_quotes) fail(Errc::ParseError, "unterminated quoted CSV field");
    if (!field.empty() || !row.empty()) end_row();
    if (!table.header.empty() && table.header[0].starts_with("\xEF\xBB\xBF"))
        table.header[0].erase(0, 3);
    for (const auto& r : table.rows)
        if (r.size() != table.header.size())
            fail(Errc::ParseError, "CSV row has " + std::to_string(r.size()) + " fields, header has " +
                                       std::to_string(table.header.size()));
    return table;
}

inline Table read(const std::filesystem::path& path) { return parse(read_file(path)); }

inline std::string escape(std::string_view field) {
    if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out.push_back('"');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

inline void append_row(std::string& out, const Row& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
        if (i) out.push_back(',');
        out += escape(row[i]);
    }
    out.push_back('\n');
}

inline std::string format(const Table& table) {
    std::string out;
    append_row(out, table.header);
    for (const auto& r : table.rows) append_row(out, r);
    return out;
}

}  // namespace phyto::csv

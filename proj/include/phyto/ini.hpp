#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "phyto/error.hpp"
#include "phyto/util.hpp"

namespace phyto {

/// Flat INI document: section -> key -> value. Top-level keys live in section "".
class IniFile {
public:
    using Section = std::map<std::string, std::string>;

    static IniFile parse(const std::string& text) {
        namespace pt = boost::property_tree;
        pt::ptree tree;
        std::istringstream in(text);
        try {
            pt::ini_parser::read_ini(in, tree);
        } catch (const pt::ini_parser_error& e) {
            fail(Errc::ParseError, e.what());
        }
        IniFile ini;
        for (const auto& [key, node] : tree) {
            if (node.empty())
                ini.sections_[""][key] = std::string(trim(node.data()));
            else
                for (const auto& [k, v] : node) ini.sections_[key][k] = std::string(trim(v.data()));
        }
        return ini;
    }

    static IniFile load(const std::filesystem::path& path) { return parse(read_file(path)); }

    [[nodiscard]] std::optional<std::string> get(const std::string& section,
                                                 const std::string& key) const {
        auto s = sections_.find(section);
        if (s == sections_.end()) return std::nullopt;
        auto k = s->second.find(key);
        if (k == s->second.end()) return std::nullopt;
        return k->second;
    }

    [[nodiscard]] const Section& section(const std::string& name) const {
        static const Section empty;
        auto s = sections_.find(name);
        return s == sections_.end() ? empty : s->second;
    }

    void set(const std::string& section, const std::string& key, std::string value) {
        sections_[section][key] = std::move(value);
    }

    [[nodiscard]] std::string format() const {
        std::string out;
        if (auto top = sections_.find(""); top != sections_.end())
            for (const auto& [k, v] : top->second) out += k + " = " + v + "\n";
        for (const auto& [name, sec] : sections_) {
            if (name.empty()) continue;
            out += "[" + name + "]\n";
            for (const auto& [k, v] : sec) out += k + " = " + v + "\n";
        }
        return out;
    }

private:
    std::map<std::string, Section> sections_;
};

}  // namespace phyto

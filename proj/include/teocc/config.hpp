#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace teocc {

/// Flat `key = value` config text. Lines starting with '#' and blank lines
/// are ignored. Vector values are whitespace-separated. Consumers must read
/// every key they accept through a ConfigMap; unread keys are reported as
/// errors so typos never pass silently.
class ConfigMap {
public:
    ConfigMap() = default;

    static ConfigMap parse(const std::string& text, const std::string& origin = "<config>") {
        ConfigMap m;
        m.origin_ = origin;
        m.text_ = text;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string stripped = strip(line);
            if (stripped.empty() || stripped[0] == '#') continue;
            const auto eq = stripped.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                            ": expected 'key = value', got '" + stripped + "'");
            const std::string key = strip(stripped.substr(0, eq));
            const std::string value = strip(stripped.substr(eq + 1));
            if (key.empty())
                throw std::invalid_argument(origin + ":" + std::to_string(lineno) + ": empty key");
            if (m.values_.count(key))
                throw std::invalid_argument(origin + ":" + std::to_string(lineno) +
                                            ": duplicate key '" + key + "'");
            m.values_[key] = value;
        }
        return m;
    }

    static ConfigMap load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("config: cannot open " + path);
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return parse(text, path);
    }

    bool has(const std::string& key) const { return values_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) const {
        mark(key);
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    std::string get_string(const std::string& key) const {
        mark(key);
        auto it = values_.find(key);
        if (it == values_.end()) missing(key);
        return it->second;
    }

    double get_double(const std::string& key, double fallback) const {
        return has(key) ? parse_double(key, raw(key)) : (mark(key), fallback);
    }

    int get_int(const std::string& key, int fallback) const {
        return has(key) ? parse_int(key, raw(key)) : (mark(key), fallback);
    }

    long long get_int64(const std::string& key, long long fallback) const {
        mark(key);
        if (!has(key)) return fallback;
        const std::string v = values_.at(key);
        std::size_t pos = 0;
        const long long r = std::stoll(v, &pos);
        if (pos != v.size()) bad(key, v, "integer");
        return r;
    }

    bool get_bool(const std::string& key, bool fallback) const {
        mark(key);
        if (!has(key)) return fallback;
        const std::string v = values_.at(key);
        if (v == "true" || v == "1" || v == "on") return true;
        if (v == "false" || v == "0" || v == "off") return false;
        bad(key, v, "boolean (true/false)");
        return false;
    }

    std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const {
        mark(key);
        if (!has(key)) return fallback;
        std::istringstream in(values_.at(key));
        std::vector<double> out;
        std::string tok;
        while (in >> tok) out.push_back(parse_double(key, tok));
        if (out.empty()) bad(key, values_.at(key), "list of numbers");
        return out;
    }

    std::vector<int> get_ints(const std::string& key, std::vector<int> fallback) const {
        mark(key);
        if (!has(key)) return fallback;
        std::istringstream in(values_.at(key));
        std::vector<int> out;
        std::string tok;
        while (in >> tok) out.push_back(parse_int(key, tok));
        if (out.empty()) bad(key, values_.at(key), "list of integers");
        return out;
    }

    /// Throws if the file contains keys no consumer read.
    void reject_unknown() const {
        std::vector<std::string> unknown;
        for (const auto& [k, v] : values_)
            if (!read_.count(k)) unknown.push_back(k);
        if (!unknown.empty()) {
            std::string msg = origin_ + ": unknown config key(s):";
            for (const auto& k : unknown) msg += " '" + k + "'";
            throw std::invalid_argument(msg);
        }
    }

    const std::string& text() const { return text_; }
    const std::string& origin() const { return origin_; }

private:
    static std::string strip(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }

    const std::string& raw(const std::string& key) const { return values_.at(key); }
    void mark(const std::string& key) const { read_.insert(key); }

    [[noreturn]] void missing(const std::string& key) const {
        throw std::invalid_argument(origin_ + ": missing required key '" + key + "'");
    }

    [[noreturn]] void bad(const std::string& key, const std::string& v,
                          const std::string& want) const {
        throw std::invalid_argument(origin_ + ": key '" + key + "': cannot parse '" + v +
                                    "' as " + want);
    }

    double parse_double(const std::string& key, const std::string& v) const {
        std::size_t pos = 0;
        double r = 0;
        try {
            r = std::stod(v, &pos);
        } catch (const std::exception&) {
            bad(key, v, "number");
        }
        if (pos != v.size()) bad(key, v, "number");
        return r;
    }

    int parse_int(const std::string& key, const std::string& v) const {
        std::size_t pos = 0;
        long long r = 0;
        try {
            r = std::stoll(v, &pos);
        } catch (const std::exception&) {
            bad(key, v, "integer");
        }
        if (pos != v.size()) bad(key, v, "integer");
        return static_cast<int>(r);
    }

    std::string origin_ = "<config>";
    std::string text_;
    std::map<std::string, std::string> values_;
    mutable std::set<std::string> read_;
};

}  // namespace teocc

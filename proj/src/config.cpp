#include "prefopt/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>

#include "prefopt/checkpoint.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/format.hpp"

namespace prefopt {

using nlohmann::json;

// ---------------------------------------------------------------------------
// parser

namespace {

class TomlParser {
public:
    TomlParser(std::string_view text, std::string source) : text_(text), source_(std::move(source)) {}

    json parse() {
        json root = json::object();
        json* current = &root;
        std::string current_name;
        while (true) {
            skip_blank_lines();
            if (at_end()) break;
            if (peek() == '[') {
                ++pos_;
                skip_ws();
                auto parts = parse_key_path();
                skip_ws();
                expect(']');
                end_of_line();
                current = &root;
                current_name.clear();
                for (const auto& part : parts) {
                    if (!current_name.empty()) current_name += '.';
                    current_name += part;
                    json& next = (*current)[part];
                    if (next.is_null()) next = json::object();
                    if (!next.is_object()) fail("'" + current_name + "' is already a value, not a table");
                    current = &next;
                }
                continue;
            }
            auto parts = parse_key_path();
            skip_ws();
            expect('=');
            skip_ws();
            json* target = current;
            std::string full = current_name;
            for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
                if (!full.empty()) full += '.';
                full += parts[i];
                json& next = (*target)[parts[i]];
                if (next.is_null()) next = json::object();
                if (!next.is_object()) fail("'" + full + "' is already a value, not a table");
                target = &next;
            }
            if (!full.empty()) full += '.';
            full += parts.back();
            if (target->contains(parts.back())) fail("duplicate key '" + full + "'");
            key_ = full;
            (*target)[parts.back()] = parse_value();
            end_of_line();
        }
        return root;
    }

private:
    bool at_end() const { return pos_ >= text_.size(); }
    char peek() const { return at_end() ? '\0' : text_[pos_]; }

    [[noreturn]] void fail(const std::string& msg) const {
        std::string where = source_ + ":" + std::to_string(line_);
        if (!key_.empty()) where += " (key '" + key_ + "')";
        throw ConfigError(where + ": " + msg);
    }

    void expect(char c) {
        if (peek() != c) fail(std::string("expected '") + c + "'");
        ++pos_;
    }

    void skip_ws() {
        while (!at_end() && (peek() == ' ' || peek() == '\t')) ++pos_;
    }

    void skip_comment() {
        if (peek() == '#') {
            while (!at_end() && peek() != '\n') ++pos_;
        }
    }

    void newline() {
        if (peek() == '\r') ++pos_;
        if (peek() == '\n') {
            ++pos_;
            ++line_;
        }
    }

    void skip_blank_lines() {
        while (!at_end()) {
            skip_ws();
            skip_comment();
            if (peek() == '\n' || peek() == '\r') {
                newline();
                continue;
            }
            break;
        }
        key_.clear();
    }

    // Inside arrays newlines and comments are insignificant.
    void skip_array_space() {
        while (!at_end()) {
            skip_ws();
            skip_comment();
            if (peek() == '\n' || peek() == '\r') {
                newline();
                continue;
            }
            break;
        }
    }

    void end_of_line() {
        skip_ws();
        skip_comment();
        if (at_end()) return;
        if (peek() != '\n' && peek() != '\r') fail("unexpected trailing characters");
        newline();
    }

    static bool bare_key_char(char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
    }

    std::string parse_key() {
        if (peek() == '"') return parse_string();
        const std::size_t start = pos_;
        while (!at_end() && bare_key_char(peek())) ++pos_;
        if (pos_ == start) fail("expected a key");
        return std::string(text_.substr(start, pos_ - start));
    }

    std::vector<std::string> parse_key_path() {
        std::vector<std::string> parts{parse_key()};
        while (true) {
            skip_ws();
            if (peek() != '.') break;
            ++pos_;
            skip_ws();
            parts.push_back(parse_key());
        }
        return parts;
    }

    std::string parse_string() {
        expect('"');
        std::string out;
        while (true) {
            if (at_end() || peek() == '\n') fail("unterminated string");
            const char c = text_[pos_++];
            if (c == '"') break;
            if (c != '\\') {
                out += c;
                continue;
            }
            if (at_end()) fail("unterminated escape");
            const char e = text_[pos_++];
            switch (e) {
                case 'n': out += '\n'; break;
                case 't': out += '\t'; break;
                case '"': out += '"'; break;
                case '\\': out += '\\'; break;
                default: fail(std::string("unsupported escape \\") + e);
            }
        }
        return out;
    }

    json parse_value() {
        const char c = peek();
        if (c == '"') return parse_string();
        if (c == '[') return parse_array();
        if (text_.substr(pos_, 4) == "true") {
            pos_ += 4;
            return true;
        }
        if (text_.substr(pos_, 5) == "false") {
            pos_ += 5;
            return false;
        }
        return parse_number();
    }

    json parse_array() {
        expect('[');
        json arr = json::array();
        while (true) {
            skip_array_space();
            if (peek() == ']') {
                ++pos_;
                return arr;
            }
            arr.push_back(parse_value());
            skip_array_space();
            if (peek() == ',') {
                ++pos_;
                continue;
            }
            if (peek() == ']') {
                ++pos_;
                return arr;
            }
            fail("expected ',' or ']' in array");
        }
    }

    json parse_number() {
        const std::size_t start = pos_;
        while (!at_end()) {
            const char c = peek();
            if ((c >= '0' && c <= '9') || c == '+' || c == '-' || c == '.' || c == 'e' || c == 'E' || c == '_') {
                ++pos_;
            } else {
                break;
            }
        }
        std::string token(text_.substr(start, pos_ - start));
        token.erase(std::remove(token.begin(), token.end(), '_'), token.end());
        if (token.empty()) fail("expected a value");
        if (token.front() == '+') token.erase(0, 1);
        const bool is_float = token.find_first_of(".eE") != std::string::npos;
        const char* first = token.data();
        const char* last = token.data() + token.size();
        if (is_float) {
            double v = 0.0;
            const auto res = std::from_chars(first, last, v);
            if (res.ec != std::errc() || res.ptr != last) fail("malformed number '" + token + "'");
            return v;
        }
        std::int64_t v = 0;
        const auto res = std::from_chars(first, last, v);
        if (res.ec != std::errc() || res.ptr != last) fail("malformed integer '" + token + "'");
        return v;
    }

    std::string_view text_;
    std::string source_;
    std::size_t pos_ = 0;
    std::size_t line_ = 1;
    std::string key_;
};

// ---------------------------------------------------------------------------
// emitter

bool bare_key(const std::string& k) {
    if (k.empty()) return false;
    return std::all_of(k.begin(), k.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
    });
}

std::string quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        switch (c) {
            case '"': out += "\\\""; break;
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            default: out += c;
        }
    }
    return out + '"';
}

std::string emit_key(const std::string& k) { return bare_key(k) ? k : quote(k); }

std::string emit_value(const json& v) {
    switch (v.type()) {
        case json::value_t::string: return quote(v.get<std::string>());
        case json::value_t::boolean: return v.get<bool>() ? "true" : "false";
        case json::value_t::number_integer: return std::to_string(v.get<std::int64_t>());
        case json::value_t::number_unsigned: return std::to_string(v.get<std::uint64_t>());
        case json::value_t::number_float: {
            const double d = v.get<double>();
            if (!std::isfinite(d)) throw ConfigError("cannot write a non-finite number to a config");
            std::string s = format_double(d);
            if (s.find_first_of(".e") == std::string::npos) s += ".0";
            return s;
        }
        case json::value_t::array: {
            std::string out = "[";
            for (std::size_t i = 0; i < v.size(); ++i) {
                if (i) out += ", ";
                out += emit_value(v[i]);
            }
            return out + "]";
        }
        default: throw ConfigError("cannot write a value of this type to a config");
    }
}

void emit_table(const json& t, const std::string& name, std::string& out) {
    bool wrote_header = name.empty();
    for (const auto& [k, v] : t.items()) {
        if (v.is_object()) continue;
        if (!wrote_header) {
            out += "\n[" + name + "]\n";
            wrote_header = true;
        }
        out += emit_key(k) + " = " + emit_value(v) + "\n";
    }
    for (const auto& [k, v] : t.items()) {
        if (!v.is_object()) continue;
        const std::string child = name.empty() ? emit_key(k) : name + "." + emit_key(k);
        if (v.empty()) {
            out += "\n[" + child + "]\n";
            continue;
        }
        emit_table(v, child, out);
    }
}

const json& empty_object() {
    static const json kEmpty = json::object();
    return kEmpty;
}

}  // namespace

json parse_toml(std::string_view text, const std::string& source) { return TomlParser(text, source).parse(); }

std::string emit_toml(const json& doc) {
    if (!doc.is_object()) throw ConfigError("config root must be a table");
    std::string out;
    emit_table(doc, "", out);
    if (!out.empty() && out.front() == '\n') out.erase(0, 1);
    return out;
}

json merge_config(json base, const json& top) {
    if (!base.is_object() || !top.is_object()) return top;
    for (const auto& [k, v] : top.items()) {
        if (v.is_object() && base.contains(k) && base[k].is_object()) {
            base[k] = merge_config(base[k], v);
        } else {
            base[k] = v;
        }
    }
    return base;
}

json load_config_file(const std::filesystem::path& path) {
    return parse_toml(read_text_file(path), path.filename().string());
}

// ---------------------------------------------------------------------------
// ConfigTable

ConfigTable::ConfigTable(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    if (!doc_.is_object()) throw ConfigError("'" + path_ + "' must be a table");
}

std::string ConfigTable::path_of(std::string_view key) const {
    return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
}

std::vector<std::string> ConfigTable::keys() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : doc_.items()) out.push_back(k);
    return out;
}

bool ConfigTable::has(std::string_view key) const { return doc_.contains(std::string(key)); }

const json& ConfigTable::raw(std::string_view key) const {
    const auto it = doc_.find(std::string(key));
    if (it == doc_.end()) throw ConfigError("missing required key '" + path_of(key) + "'");
    return *it;
}

double ConfigTable::number(std::string_view key) const {
    const auto& v = raw(key);
    if (!v.is_number()) throw ConfigError("key '" + path_of(key) + "' must be a number");
    const double d = v.get<double>();
    if (!std::isfinite(d)) throw ConfigError("key '" + path_of(key) + "' must be finite");
    return d;
}

double ConfigTable::number(std::string_view key, double fallback) const {
    return has(key) ? number(key) : fallback;
}

std::int64_t ConfigTable::integer(std::string_view key) const {
    const auto& v = raw(key);
    if (!v.is_number_integer()) throw ConfigError("key '" + path_of(key) + "' must be an integer");
    return v.get<std::int64_t>();
}

std::int64_t ConfigTable::integer(std::string_view key, std::int64_t fallback) const {
    return has(key) ? integer(key) : fallback;
}

std::uint64_t ConfigTable::seed(std::string_view key) const {
    const auto v = integer(key);
    if (v < 0) throw ConfigError("key '" + path_of(key) + "' must be a non-negative integer");
    return static_cast<std::uint64_t>(v);
}

bool ConfigTable::boolean(std::string_view key, bool fallback) const {
    if (!has(key)) return fallback;
    const auto& v = raw(key);
    if (!v.is_boolean()) throw ConfigError("key '" + path_of(key) + "' must be true or false");
    return v.get<bool>();
}

std::string ConfigTable::string(std::string_view key) const {
    const auto& v = raw(key);
    if (!v.is_string()) throw ConfigError("key '" + path_of(key) + "' must be a string");
    return v.get<std::string>();
}

std::string ConfigTable::string(std::string_view key, std::string_view fallback) const {
    return has(key) ? string(key) : std::string(fallback);
}

std::vector<double> ConfigTable::numbers(std::string_view key) const {
    const auto& v = raw(key);
    if (!v.is_array()) throw ConfigError("key '" + path_of(key) + "' must be an array of numbers");
    std::vector<double> out;
    for (const auto& x : v) {
        if (!x.is_number()) throw ConfigError("key '" + path_of(key) + "' must be an array of numbers");
        out.push_back(x.get<double>());
    }
    return out;
}

std::vector<std::string> ConfigTable::strings(std::string_view key) const {
    const auto& v = raw(key);
    if (v.is_string()) return {v.get<std::string>()};
    if (!v.is_array()) throw ConfigError("key '" + path_of(key) + "' must be an array of strings");
    std::vector<std::string> out;
    for (const auto& x : v) {
        if (!x.is_string()) throw ConfigError("key '" + path_of(key) + "' must be an array of strings");
        out.push_back(x.get<std::string>());
    }
    return out;
}

std::vector<std::vector<std::int32_t>> ConfigTable::int_rows(std::string_view key) const {
    const auto& v = raw(key);
    const std::string msg = "key '" + path_of(key) + "' must be an array of integer arrays";
    if (!v.is_array()) throw ConfigError(msg);
    std::vector<std::vector<std::int32_t>> out;
    for (const auto& row : v) {
        if (!row.is_array()) throw ConfigError(msg);
        auto& r = out.emplace_back();
        for (const auto& x : row) {
            if (!x.is_number_integer()) throw ConfigError(msg);
            const auto i = x.get<std::int64_t>();
            if (i < std::numeric_limits<std::int32_t>::min() || i > std::numeric_limits<std::int32_t>::max()) {
                throw ConfigError(msg);
            }
            r.push_back(static_cast<std::int32_t>(i));
        }
    }
    return out;
}

ConfigTable ConfigTable::table(std::string_view key) const {
    const auto it = doc_.find(std::string(key));
    if (it == doc_.end()) return ConfigTable(empty_object(), path_of(key));
    if (!it->is_object()) throw ConfigError("key '" + path_of(key) + "' must be a table");
    return ConfigTable(*it, path_of(key));
}

void ConfigTable::allow_only(std::initializer_list<std::string_view> allowed) const {
    for (const auto& [k, v] : doc_.items()) {
        if (std::find(allowed.begin(), allowed.end(), k) == allowed.end()) {
            std::string names;
            for (auto a : allowed) {
                if (!names.empty()) names += ", ";
                names += a;
            }
            throw ConfigError("unknown key '" + path_of(k) + "'; allowed here: " + names);
        }
    }
}

}  // namespace prefopt

#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace prefopt {

/// Parses the TOML subset used by experiment configs: comments, [table] and
/// [dotted.table] headers, bare or quoted keys, strings, integers, floats,
/// booleans and (possibly multi-line, nested) arrays. Throws ConfigError
/// naming the line and key.
nlohmann::json parse_toml(std::string_view text, const std::string& source = "<config>");

/// Inverse of parse_toml for documents it can produce. Keys come out sorted,
/// scalars before tables, so the bytes are a function of the content.
std::string emit_toml(const nlohmann::json& doc);

/// Recursively overlays `top` onto `base`; tables merge, everything else
/// replaces.
nlohmann::json merge_config(nlohmann::json base, const nlohmann::json& top);

/// Typed read access into one table of a config with key validation.
/// Every error names the full dotted key.
class ConfigTable {
public:
    ConfigTable(const nlohmann::json& doc, std::string path);

    bool has(std::string_view key) const;
    std::vector<std::string> keys() const;
    std::string path_of(std::string_view key) const;

    double number(std::string_view key, double fallback) const;
    double number(std::string_view key) const;
    std::int64_t integer(std::string_view key, std::int64_t fallback) const;
    std::int64_t integer(std::string_view key) const;
    std::uint64_t seed(std::string_view key) const;
    bool boolean(std::string_view key, bool fallback) const;
    std::string string(std::string_view key, std::string_view fallback) const;
    std::string string(std::string_view key) const;
    std::vector<double> numbers(std::string_view key) const;
    std::vector<std::string> strings(std::string_view key) const;
    std::vector<std::vector<std::int32_t>> int_rows(std::string_view key) const;

    ConfigTable table(std::string_view key) const;
    const nlohmann::json& raw(std::string_view key) const;

    /// Throws ConfigError for any key not in `allowed`.
    void allow_only(std::initializer_list<std::string_view> allowed) const;

private:
    const nlohmann::json& doc_;
    std::string path_;
};

nlohmann::json load_config_file(const std::filesystem::path& path);

}  // namespace prefopt

#pragma once

#include <filesystem>
#include <memory>

#include <json.hpp>

#include "prefopt/seqmodel.hpp"

namespace prefopt {

/// {backend, vocab_size, max_len, params}. Doubles round-trip bit-exactly.
nlohmann::json policy_to_json(const Policy& policy);
std::unique_ptr<Policy> policy_from_json(const nlohmann::json& doc);

void save_policy(const Policy& policy, const std::filesystem::path& path);
std::unique_ptr<Policy> load_policy(const std::filesystem::path& path);

/// Deterministic serialization used for every JSON artifact we write.
std::string dump_json(const nlohmann::json& doc);

void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace prefopt

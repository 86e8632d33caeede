#include "prefopt/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "prefopt/errors.hpp"
#include "prefopt/log_bilinear_policy.hpp"
#include "prefopt/tabular_policy.hpp"

namespace prefopt {

nlohmann::json policy_to_json(const Policy& policy) {
    return {{"backend", std::string(backend_name(policy.backend()))},
            {"vocab_size", policy.vocab_size()},
            {"max_len", policy.max_len()},
            {"params", policy.params_json()}};
}

std::unique_ptr<Policy> policy_from_json(const nlohmann::json& doc) {
    try {
        const auto backend = parse_backend(doc.at("backend").get<std::string>());
        const int vocab = doc.at("vocab_size").get<int>();
        const int max_len = doc.at("max_len").get<int>();
        const auto& params = doc.at("params");
        if (backend == Backend::tabular) {
            return std::make_unique<TabularPolicy>(TabularPolicy::from_params_json(vocab, max_len, params));
        }
        return std::make_unique<LogBilinearPolicy>(LogBilinearPolicy::from_params_json(vocab, max_len, params));
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed policy checkpoint: ") + e.what());
    }
}

std::string dump_json(const nlohmann::json& doc) { return doc.dump(); }

void write_text_file(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) {
        std::error_code ec;
        std::filesystem::create_directories(path.parent_path(), ec);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string() + " for reading");
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void save_policy(const Policy& policy, const std::filesystem::path& path) {
    write_text_file(path, dump_json(policy_to_json(policy)) + "\n");
}

std::unique_ptr<Policy> load_policy(const std::filesystem::path& path) {
    const auto text = read_text_file(path);
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput("cannot parse checkpoint " + path.string() + ": " + e.what());
    }
    return policy_from_json(doc);
}

}  // namespace prefopt

#include <sstream>

#include "prefopt/checkpoint.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/prefdata.hpp"

namespace prefopt {

using ordered_json = nlohmann::ordered_json;

std::string dataset_to_jsonl(const PreferenceDataset& data) {
    std::string out;
    const ordered_json header{{"schema", data.header.schema},
                              {"seed", data.header.seed},
                              {"vocab_size", data.header.vocab_size},
                              {"config_hash", data.header.config_hash}};
    out += header.dump();
    out += '\n';
    for (const auto& ex : data.examples) {
        const ordered_json rec{{"prompt", ex.prompt},
                               {"chosen", ex.chosen},
                               {"rejected", ex.rejected},
                               {"reward_chosen", ex.reward_chosen},
                               {"reward_rejected", ex.reward_rejected},
                               {"overlap_realized", ex.overlap_realized}};
        out += rec.dump();
        out += '\n';
    }
    return out;
}

PreferenceDataset dataset_from_jsonl(const std::string& text, const std::string& source) {
    PreferenceDataset data;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json rec;
        try {
            rec = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInput(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
        try {
            if (rec.contains("schema")) {
                if (have_header || !data.examples.empty()) {
                    throw InvalidInput(source + ":" + std::to_string(lineno) + ": header must be the first line");
                }
                data.header.schema = rec.at("schema").get<std::string>();
                data.header.seed = rec.at("seed").get<std::uint64_t>();
                data.header.vocab_size = rec.at("vocab_size").get<int>();
                data.header.config_hash = rec.value("config_hash", std::string{});
                have_header = true;
                continue;
            }
            PreferenceExample ex;
            ex.prompt = rec.at("prompt").get<TokenSeq>();
            ex.chosen = rec.at("chosen").get<TokenSeq>();
            ex.rejected = rec.at("rejected").get<TokenSeq>();
            ex.reward_chosen = rec.at("reward_chosen").get<double>();
            ex.reward_rejected = rec.at("reward_rejected").get<double>();
            ex.overlap_realized = rec.at("overlap_realized").get<double>();
            ex.first_won = false;
            data.examples.push_back(std::move(ex));
        } catch (const nlohmann::json::exception& e) {
            throw InvalidInput(source + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    if (!have_header) throw InvalidInput(source + ": missing header line with a \"schema\" key");
    for (const auto& ex : data.examples) {
        validate_seq(ex.prompt, data.header.vocab_size, source + " prompt");
        validate_seq(ex.chosen, data.header.vocab_size, source + " chosen");
        validate_seq(ex.rejected, data.header.vocab_size, source + " rejected");
    }
    return data;
}

void save_dataset(const PreferenceDataset& data, const std::filesystem::path& path) {
    write_text_file(path, dataset_to_jsonl(data));
}

PreferenceDataset load_dataset(const std::filesystem::path& path) {
    return dataset_from_jsonl(read_text_file(path), path.string());
}

}  // namespace prefopt

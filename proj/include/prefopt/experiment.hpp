#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prefopt/prefdata.hpp"
#include "prefopt/trainer.hpp"

namespace prefopt {

/// Names accepted by the top-level `preset` key.
std::vector<std::string> preset_names();
/// Throws ConfigError for an unknown name.
nlohmann::json preset_config(std::string_view name);

/// Overlays the user document on its preset (if any) and drops the preset
/// key; the result is self-contained.
nlohmann::json resolve_config(const nlohmann::json& user);

/// Checks every section for unknown keys and required values.
void validate_config(const nlohmann::json& cfg);

std::string config_hash(const nlohmann::json& cfg);

/// Everything derived deterministically from a resolved config.
struct Experiment {
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::unique_ptr<Policy> reference;
    LatentReward reward;
    std::vector<TokenSeq> prompts;
    /// Explicit chosen distribution per prompt, when the data mode needs or
    /// the metrics ask for one.
    std::vector<ChosenTarget> targets;
};

Experiment build_experiment(const nlohmann::json& resolved);

PreferenceDataset generate_dataset(const Experiment& exp);
TrainConfig build_train_config(const nlohmann::json& resolved);

/// The policy training starts from: a copy of the reference.
std::unique_ptr<Policy> initial_policy(const Experiment& exp);

}  // namespace prefopt

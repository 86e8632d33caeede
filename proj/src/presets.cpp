#include <array>
#include <utility>

#include "prefopt/config.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/experiment.hpp"

namespace prefopt {

namespace {

// Protocol shape of the large-model grid: batch 128, one epoch, Adam with a
// cosine schedule and 10% warmup. The beta grid depends on the objective
// family. At toy scale these learning rates barely move the policy.
constexpr std::string_view kPaperGrid = R"(
[model]
backend = "log_bilinear"
vocab_size = 16
max_len = 8
embed_dim = 8
init_scale = 0.5

[reward]
kind = "feature_linear"
scale = 1.0

[data]
n = 2000
overlap = 0.5

[train]
objective = "dpo"
optimizer = "adam"
batch_size = 128
epochs = 1
schedule = "cosine"
warmup_frac = 0.1
lr = 1e-6

[sweep]
objective = ["dpo", "ipo", "cpo", "slic", "simpo", "infopo"]
lr = [3e-7, 5e-7, 6e-7, 1e-6]

[sweep.beta_by_objective]
dpo = [0.001, 0.01, 0.1]
ipo = [0.001, 0.01, 0.1]
cpo = [0.001, 0.01, 0.1]
slic = [0.001, 0.01, 0.1]
simpo = [0.5, 1.0, 2.0]
infopo = [0.5, 1.0, 2.0]
)";

constexpr std::string_view kFig12 = R"(
seed = 7

[model]
backend = "log_bilinear"
vocab_size = 16
max_len = 8
embed_dim = 8
context_decay = 0.5
init_scale = 0.5
eos_bias = 4.0

[reward]
kind = "feature_linear"
scale = 4.0

[data]
n = 2000
overlap = 0.7
num_prompts = 8
prompt_len = 2

[train]
objective = "dpo"
beta = 0.1
optimizer = "adam"
lr = 3e-3
batch_size = 64
epochs = 5
eval_every = 10

[sweep]
objective = ["dpo", "infopo"]
)";

// Eight responses (EOS plus seven one-token answers) under a uniform
// reference; chosen responses come from a two-mode tilt of the reference
// and rejected ones from the reference itself.
constexpr std::string_view kTheorem41 = R"(
seed = 3

[model]
backend = "tabular"
vocab_size = 8
max_len = 1
init_scale = 0.0

[reward]
kind = "modes"
modes = [[2], [5]]
mode_value = 3.0

[data]
mode = "contrastive"
chosen_beta = 1.0
n = 4096
prompts = [[1]]

[train]
objective = "infopo"
optimizer = "adam"
lr = 1e-2
batch_size = 4096
epochs = 2000
eval_every = 100
reverse_kl = true
)";

constexpr std::array<std::pair<std::string_view, std::string_view>, 3> kPresets{{
    {"paper-grid", kPaperGrid},
    {"fig12-dynamics", kFig12},
    {"theorem41-tabular", kTheorem41},
}};

}  // namespace

std::vector<std::string> preset_names() {
    std::vector<std::string> out;
    for (const auto& [name, text] : kPresets) out.emplace_back(name);
    return out;
}

nlohmann::json preset_config(std::string_view name) {
    for (const auto& [n, text] : kPresets) {
        if (n == name) return parse_toml(text, "preset " + std::string(n));
    }
    std::string names;
    for (const auto& [n, text] : kPresets) {
        if (!names.empty()) names += ", ";
        names += n;
    }
    throw ConfigError("unknown preset '" + std::string(name) + "' for key 'preset'; available: " + names);
}

nlohmann::json resolve_config(const nlohmann::json& user) {
    if (!user.is_object()) throw ConfigError("config root must be a table");
    if (!user.contains("preset")) return user;
    const auto& p = user["preset"];
    if (!p.is_string()) throw ConfigError("key 'preset' must be a string");
    auto merged = merge_config(preset_config(p.get<std::string>()), user);
    merged.erase("preset");
    return merged;
}

}  // namespace prefopt

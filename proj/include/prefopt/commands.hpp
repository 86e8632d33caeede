#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <vector>

#include <json.hpp>

#include "prefopt/trainer.hpp"

namespace prefopt {

namespace exit_code {
inline constexpr int ok = 0;
inline constexpr int failure = 1;
inline constexpr int config = 2;
inline constexpr int io = 3;
inline constexpr int diverged = 4;
inline constexpr int sweep_failed = 5;
inline constexpr int check_failed = 6;
}  // namespace exit_code

struct CliOptions {
    std::optional<std::filesystem::path> config;
    std::optional<std::filesystem::path> out;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 1;
    bool quiet = false;
    // gradcheck
    std::size_t instances = 100;
    bool inject_sign_flip = false;
    // report
    std::vector<std::filesystem::path> run_dirs;
};

int cmd_gen(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_train(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_sweep(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_micheck(const CliOptions& opts, std::ostream& out, std::ostream& err);
int cmd_report(const CliOptions& opts, std::ostream& out, std::ostream& err);

/// Reads the config named by opts, applies the preset and --seed override.
nlohmann::json load_resolved_config(const CliOptions& opts);

/// --out, else $PREFOPT_OUT_DIR/<config stem>, else runs/<config stem>.
std::filesystem::path output_dir(const CliOptions& opts, std::string_view fallback_name);

struct RunOutcome {
    TrajectoryPoint initial;
    TrajectoryPoint final;
};

/// Trains one resolved config into `dir`: resolved config copy, trajectory
/// CSV, checkpoint (policy plus optimizer state) and run.json. Relative
/// data paths resolve against `base_dir`.
RunOutcome run_training(const nlohmann::json& resolved, const std::filesystem::path& dir,
                        const std::filesystem::path& base_dir, bool parallel_batches = true);

}  // namespace prefopt

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "prefopt/errors.hpp"
#include "prefopt/losses.hpp"

namespace prefopt {

enum class OptimizerKind { sgd, adam };
enum class Schedule { constant, cosine };

std::string_view optimizer_name(OptimizerKind o);
OptimizerKind parse_optimizer(std::string_view name);
std::string_view schedule_name(Schedule s);
Schedule parse_schedule(std::string_view name);

struct TrainConfig {
    LossSpec loss;
    OptimizerKind optimizer = OptimizerKind::adam;
    double lr = 1e-2;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 64;
    std::size_t epochs = 5;
    double warmup_frac = 0.0;
    Schedule schedule = Schedule::constant;
    std::uint64_t seed = 0;
    /// Evaluate every this many optimizer steps; 0 records only the first and
    /// last step.
    std::size_t eval_every = 0;
    /// Use the OpenMP batch kernel (results are identical either way).
    bool parallel = true;

    /// lr >= 0 is accepted so that lr = 0 runs are possible as a no-op check.
    void validate() const;
};

/// Learning rate applied at 0-based step `step` out of `total_steps`.
double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps);

struct TrajectoryPoint {
    std::size_t step = 0;
    double loss = 0.0;
    double chosen_avg_logp = 0.0;
    double rejected_avg_logp = 0.0;
    double margin = 0.0;
    double reward_accuracy = 0.0;
    std::optional<double> reverse_kl;
    std::size_t clamp_count = 0;
    // per-sequence (unnormalized) means
    double chosen_logp = 0.0;
    double rejected_logp = 0.0;
};

struct TrainTrajectory {
    std::vector<TrajectoryPoint> points;

    /// step,loss,chosen_avg_logp,rejected_avg_logp,margin,reward_accuracy,reverse_kl,clamp_count
    std::string to_csv() const;
    static TrainTrajectory from_csv(const std::string& text, const std::string& source);
};

struct OptimizerState {
    std::size_t step = 0;
    std::vector<double> m;
    std::vector<double> v;

    nlohmann::json to_json() const;
};

/// Target used for the reverse-KL metric: pi_chosen(.|prompt) over the full
/// enumerated response space of that prompt.
struct ChosenTarget {
    TokenSeq prompt;
    SeqDistribution chosen;
};

struct TrainResult {
    std::unique_ptr<Policy> policy;
    TrainTrajectory trajectory;
    OptimizerState optimizer;
};

/// Thrown when a step produces a non-finite loss, gradient or parameter.
/// Carries the policy as it was before the failing step.
class TrainingDiverged : public NumericError {
public:
    TrainingDiverged(std::size_t step, std::shared_ptr<const Policy> last_good, TrainTrajectory trajectory,
                     const std::string& detail);

    std::size_t step() const { return step_; }
    const Policy& last_good() const { return *last_good_; }
    const TrainTrajectory& trajectory() const { return trajectory_; }

private:
    std::size_t step_;
    std::shared_ptr<const Policy> last_good_;
    TrainTrajectory trajectory_;
};

/// Trains a copy of `policy` against a frozen `ref_policy`. Tabular policies
/// get rows materialized for every context the data touches. When `targets`
/// is non-empty each trajectory point carries the mean reverse KL to them.
TrainResult train(const Policy& policy, const Policy& ref_policy, const PreferenceDataset& data,
                  const TrainConfig& cfg, std::span<const ChosenTarget> targets = {});

/// Fraction of examples whose implicit chosen score strictly exceeds the
/// rejected one. Ties count as misses.
double reward_accuracy(const Policy& policy, const Policy& ref_policy, std::span<const PreferenceExample> data,
                       const LossSpec& spec);

/// Mean over targets of KL(pi_theta(.|x) || pi_chosen(.|x)).
double reverse_kl_to_chosen(const Policy& policy, std::span<const ChosenTarget> targets);

/// Full-dataset evaluation at the current parameters.
TrajectoryPoint evaluate_point(const Policy& policy, std::span<const RefTerms> ref,
                               std::span<const PreferenceExample> data, const LossSpec& spec,
                               std::span<const ChosenTarget> targets);

struct DynamicsRun {
    LossSpec loss;
    TrainResult result;
};

/// Trains each objective from the same initial policy, data and seed.
std::vector<DynamicsRun> dynamics_experiment(const Policy& policy, const Policy& ref_policy,
                                             const PreferenceDataset& data, const TrainConfig& base,
                                             std::span<const LossSpec> objectives,
                                             std::span<const ChosenTarget> targets = {});

nlohmann::json checkpoint_json(const Policy& policy, const OptimizerState& opt, const TrainConfig& cfg);

}  // namespace prefopt

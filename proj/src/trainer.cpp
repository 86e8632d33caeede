#include "prefopt/trainer.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "prefopt/batch.hpp"
#include "prefopt/checkpoint.hpp"
#include "prefopt/format.hpp"
#include "prefopt/oracle.hpp"
#include "prefopt/tabular_policy.hpp"

namespace prefopt {

std::string_view optimizer_name(OptimizerKind o) { return o == OptimizerKind::sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(std::string_view name) {
    if (name == "sgd") return OptimizerKind::sgd;
    if (name == "adam") return OptimizerKind::adam;
    throw InvalidInput("unknown optimizer '" + std::string(name) + "'; valid optimizers: sgd, adam");
}

std::string_view schedule_name(Schedule s) { return s == Schedule::constant ? "constant" : "cosine"; }

Schedule parse_schedule(std::string_view name) {
    if (name == "constant") return Schedule::constant;
    if (name == "cosine") return Schedule::cosine;
    throw InvalidInput("unknown schedule '" + std::string(name) + "'; valid schedules: constant, cosine");
}

void TrainConfig::validate() const {
    loss.validate();
    if (loss.objective == Objective::rm) {
        throw InvalidInput("objective rm fits a reward model and cannot train a policy");
    }
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw InvalidInput("lr must be finite and >= 0");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw InvalidInput("adam beta1 must lie in [0, 1)");
    if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw InvalidInput("adam beta2 must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw InvalidInput("adam epsilon must be positive");
    if (batch_size < 1) throw InvalidInput("batch_size must be at least 1");
    if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0)) throw InvalidInput("warmup_frac must lie in [0, 1]");
}

double scheduled_lr(const TrainConfig& cfg, std::size_t step, std::size_t total_steps) {
    const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_frac * static_cast<double>(total_steps)));
    if (step < warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    if (cfg.schedule == Schedule::constant || total_steps <= warmup) return cfg.lr;
    const double progress = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// trajectory I/O

namespace {

constexpr std::string_view kCsvHeader =
    "step,loss,chosen_avg_logp,rejected_avg_logp,margin,reward_accuracy,reverse_kl,clamp_count";

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_cell(const std::string& cell, const std::string& source, std::size_t line_no) {
    try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used != cell.size()) throw std::invalid_argument(cell);
        return v;
    } catch (const std::exception&) {
        throw IoError(source + ":" + std::to_string(line_no) + ": bad number '" + cell + "'");
    }
}

}  // namespace

std::string TrainTrajectory::to_csv() const {
    std::string out(kCsvHeader);
    out += '\n';
    for (const auto& p : points) {
        out += std::to_string(p.step);
        for (double v : {p.loss, p.chosen_avg_logp, p.rejected_avg_logp, p.margin, p.reward_accuracy}) {
            out += ',';
            out += format_double(v);
        }
        out += ',';
        if (p.reverse_kl) out += format_double(*p.reverse_kl);
        out += ',';
        out += std::to_string(p.clamp_count);
        out += '\n';
    }
    return out;
}

TrainTrajectory TrainTrajectory::from_csv(const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line != kCsvHeader) {
        throw IoError(source + ": not a trajectory CSV (unexpected header)");
    }
    TrainTrajectory traj;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != 8) throw IoError(source + ":" + std::to_string(line_no) + ": expected 8 columns");
        TrajectoryPoint p;
        p.step = static_cast<std::size_t>(parse_cell(cells[0], source, line_no));
        p.loss = parse_cell(cells[1], source, line_no);
        p.chosen_avg_logp = parse_cell(cells[2], source, line_no);
        p.rejected_avg_logp = parse_cell(cells[3], source, line_no);
        p.margin = parse_cell(cells[4], source, line_no);
        p.reward_accuracy = parse_cell(cells[5], source, line_no);
        if (!cells[6].empty()) p.reverse_kl = parse_cell(cells[6], source, line_no);
        p.clamp_count = static_cast<std::size_t>(parse_cell(cells[7], source, line_no));
        traj.points.push_back(p);
    }
    return traj;
}

nlohmann::json OptimizerState::to_json() const {
    return nlohmann::json{{"step", step}, {"m", m}, {"v", v}};
}

TrainingDiverged::TrainingDiverged(std::size_t step, std::shared_ptr<const Policy> last_good,
                                   TrainTrajectory trajectory, const std::string& detail)
    : NumericError("training diverged at step " + std::to_string(step) + ": " + detail),
      step_(step),
      last_good_(std::move(last_good)),
      trajectory_(std::move(trajectory)) {}

// ---------------------------------------------------------------------------
// metrics

namespace {

// Implicit score of one response: reference-anchored objectives compare
// log-ratios, reference-free ones compare likelihoods.
bool uses_reference(Objective o) { return o == Objective::dpo || o == Objective::infopo || o == Objective::ipo; }

bool chosen_wins(const LossSpec& spec, const PreferenceExample& ex, double lw, double ll, const RefTerms& ref) {
    const bool normalize = spec.length_normalize || spec.objective == Objective::simpo;
    double sw = lw;
    double sl = ll;
    if (uses_reference(spec.objective)) {
        sw -= ref.chosen;
        sl -= ref.rejected;
    }
    if (normalize) {
        sw /= static_cast<double>(ex.chosen.size());
        sl /= static_cast<double>(ex.rejected.size());
    }
    return sw > sl;
}

}  // namespace

double reverse_kl_to_chosen(const Policy& policy, std::span<const ChosenTarget> targets) {
    if (targets.empty()) throw InvalidInput("reverse_kl_to_chosen needs at least one target");
    double acc = 0.0;
    for (const auto& t : targets) acc += reverse_kl(enumerate_seqs(policy, t.prompt), t.chosen);
    return acc / static_cast<double>(targets.size());
}

TrajectoryPoint evaluate_point(const Policy& policy, std::span<const RefTerms> ref,
                               std::span<const PreferenceExample> data, const LossSpec& spec,
                               std::span<const ChosenTarget> targets) {
    if (data.empty()) throw InvalidInput("cannot evaluate on an empty dataset");
    const auto stats = example_stats(spec, policy, ref, data);
    TrajectoryPoint p;
    std::size_t wins = 0;
    for (std::size_t i = 0; i < stats.size(); ++i) {
        const auto& s = stats[i];
        p.loss += s.loss;
        p.chosen_avg_logp += s.chosen_avg_logp;
        p.rejected_avg_logp += s.rejected_avg_logp;
        p.chosen_logp += s.chosen_logp;
        p.rejected_logp += s.rejected_logp;
        p.clamp_count += s.clamped ? 1 : 0;
        wins += chosen_wins(spec, data[i], s.chosen_logp, s.rejected_logp, ref[i]) ? 1 : 0;
    }
    const auto n = static_cast<double>(stats.size());
    p.loss /= n;
    p.chosen_avg_logp /= n;
    p.rejected_avg_logp /= n;
    p.chosen_logp /= n;
    p.rejected_logp /= n;
    p.margin = p.chosen_avg_logp - p.rejected_avg_logp;
    p.reward_accuracy = static_cast<double>(wins) / n;
    if (!targets.empty()) p.reverse_kl = reverse_kl_to_chosen(policy, targets);
    return p;
}

double reward_accuracy(const Policy& policy, const Policy& ref_policy, std::span<const PreferenceExample> data,
                       const LossSpec& spec) {
    if (data.empty()) throw InvalidInput("reward_accuracy needs a nonempty dataset");
    const auto ref = compute_ref_terms(ref_policy, data);
    std::size_t wins = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& ex = data[i];
        const double lw = seq_logprob(policy, ex.prompt, ex.chosen);
        const double ll = seq_logprob(policy, ex.prompt, ex.rejected);
        wins += chosen_wins(spec, ex, lw, ll, ref[i]) ? 1 : 0;
    }
    return static_cast<double>(wins) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// training loop

namespace {

bool all_finite(std::span<const double> xs) {
    for (double x : xs) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

void check_compatible(const Policy& policy, const Policy& ref_policy) {
    if (policy.vocab_size() != ref_policy.vocab_size() || policy.max_len() != ref_policy.max_len()) {
        throw InvalidInput("policy and reference policy must share vocab_size and max_len");
    }
}

}  // namespace

TrainResult train(const Policy& policy, const Policy& ref_policy, const PreferenceDataset& data,
                  const TrainConfig& cfg, std::span<const ChosenTarget> targets) {
    cfg.validate();
    if (data.examples.empty()) throw InvalidInput("training dataset is empty");
    check_compatible(policy, ref_policy);

    const auto& examples = data.examples;
    std::unique_ptr<Policy> model = policy.clone();
    if (auto* tab = dynamic_cast<TabularPolicy*>(model.get())) {
        for (const auto& ex : examples) {
            tab->materialize(ex.prompt, ex.chosen);
            tab->materialize(ex.prompt, ex.rejected);
        }
    }
    const auto ref = compute_ref_terms(ref_policy, examples);
    const std::size_t n = examples.size();
    const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total = per_epoch * cfg.epochs;

    TrainResult result;
    OptimizerState& opt = result.optimizer;
    const std::size_t dim = model->param_count();
    if (cfg.optimizer == OptimizerKind::adam) {
        opt.m.assign(dim, 0.0);
        opt.v.assign(dim, 0.0);
    }
    auto& traj = result.trajectory;
    traj.points.push_back(evaluate_point(*model, ref, examples, cfg.loss, targets));
    traj.points.back().step = 0;

    Rng order_rng(derive_seed(cfg.seed, "batch_order"));
    std::vector<std::size_t> order(n);
    auto batch_fn = cfg.parallel ? batch_loss_omp : batch_loss_serial;

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = 0; i < n; ++i) order[i] = i;
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);

        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t len = std::min(cfg.batch_size, n - start);
            const std::span<const std::size_t> idx(order.data() + start, len);

            auto diverged = [&](const std::string& detail) {
                return TrainingDiverged(step, std::shared_ptr<const Policy>(model->clone()), traj, detail);
            };
            BatchResult batch;
            try {
                batch = batch_fn(cfg.loss, *model, ref, examples, idx);
            } catch (const NumericError& e) {
                throw diverged(e.what());
            }
            const double inv = 1.0 / static_cast<double>(batch.count);
            if (!std::isfinite(batch.loss_sum)) throw diverged("non-finite loss");
            if (!all_finite(batch.grad_sum)) throw diverged("non-finite gradient");

            const double lr = scheduled_lr(cfg, step, total);
            std::vector<double> next(model->params().begin(), model->params().end());
            opt.step += 1;
            if (cfg.optimizer == OptimizerKind::sgd) {
                for (std::size_t k = 0; k < dim; ++k) next[k] -= lr * (batch.grad_sum[k] * inv);
            } else {
                const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(opt.step));
                const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(opt.step));
                for (std::size_t k = 0; k < dim; ++k) {
                    const double g = batch.grad_sum[k] * inv;
                    opt.m[k] = cfg.adam_beta1 * opt.m[k] + (1.0 - cfg.adam_beta1) * g;
                    opt.v[k] = cfg.adam_beta2 * opt.v[k] + (1.0 - cfg.adam_beta2) * g * g;
                    next[k] -= lr * (opt.m[k] / c1) / (std::sqrt(opt.v[k] / c2) + cfg.adam_eps);
                }
            }
            if (!all_finite(next)) throw diverged("non-finite parameters after update");
            std::vector<double> prev(model->params().begin(), model->params().end());
            std::copy(next.begin(), next.end(), model->params().begin());

            const bool last = step + 1 == total;
            if (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) {
                // A failed evaluation blames this step; roll back to the parameters it started from.
                auto rollback = [&](const std::string& detail) {
                    std::copy(prev.begin(), prev.end(), model->params().begin());
                    return diverged(detail);
                };
                TrajectoryPoint p;
                try {
                    p = evaluate_point(*model, ref, examples, cfg.loss, targets);
                } catch (const NumericError& e) {
                    throw rollback(e.what());
                }
                if (!std::isfinite(p.loss)) throw rollback("non-finite evaluation loss");
                p.step = step + 1;
                traj.points.push_back(p);
            }
            ++step;
        }
    }
    result.policy = std::move(model);
    return result;
}

std::vector<DynamicsRun> dynamics_experiment(const Policy& policy, const Policy& ref_policy,
                                             const PreferenceDataset& data, const TrainConfig& base,
                                             std::span<const LossSpec> objectives,
                                             std::span<const ChosenTarget> targets) {
    if (objectives.empty()) throw InvalidInput("dynamics_experiment needs at least one objective");
    std::vector<DynamicsRun> runs;
    for (const auto& spec : objectives) {
        TrainConfig cfg = base;
        cfg.loss = spec;
        runs.push_back({spec, train(policy, ref_policy, data, cfg, targets)});
    }
    return runs;
}

nlohmann::json checkpoint_json(const Policy& policy, const OptimizerState& opt, const TrainConfig& cfg) {
    auto doc = policy_to_json(policy);
    auto state = opt.to_json();
    state["kind"] = std::string(optimizer_name(cfg.optimizer));
    doc["optimizer"] = std::move(state);
    return doc;
}

}  // namespace prefopt

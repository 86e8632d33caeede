#include "prefopt/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <thread>

#include "prefopt/checks.hpp"
#include "prefopt/checkpoint.hpp"
#include "prefopt/config.hpp"
#include "prefopt/errors.hpp"
#include "prefopt/experiment.hpp"
#include "prefopt/format.hpp"

namespace prefopt {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fixed(double x, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, x);
    return buf;
}

std::string sci(double x) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.3e", x);
    return buf;
}

// Maps library exceptions onto the exit-code contract.
template <typename F>
int guarded(std::ostream& err, F body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_code::config;
    } catch (const IoError& e) {
        err << "I/O error: " << e.what() << "\n";
        return exit_code::io;
    } catch (const TrainingDiverged& e) {
        err << "aborted: " << e.what() << "\n";
        return exit_code::diverged;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_code::failure;
    }
}

fs::path config_dir(const CliOptions& opts) {
    if (!opts.config) return fs::current_path();
    const auto parent = opts.config->parent_path();
    return parent.empty() ? fs::current_path() : parent;
}

std::string config_stem(const CliOptions& opts, std::string_view fallback) {
    return opts.config ? opts.config->stem().string() : std::string(fallback);
}

void write_resolved(const fs::path& dir, const json& resolved) {
    write_text_file(dir / "resolved_config.toml", emit_toml(resolved));
}

double mean_overlap(const PreferenceDataset& d) {
    double acc = 0.0;
    for (const auto& ex : d.examples) acc += ex.overlap_realized;
    return d.empty() ? 0.0 : acc / static_cast<double>(d.size());
}

json point_json(const TrajectoryPoint& p) {
    json j{{"step", p.step},
           {"loss", p.loss},
           {"chosen_avg_logp", p.chosen_avg_logp},
           {"rejected_avg_logp", p.rejected_avg_logp},
           {"margin", p.margin},
           {"reward_accuracy", p.reward_accuracy},
           {"clamp_count", p.clamp_count},
           {"chosen_logp", p.chosen_logp},
           {"rejected_logp", p.rejected_logp}};
    if (p.reverse_kl) j["reverse_kl"] = *p.reverse_kl;
    return j;
}

std::string metrics_line(const TrajectoryPoint& p) {
    std::string s = "step " + std::to_string(p.step) + "  loss " + fixed(p.loss) + "  chosen " +
                    fixed(p.chosen_avg_logp) + "  rejected " + fixed(p.rejected_avg_logp) + "  margin " +
                    fixed(p.margin) + "  acc " + fixed(p.reward_accuracy, 3);
    if (p.reverse_kl) s += "  rkl " + fixed(*p.reverse_kl, 5);
    if (p.clamp_count) s += "  clamped " + std::to_string(p.clamp_count);
    return s;
}

PreferenceDataset obtain_dataset(const Experiment& exp, const fs::path& base_dir, bool* loaded) {
    const auto& data = exp.config.value("data", json::object());
    *loaded = data.contains("path");
    if (!*loaded) return generate_dataset(exp);
    if (!data["path"].is_string()) throw ConfigError("key 'data.path' must be a string");
    const fs::path p = base_dir / data["path"].get<std::string>();
    auto d = load_dataset(p);
    if (d.header.vocab_size != exp.reference->vocab_size()) {
        throw ConfigError("key 'data.path': dataset vocab_size " + std::to_string(d.header.vocab_size) +
                          " does not match model.vocab_size " + std::to_string(exp.reference->vocab_size()));
    }
    return d;
}

}  // namespace

// ---------------------------------------------------------------------------
// shared plumbing

json load_resolved_config(const CliOptions& opts) {
    if (!opts.config) throw ConfigError("no config given (use --config <path>)");
    auto user = load_config_file(*opts.config);
    if (opts.seed) user["seed"] = *opts.seed;
    return resolve_config(user);
}

fs::path output_dir(const CliOptions& opts, std::string_view fallback_name) {
    if (opts.out) return *opts.out;
    const std::string stem = config_stem(opts, fallback_name);
    if (const char* env = std::getenv("PREFOPT_OUT_DIR"); env && *env) return fs::path(env) / stem;
    return fs::path("runs") / stem;
}

RunOutcome run_training(const json& resolved, const fs::path& dir, const fs::path& base_dir,
                        bool parallel_batches) {
    Experiment exp = build_experiment(resolved);
    bool loaded = false;
    const auto data = obtain_dataset(exp, base_dir, &loaded);
    json copy = exp.config;
    if (loaded) {
        save_dataset(data, dir / "dataset.jsonl");
        copy["data"]["path"] = "dataset.jsonl";
    }
    write_resolved(dir, copy);

    TrainConfig tc = build_train_config(exp.config);
    tc.parallel = tc.parallel && parallel_batches;
    const auto policy = initial_policy(exp);
    TrainResult result;
    try {
        result = train(*policy, *exp.reference, data, tc, exp.targets);
    } catch (const TrainingDiverged& e) {
        write_text_file(dir / "trajectory.csv", e.trajectory().to_csv());
        write_text_file(dir / "last_good.json", dump_json(policy_to_json(e.last_good())));
        throw;
    }
    write_text_file(dir / "trajectory.csv", result.trajectory.to_csv());
    write_text_file(dir / "checkpoint.json", dump_json(checkpoint_json(*result.policy, result.optimizer, tc)));
    RunOutcome outcome{result.trajectory.points.front(), result.trajectory.points.back()};
    json run{{"objective", std::string(objective_name(tc.loss.objective))},
             {"beta", tc.loss.beta},
             {"lr", tc.lr},
             {"seed", exp.seed},
             {"steps", outcome.final.step},
             {"initial", point_json(outcome.initial)},
             {"final", point_json(outcome.final)}};
    write_text_file(dir / "run.json", dump_json(run));
    return outcome;
}

// ---------------------------------------------------------------------------
// gen

int cmd_gen(const CliOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto resolved = load_resolved_config(opts);
        const auto exp = build_experiment(resolved);
        const auto data = generate_dataset(exp);
        const auto dir = output_dir(opts, "gen");
        save_dataset(data, dir / "dataset.jsonl");
        write_resolved(dir, exp.config);
        std::size_t first_won = 0;
        for (const auto& ex : data.examples) first_won += ex.first_won ? 1 : 0;
        if (!opts.quiet) {
            out << "wrote " << (dir / "dataset.jsonl").string() << "\n"
                << "examples " << data.size() << "  mean_overlap " << fixed(mean_overlap(data))
                << "  first_sampled_won " << fixed(static_cast<double>(first_won) / static_cast<double>(data.size()))
                << "\n";
        }
        return exit_code::ok;
    });
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const CliOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto resolved = load_resolved_config(opts);
        const auto dir = output_dir(opts, "train");
        const auto outcome = run_training(resolved, dir, config_dir(opts));
        if (!opts.quiet) out << "final  " << metrics_line(outcome.final) << "\n";
        return exit_code::ok;
    });
}

// ---------------------------------------------------------------------------
// sweep

namespace {

struct SweepRun {
    std::string objective;
    double beta = 0.0;
    double lr = 0.0;
    std::uint64_t seed = 0;
    json config;
    int code = exit_code::failure;
    std::string message;
    RunOutcome outcome;
};

std::vector<SweepRun> expand_sweep(const json& resolved) {
    const ConfigTable root(resolved, "");
    const auto sweep = root.table("sweep");
    const auto train = root.table("train");
    const auto objectives = sweep.has("objective") ? sweep.strings("objective")
                                                   : std::vector<std::string>{train.string("objective", "dpo")};
    const auto lrs = sweep.has("lr") ? sweep.numbers("lr") : std::vector<double>{build_train_config(resolved).lr};
    const auto default_betas =
        sweep.has("beta") ? sweep.numbers("beta") : std::vector<double>{build_train_config(resolved).loss.beta};
    std::vector<std::uint64_t> seeds;
    if (sweep.has("seed")) {
        const auto& raw = sweep.raw("seed");
        if (!raw.is_array()) throw ConfigError("key 'sweep.seed' must be an array of integers");
        for (const auto& s : raw) {
            if (!s.is_number_integer() || s.get<std::int64_t>() < 0) {
                throw ConfigError("key 'sweep.seed' must be an array of non-negative integers");
            }
            seeds.push_back(s.get<std::uint64_t>());
        }
    } else {
        seeds.push_back(root.seed("seed"));
    }
    const auto by_objective = sweep.table("beta_by_objective");

    std::vector<SweepRun> runs;
    for (const auto& obj : objectives) {
        try {
            parse_objective(obj);
        } catch (const InvalidInput& e) {
            throw ConfigError("key 'sweep.objective': " + std::string(e.what()));
        }
        const auto betas = by_objective.has(obj) ? by_objective.numbers(obj) : default_betas;
        for (double beta : betas) {
            for (double lr : lrs) {
                for (auto seed : seeds) {
                    SweepRun r{obj, beta, lr, seed, resolved, exit_code::failure, {}, {}};
                    r.config.erase("sweep");
                    r.config["seed"] = seed;
                    r.config["train"]["objective"] = obj;
                    r.config["train"]["beta"] = beta;
                    r.config["train"]["lr"] = lr;
                    runs.push_back(std::move(r));
                }
            }
        }
    }
    if (runs.empty()) throw ConfigError("section 'sweep' expands to zero runs");
    return runs;
}

std::string run_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "run-%03zu", i);
    return buf;
}

}  // namespace

int cmd_sweep(const CliOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto resolved = load_resolved_config(opts);
        validate_config(resolved);
        auto runs = expand_sweep(resolved);
        const auto dir = output_dir(opts, "sweep");
        write_resolved(dir, resolved);
        const auto base = config_dir(opts);
        const std::size_t jobs = std::max<std::size_t>(1, std::min(opts.jobs, runs.size()));

        std::atomic<std::size_t> next{0};
        auto worker = [&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= runs.size()) return;
                auto& r = runs[i];
                std::ostringstream msg;
                r.code = guarded(msg, [&] {
                    r.outcome = run_training(r.config, dir / run_name(i), base, jobs == 1);
                    return exit_code::ok;
                });
                r.message = msg.str();
            }
        };
        if (jobs == 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
            for (auto& t : pool) t.join();
        }

        std::string csv =
            "run,objective,beta,lr,seed,exit_code,loss,chosen_avg_logp,rejected_avg_logp,margin,reward_accuracy,"
            "reverse_kl\n";
        std::size_t succeeded = 0;
        for (std::size_t i = 0; i < runs.size(); ++i) {
            const auto& r = runs[i];
            csv += run_name(i) + "," + r.objective + "," + format_double(r.beta) + "," + format_double(r.lr) + "," +
                   std::to_string(r.seed) + "," + std::to_string(r.code);
            if (r.code == exit_code::ok) {
                ++succeeded;
                const auto& p = r.outcome.final;
                for (double v : {p.loss, p.chosen_avg_logp, p.rejected_avg_logp, p.margin, p.reward_accuracy}) {
                    csv += "," + format_double(v);
                }
                csv += "," + (p.reverse_kl ? format_double(*p.reverse_kl) : std::string());
            } else {
                csv += ",,,,,,";
                err << run_name(i) << " failed (exit " << r.code << "): " << r.message;
            }
            csv += "\n";
            if (!opts.quiet && r.code == exit_code::ok) {
                out << run_name(i) << "  " << r.objective << "  beta " << format_double(r.beta) << "  lr "
                    << format_double(r.lr) << "  seed " << r.seed << "  " << metrics_line(r.outcome.final) << "\n";
            }
        }
        write_text_file(dir / "summary.csv", csv);
        if (!opts.quiet) out << succeeded << "/" << runs.size() << " runs succeeded\n";
        return succeeded > 0 ? exit_code::ok : exit_code::sweep_failed;
    });
}

// ---------------------------------------------------------------------------
// gradcheck / micheck

int cmd_gradcheck(const CliOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        GradcheckOptions g;
        g.seed = opts.seed.value_or(0);
        g.instances = opts.instances;
        g.inject_sign_flip = opts.inject_sign_flip;
        const auto rows = run_gradcheck(g);
        if (!opts.quiet) out << "objective  backend       instances  max_rel_error  status\n";
        std::vector<std::string> failed;
        for (const auto& r : rows) {
            const std::string name = std::string(objective_name(r.objective));
            const std::string backend = std::string(backend_name(r.backend));
            if (!opts.quiet) {
                char line[160];
                std::snprintf(line, sizeof(line), "%-10s %-13s %9zu  %13s  %s\n", name.c_str(), backend.c_str(),
                              r.instances, sci(r.max_rel_error).c_str(), r.pass ? "ok" : "FAIL");
                out << line;
            }
            if (!r.pass) failed.push_back(name + "/" + backend);
        }
        if (failed.empty()) return exit_code::ok;
        err << "gradient check failed for:";
        for (const auto& f : failed) err << " " << f;
        err << " (tolerance " << sci(kGradcheckTolerance) << ")\n";
        return exit_code::check_failed;
    });
}

int cmd_micheck(const CliOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        const auto rows = run_micheck(opts.seed.value_or(0));
        if (!opts.quiet) out << "joint        exact_cmi   nwj         infonce     ceiling     gap         status\n";
        bool ok = true;
        for (const auto& r : rows) {
            if (!opts.quiet) {
                char line[200];
                std::snprintf(line, sizeof(line), "%-12s %-11s %-11s %-11s %-11s %-11s %s\n", r.joint.c_str(),
                              fixed(r.exact_cmi, 6).c_str(), fixed(r.nwj, 6).c_str(), fixed(r.infonce, 6).c_str(),
                              fixed(r.infonce_ceiling, 6).c_str(), fixed(r.gap, 6).c_str(), r.pass ? "ok" : "FAIL");
                out << line;
            }
            if (!r.pass) {
                ok = false;
                err << "MI check failed for joint " << r.joint << ": gap " << fixed(r.gap, 6) << ", max excess over CMI "
                    << sci(r.max_excess) << "\n";
            }
        }
        return ok ? exit_code::ok : exit_code::check_failed;
    });
}

// ---------------------------------------------------------------------------
// report

int cmd_report(const CliOptions& opts, std::ostream& out, std::ostream& err) {
    return guarded(err, [&] {
        if (opts.run_dirs.empty()) throw ConfigError("report needs at least one run directory");
        struct Source {
            std::string label;
            std::string run;
            TrainTrajectory traj;
        };
        std::vector<Source> sources;
        std::map<std::string, int> label_uses;
        for (const auto& d : opts.run_dirs) {
            const auto csv_path = d / "trajectory.csv";
            if (!fs::is_directory(d)) throw IoError("run directory " + d.string() + " does not exist");
            if (!fs::exists(csv_path)) throw IoError("run directory " + d.string() + " has no trajectory.csv");
            Source s;
            s.run = d.filename().empty() ? d.parent_path().filename().string() : d.filename().string();
            s.traj = TrainTrajectory::from_csv(read_text_file(csv_path), csv_path.string());
            if (s.traj.points.empty()) throw IoError("run directory " + d.string() + " has an empty trajectory");
            s.label = s.run;
            if (fs::exists(d / "run.json")) {
                try {
                    s.label = json::parse(read_text_file(d / "run.json")).at("objective").get<std::string>();
                } catch (const json::exception&) {
                    throw IoError(d.string() + "/run.json is malformed");
                }
            }
            const int uses = label_uses[s.label]++;
            if (uses > 0) s.label += "#" + std::to_string(uses + 1);
            sources.push_back(std::move(s));
        }

        std::set<std::size_t> steps;
        for (const auto& s : sources) {
            for (const auto& p : s.traj.points) steps.insert(p.step);
        }
        std::string csv = "objective,step,metric,value\n";
        for (auto step : steps) {
            for (const auto& s : sources) {
                const auto it = std::find_if(s.traj.points.begin(), s.traj.points.end(),
                                             [&](const TrajectoryPoint& p) { return p.step == step; });
                if (it == s.traj.points.end()) continue;
                const std::string prefix = s.label + "," + std::to_string(step) + ",";
                const std::pair<const char*, double> metrics[] = {{"loss", it->loss},
                                                                  {"chosen_avg_logp", it->chosen_avg_logp},
                                                                  {"rejected_avg_logp", it->rejected_avg_logp},
                                                                  {"margin", it->margin},
                                                                  {"reward_accuracy", it->reward_accuracy}};
                for (const auto& [name, v] : metrics) csv += prefix + name + "," + format_double(v) + "\n";
                if (it->reverse_kl) csv += prefix + "reverse_kl," + format_double(*it->reverse_kl) + "\n";
                csv += prefix + "clamp_count," + std::to_string(it->clamp_count) + "\n";
            }
        }

        json summary = json::array();
        for (const auto& s : sources) {
            const auto& a = s.traj.points.front();
            const auto& b = s.traj.points.back();
            summary.push_back({{"objective", s.label},
                               {"run", s.run},
                               {"initial_chosen_avg_logp", a.chosen_avg_logp},
                               {"final_chosen_avg_logp", b.chosen_avg_logp},
                               {"chosen_avg_logp_delta", b.chosen_avg_logp - a.chosen_avg_logp},
                               {"initial_margin", a.margin},
                               {"final_margin", b.margin},
                               {"margin_delta", b.margin - a.margin}});
        }
        const auto dir = output_dir(opts, "report");
        write_text_file(dir / "dynamics_long.csv", csv);
        write_text_file(dir / "summary.json", dump_json(json{{"runs", summary}}));
        if (!opts.quiet) {
            for (const auto& s : summary) {
                out << s["objective"].get<std::string>() << "  chosen "
                    << fixed(s["initial_chosen_avg_logp"].get<double>()) << " -> "
                    << fixed(s["final_chosen_avg_logp"].get<double>()) << "  margin delta "
                    << fixed(s["margin_delta"].get<double>()) << "\n";
            }
            out << "wrote " << (dir / "dynamics_long.csv").string() << "\n";
        }
        return exit_code::ok;
    });
}

}  // namespace prefopt

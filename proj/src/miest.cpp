#include "prefopt/miest.hpp"

#include <cmath>
#include <sstream>

#include "prefopt/errors.hpp"
#include "prefopt/format.hpp"
#include "prefopt/numeric.hpp"

namespace prefopt {

namespace {

constexpr double kTol = 1e-12;

struct Marginals {
    std::vector<double> py;
    std::array<double, 2> pc{0.0, 0.0};
};

Marginals marginals(const JointSlice& s) {
    Marginals m;
    m.py.resize(s.table.size());
    for (std::size_t y = 0; y < s.table.size(); ++y) {
        m.py[y] = s.table[y][0] + s.table[y][1];
        m.pc[0] += s.table[y][0];
        m.pc[1] += s.table[y][1];
    }
    return m;
}

void check_critic(const DiscreteJoint& joint, const TabularCritic& critic) {
    if (critic.f.size() != joint.x.size()) throw InvalidInput("critic has a different x support than the joint");
    for (std::size_t i = 0; i < joint.x.size(); ++i) {
        if (critic.f[i].size() != joint.x[i].table.size()) {
            throw InvalidInput("critic table for x=" + std::to_string(i) + " has the wrong number of y states");
        }
        for (const auto& row : critic.f[i]) {
            if (!std::isfinite(row[0]) || !std::isfinite(row[1])) throw InvalidInput("critic entries must be finite");
        }
    }
}

// Sums per-x terms in index order after computing them in parallel.
template <typename PerX>
double sum_over_x(const DiscreteJoint& joint, PerX per_x) {
    const std::size_t n = joint.x.size();
    std::vector<double> parts(n, 0.0);
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) parts[i] = joint.x[i].p * per_x(i);
    double total = 0.0;
    for (double v : parts) total += v;
    return total;
}

double log_binomial(std::size_t n, std::size_t k) {
    return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
           std::lgamma(static_cast<double>(n - k) + 1.0);
}

// Visits every (y, c1, m) term of the exact InfoNCE expectation for slice i:
// visit(y, c1, ones, zeros, weight) with weight = P(y,c1|x) * Binomial(ones).
template <typename Visit>
void for_each_infonce_term(const JointSlice& s, std::size_t batch, Visit visit) {
    const auto m = marginals(s);
    const std::size_t negatives = batch - 1;
    const double pc1 = m.pc[1];
    for (std::size_t y = 0; y < s.table.size(); ++y) {
        for (int c1 = 0; c1 < 2; ++c1) {
            const double pyc = s.table[y][static_cast<std::size_t>(c1)];
            if (pyc <= 0.0) continue;
            for (std::size_t ones = 0; ones <= negatives; ++ones) {
                double log_w;
                if (pc1 <= 0.0) {
                    if (ones != 0) continue;
                    log_w = 0.0;
                } else if (pc1 >= 1.0) {
                    if (ones != negatives) continue;
                    log_w = 0.0;
                } else {
                    log_w = log_binomial(negatives, ones) + static_cast<double>(ones) * std::log(pc1) +
                            static_cast<double>(negatives - ones) * std::log1p(-pc1);
                }
                const double w = pyc * std::exp(log_w);
                if (w == 0.0) continue;
                visit(y, c1, ones, negatives - ones, w);
            }
        }
    }
}

double infonce_log_denominator(const std::array<double, 2>& fy, int c1, std::size_t ones, std::size_t zeros) {
    std::array<double, 3> terms{fy[static_cast<std::size_t>(c1)], kNegInf, kNegInf};
    if (ones > 0) terms[1] = std::log(static_cast<double>(ones)) + fy[1];
    if (zeros > 0) terms[2] = std::log(static_cast<double>(zeros)) + fy[0];
    return logsumexp(terms);
}

}  // namespace

// ---------------------------------------------------------------------------
// joints and critics

void DiscreteJoint::validate() const {
    if (x.empty()) throw InvalidInput("joint has an empty x support");
    double px = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto& s = x[i];
        if (!(s.p >= 0.0) || !std::isfinite(s.p)) throw InvalidInput("p(x) must be nonnegative and finite");
        px += s.p;
        if (s.table.empty()) throw InvalidInput("joint table for x=" + std::to_string(i) + " is empty");
        double total = 0.0;
        for (const auto& row : s.table) {
            for (double v : row) {
                if (!(v >= 0.0) || !std::isfinite(v)) {
                    throw InvalidInput("joint table for x=" + std::to_string(i) + " has a negative or non-finite entry");
                }
                total += v;
            }
        }
        if (std::abs(total - 1.0) > kTol) {
            throw InvalidInput("joint table for x=" + std::to_string(i) + " sums to " + format_double(total));
        }
    }
    if (std::abs(px - 1.0) > kTol) throw InvalidInput("p(x) sums to " + format_double(px));
}

nlohmann::json DiscreteJoint::to_json() const {
    nlohmann::json xs = nlohmann::json::array();
    for (const auto& s : x) {
        nlohmann::json table = nlohmann::json::array();
        for (const auto& row : s.table) table.push_back({row[0], row[1]});
        xs.push_back({{"p", s.p}, {"table", std::move(table)}});
    }
    return {{"x", std::move(xs)}};
}

DiscreteJoint DiscreteJoint::from_json(const nlohmann::json& doc) {
    DiscreteJoint j;
    try {
        for (const auto& entry : doc.at("x")) {
            JointSlice s;
            s.p = entry.at("p").get<double>();
            for (const auto& row : entry.at("table")) {
                if (row.size() != 2) throw InvalidInput("joint table rows must have two columns (c = 0, 1)");
                s.table.push_back({row[0].get<double>(), row[1].get<double>()});
            }
            j.x.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw InvalidInput(std::string("malformed joint document: ") + e.what());
    }
    j.validate();
    return j;
}

DiscreteJoint DiscreteJoint::independent(std::size_t ny, double pc1) {
    JointSlice s;
    s.p = 1.0;
    for (std::size_t y = 0; y < ny; ++y) {
        const double py = 1.0 / static_cast<double>(ny);
        s.table.push_back({py * (1.0 - pc1), py * pc1});
    }
    return DiscreteJoint{{std::move(s)}};
}

DiscreteJoint DiscreteJoint::copy_binary() {
    JointSlice s;
    s.p = 1.0;
    s.table = {{0.5, 0.0}, {0.0, 0.5}};
    return DiscreteJoint{{std::move(s)}};
}

DiscreteJoint DiscreteJoint::random(Rng& rng, std::size_t nx, std::size_t ny) {
    DiscreteJoint j;
    double px_total = 0.0;
    for (std::size_t i = 0; i < nx; ++i) {
        JointSlice s;
        s.p = 0.1 + rng.uniform();
        px_total += s.p;
        double total = 0.0;
        for (std::size_t y = 0; y < ny; ++y) {
            std::array<double, 2> row{0.05 + rng.uniform(), 0.05 + rng.uniform()};
            total += row[0] + row[1];
            s.table.push_back(row);
        }
        for (auto& row : s.table) {
            row[0] /= total;
            row[1] /= total;
        }
        j.x.push_back(std::move(s));
    }
    for (auto& s : j.x) s.p /= px_total;
    return j;
}

TabularCritic TabularCritic::zeros(const DiscreteJoint& joint) {
    TabularCritic c;
    for (const auto& s : joint.x) c.f.emplace_back(s.table.size(), std::array<double, 2>{0.0, 0.0});
    return c;
}

TabularCritic TabularCritic::random(const DiscreteJoint& joint, Rng& rng, double scale) {
    TabularCritic c = zeros(joint);
    for (auto& table : c.f) {
        for (auto& row : table) {
            row[0] = scale * rng.normal();
            row[1] = scale * rng.normal();
        }
    }
    return c;
}

TabularCritic TabularCritic::optimal(const DiscreteJoint& joint) {
    TabularCritic c = zeros(joint);
    for (std::size_t i = 0; i < joint.x.size(); ++i) {
        const auto& s = joint.x[i];
        const auto m = marginals(s);
        for (std::size_t y = 0; y < s.table.size(); ++y) {
            for (std::size_t k = 0; k < 2; ++k) {
                const double pyc = s.table[y][k];
                const double q = m.py[y] * m.pc[k];
                c.f[i][y][k] = (pyc > 0.0 && q > 0.0) ? std::max(kLogFloor, std::log(pyc / q)) : kLogFloor;
            }
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// exact quantities

double exact_cmi(const DiscreteJoint& joint) {
    joint.validate();
    return sum_over_x(joint, [&](std::size_t i) {
        const auto& s = joint.x[i];
        const auto m = marginals(s);
        double kl = 0.0;
        for (std::size_t y = 0; y < s.table.size(); ++y) {
            for (std::size_t k = 0; k < 2; ++k) {
                const double pyc = s.table[y][k];
                if (pyc <= 0.0) continue;
                kl += pyc * std::log(pyc / (m.py[y] * m.pc[k]));
            }
        }
        return kl;
    });
}

double nwj_exact(const DiscreteJoint& joint, const TabularCritic& critic) {
    joint.validate();
    check_critic(joint, critic);
    return sum_over_x(joint, [&](std::size_t i) {
        const auto& s = joint.x[i];
        const auto m = marginals(s);
        double pos = 0.0;
        double neg = 0.0;
        for (std::size_t y = 0; y < s.table.size(); ++y) {
            for (std::size_t k = 0; k < 2; ++k) {
                const double f = critic.f[i][y][k];
                if (s.table[y][k] > 0.0) pos += s.table[y][k] * f;
                neg += m.py[y] * m.pc[k] * std::exp(f);
            }
        }
        return pos - neg + 1.0;
    });
}

double infonce_exact(const DiscreteJoint& joint, const TabularCritic& critic, std::size_t batch) {
    if (batch < 2) throw InvalidInput("InfoNCE batch must be at least 2");
    joint.validate();
    check_critic(joint, critic);
    const double log_batch = std::log(static_cast<double>(batch));
    return sum_over_x(joint, [&](std::size_t i) {
        const auto& fx = critic.f[i];
        double acc = 0.0;
        for_each_infonce_term(joint.x[i], batch,
                              [&](std::size_t y, int c1, std::size_t ones, std::size_t zeros, double w) {
                                  const double log_d = infonce_log_denominator(fx[y], c1, ones, zeros);
                                  acc += w * (log_batch + fx[y][static_cast<std::size_t>(c1)] - log_d);
                              });
        return acc;
    });
}

// ---------------------------------------------------------------------------
// Monte Carlo

namespace {

struct SliceSampler {
    std::vector<double> px;
    std::vector<std::vector<double>> flat;  // P(y, c | x) flattened as 2y + c
    std::vector<Marginals> marg;

    explicit SliceSampler(const DiscreteJoint& joint) {
        for (const auto& s : joint.x) {
            px.push_back(s.p);
            std::vector<double> f;
            for (const auto& row : s.table) {
                f.push_back(row[0]);
                f.push_back(row[1]);
            }
            flat.push_back(std::move(f));
            marg.push_back(marginals(s));
        }
    }
};

struct Moments {
    double sum = 0.0;
    double sum_sq = 0.0;
    std::size_t n = 0;

    void add(double v) {
        sum += v;
        sum_sq += v * v;
        ++n;
    }
    double mean() const { return sum / static_cast<double>(n); }
    double variance() const {
        if (n < 2) return 0.0;
        const double mu = mean();
        return std::max(0.0, (sum_sq - static_cast<double>(n) * mu * mu) / static_cast<double>(n - 1));
    }
};

}  // namespace

EstimateResult nwj_estimate(const DiscreteJoint& joint, const TabularCritic& critic, std::size_t n_pos,
                            std::size_t n_neg, std::uint64_t seed) {
    if (n_pos == 0 || n_neg == 0) throw InvalidInput("nwj_estimate needs positive sample counts");
    EstimateResult out;
    out.exact = nwj_exact(joint, critic);
    const SliceSampler sampler(joint);
    Rng rng(seed);
    Moments pos, neg;
    for (std::size_t k = 0; k < n_pos; ++k) {
        const std::size_t i = rng.categorical(sampler.px);
        const std::size_t cell = rng.categorical(sampler.flat[i]);
        pos.add(critic.f[i][cell / 2][cell % 2]);
    }
    for (std::size_t k = 0; k < n_neg; ++k) {
        const std::size_t i = rng.categorical(sampler.px);
        const std::size_t y = rng.categorical(sampler.marg[i].py);
        const std::size_t c = rng.categorical(sampler.marg[i].pc);
        neg.add(std::exp(critic.f[i][y][c]));
    }
    out.estimate = pos.mean() - neg.mean() + 1.0;
    out.std_error = std::sqrt(pos.variance() / static_cast<double>(pos.n) + neg.variance() / static_cast<double>(neg.n));
    return out;
}

InfoNceResult infonce_estimate(const DiscreteJoint& joint, const TabularCritic& critic, std::size_t batch,
                               std::size_t n_anchors, std::uint64_t seed) {
    if (batch < 2) throw InvalidInput("InfoNCE batch must be at least 2");
    if (n_anchors == 0) throw InvalidInput("infonce_estimate needs a positive anchor count");
    InfoNceResult out;
    out.exact = infonce_exact(joint, critic, batch);
    out.ceiling = std::log(static_cast<double>(batch));
    const SliceSampler sampler(joint);
    Rng rng(seed);
    Moments m;
    for (std::size_t a = 0; a < n_anchors; ++a) {
        const std::size_t i = rng.categorical(sampler.px);
        const std::size_t cell = rng.categorical(sampler.flat[i]);
        const std::size_t y = cell / 2;
        const int c1 = static_cast<int>(cell % 2);
        std::size_t ones = 0;
        for (std::size_t j = 1; j < batch; ++j) ones += rng.uniform() < sampler.marg[i].pc[1] ? 1 : 0;
        const auto& fy = critic.f[i][y];
        const double log_d = infonce_log_denominator(fy, c1, ones, batch - 1 - ones);
        m.add(out.ceiling + fy[static_cast<std::size_t>(c1)] - log_d);
    }
    out.estimate = m.mean();
    out.std_error = std::sqrt(m.variance() / static_cast<double>(m.n));
    return out;
}

// ---------------------------------------------------------------------------
// critic training

namespace {

using CriticGrad = std::vector<std::vector<std::array<double, 2>>>;

CriticGrad nwj_gradient(const DiscreteJoint& joint, const TabularCritic& critic) {
    CriticGrad g = TabularCritic::zeros(joint).f;
    for (std::size_t i = 0; i < joint.x.size(); ++i) {
        const auto& s = joint.x[i];
        const auto m = marginals(s);
        for (std::size_t y = 0; y < s.table.size(); ++y) {
            for (std::size_t k = 0; k < 2; ++k) {
                g[i][y][k] = s.p * (s.table[y][k] - m.py[y] * m.pc[k] * std::exp(critic.f[i][y][k]));
            }
        }
    }
    return g;
}

CriticGrad infonce_gradient(const DiscreteJoint& joint, const TabularCritic& critic, std::size_t batch) {
    CriticGrad g = TabularCritic::zeros(joint).f;
    for (std::size_t i = 0; i < joint.x.size(); ++i) {
        const auto& fx = critic.f[i];
        const double px = joint.x[i].p;
        for_each_infonce_term(joint.x[i], batch,
                              [&](std::size_t y, int c1, std::size_t ones, std::size_t zeros, double w) {
                                  const double log_d = infonce_log_denominator(fx[y], c1, ones, zeros);
                                  const auto c = static_cast<std::size_t>(c1);
                                  const double wx = px * w;
                                  g[i][y][c] += wx * (1.0 - std::exp(fx[y][c] - log_d));
                                  if (ones > 0) {
                                      g[i][y][1] -= wx * std::exp(std::log(static_cast<double>(ones)) + fx[y][1] - log_d);
                                  }
                                  if (zeros > 0) {
                                      g[i][y][0] -= wx * std::exp(std::log(static_cast<double>(zeros)) + fx[y][0] - log_d);
                                  }
                              });
    }
    return g;
}

}  // namespace

TrainCriticResult train_critic(const DiscreteJoint& joint, Bound bound, const TrainCriticOptions& opts) {
    joint.validate();
    if (!(opts.lr > 0.0)) throw InvalidInput("critic learning rate must be positive");
    if (bound == Bound::infonce && opts.infonce_batch < 2) throw InvalidInput("InfoNCE batch must be at least 2");
    Rng rng(opts.seed);
    TrainCriticResult out;
    out.critic = TabularCritic::random(joint, rng, opts.init_scale);

    auto value = [&](const TabularCritic& c) {
        return bound == Bound::nwj ? nwj_exact(joint, c) : infonce_exact(joint, c, opts.infonce_batch);
    };
    for (std::size_t step = 0; step <= opts.steps; ++step) {
        const double b = value(out.critic);
        if (!std::isfinite(b)) {
            throw NumericError("critic training diverged at step " + std::to_string(step) + " (bound is not finite)");
        }
        const CriticGrad g = bound == Bound::nwj ? nwj_gradient(joint, out.critic)
                                                 : infonce_gradient(joint, out.critic, opts.infonce_batch);
        double norm_sq = 0.0;
        for (const auto& table : g) {
            for (const auto& row : table) norm_sq += row[0] * row[0] + row[1] * row[1];
        }
        out.trace.push_back({step, b, std::sqrt(norm_sq)});
        if (step == opts.steps) break;
        for (std::size_t i = 0; i < g.size(); ++i) {
            for (std::size_t y = 0; y < g[i].size(); ++y) {
                out.critic.f[i][y][0] += opts.lr * g[i][y][0];
                out.critic.f[i][y][1] += opts.lr * g[i][y][1];
            }
        }
    }
    return out;
}

std::string critic_trace_csv(const std::vector<CriticTracePoint>& trace) {
    std::string out = "step,bound,grad_norm\n";
    for (const auto& t : trace) {
        out += std::to_string(t.step) + "," + format_double(t.bound) + "," + format_double(t.grad_norm) + "\n";
    }
    return out;
}

}  // namespace prefopt

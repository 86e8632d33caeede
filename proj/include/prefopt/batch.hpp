#pragma once

#include <span>
#include <vector>

#include "prefopt/losses.hpp"

namespace prefopt {

struct BatchResult {
    double loss_sum = 0.0;
    std::vector<double> grad_sum;
    std::size_t clamp_count = 0;
    std::size_t count = 0;
};

/// Reference implementation: one example at a time, accumulating in index order.
BatchResult batch_loss_serial(const LossSpec& spec, const Policy& policy, std::span<const RefTerms> ref,
                              std::span<const PreferenceExample> data, std::span<const std::size_t> indices);

/// Per-example losses and gradients in parallel, reduced serially in index
/// order. Bit-identical to batch_loss_serial for any thread count.
BatchResult batch_loss_omp(const LossSpec& spec, const Policy& policy, std::span<const RefTerms> ref,
                           std::span<const PreferenceExample> data, std::span<const std::size_t> indices);

std::vector<RefTerms> compute_ref_terms(const Policy& ref_policy, std::span<const PreferenceExample> data);

/// Per-example likelihood statistics used by trajectory metrics.
struct ExampleStats {
    double loss = 0.0;
    double chosen_logp = 0.0;
    double rejected_logp = 0.0;
    double chosen_avg_logp = 0.0;
    double rejected_avg_logp = 0.0;
    bool clamped = false;
};

std::vector<ExampleStats> example_stats(const LossSpec& spec, const Policy& policy, std::span<const RefTerms> ref,
                                        std::span<const PreferenceExample> data);

}  // namespace prefopt

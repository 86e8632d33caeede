#include "prefopt/batch.hpp"

#include <exception>

#include "prefopt/errors.hpp"

namespace prefopt {

namespace {

void check_shapes(std::span<const RefTerms> ref, std::span<const PreferenceExample> data,
                  std::span<const std::size_t> indices) {
    if (ref.size() != data.size()) throw InvalidInput("reference terms and dataset differ in length");
    for (auto i : indices) {
        if (i >= data.size()) throw InvalidInput("batch index out of range");
    }
}

// Lowest index wins so the reported failure does not depend on scheduling.
void rethrow_first(const std::vector<std::exception_ptr>& errors) {
    for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void accumulate(BatchResult& acc, const LossOutput& out) {
    acc.loss_sum += out.value;
    for (std::size_t k = 0; k < out.grad.size(); ++k) acc.grad_sum[k] += out.grad[k];
    acc.clamp_count += out.clamped ? 1 : 0;
    acc.count += 1;
}

}  // namespace

BatchResult batch_loss_serial(const LossSpec& spec, const Policy& policy, std::span<const RefTerms> ref,
                              std::span<const PreferenceExample> data, std::span<const std::size_t> indices) {
    check_shapes(ref, data, indices);
    BatchResult acc;
    acc.grad_sum.assign(policy.param_count(), 0.0);
    for (auto i : indices) accumulate(acc, evaluate_loss(spec, policy, ref[i], data[i]));
    return acc;
}

BatchResult batch_loss_omp(const LossSpec& spec, const Policy& policy, std::span<const RefTerms> ref,
                           std::span<const PreferenceExample> data, std::span<const std::size_t> indices) {
    check_shapes(ref, data, indices);
    const std::size_t n = indices.size();
    std::vector<LossOutput> outs(n);
    std::vector<std::exception_ptr> errors(n);
#pragma omp parallel for schedule(static)
    for (std::size_t b = 0; b < n; ++b) {
        try {
            outs[b] = evaluate_loss(spec, policy, ref[indices[b]], data[indices[b]]);
        } catch (...) {
            errors[b] = std::current_exception();
        }
    }
    rethrow_first(errors);
    BatchResult acc;
    acc.grad_sum.assign(policy.param_count(), 0.0);
    for (const auto& out : outs) accumulate(acc, out);
    return acc;
}

std::vector<RefTerms> compute_ref_terms(const Policy& ref_policy, std::span<const PreferenceExample> data) {
    std::vector<RefTerms> out(data.size());
    std::vector<std::exception_ptr> errors(data.size());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < data.size(); ++i) {
        try {
            out[i] = ref_terms(ref_policy, data[i]);
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    rethrow_first(errors);
    return out;
}

std::vector<ExampleStats> example_stats(const LossSpec& spec, const Policy& policy, std::span<const RefTerms> ref,
                                        std::span<const PreferenceExample> data) {
    if (ref.size() != data.size()) throw InvalidInput("reference terms and dataset differ in length");
    std::vector<ExampleStats> out(data.size());
    std::vector<std::exception_ptr> errors(data.size());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < data.size(); ++i) {
        try {
            const auto& ex = data[i];
            ExampleStats s;
            s.chosen_logp = seq_logprob(policy, ex.prompt, ex.chosen);
            s.rejected_logp = seq_logprob(policy, ex.prompt, ex.rejected);
            s.chosen_avg_logp = s.chosen_logp / static_cast<double>(ex.chosen.size());
            s.rejected_avg_logp = s.rejected_logp / static_cast<double>(ex.rejected.size());
            s.loss = loss_value(spec, policy, ref[i], ex, &s.clamped);
            out[i] = s;
        } catch (...) {
            errors[i] = std::current_exception();
        }
    }
    rethrow_first(errors);
    return out;
}

}  // namespace prefopt

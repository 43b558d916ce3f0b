#pragma once

// Finite-difference verification of tape gradients. The builder callback
// reconstructs the graph from scratch on every invocation, so the check
// exercises exactly the same code path training uses.

#include <cstdint>
#include <functional>
#include <vector>

#include "rng.hpp"
#include "tape.hpp"
#include "tensor.hpp"

namespace forgetlab {

// Builds the scalar loss from leaves already placed on the tape, in the same
// order as the input vector.
using LossBuilder = std::function<Tape::Var(Tape&, const std::vector<Tape::Var>&)>;

namespace detail {

inline double eval_loss(const std::vector<Tensor>& inputs, const LossBuilder& build) {
    Tape tape;
    std::vector<Tape::Var> vars;
    vars.reserve(inputs.size());
    for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
    Tape::Var loss = build(tape, vars);
    const Tensor& out = tape.value(loss);
    if (!out.is_scalar())
        throw ShapeError("grad_check: loss must be scalar, got shape " + shape_str(out.shape));
    return out.values[0];
}

} // namespace detail

// Central differences at every requires-grad coordinate (or a deterministic
// sample of `max_coords` per input when the tensor is larger). Returns the
// worst relative error |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
inline double max_rel_grad_err(std::vector<Tensor> inputs, const LossBuilder& build,
                               double eps = 1e-6, std::size_t max_coords = 0,
                               std::uint64_t sample_seed = 7) {
    // Analytic pass.
    std::vector<std::vector<double>> analytic(inputs.size());
    {
        Tape tape;
        std::vector<Tape::Var> vars;
        vars.reserve(inputs.size());
        for (const Tensor& t : inputs) vars.push_back(tape.leaf(t));
        Tape::Var loss = build(tape, vars);
        tape.backward(loss);
        for (std::size_t i = 0; i < inputs.size(); ++i)
            if (inputs[i].requires_grad) analytic[i] = tape.grad(vars[i]);
    }

    double worst = 0.0;
    KeyedRng pick(sample_seed, "grad_check");
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (!inputs[i].requires_grad) continue;
        std::vector<std::size_t> coords;
        std::size_t n = inputs[i].size();
        if (max_coords == 0 || n <= max_coords) {
            coords.resize(n);
            for (std::size_t c = 0; c < n; ++c) coords[c] = c;
        } else {
            for (std::size_t c = 0; c < max_coords; ++c)
                coords.push_back(static_cast<std::size_t>(pick.below(n)));
        }
        for (std::size_t c : coords) {
            double saved = inputs[i].values[c];
            inputs[i].values[c] = saved + eps;
            double fp = detail::eval_loss(inputs, build);
            inputs[i].values[c] = saved - eps;
            double fm = detail::eval_loss(inputs, build);
            inputs[i].values[c] = saved;
            double numeric = (fp - fm) / (2.0 * eps);
            double a = analytic[i][c];
            double rel = std::abs(a - numeric) / std::max(1e-12, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

} // namespace forgetlab

#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ppcd/tape.hpp"

namespace ppcd {

struct GradCheckBlock {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_diff = 0.0;
    int64_t count = 0;
};

struct GradCheckReport {
    std::vector<GradCheckBlock> blocks;
    double max_rel_err = 0.0;

    bool within(double tol) const { return max_rel_err <= tol; }
};

// Central-difference check in double precision. `build` maps a tape and the
// leaf vars (same order as `leaves`) to a scalar loss; it must be pure so the
// numeric and analytic passes see the same function.
template <typename Build>
GradCheckReport grad_check(const std::vector<std::pair<std::string, TensorD>>& leaves,
                           Build build, double h = 1e-5) {
    std::vector<TensorD> analytic;
    {
        TapeD tape;
        std::vector<VarD> vars;
        vars.reserve(leaves.size());
        for (const auto& [name, v] : leaves) vars.push_back(tape.leaf(v, true));
        VarD loss = build(tape, vars);
        tape.backward(loss);
        for (const VarD& v : vars) analytic.push_back(tape.grad_of(v));
    }

    auto eval_at = [&](const std::vector<TensorD>& vals) {
        TapeD tape;
        std::vector<VarD> vars;
        vars.reserve(vals.size());
        for (const TensorD& v : vals) vars.push_back(tape.leaf(v, false));
        return build(tape, vars).value().item();
    };

    std::vector<TensorD> vals;
    vals.reserve(leaves.size());
    for (const auto& [name, v] : leaves) vals.push_back(v);

    GradCheckReport report;
    for (size_t li = 0; li < leaves.size(); ++li) {
        GradCheckBlock block;
        block.name = leaves[li].first;
        block.count = vals[li].size();
        for (int64_t i = 0; i < vals[li].size(); ++i) {
            double keep = vals[li][i];
            vals[li][i] = keep + h;
            double fp = eval_at(vals);
            vals[li][i] = keep - h;
            double fm = eval_at(vals);
            vals[li][i] = keep;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[li][i];
            double diff = std::abs(a - numeric);
            double rel = diff / std::max({1e-6, std::abs(a), std::abs(numeric)});
            block.max_abs_diff = std::max(block.max_abs_diff, diff);
            block.max_rel_err = std::max(block.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, block.max_rel_err);
        report.blocks.push_back(std::move(block));
    }
    return report;
}

}  // namespace ppcd

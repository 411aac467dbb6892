#pragma once

// Finite-difference verification suite: every differentiable op on small
// random instances, the composed message-passing module, and the end-to-end
// micro network loss. Each check reports its worst relative error across a
// set of seeds. Backs both the gradcheck command and the acceptance gate.

#include <cstdint>
#include <string>
#include <vector>

namespace dmpnet {

struct GradSuiteEntry {
    std::string name;
    double max_rel_err = 0;
    bool passed = false;
    std::string worst;  // location of the largest deviation, for diagnostics
};

// scope: "ops", "dmp", "end-to-end", or "all"; also accepts a single op name
// from the ops list to run just that row.
std::vector<GradSuiteEntry> run_grad_suite(const std::string& scope, std::uint64_t seed,
                                           int seeds_per_check, double tolerance);

}  // namespace dmpnet

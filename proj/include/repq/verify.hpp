#pragma once

#include <string>
#include <vector>

namespace repq {

struct CheckResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct VerifyOptions {
    std::string sabotage;  // empty, or one of: bnfold, merge, bnest, quant
    int conv_instances = 200;
    int bn_instances = 100;
    int quant_samples = 100000;
    std::vector<int64_t> edge_sizes = {8, 16, 32, 64};
    int edge_seeds = 21;
};

// Runs the library-level invariant suites: conv oracle equivalence, BN-fold
// identity, merged equivalence + gradient agreement, BN-statistics
// estimation exactness and trend, quantizer properties, MinError optimality,
// bit-width growth and the estimation complexity bound.
std::vector<CheckResult> run_invariant_checks(const VerifyOptions& opts);

}  // namespace repq

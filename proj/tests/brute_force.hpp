#pragma once

#include <functional>
#include <limits>
#include <vector>

#include "setpose/matching.hpp"

namespace setpose::testkit {

/// Minimum total cost over every injection of targets into predictions,
/// by exhaustive recursion.
inline double brute_force_min(const CostMatrix& c) {
    double best = std::numeric_limits<double>::infinity();
    std::vector<char> used(c.rows, 0);
    std::function<void(int, double)> rec = [&](int t, double acc) {
        if (t == c.cols) {
            best = std::min(best, acc);
            return;
        }
        for (int p = 0; p < c.rows; ++p) {
            if (used[p]) continue;
            used[p] = 1;
            rec(t + 1, acc + c(p, t));
            used[p] = 0;
        }
    };
    rec(0, 0.0);
    return best;
}

}  // namespace setpose::testkit

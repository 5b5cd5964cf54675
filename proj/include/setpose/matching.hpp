#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "setpose/errors.hpp"
#include "setpose/geometry.hpp"

namespace setpose {

/// One groundtruth element of a set. `class_id == num_classes` marks the
/// no-object class, which carries no geometry.
struct TargetTuple {
    int class_id = 0;
    Box box;
    TranslationCode translation;
    KeypointSet2D keypoints;  // normalized to image size
    Pose pose;
    int model_id = -1;  // index into the model table of the dataset
};

struct PredictionTuple {
    std::vector<double> class_logits;  // C + 1 entries, last is no-object
    Box box;
    TranslationCode translation;
    KeypointSet2D keypoints;
};

inline std::vector<double> softmax(const std::vector<double>& logits) {
    double mx = -std::numeric_limits<double>::infinity();
    for (double v : logits) mx = std::max(mx, v);
    std::vector<double> p(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) sum += p[i] = std::exp(logits[i] - mx);
    for (auto& v : p) v /= sum;
    return p;
}

struct MatchWeights {
    double box_l1 = 5.0;
    double box_giou = 2.0;
};

inline bool is_null(const TargetTuple& t, int num_classes) { return t.class_id >= num_classes; }

/// Class probability (not log-probability) plus the weighted box terms.
inline double matching_cost(const PredictionTuple& pred, const TargetTuple& target,
                            const MatchWeights& w = {}) {
    const int num_classes = static_cast<int>(pred.class_logits.size()) - 1;
    if (target.class_id < 0 || is_null(target, num_classes))
        throw InvalidArgument("matching cost against the no-object class");
    const double p = softmax(pred.class_logits)[target.class_id];
    return -p + w.box_l1 * pred.box.l1(target.box) + w.box_giou * (1.0 - giou(pred.box, target.box));
}

/// Row-major n_pred x n_target matrix.
struct CostMatrix {
    int rows = 0;  // predictions
    int cols = 0;  // targets
    std::vector<double> data;

    CostMatrix() = default;
    CostMatrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(std::size_t(r) * c, fill) {}
    double& operator()(int r, int c) { return data[std::size_t(r) * cols + c]; }
    double operator()(int r, int c) const { return data[std::size_t(r) * cols + c]; }
};

struct Assignment {
    std::vector<int> target_to_pred;   // one prediction index per target
    std::vector<int> unmatched_preds;  // ascending
    double total_cost = 0.0;
};

/// Kuhn-Munkres with row/column potentials (O(n_target^2 * n_pred)).
/// Targets are the rows of the internal problem so rectangular inputs need
/// no padding. Strict comparisons during the scan make ties resolve to the
/// lowest prediction index.
inline Assignment hungarian(const CostMatrix& costs) {
    const int n = costs.cols;  // targets
    const int m = costs.rows;  // predictions
    if (m < n) throw InvalidArgument("hungarian: fewer predictions than targets");
    for (double v : costs.data)
        if (!std::isfinite(v)) throw InvalidArgument("hungarian: non-finite cost");

    constexpr double inf = std::numeric_limits<double>::infinity();
    // 1-based arrays; index 0 is the virtual column/row.
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> owner(m + 1, 0), way(m + 1, 0);
    for (int i = 1; i <= n; ++i) {
        owner[0] = i;
        int j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<char> used(m + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = owner[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = costs(j - 1, i0 - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (owner[j0] != 0);
        do {
            const int j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
        } while (j0 != 0);
    }

    Assignment out;
    out.target_to_pred.assign(n, -1);
    for (int j = 1; j <= m; ++j) {
        if (owner[j] != 0) {
            out.target_to_pred[owner[j] - 1] = j - 1;
        } else {
            out.unmatched_preds.push_back(j - 1);
        }
    }
    for (int t = 0; t < n; ++t) out.total_cost += costs(out.target_to_pred[t], t);
    return out;
}

/// Matches the non-null targets to predictions. The returned
/// `target_to_pred` is indexed by position in `targets`; null targets map
/// to -1.
inline Assignment match_sets(const std::vector<PredictionTuple>& preds,
                             const std::vector<TargetTuple>& targets, const MatchWeights& w = {}) {
    std::vector<int> real;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        const int num_classes =
            preds.empty() ? std::numeric_limits<int>::max()
                          : static_cast<int>(preds.front().class_logits.size()) - 1;
        if (!is_null(targets[t], num_classes)) real.push_back(static_cast<int>(t));
    }
    CostMatrix costs(static_cast<int>(preds.size()), static_cast<int>(real.size()));
    for (std::size_t p = 0; p < preds.size(); ++p)
        for (std::size_t c = 0; c < real.size(); ++c)
            costs(int(p), int(c)) = matching_cost(preds[p], targets[real[c]], w);
    const Assignment inner = hungarian(costs);
    Assignment out;
    out.target_to_pred.assign(targets.size(), -1);
    for (std::size_t c = 0; c < real.size(); ++c) out.target_to_pred[real[c]] = inner.target_to_pred[c];
    out.unmatched_preds = inner.unmatched_preds;
    out.total_cost = inner.total_cost;
    return out;
}

}  // namespace setpose

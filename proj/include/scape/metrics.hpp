#pragma once

// Localization metrics and episode-level evaluation. Distances are L2 in
// normalized image coordinates divided by the episode normalizer (longest side
// of the query bbox). Invisible ground-truth keypoints are excluded from the
// headline metrics but form the occlusion stratum; keypoints belonging to a
// mirrored pair form the symmetry stratum.

#include "scape/model.hpp"
#include "scape/synth.hpp"

#include <array>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace scape {

// fraction of visible keypoints within threshold * normalizer of ground truth
inline double pck(const std::vector<std::array<double, 2>>& pred, const std::vector<std::array<double, 2>>& gt,
                  const BoolMask& visibility, double normalizer, double threshold = 0.2) {
    if (!(normalizer > 0.0)) throw std::invalid_argument("pck: normalizer must be positive");
    if (pred.size() < gt.size() || visibility.size() != gt.size())
        throw std::invalid_argument("pck: length mismatch");
    int visible = 0, hit = 0;
    for (size_t j = 0; j < gt.size(); ++j) {
        if (!visibility[j]) continue;
        ++visible;
        const double d = std::hypot(pred[j][0] - gt[j][0], pred[j][1] - gt[j][1]);
        if (d <= threshold * normalizer) ++hit;
    }
    if (visible == 0) return std::numeric_limits<double>::quiet_NaN(); // undefined, caller skips
    return static_cast<double>(hit) / visible;
}

inline double pck_from_distances(const std::vector<double>& dists, double threshold) {
    if (dists.empty()) return std::numeric_limits<double>::quiet_NaN();
    int hit = 0;
    for (double d : dists)
        if (d <= threshold) ++hit;
    return static_cast<double>(hit) / static_cast<double>(dists.size());
}

// trapezoidal area under PCK(t) for t in [0, t_max], normalized by t_max
inline double auc(const std::vector<double>& dists, double t_max = 0.2, int steps = 20) {
    if (dists.empty()) return std::numeric_limits<double>::quiet_NaN();
    if (steps < 1 || !(t_max > 0.0)) throw std::invalid_argument("auc: bad integration grid");
    double area = 0.0;
    double prev = pck_from_distances(dists, 0.0);
    for (int i = 1; i <= steps; ++i) {
        const double t = t_max * i / steps;
        const double cur = pck_from_distances(dists, t);
        area += 0.5 * (prev + cur) * (t_max / steps);
        prev = cur;
    }
    return area / t_max;
}

inline double nme(const std::vector<double>& dists) {
    if (dists.empty()) return std::numeric_limits<double>::quiet_NaN();
    double s = 0.0;
    for (double d : dists) s += d;
    return s / static_cast<double>(dists.size());
}

struct EvalResult {
    int n_episodes = 0;
    std::vector<double> dists;           // visible keypoints
    std::vector<double> dists_symmetric; // visible keypoints that belong to a mirrored pair
    std::vector<double> dists_occluded;  // invisible ground truth (prediction still made)
    double pck = 0.0, auc = 0.0, nme = 0.0;
    double pck_symmetric = 0.0, pck_occluded = 0.0;
};

using Predictor = std::function<std::vector<std::array<double, 2>>(const Episode&)>;

inline Predictor model_predictor(const Model& m) {
    return [&m](const Episode& ep) { return predict_coords(m, ep); };
}

inline Predictor oracle_predictor() {
    return [](const Episode& ep) {
        std::vector<std::array<double, 2>> out(ep.query.keypoints.begin(), ep.query.keypoints.end());
        return out;
    };
}

inline Predictor center_predictor() {
    return [](const Episode& ep) {
        return std::vector<std::array<double, 2>>(ep.k, std::array<double, 2>{0.5, 0.5});
    };
}

inline EvalResult evaluate(const Predictor& predict, const Dataset& ds, SplitKind split, int n_episodes,
                           int n_shot, uint64_t eval_seed, double threshold = 0.2) {
    if (n_episodes < 1) throw std::invalid_argument("evaluate: need at least one episode");
    EvalResult res;
    std::mt19937_64 rng(mix_seed(eval_seed, 0xE7A1));
    for (int e = 0; e < n_episodes; ++e) {
        Episode ep = ds.sample_episode(split, n_shot, rng);
        const auto coords = predict(ep);
        if (static_cast<int>(coords.size()) < ep.k)
            throw std::invalid_argument("evaluate: predictor returned too few keypoints");
        std::vector<uint8_t> in_pair(ep.k, 0);
        for (const auto& pr : ep.symmetric_pairs) in_pair[pr[0]] = in_pair[pr[1]] = 1;
        for (int j = 0; j < ep.k; ++j) {
            const double d = std::hypot(coords[j][0] - ep.query.keypoints[j][0],
                                        coords[j][1] - ep.query.keypoints[j][1]) /
                             ep.normalizer;
            if (ep.query.visibility[j]) {
                res.dists.push_back(d);
                if (in_pair[j]) res.dists_symmetric.push_back(d);
            } else {
                res.dists_occluded.push_back(d);
            }
        }
        ++res.n_episodes;
    }
    res.pck = pck_from_distances(res.dists, threshold);
    res.auc = auc(res.dists, threshold);
    res.nme = nme(res.dists);
    res.pck_symmetric = pck_from_distances(res.dists_symmetric, threshold);
    res.pck_occluded = pck_from_distances(res.dists_occluded, threshold);
    return res;
}

} // namespace scape

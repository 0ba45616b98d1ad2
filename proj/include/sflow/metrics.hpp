#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "sflow/error.hpp"
#include "sflow/geometry.hpp"
#include "sflow/scene_data.hpp"

namespace sflow {

inline constexpr double kDynamicSpeedThreshold = 0.05;  // meters per frame
inline constexpr double kEvalHalfExtent = 50.0;         // 100 m x 100 m box

struct EpeReport {
    double bs = 0.0, fs = 0.0, fd = 0.0, three_way = 0.0;
    bool bs_empty = true, fs_empty = true, fd_empty = true;
    std::size_t bs_count = 0, fs_count = 0, fd_count = 0;
};

/// Running sums so several frames can be pooled point-wise.
struct EpeAccumulator {
    double sum[3] = {0.0, 0.0, 0.0};
    std::size_t count[3] = {0, 0, 0};

    void add(const EpeAccumulator& o) {
        for (int c = 0; c < 3; ++c) {
            sum[c] += o.sum[c];
            count[c] += o.count[c];
        }
    }

    EpeReport report() const {
        EpeReport r;
        auto mean = [&](int c) { return count[c] ? sum[c] / static_cast<double>(count[c]) : 0.0; };
        r.bs = mean(0);
        r.fs = mean(1);
        r.fd = mean(2);
        r.bs_count = count[0];
        r.fs_count = count[1];
        r.fd_count = count[2];
        r.bs_empty = count[0] == 0;
        r.fs_empty = count[1] == 0;
        r.fd_empty = count[2] == 0;
        r.three_way = (r.bs + r.fs + r.fd) / 3.0;
        return r;
    }
};

/// Point class used by the 3-way EPE: 0 background static, 1 foreground
/// static, 2 foreground dynamic (GT speed strictly above the threshold).
inline int epe_class(int gt_label, const Vec3& gt_flow) {
    if (gt_label <= 0) return 0;
    return gt_flow.norm() > kDynamicSpeedThreshold ? 2 : 1;
}

inline EpeAccumulator epe_accumulate(const Points& points, const Points& pred, const Points& gt_flow,
                                     const Labels& gt_labels, double eval_half_extent = kEvalHalfExtent) {
    const std::size_t n = points.size();
    if (pred.size() != n || gt_flow.size() != n || gt_labels.size() != n)
        throw Error(ErrorCode::LengthMismatch, "epe inputs differ in length");
    if (!(eval_half_extent > 0.0)) throw Error(ErrorCode::InvalidArgument, "half extent must be positive");
    EpeAccumulator acc;
    for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(points[i].x()) > eval_half_extent || std::abs(points[i].y()) > eval_half_extent) continue;
        const int c = epe_class(gt_labels[i], gt_flow[i]);
        acc.sum[c] += (pred[i] - gt_flow[i]).norm();
        ++acc.count[c];
    }
    return acc;
}

/// 3-way EPE over the points of `points` inside the evaluation box. Empty
/// classes contribute 0 and are flagged.
inline EpeReport epe_3way(const Points& points, const Points& pred, const Points& gt_flow, const Labels& gt_labels,
                          double eval_half_extent = kEvalHalfExtent) {
    return epe_accumulate(points, pred, gt_flow, gt_labels, eval_half_extent).report();
}

struct SegReport {
    double ap = 0.0, pq = 0.0, f1 = 0.0, precision = 0.0, recall = 0.0, miou = 0.0, ri = 0.0;
};

namespace detail {

struct Contingency {
    std::vector<int> pred_ids, gt_ids;        // instance ids > 0, ascending
    std::map<std::pair<int, int>, std::int64_t> joint;
    std::map<int, std::int64_t> pred_size, gt_size;
};

inline Contingency contingency(const Labels& pred, const Labels& gt) {
    Contingency c;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ++c.joint[{pred[i], gt[i]}];
        ++c.pred_size[pred[i]];
        ++c.gt_size[gt[i]];
    }
    for (const auto& [id, n] : c.pred_size)
        if (id > 0) c.pred_ids.push_back(id);
    for (const auto& [id, n] : c.gt_size)
        if (id > 0) c.gt_ids.push_back(id);
    return c;
}

inline std::int64_t pairs_of(std::int64_t n) { return n * (n - 1) / 2; }

}  // namespace detail

/// Rand index over all point pairs; labels are compared as-is, so
/// background is one more cluster. Exact, via the contingency table.
inline double rand_index_exact(const Labels& pred, const Labels& gt) {
    if (pred.size() != gt.size()) throw Error(ErrorCode::LengthMismatch, "label vectors differ in length");
    const auto n = static_cast<std::int64_t>(pred.size());
    if (n < 2) return 1.0;
    const auto c = detail::contingency(pred, gt);
    std::int64_t same_both = 0, same_pred = 0, same_gt = 0;
    for (const auto& [key, m] : c.joint) same_both += detail::pairs_of(m);
    for (const auto& [id, m] : c.pred_size) same_pred += detail::pairs_of(m);
    for (const auto& [id, m] : c.gt_size) same_gt += detail::pairs_of(m);
    const std::int64_t total = detail::pairs_of(n);
    const std::int64_t agree = total - same_pred - same_gt + 2 * same_both;
    return static_cast<double>(agree) / static_cast<double>(total);
}

/// Rand index estimated from `samples` uniformly drawn pairs (i != j).
inline double rand_index_sampled(const Labels& pred, const Labels& gt, std::size_t samples = 200000,
                                 std::uint64_t seed = 0x5eed) {
    if (pred.size() != gt.size()) throw Error(ErrorCode::LengthMismatch, "label vectors differ in length");
    const std::size_t n = pred.size();
    if (n < 2) return 1.0;
    std::mt19937_64 rng(seed);
    std::size_t agree = 0;
    for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t i = rng() % n;
        std::size_t j = rng() % (n - 1);
        if (j >= i) ++j;
        agree += ((pred[i] == pred[j]) == (gt[i] == gt[j])) ? 1 : 0;
    }
    return static_cast<double>(agree) / static_cast<double>(samples);
}

inline constexpr std::size_t kExactRandIndexLimit = 2000;

/// Instance metrics. Instances are label values > 0. Pred/GT instances are
/// matched greedily by descending IoU (ties: lower pred id, then lower GT
/// id) with IoU >= 0.5. AP integrates precision over recall with predicted
/// instances ranked by matched IoU, unmatched ones last. PQ = sum IoU /
/// (TP + FP/2 + FN/2). mIoU averages the matched IoUs together with the
/// background IoU. RI is exact for N <= 2000 and sampled above.
inline SegReport seg_metrics(const Labels& pred, const Labels& gt) {
    if (pred.size() != gt.size()) throw Error(ErrorCode::LengthMismatch, "label vectors differ in length");
    const auto c = detail::contingency(pred, gt);

    struct Cand {
        double iou;
        int p, g;
    };
    std::vector<Cand> cands;
    for (const auto& [key, inter] : c.joint) {
        const auto [p, g] = key;
        if (p <= 0 || g <= 0) continue;
        const double uni = static_cast<double>(c.pred_size.at(p) + c.gt_size.at(g) - inter);
        cands.push_back({static_cast<double>(inter) / uni, p, g});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.iou != b.iou) return a.iou > b.iou;
        if (a.p != b.p) return a.p < b.p;
        return a.g < b.g;
    });
    std::map<int, double> pred_match;  // pred id -> IoU of its match
    std::map<int, bool> gt_used;
    for (const auto& cd : cands) {
        if (cd.iou < 0.5) break;
        if (pred_match.count(cd.p) || gt_used.count(cd.g)) continue;
        pred_match[cd.p] = cd.iou;
        gt_used[cd.g] = true;
    }

    const auto n_pred = static_cast<double>(c.pred_ids.size());
    const auto n_gt = static_cast<double>(c.gt_ids.size());
    const auto tp = static_cast<double>(pred_match.size());
    double iou_sum = 0.0;
    for (const auto& [p, iou] : pred_match) iou_sum += iou;

    SegReport r;
    r.precision = n_pred > 0 ? tp / n_pred : (n_gt == 0 ? 1.0 : 0.0);
    r.recall = n_gt > 0 ? tp / n_gt : (n_pred == 0 ? 1.0 : 0.0);
    r.f1 = (r.precision + r.recall) > 0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    const double fp = n_pred - tp, fn = n_gt - tp;
    const double pq_den = tp + 0.5 * fp + 0.5 * fn;
    r.pq = pq_den > 0 ? iou_sum / pq_den : 1.0;

    // AP: matched predictions by descending IoU, then unmatched ones.
    if (n_gt == 0) {
        r.ap = n_pred == 0 ? 1.0 : 0.0;
    } else {
        std::vector<double> ranked;
        for (const auto& [p, iou] : pred_match) ranked.push_back(iou);
        std::sort(ranked.begin(), ranked.end(), std::greater<>());
        double ap = 0.0, hits = 0.0, prev_recall = 0.0;
        for (std::size_t k = 0; k < ranked.size(); ++k) {
            hits += 1.0;
            const double prec = hits / static_cast<double>(k + 1);
            const double rec = hits / n_gt;
            ap += (rec - prev_recall) * prec;
            prev_recall = rec;
        }
        r.ap = ap;  // unmatched predictions add no recall
    }

    const std::int64_t pred_bg = c.pred_size.count(0) ? c.pred_size.at(0) : 0;
    const std::int64_t gt_bg = c.gt_size.count(0) ? c.gt_size.at(0) : 0;
    const std::int64_t both_bg = c.joint.count({0, 0}) ? c.joint.at({0, 0}) : 0;
    const std::int64_t bg_union = pred_bg + gt_bg - both_bg;
    const double bg_iou = bg_union > 0 ? static_cast<double>(both_bg) / static_cast<double>(bg_union) : 1.0;
    r.miou = (iou_sum + bg_iou) / (tp + 1.0);

    r.ri = pred.size() <= kExactRandIndexLimit ? rand_index_exact(pred, gt) : rand_index_sampled(pred, gt);
    return r;
}

inline nlohmann::json to_json(const EpeReport& r) {
    return {{"bs", r.bs},           {"fs", r.fs},           {"fd", r.fd},
            {"three_way", r.three_way}, {"bs_empty", r.bs_empty}, {"fs_empty", r.fs_empty},
            {"fd_empty", r.fd_empty}, {"bs_count", r.bs_count}, {"fs_count", r.fs_count},
            {"fd_count", r.fd_count}};
}

inline nlohmann::json to_json(const SegReport& r) {
    return {{"ap", r.ap},           {"pq", r.pq},     {"f1", r.f1}, {"precision", r.precision},
            {"recall", r.recall}, {"miou", r.miou}, {"ri", r.ri}};
}

inline SegReport mean_seg(const std::vector<SegReport>& frames) {
    SegReport m;
    if (frames.empty()) return m;
    for (const auto& f : frames) {
        m.ap += f.ap;
        m.pq += f.pq;
        m.f1 += f.f1;
        m.precision += f.precision;
        m.recall += f.recall;
        m.miou += f.miou;
        m.ri += f.ri;
    }
    const double k = static_cast<double>(frames.size());
    m.ap /= k;
    m.pq /= k;
    m.f1 /= k;
    m.precision /= k;
    m.recall /= k;
    m.miou /= k;
    m.ri /= k;
    return m;
}

}  // namespace sflow

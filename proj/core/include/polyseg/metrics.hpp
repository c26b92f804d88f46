#pragma once

#include <cstdint>
#include <span>

#include "polyseg/tensor.hpp"

namespace polyseg {

/// Exact pixel tallies for one prediction/truth pair. tp+fp+fn+tn equals the
/// pixel count of the compared masks.
struct ConfusionCounts {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    bool operator==(const ConfusionCounts&) const = default;
};

/// The six leaderboard metrics, each in [0, 1].
struct MetricSet {
    double jaccard = 0.0;
    double dsc = 0.0;
    double recall = 0.0;
    double precision = 0.0;
    double accuracy = 0.0;
    double f2 = 0.0;
};

/// Tally TP/FP/FN/TN over two binary H x W masks.
/// Throws ShapeError on dimension mismatch, DomainError on non-binary entries.
ConfusionCounts confusion_counts(const Tensor& pred, const Tensor& truth);

/// Compute the six metrics from one counts record.
///
/// Zero-denominator convention: if tp+fp+fn == 0 (both masks empty) then
/// jaccard = dsc = f2 = precision = recall = 1.0; if a single metric's
/// denominator is 0 while tp+fp+fn > 0, that metric is 0.0.
/// Throws DomainError when total() == 0.
MetricSet metric_set(const ConfusionCounts& counts);

/// Unweighted per-image mean of each field (macro average).
/// Throws DomainError on an empty sequence.
MetricSet aggregate(std::span<const MetricSet> per_image);

} // namespace polyseg

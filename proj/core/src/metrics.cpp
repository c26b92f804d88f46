#include "polyseg/metrics.hpp"

#include "polyseg/errors.hpp"

namespace polyseg {

ConfusionCounts confusion_counts(const Tensor& pred, const Tensor& truth) {
    if (pred.ndim() != 2 || truth.ndim() != 2)
        throw ShapeError("confusion_counts expects 2-d masks, got " + pred.shape_str() +
                         " and " + truth.shape_str());
    if (!pred.same_shape(truth))
        throw ShapeError("mask dimensions differ: " + pred.shape_str() + " vs " +
                         truth.shape_str());

    ConfusionCounts c;
    const double* p = pred.data();
    const double* t = truth.data();
    const std::size_t n = pred.numel();
    for (std::size_t i = 0; i < n; ++i) {
        if ((p[i] != 0.0 && p[i] != 1.0) || (t[i] != 0.0 && t[i] != 1.0))
            throw DomainError("confusion_counts: masks must be binary {0,1}");
        const bool pp = p[i] == 1.0;
        const bool tt = t[i] == 1.0;
        if (pp && tt)
            ++c.tp;
        else if (pp)
            ++c.fp;
        else if (tt)
            ++c.fn;
        else
            ++c.tn;
    }
    return c;
}

MetricSet metric_set(const ConfusionCounts& c) {
    if (c.total() == 0) throw DomainError("metric_set: all-zero counts record");

    const double tp = static_cast<double>(c.tp);
    const double fp = static_cast<double>(c.fp);
    const double fn = static_cast<double>(c.fn);
    const double tn = static_cast<double>(c.tn);

    MetricSet m;
    m.accuracy = (tp + tn) / static_cast<double>(c.total());

    if (c.tp + c.fp + c.fn == 0) {
        // Both masks empty: the prediction is vacuously perfect.
        m.jaccard = m.dsc = m.precision = m.recall = m.f2 = 1.0;
        return m;
    }
    m.jaccard = tp / (tp + fp + fn);
    m.dsc = 2.0 * tp / (2.0 * tp + fp + fn);
    m.precision = (c.tp + c.fp) > 0 ? tp / (tp + fp) : 0.0;
    m.recall = (c.tp + c.fn) > 0 ? tp / (tp + fn) : 0.0;
    m.f2 = 5.0 * tp / (5.0 * tp + 4.0 * fn + fp);
    return m;
}

MetricSet aggregate(std::span<const MetricSet> per_image) {
    if (per_image.empty()) throw DomainError("aggregate: empty metric sequence");

    MetricSet sum;
    for (const MetricSet& m : per_image) {
        sum.jaccard += m.jaccard;
        sum.dsc += m.dsc;
        sum.recall += m.recall;
        sum.precision += m.precision;
        sum.accuracy += m.accuracy;
        sum.f2 += m.f2;
    }
    const double n = static_cast<double>(per_image.size());
    sum.jaccard /= n;
    sum.dsc /= n;
    sum.recall /= n;
    sum.precision /= n;
    sum.accuracy /= n;
    sum.f2 /= n;
    return sum;
}

} // namespace polyseg

#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "polyseg/datapipe.hpp"
#include "polyseg/metrics.hpp"
#include "polyseg/models.hpp"

namespace polyseg {

/// Per-image metrics plus the aggregate row of one evaluated run.
struct RunReport {
    std::string run_id;
    std::vector<std::pair<std::string, MetricSet>> per_image; // sorted by id
    MetricSet aggregate;
    double threshold = 0.5;
    int n_images = 0;
};

/// Run the model over the test set, binarize sigmoid(main logits) at the
/// threshold, and collect per-image and aggregate metrics.
/// Throws DomainError for an empty test set or threshold outside (0,1).
RunReport evaluate(const Model& model, const std::vector<ImageSample>& test_set, double threshold,
                   const std::string& run_id);

/// Same, but with an arbitrary logits-producing predictor (H x W per sample).
RunReport evaluate_with(const std::function<Tensor(const ImageSample&)>& predict_logits,
                        const std::vector<ImageSample>& test_set, double threshold,
                        const std::string& run_id);

enum class TableFormat { csv, markdown };

/// Render aggregate rows with columns Run ID, Jaccard, DSC, Recall, Precision,
/// Accuracy, F2, values rounded to 3 decimals (half-up).
std::string format_table(std::span<const RunReport> reports, TableFormat format);

/// Decimal half-up rounding to 3 places, rendered as e.g. "0.766".
std::string format_metric(double value);

std::string report_to_json(const RunReport& report);
RunReport report_from_json(const std::string& text);

} // namespace polyseg

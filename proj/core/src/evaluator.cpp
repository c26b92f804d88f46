#include "polyseg/evaluator.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "polyseg/errors.hpp"
#include "polyseg/nn/ops.hpp"

namespace polyseg {

using nlohmann::json;

RunReport evaluate_with(const std::function<Tensor(const ImageSample&)>& predict_logits,
                        const std::vector<ImageSample>& test_set, double threshold,
                        const std::string& run_id) {
    if (test_set.empty()) throw DomainError("evaluate: empty test set");
    if (!(threshold > 0.0 && threshold < 1.0))
        throw DomainError("evaluate: threshold must be in (0,1)");

    std::vector<std::size_t> order(test_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return test_set[a].id < test_set[b].id;
    });

    RunReport report;
    report.run_id = run_id;
    report.threshold = threshold;
    std::vector<MetricSet> sets;
    for (std::size_t i : order) {
        const ImageSample& s = test_set[i];
        const Tensor logits = predict_logits(s);
        if (!logits.same_shape(s.mask))
            throw ShapeError("evaluate: prediction shape " + logits.shape_str() +
                             " does not match mask " + s.mask.shape_str() + " for '" + s.id + "'");
        Tensor pred(logits.shape());
        for (std::size_t k = 0; k < logits.numel(); ++k) {
            const double z = logits[k];
            const double p = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z))
                                      : std::exp(z) / (1.0 + std::exp(z));
            pred[k] = p > threshold ? 1.0 : 0.0;
        }
        const MetricSet m = metric_set(confusion_counts(pred, s.mask));
        report.per_image.emplace_back(s.id, m);
        sets.push_back(m);
    }
    report.aggregate = aggregate(sets);
    report.n_images = static_cast<int>(sets.size());
    return report;
}

RunReport evaluate(const Model& model, const std::vector<ImageSample>& test_set, double threshold,
                   const std::string& run_id) {
    auto predict = [&model](const ImageSample& s) {
        const int h = s.mask.dim(0), w = s.mask.dim(1);
        Tensor batch({1, 3, h, w});
        std::copy_n(s.image.data(), s.image.numel(), batch.data());
        ModelOutput out = forward(model, batch);
        return Tensor::from_data({h, w},
                                 std::vector<double>(out.main.data(),
                                                     out.main.data() + out.main.numel()));
    };
    return evaluate_with(predict, test_set, threshold, run_id);
}

std::string format_metric(double value) {
    // Half-up in decimal; the 1e-9 nudge makes doubles that denote 3-4 decimal
    // literals (stored slightly below the tie) round the way the literal would.
    const double scaled = std::floor(value * 1000.0 + 0.5 + 1e-9);
    const long n = static_cast<long>(scaled);
    const bool neg = n < 0;
    const long a = std::labs(n);
    std::string out = neg ? "-" : "";
    out += std::to_string(a / 1000);
    const long frac = a % 1000;
    out += '.';
    if (frac < 100) out += '0';
    if (frac < 10) out += '0';
    out += std::to_string(frac);
    return out;
}

std::string format_table(std::span<const RunReport> reports, TableFormat format) {
    if (reports.empty()) throw DomainError("format_table: no reports");

    std::string out;
    if (format == TableFormat::csv) {
        out = "Run ID,Jaccard,DSC,Recall,Precision,Accuracy,F2\n";
        for (const RunReport& r : reports) {
            const MetricSet& m = r.aggregate;
            out += r.run_id + ',' + format_metric(m.jaccard) + ',' + format_metric(m.dsc) + ',' +
                   format_metric(m.recall) + ',' + format_metric(m.precision) + ',' +
                   format_metric(m.accuracy) + ',' + format_metric(m.f2) + '\n';
        }
        return out;
    }
    out = "| Run ID | Jaccard | DSC | Recall | Precision | Accuracy | F2 |\n";
    out += "| --- | --- | --- | --- | --- | --- | --- |\n";
    for (const RunReport& r : reports) {
        const MetricSet& m = r.aggregate;
        out += "| " + r.run_id + " | " + format_metric(m.jaccard) + " | " + format_metric(m.dsc) +
               " | " + format_metric(m.recall) + " | " + format_metric(m.precision) + " | " +
               format_metric(m.accuracy) + " | " + format_metric(m.f2) + " |\n";
    }
    return out;
}

namespace {

json metric_set_to_json(const MetricSet& m) {
    json j;
    j["jaccard"] = m.jaccard;
    j["dsc"] = m.dsc;
    j["recall"] = m.recall;
    j["precision"] = m.precision;
    j["accuracy"] = m.accuracy;
    j["f2"] = m.f2;
    return j;
}

MetricSet metric_set_from_json(const json& j) {
    MetricSet m;
    m.jaccard = j.at("jaccard").get<double>();
    m.dsc = j.at("dsc").get<double>();
    m.recall = j.at("recall").get<double>();
    m.precision = j.at("precision").get<double>();
    m.accuracy = j.at("accuracy").get<double>();
    m.f2 = j.at("f2").get<double>();
    return m;
}

} // namespace

std::string report_to_json(const RunReport& report) {
    json j;
    j["run_id"] = report.run_id;
    j["threshold"] = report.threshold;
    j["n_images"] = report.n_images;
    json per = json::object();
    for (const auto& [id, m] : report.per_image) per[id] = metric_set_to_json(m);
    j["per_image"] = std::move(per);
    j["aggregate"] = metric_set_to_json(report.aggregate);
    return j.dump();
}

RunReport report_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw LoadError(std::string("run report: invalid JSON: ") + e.what());
    }
    RunReport r;
    try {
        r.run_id = j.at("run_id").get<std::string>();
        r.threshold = j.at("threshold").get<double>();
        r.n_images = j.at("n_images").get<int>();
        for (auto it = j.at("per_image").begin(); it != j.at("per_image").end(); ++it)
            r.per_image.emplace_back(it.key(), metric_set_from_json(it.value()));
        r.aggregate = metric_set_from_json(j.at("aggregate"));
    } catch (const json::exception& e) {
        throw LoadError(std::string("run report: missing or bad field: ") + e.what());
    }
    return r;
}

} // namespace polyseg

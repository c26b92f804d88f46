#include "polyseg/trainer.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "polyseg/checkpoint.hpp"
#include "polyseg/errors.hpp"
#include "polyseg/metrics.hpp"
#include "polyseg/rng.hpp"

namespace polyseg {

using nlohmann::json;
using nn::Var;

const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::bce: return "bce";
        case LossKind::dice: return "dice";
        case LossKind::bce_plus_dice: return "bce+dice";
    }
    throw ConfigError("unreachable loss kind");
}

LossKind loss_from_name(const std::string& name) {
    if (name == "bce") return LossKind::bce;
    if (name == "dice") return LossKind::dice;
    if (name == "bce+dice") return LossKind::bce_plus_dice;
    throw ConfigError("unknown loss '" + name + "'; valid: bce, dice, bce+dice");
}

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (aux_weight < 0.0 || aux_weight > 1.0) throw ConfigError("aux_weight must be in [0, 1]");
}

std::string to_json(const TrainConfig& cfg) {
    json j;
    j["epochs"] = cfg.epochs;
    j["batch_size"] = cfg.batch_size;
    j["learning_rate"] = cfg.learning_rate;
    j["loss"] = loss_name(cfg.loss);
    j["aux_weight"] = cfg.aux_weight;
    j["seed"] = cfg.seed;
    j["checkpoint_path"] = cfg.checkpoint_path.string();
    return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("train config: expected a JSON object");

    static const char* known[] = {"epochs", "batch_size", "learning_rate", "loss",
                                  "aux_weight", "seed", "checkpoint_path"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const char* k : known) ok = ok || it.key() == k;
        if (!ok) throw ConfigError("train config: unknown key '" + it.key() + "'");
    }

    TrainConfig cfg;
    try {
        if (j.contains("epochs")) cfg.epochs = j["epochs"].get<int>();
        if (j.contains("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
        if (j.contains("learning_rate")) cfg.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("loss")) cfg.loss = loss_from_name(j["loss"].get<std::string>());
        if (j.contains("aux_weight")) cfg.aux_weight = j["aux_weight"].get<double>();
        if (j.contains("seed")) cfg.seed = j["seed"].get<std::int64_t>();
        if (j.contains("checkpoint_path"))
            cfg.checkpoint_path = j["checkpoint_path"].get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("train config: bad field type: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

std::string history_to_jsonl(const TrainHistory& history) {
    std::string out;
    for (std::size_t i = 0; i < history.epochs.size(); ++i) {
        const EpochRecord& r = history.epochs[i];
        json j;
        j["epoch"] = i + 1;
        j["train_loss"] = r.train_loss;
        j["val_loss"] = r.val_loss;
        j["val_dice"] = r.val_dice;
        out += j.dump();
        out += '\n';
    }
    return out;
}

// --- Losses ------------------------------------------------------------------

Var dice_loss(const Var& logits, const Tensor& truth) {
    return nn::dice_loss(logits, truth, 1.0);
}

Var bce_loss(const Var& logits, const Tensor& truth) {
    return nn::bce_with_logits_mean(logits, truth);
}

namespace {

Var loss_of_kind(LossKind kind, const Var& logits, const Tensor& truth) {
    switch (kind) {
        case LossKind::bce: return bce_loss(logits, truth);
        case LossKind::dice: return polyseg::dice_loss(logits, truth);
        case LossKind::bce_plus_dice:
            return nn::add(bce_loss(logits, truth), polyseg::dice_loss(logits, truth));
    }
    throw ConfigError("unreachable loss kind");
}

} // namespace

Var total_loss(const Var& main, const std::vector<Var>& aux, const Tensor& truth,
               const TrainConfig& cfg) {
    Var total = loss_of_kind(cfg.loss, main, truth);
    for (const Var& side : aux)
        total = nn::add(total, nn::affine(loss_of_kind(cfg.loss, side, truth), cfg.aux_weight, 0.0));
    return total;
}

double dice_loss_value(const Tensor& logits, const Tensor& truth) {
    nn::NoGradGuard ng;
    return polyseg::dice_loss(Var::leaf(logits), truth).value()[0];
}

double bce_loss_value(const Tensor& logits, const Tensor& truth) {
    nn::NoGradGuard ng;
    return bce_loss(Var::leaf(logits), truth).value()[0];
}

// --- Optimizer ---------------------------------------------------------------

AdamOptimizer::AdamOptimizer(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamOptimizer::step(ParamMap& params, const std::map<std::string, Tensor>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (auto& [name, theta] : params) {
        const auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor& g = git->second;
        auto& [m, v] = moments_[name];
        if (m.empty()) {
            m = Tensor(theta.shape(), 0.0);
            v = Tensor(theta.shape(), 0.0);
        }
        double* mp = m.data();
        double* vp = v.data();
        double* tp = theta.data();
        const double* gp = g.data();
        for (std::size_t i = 0; i < theta.numel(); ++i) {
            mp[i] = beta1_ * mp[i] + (1.0 - beta1_) * gp[i];
            vp[i] = beta2_ * vp[i] + (1.0 - beta2_) * gp[i] * gp[i];
            const double mhat = mp[i] / bc1;
            const double vhat = vp[i] / bc2;
            tp[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        const double* p = g.data();
        for (std::size_t i = 0; i < g.numel(); ++i) sq += p[i] * p[i];
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (auto& [name, g] : grads) {
            double* p = g.data();
            for (std::size_t i = 0; i < g.numel(); ++i) p[i] *= scale;
        }
    }
    return norm;
}

// --- Training loop -----------------------------------------------------------

std::pair<Tensor, Tensor> make_batch(const std::vector<ImageSample>& samples,
                                     const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw DomainError("make_batch: empty index list");
    const ImageSample& first = samples[indices[0]];
    const int h = first.mask.dim(0), w = first.mask.dim(1);
    const int n = static_cast<int>(indices.size());
    Tensor batch({n, 3, h, w});
    Tensor truth({n, 1, h, w});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int i = 0; i < n; ++i) {
        const ImageSample& s = samples[indices[static_cast<std::size_t>(i)]];
        if (s.mask.dim(0) != h || s.mask.dim(1) != w)
            throw ShapeError("make_batch: sample '" + s.id + "' has mismatched dimensions " +
                             s.mask.shape_str());
        std::copy_n(s.image.data(), 3 * plane, batch.data() + static_cast<std::size_t>(i) * 3 * plane);
        std::copy_n(s.mask.data(), plane, truth.data() + static_cast<std::size_t>(i) * plane);
    }
    return {std::move(batch), std::move(truth)};
}

namespace {

void check_set(const ModelConfig& mc, const std::vector<ImageSample>& set, const char* which) {
    if (set.empty()) throw DomainError(std::string("train: ") + which + " set is empty");
    const int div = 1 << mc.depth;
    for (const ImageSample& s : set) {
        if (s.mask.dim(0) % div != 0)
            throw ShapeError("train: sample '" + s.id + "' height " +
                             std::to_string(s.mask.dim(0)) + " not divisible by 2^depth = " +
                             std::to_string(div));
        if (s.mask.dim(1) % div != 0)
            throw ShapeError("train: sample '" + s.id + "' width " +
                             std::to_string(s.mask.dim(1)) + " not divisible by 2^depth = " +
                             std::to_string(div));
    }
}

double total_loss_value(const Model& model, const Tensor& batch, const Tensor& truth,
                        const TrainConfig& cfg) {
    nn::NoGradGuard ng;
    ModelOutput out = forward(model, batch);
    std::vector<Var> aux;
    aux.reserve(out.aux.size());
    for (Tensor& a : out.aux) aux.push_back(Var::leaf(std::move(a)));
    return total_loss(Var::leaf(std::move(out.main)), aux, truth, cfg).value()[0];
}

struct ValStats {
    double loss = 0.0;
    double dice = 0.0;
};

ValStats validate_pass(const Model& model, const std::vector<ImageSample>& val_set,
                       const TrainConfig& cfg) {
    nn::NoGradGuard ng;
    ValStats stats;
    double loss_weight = 0.0;
    for (std::size_t start = 0; start < val_set.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start;
             i < std::min(val_set.size(), start + static_cast<std::size_t>(cfg.batch_size)); ++i)
            idx.push_back(i);
        auto [batch, truth] = make_batch(val_set, idx);
        ModelOutput out = forward(model, batch);

        std::vector<Var> aux;
        for (const Tensor& a : out.aux) aux.push_back(Var::leaf(a));
        const double lv = total_loss(Var::leaf(out.main), aux, truth, cfg).value()[0];
        stats.loss += lv * static_cast<double>(idx.size());
        loss_weight += static_cast<double>(idx.size());

        // per-image dice at threshold 0.5
        const int h = out.main.dim(2), w = out.main.dim(3);
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        for (std::size_t i = 0; i < idx.size(); ++i) {
            Tensor pred({h, w});
            Tensor tru({h, w});
            const double* mp = out.main.data() + i * plane;
            const double* tp = truth.data() + i * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                pred[k] = mp[k] > 0.0 ? 1.0 : 0.0; // sigmoid(z) > 0.5 <=> z > 0
                tru[k] = tp[k];
            }
            stats.dice += metric_set(confusion_counts(pred, tru)).dsc;
        }
    }
    stats.loss /= loss_weight;
    stats.dice /= static_cast<double>(val_set.size());
    return stats;
}

} // namespace

std::pair<Model, TrainHistory> train(Model model, const std::vector<ImageSample>& train_set,
                                     const std::vector<ImageSample>& val_set,
                                     const TrainConfig& cfg) {
    cfg.validate();
    model.config.validate();
    check_set(model.config, train_set, "train");
    check_set(model.config, val_set, "validation");

    Rng shuffle_rng(static_cast<std::uint64_t>(cfg.seed));
    AdamOptimizer opt(cfg.learning_rate);
    TrainHistory history;
    double best_dice = -1.0;

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        double weight = 0.0;
        int step = 0;
        for (std::size_t start = 0; start < order.size();
             start += static_cast<std::size_t>(cfg.batch_size)) {
            ++step;
            std::vector<std::size_t> idx(
                order.begin() + static_cast<std::ptrdiff_t>(start),
                order.begin() + static_cast<std::ptrdiff_t>(
                                    std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size))));
            auto [batch, truth] = make_batch(train_set, idx);

            ModelTrace trace = forward_trace(model, batch);
            Var loss = total_loss(trace.main, trace.aux, truth, cfg);
            const double lv = loss.value()[0];
            if (!std::isfinite(lv))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   ", step " + std::to_string(step));
            nn::backward(loss);

            std::map<std::string, Tensor> grads;
            for (const auto& [name, leaf] : trace.leaves) grads.emplace(name, leaf.grad());
            clip_global_norm(grads, 5.0);
            opt.step(model.params, grads);

            loss_sum += lv * static_cast<double>(idx.size());
            weight += static_cast<double>(idx.size());
        }

        EpochRecord rec;
        rec.train_loss = loss_sum / weight;
        const ValStats vs = validate_pass(model, val_set, cfg);
        if (!std::isfinite(vs.loss))
            throw NumericError("train: non-finite validation loss at epoch " +
                               std::to_string(epoch));
        rec.val_loss = vs.loss;
        rec.val_dice = vs.dice;
        history.epochs.push_back(rec);

        if (rec.val_dice > best_dice) {
            best_dice = rec.val_dice;
            if (!cfg.checkpoint_path.empty()) save_checkpoint(cfg.checkpoint_path, model);
        }
    }
    return {std::move(model), std::move(history)};
}

// --- Overfit sanity -----------------------------------------------------------

namespace {

std::vector<ImageSample> synthetic_blob_set(int n, int size, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<ImageSample> out;
    for (int i = 0; i < n; ++i) {
        ImageSample s;
        s.id = "blob" + std::to_string(i);
        s.mask = Tensor({size, size});
        const int blobs = 1 + static_cast<int>(rng.uniform_int(2));
        for (int b = 0; b < blobs; ++b) {
            const double cy = rng.uniform(0.2, 0.8) * size;
            const double cx = rng.uniform(0.2, 0.8) * size;
            const double ry = rng.uniform(0.12, 0.3) * size;
            const double rx = rng.uniform(0.12, 0.3) * size;
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double dy = (y - cy) / ry;
                    const double dx = (x - cx) / rx;
                    if (dy * dy + dx * dx <= 1.0) s.mask.at(y, x) = 1.0;
                }
        }
        s.image = Tensor({3, size, size});
        for (int ch = 0; ch < 3; ++ch)
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x)
                    s.image.at(ch, y, x) =
                        0.6 * s.mask.at(y, x) + 0.2 + rng.uniform(-0.1, 0.1);
        out.push_back(std::move(s));
    }
    return out;
}

} // namespace

double overfit_sanity(Arch arch, int steps) {
    if (steps < 0) throw DomainError("overfit_sanity: steps must be >= 0");

    ModelConfig mc;
    mc.arch = arch;
    mc.base_width = 8;
    mc.depth = 2;
    mc.seed = 7;

    TrainConfig tc;
    tc.batch_size = 8; // full batch: one step per epoch
    tc.learning_rate = 3e-3;
    tc.loss = LossKind::bce_plus_dice;
    tc.aux_weight = 1.0;
    tc.seed = 7;

    const std::vector<ImageSample> set = synthetic_blob_set(8, 64, 1234);
    Model model = build_model(mc);

    std::vector<std::size_t> all(set.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    auto [batch, truth] = make_batch(set, all);

    if (steps > 0) {
        tc.epochs = steps;
        const std::vector<ImageSample> val = {set.front()};
        model = train(std::move(model), set, val, tc).first;
    }
    const double final_loss = total_loss_value(model, batch, truth, tc);
    if (!std::isfinite(final_loss)) throw NumericError("overfit_sanity: non-finite loss");
    return final_loss;
}

} // namespace polyseg

#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "polyseg/datapipe.hpp"
#include "polyseg/models.hpp"
#include "polyseg/nn/ops.hpp"

namespace polyseg {

enum class LossKind { bce, dice, bce_plus_dice };

const char* loss_name(LossKind k);
LossKind loss_from_name(const std::string& name);

struct TrainConfig {
    int epochs = 1;
    int batch_size = 4;
    double learning_rate = 1e-4;
    LossKind loss = LossKind::bce_plus_dice;
    double aux_weight = 1.0; // weight per side output
    std::int64_t seed = 0;
    std::filesystem::path checkpoint_path;

    void validate() const; // throws ConfigError
};

std::string to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct EpochRecord {
    double train_loss = 0.0;
    double val_loss = 0.0;
    double val_dice = 0.0;
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
};

/// One JSON object per epoch, newline-terminated.
std::string history_to_jsonl(const TrainHistory& history);

// --- Losses (graph-recording; use .value()[0] for plain numbers) -----------

/// 1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1), p = sigmoid(logits).
nn::Var dice_loss(const nn::Var& logits, const Tensor& truth);
/// Pixel-mean binary cross entropy on logits, log-sum-exp stable.
nn::Var bce_loss(const nn::Var& logits, const Tensor& truth);
/// loss(main) + aux_weight * sum_i loss(aux_i), per config.loss.
nn::Var total_loss(const nn::Var& main, const std::vector<nn::Var>& aux, const Tensor& truth,
                   const TrainConfig& cfg);

double dice_loss_value(const Tensor& logits, const Tensor& truth);
double bce_loss_value(const Tensor& logits, const Tensor& truth);

// --- Optimization -----------------------------------------------------------

/// Adaptive-moment gradient descent over a fixed set of named tensors.
class AdamOptimizer {
public:
    AdamOptimizer(double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8);
    /// Apply one update; grads maps parameter name -> gradient tensor.
    void step(ParamMap& params, const std::map<std::string, Tensor>& grads);

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_; // name -> (m, v)
};

/// Clip gradients jointly to the given global L2 norm; returns the pre-clip norm.
double clip_global_norm(std::map<std::string, Tensor>& grads, double max_norm);

/// Fit the model. Writes a checkpoint whenever validation dice improves.
/// Deterministic for a fixed seed. Throws NumericError (naming epoch and step)
/// if the loss becomes non-finite.
std::pair<Model, TrainHistory> train(Model model, const std::vector<ImageSample>& train_set,
                                     const std::vector<ImageSample>& val_set,
                                     const TrainConfig& cfg);

/// Build a small fixed synthetic batch (random blobs), train `steps` steps on
/// it, and return the final bce+dice training loss. steps == 0 returns the
/// initial loss of the untrained model.
double overfit_sanity(Arch arch, int steps);

/// Stack samples into (batch N x 3 x H x W, truth N x 1 x H x W).
std::pair<Tensor, Tensor> make_batch(const std::vector<ImageSample>& samples,
                                     const std::vector<std::size_t>& indices);

} // namespace polyseg

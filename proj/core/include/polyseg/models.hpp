#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "polyseg/model_config.hpp"
#include "polyseg/nn/ops.hpp"
#include "polyseg/rng.hpp"
#include "polyseg/tensor.hpp"

namespace polyseg {

/// Named parameter tensors; std::map keeps iteration order deterministic.
using ParamMap = std::map<std::string, Tensor>;

struct Model {
    ModelConfig config;
    ParamMap params;
};

/// main: N x 1 x H x W logits at input resolution. aux: empty for the U-Net
/// variants, three side-output logit maps (input resolution) for pranet-lite.
struct ModelOutput {
    Tensor main;
    std::vector<Tensor> aux;
};

/// Gradient-recording forward result. leaves maps parameter name -> leaf Var
/// so the optimizer can read per-parameter gradients after backward().
struct ModelTrace {
    nn::Var main;
    std::vector<nn::Var> aux;
    std::map<std::string, nn::Var> leaves;
};

/// Deterministic parameter construction from config (seeded fan-in uniform).
Model build_model(const ModelConfig& cfg);

/// Evaluation forward pass (no gradient recording).
/// Throws ShapeError (naming the offending dimension) when H or W is not
/// divisible by 2^depth.
ModelOutput forward(const Model& model, const Tensor& batch);

/// Training forward pass; records the graph and exposes parameter leaves.
ModelTrace forward_trace(const Model& model, const Tensor& batch);

/// Total scalar parameter count.
std::size_t param_count(const Model& model);

/// Largest divisor of channels that is <= 4; group count used by the
/// normalization layers in residual and inception blocks.
int norm_groups(int channels);

// --- Reusable blocks (also exercised directly by tests) -------------------

struct ConvParams {
    nn::Var w;
    nn::Var b;
};

/// Pre-activation residual block: y = shortcut(x) + F(x) with
/// F = (group_norm -> activation -> conv3x3) x 2 at the given dilation.
/// Shortcut is identity when widths match, else a 1x1 projection.
struct ResidualBlockParams {
    nn::Var gn1_gamma, gn1_beta;
    ConvParams conv1;
    nn::Var gn2_gamma, gn2_beta;
    ConvParams conv2;
    std::optional<ConvParams> projection;
};
nn::Var residual_block(const nn::Var& x, const ResidualBlockParams& p, int dilation,
                       double slope = 0.0);

/// Four parallel branches concatenated along channels:
/// 1x1 | 1x1->3x3 | 1x1->5x5 | 3x3 max-pool->1x1, each conv followed by the
/// activation. Branches may be absent at very narrow widths.
struct InceptionBlockParams {
    std::optional<ConvParams> b1;
    std::optional<std::pair<ConvParams, ConvParams>> b3; // reduce, 3x3
    std::optional<std::pair<ConvParams, ConvParams>> b5; // reduce, 5x5
    std::optional<ConvParams> bpool;
};
nn::Var inception_block(const nn::Var& x, const InceptionBlockParams& p, double slope = 0.0);

/// Split a block width over the four inception branches, most-even first;
/// zero entries mean the branch is dropped.
std::array<int, 4> inception_branch_widths(int out_channels);

/// refined = coarse_logits + conv_stack(A * features), A = 1 - sigmoid(coarse),
/// broadcast over channels. conv_stack: 3x3 C->C, activation, 3x3 C->1.
struct ReverseAttentionParams {
    ConvParams conv1;
    ConvParams conv2;
};
nn::Var reverse_attention(const nn::Var& features, const nn::Var& coarse_logits,
                          const ReverseAttentionParams& p, double slope = 0.0);

// --- Parameter access ------------------------------------------------------

/// Single source of truth for parameter naming: the forward pass runs either
/// in init mode (creating and seeding tensors as it first touches them) or in
/// run mode (fetching stored tensors as graph leaves).
class ParamStore {
public:
    ParamStore(ParamMap& params, Rng& rng); // init mode
    ParamStore(const ParamMap& params, bool requires_grad); // run mode

    nn::Var conv_weight(const std::string& name, int out_ch, int in_ch, int k);
    nn::Var conv_bias(const std::string& name, int out_ch, int fan_in);
    ConvParams conv(const std::string& name, int in_ch, int out_ch, int k);
    nn::Var gn_gamma(const std::string& name, int channels);
    nn::Var gn_beta(const std::string& name, int channels);

    std::map<std::string, nn::Var> take_leaves() { return std::move(leaves_); }

private:
    nn::Var fetch(const std::string& name, const std::vector<int>& shape, double uniform_bound,
                  double const_value, bool constant);

    ParamMap* init_params_ = nullptr;
    Rng* rng_ = nullptr;
    const ParamMap* run_params_ = nullptr;
    bool requires_grad_ = false;
    std::map<std::string, nn::Var> leaves_;
};

} // namespace polyseg

#include "polyseg/models.hpp"

#include <cmath>

#include "polyseg/errors.hpp"

namespace polyseg {

using nn::Var;

int norm_groups(int channels) {
    for (int g = 4; g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

// --- ParamStore -------------------------------------------------------------

ParamStore::ParamStore(ParamMap& params, Rng& rng) : init_params_(&params), rng_(&rng) {}

ParamStore::ParamStore(const ParamMap& params, bool requires_grad)
    : run_params_(&params), requires_grad_(requires_grad) {}

Var ParamStore::fetch(const std::string& name, const std::vector<int>& shape,
                      double uniform_bound, double const_value, bool constant) {
    if (init_params_) {
        if (init_params_->count(name))
            throw Error("ParamStore: duplicate parameter '" + name + "'");
        Tensor t(shape, const_value);
        if (!constant) {
            double* p = t.data();
            for (std::size_t i = 0; i < t.numel(); ++i)
                p[i] = rng_->uniform(-uniform_bound, uniform_bound);
        }
        auto leaf = Var::leaf(t, false);
        init_params_->emplace(name, std::move(t));
        return leaf;
    }
    auto cached = leaves_.find(name);
    if (cached != leaves_.end()) return cached->second;
    auto it = run_params_->find(name);
    if (it == run_params_->end())
        throw ConfigError("model parameter '" + name + "' missing (config/checkpoint mismatch)");
    if (it->second.shape() != shape)
        throw ShapeError("model parameter '" + name + "' has shape " + it->second.shape_str() +
                         ", expected " + Tensor(shape).shape_str());
    Var leaf = Var::leaf(it->second, requires_grad_);
    leaves_.emplace(name, leaf);
    return leaf;
}

Var ParamStore::conv_weight(const std::string& name, int out_ch, int in_ch, int k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * k * k);
    return fetch(name, {out_ch, in_ch, k, k}, bound, 0.0, false);
}

Var ParamStore::conv_bias(const std::string& name, int out_ch, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return fetch(name, {out_ch}, bound, 0.0, false);
}

ConvParams ParamStore::conv(const std::string& name, int in_ch, int out_ch, int k) {
    ConvParams p;
    p.w = conv_weight(name + ".weight", out_ch, in_ch, k);
    p.b = conv_bias(name + ".bias", out_ch, in_ch * k * k);
    return p;
}

Var ParamStore::gn_gamma(const std::string& name, int channels) {
    return fetch(name, {channels}, 0.0, 1.0, true);
}

Var ParamStore::gn_beta(const std::string& name, int channels) {
    return fetch(name, {channels}, 0.0, 0.0, true);
}

// --- Blocks ------------------------------------------------------------------

Var residual_block(const Var& x, const ResidualBlockParams& p, int dilation, double slope) {
    const int in_ch = x.value().dim(1);
    const int out_ch = p.conv1.w.value().dim(0);
    Var h = nn::group_norm(x, p.gn1_gamma, p.gn1_beta, norm_groups(in_ch));
    h = nn::leaky_relu(h, slope);
    h = nn::conv2d(h, p.conv1.w, p.conv1.b, dilation, dilation);
    h = nn::group_norm(h, p.gn2_gamma, p.gn2_beta, norm_groups(out_ch));
    h = nn::leaky_relu(h, slope);
    h = nn::conv2d(h, p.conv2.w, p.conv2.b, dilation, dilation);
    Var shortcut = x;
    if (p.projection) shortcut = nn::conv2d(x, p.projection->w, p.projection->b, 0);
    else if (in_ch != out_ch)
        throw ShapeError("residual_block: widths differ but no projection given");
    return nn::add(shortcut, h);
}

std::array<int, 4> inception_branch_widths(int out_channels) {
    std::array<int, 4> w = {0, 0, 0, 0};
    for (int i = 0; i < 4; ++i) w[i] = out_channels / 4;
    for (int i = 0; i < out_channels % 4; ++i) ++w[i];
    return w;
}

Var inception_block(const Var& x, const InceptionBlockParams& p, double slope) {
    std::vector<Var> branches;
    if (p.b1) branches.push_back(nn::leaky_relu(nn::conv2d(x, p.b1->w, p.b1->b, 0), slope));
    if (p.b3) {
        Var r = nn::leaky_relu(nn::conv2d(x, p.b3->first.w, p.b3->first.b, 0), slope);
        branches.push_back(nn::leaky_relu(nn::conv2d(r, p.b3->second.w, p.b3->second.b, 1), slope));
    }
    if (p.b5) {
        Var r = nn::leaky_relu(nn::conv2d(x, p.b5->first.w, p.b5->first.b, 0), slope);
        branches.push_back(nn::leaky_relu(nn::conv2d(r, p.b5->second.w, p.b5->second.b, 2), slope));
    }
    if (p.bpool) {
        Var q = nn::max_pool3_same(x);
        branches.push_back(nn::leaky_relu(nn::conv2d(q, p.bpool->w, p.bpool->b, 0), slope));
    }
    if (branches.empty()) throw DomainError("inception_block: all branches absent");
    return nn::concat_channels(branches);
}

Var reverse_attention(const Var& features, const Var& coarse_logits,
                      const ReverseAttentionParams& p, double slope) {
    const Tensor& f = features.value();
    const Tensor& c = coarse_logits.value();
    if (c.ndim() != 4 || c.dim(1) != 1)
        throw ShapeError("reverse_attention: coarse logits must be N x 1 x h x w, got " +
                         c.shape_str());
    if (f.dim(2) != c.dim(2) || f.dim(3) != c.dim(3))
        throw ShapeError("reverse_attention: spatial mismatch, features " + f.shape_str() +
                         " vs coarse " + c.shape_str());
    Var attention = nn::affine(nn::sigmoid(coarse_logits), -1.0, 1.0); // 1 - sigmoid
    Var attended = nn::scale_channels(features, attention);
    Var h = nn::leaky_relu(nn::conv2d(attended, p.conv1.w, p.conv1.b, 1), slope);
    Var r = nn::conv2d(h, p.conv2.w, p.conv2.b, 1);
    return nn::add(coarse_logits, r);
}

// --- Architectures -----------------------------------------------------------

namespace {

struct TraceOut {
    Var main;
    std::vector<Var> aux;
};

std::vector<int> stage_widths(const ModelConfig& cfg) {
    std::vector<int> w(static_cast<std::size_t>(cfg.depth) + 1);
    for (int i = 0; i <= cfg.depth; ++i) w[static_cast<std::size_t>(i)] = cfg.base_width << i;
    return w;
}

ResidualBlockParams make_residual_params(ParamStore& P, const std::string& name, int in_ch,
                                         int out_ch) {
    ResidualBlockParams p;
    p.gn1_gamma = P.gn_gamma(name + ".gn1.gamma", in_ch);
    p.gn1_beta = P.gn_beta(name + ".gn1.beta", in_ch);
    p.conv1 = P.conv(name + ".conv1", in_ch, out_ch, 3);
    p.gn2_gamma = P.gn_gamma(name + ".gn2.gamma", out_ch);
    p.gn2_beta = P.gn_beta(name + ".gn2.beta", out_ch);
    p.conv2 = P.conv(name + ".conv2", out_ch, out_ch, 3);
    if (in_ch != out_ch) p.projection = P.conv(name + ".proj", in_ch, out_ch, 1);
    return p;
}

InceptionBlockParams make_inception_params(ParamStore& P, const std::string& name, int in_ch,
                                           const std::array<int, 4>& widths) {
    InceptionBlockParams p;
    if (widths[0] > 0) p.b1 = P.conv(name + ".b1", in_ch, widths[0], 1);
    if (widths[1] > 0) {
        // Fetch order is part of the seeded-init contract; keep it explicit.
        ConvParams reduce = P.conv(name + ".b3.reduce", in_ch, widths[1], 1);
        ConvParams conv = P.conv(name + ".b3.conv", widths[1], widths[1], 3);
        p.b3 = std::make_pair(std::move(reduce), std::move(conv));
    }
    if (widths[2] > 0) {
        ConvParams reduce = P.conv(name + ".b5.reduce", in_ch, widths[2], 1);
        ConvParams conv = P.conv(name + ".b5.conv", widths[2], widths[2], 5);
        p.b5 = std::make_pair(std::move(reduce), std::move(conv));
    }
    if (widths[3] > 0) p.bpool = P.conv(name + ".pool", in_ch, widths[3], 1);
    return p;
}

// Stage block of the plain U-Net (run 1/2 lineage): 5x5 then 3x3 conv, each
// followed by the activation.
Var unet_block(ParamStore& P, const std::string& name, const Var& x, int in_ch, int out_ch,
               double slope) {
    ConvParams c1 = P.conv(name + ".conv1", in_ch, out_ch, 5);
    Var h = nn::leaky_relu(nn::conv2d(x, c1.w, c1.b, 2), slope);
    ConvParams c2 = P.conv(name + ".conv2", out_ch, out_ch, 3);
    return nn::leaky_relu(nn::conv2d(h, c2.w, c2.b, 1), slope);
}

// Decoder upsampling: nearest 2x followed by a 3x3 conv.
Var up_conv(ParamStore& P, const std::string& name, const Var& x, int in_ch, int out_ch,
            double slope) {
    Var u = nn::upsample_nearest2(x);
    ConvParams c = P.conv(name, in_ch, out_ch, 3);
    return nn::leaky_relu(nn::conv2d(u, c.w, c.b, 1), slope);
}

enum class BlockKind { plain, residual, inception };

Var stage_block(BlockKind kind, ParamStore& P, const std::string& name, const Var& x, int in_ch,
                int out_ch, double slope) {
    switch (kind) {
        case BlockKind::plain: return unet_block(P, name, x, in_ch, out_ch, slope);
        case BlockKind::residual:
            return residual_block(x, make_residual_params(P, name, in_ch, out_ch), 1, slope);
        case BlockKind::inception: {
            auto p = make_inception_params(P, name, in_ch, inception_branch_widths(out_ch));
            Var h = inception_block(x, p, slope);
            return nn::group_norm(h, P.gn_gamma(name + ".gn.gamma", out_ch),
                                  P.gn_beta(name + ".gn.beta", out_ch), norm_groups(out_ch));
        }
    }
    throw Error("unreachable block kind");
}

// Shared encoder-decoder skeleton for unet / leaky-unet / resunet /
// inception-unet; they differ in the stage block and bottleneck.
TraceOut run_encoder_decoder(const ModelConfig& cfg, ParamStore& P, const Var& input,
                             BlockKind kind, double slope) {
    const std::vector<int> w = stage_widths(cfg);
    std::vector<Var> skips;
    Var x = input;
    int in_ch = cfg.in_channels;
    for (int i = 0; i < cfg.depth; ++i) {
        x = stage_block(kind, P, "enc" + std::to_string(i), x, in_ch, w[i], slope);
        skips.push_back(x);
        x = nn::max_pool2(x);
        in_ch = w[i];
    }

    if (kind == BlockKind::residual) {
        // Dilated residual bottleneck.
        int bin = in_ch;
        for (std::size_t j = 0; j < cfg.dilation_rates.size(); ++j) {
            auto p = make_residual_params(P, "bottleneck.res" + std::to_string(j), bin,
                                          w[cfg.depth]);
            x = residual_block(x, p, cfg.dilation_rates[j], slope);
            bin = w[cfg.depth];
        }
    } else {
        x = stage_block(kind, P, "bottleneck", x, in_ch, w[cfg.depth], slope);
    }

    for (int i = cfg.depth - 1; i >= 0; --i) {
        x = up_conv(P, "dec" + std::to_string(i) + ".up", x, w[i + 1], w[i], slope);
        x = nn::concat_channels({skips[static_cast<std::size_t>(i)], x});
        x = stage_block(kind, P, "dec" + std::to_string(i), x, 2 * w[i], w[i], slope);
    }

    ConvParams head = P.conv("head", w[0], 1, 1);
    return {nn::conv2d(x, head.w, head.b, 0), {}};
}

TraceOut run_pranet(const ModelConfig& cfg, ParamStore& P, const Var& input) {
    const std::vector<int> w = stage_widths(cfg);
    const double slope = 0.0;
    const int d = cfg.depth;

    // Residual encoder; xs[i] sits at scale 1/2^i with width w[i].
    std::vector<Var> xs;
    Var x = residual_block(input, make_residual_params(P, "enc0", cfg.in_channels, w[0]), 1, slope);
    xs.push_back(x);
    for (int i = 1; i <= d; ++i) {
        x = residual_block(nn::max_pool2(x),
                           make_residual_params(P, "enc" + std::to_string(i), w[i - 1], w[i]), 1,
                           slope);
        xs.push_back(x);
    }

    // Parallel partial decoder over the three deepest features.
    const int pc = cfg.base_width;
    const int levels[3] = {d - 2, d - 1, d};
    const int th = xs[static_cast<std::size_t>(d - 2)].value().dim(2);
    const int tw = xs[static_cast<std::size_t>(d - 2)].value().dim(3);
    std::vector<Var> reduced;
    for (int j = 0; j < 3; ++j) {
        const int lvl = levels[j];
        ConvParams rp = P.conv("pd.reduce" + std::to_string(j), w[lvl], pc, 1);
        Var r = nn::leaky_relu(nn::conv2d(xs[static_cast<std::size_t>(lvl)], rp.w, rp.b, 0), slope);
        if (lvl != d - 2) r = nn::resize_bilinear(r, th, tw);
        reduced.push_back(r);
    }
    Var g = nn::mul(nn::mul(reduced[0], reduced[1]), reduced[2]);
    ConvParams fuse = P.conv("pd.fuse", pc, 1, 3);
    Var coarse = nn::conv2d(g, fuse.w, fuse.b, 1); // global map at scale 1/2^(d-2)

    // Reverse-attention cascade, deepest level first.
    Var s = coarse;
    std::vector<Var> maps = {coarse};
    for (int j = 0; j < 3; ++j) {
        const int lvl = levels[2 - j]; // d, d-1, d-2
        const Var& f = xs[static_cast<std::size_t>(lvl)];
        Var s_in = nn::resize_bilinear(s, f.value().dim(2), f.value().dim(3));
        ReverseAttentionParams rp;
        rp.conv1 = P.conv("ra" + std::to_string(j) + ".conv1", w[lvl], w[lvl], 3);
        rp.conv2 = P.conv("ra" + std::to_string(j) + ".conv2", w[lvl], 1, 3);
        s = reverse_attention(f, s_in, rp, slope);
        maps.push_back(s);
    }

    const int H = input.value().dim(2), W = input.value().dim(3);
    TraceOut out;
    out.main = nn::resize_bilinear(maps.back(), H, W);
    for (int j = 0; j < 3; ++j)
        out.aux.push_back(nn::resize_bilinear(maps[static_cast<std::size_t>(j)], H, W));
    return out;
}

TraceOut run_network(const ModelConfig& cfg, ParamStore& P, const Var& input) {
    switch (cfg.arch) {
        case Arch::unet: return run_encoder_decoder(cfg, P, input, BlockKind::plain, 0.0);
        case Arch::leaky_unet:
            return run_encoder_decoder(cfg, P, input, BlockKind::plain, cfg.leaky_slope);
        case Arch::resunet: return run_encoder_decoder(cfg, P, input, BlockKind::residual, 0.0);
        case Arch::inception_unet:
            return run_encoder_decoder(cfg, P, input, BlockKind::inception, 0.0);
        case Arch::pranet_lite: return run_pranet(cfg, P, input);
    }
    throw ConfigError("unknown arch");
}

void check_batch(const ModelConfig& cfg, const Tensor& batch) {
    if (batch.ndim() != 4)
        throw ShapeError("forward: batch must be N x C x H x W, got " + batch.shape_str());
    if (batch.dim(0) < 1) throw ShapeError("forward: batch must contain at least one sample");
    if (batch.dim(1) != cfg.in_channels)
        throw ShapeError("forward: batch has " + std::to_string(batch.dim(1)) +
                         " channels, config expects " + std::to_string(cfg.in_channels));
    const int div = 1 << cfg.depth;
    if (batch.dim(2) % div != 0)
        throw ShapeError("forward: height " + std::to_string(batch.dim(2)) +
                         " is not divisible by 2^depth = " + std::to_string(div));
    if (batch.dim(3) % div != 0)
        throw ShapeError("forward: width " + std::to_string(batch.dim(3)) +
                         " is not divisible by 2^depth = " + std::to_string(div));
}

} // namespace

Model build_model(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.config = cfg;
    Rng rng(static_cast<std::uint64_t>(cfg.seed));
    nn::NoGradGuard ng;
    ParamStore store(m.params, rng);
    const int s = 1 << cfg.depth;
    Tensor dummy({1, cfg.in_channels, s, s});
    run_network(cfg, store, Var::leaf(std::move(dummy)));
    return m;
}

ModelOutput forward(const Model& model, const Tensor& batch) {
    model.config.validate();
    check_batch(model.config, batch);
    nn::NoGradGuard ng;
    ParamStore store(model.params, false);
    TraceOut t = run_network(model.config, store, Var::leaf(batch));
    ModelOutput out;
    out.main = t.main.value();
    for (const Var& a : t.aux) out.aux.push_back(a.value());
    return out;
}

ModelTrace forward_trace(const Model& model, const Tensor& batch) {
    model.config.validate();
    check_batch(model.config, batch);
    ParamStore store(model.params, true);
    TraceOut t = run_network(model.config, store, Var::leaf(batch));
    ModelTrace out;
    out.main = t.main;
    out.aux = t.aux;
    out.leaves = store.take_leaves();
    return out;
}

std::size_t param_count(const Model& model) {
    std::size_t n = 0;
    for (const auto& [name, t] : model.params) n += t.numel();
    return n;
}

} // namespace polyseg

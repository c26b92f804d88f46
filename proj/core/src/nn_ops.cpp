#include "polyseg/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "polyseg/errors.hpp"

namespace polyseg::nn {

namespace {

void check_4d(const Var& x, const char* op) {
    if (x.value().ndim() != 4)
        throw ShapeError(std::string(op) + ": expected 4-d N x C x H x W input, got " +
                         x.value().shape_str());
}

bool record(std::initializer_list<const Var*> inputs) {
    if (!grad_enabled()) return false;
    for (const Var* v : inputs)
        if (v->requires_grad()) return true;
    return false;
}

Var wrap(Tensor value, bool rg, std::vector<std::shared_ptr<Node>> parents,
         std::function<void(Node&)> fn) {
    auto out = std::make_shared<Node>();
    out->value = std::move(value);
    if (rg) {
        out->requires_grad = true;
        out->parents = std::move(parents);
        out->backward = std::move(fn);
    }
    return Var(std::move(out));
}

double sigmoid_scalar(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

} // namespace

Var leaky_relu(const Var& x, double slope) {
    if (slope < 0.0) throw DomainError("leaky_relu: slope must be >= 0");
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    const double* xp = xv.data();
    double* yp = y.data();
    for (std::size_t i = 0; i < xv.numel(); ++i) yp[i] = xp[i] > 0.0 ? xp[i] : slope * xp[i];

    const bool rg = record({&x});
    auto xn = x.node();
    return wrap(std::move(y), rg, {xn}, [xn, slope](Node& self) {
        const double* g = self.grad.data();
        const double* xp2 = xn->value.data();
        double* dx = ensure_grad(*xn).data();
        for (std::size_t i = 0; i < xn->value.numel(); ++i)
            dx[i] += g[i] * (xp2[i] > 0.0 ? 1.0 : slope);
    });
}

Var sigmoid(const Var& x) {
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    const double* xp = xv.data();
    double* yp = y.data();
    for (std::size_t i = 0; i < xv.numel(); ++i) yp[i] = sigmoid_scalar(xp[i]);

    const bool rg = record({&x});
    auto xn = x.node();
    Tensor saved = rg ? y : Tensor();
    return wrap(std::move(y), rg, {xn}, [xn, saved = std::move(saved)](Node& self) {
        const double* g = self.grad.data();
        const double* s = saved.data();
        double* dx = ensure_grad(*xn).data();
        for (std::size_t i = 0; i < saved.numel(); ++i) dx[i] += g[i] * s[i] * (1.0 - s[i]);
    });
}

Var affine(const Var& x, double scale, double shift) {
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    const double* xp = xv.data();
    double* yp = y.data();
    for (std::size_t i = 0; i < xv.numel(); ++i) yp[i] = scale * xp[i] + shift;

    const bool rg = record({&x});
    auto xn = x.node();
    return wrap(std::move(y), rg, {xn}, [xn, scale](Node& self) {
        const double* g = self.grad.data();
        double* dx = ensure_grad(*xn).data();
        for (std::size_t i = 0; i < xn->value.numel(); ++i) dx[i] += scale * g[i];
    });
}

Var add(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value()))
        throw ShapeError("add: shape mismatch " + a.value().shape_str() + " vs " +
                         b.value().shape_str());
    Tensor y(a.value().shape());
    const double* ap = a.value().data();
    const double* bp = b.value().data();
    double* yp = y.data();
    for (std::size_t i = 0; i < y.numel(); ++i) yp[i] = ap[i] + bp[i];

    const bool rg = record({&a, &b});
    auto an = a.node();
    auto bn = b.node();
    return wrap(std::move(y), rg, {an, bn}, [an, bn](Node& self) {
        const double* g = self.grad.data();
        const std::size_t n = self.grad.numel();
        if (an->requires_grad) {
            double* da = ensure_grad(*an).data();
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i];
        }
        if (bn->requires_grad) {
            double* db = ensure_grad(*bn).data();
            for (std::size_t i = 0; i < n; ++i) db[i] += g[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a.value().same_shape(b.value()))
        throw ShapeError("mul: shape mismatch " + a.value().shape_str() + " vs " +
                         b.value().shape_str());
    Tensor y(a.value().shape());
    const double* ap = a.value().data();
    const double* bp = b.value().data();
    double* yp = y.data();
    for (std::size_t i = 0; i < y.numel(); ++i) yp[i] = ap[i] * bp[i];

    const bool rg = record({&a, &b});
    auto an = a.node();
    auto bn = b.node();
    return wrap(std::move(y), rg, {an, bn}, [an, bn](Node& self) {
        const double* g = self.grad.data();
        const std::size_t n = self.grad.numel();
        if (an->requires_grad) {
            double* da = ensure_grad(*an).data();
            const double* bp2 = bn->value.data();
            for (std::size_t i = 0; i < n; ++i) da[i] += g[i] * bp2[i];
        }
        if (bn->requires_grad) {
            double* db = ensure_grad(*bn).data();
            const double* ap2 = an->value.data();
            for (std::size_t i = 0; i < n; ++i) db[i] += g[i] * ap2[i];
        }
    });
}

Var scale_channels(const Var& x, const Var& gate) {
    check_4d(x, "scale_channels");
    check_4d(gate, "scale_channels");
    const Tensor& xv = x.value();
    const Tensor& gv = gate.value();
    if (gv.dim(1) != 1 || gv.dim(0) != xv.dim(0) || gv.dim(2) != xv.dim(2) ||
        gv.dim(3) != xv.dim(3))
        throw ShapeError("scale_channels: gate " + gv.shape_str() + " does not broadcast over " +
                         xv.shape_str());

    const int N = xv.dim(0), C = xv.dim(1);
    const std::size_t hw = static_cast<std::size_t>(xv.dim(2)) * xv.dim(3);
    Tensor y(xv.shape());
    for (int n = 0; n < N; ++n) {
        const double* gp = gv.data() + n * hw;
        for (int c = 0; c < C; ++c) {
            const double* xp = xv.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            double* yp = y.data() + (static_cast<std::size_t>(n) * C + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) yp[i] = xp[i] * gp[i];
        }
    }

    const bool rg = record({&x, &gate});
    auto xn = x.node();
    auto gn = gate.node();
    return wrap(std::move(y), rg, {xn, gn}, [xn, gn, N, C, hw](Node& self) {
        const double* g = self.grad.data();
        if (xn->requires_grad) {
            double* dx = ensure_grad(*xn).data();
            const double* gp = gn->value.data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) dx[off + i] += g[off + i] * gp[n * hw + i];
                }
        }
        if (gn->requires_grad) {
            double* dg = ensure_grad(*gn).data();
            const double* xp = xn->value.data();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const std::size_t off = (static_cast<std::size_t>(n) * C + c) * hw;
                    for (std::size_t i = 0; i < hw; ++i) dg[n * hw + i] += g[off + i] * xp[off + i];
                }
        }
    });
}

Var concat_channels(const std::vector<Var>& xs) {
    if (xs.empty()) throw DomainError("concat_channels: no inputs");
    for (const Var& v : xs) check_4d(v, "concat_channels");
    const Tensor& first = xs.front().value();
    const int N = first.dim(0), H = first.dim(2), W = first.dim(3);
    int C = 0;
    for (const Var& v : xs) {
        const Tensor& t = v.value();
        if (t.dim(0) != N || t.dim(2) != H || t.dim(3) != W)
            throw ShapeError("concat_channels: incompatible shapes " + first.shape_str() +
                             " vs " + t.shape_str());
        C += t.dim(1);
    }

    const std::size_t hw = static_cast<std::size_t>(H) * W;
    Tensor y({N, C, H, W});
    for (int n = 0; n < N; ++n) {
        std::size_t dst = (static_cast<std::size_t>(n) * C) * hw;
        for (const Var& v : xs) {
            const Tensor& t = v.value();
            const std::size_t chunk = static_cast<std::size_t>(t.dim(1)) * hw;
            std::copy_n(t.data() + static_cast<std::size_t>(n) * chunk, chunk, y.data() + dst);
            dst += chunk;
        }
    }

    bool rg = false;
    if (grad_enabled())
        for (const Var& v : xs) rg = rg || v.requires_grad();
    std::vector<std::shared_ptr<Node>> parents;
    parents.reserve(xs.size());
    for (const Var& v : xs) parents.push_back(v.node());
    auto nodes = parents;
    return wrap(std::move(y), rg, std::move(parents), [nodes, N, C, hw](Node& self) {
        const double* g = self.grad.data();
        for (int n = 0; n < N; ++n) {
            std::size_t src = (static_cast<std::size_t>(n) * C) * hw;
            for (const auto& p : nodes) {
                const std::size_t chunk = static_cast<std::size_t>(p->value.dim(1)) * hw;
                if (p->requires_grad) {
                    double* dp = ensure_grad(*p).data() + static_cast<std::size_t>(n) * chunk;
                    for (std::size_t i = 0; i < chunk; ++i) dp[i] += g[src + i];
                }
                src += chunk;
            }
        }
    });
}

namespace {

Tensor conv2d_forward(const Tensor& x, const Tensor& w, const Tensor& b, int pad, int dil) {
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), k = w.dim(2);
    const int OH = H + 2 * pad - dil * (k - 1);
    const int OW = W + 2 * pad - dil * (k - 1);
    if (OH <= 0 || OW <= 0)
        throw ShapeError("conv2d: kernel does not fit input " + x.shape_str());

    Tensor y({N, Co, OH, OW});
    const std::size_t ohw = static_cast<std::size_t>(OH) * OW;

#pragma omp parallel for schedule(static) if (N * Co > 1)
    for (int nco = 0; nco < N * Co; ++nco) {
        const int n = nco / Co;
        const int co = nco % Co;
        double* yp = y.data() + static_cast<std::size_t>(nco) * ohw;
        std::fill_n(yp, ohw, b[static_cast<std::size_t>(co)]);
        for (int ci = 0; ci < Ci; ++ci) {
            const double* xplane = x.data() + (static_cast<std::size_t>(n) * Ci + ci) *
                                                  static_cast<std::size_t>(H) * W;
            const double* wk =
                w.data() + (static_cast<std::size_t>(co) * Ci + ci) * static_cast<std::size_t>(k) * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const double wv = wk[ky * k + kx];
                    const int sy = ky * dil - pad; // iy = oy + sy
                    const int sx = kx * dil - pad; // ix = ox + sx
                    const int oy0 = std::max(0, -sy), oy1 = std::min(OH, H - sy);
                    const int ox0 = std::max(0, -sx), ox1 = std::min(OW, W - sx);
                    for (int oy = oy0; oy < oy1; ++oy) {
                        const double* xrow = xplane + static_cast<std::size_t>(oy + sy) * W + sx;
                        double* yrow = yp + static_cast<std::size_t>(oy) * OW;
                        for (int ox = ox0; ox < ox1; ++ox) yrow[ox] += wv * xrow[ox];
                    }
                }
        }
    }
    return y;
}

void conv2d_backward(const Tensor& gy, const Tensor& x, const Tensor& w, int pad, int dil,
                     Tensor* dx, Tensor* dw, Tensor* db) {
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), k = w.dim(2);
    const int OH = gy.dim(2), OW = gy.dim(3);
    const std::size_t ohw = static_cast<std::size_t>(OH) * OW;
    const std::size_t ihw = static_cast<std::size_t>(H) * W;

    if (db) {
        double* dbp = db->data();
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co) {
                const double* gp = gy.data() + (static_cast<std::size_t>(n) * Co + co) * ohw;
                double acc = 0.0;
                for (std::size_t i = 0; i < ohw; ++i) acc += gp[i];
                dbp[co] += acc;
            }
    }

    if (dw) {
#pragma omp parallel for schedule(static) if (Co * Ci > 1)
        for (int cc = 0; cc < Co * Ci; ++cc) {
            const int co = cc / Ci;
            const int ci = cc % Ci;
            double* dwk = dw->data() + static_cast<std::size_t>(cc) * k * k;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const int sy = ky * dil - pad;
                    const int sx = kx * dil - pad;
                    const int oy0 = std::max(0, -sy), oy1 = std::min(OH, H - sy);
                    const int ox0 = std::max(0, -sx), ox1 = std::min(OW, W - sx);
                    double acc = 0.0;
                    for (int n = 0; n < N; ++n) {
                        const double* gp = gy.data() + (static_cast<std::size_t>(n) * Co + co) * ohw;
                        const double* xplane =
                            x.data() + (static_cast<std::size_t>(n) * Ci + ci) * ihw;
                        for (int oy = oy0; oy < oy1; ++oy) {
                            const double* xrow =
                                xplane + static_cast<std::size_t>(oy + sy) * W + sx;
                            const double* grow = gp + static_cast<std::size_t>(oy) * OW;
                            for (int ox = ox0; ox < ox1; ++ox) acc += grow[ox] * xrow[ox];
                        }
                    }
                    dwk[ky * k + kx] += acc;
                }
        }
    }

    if (dx) {
#pragma omp parallel for schedule(static) if (N * Ci > 1)
        for (int nci = 0; nci < N * Ci; ++nci) {
            const int n = nci / Ci;
            const int ci = nci % Ci;
            double* dxplane = dx->data() + static_cast<std::size_t>(nci) * ihw;
            for (int co = 0; co < Co; ++co) {
                const double* gp = gy.data() + (static_cast<std::size_t>(n) * Co + co) * ohw;
                const double* wk = w.data() + (static_cast<std::size_t>(co) * Ci + ci) *
                                                  static_cast<std::size_t>(k) * k;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const double wv = wk[ky * k + kx];
                        const int sy = ky * dil - pad;
                        const int sx = kx * dil - pad;
                        const int oy0 = std::max(0, -sy), oy1 = std::min(OH, H - sy);
                        const int ox0 = std::max(0, -sx), ox1 = std::min(OW, W - sx);
                        for (int oy = oy0; oy < oy1; ++oy) {
                            double* dxrow = dxplane + static_cast<std::size_t>(oy + sy) * W + sx;
                            const double* grow = gp + static_cast<std::size_t>(oy) * OW;
                            for (int ox = ox0; ox < ox1; ++ox) dxrow[ox] += wv * grow[ox];
                        }
                    }
            }
        }
    }
}

} // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int pad, int dilation) {
    check_4d(x, "conv2d");
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    if (wv.ndim() != 4 || wv.dim(2) != wv.dim(3))
        throw ShapeError("conv2d: weight must be Co x Ci x k x k, got " + wv.shape_str());
    if (xv.dim(1) != wv.dim(1))
        throw ShapeError("conv2d: input channels " + std::to_string(xv.dim(1)) +
                         " do not match weight channels " + std::to_string(wv.dim(1)));
    if (bv.ndim() != 1 || bv.dim(0) != wv.dim(0))
        throw ShapeError("conv2d: bias must have shape {Co}");
    if (pad < 0 || dilation < 1) throw DomainError("conv2d: pad >= 0 and dilation >= 1 required");

    Tensor y = conv2d_forward(xv, wv, bv, pad, dilation);

    const bool rg = record({&x, &w, &b});
    auto xn = x.node();
    auto wn = w.node();
    auto bn = b.node();
    return wrap(std::move(y), rg, {xn, wn, bn}, [xn, wn, bn, pad, dilation](Node& self) {
        Tensor* dx = xn->requires_grad ? &ensure_grad(*xn) : nullptr;
        Tensor* dw = wn->requires_grad ? &ensure_grad(*wn) : nullptr;
        Tensor* db = bn->requires_grad ? &ensure_grad(*bn) : nullptr;
        conv2d_backward(self.grad, xn->value, wn->value, pad, dilation, dx, dw, db);
    });
}

Var max_pool2(const Var& x) {
    check_4d(x, "max_pool2");
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw ShapeError("max_pool2: H and W must be even, got " + xv.shape_str());
    const int OH = H / 2, OW = W / 2;

    Tensor y({N, C, OH, OW});
    std::vector<std::int32_t> argmax(y.numel());
    const std::size_t planes = static_cast<std::size_t>(N) * C;
    for (std::size_t p = 0; p < planes; ++p) {
        const double* xp = xv.data() + p * H * W;
        double* yp = y.data() + p * OH * OW;
        std::int32_t* am = argmax.data() + p * OH * OW;
        for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
                int best = (2 * oy) * W + 2 * ox;
                double bv = xp[best];
                // first max in scan order wins ties
                const int cands[3] = {(2 * oy) * W + 2 * ox + 1, (2 * oy + 1) * W + 2 * ox,
                                      (2 * oy + 1) * W + 2 * ox + 1};
                for (int idx : cands)
                    if (xp[idx] > bv) {
                        bv = xp[idx];
                        best = idx;
                    }
                yp[oy * OW + ox] = bv;
                am[oy * OW + ox] = best;
            }
    }

    const bool rg = record({&x});
    auto xn = x.node();
    std::vector<std::int32_t> saved = rg ? std::move(argmax) : std::vector<std::int32_t>();
    const std::size_t ohw = static_cast<std::size_t>(OH) * OW;
    const std::size_t ihw = static_cast<std::size_t>(H) * W;
    return wrap(std::move(y), rg, {xn}, [xn, saved = std::move(saved), planes, ohw, ihw](Node& self) {
        const double* g = self.grad.data();
        double* dx = ensure_grad(*xn).data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < ohw; ++i)
                dx[p * ihw + saved[p * ohw + i]] += g[p * ohw + i];
    });
}

Var max_pool3_same(const Var& x) {
    check_4d(x, "max_pool3_same");
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);

    Tensor y(xv.shape());
    std::vector<std::int32_t> argmax(y.numel());
    const std::size_t planes = static_cast<std::size_t>(N) * C;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    for (std::size_t p = 0; p < planes; ++p) {
        const double* xp = xv.data() + p * hw;
        double* yp = y.data() + p * hw;
        std::int32_t* am = argmax.data() + p * hw;
        for (int oy = 0; oy < H; ++oy)
            for (int ox = 0; ox < W; ++ox) {
                int best = -1;
                double bv = 0.0;
                for (int dy = -1; dy <= 1; ++dy) {
                    const int iy = oy + dy;
                    if (iy < 0 || iy >= H) continue;
                    for (int dx = -1; dx <= 1; ++dx) {
                        const int ix = ox + dx;
                        if (ix < 0 || ix >= W) continue;
                        const int idx = iy * W + ix;
                        if (best < 0 || xp[idx] > bv) {
                            bv = xp[idx];
                            best = idx;
                        }
                    }
                }
                yp[oy * W + ox] = bv;
                am[oy * W + ox] = best;
            }
    }

    const bool rg = record({&x});
    auto xn = x.node();
    std::vector<std::int32_t> saved = rg ? std::move(argmax) : std::vector<std::int32_t>();
    return wrap(std::move(y), rg, {xn}, [xn, saved = std::move(saved), planes, hw](Node& self) {
        const double* g = self.grad.data();
        double* dx = ensure_grad(*xn).data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t i = 0; i < hw; ++i) dx[p * hw + saved[p * hw + i]] += g[p * hw + i];
    });
}

Var upsample_nearest2(const Var& x) {
    check_4d(x, "upsample_nearest2");
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const int OH = 2 * H, OW = 2 * W;

    Tensor y({N, C, OH, OW});
    const std::size_t planes = static_cast<std::size_t>(N) * C;
    for (std::size_t p = 0; p < planes; ++p) {
        const double* xp = xv.data() + p * H * W;
        double* yp = y.data() + p * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
            const double* xrow = xp + (oy / 2) * W;
            double* yrow = yp + static_cast<std::size_t>(oy) * OW;
            for (int ox = 0; ox < OW; ++ox) yrow[ox] = xrow[ox / 2];
        }
    }

    const bool rg = record({&x});
    auto xn = x.node();
    return wrap(std::move(y), rg, {xn}, [xn, planes, H, W, OH, OW](Node& self) {
        const double* g = self.grad.data();
        double* dx = ensure_grad(*xn).data();
        for (std::size_t p = 0; p < planes; ++p) {
            const double* gp = g + p * OH * OW;
            double* dxp = dx + p * H * W;
            for (int oy = 0; oy < OH; ++oy)
                for (int ox = 0; ox < OW; ++ox) dxp[(oy / 2) * W + ox / 2] += gp[oy * OW + ox];
        }
    });
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
    check_4d(x, "resize_bilinear");
    if (out_h < 1 || out_w < 1) throw ShapeError("resize_bilinear: output dims must be >= 1");
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);

    // Precompute the sampling lattice once per call.
    struct Lattice {
        std::vector<int> i0, i1;
        std::vector<double> w1; // weight of i1; i0 gets (1 - w1)
    };
    auto make_lattice = [](int in, int out) {
        Lattice l;
        l.i0.resize(out);
        l.i1.resize(out);
        l.w1.resize(out);
        const double scale = static_cast<double>(in) / out;
        for (int o = 0; o < out; ++o) {
            double src = (o + 0.5) * scale - 0.5;
            if (src < 0.0) src = 0.0;
            if (src > in - 1) src = in - 1;
            const int lo = static_cast<int>(src);
            l.i0[o] = lo;
            l.i1[o] = std::min(lo + 1, in - 1);
            l.w1[o] = src - lo;
        }
        return l;
    };
    const Lattice ly = make_lattice(H, out_h);
    const Lattice lx = make_lattice(W, out_w);

    Tensor y({N, C, out_h, out_w});
    const std::size_t planes = static_cast<std::size_t>(N) * C;
    for (std::size_t p = 0; p < planes; ++p) {
        const double* xp = xv.data() + p * H * W;
        double* yp = y.data() + p * static_cast<std::size_t>(out_h) * out_w;
        for (int oy = 0; oy < out_h; ++oy) {
            const double* r0 = xp + ly.i0[oy] * W;
            const double* r1 = xp + ly.i1[oy] * W;
            const double wy = ly.w1[oy];
            double* yrow = yp + static_cast<std::size_t>(oy) * out_w;
            for (int ox = 0; ox < out_w; ++ox) {
                const double wx = lx.w1[ox];
                const double top = r0[lx.i0[ox]] * (1.0 - wx) + r0[lx.i1[ox]] * wx;
                const double bot = r1[lx.i0[ox]] * (1.0 - wx) + r1[lx.i1[ox]] * wx;
                yrow[ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }

    const bool rg = record({&x});
    auto xn = x.node();
    return wrap(std::move(y), rg, {xn},
                [xn, ly, lx, planes, H, W, out_h, out_w](Node& self) {
                    const double* g = self.grad.data();
                    double* dx = ensure_grad(*xn).data();
                    for (std::size_t p = 0; p < planes; ++p) {
                        const double* gp = g + p * static_cast<std::size_t>(out_h) * out_w;
                        double* dxp = dx + p * H * W;
                        for (int oy = 0; oy < out_h; ++oy) {
                            const double wy = ly.w1[oy];
                            for (int ox = 0; ox < out_w; ++ox) {
                                const double wx = lx.w1[ox];
                                const double gv = gp[oy * out_w + ox];
                                dxp[ly.i0[oy] * W + lx.i0[ox]] += gv * (1.0 - wy) * (1.0 - wx);
                                dxp[ly.i0[oy] * W + lx.i1[ox]] += gv * (1.0 - wy) * wx;
                                dxp[ly.i1[oy] * W + lx.i0[ox]] += gv * wy * (1.0 - wx);
                                dxp[ly.i1[oy] * W + lx.i1[ox]] += gv * wy * wx;
                            }
                        }
                    }
                });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    check_4d(x, "group_norm");
    const Tensor& xv = x.value();
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (groups < 1 || C % groups != 0)
        throw ShapeError("group_norm: groups must divide channel count " + std::to_string(C));
    if (gamma.value().ndim() != 1 || gamma.value().dim(0) != C || beta.value().ndim() != 1 ||
        beta.value().dim(0) != C)
        throw ShapeError("group_norm: gamma/beta must have shape {C}");

    const int cg = C / groups;
    const std::size_t hw = static_cast<std::size_t>(H) * W;
    const std::size_t m = static_cast<std::size_t>(cg) * hw;

    Tensor y(xv.shape());
    Tensor mean({N, groups});
    Tensor invstd({N, groups});
    const double* gp = gamma.value().data();
    const double* bp = beta.value().data();
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const double* xg =
                xv.data() + (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(g) * cg) * hw;
            double mu = 0.0;
            for (std::size_t i = 0; i < m; ++i) mu += xg[i];
            mu /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const double d = xg[i] - mu;
                var += d * d;
            }
            var /= static_cast<double>(m);
            const double is = 1.0 / std::sqrt(var + eps);
            mean.at(n, g) = mu;
            invstd.at(n, g) = is;
            double* yg =
                y.data() + (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(g) * cg) * hw;
            for (int c = 0; c < cg; ++c) {
                const double ga = gp[g * cg + c];
                const double be = bp[g * cg + c];
                for (std::size_t i = 0; i < hw; ++i)
                    yg[c * hw + i] = ga * ((xg[c * hw + i] - mu) * is) + be;
            }
        }

    const bool rg = record({&x, &gamma, &beta});
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return wrap(std::move(y), rg, {xn, gn, bn},
                [xn, gn, bn, mean = std::move(mean), invstd = std::move(invstd), N, C, groups, cg,
                 hw, m](Node& self) {
                    const double* g = self.grad.data();
                    const double* xp = xn->value.data();
                    const double* gam = gn->value.data();
                    double* dgam = gn->requires_grad ? ensure_grad(*gn).data() : nullptr;
                    double* dbet = bn->requires_grad ? ensure_grad(*bn).data() : nullptr;
                    double* dx = xn->requires_grad ? ensure_grad(*xn).data() : nullptr;

                    for (int n = 0; n < N; ++n)
                        for (int grp = 0; grp < groups; ++grp) {
                            const std::size_t base =
                                (static_cast<std::size_t>(n) * C + static_cast<std::size_t>(grp) * cg) *
                                hw;
                            const double mu = mean.at(n, grp);
                            const double is = invstd.at(n, grp);

                            if (dgam || dbet) {
                                for (int c = 0; c < cg; ++c) {
                                    double sg = 0.0, sb = 0.0;
                                    for (std::size_t i = 0; i < hw; ++i) {
                                        const std::size_t k = base + c * hw + i;
                                        sg += g[k] * ((xp[k] - mu) * is);
                                        sb += g[k];
                                    }
                                    if (dgam) dgam[grp * cg + c] += sg;
                                    if (dbet) dbet[grp * cg + c] += sb;
                                }
                            }
                            if (dx) {
                                // dx = is * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                                double s1 = 0.0, s2 = 0.0;
                                for (int c = 0; c < cg; ++c) {
                                    const double ga = gam[grp * cg + c];
                                    for (std::size_t i = 0; i < hw; ++i) {
                                        const std::size_t k = base + c * hw + i;
                                        const double dxh = g[k] * ga;
                                        s1 += dxh;
                                        s2 += dxh * ((xp[k] - mu) * is);
                                    }
                                }
                                const double inv_m = 1.0 / static_cast<double>(m);
                                for (int c = 0; c < cg; ++c) {
                                    const double ga = gam[grp * cg + c];
                                    for (std::size_t i = 0; i < hw; ++i) {
                                        const std::size_t k = base + c * hw + i;
                                        const double xh = (xp[k] - mu) * is;
                                        const double dxh = g[k] * ga;
                                        dx[k] += is * (dxh - s1 * inv_m - xh * s2 * inv_m);
                                    }
                                }
                            }
                        }
                });
}

Var sum_all(const Var& x) {
    const Tensor& xv = x.value();
    double s = 0.0;
    const double* xp = xv.data();
    for (std::size_t i = 0; i < xv.numel(); ++i) s += xp[i];
    Tensor y = Tensor::from_data({1}, {s});

    const bool rg = record({&x});
    auto xn = x.node();
    return wrap(std::move(y), rg, {xn}, [xn](Node& self) {
        const double g = self.grad[0];
        double* dx = ensure_grad(*xn).data();
        for (std::size_t i = 0; i < xn->value.numel(); ++i) dx[i] += g;
    });
}

Var bce_with_logits_mean(const Var& logits, const Tensor& truth) {
    const Tensor& z = logits.value();
    if (!z.same_shape(truth))
        throw ShapeError("bce_with_logits_mean: logits " + z.shape_str() + " vs truth " +
                         truth.shape_str());
    const std::size_t n = z.numel();
    if (n == 0) throw DomainError("bce_with_logits_mean: empty input");

    const double* zp = z.data();
    const double* tp = truth.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        // max(z,0) - z*t + log(1 + exp(-|z|))
        acc += std::max(zp[i], 0.0) - zp[i] * tp[i] + std::log1p(std::exp(-std::abs(zp[i])));
    }
    Tensor y = Tensor::from_data({1}, {acc / static_cast<double>(n)});

    const bool rg = record({&logits});
    auto zn = logits.node();
    Tensor saved_truth = rg ? truth : Tensor();
    return wrap(std::move(y), rg, {zn}, [zn, saved_truth = std::move(saved_truth), n](Node& self) {
        const double g = self.grad[0] / static_cast<double>(n);
        const double* zp2 = zn->value.data();
        const double* tp2 = saved_truth.data();
        double* dz = ensure_grad(*zn).data();
        for (std::size_t i = 0; i < n; ++i) dz[i] += g * (sigmoid_scalar(zp2[i]) - tp2[i]);
    });
}

Var dice_loss(const Var& logits, const Tensor& truth, double eps) {
    const Tensor& z = logits.value();
    if (!z.same_shape(truth))
        throw ShapeError("dice_loss: logits " + z.shape_str() + " vs truth " + truth.shape_str());
    const std::size_t n = z.numel();
    if (n == 0) throw DomainError("dice_loss: empty input");

    const double* zp = z.data();
    const double* tp = truth.data();
    double sum_pt = 0.0, sum_p = 0.0, sum_t = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = sigmoid_scalar(zp[i]);
        sum_pt += p * tp[i];
        sum_p += p;
        sum_t += tp[i];
    }
    const double A = 2.0 * sum_pt + eps;
    const double B = sum_p + sum_t + eps;
    Tensor y = Tensor::from_data({1}, {1.0 - A / B});

    const bool rg = record({&logits});
    auto zn = logits.node();
    Tensor saved_truth = rg ? truth : Tensor();
    return wrap(std::move(y), rg, {zn},
                [zn, saved_truth = std::move(saved_truth), n, A, B](Node& self) {
                    const double g = self.grad[0];
                    const double* zp2 = zn->value.data();
                    const double* tp2 = saved_truth.data();
                    double* dz = ensure_grad(*zn).data();
                    const double inv_b2 = 1.0 / (B * B);
                    for (std::size_t i = 0; i < n; ++i) {
                        const double p = sigmoid_scalar(zp2[i]);
                        const double dldp = -(2.0 * tp2[i] * B - A) * inv_b2;
                        dz[i] += g * dldp * p * (1.0 - p);
                    }
                });
}

} // namespace polyseg::nn

#include "multinet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

namespace multinet::nn {

namespace {

std::string shape_str(const Tensor& t) {
    std::string s = "(";
    for (std::size_t i = 0; i < t.rank(); ++i) {
        if (i) s += "x";
        s += std::to_string(t.dim(i));
    }
    return s + ")";
}

} // namespace

// ---------------------------------------------------------------------------
// Init

ConvParams make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t kh, std::size_t kw, Rng& rng) {
    ConvParams p;
    p.kernels = Tensor({out_ch, in_ch, kh, kw});
    p.bias = Tensor({out_ch});
    const double bound = std::sqrt(1.0 / static_cast<double>(in_ch * kh * kw));
    for (std::size_t i = 0; i < p.kernels.size(); ++i) p.kernels[i] = rng.uniform(-bound, bound);
    for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] = rng.uniform(-bound, bound);
    return p;
}

BatchNormParams make_batchnorm(std::size_t channels) {
    BatchNormParams p;
    p.gamma = Tensor({channels});
    p.beta = Tensor({channels});
    p.running_mean = Tensor({channels});
    p.running_var = Tensor({channels});
    p.gamma.fill(1.0);
    p.running_var.fill(1.0);
    return p;
}

LinearParams make_linear(std::size_t out, std::size_t in, Rng& rng) {
    LinearParams p;
    p.weight = Tensor({out, in});
    p.bias = Tensor({out});
    const double bound = std::sqrt(1.0 / static_cast<double>(in));
    for (std::size_t i = 0; i < p.weight.size(); ++i) p.weight[i] = rng.uniform(-bound, bound);
    for (std::size_t i = 0; i < p.bias.size(); ++i) p.bias[i] = rng.uniform(-bound, bound);
    return p;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

void check_conv_shapes(const Tensor& input, const ConvParams& params, int stride, int pad) {
    if (input.rank() != 3)
        throw DataError("conv2d: input must be CHW, got rank " + std::to_string(input.rank()));
    if (params.kernels.rank() != 4)
        throw DataError("conv2d: kernels must be (oc,ic,kh,kw), got rank " +
                        std::to_string(params.kernels.rank()));
    if (input.dim(0) != params.kernels.dim(1))
        throw DataError("conv2d: input channels " + std::to_string(input.dim(0)) +
                        " != kernel in-channels " + std::to_string(params.kernels.dim(1)));
    if (params.bias.size() != params.kernels.dim(0))
        throw DataError("conv2d: bias size " + std::to_string(params.bias.size()) +
                        " != out-channels " + std::to_string(params.kernels.dim(0)));
    if (stride < 1) throw DataError("conv2d: stride must be >= 1");
    if (pad < 0) throw DataError("conv2d: padding must be >= 0");
    const long oh = (static_cast<long>(input.dim(1)) + 2 * pad - static_cast<long>(params.kernels.dim(2))) / stride + 1;
    const long ow = (static_cast<long>(input.dim(2)) + 2 * pad - static_cast<long>(params.kernels.dim(3))) / stride + 1;
    if (oh < 1 || ow < 1)
        throw DataError("conv2d: output spatial dims " + std::to_string(oh) + "x" + std::to_string(ow) +
                        " < 1 for input " + shape_str(input));
}

} // namespace

Tensor conv2d_forward(const Tensor& input, const ConvParams& params, int stride, int pad) {
    check_conv_shapes(input, params, stride, pad);
    const long IC = static_cast<long>(input.dim(0));
    const long H = static_cast<long>(input.dim(1));
    const long W = static_cast<long>(input.dim(2));
    const long OC = static_cast<long>(params.kernels.dim(0));
    const long KH = static_cast<long>(params.kernels.dim(2));
    const long KW = static_cast<long>(params.kernels.dim(3));
    const long OH = (H + 2 * pad - KH) / stride + 1;
    const long OW = (W + 2 * pad - KW) / stride + 1;

    Tensor out({static_cast<std::size_t>(OC), static_cast<std::size_t>(OH), static_cast<std::size_t>(OW)});
    const double* in = input.data();
    const double* ker = params.kernels.data();
    double* o = out.data();

    for (long oc = 0; oc < OC; ++oc) {
        double* oplane = o + oc * OH * OW;
        const double b = params.bias[static_cast<std::size_t>(oc)];
        std::fill(oplane, oplane + OH * OW, b);
        for (long ic = 0; ic < IC; ++ic) {
            const double* iplane = in + ic * H * W;
            const double* kplane = ker + (oc * IC + ic) * KH * KW;
            for (long kh = 0; kh < KH; ++kh) {
                for (long kw = 0; kw < KW; ++kw) {
                    const double w = kplane[kh * KW + kw];
                    if (w == 0.0) continue;
                    for (long oh = 0; oh < OH; ++oh) {
                        const long ih = oh * stride - pad + kh;
                        if (ih < 0 || ih >= H) continue;
                        // valid ow range: 0 <= ow*stride - pad + kw < W
                        long lo = 0, hi = OW - 1;
                        if (stride == 1) {
                            lo = std::max<long>(0, pad - kw);
                            hi = std::min<long>(OW - 1, W - 1 - kw + pad);
                        } else {
                            while (lo <= hi && lo * stride - pad + kw < 0) ++lo;
                            while (hi >= lo && hi * stride - pad + kw >= W) --hi;
                        }
                        const double* irow = iplane + ih * W - pad + kw;
                        double* orow = oplane + oh * OW;
                        if (stride == 1) {
                            for (long ow = lo; ow <= hi; ++ow) orow[ow] += w * irow[ow];
                        } else {
                            for (long ow = lo; ow <= hi; ++ow) orow[ow] += w * irow[ow * stride];
                        }
                    }
                }
            }
        }
    }
    return out;
}

ConvGrads conv2d_backward(const Tensor& input, const ConvParams& params, int stride, int pad,
                          const Tensor& d_output, bool want_d_input) {
    check_conv_shapes(input, params, stride, pad);
    const long IC = static_cast<long>(input.dim(0));
    const long H = static_cast<long>(input.dim(1));
    const long W = static_cast<long>(input.dim(2));
    const long OC = static_cast<long>(params.kernels.dim(0));
    const long KH = static_cast<long>(params.kernels.dim(2));
    const long KW = static_cast<long>(params.kernels.dim(3));
    const long OH = (H + 2 * pad - KH) / stride + 1;
    const long OW = (W + 2 * pad - KW) / stride + 1;
    if (d_output.rank() != 3 || d_output.dim(0) != static_cast<std::size_t>(OC) ||
        d_output.dim(1) != static_cast<std::size_t>(OH) || d_output.dim(2) != static_cast<std::size_t>(OW))
        throw DataError("conv2d backward: upstream gradient shape " + shape_str(d_output) +
                        " does not match forward output");

    ConvGrads g;
    g.d_kernels = Tensor::zeros_like(params.kernels);
    g.d_bias = Tensor::zeros_like(params.bias);
    if (want_d_input) g.d_input = Tensor::zeros_like(input);

    const double* in = input.data();
    const double* dy = d_output.data();
    const double* ker = params.kernels.data();

    for (long oc = 0; oc < OC; ++oc) {
        const double* dyplane = dy + oc * OH * OW;
        double bsum = 0.0;
        for (long i = 0; i < OH * OW; ++i) bsum += dyplane[i];
        g.d_bias[static_cast<std::size_t>(oc)] = bsum;

        for (long ic = 0; ic < IC; ++ic) {
            const double* iplane = in + ic * H * W;
            const double* kplane = ker + (oc * IC + ic) * KH * KW;
            double* dkplane = g.d_kernels.data() + (oc * IC + ic) * KH * KW;
            double* dxplane = want_d_input ? g.d_input.data() + ic * H * W : nullptr;
            for (long kh = 0; kh < KH; ++kh) {
                for (long kw = 0; kw < KW; ++kw) {
                    double wsum = 0.0;
                    const double w = kplane[kh * KW + kw];
                    for (long oh = 0; oh < OH; ++oh) {
                        const long ih = oh * stride - pad + kh;
                        if (ih < 0 || ih >= H) continue;
                        long lo = 0, hi = OW - 1;
                        if (stride == 1) {
                            lo = std::max<long>(0, pad - kw);
                            hi = std::min<long>(OW - 1, W - 1 - kw + pad);
                        } else {
                            while (lo <= hi && lo * stride - pad + kw < 0) ++lo;
                            while (hi >= lo && hi * stride - pad + kw >= W) --hi;
                        }
                        const double* irow = iplane + ih * W - pad + kw;
                        const double* dyrow = dyplane + oh * OW;
                        if (stride == 1) {
                            for (long ow = lo; ow <= hi; ++ow) wsum += dyrow[ow] * irow[ow];
                        } else {
                            for (long ow = lo; ow <= hi; ++ow) wsum += dyrow[ow] * irow[ow * stride];
                        }
                        if (want_d_input && w != 0.0) {
                            double* dxrow = dxplane + ih * W - pad + kw;
                            if (stride == 1) {
                                for (long ow = lo; ow <= hi; ++ow) dxrow[ow] += w * dyrow[ow];
                            } else {
                                for (long ow = lo; ow <= hi; ++ow) dxrow[ow * stride] += w * dyrow[ow];
                            }
                        }
                    }
                    dkplane[kh * KW + kw] += wsum;
                }
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Max pooling

PoolResult maxpool2_forward(const Tensor& input, PoolOddDim policy) {
    if (input.rank() != 3) throw DataError("maxpool2: input must be CHW");
    const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
    if (policy == PoolOddDim::reject && (H % 2 != 0 || W % 2 != 0))
        throw DataError("maxpool2: odd spatial dimension " + std::to_string(H) + "x" + std::to_string(W) +
                        " (floor_drop policy required to pool odd maps)");
    const std::size_t OH = H / 2, OW = W / 2;
    if (OH == 0 || OW == 0) throw DataError("maxpool2: input too small " + shape_str(input));

    PoolResult r;
    r.output = Tensor({C, OH, OW});
    r.argmax.resize(C * OH * OW);
    const double* in = input.data();
    for (std::size_t c = 0; c < C; ++c) {
        const double* iplane = in + c * H * W;
        for (std::size_t oh = 0; oh < OH; ++oh) {
            for (std::size_t ow = 0; ow < OW; ++ow) {
                const std::size_t h0 = oh * 2, w0 = ow * 2;
                // first-index tie break: strictly-greater replacement
                std::size_t best = h0 * W + w0;
                double bv = iplane[best];
                const std::size_t cand[3] = {h0 * W + w0 + 1, (h0 + 1) * W + w0, (h0 + 1) * W + w0 + 1};
                for (std::size_t idx : cand) {
                    if (iplane[idx] > bv) {
                        bv = iplane[idx];
                        best = idx;
                    }
                }
                r.output.at3(c, oh, ow) = bv;
                r.argmax[(c * OH + oh) * OW + ow] = static_cast<std::uint32_t>(best);
            }
        }
    }
    return r;
}

Tensor maxpool2_backward(const Tensor& input, const PoolResult& fwd, const Tensor& d_output) {
    const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
    if (!d_output.same_shape(fwd.output))
        throw DataError("maxpool2 backward: gradient shape mismatch");
    Tensor dx({C, H, W});
    const std::size_t OH = fwd.output.dim(1), OW = fwd.output.dim(2);
    for (std::size_t c = 0; c < C; ++c) {
        double* dxplane = dx.data() + c * H * W;
        const double* dyplane = d_output.data() + c * OH * OW;
        const std::uint32_t* am = fwd.argmax.data() + c * OH * OW;
        for (std::size_t i = 0; i < OH * OW; ++i) dxplane[am[i]] += dyplane[i];
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization

std::vector<Tensor> batchnorm_forward(const std::vector<Tensor>& input, BatchNormParams& params,
                                      bool training, double momentum, double eps,
                                      BatchNormCache* cache) {
    if (input.empty()) throw DataError("batchnorm: empty batch");
    const std::size_t C = input[0].dim(0);
    if (params.gamma.size() != C)
        throw DataError("batchnorm: channel count " + std::to_string(C) + " != gamma size " +
                        std::to_string(params.gamma.size()));
    for (const Tensor& t : input)
        if (!t.same_shape(input[0])) throw DataError("batchnorm: ragged batch shapes");

    const std::size_t N = input.size();
    const std::size_t HW = input[0].dim(1) * input[0].dim(2);
    std::vector<Tensor> out;
    out.reserve(N);

    if (training) {
        if (N < 2) throw TrainError("batchnorm: train mode requires batch size >= 2, got 1");
        std::vector<double> mean(C, 0.0), var(C, 0.0);
        const double inv_count = 1.0 / static_cast<double>(N * HW);
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const double* p = input[n].data() + c * HW;
                for (std::size_t i = 0; i < HW; ++i) s += p[i];
            }
            mean[c] = s * inv_count;
            double v = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const double* p = input[n].data() + c * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const double d = p[i] - mean[c];
                    v += d * d;
                }
            }
            var[c] = v * inv_count; // biased
        }
        for (std::size_t c = 0; c < C; ++c) {
            params.running_mean[c] = (1.0 - momentum) * params.running_mean[c] + momentum * mean[c];
            params.running_var[c] = (1.0 - momentum) * params.running_var[c] + momentum * var[c];
        }
        if (cache) {
            cache->mean = mean;
            cache->var = var;
            cache->x_hat.clear();
            cache->x_hat.reserve(N);
        }
        for (std::size_t n = 0; n < N; ++n) {
            Tensor y = Tensor::zeros_like(input[n]);
            Tensor xh = Tensor::zeros_like(input[n]);
            for (std::size_t c = 0; c < C; ++c) {
                const double inv_sd = 1.0 / std::sqrt(var[c] + eps);
                const double g = params.gamma[c], b = params.beta[c], m = mean[c];
                const double* p = input[n].data() + c * HW;
                double* yp = y.data() + c * HW;
                double* xp = xh.data() + c * HW;
                for (std::size_t i = 0; i < HW; ++i) {
                    const double v = (p[i] - m) * inv_sd;
                    xp[i] = v;
                    yp[i] = g * v + b;
                }
            }
            if (cache) cache->x_hat.push_back(std::move(xh));
            out.push_back(std::move(y));
        }
    } else {
        for (std::size_t n = 0; n < N; ++n) {
            Tensor y = Tensor::zeros_like(input[n]);
            for (std::size_t c = 0; c < C; ++c) {
                const double inv_sd = 1.0 / std::sqrt(params.running_var[c] + eps);
                const double g = params.gamma[c], b = params.beta[c], m = params.running_mean[c];
                const double* p = input[n].data() + c * HW;
                double* yp = y.data() + c * HW;
                for (std::size_t i = 0; i < HW; ++i) yp[i] = g * (p[i] - m) * inv_sd + b;
            }
            out.push_back(std::move(y));
        }
    }
    return out;
}

BatchNormGrads batchnorm_backward(const BatchNormParams& params, const BatchNormCache& cache,
                                  const std::vector<Tensor>& d_output, double eps) {
    const std::size_t N = cache.x_hat.size();
    if (N == 0 || d_output.size() != N)
        throw TrainError("batchnorm backward: cache/gradient batch size mismatch");
    const std::size_t C = cache.x_hat[0].dim(0);
    const std::size_t HW = cache.x_hat[0].dim(1) * cache.x_hat[0].dim(2);
    const double count = static_cast<double>(N * HW);

    BatchNormGrads g;
    g.d_gamma = Tensor({C});
    g.d_beta = Tensor({C});
    g.d_input.reserve(N);
    for (std::size_t n = 0; n < N; ++n) g.d_input.push_back(Tensor::zeros_like(cache.x_hat[n]));

    for (std::size_t c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const double* dy = d_output[n].data() + c * HW;
            const double* xh = cache.x_hat[n].data() + c * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * xh[i];
            }
        }
        g.d_beta[c] = sum_dy;
        g.d_gamma[c] = sum_dy_xh;
        const double inv_sd = 1.0 / std::sqrt(cache.var[c] + eps);
        const double scale = params.gamma[c] * inv_sd / count;
        for (std::size_t n = 0; n < N; ++n) {
            const double* dy = d_output[n].data() + c * HW;
            const double* xh = cache.x_hat[n].data() + c * HW;
            double* dx = g.d_input[n].data() + c * HW;
            for (std::size_t i = 0; i < HW; ++i)
                dx[i] = scale * (count * dy[i] - sum_dy - xh[i] * sum_dy_xh);
        }
    }
    return g;
}

BatchNormGrads batchnorm_backward_eval(const std::vector<Tensor>& input, const BatchNormParams& params,
                                       const std::vector<Tensor>& d_output, double eps) {
    const std::size_t N = input.size();
    const std::size_t C = input[0].dim(0);
    const std::size_t HW = input[0].dim(1) * input[0].dim(2);

    BatchNormGrads g;
    g.d_gamma = Tensor({C});
    g.d_beta = Tensor({C});
    g.d_input.reserve(N);
    for (std::size_t n = 0; n < N; ++n) g.d_input.push_back(Tensor::zeros_like(input[n]));

    for (std::size_t c = 0; c < C; ++c) {
        const double inv_sd = 1.0 / std::sqrt(params.running_var[c] + eps);
        const double m = params.running_mean[c];
        const double gscale = params.gamma[c] * inv_sd;
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
            const double* dy = d_output[n].data() + c * HW;
            const double* x = input[n].data() + c * HW;
            double* dx = g.d_input[n].data() + c * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                sum_dy += dy[i];
                sum_dy_xh += dy[i] * (x[i] - m) * inv_sd;
                dx[i] = gscale * dy[i];
            }
        }
        g.d_beta[c] = sum_dy;
        g.d_gamma[c] = sum_dy_xh;
    }
    return g;
}

// ---------------------------------------------------------------------------
// Linear

std::vector<double> linear_forward(std::span<const double> input, const LinearParams& params) {
    const std::size_t O = params.weight.dim(0), I = params.weight.dim(1);
    if (input.size() != I)
        throw DataError("linear: input length " + std::to_string(input.size()) + " != weight columns " +
                        std::to_string(I));
    std::vector<double> y(O);
    const double* w = params.weight.data();
    for (std::size_t o = 0; o < O; ++o) {
        const double* row = w + o * I;
        double s = params.bias[o];
        for (std::size_t i = 0; i < I; ++i) s += row[i] * input[i];
        y[o] = s;
    }
    return y;
}

LinearGrads linear_backward(std::span<const double> input, const LinearParams& params,
                            std::span<const double> d_output) {
    const std::size_t O = params.weight.dim(0), I = params.weight.dim(1);
    if (input.size() != I) throw DataError("linear backward: input length mismatch");
    if (d_output.size() != O) throw DataError("linear backward: gradient length mismatch");
    LinearGrads g;
    g.d_input.assign(I, 0.0);
    g.d_weight = Tensor::zeros_like(params.weight);
    g.d_bias = Tensor::zeros_like(params.bias);
    const double* w = params.weight.data();
    double* dw = g.d_weight.data();
    for (std::size_t o = 0; o < O; ++o) {
        const double dy = d_output[o];
        g.d_bias[o] = dy;
        const double* row = w + o * I;
        double* drow = dw + o * I;
        for (std::size_t i = 0; i < I; ++i) {
            drow[i] = dy * input[i];
            g.d_input[i] += row[i] * dy;
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// ReLU

Tensor relu_forward(const Tensor& input) {
    Tensor y = input;
    for (std::size_t i = 0; i < y.size(); ++i)
        if (y[i] < 0.0) y[i] = 0.0;
    return y;
}

Tensor relu_backward(const Tensor& input, const Tensor& d_output) {
    if (!input.same_shape(d_output)) throw DataError("relu backward: shape mismatch");
    Tensor dx = d_output;
    for (std::size_t i = 0; i < dx.size(); ++i)
        if (input[i] <= 0.0) dx[i] = 0.0;
    return dx;
}

void relu_inplace(Tensor& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] < 0.0) t[i] = 0.0;
}

void relu_mask_inplace(const Tensor& input, Tensor& d) {
    for (std::size_t i = 0; i < d.size(); ++i)
        if (input[i] <= 0.0) d[i] = 0.0;
}

// ---------------------------------------------------------------------------
// Losses

TrainLossResult mse_train_loss(const TrajectoryPrediction& pred, const TrajectoryLabels& labels) {
    constexpr double n = static_cast<double>(kTrajectorySteps);
    TrainLossResult r{};
    double acc = 0.0;
    for (std::size_t t = 0; t < kTrajectorySteps; ++t) {
        const double es = labels.steer[t] - pred.steer[t];
        const double em = labels.motor[t] - pred.motor[t];
        acc += es * es + em * em;
        r.grad.steer[t] = (pred.steer[t] - labels.steer[t]) / n;
        r.grad.motor[t] = (pred.motor[t] - labels.motor[t]) / n;
    }
    r.loss = acc / (2.0 * n);
    return r;
}

double mse_validation_loss(const TrajectoryPrediction& pred, const TrajectoryLabels& labels) {
    constexpr std::size_t last = kTrajectorySteps - 1;
    const double es = labels.steer[last] - pred.steer[last];
    const double em = labels.motor[last] - pred.motor[last];
    return 0.5 * (es * es + em * em);
}

// ---------------------------------------------------------------------------
// Adadelta

AdadeltaState AdadeltaState::make(std::span<const Tensor* const> params, double rho, double eps) {
    if (!(rho > 0.0 && rho < 1.0)) throw TrainError("adadelta: rho must be in (0,1)");
    if (!(eps > 0.0)) throw TrainError("adadelta: eps must be > 0");
    AdadeltaState s;
    s.rho = rho;
    s.eps = eps;
    s.accum_grad_sq.reserve(params.size());
    s.accum_delta_sq.reserve(params.size());
    for (const Tensor* p : params) {
        s.accum_grad_sq.push_back(Tensor::zeros_like(*p));
        s.accum_delta_sq.push_back(Tensor::zeros_like(*p));
    }
    return s;
}

void adadelta_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                   AdadeltaState& state) {
    if (params.size() != grads.size() || params.size() != state.accum_grad_sq.size())
        throw TrainError("adadelta: parameter/gradient/state count mismatch");
    const double rho = state.rho, eps = state.eps;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = *grads[k];
        Tensor& eg = state.accum_grad_sq[k];
        Tensor& ed = state.accum_delta_sq[k];
        if (!p.same_shape(g) || !p.same_shape(eg))
            throw TrainError("adadelta: shape mismatch at parameter " + std::to_string(k));
        double* pp = p.data();
        const double* gp = g.data();
        double* egp = eg.data();
        double* edp = ed.data();
        const std::size_t n = p.size();
        for (std::size_t i = 0; i < n; ++i) {
            egp[i] = rho * egp[i] + (1.0 - rho) * gp[i] * gp[i];
            const double dx = -std::sqrt(edp[i] + eps) / std::sqrt(egp[i] + eps) * gp[i];
            edp[i] = rho * edp[i] + (1.0 - rho) * dx * dx;
            pp[i] += dx;
        }
    }
}

} // namespace multinet::nn

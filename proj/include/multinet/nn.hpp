#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "multinet/rng.hpp"
#include "multinet/tensor.hpp"

// Minimal deterministic neural-network engine: layers with exact hand-derived
// gradients, Adadelta, and the two trajectory MSE losses.
namespace multinet::nn {

inline constexpr std::size_t kTrajectorySteps = 10;

// ---------------------------------------------------------------------------
// Parameters

struct ConvParams {
    Tensor kernels; // (out_ch, in_ch, kh, kw)
    Tensor bias;    // (out_ch)
};

struct BatchNormParams {
    Tensor gamma;        // (channels)
    Tensor beta;         // (channels)
    Tensor running_mean; // (channels)
    Tensor running_var;  // (channels), elementwise >= 0
};

struct LinearParams {
    Tensor weight; // (out, in)
    Tensor bias;   // (out)
};

// Uniform fan-in init, U(-sqrt(1/fan_in), +sqrt(1/fan_in)) for weights and
// biases alike.
ConvParams make_conv(std::size_t out_ch, std::size_t in_ch, std::size_t kh, std::size_t kw, Rng& rng);
BatchNormParams make_batchnorm(std::size_t channels);
LinearParams make_linear(std::size_t out, std::size_t in, Rng& rng);

// ---------------------------------------------------------------------------
// Trajectories

struct TrajectoryLabels {
    std::array<double, kTrajectorySteps> steer{};
    std::array<double, kTrajectorySteps> motor{};
};

struct TrajectoryPrediction {
    std::array<double, kTrajectorySteps> steer{};
    std::array<double, kTrajectorySteps> motor{};
};

// ---------------------------------------------------------------------------
// Convolution (cross-correlation with bias)

Tensor conv2d_forward(const Tensor& input, const ConvParams& params, int stride, int pad);

struct ConvGrads {
    Tensor d_input;   // empty when skipped
    Tensor d_kernels;
    Tensor d_bias;
};

// d_output has the forward output's shape. Set want_d_input=false for the
// first layer of a network, where the image gradient is never consumed.
ConvGrads conv2d_backward(const Tensor& input, const ConvParams& params, int stride, int pad,
                          const Tensor& d_output, bool want_d_input = true);

// ---------------------------------------------------------------------------
// 2x2 max pooling, stride 2

// The layer itself rejects odd spatial dims; callers that pool odd maps must
// opt in to floor semantics (last row/column dropped).
enum class PoolOddDim { reject, floor_drop };

struct PoolResult {
    Tensor output;
    std::vector<std::uint32_t> argmax; // per output element: flat index into the input plane
};

PoolResult maxpool2_forward(const Tensor& input, PoolOddDim policy = PoolOddDim::reject);
Tensor maxpool2_backward(const Tensor& input, const PoolResult& fwd, const Tensor& d_output);

// ---------------------------------------------------------------------------
// Batch normalization over a batch of CHW tensors

struct BatchNormCache {
    std::vector<double> mean;    // per channel, batch statistics
    std::vector<double> var;     // per channel, biased
    std::vector<Tensor> x_hat;   // normalized inputs
};

// Train mode normalizes by batch statistics (batch size >= 2 required) and
// updates running stats in place: run <- (1-momentum)*run + momentum*batch.
// Eval mode normalizes by running statistics.
std::vector<Tensor> batchnorm_forward(const std::vector<Tensor>& input, BatchNormParams& params,
                                      bool training, double momentum, double eps,
                                      BatchNormCache* cache);

struct BatchNormGrads {
    std::vector<Tensor> d_input;
    Tensor d_gamma;
    Tensor d_beta;
};

BatchNormGrads batchnorm_backward(const BatchNormParams& params, const BatchNormCache& cache,
                                  const std::vector<Tensor>& d_output, double eps);

// Eval-mode backward (running stats are constants).
BatchNormGrads batchnorm_backward_eval(const std::vector<Tensor>& input, const BatchNormParams& params,
                                       const std::vector<Tensor>& d_output, double eps);

// ---------------------------------------------------------------------------
// Fully connected

std::vector<double> linear_forward(std::span<const double> input, const LinearParams& params);

struct LinearGrads {
    std::vector<double> d_input;
    Tensor d_weight;
    Tensor d_bias;
};

LinearGrads linear_backward(std::span<const double> input, const LinearParams& params,
                            std::span<const double> d_output);

// ---------------------------------------------------------------------------
// ReLU (gradient 0 at x == 0)

Tensor relu_forward(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& d_output);
void relu_inplace(Tensor& t);
void relu_mask_inplace(const Tensor& input, Tensor& d);

// ---------------------------------------------------------------------------
// Trajectory losses

struct TrainLossResult {
    double loss;
    TrajectoryPrediction grad; // dL/d(prediction)
};

// (1/2n) * sum_t [(s'_t - s_t)^2 + (m'_t - m_t)^2]
TrainLossResult mse_train_loss(const TrajectoryPrediction& pred, const TrajectoryLabels& labels);

// (1/2) * [(s'_n - s_n)^2 + (m'_n - m_n)^2], final step only
double mse_validation_loss(const TrajectoryPrediction& pred, const TrajectoryLabels& labels);

// ---------------------------------------------------------------------------
// Adadelta

struct AdadeltaState {
    std::vector<Tensor> accum_grad_sq;   // E[g^2], one per parameter tensor
    std::vector<Tensor> accum_delta_sq;  // E[dx^2]
    double rho = 0.9;
    double eps = 1e-6;

    static AdadeltaState make(std::span<const Tensor* const> params, double rho, double eps);
};

// E[g2] <- rho E[g2] + (1-rho) g^2
// dx    =  -sqrt(E[dx2]+eps)/sqrt(E[g2]+eps) * g
// E[dx2]<- rho E[dx2] + (1-rho) dx^2
void adadelta_step(std::span<Tensor* const> params, std::span<const Tensor* const> grads,
                   AdadeltaState& state);

} // namespace multinet::nn

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "multinet/nn.hpp"
#include "multinet/tensor.hpp"

// The Z2Color network: two conv blocks and two fully connected layers, with
// optional behavioral-mode insertion after the first conv block (MultiNet) or
// none (MTL baseline).
namespace multinet::model {

enum class BehavioralMode : std::uint8_t { Direct = 0, Follow = 1, Furtive = 2 };

inline constexpr std::array<BehavioralMode, 3> kAllModes = {BehavioralMode::Direct, BehavioralMode::Follow,
                                                            BehavioralMode::Furtive};

const char* mode_name(BehavioralMode m);
std::optional<BehavioralMode> mode_from_name(const std::string& name);

// Mode-tensor geometry: one binary channel per behavioral mode, replicated
// over the post-conv1-pool spatial dims.
inline constexpr std::size_t kModeChannels = 3;
inline constexpr std::size_t kModeHeight = 13;
inline constexpr std::size_t kModeWidth = 26;

// Batch-norm constants used by the architecture.
inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEps = 1e-5;

// One-hot by channel: the mode's channel is all ones, the rest all zeros.
Tensor encode_mode(BehavioralMode mode);

// Channel-concatenates four RGB images (each 3xHxW) in the fixed order
// left_t, right_t, left_{t-1}, right_{t-1}.
Tensor stack_images(const Tensor& left_t, const Tensor& right_t, const Tensor& left_tm1,
                    const Tensor& right_tm1);
std::array<Tensor, 4> unstack_images(const Tensor& stacked);

// Fast path: one moment's packed interleaved RGB bytes (4 images, HWC u8,
// values 0..255) to the 12xHxW input tensor scaled to [0,1]. Produces exactly
// stack_images() applied to the four unpacked images.
Tensor bytes_to_input(const std::uint8_t* bytes, std::size_t img_h, std::size_t img_w);

enum class Variant : std::uint8_t { MultiNet = 0, MTL = 1 };

struct NetworkConfig {
    Variant variant = Variant::MultiNet;
    std::size_t img_h = 26;
    std::size_t img_w = 52;
    std::size_t in_channels = 12;
    std::size_t conv1_out = 16;
    std::size_t conv2_out = 32;
    std::size_t hidden = 128;
    std::size_t output = 2 * nn::kTrajectorySteps;
    std::uint64_t seed = 0;

    // Post-conv1-pool spatial dims; must equal the mode-tensor dims for the
    // MultiNet variant so concatenation needs no resizing.
    std::size_t mid_h() const { return img_h / 2; }
    std::size_t mid_w() const { return img_w / 2; }
    // Conv2 input channels: conv1 features plus, for MultiNet, the 3 mode channels.
    std::size_t conv2_in() const {
        return conv1_out + (variant == Variant::MultiNet ? kModeChannels : 0);
    }
    // 2x2 pooling of an odd map drops the last row/column (floor semantics).
    std::size_t out_h() const { return mid_h() / 2; }
    std::size_t out_w() const { return mid_w() / 2; }
    std::size_t flat_size() const { return conv2_out * out_h() * out_w(); }

    void validate() const;
};

// Gradients for the learnable tensors, in declaration order.
struct ModelGrads {
    std::vector<Tensor> tensors;
    void add(const ModelGrads& other);
    void scale(double s);
};

// Batch activations retained for backward.
struct ForwardCache {
    std::vector<Tensor> input;       // 12xHxW per sample
    std::vector<Tensor> conv1_out;
    std::vector<nn::PoolResult> pool1;
    nn::BatchNormCache bn1;
    std::vector<Tensor> bn1_out;     // pre-ReLU
    std::vector<Tensor> conv2_in;    // post-ReLU (+ mode channels for MultiNet)
    std::vector<Tensor> conv2_out;
    std::vector<nn::PoolResult> pool2;
    nn::BatchNormCache bn2;
    std::vector<Tensor> bn2_out;     // pre-ReLU
    std::vector<std::vector<double>> flat;    // fc1 inputs (post-ReLU, flattened)
    std::vector<std::vector<double>> fc1_out; // pre-ReLU
    std::vector<std::vector<double>> fc1_act; // fc2 inputs
};

class Z2Color {
public:
    explicit Z2Color(const NetworkConfig& cfg);

    const NetworkConfig& config() const { return cfg_; }

    void set_training(bool training) { training_ = training; }
    bool is_training() const { return training_; }

    // Single-sample forward. MultiNet requires a mode, MTL requires none.
    // In train mode this is rejected (batch statistics need batch size >= 2);
    // use forward_batch for training.
    nn::TrajectoryPrediction forward(const Tensor& images, std::optional<BehavioralMode> mode) const;

    // Batched forward. In train mode fills `cache` for backward and updates
    // batch-norm running statistics. `modes` must be null for MTL and sized
    // to the batch for MultiNet.
    std::vector<nn::TrajectoryPrediction> forward_batch(std::vector<Tensor> images,
                                                        const std::vector<BehavioralMode>* modes,
                                                        ForwardCache* cache);

    // Backward over the cached batch; gradients are summed over samples.
    ModelGrads backward(const ForwardCache& cache,
                        const std::vector<nn::TrajectoryPrediction>& d_output) const;

    std::size_t parameter_count() const;

    std::vector<Tensor*> learnable_params();
    std::vector<const Tensor*> learnable_params() const;

    // Learnables plus batch-norm running statistics, in checkpoint order.
    std::vector<Tensor*> state_tensors();
    std::vector<const Tensor*> state_tensors() const;

    nn::ConvParams& conv1() { return conv1_; }
    nn::ConvParams& conv2() { return conv2_; }
    nn::BatchNormParams& bn1() { return bn1_; }
    nn::BatchNormParams& bn2() { return bn2_; }
    nn::LinearParams& fc1() { return fc1_; }
    nn::LinearParams& fc2() { return fc2_; }
    const nn::ConvParams& conv2() const { return conv2_; }

    void save(const std::filesystem::path& path) const;
    static Z2Color load(const std::filesystem::path& path);

    // In-memory checkpoint image, identical bytes to save().
    std::vector<std::uint8_t> serialize() const;
    static Z2Color deserialize(const std::vector<std::uint8_t>& bytes);

private:
    Z2Color() = default;

    NetworkConfig cfg_;
    nn::ConvParams conv1_, conv2_;
    nn::BatchNormParams bn1_, bn2_;
    nn::LinearParams fc1_, fc2_;
    bool training_ = true;
};

// Final-step controls clamped to [0,1]; earlier steps are side tasks only.
std::pair<double, double> actuation(const nn::TrajectoryPrediction& pred);

} // namespace multinet::model

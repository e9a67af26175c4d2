#include "multinet/model.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "multinet/binio.hpp"

namespace multinet::model {

const char* mode_name(BehavioralMode m) {
    switch (m) {
        case BehavioralMode::Direct: return "direct";
        case BehavioralMode::Follow: return "follow";
        case BehavioralMode::Furtive: return "furtive";
    }
    return "?";
}

std::optional<BehavioralMode> mode_from_name(const std::string& name) {
    if (name == "direct") return BehavioralMode::Direct;
    if (name == "follow") return BehavioralMode::Follow;
    if (name == "furtive") return BehavioralMode::Furtive;
    return std::nullopt;
}

Tensor encode_mode(BehavioralMode mode) {
    Tensor t({kModeChannels, kModeHeight, kModeWidth});
    const std::size_t c = static_cast<std::size_t>(mode);
    double* plane = t.data() + c * kModeHeight * kModeWidth;
    std::fill(plane, plane + kModeHeight * kModeWidth, 1.0);
    return t;
}

Tensor stack_images(const Tensor& left_t, const Tensor& right_t, const Tensor& left_tm1,
                    const Tensor& right_tm1) {
    const Tensor* imgs[4] = {&left_t, &right_t, &left_tm1, &right_tm1};
    for (const Tensor* img : imgs) {
        if (img->rank() != 3 || img->dim(0) != 3)
            throw DataError("stack_images: each image must be 3xHxW");
        if (!img->same_shape(left_t))
            throw DataError("stack_images: image dimensions differ (" + std::to_string(img->dim(1)) + "x" +
                            std::to_string(img->dim(2)) + " vs " + std::to_string(left_t.dim(1)) + "x" +
                            std::to_string(left_t.dim(2)) + ")");
    }
    const std::size_t H = left_t.dim(1), W = left_t.dim(2);
    Tensor out({12, H, W});
    for (std::size_t i = 0; i < 4; ++i)
        std::memcpy(out.data() + i * 3 * H * W, imgs[i]->data(), 3 * H * W * sizeof(double));
    return out;
}

std::array<Tensor, 4> unstack_images(const Tensor& stacked) {
    if (stacked.rank() != 3 || stacked.dim(0) != 12)
        throw DataError("unstack_images: expected 12xHxW input");
    const std::size_t H = stacked.dim(1), W = stacked.dim(2);
    std::array<Tensor, 4> out{Tensor({3, H, W}), Tensor({3, H, W}), Tensor({3, H, W}), Tensor({3, H, W})};
    for (std::size_t i = 0; i < 4; ++i)
        std::memcpy(out[i].data(), stacked.data() + i * 3 * H * W, 3 * H * W * sizeof(double));
    return out;
}

Tensor bytes_to_input(const std::uint8_t* bytes, std::size_t img_h, std::size_t img_w) {
    Tensor out({12, img_h, img_w});
    const std::size_t plane = img_h * img_w;
    constexpr double inv255 = 1.0 / 255.0;
    for (std::size_t img = 0; img < 4; ++img) {
        const std::uint8_t* src = bytes + img * plane * 3;
        double* r = out.data() + (img * 3 + 0) * plane;
        double* g = out.data() + (img * 3 + 1) * plane;
        double* b = out.data() + (img * 3 + 2) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
            r[i] = src[i * 3 + 0] * inv255;
            g[i] = src[i * 3 + 1] * inv255;
            b[i] = src[i * 3 + 2] * inv255;
        }
    }
    return out;
}

void NetworkConfig::validate() const {
    if (output != 2 * nn::kTrajectorySteps)
        throw ConfigError("network config: output size must be " + std::to_string(2 * nn::kTrajectorySteps));
    if (img_h % 2 != 0 || img_w % 2 != 0)
        throw ConfigError("network config: image dims must be even, got " + std::to_string(img_h) + "x" +
                          std::to_string(img_w));
    if (variant == Variant::MultiNet && (mid_h() != kModeHeight || mid_w() != kModeWidth))
        throw ConfigError("network config: post-conv1-pool dims " + std::to_string(mid_h()) + "x" +
                          std::to_string(mid_w()) + " do not match the mode tensor (" +
                          std::to_string(kModeHeight) + "x" + std::to_string(kModeWidth) + ")");
    if (conv1_out == 0 || conv2_out == 0 || hidden == 0 || in_channels == 0)
        throw ConfigError("network config: zero-sized layer width");
    if (out_h() == 0 || out_w() == 0) throw ConfigError("network config: second pool collapses the map");
}

void ModelGrads::add(const ModelGrads& other) {
    if (tensors.empty()) {
        tensors = other.tensors;
        return;
    }
    for (std::size_t k = 0; k < tensors.size(); ++k)
        for (std::size_t i = 0; i < tensors[k].size(); ++i) tensors[k][i] += other.tensors[k][i];
}

void ModelGrads::scale(double s) {
    for (Tensor& t : tensors)
        for (std::size_t i = 0; i < t.size(); ++i) t[i] *= s;
}

Z2Color::Z2Color(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    conv1_ = nn::make_conv(cfg_.conv1_out, cfg_.in_channels, 3, 3, rng);
    bn1_ = nn::make_batchnorm(cfg_.conv1_out);
    conv2_ = nn::make_conv(cfg_.conv2_out, cfg_.conv2_in(), 3, 3, rng);
    bn2_ = nn::make_batchnorm(cfg_.conv2_out);
    fc1_ = nn::make_linear(cfg_.hidden, cfg_.flat_size(), rng);
    fc2_ = nn::make_linear(cfg_.output, cfg_.hidden, rng);
}

namespace {

void check_mode_argument(Variant variant, bool has_mode) {
    if (variant == Variant::MultiNet && !has_mode)
        throw DataError("forward: MultiNet variant requires a behavioral mode");
    if (variant == Variant::MTL && has_mode)
        throw DataError("forward: MTL variant takes no behavioral mode");
}

Tensor concat_mode(const Tensor& features, BehavioralMode mode) {
    const std::size_t H = features.dim(1), W = features.dim(2);
    Tensor out({features.dim(0) + kModeChannels, H, W});
    std::memcpy(out.data(), features.data(), features.size() * sizeof(double));
    const std::size_t c = static_cast<std::size_t>(mode);
    double* plane = out.data() + (features.dim(0) + c) * H * W;
    std::fill(plane, plane + H * W, 1.0);
    return out;
}

nn::TrajectoryPrediction to_prediction(std::span<const double> out20) {
    nn::TrajectoryPrediction p;
    for (std::size_t t = 0; t < nn::kTrajectorySteps; ++t) {
        p.steer[t] = out20[t];
        p.motor[t] = out20[nn::kTrajectorySteps + t];
    }
    return p;
}

} // namespace

nn::TrajectoryPrediction Z2Color::forward(const Tensor& images, std::optional<BehavioralMode> mode) const {
    check_mode_argument(cfg_.variant, mode.has_value());
    if (training_)
        throw TrainError("forward: single-sample forward needs eval mode (batch statistics undefined)");
    if (images.rank() != 3 || images.dim(0) != cfg_.in_channels || images.dim(1) != cfg_.img_h ||
        images.dim(2) != cfg_.img_w)
        throw DataError("forward: input must be " + std::to_string(cfg_.in_channels) + "x" +
                        std::to_string(cfg_.img_h) + "x" + std::to_string(cfg_.img_w));

    // Eval path, running statistics, no cache.
    Tensor x = nn::conv2d_forward(images, conv1_, 1, 1);
    x = nn::maxpool2_forward(x).output;
    {
        std::vector<Tensor> batch;
        batch.push_back(std::move(x));
        auto& self = const_cast<Z2Color&>(*this); // eval-mode batchnorm does not mutate params
        x = std::move(nn::batchnorm_forward(batch, self.bn1_, false, kBnMomentum, kBnEps, nullptr)[0]);
    }
    nn::relu_inplace(x);
    if (cfg_.variant == Variant::MultiNet) x = concat_mode(x, *mode);
    x = nn::conv2d_forward(x, conv2_, 1, 1);
    x = nn::maxpool2_forward(x, nn::PoolOddDim::floor_drop).output;
    {
        std::vector<Tensor> batch;
        batch.push_back(std::move(x));
        auto& self = const_cast<Z2Color&>(*this);
        x = std::move(nn::batchnorm_forward(batch, self.bn2_, false, kBnMomentum, kBnEps, nullptr)[0]);
    }
    nn::relu_inplace(x);
    std::vector<double> flat(x.data(), x.data() + x.size());
    std::vector<double> h = nn::linear_forward(flat, fc1_);
    for (double& v : h)
        if (v < 0.0) v = 0.0;
    std::vector<double> out = nn::linear_forward(h, fc2_);
    return to_prediction(out);
}

std::vector<nn::TrajectoryPrediction> Z2Color::forward_batch(std::vector<Tensor> images,
                                                             const std::vector<BehavioralMode>* modes,
                                                             ForwardCache* cache) {
    const bool has_modes = modes != nullptr && !modes->empty();
    check_mode_argument(cfg_.variant, has_modes);
    if (has_modes && modes->size() != images.size())
        throw DataError("forward_batch: mode count != batch size");
    if (cache && !training_) throw TrainError("forward_batch: cache requested in eval mode");
    const std::size_t N = images.size();
    if (N == 0) throw DataError("forward_batch: empty batch");

    const bool train = training_;
    ForwardCache local;
    ForwardCache& c = cache ? *cache : local;

    std::vector<Tensor> pooled1;
    pooled1.reserve(N);
    std::vector<nn::PoolResult> pool1;
    pool1.reserve(N);
    std::vector<Tensor> conv1_out;
    conv1_out.reserve(N);
    for (const Tensor& img : images) {
        Tensor y = nn::conv2d_forward(img, conv1_, 1, 1);
        nn::PoolResult pr = nn::maxpool2_forward(y);
        pooled1.push_back(pr.output);
        if (cache) {
            conv1_out.push_back(std::move(y));
            pool1.push_back(std::move(pr));
        }
    }
    std::vector<Tensor> bn1_out =
        nn::batchnorm_forward(pooled1, bn1_, train, kBnMomentum, kBnEps, cache ? &c.bn1 : nullptr);
    if (cache) c.bn1_out = bn1_out; // pre-ReLU copies

    std::vector<Tensor> conv2_in;
    conv2_in.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
        Tensor a = std::move(bn1_out[n]);
        nn::relu_inplace(a);
        if (cfg_.variant == Variant::MultiNet) a = concat_mode(a, (*modes)[n]);
        conv2_in.push_back(std::move(a));
    }

    std::vector<Tensor> pooled2;
    pooled2.reserve(N);
    std::vector<nn::PoolResult> pool2;
    pool2.reserve(N);
    std::vector<Tensor> conv2_out;
    conv2_out.reserve(N);
    for (const Tensor& a : conv2_in) {
        Tensor y = nn::conv2d_forward(a, conv2_, 1, 1);
        nn::PoolResult pr = nn::maxpool2_forward(y, nn::PoolOddDim::floor_drop);
        pooled2.push_back(pr.output);
        if (cache) {
            conv2_out.push_back(std::move(y));
            pool2.push_back(std::move(pr));
        }
    }
    std::vector<Tensor> bn2_out =
        nn::batchnorm_forward(pooled2, bn2_, train, kBnMomentum, kBnEps, cache ? &c.bn2 : nullptr);
    if (cache) c.bn2_out = bn2_out;

    std::vector<nn::TrajectoryPrediction> preds;
    preds.reserve(N);
    std::vector<std::vector<double>> flats, fc1_outs, fc1_acts;
    for (std::size_t n = 0; n < N; ++n) {
        Tensor a = std::move(bn2_out[n]);
        nn::relu_inplace(a);
        std::vector<double> flat(a.data(), a.data() + a.size());
        std::vector<double> h = nn::linear_forward(flat, fc1_);
        std::vector<double> h_act = h;
        for (double& v : h_act)
            if (v < 0.0) v = 0.0;
        std::vector<double> out = nn::linear_forward(h_act, fc2_);
        preds.push_back(to_prediction(out));
        if (cache) {
            flats.push_back(std::move(flat));
            fc1_outs.push_back(std::move(h));
            fc1_acts.push_back(std::move(h_act));
        }
    }

    if (cache) {
        c.input = std::move(images);
        c.conv1_out = std::move(conv1_out);
        c.pool1 = std::move(pool1);
        c.conv2_in = std::move(conv2_in);
        c.conv2_out = std::move(conv2_out);
        c.pool2 = std::move(pool2);
        c.flat = std::move(flats);
        c.fc1_out = std::move(fc1_outs);
        c.fc1_act = std::move(fc1_acts);
    }
    return preds;
}

ModelGrads Z2Color::backward(const ForwardCache& cache,
                             const std::vector<nn::TrajectoryPrediction>& d_output) const {
    const std::size_t N = cache.input.size();
    if (d_output.size() != N) throw TrainError("backward: gradient count != batch size");

    ModelGrads g;
    g.tensors.resize(12);
    Tensor& d_conv1_k = g.tensors[0];
    Tensor& d_conv1_b = g.tensors[1];
    Tensor& d_bn1_gamma = g.tensors[2];
    Tensor& d_bn1_beta = g.tensors[3];
    Tensor& d_conv2_k = g.tensors[4];
    Tensor& d_conv2_b = g.tensors[5];
    Tensor& d_bn2_gamma = g.tensors[6];
    Tensor& d_bn2_beta = g.tensors[7];
    Tensor& d_fc1_w = g.tensors[8];
    Tensor& d_fc1_b = g.tensors[9];
    Tensor& d_fc2_w = g.tensors[10];
    Tensor& d_fc2_b = g.tensors[11];
    d_conv1_k = Tensor::zeros_like(conv1_.kernels);
    d_conv1_b = Tensor::zeros_like(conv1_.bias);
    d_bn1_gamma = Tensor::zeros_like(bn1_.gamma);
    d_bn1_beta = Tensor::zeros_like(bn1_.beta);
    d_conv2_k = Tensor::zeros_like(conv2_.kernels);
    d_conv2_b = Tensor::zeros_like(conv2_.bias);
    d_bn2_gamma = Tensor::zeros_like(bn2_.gamma);
    d_bn2_beta = Tensor::zeros_like(bn2_.beta);
    d_fc1_w = Tensor::zeros_like(fc1_.weight);
    d_fc1_b = Tensor::zeros_like(fc1_.bias);
    d_fc2_w = Tensor::zeros_like(fc2_.weight);
    d_fc2_b = Tensor::zeros_like(fc2_.bias);

    auto accumulate = [](Tensor& dst, const Tensor& src) {
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    };

    // FC stack back to the second batch-norm output.
    std::vector<Tensor> d_bn2_out;
    d_bn2_out.reserve(N);
    const std::size_t n_steps = nn::kTrajectorySteps;
    for (std::size_t n = 0; n < N; ++n) {
        std::vector<double> d_out(cfg_.output);
        for (std::size_t t = 0; t < n_steps; ++t) {
            d_out[t] = d_output[n].steer[t];
            d_out[n_steps + t] = d_output[n].motor[t];
        }
        nn::LinearGrads g2 = nn::linear_backward(cache.fc1_act[n], fc2_, d_out);
        accumulate(d_fc2_w, g2.d_weight);
        accumulate(d_fc2_b, g2.d_bias);
        for (std::size_t i = 0; i < g2.d_input.size(); ++i)
            if (cache.fc1_out[n][i] <= 0.0) g2.d_input[i] = 0.0;
        nn::LinearGrads g1 = nn::linear_backward(cache.flat[n], fc1_, g2.d_input);
        accumulate(d_fc1_w, g1.d_weight);
        accumulate(d_fc1_b, g1.d_bias);
        Tensor d_a2({cfg_.conv2_out, cfg_.out_h(), cfg_.out_w()},
                    std::vector<double>(g1.d_input.begin(), g1.d_input.end()));
        nn::relu_mask_inplace(cache.bn2_out[n], d_a2);
        d_bn2_out.push_back(std::move(d_a2));
    }

    nn::BatchNormGrads bg2 = nn::batchnorm_backward(bn2_, cache.bn2, d_bn2_out, kBnEps);
    accumulate(d_bn2_gamma, bg2.d_gamma);
    accumulate(d_bn2_beta, bg2.d_beta);

    // Second conv block back to the first batch-norm output.
    std::vector<Tensor> d_bn1_out;
    d_bn1_out.reserve(N);
    for (std::size_t n = 0; n < N; ++n) {
        Tensor d_conv2_y = nn::maxpool2_backward(cache.conv2_out[n], cache.pool2[n], bg2.d_input[n]);
        nn::ConvGrads cg2 = nn::conv2d_backward(cache.conv2_in[n], conv2_, 1, 1, d_conv2_y, true);
        accumulate(d_conv2_k, cg2.d_kernels);
        accumulate(d_conv2_b, cg2.d_bias);
        // Mode channels (MultiNet) receive no gradient; keep the feature slice.
        Tensor d_a1({cfg_.conv1_out, cfg_.mid_h(), cfg_.mid_w()});
        std::memcpy(d_a1.data(), cg2.d_input.data(), d_a1.size() * sizeof(double));
        nn::relu_mask_inplace(cache.bn1_out[n], d_a1);
        d_bn1_out.push_back(std::move(d_a1));
    }

    nn::BatchNormGrads bg1 = nn::batchnorm_backward(bn1_, cache.bn1, d_bn1_out, kBnEps);
    accumulate(d_bn1_gamma, bg1.d_gamma);
    accumulate(d_bn1_beta, bg1.d_beta);

    for (std::size_t n = 0; n < N; ++n) {
        Tensor d_conv1_y = nn::maxpool2_backward(cache.conv1_out[n], cache.pool1[n], bg1.d_input[n]);
        nn::ConvGrads cg1 = nn::conv2d_backward(cache.input[n], conv1_, 1, 1, d_conv1_y, false);
        accumulate(d_conv1_k, cg1.d_kernels);
        accumulate(d_conv1_b, cg1.d_bias);
    }
    return g;
}

std::size_t Z2Color::parameter_count() const {
    std::size_t n = 0;
    for (const Tensor* t : learnable_params()) n += t->size();
    return n;
}

std::vector<Tensor*> Z2Color::learnable_params() {
    return {&conv1_.kernels, &conv1_.bias, &bn1_.gamma, &bn1_.beta,  &conv2_.kernels, &conv2_.bias,
            &bn2_.gamma,     &bn2_.beta,   &fc1_.weight, &fc1_.bias, &fc2_.weight,    &fc2_.bias};
}

std::vector<const Tensor*> Z2Color::learnable_params() const {
    return {&conv1_.kernels, &conv1_.bias, &bn1_.gamma, &bn1_.beta,  &conv2_.kernels, &conv2_.bias,
            &bn2_.gamma,     &bn2_.beta,   &fc1_.weight, &fc1_.bias, &fc2_.weight,    &fc2_.bias};
}

std::vector<Tensor*> Z2Color::state_tensors() {
    return {&conv1_.kernels, &conv1_.bias,        &bn1_.gamma,       &bn1_.beta,
            &bn1_.running_mean, &bn1_.running_var, &conv2_.kernels,   &conv2_.bias,
            &bn2_.gamma,     &bn2_.beta,          &bn2_.running_mean, &bn2_.running_var,
            &fc1_.weight,    &fc1_.bias,          &fc2_.weight,      &fc2_.bias};
}

std::vector<const Tensor*> Z2Color::state_tensors() const {
    return {&conv1_.kernels, &conv1_.bias,        &bn1_.gamma,       &bn1_.beta,
            &bn1_.running_mean, &bn1_.running_var, &conv2_.kernels,   &conv2_.bias,
            &bn2_.gamma,     &bn2_.beta,          &bn2_.running_mean, &bn2_.running_var,
            &fc1_.weight,    &fc1_.bias,          &fc2_.weight,      &fc2_.bias};
}

namespace {
constexpr char kCheckpointMagic[4] = {'M', 'N', 'C', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;
} // namespace

std::vector<std::uint8_t> Z2Color::serialize() const {
    std::ostringstream os(std::ios::binary);
    os.write(kCheckpointMagic, 4);
    binio::write_le(os, kCheckpointVersion);
    binio::write_le(os, static_cast<std::uint8_t>(cfg_.variant));
    binio::write_le(os, static_cast<std::uint32_t>(cfg_.img_h));
    binio::write_le(os, static_cast<std::uint32_t>(cfg_.img_w));
    binio::write_le(os, static_cast<std::uint32_t>(cfg_.in_channels));
    binio::write_le(os, static_cast<std::uint32_t>(cfg_.conv1_out));
    binio::write_le(os, static_cast<std::uint32_t>(cfg_.conv2_out));
    binio::write_le(os, static_cast<std::uint32_t>(cfg_.hidden));
    binio::write_le(os, static_cast<std::uint32_t>(cfg_.output));
    binio::write_le(os, cfg_.seed);
    for (const Tensor* t : state_tensors())
        for (std::size_t i = 0; i < t->size(); ++i) binio::write_f64(os, (*t)[i]);
    const std::string s = os.str();
    return std::vector<std::uint8_t>(s.begin(), s.end());
}

Z2Color Z2Color::deserialize(const std::vector<std::uint8_t>& bytes) {
    std::istringstream is(std::string(bytes.begin(), bytes.end()), std::ios::binary);
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw IoError("checkpoint: bad magic bytes");
    const auto version = binio::read_le_or_throw<std::uint16_t>(is, "checkpoint version");
    if (version != kCheckpointVersion)
        throw IoError("checkpoint: unsupported version " + std::to_string(version));
    NetworkConfig cfg;
    cfg.variant = static_cast<Variant>(binio::read_le_or_throw<std::uint8_t>(is, "variant"));
    cfg.img_h = binio::read_le_or_throw<std::uint32_t>(is, "img_h");
    cfg.img_w = binio::read_le_or_throw<std::uint32_t>(is, "img_w");
    cfg.in_channels = binio::read_le_or_throw<std::uint32_t>(is, "in_channels");
    cfg.conv1_out = binio::read_le_or_throw<std::uint32_t>(is, "conv1_out");
    cfg.conv2_out = binio::read_le_or_throw<std::uint32_t>(is, "conv2_out");
    cfg.hidden = binio::read_le_or_throw<std::uint32_t>(is, "hidden");
    cfg.output = binio::read_le_or_throw<std::uint32_t>(is, "output");
    cfg.seed = binio::read_le_or_throw<std::uint64_t>(is, "seed");

    Z2Color net(cfg);
    for (Tensor* t : net.state_tensors())
        for (std::size_t i = 0; i < t->size(); ++i)
            if (!binio::read_f64(is, (*t)[i])) throw IoError("checkpoint: truncated parameter data");
    char extra;
    if (is.read(&extra, 1)) throw IoError("checkpoint: trailing bytes after parameters");
    net.set_training(false);
    return net;
}

void Z2Color::save(const std::filesystem::path& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open for writing: " + path.string());
    const std::vector<std::uint8_t> bytes = serialize();
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw IoError("checkpoint: write failed: " + path.string());
}

Z2Color Z2Color::load(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("checkpoint: cannot open: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize(bytes);
}

std::pair<double, double> actuation(const nn::TrajectoryPrediction& pred) {
    auto clamp01 = [](double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); };
    constexpr std::size_t last = nn::kTrajectorySteps - 1;
    return {clamp01(pred.steer[last]), clamp01(pred.motor[last])};
}

} // namespace multinet::model

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "multinet/model.hpp"
#include "multinet/nn.hpp"

// Converts asynchronous timestamped sensor streams into data moments and
// handles dataset balancing, splitting and serialization.
namespace multinet::data {

inline constexpr std::size_t kImgHeight = 26;
inline constexpr std::size_t kImgWidth = 52;
inline constexpr std::size_t kImageBytes = kImgHeight * kImgWidth * 3; // one RGB image, HWC u8
inline constexpr std::size_t kMomentImageBytes = 4 * kImageBytes;
inline constexpr std::uint64_t kGridMs = 33;

enum class OperationalMode : std::uint8_t { Expert = 0, Autonomous = 1, Correctional = 2 };

const char* op_mode_name(OperationalMode m);

// ---------------------------------------------------------------------------
// Raw streams

struct RawSample {
    std::uint64_t t_ms;
    double value;
};

struct RawStream {
    std::vector<RawSample> samples; // timestamps strictly increasing
    void validate(const char* name) const;
};

struct ImageSample {
    std::uint64_t t_ms;
    std::vector<std::uint8_t> left;  // kImageBytes, interleaved RGB
    std::vector<std::uint8_t> right;
};

struct ImageStream {
    std::vector<ImageSample> samples; // timestamps strictly increasing
};

// ---------------------------------------------------------------------------
// Moments and datasets

struct DataMoment {
    // left_t | right_t | left_{t-33ms} | right_{t-33ms}, each kImageBytes.
    std::vector<std::uint8_t> image_bytes;
    nn::TrajectoryLabels labels;
    model::BehavioralMode behavioral = model::BehavioralMode::Direct;
    OperationalMode operational = OperationalMode::Expert;
    std::uint64_t timestamp_ms = 0;
};

struct Dataset {
    std::vector<DataMoment> moments;

    std::size_t size() const { return moments.size(); }
    std::array<std::size_t, 3> mode_counts() const;
    std::array<std::size_t, 3> op_counts() const;
    void append(Dataset other);
};

// ---------------------------------------------------------------------------
// Pipeline operations

struct GriddedSignals {
    std::uint64_t grid_ms = kGridMs;
    std::int64_t first_tick = 0;        // tick index of steer[0]/motor[0]
    std::vector<double> steer;          // one value per covered tick
    std::vector<double> motor;
    std::size_t skipped = 0;            // envelope ticks outside joint support
};

// Linear interpolation of both control streams onto the grid. The grid
// envelope spans the union of both streams; ticks outside either stream's
// support are dropped and counted.
GriddedSignals interpolate_streams(const RawStream& steer, const RawStream& motor,
                                   std::uint64_t grid_ms = kGridMs);

struct AssemblyReport {
    std::size_t emitted = 0;
    std::size_t skipped = 0; // eligible ticks without full history/lookahead
};

// One moment per grid tick that has a current image, a previous-tick image
// and 10 future label steps. Labels at t+33k ms, k = 1..10; the moment's
// operational mode is the tag at tick t. op_tags is indexed alongside the
// gridded signal (op_tags[i] tags tick first_tick + i).
Dataset assemble_moments(const GriddedSignals& signals, const ImageStream& images,
                         model::BehavioralMode behavioral,
                         const std::vector<OperationalMode>& op_tags, AssemblyReport* report = nullptr);

// Uniform seeded down-sampling so all three behavioral modes match the
// minimum count; original order retained. All three modes must be present.
Dataset balance_by_mode(const Dataset& ds, std::uint64_t seed);

struct SplitResult {
    Dataset train;
    Dataset validation;
};

// Disjoint, exhaustive, per-mode stratified split. Every mode present in the
// dataset is split independently; the validation share of each stratum is
// round(count * fraction), at least 1.
SplitResult split(const Dataset& ds, double validation_fraction, std::uint64_t seed);

struct MixReport {
    double expert_fraction = 0.0;
    double correctional_fraction = 0.0;
};

// Fractions over expert + correctional moments (autonomous moments are never
// stored as training data and are ignored here).
MixReport mix_report(const Dataset& ds);

// Binary dataset codec. Layout: magic "MNDM", u16 version, u64 count, then
// per moment u8 behavioral, u8 operational, u64 timestamp_ms, 4 raw images,
// 20 f32 labels (steer 1..10 then motor 1..10), all little-endian.
void serialize(const Dataset& ds, const std::filesystem::path& path);
Dataset deserialize(const std::filesystem::path& path);

std::vector<std::uint8_t> serialize_bytes(const Dataset& ds);
Dataset deserialize_bytes(const std::vector<std::uint8_t>& bytes);

} // namespace multinet::data

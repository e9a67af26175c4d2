#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "multinet/data.hpp"
#include "multinet/model.hpp"

// Deterministic 2D driving world: procedurally generated winding loop tracks
// with obstacles and boundary foliage, a kinematic bicycle car with first-order
// speed lag, a pseudo-stereo ground-plane renderer, and scripted oracle
// experts for the three behavioral modes.
namespace multinet::sim {

// ---------------------------------------------------------------------------
// Track

struct Obstacle {
    double x = 0.0, y = 0.0;
    double radius = 0.0;
    double s = 0.0;       // arclength of the obstacle center's projection
    double lateral = 0.0; // signed offset from the centerline (+ = left of travel)
};

struct FoliageBand {
    int side = 1;          // +1 left boundary, -1 right boundary
    double s_begin = 0.0;  // arclength range along the track
    double s_end = 0.0;
    double width = 0.5;    // band width outside the corridor edge
};

struct TrackFeatures {
    std::size_t obstacle_count = 0;
    double foliage_coverage = 0.0; // fraction of arclength with a boundary band
    bool lead_car = false;
};

struct TrackLocation {
    std::size_t segment = 0;
    double s = 0.0;        // arclength of the closest centerline point
    double lateral = 0.0;  // signed distance, + = left of travel
};

class Track {
public:
    Track(std::vector<std::pair<double, double>> waypoints, double half_width, bool loop);

    double length() const { return total_length_; }
    double half_width() const { return half_width_; }
    bool is_loop() const { return loop_; }
    const std::vector<std::pair<double, double>>& waypoints() const { return pts_; }

    std::vector<Obstacle> obstacles;
    std::vector<FoliageBand> foliage;
    TrackFeatures features;

    std::pair<double, double> point_at(double s) const;
    std::pair<double, double> tangent_at(double s) const;
    // Signed curvature around arclength s (discrete three-point estimate).
    double curvature_at(double s) const;

    TrackLocation locate(double x, double y) const;

    double wrap_s(double s) const;
    // Forward arclength from s0 to s1 (loop-aware, in [0, length)).
    double forward_gap(double s0, double s1) const;
    // True when s lies in [begin, end] measured along the track (loop-aware).
    bool s_in_range(double s, double begin, double end) const;

    // Render support: coarse terrain mask (path / foliage) on a metric grid.
    enum TerrainClass : std::uint8_t { kOff = 0, kPath = 1, kFoliage = 2 };
    TerrainClass terrain_at(double x, double y) const;

    // Throws DataError when the corridor is blocked or geometry is degenerate;
    // every generated track passes.
    void validate_feasibility(double car_width, double margin) const;

    // Call after editing foliage so the terrain mask picks it up.
    void rebuild_terrain() { build_terrain_grid(); }

private:
    void build_terrain_grid();

    std::vector<std::pair<double, double>> pts_;
    std::vector<double> cum_s_;
    double total_length_ = 0.0;
    double half_width_ = 1.0;
    bool loop_ = true;

    double grid_x0_ = 0.0, grid_y0_ = 0.0;
    double grid_cell_ = 0.1;
    std::size_t grid_nx_ = 0, grid_ny_ = 0;
    std::vector<std::uint8_t> grid_;
};

// Smooth random-curvature loop, fully determined by the seed. Obstacles keep
// a guaranteed passable gap; foliage bands land on random sides.
Track generate_track(std::uint64_t seed, double length_m, const TrackFeatures& features);

// Straight open corridor along +x, for tests and fixtures.
Track make_straight_track(double length_m, double half_width);

// Nominal scenario per behavioral mode: obstacles for direct, a lead car for
// follow, half-coverage boundary foliage for furtive.
TrackFeatures default_features_for_mode(model::BehavioralMode mode, double length_m);

// ---------------------------------------------------------------------------
// Car and world stepping

struct CarState {
    double x = 0.0;
    double y = 0.0;
    double heading = 0.0; // rad
    double speed = 0.0;   // m/s, signed
    double wheelbase = 0.3;
};

struct SimConfig {
    double dt_s = 0.033;
    int latency_ticks = 10;       // 330 ms actuation latency
    double v_max = 2.0;           // desk-scale full speed
    double max_wheel_rad = 0.5;   // steering range
    double wheelbase = 0.3;
    double car_radius = 0.15;
    double tau_speed_s = 0.3;     // first-order speed lag
    double camera_baseline = 0.12;
    std::size_t img_h = 26;
    std::size_t img_w = 52;
    std::uint64_t seed = 0;

    void validate() const;
};

struct Controls {
    double steer = 0.5; // [0,1], 0.5 = straight
    double motor = 0.5; // [0,1], 0.5 = stop
};

// steer: 0 = full left, 1 = full right; motor: 0 = full reverse, 1 = full
// forward; midpoints are neutral.
std::pair<double, double> control_maps(double steer, double motor, const SimConfig& cfg);

struct StepResult {
    CarState car;
    bool collided = false;
};

StepResult step(const CarState& car, const Controls& controls, const Track& track, const SimConfig& cfg);

// ---------------------------------------------------------------------------
// Renderer

enum class Eye { Left, Right };

// Flat-color ground-plane projection; pure function of its arguments.
std::vector<std::uint8_t> render(const CarState& car, const Track& track, Eye eye, const SimConfig& cfg,
                                 const CarState* lead_car = nullptr);

// ---------------------------------------------------------------------------
// Oracle experts

Controls expert_direct(const CarState& car, const Track& track, const SimConfig& cfg);
Controls expert_follow(const CarState& car, const CarState* lead_car, const Track& track,
                       const SimConfig& cfg);
Controls expert_furtive(const CarState& car, const Track& track, const SimConfig& cfg);

Controls expert_for_mode(model::BehavioralMode mode, const CarState& car, const CarState* lead_car,
                         const Track& track, const SimConfig& cfg);

// ---------------------------------------------------------------------------
// Episodes

struct TickRecord {
    std::uint64_t t_ms = 0;
    CarState car;
    Controls applied;
    data::OperationalMode op_mode = data::OperationalMode::Expert;
    double cte = 0.0; // signed lateral offset from the centerline
    bool collision = false;
    double gap = std::numeric_limits<double>::quiet_NaN(); // lead-car gap, follow only
};

struct EpisodeLog {
    model::BehavioralMode mode = model::BehavioralMode::Direct;
    std::uint64_t grid_ms = 33;
    std::vector<TickRecord> ticks;
    bool has_images = false;
    std::vector<std::vector<std::uint8_t>> left_images;  // per tick when rendered
    std::vector<std::vector<std::uint8_t>> right_images;

    std::size_t count_op(data::OperationalMode m) const;
};

struct PolicyContext {
    int tick = 0;
    const CarState* car = nullptr;
    const CarState* lead = nullptr;
    const Track* track = nullptr;
    // Interleaved RGB bytes; null when rendering is off.
    const std::vector<std::uint8_t>* left_t = nullptr;
    const std::vector<std::uint8_t>* right_t = nullptr;
    const std::vector<std::uint8_t>* left_tm1 = nullptr;
    const std::vector<std::uint8_t>* right_tm1 = nullptr;
};

// The issuer runs every tick and returns the controls to enqueue plus the
// operational mode that issued them; the queue delays actuation by
// latency_ticks with a neutral (0.5, 0.5) prefill.
using Issuer = std::function<std::pair<Controls, data::OperationalMode>(const PolicyContext&)>;

struct EpisodeOptions {
    bool render = false;
    bool with_lead_car = false;
    std::uint64_t seed = 0; // lead-car speed profile
    data::OperationalMode prefill_tag = data::OperationalMode::Expert;
    double start_s = 0.0;
};

EpisodeLog run_episode(const Issuer& issuer, model::BehavioralMode mode, const Track& track,
                       const SimConfig& cfg, int ticks, const EpisodeOptions& opts);

// issuer wrappers
Issuer oracle_issuer(model::BehavioralMode mode, const SimConfig& cfg,
                     data::OperationalMode tag = data::OperationalMode::Expert);

void write_episode_csv(const EpisodeLog& log, const std::filesystem::path& path);

} // namespace multinet::sim

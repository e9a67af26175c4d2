#include "multinet/sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>

#include "multinet/rng.hpp"

namespace multinet::sim {

namespace {

// Camera intrinsics (ground-plane pinhole).
constexpr double kCamHeight = 0.35;
constexpr double kCamFocal = 20.0;
constexpr std::size_t kHorizonRow = 8;

// Flat palette, RGB.
constexpr std::uint8_t kColorSky[3] = {135, 206, 235};
constexpr std::uint8_t kColorPath[3] = {100, 100, 108};
constexpr std::uint8_t kColorOff[3] = {150, 160, 92};
constexpr std::uint8_t kColorObstacle[3] = {205, 60, 40};
constexpr std::uint8_t kColorFoliage[3] = {22, 92, 36};
constexpr std::uint8_t kColorLead[3] = {40, 70, 210};

// Track generation.
constexpr double kTrackHalfWidth = 1.5;
constexpr double kWaypointSpacing = 0.5;
constexpr double kMinCurveRadius = 4.5;
constexpr double kFoliageWidth = 0.5;

// Expert tuning.
constexpr double kLookahead = 1.8;
constexpr double kCruiseDirect = 1.4;
constexpr double kCurvGain = 3.0;
constexpr double kObstacleAhead = 6.0;
constexpr double kObstacleBehind = 1.0;
constexpr double kObstacleRamp = 2.0;
constexpr double kObstacleEdgeClearance = 0.45;
constexpr double kObstacleSlowdown = 0.25;
constexpr double kCruiseFurtiveFast = 1.7;
constexpr double kCruiseFurtiveSlow = 0.55;
constexpr double kFurtiveDetectRange = 3.0;
constexpr double kFurtiveEdgeMargin = 0.5;
constexpr double kFollowTargetGap = 2.5;
constexpr double kFollowKp = 1.2;
constexpr double kFollowKd = 0.9;
constexpr double kLeadLength = 0.45;
constexpr double kLeadWidth = 0.32;

double sq(double v) { return v * v; }

double wrap_angle(double a) {
    while (a > M_PI) a -= 2.0 * M_PI;
    while (a < -M_PI) a += 2.0 * M_PI;
    return a;
}

} // namespace

// ---------------------------------------------------------------------------
// Track

Track::Track(std::vector<std::pair<double, double>> waypoints, double half_width, bool loop)
    : pts_(std::move(waypoints)), half_width_(half_width), loop_(loop) {
    if (pts_.size() < (loop_ ? 3u : 2u)) throw DataError("track: too few waypoints");
    if (half_width_ <= 0.0) throw DataError("track: half width must be positive");
    cum_s_.resize(pts_.size() + (loop_ ? 1 : 0));
    cum_s_[0] = 0.0;
    const std::size_t nseg = loop_ ? pts_.size() : pts_.size() - 1;
    for (std::size_t i = 0; i < nseg; ++i) {
        const auto& a = pts_[i];
        const auto& b = pts_[(i + 1) % pts_.size()];
        const double len = std::hypot(b.first - a.first, b.second - a.second);
        if (len <= 1e-9) throw DataError("track: duplicate waypoint at index " + std::to_string(i));
        cum_s_[i + 1] = cum_s_[i] + len;
    }
    total_length_ = cum_s_[nseg];
    build_terrain_grid();
}

double Track::wrap_s(double s) const {
    if (loop_) {
        s = std::fmod(s, total_length_);
        if (s < 0.0) s += total_length_;
        return s;
    }
    return std::clamp(s, 0.0, total_length_);
}

double Track::forward_gap(double s0, double s1) const {
    if (loop_) {
        double d = std::fmod(s1 - s0, total_length_);
        if (d < 0.0) d += total_length_;
        return d;
    }
    return s1 - s0;
}

bool Track::s_in_range(double s, double begin, double end) const {
    if (!loop_) return s >= begin && s <= end;
    s = wrap_s(s);
    begin = wrap_s(begin);
    end = wrap_s(end);
    if (begin <= end) return s >= begin && s <= end;
    return s >= begin || s <= end;
}

namespace {
std::size_t segment_for(const std::vector<double>& cum, double s) {
    // cum has nseg+1 entries; return i with cum[i] <= s <= cum[i+1]
    auto it = std::upper_bound(cum.begin(), cum.end(), s);
    std::size_t i = static_cast<std::size_t>(std::distance(cum.begin(), it));
    if (i > 0) --i;
    if (i >= cum.size() - 1) i = cum.size() - 2;
    return i;
}
} // namespace

std::pair<double, double> Track::point_at(double s) const {
    s = wrap_s(s);
    const std::size_t i = segment_for(cum_s_, s);
    const auto& a = pts_[i];
    const auto& b = pts_[(i + 1) % pts_.size()];
    const double len = cum_s_[i + 1] - cum_s_[i];
    const double t = (s - cum_s_[i]) / len;
    return {a.first + (b.first - a.first) * t, a.second + (b.second - a.second) * t};
}

std::pair<double, double> Track::tangent_at(double s) const {
    s = wrap_s(s);
    const std::size_t i = segment_for(cum_s_, s);
    const auto& a = pts_[i];
    const auto& b = pts_[(i + 1) % pts_.size()];
    const double len = cum_s_[i + 1] - cum_s_[i];
    return {(b.first - a.first) / len, (b.second - a.second) / len};
}

double Track::curvature_at(double s) const {
    const double h = kWaypointSpacing;
    if (!loop_ && (s < h || s > total_length_ - h)) return 0.0;
    const auto a = point_at(s - h);
    const auto b = point_at(s);
    const auto c = point_at(s + h);
    const double abx = b.first - a.first, aby = b.second - a.second;
    const double acx = c.first - a.first, acy = c.second - a.second;
    const double bcx = c.first - b.first, bcy = c.second - b.second;
    const double cross = abx * acy - aby * acx;
    const double la = std::hypot(abx, aby), lb = std::hypot(acx, acy), lc = std::hypot(bcx, bcy);
    if (la * lb * lc < 1e-12) return 0.0;
    return 2.0 * cross / (la * lb * lc);
}

TrackLocation Track::locate(double x, double y) const {
    const std::size_t nseg = loop_ ? pts_.size() : pts_.size() - 1;
    double best_d2 = std::numeric_limits<double>::max();
    TrackLocation best;
    for (std::size_t i = 0; i < nseg; ++i) {
        const auto& a = pts_[i];
        const auto& b = pts_[(i + 1) % pts_.size()];
        const double vx = b.first - a.first, vy = b.second - a.second;
        const double len2 = vx * vx + vy * vy;
        double t = ((x - a.first) * vx + (y - a.second) * vy) / len2;
        t = std::clamp(t, 0.0, 1.0);
        const double px = a.first + vx * t, py = a.second + vy * t;
        const double d2 = sq(x - px) + sq(y - py);
        if (d2 < best_d2) {
            best_d2 = d2;
            best.segment = i;
            const double len = cum_s_[i + 1] - cum_s_[i];
            best.s = cum_s_[i] + t * len;
            const double tx = vx / len, ty = vy / len;
            best.lateral = tx * (y - py) - ty * (x - px);
        }
    }
    return best;
}

void Track::build_terrain_grid() {
    double min_x = pts_[0].first, max_x = pts_[0].first;
    double min_y = pts_[0].second, max_y = pts_[0].second;
    for (const auto& p : pts_) {
        min_x = std::min(min_x, p.first);
        max_x = std::max(max_x, p.first);
        min_y = std::min(min_y, p.second);
        max_y = std::max(max_y, p.second);
    }
    const double pad = half_width_ + kFoliageWidth + 0.6;
    grid_x0_ = min_x - pad;
    grid_y0_ = min_y - pad;
    grid_cell_ = 0.1;
    grid_nx_ = static_cast<std::size_t>((max_x - min_x + 2.0 * pad) / grid_cell_) + 2;
    grid_ny_ = static_cast<std::size_t>((max_y - min_y + 2.0 * pad) / grid_cell_) + 2;
    grid_.assign(grid_nx_ * grid_ny_, 0);

    auto stamp = [&](double x, double y, std::uint8_t bit) {
        const long ix = static_cast<long>((x - grid_x0_) / grid_cell_);
        const long iy = static_cast<long>((y - grid_y0_) / grid_cell_);
        if (ix < 0 || iy < 0 || ix >= static_cast<long>(grid_nx_) || iy >= static_cast<long>(grid_ny_)) return;
        grid_[static_cast<std::size_t>(iy) * grid_nx_ + static_cast<std::size_t>(ix)] |= bit;
    };

    const double ds = 0.05, dl = 0.05;
    for (double s = 0.0; s <= total_length_; s += ds) {
        const auto c = point_at(s);
        const auto t = tangent_at(s);
        const double nx = -t.second, ny = t.first; // left normal
        for (double l = -half_width_; l <= half_width_; l += dl)
            stamp(c.first + nx * l, c.second + ny * l, 1);
    }
    for (const FoliageBand& band : foliage) {
        double remaining = loop_ ? forward_gap(band.s_begin, band.s_end) : band.s_end - band.s_begin;
        for (double off = 0.0; off <= remaining; off += ds) {
            const double s = wrap_s(band.s_begin + off);
            const auto c = point_at(s);
            const auto t = tangent_at(s);
            const double nx = -t.second, ny = t.first;
            for (double l = half_width_; l <= half_width_ + band.width; l += dl) {
                const double sl = l * static_cast<double>(band.side);
                stamp(c.first + nx * sl, c.second + ny * sl, 2);
            }
        }
    }
}

Track::TerrainClass Track::terrain_at(double x, double y) const {
    const long ix = static_cast<long>((x - grid_x0_) / grid_cell_);
    const long iy = static_cast<long>((y - grid_y0_) / grid_cell_);
    if (ix < 0 || iy < 0 || ix >= static_cast<long>(grid_nx_) || iy >= static_cast<long>(grid_ny_))
        return kOff;
    const std::uint8_t v = grid_[static_cast<std::size_t>(iy) * grid_nx_ + static_cast<std::size_t>(ix)];
    if (v & 1) return kPath;
    if (v & 2) return kFoliage;
    return kOff;
}

void Track::validate_feasibility(double car_width, double margin) const {
    if (2.0 * half_width_ < car_width + margin)
        throw DataError("track: corridor narrower than the car");
    const std::size_t nseg = loop_ ? pts_.size() : pts_.size() - 1;
    for (std::size_t i = 0; i < nseg; ++i) {
        const double len = cum_s_[i + 1] - cum_s_[i];
        if (len > 1.05)
            throw DataError("track: waypoint spacing " + std::to_string(len) + " m at segment " +
                            std::to_string(i) + " exceeds the 1 m maximum");
    }
    for (std::size_t k = 0; k < obstacles.size(); ++k) {
        const Obstacle& o = obstacles[k];
        const double gap_left = half_width_ - (o.lateral + o.radius);
        const double gap_right = half_width_ + (o.lateral - o.radius);
        if (std::max(gap_left, gap_right) < car_width + margin)
            throw DataError("track: obstacle " + std::to_string(k) + " blocks the corridor (best gap " +
                            std::to_string(std::max(gap_left, gap_right)) + " m)");
    }
    for (double s = 0.0; s < total_length_; s += 0.25) {
        const double k = curvature_at(s);
        if (std::abs(k) > 1.0 / (kMinCurveRadius * 0.8))
            throw DataError("track: curvature radius " + std::to_string(1.0 / std::abs(k)) +
                            " m below minimum near s=" + std::to_string(s));
    }
}

Track generate_track(std::uint64_t seed, double length_m, const TrackFeatures& features) {
    if (length_m < 20.0) throw DataError("generate_track: length must be >= 20 m");
    Rng rng(seed);

    const double r0 = length_m / (2.0 * M_PI);
    Track* accepted = nullptr;
    std::vector<std::pair<double, double>> pts;
    double amp_scale = 1.0;
    std::optional<Track> track;
    for (int attempt = 0; attempt < 12 && !accepted; ++attempt) {
        double amp[4], phase[4];
        for (int h = 0; h < 4; ++h) {
            amp[h] = amp_scale * 0.10 * rng.uniform(0.5, 1.0) / static_cast<double>(h + 2);
            phase[h] = rng.uniform(0.0, 2.0 * M_PI);
        }
        const std::size_t n = std::max<std::size_t>(48, static_cast<std::size_t>(length_m / kWaypointSpacing));
        pts.clear();
        pts.reserve(n);
        for (std::size_t k = 0; k < n; ++k) {
            const double th = 2.0 * M_PI * static_cast<double>(k) / static_cast<double>(n);
            double r = 1.0;
            for (int h = 0; h < 4; ++h) r += amp[h] * std::cos((h + 2) * th + phase[h]);
            pts.emplace_back(r0 * r * std::cos(th), r0 * r * std::sin(th));
        }
        track.emplace(pts, kTrackHalfWidth, true);
        bool ok = true;
        for (double s = 0.0; s < track->length(); s += 0.25) {
            if (std::abs(track->curvature_at(s)) > 1.0 / kMinCurveRadius) {
                ok = false;
                break;
            }
        }
        if (ok)
            accepted = &*track;
        else
            amp_scale *= 0.75;
    }
    if (!accepted) throw DataError("generate_track: could not satisfy curvature bound");
    Track t = std::move(*track);
    t.features = features;

    // Foliage bands on random sides covering roughly the requested fraction.
    if (features.foliage_coverage > 0.0) {
        const double cover = std::clamp(features.foliage_coverage, 0.0, 0.9);
        const double L = t.length();
        const std::size_t bands = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(cover * L / 25.0)));
        const double band_len = cover * L / static_cast<double>(bands);
        const double sector = L / static_cast<double>(bands);
        for (std::size_t b = 0; b < bands; ++b) {
            FoliageBand f;
            f.side = rng.uniform() < 0.5 ? 1 : -1;
            const double slack = std::max(0.0, sector - band_len);
            f.s_begin = t.wrap_s(sector * static_cast<double>(b) + rng.uniform(0.0, slack));
            f.s_end = t.wrap_s(f.s_begin + band_len);
            f.width = kFoliageWidth;
            t.foliage.push_back(f);
        }
    }

    // Obstacles off-center with a guaranteed passable gap and spacing.
    if (features.obstacle_count > 0) {
        const double L = t.length();
        const std::size_t max_n = static_cast<std::size_t>(L / 10.0);
        const std::size_t n = std::min(features.obstacle_count, std::max<std::size_t>(1, max_n));
        const double sector = L / static_cast<double>(n);
        for (std::size_t k = 0; k < n; ++k) {
            Obstacle o;
            o.s = t.wrap_s(sector * static_cast<double>(k) + rng.uniform(0.25, 0.75) * sector);
            const double side = rng.uniform() < 0.5 ? 1.0 : -1.0;
            o.lateral = side * rng.uniform(0.45, 0.8) * t.half_width();
            o.radius = rng.uniform(0.25, 0.4);
            const auto c = t.point_at(o.s);
            const auto tan = t.tangent_at(o.s);
            o.x = c.first - tan.second * o.lateral;
            o.y = c.second + tan.first * o.lateral;
            t.obstacles.push_back(o);
        }
    }

    t.rebuild_terrain();
    t.validate_feasibility(0.3, 0.3);
    return t;
}

Track make_straight_track(double length_m, double half_width) {
    std::vector<std::pair<double, double>> pts;
    const std::size_t n = static_cast<std::size_t>(length_m) + 1;
    pts.reserve(n);
    for (std::size_t i = 0; i < n; ++i) pts.emplace_back(static_cast<double>(i), 0.0);
    return Track(std::move(pts), half_width, false);
}

TrackFeatures default_features_for_mode(model::BehavioralMode mode, double length_m) {
    TrackFeatures f;
    switch (mode) {
        case model::BehavioralMode::Direct:
            f.obstacle_count = static_cast<std::size_t>(std::max(2.0, length_m / 30.0));
            break;
        case model::BehavioralMode::Follow:
            f.lead_car = true;
            break;
        case model::BehavioralMode::Furtive:
            f.foliage_coverage = 0.5;
            break;
    }
    return f;
}

// ---------------------------------------------------------------------------
// Stepping

void SimConfig::validate() const {
    if (dt_s <= 0.0) throw ConfigError("sim config: dt must be positive");
    if (latency_ticks < 0) throw ConfigError("sim config: latency must be >= 0 ticks");
    if (v_max <= 0.0) throw ConfigError("sim config: v_max must be positive");
    if (max_wheel_rad <= 0.0 || max_wheel_rad >= M_PI / 2)
        throw ConfigError("sim config: max wheel angle out of range");
    if (wheelbase <= 0.0) throw ConfigError("sim config: wheelbase must be positive");
}

std::pair<double, double> control_maps(double steer, double motor, const SimConfig& cfg) {
    steer = std::clamp(steer, 0.0, 1.0);
    motor = std::clamp(motor, 0.0, 1.0);
    return {(2.0 * steer - 1.0) * cfg.max_wheel_rad, (2.0 * motor - 1.0) * cfg.v_max};
}

StepResult step(const CarState& car, const Controls& controls, const Track& track, const SimConfig& cfg) {
    const auto [wheel, v_target] = control_maps(controls.steer, controls.motor, cfg);
    StepResult r;
    r.car = car;
    const double alpha = 1.0 - std::exp(-cfg.dt_s / cfg.tau_speed_s);
    r.car.speed += (v_target - r.car.speed) * alpha;
    r.car.x += r.car.speed * std::cos(r.car.heading) * cfg.dt_s;
    r.car.y += r.car.speed * std::sin(r.car.heading) * cfg.dt_s;
    // wheel is rightward-positive (paper's steer convention); pose math is
    // CCW-positive, hence the sign flip.
    r.car.heading = wrap_angle(r.car.heading - r.car.speed * std::tan(wheel) / r.car.wheelbase * cfg.dt_s);

    const TrackLocation loc = track.locate(r.car.x, r.car.y);
    r.collided = std::abs(loc.lateral) > track.half_width() - cfg.car_radius;
    if (!r.collided) {
        for (const Obstacle& o : track.obstacles) {
            if (sq(r.car.x - o.x) + sq(r.car.y - o.y) < sq(o.radius + cfg.car_radius)) {
                r.collided = true;
                break;
            }
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Renderer

std::vector<std::uint8_t> render(const CarState& car, const Track& track, Eye eye, const SimConfig& cfg,
                                 const CarState* lead_car) {
    const std::size_t H = cfg.img_h, W = cfg.img_w;
    std::vector<std::uint8_t> img(H * W * 3);

    const double ch = std::cos(car.heading), sh = std::sin(car.heading);
    const double fwdx = ch, fwdy = sh;
    const double rightx = sh, righty = -ch;
    const double eye_off = (eye == Eye::Right ? 0.5 : -0.5) * cfg.camera_baseline;
    const double ex = car.x + rightx * eye_off;
    const double ey = car.y + righty * eye_off;

    double lch = 0.0, lsh = 0.0;
    if (lead_car) {
        lch = std::cos(lead_car->heading);
        lsh = std::sin(lead_car->heading);
    }

    for (std::size_t v = 0; v < H; ++v) {
        std::uint8_t* row = img.data() + v * W * 3;
        if (v < kHorizonRow) {
            for (std::size_t u = 0; u < W; ++u) {
                row[u * 3 + 0] = kColorSky[0];
                row[u * 3 + 1] = kColorSky[1];
                row[u * 3 + 2] = kColorSky[2];
            }
            continue;
        }
        const double d = kCamHeight * kCamFocal / (static_cast<double>(v - kHorizonRow) + 0.5);
        for (std::size_t u = 0; u < W; ++u) {
            const double lat = (static_cast<double>(u) - static_cast<double>(W) / 2.0 + 0.5) * d / kCamFocal;
            const double px = ex + fwdx * d + rightx * lat;
            const double py = ey + fwdy * d + righty * lat;

            const std::uint8_t* color = nullptr;
            if (lead_car) {
                const double dx = px - lead_car->x, dy = py - lead_car->y;
                const double lx = lch * dx + lsh * dy;
                const double ly = -lsh * dx + lch * dy;
                if (std::abs(lx) <= kLeadLength * 0.5 && std::abs(ly) <= kLeadWidth * 0.5)
                    color = kColorLead;
            }
            if (!color) {
                for (const Obstacle& o : track.obstacles) {
                    if (sq(px - o.x) + sq(py - o.y) <= sq(o.radius)) {
                        color = kColorObstacle;
                        break;
                    }
                }
            }
            if (!color) {
                switch (track.terrain_at(px, py)) {
                    case Track::kPath: color = kColorPath; break;
                    case Track::kFoliage: color = kColorFoliage; break;
                    default: color = kColorOff; break;
                }
            }
            row[u * 3 + 0] = color[0];
            row[u * 3 + 1] = color[1];
            row[u * 3 + 2] = color[2];
        }
    }
    return img;
}

// ---------------------------------------------------------------------------
// Experts

namespace {

// Lateral target offset induced by the nearest relevant obstacle around
// arclength s, with raised ramps in and out. Returns 0 when inactive.
double obstacle_offset(const Track& track, double s, const SimConfig& cfg, bool* active) {
    if (active) *active = false;
    double best_ds = std::numeric_limits<double>::max();
    const Obstacle* best = nullptr;
    for (const Obstacle& o : track.obstacles) {
        double ds = track.forward_gap(s, o.s);
        if (track.is_loop() && ds > track.length() / 2.0) ds -= track.length();
        if (ds < -kObstacleBehind || ds > kObstacleAhead) continue;
        if (std::abs(ds) < std::abs(best_ds)) {
            best_ds = ds;
            best = &o;
        }
    }
    if (!best) return 0.0;
    double w = 1.0;
    if (best_ds > kObstacleAhead - kObstacleRamp)
        w = (kObstacleAhead - best_ds) / kObstacleRamp;
    else if (best_ds < -kObstacleBehind + kObstacleRamp * 0.5)
        w = (best_ds + kObstacleBehind) / (kObstacleRamp * 0.5);
    w = std::clamp(w, 0.0, 1.0);
    if (active) *active = w > 0.0;
    const double side = best->lateral >= 0.0 ? 1.0 : -1.0;
    double target = best->lateral - side * (best->radius + kObstacleEdgeClearance + cfg.car_radius);
    target = std::clamp(target, -track.half_width() + 0.5, track.half_width() - 0.5);
    return target * w;
}

// Foliage proximity weight in [0,1] and the active band side.
double foliage_weight(const Track& track, double s, int* side) {
    double best_w = 0.0;
    for (const FoliageBand& f : track.foliage) {
        double w = 0.0;
        if (track.s_in_range(s, f.s_begin, f.s_end)) {
            w = 1.0;
        } else {
            const double to_start = track.forward_gap(s, f.s_begin);
            if (to_start >= 0.0 && to_start <= kFurtiveDetectRange)
                w = 1.0 - to_start / kFurtiveDetectRange;
        }
        if (w > best_w) {
            best_w = w;
            if (side) *side = f.side;
        }
    }
    return best_w;
}

double steer_toward(const CarState& car, const Track& track, double target_offset, const SimConfig& cfg,
                    double s_hint) {
    const double s_la = s_hint + kLookahead;
    const auto p = track.point_at(s_la);
    const auto t = track.tangent_at(s_la);
    const double tx = p.first - t.second * target_offset;
    const double ty = p.second + t.first * target_offset;
    const double dx = tx - car.x, dy = ty - car.y;
    const double lf = dx * std::cos(car.heading) + dy * std::sin(car.heading);
    const double ll = -dx * std::sin(car.heading) + dy * std::cos(car.heading);
    const double dist = std::max(0.3, std::hypot(dx, dy));
    const double alpha = std::atan2(ll, lf);
    const double delta_ccw = std::atan2(2.0 * car.wheelbase * std::sin(alpha), dist);
    const double wheel_right = -delta_ccw; // rightward-positive control convention
    return std::clamp(0.5 + 0.5 * wheel_right / cfg.max_wheel_rad, 0.0, 1.0);
}

double motor_for_speed(double v_target, const SimConfig& cfg) {
    return std::clamp(0.5 + 0.5 * v_target / cfg.v_max, 0.0, 1.0);
}

} // namespace

Controls expert_direct(const CarState& car, const Track& track, const SimConfig& cfg) {
    const TrackLocation loc = track.locate(car.x, car.y);
    bool near_obstacle = false;
    const double offset = obstacle_offset(track, loc.s + kLookahead, cfg, &near_obstacle);
    const double curv = std::abs(track.curvature_at(loc.s + 2.0));
    double v = kCruiseDirect / (1.0 + kCurvGain * curv);
    if (near_obstacle) v *= 1.0 - kObstacleSlowdown;
    Controls c;
    c.steer = steer_toward(car, track, offset, cfg, loc.s);
    c.motor = motor_for_speed(v, cfg);
    return c;
}

Controls expert_follow(const CarState& car, const CarState* lead_car, const Track& track,
                       const SimConfig& cfg) {
    if (!lead_car) throw DataError("expert_follow: lead car missing");
    const TrackLocation loc = track.locate(car.x, car.y);
    bool near_obstacle = false;
    const double offset = obstacle_offset(track, loc.s + kLookahead, cfg, &near_obstacle);
    const TrackLocation lead_loc = track.locate(lead_car->x, lead_car->y);
    const double gap = track.forward_gap(loc.s, lead_loc.s);
    const double err = gap - kFollowTargetGap;
    const double err_rate = lead_car->speed - car.speed;
    const double v = std::clamp(car.speed + kFollowKp * err + kFollowKd * err_rate, 0.0, cfg.v_max * 0.95);
    Controls c;
    c.steer = steer_toward(car, track, offset, cfg, loc.s);
    c.motor = motor_for_speed(v, cfg);
    return c;
}

Controls expert_furtive(const CarState& car, const Track& track, const SimConfig& cfg) {
    const TrackLocation loc = track.locate(car.x, car.y);
    bool near_obstacle = false;
    const double obst = obstacle_offset(track, loc.s + kLookahead, cfg, &near_obstacle);
    int side = 1;
    const double w = foliage_weight(track, loc.s + kLookahead, &side);
    double offset, v;
    if (near_obstacle) {
        offset = obst;
        v = kCruiseFurtiveSlow;
    } else {
        offset = static_cast<double>(side) * (track.half_width() - kFurtiveEdgeMargin) * w;
        v = kCruiseFurtiveFast + (kCruiseFurtiveSlow - kCruiseFurtiveFast) * w;
    }
    const double curv = std::abs(track.curvature_at(loc.s + 2.0));
    v = std::min(v, kCruiseFurtiveFast / (1.0 + kCurvGain * curv));
    Controls c;
    c.steer = steer_toward(car, track, offset, cfg, loc.s);
    c.motor = motor_for_speed(v, cfg);
    return c;
}

Controls expert_for_mode(model::BehavioralMode mode, const CarState& car, const CarState* lead_car,
                         const Track& track, const SimConfig& cfg) {
    switch (mode) {
        case model::BehavioralMode::Direct: return expert_direct(car, track, cfg);
        case model::BehavioralMode::Follow: return expert_follow(car, lead_car, track, cfg);
        case model::BehavioralMode::Furtive: return expert_furtive(car, track, cfg);
    }
    throw DataError("expert_for_mode: bad mode");
}

// ---------------------------------------------------------------------------
// Episodes

std::size_t EpisodeLog::count_op(data::OperationalMode m) const {
    std::size_t n = 0;
    for (const TickRecord& t : ticks)
        if (t.op_mode == m) ++n;
    return n;
}

Issuer oracle_issuer(model::BehavioralMode mode, const SimConfig& cfg, data::OperationalMode tag) {
    return [mode, cfg, tag](const PolicyContext& ctx) {
        return std::make_pair(expert_for_mode(mode, *ctx.car, ctx.lead, *ctx.track, cfg), tag);
    };
}

EpisodeLog run_episode(const Issuer& issuer, model::BehavioralMode mode, const Track& track,
                       const SimConfig& cfg, int ticks, const EpisodeOptions& opts) {
    cfg.validate();
    if (ticks <= 0) throw DataError("run_episode: tick count must be positive");

    EpisodeLog log;
    log.mode = mode;
    log.grid_ms = static_cast<std::uint64_t>(std::llround(cfg.dt_s * 1000.0));
    log.has_images = opts.render;
    log.ticks.reserve(static_cast<std::size_t>(ticks));

    CarState car;
    car.wheelbase = cfg.wheelbase;
    {
        const auto p = track.point_at(opts.start_s);
        const auto t = track.tangent_at(opts.start_s);
        car.x = p.first;
        car.y = p.second;
        car.heading = std::atan2(t.second, t.first);
    }
    std::optional<CarState> lead;
    Rng rng(opts.seed);
    double lead_period = 10.0, lead_phase = 0.0;
    if (opts.with_lead_car) {
        const double lead_s = opts.start_s + kFollowTargetGap + 1.0;
        const auto p = track.point_at(lead_s);
        const auto t = track.tangent_at(lead_s);
        CarState l;
        l.wheelbase = cfg.wheelbase;
        l.x = p.first;
        l.y = p.second;
        l.heading = std::atan2(t.second, t.first);
        l.speed = 0.0;
        lead = l;
        lead_period = rng.uniform(8.0, 14.0);
        lead_phase = rng.uniform(0.0, 2.0 * M_PI);
    }

    std::deque<std::pair<Controls, data::OperationalMode>> queue;
    for (int i = 0; i < cfg.latency_ticks; ++i) queue.emplace_back(Controls{0.5, 0.5}, opts.prefill_tag);

    std::vector<std::uint8_t> prev_left, prev_right;
    for (int t = 0; t < ticks; ++t) {
        if (opts.render) {
            log.left_images.push_back(render(car, track, Eye::Left, cfg, lead ? &*lead : nullptr));
            log.right_images.push_back(render(car, track, Eye::Right, cfg, lead ? &*lead : nullptr));
        }

        PolicyContext ctx;
        ctx.tick = t;
        ctx.car = &car;
        ctx.lead = lead ? &*lead : nullptr;
        ctx.track = &track;
        if (opts.render) {
            ctx.left_t = &log.left_images.back();
            ctx.right_t = &log.right_images.back();
            // tick 0 duplicates the first frame as its own history
            ctx.left_tm1 = t > 0 ? &log.left_images[static_cast<std::size_t>(t) - 1] : ctx.left_t;
            ctx.right_tm1 = t > 0 ? &log.right_images[static_cast<std::size_t>(t) - 1] : ctx.right_t;
        }

        auto [issued, tag] = issuer(ctx);
        if (!std::isfinite(issued.steer) || !std::isfinite(issued.motor))
            throw TrainError("run_episode: non-finite policy output at tick " + std::to_string(t));

        queue.emplace_back(issued, tag);
        const auto [acting, acting_tag] = queue.front();
        queue.pop_front();

        const TrackLocation loc = track.locate(car.x, car.y);
        TickRecord rec;
        rec.t_ms = static_cast<std::uint64_t>(t) * log.grid_ms;
        rec.car = car;
        rec.applied = acting;
        rec.op_mode = acting_tag;
        rec.cte = loc.lateral;
        rec.collision = std::abs(loc.lateral) > track.half_width() - cfg.car_radius;
        if (!rec.collision) {
            for (const Obstacle& o : track.obstacles) {
                if (sq(car.x - o.x) + sq(car.y - o.y) < sq(o.radius + cfg.car_radius)) {
                    rec.collision = true;
                    break;
                }
            }
        }
        if (lead) {
            const TrackLocation lead_loc = track.locate(lead->x, lead->y);
            rec.gap = track.forward_gap(loc.s, lead_loc.s);
        }
        log.ticks.push_back(rec);

        car = step(car, acting, track, cfg).car;
        if (lead) {
            const double tt = static_cast<double>(t) * cfg.dt_s;
            const double v_lead = 0.55 + 0.35 * std::sin(2.0 * M_PI * tt / lead_period + lead_phase);
            Controls lc;
            const TrackLocation lloc = track.locate(lead->x, lead->y);
            lc.steer = steer_toward(*lead, track, 0.0, cfg, lloc.s);
            lc.motor = motor_for_speed(v_lead, cfg);
            *lead = step(*lead, lc, track, cfg).car; // scripted scenery, no latency queue
        }
    }
    return log;
}

void write_episode_csv(const EpisodeLog& log, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("episode csv: cannot open for writing: " + path.string());
    f << "t_ms,x,y,heading,speed,steer,motor,op_mode,cte,collision,gap\n";
    char buf[320];
    for (const TickRecord& r : log.ticks) {
        std::snprintf(buf, sizeof(buf), "%llu,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%s,%.9g,%d,%.9g\n",
                      static_cast<unsigned long long>(r.t_ms), r.car.x, r.car.y, r.car.heading, r.car.speed,
                      r.applied.steer, r.applied.motor, data::op_mode_name(r.op_mode), r.cte,
                      r.collision ? 1 : 0, r.gap);
        f << buf;
    }
    if (!f) throw IoError("episode csv: write failed: " + path.string());
}

} // namespace multinet::sim

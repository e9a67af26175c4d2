#include "multinet/dagger.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace multinet::dagger {

void OverridePolicy::validate(double track_half_width) const {
    if (!(0.0 < release_cte && release_cte < engage_cte && engage_cte < track_half_width))
        throw ConfigError("override policy: need 0 < release (" + std::to_string(release_cte) +
                          ") < engage (" + std::to_string(engage_cte) + ") < half width (" +
                          std::to_string(track_half_width) + ")");
    if (collision_horizon < 0) throw ConfigError("override policy: negative collision horizon");
}

namespace {

// Straight-line projection of the car over the horizon; true when it leaves
// the corridor or crosses an inflated obstacle.
bool projected_collision(const sim::CarState& car, const sim::Track& track, const sim::SimConfig& cfg,
                         int horizon_ticks) {
    if (horizon_ticks <= 0) return false;
    const double reach = std::abs(car.speed) * cfg.dt_s * static_cast<double>(horizon_ticks);
    if (reach < 1e-6) return false;
    const double dx = std::cos(car.heading), dy = std::sin(car.heading);
    const double sgn = car.speed >= 0.0 ? 1.0 : -1.0;
    // endpoint and midpoint corridor checks
    for (double frac : {0.5, 1.0}) {
        const double px = car.x + sgn * dx * reach * frac;
        const double py = car.y + sgn * dy * reach * frac;
        const sim::TrackLocation loc = track.locate(px, py);
        if (std::abs(loc.lateral) > track.half_width() - cfg.car_radius) return true;
    }
    for (const sim::Obstacle& o : track.obstacles) {
        // distance from the obstacle center to the projected segment
        const double ox = o.x - car.x, oy = o.y - car.y;
        double t = (ox * sgn * dx + oy * sgn * dy) / reach;
        t = std::clamp(t, 0.0, 1.0);
        const double cx = sgn * dx * reach * t - ox;
        const double cy = sgn * dy * reach * t - oy;
        if (cx * cx + cy * cy < (o.radius + cfg.car_radius) * (o.radius + cfg.car_radius)) return true;
    }
    return false;
}

} // namespace

sim::EpisodeLog supervise_policy(const PolicyFn& policy_fn, bool needs_images, model::BehavioralMode mode,
                                 const sim::Track& track, const sim::SimConfig& cfg, int ticks,
                                 const OverridePolicy& policy, std::uint64_t episode_seed) {
    policy.validate(track.half_width());

    bool correcting = false;
    sim::Issuer issuer = [&, mode](const sim::PolicyContext& ctx) {
        const sim::TrackLocation loc = ctx.track->locate(ctx.car->x, ctx.car->y);
        const double cte = std::abs(loc.lateral);
        const bool projected = projected_collision(*ctx.car, *ctx.track, cfg, policy.collision_horizon);
        if (!correcting && (cte > policy.engage_cte || projected))
            correcting = true;
        else if (correcting && cte < policy.release_cte && !projected)
            correcting = false;

        if (correcting) {
            return std::make_pair(sim::expert_for_mode(mode, *ctx.car, ctx.lead, *ctx.track, cfg),
                                  data::OperationalMode::Correctional);
        }
        return std::make_pair(policy_fn(ctx), data::OperationalMode::Autonomous);
    };

    sim::EpisodeOptions opts;
    opts.render = needs_images;
    opts.with_lead_car = (mode == model::BehavioralMode::Follow);
    opts.seed = episode_seed;
    opts.prefill_tag = data::OperationalMode::Autonomous;
    return sim::run_episode(issuer, mode, track, cfg, ticks, opts);
}

sim::EpisodeLog supervise(const model::Z2Color& net, model::BehavioralMode mode, const sim::Track& track,
                          const sim::SimConfig& cfg, int ticks, const OverridePolicy& policy,
                          std::uint64_t episode_seed) {
    if (net.is_training()) throw TrainError("supervise: network must be in eval mode");
    const bool multi = net.config().variant == model::Variant::MultiNet;

    PolicyFn network_policy = [&net, multi, mode, &cfg](const sim::PolicyContext& ctx) {
        if (!ctx.left_t) throw DataError("supervise: rendering required for the network policy");
        std::vector<std::uint8_t> bytes;
        bytes.reserve(4 * ctx.left_t->size());
        bytes.insert(bytes.end(), ctx.left_t->begin(), ctx.left_t->end());
        bytes.insert(bytes.end(), ctx.right_t->begin(), ctx.right_t->end());
        bytes.insert(bytes.end(), ctx.left_tm1->begin(), ctx.left_tm1->end());
        bytes.insert(bytes.end(), ctx.right_tm1->begin(), ctx.right_tm1->end());
        const Tensor input = model::bytes_to_input(bytes.data(), cfg.img_h, cfg.img_w);
        const nn::TrajectoryPrediction pred =
            net.forward(input, multi ? std::optional<model::BehavioralMode>(mode) : std::nullopt);
        const auto [steer, motor] = model::actuation(pred);
        return sim::Controls{steer, motor};
    };
    return supervise_policy(network_policy, true, mode, track, cfg, ticks, policy, episode_seed);
}

data::Dataset harvest(const sim::EpisodeLog& log) {
    if (!log.has_images) throw DataError("harvest: episode log has no rendered images");
    const std::size_t n = log.ticks.size();

    data::RawStream steer, motor;
    steer.samples.reserve(n);
    motor.samples.reserve(n);
    data::ImageStream images;
    images.samples.reserve(n);
    for (std::size_t t = 0; t < n; ++t) {
        const sim::TickRecord& r = log.ticks[t];
        steer.samples.push_back({r.t_ms, r.applied.steer});
        motor.samples.push_back({r.t_ms, r.applied.motor});
        images.samples.push_back({r.t_ms, log.left_images[t], log.right_images[t]});
    }

    const data::GriddedSignals signals = data::interpolate_streams(steer, motor, log.grid_ms);
    std::vector<data::OperationalMode> tags;
    tags.reserve(signals.steer.size());
    for (std::size_t i = 0; i < signals.steer.size(); ++i) {
        const std::size_t tick = static_cast<std::size_t>(signals.first_tick) + i;
        tags.push_back(log.ticks[tick].op_mode);
    }
    data::Dataset all = data::assemble_moments(signals, images, log.mode, tags);

    // Label purity: the origin tick and the ten label ticks must all be
    // expert-sourced.
    data::Dataset out;
    for (data::DataMoment& m : all.moments) {
        const std::size_t tick = m.timestamp_ms / log.grid_ms;
        bool pure = true;
        for (std::size_t k = 0; k <= nn::kTrajectorySteps && pure; ++k) {
            if (log.ticks[tick + k].op_mode == data::OperationalMode::Autonomous) pure = false;
        }
        if (pure) out.moments.push_back(std::move(m));
    }
    return out;
}

const OverridePolicy& DaggerConfig::override_for(model::BehavioralMode mode) const {
    switch (mode) {
        case model::BehavioralMode::Direct: return override_direct;
        case model::BehavioralMode::Follow: return override_follow;
        case model::BehavioralMode::Furtive: return override_furtive;
    }
    return override_direct;
}

std::vector<AggregationRound> iterate(const data::Dataset& initial, const DaggerConfig& cfg) {
    if (cfg.rounds < 1) throw ConfigError("dagger: rounds must be >= 1");
    if (initial.size() == 0) throw DataError("dagger: empty initial dataset");

    data::Dataset pool = initial;
    std::vector<AggregationRound> rounds;
    for (int r = 1; r <= cfg.rounds; ++r) {
        AggregationRound round;
        round.round = r;
        try {
            const data::Dataset balanced = data::balance_by_mode(pool, Rng::derive(cfg.seed, 10 * r));
            const data::SplitResult parts = data::split(balanced, cfg.val_fraction, Rng::derive(cfg.seed, 10 * r + 1));

            model::NetworkConfig nc = cfg.net;
            nc.seed = Rng::derive(cfg.seed, 10 * r + 2);
            model::Z2Color net(nc);
            harness::TrainConfig tc = cfg.train;
            tc.seed = Rng::derive(cfg.seed, 10 * r + 3);
            const harness::MomentView train_view = harness::make_view(parts.train);
            const harness::MomentView val_view = harness::make_view(parts.validation);
            harness::train(net, harness::fixed_provider(train_view), val_view, tc);

            data::Dataset harvested;
            double autonomy_sum = 0.0;
            std::size_t autonomy_n = 0;
            for (model::BehavioralMode mode : model::kAllModes) {
                for (int e = 0; e < cfg.episodes_per_mode; ++e) {
                    const std::uint64_t esd = Rng::derive(cfg.seed, 1000 * r + 10 * static_cast<int>(mode) + e);
                    const sim::Track track =
                        sim::generate_track(esd, cfg.track_length_m, sim::default_features_for_mode(mode, cfg.track_length_m));
                    sim::EpisodeLog log =
                        supervise(net, mode, track, cfg.sim, cfg.episode_ticks, cfg.override_for(mode), esd);
                    harvested.append(harvest(log));
                    ++round.episodes;
                    if (mode != model::BehavioralMode::Follow) {
                        autonomy_sum += harness::autonomy(log);
                        ++autonomy_n;
                    }
                }
            }
            const auto hc = harvested.op_counts();
            round.harvested_expert = hc[static_cast<std::size_t>(data::OperationalMode::Expert)];
            round.harvested_correctional = hc[static_cast<std::size_t>(data::OperationalMode::Correctional)];
            pool.append(std::move(harvested));
            round.dataset_size = pool.size();
            round.correctional_fraction = data::mix_report(pool).correctional_fraction;
            round.autonomy_pct = autonomy_n > 0 ? autonomy_sum / static_cast<double>(autonomy_n) : 0.0;
        } catch (const TrainError& e) {
            throw TrainError("dagger: round " + std::to_string(r) + " aborted: " + e.what());
        }
        rounds.push_back(round);
    }
    return rounds;
}

void write_rounds_csv(const std::vector<AggregationRound>& rounds, const std::filesystem::path& path) {
    std::ofstream f(path);
    if (!f) throw IoError("dagger csv: cannot open for writing: " + path.string());
    f << "round,episodes,harvested_expert,harvested_correctional,dataset_size,correctional_fraction,autonomy_pct\n";
    char buf[200];
    for (const AggregationRound& r : rounds) {
        std::snprintf(buf, sizeof(buf), "%d,%zu,%zu,%zu,%zu,%.9g,%.9g\n", r.round, r.episodes,
                      r.harvested_expert, r.harvested_correctional, r.dataset_size, r.correctional_fraction,
                      r.autonomy_pct);
        f << buf;
    }
    if (!f) throw IoError("dagger csv: write failed: " + path.string());
}

} // namespace multinet::dagger

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "multinet/data.hpp"
#include "multinet/harness.hpp"
#include "multinet/model.hpp"
#include "multinet/sim.hpp"

// Corrective data aggregation: autonomous driving with a rule-based expert
// override, harvesting of expert-sourced moments, and iterative merging into
// the active dataset.
namespace multinet::dagger {

struct OverridePolicy {
    double engage_cte = 0.9;     // engage when |cte| exceeds this
    double release_cte = 0.5;    // release when |cte| drops below this
    int collision_horizon = 12;  // ticks of straight-line projection

    void validate(double track_half_width) const;
};

// Per-tick supervision: the policy acts autonomously until |cte| exceeds the
// engage threshold or the straight-line projection hits an obstacle or the
// corridor edge; the oracle then issues controls until |cte| falls below the
// release threshold and the projection is clean. All issued controls pass
// through the actuation latency queue.
using PolicyFn = std::function<sim::Controls(const sim::PolicyContext&)>;

sim::EpisodeLog supervise_policy(const PolicyFn& policy_fn, bool needs_images, model::BehavioralMode mode,
                                 const sim::Track& track, const sim::SimConfig& cfg, int ticks,
                                 const OverridePolicy& policy, std::uint64_t episode_seed = 0);

// Network-driven supervision; the network must be in eval mode.
sim::EpisodeLog supervise(const model::Z2Color& net, model::BehavioralMode mode, const sim::Track& track,
                          const sim::SimConfig& cfg, int ticks, const OverridePolicy& policy,
                          std::uint64_t episode_seed = 0);

// Moments whose origin tick and all ten label ticks carry expert-sourced
// controls (Expert or Correctional); autonomous ticks never contribute labels.
data::Dataset harvest(const sim::EpisodeLog& log);

struct AggregationRound {
    int round = 0;
    std::size_t episodes = 0;
    std::size_t harvested_expert = 0;
    std::size_t harvested_correctional = 0;
    std::size_t dataset_size = 0;          // aggregated pool after the merge
    double correctional_fraction = 0.0;    // of the pool
    double autonomy_pct = 0.0;             // mean over direct+furtive episodes
};

struct DaggerConfig {
    int rounds = 4;
    int episodes_per_mode = 1;
    int episode_ticks = 900;
    double track_length_m = 120.0;
    double val_fraction = 0.10;
    std::uint64_t seed = 0;
    sim::SimConfig sim;
    model::NetworkConfig net;       // MultiNet variant
    harness::TrainConfig train;
    OverridePolicy override_direct{0.9, 0.5, 12};
    OverridePolicy override_follow{0.9, 0.5, 12};
    OverridePolicy override_furtive{1.3, 1.15, 12};

    const OverridePolicy& override_for(model::BehavioralMode mode) const;
};

// Per round: train a fresh network on the balanced pool, run supervised
// episodes in every behavioral mode, harvest, merge (the pool only grows),
// and score autonomy. Training uses a balanced view; merged moments are never
// discarded.
std::vector<AggregationRound> iterate(const data::Dataset& initial, const DaggerConfig& cfg);

void write_rounds_csv(const std::vector<AggregationRound>& rounds, const std::filesystem::path& path);

} // namespace multinet::dagger

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "multinet/data.hpp"
#include "multinet/model.hpp"
#include "multinet/sim.hpp"

// Training loops, the MultiNet-vs-MTL comparisons, autonomy and delta-loss
// metrics, model selection and report emission.
namespace multinet::harness {

struct TrainConfig {
    int epochs = 24;
    int batch = 32;
    double adadelta_rho = 0.9;
    double adadelta_eps = 1e-6;
    int trials = 8;
    std::uint64_t seed = 0;
    int threads = 0; // 0 = hardware concurrency

    void validate() const;
};

struct LossCurve {
    std::vector<double> train_loss; // per epoch, mean over the epoch's moments
    std::vector<double> val_loss;   // per epoch, final-step MSE over the validation set
};

using MomentView = std::vector<const data::DataMoment*>;
using PerModeViews = std::array<MomentView, 3>;

MomentView make_view(const data::Dataset& ds);
MomentView filter_view(const MomentView& view, model::BehavioralMode mode);

// The provider returns the moments for one epoch (the training loop shuffles
// and batches them). A fixed provider returns the same set every epoch; the
// union-resampling provider draws a balanced budget-sized sample from a
// multi-mode pool each epoch.
using EpochProvider = std::function<MomentView(int epoch, Rng& rng)>;

EpochProvider fixed_provider(MomentView view);
EpochProvider balanced_resample_provider(PerModeViews pool, std::size_t budget);

using CheckpointSink = std::function<void(int epoch, const model::Z2Color&)>;

// Per epoch: seeded shuffle, minibatch Adadelta steps on the training loss,
// then a full validation pass on the final-step loss. A trailing batch of
// size 1 is merged into its predecessor (batch statistics need >= 2).
LossCurve train(model::Z2Color& net, const EpochProvider& provider, const MomentView& val_set,
                const TrainConfig& cfg, const CheckpointSink& sink = {});

// Mean validation loss (final-step MSE) of the network in eval mode.
double evaluate(const model::Z2Color& net, const MomentView& val_set);

// ---------------------------------------------------------------------------
// Experiments

struct CurveSet {
    std::string network;
    std::vector<LossCurve> trials;
};

struct AutonomyRow {
    std::string network;
    std::string mode;
    double autonomy_pct = 0.0;
};

struct DeltaLossRow {
    std::string mode;
    double mtl_loss = 0.0;
    double multinet_loss = 0.0;
    double delta_pct = 0.0;
};

struct ExperimentReport {
    std::string experiment_id;
    std::size_t epochs = 0;
    std::size_t trials = 0;
    std::vector<CurveSet> curves;          // raw per-trial curves per network
    std::vector<std::string> summarized;   // networks carrying mean +/- CI in the summary
    std::vector<AutonomyRow> autonomy;
    std::vector<DeltaLossRow> delta_loss;
    std::size_t selected_trial = 0;
    std::size_t selected_epoch = 0;
};

struct ComparisonResult {
    ExperimentReport report;
    std::vector<model::Z2Color> multinets; // final-epoch MultiNet per trial
    std::vector<model::Z2Color> mtls;      // final-epoch MTL per trial (per-mode comparison only)
};

// One MultiNet on the balanced union (equal per-epoch budget via resampling)
// against three per-mode MTL specialists; per-epoch MTL loss is the mean of
// the three. Per-mode training sets must have equal sizes.
ComparisonResult multinet_vs_mtl(const PerModeViews& train_sets, const PerModeViews& val_sets,
                                 const TrainConfig& cfg);

// MultiNet trained on all modes, MTL only on `mode`; both validated on that
// mode's validation set only.
ComparisonResult per_mode_comparison(model::BehavioralMode mode, const PerModeViews& train_sets,
                                     const PerModeViews& val_sets, const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Metrics and selection

// (trial, epoch) minimizing validation loss; ties break to the lower epoch,
// then the lower trial.
std::pair<std::size_t, std::size_t> select_model(const std::vector<LossCurve>& trials);

// (1 - correction_time / elapsed_time) * 100 over an episode log.
double autonomy(const sim::EpisodeLog& log);
double autonomy_from_counts(std::size_t correctional_ticks, std::size_t total_ticks);

// (mtl - multinet) / multinet * 100.
double delta_loss_percent(double mtl_loss, double multinet_loss);

struct ConfidenceInterval {
    double mean = 0.0;
    double half_width = 0.0;
};

// Two-sided 95% Student-t interval over per-trial samples.
ConfidenceInterval confidence_interval(const std::vector<double>& samples);

// Student-t quantile (inverse CDF), p in (0,1), dof >= 1.
double t_quantile(double p, int dof);

// ---------------------------------------------------------------------------
// Emission

// Writes curves.csv, autonomy.csv, delta_loss.csv and summary.txt; re-emitting
// an identical report is byte-identical.
void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir);

// Run a set of independent jobs on a small thread pool (deterministic results:
// jobs own their outputs by index).
void run_parallel(std::vector<std::function<void()>> jobs, int threads);

} // namespace multinet::harness

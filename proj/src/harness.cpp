#include "multinet/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

namespace multinet::harness {

void TrainConfig::validate() const {
    if (epochs < 1) throw TrainError("train config: epochs must be >= 1");
    if (batch < 2) throw TrainError("train config: batch must be >= 2 (batch statistics)");
    if (trials < 1) throw TrainError("train config: trials must be >= 1");
    if (!(adadelta_rho > 0.0 && adadelta_rho < 1.0)) throw TrainError("train config: rho must be in (0,1)");
    if (!(adadelta_eps > 0.0)) throw TrainError("train config: eps must be positive");
}

MomentView make_view(const data::Dataset& ds) {
    MomentView v;
    v.reserve(ds.size());
    for (const data::DataMoment& m : ds.moments) v.push_back(&m);
    return v;
}

MomentView filter_view(const MomentView& view, model::BehavioralMode mode) {
    MomentView v;
    for (const data::DataMoment* m : view)
        if (m->behavioral == mode) v.push_back(m);
    return v;
}

EpochProvider fixed_provider(MomentView view) {
    return [view = std::move(view)](int, Rng&) { return view; };
}

EpochProvider balanced_resample_provider(PerModeViews pool, std::size_t budget) {
    for (const MomentView& v : pool)
        if (v.empty()) throw DataError("balanced resample: a mode pool is empty");
    return [pool = std::move(pool), budget](int, Rng& rng) {
        MomentView out;
        out.reserve(budget);
        for (std::size_t m = 0; m < 3; ++m) {
            std::size_t want = budget / 3 + (m < budget % 3 ? 1 : 0);
            const MomentView& src = pool[m];
            if (want > src.size())
                throw DataError("balanced resample: budget exceeds pool for mode " +
                                std::string(model::mode_name(static_cast<model::BehavioralMode>(m))));
            // partial Fisher-Yates over an index array
            std::vector<std::size_t> idx(src.size());
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            for (std::size_t i = 0; i < want; ++i) {
                const std::size_t j = i + rng.uniform_index(idx.size() - i);
                std::swap(idx[i], idx[j]);
                out.push_back(src[idx[i]]);
            }
        }
        return out;
    };
}

namespace {

struct BatchTensors {
    std::vector<Tensor> inputs;
    std::vector<model::BehavioralMode> modes;
    std::vector<const nn::TrajectoryLabels*> labels;
};

BatchTensors build_batch(const MomentView& moments, std::size_t begin, std::size_t end,
                         const model::NetworkConfig& cfg) {
    BatchTensors b;
    b.inputs.reserve(end - begin);
    b.modes.reserve(end - begin);
    b.labels.reserve(end - begin);
    for (std::size_t i = begin; i < end; ++i) {
        const data::DataMoment* m = moments[i];
        if (m->image_bytes.size() != 4 * cfg.img_h * cfg.img_w * 3)
            throw DataError("train: moment image bytes do not match the network input size");
        b.inputs.push_back(model::bytes_to_input(m->image_bytes.data(), cfg.img_h, cfg.img_w));
        b.modes.push_back(m->behavioral);
        b.labels.push_back(&m->labels);
    }
    return b;
}

void check_variant_compat(const model::Z2Color& net, const MomentView& view) {
    if (view.empty()) throw TrainError("train: empty dataset");
    if (net.config().variant == model::Variant::MTL) {
        const model::BehavioralMode first = view.front()->behavioral;
        for (const data::DataMoment* m : view)
            if (m->behavioral != first)
                throw TrainError("train: MTL variant requires a single-mode dataset");
    }
}

} // namespace

double evaluate(const model::Z2Color& net, const MomentView& val_set) {
    if (val_set.empty()) throw TrainError("evaluate: empty validation set");
    auto& mutable_net = const_cast<model::Z2Color&>(net); // eval forward does not mutate state
    const bool was_training = net.is_training();
    mutable_net.set_training(false);
    const model::NetworkConfig& cfg = net.config();
    const bool multi = cfg.variant == model::Variant::MultiNet;
    double total = 0.0;
    const std::size_t chunk = 64;
    for (std::size_t at = 0; at < val_set.size(); at += chunk) {
        const std::size_t end = std::min(val_set.size(), at + chunk);
        BatchTensors b = build_batch(val_set, at, end, cfg);
        auto preds = mutable_net.forward_batch(std::move(b.inputs), multi ? &b.modes : nullptr, nullptr);
        for (std::size_t i = 0; i < preds.size(); ++i)
            total += nn::mse_validation_loss(preds[i], *b.labels[i]);
    }
    mutable_net.set_training(was_training);
    return total / static_cast<double>(val_set.size());
}

LossCurve train(model::Z2Color& net, const EpochProvider& provider, const MomentView& val_set,
                const TrainConfig& cfg, const CheckpointSink& sink) {
    cfg.validate();
    if (val_set.empty()) throw TrainError("train: empty validation set");

    Rng rng(cfg.seed);
    auto params = net.learnable_params();
    std::vector<const Tensor*> cparams(params.begin(), params.end());
    nn::AdadeltaState opt = nn::AdadeltaState::make(cparams, cfg.adadelta_rho, cfg.adadelta_eps);

    LossCurve curve;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        MomentView moments = provider(epoch, rng);
        check_variant_compat(net, moments);
        rng.shuffle(moments);

        net.set_training(true);
        const model::NetworkConfig& ncfg = net.config();
        const bool multi = ncfg.variant == model::Variant::MultiNet;
        double loss_sum = 0.0;
        std::size_t seen = 0;
        const std::size_t B = static_cast<std::size_t>(cfg.batch);
        std::size_t at = 0;
        std::size_t batch_index = 0;
        while (at < moments.size()) {
            std::size_t end = std::min(moments.size(), at + B);
            if (moments.size() - end == 1) end = moments.size(); // fold a trailing single
            BatchTensors b = build_batch(moments, at, end, ncfg);
            const std::size_t n = b.inputs.size();

            model::ForwardCache cache;
            auto preds = net.forward_batch(std::move(b.inputs), multi ? &b.modes : nullptr, &cache);
            std::vector<nn::TrajectoryPrediction> d_out(n);
            double batch_loss = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const nn::TrainLossResult lr = nn::mse_train_loss(preds[i], *b.labels[i]);
                batch_loss += lr.loss;
                d_out[i] = lr.grad;
            }
            if (!std::isfinite(batch_loss))
                throw TrainError("train: non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                 std::to_string(batch_index));
            loss_sum += batch_loss;
            seen += n;

            model::ModelGrads grads = net.backward(cache, d_out);
            grads.scale(1.0 / static_cast<double>(n));
            std::vector<Tensor*> gptrs; // grads as optimizer input
            gptrs.reserve(grads.tensors.size());
            for (Tensor& t : grads.tensors) gptrs.push_back(&t);
            std::vector<const Tensor*> cgrads(gptrs.begin(), gptrs.end());
            nn::adadelta_step(params, cgrads, opt);

            at = end;
            ++batch_index;
        }

        curve.train_loss.push_back(loss_sum / static_cast<double>(seen));
        curve.val_loss.push_back(evaluate(net, val_set));
        if (sink) sink(epoch, net);
    }
    net.set_training(false);
    return curve;
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

struct TrialJobResult {
    LossCurve multinet_curve;
    std::array<LossCurve, 3> mtl_curves;
    LossCurve mtl_avg;
};

LossCurve average_curves(const std::vector<const LossCurve*>& curves) {
    LossCurve out;
    const std::size_t epochs = curves.front()->val_loss.size();
    out.train_loss.assign(epochs, 0.0);
    out.val_loss.assign(epochs, 0.0);
    for (const LossCurve* c : curves) {
        for (std::size_t e = 0; e < epochs; ++e) {
            out.train_loss[e] += c->train_loss[e] / static_cast<double>(curves.size());
            out.val_loss[e] += c->val_loss[e] / static_cast<double>(curves.size());
        }
    }
    return out;
}

MomentView concat_views(const PerModeViews& views) {
    MomentView out;
    for (const MomentView& v : views) out.insert(out.end(), v.begin(), v.end());
    return out;
}

} // namespace

ComparisonResult multinet_vs_mtl(const PerModeViews& train_sets, const PerModeViews& val_sets,
                                 const TrainConfig& cfg) {
    cfg.validate();
    const std::size_t budget = train_sets[0].size();
    for (std::size_t m = 1; m < 3; ++m)
        if (train_sets[m].size() != budget)
            throw DataError("multinet_vs_mtl: unequal per-mode data budgets (" + std::to_string(budget) +
                            " vs " + std::to_string(train_sets[m].size()) + ")");
    if (budget == 0) throw DataError("multinet_vs_mtl: empty training sets");

    const MomentView union_val = concat_views(val_sets);
    const std::size_t trials = static_cast<std::size_t>(cfg.trials);

    std::vector<TrialJobResult> results(trials);
    std::vector<model::Z2Color> multinets;
    multinets.reserve(trials);
    for (std::size_t t = 0; t < trials; ++t) {
        model::NetworkConfig mc;
        mc.variant = model::Variant::MultiNet;
        mc.seed = Rng::derive(cfg.seed, t * 8 + 1);
        multinets.emplace_back(mc);
    }

    std::vector<std::function<void()>> jobs;
    for (std::size_t t = 0; t < trials; ++t) {
        jobs.push_back([&, t]() {
            TrainConfig tc = cfg;
            tc.seed = Rng::derive(cfg.seed, t * 8 + 2);
            results[t].multinet_curve =
                train(multinets[t], balanced_resample_provider(train_sets, budget), union_val, tc);

            for (std::size_t m = 0; m < 3; ++m) {
                model::NetworkConfig cc;
                cc.variant = model::Variant::MTL;
                cc.seed = Rng::derive(cfg.seed, t * 8 + 3 + m);
                model::Z2Color net(cc);
                TrainConfig mtc = cfg;
                mtc.seed = Rng::derive(cfg.seed, t * 8 + 6 + m);
                results[t].mtl_curves[m] = train(net, fixed_provider(train_sets[m]), val_sets[m], mtc);
            }
            results[t].mtl_avg = average_curves(
                {&results[t].mtl_curves[0], &results[t].mtl_curves[1], &results[t].mtl_curves[2]});
        });
    }
    run_parallel(std::move(jobs), cfg.threads);

    ComparisonResult out;
    out.report.experiment_id = "multimodal";
    out.report.epochs = static_cast<std::size_t>(cfg.epochs);
    out.report.trials = trials;
    CurveSet multi{"multinet", {}}, avg{"mtl_avg", {}};
    CurveSet mtl[3] = {{"mtl_direct", {}}, {"mtl_follow", {}}, {"mtl_furtive", {}}};
    for (std::size_t t = 0; t < trials; ++t) {
        multi.trials.push_back(results[t].multinet_curve);
        avg.trials.push_back(results[t].mtl_avg);
        for (std::size_t m = 0; m < 3; ++m) mtl[m].trials.push_back(results[t].mtl_curves[m]);
    }
    out.report.curves = {multi, mtl[0], mtl[1], mtl[2], avg};
    out.report.summarized = {"multinet", "mtl_avg"};
    const auto sel = select_model(multi.trials);
    out.report.selected_trial = sel.first;
    out.report.selected_epoch = sel.second;
    out.multinets = std::move(multinets);
    return out;
}

ComparisonResult per_mode_comparison(model::BehavioralMode mode, const PerModeViews& train_sets,
                                     const PerModeViews& val_sets, const TrainConfig& cfg) {
    cfg.validate();
    const std::size_t mi = static_cast<std::size_t>(mode);
    const std::size_t budget = train_sets[mi].size();
    for (std::size_t m = 0; m < 3; ++m)
        if (train_sets[m].size() != budget)
            throw DataError("per_mode_comparison: unequal per-mode data budgets");
    if (budget == 0) throw DataError("per_mode_comparison: empty training sets");
    const MomentView& mode_val = val_sets[mi];
    if (mode_val.empty()) throw DataError("per_mode_comparison: empty validation set for the mode");

    const std::size_t trials = static_cast<std::size_t>(cfg.trials);
    std::vector<model::Z2Color> multinets, mtls;
    multinets.reserve(trials);
    mtls.reserve(trials);
    for (std::size_t t = 0; t < trials; ++t) {
        model::NetworkConfig mc;
        mc.variant = model::Variant::MultiNet;
        mc.seed = Rng::derive(cfg.seed, 1000 + t * 8 + 1);
        multinets.emplace_back(mc);
        model::NetworkConfig cc;
        cc.variant = model::Variant::MTL;
        cc.seed = Rng::derive(cfg.seed, 1000 + t * 8 + 3);
        mtls.emplace_back(cc);
    }
    std::vector<LossCurve> multi_curves(trials), mtl_curves(trials);
    std::vector<std::function<void()>> jobs;
    for (std::size_t t = 0; t < trials; ++t) {
        jobs.push_back([&, t]() {
            TrainConfig tc = cfg;
            tc.seed = Rng::derive(cfg.seed, 1000 + t * 8 + 2);
            multi_curves[t] =
                train(multinets[t], balanced_resample_provider(train_sets, budget), mode_val, tc);

            TrainConfig mtc = cfg;
            mtc.seed = Rng::derive(cfg.seed, 1000 + t * 8 + 4);
            mtl_curves[t] = train(mtls[t], fixed_provider(train_sets[mi]), mode_val, mtc);
        });
    }
    run_parallel(std::move(jobs), cfg.threads);

    ComparisonResult out;
    out.report.experiment_id = model::mode_name(mode);
    out.report.epochs = static_cast<std::size_t>(cfg.epochs);
    out.report.trials = trials;
    CurveSet multi{"multinet", std::move(multi_curves)};
    CurveSet mtl{std::string("mtl_") + model::mode_name(mode), std::move(mtl_curves)};
    out.report.curves = {multi, mtl};
    out.report.summarized = {multi.network, mtl.network};
    const auto sel = select_model(multi.trials);
    out.report.selected_trial = sel.first;
    out.report.selected_epoch = sel.second;
    out.multinets = std::move(multinets);
    out.mtls = std::move(mtls);
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

std::pair<std::size_t, std::size_t> select_model(const std::vector<LossCurve>& trials) {
    if (trials.empty()) throw TrainError("select_model: no curves");
    std::size_t best_trial = 0, best_epoch = 0;
    double best = std::numeric_limits<double>::max();
    // scan epochs outer so ties resolve to the lower epoch, then lower trial
    const std::size_t epochs = trials[0].val_loss.size();
    for (std::size_t e = 0; e < epochs; ++e) {
        for (std::size_t t = 0; t < trials.size(); ++t) {
            if (trials[t].val_loss.size() != epochs)
                throw TrainError("select_model: ragged curves");
            const double v = trials[t].val_loss[e];
            if (v < best) {
                best = v;
                best_trial = t;
                best_epoch = e;
            }
        }
    }
    return {best_trial, best_epoch};
}

double autonomy_from_counts(std::size_t correctional_ticks, std::size_t total_ticks) {
    if (total_ticks == 0) throw DataError("autonomy: zero elapsed time");
    return (1.0 - static_cast<double>(correctional_ticks) / static_cast<double>(total_ticks)) * 100.0;
}

double autonomy(const sim::EpisodeLog& log) {
    return autonomy_from_counts(log.count_op(data::OperationalMode::Correctional), log.ticks.size());
}

double delta_loss_percent(double mtl_loss, double multinet_loss) {
    if (multinet_loss <= 0.0) throw DataError("delta_loss_percent: MultiNet loss must be positive");
    return (mtl_loss - multinet_loss) / multinet_loss * 100.0;
}

namespace {

// Regularized incomplete beta via Lentz's continued fraction.
double betacf(double a, double b, double x) {
    constexpr int kMaxIter = 300;
    constexpr double kEps = 3e-16, kFpMin = 1e-300;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0, d = 1.0 - qab * x / qap;
    if (std::abs(d) < kFpMin) d = kFpMin;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= kMaxIter; ++m) {
        const int m2 = 2 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < kFpMin) d = kFpMin;
        c = 1.0 + aa / c;
        if (std::abs(c) < kFpMin) c = kFpMin;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return h;
}

double incbeta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_bt = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                         b * std::log(1.0 - x);
    const double bt = std::exp(ln_bt);
    if (x < (a + 1.0) / (a + b + 2.0)) return bt * betacf(a, b, x) / a;
    return 1.0 - bt * betacf(b, a, 1.0 - x) / b;
}

double t_cdf(double t, int dof) {
    const double v = static_cast<double>(dof);
    const double x = v / (v + t * t);
    const double p = 0.5 * incbeta(v / 2.0, 0.5, x);
    return t >= 0.0 ? 1.0 - p : p;
}

} // namespace

double t_quantile(double p, int dof) {
    if (!(p > 0.0 && p < 1.0)) throw DataError("t_quantile: p must be in (0,1)");
    if (dof < 1) throw DataError("t_quantile: dof must be >= 1");
    if (p == 0.5) return 0.0;
    const bool upper = p > 0.5;
    const double target = upper ? p : 1.0 - p;
    double lo = 0.0, hi = 1.0;
    while (t_cdf(hi, dof) < target) hi *= 2.0; // bracket
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        if (t_cdf(mid, dof) < target)
            lo = mid;
        else
            hi = mid;
    }
    const double q = 0.5 * (lo + hi);
    return upper ? q : -q;
}

ConfidenceInterval confidence_interval(const std::vector<double>& samples) {
    if (samples.size() < 2) throw DataError("confidence_interval: need at least 2 samples");
    const double n = static_cast<double>(samples.size());
    double mean = 0.0;
    for (double v : samples) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : samples) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / (n - 1.0));
    const double t = t_quantile(0.975, static_cast<int>(samples.size()) - 1);
    return {mean, t * sd / std::sqrt(n)};
}

// ---------------------------------------------------------------------------
// Emission

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::vector<double> samples_at_epoch(const CurveSet& set, std::size_t epoch) {
    std::vector<double> s;
    s.reserve(set.trials.size());
    for (const LossCurve& c : set.trials) s.push_back(c.val_loss[epoch]);
    return s;
}

} // namespace

void emit_report(const ExperimentReport& report, const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("emit_report: cannot create " + out_dir.string() + ": " + ec.message());

    {
        std::ofstream f(out_dir / "curves.csv");
        if (!f) throw IoError("emit_report: cannot write " + (out_dir / "curves.csv").string());
        f << "network,trial,epoch,train_loss,val_loss\n";
        for (const CurveSet& set : report.curves)
            for (std::size_t t = 0; t < set.trials.size(); ++t)
                for (std::size_t e = 0; e < set.trials[t].val_loss.size(); ++e)
                    f << set.network << ',' << t << ',' << e << ',' << fmt(set.trials[t].train_loss[e])
                      << ',' << fmt(set.trials[t].val_loss[e]) << '\n';
    }
    {
        std::ofstream f(out_dir / "autonomy.csv");
        if (!f) throw IoError("emit_report: cannot write " + (out_dir / "autonomy.csv").string());
        f << "network,mode,autonomy_pct\n";
        for (const AutonomyRow& r : report.autonomy)
            f << r.network << ',' << r.mode << ',' << fmt(r.autonomy_pct) << '\n';
    }
    {
        std::ofstream f(out_dir / "delta_loss.csv");
        if (!f) throw IoError("emit_report: cannot write " + (out_dir / "delta_loss.csv").string());
        f << "mode,mtl_loss,multinet_loss,delta_loss_pct\n";
        for (const DeltaLossRow& r : report.delta_loss)
            f << r.mode << ',' << fmt(r.mtl_loss) << ',' << fmt(r.multinet_loss) << ',' << fmt(r.delta_pct)
              << '\n';
    }
    {
        std::ofstream f(out_dir / "summary.txt");
        if (!f) throw IoError("emit_report: cannot write " + (out_dir / "summary.txt").string());
        f << "experiment: " << report.experiment_id << "\n";
        f << "epochs: " << report.epochs << "  trials: " << report.trials << "\n";
        f << "selected checkpoint: trial " << report.selected_trial << ", epoch " << report.selected_epoch
          << "\n\n";
        for (const std::string& name : report.summarized) {
            const CurveSet* set = nullptr;
            for (const CurveSet& s : report.curves)
                if (s.network == name) set = &s;
            if (!set || set->trials.empty()) continue;
            f << name << " validation loss (mean +/- 95% CI over " << set->trials.size() << " trials)\n";
            for (std::size_t e = 0; e < report.epochs; ++e) {
                const std::vector<double> s = samples_at_epoch(*set, e);
                if (s.size() >= 2) {
                    const ConfidenceInterval ci = confidence_interval(s);
                    f << "  epoch " << e << ": " << fmt(ci.mean) << " +/- " << fmt(ci.half_width) << "\n";
                } else {
                    f << "  epoch " << e << ": " << fmt(s[0]) << "\n";
                }
            }
            f << "\n";
        }
        if (!report.autonomy.empty()) {
            f << "autonomy (%):\n";
            for (const AutonomyRow& r : report.autonomy)
                f << "  " << r.network << " / " << r.mode << ": " << fmt(r.autonomy_pct) << "\n";
            f << "\n";
        }
        if (!report.delta_loss.empty()) {
            f << "delta validation loss (%):\n";
            for (const DeltaLossRow& r : report.delta_loss)
                f << "  " << r.mode << ": " << fmt(r.delta_pct) << " (mtl " << fmt(r.mtl_loss)
                  << ", multinet " << fmt(r.multinet_loss) << ")\n";
        }
    }
}

void run_parallel(std::vector<std::function<void()>> jobs, int threads) {
    if (threads <= 0) {
        const unsigned hc = std::thread::hardware_concurrency();
        threads = hc == 0 ? 2 : static_cast<int>(hc);
    }
    threads = std::min<int>(threads, static_cast<int>(jobs.size()));
    if (threads <= 1) {
        for (auto& j : jobs) j();
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int i = 0; i < threads; ++i) {
        pool.emplace_back([&]() {
            for (;;) {
                const std::size_t k = next.fetch_add(1);
                if (k >= jobs.size()) return;
                try {
                    jobs[k]();
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mu);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (std::thread& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

} // namespace multinet::harness

#include "multinet/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "multinet/dagger.hpp"
#include "multinet/data.hpp"
#include "multinet/harness.hpp"
#include "multinet/sim.hpp"

namespace multinet::cli {

namespace {

const std::map<std::string, std::string>& schema_defaults() {
    static const std::map<std::string, std::string> defaults = {
        {"seed", "7"},
        {"out", "run"},
        {"threads", "0"},
        // data generation
        {"modes", "direct,follow,furtive"},
        {"episodes", "6"},
        {"episode_s", "60"},
        {"track_length_m", "200"},
        // training
        {"variant", "multinet"},
        {"mode", ""},
        {"data_dir", "run"},
        {"epochs", "24"},
        {"batch", "32"},
        {"trials", "8"},
        {"val_fraction", "0.10"},
        {"net_conv1", "16"},
        {"net_conv2", "32"},
        {"net_hidden", "128"},
        // driving / evaluation
        {"checkpoint", ""},
        {"policy", "network"},
        {"ticks", "1800"},
        {"track_seed", "0"},
        {"drive_eval", "1"},
        {"eval_ticks", "1200"},
        {"override_engage", "0.9"},
        {"override_release", "0.5"},
        {"override_engage_furtive", "1.3"},
        {"override_release_furtive", "1.15"},
        {"override_horizon", "12"},
        // dagger
        {"rounds", "4"},
        {"episodes_per_round", "1"},
        {"dagger_ticks", "900"},
        {"dagger_track_length_m", "120"},
        {"dagger_epochs", "3"},
        {"dagger_conv1", "8"},
        {"dagger_conv2", "16"},
        {"dagger_hidden", "64"},
        // report
        {"report_dir", ""},
    };
    return defaults;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

} // namespace

RunConfig::RunConfig() : values_(schema_defaults()) {}

void RunConfig::load_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: line " + std::to_string(lineno) + " is not key=value: " + t);
        set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
}

void RunConfig::set(const std::string& key, const std::string& value) {
    if (values_.find(key) == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
    values_[key] = value;
}

const std::string& RunConfig::get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("config: unknown key '" + key + "'");
    return it->second;
}

std::int64_t RunConfig::get_int(const std::string& key) const {
    try {
        std::size_t pos = 0;
        const std::int64_t v = std::stoll(get(key), &pos);
        if (pos != get(key).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not an integer: " + get(key));
    }
}

std::uint64_t RunConfig::get_u64(const std::string& key) const {
    const std::int64_t v = get_int(key);
    if (v < 0) throw ConfigError("config: key '" + key + "' must be non-negative");
    return static_cast<std::uint64_t>(v);
}

double RunConfig::get_double(const std::string& key) const {
    try {
        std::size_t pos = 0;
        const double v = std::stod(get(key), &pos);
        if (pos != get(key).size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: key '" + key + "' is not a number: " + get(key));
    }
}

bool RunConfig::get_bool(const std::string& key) const {
    const std::string& v = get(key);
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("config: key '" + key + "' is not a boolean: " + v);
}

std::vector<model::BehavioralMode> RunConfig::get_modes(const std::string& key) const {
    std::vector<model::BehavioralMode> out;
    std::stringstream ss(get(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
        const auto m = model::mode_from_name(trim(item));
        if (!m) throw ConfigError("config: unknown behavioral mode '" + item + "'");
        out.push_back(*m);
    }
    if (out.empty()) throw ConfigError("config: key '" + key + "' names no modes");
    return out;
}

void RunConfig::write_snapshot(const std::filesystem::path& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("config: cannot write snapshot " + path.string());
    for (const auto& [k, v] : values_) f << k << "=" << v << "\n";
}

// ---------------------------------------------------------------------------

namespace {

sim::SimConfig default_sim_config(const RunConfig& cfg) {
    sim::SimConfig sc;
    sc.seed = cfg.get_u64("seed");
    return sc;
}

int ticks_from_seconds(double seconds, const sim::SimConfig& sc) {
    return static_cast<int>(std::llround(seconds / sc.dt_s));
}

std::filesystem::path mode_dataset_path(const std::filesystem::path& dir, model::BehavioralMode m) {
    return dir / (std::string(model::mode_name(m)) + ".mndm");
}

model::NetworkConfig network_config(const RunConfig& cfg, model::Variant variant, std::uint64_t seed) {
    model::NetworkConfig nc;
    nc.variant = variant;
    nc.conv1_out = static_cast<std::size_t>(cfg.get_int("net_conv1"));
    nc.conv2_out = static_cast<std::size_t>(cfg.get_int("net_conv2"));
    nc.hidden = static_cast<std::size_t>(cfg.get_int("net_hidden"));
    nc.seed = seed;
    return nc;
}

dagger::OverridePolicy override_policy(const RunConfig& cfg, model::BehavioralMode mode) {
    dagger::OverridePolicy p;
    if (mode == model::BehavioralMode::Furtive) {
        p.engage_cte = cfg.get_double("override_engage_furtive");
        p.release_cte = cfg.get_double("override_release_furtive");
    } else {
        p.engage_cte = cfg.get_double("override_engage");
        p.release_cte = cfg.get_double("override_release");
    }
    p.collision_horizon = static_cast<int>(cfg.get_int("override_horizon"));
    return p;
}

data::Dataset generate_mode_dataset(model::BehavioralMode mode, int episodes, int ticks, double track_len,
                                    std::uint64_t seed, const sim::SimConfig& sc) {
    data::Dataset ds;
    for (int e = 0; e < episodes; ++e) {
        const std::uint64_t esd = Rng::derive(seed, 7919 * static_cast<std::uint64_t>(mode) + static_cast<std::uint64_t>(e));
        const sim::Track track = sim::generate_track(esd, track_len, sim::default_features_for_mode(mode, track_len));
        sim::EpisodeOptions opts;
        opts.render = true;
        opts.with_lead_car = (mode == model::BehavioralMode::Follow);
        opts.seed = esd;
        opts.prefill_tag = data::OperationalMode::Expert;
        const sim::EpisodeLog log =
            sim::run_episode(sim::oracle_issuer(mode, sc), mode, track, sc, ticks, opts);
        ds.append(dagger::harvest(log));
    }
    return ds;
}

} // namespace

void cmd_gen_data(const RunConfig& cfg) {
    const std::filesystem::path out = cfg.get("out");
    std::filesystem::create_directories(out);
    cfg.write_snapshot(out / "config.snapshot");

    const sim::SimConfig sc = default_sim_config(cfg);
    const int episodes = static_cast<int>(cfg.get_int("episodes"));
    const int ticks = ticks_from_seconds(cfg.get_double("episode_s"), sc);
    const double track_len = cfg.get_double("track_length_m");
    const std::uint64_t seed = cfg.get_u64("seed");

    nlohmann::json manifest;
    manifest["seed"] = seed;
    data::Dataset all;
    for (model::BehavioralMode mode : cfg.get_modes("modes")) {
        data::Dataset ds = generate_mode_dataset(mode, episodes, ticks, track_len, seed, sc);
        const auto oc = ds.op_counts();
        const std::string name = model::mode_name(mode);
        manifest["modes"][name]["moments"] = ds.size();
        manifest["modes"][name]["expert"] = oc[static_cast<std::size_t>(data::OperationalMode::Expert)];
        manifest["modes"][name]["correctional"] =
            oc[static_cast<std::size_t>(data::OperationalMode::Correctional)];
        manifest["files"][name] = name + ".mndm";
        data::serialize(ds, mode_dataset_path(out, mode));
        all.append(std::move(ds));
    }
    const data::MixReport mix = data::mix_report(all);
    manifest["mix"]["expert_fraction"] = mix.expert_fraction;
    manifest["mix"]["correctional_fraction"] = mix.correctional_fraction;
    std::ofstream mf(out / "manifest.json");
    if (!mf) throw IoError("gen-data: cannot write manifest");
    mf << manifest.dump(2) << "\n";
    std::cout << "gen-data: " << all.size() << " moments across "
              << manifest["modes"].size() << " mode(s) -> " << out.string() << "\n";
}

void cmd_train(const RunConfig& cfg) {
    const std::filesystem::path out = cfg.get("out");
    std::filesystem::create_directories(out / "checkpoints");
    cfg.write_snapshot(out / "config.snapshot");

    const std::filesystem::path data_dir = cfg.get("data_dir");
    const std::uint64_t seed = cfg.get_u64("seed");
    const std::string variant_name = cfg.get("variant");

    harness::TrainConfig tc;
    tc.epochs = static_cast<int>(cfg.get_int("epochs"));
    tc.batch = static_cast<int>(cfg.get_int("batch"));
    tc.trials = 1;
    tc.seed = Rng::derive(seed, 2);
    tc.threads = static_cast<int>(cfg.get_int("threads"));

    data::Dataset pool;
    model::Variant variant;
    if (variant_name == "multinet") {
        variant = model::Variant::MultiNet;
        for (model::BehavioralMode m : model::kAllModes) {
            pool.append(data::deserialize(mode_dataset_path(data_dir, m)));
        }
        pool = data::balance_by_mode(pool, Rng::derive(seed, 3));
    } else if (variant_name == "mtl") {
        variant = model::Variant::MTL;
        const auto mode = model::mode_from_name(cfg.get("mode"));
        if (!mode) throw ConfigError("train: --variant mtl requires --mode direct|follow|furtive");
        pool = data::deserialize(mode_dataset_path(data_dir, *mode));
    } else {
        throw ConfigError("train: unknown variant '" + variant_name + "'");
    }

    const data::SplitResult parts = data::split(pool, cfg.get_double("val_fraction"), Rng::derive(seed, 4));
    const harness::MomentView train_view = harness::make_view(parts.train);
    const harness::MomentView val_view = harness::make_view(parts.validation);

    model::Z2Color net(network_config(cfg, variant, Rng::derive(seed, 5)));
    harness::CheckpointSink sink = [&](int epoch, const model::Z2Color& n) {
        n.save(out / "checkpoints" / ("epoch_" + std::to_string(epoch) + ".mnck"));
    };
    const harness::LossCurve curve =
        harness::train(net, harness::fixed_provider(train_view), val_view, tc, sink);

    std::ofstream f(out / "curves.csv");
    if (!f) throw IoError("train: cannot write curves.csv");
    f << "network,trial,epoch,train_loss,val_loss\n";
    char buf[128];
    for (std::size_t e = 0; e < curve.val_loss.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%s,0,%zu,%.10g,%.10g\n", variant_name.c_str(), e,
                      curve.train_loss[e], curve.val_loss[e]);
        f << buf;
    }
    std::cout << "train: final validation loss " << curve.val_loss.back() << " -> " << out.string() << "\n";
}

namespace {

// Per-trial final MultiNet/MTL pair driven on a seeded evaluation loop; rows
// mirror the direct/furtive autonomy table.
std::vector<harness::AutonomyRow> drive_evaluation(const RunConfig& cfg,
                                                   const harness::ComparisonResult& direct_cmp,
                                                   const harness::ComparisonResult& furtive_cmp) {
    const sim::SimConfig sc = default_sim_config(cfg);
    const std::uint64_t seed = cfg.get_u64("seed");
    const int ticks = static_cast<int>(cfg.get_int("eval_ticks"));
    const double track_len = cfg.get_double("track_length_m");

    std::vector<harness::AutonomyRow> rows;
    const struct {
        model::BehavioralMode mode;
        const harness::ComparisonResult* cmp;
    } evals[2] = {{model::BehavioralMode::Direct, &direct_cmp}, {model::BehavioralMode::Furtive, &furtive_cmp}};
    for (const auto& ev : evals) {
        const std::uint64_t esd = Rng::derive(seed, 4242 + static_cast<std::uint64_t>(ev.mode));
        const sim::Track track =
            sim::generate_track(esd, track_len, sim::default_features_for_mode(ev.mode, track_len));
        const dagger::OverridePolicy policy = override_policy(cfg, ev.mode);
        const std::size_t trial = ev.cmp->report.selected_trial;
        const struct {
            const char* name;
            const model::Z2Color* net;
        } nets[2] = {{"multinet", &ev.cmp->multinets[trial]}, {"mtl", &ev.cmp->mtls[trial]}};
        for (const auto& n : nets) {
            const sim::EpisodeLog log = dagger::supervise(*n.net, ev.mode, track, sc, ticks, policy, esd);
            rows.push_back({n.name, model::mode_name(ev.mode), harness::autonomy(log)});
        }
    }
    return rows;
}

} // namespace

void cmd_experiment(const RunConfig& cfg) {
    const std::filesystem::path out = cfg.get("out");
    std::filesystem::create_directories(out);
    cfg.write_snapshot(out / "config.snapshot");

    const std::filesystem::path data_dir = cfg.get("data_dir");
    const std::uint64_t seed = cfg.get_u64("seed");

    data::Dataset pool;
    for (model::BehavioralMode m : model::kAllModes) pool.append(data::deserialize(mode_dataset_path(data_dir, m)));
    pool = data::balance_by_mode(pool, Rng::derive(seed, 11));
    const data::SplitResult parts = data::split(pool, cfg.get_double("val_fraction"), Rng::derive(seed, 12));

    const harness::MomentView train_all = harness::make_view(parts.train);
    const harness::MomentView val_all = harness::make_view(parts.validation);
    harness::PerModeViews train_sets, val_sets;
    for (std::size_t m = 0; m < 3; ++m) {
        train_sets[m] = harness::filter_view(train_all, static_cast<model::BehavioralMode>(m));
        val_sets[m] = harness::filter_view(val_all, static_cast<model::BehavioralMode>(m));
    }

    harness::TrainConfig tc;
    tc.epochs = static_cast<int>(cfg.get_int("epochs"));
    tc.batch = static_cast<int>(cfg.get_int("batch"));
    tc.trials = static_cast<int>(cfg.get_int("trials"));
    tc.threads = static_cast<int>(cfg.get_int("threads"));
    tc.seed = Rng::derive(seed, 13);

    harness::ComparisonResult multimodal = harness::multinet_vs_mtl(train_sets, val_sets, tc);

    std::array<harness::ComparisonResult, 3> per_mode;
    for (std::size_t m = 0; m < 3; ++m) {
        harness::TrainConfig ptc = tc;
        ptc.seed = Rng::derive(seed, 14 + m);
        per_mode[m] = harness::per_mode_comparison(static_cast<model::BehavioralMode>(m), train_sets,
                                                   val_sets, ptc);
    }

    // Delta validation loss (final epoch, mean over trials) for the two modes
    // the evaluation table covers.
    for (model::BehavioralMode mode : {model::BehavioralMode::Direct, model::BehavioralMode::Furtive}) {
        const harness::ComparisonResult& cmp = per_mode[static_cast<std::size_t>(mode)];
        double mtl_mean = 0.0, multi_mean = 0.0;
        for (const harness::CurveSet& set : cmp.report.curves) {
            double v = 0.0;
            for (const harness::LossCurve& c : set.trials) v += c.val_loss.back();
            v /= static_cast<double>(set.trials.size());
            if (set.network == "multinet")
                multi_mean = v;
            else
                mtl_mean = v;
        }
        const harness::DeltaLossRow row{model::mode_name(mode), mtl_mean, multi_mean,
                                        harness::delta_loss_percent(mtl_mean, multi_mean)};
        multimodal.report.delta_loss.push_back(row);
        per_mode[static_cast<std::size_t>(mode)].report.delta_loss.push_back(row);
    }

    if (cfg.get_bool("drive_eval")) {
        multimodal.report.autonomy =
            drive_evaluation(cfg, per_mode[static_cast<std::size_t>(model::BehavioralMode::Direct)],
                             per_mode[static_cast<std::size_t>(model::BehavioralMode::Furtive)]);
    }

    harness::emit_report(multimodal.report, out / "multimodal");
    for (std::size_t m = 0; m < 3; ++m)
        harness::emit_report(per_mode[m].report, out / model::mode_name(static_cast<model::BehavioralMode>(m)));
    std::cout << "experiment: reports under " << out.string() << "\n";
}

void cmd_drive(const RunConfig& cfg) {
    const std::filesystem::path out = cfg.get("out");
    std::filesystem::create_directories(out);
    cfg.write_snapshot(out / "config.snapshot");

    const auto mode = model::mode_from_name(cfg.get("mode"));
    if (!mode) throw ConfigError("drive: --mode direct|follow|furtive required");
    const sim::SimConfig sc = default_sim_config(cfg);
    const int ticks = static_cast<int>(cfg.get_int("ticks"));
    std::uint64_t track_seed = cfg.get_u64("track_seed");
    if (track_seed == 0) track_seed = Rng::derive(cfg.get_u64("seed"), 99);
    const double track_len = cfg.get_double("track_length_m");
    const sim::Track track =
        sim::generate_track(track_seed, track_len, sim::default_features_for_mode(*mode, track_len));
    const dagger::OverridePolicy policy = override_policy(cfg, *mode);

    sim::EpisodeLog log;
    const std::string& policy_name = cfg.get("policy");
    if (policy_name == "oracle") {
        log = dagger::supervise_policy(
            [&](const sim::PolicyContext& ctx) {
                return sim::expert_for_mode(*mode, *ctx.car, ctx.lead, *ctx.track, sc);
            },
            false, *mode, track, sc, ticks, policy, track_seed);
    } else if (policy_name == "network") {
        const std::string& ckpt = cfg.get("checkpoint");
        if (ckpt.empty()) throw ConfigError("drive: --checkpoint required for the network policy");
        model::Z2Color net = model::Z2Color::load(ckpt);
        if (net.config().variant == model::Variant::MTL && *mode == model::BehavioralMode::Follow &&
            cfg.get("mode").empty())
            throw ConfigError("drive: mode/variant mismatch");
        log = dagger::supervise(net, *mode, track, sc, ticks, policy, track_seed);
    } else {
        throw ConfigError("drive: unknown policy '" + policy_name + "'");
    }

    const double auto_pct = harness::autonomy(log);
    sim::write_episode_csv(log, out / ("drive_" + std::string(model::mode_name(*mode)) + ".csv"));
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f", auto_pct);
    std::cout << "drive: mode " << model::mode_name(*mode) << ", autonomy " << buf << "%\n";
}

void cmd_dagger(const RunConfig& cfg) {
    const std::filesystem::path out = cfg.get("out");
    std::filesystem::create_directories(out);
    cfg.write_snapshot(out / "config.snapshot");

    const std::filesystem::path data_dir = cfg.get("data_dir");
    data::Dataset initial;
    for (model::BehavioralMode m : model::kAllModes)
        initial.append(data::deserialize(mode_dataset_path(data_dir, m)));

    dagger::DaggerConfig dc;
    dc.rounds = static_cast<int>(cfg.get_int("rounds"));
    dc.episodes_per_mode = static_cast<int>(cfg.get_int("episodes_per_round"));
    dc.episode_ticks = static_cast<int>(cfg.get_int("dagger_ticks"));
    dc.track_length_m = cfg.get_double("dagger_track_length_m");
    dc.val_fraction = cfg.get_double("val_fraction");
    dc.seed = cfg.get_u64("seed");
    dc.sim = default_sim_config(cfg);
    dc.net.variant = model::Variant::MultiNet;
    dc.net.conv1_out = static_cast<std::size_t>(cfg.get_int("dagger_conv1"));
    dc.net.conv2_out = static_cast<std::size_t>(cfg.get_int("dagger_conv2"));
    dc.net.hidden = static_cast<std::size_t>(cfg.get_int("dagger_hidden"));
    dc.train.epochs = static_cast<int>(cfg.get_int("dagger_epochs"));
    dc.train.batch = static_cast<int>(cfg.get_int("batch"));
    dc.train.threads = static_cast<int>(cfg.get_int("threads"));
    dc.override_direct = override_policy(cfg, model::BehavioralMode::Direct);
    dc.override_follow = override_policy(cfg, model::BehavioralMode::Follow);
    dc.override_furtive = override_policy(cfg, model::BehavioralMode::Furtive);

    const std::vector<dagger::AggregationRound> rounds = dagger::iterate(initial, dc);
    dagger::write_rounds_csv(rounds, out / "dagger_rounds.csv");
    std::cout << "dagger: " << rounds.size() << " rounds, final autonomy "
              << rounds.back().autonomy_pct << "% -> " << out.string() << "\n";
}

void cmd_report(const RunConfig& cfg) {
    std::filesystem::path dir = cfg.get("report_dir");
    if (dir.empty()) dir = cfg.get("out");
    if (!std::filesystem::exists(dir)) throw IoError("report: no such directory: " + dir.string());
    bool found = false;
    std::vector<std::filesystem::path> summaries;
    if (std::filesystem::exists(dir / "summary.txt")) summaries.push_back(dir / "summary.txt");
    if (summaries.empty()) {
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            if (entry.is_directory() && std::filesystem::exists(entry.path() / "summary.txt"))
                summaries.push_back(entry.path() / "summary.txt");
        }
        std::sort(summaries.begin(), summaries.end());
    }
    for (const auto& p : summaries) {
        std::ifstream f(p);
        if (!f) continue;
        found = true;
        std::cout << "==== " << p.string() << " ====\n" << f.rdbuf() << "\n";
    }
    if (!found) throw IoError("report: no summary.txt under " + dir.string());
}

} // namespace multinet::cli

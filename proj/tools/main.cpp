#include <deque>
#include <functional>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "multinet/cli.hpp"
#include "multinet/errors.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitTrain = 4;
constexpr int kExitIo = 5;

struct PendingOption {
    std::string key;
    std::string value;
    bool present = false;
};

// Registers a flag that overrides one config key when supplied.
void add_key_option(CLI::App* app, std::deque<PendingOption>& pending, const std::string& flag,
                    const std::string& key, const std::string& desc) {
    pending.push_back({key, "", false});
    PendingOption& slot = pending.back();
    app->add_option_function<std::string>(
           flag,
           [&slot](const std::string& v) {
               slot.value = v;
               slot.present = true;
           },
           desc)
        ->expected(1);
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"multinet: mode-conditioned driving network workbench"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "key=value configuration file")->expected(1);

    // Flags per subcommand override config keys; global flags are repeated on
    // every subcommand so they can appear after it.
    std::deque<PendingOption> pending; // stable element addresses

    struct Sub {
        CLI::App* app;
        std::function<void(const multinet::cli::RunConfig&)> fn;
    };
    std::vector<Sub> subs;

    auto add_globals = [&](CLI::App* s) {
        add_key_option(s, pending, "--seed", "seed", "master seed");
        add_key_option(s, pending, "--out", "out", "output directory");
        add_key_option(s, pending, "--threads", "threads", "worker threads (0 = auto)");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate expert datasets per behavioral mode");
    add_globals(gen);
    add_key_option(gen, pending, "--modes", "modes", "comma-separated behavioral modes");
    add_key_option(gen, pending, "--episodes", "episodes", "episodes per mode");
    add_key_option(gen, pending, "--episode-s", "episode_s", "episode duration, seconds");
    add_key_option(gen, pending, "--track-length", "track_length_m", "track length, meters");
    subs.push_back({gen, multinet::cli::cmd_gen_data});

    CLI::App* train = app.add_subcommand("train", "train a MultiNet or MTL network");
    add_globals(train);
    add_key_option(train, pending, "--data-dir", "data_dir", "directory with <mode>.mndm files");
    add_key_option(train, pending, "--variant", "variant", "multinet | mtl");
    add_key_option(train, pending, "--mode", "mode", "behavioral mode (mtl variant)");
    add_key_option(train, pending, "--epochs", "epochs", "training epochs");
    add_key_option(train, pending, "--batch", "batch", "minibatch size");
    subs.push_back({train, multinet::cli::cmd_train});

    CLI::App* exp = app.add_subcommand("experiment", "MultiNet-vs-MTL comparisons and reports");
    add_globals(exp);
    add_key_option(exp, pending, "--data-dir", "data_dir", "directory with <mode>.mndm files");
    add_key_option(exp, pending, "--epochs", "epochs", "training epochs");
    add_key_option(exp, pending, "--trials", "trials", "seeded trials");
    add_key_option(exp, pending, "--batch", "batch", "minibatch size");
    add_key_option(exp, pending, "--drive-eval", "drive_eval", "run the driving autonomy table (0/1)");
    subs.push_back({exp, multinet::cli::cmd_experiment});

    CLI::App* drive = app.add_subcommand("drive", "supervised autonomous episode from a checkpoint");
    add_globals(drive);
    add_key_option(drive, pending, "--checkpoint", "checkpoint", "model checkpoint path");
    add_key_option(drive, pending, "--mode", "mode", "behavioral mode");
    add_key_option(drive, pending, "--policy", "policy", "network | oracle");
    add_key_option(drive, pending, "--ticks", "ticks", "episode length in 33 ms ticks");
    add_key_option(drive, pending, "--track-seed", "track_seed", "evaluation track seed (0 = derive)");
    subs.push_back({drive, multinet::cli::cmd_drive});

    CLI::App* dag = app.add_subcommand("dagger", "corrective data aggregation rounds");
    add_globals(dag);
    add_key_option(dag, pending, "--data-dir", "data_dir", "initial dataset directory");
    add_key_option(dag, pending, "--rounds", "rounds", "aggregation rounds");
    add_key_option(dag, pending, "--episodes-per-round", "episodes_per_round", "episodes per mode per round");
    subs.push_back({dag, multinet::cli::cmd_dagger});

    CLI::App* rep = app.add_subcommand("report", "print run summaries");
    add_globals(rep);
    add_key_option(rep, pending, "--dir", "report_dir", "run directory");
    subs.push_back({rep, multinet::cli::cmd_report});

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help
        app.exit(e);
        return kExitConfig;
    }

    try {
        multinet::cli::RunConfig cfg;
        if (!config_path.empty()) cfg.load_file(config_path);
        for (const PendingOption& p : pending)
            if (p.present) cfg.set(p.key, p.value);
        for (const Sub& s : subs) {
            if (s.app->parsed()) {
                s.fn(cfg);
                return 0;
            }
        }
        std::cerr << "multinet: no subcommand\n";
        return kExitConfig;
    } catch (const multinet::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const multinet::DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kExitData;
    } catch (const multinet::TrainError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return kExitTrain;
    } catch (const multinet::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

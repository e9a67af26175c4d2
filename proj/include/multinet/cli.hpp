#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "multinet/model.hpp"

// Command implementations behind the multinet binary. Each command takes a
// validated key=value configuration (file plus flag overrides, flags win) and
// throws ConfigError/DataError/TrainError/IoError; the binary maps those to
// exit codes.
namespace multinet::cli {

class RunConfig {
public:
    // Schema with defaults; unknown keys are rejected.
    RunConfig();

    void load_file(const std::filesystem::path& path);
    void set(const std::string& key, const std::string& value);

    const std::string& get(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    std::uint64_t get_u64(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<model::BehavioralMode> get_modes(const std::string& key) const;

    // Sorted key=value snapshot, written into every run directory.
    void write_snapshot(const std::filesystem::path& path) const;

private:
    std::map<std::string, std::string> values_;
};

void cmd_gen_data(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_experiment(const RunConfig& cfg);
void cmd_drive(const RunConfig& cfg);
void cmd_dagger(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg);

} // namespace multinet::cli

#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "marcos/config.hpp"

namespace marcos {

inline constexpr const char* kVersion = "0.1.0";

// Full experiment configuration as carried by the JSON config file. Unknown
// keys are rejected; missing keys fall back to defaults. MARCOS_OUT_DIR
// overrides only the output root; MARCOS_DEVICE accepts only "cpu".
struct RunConfig {
    std::string out_dir = "runs";
    std::string train_corpus;
    std::string test_corpus;
    std::uint64_t seed = 1;
    int threads = 0;
    ModelConfig model;
    TrainConfig train;
};

RunConfig load_run_config(const std::string& path);
nlohmann::json run_config_to_json(const RunConfig& cfg);

// Content-addressed run directory <out_dir>/<label>-<hash8>; creates it and
// writes resolved_config.json plus VERSION. Re-running the same config maps
// to the same directory.
std::string prepare_run_dir(const RunConfig& cfg, const std::string& label);

std::uint64_t config_hash(const RunConfig& cfg);

// Minimal CSV emitter with stable headers and %.10g numeric formatting.
class CsvWriter {
public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header);
    void row(const std::vector<std::string>& cells);
    static std::string num(Real v);
    static std::string num(long long v);

private:
    std::string path_;
};

}  // namespace marcos

#include "marcos/runio.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>

namespace marcos {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& j, const std::vector<std::string>& allowed,
                    const std::string& where) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed)
            if (it.key() == k) {
                ok = true;
                break;
            }
        require(ok, ErrorKind::parse, "unknown config key '" + it.key() + "' in " + where);
    }
}

template <typename T>
void read_if(const json& j, const char* key, T* out) {
    if (j.contains(key)) *out = j.at(key).get<T>();
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    require(f.good(), ErrorKind::usage, "cannot open config file: " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const std::exception& e) {
        fail(ErrorKind::parse, path + ": " + e.what());
    }

    RunConfig cfg;
    reject_unknown(j, {"out_dir", "train_corpus", "test_corpus", "seed", "threads", "model", "train"},
                   "top level");
    read_if(j, "out_dir", &cfg.out_dir);
    read_if(j, "train_corpus", &cfg.train_corpus);
    read_if(j, "test_corpus", &cfg.test_corpus);
    read_if(j, "seed", &cfg.seed);
    read_if(j, "threads", &cfg.threads);

    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m,
                       {"d", "deep_neurons", "shallow_neurons", "tau", "steps", "layers", "heads",
                        "max_step_tokens", "max_question_tokens", "mlp_ratio", "g_hidden",
                        "f_hidden", "use_randomness", "init_seed"},
                       "model");
        read_if(m, "d", &cfg.model.d);
        read_if(m, "deep_neurons", &cfg.model.deep_neurons);
        read_if(m, "shallow_neurons", &cfg.model.shallow_neurons);
        read_if(m, "tau", &cfg.model.tau);
        read_if(m, "steps", &cfg.model.steps);
        read_if(m, "layers", &cfg.model.layers);
        read_if(m, "heads", &cfg.model.heads);
        read_if(m, "max_step_tokens", &cfg.model.max_step_tokens);
        read_if(m, "max_question_tokens", &cfg.model.max_question_tokens);
        read_if(m, "mlp_ratio", &cfg.model.mlp_ratio);
        read_if(m, "g_hidden", &cfg.model.g_hidden);
        read_if(m, "f_hidden", &cfg.model.f_hidden);
        read_if(m, "use_randomness", &cfg.model.use_randomness);
        read_if(m, "init_seed", &cfg.model.init_seed);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"lr", "weight_decay", "batch", "epochs", "lambda", "warmup_iters",
                        "clip_norm", "threads"},
                       "train");
        read_if(t, "lr", &cfg.train.lr);
        read_if(t, "weight_decay", &cfg.train.weight_decay);
        read_if(t, "batch", &cfg.train.batch);
        read_if(t, "epochs", &cfg.train.epochs);
        read_if(t, "lambda", &cfg.train.lambda);
        read_if(t, "warmup_iters", &cfg.train.warmup_iters);
        read_if(t, "clip_norm", &cfg.train.clip_norm);
        read_if(t, "threads", &cfg.train.threads);
    }
    cfg.train.seed = cfg.seed;
    if (cfg.train.threads == 0) cfg.train.threads = cfg.threads;

    if (const char* env = std::getenv("MARCOS_OUT_DIR"); env && *env) cfg.out_dir = env;
    if (const char* dev = std::getenv("MARCOS_DEVICE"); dev && *dev) {
        require(std::string(dev) == "cpu", ErrorKind::usage,
                "MARCOS_DEVICE supports only 'cpu', got: " + std::string(dev));
    }
    return cfg;
}

json run_config_to_json(const RunConfig& cfg) {
    json m{{"d", cfg.model.d},
           {"deep_neurons", cfg.model.deep_neurons},
           {"shallow_neurons", cfg.model.shallow_neurons},
           {"tau", cfg.model.tau},
           {"steps", cfg.model.steps},
           {"layers", cfg.model.layers},
           {"heads", cfg.model.heads},
           {"max_step_tokens", cfg.model.max_step_tokens},
           {"max_question_tokens", cfg.model.max_question_tokens},
           {"mlp_ratio", cfg.model.mlp_ratio},
           {"g_hidden", cfg.model.g_hidden},
           {"f_hidden", cfg.model.f_hidden},
           {"use_randomness", cfg.model.use_randomness},
           {"init_seed", cfg.model.init_seed}};
    json t{{"lr", cfg.train.lr},
           {"weight_decay", cfg.train.weight_decay},
           {"batch", cfg.train.batch},
           {"epochs", cfg.train.epochs},
           {"lambda", cfg.train.lambda},
           {"warmup_iters", cfg.train.warmup_iters},
           {"clip_norm", cfg.train.clip_norm},
           {"threads", cfg.train.threads}};
    return json{{"out_dir", cfg.out_dir},
                {"train_corpus", cfg.train_corpus},
                {"test_corpus", cfg.test_corpus},
                {"seed", cfg.seed},
                {"threads", cfg.threads},
                {"model", m},
                {"train", t}};
}

std::uint64_t config_hash(const RunConfig& cfg) { return fnv1a(run_config_to_json(cfg).dump()); }

std::string prepare_run_dir(const RunConfig& cfg, const std::string& label) {
    std::string dir =
        cfg.out_dir + "/" + label + "-" + hex64(config_hash(cfg)).substr(8);
    fs::create_directories(dir);
    {
        std::ofstream f(dir + "/resolved_config.json");
        require(f.good(), ErrorKind::io, "cannot write resolved config in " + dir);
        f << run_config_to_json(cfg).dump(2) << "\n";
    }
    {
        std::ofstream f(dir + "/VERSION");
        f << kVersion << "\n";
    }
    return dir;
}

CsvWriter::CsvWriter(const std::string& path, const std::vector<std::string>& header)
    : path_(path) {
    std::ofstream f(path_);
    require(f.good(), ErrorKind::io, "cannot write csv: " + path_);
    for (std::size_t i = 0; i < header.size(); ++i) f << (i ? "," : "") << header[i];
    f << "\n";
}

void CsvWriter::row(const std::vector<std::string>& cells) {
    std::ofstream f(path_, std::ios::app);
    require(f.good(), ErrorKind::io, "cannot append csv: " + path_);
    for (std::size_t i = 0; i < cells.size(); ++i) f << (i ? "," : "") << cells[i];
    f << "\n";
}

std::string CsvWriter::num(Real v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string CsvWriter::num(long long v) { return std::to_string(v); }

}  // namespace marcos

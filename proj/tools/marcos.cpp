#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "marcos/analysis.hpp"
#include "marcos/checkpoint.hpp"
#include "marcos/eval.hpp"
#include "marcos/runio.hpp"

namespace fs = std::filesystem;
using namespace marcos;
using nlohmann::json;

namespace {

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::usage: return 1;
        case ErrorKind::precondition: return 2;
        default: return 3;
    }
}

std::pair<int, int> parse_step_range(const std::string& spec) {
    auto dash = spec.find('-');
    try {
        if (dash == std::string::npos) {
            int v = std::stoi(spec);
            return {v, v};
        }
        return {std::stoi(spec.substr(0, dash)), std::stoi(spec.substr(dash + 1))};
    } catch (const std::exception&) {
        fail(ErrorKind::usage, "bad --steps value: " + spec);
    }
}

std::vector<int> parse_dims(const std::string& csv) {
    std::vector<int> dims;
    std::size_t at = 0;
    while (at < csv.size()) {
        std::size_t comma = csv.find(',', at);
        std::string tok = csv.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
        if (!tok.empty()) {
            try {
                dims.push_back(std::stoi(tok));
            } catch (const std::exception&) {
                fail(ErrorKind::usage, "bad dimension index: " + tok);
            }
        }
        if (comma == std::string::npos) break;
        at = comma + 1;
    }
    return dims;
}

std::vector<TrainingExample> load_corpus_file(const std::string& path, const Vocabulary& vocab) {
    auto corpus = read_corpus(path, vocab);
    require(!corpus.empty(), ErrorKind::usage, "corpus file is empty: " + path);
    return corpus;
}

json record_to_json(const ItemRecord& r) {
    json j;
    j["question"] = r.question;
    j["steps_spoken"] = r.spoken;
    if (r.answer)
        j["answer"] = *r.answer;
    else
        j["answer"] = nullptr;
    j["ground_truth"] = r.ground_truth;
    j["correct"] = r.correct;
    j["no_answer"] = r.no_answer;
    j["pass_counts"] = {{"thinking", r.thinking_passes}, {"speaker", r.speaker_passes}};
    j["timings"] = {{"understand_s", r.timings.understand_s},
                    {"think_s", r.timings.think_s},
                    {"speak_s", r.timings.speak_s}};
    if (!r.error.empty()) j["error"] = r.error;
    return j;
}

void write_records(const std::string& path, const std::vector<ItemRecord>& records) {
    std::ofstream f(path);
    require(f.good(), ErrorKind::io, "cannot write records: " + path);
    for (const auto& r : records) f << record_to_json(r).dump() << "\n";
}

void write_report_csv(const std::string& path, const EvalReport& rep) {
    CsvWriter csv(path, {"variant", "n", "accuracy", "no_answer", "test_seconds", "train_seconds",
                         "mean_thinking_passes", "mean_speaker_passes"});
    csv.row({rep.variant, CsvWriter::num(static_cast<long long>(rep.n)), CsvWriter::num(rep.accuracy),
             CsvWriter::num(static_cast<long long>(rep.no_answer)), CsvWriter::num(rep.test_seconds),
             CsvWriter::num(rep.train_seconds), CsvWriter::num(rep.mean_thinking_passes),
             CsvWriter::num(rep.mean_speaker_passes)});
}

void print_report(const EvalReport& rep) {
    std::cout << "eval variant=" << rep.variant << " n=" << rep.n << " acc=" << rep.accuracy
              << " no_answer=" << rep.no_answer << " test_s=" << rep.test_seconds
              << " think_passes=" << rep.mean_thinking_passes
              << " speak_passes=" << rep.mean_speaker_passes << "\n";
}

// --- gen-corpus ---------------------------------------------------------------

int cmd_gen_corpus(const std::string& out_dir, int n_train, int n_test, const std::string& style,
                   const std::string& steps, std::uint64_t seed, std::uint64_t test_seed,
                   long long max_operand, bool force) {
    auto [min_steps, max_steps] = parse_step_range(steps);
    Vocabulary vocab;
    CorpusSpec spec;
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec.style = parse_style(style);
    spec.min_steps = min_steps;
    spec.max_steps = max_steps;
    spec.seed = seed;
    spec.test_seed = test_seed;
    spec.max_operand = max_operand;

    fs::path dir(out_dir);
    std::string train_path = (dir / "train.jsonl").string();
    std::string test_path = (dir / "test.jsonl").string();
    std::string vocab_path = (dir / "vocab.txt").string();
    if (!force) {
        for (const auto& p : {train_path, test_path, vocab_path})
            require(!fs::exists(p), ErrorKind::precondition,
                    "output exists (use --force to overwrite): " + p);
    }
    fs::create_directories(dir);

    GeneratedCorpus corpus = generate_corpus(spec, vocab);
    write_corpus(train_path, corpus.train);
    write_corpus(test_path, corpus.test);
    vocab.save(vocab_path);

    std::cout << "gen-corpus train=" << corpus.train.size() << " hash=" << hex64(file_hash(train_path))
              << " seeds=[" << corpus.train_seed_begin << "," << corpus.train_seed_end << ")"
              << " test=" << corpus.test.size() << " hash=" << hex64(file_hash(test_path))
              << " seeds=[" << corpus.test_seed_begin << "," << corpus.test_seed_end << ")\n";
    return 0;
}

// --- train ----------------------------------------------------------------------

struct CurveSink {
    std::string path;
    bool fresh = true;

    void append(const CurveRow& row) {
        if (fresh && !fs::exists(path)) {
            CsvWriter csv(path, {"phase", "epoch", "step", "L_re", "L_KL", "L_sparse", "total"});
        }
        fresh = false;
        std::ofstream f(path, std::ios::app);
        f << row.phase << "," << row.epoch << "," << row.step << "," << CsvWriter::num(row.re)
          << "," << CsvWriter::num(row.kl) << "," << CsvWriter::num(row.sparse) << ","
          << CsvWriter::num(row.total) << "\n";
    }
};

int cmd_train(const std::string& config_path, const std::string& phase, bool resume) {
    RunConfig cfg = load_run_config(config_path);
    require(!cfg.train_corpus.empty(), ErrorKind::usage, "config must set train_corpus");
    std::string run_dir = prepare_run_dir(cfg, "train");
    Vocabulary vocab;
    auto corpus = load_corpus_file(cfg.train_corpus, vocab);

    std::unique_ptr<Model> model;
    std::string last_path = run_dir + "/last.ckpt";
    if (resume && fs::exists(last_path)) {
        model = Model::load(last_path, /*with_optimizer_state=*/true);
    } else {
        ModelConfig mc = cfg.model;
        mc.vocab = vocab.size();
        model = std::make_unique<Model>(mc);
    }
    auto segmented = segment_corpus(corpus, model->config().steps, vocab);

    CurveSink curve{run_dir + "/curve.csv"};
    auto run_one_phase = [&](int which) {
        TrainConfig tc = cfg.train;
        tc.phase = which == 2 ? 2 : 1;
        if (resume && model->meta().phase_in_progress == which) {
            tc.start_epoch = model->meta().epochs_done;
            tc.start_iterations = model->meta().opt_iterations;
        }
        TrainHooks hooks;
        hooks.diagnostic_path = run_dir + "/diagnostic.json";
        hooks.on_epoch = [&](const CurveRow& row) {
            curve.append(row);
            model->meta().phase_in_progress = which;
            model->meta().epochs_done = row.epoch + 1;
            model->meta().opt_iterations = row.step;
            model->save(last_path, /*with_optimizer_state=*/true);
            std::cout << "phase " << row.phase << " epoch " << row.epoch << " re=" << row.re
                      << " kl=" << row.kl << " sparse=" << row.sparse << "\n";
            return true;
        };
        PhaseResult r = which == 1 ? train_phase1(*model, segmented, tc, hooks)
                                   : train_phase2(*model, segmented, tc, hooks);
        model->meta().epochs_done = 0;
        model->meta().opt_iterations = 0;
        model->save(run_dir + "/phase" + std::to_string(which) + ".ckpt");
        model->save(last_path, /*with_optimizer_state=*/true);
        std::cout << "phase" << which << " done: epochs=" << cfg.train.epochs
                  << " seconds=" << r.seconds << " token_acc=" << r.token_accuracy
                  << " mean_abs_r=" << r.mean_abs_r << "\n";
        return r;
    };

    if (phase == "1") {
        run_one_phase(1);
    } else if (phase == "2") {
        require(model->meta().phase1_done || (resume && model->meta().phase_in_progress == 2),
                ErrorKind::precondition, "phase 2 requires a phase-1 checkpoint in " + run_dir);
        run_one_phase(2);
    } else if (phase == "all") {
        if (!model->meta().phase1_done) run_one_phase(1);
        if (!model->meta().phase2_done) run_one_phase(2);
    } else {
        fail(ErrorKind::usage, "--phase must be 1, 2 or all");
    }
    std::cout << "checkpoint_dir=" << run_dir << "\n";
    return 0;
}

// --- eval -----------------------------------------------------------------------

int cmd_eval(const std::string& ckpt, const std::string& test_path, const std::string& mode,
             const std::string& decode, const std::string& speak, int batch, int threads,
             std::uint64_t seed, int max_tokens, const std::string& out_dir) {
    auto model = Model::load(ckpt);
    auto corpus = load_corpus_file(test_path, model->vocab());
    EvalOptions eo;
    eo.mode = parse_sample_mode(mode);
    eo.decode = parse_decode_mode(decode);
    eo.speak = parse_speak_policy(speak);
    eo.batch = batch;
    eo.threads = threads;
    eo.seed = seed;
    eo.max_tokens = max_tokens;
    HarnessResult hr = evaluate(*model, corpus, eo);
    print_report(hr.report);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_records(out_dir + "/records.jsonl", hr.records);
        write_report_csv(out_dir + "/report.csv", hr.report);
    }
    for (const auto& r : hr.records)
        if (!r.error.empty()) return 3;
    return 0;
}

// --- solve ----------------------------------------------------------------------

int cmd_solve(const std::string& ckpt, const std::string& question, const std::string& corpus_path,
              const std::string& mode, const std::string& speak, const std::string& decode,
              std::uint64_t seed, int max_tokens, const std::string& out_dir) {
    auto model = Model::load(ckpt);
    std::vector<std::string> questions;
    std::vector<long long> gts;
    bool have_gt = false;
    if (!question.empty()) {
        questions.push_back(question);
    } else {
        require(!corpus_path.empty(), ErrorKind::usage, "solve needs --question or --corpus");
        auto corpus = load_corpus_file(corpus_path, model->vocab());
        for (const auto& ex : corpus) {
            questions.push_back(ex.question);
            gts.push_back(ex.answer);
        }
        have_gt = true;
    }
    BatchOptions bo;
    bo.solve.mode = parse_sample_mode(mode);
    bo.solve.speak = parse_speak_policy(speak);
    bo.solve.decode = parse_decode_mode(decode);
    bo.solve.seed = seed;
    bo.solve.max_tokens = max_tokens;
    BatchResult br = batch_solve(*model, questions, bo);

    std::vector<ItemRecord> records(questions.size());
    bool any_error = false;
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const Solution& s = br.solutions[i];
        ItemRecord& r = records[i];
        r.question = questions[i];
        r.spoken = s.spoken;
        r.answer = s.answer;
        r.no_answer = !s.answer.has_value();
        if (have_gt) {
            r.ground_truth = gts[i];
            r.correct = s.answer.has_value() && *s.answer == gts[i];
        }
        r.thinking_passes = s.thinking_passes;
        r.speaker_passes = s.speaker_passes;
        r.timings = s.timings;
        r.error = s.error;
        any_error = any_error || !s.error.empty();
        json j = record_to_json(r);
        j.erase("timings");  // stdout stays identical across reruns
        if (!have_gt) {
            j.erase("ground_truth");
            j.erase("correct");
        }
        std::cout << j.dump() << "\n";
    }
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_records(out_dir + "/records.jsonl", records);
    }
    return any_error ? 3 : 0;
}

// --- ablate ---------------------------------------------------------------------

std::vector<Real> parse_reals(const std::string& csv) {
    std::vector<Real> out;
    std::size_t at = 0;
    while (at < csv.size()) {
        std::size_t comma = csv.find(',', at);
        std::string tok = csv.substr(at, comma == std::string::npos ? std::string::npos : comma - at);
        if (!tok.empty()) {
            try {
                out.push_back(std::stod(tok));
            } catch (const std::exception&) {
                fail(ErrorKind::usage, "bad numeric value: " + tok);
            }
        }
        if (comma == std::string::npos) break;
        at = comma + 1;
    }
    return out;
}

int cmd_ablate(const std::string& config_path, const std::string& variants_csv, int batch,
               const std::string& lambda_sweep) {
    RunConfig cfg = load_run_config(config_path);
    require(!cfg.train_corpus.empty() && !cfg.test_corpus.empty(), ErrorKind::usage,
            "ablate config must set train_corpus and test_corpus");
    std::string run_dir = prepare_run_dir(cfg, "ablate");
    Vocabulary vocab;
    auto train_c = load_corpus_file(cfg.train_corpus, vocab);
    auto test_c = load_corpus_file(cfg.test_corpus, vocab);

    if (!lambda_sweep.empty()) {
        std::vector<Real> lambdas = parse_reals(lambda_sweep);
        require(!lambdas.empty(), ErrorKind::usage, "empty --lambda-sweep list");
        ModelConfig mc = cfg.model;
        mc.vocab = vocab.size();
        EvalOptions eo;
        eo.batch = batch;
        eo.threads = cfg.threads;
        CsvWriter csv(run_dir + "/lambda_sweep.csv",
                      {"lambda", "mean_abs_r", "token_accuracy", "accuracy"});
        std::cout << "lambda,mean_abs_r,token_accuracy,accuracy\n";
        for (Real lambda : lambdas) {
            Model model(mc);
            TrainConfig tc = cfg.train;
            tc.lambda = lambda;
            auto segmented = segment_corpus(train_c, mc.steps, vocab);
            PhaseResult p1 = train_phase1(model, segmented, tc);
            train_phase2(model, segmented, tc);
            HarnessResult hr = evaluate(model, test_c, eo);
            csv.row({CsvWriter::num(lambda), CsvWriter::num(p1.mean_abs_r),
                     CsvWriter::num(p1.token_accuracy), CsvWriter::num(hr.report.accuracy)});
            std::cout << lambda << "," << p1.mean_abs_r << "," << p1.token_accuracy << ","
                      << hr.report.accuracy << "\n";
        }
        std::cout << "sweep_dir=" << run_dir << "\n";
        return 0;
    }

    std::vector<AblationVariant> variants;
    for (const auto& name :
         {std::string("full"), std::string("no_deep"), std::string("no_R"), std::string("no_sparsity")}) {
        if (variants_csv == "all" || variants_csv.find(name) != std::string::npos)
            variants.push_back(parse_variant(name));
    }
    require(!variants.empty(), ErrorKind::usage, "no variants selected");

    ModelConfig mc = cfg.model;
    mc.vocab = vocab.size();
    EvalOptions eo;
    eo.batch = batch;
    eo.threads = cfg.threads;

    CsvWriter csv(run_dir + "/comparison.csv",
                  {"variant", "accuracy", "no_answer", "test_seconds", "train_seconds_per_epoch",
                   "mean_abs_r", "collapse_flag", "accuracy_ratio", "abs_r_ratio"});
    std::unique_ptr<AblationOutcome> full;
    std::cout << "variant,accuracy,test_s,train_s_per_epoch,mean_abs_r,collapsed\n";
    for (AblationVariant v : variants) {
        AblationOutcome out = run_ablation(v, train_c, test_c, mc, cfg.train, eo);
        CollapseFlag flag;
        if (v == AblationVariant::full) {
            full = std::make_unique<AblationOutcome>(std::move(out));
            full->model->save(run_dir + "/full.ckpt");
            csv.row({"full", CsvWriter::num(full->report.accuracy),
                     CsvWriter::num(static_cast<long long>(full->report.no_answer)),
                     CsvWriter::num(full->report.test_seconds),
                     CsvWriter::num(full->report.train_seconds), CsvWriter::num(full->mean_abs_r),
                     "0", "1", "1"});
            std::cout << "full," << full->report.accuracy << "," << full->report.test_seconds << ","
                      << full->report.train_seconds << "," << full->mean_abs_r << ",0\n";
            continue;
        }
        require(full != nullptr, ErrorKind::usage,
                "variant comparisons need 'full' first in --variants");
        flag = collapse_flag(*full, out);
        out.model->save(run_dir + "/" + out.variant + ".ckpt");
        csv.row({out.variant, CsvWriter::num(out.report.accuracy),
                 CsvWriter::num(static_cast<long long>(out.report.no_answer)),
                 CsvWriter::num(out.report.test_seconds), CsvWriter::num(out.report.train_seconds),
                 CsvWriter::num(out.mean_abs_r), flag.collapsed ? "1" : "0",
                 CsvWriter::num(flag.accuracy_ratio), CsvWriter::num(flag.abs_r_ratio)});
        std::cout << out.variant << "," << out.report.accuracy << "," << out.report.test_seconds
                  << "," << out.report.train_seconds << "," << out.mean_abs_r << ","
                  << (flag.collapsed ? 1 : 0) << "\n";
    }
    std::cout << "ablate_dir=" << run_dir << "\n";
    return 0;
}

// --- analyze ---------------------------------------------------------------------

int cmd_analyze(const std::string& ckpt, const std::string& corpus_path, const std::string& out_dir,
                Real threshold, Real top_fraction, Real edge_threshold, bool sampled, int threads) {
    auto model = Model::load(ckpt);
    auto corpus = load_corpus_file(corpus_path, model->vocab());
    auto segmented = segment_corpus(corpus, model->config().steps, model->vocab());
    fs::create_directories(out_dir);

    CollectOptions co;
    co.sampled = sampled;
    co.threads = threads;
    auto records = collect_activations(*model, segmented, co);

    {
        CsvWriter csv(out_dir + "/activations_summary.csv",
                      {"example", "step", "active_dims", "max_abs", "mean_abs"});
        for (const auto& rec : records) {
            long active = 0;
            for (Eigen::Index i = 0; i < rec.values.size(); ++i)
                if (std::abs(rec.values(i)) > threshold) ++active;
            csv.row({CsvWriter::num(static_cast<long long>(rec.example)),
                     CsvWriter::num(static_cast<long long>(rec.step)),
                     CsvWriter::num(static_cast<long long>(active)),
                     CsvWriter::num(rec.values.cwiseAbs().maxCoeff()),
                     CsvWriter::num(rec.values.cwiseAbs().mean())});
        }
    }
    auto counts = activation_frequency(records, threshold);
    {
        CsvWriter csv(out_dir + "/frequency.csv", {"dim", "count"});
        for (std::size_t i = 0; i < counts.size(); ++i)
            csv.row({CsvWriter::num(static_cast<long long>(i)),
                     CsvWriter::num(static_cast<long long>(counts[i]))});
    }
    CorrelationGraph graph = correlation_graph(records, top_fraction, edge_threshold);
    {
        CsvWriter csv(out_dir + "/correlation_edges.csv", {"dim_a", "dim_b", "pearson_r"});
        for (auto [a, b] : graph.edges) {
            Eigen::Index ia = std::find(graph.dims.begin(), graph.dims.end(), a) - graph.dims.begin();
            Eigen::Index ib = std::find(graph.dims.begin(), graph.dims.end(), b) - graph.dims.begin();
            csv.row({CsvWriter::num(static_cast<long long>(a)), CsvWriter::num(static_cast<long long>(b)),
                     CsvWriter::num(graph.corr(ia, ib))});
        }
    }
    {
        CsvWriter csv(out_dir + "/cliques.csv", {"clique", "dims"});
        for (std::size_t i = 0; i < graph.cliques.size(); ++i) {
            std::string dims;
            for (std::size_t j = 0; j < graph.cliques[i].size(); ++j)
                dims += (j ? " " : "") + std::to_string(graph.cliques[i][j]);
            csv.row({CsvWriter::num(static_cast<long long>(i)), dims});
        }
    }
    bool text_style = !records.empty() && records[0].style.name == "text";
    if (text_style) {
        StyleAttribution attr = style_attribution(records);
        CsvWriter csv(out_dir + "/attribution.csv", {"dim", "mi_verbose", "mi_units", "mi_fraction"});
        for (Eigen::Index d = 0; d < attr.mi.rows(); ++d)
            csv.row({CsvWriter::num(static_cast<long long>(d)), CsvWriter::num(attr.mi(d, 0)),
                     CsvWriter::num(attr.mi(d, 1)), CsvWriter::num(attr.mi(d, 2))});
    }
    std::cout << "analyze records=" << records.size() << " dims=" << counts.size()
              << " selected=" << graph.dims.size() << " edges=" << graph.edges.size()
              << " cliques=" << graph.cliques.size() << " attribution=" << (text_style ? 1 : 0)
              << " out=" << out_dir << "\n";
    return 0;
}

// --- intervene ---------------------------------------------------------------------

int cmd_intervene(const std::string& ckpt, const std::string& corpus_path, const std::string& dims,
                  Real value, const std::string& speak, const std::string& out_dir, int threads) {
    auto model = Model::load(ckpt);
    auto corpus = load_corpus_file(corpus_path, model->vocab());
    InterventionSpec spec;
    spec.dims = parse_dims(dims);
    spec.value = value;
    InterveneOptions io;
    io.speak = parse_speak_policy(speak);
    io.threads = threads;
    InterventionReport rep = intervene(*model, corpus, spec, io);
    std::cout << "intervene dims=" << spec.dims.size() << " value=" << value << " n=" << rep.n
              << " length_delta_pct=" << rep.mean_length_delta_pct
              << " format_rate=" << rep.format_rate << " accuracy=" << rep.accuracy
              << " baseline_format_rate=" << rep.baseline_format_rate
              << " baseline_accuracy=" << rep.baseline_accuracy
              << " identical=" << (rep.identical_to_baseline ? 1 : 0) << "\n";
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        CsvWriter csv(out_dir + "/intervention.csv",
                      {"dims", "value", "n", "mean_length_delta_pct", "format_rate", "accuracy",
                       "baseline_mean_length", "baseline_format_rate", "baseline_accuracy"});
        csv.row({dims, CsvWriter::num(value), CsvWriter::num(static_cast<long long>(rep.n)),
                 CsvWriter::num(rep.mean_length_delta_pct), CsvWriter::num(rep.format_rate),
                 CsvWriter::num(rep.accuracy), CsvWriter::num(rep.baseline_mean_length),
                 CsvWriter::num(rep.baseline_format_rate), CsvWriter::num(rep.baseline_accuracy)});
    }
    return 0;
}

// --- nar ---------------------------------------------------------------------------

int cmd_nar(const std::string& config_path, const std::string& ckpt) {
    RunConfig cfg = load_run_config(config_path);
    require(!cfg.train_corpus.empty(), ErrorKind::usage, "config must set train_corpus");
    std::string run_dir = prepare_run_dir(cfg, "nar");
    auto model = Model::load(ckpt);
    auto corpus = load_corpus_file(cfg.train_corpus, model->vocab());
    auto segmented = segment_corpus(corpus, model->config().steps, model->vocab());

    CurveSink curve{run_dir + "/nar_curve.csv"};
    TrainHooks hooks;
    hooks.diagnostic_path = run_dir + "/diagnostic.json";
    hooks.on_epoch = [&](const CurveRow& row) {
        curve.append(row);
        std::cout << "nar epoch " << row.epoch << " re=" << row.re << "\n";
        return true;
    };
    TrainConfig tc = cfg.train;
    PhaseResult r = train_nar(*model, segmented, tc, hooks);
    model->save(run_dir + "/nar.ckpt");
    std::cout << "nar done: token_acc=" << r.token_accuracy << " seconds=" << r.seconds
              << " ckpt=" << run_dir + "/nar.ckpt" << "\n";
    return 0;
}

// --- baseline ------------------------------------------------------------------------

int cmd_baseline_train(const std::string& config_path) {
    RunConfig cfg = load_run_config(config_path);
    require(!cfg.train_corpus.empty(), ErrorKind::usage, "config must set train_corpus");
    std::string run_dir = prepare_run_dir(cfg, "baseline");
    Vocabulary vocab;
    auto corpus = load_corpus_file(cfg.train_corpus, vocab);
    BaselineConfig bc;
    bc.d = cfg.model.d;
    bc.layers = cfg.model.layers;
    bc.heads = cfg.model.heads;
    bc.vocab = vocab.size();
    bc.mlp_ratio = cfg.model.mlp_ratio;
    bc.init_seed = cfg.model.init_seed;
    CotBaseline baseline(bc);
    CurveSink curve{run_dir + "/baseline_curve.csv"};
    TrainHooks hooks;
    hooks.on_epoch = [&](const CurveRow& row) {
        curve.append(row);
        std::cout << "baseline epoch " << row.epoch << " nll=" << row.total << "\n";
        return true;
    };
    PhaseResult r = baseline.train(corpus, cfg.train, hooks);
    baseline.save(run_dir + "/baseline.ckpt");
    std::cout << "baseline done: token_acc=" << r.token_accuracy << " seconds=" << r.seconds
              << " ckpt=" << run_dir + "/baseline.ckpt" << "\n";
    return 0;
}

int cmd_baseline_eval(const std::string& ckpt, const std::string& test_path, int batch, int threads,
                      int max_tokens, const std::string& out_dir) {
    auto baseline = CotBaseline::load(ckpt);
    auto corpus = load_corpus_file(test_path, baseline->vocab());
    HarnessResult hr = evaluate_baseline(*baseline, corpus, batch, threads, max_tokens);
    hr.report.variant = "cot_baseline";
    print_report(hr.report);
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        write_records(out_dir + "/records.jsonl", hr.records);
        write_report_csv(out_dir + "/report.csv", hr.report);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent-chain reasoning at desk scale: corpus, training, inference, analysis"};
    app.require_subcommand(1);

    // gen-corpus
    std::string gc_out, gc_style = "equation", gc_steps = "1-4";
    int gc_train = 0, gc_test = 0;
    std::uint64_t gc_seed = 1, gc_test_seed = 0;
    long long gc_max_operand = 99;
    bool gc_force = false;
    auto* gc = app.add_subcommand("gen-corpus", "Generate a synthetic arithmetic corpus");
    gc->add_option("--out", gc_out)->required();
    gc->add_option("--n-train", gc_train)->required();
    gc->add_option("--n-test", gc_test)->required();
    gc->add_option("--style", gc_style)->check(CLI::IsMember({"equation", "text"}));
    gc->add_option("--steps", gc_steps);
    gc->add_option("--seed", gc_seed);
    gc->add_option("--test-seed", gc_test_seed);
    gc->add_option("--max-operand", gc_max_operand);
    gc->add_flag("--force", gc_force);

    // train
    std::string tr_config, tr_phase = "all";
    bool tr_resume = false;
    auto* tr = app.add_subcommand("train", "Two-phase training");
    tr->add_option("--config", tr_config)->required();
    tr->add_option("--phase", tr_phase)->check(CLI::IsMember({"1", "2", "all"}));
    tr->add_flag("--resume", tr_resume);

    // eval
    std::string ev_ckpt, ev_test, ev_mode = "mean", ev_decode = "ar", ev_speak = "final_only",
                ev_out;
    int ev_batch = 64, ev_threads = 0, ev_max_tokens = kNarLength;
    std::uint64_t ev_seed = 0;
    auto* ev = app.add_subcommand("eval", "Accuracy/timing evaluation");
    ev->add_option("--ckpt", ev_ckpt)->required();
    ev->add_option("--test", ev_test)->required();
    ev->add_option("--mode", ev_mode);
    ev->add_option("--decode", ev_decode);
    ev->add_option("--speak", ev_speak);
    ev->add_option("--batch", ev_batch);
    ev->add_option("--threads", ev_threads);
    ev->add_option("--seed", ev_seed);
    ev->add_option("--max-tokens", ev_max_tokens);
    ev->add_option("--out", ev_out);

    // solve
    std::string so_ckpt, so_question, so_corpus, so_mode = "mean", so_speak = "final_only",
                so_decode = "ar", so_out;
    std::uint64_t so_seed = 0;
    int so_max_tokens = kNarLength;
    auto* so = app.add_subcommand("solve", "Solve one question or a corpus");
    so->add_option("--ckpt", so_ckpt)->required();
    so->add_option("--question", so_question);
    so->add_option("--corpus", so_corpus);
    so->add_option("--mode", so_mode);
    so->add_option("--speak", so_speak);
    so->add_option("--decode", so_decode);
    so->add_option("--seed", so_seed);
    so->add_option("--max-tokens", so_max_tokens);
    so->add_option("--out", so_out);

    // ablate
    std::string ab_config, ab_variants = "all", ab_sweep;
    int ab_batch = 64;
    auto* ab = app.add_subcommand("ablate", "Train and evaluate ablation variants");
    ab->add_option("--config", ab_config)->required();
    ab->add_option("--variants", ab_variants);
    ab->add_option("--batch", ab_batch);
    ab->add_option("--lambda-sweep", ab_sweep, "comma-separated sparsity weights");

    // analyze
    std::string an_ckpt, an_corpus, an_out;
    double an_threshold = 0.1, an_top = 0.01, an_edge = 0.9;
    bool an_sampled = false;
    int an_threads = 0;
    auto* an = app.add_subcommand("analyze", "Randomness-dimension analysis pipeline");
    an->add_option("--ckpt", an_ckpt)->required();
    an->add_option("--corpus", an_corpus)->required();
    an->add_option("--out", an_out)->required();
    an->add_option("--threshold", an_threshold);
    an->add_option("--top-fraction", an_top);
    an->add_option("--edge-threshold", an_edge);
    an->add_flag("--sampled", an_sampled);
    an->add_option("--threads", an_threads);

    // intervene
    std::string iv_ckpt, iv_corpus, iv_dims, iv_speak = "all", iv_out;
    double iv_value = 0;
    int iv_threads = 0;
    auto* iv = app.add_subcommand("intervene", "Overwrite chosen randomness dimensions");
    iv->add_option("--ckpt", iv_ckpt)->required();
    iv->add_option("--corpus", iv_corpus)->required();
    iv->add_option("--dims", iv_dims);
    iv->add_option("--value", iv_value);
    iv->add_option("--speak", iv_speak);
    iv->add_option("--out", iv_out);
    iv->add_option("--threads", iv_threads);

    // nar
    std::string na_config, na_ckpt;
    auto* na = app.add_subcommand("nar", "Train the non-autoregressive speaker");
    na->add_option("--config", na_config)->required();
    na->add_option("--ckpt", na_ckpt)->required();

    // baseline
    auto* bl = app.add_subcommand("baseline", "Token-level chain-of-thought baseline");
    bl->require_subcommand(1);
    std::string blt_config;
    auto* blt = bl->add_subcommand("train", "Train the baseline");
    blt->add_option("--config", blt_config)->required();
    std::string ble_ckpt, ble_test, ble_out;
    int ble_batch = 64, ble_threads = 0, ble_max_tokens = 160;
    auto* ble = bl->add_subcommand("eval", "Evaluate the baseline");
    ble->add_option("--ckpt", ble_ckpt)->required();
    ble->add_option("--test", ble_test)->required();
    ble->add_option("--batch", ble_batch);
    ble->add_option("--threads", ble_threads);
    ble->add_option("--max-tokens", ble_max_tokens);
    ble->add_option("--out", ble_out);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (gc->parsed())
            return cmd_gen_corpus(gc_out, gc_train, gc_test, gc_style, gc_steps, gc_seed,
                                  gc_test_seed, gc_max_operand, gc_force);
        if (tr->parsed()) return cmd_train(tr_config, tr_phase, tr_resume);
        if (ev->parsed())
            return cmd_eval(ev_ckpt, ev_test, ev_mode, ev_decode, ev_speak, ev_batch, ev_threads,
                            ev_seed, ev_max_tokens, ev_out);
        if (so->parsed())
            return cmd_solve(so_ckpt, so_question, so_corpus, so_mode, so_speak, so_decode, so_seed,
                             so_max_tokens, so_out);
        if (ab->parsed()) return cmd_ablate(ab_config, ab_variants, ab_batch, ab_sweep);
        if (an->parsed())
            return cmd_analyze(an_ckpt, an_corpus, an_out, an_threshold, an_top, an_edge,
                               an_sampled, an_threads);
        if (iv->parsed())
            return cmd_intervene(iv_ckpt, iv_corpus, iv_dims, iv_value, iv_speak, iv_out,
                                 iv_threads);
        if (na->parsed()) return cmd_nar(na_config, na_ckpt);
        if (bl->parsed()) {
            if (blt->parsed()) return cmd_baseline_train(blt_config);
            if (ble->parsed())
                return cmd_baseline_eval(ble_ckpt, ble_test, ble_batch, ble_threads, ble_max_tokens,
                                         ble_out);
        }
        fail(ErrorKind::usage, "no subcommand");
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "facl/experiment.hpp"
#include "test_support.hpp"

using namespace facl;
namespace fs = std::filesystem;

namespace {

const char* kSmallConfig =
    "# small stream\n"
    "input_dim = 6\n"
    "train_per_class = 20\n"
    "test_per_class = 5\n"
    "hidden_dims = 8\n"
    "feature_dim = 6\n"
    "projection_dim = 4\n"
    "epochs_base = 1\n"
    "queue = 32\n"
    "batch = 32\n";

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

fs::path scratch(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / ("facl_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const std::string& text) {
    const fs::path p = dir / "run.cfg";
    std::ofstream(p) << text;
    return p;
}

int run_cli(const std::string& args, const fs::path& stderr_file) {
    const std::string cmd = std::string(FACL_CLI_PATH) + " " + args + " 2> " + stderr_file.string();
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, DefaultsAreMaterialised) {
    const RunConfig c = parse_config("");
    EXPECT_EQ(c.protocol.epochs_incremental, 10u);
    EXPECT_EQ(c.protocol.batch, 64u);
    EXPECT_EQ(c.protocol.sgd_momentum, 0.9);
    EXPECT_EQ(c.protocol.transforms, 1u);
    EXPECT_EQ(c.protocol.delta, 0.5);
    EXPECT_EQ(c.protocol.tau, 0.07);
    EXPECT_EQ(c.protocol.queue, 1024u);
    EXPECT_EQ(c.protocol.ema, 0.999);
    const std::string text = config_to_text(c);
    for (const char* key : {"epochs_incremental = 10", "tau = 0.07", "queue = 1024", "ema = 0.999", "variant = ", "seed = 1"})
        EXPECT_NE(text.find(key), std::string::npos) << key;
}

TEST(Config, ParsesValuesAndComments) {
    const RunConfig c = parse_config("# note\n  delta = 0.25 \n\nhidden_dims = 16, 8\nvariant = ce+sscl+pc\n"
                                     "aggregation = max\nfinetune_incremental = true\nsweep_seeds = 3,4\n");
    EXPECT_EQ(c.protocol.delta, 0.25);
    EXPECT_EQ(c.protocol.hidden_dims, (std::vector<std::size_t>{16, 8}));
    EXPECT_EQ(c.protocol.variant, AblationVariant::ce_sscl_pc());
    EXPECT_EQ(c.protocol.aggregation, Aggregation::Max);
    EXPECT_TRUE(c.protocol.finetune_incremental);
    EXPECT_EQ(c.sweep_seeds, (std::vector<std::uint64_t>{3, 4}));
}

TEST(Config, ManifestRoundTripIsExact) {
    RunConfig c = parse_config(kSmallConfig);
    c.protocol.lr = 0.1 + 0.2;  // not exactly representable as typed
    c.sweep_deltas = {0.1, 1.0 / 3.0};
    const RunConfig back = parse_config(config_to_text(c));
    EXPECT_EQ(back.protocol.lr, c.protocol.lr);
    EXPECT_EQ(back.sweep_deltas, c.sweep_deltas);
    EXPECT_EQ(config_to_text(back), config_to_text(c));
}

TEST(Config, ErrorsNameTheKey) {
    try {
        parse_config("epochs_base = 3\nwarmup = 5\n");
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_EQ(e.key(), "warmup");
        EXPECT_NE(std::string(e.what()).find("warmup"), std::string::npos);
    }
    for (const char* bad : {"batch = -1\n", "batch = 3x\n", "lr = \n", "variant = ce+fa\n", "aggregation = mean\n",
                            "delta = 0.1\ndelta = 0.2\n", "finetune_incremental = maybe\n"}) {
        EXPECT_THROW(parse_config(bad), ConfigError) << bad;
    }
    EXPECT_THROW(parse_config("no equals sign\n"), ConfigError);
    EXPECT_THROW(parse_config("delta = 1.5\n"), ConfigError);
    EXPECT_THROW(parse_config("ways = 4\n"), ConfigError);  // 4 x 3 sessions != 6 classes
}

TEST(Report, NumbersKeepSixSignificantDigitsAndRoundTrip) {
    EXPECT_EQ(format_report_number(28.0), "28.0000");
    EXPECT_EQ(format_report_number(0.0), "0.00000");
    EXPECT_EQ(format_report_number(70.4), "70.4000");
    for (double v : {86.2 - 58.2, 1.0 / 3.0, 1e-7, 123456789.25, -2.5})
        EXPECT_EQ(std::stod(format_report_number(v)), v);
}

TEST(Report, JsonShapeAndRoundTrip) {
    const MetricsReport m = compute_metrics({86.20, 58.20});
    const std::string json = metrics_to_json(m);
    const auto j = nlohmann::json::parse(json);
    EXPECT_EQ(j.size(), 4u);
    for (const char* key : {"accuracies", "average_acc", "pd", "delta_fi"}) EXPECT_TRUE(j.contains(key)) << key;
    EXPECT_TRUE(j["delta_fi"].is_null());
    EXPECT_NEAR(j["pd"].get<double>(), 28.00, 1e-9);
    EXPECT_EQ(parse_metrics_json(json), m);
    const MetricsReport with = compute_metrics({86.20, 58.20}, 2.65);
    EXPECT_EQ(parse_metrics_json(emit_report(with, ReportFormat::Json)), with);
    EXPECT_THROW(parse_metrics_json("{\"pd\": 1}"), FormatError);
}

TEST(Report, CsvColumns) {
    const std::string csv = emit_report(compute_metrics({50.0, 25.5}), ReportFormat::Csv);
    EXPECT_EQ(csv, "session,accuracy\n0,50.0000\n1,25.5000\n");
}

TEST(Report, ConfusionLayout) {
    EvalResult r;
    r.labels = {0, 4};
    r.confusion = {{3, 1}, {0, 2}};
    EXPECT_EQ(confusion_to_csv(r), "true\\pred,0,4\n0,3,1\n4,0,2\n");
}

TEST(ExportEmbeddings, RowsWidthAndDeterminism) {
    DatasetSpec spec;
    spec.base_classes = 1;
    spec.inc_classes = 2;
    spec.sessions = 1;
    spec.ways = 2;
    spec.input_dim = 5;
    spec.train_per_class = 2;
    spec.test_per_class = 1;
    const SampleStore store = gen_synthetic(spec, 3, 1.0);
    ASSERT_EQ(store.size(), 9u);
    const ModelParams p = init_params(EncoderSpec{5, {7}, 4, 3}, 2);
    std::ostringstream a, b;
    export_embeddings(p, store, spec, a);
    export_embeddings(p, store, spec, b);
    EXPECT_EQ(a.str(), b.str());
    std::istringstream lines(a.str());
    std::string line;
    std::getline(lines, line);
    EXPECT_EQ(line, "label,session,f0,f1,f2,f3");
    std::size_t rows = 0;
    while (std::getline(lines, line)) {
        ++rows;
        EXPECT_EQ(std::count(line.begin(), line.end(), ','), 5);
    }
    EXPECT_EQ(rows, 9u);
    std::ostringstream c;
    EXPECT_THROW(export_embeddings(init_params(EncoderSpec{6, {7}, 4, 3}, 2), store, spec, c), ShapeError);
}

TEST(ExportEmbeddings, PrototypeSimilarityRecomputedOffline) {
    DatasetSpec spec;
    spec.base_classes = 2;
    spec.inc_classes = 2;
    spec.sessions = 1;
    spec.ways = 2;
    spec.shots = 2;
    spec.input_dim = 5;
    spec.train_per_class = 4;
    spec.test_per_class = 2;
    const SampleStore store = gen_synthetic(spec, 4, 2.0);
    ProtocolConfig cfg;
    cfg.variant = AblationVariant::ce_only();
    const ModelParams p = init_params(EncoderSpec{5, {7}, 4, 3}, 5, 2);
    const auto sessions = split_sessions(store, spec, 1);
    SessionState st;
    st.factor = 1;
    build_prototypes(st, p, make_pipeline(cfg, 5), sessions[0].train_rows, sessions[0].train_labels,
                     sessions[0].classes, 1);

    std::ostringstream out;
    export_embeddings(p, store, spec, out);
    std::istringstream lines(out.str());
    std::string line;
    std::getline(lines, line);
    std::getline(lines, line);
    std::vector<double> cells;
    std::stringstream row(line);
    for (std::string cell; std::getline(row, cell, ',');) cells.push_back(std::stod(cell));
    const int label = static_cast<int>(cells[0]);
    const std::vector<double> f(cells.begin() + 2, cells.end());
    const auto& c = st.prototype(label);
    double dot = 0.0, ff = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) dot += f[k] * c[k], ff += f[k] * f[k];
    const double offline = dot / std::sqrt(ff);

    const Tensor engine_f = forward_features(p, kernels::gather_rows(store.rows, std::vector<std::size_t>{0}));
    const double engine = kernels::dot(engine_f.row(0), c) / kernels::norm(engine_f.row(0));
    EXPECT_NEAR(offline, engine, 1e-9);
}

TEST(RunExperiment, TrainWritesArtifactsAndManifestReplays) {
    const fs::path dir = scratch("train");
    RunConfig cfg = parse_config(kSmallConfig);
    cfg.out_dir = (dir / "a").string();
    run_experiment(Command::Train, cfg);
    for (const char* f : {"metrics.json", "metrics.csv", "confusion.csv", "checkpoint.bin", "manifest.cfg"})
        EXPECT_TRUE(fs::exists(dir / "a" / f)) << f;
    RunConfig again = load_config((dir / "a" / "manifest.cfg").string());
    again.out_dir = (dir / "b").string();
    run_experiment(Command::Train, again);
    EXPECT_EQ(slurp(dir / "a" / "metrics.json"), slurp(dir / "b" / "metrics.json"));
    const ModelParams ckpt = load_checkpoint((dir / "a" / "checkpoint.bin").string());
    EXPECT_EQ(ckpt.classifier_rows(), 2 * cfg.data.total_classes());
}

TEST(RunExperiment, SweepTableHasOneRowPerDelta) {
    const fs::path dir = scratch("sweep");
    RunConfig cfg = parse_config(kSmallConfig);
    cfg.out_dir = dir.string();
    cfg.sweep_deltas = {0.0, 0.5, 1.0};
    run_experiment(Command::SweepDelta, cfg);
    const std::string table = slurp(dir / "sweep.csv");
    EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
    EXPECT_TRUE(fs::exists(dir / "metrics.json"));
}

TEST(Cli, ExitCodesAndDiagnostics) {
    const fs::path dir = scratch("exit");
    const fs::path err = dir / "stderr.txt";
    const fs::path good = write_config(dir, kSmallConfig);
    EXPECT_EQ(run_cli("train --config " + good.string() + " --out " + (dir / "out").string(), err), kExitOk);
    for (const char* f : {"metrics.json", "metrics.csv", "confusion.csv", "checkpoint.bin"})
        EXPECT_TRUE(fs::exists(dir / "out" / f)) << f;
    EXPECT_EQ(run_cli("export-embeddings --config " + good.string() + " --out " + (dir / "out").string(), err), kExitOk);
    EXPECT_TRUE(fs::exists(dir / "out" / "embeddings.csv"));

    const fs::path bad = dir / "bad.cfg";
    std::ofstream(bad) << "input_dim = 6\nlearning_rate = 0.1\n";
    EXPECT_EQ(run_cli("train --config " + bad.string(), err), kExitConfig);
    const std::string msg = slurp(err);
    EXPECT_NE(msg.find("learning_rate"), std::string::npos);
    EXPECT_EQ(std::count(msg.begin(), msg.end(), '\n'), 1);

    const fs::path missing = dir / "missing.cfg";
    std::ofstream(missing) << "store = " << (dir / "nope.bin").string() << "\n";
    EXPECT_EQ(run_cli("train --config " + missing.string() + " --out " + (dir / "m").string(), err), kExitRuntime);
    EXPECT_EQ(run_cli("train", err), kExitConfig);
}

TEST(Cli, SeedFlagOverridesConfig) {
    const fs::path dir = scratch("seed");
    const fs::path err = dir / "stderr.txt";
    const fs::path cfg = write_config(dir, kSmallConfig);
    ASSERT_EQ(run_cli("train --config " + cfg.string() + " --seed 7 --out " + (dir / "o").string(), err), kExitOk);
    EXPECT_EQ(load_config((dir / "o" / "manifest.cfg").string()).protocol.seed, 7u);
}

// mipo: synthetic data generation, training, evaluation and embedding export.

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "mipo/training.hpp"

namespace fs = std::filesystem;
using namespace mipo;
using json = nlohmann::ordered_json;

namespace {

// Bad flags, missing or malformed inputs.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const char* what) {
    if (!fs::is_regular_file(path)) throw UsageError(std::string(what) + " not found: " + path);
}

std::string fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
        if (!in) break;
    }
    char out[17];
    std::snprintf(out, sizeof out, "%016" PRIx64, h);
    return out;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Effective value of every option of `cmd`, after flags and config file.
json effective_config(const CLI::App& cmd) {
    json cfg = json::object();
    for (const CLI::Option* opt : cmd.get_options()) {
        if (opt->get_lnames().empty()) continue;
        const std::string& name = opt->get_lnames().front();
        if (name == "help" || name == "config") continue;
        std::string value;
        if (opt->count() > 0) {
            for (const auto& r : opt->reduced_results()) value += (value.empty() ? "" : ",") + r;
            if (opt->get_expected_min() == 0 && value.empty()) value = "true";
        } else {
            value = opt->get_default_str();
            if (opt->get_expected_min() == 0 && value.empty()) value = "false";
        }
        cfg[name] = value;
    }
    return cfg;
}

struct Manifest {
    std::string command;
    json config;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;

    void write(const fs::path& path, double wall_seconds) const {
        json m;
        m["command"] = command;
        m["version"] = MIPO_VERSION;
        m["seed"] = seed;
        m["config"] = config;
        json in = json::object();
        for (const auto& p : inputs) in[p] = "fnv1a64:" + fnv1a_file(p);
        m["inputs"] = in;
        json out = json::object();
        for (const auto& p : outputs) out[p] = "fnv1a64:" + fnv1a_file(p);
        m["outputs"] = out;
        m["wall_seconds"] = wall_seconds;
        write_text(path, m.dump(2) + "\n");
    }
};

ontology::OntologyGraph load_graph(const std::string& path) {
    require_file(path, "ontology file");
    return ontology::OntologyGraph::load(path);
}

ehr::Cohort load_cohort(const std::string& path, const ontology::OntologyGraph& graph) {
    require_file(path, "cohort file");
    return ehr::read_cohort(path, graph);
}

model::MipoModel load_model(const std::string& path) {
    require_file(path, "checkpoint");
    return model::load_checkpoint(path);
}

void check_model_matches(const model::MipoModel& m, const ontology::OntologyGraph& g, const std::string& ckpt,
                         const std::string& onto) {
    const auto& c = m.config();
    if (c.num_codes != g.num_leaves() || c.num_nodes != g.num_nodes() || c.categories != g.num_categories())
        throw UsageError("checkpoint " + ckpt + " expects " + std::to_string(c.num_codes) + " codes, " +
                         std::to_string(c.num_nodes) + " nodes, " + std::to_string(c.categories) +
                         " categories but ontology " + onto + " has " + std::to_string(g.num_leaves()) + ", " +
                         std::to_string(g.num_nodes()) + ", " + std::to_string(g.num_categories()));
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::string metrics_csv(const training::RankMetrics& mipo, const training::RankMetrics* baseline) {
    std::ostringstream out;
    out << "model,k,prec,acc\n";
    auto rows = [&](const char* name, const training::RankMetrics& r) {
        for (std::size_t k : training::kCutoffs) out << name << ',' << k << ',' << fmt(r.prec_at(k)) << ',' << fmt(r.acc_at(k)) << '\n';
    };
    rows("mipo", mipo);
    if (baseline) rows("frequency", *baseline);
    return out.str();
}

json ranking_json(const training::RankMetrics& r) {
    json j = json::object();
    for (std::size_t k : training::kCutoffs) {
        j["prec@" + std::to_string(k)] = r.prec_at(k);
        j["acc@" + std::to_string(k)] = r.acc_at(k);
    }
    j["samples"] = r.samples;
    return j;
}

// --- synth-data ----------------------------------------------------------------------

struct SynthArgs {
    std::string out_dir = "data";
    ehr::SynthConfig cfg;
};

void run_synth(const SynthArgs& a, const CLI::App& cmd) {
    const auto start = std::chrono::steady_clock::now();
    fs::create_directories(a.out_dir);
    auto [graph, cohort] = ehr::generate_cohort(a.cfg);
    const fs::path dir(a.out_dir);
    const auto onto = (dir / "ontology.tsv").string(), coh = (dir / "cohort.jsonl").string();
    graph.save(onto);
    ehr::write_cohort(coh, cohort, graph);

    Manifest m{"synth-data", effective_config(cmd), a.cfg.seed, {}, {onto, coh}};
    m.config["counts"] = json{{"patients", cohort.size()},
                              {"codes", graph.num_leaves()},
                              {"nodes", graph.num_nodes()},
                              {"categories", graph.num_categories()},
                              {"visits", [&] {
                                   std::size_t v = 0;
                                   for (const auto& j : cohort.journeys) v += j.visits.size();
                                   return v;
                               }()},
                              {"code_occurrences", cohort.total_codes()}};
    m.write(dir / "manifest.json", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    std::cout << "wrote " << cohort.size() << " patients to " << coh << "\n";
}

// --- train ---------------------------------------------------------------------------

struct TrainArgs {
    std::string ontology = "data/ontology.tsv";
    std::string cohort = "data/cohort.jsonl";
    std::string out_dir = "run";
    std::size_t grouping_level = 2;
    double train_fraction = 0.8, valid_fraction = 0.1;
    model::ModelConfig model;
    std::string activation = "relu";
    std::string head = "softmax";
    std::string optimizer = "adam";
    bool bidirectional = false;
    bool quiet = false;
    training::TrainConfig train;
};

void run_train(TrainArgs a, const CLI::App& cmd) {
    const auto start = std::chrono::steady_clock::now();
    auto graph = load_graph(a.ontology);
    auto cohort = load_cohort(a.cohort, graph);
    if (cohort.size() < 3) throw UsageError("cohort " + a.cohort + " needs at least 3 patients to split");
    auto grouping = ehr::build_grouped_labels(graph, a.grouping_level);
    auto parts = ehr::split(cohort, {a.train_fraction, a.valid_fraction, 1.0 - a.train_fraction - a.valid_fraction},
                            a.train.seed);
    if (parts.train.empty() || parts.valid.empty() || parts.test.empty())
        throw UsageError("split of " + std::to_string(cohort.size()) + " patients leaves an empty part");

    auto& mc = a.model;
    mc.categories = graph.num_categories();
    mc.labels = grouping.num_groups();
    mc.num_codes = graph.num_leaves();
    mc.num_nodes = graph.num_nodes();
    mc.max_visits = cohort.max_visits();
    mc.max_codes = std::max(mc.max_codes, cohort.max_codes());
    mc.causal = !a.bidirectional;
    mc.activation = model::parse_activation(a.activation);
    mc.head = model::parse_head(a.head);
    mc.validate();
    a.train.optimizer = training::parse_optimizer(a.optimizer);
    a.train.validate();

    const fs::path dir(a.out_dir);
    fs::create_directories(dir);
    const auto metrics_path = (dir / "metrics.jsonl").string();
    std::ofstream metrics(metrics_path, std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write " + metrics_path);

    model::MipoModel initial(mc, a.train.seed);
    auto result = training::train(initial, graph, grouping, parts.train, parts.valid, a.train,
                                  [&](const training::EpochReport& r) {
                                      json line;
                                      line["epoch"] = r.epoch;
                                      line["lambda_p"] = a.train.loss_weights.next;
                                      line["lambda_v"] = a.train.loss_weights.typing;
                                      line["train_loss_next"] = r.train_loss_next;
                                      line["train_loss_typing"] = r.train_loss_typing;
                                      line["train_loss_total"] = r.train_loss_total;
                                      line["valid_loss_next"] = r.valid.loss_next;
                                      line["valid_loss_typing"] = r.valid.loss_typing;
                                      line["valid_loss_total"] = r.valid.loss_total;
                                      line["valid"] = ranking_json(r.valid.ranking);
                                      metrics << line.dump() << '\n';
                                      metrics.flush();
                                      if (!a.quiet)
                                          std::cerr << "epoch " << r.epoch << " loss " << r.train_loss_total
                                                    << " valid acc@20 " << r.valid.ranking.acc_at(20) << " ("
                                                    << r.wall_seconds << " s)\n";
                                  });
    metrics.close();

    const auto ckpt = (dir / "checkpoint.txt").string();
    model::save_checkpoint(ckpt, result.best);
    std::vector<std::string> outputs{ckpt, metrics_path};
    for (auto [name, part] : {std::pair{"train.jsonl", &parts.train}, {"valid.jsonl", &parts.valid}, {"test.jsonl", &parts.test}}) {
        const auto p = (dir / name).string();
        ehr::write_cohort(p, *part, graph);
        outputs.push_back(p);
    }
    auto test = training::evaluate(result.best, graph, grouping, parts.test, a.train.batch_size, a.train.loss_weights);
    const auto csv = (dir / "metrics.csv").string();
    write_text(csv, metrics_csv(test.ranking, nullptr));
    outputs.push_back(csv);

    Manifest m{"train", effective_config(cmd), a.train.seed, {a.ontology, a.cohort}, outputs};
    m.config["best_epoch"] = result.best_epoch;
    m.config["epochs_run"] = result.history.size();
    m.config["parameters"] = result.best.parameter_count();
    m.write(dir / "manifest.json", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    std::cout << "best epoch " << result.best_epoch << ", test acc@20 " << test.ranking.acc_at(20) << "\n";
}

// --- evaluate ------------------------------------------------------------------------

struct EvalArgs {
    std::string checkpoint = "run/checkpoint.txt";
    std::string ontology = "data/ontology.tsv";
    std::string cohort = "run/test.jsonl";
    std::string train_cohort = "run/train.jsonl";
    std::string out = "eval.csv";
    std::size_t grouping_level = 2;
    std::size_t batch_size = 32;
    bool baseline = false;
};

void run_evaluate(const EvalArgs& a, const CLI::App& cmd) {
    const auto start = std::chrono::steady_clock::now();
    auto graph = load_graph(a.ontology);
    auto m = load_model(a.checkpoint);
    check_model_matches(m, graph, a.checkpoint, a.ontology);
    auto grouping = ehr::build_grouped_labels(graph, a.grouping_level);
    if (grouping.num_groups() != m.config().labels)
        throw UsageError("checkpoint " + a.checkpoint + " predicts " + std::to_string(m.config().labels) +
                         " labels but grouping level " + std::to_string(a.grouping_level) + " of " + a.ontology +
                         " has " + std::to_string(grouping.num_groups()));
    auto cohort = load_cohort(a.cohort, graph);
    if (cohort.max_visits() > m.config().max_visits + 1)
        throw UsageError("cohort " + a.cohort + " has journeys of " + std::to_string(cohort.max_visits()) +
                         " visits, checkpoint " + a.checkpoint + " supports " + std::to_string(m.config().max_visits));
    if (a.batch_size == 0) throw UsageError("--batch-size must be positive");
    auto ev = training::evaluate(m, graph, grouping, cohort, a.batch_size);
    std::vector<std::string> inputs{a.checkpoint, a.ontology, a.cohort};
    std::optional<training::RankMetrics> base;
    if (a.baseline) {
        auto train = load_cohort(a.train_cohort, graph);
        base = training::evaluate_baseline(training::FrequencyBaseline::fit(train, grouping), grouping, cohort);
        inputs.push_back(a.train_cohort);
    }
    if (auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_text(a.out, metrics_csv(ev.ranking, base ? &*base : nullptr));
    Manifest man{"evaluate", effective_config(cmd), 0, inputs, {a.out}};
    man.write(fs::path(a.out).string() + ".manifest.json",
              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    std::cout << "acc@20 " << ev.ranking.acc_at(20) << (base ? " (baseline " + std::to_string(base->acc_at(20)) + ")" : "")
              << "\n";
}

// --- export-embeddings ----------------------------------------------------------------

struct ExportArgs {
    std::string checkpoint = "run/checkpoint.txt";
    std::string ontology = "data/ontology.tsv";
    std::string out = "embeddings.tsv";
};

void run_export(const ExportArgs& a, const CLI::App& cmd) {
    const auto start = std::chrono::steady_clock::now();
    auto graph = load_graph(a.ontology);
    auto m = load_model(a.checkpoint);
    check_model_matches(m, graph, a.checkpoint, a.ontology);
    const auto G = ontology::compute_G(graph, m.params().ontology);
    std::ostringstream out;
    for (ontology::NodeIndex i = 0; i < graph.num_leaves(); ++i) {
        out << graph.node(i).id << '\t' << graph.typing_category(i);
        for (std::size_t j = 0; j < G.dim(1); ++j) out << '\t' << fmt(G.at(i, j));
        out << '\n';
    }
    if (auto parent = fs::path(a.out).parent_path(); !parent.empty()) fs::create_directories(parent);
    write_text(a.out, out.str());
    Manifest man{"export-embeddings", effective_config(cmd), 0, {a.checkpoint, a.ontology}, {a.out}};
    man.write(a.out + ".manifest.json", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    std::cout << "wrote " << graph.num_leaves() << " embeddings to " << a.out << "\n";
}

// Splices the entries of `--config FILE` in as `--key=value` arguments right
// after the subcommand, so any flag given on the command line comes later and
// wins.
std::vector<std::string> with_config_file(int argc, char** argv, const std::vector<std::string>& commands) {
    std::vector<std::string> args(argv + 1, argv + argc);
    auto sub = std::find_first_of(args.begin(), args.end(), commands.begin(), commands.end());
    if (sub == args.end()) return args;
    std::optional<std::string> path;
    for (auto it = sub + 1; it != args.end(); ++it) {
        if (*it == "--config" && it + 1 != args.end()) path = *(it + 1);
        else if (it->rfind("--config=", 0) == 0) path = it->substr(9);
    }
    if (!path) return args;
    require_file(*path, "config file");
    std::ifstream in(*path);
    std::vector<std::string> extra;
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos || trim(line.substr(0, eq)).empty())
            throw UsageError(*path + ":" + std::to_string(n) + ": expected key=value");
        extra.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
    }
    args.insert(sub + 1, extra.begin(), extra.end());
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"MIPO: ontology-aware diagnosis prediction on visit sequences", "mipo"};
    app.option_defaults()->always_capture_default()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
    std::string config_path;
    app.require_subcommand(1);
    app.set_version_flag("--version", MIPO_VERSION);

    SynthArgs sa;
    auto* synth = app.add_subcommand("synth-data", "Generate a synthetic ontology and cohort");
    synth->add_option("--config", config_path, "Flat key=value file; flags take precedence");
    synth->add_option("--out-dir", sa.out_dir, "Output directory");
    synth->add_option("--patients", sa.cfg.patients, "Number of patients")->check(CLI::PositiveNumber);
    synth->add_option("--seed", sa.cfg.seed, "Random seed");
    synth->add_option("--categories", sa.cfg.ontology.categories, "Level-1 ontology categories")->check(CLI::PositiveNumber);
    synth->add_option("--branching", sa.cfg.ontology.branching, "Children per interior node")->check(CLI::PositiveNumber);
    synth->add_option("--depth", sa.cfg.ontology.depth, "Leaf level of the ontology");
    synth->add_option("--mean-visits", sa.cfg.mean_visits, "Mean visits per patient");
    synth->add_option("--min-codes", sa.cfg.min_codes, "Fewest codes per visit");
    synth->add_option("--max-codes", sa.cfg.max_codes, "Most codes per visit");
    synth->add_option("--max-visits", sa.cfg.max_visits, "Visit cap per patient");
    synth->add_option("--noise", sa.cfg.transition_noise, "Probability a code is replaced by a random leaf")
        ->check(CLI::Range(0.0, 1.0));

    TrainArgs ta;
    ta.model.dropout = 0.1;
    auto* train = app.add_subcommand("train", "Split a cohort, train, and keep the best checkpoint");
    train->add_option("--config", config_path, "Flat key=value file; flags take precedence");
    train->add_option("--ontology", ta.ontology, "Ontology TSV");
    train->add_option("--cohort", ta.cohort, "Cohort JSONL");
    train->add_option("--out-dir", ta.out_dir, "Output directory");
    train->add_option("--grouping-level", ta.grouping_level, "Ontology level of the prediction labels");
    train->add_option("--train-fraction", ta.train_fraction, "Share of patients used for training");
    train->add_option("--valid-fraction", ta.valid_fraction, "Share of patients used for early stopping");
    train->add_option("--d", ta.model.d, "Embedding width");
    train->add_option("--heads", ta.model.heads, "Attention heads");
    train->add_option("--v-layers", ta.model.v_layers, "Integrator layers");
    train->add_option("--p-layers", ta.model.p_layers, "Visit encoder layers");
    train->add_option("--attention-hidden", ta.model.attention_hidden, "Ontology attention width (0 = d)");
    train->add_option("--dropout", ta.model.dropout, "Dropout rate")->check(CLI::Range(0.0, 1.0));
    train->add_option("--activation", ta.activation, "Fusion and pooling activation")
        ->check(CLI::IsMember({"relu", "tanh", "sigmoid"}));
    train->add_option("--head", ta.head, "Next-visit output")->check(CLI::IsMember({"softmax", "sigmoid"}));
    train->add_flag("--bidirectional", ta.bidirectional, "Let every visit attend to later visits");
    train->add_option("--epochs", ta.train.epochs, "Maximum epochs");
    train->add_option("--batch-size", ta.train.batch_size, "Patients per batch");
    train->add_option("--lr", ta.train.learning_rate, "Learning rate");
    train->add_option("--seed", ta.train.seed, "Seed for initialization, split, shuffling and dropout");
    train->add_option("--optimizer", ta.optimizer, "Optimizer")->check(CLI::IsMember({"adam", "sgd"}));
    train->add_option("--patience", ta.train.early_stop_patience, "Epochs without validation gain before stopping");
    train->add_option("--lambda-p", ta.train.loss_weights.next, "Weight of the next-visit loss");
    train->add_option("--lambda-v", ta.train.loss_weights.typing, "Weight of the disease-typing loss");
    train->add_flag("--quiet", ta.quiet, "No per-epoch progress on stderr");

    EvalArgs ea;
    auto* eval = app.add_subcommand("evaluate", "Prec@k and Acc@k of a checkpoint on a cohort");
    eval->add_option("--config", config_path, "Flat key=value file; flags take precedence");
    eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint file");
    eval->add_option("--ontology", ea.ontology, "Ontology TSV");
    eval->add_option("--cohort", ea.cohort, "Cohort to score");
    eval->add_option("--train-cohort", ea.train_cohort, "Cohort the frequency baseline is fitted on");
    eval->add_option("--grouping-level", ea.grouping_level, "Ontology level of the prediction labels");
    eval->add_option("--batch-size", ea.batch_size, "Patients per batch");
    eval->add_option("--out", ea.out, "CSV output");
    eval->add_flag("--baseline", ea.baseline, "Add frequency baseline rows");

    ExportArgs xa;
    auto* exp = app.add_subcommand("export-embeddings", "Write the ontology-aware code embeddings as TSV");
    exp->add_option("--config", config_path, "Flat key=value file; flags take precedence");
    exp->add_option("--checkpoint", xa.checkpoint, "Checkpoint file");
    exp->add_option("--ontology", xa.ontology, "Ontology TSV");
    exp->add_option("--out", xa.out, "TSV output");

    std::vector<std::string> args;
    try {
        args = with_config_file(argc, argv, {"synth-data", "train", "evaluate", "export-embeddings"});
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    try {
        std::reverse(args.begin(), args.end());
        app.parse(args);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*synth) run_synth(sa, *synth);
        if (*train) run_train(ta, *train);
        if (*eval) run_evaluate(ea, *eval);
        if (*exp) run_export(xa, *exp);
    } catch (const training::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ontology::OntologyError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ehr::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

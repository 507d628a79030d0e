// Command-line entry point: generate / train / sweep / compare / evaluate /
// report. Every subcommand writes a resolved-config echo into its output
// directory and never writes outside it. Exit codes: 0 success, 1 config
// error, 2 runtime failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gdro/checkpoint.hpp"
#include "gdro/config_json.hpp"
#include "gdro/data.hpp"
#include "gdro/metrics.hpp"
#include "gdro/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed_flag;
};

json load_config_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw gdro::ConfigError("cannot open config file " + path);
    json j = json::parse(in, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw gdro::ConfigError("config file " + path + " is not valid JSON");
    if (!j.is_object()) throw gdro::ConfigError("config file " + path + " must hold a JSON object");
    return j;
}

/// Seed precedence: --seed flag > GRDO_SEED env > config file.
json resolve_config(const CommonArgs& args) {
    json doc = load_config_json(args.config_path);
    for (const auto& ov : args.overrides) gdro::apply_override(doc, ov);
    if (const char* env = std::getenv("GRDO_SEED"); env != nullptr && !args.seed_flag) {
        try {
            doc["seed"] = static_cast<std::uint64_t>(std::stoull(env));
        } catch (const std::exception&) {
            throw gdro::ConfigError("GRDO_SEED must be an unsigned integer, got \"" + std::string(env) + "\"");
        }
    }
    if (args.seed_flag) doc["seed"] = *args.seed_flag;
    return doc;
}

fs::path prepare_out_dir(const std::string& dir) {
    fs::path p(dir);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void echo_config(const fs::path& out_dir, const json& doc) {
    write_text(out_dir / "resolved-config.json", doc.dump(2) + "\n");
}

std::string run_id(const gdro::RunConfig& config, std::uint64_t seed) {
    std::ostringstream os;
    os << gdro::objective_name(config.objective);
    if (config.objective == gdro::Objective::gdro) os << "-alpha" << config.dro.alpha;
    os << "-seed" << seed;
    return os.str();
}

int cmd_generate(const CommonArgs& args) {
    const json doc = resolve_config(args);
    gdro::GenConfig config;
    gdro::from_json(doc.contains("data") ? doc.at("data") : doc, config);
    if (doc.contains("seed")) config.seed = doc.at("seed").get<std::uint64_t>();
    config.validate();

    const fs::path out = prepare_out_dir(args.out_dir);
    json echo = doc;
    echo["data"] = config;  // fully resolved grids
    echo_config(out, echo);

    auto [train, val] = gdro::generate(config);
    gdro::save_jsonl(train, out / "train.jsonl");
    gdro::save_jsonl(val, out / "val.jsonl");
    std::cout << "wrote " << train.size() << " train / " << val.size() << " val samples to " << out << "\n";
    return 0;
}

gdro::RunConfig parse_run_config(const json& doc) {
    gdro::RunConfig config;
    gdro::from_json(doc, config);
    config.validate();
    return config;
}

void write_run_outputs(const fs::path& out, const gdro::RunResult& result) {
    gdro::write_trajectory_jsonl(result.history, out / "trajectory.jsonl");
    write_text(out / "epochs.json", gdro::epochs_to_json(result.history).dump(2) + "\n");
    write_text(out / "metrics.json", gdro::metrics_to_json(result.final_metrics).dump(2) + "\n");
    gdro::write_metrics_csv(result.final_metrics, out / "metrics.csv");
    gdro::save_checkpoint(result.model, out / "checkpoint.gdck");
}

int cmd_train(const CommonArgs& args) {
    const json doc = resolve_config(args);
    const gdro::RunConfig config = parse_run_config(doc);
    const fs::path out = prepare_out_dir(args.out_dir);
    echo_config(out, doc);

    const std::string id = run_id(config, config.seed);
    try {
        const gdro::RunResult result = gdro::train(config, config.seed);
        write_run_outputs(out, result);
        std::cout << "run " << id << ": challenge_p=" << result.final_metrics.challenge_p
                  << " worst_group=" << result.final_metrics.worst_group_macro << "\n";
        return 0;
    } catch (const gdro::TrainingDivergence& e) {
        std::cerr << "run " << id << " failed at step " << e.step() << ": " << e.what() << "\n";
        return 2;
    }
}

int cmd_sweep(const CommonArgs& args) {
    const json doc = resolve_config(args);
    const gdro::RunConfig config = parse_run_config(doc);
    const fs::path out = prepare_out_dir(args.out_dir);
    echo_config(out, doc);

    const auto seeds = config.seed_list();
    const auto cells = gdro::sweep_alpha(config, config.alphas, seeds);
    gdro::write_sweep_cells_csv(cells, out / "sweep_cells.csv");
    gdro::write_sweep_summary_csv(cells, out / "sweep_summary.csv");
    int failed = 0;
    for (const auto& c : cells) {
        if (!c.ok) {
            ++failed;
            std::cerr << "cell alpha=" << c.alpha << " seed=" << c.seed << " failed: " << c.error << "\n";
        }
    }
    std::cout << "swept " << cells.size() << " cells (" << failed << " failed) into " << out << "\n";
    return 0;
}

int cmd_compare(const CommonArgs& args) {
    const json doc = resolve_config(args);
    const gdro::RunConfig config = parse_run_config(doc);
    const fs::path out = prepare_out_dir(args.out_dir);
    echo_config(out, doc);

    const auto seeds = config.seed_list();
    const auto rows = gdro::compare_objectives(config, seeds);
    gdro::write_compare_csv(rows, out / "compare.csv");
    for (const auto& r : rows) {
        std::cout << r.name << ": P=" << r.p.mean << " worst=" << r.worst_group.mean
                  << " minority=" << r.minority_cell.mean << "\n";
    }
    return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& data_path, const std::string& grouping,
                 const std::string& out_dir) {
    gdro::ModelParams model = gdro::load_checkpoint(checkpoint);
    const gdro::GroupedDataset dataset = gdro::load_jsonl(data_path);
    const gdro::Grouping g = gdro::parse_grouping(grouping);

    const fs::path out = prepare_out_dir(out_dir);
    echo_config(out, json{{"checkpoint", checkpoint}, {"data", data_path}, {"grouping", grouping}});

    const gdro::MetricsReport report = gdro::evaluate(model, dataset, g);
    write_text(out / "metrics.json", gdro::metrics_to_json(report).dump(2) + "\n");
    gdro::write_metrics_csv(report, out / "metrics.csv");
    std::cout << "challenge_p=" << report.challenge_p << " worst_group=" << report.worst_group_macro << "\n";
    return 0;
}

struct CellRow {
    double alpha = 0.0;
    std::uint64_t seed = 0;
    int group = 0;
    double macro_f1 = 0.0;
    double challenge_p = 0.0;
    double worst = 0.0;
    double minority = 0.0;
};

std::vector<CellRow> read_cells_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw gdro::ConfigError("cannot open cells CSV " + path);
    std::vector<CellRow> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line_no == 1 || line.empty()) continue;  // header
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (fields.size() < 8) throw gdro::ConfigError("cells CSV line " + std::to_string(line_no) + " is malformed");
        if (fields[7] != "1") continue;  // failed cell
        CellRow r;
        r.alpha = std::stod(fields[0]);
        r.seed = std::stoull(fields[1]);
        r.group = std::stoi(fields[2]);
        r.macro_f1 = std::stod(fields[3]);
        r.challenge_p = std::stod(fields[4]);
        r.worst = std::stod(fields[5]);
        r.minority = std::stod(fields[6]);
        rows.push_back(r);
    }
    return rows;
}

/// Turns a sweep cells CSV into a per-alpha summary plus a plot-ready
/// long-format CSV (one metric value per row).
int cmd_report(const std::string& cells_path, const std::string& out_dir) {
    const auto rows = read_cells_csv(cells_path);
    const fs::path out = prepare_out_dir(out_dir);
    echo_config(out, json{{"cells", cells_path}});

    // Scalar metrics repeat on every group row; deduplicate by (alpha, seed).
    std::map<double, std::map<std::uint64_t, CellRow>> scalar;
    for (const auto& r : rows) scalar[r.alpha].emplace(r.seed, r);

    std::ofstream summary(out / "report_summary.csv");
    summary << "alpha,seeds,mean_challenge_p,std_challenge_p,mean_worst_group_f1,std_worst_group_f1,"
               "mean_minority_cell_f1,std_minority_cell_f1\n";
    for (const auto& [alpha, by_seed] : scalar) {
        std::vector<double> p, worst, minority;
        for (const auto& [seed, r] : by_seed) {
            p.push_back(r.challenge_p);
            worst.push_back(r.worst);
            minority.push_back(r.minority);
        }
        const auto sp = gdro::summarise(p), sw = gdro::summarise(worst), sm = gdro::summarise(minority);
        summary << alpha << ',' << sp.n << ',' << sp.mean << ',' << sp.stddev << ',' << sw.mean << ',' << sw.stddev
                << ',' << sm.mean << ',' << sm.stddev << '\n';
    }

    std::ofstream long_csv(out / "report_long.csv");
    long_csv << "alpha,seed,metric,value\n";
    for (const auto& [alpha, by_seed] : scalar) {
        for (const auto& [seed, r] : by_seed) {
            long_csv << alpha << ',' << seed << ",challenge_p," << r.challenge_p << '\n';
            long_csv << alpha << ',' << seed << ",worst_group_macro_f1," << r.worst << '\n';
            long_csv << alpha << ',' << seed << ",minority_cell_f1," << r.minority << '\n';
        }
    }
    for (const auto& r : rows) {
        long_csv << r.alpha << ',' << r.seed << ",macro_f1.group" << r.group << ',' << r.macro_f1 << '\n';
    }
    std::cout << "report written to " << out << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"gdro: group-robust training engine (KL-regularised group DRO)"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, sweep_args, compare_args;
    std::string eval_checkpoint, eval_data, eval_grouping = "site", eval_out;
    std::string report_cells, report_out;

    auto add_common = [](CLI::App* sub, CommonArgs& args) {
        sub->add_option("--config", args.config_path, "JSON config file")->required();
        sub->add_option("--out", args.out_dir, "output directory")->required();
        sub->add_option("--set", args.overrides, "dotted config override key.path=value")->take_all();
        sub->add_option("--seed", args.seed_flag, "seed override (flag > GRDO_SEED env > config)");
    };

    add_common(app.add_subcommand("generate", "write synthetic train/val JSONL datasets"), gen_args);
    add_common(app.add_subcommand("train", "train one run and write history, metrics and checkpoint"), train_args);
    add_common(app.add_subcommand("sweep", "train every (alpha, seed) cell and write sweep CSVs"), sweep_args);
    add_common(app.add_subcommand("compare", "compare wce / focal / gdro objectives over seeds"), compare_args);

    auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint against a JSONL dataset");
    eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_data, "dataset JSONL")->required();
    eval_cmd->add_option("--grouping", eval_grouping, "site|gender");
    eval_cmd->add_option("--out", eval_out, "output directory")->required();

    auto* report_cmd = app.add_subcommand("report", "summarise a sweep cells CSV into plot-ready tables");
    report_cmd->add_option("--cells", report_cells, "sweep_cells.csv from the sweep subcommand")->required();
    report_cmd->add_option("--out", report_out, "output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        std::cerr << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        if (app.got_subcommand("generate")) return cmd_generate(gen_args);
        if (app.got_subcommand("train")) return cmd_train(train_args);
        if (app.got_subcommand("sweep")) return cmd_sweep(sweep_args);
        if (app.got_subcommand("compare")) return cmd_compare(compare_args);
        if (app.got_subcommand("evaluate")) return cmd_evaluate(eval_checkpoint, eval_data, eval_grouping, eval_out);
        if (app.got_subcommand("report")) return cmd_report(report_cells, report_out);
    } catch (const gdro::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "runtime error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied. See the License for the specific language governing
// permissions and limitations under the License.

// Command-line front end for the full experiment pipeline:
//   gen-data -> gen-tasks -> train -> evaluate -> compare
// Every command reads and writes one output directory; reruns with the
// same config and seed reproduce every file byte for byte.
//
// Exit codes: 0 success, 1 usage, 2 invalid config or input files,
// 3 runtime failure.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "metaref/checkpoint.hpp"
#include "metaref/config.hpp"
#include "metaref/experiment.hpp"

namespace fs = std::filesystem;
using namespace metaref;

namespace {

struct Options {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool force = false;
    int threads = 1;
};

std::string path_in(const Options& opt, const std::string& name) {
    return (fs::path(opt.out_dir) / name).string();
}

void refuse_overwrite(const Options& opt, const std::vector<std::string>& names) {
    if (opt.force) return;
    for (const std::string& name : names) {
        const std::string p = path_in(opt, name);
        if (fs::exists(p))
            throw ValidationError(p + " already exists; pass --force to overwrite");
    }
}

void require_file(const std::string& path, const std::string& hint) {
    if (!fs::exists(path))
        throw ValidationError(path + " not found; run '" + hint + "' first");
}

ExperimentConfig load_experiment(const Options& opt) {
    if (opt.config_path.empty())
        throw ValidationError("--config is required for this command");
    ExperimentConfig cfg = load_config(opt.config_path);
    if (opt.seed_set) {
        cfg.seed = opt.seed;
        cfg.train.seed = opt.seed;
    }
    return cfg;
}

GeoDataset load_split_dataset(const Options& opt, const ExperimentConfig& cfg) {
    const std::string data_path = path_in(opt, "dataset.csv");
    require_file(data_path, "gen-data");
    return dataset_from_csv(data_path, cfg);
}

std::vector<SpatialTask> load_eval_tasks(const Options& opt, const GeoDataset& ds) {
    const std::string path = path_in(opt, "tasks_eval.csv");
    require_file(path, "gen-tasks");
    return import_tasks(path, ds);
}

int cmd_gen_data(const Options& opt) {
    const ExperimentConfig cfg = load_experiment(opt);
    refuse_overwrite(opt, {"dataset.csv", "manifest.txt"});
    fs::create_directories(opt.out_dir);
    const GeoDataset ds = build_dataset(cfg);
    export_csv(ds, path_in(opt, "dataset.csv"));
    write_text(path_in(opt, "manifest.txt"), cfg.to_text());
    std::cout << "wrote " << path_in(opt, "dataset.csv") << " (" << ds.locations.size()
              << " locations, " << ds.n_points() << " points)\n";
    std::cout << "wrote " << path_in(opt, "manifest.txt") << "\n";
    for (const std::string& w : ds.warnings) std::cerr << "warning: " << w << "\n";
    return 0;
}

int cmd_gen_tasks(const Options& opt) {
    const ExperimentConfig cfg = load_experiment(opt);
    const GeoDataset ds = load_split_dataset(opt, cfg);
    refuse_overwrite(opt, {"tasks_eval.csv"});
    const std::vector<SpatialTask> tasks = sample_eval_tasks(ds, cfg);
    export_tasks(tasks, path_in(opt, "tasks_eval.csv"));
    std::cout << "wrote " << path_in(opt, "tasks_eval.csv") << " (" << tasks.size()
              << " tasks)\n";
    return 0;
}

int cmd_train(const Options& opt) {
    const ExperimentConfig cfg = load_experiment(opt);
    const GeoDataset ds = load_split_dataset(opt, cfg);

    std::vector<std::string> outputs;
    for (const std::string& m : cfg.methods) {
        outputs.push_back("checkpoint_" + m + ".txt");
        outputs.push_back("train_log_" + m + ".csv");
    }
    refuse_overwrite(opt, outputs);

    // The frozen evaluation tasks are pinned at training time so later
    // evaluate runs cannot drift; an existing file is reused untouched.
    const std::string tasks_path = path_in(opt, "tasks_eval.csv");
    if (!fs::exists(tasks_path)) {
        export_tasks(sample_eval_tasks(ds, cfg), tasks_path);
        std::cout << "wrote " << tasks_path << "\n";
    }

    for (const std::string& m : cfg.methods) {
        const TrainResult r = train_method(ds, cfg, m);
        const Checkpoint ckpt = make_checkpoint(m, r, method_train_config(cfg, m).schedule());
        save_checkpoint(path_in(opt, "checkpoint_" + m + ".txt"), ckpt);
        write_text(path_in(opt, "train_log_" + m + ".csv"), train_log_csv(r.log));
        std::cout << "trained " << m << ": t_final=" << r.t_final
                  << " mean_loss=" << format_g17(r.log.back().mean_loss) << "\n";
        for (const std::string& w : r.warnings) std::cerr << "warning: " << m << ": " << w << "\n";
    }
    return 0;
}

int cmd_evaluate(const Options& opt) {
    const ExperimentConfig cfg = load_experiment(opt);
    const GeoDataset ds = load_split_dataset(opt, cfg);
    const std::vector<SpatialTask> tasks = load_eval_tasks(opt, ds);
    refuse_overwrite(opt, {"report.csv"});

    std::vector<Checkpoint> ckpts;
    for (const std::string& m : cfg.methods) {
        const std::string path = path_in(opt, "checkpoint_" + m + ".txt");
        require_file(path, "train");
        Checkpoint ckpt = load_checkpoint(path);
        if (ckpt.method != m)
            throw ValidationError(path + ": contains method '" + ckpt.method + "', expected '" +
                                  m + "'");
        ckpts.push_back(std::move(ckpt));
    }

    const std::vector<std::vector<TaskReport>> per_task =
        evaluate_all(ds, cfg, ckpts, tasks, opt.threads);
    write_text(path_in(opt, "report.csv"), report_csv(per_task));
    std::cout << "wrote " << path_in(opt, "report.csv") << " (" << tasks.size() << " tasks x "
              << cfg.methods.size() << " methods)\n";
    return 0;
}

int cmd_compare(const Options& opt) {
    const std::string report_path = path_in(opt, "report.csv");
    require_file(report_path, "evaluate");
    refuse_overwrite(opt, {"comparison_lf.csv", "summary.csv"});
    const std::vector<ReportRow> rows = parse_report_csv(read_lines(report_path), report_path);
    write_text(path_in(opt, "comparison_lf.csv"), comparison_csv(rows));
    write_text(path_in(opt, "summary.csv"), summary_csv(rows));
    std::cout << "wrote " << path_in(opt, "comparison_lf.csv") << "\n";
    std::cout << "wrote " << path_in(opt, "summary.csv") << "\n";
    std::cout << summary_csv(rows);
    return 0;
}

int run(int argc, char** argv) {
    CLI::App app{"fairness-aware meta-learning experiment pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    Options opt;
    app.add_option("--config", opt.config_path, "experiment config file (key = value)");
    app.add_option("--out", opt.out_dir, "output directory")->required();
    app.add_option("--seed", opt.seed, "override the config seed")
        ->check(CLI::NonNegativeNumber);
    app.add_flag("--force", opt.force, "overwrite existing outputs");
    app.add_option("--threads", opt.threads, "evaluation worker threads")
        ->check(CLI::PositiveNumber);

    CLI::App* gen_data = app.add_subcommand("gen-data", "generate dataset.csv and manifest.txt");
    CLI::App* gen_tasks =
        app.add_subcommand("gen-tasks", "freeze the evaluation tasks (tasks_eval.csv)");
    CLI::App* train_cmd =
        app.add_subcommand("train", "train every configured method to a checkpoint");
    CLI::App* evaluate_cmd =
        app.add_subcommand("evaluate", "score all methods on the frozen tasks (report.csv)");
    CLI::App* compare_cmd =
        app.add_subcommand("compare", "comparison matrix and summary from report.csv");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }
    opt.seed_set = app.count("--seed") > 0;

    if (gen_data->parsed()) return cmd_gen_data(opt);
    if (gen_tasks->parsed()) return cmd_gen_tasks(opt);
    if (train_cmd->parsed()) return cmd_train(opt);
    if (evaluate_cmd->parsed()) return cmd_evaluate(opt);
    if (compare_cmd->parsed()) return cmd_compare(opt);
    return 1;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}

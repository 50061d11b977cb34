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

#pragma once

#include <atomic>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "metaref/checkpoint.hpp"
#include "metaref/config.hpp"
#include "metaref/csvio.hpp"
#include "metaref/geodata.hpp"
#include "metaref/metrics.hpp"
#include "metaref/tasks.hpp"
#include "metaref/training.hpp"

namespace metaref {

// End-to-end experiment protocol: train each method on the training
// region, freeze a shared set of evaluation tasks in the test region,
// adapt (or not) per task, and score quality, LF, and ALF on data the
// adaptation never saw.

inline bool method_uses_referee(const std::string& m) {
    return m == "meta-ref" || m == "mr-p2p" || m == "mr-f2m" || m == "mr-f2p";
}

inline bool method_adapts(const std::string& m) {
    return m == "maml" || method_uses_referee(m);
}

inline GeoDataset build_dataset(const ExperimentConfig& cfg) {
    GeoDataset ds;
    if (cfg.data.source == "csv") {
        ds = ingest_csv(cfg.data.csv_path, cfg.data.problem);
    } else {
        ds = generate_synthetic(cfg.seed, cfg.data.n_locations, cfg.data.points_per_location,
                                cfg.data.feature_dim, cfg.profile());
    }
    return split_locations(std::move(ds), cfg.data.split_fraction, cfg.seed);
}

inline GeoDataset dataset_from_csv(const std::string& path, const ExperimentConfig& cfg) {
    return split_locations(ingest_csv(path, cfg.data.problem), cfg.data.split_fraction, cfg.seed);
}

inline void apply_task_knobs(TaskDistribution& dist, const ExperimentConfig& cfg) {
    dist.mix = cfg.tasks.mix;
    dist.min_locations = cfg.tasks.min_locations;
    dist.max_locations = cfg.tasks.max_locations;
    if (cfg.tasks.window > 0.0) dist.window = cfg.tasks.window;
}

// The frozen evaluation tasks every method is scored on.
inline std::vector<SpatialTask> sample_eval_tasks(const GeoDataset& ds,
                                                  const ExperimentConfig& cfg) {
    TaskDistribution dist(ds, RegionTag::TestRegion, cfg.seed);
    apply_task_knobs(dist, cfg);
    std::vector<SpatialTask> tasks;
    tasks.reserve(static_cast<size_t>(cfg.tasks.eval_count));
    for (int i = 0; i < cfg.tasks.eval_count; ++i) tasks.push_back(sample_task(dist));
    return tasks;
}

inline TrainConfig method_train_config(const ExperimentConfig& cfg, const std::string& method) {
    TrainConfig t = cfg.train;
    t.seed = cfg.seed;
    if (method == "maml") t.lambda = 0.0;
    if (method == "mr-p2p") t.disable_p2p = true;
    if (method == "mr-f2m") t.disable_f2m = true;
    if (method == "mr-f2p") t.disable_f2p = true;
    return t;
}

inline TrainResult train_method(const GeoDataset& ds, const ExperimentConfig& cfg,
                                const std::string& method) {
    if (!known_method(method)) throw ValidationError("unknown method '" + method + "'");
    const TrainConfig t = method_train_config(cfg, method);
    TaskDistribution dist(ds, RegionTag::TrainRegion, cfg.seed);
    apply_task_knobs(dist, cfg);
    if (method == "plain") return baseline_train(ds, dist, t, 0.0);
    if (method == "reg") return baseline_train(ds, dist, t, t.reg_lambda);
    return train(ds, dist, t);
}

// Few-shot batches for one evaluation task; the adaptation split and
// the scoring split are disjoint by construction.
inline TaskBatches eval_batches(const GeoDataset& ds, const ExperimentConfig& cfg,
                                const SpatialTask& task) {
    return sample_batches(task, ds, cfg.eval.k_shot, cfg.eval.k_eval,
                          Rng::derive_seed(cfg.seed, kStreamEval, 0));
}

inline ModelParams adapt_model(const Checkpoint& ckpt, const std::string& method,
                               const GeoDataset& ds, const SpatialTask& task,
                               const TaskBatches& batches, const ExperimentConfig& cfg) {
    if (!method_adapts(method)) return ckpt.model;
    if (method == "maml")
        return uniform_adapt(ckpt.model, ds, task, batches, ckpt.schedule.beta0,
                             cfg.train.finetune_steps, cfg.train.clip_norm)
            .model;
    return fine_tune(ckpt.model, ckpt.referee, ds, task, batches, ckpt.m_hat.m_hat,
                     ckpt.schedule, ckpt.t_final, cfg.train.finetune_steps, cfg.train.clip_norm)
        .model;
}

inline TaskReport score_task(const ModelParams& model, const std::string& method,
                             const SpatialTask& task, const TaskBatches& batches) {
    TaskReport r;
    r.task_id = task.task_id;
    r.method = method;
    const ProblemKind problem = model.spec.problem;
    for (const LocationBatch& lb : batches.per_location) {
        bool degen = false;
        r.per_location_quality.push_back(
            metric_eval(problem, predict(model, lb.Xval), lb.yval, &degen));
        r.degenerate_f1 = r.degenerate_f1 || degen;
    }
    bool degen = false;
    r.quality = metric_eval(problem, predict(model, batches.Xval_all), batches.yval_all, &degen);
    r.degenerate_f1 = r.degenerate_f1 || degen;
    r.lf = locational_fairness(r.per_location_quality, r.quality);

    // Provisional reference: own mean quality. Replaced once all
    // methods are scored.
    double mean_q = 0.0;
    for (double q : r.per_location_quality) mean_q += q;
    mean_q /= double(r.per_location_quality.size());
    r.p_star = mean_q;
    r.alf = adjusted_fairness(r.per_location_quality, r.p_star);
    return r;
}

inline bool higher_is_better(ProblemKind p) { return p == ProblemKind::Classification; }

// p* per task is the best mean per-location quality any method reached;
// every method's ALF is then measured against that reference.
inline void fill_adjusted(std::vector<std::vector<TaskReport>>& per_task, ProblemKind problem) {
    for (std::vector<TaskReport>& methods : per_task) {
        if (methods.empty()) continue;
        double best = methods[0].p_star;
        for (const TaskReport& r : methods)
            best = higher_is_better(problem) ? std::max(best, r.p_star)
                                             : std::min(best, r.p_star);
        for (TaskReport& r : methods) {
            r.p_star = best;
            r.alf = adjusted_fairness(r.per_location_quality, best);
        }
    }
}

// Scores every (task, method) pair. Tasks fan out across threads; each
// slot is computed from its own parameter copy, so the result is
// invariant to the thread count.
inline std::vector<std::vector<TaskReport>> evaluate_all(const GeoDataset& ds,
                                                         const ExperimentConfig& cfg,
                                                         const std::vector<Checkpoint>& ckpts,
                                                         const std::vector<SpatialTask>& tasks,
                                                         int threads = 1) {
    if (ckpts.size() != cfg.methods.size())
        throw ContractError("evaluate_all: one checkpoint per method required");
    if (threads < 1) throw ContractError("evaluate_all: threads must be positive");

    std::vector<TaskBatches> batches;
    batches.reserve(tasks.size());
    for (const SpatialTask& t : tasks) batches.push_back(eval_batches(ds, cfg, t));

    std::vector<std::vector<TaskReport>> per_task(tasks.size());
    std::atomic<size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex error_mutex;
    std::string error;

    auto worker = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= tasks.size() || failed.load()) return;
            try {
                std::vector<TaskReport> row;
                row.reserve(cfg.methods.size());
                for (size_t m = 0; m < cfg.methods.size(); ++m) {
                    const ModelParams adapted =
                        adapt_model(ckpts[m], cfg.methods[m], ds, tasks[i], batches[i], cfg);
                    row.push_back(score_task(adapted, cfg.methods[m], tasks[i], batches[i]));
                }
                per_task[i] = std::move(row);
            } catch (const std::exception& e) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!failed.exchange(true)) error = e.what();
                return;
            }
        }
    };

    const int n_workers = std::min<int>(threads, static_cast<int>(tasks.size()));
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(n_workers));
        for (int w = 0; w < n_workers; ++w) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }
    if (failed.load()) throw NumericError("evaluate_all: " + error);

    fill_adjusted(per_task, cfg.data.problem);
    return per_task;
}

inline std::string report_csv(const std::vector<std::vector<TaskReport>>& per_task) {
    std::string out = "task_id,method,quality,LF,ALF\n";
    for (const std::vector<TaskReport>& methods : per_task)
        for (const TaskReport& r : methods)
            out += std::to_string(r.task_id) + "," + r.method + "," + format_g17(r.quality) +
                   "," + format_g17(r.lf) + "," + format_g17(r.alf) + "\n";
    return out;
}

struct ReportRow {
    int task_id = 0;
    std::string method;
    double quality = 0.0;
    double lf = 0.0;
    double alf = 0.0;
};

inline std::vector<ReportRow> parse_report_csv(const std::vector<std::string>& lines,
                                               const std::string& where) {
    if (lines.empty() || lines[0] != "task_id,method,quality,LF,ALF")
        throw ValidationError(where + ": missing report header");
    std::vector<ReportRow> rows;
    for (size_t i = 1; i < lines.size(); ++i) {
        if (trim(lines[i]).empty()) continue;
        const std::vector<std::string> f = split_csv_line(lines[i]);
        const std::string at = where + ":" + std::to_string(i + 1);
        if (f.size() != 5) throw ValidationError(at + ": expected 5 fields");
        ReportRow r;
        r.task_id = static_cast<int>(parse_int(f[0], at));
        r.method = f[1];
        r.quality = parse_double(f[2], at);
        r.lf = parse_double(f[3], at);
        r.alf = parse_double(f[4], at);
        rows.push_back(std::move(r));
    }
    return rows;
}

// Per-method fairness scores aligned on the common task list; every
// method must cover exactly the same tasks.
inline std::vector<std::vector<double>> lf_by_method(const std::vector<ReportRow>& rows,
                                                     std::vector<std::string>* methods_out) {
    std::vector<std::string> methods;
    std::map<std::string, std::map<int, double>> scores;
    for (const ReportRow& r : rows) {
        if (!scores.count(r.method)) methods.push_back(r.method);
        if (!scores[r.method].emplace(r.task_id, r.lf).second)
            throw ValidationError("report: duplicate row for task " + std::to_string(r.task_id) +
                                  ", method " + r.method);
    }
    if (methods.empty()) throw ValidationError("report: no rows");
    const std::map<int, double>& ref = scores[methods[0]];
    std::vector<std::vector<double>> out;
    for (const std::string& m : methods) {
        const std::map<int, double>& got = scores[m];
        if (got.size() != ref.size())
            throw ValidationError("report: method '" + m + "' covers " +
                                  std::to_string(got.size()) + " tasks, expected " +
                                  std::to_string(ref.size()));
        std::vector<double> column;
        for (const auto& [task_id, lf] : ref) {
            auto it = got.find(task_id);
            if (it == got.end())
                throw ValidationError("report: method '" + m + "' missing task " +
                                      std::to_string(task_id));
            column.push_back(it->second);
        }
        out.push_back(std::move(column));
    }
    if (methods_out) *methods_out = methods;
    return out;
}

inline std::string comparison_csv(const std::vector<ReportRow>& rows) {
    std::vector<std::string> methods;
    const std::vector<std::vector<double>> scores = lf_by_method(rows, &methods);
    const std::vector<std::vector<int>> wins = comparison_matrix(scores);
    std::string out = "method";
    for (const std::string& m : methods) out += "," + m;
    out += "\n";
    for (size_t r = 0; r < methods.size(); ++r) {
        out += methods[r];
        for (size_t c = 0; c < methods.size(); ++c)
            out += "," + std::to_string(wins[r][c]);
        out += "\n";
    }
    return out;
}

inline std::string summary_csv(const std::vector<ReportRow>& rows) {
    std::vector<std::string> methods;
    std::map<std::string, std::vector<const ReportRow*>> by_method;
    for (const ReportRow& r : rows) {
        if (!by_method.count(r.method)) methods.push_back(r.method);
        by_method[r.method].push_back(&r);
    }
    std::string out = "method,mean_quality,mean_LF,mean_ALF\n";
    for (const std::string& m : methods) {
        double q = 0.0, lf = 0.0, alf = 0.0;
        const auto& group = by_method[m];
        for (const ReportRow* r : group) {
            q += r->quality;
            lf += r->lf;
            alf += r->alf;
        }
        const double n = double(group.size());
        out += m + "," + format_g17(q / n) + "," + format_g17(lf / n) + "," +
               format_g17(alf / n) + "\n";
    }
    return out;
}

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
    std::string out = "epoch,t,mean_loss,heldout_lf,beta_plus,beta_minus\n";
    for (const TrainLogRow& r : log)
        out += std::to_string(r.epoch) + "," + std::to_string(r.t) + "," +
               format_g17(r.mean_loss) + "," + format_g17(r.heldout_lf) + "," +
               format_g17(r.beta_plus) + "," + format_g17(r.beta_minus) + "\n";
    return out;
}

} // namespace metaref

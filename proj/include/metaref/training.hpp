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

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "metaref/autodiff.hpp"
#include "metaref/geodata.hpp"
#include "metaref/metrics.hpp"
#include "metaref/nets.hpp"
#include "metaref/tasks.hpp"

namespace metaref {

// Three-phase fairness-aware meta-training: phase 1 scores every task
// location at the current model, phase 2 lets the referee turn those
// scores into per-location inner-loop rates, phase 3 meta-updates both
// the model and the referee. lambda = 0 degenerates to uniform-rate
// MAML through the exact same code path.

// Inner-rate bounds widen around beta0/2 along a sigmoid in t.
// beta_minus is computed as the exact complement so the bounds always
// sum to beta0.
struct RateSchedule {
    double beta0 = 1e-4;
    double rho = 50.0;

    void validate() const {
        if (!(beta0 > 0.0)) throw ContractError("schedule: beta0 must be positive");
        if (!(rho > 0.0)) throw ContractError("schedule: rho must be positive");
    }

    double beta_plus(long long t) const {
        if (t < 0) throw ContractError("schedule: t must be non-negative");
        return beta0 / (1.0 + std::exp(-double(t) / rho));
    }

    double beta_minus(long long t) const { return beta0 - beta_plus(t); }
};

struct TrainConfig {
    double alpha1 = 1e-3;   // model meta-rate
    double lambda = 0.1;    // fairness scaling; alpha2 = alpha3 = lambda * alpha1
    double beta0 = 1e-4;    // baseline inner rate
    double rho = 50.0;      // schedule widening factor
    int epochs = 1;
    int tasks_per_epoch = 10;
    int k_train = 8;  // per-location adaptation batch
    int k_val = 8;    // per-location validation batch
    bool second_order = true;
    bool stop_embedding_grad = false;  // detach referee embeddings from the model
    bool disable_p2p = false;          // skip the model update from task loss
    bool disable_f2m = false;          // skip the referee update from fairness loss
    bool disable_f2p = false;          // skip the model update from fairness loss
    int mhat_subsample = 2048;         // pooled points for the global benchmark
    int heldout_tasks = 8;             // fixed tasks for the fairness log
    double clip_norm = 10.0;           // global-norm gradient clip
    double reg_lambda = 0.1;           // variance weight for the reg baseline
    int finetune_steps = 1;
    std::uint64_t seed = 0;
    NetSpec net;
    RefereeSpec referee;

    double alpha2() const { return lambda * alpha1; }
    double alpha3() const { return lambda * alpha1; }

    void validate() const {
        if (!(alpha1 > 0.0)) throw ContractError("config: alpha1 must be positive");
        if (!(lambda >= 0.0)) throw ContractError("config: lambda must be non-negative");
        if (!(beta0 > 0.0)) throw ContractError("config: beta0 must be positive");
        if (!(rho > 0.0)) throw ContractError("config: rho must be positive");
        if (epochs < 0) throw ContractError("config: epochs must be non-negative");
        if (tasks_per_epoch < 1) throw ContractError("config: tasks_per_epoch must be positive");
        if (k_train < 1 || k_val < 1) throw ContractError("config: batch sizes must be positive");
        if (mhat_subsample < 1) throw ContractError("config: mhat_subsample must be positive");
        if (heldout_tasks < 0) throw ContractError("config: heldout_tasks must be non-negative");
        if (!(clip_norm > 0.0)) throw ContractError("config: clip_norm must be positive");
        if (!(reg_lambda >= 0.0)) throw ContractError("config: reg_lambda must be non-negative");
        if (finetune_steps < 1) throw ContractError("config: finetune_steps must be positive");
        net.validate();
        referee.validate();
        if (net.embed_dim != referee.embed_dim)
            throw ContractError("config: referee embed_dim must match the model");
    }

    RateSchedule schedule() const { return RateSchedule{beta0, rho}; }
};

struct FairnessFactors {
    std::vector<double> raw;           // referee outputs eta_i
    std::vector<double> standardized;  // eta-tilde in [0, 1]
    std::vector<double> rates;         // beta_i in [beta_minus, beta_plus]
    bool degenerate = false;           // all raw factors equal
};

struct TrainLogRow {
    int epoch = 0;       // 0 is the pre-training snapshot
    long long t = 0;     // tasks processed so far
    double mean_loss = 0.0;
    double heldout_lf = 0.0;
    double beta_plus = 0.0;
    double beta_minus = 0.0;
};

struct TrainResult {
    ModelParams model;
    RefereeParams referee;
    GlobalMetric m_hat;      // benchmark at the final parameters, frozen for fine-tuning
    long long t_final = 0;
    std::vector<TrainLogRow> log;
    long long clip_events = 0;
    std::vector<std::string> warnings;
};

// Pooled subsample the global benchmark is measured on; drawn once per
// training run.
struct BenchmarkPool {
    Tensor X;
    Tensor y;
};

inline BenchmarkPool benchmark_pool(const GeoDataset& ds, RegionTag region, int cap,
                                    std::uint64_t seed) {
    std::vector<int> pooled;
    for (int li : ds.location_indices_in(region)) {
        const auto& s = ds.locations[static_cast<size_t>(li)].sample_indices;
        pooled.insert(pooled.end(), s.begin(), s.end());
    }
    if (pooled.empty()) throw ContractError("benchmark_pool: region has no data");
    if (static_cast<int>(pooled.size()) > cap) {
        Rng rng = Rng::stream(seed, kStreamSubsample, 0);
        std::vector<int> keep = rng.sample_without_replacement(static_cast<int>(pooled.size()), cap);
        std::vector<int> subset;
        subset.reserve(keep.size());
        for (int k : keep) subset.push_back(pooled[static_cast<size_t>(k)]);
        pooled = std::move(subset);
    }
    return BenchmarkPool{ds.rows_of(pooled), ds.labels_of(pooled)};
}

// M_hat: overall surrogate quality of the current model on the pool.
// Used as a stop-gradient constant everywhere downstream.
inline GlobalMetric global_benchmark(const ModelParams& model, const BenchmarkPool& pool) {
    GlobalMetric g;
    g.m_hat = metric_surrogate(model.spec.problem, predict(model, pool.X), pool.y);
    g.sample_count = pool.X.rows();
    return g;
}

namespace detail {

inline double grad_norm(const std::vector<Tensor>& grads) {
    double ss = 0.0;
    for (const Tensor& g : grads)
        for (size_t i = 0; i < g.size(); ++i) ss += g[i] * g[i];
    return std::sqrt(ss);
}

} // namespace detail

// params <- params - rate * grads, with the gradient set rescaled to
// global norm clip_norm when it exceeds it.
inline void apply_gradients(std::vector<Tensor>& params, const std::vector<Tensor>& grads,
                            double rate, double clip_norm, long long* clip_events) {
    if (params.size() != grads.size())
        throw ContractError("apply_gradients: parameter/gradient count mismatch");
    double scale = rate;
    const double norm = detail::grad_norm(grads);
    if (!std::isfinite(norm)) throw NumericError("apply_gradients: non-finite gradient norm");
    if (norm > clip_norm) {
        scale *= clip_norm / norm;
        if (clip_events) ++(*clip_events);
    }
    const Tensor s = Tensor::scalar(scale);
    for (size_t p = 0; p < params.size(); ++p) params[p] = sub(params[p], mul(grads[p], s));
}

// Phase 1, value level: per-location loss, surrogate metric, and raw
// model gradient at the current parameters.
inline std::vector<LocalEval> phase1_evaluate(const ModelParams& model,
                                              const TaskBatches& batches) {
    if (batches.per_location.empty()) throw ContractError("phase1: task has no locations");
    Record rec;
    const std::vector<Var> theta = lift_leaves(rec, model.tensors);
    std::vector<LocalEval> out;
    out.reserve(batches.per_location.size());
    for (const LocationBatch& lb : batches.per_location) {
        Var pred = predict_t(model.spec, theta, rec.constant(lb.X));
        Var l = loss_t(model.spec.problem, pred, lb.y);
        Var m = metric_surrogate_t(model.spec.problem, pred, lb.y);
        Gradients g = rec.backward_raw(l);
        LocalEval le;
        le.location_id = lb.location_id;
        le.loss = l.item();
        le.metric = m.item();
        for (const Var& v : theta) le.gradient.push_back(g.grad(v));
        out.push_back(std::move(le));
    }
    return out;
}

// Phase 2, value level: referee factors, min/max standardization and
// per-location rates. All-equal factors standardize to 0.5.
inline FairnessFactors phase2_assign_rates(const RefereeParams& referee,
                                           const std::vector<Tensor>& embeddings,
                                           const std::vector<double>& metrics, double m_hat,
                                           double beta_plus, double beta_minus) {
    if (embeddings.size() != metrics.size() || metrics.empty())
        throw ContractError("phase2: need one embedding and metric per location");
    FairnessFactors f;
    for (size_t i = 0; i < metrics.size(); ++i)
        f.raw.push_back(meta_ref_factor(referee, embeddings[i], metrics[i] - m_hat));
    double mn = f.raw[0], mx = f.raw[0];
    for (size_t i = 1; i < f.raw.size(); ++i) {
        mn = std::min(mn, f.raw[i]);
        mx = std::max(mx, f.raw[i]);
    }
    f.degenerate = mx == mn;
    for (double r : f.raw) {
        const double tilde = f.degenerate ? 0.5 : (r - mn) / (mx - mn);
        f.standardized.push_back(tilde);
        f.rates.push_back(tilde * (beta_plus - beta_minus) + beta_minus);
    }
    return f;
}

namespace detail {

// One location's phase-1 outputs, kept on the tape so phases 2 and 3
// can differentiate through them.
struct LocationGraphEval {
    int location_id = 0;
    Var loss;
    Var metric;     // train surrogate
    Var embedding;  // 1 x e mean encoder output
    std::vector<Var> grad;
};

inline std::vector<LocationGraphEval> phase1_graph(Record& rec, const NetSpec& spec,
                                                   const std::vector<Var>& theta,
                                                   const TaskBatches& batches, bool second_order,
                                                   bool need_embedding, bool stop_embedding_grad) {
    if (batches.per_location.empty()) throw ContractError("phase1: task has no locations");
    std::vector<LocationGraphEval> out;
    out.reserve(batches.per_location.size());
    for (const LocationBatch& lb : batches.per_location) {
        LocationGraphEval e;
        e.location_id = lb.location_id;
        Var emb = encode_t(spec, theta, rec.constant(lb.X));
        Var pred = decode_t(spec, theta, emb);
        e.loss = loss_t(spec.problem, pred, lb.y);
        e.metric = metric_surrogate_t(spec.problem, pred, lb.y);
        if (need_embedding) {
            e.embedding = mean_rows(emb, lb.X.rows());
            if (stop_embedding_grad) e.embedding = rec.constant(e.embedding.value());
        }
        VarGrads g = second_order ? rec.backward_graph(e.loss) : rec.backward_detached(e.loss);
        for (const Var& v : theta) e.grad.push_back(g.grad(v));
        out.push_back(std::move(e));
    }
    return out;
}

// Phase 2 on the tape. Mirrors phase2_assign_rates op for op so the
// recorded values match the value-level routine bitwise.
inline std::vector<Var> phase2_graph(Record& rec, const RefereeSpec& rspec,
                                     const std::vector<Var>& w,
                                     const std::vector<LocationGraphEval>& evals, double m_hat,
                                     double beta_plus, double beta_minus, FairnessFactors* out) {
    Var mhat_c = rec.constant(Tensor::scalar(m_hat));
    std::vector<Var> eta;
    eta.reserve(evals.size());
    for (const LocationGraphEval& e : evals)
        eta.push_back(referee_t(rspec, w, e.embedding, sub(e.metric, mhat_c)));
    Var mn = eta[0], mx = eta[0];
    for (size_t i = 1; i < eta.size(); ++i) {
        mn = minimum(mn, eta[i]);
        mx = maximum(mx, eta[i]);
    }
    const bool degenerate = mx.item() == mn.item();
    Var span = rec.constant(Tensor::scalar(beta_plus - beta_minus));
    Var floor = rec.constant(Tensor::scalar(beta_minus));
    Var range = sub(mx, mn);
    std::vector<Var> tildes;
    std::vector<Var> rates;
    tildes.reserve(eta.size());
    rates.reserve(eta.size());
    for (const Var& n : eta) {
        Var tilde = degenerate ? rec.constant(Tensor::scalar(0.5)) : divide(sub(n, mn), range);
        tildes.push_back(tilde);
        rates.push_back(add(mul(tilde, span), floor));
    }
    if (out) {
        out->degenerate = degenerate;
        for (size_t i = 0; i < eta.size(); ++i) {
            out->raw.push_back(eta[i].item());
            out->standardized.push_back(tildes[i].item());
            out->rates.push_back(rates[i].item());
        }
    }
    return rates;
}

// theta' = theta - sum_i rate_i * grad_i, accumulated in location order.
inline std::vector<Var> inner_update(const std::vector<Var>& theta,
                                     const std::vector<LocationGraphEval>& evals,
                                     const std::vector<Var>& rates) {
    if (evals.size() != rates.size() || evals.empty())
        throw ContractError("inner_update: need one rate per location");
    std::vector<Var> out;
    out.reserve(theta.size());
    for (size_t p = 0; p < theta.size(); ++p) {
        Var acc = mul(rates[0], evals[0].grad[p]);
        for (size_t i = 1; i < evals.size(); ++i) acc = add(acc, mul(rates[i], evals[i].grad[p]));
        out.push_back(sub(theta[p], acc));
    }
    return out;
}

} // namespace detail

// MAML inner update on an existing tape: one uniform-rate step over the
// task's per-location gradients.
inline std::vector<Var> maml_inner(Record& rec, const NetSpec& spec, const std::vector<Var>& theta,
                                   const TaskBatches& batches, double beta, bool second_order) {
    if (!(beta >= 0.0)) throw ContractError("maml_inner: beta must be non-negative");
    const auto evals = detail::phase1_graph(rec, spec, theta, batches, second_order,
                                            /*need_embedding=*/false,
                                            /*stop_embedding_grad=*/false);
    const std::vector<Var> rates(evals.size(), rec.constant(Tensor::scalar(beta)));
    return detail::inner_update(theta, evals, rates);
}

struct MetaStepOptions {
    bool second_order = true;
    bool stop_embedding_grad = false;
    bool with_referee = true;   // false: uniform-rate MAML path
    double uniform_rate = 0.0;  // inner rate when with_referee is false
    double m_hat = 0.0;
    double beta_plus = 0.0;
    double beta_minus = 0.0;
};

// Everything phase 3 needs from one task: the two outer losses and the
// three raw gradient sets, all taken at the same temporary parameters.
struct TaskStepResult {
    double task_loss = 0.0;
    double fair_loss = 0.0;
    FairnessFactors factors;
    std::vector<Tensor> grad_theta;       // d task_loss / d theta
    std::vector<Tensor> grad_w;           // d fair_loss / d referee
    std::vector<Tensor> grad_theta_fair;  // d fair_loss / d theta
};

inline TaskStepResult meta_task_step(const ModelParams& model, const RefereeParams& referee,
                                     const TaskBatches& batches, const MetaStepOptions& opt) {
    Record rec;
    const std::vector<Var> theta = lift_leaves(rec, model.tensors);
    const auto evals = detail::phase1_graph(rec, model.spec, theta, batches, opt.second_order,
                                            opt.with_referee, opt.stop_embedding_grad);
    TaskStepResult res;
    std::vector<Var> w;
    std::vector<Var> rates;
    if (opt.with_referee) {
        w = lift_leaves(rec, referee.tensors);
        rates = detail::phase2_graph(rec, referee.spec, w, evals, opt.m_hat, opt.beta_plus,
                                     opt.beta_minus, &res.factors);
    } else {
        rates.assign(evals.size(), rec.constant(Tensor::scalar(opt.uniform_rate)));
        res.factors.rates.assign(evals.size(), opt.uniform_rate);
    }
    const std::vector<Var> theta_prime = detail::inner_update(theta, evals, rates);

    Var pred_val = predict_t(model.spec, theta_prime, rec.constant(batches.Xval_all));
    Var task_loss = loss_t(model.spec.problem, pred_val, batches.yval_all);
    res.task_loss = task_loss.item();
    Gradients g_task = rec.backward_raw(task_loss);
    for (const Var& v : theta) res.grad_theta.push_back(g_task.grad(v));

    if (opt.with_referee) {
        std::vector<Var> m_tilde;
        m_tilde.reserve(batches.per_location.size());
        for (const LocationBatch& lb : batches.per_location) {
            Var pv = predict_t(model.spec, theta_prime, rec.constant(lb.Xval));
            m_tilde.push_back(metric_surrogate_t(model.spec.problem, pv, lb.yval));
        }
        Var fair = fairness_loss_t(m_tilde, rec.constant(Tensor::scalar(opt.m_hat)));
        res.fair_loss = fair.item();
        Gradients g_fair = rec.backward_raw(fair);
        for (const Var& v : w) res.grad_w.push_back(g_fair.grad(v));
        for (const Var& v : theta) res.grad_theta_fair.push_back(g_fair.grad(v));
    }
    return res;
}

// Single-task MAML meta-gradient: d L(val at theta') / d theta.
inline std::vector<Tensor> maml_task_gradient(const ModelParams& model, const TaskBatches& batches,
                                              double beta, bool second_order) {
    MetaStepOptions opt;
    opt.second_order = second_order;
    opt.with_referee = false;
    opt.uniform_rate = beta;
    RefereeParams unused;
    return meta_task_step(model, unused, batches, opt).grad_theta;
}

// Mean validation loss and hard-metric fairness over fixed tasks; the
// fairness of a task is the spread of per-location qualities about the
// task's pooled quality.
struct HeldoutEval {
    double mean_loss = 0.0;
    double mean_lf = 0.0;
};

inline double task_lf_hard(const ModelParams& model, const TaskBatches& batches) {
    std::vector<double> qs;
    qs.reserve(batches.per_location.size());
    for (const LocationBatch& lb : batches.per_location)
        qs.push_back(metric_eval(model.spec.problem, predict(model, lb.Xval), lb.yval));
    const double pooled =
        metric_eval(model.spec.problem, predict(model, batches.Xval_all), batches.yval_all);
    return locational_fairness(qs, pooled);
}

inline HeldoutEval heldout_evaluate(const ModelParams& model,
                                    const std::vector<TaskBatches>& tasks) {
    HeldoutEval h;
    if (tasks.empty()) return h;
    for (const TaskBatches& b : tasks) {
        h.mean_loss += loss(model.spec.problem, predict(model, b.Xval_all), b.yval_all);
        h.mean_lf += task_lf_hard(model, b);
    }
    h.mean_loss /= double(tasks.size());
    h.mean_lf /= double(tasks.size());
    return h;
}

namespace detail {

inline std::vector<TaskBatches> draw_heldout(const GeoDataset& ds, const TrainConfig& cfg) {
    std::vector<TaskBatches> out;
    if (cfg.heldout_tasks == 0) return out;
    TaskDistribution dist(ds, RegionTag::TrainRegion, Rng::derive_seed(cfg.seed, kStreamHeldout, 0));
    const std::uint64_t batch_seed = Rng::derive_seed(cfg.seed, kStreamHeldout, 1);
    for (int i = 0; i < cfg.heldout_tasks; ++i) {
        SpatialTask task = sample_task(dist);
        out.push_back(sample_batches(task, ds, cfg.k_train, cfg.k_val, batch_seed));
    }
    return out;
}

inline void check_train_inputs(const GeoDataset& ds, const TaskDistribution& dist,
                               const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.net.problem != ds.problem)
        throw ContractError("train: model problem kind does not match the dataset");
    if (cfg.net.feature_dim != ds.feature_dim())
        throw ContractError("train: model expects " + std::to_string(cfg.net.feature_dim) +
                            " features, dataset has " + std::to_string(ds.feature_dim()));
    if (dist.region != RegionTag::TrainRegion)
        throw ContractError("train: task distribution must draw from the training region");
}

} // namespace detail

// Full three-phase training loop. t counts tasks processed, starting
// at 0; the log gets a pre-training row (epoch 0) and one row per
// epoch, with heldout loss standing in for mean task loss in row 0.
inline TrainResult train(const GeoDataset& ds, TaskDistribution& dist, const TrainConfig& cfg) {
    detail::check_train_inputs(ds, dist, cfg);
    TrainResult res;
    Rng model_rng = Rng::stream(cfg.seed, kStreamInit, 0);
    Rng referee_rng = Rng::stream(cfg.seed, kStreamInit, 1);
    res.model = init_model(cfg.net, model_rng);
    res.referee = init_referee(cfg.referee, referee_rng);

    const BenchmarkPool pool = benchmark_pool(ds, RegionTag::TrainRegion, cfg.mhat_subsample,
                                              cfg.seed);
    const std::vector<TaskBatches> heldout = detail::draw_heldout(ds, cfg);
    const RateSchedule sched = cfg.schedule();
    const bool meta_ref = cfg.lambda > 0.0;
    long long t = 0;

    const HeldoutEval h0 = heldout_evaluate(res.model, heldout);
    res.log.push_back({0, 0, h0.mean_loss, h0.mean_lf, sched.beta_plus(0), sched.beta_minus(0)});

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        res.m_hat = global_benchmark(res.model, pool);
        double loss_sum = 0.0;
        for (int j = 0; j < cfg.tasks_per_epoch; ++j) {
            const SpatialTask task = sample_task(dist);
            const TaskBatches batches = sample_batches(task, ds, cfg.k_train, cfg.k_val, cfg.seed);
            MetaStepOptions opt;
            opt.second_order = cfg.second_order;
            opt.stop_embedding_grad = cfg.stop_embedding_grad;
            opt.with_referee = meta_ref;
            opt.uniform_rate = cfg.beta0;
            opt.m_hat = res.m_hat.m_hat;
            opt.beta_plus = sched.beta_plus(t);
            opt.beta_minus = sched.beta_minus(t);
            TaskStepResult step;
            try {
                step = meta_task_step(res.model, res.referee, batches, opt);
            } catch (const NumericError& e) {
                throw NumericError("task " + std::to_string(task.task_id) + ": " + e.what());
            }
            loss_sum += step.task_loss;
            if (!cfg.disable_p2p)
                apply_gradients(res.model.tensors, step.grad_theta, cfg.alpha1, cfg.clip_norm,
                                &res.clip_events);
            if (meta_ref && !cfg.disable_f2m)
                apply_gradients(res.referee.tensors, step.grad_w, cfg.alpha2(), cfg.clip_norm,
                                &res.clip_events);
            if (meta_ref && !cfg.disable_f2p)
                apply_gradients(res.model.tensors, step.grad_theta_fair, cfg.alpha3(),
                                cfg.clip_norm, &res.clip_events);
            ++t;
        }
        const HeldoutEval h = heldout_evaluate(res.model, heldout);
        res.log.push_back({epoch, t, loss_sum / cfg.tasks_per_epoch, h.mean_lf,
                           sched.beta_plus(t), sched.beta_minus(t)});
    }
    res.t_final = t;
    res.m_hat = global_benchmark(res.model, pool);
    if (res.clip_events > 0)
        res.warnings.push_back("gradient clipping fired " + std::to_string(res.clip_events) +
                               " times");
    return res;
}

inline double population_variance(const std::vector<double>& xs) {
    if (xs.empty()) throw ContractError("population_variance: empty set");
    double mean = 0.0;
    for (double x : xs) mean += x;
    mean /= double(xs.size());
    double ss = 0.0;
    for (double x : xs) ss += (x - mean) * (x - mean);
    return ss / double(xs.size());
}

// Non-meta baseline: plain gradient steps on pooled task data with an
// optional variance penalty over per-location losses. reg_lambda = 0
// is the plain baseline.
inline TrainResult baseline_train(const GeoDataset& ds, TaskDistribution& dist,
                                  const TrainConfig& cfg, double reg_lambda) {
    detail::check_train_inputs(ds, dist, cfg);
    if (!(reg_lambda >= 0.0)) throw ContractError("baseline: reg_lambda must be non-negative");
    TrainResult res;
    Rng model_rng = Rng::stream(cfg.seed, kStreamInit, 0);
    Rng referee_rng = Rng::stream(cfg.seed, kStreamInit, 1);
    res.model = init_model(cfg.net, model_rng);
    res.referee = init_referee(cfg.referee, referee_rng);

    const BenchmarkPool pool = benchmark_pool(ds, RegionTag::TrainRegion, cfg.mhat_subsample,
                                              cfg.seed);
    const std::vector<TaskBatches> heldout = detail::draw_heldout(ds, cfg);
    long long t = 0;

    const HeldoutEval h0 = heldout_evaluate(res.model, heldout);
    res.log.push_back({0, 0, h0.mean_loss, h0.mean_lf, 0.0, 0.0});

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        for (int j = 0; j < cfg.tasks_per_epoch; ++j) {
            const SpatialTask task = sample_task(dist);
            const TaskBatches batches = sample_batches(task, ds, cfg.k_train, cfg.k_val, cfg.seed);
            Record rec;
            const std::vector<Var> theta = lift_leaves(rec, res.model.tensors);
            std::vector<Var> locl;
            locl.reserve(batches.per_location.size());
            for (const LocationBatch& lb : batches.per_location) {
                Var pred = predict_t(cfg.net, theta, rec.constant(lb.X));
                locl.push_back(loss_t(cfg.net.problem, pred, lb.y));
            }
            Var mean_loss = locl[0];
            for (size_t i = 1; i < locl.size(); ++i) mean_loss = add(mean_loss, locl[i]);
            Var inv_n = rec.constant(Tensor::scalar(1.0 / double(locl.size())));
            mean_loss = mul(mean_loss, inv_n);
            Var objective = mean_loss;
            if (reg_lambda > 0.0) {
                Var var = mul(sub(locl[0], mean_loss), sub(locl[0], mean_loss));
                for (size_t i = 1; i < locl.size(); ++i) {
                    Var d = sub(locl[i], mean_loss);
                    var = add(var, mul(d, d));
                }
                var = mul(var, inv_n);
                objective = add(objective, mul(var, rec.constant(Tensor::scalar(reg_lambda))));
            }
            loss_sum += objective.item();
            Gradients g = rec.backward_raw(objective);
            std::vector<Tensor> grads;
            grads.reserve(theta.size());
            for (const Var& v : theta) grads.push_back(g.grad(v));
            apply_gradients(res.model.tensors, grads, cfg.alpha1, cfg.clip_norm, &res.clip_events);
            ++t;
        }
        const HeldoutEval h = heldout_evaluate(res.model, heldout);
        res.log.push_back({epoch, t, loss_sum / cfg.tasks_per_epoch, h.mean_lf, 0.0, 0.0});
    }
    res.t_final = t;
    res.m_hat = global_benchmark(res.model, pool);
    if (res.clip_events > 0)
        res.warnings.push_back("gradient clipping fired " + std::to_string(res.clip_events) +
                               " times");
    return res;
}

struct FineTuneResult {
    ModelParams model;
    std::vector<FairnessFactors> factors;  // one per adaptation step
    long long clip_events = 0;
};

// Two-phase adaptation on an unseen task: evaluate per location, let
// the frozen referee assign rates against the frozen training
// benchmark, and step the model. The referee is never modified.
inline FineTuneResult fine_tune(const ModelParams& model, const RefereeParams& referee,
                                const GeoDataset& ds, const SpatialTask& task,
                                const TaskBatches& batches, double m_hat,
                                const RateSchedule& schedule, long long t_final, int steps = 1,
                                double clip_norm = 10.0) {
    schedule.validate();
    if (steps < 1) throw ContractError("fine_tune: steps must be positive");
    for (int lid : task.location_ids)
        if (ds.region[static_cast<size_t>(ds.location_index(lid))] != RegionTag::TestRegion)
            throw ContractError("fine_tune: location " + std::to_string(lid) +
                                " overlaps the training region");
    const double bp = schedule.beta_plus(t_final);
    const double bm = schedule.beta_minus(t_final);
    FineTuneResult res;
    res.model = model;
    for (int s = 0; s < steps; ++s) {
        const std::vector<LocalEval> evals = phase1_evaluate(res.model, batches);
        std::vector<Tensor> embeddings;
        std::vector<double> metrics;
        embeddings.reserve(evals.size());
        for (size_t i = 0; i < evals.size(); ++i) {
            const Tensor emb = encode(res.model, batches.per_location[i].X);
            embeddings.push_back(mean_rows(emb, emb.rows()));
            metrics.push_back(evals[i].metric);
        }
        const FairnessFactors f =
            phase2_assign_rates(referee, embeddings, metrics, m_hat, bp, bm);
        std::vector<Tensor> delta;
        delta.reserve(res.model.tensors.size());
        for (size_t p = 0; p < res.model.tensors.size(); ++p) {
            Tensor acc = mul(evals[0].gradient[p], Tensor::scalar(f.rates[0]));
            for (size_t i = 1; i < evals.size(); ++i)
                acc = add(acc, mul(evals[i].gradient[p], Tensor::scalar(f.rates[i])));
            delta.push_back(std::move(acc));
        }
        apply_gradients(res.model.tensors, delta, 1.0, clip_norm, &res.clip_events);
        res.factors.push_back(f);
    }
    return res;
}

// Referee-free counterpart of fine_tune: every location adapts at the
// same rate. Used to evaluate uniform-rate baselines on unseen tasks.
inline FineTuneResult uniform_adapt(const ModelParams& model, const GeoDataset& ds,
                                    const SpatialTask& task, const TaskBatches& batches,
                                    double rate, int steps = 1, double clip_norm = 10.0) {
    if (!(rate >= 0.0)) throw ContractError("uniform_adapt: rate must be non-negative");
    if (steps < 1) throw ContractError("uniform_adapt: steps must be positive");
    for (int lid : task.location_ids)
        if (ds.region[static_cast<size_t>(ds.location_index(lid))] != RegionTag::TestRegion)
            throw ContractError("uniform_adapt: location " + std::to_string(lid) +
                                " overlaps the training region");
    FineTuneResult res;
    res.model = model;
    for (int s = 0; s < steps; ++s) {
        const std::vector<LocalEval> evals = phase1_evaluate(res.model, batches);
        std::vector<Tensor> delta;
        delta.reserve(res.model.tensors.size());
        for (size_t p = 0; p < res.model.tensors.size(); ++p) {
            Tensor acc = mul(evals[0].gradient[p], Tensor::scalar(rate));
            for (size_t i = 1; i < evals.size(); ++i)
                acc = add(acc, mul(evals[i].gradient[p], Tensor::scalar(rate)));
            delta.push_back(std::move(acc));
        }
        apply_gradients(res.model.tensors, delta, 1.0, clip_norm, &res.clip_events);
    }
    return res;
}

} // namespace metaref

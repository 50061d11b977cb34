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

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "metaref/csvio.hpp"
#include "metaref/errors.hpp"
#include "metaref/geodata.hpp"
#include "metaref/training.hpp"

namespace metaref {

// Flat key = value configuration. '#' starts a comment, blank lines are
// skipped, keys are unique. Every key must be consumed by a getter;
// leftovers are reported together so a typo never silently falls back
// to a default.
class KeyValues {
public:
    static KeyValues parse(const std::string& text, const std::string& where) {
        KeyValues kv;
        kv.where_ = where;
        std::string line;
        int line_no = 0;
        size_t start = 0;
        while (start <= text.size()) {
            size_t nl = text.find('\n', start);
            if (nl == std::string::npos) {
                line = text.substr(start);
                start = text.size() + 1;
            } else {
                line = text.substr(start, nl - start);
                start = nl + 1;
            }
            ++line_no;
            const size_t hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const size_t eq = line.find('=');
            if (eq == std::string::npos)
                throw ValidationError(where + ":" + std::to_string(line_no) +
                                      ": expected 'key = value', got '" + line + "'");
            const std::string key = trim(line.substr(0, eq));
            const std::string value = trim(line.substr(eq + 1));
            if (key.empty())
                throw ValidationError(where + ":" + std::to_string(line_no) + ": empty key");
            if (!kv.values_.emplace(key, value).second)
                throw ValidationError(where + ":" + std::to_string(line_no) + ": duplicate key '" +
                                      key + "'");
            kv.order_.push_back(key);
        }
        return kv;
    }

    bool has(const std::string& key) const { return values_.count(key) > 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        return it->second;
    }

    double get_double(const std::string& key, double fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        return parse_double(it->second, where_ + ": key '" + key + "'");
    }

    long long get_int(const std::string& key, long long fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        return parse_int(it->second, where_ + ": key '" + key + "'");
    }

    bool get_bool(const std::string& key, bool fallback) {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        consumed_.insert(key);
        if (it->second == "true") return true;
        if (it->second == "false") return false;
        throw ValidationError(where_ + ": key '" + key + "': expected true or false, got '" +
                              it->second + "'");
    }

    void require_all_consumed() const {
        std::vector<std::string> leftover;
        for (const std::string& key : order_)
            if (!consumed_.count(key)) leftover.push_back(key);
        if (leftover.empty()) return;
        std::string msg = where_ + ": unknown key(s):";
        for (const std::string& key : leftover) msg += " '" + key + "'";
        throw ValidationError(msg);
    }

private:
    std::string where_;
    std::map<std::string, std::string> values_;
    std::vector<std::string> order_;
    std::set<std::string> consumed_;
};

inline const std::vector<std::string>& method_names() {
    static const std::vector<std::string> names = {"plain",    "reg",    "maml", "meta-ref",
                                                   "mr-p2p",   "mr-f2m", "mr-f2p"};
    return names;
}

inline bool known_method(const std::string& name) {
    for (const std::string& m : method_names())
        if (m == name) return true;
    return false;
}

// Full experiment description: dataset, task sampler, training
// hyperparameters, and the evaluation protocol. One text file drives
// the whole pipeline and round-trips byte-identically through to_text.
struct ExperimentConfig {
    struct Data {
        std::string source = "synthetic";  // synthetic | csv
        std::string csv_path;
        ProblemKind problem = ProblemKind::Regression;
        int n_locations = 40;
        int points_per_location = 160;
        int feature_dim = 8;
        std::string noise = "linear";  // uniform | linear
        double noise_base = 0.05;
        double noise_slope = 0.2;
        double signal_scale = 1.0;
        double drift_amplitude = 0.5;
        double feature_shift = 0.0;
        double split_fraction = 0.5;
    };

    struct Tasks {
        int min_locations = 10;
        int max_locations = 15;
        double mix = 0.2;
        double window = 0.0;  // 0 keeps the density-derived default
        int eval_count = 30;
    };

    struct Eval {
        int k_shot = 8;
        int k_eval = 32;
    };

    Data data;
    Tasks tasks;
    TrainConfig train;
    Eval eval;
    std::vector<std::string> methods = {"plain", "reg", "maml", "meta-ref"};
    std::uint64_t seed = 42;

    BiasProfile profile() const {
        BiasProfile p;
        p.noise = data.noise == "uniform" ? BiasProfile::Noise::Uniform
                                          : BiasProfile::Noise::LinearNoise;
        p.noise_base = data.noise_base;
        p.noise_slope = data.noise_slope;
        p.signal_scale = data.signal_scale;
        p.drift_amplitude = data.drift_amplitude;
        p.feature_shift = data.feature_shift;
        p.problem = data.problem;
        return p;
    }

    void validate() const {
        if (data.source != "synthetic" && data.source != "csv")
            throw ValidationError("config: data.source must be synthetic or csv");
        if (data.source == "csv" && data.csv_path.empty())
            throw ValidationError("config: data.csv_path is required when data.source = csv");
        if (data.source == "synthetic" && data.n_locations < 4)
            throw ValidationError("config: data.n_locations must be at least 4");
        if (data.points_per_location < 1 || data.feature_dim < 1)
            throw ValidationError("config: data points and features must be positive");
        if (data.noise != "uniform" && data.noise != "linear")
            throw ValidationError("config: data.noise must be uniform or linear");
        if (data.feature_shift < 0.0)
            throw ValidationError("config: data.feature_shift must be non-negative");
        if (!(data.split_fraction > 0.0 && data.split_fraction < 1.0))
            throw ValidationError("config: data.split_fraction must be in (0,1)");
        if (tasks.min_locations < 2 || tasks.max_locations < tasks.min_locations)
            throw ValidationError("config: task location bounds invalid");
        if (tasks.mix < 0.0 || tasks.mix > 1.0)
            throw ValidationError("config: tasks.mix must be in [0,1]");
        if (tasks.window < 0.0)
            throw ValidationError("config: tasks.window must be non-negative");
        if (tasks.eval_count < 1)
            throw ValidationError("config: tasks.eval_count must be positive");
        if (eval.k_shot < 1 || eval.k_eval < 1)
            throw ValidationError("config: eval batch sizes must be positive");
        if (methods.empty()) throw ValidationError("config: methods must not be empty");
        std::set<std::string> seen;
        for (const std::string& m : methods) {
            if (!known_method(m))
                throw ValidationError("config: unknown method '" + m + "'");
            if (!seen.insert(m).second)
                throw ValidationError("config: method '" + m + "' listed twice");
        }
        try {
            train.validate();
        } catch (const ContractError& e) {
            throw ValidationError(std::string("config: ") + e.what());
        }
    }

    static ExperimentConfig from_text(const std::string& text, const std::string& where) {
        KeyValues kv = KeyValues::parse(text, where);
        const long long version = kv.get_int("schema_version", -1);
        if (version != 1)
            throw ValidationError(where + ": schema_version = 1 is required");

        ExperimentConfig c;
        c.seed = static_cast<std::uint64_t>(kv.get_int("seed", static_cast<long long>(c.seed)));
        const std::string methods = kv.get_string("methods", join(c.methods));
        c.methods.clear();
        for (const std::string& m : split_csv_line(methods))
            if (!m.empty()) c.methods.push_back(m);

        c.data.source = kv.get_string("data.source", c.data.source);
        c.data.csv_path = kv.get_string("data.csv_path", c.data.csv_path);
        c.data.problem = parse_problem(kv.get_string("data.problem", problem_name(c.data.problem)));
        c.data.n_locations = geti(kv, "data.n_locations", c.data.n_locations);
        c.data.points_per_location =
            geti(kv, "data.points_per_location", c.data.points_per_location);
        c.data.feature_dim = geti(kv, "data.feature_dim", c.data.feature_dim);
        c.data.noise = kv.get_string("data.noise", c.data.noise);
        c.data.noise_base = kv.get_double("data.noise_base", c.data.noise_base);
        c.data.noise_slope = kv.get_double("data.noise_slope", c.data.noise_slope);
        c.data.signal_scale = kv.get_double("data.signal_scale", c.data.signal_scale);
        c.data.drift_amplitude = kv.get_double("data.drift_amplitude", c.data.drift_amplitude);
        c.data.feature_shift = kv.get_double("data.feature_shift", c.data.feature_shift);
        c.data.split_fraction = kv.get_double("data.split_fraction", c.data.split_fraction);

        c.tasks.min_locations = geti(kv, "tasks.min_locations", c.tasks.min_locations);
        c.tasks.max_locations = geti(kv, "tasks.max_locations", c.tasks.max_locations);
        c.tasks.mix = kv.get_double("tasks.mix", c.tasks.mix);
        c.tasks.window = kv.get_double("tasks.window", c.tasks.window);
        c.tasks.eval_count = geti(kv, "tasks.eval_count", c.tasks.eval_count);

        c.train.alpha1 = kv.get_double("train.alpha1", c.train.alpha1);
        c.train.lambda = kv.get_double("train.lambda", c.train.lambda);
        c.train.beta0 = kv.get_double("train.beta0", c.train.beta0);
        c.train.rho = kv.get_double("train.rho", c.train.rho);
        c.train.epochs = geti(kv, "train.epochs", c.train.epochs);
        c.train.tasks_per_epoch = geti(kv, "train.tasks_per_epoch", c.train.tasks_per_epoch);
        c.train.k_train = geti(kv, "train.k_train", c.train.k_train);
        c.train.k_val = geti(kv, "train.k_val", c.train.k_val);
        c.train.second_order = kv.get_bool("train.second_order", c.train.second_order);
        c.train.stop_embedding_grad =
            kv.get_bool("train.stop_embedding_grad", c.train.stop_embedding_grad);
        c.train.mhat_subsample = geti(kv, "train.mhat_subsample", c.train.mhat_subsample);
        c.train.heldout_tasks = geti(kv, "train.heldout_tasks", c.train.heldout_tasks);
        c.train.clip_norm = kv.get_double("train.clip_norm", c.train.clip_norm);
        c.train.reg_lambda = kv.get_double("train.reg_lambda", c.train.reg_lambda);
        c.train.finetune_steps = geti(kv, "train.finetune_steps", c.train.finetune_steps);

        c.train.net.width = geti(kv, "net.width", c.train.net.width);
        c.train.net.embed_dim = c.train.net.width;
        c.train.net.enc_layers = geti(kv, "net.enc_layers", c.train.net.enc_layers);
        c.train.net.dec_layers = geti(kv, "net.dec_layers", c.train.net.dec_layers);
        c.train.net.n_classes = geti(kv, "net.n_classes", c.train.net.n_classes);

        c.train.referee.hidden = geti(kv, "referee.hidden", c.train.referee.hidden);
        c.train.referee.hidden_layers =
            geti(kv, "referee.hidden_layers", c.train.referee.hidden_layers);

        c.eval.k_shot = geti(kv, "eval.k_shot", c.eval.k_shot);
        c.eval.k_eval = geti(kv, "eval.k_eval", c.eval.k_eval);

        kv.require_all_consumed();

        // Dataset-derived model wiring; not part of the key schema.
        c.train.net.feature_dim = c.data.feature_dim;
        c.train.net.problem = c.data.problem;
        c.train.referee.embed_dim = c.train.net.embed_dim;
        c.train.seed = c.seed;
        c.validate();
        return c;
    }

    std::string to_text() const {
        std::string out;
        out += "schema_version = 1\n";
        out += "seed = " + std::to_string(seed) + "\n";
        out += "methods = " + join(methods) + "\n";
        out += "data.source = " + data.source + "\n";
        out += "data.csv_path = " + data.csv_path + "\n";
        out += "data.problem = " + problem_name(data.problem) + "\n";
        out += "data.n_locations = " + std::to_string(data.n_locations) + "\n";
        out += "data.points_per_location = " + std::to_string(data.points_per_location) + "\n";
        out += "data.feature_dim = " + std::to_string(data.feature_dim) + "\n";
        out += "data.noise = " + data.noise + "\n";
        out += "data.noise_base = " + format_g17(data.noise_base) + "\n";
        out += "data.noise_slope = " + format_g17(data.noise_slope) + "\n";
        out += "data.signal_scale = " + format_g17(data.signal_scale) + "\n";
        out += "data.drift_amplitude = " + format_g17(data.drift_amplitude) + "\n";
        out += "data.feature_shift = " + format_g17(data.feature_shift) + "\n";
        out += "data.split_fraction = " + format_g17(data.split_fraction) + "\n";
        out += "tasks.min_locations = " + std::to_string(tasks.min_locations) + "\n";
        out += "tasks.max_locations = " + std::to_string(tasks.max_locations) + "\n";
        out += "tasks.mix = " + format_g17(tasks.mix) + "\n";
        out += "tasks.window = " + format_g17(tasks.window) + "\n";
        out += "tasks.eval_count = " + std::to_string(tasks.eval_count) + "\n";
        out += "train.alpha1 = " + format_g17(train.alpha1) + "\n";
        out += "train.lambda = " + format_g17(train.lambda) + "\n";
        out += "train.beta0 = " + format_g17(train.beta0) + "\n";
        out += "train.rho = " + format_g17(train.rho) + "\n";
        out += "train.epochs = " + std::to_string(train.epochs) + "\n";
        out += "train.tasks_per_epoch = " + std::to_string(train.tasks_per_epoch) + "\n";
        out += "train.k_train = " + std::to_string(train.k_train) + "\n";
        out += "train.k_val = " + std::to_string(train.k_val) + "\n";
        out += std::string("train.second_order = ") + (train.second_order ? "true" : "false") +
               "\n";
        out += std::string("train.stop_embedding_grad = ") +
               (train.stop_embedding_grad ? "true" : "false") + "\n";
        out += "train.mhat_subsample = " + std::to_string(train.mhat_subsample) + "\n";
        out += "train.heldout_tasks = " + std::to_string(train.heldout_tasks) + "\n";
        out += "train.clip_norm = " + format_g17(train.clip_norm) + "\n";
        out += "train.reg_lambda = " + format_g17(train.reg_lambda) + "\n";
        out += "train.finetune_steps = " + std::to_string(train.finetune_steps) + "\n";
        out += "net.width = " + std::to_string(train.net.width) + "\n";
        out += "net.enc_layers = " + std::to_string(train.net.enc_layers) + "\n";
        out += "net.dec_layers = " + std::to_string(train.net.dec_layers) + "\n";
        out += "net.n_classes = " + std::to_string(train.net.n_classes) + "\n";
        out += "referee.hidden = " + std::to_string(train.referee.hidden) + "\n";
        out += "referee.hidden_layers = " + std::to_string(train.referee.hidden_layers) + "\n";
        out += "eval.k_shot = " + std::to_string(eval.k_shot) + "\n";
        out += "eval.k_eval = " + std::to_string(eval.k_eval) + "\n";
        return out;
    }

private:
    static int geti(KeyValues& kv, const std::string& key, int fallback) {
        const long long v = kv.get_int(key, fallback);
        if (v < -2147483648LL || v > 2147483647LL)
            throw ValidationError("config: key '" + key + "' out of range");
        return static_cast<int>(v);
    }

    static std::string join(const std::vector<std::string>& parts) {
        std::string out;
        for (size_t i = 0; i < parts.size(); ++i) {
            if (i > 0) out += ", ";
            out += parts[i];
        }
        return out;
    }
};

inline ExperimentConfig load_config(const std::string& path) {
    std::string text;
    for (const std::string& line : read_lines(path)) text += line + "\n";
    return ExperimentConfig::from_text(text, path);
}

} // namespace metaref

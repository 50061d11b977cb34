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
#include <map>
#include <string>
#include <vector>

#include "metaref/csvio.hpp"
#include "metaref/geodata.hpp"

namespace metaref {

// A spatial task: a small set of locations drawn from one region.
// Fairness is defined and optimized within a task.
struct SpatialTask {
    int task_id = 0;
    std::vector<int> location_ids;
    RegionTag region = RegionTag::TrainRegion;
};

// Sampler over tasks. With probability (1 - mix) locations come from a
// random coordinate window; with probability mix they are a uniform
// draw over the whole region. Tasks may overlap freely.
struct TaskDistribution {
    const GeoDataset* data = nullptr;
    RegionTag region = RegionTag::TrainRegion;
    double window = 0.35;  // side length in map units
    double mix = 0.2;
    int min_locations = 10;
    int max_locations = 15;
    int max_retries = 200;
    Rng rng;
    int next_task_id = 0;

    TaskDistribution(const GeoDataset& ds, RegionTag tag, uint64_t seed)
        : data(&ds), region(tag),
          rng(Rng::stream(seed, kStreamTasks, tag == RegionTag::TrainRegion ? 0 : 1)) {
        // Default window sized so a typical window holds about 16 of the
        // region's locations; overridable per distribution.
        const size_t pool = ds.location_indices_in(tag).size();
        if (pool > 0) window = std::clamp(std::sqrt(16.0 / double(pool)), 0.15, 0.95);
    }
};

inline SpatialTask sample_task(TaskDistribution& dist) {
    if (dist.mix < 0.0 || dist.mix > 1.0)
        throw ContractError("sample_task: mix must be in [0,1]");
    const GeoDataset& ds = *dist.data;
    const std::vector<int> pool = ds.location_indices_in(dist.region);
    if (static_cast<int>(pool.size()) < dist.min_locations)
        throw ValidationError("sample_task: region has " + std::to_string(pool.size()) +
                              " locations, need at least " + std::to_string(dist.min_locations));

    const int span = dist.max_locations - dist.min_locations + 1;
    const int target = dist.min_locations + static_cast<int>(dist.rng.uniform_int(span));

    SpatialTask task;
    task.task_id = dist.next_task_id++;
    task.region = dist.region;

    const bool uniform_draw = dist.rng.uniform01() < dist.mix;
    if (uniform_draw) {
        const int k = std::min<int>(target, static_cast<int>(pool.size()));
        for (int i : dist.rng.sample_without_replacement(static_cast<int>(pool.size()), k))
            task.location_ids.push_back(ds.locations[static_cast<size_t>(pool[static_cast<size_t>(i)])].id);
        return task;
    }

    // Window centers keep the window inside the unit map so coverage is
    // even; a window wider than the map degenerates to the whole region.
    const double half = dist.window / 2.0;
    const double lo = std::min(half, 0.5), hi = std::max(1.0 - half, 0.5);
    for (int attempt = 0; attempt < dist.max_retries; ++attempt) {
        const double cx = dist.rng.uniform(lo, hi);
        const double cy = dist.rng.uniform(lo, hi);
        std::vector<int> inside;
        for (int li : pool) {
            const Location& loc = ds.locations[static_cast<size_t>(li)];
            if (std::fabs(loc.x - cx) <= half && std::fabs(loc.y - cy) <= half)
                inside.push_back(li);
        }
        if (static_cast<int>(inside.size()) < dist.min_locations) continue;
        if (static_cast<int>(inside.size()) <= dist.max_locations) {
            for (int li : inside) task.location_ids.push_back(ds.locations[static_cast<size_t>(li)].id);
        } else {
            for (int i : dist.rng.sample_without_replacement(static_cast<int>(inside.size()), target))
                task.location_ids.push_back(ds.locations[static_cast<size_t>(inside[static_cast<size_t>(i)])].id);
        }
        return task;
    }
    throw ValidationError("sample_task: no window of side " + std::to_string(dist.window) +
                          " contained " + std::to_string(dist.min_locations) +
                          " locations after " + std::to_string(dist.max_retries) + " tries");
}

struct LocationBatch {
    int location_id = 0;
    Tensor X, y;        // per-location training minibatch
    Tensor Xval, yval;  // per-location validation minibatch
};

struct TaskBatches {
    std::vector<LocationBatch> per_location;
    Tensor Xval_all, yval_all;  // whole-task validation concatenation
};

// Disjoint train/validation minibatches per location, plus the pooled
// validation batch in location order.
inline TaskBatches sample_batches(const SpatialTask& task, const GeoDataset& ds, int k_train,
                                  int k_val, uint64_t seed) {
    if (k_train < 1 || k_val < 1)
        throw ContractError("sample_batches: batch sizes must be positive");
    TaskBatches out;
    Rng rng = Rng::stream(seed, kStreamBatches, static_cast<uint64_t>(task.task_id));

    const int d = ds.feature_dim();
    const int n_val_total = k_val * static_cast<int>(task.location_ids.size());
    out.Xval_all = Tensor(n_val_total, d);
    out.yval_all = Tensor(n_val_total, 1);
    int vrow = 0;

    for (int id : task.location_ids) {
        const Location& loc = ds.location_by_id(id);
        const int n = static_cast<int>(loc.sample_indices.size());
        if (n < k_train + k_val)
            throw ValidationError("sample_batches: location " + std::to_string(id) + " has " +
                                  std::to_string(n) + " samples, need " +
                                  std::to_string(k_train + k_val));
        const std::vector<int> picks = rng.sample_without_replacement(n, k_train + k_val);
        std::vector<int> train_pts, val_pts;
        for (int i = 0; i < k_train; ++i)
            train_pts.push_back(loc.sample_indices[static_cast<size_t>(picks[static_cast<size_t>(i)])]);
        for (int i = k_train; i < k_train + k_val; ++i)
            val_pts.push_back(loc.sample_indices[static_cast<size_t>(picks[static_cast<size_t>(i)])]);

        LocationBatch b;
        b.location_id = id;
        b.X = ds.rows_of(train_pts);
        b.y = ds.labels_of(train_pts);
        b.Xval = ds.rows_of(val_pts);
        b.yval = ds.labels_of(val_pts);
        for (int i = 0; i < k_val; ++i, ++vrow) {
            for (int j = 0; j < d; ++j) out.Xval_all.at(vrow, j) = b.Xval.at(i, j);
            out.yval_all.at(vrow, 0) = b.yval.at(i, 0);
        }
        out.per_location.push_back(std::move(b));
    }
    return out;
}

inline void export_tasks(const std::vector<SpatialTask>& tasks, const std::string& path) {
    std::string out = "task_id,location_id\n";
    for (const SpatialTask& t : tasks)
        for (int id : t.location_ids)
            out += std::to_string(t.task_id) + "," + std::to_string(id) + "\n";
    write_text(path, out);
}

// Reads a frozen task list; tasks keep file order, and each task's
// region tag is derived (and checked to be consistent) from the dataset.
inline std::vector<SpatialTask> import_tasks(const std::string& path, const GeoDataset& ds) {
    const std::vector<std::string> lines = read_lines(path);
    if (lines.empty() || split_csv_line(lines[0]) != std::vector<std::string>{"task_id", "location_id"})
        throw ValidationError(path + ":1: header must be task_id,location_id");

    std::vector<SpatialTask> tasks;
    std::map<int, size_t> pos_of_id;
    for (size_t ln = 1; ln < lines.size(); ++ln) {
        if (trim(lines[ln]).empty()) continue;
        const std::string where = path + ":" + std::to_string(ln + 1);
        const std::vector<std::string> cells = split_csv_line(lines[ln]);
        if (cells.size() != 2) throw ValidationError(where + ": expected 2 cells");
        const int tid = static_cast<int>(parse_int(cells[0], where));
        const int lid = static_cast<int>(parse_int(cells[1], where));
        int li = -1;
        try {
            li = ds.location_index(lid);
        } catch (const ContractError&) {
            throw ValidationError(where + ": unknown location id " + cells[1]);
        }
        auto it = pos_of_id.find(tid);
        if (it == pos_of_id.end()) {
            SpatialTask t;
            t.task_id = tid;
            t.region = ds.region[static_cast<size_t>(li)];
            t.location_ids.push_back(lid);
            pos_of_id[tid] = tasks.size();
            tasks.push_back(std::move(t));
        } else {
            SpatialTask& t = tasks[it->second];
            if (ds.region[static_cast<size_t>(li)] != t.region)
                throw ValidationError(where + ": task " + cells[0] +
                                      " mixes train-region and test-region locations");
            t.location_ids.push_back(lid);
        }
    }
    if (tasks.empty()) throw ValidationError(path + ": no tasks");
    return tasks;
}

} // namespace metaref

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

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "metaref/csvio.hpp"
#include "metaref/errors.hpp"
#include "metaref/nets.hpp"
#include "metaref/rng.hpp"
#include "metaref/tensor.hpp"

namespace metaref {

// Named sub-streams of the experiment seed, so every consumer of
// randomness draws from its own reproducible sequence.
enum : uint64_t {
    kStreamTruth = 1,
    kStreamGrid = 2,
    kStreamPoints = 3,
    kStreamSplit = 4,
    kStreamTasks = 5,
    kStreamBatches = 6,
    kStreamInit = 7,
    kStreamHeldout = 8,
    kStreamSubsample = 9,
    kStreamEval = 10,
};

enum class RegionTag { TrainRegion, TestRegion };

struct Location {
    int id = 0;
    double x = 0.0;
    double y = 0.0;
    std::vector<int> sample_indices;
};

struct GeoDataset {
    Tensor features;             // n x d
    std::vector<double> labels;  // class id or real target
    ProblemKind problem = ProblemKind::Regression;
    std::vector<Location> locations;
    std::vector<RegionTag> region;  // per location, parallel to locations
    // Synthetic datasets keep the noiseless latent value per point so
    // tests can separate signal from injected noise. Empty for ingested
    // data.
    std::vector<double> clean_labels;
    std::vector<std::string> warnings;

    int n_points() const { return features.rows(); }
    int feature_dim() const { return features.cols(); }

    const Location& location_by_id(int id) const {
        for (const Location& l : locations)
            if (l.id == id) return l;
        throw ContractError("unknown location id " + std::to_string(id));
    }

    int location_index(int id) const {
        for (size_t i = 0; i < locations.size(); ++i)
            if (locations[i].id == id) return static_cast<int>(i);
        throw ContractError("unknown location id " + std::to_string(id));
    }

    std::vector<int> location_indices_in(RegionTag tag) const {
        std::vector<int> out;
        for (size_t i = 0; i < locations.size(); ++i)
            if (region[i] == tag) out.push_back(static_cast<int>(i));
        return out;
    }

    Tensor rows_of(const std::vector<int>& point_indices) const {
        Tensor out(static_cast<int>(point_indices.size()), feature_dim());
        for (size_t i = 0; i < point_indices.size(); ++i)
            for (int j = 0; j < feature_dim(); ++j)
                out.at(static_cast<int>(i), j) = features.at(point_indices[i], j);
        return out;
    }

    Tensor labels_of(const std::vector<int>& point_indices) const {
        Tensor out(static_cast<int>(point_indices.size()), 1);
        for (size_t i = 0; i < point_indices.size(); ++i)
            out.at(static_cast<int>(i), 0) = labels[static_cast<size_t>(point_indices[i])];
        return out;
    }

    // Every point in exactly one location, unique ids, tags present.
    void validate() const {
        if (locations.size() != region.size())
            throw ValidationError("dataset: region tags do not match locations");
        std::set<int> ids;
        std::vector<char> seen(static_cast<size_t>(n_points()), 0);
        for (const Location& l : locations) {
            if (!ids.insert(l.id).second)
                throw ValidationError("dataset: duplicate location id " + std::to_string(l.id));
            if (l.sample_indices.empty())
                throw ValidationError("dataset: location " + std::to_string(l.id) +
                                      " has no samples");
            for (int s : l.sample_indices) {
                if (s < 0 || s >= n_points())
                    throw ValidationError("dataset: sample index out of range");
                if (seen[static_cast<size_t>(s)])
                    throw ValidationError("dataset: point " + std::to_string(s) +
                                          " assigned to two locations");
                seen[static_cast<size_t>(s)] = 1;
            }
        }
        for (char c : seen)
            if (!c) throw ValidationError("dataset: point not covered by any location");
        if (labels.size() != static_cast<size_t>(n_points()))
            throw ValidationError("dataset: label count does not match points");
    }
};

struct BiasProfile {
    enum class Noise { Uniform, LinearNoise };
    Noise noise = Noise::LinearNoise;
    double noise_base = 0.05;
    double noise_slope = 0.2;     // sigma(x) = base + slope * x
    double signal_scale = 1.0;    // strength of the feature-label relationship
    double drift_amplitude = 0.5; // location-dependent label offset
    double feature_shift = 0.0;   // location-dependent feature mean amplitude
    ProblemKind problem = ProblemKind::Regression;

    double sigma_at(double x) const {
        const double s = noise == Noise::Uniform ? noise_base : noise_base + noise_slope * x;
        return s > 0.0 ? s : 0.0;
    }
};

// Deterministic synthetic dataset: locations on a jittered grid in
// [0,1]^2, normal features whose means optionally vary smoothly with the
// location, a linear ground-truth signal plus a smooth location-dependent
// drift, and noise whose scale follows the bias profile.
inline GeoDataset generate_synthetic(uint64_t seed, int n_locations, int points_per_location,
                                     int feature_dim, const BiasProfile& profile) {
    if (n_locations < 4) throw ContractError("generate_synthetic: need at least 4 locations");
    if (points_per_location < 1 || feature_dim < 1)
        throw ContractError("generate_synthetic: points and features must be positive");

    GeoDataset ds;
    ds.problem = profile.problem;

    Rng truth_rng = Rng::stream(seed, kStreamTruth);
    std::vector<double> w(static_cast<size_t>(feature_dim));
    for (double& v : w) v = truth_rng.uniform(-1.0, 1.0);
    const double signal_norm = profile.signal_scale / std::sqrt(double(feature_dim));

    // Smooth per-feature spatial waves; feature means at a location are
    // feature_shift times these waves, so features carry location
    // information the model can exploit.
    std::vector<double> wave_a(static_cast<size_t>(feature_dim));
    std::vector<double> wave_b(static_cast<size_t>(feature_dim));
    std::vector<double> wave_phase(static_cast<size_t>(feature_dim));
    for (int j = 0; j < feature_dim; ++j) {
        wave_a[static_cast<size_t>(j)] = truth_rng.uniform(-1.0, 1.0);
        wave_b[static_cast<size_t>(j)] = truth_rng.uniform(-1.0, 1.0);
        wave_phase[static_cast<size_t>(j)] = truth_rng.uniform(-1.0, 1.0);
    }

    const int grid = static_cast<int>(std::ceil(std::sqrt(double(n_locations))));
    Rng grid_rng = Rng::stream(seed, kStreamGrid);
    for (int i = 0; i < n_locations; ++i) {
        Location loc;
        loc.id = i;
        const int row = i / grid, col = i % grid;
        loc.x = (col + 0.5) / grid + grid_rng.uniform(-0.35, 0.35) / grid;
        loc.y = (row + 0.5) / grid + grid_rng.uniform(-0.35, 0.35) / grid;
        ds.locations.push_back(loc);
        ds.region.push_back(RegionTag::TrainRegion);
    }

    const int n = n_locations * points_per_location;
    ds.features = Tensor(n, feature_dim);
    ds.labels.resize(static_cast<size_t>(n));
    ds.clean_labels.resize(static_cast<size_t>(n));

    const double two_pi = 2.0 * 3.14159265358979323846;
    for (int li = 0; li < n_locations; ++li) {
        Location& loc = ds.locations[static_cast<size_t>(li)];
        const double drift =
            profile.drift_amplitude * std::sin(two_pi * loc.x) * std::cos(two_pi * loc.y);
        const double sigma = profile.sigma_at(loc.x);
        std::vector<double> mu(static_cast<size_t>(feature_dim));
        for (int j = 0; j < feature_dim; ++j)
            mu[static_cast<size_t>(j)] =
                profile.feature_shift *
                std::sin(two_pi * (wave_a[static_cast<size_t>(j)] * loc.x +
                                   wave_b[static_cast<size_t>(j)] * loc.y) +
                         wave_phase[static_cast<size_t>(j)]);
        Rng rng = Rng::stream(seed, kStreamPoints, static_cast<uint64_t>(li));
        for (int k = 0; k < points_per_location; ++k) {
            const int p = li * points_per_location + k;
            double dot = 0.0;
            for (int j = 0; j < feature_dim; ++j) {
                const double f = mu[static_cast<size_t>(j)] + rng.normal();
                ds.features.at(p, j) = f;
                dot += w[static_cast<size_t>(j)] * f;
            }
            const double clean = signal_norm * dot + drift;
            const double noisy = clean + (sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0);
            ds.clean_labels[static_cast<size_t>(p)] = clean;
            ds.labels[static_cast<size_t>(p)] =
                profile.problem == ProblemKind::Classification ? (noisy > 0.0 ? 1.0 : 0.0) : noisy;
            loc.sample_indices.push_back(p);
        }
    }

    if (profile.signal_scale == 0.0 && profile.drift_amplitude == 0.0 &&
        profile.noise_base == 0.0 &&
        (profile.noise == BiasProfile::Noise::Uniform || profile.noise_slope == 0.0)) {
        ds.warnings.push_back("degenerate bias profile: zero signal and zero noise");
    }

    ds.validate();
    return ds;
}

// Deterministic location split; per-location data untouched.
inline GeoDataset split_locations(GeoDataset ds, double fraction, uint64_t seed) {
    if (!(fraction > 0.0 && fraction < 1.0))
        throw ContractError("split_locations: fraction must be in (0,1)");
    const int n = static_cast<int>(ds.locations.size());
    if (n < 2) throw ContractError("split_locations: need at least 2 locations");
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng = Rng::stream(seed, kStreamSplit);
    rng.shuffle(order);
    long long n_train = std::llround(double(n) * fraction);
    if (n_train < 1) n_train = 1;
    if (n_train > n - 1) n_train = n - 1;
    for (int i = 0; i < n; ++i)
        ds.region[static_cast<size_t>(order[static_cast<size_t>(i)])] =
            i < n_train ? RegionTag::TrainRegion : RegionTag::TestRegion;
    return ds;
}

inline std::string dataset_csv_header(int feature_dim) {
    std::string h = "location_id,x,y";
    for (int j = 1; j <= feature_dim; ++j) h += ",f_" + std::to_string(j);
    h += ",label";
    return h;
}

inline void export_csv(const GeoDataset& ds, const std::string& path) {
    std::string out = dataset_csv_header(ds.feature_dim()) + "\n";
    for (const Location& loc : ds.locations) {
        for (int p : loc.sample_indices) {
            out += std::to_string(loc.id);
            out += ',' + format_g17(loc.x) + ',' + format_g17(loc.y);
            for (int j = 0; j < ds.feature_dim(); ++j) out += ',' + format_g17(ds.features.at(p, j));
            out += ',' + format_g17(ds.labels[static_cast<size_t>(p)]);
            out += '\n';
        }
    }
    write_text(path, out);
}

inline GeoDataset ingest_csv(const std::string& path, ProblemKind problem) {
    const std::vector<std::string> lines = read_lines(path);
    if (lines.empty()) throw ValidationError(path + ": empty file, header row required");

    const std::vector<std::string> header = split_csv_line(lines[0]);
    if (header.size() < 5)
        throw ValidationError(path + ":1: header must be location_id,x,y,f_1..f_d,label");
    const int d = static_cast<int>(header.size()) - 4;
    if (header[0] != "location_id" || header[1] != "x" || header[2] != "y" ||
        header.back() != "label")
        throw ValidationError(path + ":1: header must be location_id,x,y,f_1..f_d,label");
    for (int j = 0; j < d; ++j) {
        const std::string want = "f_" + std::to_string(j + 1);
        if (header[static_cast<size_t>(3 + j)] != want)
            throw ValidationError(path + ":1: unknown column '" +
                                  header[static_cast<size_t>(3 + j)] + "', expected " + want);
    }

    GeoDataset ds;
    ds.problem = problem;
    std::vector<std::vector<double>> rows;
    std::unordered_map<int, size_t> loc_of_id;
    std::unordered_set<std::string> seen_rows;

    for (size_t ln = 1; ln < lines.size(); ++ln) {
        if (trim(lines[ln]).empty()) continue;
        const std::string where = path + ":" + std::to_string(ln + 1);
        const std::vector<std::string> cells = split_csv_line(lines[ln]);
        if (cells.size() != header.size())
            throw ValidationError(where + ": expected " + std::to_string(header.size()) +
                                  " cells, got " + std::to_string(cells.size()));
        const long long id = parse_int(cells[0], where);
        const double x = parse_double(cells[1], where);
        const double y = parse_double(cells[2], where);
        std::vector<double> feat(static_cast<size_t>(d));
        for (int j = 0; j < d; ++j)
            feat[static_cast<size_t>(j)] = parse_double(cells[static_cast<size_t>(3 + j)], where);
        const double label = parse_double(cells.back(), where);
        if (problem == ProblemKind::Classification) {
            if (std::fabs(label - std::llround(label)) > 1e-9 || label < 0.0)
                throw ValidationError(where + ": classification label must be a class id, got '" +
                                      cells.back() + "'");
        }

        std::string key = cells[0];
        for (size_t c = 1; c < cells.size(); ++c) key += "," + cells[c];
        if (!seen_rows.insert(key).second)
            throw ValidationError(where + ": duplicate row for location " + cells[0]);

        const int point = static_cast<int>(rows.size());
        rows.push_back(std::move(feat));
        ds.labels.push_back(label);

        auto it = loc_of_id.find(static_cast<int>(id));
        if (it == loc_of_id.end()) {
            Location loc;
            loc.id = static_cast<int>(id);
            loc.x = x;
            loc.y = y;
            loc.sample_indices.push_back(point);
            loc_of_id[static_cast<int>(id)] = ds.locations.size();
            ds.locations.push_back(std::move(loc));
            ds.region.push_back(RegionTag::TrainRegion);
        } else {
            Location& loc = ds.locations[it->second];
            if (loc.x != x || loc.y != y)
                throw ValidationError(where + ": location " + cells[0] +
                                      " reappears with different coordinates");
            loc.sample_indices.push_back(point);
        }
    }

    if (rows.empty()) throw ValidationError(path + ": no data rows");
    ds.features = Tensor(static_cast<int>(rows.size()), d);
    for (size_t i = 0; i < rows.size(); ++i)
        for (int j = 0; j < d; ++j) ds.features.at(static_cast<int>(i), j) = rows[i][static_cast<size_t>(j)];

    ds.validate();
    return ds;
}

// Structural equality over the parts the CSV schema carries.
inline bool datasets_equal(const GeoDataset& a, const GeoDataset& b) {
    if (a.n_points() != b.n_points() || a.feature_dim() != b.feature_dim()) return false;
    if (!bitwise_equal(a.features, b.features)) return false;
    if (a.labels != b.labels) return false;
    if (a.locations.size() != b.locations.size()) return false;
    for (size_t i = 0; i < a.locations.size(); ++i) {
        const Location& la = a.locations[i];
        const Location& lb = b.locations[i];
        if (la.id != lb.id || la.x != lb.x || la.y != lb.y ||
            la.sample_indices != lb.sample_indices)
            return false;
    }
    return true;
}

} // namespace metaref

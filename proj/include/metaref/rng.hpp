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
#include <random>
#include <vector>

#include "metaref/errors.hpp"

namespace metaref {

// splitmix64 step, used to derive independent stream seeds from a master
// seed. Stable across platforms.
inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic random stream. The engine is std::mt19937_64, whose
// output sequence is fixed by the standard; all variate transforms are
// implemented here by hand because the std distribution objects are not
// portable between standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    // Derive the seed of substream `index` of the stream named `stream`
    // under master seed `seed`. Distinct (stream, index) pairs give
    // independent sequences; the derivation is pure so callers can fan
    // out work in any order and still agree on streams.
    static uint64_t derive_seed(uint64_t seed, uint64_t stream, uint64_t index = 0) {
        uint64_t s = seed;
        (void)splitmix64(s);
        s ^= 0x6a09e667f3bcc909ULL * (stream + 1);
        (void)splitmix64(s);
        s ^= 0xbb67ae8584caa73bULL * (index + 1);
        uint64_t t = s;
        return splitmix64(t);
    }

    static Rng stream(uint64_t seed, uint64_t stream_id, uint64_t index = 0) {
        return Rng(derive_seed(seed, stream_id, index));
    }

    uint64_t next_u64() { return engine_(); }

    // Uniform on [0, 1): top 53 bits scaled by 2^-53.
    double uniform01() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform01();
    }

    // Unbiased integer on [0, n) by rejection.
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw ContractError("Rng::uniform_int: empty range");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal by Box-Muller; caches the second variate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform01();
        } while (u1 <= 0.0);
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Fisher-Yates.
    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // k distinct indices drawn from [0, n), in draw order.
    std::vector<int> sample_without_replacement(int n, int k) {
        if (k > n) throw ContractError("Rng: sample larger than population");
        std::vector<int> pool(n);
        for (int i = 0; i < n; ++i) pool[i] = i;
        std::vector<int> out;
        out.reserve(k);
        for (int i = 0; i < k; ++i) {
            const size_t j = static_cast<size_t>(uniform_int(pool.size()));
            out.push_back(pool[j]);
            pool[j] = pool.back();
            pool.pop_back();
        }
        return out;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace metaref

//
// Copyright 2026 The fedcal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#pragma once

// Additive-mask secure aggregation over Z/2^64.
//
// Values are encoded as signed fixed point with 20 fractional bits. Every
// unordered pair of schools (k, l), k < l, shares a seed; for each round and
// coordinate both derive the same 64-bit mask, which k adds and l subtracts.
// Summing all shares cancels every mask exactly in modular arithmetic.
// Seeds are handed out by the server at setup (honest-but-curious server).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/rng.hpp"

namespace fedcal {

inline constexpr int kFixedPointBits = 20;
inline constexpr double kFixedPointScale = 1048576.0;  // 2^20
// |value| * 2^20 must stay below 2^53 so the rounding is exact and sums of
// many shares stay far from the int64 boundary.
inline constexpr double kFixedPointLimit = 9007199254740992.0;  // 2^53

struct MaskedShare {
  int school_id = 0;
  int round = 0;
  std::vector<std::uint64_t> payload;
};

struct PeerSeed {
  int peer = 0;
  std::uint64_t seed = 0;
};

// The pairwise seeds one school knows about.
struct SchoolMaskKeys {
  int school_id = 0;
  std::vector<PeerSeed> peers;
};

class PairwiseMaskSchedule {
 public:
  PairwiseMaskSchedule() = default;

  static PairwiseMaskSchedule generate(int num_schools, Rng rng) {
    PairwiseMaskSchedule s;
    s.num_schools_ = num_schools;
    for (int k = 0; k < num_schools; ++k) {
      for (int l = k + 1; l < num_schools; ++l) s.seeds_[{k, l}] = rng();
    }
    return s;
  }

  int num_schools() const { return num_schools_; }

  SchoolMaskKeys keys_for(int school) const {
    SchoolMaskKeys keys{school, {}};
    for (const auto& [pair, seed] : seeds_) {
      if (pair.first == school) keys.peers.push_back({pair.second, seed});
      if (pair.second == school) keys.peers.push_back({pair.first, seed});
    }
    std::sort(keys.peers.begin(), keys.peers.end(),
              [](const PeerSeed& a, const PeerSeed& b) { return a.peer < b.peer; });
    return keys;
  }

 private:
  int num_schools_ = 0;
  std::map<std::pair<int, int>, std::uint64_t> seeds_;
};

inline std::uint64_t pair_mask(std::uint64_t seed, int round, std::size_t coord) {
  return Rng(seed).split(static_cast<std::uint64_t>(round)).at(coord);
}

inline std::uint64_t encode_fixed(double x) {
  if (!std::isfinite(x) || std::abs(x) * kFixedPointScale >= kFixedPointLimit) {
    throw RangeError("value " + std::to_string(x) + " does not fit the fixed-point range");
  }
  const auto v = static_cast<std::int64_t>(std::llround(x * kFixedPointScale));
  return static_cast<std::uint64_t>(v);
}

inline double decode_fixed(std::uint64_t u) {
  return static_cast<double>(static_cast<std::int64_t>(u)) / kFixedPointScale;
}

inline MaskedShare encode_and_mask(std::span<const double> values, const SchoolMaskKeys& keys,
                                   int round) {
  MaskedShare share{keys.school_id, round, {}};
  share.payload.reserve(values.size());
  for (std::size_t c = 0; c < values.size(); ++c) {
    std::uint64_t acc = encode_fixed(values[c]);
    for (const auto& p : keys.peers) {
      const std::uint64_t m = pair_mask(p.seed, round, c);
      if (keys.school_id < p.peer) {
        acc += m;
      } else {
        acc -= m;
      }
    }
    share.payload.push_back(acc);
  }
  return share;
}

// Requires exactly one share per school 0..num_schools-1 for `round`.
inline std::vector<double> aggregate_and_decode(std::span<const MaskedShare> shares,
                                                int num_schools, int round) {
  if (num_schools < 1 || shares.empty()) throw ProtocolError("no shares to aggregate");
  std::vector<bool> seen(num_schools, false);
  for (const auto& s : shares) {
    if (s.round != round) throw ProtocolError("share for round " + std::to_string(s.round) +
                                              " in round " + std::to_string(round));
    if (s.school_id < 0 || s.school_id >= num_schools) {
      throw ProtocolError("share from unknown school " + std::to_string(s.school_id));
    }
    if (seen[s.school_id]) throw ProtocolError("duplicate share from school " + std::to_string(s.school_id));
    seen[s.school_id] = true;
  }
  for (int k = 0; k < num_schools; ++k) {
    if (!seen[k]) throw ProtocolError("missing share from school " + std::to_string(k));
  }
  const std::size_t dim = shares.front().payload.size();
  std::vector<std::uint64_t> sum(dim, 0);
  for (const auto& s : shares) {
    if (s.payload.size() != dim) throw ProtocolError("shares have different lengths");
    for (std::size_t c = 0; c < dim; ++c) sum[c] += s.payload[c];
  }
  std::vector<double> out(dim);
  for (std::size_t c = 0; c < dim; ++c) out[c] = decode_fixed(sum[c]);
  return out;
}

}  // namespace fedcal

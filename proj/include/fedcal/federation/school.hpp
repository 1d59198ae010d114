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

#include <cstdint>
#include <deque>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "fedcal/errors.hpp"
#include "fedcal/federation/messages.hpp"
#include "fedcal/federation/transport.hpp"
#include "fedcal/item_bank.hpp"
#include "fedcal/irt_model.hpp"
#include "fedcal/rng.hpp"
#include "fedcal/secure_agg.hpp"

namespace fedcal {

// Plain round: summed per-student scores and the school's log-likelihood.
inline GradientMessage school_round_plain(const ResponseMatrix& x, const ItemBank& bank, double s,
                                          const QuadratureGrid& grid, int school_id = 0,
                                          int round = 0) {
  auto score = score_school(x, bank, s, grid);
  return GradientMessage{school_id, round, std::move(score.grad), score.loglik};
}

struct SchoolDpSetup {
  double sample_rate = 1.0;
  double clip_norm = 1.0;
  std::uint64_t subsample_seed = 0;
  SchoolMaskKeys keys;
  int num_schools = 1;
  bool estimate_s = true;
};

// DP round: subsample, clip, sum, then mask the [a | beta | s-slots] vector.
inline MaskedShare school_round_dp(const ResponseMatrix& x, std::span<const ItemParams2PL> items,
                                   double s, const QuadratureGrid& grid, const SchoolDpSetup& dp,
                                   int round) {
  Rng rng = Rng(dp.subsample_seed).split(static_cast<std::uint64_t>(round));
  const auto clipped = clipped_school_sum(x, items, s, grid, dp.sample_rate, dp.clip_norm,
                                          dp.estimate_s, rng);
  const std::size_t J = items.size();
  std::vector<double> vec(clipped.sum.begin(), clipped.sum.begin() + 2 * J);
  if (dp.estimate_s) {
    vec.resize(2 * J + dp.num_schools, 0.0);
    vec[2 * J + dp.keys.school_id] = clipped.sum.back();
  }
  return encode_and_mask(vec, dp.keys, round);
}

// A school's side of the protocol. handle() is a pure message-in,
// message-out step; run() drives it over a channel.
class SchoolNode {
 public:
  SchoolNode(int school_id, ResponseMatrix data) : id_(school_id), data_(std::move(data)) {}

  int id() const { return id_; }
  const ResponseMatrix& data() const { return data_; }
  bool finished() const { return finished_; }

  RoundMessage hello() const {
    return make_message(MessageType::kHello, 0,
                        {{"school_id", id_},
                         {"n_students", data_.rows()},
                         {"categories", data_.categories()}});
  }

  // Returns the reply, or nothing for DONE. ABORT from the center and any
  // malformed request throw ProtocolError.
  std::optional<RoundMessage> handle(const RoundMessage& m) {
    switch (m.type) {
      case MessageType::kSetup:
        setup(m.payload);
        return std::nullopt;
      case MessageType::kParams:
        return params(m);
      case MessageType::kDone:
        finished_ = true;
        return std::nullopt;
      case MessageType::kAbort:
        finished_ = true;
        throw ProtocolError("center aborted: " + m.payload.value("reason", std::string("?")));
      default:
        throw ProtocolError(std::string("school cannot handle ") + to_string(m.type));
    }
  }

  // HELLO, then serve requests until DONE. Failures are reported to the
  // center with ABORT before being rethrown.
  void run(Channel& ch, Millis timeout = kDefaultTimeout) {
    ch.send(hello());
    while (!finished_) {
      const RoundMessage m = ch.receive(timeout);
      try {
        if (auto reply = handle(m)) ch.send(*reply);
      } catch (const std::exception& e) {
        if (m.type != MessageType::kAbort) {
          try {
            ch.send(abort_message(m.round, "school " + std::to_string(id_) + ": " + e.what()));
          } catch (...) {
          }
        }
        throw;
      }
    }
  }

 private:
  void setup(const nlohmann::json& p) {
    try {
      model_ = parse_model_kind(p.at("model").get<std::string>());
      grid_ = build_grid(p.at("grid").at("theta0").get<double>(), p.at("grid").at("q").get<int>());
      categories_ = p.at("categories").get<std::vector<int>>();
      estimate_s_ = p.at("estimate_s").get<bool>();
      num_schools_ = p.at("num_schools").get<int>();
      if (categories_.size() != data_.items()) {
        throw ContractError("center expects " + std::to_string(categories_.size()) + " items, school has " +
                            std::to_string(data_.items()));
      }
      for (std::size_t j = 0; j < categories_.size(); ++j) {
        if (data_.categories()[j] > categories_[j]) throw ContractError("category count mismatch");
      }
      if (p.contains("dp")) {
        const auto& d = p.at("dp");
        SchoolDpSetup dp;
        dp.sample_rate = d.at("q_s").get<double>();
        dp.clip_norm = d.at("C").get<double>();
        dp.subsample_seed = d.at("subsample_seed").get<std::uint64_t>();
        dp.num_schools = num_schools_;
        dp.estimate_s = estimate_s_;
        dp.keys.school_id = id_;
        for (const auto& peer : d.at("mask_peers")) {
          dp.keys.peers.push_back({peer.at("peer").get<int>(), peer.at("seed").get<std::uint64_t>()});
        }
        dp_ = dp;
      } else {
        dp_.reset();
      }
      configured_ = true;
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("bad SETUP payload: ") + e.what());
    }
  }

  ItemBank bank_from(const nlohmann::json& p) const {
    ItemBank bank;
    bank.kind = model_;
    bank.alpha = p.at("alpha").get<std::vector<double>>();
    if (model_ == ModelKind::k2PL) {
      for (double b : p.at("beta").get<std::vector<double>>()) bank.steps.push_back({b});
    } else {
      bank.steps = p.at("steps").get<std::vector<std::vector<double>>>();
    }
    if (bank.alpha.size() != data_.items() || bank.steps.size() != data_.items()) {
      throw ContractError("parameter broadcast has " + std::to_string(bank.alpha.size()) +
                          " items, school data has " + std::to_string(data_.items()));
    }
    return bank;
  }

  RoundMessage params(const RoundMessage& m) {
    if (!configured_) throw ProtocolError("PARAMS before SETUP");
    ItemBank bank;
    double s = 0.0;
    try {
      bank = bank_from(m.payload);
      s = m.payload.at("s").get<double>();
    } catch (const nlohmann::json::exception& e) {
      throw ProtocolError(std::string("bad PARAMS payload: ") + e.what());
    }
    if (dp_) {
      if (model_ != ModelKind::k2PL) throw ContractError("DP rounds support the 2PL model only");
      return to_message(school_round_dp(data_, bank.as_2pl(), s, grid_, *dp_, m.round));
    }
    return to_message(school_round_plain(data_, bank, s, grid_, id_, m.round));
  }

  int id_;
  ResponseMatrix data_;
  bool configured_ = false;
  bool finished_ = false;
  ModelKind model_ = ModelKind::k2PL;
  QuadratureGrid grid_;
  std::vector<int> categories_;
  bool estimate_s_ = true;
  int num_schools_ = 1;
  std::optional<SchoolDpSetup> dp_;
};

// Synchronous in-process link: the center's send() runs the school's
// handler immediately on the serialized frame; replies queue for receive().
class DirectLink : public Channel {
 public:
  explicit DirectLink(SchoolNode& node) : node_(&node) { inbox_.push_back(encode_frame(node.hello())); }

  void send_frame(const std::string& frame) override {
    const RoundMessage m = decode_frame(frame);
    try {
      if (auto reply = node_->handle(m)) inbox_.push_back(encode_frame(*reply));
    } catch (const std::exception& e) {
      if (m.type == MessageType::kAbort) return;
      inbox_.push_back(encode_frame(
          abort_message(m.round, "school " + std::to_string(node_->id()) + ": " + e.what())));
    }
  }

  std::string receive_frame(Millis) override {
    if (inbox_.empty()) throw ProtocolError("no message from school " + std::to_string(node_->id()));
    std::string f = std::move(inbox_.front());
    inbox_.pop_front();
    return f;
  }

 private:
  SchoolNode* node_;
  std::deque<std::string> inbox_;
};

}  // namespace fedcal

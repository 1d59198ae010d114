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

// Wire format of the round protocol.
//
// A frame is a 4-byte big-endian length followed by that many bytes of UTF-8
// JSON encoding a RoundMessage:
//   {"v": <protocol version>, "type": "<TYPE>", "round": <int>, "payload": {...}}
//
// Payloads by type:
//   HELLO         school -> center  {school_id, n_students, categories[]}
//   SETUP         center -> school  {model, grid{theta0,q}, num_schools, categories[],
//                                    estimate_s, dp?{q_s, C, subsample_seed, mask_peers[{peer,seed}]}}
//   PARAMS        center -> school  {alpha[], beta[] (2pl) | steps[[...]] (pcm), s}
//   GRADS         school -> center  {school_id, grad[], loglik}
//   MASKED_SHARE  school -> center  {school_id, payload[] (uint64)}
//   LOGLIK        reserved for value-only evaluations; accepted but unused
//   DONE          center -> school  {}
//   ABORT         either direction   {reason}
//
// GRADS layout is [d_alpha (J) | d_beta (J or sum C_j-1) | d_s]. A masked
// share is [d_a (J) | d_beta (J) | s-slots (K)] with the school's own d_s in
// slot school_id; the s block is omitted when school effects are fixed.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedcal/errors.hpp"
#include "fedcal/numeric.hpp"
#include "fedcal/secure_agg.hpp"

namespace fedcal {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxFrameBytes = 64u << 20;

enum class MessageType { kHello, kSetup, kParams, kGrads, kMaskedShare, kLoglik, kDone, kAbort };

inline const char* to_string(MessageType t) {
  switch (t) {
    case MessageType::kHello: return "HELLO";
    case MessageType::kSetup: return "SETUP";
    case MessageType::kParams: return "PARAMS";
    case MessageType::kGrads: return "GRADS";
    case MessageType::kMaskedShare: return "MASKED_SHARE";
    case MessageType::kLoglik: return "LOGLIK";
    case MessageType::kDone: return "DONE";
    case MessageType::kAbort: return "ABORT";
  }
  return "?";
}

inline MessageType parse_message_type(const std::string& s) {
  static const MessageType all[] = {MessageType::kHello, MessageType::kSetup, MessageType::kParams,
                                    MessageType::kGrads, MessageType::kMaskedShare,
                                    MessageType::kLoglik, MessageType::kDone, MessageType::kAbort};
  for (MessageType t : all) {
    if (s == to_string(t)) return t;
  }
  throw ProtocolError("unknown message type '" + s + "'");
}

struct RoundMessage {
  MessageType type = MessageType::kAbort;
  int round = 0;
  nlohmann::json payload = nlohmann::json::object();
  int version = kProtocolVersion;
};

inline RoundMessage make_message(MessageType type, int round, nlohmann::json payload = nlohmann::json::object()) {
  return RoundMessage{type, round, std::move(payload), kProtocolVersion};
}

inline std::string encode_frame(const RoundMessage& m) {
  nlohmann::json j = {{"v", m.version}, {"type", to_string(m.type)}, {"round", m.round},
                      {"payload", m.payload}};
  const std::string body = j.dump();
  if (body.size() > kMaxFrameBytes) throw ProtocolError("frame too large");
  const auto n = static_cast<std::uint32_t>(body.size());
  std::string out;
  out.reserve(4 + body.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += body;
  return out;
}

inline std::uint32_t decode_length_prefix(const unsigned char* p) {
  return (std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) | (std::uint32_t{p[2]} << 8) |
         std::uint32_t{p[3]};
}

inline RoundMessage decode_body(const std::string& body) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed frame: ") + e.what());
  }
  if (!j.is_object() || !j.contains("v") || !j.contains("type") || !j.contains("round")) {
    throw ProtocolError("malformed frame: missing envelope fields");
  }
  RoundMessage m;
  try {
    m.version = j.at("v").get<int>();
    if (m.version != kProtocolVersion) {
      throw ProtocolError("protocol version mismatch: got " + std::to_string(m.version) +
                          ", expected " + std::to_string(kProtocolVersion));
    }
    m.type = parse_message_type(j.at("type").get<std::string>());
    m.round = j.at("round").get<int>();
    m.payload = j.contains("payload") ? j.at("payload") : nlohmann::json::object();
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("malformed frame: ") + e.what());
  }
  return m;
}

// Decodes one complete frame; the buffer must hold exactly one frame.
inline RoundMessage decode_frame(const std::string& frame) {
  if (frame.size() < 4) throw ProtocolError("truncated frame header");
  const auto n = decode_length_prefix(reinterpret_cast<const unsigned char*>(frame.data()));
  if (n > kMaxFrameBytes) throw ProtocolError("frame length exceeds limit");
  if (frame.size() - 4 != n) throw ProtocolError("truncated frame body");
  return decode_body(frame.substr(4));
}

// Typed payloads.

struct GradientMessage {
  int school_id = 0;
  int round = 0;
  std::vector<double> grad;
  double loglik = 0.0;
};

inline RoundMessage to_message(const GradientMessage& g) {
  return make_message(MessageType::kGrads, g.round,
                      {{"school_id", g.school_id}, {"grad", g.grad}, {"loglik", g.loglik}});
}

inline GradientMessage gradient_from(const RoundMessage& m) {
  if (m.type != MessageType::kGrads) throw ProtocolError("expected GRADS");
  try {
    GradientMessage g;
    g.round = m.round;
    g.school_id = m.payload.at("school_id").get<int>();
    g.grad = m.payload.at("grad").get<std::vector<double>>();
    g.loglik = m.payload.at("loglik").get<double>();
    if (!all_finite(g.grad) || !std::isfinite(g.loglik)) throw ProtocolError("non-finite gradient");
    return g;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("bad GRADS payload: ") + e.what());
  }
}

inline RoundMessage to_message(const MaskedShare& s) {
  return make_message(MessageType::kMaskedShare, s.round,
                      {{"school_id", s.school_id}, {"payload", s.payload}});
}

inline MaskedShare share_from(const RoundMessage& m) {
  if (m.type != MessageType::kMaskedShare) throw ProtocolError("expected MASKED_SHARE");
  try {
    MaskedShare s;
    s.round = m.round;
    s.school_id = m.payload.at("school_id").get<int>();
    const auto& p = m.payload.at("payload");
    if (!p.is_array()) throw ProtocolError("MASKED_SHARE payload is not an array");
    s.payload.reserve(p.size());
    for (const auto& v : p) {
      if (!v.is_number_unsigned()) throw ProtocolError("MASKED_SHARE entries must be unsigned integers");
      s.payload.push_back(v.get<std::uint64_t>());
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("bad MASKED_SHARE payload: ") + e.what());
  }
}

inline RoundMessage abort_message(int round, const std::string& reason) {
  return make_message(MessageType::kAbort, round, {{"reason", reason}});
}

}  // namespace fedcal

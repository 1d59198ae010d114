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

#include <stdexcept>
#include <string>

namespace fedcal {

// Non-finite or out-of-domain model input (e.g. alpha <= 0, NaN ability).
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Invalid configuration value (grid size, DP hyperparameters, run config).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Caller violated a precondition: mismatched dimensions, bad order grid, ...
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Fixed-point encoding would overflow.
class RangeError : public std::range_error {
 public:
  using std::range_error::range_error;
};

// Malformed frame, version mismatch, timeout, missing or duplicate school.
class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Data file problems; the message names the file and line.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace fedcal

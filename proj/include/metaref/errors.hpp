// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace metaref {

/// Base class for all library errors.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// A caller violated a documented precondition (wrong shapes, foreign
/// record handles, nesting overflow, ...).
struct ContractError : Error {
    using Error::Error;
};

/// A numeric invariant failed at runtime (NaN/Inf produced, loss diverged).
struct NumericError : Error {
    using Error::Error;
};

/// Malformed input files or configuration values.
struct ValidationError : Error {
    using Error::Error;
};

/// Filesystem and I/O failures.
struct IoError : Error {
    using Error::Error;
};

} // namespace metaref

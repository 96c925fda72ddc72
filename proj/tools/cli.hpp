// SPDX-License-Identifier: Apache-2.0
//
// The `dcan` command line: gen-data, train, eval, ablate, attn-diff and
// grad-check. Exposed as a function so tests can drive it in-process.

#pragma once

#include <iosfwd>

namespace dcan::cli {

/// Exit codes: 0 success, 1 runtime failure (diagnostic on `err`), 2 usage
/// error such as an unknown flag (usage text on `err`).
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace dcan::cli

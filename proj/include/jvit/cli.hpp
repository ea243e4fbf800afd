// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Exit codes: 0 success, 1 verification failure,
// 2 usage or configuration error, 3 numeric divergence.

#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace jvit::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitVerify = 1;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitDiverged = 3;

/// args excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Applies JVIT_THREADS (default 1) to the OpenMP runtime.
void configure_threads_from_env();

/// Keeps freed activation buffers in the heap instead of returning them to
/// the kernel after every step. Call once at startup.
void tune_allocator();

}  // namespace jvit::cli

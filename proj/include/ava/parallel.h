// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>

namespace ava {

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work is split into
// contiguous blocks, so callers that write into slot i stay deterministic.
// The first exception thrown by any worker is rethrown on the caller.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// --threads, falling back to AVA_THREADS, else 1.
std::size_t resolve_threads(std::size_t requested);

}  // namespace ava

// Copyright (C) 2026 sdg authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstdint>

namespace sdg {

/// Process-wide counters used by tests to verify structural claims that are
/// otherwise invisible from the outside: that style routing fires in every
/// decoder block, that the inverse model never touches the style table, and
/// that the sampler never leaves its top-K support.
struct Instrumentation {
    std::atomic<std::uint64_t> style_table_reads{0};
    std::atomic<std::uint64_t> style_routing_applications{0};
    std::atomic<std::uint64_t> topk_support_violations{0};

    void reset() {
        style_table_reads = 0;
        style_routing_applications = 0;
        topk_support_violations = 0;
    }
};

inline Instrumentation& instrumentation() {
    static Instrumentation inst;
    return inst;
}

}  // namespace sdg

#pragma once

// Lightweight accumulating profiler, compiled in only under PRFNET_PROFILE.
// Scopes nest freely; report() prints cumulative wall time per label.

#ifdef PRFNET_PROFILE

#include <chrono>
#include <cstdio>
#include <map>
#include <string>

namespace prfnet::prof {

inline std::map<std::string, double>& table() {
    static std::map<std::string, double> t;
    return t;
}

struct Scope {
    const char* name;
    std::chrono::steady_clock::time_point t0;
    explicit Scope(const char* n) : name(n), t0(std::chrono::steady_clock::now()) {}
    ~Scope() {
        table()[name] +=
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
    }
};

inline void report() {
    double total = 0;
    for (auto& [k, v] : table()) total += v;
    std::fprintf(stderr, "---- profile (cumulative ms) ----\n");
    for (auto& [k, v] : table()) std::fprintf(stderr, "%-24s %10.1f\n", k.c_str(), v);
    std::fprintf(stderr, "%-24s %10.1f\n", "TOTAL(sum)", total);
}

inline void reset() { table().clear(); }

}  // namespace prfnet::prof

#define PRFNET_PROF_SCOPE(name) ::prfnet::prof::Scope prfnet_prof_scope_(name)

#else

#define PRFNET_PROF_SCOPE(name) \
    do {                        \
    } while (0)

#endif

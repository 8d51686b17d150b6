#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <string>

#include "kohscan/simd/kernels.hpp"

namespace kohscan::simd {
namespace {

const KernelTable* detect() {
    const char* forced = std::getenv("KOHSCAN_ISA");
    if (forced != nullptr && std::string(forced) == "scalar") return &scalar::table;
    if (isa_supported(Isa::avx2)) return &kernels_for(Isa::avx2);
    return &scalar::table;
}

std::atomic<const KernelTable*>& active() {
    static std::atomic<const KernelTable*> table{detect()};
    return table;
}

}  // namespace

bool isa_supported(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return true;
        case Isa::avx2:
#if defined(__x86_64__) || defined(_M_X64)
            return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
            return false;
#endif
    }
    return false;
}

const KernelTable& kernels_for(Isa isa) {
    if (!isa_supported(isa)) {
        throw std::runtime_error("instruction set not supported on this CPU: " + std::string(isa_name(isa)));
    }
#if defined(__x86_64__) || defined(_M_X64)
    if (isa == Isa::avx2) return avx2::table;
#endif
    return scalar::table;
}

const KernelTable& kernels() { return *active().load(std::memory_order_acquire); }

void select_isa(Isa isa) { active().store(&kernels_for(isa), std::memory_order_release); }

std::string_view isa_name(Isa isa) {
    switch (isa) {
        case Isa::scalar:
            return "scalar";
        case Isa::avx2:
            return "avx2";
    }
    return "unknown";
}

}  // namespace kohscan::simd

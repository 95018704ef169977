#include <atomic>
#include <cstdlib>
#include <string>

#include "deflect/errors.hpp"
#include "deflect/kernels.hpp"

namespace deflect::kernels {

#if defined(DEFLECT_HAVE_AVX2)
const KernelTable& avx2_table_unchecked();
#endif

namespace {

bool cpu_has_avx2() {
#if defined(DEFLECT_HAVE_AVX2) && (defined(__GNUC__) || defined(__clang__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* pick_default() {
  if (const char* forced = std::getenv("DEFLECT_KERNELS")) {
    const std::string name(forced);
    if (name == "scalar") return &scalar_table();
    if (name == "avx2") {
      if (const KernelTable* t = avx2_table()) return t;
      throw ConfigError("DEFLECT_KERNELS=avx2 but AVX2/FMA is unavailable");
    }
    if (name != "auto") throw ConfigError("unknown DEFLECT_KERNELS value: " + name);
  }
  if (const KernelTable* t = avx2_table()) return t;
  return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
  static std::atomic<const KernelTable*> table{pick_default()};
  return table;
}

}  // namespace

const KernelTable* avx2_table() {
#if defined(DEFLECT_HAVE_AVX2)
  static const bool supported = cpu_has_avx2();
  return supported ? &avx2_table_unchecked() : nullptr;
#else
  return nullptr;
#endif
}

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

void select(std::string_view name) {
  if (name == "scalar") {
    current().store(&scalar_table());
  } else if (name == "avx2") {
    const KernelTable* t = avx2_table();
    if (t == nullptr) throw ConfigError("AVX2 kernels unavailable on this machine");
    current().store(t);
  } else {
    throw ConfigError("unknown kernel variant: " + std::string(name));
  }
}

}  // namespace deflect::kernels

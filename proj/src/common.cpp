#include "dtr/common.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <atomic>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace dtr {

spdlog::logger& logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto l = spdlog::stderr_color_mt("dtr");
    l->set_level(spdlog::level::warn);
    l->set_pattern("[%l] %v");
    return l;
  }();
  return *instance;
}

namespace {
std::atomic<int> g_thread_cap{0};
}

void set_thread_cap(int threads) {
  g_thread_cap.store(threads < 0 ? 0 : threads);
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
#endif
}

int thread_cap() {
  const int cap = g_thread_cap.load();
#ifdef _OPENMP
  return cap > 0 ? cap : omp_get_max_threads();
#else
  return cap > 0 ? cap : 1;
#endif
}

}  // namespace dtr

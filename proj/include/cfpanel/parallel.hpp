#pragma once

#include <algorithm>
#include <atomic>
#include <exception>
#include <thread>
#include <vector>

#include <Eigen/Core>

namespace cfpanel {

/// Run body(k) for k in [0, count) on up to `threads` workers. Each job writes only to
/// its own slot, so results do not depend on scheduling. The first exception (by index)
/// is rethrown after all workers finish.
template <class Body>
void parallel_for(Eigen::Index count, int threads, Body&& body) {
  const auto workers = static_cast<Eigen::Index>(std::max(1, threads));
  if (workers == 1 || count <= 1) {
    for (Eigen::Index k = 0; k < count; ++k) body(k);
    return;
  }
  std::atomic<Eigen::Index> next{0};
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
  auto run = [&] {
    for (Eigen::Index k; (k = next.fetch_add(1)) < count;) {
      try {
        body(k);
      } catch (...) {
        errors[static_cast<std::size_t>(k)] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (Eigen::Index w = 0; w < std::min(workers, count); ++w) pool.emplace_back(run);
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

} // namespace cfpanel

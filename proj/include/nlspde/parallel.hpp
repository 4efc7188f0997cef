#pragma once

#include <exception>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nlspde {

// Runs fn(p) for p in [0, count). workers <= 0 runs the plain serial loop
// (the reference path kept for testing); workers >= 1 runs the OpenMP loop
// with that many threads. Iterations must write only to their own slots, so
// results are identical for every worker count; reductions over slots are
// done by the caller in ascending index order.
template <class F>
void parallel_for_indexed(int count, int workers, F&& fn) {
  if (workers <= 0) {
    for (int p = 0; p < count; ++p) fn(p);
    return;
  }
#ifdef _OPENMP
  std::exception_ptr err;
#pragma omp parallel for schedule(static) num_threads(workers)
  for (int p = 0; p < count; ++p) {
    try {
      fn(p);
    } catch (...) {
#pragma omp critical
      {
        if (!err) err = std::current_exception();
      }
    }
  }
  if (err) std::rethrow_exception(err);
#else
  for (int p = 0; p < count; ++p) fn(p);
#endif
}

inline int hardware_workers() {
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace nlspde

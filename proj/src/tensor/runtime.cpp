#include "marformer/runtime.hpp"

#include <cstdlib>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace marformer::runtime {

int configure_threads_from_env() {
#ifdef _OPENMP
  if (const char* env = std::getenv("MARFORMER_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
  return omp_get_max_threads();
#else
  return 1;
#endif
}

}  // namespace marformer::runtime

#pragma once

namespace marformer::runtime {

/// Applies MARFORMER_THREADS (if set) as the cap on internal parallelism.
/// Returns the thread count in effect.
int configure_threads_from_env();

}  // namespace marformer::runtime

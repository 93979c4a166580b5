#define DOCTEST_CONFIG_IMPLEMENT
#include <doctest.h>

#include "marformer/runtime.hpp"

int main(int argc, char** argv) {
  marformer::runtime::configure_threads_from_env();
  doctest::Context ctx(argc, argv);
  return ctx.run();
}

#include "ppcd/tensor.hpp"

namespace ppcd::debug {

namespace {
bool g_finite_checks = false;
}

bool finite_checks() { return g_finite_checks; }
void set_finite_checks(bool on) { g_finite_checks = on; }

}  // namespace ppcd::debug

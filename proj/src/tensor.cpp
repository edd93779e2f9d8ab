#include "spos/tensor.hpp"

namespace spos {

namespace {
bool g_grad_enabled = true;
std::uint64_t g_warnings = 0;
}  // namespace

bool grad_enabled() { return g_grad_enabled; }
void set_grad_enabled(bool on) { g_grad_enabled = on; }

std::uint64_t runtime_warnings() { return g_warnings; }
void reset_runtime_warnings() { g_warnings = 0; }
void count_runtime_warning() { ++g_warnings; }

}  // namespace spos

#include "spos/partition.hpp"

namespace spos {

std::uint64_t count_context_ops(std::int64_t t, std::int64_t k, std::int64_t c) {
    if (t < 1 || k < 1 || c < 1) throw ContractError("count_context_ops: positive arguments required");
    std::uint64_t tp = static_cast<std::uint64_t>((t + k - 1) / k * k);
    return (2 * static_cast<std::uint64_t>(k) + 1) * tp;
}

std::uint64_t attention_cost_local(std::int64_t t, std::int64_t k, std::int64_t c) {
    if (t < 1 || k < 1 || c < 1) throw ContractError("attention_cost_local: positive arguments required");
    std::uint64_t tp = static_cast<std::uint64_t>((t + k - 1) / k * k);
    std::uint64_t l = 2 * static_cast<std::uint64_t>(k) + 1;
    std::uint64_t cc = static_cast<std::uint64_t>(c);
    return 4 * tp * cc * cc + 2 * l * l * tp * cc;
}

std::uint64_t attention_cost_global(std::int64_t t, std::int64_t c) {
    if (t < 1 || c < 1) throw ContractError("attention_cost_global: positive arguments required");
    std::uint64_t tt = static_cast<std::uint64_t>(t);
    std::uint64_t cc = static_cast<std::uint64_t>(c);
    return 4 * tt * cc * cc + 2 * tt * tt * cc;
}

}  // namespace spos

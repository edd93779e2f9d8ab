#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "spos/rng.hpp"
#include "spos/tensor.hpp"

// Named trainable parameters. Modules build their tensors through a
// ParamStoreT so every parameter has a stable name for checkpoints and a
// deterministic init order.
namespace spos {

template <class S>
struct NamedParamT {
    std::string name;
    TensorT<S> tensor;
};

template <class S>
class ParamStoreT {
  public:
    // weight init: uniform in +-sqrt(1/fan_in)
    TensorT<S> weight(const std::string& name, Shape shape, std::int64_t fan_in, Rng& rng) {
        if (fan_in < 1) throw ContractError("weight init: fan_in must be >= 1");
        double b = std::sqrt(1.0 / static_cast<double>(fan_in));
        auto t = TensorT<S>::uniform(std::move(shape), rng, -b, b, true);
        list_.push_back({name, t});
        return t;
    }

    TensorT<S> constant(const std::string& name, Shape shape, S value) {
        auto t = TensorT<S>::full(std::move(shape), value, true);
        list_.push_back({name, t});
        return t;
    }

    TensorT<S> zeros(const std::string& name, Shape shape) {
        return constant(name, std::move(shape), S(0));
    }

    const std::vector<NamedParamT<S>>& list() const { return list_; }

    TensorT<S> find(const std::string& name) const {
        for (const auto& p : list_)
            if (p.name == name) return p.tensor;
        throw ContractError("no parameter named '" + name + "'");
    }

    std::int64_t count_scalars() const {
        std::int64_t n = 0;
        for (const auto& p : list_) n += p.tensor.numel();
        return n;
    }

  private:
    std::vector<NamedParamT<S>> list_;
};

using ParamStore = ParamStoreT<float>;

}  // namespace spos

#pragma once

#include <string>
#include <vector>

#include "iidnet/autodiff/tensor.hpp"

namespace iidnet::ad {

/// Trainable tensor plus Adam moment slots of the same size.
template <class T>
struct Param {
  std::string name;
  Tensor<T> tensor;
  std::vector<T> first_moment;
  std::vector<T> second_moment;

  Param() = default;
  Param(std::string n, Shape shape)
      : name(std::move(n)),
        tensor(Tensor<T>::zeros(std::move(shape), true)),
        first_moment(tensor.numel(), T(0)),
        second_moment(tensor.numel(), T(0)) {}

  std::size_t numel() const { return tensor.numel(); }
};

}  // namespace iidnet::ad

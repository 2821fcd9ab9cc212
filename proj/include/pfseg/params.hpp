#pragma once

#include <string>
#include <vector>

#include "pfseg/tensor.hpp"

namespace pfseg {

/// A named handle onto a module parameter. Handles alias the module's storage.
template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
using ParamList = std::vector<NamedTensor<T>>;

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

template <typename T>
void push_param(ParamList<T>& out, const std::string& prefix, const std::string& leaf, const Tensor<T>& t) {
  if (t.defined()) out.push_back({join_name(prefix, leaf), t});
}

}  // namespace pfseg

#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mflow/tensor.hpp"

namespace mflow::test {

struct PrimitiveCase {
  std::string name;
  std::vector<Shape> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> op;
  double lo = -2.0;
  double hi = 2.0;
};

inline std::vector<PrimitiveCase> primitive_cases() {
  auto idx = std::make_shared<std::vector<std::int64_t>>(
      std::vector<std::int64_t>{0, 5, -1, 3, 3, 11, 7, -1, 2});
  return {
      {"add", {{3, 4}, {3, 4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"add_suffix", {{3, 4}, {4}}, [](auto& v) { return add(v[0], v[1]); }},
      {"add_trailing", {{3, 4}, {3, 1}}, [](auto& v) { return add(v[0], v[1]); }},
      {"sub", {{3, 4}, {4}}, [](auto& v) { return sub(v[0], v[1]); }},
      {"mul", {{3, 4}, {3, 1}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"mul_scalar", {{3, 4}, {}}, [](auto& v) { return mul(v[0], v[1]); }},
      {"div", {{3, 4}, {3, 4}}, [](auto& v) { return div(v[0], add_scalar(square(v[1]), 0.5)); }},
      {"neg", {{5}}, [](auto& v) { return neg(v[0]); }},
      {"scale", {{5}}, [](auto& v) { return scale(v[0], -1.7); }},
      {"add_scalar", {{5}}, [](auto& v) { return add_scalar(v[0], 0.3); }},
      {"exp", {{6}}, [](auto& v) { return exp(v[0]); }},
      {"log", {{6}}, [](auto& v) { return log(v[0]); }, 0.5, 2.0},
      {"sqrt", {{6}}, [](auto& v) { return sqrt(v[0]); }, 0.5, 2.0},
      {"square", {{6}}, [](auto& v) { return square(v[0]); }},
      {"sigmoid", {{6}}, [](auto& v) { return sigmoid(v[0]); }},
      {"silu", {{6}}, [](auto& v) { return silu(v[0]); }},
      {"clamp_min", {{6}}, [](auto& v) { return clamp_min(v[0], 0.05); }, 0.1, 2.0},
      {"matmul", {{3, 4}, {4, 2}}, [](auto& v) { return matmul(v[0], v[1]); }},
      {"affine", {{2, 3, 4}, {4, 5}, {5}}, [](auto& v) { return affine(v[0], v[1], v[2]); }},
      {"bmm", {{2, 3, 4}, {2, 4, 2}}, [](auto& v) { return bmm(v[0], v[1]); }},
      {"bmm_ta", {{2, 4, 3}, {2, 4, 2}}, [](auto& v) { return bmm(v[0], v[1], true, false); }},
      {"bmm_tb", {{2, 3, 4}, {2, 2, 4}}, [](auto& v) { return bmm(v[0], v[1], false, true); }},
      {"attention", {{2, 3, 8}, {2, 5, 8}, {2, 5, 8}},
       [](auto& v) { return multihead_attention(v[0], v[1], v[2], 2); }},
      {"transpose", {{3, 4}}, [](auto& v) { return transpose(v[0]); }},
      {"permute", {{2, 3, 4}}, [](auto& v) { return permute(v[0], {2, 0, 1}); }},
      {"reshape", {{2, 6}}, [](auto& v) { return v[0].reshape({3, 4}); }},
      {"concat", {{2, 3}, {2, 2}}, [](auto& v) { return concat({v[0], v[1]}, 1); }},
      {"slice", {{4, 3}}, [](auto& v) { return slice(v[0], 0, 1, 3); }},
      {"gather", {{12}}, [idx](auto& v) { return gather(v[0], idx, {3, 3}); }},
      {"sum", {{3, 4}}, [](auto& v) { return sum(v[0]); }},
      {"sum_axis", {{3, 4}}, [](auto& v) { return sum(v[0], 0); }},
      {"mean", {{3, 4}}, [](auto& v) { return mean(v[0]); }},
      {"mean_axis", {{3, 4}}, [](auto& v) { return mean(v[0], 1, true); }},
      {"softmax", {{3, 4}}, [](auto& v) { return softmax(v[0], 1); }},
      {"softmax_axis0", {{3, 4}}, [](auto& v) { return softmax(v[0], 0); }},
      {"log_softmax", {{3, 4}}, [](auto& v) { return log_softmax(v[0], 1); }},
      {"layer_norm", {{3, 6}}, [](auto& v) { return layer_norm(v[0]); }},
      {"l2_normalize", {{3, 4}}, [](auto& v) { return l2_normalize(v[0]); }},
  };
}

}  // namespace mflow::test

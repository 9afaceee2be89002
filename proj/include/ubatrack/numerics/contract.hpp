#pragma once

// Two-operand index contraction, "ij,jk->ik" style.
//
// Each index letter falls in one class:
//   batch      in a, b and out
//   free-a     in a and out
//   free-b     in b and out
//   contracted in a and b, not out
// Indices appearing in only one place are rejected. Operands are permuted to
// (batch, free-a, contracted) and (batch, contracted, free-b), multiplied by a
// batched GEMM, and the result is permuted into the requested output order.

#include <algorithm>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "ubatrack/numerics/kernels.hpp"
#include "ubatrack/numerics/tensor.hpp"

namespace ubatrack {

struct ContractSpec {
  std::string a, b, out;

  static ContractSpec parse(std::string_view text) {
    const auto comma = text.find(',');
    const auto arrow = text.find("->");
    if (comma == std::string_view::npos || arrow == std::string_view::npos || arrow < comma) {
      throw ShapeError("contract: malformed spec '" + std::string(text) + "'");
    }
    ContractSpec spec{std::string(text.substr(0, comma)),
                      std::string(text.substr(comma + 1, arrow - comma - 1)),
                      std::string(text.substr(arrow + 2))};
    for (const auto* s : {&spec.a, &spec.b, &spec.out}) {
      std::string sorted = *s;
      std::sort(sorted.begin(), sorted.end());
      if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
        throw ShapeError("contract: repeated index in '" + *s + "'");
      }
    }
    return spec;
  }

  std::string str() const { return a + "," + b + "->" + out; }
};

namespace detail {

struct ContractPlan {
  std::vector<std::size_t> perm_a, perm_b, perm_out;
  std::size_t batch = 1, m = 1, k = 1, n = 1;
  Shape out_shape;
  Shape canonical_out_shape;  // (batch..., free-a..., free-b...)
};

inline ContractPlan plan_contract(const ContractSpec& spec, const Shape& sa, const Shape& sb) {
  if (spec.a.size() != sa.size()) {
    throw ShapeError("contract '" + spec.str() + "': operand a has rank " + std::to_string(sa.size()) +
                     ", spec expects " + std::to_string(spec.a.size()));
  }
  if (spec.b.size() != sb.size()) {
    throw ShapeError("contract '" + spec.str() + "': operand b has rank " + std::to_string(sb.size()) +
                     ", spec expects " + std::to_string(spec.b.size()));
  }
  std::map<char, std::size_t> extent;
  for (std::size_t i = 0; i < spec.a.size(); ++i) extent[spec.a[i]] = sa[i];
  for (std::size_t i = 0; i < spec.b.size(); ++i) {
    const char c = spec.b[i];
    const auto pos_a = spec.a.find(c);
    if (pos_a != std::string::npos && sa[pos_a] != sb[i]) {
      throw ShapeError("contract '" + spec.str() + "': extent mismatch on index '" + std::string(1, c) +
                       "': a axis " + std::to_string(pos_a) + " has " + std::to_string(sa[pos_a]) +
                       ", b axis " + std::to_string(i) + " has " + std::to_string(sb[i]));
    }
    extent[c] = sb[i];
  }
  std::string batch, free_a, free_b, contracted;
  for (char c : spec.a) {
    const bool in_b = spec.b.find(c) != std::string::npos;
    const bool in_out = spec.out.find(c) != std::string::npos;
    if (in_b && in_out) batch += c;
    else if (in_out) free_a += c;
    else if (in_b) contracted += c;
    else throw ShapeError("contract '" + spec.str() + "': index '" + std::string(1, c) + "' appears only in a");
  }
  for (char c : spec.b) {
    const bool in_a = spec.a.find(c) != std::string::npos;
    const bool in_out = spec.out.find(c) != std::string::npos;
    if (!in_a && in_out) free_b += c;
    else if (!in_a) throw ShapeError("contract '" + spec.str() + "': index '" + std::string(1, c) + "' appears only in b");
  }
  for (char c : spec.out) {
    if (!extent.count(c)) throw ShapeError("contract '" + spec.str() + "': output index '" + std::string(1, c) + "' not in inputs");
  }

  ContractPlan plan;
  auto positions = [](const std::string& operand, const std::string& order) {
    std::vector<std::size_t> p;
    for (char c : order) p.push_back(operand.find(c));
    return p;
  };
  plan.perm_a = positions(spec.a, batch + free_a + contracted);
  plan.perm_b = positions(spec.b, batch + contracted + free_b);
  const std::string canonical = batch + free_a + free_b;
  plan.perm_out = positions(canonical, spec.out);
  for (char c : batch) plan.batch *= extent[c];
  for (char c : free_a) plan.m *= extent[c];
  for (char c : contracted) plan.k *= extent[c];
  for (char c : free_b) plan.n *= extent[c];
  for (char c : canonical) plan.canonical_out_shape.push_back(extent[c]);
  for (char c : spec.out) plan.out_shape.push_back(extent[c]);
  return plan;
}

template <class T>
std::vector<T> contract_values(const ContractSpec& spec, const std::vector<T>& a, const Shape& sa,
                               const std::vector<T>& b, const Shape& sb, Shape* out_shape = nullptr) {
  const auto plan = plan_contract(spec, sa, sb);
  const auto pa = kernels::permute(a, sa, plan.perm_a);
  const auto pb = kernels::permute(b, sb, plan.perm_b);
  std::vector<T> canonical(plan.batch * plan.m * plan.n);
  for (std::size_t t = 0; t < plan.batch; ++t) {
    kernels::gemm_nn(plan.m, plan.n, plan.k, pa.data() + t * plan.m * plan.k,
                     pb.data() + t * plan.k * plan.n, canonical.data() + t * plan.m * plan.n, false);
  }
  if (out_shape) *out_shape = plan.out_shape;
  return kernels::permute(canonical, plan.canonical_out_shape, plan.perm_out);
}

}  // namespace detail

// Differentiable in both operands. Gradients are themselves contractions:
// da = contract(g, b -> a), db = contract(a, g -> b).
template <class T>
Tensor<T> contract(const Tensor<T>& a, const Tensor<T>& b, std::string_view spec_text) {
  const auto spec = ContractSpec::parse(spec_text);
  Shape out_shape;
  auto out = detail::contract_values(spec, a.values(), a.shape(), b.values(), b.shape(), &out_shape);
  return make_result<T>(out_shape, std::move(out), {&a, &b}, [spec, out_shape](Node<T>& self) {
    auto& na = *self.inputs[0];
    auto& nb = *self.inputs[1];
    if (na.requires_grad) {
      const ContractSpec grad_a{spec.out, spec.b, spec.a};
      na.accumulate(detail::contract_values(grad_a, self.grad, out_shape, nb.value, nb.shape));
    }
    if (nb.requires_grad) {
      const ContractSpec grad_b{spec.a, spec.out, spec.b};
      nb.accumulate(detail::contract_values(grad_b, na.value, na.shape, self.grad, out_shape));
    }
  });
}

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  return contract(a, b, "ij,jk->ik");
}

}  // namespace ubatrack

#pragma once

// Frozen pre-norm ViT shared by both modality streams, and the patch embedding.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "ubatrack/numerics/numerics.hpp"

namespace ubatrack {

template <class T>
struct VitBlockParams {
  Tensor<T> ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  Tensor<T> ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "ln1.gamma", ln1_g);
    fn(prefix + "ln1.beta", ln1_b);
    fn(prefix + "attn.qkv.w", qkv_w);
    fn(prefix + "attn.qkv.b", qkv_b);
    fn(prefix + "attn.proj.w", proj_w);
    fn(prefix + "attn.proj.b", proj_b);
    fn(prefix + "ln2.gamma", ln2_g);
    fn(prefix + "ln2.beta", ln2_b);
    fn(prefix + "mlp.fc1.w", fc1_w);
    fn(prefix + "mlp.fc1.b", fc1_b);
    fn(prefix + "mlp.fc2.w", fc2_w);
    fn(prefix + "mlp.fc2.b", fc2_b);
  }
};

template <class T>
struct BackboneParams {
  Tensor<T> patch_w, patch_b;  // (p*p*3, D), (D)
  Tensor<T> pos_template;      // (template tokens, D)
  Tensor<T> pos_search;        // (search tokens, D)
  std::vector<VitBlockParams<T>> blocks;
  Tensor<T> norm_g, norm_b;
  std::size_t heads = 4;

  std::size_t dim() const { return patch_b.numel(); }

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "patch_embed.w", patch_w);
    fn(prefix + "patch_embed.b", patch_b);
    fn(prefix + "pos_embed.template", pos_template);
    fn(prefix + "pos_embed.search", pos_search);
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].visit(prefix + "blocks." + std::to_string(i) + ".", fn);
    fn(prefix + "norm.gamma", norm_g);
    fn(prefix + "norm.beta", norm_b);
  }
};

struct BackboneShape {
  std::size_t patch = 16, dim = 32, heads = 4, layers = 12, mlp_ratio = 4;
  std::size_t template_tokens = 64, search_tokens = 256;
};

template <class T>
BackboneParams<T> backbone_init(const BackboneShape& s, std::uint64_t seed) {
  Rng rng = Rng::keyed(seed, "backbone");
  const std::size_t D = s.dim, in = s.patch * s.patch * 3, H = s.mlp_ratio * D;
  constexpr double kStd = 0.02;
  BackboneParams<T> p;
  p.patch_w = randn<T>({in, D}, rng, kStd);
  p.patch_b = Tensor<T>::zeros({D});
  p.pos_template = randn<T>({s.template_tokens, D}, rng, kStd);
  p.pos_search = randn<T>({s.search_tokens, D}, rng, kStd);
  for (std::size_t l = 0; l < s.layers; ++l) {
    VitBlockParams<T> b;
    b.ln1_g = Tensor<T>::full({D}, T(1));
    b.ln1_b = Tensor<T>::zeros({D});
    b.qkv_w = randn<T>({D, 3 * D}, rng, kStd);
    b.qkv_b = Tensor<T>::zeros({3 * D});
    b.proj_w = randn<T>({D, D}, rng, kStd);
    b.proj_b = Tensor<T>::zeros({D});
    b.ln2_g = Tensor<T>::full({D}, T(1));
    b.ln2_b = Tensor<T>::zeros({D});
    b.fc1_w = randn<T>({D, H}, rng, kStd);
    b.fc1_b = Tensor<T>::zeros({H});
    b.fc2_w = randn<T>({H, D}, rng, kStd);
    b.fc2_b = Tensor<T>::zeros({D});
    p.blocks.push_back(std::move(b));
  }
  p.norm_g = Tensor<T>::full({D}, T(1));
  p.norm_b = Tensor<T>::zeros({D});
  p.heads = s.heads;
  return p;
}

// patches (B, n, P) -> tokens (B, n, D), positional table (m, D) tiled over
// n / m frames.
template <class T>
Tensor<T> patch_embed(const Tensor<T>& patches, const BackboneParams<T>& p, const Tensor<T>& pos) {
  if (patches.rank() != 3 || patches.dim(2) != p.patch_w.dim(0)) {
    throw ShapeError("patch_embed: patches " + shape_str(patches.shape()) + " vs projection " +
                     shape_str(p.patch_w.shape()));
  }
  const std::size_t B = patches.dim(0), n = patches.dim(1), m = pos.dim(0), D = p.dim();
  if (n % m != 0) throw ShapeError("patch_embed: token count is not a multiple of the positional table");
  const auto tok = reshape(linear(patches, p.patch_w, &p.patch_b), {B, n / m, m, D});
  return reshape(add(tok, pos), {B, n, D});
}

template <class T>
Tensor<T> self_attention(const Tensor<T>& x, const VitBlockParams<T>& b, std::size_t heads) {
  const std::size_t B = x.dim(0), L = x.dim(1), D = x.dim(2), dh = D / heads;
  const auto qkv = reshape(linear(x, b.qkv_w, &b.qkv_b), {B, L, 3, heads, dh});
  const auto split = permute(qkv, {2, 0, 3, 1, 4});  // (3, B, h, L, dh)
  auto part = [&](std::size_t i) { return reshape(slice(split, 0, i, 1), {B, heads, L, dh}); };
  const auto q = mul_scalar(part(0), T(1) / std::sqrt(T(dh)));
  const auto attn = softmax(contract(q, part(1), "bhid,bhjd->bhij"));
  const auto ctx = permute(contract(attn, part(2), "bhij,bhjd->bhid"), {0, 2, 1, 3});
  return linear(reshape(ctx, {B, L, D}), b.proj_w, &b.proj_b);
}

template <class T>
Tensor<T> vit_block(const Tensor<T>& x, const VitBlockParams<T>& b, std::size_t heads) {
  const auto h = add(x, self_attention(layer_norm(x, b.ln1_g, b.ln1_b), b, heads));
  const auto m = linear(gelu(linear(layer_norm(h, b.ln2_g, b.ln2_b), b.fc1_w, &b.fc1_b)), b.fc2_w, &b.fc2_b);
  return add(h, m);
}

}  // namespace ubatrack

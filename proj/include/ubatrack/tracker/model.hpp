#pragma once

// Two-modality tracker: shared frozen ViT over V and X streams, adapters after
// the scheduled layers, multi-modal mixer on search tokens, prediction head.

#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "ubatrack/dmfm.hpp"
#include "ubatrack/numerics/numerics.hpp"
#include "ubatrack/stma.hpp"
#include "ubatrack/tracker/backbone.hpp"
#include "ubatrack/tracker/config.hpp"
#include "ubatrack/tracker/head.hpp"
#include "ubatrack/tracker/image.hpp"

namespace ubatrack {

// {0} for M == 1, else {0} u {i*T + T/2 : i < M} with T = C_i / M; sorted and
// deduplicated.
inline std::vector<std::size_t> template_schedule(std::size_t current, std::size_t M) {
  std::set<std::size_t> out{0};
  if (M > 1) {
    const std::size_t T = current / M;
    for (std::size_t i = 0; i < M; ++i) out.insert(i * T + T / 2);
  }
  return {out.begin(), out.end()};
}

template <class T>
struct TrackerModel {
  TrackerConfig config;
  BackboneParams<T> backbone;
  std::vector<StmaParams<T>> adapters;         // around template tokens (and search tokens when shared)
  std::vector<StmaParams<T>> search_adapters;  // only with per_group_adapters
  DmfmParams<T> dmfm;
  HeadParams<T> head;

  std::vector<std::size_t> adapter_layers() const { return insertion_schedule(config.layers, config.stma_blocks); }

  template <class Fn>
  void visit_frozen(Fn&& fn) {
    backbone.visit("backbone.", fn);
  }

  template <class Fn>
  void visit_trainable(Fn&& fn) {
    for (std::size_t i = 0; i < adapters.size(); ++i) adapters[i].visit("stma." + std::to_string(i) + ".", fn);
    for (std::size_t i = 0; i < search_adapters.size(); ++i)
      search_adapters[i].visit("stma_search." + std::to_string(i) + ".", fn);
    if (config.use_dmfm) dmfm.visit("dmfm.", fn);
    head.visit("head.", fn);
  }

  template <class Fn>
  void visit(Fn&& fn) {
    visit_frozen(fn);
    visit_trainable(fn);
  }
};

template <class T>
TrackerModel<T> build_model(const TrackerConfig& cfg) {
  cfg.validate();
  TrackerModel<T> m;
  m.config = cfg;
  BackboneShape shape;
  shape.patch = cfg.patch;
  shape.dim = cfg.dim;
  shape.heads = cfg.heads;
  shape.layers = cfg.layers;
  shape.mlp_ratio = cfg.mlp_ratio;
  shape.template_tokens = cfg.template_grid() * cfg.template_grid();
  shape.search_tokens = cfg.search_grid() * cfg.search_grid();
  m.backbone = backbone_init<T>(shape, cfg.seed);
  StmaConfig sc;
  sc.dim = cfg.dim;
  sc.expand = cfg.ssm_expand;
  sc.state = cfg.ssm_state;
  sc.conv_kernel = cfg.conv_kernel;
  sc.fft_blocks = cfg.fft_blocks;
  sc.dropout = cfg.dropout;
  for (std::size_t i = 0; i < cfg.stma_blocks; ++i) {
    m.adapters.push_back(stma_init<T>(sc, Rng::keyed(cfg.seed, "stma." + std::to_string(i)).next_u64()));
    if (cfg.per_group_adapters) {
      m.search_adapters.push_back(
          stma_init<T>(sc, Rng::keyed(cfg.seed, "stma_search." + std::to_string(i)).next_u64()));
    }
  }
  if (cfg.use_dmfm) {
    DmfmConfig dc;
    dc.dim = cfg.dim;
    dc.grid_h = dc.grid_w = cfg.search_grid();
    dc.segments = cfg.dmfm_segments;
    m.dmfm = dmfm_init<T>(dc, cfg.seed);
  }
  m.head = head_init<T>(cfg.dim, cfg.seed);
  m.visit_frozen([](const std::string&, Tensor<T>& t) { t.set_requires_grad(false); });
  m.visit_trainable([](const std::string&, Tensor<T>& t) { t.set_requires_grad(true); });
  return m;
}

// Patch tensors for a batch of samples, each with the same number of
// templates. templates_*: (B, n_t * template tokens, P); search_*: (B, search tokens, P).
template <class T>
struct TrackInput {
  Tensor<T> templates_v, templates_x, search_v, search_x;
  std::size_t template_frames = 1;
};

// Crops -> patch tensors. templates[b][k] and search[b] are already cropped to
// template_size / search_size with 3 channels.
template <class T>
TrackInput<T> make_input(const std::vector<std::vector<Image>>& templ_v, const std::vector<std::vector<Image>>& templ_x,
                         const std::vector<Image>& search_v, const std::vector<Image>& search_x, std::size_t patch) {
  const std::size_t B = search_v.size();
  if (B == 0 || templ_v.size() != B || templ_x.size() != B || search_x.size() != B) {
    throw ShapeError("make_input: modality streams differ in batch extent");
  }
  const std::size_t nt = templ_v[0].size();
  auto pack = [&](const std::vector<const Image*>& imgs, std::size_t per_sample) {
    const std::size_t tokens = patch_count(*imgs[0], patch), P = patch * patch * imgs[0]->channels;
    std::vector<T> data(imgs.size() * tokens * P);
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      if (imgs[i]->height != imgs[0]->height || imgs[i]->width != imgs[0]->width || imgs[i]->channels != 3) {
        throw ShapeError("make_input: crops differ in extent or are not 3-channel");
      }
      patchify_into(*imgs[i], patch, data.data() + i * tokens * P);
    }
    return Tensor<T>::from_data({B, per_sample * tokens, P}, std::move(data));
  };
  std::vector<const Image*> tv, tx, sv, sx;
  for (std::size_t b = 0; b < B; ++b) {
    if (templ_v[b].size() != nt || templ_x[b].size() != nt) {
      throw ShapeError("make_input: template counts differ across samples or modalities");
    }
    for (std::size_t k = 0; k < nt; ++k) {
      tv.push_back(&templ_v[b][k]);
      tx.push_back(&templ_x[b][k]);
    }
    sv.push_back(&search_v[b]);
    sx.push_back(&search_x[b]);
  }
  return {pack(tv, nt), pack(tx, nt), pack(sv, 1), pack(sx, 1), nt};
}

struct ForwardOptions {
  bool training = false;
  Rng* rng = nullptr;
};

template <class T>
BoxPrediction<T> forward_track(const TrackInput<T>& in, const TrackerModel<T>& m, const ForwardOptions& opt = {}) {
  const auto& bb = m.backbone;
  const std::size_t B = in.search_v.dim(0);
  if (in.templates_v.shape() != in.templates_x.shape() || in.search_v.shape() != in.search_x.shape()) {
    throw ShapeError("forward_track: V and X inputs are misaligned");
  }
  if (in.templates_v.dim(0) != B) throw ShapeError("forward_track: template and search batch extents differ");
  const std::size_t nz = in.templates_v.dim(1), ns = in.search_v.dim(1);
  if (ns != bb.pos_search.dim(0) || nz != in.template_frames * bb.pos_template.dim(0)) {
    throw ShapeError("forward_track: token counts do not match the configured crop sizes");
  }
  const std::size_t zt = bb.pos_template.dim(0);
  auto embed = [&](const Tensor<T>& templ, const Tensor<T>& search) {
    return concat(std::vector<Tensor<T>>{patch_embed(templ, bb, bb.pos_template), patch_embed(search, bb, bb.pos_search)},
                  1);
  };
  // V samples then X samples along the batch axis.
  auto h = concat(std::vector<Tensor<T>>{embed(in.templates_v, in.search_v), embed(in.templates_x, in.search_x)}, 0);
  const auto layout_v = stream_layout(Modality::kV, in.template_frames, zt, 1, ns);
  const auto layout_x = stream_layout(Modality::kX, in.template_frames, zt, 1, ns);
  const auto schedule = m.adapter_layers();
  std::size_t next = 0;
  for (std::size_t l = 0; l < bb.blocks.size(); ++l) {
    h = vit_block(h, bb.blocks[l], bb.heads);
    if (next < schedule.size() && schedule[next] == l + 1) {
      const auto g = regroup(TokenBatch<T>{slice(h, 0, 0, B), layout_v}, TokenBatch<T>{slice(h, 0, B, B), layout_x});
      const auto& za = m.adapters[next];
      const auto& sa = m.config.per_group_adapters ? m.search_adapters[next] : za;
      const auto z = stma_forward(g.z, za, opt.training, opt.rng);
      const auto s = stma_forward(g.s, sa, opt.training, opt.rng);
      const auto back = ungroup(z, s);
      h = concat(std::vector<Tensor<T>>{back.v.data, back.x.data}, 0);
      ++next;
    }
  }
  h = layer_norm(h, bb.norm_g, bb.norm_b);
  const auto search = slice(h, 1, nz, ns);
  const TokenBatch<T> sv{slice(search, 0, 0, B), stream_layout(Modality::kV, 0, 0, 1, ns)};
  const TokenBatch<T> sx{slice(search, 0, B, B), stream_layout(Modality::kX, 0, 0, 1, ns)};
  const std::size_t G = m.config.search_grid();
  const auto fused = m.config.use_dmfm ? dmfm_forward(sv, sx, m.dmfm) : mean_fusion(sv, sx, G, G);
  return head_forward(fused, m.head);
}

}  // namespace ubatrack

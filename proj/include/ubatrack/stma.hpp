#pragma once

// Spatio-temporal Mamba adapter: token regrouping across modalities, the
// two pre-norm residual sub-layers (Mamba token mixing, then MultiFFT channel
// mixing), and the even-layer insertion schedule.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ubatrack/mamba_block.hpp"
#include "ubatrack/multifft.hpp"
#include "ubatrack/numerics/numerics.hpp"

namespace ubatrack {

enum class Modality : std::uint8_t { kV = 0, kX = 1 };
enum class Role : std::uint8_t { kTemplate = 0, kSearch = 1 };

struct TokenTag {
  Modality modality = Modality::kV;
  Role role = Role::kTemplate;
  std::uint32_t frame = 0;

  friend bool operator==(const TokenTag&, const TokenTag&) = default;
};

using TokenLayout = std::vector<TokenTag>;

// Layout of one modality stream: template frames (each `template_tokens`
// long, ascending frame index) followed by search frames.
inline TokenLayout stream_layout(Modality modality, std::size_t template_frames, std::size_t template_tokens,
                                 std::size_t search_frames, std::size_t search_tokens) {
  TokenLayout layout;
  layout.reserve(template_frames * template_tokens + search_frames * search_tokens);
  for (std::size_t f = 0; f < template_frames; ++f)
    for (std::size_t i = 0; i < template_tokens; ++i)
      layout.push_back({modality, Role::kTemplate, static_cast<std::uint32_t>(f)});
  for (std::size_t f = 0; f < search_frames; ++f)
    for (std::size_t i = 0; i < search_tokens; ++i)
      layout.push_back({modality, Role::kSearch, static_cast<std::uint32_t>(f)});
  return layout;
}

template <class T>
struct TokenBatch {
  Tensor<T> data;  // (B, L, D)
  TokenLayout layout;

  std::size_t batch() const { return data.dim(0); }
  std::size_t length() const { return data.dim(1); }
  std::size_t channels() const { return data.dim(2); }

  // layout length matches; each (modality, role) run has ascending frames.
  void validate() const {
    if (data.rank() != 3) throw ShapeError("TokenBatch data must be (B,L,D), got " + shape_str(data.shape()));
    if (layout.size() != data.dim(1)) {
      throw ShapeError("TokenBatch layout has " + std::to_string(layout.size()) + " tags for " +
                       std::to_string(data.dim(1)) + " tokens");
    }
    for (int m = 0; m < 2; ++m)
      for (int r = 0; r < 2; ++r) {
        std::optional<std::uint32_t> last;
        for (const auto& tag : layout) {
          if (static_cast<int>(tag.modality) != m || static_cast<int>(tag.role) != r) continue;
          if (last && tag.frame < *last) throw ShapeError("TokenBatch: frame order is not ascending within a run");
          last = tag.frame;
        }
      }
  }
};

namespace detail {

inline bool has_role(const TokenLayout& layout, Role role) {
  return std::any_of(layout.begin(), layout.end(), [role](const TokenTag& t) { return t.role == role; });
}

inline void require_single_modality(const TokenLayout& layout, Modality modality, const char* what) {
  for (const auto& t : layout) {
    if (t.modality != modality) throw ShapeError(std::string(what) + ": token tagged with the wrong modality");
  }
}

// Template tokens first, then search tokens: the only order ungroup rebuilds.
inline void require_templates_first(const TokenLayout& layout, const char* what) {
  bool seen_search = false;
  for (const auto& t : layout) {
    if (t.role == Role::kSearch) seen_search = true;
    else if (seen_search) throw ShapeError(std::string(what) + ": template token after a search token");
  }
}

}  // namespace detail

template <class T>
struct Regrouped {
  TokenBatch<T> z;  // template tokens of both modalities
  TokenBatch<T> s;  // search tokens of both modalities
};

// Scan order inside each group: frames ascending, then modality (V before X),
// then the original raster order.
template <class T>
Regrouped<T> regroup(const TokenBatch<T>& v, const TokenBatch<T>& x) {
  v.validate();
  x.validate();
  if (v.batch() != x.batch() || v.channels() != x.channels()) {
    throw ShapeError("regroup: V " + shape_str(v.data.shape()) + " and X " + shape_str(x.data.shape()) +
                     " differ in batch or channel extent");
  }
  detail::require_single_modality(v.layout, Modality::kV, "regroup (V stream)");
  detail::require_single_modality(x.layout, Modality::kX, "regroup (X stream)");
  for (const auto* layout : {&v.layout, &x.layout}) {
    if (!detail::has_role(*layout, Role::kTemplate) || !detail::has_role(*layout, Role::kSearch)) {
      throw ShapeError("regroup: each modality needs both template and search tokens");
    }
    detail::require_templates_first(*layout, "regroup");
  }
  TokenLayout combined = v.layout;
  combined.insert(combined.end(), x.layout.begin(), x.layout.end());
  auto order_for = [&combined](Role role) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < combined.size(); ++i)
      if (combined[i].role == role) idx.push_back(i);
    std::stable_sort(idx.begin(), idx.end(), [&combined](std::size_t a, std::size_t b) {
      const auto& ta = combined[a];
      const auto& tb = combined[b];
      if (ta.frame != tb.frame) return ta.frame < tb.frame;
      return ta.modality < tb.modality;
    });
    return idx;
  };
  const auto cat = concat(std::vector<Tensor<T>>{v.data, x.data}, 1);
  Regrouped<T> out;
  for (auto [role, group] : {std::pair{Role::kTemplate, &out.z}, std::pair{Role::kSearch, &out.s}}) {
    const auto idx = order_for(role);
    group->data = index_select(cat, 1, idx);
    group->layout.reserve(idx.size());
    for (auto i : idx) group->layout.push_back(combined[i]);
  }
  return out;
}

template <class T>
struct ModalityPair {
  TokenBatch<T> v;
  TokenBatch<T> x;
};

// Inverse of regroup: each modality stream is its template tokens (z order)
// followed by its search tokens (s order).
template <class T>
ModalityPair<T> ungroup(const TokenBatch<T>& z, const TokenBatch<T>& s) {
  z.validate();
  s.validate();
  if (z.batch() != s.batch() || z.channels() != s.channels()) throw ShapeError("ungroup: batch/channel mismatch");
  for (const auto& t : z.layout)
    if (t.role != Role::kTemplate) throw ShapeError("ungroup: search-tagged token in the template group");
  for (const auto& t : s.layout)
    if (t.role != Role::kSearch) throw ShapeError("ungroup: template-tagged token in the search group");
  TokenLayout combined = z.layout;
  combined.insert(combined.end(), s.layout.begin(), s.layout.end());
  const auto cat = concat(std::vector<Tensor<T>>{z.data, s.data}, 1);
  ModalityPair<T> out;
  for (auto [modality, stream] : {std::pair{Modality::kV, &out.v}, std::pair{Modality::kX, &out.x}}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < combined.size(); ++i)
      if (combined[i].modality == modality) idx.push_back(i);
    if (idx.empty()) throw ShapeError("ungroup: input carries a single modality only");
    stream->data = index_select(cat, 1, idx);
    for (auto i : idx) stream->layout.push_back(combined[i]);
  }
  return out;
}

struct StmaConfig {
  std::size_t dim = 32;
  std::size_t expand = 2;
  std::size_t state = 4;
  std::size_t conv_kernel = 4;
  std::size_t fft_blocks = 0;  // 0: default_fft_blocks(dim)
  double dropout = 0.1;
};

template <class T>
struct StmaParams {
  Tensor<T> norm1_g, norm1_b, norm2_g, norm2_b;
  MambaBlockParams<T> mamba;
  MultiFftParams<T> mfft;
  double dropout_rate = 0.1;

  template <class Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(prefix + "norm1.gamma", norm1_g);
    fn(prefix + "norm1.beta", norm1_b);
    fn(prefix + "norm2.gamma", norm2_g);
    fn(prefix + "norm2.beta", norm2_b);
    mamba.visit(prefix + "mamba.", fn);
    mfft.visit(prefix + "mfft.", fn);
  }
};

template <class T>
StmaParams<T> stma_init(const StmaConfig& cfg, std::uint64_t seed) {
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ConfigError("stma: dropout must lie in [0, 1)");
  StmaParams<T> p;
  p.norm1_g = Tensor<T>::full({cfg.dim}, T(1));
  p.norm1_b = Tensor<T>::zeros({cfg.dim});
  p.norm2_g = Tensor<T>::full({cfg.dim}, T(1));
  p.norm2_b = Tensor<T>::zeros({cfg.dim});
  p.mamba = mamba_init<T>(cfg.dim, cfg.expand * cfg.dim, cfg.state, cfg.conv_kernel, seed);
  Rng rng = Rng::keyed(seed, "multifft");
  p.mfft = multifft_init<T>(cfg.dim, cfg.fft_blocks, rng);
  p.dropout_rate = cfg.dropout;
  return p;
}

template <class T>
TokenBatch<T> stma_forward(const TokenBatch<T>& t, const StmaParams<T>& p, bool training, Rng* rng) {
  if (t.channels() != p.norm1_g.numel()) {
    throw ShapeError("stma_forward: token channels " + std::to_string(t.channels()) + " vs adapter " +
                     std::to_string(p.norm1_g.numel()));
  }
  const auto& x = t.data;
  const auto mixed = mamba_forward(layer_norm(x, p.norm1_g, p.norm1_b), p.mamba);
  const auto x1 = add(dropout(mixed, p.dropout_rate, training, rng), x);
  const auto spectral = multifft_forward(layer_norm(x1, p.norm2_g, p.norm2_b), p.mfft);
  const auto x2 = add(dropout(spectral, p.dropout_rate, training, rng), x1);
  return {x2, t.layout};
}

// 1-based backbone layer indices after which an adapter runs: 2, 4, ..., 2k.
inline std::vector<std::size_t> insertion_schedule(std::size_t num_layers, std::size_t blocks) {
  if (blocks > num_layers / 2) {
    throw ConfigError("insertion_schedule: " + std::to_string(blocks) + " adapter blocks exceed " +
                      std::to_string(num_layers / 2) + " even layers of a " + std::to_string(num_layers) +
                      "-layer backbone");
  }
  std::vector<std::size_t> layers;
  for (std::size_t k = 1; k <= blocks; ++k) layers.push_back(2 * k);
  return layers;
}

}  // namespace ubatrack

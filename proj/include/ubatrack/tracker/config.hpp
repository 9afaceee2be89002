#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <type_traits>

#include <nlohmann/json.hpp>

#include "ubatrack/numerics/tensor.hpp"

namespace ubatrack {

struct TrackerConfig {
  std::size_t template_size = 128;
  std::size_t search_size = 256;
  std::size_t patch = 16;
  std::size_t layers = 12;
  std::size_t dim = 32;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 4;
  std::size_t stma_blocks = 6;
  std::size_t templates = 2;  // M of the template schedule
  std::size_t ssm_state = 4;
  std::size_t ssm_expand = 2;
  std::size_t conv_kernel = 4;
  std::size_t fft_blocks = 0;  // 0: largest divisor of the half spectrum <= 4
  bool per_group_adapters = false;
  bool use_dmfm = true;
  std::size_t dmfm_segments = 2;
  double dropout = 0.1;
  double lambda1 = 5.0;
  double lambda2 = 2.0;
  double lr = 2e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  std::size_t template_grid() const { return template_size / patch; }
  std::size_t search_grid() const { return search_size / patch; }

  // Field list shared by JSON reading and writing.
  template <class Self, class Fn>
  static void fields(Self& s, Fn&& f) {
    f("template_size", s.template_size);
    f("search_size", s.search_size);
    f("patch", s.patch);
    f("layers", s.layers);
    f("dim", s.dim);
    f("heads", s.heads);
    f("mlp_ratio", s.mlp_ratio);
    f("stma_blocks", s.stma_blocks);
    f("templates", s.templates);
    f("ssm_state", s.ssm_state);
    f("ssm_expand", s.ssm_expand);
    f("conv_kernel", s.conv_kernel);
    f("fft_blocks", s.fft_blocks);
    f("per_group_adapters", s.per_group_adapters);
    f("use_dmfm", s.use_dmfm);
    f("dmfm_segments", s.dmfm_segments);
    f("dropout", s.dropout);
    f("lambda1", s.lambda1);
    f("lambda2", s.lambda2);
    f("lr", s.lr);
    f("weight_decay", s.weight_decay);
    f("seed", s.seed);
  }

  void validate() const {
    if (patch == 0 || template_size % patch != 0 || search_size % patch != 0) {
      throw ConfigError("template_size and search_size must be divisible by patch");
    }
    if (stma_blocks > 6 || stma_blocks > layers / 2) {
      throw ConfigError("stma_blocks must be <= 6 and <= layers / 2");
    }
    if (heads == 0 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
    if (templates == 0) throw ConfigError("templates must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
  }
};

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch = 4;            // samples per step
  std::size_t train_templates = 3;  // reference frames per sample
  std::size_t train_search = 2;     // search frames per sample
  double lr_decay_at = 2.0 / 3.0;   // fraction of steps before the x0.1 decay
  double search_jitter = 0.0;       // max centre shift, fraction of search_size
  double max_grad_norm = 0.0;       // 0 disables clipping
  std::size_t log_every = 10;

  // Field list shared by JSON reading and writing.
  template <class Self, class Fn>
  static void fields(Self& s, Fn&& f) {
    f("steps", s.steps);
    f("batch", s.batch);
    f("train_templates", s.train_templates);
    f("train_search", s.train_search);
    f("lr_decay_at", s.lr_decay_at);
    f("search_jitter", s.search_jitter);
    f("max_grad_norm", s.max_grad_norm);
    f("log_every", s.log_every);
  }

  void validate() const {
    if (batch == 0 || train_templates == 0 || train_search == 0) {
      throw ConfigError("batch, train_templates and train_search must be positive");
    }
    if (lr_decay_at < 0.0 || lr_decay_at > 1.0) throw ConfigError("lr_decay_at must lie in [0, 1]");
  }
};


template <class Config>
nlohmann::json config_to_json(const Config& c) {
  nlohmann::json j = nlohmann::json::object();
  Config::fields(c, [&j](const char* key, const auto& v) { j[key] = v; });
  return j;
}

// Missing keys keep their defaults; unknown keys and type mismatches raise
// ConfigError.
template <class Config>
Config config_from_json(const nlohmann::json& j, Config c = {}) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::size_t known = 0;
  Config::fields(c, [&](const char* key, auto& v) {
    auto it = j.find(key);
    if (it == j.end()) return;
    ++known;
    try {
      using V = std::decay_t<decltype(v)>;
      if constexpr (std::is_same_v<V, bool>) {
        if (!it->is_boolean()) throw ConfigError("expects a boolean");
      } else if constexpr (std::is_integral_v<V>) {
        if (!it->is_number_integer() || it->template get<long long>() < 0) throw ConfigError("expects a non-negative integer");
      } else {
        if (!it->is_number()) throw ConfigError("expects a number");
      }
      v = it->template get<V>();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  });
  if (known != j.size()) {
    for (auto it = j.begin(); it != j.end(); ++it) {
      bool found = false;
      Config::fields(c, [&](const char* key, auto&) { found = found || it.key() == key; });
      if (!found) throw ConfigError("unknown config key '" + it.key() + "'");
    }
  }
  c.validate();
  return c;
}

}  // namespace ubatrack

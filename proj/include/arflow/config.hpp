#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "arflow/cond_reg.hpp"
#include "arflow/errors.hpp"
#include "arflow/rectified_flow.hpp"
#include "arflow/vfield_net.hpp"

namespace arflow {

struct LossWeights {
  double flow = 1.0;
  double final = 1.0;
  double cons = 0.1;   // 0 disables the consistency term
  double cond = 0.01;  // 0 disables the condition-number penalty

  void validate() const {
    detail::require(flow >= 0 && final >= 0 && cons >= 0 && cond >= 0, "LossWeights: weights must be >= 0");
  }
};

struct TrainConfig {
  double learning_rate = 2e-4;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  double ema_decay = 0.999;
  std::size_t epochs = 1;
  std::size_t steps = 0;  // overrides epochs when nonzero
  std::size_t batch_size = 4;
  std::size_t crop_size = 48;
  std::uint64_t seed = 0;
  double flip_h = 0.5;
  double flip_v = 0.5;
  std::size_t tau_min = 4;
  bool sample_scale = false;  // one random scale per step instead of all of them
  std::size_t down = 1;       // resolution control used by the final-supervision pass
  double alpha = 1.0;
  std::size_t log_every = 50;
  std::size_t save_every = 0;

  LossWeights weights;
  NetConfig net;
  AttentionConfig attn;

  void validate() const {
    weights.validate();
    attn.validate();
    detail::require(learning_rate > 0, "TrainConfig: learning_rate must be positive");
    detail::require(weight_decay >= 0, "TrainConfig: weight_decay must be >= 0");
    detail::require(clip_norm > 0, "TrainConfig: clip_norm must be positive");
    detail::require(ema_decay >= 0 && ema_decay < 1, "TrainConfig: ema_decay must be in [0, 1)");
    detail::require(batch_size >= 1, "TrainConfig: batch_size must be >= 1");
    detail::require(tau_min >= 1, "TrainConfig: tau_min must be >= 1");
    detail::require(crop_size >= 2 * tau_min, "TrainConfig: crop_size must be >= 2 * tau_min");
    detail::require(flip_h >= 0 && flip_h <= 1 && flip_v >= 0 && flip_v <= 1,
                    "TrainConfig: flip probabilities must be in [0, 1]");
    detail::require(down >= 1, "TrainConfig: down must be >= 1");
    detail::require(alpha >= 0 && alpha <= 2, "TrainConfig: alpha must be in [0, 2]");
  }
};

struct InferenceConfig {
  std::size_t down = 1;
  double alpha = 1.0;
  std::vector<int> schedule = default_schedule();
  std::size_t tau_min = 4;
  std::uint64_t seed = 0;
  bool ema_weights = true;
  std::size_t max_pixels = std::size_t{1} << 22;  // working-resolution limit

  void validate() const {
    detail::require(down >= 1, "InferenceConfig: down must be >= 1");
    detail::require(alpha >= 0 && alpha <= 2, "InferenceConfig: alpha must be in [0, 2]");
    detail::require(tau_min >= 1, "InferenceConfig: tau_min must be >= 1");
    detail::require(!schedule.empty(), "InferenceConfig: empty schedule");
    for (int n : schedule) detail::require(n >= 1, "InferenceConfig: step counts must be >= 1");
  }
};

/// d = 2 once the shorter side reaches 2160, else 1.
inline std::size_t suggested_down(std::size_t height, std::size_t width) {
  return std::min(height, width) >= 2160 ? 2 : 1;
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, v);
  if (ec != std::errc() || ptr != end) throw ContractError("config: bad value '" + text + "' for " + key);
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ContractError("config: bad boolean '" + text + "' for " + key);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

/// "4,2,1" -> {4, 2, 1}
inline std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(detail::parse_number<int>(key, detail::trim(item)));
  if (out.empty()) throw ContractError("config: empty list for " + key);
  return out;
}

inline std::string format_int_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

/// Flat `key = value` text; `#` starts a comment. Later keys win.
inline std::map<std::string, std::string> parse_key_values(std::istream& in, const std::string& source) {
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ContractError(source + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = detail::trim(t.substr(0, eq));
    if (key.empty()) throw ContractError(source + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = detail::trim(t.substr(eq + 1));
  }
  return kv;
}

namespace detail {

template <typename Cfg>
using Field = std::pair<std::function<void(Cfg&, const std::string&)>, std::function<std::string(const Cfg&)>>;

template <typename Cfg, typename M>
Field<Cfg> number_field(M Cfg::*member, const std::string& key) {
  return {[member, key](Cfg& c, const std::string& v) { c.*member = parse_number<M>(key, v); },
          [member](const Cfg& c) {
            if constexpr (std::is_floating_point_v<M>) return format_double(c.*member);
            else return std::to_string(c.*member);
          }};
}

template <typename Cfg, typename Sub, typename M>
Field<Cfg> nested_field(Sub Cfg::*sub, M Sub::*member, const std::string& key) {
  return {[sub, member, key](Cfg& c, const std::string& v) { (c.*sub).*member = parse_number<M>(key, v); },
          [sub, member](const Cfg& c) {
            if constexpr (std::is_floating_point_v<M>) return format_double((c.*sub).*member);
            else return std::to_string((c.*sub).*member);
          }};
}

inline const std::map<std::string, Field<TrainConfig>>& train_fields() {
  using C = TrainConfig;
  static const std::map<std::string, Field<C>> f{
      {"learning_rate", number_field(&C::learning_rate, "learning_rate")},
      {"weight_decay", number_field(&C::weight_decay, "weight_decay")},
      {"beta1", number_field(&C::beta1, "beta1")},
      {"beta2", number_field(&C::beta2, "beta2")},
      {"adam_eps", number_field(&C::adam_eps, "adam_eps")},
      {"clip_norm", number_field(&C::clip_norm, "clip_norm")},
      {"ema_decay", number_field(&C::ema_decay, "ema_decay")},
      {"epochs", number_field(&C::epochs, "epochs")},
      {"steps", number_field(&C::steps, "steps")},
      {"batch_size", number_field(&C::batch_size, "batch_size")},
      {"crop_size", number_field(&C::crop_size, "crop_size")},
      {"seed", number_field(&C::seed, "seed")},
      {"flip_h", number_field(&C::flip_h, "flip_h")},
      {"flip_v", number_field(&C::flip_v, "flip_v")},
      {"tau_min", number_field(&C::tau_min, "tau_min")},
      {"sample_scale",
       {[](C& c, const std::string& v) { c.sample_scale = parse_bool("sample_scale", v); },
        [](const C& c) { return std::string(c.sample_scale ? "true" : "false"); }}},
      {"down", number_field(&C::down, "down")},
      {"alpha", number_field(&C::alpha, "alpha")},
      {"log_every", number_field(&C::log_every, "log_every")},
      {"save_every", number_field(&C::save_every, "save_every")},
      {"w_flow", nested_field(&C::weights, &LossWeights::flow, "w_flow")},
      {"w_final", nested_field(&C::weights, &LossWeights::final, "w_final")},
      {"w_cons", nested_field(&C::weights, &LossWeights::cons, "w_cons")},
      {"w_cond", nested_field(&C::weights, &LossWeights::cond, "w_cond")},
      {"width", nested_field(&C::net, &NetConfig::width, "width")},
      {"num_blocks", nested_field(&C::net, &NetConfig::num_blocks, "num_blocks")},
      {"embed_dim", nested_field(&C::net, &NetConfig::embed_dim, "embed_dim")},
      {"freq_bands", nested_field(&C::net, &NetConfig::freq_bands, "freq_bands")},
      {"init_seed", nested_field(&C::net, &NetConfig::init_seed, "init_seed")},
      {"cond_grid", nested_field(&C::attn, &AttentionConfig::grid, "cond_grid")},
      {"cond_temp", nested_field(&C::attn, &AttentionConfig::temp, "cond_temp")},
      {"cond_eps_norm", nested_field(&C::attn, &AttentionConfig::eps_norm, "cond_eps_norm")},
      {"cond_eps_diag", nested_field(&C::attn, &AttentionConfig::eps_diag, "cond_eps_diag")},
      {"kappa_thr", nested_field(&C::attn, &AttentionConfig::kappa_thr, "kappa_thr")},
      {"cond_max_images", nested_field(&C::attn, &AttentionConfig::max_images, "cond_max_images")},
  };
  return f;
}

inline const std::map<std::string, Field<InferenceConfig>>& inference_fields() {
  using C = InferenceConfig;
  static const std::map<std::string, Field<C>> f{
      {"down", number_field(&C::down, "down")},
      {"alpha", number_field(&C::alpha, "alpha")},
      {"schedule",
       {[](C& c, const std::string& v) { c.schedule = parse_int_list("schedule", v); },
        [](const C& c) { return format_int_list(c.schedule); }}},
      {"tau_min", number_field(&C::tau_min, "tau_min")},
      {"seed", number_field(&C::seed, "seed")},
      {"ema_weights",
       {[](C& c, const std::string& v) { c.ema_weights = parse_bool("ema_weights", v); },
        [](const C& c) { return std::string(c.ema_weights ? "true" : "false"); }}},
      {"max_pixels", number_field(&C::max_pixels, "max_pixels")},
  };
  return f;
}

template <typename Cfg>
Cfg apply_fields(const std::map<std::string, Field<Cfg>>& fields, const std::map<std::string, std::string>& kv,
                 const std::string& source) {
  Cfg cfg;
  for (const auto& [key, value] : kv) {
    auto it = fields.find(key);
    if (it == fields.end()) throw ContractError(source + ": unknown config key '" + key + "'");
    it->second.first(cfg, value);
  }
  cfg.validate();
  return cfg;
}

template <typename Cfg>
std::string fields_to_text(const std::map<std::string, Field<Cfg>>& fields, const Cfg& cfg) {
  std::string out;
  for (const auto& [key, f] : fields) out += key + " = " + f.second(cfg) + "\n";
  return out;
}

}  // namespace detail

inline TrainConfig parse_train_config(const std::string& text, const std::string& source = "config") {
  std::istringstream in(text);
  return detail::apply_fields(detail::train_fields(), parse_key_values(in, source), source);
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path.string() + ": cannot open config");
  return detail::apply_fields(detail::train_fields(), parse_key_values(in, path.string()), path.string());
}

inline std::string to_text(const TrainConfig& cfg) { return detail::fields_to_text(detail::train_fields(), cfg); }

inline InferenceConfig parse_inference_config(const std::string& text, const std::string& source = "config") {
  std::istringstream in(text);
  return detail::apply_fields(detail::inference_fields(), parse_key_values(in, source), source);
}

inline std::string to_text(const InferenceConfig& cfg) {
  return detail::fields_to_text(detail::inference_fields(), cfg);
}

}  // namespace arflow

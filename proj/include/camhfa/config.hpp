#pragma once

// Plain-text run configuration: one `key = value` per line, '#' starts a comment.
// Unknown or repeated keys are rejected; parsing yields a complete config or throws.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>

#include "camhfa/binary_io.hpp"
#include "camhfa/error.hpp"
#include "camhfa/synth.hpp"
#include "camhfa/train.hpp"

namespace camhfa {

struct RunConfig {
  SynthSpec synth;
  TrainConfig train;
  std::uint64_t check_seed = 1;
  std::size_t check_instances = 100;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <class T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  if constexpr (std::is_unsigned_v<T>) {
    if (!value.empty() && value[0] == '-') throw ConfigError(key + ": expected a non-negative integer");
  }
  in >> out;
  if (!in || !in.eof()) throw ConfigError(key + ": cannot parse '" + value + "'");
  return out;
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  SynthSpec& s = cfg.synth;
  TrainConfig& t = cfg.train;
  bool snr_given = false;

  using Setter = std::function<void(const std::string& key, const std::string& value)>;
  auto sz = [](std::size_t& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) {
      field = detail::parse_number<std::size_t>(k, v);
    };
  };
  auto u64 = [](std::uint64_t& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) {
      field = detail::parse_number<std::uint64_t>(k, v);
    };
  };
  auto real = [](double& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) {
      field = detail::parse_number<double>(k, v);
    };
  };

  const std::map<std::string, Setter, std::less<>> setters = {
      {"num_speakers", sz(s.num_speakers)},
      {"utts_per_speaker", sz(s.utts_per_speaker)},
      {"frames", sz(s.frames)},
      {"feature_dim", sz(s.feature_dim)},
      {"num_layers", sz(s.num_layers)},
      {"speaker_snr_per_layer",
       [&](const std::string& k, const std::string& v) {
         s.speaker_snr_per_layer.clear();
         std::istringstream in(v);
         for (std::string item; std::getline(in, item, ',');) {
           s.speaker_snr_per_layer.push_back(detail::parse_number<double>(k, detail::trim(item)));
         }
         snr_given = true;
       }},
      {"context_cue_period", sz(s.context_cue_period)},
      {"noise_sigma", real(s.noise_sigma)},
      {"data_seed", u64(s.seed)},
      {"heads", sz(t.heads)},
      {"context", sz(t.context)},
      {"compressed_dim", sz(t.compressed_dim)},
      {"embed_dim", sz(t.embed_dim)},
      {"margin", real(t.margin)},
      {"scale", real(t.scale)},
      {"margin_type",
       [&](const std::string&, const std::string& v) { t.margin_type = parse_margin_type(v); }},
      {"lr_start", real(t.lr_start)},
      {"lr_end", real(t.lr_end)},
      {"lr_decay",
       [&](const std::string& k, const std::string& v) {
         if (v == "exponential") {
           t.lr_decay = LrDecay::kExponential;
         } else if (v == "linear") {
           t.lr_decay = LrDecay::kLinear;
         } else {
           throw ConfigError(k + ": expected exponential or linear, got '" + v + "'");
         }
       }},
      {"epochs", sz(t.epochs)},
      {"batch_size", sz(t.batch_size)},
      {"weight_decay", real(t.weight_decay)},
      {"grad_scale_backbone", real(t.grad_scale_backbone)},
      {"train_seed", u64(t.seed)},
      {"check_seed", u64(cfg.check_seed)},
      {"check_instances", sz(cfg.check_instances)},
  };

  std::set<std::string, std::less<>> seen;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    const auto it = setters.find(key);
    if (it == setters.end()) {
      throw ConfigError("line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
    if (!seen.insert(key).second) {
      throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    if (value.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty value for '" + key + "'");
    it->second(key, value);
  }
  if (!snr_given) s.speaker_snr_per_layer = default_snr(s.num_layers);
  s.validate();
  t.validate();
  if (cfg.check_instances == 0) throw ConfigError("check_instances must be positive");
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(io::read_file(path));
}

}  // namespace camhfa

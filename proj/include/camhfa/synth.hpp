#pragma once

// Synthetic stand-in for frozen layer-wise encoder outputs.
//
// Speaker s owns a fixed identity vector u_s ~ N(0, I_F). Layer n of an utterance is
//   z_n[t] = snr[n] * m(t) * u_s + sigma * noise_n[t],   m(t) = (1 + sin(2 pi t / P)) / 2
// with independent standard-normal noise per layer and frame. The modulation leaves some
// frames nearly signal-free, so scoring a frame together with its neighbours separates
// informative frames from noise better than scoring it alone.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "camhfa/binary_io.hpp"
#include "camhfa/error.hpp"
#include "camhfa/pooling.hpp"
#include "camhfa/tensor.hpp"

namespace camhfa {

/// Descending per-layer speaker SNR from 1.0 at layer 0 down to 0.2 at layer N.
inline std::vector<double> default_snr(std::size_t num_layers) {
  std::vector<double> snr(num_layers + 1, 1.0);
  for (std::size_t n = 1; n <= num_layers; ++n) {
    snr[n] = 1.0 - 0.8 * static_cast<double>(n) / static_cast<double>(num_layers);
  }
  return snr;
}

struct SynthSpec {
  std::size_t num_speakers = 20;
  std::size_t utts_per_speaker = 30;
  std::size_t frames = 50;
  std::size_t feature_dim = 16;
  std::size_t num_layers = 4;  // N; the stack holds N + 1 layers
  std::vector<double> speaker_snr_per_layer = default_snr(4);
  std::size_t context_cue_period = 5;
  double noise_sigma = 1.0;
  std::uint64_t seed = 42;

  void validate() const {
    if (num_speakers == 0 || utts_per_speaker == 0 || frames == 0 || feature_dim == 0) {
      throw ConfigError("synthetic data counts must be positive");
    }
    if (speaker_snr_per_layer.size() != num_layers + 1) {
      throw ConfigError("speaker_snr_per_layer needs " + std::to_string(num_layers + 1) +
                        " entries, got " + std::to_string(speaker_snr_per_layer.size()));
    }
    if (context_cue_period == 0) throw ConfigError("context_cue_period must be >= 1");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
    if (num_speakers > UINT32_MAX) throw ConfigError("too many speakers");
  }

  friend bool operator==(const SynthSpec&, const SynthSpec&) = default;
};

struct LabeledUtterance {
  LayerwiseFeatures features;
  std::uint32_t speaker_id = 0;
  std::string utterance_id;

  friend bool operator==(const LabeledUtterance&, const LabeledUtterance&) = default;
};

inline std::string utterance_name(std::size_t speaker, std::size_t index) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "spk%03zu-utt%03zu", speaker, index);
  return buf;
}

/// Identity vectors, one row per speaker.
inline Tensor speaker_identities(const SynthSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor ids({spec.num_speakers, spec.feature_dim});
  for (double& v : ids.data()) v = normal(rng);
  return ids;
}

inline double cue_amplitude(std::size_t frame, std::size_t period) {
  return 0.5 * (1.0 + std::sin(2.0 * std::numbers::pi * static_cast<double>(frame) /
                               static_cast<double>(period)));
}

/// Utterances [first, first + count) of every speaker. Each utterance's noise stream depends
/// only on (seed, speaker, index), so a larger request extends a smaller one.
inline std::vector<LabeledUtterance> generate_utterances(const SynthSpec& spec, std::size_t first,
                                                         std::size_t count) {
  const Tensor ids = speaker_identities(spec);
  std::vector<LabeledUtterance> out;
  out.reserve(spec.num_speakers * count);
  for (std::size_t s = 0; s < spec.num_speakers; ++s) {
    for (std::size_t u = first; u < first + count; ++u) {
      std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                        static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(u), 0x5eedu};
      std::mt19937_64 rng(seq);
      std::normal_distribution<double> normal(0.0, 1.0);
      std::vector<Tensor> layers;
      layers.reserve(spec.num_layers + 1);
      for (std::size_t n = 0; n <= spec.num_layers; ++n) {
        Tensor z({spec.frames, spec.feature_dim});
        for (std::size_t t = 0; t < spec.frames; ++t) {
          const double amp =
              spec.speaker_snr_per_layer[n] * cue_amplitude(t, spec.context_cue_period);
          for (std::size_t f = 0; f < spec.feature_dim; ++f) {
            z(t, f) = amp * ids(s, f) + spec.noise_sigma * normal(rng);
          }
        }
        layers.push_back(std::move(z));
      }
      out.push_back({LayerwiseFeatures(std::move(layers)), static_cast<std::uint32_t>(s),
                     utterance_name(s, u)});
    }
  }
  return out;
}

inline std::vector<LabeledUtterance> generate_dataset(const SynthSpec& spec) {
  return generate_utterances(spec, 0, spec.utts_per_speaker);
}

// Feature file, little-endian:
//   "CMHF" | u32 version=1 | u32 count |
//   count x { u16 id_len | id bytes | u32 speaker | u32 layers | u32 T | u32 F | f64 values }
inline constexpr std::string_view kFeatureMagic = "CMHF";
inline constexpr std::uint32_t kFeatureVersion = 1;

inline std::string encode_features(const std::vector<LabeledUtterance>& utts) {
  io::ByteWriter w;
  w.bytes(kFeatureMagic);
  w.u32(kFeatureVersion);
  if (utts.size() > UINT32_MAX) throw ContractError("too many utterances for the feature format");
  w.u32(static_cast<std::uint32_t>(utts.size()));
  for (const auto& u : utts) {
    if (u.utterance_id.size() > UINT16_MAX) throw ContractError("utterance id too long");
    w.u16(static_cast<std::uint16_t>(u.utterance_id.size()));
    w.bytes(u.utterance_id);
    w.u32(u.speaker_id);
    w.u32(static_cast<std::uint32_t>(u.features.num_layers()));
    w.u32(static_cast<std::uint32_t>(u.features.frames()));
    w.u32(static_cast<std::uint32_t>(u.features.feature_dim()));
    for (const Tensor& layer : u.features.layers()) w.f64s(layer.data());
  }
  return w.buffer();
}

inline std::vector<LabeledUtterance> decode_features(std::string_view bytes) {
  io::ByteReader r(bytes);
  if (r.bytes(4, "magic") != kFeatureMagic) {
    throw ParseError("bad magic: not a feature file", 0);
  }
  const std::uint32_t version = r.u32("version");
  if (version != kFeatureVersion) {
    throw ParseError("unsupported feature file version " + std::to_string(version), 4);
  }
  const std::uint32_t count = r.u32("utterance count");
  std::vector<LabeledUtterance> utts;
  for (std::uint32_t i = 0; i < count; ++i) {
    LabeledUtterance u;
    const std::uint16_t len = r.u16("utterance id length");
    u.utterance_id = std::string(r.bytes(len, "utterance id"));
    u.speaker_id = r.u32("speaker id");
    const std::uint64_t header_at = r.offset();
    const std::uint32_t layers = r.u32("layer count");
    const std::uint32_t frames = r.u32("frame count");
    const std::uint32_t dim = r.u32("feature dim");
    if (layers == 0 || frames == 0 || dim == 0) {
      throw ParseError("utterance '" + u.utterance_id + "' has an empty dimension", header_at);
    }
    const std::uint64_t total = std::uint64_t{layers} * frames * dim;
    if ((bytes.size() - r.offset()) / 8 < total) {
      throw ParseError("truncated payload in utterance '" + u.utterance_id + "'", r.offset());
    }
    std::vector<Tensor> z;
    z.reserve(layers);
    for (std::uint32_t n = 0; n < layers; ++n) {
      Tensor t({frames, dim});
      r.f64s(t.data(), "feature values");
      z.push_back(std::move(t));
    }
    u.features = LayerwiseFeatures(std::move(z));
    utts.push_back(std::move(u));
  }
  if (!r.at_end()) r.fail("trailing bytes after last utterance");
  return utts;
}

inline void write_features(const std::filesystem::path& path,
                           const std::vector<LabeledUtterance>& utts) {
  io::write_file(path, encode_features(utts));
}

inline std::vector<LabeledUtterance> read_features(const std::filesystem::path& path) {
  return decode_features(io::read_file(path));
}

}  // namespace camhfa

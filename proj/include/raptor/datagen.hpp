#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "raptor/model.hpp"

namespace raptor {

// Synthetic layer stacks with a planted artifact: spoof utterances carry a
// fixed per-layer pattern on `artifact_layers` (1-based), scaled by
// artifact_gain * class_separation. Augmented views add Gaussian jitter.
struct SynthSpec {
  std::size_t L = 12;
  std::size_t T = 200;
  std::size_t D = 32;
  std::vector<std::size_t> artifact_layers{6, 7, 8, 9};
  double artifact_gain = 1.0;
  double class_separation = 1.0;
  double jitter_scale = 0.5;
  std::uint64_t seed = 0;

  void validate() const;
};

// Any view id: 0 is clean, k >= 1 is the k-th jittered copy.
LayerStack synth_view(const SynthSpec& spec, std::uint64_t utt_index, Label label,
                      std::uint32_t view);

// (clean, augmented view 1)
std::pair<LayerStack, LayerStack> synth_utterance(const SynthSpec& spec, std::uint64_t utt_index,
                                                  Label label);

// RSF1 feature file: little-endian; magic, u32 L/T/D, u8 label, u8 view,
// u16 reserved, length-prefixed utt and dataset ids, f32 payload.
void write_features(const LayerStack& stack, const std::filesystem::path& path);
LayerStack read_features(const std::filesystem::path& path);

std::vector<char> encode_features(const LayerStack& stack);
LayerStack decode_features(const std::vector<char>& bytes);

struct ManifestEntry {
  std::string path;
  std::string utt;
  std::string dataset;
  Label label = Label::Unlabeled;
  std::uint32_t view = 0;
  std::string fingerprint;  // empty when absent
};

// JSON Lines. Relative paths are resolved against the manifest's directory on
// read.
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

}  // namespace raptor

#pragma once

// Pairwise-gated hierarchical layer fusion detector.
//
// Level 0 fuses adjacent layer pairs (1,2), (3,4), ... with a per-frame
// two-way softmax gate; every later level applies the same gate to adjacent
// outputs of the previous level until a single per-frame vector remains. An
// additive attention pool reduces that sequence to one utterance vector and a
// linear head produces the spoof logit.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "raptor/numerics.hpp"

namespace raptor {

enum class Label : std::uint8_t { BonaFide = 0, Spoof = 1, Unlabeled = 255 };

struct LayerStack {
  std::string utt_id;
  std::string dataset_id;
  Label label = Label::Unlabeled;
  std::uint32_t view_id = 0;  // 0 = clean, k >= 1 = augmented view k
  std::size_t L = 0;
  std::size_t T = 0;
  std::size_t D = 0;
  std::vector<double> features;  // (layer, frame, dim)

  LayerStack() = default;
  LayerStack(std::size_t layers, std::size_t frames, std::size_t dim)
      : L(layers), T(frames), D(dim), features(layers * frames * dim, 0.0) {}

  std::span<const double> frame(std::size_t layer, std::size_t t) const {
    return {features.data() + (layer * T + t) * D, D};
  }
  std::span<double> frame(std::size_t layer, std::size_t t) {
    return {features.data() + (layer * T + t) * D, D};
  }

  // Throws InvalidArgument if dims or feature count are inconsistent.
  void validate() const;

  friend bool operator==(const LayerStack&, const LayerStack&) = default;
};

// Slots 0..L-1 are the input layers; gate g writes slot L + g.
struct GateNode {
  std::size_t level = 0;
  std::size_t index = 0;  // position within its level
  std::size_t in_a = 0;
  std::size_t in_b = 0;
  std::size_t out = 0;

  friend bool operator==(const GateNode&, const GateNode&) = default;
};

struct FusionLevel {
  std::vector<std::size_t> gates;         // indices into ModelTopology::gates
  std::vector<std::size_t> pass_through;  // slots carried unfused to the next level

  friend bool operator==(const FusionLevel&, const FusionLevel&) = default;
};

struct ModelTopology {
  std::size_t L = 0;
  std::size_t D = 0;
  std::vector<FusionLevel> levels;
  std::vector<GateNode> gates;  // creation order == topological order
  std::size_t final_slot = 0;

  std::size_t num_gates() const noexcept { return gates.size(); }
  std::size_t num_slots() const noexcept { return L + gates.size(); }

  friend bool operator==(const ModelTopology&, const ModelTopology&) = default;
};

ModelTopology build_topology(std::size_t L, std::size_t D);

// Offsets of each parameter block inside the flat parameter (and gradient)
// vector. Per gate: weight 2 x 2D (row-major), bias 2. Then attention
// projection D x D, attention bias D, context D, classifier weight D, bias 1.
struct ParamLayout {
  std::size_t D = 0;
  std::size_t num_gates = 0;

  explicit ParamLayout(const ModelTopology& topo) : D(topo.D), num_gates(topo.num_gates()) {}

  std::size_t gate_block() const noexcept { return 4 * D + 2; }
  std::size_t gate_weight(std::size_t g) const noexcept { return g * gate_block(); }
  std::size_t gate_bias(std::size_t g) const noexcept { return g * gate_block() + 4 * D; }
  std::size_t attn_proj() const noexcept { return num_gates * gate_block(); }
  std::size_t attn_bias() const noexcept { return attn_proj() + D * D; }
  std::size_t attn_context() const noexcept { return attn_bias() + D; }
  std::size_t cls_weight() const noexcept { return attn_context() + D; }
  std::size_t cls_bias() const noexcept { return cls_weight() + D; }
  std::size_t total() const noexcept { return cls_bias() + 1; }
};

struct ModelParams {
  ModelTopology topology;
  std::vector<double> values;

  ParamLayout layout() const { return ParamLayout(topology); }

  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Xavier-uniform weights, zero biases; deterministic in seed.
ModelParams init_params(const ModelTopology& topology, std::uint64_t seed);

struct FusionTrace {
  std::vector<std::pair<std::size_t, std::size_t>> gate_ids;  // (level, index) per gate
  std::vector<std::vector<Simplex2>> gates;                   // [gate][frame]
  std::vector<double> attention;                              // [frame]
  std::vector<double> utterance;                              // pooled vector, D
  double logit = 0.0;
  double posterior = 0.5;

  // Retained only when forward() is asked to keep intermediates.
  std::vector<Matrix> fused;  // [gate] -> T x D
  Matrix attn_hidden;         // tanh(Wa h + ba), T x D

  std::size_t frames() const noexcept { return attention.size(); }
};

FusionTrace forward(const LayerStack& stack, const ModelParams& params,
                    bool keep_intermediates = false);

struct ClassWeights {
  double bona_fide = 1.0;
  double spoof = 1.0;

  double operator[](Label y) const { return y == Label::Spoof ? spoof : bona_fide; }
};

struct LossBreakdown {
  double total = 0.0;
  double cls = 0.0;
  double cons = 0.0;
  double lambda = 0.0;
};

LossBreakdown loss(const FusionTrace& clean, const FusionTrace& aug, Label label, double lambda,
                   const ClassWeights& weights);

// Total loss and its exact gradient w.r.t. every entry of params.values.
std::pair<LossBreakdown, std::vector<double>> loss_and_grad(const LayerStack& clean,
                                                            const LayerStack& aug, Label label,
                                                            const ModelParams& params,
                                                            double lambda,
                                                            const ClassWeights& weights);

// Mean JS divergence between corresponding gate rows of two traces.
double mean_gate_js(const FusionTrace& a, const FusionTrace& b);

struct GateMapRow {
  std::size_t level = 0;
  std::size_t gate = 0;
  std::size_t frame = 0;
  double alpha1 = 0.5;
};

std::vector<GateMapRow> export_gate_maps(const FusionTrace& trace);

// CSV with header `level,gate,frame,alpha1`, alpha1 at 9 significant digits.
void write_gate_map_csv(const std::vector<GateMapRow>& rows, const std::filesystem::path& path);
std::vector<GateMapRow> read_gate_map_csv(const std::filesystem::path& path);

}  // namespace raptor

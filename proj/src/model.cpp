#include "raptor/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "raptor/rng.hpp"

namespace raptor {

namespace {

std::string gate_name(const GateNode& g) {
  return "gate (level " + std::to_string(g.level) + ", index " + std::to_string(g.index) + ")";
}

void check_dims(const LayerStack& stack, const ModelTopology& topo) {
  stack.validate();
  if (stack.L != topo.L || stack.D != topo.D)
    throw InvalidArgument("forward: stack " + stack.utt_id + " has L=" + std::to_string(stack.L) +
                          ", D=" + std::to_string(stack.D) + " but the model expects L=" +
                          std::to_string(topo.L) + ", D=" + std::to_string(topo.D));
}

// Read access to any slot (input layer or gate output) at a frame.
struct SlotView {
  const LayerStack& stack;
  const std::vector<Matrix>& fused;

  std::span<const double> operator()(std::size_t slot, std::size_t t) const {
    if (slot < stack.L) return stack.frame(slot, t);
    return fused[slot - stack.L].row(t);
  }
};

}  // namespace

void LayerStack::validate() const {
  if (L < 2) throw InvalidArgument("layer stack " + utt_id + ": need at least 2 layers");
  if (T < 1 || D < 1) throw InvalidArgument("layer stack " + utt_id + ": T and D must be positive");
  if (features.size() != L * T * D)
    throw InvalidArgument("layer stack " + utt_id + ": feature count " +
                          std::to_string(features.size()) + " != L*T*D");
}

ModelTopology build_topology(std::size_t L, std::size_t D) {
  if (L < 2) throw InvalidArgument("build_topology: need L >= 2, got " + std::to_string(L));
  if (D < 1) throw InvalidArgument("build_topology: need D >= 1");

  ModelTopology topo;
  topo.L = L;
  topo.D = D;
  std::vector<std::size_t> slots(L);
  for (std::size_t i = 0; i < L; ++i) slots[i] = i;

  while (slots.size() > 1) {
    FusionLevel level;
    std::vector<std::size_t> next;
    const std::size_t lvl = topo.levels.size();
    for (std::size_t i = 0; i + 1 < slots.size(); i += 2) {
      GateNode g;
      g.level = lvl;
      g.index = level.gates.size();
      g.in_a = slots[i];
      g.in_b = slots[i + 1];
      g.out = L + topo.gates.size();
      level.gates.push_back(topo.gates.size());
      topo.gates.push_back(g);
      next.push_back(g.out);
    }
    if (slots.size() % 2 == 1) {
      level.pass_through.push_back(slots.back());
      next.push_back(slots.back());
    }
    topo.levels.push_back(std::move(level));
    slots = std::move(next);
  }
  topo.final_slot = slots.front();
  return topo;
}

ModelParams init_params(const ModelTopology& topology, std::uint64_t seed) {
  ModelParams params;
  params.topology = topology;
  const ParamLayout lay(topology);
  const std::size_t D = topology.D;
  params.values.assign(lay.total(), 0.0);
  auto& v = params.values;

  Rng rng(hash_keys({seed, 0x7061'7261'6d73ull}));
  auto fill = [&](std::size_t offset, std::size_t count, double fan_in, double fan_out) {
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    for (std::size_t i = 0; i < count; ++i) v[offset + i] = rng.uniform(-a, a);
  };
  for (std::size_t g = 0; g < topology.num_gates(); ++g)
    fill(lay.gate_weight(g), 4 * D, 2.0 * D, 2.0);
  fill(lay.attn_proj(), D * D, D, D);
  fill(lay.attn_context(), D, D, 1.0);
  fill(lay.cls_weight(), D, D, 1.0);
  return params;
}

FusionTrace forward(const LayerStack& stack, const ModelParams& params, bool keep_intermediates) {
  const ModelTopology& topo = params.topology;
  check_dims(stack, topo);
  const ParamLayout lay(topo);
  if (params.values.size() != lay.total())
    throw InvalidArgument("forward: parameter vector has wrong length");

  const std::size_t T = stack.T;
  const std::size_t D = stack.D;
  const double* p = params.values.data();

  FusionTrace tr;
  tr.gate_ids.reserve(topo.num_gates());
  tr.gates.assign(topo.num_gates(), std::vector<Simplex2>(T));
  std::vector<Matrix> fused(topo.num_gates());
  const SlotView slot{stack, fused};

  for (std::size_t gi = 0; gi < topo.num_gates(); ++gi) {
    const GateNode& g = topo.gates[gi];
    tr.gate_ids.emplace_back(g.level, g.index);
    const double* w1 = p + lay.gate_weight(gi);
    const double* w2 = w1 + 2 * D;
    const double* b = p + lay.gate_bias(gi);
    Matrix out(T, D);
    for (std::size_t t = 0; t < T; ++t) {
      const auto ha = slot(g.in_a, t);
      const auto hb = slot(g.in_b, t);
      double z1 = b[0];
      double z2 = b[1];
      for (std::size_t d = 0; d < D; ++d) {
        z1 += w1[d] * ha[d] + w1[D + d] * hb[d];
        z2 += w2[d] * ha[d] + w2[D + d] * hb[d];
      }
      if (!std::isfinite(z1) || !std::isfinite(z2))
        throw NumericFault("forward: non-finite activation at " + gate_name(g) + ", frame " +
                           std::to_string(t) + " of " + stack.utt_id);
      const Simplex2 alpha = softmax2(z1, z2);
      tr.gates[gi][t] = alpha;
      auto o = out.row(t);
      for (std::size_t d = 0; d < D; ++d) o[d] = alpha.p1 * ha[d] + alpha.p2 * hb[d];
    }
    fused[gi] = std::move(out);
  }

  // Additive attention pool over frames.
  const double* wa = p + lay.attn_proj();
  const double* ba = p + lay.attn_bias();
  const double* ctx = p + lay.attn_context();
  Matrix hidden(T, D);
  std::vector<double> energy(T);
  for (std::size_t t = 0; t < T; ++t) {
    const auto h = slot(topo.final_slot, t);
    auto u = hidden.row(t);
    double e = 0.0;
    for (std::size_t i = 0; i < D; ++i) {
      double acc = ba[i];
      const double* wrow = wa + i * D;
      for (std::size_t d = 0; d < D; ++d) acc += wrow[d] * h[d];
      u[i] = std::tanh(acc);
      e += ctx[i] * u[i];
    }
    if (!std::isfinite(e))
      throw NumericFault("forward: non-finite attention energy at frame " + std::to_string(t) +
                         " of " + stack.utt_id);
    energy[t] = e;
  }
  tr.attention = softmax(energy);

  tr.utterance.assign(D, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const auto h = slot(topo.final_slot, t);
    const double a = tr.attention[t];
    for (std::size_t d = 0; d < D; ++d) tr.utterance[d] += a * h[d];
  }
  tr.logit = p[lay.cls_bias()] + dot({p + lay.cls_weight(), D}, tr.utterance);
  if (!std::isfinite(tr.logit))
    throw NumericFault("forward: non-finite logit for " + stack.utt_id);
  tr.posterior = sigmoid(tr.logit);

  if (keep_intermediates) {
    tr.fused = std::move(fused);
    tr.attn_hidden = std::move(hidden);
  }
  return tr;
}

namespace {

// Accumulates d(objective)/d(params) into grad given d/dlogit and extra
// per-gate d/d(alpha) terms (from the consistency loss).
void backward(const LayerStack& stack, const ModelParams& params, const FusionTrace& tr,
              double dlogit, const std::vector<std::vector<Simplex2>>& dalpha_extra,
              std::vector<double>& grad) {
  const ModelTopology& topo = params.topology;
  const ParamLayout lay(topo);
  const std::size_t T = stack.T;
  const std::size_t D = stack.D;
  const std::size_t L = stack.L;
  const double* p = params.values.data();
  double* gp = grad.data();
  const SlotView slot{stack, tr.fused};

  // Classifier head.
  const double* wc = p + lay.cls_weight();
  for (std::size_t d = 0; d < D; ++d) gp[lay.cls_weight() + d] += dlogit * tr.utterance[d];
  gp[lay.cls_bias()] += dlogit;

  // Gradients w.r.t. every gate output slot.
  std::vector<Matrix> dslot(topo.num_gates());
  for (auto& m : dslot) m = Matrix(T, D);
  Matrix& dfinal = dslot[topo.final_slot - L];

  // Attention pool.
  std::vector<double> dattn(T);
  double weighted = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const auto h = slot(topo.final_slot, t);
    const double a = tr.attention[t];
    auto dh = dfinal.row(t);
    double da = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double dv = dlogit * wc[d];
      dh[d] += a * dv;
      da += dv * h[d];
    }
    dattn[t] = da;
    weighted += a * da;
  }
  const double* wa = p + lay.attn_proj();
  const double* ctx = p + lay.attn_context();
  std::vector<double> dpre(D);
  for (std::size_t t = 0; t < T; ++t) {
    const double de = tr.attention[t] * (dattn[t] - weighted);
    const auto u = tr.attn_hidden.row(t);
    const auto h = slot(topo.final_slot, t);
    for (std::size_t i = 0; i < D; ++i) {
      gp[lay.attn_context() + i] += de * u[i];
      dpre[i] = de * ctx[i] * (1.0 - u[i] * u[i]);
      gp[lay.attn_bias() + i] += dpre[i];
    }
    auto dh = dfinal.row(t);
    for (std::size_t i = 0; i < D; ++i) {
      const double di = dpre[i];
      double* gw = gp + lay.attn_proj() + i * D;
      const double* wrow = wa + i * D;
      for (std::size_t d = 0; d < D; ++d) {
        gw[d] += di * h[d];
        dh[d] += wrow[d] * di;
      }
    }
  }

  // Gates, reverse topological order.
  for (std::size_t gi = topo.num_gates(); gi-- > 0;) {
    const GateNode& g = topo.gates[gi];
    const double* w1 = p + lay.gate_weight(gi);
    const double* w2 = w1 + 2 * D;
    double* gw1 = gp + lay.gate_weight(gi);
    double* gw2 = gw1 + 2 * D;
    double* gb = gp + lay.gate_bias(gi);
    const Matrix& dout = dslot[gi];
    Matrix* da_slot = g.in_a >= L ? &dslot[g.in_a - L] : nullptr;
    Matrix* db_slot = g.in_b >= L ? &dslot[g.in_b - L] : nullptr;
    const bool has_extra = !dalpha_extra.empty();

    for (std::size_t t = 0; t < T; ++t) {
      const auto ha = slot(g.in_a, t);
      const auto hb = slot(g.in_b, t);
      const auto dh = dout.row(t);
      const Simplex2 alpha = tr.gates[gi][t];
      double dal1 = 0.0;
      double dal2 = 0.0;
      for (std::size_t d = 0; d < D; ++d) {
        dal1 += dh[d] * ha[d];
        dal2 += dh[d] * hb[d];
      }
      if (has_extra) {
        dal1 += dalpha_extra[gi][t].p1;
        dal2 += dalpha_extra[gi][t].p2;
      }
      const double mean = alpha.p1 * dal1 + alpha.p2 * dal2;
      const double dz1 = alpha.p1 * (dal1 - mean);
      const double dz2 = alpha.p2 * (dal2 - mean);
      gb[0] += dz1;
      gb[1] += dz2;
      for (std::size_t d = 0; d < D; ++d) {
        gw1[d] += dz1 * ha[d];
        gw1[D + d] += dz1 * hb[d];
        gw2[d] += dz2 * ha[d];
        gw2[D + d] += dz2 * hb[d];
      }
      if (da_slot) {
        auto r = da_slot->row(t);
        for (std::size_t d = 0; d < D; ++d)
          r[d] += alpha.p1 * dh[d] + w1[d] * dz1 + w2[d] * dz2;
      }
      if (db_slot) {
        auto r = db_slot->row(t);
        for (std::size_t d = 0; d < D; ++d)
          r[d] += alpha.p2 * dh[d] + w1[D + d] * dz1 + w2[D + d] * dz2;
      }
    }
  }
}

void check_pair(const FusionTrace& a, const FusionTrace& b) {
  if (a.gates.size() != b.gates.size() || a.gate_ids != b.gate_ids)
    throw InvalidArgument("loss: traces come from different topologies");
  if (a.frames() != b.frames())
    throw InvalidArgument("loss: traces have different frame counts");
}

double label_value(Label y) {
  if (y == Label::Unlabeled) throw InvalidArgument("loss: unlabeled input");
  return y == Label::Spoof ? 1.0 : 0.0;
}

}  // namespace

double mean_gate_js(const FusionTrace& a, const FusionTrace& b) {
  check_pair(a, b);
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t g = 0; g < a.gates.size(); ++g) {
    for (std::size_t t = 0; t < a.frames(); ++t) {
      acc += js_divergence(a.gates[g][t], b.gates[g][t]);
      ++n;
    }
  }
  return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

LossBreakdown loss(const FusionTrace& clean, const FusionTrace& aug, Label label, double lambda,
                   const ClassWeights& weights) {
  check_pair(clean, aug);
  const double y = label_value(label);
  LossBreakdown out;
  out.lambda = lambda;
  out.cls = weights[label] * 0.5 * (bce_with_logit(clean.logit, y) + bce_with_logit(aug.logit, y));
  out.cons = mean_gate_js(clean, aug);
  out.total = out.cls + lambda * out.cons;
  return out;
}

std::pair<LossBreakdown, std::vector<double>> loss_and_grad(const LayerStack& clean,
                                                            const LayerStack& aug, Label label,
                                                            const ModelParams& params,
                                                            double lambda,
                                                            const ClassWeights& weights) {
  if (clean.T != aug.T || clean.L != aug.L || clean.D != aug.D)
    throw InvalidArgument("loss_and_grad: views of " + clean.utt_id + " have different shapes");
  const FusionTrace tc = forward(clean, params, true);
  const FusionTrace ta = forward(aug, params, true);
  const LossBreakdown lb = loss(tc, ta, label, lambda, weights);

  const double y = label_value(label);
  const double w = weights[label];
  const double dzc = w * 0.5 * (tc.posterior - y);
  const double dza = w * 0.5 * (ta.posterior - y);

  std::vector<std::vector<Simplex2>> extra_c;
  std::vector<std::vector<Simplex2>> extra_a;
  const std::size_t M = tc.gates.size();
  const std::size_t T = tc.frames();
  if (lambda != 0.0 && M > 0) {
    const double scale = lambda / static_cast<double>(M * T);
    extra_c.assign(M, std::vector<Simplex2>(T));
    extra_a.assign(M, std::vector<Simplex2>(T));
    for (std::size_t g = 0; g < M; ++g) {
      for (std::size_t t = 0; t < T; ++t) {
        const Simplex2 gc = js_divergence_grad(tc.gates[g][t], ta.gates[g][t]);
        const Simplex2 ga = js_divergence_grad(ta.gates[g][t], tc.gates[g][t]);
        extra_c[g][t] = {scale * gc.p1, scale * gc.p2};
        extra_a[g][t] = {scale * ga.p1, scale * ga.p2};
      }
    }
  }

  std::vector<double> grad(params.values.size(), 0.0);
  backward(clean, params, tc, dzc, extra_c, grad);
  backward(aug, params, ta, dza, extra_a, grad);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i]))
      throw NumericFault("loss_and_grad: non-finite gradient at parameter " + std::to_string(i) +
                         " for " + clean.utt_id);
  }
  return {lb, std::move(grad)};
}

std::vector<GateMapRow> export_gate_maps(const FusionTrace& trace) {
  std::vector<GateMapRow> rows;
  rows.reserve(trace.gates.size() * trace.frames());
  for (std::size_t g = 0; g < trace.gates.size(); ++g) {
    const auto [level, index] = trace.gate_ids[g];
    for (std::size_t t = 0; t < trace.gates[g].size(); ++t)
      rows.push_back({level, index, t, trace.gates[g][t].p1});
  }
  return rows;
}

void write_gate_map_csv(const std::vector<GateMapRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidArgument("cannot open " + path.string() + " for writing");
  out << "level,gate,frame,alpha1\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.9g", r.alpha1);
    out << r.level << ',' << r.gate << ',' << r.frame << ',' << buf << '\n';
  }
  if (!out) throw InvalidArgument("write failed: " + path.string());
}

std::vector<GateMapRow> read_gate_map_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "level,gate,frame,alpha1")
    throw FormatError(path.string() + ": bad gate-map header", 0);
  std::vector<GateMapRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    GateMapRow r;
    char c1 = 0, c2 = 0, c3 = 0;
    std::istringstream ss(line);
    if (!(ss >> r.level >> c1 >> r.gate >> c2 >> r.frame >> c3 >> r.alpha1) || c1 != ',' ||
        c2 != ',' || c3 != ',')
      throw FormatError(path.string() + ": malformed row at line " + std::to_string(lineno));
    rows.push_back(r);
  }
  return rows;
}

}  // namespace raptor

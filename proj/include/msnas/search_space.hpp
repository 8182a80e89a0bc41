#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "msnas/nn_ops.hpp"
#include "msnas/rng.hpp"
#include "msnas/tensor.hpp"

namespace msnas {

// ---------------------------------------------------------------------------
// Candidate operation set (fixed, K = 8)
// ---------------------------------------------------------------------------

enum class OpKind : int {
  sep_conv_3x3 = 0,
  sep_conv_5x5 = 1,
  dil_conv_3x3 = 2,
  dil_conv_5x5 = 3,
  max_pool_3x3 = 4,
  avg_pool_3x3 = 5,
  skip_connect = 6,
  zero = 7,
};

inline constexpr int kNumOps = 8;

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::sep_conv_3x3: return "sep_conv_3x3";
    case OpKind::sep_conv_5x5: return "sep_conv_5x5";
    case OpKind::dil_conv_3x3: return "dil_conv_3x3";
    case OpKind::dil_conv_5x5: return "dil_conv_5x5";
    case OpKind::max_pool_3x3: return "max_pool_3x3";
    case OpKind::avg_pool_3x3: return "avg_pool_3x3";
    case OpKind::skip_connect: return "skip_connect";
    case OpKind::zero: return "zero";
  }
  return "?";
}

OpKind op_from_name(const std::string& name);

inline std::vector<OpKind> all_candidate_ops() {
  return {OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3,
          OpKind::dil_conv_5x5, OpKind::max_pool_3x3, OpKind::avg_pool_3x3,
          OpKind::skip_connect, OpKind::zero};
}

// ---------------------------------------------------------------------------
// Parameter registry: every module registers its tensors under a stable
// hierarchical name, which is what checkpointing and parameter transfer key on.
// ---------------------------------------------------------------------------

struct ForwardCtx {
  bool train = false;
  bool update_stats = true;  // only honored when train is set
};

template <typename T>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<T>>> params;   // trainable
  std::vector<std::pair<std::string, Tensor<T>>> buffers;  // running stats etc.

  Tensor<T> param(const std::string& name, Tensor<T> t) {
    t.set_requires_grad(true);
    params.emplace_back(name, t);
    return t;
  }
  Tensor<T> buffer(const std::string& name, Tensor<T> t) {
    buffers.emplace_back(name, t);
    return t;
  }
  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.numel();
    return n;
  }
  std::vector<Tensor<T>> param_tensors() const {
    std::vector<Tensor<T>> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) out.push_back(t);
    return out;
  }
};

// He-uniform for convolutions, plain fan-in uniform for dense layers.
template <typename T>
Tensor<T> he_uniform(std::vector<int> shape, int fan_in, Pcg32& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  const double bound = std::sqrt(6.0 / fan_in);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> uniform_fan_in(std::vector<int> shape, int fan_in, Pcg32& rng) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNorm {
  Tensor<T> gamma, beta;
  ops::NormStats<T> stats;

  BatchNorm() = default;
  BatchNorm(ParamRegistry<T>& reg, const std::string& prefix, int channels, bool affine) {
    if (affine) {
      gamma = reg.param(prefix + ".gamma", Tensor<T>::full({channels}, T(1)));
      beta = reg.param(prefix + ".beta", Tensor<T>::zeros({channels}));
    } else {
      gamma = Tensor<T>::full({channels}, T(1));
      beta = Tensor<T>::zeros({channels});
    }
    stats.running_mean = reg.buffer(prefix + ".running_mean", Tensor<T>::zeros({channels}));
    stats.running_var = reg.buffer(prefix + ".running_var", Tensor<T>::full({channels}, T(1)));
  }

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) {
    return ops::affine_norm(tape, x, gamma, beta, stats, ctx.train, ctx.train && ctx.update_stats);
  }
};

template <typename T>
struct Conv2d {
  Tensor<T> w;
  int stride = 1, padding = 0, dilation = 1, groups = 1;

  Conv2d() = default;
  Conv2d(ParamRegistry<T>& reg, const std::string& name, int cin, int cout, int kernel,
         int stride_, int padding_, Pcg32& rng, int dilation_ = 1, int groups_ = 1)
      : stride(stride_), padding(padding_), dilation(dilation_), groups(groups_) {
    const int fan_in = (cin / groups_) * kernel * kernel;
    w = reg.param(name, he_uniform<T>({cout, cin / groups_, kernel, kernel}, fan_in, rng));
  }

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x) const {
    return ops::conv2d(tape, x, w, stride, padding, dilation, groups);
  }
};

// relu -> conv -> norm; the preprocessing unit used for all projections.
template <typename T>
struct ReluConvBn {
  Conv2d<T> conv;
  BatchNorm<T> bn;

  ReluConvBn() = default;
  ReluConvBn(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, int kernel,
             int stride, int padding, bool affine, Pcg32& rng)
      : conv(reg, prefix + ".conv.w", cin, cout, kernel, stride, padding, rng),
        bn(reg, prefix + ".bn", cout, affine) {}

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) {
    return bn.forward(tape, conv.forward(tape, ops::relu(tape, x)), ctx);
  }
};

// ---------------------------------------------------------------------------
// Candidate op modules
// ---------------------------------------------------------------------------

template <typename T>
struct OpModule {
  virtual ~OpModule() = default;
  virtual Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) = 0;
};

// relu, depthwise(k, stride), pointwise, norm -- applied twice (second pass
// at stride 1), the standard separable block.
template <typename T>
struct SepConvOp final : OpModule<T> {
  Conv2d<T> dw1, pw1, dw2, pw2;
  BatchNorm<T> bn1, bn2;

  SepConvOp(ParamRegistry<T>& reg, const std::string& prefix, int channels, int kernel,
            int stride, bool affine, Pcg32& rng)
      : dw1(reg, prefix + ".dw1.w", channels, channels, kernel, stride, (kernel - 1) / 2, rng, 1,
            channels),
        pw1(reg, prefix + ".pw1.w", channels, channels, 1, 1, 0, rng),
        dw2(reg, prefix + ".dw2.w", channels, channels, kernel, 1, (kernel - 1) / 2, rng, 1,
            channels),
        pw2(reg, prefix + ".pw2.w", channels, channels, 1, 1, 0, rng),
        bn1(reg, prefix + ".bn1", channels, affine),
        bn2(reg, prefix + ".bn2", channels, affine) {}

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) override {
    auto h = bn1.forward(tape, pw1.forward(tape, dw1.forward(tape, ops::relu(tape, x))), ctx);
    return bn2.forward(tape, pw2.forward(tape, dw2.forward(tape, ops::relu(tape, h))), ctx);
  }
};

// relu, dilated depthwise(k, stride, dilation 2), pointwise, norm.
template <typename T>
struct DilConvOp final : OpModule<T> {
  Conv2d<T> dw, pw;
  BatchNorm<T> bn;

  DilConvOp(ParamRegistry<T>& reg, const std::string& prefix, int channels, int kernel,
            int stride, bool affine, Pcg32& rng)
      : dw(reg, prefix + ".dw.w", channels, channels, kernel, stride, kernel - 1, rng, 2,
           channels),
        pw(reg, prefix + ".pw.w", channels, channels, 1, 1, 0, rng),
        bn(reg, prefix + ".bn", channels, affine) {}

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) override {
    return bn.forward(tape, pw.forward(tape, dw.forward(tape, ops::relu(tape, x))), ctx);
  }
};

// 3x3 pooling; in the relaxed (search) network it is followed by a frozen
// norm, in the discrete network it is used bare.
template <typename T>
struct PoolOp final : OpModule<T> {
  ops::PoolKind kind;
  int stride;
  bool with_norm;
  BatchNorm<T> bn;

  PoolOp(ParamRegistry<T>& reg, const std::string& prefix, int channels, ops::PoolKind kind_,
         int stride_, bool with_norm_)
      : kind(kind_), stride(stride_), with_norm(with_norm_) {
    if (with_norm) bn = BatchNorm<T>(reg, prefix + ".bn", channels, false);
  }

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) override {
    auto y = ops::pool2d(tape, x, kind, 3, stride, 1);
    return with_norm ? bn.forward(tape, y, ctx) : y;
  }
};

template <typename T>
struct IdentityOp final : OpModule<T> {
  Tensor<T> forward(GradTape<T>&, const Tensor<T>& x, const ForwardCtx&) override { return x; }
};

// Stride-2 skip: relu, two offset 1x1 stride-2 convolutions whose outputs are
// concatenated to restore the channel count, then norm.
template <typename T>
struct FactorizedReduceOp final : OpModule<T> {
  Conv2d<T> conv_a, conv_b;
  BatchNorm<T> bn;

  FactorizedReduceOp(ParamRegistry<T>& reg, const std::string& prefix, int channels, bool affine,
                     Pcg32& rng)
      : conv_a(reg, prefix + ".conv_a.w", channels, (channels + 1) / 2, 1, 2, 0, rng),
        conv_b(reg, prefix + ".conv_b.w", channels, channels / 2, 1, 2, 0, rng),
        bn(reg, prefix + ".bn", channels, affine) {}

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) override {
    auto h = ops::relu(tape, x);
    auto a = conv_a.forward(tape, h);
    auto b = conv_b.forward(tape, ops::shift_up_left(tape, h));
    return bn.forward(tape, ops::concat_channels(tape, {a, b}), ctx);
  }
};

template <typename T>
struct ZeroOp final : OpModule<T> {
  int stride;
  explicit ZeroOp(int stride_) : stride(stride_) {}
  Tensor<T> forward(GradTape<T>&, const Tensor<T>& x, const ForwardCtx&) override {
    return ops::zeros_strided_like(x, stride);
  }
};

template <typename T>
std::unique_ptr<OpModule<T>> make_candidate(OpKind kind, ParamRegistry<T>& reg,
                                            const std::string& prefix, int channels, int stride,
                                            bool relaxed, Pcg32& rng) {
  const bool affine = !relaxed;
  switch (kind) {
    case OpKind::sep_conv_3x3:
      return std::make_unique<SepConvOp<T>>(reg, prefix, channels, 3, stride, affine, rng);
    case OpKind::sep_conv_5x5:
      return std::make_unique<SepConvOp<T>>(reg, prefix, channels, 5, stride, affine, rng);
    case OpKind::dil_conv_3x3:
      return std::make_unique<DilConvOp<T>>(reg, prefix, channels, 3, stride, affine, rng);
    case OpKind::dil_conv_5x5:
      return std::make_unique<DilConvOp<T>>(reg, prefix, channels, 5, stride, affine, rng);
    case OpKind::max_pool_3x3:
      return std::make_unique<PoolOp<T>>(reg, prefix, channels, ops::PoolKind::max, stride,
                                         relaxed);
    case OpKind::avg_pool_3x3:
      return std::make_unique<PoolOp<T>>(reg, prefix, channels, ops::PoolKind::avg, stride,
                                         relaxed);
    case OpKind::skip_connect:
      if (stride == 1) return std::make_unique<IdentityOp<T>>();
      return std::make_unique<FactorizedReduceOp<T>>(reg, prefix, channels, affine, rng);
    case OpKind::zero:
      return std::make_unique<ZeroOp<T>>(stride);
  }
  throw std::invalid_argument("make_candidate: unknown op kind");
}

// ---------------------------------------------------------------------------
// Cell DAG layout. Edge order is canonical: for each intermediate node j, one
// edge per source 0..j+1 (0 and 1 are the two cell inputs, 2+i is
// intermediate node i).
// ---------------------------------------------------------------------------

struct CellEdge {
  int node;
  int src;
};

inline std::vector<CellEdge> cell_edges(int nodes) {
  std::vector<CellEdge> edges;
  for (int j = 0; j < nodes; ++j)
    for (int s = 0; s < j + 2; ++s) edges.push_back({j, s});
  return edges;
}

inline int cell_edge_count(int nodes) { return nodes * (nodes + 3) / 2; }

// In a reduction cell the edges that consume the cell inputs run at stride 2.
inline int edge_stride(bool reduction, int src) { return (reduction && src < 2) ? 2 : 1; }

// ---------------------------------------------------------------------------
// Architecture encoding: one row of mixing logits per cell edge, separate
// tables for normal and reduction cells.
// ---------------------------------------------------------------------------

template <typename T>
struct AlphaTable {
  Tensor<T> normal;  // [E, K]
  Tensor<T> reduce;  // [E, K]
  int nodes = 0;

  // Zero-initialized: the softmax starts uniform, an unbiased mixture.
  static AlphaTable make(int nodes) {
    const int e = cell_edge_count(nodes);
    AlphaTable t;
    t.nodes = nodes;
    t.normal = Tensor<T>::zeros({e, kNumOps});
    t.reduce = Tensor<T>::zeros({e, kNumOps});
    t.normal.set_requires_grad(true);
    t.reduce.set_requires_grad(true);
    return t;
  }
};

// ---------------------------------------------------------------------------
// Mixed operation (continuous relaxation): softmax(alpha)-weighted sum of
// every candidate's output.
// ---------------------------------------------------------------------------

template <typename T>
class MixedOp {
 public:
  MixedOp(ParamRegistry<T>& reg, const std::string& prefix, int channels, int stride,
          Pcg32& rng, std::vector<OpKind> candidates = all_candidate_ops())
      : candidates_(std::move(candidates)) {
    for (OpKind k : candidates_)
      ops_.push_back(
          make_candidate<T>(k, reg, prefix + "." + op_name(k), channels, stride, true, rng));
  }

  // alpha_row: 1-d tensor with one logit per candidate.
  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const Tensor<T>& alpha_row,
                    const ForwardCtx& ctx) const {
    check_arg(alpha_row.numel() == static_cast<int64_t>(ops_.size()),
              "mixed_op: alpha row length ", alpha_row.numel(), " != candidate count ",
              ops_.size());
    auto weights = ops::softmax_vec(tape, alpha_row);
    std::vector<Tensor<T>> outs;
    outs.reserve(ops_.size());
    for (const auto& op : ops_) outs.push_back(op->forward(tape, x, ctx));
    return ops::weighted_sum(tape, outs, weights);
  }

  const std::vector<OpKind>& candidates() const { return candidates_; }
  OpModule<T>& op(size_t k) const { return *ops_[k]; }

 private:
  std::vector<OpKind> candidates_;
  std::vector<std::unique_ptr<OpModule<T>>> ops_;
};

// ---------------------------------------------------------------------------
// Genotype: the discrete architecture. Exactly two (source, op) choices per
// intermediate node; zero never appears.
// ---------------------------------------------------------------------------

struct GenotypeChoice {
  int src = 0;
  OpKind op = OpKind::skip_connect;
  bool operator==(const GenotypeChoice&) const = default;
};

struct Genotype {
  static constexpr int kSchemaVersion = 1;
  int schema_version = kSchemaVersion;
  std::vector<std::array<GenotypeChoice, 2>> normal;
  std::vector<std::array<GenotypeChoice, 2>> reduce;

  int nodes() const { return static_cast<int>(normal.size()); }
  void validate() const;
  bool operator==(const Genotype&) const = default;
};

inline void validate_table(const std::vector<std::array<GenotypeChoice, 2>>& table,
                           const char* which) {
  for (size_t j = 0; j < table.size(); ++j) {
    const auto& [a, b] = table[j];
    check_arg(a.src != b.src, "genotype: node ", j, " of ", which, " cell reuses source ", a.src);
    for (const auto& ch : table[j]) {
      check_arg(ch.src >= 0 && ch.src < static_cast<int>(j) + 2, "genotype: node ", j, " of ",
                which, " cell references out-of-range source ", ch.src);
      check_arg(ch.op != OpKind::zero, "genotype: node ", j, " of ", which,
                " cell selects the zero op");
    }
  }
}

inline void Genotype::validate() const {
  check_arg(schema_version == kSchemaVersion, "genotype: schema version ", schema_version,
            " not supported (expected ", kSchemaVersion, "); migrate the file first");
  check_arg(!normal.empty() && normal.size() == reduce.size(),
            "genotype: normal/reduction tables must be non-empty and the same size");
  validate_table(normal, "normal");
  validate_table(reduce, "reduction");
}

// Versioned JSON round-trip (implemented in genotype_io.cpp).
std::string genotype_to_json(const Genotype& g);
Genotype genotype_from_json(const std::string& text);
void save_genotype(const Genotype& g, const std::string& path);
Genotype load_genotype(const std::string& path);

// ---------------------------------------------------------------------------
// Genotype derivation: per node, score each incoming edge by its strongest
// non-zero candidate's softmax weight, keep the two strongest edges, and pick
// that candidate on each. Ties break to the lowest op index, then the lowest
// source index.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<std::array<GenotypeChoice, 2>> derive_cell_choices(const Tensor<T>& alpha,
                                                               int nodes) {
  check_arg(alpha.rank() == 2 && alpha.dim(0) == cell_edge_count(nodes) &&
                alpha.dim(1) == kNumOps,
            "derive_genotype: alpha table shape does not match node count");
  for (int64_t i = 0; i < alpha.numel(); ++i)
    check_arg(std::isfinite(static_cast<double>(alpha.data()[i])),
              "derive_genotype: non-finite alpha value");

  const auto edges = cell_edges(nodes);
  std::vector<std::array<GenotypeChoice, 2>> out;
  int edge_base = 0;
  for (int j = 0; j < nodes; ++j) {
    const int in_edges = j + 2;
    struct Scored {
      int src;
      OpKind op;
      double weight;
    };
    std::vector<Scored> scored;
    for (int e = 0; e < in_edges; ++e) {
      const int idx = edge_base + e;
      // softmax of the row
      double mx = alpha.data()[static_cast<int64_t>(idx) * kNumOps];
      for (int k = 1; k < kNumOps; ++k)
        mx = std::max(mx, static_cast<double>(alpha.data()[static_cast<int64_t>(idx) * kNumOps + k]));
      double denom = 0.0;
      std::array<double, kNumOps> w{};
      for (int k = 0; k < kNumOps; ++k) {
        w[static_cast<size_t>(k)] =
            std::exp(static_cast<double>(alpha.data()[static_cast<int64_t>(idx) * kNumOps + k]) - mx);
        denom += w[static_cast<size_t>(k)];
      }
      int best = -1;
      for (int k = 0; k < kNumOps; ++k) {
        if (static_cast<OpKind>(k) == OpKind::zero) continue;
        if (best < 0 || w[static_cast<size_t>(k)] > w[static_cast<size_t>(best)]) best = k;
      }
      scored.push_back({edges[static_cast<size_t>(idx)].src, static_cast<OpKind>(best),
                        w[static_cast<size_t>(best)] / denom});
    }
    // top-2 edges; strict > keeps the lowest source on ties because sources
    // are scanned in ascending order
    std::array<int, 2> keep = {-1, -1};
    for (int pick = 0; pick < 2; ++pick) {
      for (int e = 0; e < in_edges; ++e) {
        if (e == keep[0]) continue;
        if (keep[static_cast<size_t>(pick)] < 0 ||
            scored[static_cast<size_t>(e)].weight >
                scored[static_cast<size_t>(keep[static_cast<size_t>(pick)])].weight)
          keep[static_cast<size_t>(pick)] = e;
      }
    }
    if (keep[0] > keep[1]) std::swap(keep[0], keep[1]);  // report in source order
    out.push_back({GenotypeChoice{scored[static_cast<size_t>(keep[0])].src,
                                  scored[static_cast<size_t>(keep[0])].op},
                   GenotypeChoice{scored[static_cast<size_t>(keep[1])].src,
                                  scored[static_cast<size_t>(keep[1])].op}});
    edge_base += in_edges;
  }
  return out;
}

template <typename T>
Genotype derive_genotype(const AlphaTable<T>& alpha) {
  Genotype g;
  g.normal = derive_cell_choices(alpha.normal, alpha.nodes);
  g.reduce = derive_cell_choices(alpha.reduce, alpha.nodes);
  return g;
}

// Uniform random genotype over the non-zero candidates; the control baseline
// a searched genotype is compared against.
inline Genotype random_genotype(int nodes, Pcg32& rng) {
  Genotype g;
  auto fill = [&](std::vector<std::array<GenotypeChoice, 2>>& table) {
    for (int j = 0; j < nodes; ++j) {
      const int in_edges = j + 2;
      int s1 = rng.uniform_int(0, in_edges - 1);
      int s2 = rng.uniform_int(0, in_edges - 2);
      if (s2 >= s1) ++s2;
      if (s1 > s2) std::swap(s1, s2);
      auto pick_op = [&]() { return static_cast<OpKind>(rng.uniform_int(0, kNumOps - 2)); };
      table.push_back({GenotypeChoice{s1, pick_op()}, GenotypeChoice{s2, pick_op()}});
    }
  };
  fill(g.normal);
  fill(g.reduce);
  return g;
}

// ---------------------------------------------------------------------------
// Cells
// ---------------------------------------------------------------------------

// Relaxed cell: every edge carries a mixed op; node output is the sum over
// its incoming edges; cell output concatenates all node outputs.
template <typename T>
class RelaxedCell {
 public:
  RelaxedCell(ParamRegistry<T>& reg, const std::string& prefix, int nodes, int channels,
              bool reduction, Pcg32& rng, std::vector<OpKind> candidates = all_candidate_ops())
      : nodes_(nodes), reduction_(reduction) {
    const auto edges = cell_edges(nodes);
    for (size_t i = 0; i < edges.size(); ++i) {
      edge_ops_.emplace_back(reg,
                             str_cat(prefix, ".edge", i, ".n", edges[i].node, ".s", edges[i].src),
                             channels, edge_stride(reduction, edges[i].src), rng, candidates);
    }
  }

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& in_a, const Tensor<T>& in_b,
                    const Tensor<T>& alpha, const ForwardCtx& ctx) const {
    check_arg(in_a.dim(2) == in_b.dim(2) && in_a.dim(3) == in_b.dim(3),
              "cell: input spatial sizes differ");
    const auto edges = cell_edges(nodes_);
    std::vector<Tensor<T>> states = {in_a, in_b};
    int idx = 0;
    for (int j = 0; j < nodes_; ++j) {
      Tensor<T> acc;
      for (; idx < static_cast<int>(edges.size()) && edges[static_cast<size_t>(idx)].node == j;
           ++idx) {
        auto contrib = edge_ops_[static_cast<size_t>(idx)].forward(
            tape, states[static_cast<size_t>(edges[static_cast<size_t>(idx)].src)],
            ops::row(tape, alpha, idx), ctx);
        acc = acc.defined() ? ops::add(tape, acc, contrib) : contrib;
      }
      states.push_back(acc);
    }
    return ops::concat_channels(tape,
                                std::vector<Tensor<T>>(states.begin() + 2, states.end()));
  }

  int nodes() const { return nodes_; }
  bool reduction() const { return reduction_; }
  const MixedOp<T>& edge_op(size_t idx) const { return edge_ops_[idx]; }

 private:
  int nodes_;
  bool reduction_;
  std::vector<MixedOp<T>> edge_ops_;
};

// Discrete cell: exactly two fixed ops per node, no mixing.
template <typename T>
class DiscreteCell {
 public:
  DiscreteCell(ParamRegistry<T>& reg, const std::string& prefix, const Genotype& genotype,
               int channels, bool reduction, Pcg32& rng)
      : nodes_(genotype.nodes()), reduction_(reduction) {
    genotype.validate();
    const auto& table = reduction ? genotype.reduce : genotype.normal;
    for (int j = 0; j < nodes_; ++j) {
      for (int slot = 0; slot < 2; ++slot) {
        const auto& ch = table[static_cast<size_t>(j)][static_cast<size_t>(slot)];
        choices_.push_back(
            {j, ch.src,
             make_candidate<T>(ch.op, reg,
                               str_cat(prefix, ".n", j, ".s", ch.src, ".", op_name(ch.op)),
                               channels, edge_stride(reduction, ch.src), false, rng)});
      }
    }
  }

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& in_a, const Tensor<T>& in_b,
                    const ForwardCtx& ctx) const {
    check_arg(in_a.dim(2) == in_b.dim(2) && in_a.dim(3) == in_b.dim(3),
              "cell: input spatial sizes differ");
    std::vector<Tensor<T>> states = {in_a, in_b};
    size_t idx = 0;
    for (int j = 0; j < nodes_; ++j) {
      auto a = choices_[idx].op->forward(tape, states[static_cast<size_t>(choices_[idx].src)], ctx);
      ++idx;
      auto b = choices_[idx].op->forward(tape, states[static_cast<size_t>(choices_[idx].src)], ctx);
      ++idx;
      states.push_back(ops::add(tape, a, b));
    }
    return ops::concat_channels(tape,
                                std::vector<Tensor<T>>(states.begin() + 2, states.end()));
  }

  int nodes() const { return nodes_; }

 private:
  struct Choice {
    int node;
    int src;
    std::unique_ptr<OpModule<T>> op;
  };
  int nodes_;
  bool reduction_;
  std::vector<Choice> choices_;
};

}  // namespace msnas

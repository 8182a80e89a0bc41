#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <vector>

#include "msnas/search_space.hpp"

namespace msnas {

// ---------------------------------------------------------------------------
// NetworkConfig. Layer 1 is the stem (it only generates the scale pyramid);
// cell layers run from 2 to `layers`. Scale s halves the spatial extent s
// times; reduction layers halve every scale once more and double channels.
// ---------------------------------------------------------------------------

struct NetworkConfig {
  int layers = 5;
  int scales = 1;
  int init_channels = 16;
  int nodes = 4;
  std::vector<int> classifier_layers;  // subset of 2..layers, ascending
  std::vector<int> reduction_layers;   // subset of 2..layers, ascending
  int num_classes = 10;
  int in_channels = 3;
  int input_hw = 32;
  bool relaxed = true;

  void validate() const {
    check_arg(layers >= 2, "network: layers must be >= 2, got ", layers);
    check_arg(scales >= 1 && scales <= 3, "network: scales must be in {1,2,3}, got ", scales);
    check_arg(init_channels >= 1, "network: init_channels must be >= 1");
    check_arg(nodes >= 1, "network: nodes must be >= 1");
    check_arg(num_classes >= 2, "network: num_classes must be >= 2");
    check_arg(in_channels >= 1, "network: in_channels must be >= 1");
    check_arg(!classifier_layers.empty(), "network: at least one classifier layer is required");
    check_arg(std::is_sorted(classifier_layers.begin(), classifier_layers.end()) &&
                  std::adjacent_find(classifier_layers.begin(), classifier_layers.end()) ==
                      classifier_layers.end(),
              "network: classifier_layers must be strictly ascending");
    for (int l : classifier_layers)
      check_arg(l >= 2 && l <= layers, "network: classifier layer ", l,
                " outside 2..", layers, " (the first layer never carries a classifier)");
    check_arg(std::is_sorted(reduction_layers.begin(), reduction_layers.end()) &&
                  std::adjacent_find(reduction_layers.begin(), reduction_layers.end()) ==
                      reduction_layers.end(),
              "network: reduction_layers must be strictly ascending");
    for (int l : reduction_layers)
      check_arg(l >= 2 && l <= layers, "network: reduction layer ", l, " outside 2..", layers);
    check_arg(input_hw >= (1 << (scales - 1)), "network: input ", input_hw,
              " smaller than 2^(scales-1) = ", 1 << (scales - 1));
    check_arg(spatial(layers, scales - 1) >= 1,
              "network: pyramid bottoms out below 1x1; fewer scales or reductions needed");
  }

  // number of reduction layers at index <= layer
  int reductions_upto(int layer) const {
    int r = 0;
    for (int l : reduction_layers)
      if (l <= layer) ++r;
    return r;
  }

  int spatial(int layer, int scale) const {
    return input_hw >> (scale + reductions_upto(layer));
  }

  // cell width at (layer, scale): init_channels * 2^scale, doubled per reduction
  int cell_width(int layer, int scale) const {
    return init_channels << (scale + reductions_upto(layer));
  }

  int stem_channels(int scale) const { return init_channels << scale; }

  // channels a layer's output grid carries at the given scale
  int grid_channels(int layer, int scale) const {
    return layer == 1 ? stem_channels(scale) : nodes * cell_width(layer, scale);
  }

  int num_exits() const { return static_cast<int>(classifier_layers.size()); }
};

// Default reduction placement: one third and two thirds of the way in.
inline std::vector<int> default_reduction_layers(int layers) {
  std::vector<int> out;
  const int a = layers / 3 + 1, b = 2 * layers / 3 + 1;
  if (a >= 2 && a <= layers) out.push_back(a);
  if (b != a && b >= 2 && b <= layers) out.push_back(b);
  return out;
}

// Classifier on every layer except the first.
inline std::vector<int> all_but_first_classifier_layers(int layers) {
  std::vector<int> out;
  for (int l = 2; l <= layers; ++l) out.push_back(l);
  return out;
}

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

template <typename T>
struct ConvBn {
  Conv2d<T> conv;
  BatchNorm<T> bn;

  ConvBn() = default;
  ConvBn(ParamRegistry<T>& reg, const std::string& prefix, int cin, int cout, int kernel,
         int stride, int padding, bool affine, Pcg32& rng)
      : conv(reg, prefix + ".conv.w", cin, cout, kernel, stride, padding, rng),
        bn(reg, prefix + ".bn", cout, affine) {}

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) {
    return bn.forward(tape, conv.forward(tape, x), ctx);
  }
};

// Early-exit head on the coarsest scale: two strided conv blocks, global
// average pooling, dense. Features smaller than 4x4 get a single unstrided
// block instead.
template <typename T>
struct ClassifierHead {
  bool two_blocks = true;
  ConvBn<T> block1, block2;
  Tensor<T> fc_w, fc_b;

  ClassifierHead(ParamRegistry<T>& reg, const std::string& prefix, int channels, int spatial,
                 int classes, bool affine, Pcg32& rng)
      : two_blocks(spatial >= 4) {
    if (two_blocks) {
      block1 = ConvBn<T>(reg, prefix + ".block1", channels, channels, 3, 2, 1, affine, rng);
      block2 = ConvBn<T>(reg, prefix + ".block2", channels, channels, 3, 2, 1, affine, rng);
    } else {
      block1 = ConvBn<T>(reg, prefix + ".block1", channels, channels, 3, 1, 1, affine, rng);
    }
    fc_w = reg.param(prefix + ".fc.w", uniform_fan_in<T>({channels, classes}, channels, rng));
    fc_b = reg.param(prefix + ".fc.b", uniform_fan_in<T>({classes}, channels, rng));
  }

  Tensor<T> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx) {
    auto h = ops::relu(tape, block1.forward(tape, x, ctx));
    if (two_blocks) h = ops::relu(tape, block2.forward(tape, h, ctx));
    return ops::dense(tape, ops::global_avg_pool(tape, h), fc_w, fc_b);
  }
};

// ---------------------------------------------------------------------------
// The assembled network.
// ---------------------------------------------------------------------------

template <typename T>
class MultiScaleNetwork {
 public:
  // Relaxed (search) network: carries one alpha table pair shared by all cells.
  MultiScaleNetwork(const NetworkConfig& cfg, uint64_t seed) : cfg_(cfg) {
    check_arg(cfg.relaxed, "network: relaxed constructor requires relaxed mode config");
    cfg_.validate();
    alphas_ = AlphaTable<T>::make(cfg_.nodes);
    build(seed);
  }

  // Discrete network from a genotype.
  MultiScaleNetwork(const NetworkConfig& cfg, const Genotype& genotype, uint64_t seed)
      : cfg_(cfg), genotype_(genotype) {
    check_arg(!cfg.relaxed, "network: discrete constructor requires discrete mode config");
    cfg_.validate();
    genotype_.validate();
    check_arg(genotype_.nodes() == cfg_.nodes, "network: genotype has ", genotype_.nodes(),
              " nodes but config expects ", cfg_.nodes);
    build(seed);
  }

  // Runs layers 1..layer(exit max_exit). With single_exit >= 1 only that
  // exit's head is evaluated (the backbone prefix is unchanged), which is the
  // budgeted-inference path. Exit indices are 1-based, shallow to deep.
  std::vector<Tensor<T>> forward(GradTape<T>& tape, const Tensor<T>& x, const ForwardCtx& ctx,
                                 int max_exit = -1, int single_exit = -1,
                                 std::vector<std::vector<Tensor<T>>>* grid_log = nullptr) {
    check_arg(x.rank() == 4 && x.dim(1) == cfg_.in_channels && x.dim(2) == cfg_.input_hw &&
                  x.dim(3) == cfg_.input_hw,
              "network: input must be [N,", cfg_.in_channels, ",", cfg_.input_hw, ",",
              cfg_.input_hw, "]");
    const int exits = cfg_.num_exits();
    if (max_exit < 0) max_exit = exits;
    check_arg(max_exit >= 1 && max_exit <= exits, "network: exit index out of range");
    if (single_exit >= 0) {
      check_arg(single_exit >= 1 && single_exit <= exits, "network: exit index out of range");
      max_exit = single_exit;
    }
    const int stop_layer = cfg_.classifier_layers[static_cast<size_t>(max_exit - 1)];

    // stem (layer 1)
    std::vector<Tensor<T>> grid;
    grid.push_back(stem_[0].forward(tape, x, ctx));
    for (int s = 1; s < cfg_.scales; ++s)
      grid.push_back(stem_[static_cast<size_t>(s)].forward(tape, grid.back(), ctx));
    if (grid_log) grid_log->push_back(grid);

    std::vector<Tensor<T>> logits;
    int exit_idx = 0;
    for (int l = 2; l <= stop_layer; ++l) {
      auto& layer = layers_[static_cast<size_t>(l - 2)];
      std::vector<Tensor<T>> next(static_cast<size_t>(cfg_.scales));
      for (int s = 0; s < cfg_.scales; ++s) {
        auto& sc = layer.scales[static_cast<size_t>(s)];
        Tensor<T> fused;
        if (s == 0) {
          fused = sc.horiz.forward(tape, grid[0], ctx);
        } else {
          auto d = sc.diag->forward(tape, grid[static_cast<size_t>(s - 1)], ctx);
          auto h = sc.horiz.forward(tape, grid[static_cast<size_t>(s)], ctx);
          fused = sc.fuse->forward(tape, ops::concat_channels(tape, {d, h}), ctx);
        }
        // the same fused path feeds both cell input slots
        next[static_cast<size_t>(s)] =
            cfg_.relaxed
                ? sc.relaxed_cell->forward(tape, fused, fused,
                                           layer.reduction ? alphas_.reduce : alphas_.normal, ctx)
                : sc.discrete_cell->forward(tape, fused, fused, ctx);
      }
      grid = std::move(next);
      if (grid_log) grid_log->push_back(grid);

      if (exit_idx < exits && cfg_.classifier_layers[static_cast<size_t>(exit_idx)] == l) {
        ++exit_idx;
        if (single_exit < 0 || exit_idx == single_exit)
          logits.push_back(heads_[static_cast<size_t>(exit_idx - 1)]->forward(
              tape, grid[static_cast<size_t>(cfg_.scales - 1)], ctx));
      }
    }
    return logits;
  }

  const NetworkConfig& config() const { return cfg_; }
  AlphaTable<T>& alphas() {
    check_state(cfg_.relaxed, "network: alphas only exist in relaxed mode");
    return alphas_;
  }
  const Genotype& genotype() const {
    check_state(!cfg_.relaxed, "network: genotype only exists in discrete mode");
    return genotype_;
  }
  ParamRegistry<T>& registry() { return reg_; }
  const ParamRegistry<T>& registry() const { return reg_; }
  int64_t param_count() const { return reg_.param_count(); }

  std::vector<Tensor<T>> weight_params() const { return reg_.param_tensors(); }
  std::vector<Tensor<T>> alpha_params() {
    check_state(cfg_.relaxed, "network: alphas only exist in relaxed mode");
    return {alphas_.normal, alphas_.reduce};
  }

 private:
  struct ScaleUnit {
    ReluConvBn<T> horiz;
    std::optional<ReluConvBn<T>> diag;
    std::optional<ReluConvBn<T>> fuse;
    std::unique_ptr<RelaxedCell<T>> relaxed_cell;
    std::unique_ptr<DiscreteCell<T>> discrete_cell;
  };
  struct Layer {
    bool reduction = false;
    std::vector<ScaleUnit> scales;
  };

  void build(uint64_t seed) {
    Pcg32 rng = derive_stream(seed, "init");
    const bool affine = !cfg_.relaxed;

    // vertical stem
    stem_.emplace_back(reg_, "stem.s0", cfg_.in_channels, cfg_.stem_channels(0), 3, 1, 1, affine,
                       rng);
    for (int s = 1; s < cfg_.scales; ++s)
      stem_.emplace_back(reg_, str_cat("stem.s", s), cfg_.stem_channels(s - 1),
                         cfg_.stem_channels(s), 3, 2, 1, affine, rng);

    for (int l = 2; l <= cfg_.layers; ++l) {
      Layer layer;
      layer.reduction = std::find(cfg_.reduction_layers.begin(), cfg_.reduction_layers.end(),
                                  l) != cfg_.reduction_layers.end();
      for (int s = 0; s < cfg_.scales; ++s) {
        const int width = cfg_.cell_width(l, s);
        const std::string prefix = str_cat("layer", l, ".s", s);
        ScaleUnit unit{
            ReluConvBn<T>(reg_, prefix + ".horiz", cfg_.grid_channels(l - 1, s), width, 1, 1, 0,
                          affine, rng),
            std::nullopt, std::nullopt, nullptr, nullptr};
        if (s > 0) {
          unit.diag.emplace(reg_, prefix + ".diag", cfg_.grid_channels(l - 1, s - 1), width, 3, 2,
                            1, affine, rng);
          unit.fuse.emplace(reg_, prefix + ".fuse", 2 * width, width, 1, 1, 0, affine, rng);
        }
        if (cfg_.relaxed)
          unit.relaxed_cell = std::make_unique<RelaxedCell<T>>(reg_, prefix + ".cell", cfg_.nodes,
                                                               width, layer.reduction, rng);
        else
          unit.discrete_cell = std::make_unique<DiscreteCell<T>>(
              reg_, prefix + ".cell", genotype_, width, layer.reduction, rng);
        layer.scales.push_back(std::move(unit));
      }
      layers_.push_back(std::move(layer));

      if (std::find(cfg_.classifier_layers.begin(), cfg_.classifier_layers.end(), l) !=
          cfg_.classifier_layers.end()) {
        heads_.push_back(std::make_unique<ClassifierHead<T>>(
            reg_, str_cat("head", l), cfg_.grid_channels(l, cfg_.scales - 1),
            cfg_.spatial(l, cfg_.scales - 1), cfg_.num_classes, affine, rng));
      }
    }
  }

  NetworkConfig cfg_;
  Genotype genotype_;
  AlphaTable<T> alphas_;
  ParamRegistry<T> reg_;
  std::vector<ConvBn<T>> stem_;
  std::vector<Layer> layers_;
  std::vector<std::unique_ptr<ClassifierHead<T>>> heads_;
};

// Copies values for every identically-named parameter/buffer of `src` into
// `dst`. Returns the number of tensors copied. Used for head-for-head
// truncation and checkpoint restore.
template <typename T>
int transfer_named_tensors(const ParamRegistry<T>& src, ParamRegistry<T>& dst) {
  int copied = 0;
  auto copy_all = [&](const auto& from, auto& to) {
    for (auto& [name, tensor] : to) {
      for (const auto& [sname, stensor] : from) {
        if (sname == name) {
          check_arg(stensor.numel() == tensor.numel(), "transfer: shape mismatch for ", name);
          std::copy(stensor.data(), stensor.data() + stensor.numel(), tensor.data());
          ++copied;
          break;
        }
      }
    }
  };
  copy_all(src.params, dst.params);
  copy_all(src.buffers, dst.buffers);
  return copied;
}

}  // namespace msnas

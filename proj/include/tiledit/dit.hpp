#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "tiledit/attention.hpp"
#include "tiledit/diffusion.hpp"
#include "tiledit/rng.hpp"
#include "tiledit/tensor.hpp"
#include "tiledit/tile_mask.hpp"
#include "tiledit/video.hpp"

namespace tiledit {

struct DitConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t dim = 32;
  std::size_t mlp_ratio = 4;
  std::size_t frames = 8;
  std::size_t height = 4;
  std::size_t width = 4;
  std::size_t channels = 2;
  std::size_t patch = 1;
  int train_steps = 50;

  std::size_t tokens_per_frame() const { return (height / patch) * (width / patch); }
  std::size_t tokens() const { return frames * tokens_per_frame(); }
  std::size_t in_dim() const { return patch * patch * channels; }
  std::size_t hidden() const { return mlp_ratio * dim; }
  void validate() const;
  bool operator==(const DitConfig&) const = default;
};

struct LayerParams {
  Tensor ln1_gain, ln1_bias;
  MhaParams attn;
  Tensor ln2_gain, ln2_bias;
  Tensor w1, b1, w2, b2;
};

struct DitParams {
  Tensor w_in, b_in;  // token embedding
  Tensor w_t, b_t;    // timestep embedding on sinusoidal features
  std::vector<LayerParams> layers;
  Tensor lnf_gain, lnf_bias;
  Tensor w_out, b_out;
};

/// Every parameter tensor with a stable name, in a fixed order.
std::vector<std::pair<std::string, Tensor*>> named_tensors(DitParams& p);
std::vector<std::pair<std::string, const Tensor*>> named_tensors(const DitParams& p);
DitParams zeros_like(const DitParams& p);
std::size_t parameter_count(const DitParams& p);

/// Pre-norm 3D-full-attention diffusion transformer over frame-major tokens.
struct ToyDiT {
  DitConfig config;
  DitParams params;
  std::vector<TileMask> masks;  // one per layer

  void set_masks(std::vector<TileMask> assignment);
  void validate() const;
};

ToyDiT make_toy_dit(const DitConfig& config, Rng& rng);

/// Fixed sinusoidal embeddings of each token's (frame, row, col).
Tensor positional_embedding(const DitConfig& config);
/// Sinusoidal features of a timestep (length dim).
Tensor timestep_features(int t, std::size_t dim);

struct LayerTaps {
  std::vector<Tensor> attention;  // MHA outputs per layer
  std::vector<Tensor> mlp;        // MLP outputs per layer
  Tensor final_hidden;            // residual stream after the last layer
};

struct LayerCache {
  Tensor x_in, h1;
  MhaCache mha;
  Tensor x_mid, h2, pre_act, act;
};

struct DitCache {
  Tensor tokens;
  int t = 0;
  Tensor features;  // timestep features
  std::vector<LayerCache> layers;
  Tensor x_final, y_final;
};

struct DitOutput {
  Tensor eps;
  LayerTaps taps;
};

DitOutput dit_forward(const ToyDiT& m, const Tensor& tokens, int t, DitCache* cache = nullptr,
                      Exec exec = Exec::serial);

/// Extra upstream gradients injected at the taps; empty tensors count as zero.
struct TapGrads {
  std::vector<Tensor> attention;
  std::vector<Tensor> mlp;
  Tensor final_hidden;
};

/// Accumulates d(objective)/d(params) into grads given d/d(eps) and optional
/// tap gradients.
void dit_backward(const ToyDiT& m, const DitCache& cache, const Tensor& d_eps,
                  const TapGrads* taps, DitParams& grads);

/// Wraps a model as an ε-predictor for the sampler and loss helpers.
EpsPredictor predictor(const ToyDiT& m, Exec exec = Exec::serial);

VideoLatent ddim_sample(const ToyDiT& m, const DiffusionSchedule& s, int num_steps, Rng& rng);

}  // namespace tiledit

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tiledit/attention.hpp"
#include "tiledit/rng.hpp"
#include "tiledit/tensor.hpp"

namespace tiledit {

/// Latent video, values laid out [frames][height][width][channels].
struct VideoLatent {
  std::size_t frames = 0, height = 0, width = 0, channels = 0;
  Tensor values;

  VideoLatent() = default;
  VideoLatent(std::size_t f, std::size_t h, std::size_t w, std::size_t c);
  double& at(std::size_t f, std::size_t y, std::size_t x, std::size_t ch);
  double at(std::size_t f, std::size_t y, std::size_t x, std::size_t ch) const;
};

/// Location of a token in the frame-major flattening.
struct TokenCoord {
  std::size_t frame, row, col;
  bool operator==(const TokenCoord&) const = default;
};

TokenCoord token_coord(std::size_t token, std::size_t grid_h, std::size_t grid_w);

/// (h/p)·(w/p) tokens per frame, frames in order, rows then columns inside a
/// frame. Each token carries p·p·c values ordered (dy, dx, channel).
Tensor patchify(const VideoLatent& v, std::size_t patch);
VideoLatent unpatchify(const Tensor& tokens, std::size_t frames, std::size_t height,
                       std::size_t width, std::size_t channels, std::size_t patch);

/// Seeded translating Gaussian blobs; background -1, peaks near +1.
VideoLatent synthetic_video(std::size_t frames, std::size_t height, std::size_t width,
                            std::size_t channels, Rng& rng);

/// Deterministic dataset: sample i is synthetic_video seeded from (seed, i).
class SyntheticDataset {
public:
  SyntheticDataset(std::size_t frames, std::size_t height, std::size_t width, std::size_t channels,
                   std::size_t patch, std::uint64_t seed);

  VideoLatent video(std::uint64_t index) const;
  Tensor tokens(std::uint64_t index) const;
  std::vector<Tensor> batch(std::uint64_t first, std::size_t count) const;

private:
  std::size_t frames_, height_, width_, channels_, patch_;
  std::uint64_t seed_;
};

}  // namespace tiledit

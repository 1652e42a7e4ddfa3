#include "tiledit/video.hpp"

#include <cmath>

namespace tiledit {

VideoLatent::VideoLatent(std::size_t f, std::size_t h, std::size_t w, std::size_t c)
    : frames(f), height(h), width(w), channels(c), values({f, h, w, c}) {}

double& VideoLatent::at(std::size_t f, std::size_t y, std::size_t x, std::size_t ch) {
  return values[((f * height + y) * width + x) * channels + ch];
}

double VideoLatent::at(std::size_t f, std::size_t y, std::size_t x, std::size_t ch) const {
  return values[((f * height + y) * width + x) * channels + ch];
}

TokenCoord token_coord(std::size_t token, std::size_t grid_h, std::size_t grid_w) {
  const std::size_t per_frame = grid_h * grid_w;
  const std::size_t in_frame = token % per_frame;
  return {token / per_frame, in_frame / grid_w, in_frame % grid_w};
}

Tensor patchify(const VideoLatent& v, std::size_t patch) {
  if (patch == 0 || v.height % patch != 0 || v.width % patch != 0) {
    throw GeometryError("patchify: " + std::to_string(v.height) + "x" + std::to_string(v.width) +
                        " not divisible by patch " + std::to_string(patch));
  }
  const std::size_t gh = v.height / patch, gw = v.width / patch;
  const std::size_t in_dim = patch * patch * v.channels;
  Tensor tokens({v.frames * gh * gw, in_dim});
  for (std::size_t f = 0; f < v.frames; ++f)
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t c = 0; c < gw; ++c) {
        const std::size_t t = (f * gh + r) * gw + c;
        std::size_t e = 0;
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            for (std::size_t ch = 0; ch < v.channels; ++ch)
              tokens(t, e++) = v.at(f, r * patch + dy, c * patch + dx, ch);
      }
  return tokens;
}

VideoLatent unpatchify(const Tensor& tokens, std::size_t frames, std::size_t height,
                       std::size_t width, std::size_t channels, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0) {
    throw GeometryError("unpatchify: geometry not divisible by patch");
  }
  const std::size_t gh = height / patch, gw = width / patch;
  if (tokens.rank() != 2 || tokens.rows() != frames * gh * gw ||
      tokens.cols() != patch * patch * channels) {
    throw GeometryError("unpatchify: token tensor " + shape_string(tokens.shape()) +
                        " does not match geometry");
  }
  VideoLatent v(frames, height, width, channels);
  for (std::size_t f = 0; f < frames; ++f)
    for (std::size_t r = 0; r < gh; ++r)
      for (std::size_t c = 0; c < gw; ++c) {
        const std::size_t t = (f * gh + r) * gw + c;
        std::size_t e = 0;
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx)
            for (std::size_t ch = 0; ch < channels; ++ch)
              v.at(f, r * patch + dy, c * patch + dx, ch) = tokens(t, e++);
      }
  return v;
}

VideoLatent synthetic_video(std::size_t frames, std::size_t height, std::size_t width,
                            std::size_t channels, Rng& rng) {
  VideoLatent v(frames, height, width, channels);
  const double cy = rng.uniform() * static_cast<double>(height);
  const double cx = rng.uniform() * static_cast<double>(width);
  const double vy = 2.0 * rng.uniform() - 1.0;
  const double vx = 2.0 * rng.uniform() - 1.0;
  const double sigma = 0.8 + 0.7 * rng.uniform();
  std::vector<double> amp(channels);
  for (auto& a : amp) a = 0.7 + 0.3 * rng.uniform();
  const auto wrap = [](double d, double period) {
    d = std::fmod(d, period);
    if (d > period / 2) d -= period;
    if (d < -period / 2) d += period;
    return d;
  };
  for (std::size_t f = 0; f < frames; ++f) {
    const double py = cy + vy * static_cast<double>(f);
    const double px = cx + vx * static_cast<double>(f);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x) {
        const double dy = wrap(static_cast<double>(y) - py, static_cast<double>(height));
        const double dx = wrap(static_cast<double>(x) - px, static_cast<double>(width));
        const double blob = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
        for (std::size_t ch = 0; ch < channels; ++ch) v.at(f, y, x, ch) = -1.0 + 2.0 * amp[ch] * blob;
      }
  }
  return v;
}

SyntheticDataset::SyntheticDataset(std::size_t frames, std::size_t height, std::size_t width,
                                   std::size_t channels, std::size_t patch, std::uint64_t seed)
    : frames_(frames), height_(height), width_(width), channels_(channels), patch_(patch),
      seed_(seed) {}

VideoLatent SyntheticDataset::video(std::uint64_t index) const {
  Rng rng(mix_seed(seed_ ^ mix_seed(index)));
  return synthetic_video(frames_, height_, width_, channels_, rng);
}

Tensor SyntheticDataset::tokens(std::uint64_t index) const { return patchify(video(index), patch_); }

std::vector<Tensor> SyntheticDataset::batch(std::uint64_t first, std::size_t count) const {
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(tokens(first + i));
  return out;
}

}  // namespace tiledit

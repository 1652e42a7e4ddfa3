#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "tiledit/dit.hpp"

namespace tiledit {

/// Post-softmax attention weights over frame-major tokens.
struct AttnMap {
  Tensor weights;  // n×n
  std::size_t frames = 0;
  std::size_t tokens_per_frame = 0;

  void validate() const;
};

struct DiagonalStats {
  double diag_mean = 0.0;
  double offdiag_mean = 0.0;
  double ratio = 0.0;
};

DiagonalStats diagonal_ratio(const AttnMap& map);

/// Entry j-1 is the mean absolute elementwise difference between the
/// first-frame tile (0,0) and tile (0,j), j = 1..F-1.
std::vector<double> locality_curve(const AttnMap& map);

/// Positions of the smallest prefix (by descending weight, ties by row then
/// column) whose mass reaches p·total, as flat indices in ascending order.
std::vector<std::size_t> top_mass_positions(const Tensor& weights, double p);

/// Jaccard overlap of the two top-mass position sets.
double top_mass_overlap(const AttnMap& a, const AttnMap& b, double p);

/// Attention maps of every (layer, head) for one input, in layer-major order.
std::vector<AttnMap> model_attention_maps(const ToyDiT& m, const Tensor& tokens, int t);

struct StatRow {
  std::size_t layer;
  std::size_t head;
  std::string statistic;
  double value;
};

/// Per (layer, head): diagonal statistics and locality curve of the first
/// input, and top-mass overlap between the two inputs at each p.
std::vector<StatRow> tile_statistics(const ToyDiT& m, const Tensor& tokens_a, const Tensor& tokens_b,
                                     int t, const std::vector<double>& mass_levels);

/// CSV with header "layer,head,statistic,value".
std::string stats_csv(const std::vector<StatRow>& rows);

}  // namespace tiledit

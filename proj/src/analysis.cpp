#include "tiledit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tiledit {

void AttnMap::validate() const {
  const std::size_t n = frames * tokens_per_frame;
  if (weights.rank() != 2 || weights.rows() != n || weights.cols() != n)
    throw GeometryError("attention map shape " + shape_string(weights.shape()) +
                        " does not match geometry " + std::to_string(frames) + "x" +
                        std::to_string(tokens_per_frame));
}

DiagonalStats diagonal_ratio(const AttnMap& map) {
  map.validate();
  if (map.frames < 2) throw std::domain_error("diagonal_ratio: a single frame has no off-diagonal tiles");
  const std::size_t S = map.tokens_per_frame, n = map.weights.rows();
  double diag = 0.0, off = 0.0;
  std::size_t nd = 0, no = 0;
  for (std::size_t q = 0; q < n; ++q)
    for (std::size_t k = 0; k < n; ++k) {
      if (q / S == k / S) {
        diag += map.weights(q, k);
        ++nd;
      } else {
        off += map.weights(q, k);
        ++no;
      }
    }
  DiagonalStats st;
  st.diag_mean = diag / static_cast<double>(nd);
  st.offdiag_mean = off / static_cast<double>(no);
  st.ratio = st.diag_mean / st.offdiag_mean;
  return st;
}

std::vector<double> locality_curve(const AttnMap& map) {
  map.validate();
  if (map.frames < 2) throw std::domain_error("locality_curve: need at least two frames");
  const std::size_t S = map.tokens_per_frame;
  std::vector<double> curve;
  for (std::size_t j = 1; j < map.frames; ++j) {
    double sum = 0.0;
    for (std::size_t q = 0; q < S; ++q)
      for (std::size_t k = 0; k < S; ++k) sum += std::abs(map.weights(q, k) - map.weights(q, j * S + k));
    curve.push_back(sum / static_cast<double>(S * S));
  }
  return curve;
}

std::vector<std::size_t> top_mass_positions(const Tensor& w, double p) {
  if (!(p > 0.0 && p <= 1.0)) throw std::invalid_argument("top mass level must lie in (0, 1]");
  std::vector<std::size_t> order(w.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  // Flat row-major index order equals (row, col) lexicographic order.
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return w[a] > w[b]; });
  double total = 0.0;
  for (double v : w.values()) total += v;
  const double target = p * total;
  std::vector<std::size_t> chosen;
  double mass = 0.0;
  for (std::size_t idx : order) {
    if (mass >= target && !chosen.empty()) break;
    chosen.push_back(idx);
    mass += w[idx];
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

double top_mass_overlap(const AttnMap& a, const AttnMap& b, double p) {
  if (a.weights.shape() != b.weights.shape())
    throw GeometryError("top_mass_overlap: maps differ in shape");
  const auto sa = top_mass_positions(a.weights, p);
  const auto sb = top_mass_positions(b.weights, p);
  std::vector<std::size_t> inter, uni;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(inter));
  std::set_union(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(uni));
  return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

std::vector<AttnMap> model_attention_maps(const ToyDiT& m, const Tensor& tokens, int t) {
  DitCache cache;
  dit_forward(m, tokens, t, &cache);
  std::vector<AttnMap> maps;
  for (std::size_t l = 0; l < m.config.layers; ++l) {
    const auto heads = attention_weights(cache.layers[l].h1, m.params.layers[l].attn, m.masks[l].layout());
    for (const auto& w : heads) maps.push_back({w, m.config.frames, m.config.tokens_per_frame()});
  }
  return maps;
}

std::vector<StatRow> tile_statistics(const ToyDiT& m, const Tensor& tokens_a, const Tensor& tokens_b,
                                     int t, const std::vector<double>& mass_levels) {
  const auto ma = model_attention_maps(m, tokens_a, t);
  const auto mb = model_attention_maps(m, tokens_b, t);
  const std::size_t H = m.config.heads;
  std::vector<StatRow> rows;
  for (std::size_t i = 0; i < ma.size(); ++i) {
    const std::size_t layer = i / H, head = i % H;
    const DiagonalStats d = diagonal_ratio(ma[i]);
    rows.push_back({layer, head, "diag_mean", d.diag_mean});
    rows.push_back({layer, head, "offdiag_mean", d.offdiag_mean});
    rows.push_back({layer, head, "diag_ratio", d.ratio});
    const auto curve = locality_curve(ma[i]);
    for (std::size_t j = 0; j < curve.size(); ++j)
      rows.push_back({layer, head, "locality_" + std::to_string(j + 1), curve[j]});
    for (double p : mass_levels) {
      std::ostringstream name;
      name << "overlap_" << p;
      rows.push_back({layer, head, name.str(), top_mass_overlap(ma[i], mb[i], p)});
    }
  }
  return rows;
}

std::string stats_csv(const std::vector<StatRow>& rows) {
  std::ostringstream os;
  os << "layer,head,statistic,value\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.layer << ',' << r.head << ',' << r.statistic << ',' << r.value << '\n';
  return os.str();
}

}  // namespace tiledit

#include "tiledit/tile_mask.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace tiledit {

using json = nlohmann::json;

std::string_view to_string(MaskKind kind) {
  switch (kind) {
    case MaskKind::global_k: return "global_k";
    case MaskKind::full: return "full";
    case MaskKind::custom: return "custom";
  }
  return "custom";
}

MaskKind mask_kind_from_string(std::string_view s) {
  if (s == "global_k") return MaskKind::global_k;
  if (s == "full") return MaskKind::full;
  if (s == "custom") return MaskKind::custom;
  throw std::invalid_argument("unknown mask kind '" + std::string(s) + "'");
}

std::size_t BlockLayout::visit_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks) n += b.keys.size();
  return n;
}

std::size_t BlockLayout::allowed_pairs() const {
  std::size_t n = 0;
  for (const auto& b : blocks) {
    std::size_t keys = 0;
    for (const auto& r : b.keys) keys += r.size();
    n += b.queries.size() * keys;
  }
  return n;
}

std::size_t global_mask_kept_count(std::size_t frames, std::size_t k) {
  return frames + 2 * k * frames - k * k - k;
}

void TileMask::rebuild_index() {
  columns_.assign(frames_, {});
  kept_count_ = 0;
  for (std::size_t i = 0; i < frames_; ++i) {
    for (std::size_t j = 0; j < frames_; ++j) {
      if (grid_[i * frames_ + j]) {
        columns_[i].push_back(j);
        ++kept_count_;
      }
    }
  }
}

TileMask make_global_mask(std::size_t frames, std::size_t k, std::size_t tokens_per_frame) {
  if (frames < 1) throw std::invalid_argument("mask: frames must be >= 1");
  if (tokens_per_frame < 1) throw std::invalid_argument("mask: tokens_per_frame must be >= 1");
  if (k < 1 || k > frames) {
    throw std::invalid_argument("mask: k must lie in [1, " + std::to_string(frames) + "], got " +
                                std::to_string(k));
  }
  TileMask m;
  m.frames_ = frames;
  m.tokens_per_frame_ = tokens_per_frame;
  m.k_ = k;
  m.kind_ = k == frames ? MaskKind::full : MaskKind::global_k;
  for (std::size_t j = 0; j < k; ++j) m.refs_.push_back(j * frames / k);
  m.grid_.assign(frames * frames, false);
  for (std::size_t i = 0; i < frames; ++i) m.grid_[i * frames + i] = true;
  for (std::size_t r : m.refs_) {
    for (std::size_t i = 0; i < frames; ++i) {
      m.grid_[i * frames + r] = true;
      m.grid_[r * frames + i] = true;
    }
  }
  m.rebuild_index();
  return m;
}

TileMask make_full_mask(std::size_t frames, std::size_t tokens_per_frame) {
  return make_global_mask(frames, frames, tokens_per_frame);
}

TileMask make_custom_mask(std::size_t frames, std::size_t tokens_per_frame,
                          const std::vector<std::pair<std::size_t, std::size_t>>& kept,
                          std::vector<std::size_t> refs) {
  if (frames < 1) throw std::invalid_argument("mask: frames must be >= 1");
  if (tokens_per_frame < 1) throw std::invalid_argument("mask: tokens_per_frame must be >= 1");
  TileMask m;
  m.frames_ = frames;
  m.tokens_per_frame_ = tokens_per_frame;
  m.kind_ = MaskKind::custom;
  std::sort(refs.begin(), refs.end());
  if (std::adjacent_find(refs.begin(), refs.end()) != refs.end()) {
    throw std::invalid_argument("mask: duplicate reference frame");
  }
  for (auto r : refs) {
    if (r >= frames) throw std::invalid_argument("mask: reference frame out of range");
  }
  m.refs_ = std::move(refs);
  m.k_ = m.refs_.size();
  m.grid_.assign(frames * frames, false);
  for (std::size_t i = 0; i < frames; ++i) m.grid_[i * frames + i] = true;
  for (auto [i, j] : kept) {
    if (i >= frames || j >= frames) {
      throw std::invalid_argument("mask: block (" + std::to_string(i) + "," + std::to_string(j) +
                                  ") outside " + std::to_string(frames) + "x" +
                                  std::to_string(frames) + " grid");
    }
    m.grid_[i * frames + j] = true;
  }
  m.rebuild_index();
  return m;
}

std::vector<std::pair<std::size_t, std::size_t>> TileMask::kept_blocks() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(kept_count_);
  for (std::size_t i = 0; i < frames_; ++i)
    for (std::size_t j : columns_[i]) out.emplace_back(i, j);
  return out;
}

double TileMask::sparsity() const {
  const double total = static_cast<double>(frames_ * frames_);
  return 1.0 - static_cast<double>(kept_count_) / total;
}

bool TileMask::token_allowed(std::size_t q, std::size_t kx) const {
  if (q >= tokens() || kx >= tokens()) {
    throw std::out_of_range("token index (" + std::to_string(q) + ", " + std::to_string(kx) +
                            ") outside [0, " + std::to_string(tokens()) + ")");
  }
  return block_kept(q / tokens_per_frame_, kx / tokens_per_frame_);
}

BlockLayout TileMask::layout() const {
  BlockLayout out;
  out.tokens = tokens();
  out.blocks.reserve(frames_);
  const std::size_t s = tokens_per_frame_;
  for (std::size_t i = 0; i < frames_; ++i) {
    QueryBlock qb;
    qb.queries = {i * s, (i + 1) * s};
    for (std::size_t j : columns_[i]) qb.keys.push_back({j * s, (j + 1) * s});
    out.blocks.push_back(std::move(qb));
  }
  return out;
}

std::string TileMask::label() const {
  if (kind_ == MaskKind::full) return "full";
  if (kind_ == MaskKind::global_k) return std::to_string(k_) + ":" + std::to_string(frames_ - k_);
  return "custom(" + std::to_string(kept_count_) + "/" + std::to_string(frames_ * frames_) + ")";
}

bool TileMask::operator==(const TileMask& other) const {
  return frames_ == other.frames_ && tokens_per_frame_ == other.tokens_per_frame_ &&
         k_ == other.k_ && kind_ == other.kind_ && refs_ == other.refs_ && grid_ == other.grid_;
}

MmDitMask::MmDitMask(TileMask base, std::size_t text_len)
    : base_(std::move(base)), text_len_(text_len) {}

bool MmDitMask::token_allowed(std::size_t q, std::size_t kx) const {
  if (q >= tokens() || kx >= tokens()) {
    throw std::out_of_range("token index (" + std::to_string(q) + ", " + std::to_string(kx) +
                            ") outside [0, " + std::to_string(tokens()) + ")");
  }
  const std::size_t video = base_.tokens();
  if (q >= video || kx >= video) return true;
  return base_.token_allowed(q, kx);
}

BlockLayout MmDitMask::layout() const {
  BlockLayout out = base_.layout();
  if (text_len_ == 0) return out;
  const std::size_t video = base_.tokens();
  const TokenRange text{video, video + text_len_};
  for (auto& qb : out.blocks) qb.keys.push_back(text);
  QueryBlock text_rows;
  text_rows.queries = text;
  text_rows.keys.push_back({0, video + text_len_});
  out.blocks.push_back(std::move(text_rows));
  out.tokens = tokens();
  return out;
}

MmDitMask extend_mmdit(const TileMask& mask, std::size_t text_len) { return {mask, text_len}; }

std::string serialize_mask(const TileMask& mask) {
  // Hand-formatted so each kept block sits on its own line in diffs.
  std::ostringstream os;
  os << "{\n";
  os << "  \"version\": 1,\n";
  os << "  \"kind\": \"" << to_string(mask.kind()) << "\",\n";
  os << "  \"frames\": " << mask.frames() << ",\n";
  os << "  \"tokens_per_frame\": " << mask.tokens_per_frame() << ",\n";
  os << "  \"k\": " << mask.k() << ",\n";
  os << "  \"refs\": [";
  for (std::size_t i = 0; i < mask.refs().size(); ++i) os << (i ? ", " : "") << mask.refs()[i];
  os << "],\n";
  os << "  \"kept_blocks\": [";
  const auto kept = mask.kept_blocks();
  for (std::size_t i = 0; i < kept.size(); ++i) {
    os << (i ? ",\n    " : "\n    ") << "[" << kept[i].first << ", " << kept[i].second << "]";
  }
  os << "\n  ]\n}\n";
  return os.str();
}

namespace {

std::size_t require_uint(const json& doc, const char* key, std::size_t offset) {
  if (!doc.contains(key)) throw MaskParseError(std::string("mask: missing \"") + key + "\"", offset);
  const auto& v = doc.at(key);
  if (!v.is_number_unsigned()) {
    throw MaskParseError(std::string("mask: \"") + key + "\" must be a nonnegative integer", offset);
  }
  return v.get<std::size_t>();
}

}  // namespace

TileMask deserialize_mask(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw MaskParseError(std::string("mask: malformed document: ") + e.what(), e.byte);
  }
  // Structural errors have no finer location than the top-level object.
  const std::size_t at = 0;
  if (!doc.is_object()) throw MaskParseError("mask: document is not an object", at);
  if (require_uint(doc, "version", at) != 1) throw MaskParseError("mask: unsupported version", at);
  if (!doc.contains("kind") || !doc["kind"].is_string()) {
    throw MaskParseError("mask: missing \"kind\"", at);
  }
  MaskKind kind;
  try {
    kind = mask_kind_from_string(doc["kind"].get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw MaskParseError(e.what(), at);
  }
  const std::size_t frames = require_uint(doc, "frames", at);
  const std::size_t tpf = require_uint(doc, "tokens_per_frame", at);
  const std::size_t k = require_uint(doc, "k", at);
  if (frames < 1 || tpf < 1) throw MaskParseError("mask: frames and tokens_per_frame must be >= 1", at);
  if (!doc.contains("refs") || !doc["refs"].is_array()) throw MaskParseError("mask: missing \"refs\"", at);
  if (!doc.contains("kept_blocks") || !doc["kept_blocks"].is_array()) {
    throw MaskParseError("mask: missing \"kept_blocks\"", at);
  }
  std::vector<std::size_t> refs;
  for (const auto& r : doc["refs"]) {
    if (!r.is_number_unsigned()) throw MaskParseError("mask: refs must be nonnegative integers", at);
    refs.push_back(r.get<std::size_t>());
  }
  std::vector<std::pair<std::size_t, std::size_t>> kept;
  for (const auto& b : doc["kept_blocks"]) {
    if (!b.is_array() || b.size() != 2 || !b[0].is_number_unsigned() || !b[1].is_number_unsigned()) {
      throw MaskParseError("mask: kept_blocks entries must be [i, j] pairs", at);
    }
    kept.emplace_back(b[0].get<std::size_t>(), b[1].get<std::size_t>());
  }
  for (std::size_t i = 1; i < kept.size(); ++i) {
    if (!(kept[i - 1] < kept[i])) {
      throw MaskParseError("mask: kept_blocks must be strictly lexicographically sorted", at);
    }
  }
  for (std::size_t i = 0; i < frames; ++i) {
    if (!std::binary_search(kept.begin(), kept.end(), std::make_pair(i, i))) {
      throw MaskParseError("mask: diagonal block (" + std::to_string(i) + "," + std::to_string(i) +
                               ") missing",
                           at);
    }
  }
  TileMask custom;
  try {
    custom = make_custom_mask(frames, tpf, kept, refs);
  } catch (const std::invalid_argument& e) {
    throw MaskParseError(e.what(), at);
  }
  if (kind == MaskKind::custom) return custom;

  TileMask canonical;
  try {
    canonical = make_global_mask(frames, k, tpf);
  } catch (const std::invalid_argument& e) {
    throw MaskParseError(e.what(), at);
  }
  if (canonical.kind() != kind || canonical.refs() != custom.refs() ||
      canonical.kept_blocks() != custom.kept_blocks()) {
    throw MaskParseError("mask: kept_blocks/refs inconsistent with kind " +
                             std::string(to_string(kind)) + " and k=" + std::to_string(k),
                         at);
  }
  return canonical;
}

TileMask load_mask_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open mask file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_mask(ss.str());
}

void save_mask_file(const TileMask& mask, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write mask file " + path);
  out << serialize_mask(mask);
}

}  // namespace tiledit

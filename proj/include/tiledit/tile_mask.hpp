#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tiledit {

enum class MaskKind { global_k, full, custom };

std::string_view to_string(MaskKind kind);
MaskKind mask_kind_from_string(std::string_view s);

class MaskParseError : public std::runtime_error {
public:
  MaskParseError(const std::string& what, std::size_t byte_offset)
      : std::runtime_error(what + " (at byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const { return byte_offset_; }

private:
  std::size_t byte_offset_;
};

/// Half-open token range [begin, end).
struct TokenRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end - begin; }
  bool operator==(const TokenRange&) const = default;
};

/// One query row block and the key ranges it attends to, in ascending key order.
struct QueryBlock {
  TokenRange queries;
  std::vector<TokenRange> keys;
};

/// Block-level description of which (query, key) token pairs are computed.
/// Attention kernels iterate over this instead of a materialized n×n mask.
struct BlockLayout {
  std::size_t tokens = 0;
  std::vector<QueryBlock> blocks;

  std::size_t visit_count() const;
  /// Number of allowed (query, key) token pairs.
  std::size_t allowed_pairs() const;
};

/// Frame-block attention mask over an F×F grid of latent-frame tiles.
///
/// Tokens are frame-major: token q belongs to frame q / tokens_per_frame.
/// Every diagonal block is kept, so every query has at least one key.
class TileMask {
public:
  TileMask() = default;

  std::size_t frames() const { return frames_; }
  std::size_t tokens_per_frame() const { return tokens_per_frame_; }
  std::size_t tokens() const { return frames_ * tokens_per_frame_; }
  MaskKind kind() const { return kind_; }
  /// Reference-frame count; equals refs().size() for canonical masks.
  std::size_t k() const { return k_; }
  const std::vector<std::size_t>& refs() const { return refs_; }

  bool block_kept(std::size_t i, std::size_t j) const { return grid_[i * frames_ + j]; }
  /// Kept key blocks of query block i, ascending.
  const std::vector<std::size_t>& kept_columns(std::size_t i) const { return columns_[i]; }
  /// All kept (i, j) pairs, lexicographically sorted.
  std::vector<std::pair<std::size_t, std::size_t>> kept_blocks() const;
  std::size_t kept_count() const { return kept_count_; }

  double sparsity() const;
  bool token_allowed(std::size_t q, std::size_t kx) const;
  BlockLayout layout() const;

  /// Canonical short name, e.g. "2:6" or "full".
  std::string label() const;

  bool operator==(const TileMask& other) const;

  friend TileMask make_global_mask(std::size_t frames, std::size_t k, std::size_t tokens_per_frame);
  friend TileMask make_custom_mask(std::size_t frames, std::size_t tokens_per_frame,
                                   const std::vector<std::pair<std::size_t, std::size_t>>& kept,
                                   std::vector<std::size_t> refs);

private:
  void rebuild_index();

  std::size_t frames_ = 0;
  std::size_t tokens_per_frame_ = 0;
  std::size_t k_ = 0;
  MaskKind kind_ = MaskKind::custom;
  std::vector<std::size_t> refs_;
  std::vector<bool> grid_;
  std::vector<std::vector<std::size_t>> columns_;
  std::size_t kept_count_ = 0;
};

/// k:F-k mask: diagonal plus the rows and columns of k reference frames
/// placed at floor(j*F/k). k == F gives the full mask.
TileMask make_global_mask(std::size_t frames, std::size_t k, std::size_t tokens_per_frame);
TileMask make_full_mask(std::size_t frames, std::size_t tokens_per_frame);
/// Arbitrary kept set; the diagonal is added if missing.
TileMask make_custom_mask(std::size_t frames, std::size_t tokens_per_frame,
                          const std::vector<std::pair<std::size_t, std::size_t>>& kept,
                          std::vector<std::size_t> refs = {});

/// F + 2kF - k^2 - k.
std::size_t global_mask_kept_count(std::size_t frames, std::size_t k);

/// Video tokens followed by text_len text tokens. Only video-video pairs are
/// sparse; every pair touching a text token is allowed.
class MmDitMask {
public:
  MmDitMask(TileMask base, std::size_t text_len);

  const TileMask& base() const { return base_; }
  std::size_t text_len() const { return text_len_; }
  std::size_t tokens() const { return base_.tokens() + text_len_; }
  bool token_allowed(std::size_t q, std::size_t kx) const;
  BlockLayout layout() const;

private:
  TileMask base_;
  std::size_t text_len_;
};

MmDitMask extend_mmdit(const TileMask& mask, std::size_t text_len);

std::string serialize_mask(const TileMask& mask);
TileMask deserialize_mask(std::string_view text);

TileMask load_mask_file(const std::string& path);
void save_mask_file(const TileMask& mask, const std::string& path);

}  // namespace tiledit

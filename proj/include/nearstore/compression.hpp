// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "nearstore/fp16.hpp"

namespace nearstore {

// Magnitude-selected sparse view of one dense fp16 gradient block.
// Indices are block-relative, strictly ascending, 4 bytes each on the wire.
struct SparseGradient {
  std::uint64_t block_len = 0;
  std::vector<std::uint32_t> indices;
  std::vector<half> values;

  std::size_t k() const { return indices.size(); }
  // Wire payload: k * (4 + 2) bytes. The {block_len, k} header is carried
  // out of band (file header or store manifest).
  std::size_t payload_bytes() const { return k() * 6; }

  void validate() const;  // throws std::invalid_argument on malformed content
};

// Keep the k largest-magnitude elements; ties broken toward the lower index.
// NaN values order above every magnitude so downstream overflow checks still
// see them. Pre: 1 <= k <= dense.size().
SparseGradient compress_topk(std::span<const half> dense, std::size_t k);

// Scatter into a zero-initialized fp32 buffer of block_len elements,
// processing indices in chunks of `chunk` (result is chunk-invariant).
std::vector<float> decompress_scatter(const SparseGradient& sg,
                                      std::size_t chunk = 64);

// Little-endian wire blob: {block_len: u64, k: u64} header, then k u32
// indices, then k fp16 values. Bit-exact round trip.
std::vector<std::byte> encode_sparse(const SparseGradient& sg);
SparseGradient decode_sparse(std::span<const std::byte> bytes);

// Payload-only (headerless) codec used for device extents; {block_len, k}
// live in the store manifest.
void encode_sparse_payload(const SparseGradient& sg, std::span<std::byte> out);
SparseGradient decode_sparse_payload(std::span<const std::byte> payload,
                                     std::uint64_t block_len, std::uint64_t k);

// Kept-pair count such that the 6-byte-pair wire size is pct percent of the
// dense fp16 block bytes: k = max(1, round(block_len * pct / 300)), clamped
// to block_len. Pre: 0 < pct <= 300 (300 keeps every pair).
std::size_t topk_count_for_ratio(std::size_t block_len, double pct);

}  // namespace nearstore

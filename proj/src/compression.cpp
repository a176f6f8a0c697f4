// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/compression.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace nearstore {

namespace {

// Selection key: |value|, with NaN above every magnitude so it is never
// dropped and the overflow gate still sees it after decompression.
float magnitude_key(half h) {
  const float w = widen(h);
  if (std::isnan(w)) return std::numeric_limits<float>::infinity();
  return std::fabs(w);
}

void store_le16(std::byte* p, std::uint16_t v) {
  p[0] = static_cast<std::byte>(v & 0xFFu);
  p[1] = static_cast<std::byte>((v >> 8) & 0xFFu);
}

void store_le32(std::byte* p, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFFu);
}

void store_le64(std::byte* p, std::uint64_t v) {
  for (int i = 0; i < 8; ++i)
    p[i] = static_cast<std::byte>((v >> (8 * i)) & 0xFFu);
}

std::uint16_t load_le16(const std::byte* p) {
  return static_cast<std::uint16_t>(std::to_integer<std::uint32_t>(p[0]) |
                                    (std::to_integer<std::uint32_t>(p[1]) << 8));
}

std::uint32_t load_le32(const std::byte* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= std::to_integer<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

std::uint64_t load_le64(const std::byte* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= std::to_integer<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

}  // namespace

void SparseGradient::validate() const {
  if (indices.size() != values.size())
    throw std::invalid_argument("SparseGradient: index/value count mismatch");
  if (indices.size() > block_len)
    throw std::invalid_argument("SparseGradient: k exceeds block_len");
  std::uint32_t prev = 0;
  for (std::size_t j = 0; j < indices.size(); ++j) {
    if (indices[j] >= block_len)
      throw std::invalid_argument("SparseGradient: index out of range");
    if (j > 0 && indices[j] <= prev)
      throw std::invalid_argument(
          "SparseGradient: indices must be strictly ascending");
    prev = indices[j];
  }
}

SparseGradient compress_topk(std::span<const half> dense, std::size_t k) {
  if (dense.empty())
    throw std::invalid_argument("compress_topk: empty block");
  if (k == 0 || k > dense.size())
    throw std::invalid_argument("compress_topk: k must be in [1, block_len]");

  std::vector<std::uint32_t> order(dense.size());
  std::iota(order.begin(), order.end(), 0u);
  const auto keep_before = [&dense](std::uint32_t a, std::uint32_t b) {
    const float ka = magnitude_key(dense[a]);
    const float kb = magnitude_key(dense[b]);
    if (ka != kb) return ka > kb;
    return a < b;  // equal magnitudes: lower index wins
  };
  std::partial_sort(order.begin(), order.begin() + static_cast<long>(k),
                    order.end(), keep_before);
  order.resize(k);
  std::sort(order.begin(), order.end());

  SparseGradient sg;
  sg.block_len = dense.size();
  sg.indices = std::move(order);
  sg.values.reserve(k);
  for (const std::uint32_t idx : sg.indices) sg.values.push_back(dense[idx]);
  return sg;
}

std::vector<float> decompress_scatter(const SparseGradient& sg,
                                      std::size_t chunk) {
  if (chunk == 0)
    throw std::invalid_argument("decompress_scatter: chunk must be > 0");
  sg.validate();
  std::vector<float> out(sg.block_len, 0.0f);
  const std::size_t k = sg.k();
  for (std::size_t base = 0; base < k; base += chunk) {
    const std::size_t hi = std::min(base + chunk, k);
    for (std::size_t j = base; j < hi; ++j)
      out[sg.indices[j]] = widen(sg.values[j]);
  }
  return out;
}

std::vector<std::byte> encode_sparse(const SparseGradient& sg) {
  sg.validate();
  std::vector<std::byte> out(16 + sg.payload_bytes());
  store_le64(out.data(), sg.block_len);
  store_le64(out.data() + 8, static_cast<std::uint64_t>(sg.k()));
  encode_sparse_payload(sg, std::span<std::byte>(out).subspan(16));
  return out;
}

void encode_sparse_payload(const SparseGradient& sg, std::span<std::byte> out) {
  if (out.size() != sg.payload_bytes())
    throw std::invalid_argument("encode_sparse_payload: bad output size");
  std::byte* p = out.data();
  for (const std::uint32_t idx : sg.indices) {
    store_le32(p, idx);
    p += 4;
  }
  for (const half v : sg.values) {
    store_le16(p, v.bits);
    p += 2;
  }
}

SparseGradient decode_sparse_payload(std::span<const std::byte> payload,
                                     std::uint64_t block_len, std::uint64_t k) {
  if (payload.size() != k * 6)
    throw std::runtime_error("sparse payload: truncated or oversized");
  SparseGradient sg;
  sg.block_len = block_len;
  sg.indices.resize(k);
  sg.values.resize(k);
  const std::byte* p = payload.data();
  for (std::uint64_t j = 0; j < k; ++j) {
    sg.indices[j] = load_le32(p);
    p += 4;
  }
  for (std::uint64_t j = 0; j < k; ++j) {
    sg.values[j] = half{load_le16(p)};
    p += 2;
  }
  sg.validate();
  return sg;
}

SparseGradient decode_sparse(std::span<const std::byte> bytes) {
  if (bytes.size() < 16)
    throw std::runtime_error("sparse blob: truncated header");
  const std::uint64_t block_len = load_le64(bytes.data());
  const std::uint64_t k = load_le64(bytes.data() + 8);
  if (k > block_len) throw std::runtime_error("sparse blob: k exceeds block_len");
  if (bytes.size() != 16 + k * 6)
    throw std::runtime_error("sparse blob: size does not match header");
  return decode_sparse_payload(bytes.subspan(16), block_len, k);
}

std::size_t topk_count_for_ratio(std::size_t block_len, double pct) {
  if (block_len == 0)
    throw std::invalid_argument("topk_count_for_ratio: empty block");
  if (!(pct > 0.0 && pct <= 300.0))
    throw std::invalid_argument("topk_count_for_ratio: pct must be in (0,300]");
  // Ratio is wire bytes over dense fp16 bytes: 6k = (pct/100) * 2 * block_len.
  const auto k = static_cast<std::size_t>(
      std::llround(static_cast<double>(block_len) * pct / 300.0));
  return std::max<std::size_t>(1, std::min(block_len, k));
}

}  // namespace nearstore

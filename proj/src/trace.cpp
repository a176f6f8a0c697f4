// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#include "nearstore/trace.hpp"

#include <stdexcept>

namespace nearstore {

std::string to_string(Phase p) {
  switch (p) {
    case Phase::init: return "init";
    case Phase::forward: return "forward";
    case Phase::backward: return "backward";
    case Phase::update: return "update";
  }
  throw std::logic_error("unknown Phase");
}

bool is_transfer(OpKind k) {
  switch (k) {
    case OpKind::host_read:
    case OpKind::host_write:
    case OpKind::p2p_read:
    case OpKind::p2p_write:
      return true;
    default:
      return false;
  }
}

std::string to_string(OpKind k) {
  switch (k) {
    case OpKind::host_read: return "host_read";
    case OpKind::host_write: return "host_write";
    case OpKind::p2p_read: return "p2p_read";
    case OpKind::p2p_write: return "p2p_write";
    case OpKind::gpu_forward: return "gpu_forward";
    case OpKind::gpu_backward: return "gpu_backward";
    case OpKind::gpu_compress: return "gpu_compress";
    case OpKind::cpu_update: return "cpu_update";
    case OpKind::accel_update: return "accel_update";
    case OpKind::accel_decomp: return "accel_decomp";
  }
  throw std::logic_error("unknown OpKind");
}

}  // namespace nearstore

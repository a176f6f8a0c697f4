// Copyright (c) 2026 nearstore contributors.
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace nearstore {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // first failed assertion, or a short summary
};

// Self-contained conformance checks the CLI exposes. Each builds its own
// fixtures; `scratch` is wiped and reused for file-backed ones.

// update_in_place vs an independent scalar reference, bit-exact.
CheckResult check_updater_oracle(std::uint64_t seed = 123);
// compress/decompress vs a brute-force sort oracle, plus chunk invariance.
CheckResult check_sparse_roundtrip(std::uint64_t seed = 123);
// mem / base / su / su_o parameter bits equal at every step.
CheckResult check_mode_equivalence(const std::filesystem::path& scratch);
// Per-iteration host-edge byte signatures for every mode.
CheckResult check_ledger_signatures(const std::filesystem::path& scratch);
// Store persistence round trip; `corrupt` flips one backing-file byte
// between save and reopen to prove the comparison actually detects damage.
CheckResult check_store_persistence(const std::filesystem::path& scratch,
                                    bool corrupt = false);

std::vector<CheckResult> run_conformance_checks(
    const std::filesystem::path& scratch);

}  // namespace nearstore

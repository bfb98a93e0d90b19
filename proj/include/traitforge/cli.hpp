#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>

namespace traitforge::cli {

// Entry point behind the `traitforge` binary. `args[0]` is the program name.
// Returns 0 on success, 1 for usage errors, 2 for data/validation errors, 3 for IO errors.
int run(std::span<const std::string> args, std::ostream& out, std::ostream& err);
int run(std::span<const std::string> args);

// Seed precedence: explicit flag, then TRAITFORGE_SEED, then whatever the recipe holds.
std::optional<std::uint64_t> resolve_seed(std::optional<std::uint64_t> flag, const char* env_value);

}  // namespace traitforge::cli

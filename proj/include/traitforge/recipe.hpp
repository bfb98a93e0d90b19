#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "traitforge/delta.hpp"
#include "traitforge/merge.hpp"

namespace traitforge {

struct DeltaFile {
  std::filesystem::path path;
  bool operator==(const DeltaFile&) const = default;
};

struct CheckpointPair {
  std::filesystem::path tuned;
  std::filesystem::path base;
  bool operator==(const CheckpointPair&) const = default;
};

struct RecipeEntry {
  std::variant<DeltaFile, CheckpointPair> source;
  double alpha = 1.0;
  std::optional<std::string> label;
};

// One merge job. JSON keys mirror the field names; relative paths in a recipe
// file resolve against the file's directory.
struct MergeRecipe {
  std::filesystem::path base;
  std::vector<RecipeEntry> inputs;
  MergeMethod method;
  ComponentFilter filter;
  std::vector<std::filesystem::path> passthrough;
  std::filesystem::path output;
  OutputDtypePolicy output_dtype = OutputDtypePolicy::preserve();
  // Pair entries drop tensors present on only one side instead of failing.
  bool skip_missing = false;
};

MergeRecipe parse_recipe(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
MergeRecipe load_recipe(const std::filesystem::path& path);
nlohmann::json to_json(const MergeRecipe& recipe);
void save_recipe(const std::filesystem::path& path, const MergeRecipe& recipe);

enum class Severity { Error, Warning };

struct Diagnostic {
  Severity severity;
  std::string message;
};

// Sum of |alpha| above which instruction following was seen to degrade.
inline constexpr double kTotalScaleWarning = 2.0;

std::vector<Diagnostic> validate(const MergeRecipe& recipe);
bool has_errors(const std::vector<Diagnostic>& diagnostics);

struct ExecuteOptions {
  unsigned jobs = 1;
  // Replaces the recipe's DaRE seed when set.
  std::optional<std::uint64_t> seed;
};

MergeReport execute(const MergeRecipe& recipe, const ExecuteOptions& options = {});
nlohmann::json to_json(const MergeReport& report);

// Sweep axes keyed by entry label; the key "*" scales every entry jointly.
using Sweep = std::map<std::string, std::vector<double>>;

std::vector<MergeRecipe> plan_sweep(const MergeRecipe& tmpl, const Sweep& sweep);

// Inclusive arithmetic progression, snapped to 12 decimals so 0.1 steps stay clean.
std::vector<double> alpha_range(double start, double stop, double step);
// One decimal, e.g. "0.4", "-1.0".
std::string format_alpha(double alpha);

}  // namespace traitforge

#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "traitforge/delta.hpp"

namespace traitforge {

// Cosine similarity over the tensors both deltas share, flattened in
// lexicographic name order and accumulated in double precision. Throws when
// the deltas share no tensor or either restriction has zero norm.
double cosine(const DeltaVector& a, const DeltaVector& b);
double cosine(const DeltaSource& a, const DeltaSource& b);

struct SimilarityMatrix {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> values;

  std::size_t size() const { return labels.size(); }
};

struct LabeledDelta {
  std::string label;
  std::shared_ptr<const DeltaSource> delta;
};

// Pairwise cosine matrix. Tensors are visited one name at a time, so only
// one tensor per delta is resident at any moment.
SimilarityMatrix similarity_matrix(std::span<const LabeledDelta> deltas, unsigned jobs = 1);

struct FlaggedPair {
  std::string a;
  std::string b;
  double value = 0.0;
};

inline constexpr double kDefaultSimilarityThreshold = 0.3;

// Off-diagonal pairs (i < j) strictly above `threshold`.
std::vector<FlaggedPair> flag_pairs(const SimilarityMatrix& m, double threshold = kDefaultSimilarityThreshold);

nlohmann::json to_json(const SimilarityMatrix& m, double threshold);
// "a,b,cosine" header, then one row per ordered pair including the diagonal.
std::string to_csv(const SimilarityMatrix& m);

struct FeatureBounds {
  std::string feature;
  double min = 0.0;
  double max = 1.0;
};

struct CompositeScoreSpec {
  Trait trait = Trait::OPN;
  std::vector<FeatureBounds> features;

  void validate() const;
};

// Mean of min-max normalized features, each clamped to [0, 1].
double composite_score(const std::map<std::string, double>& features, const CompositeScoreSpec& spec);

// LIWC-22 indicators associated with each Big Five trait.
std::vector<std::string> default_trait_features(Trait trait);

// Per-feature min/max over a sample population.
CompositeScoreSpec corpus_spec(Trait trait, const std::vector<std::string>& features,
                               std::span<const std::map<std::string, double>> samples);

struct Series {
  std::vector<double> xs;
  std::vector<double> ys;
};

// Sample Pearson correlation; throws on length mismatch, n < 2 or a constant series.
double pearson(std::span<const double> xs, std::span<const double> ys);
inline double pearson(const Series& s) { return pearson(s.xs, s.ys); }

}  // namespace traitforge

#include "traitforge/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <set>
#include <sstream>

#include "traitforge/error.hpp"

namespace traitforge {

namespace {

double dot(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += static_cast<double>(a[j]) * static_cast<double>(b[j]);
  return s;
}

double finish_cosine(double ab, double aa, double bb, const std::string& what) {
  if (aa == 0.0 || bb == 0.0) throw data_error("cosine undefined for zero-norm operand (" + what + ")");
  return std::clamp(ab / (std::sqrt(aa) * std::sqrt(bb)), -1.0, 1.0);
}

}  // namespace

double cosine(const DeltaVector& a, const DeltaVector& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  bool shared = false;
  for (const auto& [name, ta] : a.entries) {
    auto it = b.entries.find(name);
    if (it == b.entries.end()) continue;
    if (ta.meta().shape != it->second.meta().shape) throw data_error("shape mismatch for '" + name + "'");
    shared = true;
    const auto va = ta.values();
    const auto vb = it->second.values();
    ab += dot(va, vb);
    aa += dot(va, va);
    bb += dot(vb, vb);
  }
  if (!shared) throw data_error("cosine undefined: deltas share no tensor");
  return finish_cosine(ab, aa, bb, "shared tensors");
}

double cosine(const DeltaSource& a, const DeltaSource& b) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  bool shared = false;
  for (const auto& name : a.names()) {
    if (!b.contains(name)) continue;
    shared = true;
    const TensorData ta = a.load(name);
    const TensorData tb = b.load(name);
    if (ta.meta().shape != tb.meta().shape) throw data_error("shape mismatch for '" + name + "'");
    ab += dot(ta.values(), tb.values());
    aa += dot(ta.values(), ta.values());
    bb += dot(tb.values(), tb.values());
  }
  if (!shared) throw data_error("cosine undefined: deltas share no tensor");
  return finish_cosine(ab, aa, bb, "shared tensors");
}

SimilarityMatrix similarity_matrix(std::span<const LabeledDelta> deltas, unsigned jobs) {
  const std::size_t n = deltas.size();
  if (n < 2) throw data_error("similarity matrix needs at least two deltas");
  jobs = std::max(1u, jobs);

  std::set<std::string> names;
  for (const auto& d : deltas)
    for (const auto& name : d.delta->names()) names.insert(name);

  // dots[i][j] for i <= j; norms[i][j] = squared norm of i restricted to names shared with j
  std::vector<std::vector<double>> dots(n, std::vector<double>(n, 0.0));
  std::vector<std::vector<double>> norms(n, std::vector<double>(n, 0.0));
  std::vector<std::vector<bool>> shared(n, std::vector<bool>(n, false));

  for (const auto& name : names) {
    std::vector<std::size_t> present;
    std::vector<TensorData> loaded;
    for (std::size_t i = 0; i < n; ++i) {
      if (!deltas[i].delta->contains(name)) continue;
      present.push_back(i);
      loaded.push_back(deltas[i].delta->load(name));
      if (loaded.back().meta().shape != loaded.front().meta().shape)
        throw data_error("shape mismatch for '" + name + "' between " + deltas[present.front()].label + " and " +
                         deltas[i].label);
    }
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t p = 0; p < present.size(); ++p)
      for (std::size_t q = p; q < present.size(); ++q) pairs.emplace_back(p, q);
    std::vector<double> partial(pairs.size());
    auto work = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t k = lo; k < hi; ++k) partial[k] = dot(loaded[pairs[k].first].values(), loaded[pairs[k].second].values());
    };
    if (jobs == 1 || pairs.size() < 2) {
      work(0, pairs.size());
    } else {
      std::vector<std::future<void>> fs;
      const std::size_t chunk = (pairs.size() + jobs - 1) / jobs;
      for (std::size_t lo = 0; lo < pairs.size(); lo += chunk)
        fs.push_back(std::async(std::launch::async, work, lo, std::min(pairs.size(), lo + chunk)));
      for (auto& f : fs) f.get();
    }
    std::vector<double> self(present.size());
    for (std::size_t k = 0; k < pairs.size(); ++k)
      if (pairs[k].first == pairs[k].second) self[pairs[k].first] = partial[k];
    for (std::size_t k = 0; k < pairs.size(); ++k) {
      const std::size_t i = present[pairs[k].first];
      const std::size_t j = present[pairs[k].second];
      dots[i][j] += partial[k];
      norms[i][j] += self[pairs[k].first];
      if (i != j) norms[j][i] += self[pairs[k].second];
      shared[i][j] = shared[j][i] = true;
    }
  }

  SimilarityMatrix m;
  for (const auto& d : deltas) m.labels.push_back(d.label);
  m.values.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      const std::string what = deltas[i].label + " vs " + deltas[j].label;
      if (!shared[i][j]) throw data_error("cosine undefined: " + what + " share no tensor");
      const double v = finish_cosine(dots[i][j], norms[i][j], norms[j][i], what);
      m.values[i][j] = m.values[j][i] = v;
    }
  }
  return m;
}

std::vector<FlaggedPair> flag_pairs(const SimilarityMatrix& m, double threshold) {
  std::vector<FlaggedPair> out;
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = i + 1; j < m.size(); ++j)
      if (m.values[i][j] > threshold) out.push_back({m.labels[i], m.labels[j], m.values[i][j]});
  return out;
}

nlohmann::json to_json(const SimilarityMatrix& m, double threshold) {
  nlohmann::json flagged = nlohmann::json::array();
  for (const auto& p : flag_pairs(m, threshold)) flagged.push_back({{"a", p.a}, {"b", p.b}, {"cosine", p.value}});
  return {{"labels", m.labels}, {"matrix", m.values}, {"threshold", threshold}, {"flagged", std::move(flagged)}};
}

std::string to_csv(const SimilarityMatrix& m) {
  std::ostringstream out;
  out.precision(17);
  out << "a,b,cosine\n";
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m.size(); ++j) out << m.labels[i] << ',' << m.labels[j] << ',' << m.values[i][j] << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// scores

void CompositeScoreSpec::validate() const {
  if (features.empty()) throw data_error("composite score needs at least one feature");
  for (const auto& f : features)
    if (!(f.max > f.min)) throw data_error("feature '" + f.feature + "' has max <= min; normalization undefined");
}

double composite_score(const std::map<std::string, double>& features, const CompositeScoreSpec& spec) {
  spec.validate();
  double sum = 0.0;
  for (const auto& f : spec.features) {
    auto it = features.find(f.feature);
    if (it == features.end()) throw data_error("missing feature '" + f.feature + "'");
    sum += std::clamp((it->second - f.min) / (f.max - f.min), 0.0, 1.0);
  }
  return sum / static_cast<double>(spec.features.size());
}

std::vector<std::string> default_trait_features(Trait trait) {
  switch (trait) {
    case Trait::OPN: return {"article", "curiosity", "emotion", "insight", "lifestyle"};
    case Trait::CON: return {"achieve", "drives", "discrep", "time", "moral"};
    case Trait::EXT: return {"tone_pos", "affect", "affiliation", "tentat", "certitude"};
    case Trait::AGR: return {"emo_neg", "friend", "polite", "tone_pos", "social"};
    case Trait::NEU: return {"discrep", "emo_sad", "prosocial", "tentat", "certitude"};
  }
  return {};
}

CompositeScoreSpec corpus_spec(Trait trait, const std::vector<std::string>& features,
                               std::span<const std::map<std::string, double>> samples) {
  if (samples.empty()) throw data_error("cannot derive feature bounds from an empty sample set");
  CompositeScoreSpec spec{trait, {}};
  for (const auto& name : features) {
    FeatureBounds b{name, INFINITY, -INFINITY};
    for (const auto& s : samples) {
      auto it = s.find(name);
      if (it == s.end()) throw data_error("missing feature '" + name + "'");
      b.min = std::min(b.min, it->second);
      b.max = std::max(b.max, it->second);
    }
    spec.features.push_back(b);
  }
  return spec;
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw data_error("pearson: series lengths differ");
  if (xs.size() < 2) throw data_error("pearson: need at least two points");
  const auto n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw data_error("pearson: correlation undefined for a constant series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

}  // namespace traitforge

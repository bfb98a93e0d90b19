#include "traitforge/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "traitforge/analysis.hpp"
#include "traitforge/delta.hpp"
#include "traitforge/error.hpp"
#include "traitforge/merge.hpp"
#include "traitforge/recipe.hpp"
#include "traitforge/tensor_store.hpp"

namespace traitforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<std::uint64_t> resolve_seed(std::optional<std::uint64_t> flag, const char* env_value) {
  if (flag) return flag;
  if (env_value == nullptr || *env_value == '\0') return std::nullopt;
  const std::string text(env_value);
  std::uint64_t v = 0;
  std::size_t used = 0;
  try {
    v = std::stoull(text, &used, 10);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != text.size() || text.front() == '-') throw usage_error("TRAITFORGE_SEED must be an unsigned integer, got '" + text + "'");
  return v;
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot create " + path.string());
  f << text;
  if (!f) throw io_error("write failed on " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return json::parse(buf.str());
  } catch (const json::exception& e) {
    throw data_error(path.string() + " is not valid JSON: " + e.what());
  }
}

// Emits JSON to `path`, or to `out` when no path is given.
void emit(const json& doc, const std::string& path, std::ostream& out) {
  if (path.empty())
    out << doc.dump(2) << '\n';
  else
    write_text(path, doc.dump(2) + "\n");
}

std::optional<std::uint64_t> seed_for(const std::optional<std::uint64_t>& flag) {
  return resolve_seed(flag, std::getenv("TRAITFORGE_SEED"));
}

bool report_diagnostics(const std::vector<Diagnostic>& diags, std::ostream& err, const std::string& context = "") {
  for (const auto& d : diags)
    err << (d.severity == Severity::Error ? "error: " : "warning: ") << context << d.message << '\n';
  return has_errors(diags);
}

// label=0.1,0.2 or label=0.1:2.0:0.1
std::pair<std::string, std::vector<double>> parse_sweep_axis(const std::string& spec) {
  const auto eq = spec.rfind('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
    throw usage_error("sweep axis must look like label=a,b,c or label=start:stop:step, got '" + spec + "'");
  const std::string label = spec.substr(0, eq);
  const std::string values = spec.substr(eq + 1);
  auto number = [&](const std::string& s) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != s.size() || !std::isfinite(v)) throw usage_error("bad alpha '" + s + "' in '" + spec + "'");
    return v;
  };
  std::vector<std::string> parts;
  const char sep = values.find(':') != std::string::npos ? ':' : ',';
  std::stringstream ss(values);
  for (std::string part; std::getline(ss, part, sep);) parts.push_back(part);
  if (sep == ':') {
    if (parts.size() != 3) throw usage_error("range '" + values + "' must be start:stop:step");
    return {label, alpha_range(number(parts[0]), number(parts[1]), number(parts[2]))};
  }
  std::vector<double> alphas;
  for (const auto& p : parts) alphas.push_back(number(p));
  return {label, alphas};
}

// ---------------------------------------------------------------------------
// subcommands

struct ExtractArgs {
  std::string tuned, base, out, trait, polarity, output_dtype = "f32";
  std::vector<std::string> include, exclude;
  bool skip_missing = false;
  unsigned jobs = 1;
};

int do_extract(const ExtractArgs& a, std::ostream& out) {
  if (a.trait.empty() != a.polarity.empty()) throw usage_error("--trait and --polarity must be given together");
  std::optional<TraitLabel> label;
  if (!a.trait.empty()) label = TraitLabel{parse_trait(a.trait), parse_polarity(a.polarity)};
  const auto policy = OutputDtypePolicy::parse(a.output_dtype);
  const PairDelta delta(Checkpoint::open(a.tuned), Checkpoint::open(a.base),
                        ExtractOptions{ComponentFilter{a.include, a.exclude}, a.skip_missing});
  write_delta(a.out, delta, label, policy, a.jobs);
  json summary = {{"out", a.out}, {"tensors", delta.names().size()}, {"base_id", delta.base_id()},
                  {"tuned_id", delta.tuned_id()}};
  if (label) summary["trait"] = label->str();
  out << summary.dump(2) << '\n';
  return 0;
}

struct MergeArgs {
  std::string recipe, report;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  bool dry_run = false;
};

int do_merge(const MergeArgs& a, std::ostream& out, std::ostream& err) {
  MergeRecipe recipe = load_recipe(a.recipe);
  const auto seed = seed_for(a.seed);
  if (seed && recipe.method.dare) recipe.method.dare->seed = *seed;
  if (report_diagnostics(validate(recipe), err)) return static_cast<int>(ErrorKind::data);
  if (a.dry_run) {
    out << json{{"valid", true}, {"output", recipe.output.string()}}.dump(2) << '\n';
    return 0;
  }
  const MergeReport report = execute(recipe, ExecuteOptions{a.jobs, std::nullopt});
  emit(to_json(report), a.report, out);
  return 0;
}

struct SweepArgs {
  std::string recipe, plan_dir;
  std::vector<std::string> axes;
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  bool plan_only = false;
};

int do_sweep(const SweepArgs& a, std::ostream& out, std::ostream& err) {
  MergeRecipe tmpl = load_recipe(a.recipe);
  const auto seed = seed_for(a.seed);
  if (seed && tmpl.method.dare) tmpl.method.dare->seed = *seed;
  Sweep sweep;
  for (const auto& spec : a.axes) {
    auto [label, alphas] = parse_sweep_axis(spec);
    if (!sweep.emplace(label, std::move(alphas)).second) throw usage_error("sweep label '" + label + "' given twice");
  }
  const auto recipes = plan_sweep(tmpl, sweep);

  json listing = json::array();
  bool failed = false;
  for (std::size_t i = 0; i < recipes.size(); ++i) {
    const auto diags = validate(recipes[i]);
    failed = report_diagnostics(diags, err, recipes[i].output.filename().string() + ": ") || failed;
    json item = {{"output", recipes[i].output.string()}};
    if (!a.plan_dir.empty()) {
      fs::path p = fs::path(a.plan_dir) / recipes[i].output.stem();
      p += ".recipe.json";
      save_recipe(p, recipes[i]);
      item["recipe"] = p.string();
    }
    listing.push_back(std::move(item));
  }
  if (failed) return static_cast<int>(ErrorKind::data);
  if (!a.plan_only) {
    for (std::size_t i = 0; i < recipes.size(); ++i)
      listing[i]["report"] = to_json(execute(recipes[i], ExecuteOptions{a.jobs, std::nullopt}));
  }
  out << listing.dump(2) << '\n';
  return 0;
}

struct NegateArgs {
  std::string base, delta, tuned, out, output_dtype = "preserve", report;
  unsigned jobs = 1;
};

int do_negate(const NegateArgs& a, std::ostream& out, std::ostream& err) {
  if (a.delta.empty() == a.tuned.empty()) throw usage_error("negate needs exactly one of --delta or --tuned");
  MergeRecipe r;
  r.base = a.base;
  r.output = a.out;
  r.output_dtype = OutputDtypePolicy::parse(a.output_dtype);
  RecipeEntry e;
  if (!a.delta.empty())
    e.source = DeltaFile{a.delta};
  else
    e.source = CheckpointPair{a.tuned, a.base};
  e.alpha = -1.0;
  r.inputs.push_back(e);
  if (report_diagnostics(validate(r), err)) return static_cast<int>(ErrorKind::data);
  emit(to_json(execute(r, ExecuteOptions{a.jobs, std::nullopt})), a.report, out);
  return 0;
}

struct SimilarityArgs {
  std::vector<std::string> deltas, labels;
  double threshold = kDefaultSimilarityThreshold;
  std::string out, csv;
  unsigned jobs = 1;
};

int do_similarity(const SimilarityArgs& a, std::ostream& out) {
  if (a.deltas.size() < 2) throw usage_error("similarity needs at least two --deltas");
  if (!a.labels.empty() && a.labels.size() != a.deltas.size())
    throw usage_error("--labels must name every delta");
  std::vector<LabeledDelta> inputs;
  for (std::size_t i = 0; i < a.deltas.size(); ++i) {
    auto source = std::make_shared<StoredDelta>(Checkpoint::open(a.deltas[i]));
    std::string label;
    if (!a.labels.empty())
      label = a.labels[i];
    else if (auto t = source->trait())
      label = t->str();
    else
      label = fs::path(a.deltas[i]).stem().string();
    inputs.push_back({label, std::move(source)});
  }
  const SimilarityMatrix m = similarity_matrix(inputs, a.jobs);
  emit(to_json(m, a.threshold), a.out, out);
  if (!a.csv.empty()) write_text(a.csv, to_csv(m));
  return 0;
}

struct InspectArgs {
  std::string path, tensor;
  bool no_norms = false;
};

int do_inspect(const InspectArgs& a, std::ostream& out) {
  const Checkpoint ckpt = Checkpoint::open(a.path);
  if (!a.tensor.empty()) ckpt.meta(a.tensor);
  json tensors = json::array();
  std::uint64_t elements = 0, bytes = 0;
  for (const auto& [name, m] : ckpt.tensors()) {
    elements += m.elements();
    bytes += m.byte_size();
    if (!a.tensor.empty() && name != a.tensor) continue;
    json t = {{"name", name}, {"dtype", to_string(m.dtype)}, {"shape", m.shape}, {"bytes", m.byte_size()}};
    if (!a.no_norms && is_float(m.dtype)) {
      const TensorData data = ckpt.load(name);
      double s = 0.0;
      for (float v : data.values()) s += static_cast<double>(v) * v;
      t["l2"] = std::sqrt(s);
    }
    tensors.push_back(std::move(t));
  }
  json doc = {{"id", ckpt.id()},
              {"sharded", ckpt.is_sharded()},
              {"metadata", ckpt.metadata()},
              {"tensor_count", ckpt.tensors().size()},
              {"total_elements", elements},
              {"total_bytes", bytes},
              {"tensors", std::move(tensors)}};
  out << doc.dump(2) << '\n';
  return 0;
}

struct ScoreArgs {
  std::string input, out;
};

int do_score(const ScoreArgs& a, std::ostream& out) {
  const json doc = read_json(a.input);
  if (!doc.is_object() || !doc.contains("samples") || !doc["samples"].is_array())
    throw data_error("score input needs a 'samples' array");

  std::map<Trait, std::vector<std::string>> traits;
  if (doc.contains("traits")) {
    for (const auto& [name, feats] : doc["traits"].items())
      traits[parse_trait(name)] = feats.get<std::vector<std::string>>();
  } else {
    for (Trait t : {Trait::OPN, Trait::CON, Trait::EXT, Trait::AGR, Trait::NEU}) traits[t] = default_trait_features(t);
  }

  std::vector<std::string> ids;
  std::vector<std::map<std::string, double>> samples;
  std::vector<std::optional<double>> scales;
  for (const auto& s : doc["samples"]) {
    ids.push_back(s.value("id", std::to_string(ids.size())));
    samples.push_back(s.at("features").get<std::map<std::string, double>>());
    scales.push_back(s.contains("scale") ? std::optional<double>(s["scale"].get<double>()) : std::nullopt);
  }

  json bounds = json::object();
  json scores = json::array();
  for (const auto& id : ids) scores.push_back({{"id", id}});
  json correlations = json::object();
  for (const auto& [trait, feats] : traits) {
    CompositeScoreSpec spec = corpus_spec(trait, feats, samples);
    if (doc.contains("bounds")) {
      for (auto& f : spec.features) {
        if (!doc["bounds"].contains(f.feature)) continue;
        const auto mm = doc["bounds"][f.feature].get<std::vector<double>>();
        if (mm.size() != 2) throw data_error("bounds for '" + f.feature + "' must be [min, max]");
        f.min = mm[0];
        f.max = mm[1];
      }
    }
    for (const auto& f : spec.features) bounds[f.feature] = {f.min, f.max};
    Series series;
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const double s = composite_score(samples[i], spec);
      scores[i][std::string(to_string(trait))] = s;
      if (scales[i]) {
        series.xs.push_back(*scales[i]);
        series.ys.push_back(s);
      }
    }
    json r = nullptr;
    try {
      r = pearson(series);
    } catch (const Error&) {
      // fewer than two scaled samples or a constant series
    }
    correlations[std::string(to_string(trait))] = r;
  }
  emit({{"bounds", bounds}, {"scores", scores}, {"correlations", correlations}}, a.out, out);
  return 0;
}

}  // namespace

int run(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Extract, combine and analyze weight-space trait vectors", "traitforge"};
  app.require_subcommand(1);

  ExtractArgs ex;
  auto* extract = app.add_subcommand("extract", "write tuned - base as a delta container");
  extract->add_option("--tuned", ex.tuned, "fine-tuned checkpoint")->required();
  extract->add_option("--base", ex.base, "base checkpoint")->required();
  extract->add_option("--out", ex.out, "delta output path")->required();
  extract->add_option("--trait", ex.trait, "OPN, CON, EXT, AGR or NEU");
  extract->add_option("--polarity", ex.polarity, "high or low");
  extract->add_option("--include", ex.include, "only tensors with these name prefixes");
  extract->add_option("--exclude", ex.exclude, "skip tensors with these name prefixes");
  extract->add_flag("--skip-missing", ex.skip_missing, "drop tensors present in only one checkpoint");
  extract->add_option("--output-dtype", ex.output_dtype, "f32, f16, bf16 or preserve")->capture_default_str();
  extract->add_option("--jobs", ex.jobs, "worker threads")->check(CLI::PositiveNumber);

  MergeArgs mg;
  auto* merge_cmd = app.add_subcommand("merge", "run a merge recipe");
  merge_cmd->add_option("--recipe", mg.recipe, "recipe JSON")->required();
  merge_cmd->add_option("--seed", mg.seed, "DaRE master seed (overrides TRAITFORGE_SEED and the recipe)");
  merge_cmd->add_option("--jobs", mg.jobs, "worker threads")->check(CLI::PositiveNumber);
  merge_cmd->add_option("--report", mg.report, "write the merge report here instead of stdout");
  merge_cmd->add_flag("--dry-run", mg.dry_run, "validate only");

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep", "expand and run a coefficient grid");
  sweep_cmd->add_option("--recipe", sw.recipe, "template recipe JSON")->required();
  sweep_cmd->add_option("--alphas", sw.axes, "label=a,b,c or label=start:stop:step; label * sweeps all inputs jointly");
  sweep_cmd->add_option("--plan-dir", sw.plan_dir, "write expanded recipes here");
  sweep_cmd->add_flag("--plan-only", sw.plan_only, "expand and validate without merging");
  sweep_cmd->add_option("--seed", sw.seed, "DaRE master seed");
  sweep_cmd->add_option("--jobs", sw.jobs, "worker threads")->check(CLI::PositiveNumber);

  NegateArgs ng;
  auto* negate_cmd = app.add_subcommand("negate", "subtract a delta from a base (alpha = -1)");
  negate_cmd->add_option("--base", ng.base, "base checkpoint")->required();
  negate_cmd->add_option("--delta", ng.delta, "delta container");
  negate_cmd->add_option("--tuned", ng.tuned, "tuned checkpoint (delta extracted against --base)");
  negate_cmd->add_option("--out", ng.out, "output checkpoint")->required();
  negate_cmd->add_option("--output-dtype", ng.output_dtype, "preserve, f32, f16 or bf16")->capture_default_str();
  negate_cmd->add_option("--report", ng.report, "write the merge report here instead of stdout");
  negate_cmd->add_option("--jobs", ng.jobs, "worker threads")->check(CLI::PositiveNumber);

  SimilarityArgs sim;
  auto* sim_cmd = app.add_subcommand("similarity", "pairwise cosine similarity of deltas");
  sim_cmd->add_option("--deltas", sim.deltas, "delta containers")->required();
  sim_cmd->add_option("--labels", sim.labels, "labels, one per delta");
  sim_cmd->add_option("--threshold", sim.threshold, "flag pairs above this cosine")->capture_default_str();
  sim_cmd->add_option("--out", sim.out, "JSON report path (default stdout)");
  sim_cmd->add_option("--csv", sim.csv, "also write label,label,value rows here");
  sim_cmd->add_option("--jobs", sim.jobs, "worker threads")->check(CLI::PositiveNumber);

  InspectArgs in;
  auto* inspect_cmd = app.add_subcommand("inspect", "print header, tensor table and L2 norms");
  inspect_cmd->add_option("path", in.path, "container or shard index")->required();
  inspect_cmd->add_option("--tensor", in.tensor, "only report this tensor");
  inspect_cmd->add_flag("--no-norms", in.no_norms, "skip payload reads");

  ScoreArgs sc;
  auto* score_cmd = app.add_subcommand("score", "composite linguistic scores and scale correlations");
  score_cmd->add_option("--input", sc.input, "samples JSON")->required();
  score_cmd->add_option("--out", sc.out, "report path (default stdout)");

  try {
    std::vector<std::string> rest(args.size() > 1 ? args.begin() + 1 : args.end(), args.end());
    std::reverse(rest.begin(), rest.end());
    app.parse(rest);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::usage);
  }

  try {
    if (extract->parsed()) return do_extract(ex, out);
    if (merge_cmd->parsed()) return do_merge(mg, out, err);
    if (sweep_cmd->parsed()) return do_sweep(sw, out, err);
    if (negate_cmd->parsed()) return do_negate(ng, out, err);
    if (sim_cmd->parsed()) return do_similarity(sim, out);
    if (inspect_cmd->parsed()) return do_inspect(in, out);
    if (score_cmd->parsed()) return do_score(sc, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.kind());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::io);
  } catch (const json::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::data);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::data);
  }
  return static_cast<int>(ErrorKind::usage);
}

int run(std::span<const std::string> args) { return run(args, std::cout, std::cerr); }

}  // namespace traitforge::cli

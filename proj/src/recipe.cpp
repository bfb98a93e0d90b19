#include "traitforge/recipe.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "traitforge/error.hpp"

namespace traitforge {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw data_error("recipe: " + where + " must be an object");
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw data_error("recipe: unknown key '" + key + "' in " + where);
  }
}

const json& field(const json& obj, const char* key, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) throw data_error("recipe: missing '" + std::string(key) + "' in " + where);
  return *it;
}

std::string str_field(const json& obj, const char* key, const std::string& where) {
  const json& v = field(obj, key, where);
  if (!v.is_string()) throw data_error("recipe: '" + std::string(key) + "' in " + where + " must be a string");
  return v.get<std::string>();
}

double num(const json& v, const std::string& what) {
  if (!v.is_number()) throw data_error("recipe: " + what + " must be a number");
  return v.get<double>();
}

std::vector<std::string> str_list(const json& v, const std::string& what) {
  if (!v.is_array()) throw data_error("recipe: " + what + " must be an array of strings");
  std::vector<std::string> out;
  for (const auto& s : v) {
    if (!s.is_string()) throw data_error("recipe: " + what + " must be an array of strings");
    out.push_back(s.get<std::string>());
  }
  return out;
}

fs::path resolve(const fs::path& dir, const std::string& p) { return dir.empty() ? fs::path(p) : dir / p; }

std::string path_key(const fs::path& p) {
  std::error_code ec;
  auto canon = fs::weakly_canonical(p, ec);
  return (ec ? fs::absolute(p).lexically_normal() : canon).string();
}

DareParams parse_dare(const json& d) {
  require_keys(d, "method.dare", {"drop_rate", "seed"});
  DareParams p;
  p.drop_rate = num(field(d, "drop_rate", "method.dare"), "method.dare.drop_rate");
  const json& seed = field(d, "seed", "method.dare");
  if (seed.is_number_unsigned())
    p.seed = seed.get<std::uint64_t>();
  else if (seed.is_number_integer() && seed.get<std::int64_t>() >= 0)
    p.seed = static_cast<std::uint64_t>(seed.get<std::int64_t>());
  else
    throw data_error("recipe: method.dare.seed must be a non-negative integer");
  return p;
}

}  // namespace

MergeRecipe parse_recipe(const json& doc, const fs::path& base_dir) {
  require_keys(doc, "recipe",
               {"base", "inputs", "method", "filter", "passthrough", "output", "output_dtype", "skip_missing"});
  MergeRecipe r;
  r.base = resolve(base_dir, str_field(doc, "base", "recipe"));
  r.output = resolve(base_dir, str_field(doc, "output", "recipe"));

  const json& inputs = field(doc, "inputs", "recipe");
  if (!inputs.is_array()) throw data_error("recipe: 'inputs' must be an array");
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const std::string where = "inputs[" + std::to_string(i) + "]";
    const json& e = inputs[i];
    require_keys(e, where, {"delta", "pair", "alpha", "label"});
    RecipeEntry entry;
    const bool has_delta = e.contains("delta");
    const bool has_pair = e.contains("pair");
    if (has_delta == has_pair) throw data_error("recipe: " + where + " needs exactly one of 'delta' or 'pair'");
    if (has_delta) {
      entry.source = DeltaFile{resolve(base_dir, str_field(e, "delta", where))};
    } else {
      const json& p = e["pair"];
      require_keys(p, where + ".pair", {"tuned", "base"});
      entry.source = CheckpointPair{resolve(base_dir, str_field(p, "tuned", where + ".pair")),
                                    resolve(base_dir, str_field(p, "base", where + ".pair"))};
    }
    entry.alpha = num(field(e, "alpha", where), where + ".alpha");
    if (e.contains("label")) entry.label = str_field(e, "label", where);
    r.inputs.push_back(std::move(entry));
  }

  const json& m = field(doc, "method", "recipe");
  require_keys(m, "method", {"kind", "dare", "ties"});
  const std::string kind = str_field(m, "kind", "method");
  if (kind == "task_arithmetic")
    r.method.kind = MergeKind::TaskArithmetic;
  else if (kind == "ties")
    r.method.kind = MergeKind::Ties;
  else
    throw data_error("recipe: method.kind must be 'task_arithmetic' or 'ties', got '" + kind + "'");
  if (m.contains("dare") && !m["dare"].is_null()) r.method.dare = parse_dare(m["dare"]);
  if (m.contains("ties") && !m["ties"].is_null()) {
    require_keys(m["ties"], "method.ties", {"keep_fraction"});
    r.method.ties = TiesParams{num(field(m["ties"], "keep_fraction", "method.ties"), "method.ties.keep_fraction")};
  }

  if (doc.contains("filter")) {
    const json& f = doc["filter"];
    require_keys(f, "filter", {"include", "exclude"});
    if (f.contains("include")) r.filter.include = str_list(f["include"], "filter.include");
    if (f.contains("exclude")) r.filter.exclude = str_list(f["exclude"], "filter.exclude");
  }
  if (doc.contains("passthrough"))
    for (const auto& p : str_list(doc["passthrough"], "passthrough")) r.passthrough.push_back(resolve(base_dir, p));
  if (doc.contains("output_dtype")) {
    const json& od = doc["output_dtype"];
    if (!od.is_string()) throw data_error("recipe: output_dtype must be a string");
    try {
      r.output_dtype = OutputDtypePolicy::parse(od.get<std::string>());
    } catch (const Error& e) {
      throw data_error(std::string("recipe: ") + e.what());
    }
  }
  if (doc.contains("skip_missing")) {
    if (!doc["skip_missing"].is_boolean()) throw data_error("recipe: skip_missing must be a boolean");
    r.skip_missing = doc["skip_missing"].get<bool>();
  }
  return r;
}

MergeRecipe load_recipe(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open recipe " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  json doc;
  try {
    doc = json::parse(buf.str());
  } catch (const json::exception& e) {
    throw data_error("recipe " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_recipe(doc, path.parent_path());
}

json to_json(const MergeRecipe& r) {
  json doc;
  doc["base"] = r.base.string();
  doc["output"] = r.output.string();
  json inputs = json::array();
  for (const auto& e : r.inputs) {
    json j;
    if (const auto* d = std::get_if<DeltaFile>(&e.source))
      j["delta"] = d->path.string();
    else {
      const auto& p = std::get<CheckpointPair>(e.source);
      j["pair"] = {{"tuned", p.tuned.string()}, {"base", p.base.string()}};
    }
    j["alpha"] = e.alpha;
    if (e.label) j["label"] = *e.label;
    inputs.push_back(std::move(j));
  }
  doc["inputs"] = std::move(inputs);
  json method = {{"kind", to_string(r.method.kind)}};
  if (r.method.dare) method["dare"] = {{"drop_rate", r.method.dare->drop_rate}, {"seed", r.method.dare->seed}};
  if (r.method.ties) method["ties"] = {{"keep_fraction", r.method.ties->keep_fraction}};
  doc["method"] = std::move(method);
  if (!r.filter.include.empty() || !r.filter.exclude.empty())
    doc["filter"] = {{"include", r.filter.include}, {"exclude", r.filter.exclude}};
  if (!r.passthrough.empty()) {
    json p = json::array();
    for (const auto& path : r.passthrough) p.push_back(path.string());
    doc["passthrough"] = std::move(p);
  }
  doc["output_dtype"] = r.output_dtype.str();
  if (r.skip_missing) doc["skip_missing"] = true;
  return doc;
}

void save_recipe(const fs::path& path, const MergeRecipe& recipe) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot create " + path.string());
  out << to_json(recipe).dump(2) << '\n';
  if (!out) throw io_error("write failed on " + path.string());
}

// ---------------------------------------------------------------------------
// validation and execution

namespace {

struct Resolved {
  Checkpoint base;
  std::vector<WeightedDelta> inputs;
  std::vector<Checkpoint> passthrough;
};

// Opens every referenced file (headers only). Problems go to `diags`; returns
// nothing if any input could not be resolved.
std::optional<Resolved> resolve_inputs(const MergeRecipe& r, std::vector<Diagnostic>& diags) {
  auto err = [&](std::string msg) { diags.push_back({Severity::Error, std::move(msg)}); };
  auto open = [&](const fs::path& p) -> std::optional<Checkpoint> {
    if (!fs::exists(p)) {
      err("missing file: " + p.string());
      return std::nullopt;
    }
    try {
      return Checkpoint::open(p);
    } catch (const Error& e) {
      err(e.what());
      return std::nullopt;
    }
  };

  bool ok = true;
  auto base = open(r.base);
  ok = ok && base;
  std::vector<WeightedDelta> inputs;
  for (std::size_t i = 0; i < r.inputs.size(); ++i) {
    const auto& e = r.inputs[i];
    std::shared_ptr<const DeltaSource> source;
    if (const auto* d = std::get_if<DeltaFile>(&e.source)) {
      if (auto ck = open(d->path)) source = std::make_shared<StoredDelta>(*ck);
    } else {
      const auto& p = std::get<CheckpointPair>(e.source);
      auto tuned = open(p.tuned);
      auto pbase = open(p.base);
      if (tuned && pbase) {
        try {
          source = std::make_shared<PairDelta>(*tuned, *pbase, ExtractOptions{r.filter, r.skip_missing});
        } catch (const Error& ex) {
          err("inputs[" + std::to_string(i) + "]: " + ex.what());
        }
      }
    }
    if (!source) {
      ok = false;
      continue;
    }
    inputs.push_back({std::move(source), e.alpha});
  }
  std::vector<Checkpoint> passthrough;
  for (const auto& p : r.passthrough) {
    auto ck = open(p);
    if (ck)
      passthrough.push_back(*ck);
    else
      ok = false;
  }
  if (!ok) return std::nullopt;
  return Resolved{*base, std::move(inputs), std::move(passthrough)};
}

MergeOptions merge_options(const MergeRecipe& r, const std::vector<Checkpoint>& passthrough) {
  MergeOptions o;
  o.method = r.method;
  o.filter = r.filter;
  o.passthrough = passthrough;
  o.output_dtype = r.output_dtype;
  return o;
}

}  // namespace

std::vector<Diagnostic> validate(const MergeRecipe& r) {
  std::vector<Diagnostic> diags;
  auto err = [&](std::string msg) { diags.push_back({Severity::Error, std::move(msg)}); };

  if (r.inputs.empty()) err("recipe has no inputs");
  try {
    r.method.validate();
  } catch (const Error& e) {
    err(e.what());
  }

  std::set<std::string> labels;
  double total = 0.0;
  for (std::size_t i = 0; i < r.inputs.size(); ++i) {
    const auto& e = r.inputs[i];
    if (!std::isfinite(e.alpha)) err("inputs[" + std::to_string(i) + "]: alpha must be finite");
    total += std::abs(e.alpha);
    if (e.label && !labels.insert(*e.label).second) err("duplicate input label '" + *e.label + "'");
  }

  const std::string out = path_key(r.output);
  auto same_as_output = [&](const fs::path& p, const std::string& role) {
    if (path_key(p) == out) err("output path " + r.output.string() + " is also used as " + role);
  };
  same_as_output(r.base, "the base");
  for (const auto& e : r.inputs) {
    if (const auto* d = std::get_if<DeltaFile>(&e.source)) {
      same_as_output(d->path, "an input delta");
    } else {
      const auto& p = std::get<CheckpointPair>(e.source);
      same_as_output(p.tuned, "a tuned checkpoint");
      same_as_output(p.base, "a pair base");
    }
  }
  for (const auto& p : r.passthrough) same_as_output(p, "a passthrough source");

  if (auto resolved = resolve_inputs(r, diags)) {
    for (auto& msg : check_merge_inputs(resolved->base, resolved->inputs, merge_options(r, resolved->passthrough)))
      err(std::move(msg));
  }

  if (std::isfinite(total) && total > kTotalScaleWarning + 1e-9) {
    std::ostringstream msg;
    msg << "total scale " << total << " exceeds " << std::fixed;
    msg.precision(1);
    msg << kTotalScaleWarning;
    diags.push_back({Severity::Warning, msg.str()});
  }
  return diags;
}

bool has_errors(const std::vector<Diagnostic>& diagnostics) {
  for (const auto& d : diagnostics)
    if (d.severity == Severity::Error) return true;
  return false;
}

MergeReport execute(const MergeRecipe& recipe, const ExecuteOptions& options) {
  MergeRecipe r = recipe;
  if (options.seed && r.method.dare) r.method.dare->seed = *options.seed;
  auto diags = validate(r);
  if (has_errors(diags)) {
    std::string msg = "recipe rejected:";
    for (const auto& d : diags)
      if (d.severity == Severity::Error) msg += "\n  " + d.message;
    throw data_error(msg);
  }
  std::vector<Diagnostic> ignored;
  auto resolved = resolve_inputs(r, ignored);
  if (!resolved) throw data_error("recipe inputs changed during execution");
  MergeOptions mo = merge_options(r, resolved->passthrough);
  mo.jobs = options.jobs;
  return merge_to_file(resolved->base, resolved->inputs, mo, r.output);
}

json to_json(const MergeReport& report) {
  json tensors = json::array();
  for (const auto& t : report.tensors) {
    json j = {{"name", t.name}, {"provenance", to_string(t.provenance)}, {"elements", t.elements}};
    if (!t.source.empty()) j["source"] = t.source;
    tensors.push_back(std::move(j));
  }
  return {{"output", report.output},
          {"wall_seconds", report.wall_seconds},
          {"counts",
           {{"merged", report.count(Provenance::Merged)},
            {"base-passthrough", report.count(Provenance::BasePassthrough)},
            {"external-passthrough", report.count(Provenance::ExternalPassthrough)}}},
          {"tensors", std::move(tensors)}};
}

// ---------------------------------------------------------------------------
// sweeps

std::vector<double> alpha_range(double start, double stop, double step) {
  if (!(step > 0.0) || !std::isfinite(start) || !std::isfinite(stop) || stop < start)
    throw usage_error("alpha range needs finite start <= stop and a positive step");
  const auto count = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9)) + 1;
  std::vector<double> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(std::round((start + static_cast<double>(i) * step) * 1e12) / 1e12);
  return out;
}

std::string format_alpha(double alpha) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", alpha);
  return buf;
}

std::vector<MergeRecipe> plan_sweep(const MergeRecipe& tmpl, const Sweep& sweep) {
  struct Axis {
    std::string name;
    std::vector<std::size_t> entries;
    const std::vector<double>* alphas;
  };
  std::vector<Axis> axes;
  for (const auto& [label, alphas] : sweep) {
    Axis axis{label == "*" ? "all" : label, {}, &alphas};
    for (std::size_t i = 0; i < tmpl.inputs.size(); ++i)
      if (label == "*" || tmpl.inputs[i].label == label) axis.entries.push_back(i);
    if (axis.entries.empty()) throw data_error("sweep label '" + label + "' matches no recipe input");
    if (alphas.empty()) throw data_error("sweep label '" + label + "' has no alphas");
    axes.push_back(std::move(axis));
  }

  std::vector<MergeRecipe> out;
  std::vector<std::size_t> cursor(axes.size(), 0);
  while (true) {
    MergeRecipe r = tmpl;
    std::string suffix;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const double alpha = (*axes[a].alphas)[cursor[a]];
      for (std::size_t i : axes[a].entries) r.inputs[i].alpha = alpha;
      suffix += "__" + axes[a].name + "=" + format_alpha(alpha);
    }
    if (!suffix.empty()) {
      fs::path name = tmpl.output.stem();
      name += suffix;
      name += tmpl.output.extension();
      r.output = tmpl.output.parent_path() / name;
    }
    out.push_back(std::move(r));

    std::size_t a = axes.size();
    while (a > 0) {
      --a;
      if (++cursor[a] < axes[a].alphas->size()) break;
      cursor[a] = 0;
      if (a == 0) return out;
    }
    if (axes.empty()) return out;
  }
}

}  // namespace traitforge

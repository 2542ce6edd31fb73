#include "t2fnorm/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>

namespace t2fnorm {

using nlohmann::json;

namespace {

// Walks one JSON object, remembering which keys were read so that leftovers
// can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json* get(const std::string& key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void read(const std::string& key, T& out) {
    const json* v = get(key);
    if (!v) return;
    out = convert<T>(*v, child(key));
  }

  template <typename T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_unsigned()) return v.get<T>();
        if (v.get<long long>() < 0) throw ConfigError(path + ": must be non-negative");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError(path + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(child(key) + ": unknown key");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename F>
auto with_path(const std::string& path, F&& f) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

IdxSource parse_idx_source(const json& j, const std::string& path, bool labelled) {
  ObjectReader r(j, path);
  IdxSource s;
  r.read("id", s.id);
  std::string images, labels;
  r.read("images", images);
  if (images.empty()) throw ConfigError(r.child("images") + ": required");
  s.images = images;
  if (labelled) {
    r.read("labels", labels);
    if (labels.empty()) throw ConfigError(r.child("labels") + ": required");
    s.labels = labels;
  }
  r.finish();
  return s;
}

Sweep parse_sweep(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  Sweep s;
  r.read("enabled", s.enabled);
  r.read("values", s.values);
  r.read("seeds", s.seeds);
  r.finish();
  return s;
}

ScorerConfig parse_scorer(const json& j, const std::string& path) {
  ObjectReader r(j, path);
  std::string kind;
  r.read("kind", kind);
  ScorerConfig c;
  c.spec.kind = with_path(r.child("kind"), [&] { return parse_scorer_kind(kind); });
  switch (c.spec.kind) {
    case ScorerKind::odin:
      r.read("temperature", c.spec.odin_temperature);
      r.read("epsilon", c.spec.odin_epsilon);
      break;
    case ScorerKind::dice:
      r.read("sparsity", c.spec.dice_sparsity);
      break;
    case ScorerKind::tempscale:
      r.read("temperature", c.spec.tempscale_T);
      r.read("fit", c.fit_temperature);
      if (r.has("temperature") && c.fit_temperature) {
        throw ConfigError(path + ": give either a temperature or fit, not both");
      }
      break;
    default:
      break;
  }
  r.finish();
  with_path(path, [&] { c.spec.validate(); });
  return c;
}

json sweep_json(const Sweep& s) {
  return {{"enabled", s.enabled}, {"values", s.values}, {"seeds", s.seeds}};
}

json idx_json(const IdxSource& s) {
  json j{{"id", s.id}, {"images", s.images.string()}};
  if (s.labels) j["labels"] = s.labels->string();
  return j;
}

}  // namespace

std::string ScorerConfig::label() const {
  if (spec.kind == ScorerKind::tempscale && fit_temperature) return "tempscale_fit";
  return spec.label();
}

void ExperimentConfig::validate() const {
  if (methods.empty()) throw ConfigError("methods: at least one method is required");
  if (scorers.empty()) throw ConfigError("scorers: at least one scorer is required");
  if (seeds.empty()) throw ConfigError("seeds: at least one seed is required");
  std::set<Method> unique_methods(methods.begin(), methods.end());
  if (unique_methods.size() != methods.size()) throw ConfigError("methods: duplicate entry");
  std::set<std::uint64_t> unique_seeds(seeds.begin(), seeds.end());
  if (unique_seeds.size() != seeds.size()) throw ConfigError("seeds: duplicate entry");
  std::set<std::string> labels;
  for (const auto& s : scorers) {
    if (!labels.insert(s.label()).second) throw ConfigError("scorers: duplicate scorer " + s.label());
    if (s.fit_temperature && data.uses_idx() && !data.idx_val) {
      throw ConfigError("scorers: fitted tempscale needs data.idx.val");
    }
  }

  auto check_sweep = [&](const Sweep& s, const char* name) {
    if (!s.enabled) return;
    if (s.values.empty()) throw ConfigError(std::string("ablations.") + name + ": values must be non-empty");
    for (auto seed : s.seeds) {
      if (!unique_seeds.count(seed)) {
        throw ConfigError(std::string("ablations.") + name + ": seed " + std::to_string(seed) +
                          " is not in the seed list");
      }
    }
  };
  check_sweep(ablations.tau, "tau_sweep");
  check_sweep(ablations.p_norm, "p_norm_sweep");
  check_sweep(ablations.layer, "layer_sweep");
  check_sweep(ablations.dice_p, "dice_p_sweep");
  bool sweeps_need_t2f = ablations.tau.enabled || ablations.p_norm.enabled || ablations.layer.enabled;
  if (sweeps_need_t2f && !unique_methods.count(Method::t2fnorm)) {
    throw ConfigError("ablations: tau/p_norm/layer sweeps need the t2fnorm method");
  }
  for (double v : ablations.tau.values) {
    if (!(v > 0.0)) throw ConfigError("ablations.tau_sweep: values must be positive");
  }
  for (double v : ablations.p_norm.values) {
    if (v != 1.0 && v != 2.0 && v != 3.0 && v != 4.0) {
      throw ConfigError("ablations.p_norm_sweep: values must be in {1,2,3,4}");
    }
  }
  for (double v : ablations.layer.values) {
    if (v < 1.0 || v != static_cast<double>(static_cast<std::size_t>(v)) ||
        static_cast<std::size_t>(v) > model.blocks.size()) {
      throw ConfigError("ablations.layer_sweep: values must be block indices in [1, block count]");
    }
  }
  for (double v : ablations.dice_p.values) {
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("ablations.dice_p_sweep: values must lie in [0, 1]");
  }

  if (data.uses_idx()) {
    if (!data.idx_test) throw ConfigError("data.idx.test: required with IDX training data");
    if (data.idx_ood.empty()) throw ConfigError("data.idx.ood: at least one OOD file is required");
    if (!data.ood_sets.empty()) throw ConfigError("data.ood_sets: not available with IDX data");
  } else {
    with_path("data.synthetic", [&] { data.synthetic.validate(); });
    if (data.test_per_class == 0) throw ConfigError("data.synthetic.test_per_class: must be positive");
    if (data.ood_sets.empty()) throw ConfigError("data.ood_sets: at least one OOD set is required");
    std::set<std::string> ids;
    for (const auto& o : data.ood_sets) {
      if (o.size == 0) throw ConfigError("data.ood_sets: size must be positive");
      if (o.kind == OodKind::held_out_classes && data.synthetic.classes >= template_bank_size()) {
        throw ConfigError("data.ood_sets: no templates left for held_out_classes");
      }
      if (!ids.insert(to_string(o.kind)).second) {
        throw ConfigError("data.ood_sets: duplicate kind " + to_string(o.kind));
      }
    }
  }
  with_path("model", [&] {
    ModelSpec m = model;
    m.classes = std::max<std::size_t>(m.classes, 1);
    m.validate();
  });
  with_path("train", [&] { train.validate(); });
}

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig c;
  c.methods = {Method::baseline, Method::t2fnorm};
  c.scorers = {ScorerConfig{{ScorerKind::msp}}, ScorerConfig{{ScorerKind::energy}}};
  c.seeds = {1, 2, 3};
  c.data.synthetic.seed = 11;

  ObjectReader root(j, "");
  if (const json* d = root.get("data")) {
    ObjectReader rd(*d, "data");
    if (const json* s = rd.get("synthetic")) {
      ObjectReader rs(*s, "data.synthetic");
      auto& sp = c.data.synthetic;
      rs.read("classes", sp.classes);
      rs.read("train_per_class", sp.samples_per_class);
      rs.read("test_per_class", c.data.test_per_class);
      rs.read("val_per_class", c.data.val_per_class);
      rs.read("image_size", sp.image_size);
      rs.read("channels", sp.channels);
      rs.read("amplitude", sp.amplitude);
      rs.read("noise", sp.noise);
      rs.read("seed", sp.seed);
      rs.finish();
    }
    bool explicit_ood = false;
    if (const json* o = rd.get("ood_sets")) {
      if (!o->is_array()) throw ConfigError("data.ood_sets: expected an array");
      explicit_ood = true;
      c.data.ood_sets.clear();
      for (std::size_t i = 0; i < o->size(); ++i) {
        const std::string path = "data.ood_sets[" + std::to_string(i) + "]";
        ObjectReader ro((*o)[i], path);
        OodSpec spec;
        std::string kind;
        ro.read("kind", kind);
        spec.kind = with_path(ro.child("kind"), [&] { return parse_ood_kind(kind); });
        spec.seed = c.data.synthetic.seed + 100 + i;
        ro.read("size", spec.size);
        ro.read("seed", spec.seed);
        ro.read("shift", spec.shift);
        ro.finish();
        c.data.ood_sets.push_back(spec);
      }
    }
    if (const json* x = rd.get("idx")) {
      ObjectReader ri(*x, "data.idx");
      if (const json* v = ri.get("train")) c.data.idx_train = parse_idx_source(*v, "data.idx.train", true);
      if (const json* v = ri.get("test")) c.data.idx_test = parse_idx_source(*v, "data.idx.test", true);
      if (const json* v = ri.get("val")) c.data.idx_val = parse_idx_source(*v, "data.idx.val", true);
      if (const json* v = ri.get("ood")) {
        if (!v->is_array()) throw ConfigError("data.idx.ood: expected an array");
        for (std::size_t i = 0; i < v->size(); ++i) {
          IdxSource s = parse_idx_source((*v)[i], "data.idx.ood[" + std::to_string(i) + "]", false);
          if (s.id.empty()) s.id = "idx_ood" + std::to_string(i);
          c.data.idx_ood.push_back(s);
        }
      }
      ri.finish();
      if (!c.data.idx_train) throw ConfigError("data.idx.train: required");
      if (c.data.idx_train->id.empty()) c.data.idx_train->id = "idx_train";
      if (c.data.idx_test && c.data.idx_test->id.empty()) c.data.idx_test->id = "idx_test";
      if (c.data.idx_val && c.data.idx_val->id.empty()) c.data.idx_val->id = "idx_val";
      if (!explicit_ood) c.data.ood_sets.clear();
    }
    rd.finish();
    if (!explicit_ood) {
      for (std::size_t i = 0; i < c.data.ood_sets.size(); ++i) c.data.ood_sets[i].seed = c.data.synthetic.seed + 100 + i;
    }
  } else {
    for (std::size_t i = 0; i < c.data.ood_sets.size(); ++i) c.data.ood_sets[i].seed = c.data.synthetic.seed + 100 + i;
  }

  if (const json* m = root.get("model")) {
    ObjectReader rm(*m, "model");
    if (const json* b = rm.get("blocks")) {
      if (!b->is_array()) throw ConfigError("model.blocks: expected an array");
      c.model.blocks.clear();
      for (std::size_t i = 0; i < b->size(); ++i) {
        ObjectReader rb((*b)[i], "model.blocks[" + std::to_string(i) + "]");
        ConvBlock block;
        rb.read("channels", block.out_channels);
        rb.read("stride", block.stride);
        rb.finish();
        c.model.blocks.push_back(block);
      }
    }
    rm.read("tau", c.model.tau);
    rm.read("tau_logit", c.model.tau_logit);
    rm.read("p_norm", c.model.p_norm);
    rm.read("normalize_after_block", c.model.normalize_after_block);
    rm.read("penalty_weight", c.model.penalty_weight);
    rm.finish();
  }

  if (const json* t = root.get("train")) {
    ObjectReader rt(*t, "train");
    rt.read("epochs", c.train.epochs);
    rt.read("batch_size", c.train.batch_size);
    rt.read("lr", c.train.lr);
    rt.read("momentum", c.train.momentum);
    rt.read("weight_decay", c.train.weight_decay);
    std::string schedule = "step";
    rt.read("schedule", schedule);
    if (schedule == "step") c.train.schedule = LrSchedule::step;
    else if (schedule == "constant") c.train.schedule = LrSchedule::constant;
    else throw ConfigError("train.schedule: expected \"step\" or \"constant\"");
    rt.read("decay_epochs", c.train.decay_epochs);
    rt.read("decay_factor", c.train.decay_factor);
    rt.read("monitor_samples", c.train.monitor_samples);
    rt.finish();
  }

  if (const json* m = root.get("methods")) {
    const auto names = ObjectReader::convert<std::vector<std::string>>(*m, "methods");
    c.methods.clear();
    for (const auto& n : names) c.methods.push_back(with_path("methods", [&] { return parse_method(n); }));
  }
  if (const json* s = root.get("scorers")) {
    if (!s->is_array()) throw ConfigError("scorers: expected an array");
    c.scorers.clear();
    for (std::size_t i = 0; i < s->size(); ++i) {
      c.scorers.push_back(parse_scorer((*s)[i], "scorers[" + std::to_string(i) + "]"));
    }
  }
  root.read("seeds", c.seeds);

  if (const json* a = root.get("ablations")) {
    ObjectReader ra(*a, "ablations");
    ra.read("normalize_at_scoring", c.ablations.normalize_at_scoring);
    if (const json* v = ra.get("tau_sweep")) c.ablations.tau = parse_sweep(*v, "ablations.tau_sweep");
    if (const json* v = ra.get("p_norm_sweep")) c.ablations.p_norm = parse_sweep(*v, "ablations.p_norm_sweep");
    if (const json* v = ra.get("layer_sweep")) c.ablations.layer = parse_sweep(*v, "ablations.layer_sweep");
    if (const json* v = ra.get("dice_p_sweep")) c.ablations.dice_p = parse_sweep(*v, "ablations.dice_p_sweep");
    ra.finish();
  }
  std::string out_dir = c.output_dir.string();
  root.read("output_dir", out_dir);
  c.output_dir = out_dir;
  root.finish();

  c.model.classes = c.data.synthetic.classes;
  c.model.in_channels = c.data.synthetic.channels;
  c.model.in_height = c.model.in_width = c.data.synthetic.image_size;
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json to_json(const ExperimentConfig& c) {
  json data;
  if (c.data.uses_idx()) {
    json idx{{"train", idx_json(*c.data.idx_train)}};
    if (c.data.idx_test) idx["test"] = idx_json(*c.data.idx_test);
    if (c.data.idx_val) idx["val"] = idx_json(*c.data.idx_val);
    idx["ood"] = json::array();
    for (const auto& o : c.data.idx_ood) idx["ood"].push_back(idx_json(o));
    data["idx"] = idx;
  } else {
    const auto& s = c.data.synthetic;
    data["synthetic"] = {{"classes", s.classes},           {"train_per_class", s.samples_per_class},
                         {"test_per_class", c.data.test_per_class},
                         {"val_per_class", c.data.val_per_class},
                         {"image_size", s.image_size},     {"channels", s.channels},
                         {"amplitude", s.amplitude},       {"noise", s.noise},
                         {"seed", s.seed}};
  }
  data["ood_sets"] = json::array();
  for (const auto& o : c.data.ood_sets) {
    data["ood_sets"].push_back({{"kind", to_string(o.kind)}, {"size", o.size}, {"seed", o.seed}, {"shift", o.shift}});
  }

  json blocks = json::array();
  for (const auto& b : c.model.blocks) blocks.push_back({{"channels", b.out_channels}, {"stride", b.stride}});
  json model{{"blocks", blocks},
             {"tau", c.model.tau},
             {"tau_logit", c.model.tau_logit},
             {"p_norm", c.model.p_norm},
             {"normalize_after_block", c.model.normalize_after_block},
             {"penalty_weight", c.model.penalty_weight}};

  json train{{"epochs", c.train.epochs},
             {"batch_size", c.train.batch_size},
             {"lr", c.train.lr},
             {"momentum", c.train.momentum},
             {"weight_decay", c.train.weight_decay},
             {"schedule", c.train.schedule == LrSchedule::step ? "step" : "constant"},
             {"decay_epochs", c.train.decay_epochs},
             {"decay_factor", c.train.decay_factor},
             {"monitor_samples", c.train.monitor_samples}};

  json methods = json::array();
  for (auto m : c.methods) methods.push_back(to_string(m));
  json scorers = json::array();
  for (const auto& s : c.scorers) {
    json e{{"kind", to_string(s.spec.kind)}};
    switch (s.spec.kind) {
      case ScorerKind::odin:
        e["temperature"] = s.spec.odin_temperature;
        e["epsilon"] = s.spec.odin_epsilon;
        break;
      case ScorerKind::dice:
        e["sparsity"] = s.spec.dice_sparsity;
        break;
      case ScorerKind::tempscale:
        if (s.fit_temperature) e["fit"] = true;
        else e["temperature"] = s.spec.tempscale_T;
        break;
      default:
        break;
    }
    scorers.push_back(e);
  }

  return {{"data", data},
          {"model", model},
          {"train", train},
          {"methods", methods},
          {"scorers", scorers},
          {"seeds", c.seeds},
          {"ablations",
           {{"normalize_at_scoring", c.ablations.normalize_at_scoring},
            {"tau_sweep", sweep_json(c.ablations.tau)},
            {"p_norm_sweep", sweep_json(c.ablations.p_norm)},
            {"layer_sweep", sweep_json(c.ablations.layer)},
            {"dice_p_sweep", sweep_json(c.ablations.dice_p)}}},
          {"output_dir", c.output_dir.string()}};
}

std::string config_hash(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  const std::string text = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace t2fnorm

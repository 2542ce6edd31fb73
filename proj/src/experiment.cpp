#include "t2fnorm/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "t2fnorm/score.hpp"
#include "t2fnorm/train.hpp"

namespace t2fnorm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Data

struct Prepared {
  Dataset train;
  Dataset test;
  std::optional<Dataset> val;
  std::vector<Dataset> ood;
  ModelSpec model;
};

Prepared prepare_data(const ExperimentConfig& cfg) {
  Prepared p;
  p.model = cfg.model;
  const bool need_val = std::any_of(cfg.scorers.begin(), cfg.scorers.end(),
                                    [](const ScorerConfig& s) { return s.fit_temperature; });
  if (cfg.data.uses_idx()) {
    const auto& d = cfg.data;
    p.train = read_idx(d.idx_train->images, d.idx_train->labels, std::nullopt, d.idx_train->id);
    p.test = read_idx(d.idx_test->images, d.idx_test->labels, p.train.stats, d.idx_test->id);
    if (d.idx_val) p.val = read_idx(d.idx_val->images, d.idx_val->labels, p.train.stats, d.idx_val->id);
    for (const auto& o : d.idx_ood) p.ood.push_back(read_idx(o.images, std::nullopt, p.train.stats, o.id));
    if (p.train.size() == 0) throw ConfigError("data.idx.train: no samples");
    std::size_t classes = 0;
    for (auto l : p.train.labels) classes = std::max(classes, l + 1);
    p.model.classes = classes;
    p.model.in_channels = p.train.channels();
    p.model.in_height = p.train.height();
    p.model.in_width = p.train.width();
    for (const Dataset* d2 : {&p.test}) {
      for (auto l : d2->labels) {
        if (l >= classes) throw ConfigError(d2->id + ": label outside the training classes");
      }
    }
  } else {
    const SyntheticSpec& s = cfg.data.synthetic;
    p.train = gen_synthetic_id(s, "train");
    SyntheticSpec ts = s;
    ts.samples_per_class = cfg.data.test_per_class;
    ts.seed = s.seed + 1;
    p.test = gen_synthetic_id(ts, p.train.stats, "test");
    if (need_val) {
      SyntheticSpec vs = s;
      vs.samples_per_class = cfg.data.val_per_class;
      vs.seed = s.seed + 2;
      p.val = gen_synthetic_id(vs, p.train.stats, "val");
    }
    for (const auto& o : cfg.data.ood_sets) p.ood.push_back(gen_ood(o, s, p.train.stats, to_string(o.kind)));
  }
  if (need_val && !p.val) throw ConfigError("fitted tempscale needs a validation split");
  p.model.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Jobs

struct Job {
  std::string run_id;
  std::string group;
  Method method = Method::baseline;
  std::string variant = "main";
  double value = 0.0;
  std::uint64_t seed = 0;
  ModelSpec spec;
  std::vector<ScorerConfig> scorers;
  bool normalize_sweep = false;
};

bool seed_in(const Sweep& s, std::uint64_t seed) {
  return s.seeds.empty() || std::find(s.seeds.begin(), s.seeds.end(), seed) != s.seeds.end();
}

std::vector<Job> plan_jobs(const ExperimentConfig& cfg, const ModelSpec& base) {
  std::vector<Job> jobs;
  const auto& ab = cfg.ablations;
  for (Method m : cfg.methods) {
    for (auto seed : cfg.seeds) {
      Job j;
      j.method = m;
      j.group = to_string(m);
      j.seed = seed;
      j.spec = base;
      j.spec.method = m;
      j.scorers = cfg.scorers;
      if (ab.dice_p.enabled && seed_in(ab.dice_p, seed)) {
        for (double p : ab.dice_p.values) {
          ScorerConfig sc;
          sc.spec.kind = ScorerKind::dice;
          sc.spec.dice_sparsity = p;
          const bool dup = std::any_of(j.scorers.begin(), j.scorers.end(),
                                       [&](const ScorerConfig& o) { return o.label() == sc.label(); });
          if (!dup) j.scorers.push_back(sc);
        }
      }
      j.normalize_sweep = ab.normalize_at_scoring && (m == Method::t2fnorm || m == Method::logitnorm);
      jobs.push_back(j);
    }
  }

  auto add_variants = [&](const Sweep& sweep, const char* variant, const char* tag, auto apply, auto is_default) {
    if (!sweep.enabled) return;
    for (double v : sweep.values) {
      if (is_default(v)) continue;
      for (auto seed : cfg.seeds) {
        if (!seed_in(sweep, seed)) continue;
        Job j;
        j.method = Method::t2fnorm;
        j.group = std::string("t2fnorm_") + tag + short_num(v);
        j.variant = variant;
        j.value = v;
        j.seed = seed;
        j.spec = base;
        j.spec.method = Method::t2fnorm;
        apply(j.spec, v);
        j.scorers = cfg.scorers;
        jobs.push_back(j);
      }
    }
  };
  add_variants(
      ab.tau, "tau", "tau", [](ModelSpec& s, double v) { s.tau = v; },
      [&](double v) { return v == base.tau; });
  add_variants(
      ab.p_norm, "p_norm", "p", [](ModelSpec& s, double v) { s.p_norm = static_cast<int>(v); },
      [&](double v) { return static_cast<int>(v) == base.p_norm; });
  add_variants(
      ab.layer, "layer", "block",
      [](ModelSpec& s, double v) { s.normalize_after_block = static_cast<std::size_t>(v); },
      [&](double v) { return static_cast<std::size_t>(v) == base.normalization_block(); });

  for (auto& j : jobs) j.run_id = j.group + "__seed" + std::to_string(j.seed);
  return jobs;
}

struct Outcome {
  RunRecord run;
  std::vector<MetricRecord> metrics;
};

std::string score_name(const std::string& run_id, const std::string& scorer, const std::string& dataset,
                       bool norm) {
  return run_id + "__" + scorer + "__" + dataset + "__norm" + (norm ? "1" : "0") + ".csv";
}

Outcome execute(const Job& job, const Prepared& data, const ExperimentConfig& cfg, const fs::path& out) {
  Outcome o;
  RunRecord& r = o.run;
  r.run_id = job.run_id;
  r.group = job.group;
  r.method = to_string(job.method);
  r.variant = job.variant;
  r.variant_value = job.value;
  r.seed = job.seed;
  r.tau = job.spec.tau;
  r.p_norm = job.spec.p_norm;
  r.normalize_after_block = job.spec.normalization_block();

  const fs::path dir = out / job.run_id;
  fs::create_directories(dir / "scores");
  try {
    ModelState m = init_model(job.spec, job.seed);
    TrainConfig tc = cfg.train;
    tc.seed = job.seed;
    tc.monitor_ood = data.ood.empty() ? nullptr : &data.ood.front();
    const auto traces = train(m, data.train, tc);
    r.final_train_loss = traces.back().train_loss;
    r.model_file = job.run_id + "/model.bin";
    r.trace_file = job.run_id + "/trace.csv";
    save_model(m, out / r.model_file);
    write_trace_csv(traces, out / r.trace_file);
    r.test_accuracy = accuracy(m, data.test);

    const ModelState frozen = frozen_copy(m);
    std::vector<bool> routes{false};
    if (job.normalize_sweep) routes.push_back(true);
    for (bool norm : routes) {
      const ScoreNorms id_norms = mean_score_norms(frozen, data.test, norm);
      std::vector<ScoreNorms> ood_norms;
      for (const auto& d : data.ood) ood_norms.push_back(mean_score_norms(frozen, d, norm));

      for (const auto& sc : job.scorers) {
        ScorerSpec spec = sc.spec;
        spec.normalize_at_scoring = norm;
        if (sc.fit_temperature) {
          NoGradGuard no_grad;
          RowMatrix logits(static_cast<Eigen::Index>(data.val->size()), static_cast<Eigen::Index>(job.spec.classes));
          Eigen::Index row = 0;
          for (const auto& b : sequential_batches(*data.val, 256)) {
            const RowMatrix z = forward_score(frozen, b.images, norm).logits.matrix();
            logits.middleRows(row, z.rows()) = z;
            row += z.rows();
          }
          spec.tempscale_T = fit_temperature(logits, data.val->labels, default_temperature_grid());
          if (!norm) r.fitted_temperature = spec.tempscale_T;
        }
        std::optional<DiceMask> mask;
        if (spec.kind == ScorerKind::dice) mask = dice_precompute(frozen, data.train, spec.dice_sparsity, norm);
        const DiceMask* mp = mask ? &*mask : nullptr;

        const std::string label = sc.label();
        const ScoreSet id = score_dataset(frozen, data.test, spec, mp, job.run_id);
        const std::string id_file = job.run_id + "/scores/" + score_name(job.run_id, label, data.test.id, norm);
        write_score_csv(id, out / id_file);
        for (std::size_t k = 0; k < data.ood.size(); ++k) {
          const ScoreSet od = score_dataset(frozen, data.ood[k], spec, mp, job.run_id);
          const std::string od_file =
              job.run_id + "/scores/" + score_name(job.run_id, label, data.ood[k].id, norm);
          write_score_csv(od, out / od_file);

          MetricRecord mr;
          mr.run_id = job.run_id;
          mr.group = job.group;
          mr.method = r.method;
          mr.seed = job.seed;
          mr.scorer = label;
          mr.scorer_kind = to_string(spec.kind);
          mr.scorer_param = spec.kind == ScorerKind::dice        ? spec.dice_sparsity
                            : spec.kind == ScorerKind::tempscale ? spec.tempscale_T
                                                                 : 0.0;
          mr.ood_set = data.ood[k].id;
          mr.normalize_at_scoring = norm;
          mr.metrics = detection_metrics(id.scores, od.scores);
          mr.metrics.id_accuracy = r.test_accuracy;
          mr.metrics.id_feature_norm = id_norms.feature;
          mr.metrics.id_logit_norm = id_norms.logit;
          mr.metrics.ood_feature_norm = ood_norms[k].feature;
          mr.metrics.ood_logit_norm = ood_norms[k].logit;
          mr.metrics.separability_feature = ood_norms[k].feature > 0.0 ? id_norms.feature / ood_norms[k].feature : 0.0;
          mr.metrics.separability_logit = ood_norms[k].logit > 0.0 ? id_norms.logit / ood_norms[k].logit : 0.0;
          mr.id_scores_file = id_file;
          mr.ood_scores_file = od_file;
          o.metrics.push_back(mr);
        }
      }
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.ok = false;
    r.error = e.what();
    o.metrics.clear();
  }
  return o;
}

// ---------------------------------------------------------------------------
// CSV renderings

std::string runs_csv(const std::vector<RunRecord>& runs) {
  std::ostringstream os;
  os << "run_id,group,method,variant,variant_value,seed,status,test_accuracy,final_train_loss,tau,p_norm,"
        "normalize_after_block,fitted_temperature\n";
  for (const auto& r : runs) {
    os << r.run_id << ',' << r.group << ',' << r.method << ',' << r.variant << ',' << num(r.variant_value) << ','
       << r.seed << ',' << (r.ok ? "ok" : "failed") << ',' << num(r.test_accuracy) << ','
       << num(r.final_train_loss) << ',' << num(r.tau) << ',' << r.p_norm << ',' << r.normalize_after_block << ','
       << num(r.fitted_temperature) << '\n';
  }
  return os.str();
}

std::string metrics_csv(const std::vector<MetricRecord>& records) {
  std::ostringstream os;
  os << "run_id,group,method,seed,scorer,ood_set,normalize_at_scoring," << metrics_csv_header() << '\n';
  for (const auto& m : records) {
    os << m.run_id << ',' << m.group << ',' << m.method << ',' << m.seed << ',' << m.scorer << ',' << m.ood_set
       << ',' << (m.normalize_at_scoring ? 1 : 0) << ',' << to_csv_row(m.metrics) << '\n';
  }
  return os.str();
}

std::string aggregate_csv(const std::vector<AggregateRecord>& aggs) {
  std::ostringstream os;
  os << "group,scorer,ood_set,normalize_at_scoring,n";
  for (const auto& [k, v] : metric_fields(MetricsReport{})) os << ',' << k << "_mean," << k << "_std";
  os << '\n';
  for (const auto& a : aggs) {
    os << a.group << ',' << a.scorer << ',' << a.ood_set << ',' << (a.normalize_at_scoring ? 1 : 0) << ',' << a.n;
    const auto means = metric_fields(a.mean);
    const auto stds = metric_fields(a.stddev);
    for (std::size_t i = 0; i < means.size(); ++i) os << ',' << num(means[i].second) << ',' << num(stds[i].second);
    os << '\n';
  }
  return os.str();
}

std::string accuracy_csv(const std::vector<AccuracyAggregate>& accs) {
  std::ostringstream os;
  os << "group,n,mean,std\n";
  for (const auto& a : accs) os << a.group << ',' << a.n << ',' << num(a.mean) << ',' << num(a.stddev) << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// JSON

json metrics_json(const MetricsReport& m) {
  json j = json::object();
  for (const auto& [k, v] : metric_fields(m)) j[k] = v;
  return j;
}

MetricsReport metrics_from_json(const json& j) {
  MetricsReport m;
  for (const auto& [k, v] : j.items()) metric_field(m, k) = v.get<double>();
  return m;
}

json report_json(const RunReport& r) {
  json runs = json::array();
  for (const auto& x : r.runs) {
    runs.push_back({{"run_id", x.run_id},
                    {"group", x.group},
                    {"method", x.method},
                    {"variant", x.variant},
                    {"variant_value", x.variant_value},
                    {"seed", x.seed},
                    {"status", x.ok ? "ok" : "failed"},
                    {"error", x.error},
                    {"test_accuracy", x.test_accuracy},
                    {"final_train_loss", x.final_train_loss},
                    {"tau", x.tau},
                    {"p_norm", x.p_norm},
                    {"normalize_after_block", x.normalize_after_block},
                    {"fitted_temperature", x.fitted_temperature},
                    {"model", x.model_file},
                    {"trace", x.trace_file}});
  }
  json metrics = json::array();
  for (const auto& m : r.metrics) {
    metrics.push_back({{"run_id", m.run_id},
                       {"group", m.group},
                       {"method", m.method},
                       {"seed", m.seed},
                       {"scorer", m.scorer},
                       {"scorer_kind", m.scorer_kind},
                       {"scorer_param", m.scorer_param},
                       {"ood_set", m.ood_set},
                       {"normalize_at_scoring", m.normalize_at_scoring},
                       {"metrics", metrics_json(m.metrics)},
                       {"id_scores", m.id_scores_file},
                       {"ood_scores", m.ood_scores_file}});
  }
  json aggs = json::array();
  for (const auto& a : r.aggregates) {
    aggs.push_back({{"group", a.group},
                    {"scorer", a.scorer},
                    {"ood_set", a.ood_set},
                    {"normalize_at_scoring", a.normalize_at_scoring},
                    {"n", a.n},
                    {"mean", metrics_json(a.mean)},
                    {"std", metrics_json(a.stddev)}});
  }
  json accs = json::array();
  for (const auto& a : r.accuracy) accs.push_back({{"group", a.group}, {"n", a.n}, {"mean", a.mean}, {"std", a.stddev}});
  return {{"provenance",
           {{"config_hash", r.config_hash},
            {"code_version", r.code_version},
            {"started_at", r.started_at},
            {"finished_at", r.finished_at}}},
          {"methods", r.methods},
          {"ood_sets", r.ood_sets},
          {"runs", runs},
          {"metrics", metrics},
          {"aggregate", aggs},
          {"accuracy", accs}};
}

}  // namespace

// ---------------------------------------------------------------------------

bool RunReport::all_ok() const {
  return std::all_of(runs.begin(), runs.end(), [](const RunRecord& r) { return r.ok; });
}

const RunRecord* RunReport::find_run(const std::string& run_id) const {
  for (const auto& r : runs) {
    if (r.run_id == run_id) return &r;
  }
  return nullptr;
}

std::vector<AggregateRecord> aggregate_metrics(const std::vector<MetricRecord>& records) {
  struct Group {
    AggregateRecord agg;
    std::vector<const MetricRecord*> members;
  };
  std::vector<Group> groups;
  for (const auto& m : records) {
    auto it = std::find_if(groups.begin(), groups.end(), [&](const Group& g) {
      return g.agg.group == m.group && g.agg.scorer == m.scorer && g.agg.ood_set == m.ood_set &&
             g.agg.normalize_at_scoring == m.normalize_at_scoring;
    });
    if (it == groups.end()) {
      Group g;
      g.agg.group = m.group;
      g.agg.scorer = m.scorer;
      g.agg.ood_set = m.ood_set;
      g.agg.normalize_at_scoring = m.normalize_at_scoring;
      groups.push_back(g);
      it = groups.end() - 1;
    }
    it->members.push_back(&m);
  }

  std::vector<AggregateRecord> out;
  for (auto& g : groups) {
    const double n = static_cast<double>(g.members.size());
    g.agg.n = g.members.size();
    for (const auto& [name, unused] : metric_fields(MetricsReport{})) {
      double sum = 0.0;
      for (const auto* m : g.members) sum += metric_field(m->metrics, name);
      const double mean = sum / n;
      double ss = 0.0;
      for (const auto* m : g.members) {
        const double d = metric_field(m->metrics, name) - mean;
        ss += d * d;
      }
      metric_field(g.agg.mean, name) = mean;
      metric_field(g.agg.stddev, name) = g.members.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    }
    out.push_back(g.agg);
  }
  return out;
}

std::vector<AccuracyAggregate> aggregate_accuracy(const std::vector<RunRecord>& runs) {
  std::vector<AccuracyAggregate> out;
  std::vector<std::vector<double>> values;
  for (const auto& r : runs) {
    if (!r.ok) continue;
    auto it = std::find_if(out.begin(), out.end(), [&](const AccuracyAggregate& a) { return a.group == r.group; });
    if (it == out.end()) {
      out.push_back({r.group, 0, 0.0, 0.0});
      values.emplace_back();
      it = out.end() - 1;
    }
    values[static_cast<std::size_t>(it - out.begin())].push_back(r.test_accuracy);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto& v = values[i];
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mean = sum / static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    out[i].n = v.size();
    out[i].mean = mean;
    out[i].stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return out;
}

RunReport run_experiment(const ExperimentConfig& config, const RunOptions& options) {
  config.validate();
  const fs::path out = config.output_dir;
  const std::string hash = config_hash(config);
  const fs::path hash_file = out / "config.hash";
  if (fs::exists(hash_file)) {
    std::string existing = read_text(hash_file);
    while (!existing.empty() && (existing.back() == '\n' || existing.back() == '\r')) existing.pop_back();
    if (!options.force) {
      if (existing == hash) {
        throw ExperimentExists("output directory " + out.string() + " already holds a run of config " + hash +
                               "; pass --force to rerun");
      }
      throw ExperimentExists("output directory " + out.string() + " holds a different experiment (config " +
                             existing + "); pass --force to replace it");
    }
    fs::remove_all(out);
  }
  fs::create_directories(out);

  RunReport report;
  report.config_hash = hash;
  report.code_version = kCodeVersion;
  report.started_at = utc_now();
  report.output_dir = out;
  for (auto m : config.methods) report.methods.push_back(to_string(m));

  const Prepared data = prepare_data(config);
  for (const auto& d : data.ood) report.ood_sets.push_back(d.id);
  if (!config.data.uses_idx()) {
    fs::create_directories(out / "data");
    write_manifest(data.train, out / "data" / "manifest_train.csv");
    write_manifest(data.test, out / "data" / "manifest_test.csv");
    for (const auto& d : data.ood) write_manifest(d, out / "data" / ("manifest_" + d.id + ".csv"));
  }

  const std::vector<Job> jobs = plan_jobs(config, data.model);
  std::vector<Outcome> outcomes(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  std::size_t done = 0;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      const auto t0 = std::chrono::steady_clock::now();
      outcomes[i] = execute(jobs[i], data, config, out);
      if (options.log) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard lock(log_mutex);
        const RunRecord& r = outcomes[i].run;
        *options.log << '[' << ++done << '/' << jobs.size() << "] " << r.run_id << ' '
                     << (r.ok ? "ok" : "FAILED: " + r.error) << " accuracy=" << r.test_accuracy << " ("
                     << std::fixed << std::setprecision(1) << secs << " s)" << std::defaultfloat << '\n';
      }
    }
  };
  const unsigned n_threads = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(jobs.size())));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (auto& o : outcomes) {
    report.runs.push_back(o.run);
    for (auto& m : o.metrics) report.metrics.push_back(m);
  }
  report.aggregates = aggregate_metrics(report.metrics);
  report.accuracy = aggregate_accuracy(report.runs);
  report.finished_at = utc_now();

  write_text(out / "runs.csv", runs_csv(report.runs));
  write_text(out / "metrics.csv", metrics_csv(report.metrics));
  write_text(out / "aggregate.csv", aggregate_csv(report.aggregates));
  write_text(out / "accuracy.csv", accuracy_csv(report.accuracy));
  write_text(out / "config.json", to_json(config).dump(2) + "\n");
  if (report.methods.size() >= 2) {
    const ComparisonTable table = compare_methods(report);
    write_text(out / "comparison.csv", table.to_csv());
    write_text(out / "comparison.txt", table.to_text());
  }
  write_report(report, out / "report.json");
  write_text(hash_file, hash + "\n");
  return report;
}

void write_report(const RunReport& r, const fs::path& path) { write_text(path, report_json(r).dump(2) + "\n"); }

RunReport load_report(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  RunReport r;
  try {
    const auto& p = j.at("provenance");
    r.config_hash = p.at("config_hash").get<std::string>();
    r.code_version = p.at("code_version").get<std::string>();
    r.started_at = p.at("started_at").get<std::string>();
    r.finished_at = p.at("finished_at").get<std::string>();
    r.output_dir = path.parent_path();
    r.methods = j.at("methods").get<std::vector<std::string>>();
    r.ood_sets = j.at("ood_sets").get<std::vector<std::string>>();
    for (const auto& x : j.at("runs")) {
      RunRecord rr;
      rr.run_id = x.at("run_id");
      rr.group = x.at("group");
      rr.method = x.at("method");
      rr.variant = x.at("variant");
      rr.variant_value = x.at("variant_value");
      rr.seed = x.at("seed");
      rr.ok = x.at("status") == "ok";
      rr.error = x.at("error");
      rr.test_accuracy = x.at("test_accuracy");
      rr.final_train_loss = x.at("final_train_loss");
      rr.tau = x.at("tau");
      rr.p_norm = x.at("p_norm");
      rr.normalize_after_block = x.at("normalize_after_block");
      rr.fitted_temperature = x.at("fitted_temperature");
      rr.model_file = x.at("model");
      rr.trace_file = x.at("trace");
      r.runs.push_back(rr);
    }
    for (const auto& x : j.at("metrics")) {
      MetricRecord m;
      m.run_id = x.at("run_id");
      m.group = x.at("group");
      m.method = x.at("method");
      m.seed = x.at("seed");
      m.scorer = x.at("scorer");
      m.scorer_kind = x.at("scorer_kind");
      m.scorer_param = x.at("scorer_param");
      m.ood_set = x.at("ood_set");
      m.normalize_at_scoring = x.at("normalize_at_scoring");
      m.metrics = metrics_from_json(x.at("metrics"));
      m.id_scores_file = x.at("id_scores");
      m.ood_scores_file = x.at("ood_scores");
      r.metrics.push_back(m);
    }
    for (const auto& x : j.at("aggregate")) {
      AggregateRecord a;
      a.group = x.at("group");
      a.scorer = x.at("scorer");
      a.ood_set = x.at("ood_set");
      a.normalize_at_scoring = x.at("normalize_at_scoring");
      a.n = x.at("n");
      a.mean = metrics_from_json(x.at("mean"));
      a.stddev = metrics_from_json(x.at("std"));
      r.aggregates.push_back(a);
    }
    for (const auto& x : j.at("accuracy")) {
      r.accuracy.push_back({x.at("group"), x.at("n"), x.at("mean"), x.at("std")});
    }
  } catch (const json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed report: " + e.what());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Comparison

ComparisonTable compare_methods(const RunReport& report, const std::vector<std::string>& metrics) {
  if (report.methods.size() < 2) throw std::invalid_argument("compare_methods: need at least two methods");
  if (metrics.empty()) throw std::invalid_argument("compare_methods: no metrics requested");
  for (const auto& name : metrics) {
    MetricsReport probe;
    metric_field(probe, name);
  }

  auto find = [&](const std::string& group, const std::string& scorer, const std::string& ood) -> const AggregateRecord* {
    for (const auto& a : report.aggregates) {
      if (a.group == group && a.scorer == scorer && a.ood_set == ood && !a.normalize_at_scoring) return &a;
    }
    return nullptr;
  };

  std::vector<std::string> scorers;
  for (const auto& a : report.aggregates) {
    if (a.normalize_at_scoring) continue;
    if (std::find(report.methods.begin(), report.methods.end(), a.group) == report.methods.end()) continue;
    if (std::find(scorers.begin(), scorers.end(), a.scorer) == scorers.end()) scorers.push_back(a.scorer);
  }

  ComparisonTable t;
  t.methods = report.methods;
  t.metrics = metrics;
  auto mark_best = [&](ComparisonRow& row) {
    row.best.clear();
    for (std::size_t k = 0; k < metrics.size(); ++k) {
      const auto& v = row.values[k];
      const bool lower = metrics[k] == "fpr_at_95";
      std::size_t best = 0;
      for (std::size_t i = 1; i < v.size(); ++i) {
        if (lower ? v[i] < v[best] : v[i] > v[best]) best = i;
      }
      row.best.push_back(best);
    }
  };

  for (const auto& scorer : scorers) {
    std::vector<ComparisonRow> per_set;
    for (const auto& ood : report.ood_sets) {
      ComparisonRow row;
      row.scorer = scorer;
      row.ood_set = ood;
      row.values.assign(metrics.size(), std::vector<double>(t.methods.size(), 0.0));
      bool complete = true;
      for (std::size_t i = 0; i < t.methods.size() && complete; ++i) {
        const AggregateRecord* a = find(t.methods[i], scorer, ood);
        if (!a) {
          complete = false;
          break;
        }
        for (std::size_t k = 0; k < metrics.size(); ++k) {
          row.values[k][i] = metric_field(a->mean, metrics[k]);
        }
      }
      if (!complete) continue;
      mark_best(row);
      per_set.push_back(row);
    }
    if (per_set.empty()) continue;
    ComparisonRow mean;
    mean.scorer = scorer;
    mean.ood_set = "mean";
    mean.values.assign(metrics.size(), std::vector<double>(t.methods.size(), 0.0));
    for (std::size_t k = 0; k < metrics.size(); ++k) {
      for (std::size_t i = 0; i < t.methods.size(); ++i) {
        double sum = 0.0;
        for (const auto& row : per_set) sum += row.values[k][i];
        mean.values[k][i] = sum / static_cast<double>(per_set.size());
      }
    }
    mark_best(mean);
    for (auto& row : per_set) t.rows.push_back(std::move(row));
    t.rows.push_back(std::move(mean));
  }
  return t;
}

std::string ComparisonTable::to_csv() const {
  std::ostringstream os;
  os << "scorer,ood_set,methods";
  for (const auto& m : metrics) os << ',' << m;
  os << '\n';
  std::string method_cell;
  for (std::size_t i = 0; i < methods.size(); ++i) method_cell += (i ? "/" : "") + methods[i];
  for (const auto& row : rows) {
    os << row.scorer << ',' << row.ood_set << ',' << method_cell;
    for (std::size_t k = 0; k < metrics.size(); ++k) {
      os << ',';
      for (std::size_t i = 0; i < methods.size(); ++i) {
        os << (i ? "/" : "") << num(row.values[k][i]) << (row.best[k] == i ? "*" : "");
      }
    }
    os << '\n';
  }
  return os.str();
}

std::string ComparisonTable::to_text() const {
  std::string method_cell;
  for (std::size_t i = 0; i < methods.size(); ++i) method_cell += (i ? "/" : "") + methods[i];
  std::vector<std::vector<std::string>> cells;
  cells.push_back({"scorer", "ood_set"});
  for (const auto& m : metrics) cells.back().push_back(m + " (%)");
  for (const auto& row : rows) {
    std::vector<std::string> line{row.scorer, row.ood_set};
    for (std::size_t k = 0; k < metrics.size(); ++k) {
      std::string cell;
      for (std::size_t i = 0; i < methods.size(); ++i) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.2f", 100.0 * row.values[k][i]);
        cell += (i ? "/" : "") + std::string(buf) + (row.best[k] == i ? "*" : "");
      }
      line.push_back(cell);
    }
    cells.push_back(line);
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  }
  std::ostringstream os;
  os << "methods: " << method_cell << "  (* marks the best value)\n";
  for (const auto& line : cells) {
    for (std::size_t c = 0; c < line.size(); ++c) {
      os << std::left << std::setw(static_cast<int>(width[c])) << line[c] << (c + 1 < line.size() ? "  " : "");
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Plot data

std::string to_string(PlotKind k) {
  switch (k) {
    case PlotKind::separability_progression: return "separability_progression";
    case PlotKind::norm_progression: return "norm_progression";
    case PlotKind::msp_histogram: return "msp_histogram";
    case PlotKind::tau_sweep: return "tau_sweep";
    case PlotKind::dice_sweep: return "dice_sweep";
    case PlotKind::fc_heatmap: return "fc_heatmap";
  }
  return "unknown";
}

PlotKind parse_plot_kind(const std::string& name) {
  for (auto k : {PlotKind::separability_progression, PlotKind::norm_progression, PlotKind::msp_histogram,
                 PlotKind::tau_sweep, PlotKind::dice_sweep, PlotKind::fc_heatmap}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown plot kind '" + name + "'");
}

namespace {

std::vector<const RunRecord*> main_runs(const RunReport& r, const std::string& method) {
  std::vector<const RunRecord*> out;
  for (const auto& x : r.runs) {
    if (x.ok && x.variant == "main" && x.method == method) out.push_back(&x);
  }
  return out;
}

// Per-method traces averaged over seeds; `columns` pick fields of EpochTrace.
std::string progression_csv(const RunReport& r, const std::vector<std::string>& names,
                            const std::vector<std::optional<double> (*)(const EpochTrace&)>& columns) {
  std::ostringstream os;
  os << "method,epoch,seeds";
  for (const auto& n : names) os << ',' << n;
  os << '\n';
  bool any = false;
  for (const auto& method : r.methods) {
    const auto runs = main_runs(r, method);
    if (runs.empty()) continue;
    std::vector<std::vector<EpochTrace>> traces;
    for (const auto* run : runs) traces.push_back(read_trace_csv(r.output_dir / run->trace_file));
    std::size_t epochs = traces.front().size();
    for (const auto& t : traces) epochs = std::min(epochs, t.size());
    for (std::size_t e = 0; e < epochs; ++e) {
      os << method << ',' << traces.front()[e].epoch << ',' << traces.size();
      for (const auto& col : columns) {
        double sum = 0.0;
        for (const auto& t : traces) {
          const auto v = col(t[e]);
          if (!v) throw std::runtime_error("traces of " + method + " carry no OOD monitoring data");
          sum += *v;
        }
        os << ',' << num(sum / static_cast<double>(traces.size()));
      }
      os << '\n';
      any = true;
    }
  }
  if (!any) throw std::runtime_error("report has no completed main runs");
  return os.str();
}

}  // namespace

fs::path export_plotdata(const RunReport& r, PlotKind kind) {
  std::ostringstream os;
  switch (kind) {
    case PlotKind::separability_progression:
      os << progression_csv(r, {"separability_feature", "separability_logit"},
                            {[](const EpochTrace& t) { return t.separability_feature; },
                             [](const EpochTrace& t) { return t.separability_logit; }});
      break;
    case PlotKind::norm_progression:
      os << progression_csv(
          r, {"id_feature_norm", "ood_feature_norm", "id_logit_norm", "ood_logit_norm"},
          {[](const EpochTrace& t) { return std::optional<double>(t.id_feature_norm); },
           [](const EpochTrace& t) { return t.ood_feature_norm; },
           [](const EpochTrace& t) { return std::optional<double>(t.id_logit_norm); },
           [](const EpochTrace& t) { return t.ood_logit_norm; }});
      break;
    case PlotKind::msp_histogram: {
      os << "method,ood_set,bin,bin_low,bin_high,id_count,ood_count,id_mass,ood_mass\n";
      bool any = false;
      for (const auto& method : r.methods) {
        for (const auto& ood : r.ood_sets) {
          std::vector<double> id_scores, ood_scores;
          for (const auto& m : r.metrics) {
            if (m.method != method || m.group != method || m.scorer != "msp" || m.ood_set != ood ||
                m.normalize_at_scoring) {
              continue;
            }
            const auto a = read_score_csv(r.output_dir / m.id_scores_file);
            const auto b = read_score_csv(r.output_dir / m.ood_scores_file);
            id_scores.insert(id_scores.end(), a.begin(), a.end());
            ood_scores.insert(ood_scores.end(), b.begin(), b.end());
          }
          if (id_scores.empty() || ood_scores.empty()) continue;
          const ScoreHistogram h = msp_histogram(id_scores, ood_scores, kHistogramBins);
          for (std::size_t b = 0; b < h.bins; ++b) {
            const double lo = static_cast<double>(b) / static_cast<double>(h.bins);
            const double hi = static_cast<double>(b + 1) / static_cast<double>(h.bins);
            os << method << ',' << ood << ',' << b << ',' << num(lo) << ',' << num(hi) << ',' << h.id_counts[b] << ','
               << h.ood_counts[b] << ',' << num(h.id_mass[b]) << ',' << num(h.ood_mass[b]) << '\n';
          }
          any = true;
        }
      }
      if (!any) throw std::runtime_error("msp_histogram needs the msp scorer");
      break;
    }
    case PlotKind::tau_sweep: {
      const bool swept = std::any_of(r.runs.begin(), r.runs.end(), [](const RunRecord& x) { return x.variant == "tau"; });
      if (!swept) throw std::runtime_error("tau_sweep needs a report with the tau sweep enabled");
      os << "tau,seed,run_id,accuracy,scorer,ood_set,fpr_at_95,auroc\n";
      for (const auto& run : r.runs) {
        if (!run.ok || run.method != "t2fnorm" || (run.variant != "main" && run.variant != "tau")) continue;
        for (const auto& m : r.metrics) {
          if (m.run_id != run.run_id || m.normalize_at_scoring) continue;
          os << num(run.tau) << ',' << run.seed << ',' << run.run_id << ',' << num(run.test_accuracy) << ','
             << m.scorer << ',' << m.ood_set << ',' << num(m.metrics.fpr_at_95) << ',' << num(m.metrics.auroc) << '\n';
        }
      }
      break;
    }
    case PlotKind::dice_sweep: {
      os << "method,seed,sparsity,ood_set,fpr_at_95,auroc\n";
      bool any = false;
      for (const auto& m : r.metrics) {
        if (m.scorer_kind != "dice" || m.normalize_at_scoring || m.group != m.method) continue;
        os << m.method << ',' << m.seed << ',' << num(m.scorer_param) << ',' << m.ood_set << ','
           << num(m.metrics.fpr_at_95) << ',' << num(m.metrics.auroc) << '\n';
        any = true;
      }
      if (!any) throw std::runtime_error("dice_sweep needs DICE scores (dice scorer or dice_p_sweep)");
      break;
    }
    case PlotKind::fc_heatmap: {
      bool header = false;
      for (const auto& method : r.methods) {
        const auto runs = main_runs(r, method);
        if (runs.empty()) continue;
        const ModelState m = load_model(r.output_dir / runs.front()->model_file);
        const RowMatrix w = m.fc_weight().matrix();
        if (!header) {
          os << "method,seed,class";
          for (Eigen::Index d = 0; d < w.cols(); ++d) os << ",w_" << d;
          os << '\n';
          header = true;
        }
        for (Eigen::Index c = 0; c < w.rows(); ++c) {
          os << method << ',' << runs.front()->seed << ',' << c;
          for (Eigen::Index d = 0; d < w.cols(); ++d) os << ',' << num(w(c, d));
          os << '\n';
        }
      }
      if (!header) throw std::runtime_error("fc_heatmap needs at least one completed main run");
      break;
    }
  }
  const fs::path dir = r.output_dir / "plots";
  fs::create_directories(dir);
  const fs::path path = dir / (to_string(kind) + ".csv");
  write_text(path, os.str());
  return path;
}

}  // namespace t2fnorm

// sgzero command-line interface.
//
// Exit codes: 0 success, 1 validation error (bad flag, config, missing or
// malformed input), 2 runtime failure.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "sgzero/experiment.hpp"
#include "sgzero/manifest.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sgz;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct Invocation {
  std::string command;
  std::uint64_t seed = 0;
  ExperimentConfig cfg;
  json options = json::object();
  std::map<std::string, std::string> inputs;  // role -> path
  std::string out;
  std::size_t threads = 1;

  const std::string& input(const std::string& role) const {
    auto it = inputs.find(role);
    if (it == inputs.end()) throw UsageError(command + ": missing required input --" + role);
    return it->second;
  }
  bool has(const std::string& role) const { return inputs.count(role) != 0; }
};

/// Tracks files read and written by one command and emits its manifest.
class Run {
 public:
  explicit Run(const Invocation& inv) : inv_(inv) {
    fs::create_directories(inv.out);
    m_.command = inv.command;
    m_.seed = inv.seed;
    m_.config = inv.cfg;
    m_.options = inv.options;
    m_.input_args = inv.inputs;
  }

  std::string read(const std::string& path, const std::string& hint = "") {
    if (!fs::is_regular_file(path)) {
      throw UsageError("missing input file " + path + (hint.empty() ? "" : " (" + hint + ")"));
    }
    m_.inputs.push_back({path, sha256_file(path)});
    return path;
  }

  std::string write(const std::string& name) {
    outputs_.push_back(name);
    return (fs::path(inv_.out) / name).string();
  }

  void finish() {
    for (const auto& name : outputs_) m_.outputs.push_back({name, sha256_file((fs::path(inv_.out) / name).string())});
    write_manifest(inv_.out, m_);
  }

 private:
  const Invocation& inv_;
  RunManifest m_;
  std::vector<std::string> outputs_;
};

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  return os;
}

void write_json(const std::string& path, const json& j) { open_out(path) << j.dump(2) << '\n'; }

void write_triplets_csv(const std::string& path, const TripletSet& set, const Dataset& names) {
  auto os = open_out(path);
  os << "s_class,predicate,o_class\n";
  for (const auto& k : set) {
    os << names.entity_classes.at(k.s) << ',' << names.predicate_classes.at(k.p) << ','
       << names.entity_classes.at(k.o) << '\n';
  }
}

TripletSet read_triplets_csv(const std::string& path, const Dataset& names) {
  std::map<std::string, std::uint32_t> ent, pred;
  for (std::uint32_t i = 0; i < names.entity_classes.size(); ++i) ent[names.entity_classes[i]] = i;
  for (std::uint32_t i = 0; i < names.predicate_classes.size(); ++i) pred[names.predicate_classes[i]] = i;
  std::ifstream is(path);
  TripletSet out;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (n == 1 || line.empty()) continue;
    std::stringstream ss(line);
    std::string s, p, o;
    std::getline(ss, s, ',');
    std::getline(ss, p, ',');
    std::getline(ss, o, ',');
    if (!ent.count(s) || !pred.count(p) || !ent.count(o)) {
      throw DataError(path + ": line " + std::to_string(n) + ": unknown class name");
    }
    out.insert({ent[s], pred[p], ent[o]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Data directory layout written by `synth`

constexpr const char* kTrainFile = "train.json";
constexpr const char* kTestFile = "test.json";
constexpr const char* kFeatureFile = "features.sgft";
constexpr const char* kEmbeddingFile = "embeddings.txt";
constexpr const char* kPlausibleFile = "plausible.csv";

SyntheticData load_data(Run& run, const std::string& dir) {
  auto path = [&](const char* f) { return (fs::path(dir) / f).string(); };
  const std::string hint = "expected a directory written by `sgzero synth`";
  SyntheticData d;
  d.train = load_dataset(run.read(path(kTrainFile), hint), Split::train);
  d.test = load_dataset(run.read(path(kTestFile), hint), Split::test);
  require_shared_classes(d.train, d.test);
  d.features = load_features(run.read(path(kFeatureFile), hint));
  d.embeddings = load_embeddings(run.read(path(kEmbeddingFile), hint));
  if (fs::exists(path(kPlausibleFile))) d.plausible = read_triplets_csv(run.read(path(kPlausibleFile)), d.train);
  return d;
}

KeepSet load_keepset(Run& run, const Invocation& inv, const Prepared& p) {
  KeepSet ks;
  if (!inv.has("keepset")) {
    // No reduction: every composition stays a candidate.
    for (const auto& k : composition_space(p.train.num_entity_classes(), p.train.num_predicates())) ks.kept.insert(k);
    return ks;
  }
  std::ifstream is(run.read(inv.input("keepset"), "expected keepset.csv from `sgzero reduce`"));
  const KeepSetFile f = read_keepset_csv(is, p.train);
  for (const auto& k : p.seen) {
    if (!f.kept.count(k)) throw DataError("keep set drops a seen triplet; it was built for a different dataset");
  }
  ks.kept = f.kept;
  return ks;
}

/// Label statistics without a plausibility scorer.
Prepared prepare_labels(SyntheticData data, const ExperimentConfig& cfg) {
  const ParamStore none = zero_usrl_params(data.embeddings.dim());
  return prepare_from(std::move(data), cfg, 0, &none);
}

ParamStore load_usrl(Run& run, const Invocation& inv) {
  return load_checkpoint(run.read(inv.input("usrl"), "expected usrl.sgck from `sgzero train-usrl`"));
}

// ---------------------------------------------------------------------------
// Commands

void cmd_synth(const Invocation& inv) {
  Run run(inv);
  const SyntheticData d = generate_synthetic(inv.cfg.gen, inv.seed);
  save_dataset(run.write(kTrainFile), d.train);
  save_dataset(run.write(kTestFile), d.test);
  save_features(run.write(kFeatureFile), d.features);
  save_embeddings(run.write(kEmbeddingFile), d.embeddings);
  write_triplets_csv(run.write(kPlausibleFile), d.plausible, d.train);
  run.finish();
}

json split_summary(const Dataset& ds) {
  std::size_t entities = 0;
  for (const auto& g : ds.graphs) entities += g.entities.size();
  return {{"images", ds.graphs.size()}, {"entities", entities}, {"relations", ds.num_relations()}};
}

void cmd_stats(const Invocation& inv) {
  Run run(inv);
  const Prepared p = prepare_labels(load_data(run, inv.input("data")), inv.cfg);
  json pred = json::object();
  const auto counts = predicate_counts(p.train);
  for (std::size_t i = 0; i < counts.size(); ++i) pred[p.train.predicate_classes[i]] = counts[i];
  const json j = {{"train", split_summary(p.train)},
                  {"test", split_summary(p.data.test)},
                  {"entity_classes", p.train.num_entity_classes()},
                  {"predicate_classes", p.train.num_predicates()},
                  {"composition_space", p.train.num_entity_classes() * p.train.num_entity_classes() *
                                            p.train.num_predicates()},
                  {"seen_triplets", p.seen.size()},
                  {"unseen_test_triplets", p.unseen.size()},
                  {"max_triplet_count", p.stats.n_max},
                  {"predicate_counts", pred}};
  write_json(run.write("stats.json"), j);
  auto os = open_out(run.write("alpha.csv"));
  write_alpha_csv(os, p.alpha, p.stats, p.train);
  os.close();
  write_triplets_csv(run.write("unseen.csv"), p.unseen, p.train);
  run.finish();
}

void cmd_train_usrl(const Invocation& inv) {
  Run run(inv);
  const Prepared p = prepare_labels(load_data(run, inv.input("data")), inv.cfg);
  const auto space = composition_space(p.train.num_entity_classes(), p.train.num_predicates());
  const UsrlResult u = train_usrl(p.seen, space, p.train, p.data.embeddings, inv.cfg.pu, inv.seed);
  save_checkpoint(run.write("usrl.sgck"), u.params);
  auto os = open_out(run.write("usrl_history.csv"));
  os << "epoch,loss,clamp_active\n";
  for (const auto& e : u.history) os << e.epoch << ',' << format_double(e.loss) << ',' << e.clamp_active << '\n';
  os.close();
  run.finish();
}

void cmd_reduce(const Invocation& inv) {
  Run run(inv);
  SyntheticData data = load_data(run, inv.input("data"));
  const ParamStore usrl = load_usrl(run, inv);
  const Prepared p = prepare_from(std::move(data), inv.cfg, inv.seed, &usrl);
  const KeepSet ks = reduce_space(p.scores, inv.cfg.reduction_rate, p.seen);
  auto os = open_out(run.write("keepset.csv"));
  write_keepset_csv(os, p.scores, ks, p.train);
  os.close();

  std::size_t kept_zero_shot = 0;
  for (const auto& k : p.unseen) kept_zero_shot += ks.kept.count(k);
  json j = {{"rate", ks.rate},
            {"unseen_candidates", ks.unseen_candidates},
            {"kept_unseen", ks.kept.size() - p.seen.size()},
            {"threshold", std::isfinite(ks.threshold) ? json(ks.threshold) : json(nullptr)},
            {"zero_shot_test_triplets", p.unseen.size()},
            {"zero_shot_kept", kept_zero_shot}};
  if (!p.data.plausible.empty()) j["plausibility_auc"] = plausibility_auc(p.scores, p.seen, p.data.plausible);
  write_json(run.write("reduction.json"), j);
  run.finish();
}

void cmd_train(const Invocation& inv) {
  Run run(inv);
  const Prepared p = prepare_labels(load_data(run, inv.input("data")), inv.cfg);
  const KeepSet ks = load_keepset(run, inv, p);
  const CalibrationSpace space = make_space(p, ks);
  const CenConfig cen = cen_for(inv.cfg.cen, p.train, p.data.features.dim());
  validate_cen_config(cen);
  TrainConfig tc = inv.cfg.train;
  tc.seed = inv.seed;

  TrainState st = init_train_state(cen, tc.seed);
  if (inv.has("resume")) {
    TrainState resumed = unpack_train_state(load_checkpoint(run.read(inv.input("resume"))));
    bool same = resumed.params.size() == st.params.size();
    for (const auto& [name, t] : st.params) {
      same = same && resumed.params.contains(name) && resumed.params.at(name).rows() == t.rows() &&
             resumed.params.at(name).cols() == t.cols();
    }
    if (!same) {
      throw UsageError("resume checkpoint does not match the configured network");
    }
    st = std::move(resumed);
  }
  const std::uint32_t until = inv.options.value("until", tc.iterations);
  if (until > tc.iterations) throw UsageError("--until exceeds the configured iteration count");
  RunRecord record;
  train_until(st, TrainData{p.train, p.data.features, space, cen}, tc, record, until);

  save_checkpoint(run.write("model.sgck"), pack_train_state(st));
  write_json(run.write("model.json"), {{"cen", cen}, {"iteration", st.iteration}});
  auto os = open_out(run.write("run.csv"));
  write_run_csv(os, record);
  os.close();
  run.finish();
}

void write_per_predicate(const std::string& path, const std::vector<ImageMatch>& matches, const Prepared& p,
                         const ProtocolConfig& proto) {
  auto os = open_out(path);
  os << "predicate,train_count,K,zR,contributing_images,hits,gt_total\n";
  const auto counts = predicate_counts(p.train);
  for (auto k : proto.ks) {
    for (const auto& pr : per_predicate_zr(matches, p.unseen, k, counts)) {
      os << p.train.predicate_classes.at(pr.predicate) << ',' << pr.train_count << ',' << k << ','
         << (pr.recall.value ? format_double(*pr.recall.value) : "NA") << ',' << pr.recall.contributing_images
         << ',' << pr.recall.hits << ',' << pr.recall.gt_total << '\n';
    }
  }
}

void cmd_eval(const Invocation& inv) {
  Run run(inv);
  const Prepared p = prepare_labels(load_data(run, inv.input("data")), inv.cfg);
  const ProtocolConfig& proto = inv.cfg.protocol;
  std::vector<ImageMatch> matches;
  if (inv.has("predictions")) {
    if (inv.has("model")) throw UsageError("eval: give either --model or --predictions, not both");
    std::ifstream is(run.read(inv.input("predictions")));
    matches = match_all(read_predictions(is), p.data.test, proto.iou_threshold);
  } else {
    const fs::path dir = inv.input("model");
    const std::string hint = "expected a directory written by `sgzero train`";
    std::ifstream js(run.read((dir / "model.json").string(), hint));
    CenConfig cen;
    try {
      cen = json::parse(js).at("cen").get<CenConfig>();
    } catch (const json::exception& e) {
      throw DataError("model.json: " + std::string(e.what()));
    }
    const ParamStore params = unpack_train_state(load_checkpoint(run.read((dir / "model.sgck").string(), hint))).params;
    const KeepSet ks = load_keepset(run, inv, p);
    const CalibrationSpace space = make_space(p, ks);
    const InferenceContext ctx{cen, params, proto, &space, &p.freq, inv.seed};
    const EvalResult r = evaluate_model(p.data.test, p.data.features, ctx, inv.threads);
    auto os = open_out(run.write("predictions.jsonl"));
    write_predictions(os, r.predictions);
    os.close();
    matches = r.matches;
  }
  auto os = open_out(run.write("metrics.csv"));
  write_metrics_csv(os, compute_metrics(matches, p.unseen, proto));
  os.close();
  write_per_predicate(run.write("per_predicate.csv"), matches, p, proto);
  run.finish();
}

std::string metric_cell(const VariantResult& v, const char* name, std::size_t k) {
  const MetricRow* r = find_metric(v.metrics, name, k);
  return r && r->value ? format_double(*r->value) : "NA";
}

void cmd_report(const Invocation& inv) {
  const json& sweep = inv.options.at("sweep_rates");
  const bool per_pred = inv.options.value("per_predicate", false);
  if (sweep.empty() && !per_pred) throw UsageError("report: nothing to do; pass --sweep and/or --per-predicate");
  Run run(inv);
  SyntheticData data = load_data(run, inv.input("data"));
  const ParamStore usrl = load_usrl(run, inv);
  const Prepared p = prepare_from(std::move(data), inv.cfg, inv.seed, &usrl);
  const auto& ks = inv.cfg.protocol.ks;

  std::map<double, VariantResult> by_rate;
  auto variant = [&](double rate) -> const VariantResult& {
    auto it = by_rate.find(rate);
    if (it != by_rate.end()) return it->second;
    ExperimentConfig c = inv.cfg;
    c.reduction_rate = rate;
    return by_rate.emplace(rate, run_variant(p, c, inv.seed, inv.threads)).first->second;
  };

  if (!sweep.empty()) {
    auto os = open_out(run.write("sweep.csv"));
    os << "rate,kept_unseen";
    for (const char* m : {"R", "zR"})
      for (auto k : ks) os << ',' << m << '@' << k;
    os << '\n';
    for (double rate : sweep.get<std::vector<double>>()) {
      const VariantResult& v = variant(rate);
      os << json(rate).dump() << ',' << v.keep.kept.size() - p.seen.size();
      for (const char* m : {"R", "zR"})
        for (auto k : ks) os << ',' << metric_cell(v, m, k);
      os << '\n';
    }
  }
  if (per_pred) {
    const VariantResult& full = variant(inv.cfg.reduction_rate);
    const VariantResult abl = run_variant(p, ablation_of(inv.cfg), inv.seed, inv.threads);
    const std::size_t k = ks.back();
    const auto counts = predicate_counts(p.train);
    std::map<std::uint32_t, std::pair<RecallResult, RecallResult>> rows;
    for (const auto& pr : per_predicate_zr(full.eval.matches, p.unseen, k, counts)) rows[pr.predicate].first = pr.recall;
    for (const auto& pr : per_predicate_zr(abl.eval.matches, p.unseen, k, counts)) rows[pr.predicate].second = pr.recall;
    auto os = open_out(run.write("per_predicate.csv"));
    os << "predicate,train_count,K,zR_full,zR_ablation,delta,contributing_images\n";
    for (const auto& pr : per_predicate_zr(full.eval.matches, p.unseen, k, counts)) {
      const auto& [f, a] = rows[pr.predicate];
      os << p.train.predicate_classes.at(pr.predicate) << ',' << pr.train_count << ',' << k << ','
         << format_double(*f.value) << ',' << format_double(*a.value) << ',' << format_double(*f.value - *a.value)
         << ',' << f.contributing_images << '\n';
    }
  }
  run.finish();
}

void dispatch(const Invocation& inv) {
  static const std::map<std::string, void (*)(const Invocation&)> table = {
      {"synth", cmd_synth}, {"stats", cmd_stats}, {"train-usrl", cmd_train_usrl}, {"reduce", cmd_reduce},
      {"train", cmd_train}, {"eval", cmd_eval},   {"report", cmd_report}};
  auto it = table.find(inv.command);
  if (it == table.end()) throw UsageError("unknown command '" + inv.command + "'");
  it->second(inv);
}

// ---------------------------------------------------------------------------
// Argument handling

std::size_t default_threads() {
  if (const char* env = std::getenv("SGZERO_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("SGZERO_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

json parse_scalar(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception&) {
    return text;
  }
}

/// Applies "a.b.c=value" onto a JSON object.
void apply_set(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + assignment + "'");
  json* node = &j;
  std::stringstream path(assignment.substr(0, eq));
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(path, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    json& next = (*node)[keys[i]];
    if (!next.is_object()) next = json::object();
    node = &next;
  }
  (*node)[keys.back()] = parse_scalar(assignment.substr(eq + 1));
}

struct Flags {
  std::string config, out, manifest;
  std::vector<std::string> sets, sweep;
  std::optional<std::uint64_t> seed;
  std::optional<double> rate;
  std::optional<std::string> task;
  std::optional<std::uint32_t> until;
  std::optional<std::size_t> threads;
  bool per_predicate = false;
  std::map<std::string, std::string> inputs;
};

void add_common(CLI::App* sub, Flags& f) {
  sub->add_option("--config", f.config, "JSON config file (overridden by flags)")->check(CLI::ExistingFile);
  sub->add_option("--set", f.sets, "Override one config field, e.g. train.lr=0.01");
  sub->add_option("--seed", f.seed, "Random seed");
  sub->add_option("--out", f.out, "Output directory")->required();
  sub->add_option("--threads", f.threads, "Worker threads (default: SGZERO_THREADS or all cores)")
      ->check(CLI::PositiveNumber);
}

void add_input(CLI::App* sub, Flags& f, const std::string& role, const std::string& help, bool required) {
  auto* opt = sub->add_option_function<std::string>("--" + role, [&f, role](const std::string& v) { f.inputs[role] = v; },
                                                    help);
  if (required) opt->required();
}

Invocation resolve(const std::string& command, const Flags& f) {
  Invocation inv;
  inv.command = command;
  inv.out = f.out;
  inv.inputs = f.inputs;
  json user = json::object();
  if (!f.config.empty()) {
    std::ifstream is(f.config);
    try {
      user = json::parse(is);
    } catch (const json::exception& e) {
      throw UsageError("config " + f.config + ": " + e.what());
    }
  }
  for (const auto& s : f.sets) apply_set(user, s);
  if (f.rate) user["reduction_rate"] = *f.rate;
  if (f.task) {
    user["train"]["task"] = *f.task;
    user["protocol"]["mode"] = *f.task;
  }
  inv.cfg = experiment_from_json(user);
  inv.seed = f.seed.value_or(inv.cfg.train.seed);
  inv.cfg.train.seed = inv.seed;
  validate_experiment(inv.cfg);

  if (f.until) inv.options["until"] = *f.until;
  if (command == "report") {
    std::vector<double> rates;
    if (!f.sweep.empty()) {
      if (f.sweep[0] != "reduction-rate") throw UsageError("report: unsupported sweep '" + f.sweep[0] + "'");
      std::stringstream ss(f.sweep[1]);
      std::string cell;
      while (std::getline(ss, cell, ',')) {
        const double r = parse_scalar(cell).is_number() ? parse_scalar(cell).get<double>() : -1.0;
        if (!(r >= 0.0 && r <= 1.0)) throw UsageError("report: sweep rate '" + cell + "' is not in [0, 1]");
        rates.push_back(r);
      }
    }
    inv.options["sweep_rates"] = rates;
    inv.options["per_predicate"] = f.per_predicate;
  }
  inv.threads = f.threads.value_or(default_threads());
  return inv;
}

/// Rebuilds an invocation from a manifest, refusing inputs that changed since.
Invocation from_manifest(const Flags& f) {
  const RunManifest m = read_manifest(f.manifest);
  for (const auto& d : m.inputs) {
    if (!fs::is_regular_file(d.path)) throw UsageError("rerun: input " + d.path + " no longer exists");
    if (sha256_file(d.path) != d.sha256) throw UsageError("rerun: input " + d.path + " changed since the manifest");
  }
  Invocation inv;
  inv.command = m.command;
  inv.seed = m.seed;
  inv.cfg = experiment_from_json(m.config);
  validate_experiment(inv.cfg);
  inv.options = m.options;
  inv.inputs = m.input_args;
  inv.out = f.out;
  inv.threads = f.threads.value_or(default_threads());
  return inv;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sgzero: zero-shot scene graph generation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", SGZERO_VERSION);
  Flags f;
  const std::string data_help = "Dataset directory written by synth";

  auto* synth = app.add_subcommand("synth", "Generate a synthetic scene-graph dataset");
  add_common(synth, f);

  auto* stats = app.add_subcommand("stats", "Triplet statistics, calibration margins and the zero-shot split");
  add_common(stats, f);
  add_input(stats, f, "data", data_help, true);

  auto* usrl = app.add_subcommand("train-usrl", "Train the triplet plausibility scorer");
  add_common(usrl, f);
  add_input(usrl, f, "data", data_help, true);

  auto* reduce = app.add_subcommand("reduce", "Score the composition space and build the keep set");
  add_common(reduce, f);
  add_input(reduce, f, "data", data_help, true);
  add_input(reduce, f, "usrl", "Scorer checkpoint from train-usrl", true);
  reduce->add_option("--rate", f.rate, "Fraction of unseen compositions to remove (default 0.85)");

  auto* train = app.add_subcommand("train", "Train the scene graph network");
  add_common(train, f);
  add_input(train, f, "data", data_help, true);
  add_input(train, f, "keepset", "keepset.csv from reduce (default: no reduction)", false);
  add_input(train, f, "resume", "Continue from a model.sgck checkpoint", false);
  train->add_option("--until", f.until, "Stop after this many total iterations");
  train->add_option("--task", f.task, "predcls, sgcls or sgdet");

  auto* eval = app.add_subcommand("eval", "Evaluate a trained model or an external prediction dump");
  add_common(eval, f);
  add_input(eval, f, "data", data_help, true);
  add_input(eval, f, "model", "Model directory from train", false);
  add_input(eval, f, "predictions", "JSON-lines prediction dump (no model needed)", false);
  add_input(eval, f, "keepset", "keepset.csv used for calibrated inference", false);
  eval->add_option("--task", f.task, "predcls, sgcls or sgdet");

  auto* report = app.add_subcommand("report", "Reduction-rate sweeps and per-predicate breakdowns");
  add_common(report, f);
  add_input(report, f, "data", data_help, true);
  add_input(report, f, "usrl", "Scorer checkpoint from train-usrl", true);
  report->add_option("--sweep", f.sweep, "Parameter and values, e.g. reduction-rate 0,0.5,0.85,1.0")->expected(2);
  report->add_option("--rate", f.rate, "Reduction rate of the full model");
  report->add_flag("--per-predicate", f.per_predicate, "Per-predicate zR of the full model against the ablation");

  auto* rerun = app.add_subcommand("rerun", "Repeat a run from its manifest");
  rerun->add_option("--manifest", f.manifest, "manifest.json of an earlier run")->required();
  rerun->add_option("--out", f.out, "Output directory")->required();
  rerun->add_option("--threads", f.threads, "Worker threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    const Invocation inv = sub == rerun ? from_manifest(f) : resolve(sub->get_name(), f);
    dispatch(inv);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

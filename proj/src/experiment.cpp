#include "vflbd/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace vflbd {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

std::string vote_name(VoteRule r) { return r == VoteRule::StrictlyAbove ? "strict" : "at-least"; }

std::string recon_name(ReconstructionSet r) { return r == ReconstructionSet::Target ? "target" : "auxiliary"; }

// Walks one JSON object, reading known keys and reporting unknown ones.
class Reader {
 public:
  Reader(const json* j, std::string path, std::vector<std::string>& errors)
      : j_(j), path_(std::move(path)), errors_(errors) {
    if (j_ && !j_->is_object()) {
      errors_.push_back(path_ + ": expected an object");
      j_ = nullptr;
    }
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_ || !j_->contains(key)) return;
    try {
      out = j_->at(key).get<T>();
    } catch (const json::exception&) {
      errors_.push_back(field(key) + ": wrong type");
    }
  }

  Reader child(const char* key) {
    seen_.insert(key);
    const json* c = (j_ && j_->contains(key)) ? &j_->at(key) : nullptr;
    return Reader(c, field(key), errors_);
  }

  const json* raw(const char* key) {
    seen_.insert(key);
    return (j_ && j_->contains(key)) ? &j_->at(key) : nullptr;
  }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  ~Reader() {
    if (!j_) return;
    for (const auto& [k, v] : j_->items())
      if (!seen_.count(k)) errors_.push_back(field(k.c_str()) + ": unknown key");
  }

 private:
  const json* j_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> seen_;
};

}  // namespace

ojson to_json(const ExperimentConfig& c) {
  ojson j;
  j["name"] = c.name;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  const auto& d = c.dataset;
  j["dataset"] = {{"kind", d.kind},
                  {"train_images", d.train_images},
                  {"train_labels", d.train_labels},
                  {"test_images", d.test_images},
                  {"test_labels", d.test_labels},
                  {"train_cap", d.train_cap},
                  {"test_cap", d.test_cap},
                  {"synthetic_train", d.synthetic_train},
                  {"synthetic_test", d.synthetic_test},
                  {"classes", d.classes},
                  {"channels", d.channels},
                  {"height", d.height},
                  {"width", d.width},
                  {"noise", d.noise}};
  j["partition"] = {{"kind", c.partition.kind},
                    {"clients", c.partition.clients},
                    {"grid_rows", c.partition.grid_rows},
                    {"grid_cols", c.partition.grid_cols}};
  j["models"] = {{"bottom", c.models.bottom}, {"top_hidden", c.models.top_hidden}};
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"rounds", t.rounds},
                {"batch_size", t.batch_size},
                {"lr", t.lr},
                {"lr_decay", t.lr_decay},
                {"top_optimizer", t.top_optimizer == TopOptimizer::Adam ? "adam" : "sgd"},
                {"adam_lr", t.top_adam.lr},
                {"eval_every", t.eval_every},
                {"instrument", t.instrument},
                {"parallel_clients", t.parallel_clients}};
  j["defense"] = {{"enabled", c.defense}, {"variance", c.defense_variance}};
  ojson edges = ojson::array();
  for (auto [u, v] : c.adversaries.edges) edges.push_back({u, v});
  j["adversaries"] = {{"ids", c.adversaries.ids},
                      {"topology", c.adversaries.topology},
                      {"edges", edges},
                      {"extra_edges", c.adversaries.extra_edges},
                      {"normalized_rho", c.adversaries.normalized_rho}};
  j["aux"] = {{"count", c.aux.count}, {"target_fraction", c.aux.target_fraction}};
  j["vae"] = {{"lambda", c.vae_loss.lambda},
              {"lambda_hat", c.vae_loss.lambda_hat},
              {"margin", c.vae_loss.margin},
              {"latent_dim", c.vae.latent_dim},
              {"hidden", c.vae.hidden},
              {"steps", c.vae.steps},
              {"negatives_per_batch", c.vae.negatives_per_batch},
              {"batch_size", c.vae.batch_size},
              {"lr", c.vae.lr},
              {"reconstruction", recon_name(c.vae.reconstruction)},
              {"retrain_epochs", c.retrain_epochs}};
  j["classifier"] = {{"hidden", c.classifier.hidden}, {"epochs", c.classifier.epochs}, {"lr", c.classifier.lr}};
  j["inference"] = {{"target_label", c.inference.target_label},
                    {"beta", c.inference.beta},
                    {"vote_rule", vote_name(c.vote_rule)}};
  const auto& tr = c.trigger;
  j["trigger"] = {{"h", tr.h},
                  {"w", tr.w},
                  {"gamma", tr.gamma},
                  {"center_row", tr.center_row},
                  {"center_col", tr.center_col},
                  {"area_budget", tr.area_budget},
                  {"method", to_string(tr.method)},
                  {"clip", tr.clip_to_range},
                  {"cross", tr.cross}};
  j["poison"] = {{"zeta", c.zeta}};
  j["ablation"] = {{"no_swap", c.ablation.no_swap},
                   {"no_vote", c.ablation.no_vote},
                   {"vae_only_loss", c.ablation.vae_only_loss}};
  j["eval"] = {{"asr_samples", c.asr_samples}};
  return j;
}

ExperimentConfig from_json(const json& root) {
  ExperimentConfig c;
  std::vector<std::string> errors;
  {
    Reader r(&root, "", errors);
    r.get("name", c.name);
    r.get("seed", c.seed);
    r.get("output_dir", c.output_dir);
    {
      auto d = r.child("dataset");
      d.get("kind", c.dataset.kind);
      d.get("train_images", c.dataset.train_images);
      d.get("train_labels", c.dataset.train_labels);
      d.get("test_images", c.dataset.test_images);
      d.get("test_labels", c.dataset.test_labels);
      d.get("train_cap", c.dataset.train_cap);
      d.get("test_cap", c.dataset.test_cap);
      d.get("synthetic_train", c.dataset.synthetic_train);
      d.get("synthetic_test", c.dataset.synthetic_test);
      d.get("classes", c.dataset.classes);
      d.get("channels", c.dataset.channels);
      d.get("height", c.dataset.height);
      d.get("width", c.dataset.width);
      d.get("noise", c.dataset.noise);
    }
    {
      auto p = r.child("partition");
      p.get("kind", c.partition.kind);
      p.get("clients", c.partition.clients);
      p.get("grid_rows", c.partition.grid_rows);
      p.get("grid_cols", c.partition.grid_cols);
    }
    {
      auto m = r.child("models");
      m.get("bottom", c.models.bottom);
      m.get("top_hidden", c.models.top_hidden);
    }
    {
      auto t = r.child("train");
      t.get("epochs", c.train.epochs);
      t.get("rounds", c.train.rounds);
      t.get("batch_size", c.train.batch_size);
      t.get("lr", c.train.lr);
      t.get("lr_decay", c.train.lr_decay);
      std::string opt = c.train.top_optimizer == TopOptimizer::Adam ? "adam" : "sgd";
      t.get("top_optimizer", opt);
      if (opt == "adam") c.train.top_optimizer = TopOptimizer::Adam;
      else if (opt == "sgd") c.train.top_optimizer = TopOptimizer::Sgd;
      else errors.push_back("train.top_optimizer: expected adam or sgd");
      t.get("adam_lr", c.train.top_adam.lr);
      t.get("eval_every", c.train.eval_every);
      t.get("instrument", c.train.instrument);
      t.get("parallel_clients", c.train.parallel_clients);
    }
    {
      auto d = r.child("defense");
      d.get("enabled", c.defense);
      d.get("variance", c.defense_variance);
    }
    {
      auto a = r.child("adversaries");
      a.get("ids", c.adversaries.ids);
      a.get("topology", c.adversaries.topology);
      if (const json* e = a.raw("edges")) {
        try {
          for (const auto& pair : *e) c.adversaries.edges.emplace_back(pair.at(0).get<std::size_t>(), pair.at(1).get<std::size_t>());
        } catch (const json::exception&) {
          errors.push_back("adversaries.edges: expected [[u, v], ...]");
        }
      }
      a.get("extra_edges", c.adversaries.extra_edges);
      a.get("normalized_rho", c.adversaries.normalized_rho);
    }
    {
      auto a = r.child("aux");
      a.get("count", c.aux.count);
      a.get("target_fraction", c.aux.target_fraction);
    }
    {
      auto v = r.child("vae");
      v.get("lambda", c.vae_loss.lambda);
      v.get("lambda_hat", c.vae_loss.lambda_hat);
      v.get("margin", c.vae_loss.margin);
      v.get("latent_dim", c.vae.latent_dim);
      v.get("hidden", c.vae.hidden);
      v.get("steps", c.vae.steps);
      v.get("negatives_per_batch", c.vae.negatives_per_batch);
      v.get("batch_size", c.vae.batch_size);
      v.get("lr", c.vae.lr);
      std::string rec = recon_name(c.vae.reconstruction);
      v.get("reconstruction", rec);
      if (rec == "target") c.vae.reconstruction = ReconstructionSet::Target;
      else if (rec == "auxiliary") c.vae.reconstruction = ReconstructionSet::Auxiliary;
      else errors.push_back("vae.reconstruction: expected target or auxiliary");
      v.get("retrain_epochs", c.retrain_epochs);
    }
    {
      auto k = r.child("classifier");
      k.get("hidden", c.classifier.hidden);
      k.get("epochs", c.classifier.epochs);
      k.get("lr", c.classifier.lr);
    }
    {
      auto i = r.child("inference");
      i.get("target_label", c.inference.target_label);
      i.get("beta", c.inference.beta);
      std::string rule = vote_name(c.vote_rule);
      i.get("vote_rule", rule);
      if (rule == "strict") c.vote_rule = VoteRule::StrictlyAbove;
      else if (rule == "at-least") c.vote_rule = VoteRule::AtLeast;
      else errors.push_back("inference.vote_rule: expected strict or at-least");
    }
    {
      auto t = r.child("trigger");
      t.get("h", c.trigger.h);
      t.get("w", c.trigger.w);
      t.get("gamma", c.trigger.gamma);
      t.get("center_row", c.trigger.center_row);
      t.get("center_col", c.trigger.center_col);
      t.get("area_budget", c.trigger.area_budget);
      std::string method = to_string(c.trigger.method);
      t.get("method", method);
      try {
        c.trigger.method = parse_trigger_method(method);
      } catch (const Error&) {
        errors.push_back("trigger.method: expected collaborative or per-adversary");
      }
      t.get("clip", c.trigger.clip_to_range);
      t.get("cross", c.trigger.cross);
    }
    {
      auto p = r.child("poison");
      p.get("zeta", c.zeta);
    }
    {
      auto a = r.child("ablation");
      a.get("no_swap", c.ablation.no_swap);
      a.get("no_vote", c.ablation.no_vote);
      a.get("vae_only_loss", c.ablation.vae_only_loss);
    }
    {
      auto e = r.child("eval");
      e.get("asr_samples", c.asr_samples);
    }
  }
  c.train.seed = c.seed;
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    fail(ErrorKind::Configuration, msg);
  }
  validate(c);
  return c;
}

void validate(const ExperimentConfig& c) {
  std::vector<std::string> errors;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) errors.push_back(msg);
  };
  const auto& d = c.dataset;
  check(d.kind == "idx" || d.kind == "synthetic", "dataset.kind: expected idx or synthetic");
  if (d.kind == "idx") {
    for (const auto& [field, path] : {std::pair<const char*, const std::string*>{"train_images", &d.train_images},
                                      {"train_labels", &d.train_labels},
                                      {"test_images", &d.test_images},
                                      {"test_labels", &d.test_labels}}) {
      const std::string key = std::string("dataset.") + field;
      if (path->empty())
        errors.push_back(key + ": missing");
      else if (!std::filesystem::exists(*path))
        errors.push_back(key + ": no such file " + *path);
    }
  }
  check(d.classes >= 2, "dataset.classes: need at least two classes");
  check(c.partition.kind == "strips" || c.partition.kind == "grid", "partition.kind: expected strips or grid");
  const std::size_t clients =
      c.partition.kind == "grid" ? c.partition.grid_rows * c.partition.grid_cols : c.partition.clients;
  check(clients >= 2, "partition: need at least two clients");
  for (std::size_t id : c.adversaries.ids)
    check(id < clients, "adversaries.ids: " + std::to_string(id) + " is not a client id");
  std::set<std::size_t> uniq(c.adversaries.ids.begin(), c.adversaries.ids.end());
  check(uniq.size() == c.adversaries.ids.size(), "adversaries.ids: duplicates");
  try {
    parse_topology(c.adversaries.topology);
  } catch (const Error&) {
    errors.push_back("adversaries.topology: unknown topology '" + c.adversaries.topology + "'");
  }
  check(c.train.batch_size >= 1, "train.batch_size: must be positive");
  check(c.train.epochs >= 1 || c.train.rounds >= 1, "train: epochs or rounds must be positive");
  check(c.train.lr > 0, "train.lr: must be positive");
  check(c.defense_variance >= 0, "defense.variance: must be non-negative");
  check(c.vae_loss.lambda > 0 && c.vae_loss.lambda < 1, "vae.lambda: must lie in (0,1)");
  check(c.vae_loss.lambda_hat >= 0, "vae.lambda_hat: must be non-negative");
  check(c.vae_loss.margin > 0, "vae.margin: must be positive");
  check(c.vae.latent_dim >= 1, "vae.latent_dim: must be positive");
  check(c.inference.target_label >= 0 && c.inference.target_label < d.classes,
        "inference.target_label: outside class range");
  check(c.inference.beta >= 0 && c.inference.beta <= 1, "inference.beta: must lie in [0,1]");
  check(c.aux.target_fraction >= 0 && c.aux.target_fraction <= 1, "aux.target_fraction: must lie in [0,1]");
  check(c.zeta >= 0 && c.zeta <= 1, "poison.zeta: must lie in [0,1]");
  check(c.trigger.h * c.trigger.w <= c.trigger.area_budget, "trigger: h*w exceeds area_budget");
  check(c.trigger.gamma >= 0, "trigger.gamma: must be non-negative");
  for (const char* arch : {"models.bottom", "models.top_hidden", "vae.hidden", "classifier.hidden"}) {
    const std::string& text = std::string(arch) == "models.bottom"       ? c.models.bottom
                              : std::string(arch) == "models.top_hidden" ? c.models.top_hidden
                              : std::string(arch) == "vae.hidden"        ? c.vae.hidden
                                                                         : c.classifier.hidden;
    try {
      parse_architecture(text);
    } catch (const Error& e) {
      errors.push_back(std::string(arch) + ": " + e.detail());
    }
  }
  if (!errors.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& e : errors) msg += "\n  " + e;
    fail(ErrorKind::Configuration, msg);
  }
}

ExperimentConfig parse_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Format, path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::string config_hash(const ExperimentConfig& cfg) {
  auto j = to_json(cfg);
  j.erase("output_dir");
  return sha1_hex(j.dump());
}

std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("VFLBD_DATA_DIR")) return env;
  return "data";
}

std::vector<std::string> preset_names() {
  return {"mnist-benign",   "mnist-attack",       "mnist-defense", "mnist-no-swap",
          "mnist-no-vote",  "mnist-vote-method2", "mnist-vae-only", "mnist-method2",
          "fmnist-attack",  "synthetic-benign",   "synthetic-attack"};
}

ExperimentConfig preset(const std::string& name, const std::filesystem::path& data_dir) {
  ExperimentConfig c;
  c.name = name;
  c.output_dir = "runs/" + name;
  auto idx = [&](const std::string& dir) {
    c.dataset.kind = "idx";
    c.dataset.train_images = (data_dir / dir / "train-images-idx3-ubyte.gz").string();
    c.dataset.train_labels = (data_dir / dir / "train-labels-idx1-ubyte.gz").string();
    c.dataset.test_images = (data_dir / dir / "t10k-images-idx3-ubyte.gz").string();
    c.dataset.test_labels = (data_dir / dir / "t10k-labels-idx1-ubyte.gz").string();
  };
  auto attack = [&] {
    c.adversaries.ids = {1, 2, 3};
    c.adversaries.topology = "complete";
    c.train.instrument = true;
  };
  if (name.rfind("mnist", 0) == 0) idx("mnist");
  if (name == "mnist-benign") {
  } else if (name == "mnist-attack") {
    attack();
  } else if (name == "mnist-defense") {
    attack();
    c.defense = true;
  } else if (name == "mnist-no-swap") {
    attack();
    c.ablation.no_swap = true;
  } else if (name == "mnist-no-vote" || name == "mnist-vote-method2") {
    attack();
    c.trigger.method = TriggerMethod::PerAdversary;
    c.trigger.h = 4;
    c.trigger.w = 6;
    c.trigger.area_budget = 24;
    c.ablation.no_vote = name == "mnist-no-vote";
  } else if (name == "mnist-vae-only") {
    attack();
    c.ablation.vae_only_loss = true;
  } else if (name == "mnist-method2") {
    c.partition.clients = 10;
    c.adversaries.ids = {0, 1, 2, 3, 4, 5};
    c.adversaries.topology = "degree-sweep";
    c.train.instrument = true;
    c.trigger.method = TriggerMethod::PerAdversary;
    c.trigger.h = 4;
    c.trigger.w = 9;
    c.trigger.area_budget = 36;
  } else if (name == "fmnist-attack") {
    idx("fashion");
    attack();
    c.vae_loss.margin = 0.25;
    c.trigger.gamma = 30;
    c.vae.latent_dim = 64;
  } else if (name == "synthetic-benign" || name == "synthetic-attack") {
    c.dataset.kind = "synthetic";
    c.train.epochs = 3;
    c.aux.count = 200;
    if (name == "synthetic-attack") attack();
  } else {
    fail(ErrorKind::Configuration, "unknown preset '" + name + "'");
  }
  c.train.seed = c.seed;
  return c;
}

namespace {

struct Data {
  RawDataset train_raw, test_raw;
  VerticalDataset train, test;
};

Data load_data(const ExperimentConfig& c) {
  Data d;
  const auto& ds = c.dataset;
  if (ds.kind == "idx") {
    d.train_raw = take_prefix(load_idx(ds.train_images, ds.train_labels, SplitTag::Train), ds.train_cap);
    d.test_raw = take_prefix(load_idx(ds.test_images, ds.test_labels, SplitTag::Test), ds.test_cap);
  } else {
    SyntheticSpec s;
    s.num_classes = ds.classes;
    s.shape = {ds.channels, ds.height, ds.width};
    s.noise_std = ds.noise;
    s.seed = derive_seed(c.seed, {kTagSynthetic});
    s.count = ds.synthetic_train;
    d.train_raw = make_synthetic(s, SplitTag::Train);
    s.count = ds.synthetic_test;
    d.test_raw = make_synthetic(s, SplitTag::Test);
  }
  const auto& sh = d.train_raw.shape;
  const PartitionScheme scheme =
      c.partition.kind == "grid"
          ? PartitionScheme::grid(sh.height, sh.width, c.partition.grid_rows, c.partition.grid_cols)
          : PartitionScheme::vertical_strips(sh.height, sh.width, c.partition.clients);
  d.train = partition_features(d.train_raw, scheme);
  d.test = partition_features(d.test_raw, scheme);
  return d;
}

AdversaryGraph make_graph(const ExperimentConfig& c) {
  TopologyOptions opt;
  opt.custom_edges = c.adversaries.edges;
  opt.extra_edges = c.adversaries.extra_edges;
  return build_graph(parse_topology(c.adversaries.topology), c.adversaries.ids, derive_seed(c.seed, {kTagGraph}),
                     opt);
}

template <typename F>
auto phase(const char* name, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.kind(), std::string(name) + ": " + e.detail());
  }
}

std::string fmt(std::optional<double> v) {
  if (!v) return "";
  std::ostringstream os;
  os.precision(6);
  os << *v;
  return os.str();
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg_in) {
  ExperimentConfig cfg = cfg_in;
  cfg.train.seed = cfg.seed;
  validate(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const std::filesystem::path out = cfg.output_dir;
  std::filesystem::create_directories(out);

  ExperimentResult res;
  auto& man = res.manifest;
  man.directory = out;
  man.started = utc_timestamp();
  man.config_hash = config_hash(cfg);
  man.run_id = cfg.name + "-" + std::to_string(cfg.seed) + "-" + man.config_hash.substr(0, 8);
  auto& sum = res.summary;

  const Data data = phase("loading", [&] { return load_data(cfg); });
  const int target = cfg.inference.target_label;

  AttackContext attack;
  attack.seed = derive_seed(cfg.seed, {kTagPoison});
  attack.options = {cfg.trigger.gamma, !cfg.ablation.no_swap, cfg.trigger.clip_to_range};
  std::vector<std::size_t> consensus;
  ojson inference_json;

  if (cfg.attacked()) {
    phase("inference", [&] {
      const AdversaryGraph g = make_graph(cfg);
      if (g.size() >= 2) sum.rho = algebraic_connectivity(g, cfg.adversaries.normalized_rho);
      write_edge_list(g, out / "graph.edges");
      const AuxiliaryLabels aux = sample_auxiliary(data.train.server_labels(), cfg.aux.count, cfg.aux.target_fraction,
                                                   target, derive_seed(cfg.seed, {kTagAux}));
      VaeLossConfig loss = cfg.vae_loss;
      if (cfg.ablation.vae_only_loss) loss.lambda_hat = 0.0;
      const auto views = share_features(g, data.train);
      std::map<std::size_t, InferenceResult> local;
      for (const auto& [m, view] : views) {
        const auto vae = train_adversary_vae(view.features, aux, loss, cfg.vae, derive_seed(cfg.seed, {kTagVae, m}));
        const auto clf = train_aux_classifier(vae.vae, view.features, aux, data.train.num_classes(), cfg.classifier,
                                              derive_seed(cfg.seed, {kTagClassifier, m}));
        local[m] = infer_local(vae.vae, clf, view.features, aux, cfg.inference, m);
        inference_json["local"][std::to_string(m)] = local[m].indices.size();
      }
      const auto& labels = data.train.server_labels();
      std::map<std::size_t, std::vector<std::size_t>> own;
      if (cfg.ablation.no_vote) {
        std::set<std::size_t> uni;
        double prec = 0;
        std::size_t counted = 0;
        for (const auto& [m, r] : local) {
          own[m] = r.indices;
          uni.insert(r.indices.begin(), r.indices.end());
          if (auto p = label_inference_accuracy(r.indices, labels, target)) {
            prec += *p;
            ++counted;
          }
        }
        consensus.assign(uni.begin(), uni.end());
        if (counted) sum.label_precision = prec / double(counted);
      } else {
        const auto outcome = collaborative_inference(local, g, cfg.vote_rule);
        consensus = outcome.global;
        own = outcome.per_adversary;
        inference_json["leader"] = outcome.leader;
        sum.label_precision = label_inference_accuracy(consensus, labels, target);
      }
      sum.label_recall = label_inference_recall(consensus, labels, target);
      sum.consensus_size = consensus.size();
      inference_json["consensus"] = consensus;
      if (sum.label_precision) inference_json["precision"] = *sum.label_precision;
      if (sum.label_recall) inference_json["recall"] = *sum.label_recall;

      if (cfg.ablation.no_vote) {
        attack.plan = select_poison_set({}, cfg.zeta, data.train.size(), attack.seed);
        std::set<std::size_t> all;
        for (const auto& [m, set] : own) {
          auto p = select_poison_set(set, cfg.zeta, data.train.size(), derive_seed(attack.seed, {m}));
          attack.plan.per_adversary[m] = p.indices;
          all.insert(p.indices.begin(), p.indices.end());
        }
        attack.plan.indices.assign(all.begin(), all.end());
        attack.plan.disabled = all.empty();
      } else {
        attack.plan = select_poison_set(consensus, cfg.zeta, data.train.size(), attack.seed, g.ids());
      }
      sum.poisoned = attack.plan.indices.size();
      inference_json["poisoned"] = attack.plan.indices;
      inference_json["shortfall"] = attack.plan.shortfall;

      if (!cfg.ablation.no_swap) {
        for (std::size_t m : g.ids()) {
          const auto& set = own[m];
          if (set.empty()) continue;
          const Matrix<float> slices = materialize_slices(data.train, m, set);
          const auto source = train_adversary_vae(views.at(m).features, aux, loss, cfg.vae,
                                                  derive_seed(cfg.seed, {kTagVae, m}));
          auto retrained = retrain_local_vae(source.vae, slices, data.train.slice_shape(m), loss, cfg.vae,
                                             cfg.retrain_epochs, derive_seed(cfg.seed, {kTagVae, m, 1}));
          attack.generators.emplace(m, std::move(retrained.vae));
        }
      }
      attack.shares = cfg.trigger.method == TriggerMethod::Collaborative
                          ? build_trigger_method1(cfg.trigger, data.train.scheme(), g.ids())
                          : build_trigger_method2(cfg.trigger, data.train.scheme(), g.ids());
      std::filesystem::create_directories(out / "shares");
      for (const auto& [m, s] : attack.shares) {
        const std::string rel = "shares/adversary_" + std::to_string(m) + ".pgm";
        write_share_pgm(s, out / rel);
      }
      return 0;
    });
  }

  SplitState state = init_split_state(data.train, cfg.models, cfg.seed);
  if (cfg.attacked()) state.attack = &attack;
  TrainConfig tc = cfg.train;
  if (cfg.defense) tc.defense = NoiseDefenseConfig{cfg.defense_variance, derive_seed(cfg.seed, {kTagNoise})};

  std::ofstream metrics_os(out / "metrics.jsonl");
  require(static_cast<bool>(metrics_os), ErrorKind::Io, "cannot create metrics.jsonl");
  std::size_t last_trace = 0;
  const std::vector<RoundTrace>* traces = nullptr;
  TrainResult tr;
  std::vector<double> all_delta;

  auto evaluate = [&](std::size_t round, std::size_t epoch) {
    phase("evaluation", [&] {
      MetricsRecord r;
      r.run_id = man.run_id;
      r.config_hash = man.config_hash;
      r.round = round;
      r.epoch = epoch;
      r.cda = clean_data_accuracy(state, data.test);
      r.rho = sum.rho;
      if (cfg.attacked()) {
        r.asr = attack_success_rate(state, data.test_raw, attack.shares, cfg.trigger.gamma, cfg.trigger.clip_to_range,
                                    target, cfg.asr_samples, derive_seed(cfg.seed, {kTagEval}));
        r.label_inf_accuracy = sum.label_precision;
        if (attack.active() && !consensus.empty()) {
          const std::size_t cap = 128;
          std::vector<std::size_t> pois(attack.plan.indices.begin(),
                                        attack.plan.indices.begin() + std::ptrdiff_t(std::min(cap, attack.plan.indices.size())));
          std::vector<std::size_t> tgt(consensus.begin(), consensus.begin() + std::ptrdiff_t(std::min(cap, consensus.size())));
          const auto pb = client_batches(state, pois, true);
          const auto cb = client_batches(state, tgt, false);
          Matrix<float> hp(pois.size(), 0), ht(tgt.size(), 0);
          std::vector<Matrix<float>> ep, et;
          std::size_t width = 0;
          for (const auto& [m, s] : attack.shares) {
            ep.push_back(forward_bottom(state.bottoms[m], pb[m]).values);
            et.push_back(forward_bottom(state.bottoms[m], cb[m]).values);
            width += ep.back().cols();
          }
          hp = Matrix<float>(pois.size(), width);
          ht = Matrix<float>(tgt.size(), width);
          std::size_t off = 0;
          for (std::size_t k = 0; k < ep.size(); ++k) {
            for (std::size_t i = 0; i < hp.rows(); ++i)
              std::copy(ep[k].row(i).begin(), ep[k].row(i).end(), hp.row(i).begin() + std::ptrdiff_t(off));
            for (std::size_t i = 0; i < ht.rows(); ++i)
              std::copy(et[k].row(i).begin(), et[k].row(i).end(), ht.row(i).begin() + std::ptrdiff_t(off));
            off += ep[k].cols();
          }
          r.proximity = embedding_proximity(hp, ht);
        }
      }
      if (traces && tc.instrument) {
        double s = 0;
        std::size_t n = 0;
        for (std::size_t i = last_trace; i < traces->size(); ++i)
          if ((*traces)[i].delta) {
            s += *(*traces)[i].delta;
            ++n;
          }
        if (n) r.delta = s / double(n);
      }
      metrics_os << record_to_json(r) << '\n';
      sum.records.push_back(r);
      return 0;
    });
  };

  // train() reports evaluations after each round's trace is stored, so the
  // callback reads the live trace vector through `traces`.
  std::vector<RoundTrace> live;
  traces = &live;
  {
    const std::size_t n = data.train.size();
    const std::size_t total = tc.total_rounds(n), rpe = rounds_per_epoch(n, tc.batch_size);
    const std::size_t every = tc.eval_every ? tc.eval_every : rpe;
    std::ofstream trace_os(out / "traces.jsonl");
    phase("training", [&] {
      tc.validate();
      for (std::size_t t = 0; t < total; ++t) {
        live.push_back(run_round(state, tc, t));
        if (live.back().delta) all_delta.push_back(*live.back().delta);
        trace_os << trace_to_json(live.back()) << '\n';
        if ((t + 1) % every == 0 || t + 1 == total) {
          evaluate(t + 1, (t + rpe) / rpe);
          last_trace = live.size();
        }
        live.back().benign_grad.reset();
        live.back().attacked_grad.reset();
      }
      return 0;
    });
  }
  metrics_os.close();

  if (!sum.records.empty()) {
    sum.cda = sum.records.back().cda;
    sum.asr = sum.records.back().asr;
  }
  if (!all_delta.empty())
    sum.mean_delta = std::accumulate(all_delta.begin(), all_delta.end(), 0.0) / double(all_delta.size());

  write_text(out / "config.json", to_json(cfg).dump(2) + "\n");
  if (cfg.attacked()) write_text(out / "inference.json", inference_json.dump() + "\n");
  {
    std::ostringstream csv;
    csv << "run_id,seed,cda,asr,label_precision,label_recall,consensus_size,poisoned,mean_delta,rho\n";
    csv << man.run_id << ',' << cfg.seed << ',' << fmt(sum.cda) << ',' << fmt(sum.asr) << ','
        << fmt(sum.label_precision) << ',' << fmt(sum.label_recall) << ',' << sum.consensus_size << ','
        << sum.poisoned << ',' << fmt(sum.mean_delta) << ',' << fmt(sum.rho) << '\n';
    write_text(out / "summary.csv", csv.str());
  }
  {
    PlotSeries cda{"CDA", {}, {}}, asr{"ASR", {}, {}};
    for (const auto& r : sum.records) {
      cda.x.push_back(double(r.round));
      cda.y.push_back(r.cda);
      if (r.asr) {
        asr.x.push_back(double(r.round));
        asr.y.push_back(*r.asr);
      }
    }
    std::vector<PlotSeries> series{cda};
    if (!asr.x.empty()) series.push_back(asr);
    write_line_plot(out / "metrics.svg", cfg.name, "round", "rate", series);
  }

  for (const char* f : {"config.json", "metrics.jsonl", "traces.jsonl", "summary.csv", "metrics.svg"}) man.add(f);
  if (cfg.attacked()) {
    man.add("inference.json");
    man.add("graph.edges");
    for (const auto& [m, s] : attack.shares) man.add("shares/adversary_" + std::to_string(m) + ".pgm");
  }
  man.finished = utc_timestamp();
  man.runtime_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  man.write(out / "manifest.json");
  return res;
}

SweepAxis parse_sweep_axis(const std::string& name) {
  if (name == "gamma") return SweepAxis::Gamma;
  if (name == "adversary-count") return SweepAxis::AdversaryCount;
  if (name == "connectivity") return SweepAxis::Connectivity;
  if (name == "margin") return SweepAxis::Margin;
  if (name == "latent-dim") return SweepAxis::LatentDim;
  if (name == "beta") return SweepAxis::Beta;
  if (name == "seed") return SweepAxis::Seed;
  fail(ErrorKind::Configuration, "unknown sweep axis '" + name + "'");
}

std::string to_string(SweepAxis a) {
  switch (a) {
    case SweepAxis::Gamma: return "gamma";
    case SweepAxis::AdversaryCount: return "adversary-count";
    case SweepAxis::Connectivity: return "connectivity";
    case SweepAxis::Margin: return "margin";
    case SweepAxis::LatentDim: return "latent-dim";
    case SweepAxis::Beta: return "beta";
    case SweepAxis::Seed: return "seed";
  }
  return "?";
}

ExperimentConfig apply_axis(ExperimentConfig cfg, SweepAxis axis, double value) {
  switch (axis) {
    case SweepAxis::Gamma: cfg.trigger.gamma = value; break;
    case SweepAxis::AdversaryCount: {
      const auto count = static_cast<std::size_t>(value);
      cfg.adversaries.ids.resize(count);
      std::iota(cfg.adversaries.ids.begin(), cfg.adversaries.ids.end(), std::size_t{0});
      break;
    }
    case SweepAxis::Connectivity:
      cfg.adversaries.topology = "degree-sweep";
      cfg.adversaries.extra_edges = static_cast<std::size_t>(value);
      break;
    case SweepAxis::Margin: cfg.vae_loss.margin = value; break;
    case SweepAxis::LatentDim: cfg.vae.latent_dim = static_cast<std::size_t>(value); break;
    case SweepAxis::Beta: cfg.inference.beta = value; break;
    case SweepAxis::Seed: cfg.seed = static_cast<std::uint64_t>(value); break;
  }
  cfg.train.seed = cfg.seed;
  return cfg;
}

std::vector<SweepPoint> run_sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<double>& values,
                                  std::size_t seeds) {
  std::vector<SweepPoint> points;
  const std::filesystem::path root = base.output_dir;
  std::filesystem::create_directories(root);
  std::ostringstream csv;
  csv << "axis,value,seed,status,cda,asr,label_precision,mean_delta,rho\n";
  for (double v : values)
    for (std::size_t s = 0; s < std::max<std::size_t>(seeds, 1); ++s) {
      SweepPoint p;
      p.value = v;
      ExperimentConfig cfg = apply_axis(base, axis, v);
      cfg.seed = base.seed + s;
      cfg.train.seed = cfg.seed;
      p.seed = cfg.seed;
      std::ostringstream dir;
      dir << to_string(axis) << "_" << v << "_seed" << cfg.seed;
      cfg.output_dir = (root / dir.str()).string();
      cfg.name = base.name + "-" + dir.str();
      try {
        p.result = run_experiment(cfg);
      } catch (const std::exception& e) {
        p.error = e.what();
      }
      csv << to_string(axis) << ',' << v << ',' << cfg.seed << ',' << (p.result ? "ok" : "error");
      if (p.result) {
        const auto& r = p.result->summary;
        csv << ',' << fmt(r.cda) << ',' << fmt(r.asr) << ',' << fmt(r.label_precision) << ',' << fmt(r.mean_delta)
            << ',' << fmt(r.rho);
      } else {
        csv << ",,,,,";
      }
      csv << '\n';
      points.push_back(std::move(p));
    }
  write_text(root / "sweep.csv", csv.str());

  std::map<std::string, PlotSeries> series;
  for (const char* name : {"CDA", "ASR"}) series[name] = {name, {}, {}};
  for (double v : values) {
    double cda = 0, asr = 0;
    std::size_t n = 0, na = 0;
    for (const auto& p : points)
      if (p.value == v && p.result) {
        cda += p.result->summary.cda;
        ++n;
        if (p.result->summary.asr) {
          asr += *p.result->summary.asr;
          ++na;
        }
      }
    if (n) {
      series["CDA"].x.push_back(v);
      series["CDA"].y.push_back(cda / double(n));
    }
    if (na) {
      series["ASR"].x.push_back(v);
      series["ASR"].y.push_back(asr / double(na));
    }
  }
  std::vector<PlotSeries> list;
  for (auto& [k, s] : series)
    if (!s.x.empty()) list.push_back(s);
  write_line_plot(root / "sweep.svg", base.name + " sweep", to_string(axis), "rate", list);
  return points;
}

}  // namespace vflbd

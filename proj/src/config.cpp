#include "xgram/config.hpp"

#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <toml.hpp>

#include "xgram/error.hpp"
#include "xgram/io.hpp"

namespace xgram::config {

namespace {

using nlohmann::json;

// Typed access to one TOML table that remembers which keys were consumed.
class Section {
 public:
  Section(const toml::table* table, std::string path) : table_(table), path_(std::move(path)) {}

  bool present() const { return table_ != nullptr; }

  template <class T>
  void get(const char* key, T& out) {
    if (!table_) return;
    const toml::node* node = table_->get(key);
    if (!node) return;
    used_.insert(key);
    const std::string where = qualify(key);
    if constexpr (std::is_same_v<T, bool>) {
      const auto v = node->value<bool>();
      if (!node->is_boolean() || !v) throw ValidationError(where + ": expected a boolean");
      out = *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!node->is_string()) throw ValidationError(where + ": expected a string");
      out = *node->value<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!node->is_number()) throw ValidationError(where + ": expected a number");
      out = *node->value<double>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!node->is_integer()) throw ValidationError(where + ": expected an integer");
      const auto v = *node->value<std::int64_t>();
      if (v < 0) throw ValidationError(where + ": must be non-negative");
      out = static_cast<T>(v);
    } else if constexpr (std::is_same_v<T, std::vector<double>>) {
      const auto* arr = node->as_array();
      if (!arr) throw ValidationError(where + ": expected an array of numbers");
      out.clear();
      for (const auto& e : *arr) {
        if (!e.is_number()) throw ValidationError(where + ": expected an array of numbers");
        out.push_back(*e.value<double>());
      }
    } else {
      static_assert(sizeof(T) == 0, "unsupported config value type");
    }
  }

  Section sub(const char* key) {
    if (!table_) return {nullptr, qualify(key)};
    const toml::node* node = table_->get(key);
    if (!node) return {nullptr, qualify(key)};
    used_.insert(key);
    if (!node->is_table()) throw ValidationError(qualify(key) + ": expected a table");
    return {node->as_table(), qualify(key)};
  }

  const toml::array* array(const char* key) {
    if (!table_) return nullptr;
    const toml::node* node = table_->get(key);
    if (!node) return nullptr;
    used_.insert(key);
    if (!node->is_array()) throw ValidationError(qualify(key) + ": expected an array");
    return node->as_array();
  }

  // Rejects keys nobody asked for.
  void finish() const {
    if (!table_) return;
    for (const auto& [k, v] : *table_)
      if (!used_.count(std::string(k.str())))
        throw ValidationError("unknown config key '" + qualify(std::string(k.str())) + "'");
  }

  std::string qualify(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const toml::table* table_;
  std::string path_;
  std::set<std::string> used_;
};

toml::table parse_toml(const std::string& text) {
  try {
    return toml::parse(text);
  } catch (const toml::parse_error& e) {
    std::ostringstream os;
    os << "config: " << e.description() << " at line " << e.source().begin.line;
    throw ValidationError(os.str());
  }
}

void read_routing(Section s, routing::RoutingConfig& r) {
  s.get("k_vip", r.k_vip);
  s.get("num_buckets", r.num_buckets);
  s.get("rho", r.rho);
  s.get("hash_paths", r.hash_paths);
  s.get("alpha", r.alpha);
  s.get("max_extra_paths", r.max_extra_paths);
  s.get("decay", r.decay);
  s.get("plan_seed", r.plan_seed);
  s.finish();
}

injection::ViewSpec read_view(Section s, double lambda_init) {
  injection::ViewSpec v;
  v.lambda_init = lambda_init;
  std::string site = "v";
  s.get("site", site);
  v.site = injection::parse_site(site);
  s.get("k", v.kernel_size);
  s.get("extract", v.extract);
  s.get("enabled", v.enabled);
  s.get("rho", v.rho);
  s.get("lambda", v.lambda_init);
  s.finish();
  return v;
}

json routing_json(const routing::RoutingConfig& r) {
  return {{"k_vip", r.k_vip},         {"num_buckets", r.num_buckets},
          {"rho", r.rho},             {"hash_paths", r.hash_paths},
          {"alpha", r.alpha},         {"max_extra_paths", r.max_extra_paths},
          {"decay", r.decay},         {"plan_seed", r.plan_seed}};
}

routing::RoutingConfig routing_from(const json& j) {
  routing::RoutingConfig r;
  r.k_vip = j.at("k_vip");
  r.num_buckets = j.at("num_buckets");
  r.rho = j.at("rho");
  r.hash_paths = j.at("hash_paths");
  r.alpha = j.at("alpha");
  r.max_extra_paths = j.at("max_extra_paths");
  r.decay = j.at("decay");
  r.plan_seed = j.at("plan_seed");
  return r;
}

json data_json(const DataConfig& d) {
  return {{"source", d.source},
          {"zipf_exponent", d.zipf_exponent},
          {"noise", d.noise},
          {"lag_weights", d.lag_weights},
          {"seed", d.seed},
          {"path", d.path},
          {"ids_format", d.ids_format == stats::IdsFormat::kBinary ? "bin" : "txt"},
          {"validation_fraction", d.validation_fraction}};
}

}  // namespace

injection::InjectionConfig expand_injection(const std::string& preset, std::size_t layers,
                                            double lambda_init) {
  auto cfg = injection::preset(preset, layers);
  for (auto& l : cfg.layers)
    for (auto& v : l) v.lambda_init = lambda_init;
  return cfg;
}

void RunConfig::validate() const {
  backbone.validate();
  routing.validate();
  optimizer.validate();
  train.validate();
  if (backbone.vocab_size < 2) throw ValidationError("vocabulary needs at least two tokens");
  if (injection.layers.size() != backbone.layers)
    throw ValidationError("injection lists " + std::to_string(injection.layers.size()) +
                          " layers but the backbone has " + std::to_string(backbone.layers));
  for (std::size_t l = 0; l < injection.layers.size(); ++l)
    for (const auto& v : injection.layers[l]) {
      if (v.extract && v.kernel_size == 0)
        throw ValidationError("layer " + std::to_string(l) + ": kernel size must be at least 1");
      if (v.rho > 0.0 && std::abs(v.rho - routing.rho) > 1e-12)
        throw ValidationError("layer " + std::to_string(l) + ": view rho " + std::to_string(v.rho) +
                              " differs from routing rho " + std::to_string(routing.rho));
    }
  if (data.source != "markov" && data.source != "zipf" && data.source != "ids")
    throw ValidationError("data.source must be markov, zipf or ids");
  if (data.source == "ids" && data.path.empty()) throw ValidationError("data.path is required for ids");
  if (stats_tokens == 0) throw ValidationError("run.stats_tokens must be positive");
  if (diagnose_batches == 0) throw ValidationError("run.diagnose_batches must be positive");
  if (routing.k_vip >= backbone.vocab_size)
    throw ValidationError("routing.k_vip must be smaller than the vocabulary");
}

RunConfig parse_run_config(const std::string& text) {
  const auto doc = parse_toml(text);
  Section root(&doc, "");
  RunConfig c;

  Section run = root.sub("run");
  run.get("name", c.name);
  run.get("seed", c.train.seed);
  run.get("steps", c.train.steps);
  run.get("batch", c.train.batch);
  run.get("eval_every", c.train.eval_every);
  run.get("eval_batches", c.train.eval_batches);
  run.get("record_hits", c.train.record_hits);
  run.get("stats_tokens", c.stats_tokens);
  run.get("diagnose_batches", c.diagnose_batches);
  run.finish();

  Section bb = root.sub("backbone");
  bb.get("preset", c.backbone_preset);
  c.backbone = model::BackboneConfig::preset(c.backbone_preset);
  bb.get("layers", c.backbone.layers);
  bb.get("width", c.backbone.width);
  bb.get("ffn_width", c.backbone.ffn_width);
  bb.get("heads", c.backbone.heads);
  bb.get("kv_heads", c.backbone.kv_heads);
  bb.get("seq_len", c.backbone.seq_len);
  bb.get("vocab_size", c.backbone.vocab_size);
  bb.finish();

  read_routing(root.sub("routing"), c.routing);

  Section inj = root.sub("injection");
  inj.get("preset", c.injection_preset);
  inj.get("lambda_init", c.lambda_init);
  if (const auto* layers = inj.array("layers")) {
    if (layers->size() != c.backbone.layers)
      throw ValidationError("injection.layers must list one entry per backbone layer");
    c.injection_preset.clear();
    c.injection.layers.clear();
    std::size_t i = 0;
    for (const auto& node : *layers) {
      const std::string path = "injection.layers[" + std::to_string(i++) + "]";
      if (!node.is_table()) throw ValidationError(path + ": expected a table");
      Section layer(node.as_table(), path);
      std::vector<injection::ViewSpec> views;
      if (const auto* arr = layer.array("views")) {
        std::size_t m = 0;
        for (const auto& v : *arr) {
          const std::string vpath = path + ".views[" + std::to_string(m++) + "]";
          if (!v.is_table()) throw ValidationError(vpath + ": expected a table");
          views.push_back(read_view(Section(v.as_table(), vpath), c.lambda_init));
        }
      }
      layer.finish();
      c.injection.layers.push_back(std::move(views));
    }
  } else {
    c.injection = expand_injection(c.injection_preset, c.backbone.layers, c.lambda_init);
  }
  inj.finish();

  Section opt = root.sub("optimizer");
  auto& o = c.optimizer;
  opt.get("base_lr", o.base_lr);
  opt.get("beta1", o.beta1);
  opt.get("beta2", o.beta2);
  opt.get("eps", o.eps);
  opt.get("weight_decay", o.weight_decay);
  opt.get("grad_clip", o.grad_clip);
  opt.get("warmup_fraction", o.warmup_fraction);
  opt.get("min_lr_ratio", o.min_lr_ratio);
  opt.get("lookup_lr_cap", o.lookup_lr_cap);
  opt.get("lookup_ref_rows", o.lookup_ref_rows);
  opt.get("vip_lr_scale", o.vip_lr_scale);
  opt.get("body_lr_scale", o.body_lr_scale);
  opt.finish();

  Section data = root.sub("data");
  auto& d = c.data;
  data.get("source", d.source);
  data.get("zipf_exponent", d.zipf_exponent);
  data.get("noise", d.noise);
  data.get("lag_weights", d.lag_weights);
  data.get("seed", d.seed);
  data.get("path", d.path);
  std::string fmt = d.ids_format == stats::IdsFormat::kBinary ? "bin" : "txt";
  data.get("ids_format", fmt);
  d.ids_format = stats::parse_ids_format(fmt);
  data.get("validation_fraction", d.validation_fraction);
  data.finish();

  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  return parse_run_config(io::read_text(path));
}

routing::RoutingConfig parse_routing_config(const std::string& text) {
  const auto doc = parse_toml(text);
  routing::RoutingConfig r;
  if (doc.contains("routing")) {
    Section root(&doc, "");
    read_routing(root.sub("routing"), r);
    root.finish();
  } else {
    read_routing(Section(&doc, ""), r);
  }
  r.validate();
  return r;
}

routing::RoutingConfig load_routing_config(const std::filesystem::path& path) {
  return parse_routing_config(io::read_text(path));
}

std::string routing_to_json(const routing::RoutingConfig& cfg) { return routing_json(cfg).dump(); }

std::string data_to_json(const DataConfig& cfg, std::size_t vocab_size, std::size_t stats_tokens) {
  json j = data_json(cfg);
  j["vocab_size"] = vocab_size;
  j["stats_tokens"] = stats_tokens;
  return j.dump();
}

std::string to_json(const RunConfig& c) {
  json layers = json::array();
  for (const auto& l : c.injection.layers) {
    json views = json::array();
    for (const auto& v : l)
      views.push_back({{"site", injection::site_name(v.site)},
                       {"k", v.kernel_size},
                       {"extract", v.extract},
                       {"enabled", v.enabled},
                       {"lambda", v.lambda_init},
                       {"rho", v.rho}});
    layers.push_back(std::move(views));
  }
  const auto& b = c.backbone;
  const auto& o = c.optimizer;
  const auto& t = c.train;
  json j = {
      {"name", c.name},
      {"backbone",
       {{"preset", c.backbone_preset},
        {"layers", b.layers},
        {"width", b.width},
        {"ffn_width", b.ffn_width},
        {"heads", b.heads},
        {"kv_heads", b.kv_heads},
        {"seq_len", b.seq_len},
        {"vocab_size", b.vocab_size}}},
      {"routing", routing_json(c.routing)},
      {"injection", {{"preset", c.injection_preset}, {"lambda_init", c.lambda_init}, {"layers", layers}}},
      {"optimizer",
       {{"base_lr", o.base_lr},
        {"beta1", o.beta1},
        {"beta2", o.beta2},
        {"eps", o.eps},
        {"weight_decay", o.weight_decay},
        {"grad_clip", o.grad_clip},
        {"warmup_fraction", o.warmup_fraction},
        {"min_lr_ratio", o.min_lr_ratio},
        {"lookup_lr_cap", o.lookup_lr_cap},
        {"lookup_ref_rows", o.lookup_ref_rows},
        {"vip_lr_scale", o.vip_lr_scale},
        {"body_lr_scale", o.body_lr_scale}}},
      {"train",
       {{"steps", t.steps},
        {"batch", t.batch},
        {"seed", t.seed},
        {"eval_every", t.eval_every},
        {"eval_batches", t.eval_batches},
        {"record_hits", t.record_hits}}},
      {"data", data_json(c.data)},
      {"stats_tokens", c.stats_tokens},
      {"diagnose_batches", c.diagnose_batches}};
  return j.dump();
}

RunConfig from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    RunConfig c;
    c.name = j.at("name");
    const auto& b = j.at("backbone");
    c.backbone_preset = b.at("preset");
    c.backbone.layers = b.at("layers");
    c.backbone.width = b.at("width");
    c.backbone.ffn_width = b.at("ffn_width");
    c.backbone.heads = b.at("heads");
    c.backbone.kv_heads = b.at("kv_heads");
    c.backbone.seq_len = b.at("seq_len");
    c.backbone.vocab_size = b.at("vocab_size");
    c.routing = routing_from(j.at("routing"));
    const auto& inj = j.at("injection");
    c.injection_preset = inj.at("preset");
    c.lambda_init = inj.at("lambda_init");
    c.injection.layers.clear();
    for (const auto& l : inj.at("layers")) {
      std::vector<injection::ViewSpec> views;
      for (const auto& v : l) {
        injection::ViewSpec s;
        s.site = injection::parse_site(v.at("site"));
        s.kernel_size = v.at("k");
        s.extract = v.at("extract");
        s.enabled = v.at("enabled");
        s.lambda_init = v.at("lambda");
        s.rho = v.at("rho");
        views.push_back(s);
      }
      c.injection.layers.push_back(std::move(views));
    }
    const auto& o = j.at("optimizer");
    auto& oc = c.optimizer;
    oc.base_lr = o.at("base_lr");
    oc.beta1 = o.at("beta1");
    oc.beta2 = o.at("beta2");
    oc.eps = o.at("eps");
    oc.weight_decay = o.at("weight_decay");
    oc.grad_clip = o.at("grad_clip");
    oc.warmup_fraction = o.at("warmup_fraction");
    oc.min_lr_ratio = o.at("min_lr_ratio");
    oc.lookup_lr_cap = o.at("lookup_lr_cap");
    oc.lookup_ref_rows = o.at("lookup_ref_rows");
    oc.vip_lr_scale = o.at("vip_lr_scale");
    oc.body_lr_scale = o.at("body_lr_scale");
    const auto& t = j.at("train");
    c.train.steps = t.at("steps");
    c.train.batch = t.at("batch");
    c.train.seed = t.at("seed");
    c.train.eval_every = t.at("eval_every");
    c.train.eval_batches = t.at("eval_batches");
    c.train.record_hits = t.at("record_hits");
    const auto& d = j.at("data");
    c.data.source = d.at("source");
    c.data.zipf_exponent = d.at("zipf_exponent");
    c.data.noise = d.at("noise");
    c.data.lag_weights = d.at("lag_weights").get<std::vector<double>>();
    c.data.seed = d.at("seed");
    c.data.path = d.at("path");
    c.data.ids_format = stats::parse_ids_format(d.at("ids_format"));
    c.data.validation_fraction = d.at("validation_fraction");
    c.stats_tokens = j.at("stats_tokens");
    c.diagnose_batches = j.at("diagnose_batches");
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw FormatError(std::string("run config json: ") + e.what());
  }
}

std::unique_ptr<data::Source> make_source(const DataConfig& cfg, std::size_t vocab_size) {
  if (cfg.source == "markov") {
    data::MarkovConfig m;
    m.vocab_size = vocab_size;
    m.zipf_exponent = cfg.zipf_exponent;
    m.noise = cfg.noise;
    m.lag_weights = cfg.lag_weights;
    m.seed = cfg.seed;
    return std::make_unique<data::MarkovSource>(std::move(m));
  }
  if (cfg.source == "zipf")
    return std::make_unique<data::ZipfSource>(vocab_size, cfg.zipf_exponent, cfg.seed);
  if (cfg.source == "ids")
    return std::make_unique<data::StreamSource>(stats::read_token_ids(cfg.path, cfg.ids_format),
                                                vocab_size, cfg.seed, cfg.validation_fraction);
  throw ValidationError("unknown data source '" + cfg.source + "'");
}

}  // namespace xgram::config

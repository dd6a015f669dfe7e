#include "fsf/config.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <sstream>

namespace fsf {

using nlohmann::json;

namespace {

const std::pair<Method, const char*> kMethods[] = {
    {Method::TeacherCfm, "teacher-cfm"}, {Method::Ct, "ct"},     {Method::Cd, "cd"},
    {Method::FsfDmd, "fsf-dmd"},         {Method::Dmd2, "dmd2"}, {Method::FsfScratch, "fsf-scratch"},
};

const std::pair<WeightMode, const char*> kWeightModes[] = {
    {WeightMode::Constant, "constant"},
    {WeightMode::Adaptive, "adaptive"},
    {WeightMode::Cosine, "cosine"},
    {WeightMode::AdaptiveCosine, "adaptive-cosine"},
};

const std::pair<SimulationMode, const char*> kSimModes[] = {
    {SimulationMode::FlowMap, "flowmap"},
    {SimulationMode::Dmd2, "dmd2"},
    {SimulationMode::None, "none"},
};

template <typename E, std::size_t N>
const char* enum_name(const std::pair<E, const char*> (&table)[N], E value) {
  for (const auto& [e, name] : table) {
    if (e == value) return name;
  }
  throw std::logic_error("unnamed enum value");
}

template <typename E, std::size_t N>
E enum_value(const std::pair<E, const char*> (&table)[N], const std::string& name, const char* what) {
  for (const auto& [e, n] : table) {
    if (name == n) return e;
  }
  std::string choices;
  for (const auto& [e, n] : table) choices += std::string(choices.empty() ? "" : ", ") + n;
  throw ConfigError(std::string("unknown ") + what + " '" + name + "' (expected one of: " + choices + ")");
}

bool is_free_form(const std::string& path) { return path == "dataset.overrides"; }

std::string join(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

void check_type(const json& schema, const json& value, const std::string& path) {
  auto fail = [&](const char* expected) {
    throw ConfigError("config key '" + path + "': expected " + expected + ", got " + value.dump());
  };
  if (schema.is_number_unsigned()) {
    if (!value.is_number_unsigned()) fail("a non-negative integer");
  } else if (schema.is_number_integer()) {
    if (!value.is_number_integer()) fail("an integer");
  } else if (schema.is_number_float()) {
    if (!value.is_number()) fail("a number");
  } else if (schema.is_boolean()) {
    if (!value.is_boolean()) fail("a boolean");
  } else if (schema.is_string()) {
    if (!value.is_string()) fail("a string");
  } else if (schema.is_array()) {
    if (!value.is_array()) fail("an array");
    for (const auto& e : value) {
      if (!e.is_number_integer()) fail("an array of integers");
    }
  } else if (schema.is_object()) {
    if (!value.is_object()) fail("an object");
  }
}

void strict_merge(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError("config section '" + prefix + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const auto path = join(prefix, key);
    if (!base.contains(key)) throw ConfigError("unknown config key '" + path + "'");
    json& slot = base[key];
    check_type(slot, value, path);
    if (slot.is_object() && !is_free_form(path)) {
      strict_merge(slot, value, path);
    } else if (slot.is_number_float()) {
      slot = value.get<double>();
    } else {
      slot = value;
    }
  }
}

}  // namespace

std::string to_string(Method m) { return enum_name(kMethods, m); }
Method method_from_string(const std::string& name) { return enum_value(kMethods, name, "method"); }

ExperimentConfig ExperimentConfig::defaults_for(Method method) {
  ExperimentConfig c;
  c.method = method;
  if (method == Method::FsfScratch || method == Method::Ct) {
    c.fsf.lambda = method == Method::Ct ? 0.0 : 0.01;
    c.fsf.weight_mode = WeightMode::Cosine;
    c.fsf.gamma_shift = 1.0;
    c.fsf.sim_steps = 1;
    c.fsf.use_ema_fake_side = false;
  }
  if (method == Method::Cd) c.fsf.lambda = 0.0;
  return c;
}

GaussianMixtureSpec ExperimentConfig::dataset() const {
  try {
    return make_preset(preset, dataset_overrides);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("dataset overrides: ") + e.what());
  }
}

void ExperimentConfig::validate() const {
  auto require = [](bool ok, const char* msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(steps >= 1, "steps must be >= 1");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(learning_rate >= 0 && fake_learning_rate >= 0, "learning rates must be >= 0");
  require(ema_decay >= 0 && ema_decay <= 1, "ema_decay must lie in [0, 1]");
  require(label_dropout >= 0 && label_dropout <= 1, "label_dropout must lie in [0, 1]");
  require(log_every >= 1, "log_every must be >= 1");
  require(!output_dir.empty(), "output_dir must not be empty");
  require(!model.hidden.empty(), "model.hidden must not be empty");
  require(consistency.jvp_eps > 0, "consistency.jvp_eps must be positive");
  require(distill.lambda_warmup_steps >= 0, "fsf.lambda_warmup_steps must be >= 0");
  require(eval.samples >= 0 && eval.steps >= 1 && eval.teacher_steps >= 1 && eval.projections >= 1 && eval.every >= 0,
          "invalid eval settings");
  require(eval.coverage_radius > 0, "eval.coverage_radius must be positive");
  try {
    consistency.sampler.validate();
    fsf.validate();
    dmd2.validate();
    MlpPseudoVelocity(MlpArchitecture{2, model.hidden, model.time_freqs, 1, model.class_embed_dim});
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if ((method == Method::FsfDmd || method == Method::FsfScratch) && fsf.lambda > 0 && !distill.include_cd &&
      !distill.allow_unstable) {
    throw ConfigError("fsf.lambda > 0 without the consistency term is unstable; set fsf.allow_unstable to force it");
  }
  dataset();
}

json to_json(const ExperimentConfig& c) {
  return {
      {"dataset", {{"preset", c.preset}, {"overrides", c.dataset_overrides}}},
      {"method", to_string(c.method)},
      {"steps", c.steps},
      {"batch_size", c.batch_size},
      {"seed", c.seed},
      {"learning_rate", c.learning_rate},
      {"fake_learning_rate", c.fake_learning_rate},
      {"ema_decay", c.ema_decay},
      {"label_dropout", c.label_dropout},
      {"log_every", c.log_every},
      {"output_dir", c.output_dir},
      {"model",
       {{"hidden", c.model.hidden},
        {"time_freqs", c.model.time_freqs},
        {"class_embed_dim", c.model.class_embed_dim},
        {"conditional", c.model.conditional}}},
      {"consistency",
       {{"beta_alpha", c.consistency.sampler.beta_alpha},
        {"beta_beta", c.consistency.sampler.beta_beta},
        {"mask_prob", c.consistency.sampler.mask_prob},
        {"uniform_time", c.consistency.sampler.uniform},
        {"jvp_eps", c.consistency.jvp_eps},
        {"weight", c.consistency.weight == ConsistencyWeight::Cosine ? "cosine" : "constant"}}},
      {"guidance", {{"scale", c.fsf.guidance.scale}, {"t_lo", c.fsf.guidance.t_lo}, {"t_hi", c.fsf.guidance.t_hi}}},
      {"fsf",
       {{"lambda", c.fsf.lambda},
        {"weight_mode", enum_name(kWeightModes, c.fsf.weight_mode)},
        {"constant_weight", c.fsf.constant_weight},
        {"gamma_shift", c.fsf.gamma_shift},
        {"sim_steps", c.fsf.sim_steps},
        {"sim_mode", enum_name(kSimModes, c.fsf.sim_mode)},
        {"use_ema_fake_side", c.fsf.use_ema_fake_side},
        {"fake_side_null_label", c.fsf.fake_side_null_label},
        {"include_cd", c.distill.include_cd},
        {"allow_unstable", c.distill.allow_unstable},
        {"lambda_warmup_steps", c.distill.lambda_warmup_steps}}},
      {"dmd2",
       {{"ttur_ratio", c.dmd2.ttur_ratio},
        {"ida", c.dmd2.ida},
        {"ida_lambda", c.dmd2.ida_lambda},
        {"sim_steps", c.dmd2.sim_steps}}},
      {"eval",
       {{"samples", c.eval.samples},
        {"steps", c.eval.steps},
        {"teacher_steps", c.eval.teacher_steps},
        {"projections", c.eval.projections},
        {"every", c.eval.every},
        {"coverage_radius", c.eval.coverage_radius},
        {"class_conditional", c.eval.class_conditional}}},
  };
}

ExperimentConfig config_from_json(const json& user) {
  if (!user.is_object()) throw ConfigError("config root must be a JSON object");
  Method method = Method::FsfDmd;
  if (user.contains("method")) {
    if (!user["method"].is_string()) throw ConfigError("config key 'method': expected a string");
    method = method_from_string(user["method"].get<std::string>());
  }
  json j = to_json(ExperimentConfig::defaults_for(method));
  strict_merge(j, user, "");

  ExperimentConfig c;
  c.preset = j["dataset"]["preset"].get<std::string>();
  c.dataset_overrides = j["dataset"]["overrides"];
  c.method = method;
  c.steps = j["steps"].get<int>();
  c.batch_size = j["batch_size"].get<int>();
  c.seed = j["seed"].get<std::uint64_t>();
  c.learning_rate = j["learning_rate"].get<double>();
  c.fake_learning_rate = j["fake_learning_rate"].get<double>();
  c.ema_decay = j["ema_decay"].get<double>();
  c.label_dropout = j["label_dropout"].get<double>();
  c.log_every = j["log_every"].get<int>();
  c.output_dir = j["output_dir"].get<std::string>();

  const auto& m = j["model"];
  c.model.hidden = m["hidden"].get<std::vector<int>>();
  c.model.time_freqs = m["time_freqs"].get<int>();
  c.model.class_embed_dim = m["class_embed_dim"].get<int>();
  c.model.conditional = m["conditional"].get<bool>();

  const auto& k = j["consistency"];
  c.consistency.sampler.beta_alpha = k["beta_alpha"].get<double>();
  c.consistency.sampler.beta_beta = k["beta_beta"].get<double>();
  c.consistency.sampler.mask_prob = k["mask_prob"].get<double>();
  c.consistency.sampler.uniform = k["uniform_time"].get<bool>();
  c.consistency.jvp_eps = k["jvp_eps"].get<double>();
  const auto weight = k["weight"].get<std::string>();
  if (weight != "cosine" && weight != "constant") throw ConfigError("consistency.weight must be 'cosine' or 'constant'");
  c.consistency.weight = weight == "cosine" ? ConsistencyWeight::Cosine : ConsistencyWeight::Constant;

  const auto& g = j["guidance"];
  c.fsf.guidance.scale = g["scale"].get<double>();
  c.fsf.guidance.t_lo = g["t_lo"].get<double>();
  c.fsf.guidance.t_hi = g["t_hi"].get<double>();

  const auto& f = j["fsf"];
  c.fsf.lambda = f["lambda"].get<double>();
  c.fsf.weight_mode = enum_value(kWeightModes, f["weight_mode"].get<std::string>(), "fsf.weight_mode");
  c.fsf.constant_weight = f["constant_weight"].get<double>();
  c.fsf.gamma_shift = f["gamma_shift"].get<double>();
  c.fsf.sim_steps = f["sim_steps"].get<int>();
  c.fsf.sim_mode = enum_value(kSimModes, f["sim_mode"].get<std::string>(), "fsf.sim_mode");
  c.fsf.use_ema_fake_side = f["use_ema_fake_side"].get<bool>();
  c.fsf.fake_side_null_label = f["fake_side_null_label"].get<bool>();
  c.distill.include_cd = f["include_cd"].get<bool>();
  c.distill.allow_unstable = f["allow_unstable"].get<bool>();
  c.distill.lambda_warmup_steps = f["lambda_warmup_steps"].get<int>();

  const auto& d = j["dmd2"];
  c.dmd2.ttur_ratio = d["ttur_ratio"].get<int>();
  c.dmd2.ida = d["ida"].get<bool>();
  c.dmd2.ida_lambda = d["ida_lambda"].get<double>();
  c.dmd2.sim_steps = d["sim_steps"].get<int>();

  const auto& e = j["eval"];
  c.eval.samples = e["samples"].get<int>();
  c.eval.steps = e["steps"].get<int>();
  c.eval.teacher_steps = e["teacher_steps"].get<int>();
  c.eval.projections = e["projections"].get<int>();
  c.eval.every = e["every"].get<int>();
  c.eval.coverage_radius = e["coverage_radius"].get<double>();
  c.eval.class_conditional = e["class_conditional"].get<bool>();

  c.validate();
  return c;
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }

  std::vector<std::string> parts;
  std::stringstream ss(key);
  for (std::string p; std::getline(ss, p, '.');) parts.push_back(p);

  const json schema = to_json(ExperimentConfig::defaults_for(
      j.contains("method") && j["method"].is_string() ? method_from_string(j["method"].get<std::string>())
                                                       : Method::FsfDmd));
  const json* sc = &schema;
  json* slot = &j;
  std::string path;
  bool free_form = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    path = join(path, parts[i]);
    const bool last = i + 1 == parts.size();
    if (!free_form) {
      if (!sc->is_object() || !sc->contains(parts[i])) throw ConfigError("unknown config key '" + path + "'");
      sc = &(*sc)[parts[i]];
    }
    if (!slot->is_object()) throw ConfigError("config key '" + path + "' is not inside an object");
    slot = &(*slot)[parts[i]];
    if (last) {
      if (!free_form) {
        check_type(*sc, value, path);
        if (sc->is_object() && !is_free_form(path)) throw ConfigError("config key '" + path + "' is a section");
      }
      *slot = value;
    } else if (slot->is_null()) {
      *slot = json::object();
    }
    free_form = free_form || is_free_form(path);
  }
}

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "': " + e.what());
  }
}

void apply_overrides(json& j, const std::vector<std::string>& overrides) {
  // A method override changes the defaults every other key is checked against.
  for (const auto& o : overrides) {
    if (o.rfind("method=", 0) == 0) apply_override(j, o);
  }
  for (const auto& o : overrides) {
    if (o.rfind("method=", 0) != 0) apply_override(j, o);
  }
}

ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
  json j = path.empty() ? json::object() : read_json_file(path);
  apply_overrides(j, overrides);
  return config_from_json(j);
}

std::string git_blob_hash(const std::string& bytes) {
  const std::string payload = "blob " + std::to_string(bytes.size()) + std::string(1, '\0') + bytes;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(payload.data(), payload.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 0xf];
  }
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) { return git_blob_hash(to_json(cfg).dump()); }

}  // namespace fsf

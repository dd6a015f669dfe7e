#include "fsf/trainer.hpp"

#include "fsf/artifacts.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>

namespace fsf {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

std::uint64_t eval_seed(std::uint64_t seed) { return seed * 0x9E3779B97F4A7C15ULL + 0x5EEDULL; }

std::string metric_cells(const std::optional<MetricReport>& m) {
  if (!m) return ",,,";
  return format_double(m->sw2) + "," + format_double(m->mmd) + "," + format_double(m->energy) + "," +
         format_double(m->modes.coverage);
}

std::string log_csv(const TrainingLog& log, bool timing) {
  std::string out = "step,loss_cd,loss_fsf,loss_fake,loss_gen";
  if (timing) out += ",sec_per_step";
  out += ",metric_sw2,metric_mmd,metric_energy,metric_coverage,loss_cfm,loss_ct,updates\n";
  for (const auto& r : log.records) {
    out += std::to_string(r.step) + "," + format_double(r.loss_cd) + "," + format_double(r.loss_fsf) + "," +
           format_double(r.loss_fake) + "," + format_double(r.loss_gen);
    if (timing) out += "," + format_double(r.sec_per_step);
    out += "," + metric_cells(r.metrics) + "," + format_double(r.loss_cfm) + "," + format_double(r.loss_ct) + "," +
           std::to_string(r.updates) + "\n";
  }
  return out;
}

struct EvalOutput {
  MetricReport report;
  GeneratedSamples samples;
};

EvalOutput evaluate_impl(const PseudoVelocityModel& model, const ParamStore& params, SamplerKind kind,
                         const GaussianMixtureSpec& spec, const ExperimentConfig& cfg, bool kernel_metrics,
                         bool class_conditional) {
  Rng base(eval_seed(cfg.seed));
  Rng ref_rng = base.split();
  Rng gen_rng = base.split();
  Rng metric_rng = base.split();
  const int n = std::max(cfg.eval.samples, 1);
  const int steps = kind == SamplerKind::Euler ? cfg.eval.teacher_steps : cfg.eval.steps;
  EvalOutput out;
  out.samples = generate_samples(model, params, spec, kind, n, steps, class_conditional, gen_rng);
  // Class-conditional samples are compared with a reference of identical
  // per-class counts, so mode-mass sampling noise does not enter the metric.
  const LabeledBatch reference = class_conditional ? sample_mixture_given_labels(spec, out.samples.labels, ref_rng)
                                                   : sample_mixture(spec, n, ref_rng);
  MetricOptions mo;
  mo.projections = cfg.eval.projections;
  mo.coverage_radius = cfg.eval.coverage_radius;
  mo.with_kernel_metrics = kernel_metrics;
  out.report = compute_metrics(out.samples.x, reference.x, spec, mo, metric_rng);
  return out;
}

struct Accum {
  double cd = 0, fsf = 0, fake = 0, gen = 0, cfm = 0, ct = 0;
  int steps = 0;
};

/// State shared by every training loop: data, streams, logging and output.
class Session {
 public:
  Session(const ExperimentConfig& cfg, const RunOptions& opts, SamplerKind kind)
      : cfg_(cfg),
        opts_(opts),
        spec_(cfg.dataset()),
        model_(make_model(cfg, spec_)),
        kind_(kind),
        master_(cfg.seed),
        init_rng_(master_.split()),
        data_rng_(master_.split()),
        loss_rng_(master_.split()),
        dmd_rng_(master_.split()),
        fake_rng_(master_.split()) {
    cfg.validate();
    interval_start_ = Clock::now();
  }

  const ExperimentConfig& cfg() const { return cfg_; }
  const GaussianMixtureSpec& spec() const { return spec_; }
  const MlpPseudoVelocity& model() const { return *model_; }
  Rng& init_rng() { return init_rng_; }
  Rng& loss_rng() { return loss_rng_; }
  Rng& dmd_rng() { return dmd_rng_; }
  Rng& fake_rng() { return fake_rng_; }
  ParamRegistry& registry() { return registry_; }
  Accum& accum() { return acc_; }
  std::uint64_t& updates() { return updates_; }

  /// A training batch with label dropout applied (null labels throughout for
  /// unconditional models).
  LabeledBatch batch() {
    LabeledBatch b = sample_mixture(spec_, cfg_.batch_size, data_rng_);
    for (auto& c : b.labels) {
      const bool drop = data_rng_.bernoulli(cfg_.label_dropout);
      if (drop || !cfg_.model.conditional) c = kNullLabel;
    }
    return b;
  }

  void end_step(std::uint64_t step, const EmaState& ema) {
    ++acc_.steps;
    const bool log_now = step % static_cast<std::uint64_t>(cfg_.log_every) == 0 || step == static_cast<std::uint64_t>(cfg_.steps);
    const bool eval_now = cfg_.eval.every > 0 && step % static_cast<std::uint64_t>(cfg_.eval.every) == 0 &&
                          step != static_cast<std::uint64_t>(cfg_.steps);
    if (!log_now && !eval_now) return;
    const auto now = Clock::now();
    const double secs = std::chrono::duration<double>(now - interval_start_).count();
    train_seconds_ += secs;
    LogRecord r;
    r.step = step;
    const double k = std::max(acc_.steps, 1);
    r.loss_cd = acc_.cd / k;
    r.loss_fsf = acc_.fsf / k;
    r.loss_fake = acc_.fake / k;
    r.loss_gen = acc_.gen / k;
    r.loss_cfm = acc_.cfm / k;
    r.loss_ct = acc_.ct / k;
    r.sec_per_step = secs / k;
    r.updates = updates_;
    if (eval_now) r.metrics = evaluate_impl(*model_, ema.as_params(), kind_, spec_, cfg_, false, conditional_eval()).report;
    log_.records.push_back(r);
    if (opts_.on_log) opts_.on_log(r);
    acc_ = Accum{};
    interval_start_ = Clock::now();
  }

  Checkpoint make_checkpoint(const ParamStore& params, const EmaState& ema, const AdamState& adam,
                             std::uint64_t step) const {
    Checkpoint c;
    c.header = {{"format", "fsflab"},
                {"method", to_string(cfg_.method)},
                {"sampler", kind_ == SamplerKind::Euler ? "euler" : "flowmap"},
                {"model", model_->describe()},
                {"dataset", to_json(spec_)},
                {"config_hash", config_hash(cfg_)},
                {"seed", cfg_.seed},
                {"step", step}};
    c.params = params;
    c.ema = ema;
    c.adam = adam;
    return c;
  }

  [[noreturn]] void diverged(std::uint64_t step, const std::string& what, const ParamStore& params, const EmaState& ema,
                             const AdamState& adam) {
    if (opts_.write_outputs) {
      const std::filesystem::path dir(cfg_.output_dir);
      std::filesystem::create_directories(dir);
      save_checkpoint(dir / "last_good.ckpt", make_checkpoint(params, ema, adam, step - 1));
      write_text_file((dir / "divergence.json").string(),
                      json{{"step", step}, {"error", what}, {"method", to_string(cfg_.method)}}.dump(2) + "\n");
      write_text_file((dir / "log.csv").string(), log_.csv());
    }
    throw DivergenceError("step " + std::to_string(step) + ": " + what);
  }

  RunResult finish(const ParamStore& params, const EmaState& ema, const AdamState& adam, json extra) {
    RunResult res;
    res.checkpoint = make_checkpoint(params, ema, adam, static_cast<std::uint64_t>(cfg_.steps));
    res.log = log_;
    res.registry = registry_;
    res.updates = updates_;
    res.mean_sec_per_step = train_seconds_ / cfg_.steps;
    std::optional<EvalOutput> ev;
    if (opts_.evaluate_final && cfg_.eval.samples > 0) {
      ev = evaluate_impl(*model_, inference_params(res.checkpoint), kind_, spec_, cfg_, true, conditional_eval());
      res.final_metrics = ev->report;
      if (!res.log.records.empty()) res.log.records.back().metrics = ev->report;
    }
    res.manifest = {{"config", to_json(cfg_)},
                    {"config_hash", config_hash(cfg_)},
                    {"seed", cfg_.seed},
                    {"method", to_string(cfg_.method)},
                    {"steps", cfg_.steps},
                    {"updates", updates_},
                    {"trainable_parameters", registry_.trainable},
                    {"timing", {{"mean_sec_per_step", res.mean_sec_per_step}}}};
    for (auto& [k, v] : extra.items()) res.manifest[k] = v;
    if (res.final_metrics) res.manifest["final_metrics"] = to_json(*res.final_metrics);

    if (opts_.write_outputs) {
      const std::filesystem::path dir(cfg_.output_dir);
      std::filesystem::create_directories(dir);
      save_checkpoint(dir / "model.ckpt", res.checkpoint);
      write_text_file((dir / "log.csv").string(), res.log.csv());
      write_text_file((dir / "manifest.json").string(), res.manifest.dump(2) + "\n");
      if (ev) {
        write_text_file((dir / "metrics.json").string(), to_json(ev->report).dump(2) + "\n");
        const Index shown = std::min<Index>(ev->samples.x.rows(), 2048);
        const std::vector<int> lab(ev->samples.labels.begin(), ev->samples.labels.begin() + shown);
        write_text_file((dir / "samples.svg").string(),
                        scatter_svg(ev->samples.x.topRows(shown), lab, spec_, to_string(cfg_.method)));
      }
    }
    return res;
  }

 private:
  bool conditional_eval() const { return cfg_.eval.class_conditional && cfg_.model.conditional; }

  const ExperimentConfig& cfg_;
  const RunOptions& opts_;
  GaussianMixtureSpec spec_;
  std::unique_ptr<MlpPseudoVelocity> model_;
  SamplerKind kind_;
  Rng master_, init_rng_, data_rng_, loss_rng_, dmd_rng_, fake_rng_;
  ParamRegistry registry_;
  TrainingLog log_;
  Accum acc_;
  std::uint64_t updates_ = 0;
  Clock::time_point interval_start_;
  double train_seconds_ = 0;
};

double warmed_lambda(double lambda, int warmup, std::uint64_t step) {
  if (warmup <= 0) return lambda;
  return lambda * std::min(1.0, static_cast<double>(step) / warmup);
}

Value add_terms(const Value& a, const Value& b) {
  if (!a.defined()) return b;
  if (!b.defined()) return a;
  return a + b;
}

void require_method(const ExperimentConfig& cfg, std::initializer_list<Method> allowed, const char* who) {
  for (Method m : allowed) {
    if (cfg.method == m) return;
  }
  throw ConfigError(std::string(who) + ": method '" + to_string(cfg.method) + "' is not handled here");
}

void require_compatible(const ParamStore& a, const ParamStore& b, const char* what) {
  if (!a.same_keys(b)) throw ConfigError(std::string(what) + ": parameter names differ from the configured model");
  auto it = b.begin();
  for (const auto& [name, v] : a) {
    if (v.rows() != it->second.rows() || v.cols() != it->second.cols()) {
      throw ConfigError(std::string(what) + ": shape of '" + name + "' differs from the configured model");
    }
    ++it;
  }
}

}  // namespace

std::string TrainingLog::csv() const { return log_csv(*this, true); }
std::string TrainingLog::csv_without_timing() const { return log_csv(*this, false); }

std::size_t ParamRegistry::total() const {
  std::size_t n = 0;
  for (const auto& [k, v] : trainable) n += v;
  return n;
}

std::unique_ptr<MlpPseudoVelocity> make_model(const ExperimentConfig& cfg, const GaussianMixtureSpec& spec) {
  MlpArchitecture a;
  a.dim = spec.dim();
  a.hidden = cfg.model.hidden;
  a.time_freqs = cfg.model.time_freqs;
  a.num_classes = cfg.model.conditional ? spec.components() : 0;
  a.class_embed_dim = cfg.model.class_embed_dim;
  return std::make_unique<MlpPseudoVelocity>(a);
}

ParamStore inference_params(const Checkpoint& ckpt) { return ckpt.ema ? ckpt.ema->as_params() : ckpt.params; }

GeneratedSamples generate_samples(const PseudoVelocityModel& model, const ParamStore& params,
                                  const GaussianMixtureSpec& spec, SamplerKind kind, int n, int steps,
                                  bool class_conditional, Rng& rng) {
  GeneratedSamples g;
  g.labels.resize(static_cast<std::size_t>(n));
  for (auto& c : g.labels) c = class_conditional ? rng.categorical(spec.weights) : kNullLabel;
  const Matrix z = rng.normal_matrix(n, spec.dim());
  if (n == 0) {
    g.x = z;
    return g;
  }
  if (kind == SamplerKind::Euler) {
    g.x = euler_sample(model_velocity(model, params), z, g.labels, steps);
  } else {
    g.x = rollout(model, params, z, g.labels, steps).sample;
  }
  return g;
}

SamplerKind checkpoint_sampler(const Checkpoint& ckpt) {
  return ckpt.header.value("sampler", "flowmap") == "euler" ? SamplerKind::Euler : SamplerKind::FlowMap;
}

bool checkpoint_conditional(const Checkpoint& ckpt) {
  return ckpt.header.at("model").value("num_classes", 0) > 0;
}

MetricReport evaluate_checkpoint(const Checkpoint& ckpt, const ExperimentConfig& cfg,
                                 const GaussianMixtureSpec* reference) {
  const auto model = model_from_json(ckpt.header.at("model"));
  const auto spec = reference ? *reference : gm_from_json(ckpt.header.at("dataset"));
  const bool conditional = cfg.eval.class_conditional && checkpoint_conditional(ckpt) &&
                           spec.components() <= ckpt.header.at("model").value("num_classes", 0);
  return evaluate_impl(*model, inference_params(ckpt), checkpoint_sampler(ckpt), spec, cfg, true, conditional).report;
}

GeneratedSamples sample_checkpoint(const Checkpoint& ckpt, int n, int steps, std::uint64_t seed,
                                   std::optional<int> class_filter) {
  if (n < 0) throw std::invalid_argument("sample: n must be >= 0");
  if (steps < 1) throw std::invalid_argument("sample: steps must be >= 1");
  const auto model = model_from_json(ckpt.header.at("model"));
  const auto spec = gm_from_json(ckpt.header.at("dataset"));
  const bool conditional = checkpoint_conditional(ckpt);
  if (class_filter && (*class_filter < kNullLabel || *class_filter >= spec.components() ||
                       (!conditional && *class_filter != kNullLabel))) {
    throw std::invalid_argument("sample: class " + std::to_string(*class_filter) + " is not available");
  }
  Rng rng(seed);
  GeneratedSamples g;
  g.labels.resize(static_cast<std::size_t>(n));
  for (auto& c : g.labels) c = class_filter ? *class_filter : conditional ? rng.categorical(spec.weights) : kNullLabel;
  const Matrix z = rng.normal_matrix(n, spec.dim());
  if (n == 0) {
    g.x = z;
  } else {
    const ParamStore p = inference_params(ckpt);
    g.x = checkpoint_sampler(ckpt) == SamplerKind::Euler ? euler_sample(model_velocity(*model, p), z, g.labels, steps)
                                                         : rollout(*model, p, z, g.labels, steps).sample;
  }
  return g;
}

RunResult train_teacher(const ExperimentConfig& cfg, const RunOptions& opts) {
  require_method(cfg, {Method::TeacherCfm}, "train_teacher");
  Session ss(cfg, opts, SamplerKind::Euler);
  ParamStore params = ss.model().init_params(ss.init_rng());
  AdamState adam = AdamState::for_params(params, cfg.learning_rate);
  EmaState ema = EmaState::from_params(params, cfg.ema_decay);
  ss.registry().add("velocity", params);

  for (std::uint64_t step = 1; step <= static_cast<std::uint64_t>(cfg.steps); ++step) {
    try {
      const LabeledBatch b = ss.batch();
      const Value loss = cfm_loss(ss.model(), params, b, ss.loss_rng());
      const GradMap grads = backward(loss, params);
      adam_step(params, grads, adam);
      ema_update(ema, params);
      ++ss.updates();
      ss.accum().cfm += loss.item();
    } catch (const NumericalError& e) {
      ss.diverged(step, e.what(), params, ema, adam);
    }
    ss.end_step(step, ema);
  }
  return ss.finish(params, ema, adam, json::object());
}

RunResult distill(const ExperimentConfig& cfg, const Checkpoint& teacher, const Checkpoint* init,
                  const RunOptions& opts) {
  require_method(cfg, {Method::Cd, Method::FsfDmd, Method::Dmd2}, "distill");
  Session ss(cfg, opts, SamplerKind::FlowMap);
  const auto teacher_model = model_from_json(teacher.header.at("model"));
  const ParamStore teacher_params = inference_params(teacher);
  const ParamStore teacher_before = teacher_params;
  const VelocityField teacher_v = model_velocity(*teacher_model, teacher_params);

  ParamStore params = ss.model().init_params(ss.init_rng());
  std::string init_source = "random";
  if (init) {
    const ParamStore p = inference_params(*init);
    require_compatible(params, p, "init checkpoint");
    params = p;
    init_source = "checkpoint";
  } else if (teacher_model->describe() == ss.model().describe()) {
    params = teacher_params;
    init_source = "teacher";
  }
  params.set_step_count(0);
  AdamState adam = AdamState::for_params(params, cfg.learning_rate);
  EmaState ema = EmaState::from_params(params, cfg.ema_decay);
  ss.registry().add("generator", params);

  const bool dmd2 = cfg.method == Method::Dmd2;
  const double lambda = cfg.method == Method::Cd ? 0.0 : cfg.fsf.lambda;
  if (!cfg.distill.include_cd && lambda == 0) throw ConfigError("distill: nothing to optimize (no consistency term and lambda = 0)");

  std::optional<ParamStore> fake;
  std::optional<AdamState> fake_adam;
  if (dmd2) {
    if (teacher_model->describe() != ss.model().describe()) {
      throw ConfigError("dmd2: the fake network is initialized from the teacher and needs the same architecture");
    }
    fake = teacher_params;
    fake->set_step_count(0);
    fake_adam = AdamState::for_params(*fake, cfg.fake_learning_rate);
    ss.registry().add("fake", *fake);
  }

  for (std::uint64_t step = 1; step <= static_cast<std::uint64_t>(cfg.steps); ++step) {
    try {
      if (dmd2) {
        for (int k = 0; k < cfg.dmd2.ttur_ratio; ++k) {
          const LabeledBatch fb = ss.batch();
          Matrix xhat;
          {
            NoGradGuard guard;
            const Matrix z = ss.fake_rng().normal_matrix(cfg.batch_size, ss.model().dim());
            xhat = cfg.dmd2.sim_steps > 1
                       ? dmd2_backward_simulate(ss.model(), params, z, fb.labels, cfg.dmd2.sim_steps, ss.fake_rng()).endpoint
                       : backward_simulate(ss.model(), params, z, fb.labels, 1).endpoint;
          }
          const Value lf = dmd2_fake_loss(ss.model(), *fake, xhat, fb.labels, ss.fake_rng());
          adam_step(*fake, backward(lf, *fake), *fake_adam);
          ++ss.updates();
          ss.accum().fake += lf.item() / cfg.dmd2.ttur_ratio;
        }
      }

      const LabeledBatch b = ss.batch();
      Value total;
      if (cfg.distill.include_cd) {
        const Value lcd = cd_loss(ss.model(), params, teacher_v, b, cfg.consistency, cfg.fsf.guidance, ss.loss_rng());
        ss.accum().cd += lcd.item();
        total = lcd;
      }
      const double lam = warmed_lambda(lambda, cfg.distill.lambda_warmup_steps, step);
      if (lam > 0) {
        Value term;
        if (dmd2) {
          term = dmd2_generator_objective(ss.model(), params, *fake, teacher_v, b.labels, cfg.dmd2, cfg.fsf.guidance,
                                          ss.dmd_rng());
          ss.accum().gen += term.item();
        } else {
          const ParamStore fake_side = cfg.fsf.use_ema_fake_side ? ema.as_params() : params;
          term = fsf_dmd_objective(ss.model(), params, fake_side, teacher_v, b.labels, cfg.fsf, ss.dmd_rng());
          ss.accum().fsf += term.item();
        }
        total = add_terms(total, scale(term, lam));
      }
      if (total.defined()) {
        adam_step(params, backward(total, params), adam);
        ++ss.updates();
      }
      if (dmd2 && cfg.dmd2.ida) ida_blend(*fake, params, cfg.dmd2.ida_lambda);
      ema_update(ema, params);
    } catch (const NumericalError& e) {
      ss.diverged(step, e.what(), params, ema, adam);
    }
    ss.end_step(step, ema);
  }

  if (!teacher_params.bit_equal(teacher_before)) throw std::logic_error("distill: teacher parameters were modified");
  json extra = {{"generator_init", init_source}};
  if (dmd2) extra["fake_init"] = "teacher";
  return ss.finish(params, ema, adam, extra);
}

RunResult train_scratch(const ExperimentConfig& cfg, const RunOptions& opts) {
  require_method(cfg, {Method::Ct, Method::FsfScratch}, "train_scratch");
  Session ss(cfg, opts, SamplerKind::FlowMap);
  ParamStore params = ss.model().init_params(ss.init_rng());
  AdamState adam = AdamState::for_params(params, cfg.learning_rate);
  EmaState ema = EmaState::from_params(params, cfg.ema_decay);
  ss.registry().add("flowmap", params);
  const double lambda = cfg.method == Method::Ct ? 0.0 : cfg.fsf.lambda;

  for (std::uint64_t step = 1; step <= static_cast<std::uint64_t>(cfg.steps); ++step) {
    try {
      const LabeledBatch b = ss.batch();
      const Value lct = ct_loss(ss.model(), params, b, cfg.consistency, ss.loss_rng());
      ss.accum().ct += lct.item();
      Value total = lct;
      const double lam = warmed_lambda(lambda, cfg.distill.lambda_warmup_steps, step);
      if (lam > 0) {
        const ParamStore self = cfg.fsf.use_ema_fake_side ? ema.as_params() : params;
        const Value lf = fsf_scratch_objective(ss.model(), params, self, b.labels, cfg.fsf, ss.dmd_rng());
        ss.accum().fsf += lf.item();
        total = total + scale(lf, lam);
      }
      adam_step(params, backward(total, params), adam);
      ++ss.updates();
      ema_update(ema, params);
    } catch (const NumericalError& e) {
      ss.diverged(step, e.what(), params, ema, adam);
    }
    ss.end_step(step, ema);
  }
  return ss.finish(params, ema, adam, json::object());
}

RunResult run_experiment(const ExperimentConfig& cfg, const Checkpoint* teacher, const Checkpoint* init,
                         const RunOptions& opts) {
  switch (cfg.method) {
    case Method::TeacherCfm: return train_teacher(cfg, opts);
    case Method::Ct:
    case Method::FsfScratch: return train_scratch(cfg, opts);
    case Method::Cd:
    case Method::FsfDmd:
    case Method::Dmd2:
      if (!teacher) throw ConfigError("method '" + to_string(cfg.method) + "' needs a teacher checkpoint");
      return distill(cfg, *teacher, init, opts);
  }
  throw std::logic_error("unhandled method");
}

}  // namespace fsf

#include "commands.hpp"

#include <charconv>
#include <fstream>
#include <json.hpp>
#include <ostream>

#include "mambaclip/hessian.hpp"
#include "mambaclip/ood.hpp"
#include "mambaclip/synthetic.hpp"
#include "mambaclip/zeroshot.hpp"

namespace mambaclip::cli {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) { open_out(path) << j.dump(2) << '\n'; }

// Parameters from run.checkpoint. Without explicit [model] keys the model
// shape comes from the checkpoint's own config echo.
ParamSet<double> load_params(RunConfig& cfg) {
  const Checkpoint ck = load_checkpoint(require_path(cfg.checkpoint, "run.checkpoint"));
  if (!cfg.model_set && !ck.config_echo.empty()) {
    RunConfig saved;
    apply_ini_text(saved, ck.config_echo);
    cfg.train.model = saved.train.model;
  }
  check_params_match(cfg.train.model, ck.params);
  return ck.params;
}

void start(const RunConfig& cfg) {
  fs::create_directories(cfg.out);
  open_out(cfg.out / "config.ini") << echo(cfg);
}

PromptTemplateSet templates_of(const RunConfig& cfg) {
  return cfg.templates.empty() ? PromptTemplateSet::defaults() : PromptTemplateSet(cfg.templates);
}

std::vector<PerturbationKind> ood_kinds(const RunConfig& cfg) {
  if (cfg.ood_kind == "all") {
    if (!cfg.ood_levels.empty()) throw ConfigError("ood.levels needs a single ood.kind");
    const auto all = all_perturbation_kinds();
    return {all.begin(), all.end()};
  }
  try {
    return {parse_perturbation_kind(cfg.ood_kind)};
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("ood.kind: ") + e.what());
  }
}

int cmd_train(RunConfig cfg, std::ostream& log) {
  cfg.train.seed = cfg.seed;
  cfg.train.validate();
  const auto manifest = load_manifest(require_path(cfg.manifest, "run.manifest"), ManifestKind::caption_pairs);
  std::optional<Checkpoint> resume;
  if (!cfg.checkpoint.empty()) {
    resume = load_checkpoint(cfg.checkpoint);
    check_params_match(cfg.train.model, resume->params);
  }
  start(cfg);
  auto data = PairedData::from_manifest(manifest, cfg.train.model);
  Trainer trainer = resume ? Trainer(cfg.train, std::move(data), std::move(*resume))
                           : Trainer(cfg.train, std::move(data));
  auto loss_csv = open_out(cfg.out / "loss.csv");
  loss_csv << "step,loss,lr\n";
  try {
    trainer.run([&](const StepRecord& r) {
      loss_csv << r.step << ',' << num(r.loss) << ',' << num(r.learning_rate) << '\n';
      if (r.step % 50 == 0) log << "step " << r.step << " loss " << r.loss << '\n';
    });
  } catch (const TrainingError& e) {
    log << "training aborted: " << e.what() << '\n';
    return 3;
  }
  save_checkpoint(cfg.out / "checkpoint.ckpt", trainer.checkpoint(echo(cfg)));
  log << "wrote " << (cfg.out / "checkpoint.ckpt").string() << " after " << trainer.current_step() << " steps\n";
  return 0;
}

int cmd_eval_zeroshot(RunConfig cfg, std::ostream& log) {
  const auto manifest = load_manifest(require_path(cfg.manifest, "run.manifest"), ManifestKind::labeled);
  const auto params = load_params(cfg);
  start(cfg);
  const auto emb = clip_embedders(params, cfg.train.model);
  const auto classes = build_class_embeddings(emb.text, manifest.class_names(), templates_of(cfg));
  const auto report =
      evaluate_zeroshot(emb.image, emb.image_size, manifest, classes, cfg.dataset, cfg.model_id, cfg.eval_batch);
  write_eval_report(cfg.out / "zeroshot.json", report);
  const std::vector<EvalReport> reports{report};
  write_eval_csv(cfg.out / "zeroshot.csv", reports);
  log << cfg.dataset << " top-1 " << report.top1() << " over " << report.count << " images\n";
  return 0;
}

int cmd_eval_ood(RunConfig cfg, std::ostream& log) {
  const auto kinds = ood_kinds(cfg);
  const auto manifest = load_manifest(require_path(cfg.manifest, "run.manifest"), ManifestKind::labeled);
  const auto params = load_params(cfg);
  start(cfg);
  const auto emb = clip_embedders(params, cfg.train.model);
  const auto classes = build_class_embeddings(emb.text, categories16(), templates_of(cfg));
  std::vector<OodCurve> curves;
  for (PerturbationKind k : kinds) {
    curves.push_back(evaluate_ood(emb.image, emb.image_size, manifest, classes, k, cfg.seed, cfg.model_id,
                                  cfg.ood_levels));
    log << perturbation_kind_name(k) << ':';
    for (const auto& p : curves.back().points) log << ' ' << p.accuracy;
    log << '\n';
  }
  write_ood_csv(cfg.out / "ood.csv", curves);
  return 0;
}

int cmd_eval_stimulus(RunConfig cfg, std::ostream& log) {
  const auto manifest = load_manifest(require_path(cfg.manifest, "run.manifest"), ManifestKind::labeled);
  const auto params = load_params(cfg);
  start(cfg);
  const auto emb = clip_embedders(params, cfg.train.model);
  const auto classes = build_class_embeddings(emb.text, categories16(), templates_of(cfg));
  const auto report = evaluate_stimulus(emb.image, emb.image_size, manifest, classes, cfg.dataset, cfg.model_id);
  write_eval_report(cfg.out / "stimulus.json", report);
  const std::vector<EvalReport> reports{report};
  write_eval_csv(cfg.out / "stimulus.csv", reports);
  log << cfg.dataset << " top-1 " << report.top1() << '\n';
  return 0;
}

int cmd_shape_bias(RunConfig cfg, std::ostream& log) {
  const auto manifest = load_manifest(require_path(cfg.manifest, "run.manifest"), ManifestKind::cue_conflict);
  const auto params = load_params(cfg);
  start(cfg);
  const auto emb = clip_embedders(params, cfg.train.model);
  const auto classes = build_class_embeddings(emb.text, categories16(), templates_of(cfg));
  const auto r = shape_bias(emb.image, emb.image_size, manifest, classes);
  nlohmann::ordered_json j;
  j["model"] = cfg.model_id;
  j["shape_count"] = r.shape_count;
  j["texture_count"] = r.texture_count;
  j["neither_count"] = r.neither_count;
  j["defined"] = r.defined();
  j["shape_bias"] = r.defined() ? nlohmann::ordered_json(r.shape_bias()) : nlohmann::ordered_json(nullptr);
  write_json(cfg.out / "shape_bias.json", j);
  log << "shape bias " << (r.defined() ? num(r.shape_bias()) : "undefined") << '\n';
  return 0;
}

int cmd_perturb(RunConfig cfg, std::ostream& log) {
  const auto& input = require_path(cfg.perturb_input, "perturb.input");
  PerturbationSpec spec{};
  try {
    spec = {parse_perturbation_kind(cfg.perturb_kind), cfg.perturb_level, cfg.seed};
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("perturb: ") + e.what());
  }
  if (fs::weakly_canonical(input) == fs::weakly_canonical(cfg.out)) {
    throw ConfigError("perturb.input and run.out must differ");
  }
  start(cfg);
  const std::size_t n = perturb_tree(input, cfg.out, spec);
  log << "wrote " << n << " images\n";
  return 0;
}

int cmd_hessian(RunConfig cfg, std::ostream& log) {
  const auto manifest = load_manifest(require_path(cfg.manifest, "run.manifest"), ManifestKind::caption_pairs);
  const ParamSet<double> params = cfg.checkpoint.empty() ? init_clip(cfg.train.model, cfg.seed) : load_params(cfg);
  start(cfg);
  HessianRunConfig run;
  run.batch_size = cfg.hessian_batch_size;
  run.num_samples = cfg.hessian_samples;
  run.lanczos = {cfg.hessian_k, cfg.hessian_iterations, cfg.seed, cfg.hessian_tolerance};
  run.loss_scale = cfg.hessian_loss_scale;
  const auto data = PairedData::from_manifest(manifest, cfg.train.model);
  const auto report = hessian_spectrum_run(params, cfg.train.model, data, run, cfg.model_id);
  const auto summary = summarize_sharpness(report, cfg.hessian_bins);
  write_spectrum_csv(cfg.out / "spectrum.csv", report);
  write_histogram_csv(cfg.out / "histogram.csv", summary);
  write_sharpness_json(cfg.out / "sharpness.json", report, summary);
  log << report.batch_count() << " batches, max |eigenvalue| " << summary.max_abs_eigenvalue << ", negative fraction "
      << summary.negative_fraction << '\n';
  return 0;
}

int cmd_summarize(RunConfig cfg, std::ostream& log) {
  const auto grid = AccuracyGrid::from_csv(require_path(cfg.table, "summarize.table"));
  const auto rows = summarize_table(grid);
  start(cfg);
  auto out = open_out(cfg.out / "summary.csv");
  out << "dataset,best,models,margin\n";
  for (const auto& r : rows) {
    std::string models;
    for (const auto& m : r.models) models += (models.empty() ? "" : ";") + m;
    out << r.dataset << ',' << num(r.best) << ',' << models << ',' << num(r.margin) << '\n';
    log << r.dataset << ": " << models << ' ' << r.best << '\n';
  }
  return 0;
}

int cmd_make_synthetic(RunConfig cfg, std::ostream& log) {
  start(cfg);
  const auto set = write_synthetic_dataset(cfg.out, cfg.synthetic_image_size);
  log << "wrote " << set.captions.string() << " and " << set.labeled.string() << '\n';
  return 0;
}

using Handler = int (*)(RunConfig, std::ostream&);

const std::vector<std::pair<CommandInfo, Handler>>& table() {
  static const std::vector<std::pair<CommandInfo, Handler>> t = {
      {{"train", "Train a CLIP model on a caption-pairs manifest"}, cmd_train},
      {{"eval-zeroshot", "Zero-shot accuracy on a labeled manifest"}, cmd_eval_zeroshot},
      {{"eval-ood", "Accuracy curves under the perturbation ladders"}, cmd_eval_ood},
      {{"eval-stimulus", "16-category accuracy on a stimulus manifest"}, cmd_eval_stimulus},
      {{"shape-bias", "Shape bias on a cue-conflict manifest"}, cmd_shape_bias},
      {{"perturb", "Write perturbed copies of an image tree"}, cmd_perturb},
      {{"hessian", "Per-batch top-k Hessian eigenvalues of the contrastive loss"}, cmd_hessian},
      {{"summarize", "Best model per dataset of an accuracy table"}, cmd_summarize},
      {{"make-synthetic", "Write the synthetic color/shape corpus"}, cmd_make_synthetic},
  };
  return t;
}

}  // namespace

const std::vector<CommandInfo>& commands() {
  static const std::vector<CommandInfo> infos = [] {
    std::vector<CommandInfo> v;
    for (const auto& [info, _] : table()) v.push_back(info);
    return v;
  }();
  return infos;
}

int run_command(RunConfig cfg, std::ostream& log) {
  for (const auto& [info, handler] : table()) {
    if (info.name == cfg.command) return handler(std::move(cfg), log);
  }
  throw ConfigError("unknown command '" + cfg.command + "'");
}

}  // namespace mambaclip::cli

#include "userip/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <sstream>

#include "json.hpp"

namespace userip {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  if (threads < 1) raise(Errc::config, "config: threads must be >= 1");
  if (data.n_categories < 1) raise(Errc::config, "config: data.n_categories must be >= 1");
  if (static_cast<int>(data.class_counts.size()) != data.n_categories)
    raise(Errc::config, "config: data.class_counts must list one entry per category");
  if (static_cast<int>(infer.slot_widths.size()) != data.n_categories)
    raise(Errc::config, "config: infer.slot_widths must list one entry per category");
  if (static_cast<int>(quant.code_counts.size()) != data.n_categories)
    raise(Errc::config, "config: quant.code_counts must list one entry per category");
  if (lm.embed_dim % lm.n_heads != 0)
    raise(Errc::config, "config: lm.embed_dim must divide by lm.n_heads");
  if (data.n_users < 1 || data.n_items < 2) raise(Errc::config, "config: data sizes too small");
}

namespace {

void expect_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) raise(Errc::config, "config: " + where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      raise(Errc::config, "config: unknown key '" + it.key() + "' in " + where);
}

template <class T>
void maybe(const json& j, const char* key, T& target) {
  if (j.contains(key)) target = j.at(key).get<T>();
}

}  // namespace

RunConfig RunConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    raise(Errc::config, std::string("config: malformed JSON: ") + e.what());
  }
  expect_keys(j, {"seed", "threads", "data", "lm", "infer", "quant", "rec", "bayes", "sweep"},
              "top level");
  RunConfig cfg;
  maybe(j, "seed", cfg.seed);
  maybe(j, "threads", cfg.threads);
  if (j.contains("data")) {
    const auto& d = j.at("data");
    expect_keys(d,
                {"n_users", "n_items", "n_categories", "class_counts", "seq_len", "mix_own",
                 "zipf_exponent", "rating_boost", "sigma_match", "sigma_nonmatch",
                 "min_interactions", "split_ratios", "ingest_path"},
                "data");
    maybe(d, "n_users", cfg.data.n_users);
    maybe(d, "n_items", cfg.data.n_items);
    maybe(d, "n_categories", cfg.data.n_categories);
    maybe(d, "class_counts", cfg.data.class_counts);
    maybe(d, "seq_len", cfg.data.seq_len);
    maybe(d, "mix_own", cfg.data.mix_own);
    maybe(d, "zipf_exponent", cfg.data.zipf_exponent);
    maybe(d, "rating_boost", cfg.data.rating_boost);
    maybe(d, "sigma_match", cfg.data.sigma_match);
    maybe(d, "sigma_nonmatch", cfg.data.sigma_nonmatch);
    maybe(d, "min_interactions", cfg.data.min_interactions);
    if (d.contains("split_ratios")) {
      auto v = d.at("split_ratios").get<std::vector<int>>();
      if (v.size() != 3) raise(Errc::config, "config: split_ratios needs 3 entries");
      std::copy(v.begin(), v.end(), cfg.data.split_ratios.begin());
    }
    maybe(d, "ingest_path", cfg.data.ingest_path);
  }
  if (j.contains("lm")) {
    const auto& d = j.at("lm");
    expect_keys(d, {"embed_dim", "n_layers", "n_heads", "context_len", "dropout", "lr", "epochs",
                    "batch_size"},
                "lm");
    maybe(d, "embed_dim", cfg.lm.embed_dim);
    maybe(d, "n_layers", cfg.lm.n_layers);
    maybe(d, "n_heads", cfg.lm.n_heads);
    maybe(d, "context_len", cfg.lm.context_len);
    maybe(d, "dropout", cfg.lm.dropout);
    maybe(d, "lr", cfg.lm.lr);
    maybe(d, "epochs", cfg.lm.epochs);
    maybe(d, "batch_size", cfg.lm.batch_size);
  }
  if (j.contains("infer")) {
    const auto& d = j.at("infer");
    expect_keys(d, {"slot_widths", "epochs", "lr", "batch_users", "patience", "min_delta",
                    "init_sigma", "joint_vq", "use_delimiter", "strict_name_isolation"},
                "infer");
    maybe(d, "slot_widths", cfg.infer.slot_widths);
    maybe(d, "epochs", cfg.infer.epochs);
    maybe(d, "lr", cfg.infer.lr);
    maybe(d, "batch_users", cfg.infer.batch_users);
    maybe(d, "patience", cfg.infer.patience);
    maybe(d, "min_delta", cfg.infer.min_delta);
    maybe(d, "init_sigma", cfg.infer.init_sigma);
    maybe(d, "joint_vq", cfg.infer.joint_vq);
    maybe(d, "use_delimiter", cfg.infer.use_delimiter);
    maybe(d, "strict_name_isolation", cfg.infer.strict_name_isolation);
  }
  if (j.contains("quant")) {
    const auto& d = j.at("quant");
    expect_keys(d, {"code_counts", "alpha", "beta", "codebook_lr", "surrogate_item_dim",
                    "surrogate_hidden", "consolidate"},
                "quant");
    maybe(d, "code_counts", cfg.quant.code_counts);
    maybe(d, "alpha", cfg.quant.alpha);
    maybe(d, "beta", cfg.quant.beta);
    maybe(d, "codebook_lr", cfg.quant.codebook_lr);
    maybe(d, "surrogate_item_dim", cfg.quant.surrogate_item_dim);
    maybe(d, "surrogate_hidden", cfg.quant.surrogate_hidden);
    maybe(d, "consolidate", cfg.quant.consolidate);
  }
  if (j.contains("rec")) {
    const auto& d = j.at("rec");
    expect_keys(d, {"embed_dim", "cross_layers", "mlp_dims", "dropout", "lr", "batch_size",
                    "epochs", "patience", "logit_clip"},
                "rec");
    maybe(d, "embed_dim", cfg.rec.embed_dim);
    maybe(d, "cross_layers", cfg.rec.cross_layers);
    maybe(d, "mlp_dims", cfg.rec.mlp_dims);
    maybe(d, "dropout", cfg.rec.dropout);
    maybe(d, "lr", cfg.rec.lr);
    maybe(d, "batch_size", cfg.rec.batch_size);
    maybe(d, "epochs", cfg.rec.epochs);
    maybe(d, "patience", cfg.rec.patience);
    maybe(d, "logit_clip", cfg.rec.logit_clip);
  }
  if (j.contains("bayes")) {
    const auto& d = j.at("bayes");
    expect_keys(d, {"p_star", "p_alt", "m_values", "trials"}, "bayes");
    maybe(d, "p_star", cfg.bayes.p_star);
    maybe(d, "p_alt", cfg.bayes.p_alt);
    maybe(d, "m_values", cfg.bayes.m_values);
    maybe(d, "trials", cfg.bayes.trials);
  }
  if (j.contains("sweep")) {
    const auto& d = j.at("sweep");
    expect_keys(d, {"k1_values"}, "sweep");
    maybe(d, "k1_values", cfg.sweep.k1_values);
  }
  cfg.validate();
  return cfg;
}

std::string RunConfig::to_json_text() const {
  json j;
  j["seed"] = seed;
  j["threads"] = threads;
  j["data"] = {{"n_users", data.n_users},
               {"n_items", data.n_items},
               {"n_categories", data.n_categories},
               {"class_counts", data.class_counts},
               {"seq_len", data.seq_len},
               {"mix_own", data.mix_own},
               {"zipf_exponent", data.zipf_exponent},
               {"rating_boost", data.rating_boost},
               {"sigma_match", data.sigma_match},
               {"sigma_nonmatch", data.sigma_nonmatch},
               {"min_interactions", data.min_interactions},
               {"split_ratios", std::vector<int>(data.split_ratios.begin(), data.split_ratios.end())},
               {"ingest_path", data.ingest_path}};
  j["lm"] = {{"embed_dim", lm.embed_dim},     {"n_layers", lm.n_layers},
             {"n_heads", lm.n_heads},         {"context_len", lm.context_len},
             {"dropout", lm.dropout},         {"lr", lm.lr},
             {"epochs", lm.epochs},           {"batch_size", lm.batch_size}};
  j["infer"] = {{"slot_widths", infer.slot_widths},
                {"epochs", infer.epochs},
                {"lr", infer.lr},
                {"batch_users", infer.batch_users},
                {"patience", infer.patience},
                {"min_delta", infer.min_delta},
                {"init_sigma", infer.init_sigma},
                {"joint_vq", infer.joint_vq},
                {"use_delimiter", infer.use_delimiter},
                {"strict_name_isolation", infer.strict_name_isolation}};
  j["quant"] = {{"code_counts", quant.code_counts},
                {"alpha", quant.alpha},
                {"beta", quant.beta},
                {"codebook_lr", quant.codebook_lr},
                {"surrogate_item_dim", quant.surrogate_item_dim},
                {"surrogate_hidden", quant.surrogate_hidden},
                {"consolidate", quant.consolidate}};
  j["rec"] = {{"embed_dim", rec.embed_dim},   {"cross_layers", rec.cross_layers},
              {"mlp_dims", rec.mlp_dims},     {"dropout", rec.dropout},
              {"lr", rec.lr},                 {"batch_size", rec.batch_size},
              {"epochs", rec.epochs},         {"patience", rec.patience},
              {"logit_clip", rec.logit_clip}};
  j["bayes"] = {{"p_star", bayes.p_star},
                {"p_alt", bayes.p_alt},
                {"m_values", bayes.m_values},
                {"trials", bayes.trials}};
  j["sweep"] = {{"k1_values", sweep.k1_values}};
  return j.dump(2) + "\n";
}

std::string RunConfig::config_hash() const { return hex32(crc32_str(to_json_text())); }

PromptTemplate RunConfig::prompt_template() const {
  PromptTemplate tmpl = default_prompt_template(data.n_categories);
  tmpl.slot_widths = infer.slot_widths;
  tmpl.use_delimiter = infer.use_delimiter;
  tmpl.strict_name_isolation = infer.strict_name_isolation;
  return tmpl;
}

DCNConfig RunConfig::dcn_config() const {
  DCNConfig cfg;
  cfg.embed_dim = rec.embed_dim;
  cfg.cross_layers = rec.cross_layers;
  cfg.mlp_dims = rec.mlp_dims;
  cfg.dropout = rec.dropout;
  cfg.lr = rec.lr;
  cfg.batch_size = rec.batch_size;
  cfg.epochs = rec.epochs;
  cfg.patience = rec.patience;
  cfg.logit_clip = rec.logit_clip;
  return cfg;
}

// ---------------------------------------------------------------------------
// Manifests and upstream validation
// ---------------------------------------------------------------------------

namespace artifact {
std::string dcn_ckpt(RecVariant variant) {
  return std::string("dcn_") + variant_name(variant) + ".ckpt";
}
std::string manifest(const std::string& stage) { return "manifest_" + stage + ".json"; }
}  // namespace artifact

namespace {

// which stage produces which artifact
std::string producer_of(const std::string& file) {
  if (file == artifact::dataset || file == artifact::idmap || file == artifact::split ||
      file == artifact::planted)
    return "gen-data";
  if (file == artifact::vocab || file == artifact::lm_ckpt) return "train-lm";
  if (file == artifact::theta_ckpt || file == artifact::codebook_ckpt) return "infer";
  if (file == artifact::bank_file) return "build-bank";
  if (file.rfind("dcn_", 0) == 0) {
    std::string variant = file.substr(4, file.size() - 4 - 5);
    return "train-rec-" + variant;
  }
  raise(Errc::artifact, "no producing stage known for " + file);
}

void write_manifest(const fs::path& out, const std::string& stage, const RunConfig& cfg,
                    const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                    const json& extra = json::object()) {
  json m;
  m["stage"] = stage;
  m["seed"] = cfg.seed;
  m["config_hash"] = cfg.config_hash();
  json in = json::object(), outj = json::object();
  for (const auto& f : inputs) in[f] = hex32(file_crc32(out / f));
  for (const auto& f : outputs) outj[f] = hex32(file_crc32(out / f));
  m["inputs"] = in;
  m["outputs"] = outj;
  m["extra"] = extra;
  write_text_file_atomic(out / artifact::manifest(stage), m.dump(2) + "\n");
}

json load_manifest(const fs::path& out, const std::string& stage) {
  fs::path p = out / artifact::manifest(stage);
  if (!fs::exists(p))
    raise(Errc::artifact, "missing upstream stage '" + stage + "': " + p.string() + " not found");
  return json::parse(read_text_file(p));
}

// verify the file exists and still matches the producing stage's checksum
void require_artifact(const fs::path& out, const std::string& file) {
  std::string stage = producer_of(file);
  json m = load_manifest(out, stage);
  if (!fs::exists(out / file))
    raise(Errc::artifact, "missing artifact " + file + " from upstream stage '" + stage + "'");
  auto recorded = m.at("outputs").value(file, std::string());
  if (recorded.empty())
    raise(Errc::artifact, "upstream stage '" + stage + "' did not record " + file);
  std::string current = hex32(file_crc32(out / file));
  if (current != recorded)
    raise(Errc::artifact, "checksum mismatch for " + file + " against stage '" + stage +
                              "' (expected " + recorded + ", found " + current + ")");
}

void write_resolved_config(const RunConfig& cfg, const fs::path& out) {
  fs::create_directories(out);
  write_text_file_atomic(out / artifact::resolved_config, cfg.to_json_text());
}

std::string run_id_of(const RunConfig& cfg) {
  return cfg.config_hash() + "-" + std::to_string(cfg.seed);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

Dataset load_prepared_dataset(const fs::path& out) {
  require_artifact(out, artifact::dataset);
  require_artifact(out, artifact::split);
  Dataset data = load_dataset(out / artifact::dataset);
  load_split(out / artifact::split, data);
  return data;
}

std::vector<std::string> lm_task_words(const PromptTemplate& tmpl) { return tmpl.task_words; }

struct LoadedProfiles {
  std::map<uint32_t, SoftProfileSet> profiles;
  uint64_t seed = 0;
};

LoadedProfiles load_theta(const fs::path& out) {
  require_artifact(out, artifact::theta_ckpt);
  ProfilesFile file = load_profiles(out / artifact::theta_ckpt);
  return {std::move(file.profiles), file.seed};
}

}  // namespace

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

StageResult run_gen_data(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  write_resolved_config(cfg, out);
  Dataset data;
  std::vector<std::string> outputs;
  if (!cfg.data.ingest_path.empty()) {
    IngestResult ingest = ingest_reviews(cfg.data.ingest_path);
    data = std::move(ingest.dataset);
    save_idmap(out / artifact::idmap, ingest);
    outputs.push_back(artifact::idmap);
  } else {
    auto spec = make_planted_spec(cfg.data.n_categories, cfg.data.class_counts, cfg.data.n_items,
                                  cfg.data.zipf_exponent, cfg.seed);
    spec.seq_len = cfg.data.seq_len;
    spec.mix_own = cfg.data.mix_own;
    spec.rating_boost = cfg.data.rating_boost;
    spec.sigma_match = cfg.data.sigma_match;
    spec.sigma_nonmatch = cfg.data.sigma_nonmatch;
    data = generate_synthetic(spec, cfg.data.n_users, cfg.data.n_items, cfg.seed);
  }
  data = filter_cold(data, cfg.data.min_interactions);
  data = split_dataset(data, cfg.data.split_ratios, mix_seed(cfg.seed, 0x59717));

  save_dataset(out / artifact::dataset, data);
  save_split(out / artifact::split, data);
  outputs.push_back(artifact::dataset);
  outputs.push_back(artifact::split);
  if (data.has_planted()) {
    save_planted(out / artifact::planted, data);
    outputs.push_back(artifact::planted);
  }
  write_manifest(out, "gen-data", cfg, {}, outputs,
                 json{{"records", data.records.size()}, {"users", data.active_users().size()}});
  return {"gen-data", outputs};
}

StageResult run_train_lm(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  write_resolved_config(cfg, out);
  Dataset data = load_prepared_dataset(out);
  PromptTemplate tmpl = cfg.prompt_template();
  Vocab vocab = Vocab::build(static_cast<int>(data.n_items), tmpl.profile_names, tmpl.task_words);

  LMConfig lm_cfg;
  lm_cfg.embed_dim = cfg.lm.embed_dim;
  lm_cfg.n_layers = cfg.lm.n_layers;
  lm_cfg.n_heads = cfg.lm.n_heads;
  lm_cfg.context_len = cfg.lm.context_len;
  lm_cfg.vocab_size = vocab.size();
  lm_cfg.dropout = cfg.lm.dropout;

  LMTrainConfig train_cfg;
  train_cfg.epochs = cfg.lm.epochs;
  train_cfg.lr = cfg.lm.lr;
  train_cfg.batch_size = cfg.lm.batch_size;
  train_cfg.task_words = lm_task_words(tmpl);

  LMTrainReport report;
  LMParams params = train_lm(data, vocab, lm_cfg, train_cfg, mix_seed(cfg.seed, 0x7711), &report);

  vocab.save(out / artifact::vocab);
  json meta{{"seed", mix_seed(cfg.seed, 0x7711)},
            {"dataset_crc", hex32(file_crc32(out / artifact::dataset))},
            {"initial_loss", report.initial_loss},
            {"final_loss", report.epoch_loss.back()},
            {"truncated_sequences", report.truncated_sequences}};
  params.save(out / artifact::lm_ckpt, meta.dump());
  write_manifest(out, "train-lm", cfg, {artifact::dataset, artifact::split},
                 {artifact::vocab, artifact::lm_ckpt}, meta);
  return {"train-lm", {artifact::vocab, artifact::lm_ckpt}};
}

InferStageResult run_infer(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  write_resolved_config(cfg, out);
  Dataset data = load_prepared_dataset(out);
  require_artifact(out, artifact::vocab);
  require_artifact(out, artifact::lm_ckpt);
  Vocab vocab = Vocab::load(out / artifact::vocab);
  LMParams params = LMParams::load(out / artifact::lm_ckpt);
  PromptTemplate tmpl = cfg.prompt_template();

  InferConfig icfg;
  icfg.epochs = cfg.infer.epochs;
  icfg.lr = cfg.infer.lr;
  icfg.batch_users = cfg.infer.batch_users;
  icfg.patience = cfg.infer.patience;
  icfg.min_delta = cfg.infer.min_delta;
  icfg.init_sigma = cfg.infer.init_sigma;
  icfg.seed = mix_seed(cfg.seed, 0x1F43);
  icfg.threads = cfg.threads;

  std::unique_ptr<CodebookTrainer> trainer;
  if (cfg.infer.joint_vq) {
    QuantTrainConfig qcfg;
    qcfg.code_counts = cfg.quant.code_counts;
    qcfg.alpha = cfg.quant.alpha;
    qcfg.beta = cfg.quant.beta;
    qcfg.codebook_lr = cfg.quant.codebook_lr;
    qcfg.surrogate.item_embed_dim = cfg.quant.surrogate_item_dim;
    qcfg.surrogate.hidden = cfg.quant.surrogate_hidden;
    qcfg.seed = mix_seed(cfg.seed, 0x9B00C);
    std::vector<int> profile_dims;
    for (int s : cfg.infer.slot_widths) profile_dims.push_back(s * cfg.lm.embed_dim);
    trainer = std::make_unique<CodebookTrainer>(data, static_cast<int>(data.n_items), profile_dims, qcfg);
  }

  InferResult result = infer_profiles(data, params, vocab, tmpl, icfg, trainer.get());

  std::vector<std::string> outputs{artifact::theta_ckpt};
  if (trainer) {
    std::vector<uint32_t> users;
    for (const auto& [u, _] : result.profiles) users.push_back(u);
    auto theta_of = [&result](uint32_t u) -> const std::vector<Tensor>& {
      return result.profiles.at(u).theta;
    };
    if (cfg.quant.consolidate) trainer->consolidate(users, theta_of);
    json cb_meta{{"seed", mix_seed(cfg.seed, 0x9B00C)},
                 {"lm_crc", hex32(params.checksum())},
                 {"alpha", cfg.quant.alpha},
                 {"beta", cfg.quant.beta}};
    trainer->book().save(out / artifact::codebook_ckpt, cb_meta.dump());
    outputs.push_back(artifact::codebook_ckpt);
  }
  json theta_meta{{"lm_crc", hex32(params.checksum())},
                  {"dataset_crc", hex32(file_crc32(out / artifact::dataset))},
                  {"epochs_run", result.epochs_run},
                  {"joint_vq", cfg.infer.joint_vq}};
  save_profiles(out / artifact::theta_ckpt, result.profiles, tmpl, cfg.lm.embed_dim, icfg.seed,
                theta_meta.dump());

  json extra{{"epochs_run", result.epochs_run},
             {"final_loss", result.epoch_mean_loss.back()},
             {"lm_checksum_before", result.lm_checksum_before},
             {"lm_checksum_after", result.lm_checksum_after},
             {"truncated_prompts", result.truncated_prompts}};
  write_manifest(out, "infer", cfg,
                 {artifact::dataset, artifact::split, artifact::vocab, artifact::lm_ckpt}, outputs,
                 extra);

  InferStageResult stage;
  stage.stage = "infer";
  stage.outputs = outputs;
  stage.epochs_run = result.epochs_run;
  stage.final_loss = result.epoch_mean_loss.back();
  stage.lm_checksum_before = result.lm_checksum_before;
  stage.lm_checksum_after = result.lm_checksum_after;
  return stage;
}

BankStageResult run_build_bank(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  write_resolved_config(cfg, out);
  LoadedProfiles theta = load_theta(out);
  require_artifact(out, artifact::codebook_ckpt);
  Codebook book = Codebook::load(out / artifact::codebook_ckpt);

  auto result = assign_all(theta.profiles, book);

  BankMeta meta;
  meta.n_profiles = book.n_profiles();
  for (int m = 0; m < book.n_profiles(); ++m) meta.code_counts.push_back(book.code_count(m));
  meta.theta_checksum = hex32(file_crc32(out / artifact::theta_ckpt));
  meta.codebook_checksum = hex32(file_crc32(out / artifact::codebook_ckpt));
  write_bank(out / artifact::bank_file, result.assignment, meta);

  json dead = json::array();
  for (auto [m, c] : result.dead_codes) dead.push_back({{"profile", m}, {"code", c}});
  write_manifest(out, "build-bank", cfg, {artifact::theta_ckpt, artifact::codebook_ckpt},
                 {artifact::bank_file}, json{{"users", result.assignment.users.size()}, {"dead_codes", dead}});

  BankStageResult stage;
  stage.stage = "build-bank";
  stage.outputs = {artifact::bank_file};
  stage.users = result.assignment.users.size();
  stage.dead_codes = result.dead_codes;
  return stage;
}

namespace {

// bank header checksums must match the checkpoints that produced it
FeatureBank load_validated_bank(const fs::path& out) {
  require_artifact(out, artifact::bank_file);
  FeatureBank bank = read_bank(out / artifact::bank_file);
  std::string theta_crc = hex32(file_crc32(out / artifact::theta_ckpt));
  std::string book_crc = hex32(file_crc32(out / artifact::codebook_ckpt));
  if (bank.meta().theta_checksum != theta_crc || bank.meta().codebook_checksum != book_crc)
    raise(Errc::artifact, "feature bank header checksums do not match the current checkpoints");
  return bank;
}

}  // namespace

RecStageResult run_train_rec(const RunConfig& cfg, const fs::path& out, RecVariant variant) {
  cfg.validate();
  write_resolved_config(cfg, out);
  Dataset data = load_prepared_dataset(out);
  DCNConfig dcn_cfg = cfg.dcn_config();

  std::optional<FeatureBank> bank;
  std::map<uint32_t, SoftProfileSet> profiles;
  if (variant == RecVariant::with_bank) bank = load_validated_bank(out);
  if (variant == RecVariant::raw_theta) profiles = load_theta(out).profiles;

  RecTrainReport report;
  DCNModel model = train_rec(data, dcn_cfg, variant, bank ? &*bank : nullptr,
                             profiles.empty() ? nullptr : &profiles,
                             mix_seed(cfg.seed, 0x3EC0 + static_cast<uint64_t>(variant)), &report);

  std::string ckpt = artifact::dcn_ckpt(variant);
  json meta{{"variant", variant_name(variant)},
            {"best_epoch", report.best_epoch},
            {"best_valid_auc", report.best_valid_auc}};
  model.save(out / ckpt, meta.dump());

  std::vector<std::string> inputs{artifact::dataset, artifact::split};
  if (variant == RecVariant::with_bank) inputs.push_back(artifact::bank_file);
  if (variant == RecVariant::raw_theta) inputs.push_back(artifact::theta_ckpt);
  write_manifest(out, "train-rec-" + std::string(variant_name(variant)), cfg, inputs, {ckpt}, meta);

  RecStageResult stage;
  stage.stage = "train-rec-" + std::string(variant_name(variant));
  stage.outputs = {ckpt};
  stage.best_valid_auc = report.best_valid_auc;
  return stage;
}

EvalStageResult run_eval(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  write_resolved_config(cfg, out);
  Dataset data = load_prepared_dataset(out);

  EvalStageResult stage;
  stage.stage = "eval";
  std::string run_id = run_id_of(cfg);
  std::ostringstream metrics;
  metrics << "run_id,variant,fold,auc,logloss,seed,config_hash\n";

  std::map<std::string, std::map<std::string, EvalRow>> by_variant_fold;
  std::vector<std::string> inputs{artifact::dataset, artifact::split};

  for (RecVariant variant : {RecVariant::with_bank, RecVariant::id_only, RecVariant::raw_theta}) {
    fs::path ckpt = out / artifact::dcn_ckpt(variant);
    if (!fs::exists(ckpt)) continue;
    require_artifact(out, artifact::dcn_ckpt(variant));
    inputs.push_back(artifact::dcn_ckpt(variant));
    DCNModel model = DCNModel::load(ckpt);

    std::optional<FeatureBank> bank;
    std::map<uint32_t, SoftProfileSet> profiles;
    if (variant == RecVariant::with_bank) bank = load_validated_bank(out);
    if (variant == RecVariant::raw_theta) profiles = load_theta(out).profiles;

    for (Fold fold : {Fold::valid, Fold::test}) {
      auto examples = build_examples(data, fold, variant, bank ? &*bank : nullptr,
                                     profiles.empty() ? nullptr : &profiles);
      if (examples.empty()) continue;
      std::vector<int> labels;
      labels.reserve(examples.size());
      for (const auto& ex : examples) labels.push_back(ex.label);
      auto scores = predict_batch(model, examples);
      EvalRow row;
      row.variant = variant_name(variant);
      row.fold = fold_name(fold);
      row.auc_value = auc(scores, labels);
      row.logloss_value = logloss(scores, labels);
      stage.rows.push_back(row);
      by_variant_fold[row.variant][row.fold] = row;
      metrics << run_id << "," << row.variant << "," << row.fold << "," << fmt(row.auc_value) << ","
              << fmt(row.logloss_value) << "," << cfg.seed << "," << cfg.config_hash() << "\n";
    }
  }
  if (stage.rows.empty()) raise(Errc::artifact, "eval: no trained recommender checkpoints found");
  write_text_file_atomic(out / artifact::metrics_csv, metrics.str());
  stage.outputs.push_back(artifact::metrics_csv);

  // improvement report against the id-only baseline on the test fold
  if (by_variant_fold.count("id_only") && by_variant_fold["id_only"].count("test")) {
    std::ostringstream improvement;
    improvement << "run_id,variant,base_variant,auc_improv_pct,logloss_improv_pct,seed,config_hash\n";
    const auto& base = by_variant_fold["id_only"]["test"];
    for (const auto& [variant, folds] : by_variant_fold) {
      if (variant == "id_only" || !folds.count("test")) continue;
      const auto& row = folds.at("test");
      auto improv = relative_improvement(row.auc_value, base.auc_value, row.logloss_value,
                                         base.logloss_value);
      improvement << run_id << "," << variant << ",id_only," << fmt(improv.auc_pct) << ","
                  << fmt(improv.logloss_pct) << "," << cfg.seed << "," << cfg.config_hash() << "\n";
    }
    write_text_file_atomic(out / artifact::improvement_csv, improvement.str());
    stage.outputs.push_back(artifact::improvement_csv);
  }
  write_manifest(out, "eval", cfg, inputs, stage.outputs);
  return stage;
}

AblateStageResult run_ablate(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  write_resolved_config(cfg, out);
  // with-VQ: bank indices; without-VQ: raw theta pass-through
  if (!fs::exists(out / artifact::dcn_ckpt(RecVariant::with_bank)))
    run_train_rec(cfg, out, RecVariant::with_bank);
  if (!fs::exists(out / artifact::dcn_ckpt(RecVariant::raw_theta)))
    run_train_rec(cfg, out, RecVariant::raw_theta);

  Dataset data = load_prepared_dataset(out);
  std::string data_crc = hex32(file_crc32(out / artifact::dataset));

  AblateStageResult stage;
  stage.stage = "ablate";
  std::ostringstream csv;
  csv << "run_id,variant,fold,auc,logloss,data_checksum,seed,config_hash\n";
  for (RecVariant variant : {RecVariant::with_bank, RecVariant::raw_theta}) {
    DCNModel model = DCNModel::load(out / artifact::dcn_ckpt(variant));
    std::optional<FeatureBank> bank;
    std::map<uint32_t, SoftProfileSet> profiles;
    if (variant == RecVariant::with_bank) bank = load_validated_bank(out);
    if (variant == RecVariant::raw_theta) profiles = load_theta(out).profiles;
    auto examples = build_examples(data, Fold::test, variant, bank ? &*bank : nullptr,
                                   profiles.empty() ? nullptr : &profiles);
    std::vector<int> labels;
    for (const auto& ex : examples) labels.push_back(ex.label);
    auto scores = predict_batch(model, examples);
    double a = auc(scores, labels);
    if (variant == RecVariant::with_bank)
      stage.auc_with_vq = a;
    else
      stage.auc_without_vq = a;
    csv << run_id_of(cfg) << "," << variant_name(variant) << ",test," << fmt(a) << ","
        << fmt(logloss(scores, labels)) << "," << data_crc << "," << cfg.seed << ","
        << cfg.config_hash() << "\n";
  }
  write_text_file_atomic(out / artifact::ablation_csv, csv.str());
  stage.outputs = {artifact::ablation_csv};
  write_manifest(out, "ablate", cfg,
                 {artifact::dcn_ckpt(RecVariant::with_bank), artifact::dcn_ckpt(RecVariant::raw_theta)},
                 stage.outputs);
  return stage;
}

RecoveryScore score_recovery(const Dataset& data, const FeatureBank& bank) {
  if (!data.has_planted()) raise(Errc::config, "score_recovery: dataset has no planted truth");
  const auto& classes = data.planted_classes_for_eval();
  const auto& counts = data.planted_class_counts;
  std::vector<int> cluster_labels, truth_labels;
  for (uint32_t u : data.active_users()) {
    auto codes = bank.lookup(u);
    if (!codes) continue;
    int cluster = 0, truth = 0;
    for (size_t m = 0; m < codes->size(); ++m) {
      cluster = cluster * bank.meta().code_counts[m] + (*codes)[m];
      truth = truth * counts[m] + classes[u][m];
    }
    cluster_labels.push_back(cluster);
    truth_labels.push_back(truth);
  }
  RecoveryScore score;
  score.purity_joint = purity(cluster_labels, truth_labels);
  score.ari_joint = adjusted_rand_index(cluster_labels, truth_labels);
  return score;
}

SweepStageResult run_sweep_codebook(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  write_resolved_config(cfg, out);
  // shared upstream: dataset + LM stay fixed across codebook sizes
  require_artifact(out, artifact::dataset);
  require_artifact(out, artifact::lm_ckpt);

  SweepStageResult stage;
  stage.stage = "sweep-codebook";
  std::ostringstream csv;
  csv << "run_id,k1,auc,logloss,purity_joint,seed,config_hash\n";

  Dataset data = load_prepared_dataset(out);
  bool planted = fs::exists(out / artifact::planted);
  if (planted) load_planted(out / artifact::planted, data);

  for (int k1 : cfg.sweep.k1_values) {
    RunConfig sub = cfg;
    sub.quant.code_counts[0] = k1;
    fs::path sub_out = out / ("sweep_k" + std::to_string(k1));
    fs::create_directories(sub_out);
    for (const char* f : {artifact::dataset, artifact::split, artifact::planted, artifact::vocab,
                          artifact::lm_ckpt}) {
      if (fs::exists(out / f)) fs::copy_file(out / f, sub_out / f, fs::copy_options::overwrite_existing);
    }
    for (const char* s : {"gen-data", "train-lm"}) {
      fs::path m = out / artifact::manifest(s);
      if (fs::exists(m))
        fs::copy_file(m, sub_out / artifact::manifest(s), fs::copy_options::overwrite_existing);
    }
    run_infer(sub, sub_out);
    run_build_bank(sub, sub_out);
    run_train_rec(sub, sub_out, RecVariant::with_bank);

    DCNModel model = DCNModel::load(sub_out / artifact::dcn_ckpt(RecVariant::with_bank));
    FeatureBank bank = read_bank(sub_out / artifact::bank_file);
    auto examples = build_examples(data, Fold::test, RecVariant::with_bank, &bank, nullptr);
    std::vector<int> labels;
    for (const auto& ex : examples) labels.push_back(ex.label);
    auto scores = predict_batch(model, examples);

    SweepRow row;
    row.k1 = k1;
    row.auc_value = auc(scores, labels);
    row.logloss_value = logloss(scores, labels);
    if (planted) row.purity_joint = score_recovery(data, bank).purity_joint;
    stage.rows.push_back(row);
    csv << run_id_of(cfg) << "," << k1 << "," << fmt(row.auc_value) << "," << fmt(row.logloss_value)
        << "," << fmt(row.purity_joint) << "," << cfg.seed << "," << cfg.config_hash() << "\n";
  }
  write_text_file_atomic(out / artifact::sweep_csv, csv.str());
  stage.outputs = {artifact::sweep_csv};
  write_manifest(out, "sweep-codebook", cfg, {artifact::dataset, artifact::lm_ckpt}, stage.outputs);
  return stage;
}

CaseStudyResult run_case_study(const RunConfig& cfg, const fs::path& out, int max_users) {
  cfg.validate();
  write_resolved_config(cfg, out);
  Dataset data = load_prepared_dataset(out);
  require_artifact(out, artifact::vocab);
  require_artifact(out, artifact::lm_ckpt);
  Vocab vocab = Vocab::load(out / artifact::vocab);
  LMParams params = LMParams::load(out / artifact::lm_ckpt);
  PromptTemplate tmpl = cfg.prompt_template();
  LoadedProfiles trained = load_theta(out);

  CaseStudyResult stage;
  stage.stage = "case-study";
  std::ostringstream csv;
  csv << "user,profile_index,position,token,segment,stage,weight,seed,config_hash\n";
  auto segment_name = [](Segment s) {
    switch (s) {
      case Segment::name: return "name";
      case Segment::soft: return "soft";
      case Segment::delim: return "delim";
      case Segment::task: return "task";
      case Segment::target: return "target";
    }
    return "?";
  };

  std::optional<Fold> fold = data.split.empty() ? std::nullopt : std::make_optional(Fold::train);
  long increased = 0, counted = 0;
  int processed = 0;
  for (const auto& [user, trained_set] : trained.profiles) {
    if (max_users > 0 && processed >= max_users) break;
    auto behavior = data.user_item_sequence(user, fold);
    if (behavior.empty()) continue;
    ++processed;

    SoftProfileSet before = init_soft_profiles(params, tmpl, user, trained.seed, cfg.infer.init_sigma);
    auto rows_before = export_attention(params, vocab, tmpl, before, behavior, "before");
    auto rows_after = export_attention(params, vocab, tmpl, trained_set, behavior, "after");
    for (const auto& rows : {rows_before, rows_after})
      for (const auto& r : rows)
        csv << r.user << "," << r.profile << "," << r.position << "," << r.token << ","
            << segment_name(r.segment) << "," << r.stage << "," << fmt(r.weight) << "," << cfg.seed
            << "," << cfg.config_hash() << "\n";

    auto mean_before = mean_target_attention(rows_before, tmpl.n_profiles());
    auto mean_after = mean_target_attention(rows_after, tmpl.n_profiles());
    double b = 0.0, a = 0.0;
    for (int m = 0; m < tmpl.n_profiles(); ++m) {
      b += mean_before[static_cast<size_t>(m)];
      a += mean_after[static_cast<size_t>(m)];
    }
    b /= tmpl.n_profiles();
    a /= tmpl.n_profiles();
    stage.per_user_mean.push_back({b, a});
    ++counted;
    increased += a > b;
  }
  if (counted == 0) raise(Errc::artifact, "case-study: no users with behavior and trained theta");
  stage.fraction_increased = static_cast<double>(increased) / static_cast<double>(counted);

  write_text_file_atomic(out / artifact::attention_csv, csv.str());
  std::ostringstream summary;
  summary << "users,fraction_increased,seed,config_hash\n";
  summary << counted << "," << fmt(stage.fraction_increased) << "," << cfg.seed << ","
          << cfg.config_hash() << "\n";
  write_text_file_atomic(out / artifact::case_summary_csv, summary.str());
  stage.outputs = {artifact::attention_csv, artifact::case_summary_csv};
  write_manifest(out, "case-study", cfg,
                 {artifact::dataset, artifact::vocab, artifact::lm_ckpt, artifact::theta_ckpt},
                 stage.outputs);
  return stage;
}

BayesStageResult run_verify_bayes(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  write_resolved_config(cfg, out);
  ConceptModel model = ConceptModel::bernoulli_pair(cfg.bayes.p_star, cfg.bayes.p_alt);
  auto report = predictor_agreement(model, cfg.bayes.m_values, cfg.bayes.trials,
                                    mix_seed(cfg.seed, 0xBAE5));

  std::ostringstream csv;
  csv << "m,concept,median_exp_mr,posterior_mass,agreement,seed,config_hash\n";
  for (const auto& p : report.points)
    csv << p.m << "," << p.concept_id << "," << fmt(p.median_exp_mr) << ","
        << fmt(p.posterior_mass_true) << "," << fmt(p.agreement) << "," << cfg.seed << ","
        << cfg.config_hash() << "\n";
  write_text_file_atomic(out / artifact::concentration_csv, csv.str());

  BayesStageResult stage;
  stage.stage = "verify-bayes";
  stage.outputs = {artifact::concentration_csv};
  stage.report = std::move(report);
  write_manifest(out, "verify-bayes", cfg, {}, stage.outputs);
  return stage;
}

}  // namespace userip

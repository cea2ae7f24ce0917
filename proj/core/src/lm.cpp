#include "userip/lm.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "userip/optim.hpp"

namespace userip {

// ---------------------------------------------------------------------------
// Vocab
// ---------------------------------------------------------------------------

int Vocab::id_of(const std::string& s) const {
  auto it = ids.find(s);
  if (it == ids.end()) raise(Errc::config, "vocab: unknown symbol '" + s + "'");
  return it->second;
}

const std::string& Vocab::symbol_of(int id) const {
  if (id < 0 || id >= size()) raise(Errc::config, "vocab: id " + std::to_string(id) + " out of range");
  return symbols[static_cast<size_t>(id)];
}

int Vocab::item_token(int item) const {
  if (item < 0 || item >= n_items)
    raise(Errc::config, "vocab: item " + std::to_string(item) + " out of range");
  return item_base + item;
}

Vocab Vocab::build(int n_items, const std::vector<std::vector<std::string>>& profile_names,
                   const std::vector<std::string>& task_words) {
  Vocab v;
  auto add = [&v](const std::string& s) {
    auto it = v.ids.find(s);
    if (it != v.ids.end()) return it->second;
    int id = v.size();
    v.ids.emplace(s, id);
    v.symbols.push_back(s);
    return id;
  };
  v.pad = add("<pad>");
  v.bos = add("<bos>");
  v.eos = add("<eos>");
  v.del = add("<del>");
  for (const auto& name : profile_names)
    for (const auto& w : name) add(w);
  for (const auto& w : task_words) add(w);
  v.item_base = v.size();
  v.n_items = n_items;
  for (int i = 0; i < n_items; ++i) add("item_" + std::to_string(i));
  return v;
}

void Vocab::save(const std::filesystem::path& p) const {
  std::ostringstream os;
  os << "#uip-vocab v1\n";
  os << "#items " << n_items << " item_base " << item_base << "\n";
  for (int i = 0; i < size(); ++i) os << i << "\t" << symbols[static_cast<size_t>(i)] << "\n";
  write_text_file_atomic(p, os.str());
}

Vocab Vocab::load(const std::filesystem::path& p) {
  std::string text = read_text_file(p);
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != "#uip-vocab v1")
    raise(Errc::artifact, p.string() + ": missing vocab header");
  Vocab v;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string k1, k2;
      hs >> k1 >> v.n_items >> k2 >> v.item_base;
      continue;
    }
    std::istringstream ls(line);
    int id;
    std::string sym;
    if (!(ls >> id >> sym)) raise(Errc::artifact, p.string() + ": malformed vocab line");
    if (id != v.size()) raise(Errc::artifact, p.string() + ": vocab ids not dense");
    v.ids.emplace(sym, id);
    v.symbols.push_back(sym);
  }
  v.pad = v.id_of("<pad>");
  v.bos = v.id_of("<bos>");
  v.eos = v.id_of("<eos>");
  v.del = v.id_of("<del>");
  return v;
}

// ---------------------------------------------------------------------------
// Config and params
// ---------------------------------------------------------------------------

void LMConfig::validate() const {
  if (embed_dim < 1 || n_layers < 1 || n_heads < 1 || context_len < 2 || vocab_size < 2)
    raise(Errc::config, "lm config: non-positive dimension");
  if (embed_dim % n_heads != 0) raise(Errc::config, "lm config: embed_dim not divisible by n_heads");
  if (dropout < 0.0 || dropout >= 1.0) raise(Errc::config, "lm config: dropout outside [0,1)");
}

std::string LMConfig::to_json() const {
  nlohmann::json j{{"embed_dim", embed_dim}, {"n_layers", n_layers},   {"n_heads", n_heads},
                   {"context_len", context_len}, {"vocab_size", vocab_size}, {"dropout", dropout}};
  return j.dump();
}

LMConfig LMConfig::from_json(const std::string& s) {
  auto j = nlohmann::json::parse(s);
  LMConfig c;
  c.embed_dim = j.at("embed_dim").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.context_len = j.at("context_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.dropout = j.at("dropout").get<double>();
  return c;
}

LMParams LMParams::init(const LMConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(mix_seed(seed, 0x11AA));
  const double sigma = 0.02;
  int d = cfg.embed_dim;
  LMParams p;
  p.cfg = cfg;
  p.token_embedding = Tensor::randn({cfg.vocab_size, d}, rng, 0.0, sigma, true);
  p.pos_embedding = Tensor::randn({cfg.context_len, d}, rng, 0.0, sigma, true);
  p.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (auto& layer : p.layers) {
    layer.ln1_gain = Tensor::full({d}, 1.0, true);
    layer.ln1_bias = Tensor::zeros({d}, true);
    layer.wq = Tensor::randn({d, d}, rng, 0.0, sigma, true);
    layer.wk = Tensor::randn({d, d}, rng, 0.0, sigma, true);
    layer.wv = Tensor::randn({d, d}, rng, 0.0, sigma, true);
    layer.wo = Tensor::randn({d, d}, rng, 0.0, sigma, true);
    layer.bq = Tensor::zeros({d}, true);
    layer.bk = Tensor::zeros({d}, true);
    layer.bv = Tensor::zeros({d}, true);
    layer.bo = Tensor::zeros({d}, true);
    layer.ln2_gain = Tensor::full({d}, 1.0, true);
    layer.ln2_bias = Tensor::zeros({d}, true);
    layer.mlp_w1 = Tensor::randn({d, 4 * d}, rng, 0.0, sigma, true);
    layer.mlp_b1 = Tensor::zeros({4 * d}, true);
    layer.mlp_w2 = Tensor::randn({4 * d, d}, rng, 0.0, sigma, true);
    layer.mlp_b2 = Tensor::zeros({d}, true);
  }
  p.final_gain = Tensor::full({d}, 1.0, true);
  p.final_bias = Tensor::zeros({d}, true);
  return p;
}

std::vector<Tensor> LMParams::all_params() const {
  std::vector<Tensor> out{token_embedding, pos_embedding};
  for (const auto& l : layers) {
    for (const auto& t : {l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo,
                          l.ln2_gain, l.ln2_bias, l.mlp_w1, l.mlp_b1, l.mlp_w2, l.mlp_b2})
      out.push_back(t);
  }
  out.push_back(final_gain);
  out.push_back(final_bias);
  return out;
}

void LMParams::freeze_all() {
  for (auto& t : all_params()) t.freeze();
  frozen = true;
}

uint32_t LMParams::checksum() const {
  uint32_t c = 0;
  for (const auto& t : all_params()) {
    auto v = t.values();
    c = crc32({reinterpret_cast<const unsigned char*>(v.data()), v.size() * sizeof(double)}, c);
  }
  return c;
}

namespace {

const std::vector<std::string>& block_names() {
  static const std::vector<std::string> names{"ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk",
                                              "wv", "bv", "wo", "bo", "ln2_gain", "ln2_bias",
                                              "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2"};
  return names;
}

TensorBlock to_block(const std::string& name, const Tensor& t) {
  return {name, t.shape(), {t.values().begin(), t.values().end()}};
}

}  // namespace

void LMParams::save(const std::filesystem::path& p, const std::string& extra_meta_json) const {
  CheckpointData data;
  data.kind = "lm";
  nlohmann::json meta = extra_meta_json.empty() ? nlohmann::json::object()
                                                : nlohmann::json::parse(extra_meta_json);
  meta["config"] = nlohmann::json::parse(cfg.to_json());
  data.meta_json = meta.dump();
  data.blocks.push_back(to_block("token_embedding", token_embedding));
  data.blocks.push_back(to_block("pos_embedding", pos_embedding));
  for (size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const Tensor tensors[] = {l.ln1_gain, l.ln1_bias, l.wq, l.bq, l.wk, l.bk, l.wv, l.bv,
                              l.wo, l.bo, l.ln2_gain, l.ln2_bias, l.mlp_w1, l.mlp_b1, l.mlp_w2, l.mlp_b2};
    for (size_t k = 0; k < block_names().size(); ++k)
      data.blocks.push_back(to_block("layer" + std::to_string(i) + "." + block_names()[k], tensors[k]));
  }
  data.blocks.push_back(to_block("final_gain", final_gain));
  data.blocks.push_back(to_block("final_bias", final_bias));
  save_checkpoint(p, data);
}

LMParams LMParams::load(const std::filesystem::path& p) {
  CheckpointData data = load_checkpoint(p, "lm");
  auto meta = nlohmann::json::parse(data.meta_json);
  LMConfig cfg = LMConfig::from_json(meta.at("config").dump());
  cfg.validate();

  std::unordered_map<std::string, TensorBlock*> by_name;
  for (auto& b : data.blocks) by_name[b.name] = &b;
  auto take = [&by_name, &p](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) raise(Errc::artifact, p.string() + ": missing block " + name);
    return Tensor::from_values(it->second->shape, std::move(it->second->values), true);
  };

  LMParams params;
  params.cfg = cfg;
  params.token_embedding = take("token_embedding");
  params.pos_embedding = take("pos_embedding");
  params.layers.resize(static_cast<size_t>(cfg.n_layers));
  for (size_t i = 0; i < params.layers.size(); ++i) {
    auto& l = params.layers[i];
    std::string prefix = "layer" + std::to_string(i) + ".";
    Tensor* slots[] = {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv,
                       &l.wo, &l.bo, &l.ln2_gain, &l.ln2_bias, &l.mlp_w1, &l.mlp_b1, &l.mlp_w2, &l.mlp_b2};
    for (size_t k = 0; k < block_names().size(); ++k) *slots[k] = take(prefix + block_names()[k]);
  }
  params.final_gain = take("final_gain");
  params.final_bias = take("final_bias");
  params.freeze_all();
  return params;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

Tensor lm_forward(const LMParams& params, const Tensor& inputs, const BoolMatrix& mask,
                  AttentionCapture* capture, double dropout_rate, Rng* dropout_rng) {
  if (inputs.rank() != 2 || inputs.dim(1) != params.cfg.embed_dim)
    raise(Errc::config, "lm_forward: inputs must be T x embed_dim");
  int t = inputs.dim(0);
  if (t > params.cfg.context_len) raise(Errc::config, "lm_forward: sequence exceeds context length");
  if (mask.rows != t || mask.cols != t) raise(Errc::config, "lm_forward: mask must be T x T");
  for (int i = 0; i < t; ++i)
    if (!mask.at(i, i)) raise(Errc::config, "lm_forward: every position must attend to itself");
  if (dropout_rate > 0.0 && dropout_rng == nullptr)
    raise(Errc::config, "lm_forward: dropout requires an rng");

  int heads = params.cfg.n_heads;
  int dh = params.cfg.head_dim();
  double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));

  if (capture) {
    capture->t = t;
    capture->weights.assign(static_cast<size_t>(params.cfg.n_layers), {});
  }

  Tensor x = inputs;
  for (size_t li = 0; li < params.layers.size(); ++li) {
    const auto& l = params.layers[li];
    Tensor h = layernorm(x, l.ln1_gain, l.ln1_bias);
    Tensor q = add_row_broadcast(matmul(h, l.wq), l.bq);
    Tensor k = add_row_broadcast(matmul(h, l.wk), l.bk);
    Tensor v = add_row_broadcast(matmul(h, l.wv), l.bv);
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int hd = 0; hd < heads; ++hd) {
      Tensor qh = slice(q, 1, hd * dh, dh);
      Tensor kh = slice(k, 1, hd * dh, dh);
      Tensor vh = slice(v, 1, hd * dh, dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), scale_factor);
      Tensor probs = masked_softmax(scores, mask);
      if (capture)
        capture->weights[li].push_back({probs.values().begin(), probs.values().end()});
      head_outs.push_back(matmul(probs, vh));
    }
    Tensor attn = heads == 1 ? head_outs[0] : concat(head_outs, 1);
    attn = add_row_broadcast(matmul(attn, l.wo), l.bo);
    if (dropout_rate > 0.0) attn = dropout(attn, dropout_rate, *dropout_rng);
    x = add(x, attn);

    Tensor h2 = layernorm(x, l.ln2_gain, l.ln2_bias);
    Tensor m1 = gelu(add_row_broadcast(matmul(h2, l.mlp_w1), l.mlp_b1));
    Tensor m2 = add_row_broadcast(matmul(m1, l.mlp_w2), l.mlp_b2);
    if (dropout_rate > 0.0) m2 = dropout(m2, dropout_rate, *dropout_rng);
    x = add(x, m2);
  }
  x = layernorm(x, params.final_gain, params.final_bias);
  return matmul(x, transpose(params.token_embedding));
}

Tensor lm_embed_tokens(const LMParams& params, std::span<const int> tokens) {
  int t = static_cast<int>(tokens.size());
  if (t > params.cfg.context_len) raise(Errc::config, "lm_embed_tokens: sequence exceeds context length");
  Tensor tok = select_rows(params.token_embedding, tokens);
  std::vector<int> positions(static_cast<size_t>(t));
  for (int i = 0; i < t; ++i) positions[static_cast<size_t>(i)] = i;
  Tensor pos = select_rows(params.pos_embedding, positions);
  return add(tok, pos);
}

Tensor lm_nll(const LMParams& params, const Tensor& inputs, const BoolMatrix& mask,
              std::span<const int> tokens, int span_start, int span_end,
              AttentionCapture* capture) {
  int t = inputs.dim(0);
  if (static_cast<int>(tokens.size()) != t)
    raise(Errc::config, "lm_nll: token list must cover every position");
  if (span_start < 1 || span_end > t || span_start >= span_end)
    raise(Errc::config, "lm_nll: empty or out-of-range target span");
  Tensor logits = lm_forward(params, inputs, mask, capture);
  // logits at position p score the token at p + 1
  std::vector<int> targets(static_cast<size_t>(t), 0);
  std::vector<uint8_t> active(static_cast<size_t>(t), 0);
  for (int p = 0; p < t; ++p) {
    int next = p + 1;
    if (next >= span_start && next < span_end && next < static_cast<int>(tokens.size())) {
      targets[static_cast<size_t>(p)] = tokens[static_cast<size_t>(next)];
      active[static_cast<size_t>(p)] = 1;
    }
  }
  return cross_entropy(logits, targets, active);
}

Tensor lm_nll_tokens(const LMParams& params, std::span<const int> tokens, int span_start,
                     int span_end) {
  Tensor inputs = lm_embed_tokens(params, tokens);
  BoolMatrix mask = BoolMatrix::lower_triangular(static_cast<int>(tokens.size()));
  return lm_nll(params, inputs, mask, tokens, span_start, span_end);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

std::vector<int> lm_training_sequence(const Vocab& vocab, const std::vector<std::string>& task_words,
                                      std::span<const int> items, int context_len,
                                      long* truncations) {
  std::vector<int> tokens;
  tokens.push_back(vocab.bos);
  for (const auto& w : task_words) tokens.push_back(vocab.id_of(w));
  int overhead = static_cast<int>(tokens.size()) + 1;  // + eos
  int max_items = context_len - overhead;
  if (max_items < 1) raise(Errc::config, "lm_training_sequence: context too small for the template");
  size_t start = 0;
  if (static_cast<int>(items.size()) > max_items) {
    start = items.size() - static_cast<size_t>(max_items);
    if (truncations) ++(*truncations);
  }
  for (size_t i = start; i < items.size(); ++i) tokens.push_back(vocab.item_token(items[i]));
  tokens.push_back(vocab.eos);
  return tokens;
}

LMParams train_lm(const Dataset& data, const Vocab& vocab, const LMConfig& cfg,
                  const LMTrainConfig& train_cfg, uint64_t seed, LMTrainReport* report) {
  if (data.records.empty()) raise(Errc::config, "train_lm: empty corpus");
  LMConfig effective = cfg;
  effective.vocab_size = vocab.size();
  effective.validate();

  std::optional<Fold> fold = data.split.empty() ? std::nullopt : std::make_optional(Fold::train);
  std::vector<std::vector<int>> sequences;
  long truncations = 0;
  for (uint32_t u : data.active_users()) {
    auto items = data.user_item_sequence(u, fold);
    if (items.empty()) continue;
    sequences.push_back(
        lm_training_sequence(vocab, train_cfg.task_words, items, effective.context_len, &truncations));
  }
  if (sequences.empty()) raise(Errc::config, "train_lm: no non-empty training sequences");

  LMParams params = LMParams::init(effective, seed);
  auto trainable = params.all_params();
  Adam opt(train_cfg.lr);
  Rng shuffle_rng(mix_seed(seed, 0x7741));
  Rng dropout_rng(mix_seed(seed, 0xD407));

  LMTrainReport local_report;
  double initial_loss = 0.0;
  {
    long count = 0;
    for (size_t i = 0; i < std::min<size_t>(sequences.size(), 8); ++i) {
      initial_loss += lm_nll_tokens(params, sequences[i], 1, static_cast<int>(sequences[i].size())).item();
      ++count;
    }
    initial_loss /= static_cast<double>(count);
  }
  local_report.initial_loss = initial_loss;
  local_report.truncated_sequences = truncations;

  std::vector<size_t> order(sequences.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    int in_batch = 0;
    for (size_t oi = 0; oi < order.size(); ++oi) {
      const auto& seq = sequences[order[oi]];
      {
        Tape tape;
        Tensor inputs = lm_embed_tokens(params, seq);
        BoolMatrix mask = BoolMatrix::lower_triangular(static_cast<int>(seq.size()));
        Tensor logits = lm_forward(params, inputs, mask, nullptr, effective.dropout,
                                   effective.dropout > 0 ? &dropout_rng : nullptr);
        std::vector<int> targets(seq.size(), 0);
        std::vector<uint8_t> active(seq.size(), 0);
        for (size_t p = 0; p + 1 < seq.size(); ++p) {
          targets[p] = seq[p + 1];
          active[p] = 1;
        }
        Tensor loss = cross_entropy(logits, targets, active);
        epoch_loss += loss.item();
        tape.backward(loss);
      }
      ++in_batch;
      if (in_batch == train_cfg.batch_size || oi + 1 == order.size()) {
        opt.step(trainable);
        in_batch = 0;
      }
    }
    epoch_loss /= static_cast<double>(sequences.size());
    local_report.epoch_loss.push_back(epoch_loss);
    if (!std::isfinite(epoch_loss) || epoch_loss > 10.0 * std::max(initial_loss, 1.0))
      raise(Errc::divergence, "train_lm: loss diverged at epoch " + std::to_string(epoch));
  }

  params.freeze_all();
  if (report) *report = local_report;
  return params;
}

double lm_eval_nll(const LMParams& params, const Vocab& vocab,
                   const std::vector<std::string>& task_words, const Dataset& data,
                   std::optional<Fold> fold, int skip_items) {
  double total = 0.0;
  long count = 0;
  long truncations = 0;
  for (uint32_t u : data.active_users()) {
    auto items = data.user_item_sequence(u, fold);
    if (static_cast<int>(items.size()) <= skip_items) continue;
    auto seq = lm_training_sequence(vocab, task_words, items, params.cfg.context_len, &truncations);
    int first_item_pos = 1 + static_cast<int>(task_words.size());
    int span_start = first_item_pos + skip_items;
    int span_end = static_cast<int>(seq.size());
    if (span_start >= span_end) continue;
    double nll = lm_nll_tokens(params, seq, span_start, span_end).item();
    int n = span_end - span_start;
    total += nll * n;
    count += n;
  }
  if (count == 0) raise(Errc::config, "lm_eval_nll: nothing to evaluate");
  return total / static_cast<double>(count);
}

}  // namespace userip

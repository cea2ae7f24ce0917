#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "userip/inference.hpp"
#include "userip/optim.hpp"

using namespace userip;
namespace fs = std::filesystem;

namespace {

struct World {
  Vocab vocab;
  LMParams params;
  PromptTemplate tmpl;
};

World make_world(int n_items, int d = 16, int layers = 2, int heads = 2, uint64_t seed = 3,
                 bool frozen = true) {
  World w;
  w.tmpl = default_prompt_template(2);
  w.vocab = Vocab::build(n_items, w.tmpl.profile_names, w.tmpl.task_words);
  LMConfig cfg;
  cfg.embed_dim = d;
  cfg.n_layers = layers;
  cfg.n_heads = heads;
  cfg.context_len = 96;
  cfg.vocab_size = w.vocab.size();
  w.params = LMParams::init(cfg, seed);
  if (frozen) w.params.freeze_all();
  return w;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-300);
}

}  // namespace

TEST_CASE("assemble_prompt produces the documented layout") {
  World w = make_world(20);
  SoftProfileSet profiles = init_soft_profiles(w.params, w.tmpl, 0, 7);
  std::vector<int> behavior{1, 2, 3, 4, 5, 6};
  AssembledPrompt prompt = assemble_prompt(w.params, w.vocab, w.tmpl, profiles, behavior);

  // [name1 x4, soft1, name2 x3, soft2, task x5, target x6] -> length 20
  CHECK(prompt.layout.length == 20);
  REQUIRE(prompt.layout.spans.size() == 6);
  auto expect = [&](int idx, Segment kind, int profile, int begin, int end) {
    CHECK(prompt.layout.spans[static_cast<size_t>(idx)].kind == kind);
    CHECK(prompt.layout.spans[static_cast<size_t>(idx)].profile == profile);
    CHECK(prompt.layout.spans[static_cast<size_t>(idx)].begin == begin);
    CHECK(prompt.layout.spans[static_cast<size_t>(idx)].end == end);
  };
  expect(0, Segment::name, 0, 0, 4);
  expect(1, Segment::soft, 0, 4, 5);
  expect(2, Segment::name, 1, 5, 8);
  expect(3, Segment::soft, 1, 8, 9);
  expect(4, Segment::task, -1, 9, 14);
  expect(5, Segment::target, -1, 14, 20);
  CHECK(prompt.layout.target_begin == 14);
  CHECK(prompt.layout.target_end == 20);
  CHECK(prompt.inputs.dim(0) == 20);

  // soft slots carry the user's theta rows verbatim (plus position embedding)
  int soft1 = prompt.layout.positions_of(Segment::soft, 0)[0];
  for (int c = 0; c < w.params.cfg.embed_dim; ++c) {
    double injected = prompt.inputs.values()[static_cast<size_t>(soft1) * w.params.cfg.embed_dim + c];
    double theta_plus_pos =
        profiles.theta[0].values()[static_cast<size_t>(c)] +
        w.params.pos_embedding.values()[static_cast<size_t>(soft1) * w.params.cfg.embed_dim + c];
    CHECK(injected == doctest::Approx(theta_plus_pos).epsilon(1e-15));
  }
}

TEST_CASE("templates with no profiles or empty behavior are rejected") {
  World w = make_world(10);
  PromptTemplate empty;
  empty.task_words = {"predict"};
  CHECK_THROWS_AS(empty.validate(), Error);

  SoftProfileSet profiles = init_soft_profiles(w.params, w.tmpl, 0, 7);
  std::vector<int> none;
  CHECK_THROWS_AS(assemble_prompt(w.params, w.vocab, w.tmpl, profiles, none), Error);
}

TEST_CASE("restricted mask matches the attention rules") {
  World w = make_world(20);
  SoftProfileSet profiles = init_soft_profiles(w.params, w.tmpl, 0, 7);
  std::vector<int> behavior{1, 2, 3};
  AssembledPrompt prompt = assemble_prompt(w.params, w.vocab, w.tmpl, profiles, behavior);
  BoolMatrix mask = build_causal_mask(prompt.layout);
  const auto& layout = prompt.layout;

  // soft1 row: exactly name1 span and itself
  int soft1 = layout.positions_of(Segment::soft, 0)[0];
  for (int j = 0; j < layout.length; ++j) {
    bool expected = (j >= 0 && j < 4) || j == soft1;
    CHECK(static_cast<bool>(mask.at(soft1, j)) == expected);
  }
  // soft2 row: name2 span and itself only (blind to name1/soft1)
  int soft2 = layout.positions_of(Segment::soft, 1)[0];
  for (int j = 0; j < layout.length; ++j) {
    bool expected = (j >= 5 && j < 8) || j == soft2;
    CHECK(static_cast<bool>(mask.at(soft2, j)) == expected);
  }
  // first target row: every prior position
  int t0 = layout.target_begin;
  for (int j = 0; j <= t0; ++j) CHECK(mask.at(t0, j) == 1);
  // no forward attention anywhere
  for (int i = 0; i < layout.length; ++i)
    for (int j = i + 1; j < layout.length; ++j) CHECK(mask.at(i, j) == 0);
  // name rows stay inside their own segment under the strict rule
  for (int i = 5; i < 8; ++i)
    for (int j = 0; j < 5; ++j) CHECK(mask.at(i, j) == 0);
}

TEST_CASE("delimiter layout keeps the mask local to each pair") {
  World w = make_world(16);
  PromptTemplate tmpl = w.tmpl;
  tmpl.use_delimiter = true;
  SoftProfileSet profiles = init_soft_profiles(w.params, tmpl, 0, 3);
  std::vector<int> behavior{1, 2};
  AssembledPrompt prompt = assemble_prompt(w.params, w.vocab, tmpl, profiles, behavior);
  auto delims = prompt.layout.positions_of(Segment::delim);
  REQUIRE(delims.size() == 2);
  BoolMatrix mask = build_causal_mask(prompt.layout);
  for (int j = 0; j < prompt.layout.length; ++j) {
    bool in_pair0 = j < 5;  // name1 x4 + soft1
    bool expected = in_pair0 || j == delims[0];
    CHECK(static_cast<bool>(mask.at(delims[0], j)) == expected);
  }
}

TEST_CASE("mask restriction: soft_m logits ignore other profiles' names") {
  World w = make_world(24, 16, 2, 2, 5);
  SoftProfileSet profiles = init_soft_profiles(w.params, w.tmpl, 0, 11);
  std::vector<int> behavior{3, 1, 4, 1, 5};

  AssembledPrompt a = assemble_prompt(w.params, w.vocab, w.tmpl, profiles, behavior);
  BoolMatrix mask = build_causal_mask(a.layout, true);
  Tensor logits_a = lm_forward(w.params, a.inputs, mask);

  // swap name2's words for other vocabulary; same span length
  PromptTemplate other = w.tmpl;
  other.profile_names[1] = {"predict", "next", "purchases"};
  AssembledPrompt b = assemble_prompt(w.params, w.vocab, other, profiles, behavior);
  Tensor logits_b = lm_forward(w.params, b.inputs, mask);

  int v = w.params.cfg.vocab_size;
  int soft1 = a.layout.positions_of(Segment::soft, 0)[0];
  for (int c = 0; c < v; ++c)
    CHECK(logits_a.values()[static_cast<size_t>(soft1) * v + c] ==
          logits_b.values()[static_cast<size_t>(soft1) * v + c]);

  // control: under a full causal mask the same perturbation must leak
  BoolMatrix full = BoolMatrix::lower_triangular(a.layout.length);
  Tensor full_a = lm_forward(w.params, a.inputs, full);
  Tensor full_b = lm_forward(w.params, b.inputs, full);
  int soft2 = a.layout.positions_of(Segment::soft, 1)[0];
  double diff = 0.0;
  for (int c = 0; c < v; ++c)
    diff += std::abs(full_a.values()[static_cast<size_t>(soft2) * v + c] -
                     full_b.values()[static_cast<size_t>(soft2) * v + c]);
  CHECK(diff > 0.0);
}

TEST_CASE("llm_loss is deterministic in theta and behavior") {
  World w = make_world(24);
  SoftProfileSet p1 = init_soft_profiles(w.params, w.tmpl, 0, 17);
  SoftProfileSet p2;
  p2.user_id = 1;
  p2.init_seed = 17;
  for (const auto& t : p1.theta)
    p2.theta.push_back(Tensor::from_values(t.shape(), {t.values().begin(), t.values().end()}, true));

  std::vector<int> behavior{2, 7, 2, 9};
  double l1 = llm_loss(w.params, w.vocab, w.tmpl, p1, behavior).item();
  double l2 = llm_loss(w.params, w.vocab, w.tmpl, p2, behavior).item();
  CHECK(l1 == l2);
}

TEST_CASE("gradient isolation: only theta receives gradients") {
  World w = make_world(24, 16, 2, 2, 7);
  SoftProfileSet profiles = init_soft_profiles(w.params, w.tmpl, 0, 19);
  std::vector<int> behavior{1, 2, 3, 4};
  {
    Tape tape;
    Tensor loss = llm_loss(w.params, w.vocab, w.tmpl, profiles, behavior);
    tape.backward(loss);
  }
  for (const auto& t : profiles.theta) {
    REQUIRE(t.has_grad());
    double norm = 0.0;
    for (double g : t.grad()) norm += g * g;
    CHECK(norm > 0.0);
  }
  for (const auto& p : w.params.all_params()) CHECK_FALSE(p.has_grad());
}

TEST_CASE("a zero-gradient step leaves the loss unchanged") {
  World w = make_world(24);
  SoftProfileSet profiles = init_soft_profiles(w.params, w.tmpl, 0, 23);
  std::vector<int> behavior{5, 6, 7};
  double before = llm_loss(w.params, w.vocab, w.tmpl, profiles, behavior).item();
  for (auto& t : profiles.theta) t.grad_mut();  // allocate zeros
  Adam opt(1e-3);
  opt.step(profiles.theta);
  double after = llm_loss(w.params, w.vocab, w.tmpl, profiles, behavior).item();
  CHECK(before == after);
}

TEST_CASE("theta perturbation changes the loss and masks matter") {
  World w = make_world(24, 16, 2, 2, 29);
  SoftProfileSet profiles = init_soft_profiles(w.params, w.tmpl, 0, 31);
  std::vector<int> behavior{1, 2, 3, 4, 5};
  double base = llm_loss(w.params, w.vocab, w.tmpl, profiles, behavior).item();

  // non-uniform perturbation: a uniform shift would sit in layernorm's
  // shift-invariant null space and leave the network output unchanged
  auto vals = profiles.theta[0].values_mut();
  for (size_t i = 0; i < vals.size(); ++i) vals[i] += (i % 2 == 0) ? 0.7 : -0.4;
  double moved = llm_loss(w.params, w.vocab, w.tmpl, profiles, behavior).item();
  CHECK(moved != base);

  AssembledPrompt prompt = assemble_prompt(w.params, w.vocab, w.tmpl, profiles, behavior);
  BoolMatrix restricted = build_causal_mask(prompt.layout);
  BoolMatrix full = BoolMatrix::lower_triangular(prompt.layout.length);
  double restricted_loss = lm_nll(w.params, prompt.inputs, restricted, prompt.tokens,
                                  prompt.layout.target_begin, prompt.layout.target_end)
                               .item();
  double full_loss = lm_nll(w.params, prompt.inputs, full, prompt.tokens,
                            prompt.layout.target_begin, prompt.layout.target_end)
                         .item();
  CHECK(restricted_loss != full_loss);
}

TEST_CASE("fifty optimization steps cut the loss on a fixture user") {
  // a briefly trained LM gives theta a real likelihood surface to climb
  auto spec = make_planted_spec(2, {3, 2}, 40, 1.0, 55);
  spec.seq_len = 16;
  Dataset data = generate_synthetic(spec, 60, 40, 57);
  PromptTemplate tmpl = default_prompt_template(2);
  Vocab vocab = Vocab::build(40, tmpl.profile_names, tmpl.task_words);
  LMConfig cfg;
  cfg.embed_dim = 24;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.context_len = 64;
  cfg.vocab_size = vocab.size();
  LMTrainConfig tc;
  tc.epochs = 25;
  tc.batch_size = 8;
  tc.task_words = tmpl.task_words;
  LMParams params = train_lm(data, vocab, cfg, tc, 59, nullptr);

  SoftProfileSet profiles = init_soft_profiles(params, tmpl, 0, 41);
  auto behavior = data.user_item_sequence(0);
  Adam opt(0.02);
  double initial = llm_loss(params, vocab, tmpl, profiles, behavior).item();
  double final_loss = initial;
  for (int step = 0; step < 50; ++step) {
    Tape tape;
    Tensor loss = llm_loss(params, vocab, tmpl, profiles, behavior);
    final_loss = loss.item();
    tape.backward(loss);
    opt.step(profiles.theta);
  }
  CHECK(final_loss < initial - 0.1);
}

TEST_CASE("infer_profiles honors the freeze contract and is seed-deterministic") {
  auto spec = make_planted_spec(2, {2, 2}, 30, 1.0, 43);
  spec.seq_len = 8;
  Dataset data = generate_synthetic(spec, 12, 30, 47);

  World w = make_world(30, 16, 1, 2, 51);
  InferConfig cfg;
  cfg.epochs = 4;
  cfg.patience = 4;
  cfg.seed = 53;

  InferResult r1 = infer_profiles(data, w.params, w.vocab, w.tmpl, cfg);
  CHECK(r1.lm_checksum_before == r1.lm_checksum_after);
  CHECK(r1.profiles.size() == 12);

  InferResult r2 = infer_profiles(data, w.params, w.vocab, w.tmpl, cfg);
  for (const auto& [u, set] : r1.profiles) {
    const auto& other = r2.profiles.at(u);
    for (size_t m = 0; m < set.theta.size(); ++m) {
      auto a = set.theta[m].values();
      auto b = other.theta[m].values();
      for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }
  }

  LMParams unfrozen = LMParams::init(w.params.cfg, 99);
  CHECK_THROWS_AS(infer_profiles(data, unfrozen, w.vocab, w.tmpl, cfg), Error);
}

TEST_CASE("divergence guard aborts when the loss blows past ten times its start") {
  auto spec = make_planted_spec(2, {2, 2}, 20, 1.0, 5);
  spec.seq_len = 6;
  Dataset data = generate_synthetic(spec, 6, 20, 7);
  World w = make_world(20, 16, 1, 2, 9);

  // a joint term that explodes after the first epoch forces the guard
  struct ExplodingHook : JointHook {
    int epoch = 0;
    Tensor user_term(uint32_t, const std::vector<Tensor>& theta) override {
      double weight = epoch == 0 ? 0.0 : 1e6;
      return scale(sum_squares(theta[0]), weight);
    }
    void batch_step() override {}
    void epoch_end(int e, const std::vector<uint32_t>&,
                   const std::function<const std::vector<Tensor>&(uint32_t)>&) override {
      epoch = e + 1;
    }
    bool active() const override { return true; }
  } hook;

  InferConfig cfg;
  cfg.epochs = 10;
  cfg.patience = 10;
  cfg.min_delta = 0.0;
  cfg.seed = 11;
  try {
    infer_profiles(data, w.params, w.vocab, w.tmpl, cfg, &hook);
    FAIL("expected divergence abort");
  } catch (const Error& e) {
    CHECK(e.kind() == Errc::divergence);
  }
}

TEST_CASE("trained profiles cluster by planted class") {
  // users sharing a planted class end up with more similar theta than users
  // who do not
  auto spec = make_planted_spec(2, {3, 2}, 60, 1.0, 61);
  spec.seq_len = 24;
  Dataset data = generate_synthetic(spec, 60, 60, 67);

  PromptTemplate tmpl = default_prompt_template(2);
  Vocab vocab = Vocab::build(60, tmpl.profile_names, tmpl.task_words);
  LMConfig cfg;
  cfg.embed_dim = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.context_len = 64;
  cfg.vocab_size = vocab.size();
  LMTrainConfig tc;
  tc.epochs = 6;
  tc.batch_size = 8;
  tc.task_words = tmpl.task_words;
  LMParams params = train_lm(data, vocab, cfg, tc, 71, nullptr);

  InferConfig icfg;
  icfg.epochs = 30;
  icfg.patience = 30;
  icfg.lr = 5e-3;
  icfg.seed = 73;
  InferResult result = infer_profiles(data, params, vocab, tmpl, icfg);

  const auto& classes = data.planted_classes_for_eval();
  for (int m = 0; m < 2; ++m) {
    double within = 0.0, across = 0.0;
    long n_within = 0, n_across = 0;
    std::vector<uint32_t> users;
    for (const auto& [u, _] : result.profiles) users.push_back(u);
    for (size_t i = 0; i < users.size(); ++i)
      for (size_t j = i + 1; j < users.size(); ++j) {
        double c = cosine(result.profiles.at(users[i]).theta[static_cast<size_t>(m)].values(),
                          result.profiles.at(users[j]).theta[static_cast<size_t>(m)].values());
        bool same =
            classes[users[i]][static_cast<size_t>(m)] == classes[users[j]][static_cast<size_t>(m)];
        if (same) {
          within += c;
          ++n_within;
        } else {
          across += c;
          ++n_across;
        }
      }
    within /= static_cast<double>(n_within);
    across /= static_cast<double>(n_across);
    INFO("profile " << m << ": within=" << within << " across=" << across);
    CHECK(within > across + 0.05);
  }
}

TEST_CASE("capacity does not degrade when M grows to the planted count") {
  // best-achievable target NLL with M=2 slots is not worse than with M=1
  // (median over 5 seeds)
  std::vector<double> deltas;
  for (uint64_t seed = 1; seed <= 5; ++seed) {
    auto spec = make_planted_spec(2, {2, 2}, 40, 1.0, 100 + seed);
    spec.seq_len = 16;
    Dataset data = generate_synthetic(spec, 24, 40, 200 + seed);

    PromptTemplate t2 = default_prompt_template(2);
    Vocab vocab = Vocab::build(40, t2.profile_names, t2.task_words);
    LMConfig cfg;
    cfg.embed_dim = 24;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.context_len = 48;
    cfg.vocab_size = vocab.size();
    LMTrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 8;
    tc.task_words = t2.task_words;
    LMParams params = train_lm(data, vocab, cfg, tc, 300 + seed, nullptr);

    InferConfig icfg;
    icfg.epochs = 20;
    icfg.patience = 20;
    icfg.lr = 5e-3;
    icfg.seed = 400 + seed;

    PromptTemplate t1 = t2;
    t1.profile_names.resize(1);
    t1.slot_widths.resize(1);

    double best1 = infer_profiles(data, params, vocab, t1, icfg).epoch_mean_loss.back();
    double best2 = infer_profiles(data, params, vocab, t2, icfg).epoch_mean_loss.back();
    deltas.push_back(best2 - best1);
  }
  std::sort(deltas.begin(), deltas.end());
  double median = deltas[2];
  INFO("median delta=" << median);
  CHECK(median <= 0.02);
}

TEST_CASE("attention export normalizes to [0,1] and labels target rows") {
  World w = make_world(30, 16, 2, 2, 81);
  SoftProfileSet profiles = init_soft_profiles(w.params, w.tmpl, 4, 83);
  std::vector<int> behavior{1, 5, 9, 13, 17};
  auto rows = export_attention(w.params, w.vocab, w.tmpl, profiles, behavior, "before");
  REQUIRE(!rows.empty());
  double lo = 1e300, hi = -1e300;
  bool has_target = false;
  for (const auto& r : rows) {
    lo = std::min(lo, r.weight);
    hi = std::max(hi, r.weight);
    has_target = has_target || r.segment == Segment::target;
    CHECK(r.stage == "before");
    CHECK(r.user == 4);
  }
  CHECK(lo == doctest::Approx(0.0));
  CHECK(hi == doctest::Approx(1.0));
  CHECK(has_target);

  auto means = mean_target_attention(rows, 2);
  REQUIRE(means.size() == 2);
  for (double m : means) {
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }
}

TEST_CASE("profile checkpoints round-trip") {
  auto dir = fs::temp_directory_path() / ("uip_theta_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  World w = make_world(12);
  std::map<uint32_t, SoftProfileSet> profiles;
  for (uint32_t u : {3u, 9u, 11u}) profiles.emplace(u, init_soft_profiles(w.params, w.tmpl, u, 91));
  save_profiles(dir / "theta.ckpt", profiles, w.tmpl, w.params.cfg.embed_dim, 91);

  ProfilesFile loaded = load_profiles(dir / "theta.ckpt");
  CHECK(loaded.embed_dim == w.params.cfg.embed_dim);
  CHECK(loaded.seed == 91);
  REQUIRE(loaded.profiles.size() == 3);
  for (const auto& [u, set] : profiles) {
    const auto& lset = loaded.profiles.at(u);
    for (size_t m = 0; m < set.theta.size(); ++m) {
      auto a = set.theta[m].values();
      auto b = lset.theta[m].values();
      REQUIRE(a.size() == b.size());
      for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
    }
  }
  fs::remove_all(dir);
}

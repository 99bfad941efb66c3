#include "prisp/synthbench.hpp"

#include "prisp/backbone.hpp"
#include "prisp/hypernet.hpp"
#include "prisp/personalize.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

using namespace prisp;
using namespace prisp::bench;

namespace {

bool same_spec(const TaskSpec& a, const TaskSpec& b) {
  return a.kind == b.kind && a.labels == b.labels &&
         a.echo_last == b.echo_last && a.description == b.description &&
         a.desc_generated == b.desc_generated &&
         a.desc_imprecise == b.desc_imprecise;
}

double cosine(const Mat& a, const Mat& b) {
  double na = a.norm();
  double nb = b.norm();
  REQUIRE(na > 0.0);
  REQUIRE(nb > 0.0);
  return (a.array() * b.array()).sum() / (na * nb);
}

// Mean eval score of a (possibly bias-aware) answer function, using the
// task-appropriate aggregate so higher is better for every kind.
template <class Fn>
double oracle_score(const TaskSpec& spec, const SynthUser& user, Fn&& answer) {
  std::vector<std::string> preds;
  std::vector<std::string> golds;
  for (const Example& ex : user.eval) {
    preds.push_back(answer(ex.input));
    golds.push_back(ex.output);
  }
  switch (spec.kind) {
    case TaskKind::kClassification: {
      auto s = classify_score(preds, golds, spec.labels);
      return aggregate_task(spec.kind, s.accuracy, s.macro_f1);
    }
    case TaskKind::kOrdinal: {
      auto s = ordinal_score(preds, golds);
      return aggregate_task(spec.kind, s.mae, s.rmse);
    }
    case TaskKind::kGeneration: {
      double r1 = 0.0;
      double rl = 0.0;
      for (size_t i = 0; i < preds.size(); ++i) {
        auto s = rouge(preds[i], golds[i]);
        r1 += s.r1_f;
        rl += s.rl_f;
      }
      return aggregate_task(spec.kind, r1 / double(preds.size()),
                            rl / double(preds.size()));
    }
  }
  return 0.0;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("task generation is deterministic and validates its arguments") {
  for (TaskKind kind : {TaskKind::kClassification, TaskKind::kOrdinal,
                        TaskKind::kGeneration}) {
    TaskSpec a = gen_task(kind, 11);
    TaskSpec b = gen_task(kind, 11);
    CHECK(same_spec(a, b));
    TaskSpec c = gen_task(kind, 12);
    CHECK(a.description.size() > 10);
    if (kind == TaskKind::kClassification) {
      CHECK_FALSE(same_spec(a, c));  // different label subset almost surely
    }
  }

  TaskSpec wide = gen_task(TaskKind::kClassification, 3, 15);
  CHECK(wide.labels.size() == 15);
  std::set<std::string> uniq(wide.labels.begin(), wide.labels.end());
  CHECK(uniq.size() == 15);
  std::set<char> firsts;
  for (const auto& w : wide.labels) firsts.insert(w[0]);
  CHECK(firsts.size() == 15);

  CHECK_THROWS_AS(gen_task(TaskKind::kClassification, 1, 1), ConfigError);
  CHECK_THROWS_AS(gen_task(TaskKind::kClassification, 1, 16), ConfigError);
}

TEST_CASE("global rules behave as documented") {
  TaskSpec cls = gen_task(TaskKind::kClassification, 7, 4);
  // Build an input that is mostly the third label's letter.
  std::string input(8, cls.labels[2][0]);
  input[0] = cls.labels[0][0];
  CHECK(global_output(cls, input) == cls.labels[2]);
  // Exact tie between labels 0 and 1 resolves to the earlier label.
  std::string tie;
  tie += std::string(4, cls.labels[1][0]);
  tie += std::string(4, cls.labels[0][0]);
  CHECK(global_output(cls, tie) == cls.labels[0]);

  TaskSpec ord = gen_task(TaskKind::kOrdinal, 7);
  CHECK(global_output(ord, "abcdefgh") == "1");
  CHECK(global_output(ord, "ab++c+de") == "4");
  CHECK(global_output(ord, "++++++++") == "5");  // clipped

  TaskSpec first = gen_task(TaskKind::kGeneration, 4);
  TaskSpec both = first;
  both.echo_last = !first.echo_last;
  const TaskSpec& echo_one = first.echo_last ? both : first;
  const TaskSpec& echo_two = first.echo_last ? first : both;
  CHECK(global_output(echo_one, "dew arc fog") == "dew");
  CHECK(global_output(echo_two, "dew arc fog") == "dew fog");
}

TEST_CASE("user biases compose with the global rule") {
  TaskSpec cls = gen_task(TaskKind::kClassification, 7, 4);
  TaskSpec ord = gen_task(TaskKind::kOrdinal, 7);
  TaskSpec gen = gen_task(TaskKind::kGeneration, 4);

  // The neutral bias never changes anything.
  Rng rng(5);
  for (const TaskSpec* spec : {&cls, &ord, &gen}) {
    for (int i = 0; i < 20; ++i) {
      std::string s = sample_input(*spec, rng);
      CHECK(biased_output(*spec, UserBias{}, s) == global_output(*spec, s));
      CHECK_FALSE(bias_active(*spec, UserBias{}, s));
    }
  }

  UserBias remap;
  remap.victim = 1;
  remap.preferred = 3;
  std::string hit(8, cls.labels[1][0]);
  CHECK(biased_output(cls, remap, hit) == cls.labels[3]);
  std::string miss(8, cls.labels[0][0]);
  CHECK(biased_output(cls, remap, miss) == cls.labels[0]);

  // Rating offsets clip at the scale ends.
  UserBias up;
  up.offset = 1;
  CHECK(biased_output(ord, up, "ab++c+de") == "5");
  CHECK(biased_output(ord, up, "++++q+++") == "5");
  UserBias down;
  down.offset = -1;
  CHECK(biased_output(ord, down, "abcdefgh") == "1");

  UserBias swap;
  swap.from = 3;  // dew
  swap.to = 0;    // arc
  TaskSpec echo = gen;
  echo.echo_last = false;
  CHECK(biased_output(echo, swap, "dew fog arc") == "arc");
  CHECK(biased_output(echo, swap, "fog dew arc") == "fog");

  UserBias bad;
  bad.victim = 0;
  bad.preferred = 0;
  CHECK_THROWS_AS(biased_output(cls, bad, hit), ConfigError);
  UserBias far;
  far.offset = 3;
  CHECK_THROWS_AS(biased_output(ord, far, "abcdefgh"), ConfigError);
}

TEST_CASE("generated users: histories, biases, and disjoint eval queries") {
  for (TaskKind kind : {TaskKind::kClassification, TaskKind::kOrdinal,
                        TaskKind::kGeneration}) {
    TaskSpec spec = gen_task(kind, 21);
    auto users = gen_users(spec, 6, 55, 31);
    REQUIRE(users.size() == 6);

    auto again = gen_users(spec, 6, 55, 31);
    for (size_t u = 0; u < users.size(); ++u) {
      CHECK(users[u].id == again[u].id);
      CHECK(users[u].history.items.size() == 55);
      CHECK(users[u].eval.size() == 6);
      for (size_t i = 0; i < 55; ++i) {
        CHECK(users[u].history.items[i].input ==
              again[u].history.items[i].input);
      }

      // No user is unbiased, and every output re-derives from the bias.
      CHECK_FALSE(users[u].bias.is_identity());
      std::set<std::string> hist_inputs;
      for (const Example& ex : users[u].history.items) {
        CHECK(ex.output == biased_output(spec, users[u].bias, ex.input));
        hist_inputs.insert(ex.input);
      }
      int active = 0;
      for (const Example& ex : users[u].eval) {
        CHECK(ex.output == biased_output(spec, users[u].bias, ex.input));
        CHECK(hist_inputs.count(ex.input) == 0);
        active += bias_active(spec, users[u].bias, ex.input) ? 1 : 0;
      }
      CHECK(active >= 2);
      CHECK(active <= int(users[u].eval.size()) - 2);
    }
  }

  TaskSpec spec = gen_task(TaskKind::kOrdinal, 21);
  CHECK_THROWS_AS(gen_users(spec, 0, 55, 1), ConfigError);
  CHECK_THROWS_AS(gen_users(spec, 2, 49, 1), ConfigError);
  CHECK_THROWS_AS(gen_users(spec, 2, 55, 1, 3), ConfigError);
}

TEST_CASE("personalization headroom: knowing the bias always helps") {
  for (TaskKind kind : {TaskKind::kClassification, TaskKind::kOrdinal,
                        TaskKind::kGeneration}) {
    TaskSpec spec = gen_task(kind, 33);
    auto users = gen_users(spec, 20, 60, 43);

    int strictly_better = 0;
    double mean_user = 0.0;
    double mean_global = 0.0;
    for (const SynthUser& user : users) {
      double user_oracle = oracle_score(spec, user, [&](const std::string& s) {
        return biased_output(spec, user.bias, s);
      });
      double global_oracle = oracle_score(
          spec, user, [&](const std::string& s) { return global_output(spec, s); });
      strictly_better += user_oracle > global_oracle ? 1 : 0;
      mean_user += user_oracle;
      mean_global += global_oracle;
    }
    INFO("kind ", task_kind_name(kind));
    CHECK(strictly_better >= 18);  // >= 90% of 20 users
    CHECK(mean_user / 20.0 > mean_global / 20.0);
  }
}

TEST_CASE("split carving: sharer-only task pool and shot suffixes") {
  TaskSpec spec = gen_task(TaskKind::kClassification, 9, 4);
  auto users = gen_users(spec, 10, 52, 19);
  SplitPlan plan;
  plan.task_budget = 40;
  plan.user_shots = 10;
  plan.target_users = 4;
  plan.sharer_pool = 6;

  Splits s1 = make_splits(spec, users, plan, 77);
  Splits s2 = make_splits(spec, users, plan, 77);
  CHECK(s1.task_indices == s2.task_indices);
  REQUIRE(s1.task.size() == 40);

  for (const auto& [ui, hi] : s1.task_indices) {
    CHECK(ui >= plan.target_users);  // never drawn from a target user
    CHECK(ui < plan.target_users + plan.sharer_pool);
    CHECK(hi >= 0);
    CHECK(hi < 52);
  }
  for (size_t i = 0; i < s1.task.size(); ++i) {
    const auto& [ui, hi] = s1.task_indices[i];
    CHECK(s1.task[i].user == users[size_t(ui)].id);
    CHECK(s1.task[i].input == users[size_t(ui)].history.items[size_t(hi)].input);
  }

  // Shots are exactly the most recent history items, oldest first.
  for (int u = 0; u < plan.target_users; ++u) {
    const Dataset& shots = s1.shots.at(users[size_t(u)].id);
    REQUIRE(shots.size() == 10);
    const Dataset& hist = users[size_t(u)].history.items;
    for (int i = 0; i < 10; ++i) {
      CHECK(shots[size_t(i)].input == hist[hist.size() - 10 + size_t(i)].input);
    }
    CHECK(s1.evals.at(users[size_t(u)].id).size() == users[size_t(u)].eval.size());
  }

  // A full-history request returns the whole history.
  SplitPlan whole = plan;
  whole.user_shots = 52;
  Splits s3 = make_splits(spec, users, whole, 77);
  CHECK(s3.shots.at(users[0].id).size() == 52);
  CHECK(s3.shots.at(users[0].id).front().input ==
        users[0].history.items.front().input);

  SplitPlan bad = plan;
  bad.user_shots = 53;
  CHECK_THROWS_AS(make_splits(spec, users, bad, 77), ConfigError);
  bad = plan;
  bad.task_budget = 6 * 52 + 1;
  CHECK_THROWS_AS(make_splits(spec, users, bad, 77), ConfigError);
  bad = plan;
  bad.sharer_pool = 7;
  CHECK_THROWS_AS(make_splits(spec, users, bad, 77), ConfigError);
  bad = plan;
  bad.target_users = 0;
  CHECK_THROWS_AS(make_splits(spec, users, bad, 77), ConfigError);
}

TEST_CASE("description rewrites: rule tokens survive, one corruption hurts") {
  for (TaskKind kind : {TaskKind::kClassification, TaskKind::kOrdinal,
                        TaskKind::kGeneration}) {
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
      TaskSpec spec = gen_task(kind, seed);

      CHECK(perturb_description(spec, DescVariant::kCanonical, 99) ==
            spec.description);
      CHECK(perturb_description(spec, DescVariant::kGeneratedStyle, 5) ==
            perturb_description(spec, DescVariant::kGeneratedStyle, 5));
      CHECK(perturb_description(spec, DescVariant::kImprecise, 5) ==
            perturb_description(spec, DescVariant::kImprecise, 5));

      // The stored imprecise text differs from the stored rewrite by exactly
      // one token.
      std::istringstream ga(spec.desc_generated);
      std::istringstream ia(spec.desc_imprecise);
      std::vector<std::string> gw{std::istream_iterator<std::string>(ga), {}};
      std::vector<std::string> iw{std::istream_iterator<std::string>(ia), {}};
      REQUIRE(gw.size() == iw.size());
      int diffs = 0;
      for (size_t i = 0; i < gw.size(); ++i) diffs += gw[i] != iw[i] ? 1 : 0;
      CHECK(diffs == 1);

      Mat canon = embed_description(spec.description);
      double cos_gen = cosine(canon, embed_description(spec.desc_generated));
      double cos_imp = cosine(canon, embed_description(spec.desc_imprecise));
      INFO("kind ", task_kind_name(kind), " seed ", seed);
      CHECK(cos_gen > cos_imp);
    }
  }
  TaskSpec spec = gen_task(TaskKind::kOrdinal, 1);
  CHECK(desc_variant_from_name("imprecise") == DescVariant::kImprecise);
  CHECK_THROWS_AS(desc_variant_from_name("paraphrase"), ConfigError);
}

TEST_CASE("benchmark files: bitwise regeneration and corruption detection") {
  BenchSettings s;
  s.kind = TaskKind::kGeneration;
  s.task_seed = 5;
  s.users_seed = 6;
  s.splits_seed = 7;
  s.n_users = 8;
  s.history_len = 50;
  s.plan.task_budget = 30;
  s.plan.target_users = 3;
  s.plan.sharer_pool = 5;

  auto dir1 = std::filesystem::temp_directory_path() / "prisp_bench_a";
  auto dir2 = std::filesystem::temp_directory_path() / "prisp_bench_b";
  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);

  Benchmark bench = build_benchmark(s);
  write_benchmark(dir1, bench);
  write_benchmark(dir2, build_benchmark(s));
  CHECK(read_file(dir1 / "data.jsonl") == read_file(dir2 / "data.jsonl"));
  CHECK(read_file(dir1 / "manifest.json") == read_file(dir2 / "manifest.json"));

  // Row sanity: every line parses, splits are labeled, evals never leak into
  // the task pool.
  {
    std::ifstream in(dir1 / "data.jsonl");
    std::string line;
    int rows = 0;
    std::set<std::string> task_inputs;
    std::set<std::string> eval_inputs;
    while (std::getline(in, line)) {
      auto j = nlohmann::json::parse(line);
      CHECK(j.contains("id"));
      std::string split = j["split"].get<std::string>();
      CHECK((split == "task" || split == "history" || split == "eval"));
      if (split == "task") task_inputs.insert(j["input"].get<std::string>());
      if (split == "eval") eval_inputs.insert(j["input"].get<std::string>());
      ++rows;
    }
    CHECK(rows == 30 + 3 * (50 + 6));
    for (const std::string& e : eval_inputs) CHECK(task_inputs.count(e) == 0);
  }

  Benchmark back = load_benchmark(dir1);
  CHECK(back.spec.description == bench.spec.description);
  CHECK(back.users.size() == bench.users.size());
  CHECK(back.splits.task_indices == bench.splits.task_indices);

  // Tampering with the data file must be caught.
  {
    std::string bytes = read_file(dir1 / "data.jsonl");
    bytes[bytes.find("\"output\"") + 12] ^= 1;
    std::ofstream out(dir1 / "data.jsonl", std::ios::binary);
    out << bytes;
  }
  CHECK_THROWS_AS(load_benchmark(dir1), CorruptionError);
  CHECK_THROWS_AS(load_benchmark(dir2 / "missing"), IoError);

  std::filesystem::remove_all(dir1);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("the global rule is learnable by a plain low-rank adapter") {
  TaskSpec spec = gen_task(TaskKind::kClassification, 2, 4);
  BackboneConfig cfg{2, 32, 2, 64, 64, 32};
  Backbone model = build_backbone(cfg, Rng(61));

  Rng data_rng = Rng(62).split("probe-data");
  Dataset train;
  for (int i = 0; i < 200; ++i) {
    std::string input = sample_input(spec, data_rng);
    train.push_back({input, global_output(spec, input)});
  }
  Dataset eval;
  for (int i = 0; i < 100; ++i) {
    std::string input = sample_input(spec, data_rng);
    eval.push_back({input, global_output(spec, input)});
  }

  AdapterSet probe;
  probe.variant = Variant::kFullLora;
  probe.tag = "probe";
  Rng init(63);
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (Site site : {Site::kQ, Site::kV}) {
      LoraAdapter ad = init_lora(cfg.d_model, cfg.d_model, 8, init);
      ad.mask = {.a = true, .b = true, .c = false};
      probe.put(l, site, ad);
    }
  }
  train_adapters(model, probe, {}, train, 25, 8, 2e-3, OptKind::kAdamW,
                 Rng(64), false);

  auto sets = set_list(probe);
  std::vector<std::string> preds;
  std::vector<std::string> golds;
  std::map<std::string, int> gold_counts;
  for (const Example& ex : eval) {
    TokenSeq out = generate(model, sets, encode_prompt(ex.input), 6);
    preds.push_back(detokenize(std::vector<int>(
        out.ids.begin() + out.prompt_len, out.ids.end())));
    golds.push_back(ex.output);
    gold_counts[ex.output] += 1;
  }
  int majority = 0;
  for (const auto& [label, count] : gold_counts) majority = std::max(majority, count);
  double majority_acc = double(majority) / double(eval.size());
  double acc = classify_score(preds, golds, spec.labels).accuracy;
  INFO("adapter accuracy ", acc, " majority baseline ", majority_acc);
  CHECK(acc >= majority_acc + 0.15);
}

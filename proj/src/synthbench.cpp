#include "prisp/synthbench.hpp"

#include "prisp/container.hpp"

#include <json.hpp>

#include <algorithm>
#include <set>
#include <sstream>

namespace prisp::bench {

namespace {

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  std::string w;
  while (in >> w) words.push_back(w);
  return words;
}

std::string join_words(const std::vector<std::string>& words) {
  std::string out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i) out += ' ';
    out += words[i];
  }
  return out;
}

// The tokens whose presence pins down the global rule; the imprecise rewrite
// corrupts exactly one of them.
std::vector<std::string> rule_tokens(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::kClassification: {
      std::vector<std::string> t = spec.labels;
      t.push_back("majority");
      return t;
    }
    case TaskKind::kOrdinal:
      return {"plus", "1", "5"};
    case TaskKind::kGeneration: {
      std::vector<std::string> t = {"repeat", "first"};
      if (spec.echo_last) t.push_back("last");
      return t;
    }
  }
  throw ConfigError("unknown task kind");
}

std::string canonical_description(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::kClassification:
      return "classify the letter string by its majority letter and answer "
             "with one of " +
             join_words(spec.labels);
    case TaskKind::kOrdinal:
      return "rate the text with a single digit from 1 to 5 based on the "
             "plus marks";
    case TaskKind::kGeneration:
      return spec.echo_last
                 ? "repeat exactly the first and last words of the given words"
                 : "repeat exactly the first word of the given words";
  }
  throw ConfigError("unknown task kind");
}

// Clause reorderings that keep every rule token intact.
std::vector<std::string> rewrite_pool(const TaskSpec& spec) {
  switch (spec.kind) {
    case TaskKind::kClassification: {
      const std::string labels = join_words(spec.labels);
      return {"answer with one of " + labels +
                  " by finding the majority letter in the string",
              "find the majority letter in the string and answer with one "
              "of " +
                  labels,
              "the majority letter in the string decides your answer one "
              "of " +
                  labels};
    }
    case TaskKind::kOrdinal:
      return {"count the plus marks and rate the text from 1 to 5 with a "
              "single digit",
              "give a single digit rating from 1 to 5 driven by the plus "
              "marks",
              "based on the plus marks rate the text from 1 to 5 using one "
              "digit"};
    case TaskKind::kGeneration: {
      const std::string what =
          spec.echo_last ? "first and last words" : "first word";
      return {"from the given words repeat exactly the " + what,
              "take the given words and repeat exactly the " + what,
              "you should repeat exactly the " + what + " of the given words"};
    }
  }
  throw ConfigError("unknown task kind");
}

std::string corrupt_token(const std::string& token) {
  std::string out = token;
  out.back() = (out.back() == 'x') ? 'q' : 'x';
  return out;
}

std::string make_generated(const TaskSpec& spec, uint64_t seed) {
  auto pool = rewrite_pool(spec);
  Rng rng = Rng(seed).split("rewrite");
  return pool[size_t(rng.uniform_int(0, int(pool.size()) - 1))];
}

std::string make_imprecise(const TaskSpec& spec, uint64_t seed) {
  std::vector<std::string> words = split_words(make_generated(spec, seed));
  const auto rules = rule_tokens(spec);
  std::vector<size_t> hits;
  for (size_t i = 0; i < words.size(); ++i) {
    if (std::find(rules.begin(), rules.end(), words[i]) != rules.end()) {
      hits.push_back(i);
    }
  }
  Rng rng = Rng(seed).split("corrupt");
  size_t pick = hits[size_t(rng.uniform_int(0, int(hits.size()) - 1))];
  words[pick] = corrupt_token(words[pick]);
  return join_words(words);
}

int rating_of(const std::string& text) {
  int plus = int(std::count(text.begin(), text.end(), '+'));
  return std::clamp(1 + plus, 1, 5);
}

void check_bias(const TaskSpec& spec, const UserBias& bias) {
  const int k = int(spec.labels.size());
  if (bias.victim >= 0 || bias.preferred >= 0) {
    if (bias.victim < 0 || bias.victim >= k || bias.preferred < 0 ||
        bias.preferred >= k || bias.victim == bias.preferred) {
      throw ConfigError("bad label-remap bias");
    }
  }
  if (bias.offset < -1 || bias.offset > 1) {
    throw ConfigError("rating offset must be in {-1, 0, +1}");
  }
  if (bias.from >= 0 || bias.to >= 0) {
    const int n = int(lexicon().size());
    if (bias.from < 0 || bias.from >= n || bias.to < 0 || bias.to >= n ||
        bias.from == bias.to) {
      throw ConfigError("bad word-substitution bias");
    }
  }
}

UserBias draw_bias(const TaskSpec& spec, Rng rng) {
  UserBias bias;
  switch (spec.kind) {
    case TaskKind::kClassification: {
      const int k = int(spec.labels.size());
      bias.victim = rng.uniform_int(0, k - 1);
      bias.preferred = (bias.victim + 1 + rng.uniform_int(0, k - 2)) % k;
      break;
    }
    case TaskKind::kOrdinal:
      bias.offset = rng.uniform_int(0, 1) ? 1 : -1;
      break;
    case TaskKind::kGeneration: {
      const int n = int(lexicon().size());
      bias.from = rng.uniform_int(0, n - 1);
      bias.to = (bias.from + 1 + rng.uniform_int(0, n - 2)) % n;
      break;
    }
  }
  return bias;
}

std::string render_jsonl(const Benchmark& bench) {
  // nlohmann objects dump with sorted keys, so this text is a pure function
  // of the row contents.
  std::string out;
  auto emit = [&out](const std::string& id, const std::string& user,
                     const Example& ex, const char* split) {
    nlohmann::json j{{"id", id},
                     {"user", user},
                     {"input", ex.input},
                     {"output", ex.output},
                     {"split", split}};
    out += j.dump();
    out += '\n';
  };
  for (const SplitRow& row : bench.splits.task) {
    emit(row.id, row.user, {row.input, row.output}, "task");
  }
  for (int u = 0; u < bench.settings.plan.target_users; ++u) {
    const SynthUser& user = bench.users[size_t(u)];
    for (size_t i = 0; i < user.history.items.size(); ++i) {
      emit(user.id + "-h" + std::to_string(i), user.id, user.history.items[i],
           "history");
    }
    for (size_t i = 0; i < user.eval.size(); ++i) {
      emit(user.id + "-e" + std::to_string(i), user.id, user.eval[i], "eval");
    }
  }
  return out;
}

std::string render_manifest(const Benchmark& bench) {
  const BenchSettings& s = bench.settings;
  nlohmann::json j{{"kind", task_kind_name(s.kind)},
                   {"n_classes", s.n_classes},
                   {"task_seed", s.task_seed},
                   {"users_seed", s.users_seed},
                   {"splits_seed", s.splits_seed},
                   {"n_users", s.n_users},
                   {"history_len", s.history_len},
                   {"n_eval", s.n_eval},
                   {"task_budget", s.plan.task_budget},
                   {"user_shots", s.plan.user_shots},
                   {"target_users", s.plan.target_users},
                   {"sharer_pool", s.plan.sharer_pool},
                   {"description", bench.spec.description},
                   {"desc_generated", bench.spec.desc_generated},
                   {"desc_imprecise", bench.spec.desc_imprecise},
                   {"labels", bench.spec.labels}};
  return j.dump(2) + "\n";
}

}  // namespace

const std::vector<std::string>& lexicon() {
  static const std::vector<std::string> words = {
      "arc", "bay", "cod", "dew", "elm", "fog", "gum", "hat",
      "ivy", "jet", "kit", "log", "map", "net", "oak"};
  return words;
}

TaskSpec gen_task(TaskKind kind, uint64_t seed, int n_classes) {
  TaskSpec spec;
  spec.kind = kind;
  spec.seed = seed;
  Rng rng = Rng(seed).split("task");
  switch (kind) {
    case TaskKind::kClassification: {
      if (n_classes < 2 || n_classes > int(lexicon().size())) {
        throw ConfigError("n_classes must be in 2..15");
      }
      auto idx = rng.split("labels").sample_indices(int(lexicon().size()),
                                                    n_classes);
      std::sort(idx.begin(), idx.end());
      for (int i : idx) spec.labels.push_back(lexicon()[size_t(i)]);
      break;
    }
    case TaskKind::kOrdinal:
      spec.labels = {"1", "2", "3", "4", "5"};
      break;
    case TaskKind::kGeneration:
      spec.labels = lexicon();
      spec.echo_last = rng.split("rule").uniform_int(0, 1) == 1;
      break;
  }
  spec.description = canonical_description(spec);
  // Both stored rewrites share one sub-seed, so the imprecise text is the
  // generated-style text with a single token misspelled.
  uint64_t dseed = Rng(seed).split("desc").next_u64();
  spec.desc_generated = make_generated(spec, dseed);
  spec.desc_imprecise = make_imprecise(spec, dseed);
  return spec;
}

std::string global_output(const TaskSpec& spec, const std::string& input) {
  switch (spec.kind) {
    case TaskKind::kClassification: {
      // Majority symbol; ties go to the earliest label (lowest class letter,
      // since labels stay sorted by their first character).
      int best = -1;
      int best_count = -1;
      for (size_t i = 0; i < spec.labels.size(); ++i) {
        int c = int(std::count(input.begin(), input.end(), spec.labels[i][0]));
        if (c > best_count) {
          best = int(i);
          best_count = c;
        }
      }
      return spec.labels[size_t(best)];
    }
    case TaskKind::kOrdinal:
      return std::to_string(rating_of(input));
    case TaskKind::kGeneration: {
      auto words = split_words(input);
      if (words.empty()) throw ConfigError("empty generation input");
      std::string out = words.front();
      if (spec.echo_last) out += ' ' + words.back();
      return out;
    }
  }
  throw ConfigError("unknown task kind");
}

std::string biased_output(const TaskSpec& spec, const UserBias& bias,
                          const std::string& input) {
  check_bias(spec, bias);
  std::string base = global_output(spec, input);
  switch (spec.kind) {
    case TaskKind::kClassification:
      if (bias.victim >= 0 && base == spec.labels[size_t(bias.victim)]) {
        return spec.labels[size_t(bias.preferred)];
      }
      return base;
    case TaskKind::kOrdinal:
      return std::to_string(std::clamp(std::stoi(base) + bias.offset, 1, 5));
    case TaskKind::kGeneration: {
      auto words = split_words(base);
      for (std::string& w : words) {
        if (bias.from >= 0 && w == lexicon()[size_t(bias.from)]) {
          w = lexicon()[size_t(bias.to)];
        }
      }
      return join_words(words);
    }
  }
  throw ConfigError("unknown task kind");
}

std::string sample_input(const TaskSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case TaskKind::kClassification: {
      // Resample near-ties away so the majority is visibly unique; after 50
      // tries the tie-break rule applies and the draw stands.
      for (int attempt = 0; attempt < 50; ++attempt) {
        std::string s(size_t(spec.input_len), '?');
        for (char& c : s) {
          c = spec.labels[size_t(rng.uniform_int(
              0, int(spec.labels.size()) - 1))][0];
        }
        int best = 0;
        int runner = 0;
        for (const std::string& label : spec.labels) {
          int c = int(std::count(s.begin(), s.end(), label[0]));
          if (c > best) {
            runner = best;
            best = c;
          } else if (c > runner) {
            runner = c;
          }
        }
        if (best > runner || attempt == 49) return s;
      }
      throw ConfigError("unreachable");
    }
    case TaskKind::kOrdinal: {
      std::string s(size_t(spec.input_len), '?');
      for (char& c : s) c = char('a' + rng.uniform_int(0, 25));
      int plus = rng.uniform_int(0, 4);
      auto where = rng.sample_indices(spec.input_len, plus);
      for (int i : where) s[size_t(i)] = '+';
      return s;
    }
    case TaskKind::kGeneration: {
      auto idx = rng.sample_indices(int(lexicon().size()), 3);
      std::vector<std::string> words;
      for (int i : idx) words.push_back(lexicon()[size_t(i)]);
      return join_words(words);
    }
  }
  throw ConfigError("unknown task kind");
}

bool bias_active(const TaskSpec& spec, const UserBias& bias,
                 const std::string& input) {
  return biased_output(spec, bias, input) != global_output(spec, input);
}

std::vector<SynthUser> gen_users(const TaskSpec& spec, int n_users,
                                 int history_len, uint64_t seed, int n_eval) {
  if (n_users < 1) throw ConfigError("n_users must be >= 1");
  if (history_len < 50) {
    throw ConfigError("history_len must be >= 50 to keep the shot sweep valid");
  }
  if (n_eval < 4) throw ConfigError("n_eval must be >= 4");

  Rng root(seed);
  std::vector<SynthUser> users;
  for (int u = 0; u < n_users; ++u) {
    SynthUser user;
    char idbuf[16];
    std::snprintf(idbuf, sizeof idbuf, "user%03d", u);
    user.id = idbuf;
    user.bias = draw_bias(spec, root.split("bias").split(uint64_t(u)));

    Rng hist = root.split("hist").split(uint64_t(u));
    user.history.user_id = user.id;
    std::set<std::string> seen;
    for (int i = 0; i < history_len; ++i) {
      std::string input = sample_input(spec, hist);
      user.history.items.push_back(
          {input, biased_output(spec, user.bias, input)});
      seen.insert(input);
    }

    // Held-out queries: two where the bias shows, two where it does not, the
    // rest unconstrained; all inputs unseen in the history.
    Rng ev = root.split("eval").split(uint64_t(u));
    auto draw = [&](int want_active) {
      for (int attempt = 0; attempt < 20000; ++attempt) {
        std::string s = sample_input(spec, ev);
        if (seen.count(s)) continue;
        if (want_active >= 0 &&
            bias_active(spec, user.bias, s) != (want_active == 1)) {
          continue;
        }
        seen.insert(s);
        return s;
      }
      throw ConfigError("could not sample a distinct eval query");
    };
    std::vector<std::string> inputs;
    for (int i = 0; i < 2; ++i) inputs.push_back(draw(1));
    for (int i = 0; i < 2; ++i) inputs.push_back(draw(0));
    for (int i = 4; i < n_eval; ++i) inputs.push_back(draw(-1));
    ev.split("order").shuffle(inputs);
    for (const std::string& input : inputs) {
      user.eval.push_back({input, biased_output(spec, user.bias, input)});
    }
    users.push_back(std::move(user));
  }
  return users;
}

Splits make_splits(const TaskSpec& spec, const std::vector<SynthUser>& users,
                   const SplitPlan& plan, uint64_t seed) {
  (void)spec;
  if (plan.task_budget < 1 || plan.user_shots < 1 || plan.target_users < 1 ||
      plan.sharer_pool < 1) {
    throw ConfigError("all split budgets must be >= 1");
  }
  const size_t t = size_t(plan.target_users);
  const size_t s = size_t(plan.sharer_pool);
  if (t + s > users.size()) {
    throw ConfigError("target_users + sharer_pool exceeds the user count");
  }

  // Task-adaptation pool comes from sharers only, never from the
  // personalization subjects.
  std::vector<std::pair<int, int>> pool;
  for (size_t u = t; u < t + s; ++u) {
    for (size_t i = 0; i < users[u].history.items.size(); ++i) {
      pool.emplace_back(int(u), int(i));
    }
  }
  if (size_t(plan.task_budget) > pool.size()) {
    throw ConfigError("task_budget exceeds the sharer history pool");
  }
  Rng rng = Rng(seed).split("task-sample");
  rng.shuffle(pool);
  pool.resize(size_t(plan.task_budget));

  Splits out;
  out.task_indices = pool;
  for (size_t i = 0; i < pool.size(); ++i) {
    const SynthUser& u = users[size_t(pool[i].first)];
    const Example& ex = u.history.items[size_t(pool[i].second)];
    out.task.push_back(
        {"t" + std::to_string(i), u.id, ex.input, ex.output, "task"});
  }
  for (size_t u = 0; u < t; ++u) {
    const Dataset& items = users[u].history.items;
    if (size_t(plan.user_shots) > items.size()) {
      throw ConfigError("user_shots exceeds the history length");
    }
    out.shots[users[u].id] =
        Dataset(items.end() - plan.user_shots, items.end());
    out.evals[users[u].id] = users[u].eval;
  }
  return out;
}

DescVariant desc_variant_from_name(const std::string& name) {
  if (name == "canonical") return DescVariant::kCanonical;
  if (name == "generated-style") return DescVariant::kGeneratedStyle;
  if (name == "imprecise") return DescVariant::kImprecise;
  throw ConfigError("unknown description variant: " + name);
}

const char* desc_variant_name(DescVariant v) {
  switch (v) {
    case DescVariant::kCanonical:
      return "canonical";
    case DescVariant::kGeneratedStyle:
      return "generated-style";
    case DescVariant::kImprecise:
      return "imprecise";
  }
  throw ConfigError("unknown description variant");
}

std::string perturb_description(const TaskSpec& spec, DescVariant variant,
                                uint64_t seed) {
  switch (variant) {
    case DescVariant::kCanonical:
      return spec.description;
    case DescVariant::kGeneratedStyle:
      return make_generated(spec, seed);
    case DescVariant::kImprecise:
      return make_imprecise(spec, seed);
  }
  throw ConfigError("unknown description variant");
}

Benchmark build_benchmark(const BenchSettings& settings) {
  Benchmark bench;
  bench.settings = settings;
  bench.spec = gen_task(settings.kind, settings.task_seed, settings.n_classes);
  bench.users = gen_users(bench.spec, settings.n_users, settings.history_len,
                          settings.users_seed, settings.n_eval);
  bench.splits =
      make_splits(bench.spec, bench.users, settings.plan, settings.splits_seed);
  return bench;
}

void write_benchmark(const std::filesystem::path& dir, const Benchmark& bench) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_bytes_atomic(dir / "data.jsonl", render_jsonl(bench));
  write_bytes_atomic(dir / "manifest.json", render_manifest(bench));
}

Benchmark load_benchmark(const std::filesystem::path& dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_bytes(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("bad manifest: " + std::string(e.what()));
  }
  BenchSettings s;
  try {
    s.kind = task_kind_from_name(j.at("kind").get<std::string>());
    s.n_classes = j.at("n_classes").get<int>();
    s.task_seed = j.at("task_seed").get<uint64_t>();
    s.users_seed = j.at("users_seed").get<uint64_t>();
    s.splits_seed = j.at("splits_seed").get<uint64_t>();
    s.n_users = j.at("n_users").get<int>();
    s.history_len = j.at("history_len").get<int>();
    s.n_eval = j.at("n_eval").get<int>();
    s.plan.task_budget = j.at("task_budget").get<int>();
    s.plan.user_shots = j.at("user_shots").get<int>();
    s.plan.target_users = j.at("target_users").get<int>();
    s.plan.sharer_pool = j.at("sharer_pool").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError("bad manifest: " + std::string(e.what()));
  }
  Benchmark bench = build_benchmark(s);
  if (render_manifest(bench) != read_bytes(dir / "manifest.json")) {
    throw CorruptionError(
        "manifest.json does not match its own settings");
  }
  if (render_jsonl(bench) != read_bytes(dir / "data.jsonl")) {
    throw CorruptionError("data.jsonl does not match the manifest");
  }
  return bench;
}

}  // namespace prisp::bench

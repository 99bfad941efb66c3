#pragma once

#include "prisp/data.hpp"
#include "prisp/metrics.hpp"
#include "prisp/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace prisp::bench {

// Desk-scale personalization benchmark: three task families (majority-letter
// classification, plus-mark rating, positional word echo), each with a global
// rule fixed by the task seed and a per-user bias layered on top. Everything
// regenerates bitwise from (kind, seeds, plan), so datasets ship as manifests.

// Fifteen short label words with pairwise-distinct first letters; the first
// letter doubles as the class symbol inside classification inputs.
extern const std::vector<std::string>& lexicon();

// A task family instance: the global rule plus its natural-language
// description and two precomputed rewrites of it.
struct TaskSpec {
  TaskKind kind = TaskKind::kClassification;
  uint64_t seed = 0;

  // Classification: the K label words (answers). Ordinal: "1".."5".
  // Generation: the word pool inputs draw from.
  std::vector<std::string> labels;
  int input_len = 8;     // symbol-string length (classification / ordinal)
  bool echo_last = false;  // generation rule: echo first word, or first+last

  std::string description;     // canonical rule statement
  std::string desc_generated;  // reworded, all rule tokens kept
  std::string desc_imprecise;  // reworded with one rule token corrupted
};

// Per-user deviation from the global rule. Exactly one group applies,
// matching the task kind; defaults mean "no deviation".
struct UserBias {
  int victim = -1;     // classification: answers of this label index...
  int preferred = -1;  // ...are replaced by this one
  int offset = 0;      // ordinal: rating shift, result clipped to 1..5
  int from = -1;       // generation: this lexicon word in the output...
  int to = -1;         // ...is replaced by this one

  bool is_identity() const {
    return victim < 0 && preferred < 0 && offset == 0 && from < 0 && to < 0;
  }
};

struct SynthUser {
  std::string id;
  UserBias bias;
  UserHistory history;  // oldest first, outputs under this user's bias
  Dataset eval;         // held out, inputs disjoint from history
};

// How much of the generated data each consumer sees. Target users are the
// personalization subjects; sharers only contribute the task-adaptation pool.
struct SplitPlan {
  int task_budget = 50;  // rows sampled from sharer histories
  int user_shots = 10;   // most recent history items per target user
  int target_users = 8;
  int sharer_pool = 12;
};

// One emitted dataset row; split is "task", "history", or "eval".
struct SplitRow {
  std::string id;
  std::string user;
  std::string input;
  std::string output;
  std::string split;
};

struct Splits {
  std::vector<SplitRow> task;
  // Provenance of each task row: (index into users, index into history).
  std::vector<std::pair<int, int>> task_indices;
  std::map<std::string, Dataset> shots;  // per target user id
  std::map<std::string, Dataset> evals;
};

// ---- generation --------------------------------------------------------------

// Builds the global rule for one task family. n_classes picks the
// classification label count (2..15); the other kinds ignore it.
TaskSpec gen_task(TaskKind kind, uint64_t seed, int n_classes = 4);

// The global rule itself (total on any well-formed input).
std::string global_output(const TaskSpec& spec, const std::string& input);

// Global rule composed with a user bias.
std::string biased_output(const TaskSpec& spec, const UserBias& bias,
                          const std::string& input);

// Draws one input string from the task's input distribution.
std::string sample_input(const TaskSpec& spec, Rng& rng);

// True when the bias changes this input's output.
bool bias_active(const TaskSpec& spec, const UserBias& bias,
                 const std::string& input);

// Users with histories and held-out eval queries, all outputs biased.
// Biases are always non-neutral so personalization headroom exists on every
// instance; eval sets are sampled to contain biased and unbiased rows.
// history_len must be >= 50 so any shot sweep up to 50 stays valid.
std::vector<SynthUser> gen_users(const TaskSpec& spec, int n_users,
                                 int history_len, uint64_t seed,
                                 int n_eval = 6);

// Carves the generated users into the consumable splits: a task-adaptation
// sample drawn from sharer histories, per-target shot suffixes, and the fixed
// eval sets. Same seed, same index lists.
Splits make_splits(const TaskSpec& spec, const std::vector<SynthUser>& users,
                   const SplitPlan& plan, uint64_t seed);

// ---- description rewrites ----------------------------------------------------

enum class DescVariant { kCanonical, kGeneratedStyle, kImprecise };
DescVariant desc_variant_from_name(const std::string& name);
const char* desc_variant_name(DescVariant v);

// Canonical: returned unchanged. Generated-style: clause reordering that keeps
// every rule token. Imprecise: generated-style with one rule token misspelled.
std::string perturb_description(const TaskSpec& spec, DescVariant variant,
                                uint64_t seed);

// ---- persistence ---------------------------------------------------------------

// Everything needed to reproduce a dataset bitwise.
struct BenchSettings {
  TaskKind kind = TaskKind::kClassification;
  int n_classes = 4;
  uint64_t task_seed = 0;
  uint64_t users_seed = 0;
  uint64_t splits_seed = 0;
  int n_users = 20;
  int history_len = 60;
  int n_eval = 6;
  SplitPlan plan;
};

struct Benchmark {
  BenchSettings settings;
  TaskSpec spec;
  std::vector<SynthUser> users;
  Splits splits;
};

// Pure function of the settings.
Benchmark build_benchmark(const BenchSettings& settings);

// Writes data.jsonl (task rows, then per-user history and eval rows) and
// manifest.json into dir, creating it if needed.
void write_benchmark(const std::filesystem::path& dir, const Benchmark& bench);

// Rebuilds from the manifest and verifies data.jsonl matches it bitwise.
Benchmark load_benchmark(const std::filesystem::path& dir);

}  // namespace prisp::bench

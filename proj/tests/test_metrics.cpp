#include "prisp/metrics.hpp"
#include "prisp/rng.hpp"

#include "test_util.hpp"

#include <doctest.h>
#include <json.hpp>

#include <cmath>
#include <fstream>

using namespace prisp;

TEST_CASE("classification scoring: accuracy and macro-F1") {
  std::vector<std::string> space{"0", "1"};

  auto perfect = classify_score({"1", "0"}, {"1", "0"}, space);
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.macro_f1 == 1.0);

  // Confusion matrix by hand: each class has tp=1, fp=1, fn=1.
  auto mixed = classify_score({"1", "1", "0", "0"}, {"1", "0", "1", "0"}, space);
  CHECK(mixed.accuracy == doctest::Approx(0.5));
  CHECK(mixed.macro_f1 == doctest::Approx(0.5));

  // Out-of-space predictions miss everywhere but charge no false positives.
  auto invalid = classify_score({"??", "??"}, {"1", "0"}, space);
  CHECK(invalid.accuracy == 0.0);
  CHECK(invalid.macro_f1 == 0.0);

  // x: tp=1 fp=1 fn=1 -> 0.5; y: tp=0 fp=1 fn=1 -> 0; z: silent -> 0.
  auto three = classify_score({"x", "y", "x"}, {"x", "x", "y"}, {"x", "y", "z"});
  CHECK(three.accuracy == doctest::Approx(1.0 / 3.0));
  CHECK(three.macro_f1 == doctest::Approx(0.5 / 3.0));

  // The silent extra label dilutes the macro mean but not accuracy.
  auto narrow = classify_score({"x", "y"}, {"x", "y"}, {"x", "y"});
  auto wide = classify_score({"x", "y"}, {"x", "y"}, {"x", "y", "z"});
  CHECK(narrow.macro_f1 == 1.0);
  CHECK(wide.macro_f1 == doctest::Approx(2.0 / 3.0));
  CHECK(wide.accuracy == narrow.accuracy);

  CHECK_THROWS_AS(classify_score({"x"}, {"x", "y"}, space), ConfigError);
  CHECK_THROWS_AS(classify_score({}, {}, space), ConfigError);
  CHECK_THROWS_AS(classify_score({"x"}, {"q"}, {"x"}), ConfigError);
}

TEST_CASE("ordinal scoring: MAE, RMSE, rating parser") {
  auto perfect = ordinal_score({"3", "5"}, {"3", "5"});
  CHECK(perfect.mae == 0.0);
  CHECK(perfect.rmse == 0.0);

  auto off = ordinal_score({"1", "5"}, {"2", "3"});
  CHECK(off.mae == doctest::Approx(1.5));
  CHECK(off.rmse == doctest::Approx(std::sqrt(2.5)));

  CHECK(parse_rating("4") == 4);
  CHECK(parse_rating("score: 4 stars") == 4);
  CHECK(parse_rating("no digits at all") == 3);
  CHECK(parse_rating("") == 3);
  CHECK(parse_rating("7") == 5);
  CHECK(parse_rating("0") == 1);
  CHECK(parse_rating("12") == 5);

  // Unparsable predictions land on the midpoint.
  auto fuzzy = ordinal_score({"awful"}, {"4"});
  CHECK(fuzzy.mae == doctest::Approx(1.0));

  // Power-mean inequality holds on arbitrary inputs.
  Rng r(40);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::string> p, g;
    for (int i = 0; i < 10; ++i) {
      p.push_back(std::to_string(r.uniform_int(1, 5)));
      g.push_back(std::to_string(r.uniform_int(1, 5)));
    }
    auto s = ordinal_score(p, g);
    CHECK(s.rmse >= s.mae - 1e-12);
  }

  CHECK_THROWS_AS(ordinal_score({"1"}, {"1", "2"}), ConfigError);
  CHECK_THROWS_AS(ordinal_score({}, {}), ConfigError);
}

TEST_CASE("rouge: unigram overlap and LCS F1") {
  auto same = rouge("a b c", "a b c");
  CHECK(same.r1_f == doctest::Approx(1.0));
  CHECK(same.rl_f == doctest::Approx(1.0));

  auto close = rouge("a b c", "a b d");
  CHECK(close.r1_f == doctest::Approx(2.0 / 3.0));
  CHECK(close.rl_f == doctest::Approx(2.0 / 3.0));

  CHECK(rouge("", "a").r1_f == 0.0);
  CHECK(rouge("", "a").rl_f == 0.0);
  CHECK(rouge("", "").r1_f == 1.0);
  CHECK(rouge("", "").rl_f == 1.0);

  // Clipped counts: the three copies of "a" only match once.
  auto clipped = rouge("a a a", "a b");
  CHECK(clipped.r1_f == doctest::Approx(0.4));
  CHECK(clipped.rl_f == doctest::Approx(0.4));

  // Order matters for LCS but not for unigram overlap.
  auto swapped = rouge("b a", "a b");
  CHECK(swapped.r1_f == doctest::Approx(1.0));
  CHECK(swapped.rl_f == doctest::Approx(0.5));

  // Lowercasing and whitespace collapsing.
  auto cased = rouge("A   B", "a b");
  CHECK(cased.r1_f == doctest::Approx(1.0));
  CHECK(cased.rl_f == doctest::Approx(1.0));

  // Deleting an overlapping candidate token never raises either score.
  const std::string ref = "the cat sat on the mat";
  std::vector<std::string> cands = {"the cat sat on the mat",
                                    "cat sat on the mat", "cat sat the mat",
                                    "cat mat", "mat"};
  RougeScore prev{2.0, 2.0};
  for (const std::string& c : cands) {
    RougeScore s = rouge(c, ref);
    CHECK(s.r1_f <= prev.r1_f + 1e-12);
    CHECK(s.rl_f <= prev.rl_f + 1e-12);
    prev = s;
  }
}

TEST_CASE("task aggregation formulas") {
  CHECK(aggregate_task(TaskKind::kClassification, 0.428, 0.305) ==
        doctest::Approx(0.3665));
  CHECK(aggregate_task(TaskKind::kOrdinal, 0.339, 0.697) ==
        doctest::Approx(0.482));
  CHECK(aggregate_task(TaskKind::kOrdinal, 0.0, 0.0) == 1.0);
  CHECK(aggregate_task(TaskKind::kGeneration, 0.138, 0.122) ==
        doctest::Approx(0.130));
  // Bad ordinal models go negative and stay unclipped.
  CHECK(aggregate_task(TaskKind::kOrdinal, 1.5, 1.7) == doctest::Approx(-0.6));

  CHECK_THROWS_AS(aggregate_task(TaskKind::kClassification, 1.2, 0.5),
                  ConfigError);
  CHECK_THROWS_AS(aggregate_task(TaskKind::kGeneration, -0.1, 0.5),
                  ConfigError);
  CHECK_THROWS_AS(aggregate_task(TaskKind::kOrdinal, -0.1, 0.5), ConfigError);

  CHECK(overall_average({0.25}) == 0.25);
  CHECK(overall_average({0.2, 0.4}) == doctest::Approx(0.3));
  CHECK_THROWS_AS(overall_average({}), ConfigError);

  CHECK(task_kind_from_name("ordinal") == TaskKind::kOrdinal);
  CHECK(std::string(task_kind_name(TaskKind::kGeneration)) == "generation");
  CHECK_THROWS_AS(task_kind_from_name("regression"), ConfigError);
}

TEST_CASE("published score table reproduces from stored per-metric values") {
  std::ifstream in(std::string(PRISP_DATA_DIR) + "/table1_fixture.json");
  REQUIRE(in.good());
  nlohmann::json fixture = nlohmann::json::parse(in);

  std::vector<TaskKind> kinds;
  for (const auto& k : fixture["kinds"]) {
    kinds.push_back(task_kind_from_name(k.get<std::string>()));
  }
  REQUIRE(kinds.size() == 6);

  for (const auto& [method, row] : fixture["few_shot"]["rows"].items()) {
    std::vector<double> aggregates;
    const auto& metrics = row["metrics"];
    REQUIRE(metrics.size() == kinds.size());
    for (size_t t = 0; t < kinds.size(); ++t) {
      aggregates.push_back(aggregate_task(kinds[t], metrics[t][0].get<double>(),
                                          metrics[t][1].get<double>()));
    }
    double avg = overall_average(aggregates);
    double printed = row["printed_avg"].get<double>();
    INFO("few-shot row ", method);
    CHECK(std::abs(avg - printed) <= 0.0015);
  }

  const auto& lower = fixture["full_data"]["lower_better"];
  for (const auto& [method, row] : fixture["full_data"]["rows"].items()) {
    std::vector<double> oriented;
    const auto& scores = row["scores"];
    REQUIRE(scores.size() == kinds.size());
    for (size_t t = 0; t < kinds.size(); ++t) {
      double s = scores[t].get<double>();
      oriented.push_back(lower[t].get<bool>() ? 1.0 - s : s);
    }
    double avg = overall_average(oriented);
    double printed = row["printed_avg"].get<double>();
    INFO("full-data row ", method);
    CHECK(std::abs(avg - printed) <= 0.0015);
  }
}

TEST_CASE("adaptability ratio") {
  CHECK(adaptability(0.42, 0.42) == 1.0);
  CHECK(adaptability(0.25, 0.50) == doctest::Approx(0.5));
  CHECK(adaptability(0.75, 0.50) == doctest::Approx(1.5));  // may exceed 1
  CHECK_THROWS_AS(adaptability(0.25, 0.0), ConfigError);
  CHECK_THROWS_AS(adaptability(0.25, -0.1), ConfigError);
}

TEST_CASE("cost table normalization") {
  std::vector<CostRow> rows(3);
  rows[0] = {"full", 8192, 16384, 10.0, 0.0};
  rows[1] = {"ours", 4608, 9216, 6.0, 0.0};
  rows[2] = {"anchor-only", 0, 0, 0.0, 0.0};
  auto out = cost_report(rows);

  // The row that maxes both axes normalizes to exactly 1.
  CHECK(out[0].composite == 1.0);
  double mem_ratio = double(4608 + 9216) / double(8192 + 16384);
  CHECK(out[1].composite == doctest::Approx(0.5 * (mem_ratio + 0.6)));
  CHECK(out[2].composite == 0.0);
  CHECK_THROWS_AS(cost_report({}), ConfigError);

  // Zero-step runs cost memory only.
  std::vector<CostRow> idle(2);
  idle[0] = {"trained", 100, 200, 4.0, 0.0};
  idle[1] = {"frozen", 100, 200, 0.0, 0.0};
  auto norm = cost_report(idle);
  CHECK(norm[0].composite == 1.0);
  CHECK(norm[1].composite == doctest::Approx(0.5));
}

TEST_CASE("per-task scoring and report assembly") {
  TaskMetrics cls = score_task("toy-cls", TaskKind::kClassification,
                               {"a", "b", "a"}, {"a", "b", "b"}, {"a", "b"});
  CHECK(cls.m1 == doctest::Approx(2.0 / 3.0));
  CHECK(cls.aggregate == doctest::Approx(0.5 * (cls.m1 + cls.m2)));

  TaskMetrics ord = score_task("toy-ord", TaskKind::kOrdinal, {"2", "2"},
                               {"2", "4"}, {});
  CHECK(ord.m1 == doctest::Approx(1.0));
  CHECK(ord.m2 == doctest::Approx(std::sqrt(2.0)));

  TaskMetrics gen = score_task("toy-gen", TaskKind::kGeneration,
                               {"a b c", "x"}, {"a b d", "x"}, {});
  CHECK(gen.m1 == doctest::Approx((2.0 / 3.0 + 1.0) / 2.0));

  MetricReport rep = build_report({cls, ord, gen}, {});
  CHECK(rep.tasks.size() == 3);
  CHECK(rep.overall == doctest::Approx((cls.aggregate + ord.aggregate +
                                        gen.aggregate) / 3.0));
}

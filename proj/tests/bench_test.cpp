#include <gtest/gtest.h>

#include <spdlog/fmt/fmt.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "mtcd/bench.hpp"
#include "mtcd/simulation.hpp"
#include "test_util.hpp"

using namespace mtcd;
using mtcd::testing::TempDir;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

BenchReport sample_report() {
  BenchReport r;
  r.benchmark = "fsops";
  r.param_set_id = "create_file-c3";
  r.parameters = {{"concurrency", "3"}, {"op", "create_file"}};
  r.samples_ms = {1.5, 2.5, 4.0};
  r.derived = {{"aggregate_ops_per_s", 1000}};
  r.machine = {"host", "6.1", "cpu, model", 8, "gcc"};
  return r;
}

}  // namespace

TEST(Report, SamplesCsvHasOneRowPerSamplePlusMean) {
  TempDir dir;
  const auto files = emit_report(sample_report(), dir.path(), ReportFormat::kCsv);
  ASSERT_EQ(files.size(), 2u);
  const auto rows = lines(dir / "fsops-create_file-c3-samples.csv");
  ASSERT_EQ(rows.size(), 2u + 3u + 1u);
  EXPECT_EQ(rows[0].rfind("# machine,", 0), 0u);
  EXPECT_EQ(rows[1], "benchmark,param_set_id,sample_idx,value_ms");
  EXPECT_EQ(rows[2], "fsops,create_file-c3,0,1.5");
  EXPECT_EQ(rows[4], "fsops,create_file-c3,2,4");
  EXPECT_EQ(rows[5].rfind("fsops,create_file-c3,mean,2.6666", 0), 0u);

  const std::string agg = slurp(dir / "fsops-create_file-c3-aggregates.csv");
  EXPECT_NE(agg.find("fsops,create_file-c3,count,3\n"), std::string::npos);
  EXPECT_NE(agg.find("fsops,create_file-c3,max,4\n"), std::string::npos);
  EXPECT_NE(agg.find("fsops,create_file-c3,aggregate_ops_per_s,1000\n"), std::string::npos);
  EXPECT_NE(agg.find("fsops,create_file-c3,param.op,create_file\n"), std::string::npos);
  EXPECT_NE(agg.find("fsops,create_file-c3,partial,0\n"), std::string::npos);
}

TEST(Report, OutputIsDeterministic) {
  TempDir a;
  TempDir b;
  const BenchReport r = sample_report();
  for (auto fmt : {ReportFormat::kCsv, ReportFormat::kPlotData}) {
    const auto fa = emit_report(r, a.path(), fmt);
    const auto fb = emit_report(r, b.path(), fmt);
    ASSERT_EQ(fa.size(), fb.size());
    for (std::size_t i = 0; i < fa.size(); ++i) {
      EXPECT_EQ(fa[i].filename(), fb[i].filename());
      EXPECT_EQ(slurp(fa[i]), slurp(fb[i]));
    }
    const auto again = emit_report(r, a.path(), fmt);
    for (std::size_t i = 0; i < fa.size(); ++i) EXPECT_EQ(slurp(again[i]), slurp(fb[i]));
  }
}

TEST(Report, PlotDataPerSeries) {
  TempDir dir;
  BenchReport r = sample_report();
  auto files = emit_report(r, dir.path(), ReportFormat::kPlotData);
  ASSERT_EQ(files.size(), 1u);
  EXPECT_EQ(files[0].filename(), "fsops-create_file-c3-samples.dat");

  r.series = {{"t1", "processors", "efficiency", {{64, 0.9}, {128, 0.8}}}, {"t4", "processors", "efficiency", {}}};
  files = emit_report(r, dir.path(), ReportFormat::kPlotData);
  ASSERT_EQ(files.size(), 2u);
  const auto rows = lines(files[0]);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[1], "# processors efficiency");
  EXPECT_EQ(rows[2], "64 0.9");
}

TEST(Stats, PercentilesAndAggregates) {
  const std::vector<double> v{5, 1, 4, 2, 3};
  EXPECT_EQ(percentile(v, 50), 3);
  EXPECT_EQ(percentile(v, 90), 5);
  EXPECT_EQ(percentile(v, 20), 1);
  EXPECT_EQ(percentile({}, 50), 0);
  const Aggregates a = aggregate(v);
  EXPECT_EQ(a.count, 5u);
  EXPECT_DOUBLE_EQ(a.mean, 3);
  EXPECT_DOUBLE_EQ(a.stddev, std::sqrt(2.0));
  EXPECT_EQ(a.min, 1);
  EXPECT_EQ(a.max, 5);
}

TEST(Stats, SustainedThroughputIgnoresRampUpAndDown) {
  std::vector<double> finish;
  for (int i = 0; i < 1000; ++i) finish.push_back(i);  // 1 per ms
  finish.push_back(100000);                            // straggler
  EXPECT_NEAR(sustained_throughput(finish), 1000, 5);
}

TEST(Bench, SleepTaskIds) {
  const auto ts = sleep_tasks(3, 0.5, "x");
  ASSERT_EQ(ts.size(), 3u);
  EXPECT_EQ(ts[0].task_id, "x000000");
  EXPECT_EQ(ts[2].task_id, "x000002");
  EXPECT_EQ(ts[0].args, std::vector<std::string>{"0.5"});
}

TEST(Bench, SimulatedSweepIsExactlyEfficient) {
  EfficiencyOptions o;
  o.slots = 64;
  o.simulated = true;
  o.task_lengths_s = {0.25, 0.5, 1, 2, 4, 0};
  const BenchReport a = bench_efficiency_sweep(o);
  ASSERT_EQ(a.efficiency_points.size(), 5u);
  for (const auto& p : a.efficiency_points) {
    EXPECT_EQ(p.efficiency, 1.0) << p.task_length_s;
    EXPECT_FALSE(p.clamped);
    EXPECT_EQ(p.num_tasks, 640);
  }
  EXPECT_EQ(a.derived.at("boot_s"), 125.0);
  // Speedup identity: achieved equals ideal when efficiency is 1.
  for (double t : {0.25, 0.5, 1.0, 2.0, 4.0}) {
    const std::string tag = fmt::format("{}", t);
    EXPECT_DOUBLE_EQ(a.derived.at("speedup_t=" + tag), a.derived.at("ideal_speedup_t=" + tag));
    EXPECT_DOUBLE_EQ(a.derived.at("ideal_speedup_t=" + tag), 64.0);
  }
  EXPECT_EQ(a.series.size(), 5u);
  const BenchReport b = bench_efficiency_sweep(o);
  EXPECT_EQ(a.derived, b.derived);
}

TEST(Simulation, OverheadLowersEfficiency) {
  SimConfig c = uniform_sim(1, 8, 1, 80, 100);
  for (auto& e : c.dispatchers[0].executors) e.overhead_ms = 10;
  const SimResult r = simulate(c);
  EXPECT_EQ(r.completed, 80);
  EXPECT_NEAR(r.makespan_s, 10 * 0.11, 1e-9);
  EXPECT_NEAR(r.busy_s, 80 * 0.11, 1e-9);
  EXPECT_EQ(r.finish_ms.size(), 80u);
}

TEST(Simulation, DeterministicAcrossRuns) {
  SimConfig c = uniform_sim(3, 5, 2, 5000, 7);
  c.dispatchers[1].executors[0].speed = 3;
  const SimResult a = simulate(c);
  const SimResult b = simulate(c);
  EXPECT_EQ(a.tasks_per_dispatcher, b.tasks_per_dispatcher);
  EXPECT_EQ(a.finish_ms, b.finish_ms);
  EXPECT_EQ(a.completed, 5000);
}

TEST(Bench, RealThroughputSmoke) {
  TempDir dir;
  ThroughputOptions o;
  o.slots = 4;
  o.num_tasks = 200;
  o.work_dir = dir / "w";
  o.timeout_s = 60;
  const BenchReport r = bench_dispatch_throughput(o);
  EXPECT_FALSE(r.partial);
  EXPECT_EQ(r.derived.at("completed"), 200);
  EXPECT_EQ(r.derived.at("success"), 200);
  EXPECT_GT(r.derived.at("throughput_tasks_per_s"), 0);
}

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

#include "repspace/pipeline.hpp"
#include "test_support.hpp"

using namespace repspace;
using testing_support::TempDir;

namespace {

RunConfig small_config(const fs::path& out) {
  RunConfig c;
  c.output_dir = out;
  c.seed = 4;
  SyntheticConfig s;
  s.seed = 3;
  s.latent_dim = 4;
  s.train_tokens = 1200;
  s.train_stories = 4;
  s.test_tokens = 300;
  s.universal_id = "u";
  s.reps = {{"a", 1, 3, 0.1, 0, "", "m", 0},
            {"b", 2, 3, 0.1, 0, "", "m", 1},
            {"c", 3, 4, 0.1, 0, "", "c", std::nullopt},
            {"u", 4, 5, 0.1, 0, "", "u", std::nullopt}};
  SyntheticResponsesConfig r;
  r.subjects = 3;
  r.channels = 12;
  r.drivers = {"a", "c"};
  s.responses = r;
  c.synthetic = s;
  c.train.lr_encoder = 0.1;
  c.train.lr_decoder = 1.0;
  c.train.latent_dim = 6;
  c.train.batch_size = 128;
  c.train.max_batches = 200;
  c.cv.folds = 4;
  c.majority_threshold = 2;
  return c;
}

void run_through(Pipeline& p, const std::vector<std::string>& stages) {
  for (const auto& s : stages) p.run(s);
}

const std::vector<std::string> kToDecoders{"synth", "train-encoders", "train-decoders"};

std::map<std::string, std::string> tree_bytes(const fs::path& root, const std::string& sub) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root / sub))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = read_file(e.path());
  return out;
}

}  // namespace

TEST(Config, JsonRoundTripAndUnknownKeys) {
  const RunConfig c = small_config("/tmp/x");
  const json j = to_json(c);
  const RunConfig back = config_from_json(j);
  EXPECT_EQ(to_json(back), j);
  EXPECT_EQ(config_hash(back), config_hash(c));
  json bad = j;
  bad["geometry"]["dimz"] = 3;
  EXPECT_THROW(config_from_json(bad), ValidationError);
}

TEST(Config, HashIgnoresLocationAndWorkers) {
  RunConfig a = small_config("/tmp/a"), b = small_config("/tmp/b");
  b.workers = 8;
  b.max_retries = 5;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 99;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, EnvironmentOverrides) {
  RunConfig c = small_config("/tmp/a");
  ::setenv("REPSPACE_OUTPUT_DIR", "/tmp/elsewhere", 1);
  ::setenv("REPSPACE_WORKERS", "3", 1);
  apply_env_overrides(c);
  ::unsetenv("REPSPACE_OUTPUT_DIR");
  ::unsetenv("REPSPACE_WORKERS");
  EXPECT_EQ(c.output_dir, fs::path("/tmp/elsewhere"));
  EXPECT_EQ(c.workers, 3u);
  ::setenv("REPSPACE_WORKERS", "many", 1);
  EXPECT_THROW(apply_env_overrides(c), ValidationError);
  ::unsetenv("REPSPACE_WORKERS");
}

TEST(Config, HooksFromEnvironment) {
  ::setenv("REPSPACE_FAIL_AFTER_JOBS", "5", 1);
  ::setenv("REPSPACE_FAIL_JOB", "a/b:2", 1);
  const SchedulerHooks h = hooks_from_env();
  ::unsetenv("REPSPACE_FAIL_AFTER_JOBS");
  ::unsetenv("REPSPACE_FAIL_JOB");
  EXPECT_EQ(h.fail_after_jobs, 5u);
  EXPECT_EQ(h.transient_failures.at("a/b"), 2u);
}

TEST(Pipeline, DependencyErrorNamesMissingStage) {
  TempDir dir;
  Pipeline p(small_config(dir.path()));
  try {
    p.run("embed");
    FAIL();
  } catch (const DependencyError& e) {
    EXPECT_NE(std::string(e.what()).find("requires \"tournament\""), std::string::npos) << e.what();
  }
  EXPECT_THROW(p.run("train-encoders"), DependencyError);
  EXPECT_THROW(p.run("nope"), ValidationError);
}

TEST(Pipeline, RerunIsNoOpAndConfigChangeNeedsForce) {
  TempDir dir;
  std::ostringstream log;
  Pipeline p(small_config(dir.path()), {}, &log);
  run_through(p, {"synth", "train-encoders", "train-decoders", "tournament", "embed", "mds"});
  const std::string before = read_file(p.manifest_path());
  const StageOutcome again = p.run("mds");
  EXPECT_TRUE(again.skipped);
  EXPECT_EQ(read_file(p.manifest_path()), before);
  EXPECT_NE(log.str().find("mds: up to date"), std::string::npos);

  // 4 representations -> 16 decoders, each with its per-row error file.
  std::size_t decoders = 0, mse = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir / "decoders")) {
    const std::string name = e.path().filename().string();
    if (name.size() > 8 && name.substr(name.size() - 8) == ".mse.fbn") ++mse;
    else if (e.path().extension() == ".fbn") ++decoders;
  }
  EXPECT_EQ(decoders, 16u);
  EXPECT_EQ(mse, 16u);

  RunConfig changed = small_config(dir.path());
  changed.seed = 12;
  Pipeline q(changed);
  try {
    q.run("mds");
    FAIL();
  } catch (const ConfigMismatchError& e) {
    EXPECT_NE(std::string(e.what()).find("--force"), std::string::npos);
  }
}

TEST(Pipeline, TamperedOutputIsRecomputed) {
  TempDir dir;
  Pipeline p(small_config(dir.path()));
  run_through(p, {"synth", "train-encoders", "train-decoders", "tournament", "embed", "scree"});
  const std::string good = read_file(dir / "tables/scree.tsv");
  atomic_write(dir / "tables/scree.tsv", "garbage\n");
  const StageOutcome o = p.run("scree");
  EXPECT_FALSE(o.skipped);
  EXPECT_EQ(read_file(dir / "tables/scree.tsv"), good);
}

TEST(Pipeline, CrashResumeMatchesCleanRun) {
  TempDir clean_dir;
  Pipeline clean(small_config(clean_dir / "run"));
  run_through(clean, kToDecoders);
  clean.run("tournament");

  TempDir crash_dir;
  SchedulerHooks hooks;
  hooks.fail_after_jobs = 5;
  Pipeline crashing(small_config(crash_dir / "run"), hooks);
  crashing.run("synth");
  crashing.run("train-encoders");
  EXPECT_THROW(crashing.run("train-decoders"), InjectedCrash);
  EXPECT_THROW(crashing.run("tournament"), DependencyError);

  Pipeline resumed(small_config(crash_dir / "run"));
  resumed.run("train-decoders");
  EXPECT_EQ(resumed.last_grid().resumed, 5u);
  EXPECT_EQ(resumed.last_grid().trained, 11u);
  resumed.run("tournament");
  EXPECT_EQ(tree_bytes(crash_dir / "run", "decoders"), tree_bytes(clean_dir / "run", "decoders"));
  EXPECT_EQ(tree_bytes(crash_dir / "run", "tables"), tree_bytes(clean_dir / "run", "tables"));
}

TEST(Pipeline, TransientFailureIsRetried) {
  TempDir dir;
  SchedulerHooks hooks;
  hooks.transient_failures["b/c"] = 2;
  Pipeline p(small_config(dir.path()), hooks);
  run_through(p, kToDecoders);
  EXPECT_EQ(p.last_grid().retries, 2u);
  const std::string log = read_file(dir / "decoders/failures.log");
  EXPECT_NE(log.find("b/c\tattempt 1"), std::string::npos);
  EXPECT_NE(log.find("b/c\tattempt 2"), std::string::npos);

  TempDir dir2;
  SchedulerHooks fatal;
  fatal.transient_failures["a/a"] = 5;
  Pipeline q(small_config(dir2.path()), fatal);
  q.run("synth");
  q.run("train-encoders");
  EXPECT_THROW(q.run("train-decoders"), std::runtime_error);
}

TEST(Pipeline, WorkerCountDoesNotChangeOutputs) {
  TempDir a, b;
  RunConfig ca = small_config(a / "run"), cb = small_config(b / "run");
  ca.workers = 1;
  cb.workers = 8;
  Pipeline pa(ca), pb(cb);
  pa.run_all();
  pb.run_all();
  EXPECT_EQ(tree_bytes(a / "run", "tables"), tree_bytes(b / "run", "tables"));
  EXPECT_EQ(tree_bytes(a / "run", "report"), tree_bytes(b / "run", "report"));
}

TEST(Pipeline, ReportHasFiguresAndTables) {
  TempDir dir;
  Pipeline p(small_config(dir.path()));
  p.run_all();
  std::size_t svg = 0, tsv = 0;
  for (const auto& e : fs::directory_iterator(dir / "report")) {
    svg += e.path().extension() == ".svg";
    tsv += e.path().extension() == ".tsv";
  }
  EXPECT_EQ(svg, 6u);
  EXPECT_EQ(tsv, 6u);
  const std::string scatter = read_file(dir / "report/mds_scatter.svg");
  EXPECT_NE(scatter.find("MDS dim 1"), std::string::npos);
  EXPECT_NE(scatter.find("MDS dim 2"), std::string::npos);
  EXPECT_EQ(p.subjects(), std::vector<std::string>({"s1", "s2", "s3"}));
}

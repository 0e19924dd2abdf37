#include <gtest/gtest.h>

#include <sstream>

#include "mdd/checkpoint.hpp"
#include "mdd/cli.hpp"
#include "mdd/io.hpp"
#include "test_support.hpp"

namespace mdd {
namespace {

using mdd::testing::TempDir;

struct CliResult {
  int code = 0;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::vector<std::string> dataset_args(const std::filesystem::path& file) {
  return {"dataset", "--n", "40", "--mode", "vector", "--sup", "0.4", "--seed", "3", "--out", file.string()};
}

std::vector<std::string> train_args(const std::filesystem::path& data, const std::filesystem::path& dir) {
  return {"train", "--data", data.string(), "--steps", "3", "--batch", "8", "--width", "8", "--mults", "1,1",
          "--groups", "2", "--temb", "8", "--T", "50", "--out", dir.string()};
}

TEST(Cli, HelpExitsZero) {
  const CliResult r = run({"--help"});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("dataset"), std::string::npos);
  EXPECT_EQ(run({"train", "--help"}).code, kExitOk);
}

TEST(Cli, ConfigErrorsExitTwo) {
  TempDir dir;
  EXPECT_EQ(run({}).code, kExitConfig);
  EXPECT_EQ(run({"dataset", "--bogus"}).code, kExitConfig);
  EXPECT_EQ(run({"dataset", "--sup", "1.5", "--out", (dir.path() / "d.mdds").string()}).code, kExitConfig);
  EXPECT_EQ(run({"sample", "--phi", "linear"}).code, kExitConfig);
  EXPECT_EQ(run({"train", "--steps", "3"}).code, kExitConfig);  // --data missing

  write_file(dir.path() / "bad.ini", "n = 40\nnot_an_option = 1\n");
  const CliResult r = run({"dataset", "--config", (dir.path() / "bad.ini").string()});
  EXPECT_EQ(r.code, kExitConfig);
  EXPECT_NE(r.err.find("not_an_option"), std::string::npos);
}

TEST(Cli, RuntimeErrorsExitOne) {
  TempDir dir;
  const CliResult r = run({"sample", "--ck", (dir.path() / "missing.mddc").string(), "--out", dir.path().string()});
  EXPECT_EQ(r.code, kExitRuntime);
  EXPECT_FALSE(r.err.empty());
  write_file(dir.path() / "junk.mddc", "not a checkpoint");
  EXPECT_EQ(run({"sample", "--ck", (dir.path() / "junk.mddc").string(), "--out", dir.path().string()}).code,
            kExitRuntime);
}

TEST(Cli, DatasetIsBitReproducible) {
  TempDir dir;
  ASSERT_EQ(run(dataset_args(dir.path() / "a.mdds")).code, kExitOk);
  const CliResult r = run(dataset_args(dir.path() / "b.mdds"));
  ASSERT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("16 full"), std::string::npos);
  EXPECT_EQ(read_file(dir.path() / "a.mdds"), read_file(dir.path() / "b.mdds"));
  const KeyValues manifest = key_values_from_text(read_file(dir.path() / "a.mdds.manifest"));
  EXPECT_EQ(manifest.at("file.sha256"), sha256_hex(read_file(dir.path() / "a.mdds")));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "a.mdds.config"));
}

TEST(Cli, ConfigFileSetsDefaultsAndFlagsWin) {
  TempDir dir;
  write_file(dir.path() / "d.ini", "n = 40\nmode = vector\nsup = 0.4\nseed = 3\n");
  const auto out = dir.path() / "c.mdds";
  ASSERT_EQ(run({"dataset", "--config", (dir.path() / "d.ini").string(), "--out", out.string()}).code, kExitOk);
  ASSERT_EQ(run(dataset_args(dir.path() / "ref.mdds")).code, kExitOk);
  EXPECT_EQ(read_file(out), read_file(dir.path() / "ref.mdds"));

  const auto other = dir.path() / "seed4.mdds";
  ASSERT_EQ(run({"dataset", "--config", (dir.path() / "d.ini").string(), "--seed", "4", "--out", other.string()}).code,
            kExitOk);
  EXPECT_NE(read_file(other), read_file(out));
}

TEST(Cli, TrainSampleRoundTrip) {
  TempDir dir;
  const auto data = dir.path() / "d.mdds";
  ASSERT_EQ(run(dataset_args(data)).code, kExitOk);
  const CliResult t1 = run(train_args(data, dir.path() / "run1"));
  ASSERT_EQ(t1.code, kExitOk) << t1.err;
  ASSERT_EQ(run(train_args(data, dir.path() / "run2")).code, kExitOk);
  const auto ck = dir.path() / "run1" / "best.mddc";
  EXPECT_EQ(read_file(ck), read_file(dir.path() / "run2" / "best.mddc"));
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "run1" / "loss.csv"));
  EXPECT_EQ(load_checkpoint(ck).metadata.at("run.scheme"), "MDD");

  const CliResult s = run({"sample", "--ck", ck.string(), "--n", "3", "--steps", "5", "--out",
                           (dir.path() / "s").string()});
  ASSERT_EQ(s.code, kExitOk) << s.err;
  EXPECT_NE(s.out.find("B mae"), std::string::npos);
  const std::string csv = read_file(dir.path() / "s" / "samples.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "point,domain,kind,f0,f1,f2,f3,f4,f5,f6,f7");
  // 3 points, one condition row and two rows (generated, truth) per target.
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 5);
  const KeyValues meta = key_values_from_text(read_file(dir.path() / "s" / "metadata.txt"));
  EXPECT_EQ(meta.at("checkpoint.sha256"), sha256_hex(read_file(ck)));
}

}  // namespace
}  // namespace mdd

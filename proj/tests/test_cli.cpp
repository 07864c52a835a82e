#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("semiseg_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

Result run(const std::string& args, const fs::path& dir, const std::string& env = "") {
  const auto out = dir / "stdout.txt", err = dir / "stderr.txt";
  const std::string cmd = env + " " + SEMISEG_CLI_PATH + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, slurp(out), slurp(err)};
}

void write_config(const fs::path& p, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json j = {{"volume_size", {16, 16, 16}}, {"crop_size", {16, 16, 16}}, {"n_labelled", 2},
                      {"n_unlabelled", 4}, {"n_val", 2}, {"max_iters", 8}, {"S", 4}, {"R", 2},
                      {"probe_every", 4}, {"probe_cases", 2}, {"checkpoint_every", 4}, {"log_every", 2}};
  j.update(extra);
  std::ofstream(p) << j.dump(2);
}

std::vector<nlohmann::json> lines_of(const std::string& text) {
  std::vector<nlohmann::json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  return out;
}

}  // namespace

TEST_CASE("missing arguments print usage and fail") {
  const auto d = scratch("usage");
  auto r = run("train --out x", d);
  CHECK(r.code == 2);
  CHECK(r.err.find("Usage") != std::string::npos);
  r = run("", d);
  CHECK(r.code != 0);
  r = run("train --config " + (d / "nope.json").string() + " --out " + (d / "x").string(), d);
  CHECK(r.code == 2);
}

TEST_CASE("train, eval and rectify-report") {
  const auto d = scratch("pipeline");
  write_config(d / "c.json");
  auto r = run("train --config " + (d / "c.json").string() + " --out " + (d / "run").string(), d);
  REQUIRE(r.code == 0);
  for (const char* f : {"config.json", "run.json", "metrics.jsonl", "checkpoints/iter_4.ckpt",
                        "checkpoints/iter_8.ckpt", "checkpoints/final.ckpt"})
    CHECK(fs::exists(d / "run" / f));
  const auto run_json = nlohmann::json::parse(slurp(d / "run" / "run.json"));
  CHECK(run_json.contains("config_hash"));
  CHECK(run_json.contains("code_version"));
  const auto recs = lines_of(slurp(d / "run" / "metrics.jsonl"));
  CHECK(recs.back().value("final", false));

  r = run("eval --checkpoint " + (d / "run/checkpoints/final.ckpt").string() + " --out " + (d / "eval.jsonl").string(), d);
  REQUIRE(r.code == 0);
  const auto ev = lines_of(slurp(d / "eval.jsonl"));
  REQUIRE(ev.size() == 3);
  CHECK(ev[0].contains("hd95"));
  CHECK(ev[2].value("mean", false));
  CHECK(ev[2]["dice"].get<double>() >= 0.0);

  r = run("rectify-report --checkpoints " + (d / "run/checkpoints/iter_8.ckpt").string() + " " +
              (d / "run/checkpoints/iter_4.ckpt").string() + " --plot " + (d / "p.svg").string(),
          d);
  REQUIRE(r.code == 0);
  const auto rep = lines_of(r.out);
  REQUIRE(rep.size() == 2);
  CHECK(rep[0]["probe"].get<std::int64_t>() == 4);
  CHECK(rep[1]["probe"].get<std::int64_t>() == 8);
  CHECK(slurp(d / "p.svg").find("<svg") == 0);

  // An existing lock refuses a second writer.
  std::ofstream(d / "run" / ".lock") << "";
  r = run("train --config " + (d / "c.json").string() + " --out " + (d / "run").string(), d);
  CHECK(r.code == 2);
}

TEST_CASE("without rectification the report shows no change") {
  const auto d = scratch("norect");
  write_config(d / "c.json");
  auto r = run("train --config " + (d / "c.json").string() + " --ablate no-crln --out " + (d / "run").string(), d);
  REQUIRE(r.code == 0);
  r = run("rectify-report --checkpoints " + (d / "run/checkpoints/final.ckpt").string(), d);
  REQUIRE(r.code == 0);
  const auto rep = lines_of(r.out);
  REQUIRE(rep.size() == 1);
  CHECK(rep[0]["reliable_before"] == rep[0]["reliable_after"]);
  CHECK(rep[0]["pl_dice_before"] == rep[0]["pl_dice_after"]);
}

TEST_CASE("environment overrides are validated") {
  const auto d = scratch("env");
  write_config(d / "c.json");
  auto r = run("train --config " + (d / "c.json").string() + " --out " + (d / "run").string(), d,
               "SEMISEG_TAU=0.5 SEMISEG_TAU_W=0.6");
  CHECK(r.code == 2);
  r = run("train --config " + (d / "c.json").string() + " --out " + (d / "run2").string(), d, "SEMISEG_R=zero");
  CHECK(r.code == 2);
}

TEST_CASE("identical runs write identical logs") {
  const auto d = scratch("repeat");
  write_config(d / "c.json");
  REQUIRE(run("train --config " + (d / "c.json").string() + " --out " + (d / "a").string(), d).code == 0);
  REQUIRE(run("train --config " + (d / "c.json").string() + " --out " + (d / "b").string(), d).code == 0);
  CHECK(slurp(d / "a" / "metrics.jsonl") == slurp(d / "b" / "metrics.jsonl"));
  CHECK(slurp(d / "a" / "checkpoints" / "final.ckpt") == slurp(d / "b" / "checkpoints" / "final.ckpt"));
}

TEST_CASE("a corrupt checkpoint is a data error") {
  const auto d = scratch("corrupt");
  std::ofstream(d / "bad.ckpt") << "SSCKPT01garbage";
  auto r = run("eval --checkpoint " + (d / "bad.ckpt").string(), d);
  CHECK(r.code == 3);
  r = run("rectify-report --checkpoints " + (d / "missing.ckpt").string(), d);
  CHECK(r.code == 3);
}

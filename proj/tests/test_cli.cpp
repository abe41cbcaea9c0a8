#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "json.hpp"
#include "moelab/moelab.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using namespace moelab;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(MOELAB_BIN) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

struct Workspace {
  fs::path dir;

  Workspace() {
    dir = fs::temp_directory_path() / "moelab_cli_ws";
    fs::remove_all(dir);
    fs::create_directories(dir);
    // small corpus + config sized for fast runs
    const auto text = support::synth_text(120000, 99);
    std::ofstream corpus(dir / "corpus.txt", std::ios::binary);
    corpus.write(reinterpret_cast<const char*>(text.data()),
                 static_cast<std::streamsize>(text.size()));
    corpus.close();

    nlohmann::json cfg;
    cfg["model"] = {{"d_model", 8}, {"n_layers", 2}, {"n_experts", 4}, {"top_k", 2},
                    {"d_hidden", 6}, {"seq_len", 16}, {"seed", 7}};
    cfg["corpus"] = (dir / "corpus.txt").string();
    cfg["train"] = {{"budget", 512}, {"batch_size", 2}, {"seed", 1}};
    cfg["calibration"] = {{"n_sequences", 4}, {"seq_len", 12}, {"seed", 2}};
    cfg["prune"] = {{"strategy", "oneshot"}, {"criterion", "EAN"}, {"sparsity", 0.5}};
    cfg["finetune"] = {{"base_budget", 0}};
    std::ofstream out(dir / "config.json");
    out << cfg.dump(2);
  }

  ~Workspace() { fs::remove_all(dir); }

  std::string p(const char* name) const { return (dir / name).string(); }
};

}  // namespace

TEST_CASE("cli: usage errors exit 1") {
  CHECK(run("") == 1);                       // missing subcommand
  CHECK(run("score") == 1);                  // missing required flags
  CHECK(run("definitely-not-a-command") == 1);
}

TEST_CASE("cli: unknown criterion exits 1 and lists the valid names") {
  Workspace ws;
  REQUIRE(run("train --config " + ws.p("config.json") + " --out " + ws.p("trained")) == 0);
  const std::string cmd = std::string(MOELAB_BIN) + " score --model " +
                          ws.p("trained") + "/model.moel --criterion BOGUS --out " +
                          ws.p("sc") + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  std::string output;
  char buf[256];
  while (fgets(buf, sizeof(buf), pipe)) output += buf;
  const int status = pclose(pipe);
  CHECK(WEXITSTATUS(status) == 1);
  CHECK(output.find("EWS") != std::string::npos);
  CHECK(output.find("EGN") != std::string::npos);
}

TEST_CASE("cli: full workflow with exit code 0 and validation exit code 2") {
  Workspace ws;
  REQUIRE(run("train --config " + ws.p("config.json") + " --out " + ws.p("trained")) == 0);
  CHECK(fs::exists(ws.p("trained") + "/model.moel"));
  CHECK(fs::exists(ws.p("trained") + "/run_info.json"));

  const std::string model = ws.p("trained") + "/model.moel";
  const std::string corpus = ws.p("corpus.txt");

  REQUIRE(run("calibrate --model " + model + " --corpus " + corpus +
              " --sequences 4 --seq-len 12 --out " + ws.p("cal")) == 0);
  CHECK(fs::exists(ws.p("cal") + "/stats.moel"));

  REQUIRE(run("score --model " + model + " --stats " + ws.p("cal") + "/stats.moel" +
              " --criterion EAN --out " + ws.p("scored")) == 0);
  CHECK(fs::exists(ws.p("scored") + "/scores.csv"));

  REQUIRE(run("prune --model " + model + " --corpus " + corpus +
              " --strategy oneshot --criterion EAN --sparsity 0.5 --sequences 4"
              " --out " + ws.p("pruned")) == 0);
  CHECK(fs::exists(ws.p("pruned") + "/pruned_model.moel"));
  CHECK(fs::exists(ws.p("pruned") + "/plan.json"));

  REQUIRE(run("eval --model " + ws.p("pruned") + "/pruned_model.moel --corpus " +
              corpus + " --out " + ws.p("evald")) == 0);

  REQUIRE(run("finetune --model " + ws.p("pruned") + "/pruned_model.moel --corpus " +
              corpus + " --budget 64 --batch 2 --out " + ws.p("ft")) == 0);

  REQUIRE(run("ablate --model " + model + " --corpus " + corpus + " --out " +
              ws.p("abl")) == 0);
  CHECK(fs::exists(ws.p("abl") + "/ablation.csv"));

  // second plan for comparison
  REQUIRE(run("prune --model " + model + " --corpus " + corpus +
              " --strategy oneshot --criterion random --sparsity 0.5"
              " --random-seed 3 --out " + ws.p("pruned_r")) == 0);
  REQUIRE(run("compare --plan-a " + ws.p("pruned") + "/plan.json --plan-b " +
              ws.p("pruned_r") + "/plan.json --out " + ws.p("cmp")) == 0);
  CHECK(fs::exists(ws.p("cmp") + "/divergence.csv"));

  // validation failures exit 2
  CHECK(run("prune --model " + model + " --corpus " + corpus +
            " --strategy oneshot --criterion EWN --sparsity 0.3 --out " +
            ws.p("badprune")) == 2);
  CHECK(run("eval --model /nonexistent.moel --corpus " + corpus + " --out " +
            ws.p("bade")) == 2);
}

TEST_CASE("cli: prune with sparsity 0 reproduces the input checkpoint weights") {
  Workspace ws;
  REQUIRE(run("train --config " + ws.p("config.json") + " --out " + ws.p("trained")) == 0);
  const std::string model = ws.p("trained") + "/model.moel";
  REQUIRE(run("prune --model " + model + " --corpus " + ws.p("corpus.txt") +
              " --strategy oneshot --criterion EWN --sparsity 0 --out " +
              ws.p("noop")) == 0);
  MoEModel a = load_model(model);
  MoEModel b = load_model(ws.p("noop") + "/pruned_model.moel");
  CHECK(model_digest(a) == model_digest(b));
}

TEST_CASE("cli: pipeline twice from one config yields identical manifests") {
  Workspace ws;
  REQUIRE(run("pipeline --config " + ws.p("config.json") + " --out " + ws.p("p1")) == 0);
  REQUIRE(run("pipeline --config " + ws.p("config.json") + " --out " + ws.p("p2")) == 0);
  std::ifstream m1(ws.p("p1") + "/manifest.json"), m2(ws.p("p2") + "/manifest.json");
  REQUIRE(m1);
  REQUIRE(m2);
  const std::string s1((std::istreambuf_iterator<char>(m1)),
                       std::istreambuf_iterator<char>());
  const std::string s2((std::istreambuf_iterator<char>(m2)),
                       std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
}

TEST_CASE("cli: config with unknown keys is rejected") {
  Workspace ws;
  nlohmann::json cfg;
  std::ifstream in(ws.p("config.json"));
  in >> cfg;
  cfg["surprise"] = 1;
  std::ofstream out(ws.p("bad_config.json"));
  out << cfg.dump();
  out.close();
  CHECK(run("pipeline --config " + ws.p("bad_config.json") + " --out " +
            ws.p("pbad")) == 2);
}

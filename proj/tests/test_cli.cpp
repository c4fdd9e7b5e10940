#include "doctest.h"

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "csavae/checkpoint.hpp"
#include "csavae/digest.hpp"
#include "csavae/evaluation.hpp"
#include "csavae/sem.hpp"
#include "csavae/steering.hpp"
#include "httplib.h"
#include "support.hpp"

using namespace csavae;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

// Runs the command-line tool, capturing stdout; stderr goes to a side file.
Run csavae_run(const std::string& args) {
  static const fs::path err = testing::scratch_dir("cli-stderr") / "stderr.txt";
  const std::string cmd = std::string(CSAVAE_CLI_PATH) + " " + args + " 2>" + err.string();
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  REQUIRE(p != nullptr);
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Synthetic data plus a short training run shared by the cases below.
struct Workspace {
  fs::path root, data, run;

  Workspace() {
    root = testing::scratch_dir("cli");
    data = root / "synth";
    run = root / "run";
    REQUIRE(csavae_run("synth --seed 7 --out " + data.string()).status == 0);
    std::ofstream(root / "cfg.json") << R"({"d": 8, "hidden": 16, "k": 4, "batch_size": 100, "max_epochs": 3})";
    REQUIRE(csavae_run("train --config " + (root / "cfg.json").string() + " --seed 2 --data " +
                       (data / "split").string() + " --out " + run.string())
                .status == 0);
  }
  fs::path ckpt() const { return run / "checkpoint.ckpt"; }
  std::string split() const { return (data / "split").string(); }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_SUITE("command line") {
  TEST_CASE("synth is reproducible and writes the three-edge truth") {
    const fs::path a = testing::scratch_dir("cli-synth-a"), b = testing::scratch_dir("cli-synth-b");
    REQUIRE(csavae_run("synth --out " + a.string()).status == 0);
    REQUIRE(csavae_run("synth --seed 7 --out " + b.string()).status == 0);
    for (const auto& e : fs::recursive_directory_iterator(a)) {
      if (!e.is_regular_file()) continue;
      const fs::path rel = fs::relative(e.path(), a);
      CHECK(sha256_file(e.path()) == sha256_file(b / rel));
    }
    const json truth = json::parse(slurp(a / "true_graph.json"));
    CHECK(truth["edges"].size() == 3);
    CHECK(sem::graph_from_document(truth) ==
          Matrix::from_rows({{0, 1, 0, 0}, {0, 0, 1, 1}, {0, 0, 0, 0}, {0, 0, 0, 0}}));
  }

  TEST_CASE("train writes a checkpoint, an epoch log and a manifest") {
    auto& w = workspace();
    CHECK(fs::exists(w.ckpt()));
    std::ifstream log(w.run / "epochs.jsonl");
    std::string line;
    int epochs = 0;
    while (std::getline(log, line)) {
      const json e = json::parse(line);
      CHECK(e.contains("val_ndcg@10"));
      CHECK(e.contains("wall_seconds"));
      ++epochs;
    }
    CHECK(epochs == 3);
    const json m = json::parse(slurp(w.run / "manifest.json"));
    CHECK(m["command"] == "train");
    CHECK(m["settings"]["config"]["d"] == 8);
    CHECK(m["settings"]["seed"] == 2);
    CHECK(m["outputs"]["checkpoint.ckpt"] == sha256_file(w.ckpt()));
    CHECK(m["inputs"].contains("data"));
  }

  TEST_CASE("train twice into fresh directories gives identical checkpoints; resume continues") {
    auto& w = workspace();
    const fs::path again = w.root / "again", part = w.root / "part", rest = w.root / "rest";
    const std::string base = "train --config " + (w.root / "cfg.json").string() + " --seed 2 --data " + w.split();
    REQUIRE(csavae_run(base + " --out " + again.string()).status == 0);
    CHECK(sha256_file(again / "checkpoint.ckpt") == sha256_file(w.ckpt()));
    REQUIRE(csavae_run(base + " --stop-after 1 --out " + part.string()).status == 0);
    REQUIRE(csavae_run(base + " --resume " + (part / "checkpoint.ckpt").string() + " --out " + rest.string()).status == 0);
    CHECK(sha256_file(rest / "checkpoint.ckpt") == sha256_file(w.ckpt()));
  }

  TEST_CASE("flags override config keys") {
    auto& w = workspace();
    const fs::path out = w.root / "override";
    REQUIRE(csavae_run("train --config " + (w.root / "cfg.json").string() + " --k 2 --max-epochs 1 --data " +
                       w.split() + " --out " + out.string())
                .status == 0);
    const json m = json::parse(slurp(out / "manifest.json"));
    CHECK(m["settings"]["config"]["k"] == 2);
    CHECK(m["settings"]["config"]["max_epochs"] == 1);
    CHECK(m["settings"]["config"]["d"] == 8);
  }

  TEST_CASE("eval writes a versioned results table with graph scores") {
    auto& w = workspace();
    const fs::path out = w.root / "eval";
    const Run r = csavae_run("eval --checkpoint " + w.ckpt().string() + " --confounders both --truth " +
                             (w.data / "true_graph.json").string() + " --out " + out.string());
    REQUIRE(r.status == 0);
    CHECK(r.out.find("recall@10") != std::string::npos);
    const auto table = ResultsTable::from_tsv(slurp(out / "results.tsv"));
    std::set<std::string> variants;
    for (const auto& row : table.rows) variants.insert(row.variant);
    CHECK(variants == std::set<std::string>{"graph", "with-confounders", "without-confounders"});
    CHECK(fs::exists(out / "manifest.json"));
  }

  TEST_CASE("do: all-ones mask has zero delta; output matches the service path") {
    auto& w = workspace();
    std::ofstream(w.root / "ones.json") << R"({"mask": [[1,1,1,1],[1,1,1,1],[1,1,1,1],[1,1,1,1]]})";
    const Run r = csavae_run("do --checkpoint " + w.ckpt().string() + " --user u007 --top 5 --mask-file " +
                             (w.root / "ones.json").string());
    REQUIRE(r.status == 0);
    const json doc = json::parse(r.out);
    CHECK(doc["before"] == doc["after"]);
    CHECK(doc["avp_delta"] == 0.0);
    CHECK(doc["before"]["items"].size() == 5);
    if (doc.contains("recall_delta")) CHECK(doc["recall_delta"] == 0.0);
    CHECK(doc["checkpoint_digest"] == sha256_file(w.ckpt()));

    // The all-zero mask goes through the same code as the HTTP endpoint.
    const std::string zeros = R"({"K": 7, "mask": [[0,0,0,0],[0,0,0,0],[0,0,0,0],[0,0,0,0]]})";
    std::ofstream(w.root / "zeros.json") << zeros;
    const fs::path out = w.root / "do";
    const Run z = csavae_run("do --checkpoint " + w.ckpt().string() + " --user u007 --mask-file " +
                             (w.root / "zeros.json").string() + " --out " + out.string());
    REQUIRE(z.status == 0);
    const json cli = json::parse(z.out);
    CHECK(json::parse(slurp(out / "intervention.json")) == cli);
    const auto engine = SteeringEngine::open(w.ckpt(), w.split());
    const json direct = engine->intervene("u007", parse_intervention(json::parse(zeros), 4, 8)).to_json();
    CHECK(cli["before"] == direct["before"]);
    CHECK(cli["after"] == direct["after"]);
    CHECK(cli["changed_positions"] == direct["changed_positions"]);

    CHECK(csavae_run("do --checkpoint " + w.ckpt().string() + " --user nobody").status != 0);
    std::ofstream(w.root / "bad.json") << R"({"mask": [[1]]})";
    CHECK(csavae_run("do --checkpoint " + w.ckpt().string() + " --user u007 --mask-file " +
                     (w.root / "bad.json").string())
              .status != 0);
  }

  TEST_CASE("export-graph emits the checkpoint's graph document") {
    auto& w = workspace();
    const Run r = csavae_run("export-graph --checkpoint " + w.ckpt().string());
    REQUIRE(r.status == 0);
    const json doc = json::parse(r.out);
    const CsaVae model = model_from_checkpoint(load_checkpoint(w.ckpt()));
    CHECK(doc == sem::export_graph(model.global_graph()));
    CHECK(doc["k"] == 4);
    CHECK(doc["threshold"] == 0.5);
    const fs::path file = w.root / "graph.json";
    REQUIRE(csavae_run("export-graph --checkpoint " + w.ckpt().string() + " --out " + file.string()).status == 0);
    CHECK(json::parse(slurp(file)) == doc);
    // The exported document is itself a valid intervention file.
    CHECK(csavae_run("do --checkpoint " + w.ckpt().string() + " --user u001 --mask-file " + file.string()).status == 0);
  }

  TEST_CASE("serve answers a liveness probe") {
    auto& w = workspace();
    int port = 0;
    {
      httplib::Server probe;  // borrow a free port number
      port = probe.bind_to_any_port("127.0.0.1");
    }
    const pid_t pid = fork();
    REQUIRE(pid >= 0);
    if (pid == 0) {
      if (!freopen("/dev/null", "w", stderr)) _exit(126);
      const std::string p = std::to_string(port);
      execl(CSAVAE_CLI_PATH, CSAVAE_CLI_PATH, "serve", "--checkpoint", w.ckpt().c_str(), "--port", p.c_str(),
            static_cast<char*>(nullptr));
      _exit(127);
    }
    httplib::Client cli("127.0.0.1", port);
    httplib::Result res;
    for (int i = 0; i < 100 && !res; ++i) {
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
      res = cli.Get("/health");
    }
    kill(pid, SIGTERM);
    waitpid(pid, nullptr, 0);
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(json::parse(res->body)["status"] == "ok");
    CHECK(res->get_header_value("X-Checkpoint-Digest") == sha256_file(w.ckpt()));
  }

  TEST_CASE("bad invocations fail with a nonzero status") {
    auto& w = workspace();
    CHECK(csavae_run("").status != 0);
    CHECK(csavae_run("train --data " + w.split() + " --out " + (w.root / "x").string() + " --bogus 1").status != 0);
    const fs::path empty = testing::scratch_dir("cli-empty");
    CHECK(csavae_run("train --data " + empty.string() + " --out " + (w.root / "y").string()).status != 0);
    CHECK(csavae_run("eval --checkpoint /nonexistent.ckpt").status != 0);
    std::ofstream(w.root / "typo.json") << R"({"learning_rat": 0.1})";
    CHECK(csavae_run("train --config " + (w.root / "typo.json").string() + " --data " + w.split() + " --out " +
                     (w.root / "z").string())
              .status != 0);
  }
}

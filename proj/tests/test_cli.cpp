// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line binary: artifact layout, exit
// codes, determinism of reruns, and resume behavior. Each test drives the
// real executable through a shell.

#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "shishu/checkpoint.hpp"
#include "shishu/config.hpp"
#include "shishu/io.hpp"
#include "shishu/model.hpp"

namespace fs = std::filesystem;
using shishu::ModelConfig;

namespace {

struct RunResult {
  int exit_code = -1;
  std::string output;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(SHISHU_CLI_PATH) + " " + args + " 2>&1";
  std::FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult r;
  char buf[4096];
  std::size_t got = 0;
  while ((got = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.output.append(buf, got);
  const int status = pclose(pipe);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

// Fresh scratch directory per test run.
fs::path scratch_dir(const std::string& tag) {
  static int counter = 0;
  const fs::path p = fs::temp_directory_path() /
                     ("shishu_cli_" + tag + "_" + std::to_string(getpid()) + "_" +
                      std::to_string(counter++));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string quoted(const fs::path& p) { return "'" + p.string() + "'"; }

// Deterministic byte corpus with enough variety that losses move.
std::string synthetic_corpus(std::size_t min_bytes) {
  std::string text;
  int i = 0;
  while (text.size() < min_bytes) {
    text += "fn block_" + std::to_string(i) + "(x) { return x * " + std::to_string(i % 97) +
            " + norm(x); }\n";
    ++i;
  }
  return text;
}

std::string tiny_train_config() {
  return
      "hidden_size = 32\n"
      "intermediate_size = 48\n"
      "n_layers = 4\n"
      "n_decoder_layers = 2\n"
      "n_heads = 2\n"
      "n_kv_heads = 1\n"
      "vocab_size = 258\n"
      "max_seq_len = 64\n"
      "learning_rate = 1e-3\n"
      "total_steps = 6\n"
      "eval_interval = 3\n"
      "effective_batch = 2\n"
      "micro_batch = 2\n"
      "block_size = 32\n"
      "val_blocks = 2\n"
      "seed = 42\n";
}

// metrics.csv with the trailing wall-clock field removed from data rows;
// the rest of the file is byte-reproducible.
std::string mask_wall_ms(const std::string& csv) {
  std::string out;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#' && line.find("step,") != 0) {
      const auto comma = line.rfind(',');
      if (comma != std::string::npos) line.resize(comma);
    }
    out += line;
    out += '\n';
  }
  return out;
}

fs::path write_file(const fs::path& dir, const std::string& name, const std::string& text) {
  const fs::path p = dir / name;
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

}  // namespace

TEST_CASE("count-params reproduces the published model sizes") {
  const fs::path cfg = fs::path(SHISHU_SOURCE_DIR) / "configs" / "mobilellm_125m.cfg";
  RunResult r = run_cli("count-params --config " + quoted(cfg));
  CHECK(r.exit_code == 0);
  CHECK(r.output == "124635456\n");

  const fs::path shishu_cfg = fs::path(SHISHU_SOURCE_DIR) / "configs" / "shishulm_125.cfg";
  r = run_cli("count-params --config " + quoted(shishu_cfg));
  CHECK(r.exit_code == 0);
  CHECK(r.output == "83921472\n");
}

TEST_CASE("usage errors exit 1 and help exits 0") {
  CHECK(run_cli("definitely-not-a-subcommand").exit_code == 1);
  CHECK(run_cli("train").exit_code == 1);              // missing required flags
  CHECK(run_cli("").exit_code == 1);                   // no subcommand
  CHECK(run_cli("--help").exit_code == 0);
  CHECK(run_cli("probe --help").exit_code == 0);
  CHECK(run_cli("bench --mode sideways --parent a --shishu b --out-dir c").exit_code == 1);
}

TEST_CASE("train writes artifacts and reruns reproduce them") {
  const fs::path dir = scratch_dir("train");
  const fs::path cfg = write_file(dir, "tiny.cfg", tiny_train_config());
  const fs::path corpus = write_file(dir, "corpus.txt", synthetic_corpus(40000));

  RunResult r = run_cli("train --config " + quoted(cfg) + " --corpus " + quoted(corpus) +
                        " --out-dir " + quoted(dir / "run1"));
  INFO(r.output);
  REQUIRE(r.exit_code == 0);

  const std::string metrics1 = shishu::read_file(dir / "run1" / "metrics.csv");
  // one row per step plus provenance and header lines
  CHECK(std::count(metrics1.begin(), metrics1.end(), '\n') == 6 + 2);

  auto model = shishu::load_checkpoint<float>(dir / "run1" / "model.ckpt");
  CHECK(model.config.n_layers == 4);

  r = run_cli("train --config " + quoted(cfg) + " --corpus " + quoted(corpus) +
              " --out-dir " + quoted(dir / "run2"));
  REQUIRE(r.exit_code == 0);
  const std::string metrics2 = shishu::read_file(dir / "run2" / "metrics.csv");
  CHECK(mask_wall_ms(metrics1) == mask_wall_ms(metrics2));
  CHECK(shishu::read_file(dir / "run1" / "model.ckpt") ==
        shishu::read_file(dir / "run2" / "model.ckpt"));

  fs::remove_all(dir);
}

TEST_CASE("train on a missing corpus fails without leaving artifacts") {
  const fs::path dir = scratch_dir("train_missing");
  const fs::path cfg = write_file(dir, "tiny.cfg", tiny_train_config());

  RunResult r = run_cli("train --config " + quoted(cfg) + " --corpus " +
                        quoted(dir / "absent.txt") + " --out-dir " + quoted(dir / "out"));
  CHECK(r.exit_code == 2);
  CHECK(r.output.find("absent.txt") != std::string::npos);
  CHECK(!fs::exists(dir / "out"));

  fs::remove_all(dir);
}

TEST_CASE("generate is deterministic and n=0 prints nothing") {
  const fs::path dir = scratch_dir("generate");
  const fs::path cfg = write_file(dir, "tiny.cfg", tiny_train_config());
  const fs::path corpus = write_file(dir, "corpus.txt", synthetic_corpus(40000));
  REQUIRE(run_cli("train --config " + quoted(cfg) + " --corpus " + quoted(corpus) +
                  " --out-dir " + quoted(dir / "run"))
              .exit_code == 0);
  const std::string ckpt = quoted(dir / "run" / "model.ckpt");

  const std::string args = "generate --checkpoint " + ckpt +
                           " --prompt 'fn block' -n 16 --temperature 0.9 --seed 11";
  RunResult a = run_cli(args);
  RunResult b = run_cli(args);
  CHECK(a.exit_code == 0);
  CHECK(a.output == b.output);

  RunResult c = run_cli("generate --checkpoint " + ckpt + " --prompt x --seed 3 -n 16");
  RunResult d = run_cli("generate --checkpoint " + ckpt + " --prompt x --seed 4 -n 16 "
                        "--temperature 1.2");
  CHECK(c.exit_code == 0);
  CHECK(d.exit_code == 0);

  RunResult e = run_cli("generate --checkpoint " + ckpt + " -n 0");
  CHECK(e.exit_code == 0);
  CHECK(e.output.empty());

  // the checkpoint is read, never rewritten
  const std::string before = shishu::read_file(dir / "run" / "model.ckpt");
  run_cli("generate --checkpoint " + ckpt + " -n 8");
  CHECK(shishu::read_file(dir / "run" / "model.ckpt") == before);

  fs::remove_all(dir);
}

TEST_CASE("probe writes one report per usable length and skips short ones") {
  const fs::path dir = scratch_dir("probe");
  const fs::path cfg = write_file(dir, "tiny.cfg", tiny_train_config());
  const fs::path corpus = write_file(dir, "corpus.txt", synthetic_corpus(40000));
  REQUIRE(run_cli("train --config " + quoted(cfg) + " --corpus " + quoted(corpus) +
                  " --out-dir " + quoted(dir / "run"))
              .exit_code == 0);
  write_file(dir, "prompt.txt", synthetic_corpus(64));

  RunResult r = run_cli("probe --checkpoint " + quoted(dir / "run" / "model.ckpt") +
                        " --prompt-file " + quoted(dir / "prompt.txt") +
                        " --lengths 8,24,1000 --gen 4 --out-dir " + quoted(dir / "probe"));
  INFO(r.output);
  CHECK(r.exit_code == 0);
  CHECK(fs::exists(dir / "probe" / "probe_L8.csv"));
  CHECK(fs::exists(dir / "probe" / "probe_L24.csv"));
  CHECK(!fs::exists(dir / "probe" / "probe_L1000.csv"));
  CHECK(r.output.find("skipping length 1000") != std::string::npos);

  // two decoder layers -> two data rows
  const std::string csv = shishu::read_file(dir / "probe" / "probe_L8.csv");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2 + 2 + 1);

  RunResult again = run_cli("probe --checkpoint " + quoted(dir / "run" / "model.ckpt") +
                            " --prompt-file " + quoted(dir / "prompt.txt") +
                            " --lengths 8,24,1000 --gen 4 --out-dir " + quoted(dir / "probe2"));
  CHECK(shishu::read_file(dir / "probe2" / "probe_L8.csv") == csv);

  fs::remove_all(dir);
}

TEST_CASE("probe on an attention-free model writes explicitly empty reports") {
  const fs::path dir = scratch_dir("probe_mlp");
  ModelConfig cfg;
  cfg.hidden_size = 32;
  cfg.intermediate_size = 48;
  cfg.n_layers = 4;
  cfg.n_decoder_layers = 0;
  cfg.n_heads = 2;
  cfg.n_kv_heads = 1;
  cfg.vocab_size = 258;
  cfg.max_seq_len = 64;
  auto model = shishu::build_model<float>(cfg, 1);
  shishu::save_checkpoint(model, dir / "mlp_only.ckpt");
  write_file(dir, "prompt.txt", synthetic_corpus(64));

  RunResult r = run_cli("probe --checkpoint " + quoted(dir / "mlp_only.ckpt") +
                        " --prompt-file " + quoted(dir / "prompt.txt") +
                        " --lengths 8 --gen 2 --out-dir " + quoted(dir / "probe"));
  INFO(r.output);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("no attention layers") != std::string::npos);
  const std::string csv = shishu::read_file(dir / "probe" / "probe_L8.csv");
  CHECK(csv.find("# no attention layers") != std::string::npos);
  // header lines only, zero data rows
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  fs::remove_all(dir);
}

TEST_CASE("emd writes the scores table and one matrix per family") {
  const fs::path dir = scratch_dir("emd");
  const fs::path cfg = write_file(dir, "tiny.cfg", tiny_train_config());
  const fs::path corpus = write_file(dir, "corpus.txt", synthetic_corpus(40000));
  REQUIRE(run_cli("train --config " + quoted(cfg) + " --corpus " + quoted(corpus) +
                  " --out-dir " + quoted(dir / "run"))
              .exit_code == 0);
  const std::string before = shishu::read_file(dir / "run" / "model.ckpt");

  RunResult r = run_cli("emd --checkpoint " + quoted(dir / "run" / "model.ckpt") +
                        " --max-samples 512 --out-dir " + quoted(dir / "emd"));
  INFO(r.output);
  CHECK(r.exit_code == 0);
  for (const std::string name :
       {"emd_scores.csv", "emd_matrix_gate.csv", "emd_matrix_up.csv", "emd_matrix_down.csv"})
    CHECK(fs::exists(dir / "emd" / name));

  // r-scores cover layers 1..L-1 for each of the three families
  const std::string scores = shishu::read_file(dir / "emd" / "emd_scores.csv");
  CHECK(std::count(scores.begin(), scores.end(), '\n') == 1 + 3 + 1 + 3 * (4 - 1));

  RunResult again = run_cli("emd --checkpoint " + quoted(dir / "run" / "model.ckpt") +
                            " --max-samples 512 --out-dir " + quoted(dir / "emd2"));
  CHECK(shishu::read_file(dir / "emd2" / "emd_scores.csv") == scores);
  CHECK(shishu::read_file(dir / "run" / "model.ckpt") == before);

  fs::remove_all(dir);
}

TEST_CASE("bench accepts configs or checkpoints and writes per-mode tables") {
  const fs::path dir = scratch_dir("bench");
  const fs::path cfg = write_file(dir, "tiny.cfg", tiny_train_config());
  const fs::path corpus = write_file(dir, "corpus.txt", synthetic_corpus(40000));
  REQUIRE(run_cli("train --config " + quoted(cfg) + " --corpus " + quoted(corpus) +
                  " --out-dir " + quoted(dir / "run"))
              .exit_code == 0);

  // parent from a config file, comparison from a trained checkpoint
  std::string parent_cfg = tiny_train_config();
  const auto pos = parent_cfg.find("n_decoder_layers = 2");
  REQUIRE(pos != std::string::npos);
  parent_cfg.replace(pos, 20, "n_decoder_layers = 4");
  write_file(dir, "parent.cfg", parent_cfg);

  RunResult r = run_cli("bench --parent " + quoted(dir / "parent.cfg") + " --shishu " +
                        quoted(dir / "run" / "model.ckpt") +
                        " --lengths 8,16 --warmup 0 --timed 2 --mode both --out-dir " +
                        quoted(dir / "bench"));
  INFO(r.output);
  CHECK(r.exit_code == 0);
  for (const std::string name : {"latency_inference.csv", "latency_training.csv",
                                 "memory_inference.csv", "memory_training.csv"}) {
    CAPTURE(name);
    REQUIRE(fs::exists(dir / "bench" / name));
    const std::string csv = shishu::read_file(dir / "bench" / name);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 1 + 2);
  }

  // the memory model is deterministic, so those tables reproduce exactly
  RunResult again = run_cli("bench --parent " + quoted(dir / "parent.cfg") + " --shishu " +
                            quoted(dir / "run" / "model.ckpt") +
                            " --lengths 8,16 --warmup 0 --timed 2 --mode inference --out-dir " +
                            quoted(dir / "bench2"));
  CHECK(again.exit_code == 0);
  CHECK(shishu::read_file(dir / "bench2" / "memory_inference.csv") ==
        shishu::read_file(dir / "bench" / "memory_inference.csv"));

  fs::remove_all(dir);
}

TEST_CASE("ablate runs the grid in order and resumes to an identical summary") {
  const fs::path dir = scratch_dir("ablate");
  const std::string spec =
      "entries = 4+0, 2+2\n"
      "hidden_size = 32\n"
      "intermediate_size = 48\n"
      "n_heads = 2\n"
      "n_kv_heads = 1\n"
      "vocab_size = 258\n"
      "max_seq_len = 64\n"
      "learning_rate = 1e-3\n"
      "total_steps = 4\n"
      "eval_interval = 2\n"
      "effective_batch = 2\n"
      "micro_batch = 2\n"
      "block_size = 32\n"
      "val_blocks = 2\n"
      "seed = 42\n";
  const fs::path spec_path = write_file(dir, "grid.spec", spec);
  const fs::path corpus = write_file(dir, "corpus.txt", synthetic_corpus(40000));

  RunResult r = run_cli("ablate --spec " + quoted(spec_path) + " --corpus " + quoted(corpus) +
                        " --out-dir " + quoted(dir / "grid"));
  INFO(r.output);
  REQUIRE(r.exit_code == 0);
  const std::string summary = shishu::read_file(dir / "grid" / "summary.csv");

  // summary rows follow spec order
  CHECK(summary.find("0,4,0,0") != std::string::npos);
  CHECK(summary.find("1,2,0,2") != std::string::npos);
  CHECK(summary.find("0,4,0,0") < summary.find("1,2,0,2"));
  CHECK(fs::exists(dir / "grid" / "entry_0_b4_s0_t0.done"));
  CHECK(fs::exists(dir / "grid" / "entry_1_b2_s2_t0" / "model.ckpt"));

  // drop the second entry's artifacts; the rerun redoes only that entry
  fs::remove(dir / "grid" / "entry_1_b2_s2_t0.done");
  fs::remove_all(dir / "grid" / "entry_1_b2_s2_t0");
  RunResult again = run_cli("ablate --spec " + quoted(spec_path) + " --corpus " +
                            quoted(corpus) + " --out-dir " + quoted(dir / "grid"));
  REQUIRE(again.exit_code == 0);
  CHECK(again.output.find("b4_s0_t0 (resumed)") != std::string::npos);
  CHECK(shishu::read_file(dir / "grid" / "summary.csv") == summary);

  fs::remove_all(dir);
}

TEST_CASE("eval reports held-out loss over every block of the corpus") {
  const fs::path dir = scratch_dir("eval");
  const fs::path cfg = write_file(dir, "tiny.cfg", tiny_train_config());
  const fs::path corpus = write_file(dir, "corpus.txt", synthetic_corpus(40000));
  REQUIRE(run_cli("train --config " + quoted(cfg) + " --corpus " + quoted(corpus) +
                  " --out-dir " + quoted(dir / "run"))
              .exit_code == 0);

  RunResult r = run_cli("eval --checkpoint " + quoted(dir / "run" / "model.ckpt") +
                        " --corpus " + quoted(corpus) + " --block-size 32");
  INFO(r.output);
  CHECK(r.exit_code == 0);
  CHECK(r.output.find("val_loss=") != std::string::npos);
  CHECK(r.output.find("block_size=32") != std::string::npos);

  RunResult again = run_cli("eval --checkpoint " + quoted(dir / "run" / "model.ckpt") +
                            " --corpus " + quoted(corpus) + " --block-size 32");
  CHECK(again.output == r.output);

  fs::remove_all(dir);
}

// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. Every subcommand is a thin wrapper over library
// calls; all artifacts go through atomic_write_file so a crash never leaves
// a partial file under a final name.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shishu/ablate.hpp"
#include "shishu/bench.hpp"
#include "shishu/checkpoint.hpp"
#include "shishu/config.hpp"
#include "shishu/emd.hpp"
#include "shishu/io.hpp"
#include "shishu/model.hpp"
#include "shishu/probe.hpp"
#include "shishu/train.hpp"

namespace {

using namespace shishu;

// A model argument may be a config file or a checkpoint; the checkpoint
// magic disambiguates.
bool is_checkpoint_file(const std::filesystem::path& path) {
  std::FILE* f = std::fopen(path.string().c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open " + path.string());
  char head[sizeof kCheckpointMagic] = {};
  const std::size_t got = std::fread(head, 1, sizeof head, f);
  std::fclose(f);
  return got == sizeof head && std::equal(head, head + sizeof head, kCheckpointMagic);
}

ModelWeights<float> load_or_build(const std::filesystem::path& path, std::uint64_t seed) {
  if (is_checkpoint_file(path)) return load_checkpoint<float>(path);
  return build_model<float>(parse_model_config(read_file(path)), seed);
}

std::vector<std::int32_t> prompt_tokens(const std::string& prompt,
                                        const std::string& prompt_file) {
  const std::string text = prompt_file.empty() ? prompt : read_file(prompt_file);
  return ByteTokenizer::encode(text);
}

struct TrainArgs {
  std::string config, corpus, out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int cmd_train(const TrainArgs& a) {
  ParsedConfig pc = parse_config_text(read_file(a.config));
  const std::string corpus = read_file(a.corpus);
  if (a.seed_set) pc.train.seed = a.seed;
  pc.model.validate();
  pc.train.validate();

  auto model = build_model<float>(pc.model, pc.train.seed);
  auto data = CorpusDataset::from_text(corpus, pc.train.block_size, pc.train.val_blocks,
                                       pc.train.seed);
  const TrainResult res = train(model, data, pc.train, a.out_dir);

  std::cout << "steps=" << res.rows.back().step << " train_loss="
            << format_metric(res.rows.back().train_loss) << " val_loss="
            << format_metric(res.final_val_loss) << " val_ppl="
            << format_metric(res.final_val_ppl) << "\n";
  std::cout << "wrote " << (std::filesystem::path(a.out_dir) / "model.ckpt").string() << " and "
            << (std::filesystem::path(a.out_dir) / "metrics.csv").string() << "\n";
  return 0;
}

struct GenerateArgs {
  std::string checkpoint, prompt, prompt_file;
  Index n = 32;
  double temperature = 0.0;
  Index top_k = 0;
  std::uint64_t seed = 42;
};

int cmd_generate(const GenerateArgs& a) {
  const auto model = load_checkpoint<float>(a.checkpoint);
  std::vector<std::int32_t> prompt = prompt_tokens(a.prompt, a.prompt_file);
  if (prompt.empty()) {
    if (model.config.vocab_size <= ByteTokenizer::kBos)
      throw std::runtime_error("empty prompt and vocab has no BOS id");
    prompt.push_back(ByteTokenizer::kBos);
  }
  if (a.n == 0) return 0;

  SamplingConfig sc;
  sc.temperature = a.temperature;
  sc.top_k = a.top_k;
  sc.seed = a.seed;
  const std::vector<std::int32_t> out = generate(model, prompt, a.n, sc);
  std::cout << ByteTokenizer::decode(out) << "\n";
  return 0;
}

struct ProbeArgs {
  std::string checkpoint, prompt_file, out_dir;
  std::vector<Index> lengths{54, 118, 246, 502};
  Index gen = 10;
  bool include_generated = false;
  bool fitted_cosine = false;
  std::uint64_t seed = 42;
};

int cmd_probe(const ProbeArgs& a) {
  const auto model = load_checkpoint<float>(a.checkpoint);
  const std::vector<std::int32_t> tokens = ByteTokenizer::encode(read_file(a.prompt_file));
  const std::filesystem::path out_dir(a.out_dir);

  if (count_decoder_layers(model.schedule) == 0) {
    // Nothing to probe; emit explicitly empty reports so downstream tooling
    // sees the run happened rather than failed.
    for (Index len : a.lengths) {
      std::string csv = csv_provenance(a.seed, model.config.hash());
      csv += "# no attention layers\n";
      csv += "layer,rows_fit,linear_mse,cosine_mean,cosine_mode,alpha,scalar_mse\n";
      atomic_write_file(out_dir / ("probe_L" + std::to_string(len) + ".csv"), csv);
    }
    std::cerr << "warning: checkpoint has no attention layers; reports are empty\n";
    return 0;
  }

  ProbeOptions opt;
  opt.include_generated = a.include_generated;
  opt.fitted_cosine = a.fitted_cosine;
  int written = 0;
  for (Index len : a.lengths) {
    if (len < 1) throw std::invalid_argument("probe: lengths must be positive");
    if (static_cast<std::size_t>(len) > tokens.size()) {
      std::cerr << "warning: skipping length " << len << " (prompt has only " << tokens.size()
                << " tokens)\n";
      continue;
    }
    if (len + a.gen > model.config.max_seq_len) {
      std::cerr << "warning: skipping length " << len << " (exceeds max_seq_len "
                << model.config.max_seq_len << " with " << a.gen << " generated)\n";
      continue;
    }
    const std::vector<std::int32_t> prompt(tokens.begin(), tokens.begin() + len);
    const ProbeReport rep = run_probe(model, prompt, a.gen, opt);
    const auto path = out_dir / ("probe_L" + std::to_string(len) + ".csv");
    atomic_write_file(path, probe_csv(rep, a.seed, model.config.hash()));
    std::cout << "wrote " << path.string() << " (" << rep.rows.size() << " layers)\n";
    ++written;
  }
  if (written == 0) std::cerr << "warning: no length was probed\n";
  return 0;
}

struct EmdArgs {
  std::string checkpoint, out_dir;
  Index max_samples = kEmdMaxSamples;
  std::uint64_t seed = 42;
};

int cmd_emd(const EmdArgs& a) {
  const auto model = load_checkpoint<float>(a.checkpoint);
  const EMDReport rep = r_scores(model, a.max_samples, a.seed);
  const std::filesystem::path out_dir(a.out_dir);
  const std::uint64_t hash = model.config.hash();

  atomic_write_file(out_dir / "emd_scores.csv", emd_scores_csv(rep, a.seed, hash));
  for (const std::string family : {"gate", "up", "down"})
    atomic_write_file(out_dir / ("emd_matrix_" + family + ".csv"),
                      emd_matrix_csv(rep, family, a.seed, hash));
  for (const std::string family : {"gate", "up", "down"})
    std::cout << "r_max(" << family << ") x100 = " << format_metric(rep.r_max_x100(family))
              << "\n";
  std::cout << "wrote emd_scores.csv and per-family matrices under " << out_dir.string() << "\n";
  return 0;
}

struct BenchArgs {
  std::string parent, shishu, out_dir;
  std::vector<Index> lengths{64, 128, 256, 512, 1024, 2048, 4096};
  Index batch = 1;
  Index warmup = 3;
  Index timed = 10;
  std::string mode = "both";
  std::uint64_t seed = 42;
};

int cmd_bench(const BenchArgs& a) {
  auto parent = load_or_build(a.parent, a.seed);
  auto shishu = load_or_build(a.shishu, a.seed);
  const std::filesystem::path out_dir(a.out_dir);
  const std::uint64_t hash = fnv1a64(parent.config.canonical_text() +
                                     shishu.config.canonical_text());

  std::vector<BenchMode> modes;
  if (a.mode == "both" || a.mode == "inference") modes.push_back(BenchMode::kInference);
  if (a.mode == "both" || a.mode == "training") modes.push_back(BenchMode::kTraining);

  for (BenchMode mode : modes) {
    BenchConfig cfg;
    cfg.lengths = a.lengths;
    cfg.batch = a.batch;
    cfg.warmup = a.warmup;
    cfg.timed = a.timed;
    cfg.mode = mode;
    cfg.seed = a.seed;

    const auto parent_rows = time_model(parent, cfg);
    const auto shishu_rows = time_model(shishu, cfg);
    const auto table = reduction_table(parent_rows, shishu_rows);
    const std::string tag = bench_mode_name(mode);
    atomic_write_file(out_dir / ("latency_" + tag + ".csv"),
                      latency_csv(mode, table, a.seed, hash));

    std::vector<std::int64_t> parent_bytes, shishu_bytes;
    for (Index t : a.lengths) {
      parent_bytes.push_back(memory_estimate(parent.config, a.batch, t, mode).total());
      shishu_bytes.push_back(memory_estimate(shishu.config, a.batch, t, mode).total());
    }
    atomic_write_file(out_dir / ("memory_" + tag + ".csv"),
                      memory_csv(mode, a.lengths, parent_bytes, shishu_bytes, a.seed, hash));

    for (const auto& row : table)
      std::cout << tag << " T=" << row.length << " parent_ms=" << format_metric(row.parent)
                << " shishu_ms=" << format_metric(row.shishu) << " reduction_pct="
                << format_metric(row.pct_reduction) << "\n";
  }
  std::cout << "wrote latency and memory tables under " << out_dir.string() << "\n";
  return 0;
}

struct AblateArgs {
  std::string spec, corpus, out_dir;
  std::uint64_t seed = 0;
  bool seed_set = false;
};

int cmd_ablate(const AblateArgs& a) {
  const std::string spec_text = read_file(a.spec);
  AblationSpec spec = parse_ablation_spec(spec_text);
  if (a.seed_set) spec.train.seed = a.seed;
  const std::string corpus = read_file(a.corpus);

  const auto results = run_ablation(spec, corpus, a.out_dir);
  const std::string csv = ablation_summary_csv(results, spec.train.seed, fnv1a64(spec_text));
  atomic_write_file(std::filesystem::path(a.out_dir) / "summary.csv", csv);

  int failed = 0;
  for (const auto& r : results) {
    std::cout << r.entry.tag() << (r.resumed ? " (resumed)" : "") << ": ";
    if (r.ok)
      std::cout << "val_loss=" << format_metric(r.val_loss) << " val_ppl="
                << format_metric(r.val_ppl) << "\n";
    else {
      std::cout << "failed: " << r.error << "\n";
      ++failed;
    }
  }
  std::cout << "wrote " << (std::filesystem::path(a.out_dir) / "summary.csv").string() << "\n";
  if (failed > 0) std::cerr << "warning: " << failed << " entries failed\n";
  return 0;
}

int cmd_count_params(const std::string& config) {
  const ModelConfig cfg = parse_model_config(read_file(config));
  std::cout << count_parameters(cfg) << "\n";
  return 0;
}

struct EvalArgs {
  std::string checkpoint, corpus;
  Index block_size = 0;
  std::uint64_t seed = 42;
};

int cmd_eval(const EvalArgs& a) {
  auto model = load_checkpoint<float>(a.checkpoint);
  const auto tokens = ByteTokenizer::encode(read_file(a.corpus));
  const Index block = a.block_size > 0 ? a.block_size
                                       : std::min<Index>(256, model.config.max_seq_len);
  // Every block is held out: this dataset is evaluation-only.
  const Index n_blocks = static_cast<Index>((tokens.size() - 1) / static_cast<std::size_t>(block));
  auto data = CorpusDataset::from_tokens(tokens, block, n_blocks, a.seed);
  const double loss = eval_loss(model, data);
  std::cout << "val_loss=" << format_metric(loss) << " val_ppl="
            << format_metric(std::exp(loss)) << " blocks=" << n_blocks
            << " block_size=" << block << "\n";
  return 0;
}

void add_format_flag(CLI::App* cmd) {
  cmd->add_option("--format", "artifact format")
      ->default_str("csv")
      ->check(CLI::IsMember({"csv"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ShishuLM training and analysis toolkit"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config and byte corpus");
  train_cmd->add_option("--config", train_args.config, "model + training config file")
      ->required();
  train_cmd->add_option("--corpus", train_args.corpus, "path to the training text")->required();
  train_cmd->add_option("--out-dir", train_args.out_dir, "artifact directory")->required();
  auto* train_seed = train_cmd->add_option("--seed", train_args.seed,
                                           "override the config's seed");
  add_format_flag(train_cmd);

  GenerateArgs gen_args;
  auto* gen_cmd = app.add_subcommand("generate", "sample tokens from a checkpoint");
  gen_cmd->add_option("--checkpoint", gen_args.checkpoint, "model checkpoint")->required();
  gen_cmd->add_option("--prompt", gen_args.prompt, "inline prompt text");
  gen_cmd->add_option("--prompt-file", gen_args.prompt_file, "file with the prompt text");
  gen_cmd->add_option("-n,--tokens", gen_args.n, "number of tokens to generate")
      ->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--temperature", gen_args.temperature, "0 = greedy");
  gen_cmd->add_option("--top-k", gen_args.top_k, "0 = full distribution")
      ->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--seed", gen_args.seed, "sampling seed");

  ProbeArgs probe_args;
  auto* probe_cmd = app.add_subcommand("probe", "attention linearity sweep over a checkpoint");
  probe_cmd->add_option("--checkpoint", probe_args.checkpoint, "model checkpoint")->required();
  probe_cmd->add_option("--prompt-file", probe_args.prompt_file, "text supplying prefill tokens")
      ->required();
  probe_cmd->add_option("--out-dir", probe_args.out_dir, "artifact directory")->required();
  probe_cmd->add_option("--lengths", probe_args.lengths, "prefill lengths")->delimiter(',');
  probe_cmd->add_option("--gen", probe_args.gen, "tokens generated after prefill")
      ->check(CLI::NonNegativeNumber);
  probe_cmd->add_flag("--include-generated", probe_args.include_generated,
                      "fit on prompt plus generated rows");
  probe_cmd->add_flag("--fitted-cosine", probe_args.fitted_cosine,
                      "cosine against the fitted map instead of recorded outputs");
  probe_cmd->add_option("--seed", probe_args.seed, "recorded in provenance headers");
  add_format_flag(probe_cmd);

  EmdArgs emd_args;
  auto* emd_cmd = app.add_subcommand("emd", "layer-wise weight distribution distances");
  emd_cmd->add_option("--checkpoint", emd_args.checkpoint, "model checkpoint")->required();
  emd_cmd->add_option("--out-dir", emd_args.out_dir, "artifact directory")->required();
  emd_cmd->add_option("--max-samples", emd_args.max_samples, "subsample cap per weight matrix")
      ->check(CLI::PositiveNumber);
  emd_cmd->add_option("--seed", emd_args.seed, "subsampling seed");
  add_format_flag(emd_cmd);

  BenchArgs bench_args;
  auto* bench_cmd = app.add_subcommand("bench", "latency and memory versus a parent model");
  bench_cmd->add_option("--parent", bench_args.parent, "parent config or checkpoint")
      ->required();
  bench_cmd->add_option("--shishu", bench_args.shishu, "comparison config or checkpoint")
      ->required();
  bench_cmd->add_option("--out-dir", bench_args.out_dir, "artifact directory")->required();
  bench_cmd->add_option("--lengths", bench_args.lengths, "sequence lengths")->delimiter(',');
  bench_cmd->add_option("--batch", bench_args.batch, "batch size")->check(CLI::PositiveNumber);
  bench_cmd->add_option("--warmup", bench_args.warmup, "untimed repetitions")
      ->check(CLI::NonNegativeNumber);
  bench_cmd->add_option("--timed", bench_args.timed, "timed repetitions")
      ->check(CLI::PositiveNumber);
  bench_cmd->add_option("--mode", bench_args.mode, "inference, training, or both")
      ->check(CLI::IsMember({"inference", "training", "both"}));
  bench_cmd->add_option("--seed", bench_args.seed, "token stream and init seed");
  add_format_flag(bench_cmd);

  AblateArgs ablate_args;
  auto* ablate_cmd = app.add_subcommand("ablate", "train an attention-budget grid");
  ablate_cmd->add_option("--spec", ablate_args.spec, "grid spec file")->required();
  ablate_cmd->add_option("--corpus", ablate_args.corpus, "path to the training text")
      ->required();
  ablate_cmd->add_option("--out-dir", ablate_args.out_dir, "artifact directory")->required();
  auto* ablate_seed = ablate_cmd->add_option("--seed", ablate_args.seed,
                                             "override the seed in the grid spec file");
  add_format_flag(ablate_cmd);

  std::string count_config;
  auto* count_cmd = app.add_subcommand("count-params", "print the parameter count of a config");
  count_cmd->add_option("--config", count_config, "model config file")->required();

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "held-out loss of a checkpoint on a corpus");
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "model checkpoint")->required();
  eval_cmd->add_option("--corpus", eval_args.corpus, "path to the evaluation text")->required();
  eval_cmd->add_option("--block-size", eval_args.block_size,
                       "evaluation block size (default min(256, max_seq_len))")
      ->check(CLI::PositiveNumber);
  eval_cmd->add_option("--seed", eval_args.seed, "recorded in dataset state");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  train_args.seed_set = train_seed->count() > 0;
  ablate_args.seed_set = ablate_seed->count() > 0;

  try {
    if (app.got_subcommand(train_cmd)) return cmd_train(train_args);
    if (app.got_subcommand(gen_cmd)) return cmd_generate(gen_args);
    if (app.got_subcommand(probe_cmd)) return cmd_probe(probe_args);
    if (app.got_subcommand(emd_cmd)) return cmd_emd(emd_args);
    if (app.got_subcommand(bench_cmd)) return cmd_bench(bench_args);
    if (app.got_subcommand(ablate_cmd)) return cmd_ablate(ablate_args);
    if (app.got_subcommand(count_cmd)) return cmd_count_params(count_config);
    if (app.got_subcommand(eval_cmd)) return cmd_eval(eval_args);
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 2;
  }
  return 1;
}

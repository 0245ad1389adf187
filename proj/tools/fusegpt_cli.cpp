// Command-line front end: pretrain / score / prune / eval / bake / report.
//
// A JSON config file (--config) supplies defaults mirroring RunConfig; any
// flag given on the command line overrides the file value. Exit codes:
// 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "fusegpt/checkpoint.hpp"
#include "fusegpt/pipeline.hpp"

using namespace fusegpt;

namespace {

struct CliSettings {
  std::string model_path;
  std::string corpus_path;
  std::string out_path;
  std::string report_path;
  RunConfig<float> run;
};

nlohmann::ordered_json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("failed to parse JSON in " + path + ": " + e.what());
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

// Applies config-file values; command-line flags parsed afterwards override.
void apply_config_file(CliSettings& s, const std::string& path) {
  auto j = load_json_file(path);
  auto& r = s.run;
  if (j.contains("model")) s.model_path = j.at("model").get<std::string>();
  if (j.contains("corpus")) s.corpus_path = j.at("corpus").get<std::string>();
  if (j.contains("out")) s.out_path = j.at("out").get<std::string>();
  if (j.contains("report")) s.report_path = j.at("report").get<std::string>();
  if (j.contains("sparsity")) r.sparsity = j.at("sparsity").get<double>();
  if (j.contains("metric")) r.metric = metric_from_name(j.at("metric").get<std::string>());
  if (j.contains("group_size")) r.group_size = j.at("group_size").get<int>();
  if (j.contains("rank")) r.rank = j.at("rank").get<std::size_t>();
  if (j.contains("lora_rank")) r.lora_rank = j.at("lora_rank").get<std::size_t>();
  if (j.contains("use_lora")) r.use_lora = j.at("use_lora").get<bool>();
  if (j.contains("epochs")) r.epochs = j.at("epochs").get<int>();
  if (j.contains("batch_size")) r.batch_size = j.at("batch_size").get<std::size_t>();
  if (j.contains("calib_samples")) r.calib_samples = j.at("calib_samples").get<std::size_t>();
  if (j.contains("finetune_samples"))
    r.finetune_samples = j.at("finetune_samples").get<std::size_t>();
  if (j.contains("seq_len")) r.seq_len = j.at("seq_len").get<std::size_t>();
  if (j.contains("lr_coeff")) r.lr_coeff = j.at("lr_coeff").get<float>();
  if (j.contains("lr_base")) r.lr_base = j.at("lr_base").get<float>();
  if (j.contains("seed")) r.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("ablation")) r.ablation = ablation_from_name(j.at("ablation").get<std::string>());
}

int run_cli(int argc, char** argv) {
  CLI::App app{"Depth pruning laboratory: block importance, layer fusion, group distillation"};
  app.require_subcommand(1);

  CliSettings s;
  std::string metric_name_flag = "mi";
  std::string ablation_flag = "full_fusion";

  // a config file, if present, is applied before the flags so flags win
  for (int i = 1; i < argc - 1; ++i)
    if (std::string(argv[i]) == "--config") apply_config_file(s, argv[i + 1]);
  metric_name_flag = metric_name(s.run.metric);
  ablation_flag = ablation_name(s.run.ablation);
  std::string config_path;

  // --- pretrain ---
  auto* pre = app.add_subcommand("pretrain", "train a toy model on a byte corpus");
  GptConfig gcfg;
  PretrainSpec<float> spec;
  pre->add_option("--corpus", s.corpus_path, "corpus text file")->required();
  pre->add_option("--out", s.out_path, "output checkpoint path")->required();
  pre->add_option("--blocks", gcfg.n_blocks, "transformer blocks");
  pre->add_option("--d-model", gcfg.d_model, "hidden width");
  pre->add_option("--heads", gcfg.n_heads, "attention heads");
  pre->add_option("--d-ff", gcfg.d_ff, "MLP width");
  pre->add_option("--max-seq", gcfg.max_seq_len, "maximum sequence length");
  pre->add_option("--steps", spec.max_steps, "training step budget");
  pre->add_option("--target-nll", spec.target_nll, "stop early below this NLL (0 disables)");
  pre->add_option("--lr", spec.lr, "peak learning rate");
  pre->add_option("--min-lr", spec.min_lr, "cosine floor learning rate");
  pre->add_option("--batch-size", spec.batch_size, "rows per step");
  pre->add_option("--seq-len", spec.seq_len, "window length");
  pre->add_option("--seed", spec.seed, "rng seed");

  // --- score ---
  auto* score = app.add_subcommand("score", "rank blocks by importance");
  score->add_option("--model", s.model_path, "input checkpoint")->required();
  score->add_option("--corpus", s.corpus_path, "corpus text file")->required();
  auto* score_metric = score->add_option("--metric", metric_name_flag, "mi|bi|sleb");
  score->add_option("--calib", s.run.calib_samples, "calibration sample count");
  score->add_option("--seq-len", s.run.seq_len, "window length");
  score->add_option("--batch-size", s.run.batch_size, "rows per batch");
  score->add_option("--seed", s.run.seed, "rng seed");
  score->add_option("--out", s.report_path, "write the report JSON here instead of stdout");

  // --- prune ---
  auto* prune = app.add_subcommand("prune", "iterative fuse-and-remove run");
  prune->add_option("--model", s.model_path, "input checkpoint")->required();
  prune->add_option("--corpus", s.corpus_path, "corpus text file")->required();
  prune->add_option("--out", s.out_path, "output checkpoint path");
  prune->add_option("--report", s.report_path, "output run-report JSON path");
  prune->add_option("--sparsity", s.run.sparsity, "fraction of blocks to remove");
  auto* prune_metric = prune->add_option("--metric", metric_name_flag, "mi|bi|sleb");
  prune->add_option("--group-size", s.run.group_size, "partial group size G");
  prune->add_option("--rank", s.run.rank, "fusion coefficient rank");
  prune->add_option("--lora-rank", s.run.lora_rank, "adapter rank for origin weights");
  prune->add_flag("--no-lora", "train origin weights directly instead of adapters");
  prune->add_option("--epochs", s.run.epochs, "distillation epochs per iteration");
  prune->add_option("--batch-size", s.run.batch_size, "rows per batch");
  prune->add_option("--calib", s.run.calib_samples, "calibration sample count");
  prune->add_option("--finetune", s.run.finetune_samples, "fine-tuning sample count");
  prune->add_option("--seq-len", s.run.seq_len, "window length");
  prune->add_option("--lr-coeff", s.run.lr_coeff, "coefficient learning rate");
  prune->add_option("--lr-base", s.run.lr_base, "origin-weight learning rate");
  auto* prune_abl =
      prune->add_option("--ablation", ablation_flag, "detect_only|detect_ft|full_fusion");
  prune->add_option("--seed", s.run.seed, "rng seed");

  // --- eval ---
  auto* eval = app.add_subcommand("eval", "held-out perplexity of a checkpoint");
  eval->add_option("--model", s.model_path, "input checkpoint")->required();
  eval->add_option("--corpus", s.corpus_path, "corpus text file")->required();
  eval->add_option("--seq-len", s.run.seq_len, "window length");
  std::size_t stride = 0;
  eval->add_option("--stride", stride, "window stride (default: seq-len)");

  // --- bake ---
  auto* bake = app.add_subcommand("bake", "collapse fusion state into dense weights");
  bake->add_option("--model", s.model_path, "input checkpoint")->required();
  bake->add_option("--out", s.out_path, "output checkpoint path")->required();

  // --- report ---
  auto* rep = app.add_subcommand("report", "emit CSV plot data from a run report");
  std::string report_in, out_dir = ".";
  rep->add_option("--input", report_in, "run-report JSON")->required();
  rep->add_option("--out-dir", out_dir, "directory for the CSV files");

  for (auto* sc : app.get_subcommands({}))
    sc->add_option("--config", config_path, "JSON config file mirroring the run configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (score_metric->count() || prune_metric->count())
    s.run.metric = metric_from_name(metric_name_flag);
  if (prune_abl->count()) s.run.ablation = ablation_from_name(ablation_flag);
  if (*prune && prune->count("--no-lora")) s.run.use_lora = false;

  if (*pre) {
    Corpus corpus = Corpus::from_file(s.corpus_path);
    spec.config = gcfg;
    auto result = pretrain_toy(spec, corpus);
    save_checkpoint(result.model, s.out_path);
    std::cout << "pretrained " << result.steps_run << " steps, final nll " << result.final_nll
              << ", checkpoint " << s.out_path << "\n";
  } else if (*score) {
    auto model = load_checkpoint<float>(s.model_path);
    Corpus corpus = Corpus::from_file(s.corpus_path);
    Rng rng(s.run.seed);
    auto windows =
        sample_windows(corpus.stream, corpus.train_end, s.run.seq_len, s.run.calib_samples, rng);
    auto calib = make_batches(windows, std::min(s.run.batch_size, s.run.calib_samples));
    auto report = importance_scores(s.run.metric, model, calib, 0, s.run.importance);
    const std::string text = report.to_json().dump(2) + "\n";
    if (s.report_path.empty())
      std::cout << text;
    else
      write_text_file(s.report_path, text);
  } else if (*prune) {
    auto model = load_checkpoint<float>(s.model_path);
    Corpus corpus = Corpus::from_file(s.corpus_path);
    auto report = run_fusegpt(model, corpus, s.run);
    if (!s.out_path.empty()) save_checkpoint(model, s.out_path);
    if (!s.report_path.empty()) write_text_file(s.report_path, report.to_json().dump(2) + "\n");
    std::cout << "removed " << report.blocks_removed << " of " << report.initial_blocks
              << " blocks, perplexity " << report.pre_perplexity << " -> "
              << report.post_perplexity << "\n";
  } else if (*eval) {
    auto model = load_checkpoint<float>(s.model_path);
    Corpus corpus = Corpus::from_file(s.corpus_path);
    const double ppl = evaluate_perplexity(model, corpus.heldout(), s.run.seq_len, stride);
    std::cout << "perplexity " << ppl << "\n";
  } else if (*bake) {
    auto model = load_checkpoint<float>(s.model_path);
    bake_weights(model);
    save_checkpoint(model, s.out_path);
    std::cout << "baked checkpoint written to " << s.out_path << "\n";
  } else if (*rep) {
    auto j = load_json_file(report_in);
    std::string loss_csv = "iteration,epoch,mean_loss,lr_coeff,lr_base\n";
    for (const auto& p : j.at("loss_trace"))
      loss_csv += std::to_string(p.at("iteration").get<int>()) + "," +
                  std::to_string(p.at("epoch").get<int>()) + "," +
                  std::to_string(p.at("mean_loss").get<double>()) + "," +
                  std::to_string(p.at("lr_coeff").get<double>()) + "," +
                  std::to_string(p.at("lr_base").get<double>()) + "\n";
    std::string score_csv = "iteration,block,value,selected\n";
    for (const auto& it : j.at("iterations")) {
      const auto& imp = it.at("importance");
      const int sel = imp.at("selected").get<int>();
      for (const auto& sc : imp.at("scores"))
        score_csv += std::to_string(it.at("iteration").get<int>()) + "," +
                     std::to_string(sc.at("block").get<int>()) + "," +
                     std::to_string(sc.at("value").get<double>()) + "," +
                     (sc.at("block").get<int>() == sel ? "1" : "0") + "\n";
    }
    write_text_file(out_dir + "/loss_trace.csv", loss_csv);
    write_text_file(out_dir + "/score_table.csv", score_csv);
    std::cout << "wrote " << out_dir << "/loss_trace.csv and " << out_dir << "/score_table.csv\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return 2;
  }
}

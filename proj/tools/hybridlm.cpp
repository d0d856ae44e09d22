#include <iostream>

#include "CLI11.hpp"

#include "cli.hpp"

namespace {

// 0 success, 1 runtime or numeric failure, 2 usage or configuration error.
int exit_code_for(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const hybridlm::NumericError& ex) {
    std::cerr << "numeric error: " << ex.what() << "\n";
    return 1;
  } catch (const hybridlm::ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return 2;
  } catch (const hybridlm::IoError& ex) {
    std::cerr << "i/o error: " << ex.what() << "\n";
    return 2;
  } catch (const hybridlm::FormatError& ex) {
    std::cerr << "format error: " << ex.what() << "\n";
    return 2;
  } catch (const hybridlm::InputError& ex) {
    std::cerr << "input error: " << ex.what() << "\n";
    return 2;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  using namespace hybridlm::cli;
  CLI::App app{"Hybrid causal/masked language model toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  TokenizeOptions tok;
  auto* tokenize = app.add_subcommand("tokenize", "Train a BPE vocabulary");
  tokenize->add_option("--config", tok.config, "JSON config file");
  tokenize->add_option("--out", tok.out, "Run directory")->required();
  tokenize->add_option("--corpus", tok.corpus, "Corpus files (override config)");
  tokenize->add_option("--vocab-size", tok.vocab_size, "Target vocabulary size");

  TrainOptions tr;
  auto* trainc = app.add_subcommand("train", "Pretrain a model");
  trainc->add_option("--config", tr.config, "JSON config file");
  trainc->add_option("--out", tr.out, "Run directory")->required();
  trainc->add_option("--corpus", tr.corpus, "Corpus files (override config)");
  trainc->add_option("--vocab", tr.vocab, "Vocabulary file (default <out>/vocab.txt)");
  trainc->add_option("--resume", tr.resume, "Checkpoint directory to resume from");
  trainc->add_option("--steps", tr.steps, "Override total_steps");
  trainc->add_option("--ratio", tr.ratio, "Override causal:masked ratio, e.g. 1:15");
  trainc->add_option("--seed", tr.seed, "Override seed");
  trainc->add_option("--checkpoint-every", tr.checkpoint_every, "Checkpoint cadence in steps");
  trainc->add_flag("--quiet", tr.quiet, "No per-step progress on stderr");

  EvalCliOptions ev;
  auto* evalc = app.add_subcommand("eval", "Zero-shot evaluation");
  evalc->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory")->required();
  evalc->add_option("--data", ev.data, "JSONL file or directory of JSONL files")->required();
  evalc->add_option("--vocab", ev.vocab, "Vocabulary file (default next to the checkpoint)");
  evalc->add_option("--out", ev.out, "Directory for report.json");
  evalc->add_option("--mode", ev.mode, "bidirectional, causal, prefix or fused");
  evalc->add_option("--temperature", ev.temperature, "Softmax temperature");
  evalc->add_flag("--calibrate-temperature", ev.calibrate, "Pick the best temperature from the default grid");
  evalc->add_option("--prefix-fraction", ev.prefix_fraction, "Unscored leading fraction of text items");

  GenerateCliOptions gen;
  auto* genc = app.add_subcommand("generate", "Greedy text generation");
  genc->add_option("--checkpoint", gen.checkpoint, "Checkpoint directory")->required();
  genc->add_option("--vocab", gen.vocab, "Vocabulary file (default next to the checkpoint)");
  genc->add_option("--prompt", gen.prompt, "Prompt text, or - for stdin")->required();
  genc->add_option("--max-new-tokens", gen.max_new_tokens, "Generation budget");
  genc->add_option("--repetition-penalty", gen.repetition_penalty, "CTRL-style penalty (>= 1)");
  genc->add_flag("--json", gen.json_output, "Emit {prompt, ids, text, steps} as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*tokenize) return cmd_tokenize(tok);
    if (*trainc) return cmd_train(tr);
    if (*evalc) return cmd_eval(ev);
    if (*genc) return cmd_generate(gen);
  } catch (...) {
    return exit_code_for(std::current_exception());
  }
  return 2;
}

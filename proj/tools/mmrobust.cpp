// mmrobust command-line tool: data generation, training, attacks, memory
// banks, evaluation, localization and feature export.
//
// Every subcommand accepts --config <file>; command-line flags override file
// values, and MMROBUST_SEED is consulted only when neither sets --seed. The
// fully resolved settings are written to <out>/<subcommand>.resolved.toml,
// which replays the run via `mmrobust <subcommand> --config <that file>`.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mmrobust/attacks.hpp"
#include "mmrobust/dataset.hpp"
#include "mmrobust/defense.hpp"
#include "mmrobust/errors.hpp"
#include "mmrobust/eval.hpp"
#include "mmrobust/model.hpp"
#include "mmrobust/train.hpp"

namespace fs = std::filesystem;
using namespace mmrobust;

namespace {

constexpr int kExitError = 2;
constexpr int kExitInvariant = 3;

struct RunConfig {
  std::uint64_t seed = 7;
  std::size_t threads = 1;
  std::string out = "out";

  // data
  DatasetSpec data;
  std::string data_dir = "out";
  std::string split = "test";

  // model and training
  ArchSpec arch;
  std::string fusion = "concat";
  std::string pooling = "max";
  std::string modality = "av";
  TrainOptions train;
  std::string model_path = "out/model.bin";

  // attack
  std::string attack = "fgsm";
  double eps_a = 0.06;
  double eps_v = 0.06;
  std::size_t steps = 10;
  double mu = 1.0;
  std::optional<double> step_size;
  bool random_start = false;
  std::string attack_loss = "ce";
  std::string preset;
  bool attacked = false;

  // defense
  std::string defense = "none";
  std::string bank_path;
  std::size_t bank_size = 256;
  bool normalize_bank = false;
  IstaConfig ista;
  std::string base_report;
  std::string tag;
};

fs::path split_file(const RunConfig& c, const std::string& name) {
  return fs::path(c.data_dir) / (name + ".bin");
}

fs::path output(const RunConfig& c, const std::string& name) {
  fs::create_directories(c.out);
  return fs::path(c.out) / name;
}

AttackSpec attack_spec(const RunConfig& c) {
  AttackSpec s;
  s.method = parse_attack_method(c.attack);
  s.eps_a = c.eps_a;
  s.eps_v = c.eps_v;
  s.steps = c.steps;
  s.momentum = c.mu;
  s.step_size = c.step_size;
  s.random_start = c.random_start;
  s.loss_mode = parse_loss_mode(c.attack_loss);
  s.seed = c.seed;
  s.validate();
  return s;
}

BudgetPlan budgets(const RunConfig& c) {
  if (c.preset == "table1") return BudgetPlan::table1();
  if (c.preset == "table4") return BudgetPlan::table4();
  return {c.eps_a, c.eps_v, c.eps_a, c.eps_v};
}

// Training loss implied by the defense selection.
LossMode training_loss(const std::string& defense) {
  if (defense == "minsim" || defense == "minsim+exfmem") return LossMode::CEPlusMinSim;
  if (defense == "maxsim") return LossMode::CEPlusMaxSim;
  return LossMode::CE;
}

bool uses_bank(const std::string& defense) {
  return defense == "exfmem" || defense == "minsim+exfmem";
}

MemoryBank obtain_bank(const RunConfig& c, const ModelState& m) {
  MemoryBank bank;
  if (!c.bank_path.empty()) {
    bank = load_bank(c.bank_path);
  } else {
    const DatasetSplit train = load_split(split_file(c, "train"));
    bank = build_bank(m, train, std::min(c.bank_size, train.size()), c.seed, c.threads);
  }
  return c.normalize_bank ? normalize_columns(std::move(bank)) : bank;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

int run_gen_data(const RunConfig& c) {
  DatasetSpec spec = c.data;
  spec.seed = c.seed;
  const Dataset d = generate(spec);
  save(d.train, output(c, "train.bin"));
  save(d.val, output(c, "val.bin"));
  save(d.test, output(c, "test.bin"));
  std::printf("wrote %zu/%zu/%zu samples to %s\n", d.train.size(), d.val.size(), d.test.size(),
              c.out.c_str());
  return 0;
}

int run_train(const RunConfig& c) {
  const DatasetSplit train_split = load_split(split_file(c, "train"));
  const DatasetSplit val_split = load_split(split_file(c, "val"));
  ArchSpec arch = c.arch;
  arch.audio_dim = train_split.spec.audio_dim;
  arch.patch_dim = train_split.spec.patch_dim;
  arch.grid_side = train_split.spec.grid_side;
  arch.num_classes = train_split.spec.num_classes;
  arch.fusion = parse_fusion(c.fusion);
  arch.pooling = parse_pooling(c.pooling);
  const Modalities keep = parse_modalities(c.modality);
  const ModelState init = keep == Modalities::AudioVisual ? init_model(arch, c.seed)
                                                          : unimodal_variant(arch, keep, c.seed);
  TrainOptions opts = c.train;
  opts.loss = training_loss(c.defense);
  opts.seed = c.seed;
  opts.threads = c.threads;
  const TrainResult r = train(init, train_split, val_split, opts);
  save(r.model, output(c, "model.bin"));

  std::string log = "epoch,loss,val_accuracy\n";
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
    char row[96];
    std::snprintf(row, sizeof row, "%zu,%.17g,%.2f\n", e, r.epoch_loss[e], r.val_accuracy[e]);
    log += row;
  }
  write_text(output(c, "train_log.csv"), log);
  std::printf("best epoch %zu, val %.2f%%, train %.2f%% (loss %s)\n", r.best_epoch,
              r.val_accuracy[r.best_epoch], accuracy(r.model, train_split, c.threads),
              to_string(opts.loss).c_str());
  return 0;
}

int run_bank(const RunConfig& c) {
  const ModelState m = load_model(c.model_path);
  const MemoryBank bank = obtain_bank(c, m);
  save(bank, output(c, "bank.bin"));
  std::printf("bank d=%zu K=%zu\n", bank.dim(), bank.size());
  return 0;
}

int run_attack(const RunConfig& c) {
  const ModelState m = load_model(c.model_path);
  const DatasetSplit split = load_split(split_file(c, c.split));
  const AttackSpec s = attack_spec(c);
  const BatchAttackResult r = attack_batch(m, split, s, c.threads);
  DatasetSplit adv = split;
  for (std::size_t i = 0; i < adv.size(); ++i) {
    adv.samples[i].audio = r.pairs[i].audio;
    adv.samples[i].visual = r.pairs[i].visual;
  }
  save(adv, output(c, "adv_" + c.split + ".bin"));
  std::printf("%s eps_a=%g eps_v=%g: clean %.2f%%, adversarial %.2f%%\n", c.attack.c_str(),
              s.eps_a, s.eps_v, round2(accuracy(m, split, c.threads)), round2(r.accuracy));
  return 0;
}

int run_eval(const RunConfig& c) {
  const ModelState m = load_model(c.model_path);
  const DatasetSplit split = load_split(split_file(c, c.split));
  const AttackSpec s = attack_spec(c);

  std::optional<MemoryBank> bank;
  DefenseConfig defense;
  defense.tag = c.defense;
  defense.ista = c.ista;
  if (uses_bank(c.defense)) {
    bank = obtain_bank(c, m);
    defense.bank = &*bank;
  }
  std::optional<EvalReport> base;
  if (!c.base_report.empty()) {
    const auto reports = read_report_csv(c.base_report);
    if (reports.empty()) throw FormatError("base report " + c.base_report + " has no rows");
    base = reports.front();
  }
  const std::string tag = c.tag.empty() ? fs::path(c.model_path).stem().string() : c.tag;
  EvalReport r = evaluate(m, defense, split, s, budgets(c), base ? &*base : nullptr, c.threads, tag);
  if (m.arch.pooling == Pooling::Attention) r.localization_acc = round2(localization_eval(m, split, std::nullopt, c.threads));
  write_report_csv({r}, output(c, "report.csv"));
  const std::string table = format_report_table({r});
  write_text(output(c, "report.txt"), table);
  std::cout << table;
  check_unimodal_invariance(m, r);
  return 0;
}

int run_localize(const RunConfig& c) {
  const ModelState m = load_model(c.model_path);
  const DatasetSplit split = load_split(split_file(c, c.split));
  const double clean = localization_eval(m, split, std::nullopt, c.threads);
  const double attacked = localization_eval(m, split, attack_spec(c), c.threads);
  char text[160];
  std::snprintf(text, sizeof text, "clean,attacked\n%.2f,%.2f\n", round2(clean), round2(attacked));
  write_text(output(c, "localization.csv"), text);
  std::printf("localization: clean %.2f%%, under %s %.2f%%\n", round2(clean), c.attack.c_str(),
              round2(attacked));
  return 0;
}

int run_export(const RunConfig& c) {
  const ModelState m = load_model(c.model_path);
  const DatasetSplit split = load_split(split_file(c, c.split));
  std::optional<AttackSpec> s;
  if (c.attacked) s = attack_spec(c);
  const fs::path path = output(c, c.attacked ? "features_attacked.csv" : "features.csv");
  export_features(m, split, path, s, c.threads);
  std::printf("wrote %zu rows to %s\n", 2 * split.size(), path.string().c_str());
  return 0;
}

// Options every subcommand shares.
void add_common(CLI::App* sub, RunConfig& c) {
  sub->option_defaults()->always_capture_default();
  sub->add_option("--seed", c.seed, "Seed")->envname("MMROBUST_SEED");
  sub->add_option("--threads", c.threads, "Worker threads (results do not depend on it)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--out", c.out, "Output directory");
}

void add_inputs(CLI::App* sub, RunConfig& c, bool with_model, bool with_split) {
  sub->add_option("--data", c.data_dir, "Directory holding train.bin, val.bin, test.bin");
  if (with_model) sub->add_option("--model", c.model_path, "Model checkpoint");
  if (with_split)
    sub->add_option("--split", c.split, "Split to use")
        ->check(CLI::IsMember({"train", "val", "test"}));
}

void add_attack(CLI::App* sub, RunConfig& c) {
  sub->add_option("--attack", c.attack, "Attack method")
      ->check(CLI::IsMember({"fgsm", "pgd", "mim"}));
  sub->add_option("--eps-a", c.eps_a, "Audio l-inf budget")->check(CLI::NonNegativeNumber);
  sub->add_option("--eps-v", c.eps_v, "Visual l-inf budget")->check(CLI::NonNegativeNumber);
  sub->add_option("--steps", c.steps, "Iterations for pgd/mim");
  sub->add_option("--mu", c.mu, "MIM momentum decay");
  sub->add_option("--step-size", c.step_size, "Per-step size (default 2.5*eps/steps)");
  sub->add_flag("--random-start", c.random_start, "Start pgd/mim from a random point in the ball");
  sub->add_option("--attack-loss", c.attack_loss, "Objective the attacker ascends")
      ->check(CLI::IsMember({"ce", "ce+minsim", "ce+maxsim"}));
}

void add_defense(CLI::App* sub, RunConfig& c) {
  sub->add_option("--defense", c.defense, "Defense selection")
      ->check(CLI::IsMember({"none", "exfmem", "minsim", "minsim+exfmem", "maxsim"}));
}

void add_bank(CLI::App* sub, RunConfig& c, bool allow_path) {
  if (allow_path) sub->add_option("--bank", c.bank_path, "Bank file (otherwise built from train)");
  sub->add_option("--bank-size", c.bank_size, "K, capped at the training size")
      ->check(CLI::PositiveNumber);
  sub->add_flag("--normalize-bank", c.normalize_bank, "Scale bank columns to unit norm");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal adversarial robustness toolkit"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read settings from a TOML/INI file; flags take precedence");
  app.fallthrough();  // subcommands hand --config up to the root
  RunConfig c;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic bimodal dataset");
  add_common(gen, c);
  gen->add_option("--classes", c.data.num_classes, "Number of classes");
  gen->add_option("--audio-dim", c.data.audio_dim, "Audio vector length");
  gen->add_option("--patch-dim", c.data.patch_dim, "Visual patch length");
  gen->add_option("--grid", c.data.grid_side, "Visual grid side G (G*G patches)");
  gen->add_option("--per-class", c.data.samples_per_class, "Samples per class in each split");
  gen->add_option("--sigma", c.data.noise_sigma, "Gaussian noise std");
  gen->add_option("--corruption", c.data.cross_modal_corruption,
                  "Probability that the visual class is redrawn at random");

  auto* tr = app.add_subcommand("train", "Train a classifier");
  add_common(tr, c);
  add_inputs(tr, c, false, false);
  add_defense(tr, c);
  tr->add_option("--fusion", c.fusion, "Fusion")
      ->check(CLI::IsMember({"sum", "concat", "film", "gated-sum", "gated-concat"}));
  tr->add_option("--pooling", c.pooling, "Patch pooling")->check(CLI::IsMember({"max", "attention"}));
  tr->add_option("--modality", c.modality, "Branches kept")->check(CLI::IsMember({"av", "a", "v"}));
  tr->add_option("--hidden-dim", c.arch.hidden_dim, "Encoder hidden width");
  tr->add_option("--embed-dim", c.arch.embed_dim, "Embedding width d");
  tr->add_option("--epochs", c.train.epochs, "Epochs");
  tr->add_option("--lr", c.train.learning_rate, "Learning rate");
  tr->add_option("--momentum", c.train.momentum, "SGD momentum");
  tr->add_option("--batch-size", c.train.batch_size, "Minibatch size");
  tr->add_option("--lr-decay", c.train.lr_decay, "Learning-rate decay factor");
  tr->add_option("--decay-every", c.train.decay_every, "Epochs between decays (0 = never)");

  auto* bk = app.add_subcommand("bank", "Build a feature memory bank from training data");
  add_common(bk, c);
  add_inputs(bk, c, true, false);
  add_bank(bk, c, false);

  auto* at = app.add_subcommand("attack", "Write adversarial versions of a split");
  add_common(at, c);
  add_inputs(at, c, true, true);
  add_attack(at, c);

  auto* ev = app.add_subcommand("eval", "Clean and attacked accuracy, Avg and RI");
  add_common(ev, c);
  add_inputs(ev, c, true, true);
  add_attack(ev, c);
  add_defense(ev, c);
  add_bank(ev, c, true);
  ev->add_option("--preset", c.preset, "Budget preset: table1 = 0.12/0.12/0.06, table4 = 0.06")
      ->check(CLI::IsMember({"", "table1", "table4"}));
  ev->add_option("--lambda-a", c.ista.lambda_a, "Audio Lasso weight")->check(CLI::NonNegativeNumber);
  ev->add_option("--lambda-v", c.ista.lambda_v, "Visual Lasso weight")->check(CLI::NonNegativeNumber);
  ev->add_option("--ista-iters", c.ista.max_iters, "ISTA iteration cap");
  ev->add_option("--base-report", c.base_report, "Report CSV of the base model, for RI");
  ev->add_option("--tag", c.tag, "Model tag in the report (default: checkpoint file stem)");

  auto* lo = app.add_subcommand("localize", "Attention localization, clean and attacked");
  add_common(lo, c);
  add_inputs(lo, c, true, true);
  add_attack(lo, c);

  auto* ex = app.add_subcommand("export-features", "Export audio and visual embeddings as CSV");
  add_common(ex, c);
  add_inputs(ex, c, true, true);
  add_attack(ex, c);
  ex->add_flag("--attacked", c.attacked, "Export features of adversarial inputs");

  CLI11_PARSE(app, argc, argv);

  CLI::App* chosen = app.get_subcommands().front();
  try {
    fs::create_directories(c.out);
    write_text(fs::path(c.out) / (chosen->get_name() + ".resolved.toml"),
               "[" + chosen->get_name() + "]\n" + chosen->config_to_str(true, true));
    if (chosen == gen) return run_gen_data(c);
    if (chosen == tr) return run_train(c);
    if (chosen == bk) return run_bank(c);
    if (chosen == at) return run_attack(c);
    if (chosen == ev) return run_eval(c);
    if (chosen == lo) return run_localize(c);
    return run_export(c);
  } catch (const InvariantViolation& e) {
    std::fprintf(stderr, "invariant violation: %s\n", e.what());
    return kExitInvariant;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
}

#include "mmrobust/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <memory>
#include <numeric>
#include <sstream>

#include "mmrobust/diffcore.hpp"
#include "mmrobust/errors.hpp"
#include "mmrobust/parallel.hpp"

namespace mmrobust {

namespace {

void check_percent(double v, const char* what) {
  if (!(v >= 0.0 && v <= 100.0))
    throw SpecError(std::string(what) + " must lie in [0, 100], got " + std::to_string(v));
}

std::unique_ptr<AttackTarget> make_target(const ModelState& m, const DefenseConfig& defense,
                                          LossMode mode) {
  if (defense.bank != nullptr)
    return std::make_unique<DefendedTarget>(m, *defense.bank, defense.ista, mode);
  return std::make_unique<ModelTarget>(m, mode);
}

double clean_accuracy(const AttackTarget& target, const DatasetSplit& split, std::size_t threads) {
  std::vector<char> hit(split.size(), 0);
  parallel_for(split.size(), threads, [&](std::size_t i) {
    const auto& s = split.samples[i];
    hit[i] = target.predict(s.audio, s.visual) == s.label;
  });
  const auto correct = std::accumulate(hit.begin(), hit.end(), std::size_t{0});
  return 100.0 * static_cast<double>(correct) / static_cast<double>(split.size());
}

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream in(line);
  while (std::getline(in, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

void write_feature_row(std::ostream& out, std::size_t id, const char* modality,
                       std::uint32_t label, bool attacked, std::span<const double> f) {
  out << id << ',' << modality << ',' << label << ',' << (attacked ? 1 : 0);
  for (double v : f) out << ',' << fmt17(v);
  out << '\n';
}

}  // namespace

bool EvalReport::same_attack(const EvalReport& o) const {
  return method == o.method && budgets == o.budgets && steps == o.steps &&
         momentum == o.momentum && step_size == o.step_size;
}

double round2(double percent) {
  // The 1e-9 absorbs binary representation error (e.g. 20.829999999999998).
  return std::floor(percent * 100.0 + 0.5 + 1e-9) / 100.0;
}

double avg_metric(double a, double v, double av) {
  check_percent(a, "avg_metric: audio-attack accuracy");
  check_percent(v, "avg_metric: visual-attack accuracy");
  check_percent(av, "avg_metric: joint-attack accuracy");
  return round2((a + v + av) / 3.0);
}

double ri_metric(const EvalReport& defense, const EvalReport& base) {
  if (!defense.same_attack(base)) {
    throw SpecError("ri_metric: reports '" + defense.defense_tag + "' and '" + base.defense_tag +
                    "' were produced under different attack settings");
  }
  return round2((defense.acc_clean_av + defense.avg) - (base.acc_clean_av + base.avg));
}

EvalReport evaluate(const ModelState& m, const DefenseConfig& defense, const DatasetSplit& test,
                    const AttackSpec& attack, const BudgetPlan& budgets, const EvalReport* base,
                    std::size_t threads, std::string model_tag) {
  if (test.empty()) throw SpecError("evaluate: empty split");
  attack.validate();
  const auto target = make_target(m, defense, attack.loss_mode);

  EvalReport r;
  r.model_tag = std::move(model_tag);
  r.defense_tag = defense.tag;
  r.method = attack.method;
  r.budgets = budgets;
  r.steps = attack.steps;
  r.momentum = attack.momentum;
  r.step_size = attack.step_size;
  r.loss_mode = attack.loss_mode;
  r.seed = attack.seed;

  auto attacked = [&](double eps_a, double eps_v) {
    AttackSpec s = attack;
    s.eps_a = eps_a;
    s.eps_v = eps_v;
    return round2(attack_batch(*target, test, s, threads).accuracy);
  };
  r.acc_clean_av = round2(clean_accuracy(*target, test, threads));
  r.acc_attack_a = attacked(budgets.audio_only, 0.0);
  r.acc_attack_v = attacked(0.0, budgets.visual_only);
  r.acc_attack_av = attacked(budgets.joint_audio, budgets.joint_visual);
  r.avg = avg_metric(r.acc_attack_a, r.acc_attack_v, r.acc_attack_av);
  if (base != nullptr) r.ri = ri_metric(r, *base);
  return r;
}

void check_unimodal_invariance(const ModelState& m, const EvalReport& report) {
  switch (m.arch.modalities) {
    case Modalities::AudioVisual: return;
    case Modalities::AudioOnly:
      if (report.acc_attack_v != report.acc_clean_av) {
        throw InvariantViolation("unimodal A model: visual-attack accuracy " +
                                 fmt2(report.acc_attack_v) + " differs from clean accuracy " +
                                 fmt2(report.acc_clean_av));
      }
      return;
    case Modalities::VisualOnly:
      if (report.acc_attack_a != report.acc_clean_av) {
        throw InvariantViolation("unimodal V model: audio-attack accuracy " +
                                 fmt2(report.acc_attack_a) + " differs from clean accuracy " +
                                 fmt2(report.acc_clean_av));
      }
      return;
  }
}

std::vector<double> default_eps_grid() {
  return {0.001, 0.002, 0.005, 0.01, 0.015, 0.02, 0.03, 0.04, 0.05, 0.06};
}

std::vector<double> accuracy_sweep(const ModelState& m, const DefenseConfig& defense,
                                   const DatasetSplit& test, const AttackSpec& attack,
                                   const std::vector<double>& eps_grid, std::size_t threads) {
  const auto target = make_target(m, defense, attack.loss_mode);
  std::vector<double> out;
  out.reserve(eps_grid.size());
  for (double eps : eps_grid) {
    AttackSpec s = attack;
    s.eps_a = eps;
    s.eps_v = eps;
    out.push_back(attack_batch(*target, test, s, threads).accuracy);
  }
  return out;
}

double localization_eval(const ModelState& m, const DatasetSplit& split,
                         const std::optional<AttackSpec>& attack, std::size_t threads) {
  if (m.arch.pooling != Pooling::Attention)
    throw SpecError("localization_eval: model has no attention pooling");
  if (split.empty()) throw SpecError("localization_eval: empty split");
  std::vector<char> hit(split.size(), 0);
  parallel_for(split.size(), threads, [&](std::size_t i) {
    const auto& s = split.samples[i];
    ForwardTrace t;
    if (attack) {
      const AdversarialPair adv = run_attack(m, s, *attack, i);
      t = forward(m, adv.audio, adv.visual);
    } else {
      t = forward(m, s.audio, s.visual);
    }
    hit[i] = argmax(t.attention) == s.sounding_patch;
  });
  const auto correct = std::accumulate(hit.begin(), hit.end(), std::size_t{0});
  return 100.0 * static_cast<double>(correct) / static_cast<double>(split.size());
}

void export_features(const ModelState& m, const DatasetSplit& split,
                     const std::filesystem::path& path, const std::optional<AttackSpec>& attack,
                     std::size_t threads) {
  std::vector<ForwardTrace> traces(split.size());
  parallel_for(split.size(), threads, [&](std::size_t i) {
    const auto& s = split.samples[i];
    if (attack) {
      const AdversarialPair adv = run_attack(m, s, *attack, i);
      traces[i] = forward(m, adv.audio, adv.visual);
    } else {
      traces[i] = forward(m, s.audio, s.visual);
    }
  });
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "sample_id,modality,label,attacked";
  for (std::size_t j = 0; j < m.arch.embed_dim; ++j) out << ",f" << j;
  out << '\n';
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto label = split.samples[i].label;
    write_feature_row(out, i, "audio", label, attack.has_value(), traces[i].f_a);
    write_feature_row(out, i, "visual", label, attack.has_value(), traces[i].f_v);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

std::string report_csv_header() {
  return "model,defense,attack,steps,momentum,step_size,loss_mode,eps_a_only,eps_v_only,"
         "eps_av_a,eps_av_v,seed,clean_av,attack_a,attack_v,attack_av,avg,ri,localization";
}

std::string report_csv_row(const EvalReport& r) {
  std::ostringstream o;
  o << r.model_tag << ',' << r.defense_tag << ',' << to_string(r.method) << ',' << r.steps << ','
    << fmt17(r.momentum) << ',' << (r.step_size ? fmt17(*r.step_size) : std::string("auto"))
    << ',' << to_string(r.loss_mode) << ',' << fmt17(r.budgets.audio_only) << ','
    << fmt17(r.budgets.visual_only) << ',' << fmt17(r.budgets.joint_audio) << ','
    << fmt17(r.budgets.joint_visual) << ',' << r.seed << ',' << fmt2(r.acc_clean_av) << ','
    << fmt2(r.acc_attack_a) << ',' << fmt2(r.acc_attack_v) << ',' << fmt2(r.acc_attack_av) << ','
    << fmt2(r.avg) << ',' << (r.ri ? fmt2(*r.ri) : std::string()) << ','
    << (r.localization_acc ? fmt2(*r.localization_acc) : std::string());
  return o.str();
}

void write_report_csv(const std::vector<EvalReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << report_csv_header() << '\n';
  for (const auto& r : reports) out << report_csv_row(r) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::vector<EvalReport> read_report_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != report_csv_header())
    throw FormatError("report " + path.string() + ": unexpected header");
  std::vector<EvalReport> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split_csv(line);
    if (f.size() != 19) throw FormatError("report " + path.string() + ": bad row '" + line + "'");
    try {
      EvalReport r;
      r.model_tag = f[0];
      r.defense_tag = f[1];
      r.method = parse_attack_method(f[2]);
      r.steps = std::stoul(f[3]);
      r.momentum = std::stod(f[4]);
      if (f[5] != "auto") r.step_size = std::stod(f[5]);
      r.loss_mode = parse_loss_mode(f[6]);
      r.budgets = {std::stod(f[7]), std::stod(f[8]), std::stod(f[9]), std::stod(f[10])};
      r.seed = std::stoull(f[11]);
      r.acc_clean_av = std::stod(f[12]);
      r.acc_attack_a = std::stod(f[13]);
      r.acc_attack_v = std::stod(f[14]);
      r.acc_attack_av = std::stod(f[15]);
      r.avg = std::stod(f[16]);
      if (!f[17].empty()) r.ri = std::stod(f[17]);
      if (!f[18].empty()) r.localization_acc = std::stod(f[18]);
      out.push_back(std::move(r));
    } catch (const std::logic_error& e) {
      throw FormatError("report " + path.string() + ": bad field in '" + line + "' (" +
                        e.what() + ")");
    }
  }
  return out;
}

std::string format_report_table(const std::vector<EvalReport>& reports) {
  std::ostringstream o;
  auto row = [&](const std::vector<std::string>& cells) {
    o << std::left << std::setw(14) << cells[0] << std::setw(16) << cells[1] << std::setw(8)
      << cells[2];
    for (std::size_t i = 3; i < cells.size(); ++i) o << std::right << std::setw(10) << cells[i];
    o << '\n';
  };
  row({"model", "defense", "attack", "clean AV", "atk A", "atk V", "atk AV", "Avg", "RI", "loc"});
  for (const auto& r : reports) {
    row({r.model_tag, r.defense_tag, to_string(r.method), fmt2(r.acc_clean_av),
         fmt2(r.acc_attack_a), fmt2(r.acc_attack_v), fmt2(r.acc_attack_av), fmt2(r.avg),
         r.ri ? fmt2(*r.ri) : "-", r.localization_acc ? fmt2(*r.localization_acc) : "-"});
  }
  return o.str();
}

SeedSummary summarize(const std::vector<EvalReport>& reports) {
  SeedSummary s;
  s.runs = reports.size();
  if (reports.empty()) return s;
  auto stats = [&](auto field, double& mean, double& sd) {
    double total = 0.0;
    for (const auto& r : reports) total += field(r);
    mean = total / static_cast<double>(reports.size());
    double sq = 0.0;
    for (const auto& r : reports) sq += (field(r) - mean) * (field(r) - mean);
    sd = reports.size() > 1 ? std::sqrt(sq / static_cast<double>(reports.size() - 1)) : 0.0;
  };
  stats([](const EvalReport& r) { return r.acc_clean_av; }, s.clean_mean, s.clean_sd);
  stats([](const EvalReport& r) { return r.avg; }, s.avg_mean, s.avg_sd);
  return s;
}

}  // namespace mmrobust

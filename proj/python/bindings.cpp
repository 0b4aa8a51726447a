#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <optional>
#include <string>

#include "mmrobust/attacks.hpp"
#include "mmrobust/dataset.hpp"
#include "mmrobust/defense.hpp"
#include "mmrobust/errors.hpp"
#include "mmrobust/eval.hpp"
#include "mmrobust/model.hpp"
#include "mmrobust/train.hpp"

namespace py = pybind11;
using namespace pybind11::literals;
using namespace mmrobust;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_numpy(const Vector& v) {
  Array out(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Array to_numpy(const Matrix& m) {
  Array out({static_cast<py::ssize_t>(m.rows()), static_cast<py::ssize_t>(m.cols())});
  std::copy(m.flat().begin(), m.flat().end(), out.mutable_data());
  return out;
}

Vector to_vector(const Array& a) {
  if (a.ndim() != 1) throw DimensionError("expected a 1-D array");
  return Vector(a.data(), a.data() + a.size());
}

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw DimensionError("expected a 2-D array");
  return Matrix(a.shape(0), a.shape(1), Vector(a.data(), a.data() + a.size()));
}

py::dict pair_dict(const AdversarialPair& p) {
  return py::dict("audio"_a = to_numpy(p.audio), "visual"_a = to_numpy(p.visual),
                  "achieved_loss"_a = p.achieved_loss, "linf_audio"_a = p.linf_audio,
                  "linf_visual"_a = p.linf_visual);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multimodal adversarial attacks, defenses and robustness metrics";

  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<SpecError>(m, "SpecError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<InvariantViolation>(m, "InvariantViolation", PyExc_RuntimeError);

  py::enum_<FusionKind>(m, "FusionKind")
      .value("Sum", FusionKind::Sum)
      .value("Concat", FusionKind::Concat)
      .value("FiLM", FusionKind::FiLM)
      .value("GatedSum", FusionKind::GatedSum)
      .value("GatedConcat", FusionKind::GatedConcat);
  py::enum_<Pooling>(m, "Pooling").value("Max", Pooling::Max).value("Attention", Pooling::Attention);
  py::enum_<Modalities>(m, "Modalities")
      .value("AudioVisual", Modalities::AudioVisual)
      .value("AudioOnly", Modalities::AudioOnly)
      .value("VisualOnly", Modalities::VisualOnly);
  py::enum_<LossMode>(m, "LossMode")
      .value("CE", LossMode::CE)
      .value("CEPlusMinSim", LossMode::CEPlusMinSim)
      .value("CEPlusMaxSim", LossMode::CEPlusMaxSim);
  py::enum_<AttackMethod>(m, "AttackMethod")
      .value("FGSM", AttackMethod::FGSM)
      .value("PGD", AttackMethod::PGD)
      .value("MIM", AttackMethod::MIM);

  // Data
  py::class_<DatasetSpec>(m, "DatasetSpec")
      .def(py::init<>())
      .def_readwrite("num_classes", &DatasetSpec::num_classes)
      .def_readwrite("audio_dim", &DatasetSpec::audio_dim)
      .def_readwrite("grid_side", &DatasetSpec::grid_side)
      .def_readwrite("patch_dim", &DatasetSpec::patch_dim)
      .def_readwrite("samples_per_class", &DatasetSpec::samples_per_class)
      .def_readwrite("noise_sigma", &DatasetSpec::noise_sigma)
      .def_readwrite("cross_modal_corruption", &DatasetSpec::cross_modal_corruption)
      .def_readwrite("seed", &DatasetSpec::seed);

  py::class_<BimodalSample>(m, "BimodalSample")
      .def_property_readonly("audio", [](const BimodalSample& s) { return to_numpy(s.audio); })
      .def_property_readonly("visual", [](const BimodalSample& s) { return to_numpy(s.visual); })
      .def_readonly("label", &BimodalSample::label)
      .def_readonly("sounding_patch", &BimodalSample::sounding_patch);

  py::class_<DatasetSplit>(m, "DatasetSplit")
      .def_readonly("spec", &DatasetSplit::spec)
      .def_readonly("samples", &DatasetSplit::samples)
      .def("__len__", &DatasetSplit::size)
      .def("__eq__", [](const DatasetSplit& a, const DatasetSplit& b) { return a == b; })
      .def("save", [](const DatasetSplit& s, const std::string& path) { save(s, path); }, "path"_a);
  m.def("load_split", [](const std::string& path) { return load_split(path); }, "path"_a);

  py::class_<Dataset>(m, "Dataset")
      .def_readonly("train", &Dataset::train)
      .def_readonly("val", &Dataset::val)
      .def_readonly("test", &Dataset::test)
      .def_property_readonly("audio_prototypes",
                             [](const Dataset& d) { return to_numpy(d.audio_prototypes); })
      .def_property_readonly("visual_prototypes",
                             [](const Dataset& d) { return to_numpy(d.visual_prototypes); });
  m.def("generate", &generate, "spec"_a);

  // Model
  py::class_<ArchSpec>(m, "ArchSpec")
      .def(py::init<>())
      .def_readwrite("audio_dim", &ArchSpec::audio_dim)
      .def_readwrite("patch_dim", &ArchSpec::patch_dim)
      .def_readwrite("grid_side", &ArchSpec::grid_side)
      .def_readwrite("hidden_dim", &ArchSpec::hidden_dim)
      .def_readwrite("embed_dim", &ArchSpec::embed_dim)
      .def_readwrite("num_classes", &ArchSpec::num_classes)
      .def_readwrite("fusion", &ArchSpec::fusion)
      .def_readwrite("pooling", &ArchSpec::pooling)
      .def_readwrite("modalities", &ArchSpec::modalities)
      .def("fused_dim", &ArchSpec::fused_dim);

  py::class_<ModelState>(m, "ModelState")
      .def_readonly("arch", &ModelState::arch)
      .def("__eq__", [](const ModelState& a, const ModelState& b) { return a == b; })
      .def("save", [](const ModelState& s, const std::string& path) { save(s, path); }, "path"_a);
  m.def("load_model", [](const std::string& path) { return load_model(path); }, "path"_a);
  m.def("init_model", &init_model, "arch"_a, "seed"_a);
  m.def("unimodal_variant", &unimodal_variant, "arch"_a, "keep"_a, "seed"_a);

  m.def(
      "forward",
      [](const ModelState& s, const Array& audio, const Array& visual) {
        const ForwardTrace t = forward(s, to_vector(audio), to_matrix(visual));
        py::dict out("probs"_a = to_numpy(t.probs), "logits"_a = to_numpy(t.logits),
                     "f_a"_a = to_numpy(t.f_a), "f_v"_a = to_numpy(t.f_v));
        if (!t.attention.empty()) out["attention"] = to_numpy(t.attention);
        return out;
      },
      "model"_a, "audio"_a, "visual"_a);
  m.def(
      "predict",
      [](const ModelState& s, const Array& audio, const Array& visual) {
        return predict(s, to_vector(audio), to_matrix(visual));
      },
      "model"_a, "audio"_a, "visual"_a);
  m.def(
      "input_gradients",
      [](const ModelState& s, const Array& audio, const Array& visual, std::size_t label,
         LossMode mode) {
        const InputGradients g = input_gradients(s, to_vector(audio), to_matrix(visual), label, mode);
        return py::make_tuple(g.loss, to_numpy(g.audio), to_numpy(g.visual));
      },
      "model"_a, "audio"_a, "visual"_a, "label"_a, "mode"_a = LossMode::CE);

  // Training
  py::class_<TrainOptions>(m, "TrainOptions")
      .def(py::init<>())
      .def_readwrite("learning_rate", &TrainOptions::learning_rate)
      .def_readwrite("momentum", &TrainOptions::momentum)
      .def_readwrite("epochs", &TrainOptions::epochs)
      .def_readwrite("batch_size", &TrainOptions::batch_size)
      .def_readwrite("lr_decay", &TrainOptions::lr_decay)
      .def_readwrite("decay_every", &TrainOptions::decay_every)
      .def_readwrite("loss", &TrainOptions::loss)
      .def_readwrite("seed", &TrainOptions::seed)
      .def_readwrite("threads", &TrainOptions::threads);
  py::class_<TrainResult>(m, "TrainResult")
      .def_readonly("model", &TrainResult::model)
      .def_readonly("epoch_loss", &TrainResult::epoch_loss)
      .def_readonly("val_accuracy", &TrainResult::val_accuracy)
      .def_readonly("best_epoch", &TrainResult::best_epoch);
  m.def("train", &train, "init"_a, "train_split"_a, "val_split"_a, "options"_a,
        py::call_guard<py::gil_scoped_release>());
  m.def("accuracy", &accuracy, "model"_a, "split"_a, "threads"_a = 1);

  // Attacks
  py::class_<AttackSpec>(m, "AttackSpec")
      .def(py::init<>())
      .def_readwrite("method", &AttackSpec::method)
      .def_readwrite("eps_a", &AttackSpec::eps_a)
      .def_readwrite("eps_v", &AttackSpec::eps_v)
      .def_readwrite("steps", &AttackSpec::steps)
      .def_readwrite("step_size", &AttackSpec::step_size)
      .def_readwrite("momentum", &AttackSpec::momentum)
      .def_readwrite("random_start", &AttackSpec::random_start)
      .def_readwrite("loss_mode", &AttackSpec::loss_mode)
      .def_readwrite("seed", &AttackSpec::seed)
      .def("resolved_step_size", &AttackSpec::resolved_step_size);
  m.def(
      "attack",
      [](const ModelState& s, const Array& audio, const Array& visual, std::size_t label,
         const AttackSpec& spec, std::uint64_t stream) {
        return pair_dict(run_attack(ModelTarget(s, spec.loss_mode), to_vector(audio),
                                    to_matrix(visual), label, spec, stream));
      },
      "model"_a, "audio"_a, "visual"_a, "label"_a, "spec"_a, "stream"_a = 0);
  m.def(
      "attack_accuracy",
      [](const ModelState& s, const DatasetSplit& split, const AttackSpec& spec,
         std::size_t threads) { return attack_batch(s, split, spec, threads).accuracy; },
      "model"_a, "split"_a, "spec"_a, "threads"_a = 1, py::call_guard<py::gil_scoped_release>());

  // Defense
  m.def(
      "soft_threshold",
      [](const Array& x, double t) { return to_numpy(soft_threshold(to_vector(x), t)); }, "x"_a,
      "threshold"_a);
  py::class_<IstaConfig>(m, "IstaConfig")
      .def(py::init<>())
      .def_readwrite("lambda_a", &IstaConfig::lambda_a)
      .def_readwrite("lambda_v", &IstaConfig::lambda_v)
      .def_readwrite("max_iters", &IstaConfig::max_iters)
      .def_readwrite("step", &IstaConfig::step)
      .def_readwrite("tol", &IstaConfig::tol)
      .def_readwrite("average_with_input", &IstaConfig::average_with_input);
  m.def(
      "ista_lasso",
      [](const Array& bank, const Array& f, double lambda, const IstaConfig& cfg) {
        const LassoResult r = ista_lasso(to_matrix(bank), to_vector(f), lambda, cfg);
        return py::make_tuple(to_numpy(r.alpha), r.objective_trace);
      },
      "bank"_a, "f"_a, "lam"_a, "config"_a = IstaConfig{});
  py::class_<MemoryBank>(m, "MemoryBank")
      .def_property_readonly("audio", [](const MemoryBank& b) { return to_numpy(b.audio); })
      .def_property_readonly("visual", [](const MemoryBank& b) { return to_numpy(b.visual); })
      .def_readonly("source_ids", &MemoryBank::source_ids)
      .def("__len__", &MemoryBank::size)
      .def("save", [](const MemoryBank& b, const std::string& path) { save(b, path); }, "path"_a);
  m.def("load_bank", [](const std::string& path) { return load_bank(path); }, "path"_a);
  m.def("build_bank", &build_bank, "model"_a, "train_split"_a, "k"_a, "seed"_a, "threads"_a = 1);
  m.def("normalize_columns", &normalize_columns, "bank"_a);
  m.def(
      "defended_predict",
      [](const ModelState& s, const MemoryBank& bank, const Array& audio, const Array& visual,
         const IstaConfig& cfg) {
        return to_numpy(defended_predict(s, bank, to_vector(audio), to_matrix(visual), cfg));
      },
      "model"_a, "bank"_a, "audio"_a, "visual"_a, "config"_a = IstaConfig{});

  // Evaluation
  py::class_<BudgetPlan>(m, "BudgetPlan")
      .def(py::init<double, double, double, double>(), "audio_only"_a, "visual_only"_a,
           "joint_audio"_a, "joint_visual"_a)
      .def_static("uniform", &BudgetPlan::uniform, "eps"_a)
      .def_static("table1", &BudgetPlan::table1)
      .def_static("table4", &BudgetPlan::table4)
      .def_readwrite("audio_only", &BudgetPlan::audio_only)
      .def_readwrite("visual_only", &BudgetPlan::visual_only)
      .def_readwrite("joint_audio", &BudgetPlan::joint_audio)
      .def_readwrite("joint_visual", &BudgetPlan::joint_visual);
  py::class_<EvalReport>(m, "EvalReport")
      .def(py::init<>())
      .def_readwrite("model_tag", &EvalReport::model_tag)
      .def_readwrite("defense_tag", &EvalReport::defense_tag)
      .def_readwrite("method", &EvalReport::method)
      .def_readwrite("budgets", &EvalReport::budgets)
      .def_readwrite("acc_clean_av", &EvalReport::acc_clean_av)
      .def_readwrite("acc_attack_a", &EvalReport::acc_attack_a)
      .def_readwrite("acc_attack_v", &EvalReport::acc_attack_v)
      .def_readwrite("acc_attack_av", &EvalReport::acc_attack_av)
      .def_readwrite("avg", &EvalReport::avg)
      .def_readwrite("ri", &EvalReport::ri)
      .def_readwrite("localization_acc", &EvalReport::localization_acc)
      .def("__eq__", [](const EvalReport& a, const EvalReport& b) { return a == b; })
      .def("__repr__", [](const EvalReport& r) { return format_report_table({r}); });
  m.def("round2", &round2, "percent"_a);
  m.def("avg_metric", &avg_metric, "a"_a, "v"_a, "av"_a);
  m.def("ri_metric", &ri_metric, "defense"_a, "base"_a);
  m.def(
      "evaluate",
      [](const ModelState& s, const DatasetSplit& test, const AttackSpec& attack,
         const BudgetPlan& budgets, const MemoryBank* bank, const IstaConfig& ista,
         const std::string& defense_tag, const EvalReport* base, std::size_t threads) {
        py::gil_scoped_release release;
        DefenseConfig defense{defense_tag, bank, ista};
        return evaluate(s, defense, test, attack, budgets, base, threads);
      },
      "model"_a, "test"_a, "attack"_a = AttackSpec{}, "budgets"_a = BudgetPlan::table4(),
      "bank"_a = nullptr, "ista"_a = IstaConfig{}, "defense_tag"_a = "none", "base"_a = nullptr,
      "threads"_a = 1);
  m.def("check_unimodal_invariance", &check_unimodal_invariance, "model"_a, "report"_a);
  m.def("localization_eval", &localization_eval, "model"_a, "split"_a,
        "attack"_a = std::optional<AttackSpec>{}, "threads"_a = 1);
  m.def("default_eps_grid", &default_eps_grid);
}

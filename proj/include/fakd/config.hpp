#pragma once

#include <cstdint>
#include <fstream>
#include <initializer_list>
#include <string>
#include <vector>

#include <json.hpp>

#include "fakd/class_stats.hpp"
#include "fakd/error.hpp"
#include "fakd/harness.hpp"
#include "fakd/losses.hpp"
#include "fakd/toymodels.hpp"

namespace fakd {

// Verification campaign parameters (cmd_verify).
struct VerifyConfig {
  std::uint64_t seed = 90210;
  std::size_t pixels = 12;       // M of generated instances
  std::size_t features = 6;      // A
  std::size_t classes = 5;       // C
  std::size_t reduction_instances = 120;
  double reduction_tol = 1e-12;
  std::size_t bound_instances = 50;
  std::int64_t mc_samples = 10000;
  std::vector<double> lambdas{0.25, 1.0};
  std::vector<double> taus{1.0, 4.0};
  std::vector<DiagonalMode> modes{DiagonalMode::paper_form, DiagonalMode::exact_diagonal};
  VarianceDenominator denominator = VarianceDenominator::tau_squared;
  std::size_t grad_instances = 20;
  double grad_step = 1e-5;
  double grad_tol = 1e-5;
  std::size_t mgf_instances = 20;
  std::int64_t mgf_samples = 100000;
};

struct FullConfig {
  ExperimentConfig experiment;
  VerifyConfig verify;
};

namespace cfg_detail {

using json = nlohmann::json;

inline std::string join_path(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

inline void check_keys(const json& j, const std::string& path,
                       std::initializer_list<const char*> allowed) {
  require(j.is_object(), "invalid-config", (path.empty() ? "config" : path) + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    require(known, "invalid-config", "unknown key '" + join_path(path, it.key()) + "'");
  }
}

inline double num_or(const json& j, const std::string& path, const char* key, double def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  require(it->is_number(), "invalid-config", join_path(path, key) + " must be a number");
  return it->get<double>();
}

inline std::int64_t int_or(const json& j, const std::string& path, const char* key,
                           std::int64_t def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  require(it->is_number_integer(), "invalid-config", join_path(path, key) + " must be an integer");
  return it->get<std::int64_t>();
}

inline std::size_t size_or(const json& j, const std::string& path, const char* key,
                           std::size_t def) {
  const std::int64_t v = int_or(j, path, key, std::int64_t(def));
  require(v >= 0, "invalid-config", join_path(path, key) + " must be >= 0");
  return std::size_t(v);
}

inline bool bool_or(const json& j, const std::string& path, const char* key, bool def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  require(it->is_boolean(), "invalid-config", join_path(path, key) + " must be a boolean");
  return it->get<bool>();
}

inline std::string str_or(const json& j, const std::string& path, const char* key,
                          const std::string& def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  require(it->is_string(), "invalid-config", join_path(path, key) + " must be a string");
  return it->get<std::string>();
}

inline std::vector<double> num_list_or(const json& j, const std::string& path, const char* key,
                                       std::vector<double> def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  require(it->is_array(), "invalid-config", join_path(path, key) + " must be an array");
  std::vector<double> out;
  for (const auto& v : *it) {
    require(v.is_number(), "invalid-config", join_path(path, key) + " entries must be numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

inline TaskConfig parse_task(const json& j, const std::string& path) {
  check_keys(j, path,
             {"task_id", "classes", "input_dim", "image_side", "separation", "noise",
              "imbalance", "train_images", "val_images"});
  TaskConfig t;
  t.task_id = str_or(j, path, "task_id", t.task_id);
  t.classes = size_or(j, path, "classes", t.classes);
  t.input_dim = size_or(j, path, "input_dim", t.input_dim);
  t.image_side = size_or(j, path, "image_side", t.image_side);
  t.separation = num_or(j, path, "separation", t.separation);
  t.noise = num_or(j, path, "noise", t.noise);
  t.imbalance = num_or(j, path, "imbalance", t.imbalance);
  t.train_images = size_or(j, path, "train_images", t.train_images);
  t.val_images = size_or(j, path, "val_images", t.val_images);
  return t;
}

inline ModelConfig parse_model(const json& j, const std::string& path, ModelConfig def) {
  check_keys(j, path, {"extractor", "hidden_dim", "feature_dim"});
  def.extractor = parse_extractor(str_or(j, path, "extractor", extractor_name(def.extractor)));
  def.hidden_dim = size_or(j, path, "hidden_dim", def.hidden_dim);
  def.feature_dim = size_or(j, path, "feature_dim", def.feature_dim);
  return def;
}

inline TrainConfig parse_train(const json& j, const std::string& path, TrainConfig def) {
  check_keys(j, path, {"steps", "base_lr", "momentum", "poly_power", "batch_images"});
  def.steps = int_or(j, path, "steps", def.steps);
  def.base_lr = num_or(j, path, "base_lr", def.base_lr);
  def.momentum = num_or(j, path, "momentum", def.momentum);
  def.poly_power = num_or(j, path, "poly_power", def.poly_power);
  def.batch_images = size_or(j, path, "batch_images", def.batch_images);
  return def;
}

inline VariantSpec parse_variant(const json& j, const std::string& path) {
  check_keys(j, path,
             {"label", "variant", "weight", "lambda0", "tau", "diagonal_mode",
              "variance_denominator"});
  auto it = j.find("variant");
  require(it != j.end() && it->is_string(), "invalid-config",
          join_path(path, "variant") + " is required and must be a string");
  const std::string name = it->get<std::string>();

  VariantSpec vs;
  if (name == "no-distill") {
    vs.no_distill = true;
    vs.variant = LossVariant::PD;
    vs.weight = 0.0;
    vs.tau = 1.0;
  } else {
    vs.variant = fakd::parse_variant(name);
    const bool cwd = vs.variant == LossVariant::CWD || vs.variant == LossVariant::AUG_CWD;
    const bool aug = vs.variant == LossVariant::AUG_PD || vs.variant == LossVariant::AUG_CWD;
    vs.weight = cwd ? 3.0 : 1.0;
    vs.tau = cwd ? 4.0 : 1.0;
    vs.lambda0 = aug ? 1.0 : 0.0;
  }
  vs.label = str_or(j, path, "label", name);
  vs.weight = num_or(j, path, "weight", vs.weight);
  vs.lambda0 = num_or(j, path, "lambda0", vs.lambda0);
  vs.tau = num_or(j, path, "tau", vs.tau);
  vs.diagonal_mode =
      parse_diagonal_mode(str_or(j, path, "diagonal_mode", diagonal_mode_name(vs.diagonal_mode)));
  vs.variance_denominator = parse_denominator(
      str_or(j, path, "variance_denominator", denominator_name(vs.variance_denominator)));
  return vs;
}

inline VerifyConfig parse_verify(const json& j, const std::string& path) {
  check_keys(j, path,
             {"seed", "pixels", "features", "classes", "reduction_instances", "reduction_tol",
              "bound_instances", "mc_samples", "lambdas", "taus", "modes", "denominator",
              "grad_instances", "grad_step", "grad_tol", "mgf_instances", "mgf_samples"});
  VerifyConfig v;
  v.seed = std::uint64_t(int_or(j, path, "seed", std::int64_t(v.seed)));
  v.pixels = size_or(j, path, "pixels", v.pixels);
  v.features = size_or(j, path, "features", v.features);
  v.classes = size_or(j, path, "classes", v.classes);
  v.reduction_instances = size_or(j, path, "reduction_instances", v.reduction_instances);
  v.reduction_tol = num_or(j, path, "reduction_tol", v.reduction_tol);
  v.bound_instances = size_or(j, path, "bound_instances", v.bound_instances);
  v.mc_samples = int_or(j, path, "mc_samples", v.mc_samples);
  v.lambdas = num_list_or(j, path, "lambdas", v.lambdas);
  v.taus = num_list_or(j, path, "taus", v.taus);
  if (auto it = j.find("modes"); it != j.end()) {
    require(it->is_array(), "invalid-config", join_path(path, "modes") + " must be an array");
    v.modes.clear();
    for (const auto& e : *it) {
      require(e.is_string(), "invalid-config",
              join_path(path, "modes") + " entries must be strings");
      v.modes.push_back(parse_diagonal_mode(e.get<std::string>()));
    }
  }
  v.denominator =
      parse_denominator(str_or(j, path, "denominator", denominator_name(v.denominator)));
  v.grad_instances = size_or(j, path, "grad_instances", v.grad_instances);
  v.grad_step = num_or(j, path, "grad_step", v.grad_step);
  v.grad_tol = num_or(j, path, "grad_tol", v.grad_tol);
  v.mgf_instances = size_or(j, path, "mgf_instances", v.mgf_instances);
  v.mgf_samples = int_or(j, path, "mgf_samples", v.mgf_samples);
  return v;
}

}  // namespace cfg_detail

inline FullConfig parse_config(const nlohmann::json& j) {
  using namespace cfg_detail;
  check_keys(j, "",
             {"task", "teacher", "student", "teacher_train", "distill_train",
              "init_head_from_teacher", "diagonal_covariance", "lambda_schedule", "variants",
              "seeds", "out_dir", "jobs", "timing", "verification"});
  FullConfig full;
  ExperimentConfig& e = full.experiment;
  if (auto it = j.find("task"); it != j.end()) e.task = parse_task(*it, "task");
  if (auto it = j.find("teacher"); it != j.end()) e.teacher = parse_model(*it, "teacher", e.teacher);
  if (auto it = j.find("student"); it != j.end()) e.student = parse_model(*it, "student", e.student);
  if (auto it = j.find("teacher_train"); it != j.end())
    e.teacher_train = parse_train(*it, "teacher_train", e.teacher_train);
  if (auto it = j.find("distill_train"); it != j.end())
    e.distill_train = parse_train(*it, "distill_train", e.distill_train);
  e.init_head_from_teacher = bool_or(j, "", "init_head_from_teacher", e.init_head_from_teacher);
  e.diagonal_covariance = bool_or(j, "", "diagonal_covariance", e.diagonal_covariance);
  const std::string sched = str_or(j, "", "lambda_schedule", "cosine");
  if (sched == "cosine")
    e.schedule_kind = ScheduleKind::cosine;
  else if (sched == "linear")
    e.schedule_kind = ScheduleKind::linear;
  else
    fail("invalid-config", "lambda_schedule must be cosine or linear; got '" + sched + "'");

  if (auto it = j.find("variants"); it != j.end()) {
    require(it->is_array(), "invalid-config", "variants must be an array");
    e.variants.clear();
    for (std::size_t i = 0; i < it->size(); ++i)
      e.variants.push_back(parse_variant((*it)[i], "variants[" + std::to_string(i) + "]"));
  }
  if (auto it = j.find("seeds"); it != j.end()) {
    require(it->is_array(), "invalid-config", "seeds must be an array");
    e.seeds.clear();
    for (const auto& s : *it) {
      require(s.is_number_integer() && s.get<std::int64_t>() >= 0, "invalid-config",
              "seeds entries must be nonnegative integers");
      e.seeds.push_back(s.get<std::uint64_t>());
    }
  }
  e.out_dir = str_or(j, "", "out_dir", e.out_dir);
  e.jobs = int(int_or(j, "", "jobs", e.jobs));
  const std::string timing = str_or(j, "", "timing", "none");
  if (timing == "none")
    e.timing_wall = false;
  else if (timing == "wall")
    e.timing_wall = true;
  else
    fail("invalid-config", "timing must be none or wall; got '" + timing + "'");

  if (auto it = j.find("verification"); it != j.end())
    full.verify = parse_verify(*it, "verification");
  return full;
}

inline FullConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(bool(in), "invalid-config", "cannot open config file '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    fail("invalid-config", "config parse error in '" + path + "': " + e.what());
  }
  return parse_config(j);
}

}  // namespace fakd

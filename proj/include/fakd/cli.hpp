#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fakd/config.hpp"
#include "fakd/harness.hpp"
#include "fakd/oracle.hpp"

namespace fakd {
namespace cli_detail {

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), "invalid-config", "cannot write output file '" + path + "'");
  out << content;
}

// Reduction identities, bound campaign, MGF spot checks, gradient checks.
// Returns 0 when every check holds; prints a reproduction line per failure.
inline int cmd_verify(const FullConfig& cfg, const std::string& out_dir, bool dry_run) {
  const VerifyConfig& v = cfg.verify;
  if (dry_run) {
    std::printf("verify plan: %zu reduction instances, %zu bound instances per variant, "
                "%zu mgf instances (n=%lld), %zu gradient instances per loss\n",
                v.reduction_instances, v.bound_instances, v.mgf_instances,
                static_cast<long long>(v.mgf_samples), v.grad_instances);
    return 0;
  }
  std::filesystem::create_directories(out_dir);
  bool all_ok = true;

  // 1) lambda = 0 reduction identities.
  {
    std::size_t failed = 0;
    for (std::size_t i = 0; i < v.reduction_instances; ++i) {
      const std::string tag = "reduce-" + std::to_string(i);
      Rng rng(derive_seed(v.seed, tag));
      const LossInstance inst = random_instance(v.pixels, v.features, v.classes, rng);
      const double pd = pd_loss(inst.student, inst.teacher, inst.head).value;
      const double apd =
          aug_pd_loss(inst.student, inst.teacher, inst.head, inst.covs, 0.0).value;
      if (std::abs(apd - pd) > v.reduction_tol * (1.0 + std::abs(pd))) {
        ++failed;
        std::printf("FAIL reduction AUG_PD instance=%s pd=%.17g aug=%.17g\n", tag.c_str(), pd,
                    apd);
      }
      for (double tau : v.taus) {
        const double cwd = cwd_loss(inst.student, inst.teacher, inst.head, tau).value;
        for (DiagonalMode mode : v.modes) {
          const double acwd = aug_cwd_loss(inst.student, inst.teacher, inst.head, inst.covs,
                                           0.0, tau, mode, v.denominator)
                                  .value;
          if (std::abs(acwd - cwd) > v.reduction_tol * (1.0 + std::abs(cwd))) {
            ++failed;
            std::printf("FAIL reduction AUG_CWD instance=%s tau=%g mode=%s cwd=%.17g aug=%.17g\n",
                        tag.c_str(), tau, diagonal_mode_name(mode), cwd, acwd);
          }
        }
      }
    }
    std::printf("reduction identities: %zu instances, %zu failures\n", v.reduction_instances,
                failed);
    all_ok = all_ok && failed == 0;
  }

  // 2) upper-bound campaign; Monte Carlo shared between diagonal modes.
  {
    std::size_t failed = 0, rows = 0;
    std::string csv = bound_csv_header() + '\n';
    for (LossVariant variant : {LossVariant::AUG_PD, LossVariant::AUG_CWD}) {
      const bool cwd = variant == LossVariant::AUG_CWD;
      for (std::size_t i = 0; i < v.bound_instances; ++i) {
        const std::string tag =
            std::string("bound-") + variant_name(variant) + "-" + std::to_string(i);
        const std::uint64_t inst_seed = derive_seed(v.seed, tag);
        Rng inst_rng(inst_seed);
        const LossInstance inst = random_instance(v.pixels, v.features, v.classes, inst_rng);
        for (std::size_t li = 0; li < v.lambdas.size(); ++li) {
          const double lambda = v.lambdas[li];
          const std::size_t tau_count = cwd ? v.taus.size() : 1;
          for (std::size_t ti = 0; ti < tau_count; ++ti) {
            const double tau = cwd ? v.taus[ti] : 1.0;
            Rng mc_rng(derive_seed(inst_seed, "mc-" + std::to_string(li) + "-" +
                                                  std::to_string(ti)));
            const McEstimate mc =
                mc_loss_estimate(variant, inst.student, inst.teacher, inst.head, inst.covs,
                                 lambda, tau, v.mc_samples, mc_rng);
            const std::size_t mode_count = cwd ? v.modes.size() : 1;
            for (std::size_t mi = 0; mi < mode_count; ++mi) {
              const DiagonalMode mode = cwd ? v.modes[mi] : DiagonalMode::paper_form;
              BoundReport rep;
              rep.closed_form =
                  cwd ? aug_cwd_loss(inst.student, inst.teacher, inst.head, inst.covs, lambda,
                                     tau, mode, v.denominator)
                            .value
                      : aug_pd_loss(inst.student, inst.teacher, inst.head, inst.covs, lambda)
                            .value;
              rep.mc = mc;
              rep.margin = rep.closed_form - mc.mean;
              rep.holds = rep.margin >= -3.0 * mc.std_error;
              csv += bound_csv_row(variant, inst_seed, v.pixels, v.features, v.classes, lambda,
                                   tau, mode, rep) +
                     '\n';
              ++rows;
              if (!rep.holds) {
                ++failed;
                std::printf(
                    "FAIL bound %s instance=%s lambda=%g tau=%g mode=%s closed=%.12g "
                    "mc=%.12g stderr=%.3g margin=%.12g\n",
                    variant_name(variant), tag.c_str(), lambda, tau, diagonal_mode_name(mode),
                    rep.closed_form, mc.mean, mc.std_error, rep.margin);
              }
            }
          }
        }
      }
    }
    const std::string csv_path = out_dir + "/bounds.csv";
    write_text_file(csv_path, csv);
    std::printf("upper bounds: %zu checks, %zu violations (%s)\n", rows, failed,
                csv_path.c_str());
    all_ok = all_ok && failed == 0;
  }

  // 3) MGF identity spot checks plus the two degenerate exact cases.
  {
    std::size_t failed = 0;
    const std::size_t d = v.features;
    for (std::size_t i = 0; i < v.mgf_instances; ++i) {
      const std::string tag = "mgf-" + std::to_string(i);
      Rng rng(derive_seed(v.seed, tag));
      Vec a(d), mu(d);
      rng.fill_normal(a);
      rng.fill_normal(mu);
      for (auto& x : a) x *= 0.5;
      Mat g(d, d);
      rng.fill_normal(g.data());
      Mat cov = matmul_nt(g, g);
      for (auto& x : cov.data()) x /= double(d);
      Rng mc_rng(derive_seed(v.seed, tag + "-mc"));
      const MgfResult res = mgf_expectation(a, mu, cov, v.mgf_samples, mc_rng);
      if (std::abs(res.closed_form - res.mc.mean) > 3.0 * res.mc.std_error) {
        ++failed;
        std::printf("FAIL mgf instance=%s closed=%.12g mc=%.12g stderr=%.3g\n", tag.c_str(),
                    res.closed_form, res.mc.mean, res.mc.std_error);
      }
    }
    {
      Rng rng(derive_seed(v.seed, "mgf-degenerate"));
      Vec a(d), mu(d);
      rng.fill_normal(a);
      rng.fill_normal(mu);
      Rng mc1(derive_seed(v.seed, "mgf-degenerate-1"));
      const MgfResult zero_cov = mgf_expectation(a, mu, Mat(d, d), 100, mc1);
      const double expected = std::exp(dot(a, std::span<const double>(mu)));
      if (zero_cov.mc.mean != expected || zero_cov.mc.std_error != 0.0) {
        ++failed;
        std::printf("FAIL mgf zero-covariance exactness\n");
      }
      Vec zero(d, 0.0);
      Mat cov(d, d);
      for (std::size_t k = 0; k < d; ++k) cov(k, k) = 1.0;
      Rng mc2(derive_seed(v.seed, "mgf-degenerate-2"));
      const MgfResult zero_a = mgf_expectation(zero, mu, cov, 100, mc2);
      if (zero_a.closed_form != 1.0 || zero_a.mc.mean != 1.0) {
        ++failed;
        std::printf("FAIL mgf zero-vector exactness\n");
      }
    }
    std::printf("mgf identity: %zu instances, %zu failures\n", v.mgf_instances + 2, failed);
    all_ok = all_ok && failed == 0;
  }

  // 4) finite-difference gradient checks on all four losses.
  {
    std::size_t failed = 0, checks = 0;
    const double lambda = 0.7;
    const double tau = 2.0;
    for (std::size_t i = 0; i < v.grad_instances; ++i) {
      const std::string tag = "grad-" + std::to_string(i);
      Rng rng(derive_seed(v.seed, tag));
      const LossInstance inst = random_instance(v.pixels, v.features, v.classes, rng);
      struct Case {
        const char* name;
        DistillLossSpec spec;
      };
      const Case cases[] = {
          {"pd", {LossVariant::PD, 1.0, 0.0, DiagonalMode::paper_form, v.denominator}},
          {"cwd", {LossVariant::CWD, tau, 0.0, DiagonalMode::paper_form, v.denominator}},
          {"aug_pd", {LossVariant::AUG_PD, 1.0, lambda, DiagonalMode::paper_form, v.denominator}},
          {"aug_cwd_paper",
           {LossVariant::AUG_CWD, tau, lambda, DiagonalMode::paper_form, v.denominator}},
          {"aug_cwd_exact",
           {LossVariant::AUG_CWD, tau, lambda, DiagonalMode::exact_diagonal, v.denominator}},
      };
      for (const auto& c : cases) {
        ++checks;
        const double err = finite_diff_grad_check(c.spec, inst, v.grad_step);
        if (!(err <= v.grad_tol)) {
          ++failed;
          std::printf("FAIL gradient %s instance=%s max_rel_error=%.3g\n", c.name, tag.c_str(),
                      err);
        }
      }
    }
    std::printf("gradients: %zu checks, %zu failures\n", checks, failed);
    all_ok = all_ok && failed == 0;
  }

  std::printf("verify: %s\n", all_ok ? "all checks passed" : "FAILURES detected");
  return all_ok ? 0 : 1;
}

inline int cmd_distill(const ExperimentConfig& cfg, const std::string& out_dir, bool dry_run) {
  validate_experiment(cfg);
  if (dry_run) {
    std::printf("distill plan: task=%s, %zu seeds x %zu variants, %lld steps each, out=%s\n",
                cfg.task.task_id.c_str(), cfg.seeds.size(), cfg.variants.size(),
                static_cast<long long>(cfg.distill_train.steps), out_dir.c_str());
    for (const auto& vs : cfg.variants)
      std::printf("  variant %-12s weight=%g lambda0=%g tau=%g\n", vs.label.c_str(), vs.weight,
                  vs.lambda0, vs.tau);
    return 0;
  }
  std::filesystem::create_directories(out_dir);
  const std::vector<ExperimentRow> rows = run_experiment(cfg);
  write_text_file(out_dir + "/results.csv", results_csv(rows));
  const std::string summary = render_variant_summary(rows);
  std::fputs(summary.c_str(), stdout);
  std::printf("wrote %s/results.csv (%zu rows)\n", out_dir.c_str(), rows.size());
  return 0;
}

inline std::vector<double> parse_value_list(const std::string& values) {
  std::vector<double> out;
  std::stringstream ss(values);
  std::string part;
  while (std::getline(ss, part, ',')) {
    if (part.empty()) continue;
    try {
      std::size_t used = 0;
      const double v = std::stod(part, &used);
      require(used == part.size(), "invalid-config", "bad sweep value '" + part + "'");
      out.push_back(v);
    } catch (const Error&) {
      throw;
    } catch (const std::exception&) {
      fail("invalid-config", "bad sweep value '" + part + "'");
    }
  }
  require(!out.empty(), "invalid-config", "sweep needs a nonempty value list");
  return out;
}

inline int cmd_sweep(const ExperimentConfig& cfg, const std::string& out_dir,
                     const std::string& param, const std::string& values, bool dry_run) {
  const SweepParam p = parse_sweep_param(param);
  const std::vector<double> vals = parse_value_list(values);
  validate_experiment(cfg);
  if (dry_run) {
    std::printf("sweep plan: %s over %zu values, %zu seeds x %zu variants each, out=%s\n",
                sweep_param_name(p), vals.size(), cfg.seeds.size(), cfg.variants.size(),
                out_dir.c_str());
    return 0;
  }
  std::filesystem::create_directories(out_dir);
  std::vector<ExperimentRow> all_rows;
  std::string report;
  for (double value : vals) {
    const ExperimentConfig sub = apply_sweep_value(cfg, p, value);
    const std::vector<ExperimentRow> rows = run_experiment(sub);
    report += "== " + std::string(sweep_param_name(p)) + " = " + format_short(value) + " ==\n";
    report += render_variant_summary(rows);
    bool has_baseline = false;
    for (const auto& r : rows) has_baseline = has_baseline || r.variant == "no-distill";
    if (has_baseline) {
      report += render_improvement_report(per_class_improvement_report(rows));
    } else {
      report += "(no no-distill baseline in config; per-class report skipped)\n";
    }
    report += '\n';
    for (const auto& r : rows) all_rows.push_back(r);
  }
  write_text_file(out_dir + "/sweep_results.csv", results_csv(all_rows));
  write_text_file(out_dir + "/report.txt", report);
  std::fputs(report.c_str(), stdout);
  std::printf("wrote %s/sweep_results.csv (%zu rows) and %s/report.txt\n", out_dir.c_str(),
              all_rows.size(), out_dir.c_str());
  return 0;
}

inline int cmd_report(const std::string& out_dir) {
  const std::string csv_path = out_dir + "/results.csv";
  std::ifstream in(csv_path);
  require(bool(in), "invalid-config", "cannot open results file '" + csv_path + "'");
  const std::vector<ExperimentRow> rows = parse_results_csv(in);
  std::string report = render_variant_summary(rows);
  bool has_baseline = false;
  for (const auto& r : rows) has_baseline = has_baseline || r.variant == "no-distill";
  if (has_baseline)
    report += render_improvement_report(per_class_improvement_report(rows));
  else
    report += "(no no-distill baseline rows; per-class report skipped)\n";
  write_text_file(out_dir + "/report.txt", report);
  std::fputs(report.c_str(), stdout);
  return 0;
}

}  // namespace cli_detail

// Exit codes: 0 success, 1 failed check or failed run, 2 usage/config error.
inline int run_cli(int argc, const char* const* argv) {
  CLI::App app{"closed-form feature-augmented distillation: verification and experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_override;
  std::string sweep_param = "lambda0";
  std::string sweep_values;
  bool dry_run = false;
  int jobs_override = 0;
  std::int64_t seed_override = -1;

  CLI::App* verify = app.add_subcommand("verify", "run the bound/gradient/reduction campaign");
  CLI::App* distill = app.add_subcommand("distill", "train and evaluate all variants");
  CLI::App* sweep = app.add_subcommand("sweep", "repeat the experiment over a parameter grid");
  CLI::App* report = app.add_subcommand("report", "summarize an existing results CSV");
  for (CLI::App* sub : {verify, distill, sweep, report}) {
    sub->add_option("--config", config_path, "config file (JSON)")->required();
    sub->add_option("--out", out_override, "output directory (overrides config out_dir)");
  }
  for (CLI::App* sub : {verify, distill, sweep}) {
    sub->add_flag("--dry-run", dry_run, "validate and print the plan; do no work");
  }
  for (CLI::App* sub : {distill, sweep}) {
    sub->add_option("--jobs", jobs_override, "parallel seed workers (overrides config)");
    sub->add_option("--seed-override", seed_override, "replace the config seed list");
  }
  sweep->add_option("--param", sweep_param, "swept parameter: lambda0, tau, or weight");
  sweep->add_option("--values", sweep_values, "comma-separated sweep values")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  FullConfig cfg;
  try {
    cfg = load_config(config_path);
    if (jobs_override > 0) cfg.experiment.jobs = jobs_override;
    if (seed_override >= 0) cfg.experiment.seeds = {std::uint64_t(seed_override)};
  } catch (const Error& e) {
    std::fprintf(stderr, "config error [%s]: %s\n", e.code().c_str(), e.what());
    return 2;
  }
  const std::string out_dir =
      out_override.empty() ? cfg.experiment.out_dir : out_override;

  try {
    if (*verify) return cli_detail::cmd_verify(cfg, out_dir, dry_run);
    if (*distill) return cli_detail::cmd_distill(cfg.experiment, out_dir, dry_run);
    if (*sweep)
      return cli_detail::cmd_sweep(cfg.experiment, out_dir, sweep_param, sweep_values, dry_run);
    return cli_detail::cmd_report(out_dir);
  } catch (const Error& e) {
    std::fprintf(stderr, "error [%s]: %s\n", e.code().c_str(), e.what());
    return (e.code() == "invalid-config" || e.code() == "invalid-task-spec") ? 2 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace fakd

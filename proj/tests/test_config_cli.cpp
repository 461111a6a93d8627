#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fakd/cli.hpp"
#include "fakd/config.hpp"
#include "reference_config.hpp"
#include "test_support.hpp"

using namespace fakd;
namespace fs = std::filesystem;

namespace {

int call_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "fakd");
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(int(argv.size()), argv.data());
}

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fakd-cli-tests" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  REQUIRE(bool(out));
  out << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(bool(in));
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text;
}

// Small but complete experiment: 3 classes, linear student, short runs.
const char* kTinyExperiment = R"({
  "task": {"task_id": "cli-tiny", "classes": 3, "input_dim": 4, "image_side": 6,
           "separation": 3.0, "noise": 0.6, "imbalance": 0.8,
           "train_images": 10, "val_images": 4},
  "teacher": {"extractor": "mlp", "hidden_dim": 16, "feature_dim": 4},
  "student": {"extractor": "linear", "feature_dim": 4},
  "teacher_train": {"steps": 80, "base_lr": 0.05},
  "distill_train": {"steps": 25, "base_lr": 0.04},
  "variants": [
    {"variant": "no-distill"},
    {"variant": "PD", "weight": 0.5},
    {"variant": "AUG_CWD", "weight": 0.25, "lambda0": 1.0, "tau": 4.0}
  ],
  "seeds": [1, 2]
})";

std::size_t count_lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("empty config yields the documented defaults") {
  const FullConfig cfg = parse_config(nlohmann::json::object());
  CHECK(cfg.experiment.task.task_id == "ref");
  CHECK(cfg.experiment.task.classes == 6);
  CHECK(cfg.experiment.task.input_dim == 8);
  CHECK(cfg.experiment.task.image_side == 16);
  CHECK(cfg.experiment.teacher.extractor == ExtractorKind::mlp);
  CHECK(cfg.experiment.student.extractor == ExtractorKind::linear);
  CHECK(cfg.experiment.init_head_from_teacher);
  CHECK_FALSE(cfg.experiment.diagonal_covariance);
  CHECK(cfg.experiment.schedule_kind == ScheduleKind::cosine);
  CHECK(cfg.experiment.seeds == std::vector<std::uint64_t>{1});
  CHECK(cfg.experiment.jobs == 1);
  CHECK_FALSE(cfg.experiment.timing_wall);
  CHECK(cfg.verify.seed == 90210);
  CHECK(cfg.verify.reduction_instances == 120);
  CHECK(cfg.verify.bound_instances == 50);
  CHECK(cfg.verify.lambdas == std::vector<double>{0.25, 1.0});
  CHECK(cfg.verify.taus == std::vector<double>{1.0, 4.0});
  CHECK(cfg.verify.modes.size() == 2);
  CHECK(cfg.verify.denominator == VarianceDenominator::tau_squared);
}

TEST_CASE("variant defaults follow the loss family") {
  const auto parse_variants = [](const char* text) {
    return parse_config(nlohmann::json::parse(text)).experiment.variants;
  };

  const auto cwd = parse_variants(R"({"variants": [{"variant": "CWD"}]})");
  REQUIRE(cwd.size() == 1);
  CHECK(cwd[0].label == "CWD");
  CHECK(cwd[0].weight == 3.0);
  CHECK(cwd[0].tau == 4.0);
  CHECK(cwd[0].lambda0 == 0.0);
  CHECK_FALSE(cwd[0].no_distill);

  const auto pd = parse_variants(R"({"variants": [{"variant": "PD"}]})");
  CHECK(pd[0].weight == 1.0);
  CHECK(pd[0].tau == 1.0);

  const auto apd = parse_variants(R"({"variants": [{"variant": "AUG_PD"}]})");
  CHECK(apd[0].weight == 1.0);
  CHECK(apd[0].lambda0 == 1.0);

  const auto acwd = parse_variants(R"({"variants": [{"variant": "AUG_CWD"}]})");
  CHECK(acwd[0].weight == 3.0);
  CHECK(acwd[0].tau == 4.0);
  CHECK(acwd[0].lambda0 == 1.0);
  CHECK(acwd[0].diagonal_mode == DiagonalMode::paper_form);
  CHECK(acwd[0].variance_denominator == VarianceDenominator::tau_squared);

  const auto none = parse_variants(R"({"variants": [{"variant": "no-distill"}]})");
  CHECK(none[0].no_distill);
  CHECK(none[0].weight == 0.0);
  CHECK(none[0].label == "no-distill");

  const auto labeled = parse_variants(
      R"({"variants": [{"variant": "AUG_CWD", "label": "acwd-exact",
          "diagonal_mode": "exact_diagonal", "variance_denominator": "tau"}]})");
  CHECK(labeled[0].label == "acwd-exact");
  CHECK(labeled[0].diagonal_mode == DiagonalMode::exact_diagonal);
  CHECK(labeled[0].variance_denominator == VarianceDenominator::tau);
}

TEST_CASE("unknown config keys are rejected with their path") {
  try {
    parse_config(nlohmann::json::parse(R"({"task": {"classes": 3, "bogus": 1}})"));
    FAIL("expected invalid-config");
  } catch (const Error& e) {
    CHECK(e.code() == "invalid-config");
    CHECK(std::string(e.what()).find("task.bogus") != std::string::npos);
  }
  try {
    parse_config(nlohmann::json::parse(R"({"variants": [{"variant": "PD", "alpha": 2}]})"));
    FAIL("expected invalid-config");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("variants[0].alpha") != std::string::npos);
  }
  CHECK_THROWS_MATCHES(parse_config(nlohmann::json::parse(R"({"seedz": [1]})")), Error,
                       ErrorCodeIs("invalid-config"));
}

TEST_CASE("config type and value errors carry the invalid-config code") {
  const char* bad[] = {
      R"({"task": {"classes": "three"}})",
      R"({"seeds": [1.5]})",
      R"({"seeds": "1"})",
      R"({"lambda_schedule": "exponential"})",
      R"({"timing": "cpu"})",
      R"({"variants": [{"label": "x"}]})",
      R"({"variants": [{"variant": "AUGPD"}]})",
      R"({"verification": {"modes": ["diag"]}})",
      R"({"verification": {"denominator": "t"}})",
  };
  for (const char* text : bad)
    CHECK_THROWS_MATCHES(parse_config(nlohmann::json::parse(text)), Error,
                         ErrorCodeIs("invalid-config"));
}

TEST_CASE("config files that do not parse are invalid-config") {
  const fs::path dir = fresh_dir("badfile");
  CHECK_THROWS_MATCHES(load_config((dir / "missing.json").string()), Error,
                       ErrorCodeIs("invalid-config"));
  write_file(dir / "broken.json", "{ not json");
  CHECK_THROWS_MATCHES(load_config((dir / "broken.json").string()), Error,
                       ErrorCodeIs("invalid-config"));
}

TEST_CASE("cli usage errors exit with code 2") {
  CHECK(call_cli({}) == 2);                                  // subcommand required
  CHECK(call_cli({"verify"}) == 2);                          // --config required
  CHECK(call_cli({"frobnicate", "--config", "x"}) == 2);     // unknown subcommand
  CHECK(call_cli({"verify", "--config", "x", "--nope"}) == 2);
  CHECK(call_cli({"--help"}) == 0);

  const fs::path dir = fresh_dir("usage");
  write_file(dir / "broken.json", "]");
  CHECK(call_cli({"verify", "--config", (dir / "broken.json").string()}) == 2);
  CHECK(call_cli({"distill", "--config", (dir / "nothere.json").string()}) == 2);

  // Structurally valid JSON but no variants: rejected before any work runs.
  write_file(dir / "novariants.json", R"({"task": {"classes": 3}})");
  CHECK(call_cli({"distill", "--config", (dir / "novariants.json").string(),
                  "--out", (dir / "out").string()}) == 2);
}

TEST_CASE("cli dry runs validate without producing output") {
  const fs::path dir = fresh_dir("dryrun");
  write_file(dir / "cfg.json", kTinyExperiment);
  const std::string cfg = (dir / "cfg.json").string();
  const std::string out = (dir / "out").string();
  CHECK(call_cli({"verify", "--config", cfg, "--out", out, "--dry-run"}) == 0);
  CHECK(call_cli({"distill", "--config", cfg, "--out", out, "--dry-run"}) == 0);
  CHECK(call_cli({"sweep", "--config", cfg, "--out", out, "--values", "0.5,1.0",
                  "--dry-run"}) == 0);
  CHECK_FALSE(fs::exists(dir / "out" / "results.csv"));
}

TEST_CASE("cli distill writes one row per seed and variant and reruns identically") {
  const fs::path dir = fresh_dir("distill");
  write_file(dir / "cfg.json", kTinyExperiment);
  const std::string cfg = (dir / "cfg.json").string();
  const std::string out = (dir / "out").string();

  REQUIRE(call_cli({"distill", "--config", cfg, "--out", out}) == 0);
  const std::string first = read_file(dir / "out" / "results.csv");
  CHECK(count_lines(first) == 1 + 2 * 3);  // header + seeds x variants

  // Canonical ordering: seed-major, config variant order inside each seed.
  std::istringstream is(first);
  const auto rows = parse_results_csv(is);
  REQUIRE(rows.size() == 6);
  const char* expect[] = {"no-distill", "PD", "AUG_CWD", "no-distill", "PD", "AUG_CWD"};
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(rows[i].variant == expect[i]);
    CHECK(rows[i].seed == (i < 3 ? 1u : 2u));
    CHECK(rows[i].task_id == "cli-tiny");
  }

  REQUIRE(call_cli({"distill", "--config", cfg, "--out", out}) == 0);
  CHECK(read_file(dir / "out" / "results.csv") == first);

  // Parallel seeds change nothing about the bytes.
  REQUIRE(call_cli({"distill", "--config", cfg, "--out", out, "--jobs", "2"}) == 0);
  CHECK(read_file(dir / "out" / "results.csv") == first);

  // Report over the written CSV summarizes every variant.
  REQUIRE(call_cli({"report", "--config", cfg, "--out", out}) == 0);
  const std::string report = read_file(dir / "out" / "report.txt");
  CHECK(report.find("no-distill") != std::string::npos);
  CHECK(report.find("AUG_CWD") != std::string::npos);
  CHECK(report.find("d(PD)") != std::string::npos);
}

TEST_CASE("cli seed override replaces the config seed list") {
  const fs::path dir = fresh_dir("seedover");
  write_file(dir / "cfg.json", kTinyExperiment);
  const std::string out = (dir / "out").string();
  REQUIRE(call_cli({"distill", "--config", (dir / "cfg.json").string(), "--out", out,
                    "--seed-override", "9"}) == 0);
  std::istringstream is(read_file(dir / "out" / "results.csv"));
  const auto rows = parse_results_csv(is);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) CHECK(r.seed == 9);
}

TEST_CASE("cli sweep emits one block per value plus merged csv") {
  const fs::path dir = fresh_dir("sweep");
  write_file(dir / "cfg.json", kTinyExperiment);
  const std::string cfg = (dir / "cfg.json").string();
  const std::string out = (dir / "out").string();

  CHECK(call_cli({"sweep", "--config", cfg, "--out", out, "--values", ""}) == 2);
  CHECK(call_cli({"sweep", "--config", cfg, "--out", out, "--values", "0.5,abc"}) == 2);
  CHECK(call_cli({"sweep", "--config", cfg, "--out", out, "--param", "alpha",
                  "--values", "1"}) == 2);

  REQUIRE(call_cli({"sweep", "--config", cfg, "--out", out, "--param", "lambda0",
                    "--values", "0.5,1.5"}) == 0);
  const std::string report = read_file(dir / "out" / "report.txt");
  CHECK(report.find("== lambda0 = 0.5 ==") != std::string::npos);
  CHECK(report.find("== lambda0 = 1.5 ==") != std::string::npos);

  std::istringstream is(read_file(dir / "out" / "sweep_results.csv"));
  const auto rows = parse_results_csv(is);
  CHECK(rows.size() == 2 * 2 * 3);  // values x seeds x variants
  std::size_t tagged = 0;
  for (const auto& r : rows)
    if (r.task_id == "cli-tiny/lambda0=1.5") ++tagged;
  CHECK(tagged == 6);
}

TEST_CASE("cli verify passes on a small sound campaign") {
  const fs::path dir = fresh_dir("verify-ok");
  write_file(dir / "cfg.json", R"({
    "verification": {
      "pixels": 6, "features": 4, "classes": 3,
      "reduction_instances": 8,
      "bound_instances": 3, "mc_samples": 2000,
      "grad_instances": 2,
      "mgf_instances": 2, "mgf_samples": 20000
    }
  })");
  const std::string out = (dir / "out").string();
  CHECK(call_cli({"verify", "--config", (dir / "cfg.json").string(), "--out", out}) == 0);
  const std::string bounds = read_file(dir / "out" / "bounds.csv");
  CHECK(bounds.rfind("variant,seed,M,A,C,lambda,tau,mode,", 0) == 0);
  // AUG_PD: 3 instances x 2 lambdas. AUG_CWD: 3 x 2 x 2 taus x 2 modes.
  CHECK(count_lines(bounds) == 1 + 6 + 24);
}

TEST_CASE("cli verify flags the loosened variance denominator") {
  // Dividing the variance exponent by 2*tau instead of 2*tau^2 understates it
  // for tau < 1; at tau = 0.1 the Monte Carlo mean overtakes the claimed
  // bound on a large fraction of instances.
  const fs::path dir = fresh_dir("verify-loose");
  write_file(dir / "cfg.json", R"({
    "verification": {
      "denominator": "tau",
      "taus": [0.1],
      "lambdas": [0.1, 0.25],
      "bound_instances": 10, "mc_samples": 20000,
      "reduction_instances": 4,
      "grad_instances": 1,
      "mgf_instances": 1, "mgf_samples": 10000
    }
  })");
  const std::string out = (dir / "out").string();
  CHECK(call_cli({"verify", "--config", (dir / "cfg.json").string(), "--out", out}) == 1);
  const std::string bounds = read_file(dir / "out" / "bounds.csv");
  CHECK(bounds.find(",false\n") != std::string::npos);  // at least one violated row
}

TEST_CASE("shipped reference config matches the built-in reference experiment") {
  const FullConfig full = load_config(std::string(FAKD_CONFIGS_DIR) + "/reference.json");
  const ExperimentConfig& got = full.experiment;
  const ExperimentConfig want = reference_config();

  CHECK(got.task.task_id == want.task.task_id);
  CHECK(got.task.classes == want.task.classes);
  CHECK(got.task.input_dim == want.task.input_dim);
  CHECK(got.task.image_side == want.task.image_side);
  CHECK(got.task.separation == want.task.separation);
  CHECK(got.task.noise == want.task.noise);
  CHECK(got.task.imbalance == want.task.imbalance);
  CHECK(got.task.train_images == want.task.train_images);
  CHECK(got.task.val_images == want.task.val_images);

  CHECK(got.teacher.extractor == want.teacher.extractor);
  CHECK(got.teacher.hidden_dim == want.teacher.hidden_dim);
  CHECK(got.teacher.feature_dim == want.teacher.feature_dim);
  CHECK(got.student.extractor == want.student.extractor);
  CHECK(got.student.hidden_dim == want.student.hidden_dim);
  CHECK(got.student.feature_dim == want.student.feature_dim);

  CHECK(got.teacher_train.steps == want.teacher_train.steps);
  CHECK(got.teacher_train.base_lr == want.teacher_train.base_lr);
  CHECK(got.teacher_train.momentum == want.teacher_train.momentum);
  CHECK(got.teacher_train.poly_power == want.teacher_train.poly_power);
  CHECK(got.teacher_train.batch_images == want.teacher_train.batch_images);
  CHECK(got.distill_train.steps == want.distill_train.steps);
  CHECK(got.distill_train.base_lr == want.distill_train.base_lr);
  CHECK(got.distill_train.momentum == want.distill_train.momentum);
  CHECK(got.distill_train.poly_power == want.distill_train.poly_power);
  CHECK(got.distill_train.batch_images == want.distill_train.batch_images);

  CHECK(got.init_head_from_teacher == want.init_head_from_teacher);
  CHECK(got.diagonal_covariance == want.diagonal_covariance);
  CHECK(got.schedule_kind == want.schedule_kind);
  CHECK(got.seeds == want.seeds);

  REQUIRE(got.variants.size() == want.variants.size());
  for (std::size_t i = 0; i < want.variants.size(); ++i) {
    const VariantSpec& g = got.variants[i];
    const VariantSpec& w = want.variants[i];
    INFO("variant " << i << " (" << w.label << ")");
    CHECK(g.label == w.label);
    CHECK(g.no_distill == w.no_distill);
    if (!w.no_distill) CHECK(g.variant == w.variant);
    CHECK(g.weight == w.weight);
    CHECK(g.lambda0 == w.lambda0);
    CHECK(g.tau == w.tau);
    CHECK(g.diagonal_mode == w.diagonal_mode);
    CHECK(g.variance_denominator == w.variance_denominator);
  }
}

TEST_CASE("every shipped config parses") {
  const std::string dir = FAKD_CONFIGS_DIR;

  const FullConfig smoke = load_config(dir + "/smoke.json");
  CHECK(smoke.experiment.variants.size() == 5);
  CHECK(smoke.experiment.task.task_id == "smoke");

  const FullConfig sweep = load_config(dir + "/sweep.json");
  REQUIRE(sweep.experiment.variants.size() == 2);
  CHECK(sweep.experiment.variants[0].variant == LossVariant::AUG_PD);
  CHECK(sweep.experiment.variants[1].variant == LossVariant::AUG_CWD);

  // verify-default.json spells out the built-in campaign defaults.
  const VerifyConfig dflt;
  const VerifyConfig v = load_config(dir + "/verify-default.json").verify;
  CHECK(v.seed == dflt.seed);
  CHECK(v.pixels == dflt.pixels);
  CHECK(v.features == dflt.features);
  CHECK(v.classes == dflt.classes);
  CHECK(v.reduction_instances == dflt.reduction_instances);
  CHECK(v.reduction_tol == dflt.reduction_tol);
  CHECK(v.bound_instances == dflt.bound_instances);
  CHECK(v.mc_samples == dflt.mc_samples);
  CHECK(v.lambdas == dflt.lambdas);
  CHECK(v.taus == dflt.taus);
  CHECK(v.modes == dflt.modes);
  CHECK(v.denominator == dflt.denominator);
  CHECK(v.grad_instances == dflt.grad_instances);
  CHECK(v.grad_step == dflt.grad_step);
  CHECK(v.grad_tol == dflt.grad_tol);
  CHECK(v.mgf_instances == dflt.mgf_instances);
  CHECK(v.mgf_samples == dflt.mgf_samples);

  const VerifyConfig loose = load_config(dir + "/loosened-bound.json").verify;
  CHECK(loose.denominator == VarianceDenominator::tau);
  CHECK(loose.taus == std::vector<double>{0.1});
  CHECK(loose.lambdas == std::vector<double>{0.1, 0.25});
}

#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "fakd/class_stats.hpp"
#include "fakd/error.hpp"
#include "fakd/losses.hpp"
#include "fakd/mat.hpp"
#include "fakd/rng.hpp"
#include "fakd/toymodels.hpp"

namespace fakd {

// ---------------------------------------------------------------------------
// Synthetic pixel-labeling tasks: class-conditional diagonal Gaussians with
// geometric class imbalance, laid out as contiguous runs so images carry the
// spatial structure the channel losses need.
// ---------------------------------------------------------------------------
struct SyntheticTask {
  std::string task_id = "task";
  std::size_t num_classes = 6;
  std::size_t input_dim = 8;
  std::size_t image_side = 16;
  Mat class_means;       // C x A_in
  Mat class_axis_scale;  // C x A_in, per-axis stddev multipliers
  Vec class_weights;     // C, sums to 1
  double noise = 1.0;
  std::uint64_t seed = 1;
};

inline void validate_task(const SyntheticTask& task) {
  const std::size_t c = task.num_classes, a = task.input_dim;
  require(c >= 2, "invalid-task-spec", "task needs at least 2 classes");
  require(a >= 1, "invalid-task-spec", "task needs input_dim >= 1");
  require(task.image_side >= 1, "invalid-task-spec", "task needs image_side >= 1");
  require(task.noise >= 0.0, "invalid-task-spec", "task noise must be >= 0");
  require(task.class_means.rows() == c && task.class_means.cols() == a, "invalid-task-spec",
          "class_means shape mismatch");
  require(task.class_axis_scale.rows() == c && task.class_axis_scale.cols() == a,
          "invalid-task-spec", "class_axis_scale shape mismatch");
  require(task.class_weights.size() == c, "invalid-task-spec", "class_weights length mismatch");
  double wsum = 0.0;
  for (double w : task.class_weights) {
    require(w > 0.0, "invalid-task-spec", "class weights must be positive");
    wsum += w;
  }
  require(std::abs(wsum - 1.0) <= 1e-9, "invalid-task-spec", "class weights must sum to 1");
  for (std::size_t i = 0; i < c; ++i)
    for (std::size_t j = i + 1; j < c; ++j) {
      double d2 = 0.0;
      for (std::size_t t = 0; t < a; ++t) {
        const double d = task.class_means(i, t) - task.class_means(j, t);
        d2 += d * d;
      }
      require(d2 > 1e-18, "invalid-task-spec", "class means must be pairwise distinct");
    }
}

// Deterministic task construction. separation scales the random mean
// placement; imbalance < 1 gives geometric class frequencies (class 0 most
// common), 1 gives a balanced task.
inline SyntheticTask make_task(std::string task_id, std::size_t classes, std::size_t input_dim,
                               std::size_t image_side, double separation, double noise,
                               double imbalance, std::uint64_t seed) {
  require(imbalance > 0.0, "invalid-task-spec", "imbalance ratio must be positive");
  SyntheticTask task;
  task.task_id = std::move(task_id);
  task.num_classes = classes;
  task.input_dim = input_dim;
  task.image_side = image_side;
  task.noise = noise;
  task.seed = seed;

  Rng rng(derive_seed(seed, "task-geometry"));
  task.class_means = Mat(classes, input_dim);
  const double mean_scale = separation / std::sqrt(double(input_dim));
  for (auto& v : task.class_means.data()) v = mean_scale * rng.normal();
  task.class_axis_scale = Mat(classes, input_dim);
  for (auto& v : task.class_axis_scale.data()) v = 0.6 + 0.8 * rng.uniform();
  task.class_weights.assign(classes, 0.0);
  double w = 1.0, sum = 0.0;
  for (std::size_t g = 0; g < classes; ++g) {
    task.class_weights[g] = w;
    sum += w;
    w *= imbalance;
  }
  for (auto& x : task.class_weights) x /= sum;

  validate_task(task);
  return task;
}

struct PixelImage {
  Mat pixels;               // M x A_in
  std::vector<int> labels;  // M
};

using PixelDataset = std::vector<PixelImage>;

// Deterministic dataset generation; distinct streams (train/val/...) come
// from the stream tag.
inline PixelDataset generate_task(const SyntheticTask& task, std::size_t n_images,
                                  std::string_view stream = "train") {
  validate_task(task);
  require(n_images >= 1, "invalid-task-spec", "need n_images >= 1");
  Rng rng(derive_seed(task.seed, std::string("data-") + std::string(stream)));
  const std::size_t m = task.image_side * task.image_side;
  const std::size_t a = task.input_dim;
  const std::size_t run_lo = std::max<std::size_t>(2, task.image_side / 2);
  const std::size_t run_span = std::max<std::size_t>(1, (3 * task.image_side) / 2);

  PixelDataset data(n_images);
  for (auto& img : data) {
    img.pixels = Mat(m, a);
    img.labels.assign(m, 0);
    std::size_t pos = 0;
    while (pos < m) {
      const double u = rng.uniform();
      std::size_t g = 0;
      double cum = 0.0;
      for (; g + 1 < task.num_classes; ++g) {
        cum += task.class_weights[g];
        if (u < cum) break;
      }
      const std::size_t len = std::min(m - pos, run_lo + rng.below(run_span));
      for (std::size_t k = 0; k < len; ++k) img.labels[pos + k] = int(g);
      pos += len;
    }
    for (std::size_t i = 0; i < m; ++i) {
      const int g = img.labels[i];
      auto row = img.pixels.row(i);
      for (std::size_t t = 0; t < a; ++t)
        row[t] = task.class_means(g, t) +
                 task.noise * task.class_axis_scale(g, t) * rng.normal();
    }
  }
  return data;
}

// Exact Bayes rule of the generative model (diagonal Gaussian discriminant
// with class priors). At zero noise it degenerates to nearest-mean.
inline int bayes_predict(const SyntheticTask& task, std::span<const double> x) {
  require(x.size() == task.input_dim, "shape-mismatch", "pixel width does not match task");
  int best = 0;
  double best_score = -1e300;
  for (std::size_t g = 0; g < task.num_classes; ++g) {
    double score;
    if (task.noise == 0.0) {
      double d2 = 0.0;
      for (std::size_t t = 0; t < task.input_dim; ++t) {
        const double d = x[t] - task.class_means(g, t);
        d2 += d * d;
      }
      score = -d2;
    } else {
      score = std::log(task.class_weights[g]);
      for (std::size_t t = 0; t < task.input_dim; ++t) {
        const double sd = task.noise * task.class_axis_scale(g, t);
        const double d = (x[t] - task.class_means(g, t)) / sd;
        score -= 0.5 * d * d + std::log(sd);
      }
    }
    if (score > best_score) {
      best_score = score;
      best = int(g);
    }
  }
  return best;
}

inline double bayes_accuracy(const SyntheticTask& task, const PixelDataset& data) {
  std::int64_t hit = 0, total = 0;
  for (const auto& img : data)
    for (std::size_t i = 0; i < img.labels.size(); ++i) {
      if (img.labels[i] == kIgnoreLabel) continue;
      ++total;
      if (bayes_predict(task, img.pixels.row(i)) == img.labels[i]) ++hit;
    }
  require(total > 0, "empty-supervision", "no labeled pixels");
  return double(hit) / double(total);
}

// ---------------------------------------------------------------------------
// Segmentation metrics from an aggregate confusion matrix (rows = ground
// truth, cols = prediction). Classes absent from both sides are excluded from
// the mIoU mean; their per_class_iou entry is 0.
// ---------------------------------------------------------------------------
struct EvalResult {
  double miou = 0.0;
  double macc = 0.0;
  Vec per_class_iou;
  Mat confusion;
};

inline EvalResult evaluate_confusion(const Mat& confusion) {
  require(confusion.rows() == confusion.cols() && confusion.rows() >= 1, "shape-mismatch",
          "confusion matrix must be square");
  const std::size_t c = confusion.rows();
  EvalResult res;
  res.confusion = confusion;
  res.per_class_iou.assign(c, 0.0);
  double iou_sum = 0.0, recall_sum = 0.0;
  std::size_t iou_classes = 0, recall_classes = 0;
  for (std::size_t g = 0; g < c; ++g) {
    double row = 0.0, col = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      row += confusion(g, k);
      col += confusion(k, g);
    }
    const double tp = confusion(g, g);
    const double denom = row + col - tp;  // TP + FN + FP
    if (denom > 0.0) {
      res.per_class_iou[g] = tp / denom;
      iou_sum += res.per_class_iou[g];
      ++iou_classes;
    }
    if (row > 0.0) {
      recall_sum += tp / row;
      ++recall_classes;
    }
  }
  res.miou = iou_classes ? iou_sum / double(iou_classes) : 0.0;
  res.macc = recall_classes ? recall_sum / double(recall_classes) : 0.0;
  return res;
}

inline EvalResult evaluate(const PixelNet& net, const PixelDataset& data) {
  require(!data.empty(), "invalid-task-spec", "evaluate needs a nonempty dataset");
  const std::size_t c = net.head().num_classes();
  Mat confusion(c, c);
  for (const auto& img : data) {
    const Mat logits = net.forward_inference(img.pixels).logits;
    for (std::size_t i = 0; i < logits.rows(); ++i) {
      const int y = img.labels[i];
      if (y == kIgnoreLabel) continue;
      require(y >= 0 && std::size_t(y) < c, "unknown-class",
              "label " + std::to_string(y) + " out of class range");
      auto row = logits.row(i);
      const std::size_t pred = std::max_element(row.begin(), row.end()) - row.begin();
      confusion(y, pred) += 1.0;
    }
  }
  return evaluate_confusion(confusion);
}

// ---------------------------------------------------------------------------
// Training loops.
// ---------------------------------------------------------------------------
struct TrainConfig {
  std::int64_t steps = 2000;
  double base_lr = 0.15;
  double momentum = 0.9;
  double poly_power = 0.9;
  std::size_t batch_images = 2;
};

namespace detail {

inline void add_into(Mat& acc, const Mat& g) {
  if (g.empty()) return;
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.data().size(); ++i) acc.data()[i] += g.data()[i];
}

inline void add_into(Vec& acc, const Vec& g) {
  if (g.empty()) return;
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

inline void add_gradients(PixelNet::Gradients& acc, const PixelNet::Gradients& g) {
  add_into(acc.ext_W1, g.ext_W1);
  add_into(acc.ext_b1, g.ext_b1);
  add_into(acc.ext_W2, g.ext_W2);
  add_into(acc.ext_b2, g.ext_b2);
  add_into(acc.head_W, g.head_W);
  add_into(acc.head_B, g.head_B);
}

inline void scale_gradients(PixelNet::Gradients& acc, double s) {
  for (auto& v : acc.ext_W1.data()) v *= s;
  for (auto& v : acc.ext_b1) v *= s;
  for (auto& v : acc.ext_W2.data()) v *= s;
  for (auto& v : acc.ext_b2) v *= s;
  for (auto& v : acc.head_W.data()) v *= s;
  for (auto& v : acc.head_B) v *= s;
}

inline SgdOptimizer to_optimizer(const TrainConfig& tc) {
  return SgdOptimizer{tc.base_lr, tc.momentum, tc.poly_power, std::max<std::int64_t>(tc.steps, 1)};
}

}  // namespace detail

// Supervised training of a fresh network (the teacher, or a plain-student
// baseline). Deterministic given the seed; zero steps returns initialization.
inline PixelNet train_teacher(const PixelDataset& train, const ExtractorSpec& ext,
                              std::size_t num_classes, const TrainConfig& tc,
                              std::uint64_t seed) {
  require(!train.empty(), "invalid-task-spec", "empty training set");
  require(tc.batch_images >= 1, "invalid-config", "batch_images must be >= 1");
  Rng init_rng(derive_seed(seed, "init"));
  PixelNet net(ext, num_classes, init_rng);
  if (tc.steps == 0) return net;

  Rng batch_rng(derive_seed(seed, "batches"));
  const SgdOptimizer opt = detail::to_optimizer(tc);
  SgdState state;
  for (std::int64_t step = 0; step < tc.steps; ++step) {
    PixelNet::Gradients acc;
    for (std::size_t b = 0; b < tc.batch_images; ++b) {
      const PixelImage& img = train[batch_rng.below(train.size())];
      auto fwd = net.forward(img.pixels);
      FeatureBatch feats{std::move(fwd.features), Role::student, img.labels};
      const LossOutput ce = segmentation_ce_loss(feats, net.head(), img.labels);
      require(std::isfinite(ce.value), "training-diverged",
              "ce loss not finite at step " + std::to_string(step));
      detail::add_gradients(acc, net.backward(ce));
    }
    detail::scale_gradients(acc, 1.0 / double(tc.batch_images));
    sgd_step(net, acc, opt, state, step);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Distillation.
// ---------------------------------------------------------------------------
struct VariantSpec {
  std::string label = "PD";
  LossVariant variant = LossVariant::PD;
  bool no_distill = false;  // plain-student baseline
  double weight = 1.0;
  double lambda0 = 0.0;
  double tau = 1.0;
  DiagonalMode diagonal_mode = DiagonalMode::paper_form;
  VarianceDenominator variance_denominator = VarianceDenominator::tau_squared;
};

struct StepLosses {
  double ce = 0.0;
  double distill = 0.0;
  double combined = 0.0;
  double lambda_value = 0.0;
};

// One full distillation iteration over a batch of images: per image, teacher
// forward, student forward, covariance update with the current student
// features and labels, then the combined loss (supervised cross-entropy plus
// weighted distillation through the student's own head) and backprop;
// afterwards a single SGD step on the averaged gradients. lambda comes from
// the schedule at the current step.
inline StepLosses distill_step(const PixelNet& teacher, PixelNet& student,
                               std::span<const PixelImage* const> batch,
                               ClassCovarianceStore& store, const VariantSpec& vs,
                               const LambdaSchedule& sched, std::int64_t step,
                               const SgdOptimizer& opt, SgdState& state) {
  require(!batch.empty(), "invalid-task-spec", "distill_step needs a nonempty batch");
  const bool distilling = !vs.no_distill && vs.weight != 0.0;
  const bool augmented =
      distilling && (vs.variant == LossVariant::AUG_PD || vs.variant == LossVariant::AUG_CWD);
  StepLosses out;
  out.lambda_value = augmented ? lambda_schedule(step, sched) : 0.0;

  DistillLossSpec loss_spec;
  loss_spec.variant = vs.variant;
  loss_spec.tau = vs.tau;
  loss_spec.lambda = out.lambda_value;
  loss_spec.diagonal_mode = vs.diagonal_mode;
  loss_spec.variance_denominator = vs.variance_denominator;

  PixelNet::Gradients acc;
  for (const PixelImage* img : batch) {
    const Mat teacher_features = teacher.forward_inference(img->pixels).features;
    auto fwd = student.forward(img->pixels);

    store.update(fwd.features, img->labels);

    FeatureBatch student_batch{std::move(fwd.features), Role::student, img->labels};
    const FeatureBatch teacher_batch{teacher_features, Role::teacher, {}};

    LossOutput combined = segmentation_ce_loss(student_batch, student.head(), img->labels);
    out.ce += combined.value;
    if (distilling) {
      const LossOutput dl =
          distill_loss(loss_spec, student_batch, teacher_batch, student.head(), &store);
      out.distill += dl.value;
      add_scaled(combined, dl, vs.weight);
    }
    require(std::isfinite(combined.value), "training-diverged",
            "loss not finite at step " + std::to_string(step));
    out.combined += combined.value;
    detail::add_gradients(acc, student.backward(combined));
  }
  const double inv_b = 1.0 / double(batch.size());
  detail::scale_gradients(acc, inv_b);
  out.ce *= inv_b;
  out.distill *= inv_b;
  out.combined *= inv_b;
  sgd_step(student, acc, opt, state, step);
  return out;
}

// ---------------------------------------------------------------------------
// Experiment runner.
// ---------------------------------------------------------------------------
struct TaskConfig {
  std::string task_id = "ref";
  std::size_t classes = 6;
  std::size_t input_dim = 8;
  std::size_t image_side = 16;
  double separation = 2.2;
  double noise = 1.0;
  double imbalance = 0.65;
  std::size_t train_images = 200;
  std::size_t val_images = 60;
};

struct ModelConfig {
  ExtractorKind extractor = ExtractorKind::mlp;
  std::size_t hidden_dim = 64;
  std::size_t feature_dim = 8;
};

struct ExperimentConfig {
  TaskConfig task;
  ModelConfig teacher;
  ModelConfig student{ExtractorKind::linear, 8, 8};
  TrainConfig teacher_train;
  TrainConfig distill_train;
  bool init_head_from_teacher = true;
  bool diagonal_covariance = false;
  ScheduleKind schedule_kind = ScheduleKind::cosine;
  std::vector<VariantSpec> variants;
  std::vector<std::uint64_t> seeds{1};
  std::string out_dir = "out";
  int jobs = 1;
  bool timing_wall = false;  // keeps wall_time_s at 0.000 so reruns are bit-identical
};

struct ExperimentRow {
  std::string task_id;
  std::uint64_t seed = 0;
  std::string variant;
  double lambda0 = 0.0;
  double tau = 0.0;
  std::int64_t steps = 0;
  EvalResult eval;
  double wall_time_s = 0.0;
};

inline void validate_experiment(const ExperimentConfig& cfg) {
  require(!cfg.seeds.empty(), "invalid-config", "seeds: need at least one seed");
  require(!cfg.variants.empty(), "invalid-config", "variants: need at least one variant");
  require(cfg.teacher.feature_dim == cfg.student.feature_dim, "invalid-config",
          "teacher.feature_dim and student.feature_dim must match (shared classifier width)");
  require(cfg.jobs >= 1, "invalid-config", "jobs must be >= 1");
  require(cfg.distill_train.steps >= 1, "invalid-config", "distill.steps must be >= 1");
  for (const auto& vs : cfg.variants) {
    require(!vs.label.empty(), "invalid-config", "variants: empty label");
    require(vs.tau > 0.0, "invalid-config", "variants." + vs.label + ": tau must be > 0");
    require(vs.lambda0 >= 0.0, "invalid-config",
            "variants." + vs.label + ": lambda0 must be >= 0");
    require(vs.weight >= 0.0, "invalid-config",
            "variants." + vs.label + ": weight must be >= 0");
  }
}

namespace detail {

inline ExtractorSpec to_extractor(const ModelConfig& mc, std::size_t input_dim) {
  ExtractorSpec spec;
  spec.kind = mc.extractor;
  spec.in_dim = input_dim;
  spec.out_dim = mc.extractor == ExtractorKind::identity ? input_dim : mc.feature_dim;
  spec.hidden_dim = mc.hidden_dim;
  return spec;
}

inline std::vector<ExperimentRow> run_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  const SyntheticTask task =
      make_task(cfg.task.task_id, cfg.task.classes, cfg.task.input_dim, cfg.task.image_side,
                cfg.task.separation, cfg.task.noise, cfg.task.imbalance,
                derive_seed(seed, "task"));
  const PixelDataset train = generate_task(task, cfg.task.train_images, "train");
  const PixelDataset val = generate_task(task, cfg.task.val_images, "val");

  const ExtractorSpec teacher_ext = to_extractor(cfg.teacher, cfg.task.input_dim);
  const ExtractorSpec student_ext = to_extractor(cfg.student, cfg.task.input_dim);
  const PixelNet teacher = train_teacher(train, teacher_ext, cfg.task.classes,
                                         cfg.teacher_train, derive_seed(seed, "teacher"));

  Rng student_init(derive_seed(seed, "student-init"));
  PixelNet student_base(student_ext, cfg.task.classes, student_init);
  if (cfg.init_head_from_teacher) student_base.head() = teacher.head();

  // One shared batch stream so variant deltas cannot come from batch order.
  Rng batch_rng(derive_seed(seed, "batches"));
  const std::size_t bsz = std::max<std::size_t>(1, cfg.distill_train.batch_images);
  std::vector<std::size_t> batch_indices(std::size_t(cfg.distill_train.steps) * bsz);
  for (auto& idx : batch_indices) idx = batch_rng.below(train.size());

  const SgdOptimizer opt = to_optimizer(cfg.distill_train);
  std::vector<ExperimentRow> rows;
  rows.reserve(cfg.variants.size());
  for (const auto& vs : cfg.variants) {
    PixelNet student = student_base;
    ClassCovarianceStore store(cfg.task.classes, student_ext.out_dim, cfg.diagonal_covariance);
    LambdaSchedule sched{vs.lambda0, cfg.distill_train.steps, cfg.schedule_kind};
    SgdState state;
    std::vector<const PixelImage*> batch(bsz);

    const auto t0 = std::chrono::steady_clock::now();
    for (std::int64_t step = 0; step < cfg.distill_train.steps; ++step) {
      for (std::size_t b = 0; b < bsz; ++b)
        batch[b] = &train[batch_indices[std::size_t(step) * bsz + b]];
      distill_step(teacher, student, batch, store, vs, sched, step, opt, state);
    }
    const auto t1 = std::chrono::steady_clock::now();

    ExperimentRow row;
    row.task_id = cfg.task.task_id;
    row.seed = seed;
    row.variant = vs.label;
    row.lambda0 = vs.no_distill ? 0.0 : vs.lambda0;
    row.tau = vs.no_distill ? 0.0 : vs.tau;
    row.steps = cfg.distill_train.steps;
    row.eval = evaluate(student, val);
    row.wall_time_s =
        cfg.timing_wall ? std::chrono::duration<double>(t1 - t0).count() : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

// Full comparison run: per seed, one teacher, then every variant from the
// same student initialization and batch stream. Rows come back in canonical
// (seed, variant) order regardless of the parallelism degree.
inline std::vector<ExperimentRow> run_experiment(const ExperimentConfig& cfg) {
  validate_experiment(cfg);
  std::vector<std::vector<ExperimentRow>> per_seed(cfg.seeds.size());
  const int workers = std::min<int>(cfg.jobs, int(cfg.seeds.size()));
  if (workers <= 1) {
    for (std::size_t s = 0; s < cfg.seeds.size(); ++s)
      per_seed[s] = detail::run_seed(cfg, cfg.seeds[s]);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(cfg.seeds.size());
    pool.reserve(std::size_t(workers));
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t s = next.fetch_add(1); s < cfg.seeds.size(); s = next.fetch_add(1)) {
          try {
            per_seed[s] = detail::run_seed(cfg, cfg.seeds[s]);
          } catch (...) {
            errors[s] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  std::vector<ExperimentRow> rows;
  rows.reserve(cfg.seeds.size() * cfg.variants.size());
  for (auto& block : per_seed)
    for (auto& row : block) rows.push_back(std::move(row));
  return rows;
}

// ---------------------------------------------------------------------------
// Results CSV.
// ---------------------------------------------------------------------------
inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

inline std::string format_short(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

inline std::string results_csv_header() {
  return "task_id,seed,variant,lambda0,tau,steps,mIoU,mAcc,per_class_iou,wall_time_s";
}

inline std::string results_csv_row(const ExperimentRow& r) {
  std::string row = r.task_id;
  row += ',' + std::to_string(r.seed);
  row += ',' + r.variant;
  row += ',' + format_short(r.lambda0);
  row += ',' + format_short(r.tau);
  row += ',' + std::to_string(r.steps);
  row += ',' + format_fixed(r.eval.miou, 6);
  row += ',' + format_fixed(r.eval.macc, 6);
  row += ',';
  for (std::size_t g = 0; g < r.eval.per_class_iou.size(); ++g) {
    if (g) row += ';';
    row += format_fixed(r.eval.per_class_iou[g], 6);
  }
  row += ',' + format_fixed(r.wall_time_s, 3);
  return row;
}

inline std::string results_csv(const std::vector<ExperimentRow>& rows) {
  std::string out = results_csv_header() + '\n';
  for (const auto& r : rows) out += results_csv_row(r) + '\n';
  return out;
}

inline std::vector<ExperimentRow> parse_results_csv(std::istream& is) {
  std::string line;
  require(bool(std::getline(is, line)) && line == results_csv_header(), "invalid-config",
          "results CSV header mismatch");
  std::vector<ExperimentRow> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
      const std::size_t comma = line.find(',', start);
      fields.push_back(line.substr(start, comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    require(fields.size() == 10, "invalid-config", "results CSV row has wrong field count");
    ExperimentRow r;
    try {
      r.task_id = fields[0];
      r.seed = std::stoull(fields[1]);
      r.variant = fields[2];
      r.lambda0 = std::stod(fields[3]);
      r.tau = std::stod(fields[4]);
      r.steps = std::stoll(fields[5]);
      r.eval.miou = std::stod(fields[6]);
      r.eval.macc = std::stod(fields[7]);
      std::stringstream ious(fields[8]);
      std::string part;
      while (std::getline(ious, part, ';'))
        if (!part.empty()) r.eval.per_class_iou.push_back(std::stod(part));
      r.wall_time_s = std::stod(fields[9]);
    } catch (const std::exception&) {
      fail("invalid-config", "results CSV row has malformed numbers");
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Per-class improvement report: classes sorted by baseline difficulty, one
// delta column per distilled variant.
// ---------------------------------------------------------------------------
struct ImprovementReport {
  std::vector<std::string> variant_labels;
  std::vector<int> class_ids;  // sorted by baseline IoU ascending
  Vec baseline_iou;
  std::vector<Vec> deltas;  // deltas[variant][row]
};

inline ImprovementReport per_class_improvement_report(const std::vector<ExperimentRow>& rows,
                                                      const std::string& baseline_label =
                                                          "no-distill") {
  require(!rows.empty(), "inconsistent-results", "no result rows");
  const std::size_t c = rows.front().eval.per_class_iou.size();
  require(c >= 1, "inconsistent-results", "rows carry no per-class IoU data");
  for (const auto& r : rows)
    require(r.eval.per_class_iou.size() == c, "inconsistent-results",
            "rows disagree on class count");

  std::vector<std::string> labels;
  for (const auto& r : rows)
    if (std::find(labels.begin(), labels.end(), r.variant) == labels.end())
      labels.push_back(r.variant);
  require(std::find(labels.begin(), labels.end(), baseline_label) != labels.end(),
          "inconsistent-results", "baseline variant '" + baseline_label + "' missing");

  auto mean_iou = [&](const std::string& label) {
    Vec mean(c, 0.0);
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.variant != label) continue;
      for (std::size_t g = 0; g < c; ++g) mean[g] += r.eval.per_class_iou[g];
      ++n;
    }
    for (auto& v : mean) v /= double(n);
    return mean;
  };

  const Vec base = mean_iou(baseline_label);
  ImprovementReport rep;
  rep.class_ids.resize(c);
  std::iota(rep.class_ids.begin(), rep.class_ids.end(), 0);
  std::stable_sort(rep.class_ids.begin(), rep.class_ids.end(),
                   [&](int x, int y) { return base[x] < base[y]; });
  rep.baseline_iou.resize(c);
  for (std::size_t k = 0; k < c; ++k) rep.baseline_iou[k] = base[rep.class_ids[k]];

  for (const auto& label : labels) {
    if (label == baseline_label) continue;
    rep.variant_labels.push_back(label);
    const Vec v = mean_iou(label);
    Vec d(c, 0.0);
    for (std::size_t k = 0; k < c; ++k) d[k] = v[rep.class_ids[k]] - rep.baseline_iou[k];
    rep.deltas.push_back(std::move(d));
  }
  return rep;
}

inline std::string render_improvement_report(const ImprovementReport& rep) {
  std::vector<int> widths;
  std::string out = "class  baseline_iou";
  for (const auto& label : rep.variant_labels) {
    const std::string col = "d(" + label + ")";
    widths.push_back(std::max<int>(10, int(col.size())));
    out += "  " + std::string(std::size_t(widths.back()) - col.size(), ' ') + col;
  }
  out += '\n';
  char cell[64];
  for (std::size_t k = 0; k < rep.class_ids.size(); ++k) {
    std::snprintf(cell, sizeof(cell), "%5d  %12.4f", rep.class_ids[k], rep.baseline_iou[k]);
    out += cell;
    for (std::size_t v = 0; v < rep.variant_labels.size(); ++v) {
      std::snprintf(cell, sizeof(cell), "  %+*.4f", widths[v], rep.deltas[v][k]);
      out += cell;
    }
    out += '\n';
  }
  return out;
}

// Mean metrics per variant across seeds, in first-seen variant order.
inline std::string render_variant_summary(const std::vector<ExperimentRow>& rows) {
  std::vector<std::string> labels;
  for (const auto& r : rows)
    if (std::find(labels.begin(), labels.end(), r.variant) == labels.end())
      labels.push_back(r.variant);
  std::string out = "variant         mean_mIoU  mean_mAcc  seeds\n";
  for (const auto& label : labels) {
    double miou = 0.0, macc = 0.0;
    std::size_t n = 0;
    for (const auto& r : rows) {
      if (r.variant != label) continue;
      miou += r.eval.miou;
      macc += r.eval.macc;
      ++n;
    }
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-15s %9.4f  %9.4f  %5zu\n", label.c_str(),
                  miou / double(n), macc / double(n), n);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Parameter sweeps.
// ---------------------------------------------------------------------------
enum class SweepParam { lambda0, tau, weight };

inline SweepParam parse_sweep_param(const std::string& s) {
  if (s == "lambda0") return SweepParam::lambda0;
  if (s == "tau") return SweepParam::tau;
  if (s == "weight") return SweepParam::weight;
  fail("invalid-config", "sweep parameter must be lambda0, tau, or weight; got '" + s + "'");
}

inline const char* sweep_param_name(SweepParam p) {
  switch (p) {
    case SweepParam::lambda0: return "lambda0";
    case SweepParam::tau: return "tau";
    case SweepParam::weight: return "weight";
  }
  return "lambda0";
}

// lambda0 applies to augmented variants, tau to channel variants, weight to
// every distilled variant. The task id gets a suffix so merged CSV blocks
// stay distinguishable.
inline ExperimentConfig apply_sweep_value(ExperimentConfig cfg, SweepParam p, double v) {
  for (auto& vs : cfg.variants) {
    if (vs.no_distill) continue;
    switch (p) {
      case SweepParam::lambda0:
        if (vs.variant == LossVariant::AUG_PD || vs.variant == LossVariant::AUG_CWD)
          vs.lambda0 = v;
        break;
      case SweepParam::tau:
        if (vs.variant == LossVariant::CWD || vs.variant == LossVariant::AUG_CWD) vs.tau = v;
        break;
      case SweepParam::weight:
        vs.weight = v;
        break;
    }
  }
  cfg.task.task_id += std::string("/") + sweep_param_name(p) + "=" + format_short(v);
  return cfg;
}

}  // namespace fakd

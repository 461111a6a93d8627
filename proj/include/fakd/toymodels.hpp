#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fakd/error.hpp"
#include "fakd/losses.hpp"
#include "fakd/mat.hpp"
#include "fakd/rng.hpp"

namespace fakd {

enum class ExtractorKind { identity, linear, mlp };

inline const char* extractor_name(ExtractorKind k) {
  switch (k) {
    case ExtractorKind::identity: return "identity";
    case ExtractorKind::linear: return "linear";
    case ExtractorKind::mlp: return "mlp";
  }
  return "identity";
}

inline ExtractorKind parse_extractor(const std::string& s) {
  if (s == "identity") return ExtractorKind::identity;
  if (s == "linear") return ExtractorKind::linear;
  if (s == "mlp") return ExtractorKind::mlp;
  fail("invalid-config", "unknown extractor '" + s + "'");
}

struct ExtractorSpec {
  ExtractorKind kind = ExtractorKind::identity;
  std::size_t in_dim = 8;
  std::size_t out_dim = 8;
  std::size_t hidden_dim = 0;  // mlp only
};

// Per-pixel feature extractor plus shared linear classifier. The losses apply
// the head themselves, so backward only propagates feature gradients through
// the extractor and forwards the head gradients untouched.
class PixelNet {
 public:
  struct ForwardResult {
    Mat features;  // M x A
    Mat logits;    // M x C
  };

  struct Gradients {
    Mat ext_W1;  // linear/mlp first layer
    Vec ext_b1;
    Mat ext_W2;  // mlp second layer
    Vec ext_b2;
    Mat head_W;
    Vec head_B;
  };

  PixelNet(const ExtractorSpec& spec, std::size_t num_classes, Rng& rng) : spec_(spec) {
    require(spec.in_dim >= 1 && spec.out_dim >= 1, "shape-mismatch", "extractor dims must be >= 1");
    require(num_classes >= 2, "shape-mismatch", "classifier needs >= 2 classes");
    switch (spec_.kind) {
      case ExtractorKind::identity:
        require(spec.in_dim == spec.out_dim, "shape-mismatch",
                "identity extractor needs in_dim == out_dim");
        break;
      case ExtractorKind::linear:
        ext_W1_ = he_init(spec.out_dim, spec.in_dim, rng);
        ext_b1_.assign(spec.out_dim, 0.0);
        break;
      case ExtractorKind::mlp:
        require(spec.hidden_dim >= 1, "shape-mismatch", "mlp extractor needs hidden_dim >= 1");
        ext_W1_ = he_init(spec.hidden_dim, spec.in_dim, rng);
        ext_b1_.assign(spec.hidden_dim, 0.0);
        ext_W2_ = he_init(spec.out_dim, spec.hidden_dim, rng);
        ext_b2_.assign(spec.out_dim, 0.0);
        break;
    }
    head_.W = Mat(num_classes, spec.out_dim);
    const double scale = 1.0 / std::sqrt(double(spec.out_dim));
    for (auto& v : head_.W.data()) v = scale * rng.normal();
    head_.B.assign(num_classes, 0.0);
  }

  const ExtractorSpec& spec() const noexcept { return spec_; }
  ClassifierHead& head() noexcept { return head_; }
  const ClassifierHead& head() const noexcept { return head_; }

  ForwardResult forward(const Mat& pixels) {
    ForwardResult out = run(pixels, &cache_);
    has_state_ = true;
    return out;
  }

  // Inference-only pass; leaves the backward cache untouched.
  ForwardResult forward_inference(const Mat& pixels) const { return run(pixels, nullptr); }

  Gradients backward(const LossOutput& upstream) const {
    require(has_state_, "no-forward-state", "backward before forward");
    const Mat& gf = upstream.grad_features;
    require(gf.rows() == cache_.input.rows() && gf.cols() == spec_.out_dim, "shape-mismatch",
            "upstream gradient shape does not match cached forward pass");
    Gradients g;
    g.head_W = upstream.grad_W;
    g.head_B = upstream.grad_B;
    switch (spec_.kind) {
      case ExtractorKind::identity:
        break;
      case ExtractorKind::linear:
        g.ext_W1 = matmul_tn(gf, cache_.input);  // A x A_in
        g.ext_b1 = column_sums(gf);
        break;
      case ExtractorKind::mlp: {
        g.ext_W2 = matmul_tn(gf, cache_.hidden);  // A x H
        g.ext_b2 = column_sums(gf);
        Mat gh = matmul(gf, ext_W2_);  // M x H
        for (std::size_t i = 0; i < gh.rows(); ++i)
          for (std::size_t j = 0; j < gh.cols(); ++j)
            if (cache_.pre_hidden(i, j) <= 0.0) gh(i, j) = 0.0;
        g.ext_W1 = matmul_tn(gh, cache_.input);  // H x A_in
        g.ext_b1 = column_sums(gh);
        break;
      }
    }
    return g;
  }

  // Stable tensor order shared by parameter and gradient views.
  std::vector<std::span<double>> parameter_views() {
    std::vector<std::span<double>> out;
    if (!ext_W1_.empty()) out.push_back(ext_W1_.data());
    if (!ext_b1_.empty()) out.emplace_back(ext_b1_);
    if (!ext_W2_.empty()) out.push_back(ext_W2_.data());
    if (!ext_b2_.empty()) out.emplace_back(ext_b2_);
    out.push_back(head_.W.data());
    out.emplace_back(head_.B);
    return out;
  }

  std::vector<std::span<const double>> gradient_views(const Gradients& g) const {
    std::vector<std::span<const double>> out;
    if (!ext_W1_.empty()) out.push_back(g.ext_W1.data());
    if (!ext_b1_.empty()) out.emplace_back(g.ext_b1);
    if (!ext_W2_.empty()) out.push_back(g.ext_W2.data());
    if (!ext_b2_.empty()) out.emplace_back(g.ext_b2);
    out.push_back(g.head_W.data());
    out.emplace_back(g.head_B);
    return out;
  }

  void save(std::ostream& os) const {
    os << "fakd-pixelnet v1\n";
    os << "kind " << extractor_name(spec_.kind) << '\n';
    os << "dims " << spec_.in_dim << ' ' << spec_.out_dim << ' ' << spec_.hidden_dim << '\n';
    os << "classes " << head_.W.rows() << '\n';
    os.precision(17);
    write_tensor(os, "ext_W1", ext_W1_);
    write_vec(os, "ext_b1", ext_b1_);
    write_tensor(os, "ext_W2", ext_W2_);
    write_vec(os, "ext_b2", ext_b2_);
    write_tensor(os, "head_W", head_.W);
    write_vec(os, "head_B", head_.B);
  }

  static PixelNet load(std::istream& is) {
    std::string line;
    require(bool(std::getline(is, line)) && line == "fakd-pixelnet v1", "invalid-snapshot",
            "bad model snapshot header");
    std::string tag, kind;
    ExtractorSpec spec;
    std::size_t classes = 0;
    is >> tag >> kind;
    require(bool(is) && tag == "kind", "invalid-snapshot", "expected kind line");
    spec.kind = parse_extractor(kind);
    is >> tag >> spec.in_dim >> spec.out_dim >> spec.hidden_dim;
    require(bool(is) && tag == "dims", "invalid-snapshot", "expected dims line");
    is >> tag >> classes;
    require(bool(is) && tag == "classes" && classes >= 2, "invalid-snapshot",
            "expected classes line");
    PixelNet net(spec, classes);
    net.read_tensor(is, "ext_W1", net.ext_W1_);
    net.read_vec(is, "ext_b1", net.ext_b1_);
    net.read_tensor(is, "ext_W2", net.ext_W2_);
    net.read_vec(is, "ext_b2", net.ext_b2_);
    net.read_tensor(is, "head_W", net.head_.W);
    net.read_vec(is, "head_B", net.head_.B);
    return net;
  }

 private:
  struct Cache {
    Mat input;       // M x A_in
    Mat pre_hidden;  // M x H (mlp)
    Mat hidden;      // M x H after the nonlinearity (mlp)
  };

  // Uninitialized-parameter constructor for load().
  PixelNet(const ExtractorSpec& spec, std::size_t num_classes) : spec_(spec) {
    switch (spec_.kind) {
      case ExtractorKind::identity:
        break;
      case ExtractorKind::linear:
        ext_W1_ = Mat(spec.out_dim, spec.in_dim);
        ext_b1_.assign(spec.out_dim, 0.0);
        break;
      case ExtractorKind::mlp:
        ext_W1_ = Mat(spec.hidden_dim, spec.in_dim);
        ext_b1_.assign(spec.hidden_dim, 0.0);
        ext_W2_ = Mat(spec.out_dim, spec.hidden_dim);
        ext_b2_.assign(spec.out_dim, 0.0);
        break;
    }
    head_.W = Mat(num_classes, spec.out_dim);
    head_.B.assign(num_classes, 0.0);
  }

  static Mat he_init(std::size_t rows, std::size_t cols, Rng& rng) {
    Mat w(rows, cols);
    const double scale = std::sqrt(2.0 / double(cols));
    for (auto& v : w.data()) v = scale * rng.normal();
    return w;
  }

  static Vec column_sums(const Mat& m) {
    Vec out(m.cols(), 0.0);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < m.cols(); ++j) out[j] += m(i, j);
    return out;
  }

  static Mat affine(const Mat& x, const Mat& w, const Vec& b) {
    Mat out(x.rows(), w.rows());
    for (std::size_t i = 0; i < x.rows(); ++i)
      for (std::size_t r = 0; r < w.rows(); ++r) out(i, r) = dot(w.row(r), x.row(i)) + b[r];
    return out;
  }

  ForwardResult run(const Mat& pixels, Cache* cache) const {
    require(pixels.cols() == spec_.in_dim, "shape-mismatch",
            "input width does not match extractor");
    ForwardResult out;
    switch (spec_.kind) {
      case ExtractorKind::identity:
        out.features = pixels;
        break;
      case ExtractorKind::linear:
        out.features = affine(pixels, ext_W1_, ext_b1_);
        break;
      case ExtractorKind::mlp: {
        Mat pre = affine(pixels, ext_W1_, ext_b1_);
        Mat hidden = pre;
        for (auto& v : hidden.data())
          if (v < 0.0) v = 0.0;
        out.features = affine(hidden, ext_W2_, ext_b2_);
        if (cache) {
          cache->pre_hidden = std::move(pre);
          cache->hidden = std::move(hidden);
        }
        break;
      }
    }
    if (cache) cache->input = pixels;
    out.logits = head_.logits(out.features);
    return out;
  }

  void write_tensor(std::ostream& os, const char* name, const Mat& m) const {
    os << "tensor " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
    for (std::size_t i = 0; i < m.rows(); ++i) {
      for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? " " : "") << m(i, j);
      os << '\n';
    }
  }

  void write_vec(std::ostream& os, const char* name, const Vec& v) const {
    os << "vector " << name << ' ' << v.size() << '\n';
    for (std::size_t j = 0; j < v.size(); ++j) os << (j ? " " : "") << v[j];
    os << '\n';
  }

  void read_tensor(std::istream& is, const char* name, Mat& m) {
    std::string tag, got;
    std::size_t rows = 0, cols = 0;
    is >> tag >> got >> rows >> cols;
    require(bool(is) && tag == "tensor" && got == name, "invalid-snapshot",
            std::string("expected tensor ") + name);
    require(rows == m.rows() && cols == m.cols(), "invalid-snapshot",
            std::string("tensor shape mismatch for ") + name);
    for (auto& v : m.data()) is >> v;
    require(bool(is), "invalid-snapshot", std::string("truncated tensor ") + name);
  }

  void read_vec(std::istream& is, const char* name, Vec& v) {
    std::string tag, got;
    std::size_t n = 0;
    is >> tag >> got >> n;
    require(bool(is) && tag == "vector" && got == name, "invalid-snapshot",
            std::string("expected vector ") + name);
    require(n == v.size(), "invalid-snapshot", std::string("vector size mismatch for ") + name);
    for (auto& x : v) is >> x;
    require(bool(is), "invalid-snapshot", std::string("truncated vector ") + name);
  }

  ExtractorSpec spec_;
  Mat ext_W1_;
  Vec ext_b1_;
  Mat ext_W2_;
  Vec ext_b2_;
  ClassifierHead head_;
  Cache cache_;
  bool has_state_ = false;
};

struct SgdOptimizer {
  double base_lr = 0.01;
  double momentum = 0.9;
  double poly_power = 0.9;
  std::int64_t max_iter = 1;
};

inline double poly_lr(const SgdOptimizer& opt, std::int64_t step) {
  require(opt.base_lr > 0.0, "invalid-config", "optimizer needs base_lr > 0");
  require(opt.momentum >= 0.0 && opt.momentum < 1.0, "invalid-config",
          "optimizer momentum must lie in [0, 1)");
  require(opt.max_iter > 0, "invalid-config", "optimizer needs max_iter > 0");
  require(step >= 0 && step < opt.max_iter, "schedule-exhausted",
          "step " + std::to_string(step) + " outside [0, max_iter)");
  return opt.base_lr * std::pow(1.0 - double(step) / double(opt.max_iter), opt.poly_power);
}

// Momentum buffers matching a fixed parameter-view layout.
class SgdState {
 public:
  void step(std::vector<std::span<double>> params,
            const std::vector<std::span<const double>>& grads, const SgdOptimizer& opt,
            std::int64_t step_index) {
    require(params.size() == grads.size(), "shape-mismatch",
            "parameter and gradient tensor counts differ");
    const double lr = poly_lr(opt, step_index);
    if (velocity_.empty()) {
      velocity_.resize(params.size());
      for (std::size_t t = 0; t < params.size(); ++t) velocity_[t].assign(params[t].size(), 0.0);
    }
    require(velocity_.size() == params.size(), "shape-mismatch", "optimizer state layout changed");
    for (std::size_t t = 0; t < params.size(); ++t) {
      require(params[t].size() == grads[t].size() && params[t].size() == velocity_[t].size(),
              "shape-mismatch", "tensor size changed under the optimizer");
      auto p = params[t];
      auto g = grads[t];
      auto& v = velocity_[t];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = opt.momentum * v[i] + g[i];
        p[i] -= lr * v[i];
      }
    }
  }

 private:
  std::vector<Vec> velocity_;
};

inline void sgd_step(PixelNet& net, const PixelNet::Gradients& grads, const SgdOptimizer& opt,
                     SgdState& state, std::int64_t step_index) {
  state.step(net.parameter_views(), net.gradient_views(grads), opt, step_index);
}

}  // namespace fakd

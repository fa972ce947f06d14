#pragma once

// Small encoder-decoder segmentation network with an expandable 1x1 head.
//
//   x -> e0 (s1) -> e1 (s2) -> e2 (s2) -> e3 (s2)
//        d2 = relu(conv(up(e3))) + e2
//        d1 = relu(conv(up(d2))) + e1
//        d0 = relu(conv(up(d1))) + e0   == F(x)
//   S(x) = head(F(x))
//
// All convolutions are 3x3 with padding 1 except the head. Backward passes are
// written by hand; the finite-difference tests in tests/ check them.

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rbc/tensor.hpp"

namespace rbc {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
struct Conv2d {
  int in = 0;
  int out = 0;
  int kernel = 3;
  int stride = 1;
  std::vector<T> weight;  // out x (in * kernel * kernel)
  std::vector<T> bias;    // out

  Conv2d() = default;
  Conv2d(int in_c, int out_c, int k, int s)
      : in(in_c), out(out_c), kernel(k), stride(s),
        weight(static_cast<std::size_t>(out_c) * in_c * k * k, T(0)), bias(out_c, T(0)) {}

  int pad() const { return kernel / 2; }
  int out_size(int n) const { return (n + 2 * pad() - kernel) / stride + 1; }
  bool pointwise() const { return kernel == 1 && stride == 1; }
  std::size_t patch() const { return static_cast<std::size_t>(in) * kernel * kernel; }

  bool operator==(const Conv2d&) const = default;

  /// Unfolds x into a (in*k*k) x (Ho*Wo) matrix.
  void im2col(const Tensor<T>& x, std::vector<T>& cols) const {
    const int ho = out_size(x.height), wo = out_size(x.width), p = pad();
    const std::size_t n = static_cast<std::size_t>(ho) * wo;
    cols.assign(patch() * n, T(0));
    for (int c = 0; c < in; ++c)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          T* row = cols.data() + ((static_cast<std::size_t>(c) * kernel + ky) * kernel + kx) * n;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - p;
            if (iy < 0 || iy >= x.height) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - p;
              if (ix >= 0 && ix < x.width) row[static_cast<std::size_t>(oy) * wo + ox] = x.at(c, iy, ix);
            }
          }
        }
  }

  void col2im(const std::vector<T>& cols, Tensor<T>& dx) const {
    const int ho = out_size(dx.height), wo = out_size(dx.width), p = pad();
    const std::size_t n = static_cast<std::size_t>(ho) * wo;
    for (int c = 0; c < in; ++c)
      for (int ky = 0; ky < kernel; ++ky)
        for (int kx = 0; kx < kernel; ++kx) {
          const T* row = cols.data() + ((static_cast<std::size_t>(c) * kernel + ky) * kernel + kx) * n;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - p;
            if (iy < 0 || iy >= dx.height) continue;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride + kx - p;
              if (ix >= 0 && ix < dx.width) dx.at(c, iy, ix) += row[static_cast<std::size_t>(oy) * wo + ox];
            }
          }
        }
  }

  /// `cols` receives the unfolded input for the backward pass (unused when pointwise).
  Tensor<T> forward(const Tensor<T>& x, std::vector<T>& cols) const {
    if (x.channels != in) throw ShapeError("Conv2d: expected " + std::to_string(in) + " input channels");
    const int ho = out_size(x.height), wo = out_size(x.width);
    const Eigen::Index n = static_cast<Eigen::Index>(ho) * wo;
    Tensor<T> y(out, ho, wo);
    ConstMatMap<T> w(weight.data(), out, static_cast<Eigen::Index>(patch()));
    MatMap<T> ym(y.data.data(), out, n);
    if (pointwise()) {
      cols.clear();
      ym.noalias() = w * ConstMatMap<T>(x.data.data(), in, n);
    } else {
      im2col(x, cols);
      ym.noalias() = w * ConstMatMap<T>(cols.data(), static_cast<Eigen::Index>(patch()), n);
    }
    for (int o = 0; o < out; ++o) ym.row(o).array() += bias[o];
    return y;
  }

  /// Accumulates parameter gradients; returns dL/dx when `want_input_grad`.
  Tensor<T> backward(const Tensor<T>& x, const std::vector<T>& cols, const Tensor<T>& dy, std::span<T> grad_w,
                     std::span<T> grad_b, bool want_input_grad = true) const {
    const Eigen::Index n = static_cast<Eigen::Index>(dy.height) * dy.width;
    const auto k = static_cast<Eigen::Index>(patch());
    ConstMatMap<T> dym(dy.data.data(), out, n);
    ConstMatMap<T> inputs(pointwise() ? x.data.data() : cols.data(), k, n);
    MatMap<T> gw(grad_w.data(), out, k);
    gw.noalias() += dym * inputs.transpose();
    for (int o = 0; o < out; ++o) grad_b[o] += dym.row(o).sum();
    Tensor<T> dx;
    if (!want_input_grad) return dx;
    dx = Tensor<T>(x.channels, x.height, x.width);
    ConstMatMap<T> w(weight.data(), out, k);
    if (pointwise()) {
      MatMap<T>(dx.data.data(), in, n).noalias() = w.transpose() * dym;
    } else {
      std::vector<T> dcols(static_cast<std::size_t>(k * n));
      MatMap<T>(dcols.data(), k, n).noalias() = w.transpose() * dym;
      col2im(dcols, dx);
    }
    return dx;
  }
};

namespace detail {

template <typename T>
Tensor<T> relu(const Tensor<T>& z) {
  Tensor<T> a = z;
  for (auto& v : a.data) v = v > T(0) ? v : T(0);
  return a;
}

template <typename T>
void relu_backward_inplace(const Tensor<T>& z, Tensor<T>& d) {
  for (std::size_t i = 0; i < d.data.size(); ++i)
    if (!(z.data[i] > T(0))) d.data[i] = T(0);
}

inline int nearest_src(int dst, int dst_n, int src_n) {
  return std::min(src_n - 1, static_cast<int>((static_cast<long long>(dst) * src_n) / dst_n));
}

/// Nearest-neighbour resize to (h, w).
template <typename T>
Tensor<T> upsample(const Tensor<T>& x, int h, int w) {
  Tensor<T> y(x.channels, h, w);
  for (int c = 0; c < x.channels; ++c)
    for (int oy = 0; oy < h; ++oy) {
      const int sy = nearest_src(oy, h, x.height);
      for (int ox = 0; ox < w; ++ox) y.at(c, oy, ox) = x.at(c, sy, nearest_src(ox, w, x.width));
    }
  return y;
}

template <typename T>
Tensor<T> upsample_backward(const Tensor<T>& dy, int h, int w) {
  Tensor<T> dx(dy.channels, h, w);
  for (int c = 0; c < dy.channels; ++c)
    for (int oy = 0; oy < dy.height; ++oy) {
      const int sy = nearest_src(oy, dy.height, h);
      for (int ox = 0; ox < dy.width; ++ox) dx.at(c, sy, nearest_src(ox, dy.width, w)) += dy.at(c, oy, ox);
    }
  return dx;
}

template <typename T>
void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += b.data[i];
}

}  // namespace detail

struct ArchConfig {
  int in_channels = 3;
  int height = 64;
  int width = 64;
  int width0 = 16;  // channels at full resolution (also the feature width C)
  int width1 = 32;
  int width2 = 32;

  bool operator==(const ArchConfig&) const = default;
};

enum Layer : int { kEnc0, kEnc1, kEnc2, kEnc3, kDec2, kDec1, kDec0, kHead, kNumLayers };

inline const char* layer_name(int l) {
  static constexpr const char* names[] = {"enc0", "enc1", "enc2", "enc3", "dec2", "dec1", "dec0", "head"};
  return names[l];
}

/// Per-layer parameter gradients, same layout as SegModel::layers.
template <typename T>
struct Gradients {
  std::vector<std::vector<T>> weight;
  std::vector<std::vector<T>> bias;

  void add(const Gradients& o, T scale = T(1)) {
    for (std::size_t l = 0; l < weight.size(); ++l) {
      for (std::size_t i = 0; i < weight[l].size(); ++i) weight[l][i] += scale * o.weight[l][i];
      for (std::size_t i = 0; i < bias[l].size(); ++i) bias[l][i] += scale * o.bias[l][i];
    }
  }
};

/// Intermediate activations kept for the backward pass.
template <typename T>
struct ForwardCache {
  Tensor<T> input;
  std::vector<Tensor<T>> pre;   // pre-activation per conv layer (head excluded)
  std::vector<Tensor<T>> act;   // layer inputs (post upsample for decoders)
  std::vector<std::vector<T>> cols;
  std::vector<Tensor<T>> stage; // e0, e1, e2, e3, d2, d1, d0
};

template <typename T>
struct ForwardResult {
  Tensor<T> features;  // F(x): width0 x H x W
  Tensor<T> scores;    // S(x): (1 + |C_{1:t}|) x H x W, pre-softmax
};

template <typename T>
struct SegModel {
  ArchConfig arch;
  std::vector<Conv2d<T>> layers;
  /// Number of foreground classes per learned step; sum + 1 == head channels.
  std::vector<int> class_inventory;

  int num_classes() const { return layers[kHead].out; }
  int feature_channels() const { return arch.width0; }

  std::size_t num_parameters() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g;
    for (const auto& l : layers) {
      g.weight.emplace_back(l.weight.size(), T(0));
      g.bias.emplace_back(l.bias.size(), T(0));
    }
    return g;
  }

  template <typename U>
  SegModel<U> cast() const {
    SegModel<U> m;
    m.arch = arch;
    m.class_inventory = class_inventory;
    for (const auto& l : layers) {
      Conv2d<U> c(l.in, l.out, l.kernel, l.stride);
      for (std::size_t i = 0; i < l.weight.size(); ++i) c.weight[i] = static_cast<U>(l.weight[i]);
      for (std::size_t i = 0; i < l.bias.size(); ++i) c.bias[i] = static_cast<U>(l.bias[i]);
      m.layers.push_back(std::move(c));
    }
    return m;
  }

  bool operator==(const SegModel&) const = default;
};

/// He-normal initialised model with a head over 1 + initial_classes channels.
template <typename T>
SegModel<T> make_model(const ArchConfig& arch, int initial_classes, std::uint64_t seed) {
  if (initial_classes < 1) throw ValidationError("make_model: need at least one foreground class");
  SegModel<T> m;
  m.arch = arch;
  m.class_inventory = {initial_classes};
  const int c0 = arch.width0, c1 = arch.width1, c2 = arch.width2;
  m.layers = {Conv2d<T>(arch.in_channels, c0, 3, 1), Conv2d<T>(c0, c1, 3, 2), Conv2d<T>(c1, c2, 3, 2),
              Conv2d<T>(c2, c2, 3, 2),                Conv2d<T>(c2, c2, 3, 1), Conv2d<T>(c2, c1, 3, 1),
              Conv2d<T>(c1, c0, 3, 1),                Conv2d<T>(c0, 1 + initial_classes, 1, 1)};
  std::mt19937_64 rng(seed);
  for (auto& l : m.layers) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(l.patch())));
    for (auto& w : l.weight) w = static_cast<T>(dist(rng));
  }
  return m;
}

template <typename T>
ForwardResult<T> forward(const SegModel<T>& model, const Tensor<T>& image, ForwardCache<T>* cache = nullptr) {
  if (image.channels != model.arch.in_channels)
    throw ShapeError("forward: image has " + std::to_string(image.channels) + " channels, model expects " +
                     std::to_string(model.arch.in_channels));
  if (image.height != model.arch.height || image.width != model.arch.width)
    throw ShapeError("forward: image is " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                     ", model expects " + std::to_string(model.arch.height) + "x" + std::to_string(model.arch.width));
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.input = image;
  c.pre.assign(kHead, {});
  c.act.assign(kNumLayers, {});
  c.cols.assign(kNumLayers, {});
  c.stage.assign(7, {});

  auto conv_relu = [&](int l, const Tensor<T>& in) {
    c.act[l] = in;
    c.pre[l] = model.layers[l].forward(in, c.cols[l]);
    return detail::relu(c.pre[l]);
  };
  c.stage[0] = conv_relu(kEnc0, image);
  c.stage[1] = conv_relu(kEnc1, c.stage[0]);
  c.stage[2] = conv_relu(kEnc2, c.stage[1]);
  c.stage[3] = conv_relu(kEnc3, c.stage[2]);
  auto decode = [&](int l, const Tensor<T>& deep, const Tensor<T>& skip) {
    Tensor<T> d = conv_relu(l, detail::upsample(deep, skip.height, skip.width));
    detail::add_inplace(d, skip);
    return d;
  };
  c.stage[4] = decode(kDec2, c.stage[3], c.stage[2]);
  c.stage[5] = decode(kDec1, c.stage[4], c.stage[1]);
  c.stage[6] = decode(kDec0, c.stage[5], c.stage[0]);
  c.act[kHead] = c.stage[6];

  ForwardResult<T> r;
  r.scores = model.layers[kHead].forward(c.stage[6], c.cols[kHead]);
  r.features = c.stage[6];
  if (!cache) c = ForwardCache<T>{};
  return r;
}

/// Backpropagates dL/dS and dL/dF (either may be empty) into `grads`.
template <typename T>
void backward(const SegModel<T>& model, const ForwardCache<T>& c, const Tensor<T>& d_scores,
              const Tensor<T>& d_features, Gradients<T>& grads) {
  auto layer_backward = [&](int l, const Tensor<T>& dy, bool want_input) {
    return model.layers[l].backward(c.act[l], c.cols[l], dy, grads.weight[l], grads.bias[l], want_input);
  };
  Tensor<T> dd0(c.stage[6].channels, c.stage[6].height, c.stage[6].width);
  if (!d_scores.data.empty()) dd0 = layer_backward(kHead, d_scores, true);
  if (!d_features.data.empty()) detail::add_inplace(dd0, d_features);

  // Decoder: each stage is relu(conv(up(deep))) + skip.
  auto decode_back = [&](int l, const Tensor<T>& dd, Tensor<T>& dskip, const Tensor<T>& deep) {
    detail::add_inplace(dskip, dd);
    Tensor<T> dz = dd;
    detail::relu_backward_inplace(c.pre[l], dz);
    Tensor<T> dup = layer_backward(l, dz, true);
    return detail::upsample_backward(dup, deep.height, deep.width);
  };
  Tensor<T> de0(c.stage[0].channels, c.stage[0].height, c.stage[0].width);
  Tensor<T> de1(c.stage[1].channels, c.stage[1].height, c.stage[1].width);
  Tensor<T> de2(c.stage[2].channels, c.stage[2].height, c.stage[2].width);
  Tensor<T> dd1 = decode_back(kDec0, dd0, de0, c.stage[5]);
  Tensor<T> dd2 = decode_back(kDec1, dd1, de1, c.stage[4]);
  Tensor<T> de3 = decode_back(kDec2, dd2, de2, c.stage[3]);

  auto enc_back = [&](int l, Tensor<T> da, bool want_input) {
    detail::relu_backward_inplace(c.pre[l], da);
    return layer_backward(l, da, want_input);
  };
  detail::add_inplace(de2, enc_back(kEnc3, de3, true));
  detail::add_inplace(de1, enc_back(kEnc2, de2, true));
  detail::add_inplace(de0, enc_back(kEnc1, de1, true));
  enc_back(kEnc0, de0, false);
}

/// Per-pixel softmax over the channel axis.
template <typename T>
Tensor<T> softmax_scores(const Tensor<T>& s) {
  Tensor<T> p(s.channels, s.height, s.width);
  const std::size_t n = s.plane();
  for (std::size_t i = 0; i < n; ++i) {
    T m = s.data[i];
    for (int c = 1; c < s.channels; ++c) m = std::max(m, s.data[c * n + i]);
    T z = 0;
    for (int c = 0; c < s.channels; ++c) {
      const T e = std::exp(s.data[c * n + i] - m);
      p.data[c * n + i] = e;
      z += e;
    }
    for (int c = 0; c < s.channels; ++c) p.data[c * n + i] /= z;
  }
  return p;
}

/// Pooled descriptor: H row-means (over width) followed by W column-means
/// (over height); shape (H + W) x C, stored row-major.
template <typename T>
RowMatrix<T> phi_pool(const Tensor<T>& f) {
  RowMatrix<T> d = RowMatrix<T>::Zero(f.height + f.width, f.channels);
  for (int c = 0; c < f.channels; ++c)
    for (int y = 0; y < f.height; ++y)
      for (int x = 0; x < f.width; ++x) {
        const T v = f.at(c, y, x);
        d(y, c) += v;
        d(f.height + x, c) += v;
      }
  for (int y = 0; y < f.height; ++y) d.row(y) /= static_cast<T>(f.width);
  for (int x = 0; x < f.width; ++x) d.row(f.height + x) /= static_cast<T>(f.height);
  return d;
}

/// Adds `new_classes` head channels: zero weights, bias copied from background.
template <typename T>
SegModel<T> extend_head(const SegModel<T>& model, int new_classes) {
  if (new_classes < 0) throw ValidationError("extend_head: negative class count");
  if (new_classes == 0) return model;
  SegModel<T> m = model;
  Conv2d<T>& head = m.layers[kHead];
  const std::size_t row = head.patch();
  const T bg_bias = head.bias[0];
  head.out += new_classes;
  head.weight.resize(static_cast<std::size_t>(head.out) * row, T(0));
  head.bias.resize(head.out, bg_bias);
  m.class_inventory.push_back(new_classes);
  return m;
}

/// Per-pixel argmax and maximum probability.
template <typename T>
std::pair<Mask, std::vector<T>> argmax_labels(const Tensor<T>& prob) {
  Mask labels(prob.height, prob.width);
  std::vector<T> conf(prob.plane());
  const std::size_t n = prob.plane();
  for (std::size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < prob.channels; ++c)
      if (prob.data[c * n + i] > prob.data[best * n + i]) best = c;
    labels.data[i] = static_cast<std::uint8_t>(best);
    conf[i] = prob.data[best * n + i];
  }
  return {labels, conf};
}

/// Argmax of the model's scores.
template <typename T>
Mask predict_labels(const SegModel<T>& model, const Tensor<T>& image) {
  return argmax_labels(softmax_scores(forward(model, image).scores)).first;
}

}  // namespace rbc

// include/asdl/nn.hpp
//
// Copyright 2026 The ASDL Toolkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//  http://www.apache.org/licenses/LICENSE-2.0
//
// THIS CODE IS PROVIDED *AS IS* BASIS, WITHOUT WARRANTIES OR CONDITIONS OF ANY
// KIND, EITHER EXPRESS OR IMPLIED, INCLUDING WITHOUT LIMITATION ANY IMPLIED
// WARRANTIES OR CONDITIONS OF TITLE, FITNESS FOR A PARTICULAR PURPOSE,
// MERCHANTABLITY OR NON-INFRINGEMENT.
// See the Apache 2 License for the specific language governing permissions and
// limitations under the License.
//
// The student network: four conv blocks (conv3x3-BN-ReLU twice, then 2x2
// average pooling), frequency average pooling, an optional two-layer biGRU,
// and two fully connected layers with the camera one-hot concatenated in
// between, ending in sigmoids for (x, C) per output frame. Forward and
// reverse passes are written out by hand; everything is templated on the
// scalar so gradient checks can run in double while training runs in float.
//
// Feature maps are row-major (channels x B*T*F) with column index
// b*T*F + t*F + f. Sequences are per-timestep (dim x batch) matrices.

#pragma once

#include <array>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/QR>

#include "asdl/common.hpp"
#include "asdl/labels.hpp"

namespace asdl {

template <class S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

enum class ModelVariant { CnnF, Cnn, Crnn };

inline std::string to_string(ModelVariant v) {
  switch (v) {
    case ModelVariant::CnnF: return "cnn-f";
    case ModelVariant::Cnn: return "cnn";
    case ModelVariant::Crnn: return "crnn";
  }
  return "?";
}

inline ModelVariant model_variant_from_string(const std::string& s) {
  if (s == "cnn-f" || s == "CNN-F") return ModelVariant::CnnF;
  if (s == "cnn" || s == "CNN") return ModelVariant::Cnn;
  if (s == "crnn" || s == "CRNN") return ModelVariant::Crnn;
  throw ConfigError("unknown model variant '" + s + "' (expected cnn-f|cnn|crnn)");
}

struct CrnnConfig {
  ModelVariant variant = ModelVariant::Crnn;
  std::array<int, 4> conv_channels = {16, 32, 64, 128};
  int gru_hidden = 64;
  int gru_layers = 2;
  int fc1_dim = 64;
  int n_views = 11;
  int in_channels = 16;
  int t_in = 960;
  int f_in = 64;
  int cnnf_window = 80;  // 167 ms of STFT frames processed at a time

  int t_out() const { return t_in / 16; }

  void validate() const {
    if (t_in % 16 != 0 || f_in % 16 != 0)
      throw ConfigError("model: T_in and F_in must be divisible by 16");
    if (variant == ModelVariant::CnnF &&
        (t_in % cnnf_window != 0 || cnnf_window % 16 != 0))
      throw ConfigError("model: CNN-F window must divide T_in and be divisible by 16");
    if (gru_layers < 1 || gru_hidden < 1 || fc1_dim < 1)
      throw ConfigError("model: non-positive layer sizes");
  }

  /// Width of the feature map entering FC1.
  int fc_input_dim() const {
    return variant == ModelVariant::Crnn ? 2 * gru_hidden : conv_channels[3];
  }
};

// ---------------------------------------------------------------------------
// Parameters

template <class S>
struct ConvLayer {
  MatR<S> W;  // out_ch x (in_ch * 9)
  VecX<S> b;
};

template <class S>
struct BnLayer {
  VecX<S> gamma, beta;
  VecX<S> run_mean, run_var;
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;
};

template <class S>
struct DenseLayer {
  MatR<S> W;
  VecX<S> b;
};

template <class S>
struct GruDir {
  MatR<S> Wi;  // 3H x I, gate rows ordered (reset, update, candidate)
  MatR<S> Wh;  // 3H x H
  VecX<S> bi, bh;
};

template <class S>
struct GruLayer {
  GruDir<S> fwd, bwd;
};

template <class S>
struct TensorRef {
  std::string name;
  S* data;
  long size;
  bool trainable;
};

template <class S>
struct CrnnParams {
  std::array<ConvLayer<S>, 8> convs;
  std::array<BnLayer<S>, 8> bns;
  std::vector<GruLayer<S>> grus;
  DenseLayer<S> fc1, fc2;

  std::vector<TensorRef<S>> registry() {
    std::vector<TensorRef<S>> out;
    auto add = [&](const std::string& name, auto& m, bool trainable) {
      out.push_back({name, m.data(), long(m.size()), trainable});
    };
    for (int i = 0; i < 8; ++i) {
      const std::string p = "conv" + std::to_string(i);
      add(p + ".W", convs[size_t(i)].W, true);
      add(p + ".b", convs[size_t(i)].b, true);
      const std::string q = "bn" + std::to_string(i);
      add(q + ".gamma", bns[size_t(i)].gamma, true);
      add(q + ".beta", bns[size_t(i)].beta, true);
      add(q + ".run_mean", bns[size_t(i)].run_mean, false);
      add(q + ".run_var", bns[size_t(i)].run_var, false);
    }
    for (size_t l = 0; l < grus.size(); ++l) {
      for (auto [dir, tag] : {std::pair<GruDir<S>*, const char*>{&grus[l].fwd, "fwd"},
                              {&grus[l].bwd, "bwd"}}) {
        const std::string p = "gru" + std::to_string(l) + "." + tag;
        add(p + ".Wi", dir->Wi, true);
        add(p + ".Wh", dir->Wh, true);
        add(p + ".bi", dir->bi, true);
        add(p + ".bh", dir->bh, true);
      }
    }
    add("fc1.W", fc1.W, true);
    add("fc1.b", fc1.b, true);
    add("fc2.W", fc2.W, true);
    add("fc2.b", fc2.b, true);
    return out;
  }

  bool all_finite() {
    for (const auto& r : registry())
      for (long i = 0; i < r.size; ++i)
        if (!std::isfinite(double(r.data[i]))) return false;
    return true;
  }

  template <class T>
  CrnnParams<T> cast() const {
    CrnnParams<T> out;
    for (int i = 0; i < 8; ++i) {
      out.convs[size_t(i)].W = convs[size_t(i)].W.template cast<T>();
      out.convs[size_t(i)].b = convs[size_t(i)].b.template cast<T>();
      out.bns[size_t(i)].gamma = bns[size_t(i)].gamma.template cast<T>();
      out.bns[size_t(i)].beta = bns[size_t(i)].beta.template cast<T>();
      out.bns[size_t(i)].run_mean = bns[size_t(i)].run_mean.template cast<T>();
      out.bns[size_t(i)].run_var = bns[size_t(i)].run_var.template cast<T>();
    }
    out.grus.resize(grus.size());
    for (size_t l = 0; l < grus.size(); ++l) {
      for (auto [src, dst] : {std::pair<const GruDir<S>*, GruDir<T>*>{&grus[l].fwd, &out.grus[l].fwd},
                              {&grus[l].bwd, &out.grus[l].bwd}}) {
        dst->Wi = src->Wi.template cast<T>();
        dst->Wh = src->Wh.template cast<T>();
        dst->bi = src->bi.template cast<T>();
        dst->bh = src->bh.template cast<T>();
      }
    }
    out.fc1.W = fc1.W.template cast<T>();
    out.fc1.b = fc1.b.template cast<T>();
    out.fc2.W = fc2.W.template cast<T>();
    out.fc2.b = fc2.b.template cast<T>();
    return out;
  }
};

namespace nn_detail {

template <class S>
MatR<S> kaiming_uniform(long rows, long cols, long fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / double(fan_in));
  MatR<S> m(rows, cols);
  for (long r = 0; r < rows; ++r)
    for (long c = 0; c < cols; ++c) m(r, c) = S(rng.uniform(-bound, bound));
  return m;
}

/// Orthogonal H x H matrix from the QR decomposition of a Gaussian draw,
/// signs fixed by the diagonal of R so the result is unique per seed.
template <class S>
MatR<S> orthogonal(long n, Rng& rng) {
  Eigen::MatrixXd g(n, n);
  for (long r = 0; r < n; ++r)
    for (long c = 0; c < n; ++c) g(r, c) = rng.gaussian();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(n, n);
  const Eigen::MatrixXd r = qr.matrixQR().template triangularView<Eigen::Upper>();
  for (long c = 0; c < n; ++c)
    if (r(c, c) < 0) q.col(c) = -q.col(c);
  return q.cast<S>();
}

template <class S>
GruDir<S> init_gru_dir(int input, int hidden, Rng& rng) {
  GruDir<S> d;
  const double bound = std::sqrt(1.0 / double(hidden));
  d.Wi.resize(3 * hidden, input);
  for (long r = 0; r < d.Wi.rows(); ++r)
    for (long c = 0; c < d.Wi.cols(); ++c) d.Wi(r, c) = S(rng.uniform(-bound, bound));
  d.Wh.resize(3 * hidden, hidden);
  for (int gate = 0; gate < 3; ++gate)
    d.Wh.block(gate * hidden, 0, hidden, hidden) = orthogonal<S>(hidden, rng);
  d.bi = VecX<S>::Zero(3 * hidden);
  d.bh = VecX<S>::Zero(3 * hidden);
  return d;
}

}  // namespace nn_detail

/// Kaiming-uniform conv/FC weights, orthogonal GRU recurrent matrices, zero
/// biases, identity batch norm. Deterministic per seed.
template <class S>
CrnnParams<S> init_crnn_params(const CrnnConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(derive_seed(seed, 0x63726e6eULL));
  CrnnParams<S> p;
  int in_ch = cfg.in_channels;
  for (int block = 0; block < 4; ++block) {
    const int out_ch = cfg.conv_channels[size_t(block)];
    for (int j = 0; j < 2; ++j) {
      const int idx = block * 2 + j;
      const int cin = j == 0 ? in_ch : out_ch;
      p.convs[size_t(idx)].W =
          nn_detail::kaiming_uniform<S>(out_ch, cin * 9, long(cin) * 9, rng);
      p.convs[size_t(idx)].b = VecX<S>::Zero(out_ch);
      p.bns[size_t(idx)].gamma = VecX<S>::Ones(out_ch);
      p.bns[size_t(idx)].beta = VecX<S>::Zero(out_ch);
      p.bns[size_t(idx)].run_mean = VecX<S>::Zero(out_ch);
      p.bns[size_t(idx)].run_var = VecX<S>::Ones(out_ch);
    }
    in_ch = out_ch;
  }
  if (cfg.variant == ModelVariant::Crnn) {
    p.grus.resize(size_t(cfg.gru_layers));
    int gru_in = cfg.conv_channels[3];
    for (auto& layer : p.grus) {
      layer.fwd = nn_detail::init_gru_dir<S>(gru_in, cfg.gru_hidden, rng);
      layer.bwd = nn_detail::init_gru_dir<S>(gru_in, cfg.gru_hidden, rng);
      gru_in = 2 * cfg.gru_hidden;
    }
  }
  p.fc1.W = nn_detail::kaiming_uniform<S>(cfg.fc1_dim, cfg.fc_input_dim(),
                                          cfg.fc_input_dim(), rng);
  p.fc1.b = VecX<S>::Zero(cfg.fc1_dim);
  p.fc2.W = nn_detail::kaiming_uniform<S>(2, cfg.fc1_dim + cfg.n_views,
                                          cfg.fc1_dim + cfg.n_views, rng);
  p.fc2.b = VecX<S>::Zero(2);
  return p;
}

/// Zero-valued gradient holder with the same shapes as the parameters.
template <class S>
CrnnParams<S> zero_like(CrnnParams<S>& p) {
  CrnnParams<S> z = p.template cast<S>();
  for (auto& r : z.registry())
    for (long i = 0; i < r.size; ++i) r.data[i] = S(0);
  return z;
}

// ---------------------------------------------------------------------------
// im2col / col2im for 3x3 same-padding convolution

namespace nn_detail {

template <class S>
void im2col3x3(const MatR<S>& x, int B, int T, int F, MatR<S>& col) {
  const int C = int(x.rows());
  col.resize(long(C) * 9, x.cols());
  col.setZero();
  for (int c = 0; c < C; ++c) {
    const S* src_row = x.data() + size_t(c) * size_t(x.cols());
    for (int k = 0; k < 9; ++k) {
      const int dt = k / 3 - 1, df = k % 3 - 1;
      S* dst_row = col.data() + (size_t(c) * 9 + size_t(k)) * size_t(col.cols());
      for (int b = 0; b < B; ++b) {
        const size_t base = size_t(b) * size_t(T) * size_t(F);
        for (int t = 0; t < T; ++t) {
          const int ts = t + dt;
          if (ts < 0 || ts >= T) continue;
          const int f0 = std::max(0, -df), f1 = std::min(F, F - df);
          if (f1 <= f0) continue;
          std::copy(src_row + base + size_t(ts) * size_t(F) + size_t(f0 + df),
                    src_row + base + size_t(ts) * size_t(F) + size_t(f1 + df),
                    dst_row + base + size_t(t) * size_t(F) + size_t(f0));
        }
      }
    }
  }
}

template <class S>
void col2im3x3(const MatR<S>& dcol, int B, int T, int F, MatR<S>& dx) {
  const int C = int(dcol.rows() / 9);
  dx.resize(C, dcol.cols());
  dx.setZero();
  for (int c = 0; c < C; ++c) {
    S* dst_row = dx.data() + size_t(c) * size_t(dx.cols());
    for (int k = 0; k < 9; ++k) {
      const int dt = k / 3 - 1, df = k % 3 - 1;
      const S* src_row = dcol.data() + (size_t(c) * 9 + size_t(k)) * size_t(dcol.cols());
      for (int b = 0; b < B; ++b) {
        const size_t base = size_t(b) * size_t(T) * size_t(F);
        for (int t = 0; t < T; ++t) {
          const int ts = t + dt;
          if (ts < 0 || ts >= T) continue;
          const int f0 = std::max(0, -df), f1 = std::min(F, F - df);
          for (int f = f0; f < f1; ++f)
            dst_row[base + size_t(ts) * size_t(F) + size_t(f + df)] +=
                src_row[base + size_t(t) * size_t(F) + size_t(f)];
        }
      }
    }
  }
}

}  // namespace nn_detail

// ---------------------------------------------------------------------------
// Forward cache

template <class S>
struct BnCache {
  VecX<S> mean, inv_std;
  MatR<S> xhat;
  bool used_batch_stats = true;
};

template <class S>
struct BlockCache {
  MatR<S> conv_in[2];
  BnCache<S> bn[2];
  MatR<S> relu_out[2];
  int T = 0, F = 0;  // spatial size entering the block
};

template <class S>
struct GruDirCache {
  std::vector<MatR<S>> r, z, g, ghn, h_prev;  // H x B per timestep
};

template <class S>
struct GruLayerCache {
  std::vector<MatR<S>> input;  // I x B per timestep
  GruDirCache<S> fwd, bwd;
};

template <class S>
struct ForwardCache {
  int n_samples = 0;
  int B = 0, T = 0, F = 0;  // effective after the CNN-F reshape
  std::array<BlockCache<S>, 4> blocks;
  MatR<S> trunk_out;    // C4 x (B*T4*F4)
  MatR<S> freq_pooled;  // C4 x (B*T4)
  std::vector<GruLayerCache<S>> grus;
  std::vector<MatR<S>> gru_out;  // 2H x B per timestep (last layer)
  MatR<S> fc_in;        // D x (n*T_out)
  MatR<S> fc1_act;      // fc1_dim x N, post-ReLU
  MatR<S> fc2_in;       // (fc1_dim + views) x N
  MatR<S> pred;         // 2 x N, post-sigmoid
};

// ---------------------------------------------------------------------------
// Layer forward/backward pieces

namespace nn_detail {

template <class S>
void batchnorm_forward(const BnLayer<S>& bn, MatR<S>& x, bool use_batch_stats,
                       bool update_running, BnLayer<S>* mutable_bn, BnCache<S>* cache) {
  const long C = x.rows();
  const long N = x.cols();
  VecX<S> mean(C), var(C);
  if (use_batch_stats) {
    for (long c = 0; c < C; ++c) {
      const S* row = x.data() + size_t(c) * size_t(N);
      S acc = S(0);
      for (long i = 0; i < N; ++i) acc += row[i];
      mean(c) = acc / S(N);
      S vacc = S(0);
      for (long i = 0; i < N; ++i) {
        const S d = row[i] - mean(c);
        vacc += d * d;
      }
      var(c) = vacc / S(N);
    }
    if (update_running && mutable_bn) {
      const S m = S(BnLayer<S>::kMomentum);
      mutable_bn->run_mean = (S(1) - m) * mutable_bn->run_mean + m * mean;
      mutable_bn->run_var = (S(1) - m) * mutable_bn->run_var + m * var;
    }
  } else {
    mean = bn.run_mean;
    var = bn.run_var;
  }
  VecX<S> inv_std(C);
  for (long c = 0; c < C; ++c) inv_std(c) = S(1) / std::sqrt(var(c) + S(BnLayer<S>::kEps));
  if (cache) {
    cache->mean = mean;
    cache->inv_std = inv_std;
    cache->used_batch_stats = use_batch_stats;
    cache->xhat.resize(C, N);
  }
  for (long c = 0; c < C; ++c) {
    S* row = x.data() + size_t(c) * size_t(N);
    S* xh = cache ? cache->xhat.data() + size_t(c) * size_t(N) : nullptr;
    const S mu = mean(c), is = inv_std(c), g = bn.gamma(c), be = bn.beta(c);
    for (long i = 0; i < N; ++i) {
      const S xhat = (row[i] - mu) * is;
      if (xh) xh[i] = xhat;
      row[i] = g * xhat + be;
    }
  }
}

template <class S>
void batchnorm_backward(const BnLayer<S>& bn, const BnCache<S>& cache, const MatR<S>& dy,
                        MatR<S>& dx, BnLayer<S>& grad) {
  const long C = dy.rows();
  const long N = dy.cols();
  dx.resize(C, N);
  for (long c = 0; c < C; ++c) {
    const S* dyr = dy.data() + size_t(c) * size_t(N);
    const S* xh = cache.xhat.data() + size_t(c) * size_t(N);
    S* dxr = dx.data() + size_t(c) * size_t(N);
    S sum_dy = S(0), sum_dy_xhat = S(0);
    for (long i = 0; i < N; ++i) {
      sum_dy += dyr[i];
      sum_dy_xhat += dyr[i] * xh[i];
    }
    grad.beta(c) += sum_dy;
    grad.gamma(c) += sum_dy_xhat;
    const S g = bn.gamma(c), is = cache.inv_std(c);
    if (cache.used_batch_stats) {
      const S invN = S(1) / S(N);
      for (long i = 0; i < N; ++i)
        dxr[i] = g * is * (dyr[i] - invN * sum_dy - xh[i] * invN * sum_dy_xhat);
    } else {
      for (long i = 0; i < N; ++i) dxr[i] = g * is * dyr[i];
    }
  }
}

template <class S>
void avgpool2_forward(const MatR<S>& x, int B, int T, int F, MatR<S>& y) {
  const long C = x.rows();
  const int T2 = T / 2, F2 = F / 2;
  y.resize(C, long(B) * T2 * F2);
  for (long c = 0; c < C; ++c) {
    const S* src = x.data() + size_t(c) * size_t(x.cols());
    S* dst = y.data() + size_t(c) * size_t(y.cols());
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < T2; ++t) {
        const S* r0 = src + size_t(b) * size_t(T) * size_t(F) + size_t(2 * t) * size_t(F);
        const S* r1 = r0 + F;
        S* out = dst + size_t(b) * size_t(T2) * size_t(F2) + size_t(t) * size_t(F2);
        for (int f = 0; f < F2; ++f)
          out[f] = S(0.25) * (r0[2 * f] + r0[2 * f + 1] + r1[2 * f] + r1[2 * f + 1]);
      }
  }
}

template <class S>
void avgpool2_backward(const MatR<S>& dy, int B, int T, int F, MatR<S>& dx) {
  const long C = dy.rows();
  const int T2 = T / 2, F2 = F / 2;
  dx.resize(C, long(B) * T * F);
  dx.setZero();
  for (long c = 0; c < C; ++c) {
    const S* src = dy.data() + size_t(c) * size_t(dy.cols());
    S* dst = dx.data() + size_t(c) * size_t(dx.cols());
    for (int b = 0; b < B; ++b)
      for (int t = 0; t < T2; ++t) {
        S* r0 = dst + size_t(b) * size_t(T) * size_t(F) + size_t(2 * t) * size_t(F);
        S* r1 = r0 + F;
        const S* g = src + size_t(b) * size_t(T2) * size_t(F2) + size_t(t) * size_t(F2);
        for (int f = 0; f < F2; ++f) {
          const S v = S(0.25) * g[f];
          r0[2 * f] += v;
          r0[2 * f + 1] += v;
          r1[2 * f] += v;
          r1[2 * f + 1] += v;
        }
      }
  }
}

template <class S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

/// One GRU direction over the timestep sequence; `reverse` runs t from the
/// end. Gates follow the reset/update/candidate convention:
///   r = s(Wi_r x + bi_r + Wh_r h + bh_r)
///   z = s(Wi_z x + bi_z + Wh_z h + bh_z)
///   g = tanh(Wi_n x + bi_n + r (Wh_n h + bh_n))
///   h' = (1 - z) g + z h
template <class S>
void gru_dir_forward(const GruDir<S>& d, const std::vector<MatR<S>>& xs, bool reverse,
                     std::vector<MatR<S>>& hs, GruDirCache<S>* cache) {
  const int T = int(xs.size());
  const int B = int(xs[0].cols());
  const int H = int(d.Wh.cols());
  MatR<S> h = MatR<S>::Zero(H, B);
  hs.assign(size_t(T), MatR<S>());
  if (cache) {
    cache->r.assign(size_t(T), MatR<S>());
    cache->z.assign(size_t(T), MatR<S>());
    cache->g.assign(size_t(T), MatR<S>());
    cache->ghn.assign(size_t(T), MatR<S>());
    cache->h_prev.assign(size_t(T), MatR<S>());
  }
  for (int step = 0; step < T; ++step) {
    const int t = reverse ? T - 1 - step : step;
    MatR<S> gi = d.Wi * xs[size_t(t)];
    gi.colwise() += d.bi;
    MatR<S> gh = d.Wh * h;
    gh.colwise() += d.bh;
    MatR<S> r(H, B), z(H, B), g(H, B), hn(H, B);
    for (int i = 0; i < H; ++i)
      for (int bcol = 0; bcol < B; ++bcol) {
        r(i, bcol) = sigmoid(gi(i, bcol) + gh(i, bcol));
        z(i, bcol) = sigmoid(gi(H + i, bcol) + gh(H + i, bcol));
        const S ghn = gh(2 * H + i, bcol);
        g(i, bcol) = std::tanh(gi(2 * H + i, bcol) + r(i, bcol) * ghn);
        hn(i, bcol) = (S(1) - z(i, bcol)) * g(i, bcol) + z(i, bcol) * h(i, bcol);
      }
    if (cache) {
      cache->r[size_t(t)] = r;
      cache->z[size_t(t)] = z;
      cache->g[size_t(t)] = g;
      cache->ghn[size_t(t)] = gh.block(2 * H, 0, H, B);
      cache->h_prev[size_t(t)] = h;
    }
    h = hn;
    hs[size_t(t)] = h;
  }
}

/// Reverse pass for one direction. `dhs` holds the output gradients per
/// timestep; `dxs` accumulates input gradients (+=).
template <class S>
void gru_dir_backward(const GruDir<S>& d, const std::vector<MatR<S>>& xs,
                      const GruDirCache<S>& cache, const std::vector<MatR<S>>& dhs,
                      bool reverse, std::vector<MatR<S>>& dxs, GruDir<S>& grad) {
  const int T = int(xs.size());
  const int B = int(xs[0].cols());
  const int H = int(d.Wh.cols());
  MatR<S> dh = MatR<S>::Zero(H, B);
  for (int step = T - 1; step >= 0; --step) {
    const int t = reverse ? T - 1 - step : step;
    dh += dhs[size_t(t)];
    const MatR<S>& r = cache.r[size_t(t)];
    const MatR<S>& z = cache.z[size_t(t)];
    const MatR<S>& g = cache.g[size_t(t)];
    const MatR<S>& ghn = cache.ghn[size_t(t)];
    const MatR<S>& h_prev = cache.h_prev[size_t(t)];

    MatR<S> dgi(3 * H, B), dgh(3 * H, B);
    MatR<S> dh_next(H, B);
    for (int i = 0; i < H; ++i)
      for (int bcol = 0; bcol < B; ++bcol) {
        const S dhv = dh(i, bcol);
        const S zv = z(i, bcol), gv = g(i, bcol), rv = r(i, bcol);
        const S dz = dhv * (h_prev(i, bcol) - gv);
        const S dg = dhv * (S(1) - zv);
        const S dag = dg * (S(1) - gv * gv);
        const S dr = dag * ghn(i, bcol);
        const S dar = dr * rv * (S(1) - rv);
        const S daz = dz * zv * (S(1) - zv);
        dgi(i, bcol) = dar;
        dgi(H + i, bcol) = daz;
        dgi(2 * H + i, bcol) = dag;
        dgh(i, bcol) = dar;
        dgh(H + i, bcol) = daz;
        dgh(2 * H + i, bcol) = dag * rv;
        dh_next(i, bcol) = dhv * zv;
      }
    grad.Wi += dgi * xs[size_t(t)].transpose();
    grad.Wh += dgh * h_prev.transpose();
    grad.bi += dgi.rowwise().sum();
    grad.bh += dgh.rowwise().sum();
    dxs[size_t(t)] += d.Wi.transpose() * dgi;
    dh = d.Wh.transpose() * dgh + dh_next;
  }
}

}  // namespace nn_detail

// ---------------------------------------------------------------------------
// Full network forward

struct BnMode {
  bool use_batch_stats = false;  // true during training
  bool update_running = false;
};

/// Forward pass. `input` is in_channels x (n_samples * t_in * f_in);
/// `view_ids` holds one camera index per sample. Returns 2 x
/// (n_samples * t_out) sigmoided predictions, row 0 the position and row 1
/// the confidence, column s * t_out + t.
template <class S>
MatR<S> crnn_forward(CrnnParams<S>& params, const CrnnConfig& cfg, const MatR<S>& input,
                     std::span<const int> view_ids, const BnMode& bn_mode,
                     ForwardCache<S>* cache = nullptr) {
  cfg.validate();
  const int n = int(view_ids.size());
  if (input.rows() != cfg.in_channels ||
      input.cols() != long(n) * cfg.t_in * cfg.f_in)
    throw std::invalid_argument("crnn_forward: input shape mismatch");
  for (int v : view_ids)
    if (v < 0 || v >= cfg.n_views)
      throw std::invalid_argument("crnn_forward: view index out of range");

  // CNN-F processes short windows independently: fold windows into the batch.
  int B = n, T = cfg.t_in;
  if (cfg.variant == ModelVariant::CnnF) {
    B = n * (cfg.t_in / cfg.cnnf_window);
    T = cfg.cnnf_window;
  }
  const int F0 = cfg.f_in;

  ForwardCache<S> local;
  ForwardCache<S>& cc = cache ? *cache : local;
  cc.n_samples = n;
  cc.B = B;
  cc.T = T;
  cc.F = F0;

  MatR<S> x = input;
  int t = T, f = F0;
  MatR<S> col;
  for (int block = 0; block < 4; ++block) {
    auto& bc = cc.blocks[size_t(block)];
    bc.T = t;
    bc.F = f;
    for (int j = 0; j < 2; ++j) {
      const int idx = block * 2 + j;
      bc.conv_in[j] = x;
      nn_detail::im2col3x3(x, B, t, f, col);
      MatR<S> y = params.convs[size_t(idx)].W * col;
      y.colwise() += params.convs[size_t(idx)].b;
      nn_detail::batchnorm_forward(params.bns[size_t(idx)], y, bn_mode.use_batch_stats,
                                   bn_mode.update_running, &params.bns[size_t(idx)],
                                   cache ? &bc.bn[j] : nullptr);
      y = y.cwiseMax(S(0));
      bc.relu_out[j] = y;
      x = std::move(y);
    }
    MatR<S> pooled;
    nn_detail::avgpool2_forward(x, B, t, f, pooled);
    x = std::move(pooled);
    t /= 2;
    f /= 2;
  }
  cc.trunk_out = x;

  // Frequency average pooling: C x (B*t*f) -> C x (B*t).
  const int C4 = cfg.conv_channels[3];
  MatR<S> pooled_f(C4, long(B) * t);
  for (int c = 0; c < C4; ++c) {
    const S* src = x.data() + size_t(c) * size_t(x.cols());
    S* dst = pooled_f.data() + size_t(c) * size_t(pooled_f.cols());
    for (long i = 0; i < long(B) * t; ++i) {
      S acc = S(0);
      for (int k = 0; k < f; ++k) acc += src[i * f + k];
      dst[i] = acc / S(f);
    }
  }
  cc.freq_pooled = pooled_f;

  const int T_out = cfg.t_out();
  MatR<S> fc_in;
  if (cfg.variant == ModelVariant::Crnn) {
    // Sequence of C4 x n matrices, one per output frame.
    std::vector<MatR<S>> seq(size_t(t), MatR<S>(C4, B));
    for (int tt = 0; tt < t; ++tt)
      for (int c = 0; c < C4; ++c)
        for (int b = 0; b < B; ++b) seq[size_t(tt)](c, b) = pooled_f(c, long(b) * t + tt);
    cc.grus.resize(params.grus.size());
    std::vector<MatR<S>> cur = std::move(seq);
    for (size_t l = 0; l < params.grus.size(); ++l) {
      auto& gc = cc.grus[l];
      gc.input = cur;
      std::vector<MatR<S>> hf, hb;
      nn_detail::gru_dir_forward(params.grus[l].fwd, gc.input, false, hf,
                                 cache ? &gc.fwd : nullptr);
      nn_detail::gru_dir_forward(params.grus[l].bwd, gc.input, true, hb,
                                 cache ? &gc.bwd : nullptr);
      const int H = cfg.gru_hidden;
      std::vector<MatR<S>> merged(size_t(t), MatR<S>(2 * H, B));
      for (int tt = 0; tt < t; ++tt) {
        merged[size_t(tt)].topRows(H) = hf[size_t(tt)];
        merged[size_t(tt)].bottomRows(H) = hb[size_t(tt)];
      }
      cur = std::move(merged);
    }
    cc.gru_out = cur;
    fc_in.resize(2 * cfg.gru_hidden, long(n) * T_out);
    for (int tt = 0; tt < t; ++tt)
      for (int b = 0; b < B; ++b)
        fc_in.col(long(b) * T_out + tt) = cc.gru_out[size_t(tt)].col(b);
  } else {
    // Columns b*t + tt already map to sample * T_out + frame, including the
    // CNN-F window fold (b = sample*windows + w, frame = w*t + tt).
    fc_in = pooled_f;
  }
  cc.fc_in = fc_in;

  MatR<S> a1 = params.fc1.W * fc_in;
  a1.colwise() += params.fc1.b;
  a1 = a1.cwiseMax(S(0));
  cc.fc1_act = a1;

  const long N = a1.cols();
  MatR<S> fc2_in = MatR<S>::Zero(cfg.fc1_dim + cfg.n_views, N);
  fc2_in.topRows(cfg.fc1_dim) = a1;
  for (long colidx = 0; colidx < N; ++colidx) {
    const int sample = int(colidx / T_out);
    fc2_in(cfg.fc1_dim + view_ids[size_t(sample)], colidx) = S(1);
  }
  cc.fc2_in = fc2_in;

  MatR<S> logits = params.fc2.W * fc2_in;
  logits.colwise() += params.fc2.b;
  MatR<S> pred(2, N);
  for (long i = 0; i < N; ++i) {
    pred(0, i) = nn_detail::sigmoid(logits(0, i));
    pred(1, i) = nn_detail::sigmoid(logits(1, i));
  }
  cc.pred = pred;
  return pred;
}

// ---------------------------------------------------------------------------
// Loss

/// Masked sum-squared error per frame, summed over frames and averaged over
/// the batch: L = mean_s sum_i [ mask_i (x_i - xhat_i)^2 + (C_i - Chat_i)^2 ].
template <class S>
S masked_loss(const MatR<S>& pred, std::span<const TrainingTarget> targets,
              MatR<S>* dpred = nullptr) {
  const int n = int(targets.size());
  if (n == 0) throw std::invalid_argument("masked_loss: no targets");
  const int T_out = targets[0].size();
  if (pred.cols() != long(n) * T_out || pred.rows() != 2)
    throw std::invalid_argument("masked_loss: prediction/target length mismatch");
  if (dpred) {
    dpred->resize(2, pred.cols());
    dpred->setZero();
  }
  S total = S(0);
  for (int s = 0; s < n; ++s) {
    if (targets[size_t(s)].size() != T_out)
      throw std::invalid_argument("masked_loss: ragged targets");
    for (int i = 0; i < T_out; ++i) {
      const long colidx = long(s) * T_out + i;
      const auto& fr = targets[size_t(s)].frames[size_t(i)];
      const S dx = pred(0, colidx) - S(fr.x_hat);
      const S dc = pred(1, colidx) - S(fr.c_hat);
      if (fr.mask) total += dx * dx;
      total += dc * dc;
      if (dpred) {
        if (fr.mask) (*dpred)(0, colidx) = S(2) * dx / S(n);
        (*dpred)(1, colidx) = S(2) * dc / S(n);
      }
    }
  }
  return total / S(n);
}

// ---------------------------------------------------------------------------
// Full network backward

/// Reverse pass from an output gradient. `cache` must come from a forward
/// call with caching enabled; gradients accumulate into `grads`.
template <class S>
void crnn_backward(CrnnParams<S>& params, const CrnnConfig& cfg, const ForwardCache<S>& cache,
                   const MatR<S>& dpred, CrnnParams<S>& grads) {
  const int n = cache.n_samples;
  const int B = cache.B;
  const int T_out = cfg.t_out();
  const long N = dpred.cols();

  // Sigmoid.
  MatR<S> dlogits(2, N);
  for (long i = 0; i < N; ++i)
    for (int r = 0; r < 2; ++r) {
      const S p = cache.pred(r, i);
      dlogits(r, i) = dpred(r, i) * p * (S(1) - p);
    }

  // FC2.
  grads.fc2.W += dlogits * cache.fc2_in.transpose();
  grads.fc2.b += dlogits.rowwise().sum();
  MatR<S> dfc2_in = params.fc2.W.transpose() * dlogits;
  MatR<S> da1 = dfc2_in.topRows(cfg.fc1_dim);

  // FC1 ReLU.
  for (long i = 0; i < da1.cols(); ++i)
    for (long r = 0; r < da1.rows(); ++r)
      if (cache.fc1_act(r, i) <= S(0)) da1(r, i) = S(0);
  grads.fc1.W += da1 * cache.fc_in.transpose();
  grads.fc1.b += da1.rowwise().sum();
  MatR<S> dfc_in = params.fc1.W.transpose() * da1;

  // Back to the frequency-pooled trunk (and through the GRUs for CRNN).
  const int C4 = cfg.conv_channels[3];
  const int t4 = cache.T / 16;
  const int f4 = cache.F / 16;
  MatR<S> dpooled = MatR<S>::Zero(C4, long(B) * t4);

  if (cfg.variant == ModelVariant::Crnn) {
    const int H = cfg.gru_hidden;
    std::vector<MatR<S>> dcur(size_t(t4), MatR<S>::Zero(2 * H, B));
    for (int tt = 0; tt < t4; ++tt)
      for (int b = 0; b < B; ++b)
        dcur[size_t(tt)].col(b) = dfc_in.col(long(b) * T_out + tt);

    for (int l = int(params.grus.size()) - 1; l >= 0; --l) {
      const auto& gc = cache.grus[size_t(l)];
      std::vector<MatR<S>> dhf(static_cast<size_t>(t4));
      std::vector<MatR<S>> dhb(static_cast<size_t>(t4));
      for (int tt = 0; tt < t4; ++tt) {
        dhf[size_t(tt)] = dcur[size_t(tt)].topRows(H);
        dhb[size_t(tt)] = dcur[size_t(tt)].bottomRows(H);
      }
      const long I = gc.input[0].rows();
      std::vector<MatR<S>> dxs(size_t(t4), MatR<S>::Zero(I, B));
      nn_detail::gru_dir_backward(params.grus[size_t(l)].fwd, gc.input, gc.fwd, dhf, false,
                                  dxs, grads.grus[size_t(l)].fwd);
      nn_detail::gru_dir_backward(params.grus[size_t(l)].bwd, gc.input, gc.bwd, dhb, true,
                                  dxs, grads.grus[size_t(l)].bwd);
      dcur = std::move(dxs);
    }
    for (int tt = 0; tt < t4; ++tt)
      for (int c = 0; c < C4; ++c)
        for (int b = 0; b < B; ++b) dpooled(c, long(b) * t4 + tt) += dcur[size_t(tt)](c, b);
  } else {
    dpooled = dfc_in;
  }
  (void)n;

  // Frequency pooling backward.
  MatR<S> dtrunk(C4, long(B) * t4 * f4);
  for (int c = 0; c < C4; ++c) {
    const S* src = dpooled.data() + size_t(c) * size_t(dpooled.cols());
    S* dst = dtrunk.data() + size_t(c) * size_t(dtrunk.cols());
    for (long i = 0; i < long(B) * t4; ++i)
      for (int k = 0; k < f4; ++k) dst[i * f4 + k] = src[i] / S(f4);
  }

  // Conv blocks in reverse.
  MatR<S> dx = std::move(dtrunk);
  MatR<S> col, dcol;
  for (int block = 3; block >= 0; --block) {
    const auto& bc = cache.blocks[size_t(block)];
    MatR<S> dpool_in;
    nn_detail::avgpool2_backward(dx, B, bc.T, bc.F, dpool_in);
    dx = std::move(dpool_in);
    for (int j = 1; j >= 0; --j) {
      const int idx = block * 2 + j;
      // ReLU.
      const MatR<S>& out = bc.relu_out[j];
      for (long r = 0; r < dx.rows(); ++r) {
        S* dr = dx.data() + size_t(r) * size_t(dx.cols());
        const S* orow = out.data() + size_t(r) * size_t(out.cols());
        for (long i = 0; i < dx.cols(); ++i)
          if (orow[i] <= S(0)) dr[i] = S(0);
      }
      // BatchNorm.
      MatR<S> dbn;
      nn_detail::batchnorm_backward(params.bns[size_t(idx)], bc.bn[j], dx, dbn,
                                    grads.bns[size_t(idx)]);
      // Convolution: rebuild the column matrix for dW, then push into dX.
      nn_detail::im2col3x3(bc.conv_in[j], B, bc.T, bc.F, col);
      grads.convs[size_t(idx)].W += dbn * col.transpose();
      grads.convs[size_t(idx)].b += dbn.rowwise().sum();
      dcol.noalias() = params.convs[size_t(idx)].W.transpose() * dbn;
      nn_detail::col2im3x3(dcol, B, bc.T, bc.F, dx);
    }
  }
}

/// Convenience wrapper: forward in training mode, masked loss, full backward.
/// Returns the loss; gradients accumulate into `grads`.
template <class S>
S crnn_loss_and_grad(CrnnParams<S>& params, const CrnnConfig& cfg, const MatR<S>& input,
                     std::span<const int> view_ids, std::span<const TrainingTarget> targets,
                     CrnnParams<S>& grads, const BnMode& bn_mode, MatR<S>* pred_out = nullptr) {
  ForwardCache<S> cache;
  const MatR<S> pred = crnn_forward(params, cfg, input, view_ids, bn_mode, &cache);
  MatR<S> dpred;
  const S loss = masked_loss(pred, targets, &dpred);
  crnn_backward(params, cfg, cache, dpred, grads);
  if (pred_out) *pred_out = pred;
  return loss;
}

// ---------------------------------------------------------------------------
// Adam

template <class S>
class Adam {
 public:
  Adam(CrnnParams<S>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& r : params.registry())
      if (r.trainable) {
        m_.emplace_back(r.size, 0.0);
        v_.emplace_back(r.size, 0.0);
      }
  }

  void step(CrnnParams<S>& params, CrnnParams<S>& grads, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    auto preg = params.registry();
    auto greg = grads.registry();
    size_t slot = 0;
    for (size_t i = 0; i < preg.size(); ++i) {
      if (!preg[i].trainable) continue;
      auto& m = m_[slot];
      auto& v = v_[slot];
      ++slot;
      for (long k = 0; k < preg[i].size; ++k) {
        const double g = double(greg[i].data[k]);
        m[size_t(k)] = beta1_ * m[size_t(k)] + (1.0 - beta1_) * g;
        v[size_t(k)] = beta2_ * v[size_t(k)] + (1.0 - beta2_) * g * g;
        const double mhat = m[size_t(k)] / bc1;
        const double vhat = v[size_t(k)] / bc2;
        preg[i].data[k] =
            S(double(preg[i].data[k]) - lr * mhat / (std::sqrt(vhat) + eps_));
      }
    }
  }

  int step_count() const { return t_; }
  std::vector<std::vector<double>>& moments_m() { return m_; }
  std::vector<std::vector<double>>& moments_v() { return v_; }
  void set_step_count(int t) { t_ = t; }

 private:
  double beta1_, beta2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace asdl

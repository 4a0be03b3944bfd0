#include "layerlens/toy_model.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "byte_io.hpp"
#include "layerlens/error.hpp"
#include "layerlens/rng.hpp"
#include "toy_kernels.hpp"

namespace layerlens::toy {
namespace detail {
namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + kGeluA * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) +
         0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

Eigen::MatrixXd softmax_rows_causal(const Eigen::MatrixXd& scores) {
  const Eigen::Index n = scores.rows();
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = scores.row(i).head(i + 1).maxCoeff();
    double total = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      p(i, j) = std::exp(scores(i, j) - mx);
      total += p(i, j);
    }
    p.row(i).head(i + 1) /= total;
  }
  return p;
}

}  // namespace

Eigen::MatrixXd layer_norm(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain,
                           const Eigen::VectorXd& bias, LayerNormCache* cache) {
  const auto d = static_cast<double>(x.cols());
  const Eigen::VectorXd mean = x.rowwise().mean();
  const Eigen::MatrixXd centered = x.colwise() - mean;
  const Eigen::VectorXd var = centered.rowwise().squaredNorm() / d;
  const Eigen::VectorXd inv_std =
      (var.array() + kLayerNormEps).rsqrt().matrix();
  const Eigen::MatrixXd normalized = inv_std.asDiagonal() * centered;
  Eigen::MatrixXd y = (normalized * gain.asDiagonal()).rowwise() + bias.transpose();
  if (cache) {
    cache->normalized = normalized;
    cache->inv_std = inv_std;
  }
  return y;
}

Eigen::MatrixXd layer_norm_backward(const Eigen::MatrixXd& dy,
                                    const Eigen::VectorXd& gain,
                                    const LayerNormCache& cache,
                                    Eigen::VectorXd& d_gain,
                                    Eigen::VectorXd& d_bias) {
  d_gain += dy.cwiseProduct(cache.normalized).colwise().sum().transpose();
  d_bias += dy.colwise().sum().transpose();
  const Eigen::MatrixXd dxhat = dy * gain.asDiagonal();
  const Eigen::VectorXd mean_dxhat = dxhat.rowwise().mean();
  const Eigen::VectorXd mean_dxhat_xhat =
      dxhat.cwiseProduct(cache.normalized).rowwise().mean();
  Eigen::MatrixXd dx = dxhat.colwise() - mean_dxhat;
  dx -= mean_dxhat_xhat.asDiagonal() * cache.normalized;
  return cache.inv_std.asDiagonal() * dx;
}

Eigen::MatrixXd block_forward(const BlockWeights& bw, std::size_t heads,
                              const Eigen::MatrixXd& x, BlockCache* cache) {
  const Eigen::Index d = x.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  LayerNormCache ln1;
  const Eigen::MatrixXd a = layer_norm(x, bw.ln1_gain, bw.ln1_bias, &ln1);
  const Eigen::MatrixXd q = a * bw.wq;
  const Eigen::MatrixXd k = a * bw.wk;
  const Eigen::MatrixXd v = a * bw.wv;
  Eigen::MatrixXd concat(x.rows(), d);
  std::vector<Eigen::MatrixXd> probs;
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
    const Eigen::MatrixXd scores =
        scale * (q.middleCols(c0, dh) * k.middleCols(c0, dh).transpose());
    Eigen::MatrixXd p = softmax_rows_causal(scores);
    concat.middleCols(c0, dh) = p * v.middleCols(c0, dh);
    if (cache) probs.push_back(std::move(p));
  }
  const Eigen::MatrixXd mid = x + concat * bw.wo;

  LayerNormCache ln2;
  const Eigen::MatrixXd b = layer_norm(mid, bw.ln2_gain, bw.ln2_bias, &ln2);
  const Eigen::MatrixXd up_pre = (b * bw.w_up).rowwise() + bw.b_up.transpose();
  const Eigen::MatrixXd up_act = up_pre.unaryExpr(&gelu);
  Eigen::MatrixXd out = mid + ((up_act * bw.w_down).rowwise() + bw.b_down.transpose());

  if (cache) {
    cache->input = x;
    cache->ln1 = std::move(ln1);
    cache->a = a;
    cache->q = q;
    cache->k = k;
    cache->v = v;
    cache->probs = std::move(probs);
    cache->attn_concat = concat;
    cache->mid = mid;
    cache->ln2 = std::move(ln2);
    cache->b = b;
    cache->up_pre = up_pre;
    cache->up_act = up_act;
  }
  return out;
}

Eigen::MatrixXd block_backward(const BlockWeights& bw, std::size_t heads,
                               const BlockCache& c, const Eigen::MatrixXd& dy,
                               BlockWeights& g) {
  const Eigen::Index d = dy.cols();
  const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Feed-forward branch: out = mid + gelu(b W_up + b_up) W_down + b_down.
  g.b_down += dy.colwise().sum().transpose();
  g.w_down += c.up_act.transpose() * dy;
  const Eigen::MatrixXd d_act = dy * bw.w_down.transpose();
  const Eigen::MatrixXd d_pre =
      d_act.cwiseProduct(c.up_pre.unaryExpr(&gelu_grad));
  g.b_up += d_pre.colwise().sum().transpose();
  g.w_up += c.b.transpose() * d_pre;
  const Eigen::MatrixXd db = d_pre * bw.w_up.transpose();
  Eigen::MatrixXd d_mid =
      dy + layer_norm_backward(db, bw.ln2_gain, c.ln2, g.ln2_gain, g.ln2_bias);

  // Attention branch: mid = x + concat W_o.
  g.wo += c.attn_concat.transpose() * d_mid;
  const Eigen::MatrixXd d_concat = d_mid * bw.wo.transpose();
  Eigen::MatrixXd dq(dy.rows(), d), dk(dy.rows(), d), dv(dy.rows(), d);
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index c0 = static_cast<Eigen::Index>(h) * dh;
    const Eigen::MatrixXd& p = c.probs[h];
    const Eigen::MatrixXd d_out = d_concat.middleCols(c0, dh);
    dv.middleCols(c0, dh) = p.transpose() * d_out;
    const Eigen::MatrixXd dp = d_out * c.v.middleCols(c0, dh).transpose();
    const Eigen::VectorXd row_dot = dp.cwiseProduct(p).rowwise().sum();
    const Eigen::MatrixXd ds = p.cwiseProduct(dp.colwise() - row_dot) * scale;
    dq.middleCols(c0, dh) = ds * c.k.middleCols(c0, dh);
    dk.middleCols(c0, dh) = ds.transpose() * c.q.middleCols(c0, dh);
  }
  g.wq += c.a.transpose() * dq;
  g.wk += c.a.transpose() * dk;
  g.wv += c.a.transpose() * dv;
  const Eigen::MatrixXd da =
      dq * bw.wq.transpose() + dk * bw.wk.transpose() + dv * bw.wv.transpose();
  return d_mid + layer_norm_backward(da, bw.ln1_gain, c.ln1, g.ln1_gain, g.ln1_bias);
}

Eigen::MatrixXd embed(const ToyModelWeights& w,
                      std::span<const std::uint32_t> tokens) {
  const auto t = static_cast<Eigen::Index>(tokens.size());
  if (tokens.empty() || tokens.size() > w.shape.max_positions) {
    throw Error(ErrorKind::kConfig,
                fmt::format("sequence length {} outside [1, {}]", tokens.size(),
                            w.shape.max_positions));
  }
  Eigen::MatrixXd x(t, static_cast<Eigen::Index>(w.shape.dim));
  for (Eigen::Index i = 0; i < t; ++i) {
    const std::uint32_t tok = tokens[static_cast<std::size_t>(i)];
    if (tok >= w.shape.vocab) {
      throw Error(ErrorKind::kConfig,
                  fmt::format("token {} out of range for vocabulary {}", tok,
                              w.shape.vocab));
    }
    x.row(i) = w.token_embedding.row(tok) + w.position_embedding.row(i);
  }
  return x;
}

Eigen::MatrixXd log_softmax(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

}  // namespace detail

namespace {

[[noreturn]] void bad_weights(const std::string& what) {
  throw Error(ErrorKind::kFormat, "invalid toy weights: " + what);
}

template <typename M>
void expect_shape(const M& m, Eigen::Index rows, Eigen::Index cols,
                  const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    bad_weights(fmt::format("{} is {}x{}, expected {}x{}", name, m.rows(),
                            m.cols(), rows, cols));
  }
}

constexpr char kMagic[4] = {'L', 'T', 'M', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

void ToyModelWeights::validate() const {
  const auto d = static_cast<Eigen::Index>(shape.dim);
  const auto v = static_cast<Eigen::Index>(shape.vocab);
  const auto f = static_cast<Eigen::Index>(shape.ffn_mult * shape.dim);
  if (shape.dim == 0 || shape.heads == 0 || shape.dim % shape.heads != 0) {
    bad_weights("dim must be a positive multiple of heads");
  }
  if (shape.layers == 0 || shape.vocab == 0 || shape.max_positions == 0 ||
      shape.ffn_mult == 0) {
    bad_weights("zero-sized shape");
  }
  expect_shape(token_embedding, v, d, "token_embedding");
  expect_shape(position_embedding, static_cast<Eigen::Index>(shape.max_positions),
               d, "position_embedding");
  if (blocks.size() != shape.layers) bad_weights("block count != layers");
  for (const auto& b : blocks) {
    expect_shape(b.ln1_gain, d, 1, "ln1_gain");
    expect_shape(b.ln1_bias, d, 1, "ln1_bias");
    expect_shape(b.wq, d, d, "wq");
    expect_shape(b.wk, d, d, "wk");
    expect_shape(b.wv, d, d, "wv");
    expect_shape(b.wo, d, d, "wo");
    expect_shape(b.ln2_gain, d, 1, "ln2_gain");
    expect_shape(b.ln2_bias, d, 1, "ln2_bias");
    expect_shape(b.w_up, d, f, "w_up");
    expect_shape(b.b_up, f, 1, "b_up");
    expect_shape(b.w_down, f, d, "w_down");
    expect_shape(b.b_down, d, 1, "b_down");
  }
  expect_shape(final_gain, d, 1, "final_gain");
  expect_shape(final_bias, d, 1, "final_bias");
  expect_shape(unembed, d, v, "unembed");
  expect_shape(unembed_bias, v, 1, "unembed_bias");
  bool finite = true;
  visit_params([&](const auto& m) { finite = finite && m.allFinite(); },
               *this);
  if (!finite) bad_weights("non-finite parameter");
}

ToyModelWeights init_weights(const ToyShape& shape, std::uint64_t seed) {
  const auto d = static_cast<Eigen::Index>(shape.dim);
  const auto v = static_cast<Eigen::Index>(shape.vocab);
  const auto f = static_cast<Eigen::Index>(shape.ffn_mult * shape.dim);
  Rng rng(seed);
  const auto gaussian = [&](Eigen::Index rows, Eigen::Index cols, double std) {
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = std * rng.normal();
    }
    return m;
  };
  const double proj = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid = proj / std::sqrt(2.0 * static_cast<double>(shape.layers));

  ToyModelWeights w;
  w.shape = shape;
  w.token_embedding = gaussian(v, d, 1.0);
  w.position_embedding =
      gaussian(static_cast<Eigen::Index>(shape.max_positions), d, 0.5);
  for (std::size_t l = 0; l < shape.layers; ++l) {
    BlockWeights b;
    b.ln1_gain = Eigen::VectorXd::Ones(d);
    b.ln1_bias = Eigen::VectorXd::Zero(d);
    b.wq = gaussian(d, d, proj);
    b.wk = gaussian(d, d, proj);
    b.wv = gaussian(d, d, proj);
    b.wo = gaussian(d, d, resid);
    b.ln2_gain = Eigen::VectorXd::Ones(d);
    b.ln2_bias = Eigen::VectorXd::Zero(d);
    b.w_up = gaussian(d, f, proj);
    b.b_up = Eigen::VectorXd::Zero(f);
    b.w_down = gaussian(f, d, 1.0 / std::sqrt(static_cast<double>(f)) /
                                  std::sqrt(2.0 * static_cast<double>(shape.layers)));
    b.b_down = Eigen::VectorXd::Zero(d);
    w.blocks.push_back(std::move(b));
  }
  w.final_gain = Eigen::VectorXd::Ones(d);
  w.final_bias = Eigen::VectorXd::Zero(d);
  w.unembed = gaussian(d, v, proj);
  w.unembed_bias = Eigen::VectorXd::Zero(v);
  w.validate();
  return w;
}

ToyModelWeights zeros_like(const ToyModelWeights& w) {
  ToyModelWeights z = w;
  visit_params([](auto& m) { m.setZero(); }, z);
  return z;
}

void save_checkpoint(const ToyModelWeights& w, const std::filesystem::path& file) {
  w.validate();
  std::string buf;
  buf.append(kMagic, 4);
  layerlens::detail::put_le<std::uint32_t>(buf, kCheckpointVersion);
  for (std::size_t v : {w.shape.vocab, w.shape.layers, w.shape.dim,
                        w.shape.heads, w.shape.max_positions, w.shape.ffn_mult}) {
    layerlens::detail::put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(v));
  }
  visit_params(
      [&](const auto& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
          for (Eigen::Index j = 0; j < m.cols(); ++j) {
            layerlens::detail::put_f64(buf, m(i, j));
          }
        }
      },
      w);
  layerlens::detail::write_file_bytes(file.string(), buf);
}

ToyModelWeights load_checkpoint(const std::filesystem::path& file) {
  const std::string bytes = layerlens::detail::read_file_bytes(file.string());
  layerlens::detail::Reader r(bytes, file.filename().string());
  if (r.get_bytes(4) != std::string(kMagic, 4)) {
    throw Error(ErrorKind::kFormat, file.filename().string() + ": bad magic");
  }
  if (r.get_le<std::uint32_t>() != kCheckpointVersion) {
    throw Error(ErrorKind::kFormat, file.filename().string() + ": version mismatch");
  }
  ToyShape shape;
  shape.vocab = r.get_le<std::uint32_t>();
  shape.layers = r.get_le<std::uint32_t>();
  shape.dim = r.get_le<std::uint32_t>();
  shape.heads = r.get_le<std::uint32_t>();
  shape.max_positions = r.get_le<std::uint32_t>();
  shape.ffn_mult = r.get_le<std::uint32_t>();
  if (shape.heads == 0 || shape.dim == 0 || shape.dim % shape.heads != 0 ||
      shape.layers == 0 || shape.layers > 1024 || shape.dim > 65536 ||
      shape.vocab == 0 || shape.vocab > (1u << 24) || shape.max_positions == 0 ||
      shape.ffn_mult == 0 || shape.ffn_mult > 64) {
    throw Error(ErrorKind::kFormat, "implausible toy model shape in checkpoint");
  }
  ToyModelWeights w = zeros_like(init_weights(shape, 0));
  visit_params(
      [&](auto& m) {
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
          for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.get_f64();
        }
      },
      w);
  if (r.remaining() != 0) {
    throw Error(ErrorKind::kFormat, "trailing bytes in checkpoint");
  }
  w.validate();
  return w;
}

Eigen::MatrixXd toy_head(const ToyModelWeights& w, const Eigen::MatrixXd& states) {
  const Eigen::MatrixXd y =
      detail::layer_norm(states, w.final_gain, w.final_bias, nullptr);
  return detail::log_softmax((y * w.unembed).rowwise() + w.unembed_bias.transpose());
}

ForwardResult toy_forward(const ToyModelWeights& w,
                          std::span<const std::uint32_t> tokens) {
  ForwardResult out;
  out.hidden.reserve(w.shape.layers + 1);
  out.hidden.push_back(detail::embed(w, tokens));
  for (const auto& block : w.blocks) {
    out.hidden.push_back(
        detail::block_forward(block, w.shape.heads, out.hidden.back(), nullptr));
  }
  out.log_probs = toy_head(w, out.hidden.back());
  return out;
}

Eigen::MatrixXd toy_resume(const ToyModelWeights& w,
                           std::span<const std::uint32_t> tokens,
                           std::size_t layer, const Eigen::MatrixXd& states) {
  if (layer < 1 || layer > w.shape.layers) {
    throw Error(ErrorKind::kConfig,
                fmt::format("resume layer {} outside [1, {}]", layer,
                            w.shape.layers));
  }
  if (states.rows() != static_cast<Eigen::Index>(tokens.size()) ||
      states.cols() != static_cast<Eigen::Index>(w.shape.dim)) {
    throw Error(ErrorKind::kConfig,
                fmt::format("resume states are {}x{}, expected {}x{}",
                            states.rows(), states.cols(), tokens.size(),
                            w.shape.dim));
  }
  Eigen::MatrixXd x = states;
  for (std::size_t l = layer; l < w.shape.layers; ++l) {
    x = detail::block_forward(w.blocks[l], w.shape.heads, x, nullptr);
  }
  return toy_head(w, x);
}

}  // namespace layerlens::toy

#include "avp/learn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "avp/binio.hpp"
#include "avp/checksum.hpp"

namespace avp::learn {

namespace {

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

constexpr char kCheckpointMagic[4] = {'A', 'V', 'P', 'C'};
constexpr std::uint32_t kCheckpointVersion = 1;

void check(bool ok, const char* msg) {
  if (!ok) throw ShapeMismatch(msg);
}

}  // namespace

std::string mode_name(ConditioningMode m) {
  switch (m) {
    case ConditioningMode::NoPrimitive: return "noprim";
    case ConditioningMode::PrimitiveGT: return "primgt";
    case ConditioningMode::PrimitivePredicted: return "primpred";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// MLP

Mlp mlp_init(const std::vector<int>& dims, Rng& rng) {
  check(dims.size() >= 2, "mlp_init: need at least input and output dims");
  Mlp net;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    Linear l;
    l.in_dim = dims[i];
    l.out_dim = dims[i + 1];
    check(l.in_dim > 0 && l.out_dim > 0, "mlp_init: nonpositive layer dim");
    l.w.resize(static_cast<std::size_t>(l.out_dim) * l.in_dim);
    double s = 1.0 / std::sqrt(static_cast<double>(l.in_dim));
    for (double& w : l.w) w = gauss(rng) * s;
    l.b.assign(static_cast<std::size_t>(l.out_dim), 0.0);
    net.layers.push_back(std::move(l));
  }
  return net;
}

Mlp mlp_zeros_like(const Mlp& net) {
  Mlp z;
  for (const Linear& l : net.layers) {
    Linear g;
    g.in_dim = l.in_dim;
    g.out_dim = l.out_dim;
    g.w.assign(l.w.size(), 0.0);
    g.b.assign(l.b.size(), 0.0);
    z.layers.push_back(std::move(g));
  }
  return z;
}

std::vector<double> mlp_forward(const Mlp& net, const std::vector<double>& input,
                                MlpCache* cache) {
  check(!net.layers.empty(), "mlp_forward: empty network");
  check(static_cast<int>(input.size()) == net.layers.front().in_dim,
        "mlp_forward: input length does not match first layer");
  if (cache) {
    cache->acts.clear();
    cache->acts.push_back(input);
  }
  std::vector<double> h = input;
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const Linear& l = net.layers[li];
    check(static_cast<int>(h.size()) == l.in_dim, "mlp_forward: layer chain mismatch");
    std::vector<double> z(static_cast<std::size_t>(l.out_dim));
    const double* hv = h.data();
    for (int o = 0; o < l.out_dim; ++o) {
      const double* row = &l.w[static_cast<std::size_t>(o) * l.in_dim];
      // Four fixed-order partial sums; keeps the loop vectorizable without
      // relaxing float semantics, and the summation order reproducible.
      double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
      int i = 0;
      for (; i + 4 <= l.in_dim; i += 4) {
        a0 += row[i] * hv[i];
        a1 += row[i + 1] * hv[i + 1];
        a2 += row[i + 2] * hv[i + 2];
        a3 += row[i + 3] * hv[i + 3];
      }
      double acc = l.b[static_cast<std::size_t>(o)] + ((a0 + a1) + (a2 + a3));
      for (; i < l.in_dim; ++i) acc += row[i] * hv[i];
      z[static_cast<std::size_t>(o)] = acc;
    }
    if (li + 1 < net.layers.size())
      for (double& v : z) v = std::tanh(v);
    h = std::move(z);
    if (cache) cache->acts.push_back(h);
  }
  return h;
}

std::vector<double> mlp_backward(const Mlp& net, const MlpCache& cache,
                                 const std::vector<double>& grad_out, Mlp& grads) {
  check(!net.layers.empty(), "mlp_backward: empty network");
  check(cache.acts.size() == net.layers.size() + 1, "mlp_backward: cache size mismatch");
  check(grads.layers.size() == net.layers.size(), "mlp_backward: grads shape mismatch");
  check(static_cast<int>(grad_out.size()) == net.layers.back().out_dim,
        "mlp_backward: grad_out length mismatch");

  std::vector<double> d = grad_out;  // gradient wrt the current layer's pre-activation
  for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
    const Linear& l = net.layers[static_cast<std::size_t>(li)];
    Linear& g = grads.layers[static_cast<std::size_t>(li)];
    check(g.w.size() == l.w.size() && g.b.size() == l.b.size(),
          "mlp_backward: grads layer shape mismatch");
    const std::vector<double>& in = cache.acts[static_cast<std::size_t>(li)];
    const std::vector<double>& out = cache.acts[static_cast<std::size_t>(li) + 1];
    check(static_cast<int>(in.size()) == l.in_dim && static_cast<int>(out.size()) == l.out_dim,
          "mlp_backward: cached activation shape mismatch");

    if (li + 1 < static_cast<int>(net.layers.size())) {
      // d currently holds the gradient wrt this layer's tanh output.
      for (int o = 0; o < l.out_dim; ++o) {
        double y = out[static_cast<std::size_t>(o)];
        d[static_cast<std::size_t>(o)] *= 1.0 - y * y;
      }
    }
    std::vector<double> dprev(static_cast<std::size_t>(l.in_dim), 0.0);
    const double* inv = in.data();
    double* dp = dprev.data();
    for (int o = 0; o < l.out_dim; ++o) {
      double dz = d[static_cast<std::size_t>(o)];
      g.b[static_cast<std::size_t>(o)] += dz;
      double* grow = &g.w[static_cast<std::size_t>(o) * l.in_dim];
      const double* row = &l.w[static_cast<std::size_t>(o) * l.in_dim];
      for (int i = 0; i < l.in_dim; ++i) {
        grow[i] += dz * inv[i];
        dp[i] += dz * row[i];
      }
    }
    d = std::move(dprev);
  }
  return d;
}

// ---------------------------------------------------------------------------
// Adam

void adam_update(std::vector<double>& param, const std::vector<double>& grad, AdamState& state,
                 double lr) {
  check(param.size() == grad.size(), "adam_update: param/grad length mismatch");
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  check(state.m.size() == param.size() && state.v.size() == param.size(),
        "adam_update: state length mismatch");
  state.t += 1;
  double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.t));
  double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    double g = grad[i];
    state.m[i] = kAdamBeta1 * state.m[i] + (1.0 - kAdamBeta1) * g;
    state.v[i] = kAdamBeta2 * state.v[i] + (1.0 - kAdamBeta2) * g * g;
    double mhat = state.m[i] / bc1;
    double vhat = state.v[i] / bc2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
  }
}

// ---------------------------------------------------------------------------
// Observation encoding

std::vector<double> ConditioningBundle::flat() const {
  std::vector<double> out;
  out.reserve(obs_feat.size() + proprio_feat.size() + instr_feat.size());
  out.insert(out.end(), obs_feat.begin(), obs_feat.end());
  out.insert(out.end(), proprio_feat.begin(), proprio_feat.end());
  out.insert(out.end(), instr_feat.begin(), instr_feat.end());
  return out;
}

ConditioningBundle encode_observation(const render::RasterImage& img,
                                      const trajio::ProprioState& s, const ProprioNorm& norm) {
  check(img.height % 4 == 0 && img.width % 4 == 0,
        "encode_observation: image sides must be divisible by 4");
  int ph = img.height / 4;
  int pw = img.width / 4;
  ConditioningBundle b;
  b.obs_feat.resize(static_cast<std::size_t>(img.channels) * ph * pw);
  std::size_t k = 0;
  for (int c = 0; c < img.channels; ++c)
    for (int py = 0; py < ph; ++py)
      for (int px = 0; px < pw; ++px) {
        double acc = 0.0;
        for (int dy = 0; dy < 4; ++dy)
          for (int dx = 0; dx < 4; ++dx)
            acc += static_cast<double>(img.at(c, py * 4 + dy, px * 4 + dx));
        b.obs_feat[k++] = acc / 16.0;
      }
  b.proprio_feat = {(s.ee_pos.x - norm.center.x) / norm.half.x,
                    (s.ee_pos.y - norm.center.y) / norm.half.y,
                    (s.ee_pos.z - norm.center.z) / norm.half.z,
                    s.gripper_cmd,
                    s.gripper_meas};
  return b;
}

render::RasterImage encode_pool_backward(const std::vector<double>& grad_obs_feat,
                                         const render::RasterImage& like) {
  check(like.height % 4 == 0 && like.width % 4 == 0,
        "encode_pool_backward: image sides must be divisible by 4");
  int ph = like.height / 4;
  int pw = like.width / 4;
  check(grad_obs_feat.size() == static_cast<std::size_t>(like.channels) * ph * pw,
        "encode_pool_backward: gradient length mismatch");
  render::RasterImage g = render::RasterImage::filled(like.channels, like.height, like.width, 0.0f);
  std::size_t k = 0;
  for (int c = 0; c < like.channels; ++c)
    for (int py = 0; py < ph; ++py)
      for (int px = 0; px < pw; ++px) {
        float v = static_cast<float>(grad_obs_feat[k++] / 16.0);
        for (int dy = 0; dy < 4; ++dy)
          for (int dx = 0; dx < 4; ++dx) g.at(c, py * 4 + dy, px * 4 + dx) = v;
      }
  return g;
}

// ---------------------------------------------------------------------------
// Flow matching

std::vector<double> euler_integrate(
    const std::function<std::vector<double>(const std::vector<double>&, double)>& field,
    std::vector<double> x0, int steps) {
  check(steps >= 1, "euler_integrate: steps must be >= 1");
  std::vector<double> x = std::move(x0);
  double dt = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    double tau = static_cast<double>(k) / steps;
    std::vector<double> v = field(x, tau);
    check(v.size() == x.size(), "euler_integrate: field output length mismatch");
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += dt * v[i];
  }
  return x;
}

namespace {

std::vector<double> normalize_chunk(const ActionChunk& a, const TrainConfig& cfg) {
  std::vector<double> an(a.a.size());
  for (std::size_t i = 0; i < a.a.size(); ++i)
    an[i] = (a.a[i] - cfg.action_offset[i % 4]) / cfg.action_scale[i % 4];
  return an;
}

std::vector<double> expert_input(const std::vector<double>& cond_flat, const std::vector<double>& x,
                                 double tau) {
  std::vector<double> in;
  in.reserve(cond_flat.size() + x.size() + 1);
  in.insert(in.end(), cond_flat.begin(), cond_flat.end());
  in.insert(in.end(), x.begin(), x.end());
  in.push_back(tau);
  return in;
}

}  // namespace

double fm_loss(const Mlp& expert, const ConditioningBundle& cond, const ActionChunk& a,
               const TrainConfig& cfg, Rng& rng, Mlp* grads, double grad_scale) {
  check(a.horizon > 0 && a.a.size() == static_cast<std::size_t>(a.horizon) * 4,
        "fm_loss: malformed action chunk");
  std::vector<double> an = normalize_chunk(a, cfg);
  std::size_t dim = an.size();

  std::vector<double> x0(dim);
  for (double& v : x0) v = gauss(rng);
  double tau = uniform01(rng);

  std::vector<double> xt(dim);
  for (std::size_t i = 0; i < dim; ++i) xt[i] = (1.0 - tau) * x0[i] + tau * an[i];

  std::vector<double> cf = cond.flat();
  MlpCache cache;
  std::vector<double> v = mlp_forward(expert, expert_input(cf, xt, tau), grads ? &cache : nullptr);
  check(v.size() == dim, "fm_loss: expert output length mismatch");

  double loss = 0.0;
  std::vector<double> r(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    r[i] = v[i] - (an[i] - x0[i]);
    loss += r[i] * r[i];
  }
  if (grads) {
    std::vector<double> gout(dim);
    for (std::size_t i = 0; i < dim; ++i) gout[i] = 2.0 * r[i] * grad_scale;
    mlp_backward(expert, cache, gout, *grads);
  }
  return loss;
}

ActionChunk fm_sample(const Mlp& expert, const ConditioningBundle& cond, int steps,
                      const TrainConfig& cfg, Rng& rng) {
  check(steps >= 1, "fm_sample: steps must be >= 1");
  check(cfg.horizon > 0, "fm_sample: nonpositive horizon");
  std::size_t dim = static_cast<std::size_t>(cfg.horizon) * 4;
  std::vector<double> x(dim);
  for (double& v : x) v = gauss(rng);

  std::vector<double> cf = cond.flat();
  double dt = 1.0 / steps;
  for (int k = 0; k < steps; ++k) {
    double tau = static_cast<double>(k) / steps;
    std::vector<double> v = mlp_forward(expert, expert_input(cf, x, tau));
    check(v.size() == dim, "fm_sample: expert output length mismatch");
    for (std::size_t i = 0; i < dim; ++i) x[i] += dt * v[i];
  }

  ActionChunk out;
  out.horizon = cfg.horizon;
  out.a.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    double raw = x[i] * cfg.action_scale[i % 4] + cfg.action_offset[i % 4];
    if (i % 4 == 3) {
      if (cfg.clamp_gripper) raw = std::clamp(raw, 0.0, 1.0);
    } else if (cfg.delta_clamp > 0.0) {
      raw = std::clamp(raw, -cfg.delta_clamp, cfg.delta_clamp);
    }
    out.a[i] = raw;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Decoder

DecoderLogits decoder_forward(const Mlp& decoder, const InstructionEncoding& instr,
                              const std::vector<double>& raw_obs_feat, const ModelDims& dims,
                              MlpCache* cache) {
  check(instr.n_cells == dims.n_board_cells, "decoder_forward: instruction cell count mismatch");
  check(static_cast<int>(raw_obs_feat.size()) == dims.obs_feat,
        "decoder_forward: observation feature length mismatch");
  std::vector<double> in = instr.expand();
  in.insert(in.end(), raw_obs_feat.begin(), raw_obs_feat.end());
  std::vector<double> out = mlp_forward(decoder, in, cache);
  check(static_cast<int>(out.size()) == 2 + dims.grid_u + dims.grid_v,
        "decoder_forward: head size mismatch");
  DecoderLogits lg;
  lg.stage.assign(out.begin(), out.begin() + 2);
  lg.u.assign(out.begin() + 2, out.begin() + 2 + dims.grid_u);
  lg.v.assign(out.begin() + 2 + dims.grid_u, out.end());
  return lg;
}

namespace {

// Softmax CE for one head; writes softmax - onehot into grad when asked.
double head_ce(const std::vector<double>& logits, int label, std::vector<double>* grad) {
  check(label >= 0 && label < static_cast<int>(logits.size()), "ce_loss: label out of range");
  double mx = *std::max_element(logits.begin(), logits.end());
  double denom = 0.0;
  for (double l : logits) denom += std::exp(l - mx);
  double logp = logits[static_cast<std::size_t>(label)] - mx - std::log(denom);
  if (grad) {
    grad->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i)
      (*grad)[i] = std::exp(logits[i] - mx) / denom;
    (*grad)[static_cast<std::size_t>(label)] -= 1.0;
  }
  return -logp;
}

}  // namespace

double ce_loss(const DecoderLogits& logits, const supervision::PrimitiveLabel& label,
               DecoderLogits* grad) {
  double loss = 0.0;
  loss += head_ce(logits.stage, static_cast<int>(label.stage), grad ? &grad->stage : nullptr);
  loss += head_ce(logits.u, label.cell_u, grad ? &grad->u : nullptr);
  loss += head_ce(logits.v, label.cell_v, grad ? &grad->v : nullptr);
  return loss;
}

supervision::PrimitiveLabel decoder_argmax(const DecoderLogits& logits,
                                           const trajio::CameraModel& cam,
                                           const supervision::SupervisionConfig& sup) {
  auto arg = [](const std::vector<double>& v) {
    return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
  };
  supervision::PrimitiveLabel l;
  l.stage = arg(logits.stage) == 0 ? supervision::Stage::Pick : supervision::Stage::Place;
  l.cell_u = arg(logits.u);
  l.cell_v = arg(logits.v);
  l.cell_index = l.cell_v * sup.grid_u + l.cell_u;
  l.anchor = supervision::cell_center(l.cell_u, l.cell_v, cam, sup);
  return l;
}

// ---------------------------------------------------------------------------
// Model bundle

ModelParams make_model(const TrainConfig& cfg, const ModelDims& dims, Rng& rng) {
  ModelParams p;
  p.mode = cfg.mode;
  p.dims = dims;
  p.dims.horizon = cfg.horizon;

  int chunk_dim = 4 * cfg.horizon;
  int cond_dim = dims.obs_feat + dims.proprio;
  if (cfg.mode == ConditioningMode::NoPrimitive) cond_dim += 2 * dims.n_board_cells;
  p.expert = mlp_init({cond_dim + chunk_dim + 1, cfg.expert_hidden, cfg.expert_hidden, chunk_dim},
                      rng);
  p.decoder = mlp_init({2 * dims.n_board_cells + dims.obs_feat, cfg.decoder_hidden,
                        cfg.decoder_hidden, 2 + dims.grid_u + dims.grid_v},
                       rng);
  p.opt.assign(2 * (p.expert.layers.size() + p.decoder.layers.size()), AdamState{});
  return p;
}

namespace {

// Stable per-sample key so noise draws travel with the sample, not with its
// position in the batch.
std::uint64_t sample_key(const trajio::LabeledSample& s) {
  Fnv1a64 h;
  auto f64 = [&h](double v) {
    std::uint64_t u;
    std::memcpy(&u, &v, 8);
    std::uint8_t b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<std::uint8_t>(u >> (8 * i));
    h.update(b, 8);
  };
  for (double v : s.action_chunk.a) f64(v);
  f64(s.proprio.ee_pos.x);
  f64(s.proprio.ee_pos.y);
  f64(s.proprio.ee_pos.z);
  f64(s.proprio.gripper_cmd);
  f64(s.proprio.gripper_meas);
  f64(static_cast<double>(s.stage_index));
  f64(static_cast<double>(s.primitive_gt.cell_index));
  f64(static_cast<double>(s.instruction.source));
  f64(static_cast<double>(s.instruction.target));
  return h.digest();
}

void adam_over_mlp(Mlp& net, const Mlp& grads, std::vector<AdamState>& slots, std::size_t& slot,
                   double lr) {
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    adam_update(net.layers[li].w, grads.layers[li].w, slots[slot++], lr);
    adam_update(net.layers[li].b, grads.layers[li].b, slots[slot++], lr);
  }
}

// ---------------------------------------------------------------------------
// Batched passes, used only inside train_step. Row-wise they compute exactly
// what mlp_forward/mlp_backward compute per sample; batching exists so each
// weight row is streamed once per minibatch instead of once per sample.

struct BatchActs {
  // acts[li]: batch x layer-width, row-major; acts[0] is the input matrix.
  std::vector<std::vector<double>> acts;
};

void batched_forward(const Mlp& net, std::vector<double> input, int batch, BatchActs& ba) {
  check(!net.layers.empty(), "train_step: empty network");
  check(static_cast<int>(input.size()) == batch * net.layers.front().in_dim,
        "train_step: batched input shape mismatch");
  ba.acts.clear();
  ba.acts.push_back(std::move(input));
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    const Linear& l = net.layers[li];
    const std::vector<double>& x_mat = ba.acts.back();
    std::vector<double> z(static_cast<std::size_t>(batch) * l.out_dim);
    for (int o = 0; o < l.out_dim; ++o) {
      const double* row = &l.w[static_cast<std::size_t>(o) * l.in_dim];
      double bias = l.b[static_cast<std::size_t>(o)];
      for (int s = 0; s < batch; ++s) {
        const double* x = &x_mat[static_cast<std::size_t>(s) * l.in_dim];
        double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
        int i = 0;
        for (; i + 4 <= l.in_dim; i += 4) {
          a0 += row[i] * x[i];
          a1 += row[i + 1] * x[i + 1];
          a2 += row[i + 2] * x[i + 2];
          a3 += row[i + 3] * x[i + 3];
        }
        double acc = bias + ((a0 + a1) + (a2 + a3));
        for (; i < l.in_dim; ++i) acc += row[i] * x[i];
        z[static_cast<std::size_t>(s) * l.out_dim + o] = acc;
      }
    }
    if (li + 1 < net.layers.size())
      for (double& v : z) v = std::tanh(v);
    ba.acts.push_back(std::move(z));
  }
}

// d_last: gradient wrt the final (linear) layer output, batch x out_dim.
// Accumulates parameter gradients; the gradient wrt the input matrix is not
// produced (train_step never needs it).
void batched_backward(const Mlp& net, const BatchActs& ba, std::vector<double> d_last, int batch,
                      Mlp& grads) {
  std::vector<double> d = std::move(d_last);
  for (int li = static_cast<int>(net.layers.size()) - 1; li >= 0; --li) {
    const Linear& l = net.layers[static_cast<std::size_t>(li)];
    Linear& g = grads.layers[static_cast<std::size_t>(li)];
    const std::vector<double>& x_mat = ba.acts[static_cast<std::size_t>(li)];
    if (li + 1 < static_cast<int>(net.layers.size())) {
      const std::vector<double>& y = ba.acts[static_cast<std::size_t>(li) + 1];
      for (std::size_t k = 0; k < d.size(); ++k) d[k] *= 1.0 - y[k] * y[k];
    }
    const bool need_dx = li > 0;
    std::vector<double> dx;
    if (need_dx) dx.assign(static_cast<std::size_t>(batch) * l.in_dim, 0.0);
    for (int o = 0; o < l.out_dim; ++o) {
      double* grow = &g.w[static_cast<std::size_t>(o) * l.in_dim];
      const double* wrow = &l.w[static_cast<std::size_t>(o) * l.in_dim];
      double db = 0.0;
      for (int s = 0; s < batch; ++s) {
        double dz = d[static_cast<std::size_t>(s) * l.out_dim + o];
        db += dz;
        const double* x = &x_mat[static_cast<std::size_t>(s) * l.in_dim];
        if (need_dx) {
          double* dxr = &dx[static_cast<std::size_t>(s) * l.in_dim];
          for (int i = 0; i < l.in_dim; ++i) {
            grow[i] += dz * x[i];
            dxr[i] += dz * wrow[i];
          }
        } else {
          for (int i = 0; i < l.in_dim; ++i) grow[i] += dz * x[i];
        }
      }
      g.b[static_cast<std::size_t>(o)] += db;
    }
    d = std::move(dx);
  }
}

}  // namespace

TrainMetrics train_step(ModelParams& params, const std::vector<const trajio::LabeledSample*>& batch,
                        const TrainSetup& setup, Rng& rng) {
  check(!batch.empty(), "train_step: empty batch");
  const TrainConfig& cfg = setup.train;
  const int b = static_cast<int>(batch.size());
  const double inv_b = 1.0 / static_cast<double>(b);
  std::uint64_t step_key = rng();

  Mlp egrads = mlp_zeros_like(params.expert);
  Mlp dgrads = mlp_zeros_like(params.decoder);
  TrainMetrics m;

  const int dout = params.decoder.out_dim();
  check(dout == 2 + params.dims.grid_u + params.dims.grid_v, "train_step: decoder head mismatch");
  const int chunk_dim = 4 * cfg.horizon;
  check(params.expert.out_dim() == chunk_dim, "train_step: expert output mismatch");

  // Raw-observation features feed the decoder for every sample; in the
  // NoPrimitive mode they also condition the expert.
  std::vector<ConditioningBundle> raws(static_cast<std::size_t>(b));
  for (int s = 0; s < b; ++s)
    raws[static_cast<std::size_t>(s)] =
        encode_observation(batch[static_cast<std::size_t>(s)]->raw_observation,
                           batch[static_cast<std::size_t>(s)]->proprio, setup.norm);

  // Decoder pass over the whole batch.
  std::vector<double> dec_in(static_cast<std::size_t>(b) * params.decoder.in_dim());
  for (int s = 0; s < b; ++s) {
    const trajio::LabeledSample& smp = *batch[static_cast<std::size_t>(s)];
    check(smp.instruction.n_cells == params.dims.n_board_cells,
          "train_step: instruction cell count mismatch");
    std::vector<double> one = smp.instruction.expand();
    const std::vector<double>& feat = raws[static_cast<std::size_t>(s)].obs_feat;
    check(static_cast<int>(one.size() + feat.size()) == params.decoder.in_dim(),
          "train_step: decoder input mismatch");
    double* row = &dec_in[static_cast<std::size_t>(s) * params.decoder.in_dim()];
    std::copy(one.begin(), one.end(), row);
    std::copy(feat.begin(), feat.end(), row + one.size());
  }
  BatchActs dacts;
  batched_forward(params.decoder, std::move(dec_in), b, dacts);
  const std::vector<double>& dec_out = dacts.acts.back();

  std::vector<DecoderLogits> logits(static_cast<std::size_t>(b));
  std::vector<double> dec_dz(static_cast<std::size_t>(b) * dout, 0.0);
  for (int s = 0; s < b; ++s) {
    const double* row = &dec_out[static_cast<std::size_t>(s) * dout];
    DecoderLogits& lg = logits[static_cast<std::size_t>(s)];
    lg.stage.assign(row, row + 2);
    lg.u.assign(row + 2, row + 2 + params.dims.grid_u);
    lg.v.assign(row + 2 + params.dims.grid_u, row + dout);
    DecoderLogits dgrad;
    m.l_vp += ce_loss(lg, batch[static_cast<std::size_t>(s)]->primitive_gt, &dgrad) * inv_b;
    double* dzr = &dec_dz[static_cast<std::size_t>(s) * dout];
    double scale = cfg.lambda * inv_b;
    std::size_t k = 0;
    for (double g : dgrad.stage) dzr[k++] = g * scale;
    for (double g : dgrad.u) dzr[k++] = g * scale;
    for (double g : dgrad.v) dzr[k++] = g * scale;
  }
  if (cfg.lambda > 0.0) batched_backward(params.decoder, dacts, std::move(dec_dz), b, dgrads);

  // Expert pass: per-sample conditioning and noise, then one batched sweep.
  const int ein = params.expert.in_dim();
  std::vector<double> exp_in(static_cast<std::size_t>(b) * ein);
  std::vector<double> an_all(static_cast<std::size_t>(b) * chunk_dim);
  std::vector<double> x0_all(static_cast<std::size_t>(b) * chunk_dim);
  for (int s = 0; s < b; ++s) {
    const trajio::LabeledSample& smp = *batch[static_cast<std::size_t>(s)];
    check(smp.action_chunk.horizon == cfg.horizon &&
              smp.action_chunk.a.size() == static_cast<std::size_t>(chunk_dim),
          "train_step: chunk horizon mismatch");

    ConditioningBundle cond;
    switch (params.mode) {
      case ConditioningMode::NoPrimitive:
        cond = raws[static_cast<std::size_t>(s)];
        cond.instr_feat = smp.instruction.expand();
        break;
      case ConditioningMode::PrimitiveGT:
        cond = encode_observation(smp.observation, smp.proprio, setup.norm);
        break;
      case ConditioningMode::PrimitivePredicted: {
        // Argmax rendering; by construction no gradient reaches the decoder
        // from the action loss.
        supervision::PrimitiveLabel pred =
            decoder_argmax(logits[static_cast<std::size_t>(s)], setup.camera, setup.sup);
        render::RasterImage composed =
            render::compose(smp.raw_observation, {pred, setup.render}, {});
        cond = encode_observation(composed, smp.proprio, setup.norm);
        break;
      }
    }

    std::vector<double> cf = cond.flat();
    std::vector<double> an = normalize_chunk(smp.action_chunk, cfg);
    Rng srng = make_rng(step_key, sample_key(smp));
    double* x0 = &x0_all[static_cast<std::size_t>(s) * chunk_dim];
    for (int i = 0; i < chunk_dim; ++i) x0[i] = gauss(srng);
    double tau = uniform01(srng);

    check(static_cast<int>(cf.size()) + chunk_dim + 1 == ein,
          "train_step: expert input mismatch");
    double* row = &exp_in[static_cast<std::size_t>(s) * ein];
    std::copy(cf.begin(), cf.end(), row);
    for (int i = 0; i < chunk_dim; ++i)
      row[cf.size() + static_cast<std::size_t>(i)] = (1.0 - tau) * x0[i] + tau * an[static_cast<std::size_t>(i)];
    row[static_cast<std::size_t>(ein) - 1] = tau;
    std::copy(an.begin(), an.end(), &an_all[static_cast<std::size_t>(s) * chunk_dim]);
  }
  BatchActs eacts;
  batched_forward(params.expert, std::move(exp_in), b, eacts);
  const std::vector<double>& v_out = eacts.acts.back();

  std::vector<double> exp_dz(static_cast<std::size_t>(b) * chunk_dim);
  for (int s = 0; s < b; ++s) {
    const double* v = &v_out[static_cast<std::size_t>(s) * chunk_dim];
    const double* an = &an_all[static_cast<std::size_t>(s) * chunk_dim];
    const double* x0 = &x0_all[static_cast<std::size_t>(s) * chunk_dim];
    double* dz = &exp_dz[static_cast<std::size_t>(s) * chunk_dim];
    double loss = 0.0;
    for (int i = 0; i < chunk_dim; ++i) {
      double r = v[i] - (an[i] - x0[i]);
      loss += r * r;
      dz[i] = 2.0 * r * inv_b;
    }
    m.l_act += loss * inv_b;
  }
  batched_backward(params.expert, eacts, std::move(exp_dz), b, egrads);

  m.total = m.l_act + cfg.lambda * m.l_vp;
  std::size_t slot = 0;
  adam_over_mlp(params.expert, egrads, params.opt, slot, cfg.lr);
  adam_over_mlp(params.decoder, dgrads, params.opt, slot, cfg.decoder_lr);
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

void write_mlp(binio::CheckedWriter& w, const Mlp& net) {
  w.u32(static_cast<std::uint32_t>(net.layers.size()));
  for (const Linear& l : net.layers) {
    w.u32(static_cast<std::uint32_t>(l.in_dim));
    w.u32(static_cast<std::uint32_t>(l.out_dim));
    for (double v : l.w) w.f64(v);
    for (double v : l.b) w.f64(v);
  }
}

Mlp read_mlp(binio::CheckedReader& r) {
  Mlp net;
  std::uint32_t n = r.u32();
  if (n > 64) throw trajio::MalformedRecord("checkpoint: implausible layer count");
  for (std::uint32_t li = 0; li < n; ++li) {
    Linear l;
    l.in_dim = static_cast<int>(r.u32());
    l.out_dim = static_cast<int>(r.u32());
    if (l.in_dim <= 0 || l.out_dim <= 0 || l.in_dim > (1 << 20) || l.out_dim > (1 << 20))
      throw trajio::MalformedRecord("checkpoint: implausible layer shape");
    l.w.resize(static_cast<std::size_t>(l.in_dim) * l.out_dim);
    for (double& v : l.w) v = r.f64();
    l.b.resize(static_cast<std::size_t>(l.out_dim));
    for (double& v : l.b) v = r.f64();
    net.layers.push_back(std::move(l));
  }
  return net;
}

}  // namespace

void save_checkpoint(std::ostream& out, const ModelParams& params,
                     const std::string& config_echo) {
  binio::CheckedWriter w(out);
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(config_echo);
  w.u8(static_cast<std::uint8_t>(params.mode));
  w.u32(static_cast<std::uint32_t>(params.dims.n_board_cells));
  w.u32(static_cast<std::uint32_t>(params.dims.grid_u));
  w.u32(static_cast<std::uint32_t>(params.dims.grid_v));
  w.u32(static_cast<std::uint32_t>(params.dims.obs_feat));
  w.u32(static_cast<std::uint32_t>(params.dims.proprio));
  w.u32(static_cast<std::uint32_t>(params.dims.horizon));
  write_mlp(w, params.expert);
  write_mlp(w, params.decoder);
  w.u32(static_cast<std::uint32_t>(params.opt.size()));
  for (const AdamState& st : params.opt) {
    w.u64(static_cast<std::uint64_t>(st.t));
    w.u64(st.m.size());
    for (double v : st.m) w.f64(v);
    for (double v : st.v) w.f64(v);
  }
  w.finish();
}

Checkpoint load_checkpoint(std::istream& in) {
  binio::CheckedReader r(in, "checkpoint");
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw trajio::MalformedRecord("checkpoint: bad magic");
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw trajio::SchemaMismatch("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  ck.config_echo = r.str();
  std::uint8_t mode = r.u8();
  if (mode > 2) throw trajio::MalformedRecord("checkpoint: bad conditioning mode");
  ck.params.mode = static_cast<ConditioningMode>(mode);
  ck.params.dims.n_board_cells = static_cast<int>(r.u32());
  ck.params.dims.grid_u = static_cast<int>(r.u32());
  ck.params.dims.grid_v = static_cast<int>(r.u32());
  ck.params.dims.obs_feat = static_cast<int>(r.u32());
  ck.params.dims.proprio = static_cast<int>(r.u32());
  ck.params.dims.horizon = static_cast<int>(r.u32());
  ck.params.expert = read_mlp(r);
  ck.params.decoder = read_mlp(r);
  std::uint32_t n_slots = r.u32();
  if (n_slots > 1024) throw trajio::MalformedRecord("checkpoint: implausible optimizer slot count");
  ck.params.opt.resize(n_slots);
  for (AdamState& st : ck.params.opt) {
    st.t = static_cast<long long>(r.u64());
    std::uint64_t n = r.u64();
    if (n > (1ull << 32)) throw trajio::MalformedRecord("checkpoint: implausible state length");
    st.m.resize(static_cast<std::size_t>(n));
    for (double& v : st.m) v = r.f64();
    st.v.resize(static_cast<std::size_t>(n));
    for (double& v : st.v) v = r.f64();
  }
  r.verify_digest();
  return ck;
}

// ---------------------------------------------------------------------------
// Rollout

sim::EpisodeResult policy_rollout(const ModelParams& params, const sim::SceneState& scene,
                                  const sim::TaskSpec& task, const RolloutConfig& cfg, Rng& rng) {
  const TrainConfig& tc = cfg.setup.train;
  check(tc.horizon == params.dims.horizon, "policy_rollout: horizon mismatch");

  InstructionEncoding instr{sim::n_cells(cfg.sim), task.source_cell, task.target_cell};
  sim::SceneState cur = scene;
  std::vector<supervision::PrimitiveLabel> history;
  supervision::PrimitiveLabel current;
  bool have_current = false;

  ActionChunk chunk = ActionChunk::zeros(tc.horizon);
  int pos = tc.horizon;  // forces a prediction on the first step
  for (int t = 0; t < cfg.budget; ++t) {
    if (pos >= tc.horizon) {
      render::RasterImage img = sim::render_camera(cur, cfg.setup.camera, cfg.sim);
      trajio::ProprioState prop{cur.ee_pos, cur.gripper, cur.gripper};
      ConditioningBundle raw = encode_observation(img, prop, cfg.setup.norm);
      ConditioningBundle cond;
      if (params.mode == ConditioningMode::NoPrimitive) {
        cond = raw;
        cond.instr_feat = instr.expand();
      } else {
        DecoderLogits logits = decoder_forward(params.decoder, instr, raw.obs_feat, params.dims);
        supervision::PrimitiveLabel pred = decoder_argmax(logits, cfg.setup.camera, cfg.setup.sup);
        if (have_current && !supervision::same_cell(pred, current)) history.push_back(current);
        current = pred;
        have_current = true;
        render::RasterImage composed = render::compose(img, {current, cfg.setup.render}, history);
        cond = encode_observation(composed, prop, cfg.setup.norm);
      }
      chunk = fm_sample(params.expert, cond, tc.flow_steps, tc, rng);
      pos = 0;
    }
    sim::ActionStep a{chunk.at(pos, 0), chunk.at(pos, 1), chunk.at(pos, 2), chunk.at(pos, 3)};
    ++pos;
    cur = sim::step(cur, a, cfg.sim);
  }
  return sim::evaluate_episode(cur, task, cfg.sim);
}

}  // namespace avp::learn

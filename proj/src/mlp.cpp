#include "mixline/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "mixline/errors.hpp"

namespace mixline::nn {

namespace {

void check_sizes(const std::vector<int>& sizes) {
  if (sizes.size() < 2) throw ShapeError("mlp: need at least input and output sizes");
  for (int s : sizes)
    if (s <= 0) throw ShapeError("mlp: layer sizes must be positive");
}

}  // namespace

std::size_t MlpParams::num_coords() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < weights.size(); ++l) n += weights[l].size() + biases[l].size();
  return n;
}

MlpParams mlp_zeros(const std::vector<int>& layer_sizes) {
  check_sizes(layer_sizes);
  MlpParams p;
  p.layer_sizes = layer_sizes;
  const int L = static_cast<int>(layer_sizes.size()) - 1;
  for (int l = 0; l < L; ++l) {
    p.weights.emplace_back(layer_sizes[l + 1], layer_sizes[l]);
    p.biases.emplace_back(layer_sizes[l + 1], 0.0);
    p.adam_m_w.emplace_back(layer_sizes[l + 1], layer_sizes[l]);
    p.adam_v_w.emplace_back(layer_sizes[l + 1], layer_sizes[l]);
    p.adam_m_b.emplace_back(layer_sizes[l + 1], 0.0);
    p.adam_v_b.emplace_back(layer_sizes[l + 1], 0.0);
  }
  return p;
}

MlpParams mlp_init(const std::vector<int>& layer_sizes, RngStream rng, double final_scale) {
  MlpParams p = mlp_zeros(layer_sizes);
  const int L = p.num_layers();
  for (int l = 0; l < L; ++l) {
    const double fan_in = layer_sizes[l];
    const double fan_out = layer_sizes[l + 1];
    double bound = std::sqrt(6.0 / (fan_in + fan_out));
    if (l == L - 1) bound *= final_scale;
    for (double& w : p.weights[l].a) w = rng.uniform(-bound, bound);
  }
  return p;
}

Matrix mlp_forward_batch(const MlpParams& params, const Matrix& input, MlpCache* cache) {
  if (input.cols != params.input_dim())
    throw ShapeError("mlp_forward: input dim " + std::to_string(input.cols) + " != " +
                     std::to_string(params.input_dim()));
  if (cache) {
    cache->acts.clear();
    cache->acts.push_back(input);
  }
  Matrix cur = input;
  const int L = params.num_layers();
  for (int l = 0; l < L; ++l) {
    Matrix next;
    gemm_xt(cur, params.weights[l], params.biases[l], next);
    if (l + 1 < L)
      for (double& v : next.a) v = std::tanh(v);
    cur = std::move(next);
    if (cache) cache->acts.push_back(cur);
  }
  return cur;
}

Vec mlp_forward(const MlpParams& params, std::span<const double> input) {
  Matrix x(1, static_cast<int>(input.size()));
  std::copy(input.begin(), input.end(), x.a.begin());
  Matrix y = mlp_forward_batch(params, x);
  return y.a;
}

void MlpGrads::init_like(const MlpParams& params) {
  dw.clear();
  db.clear();
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    dw.emplace_back(params.weights[l].rows, params.weights[l].cols);
    db.emplace_back(params.biases[l].size(), 0.0);
  }
}

void MlpGrads::zero() {
  for (auto& m : dw) m.zero();
  for (auto& v : db) std::fill(v.begin(), v.end(), 0.0);
}

void MlpGrads::scale(double s) {
  for (auto& m : dw)
    for (double& v : m.a) v *= s;
  for (auto& v : db)
    for (double& x : v) x *= s;
}

void MlpGrads::axpy(double s, const MlpGrads& other) {
  for (std::size_t l = 0; l < dw.size(); ++l) {
    for (std::size_t i = 0; i < dw[l].a.size(); ++i) dw[l].a[i] += s * other.dw[l].a[i];
    for (std::size_t i = 0; i < db[l].size(); ++i) db[l][i] += s * other.db[l][i];
  }
}

std::size_t MlpGrads::num_coords() const {
  std::size_t n = 0;
  for (std::size_t l = 0; l < dw.size(); ++l) n += dw[l].size() + db[l].size();
  return n;
}

Matrix mlp_backward_batch(const MlpParams& params, const MlpCache& cache,
                          const Matrix& upstream, MlpGrads& grads) {
  const int L = params.num_layers();
  if (static_cast<int>(cache.acts.size()) != L + 1)
    throw ShapeError("mlp_backward: cache does not match network depth");
  if (upstream.cols != params.output_dim() || upstream.rows != cache.acts[0].rows)
    throw ShapeError("mlp_backward: upstream gradient shape mismatch");

  Matrix g = upstream;
  for (int l = L - 1; l >= 0; --l) {
    // g is d(loss)/d(pre-activation output of layer l); hidden layers need the
    // tanh derivative folded in first.
    if (l != L - 1) {
      const Matrix& act = cache.acts[l + 1];
      for (std::size_t i = 0; i < g.a.size(); ++i) g.a[i] *= 1.0 - act.a[i] * act.a[i];
    }
    gemm_grad_params(g, cache.acts[l], grads.dw[l], grads.db[l]);
    if (l > 0) {
      Matrix gin;
      gemm_grad_input(g, params.weights[l], gin);
      g = std::move(gin);
    } else {
      Matrix gin;
      gemm_grad_input(g, params.weights[0], gin);
      return gin;
    }
  }
  return Matrix(0, 0);  // unreachable for valid nets
}

Vec mlp_backward(const MlpParams& params, std::span<const double> input,
                 std::span<const double> upstream, MlpGrads& grads) {
  if (static_cast<int>(upstream.size()) != params.output_dim())
    throw ShapeError("mlp_backward: upstream length != output dim");
  Matrix x(1, static_cast<int>(input.size()));
  std::copy(input.begin(), input.end(), x.a.begin());
  MlpCache cache;
  mlp_forward_batch(params, x, &cache);
  Matrix g(1, static_cast<int>(upstream.size()));
  std::copy(upstream.begin(), upstream.end(), g.a.begin());
  Matrix gin = mlp_backward_batch(params, cache, g, grads);
  return gin.a;
}

void adam_step(MlpParams& params, const MlpGrads& grads, const AdamConfig& cfg) {
  if (cfg.lr <= 0.0) throw ConfigError("adam: lr must be positive");
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    for (double g : grads.dw[l].a)
      if (!std::isfinite(g)) throw NumericError("adam: non-finite weight gradient");
    for (double g : grads.db[l])
      if (!std::isfinite(g)) throw NumericError("adam: non-finite bias gradient");
  }
  params.adam_t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(params.adam_t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(params.adam_t));
  auto update = [&](double& w, double& m, double& v, double g) {
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
    const double mhat = m / bc1;
    const double vhat = v / bc2;
    w -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  };
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    auto& w = params.weights[l].a;
    auto& mw = params.adam_m_w[l].a;
    auto& vw = params.adam_v_w[l].a;
    const auto& gw = grads.dw[l].a;
    for (std::size_t i = 0; i < w.size(); ++i) update(w[i], mw[i], vw[i], gw[i]);
    auto& b = params.biases[l];
    auto& mb = params.adam_m_b[l];
    auto& vb = params.adam_v_b[l];
    const auto& gb = grads.db[l];
    for (std::size_t i = 0; i < b.size(); ++i) update(b[i], mb[i], vb[i], gb[i]);
  }
}

namespace {

// Coordinate layout: per layer, weights row-major then biases.
struct CoordRef {
  bool is_weight;
  std::size_t layer;
  std::size_t offset;
};

CoordRef locate(const MlpParams& params, std::size_t index) {
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    if (index < params.weights[l].size()) return {true, l, index};
    index -= params.weights[l].size();
    if (index < params.biases[l].size()) return {false, l, index};
    index -= params.biases[l].size();
  }
  throw ShapeError("mlp: coordinate index out of range");
}

}  // namespace

double get_coord(const MlpParams& params, std::size_t index) {
  CoordRef r = locate(params, index);
  return r.is_weight ? params.weights[r.layer].a[r.offset] : params.biases[r.layer][r.offset];
}

void set_coord(MlpParams& params, std::size_t index, double value) {
  CoordRef r = locate(params, index);
  if (r.is_weight)
    params.weights[r.layer].a[r.offset] = value;
  else
    params.biases[r.layer][r.offset] = value;
}

double get_grad_coord(const MlpGrads& grads, std::size_t index) {
  std::size_t i = index;
  for (std::size_t l = 0; l < grads.dw.size(); ++l) {
    if (i < grads.dw[l].size()) return grads.dw[l].a[i];
    i -= grads.dw[l].size();
    if (i < grads.db[l].size()) return grads.db[l][i];
    i -= grads.db[l].size();
  }
  throw ShapeError("mlp: gradient coordinate index out of range");
}

GradCheckReport gradcheck(const MlpParams& params, const LossFn& loss, double tolerance,
                          double fd_step, std::size_t max_coords, std::uint64_t seed) {
  MlpGrads grads;
  grads.init_like(params);
  const double base = loss(params, &grads);
  if (!std::isfinite(base)) throw NumericError("gradcheck: non-finite loss");

  const std::size_t total = params.num_coords();
  std::vector<std::size_t> coords;
  if (total <= max_coords) {
    coords.resize(total);
    for (std::size_t i = 0; i < total; ++i) coords[i] = i;
  } else {
    RngStream rng(hash_label(seed, "gradcheck"));
    coords.reserve(max_coords);
    for (std::size_t i = 0; i < max_coords; ++i) coords.push_back(rng.uniform_index(total));
  }

  GradCheckReport report;
  MlpParams work = params;
  for (std::size_t idx : coords) {
    const double orig = get_coord(work, idx);
    set_coord(work, idx, orig + fd_step);
    const double up = loss(work, nullptr);
    set_coord(work, idx, orig - fd_step);
    const double down = loss(work, nullptr);
    set_coord(work, idx, orig);
    if (!std::isfinite(up) || !std::isfinite(down))
      throw NumericError("gradcheck: non-finite loss during finite differences");
    const double numeric = (up - down) / (2.0 * fd_step);
    const double analytic = get_grad_coord(grads, idx);
    const double rel =
        std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_index = idx;
      report.analytic = analytic;
      report.numeric = numeric;
    }
  }
  report.passed = report.max_rel_error < tolerance;
  return report;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CorruptionError("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  double f64() {
    std::uint64_t bits = u64();
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
};

}  // namespace

void save_checkpoint(const MlpParams& params, const std::string& path) {
  std::string out;
  out += "MXL1";
  put_u32(out, static_cast<std::uint32_t>(params.layer_sizes.size()));
  for (int s : params.layer_sizes) put_u32(out, static_cast<std::uint32_t>(s));
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    for (double v : params.weights[l].a) put_f64(out, v);
    for (double v : params.biases[l]) put_f64(out, v);
  }
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    for (double v : params.adam_m_w[l].a) put_f64(out, v);
    for (double v : params.adam_m_b[l]) put_f64(out, v);
  }
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    for (double v : params.adam_v_w[l].a) put_f64(out, v);
    for (double v : params.adam_v_b[l]) put_f64(out, v);
  }
  put_u64(out, params.adam_t);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("checkpoint: cannot open for write: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw ConfigError("checkpoint: write failed: " + path);
}

MlpParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("checkpoint: cannot open: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 4 || buf.compare(0, 4, "MXL1") != 0)
    throw CorruptionError("checkpoint: bad magic (expected MXL1)");
  Reader r{buf, 4};
  const std::uint32_t n = r.u32();
  if (n < 2 || n > 64) throw CorruptionError("checkpoint: implausible layer count");
  std::vector<int> sizes(n);
  for (auto& s : sizes) s = static_cast<int>(r.u32());
  MlpParams p = mlp_zeros(sizes);
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    for (double& v : p.weights[l].a) v = r.f64();
    for (double& v : p.biases[l]) v = r.f64();
  }
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    for (double& v : p.adam_m_w[l].a) v = r.f64();
    for (double& v : p.adam_m_b[l]) v = r.f64();
  }
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    for (double& v : p.adam_v_w[l].a) v = r.f64();
    for (double& v : p.adam_v_b[l]) v = r.f64();
  }
  p.adam_t = r.u64();
  if (r.pos != buf.size()) throw CorruptionError("checkpoint: trailing bytes");
  return p;
}

}  // namespace mixline::nn

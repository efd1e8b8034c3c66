#include "kaspe/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <ostream>
#include <random>

#include "kaspe/errors.hpp"
#include "kaspe/rng.hpp"

namespace kaspe {

namespace {

using ConstMap = Eigen::Map<const Matrix>;

// Standardised inputs/targets of the records that carry weight, plus the
// denominator of the loss average (which counts zero-weight records too).
struct Batch {
  Matrix X;
  Matrix T;
  Vector w;
  double denom = 1.0;
};

struct Layers {
  std::vector<int> in;
  std::vector<int> out;
  std::vector<long> offset;
};

Layers layout(const NetworkSpec& spec) {
  Layers l;
  int prev = spec.input_dim;
  long off = 0;
  for (int width : spec.layer_widths()) {
    l.in.push_back(prev);
    l.out.push_back(width);
    l.offset.push_back(off);
    off += static_cast<long>(width) * prev + width;
    prev = width;
  }
  return l;
}

void activate(Activation a, Matrix& m) {
  if (a == Activation::Tanh) m = m.array().tanh().matrix();
  else m = m.cwiseMax(0.0);
}

// Activation derivative expressed through the activation output.
Matrix activation_slope(Activation a, const Matrix& h) {
  if (a == Activation::Tanh) return (1.0 - h.array().square()).matrix();
  return (h.array() > 0.0).cast<double>().matrix();
}

// Returns activations of every layer; acts.front() is the input, acts.back()
// the raw output.
std::vector<Matrix> forward_pass(const NetworkSpec& spec, const Layers& lay, const Vector& params,
                                 const Matrix& X) {
  std::vector<Matrix> acts;
  acts.reserve(lay.out.size() + 1);
  acts.push_back(X);
  const std::size_t last = lay.out.size() - 1;
  for (std::size_t k = 0; k < lay.out.size(); ++k) {
    ConstMap W(params.data() + lay.offset[k], lay.out[k], lay.in[k]);
    Eigen::Map<const Vector> b(params.data() + lay.offset[k] + static_cast<long>(lay.out[k]) * lay.in[k],
                               lay.out[k]);
    Matrix A = W * acts.back();
    A.colwise() += b;
    if (k != last) activate(spec.activation, A);
    if (!A.allFinite())
      throw LayerFailure(static_cast<int>(k), "non-finite activation in layer " + std::to_string(k));
    acts.push_back(std::move(A));
  }
  return acts;
}

// log q(theta) under the mixture encoded by raw outputs z, in standardised
// coordinates. When gz is non-null it receives d log q / d z.
double head_log_density(int L, int d, const double* z, const double* theta, double* gz) {
  const int tri = d * (d + 1) / 2;
  const double* za = z;
  const double* zm = z + L;
  const double* zu = z + L + L * d;

  double zmax = -std::numeric_limits<double>::infinity();
  for (int l = 0; l < L; ++l) zmax = std::max(zmax, za[l]);
  double se = 0.0;
  for (int l = 0; l < L; ++l) se += std::exp(za[l] - zmax);
  const double log_norm = zmax + std::log(se);

  thread_local std::vector<double> terms, delta, e, u;
  terms.assign(L, 0.0);
  delta.assign(static_cast<std::size_t>(L) * d, 0.0);
  e.assign(static_cast<std::size_t>(L) * d, 0.0);
  u.assign(static_cast<std::size_t>(L) * d * d, 0.0);
  const double c = -0.5 * d * std::log(2.0 * std::numbers::pi);

  for (int l = 0; l < L; ++l) {
    double* U = &u[static_cast<std::size_t>(l) * d * d];
    double* dl = &delta[static_cast<std::size_t>(l) * d];
    double* el = &e[static_cast<std::size_t>(l) * d];
    const double* zl = zu + l * tri;
    double logdet = 0.0;
    int idx = 0;
    for (int j = 0; j < d; ++j)
      for (int k = j; k < d; ++k, ++idx) {
        if (j == k) {
          U[j * d + k] = std::exp(zl[idx]);
          logdet += zl[idx];
        } else {
          U[j * d + k] = zl[idx];
        }
      }
    for (int j = 0; j < d; ++j) dl[j] = theta[j] - zm[l * d + j];
    double q = 0.0;
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = j; k < d; ++k) s += U[j * d + k] * dl[k];
      el[j] = s;
      q += s * s;
    }
    terms[l] = (za[l] - log_norm) + c + logdet - 0.5 * q;
  }
  double tmax = -std::numeric_limits<double>::infinity();
  for (double t : terms) tmax = std::max(tmax, t);
  if (!std::isfinite(tmax)) return tmax;
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - tmax);
  const double logq = tmax + std::log(acc);
  if (!gz) return logq;

  for (int l = 0; l < L; ++l) {
    const double r = std::clamp(std::exp(terms[l] - logq), 1e-300, 1.0);
    const double* U = &u[static_cast<std::size_t>(l) * d * d];
    const double* dl = &delta[static_cast<std::size_t>(l) * d];
    const double* el = &e[static_cast<std::size_t>(l) * d];
    gz[l] = r - std::exp(za[l] - log_norm);
    for (int k = 0; k < d; ++k) {
      double s = 0.0;
      for (int j = 0; j <= k; ++j) s += U[j * d + k] * el[j];
      gz[L + l * d + k] = r * s;
    }
    double* gu = gz + L + L * d + l * tri;
    int idx = 0;
    for (int j = 0; j < d; ++j)
      for (int k = j; k < d; ++k, ++idx)
        gu[idx] = j == k ? r * (1.0 - el[j] * dl[j] * U[j * d + j]) : -r * el[j] * dl[k];
  }
  return logq;
}

double batch_objective(const NetworkSpec& spec, const Layers& lay, const Vector& params,
                       const Batch& batch, double log_scale, Vector* grad) {
  if (grad) grad->setZero(params.size());
  if (batch.X.cols() == 0) return 0.0;
  const auto acts = forward_pass(spec, lay, params, batch.X);
  const Matrix& Z = acts.back();
  const int L = spec.components;
  const int d = spec.dim;
  const long B = batch.X.cols();

  Matrix G;
  if (grad) G.resize(Z.rows(), B);
  double total = 0.0;
  for (long i = 0; i < B; ++i) {
    const double lq = head_log_density(L, d, Z.col(i).data(), batch.T.col(i).data(),
                                       grad ? G.col(i).data() : nullptr);
    if (!std::isfinite(lq))
      throw LayerFailure(static_cast<int>(lay.out.size()) - 1, "non-finite mixture log-density");
    total += batch.w[i] * (lq - log_scale);
    if (grad) G.col(i) *= -batch.w[i] / batch.denom;
  }
  if (grad) {
    for (int k = static_cast<int>(lay.out.size()) - 1; k >= 0; --k) {
      const Matrix& Hin = acts[k];
      Eigen::Map<Matrix> dW(grad->data() + lay.offset[k], lay.out[k], lay.in[k]);
      Eigen::Map<Vector> db(grad->data() + lay.offset[k] + static_cast<long>(lay.out[k]) * lay.in[k],
                            lay.out[k]);
      dW.noalias() = G * Hin.transpose();
      db = G.rowwise().sum();
      if (k > 0) {
        ConstMap W(params.data() + lay.offset[k], lay.out[k], lay.in[k]);
        Matrix next = W.transpose() * G;
        G = next.cwiseProduct(activation_slope(spec.activation, Hin));
      }
    }
    if (!grad->allFinite())
      throw NumericalFailure("non-finite gradient");
  }
  return -total / batch.denom;
}

Matrix standardize(const Matrix& raw, const Vector& shift, const Vector& scale) {
  return ((raw.colwise() - shift).array().colwise() / scale.array()).matrix();
}

Batch make_batch(const NetworkWeights& w, std::span<const WeightedTriple> records,
                 const std::vector<std::size_t>& idx, double denom) {
  std::vector<std::size_t> keep;
  for (auto i : idx)
    if (records[i].weight != 0) keep.push_back(i);
  Batch b;
  b.denom = denom;
  const long K = w.input_shift.size();
  const long d = w.theta_shift.size();
  Matrix S(K, static_cast<long>(keep.size()));
  Matrix T(d, static_cast<long>(keep.size()));
  b.w.resize(static_cast<long>(keep.size()));
  for (std::size_t c = 0; c < keep.size(); ++c) {
    const auto& r = records[keep[c]];
    if (r.summary.size() != K || r.theta.size() != d)
      throw InvalidParameter("record dimensions do not match the network");
    S.col(static_cast<long>(c)) = r.summary;
    T.col(static_cast<long>(c)) = r.theta;
    b.w[static_cast<long>(c)] = r.weight;
  }
  b.X = standardize(S, w.input_shift, w.input_scale);
  b.T = standardize(T, w.theta_shift, w.theta_scale);
  return b;
}

Batch make_batch(const NetworkWeights& w, std::span<const WeightedTriple> records) {
  if (records.empty()) throw InvalidParameter("loss: empty batch");
  std::vector<std::size_t> idx(records.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return make_batch(w, records, idx, static_cast<double>(records.size()));
}

double log_scale_sum(const NetworkWeights& w) { return w.theta_scale.array().log().sum(); }

void check_shapes(const NetworkSpec& spec, const NetworkWeights& w) {
  if (w.params.size() != spec.weight_count() || w.input_shift.size() != spec.input_dim ||
      w.input_scale.size() != spec.input_dim || w.theta_shift.size() != spec.dim ||
      w.theta_scale.size() != spec.dim)
    throw InvalidParameter("network weights do not match the network spec");
}

// Per-coordinate mean and population standard deviation; degenerate
// coordinates keep unit scale.
void moments(const std::vector<const Vector*>& xs, Vector& shift, Vector& scale) {
  const long k = shift.size();
  shift.setZero();
  scale.setOnes();
  if (xs.empty()) return;
  for (auto* x : xs) shift += *x;
  shift /= static_cast<double>(xs.size());
  Vector var = Vector::Zero(k);
  for (auto* x : xs) var += (*x - shift).array().square().matrix();
  var /= static_cast<double>(xs.size());
  for (long i = 0; i < k; ++i) {
    const double sd = std::sqrt(var[i]);
    scale[i] = (sd > 1e-12 * std::max(1.0, std::abs(shift[i])) && std::isfinite(sd)) ? sd : 1.0;
  }
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::Tanh;
  if (name == "relu") return Activation::Relu;
  throw InvalidConfig("unknown activation '" + name + "'");
}

std::vector<int> NetworkSpec::layer_widths() const {
  std::vector<int> w = hidden;
  w.push_back(raw_output_dim());
  return w;
}

long NetworkSpec::weight_count() const {
  long total = 0;
  int prev = input_dim;
  for (int width : layer_widths()) {
    total += static_cast<long>(width) * prev + width;
    prev = width;
  }
  return total;
}

void validate(const NetworkSpec& spec) {
  if (spec.input_dim < 1) throw InvalidParameter("network input dimension must be >= 1");
  if (spec.components < 1) throw InvalidParameter("mixture needs at least one component");
  if (spec.dim < 1) throw InvalidParameter("parameter dimension must be >= 1");
  for (int w : spec.hidden)
    if (w < 1) throw InvalidParameter("hidden layer widths must be >= 1");
}

std::vector<long> layer_offsets(const NetworkSpec& spec) { return layout(spec).offset; }

NetworkWeights zero_weights(const NetworkSpec& spec) {
  validate(spec);
  NetworkWeights w;
  w.params = Vector::Zero(spec.weight_count());
  w.input_shift = Vector::Zero(spec.input_dim);
  w.input_scale = Vector::Ones(spec.input_dim);
  w.theta_shift = Vector::Zero(spec.dim);
  w.theta_scale = Vector::Ones(spec.dim);
  return w;
}

NetworkWeights initialize(const NetworkSpec& spec, std::uint64_t rng_seed) {
  NetworkWeights w = zero_weights(spec);
  const Layers lay = layout(spec);
  Rng rng(rng_seed);
  for (std::size_t k = 0; k < lay.out.size(); ++k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(lay.in[k]));
    const long count = static_cast<long>(lay.out[k]) * lay.in[k];
    for (long i = 0; i < count; ++i)
      w.params[lay.offset[k] + i] = bound * (2.0 * rng.uniform() - 1.0);
  }
  return w;
}

Vector raw_output(const NetworkSpec& spec, const NetworkWeights& w, const Vector& s) {
  check_shapes(spec, w);
  if (s.size() != spec.input_dim) throw InvalidParameter("summary has the wrong dimension");
  if (!s.allFinite()) throw InvalidParameter("summary must be finite");
  Matrix X = standardize(s, w.input_shift, w.input_scale);
  return forward_pass(spec, layout(spec), w.params, X).back().col(0);
}

GaussianMixture mixture_head(const NetworkSpec& spec, const Vector& z) {
  const int L = spec.components;
  const int d = spec.dim;
  const int tri = d * (d + 1) / 2;
  const int out_layer = static_cast<int>(spec.hidden.size());
  if (z.size() != spec.raw_output_dim()) throw InvalidParameter("raw output has the wrong size");

  const double zmax = z.head(L).maxCoeff();
  std::vector<double> alpha(L);
  double se = 0.0;
  for (int l = 0; l < L; ++l) se += (alpha[l] = std::exp(z[l] - zmax));
  for (auto& a : alpha) a /= se;

  std::vector<Vector> means(L);
  std::vector<Matrix> factors(L);
  for (int l = 0; l < L; ++l) {
    means[l] = z.segment(L + l * d, d);
    Matrix U = Matrix::Zero(d, d);
    int idx = L + L * d + l * tri;
    for (int j = 0; j < d; ++j)
      for (int k = j; k < d; ++k, ++idx) U(j, k) = j == k ? std::exp(z[idx]) : z[idx];
    for (int j = 0; j < d; ++j)
      if (!(U(j, j) > 0.0) || !std::isfinite(U(j, j)))
        throw LayerFailure(out_layer, "precision factor diagonal left (0, inf)");
    factors[l] = std::move(U);
  }
  return GaussianMixture(std::move(alpha), std::move(means), std::move(factors));
}

GaussianMixture forward(const NetworkSpec& spec, const NetworkWeights& w, const Vector& s) {
  const GaussianMixture std_gm = mixture_head(spec, raw_output(spec, w, s));
  std::vector<Vector> means;
  std::vector<Matrix> factors;
  const Eigen::DiagonalMatrix<double, Eigen::Dynamic> inv_scale(w.theta_scale.cwiseInverse());
  for (int l = 0; l < std_gm.components(); ++l) {
    means.push_back(w.theta_shift + w.theta_scale.cwiseProduct(std_gm.means()[l]));
    factors.push_back(std_gm.factors()[l] * inv_scale);
  }
  return GaussianMixture(std_gm.weights(), std::move(means), std::move(factors));
}

double loss(const NetworkSpec& spec, const NetworkWeights& w,
            std::span<const WeightedTriple> batch) {
  return loss_and_gradient(spec, w, batch, nullptr);
}

Vector gradient(const NetworkSpec& spec, const NetworkWeights& w,
                std::span<const WeightedTriple> batch) {
  Vector g;
  loss_and_gradient(spec, w, batch, &g);
  return g;
}

double loss_and_gradient(const NetworkSpec& spec, const NetworkWeights& w,
                         std::span<const WeightedTriple> batch, Vector* grad) {
  check_shapes(spec, w);
  const Batch b = make_batch(w, batch);
  return batch_objective(spec, layout(spec), w.params, b, log_scale_sum(w), grad);
}

void validate(const TrainingConfig& cfg) {
  if (cfg.batch_size < 1) throw InvalidParameter("batch size must be >= 1");
  if (cfg.max_epochs < 1) throw InvalidParameter("max_epochs must be >= 1");
  if (!(cfg.learning_rate > 0.0)) throw InvalidParameter("learning rate must be positive");
  if (!(cfg.adam_beta1 >= 0.0 && cfg.adam_beta1 < 1.0) ||
      !(cfg.adam_beta2 >= 0.0 && cfg.adam_beta2 < 1.0))
    throw InvalidParameter("Adam betas must lie in [0, 1)");
  if (!(cfg.adam_epsilon > 0.0)) throw InvalidParameter("Adam epsilon must be positive");
  if (cfg.patience < 1) throw InvalidParameter("patience must be >= 1");
  if (!(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0))
    throw InvalidParameter("validation fraction must lie in (0, 1)");
}

TrainingResult train(const NetworkSpec& spec, const SyntheticDataset& data,
                     const TrainingConfig& cfg) {
  validate(spec);
  validate(cfg);
  const std::size_t n = data.records.size();
  if (n < 10) throw InvalidParameter("training needs at least 10 records");

  // Split.
  Rng split_rng(derive_seed(cfg.rng_seed, {0}));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = n - 1; i > 0; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i);
    std::swap(order[i], order[pick(split_rng)]);
  }
  std::size_t n_val = static_cast<std::size_t>(std::llround(cfg.validation_fraction * n));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  std::vector<std::size_t> val_idx(order.begin(), order.begin() + static_cast<long>(n_val));
  std::vector<std::size_t> train_idx(order.begin() + static_cast<long>(n_val), order.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(train_idx.begin(), train_idx.end());

  std::vector<std::size_t> accepted;
  for (auto i : train_idx)
    if (data.records[i].weight != 0) accepted.push_back(i);
  if (accepted.empty())
    throw DegenerateSample("no accepted records in the training split; increase h or n");

  NetworkWeights w = initialize(spec, derive_seed(cfg.rng_seed, {1}));
  {
    std::vector<const Vector*> ss, ts;
    for (auto i : accepted) {
      ss.push_back(&data.records[i].summary);
      ts.push_back(&data.records[i].theta);
    }
    moments(ss, w.input_shift, w.input_scale);
    moments(ts, w.theta_shift, w.theta_scale);
  }

  const Layers lay = layout(spec);
  const std::span<const WeightedTriple> recs(data.records);
  const double ls = log_scale_sum(w);
  const Batch train_all = make_batch(w, recs, train_idx, static_cast<double>(train_idx.size()));
  const Batch val_all = make_batch(w, recs, val_idx, static_cast<double>(val_idx.size()));

  TrainingResult result{w, {}};
  result.trace.best_val_loss = std::numeric_limits<double>::infinity();
  Vector m = Vector::Zero(w.params.size());
  Vector v = Vector::Zero(w.params.size());
  Vector g;
  long step = 0;
  int since_best = 0;
  Rng shuffle_rng(derive_seed(cfg.rng_seed, {2}));
  std::vector<std::size_t> batch_idx;
  batch_idx.reserve(static_cast<std::size_t>(cfg.batch_size));

  try {
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      for (std::size_t i = accepted.size() - 1; i > 0; --i) {
        std::uniform_int_distribution<std::size_t> pick(0, i);
        std::swap(accepted[i], accepted[pick(shuffle_rng)]);
      }
      for (std::size_t start = 0; start < accepted.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t stop =
            std::min(accepted.size(), start + static_cast<std::size_t>(cfg.batch_size));
        batch_idx.assign(accepted.begin() + static_cast<long>(start),
                         accepted.begin() + static_cast<long>(stop));
        const Batch b = make_batch(w, recs, batch_idx, static_cast<double>(batch_idx.size()));
        batch_objective(spec, lay, w.params, b, ls, &g);
        ++step;
        m = cfg.adam_beta1 * m + (1.0 - cfg.adam_beta1) * g;
        v = cfg.adam_beta2 * v + (1.0 - cfg.adam_beta2) * g.cwiseProduct(g);
        const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(step));
        w.params.array() -= cfg.learning_rate * (m.array() / c1) /
                            ((v.array() / c2).sqrt() + cfg.adam_epsilon);
      }
      const double tl = batch_objective(spec, lay, w.params, train_all, ls, nullptr);
      const double vl = batch_objective(spec, lay, w.params, val_all, ls, nullptr);
      if (!std::isfinite(tl) || !std::isfinite(vl))
        throw NumericalFailure("non-finite loss at epoch " + std::to_string(epoch));
      result.trace.epochs.push_back({epoch, tl, vl});
      if (vl < result.trace.best_val_loss) {
        result.trace.best_val_loss = vl;
        result.trace.best_epoch = epoch;
        result.weights = w;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    }
  } catch (const NumericalFailure& e) {
    result.trace.failed = true;
    result.trace.failure = e.what();
  }
  return result;
}

void to_json(nlohmann::json& j, const NetworkSpec& spec) {
  j = {{"input_dim", spec.input_dim},
       {"hidden", spec.hidden},
       {"activation", to_string(spec.activation)},
       {"components", spec.components},
       {"dim", spec.dim}};
}

NetworkSpec network_spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.input_dim = j.at("input_dim").get<int>();
  s.hidden = j.at("hidden").get<std::vector<int>>();
  s.activation = activation_from_string(j.at("activation").get<std::string>());
  s.components = j.at("components").get<int>();
  s.dim = j.at("dim").get<int>();
  validate(s);
  return s;
}

namespace {

std::vector<double> as_std(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector as_vector(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<long>(v.size()));
}

}  // namespace

nlohmann::json network_to_json(const NetworkSpec& spec, const NetworkWeights& w) {
  check_shapes(spec, w);
  return {{"spec", spec},
          {"params", as_std(w.params)},
          {"input_shift", as_std(w.input_shift)},
          {"input_scale", as_std(w.input_scale)},
          {"theta_shift", as_std(w.theta_shift)},
          {"theta_scale", as_std(w.theta_scale)}};
}

std::pair<NetworkSpec, NetworkWeights> network_from_json(const nlohmann::json& j) {
  NetworkSpec spec = network_spec_from_json(j.at("spec"));
  NetworkWeights w;
  w.params = as_vector(j.at("params"));
  w.input_shift = as_vector(j.at("input_shift"));
  w.input_scale = as_vector(j.at("input_scale"));
  w.theta_shift = as_vector(j.at("theta_shift"));
  w.theta_scale = as_vector(j.at("theta_scale"));
  check_shapes(spec, w);
  return {spec, w};
}

void write_trace_csv(std::ostream& out, const TrainingTrace& trace,
                     const std::vector<std::string>& comments) {
  for (const auto& c : comments) out << '#' << c << '\n';
  out << "epoch,train_loss,val_loss\n";
  for (const auto& e : trace.epochs)
    out << e.epoch << ',' << fmt(e.train_loss) << ',' << fmt(e.val_loss) << '\n';
}

}  // namespace kaspe

#include "sparling/models.hpp"

#include <cmath>
#include <numbers>

#include "sparling/binio.hpp"

namespace sparling {

std::string to_string(BottleneckKind kind) {
  switch (kind) {
    case BottleneckKind::SparlingMT: return "sparling-mt";
    case BottleneckKind::SparlingST: return "sparling-st";
    case BottleneckKind::L1: return "l1";
    case BottleneckKind::KL: return "kl";
    case BottleneckKind::None: return "none";
  }
  return "none";
}

BottleneckKind parse_bottleneck(const std::string& name) {
  if (name == "sparling-mt" || name == "sparling") return BottleneckKind::SparlingMT;
  if (name == "sparling-st") return BottleneckKind::SparlingST;
  if (name == "l1") return BottleneckKind::L1;
  if (name == "kl") return BottleneckKind::KL;
  if (name == "none") return BottleneckKind::None;
  throw std::invalid_argument("unknown bottleneck kind '" + name + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (image_size <= 0 || in_channels <= 0 || width <= 0 || hidden <= 0 || max_len <= 0) fail("sizes must be positive");
  if (residual_units < 0) fail("residual_units must be >= 0");
  if (alphabet < 1) fail("alphabet must be >= 1");
  if (bottleneck_channels < 1) fail("bottleneck_channels must be >= 1");
  if (pool < 1 || image_size % pool != 0) fail("pool must divide image_size");
  if (receptive_field() < 5) fail("encoder receptive field smaller than a glyph");
  if (!(initial_density > 0.0 && initial_density <= 1.0)) fail("initial_density must lie in (0,1]");
  if (l1_lambda < 0.0 || kl_lambda < 0.0) fail("penalty weights must be >= 0");
  if (!(kl_rho > 0.0 && kl_rho < 1.0)) fail("kl_rho must lie in (0,1)");
}

nlohmann::ordered_json ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["image_size"] = image_size;
  j["in_channels"] = in_channels;
  j["residual_units"] = residual_units;
  j["width"] = width;
  j["bottleneck_channels"] = bottleneck_channels;
  j["pool"] = pool;
  j["hidden"] = hidden;
  j["max_len"] = max_len;
  j["alphabet"] = alphabet;
  j["bottleneck"] = to_string(kind);
  j["bottleneck_batchnorm"] = bottleneck_batchnorm;
  j["initial_density"] = initial_density;
  j["l1_lambda"] = l1_lambda;
  j["kl_lambda"] = kl_lambda;
  j["kl_rho"] = kl_rho;
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.residual_units = j.value("residual_units", c.residual_units);
  c.width = j.value("width", c.width);
  c.bottleneck_channels = j.value("bottleneck_channels", c.bottleneck_channels);
  c.pool = j.value("pool", c.pool);
  c.hidden = j.value("hidden", c.hidden);
  c.max_len = j.value("max_len", c.max_len);
  c.alphabet = j.value("alphabet", c.alphabet);
  c.kind = parse_bottleneck(j.value("bottleneck", to_string(c.kind)));
  c.bottleneck_batchnorm = j.value("bottleneck_batchnorm", c.bottleneck_batchnorm);
  c.initial_density = j.value("initial_density", c.initial_density);
  c.l1_lambda = j.value("l1_lambda", c.l1_lambda);
  c.kl_lambda = j.value("kl_lambda", c.kl_lambda);
  c.kl_rho = j.value("kl_rho", c.kl_rho);
  return c;
}

namespace {

// splitmix64 stream; Box-Muller normals.
double next_uniform(std::uint64_t& s) {
  s += 0x9E3779B97F4A7C15ull;
  std::uint64_t z = s;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  z ^= z >> 31;
  return (static_cast<double>(z >> 11) + 0.5) * 0x1.0p-53;
}

double next_normal(std::uint64_t& s) {
  const double u1 = next_uniform(s);
  const double u2 = next_uniform(s);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace

Model::Model(ModelConfig config, std::uint64_t init_seed)
    : config_(std::move(config)), rng_state_(init_seed * 0x2545F4914F6CDD1Dull + 1) {
  config_.validate();
  const int w = config_.width;
  const auto res_units = static_cast<std::size_t>(config_.residual_units);
  params_.reserve(8 + 8 * res_units + 6);

  stem_ = add_conv("enc/stem", 1, config_.in_channels, w);
  for (std::size_t i = 0; i < res_units; ++i) {
    const std::string base = "enc/res" + std::to_string(i);
    ResidualUnit u;
    u.conv1 = add_conv(base + "/conv1", 3, w, w);
    u.bn1 = add_bn(base + "/bn1", w);
    u.conv2 = add_conv(base + "/conv2", 3, w, w);
    u.bn2 = add_bn(base + "/bn2", w);
    units_.push_back(u);
  }
  proj_ = add_conv("enc/proj", 1, w, config_.bottleneck_channels);
  if (config_.bottleneck_batchnorm) bottleneck_bn_ = add_bn("enc/bottleneck_bn", config_.bottleneck_channels);
  encoder_param_count_ = params_.size();

  const int cells = (config_.image_size / config_.pool) * (config_.image_size / config_.pool);
  const int flat = cells * (config_.bottleneck_channels + 2);
  const int outputs = config_.max_len * config_.classes();
  auto he = [this](int fan_in, Shape shape) {
    Tensor t(std::move(shape));
    const double sd = std::sqrt(2.0 / fan_in);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(sd * next_normal(rng_state_));
    return t;
  };
  dense1_w_ = add_param("dec/dense1/weight", he(flat, Shape{flat, config_.hidden}));
  dense1_b_ = add_param("dec/dense1/bias", Tensor(Shape{config_.hidden}));
  dense2_w_ = add_param("dec/dense2/weight", he(config_.hidden, Shape{config_.hidden, outputs}));
  dense2_b_ = add_param("dec/dense2/bias", Tensor(Shape{outputs}));

  sparsity_ = SparsityState(config_.bottleneck_channels, config_.initial_density,
                            config_.kind == BottleneckKind::SparlingST ? ThresholdVariant::SingleThreshold
                                                                        : ThresholdVariant::MultiThreshold);
}

std::size_t Model::add_param(std::string name, Tensor value) {
  Parameter p;
  p.name = std::move(name);
  p.value = std::move(value);
  p.zero_grad();
  params_.push_back(std::move(p));
  return params_.size() - 1;
}

Model::ConvParams Model::add_conv(const std::string& name, int k, int in, int out) {
  Tensor kernel(Shape{k, k, in, out});
  const double sd = std::sqrt(2.0 / (k * k * in));
  for (std::size_t i = 0; i < kernel.size(); ++i) kernel[i] = static_cast<float>(sd * next_normal(rng_state_));
  ConvParams c;
  c.kernel = add_param(name + "/kernel", std::move(kernel));
  c.bias = add_param(name + "/bias", Tensor(Shape{out}));
  return c;
}

Model::BnParams Model::add_bn(const std::string& name, int channels) {
  BnParams b;
  b.gamma = add_param(name + "/gamma", Tensor(Shape{channels}, 1.0f));
  b.beta = add_param(name + "/beta", Tensor(Shape{channels}));
  b.stats = stats_.size();
  stats_.emplace_back(channels);
  stat_names_.push_back(name);
  return b;
}

NodeId Model::conv(Graph& g, NodeId x, const ConvParams& p) {
  return ops::conv2d(g, x, g.parameter(params_[p.kernel]), g.parameter(params_[p.bias]));
}

NodeId Model::bn(Graph& g, NodeId x, const BnParams& p, Mode mode) {
  return ops::batchnorm(g, x, g.parameter(params_[p.gamma]), g.parameter(params_[p.beta]), stats_[p.stats], mode);
}

NodeId Model::encode(Graph& g, NodeId x, Mode mode, NodeId* pre_bottleneck, std::optional<NodeId>* aux_loss) {
  const Tensor& in = g.value(x);
  if (in.rank() != 4 || in.dim(1) != config_.image_size || in.dim(2) != config_.image_size ||
      in.dim(3) != config_.in_channels) {
    throw ShapeError("model expects [B," + std::to_string(config_.image_size) + "," +
                     std::to_string(config_.image_size) + "," + std::to_string(config_.in_channels) + "], got " +
                     shape_str(in.shape()));
  }
  NodeId h = ops::relu(g, conv(g, x, stem_));
  for (const ResidualUnit& u : units_) {
    ops::ResidualParams rp{g.parameter(params_[u.conv1.kernel]), g.parameter(params_[u.conv1.bias]),
                           g.parameter(params_[u.bn1.gamma]),    g.parameter(params_[u.bn1.beta]),
                           g.parameter(params_[u.conv2.kernel]), g.parameter(params_[u.conv2.bias]),
                           g.parameter(params_[u.bn2.gamma]),    g.parameter(params_[u.bn2.beta])};
    h = ops::residual_block(g, h, rp, stats_[u.bn1.stats], stats_[u.bn2.stats], mode);
  }
  NodeId z = conv(g, h, proj_);
  if (bottleneck_bn_) z = bn(g, z, *bottleneck_bn_, mode);
  if (pre_bottleneck) *pre_bottleneck = z;

  switch (config_.kind) {
    case BottleneckKind::SparlingMT:
    case BottleneckKind::SparlingST: {
      NodeId out = sparse_forward(g, z, sparsity_, mode);
      if (mode == Mode::Train) threshold_update(sparsity_);
      return out;
    }
    case BottleneckKind::L1: {
      NodeId out = ops::relu(g, z);
      if (aux_loss && config_.l1_lambda > 0.0) {
        *aux_loss = ops::scale(g, ops::mean_all(g, out), static_cast<float>(config_.l1_lambda));
      }
      return out;
    }
    case BottleneckKind::KL: {
      NodeId s = ops::sigmoid(g, z);
      if (aux_loss && config_.kl_lambda > 0.0) {
        *aux_loss = ops::scale(g, ops::kl_bernoulli(g, ops::mean_all(g, s), config_.kl_rho),
                               static_cast<float>(config_.kl_lambda));
      }
      return ops::relu(g, ops::add_scalar(g, s, -0.5f));
    }
    case BottleneckKind::None:
      return ops::relu(g, z);
  }
  return z;
}

NodeId Model::decode(Graph& g, NodeId motifs) {
  const Tensor& m = g.value(motifs);
  if (m.rank() != 4 || m.dim(3) != config_.bottleneck_channels) {
    throw ShapeError("decode expects [B,H,W," + std::to_string(config_.bottleneck_channels) + "], got " +
                     shape_str(m.shape()));
  }
  const int batch = m.dim(0);
  NodeId pooled = ops::maxpool2d(g, motifs, config_.pool);
  const int side = config_.image_size / config_.pool;
  Tensor coords(Shape{batch, side, side, 2});
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < side; ++y) {
      for (int x = 0; x < side; ++x) {
        const std::size_t o = ((static_cast<std::size_t>(b) * side + y) * side + x) * 2;
        coords[o] = side > 1 ? -1.0f + 2.0f * y / (side - 1) : 0.0f;
        coords[o + 1] = side > 1 ? -1.0f + 2.0f * x / (side - 1) : 0.0f;
      }
    }
  }
  NodeId aug = ops::concat_channels(g, pooled, g.constant(std::move(coords)));
  NodeId flat = ops::reshape(g, aug, Shape{batch, side * side * (config_.bottleneck_channels + 2)});
  NodeId h = ops::relu(g, ops::dense(g, flat, g.parameter(params_[dense1_w_]), g.parameter(params_[dense1_b_])));
  NodeId out = ops::dense(g, h, g.parameter(params_[dense2_w_]), g.parameter(params_[dense2_b_]));
  return ops::reshape(g, out, Shape{batch, config_.max_len, config_.classes()});
}

Model::Output Model::forward(Graph& g, const Tensor& images, Mode mode) {
  Output out{};
  NodeId x = g.constant(images, "input");
  out.motifs = encode(g, x, mode, &out.pre_bottleneck, &out.aux_loss);
  out.logits = decode(g, out.motifs);
  return out;
}

NodeId Model::loss(Graph& g, const Output& out, const std::vector<int>& targets) {
  NodeId l = ops::softmax_xent(g, out.logits, targets);
  if (out.aux_loss) l = ops::add(g, l, *out.aux_loss);
  return l;
}

Tensor Model::encode_eval(const Tensor& images) {
  Graph g(false);
  NodeId x = g.constant(images, "input");
  return g.value(encode(g, x, Mode::Eval, nullptr, nullptr));
}

Tensor Model::decode_eval(const Tensor& motifs) {
  Graph g(false);
  return g.value(decode(g, g.constant(motifs)));
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> out;
  for (const auto& p : params_) out.push_back(p.name);
  return out;
}

std::vector<Parameter*> Model::encoder_parameters() {
  std::vector<Parameter*> out;
  for (std::size_t i = 0; i < encoder_param_count_; ++i) out.push_back(&params_[i]);
  return out;
}

void Model::remove_bottleneck_and_freeze_encoder() {
  config_.kind = BottleneckKind::None;
  for (std::size_t i = 0; i < encoder_param_count_; ++i) params_[i].frozen = true;
}

Checkpoint Model::to_checkpoint() const {
  Checkpoint ckpt;
  ckpt.meta["model"] = config_.to_json();
  ckpt.meta["trained_examples"] = trained_examples_;
  std::vector<std::string> frozen;
  for (const auto& p : params_) {
    ckpt.put(p.name, p.value);
    if (p.frozen) frozen.push_back(p.name);
  }
  ckpt.meta["frozen"] = frozen;
  for (std::size_t i = 0; i < stats_.size(); ++i) {
    ckpt.put(stat_names_[i] + "/running_mean", stats_[i].mean);
    ckpt.put(stat_names_[i] + "/running_var", stats_[i].var);
  }
  put_sparsity(ckpt, sparsity_);
  return ckpt;
}

Model Model::from_checkpoint(const Checkpoint& ckpt) {
  if (!ckpt.meta.contains("model")) throw binio::FormatError("checkpoint has no model config");
  Model m(ModelConfig::from_json(ckpt.meta.at("model")), 0);
  std::vector<std::string> frozen = ckpt.meta.value("frozen", std::vector<std::string>{});
  for (auto& p : m.params_) {
    const Tensor& t = ckpt.get(p.name);
    if (t.shape() != p.value.shape()) {
      throw binio::FormatError("parameter '" + p.name + "' has shape " + shape_str(t.shape()) + ", expected " +
                               shape_str(p.value.shape()));
    }
    p.value = t;
    p.frozen = std::find(frozen.begin(), frozen.end(), p.name) != frozen.end();
  }
  for (std::size_t i = 0; i < m.stats_.size(); ++i) {
    m.stats_[i].mean = ckpt.get(m.stat_names_[i] + "/running_mean");
    m.stats_[i].var = ckpt.get(m.stat_names_[i] + "/running_var");
  }
  m.sparsity_ = get_sparsity(ckpt);
  m.trained_examples_ = ckpt.meta.value("trained_examples", std::int64_t{0});
  return m;
}

std::vector<int> slot_targets(const std::vector<std::vector<int>>& labels, int max_len, int blank) {
  std::vector<int> out;
  out.reserve(labels.size() * static_cast<std::size_t>(max_len));
  for (const auto& l : labels) {
    if (static_cast<int>(l.size()) > max_len) {
      throw std::invalid_argument("label of length " + std::to_string(l.size()) + " exceeds max_len " +
                                  std::to_string(max_len));
    }
    for (int i = 0; i < max_len; ++i) out.push_back(i < static_cast<int>(l.size()) ? l[i] : blank);
  }
  return out;
}

std::vector<std::vector<int>> greedy_decode(const Tensor& logits, int blank) {
  if (logits.rank() != 3) throw ShapeError("greedy_decode expects [B,L,K], got " + shape_str(logits.shape()));
  const int B = logits.dim(0), L = logits.dim(1), K = logits.dim(2);
  std::vector<std::vector<int>> out(static_cast<std::size_t>(B));
  for (int b = 0; b < B; ++b) {
    for (int l = 0; l < L; ++l) {
      const float* row = logits.raw() + (static_cast<std::size_t>(b) * L + l) * K;
      const int best = static_cast<int>(std::max_element(row, row + K) - row);
      if (best != blank) out[b].push_back(best);
    }
  }
  return out;
}

Tensor stack_images(const std::vector<const Tensor*>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty batch");
  const Shape& s = images.front()->shape();
  Shape shape{static_cast<int>(images.size())};
  shape.insert(shape.end(), s.begin(), s.end());
  Tensor out(shape);
  const std::size_t n = images.front()->size();
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->shape() != s) throw ShapeError("stack_images: inconsistent image shapes");
    std::copy_n(images[i]->raw(), n, out.raw() + i * n);
  }
  return out;
}

}  // namespace sparling

#include "sparling/sparsity.hpp"

#include <algorithm>
#include <cmath>

namespace sparling {

SparsityState::SparsityState(int channels_, double density_, ThresholdVariant variant_, double momentum_)
    : variant(variant_),
      channels(channels_),
      thresholds(Shape{variant_ == ThresholdVariant::MultiThreshold ? channels_ : 1}, 0.0f),
      density(density_),
      momentum(momentum_) {
  if (channels_ <= 0) throw std::invalid_argument("SparsityState: channel count must be positive");
  if (!(density_ > 0.0 && density_ <= 1.0)) throw std::invalid_argument("SparsityState: density must lie in (0,1]");
}

namespace {

void check_channels(const Tensor& z, const SparsityState& state) {
  if (z.rank() < 1 || z.channels() != state.channels) {
    throw ShapeError("sparsity layer expects " + std::to_string(state.channels) + " channels, got shape " +
                     shape_str(z.shape()));
  }
}

}  // namespace

Tensor sparse_apply(const Tensor& z, const SparsityState& state) {
  check_channels(z, state);
  const int c = state.channels;
  Tensor out(z.shape());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const float v = z[i] - state.threshold(static_cast<int>(i % c));
    out[i] = v > 0.0f ? v : 0.0f;
  }
  return out;
}

NodeId sparse_forward(Graph& g, NodeId z, SparsityState& state, Mode mode) {
  const Tensor& zv = g.value(z);
  Tensor out = sparse_apply(zv, state);
  if (mode == Mode::Train) state.buffer.insert(state.buffer.end(), zv.data().begin(), zv.data().end());
  NodeId t = g.constant(state.thresholds, "threshold");
  return g.record("sparse", {z, t}, std::move(out), [z](Graph& gr, NodeId self) {
    const Tensor& dy = gr.grad(self);
    const Tensor& y = gr.value(self);
    Tensor& dz = gr.grad_buffer(z);
    for (std::size_t i = 0; i < dy.size(); ++i) {
      if (y[i] > 0.0f) dz[i] += dy[i];
    }
  });
}

double quantile(std::vector<float> values, double p) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty sample");
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("quantile level must lie in [0,1]");
  const double h = p * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  auto lo_it = values.begin() + static_cast<std::ptrdiff_t>(lo);
  std::nth_element(values.begin(), lo_it, values.end());
  const double lo_v = *lo_it;
  if (lo + 1 >= values.size()) return lo_v;
  const double hi_v = *std::min_element(lo_it + 1, values.end());
  return lo_v + (h - static_cast<double>(lo)) * (hi_v - lo_v);
}

Tensor quantile_per_channel(const Tensor& z, double p, ThresholdVariant variant) {
  if (z.empty() || z.rank() < 1) throw std::invalid_argument("quantile_per_channel: empty input");
  if (variant == ThresholdVariant::SingleThreshold) {
    std::vector<float> all(z.data().begin(), z.data().end());
    return Tensor(Shape{1}, std::vector<float>{static_cast<float>(quantile(std::move(all), p))});
  }
  const int c = z.channels();
  const std::size_t rows = z.size() / static_cast<std::size_t>(c);
  Tensor out(Shape{c});
  std::vector<float> column(rows);
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t r = 0; r < rows; ++r) column[r] = z[r * c + ch];
    out[ch] = static_cast<float>(quantile(column, p));
  }
  return out;
}

bool threshold_update(SparsityState& state) {
  if (static_cast<double>(state.buffer.size()) * state.density < 10.0 * state.channels) return false;
  const auto rows = static_cast<int>(state.buffer.size() / state.channels);
  const Tensor pending(Shape{rows, state.channels}, std::move(state.buffer));
  state.buffer.clear();
  const Tensor q = quantile_per_channel(pending, 1.0 - state.density, state.variant);
  for (std::size_t i = 0; i < state.thresholds.size(); ++i) {
    const double t = state.momentum * state.thresholds[i] + (1.0 - state.momentum) * q[i];
    state.thresholds[i] = static_cast<float>(t);
  }
  return true;
}

double MotifMap::density() const {
  const double total = static_cast<double>(height) * width * channels;
  return total > 0 ? static_cast<double>(entries.size()) / total : 0.0;
}

std::vector<MotifMap> extract_motifs(const Tensor& activations) {
  if (activations.rank() != 4) {
    throw ShapeError("extract_motifs expects [B,H,W,C], got " + shape_str(activations.shape()));
  }
  const int B = activations.dim(0), H = activations.dim(1), W = activations.dim(2), C = activations.dim(3);
  std::vector<MotifMap> maps(static_cast<std::size_t>(B));
  std::size_t idx = 0;
  for (int b = 0; b < B; ++b) {
    MotifMap& m = maps[static_cast<std::size_t>(b)];
    m.height = H;
    m.width = W;
    m.channels = C;
    for (int r = 0; r < H; ++r) {
      for (int col = 0; col < W; ++col) {
        for (int c = 0; c < C; ++c, ++idx) {
          if (activations[idx] > 0.0f) m.entries.push_back(Motif{r, col, c, activations[idx]});
        }
      }
    }
  }
  return maps;
}

double nonzero_fraction(const Tensor& t) {
  if (t.empty()) return 0.0;
  std::size_t n = 0;
  for (float v : t.data()) n += v > 0.0f ? 1 : 0;
  return static_cast<double>(n) / static_cast<double>(t.size());
}

}  // namespace sparling

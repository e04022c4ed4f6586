#include "distillab/models.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace distillab {

std::string to_string(Arch arch) { return arch == Arch::mlp ? "mlp" : "convnet"; }

Arch parse_arch(const std::string& name) {
  if (name == "mlp") return Arch::mlp;
  if (name == "convnet") return Arch::convnet;
  throw std::invalid_argument("unknown architecture '" + name + "'");
}

void ModelSpec::validate() const {
  if (channels == 0 || height == 0 || width == 0) {
    throw std::invalid_argument("model input shape has a zero extent");
  }
  if (num_classes < 2) throw std::invalid_argument("model needs at least two classes");
  for (std::size_t h : hidden) {
    if (h == 0) throw std::invalid_argument("zero-width layer in model spec");
  }
  if (arch == Arch::convnet) {
    if (hidden.empty()) throw std::invalid_argument("convnet needs at least one conv block");
    std::size_t h = height, w = width;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      h /= 2;
      w /= 2;
    }
    if (h == 0 || w == 0) {
      throw std::invalid_argument("convnet pools the input below 1x1");
    }
  }
}

const Segment& ParamLayout::find(const std::string& name) const {
  for (const Segment& s : segments) {
    if (s.name == name) return s;
  }
  throw std::out_of_range("no parameter segment named '" + name + "'");
}

namespace {

void push(ParamLayout& layout, std::string name, Shape shape) {
  Segment seg{std::move(name), std::move(shape), layout.size};
  layout.size += seg.size();
  layout.segments.push_back(std::move(seg));
}

struct ConvGeometry {
  std::size_t in_channels, height, width, out_channels;
};

std::vector<ConvGeometry> conv_blocks(const ModelSpec& spec) {
  std::vector<ConvGeometry> blocks;
  std::size_t c = spec.channels, h = spec.height, w = spec.width;
  for (std::size_t out : spec.hidden) {
    blocks.push_back({c, h, w, out});
    c = out;
    h /= 2;
    w /= 2;
  }
  return blocks;
}

// Column matrix for a 3x3, padding-1 convolution. Row (b, y, x) holds the
// receptive field ordered (c, ky, kx). `channels_last` selects NHWC input
// indexing; otherwise NCHW.
IndexMap im2col_index(std::size_t batch, const ConvGeometry& g, bool channels_last) {
  const std::size_t cols = g.in_channels * 9;
  auto index = std::make_shared<std::vector<std::int64_t>>(batch * g.height * g.width * cols);
  std::size_t pos = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t y = 0; y < g.height; ++y) {
      for (std::size_t x = 0; x < g.width; ++x) {
        for (std::size_t c = 0; c < g.in_channels; ++c) {
          for (int ky = -1; ky <= 1; ++ky) {
            for (int kx = -1; kx <= 1; ++kx) {
              const auto sy = static_cast<std::int64_t>(y) + ky;
              const auto sx = static_cast<std::int64_t>(x) + kx;
              std::int64_t src = -1;
              if (sy >= 0 && sx >= 0 && sy < static_cast<std::int64_t>(g.height) &&
                  sx < static_cast<std::int64_t>(g.width)) {
                const auto uy = static_cast<std::size_t>(sy), ux = static_cast<std::size_t>(sx);
                const std::size_t flat =
                    channels_last
                        ? ((b * g.height + uy) * g.width + ux) * g.in_channels + c
                        : ((b * g.in_channels + c) * g.height + uy) * g.width + ux;
                src = static_cast<std::int64_t>(flat);
              }
              (*index)[pos++] = src;
            }
          }
        }
      }
    }
  }
  return index;
}

// 2x2 average-pool windows over an NHWC map; output rows are (b, y2, x2, c)
// with the four window taps as columns.
IndexMap pool_index(std::size_t batch, std::size_t h, std::size_t w, std::size_t c) {
  const std::size_t h2 = h / 2, w2 = w / 2;
  auto index = std::make_shared<std::vector<std::int64_t>>(batch * h2 * w2 * c * 4);
  std::size_t pos = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t y = 0; y < h2; ++y) {
      for (std::size_t x = 0; x < w2; ++x) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t dy = 0; dy < 2; ++dy) {
            for (std::size_t dx = 0; dx < 2; ++dx) {
              (*index)[pos++] = static_cast<std::int64_t>(
                  ((b * h + 2 * y + dy) * w + 2 * x + dx) * c + ch);
            }
          }
        }
      }
    }
  }
  return index;
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  const std::size_t out = weight.dim(1);
  return add(matmul(x, weight), repeat_rows(reshape(bias, {1, out}), x.dim(0)));
}

void fill_kaiming(std::vector<double>& values, const Segment& seg, std::size_t fan_in,
                  std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (std::size_t i = 0; i < seg.size(); ++i) values[seg.offset + i] = dist(rng);
}

}  // namespace

ParamLayout param_layout(const ModelSpec& spec) {
  spec.validate();
  ParamLayout layout;
  if (spec.arch == Arch::mlp) {
    std::size_t in = spec.input_size();
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      push(layout, "fc" + std::to_string(i) + ".weight", {in, spec.hidden[i]});
      push(layout, "fc" + std::to_string(i) + ".bias", {spec.hidden[i]});
      in = spec.hidden[i];
    }
  } else {
    const auto blocks = conv_blocks(spec);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      push(layout, "conv" + std::to_string(i) + ".weight",
           {blocks[i].in_channels * 9, blocks[i].out_channels});
      push(layout, "conv" + std::to_string(i) + ".bias", {blocks[i].out_channels});
    }
  }
  const std::size_t features = feature_width(spec);
  push(layout, "head.weight", {features, spec.num_classes});
  push(layout, "head.bias", {spec.num_classes});
  return layout;
}

std::size_t param_count(const ModelSpec& spec) { return param_layout(spec).size; }

std::size_t feature_width(const ModelSpec& spec) {
  if (spec.arch == Arch::mlp) {
    return spec.hidden.empty() ? spec.input_size() : spec.hidden.back();
  }
  std::size_t h = spec.height, w = spec.width;
  for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
    h /= 2;
    w /= 2;
  }
  return h * w * spec.hidden.back();
}

std::vector<Tensor> ParamVector::unflatten() const {
  if (values.numel() != layout.size) {
    throw TensorError("parameter vector has " + std::to_string(values.numel()) +
                      " values, layout expects " + std::to_string(layout.size));
  }
  std::vector<Tensor> parts;
  parts.reserve(layout.segments.size());
  for (const Segment& s : layout.segments) parts.push_back(slice(values, s.offset, s.shape));
  return parts;
}

ParamVector ParamVector::flatten(ParamLayout layout, const std::vector<Tensor>& parts) {
  if (parts.size() != layout.segments.size()) {
    throw TensorError("flatten: expected " + std::to_string(layout.segments.size()) + " parts");
  }
  std::vector<Tensor> flat;
  flat.reserve(parts.size());
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].shape() != layout.segments[i].shape) {
      throw TensorError("flatten: segment '" + layout.segments[i].name + "' has shape " +
                        to_string(parts[i].shape()));
    }
    flat.push_back(reshape(parts[i], {parts[i].numel()}));
  }
  return {std::move(layout), concat(flat)};
}

ParamVector init_model(const ModelSpec& spec, std::uint64_t seed) {
  ParamLayout layout = param_layout(spec);
  std::vector<double> values(layout.size, 0.0);
  std::mt19937_64 rng(seed);
  for (const Segment& seg : layout.segments) {
    if (seg.shape.size() != 2) continue;  // biases stay zero
    if (spec.zero_init_head && seg.name == "head.weight") continue;
    fill_kaiming(values, seg, seg.shape[0], rng);
  }
  Tensor t = Tensor::from({layout.size}, std::move(values));
  return {std::move(layout), std::move(t)};
}

ForwardResult forward(const ModelSpec& spec, const Tensor& params, const Tensor& x) {
  const ParamLayout layout = param_layout(spec);
  if (params.numel() != layout.size) {
    throw TensorError("forward: expected " + std::to_string(layout.size) + " parameters, got " +
                      std::to_string(params.numel()));
  }
  if (x.rank() != 4 || x.dim(1) != spec.channels || x.dim(2) != spec.height ||
      x.dim(3) != spec.width) {
    throw TensorError("forward: input " + to_string(x.shape()) + " does not match model input [Bx" +
                      std::to_string(spec.channels) + "x" + std::to_string(spec.height) + "x" +
                      std::to_string(spec.width) + "]");
  }
  auto seg = [&](const std::string& name) {
    const Segment& s = layout.find(name);
    return slice(params, s.offset, s.shape);
  };
  const std::size_t batch = x.dim(0);
  Tensor h;
  if (spec.arch == Arch::mlp) {
    h = flatten_rows(x);
    for (std::size_t i = 0; i < spec.hidden.size(); ++i) {
      const std::string prefix = "fc" + std::to_string(i);
      h = relu(linear(h, seg(prefix + ".weight"), seg(prefix + ".bias")));
    }
  } else {
    h = x;
    bool channels_last = false;
    const auto blocks = conv_blocks(spec);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const ConvGeometry& g = blocks[i];
      const std::string prefix = "conv" + std::to_string(i);
      Tensor cols = gather(h, im2col_index(batch, g, channels_last),
                           {batch * g.height * g.width, g.in_channels * 9});
      Tensor act = relu(linear(cols, seg(prefix + ".weight"), seg(prefix + ".bias")));
      const std::size_t h2 = g.height / 2, w2 = g.width / 2;
      Tensor windows = gather(act, pool_index(batch, g.height, g.width, g.out_channels),
                              {batch * h2 * w2 * g.out_channels, 4});
      h = scale(row_sum(windows), 0.25);
      channels_last = true;
    }
    h = reshape(h, {batch, feature_width(spec)});
  }
  Tensor logits = linear(h, seg("head.weight"), seg("head.bias"));
  return {std::move(logits), std::move(h)};
}

ForwardResult forward(const ModelSpec& spec, const ParamVector& params, const Tensor& x) {
  return forward(spec, params.values, x);
}

ParamLayout ProjectionHead::layout() const {
  ParamLayout l;
  push(l, "proj0.weight", {in, hidden});
  push(l, "proj0.bias", {hidden});
  push(l, "proj1.weight", {hidden, out});
  push(l, "proj1.bias", {out});
  return l;
}

ProjectionHead init_projection_head(std::size_t in, std::size_t out, std::uint64_t seed) {
  return init_projection_head(in, in, out, seed);
}

ProjectionHead init_projection_head(std::size_t in, std::size_t hidden, std::size_t out,
                                    std::uint64_t seed) {
  if (in == 0 || hidden == 0 || out == 0) {
    throw std::invalid_argument("projection head with a zero-width layer");
  }
  ProjectionHead head{in, hidden, out, {}};
  const ParamLayout l = head.layout();
  std::vector<double> values(l.size, 0.0);
  std::mt19937_64 rng(seed);
  for (const Segment& seg : l.segments) {
    if (seg.shape.size() == 2) fill_kaiming(values, seg, seg.shape[0], rng);
  }
  head.params = Tensor::from({l.size}, std::move(values));
  return head;
}

Tensor project(const ProjectionHead& head, const Tensor& params, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != head.in) {
    throw TensorError("project: features " + to_string(features.shape()) +
                      " do not match head input width " + std::to_string(head.in));
  }
  const ParamLayout l = head.layout();
  if (params.numel() != l.size) throw TensorError("project: wrong parameter count");
  auto seg = [&](const char* name) {
    const Segment& s = l.find(name);
    return slice(params, s.offset, s.shape);
  };
  Tensor h = relu(linear(features, seg("proj0.weight"), seg("proj0.bias")));
  return linear(h, seg("proj1.weight"), seg("proj1.bias"));
}

Tensor project(const ProjectionHead& head, const Tensor& features) {
  return project(head, head.params, features);
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    throw TensorError("accuracy: logits " + to_string(logits.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) return 0.0;
  const std::size_t k = logits.dim(1);
  const auto d = logits.data();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = d.subspan(i * k, k);
    const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    if (best == labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace distillab

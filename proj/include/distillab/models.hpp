#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "distillab/tensor.hpp"

namespace distillab {

enum class Arch { mlp, convnet };

std::string to_string(Arch arch);
Arch parse_arch(const std::string& name);

/// Architecture description. For `mlp`, `hidden` lists layer widths; for
/// `convnet` it lists the channel counts of the conv blocks
/// (3x3 conv, relu, 2x2 average pool).
struct ModelSpec {
  Arch arch = Arch::mlp;
  std::size_t channels = 1;
  std::size_t height = 14;
  std::size_t width = 14;
  std::vector<std::size_t> hidden{64, 64};
  std::size_t num_classes = 4;
  // Start the classification layer at zero instead of Kaiming-uniform.
  bool zero_init_head = false;

  void validate() const;
  std::size_t input_size() const { return channels * height * width; }
  bool operator==(const ModelSpec&) const = default;
};

struct Segment {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t size() const { return numel_of(shape); }
};

/// Where each named parameter lives inside the flat vector.
struct ParamLayout {
  std::vector<Segment> segments;
  std::size_t size = 0;

  const Segment& find(const std::string& name) const;
};

ParamLayout param_layout(const ModelSpec& spec);
std::size_t param_count(const ModelSpec& spec);
/// Width of the penultimate activations fed to the classifier.
std::size_t feature_width(const ModelSpec& spec);

/// Flat parameter vector plus its segment table.
struct ParamVector {
  ParamLayout layout;
  Tensor values;

  /// One tensor per segment, in layout order, each a view into `values`.
  std::vector<Tensor> unflatten() const;
  static ParamVector flatten(ParamLayout layout, const std::vector<Tensor>& parts);
};

/// Kaiming-uniform weights (bound sqrt(6 / fan_in)), zero biases.
ParamVector init_model(const ModelSpec& spec, std::uint64_t seed);

struct ForwardResult {
  Tensor logits;    // [B x K]
  Tensor features;  // [B x F], penultimate activations
};

/// `params` is the flat parameter vector; it may be any tracked tensor of the
/// right length (e.g. a student mid-way through an unrolled inner loop).
ForwardResult forward(const ModelSpec& spec, const Tensor& params, const Tensor& x);
ForwardResult forward(const ModelSpec& spec, const ParamVector& params, const Tensor& x);

/// Two affine layers with a relu between: F -> hidden -> out.
struct ProjectionHead {
  std::size_t in = 0;
  std::size_t hidden = 0;
  std::size_t out = 32;
  Tensor params;

  ParamLayout layout() const;
};

ProjectionHead init_projection_head(std::size_t in, std::size_t out, std::uint64_t seed);
ProjectionHead init_projection_head(std::size_t in, std::size_t hidden, std::size_t out,
                                    std::uint64_t seed);

/// Projection with explicit parameters, for heads being updated in a graph.
Tensor project(const ProjectionHead& head, const Tensor& params, const Tensor& features);
Tensor project(const ProjectionHead& head, const Tensor& features);

/// Top-1 accuracy of argmax(logits) against labels.
double accuracy(const Tensor& logits, std::span<const int> labels);

}  // namespace distillab

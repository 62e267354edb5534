//
// Copyright 2026 The vflafe Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#ifndef VFLAFE_NEURAL_H_
#define VFLAFE_NEURAL_H_

#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "vflafe/numerics.h"

namespace vflafe {

enum class Activation : std::uint32_t {
  kIdentity = 0,
  kRelu = 1,
  kTanh = 2,
  kSoftmax = 3,  // final layer only
};

inline const char* ActivationName(Activation a) {
  switch (a) {
    case Activation::kIdentity: return "identity";
    case Activation::kRelu: return "relu";
    case Activation::kTanh: return "tanh";
    case Activation::kSoftmax: return "softmax";
  }
  return "unknown";
}

// y = act(x * weights + bias); weights is in_dim x out_dim.
struct DenseLayer {
  Matrix weights;
  std::vector<double> bias;
  Activation activation = Activation::kIdentity;

  std::size_t in_dim() const { return weights.rows(); }
  std::size_t out_dim() const { return weights.cols(); }
};

struct LayerGradients {
  Matrix weights;
  std::vector<double> bias;
};

using ParamGradients = std::vector<LayerGradients>;

struct TrainingConfig {
  double learning_rate = 1e-2;
  double weight_decay = 1e-4;
  std::size_t batch_size = 64;
  std::size_t epochs = 20;
  double alpha = 0.1;  // distance-distribution loss weight
  double beta = 1.0;   // contrastive loss weight
  std::uint64_t seed = 1;

  void Validate() const {
    if (!(learning_rate > 0.0)) {
      throw std::invalid_argument("TrainingConfig: learning_rate must be > 0");
    }
    if (!(weight_decay >= 0.0)) {
      throw std::invalid_argument("TrainingConfig: weight_decay must be >= 0");
    }
    if (batch_size < 2) {
      throw std::invalid_argument("TrainingConfig: batch_size must be >= 2");
    }
  }
};

inline Matrix Softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto in = logits.row(i);
    auto o = out.row(i);
    double mx = in.empty() ? 0.0 : in[0];
    for (double v : in) mx = std::max(mx, v);
    double sum = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    for (double& v : o) v /= sum;
  }
  return out;
}

class DenseNet {
 public:
  DenseNet() = default;

  explicit DenseNet(std::vector<DenseLayer> layers) : layers_(std::move(layers)) {
    Validate();
  }

  // Glorot-uniform weights, zero bias. dims has one more entry than
  // activations.
  static DenseNet Create(std::span<const std::size_t> dims,
                         std::span<const Activation> activations, Rng& rng) {
    if (dims.size() != activations.size() + 1 || activations.empty()) {
      throw std::invalid_argument(
          "DenseNet::Create: need dims.size() == activations.size() + 1");
    }
    std::vector<DenseLayer> layers;
    for (std::size_t l = 0; l < activations.size(); ++l) {
      DenseLayer layer;
      layer.weights = Matrix(dims[l], dims[l + 1]);
      const double limit =
          std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
      for (double& w : layer.weights.data())
        w = (2.0 * rng.Uniform() - 1.0) * limit;
      layer.bias.assign(dims[l + 1], 0.0);
      layer.activation = activations[l];
      layers.push_back(std::move(layer));
    }
    return DenseNet(std::move(layers));
  }

  std::size_t input_dim() const {
    return layers_.empty() ? 0 : layers_.front().in_dim();
  }
  std::size_t output_dim() const {
    return layers_.empty() ? 0 : layers_.back().out_dim();
  }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.weights.size() + l.bias.size();
    return n;
  }

  const std::vector<DenseLayer>& layers() const { return layers_; }
  std::vector<DenseLayer>& mutable_layers() { return layers_; }

  // Runs the net and caches per-layer inputs and outputs for Backward.
  Matrix Forward(const Matrix& x) {
    CheckInput(x);
    inputs_.clear();
    outputs_.clear();
    Matrix current = x;
    for (const DenseLayer& layer : layers_) {
      inputs_.push_back(current);
      current = ApplyLayer(layer, current);
      outputs_.push_back(current);
    }
    has_cache_ = true;
    return current;
  }

  // Forward without touching the cache.
  Matrix Predict(const Matrix& x) const {
    CheckInput(x);
    Matrix current = x;
    for (const DenseLayer& layer : layers_) current = ApplyLayer(layer, current);
    return current;
  }

  struct Gradients {
    ParamGradients params;
    Matrix input;  // d loss / d input
  };

  // Chain rule from d loss / d output back through the cached forward pass.
  Gradients Backward(const Matrix& upstream) const {
    if (!has_cache_) {
      throw std::logic_error("DenseNet::Backward called before Forward");
    }
    const Matrix& last = outputs_.back();
    if (upstream.rows() != last.rows() || upstream.cols() != last.cols()) {
      throw std::invalid_argument("DenseNet::Backward: upstream shape mismatch");
    }
    Gradients result;
    result.params.resize(layers_.size());
    Matrix grad = upstream;
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const DenseLayer& layer = layers_[l];
      const Matrix& out = outputs_[l];
      // Through the activation.
      switch (layer.activation) {
        case Activation::kIdentity:
          break;
        case Activation::kRelu:
          for (std::size_t i = 0; i < grad.size(); ++i)
            if (out.data()[i] <= 0.0) grad.data()[i] = 0.0;
          break;
        case Activation::kTanh:
          for (std::size_t i = 0; i < grad.size(); ++i) {
            const double y = out.data()[i];
            grad.data()[i] *= 1.0 - y * y;
          }
          break;
        case Activation::kSoftmax:
          for (std::size_t i = 0; i < grad.rows(); ++i) {
            auto g = grad.row(i);
            auto p = out.row(i);
            const double gp = Dot(g, p);
            for (std::size_t j = 0; j < g.size(); ++j) g[j] = p[j] * (g[j] - gp);
          }
          break;
      }
      LayerGradients& lg = result.params[l];
      lg.weights = MatMulTransposeA(inputs_[l], grad);
      lg.bias.assign(layer.out_dim(), 0.0);
      for (std::size_t i = 0; i < grad.rows(); ++i)
        for (std::size_t j = 0; j < grad.cols(); ++j) lg.bias[j] += grad(i, j);
      grad = MatMulTransposeB(grad, layer.weights);
    }
    result.input = std::move(grad);
    return result;
  }

 private:
  void Validate() const {
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const DenseLayer& layer = layers_[l];
      if (layer.bias.size() != layer.out_dim()) {
        throw std::invalid_argument("DenseNet: layer " + std::to_string(l) +
                                    " bias length mismatch");
      }
      if (l + 1 < layers_.size() &&
          layer.out_dim() != layers_[l + 1].in_dim()) {
        throw std::invalid_argument("DenseNet: layer " + std::to_string(l) +
                                    " output does not chain into layer " +
                                    std::to_string(l + 1));
      }
      if (layer.activation == Activation::kSoftmax && l + 1 != layers_.size()) {
        throw std::invalid_argument(
            "DenseNet: softmax is only allowed as the final activation");
      }
    }
  }

  void CheckInput(const Matrix& x) const {
    if (layers_.empty()) throw std::logic_error("DenseNet: no layers");
    if (x.cols() != input_dim()) {
      throw std::invalid_argument(
          "DenseNet: input has " + std::to_string(x.cols()) +
          " columns, expected " + std::to_string(input_dim()));
    }
  }

  static Matrix ApplyLayer(const DenseLayer& layer, const Matrix& x) {
    Matrix y = MatMul(x, layer.weights);
    for (std::size_t i = 0; i < y.rows(); ++i) {
      auto r = y.row(i);
      for (std::size_t j = 0; j < r.size(); ++j) r[j] += layer.bias[j];
    }
    switch (layer.activation) {
      case Activation::kIdentity:
        break;
      case Activation::kRelu:
        for (double& v : y.data()) v = v > 0.0 ? v : 0.0;
        break;
      case Activation::kTanh:
        for (double& v : y.data()) v = std::tanh(v);
        break;
      case Activation::kSoftmax:
        y = Softmax(y);
        break;
    }
    return y;
  }

  std::vector<DenseLayer> layers_;
  std::vector<Matrix> inputs_;
  std::vector<Matrix> outputs_;
  bool has_cache_ = false;
};

struct LossAndGradient {
  double loss = 0.0;
  Matrix gradient;
};

// Mean softmax cross-entropy over the batch; gradient is (softmax - onehot)/n.
inline LossAndGradient CrossEntropySoftmax(const Matrix& logits,
                                           std::span<const int> labels) {
  if (labels.size() != logits.rows()) {
    throw std::invalid_argument("CrossEntropySoftmax: label count mismatch");
  }
  const double n = static_cast<double>(logits.rows());
  LossAndGradient out;
  out.gradient = Softmax(logits);
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) {
      throw std::invalid_argument("CrossEntropySoftmax: label " +
                                  std::to_string(y) + " out of range");
    }
    // log-sum-exp form keeps confident logits finite.
    auto row = logits.row(i);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : row) sum += std::exp(v - mx);
    out.loss += std::log(sum) + mx - row[static_cast<std::size_t>(y)];
    out.gradient(i, static_cast<std::size_t>(y)) -= 1.0;
  }
  out.loss /= n;
  out.gradient *= 1.0 / n;
  return out;
}

// Mean over all entries of (pred - target)^2.
inline LossAndGradient MeanSquaredError(const Matrix& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
    throw std::invalid_argument("MeanSquaredError: shape mismatch");
  }
  LossAndGradient out;
  out.gradient = Matrix(pred.rows(), pred.cols());
  const double count = static_cast<double>(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double diff = pred.data()[i] - target.data()[i];
    out.loss += diff * diff;
    out.gradient.data()[i] = 2.0 * diff / count;
  }
  out.loss /= count;
  return out;
}

inline std::vector<int> ArgmaxRows(const Matrix& m) {
  std::vector<int> out(m.rows(), 0);
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    std::size_t best = 0;
    for (std::size_t j = 1; j < r.size(); ++j)
      if (r[j] > r[best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

// theta <- theta - lr * (grad + weight_decay * theta). Weight decay is the
// gradient of (weight_decay / 2) * ||theta||^2.
inline void SgdStep(DenseNet& net, const ParamGradients& grads,
                    const TrainingConfig& config) {
  auto& layers = net.mutable_layers();
  if (grads.size() != layers.size()) {
    throw std::invalid_argument("SgdStep: gradient layer count mismatch");
  }
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (grads[l].weights.rows() != layers[l].weights.rows() ||
        grads[l].weights.cols() != layers[l].weights.cols() ||
        grads[l].bias.size() != layers[l].bias.size()) {
      throw std::invalid_argument("SgdStep: gradient shape mismatch at layer " +
                                  std::to_string(l));
    }
  }
  const double lr = config.learning_rate;
  const double wd = config.weight_decay;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto w = layers[l].weights.data();
    auto g = grads[l].weights.data();
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * (g[i] + wd * w[i]);
    auto& b = layers[l].bias;
    for (std::size_t i = 0; i < b.size(); ++i)
      b[i] -= lr * (grads[l].bias[i] + wd * b[i]);
  }
}

// Checkpoint layout, all integers and doubles little-endian:
//
//   u8[4]  magic "VFLN"
//   u32    format version (1)
//   u32    layer count L
//   L x {  u32 in_dim, u32 out_dim, u32 activation tag,
//          f64[in_dim * out_dim] weights (row-major), f64[out_dim] bias }
//   u64    FNV-1a 64 hash of every preceding byte
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace internal {

inline std::uint64_t Fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

class ByteWriter {
 public:
  void U32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void U64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void F64(double v) { U64(std::bit_cast<std::uint64_t>(v)); }
  void Raw(std::span<const std::uint8_t> b) { bytes_.insert(bytes_.end(), b.begin(), b.end()); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}
  std::uint32_t U32() {
    Need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t U64() {
    Need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  double F64() { return std::bit_cast<double>(U64()); }
  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void Need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw CheckpointError("checkpoint truncated");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace internal

inline std::vector<std::uint8_t> SerializeNet(const DenseNet& net) {
  internal::ByteWriter w;
  const std::uint8_t magic[4] = {'V', 'F', 'L', 'N'};
  w.Raw(magic);
  w.U32(1);
  w.U32(static_cast<std::uint32_t>(net.layers().size()));
  for (const DenseLayer& layer : net.layers()) {
    w.U32(static_cast<std::uint32_t>(layer.in_dim()));
    w.U32(static_cast<std::uint32_t>(layer.out_dim()));
    w.U32(static_cast<std::uint32_t>(layer.activation));
    for (double v : layer.weights.data()) w.F64(v);
    for (double v : layer.bias) w.F64(v);
  }
  const std::uint64_t hash = internal::Fnv1a64(w.bytes());
  w.U64(hash);
  return std::move(w.bytes());
}

inline DenseNet DeserializeNet(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 + 4 + 4 + 8) throw CheckpointError("checkpoint truncated");
  if (bytes[0] != 'V' || bytes[1] != 'F' || bytes[2] != 'L' || bytes[3] != 'N') {
    throw CheckpointError("checkpoint has bad magic");
  }
  const auto body = bytes.first(bytes.size() - 8);
  internal::ByteReader tail(bytes.last(8));
  if (internal::Fnv1a64(body) != tail.U64()) {
    throw CheckpointError("checkpoint checksum mismatch");
  }
  internal::ByteReader r(body.subspan(4));
  if (const std::uint32_t version = r.U32(); version != 1) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.U32();
  std::vector<DenseLayer> layers;
  for (std::uint32_t l = 0; l < count; ++l) {
    const std::uint32_t in = r.U32();
    const std::uint32_t out = r.U32();
    const std::uint32_t tag = r.U32();
    if (tag > static_cast<std::uint32_t>(Activation::kSoftmax)) {
      throw CheckpointError("checkpoint has unknown activation tag");
    }
    if (r.remaining() / 8 < static_cast<std::size_t>(in) * out + out) {
      throw CheckpointError("checkpoint truncated");
    }
    DenseLayer layer;
    layer.weights = Matrix(in, out);
    for (double& v : layer.weights.data()) v = r.F64();
    layer.bias.resize(out);
    for (double& v : layer.bias) v = r.F64();
    layer.activation = static_cast<Activation>(tag);
    layers.push_back(std::move(layer));
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  try {
    return DenseNet(std::move(layers));
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(std::string("checkpoint describes invalid net: ") + e.what());
  }
}

inline void SaveCheckpoint(const DenseNet& net, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = SerializeNet(net);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("failed writing " + path.string());
}

inline DenseNet LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return DeserializeNet(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace vflafe

#endif  // VFLAFE_NEURAL_H_

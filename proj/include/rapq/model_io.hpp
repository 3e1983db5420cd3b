/*
 * Copyright (c) 2026 RAPQ Contributors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#ifndef RAPQ_MODEL_IO_HPP
#define RAPQ_MODEL_IO_HPP

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "rapq/quantizer.hpp"
#include "rapq/rng.hpp"
#include "rapq/tensor.hpp"

namespace rapq {

// On-disk element types. U2 packs four 2-bit values per byte, low bits first.
enum class DType : std::uint8_t { F32 = 0, I32 = 1, I8 = 2, U8 = 3, U2 = 4 };

const char* dtype_name(DType t);

struct BlobTensor {
  DType dtype = DType::F32;
  Shape shape;
  std::vector<float> f32;         // F32 payloads
  std::vector<std::int32_t> i32;  // all integer payloads, widened in memory

  Index numel() const { return shape_numel(shape); }
};

// Named-tensor container. File layout ("RAPQ" format, little-endian):
//   magic "RAPQ" | version u32 | count u32
//   per entry: name_len u32 | name | dtype u8 | rank u32 | extents u64[rank]
//              | payload offset u64 (absolute) | payload bytes u64
//   payloads, contiguous, in entry order
class BlobFile {
 public:
  void put_f32(const std::string& name, TensorF tensor);
  void put_i32(const std::string& name, const TensorI& tensor, DType storage);

  bool has(const std::string& name) const;
  const BlobTensor& get(const std::string& name) const;  // missing name -> E_DANGLING
  TensorF f32(const std::string& name) const;
  TensorI i32(const std::string& name) const;

  const std::vector<std::pair<std::string, BlobTensor>>& entries() const { return entries_; }

  void save(const std::string& path) const;
  static BlobFile load(const std::string& path);

 private:
  std::vector<std::pair<std::string, BlobTensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

constexpr std::uint32_t kBlobVersion = 1;

struct GraphNode {
  std::string id;
  std::string kind;  // conv2d | bn | relu | add | linear | flatten
  std::vector<std::string> inputs;
  Index stride = 1;  // conv2d
  Index pad = 0;     // conv2d
  std::string weight, bias;              // conv2d, linear
  std::string gamma, beta, mean, var;    // bn
  float epsilon = 1e-5f;                 // bn
};

// DAG over named nodes; "input" is the reserved placeholder id.
struct ModelGraph {
  Shape input_shape;  // per-sample CHW
  std::vector<GraphNode> nodes;  // topologically ordered after validate()
  std::string output;

  bool has_node(const std::string& id) const;
  const GraphNode& node(const std::string& id) const;
  std::vector<std::string> consumers(const std::string& id) const;

  // Topologically sorts nodes; rejects cycles, unknown inputs, missing blob
  // references (when weights given), and BN nodes not fed by conv/linear.
  void validate(const BlobFile* weights);
};

std::string graph_to_json(const ModelGraph& graph);
ModelGraph graph_from_json(const std::string& text);

struct Model {
  ModelGraph graph;
  BlobFile weights;
};

Model load_model(const std::string& graph_path, const std::string& weights_path);
void save_model(const Model& model, const std::string& graph_path,
                const std::string& weights_path);

struct CalibrationSet {
  TensorF images;          // (count, C, H, W)
  std::vector<int> labels;  // empty when the file carries no labels
  Index count() const { return images.dim(0); }
};

CalibrationSet load_calibration(const std::string& path, const Shape& expected_chw);
void save_calibration(const CalibrationSet& set, const std::string& path);

// count distinct indices drawn uniformly from [0, pool).
std::vector<Index> sample_indices(Index pool, Index count, Rng& rng);

struct LayerQuant {
  std::string node_id;
  std::vector<QuantParams> weight_q;  // hardened, one per output channel
  TensorI q_weight;                   // codes in [0, 2^b - 1], weight shape
  TensorI q_bias;                     // int32 at scale 2^(e_w + e_in)
};

struct ActQuant {
  std::string node_id;  // producer whose output this quantizer covers
  QuantParams q;        // hardened, per-tensor
};

struct QuantizedModel {
  ModelGraph graph;  // BN already folded away
  int weight_bits = 8;
  int act_bits = 8;
  bool bn_folded = true;
  std::vector<LayerQuant> layers;
  std::vector<ActQuant> acts;

  const LayerQuant& layer(const std::string& node_id) const;
  const ActQuant& act(const std::string& node_id) const;
  bool has_act(const std::string& node_id) const;
};

// Single-file container: the graph and quantizer metadata ride along as an
// embedded JSON manifest entry; payloads use the narrowest dtype (U2 for
// 2-bit codes, U8 up to 8 bits, I8 exponents, I32 biases).
void save_quantized(const QuantizedModel& model, const std::string& path);
QuantizedModel load_quantized(const std::string& path);

}  // namespace rapq

#endif  // RAPQ_MODEL_IO_HPP

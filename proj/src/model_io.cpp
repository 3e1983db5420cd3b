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

#include "rapq/model_io.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <set>

#include "json.hpp"

#include "rapq/error.hpp"

namespace rapq {

namespace {

using json = nlohmann::json;

void append_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& buf) : buf_(buf) {}

  std::uint32_t u32() { return static_cast<std::uint32_t>(bytes(4)); }
  std::uint64_t u64() { return bytes(8); }
  std::uint8_t u8() { return static_cast<std::uint8_t>(bytes(1)); }

  std::string str(std::size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t size() const { return buf_.size(); }

 private:
  std::uint64_t bytes(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  void need(std::size_t n) {
    if (pos_ + n > buf_.size())
      raise(ErrorCode::ExtentMismatch, "blob file truncated while reading header");
  }

  const std::string& buf_;
  std::size_t pos_ = 0;
};

std::uint64_t payload_bytes(DType t, Index numel) {
  switch (t) {
    case DType::F32:
    case DType::I32:
      return static_cast<std::uint64_t>(numel) * 4;
    case DType::I8:
    case DType::U8:
      return static_cast<std::uint64_t>(numel);
    case DType::U2:
      return static_cast<std::uint64_t>((numel + 3) / 4);
  }
  raise(ErrorCode::InvalidArgument, "unknown dtype code");
}

void check_payload_range(const std::vector<std::int32_t>& v, DType t) {
  std::int32_t lo = 0, hi = 0;
  switch (t) {
    case DType::I32:
      return;
    case DType::I8:
      lo = -128;
      hi = 127;
      break;
    case DType::U8:
      lo = 0;
      hi = 255;
      break;
    case DType::U2:
      lo = 0;
      hi = 3;
      break;
    default:
      raise(ErrorCode::InvalidArgument, "integer payload with float dtype");
  }
  for (std::int32_t x : v)
    if (x < lo || x > hi)
      raise(ErrorCode::PayloadRange, std::string("payload value ") + std::to_string(x) +
                                         " outside " + dtype_name(t) + " range");
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) raise(ErrorCode::Io, "read failure on " + path);
  return buf;
}

void write_file(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) raise(ErrorCode::Io, "write failure on " + path);
}

}  // namespace

const char* dtype_name(DType t) {
  switch (t) {
    case DType::F32:
      return "f32";
    case DType::I32:
      return "i32";
    case DType::I8:
      return "i8";
    case DType::U8:
      return "u8";
    case DType::U2:
      return "u2";
  }
  return "unknown";
}

void BlobFile::put_f32(const std::string& name, TensorF tensor) {
  if (index_.count(name)) raise(ErrorCode::InvalidArgument, "duplicate tensor name " + name);
  BlobTensor t;
  t.dtype = DType::F32;
  t.shape = tensor.shape();
  t.f32.assign(tensor.data(), tensor.data() + tensor.numel());
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(t));
}

void BlobFile::put_i32(const std::string& name, const TensorI& tensor, DType storage) {
  if (index_.count(name)) raise(ErrorCode::InvalidArgument, "duplicate tensor name " + name);
  BlobTensor t;
  t.dtype = storage;
  t.shape = tensor.shape();
  t.i32.assign(tensor.data(), tensor.data() + tensor.numel());
  check_payload_range(t.i32, storage);
  index_[name] = entries_.size();
  entries_.emplace_back(name, std::move(t));
}

bool BlobFile::has(const std::string& name) const { return index_.count(name) != 0; }

const BlobTensor& BlobFile::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    raise(ErrorCode::DanglingBlob, "referenced tensor \"" + name + "\" is not in the blob");
  return entries_[it->second].second;
}

TensorF BlobFile::f32(const std::string& name) const {
  const BlobTensor& t = get(name);
  if (t.dtype != DType::F32)
    raise(ErrorCode::InvalidArgument, "tensor " + name + " is not f32");
  TensorF out(t.shape);
  std::copy(t.f32.begin(), t.f32.end(), out.data());
  return out;
}

TensorI BlobFile::i32(const std::string& name) const {
  const BlobTensor& t = get(name);
  if (t.dtype == DType::F32)
    raise(ErrorCode::InvalidArgument, "tensor " + name + " is not integer");
  TensorI out(t.shape);
  std::copy(t.i32.begin(), t.i32.end(), out.data());
  return out;
}

void BlobFile::save(const std::string& path) const {
  std::string header;
  header += "RAPQ";
  append_u32(header, kBlobVersion);
  append_u32(header, static_cast<std::uint32_t>(entries_.size()));

  // Header size must be known before offsets can be pinned; lay out in two
  // passes with a dry run for the table size.
  std::size_t table_size = 0;
  for (const auto& [name, t] : entries_)
    table_size += 4 + name.size() + 1 + 4 + 8 * t.shape.size() + 8 + 8;

  std::uint64_t offset = header.size() + table_size;
  std::string payload;
  for (const auto& [name, t] : entries_) {
    append_u32(header, static_cast<std::uint32_t>(name.size()));
    header += name;
    header.push_back(static_cast<char>(t.dtype));
    append_u32(header, static_cast<std::uint32_t>(t.shape.size()));
    for (Index e : t.shape) append_u64(header, static_cast<std::uint64_t>(e));
    const std::uint64_t nbytes = payload_bytes(t.dtype, t.numel());
    append_u64(header, offset);
    append_u64(header, nbytes);
    offset += nbytes;

    switch (t.dtype) {
      case DType::F32:
        for (float v : t.f32) {
          std::uint32_t bits;
          std::memcpy(&bits, &v, 4);
          append_u32(payload, bits);
        }
        break;
      case DType::I32:
        for (std::int32_t v : t.i32) append_u32(payload, static_cast<std::uint32_t>(v));
        break;
      case DType::I8:
      case DType::U8:
        check_payload_range(t.i32, t.dtype);
        for (std::int32_t v : t.i32) payload.push_back(static_cast<char>(v & 0xff));
        break;
      case DType::U2: {
        check_payload_range(t.i32, t.dtype);
        for (std::size_t i = 0; i < t.i32.size(); i += 4) {
          unsigned byte = 0;
          for (std::size_t j = 0; j < 4 && i + j < t.i32.size(); ++j)
            byte |= static_cast<unsigned>(t.i32[i + j]) << (2 * j);
          payload.push_back(static_cast<char>(byte));
        }
        break;
      }
    }
  }
  write_file(path, header + payload);
}

BlobFile BlobFile::load(const std::string& path) {
  const std::string buf = read_file(path);
  ByteReader r(buf);
  if (r.str(4) != "RAPQ") raise(ErrorCode::Magic, "bad magic in " + path);
  const std::uint32_t version = r.u32();
  if (version != kBlobVersion)
    raise(ErrorCode::Version, "unsupported blob version " + std::to_string(version));
  const std::uint32_t count = r.u32();

  BlobFile blob;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    const std::string name = r.str(name_len);
    const std::uint8_t dtype_code = r.u8();
    if (dtype_code > static_cast<std::uint8_t>(DType::U2))
      raise(ErrorCode::InvalidArgument, "unknown dtype code in " + path);
    const DType dtype = static_cast<DType>(dtype_code);
    const std::uint32_t rank = r.u32();
    Shape shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<Index>(r.u64());
    const std::uint64_t offset = r.u64();
    const std::uint64_t nbytes = r.u64();

    const Index numel = shape_numel(shape);
    if (nbytes != payload_bytes(dtype, numel))
      raise(ErrorCode::ExtentMismatch, "tensor " + name + " payload size disagrees with extents");
    if (offset + nbytes > buf.size())
      raise(ErrorCode::ExtentMismatch, "tensor " + name + " payload extends past end of file");

    BlobTensor t;
    t.dtype = dtype;
    t.shape = shape;
    const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data()) + offset;
    switch (dtype) {
      case DType::F32:
        t.f32.resize(static_cast<std::size_t>(numel));
        for (Index k = 0; k < numel; ++k) {
          std::uint32_t bits = 0;
          for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(p[4 * k + b]) << (8 * b);
          std::memcpy(&t.f32[static_cast<std::size_t>(k)], &bits, 4);
        }
        break;
      case DType::I32:
        t.i32.resize(static_cast<std::size_t>(numel));
        for (Index k = 0; k < numel; ++k) {
          std::uint32_t bits = 0;
          for (int b = 0; b < 4; ++b)
            bits |= static_cast<std::uint32_t>(p[4 * k + b]) << (8 * b);
          t.i32[static_cast<std::size_t>(k)] = static_cast<std::int32_t>(bits);
        }
        break;
      case DType::I8:
        t.i32.resize(static_cast<std::size_t>(numel));
        for (Index k = 0; k < numel; ++k)
          t.i32[static_cast<std::size_t>(k)] = static_cast<std::int8_t>(p[k]);
        break;
      case DType::U8:
        t.i32.resize(static_cast<std::size_t>(numel));
        for (Index k = 0; k < numel; ++k)
          t.i32[static_cast<std::size_t>(k)] = p[k];
        break;
      case DType::U2:
        t.i32.resize(static_cast<std::size_t>(numel));
        for (Index k = 0; k < numel; ++k)
          t.i32[static_cast<std::size_t>(k)] = (p[k / 4] >> (2 * (k % 4))) & 0x3;
        break;
    }
    blob.index_[name] = blob.entries_.size();
    blob.entries_.emplace_back(name, std::move(t));
  }
  return blob;
}

bool ModelGraph::has_node(const std::string& id) const {
  for (const GraphNode& n : nodes)
    if (n.id == id) return true;
  return false;
}

const GraphNode& ModelGraph::node(const std::string& id) const {
  for (const GraphNode& n : nodes)
    if (n.id == id) return n;
  raise(ErrorCode::InvalidArgument, "unknown graph node " + id);
}

std::vector<std::string> ModelGraph::consumers(const std::string& id) const {
  std::vector<std::string> out;
  for (const GraphNode& n : nodes)
    for (const std::string& in : n.inputs)
      if (in == id) {
        out.push_back(n.id);
        break;
      }
  return out;
}

void ModelGraph::validate(const BlobFile* weights) {
  static const std::set<std::string> kKinds = {"conv2d", "bn", "relu", "add", "linear",
                                               "flatten"};
  if (input_shape.size() != 3)
    raise(ErrorCode::InvalidArgument, "graph input_shape must be CHW, got " +
                                          shape_string(input_shape));
  std::map<std::string, const GraphNode*> by_id;
  for (const GraphNode& n : nodes) {
    if (n.id == "input" || n.id.empty())
      raise(ErrorCode::InvalidArgument, "node id \"" + n.id + "\" is reserved or empty");
    if (!by_id.emplace(n.id, &n).second)
      raise(ErrorCode::InvalidArgument, "duplicate node id " + n.id);
    if (!kKinds.count(n.kind))
      raise(ErrorCode::InvalidArgument, "unknown node kind " + n.kind + " on " + n.id);
    const std::size_t want_inputs = n.kind == "add" ? 2 : 1;
    if (n.inputs.size() != want_inputs)
      raise(ErrorCode::InvalidArgument, "node " + n.id + " needs " +
                                            std::to_string(want_inputs) + " inputs");
  }
  for (const GraphNode& n : nodes) {
    for (const std::string& in : n.inputs)
      if (in != "input" && !by_id.count(in))
        raise(ErrorCode::InvalidArgument, "node " + n.id + " reads unknown node " + in);
    if (n.kind == "bn") {
      const std::string& src = n.inputs[0];
      if (src == "input" || (by_id[src]->kind != "conv2d" && by_id[src]->kind != "linear"))
        raise(ErrorCode::InvalidArgument, "bn node " + n.id + " must follow conv2d or linear");
    }
    if (weights) {
      auto need = [&](const std::string& name) {
        if (!name.empty() && !weights->has(name))
          raise(ErrorCode::DanglingBlob,
                "node " + n.id + " references missing tensor \"" + name + "\"");
      };
      need(n.weight);
      need(n.bias);
      need(n.gamma);
      need(n.beta);
      need(n.mean);
      need(n.var);
    }
  }
  if (output.empty() || !by_id.count(output))
    raise(ErrorCode::InvalidArgument, "graph output \"" + output + "\" does not exist");

  // Kahn topological sort; stable under the given node order.
  std::map<std::string, int> pending;
  for (const GraphNode& n : nodes) {
    int deps = 0;
    for (const std::string& in : n.inputs)
      if (in != "input") ++deps;
    pending[n.id] = deps;
  }
  std::vector<GraphNode> sorted;
  sorted.reserve(nodes.size());
  std::vector<bool> done(nodes.size(), false);
  for (std::size_t emitted = 0; emitted < nodes.size();) {
    bool progress = false;
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (done[i] || pending[nodes[i].id] != 0) continue;
      done[i] = true;
      sorted.push_back(nodes[i]);
      for (const GraphNode& m : nodes)
        for (const std::string& in : m.inputs)
          if (in == nodes[i].id) --pending[m.id];
      ++emitted;
      progress = true;
    }
    if (!progress) raise(ErrorCode::InvalidArgument, "graph contains a cycle");
  }
  nodes = std::move(sorted);
}

namespace {

json graph_to_json_obj(const ModelGraph& g) {
  json jnodes = json::array();
  for (const GraphNode& n : g.nodes) {
    json jn;
    jn["id"] = n.id;
    jn["kind"] = n.kind;
    jn["inputs"] = n.inputs;
    if (n.kind == "conv2d") {
      jn["stride"] = n.stride;
      jn["pad"] = n.pad;
    }
    if (n.kind == "conv2d" || n.kind == "linear") {
      jn["weight"] = n.weight;
      jn["bias"] = n.bias;
    }
    if (n.kind == "bn") {
      jn["gamma"] = n.gamma;
      jn["beta"] = n.beta;
      jn["mean"] = n.mean;
      jn["var"] = n.var;
      jn["epsilon"] = n.epsilon;
    }
    jnodes.push_back(jn);
  }
  json j;
  j["input_shape"] = g.input_shape;
  j["output"] = g.output;
  j["nodes"] = jnodes;
  return j;
}

ModelGraph graph_from_json_obj(const json& j) {
  ModelGraph g;
  try {
    for (const auto& e : j.at("input_shape")) g.input_shape.push_back(e.get<Index>());
    g.output = j.at("output").get<std::string>();
    for (const auto& jn : j.at("nodes")) {
      GraphNode n;
      n.id = jn.at("id").get<std::string>();
      n.kind = jn.at("kind").get<std::string>();
      for (const auto& in : jn.at("inputs")) n.inputs.push_back(in.get<std::string>());
      if (n.kind == "conv2d") {
        n.stride = jn.at("stride").get<Index>();
        n.pad = jn.at("pad").get<Index>();
      }
      if (n.kind == "conv2d" || n.kind == "linear") {
        n.weight = jn.at("weight").get<std::string>();
        n.bias = jn.at("bias").get<std::string>();
      }
      if (n.kind == "bn") {
        n.gamma = jn.at("gamma").get<std::string>();
        n.beta = jn.at("beta").get<std::string>();
        n.mean = jn.at("mean").get<std::string>();
        n.var = jn.at("var").get<std::string>();
        n.epsilon = jn.at("epsilon").get<float>();
      }
      g.nodes.push_back(std::move(n));
    }
  } catch (const json::exception& e) {
    raise(ErrorCode::InvalidArgument, std::string("malformed graph manifest: ") + e.what());
  }
  return g;
}

}  // namespace

std::string graph_to_json(const ModelGraph& graph) {
  return graph_to_json_obj(graph).dump(2) + "\n";
}

ModelGraph graph_from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) raise(ErrorCode::Io, "graph manifest is not valid JSON");
  return graph_from_json_obj(j);
}

Model load_model(const std::string& graph_path, const std::string& weights_path) {
  Model m;
  m.weights = BlobFile::load(weights_path);
  m.graph = graph_from_json(read_file(graph_path));
  m.graph.validate(&m.weights);
  return m;
}

void save_model(const Model& model, const std::string& graph_path,
                const std::string& weights_path) {
  write_file(graph_path, graph_to_json(model.graph));
  model.weights.save(weights_path);
}

CalibrationSet load_calibration(const std::string& path, const Shape& expected_chw) {
  BlobFile blob = BlobFile::load(path);
  CalibrationSet set;
  set.images = blob.f32("images");
  if (set.images.ndim() != 4)
    raise(ErrorCode::ShapeMismatch, "calibration images must be NCHW");
  const Shape got{set.images.dim(1), set.images.dim(2), set.images.dim(3)};
  if (expected_chw.size() == 3 && got != expected_chw)
    raise(ErrorCode::ShapeMismatch, "calibration sample shape " + shape_string(got) +
                                        " does not match model input " +
                                        shape_string(expected_chw));
  if (blob.has("labels")) {
    TensorI labels = blob.i32("labels");
    if (labels.numel() != set.images.dim(0))
      raise(ErrorCode::ShapeMismatch, "label count does not match image count");
    set.labels.assign(labels.data(), labels.data() + labels.numel());
  }
  return set;
}

void save_calibration(const CalibrationSet& set, const std::string& path) {
  BlobFile blob;
  blob.put_f32("images", set.images);
  if (!set.labels.empty()) {
    TensorI labels({static_cast<Index>(set.labels.size())});
    for (Index i = 0; i < labels.numel(); ++i)
      labels[i] = set.labels[static_cast<std::size_t>(i)];
    blob.put_i32("labels", labels, DType::I32);
  }
  blob.save(path);
}

std::vector<Index> sample_indices(Index pool, Index count, Rng& rng) {
  if (count > pool)
    raise(ErrorCode::InvalidArgument, "cannot draw " + std::to_string(count) +
                                          " distinct indices from a pool of " +
                                          std::to_string(pool));
  std::vector<Index> all(static_cast<std::size_t>(pool));
  for (Index i = 0; i < pool; ++i) all[static_cast<std::size_t>(i)] = i;
  // Partial Fisher-Yates: the first `count` slots end up uniform without
  // replacement.
  for (Index i = 0; i < count; ++i) {
    const Index j = i + static_cast<Index>(rng.uniform_int(static_cast<std::uint32_t>(pool - i)));
    std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
  }
  all.resize(static_cast<std::size_t>(count));
  return all;
}

const LayerQuant& QuantizedModel::layer(const std::string& node_id) const {
  for (const LayerQuant& l : layers)
    if (l.node_id == node_id) return l;
  raise(ErrorCode::InvalidArgument, "no quantized layer for node " + node_id);
}

const ActQuant& QuantizedModel::act(const std::string& node_id) const {
  for (const ActQuant& a : acts)
    if (a.node_id == node_id) return a;
  raise(ErrorCode::InvalidArgument, "no activation quantizer for node " + node_id);
}

bool QuantizedModel::has_act(const std::string& node_id) const {
  for (const ActQuant& a : acts)
    if (a.node_id == node_id) return true;
  return false;
}

void save_quantized(const QuantizedModel& model, const std::string& path) {
  json manifest;
  manifest["format"] = "rapq-quantized";
  manifest["wbits"] = model.weight_bits;
  manifest["abits"] = model.act_bits;
  manifest["bn_folded"] = model.bn_folded;
  manifest["graph"] = graph_to_json_obj(model.graph);
  json jlayers = json::array();
  for (const LayerQuant& l : model.layers) jlayers.push_back(l.node_id);
  manifest["layers"] = jlayers;
  json jacts = json::array();
  for (const ActQuant& a : model.acts) jacts.push_back(a.node_id);
  manifest["acts"] = jacts;

  BlobFile blob;
  const std::string text = manifest.dump();
  TensorI manifest_bytes({static_cast<Index>(text.size())});
  for (Index i = 0; i < manifest_bytes.numel(); ++i)
    manifest_bytes[i] = static_cast<unsigned char>(text[static_cast<std::size_t>(i)]);
  blob.put_i32("__manifest__", manifest_bytes, DType::U8);

  const DType code_dtype = model.weight_bits == 2 ? DType::U2 : DType::U8;
  for (const LayerQuant& l : model.layers) {
    const Index channels = static_cast<Index>(l.weight_q.size());
    TensorI exponents({channels}), zeros({channels});
    for (Index c = 0; c < channels; ++c) {
      const QuantParams& q = l.weight_q[static_cast<std::size_t>(c)];
      if (!q.hardened)
        raise(ErrorCode::Contract, "save_quantized: layer " + l.node_id + " not hardened");
      exponents[c] = q.exponent;
      zeros[c] = q.zero_point;
    }
    blob.put_i32(l.node_id + ".qw", l.q_weight, code_dtype);
    blob.put_i32(l.node_id + ".qb", l.q_bias, DType::I32);
    blob.put_i32(l.node_id + ".exp", exponents, DType::I8);
    blob.put_i32(l.node_id + ".zp", zeros, DType::U8);
  }

  const Index act_count = static_cast<Index>(model.acts.size());
  TensorI act_exp({act_count}), act_zp({act_count});
  for (Index i = 0; i < act_count; ++i) {
    const QuantParams& q = model.acts[static_cast<std::size_t>(i)].q;
    if (!q.hardened)
      raise(ErrorCode::Contract, "save_quantized: activation quantizer not hardened");
    act_exp[i] = q.exponent;
    act_zp[i] = q.zero_point;
  }
  blob.put_i32("__acts.exp", act_exp, DType::I8);
  blob.put_i32("__acts.zp", act_zp, DType::U8);
  blob.save(path);
}

QuantizedModel load_quantized(const std::string& path) {
  BlobFile blob = BlobFile::load(path);
  const BlobTensor& mt = blob.get("__manifest__");
  std::string text;
  text.reserve(mt.i32.size());
  for (std::int32_t b : mt.i32) text.push_back(static_cast<char>(b));
  json manifest = json::parse(text, nullptr, false);
  if (manifest.is_discarded())
    raise(ErrorCode::Io, "quantized model manifest is not valid JSON");

  QuantizedModel model;
  try {
    model.weight_bits = manifest.at("wbits").get<int>();
    model.act_bits = manifest.at("abits").get<int>();
    model.bn_folded = manifest.at("bn_folded").get<bool>();
    model.graph = graph_from_json_obj(manifest.at("graph"));
  } catch (const json::exception& e) {
    raise(ErrorCode::InvalidArgument, std::string("malformed quantized manifest: ") + e.what());
  }
  model.graph.validate(nullptr);

  const int wp = (1 << model.weight_bits) - 1;
  for (const auto& jl : manifest.at("layers")) {
    LayerQuant l;
    l.node_id = jl.get<std::string>();
    l.q_weight = blob.i32(l.node_id + ".qw");
    l.q_bias = blob.i32(l.node_id + ".qb");
    TensorI exponents = blob.i32(l.node_id + ".exp");
    TensorI zeros = blob.i32(l.node_id + ".zp");
    if (exponents.numel() != l.q_weight.dim(0) || zeros.numel() != exponents.numel())
      raise(ErrorCode::ExtentMismatch, "per-channel metadata mismatch on " + l.node_id);
    for (Index c = 0; c < exponents.numel(); ++c) {
      QuantParams q = make_quant_params(model.weight_bits, Granularity::PerChannel,
                                        Signedness::Asymmetric);
      q.hardened = true;
      q.exponent = exponents[c];
      q.float_scale = std::ldexp(1.0, q.exponent);
      q.zero_point = zeros[c];
      q.validate();
      l.weight_q.push_back(q);
    }
    for (Index i = 0; i < l.q_weight.numel(); ++i)
      if (l.q_weight[i] < 0 || l.q_weight[i] > wp)
        raise(ErrorCode::PayloadRange, "weight code out of range on " + l.node_id);
    model.layers.push_back(std::move(l));
  }

  TensorI act_exp = blob.i32("__acts.exp");
  TensorI act_zp = blob.i32("__acts.zp");
  std::size_t i = 0;
  for (const auto& ja : manifest.at("acts")) {
    if (static_cast<Index>(i) >= act_exp.numel())
      raise(ErrorCode::ExtentMismatch, "activation quantizer metadata truncated");
    ActQuant a;
    a.node_id = ja.get<std::string>();
    a.q = make_quant_params(model.act_bits, Granularity::PerTensor,
                            Signedness::AsymmetricUnsigned);
    a.q.hardened = true;
    a.q.exponent = act_exp[static_cast<Index>(i)];
    a.q.float_scale = std::ldexp(1.0, a.q.exponent);
    a.q.zero_point = act_zp[static_cast<Index>(i)];
    a.q.validate();
    model.acts.push_back(std::move(a));
    ++i;
  }
  return model;
}

}  // namespace rapq

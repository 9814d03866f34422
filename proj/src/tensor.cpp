#include "cbsum/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace cbsum {

std::int64_t shape_size(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<int> shape_in, std::vector<float> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape_size(shape) != static_cast<std::int64_t>(data.size())) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match data length " +
                                std::to_string(data.size()));
  }
}

Tensor Tensor::zeros(std::vector<int> shape_in) {
  std::vector<float> d(shape_size(shape_in), 0.0f);
  return Tensor(std::move(shape_in), std::move(d));
}

Tensor Tensor::full(std::vector<int> shape_in, float value) {
  std::vector<float> d(shape_size(shape_in), value);
  return Tensor(std::move(shape_in), std::move(d));
}

Tensor Tensor::scalar(float value) { return Tensor({1}, {value}); }

std::int64_t Tensor::size() const { return static_cast<std::int64_t>(data.size()); }

int Tensor::rows() const {
  if (rank() != 2) throw std::logic_error("tensor: rows() on rank-" + std::to_string(rank()));
  return shape[0];
}

int Tensor::cols() const {
  if (rank() != 2) throw std::logic_error("tensor: cols() on rank-" + std::to_string(rank()));
  return shape[1];
}

float Tensor::item() const {
  if (data.size() != 1) throw std::logic_error("tensor: item() on size " + std::to_string(data.size()));
  return data[0];
}

float& Tensor::at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
float Tensor::at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatmul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kSubtract: return "subtract";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftmaxLastDim: return "softmax-lastdim";
    case OpKind::kConcatLastDim: return "concat-lastdim";
    case OpKind::kGatherRows: return "gather-rows";
    case OpKind::kScatterAddRows: return "scatter-add-rows";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kLog: return "log";
    case OpKind::kNegate: return "negate";
    case OpKind::kScale: return "scale";
    case OpKind::kStack: return "stack";
    case OpKind::kMinimum: return "minimum";
    case OpKind::kClampMin: return "clamp-min";
    case OpKind::kSliceLastDim: return "slice-lastdim";
    case OpKind::kReshape: return "reshape";
    case OpKind::kStopGradient: return "stop-gradient";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(OpKind kind, const std::vector<int>& a, const std::vector<int>& b) {
  throw std::invalid_argument(std::string(op_name(kind)) + ": shape mismatch " + shape_str(a) + " vs " +
                              shape_str(b));
}

// How a binary elementwise op pairs its operands.
enum BinMode : int { kSame = 0, kScalarA = 1, kScalarB = 2, kRowB = 3 };

BinMode resolve_bin_mode(OpKind kind, const std::vector<int>& a, const std::vector<int>& b) {
  if (a == b) return kSame;
  if (shape_size(b) == 1) return kScalarB;
  if (shape_size(a) == 1) return kScalarA;
  if (a.size() == 2 && b.size() == 1 && a[1] == b[0]) return kRowB;
  if (a.size() == 2 && b.size() == 2 && b[0] == 1 && a[1] == b[1]) return kRowB;
  shape_error(kind, a, b);
}

// Forward kernels, shared between the fp32 graph and the double-precision
// replay used by the finite-difference oracle. Reductions accumulate in
// double regardless of the storage type.
template <class Real>
void k_matmul(const Real* a, const Real* b, Real* out, int n, int k, int m) {
  std::vector<double> acc(static_cast<std::size_t>(m));
  for (int i = 0; i < n; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const Real* arow = a + static_cast<std::size_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double av = static_cast<double>(arow[kk]);
      if (av == 0.0) continue;
      const Real* brow = b + static_cast<std::size_t>(kk) * m;
      for (int j = 0; j < m; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    Real* orow = out + static_cast<std::size_t>(i) * m;
    for (int j = 0; j < m; ++j) orow[j] = static_cast<Real>(acc[j]);
  }
}

template <class Real>
void k_binary(OpKind kind, BinMode mode, const Real* a, std::size_t an, const Real* b, std::size_t bn,
              Real* out) {
  auto apply = [kind](double x, double y) -> double {
    switch (kind) {
      case OpKind::kAdd: return x + y;
      case OpKind::kSubtract: return x - y;
      case OpKind::kMultiply: return x * y;
      case OpKind::kMinimum: return x <= y ? x : y;
      default: throw std::logic_error("k_binary: bad op");
    }
  };
  switch (mode) {
    case kSame:
      for (std::size_t i = 0; i < an; ++i) out[i] = static_cast<Real>(apply(a[i], b[i]));
      break;
    case kScalarB:
      for (std::size_t i = 0; i < an; ++i) out[i] = static_cast<Real>(apply(a[i], b[0]));
      break;
    case kScalarA:
      for (std::size_t i = 0; i < bn; ++i) out[i] = static_cast<Real>(apply(a[0], b[i]));
      break;
    case kRowB:
      for (std::size_t i = 0; i < an; ++i) out[i] = static_cast<Real>(apply(a[i], b[i % bn]));
      break;
  }
}

template <class Real>
void k_softmax(const Real* x, Real* out, int rows, int d) {
  for (int r = 0; r < rows; ++r) {
    const Real* xi = x + static_cast<std::size_t>(r) * d;
    Real* oi = out + static_cast<std::size_t>(r) * d;
    double mx = -1e300;
    for (int j = 0; j < d; ++j) mx = std::max(mx, static_cast<double>(xi[j]));
    double total = 0.0;
    std::vector<double> e(static_cast<std::size_t>(d));
    for (int j = 0; j < d; ++j) {
      e[j] = std::exp(static_cast<double>(xi[j]) - mx);
      total += e[j];
    }
    for (int j = 0; j < d; ++j) oi[j] = static_cast<Real>(e[j] / total);
  }
}

template <class Real>
double k_reduce_sum(const Real* x, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(x[i]);
  return s;
}

int last_dim(const std::vector<int>& shape) { return shape.empty() ? 1 : shape.back(); }

int leading_rows(const Tensor& t) {
  return t.rank() == 2 ? t.shape[0] : 1;
}

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw std::runtime_error("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void ParamStore::add(const std::string& name, Tensor value) {
  if (params_.count(name)) throw std::invalid_argument("param store: duplicate name \"" + name + "\"");
  value.node = -1;
  params_.emplace(name, std::move(value));
}

bool ParamStore::has(const std::string& name) const { return params_.count(name) != 0; }

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("param store: unknown name \"" + name + "\"");
  return it->second;
}

Tensor& ParamStore::mutate(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("param store: unknown name \"" + name + "\"");
  return it->second;
}

void ParamStore::set(const std::string& name, Tensor value) {
  value.node = -1;
  params_[name] = std::move(value);
}

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& [name, t] : params_) out.push_back(name);
  return out;
}

std::int64_t ParamStore::element_count() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : params_) n += t.size();
  return n;
}

void ParamStore::save(const std::string& path) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path);
  os.write("CBDC", 4);
  put_u32(os, 1u);
  put_u32(os, static_cast<std::uint32_t>(params_.size()));
  for (const auto& [name, t] : params_) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(os, static_cast<std::uint32_t>(d));
    for (float f : t.data) put_u32(os, std::bit_cast<std::uint32_t>(f));
  }
  if (!os) throw std::runtime_error("checkpoint: write failed for " + path);
}

ParamStore ParamStore::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path);
  char magic[4];
  if (!is.read(magic, 4)) throw std::runtime_error("checkpoint: truncated file");
  if (std::memcmp(magic, "CBDC", 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic \"" + std::string(magic, 4) + "\" (expected \"CBDC\")");
  }
  const std::uint32_t version = get_u32(is);
  if (version != 1) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) + " (expected 1)");
  }
  const std::uint32_t count = get_u32(is);
  ParamStore store;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw std::runtime_error("checkpoint: truncated file");
    const std::uint32_t rank = get_u32(is);
    std::vector<int> shape(rank);
    for (std::uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(get_u32(is));
    std::vector<float> data(static_cast<std::size_t>(shape_size(shape)));
    for (float& f : data) f = std::bit_cast<float>(get_u32(is));
    store.add(name, Tensor(std::move(shape), std::move(data)));
  }
  return store;
}

void Tape::record_inputs(TapeNode& n, const std::vector<Tensor>& ins) {
  for (const Tensor& t : ins) {
    if (t.node >= 0) {
      n.inputs.push_back(t.node);
      n.const_slot.push_back(-1);
    } else {
      n.inputs.push_back(-1);
      n.const_slot.push_back(static_cast<int>(n.const_inputs.size()));
      n.const_inputs.push_back(t);
    }
  }
}

const Tensor& Tape::input_value(const TapeNode& n, std::size_t i) const {
  return n.inputs[i] >= 0 ? nodes_[n.inputs[i]].value : n.const_inputs[n.const_slot[i]];
}

Tensor Tape::emit(TapeNode n) {
  const int id = static_cast<int>(nodes_.size());
  n.value.node = id;
  nodes_.push_back(std::move(n));
  return nodes_.back().value;
}

Tensor Tape::param(const std::string& name, const Tensor& value) {
  auto it = param_nodes_.find(name);
  if (it != param_nodes_.end()) return nodes_[it->second].value;
  TapeNode n;
  n.op = OpKind::kLeaf;
  n.name = name;
  n.value = value;
  Tensor out = emit(std::move(n));
  param_nodes_[name] = out.node;
  return out;
}

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 1 || a.rank() > 2 || b.rank() < 1 || b.rank() > 2) shape_error(OpKind::kMatmul, a.shape, b.shape);
  const int n = a.rank() == 2 ? a.shape[0] : 1;
  const int k = a.rank() == 2 ? a.shape[1] : a.shape[0];
  const int k2 = b.rank() == 2 ? b.shape[0] : b.shape[0];
  const int m = b.rank() == 2 ? b.shape[1] : 1;
  if (k != k2) shape_error(OpKind::kMatmul, a.shape, b.shape);

  std::vector<int> out_shape;
  if (a.rank() == 2 && b.rank() == 2) out_shape = {n, m};
  else if (a.rank() == 1 && b.rank() == 2) out_shape = {m};
  else if (a.rank() == 2 && b.rank() == 1) out_shape = {n};
  else out_shape = {1};

  TapeNode node;
  node.op = OpKind::kMatmul;
  record_inputs(node, {a, b});
  node.value = Tensor::zeros(out_shape);
  k_matmul(a.data.data(), b.data.data(), node.value.data.data(), n, k, m);
  return emit(std::move(node));
}

static TapeNode make_binary_node(OpKind kind, const Tensor& a, const Tensor& b) {
  const BinMode mode = resolve_bin_mode(kind, a.shape, b.shape);
  TapeNode node;
  node.op = kind;
  node.int_attrs = {static_cast<int>(mode)};
  node.value = Tensor::zeros(mode == kScalarA ? b.shape : a.shape);
  k_binary(kind, mode, a.data.data(), a.data.size(), b.data.data(), b.data.size(), node.value.data.data());
  return node;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  TapeNode n = make_binary_node(OpKind::kAdd, a, b);
  record_inputs(n, {a, b});
  return emit(std::move(n));
}

Tensor Tape::subtract(const Tensor& a, const Tensor& b) {
  TapeNode n = make_binary_node(OpKind::kSubtract, a, b);
  record_inputs(n, {a, b});
  return emit(std::move(n));
}

Tensor Tape::multiply(const Tensor& a, const Tensor& b) {
  TapeNode n = make_binary_node(OpKind::kMultiply, a, b);
  record_inputs(n, {a, b});
  return emit(std::move(n));
}

Tensor Tape::minimum(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) shape_error(OpKind::kMinimum, a.shape, b.shape);
  TapeNode n = make_binary_node(OpKind::kMinimum, a, b);
  record_inputs(n, {a, b});
  return emit(std::move(n));
}

Tensor Tape::tanh(const Tensor& x) {
  TapeNode node;
  node.op = OpKind::kTanh;
  record_inputs(node, {x});
  node.value = x;
  for (float& v : node.value.data) v = std::tanh(v);
  return emit(std::move(node));
}

Tensor Tape::sigmoid(const Tensor& x) {
  TapeNode node;
  node.op = OpKind::kSigmoid;
  record_inputs(node, {x});
  node.value = x;
  for (float& v : node.value.data) v = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(v))));
  return emit(std::move(node));
}

Tensor Tape::softmax(const Tensor& x) {
  if (x.rank() < 1 || x.rank() > 2 || x.data.empty()) {
    throw std::invalid_argument("softmax-lastdim: unsupported shape " + shape_str(x.shape));
  }
  TapeNode node;
  node.op = OpKind::kSoftmaxLastDim;
  record_inputs(node, {x});
  node.value = Tensor::zeros(x.shape);
  k_softmax(x.data.data(), node.value.data.data(), leading_rows(x), last_dim(x.shape));
  return emit(std::move(node));
}

Tensor Tape::concat(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat-lastdim: no inputs");
  std::vector<float> data;
  for (const Tensor& t : xs) {
    if (t.rank() != 1) throw std::invalid_argument("concat-lastdim: rank-1 inputs required, got " + shape_str(t.shape));
    data.insert(data.end(), t.data.begin(), t.data.end());
  }
  TapeNode node;
  node.op = OpKind::kConcatLastDim;
  record_inputs(node, xs);
  const int total = static_cast<int>(data.size());
  node.value = Tensor({total}, std::move(data));
  return emit(std::move(node));
}

Tensor Tape::gather_rows(const Tensor& x, const std::vector<int>& indices) {
  if (x.rank() < 1 || x.rank() > 2) throw std::invalid_argument("gather-rows: unsupported shape " + shape_str(x.shape));
  const int n = x.shape[0];
  const int d = x.rank() == 2 ? x.shape[1] : 1;
  for (int idx : indices) {
    if (idx < 0 || idx >= n) {
      throw std::out_of_range("gather-rows: index " + std::to_string(idx) + " out of range [0," +
                              std::to_string(n) + ")");
    }
  }
  TapeNode node;
  node.op = OpKind::kGatherRows;
  record_inputs(node, {x});
  node.int_attrs = indices;
  const int k = static_cast<int>(indices.size());
  node.value = x.rank() == 2 ? Tensor::zeros({k, d}) : Tensor::zeros({k});
  for (int i = 0; i < k; ++i) {
    std::copy_n(x.data.begin() + static_cast<std::size_t>(indices[i]) * d, d,
                node.value.data.begin() + static_cast<std::size_t>(i) * d);
  }
  return emit(std::move(node));
}

Tensor Tape::scatter_add_rows(const Tensor& x, const std::vector<int>& indices, int out_rows) {
  if (x.rank() < 1 || x.rank() > 2) throw std::invalid_argument("scatter-add-rows: unsupported shape " + shape_str(x.shape));
  const int k = x.shape[0];
  const int d = x.rank() == 2 ? x.shape[1] : 1;
  if (static_cast<int>(indices.size()) != k) {
    throw std::invalid_argument("scatter-add-rows: " + std::to_string(indices.size()) + " indices for " +
                                std::to_string(k) + " rows");
  }
  for (int idx : indices) {
    if (idx < 0 || idx >= out_rows) {
      throw std::out_of_range("scatter-add-rows: index " + std::to_string(idx) + " out of range [0," +
                              std::to_string(out_rows) + ")");
    }
  }
  TapeNode node;
  node.op = OpKind::kScatterAddRows;
  record_inputs(node, {x});
  node.int_attrs = indices;
  node.int_attrs.push_back(out_rows);
  node.value = x.rank() == 2 ? Tensor::zeros({out_rows, d}) : Tensor::zeros({out_rows});
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < d; ++j) {
      node.value.data[static_cast<std::size_t>(indices[i]) * d + j] +=
          x.data[static_cast<std::size_t>(i) * d + j];
    }
  }
  return emit(std::move(node));
}

Tensor Tape::sum(const Tensor& x) {
  TapeNode node;
  node.op = OpKind::kSum;
  record_inputs(node, {x});
  node.value = Tensor::scalar(static_cast<float>(k_reduce_sum(x.data.data(), x.data.size())));
  return emit(std::move(node));
}

Tensor Tape::mean(const Tensor& x) {
  if (x.data.empty()) throw std::invalid_argument("mean: empty tensor");
  TapeNode node;
  node.op = OpKind::kMean;
  record_inputs(node, {x});
  node.value = Tensor::scalar(static_cast<float>(k_reduce_sum(x.data.data(), x.data.size()) /
                                                 static_cast<double>(x.data.size())));
  return emit(std::move(node));
}

Tensor Tape::log(const Tensor& x) {
  TapeNode node;
  node.op = OpKind::kLog;
  record_inputs(node, {x});
  node.value = x;
  for (float& v : node.value.data) {
    if (v <= 0.0f) throw std::domain_error("log: non-positive input " + std::to_string(v));
    v = std::log(v);
  }
  return emit(std::move(node));
}

Tensor Tape::negate(const Tensor& x) {
  TapeNode node;
  node.op = OpKind::kNegate;
  record_inputs(node, {x});
  node.value = x;
  for (float& v : node.value.data) v = -v;
  return emit(std::move(node));
}

Tensor Tape::scale(const Tensor& x, float s) {
  TapeNode node;
  node.op = OpKind::kScale;
  node.scalar_attr = s;
  record_inputs(node, {x});
  node.value = x;
  for (float& v : node.value.data) v *= s;
  return emit(std::move(node));
}

Tensor Tape::stack(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw std::invalid_argument("stack: no inputs");
  const int d = static_cast<int>(xs[0].data.size());
  for (const Tensor& t : xs) {
    if (t.rank() != 1 || static_cast<int>(t.data.size()) != d) shape_error(OpKind::kStack, xs[0].shape, t.shape);
  }
  TapeNode node;
  node.op = OpKind::kStack;
  record_inputs(node, xs);
  node.value = Tensor::zeros({static_cast<int>(xs.size()), d});
  for (std::size_t i = 0; i < xs.size(); ++i) {
    std::copy(xs[i].data.begin(), xs[i].data.end(), node.value.data.begin() + i * d);
  }
  return emit(std::move(node));
}

Tensor Tape::clamp_min(const Tensor& x, float floor) {
  TapeNode node;
  node.op = OpKind::kClampMin;
  node.scalar_attr = floor;
  record_inputs(node, {x});
  node.value = x;
  for (float& v : node.value.data) v = std::max(v, floor);
  return emit(std::move(node));
}

Tensor Tape::slice(const Tensor& x, int offset, int length) {
  const int d = last_dim(x.shape);
  if (offset < 0 || length <= 0 || offset + length > d) {
    throw std::invalid_argument("slice-lastdim: [" + std::to_string(offset) + "," +
                                std::to_string(offset + length) + ") out of range for " + shape_str(x.shape));
  }
  const int n = leading_rows(x);
  TapeNode node;
  node.op = OpKind::kSliceLastDim;
  node.int_attrs = {offset, length};
  record_inputs(node, {x});
  node.value = x.rank() == 2 ? Tensor::zeros({n, length}) : Tensor::zeros({length});
  for (int i = 0; i < n; ++i) {
    std::copy_n(x.data.begin() + static_cast<std::size_t>(i) * d + offset, length,
                node.value.data.begin() + static_cast<std::size_t>(i) * length);
  }
  return emit(std::move(node));
}

Tensor Tape::reshape(const Tensor& x, std::vector<int> new_shape) {
  if (shape_size(new_shape) != x.size()) {
    shape_error(OpKind::kReshape, x.shape, new_shape);
  }
  TapeNode node;
  node.op = OpKind::kReshape;
  record_inputs(node, {x});
  node.value = Tensor(std::move(new_shape), x.data);
  return emit(std::move(node));
}

Tensor Tape::stop_gradient(const Tensor& x) {
  TapeNode node;
  node.op = OpKind::kStopGradient;
  record_inputs(node, {x});
  node.value = x;
  return emit(std::move(node));
}

GradMap Tape::backward(const Tensor& loss, const ParamStore& params) {
  if (backward_done_) throw std::logic_error("backward: record already consumed");
  if (loss.node < 0 || loss.node >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("backward: loss is not part of this record");
  }
  if (loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape));
  }
  backward_done_ = true;

  std::vector<std::vector<double>> grads(nodes_.size());
  auto buf = [&](int id, std::size_t n) -> std::vector<double>& {
    if (grads[id].empty()) grads[id].assign(n, 0.0);
    return grads[id];
  };
  grads[loss.node].assign(1, 1.0);

  for (int id = loss.node; id >= 0; --id) {
    if (grads[id].empty()) continue;
    const TapeNode& n = nodes_[id];
    const std::vector<double>& g = grads[id];
    auto in_grad = [&](std::size_t i) -> std::vector<double>* {
      if (n.inputs[i] < 0) return nullptr;
      return &buf(n.inputs[i], input_value(n, i).data.size());
    };

    switch (n.op) {
      case OpKind::kLeaf:
      case OpKind::kStopGradient:
        break;
      case OpKind::kMatmul: {
        const Tensor& a = input_value(n, 0);
        const Tensor& b = input_value(n, 1);
        const int nn = a.rank() == 2 ? a.shape[0] : 1;
        const int k = a.rank() == 2 ? a.shape[1] : a.shape[0];
        const int m = b.rank() == 2 ? b.shape[1] : 1;
        if (auto* da = in_grad(0)) {
          for (int i = 0; i < nn; ++i) {
            for (int kk = 0; kk < k; ++kk) {
              double s = 0.0;
              for (int j = 0; j < m; ++j) {
                s += g[static_cast<std::size_t>(i) * m + j] *
                     static_cast<double>(b.data[static_cast<std::size_t>(kk) * m + j]);
              }
              (*da)[static_cast<std::size_t>(i) * k + kk] += s;
            }
          }
        }
        if (auto* db = in_grad(1)) {
          for (int kk = 0; kk < k; ++kk) {
            for (int j = 0; j < m; ++j) {
              double s = 0.0;
              for (int i = 0; i < nn; ++i) {
                s += static_cast<double>(a.data[static_cast<std::size_t>(i) * k + kk]) *
                     g[static_cast<std::size_t>(i) * m + j];
              }
              (*db)[static_cast<std::size_t>(kk) * m + j] += s;
            }
          }
        }
        break;
      }
      case OpKind::kAdd:
      case OpKind::kSubtract:
      case OpKind::kMultiply:
      case OpKind::kMinimum: {
        const Tensor& a = input_value(n, 0);
        const Tensor& b = input_value(n, 1);
        const BinMode mode = static_cast<BinMode>(n.int_attrs[0]);
        const std::size_t on = n.value.data.size();
        const std::size_t bn = b.data.size();
        auto* da = in_grad(0);
        auto* db = in_grad(1);
        for (std::size_t i = 0; i < on; ++i) {
          const std::size_t ai = (mode == kScalarA) ? 0 : i;
          const std::size_t bi = (mode == kScalarB) ? 0 : (mode == kRowB ? i % bn : i);
          const double gi = g[i];
          switch (n.op) {
            case OpKind::kAdd:
              if (da) (*da)[ai] += gi;
              if (db) (*db)[bi] += gi;
              break;
            case OpKind::kSubtract:
              if (da) (*da)[ai] += gi;
              if (db) (*db)[bi] -= gi;
              break;
            case OpKind::kMultiply:
              if (da) (*da)[ai] += gi * static_cast<double>(b.data[bi]);
              if (db) (*db)[bi] += gi * static_cast<double>(a.data[ai]);
              break;
            case OpKind::kMinimum:
              if (a.data[ai] <= b.data[bi]) {
                if (da) (*da)[ai] += gi;
              } else if (db) {
                (*db)[bi] += gi;
              }
              break;
            default: break;
          }
        }
        break;
      }
      case OpKind::kTanh:
        if (auto* dx = in_grad(0)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = n.value.data[i];
            (*dx)[i] += g[i] * (1.0 - y * y);
          }
        }
        break;
      case OpKind::kSigmoid:
        if (auto* dx = in_grad(0)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = n.value.data[i];
            (*dx)[i] += g[i] * y * (1.0 - y);
          }
        }
        break;
      case OpKind::kSoftmaxLastDim:
        if (auto* dx = in_grad(0)) {
          const int d = last_dim(n.value.shape);
          const int rows = leading_rows(n.value);
          for (int r = 0; r < rows; ++r) {
            const std::size_t base = static_cast<std::size_t>(r) * d;
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += g[base + j] * static_cast<double>(n.value.data[base + j]);
            for (int j = 0; j < d; ++j) {
              (*dx)[base + j] += static_cast<double>(n.value.data[base + j]) * (g[base + j] - dot);
            }
          }
        }
        break;
      case OpKind::kConcatLastDim: {
        std::size_t off = 0;
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          const std::size_t len = input_value(n, i).data.size();
          if (auto* dx = in_grad(i)) {
            for (std::size_t j = 0; j < len; ++j) (*dx)[j] += g[off + j];
          }
          off += len;
        }
        break;
      }
      case OpKind::kGatherRows:
        if (auto* dx = in_grad(0)) {
          const Tensor& x = input_value(n, 0);
          const int d = x.rank() == 2 ? x.shape[1] : 1;
          for (std::size_t i = 0; i < n.int_attrs.size(); ++i) {
            const std::size_t src = i * d;
            const std::size_t dst = static_cast<std::size_t>(n.int_attrs[i]) * d;
            for (int j = 0; j < d; ++j) (*dx)[dst + j] += g[src + j];
          }
        }
        break;
      case OpKind::kScatterAddRows:
        if (auto* dx = in_grad(0)) {
          const Tensor& x = input_value(n, 0);
          const int d = x.rank() == 2 ? x.shape[1] : 1;
          const std::size_t k = n.int_attrs.size() - 1;  // last attr is out_rows
          for (std::size_t i = 0; i < k; ++i) {
            const std::size_t src = static_cast<std::size_t>(n.int_attrs[i]) * d;
            for (int j = 0; j < d; ++j) (*dx)[i * d + j] += g[src + j];
          }
        }
        break;
      case OpKind::kSum:
        if (auto* dx = in_grad(0)) {
          for (double& v : *dx) v += g[0];
        }
        break;
      case OpKind::kMean:
        if (auto* dx = in_grad(0)) {
          const double inv = 1.0 / static_cast<double>(dx->size());
          for (double& v : *dx) v += g[0] * inv;
        }
        break;
      case OpKind::kLog:
        if (auto* dx = in_grad(0)) {
          const Tensor& x = input_value(n, 0);
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] / static_cast<double>(x.data[i]);
        }
        break;
      case OpKind::kNegate:
        if (auto* dx = in_grad(0)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] -= g[i];
        }
        break;
      case OpKind::kScale:
        if (auto* dx = in_grad(0)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * static_cast<double>(n.scalar_attr);
        }
        break;
      case OpKind::kStack: {
        const std::size_t d = input_value(n, 0).data.size();
        for (std::size_t i = 0; i < n.inputs.size(); ++i) {
          if (auto* dx = in_grad(i)) {
            for (std::size_t j = 0; j < d; ++j) (*dx)[j] += g[i * d + j];
          }
        }
        break;
      }
      case OpKind::kClampMin:
        if (auto* dx = in_grad(0)) {
          const Tensor& x = input_value(n, 0);
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (x.data[i] >= n.scalar_attr) (*dx)[i] += g[i];
          }
        }
        break;
      case OpKind::kSliceLastDim:
        if (auto* dx = in_grad(0)) {
          const Tensor& x = input_value(n, 0);
          const int d = last_dim(x.shape);
          const int rows = leading_rows(x);
          const int offset = n.int_attrs[0];
          const int length = n.int_attrs[1];
          for (int r = 0; r < rows; ++r) {
            for (int j = 0; j < length; ++j) {
              (*dx)[static_cast<std::size_t>(r) * d + offset + j] += g[static_cast<std::size_t>(r) * length + j];
            }
          }
        }
        break;
      case OpKind::kReshape:
        if (auto* dx = in_grad(0)) {
          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
        }
        break;
    }
  }

  GradMap out;
  for (const auto& [name, id] : param_nodes_) {
    const Tensor& v = nodes_[id].value;
    Tensor g = Tensor::zeros(v.shape);
    if (!grads[id].empty()) {
      for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = static_cast<float>(grads[id][i]);
    }
    out.emplace(name, std::move(g));
  }
  for (const std::string& name : params.names()) {
    if (!out.count(name)) out.emplace(name, Tensor::zeros(params.get(name).shape));
  }
  return out;
}

// Double-precision evaluation of a recorded graph with one leaf element
// shifted. Buffers are reused across calls.
struct TapeReplayer {
  const Tape& tape;
  std::vector<std::vector<double>> vals;

  explicit TapeReplayer(const Tape& t) : tape(t), vals(t.nodes_.size()) {}

  double run(int result_node, int leaf_node, int element, double delta) {
    for (int id = 0; id <= result_node; ++id) {
      const TapeNode& n = tape.nodes_[id];
      std::vector<double>& out = vals[id];
      out.resize(n.value.data.size());
      auto in = [&](std::size_t i) -> const std::vector<double>& {
        // Constant operands are cast on demand into a scratch buffer.
        static thread_local std::vector<std::vector<double>> scratch;
        if (n.inputs[i] >= 0) return vals[n.inputs[i]];
        if (scratch.size() <= i) scratch.resize(i + 1);
        const Tensor& c = n.const_inputs[n.const_slot[i]];
        scratch[i].assign(c.data.begin(), c.data.end());
        return scratch[i];
      };
      switch (n.op) {
        case OpKind::kLeaf:
          out.assign(n.value.data.begin(), n.value.data.end());
          if (id == leaf_node) out[element] += delta;
          break;
        case OpKind::kMatmul: {
          const Tensor& a = tape.input_value(n, 0);
          const Tensor& b = tape.input_value(n, 1);
          const int nn = a.rank() == 2 ? a.shape[0] : 1;
          const int k = a.rank() == 2 ? a.shape[1] : a.shape[0];
          const int m = b.rank() == 2 ? b.shape[1] : 1;
          k_matmul(in(0).data(), in(1).data(), out.data(), nn, k, m);
          break;
        }
        case OpKind::kAdd:
        case OpKind::kSubtract:
        case OpKind::kMultiply:
        case OpKind::kMinimum: {
          const auto& a = in(0);
          const auto& b = in(1);
          k_binary(n.op, static_cast<BinMode>(n.int_attrs[0]), a.data(), a.size(), b.data(), b.size(),
                   out.data());
          break;
        }
        case OpKind::kTanh: {
          const auto& x = in(0);
          for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::tanh(x[i]);
          break;
        }
        case OpKind::kSigmoid: {
          const auto& x = in(0);
          for (std::size_t i = 0; i < x.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
          break;
        }
        case OpKind::kSoftmaxLastDim:
          k_softmax(in(0).data(), out.data(), leading_rows(n.value), last_dim(n.value.shape));
          break;
        case OpKind::kConcatLastDim: {
          std::size_t off = 0;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const auto& x = in(i);
            std::copy(x.begin(), x.end(), out.begin() + off);
            off += x.size();
          }
          break;
        }
        case OpKind::kGatherRows: {
          const Tensor& xv = tape.input_value(n, 0);
          const int d = xv.rank() == 2 ? xv.shape[1] : 1;
          const auto& x = in(0);
          for (std::size_t i = 0; i < n.int_attrs.size(); ++i) {
            std::copy_n(x.begin() + static_cast<std::size_t>(n.int_attrs[i]) * d, d, out.begin() + i * d);
          }
          break;
        }
        case OpKind::kScatterAddRows: {
          const Tensor& xv = tape.input_value(n, 0);
          const int d = xv.rank() == 2 ? xv.shape[1] : 1;
          const auto& x = in(0);
          std::fill(out.begin(), out.end(), 0.0);
          const std::size_t k = n.int_attrs.size() - 1;
          for (std::size_t i = 0; i < k; ++i) {
            for (int j = 0; j < d; ++j) out[static_cast<std::size_t>(n.int_attrs[i]) * d + j] += x[i * d + j];
          }
          break;
        }
        case OpKind::kSum: {
          const auto& x = in(0);
          out[0] = k_reduce_sum(x.data(), x.size());
          break;
        }
        case OpKind::kMean: {
          const auto& x = in(0);
          out[0] = k_reduce_sum(x.data(), x.size()) / static_cast<double>(x.size());
          break;
        }
        case OpKind::kLog: {
          const auto& x = in(0);
          for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::log(x[i]);
          break;
        }
        case OpKind::kNegate: {
          const auto& x = in(0);
          for (std::size_t i = 0; i < x.size(); ++i) out[i] = -x[i];
          break;
        }
        case OpKind::kScale: {
          const auto& x = in(0);
          const double s = n.scalar_attr;
          for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * s;
          break;
        }
        case OpKind::kStack: {
          std::size_t off = 0;
          for (std::size_t i = 0; i < n.inputs.size(); ++i) {
            const auto& x = in(i);
            std::copy(x.begin(), x.end(), out.begin() + off);
            off += x.size();
          }
          break;
        }
        case OpKind::kClampMin: {
          const auto& x = in(0);
          const double floor = n.scalar_attr;
          for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::max(x[i], floor);
          break;
        }
        case OpKind::kSliceLastDim: {
          const Tensor& xv = tape.input_value(n, 0);
          const int d = last_dim(xv.shape);
          const int rows = leading_rows(xv);
          const int offset = n.int_attrs[0];
          const int length = n.int_attrs[1];
          const auto& x = in(0);
          for (int r = 0; r < rows; ++r) {
            std::copy_n(x.begin() + static_cast<std::size_t>(r) * d + offset, length,
                        out.begin() + static_cast<std::size_t>(r) * length);
          }
          break;
        }
        case OpKind::kReshape:
        case OpKind::kStopGradient: {
          const auto& x = in(0);
          std::copy(x.begin(), x.end(), out.begin());
          break;
        }
      }
    }
    return vals[result_node][0];
  }
};

double Tape::replay_perturbed(int result_node, const std::string& param_name, int element,
                              double delta) const {
  auto it = param_nodes_.find(param_name);
  if (it == param_nodes_.end()) throw std::out_of_range("replay: unknown parameter \"" + param_name + "\"");
  TapeReplayer rep(*this);
  return rep.run(result_node, it->second, element, delta);
}

FdCheckResult finite_difference_check(ParamStore& params, const std::function<Tensor(Tape&)>& loss_fn,
                                      float eps) {
  if (eps <= 0.0f) throw std::invalid_argument("finite_difference_check: eps must be positive");
  Tape tape;
  Tensor loss = loss_fn(tape);
  {
    Tape tape2;
    Tensor loss2 = loss_fn(tape2);
    if (loss.data.size() != loss2.data.size() ||
        std::memcmp(loss.data.data(), loss2.data.data(), loss.data.size() * sizeof(float)) != 0) {
      throw std::runtime_error("finite_difference_check: loss_fn is non-deterministic");
    }
  }
  const auto param_nodes = tape.param_nodes();
  GradMap analytic = tape.backward(loss, params);

  FdCheckResult result;
  TapeReplayer rep(tape);
  const double de = static_cast<double>(eps);
  for (const auto& [name, leaf] : param_nodes) {
    const Tensor& grad = analytic.at(name);
    for (int e = 0; e < static_cast<int>(grad.data.size()); ++e) {
      const double plus = rep.run(loss.node, leaf, e, de);
      const double minus = rep.run(loss.node, leaf, e, -de);
      const double numeric = (plus - minus) / (2.0 * de);
      const double a = grad.data[e];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error) {
        result.max_rel_error = static_cast<float>(rel);
        result.worst_param = name;
        result.worst_element = e;
        result.analytic = static_cast<float>(a);
        result.numeric = static_cast<float>(numeric);
      }
    }
  }
  return result;
}

}  // namespace cbsum

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace cbsum {

// Dense row-major array of 32-bit reals. `node` identifies the tape node
// that produced it; -1 marks a constant outside any computation record.
struct Tensor {
  std::vector<int> shape;
  std::vector<float> data;
  int node = -1;

  Tensor() = default;
  Tensor(std::vector<int> shape_in, std::vector<float> data_in);

  static Tensor zeros(std::vector<int> shape_in);
  static Tensor full(std::vector<int> shape_in, float value);
  static Tensor scalar(float value);  // shape [1]

  std::int64_t size() const;
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const;
  int cols() const;
  float item() const;  // single-element tensors only
  float& at(int r, int c);
  float at(int r, int c) const;
};

std::int64_t shape_size(const std::vector<int>& shape);
std::string shape_str(const std::vector<int>& shape);

enum class OpKind {
  kLeaf,
  kMatmul,
  kAdd,
  kSubtract,
  kMultiply,
  kTanh,
  kSigmoid,
  kSoftmaxLastDim,
  kConcatLastDim,
  kGatherRows,
  kScatterAddRows,
  kSum,
  kMean,
  kLog,
  kNegate,
  kScale,
  kStack,
  kMinimum,
  kClampMin,
  kSliceLastDim,
  kReshape,
  kStopGradient,
};

const char* op_name(OpKind kind);

// Named parameter tensors. Reads may be shared; writes (optimizer steps,
// checkpoint loads) require exclusive access.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Tensor& mutate(const std::string& name);
  void set(const std::string& name, Tensor value);
  std::vector<std::string> names() const;  // sorted
  std::size_t count() const { return params_.size(); }
  std::int64_t element_count() const;

  // Binary checkpoint blob: magic "CBDC", u32 LE version (1), u32 LE entry
  // count; per entry u32 LE name length + UTF-8 name, u32 LE rank, u32 LE
  // extents, row-major fp32 LE data.
  void save(const std::string& path) const;
  static ParamStore load(const std::string& path);

 private:
  std::map<std::string, Tensor> params_;
};

using GradMap = std::map<std::string, Tensor>;

struct TapeNode {
  OpKind op = OpKind::kLeaf;
  std::vector<int> inputs;            // node ids, -1 for constant operands
  std::vector<int> const_slot;        // per input: index into const_inputs or -1
  std::vector<Tensor> const_inputs;   // saved values of constant operands
  Tensor value;                       // forward output
  std::vector<int> int_attrs;         // indices, slice bounds, row counts
  float scalar_attr = 0.0f;
  std::string name;                   // parameter leaves only
};

// Single-use computation record: build the forward pass, call backward()
// once, then discard. One record is confined to one thread; distinct
// records may run concurrently.
class Tape {
 public:
  // Registers a parameter leaf; repeated calls with the same name return
  // the node created first.
  Tensor param(const std::string& name, const Tensor& value);

  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor subtract(const Tensor& a, const Tensor& b);
  Tensor multiply(const Tensor& a, const Tensor& b);
  Tensor tanh(const Tensor& x);
  Tensor sigmoid(const Tensor& x);
  Tensor softmax(const Tensor& x);  // last dim, max-subtracted
  Tensor concat(const std::vector<Tensor>& xs);  // rank-1 inputs
  Tensor gather_rows(const Tensor& x, const std::vector<int>& indices);
  Tensor scatter_add_rows(const Tensor& x, const std::vector<int>& indices, int out_rows);
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);
  Tensor log(const Tensor& x);
  Tensor negate(const Tensor& x);
  Tensor scale(const Tensor& x, float s);
  Tensor stack(const std::vector<Tensor>& xs);  // rank-1 rows -> rank-2
  Tensor minimum(const Tensor& a, const Tensor& b);
  Tensor clamp_min(const Tensor& x, float floor);
  Tensor slice(const Tensor& x, int offset, int length);  // last dim
  Tensor reshape(const Tensor& x, std::vector<int> new_shape);
  Tensor stop_gradient(const Tensor& x);

  // Reverse sweep from a scalar loss. Returns one gradient per parameter
  // in `params` (zeros for parameters the loss does not reach), plus any
  // leaves registered on this tape that are absent from the store.
  GradMap backward(const Tensor& loss, const ParamStore& params);

  // Re-evaluates the recorded graph in double precision with one element
  // of one parameter leaf shifted by `delta`. Used by the finite-difference
  // oracle; fp32 storage of the live graph is unaffected.
  double replay_perturbed(int result_node, const std::string& param_name,
                          int element, double delta) const;

  std::size_t node_count() const { return nodes_.size(); }
  const TapeNode& node(int id) const { return nodes_.at(id); }
  const std::map<std::string, int>& param_nodes() const { return param_nodes_; }

 private:
  friend struct TapeReplayer;
  Tensor emit(TapeNode n);
  void record_inputs(TapeNode& n, const std::vector<Tensor>& ins);
  const Tensor& input_value(const TapeNode& n, std::size_t i) const;

  std::vector<TapeNode> nodes_;
  std::map<std::string, int> param_nodes_;
  bool backward_done_ = false;
};

struct FdCheckResult {
  float max_rel_error = 0.0f;
  std::string worst_param;
  int worst_element = -1;
  float analytic = 0.0f;
  float numeric = 0.0f;
};

// Central-difference gradient check over every element of every parameter.
// `loss_fn` must build a fresh graph on the given tape (registering the
// parameters it uses via tape.param) and return a scalar loss; it is run
// twice to detect non-determinism. The numeric side re-evaluates the
// recorded graph in double precision so the comparison isolates errors in
// the backward pass rather than fp32 forward noise.
FdCheckResult finite_difference_check(ParamStore& params,
                                      const std::function<Tensor(Tape&)>& loss_fn,
                                      float eps = 1e-3f);

}  // namespace cbsum

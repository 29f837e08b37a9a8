#pragma once

#include "textmesh/error.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace textmesh::diff {

// Flat parameter storage partitioned into named segments (per-layer
// weights/biases, density-transform scalars, texels). Segment offsets
// partition the array exactly: no gaps, no overlap.
class ParamVector {
 public:
  struct Segment {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
  };

  ParamVector() = default;

  // Appends a segment; returns its offset.
  std::size_t add_segment(std::string name, std::size_t size, double fill = 0.0);

  // Validates that `segments` exactly partitions `values`.
  static ParamVector from_parts(std::vector<Segment> segments, std::vector<double> values);

  bool has_segment(std::string_view name) const;
  const Segment& segment_info(std::string_view name) const;
  std::span<double> segment(std::string_view name);
  std::span<const double> segment(std::string_view name) const;
  const std::vector<Segment>& segments() const { return segments_; }

  std::size_t size() const { return values_.size(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }

  // Segment containing flat index i (for error reporting).
  const Segment& segment_at_index(std::size_t i) const;

 private:
  std::vector<Segment> segments_;
  std::vector<double> values_;
};

struct GradResult {
  double value = 0.0;
  std::vector<double> gradient;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

// Fixed-coefficient sparse linear map in CSR form; out_i = sum_k w_ik x_k.
struct SparseMap {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> row_ptr;  // size rows+1
  std::vector<std::uint32_t> col_idx;
  std::vector<double> weight;

  void validate() const;
};

struct Node {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape over flat double buffers. Forward evaluation is eager;
// backward() runs once per tape. Structured primitives (affine, cumsum_rows,
// row_sum, col) take logical dimensions explicitly.
//
// A tape is single-writer. Independent tapes may run on separate threads;
// the ParamVector handed to the constructor must stay unchanged (and alive)
// for the tape's lifetime.
class Tape {
 public:
  explicit Tape(const ParamVector& params);

  // Leaves ---------------------------------------------------------------
  Node param(std::string_view segment_name);
  Node constant(std::vector<double> values);
  Node constant(std::span<const double> values);

  // Affine map: x (r x k) times w (k x c) plus row-broadcast bias b (c).
  Node affine(Node x, Node w, Node b, std::size_t r, std::size_t k, std::size_t c);

  // Pointwise nonlinearities.
  Node exp(Node x);
  Node sin(Node x);
  Node cos(Node x);
  Node sigmoid(Node x);
  Node softplus(Node x);
  Node sqrt(Node x);

  // Pointwise binary; operands must match in size, or either may be a
  // 1-element node (scalar broadcast).
  Node add(Node a, Node b);
  Node sub(Node a, Node b);
  Node mul(Node a, Node b);
  Node div(Node a, Node b);

  // a*x + b with compile-time constants (covers negation, scaling, 1-x).
  Node affine_scalar(Node x, double a, double b);

  // Inclusive prefix sum along each row of an (rows x cols) buffer.
  Node cumsum_rows(Node x, std::size_t rows, std::size_t cols);
  // Per-row total of an (rows x cols) buffer -> (rows).
  Node row_sum(Node x, std::size_t rows, std::size_t cols);
  // Column j of an (rows x cols) buffer -> (rows).
  Node col(Node x, std::size_t rows, std::size_t cols, std::size_t j);
  // Total reduction to a 1-element node.
  Node sum(Node x);

  // CDF-shaped density transform core: psi(u, beta), beta a 1-element node.
  Node psi(Node u, Node beta);

  Node clamp_min(Node x, double floor);

  // out = map * x. The map's coefficients are constants of the program.
  Node sparse_linear(const SparseMap& map, Node x);

  // Access ---------------------------------------------------------------
  std::span<const double> value(Node n) const;
  std::size_t node_size(Node n) const;

  // Reverse sweep from a 1-element output node. Gradient is laid out like
  // the ParamVector. May be called once per tape.
  GradResult backward(Node output);

  const ParamVector& params() const { return params_; }

 private:
  struct NodeData {
    const char* op = "";
    std::size_t size = 0;
    std::vector<double> val;
    std::vector<double> adj;
    std::vector<int> inputs;
    std::function<void(Tape&, NodeData&)> back;
    std::vector<std::uint16_t> segs;  // sorted unique segment indices
    int param_segment = -1;
    std::size_t param_offset = 0;
  };

  NodeData& node(Node n);
  const NodeData& node(Node n) const;
  Node push(NodeData nd);
  void check_finite(const NodeData& nd) const;
  std::vector<std::uint16_t> merge_segs(std::initializer_list<Node> inputs) const;
  std::string describe_segs(const std::vector<std::uint16_t>& segs) const;
  Node pointwise(const char* name, Node x, double (*f)(double),
                 double (*df)(double value_in, double value_out));
  Node binary(const char* name, Node a, Node b, int kind);

  const ParamVector& params_;
  std::vector<NodeData> nodes_;
  bool backward_done_ = false;
};

// A differentiable program: builds the computation on the given tape and
// returns the output node. Must be deterministic and composed only of
// registered primitives.
using Program = std::function<Node(Tape&)>;

// Evaluate the scalarized program and its exact reverse-mode gradient with
// respect to every parameter.
GradResult value_and_grad(const Program& program, const ParamVector& params);

// Forward-only evaluation of a scalar program.
double evaluate(const Program& program, const ParamVector& params);

// Central-difference oracle: (f(p + h e_i) - f(p - h e_i)) / 2h per
// coordinate. Independent of the reverse-mode path.
std::vector<double> finite_difference_gradient(const Program& program,
                                               const ParamVector& params,
                                               double h);

// Names of all registered primitives (one entry per distinct op the tape
// can record). Tests iterate this list to keep FD coverage exhaustive.
std::vector<std::string> registered_primitives();

}  // namespace textmesh::diff

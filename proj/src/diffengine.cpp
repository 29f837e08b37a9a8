#include "textmesh/diffengine.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace textmesh::diff {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

[[noreturn]] void fail(const std::string& msg) { throw TapeError(msg); }

}  // namespace

// ---------------------------------------------------------------------------
// ParamVector

std::size_t ParamVector::add_segment(std::string name, std::size_t size, double fill) {
  if (size == 0) fail("parameter segment '" + name + "' must be non-empty");
  for (const auto& s : segments_) {
    if (s.name == name) fail("duplicate parameter segment '" + name + "'");
  }
  const std::size_t offset = values_.size();
  segments_.push_back({std::move(name), offset, size});
  values_.resize(offset + size, fill);
  return offset;
}

ParamVector ParamVector::from_parts(std::vector<Segment> segments, std::vector<double> values) {
  std::sort(segments.begin(), segments.end(),
            [](const Segment& a, const Segment& b) { return a.offset < b.offset; });
  std::size_t cursor = 0;
  for (std::size_t i = 0; i < segments.size(); ++i) {
    const Segment& s = segments[i];
    if (s.offset != cursor || s.size == 0) {
      fail("parameter segments do not partition the value array at '" + s.name + "'");
    }
    for (std::size_t j = i + 1; j < segments.size(); ++j) {
      if (segments[j].name == s.name) fail("duplicate parameter segment '" + s.name + "'");
    }
    cursor += s.size;
  }
  if (cursor != values.size()) fail("parameter segments do not cover the value array");
  ParamVector pv;
  pv.segments_ = std::move(segments);
  pv.values_ = std::move(values);
  return pv;
}

bool ParamVector::has_segment(std::string_view name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return true;
  }
  return false;
}

const ParamVector::Segment& ParamVector::segment_info(std::string_view name) const {
  for (const auto& s : segments_) {
    if (s.name == name) return s;
  }
  fail("unknown parameter segment '" + std::string(name) + "'");
}

std::span<double> ParamVector::segment(std::string_view name) {
  const Segment& s = segment_info(name);
  return {values_.data() + s.offset, s.size};
}

std::span<const double> ParamVector::segment(std::string_view name) const {
  const Segment& s = segment_info(name);
  return {values_.data() + s.offset, s.size};
}

const ParamVector::Segment& ParamVector::segment_at_index(std::size_t i) const {
  for (const auto& s : segments_) {
    if (i >= s.offset && i < s.offset + s.size) return s;
  }
  fail("parameter index out of range");
}

// ---------------------------------------------------------------------------
// SparseMap

void SparseMap::validate() const {
  if (row_ptr.size() != rows + 1 || row_ptr.front() != 0 ||
      row_ptr.back() != col_idx.size() || col_idx.size() != weight.size()) {
    fail("sparse map structure is inconsistent");
  }
  for (std::size_t i = 0; i < rows; ++i) {
    if (row_ptr[i] > row_ptr[i + 1]) fail("sparse map row pointers must be non-decreasing");
  }
  for (std::uint32_t c : col_idx) {
    if (c >= cols) fail("sparse map column index out of range");
  }
}

// ---------------------------------------------------------------------------
// Tape

Tape::Tape(const ParamVector& params) : params_(params) {
  if (params.segments().size() > 0xFFFF) fail("too many parameter segments");
}

Tape::NodeData& Tape::node(Node n) {
  if (!n.valid() || static_cast<std::size_t>(n.id) >= nodes_.size()) fail("invalid tape node");
  return nodes_[static_cast<std::size_t>(n.id)];
}

const Tape::NodeData& Tape::node(Node n) const {
  if (!n.valid() || static_cast<std::size_t>(n.id) >= nodes_.size()) fail("invalid tape node");
  return nodes_[static_cast<std::size_t>(n.id)];
}

Node Tape::push(NodeData nd) {
  check_finite(nd);
  nodes_.push_back(std::move(nd));
  return Node{static_cast<int>(nodes_.size()) - 1};
}

void Tape::check_finite(const NodeData& nd) const {
  for (double v : nd.val) {
    if (!std::isfinite(v)) {
      fail("non-finite value produced by primitive '" + std::string(nd.op) +
           "' (depends on parameter segments: " + describe_segs(nd.segs) + ")");
    }
  }
}

std::vector<std::uint16_t> Tape::merge_segs(std::initializer_list<Node> inputs) const {
  std::vector<std::uint16_t> out;
  for (Node n : inputs) {
    if (!n.valid()) continue;
    const auto& s = node(n).segs;
    std::vector<std::uint16_t> merged;
    std::set_union(out.begin(), out.end(), s.begin(), s.end(), std::back_inserter(merged));
    out = std::move(merged);
  }
  return out;
}

std::string Tape::describe_segs(const std::vector<std::uint16_t>& segs) const {
  if (segs.empty()) return "none";
  std::ostringstream os;
  for (std::size_t i = 0; i < segs.size(); ++i) {
    if (i) os << ", ";
    os << params_.segments()[segs[i]].name;
  }
  return os.str();
}

Node Tape::param(std::string_view segment_name) {
  const auto& info = params_.segment_info(segment_name);
  std::uint16_t seg_index = 0;
  for (std::size_t i = 0; i < params_.segments().size(); ++i) {
    if (&params_.segments()[i] == &info) seg_index = static_cast<std::uint16_t>(i);
  }
  NodeData nd;
  nd.op = "param";
  nd.size = info.size;
  nd.val.assign(params_.values().begin() + static_cast<std::ptrdiff_t>(info.offset),
                params_.values().begin() + static_cast<std::ptrdiff_t>(info.offset + info.size));
  nd.segs = {seg_index};
  nd.param_segment = static_cast<int>(seg_index);
  nd.param_offset = info.offset;
  return push(std::move(nd));
}

Node Tape::constant(std::vector<double> values) {
  if (values.empty()) fail("constant node must be non-empty");
  NodeData nd;
  nd.op = "constant";
  nd.size = values.size();
  nd.val = std::move(values);
  return push(std::move(nd));
}

Node Tape::constant(std::span<const double> values) {
  return constant(std::vector<double>(values.begin(), values.end()));
}

Node Tape::affine(Node x, Node w, Node b, std::size_t r, std::size_t k, std::size_t c) {
  const NodeData& xn = node(x);
  const NodeData& wn = node(w);
  const NodeData& bn = node(b);
  if (xn.size != r * k || wn.size != k * c || bn.size != c) {
    fail("affine operand sizes do not match the declared dimensions");
  }
  NodeData nd;
  nd.op = "affine";
  nd.size = r * c;
  nd.val.resize(r * c);
  {
    ConstMatMap X(xn.val.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
    ConstMatMap W(wn.val.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
    ConstVecMap B(bn.val.data(), static_cast<Eigen::Index>(c));
    MatMap Out(nd.val.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    Out.noalias() = X * W;
    Out.rowwise() += B.transpose();
  }
  nd.inputs = {x.id, w.id, b.id};
  nd.segs = merge_segs({x, w, b});
  nd.back = [xi = x.id, wi = w.id, bi = b.id, r, k, c](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    NodeData& wn2 = t.nodes_[static_cast<std::size_t>(wi)];
    NodeData& bn2 = t.nodes_[static_cast<std::size_t>(bi)];
    ConstMatMap dOut(self.adj.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    ConstMatMap X(xn2.val.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
    ConstMatMap W(wn2.val.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    if (wn2.adj.empty()) wn2.adj.assign(wn2.size, 0.0);
    if (bn2.adj.empty()) bn2.adj.assign(bn2.size, 0.0);
    MatMap dX(xn2.adj.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
    MatMap dW(wn2.adj.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(c));
    VecMap dB(bn2.adj.data(), static_cast<Eigen::Index>(c));
    dX.noalias() += dOut * W.transpose();
    dW.noalias() += X.transpose() * dOut;
    dB += dOut.colwise().sum().transpose();
  };
  return push(std::move(nd));
}

Node Tape::pointwise(const char* name, Node x, double (*f)(double),
                     double (*df)(double, double)) {
  const NodeData& xn = node(x);
  NodeData nd;
  nd.op = name;
  nd.size = xn.size;
  nd.val.resize(xn.size);
  for (std::size_t i = 0; i < xn.size; ++i) nd.val[i] = f(xn.val[i]);
  nd.inputs = {x.id};
  nd.segs = merge_segs({x});
  nd.back = [xi = x.id, df](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    for (std::size_t i = 0; i < self.size; ++i) {
      xn2.adj[i] += self.adj[i] * df(xn2.val[i], self.val[i]);
    }
  };
  return push(std::move(nd));
}

Node Tape::exp(Node x) {
  return pointwise("exp", x, [](double v) { return std::exp(v); },
                   [](double, double out) { return out; });
}

Node Tape::sin(Node x) {
  return pointwise("sin", x, [](double v) { return std::sin(v); },
                   [](double in, double) { return std::cos(in); });
}

Node Tape::cos(Node x) {
  return pointwise("cos", x, [](double v) { return std::cos(v); },
                   [](double in, double) { return -std::sin(in); });
}

Node Tape::sigmoid(Node x) {
  return pointwise(
      "sigmoid", x,
      [](double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double, double out) { return out * (1.0 - out); });
}

Node Tape::softplus(Node x) {
  return pointwise(
      "softplus", x,
      [](double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); },
      [](double in, double) {
        return in >= 0.0 ? 1.0 / (1.0 + std::exp(-in)) : std::exp(in) / (1.0 + std::exp(in));
      });
}

Node Tape::sqrt(Node x) {
  return pointwise("sqrt", x, [](double v) { return std::sqrt(v); },
                   [](double, double out) { return 0.5 / out; });
}

Node Tape::binary(const char* name, Node a, Node b, int kind) {
  const NodeData& an = node(a);
  const NodeData& bn = node(b);
  if (an.size != bn.size && an.size != 1 && bn.size != 1) {
    fail(std::string(name) + " operands must match in size or broadcast from a scalar");
  }
  const std::size_t n = std::max(an.size, bn.size);
  const std::size_t sa = an.size == 1 ? 0 : 1;  // stride
  const std::size_t sb = bn.size == 1 ? 0 : 1;
  NodeData nd;
  nd.op = name;
  nd.size = n;
  nd.val.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double av = an.val[i * sa];
    const double bv = bn.val[i * sb];
    switch (kind) {
      case 0: nd.val[i] = av + bv; break;
      case 1: nd.val[i] = av - bv; break;
      case 2: nd.val[i] = av * bv; break;
      default: nd.val[i] = av / bv; break;
    }
  }
  nd.inputs = {a.id, b.id};
  nd.segs = merge_segs({a, b});
  nd.back = [ai = a.id, bi = b.id, sa, sb, kind](Tape& t, NodeData& self) {
    NodeData& an2 = t.nodes_[static_cast<std::size_t>(ai)];
    NodeData& bn2 = t.nodes_[static_cast<std::size_t>(bi)];
    if (an2.adj.empty()) an2.adj.assign(an2.size, 0.0);
    if (bn2.adj.empty()) bn2.adj.assign(bn2.size, 0.0);
    for (std::size_t i = 0; i < self.size; ++i) {
      const double g = self.adj[i];
      const double av = an2.val[i * sa];
      const double bv = bn2.val[i * sb];
      switch (kind) {
        case 0:
          an2.adj[i * sa] += g;
          bn2.adj[i * sb] += g;
          break;
        case 1:
          an2.adj[i * sa] += g;
          bn2.adj[i * sb] -= g;
          break;
        case 2:
          an2.adj[i * sa] += g * bv;
          bn2.adj[i * sb] += g * av;
          break;
        default:
          an2.adj[i * sa] += g / bv;
          bn2.adj[i * sb] -= g * av / (bv * bv);
          break;
      }
    }
  };
  return push(std::move(nd));
}

Node Tape::add(Node a, Node b) { return binary("add", a, b, 0); }
Node Tape::sub(Node a, Node b) { return binary("sub", a, b, 1); }
Node Tape::mul(Node a, Node b) { return binary("mul", a, b, 2); }
Node Tape::div(Node a, Node b) { return binary("div", a, b, 3); }

Node Tape::affine_scalar(Node x, double a, double b) {
  const NodeData& xn = node(x);
  NodeData nd;
  nd.op = "affine_scalar";
  nd.size = xn.size;
  nd.val.resize(xn.size);
  for (std::size_t i = 0; i < xn.size; ++i) nd.val[i] = a * xn.val[i] + b;
  nd.inputs = {x.id};
  nd.segs = merge_segs({x});
  nd.back = [xi = x.id, a](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    for (std::size_t i = 0; i < self.size; ++i) xn2.adj[i] += a * self.adj[i];
  };
  return push(std::move(nd));
}

Node Tape::cumsum_rows(Node x, std::size_t rows, std::size_t cols) {
  const NodeData& xn = node(x);
  if (xn.size != rows * cols) fail("cumsum_rows operand size does not match dimensions");
  NodeData nd;
  nd.op = "cumsum_rows";
  nd.size = xn.size;
  nd.val.resize(xn.size);
  for (std::size_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      acc += xn.val[r * cols + c];
      nd.val[r * cols + c] = acc;
    }
  }
  nd.inputs = {x.id};
  nd.segs = merge_segs({x});
  nd.back = [xi = x.id, rows, cols](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = 0.0;
      for (std::size_t c = cols; c-- > 0;) {
        acc += self.adj[r * cols + c];
        xn2.adj[r * cols + c] += acc;
      }
    }
  };
  return push(std::move(nd));
}

Node Tape::row_sum(Node x, std::size_t rows, std::size_t cols) {
  const NodeData& xn = node(x);
  if (xn.size != rows * cols) fail("row_sum operand size does not match dimensions");
  NodeData nd;
  nd.op = "row_sum";
  nd.size = rows;
  nd.val.assign(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) nd.val[r] += xn.val[r * cols + c];
  }
  nd.inputs = {x.id};
  nd.segs = merge_segs({x});
  nd.back = [xi = x.id, rows, cols](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) xn2.adj[r * cols + c] += self.adj[r];
    }
  };
  return push(std::move(nd));
}

Node Tape::col(Node x, std::size_t rows, std::size_t cols, std::size_t j) {
  const NodeData& xn = node(x);
  if (xn.size != rows * cols || j >= cols) fail("col operand size does not match dimensions");
  NodeData nd;
  nd.op = "col";
  nd.size = rows;
  nd.val.resize(rows);
  for (std::size_t r = 0; r < rows; ++r) nd.val[r] = xn.val[r * cols + j];
  nd.inputs = {x.id};
  nd.segs = merge_segs({x});
  nd.back = [xi = x.id, cols, j](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    for (std::size_t r = 0; r < self.size; ++r) xn2.adj[r * cols + j] += self.adj[r];
  };
  return push(std::move(nd));
}

Node Tape::sum(Node x) {
  const NodeData& xn = node(x);
  NodeData nd;
  nd.op = "sum";
  nd.size = 1;
  double acc = 0.0;
  for (double v : xn.val) acc += v;
  nd.val = {acc};
  nd.inputs = {x.id};
  nd.segs = merge_segs({x});
  nd.back = [xi = x.id](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    for (std::size_t i = 0; i < xn2.size; ++i) xn2.adj[i] += self.adj[0];
  };
  return push(std::move(nd));
}

Node Tape::psi(Node u, Node beta) {
  const NodeData& un = node(u);
  const NodeData& bn = node(beta);
  if (bn.size != 1) fail("psi expects a 1-element beta node");
  const double b = bn.val[0];
  if (!(b > 0.0)) fail("psi requires positive beta");
  NodeData nd;
  nd.op = "psi";
  nd.size = un.size;
  nd.val.resize(un.size);
  for (std::size_t i = 0; i < un.size; ++i) {
    const double v = un.val[i];
    nd.val[i] = v <= 0.0 ? 0.5 * std::exp(v / b) : 1.0 - 0.5 * std::exp(-v / b);
  }
  nd.inputs = {u.id, beta.id};
  nd.segs = merge_segs({u, beta});
  nd.back = [ui = u.id, bi = beta.id](Tape& t, NodeData& self) {
    NodeData& un2 = t.nodes_[static_cast<std::size_t>(ui)];
    NodeData& bn2 = t.nodes_[static_cast<std::size_t>(bi)];
    if (un2.adj.empty()) un2.adj.assign(un2.size, 0.0);
    if (bn2.adj.empty()) bn2.adj.assign(bn2.size, 0.0);
    const double b = bn2.val[0];
    for (std::size_t i = 0; i < self.size; ++i) {
      const double v = un2.val[i];
      const double core = std::exp(-std::abs(v) / b) * 0.5;
      un2.adj[i] += self.adj[i] * core / b;
      bn2.adj[0] += self.adj[i] * (-v / (b * b)) * core;
    }
  };
  return push(std::move(nd));
}

Node Tape::clamp_min(Node x, double floor) {
  const NodeData& xn = node(x);
  NodeData nd;
  nd.op = "clamp_min";
  nd.size = xn.size;
  nd.val.resize(xn.size);
  for (std::size_t i = 0; i < xn.size; ++i) nd.val[i] = std::max(xn.val[i], floor);
  nd.inputs = {x.id};
  nd.segs = merge_segs({x});
  nd.back = [xi = x.id, floor](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    for (std::size_t i = 0; i < self.size; ++i) {
      if (xn2.val[i] > floor) xn2.adj[i] += self.adj[i];
    }
  };
  return push(std::move(nd));
}

Node Tape::sparse_linear(const SparseMap& map, Node x) {
  map.validate();
  const NodeData& xn = node(x);
  if (xn.size != map.cols) fail("sparse_linear operand size does not match map columns");
  NodeData nd;
  nd.op = "sparse_linear";
  nd.size = map.rows;
  nd.val.assign(map.rows, 0.0);
  for (std::size_t i = 0; i < map.rows; ++i) {
    for (std::uint32_t e = map.row_ptr[i]; e < map.row_ptr[i + 1]; ++e) {
      nd.val[i] += map.weight[e] * xn.val[map.col_idx[e]];
    }
  }
  nd.inputs = {x.id};
  nd.segs = merge_segs({x});
  // The map is copied into the closure: callers typically build it per
  // evaluation (rasterization footprints), so ownership must not leak out.
  nd.back = [xi = x.id, map](Tape& t, NodeData& self) {
    NodeData& xn2 = t.nodes_[static_cast<std::size_t>(xi)];
    if (xn2.adj.empty()) xn2.adj.assign(xn2.size, 0.0);
    for (std::size_t i = 0; i < map.rows; ++i) {
      for (std::uint32_t e = map.row_ptr[i]; e < map.row_ptr[i + 1]; ++e) {
        xn2.adj[map.col_idx[e]] += map.weight[e] * self.adj[i];
      }
    }
  };
  return push(std::move(nd));
}

std::span<const double> Tape::value(Node n) const {
  const NodeData& nd = node(n);
  if (nd.val.size() != nd.size) fail("node value was already released by backward()");
  return nd.val;
}

std::size_t Tape::node_size(Node n) const { return node(n).size; }

GradResult Tape::backward(Node output) {
  if (backward_done_) fail("backward() may run only once per tape");
  backward_done_ = true;
  NodeData& out = node(output);
  if (out.size != 1) fail("backward() requires a 1-element output node");

  GradResult result;
  result.value = out.val[0];
  result.gradient.assign(params_.size(), 0.0);

  out.adj = {1.0};
  for (int id = output.id; id >= 0; --id) {
    NodeData& nd = nodes_[static_cast<std::size_t>(id)];
    if (!nd.adj.empty()) {
      if (nd.param_segment >= 0) {
        for (std::size_t i = 0; i < nd.size; ++i) {
          result.gradient[nd.param_offset + i] += nd.adj[i];
        }
      } else if (nd.back) {
        nd.back(*this, nd);
      }
    }
    std::vector<double>().swap(nd.val);
    std::vector<double>().swap(nd.adj);
    nd.back = nullptr;
  }

  for (std::size_t i = 0; i < result.gradient.size(); ++i) {
    if (!std::isfinite(result.gradient[i])) {
      fail("non-finite gradient entry in parameter segment '" +
           params_.segment_at_index(i).name + "'");
    }
  }
  return result;
}

// ---------------------------------------------------------------------------
// Free functions

GradResult value_and_grad(const Program& program, const ParamVector& params) {
  Tape tape(params);
  Node out = program(tape);
  return tape.backward(out);
}

double evaluate(const Program& program, const ParamVector& params) {
  Tape tape(params);
  Node out = program(tape);
  auto v = tape.value(out);
  if (v.size() != 1) fail("evaluate() requires a 1-element output node");
  return v[0];
}

std::vector<double> finite_difference_gradient(const Program& program,
                                               const ParamVector& params, double h) {
  ParamVector p = params;
  std::vector<double> grad(p.size(), 0.0);
  auto vals = p.values();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double saved = vals[i];
    vals[i] = saved + h;
    const double hi = evaluate(program, p);
    vals[i] = saved - h;
    const double lo = evaluate(program, p);
    vals[i] = saved;
    grad[i] = (hi - lo) / (2.0 * h);
  }
  return grad;
}

std::vector<std::string> registered_primitives() {
  return {"param",  "constant",      "affine",  "exp",     "sin",       "cos",
          "sigmoid", "softplus",     "sqrt",    "add",     "sub",       "mul",
          "div",     "affine_scalar", "cumsum_rows", "row_sum", "col",  "sum",
          "psi",     "clamp_min",    "sparse_linear"};
}

}  // namespace textmesh::diff

#pragma once

#include "textmesh/diffengine.hpp"
#include "textmesh/rng.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace textmesh::field {

struct FieldConfig {
  int num_frequencies = 6;  // positional encoding octaves L
  bool include_input = true;
  int hidden_width = 128;       // SDF trunk width
  int hidden_layers = 4;        // SDF trunk depth
  int color_hidden_width = 128; // color head hidden width
  double bound = 1.0;           // scene is the cube [-bound, bound]^3

  bool operator==(const FieldConfig&) const = default;
};

// 3*(include_input) + 6*L per point.
std::size_t encoding_dim(const FieldConfig& cfg);

// Frequency features for n points (xyz interleaved). Per point:
// [x, y, z] (if included), then per octave k: sin(2^k pi x) for the three
// coordinates followed by cos(2^k pi x) for the three coordinates.
std::vector<double> encode(std::span<const double> xyz, std::size_t n, const FieldConfig& cfg);

// Cumulative density transform core. Continuous, strictly increasing,
// 0.5 at u = 0, limits 0 and 1.
double psi_beta(double u, double beta);

// Neural SDF + color field with a learnable density transform. Parameters
// live in a flat ParamVector with per-layer segments so gradient plumbing
// and error reporting can name individual layers.
class Field {
 public:
  Field(FieldConfig cfg, std::uint64_t seed);
  static Field from_params(FieldConfig cfg, diff::ParamVector params);

  const FieldConfig& config() const { return cfg_; }
  diff::ParamVector& params() { return params_; }
  const diff::ParamVector& params() const { return params_; }

  double alpha() const;  // exp(log_alpha), > 0
  double beta() const;   // exp(log_beta), > 0
  double density_of_sdf(double s) const;  // alpha * psi_beta(-s)

  // --- Tape builders (positions/directions are fixed inputs, so they enter
  // the program as constants; only field parameters carry gradients).

  // Signed distances for n points -> n-element node. Points outside the
  // scene cube are clamped onto it, with the clamp distance added back so
  // the field stays continuous across the boundary.
  diff::Node sdf_program(diff::Tape& t, std::span<const double> xyz, std::size_t n) const;
  // RGB in [0,1] for n (point, unit-direction) pairs -> 3n-element node.
  diff::Node color_program(diff::Tape& t, std::span<const double> xyz,
                           std::span<const double> dirs, std::size_t n) const;
  // Densities alpha * psi_beta(-s) from an n-element SDF node.
  diff::Node density_program(diff::Tape& t, diff::Node sdf_values) const;

  // --- Plain evaluation (no tape): identical arithmetic to the programs.
  void eval_sdf(std::span<const double> xyz, std::size_t n, std::span<double> out) const;
  void eval_color(std::span<const double> xyz, std::span<const double> dirs, std::size_t n,
                  std::span<double> out) const;
  double sdf_at(double x, double y, double z) const;

  struct Sample {
    double s = 0.0;
    std::array<double, 3> c{};
    double sigma = 0.0;
  };
  // Requires |d| = 1 within 1e-6.
  Sample eval_sample(const std::array<double, 3>& x, const std::array<double, 3>& d) const;

  // Regress the field to the analytic sphere |x| - radius. Returns the
  // held-out mean absolute error; throws if it never reaches the 0.02
  // acceptance threshold within `steps`.
  double init_sphere(double radius, int steps, Rng& rng);

 private:
  void build_segments(std::uint64_t seed);
  void validate_layout() const;

  FieldConfig cfg_;
  diff::ParamVector params_;
};

// Checkpoint: plain-text header (magic, segment table of name/offset/length)
// followed by the values as little-endian float32. Round-trips bit-exactly:
// loading returns exactly the float32 values widened to double.
void save_params(const std::string& path, const diff::ParamVector& params);
diff::ParamVector load_params(const std::string& path);

// Snap a parameter vector to float32 precision in place (the persistence
// boundary), so in-memory state matches a save/load round trip exactly.
void quantize_to_f32(diff::ParamVector& params);

}  // namespace textmesh::field

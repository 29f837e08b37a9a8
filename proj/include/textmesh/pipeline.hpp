#pragma once

#include "textmesh/error.hpp"
#include "textmesh/field.hpp"
#include "textmesh/guidance.hpp"
#include "textmesh/mesh.hpp"
#include "textmesh/retexture.hpp"
#include "textmesh/sds.hpp"
#include "textmesh/texrast.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace textmesh::pipeline {

inline constexpr const char* kToolName = "textmesh";
inline constexpr const char* kToolVersion = "0.1.0";

class PipelineError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------
//
// Plain-text configuration with [section] headers and `key = value` lines.
// Values keep everything after the first '=' (trimmed), so prompts may
// contain spaces. Full-line comments start with '#' or ';'. Unknown sections
// and keys are rejected. to_text() emits every key with its effective value,
// so a parsed-and-reserialized config is complete even when the input file
// set only a few keys.

enum class GuidanceBackend { analytic, remote };

struct RunSection {
  std::string prompt = "a test object";
  std::uint64_t seed = 0;
  std::string out = "runs/default";

  bool operator==(const RunSection&) const = default;
};

struct FieldSection {
  int num_frequencies = 6;
  bool include_input = true;
  int hidden_width = 128;
  int hidden_layers = 4;
  int color_hidden_width = 128;
  double bound = 1.0;

  field::FieldConfig to_field_config() const;
  bool operator==(const FieldSection&) const = default;
};

struct Stage1Section {
  int steps = 2000;
  double learning_rate = 0.01;
  double guidance_weight = 100.0;
  double t_min = 0.02;
  double t_max = 0.98;
  std::string weighting = "sigma2";  // one | sigma2 | sigma3
  double weight_scale = 1.0;
  int batch_size = 1;
  int resolution = 64;
  int samples_per_ray = 64;
  bool stratified = true;
  double radius_min = 1.8;
  double radius_max = 2.2;
  double focal_scale = 1.2;
  double scene_extent = 1.75;
  double eikonal_weight = 0.01;
  int eikonal_points = 32;
  double eikonal_fd_step = 1e-3;
  int checkpoint_every = 100;
  double init_radius = 0.5;  // sphere radius the field is fit to before SDS
  int init_steps = 8000;     // budget for that fit

  // checkpoint_path is left empty; the run supplies it.
  sds::SdsConfig to_sds_config() const;
  bool operator==(const Stage1Section&) const = default;
};

struct MeshSection {
  int resolution = 96;  // marching-cubes lattice per axis
  double bound = 1.0;   // extraction cube [-bound, bound]^3

  bool operator==(const MeshSection&) const = default;
};

struct TextureSection {
  int atlas_resolution = 512;
  int view_resolution = 256;  // canonical pseudo-ground-truth views
  double view_radius = 2.0;   // shared by canonical views and refine poses
  double focal_scale = 1.2;
  double scene_extent = 1.75;
  double strength = 0.5;  // img2img noise level in (0, 1]
  int sampler_steps = 20;
  double sampler_guidance_weight = 7.5;
  double t_min = 0.02;
  double t_max = 0.98;
  int stage_a_steps = 400;
  double stage_a_learning_rate = 0.1;
  int stage_b_steps = 32;
  double stage_b_learning_rate = 0.05;
  double lambda_sds = 1e-4;
  double stage_b_guidance_weight = 7.5;
  int pose_azimuths = 8;
  std::vector<double> pose_elevations = {-20.0, 20.0};
  int pose_resolution = 256;
  bool use_depth_conditioning = false;

  retexture::ViewSetConfig to_view_config() const;
  retexture::SamplerSettings to_sampler_settings() const;
  retexture::RefinePoseConfig to_refine_pose_config() const;
  retexture::StageBConfig to_stage_b_config() const;
  bool operator==(const TextureSection&) const = default;
};

struct GuidanceSection {
  std::string backend = "analytic";  // analytic | remote
  std::string endpoint;              // required for the remote backend
  double prior_mu = 0.5;             // analytic backend prior mean
  double prior_s = 0.2;              // analytic backend prior std
  double timeout_seconds = 10.0;     // remote client
  int max_retries = 3;               // remote client

  GuidanceBackend backend_kind() const;  // throws PipelineError on unknown names
  bool operator==(const GuidanceSection&) const = default;
};

struct PipelineConfig {
  RunSection run;
  FieldSection field;
  Stage1Section stage1;
  MeshSection mesh;
  TextureSection texture;
  GuidanceSection guidance;

  // Rejects inconsistent settings (bad ranges, unknown backend, remote
  // backend without an endpoint, too few refinement poses, ...).
  void validate() const;

  // Flat ("section.key", formatted value) pairs for every setting, in
  // emission order. Shared by to_text() and the run manifest.
  std::vector<std::pair<std::string, std::string>> entries() const;

  // Complete round-trippable text form: from_text(to_text()) == *this.
  std::string to_text() const;

  // Parses config text; unknown sections or keys raise PipelineError.
  // Missing keys keep their defaults. Later assignments win.
  static PipelineConfig from_text(const std::string& text);
  static PipelineConfig load(const std::filesystem::path& path);

  bool operator==(const PipelineConfig&) const = default;
};

// Command-line overrides applied on top of a loaded config.
struct CliOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> backend;
  std::optional<std::string> endpoint;
  std::optional<std::string> out;
  std::optional<std::string> prompt;
};

void apply_overrides(PipelineConfig& cfg, const CliOverrides& overrides);

// ---------------------------------------------------------------------------
// Analytic guidance backend
// ---------------------------------------------------------------------------

// Shape-agnostic flat-image Gaussian prior: the closed-form denoiser for
// data distributed as N(mu * 1, s^2 I) at any resolution,
//   predicted noise = sigma_t (noisy - alpha_t mu) / (alpha_t^2 s^2 + sigma_t^2).
// Unlike GaussianPriorScore it serves requests of every shape and accepts
// (and ignores) depth, so the same instance can drive both the shape stage
// and the depth-conditioned tiled sampler. The internal schedule is wide so
// callers' own schedules decide the effective t range.
class FlatPriorScore final : public guidance::ScoreModel {
 public:
  FlatPriorScore(double mu, double s,
                 guidance::NoiseSchedule schedule = {.t_min = 0.001, .t_max = 0.999});

  guidance::ScoreModelCaps caps() const override {
    return {.accepts_depth = true, .oracle_true_noise = false};
  }
  std::vector<double> predict_noise(std::span<const double> noisy,
                                    const guidance::ImageShape& shape, double t,
                                    const guidance::Conditioning& cond,
                                    std::span<const double> depth = {}) override;

  double mu() const { return mu_; }
  double prior_std() const { return s_; }

 private:
  double mu_;
  double s_;
  guidance::NoiseSchedule schedule_;
};

// Builds the configured score model: FlatPriorScore for the analytic
// backend, RemoteGuidanceClient for the remote one.
std::unique_ptr<guidance::ScoreModel> make_score_model(const GuidanceSection& section);

// ---------------------------------------------------------------------------
// Generation run
// ---------------------------------------------------------------------------

// Stage order of a full run. Every stage writes its outputs to disk and the
// in-memory state is reloaded from those files, so a resumed run and an
// uninterrupted run see bit-identical inputs from that point on.
inline constexpr std::array<const char*, 8> kStageNames = {
    "field", "mesh", "uv", "bake", "pseudo", "stage_a", "stage_b", "export"};

struct StageRecord {
  std::string name;
  std::string status;  // "done" (computed this run) or "resumed" (loaded)
  double seconds = 0.0;
  std::vector<std::string> outputs;  // paths relative to the run directory
};

struct RunOptions {
  // Skip stages whose outputs already exist (requires the recorded config
  // to match). Without this every stage recomputes and overwrites.
  bool resume = false;
  // Stop after this stage ("" runs everything). Must name a known stage.
  std::string stop_after;
  // First stage forced to recompute even when resuming ("" disables).
  std::string redo_from;
};

struct RunResult {
  std::filesystem::path out_dir;
  std::filesystem::path manifest_path;
  std::filesystem::path config_path;
  std::filesystem::path field_params_path;
  std::filesystem::path mesh_path;
  std::filesystem::path uv_mesh_path;
  std::filesystem::path atlas_init_path;
  std::filesystem::path pseudo_dir;
  std::filesystem::path atlas_stage_a_path;
  std::filesystem::path atlas_final_path;
  std::filesystem::path obj_path;
  std::filesystem::path texture_png_path;
  std::vector<StageRecord> stages;
  bool complete = false;  // ran through the export stage
};

// Runs the staged generation pipeline: SDS shape optimization, surface
// extraction and cleanup, uv atlasing, color baking, pseudo-ground-truth
// synthesis, two-stage texture refinement, and final export. The manifest
// (config snapshot, versions, seed, per-stage timings and outputs) is
// rewritten after every stage, so an interrupted run can resume and the
// recorded config alone reproduces the artifacts bit-for-bit with the
// analytic backend. A failing stage leaves earlier checkpoints intact.
RunResult run_generate(const PipelineConfig& cfg, const RunOptions& options = {});

// ---------------------------------------------------------------------------
// Turntable rendering
// ---------------------------------------------------------------------------

struct TurntableConfig {
  int frames = 60;
  double elevation_deg = 30.0;
  double radius = 2.0;
  int resolution = 256;
  double focal_scale = 1.2;
  double scene_extent = 1.75;
  std::array<double, 3> background{0.5, 0.5, 0.5};

  void validate() const;
};

// Renders `frames` evenly spaced azimuths at a fixed elevation and writes
// numbered PNGs (frame_000.png, ...) into out_dir, returning the paths in
// order. An empty mesh yields pure background frames.
std::vector<std::filesystem::path> run_turntable(const mesh::TriangleMesh& m,
                                                 const texrast::TextureAtlas& atlas,
                                                 const TurntableConfig& cfg,
                                                 const std::filesystem::path& out_dir);

// ---------------------------------------------------------------------------
// Self checks
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 4> kCheckSuites = {"gradients", "compositing", "meshing",
                                                            "schedule"};

// Fault-injection switches for exercising the check harness itself: the
// flipped CDF argument must make the schedule suite fail.
struct CheckMutations {
  bool flip_cdf_argument = false;
};

struct SuiteResult {
  std::string name;
  int passed = 0;
  int failed = 0;
  std::vector<std::string> messages;  // first few failure descriptions
};

struct CheckReport {
  std::vector<SuiteResult> suites;

  bool all_passed() const;
  std::string render() const;  // human-readable per-suite counts
};

// Runs the named subsets (empty = every suite) of the built-in verification
// suites: finite-difference gradient checks, a compositing transcription
// oracle, marching-cubes geometry/topology checks, and noise-schedule /
// density-transform identities. Unknown suite names raise PipelineError.
CheckReport run_checks(const std::vector<std::string>& suites = {},
                       const CheckMutations& mutations = {});

}  // namespace textmesh::pipeline

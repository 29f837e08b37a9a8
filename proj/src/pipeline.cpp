#include "textmesh/pipeline.hpp"

#include "textmesh/camera.hpp"
#include "textmesh/image.hpp"
#include "textmesh/render.hpp"
#include "textmesh/rng.hpp"
#include "textmesh/sds.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string_view>

namespace textmesh::pipeline {

namespace fs = std::filesystem;

namespace {

// ---------------------------------------------------------------------------
// Value formatting / parsing
// ---------------------------------------------------------------------------

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string format_bool(bool v) { return v ? "true" : "false"; }

std::string format_double_list(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += format_double(v[i]);
  }
  return out;
}

[[noreturn]] void bad_value(const std::string& context, const std::string& value,
                            const char* expected) {
  throw PipelineError("config: cannot parse " + context + " value '" + value + "' as " + expected);
}

double parse_double(const std::string& context, const std::string& value) {
  double out = 0.0;
  const char* begin = value.data();
  const char* end = begin + value.size();
  const auto res = std::from_chars(begin, end, out);
  if (res.ec != std::errc{} || res.ptr != end || !std::isfinite(out)) {
    bad_value(context, value, "a finite number");
  }
  return out;
}

long long parse_ll(const std::string& context, const std::string& value) {
  long long out = 0;
  const char* begin = value.data();
  const char* end = begin + value.size();
  const auto res = std::from_chars(begin, end, out);
  if (res.ec != std::errc{} || res.ptr != end) bad_value(context, value, "an integer");
  return out;
}

int parse_int(const std::string& context, const std::string& value) {
  const long long v = parse_ll(context, value);
  if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
    bad_value(context, value, "a 32-bit integer");
  }
  return static_cast<int>(v);
}

std::uint64_t parse_u64(const std::string& context, const std::string& value) {
  std::uint64_t out = 0;
  const char* begin = value.data();
  const char* end = begin + value.size();
  const auto res = std::from_chars(begin, end, out);
  if (res.ec != std::errc{} || res.ptr != end) bad_value(context, value, "an unsigned integer");
  return out;
}

bool parse_bool(const std::string& context, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  bad_value(context, value, "a boolean (true/false)");
}

std::string trim(std::string_view s) {
  const auto from = s.find_first_not_of(" \t\r\n");
  if (from == std::string_view::npos) return {};
  const auto to = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(from, to - from + 1));
}

std::vector<double> parse_double_list(const std::string& context, const std::string& value) {
  std::vector<double> out;
  std::size_t start = 0;
  while (start <= value.size()) {
    const auto comma = value.find(',', start);
    const auto piece = trim(value.substr(start, comma == std::string::npos ? std::string::npos
                                                                           : comma - start));
    if (piece.empty()) bad_value(context, value, "a comma-separated number list");
    out.push_back(parse_double(context, piece));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  if (out.empty()) bad_value(context, value, "a comma-separated number list");
  return out;
}

// ---------------------------------------------------------------------------
// Config schema
//
// One traversal routine names every section and key exactly once; both the
// emitter (entries / to_text) and the binder (from_text) walk it, so the two
// directions cannot drift apart.
// ---------------------------------------------------------------------------

template <class V>
void visit_config(PipelineConfig& c, V& v) {
  v.begin_section("run");
  v.str("prompt", c.run.prompt);
  v.u64("seed", c.run.seed);
  v.str("out", c.run.out);

  v.begin_section("field");
  v.integer("num_frequencies", c.field.num_frequencies);
  v.flag("include_input", c.field.include_input);
  v.integer("hidden_width", c.field.hidden_width);
  v.integer("hidden_layers", c.field.hidden_layers);
  v.integer("color_hidden_width", c.field.color_hidden_width);
  v.real("bound", c.field.bound);

  v.begin_section("stage1");
  v.integer("steps", c.stage1.steps);
  v.real("learning_rate", c.stage1.learning_rate);
  v.real("guidance_weight", c.stage1.guidance_weight);
  v.real("t_min", c.stage1.t_min);
  v.real("t_max", c.stage1.t_max);
  v.str("weighting", c.stage1.weighting);
  v.real("weight_scale", c.stage1.weight_scale);
  v.integer("batch_size", c.stage1.batch_size);
  v.integer("resolution", c.stage1.resolution);
  v.integer("samples_per_ray", c.stage1.samples_per_ray);
  v.flag("stratified", c.stage1.stratified);
  v.real("radius_min", c.stage1.radius_min);
  v.real("radius_max", c.stage1.radius_max);
  v.real("focal_scale", c.stage1.focal_scale);
  v.real("scene_extent", c.stage1.scene_extent);
  v.real("eikonal_weight", c.stage1.eikonal_weight);
  v.integer("eikonal_points", c.stage1.eikonal_points);
  v.real("eikonal_fd_step", c.stage1.eikonal_fd_step);
  v.integer("checkpoint_every", c.stage1.checkpoint_every);
  v.real("init_radius", c.stage1.init_radius);
  v.integer("init_steps", c.stage1.init_steps);

  v.begin_section("mesh");
  v.integer("resolution", c.mesh.resolution);
  v.real("bound", c.mesh.bound);

  v.begin_section("texture");
  v.integer("atlas_resolution", c.texture.atlas_resolution);
  v.integer("view_resolution", c.texture.view_resolution);
  v.real("view_radius", c.texture.view_radius);
  v.real("focal_scale", c.texture.focal_scale);
  v.real("scene_extent", c.texture.scene_extent);
  v.real("strength", c.texture.strength);
  v.integer("sampler_steps", c.texture.sampler_steps);
  v.real("sampler_guidance_weight", c.texture.sampler_guidance_weight);
  v.real("t_min", c.texture.t_min);
  v.real("t_max", c.texture.t_max);
  v.integer("stage_a_steps", c.texture.stage_a_steps);
  v.real("stage_a_learning_rate", c.texture.stage_a_learning_rate);
  v.integer("stage_b_steps", c.texture.stage_b_steps);
  v.real("stage_b_learning_rate", c.texture.stage_b_learning_rate);
  v.real("lambda_sds", c.texture.lambda_sds);
  v.real("stage_b_guidance_weight", c.texture.stage_b_guidance_weight);
  v.integer("pose_azimuths", c.texture.pose_azimuths);
  v.real_list("pose_elevations", c.texture.pose_elevations);
  v.integer("pose_resolution", c.texture.pose_resolution);
  v.flag("use_depth_conditioning", c.texture.use_depth_conditioning);

  v.begin_section("guidance");
  v.str("backend", c.guidance.backend);
  v.str("endpoint", c.guidance.endpoint);
  v.real("prior_mu", c.guidance.prior_mu);
  v.real("prior_s", c.guidance.prior_s);
  v.real("timeout_seconds", c.guidance.timeout_seconds);
  v.integer("max_retries", c.guidance.max_retries);
}

struct EmitVisitor {
  std::vector<std::pair<std::string, std::string>> out;
  std::string section;

  void begin_section(const char* name) { section = name; }
  void add(const char* key, std::string value) {
    out.emplace_back(section + "." + key, std::move(value));
  }
  void str(const char* key, std::string& v) { add(key, v); }
  void u64(const char* key, std::uint64_t& v) { add(key, std::to_string(v)); }
  void integer(const char* key, int& v) { add(key, std::to_string(v)); }
  void real(const char* key, double& v) { add(key, format_double(v)); }
  void flag(const char* key, bool& v) { add(key, format_bool(v)); }
  void real_list(const char* key, std::vector<double>& v) { add(key, format_double_list(v)); }
};

struct BindVisitor {
  std::string section;
  std::string key;
  std::string value;
  std::string current;
  bool bound = false;
  bool section_known = false;

  void begin_section(const char* name) {
    current = name;
    if (current == section) section_known = true;
  }
  bool match(const char* k) { return !bound && current == section && key == k; }
  std::string context() const { return "[" + section + "] " + key; }

  void str(const char* k, std::string& v) {
    if (!match(k)) return;
    v = value;
    bound = true;
  }
  void u64(const char* k, std::uint64_t& v) {
    if (!match(k)) return;
    v = parse_u64(context(), value);
    bound = true;
  }
  void integer(const char* k, int& v) {
    if (!match(k)) return;
    v = parse_int(context(), value);
    bound = true;
  }
  void real(const char* k, double& v) {
    if (!match(k)) return;
    v = parse_double(context(), value);
    bound = true;
  }
  void flag(const char* k, bool& v) {
    if (!match(k)) return;
    v = parse_bool(context(), value);
    bound = true;
  }
  void real_list(const char* k, std::vector<double>& v) {
    if (!match(k)) return;
    v = parse_double_list(context(), value);
    bound = true;
  }
};

void require(bool ok, const char* message) {
  if (!ok) throw PipelineError(message);
}

}  // namespace

// ---------------------------------------------------------------------------
// Section converters
// ---------------------------------------------------------------------------

field::FieldConfig FieldSection::to_field_config() const {
  field::FieldConfig f;
  f.num_frequencies = num_frequencies;
  f.include_input = include_input;
  f.hidden_width = hidden_width;
  f.hidden_layers = hidden_layers;
  f.color_hidden_width = color_hidden_width;
  f.bound = bound;
  return f;
}

sds::SdsConfig Stage1Section::to_sds_config() const {
  sds::SdsConfig s;
  s.guidance_weight = guidance_weight;
  s.t_min = t_min;
  s.t_max = t_max;
  if (weighting == "one") {
    s.weighting = guidance::SdsWeighting::one;
  } else if (weighting == "sigma2") {
    s.weighting = guidance::SdsWeighting::sigma2;
  } else if (weighting == "sigma3") {
    s.weighting = guidance::SdsWeighting::sigma3;
  } else {
    throw PipelineError("config: unknown sds weighting '" + weighting +
                        "' (expected one, sigma2, or sigma3)");
  }
  s.weight_scale = weight_scale;
  s.steps = steps;
  s.learning_rate = learning_rate;
  s.batch_size = batch_size;
  s.resolution = resolution;
  s.render.samples_per_ray = samples_per_ray;
  s.render.stratified = stratified;
  s.camera.radius_min = radius_min;
  s.camera.radius_max = radius_max;
  s.camera.focal_scale = focal_scale;
  s.camera.scene_extent = scene_extent;
  s.eikonal_weight = eikonal_weight;
  s.eikonal_points = eikonal_points;
  s.eikonal_fd_step = eikonal_fd_step;
  s.checkpoint_every = checkpoint_every;
  return s;
}

retexture::ViewSetConfig TextureSection::to_view_config() const {
  retexture::ViewSetConfig v;
  v.radius = view_radius;
  v.resolution = view_resolution;
  v.focal_scale = focal_scale;
  v.scene_extent = scene_extent;
  return v;
}

retexture::SamplerSettings TextureSection::to_sampler_settings() const {
  retexture::SamplerSettings s;
  s.strength = strength;
  s.steps = sampler_steps;
  s.guidance_weight = sampler_guidance_weight;
  s.schedule.t_min = t_min;
  s.schedule.t_max = t_max;
  return s;
}

retexture::RefinePoseConfig TextureSection::to_refine_pose_config() const {
  retexture::RefinePoseConfig p;
  p.azimuth_count = pose_azimuths;
  p.elevations_deg = pose_elevations;
  p.radius = view_radius;
  p.resolution = pose_resolution;
  p.focal_scale = focal_scale;
  p.scene_extent = scene_extent;
  return p;
}

retexture::StageBConfig TextureSection::to_stage_b_config() const {
  retexture::StageBConfig b;
  b.lambda_sds = lambda_sds;
  b.guidance_weight = stage_b_guidance_weight;
  b.steps = stage_b_steps;
  b.learning_rate = stage_b_learning_rate;
  b.schedule.t_min = t_min;
  b.schedule.t_max = t_max;
  b.use_depth_conditioning = use_depth_conditioning;
  return b;
}

GuidanceBackend GuidanceSection::backend_kind() const {
  if (backend == "analytic") return GuidanceBackend::analytic;
  if (backend == "remote") return GuidanceBackend::remote;
  throw PipelineError("config: unknown guidance backend '" + backend +
                      "' (expected analytic or remote)");
}

// ---------------------------------------------------------------------------
// PipelineConfig
// ---------------------------------------------------------------------------

void PipelineConfig::validate() const {
  require(!run.prompt.empty(), "config: prompt must not be empty");
  require(!run.out.empty(), "config: output directory must not be empty");

  require(field.num_frequencies >= 1, "config: field needs at least one encoding frequency");
  require(field.hidden_width >= 1 && field.hidden_layers >= 1 && field.color_hidden_width >= 1,
          "config: field layer sizes must be positive");
  require(std::isfinite(field.bound) && field.bound > 0.0, "config: field bound must be positive");

  require(stage1.steps >= 1, "config: stage1 must run at least one step");
  require(stage1.init_steps >= 1, "config: sphere initialization needs a positive step budget");
  require(std::isfinite(stage1.init_radius) && stage1.init_radius > 0.0,
          "config: sphere initialization radius must be positive");
  stage1.to_sds_config().validate();

  require(mesh.resolution >= 2, "config: mesh resolution must be at least 2");
  require(std::isfinite(mesh.bound) && mesh.bound > 0.0, "config: mesh bound must be positive");

  require(texture.atlas_resolution >= 4, "config: atlas resolution must be at least 4");
  require(texture.view_resolution >= 4, "config: view resolution must be at least 4");
  require(texture.pose_resolution >= 4, "config: pose resolution must be at least 4");
  require(std::isfinite(texture.view_radius) && texture.view_radius > 0.0,
          "config: view radius must be positive");
  require(std::isfinite(texture.focal_scale) && texture.focal_scale > 0.0,
          "config: focal scale must be positive");
  require(std::isfinite(texture.scene_extent) && texture.scene_extent > 0.0,
          "config: scene extent must be positive");
  require(texture.strength > 0.0 && texture.strength <= 1.0,
          "config: sampler strength must lie in (0, 1]");
  require(texture.sampler_steps >= 1, "config: sampler needs at least one step");
  require(std::isfinite(texture.sampler_guidance_weight) && texture.sampler_guidance_weight >= 0.0,
          "config: sampler guidance weight must be finite and non-negative");
  guidance::NoiseSchedule{.t_min = texture.t_min, .t_max = texture.t_max}.validate();
  require(texture.stage_a_steps >= 0 && texture.stage_b_steps >= 0,
          "config: texture stage step counts must be non-negative");
  require(texture.stage_a_learning_rate > 0.0 && texture.stage_b_learning_rate > 0.0,
          "config: texture learning rates must be positive");
  require(std::isfinite(texture.lambda_sds) && texture.lambda_sds >= 0.0,
          "config: lambda_sds must be finite and non-negative");
  require(std::isfinite(texture.stage_b_guidance_weight) && texture.stage_b_guidance_weight >= 0.0,
          "config: stage B guidance weight must be finite and non-negative");
  require(texture.pose_azimuths >= 1, "config: refinement needs at least one azimuth");
  require(!texture.pose_elevations.empty(), "config: refinement needs at least one elevation");
  require(texture.pose_azimuths * static_cast<int>(texture.pose_elevations.size()) >= 4,
          "config: refinement needs at least four poses");

  const GuidanceBackend kind = guidance.backend_kind();
  if (kind == GuidanceBackend::remote) {
    require(!guidance.endpoint.empty(), "config: remote backend requires an endpoint");
  }
  require(std::isfinite(guidance.prior_mu), "config: prior mean must be finite");
  require(std::isfinite(guidance.prior_s) && guidance.prior_s > 0.0,
          "config: prior std must be positive");
  require(std::isfinite(guidance.timeout_seconds) && guidance.timeout_seconds > 0.0,
          "config: timeout must be positive");
  require(guidance.max_retries >= 0, "config: retry count must be non-negative");
}

std::vector<std::pair<std::string, std::string>> PipelineConfig::entries() const {
  PipelineConfig copy = *this;
  EmitVisitor emit;
  visit_config(copy, emit);
  return std::move(emit.out);
}

std::string PipelineConfig::to_text() const {
  std::ostringstream os;
  std::string section;
  for (const auto& [key, value] : entries()) {
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      if (!section.empty()) os << "\n";
      os << "[" << sec << "]\n";
      section = sec;
    }
    os << key.substr(dot + 1) << " = " << value << "\n";
  }
  return os.str();
}

PipelineConfig PipelineConfig::from_text(const std::string& text) {
  PipelineConfig cfg;
  std::istringstream is(text);
  std::string raw;
  std::string section;
  int line_no = 0;
  while (std::getline(is, raw)) {
    ++line_no;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3) {
        throw PipelineError("config line " + std::to_string(line_no) + ": malformed section '" +
                            line + "'");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw PipelineError("config line " + std::to_string(line_no) + ": expected key = value, got '" +
                          line + "'");
    }
    if (section.empty()) {
      throw PipelineError("config line " + std::to_string(line_no) +
                          ": key outside of any [section]");
    }
    BindVisitor bind;
    bind.section = section;
    bind.key = trim(line.substr(0, eq));
    bind.value = trim(line.substr(eq + 1));
    visit_config(cfg, bind);
    if (!bind.section_known) {
      throw PipelineError("config line " + std::to_string(line_no) + ": unknown section [" +
                          section + "]");
    }
    if (!bind.bound) {
      throw PipelineError("config line " + std::to_string(line_no) + ": unknown key '" + bind.key +
                          "' in section [" + section + "]");
    }
  }
  return cfg;
}

PipelineConfig PipelineConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw PipelineError("cannot open config file: " + path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return from_text(os.str());
}

void apply_overrides(PipelineConfig& cfg, const CliOverrides& overrides) {
  if (overrides.seed) cfg.run.seed = *overrides.seed;
  if (overrides.backend) cfg.guidance.backend = *overrides.backend;
  if (overrides.endpoint) cfg.guidance.endpoint = *overrides.endpoint;
  if (overrides.out) cfg.run.out = *overrides.out;
  if (overrides.prompt) cfg.run.prompt = *overrides.prompt;
}

// ---------------------------------------------------------------------------
// FlatPriorScore
// ---------------------------------------------------------------------------

FlatPriorScore::FlatPriorScore(double mu, double s, guidance::NoiseSchedule schedule)
    : mu_(mu), s_(s), schedule_(schedule) {
  if (!std::isfinite(mu) || !std::isfinite(s) || !(s > 0.0)) {
    throw PipelineError("flat prior: mean must be finite and std positive");
  }
  schedule_.validate();
}

std::vector<double> FlatPriorScore::predict_noise(std::span<const double> noisy,
                                                  const guidance::ImageShape& shape, double t,
                                                  const guidance::Conditioning& /*cond*/,
                                                  std::span<const double> /*depth*/) {
  if (shape.size() == 0 || noisy.size() != shape.size()) {
    throw guidance::GuidanceShapeError("flat prior: buffer does not match the declared shape");
  }
  const double s_t = schedule_.sigma(t);
  const double a_t = schedule_.alpha(t);
  const double denom = a_t * a_t * s_ * s_ + s_t * s_t;
  std::vector<double> eps(noisy.size());
  for (std::size_t i = 0; i < noisy.size(); ++i) {
    eps[i] = s_t * (noisy[i] - a_t * mu_) / denom;
  }
  return eps;
}

std::unique_ptr<guidance::ScoreModel> make_score_model(const GuidanceSection& section) {
  switch (section.backend_kind()) {
    case GuidanceBackend::analytic:
      return std::make_unique<FlatPriorScore>(section.prior_mu, section.prior_s);
    case GuidanceBackend::remote: {
      guidance::RemoteClientOptions options;
      options.endpoint = section.endpoint;
      options.timeout_seconds = section.timeout_seconds;
      options.max_retries = section.max_retries;
      return std::make_unique<guidance::RemoteGuidanceClient>(std::move(options));
    }
  }
  throw PipelineError("unhandled guidance backend");
}

// ---------------------------------------------------------------------------
// Generation run
// ---------------------------------------------------------------------------

namespace {

struct RunPaths {
  fs::path out;
  fs::path checkpoints;
  fs::path manifest;
  fs::path config;
  fs::path field_params;
  fs::path surface;
  fs::path uv_mesh;
  fs::path atlas_init;
  fs::path pseudo;
  fs::path atlas_stage_a;
  fs::path atlas_final;
  fs::path obj;
  fs::path mtl;
  fs::path png;
};

RunPaths make_paths(const fs::path& out) {
  RunPaths p;
  p.out = out;
  p.checkpoints = out / "checkpoints";
  p.manifest = out / "manifest.json";
  p.config = out / "effective_config.ini";
  p.field_params = p.checkpoints / "field.params";
  p.surface = p.checkpoints / "mesh.ply";
  p.uv_mesh = p.checkpoints / "mesh_uv.ply";
  p.atlas_init = p.checkpoints / "atlas_init.grid";
  p.pseudo = p.checkpoints / "pseudo";
  p.atlas_stage_a = p.checkpoints / "atlas_stage_a.grid";
  p.atlas_final = p.checkpoints / "atlas_final.grid";
  p.obj = out / "model.obj";
  p.mtl = out / "model.mtl";
  p.png = out / "model.png";
  return p;
}

int stage_index(std::string_view name) {
  for (std::size_t i = 0; i < kStageNames.size(); ++i) {
    if (name == kStageNames[i]) return static_cast<int>(i);
  }
  return -1;
}

std::vector<std::string> stage_outputs(std::string_view stage) {
  if (stage == "field") return {"checkpoints/field.params"};
  if (stage == "mesh") return {"checkpoints/mesh.ply"};
  if (stage == "uv") return {"checkpoints/mesh_uv.ply"};
  if (stage == "bake") return {"checkpoints/atlas_init.grid"};
  if (stage == "pseudo") {
    return {"checkpoints/pseudo/view_0.png", "checkpoints/pseudo/view_1.png",
            "checkpoints/pseudo/view_2.png", "checkpoints/pseudo/view_3.png",
            "checkpoints/pseudo/provenance.txt"};
  }
  if (stage == "stage_a") return {"checkpoints/atlas_stage_a.grid"};
  if (stage == "stage_b") return {"checkpoints/atlas_final.grid"};
  if (stage == "export") return {"model.obj", "model.mtl", "model.png"};
  throw PipelineError("unknown stage name '" + std::string(stage) + "'");
}

bool stage_outputs_exist(std::string_view stage, const RunPaths& paths) {
  for (const auto& rel : stage_outputs(stage)) {
    if (!fs::exists(paths.out / rel)) return false;
  }
  return true;
}

// Everything later stages consume; reloaded from stage outputs so both
// computed and resumed stages hand identical state forward.
struct RunState {
  field::FieldConfig fcfg;
  std::optional<field::Field> field;
  mesh::TriangleMesh surface;
  mesh::TriangleMesh uv_mesh;
  texrast::TextureAtlas atlas;
  retexture::PseudoGtSet pseudo;
};

void write_manifest(const RunPaths& paths, const PipelineConfig& cfg,
                    const std::vector<StageRecord>& stages, bool complete) {
  nlohmann::json j;
  j["tool"] = kToolName;
  j["version"] = kToolVersion;
  j["seed"] = cfg.run.seed;
  j["prompt"] = cfg.run.prompt;
  j["backend"] = cfg.guidance.backend;
  nlohmann::json config = nlohmann::json::object();
  for (const auto& [key, value] : cfg.entries()) config[key] = value;
  j["config"] = std::move(config);
  j["config_text"] = cfg.to_text();
  j["complete"] = complete;
  nlohmann::json stage_array = nlohmann::json::array();
  for (const auto& s : stages) {
    nlohmann::json row;
    row["name"] = s.name;
    row["status"] = s.status;
    row["seconds"] = s.seconds;
    row["outputs"] = s.outputs;
    stage_array.push_back(std::move(row));
  }
  j["stages"] = std::move(stage_array);

  const fs::path tmp = paths.manifest.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw PipelineError("cannot write manifest: " + tmp.string());
    f << j.dump(2) << "\n";
  }
  fs::rename(tmp, paths.manifest);
}

void run_stage(std::string_view stage, const PipelineConfig& cfg, const RunPaths& paths,
               RunState& state, guidance::ScoreModel& model, const Rng& root) {
  if (stage == "field") {
    field::Field f(state.fcfg, root.split("field.weights").next_u64());
    Rng init_rng = root.split("field.init");
    f.init_sphere(cfg.stage1.init_radius, cfg.stage1.init_steps, init_rng);
    sds::SdsConfig scfg = cfg.stage1.to_sds_config();
    scfg.checkpoint_path = paths.field_params.string();
    Rng opt_rng = root.split("field.opt");
    sds::stage1_optimize(f, model, cfg.run.prompt, scfg, opt_rng);
    field::save_params(paths.field_params.string(), f.params());
  } else if (stage == "mesh") {
    const double b = cfg.mesh.bound;
    const mesh::Bounds bounds{{-b, -b, -b}, {b, b, b}};
    const auto grid = mesh::sample_sdf_grid(*state.field, cfg.mesh.resolution, bounds);
    mesh::TriangleMesh m = mesh::clean_mesh(mesh::marching_cubes(grid, 0.0));
    if (m.empty()) {
      throw PipelineError(
          "surface extraction produced an empty mesh; the shape stage may need more steps");
    }
    m = mesh::select_main_component(m, {0.0, 0.0, 0.0});
    mesh::export_mesh(m, paths.surface, mesh::MeshFormat::ply);
  } else if (stage == "uv") {
    mesh::AtlasOptions options;
    options.texels_per_unit = 0.0;
    options.resolution = cfg.texture.atlas_resolution;
    const auto atlas = mesh::generate_uv_atlas(state.surface, options);
    mesh::export_mesh(atlas.mesh, paths.uv_mesh, mesh::MeshFormat::ply);
  } else if (stage == "bake") {
    auto atlas =
        retexture::bake_initial_atlas(state.uv_mesh, *state.field, cfg.texture.atlas_resolution);
    atlas = retexture::dilate_atlas(std::move(atlas));
    write_float_grid(paths.atlas_init, atlas.texels);
  } else if (stage == "pseudo") {
    const auto views = retexture::make_canonical_views(cfg.texture.to_view_config());
    guidance::Conditioning cond;
    cond.prompt = cfg.run.prompt;
    const auto set =
        retexture::build_pseudo_gt(state.uv_mesh, state.atlas, views, model, cond,
                                   cfg.texture.to_sampler_settings(), root.split("pseudo").next_u64());
    retexture::save_pseudo_gt(set, paths.pseudo);
  } else if (stage == "stage_a") {
    const auto views = retexture::make_canonical_views(cfg.texture.to_view_config());
    const auto result =
        retexture::stage_a_fit(state.uv_mesh, state.pseudo, views, state.atlas,
                               cfg.texture.stage_a_steps, cfg.texture.stage_a_learning_rate);
    write_float_grid(paths.atlas_stage_a, result.atlas.texels);
  } else if (stage == "stage_b") {
    const auto poses = retexture::make_refine_poses(cfg.texture.to_refine_pose_config());
    Rng rng = root.split("stage_b");
    const auto result = retexture::stage_b_refine(state.uv_mesh, state.atlas, poses, model,
                                                  cfg.run.prompt, cfg.texture.to_stage_b_config(), rng);
    write_float_grid(paths.atlas_final, result.atlas.texels);
  } else if (stage == "export") {
    const Image texture = quantize8(clamp01(state.atlas.texels));
    mesh::export_mesh(state.uv_mesh, paths.obj, mesh::MeshFormat::obj, &texture);
  } else {
    throw PipelineError("unknown stage name '" + std::string(stage) + "'");
  }
}

void load_stage(std::string_view stage, const RunPaths& paths, RunState& state) {
  if (stage == "field") {
    state.field = field::Field::from_params(state.fcfg,
                                            field::load_params(paths.field_params.string()));
  } else if (stage == "mesh") {
    state.surface = mesh::import_mesh(paths.surface);
  } else if (stage == "uv") {
    state.uv_mesh = mesh::import_mesh(paths.uv_mesh);
  } else if (stage == "bake") {
    state.atlas = texrast::TextureAtlas{read_float_grid(paths.atlas_init), {}};
  } else if (stage == "pseudo") {
    state.pseudo = retexture::load_pseudo_gt(paths.pseudo);
  } else if (stage == "stage_a") {
    state.atlas = texrast::TextureAtlas{read_float_grid(paths.atlas_stage_a), {}};
  } else if (stage == "stage_b") {
    state.atlas = texrast::TextureAtlas{read_float_grid(paths.atlas_final), {}};
  }
  // export has no downstream consumers; its files are the run product.
}

}  // namespace

RunResult run_generate(const PipelineConfig& cfg, const RunOptions& options) {
  cfg.validate();
  if (!options.stop_after.empty() && stage_index(options.stop_after) < 0) {
    throw PipelineError("unknown stage in stop_after: '" + options.stop_after + "'");
  }
  if (!options.redo_from.empty() && stage_index(options.redo_from) < 0) {
    throw PipelineError("unknown stage in redo_from: '" + options.redo_from + "'");
  }

  const RunPaths paths = make_paths(cfg.run.out);
  fs::create_directories(paths.checkpoints);

  // Checkpoints are only trusted when the recorded configuration matches;
  // a mismatched resume would silently mix incompatible artifacts.
  bool honor_checkpoints = false;
  if (options.resume && fs::exists(paths.manifest)) {
    std::ifstream f(paths.manifest);
    nlohmann::json recorded;
    f >> recorded;
    if (!recorded.contains("config_text") ||
        recorded["config_text"].get<std::string>() != cfg.to_text()) {
      throw PipelineError(
          "resume requested but the recorded configuration differs from the current one");
    }
    honor_checkpoints = true;
  }

  {
    std::ofstream f(paths.config, std::ios::binary);
    if (!f) throw PipelineError("cannot write config snapshot: " + paths.config.string());
    f << cfg.to_text();
  }

  const auto model = make_score_model(cfg.guidance);
  const Rng root(cfg.run.seed);

  RunState state;
  state.fcfg = cfg.field.to_field_config();

  RunResult result;
  result.out_dir = paths.out;
  result.manifest_path = paths.manifest;
  result.config_path = paths.config;
  result.field_params_path = paths.field_params;
  result.mesh_path = paths.surface;
  result.uv_mesh_path = paths.uv_mesh;
  result.atlas_init_path = paths.atlas_init;
  result.pseudo_dir = paths.pseudo;
  result.atlas_stage_a_path = paths.atlas_stage_a;
  result.atlas_final_path = paths.atlas_final;
  result.obj_path = paths.obj;
  result.texture_png_path = paths.png;

  const int redo_index = options.redo_from.empty() ? static_cast<int>(kStageNames.size())
                                                   : stage_index(options.redo_from);
  for (std::size_t i = 0; i < kStageNames.size(); ++i) {
    const std::string_view stage = kStageNames[i];
    const bool forced = static_cast<int>(i) >= redo_index;
    const bool reuse = honor_checkpoints && !forced && stage_outputs_exist(stage, paths);
    const auto start = std::chrono::steady_clock::now();
    if (!reuse) run_stage(stage, cfg, paths, state, *model, root);
    load_stage(stage, paths, state);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    StageRecord record;
    record.name = std::string(stage);
    record.status = reuse ? "resumed" : "done";
    record.seconds = seconds;
    record.outputs = stage_outputs(stage);
    result.stages.push_back(std::move(record));
    if (stage == "export") result.complete = true;

    write_manifest(paths, cfg, result.stages, result.complete);
    if (options.stop_after == stage) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Turntable
// ---------------------------------------------------------------------------

void TurntableConfig::validate() const {
  require(frames >= 1, "turntable: frame count must be positive");
  require(resolution >= 1, "turntable: resolution must be positive");
  require(std::isfinite(radius) && radius > 0.0, "turntable: radius must be positive");
  require(std::isfinite(elevation_deg), "turntable: elevation must be finite");
  require(std::isfinite(focal_scale) && focal_scale > 0.0,
          "turntable: focal scale must be positive");
  require(std::isfinite(scene_extent) && scene_extent > 0.0,
          "turntable: scene extent must be positive");
  for (const double b : background) {
    require(std::isfinite(b), "turntable: background color must be finite");
  }
}

std::vector<std::filesystem::path> run_turntable(const mesh::TriangleMesh& m,
                                                 const texrast::TextureAtlas& atlas,
                                                 const TurntableConfig& cfg,
                                                 const std::filesystem::path& out_dir) {
  cfg.validate();
  atlas.validate();
  m.validate();
  if (!m.empty() && !m.has_uvs()) {
    throw PipelineError("turntable: the mesh must carry uv coordinates");
  }
  fs::create_directories(out_dir);

  const double t_near = std::max(0.05, cfg.radius - cfg.scene_extent);
  const double t_far = cfg.radius + cfg.scene_extent;
  std::vector<fs::path> frames;
  frames.reserve(static_cast<std::size_t>(cfg.frames));
  for (int k = 0; k < cfg.frames; ++k) {
    Image frame;
    if (m.empty()) {
      frame = Image(cfg.resolution, cfg.resolution, 3);
      for (int y = 0; y < cfg.resolution; ++y) {
        for (int x = 0; x < cfg.resolution; ++x) {
          for (int c = 0; c < 3; ++c) frame.at(x, y, c) = cfg.background[c];
        }
      }
    } else {
      const double azimuth = 360.0 * k / cfg.frames;
      const auto position = render::orbit_position(azimuth, cfg.elevation_deg, cfg.radius);
      const auto camera =
          render::make_lookat_camera(position, {0.0, 0.0, 0.0}, cfg.focal_scale * cfg.resolution,
                                     cfg.resolution, cfg.resolution, t_near, t_far);
      const auto fragments = texrast::rasterize(m, camera);
      frame = texrast::shade_textured(fragments, m, atlas, cfg.background);
    }
    char name[32];
    std::snprintf(name, sizeof(name), "frame_%03d.png", k);
    fs::path path = out_dir / name;
    write_png(path, frame);
    frames.push_back(std::move(path));
  }
  return frames;
}

// ---------------------------------------------------------------------------
// Self checks
// ---------------------------------------------------------------------------

namespace {

struct SuiteBuilder {
  SuiteResult result;
  static constexpr std::size_t kMaxMessages = 8;

  explicit SuiteBuilder(std::string name) { result.name = std::move(name); }

  void check(bool ok, const std::string& failure_message) {
    if (ok) {
      ++result.passed;
      return;
    }
    ++result.failed;
    if (result.messages.size() < kMaxMessages) result.messages.push_back(failure_message);
  }
};

std::string fmt(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

// Finite-difference validation of the exact parameter gradients on a small
// field: the eikonal penalty (SDF trunk) and a rendered-image sum (full
// network including the color head).
SuiteResult gradients_suite() {
  SuiteBuilder suite("gradients");

  field::FieldConfig fcfg;
  fcfg.num_frequencies = 3;
  fcfg.hidden_width = 12;
  fcfg.hidden_layers = 2;
  fcfg.color_hidden_width = 8;
  field::Field f(fcfg, 2026);

  Rng rng(17);
  const auto xyz = sds::sample_eikonal_points(6, 0.8, rng);
  const auto analytic = sds::eikonal_penalty_at(f, xyz, 6, 1e-3);
  const auto& params = f.params();
  const std::size_t n = params.size();

  const auto value_with = [&](std::size_t index, double delta) {
    diff::ParamVector bumped = params;
    bumped.values()[index] += delta;
    const field::Field g = field::Field::from_params(fcfg, std::move(bumped));
    return sds::eikonal_penalty_at(g, xyz, 6, 1e-3).value;
  };

  for (int k = 0; k < 8; ++k) {
    const std::size_t index = (k == 7) ? n - 1 : (n * static_cast<std::size_t>(k)) / 7;
    const double h = 1e-5 * std::max(1.0, std::abs(params.values()[index]));
    const double fd = (value_with(index, h) - value_with(index, -h)) / (2.0 * h);
    const double exact = analytic.gradient[index];
    const double tol = 5e-4 * std::max({1.0, std::abs(fd), std::abs(exact)});
    suite.check(std::abs(fd - exact) <= tol,
                "eikonal gradient mismatch at parameter " + std::to_string(index) + ": exact " +
                    fmt(exact) + " vs finite difference " + fmt(fd));
  }

  const auto camera = render::make_lookat_camera(render::orbit_position(30.0, 20.0, 1.9),
                                                 {0.0, 0.0, 0.0}, 1.2 * 6, 6, 6, 0.15, 3.65);
  render::RenderConfig rcfg;
  rcfg.samples_per_ray = 8;
  const std::uint64_t seed = 5;
  const std::vector<double> weights(static_cast<std::size_t>(6) * 6 * 3, 1.0);
  const auto render_grad = render::render_weighted_grad(f, camera, rcfg, seed, weights);

  const auto render_value_with = [&](std::size_t index, double delta) {
    diff::ParamVector bumped = params;
    bumped.values()[index] += delta;
    const field::Field g = field::Field::from_params(fcfg, std::move(bumped));
    const auto image = render::render_image(g, camera, rcfg, seed);
    double total = 0.0;
    for (const double v : image.rgb.data) total += v;
    return total;
  };

  for (const std::size_t index : {std::size_t{1}, n / 2, n - 2}) {
    const double h = 1e-4 * std::max(1.0, std::abs(params.values()[index]));
    const double fd = (render_value_with(index, h) - render_value_with(index, -h)) / (2.0 * h);
    const double exact = render_grad.gradient[index];
    const double tol = 1e-3 * std::max({1.0, std::abs(fd), std::abs(exact)});
    suite.check(std::abs(fd - exact) <= tol,
                "render gradient mismatch at parameter " + std::to_string(index) + ": exact " +
                    fmt(exact) + " vs finite difference " + fmt(fd));
  }

  return suite.result;
}

// Independent transcription of the compositing equations, compared against
// the production implementation on random rays.
SuiteResult compositing_suite() {
  SuiteBuilder suite("compositing");
  Rng rng(99);

  for (int ray = 0; ray < 2000; ++ray) {
    const int m = 2 + static_cast<int>(rng.below(30));
    std::vector<double> depths(static_cast<std::size_t>(m));
    double t = 0.05 + rng.uniform() * 0.3;
    for (auto& d : depths) {
      t += rng.uniform(0.001, 0.2);
      d = t;
    }
    const double t_far = depths.back() + rng.uniform(0.01, 0.3);
    std::vector<double> sigmas(depths.size());
    for (auto& s : sigmas) s = rng.uniform() < 0.1 ? 0.0 : rng.uniform(0.0, 25.0);
    std::vector<double> colors(depths.size() * 3);
    for (auto& c : colors) c = rng.uniform();
    const std::array<double, 3> background{rng.uniform(), rng.uniform(), rng.uniform()};

    std::array<double, 3> rgb{};
    double acc = 0.0;
    double depth_sum = 0.0;
    double optical = 0.0;
    double previous_t = std::numeric_limits<double>::infinity();
    bool monotone = true;
    for (std::size_t j = 0; j < depths.size(); ++j) {
      const double delta = (j + 1 < depths.size()) ? depths[j + 1] - depths[j] : t_far - depths[j];
      optical += sigmas[j] * delta;
      const double transmittance = std::exp(-optical);
      if (transmittance > previous_t) monotone = false;
      previous_t = transmittance;
      const double alpha = transmittance * (1.0 - std::exp(-sigmas[j] * delta));
      for (int c = 0; c < 3; ++c) rgb[c] += alpha * colors[j * 3 + c];
      acc += alpha;
      depth_sum += alpha * depths[j];
    }
    for (int c = 0; c < 3; ++c) rgb[c] += (1.0 - acc) * background[c];
    const double depth = depth_sum / std::max(acc, 1e-8);

    const auto got = render::composite(colors, sigmas, depths, t_far, background);
    double worst = std::abs(got.acc - acc);
    worst = std::max(worst, std::abs(got.depth - depth));
    for (int c = 0; c < 3; ++c) worst = std::max(worst, std::abs(got.rgb[c] - rgb[c]));
    const bool ok = worst <= 1e-12 && acc <= 1.0 + 1e-12 && monotone;
    suite.check(ok, "compositing mismatch on ray " + std::to_string(ray) + ": max deviation " +
                        fmt(worst) + ", accumulated alpha " + fmt(acc));
  }
  return suite.result;
}

// Marching cubes against the analytic sphere plus the floater fixture.
SuiteResult meshing_suite() {
  SuiteBuilder suite("meshing");

  const mesh::Bounds bounds{{-1.0, -1.0, -1.0}, {1.0, 1.0, 1.0}};
  const int resolution = 33;
  const mesh::BatchSdf sphere = [](std::span<const double> xyz, std::size_t n,
                                   std::span<double> out) {
    for (std::size_t i = 0; i < n; ++i) {
      const double x = xyz[i * 3], y = xyz[i * 3 + 1], z = xyz[i * 3 + 2];
      out[i] = std::sqrt(x * x + y * y + z * z) - 0.5;
    }
  };
  const auto grid = mesh::sample_sdf_grid(sphere, resolution, bounds);
  const auto surface = mesh::marching_cubes(grid, 0.0);
  suite.check(!surface.empty(), "sphere extraction produced no triangles");

  const double edge = 2.0 / (resolution - 1);
  double worst_radius_error = 0.0;
  for (const auto& v : surface.vertices) {
    const double r = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
    worst_radius_error = std::max(worst_radius_error, std::abs(r - 0.5));
  }
  suite.check(worst_radius_error <= 1.5 * edge, "sphere vertices stray " + fmt(worst_radius_error) +
                                                    " from the surface (allowed " +
                                                    fmt(1.5 * edge) + ")");

  const auto topology = mesh::analyze_topology(surface);
  suite.check(topology.watertight, "sphere mesh is not watertight");
  suite.check(topology.consistent_orientation, "sphere mesh orientation is inconsistent");
  suite.check(topology.euler_characteristic == 2,
              "sphere Euler characteristic is " + std::to_string(topology.euler_characteristic));
  suite.check(topology.component_count == 1,
              "sphere extraction produced " + std::to_string(topology.component_count) +
                  " components");

  const mesh::BatchSdf with_floater = [&sphere](std::span<const double> xyz, std::size_t n,
                                                std::span<double> out) {
    sphere(xyz, n, out);
    for (std::size_t i = 0; i < n; ++i) {
      double inside = 0.0;
      double outside = 0.0;
      double max_q = -std::numeric_limits<double>::infinity();
      for (int a = 0; a < 3; ++a) {
        const double q = std::abs(xyz[i * 3 + a] - 0.7) - 0.12;
        max_q = std::max(max_q, q);
        outside += std::max(q, 0.0) * std::max(q, 0.0);
      }
      inside = std::min(max_q, 0.0);
      out[i] = std::min(out[i], std::sqrt(outside) + inside);
    }
  };
  const auto cluttered_grid = mesh::sample_sdf_grid(with_floater, resolution, bounds);
  const auto cluttered = mesh::marching_cubes(cluttered_grid, 0.0);
  const auto cluttered_topology = mesh::analyze_topology(cluttered);
  suite.check(cluttered_topology.component_count >= 2,
              "floater fixture produced a single component");

  const auto selected = mesh::select_main_component(cluttered, {0.0, 0.0, 0.0});
  const auto selected_topology = mesh::analyze_topology(selected);
  suite.check(selected_topology.component_count == 1,
              "component selection kept " + std::to_string(selected_topology.component_count) +
                  " components");
  suite.check(selected.faces.size() < cluttered.faces.size(),
              "component selection removed no faces");
  std::array<double, 3> centroid{};
  for (const auto& v : selected.vertices) {
    for (int a = 0; a < 3; ++a) centroid[a] += v[a];
  }
  double centroid_norm = 0.0;
  if (!selected.vertices.empty()) {
    for (int a = 0; a < 3; ++a) {
      centroid[a] /= static_cast<double>(selected.vertices.size());
      centroid_norm += centroid[a] * centroid[a];
    }
    centroid_norm = std::sqrt(centroid_norm);
  }
  suite.check(centroid_norm < 0.2,
              "selected component is centered " + fmt(centroid_norm) + " from the origin");

  return suite.result;
}

// Noise-schedule identity plus the signed-distance-to-density transform.
SuiteResult schedule_suite(const CheckMutations& mutations) {
  SuiteBuilder suite("schedule");

  const guidance::NoiseSchedule schedule;
  for (int k = 0; k < 1000; ++k) {
    const double t =
        schedule.t_min + (schedule.t_max - schedule.t_min) * static_cast<double>(k) / 999.0;
    const double a = schedule.alpha(t);
    const double s = schedule.sigma(t);
    suite.check(std::abs(a * a + s * s - 1.0) <= 1e-15,
                "alpha^2 + sigma^2 deviates from 1 by " + fmt(std::abs(a * a + s * s - 1.0)) +
                    " at t = " + fmt(t));
  }

  // The checks run through this seam so the fault injection can demonstrate
  // that a flipped argument is actually caught.
  const auto cdf = [&mutations](double u, double beta) {
    return field::psi_beta(mutations.flip_cdf_argument ? -u : u, beta);
  };

  suite.check(cdf(0.0, 0.1) == 0.5, "cdf(0) is " + fmt(cdf(0.0, 0.1)) + ", expected exactly 0.5");

  Rng rng(31);
  std::vector<double> betas = {0.05, 0.1, 0.5, 1.0};
  for (int k = 0; k < 4; ++k) betas.push_back(rng.uniform(0.02, 2.0));
  for (const double beta : betas) {
    bool nondecreasing = true;
    double previous = -std::numeric_limits<double>::infinity();
    for (int k = 0; k <= 80; ++k) {
      const double u = -3.0 + 6.0 * static_cast<double>(k) / 80.0;
      const double value = cdf(u, beta);
      if (value < previous) nondecreasing = false;
      previous = value;
    }
    suite.check(nondecreasing && cdf(3.0, beta) > cdf(-3.0, beta),
                "cdf is not increasing for beta = " + fmt(beta));
    suite.check(cdf(10.0 * beta, beta) >= 1.0 - 1e-4,
                "cdf(10 beta) = " + fmt(cdf(10.0 * beta, beta)) + " for beta = " + fmt(beta) +
                    ", expected ~1 (inside limit)");
    suite.check(cdf(-10.0 * beta, beta) <= 1e-4,
                "cdf(-10 beta) = " + fmt(cdf(-10.0 * beta, beta)) + " for beta = " + fmt(beta) +
                    ", expected ~0 (outside limit)");
  }

  return suite.result;
}

}  // namespace

bool CheckReport::all_passed() const {
  if (suites.empty()) return false;
  for (const auto& s : suites) {
    if (s.failed > 0) return false;
  }
  return true;
}

std::string CheckReport::render() const {
  std::ostringstream os;
  os << "self-check report\n";
  for (const auto& s : suites) {
    os << "  " << s.name << ": " << s.passed << " passed, " << s.failed << " failed\n";
    for (const auto& message : s.messages) os << "    - " << message << "\n";
  }
  os << "overall: " << (all_passed() ? "PASS" : "FAIL") << "\n";
  return os.str();
}

CheckReport run_checks(const std::vector<std::string>& suites, const CheckMutations& mutations) {
  std::vector<std::string> names(suites.begin(), suites.end());
  if (names.empty()) names.assign(kCheckSuites.begin(), kCheckSuites.end());

  CheckReport report;
  for (const auto& name : names) {
    if (name == "gradients") {
      report.suites.push_back(gradients_suite());
    } else if (name == "compositing") {
      report.suites.push_back(compositing_suite());
    } else if (name == "meshing") {
      report.suites.push_back(meshing_suite());
    } else if (name == "schedule") {
      report.suites.push_back(schedule_suite(mutations));
    } else {
      throw PipelineError("unknown check suite '" + name + "'");
    }
  }
  return report;
}

}  // namespace textmesh::pipeline

// simstex: texture generation, verification suites and texture previews.
//
//   simstex texture --mesh m.obj --denoiser gaussian:0.7,0.2 --out run/
//   simstex verify all
//   simstex render run/texture.png --mesh m.obj --camera 0 --out view.png
//
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "simstex/colorfield.hpp"
#include "simstex/io.hpp"
#include "simstex/remote.hpp"
#include "simstex/sims.hpp"
#include "simstex/verify.hpp"

namespace fs = std::filesystem;
using namespace simstex;
using nlohmann::json;

namespace {

constexpr int kUsage = 1;
constexpr int kRuntime = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string mesh;
  std::string prompt = "a textured object";
  std::string denoiser = "zero";
  std::string out = "simstex_run";
  ScheduleParams schedule;
  SimsConfig sims;
  DistillConfig distill{300, 0.01, 4096};
};

void to_json(json& j, const RunConfig& c) {
  j = {{"mesh", c.mesh},
       {"prompt", c.prompt},
       {"denoiser", c.denoiser},
       {"out", c.out},
       {"schedule", c.schedule},
       {"sims", c.sims},
       {"distill", {{"iters", c.distill.iters}, {"lr", c.distill.lr}, {"batch", c.distill.batch},
                    {"seed", c.distill.seed}}}};
}

void from_json(const json& j, RunConfig& c) {
  c = RunConfig{};
  if (j.contains("mesh")) j.at("mesh").get_to(c.mesh);
  if (j.contains("prompt")) j.at("prompt").get_to(c.prompt);
  if (j.contains("denoiser")) j.at("denoiser").get_to(c.denoiser);
  if (j.contains("out")) j.at("out").get_to(c.out);
  if (j.contains("schedule")) j.at("schedule").get_to(c.schedule);
  if (j.contains("sims")) j.at("sims").get_to(c.sims);
  if (j.contains("distill")) {
    const json& d = j.at("distill");
    c.distill.iters = d.value("iters", c.distill.iters);
    c.distill.lr = d.value("lr", c.distill.lr);
    c.distill.batch = d.value("batch", c.distill.batch);
    c.distill.seed = d.value("seed", c.distill.seed);
  }
}

CameraPreset preset_by_name(const std::string& name) {
  if (name == "default9") return CameraPreset::default9();
  if (name == "jittered18") return CameraPreset::jittered18();
  if (name == "human24") return CameraPreset::human24();
  if (fs::exists(name)) {
    std::ifstream in(name);
    return json::parse(in).get<CameraPreset>();
  }
  throw UsageError("unknown camera preset '" + name + "' (default9, jittered18, human24 or a JSON file)");
}

/// Normalized, validated mesh; meshes without UVs get a per-face atlas.
TriMesh prepare_mesh(const std::string& path) {
  if (path.empty()) throw UsageError("--mesh is required");
  TriMesh mesh = normalize_mesh(load_obj(path));
  validate_mesh(mesh);
  if (!mesh.has_uvs()) {
    const int per_face = round_up8(4.0 * std::ceil(std::sqrt(static_cast<double>(mesh.faces.size()))));
    mesh = naive_atlas(mesh, std::max(512, per_face));
  }
  return mesh;
}

std::vector<double> parse_doubles(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError("expected a number, got '" + tok + "'");
    }
  }
  return out;
}

struct DenoiserChoice {
  std::unique_ptr<Denoiser> denoiser;
  RemoteDenoiser* remote = nullptr;  // set when RGB comes from the bridge decoder
  bool oracle_rgb = false;           // first three latent channels are colors
};

DenoiserChoice make_denoiser(const std::string& spec, const TriMesh& mesh, int channels) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
  DenoiserChoice c;
  if (kind == "zero") {
    c.denoiser = std::make_unique<ZeroDenoiser>();
  } else if (kind == "gaussian") {
    const auto v = parse_doubles(arg);
    if (v.size() != 2) throw UsageError("gaussian denoiser takes gaussian:mu,s");
    c.denoiser = std::make_unique<GaussianOracle>(GaussianOracleParams{{v[0]}, {v[1]}});
    c.oracle_rgb = true;
  } else if (kind == "delta") {
    if (arg.empty()) throw UsageError("delta denoiser takes delta:<texture.ltx|.pfm>");
    LatentTexture target = load_grid(arg);
    if (target.channels() != channels)
      throw ShapeError("delta target has " + std::to_string(target.channels()) + " channels, expected " +
                       std::to_string(channels));
    c.denoiser = std::make_unique<DeltaOracle>(DeltaOracle::from_texture(mesh, std::move(target)));
    c.oracle_rgb = true;
  } else if (kind == "remote") {
    std::optional<BridgeAddress> addr;
    if (!arg.empty()) addr = parse_bridge_address(arg);
    else addr = bridge_address_from_env();
    if (!addr) throw UsageError("remote denoiser needs remote:host:port or SIMSTEX_BRIDGE_ADDR");
    auto r = std::make_unique<RemoteDenoiser>(*addr);
    c.remote = r.get();
    c.denoiser = std::move(r);
  } else {
    throw UsageError("unknown denoiser '" + spec + "' (zero, gaussian:mu,s, delta:<path>, remote:host:port)");
  }
  return c;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// texture

struct TextureFlags {
  std::string config, mesh, prompt, denoiser, out, preset;
  std::uint64_t seed = 0;
  double eta = 0, tau = 0, tau_refine = 0;
  int rounds = 0, steps = 0, refine_t = 0, distill_iters = 0;
};

RunConfig resolve_config(const TextureFlags& f, const CLI::App& cmd) {
  RunConfig c;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    if (!in) throw UsageError("cannot open config " + f.config);
    json j;
    try {
      j = json::parse(in);
    } catch (const json::exception& e) {
      throw UsageError(std::string("malformed config: ") + e.what());
    }
    // A run manifest carries its resolved configuration under "config".
    c = (j.contains("config") ? j.at("config") : j).get<RunConfig>();
  }
  const auto given = [&](const char* name) { return cmd.get_option(name)->count() > 0; };
  if (given("--mesh")) c.mesh = f.mesh;
  if (given("--prompt")) c.prompt = f.prompt;
  if (given("--denoiser")) c.denoiser = f.denoiser;
  if (given("--out")) c.out = f.out;
  if (given("--preset")) c.sims.refine_preset = preset_by_name(f.preset);
  if (given("--seed")) c.sims.seed = f.seed;
  if (given("--eta")) c.sims.eta = f.eta;
  if (given("--tau")) c.sims.tau_coarse = f.tau;
  if (given("--tau-refine")) c.sims.tau_refine = f.tau_refine;
  if (given("--rounds")) c.sims.rounds = f.rounds;
  if (given("--steps")) c.schedule.S = f.steps;
  if (given("--refine-t")) c.sims.refine_t = f.refine_t;
  if (given("--distill-iters")) c.distill.iters = f.distill_iters;
  if (c.sims.rounds != 1 && c.sims.rounds != 2) throw UsageError("--rounds must be 1 or 2");
  if (c.mesh.empty()) throw UsageError("--mesh is required (flag or config file)");
  if (!fs::exists(c.mesh)) throw UsageError("mesh not found: " + c.mesh);
  return c;
}

/// Distillation samples from the final views: bridge-decoded RGB, or the
/// first three channels of the x0 predictions for oracle denoisers.
std::vector<DistillSample> rgb_samples(const TriMesh& mesh, const PipelineResult& res, DenoiserChoice& d,
                                       int& rgb_scale) {
  std::vector<DistillSample> samples;
  rgb_scale = 1;
  for (std::size_t v = 0; v < res.xhat0.size(); ++v) {
    Grid<float> rgb;
    Camera cam = res.cameras[v];
    if (d.remote) {
      rgb = d.remote->decode(res.xhat0[v]);
      rgb_scale = std::max(1, rgb.height() / std::max(1, cam.image_h));
      cam.image_h = rgb.height();
      cam.image_w = rgb.width();
    } else {
      const LatentImage& x = res.xhat0[v];
      rgb = Grid<float>(x.height(), x.width(), 3);
      for (std::size_t i = 0; i < x.pixels(); ++i)
        for (int c = 0; c < 3; ++c) rgb.pixel(i)[c] = std::clamp(x.pixel(i)[c], 0.0f, 1.0f);
    }
    const RasterOutput r = rasterize(mesh, cam, res.tex_dims.first, res.tex_dims.second);
    const auto s = samples_from_view(r, rgb, static_cast<int>(v));
    samples.insert(samples.end(), s.begin(), s.end());
  }
  return samples;
}

int cmd_texture(const TextureFlags& flags, const CLI::App& cmd) {
  const RunConfig cfg = resolve_config(flags, cmd);
  const TriMesh mesh = prepare_mesh(cfg.mesh);
  DenoiserChoice d = make_denoiser(cfg.denoiser, mesh, cfg.sims.channels);

  const fs::path out(cfg.out);
  fs::create_directories(out / "views");
  std::fprintf(stderr, "simstex: %zu faces, denoiser %s, %d round(s), seed %llu\n", mesh.faces.size(),
               d.denoiser->describe().c_str(), cfg.sims.rounds, static_cast<unsigned long long>(cfg.sims.seed));

  const PipelineResult res = texfusion_pipeline(mesh, cfg.prompt, cfg.schedule, *d.denoiser, cfg.sims);
  save_ltx((out / "z0.ltx").string(), res.z0);
  for (std::size_t v = 0; v < res.xhat0.size(); ++v) {
    char name[32];
    std::snprintf(name, sizeof name, "view_%02zu.ltx", v);
    save_ltx((out / "views" / name).string(), res.xhat0[v]);
  }

  json manifest = res.manifest;
  manifest["config"] = cfg;
  manifest["mesh_faces"] = mesh.faces.size();
  manifest["outputs"] = {{"z0", "z0.ltx"}, {"views", res.xhat0.size()}};

  if (d.remote || d.oracle_rgb) {
    int scale = 1;
    const auto samples = rgb_samples(mesh, res, d, scale);
    if (!samples.empty()) {
      ColorField field;
      field.initialize(cfg.distill.seed);
      const auto hist = distill<float>(samples, field, cfg.distill);
      const LatentTexture tex =
          bake_texture(field, mesh, res.tex_dims.first * scale, res.tex_dims.second * scale);
      save_png((out / "texture.png").string(), tex);
      save_field((out / "field.hgf").string(), field);
      manifest["outputs"]["texture"] = "texture.png";
      manifest["outputs"]["field"] = "field.hgf";
      manifest["distill_loss"] = {{"first", hist.front()}, {"last", hist.back()}, {"samples", samples.size()}};
    }
  }
  write_json(out / "manifest.json", manifest);
  std::printf("wrote %s (texture %dx%d, %zu views)\n", out.string().c_str(), res.tex_dims.first,
              res.tex_dims.second, res.xhat0.size());
  return 0;
}

// ---------------------------------------------------------------------------
// verify

int cmd_verify(const std::string& suite) {
  const auto all = verify::suites();
  std::vector<std::string> names;
  if (suite == "all") {
    for (const auto& [name, _] : all) names.push_back(name);
  } else if (all.count(suite)) {
    names.push_back(suite);
  } else {
    throw UsageError("unknown suite '" + suite + "'");
  }
  int failed = 0, total = 0;
  for (const auto& name : names) {
    std::printf("== %s\n", name.c_str());
    std::fflush(stdout);
    for (const auto& check : all.at(name)) {
      const verify::CheckResult r = check();
      verify::print_result(stdout, r);
      std::fflush(stdout);
      ++total;
      if (!r.passed) ++failed;
    }
  }
  std::printf("%d/%d checks passed\n", total - failed, total);
  return failed == 0 ? 0 : kRuntime;
}

// ---------------------------------------------------------------------------
// render

struct RenderFlags {
  std::string texture, mesh, out, preset = "default9", eye;
  int camera = 0, size = 256;
  std::uint64_t seed = 0;
};

Grid<float> load_texture_any(const std::string& path) {
  if (!fs::exists(path)) throw IoError("texture not found: " + path);
  if (path.size() >= 4 && path.substr(path.size() - 4) == ".png") {
    const Rgb8Image img = load_png(path);
    Grid<float> g(img.height, img.width, 3);
    for (std::size_t k = 0; k < g.size(); ++k) g.raw()[k] = img.data[k] / 255.0f;
    return g;
  }
  return load_grid(path);
}

/// Diverging blue-white-red over [-m, m] with m the channel's largest
/// foreground magnitude.
Grid<float> latent_mosaic(const LatentImage& img, const RasterOutput& r) {
  const int h = img.height(), w = img.width();
  Grid<float> out(2 * h, 2 * w, 3, 0.0f);
  for (int c = 0; c < std::min(4, img.channels()); ++c) {
    float m = 1e-12f;
    for (std::size_t i = 0; i < img.pixels(); ++i)
      if (r.foreground(i)) m = std::max(m, std::abs(img.pixel(i)[c]));
    const int oy = (c / 2) * h, ox = (c % 2) * w;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        if (!r.foreground(i)) continue;
        const float v = img.pixel(i)[c] / m;  // [-1, 1]
        float* px = out.pixel(static_cast<std::size_t>(oy + y) * 2 * w + ox + x).data();
        px[0] = v > 0 ? 1.0f : 1.0f + v;
        px[1] = 1.0f - std::abs(v);
        px[2] = v < 0 ? 1.0f : 1.0f - v;
      }
  }
  return out;
}

int cmd_render(const RenderFlags& f) {
  const TriMesh mesh = prepare_mesh(f.mesh);
  const Grid<float> tex = load_texture_any(f.texture);
  Camera cam;
  if (!f.eye.empty()) {
    const auto e = parse_doubles(f.eye);
    if (e.size() != 3) throw UsageError("--eye takes x,y,z");
    cam = make_camera({e[0], e[1], e[2]}, {0, 0, 0}, fit_fov(bounding_radius(mesh), std::sqrt(e[0] * e[0] + e[1] * e[1] + e[2] * e[2]), 1.05), f.size);
  } else {
    CameraPreset p = preset_by_name(f.preset);
    p.image_size = f.size;
    const auto cams = make_cameras(p, mesh, f.seed);
    if (f.camera < 0 || f.camera >= static_cast<int>(cams.size()))
      throw UsageError("--camera must lie in [0, " + std::to_string(cams.size()) + ")");
    cam = cams[static_cast<std::size_t>(f.camera)];
  }
  const RasterOutput r = rasterize(mesh, cam, tex.height(), tex.width());
  const LatentImage img = render_texture(tex, r);
  if (tex.channels() == 3 || tex.channels() == 1) save_png(f.out, img);
  else save_png(f.out, latent_mosaic(img, r));
  std::printf("wrote %s\n", f.out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"SIMS / TexFusion texture synthesis"};
  app.require_subcommand(1);

  TextureFlags tf;
  CLI::App* texture = app.add_subcommand("texture", "Generate a latent texture for a mesh");
  texture->add_option("--config", tf.config, "JSON config or a previous manifest.json");
  texture->add_option("--mesh", tf.mesh, "OBJ mesh");
  texture->add_option("--prompt", tf.prompt, "Text prompt");
  texture->add_option("--preset", tf.preset, "Final-round cameras: default9, human24, jittered18 or a JSON file");
  texture->add_option("--denoiser", tf.denoiser, "zero | gaussian:mu,s | delta:<path> | remote:host:port");
  texture->add_option("--seed", tf.seed, "Run seed");
  texture->add_option("--eta", tf.eta, "DDIM eta")->check(CLI::Range(0.0, 1.0));
  texture->add_option("--tau", tf.tau, "Stochasticity of the coarse round")->check(CLI::Range(0.0, 1.0));
  texture->add_option("--tau-refine", tf.tau_refine, "Stochasticity of the refinement round")
      ->check(CLI::Range(0.0, 1.0));
  texture->add_option("--rounds", tf.rounds, "1 (coarse only) or 2 (coarse + refine)");
  texture->add_option("--steps", tf.steps, "Sampling steps of the coarse round")->check(CLI::PositiveNumber);
  texture->add_option("--refine-t", tf.refine_t, "Start time of the refinement round");
  texture->add_option("--distill-iters", tf.distill_iters, "Color-field iterations")->check(CLI::NonNegativeNumber);
  texture->add_option("--out", tf.out, "Output directory");

  std::string suite = "all";
  CLI::App* verify_cmd = app.add_subcommand("verify", "Run property suites on built-in fixtures");
  verify_cmd->add_option("suite", suite, "adjoint | schedule | oracle | sims | colorfield | all");

  RenderFlags rf;
  CLI::App* render = app.add_subcommand("render", "Render a texture on a mesh to PNG");
  render->add_option("texture", rf.texture, "Texture (.ltx, .pfm or .png)")->required();
  render->add_option("--mesh", rf.mesh, "OBJ mesh")->required();
  render->add_option("--camera", rf.camera, "Camera index within the preset");
  render->add_option("--preset", rf.preset, "Camera preset");
  render->add_option("--seed", rf.seed, "Seed for jittered presets");
  render->add_option("--eye", rf.eye, "Camera position x,y,z looking at the origin (overrides --camera)");
  render->add_option("--size", rf.size, "Image side in pixels")->check(CLI::PositiveNumber);
  render->add_option("--out", rf.out, "Output PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }

  try {
    if (*texture) return cmd_texture(tf, *texture);
    if (*verify_cmd) return cmd_verify(suite);
    if (*render) return cmd_render(rf);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRuntime;
  }
  return kUsage;
}

#pragma once

#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "histoseg/error.hpp"
#include "histoseg/evaluation.hpp"
#include "histoseg/model.hpp"
#include "histoseg/parallel.hpp"
#include "histoseg/patching.hpp"
#include "histoseg/png_io.hpp"
#include "histoseg/stain.hpp"
#include "histoseg/training.hpp"
#include "json.hpp"

namespace histoseg {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Logging

enum class LogLevel { Error = 0, Warn = 1, Info = 2, Debug = 3 };

class Logger {
 public:
  explicit Logger(LogLevel level = LogLevel::Info, std::ostream* sink = &std::cerr) : level_(level), sink_(sink) {}

  /// Level from HISTOSEG_LOG (error|warn|info|debug); info when unset or unknown.
  static Logger from_env() {
    const char* v = std::getenv("HISTOSEG_LOG");
    const std::string s = v ? v : "";
    if (s == "error") return Logger(LogLevel::Error);
    if (s == "warn") return Logger(LogLevel::Warn);
    if (s == "debug") return Logger(LogLevel::Debug);
    return Logger(LogLevel::Info);
  }

  void log(LogLevel level, const std::string& msg) const {
    if (level > level_ || !sink_) return;
    static constexpr const char* names[] = {"error", "warn", "info", "debug"};
    std::lock_guard lock(mu_);
    *sink_ << "histoseg [" << names[static_cast<int>(level)] << "] " << msg << '\n';
  }
  void error(const std::string& m) const { log(LogLevel::Error, m); }
  void warn(const std::string& m) const { log(LogLevel::Warn, m); }
  void info(const std::string& m) const { log(LogLevel::Info, m); }
  void debug(const std::string& m) const { log(LogLevel::Debug, m); }

 private:
  LogLevel level_;
  std::ostream* sink_;
  mutable std::mutex mu_;
};

// ---------------------------------------------------------------------------
// Configuration: TOML-style `key = value` lines grouped under [section] headers.

struct PipelineConfig {
  std::string target_image;
  std::string output_dir = "out";
  StainParams stain;
  std::size_t patch_size = 256;
  std::size_t margin = 64;
  std::size_t levels = 3;
  std::size_t base_channels = 8;
  std::uint64_t model_seed = 0;
  TrainConfig train;

  ModelConfig model_config() const { return {patch_size, margin, levels, base_channels, model_seed}; }

  void validate() const {
    stain.validate();
    model_config().validate();
    train.validate();
  }

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out + "\"";
}

inline std::string unquote(const std::string& v, const std::string& key) {
  require(v.size() >= 2 && v.front() == '"' && v.back() == '"', ErrorKind::Parse, key + ": expected a quoted string");
  std::string out;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    if (v[i] == '\\' && i + 2 < v.size()) ++i;
    out.push_back(v[i]);
  }
  return out;
}

inline double parse_real(const std::string& v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  fail(ErrorKind::Parse, key + ": expected a number, got '" + v + "'");
}

inline std::uint64_t parse_uint(const std::string& v, const std::string& key) {
  require(!v.empty() && std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); }),
          ErrorKind::Parse, key + ": expected a nonnegative integer, got '" + v + "'");
  try {
    return std::stoull(v);
  } catch (const std::exception&) {
    fail(ErrorKind::Parse, key + ": integer out of range");
  }
}

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true") return true;
  if (v == "false") return false;
  fail(ErrorKind::Parse, key + ": expected true or false");
}

/// Strips a trailing # comment that is not inside quotes.
inline std::string strip_comment(const std::string& line) {
  bool in_str = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] == '"' && (i == 0 || line[i - 1] != '\\')) in_str = !in_str;
    if (line[i] == '#' && !in_str) return line.substr(0, i);
  }
  return line;
}

}  // namespace detail

inline PipelineConfig parse_config(const std::string& text) {
  using namespace detail;
  PipelineConfig cfg;
  std::string section;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no);
    if (line.front() == '[') {
      require(line.back() == ']', ErrorKind::Parse, where + ": malformed section header");
      section = trim(line.substr(1, line.size() - 2));
      require(section == "stain" || section == "grid" || section == "model" || section == "train", ErrorKind::Parse,
              where + ": unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorKind::Parse, where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const std::string full = section.empty() ? key : section + "." + key;
    require(seen.insert(full).second, ErrorKind::Parse, where + ": duplicate key " + full);

    if (full == "target_image") cfg.target_image = unquote(value, full);
    else if (full == "output_dir") cfg.output_dir = unquote(value, full);
    else if (full == "stain.io_intensity") cfg.stain.io_intensity = parse_real(value, full);
    else if (full == "stain.beta") cfg.stain.beta = parse_real(value, full);
    else if (full == "stain.alpha") cfg.stain.alpha = parse_real(value, full);
    else if (full == "stain.concentration_percentile") cfg.stain.concentration_percentile = parse_real(value, full);
    else if (full == "grid.patch_size") cfg.patch_size = parse_uint(value, full);
    else if (full == "grid.margin") cfg.margin = parse_uint(value, full);
    else if (full == "model.levels") cfg.levels = parse_uint(value, full);
    else if (full == "model.base_channels") cfg.base_channels = parse_uint(value, full);
    else if (full == "model.seed") cfg.model_seed = parse_uint(value, full);
    else if (full == "train.learning_rate") cfg.train.learning_rate = parse_real(value, full);
    else if (full == "train.batch_size") cfg.train.batch_size = parse_uint(value, full);
    else if (full == "train.epochs") cfg.train.epochs = parse_uint(value, full);
    else if (full == "train.threshold") cfg.train.threshold = parse_real(value, full);
    else if (full == "train.beta1") cfg.train.beta1 = parse_real(value, full);
    else if (full == "train.beta2") cfg.train.beta2 = parse_real(value, full);
    else if (full == "train.epsilon") cfg.train.epsilon = parse_real(value, full);
    else if (full == "train.loss_smooth") cfg.train.loss_smooth = parse_real(value, full);
    else if (full == "train.augment") cfg.train.augment = parse_bool(value, full);
    else if (full == "train.seed") cfg.train.seed = parse_uint(value, full);
    else fail(ErrorKind::Parse, where + ": unknown key " + full);
  }
  cfg.validate();
  return cfg;
}

inline std::string serialize_config(const PipelineConfig& cfg) {
  using detail::format_double;
  using detail::quote;
  std::ostringstream o;
  o << "target_image = " << quote(cfg.target_image) << "\n";
  o << "output_dir = " << quote(cfg.output_dir) << "\n\n";
  o << "[stain]\n";
  o << "io_intensity = " << format_double(cfg.stain.io_intensity) << "\n";
  o << "beta = " << format_double(cfg.stain.beta) << "\n";
  o << "alpha = " << format_double(cfg.stain.alpha) << "\n";
  o << "concentration_percentile = " << format_double(cfg.stain.concentration_percentile) << "\n\n";
  o << "[grid]\n";
  o << "patch_size = " << cfg.patch_size << "\n";
  o << "margin = " << cfg.margin << "\n\n";
  o << "[model]\n";
  o << "levels = " << cfg.levels << "\n";
  o << "base_channels = " << cfg.base_channels << "\n";
  o << "seed = " << cfg.model_seed << "\n\n";
  o << "[train]\n";
  o << "learning_rate = " << format_double(cfg.train.learning_rate) << "\n";
  o << "batch_size = " << cfg.train.batch_size << "\n";
  o << "epochs = " << cfg.train.epochs << "\n";
  o << "threshold = " << format_double(cfg.train.threshold) << "\n";
  o << "beta1 = " << format_double(cfg.train.beta1) << "\n";
  o << "beta2 = " << format_double(cfg.train.beta2) << "\n";
  o << "epsilon = " << format_double(cfg.train.epsilon) << "\n";
  o << "loss_smooth = " << format_double(cfg.train.loss_smooth) << "\n";
  o << "augment = " << (cfg.train.augment ? "true" : "false") << "\n";
  o << "seed = " << cfg.train.seed << "\n";
  return o.str();
}

inline std::string read_text(const fs::path& path) {
  std::error_code ec;
  require(fs::is_regular_file(path, ec), ErrorKind::FileNotFound, "no such file: " + path.string());
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + path.string());
  out << text;
  require(static_cast<bool>(out), ErrorKind::Io, "failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Manifest: CSV with header image_path,mask_path,split.

enum class Split { Train, Test };

struct ManifestRecord {
  fs::path image_path;
  fs::path mask_path;
  Split split = Split::Train;

  /// Output file stem: the image file name without extension.
  std::string id() const { return image_path.stem().string(); }
};

struct Manifest {
  std::vector<ManifestRecord> records;

  std::vector<ManifestRecord> with_split(Split s) const {
    std::vector<ManifestRecord> out;
    for (const auto& r : records)
      if (r.split == s) out.push_back(r);
    return out;
  }
};

/// Relative paths are resolved against `base_dir`.
inline Manifest parse_manifest(const std::string& text, const fs::path& base_dir = {}) {
  std::istringstream in(text);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::Parse, "manifest is empty (missing header)");
  require(detail::trim(line) == "image_path,mask_path,split", ErrorKind::Parse,
          "manifest header must be image_path,mask_path,split");
  Manifest m;
  std::set<std::string> paths, ids;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::string where = "manifest line " + std::to_string(line_no);
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string f;
    while (std::getline(ls, f, ',')) fields.push_back(detail::trim(f));
    require(fields.size() == 3 && !fields[0].empty() && !fields[1].empty(), ErrorKind::Parse,
            where + ": expected image_path,mask_path,split");
    ManifestRecord r;
    r.image_path = fs::path(fields[0]).is_absolute() ? fs::path(fields[0]) : base_dir / fields[0];
    r.mask_path = fs::path(fields[1]).is_absolute() ? fs::path(fields[1]) : base_dir / fields[1];
    if (fields[2] == "train") r.split = Split::Train;
    else if (fields[2] == "test") r.split = Split::Test;
    else fail(ErrorKind::Parse, where + ": split must be train or test");
    require(paths.insert(r.image_path.lexically_normal().string()).second &&
                paths.insert(r.mask_path.lexically_normal().string()).second,
            ErrorKind::Parse, where + ": duplicate path");
    require(ids.insert(r.id()).second, ErrorKind::Parse, where + ": duplicate image name " + r.id());
    m.records.push_back(std::move(r));
  }
  return m;
}

inline Manifest load_manifest(const fs::path& path) {
  try {
    return parse_manifest(read_text(path), path.parent_path());
  } catch (const Error& e) {
    rethrow_with_context(e, path.string());
  }
}

// ---------------------------------------------------------------------------
// Output layout

struct Layout {
  fs::path root;

  fs::path profile() const { return root / "profile.json"; }
  fs::path normalized(const std::string& id) const { return root / "normalized" / (id + ".png"); }
  fs::path patch_dir(const std::string& id) const { return root / "patches" / id; }
  fs::path checkpoint() const { return root / "model.ckpt"; }
  fs::path history() const { return root / "history.csv"; }
  fs::path prediction_prob(const std::string& id) const { return root / "predictions" / (id + "_prob.png"); }
  fs::path prediction_mask(const std::string& id) const { return root / "predictions" / (id + "_mask.png"); }
  fs::path report() const { return root / "evaluation" / "report.json"; }
  fs::path eval_segmentation(const std::string& id) const { return root / "evaluation" / (id + "_seg.png"); }
};

inline std::string patch_stem(PatchOrigin o) {
  return "r" + std::to_string(o.row) + "_c" + std::to_string(o.col);
}

// ---------------------------------------------------------------------------
// Patch archives

inline nlohmann::ordered_json grid_to_json(const PatchGrid& grid) {
  nlohmann::ordered_json j;
  j["patch_size"] = grid.patch_size;
  j["margin"] = grid.margin;
  j["image_height"] = grid.image_height;
  j["image_width"] = grid.image_width;
  j["origins"] = nlohmann::ordered_json::array();
  for (const auto& o : grid.origins) j["origins"].push_back({o.row, o.col});
  return j;
}

inline PatchGrid grid_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    PatchGrid g;
    g.patch_size = j.at("patch_size").get<std::size_t>();
    g.margin = j.at("margin").get<std::size_t>();
    g.image_height = j.at("image_height").get<std::size_t>();
    g.image_width = j.at("image_width").get<std::size_t>();
    for (const auto& o : j.at("origins")) g.origins.push_back({o.at(0).get<std::size_t>(), o.at(1).get<std::size_t>()});
    return g;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Parse, std::string("grid.json: ") + e.what());
  }
}

/// Writes local/global/mask PNGs per grid origin plus grid.json.
inline PatchGrid write_patch_archive(const fs::path& dir, const RasterImage& image, const BinaryMask& mask,
                                     std::size_t patch_size, std::size_t margin) {
  require(image.height() == mask.height() && image.width() == mask.width(), ErrorKind::ShapeMismatch,
          "image and mask dimensions differ");
  const PatchGrid grid = plan_patch_grid(image.height(), image.width(), patch_size, margin);
  fs::create_directories(dir);
  for (const auto& o : grid.origins) {
    const std::string stem = patch_stem(o);
    save_png(extract_local_patch(image, o, patch_size), dir / (stem + "_local.png"));
    save_png(extract_global_patch(image, o, patch_size, margin), dir / (stem + "_global.png"));
    save_png(mask_to_image(crop_mask(mask, o.row, o.col, patch_size, patch_size), 255.0), dir / (stem + "_mask.png"));
  }
  write_text(dir / "grid.json", grid_to_json(grid).dump(2) + "\n");
  return grid;
}

inline std::vector<TrainingSample> read_patch_archive(const fs::path& dir, std::size_t patch_size, std::size_t margin) {
  const PatchGrid grid = grid_from_json(read_text(dir / "grid.json"));
  require(grid.patch_size == patch_size && grid.margin == margin, ErrorKind::ShapeMismatch,
          dir.string() + ": archive patch_size/margin do not match the configuration");
  std::vector<TrainingSample> out;
  for (const auto& o : grid.origins) {
    const std::string stem = patch_stem(o);
    TrainingSample s;
    s.pair.local = load_png(dir / (stem + "_local.png"));
    s.pair.global_raw = load_png(dir / (stem + "_global.png"));
    s.pair.origin = o;
    s.mask = mask_from_image(load_png(dir / (stem + "_mask.png")));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct RunContext {
  PipelineConfig config;
  fs::path base_dir;  // relative config paths resolve against this
  std::size_t jobs = 1;
  const Logger* log = nullptr;
  std::ostream* out = &std::cout;

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
  Layout layout() const { return {resolve(config.output_dir)}; }
  EvalOptions eval_options() const {
    return {config.stain, config.patch_size, config.margin, config.train.threshold, jobs};
  }
  void info(const std::string& m) const {
    if (log) log->info(m);
  }
  void warn(const std::string& m) const {
    if (log) log->warn(m);
  }
  void error(const std::string& m) const {
    if (log) log->error(m);
  }
};

inline RunContext load_context(const fs::path& config_path) {
  PipelineConfig cfg;
  try {
    cfg = parse_config(read_text(config_path));
  } catch (const Error& e) {
    rethrow_with_context(e, config_path.string());
  }
  return {cfg, config_path.parent_path(), 1, nullptr, &std::cout};
}

inline StainProfile fit_profile_from_target(const RunContext& ctx) {
  require(!ctx.config.target_image.empty(), ErrorKind::InvalidArgument, "config has no target_image");
  try {
    return fit_target_profile(load_png(ctx.resolve(ctx.config.target_image)), ctx.config.stain);
  } catch (const Error& e) {
    rethrow_with_context(e, "target image");
  }
}

/// Saved profile if normalize has run, else a fresh fit on the target image.
inline StainProfile load_or_fit_profile(const RunContext& ctx) {
  const fs::path p = ctx.layout().profile();
  std::error_code ec;
  if (fs::is_regular_file(p, ec)) return profile_from_json(read_text(p));
  return fit_profile_from_target(ctx);
}

/// Returns the number of images that failed.
inline std::size_t cmd_normalize(const RunContext& ctx, const Manifest& manifest) {
  if (manifest.records.empty()) {
    ctx.warn("normalize: manifest is empty, nothing to do");
    return 0;
  }
  const Layout layout = ctx.layout();
  const StainProfile profile = fit_profile_from_target(ctx);
  fs::create_directories(layout.root / "normalized");
  write_text(layout.profile(), profile_to_json(profile));
  std::vector<char> failed(manifest.records.size(), 0);
  parallel_for(manifest.records.size(), ctx.jobs, [&](std::size_t i) {
    const auto& rec = manifest.records[i];
    try {
      const RasterImage img = load_png(rec.image_path);
      save_png(normalize_to_target(img, profile, ctx.config.stain), layout.normalized(rec.id()));
    } catch (const Error& e) {
      failed[i] = 1;
      ctx.error("normalize: image " + rec.id() + ": " + e.what());
    }
  });
  std::size_t n_failed = 0;
  for (char f : failed) n_failed += f ? 1 : 0;
  ctx.info("normalize: wrote " + std::to_string(manifest.records.size() - n_failed) + " images to " +
           (layout.root / "normalized").string());
  return n_failed;
}

inline void cmd_patchify(const RunContext& ctx, const Manifest& manifest) {
  const Layout layout = ctx.layout();
  for (const auto& rec : manifest.records) {
    const fs::path normalized = layout.normalized(rec.id());
    std::error_code ec;
    require(fs::is_regular_file(normalized, ec), ErrorKind::FileNotFound,
            "patchify: missing normalized input " + normalized.string());
  }
  parallel_for(manifest.records.size(), ctx.jobs, [&](std::size_t i) {
    const auto& rec = manifest.records[i];
    try {
      const RasterImage img = load_png(layout.normalized(rec.id()));
      const BinaryMask mask = mask_from_image(load_png(rec.mask_path));
      const PatchGrid grid =
          write_patch_archive(layout.patch_dir(rec.id()), img, mask, ctx.config.patch_size, ctx.config.margin);
      ctx.info("patchify: " + rec.id() + ": " + std::to_string(grid.origins.size()) + " patch pairs");
    } catch (const Error& e) {
      rethrow_with_context(e, "patchify: image " + rec.id());
    }
  });
}

inline std::vector<TrainingSample> load_training_set(const RunContext& ctx, const Manifest& manifest) {
  std::vector<TrainingSample> data;
  for (const auto& rec : manifest.with_split(Split::Train)) {
    const fs::path dir = ctx.layout().patch_dir(rec.id());
    std::error_code ec;
    require(fs::is_regular_file(dir / "grid.json", ec), ErrorKind::FileNotFound,
            "train: missing patch archive " + dir.string());
    auto samples = read_patch_archive(dir, ctx.config.patch_size, ctx.config.margin);
    std::move(samples.begin(), samples.end(), std::back_inserter(data));
  }
  return data;
}

inline TrainResult cmd_train(const RunContext& ctx, const Manifest& manifest, const fs::path& checkpoint) {
  const std::vector<TrainingSample> data = load_training_set(ctx, manifest);
  require(!data.empty(), ErrorKind::InvalidArgument, "train: manifest has no train-split records");
  ctx.info("train: " + std::to_string(data.size()) + " patch pairs");
  Model model = build_model(ctx.config.model_config());
  TrainResult result = train(std::move(model), data, ctx.config.train, [&](std::size_t e, const EpochRecord& r) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "train: epoch %zu loss %.6f dice %.4f", e + 1, r.mean_loss, r.mean_dice);
    ctx.info(buf);
  });
  fs::create_directories(ctx.layout().root);
  if (checkpoint.has_parent_path()) fs::create_directories(checkpoint.parent_path());
  save_checkpoint(result.model, checkpoint);
  write_text(ctx.layout().history(), result.history.to_csv());
  if (!result.history.epochs.empty()) {
    const auto& last = result.history.epochs.back();
    char buf[128];
    std::snprintf(buf, sizeof buf, "epoch %zu mean_loss %.6f mean_dice %.4f\n", result.history.epochs.size(),
                  last.mean_loss, last.mean_dice);
    *ctx.out << buf;
  } else {
    *ctx.out << "no epochs run\n";
  }
  return result;
}

/// Rejects a checkpoint whose patch geometry disagrees with the configuration.
inline Model load_compatible_model(const RunContext& ctx, const fs::path& checkpoint) {
  Model model = load_checkpoint(checkpoint);
  require(model.config().patch_size == ctx.config.patch_size && model.config().margin == ctx.config.margin,
          ErrorKind::ShapeMismatch,
          "checkpoint patch_size/margin (" + std::to_string(model.config().patch_size) + "/" +
              std::to_string(model.config().margin) + ") do not match the configuration (" +
              std::to_string(ctx.config.patch_size) + "/" + std::to_string(ctx.config.margin) + ")");
  return model;
}

struct PredictOutputs {
  fs::path probability;
  fs::path mask;
};

inline PredictOutputs cmd_predict(const RunContext& ctx, const fs::path& checkpoint, const fs::path& image_path) {
  const Model model = load_compatible_model(ctx, checkpoint);
  const RasterImage image = load_png(image_path);
  const StainProfile profile = load_or_fit_profile(ctx);
  RasterImage normalized;
  try {
    normalized = normalize_to_target(image, profile, ctx.config.stain);
  } catch (const Error& e) {
    rethrow_with_context(e, "predict: normalize");
  }
  const RasterImage probs =
      segment_image(model_predictor(model), normalized, ctx.config.patch_size, ctx.config.margin, ctx.jobs);
  const BinaryMask mask = binarize(probs, ctx.config.train.threshold);

  const std::string id = image_path.stem().string();
  const Layout layout = ctx.layout();
  PredictOutputs out{layout.prediction_prob(id), layout.prediction_mask(id)};
  fs::create_directories(out.probability.parent_path());
  RasterImage scaled = probs;
  for (auto& v : scaled.pixels()) v *= 255.0;
  save_png(scaled, out.probability);
  save_png(mask_to_image(mask, 255.0), out.mask);
  *ctx.out << "wrote " << out.probability.string() << " and " << out.mask.string() << "\n";
  return out;
}

inline EvalReport cmd_evaluate(const RunContext& ctx, const fs::path& checkpoint, const Manifest& manifest,
                               bool gt_as_prediction = false) {
  const auto test = manifest.with_split(Split::Test);
  require(!test.empty(), ErrorKind::InvalidArgument, "evaluate: manifest has no test-split records");
  std::optional<Model> model;
  if (!gt_as_prediction) model = load_compatible_model(ctx, checkpoint);
  const StainProfile profile = load_or_fit_profile(ctx);
  std::vector<EvalItem> items;
  for (const auto& r : test) items.push_back({r.id(), r.image_path, r.mask_path});

  const Layout layout = ctx.layout();
  fs::create_directories(layout.report().parent_path());
  const EvalReport report =
      evaluate_dataset(model ? &*model : nullptr, items, profile, ctx.eval_options(),
                       [&](std::size_t i, const ImageEvaluation& ev) {
                         save_png(mask_to_image(ev.segmentation, 255.0), layout.eval_segmentation(items[i].id));
                       });
  write_text(layout.report(), report.to_json().dump(2) + "\n");
  char buf[64];
  for (const auto& r : report.images) {
    std::snprintf(buf, sizeof buf, "%.4f", r.dice);
    *ctx.out << r.id << " dice " << buf << "\n";
  }
  std::snprintf(buf, sizeof buf, "%.4f", report.mean_dice);
  *ctx.out << "mean_dice " << buf << "\n";
  return report;
}

}  // namespace histoseg

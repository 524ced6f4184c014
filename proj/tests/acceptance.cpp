// Acceptance gate: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <numbers>
#include <optional>
#include <string>

#include "gradcheck.hpp"
#include "histoseg/histoseg.hpp"
#include "histoseg/synthetic.hpp"

using namespace histoseg;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(const char* name, bool pass, const std::string& detail) {
  std::printf("%s %s: %s\n", pass ? "PASS" : "FAIL", name, detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

/// Runs a criterion; an exception counts as FAIL with its message.
void criterion(const char* name, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    report(name, false, std::string("exception: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

void gradient_correctness() {
  // 32x32 local, 8-pixel margin (48x48 global), two levels, four base channels
  Model model = build_model({32, 8, 2, 4, 3});
  const auto inputs = check::random_gradcheck_inputs(model.config(), 1);
  const auto rep = check::gradient_check(model, inputs, 1e-5, 1e-4);
  const bool pass = rep.failures == 0 && rep.kink_crossings == 0 && rep.seconds < 120.0;
  report("gradient_check", pass,
         fmt("%zu parameters, %zu over 1e-4, %zu kink crossings, worst %.3g at %s, %.1f s", rep.checked,
             rep.failures, rep.kink_crossings, rep.worst_relative_error, rep.worst_parameter.c_str(), rep.seconds));
}

void loss_metric_oracles() {
  SeededRng rng(2024);
  std::size_t mismatches = 0;
  double worst_identity = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t h = 1 + rng.uniform_index(16), w = 1 + rng.uniform_index(16);
    const double pa = rng.uniform(), pb = rng.uniform();
    BinaryMask a(h, w), b(h, w);
    for (std::size_t i = 0; i < a.size(); ++i) {
      a.set(i, rng.uniform() < pa);
      b.set(i, rng.uniform() < pb);
    }
    std::size_t both = 0, either = 0, na = 0, nb = 0;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const bool x = a.at(r, c), y = b.at(r, c);
        both += x && y;
        either += x || y;
        na += x;
        nb += y;
      }
    const double dice = na + nb == 0 ? 1.0 : 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
    const double jd = either == 0 ? 0.0 : static_cast<double>(either - both) / static_cast<double>(either);
    const double d_lib = dice_coefficient(a, b), j_lib = hard_jaccard_distance(a, b);
    if (d_lib != dice || j_lib != jd) ++mismatches;
    worst_identity = std::max(worst_identity, std::abs(d_lib - 2.0 * (1.0 - j_lib) / (2.0 - j_lib)));
  }
  report("loss_metric_oracles", mismatches == 0 && worst_identity <= 1e-12,
         fmt("1000 pairs, %zu mismatches vs brute force, worst identity error %.3g", mismatches, worst_identity));
}

void amsgrad_exactness() {
  const TrainConfig cfg;
  Tensor theta({1});
  Tensor* params[] = {&theta};
  OptimizerState state;
  Tensor g({1});
  g[0] = 1.0;
  amsgrad_step(std::span<Tensor* const>(params), {g}, state, cfg);
  const double expected = -cfg.learning_rate * (1.0 - cfg.beta1) / (std::sqrt(1.0 - cfg.beta2) + cfg.epsilon);
  const double first_err = std::abs(theta[0] - expected);

  Tensor w({64});
  Tensor* wp[] = {&w};
  OptimizerState s2;
  SeededRng rng(5);
  std::size_t violations = 0;
  std::vector<double> prev(64, 0.0);
  for (int step = 0; step < 10000; ++step) {
    Tensor grad({64});
    const double scale = std::exp(rng.uniform(-6.0, 3.0));
    for (auto& v : grad.data()) v = scale * rng.normal();
    amsgrad_step(std::span<Tensor* const>(wp), {grad}, s2, cfg);
    for (std::size_t i = 0; i < 64; ++i) {
      if (s2.v_hat[0][i] < prev[i] || s2.v_hat[0][i] < s2.v[0][i]) ++violations;
      prev[i] = s2.v_hat[0][i];
    }
  }
  report("amsgrad_exactness", first_err <= 1e-12 && std::abs(theta[0] + 0.00316228) < 1e-8 && violations == 0,
         fmt("first step %.10f (error %.3g), %zu monotonicity violations over 10000 steps", theta[0], first_err,
             violations));
}

void geometry_suite() {
  const PatchGrid grid = plan_patch_grid(1000, 1000, 256, 64);
  const std::vector<std::size_t> want{0, 256, 512, 744};
  bool axes = axis_origins(1000, 256) == want && grid.origins.size() == 16;
  std::vector<unsigned char> hit(1000 * 1000, 0);
  for (const auto& o : grid.origins)
    for (std::size_t r = 0; r < 256; ++r)
      for (std::size_t c = 0; c < 256; ++c) hit[(o.row + r) * 1000 + o.col + c] = 1;
  const bool coverage = std::all_of(hit.begin(), hit.end(), [](unsigned char v) { return v == 1; });

  SeededRng rng(11);
  RasterImage img(1000, 1000, 3);
  for (auto& v : img.pixels()) v = std::round(rng.uniform(1.0, 255.0));
  RasterImage probs(1000, 1000, 1);
  for (auto& v : probs.pixels()) v = rng.uniform();

  bool crop_ok = true, pad_ok = true;
  std::size_t padded = 0;
  std::vector<RasterImage> maps;
  for (const auto& o : grid.origins) {
    const PatchPair pair = extract_pair(img, o, 256, 64);
    crop_ok = crop_ok && center_crop(pair.global_raw, 256) == pair.local;
    for (std::size_t r = 0; r < 384; ++r)
      for (std::size_t c = 0; c < 384; ++c) {
        const auto sr = static_cast<long>(o.row + r) - 64, sc = static_cast<long>(o.col + c) - 64;
        if (sr >= 0 && sc >= 0 && sr < 1000 && sc < 1000) continue;
        ++padded;
        for (std::size_t k = 0; k < 3; ++k) pad_ok = pad_ok && pair.global_raw.at(r, c, k) == 0.0;
      }
    maps.push_back(extract_local_patch(probs, o, 256));
  }
  const bool stitch_ok = stitch_predictions(grid, maps) == probs;
  report("geometry", axes && coverage && crop_ok && stitch_ok && pad_ok && padded > 0,
         fmt("origins {0,256,512,744}: %s, coverage: %s, center crop == local: %s, stitch(extract) exact: %s, "
             "%zu padded pixels all zero: %s",
             axes ? "yes" : "no", coverage ? "yes" : "no", crop_ok ? "yes" : "no", stitch_ok ? "yes" : "no", padded,
             pad_ok ? "yes" : "no"));
}

double angle_degrees(const Eigen::Vector3d& a, const Eigen::Vector3d& b) {
  return std::acos(std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0)) * 180.0 / std::numbers::pi;
}

RasterImage quantized(RasterImage img) {
  for (auto& v : img.pixels()) v = std::round(v);
  return img;
}

RasterImage two_stain_image(std::size_t side, std::uint64_t seed, const StainBasis& basis) {
  SeededRng rng(seed);
  return quantized(synthetic::compose_stains(basis, side, side, synthetic::two_stain_concentrations(side * side, rng)));
}

double max_abs_diff(const RasterImage& a, const RasterImage& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.pixels().size(); ++i)
    worst = std::max(worst, std::abs(a.pixels()[i] - b.pixels()[i]));
  return worst;
}

void stain_oracles() {
  const StainParams p;
  const StainBasis truth = synthetic::reference_basis();
  StainBasis other;
  other.col(0) = Eigen::Vector3d(0.55, 0.75, 0.36).normalized();
  other.col(1) = Eigen::Vector3d(0.20, 0.90, 0.38).normalized();

  auto t0 = Clock::now();
  double worst_angle = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed)
    for (const StainBasis* basis : {&truth, static_cast<const StainBasis*>(&other)}) {
      const StainBasis est = estimate_stain_basis(rgb_to_od(two_stain_image(256, seed, *basis), p), p);
      for (int c = 0; c < 2; ++c) worst_angle = std::max(worst_angle, angle_degrees(est.col(c), basis->col(c)));
    }
  const double t_basis = seconds_since(t0);

  t0 = Clock::now();
  const RasterImage target = two_stain_image(256, 21, truth);
  const StainProfile profile = fit_target_profile(target, p);
  const double self_diff = max_abs_diff(quantized(normalize_to_target(target, profile, p)), target);
  const double t_self = seconds_since(t0);

  t0 = Clock::now();
  const RasterImage source = two_stain_image(256, 23, other);
  const RasterImage once = quantized(normalize_to_target(source, profile, p));
  const double idem_diff = max_abs_diff(quantized(normalize_to_target(once, profile, p)), once);
  const double t_idem = seconds_since(t0);

  const bool pass = worst_angle < 5.0 && self_diff <= 2.0 && idem_diff <= 2.0 && t_basis < 60.0 && t_self < 60.0 &&
                    t_idem < 60.0;
  report("stain_oracles", pass,
         fmt("worst column angle %.3f deg (%.2f s), self-normalization max diff %.0f (%.2f s), idempotence max "
             "diff %.0f (%.2f s)",
             worst_angle, t_basis, self_diff, t_self, idem_diff, t_idem));
}

// ---------------------------------------------------------------------------
// Overfit and the border-band comparison share one blob dataset.

constexpr std::size_t kSide = 128, kPatch = 64, kMargin = 16, kBand = 8;

struct BlobData {
  std::vector<synthetic::SyntheticSlide> slides;
  std::vector<TrainingSample> samples;
};

BlobData blob_data(bool zero_global) {
  BlobData d;
  synthetic::BlobOptions opts;
  opts.blobs = 8;
  opts.border_period = kPatch;
  for (std::uint64_t i = 0; i < 2; ++i) {
    SeededRng rng = SeededRng(1).derive(i);
    d.slides.push_back(synthetic::make_blob_slide(kSide, kSide, opts, rng));
    const auto& s = d.slides.back();
    for (const auto& o : plan_patch_grid(kSide, kSide, kPatch, kMargin).origins) {
      PatchPair pair = extract_pair(s.image, o, kPatch, kMargin);
      if (zero_global) pair.global_raw = RasterImage(pair.global_raw.height(), pair.global_raw.width(), 3, 0.0);
      d.samples.push_back({std::move(pair), crop_mask(s.mask, o.row, o.col, kPatch, kPatch)});
    }
  }
  return d;
}

/// Default hyperparameters with 200 epochs; `seed` drives both the model and the training run.
TrainResult overfit(const BlobData& data, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.epochs = 200;
  cfg.seed = seed;
  return train(build_model({kPatch, kMargin, 2, 8, seed}), data.samples, cfg);
}

double training_set_dice(const Model& model, const std::vector<TrainingSample>& samples) {
  double sum = 0.0;
  for (const auto& s : samples) sum += dice_coefficient(s.mask, binarize(predict_patch(model, s.pair), 0.5));
  return sum / static_cast<double>(samples.size());
}

bool in_border_band(std::size_t r, std::size_t c) {
  const auto near = [](std::size_t v) { return v % kPatch < kBand || v % kPatch >= kPatch - kBand; };
  return near(r) || near(c);
}

/// Dice restricted to pixels within kBand of a patch edge, on stitched slide predictions.
double border_band_dice(const Model& model, const BlobData& data, bool zero_global) {
  const PatchPredictor predictor = [&](const PatchPair& pair) {
    if (!zero_global) return predict_patch(model, pair);
    PatchPair p = pair;
    p.global_raw = RasterImage(p.global_raw.height(), p.global_raw.width(), 3, 0.0);
    return predict_patch(model, p);
  };
  std::size_t tp = 0, total = 0;
  for (const auto& s : data.slides) {
    const BinaryMask seg = binarize(segment_image(predictor, s.image, kPatch, kMargin), 0.5);
    for (std::size_t r = 0; r < kSide; ++r)
      for (std::size_t c = 0; c < kSide; ++c) {
        if (!in_border_band(r, c)) continue;
        const bool g = s.mask.at(r, c), p = seg.at(r, c);
        tp += g && p;
        total += g + p;
      }
  }
  return total == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(total);
}

constexpr std::uint64_t kMaxSeed = 4;

struct ArmResult {
  std::optional<TrainResult> run;
  std::uint64_t seed = 0;
  std::string tried;  // "seed:dice" for every run
};

/// Trains seeds first..kMaxSeed in order and keeps the first run that overfits.
ArmResult first_converged(const BlobData& data, std::uint64_t first, std::optional<TrainResult> seed_first = {}) {
  ArmResult arm;
  for (std::uint64_t seed = first; seed <= kMaxSeed; ++seed) {
    TrainResult r = seed_first && seed == first ? std::move(*seed_first) : overfit(data, seed);
    const double dice = training_set_dice(r.model, data.samples);
    arm.tried += fmt("%s%llu:%.3f", arm.tried.empty() ? "" : " ", static_cast<unsigned long long>(seed), dice);
    if (dice >= 0.90) {
      arm.run = std::move(r);
      arm.seed = seed;
      break;
    }
  }
  return arm;
}

void overfit_and_border_band() {
  const BlobData dual_data = blob_data(false);
  auto t0 = Clock::now();
  TrainResult dual = overfit(dual_data, 1);
  const double t_dual = seconds_since(t0);
  const double dice = training_set_dice(dual.model, dual_data.samples);
  report("overfit", dice >= 0.90 && t_dual < 300.0,
         fmt("%zu pairs, 64x64 local, margin 16, 200 epochs, seed 1: training Dice %.4f (last epoch running "
             "%.4f), %.1f s",
             dual_data.samples.size(), dice, dual.history.epochs.back().mean_dice, t_dual));

  criterion("border_band", [&] {
    // Both arms use the same protocol so that a collapsed run is never compared with a converged one.
    const ArmResult d = first_converged(dual_data, 1, std::move(dual));
    const BlobData local_data = blob_data(true);
    const ArmResult l = first_converged(local_data, 1);
    const std::string runs = "dual runs [" + d.tried + "], local-only runs [" + l.tried + "]";
    if (!d.run || !l.run) {
      report("border_band", false, "inconclusive, an arm never reached training Dice 0.90: " + runs);
      return;
    }
    const double d_dual = border_band_dice(d.run->model, dual_data, false);
    const double d_local = border_band_dice(l.run->model, local_data, true);
    report("border_band", d_dual >= d_local,
           fmt("border-band (%zu px) Dice: dual %.4f (seed %llu), local-only ablation %.4f (seed %llu); ", kBand,
               d_dual, static_cast<unsigned long long>(d.seed), d_local, static_cast<unsigned long long>(l.seed)) +
               runs);
  });
}

// ---------------------------------------------------------------------------

int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("HISTOSEG_LOG=warn '") + HISTOSEG_CLI_PATH + "' " + args + " >'" +
                          log.string() + "' 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void run_or_throw(const std::string& args, const fs::path& log) {
  if (run(args, log) != 0)
    fail(ErrorKind::Io, "histoseg " + args.substr(0, args.find(' ')) + " failed: " + read_text(log));
}

void determinism() {
  const fs::path root = fs::temp_directory_path() / "histoseg_acceptance_determinism";
  fs::remove_all(root);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  synthetic::BlobOptions opts;
  opts.blobs = 6;
  opts.border_period = 32;
  std::string manifest = "image_path,mask_path,split\n";
  for (std::uint64_t i = 0; i < 3; ++i) {
    SeededRng rng = SeededRng(9).derive(i);
    const auto s = synthetic::make_blob_slide(80, 80, opts, rng);
    const std::string name = "slide" + std::to_string(i);
    save_png(s.image, root / "images" / (name + ".png"));
    save_png(mask_to_image(s.mask, 255.0), root / "masks" / (name + ".png"));
    manifest += "images/" + name + ".png,masks/" + name + ".png," + (i < 2 ? "train" : "test") + "\n";
  }
  write_text(root / "manifest.csv", manifest);
  PipelineConfig cfg;
  cfg.target_image = "images/slide0.png";
  cfg.output_dir = "out";
  cfg.patch_size = 32;
  cfg.margin = 8;
  cfg.levels = 2;
  cfg.base_channels = 4;
  cfg.train.epochs = 3;
  cfg.train.batch_size = 4;
  cfg.train.seed = 42;
  write_text(root / "config.toml", serialize_config(cfg));

  const std::string f = "--config '" + (root / "config.toml").string() + "' --manifest '" +
                        (root / "manifest.csv").string() + "'";
  const fs::path log = root / "log.txt";
  run_or_throw("normalize " + f, log);
  run_or_throw("patchify " + f, log);
  run_or_throw("train " + f + " --checkpoint '" + (root / "a.ckpt").string() + "'", log);
  run_or_throw("train " + f + " --jobs 2 --checkpoint '" + (root / "b.ckpt").string() + "'", log);
  const bool ckpt_same = read_text(root / "a.ckpt") == read_text(root / "b.ckpt");

  const std::string predict = "predict --config '" + (root / "config.toml").string() + "' --checkpoint '" +
                              (root / "a.ckpt").string() + "' --image '" +
                              (root / "images" / "slide2.png").string() + "'";
  const fs::path prob = root / "out" / "predictions" / "slide2_prob.png";
  const fs::path mask = root / "out" / "predictions" / "slide2_mask.png";
  run_or_throw(predict, log);
  const std::string prob1 = read_text(prob), mask1 = read_text(mask);
  fs::remove(prob);
  fs::remove(mask);
  run_or_throw(predict + " --jobs 2", log);
  const bool png_same = read_text(prob) == prob1 && read_text(mask) == mask1;
  report("determinism", ckpt_same && png_same,
         fmt("checkpoints byte-identical: %s (%zu bytes), prediction PNGs byte-identical: %s",
             ckpt_same ? "yes" : "no", read_text(root / "a.ckpt").size(), png_same ? "yes" : "no"));
}

}  // namespace

int main() {
  criterion("gradient_check", gradient_correctness);
  criterion("loss_metric_oracles", loss_metric_oracles);
  criterion("amsgrad_exactness", amsgrad_exactness);
  criterion("geometry", geometry_suite);
  criterion("stain_oracles", stain_oracles);
  criterion("determinism", determinism);
  criterion("overfit", overfit_and_border_band);
  std::printf("%s: %d criteria failed\n", failures == 0 ? "ACCEPTED" : "REJECTED", failures);
  return failures == 0 ? 0 : 1;
}

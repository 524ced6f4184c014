#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "histoseg/error.hpp"
#include "histoseg/image.hpp"
#include "histoseg/model.hpp"
#include "histoseg/parallel.hpp"
#include "histoseg/patching.hpp"
#include "histoseg/png_io.hpp"
#include "histoseg/stain.hpp"
#include "json.hpp"

namespace histoseg {

/// Foreground iff prob > threshold (strict).
inline BinaryMask binarize(const RasterImage& probs, double threshold) {
  require(threshold > 0.0 && threshold < 1.0, ErrorKind::InvalidArgument, "threshold must be in (0, 1)");
  validate_probability(probs);
  BinaryMask out(probs.height(), probs.width());
  for (std::size_t i = 0; i < out.size(); ++i) out.set(i, probs.pixels()[i] > threshold);
  return out;
}

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

inline ConfusionCounts confusion_counts(const BinaryMask& gt, const BinaryMask& seg) {
  require(gt.same_dims(seg), ErrorKind::ShapeMismatch, "ground truth and segmentation dimensions differ");
  ConfusionCounts c;
  for (std::size_t i = 0; i < gt.size(); ++i) {
    const bool g = gt[i], s = seg[i];
    if (g && s) ++c.tp;
    else if (!g && s) ++c.fp;
    else if (g && !s) ++c.fn;
    else ++c.tn;
  }
  return c;
}

inline double dice_from_counts(const ConfusionCounts& c) {
  const std::uint64_t denom = 2 * c.tp + c.fp + c.fn;
  if (denom == 0) return 1.0;  // both masks empty
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

/// 2|G n S| / (|G| + |S|); 1 when both masks are empty.
inline double dice_coefficient(const BinaryMask& gt, const BinaryMask& seg) {
  return dice_from_counts(confusion_counts(gt, seg));
}

struct EvalRecord {
  std::string id;
  double dice = 0.0;
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
};

struct EvalReport {
  std::vector<EvalRecord> images;
  double mean_dice = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["images"] = nlohmann::ordered_json::array();
    for (const auto& r : images)
      j["images"].push_back(
          {{"id", r.id}, {"dice", r.dice}, {"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}, {"tn", r.tn}});
    j["mean_dice"] = mean_dice;
    return j;
  }
};

inline double mean_dice(const std::vector<EvalRecord>& records) {
  require(!records.empty(), ErrorKind::InvalidArgument, "mean Dice of an empty report");
  double sum = 0.0;
  for (const auto& r : records) sum += r.dice;
  return sum / static_cast<double>(records.size());
}

/// Maps a patch pair to a patch_size x patch_size probability raster.
using PatchPredictor = std::function<RasterImage(const PatchPair&)>;

inline PatchPredictor model_predictor(const Model& model) {
  return [&model](const PatchPair& pair) { return predict_patch(model, pair); };
}

/// Tiles an (already normalized) image, predicts each pair and averages the
/// overlaps back into a whole-image probability map.
inline RasterImage segment_image(const PatchPredictor& predictor, const RasterImage& image, std::size_t patch_size,
                                 std::size_t margin, std::size_t jobs = 1) {
  const PatchGrid grid = plan_patch_grid(image.height(), image.width(), patch_size, margin);
  std::vector<RasterImage> maps(grid.origins.size());
  parallel_for(grid.origins.size(), jobs, [&](std::size_t k) {
    maps[k] = predictor(extract_pair(image, grid.origins[k], patch_size, margin));
  });
  return stitch_predictions(grid, maps);
}

struct EvalOptions {
  StainParams stain;
  std::size_t patch_size = 256;
  std::size_t margin = 64;
  double threshold = 0.5;
  std::size_t jobs = 1;
};

struct ImageEvaluation {
  EvalRecord record;
  RasterImage probability;
  BinaryMask segmentation;
};

/// normalize -> plan grid -> extract pairs -> predict -> stitch -> binarize -> Dice.
/// Failures carry the name of the stage that raised them.
inline ImageEvaluation evaluate_image_detailed(const PatchPredictor& predictor, const RasterImage& image,
                                               const BinaryMask& gt, const StainProfile& profile,
                                               const EvalOptions& opts, std::string id = "image") {
  require(image.height() == gt.height() && image.width() == gt.width(), ErrorKind::ShapeMismatch,
          id + ": image and ground truth dimensions differ");
  RasterImage normalized;
  try {
    normalized = normalize_to_target(image, profile, opts.stain);
  } catch (const Error& e) {
    rethrow_with_context(e, id + ": normalize");
  }
  ImageEvaluation out;
  try {
    out.probability = segment_image(predictor, normalized, opts.patch_size, opts.margin, opts.jobs);
  } catch (const Error& e) {
    rethrow_with_context(e, id + ": predict");
  }
  try {
    out.segmentation = binarize(out.probability, opts.threshold);
  } catch (const Error& e) {
    rethrow_with_context(e, id + ": binarize");
  }
  const ConfusionCounts c = confusion_counts(gt, out.segmentation);
  out.record = {std::move(id), dice_from_counts(c), c.tp, c.fp, c.fn, c.tn};
  return out;
}

inline EvalRecord evaluate_image(const PatchPredictor& predictor, const RasterImage& image, const BinaryMask& gt,
                                 const StainProfile& profile, const EvalOptions& opts, std::string id = "image") {
  return evaluate_image_detailed(predictor, image, gt, profile, opts, std::move(id)).record;
}

inline EvalRecord evaluate_image(const Model& model, const RasterImage& image, const BinaryMask& gt,
                                 const StainProfile& profile, const EvalOptions& opts, std::string id = "image") {
  return evaluate_image(model_predictor(model), image, gt, profile, opts, std::move(id));
}

struct EvalItem {
  std::string id;
  std::filesystem::path image_path;
  std::filesystem::path mask_path;
};

/// Predictor that replays the ground truth, for checking the plumbing without a model.
inline PatchPredictor ground_truth_predictor(const BinaryMask& gt, std::size_t patch_size) {
  return [gt, patch_size](const PatchPair& pair) {
    return mask_to_image(crop_mask(gt, pair.origin.row, pair.origin.col, patch_size, patch_size));
  };
}

/// One record per item in input order; images run in parallel with `opts.jobs`
/// workers. With `model == nullptr` the ground truth stands in for predictions.
/// `on_result` (optional) sees every finished evaluation, e.g. to save maps.
inline EvalReport evaluate_dataset(const Model* model, const std::vector<EvalItem>& items,
                                   const StainProfile& profile, const EvalOptions& opts,
                                   const std::function<void(std::size_t, const ImageEvaluation&)>& on_result = {}) {
  require(!items.empty(), ErrorKind::InvalidArgument, "evaluation manifest is empty");
  std::vector<EvalRecord> records(items.size());
  EvalOptions inner = opts;
  inner.jobs = 1;
  parallel_for(items.size(), opts.jobs, [&](std::size_t i) {
    const EvalItem& item = items[i];
    const RasterImage image = load_png(item.image_path);
    const BinaryMask gt = mask_from_image(load_png(item.mask_path));
    const PatchPredictor predictor =
        model ? model_predictor(*model) : ground_truth_predictor(gt, opts.patch_size);
    ImageEvaluation ev = evaluate_image_detailed(predictor, image, gt, profile, inner, item.id);
    if (on_result) on_result(i, ev);
    records[i] = std::move(ev.record);
  });
  EvalReport report;
  report.images = std::move(records);
  report.mean_dice = mean_dice(report.images);
  return report;
}

}  // namespace histoseg

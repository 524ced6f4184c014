// Writes a procedural H&E-like blob dataset (images, masks, manifest, config)
// for trying the pipeline without real slides.

#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "histoseg/pipeline.hpp"
#include "histoseg/synthetic.hpp"

int main(int argc, char** argv) {
  namespace fs = std::filesystem;
  using namespace histoseg;

  CLI::App app{"Generate a synthetic blob dataset"};
  std::string out_dir = "blobs";
  std::size_t train_count = 2, test_count = 1, size = 128, patch = 64, margin = 16, blobs = 8, epochs = 150;
  std::uint64_t seed = 7;
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--train", train_count, "Number of training slides");
  app.add_option("--test", test_count, "Number of test slides");
  app.add_option("--size", size, "Slide height and width in pixels");
  app.add_option("--patch", patch, "Patch size written into the config");
  app.add_option("--margin", margin, "Global margin written into the config");
  app.add_option("--blobs", blobs, "Blobs per slide");
  app.add_option("--epochs", epochs, "Training epochs written into the config");
  app.add_option("--seed", seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);

  try {
    const fs::path root(out_dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    synthetic::BlobOptions opts;
    opts.blobs = blobs;
    opts.border_period = patch;
    const SeededRng base(seed);
    std::string manifest = "image_path,mask_path,split\n";
    for (std::size_t i = 0; i < train_count + test_count; ++i) {
      SeededRng rng = base.derive(i);
      const auto slide = synthetic::make_blob_slide(size, size, opts, rng);
      const std::string name = "slide" + std::to_string(i);
      save_png(slide.image, root / "images" / (name + ".png"));
      save_png(mask_to_image(slide.mask, 255.0), root / "masks" / (name + ".png"));
      manifest += "images/" + name + ".png,masks/" + name + ".png," + (i < train_count ? "train" : "test") + "\n";
    }
    write_text(root / "manifest.csv", manifest);

    PipelineConfig cfg;
    cfg.target_image = "images/slide0.png";
    cfg.output_dir = "out";
    cfg.patch_size = patch;
    cfg.margin = margin;
    cfg.levels = 2;
    cfg.base_channels = 8;
    cfg.train.epochs = epochs;
    cfg.validate();
    write_text(root / "config.toml", serialize_config(cfg));
    std::cout << "wrote " << train_count + test_count << " slides, manifest.csv and config.toml to " << root.string()
              << "\n";
  } catch (const Error& e) {
    std::cerr << "make-blob-dataset: error kind=" << to_string(e.kind()) << " message=\"" << e.what() << "\"\n";
    return 1;
  }
  return 0;
}

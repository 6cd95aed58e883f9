// Encodes one synthetic image with an untrained tokenizer, decodes every
// scale of the pyramid and writes them next to the input as PPM files.
//
//   pyramid_demo [output_dir]

#include <filesystem>
#include <iostream>
#include <string>

#include "hieratok/harness/dataset.hpp"
#include "hieratok/harness/metrics.hpp"
#include "hieratok/harness/ppm.hpp"
#include "hieratok/tokenizer.hpp"

int main(int argc, char** argv) {
  using namespace hieratok;
  const std::filesystem::path out = argc > 1 ? argv[1] : ".";
  std::filesystem::create_directories(out);

  TokenizerConfig cfg;  // 32 px, patch 4, grids 1,2,4,8
  const auto model = make_model<float>(cfg);
  std::cout << "decoder tokens per image: " << model.schedule.total << " (" << cfg.base_grid() * cfg.base_grid()
            << " from the encoder)\n";

  const Dataset ds = synthetic_dataset(1, cfg.image_size, /*seed=*/7);
  const Tensor<float> x = make_batch<float>(ds, {0});
  save_ppm(planar_to_ppm(x.data().data(), cfg.image_size, cfg.image_size), (out / "input.ppm").string());

  NoGradGuard no_grad;
  const auto rec = reconstruct(model, x, /*deterministic=*/true);
  for (std::size_t s = 0; s < rec.images.size(); ++s) {
    const auto& img = rec.images[s];
    const std::size_t side = img.shape()[2];
    const std::string name = "scale" + std::to_string(s) + "_" + std::to_string(side) + "px.ppm";
    save_ppm(planar_to_ppm(img.data().data(), side, side), (out / name).string());
    std::cout << name << '\n';
  }
  std::cout << "full-resolution PSNR of the untrained model: " << psnr_per_image(rec.images.back(), x)[0] << " dB\n";
  return 0;
}

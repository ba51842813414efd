#include <iostream>

#include "CLI11.hpp"
#include "synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write a synthetic pedestrian dataset with a planted detector."};
  testdrive::synthetic::FixtureConfig config;
  std::string out;
  app.add_option("--out", out, "Output directory")->required();
  app.add_option("--images", config.images, "Image count");
  app.add_option("--objects", config.objects_per_image, "Pedestrians per image");
  app.add_option("--detect-rate", config.detect_rate, "Probability a pedestrian is detected");
  app.add_option("--seed", config.seed, "Generator seed");
  CLI11_PARSE(app, argc, argv);
  try {
    const auto f = testdrive::synthetic::write_fixture(out, config);
    std::cout << f.truth.size() << " objects, " << f.detector.size() << " detections in " << out << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

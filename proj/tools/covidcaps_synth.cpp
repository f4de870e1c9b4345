/*
 * Copyright 2026 The covidcaps Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *    http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Writes a toy PNG dataset plus manifest.csv for trying out the CLI.
//   binary: filled squares labelled COVID-19, hollow rings labelled Normal
//   nih:    five shapes labelled with one NIH finding per category

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "covidcaps/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic shape dataset"};
  std::string out_dir;
  std::string kind = "binary";
  std::size_t count = 200;
  std::size_t size = 24;
  std::uint64_t seed = 0;
  app.add_option("--out", out_dir, "Output directory")->required();
  app.add_option("--kind", kind, "Dataset kind")
      ->capture_default_str()
      ->check(CLI::IsMember({"binary", "nih"}));
  app.add_option("--count", count, "Number of images")->capture_default_str();
  app.add_option("--size", size, "Image side in pixels")->capture_default_str();
  app.add_option("--seed", seed, "Random seed")->capture_default_str();
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const auto set = kind == "binary"
                         ? covidcaps::synthetic::squares_vs_rings<float>(count, size, seed)
                         : covidcaps::synthetic::five_shapes<float>(count, size, seed);
    static const char* nih_labels[] = {"No Finding", "Mass", "Effusion", "Pneumonia",
                                       "Cardiomegaly"};
    std::ofstream manifest(fs::path(out_dir) / "manifest.csv");
    manifest << "path,label\n";
    for (std::size_t i = 0; i < set.size(); ++i) {
      const std::string name = "img" + std::to_string(i) + ".png";
      covidcaps::write_png_gray((fs::path(out_dir) / name).string(), set.images[i]);
      manifest << name << ","
               << (kind == "binary" ? set.original_labels[i] : nih_labels[set.labels[i]])
               << "\n";
    }
    if (!manifest) throw covidcaps::IoError("failed writing manifest");
    std::cout << (fs::path(out_dir) / "manifest.csv").string() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

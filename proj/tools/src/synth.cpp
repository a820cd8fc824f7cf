// capseq-synth: writes a small synthetic chest X-ray style corpus (JSONL
// plus PGM images) for smoke runs. Each of eight finding classes places a
// bright blob in its own cell of the image and carries a fixed report.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "capseq/image.hpp"
#include "capseq/rng.hpp"

namespace {

struct Finding {
  double cy, cx;
  const char* impression;
  const char* findings;
  const char* pathology;
  const char* polarity;
};

constexpr Finding kFindings[] = {
    {0.2, 0.2, "No acute cardiopulmonary process.", "Heart size is normal. Lungs are clear.", "Pneumothorax", "negative"},
    {0.2, 0.5, "Small left pleural effusion.", "Blunting of the left costophrenic angle.", "Pleural Effusion", "positive"},
    {0.2, 0.8, "Mild cardiomegaly.", "No PTX. Lungs are clear.", "Cardiomegaly", "positive"},
    {0.5, 0.2, "Possible RLL pneumonia.", "Patchy opacity at the right base.", "Pneumonia", "uncertain"},
    {0.5, 0.8, "Findings c/w CHF.", "Vascular congestion and interstitial edema.", "Edema", "positive"},
    {0.8, 0.2, "NAD.", "Stable cardiomediastinal silhouette.", "Consolidation", "negative"},
    {0.8, 0.5, "Right apical PTX.", "No mediastinal shift.", "Pneumothorax", "positive"},
    {0.8, 0.8, "Bibasilar atelectasis.", "No focal consolidation. No effusion.", "Atelectasis", "positive"},
};

capseq::RawImage render(const Finding& f, std::size_t side, capseq::Rng& rng) {
  capseq::RawImage img{side, side, 255, {}};
  const double radius = 0.15 * static_cast<double>(side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) {
      const double dy = (static_cast<double>(y) + 0.5) - f.cy * static_cast<double>(side);
      const double dx = (static_cast<double>(x) + 0.5) - f.cx * static_cast<double>(side);
      const double blob = std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
      const double v = std::clamp(0.15 + 0.7 * blob + rng.uniform(-0.05, 0.05), 0.0, 1.0);
      img.pixels.push_back(static_cast<std::uint16_t>(std::lround(v * 255.0)));
    }
  }
  return img;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capseq-synth: synthetic corpus for smoke runs"};
  std::filesystem::path out;
  std::size_t count = 32, side = 64, empty = 0, malformed = 0;
  std::uint64_t seed = 1;
  app.add_option("--out", out, "output directory")->required();
  app.add_option("--count", count, "studies with a report")->check(CLI::PositiveNumber);
  app.add_option("--side", side, "image side in pixels")->check(CLI::Range(8, 1024));
  app.add_option("--empty", empty, "extra studies with empty impression and findings");
  app.add_option("--malformed", malformed, "extra unparseable lines");
  app.add_option("--seed", seed, "noise seed");
  CLI11_PARSE(app, argc, argv);

  try {
    std::filesystem::create_directories(out / "images");
    capseq::Rng rng(seed);
    std::ofstream jsonl(out / "corpus.jsonl", std::ios::trunc);
    std::ofstream texts(out / "reports.txt", std::ios::trunc);
    const std::size_t total = count + empty;
    for (std::size_t i = 0; i < total; ++i) {
      const Finding& f = kFindings[i % std::size(kFindings)];
      char id[32];
      std::snprintf(id, sizeof id, "s%04zu", i + 1);
      const std::string image = std::string("images/") + id + ".pgm";
      capseq::write_pgm(out / image, render(f, side, rng));
      nlohmann::ordered_json j;
      j["id"] = id;
      j["image"] = image;
      const bool is_empty = i >= count;
      j["impression"] = is_empty ? "" : f.impression;
      j["findings"] = is_empty ? "" : f.findings;
      j["labels"] = nlohmann::json::array({{{"pathology", f.pathology}, {"polarity", f.polarity}}});
      jsonl << j.dump() << "\n";
      if (!is_empty) texts << f.impression << " " << f.findings << "\n";
      if (i < malformed) jsonl << "{\"id\": \"broken" << i + 1 << "\", \"impression\": \n";
    }
    std::cout << "wrote " << total << " studies to " << (out / "corpus.jsonl").string() << "\n";
  } catch (const std::exception& e) {
    std::cerr << "capseq-synth: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

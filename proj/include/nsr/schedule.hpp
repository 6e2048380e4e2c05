#pragma once

#include <string>
#include <vector>

#include "nsr/tensor.hpp"

namespace nsr {

// Scale grids visited coarse to fine, e.g. 1x1, 2x2, 4x4, 8x8. The last grid
// must equal the latent grid of the autoencoder.
struct ScaleSchedule {
  std::vector<std::pair<int, int>> grids;

  int K() const { return (int)grids.size(); }

  int tokens() const {
    int n = 0;
    for (auto [h, w] : grids) n += h * w;
    return n;
  }

  int final_h() const { return grids.back().first; }
  int final_w() const { return grids.back().second; }

  static ScaleSchedule parse(const std::string& text) {
    ScaleSchedule s;
    size_t pos = 0;
    while (pos < text.size()) {
      size_t comma = text.find(',', pos);
      std::string item = text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
      size_t x = item.find('x');
      if (x == std::string::npos)
        throw ConfigError("schedule: expected HxW, got '" + item + "'");
      int h = 0, w = 0;
      try {
        h = std::stoi(item.substr(0, x));
        w = std::stoi(item.substr(x + 1));
      } catch (const std::exception&) {
        throw ConfigError("schedule: bad number in '" + item + "'");
      }
      if (h < 1 || w < 1) throw ConfigError("schedule: grid sides must be positive in '" + item + "'");
      s.grids.emplace_back(h, w);
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    if (s.grids.empty()) throw ConfigError("schedule: empty");
    for (size_t k = 1; k < s.grids.size(); ++k)
      if (s.grids[k].first < s.grids[k - 1].first || s.grids[k].second < s.grids[k - 1].second)
        throw ConfigError("schedule: grids must be nondecreasing");
    return s;
  }

  std::string str() const {
    std::string out;
    for (size_t k = 0; k < grids.size(); ++k) {
      if (k) out += ",";
      out += std::to_string(grids[k].first) + "x" + std::to_string(grids[k].second);
    }
    return out;
  }
};

// quantizer output at one scale
struct IndexMap {
  int h = 0, w = 0;
  std::vector<int> idx;  // h*w entries, row-major
};

}  // namespace nsr

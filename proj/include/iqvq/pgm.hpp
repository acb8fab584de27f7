#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "iqvq/tensor.hpp"

namespace iqvq {

/// Writes a single-channel [0,1] image as plain PGM (P2, maxval 255).
inline void write_pgm(const std::string& path, const Tensor& image) {
    if (image.rank() != 3 || image.shape[2] != 1)
        throw std::invalid_argument("write_pgm: expected H x W x 1 image");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_pgm: cannot open " + path);
    const int h = image.shape[0], w = image.shape[1];
    out << "P2\n" << w << " " << h << "\n255\n";
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int v = std::clamp(static_cast<int>(std::lround(image.at(y, x, 0) * 255.0)), 0, 255);
            out << v << (x + 1 == w ? '\n' : ' ');
        }
    }
    if (!out) throw std::runtime_error("write_pgm: write failed for " + path);
}

/// Reads a plain PGM (P2) into an H x W x 1 image scaled to [0,1].
inline Tensor read_pgm(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("read_pgm: cannot open " + path);
    std::string token;
    auto next = [&]() -> std::string {
        while (in >> token) {
            if (token[0] == '#') {
                std::string rest;
                std::getline(in, rest);
                continue;
            }
            return token;
        }
        throw std::runtime_error("read_pgm: truncated file " + path);
    };
    if (next() != "P2") throw std::runtime_error("read_pgm: " + path + " is not plain PGM (P2)");
    const int w = std::stoi(next());
    const int h = std::stoi(next());
    const int maxval = std::stoi(next());
    if (w <= 0 || h <= 0 || maxval <= 0)
        throw std::runtime_error("read_pgm: bad header in " + path);
    Tensor img(Shape{h, w, 1});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            img.at(y, x, 0) = static_cast<double>(std::stoi(next())) / maxval;
    return img;
}

}  // namespace iqvq

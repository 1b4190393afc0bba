// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "maskdit/common.hpp"
#include "maskdit/dataset.hpp"
#include "maskdit/image.hpp"

namespace maskdit {

/// Writes a batch as one binary PPM (P6) tile grid, 8 bits per channel.
/// Pixels are de-normalized through the dataset's affine map and clamped to
/// [0, 255]. Single-channel images are replicated to gray RGB.
template <class T>
void write_ppm_grid(const std::string& path, const ImageBatch<T>& images,
                    const DatasetSpec& spec) {
    require(images.batch > 0, "write_ppm_grid: empty batch");
    require(images.channels == 1 || images.channels == 3,
            "write_ppm_grid: only 1 or 3 channels supported");
    const long cols = static_cast<long>(std::ceil(std::sqrt(static_cast<double>(images.batch))));
    const long rows = (images.batch + cols - 1) / cols;
    const long out_w = cols * images.width;
    const long out_h = rows * images.height;

    std::vector<unsigned char> pixels(static_cast<std::size_t>(out_w * out_h * 3), 0);
    auto to_byte = [&](double v) {
        const double display = spec.denormalize(v) * 255.0;
        return static_cast<unsigned char>(std::clamp(std::lround(display), 0L, 255L));
    };
    for (long b = 0; b < images.batch; ++b) {
        const long ty = (b / cols) * images.height;
        const long tx = (b % cols) * images.width;
        for (long y = 0; y < images.height; ++y) {
            for (long x = 0; x < images.width; ++x) {
                const std::size_t o =
                    static_cast<std::size_t>(((ty + y) * out_w + tx + x) * 3);
                if (images.channels == 1) {
                    const unsigned char g = to_byte(static_cast<double>(images.at(b, 0, y, x)));
                    pixels[o] = pixels[o + 1] = pixels[o + 2] = g;
                } else {
                    for (long c = 0; c < 3; ++c)
                        pixels[o + static_cast<std::size_t>(c)] =
                            to_byte(static_cast<double>(images.at(b, c, y, x)));
                }
            }
        }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open for writing: " + path);
    out << "P6\n" << out_w << " " << out_h << "\n255\n";
    out.write(reinterpret_cast<const char*>(pixels.data()),
              static_cast<std::streamsize>(pixels.size()));
    if (!out) throw Error("write failed: " + path);
}

}  // namespace maskdit

#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace surgline {

/// Interleaved HWC image with channel values in [0, 1].
struct Image {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> pixels;

  float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  float& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  bool operator==(const Image&) const = default;
};

/// Parameters of one synthetic frame. Encoded into an image reference of the
/// form "synth:k=3;n=7;size=64;noise=0.05;seed=42".
struct SynthPattern {
  int class_index = 0;
  int n_classes = 2;
  int size = 64;
  double noise = 0.0;
  std::uint64_t seed = 0;
};

std::string synth_ref(const SynthPattern& p);
SynthPattern parse_synth_ref(std::string_view ref);
Image render_synth(const SynthPattern& p);

/// Resolves an image reference (as stored in FrameRecord::image) to pixels.
class FrameDecoder {
 public:
  virtual ~FrameDecoder() = default;
  virtual Image decode(std::string_view ref) const = 0;
};

/// Handles "synth:" references, binary PPM/PGM files, and, when built with
/// OpenCV, still images plus "<video-or-directory>#<frame>" references.
class DefaultFrameDecoder : public FrameDecoder {
 public:
  Image decode(std::string_view ref) const override;
};

Image read_pnm(std::string_view path);
void write_ppm(const Image& img, std::string_view path);

/// Bilinear resize (half-pixel centers).
Image resize_bilinear(const Image& img, int width, int height);
Image center_crop(const Image& img, int width, int height);

}  // namespace surgline

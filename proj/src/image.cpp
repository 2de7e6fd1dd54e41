#include "surgline/image.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "surgline/common.hpp"

#ifdef SURGLINE_HAVE_OPENCV
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>
#endif

namespace surgline {

std::string synth_ref(const SynthPattern& p) {
  return "synth:k=" + std::to_string(p.class_index) + ";n=" + std::to_string(p.n_classes) +
         ";size=" + std::to_string(p.size) + ";noise=" + format_real(p.noise) +
         ";seed=" + std::to_string(p.seed);
}

SynthPattern parse_synth_ref(std::string_view ref) {
  constexpr std::string_view prefix = "synth:";
  if (ref.substr(0, prefix.size()) != prefix) throw ParseError("not a synth reference: " + std::string(ref));
  SynthPattern p;
  for (const auto& field : split(ref.substr(prefix.size()), ';')) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw ParseError("bad synth field '" + field + "'");
    const auto key = field.substr(0, eq);
    const auto val = field.substr(eq + 1);
    try {
      if (key == "k") p.class_index = std::stoi(val);
      else if (key == "n") p.n_classes = std::stoi(val);
      else if (key == "size") p.size = std::stoi(val);
      else if (key == "noise") p.noise = std::stod(val);
      else if (key == "seed") p.seed = std::stoull(val);
      else throw ParseError("unknown synth field '" + key + "'");
    } catch (const std::logic_error&) {
      throw ParseError("bad synth value in '" + field + "'");
    }
  }
  if (p.n_classes < 2 || p.class_index < 0 || p.class_index >= p.n_classes || p.size < 1 || p.noise < 0) {
    throw ParseError("invalid synth reference: " + std::string(ref));
  }
  return p;
}

Image render_synth(const SynthPattern& p) {
  // Oriented grating whose angle, spatial frequency and tint depend on the class.
  const double frac = static_cast<double>(p.class_index) / p.n_classes;
  const double angle = M_PI * frac;
  const double freq = 2.0 + (p.class_index % 3);
  const double phase = 2.0 * M_PI * frac;
  const double hue = frac * 6.0;
  const auto channel = [&](double offset) {
    const double h = std::fmod(hue + offset, 6.0);
    const double x = std::clamp(std::abs(h - 3.0) - 1.0, 0.0, 1.0);
    return 0.25 + 0.7 * x;
  };
  const double tint[3] = {channel(0.0), channel(4.0), channel(2.0)};

  Image img{p.size, p.size, 3, std::vector<float>(static_cast<std::size_t>(p.size) * p.size * 3)};
  Rng rng(p.seed);
  const double c = std::cos(angle), s = std::sin(angle);
  for (int y = 0; y < p.size; ++y) {
    for (int x = 0; x < p.size; ++x) {
      const double u = (x * c + y * s) / p.size;
      const double wave = 0.5 + 0.5 * std::sin(2.0 * M_PI * freq * u + phase);
      for (int ch = 0; ch < 3; ++ch) {
        double v = tint[ch] * (0.3 + 0.7 * wave);
        if (p.noise > 0) v += p.noise * rng.normal();
        img.at(y, x, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return img;
}

namespace {

std::string next_pnm_token(std::istream& in) {
  std::string tok;
  char ch = 0;
  while (in.get(ch)) {
    if (ch == '#') {
      std::string ignored;
      std::getline(in, ignored);
    } else if (!std::isspace(static_cast<unsigned char>(ch))) {
      tok.push_back(ch);
      break;
    }
  }
  while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) tok.push_back(ch);
  return tok;
}

#ifdef SURGLINE_HAVE_OPENCV
Image from_mat(const cv::Mat& bgr) {
  cv::Mat rgb;
  if (bgr.channels() == 1) cv::cvtColor(bgr, rgb, cv::COLOR_GRAY2RGB);
  else cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Image img{rgb.cols, rgb.rows, 3, std::vector<float>(static_cast<std::size_t>(rgb.cols) * rgb.rows * 3)};
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<unsigned char>(y);
    for (int x = 0; x < rgb.cols * 3; ++x) {
      img.pixels[static_cast<std::size_t>(y) * rgb.cols * 3 + x] = row[x] / 255.0f;
    }
  }
  return img;
}

Image decode_with_opencv(std::string_view ref) {
  const auto hash = ref.rfind('#');
  if (hash == std::string_view::npos) {
    cv::Mat m = cv::imread(std::string(ref), cv::IMREAD_COLOR);
    if (m.empty()) throw Error("cannot decode image " + std::string(ref));
    return from_mat(m);
  }
  const std::string source(ref.substr(0, hash));
  long long frame = 0;
  const auto tail = ref.substr(hash + 1);
  if (std::from_chars(tail.data(), tail.data() + tail.size(), frame).ec != std::errc()) {
    throw ParseError("bad frame index in " + std::string(ref));
  }
  namespace fs = std::filesystem;
  if (fs::is_directory(source)) {
    char name[32];
    for (const char* ext : {"png", "jpg", "jpeg"}) {
      std::snprintf(name, sizeof(name), "%06lld.%s", frame, ext);
      const auto candidate = fs::path(source) / name;
      if (fs::exists(candidate)) return decode_with_opencv(candidate.string());
    }
    throw Error("no frame file for " + std::string(ref));
  }
  cv::VideoCapture cap(source);
  if (!cap.isOpened()) throw Error("cannot open video " + source);
  cap.set(cv::CAP_PROP_POS_FRAMES, static_cast<double>(frame));
  cv::Mat m;
  if (!cap.read(m) || m.empty()) throw Error("cannot read frame " + std::string(ref));
  return from_mat(m);
}
#endif

}  // namespace

Image read_pnm(std::string_view path) {
  std::ifstream in{std::string(path), std::ios::binary};
  if (!in) throw Error("cannot open " + std::string(path));
  const auto magic = next_pnm_token(in);
  if (magic != "P6" && magic != "P5") throw ParseError(std::string(path) + ": unsupported PNM type " + magic);
  const int channels = magic == "P6" ? 3 : 1;
  const int w = std::stoi(next_pnm_token(in));
  const int h = std::stoi(next_pnm_token(in));
  const int maxval = std::stoi(next_pnm_token(in));
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) throw ParseError(std::string(path) + ": bad PNM header");
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * channels);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw ParseError(std::string(path) + ": truncated PNM data");
  Image img{w, h, 3, std::vector<float>(static_cast<std::size_t>(w) * h * 3)};
  for (std::size_t i = 0; i < static_cast<std::size_t>(w) * h; ++i) {
    for (int c = 0; c < 3; ++c) {
      img.pixels[i * 3 + c] = raw[i * channels + (channels == 3 ? c : 0)] / static_cast<float>(maxval);
    }
  }
  return img;
}

void write_ppm(const Image& img, std::string_view path) {
  std::ostringstream out;
  out << "P6\n" << img.width << " " << img.height << "\n255\n";
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const float v = img.at(y, x, img.channels == 3 ? c : 0);
        out.put(static_cast<char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)));
      }
    }
  }
  write_file_atomic(std::string(path), out.str());
}

Image DefaultFrameDecoder::decode(std::string_view ref) const {
  if (ref.starts_with("synth:")) return render_synth(parse_synth_ref(ref));
  if (ref.ends_with(".ppm") || ref.ends_with(".pgm")) return read_pnm(ref);
#ifdef SURGLINE_HAVE_OPENCV
  return decode_with_opencv(ref);
#else
  throw Error("no decoder for '" + std::string(ref) + "' (built without OpenCV)");
#endif
}

Image resize_bilinear(const Image& img, int width, int height) {
  if (img.width == width && img.height == height) return img;
  Image out{width, height, img.channels,
            std::vector<float>(static_cast<std::size_t>(width) * height * img.channels)};
  const double sx = static_cast<double>(img.width) / width;
  const double sy = static_cast<double>(img.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, img.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, img.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < img.channels; ++c) {
        const double top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
        const double bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
        out.at(y, x, c) = static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return out;
}

Image center_crop(const Image& img, int width, int height) {
  if (width > img.width || height > img.height) throw ValidationError("crop larger than image");
  const int ox = (img.width - width) / 2;
  const int oy = (img.height - height) / 2;
  Image out{width, height, img.channels,
            std::vector<float>(static_cast<std::size_t>(width) * height * img.channels)};
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(y + oy, x + ox, c);
  return out;
}

}  // namespace surgline

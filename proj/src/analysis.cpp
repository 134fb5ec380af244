#include "intrack/analysis.hpp"

#include "intrack/binary_io.hpp"
#include "intrack/trainer.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace intrack {

namespace {

void require_pair(std::size_t a, std::size_t b, const char* what) {
  if (a != b)
    throw std::invalid_argument(std::string(what) + ": length mismatch " + std::to_string(a) + " vs " + std::to_string(b));
  if (a < 2) throw std::invalid_argument(std::string(what) + " needs at least two trials");
}

}  // namespace

std::vector<DecisionRecord> make_decision_records(const std::vector<bool>& decisions, const std::vector<bool>& labels) {
  if (decisions.size() != labels.size()) throw std::invalid_argument("decision records: length mismatch");
  std::vector<DecisionRecord> out;
  for (std::size_t i = 0; i < decisions.size(); ++i) out.push_back({i, decisions[i], labels[i], decisions[i] == labels[i]});
  return out;
}

std::optional<double> pearson_decisions(const std::vector<bool>& a, const std::vector<bool>& b) {
  require_pair(a.size(), b.size(), "pearson_decisions");
  std::int64_t sa = 0, sb = 0, sab = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i];
    sb += b[i];
    sab += a[i] && b[i];
  }
  // For {0,1} data sum(x^2) = sum(x).
  const auto n = static_cast<std::int64_t>(a.size());
  const std::int64_t va = n * sa - sa * sa;
  const std::int64_t vb = n * sb - sb * sb;
  if (va == 0 || vb == 0) return std::nullopt;
  return static_cast<double>(n * sab - sa * sb) / std::sqrt(static_cast<double>(va) * static_cast<double>(vb));
}

std::optional<double> error_consistency(const std::vector<bool>& a_correct, const std::vector<bool>& b_correct) {
  require_pair(a_correct.size(), b_correct.size(), "error_consistency");
  const double n = static_cast<double>(a_correct.size());
  std::size_t agree = 0, ca = 0, cb = 0;
  for (std::size_t i = 0; i < a_correct.size(); ++i) {
    agree += a_correct[i] == b_correct[i];
    ca += a_correct[i];
    cb += b_correct[i];
  }
  const double pa = static_cast<double>(ca) / n, pb = static_cast<double>(cb) / n;
  const double expected = pa * pb + (1 - pa) * (1 - pb);
  if (expected == 1.0) return std::nullopt;
  return (static_cast<double>(agree) / n - expected) / (1 - expected);
}

double binomial_upper_tail(std::size_t successes, std::size_t trials, double p) {
  if (successes > trials) return 0.0;
  if (successes == 0) return 1.0;
  if (p <= 0) return 0.0;
  if (p >= 1) return 1.0;
  const double n = static_cast<double>(trials);
  std::vector<double> logs;
  for (std::size_t i = successes; i <= trials; ++i) {
    const double k = static_cast<double>(i);
    logs.push_back(std::lgamma(n + 1) - std::lgamma(k + 1) - std::lgamma(n - k + 1) + k * std::log(p) +
                   (n - k) * std::log1p(-p));
  }
  const double top = *std::max_element(logs.begin(), logs.end());
  double sum = 0;
  for (double l : logs) sum += std::exp(l - top);
  return std::min(1.0, std::exp(top + std::log(sum)));
}

// ---- attention ----

std::size_t AttentionMask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

AttentionMask binarize_attention(const Tensor<float>& attention, double k) {
  if (attention.rank() != 3) throw DimensionError("binarize_attention expects C x H x W, got " + to_string(attention.shape()));
  const Index channels = attention.dim(0), height = attention.dim(1), width = attention.dim(2);
  const Index plane = height * width;
  std::vector<double> map(static_cast<std::size_t>(plane), 0.0);
  for (Index c = 0; c < channels; ++c)
    for (Index i = 0; i < plane; ++i) map[static_cast<std::size_t>(i)] += attention[c * plane + i];
  for (double& v : map) v /= static_cast<double>(channels);
  const double mean = std::accumulate(map.begin(), map.end(), 0.0) / static_cast<double>(plane);
  double var = 0;
  for (double v : map) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(plane));

  AttentionMask m;
  m.height = static_cast<int>(height);
  m.width = static_cast<int>(width);
  m.k = k;
  m.threshold = mean + k * sd;
  for (double v : map) m.bits.push_back(v > m.threshold ? 1 : 0);
  return m;
}

Tensor<float> batch_item(const Tensor<float>& batched, Index b) {
  if (batched.rank() != 4) throw DimensionError("batch_item expects B x C x H x W, got " + to_string(batched.shape()));
  const Index n = batched.dim(1) * batched.dim(2) * batched.dim(3);
  return Tensor<float>({batched.dim(1), batched.dim(2), batched.dim(3)}, batched.array().segment(b * n, n));
}

std::vector<std::vector<AttentionMask>> attention_masks(const Model<float>& model, const Dataset& data,
                                                        const std::vector<std::size_t>& indices, double k,
                                                        int batch_size) {
  if (model.arch.kind != ModelKind::kInT) throw std::invalid_argument("attention masks need an InT model");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
  const Bound<float> params = bind(model, static_cast<Tape<float>*>(nullptr));
  std::vector<std::vector<AttentionMask>> out;
  for (std::size_t start = 0; start < indices.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(indices.size(), start + static_cast<std::size_t>(batch_size));
    const std::vector<std::size_t> chunk(indices.begin() + static_cast<long>(start), indices.begin() + static_cast<long>(end));
    const Batch batch = assemble_batch(data, chunk);
    const Forward<float> f = forward(model, params, std::span<const Var<float>>(batch.frames), true);
    for (std::size_t b = 0; b < chunk.size(); ++b) {
      std::vector<AttentionMask> clip;
      for (const auto& logits : f.attention_logits)
        clip.push_back(binarize_attention(batch_item(logits.value(), static_cast<Index>(b)), k));
      out.push_back(std::move(clip));
    }
  }
  return out;
}

std::vector<PixelPos> target_pixels(const VideoSample& sample) {
  std::vector<PixelPos> out;
  const int last = sample.frames.size - 1;
  for (const Point& p : sample.trajectories.at(static_cast<std::size_t>(sample.target_index)).positions)
    out.push_back({std::clamp(static_cast<int>(std::lround(p.x)), 0, last),
                   std::clamp(static_cast<int>(std::lround(p.y)), 0, last)});
  return out;
}

SelectivityResult attention_selectivity(const std::vector<std::vector<AttentionMask>>& masks,
                                        const std::vector<std::vector<PixelPos>>& targets, int permutations,
                                        std::uint64_t seed) {
  if (masks.size() != targets.size()) throw std::invalid_argument("attention_selectivity: clip count mismatch");
  if (masks.size() < 2) throw std::invalid_argument("attention_selectivity needs at least two clips");
  if (permutations < 2) throw std::invalid_argument("attention_selectivity needs at least two permutations");
  for (std::size_t i = 0; i < masks.size(); ++i)
    if (masks[i].size() != targets[i].size()) throw std::invalid_argument("attention_selectivity: frame count mismatch");

  auto hit_rate = [&](const std::vector<std::size_t>& track_of) {
    std::size_t hits = 0, frames = 0;
    for (std::size_t i = 0; i < masks.size(); ++i) {
      const auto& track = targets[track_of[i]];
      const std::size_t len = std::min(masks[i].size(), track.size());
      for (std::size_t t = 1; t < len; ++t) {
        const PixelPos p = track[t - 1];
        hits += masks[i][t].at(p.y, p.x);
        ++frames;
      }
    }
    return std::pair{hits, frames};
  };

  std::vector<std::size_t> identity(masks.size());
  std::iota(identity.begin(), identity.end(), std::size_t{0});
  SelectivityResult r;
  const auto [hits, frames] = hit_rate(identity);
  r.frames = frames;
  r.observed_rate = frames ? static_cast<double>(hits) / static_cast<double>(frames) : 0.0;

  std::vector<double> rates;
  Rng rng(mix_seed(seed, 0x5E1EC7ULL));
  for (int p = 0; p < permutations; ++p) {
    std::vector<std::size_t> perm = identity;
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i - 1)))]);
    const auto [h, f] = hit_rate(perm);
    rates.push_back(f ? static_cast<double>(h) / static_cast<double>(f) : 0.0);
  }
  r.control_mean = std::accumulate(rates.begin(), rates.end(), 0.0) / static_cast<double>(rates.size());
  double var = 0;
  for (double v : rates) var += (v - r.control_mean) * (v - r.control_mean);
  r.control_sd = std::sqrt(var / static_cast<double>(rates.size() - 1));
  const double excess = r.observed_rate - r.control_mean;
  r.z = r.control_sd > 0 ? excess / r.control_sd : (excess > 0 ? INFINITY : 0.0);
  return r;
}

// ---- animation ----

RgbImage composite_frame(const Video& video, int t, const AttentionMask* mask, int scale) {
  if (t < 0 || t >= video.frames) throw std::out_of_range("frame " + std::to_string(t) + " out of range");
  if (scale < 1) throw std::invalid_argument("scale must be >= 1");
  if (mask && (mask->height != video.size || mask->width != video.size))
    throw std::invalid_argument("mask size does not match the video");
  RgbImage img{video.size * scale, video.size * scale, {}};
  img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (int row = 0; row < video.size; ++row)
    for (int col = 0; col < video.size; ++col) {
      std::uint8_t px[3];
      const bool masked = mask && mask->at(row, col);
      for (int c = 0; c < 3; ++c) {
        const std::uint8_t v = video.at(t, c, row, col) ? 255 : 0;
        px[c] = masked ? static_cast<std::uint8_t>(v / 2 + 64) : v;
      }
      for (int dy = 0; dy < scale; ++dy)
        for (int dx = 0; dx < scale; ++dx) std::copy_n(px, 3, img.pixel(row * scale + dy, col * scale + dx));
    }
  return img;
}

AttentionMask mask_from_image(const RgbImage& image, int scale) {
  if (scale < 1 || image.width % scale != 0 || image.height % scale != 0)
    throw std::invalid_argument("image size is not a multiple of the scale");
  AttentionMask m;
  m.height = image.height / scale;
  m.width = image.width / scale;
  for (int row = 0; row < m.height; ++row)
    for (int col = 0; col < m.width; ++col) {
      const std::uint8_t v = image.pixel(row * scale, col * scale)[0];
      m.bits.push_back(v != 0 && v != 255 ? 1 : 0);
    }
  return m;
}

void write_png(const std::string& path, const RgbImage& image) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&png, path.c_str(), 0, image.rgb.data(), 0, nullptr))
    throw std::runtime_error("cannot write " + path + ": " + png.message);
}

RgbImage read_png(const std::string& path) {
  png_image png{};
  png.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&png, path.c_str())) throw std::runtime_error("cannot read " + path + ": " + png.message);
  png.format = PNG_FORMAT_RGB;
  RgbImage img{static_cast<int>(png.width), static_cast<int>(png.height), {}};
  img.rgb.resize(PNG_IMAGE_SIZE(png));
  if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr))
    throw std::runtime_error("cannot decode " + path + ": " + png.message);
  return img;
}

namespace {

class BitPacker {
 public:
  void put(unsigned code, int bits) {
    acc_ |= static_cast<std::uint32_t>(code) << nbits_;
    nbits_ += bits;
    while (nbits_ >= 8) {
      bytes_.push_back(static_cast<std::uint8_t>(acc_ & 0xFF));
      acc_ >>= 8;
      nbits_ -= 8;
    }
  }
  std::vector<std::uint8_t> finish() {
    if (nbits_ > 0) bytes_.push_back(static_cast<std::uint8_t>(acc_ & 0xFF));
    acc_ = 0;
    nbits_ = 0;
    return std::move(bytes_);
  }

 private:
  std::uint32_t acc_ = 0;
  int nbits_ = 0;
  std::vector<std::uint8_t> bytes_;
};

std::vector<std::uint8_t> lzw_encode(const std::vector<std::uint8_t>& indices, int min_code_size) {
  const unsigned clear = 1u << min_code_size, end = clear + 1;
  BitPacker out;
  std::unordered_map<std::uint32_t, unsigned> table;
  int code_size = min_code_size + 1;
  unsigned next = end + 1;
  out.put(clear, code_size);
  if (indices.empty()) {
    out.put(end, code_size);
    return out.finish();
  }
  unsigned prefix = indices[0];
  for (std::size_t i = 1; i < indices.size(); ++i) {
    const std::uint8_t k = indices[i];
    const std::uint32_t key = (prefix << 8) | k;
    if (auto it = table.find(key); it != table.end()) {
      prefix = it->second;
      continue;
    }
    out.put(prefix, code_size);
    if (next < 4096) {
      table.emplace(key, next);
      if (next == (1u << code_size) && code_size < 12) ++code_size;
      ++next;
    } else {
      out.put(clear, code_size);
      table.clear();
      code_size = min_code_size + 1;
      next = end + 1;
    }
    prefix = k;
  }
  out.put(prefix, code_size);
  out.put(end, code_size);
  return out.finish();
}

void put_u16(std::vector<std::uint8_t>& b, unsigned v) {
  b.push_back(static_cast<std::uint8_t>(v & 0xFF));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
}

}  // namespace

void write_gif(const std::string& path, const std::vector<RgbImage>& frames, int delay_cs) {
  if (frames.empty()) throw std::invalid_argument("write_gif needs at least one frame");
  const int width = frames[0].width, height = frames[0].height;
  std::vector<std::uint32_t> palette;
  std::unordered_map<std::uint32_t, std::uint8_t> lookup;
  for (const auto& f : frames) {
    if (f.width != width || f.height != height) throw std::invalid_argument("write_gif frames differ in size");
    for (std::size_t i = 0; i < f.rgb.size(); i += 3) {
      const std::uint32_t c = (f.rgb[i] << 16) | (f.rgb[i + 1] << 8) | f.rgb[i + 2];
      if (lookup.count(c)) continue;
      if (palette.size() == 256) throw std::invalid_argument("write_gif supports at most 256 colors");
      lookup.emplace(c, static_cast<std::uint8_t>(palette.size()));
      palette.push_back(c);
    }
  }
  int depth = 1;
  while ((1u << depth) < palette.size()) ++depth;
  const int min_code_size = std::max(2, depth);

  std::vector<std::uint8_t> b = {'G', 'I', 'F', '8', '9', 'a'};
  put_u16(b, static_cast<unsigned>(width));
  put_u16(b, static_cast<unsigned>(height));
  b.push_back(static_cast<std::uint8_t>(0x80 | ((depth - 1) << 4) | (depth - 1)));
  b.push_back(0);
  b.push_back(0);
  for (unsigned i = 0; i < (1u << depth); ++i) {
    const std::uint32_t c = i < palette.size() ? palette[i] : 0;
    b.push_back(static_cast<std::uint8_t>(c >> 16));
    b.push_back(static_cast<std::uint8_t>(c >> 8));
    b.push_back(static_cast<std::uint8_t>(c));
  }
  // Loop forever.
  const std::uint8_t netscape[] = {0x21, 0xFF, 0x0B, 'N', 'E', 'T', 'S', 'C', 'A', 'P', 'E', '2', '.', '0', 0x03, 0x01, 0x00, 0x00, 0x00};
  b.insert(b.end(), std::begin(netscape), std::end(netscape));

  for (const auto& f : frames) {
    b.insert(b.end(), {0x21, 0xF9, 0x04, 0x00});
    put_u16(b, static_cast<unsigned>(delay_cs));
    b.insert(b.end(), {0x00, 0x00});
    b.push_back(0x2C);
    put_u16(b, 0);
    put_u16(b, 0);
    put_u16(b, static_cast<unsigned>(width));
    put_u16(b, static_cast<unsigned>(height));
    b.push_back(0);
    std::vector<std::uint8_t> indices;
    indices.reserve(f.rgb.size() / 3);
    for (std::size_t i = 0; i < f.rgb.size(); i += 3)
      indices.push_back(lookup.at((f.rgb[i] << 16) | (f.rgb[i + 1] << 8) | f.rgb[i + 2]));
    const auto data = lzw_encode(indices, min_code_size);
    b.push_back(static_cast<std::uint8_t>(min_code_size));
    for (std::size_t i = 0; i < data.size(); i += 255) {
      const std::size_t n = std::min<std::size_t>(255, data.size() - i);
      b.push_back(static_cast<std::uint8_t>(n));
      b.insert(b.end(), data.begin() + static_cast<long>(i), data.begin() + static_cast<long>(i + n));
    }
    b.push_back(0);
  }
  b.push_back(0x3B);
  write_file(path, b);
}

AnimationFiles export_animation(const Video& video, const std::vector<AttentionMask>& masks, const std::string& dir,
                                const std::string& stem, int scale) {
  if (!masks.empty() && static_cast<int>(masks.size()) != video.frames)
    throw std::invalid_argument("export_animation: " + std::to_string(masks.size()) + " masks for " +
                                std::to_string(video.frames) + " frames");
  std::filesystem::create_directories(dir);
  AnimationFiles files;
  std::vector<RgbImage> frames;
  for (int t = 0; t < video.frames; ++t) {
    frames.push_back(composite_frame(video, t, masks.empty() ? nullptr : &masks[static_cast<std::size_t>(t)], scale));
    char name[32];
    std::snprintf(name, sizeof name, "_t%02d.png", t);
    files.stills.push_back((std::filesystem::path(dir) / (stem + name)).string());
    write_png(files.stills.back(), frames.back());
  }
  files.animation = (std::filesystem::path(dir) / (stem + ".gif")).string();
  write_gif(files.animation, frames);
  return files;
}

// ---- crossings ----

ExponentialFit fit_exponential(const std::vector<double>& frames, const std::vector<double>& means) {
  if (frames.size() != means.size()) throw std::invalid_argument("fit_exponential: length mismatch");
  ExponentialFit fit;
  if (frames.size() < 2) {
    fit.reason = "fewer than two lengths";
    return fit;
  }
  for (double m : means)
    if (!(m > 0)) {
      fit.reason = "zero mean crossing count";
      return fit;
    }
  const double n = static_cast<double>(frames.size());
  const double mx = std::accumulate(frames.begin(), frames.end(), 0.0) / n;
  double my = 0;
  for (double m : means) my += std::log(m);
  my /= n;
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    sxy += (frames[i] - mx) * (std::log(means[i]) - my);
    sxx += (frames[i] - mx) * (frames[i] - mx);
  }
  if (sxx == 0) {
    fit.reason = "all lengths equal";
    return fit;
  }
  fit.b = sxy / sxx;
  fit.a = std::exp(my - fit.b * mx);
  fit.fitted = true;
  return fit;
}

CrossingCell measure_crossings(const GenConfig& config, std::size_t count) {
  config.validate();
  CrossingCell cell{config.num_distractors, config.num_frames, 0.0, count};
  if (count == 0) return cell;
  // Negatives need a goal-reaching distractor, so D = 0 draws positives only.
  const bool balanced = config.num_distractors > 0;
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < count; ++i) {
    const bool label = !balanced || i % 2 == 0;
    total += static_cast<std::uint64_t>(synthesize_sample(mix_seed(config.master_seed, i), config, label).crossing_count);
  }
  cell.mean = static_cast<double>(total) / static_cast<double>(count);
  return cell;
}

CrossingCell crossing_cell(const Dataset& data) {
  CrossingCell cell{data.config().num_distractors, data.config().num_frames, 0.0, data.size()};
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < data.size(); ++i) total += data.record(i).crossing_count;
  if (data.size()) cell.mean = static_cast<double>(total) / static_cast<double>(data.size());
  return cell;
}

CrossingReport crossing_report(std::vector<CrossingCell> cells) {
  std::sort(cells.begin(), cells.end(), [](const CrossingCell& a, const CrossingCell& b) {
    return std::tie(a.distractors, a.frames) < std::tie(b.distractors, b.frames);
  });
  CrossingReport report;
  std::map<int, std::pair<std::vector<double>, std::vector<double>>> series;
  for (const auto& c : cells) {
    series[c.distractors].first.push_back(c.frames);
    series[c.distractors].second.push_back(c.mean);
  }
  for (const auto& [d, s] : series) report.fits[d] = fit_exponential(s.first, s.second);
  report.cells = std::move(cells);
  return report;
}

// ---- CSV ----

namespace {

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string format_optional(const std::optional<double>& v) { return v ? format_number(*v) : "undefined"; }

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) out.push_back(field);
  return out;
}

bool parse_bit(const std::string& s) {
  if (s == "1" || s == "true") return true;
  if (s == "0" || s == "false") return false;
  throw std::invalid_argument("expected 0 or 1, got '" + s + "'");
}

}  // namespace

std::string decisions_csv(const std::vector<DecisionRecord>& records) {
  std::string out = "trial_id,decision,label,correct\n";
  for (const auto& r : records)
    out += std::to_string(r.trial_id) + "," + (r.decision ? "1" : "0") + "," + (r.label ? "1" : "0") + "," +
           (r.correct ? "1" : "0") + "\n";
  return out;
}

std::vector<DecisionRecord> parse_decisions_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("trial_id,decision,label,correct", 0) != 0)
    throw std::invalid_argument("decisions CSV must start with 'trial_id,decision,label,correct'");
  std::vector<DecisionRecord> out;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 4) throw std::invalid_argument("decisions CSV row needs 4 fields: '" + line + "'");
    DecisionRecord r{std::stoull(f[0]), parse_bit(f[1]), parse_bit(f[2]), parse_bit(f[3])};
    if (r.correct != (r.decision == r.label)) throw std::invalid_argument("inconsistent correct flag in row '" + line + "'");
    out.push_back(r);
  }
  return out;
}

std::string consistency_csv(const std::vector<ConsistencyRow>& rows) {
  std::string out = "pair_id,rho,kappa,n\n";
  for (const auto& r : rows) out += r.pair_id + "," + format_optional(r.rho) + "," + format_optional(r.kappa) + "," + std::to_string(r.n) + "\n";
  return out;
}

std::string crossings_csv(const CrossingReport& report) {
  std::string out = "distractors,frames,mean,fit_a,fit_b\n";
  for (const auto& c : report.cells) {
    const auto it = report.fits.find(c.distractors);
    const bool fitted = it != report.fits.end() && it->second.fitted;
    out += std::to_string(c.distractors) + "," + std::to_string(c.frames) + "," + format_number(c.mean) + "," +
           (fitted ? format_number(it->second.a) : "undefined") + "," + (fitted ? format_number(it->second.b) : "undefined") + "\n";
  }
  return out;
}

}  // namespace intrack

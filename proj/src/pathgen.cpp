#include "intrack/pathgen.hpp"

#include "intrack/binary_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <numbers>
#include <thread>

namespace intrack {

namespace {

constexpr int kSteeringBudget = 1000;
constexpr char kMagic[4] = {'P', 'T', 'R', 'K'};

double wrap_angle(double a) {
  a = std::fmod(a + std::numbers::pi, 2.0 * std::numbers::pi);
  if (a < 0) a += 2.0 * std::numbers::pi;
  return a - std::numbers::pi;
}

bool inside(double x, double y, double lo, double hi) { return x >= lo && x <= hi && y >= lo && y <= hi; }

// Turn that keeps the dot off the walls for the next `horizon` steps, or
// `turn` itself when straight-line motion stays inside.
double steer_from_walls(double x, double y, double heading, double turn, double speed, int horizon, double lo,
                        double hi, double turn_max) {
  const double h = heading + turn;
  for (int k = 1; k <= horizon; ++k) {
    if (!inside(x + k * speed * std::cos(h), y + k * speed * std::sin(h), lo + 0.5, hi - 0.5)) {
      const double cx = 0.5 * (lo + hi) - x, cy = 0.5 * (lo + hi) - y;
      const double cross = std::cos(heading) * cy - std::sin(heading) * cx;
      return cross >= 0 ? turn_max : -turn_max;
    }
  }
  return turn;
}

unsigned resolve_threads(unsigned requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("INTRACK_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

void put_config(ByteWriter& w, const GenConfig& c) {
  w.put(static_cast<std::uint32_t>(c.image_size));
  w.put(static_cast<std::uint32_t>(c.num_frames));
  w.put(static_cast<std::uint32_t>(c.num_distractors));
  w.put(c.max_step);
  w.put(c.max_turn);
  w.put(c.dot_radius);
  w.put(static_cast<std::uint32_t>(c.marker_half_width));
  w.put(c.min_marker_separation);
  w.put(c.positive_fraction);
  w.put(c.master_seed);
}

GenConfig get_config(ByteReader& r) {
  GenConfig c;
  c.image_size = static_cast<int>(r.get<std::uint32_t>());
  c.num_frames = static_cast<int>(r.get<std::uint32_t>());
  c.num_distractors = static_cast<int>(r.get<std::uint32_t>());
  c.max_step = r.get<float>();
  c.max_turn = r.get<float>();
  c.dot_radius = r.get<float>();
  c.marker_half_width = static_cast<int>(r.get<std::uint32_t>());
  c.min_marker_separation = r.get<float>();
  c.positive_fraction = r.get<float>();
  c.master_seed = r.get<std::uint64_t>();
  return c;
}

std::size_t frame_bits(const GenConfig& c) {
  return static_cast<std::size_t>(c.num_frames) * 3 * c.image_size * c.image_size;
}

std::size_t record_size(const GenConfig& c) {
  const std::size_t coords = static_cast<std::size_t>(c.num_distractors + 1) * c.num_frames * 2 * sizeof(float);
  return sizeof(std::uint64_t) + 1 + sizeof(std::uint32_t) + coords + (frame_bits(c) + 7) / 8;
}

std::size_t header_size() {
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put(kDatasetVersion);
  put_config(w, GenConfig{});
  w.put(std::uint64_t{0});
  return w.size();
}

}  // namespace

// ---- configuration ----

void GenConfig::validate() const {
  if (image_size < 16) throw ConfigError("image_size must be >= 16");
  if (num_frames < 2) throw ConfigError("num_frames must be >= 2");
  if (num_distractors < 0) throw ConfigError("num_distractors must be >= 0");
  if (!(max_step > 0)) throw ConfigError("max_step must be > 0");
  if (!(max_turn > 0 && max_turn < 180)) throw ConfigError("max_turn must lie in (0, 180)");
  if (!(dot_radius > 0)) throw ConfigError("dot_radius must be > 0");
  if (marker_half_width < 0 || 2 * marker_half_width + 1 > image_size) throw ConfigError("marker does not fit the canvas");
  if (marker_half_width < dot_radius) throw ConfigError("marker_half_width must be >= dot_radius so a dot can start on the marker");
  if (!(positive_fraction >= 0 && positive_fraction <= 1)) throw ConfigError("positive_fraction must lie in [0, 1]");
  if (min_marker_separation < 0) throw ConfigError("min_marker_separation must be >= 0");
}

float GenConfig::max_marker_separation() const {
  const float span = static_cast<float>(image_size - 1 - 2 * marker_half_width);
  const float diagonal = span * std::numbers::sqrt2_v<float>;
  const float reach = 0.8f * static_cast<float>(std::max(num_frames - 1, 0)) * 0.5f * max_step;
  return std::min(diagonal, reach);
}

// ---- random numbers ----

std::uint64_t Rng::next() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

double Rng::uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int Rng::uniform_int(int lo, int hi) {
  const auto span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(next() % span);
}

std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index) {
  Rng a(master);
  const std::uint64_t m = a.next();
  Rng b(m ^ (index * 0xD1B54A32D192ED03ull + 0x8CB92BA72F3D8DD7ull));
  return b.next();
}

// ---- geometry ----

bool in_marker(const Point& p, PixelPos marker, int half_width) {
  return std::abs(p.x - static_cast<float>(marker.x)) <= static_cast<float>(half_width) &&
         std::abs(p.y - static_cast<float>(marker.y)) <= static_cast<float>(half_width);
}

namespace {

// No part of a dot at `p` touches the marker square.
bool clear_of_marker(const Point& p, PixelPos marker, int half_width, float radius) {
  const float margin = static_cast<float>(half_width) + radius + 0.5f;
  return std::abs(p.x - static_cast<float>(marker.x)) > margin || std::abs(p.y - static_cast<float>(marker.y)) > margin;
}

}  // namespace

Trajectory sample_trajectory(Rng& rng, const GenConfig& config, Point start, std::optional<PixelPos> goal,
                             std::optional<PixelPos> avoid_goal) {
  const double lo = config.min_coord(), hi = config.max_coord();
  if (!inside(start.x, start.y, lo, hi)) throw ConfigError("trajectory start lies outside the canvas");
  const int frames = config.num_frames;
  if (frames == 1) return Trajectory{{start}};

  // Strict turn bound with headroom for f32 rounding of stored positions.
  const double turn_max = config.max_turn * (1.0 - 1e-3) * std::numbers::pi / 180.0;
  const double speed_hi = config.max_step * (1.0 - 1e-4);
  const int ramp = (frames + 3) / 4;
  const int wall_horizon = static_cast<int>(std::ceil(0.5 * std::numbers::pi / turn_max)) + 1;

  for (int attempt = 1; attempt <= kSteeringBudget; ++attempt) {
    const double speed = rng.uniform(0.5 * config.max_step, speed_hi);
    double heading = rng.uniform(0.0, 2.0 * std::numbers::pi);
    double x = start.x, y = start.y;
    Trajectory traj;
    traj.positions.reserve(static_cast<std::size_t>(frames));
    traj.positions.push_back(start);
    bool ok = true;
    for (int t = 1; t < frames; ++t) {
      double turn = rng.uniform(-turn_max, turn_max);
      int horizon = wall_horizon;
      if (goal) {
        const double gx = goal->x, gy = goal->y;
        const int steps_left = frames - t;  // including this one
        const double ramp_w = std::clamp(static_cast<double>(t - (frames - 1 - ramp)) / ramp, 0.0, 1.0);
        const double dist = std::hypot(gx - x, gy - y);
        const double pressure = std::clamp((dist / (steps_left * speed) - 0.5) / 0.4, 0.0, 1.0);
        const double w = std::max(ramp_w, pressure);
        const double bearing = wrap_angle(std::atan2(gy - y, gx - x) - heading);
        turn = (1.0 - w) * turn + w * bearing;
        if (w > 0) horizon = std::clamp(static_cast<int>(std::floor(dist / speed)), 1, horizon);
      }
      turn = std::clamp(turn, -turn_max, turn_max);
      turn = steer_from_walls(x, y, heading, turn, speed, horizon, lo, hi, turn_max);
      heading = wrap_angle(heading + turn);
      const Point p{static_cast<float>(x + speed * std::cos(heading)), static_cast<float>(y + speed * std::sin(heading))};
      if (!inside(p.x, p.y, lo, hi)) {
        ok = false;
        break;
      }
      traj.positions.push_back(p);
      x = p.x;
      y = p.y;
    }
    if (!ok) continue;
    const Point& last = traj.positions.back();
    if (goal && !in_marker(last, *goal, config.marker_half_width)) continue;
    if (avoid_goal && !clear_of_marker(last, *avoid_goal, config.marker_half_width, config.dot_radius)) continue;
    return traj;
  }
  throw RejectionExhausted(kSteeringBudget);
}

MarkerPair place_markers(Rng& rng, const GenConfig& config) {
  const int hw = config.marker_half_width;
  const int lo = hw, hi = config.image_size - 1 - hw;
  if (hi < lo) throw ConfigError("canvas too small for markers");
  const double diagonal = (hi - lo) * std::numbers::sqrt2;
  const double max_sep = config.max_marker_separation();
  if (config.min_marker_separation > diagonal)
    throw ConfigError("min_marker_separation exceeds the canvas diagonal");
  if (config.min_marker_separation > max_sep)
    throw ConfigError("min_marker_separation exceeds the reachable distance for " +
                      std::to_string(config.num_frames) + " frames");

  std::vector<PixelPos> candidates;
  for (int guard = 0; guard < 10000; ++guard) {
    const PixelPos start{rng.uniform_int(lo, hi), rng.uniform_int(lo, hi)};
    candidates.clear();
    for (int gy = lo; gy <= hi; ++gy)
      for (int gx = lo; gx <= hi; ++gx) {
        const double d = std::hypot(gx - start.x, gy - start.y);
        if (d >= config.min_marker_separation && d <= max_sep) candidates.push_back({gx, gy});
      }
    if (candidates.empty()) continue;
    const auto pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(candidates.size()) - 1));
    return {start, candidates[pick]};
  }
  throw ConfigError("no feasible marker placement");
}

// ---- rendering ----

void render_frame(const std::vector<Point>& dots, PixelPos start, PixelPos goal, const GenConfig& config, Video& video,
                  int t) {
  const int size = config.image_size;
  const float r = config.dot_radius;
  const float r2 = r * r;
  for (int c = 0; c < 3; ++c)
    for (int row = 0; row < size; ++row)
      for (int col = 0; col < size; ++col) video.at(t, c, row, col) = 0;
  for (const Point& p : dots) {
    const int c0 = std::max(0, static_cast<int>(std::floor(p.x - r)));
    const int c1 = std::min(size - 1, static_cast<int>(std::ceil(p.x + r)));
    const int r0 = std::max(0, static_cast<int>(std::floor(p.y - r)));
    const int r1 = std::min(size - 1, static_cast<int>(std::ceil(p.y + r)));
    for (int row = r0; row <= r1; ++row)
      for (int col = c0; col <= c1; ++col) {
        const float dx = static_cast<float>(col) - p.x, dy = static_cast<float>(row) - p.y;
        if (dx * dx + dy * dy <= r2) video.at(t, 0, row, col) = 1;
      }
  }
  const int hw = config.marker_half_width;
  for (int d = -hw; d <= hw; ++d)
    for (int e = -hw; e <= hw; ++e) {
      video.at(t, 1, start.y + d, start.x + e) = 1;
      video.at(t, 2, goal.y + d, goal.x + e) = 1;
    }
}

Video render_video(const std::vector<Trajectory>& trajectories, PixelPos start, PixelPos goal,
                   const GenConfig& config) {
  Video video(config.num_frames, config.image_size);
  std::vector<Point> dots(trajectories.size());
  for (int t = 0; t < config.num_frames; ++t) {
    for (std::size_t i = 0; i < trajectories.size(); ++i) dots[i] = trajectories[i].positions[static_cast<std::size_t>(t)];
    render_frame(dots, start, goal, config, video, t);
  }
  return video;
}

int count_crossings(const std::vector<Trajectory>& trajectories, int target_index, const GenConfig& config) {
  const auto& target = trajectories.at(static_cast<std::size_t>(target_index)).positions;
  const float limit = 2.0f * config.dot_radius;
  int events = 0;
  for (std::size_t j = 0; j < trajectories.size(); ++j) {
    if (static_cast<int>(j) == target_index) continue;
    const auto& other = trajectories[j].positions;
    if (other.size() != target.size()) throw std::invalid_argument("trajectories differ in length");
    bool overlapping = false;
    for (std::size_t t = 0; t < target.size(); ++t) {
      const bool now = std::hypot(target[t].x - other[t].x, target[t].y - other[t].y) <= limit;
      if (now && !overlapping) ++events;
      overlapping = now;
    }
  }
  return events;
}

std::optional<std::string> check_trajectory(const Trajectory& trajectory, const GenConfig& config) {
  const auto& p = trajectory.positions;
  const double lo = config.dot_radius, hi = config.image_size - config.dot_radius;
  for (std::size_t t = 0; t < p.size(); ++t) {
    if (!inside(p[t].x, p[t].y, lo, hi)) return "position " + std::to_string(t) + " outside the canvas";
    if (t == 0) continue;
    const double dx = p[t].x - p[t - 1].x, dy = p[t].y - p[t - 1].y;
    if (std::hypot(dx, dy) > config.max_step) return "step " + std::to_string(t) + " exceeds max_step";
    if (t == 1) continue;
    const double px = p[t - 1].x - p[t - 2].x, py = p[t - 1].y - p[t - 2].y;
    const double turn = std::abs(std::atan2(px * dy - py * dx, px * dx + py * dy)) * 180.0 / std::numbers::pi;
    if (!(turn < config.max_turn)) return "turn at step " + std::to_string(t) + " is " + std::to_string(turn) + " degrees";
  }
  return std::nullopt;
}

// ---- samples ----

VideoSample synthesize_sample(std::uint64_t sample_seed, const GenConfig& config, bool label) {
  config.validate();
  if (!label && config.num_distractors == 0)
    throw ConfigError("a negative sample needs at least one distractor to reach the goal");
  Rng rng(sample_seed);
  VideoSample s;
  s.sample_seed = sample_seed;
  s.label = label;
  s.target_index = 0;
  // Marker pairs are kept only when a start-to-goal path exists, for either
  // label, so the marker layout carries no label information.
  constexpr int kPlacements = 100;
  for (int placement = 1;; ++placement) {
    const MarkerPair markers = place_markers(rng, config);
    const Point start{static_cast<float>(markers.start.x), static_cast<float>(markers.start.y)};
    try {
      Trajectory probe = sample_trajectory(rng, config, start, markers.goal);
      s.start_pos = markers.start;
      s.goal_pos = markers.goal;
      s.trajectories.push_back(label ? std::move(probe)
                                     : sample_trajectory(rng, config, start, std::nullopt, markers.goal));
      break;
    } catch (const RejectionExhausted&) {
      if (placement == kPlacements) throw;
    }
  }

  const double lo = config.min_coord(), hi = config.max_coord();
  const double reach = config.max_marker_separation();
  for (int d = 0; d < config.num_distractors; ++d) {
    if (label || d > 0) {
      const Point p{static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi))};
      s.trajectories.push_back(sample_trajectory(rng, config, p, std::nullopt));
      continue;
    }
    // The designated distractor starts within reach of the goal and ends on it.
    for (int placement = 1;; ++placement) {
      Point p;
      do {
        p = {static_cast<float>(rng.uniform(lo, hi)), static_cast<float>(rng.uniform(lo, hi))};
      } while (std::hypot(p.x - s.goal_pos.x, p.y - s.goal_pos.y) > reach);
      try {
        s.trajectories.push_back(sample_trajectory(rng, config, p, s.goal_pos));
        break;
      } catch (const RejectionExhausted&) {
        if (placement == kPlacements) throw;
      }
    }
  }
  s.frames = render_video(s.trajectories, s.start_pos, s.goal_pos, config);
  s.crossing_count = count_crossings(s.trajectories, s.target_index, config);
  return s;
}

// ---- datasets ----

std::vector<bool> assign_labels(const GenConfig& config, std::uint64_t count) {
  const auto positives = static_cast<std::uint64_t>(std::llround(config.positive_fraction * static_cast<double>(count)));
  std::vector<bool> labels(count, false);
  for (std::uint64_t i = 0; i < positives; ++i) labels[i] = true;
  Rng rng(mix_seed(config.master_seed, ~std::uint64_t{0}));
  for (std::uint64_t i = count; i > 1; --i) {
    const std::uint64_t j = rng.next() % i;
    const bool tmp = labels[i - 1];
    labels[i - 1] = labels[j];
    labels[j] = tmp;
  }
  return labels;
}

std::vector<std::uint8_t> encode_sample(const VideoSample& sample, const GenConfig& config) {
  ByteWriter w;
  w.put(sample.sample_seed);
  w.put(static_cast<std::uint8_t>(sample.label ? 1 : 0));
  w.put(static_cast<std::uint32_t>(sample.crossing_count));
  for (const auto& traj : sample.trajectories)
    for (const auto& p : traj.positions) {
      w.put(p.x);
      w.put(p.y);
    }
  std::vector<std::uint8_t> packed((frame_bits(config) + 7) / 8, 0);
  for (std::size_t i = 0; i < sample.frames.data.size(); ++i)
    if (sample.frames.data[i]) packed[i >> 3] |= static_cast<std::uint8_t>(1u << (i & 7));
  w.put_bytes(packed.data(), packed.size());
  return std::move(w.bytes());
}

std::string dataset_path(const std::string& dir) { return (std::filesystem::path(dir) / "dataset.ptrk").string(); }
std::string manifest_path(const std::string& dir) { return (std::filesystem::path(dir) / "manifest.json").string(); }

std::string gen_config_json(const GenConfig& c) {
  return nlohmann::json{{"image_size", c.image_size},
                        {"num_frames", c.num_frames},
                        {"num_distractors", c.num_distractors},
                        {"max_step", c.max_step},
                        {"max_turn", c.max_turn},
                        {"dot_radius", c.dot_radius},
                        {"marker_half_width", c.marker_half_width},
                        {"min_marker_separation", c.min_marker_separation},
                        {"positive_fraction", c.positive_fraction},
                        {"master_seed", c.master_seed}}
      .dump();
}

GenConfig gen_config_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  GenConfig c;
  c.image_size = j.value("image_size", c.image_size);
  c.num_frames = j.value("num_frames", c.num_frames);
  c.num_distractors = j.value("num_distractors", c.num_distractors);
  c.max_step = j.value("max_step", c.max_step);
  c.max_turn = j.value("max_turn", c.max_turn);
  c.dot_radius = j.value("dot_radius", c.dot_radius);
  c.marker_half_width = j.value("marker_half_width", c.marker_half_width);
  c.min_marker_separation = j.value("min_marker_separation", c.min_marker_separation);
  c.positive_fraction = j.value("positive_fraction", c.positive_fraction);
  c.master_seed = j.value("master_seed", c.master_seed);
  return c;
}

std::string manifest_json(const DatasetManifest& m) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : m.records)
    records.push_back({{"sample_seed", r.sample_seed}, {"label", r.label}, {"crossing_count", r.crossing_count},
                       {"offset", r.offset}});
  return nlohmann::json{{"format", "PTRK"},
                        {"format_version", m.version},
                        {"config", nlohmann::json::parse(gen_config_json(m.config))},
                        {"count", m.count},
                        {"records", records}}
      .dump(1);
}

DatasetManifest build_dataset(const GenConfig& config, std::uint64_t count, const std::string& output_dir,
                              unsigned threads) {
  config.validate();
  std::error_code ec;
  std::filesystem::create_directories(output_dir, ec);
  if (ec) throw std::runtime_error("cannot create '" + output_dir + "': " + ec.message());

  const std::vector<bool> labels = assign_labels(config, count);
  std::vector<std::vector<std::uint8_t>> encoded(count);
  std::vector<int> crossings(count);
  const unsigned workers = static_cast<unsigned>(std::min<std::uint64_t>(resolve_threads(threads), std::max<std::uint64_t>(count, 1)));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](unsigned w) {
    try {
      for (std::uint64_t i = w; i < count; i += workers) {
        const VideoSample s = synthesize_sample(mix_seed(config.master_seed, i), config, labels[i]);
        crossings[i] = s.crossing_count;
        encoded[i] = encode_sample(s, config);
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  DatasetManifest manifest{config, count, {}, kDatasetVersion};
  ByteWriter w;
  w.put_bytes(kMagic, 4);
  w.put(kDatasetVersion);
  put_config(w, config);
  w.put(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    manifest.records.push_back({mix_seed(config.master_seed, i), labels[i], static_cast<std::uint32_t>(crossings[i]), w.size()});
    w.put_bytes(encoded[i].data(), encoded[i].size());
    std::vector<std::uint8_t>().swap(encoded[i]);
  }
  write_file(dataset_path(output_dir), w.bytes());
  const std::string json = manifest_json(manifest);
  write_file(manifest_path(output_dir), std::vector<std::uint8_t>(json.begin(), json.end()));
  return manifest;
}

Dataset Dataset::load(const std::string& dir_or_file) {
  const std::string path = std::filesystem::is_directory(dir_or_file) ? dataset_path(dir_or_file) : dir_or_file;
  try {
    return from_bytes(read_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

Dataset Dataset::from_bytes(std::vector<std::uint8_t> bytes) {
  Dataset ds;
  ds.bytes_ = std::move(bytes);
  ByteReader r(ds.bytes_.data(), ds.bytes_.size());
  char magic[4];
  r.get_bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a PathTracker dataset (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kDatasetVersion) throw FormatError("unsupported dataset version " + std::to_string(version));
  ds.config_ = get_config(r);
  const auto count = r.get<std::uint64_t>();
  const std::size_t rec = record_size(ds.config_);
  if (r.remaining() != count * rec) throw FormatError("payload size does not match the declared sample count");
  ds.records_.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::size_t off = header_size() + i * rec;
    r.seek(off);
    SampleRecord sr;
    sr.sample_seed = r.get<std::uint64_t>();
    sr.label = r.get<std::uint8_t>() != 0;
    sr.crossing_count = r.get<std::uint32_t>();
    sr.offset = off;
    ds.records_.push_back(sr);
  }
  return ds;
}

void Dataset::frames_into(std::size_t i, float* out) const {
  const std::size_t coords =
      static_cast<std::size_t>(config_.num_distractors + 1) * config_.num_frames * 2 * sizeof(float);
  const std::uint8_t* packed = bytes_.data() + records_.at(i).offset + 13 + coords;
  const std::size_t bits = frame_bits(config_);
  for (std::size_t k = 0; k < bits; ++k) out[k] = static_cast<float>((packed[k >> 3] >> (k & 7)) & 1u);
}

VideoSample Dataset::sample(std::size_t i) const {
  const SampleRecord& rec = records_.at(i);
  ByteReader r(bytes_.data(), bytes_.size());
  r.seek(rec.offset + 13);
  VideoSample s;
  s.sample_seed = rec.sample_seed;
  s.label = rec.label;
  s.crossing_count = static_cast<int>(rec.crossing_count);
  s.target_index = 0;
  s.trajectories.resize(static_cast<std::size_t>(config_.num_distractors + 1));
  for (auto& traj : s.trajectories) {
    traj.positions.resize(static_cast<std::size_t>(config_.num_frames));
    for (auto& p : traj.positions) {
      p.x = r.get<float>();
      p.y = r.get<float>();
    }
  }
  s.frames = Video(config_.num_frames, config_.image_size);
  const std::size_t bits = frame_bits(config_);
  std::vector<std::uint8_t> packed((bits + 7) / 8);
  r.get_bytes(packed.data(), packed.size());
  for (std::size_t k = 0; k < bits; ++k) s.frames.data[k] = (packed[k >> 3] >> (k & 7)) & 1u;

  // Markers are the centers of the 5x5 squares in channels 1 and 2 of frame 0.
  auto center = [&](int channel) {
    const int n = config_.image_size;
    for (int row = 0; row < n; ++row)
      for (int col = 0; col < n; ++col)
        if (s.frames.at(0, channel, row, col))
          return PixelPos{col + config_.marker_half_width, row + config_.marker_half_width};
    throw FormatError("sample " + std::to_string(i) + " has an empty marker channel");
  };
  s.start_pos = center(1);
  s.goal_pos = center(2);
  return s;
}

}  // namespace intrack

// PathTracker video synthesis: smooth dot trajectories, channel-coded frames,
// crossing counts and deterministic packed datasets.
#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace intrack {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class RejectionExhausted : public std::runtime_error {
 public:
  explicit RejectionExhausted(int attempts)
      : std::runtime_error("trajectory steering failed after " + std::to_string(attempts) + " attempts"),
        attempts_(attempts) {}
  int attempts() const { return attempts_; }

 private:
  int attempts_;
};

struct GenConfig {
  int image_size = 32;
  int num_frames = 32;
  int num_distractors = 14;
  float max_step = 2.0f;             // pixels per frame
  float max_turn = 20.0f;            // degrees between consecutive displacements
  float dot_radius = 1.0f;
  int marker_half_width = 2;         // 5x5 markers
  float min_marker_separation = 6.0f;
  float positive_fraction = 0.5f;
  std::uint64_t master_seed = 0;

  void validate() const;
  /// Largest start-goal distance; keeps every positive reachable at the slowest speed.
  float max_marker_separation() const;
  /// Containment box for dot centers, [lo, hi] on both axes.
  float min_coord() const { return dot_radius; }
  float max_coord() const { return static_cast<float>(image_size - 1) - dot_radius; }

  bool operator==(const GenConfig&) const = default;
};

struct Point {
  float x = 0;  // column
  float y = 0;  // row
  bool operator==(const Point&) const = default;
};

struct PixelPos {
  int x = 0;
  int y = 0;
  bool operator==(const PixelPos&) const = default;
};

struct Trajectory {
  std::vector<Point> positions;
};

/// T x 3 x H x W binary frames.
struct Video {
  int frames = 0;
  int size = 0;
  std::vector<std::uint8_t> data;

  Video() = default;
  Video(int t, int s) : frames(t), size(s), data(static_cast<std::size_t>(t) * 3 * s * s, 0) {}
  std::uint8_t& at(int t, int c, int row, int col) { return data[index(t, c, row, col)]; }
  std::uint8_t at(int t, int c, int row, int col) const { return data[index(t, c, row, col)]; }
  std::size_t frame_size() const { return static_cast<std::size_t>(3) * size * size; }
  bool operator==(const Video&) const = default;

 private:
  std::size_t index(int t, int c, int row, int col) const {
    return ((static_cast<std::size_t>(t) * 3 + c) * size + row) * size + col;
  }
};

struct VideoSample {
  Video frames;
  bool label = false;
  int target_index = 0;
  std::vector<Trajectory> trajectories;  // target first, then distractors
  PixelPos start_pos;
  PixelPos goal_pos;
  int crossing_count = 0;
  std::uint64_t sample_seed = 0;
};

/// Counter-based 64-bit generator with platform-independent real draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next();
  double uniform();                          // [0, 1)
  double uniform(double lo, double hi);      // [lo, hi)
  int uniform_int(int lo, int hi);           // inclusive

 private:
  std::uint64_t state_;
};

std::uint64_t mix_seed(std::uint64_t master, std::uint64_t index);

/// True when `p` lies inside the goal marker square.
bool in_marker(const Point& p, PixelPos marker, int half_width);

/// Steered smooth random walk. With `goal` the walk ends inside the goal
/// marker; with `avoid_goal` it ends clear of it.
Trajectory sample_trajectory(Rng& rng, const GenConfig& config, Point start, std::optional<PixelPos> goal,
                             std::optional<PixelPos> avoid_goal = std::nullopt);

struct MarkerPair {
  PixelPos start;
  PixelPos goal;
};

MarkerPair place_markers(Rng& rng, const GenConfig& config);

VideoSample synthesize_sample(std::uint64_t sample_seed, const GenConfig& config, bool label);

/// Renders one 3 x H x W frame into frame `t` of `video`.
void render_frame(const std::vector<Point>& dots, PixelPos start, PixelPos goal, const GenConfig& config, Video& video,
                  int t);
Video render_video(const std::vector<Trajectory>& trajectories, PixelPos start, PixelPos goal,
                   const GenConfig& config);

int count_crossings(const std::vector<Trajectory>& trajectories, int target_index, const GenConfig& config);

/// Checks the step, turn and containment constraints; returns a description of the first violation.
std::optional<std::string> check_trajectory(const Trajectory& trajectory, const GenConfig& config);

// ---- packed datasets ----

inline constexpr std::uint32_t kDatasetVersion = 1;

struct SampleRecord {
  std::uint64_t sample_seed = 0;
  bool label = false;
  std::uint32_t crossing_count = 0;
  std::uint64_t offset = 0;
};

struct DatasetManifest {
  GenConfig config;
  std::uint64_t count = 0;
  std::vector<SampleRecord> records;
  std::uint32_t version = kDatasetVersion;
};

/// Deterministic label for sample `index` of `count` (balanced per positive_fraction).
std::vector<bool> assign_labels(const GenConfig& config, std::uint64_t count);

/// Writes `<dir>/dataset.ptrk` and `<dir>/manifest.json`. `threads` = 0 picks
/// the INTRACK_THREADS environment variable or the hardware concurrency.
DatasetManifest build_dataset(const GenConfig& config, std::uint64_t count, const std::string& output_dir,
                              unsigned threads = 0);

std::string dataset_path(const std::string& dir);
std::string manifest_path(const std::string& dir);

/// In-memory view of a packed dataset.
class Dataset {
 public:
  static Dataset load(const std::string& dir_or_file);
  static Dataset from_bytes(std::vector<std::uint8_t> bytes);

  const GenConfig& config() const { return config_; }
  std::size_t size() const { return records_.size(); }
  const SampleRecord& record(std::size_t i) const { return records_[i]; }
  VideoSample sample(std::size_t i) const;
  bool label(std::size_t i) const { return records_[i].label; }
  /// Unpacks frames of sample `i` as floats in (T, channel, row, col) order into `out`.
  void frames_into(std::size_t i, float* out) const;

 private:
  GenConfig config_;
  std::vector<std::uint8_t> bytes_;
  std::vector<SampleRecord> records_;
};

std::vector<std::uint8_t> encode_sample(const VideoSample& sample, const GenConfig& config);
std::string manifest_json(const DatasetManifest& manifest);
std::string gen_config_json(const GenConfig& config);
GenConfig gen_config_from_json(const std::string& text);

}  // namespace intrack

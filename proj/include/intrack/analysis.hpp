// Decision metrics, attention masks and animations, crossing statistics.
#pragma once

#include "intrack/circuit.hpp"
#include "intrack/pathgen.hpp"
#include "intrack/tensor.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace intrack {

// ---- decisions ----

struct DecisionRecord {
  std::size_t trial_id = 0;
  bool decision = false;
  bool label = false;
  bool correct = false;
};

std::vector<DecisionRecord> make_decision_records(const std::vector<bool>& decisions, const std::vector<bool>& labels);

/// Pearson correlation of two {0,1} decision vectors; nullopt when either is constant.
std::optional<double> pearson_decisions(const std::vector<bool>& a, const std::vector<bool>& b);

/// Cohen's kappa on trial-level correctness; nullopt when expected agreement is 1.
std::optional<double> error_consistency(const std::vector<bool>& a_correct, const std::vector<bool>& b_correct);

/// P(X >= successes) for X ~ Binomial(trials, p).
double binomial_upper_tail(std::size_t successes, std::size_t trials, double p = 0.5);

// ---- attention ----

struct AttentionMask {
  int height = 0;
  int width = 0;
  double threshold = 0;  // on the channel-mean map
  double k = 1;          // standard deviations above the mean
  std::vector<std::uint8_t> bits;

  bool at(int row, int col) const { return bits[static_cast<std::size_t>(row * width + col)] != 0; }
  std::size_t count() const;
};

/// Channel mean of a C x H x W map, thresholded at mean + k * stddev (population) of that mean map.
AttentionMask binarize_attention(const Tensor<float>& attention, double k = 1.0);

/// Slice `b` of a B x C x H x W tensor as C x H x W.
Tensor<float> batch_item(const Tensor<float>& batched, Index b);

/// Per-sample, per-frame masks from the attention logits of an InT.
std::vector<std::vector<AttentionMask>> attention_masks(const Model<float>& model, const Dataset& data,
                                                        const std::vector<std::size_t>& indices, double k = 1.0,
                                                        int batch_size = 32);

struct SelectivityResult {
  std::size_t frames = 0;
  double observed_rate = 0;  // fraction of frames whose mask contains the target pixel
  double control_mean = 0;   // same fraction for uniformly random pixels
  double control_sd = 0;     // across permutations
  double z = 0;
};

/// Nearest pixel of the target dot in every frame.
std::vector<PixelPos> target_pixels(const VideoSample& sample);

/// Mask for frame t is scored against the target's rounded position at frame t-1
/// (the attention at step t is computed from the state after frame t-1); t = 0 is skipped.
SelectivityResult attention_selectivity(const std::vector<std::vector<AttentionMask>>& masks,
                                        const std::vector<std::vector<PixelPos>>& targets, int permutations = 1000,
                                        std::uint64_t seed = 0);

// ---- animation ----

struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  std::uint8_t* pixel(int row, int col) { return rgb.data() + 3 * (static_cast<std::size_t>(row) * width + col); }
  const std::uint8_t* pixel(int row, int col) const {
    return rgb.data() + 3 * (static_cast<std::size_t>(row) * width + col);
  }
  bool operator==(const RgbImage&) const = default;
};

/// Channels map to red (dots), green (start marker) and blue (goal marker). Masked
/// pixels take value/2 + 64, so unmasked pixels stay in {0, 255} and masked ones in {64, 191}.
RgbImage composite_frame(const Video& video, int t, const AttentionMask* mask, int scale = 8);
AttentionMask mask_from_image(const RgbImage& image, int scale = 8);

void write_png(const std::string& path, const RgbImage& image);
RgbImage read_png(const std::string& path);
/// GIF89a with a global palette built from the frames' colors (at most 256) and LZW coding.
void write_gif(const std::string& path, const std::vector<RgbImage>& frames, int delay_cs = 10);

struct AnimationFiles {
  std::string animation;
  std::vector<std::string> stills;
};

/// Writes `<dir>/<stem>.gif` and `<dir>/<stem>_tNN.png`; `masks` is empty or one per frame.
AnimationFiles export_animation(const Video& video, const std::vector<AttentionMask>& masks, const std::string& dir,
                                const std::string& stem, int scale = 8);

// ---- crossings ----

struct CrossingCell {
  int distractors = 0;
  int frames = 0;
  double mean = 0;
  std::size_t samples = 0;
};

struct ExponentialFit {
  bool fitted = false;
  double a = 0;
  double b = 0;
  std::string reason;  // why the fit was skipped
};

/// Least squares on log(mean) = log(a) + b * T.
ExponentialFit fit_exponential(const std::vector<double>& frames, const std::vector<double>& means);

/// Monte-Carlo mean crossing count over `count` fresh samples with balanced labels (positives only when D = 0).
CrossingCell measure_crossings(const GenConfig& config, std::size_t count);
CrossingCell crossing_cell(const Dataset& data);

struct CrossingReport {
  std::vector<CrossingCell> cells;
  std::map<int, ExponentialFit> fits;  // keyed by distractor count
};

CrossingReport crossing_report(std::vector<CrossingCell> cells);

// ---- CSV ----

std::string decisions_csv(const std::vector<DecisionRecord>& records);
std::vector<DecisionRecord> parse_decisions_csv(const std::string& text);

struct ConsistencyRow {
  std::string pair_id;
  std::optional<double> rho;
  std::optional<double> kappa;
  std::size_t n = 0;
};

/// Undefined metrics are written as "undefined".
std::string consistency_csv(const std::vector<ConsistencyRow>& rows);
std::string crossings_csv(const CrossingReport& report);

}  // namespace intrack

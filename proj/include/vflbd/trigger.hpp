#pragma once

// Intensity triggers: a γ-scaled h×w background with a zero-valued diagonal
// cross, split across adversaries (collaborative) or placed per adversary at
// random, plus poison-set selection and VAE sample substitution.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vflbd/dataset.hpp"
#include "vflbd/models.hpp"

namespace vflbd {

enum class TriggerMethod { Collaborative, PerAdversary };
TriggerMethod parse_trigger_method(const std::string& name);
std::string to_string(TriggerMethod m);

struct TriggerSpec {
  std::size_t h = 5;
  std::size_t w = 7;
  double gamma = 20.0;
  std::size_t center_row = 23;  // ℓ, collaborative method only
  std::size_t center_col = 12;
  std::size_t area_budget = 35;  // ε
  TriggerMethod method = TriggerMethod::Collaborative;
  bool clip_to_range = false;
  bool cross = true;

  Rect rectangle() const;  // h×w rectangle centred at ℓ
  void validate(std::size_t image_height, std::size_t image_width) const;
};

// Pixel masks of one h×w trigger patch: background (γ added) and the two
// 1-pixel diagonals (set to 0). Row-major, rows×cols.
struct TriggerPatch {
  std::size_t rows = 0, cols = 0;
  std::vector<std::uint8_t> background;
  std::vector<std::uint8_t> cross;
};
// Background rectangle with two 1-pixel diagonals; rectangles thinner than 3 pixels stay solid.
TriggerPatch make_patch(std::size_t rows, std::size_t cols, bool with_cross = true);

struct AdversaryTriggerShare {
  std::size_t owner = 0;
  Rect slice;                              // owner's slice, image coordinates
  std::vector<std::uint8_t> background;    // slice-sized (rows×cols of the slice)
  std::vector<std::uint8_t> cross;         // slice-sized
  bool randomized = false;                 // per-adversary method: patch relocated per sample
  std::size_t patch_rows = 0, patch_cols = 0;
  bool with_cross = true;

  bool empty() const;
  std::size_t background_area() const;
  std::size_t area() const;  // background + cross pixels
};

// Full-image masks (height×width) of the monolithic trigger at ℓ.
TriggerPatch monolithic_mask(const TriggerSpec& spec, std::size_t height, std::size_t width);

std::map<std::size_t, AdversaryTriggerShare> build_trigger_method1(const TriggerSpec& spec,
                                                                   const PartitionScheme& scheme,
                                                                   const std::vector<std::size_t>& adversaries);

// Per-share (rows, cols) for area h·w/|A|.
std::pair<std::size_t, std::size_t> share_shape(std::size_t total_area, std::size_t adversaries, const Rect& slice);

std::map<std::size_t, AdversaryTriggerShare> build_trigger_method2(const TriggerSpec& spec,
                                                                   const PartitionScheme& scheme,
                                                                   const std::vector<std::size_t>& adversaries);

// Moves a randomized share's patch to a uniform position inside the slice.
AdversaryTriggerShare place_share(const AdversaryTriggerShare& share, std::uint64_t seed);

// x̂ = x̃ + γ·W, cross pixels set to 0; clamp to [0,1] when `clip`.
// `x` holds one slice row (channels × slice rows × slice cols).
void implant(std::span<float> x, const AdversaryTriggerShare& share, double gamma, bool clip = false);

// Writes all shares into a full image row (test-time trigger, no substitution).
void implant_full(std::span<float> image, const ImageShape& shape,
                  const std::map<std::size_t, AdversaryTriggerShare>& shares, double gamma, bool clip,
                  std::uint64_t placement_seed);

struct PoisonPlan {
  double zeta = 0.0;
  std::vector<std::size_t> indices;  // ascending
  std::map<std::size_t, std::vector<std::size_t>> per_adversary;
  std::uint64_t seed = 0;
  std::size_t requested = 0;
  bool shortfall = false;
  bool disabled = false;

  bool contains(std::size_t i) const;
};

PoisonPlan select_poison_set(const std::vector<std::size_t>& consensus, double zeta, std::size_t n,
                             std::uint64_t seed, const std::vector<std::size_t>& adversaries = {});

// Decodes z ~ N(0, I) drawn from `seed`.
std::vector<float> generate_sample(const VaeModel<float>& vae, std::uint64_t seed);

struct PoisonOptions {
  double gamma = 20.0;
  bool swap = true;
  bool clip = false;
};

// Rows of `slices` whose dataset index (batch_indices[r]) is in the plan are
// replaced by implant(generate_sample(...)); returns the number of rows changed.
std::size_t poison_batch(Matrix<float>& slices, std::span<const std::size_t> batch_indices, std::size_t adversary,
                         const PoisonPlan& plan, const AdversaryTriggerShare& share, const VaeModel<float>* vae,
                         const PoisonOptions& opt, std::uint64_t seed);

// Binary PGM (P5): background 255, cross 128, elsewhere 0.
void write_share_pgm(const AdversaryTriggerShare& share, const std::filesystem::path& path);
void write_mask_pgm(const TriggerPatch& mask, const std::filesystem::path& path);

}  // namespace vflbd

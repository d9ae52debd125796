#include "vflbd/trigger.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace vflbd {

TriggerMethod parse_trigger_method(const std::string& name) {
  if (name == "collaborative" || name == "method1") return TriggerMethod::Collaborative;
  if (name == "per-adversary" || name == "method2") return TriggerMethod::PerAdversary;
  fail(ErrorKind::Configuration, "unknown trigger method '" + name + "'");
}

std::string to_string(TriggerMethod m) {
  return m == TriggerMethod::Collaborative ? "collaborative" : "per-adversary";
}

Rect TriggerSpec::rectangle() const {
  require(center_row >= h / 2 && center_col >= w / 2, ErrorKind::Placement, "trigger centre too close to the edge");
  return {center_row - h / 2, center_col - w / 2, h, w};
}

void TriggerSpec::validate(std::size_t image_height, std::size_t image_width) const {
  require(h > 0 && w > 0, ErrorKind::Configuration, "trigger dimensions must be positive");
  require(h * w <= area_budget, ErrorKind::Configuration,
          "trigger area " + std::to_string(h * w) + " exceeds budget " + std::to_string(area_budget));
  require(gamma >= 0.0, ErrorKind::Configuration, "gamma must be non-negative");
  if (method == TriggerMethod::Collaborative) {
    const Rect r = rectangle();
    require(r.row0 + r.rows <= image_height && r.col0 + r.cols <= image_width, ErrorKind::Placement,
            "trigger rectangle leaves the image");
  }
}

TriggerPatch make_patch(std::size_t rows, std::size_t cols, bool with_cross) {
  TriggerPatch p{rows, cols, std::vector<std::uint8_t>(rows * cols, 1), std::vector<std::uint8_t>(rows * cols, 0)};
  if (!with_cross || std::min(rows, cols) < 3) return p;
  auto mark = [&](std::size_t r, std::size_t c) {
    p.cross[r * cols + c] = 1;
    p.background[r * cols + c] = 0;
  };
  const std::size_t lo = std::min(rows, cols), hi = std::max(rows, cols);
  for (std::size_t t = 0; t < hi; ++t) {
    const std::size_t s =
        hi == 1 ? 0 : static_cast<std::size_t>(std::lround(double(t) * double(lo - 1) / double(hi - 1)));
    if (cols >= rows) {
      mark(s, t);
      mark(rows - 1 - s, t);
    } else {
      mark(t, s);
      mark(t, cols - 1 - s);
    }
  }
  return p;
}

bool AdversaryTriggerShare::empty() const { return area() == 0; }

std::size_t AdversaryTriggerShare::background_area() const {
  return static_cast<std::size_t>(std::count(background.begin(), background.end(), 1));
}

std::size_t AdversaryTriggerShare::area() const {
  return background_area() + static_cast<std::size_t>(std::count(cross.begin(), cross.end(), 1));
}

TriggerPatch monolithic_mask(const TriggerSpec& spec, std::size_t height, std::size_t width) {
  spec.validate(height, width);
  const Rect r = spec.rectangle();
  const TriggerPatch patch = make_patch(spec.h, spec.w, spec.cross);
  TriggerPatch full{height, width, std::vector<std::uint8_t>(height * width, 0),
                    std::vector<std::uint8_t>(height * width, 0)};
  for (std::size_t y = 0; y < r.rows; ++y)
    for (std::size_t x = 0; x < r.cols; ++x) {
      full.background[(r.row0 + y) * width + r.col0 + x] = patch.background[y * spec.w + x];
      full.cross[(r.row0 + y) * width + r.col0 + x] = patch.cross[y * spec.w + x];
    }
  return full;
}

std::map<std::size_t, AdversaryTriggerShare> build_trigger_method1(const TriggerSpec& spec,
                                                                   const PartitionScheme& scheme,
                                                                   const std::vector<std::size_t>& adversaries) {
  const TriggerPatch full = monolithic_mask(spec, scheme.image_height, scheme.image_width);
  const Rect rect = spec.rectangle();
  for (std::size_t y = rect.row0; y < rect.row0 + rect.rows; ++y)
    for (std::size_t x = rect.col0; x < rect.col0 + rect.cols; ++x) {
      const std::size_t owner = scheme.owner_of(y, x);
      require(std::find(adversaries.begin(), adversaries.end(), owner) != adversaries.end(), ErrorKind::Placement,
              "trigger pixel (" + std::to_string(y) + "," + std::to_string(x) + ") lies in benign client " +
                  std::to_string(owner));
    }
  std::map<std::size_t, AdversaryTriggerShare> out;
  for (std::size_t m : adversaries) {
    require(m < scheme.num_clients(), ErrorKind::Contract, "adversary id is not a client");
    AdversaryTriggerShare s;
    s.owner = m;
    s.slice = scheme.slices[m];
    s.with_cross = spec.cross;
    s.background.assign(s.slice.area(), 0);
    s.cross.assign(s.slice.area(), 0);
    for (std::size_t y = 0; y < s.slice.rows; ++y)
      for (std::size_t x = 0; x < s.slice.cols; ++x) {
        const std::size_t g = (s.slice.row0 + y) * scheme.image_width + s.slice.col0 + x;
        s.background[y * s.slice.cols + x] = full.background[g];
        s.cross[y * s.slice.cols + x] = full.cross[g];
      }
    out.emplace(m, std::move(s));
  }
  return out;
}

std::pair<std::size_t, std::size_t> share_shape(std::size_t total_area, std::size_t adversaries, const Rect& slice) {
  require(adversaries > 0, ErrorKind::Contract, "no adversaries");
  const auto a = static_cast<std::size_t>(std::lround(double(total_area) / double(adversaries)));
  require(a > 0, ErrorKind::Geometry, "per-adversary trigger area rounds to zero");
  std::pair<std::size_t, std::size_t> shape;
  if (a % 2 == 0) {
    shape = {a / 2, 2};
  } else {
    std::size_t r = static_cast<std::size_t>(std::sqrt(double(a)));
    while (a % r != 0) --r;
    shape = {r, a / r};  // rows ≤ cols: the wider orientation
  }
  auto fits = [&](std::pair<std::size_t, std::size_t> s) { return s.first <= slice.rows && s.second <= slice.cols; };
  if (fits(shape)) return shape;
  std::swap(shape.first, shape.second);
  require(fits(shape), ErrorKind::Geometry,
          "share of area " + std::to_string(a) + " does not fit a " + std::to_string(slice.rows) + "x" +
              std::to_string(slice.cols) + " slice");
  return shape;
}

AdversaryTriggerShare place_share(const AdversaryTriggerShare& share, std::uint64_t seed) {
  if (!share.randomized) return share;
  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> dr(0, share.slice.rows - share.patch_rows);
  std::uniform_int_distribution<std::size_t> dc(0, share.slice.cols - share.patch_cols);
  const std::size_t r0 = dr(rng), c0 = dc(rng);
  const TriggerPatch patch = make_patch(share.patch_rows, share.patch_cols, share.with_cross);
  AdversaryTriggerShare out = share;
  std::fill(out.background.begin(), out.background.end(), 0);
  std::fill(out.cross.begin(), out.cross.end(), 0);
  for (std::size_t y = 0; y < patch.rows; ++y)
    for (std::size_t x = 0; x < patch.cols; ++x) {
      out.background[(r0 + y) * share.slice.cols + c0 + x] = patch.background[y * patch.cols + x];
      out.cross[(r0 + y) * share.slice.cols + c0 + x] = patch.cross[y * patch.cols + x];
    }
  return out;
}

std::map<std::size_t, AdversaryTriggerShare> build_trigger_method2(const TriggerSpec& spec,
                                                                   const PartitionScheme& scheme,
                                                                   const std::vector<std::size_t>& adversaries) {
  require(spec.h * spec.w <= spec.area_budget, ErrorKind::Configuration, "trigger area exceeds budget");
  std::map<std::size_t, AdversaryTriggerShare> out;
  for (std::size_t m : adversaries) {
    require(m < scheme.num_clients(), ErrorKind::Contract, "adversary id is not a client");
    AdversaryTriggerShare s;
    s.owner = m;
    s.slice = scheme.slices[m];
    s.randomized = true;
    s.with_cross = spec.cross;
    std::tie(s.patch_rows, s.patch_cols) = share_shape(spec.h * spec.w, adversaries.size(), s.slice);
    s.background.assign(s.slice.area(), 0);
    s.cross.assign(s.slice.area(), 0);
    const TriggerPatch patch = make_patch(s.patch_rows, s.patch_cols, s.with_cross);
    for (std::size_t y = 0; y < patch.rows; ++y)
      for (std::size_t x = 0; x < patch.cols; ++x) {
        s.background[y * s.slice.cols + x] = patch.background[y * patch.cols + x];
        s.cross[y * s.slice.cols + x] = patch.cross[y * patch.cols + x];
      }
    out.emplace(m, std::move(s));
  }
  return out;
}

void implant(std::span<float> x, const AdversaryTriggerShare& share, double gamma, bool clip) {
  const std::size_t plane = share.slice.area();
  require(plane > 0 && x.size() % plane == 0, ErrorKind::Contract, "slice row does not match share masks");
  const float g = float(gamma);
  for (std::size_t c = 0; c < x.size() / plane; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      float& v = x[c * plane + p];
      if (share.background[p]) v += g;
      if (share.cross[p]) v = 0.0f;
      if (clip) v = std::clamp(v, 0.0f, 1.0f);
    }
}

void implant_full(std::span<float> image, const ImageShape& shape,
                  const std::map<std::size_t, AdversaryTriggerShare>& shares, double gamma, bool clip,
                  std::uint64_t placement_seed) {
  require(image.size() == shape.size(), ErrorKind::Contract, "image size mismatch");
  for (const auto& [m, base] : shares) {
    const AdversaryTriggerShare s = place_share(base, derive_seed(placement_seed, {kTagPlacement, m}));
    std::vector<float> slice(shape.channels * s.slice.area());
    extract_rect(image, shape, s.slice, slice);
    implant(slice, s, gamma, clip);
    const std::size_t plane = shape.height * shape.width;
    std::size_t o = 0;
    for (std::size_t c = 0; c < shape.channels; ++c)
      for (std::size_t y = 0; y < s.slice.rows; ++y)
        for (std::size_t x = 0; x < s.slice.cols; ++x)
          image[c * plane + (s.slice.row0 + y) * shape.width + s.slice.col0 + x] = slice[o++];
  }
}

bool PoisonPlan::contains(std::size_t i) const { return std::binary_search(indices.begin(), indices.end(), i); }

PoisonPlan select_poison_set(const std::vector<std::size_t>& consensus, double zeta, std::size_t n,
                             std::uint64_t seed, const std::vector<std::size_t>& adversaries) {
  require(zeta >= 0.0 && zeta <= 1.0, ErrorKind::Configuration, "poisoning budget must lie in [0,1]");
  PoisonPlan plan;
  plan.zeta = zeta;
  plan.seed = seed;
  plan.requested = static_cast<std::size_t>(std::lround(zeta * double(n)));
  std::vector<std::size_t> pool = consensus;
  std::sort(pool.begin(), pool.end());
  pool.erase(std::unique(pool.begin(), pool.end()), pool.end());
  if (pool.empty()) {
    plan.disabled = true;
    plan.shortfall = plan.requested > 0;
  } else {
    plan.shortfall = pool.size() < plan.requested;
    Rng rng = make_rng(seed, {kTagPoison});
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min(pool.size(), plan.requested));
    std::sort(pool.begin(), pool.end());
    plan.indices = std::move(pool);
  }
  for (std::size_t m : adversaries) plan.per_adversary[m] = plan.indices;
  return plan;
}

std::vector<float> generate_sample(const VaeModel<float>& vae, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  Matrix<float> z(1, vae.latent_dim);
  for (float& v : z.storage()) v = float(nd(rng));
  return vae_decode(vae, z).storage();
}

std::size_t poison_batch(Matrix<float>& slices, std::span<const std::size_t> batch_indices, std::size_t adversary,
                         const PoisonPlan& plan, const AdversaryTriggerShare& share, const VaeModel<float>* vae,
                         const PoisonOptions& opt, std::uint64_t seed) {
  require(slices.rows() == batch_indices.size(), ErrorKind::Alignment, "batch rows != index count");
  if (plan.disabled || plan.indices.empty()) return 0;
  const std::vector<std::size_t>* own = &plan.indices;
  if (auto it = plan.per_adversary.find(adversary); it != plan.per_adversary.end()) own = &it->second;
  std::size_t changed = 0;
  for (std::size_t r = 0; r < batch_indices.size(); ++r) {
    const std::size_t idx = batch_indices[r];
    if (!std::binary_search(own->begin(), own->end(), idx)) continue;
    auto row = slices.row(r);
    if (opt.swap && vae) {
      const auto sample = generate_sample(*vae, derive_seed(seed, {kTagGenerate, adversary, idx}));
      require(sample.size() == row.size(), ErrorKind::Contract, "generated sample does not match the slice shape");
      std::copy(sample.begin(), sample.end(), row.begin());
    }
    implant(row, place_share(share, derive_seed(seed, {kTagPlacement, adversary, idx})), opt.gamma, opt.clip);
    ++changed;
  }
  return changed;
}

namespace {

void write_pgm(const std::vector<std::uint8_t>& bg, const std::vector<std::uint8_t>& cross, std::size_t rows,
               std::size_t cols, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::Io, "cannot create " + path.string());
  os << "P5\n" << cols << ' ' << rows << "\n255\n";
  for (std::size_t i = 0; i < rows * cols; ++i) {
    const char v = static_cast<char>(bg[i] ? 255 : cross[i] ? 128 : 0);
    os.put(v);
  }
}

}  // namespace

void write_share_pgm(const AdversaryTriggerShare& share, const std::filesystem::path& path) {
  write_pgm(share.background, share.cross, share.slice.rows, share.slice.cols, path);
}

void write_mask_pgm(const TriggerPatch& mask, const std::filesystem::path& path) {
  write_pgm(mask.background, mask.cross, mask.rows, mask.cols, path);
}

}  // namespace vflbd

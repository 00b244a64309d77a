#include "oseg/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "oseg/errors.hpp"

namespace oseg {

namespace {

// exp() guard for tw/th; a box can grow at most e^10 times per refinement.
constexpr double kMaxLogScale = 10.0;

}  // namespace

bool Box::valid() const {
  return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
         x2 > x1 && y2 > y1;
}

void require_valid(const Box& b) {
  if (!b.valid()) throw ArgumentError("invalid box: coordinates must be finite with x2 > x1, y2 > y1");
}

Box clip_to_image(const Box& b, ImageSize size) {
  return {std::clamp(b.x1, 0.0, static_cast<double>(size.width)),
          std::clamp(b.y1, 0.0, static_cast<double>(size.height)),
          std::clamp(b.x2, 0.0, static_cast<double>(size.width)),
          std::clamp(b.y2, 0.0, static_cast<double>(size.height))};
}

Box quantize_half_pixel(const Box& b) {
  auto q = [](double v) { return std::round(2.0 * v) / 2.0; };
  return {q(b.x1), q(b.y1), q(b.x2), q(b.y2)};
}

double iou(const Box& a, const Box& b) {
  require_valid(a);
  require_valid(b);
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

AnchorGrid::AnchorGrid(int stride, std::vector<AnchorShape> shapes, ImageSize image_size)
    : stride_(stride), shapes_(std::move(shapes)), image_size_(image_size) {
  if (stride_ <= 0) throw ArgumentError("anchor stride must be positive");
  if (shapes_.empty()) throw ArgumentError("anchor grid needs at least one shape");
  if (image_size_.width <= 0 || image_size_.height <= 0) throw ArgumentError("image size must be positive");
  for (const auto& s : shapes_) {
    if (!(s.width > 0) || !(s.height > 0)) throw ArgumentError("anchor shapes must have positive size");
  }
  grid_h_ = (image_size_.height + stride_ - 1) / stride_;
  grid_w_ = (image_size_.width + stride_ - 1) / stride_;
}

AnchorGrid AnchorGrid::default_grid() {
  return AnchorGrid(16, {{96, 96}, {136, 68}, {68, 136}}, {320, 320});
}

Box AnchorGrid::anchor(std::size_t location, std::size_t shape) const {
  const auto row = static_cast<double>(location / static_cast<std::size_t>(grid_w_));
  const auto col = static_cast<double>(location % static_cast<std::size_t>(grid_w_));
  const double cx = (col + 0.5) * stride_;
  const double cy = (row + 0.5) * stride_;
  const AnchorShape& s = shapes_.at(shape);
  return {cx - 0.5 * s.width, cy - 0.5 * s.height, cx + 0.5 * s.width, cy + 0.5 * s.height};
}

RegressionTarget encode_target(const Box& proposal, const Box& gt) {
  require_valid(proposal);
  require_valid(gt);
  const double pw = proposal.width(), ph = proposal.height();
  return {(gt.center_x() - proposal.center_x()) / pw, (gt.center_y() - proposal.center_y()) / ph,
          std::log(gt.width() / pw), std::log(gt.height() / ph)};
}

std::optional<Box> apply_target(const Box& proposal, const RegressionTarget& t, ImageSize size) {
  require_valid(proposal);
  if (!std::isfinite(t.tx) || !std::isfinite(t.ty) || !std::isfinite(t.tw) || !std::isfinite(t.th)) {
    throw ArgumentError("regression target must be finite");
  }
  const double pw = proposal.width(), ph = proposal.height();
  const double cx = proposal.center_x() + t.tx * pw;
  const double cy = proposal.center_y() + t.ty * ph;
  const double w = pw * std::exp(std::clamp(t.tw, -kMaxLogScale, kMaxLogScale));
  const double h = ph * std::exp(std::clamp(t.th, -kMaxLogScale, kMaxLogScale));
  const Box decoded{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  const Box clipped = clip_to_image(decoded, size);
  if (!clipped.valid() || clipped.width() < kMinBoxSide || clipped.height() < kMinBoxSide) return std::nullopt;
  return clipped;
}

std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });
  std::vector<std::size_t> kept;
  std::vector<bool> suppressed(boxes.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou(boxes[i].box, boxes[j].box) > iou_threshold) suppressed[j] = true;
    }
  }
  return kept;
}

std::vector<AnchorLabel> label_anchors(const AnchorGrid& grid, std::span<const Box> gts,
                                       double pos_thr, double neg_thr) {
  if (!(pos_thr > neg_thr)) throw ArgumentError("label_anchors: pos_thr must exceed neg_thr");
  const std::size_t n = grid.num_anchors();
  std::vector<AnchorLabel> labels(n);
  if (gts.empty()) return labels;

  // iou_table[a * G + g]
  const std::size_t G = gts.size();
  std::vector<double> table(n * G);
  for (std::size_t a = 0; a < n; ++a) {
    const Box anchor = grid.anchor(a);
    for (std::size_t g = 0; g < G; ++g) table[a * G + g] = iou(anchor, gts[g]);
  }

  for (std::size_t a = 0; a < n; ++a) {
    std::size_t best = 0;
    for (std::size_t g = 1; g < G; ++g) {
      if (table[a * G + g] > table[a * G + best]) best = g;
    }
    AnchorLabel& l = labels[a];
    l.gt = static_cast<int>(best);
    l.max_iou = table[a * G + best];
    if (l.max_iou > pos_thr) {
      l.kind = AnchorLabelKind::Positive;
    } else if (l.max_iou < neg_thr) {
      l.kind = AnchorLabelKind::Negative;
    } else {
      l.kind = AnchorLabelKind::Ignore;
    }
  }

  for (std::size_t g = 0; g < G; ++g) {
    double best = 0.0;
    for (std::size_t a = 0; a < n; ++a) best = std::max(best, table[a * G + g]);
    if (best > pos_thr || best <= 0.0) continue;
    for (std::size_t a = 0; a < n; ++a) {
      if (table[a * G + g] != best) continue;
      AnchorLabel& l = labels[a];
      if (l.kind == AnchorLabelKind::Positive) continue;
      l.kind = AnchorLabelKind::Positive;
      l.gt = static_cast<int>(g);
      l.max_iou = best;
      l.forced = true;
    }
  }
  return labels;
}

bool BinaryMask::covers(int image_x, int image_y) const {
  const int x = image_x - x0, y = image_y - y0;
  if (x < 0 || y < 0 || x >= width || y >= height) return false;
  return at(x, y);
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

PixelFrame pixel_frame(const Box& b, ImageSize size) {
  const int x0 = std::clamp(static_cast<int>(std::floor(b.x1)), 0, size.width);
  const int y0 = std::clamp(static_cast<int>(std::floor(b.y1)), 0, size.height);
  const int x1 = std::clamp(static_cast<int>(std::ceil(b.x2)), 0, size.width);
  const int y1 = std::clamp(static_cast<int>(std::ceil(b.y2)), 0, size.height);
  return {x0, y0, std::max(0, x1 - x0), std::max(0, y1 - y0)};
}

BinaryMask rasterize_ellipse(const Box& b, ImageSize size) {
  require_valid(b);
  const PixelFrame f = pixel_frame(b, size);
  BinaryMask m{f.x0, f.y0, f.width, f.height, std::vector<std::uint8_t>(static_cast<std::size_t>(f.width) * f.height)};
  const double cx = b.center_x(), cy = b.center_y();
  const double ax = 0.5 * b.width(), ay = 0.5 * b.height();
  for (int y = 0; y < f.height; ++y) {
    const double dy = (f.y0 + y + 0.5 - cy) / ay;
    for (int x = 0; x < f.width; ++x) {
      const double dx = (f.x0 + x + 0.5 - cx) / ax;
      m.bits[static_cast<std::size_t>(y) * f.width + x] = (dx * dx + dy * dy <= 1.0) ? 1 : 0;
    }
  }
  return m;
}

}  // namespace oseg

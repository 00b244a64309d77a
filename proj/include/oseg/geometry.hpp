#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace oseg {

struct ImageSize {
  int width = 0;
  int height = 0;

  bool operator==(const ImageSize&) const = default;
};

/// Axis-aligned box in continuous pixel coordinates, corner convention.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double center_x() const { return 0.5 * (x1 + x2); }
  double center_y() const { return 0.5 * (y1 + y2); }
  bool valid() const;

  bool operator==(const Box&) const = default;
};

/// Throws ArgumentError when `b` is not a finite, positive-size box.
void require_valid(const Box& b);

Box clip_to_image(const Box& b, ImageSize size);

/// Rounds every coordinate to the nearest multiple of 0.5 px.
Box quantize_half_pixel(const Box& b);

double iou(const Box& a, const Box& b);

struct AnchorShape {
  double width = 0;
  double height = 0;

  bool operator==(const AnchorShape&) const = default;
};

/// Anchors of A shapes tiled on a stride-spaced grid. Anchor index within an
/// image is `location * A + shape`, location = row * grid_width + col.
class AnchorGrid {
 public:
  AnchorGrid() = default;
  AnchorGrid(int stride, std::vector<AnchorShape> shapes, ImageSize image_size);

  /// Square, 2:1 and 1:2 shapes of roughly equal area for a 320x320 image.
  static AnchorGrid default_grid();

  int stride() const { return stride_; }
  const std::vector<AnchorShape>& shapes() const { return shapes_; }
  ImageSize image_size() const { return image_size_; }
  std::size_t num_shapes() const { return shapes_.size(); }
  int grid_height() const { return grid_h_; }
  int grid_width() const { return grid_w_; }
  std::size_t num_locations() const { return static_cast<std::size_t>(grid_h_) * grid_w_; }
  std::size_t num_anchors() const { return num_locations() * num_shapes(); }

  Box anchor(std::size_t location, std::size_t shape) const;
  Box anchor(std::size_t index) const { return anchor(index / num_shapes(), index % num_shapes()); }

  bool operator==(const AnchorGrid&) const = default;

 private:
  int stride_ = 16;
  std::vector<AnchorShape> shapes_;
  ImageSize image_size_;
  int grid_h_ = 0;
  int grid_w_ = 0;
};

/// R-CNN log-space box offsets.
struct RegressionTarget {
  double tx = 0, ty = 0, tw = 0, th = 0;

  bool operator==(const RegressionTarget&) const = default;
};

RegressionTarget encode_target(const Box& proposal, const Box& gt);

/// Boxes thinner than this after refinement are discarded.
inline constexpr double kMinBoxSide = 1.0;

/// Inverse of encode_target followed by clipping to the image. Returns
/// nullopt when the clipped box is degenerate or thinner than kMinBoxSide
/// (the proposal is discarded).
std::optional<Box> apply_target(const Box& proposal, const RegressionTarget& t, ImageSize size);

struct ScoredBox {
  Box box;
  double score = 0;
};

/// Greedy NMS. Returns kept indices in descending-score order; equal scores
/// keep the lower original index first.
std::vector<std::size_t> nms(std::span<const ScoredBox> boxes, double iou_threshold);

enum class AnchorLabelKind : std::uint8_t { Negative, Ignore, Positive };

struct AnchorLabel {
  AnchorLabelKind kind = AnchorLabelKind::Negative;
  int gt = -1;           // matched (argmax) ground truth, -1 when gts is empty
  double max_iou = 0.0;  // IoU with that ground truth
  bool forced = false;   // positive only through the best-anchor fallback
};

/// RPN anchor labelling: positive above pos_thr, negative below neg_thr,
/// plus the highest-IoU anchor(s) of every ground truth that no anchor
/// covers above pos_thr.
std::vector<AnchorLabel> label_anchors(const AnchorGrid& grid, std::span<const Box> gts,
                                       double pos_thr, double neg_thr);

/// Box-aligned bitmap. Pixel (x, y) of the mask covers image pixel
/// (x0 + x, y0 + y); pixel centers sit at +0.5.
struct BinaryMask {
  int x0 = 0, y0 = 0;
  int width = 0, height = 0;
  std::vector<std::uint8_t> bits;

  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  /// Lookup in image coordinates; false outside the mask frame.
  bool covers(int image_x, int image_y) const;
  std::size_t count() const;

  bool operator==(const BinaryMask&) const = default;
};

/// Integer pixel frame spanned by a box (end-exclusive), clipped to the image.
struct PixelFrame {
  int x0 = 0, y0 = 0, width = 0, height = 0;
};
PixelFrame pixel_frame(const Box& b, ImageSize size);

/// Filled ellipse inscribed in `b`, sampled at pixel centers.
BinaryMask rasterize_ellipse(const Box& b, ImageSize size);

}  // namespace oseg

#pragma once

// Dense coordinate-indexed storage shared by particle configurations,
// odometers and the stabilizer's bookkeeping planes. A grid covers an
// axis-aligned box in Z^d; grids backing a growable lattice are re-embedded
// into a larger box when an avalanche reaches the edge of the covered region.

#include <array>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <vector>

namespace arw {

using Coord = std::int32_t;
inline constexpr int kMaxDim = 4;

/// Coordinates of one lattice site. Axes beyond the active dimension stay 0.
using Coords = std::array<Coord, kMaxDim>;

/// Largest coordinate magnitude representable in packed form.
inline constexpr Coord kCoordLimit = 32767;

/// Packs coordinates into one word, 16 bits per axis in offset-binary.
/// Used as the queue element and as the per-site hash input, so it must be
/// injective over the supported coordinate range.
inline std::uint64_t pack_coords(const Coords& c) {
  std::uint64_t w = 0;
  for (int i = 0; i < kMaxDim; ++i) {
    w |= std::uint64_t(std::uint16_t(c[i] + 32768)) << (16 * i);
  }
  return w;
}

inline Coords unpack_coords(std::uint64_t w) {
  Coords c{};
  for (int i = 0; i < kMaxDim; ++i) {
    c[i] = Coord(std::uint16_t(w >> (16 * i))) - 32768;
  }
  return c;
}

/// Axis-aligned box `[lo, lo+shape)` with row-major strides (axis 0 fastest).
struct GridGeometry {
  int dim = 0;
  Coords lo{};
  Coords shape{};  // extent 1 on axes beyond dim
  std::array<std::int64_t, kMaxDim> stride{};
  std::int64_t cells = 0;

  static GridGeometry box(int dim, const Coords& lo, const Coords& shape) {
    GridGeometry g;
    g.dim = dim;
    g.lo = lo;
    g.shape = shape;
    for (int i = dim; i < kMaxDim; ++i) {
      g.lo[i] = 0;
      g.shape[i] = 1;
    }
    g.stride[0] = 1;
    for (int i = 1; i < kMaxDim; ++i) g.stride[i] = g.stride[i - 1] * g.shape[i - 1];
    g.cells = g.stride[kMaxDim - 1] * g.shape[kMaxDim - 1];
    return g;
  }

  /// Origin-centered cube of radius r (side 2r+1).
  static GridGeometry centered(int dim, Coord r) {
    Coords lo{}, shape{};
    for (int i = 0; i < dim; ++i) {
      lo[i] = -r;
      shape[i] = 2 * r + 1;
    }
    return box(dim, lo, shape);
  }

  bool covers(const Coords& c) const {
    for (int i = 0; i < kMaxDim; ++i) {
      if (c[i] < lo[i] || c[i] >= lo[i] + Coord(shape[i])) return false;
    }
    return true;
  }

  /// Caller guarantees covers(c).
  std::int64_t index_of(const Coords& c) const {
    std::int64_t idx = 0;
    for (int i = 0; i < kMaxDim; ++i) idx += std::int64_t(c[i] - lo[i]) * stride[i];
    return idx;
  }

  Coords coords_of(std::int64_t idx) const {
    Coords c{};
    for (int i = 0; i < kMaxDim; ++i) {
      c[i] = lo[i] + Coord(idx % shape[i]);
      idx /= shape[i];
    }
    return c;
  }

  bool operator==(const GridGeometry&) const = default;
};

/// Dense array over a GridGeometry. Re-embedding preserves cell values by
/// coordinate, zero-filling newly covered cells.
template <class T>
struct Grid {
  GridGeometry geo;
  std::vector<T> v;

  Grid() = default;
  explicit Grid(const GridGeometry& g) : geo(g), v(std::size_t(g.cells), T{}) {}

  T& at(std::int64_t idx) { return v[std::size_t(idx)]; }
  const T& at(std::int64_t idx) const { return v[std::size_t(idx)]; }

  T& at(const Coords& c) { return v[std::size_t(geo.index_of(c))]; }
  const T& at(const Coords& c) const { return v[std::size_t(geo.index_of(c))]; }

  void clear() { std::fill(v.begin(), v.end(), T{}); }

  void re_embed(const GridGeometry& g2) {
    if (g2 == geo) return;
    std::vector<T> w(std::size_t(g2.cells), T{});
    // Copy row by row; rows (runs along axis 0) are contiguous in both layouts.
    std::int64_t rows = geo.cells / geo.shape[0];
    Coords c = geo.lo;
    for (std::int64_t r = 0; r < rows; ++r) {
      std::int64_t src = geo.index_of(c);
      std::int64_t dst = g2.index_of(c);
      std::memcpy(&w[std::size_t(dst)], &v[std::size_t(src)], sizeof(T) * std::size_t(geo.shape[0]));
      for (int i = 1; i < kMaxDim; ++i) {
        if (++c[i] < geo.lo[i] + Coord(geo.shape[i])) break;
        c[i] = geo.lo[i];
      }
    }
    geo = g2;
    v = std::move(w);
  }
};

}  // namespace arw

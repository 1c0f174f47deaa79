"""Core value types: video volumes, histograms, region labelings.

A video volume is a dense grayscale block indexed [t, y, x]. Intensities
are unsigned integers at a declared bit depth (1..8). All operations here
are pure; volumes are treated as immutable once constructed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Label codes for the per-site map. Implicit regions use indices >= 0.
LABEL_TRACKABLE = -1
LABEL_SKETCHABLE = -2

EXPLICIT_LABELS = (LABEL_TRACKABLE, LABEL_SKETCHABLE)


@dataclass(frozen=True)
class VideoVolume:
    """Grayscale video block. data has shape (frames, height, width)."""

    data: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3-d (t, y, x), got shape {arr.shape}")
        if not (1 <= self.bit_depth <= 8):
            raise ValueError(f"bit_depth must be in 1..8, got {self.bit_depth}")
        if arr.size == 0:
            raise ValueError("volume must contain at least one site")
        arr = arr.astype(np.uint8, copy=True) if arr.dtype != np.uint8 else arr.copy()
        if arr.max(initial=0) > self.max_value:
            raise ValueError(
                f"intensity {int(arr.max())} exceeds max {self.max_value} for {self.bit_depth}-bit data"
            )
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def frames(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    @property
    def max_value(self):
        return (1 << self.bit_depth) - 1

    @property
    def n_sites(self):
        return int(self.data.size)

    def frame(self, t):
        return self.data[t]

    def to_float(self):
        return self.data.astype(np.float64)


def make_volume(array, bit_depth=8):
    """Build a VideoVolume from any integer array shaped (t, y, x)."""
    return VideoVolume(data=np.asarray(array), bit_depth=bit_depth)


def quantize(volume, bit_depth):
    """Requantize to a new bit depth with round-half-up scaling.

    Values map through v * new_max / old_max; exact halves round up so the
    midpoint of an 8-bit range lands on the upper 4-bit level (128 -> 8).
    """
    if not (1 <= bit_depth <= 8):
        raise ValueError(f"bit_depth must be in 1..8, got {bit_depth}")
    if bit_depth == volume.bit_depth:
        return volume
    old_max = volume.max_value
    new_max = (1 << bit_depth) - 1
    scaled = volume.data.astype(np.float64) * (new_max / old_max)
    out = np.floor(scaled + 0.5).astype(np.uint8)
    return VideoVolume(data=out, bit_depth=bit_depth)


@dataclass(frozen=True)
class Histogram:
    """Normalized 1-d histogram over fixed bin edges."""

    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        mass = np.asarray(self.mass, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2:
            raise ValueError("bin_edges must be 1-d with at least 2 entries")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin_edges must be strictly increasing")
        if mass.shape != (edges.size - 1,):
            raise ValueError(f"mass length {mass.size} does not match {edges.size - 1} bins")
        if np.any(mass < 0):
            raise ValueError("histogram mass must be non-negative")
        total = mass.sum()
        if not np.isclose(total, 1.0, atol=1e-9):
            raise ValueError(f"histogram mass must sum to 1, got {total}")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "mass", mass)

    @property
    def n_bins(self):
        return self.mass.size


def make_bin_edges(lo, hi, n_bins):
    """Uniform bin edges over [lo, hi]; a degenerate range is widened."""
    lo = float(lo)
    hi = float(hi)
    if hi <= lo:
        lo, hi = lo - 0.5, lo + 0.5
    return np.linspace(lo, hi, n_bins + 1)


def bin_index(values, edges):
    """Bin assignment with out-of-range values clamped into the end bins."""
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def build_histogram(values, edges):
    """Histogram of values over fixed edges, normalized to unit mass."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("cannot build a histogram from zero values")
    edges = np.asarray(edges, dtype=np.float64)
    counts = np.bincount(bin_index(values, edges), minlength=len(edges) - 1)
    return Histogram(bin_edges=edges, mass=counts / values.size)


def _check_comparable(a, b):
    if a.n_bins != b.n_bins or not np.allclose(a.bin_edges, b.bin_edges):
        raise ValueError("histograms are over different bins and cannot be compared")


def tv_distance(a, b):
    """Total-variation distance: half the L1 gap. Range [0, 1]."""
    _check_comparable(a, b)
    return 0.5 * float(np.abs(a.mass - b.mass).sum())


def l1_gap(a, b):
    """Sum of absolute per-bin mass differences. Range [0, 2]."""
    _check_comparable(a, b)
    return float(np.abs(a.mass - b.mass).sum())


@dataclass(frozen=True)
class Brick:
    """An explicit patch domain: size x size x n_frames sites anchored at
    (x, y) top-left, frame t (the middle frame for 3-frame bricks)."""

    x: int
    y: int
    t: int
    size: int = 11
    n_frames: int = 1

    @property
    def frame_span(self):
        if self.n_frames == 1:
            return (self.t, self.t)
        half = self.n_frames // 2
        return (self.t - half, self.t + half)


@dataclass
class RegionLabeling:
    """Per-site partition of a volume into explicit bricks and implicit
    texture regions.

    label_map: int16 array (t, h, w); LABEL_TRACKABLE / LABEL_SKETCHABLE
    mark explicit sites, values >= 0 index implicit regions.
    """

    label_map: np.ndarray
    bricks: list = field(default_factory=list)

    def __post_init__(self):
        self.label_map = np.asarray(self.label_map, dtype=np.int16)
        if self.label_map.ndim != 3:
            raise ValueError("label_map must be 3-d (t, h, w)")
        self.validate()

    def validate(self):
        nt, nh, nw = self.label_map.shape
        covered = np.zeros(self.label_map.shape, dtype=bool)
        for b in self.bricks:
            t0, t1 = b.frame_span
            if not (0 <= b.x and b.x + b.size <= nw and 0 <= b.y and b.y + b.size <= nh):
                raise ValueError(f"brick at ({b.x},{b.y},{b.t}) exceeds frame bounds")
            if not (0 <= t0 and t1 < nt):
                raise ValueError(f"brick at ({b.x},{b.y},{b.t}) exceeds time bounds")
            block = covered[t0 : t1 + 1, b.y : b.y + b.size, b.x : b.x + b.size]
            if block.any():
                raise ValueError("explicit bricks overlap")
            block[:] = True
        explicit = self.label_map < 0
        if not np.array_equal(covered, explicit):
            raise ValueError("explicit labels do not match brick domains")

    @property
    def implicit_region_ids(self):
        ids = np.unique(self.label_map[self.label_map >= 0])
        return [int(i) for i in ids]

    def region_mask(self, region_id):
        return self.label_map == region_id

    def explicit_mask(self):
        return self.label_map < 0

    @property
    def n_implicit_regions(self):
        return len(self.implicit_region_ids)


def full_implicit_labeling(shape, region_id=0):
    """Labeling that assigns every site to one implicit region."""
    return RegionLabeling(label_map=np.full(shape, region_id, dtype=np.int16))

"""Trackability and sketchability analysis, and the explicit/implicit
partition of a volume into bricks and texture regions.

Both analyses score a patch by the entropy of a Gaussian posterior: over
candidate velocities (trackability, patches compared between adjacent
frames) or over dictionary elements (sketchability). Low entropy means
the patch is well explained by one candidate and is worth coding
explicitly; high entropy sends it to the implicit texture models.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .util import entropy, kmeans
from .video import (
    Brick,
    RegionLabeling,
    LABEL_SKETCHABLE,
    LABEL_TRACKABLE,
)

BRICK_SIZE = 11


@dataclass(frozen=True)
class EntropyConfig:
    """Knobs for the posterior entropies and the partition.

    sigma, when set, is the raw noise scale of exp(-SSD / 2 sigma^2).
    When unset, the noise level is estimated from the best candidate:
    sigma_hat^2 = min_v SSD_v / n, and the exponent is divided by a
    further sqrt(n) so that i.i.d.-noise comparisons stay near uniform
    while exact matches still collapse to (near) certainty.
    h0 defaults to log of half the velocity-candidate count.
    """

    patch_size: int = 11
    v_max: int = 3
    sigma: float | None = None
    h0: float | None = None
    n_regions: int = 3

    @property
    def grid_side(self):
        return 2 * self.v_max + 1

    @property
    def n_velocities(self):
        return self.grid_side ** 2

    @property
    def entropy_threshold(self):
        if self.h0 is not None:
            return self.h0
        return math.log(self.n_velocities / 2.0)


def velocity_grid(v_max):
    """Candidate velocities in scan order: vy outer, vx inner."""
    return [(vx, vy)
            for vy in range(-v_max, v_max + 1)
            for vx in range(-v_max, v_max + 1)]


def _posterior_from_ssd(ssd, n_pix, sigma=None):
    """Posterior weights over candidates given per-candidate patch SSDs.

    Default noise scale: sigma_hat^2 = min SSD / n per site. Exponents are
    min-shifted, so a vanishing scale degenerates to the uniform law over
    the set of best candidates: a flat comparison (all SSDs zero) comes out
    uniform over everything, an exact unique match becomes certainty.
    """
    ssd = np.asarray(ssd, dtype=np.float64)
    best = ssd.min(axis=0)
    shifted = ssd - best
    if sigma is not None:
        scale = np.broadcast_to(np.float64(2.0 * sigma * sigma), best.shape)
    else:
        scale = 2.0 * best / math.sqrt(n_pix)
    tol = 1e-9 * np.maximum(1.0, best)
    degenerate = scale <= tol
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        z = shifted / scale
        w = np.where(degenerate, (shifted <= tol).astype(np.float64),
                     np.exp(-np.where(np.isfinite(z), np.maximum(z, 0.0), np.inf)))
    return w / w.sum(axis=0)


def _entropy_of_weights(w):
    mass = np.where(w > 0, w, 1.0)
    return -(mass * np.log(mass)).sum(axis=0)


def _extended(frame, r):
    """Frame with borders replicated r deep, so clamped patches become
    plain windows."""
    h, w = frame.shape
    ys = np.clip(np.arange(-r, h + r), 0, h - 1)
    xs = np.clip(np.arange(-r, w + r), 0, w - 1)
    return frame[np.ix_(ys, xs)].astype(np.float64)


def _window_sum(ext, patch_size):
    win = ndimage.uniform_filter(ext, size=patch_size, mode="constant")
    return win * (patch_size * patch_size)


def _ssd_stack(prev, curr, patch_size, v_max):
    """SSD maps (n_velocities, h, w) between current patches and displaced
    previous-frame patches. Patch indices clamp at frame borders, after
    applying the displacement, never before."""
    r = patch_size // 2
    h, w = curr.shape
    ys = np.arange(-r, h + r)
    xs = np.arange(-r, w + r)
    ext_curr = curr.astype(np.float64)[
        np.ix_(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1))]
    prev = np.asarray(prev, dtype=np.float64)
    ssds = np.empty((len(velocity_grid(v_max)), h, w))
    for i, (vx, vy) in enumerate(velocity_grid(v_max)):
        py = np.clip(ys - vy, 0, h - 1)
        px = np.clip(xs - vx, 0, w - 1)
        diff2 = (ext_curr - prev[np.ix_(py, px)]) ** 2
        ssds[i] = _window_sum(diff2, patch_size)[r : r + h, r : r + w]
    return ssds


def velocity_posterior(prev_frame, curr_frame, site, cfg=None):
    """Posterior over displacement candidates for the patch at site (x, y).

    Returns (velocities, probabilities) in velocity_grid order. A flat
    comparison (all SSDs zero) yields the uniform distribution.
    """
    cfg = cfg or EntropyConfig()
    x, y = site
    prev = np.asarray(prev_frame, dtype=np.float64)
    curr = np.asarray(curr_frame, dtype=np.float64)
    h, w = curr.shape
    r = cfg.patch_size // 2
    ys = np.arange(y - r, y + r + 1)
    xs = np.arange(x - r, x + r + 1)
    patch = curr[np.ix_(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1))]
    grid = velocity_grid(cfg.v_max)
    ssd = np.empty(len(grid))
    for i, (vx, vy) in enumerate(grid):
        py = np.clip(ys - vy, 0, h - 1)
        px = np.clip(xs - vx, 0, w - 1)
        ssd[i] = ((patch - prev[np.ix_(py, px)]) ** 2).sum()
    probs = _posterior_from_ssd(ssd[:, None], cfg.patch_size ** 2, cfg.sigma)[:, 0]
    return grid, probs


def _to_float_frames(volume):
    if hasattr(volume, "to_float"):
        return volume.to_float()
    return np.asarray(volume, dtype=np.float64)


def trackability_map(volume, t, cfg=None):
    """Velocity-posterior entropy per site of frame t, in nats.

    Low entropy marks patches that can be followed from frame t-1 with
    little ambiguity. Requires t >= 1.
    """
    if t < 1:
        raise ValueError("trackability needs a preceding frame (t >= 1)")
    cfg = cfg or EntropyConfig()
    data = _to_float_frames(volume)
    ssds = _ssd_stack(data[t - 1], data[t], cfg.patch_size, cfg.v_max)
    flat = ssds.reshape(ssds.shape[0], -1)
    w = _posterior_from_ssd(flat, cfg.patch_size ** 2, cfg.sigma)
    return _entropy_of_weights(w).reshape(data.shape[1:])


def trackability_stack(volume, cfg=None):
    """Trackability maps for every frame as one (t, h, w) array.

    Frame 0 has no predecessor and is filled with the maximal entropy
    log(n_velocities).
    """
    cfg = cfg or EntropyConfig()
    data = _to_float_frames(volume)
    out = np.full(data.shape, math.log(cfg.n_velocities))
    for t in range(1, data.shape[0]):
        out[t] = trackability_map(data, t, cfg)
    return out


def velocity_argmax_map(volume, cfg=None):
    """Most likely displacement per site as an int array (t, h, w, 2).

    Entry order is (vx, vy); frame 0 is zero."""
    cfg = cfg or EntropyConfig()
    data = _to_float_frames(volume)
    grid = np.asarray(velocity_grid(cfg.v_max))
    out = np.zeros(data.shape + (2,), dtype=np.int64)
    for t in range(1, data.shape[0]):
        ssds = _ssd_stack(data[t - 1], data[t], cfg.patch_size, cfg.v_max)
        best = ssds.reshape(ssds.shape[0], -1).argmin(axis=0)
        out[t] = grid[best].reshape(data.shape[1:] + (2,))
    return out


def _normalized_dictionary(dictionary):
    """Stack dictionary elements as zero-mean, unit-norm kernels."""
    kernels = []
    for el in dictionary:
        k = np.asarray(getattr(el, "kernel", el), dtype=np.float64)
        if k.ndim == 3:
            k = k[0]
        k = k - k.mean()
        norm = np.linalg.norm(k)
        if norm <= 1e-12:
            raise ValueError("dictionary elements must be non-constant")
        kernels.append(k / norm)
    return kernels


def sketchability_map(frame, dictionary, cfg=None):
    """Entropy of the posterior over dictionary elements per patch.

    Each element's fit is its least-squares projection of the zero-mean
    patch; the patch mean is always coded separately, so flat patches
    compare residuals of pure structure.
    """
    cfg = cfg or EntropyConfig()
    frame = np.asarray(frame, dtype=np.float64)
    kernels = _normalized_dictionary(dictionary)
    n_pix = cfg.patch_size ** 2
    r = cfg.patch_size // 2
    h, w = frame.shape
    ext = _extended(frame, r)
    sum_i = _window_sum(ext, cfg.patch_size)[r : r + h, r : r + w]
    sum_i2 = _window_sum(ext * ext, cfg.patch_size)[r : r + h, r : r + w]
    patch_energy = np.maximum(sum_i2 - sum_i * sum_i / n_pix, 0.0)
    residuals = np.empty((len(kernels), h, w))
    for i, k in enumerate(kernels):
        resp = ndimage.correlate(frame, k, mode="nearest")
        residuals[i] = np.maximum(patch_energy - resp * resp, 0.0)
    flat = residuals.reshape(len(kernels), -1)
    wts = _posterior_from_ssd(flat, n_pix, cfg.sigma)
    return _entropy_of_weights(wts).reshape(h, w)


# -- coding lengths ------------------------------------------------------

LOG2 = math.log(2.0)


def coding_length_explicit(patch, approximation):
    """Bits to code a patch as primitive + Gaussian residual.

    (n/2)(log 2 pi sigma^2 + 1) nats, sigma^2 floored at 1e-6.
    """
    patch = np.asarray(patch, dtype=np.float64)
    approx = np.asarray(approximation, dtype=np.float64)
    if patch.shape != approx.shape:
        raise ValueError("patch and approximation shapes differ")
    sigma2 = max(float(((patch - approx) ** 2).mean()), 1e-6)
    nats = 0.5 * patch.size * (math.log(2.0 * math.pi * sigma2) + 1.0)
    return nats / LOG2


def coding_length_implicit(bit_depth, n_sites, gains=()):
    """Bits to code a texture region: raw entropy minus pursuit gains.

    Gain units are the caller's; the result clamps at zero.
    """
    if n_sites < 0:
        raise ValueError("n_sites must be non-negative")
    return max(0.0, float(bit_depth) * float(n_sites) - float(sum(gains)))


# -- partition -----------------------------------------------------------


def _texture_descriptors(data, cell_masks):
    """8-dim pooled filter-histogram descriptor per cell.

    Four equal-mass intensity bins plus a median split of |grad_x| and
    |grad_y| magnitudes, with bin edges fixed globally over all implicit
    sites so cell descriptors are directly comparable mass vectors.
    """
    from .filters import gradient_slice

    t = data.shape[0]
    grads = []
    for axis in ("x", "y"):
        k = gradient_slice(3, axis)
        grads.append(np.abs(np.stack(
            [ndimage.correlate(data[i], k, mode="nearest") for i in range(t)])))
    union = np.zeros(data.shape, dtype=bool)
    for mask in cell_masks:
        union |= mask
    i_edges = np.unique(np.quantile(data[union], [0.25, 0.5, 0.75]))
    medians = [np.median(g[union]) for g in grads]
    feats = np.zeros((len(cell_masks), 8))
    for i, mask in enumerate(cell_masks):
        vals = data[mask]
        idx = np.searchsorted(i_edges, vals, side="right")
        hist = np.bincount(idx, minlength=4)[:4] / vals.size
        feats[i, :4] = hist
        for gi, (g, med) in enumerate(zip(grads, medians)):
            above = float((g[mask] > med).mean())
            feats[i, 4 + 2 * gi : 6 + 2 * gi] = (1.0 - above, above)
    return feats


def _cleanup_cell_labels(cell_labels, grid_shape):
    """One smoothing pass over the cell grid: a cell whose labeled
    4-neighbors all carry one other label joins it. Removes single-cell
    specks that k-means leaves in an otherwise homogeneous area.
    Cells labeled < 0 (no implicit sites) neither vote nor change."""
    rows, cols = grid_shape
    grid = cell_labels.reshape(rows, cols)
    out = grid.copy()
    for r in range(rows):
        for c in range(cols):
            if grid[r, c] < 0:
                continue
            nb = []
            if r > 0:
                nb.append(grid[r - 1, c])
            if r + 1 < rows:
                nb.append(grid[r + 1, c])
            if c > 0:
                nb.append(grid[r, c - 1])
            if c + 1 < cols:
                nb.append(grid[r, c + 1])
            nb = [x for x in nb if x >= 0]
            if nb and all(x == nb[0] for x in nb) and nb[0] != grid[r, c]:
                out[r, c] = nb[0]
    return out.ravel()


def _merge_close_clusters(labels, centers, feats):
    """Union clusters whose balls overlap: center distance at most the sum
    of member rms radii, plus an absolute floor well above multinomial
    sampling scatter in histogram-mass units. A single texture arbitrarily
    split by k-means collapses back to one region; genuinely distinct
    textures sit in tight separated balls and stay apart."""
    k = centers.shape[0]
    floor = 0.08
    radii = np.zeros(k)
    for j in range(k):
        member = feats[labels == j]
        if len(member):
            radii[j] = np.sqrt(((member - centers[j]) ** 2).sum(axis=1).mean())
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(k):
        for j in range(i + 1, k):
            if np.linalg.norm(centers[i] - centers[j]) <= radii[i] + radii[j] + floor:
                parent[find(j)] = find(i)
    roots = sorted({find(i) for i in range(k)})
    remap = {r: n for n, r in enumerate(roots)}
    return np.asarray([remap[find(int(l))] for l in labels], dtype=np.int64)


def partition(volume, cfg=None, dictionary=None, rng=None):
    """Split a volume into explicit bricks and implicit texture regions.

    Trackable cells (velocity-posterior entropy below h0 at the middle
    frame of each 3-frame group) become 11x11x3 bricks; remaining cells
    with sketchability entropy below h0 become per-frame 11x11x1 bricks;
    everything else is implicit, grouped into texture regions by seeded
    k-means over pooled filter statistics.
    """
    cfg = cfg or EntropyConfig()
    if rng is None:
        rng = np.random.default_rng(0)
    data = volume.to_float()
    n_t, n_h, n_w = data.shape
    if n_t < 3:
        raise ValueError(f"partition needs at least 3 frames, got {n_t}")
    size = BRICK_SIZE
    h0 = cfg.entropy_threshold

    track = trackability_stack(volume, cfg)
    if dictionary is not None and len(dictionary) > 1:
        sketch = np.stack([sketchability_map(data[t], dictionary, cfg)
                           for t in range(n_t)])
    else:
        sketch = np.full(data.shape, np.inf)

    anchors_y = range(0, n_h - size + 1, size)
    anchors_x = range(0, n_w - size + 1, size)
    groups = []
    t = 0
    while t + 3 <= n_t:
        groups.append(t + 1)
        t += 3
    tail = list(range(t, n_t))

    label_map = np.full((n_t, n_h, n_w), 0, dtype=np.int16)
    explicit = np.zeros((n_t, n_h, n_w), dtype=bool)
    bricks = []
    for by in anchors_y:
        for bx in anchors_x:
            cy, cx = by + size // 2, bx + size // 2
            for m in groups:
                if track[m, cy, cx] < h0:
                    bricks.append(Brick(x=bx, y=by, t=m, size=size, n_frames=3))
                    explicit[m - 1 : m + 2, by : by + size, bx : bx + size] = True
                    label_map[m - 1 : m + 2, by : by + size, bx : bx + size] = LABEL_TRACKABLE
                else:
                    for f in (m - 1, m, m + 1):
                        if sketch[f, cy, cx] < h0:
                            bricks.append(Brick(x=bx, y=by, t=f, size=size, n_frames=1))
                            explicit[f, by : by + size, bx : bx + size] = True
                            label_map[f, by : by + size, bx : bx + size] = LABEL_SKETCHABLE
            for f in tail:
                good = sketch[f, cy, cx] < h0 or (f >= 1 and track[f, cy, cx] < h0)
                if good:
                    bricks.append(Brick(x=bx, y=by, t=f, size=size, n_frames=1))
                    explicit[f, by : by + size, bx : bx + size] = True
                    label_map[f, by : by + size, bx : bx + size] = LABEL_SKETCHABLE

    # Implicit remainder: cluster spatial cells by texture statistics.
    # Cells with no implicit site are dropped; the rest keep their grid
    # position so one cleanup pass can smooth the cell-label field.
    grid_rows = -(-n_h // size)
    grid_cols = -(-n_w // size)
    cell_masks = []
    cell_pos = []
    for row in range(grid_rows):
        for col in range(grid_cols):
            cy, cx = row * size, col * size
            mask = np.zeros((n_t, n_h, n_w), dtype=bool)
            mask[:, cy : min(cy + size, n_h), cx : min(cx + size, n_w)] = True
            mask &= ~explicit
            if mask.any():
                cell_masks.append(mask)
                cell_pos.append(row * grid_cols + col)
    if cell_masks:
        k = min(cfg.n_regions, len(cell_masks))
        if k <= 1:
            cell_labels = np.zeros(len(cell_masks), dtype=np.int64)
        else:
            feats = _texture_descriptors(data, cell_masks)
            labels, centers = kmeans(feats, k, rng)
            cell_labels = _merge_close_clusters(labels, centers, feats)
            full = np.full(grid_rows * grid_cols, -1, dtype=np.int64)
            full[cell_pos] = cell_labels
            full = _cleanup_cell_labels(full, (grid_rows, grid_cols))
            cell_labels = full[cell_pos]
            uniq = np.unique(cell_labels)
            remap = {int(u): i for i, u in enumerate(uniq)}
            cell_labels = np.asarray([remap[int(l)] for l in cell_labels])
        for lab, mask in zip(cell_labels, cell_masks):
            label_map[mask] = lab

    return RegionLabeling(label_map=label_map, bricks=bricks)

"""Joint intensity-velocity texture model for frame-by-frame synthesis.

Two constraint sets act on an implicit region: histograms of static and
flicker filter responses (appearance) and per-cluster histograms of local
velocities on the (2 v_max + 1)^2 displacement grid (motion). A new frame
is drawn site by site from a small score matrix whose rows are velocity
candidates and whose columns are intensity perturbations of the displaced
previous-frame value, so the sampler never walks the full intensity range
except where occlusion forces it to.

Scores penalize squared per-bin deviation of the pooled histograms from
their targets, gated by nonnegative potentials that learning grows
wherever a channel still mismatches. A smoothness penalty on the velocity
disagreement with the already-visited 4-neighborhood keeps the sampled
field coherent without collapsing it to a single flow.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .filters import Filter, convolve
from .sketch import EntropyConfig, velocity_grid, _posterior_from_ssd, _ssd_stack
from .st_frame import DEFAULT_BIN_COUNT
from .video import Histogram, bin_index, build_histogram, make_bin_edges, quantize

OMEGA_MODES = ("additive", "product")


def velocity_bin_edges(v_max):
    """Integer-index edges for histograms over the velocity grid."""
    n = (2 * v_max + 1) ** 2
    return np.arange(n + 1, dtype=np.float64) - 0.5


def grid_index(vx, vy, v_max):
    """Flat index of velocity (vx, vy) in velocity_grid order."""
    side = 2 * v_max + 1
    return (vy + v_max) * side + (vx + v_max)


def velocity_field_histogram(velocities, mask, v_max):
    """Pooled histogram of a sampled (h, w, 2) velocity field over mask."""
    gi = grid_index(velocities[..., 0], velocities[..., 1], v_max)
    return build_histogram(gi[mask], velocity_bin_edges(v_max))


@dataclass(frozen=True)
class MaConfig:
    """Learning and sampling knobs for the joint model.

    sweeps is the number of Gibbs sweeps between consecutive potential
    updates; patch_size feeds the velocity posteriors that build the
    cluster targets.
    """

    epsilon: float = 0.05
    learning_rate: float = 1.0
    max_iters: int = 80
    sweeps: int = 1
    seed: int = 0
    bit_depth: int = 8
    n_bins: int = DEFAULT_BIN_COUNT
    v_max: int = 1
    m: int = 8
    smoothness: float = 1.0
    omega_mode: str = "additive"
    patch_size: int = 5

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must be in (0, 1)")
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.max_iters < 1 or self.sweeps < 1:
            raise ValueError("max_iters and sweeps must be at least 1")
        if self.m < 0 or self.v_max < 0:
            raise ValueError("m and v_max cannot be negative")
        if self.smoothness < 0.0:
            raise ValueError("smoothness cannot be negative")
        if self.omega_mode not in OMEGA_MODES:
            raise ValueError(f"omega_mode must be one of {OMEGA_MODES}")
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and positive")


@dataclass
class MaModel:
    """Fitted joint model over one spatial texture region.

    cluster_map assigns every region site a velocity cluster id, -1 marks
    sites outside the region. targets_v rows live on velocity_grid(v_max)
    order (vy outer, vx inner). Appearance potentials beta_s gate squared
    per-bin deviations of pooled static/flicker response histograms from
    targets_s; beta_v does the same for the per-cluster velocity
    histograms. occlusion, when set, holds per-frame masks of implicit
    sites whose previous-frame source was hidden; those sites are sampled
    from the full intensity range under the static filters alone.
    """

    filters: tuple
    beta_s: np.ndarray
    bin_edges: np.ndarray
    targets_s: np.ndarray
    cluster_map: np.ndarray
    targets_v: np.ndarray
    beta_v: np.ndarray
    v_max: int = 1
    m: int = 8
    smoothness: float = 1.0
    bit_depth: int = 8
    omega_mode: str = "additive"
    occlusion: np.ndarray | None = None
    final_tv: np.ndarray | None = None
    tv_trace: np.ndarray | None = None
    n_iters: int = 0

    def __post_init__(self):
        self.filters = tuple(self.filters)
        for f in self.filters:
            if f.domain not in ("static", "flicker"):
                raise ValueError(
                    f"filter {f.name} has domain {f.domain}; only static and "
                    "flicker filters carry appearance constraints here"
                )
        self.beta_s = np.asarray(self.beta_s, dtype=np.float64)
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.targets_s = np.asarray(self.targets_s, dtype=np.float64)
        k = len(self.filters)
        if self.beta_s.ndim != 2 or self.beta_s.shape[0] != k:
            raise ValueError(f"beta_s must be ({k}, n_bins)")
        if self.targets_s.shape != self.beta_s.shape:
            raise ValueError("targets_s and beta_s shapes differ")
        if self.bin_edges.shape != (k, self.beta_s.shape[1] + 1):
            raise ValueError("bin_edges must have one more column than beta_s")
        if k and not np.allclose(self.targets_s.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("appearance target histograms must sum to 1")
        self.cluster_map = np.asarray(self.cluster_map, dtype=np.int64)
        if self.cluster_map.ndim != 2:
            raise ValueError("cluster_map must be 2-d (h, w)")
        self.targets_v = np.asarray(self.targets_v, dtype=np.float64)
        self.beta_v = np.asarray(self.beta_v, dtype=np.float64)
        if self.v_max < 0:
            raise ValueError("v_max cannot be negative")
        if self.m < 0:
            raise ValueError("m cannot be negative")
        if self.smoothness < 0.0:
            raise ValueError("smoothness cannot be negative")
        if self.omega_mode not in OMEGA_MODES:
            raise ValueError(f"omega_mode must be one of {OMEGA_MODES}")
        n_v = self.n_velocities
        if self.targets_v.ndim != 2 or self.targets_v.shape[1] != n_v:
            raise ValueError(f"targets_v must be (n_clusters, {n_v})")
        if self.targets_v.shape[0] < 1:
            raise ValueError("need at least one velocity cluster")
        if self.beta_v.shape != self.targets_v.shape:
            raise ValueError("beta_v and targets_v shapes differ")
        if not np.allclose(self.targets_v.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("velocity target histograms must sum to 1")
        if self.cluster_map.max(initial=-1) >= self.targets_v.shape[0]:
            raise ValueError("cluster_map references a missing cluster")

    @property
    def n_filters(self):
        return len(self.filters)

    @property
    def n_clusters(self):
        return self.targets_v.shape[0]

    @property
    def n_velocities(self):
        return (2 * self.v_max + 1) ** 2

    @property
    def n_levels(self):
        return 1 << self.bit_depth

    @property
    def region(self):
        return self.cluster_map >= 0


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-site candidate grid: velocity rows by intensity columns."""

    velocities: np.ndarray
    intensities: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "velocities", np.asarray(self.velocities, dtype=np.int64))
        object.__setattr__(self, "intensities", np.asarray(self.intensities, dtype=np.float64))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=np.float64))
        if self.velocities.ndim != 2 or self.velocities.shape[1] != 2:
            raise ValueError("velocities must be (n_v, 2) (vx, vy) rows")
        if self.intensities.shape[0] != self.velocities.shape[0]:
            raise ValueError("one intensity row per velocity candidate")
        if self.probs.shape != self.intensities.shape:
            raise ValueError("probs and intensities shapes differ")
        if np.any(self.probs < 0):
            raise ValueError("cell probabilities cannot be negative")
        if not np.isclose(self.probs.sum(), 1.0, atol=1e-9):
            raise ValueError(f"probabilities must sum to 1, got {self.probs.sum()}")

    def velocity_marginal(self):
        """Proposal over velocities: the matrix summed over intensities."""
        return self.probs.sum(axis=1)

    def sample(self, u):
        """Map one uniform draw to a (velocity, intensity) cell."""
        cum = np.cumsum(self.probs.ravel())
        i = min(int(np.searchsorted(cum, u * cum[-1], side="right")), cum.size - 1)
        r, c = divmod(i, self.probs.shape[1])
        return self.velocities[r], self.intensities[r, c]


# -- velocity statistics ---------------------------------------------------

def velocity_statistics(volume, region, k_v, cfg=None, seed=0):
    """Cluster region sites by their mean velocity posterior.

    Each site's posterior over the displacement grid is averaged across
    every consecutive frame pair, then the sites are k-means clustered
    with plain L2 on the probability vectors. Returns one (member set,
    Histogram) pair per cluster; member sets hold (x, y) tuples and the
    histograms are the normalized cluster means, used downstream as the
    per-cluster velocity targets.
    """
    data = volume.to_float() if hasattr(volume, "to_float") else np.asarray(volume, dtype=np.float64)
    if data.ndim != 3 or data.shape[0] < 2:
        raise ValueError("velocity statistics need at least two frames")
    region = np.asarray(region, dtype=bool)
    if region.shape != data.shape[1:]:
        raise ValueError("region mask must match the frame shape")
    sites = np.argwhere(region)
    if k_v < 1:
        raise ValueError("need at least one velocity cluster")
    if k_v > len(sites):
        raise ValueError(f"k_v={k_v} exceeds the {len(sites)} region sites")
    cfg = cfg or EntropyConfig(patch_size=5, v_max=1)
    n_v = cfg.n_velocities
    points = np.zeros((len(sites), n_v))
    for t in range(1, data.shape[0]):
        ssds = _ssd_stack(data[t - 1], data[t], cfg.patch_size, cfg.v_max)
        w = _posterior_from_ssd(ssds.reshape(n_v, -1), cfg.patch_size ** 2, cfg.sigma)
        points += w.reshape(ssds.shape)[:, region].T
    points /= data.shape[0] - 1

    from .util import kmeans

    labels, centers = kmeans(points, k_v, np.random.default_rng(seed))
    edges = velocity_bin_edges(cfg.v_max)
    out = []
    for c in range(len(centers)):
        members = frozenset((int(x), int(y)) for y, x in sites[labels == c])
        mass = np.maximum(centers[c], 0.0)
        out.append((members, Histogram(bin_edges=edges, mass=mass / mass.sum())))
    return out


def cluster_map_from_statistics(stats, shape):
    """(h, w) cluster-id map from velocity_statistics output; -1 outside."""
    out = np.full(shape, -1, dtype=np.int64)
    for c, (members, _) in enumerate(stats):
        for x, y in members:
            out[y, x] = c
    return out


def occlusion_masks(labeling):
    """Implicit sites whose previous-frame source was hidden.

    A site is masked in frame t when it is implicit at t but covered by
    an explicit brick at t - 1: the texture it should extend was not
    visible, so its displaced support cannot be trusted. Frame 0 has no
    predecessor and is never masked. Masked and unmasked sites partition
    the implicit region of every frame.
    """
    label_map = labeling.label_map if hasattr(labeling, "label_map") else np.asarray(labeling)
    implicit = label_map >= 0
    out = np.zeros(label_map.shape, dtype=bool)
    out[1:] = implicit[1:] & ~implicit[:-1]
    return out


# -- incremental frame state ------------------------------------------------

class _FrameContext:
    """Response planes, pooled counts and window caches for one frame draw.

    Appearance counts pool current-frame responses: static filters over
    the whole region, flicker filters over the non-occluded part (their
    temporal support crosses the occlusion). Velocity counts pool the
    non-occluded region per cluster. Response planes are kept exact only
    at pooled cells; nothing else is ever read.
    """

    def __init__(self, model, prev, state, velocities=None, occluded=None,
                 prev_valid=None):
        self.model = model
        self.prev = np.asarray(prev, dtype=np.float64)
        self.state = np.asarray(state, dtype=np.float64)
        h, w = self.state.shape
        if self.prev.shape != (h, w):
            raise ValueError("previous frame shape differs from the state")
        if model.cluster_map.shape != (h, w):
            raise ValueError("model cluster_map shape differs from the state")
        self.region = model.region
        self.occluded = (np.zeros((h, w), dtype=bool) if occluded is None
                         else np.asarray(occluded, dtype=bool))
        self.prev_valid = (np.ones((h, w), dtype=bool) if prev_valid is None
                           else np.asarray(prev_valid, dtype=bool))
        self.grid = np.asarray(velocity_grid(model.v_max), dtype=np.int64)
        self.n_v = len(self.grid)
        if velocities is None:
            self.field = np.full((h, w), grid_index(0, 0, model.v_max), dtype=np.int64)
        else:
            velocities = np.asarray(velocities)
            self.field = grid_index(velocities[..., 0], velocities[..., 1], model.v_max)
        self.levels = np.arange(model.n_levels, dtype=np.float64)
        self.static_ids = [i for i, f in enumerate(model.filters) if f.domain == "static"]

        vol = np.stack([self.prev, self.state])
        self.resp, self.pool, self.prefix, self.counts_s, self.n_pool = [], [], [], [], []
        for f in model.filters:
            self.resp.append(convolve(vol, f)[1])
            mask = self.region.copy()
            if f.domain == "flicker":
                mask &= ~self.occluded
            if not mask.any():
                raise ValueError(f"filter {f.name} has no pooled sites in the region")
            self.pool.append(mask)
            k0 = f.kernel[0]
            p = np.zeros((k0.shape[0] + 1, k0.shape[1] + 1))
            p[1:, 1:] = k0.cumsum(axis=0).cumsum(axis=1)
            self.prefix.append(p)
            vals = self.resp[-1][mask]
            self.counts_s.append(np.bincount(
                bin_index(vals, model.bin_edges[len(self.counts_s)]),
                minlength=model.targets_s.shape[1]).astype(np.float64))
            self.n_pool.append(float(vals.size))
        self.v_pool = self.region & ~self.occluded
        self.cluster_sizes = np.array([
            float((self.v_pool & (model.cluster_map == c)).sum())
            for c in range(model.n_clusters)])
        self.counts_v = np.zeros((model.n_clusters, self.n_v))
        for c in range(model.n_clusters):
            sel = self.v_pool & (model.cluster_map == c)
            if sel.any():
                self.counts_v[c] = np.bincount(self.field[sel], minlength=self.n_v)
        self._windows = {}

    # window of same-frame response cells a pixel feeds, with edge-clamp
    # effective weights (rectangle sums over the kernel prefix table)
    def _window(self, k, y, x):
        key = (k, y, x)
        cached = self._windows.get(key)
        if cached is not None:
            return cached
        f = self.model.filters[k]
        size = f.size
        c = size // 2
        h, w = self.state.shape
        y2 = np.arange(max(y - (size - 1 - c), 0), min(y + c, h - 1) + 1)
        x2 = np.arange(max(x - (size - 1 - c), 0), min(x + c, w - 1) + 1)
        r1 = np.zeros(y2.size, dtype=np.int64) if y == 0 else y - y2 + c
        r2 = np.full(y2.size, size - 1, dtype=np.int64) if y == h - 1 else y - y2 + c
        c1 = np.zeros(x2.size, dtype=np.int64) if x == 0 else x - x2 + c
        c2 = np.full(x2.size, size - 1, dtype=np.int64) if x == w - 1 else x - x2 + c
        p = self.prefix[k]
        wgt = (p[np.ix_(r2 + 1, c2 + 1)] - p[np.ix_(r1, c2 + 1)]
               - p[np.ix_(r2 + 1, c1)] + p[np.ix_(r1, c1)])
        yy, xx = np.meshgrid(y2, x2, indexing="ij")
        keep = (wgt != 0.0) & self.pool[k][yy, xx]
        out = (yy[keep], xx[keep], wgt[keep])
        self._windows[key] = out
        return out

    def appearance_terms(self, y, x, candidates, filter_ids=None):
        """n_pool_k * <beta_k, (H_k - T_k)^2> summed over filters, per
        candidate intensity at (y, x).

        The pooled-count factor keeps one site's reassignment worth
        O(beta * |H - T|) in the exponent whatever the region size; the
        bare normalized form would dilute it by 1 / n_pool.
        """
        model = self.model
        ids = range(model.n_filters) if filter_ids is None else filter_ids
        cand = np.asarray(candidates, dtype=np.float64)
        total = np.zeros(cand.size)
        cur = self.state[y, x]
        for k in ids:
            ys, xs, wgt = self._window(k, y, x)
            beta = model.beta_s[k]
            n_bins = beta.size
            if ys.size == 0 or not beta.any():
                cnt = self.counts_s[k]
                total += self.n_pool[k] * (
                    ((cnt / self.n_pool[k] - model.targets_s[k]) ** 2) @ beta)
                continue
            r0 = self.resp[k][ys, xs]
            edges = model.bin_edges[k]
            b_old = bin_index(r0, edges)
            b_new = bin_index(r0[None, :] + wgt[None, :] * (cand[:, None] - cur), edges)
            delta = np.zeros((cand.size, n_bins))
            rows = np.repeat(np.arange(cand.size), ys.size)
            np.add.at(delta, (rows, b_new.ravel()), 1.0)
            delta -= np.bincount(b_old, minlength=n_bins)
            hist = (self.counts_s[k][None, :] + delta) / self.n_pool[k]
            total += self.n_pool[k] * (
                ((hist - model.targets_s[k][None, :]) ** 2) @ beta)
        return total

    def velocity_terms(self, y, x):
        """cluster_size_c * <beta_v[c], (H_c - T_c)^2> summed over clusters,
        per velocity candidate at (y, x). Scaled like appearance_terms."""
        model = self.model
        base = 0.0
        own = model.cluster_map[y, x]
        pooled = self.v_pool[y, x]
        for c in range(model.n_clusters):
            if c == own and pooled:
                continue
            n = self.cluster_sizes[c]
            if n:
                base += n * float(
                    ((self.counts_v[c] / n - model.targets_v[c]) ** 2) @ model.beta_v[c])
        if not pooled or own < 0:
            return np.full(self.n_v, base)
        cnt = self.counts_v[own].copy()
        cnt[self.field[y, x]] -= 1.0
        n = self.cluster_sizes[own]
        hist = (cnt[None, :] + np.eye(self.n_v)) / n
        return base + n * (
            ((hist - model.targets_v[own][None, :]) ** 2) @ model.beta_v[own])

    def omega(self, y, x):
        """Velocity disagreement with the already-visited 4-neighborhood.

        Raster visitation means the up and left neighbors hold velocities
        updated this sweep; only those two (when inside the region) enter
        the penalty.
        """
        total = np.zeros(self.n_v)
        for ny, nx in ((y - 1, x), (y, x - 1)):
            if ny >= 0 and nx >= 0 and self.region[ny, nx]:
                vn = self.grid[self.field[ny, nx]]
                total += ((self.grid - vn) ** 2).sum(axis=1)
        return total

    def score_matrix(self, y, x):
        """Candidate grid and probabilities for site (y, x)."""
        model = self.model
        h, w = self.state.shape
        src_y = np.clip(y - self.grid[:, 1], 0, h - 1)
        src_x = np.clip(x - self.grid[:, 0], 0, w - 1)
        valid = self.prev_valid[src_y, src_x]
        if self.occluded[y, x] or not valid.any():
            probs = _normalized(self.appearance_terms(y, x, self.levels, self.static_ids))
            return ScoreMatrix(velocities=np.zeros((1, 2), dtype=np.int64),
                               intensities=self.levels[None, :],
                               probs=probs[None, :])
        centers = self.prev[src_y, src_x]
        offsets = np.arange(-model.m, model.m + 1, dtype=np.float64)
        cand = np.clip(centers[:, None] + offsets[None, :], 0.0, model.n_levels - 1.0)
        uniq, inverse = np.unique(cand, return_inverse=True)
        app = self.appearance_terms(y, x, uniq)[inverse].reshape(cand.shape)
        vel = self.velocity_terms(y, x)
        om = model.smoothness * self.omega(y, x)
        if model.omega_mode == "product":
            expo = om[:, None] * (vel[:, None] + app)
        else:
            expo = om[:, None] + vel[:, None] + app
        expo = np.where(valid[:, None], expo, np.inf)
        flat = _normalized(expo.ravel()).reshape(expo.shape)
        return ScoreMatrix(velocities=self.grid, intensities=cand, probs=flat)

    def assign_intensity(self, y, x, value):
        old = self.state[y, x]
        if value != old:
            for k in range(self.model.n_filters):
                ys, xs, wgt = self._window(k, y, x)
                if ys.size == 0:
                    continue
                r0 = self.resp[k][ys, xs]
                r1 = r0 + wgt * (value - old)
                edges = self.model.bin_edges[k]
                n_bins = self.counts_s[k].size
                self.counts_s[k] += (
                    np.bincount(bin_index(r1, edges), minlength=n_bins)
                    - np.bincount(bin_index(r0, edges), minlength=n_bins))
                self.resp[k][ys, xs] = r1
            self.state[y, x] = value

    def assign_velocity(self, y, x, gi):
        old = self.field[y, x]
        if gi != old:
            if self.v_pool[y, x]:
                c = self.model.cluster_map[y, x]
                if c >= 0:
                    self.counts_v[c, old] -= 1.0
                    self.counts_v[c, gi] += 1.0
            self.field[y, x] = gi

    def appearance_histograms(self):
        return np.stack([c / n for c, n in zip(self.counts_s, self.n_pool)]) \
            if self.counts_s else np.zeros((0, self.model.targets_s.shape[1]))

    def velocity_histograms(self):
        out = np.zeros_like(self.counts_v)
        for c in range(self.model.n_clusters):
            if self.cluster_sizes[c]:
                out[c] = self.counts_v[c] / self.cluster_sizes[c]
        return out

    def channel_tv(self):
        """TV distance per channel: K_s appearance rows then K_v velocity."""
        tvs = []
        hs = self.appearance_histograms()
        for k in range(self.model.n_filters):
            tvs.append(0.5 * np.abs(hs[k] - self.model.targets_s[k]).sum())
        hv = self.velocity_histograms()
        for c in range(self.model.n_clusters):
            if self.cluster_sizes[c]:
                tvs.append(0.5 * np.abs(hv[c] - self.model.targets_v[c]).sum())
            else:
                tvs.append(0.0)
        return np.array(tvs)

    def velocity_vectors(self):
        return self.grid[self.field]


def _normalized(exponents):
    """exp(-exponents) normalized with min-shift; inf exponents get zero."""
    e = np.asarray(exponents, dtype=np.float64)
    finite = np.isfinite(e)
    if not finite.any():
        raise ValueError("no scorable candidates")
    p = np.zeros_like(e)
    p[finite] = np.exp(-(e[finite] - e[finite].min()))
    return p / p.sum()


def build_score_matrix(site, prev_frame, curr_state, model, velocities=None,
                       occluded=None, prev_valid=None, context=None):
    """Joint velocity-intensity proposal at one site.

    Rows are displacement candidates on the velocity grid, columns the
    2 m + 1 perturbations of the displaced previous-frame intensity,
    clamped to the level range. Cell log-scores add the smoothness
    penalty omega(v) (squared disagreement with the already-visited
    4-neighborhood, times the model scale) to the squared-deviation
    appearance and velocity histogram terms; omega_mode="product"
    instead multiplies the histogram terms by omega as a gain.
    Velocities whose source pixel is unusable (prev_valid False) get
    zero mass; when none is usable, or the site itself is occluded, the
    matrix degenerates to one zero-velocity row over the full intensity
    range, scored by the static filters alone.
    """
    if context is None:
        context = _FrameContext(model, prev_frame, curr_state, velocities,
                                occluded, prev_valid)
    x, y = site
    return context.score_matrix(y, x)


# -- sampling ----------------------------------------------------------------

def _init_frame(model, prev, rng, sample_mask, occluded, prev_valid):
    """Uniform velocity field plus intensities copied along it.

    Sites whose source is unusable (or that are occluded) start at a
    uniform level draw instead of a displaced copy.
    """
    h, w = prev.shape
    field = rng.integers(model.n_velocities, size=(h, w))
    grid = np.asarray(velocity_grid(model.v_max), dtype=np.int64)
    vx = grid[field, 0]
    vy = grid[field, 1]
    yy = np.clip(np.arange(h)[:, None] - vy, 0, h - 1)
    xx = np.clip(np.arange(w)[None, :] - vx, 0, w - 1)
    state = prev.copy()
    copied = prev[yy, xx]
    ok = prev_valid[yy, xx] & ~occluded
    noise = rng.integers(model.n_levels, size=(h, w)).astype(np.float64)
    state[sample_mask] = np.where(ok, copied, noise)[sample_mask]
    return state, grid[field]


def sample_ma_frame(model, prev, state=None, velocities=None, sample_mask=None,
                    occluded=None, prev_valid=None, n_sweeps=1, rng=None,
                    context=None):
    """Draw one frame and its velocity field conditioned on the previous.

    Non-occluded sample sites draw (velocity, intensity) jointly from
    their score matrix; occluded ones draw the intensity from the full
    level range under the static filters and a velocity from the
    smoothness penalty alone (it is excluded from the pooled velocity
    histograms either way). Sites outside sample_mask are left untouched.
    When state is None the frame initializes per the uniform-velocity
    displaced-copy rule. Returns (frame, velocity field (h, w, 2)).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    prev = np.asarray(prev, dtype=np.float64)
    if prev.ndim == 3:
        prev = prev[-1]
    h, w = prev.shape
    region = model.region
    sample_mask = region if sample_mask is None else np.asarray(sample_mask, dtype=bool)
    occluded = (np.zeros((h, w), dtype=bool) if occluded is None
                else np.asarray(occluded, dtype=bool))
    prev_valid = (np.ones((h, w), dtype=bool) if prev_valid is None
                  else np.asarray(prev_valid, dtype=bool))
    if context is None:
        if state is None:
            state, velocities = _init_frame(model, prev, rng, sample_mask,
                                            occluded, prev_valid)
        else:
            state = np.asarray(state, dtype=np.float64).copy()
        context = _FrameContext(model, prev, state, velocities, occluded, prev_valid)
    sites = np.argwhere(sample_mask)
    for _ in range(n_sweeps):
        for y, x in sites:
            matrix = context.score_matrix(y, x)
            vel, value = matrix.sample(rng.random())
            if not context.occluded[y, x]:
                context.assign_velocity(y, x, grid_index(vel[0], vel[1], model.v_max))
            else:
                om = model.smoothness * context.omega(y, x)
                pv = _normalized(om)
                cum = np.cumsum(pv)
                gi = min(int(np.searchsorted(cum, rng.random() * cum[-1], side="right")),
                         pv.size - 1)
                context.assign_velocity(y, x, gi)
            context.assign_intensity(y, x, value)
    return context.state, context.velocity_vectors()


# -- learning ----------------------------------------------------------------

def learn_ma(observed, region, filters, k_v, cfg=None, state=None,
             velocities=None, targets_s=None, targets_v=None,
             cluster_map=None, occluded=None, bin_edges=None,
             prev_valid=None, rng=None):
    """Fit appearance and velocity potentials on one observed clip.

    The last observed frame is re-synthesized conditioned on its true
    predecessor. Appearance targets default to that frame's pooled
    response histograms (bin edges frozen there too; pass bin_edges to
    match against histograms coded elsewhere); velocity targets default
    to the cluster centers of velocity_statistics over the whole clip.
    prev_valid marks predecessor pixels candidates may displace from.
    Potentials start at zero and grow by learning_rate * |h_syn -
    h_obs| per bin: the squared-deviation scores they gate penalize any
    drift from the targets, so pressure accumulates exactly where a
    channel still mismatches and a matched channel stops moving. Each
    iteration measures, stops if every appearance and velocity channel is
    within epsilon total variation, updates the potentials and runs
    cfg.sweeps Gibbs sweeps. Non-convergence is reported through
    n_iters == max_iters and the final_tv vector, never an exception.
    """
    cfg = cfg or MaConfig()
    vol = quantize(observed, cfg.bit_depth)
    data = vol.to_float()
    if data.shape[0] < 2:
        raise ValueError("learning needs at least two frames")
    region = np.asarray(region, dtype=bool)
    filters = tuple(filters)
    h, w = data.shape[1:]
    occluded_mask = (np.zeros((h, w), dtype=bool) if occluded is None
                     else np.asarray(occluded, dtype=bool))

    if targets_v is None or cluster_map is None:
        stats = velocity_statistics(
            vol, region, k_v,
            cfg=EntropyConfig(patch_size=cfg.patch_size, v_max=cfg.v_max),
            seed=cfg.seed)
        stats = [(mem, hist) for mem, hist in stats if mem]
        if targets_v is None:
            targets_v = np.stack([hist.mass for _, hist in stats])
        if cluster_map is None:
            cluster_map = cluster_map_from_statistics(stats, (h, w))

    prev = data[-2]
    frame = data[-1]
    n_bins = cfg.n_bins
    if bin_edges is not None:
        edges = np.asarray(bin_edges, dtype=np.float64).reshape(len(filters), n_bins + 1)
    else:
        edges = np.zeros((len(filters), n_bins + 1))
    t_s = np.zeros((len(filters), n_bins))
    if bin_edges is None or targets_s is None:
        for k, f in enumerate(filters):
            resp = convolve(np.stack([prev, frame]), f)[1]
            mask = region & ~occluded_mask if f.domain == "flicker" else region
            vals = resp[mask]
            if vals.size == 0:
                raise ValueError(f"filter {f.name} has no pooled sites in the region")
            if bin_edges is None:
                edges[k] = make_bin_edges(vals.min(), vals.max(), n_bins)
            t_s[k] = np.bincount(bin_index(vals, edges[k]), minlength=n_bins) / vals.size
    if targets_s is not None:
        t_s = np.asarray(targets_s, dtype=np.float64)

    model = MaModel(
        filters=filters, beta_s=np.zeros_like(t_s), bin_edges=edges,
        targets_s=t_s, cluster_map=cluster_map,
        targets_v=np.asarray(targets_v, dtype=np.float64),
        beta_v=np.zeros_like(np.asarray(targets_v, dtype=np.float64)),
        v_max=cfg.v_max, m=cfg.m, smoothness=cfg.smoothness,
        bit_depth=cfg.bit_depth, omega_mode=cfg.omega_mode)

    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    valid = (np.ones((h, w), dtype=bool) if prev_valid is None
             else np.asarray(prev_valid, dtype=bool))
    if state is None:
        state, velocities = _init_frame(model, prev, rng, region,
                                        occluded_mask, valid)
    else:
        # evolves in place when the caller hands over a float64 array, so
        # the matched sample comes back with the model
        state = np.asarray(state, dtype=np.float64)
    context = _FrameContext(model, prev, state, velocities, occluded_mask, valid)

    trace = []
    converged = False
    for it in range(cfg.max_iters):
        tv = context.channel_tv()
        trace.append(tv)
        if tv.size == 0 or tv.max() <= cfg.epsilon:
            converged = True
            model.n_iters = it
            break
        hs = context.appearance_histograms()
        model.beta_s += cfg.learning_rate * np.abs(hs - model.targets_s)
        hv = context.velocity_histograms()
        live = context.cluster_sizes > 0
        model.beta_v[live] += cfg.learning_rate * np.abs(hv - model.targets_v)[live]
        sample_ma_frame(model, prev, sample_mask=region, occluded=occluded_mask,
                        n_sweeps=cfg.sweeps, rng=rng, context=context)
    if not converged:
        tv = context.channel_tv()
        trace.append(tv)
        model.n_iters = cfg.max_iters
    model.final_tv = trace[-1]
    model.tv_trace = np.array(trace)
    return model


# -- serialization ------------------------------------------------------------

def _filter_to_dict(f):
    return {
        "id": f.id, "name": f.name, "kind": f.kind, "domain": f.domain,
        "scale": f.scale, "orientation": f.orientation,
        "velocity": list(f.velocity) if f.velocity else None,
        "kernel": f.kernel.tolist(),
    }


def _filter_from_dict(d):
    return Filter(
        id=d["id"], name=d["name"], kind=d["kind"], domain=d["domain"],
        kernel=np.asarray(d["kernel"], dtype=np.float64), scale=d["scale"],
        orientation=d["orientation"],
        velocity=tuple(d["velocity"]) if d["velocity"] else None,
    )


def model_to_json(model, path=None):
    """Self-describing JSON for a fitted model (occlusion masks excluded)."""
    doc = {
        "filters": [_filter_to_dict(f) for f in model.filters],
        "n_bins": int(model.targets_s.shape[1]),
        "beta_s": model.beta_s.tolist(),
        "bin_edges": model.bin_edges.tolist(),
        "targets_s": model.targets_s.tolist(),
        "cluster_map": model.cluster_map.tolist(),
        "targets_v": model.targets_v.tolist(),
        "beta_v": model.beta_v.tolist(),
        "v_max": model.v_max,
        "m": model.m,
        "smoothness": model.smoothness,
        "bit_depth": model.bit_depth,
        "omega_mode": model.omega_mode,
    }
    text = json.dumps(doc, indent=1)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def model_from_json(text):
    doc = json.loads(text)
    k = len(doc["filters"])
    n_bins = doc["n_bins"]
    return MaModel(
        filters=tuple(_filter_from_dict(d) for d in doc["filters"]),
        beta_s=np.asarray(doc["beta_s"], dtype=np.float64).reshape(k, n_bins),
        bin_edges=np.asarray(doc["bin_edges"], dtype=np.float64).reshape(k, n_bins + 1),
        targets_s=np.asarray(doc["targets_s"], dtype=np.float64).reshape(k, n_bins),
        cluster_map=np.asarray(doc["cluster_map"], dtype=np.int64),
        targets_v=np.asarray(doc["targets_v"], dtype=np.float64),
        beta_v=np.asarray(doc["beta_v"], dtype=np.float64),
        v_max=doc["v_max"], m=doc["m"], smoothness=doc["smoothness"],
        bit_depth=doc["bit_depth"], omega_mode=doc["omega_mode"],
    )

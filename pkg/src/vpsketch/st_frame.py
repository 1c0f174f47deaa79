"""Maximum-entropy texture model over spatio-temporal filter statistics.

A texture region is coded by the histograms of a few filter responses.
Synthesis draws from the Gibbs distribution whose potentials make the
sampled histograms match the coded ones:

    p(I) propto exp(-sum_k <beta_k, count_k(I)>)

beta_k is a per-bin potential table applied to every pooled response of
filter k (count form; dividing beta_k by the pool size gives the
equivalent normalized-histogram form). Potentials are fit by stochastic
gradient: sample under the current beta, then move each potential by the
histogram gap. Sampling is single-site Gibbs with incremental response
updates: flipping one pixel re-bins only the responses whose kernel
footprint covers it, never the full lattice.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .filters import convolve, pooled_histogram, pursue_filters, support_mask
from .video import VideoVolume, bin_index, build_histogram, make_volume, quantize

DEFAULT_BIN_COUNT = 15


def level_values(bit_depth):
    """Intensity values a volume of this depth can hold, as floats."""
    return np.arange(1 << bit_depth, dtype=np.float64)


@dataclass
class GibbsModel:
    """Potentials and targets for one texture region.

    beta: (K, L) per-response potentials; bin_edges: (K, L+1) uniform
    edges frozen from the observed responses; targets: (K, L) normalized
    observed histograms. final_tv / tv_trace / n_iters report how
    learning ended.
    """

    filters: tuple
    beta: np.ndarray
    bin_edges: np.ndarray
    targets: np.ndarray
    region: int | None = None
    bit_depth: int = 4
    final_tv: np.ndarray | None = None
    tv_trace: np.ndarray | None = None
    n_iters: int = 0

    def __post_init__(self):
        self.filters = tuple(self.filters)
        k = len(self.filters)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.beta.ndim != 2 or self.beta.shape[0] != k:
            raise ValueError(f"beta must be (n_filters, n_bins), got {self.beta.shape}")
        if self.targets.shape != self.beta.shape:
            raise ValueError("targets and beta disagree on filters x bins")
        if self.bin_edges.shape != (k, self.beta.shape[1] + 1):
            raise ValueError("bin_edges must be (n_filters, n_bins + 1)")
        if k and not np.allclose(self.targets.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("target histograms must be normalized")

    @property
    def n_filters(self):
        return len(self.filters)

    @property
    def n_bins(self):
        return self.beta.shape[1]

    def energy(self, volume, region_mask=None):
        """<beta, counts> summed over filters; the Gibbs exponent."""
        data = _as_float(volume)
        total = 0.0
        for k, filt in enumerate(self.filters):
            pool = support_mask(data.shape, filt, region_mask)
            resp = convolve(data, filt)[pool]
            bins = bin_index(resp, self.bin_edges[k])
            total += float(self.beta[k][bins].sum())
        return total


@dataclass(frozen=True)
class SamplerConfig:
    """Knobs for learning and sampling.

    sweeps is the rounds used when drawing from a frozen model; learning
    does one sweep per potential update, max_iters of them at most.
    """

    sweeps: int = 20
    epsilon: float = 0.05
    learning_rate: float = 1.0
    lr_decay: float = 0.9
    decay_every: int = 5
    max_iters: int = 200
    seed: int = 0
    bit_depth: int = 4
    n_bins: int = DEFAULT_BIN_COUNT
    visit: str = "raster"  # or "checkerboard"

    def __post_init__(self):
        if self.sweeps < 1:
            raise ValueError("sweeps must be >= 1")
        if not (0.0 < self.epsilon < 1.0):
            raise ValueError("epsilon must be in (0, 1)")
        if self.visit not in ("raster", "checkerboard"):
            raise ValueError(f"unknown visit order {self.visit!r}")


def _as_float(volume):
    if hasattr(volume, "to_float"):
        return volume.to_float()
    return np.asarray(volume, dtype=np.float64)


def _checker_block(model):
    """Checkerboard cell: the widest kernel footprint, so a cell's sites
    mostly interact within the cell and its opposite-color ring. Sweeps
    run single threaded either way; visit order only changes which exact
    sample is drawn, never its distribution."""
    if not model.filters:
        return 1
    return max(f.size for f in model.filters)


def _visit_sites(sample_mask, visit, block):
    sites = np.argwhere(sample_mask)  # row-major: raster within each frame
    if visit == "checkerboard":
        parity = (sites[:, 1] // block + sites[:, 2] // block) % 2
        order = np.lexsort((sites[:, 2], sites[:, 1], parity, sites[:, 0]))
        sites = sites[order]
    return np.ascontiguousarray(sites, dtype=np.int64)


def _pack_kernels(filters):
    """Kernel prefix sums padded to a common box, one compiled sweep for
    any filter mix.

    prefix[k, dt, i, j] = sum of kernel[k][dt][:i, :j]. Responses are
    edge-clamped, so a border pixel carries the folded weight of every
    kernel cell that clamps onto it: a rectangle sum, O(1) per site from
    the prefix table.
    """
    if not filters:
        return (np.zeros((0, 1, 2, 2)), np.zeros(0, np.int64), np.zeros(0, np.int64))
    tmax = max(f.t_frames for f in filters)
    smax = max(f.size for f in filters)
    prefix = np.zeros((len(filters), tmax, smax + 1, smax + 1))
    tfr = np.zeros(len(filters), dtype=np.int64)
    ksize = np.zeros(len(filters), dtype=np.int64)
    for i, f in enumerate(filters):
        s = f.size
        for dt in range(f.t_frames):
            prefix[i, dt, 1 : s + 1, 1 : s + 1] = f.kernel[dt].cumsum(0).cumsum(1)
        tfr[i] = f.t_frames
        ksize[i] = f.size
    return prefix, tfr, ksize


@njit(cache=True)
def _sweep_kernel(state, responses, beta, edges, prefix, tfr, ksize,
                  pool, sites, values, uniforms):
    # Response at (t2, y2, x2) reads pixel rows clamp(y2 + row - c) and
    # columns clamp(x2 + col - c) of frame t2 - dt. Pixel (t, y, x) is
    # read by kernel rows r with clamp(y2 + r - c) == y: a contiguous run
    # (everything below c - y2 folds onto row 0, the top counterpart onto
    # the last row), so its effective weight is a rectangle sum of the
    # kernel, read from the prefix table. The energy delta of a candidate
    # value then needs only the responses within one footprint.
    n_filters = beta.shape[0]
    n_frames, height, width = state.shape
    n_levels = values.shape[0]
    last_bin = beta.shape[1] - 1
    denergy = np.empty(n_levels)
    weights = np.empty(n_levels)
    for si in range(sites.shape[0]):
        t = sites[si, 0]
        y = sites[si, 1]
        x = sites[si, 2]
        cur = state[t, y, x]
        for v in range(n_levels):
            denergy[v] = 0.0
        for k in range(n_filters):
            size = ksize[k]
            c = size // 2
            y2lo = max(y - (size - 1 - c), 0)
            y2hi = min(y + c, height - 1)
            x2lo = max(x - (size - 1 - c), 0)
            x2hi = min(x + c, width - 1)
            for dt in range(tfr[k]):
                t2 = t + dt
                if t2 >= n_frames:
                    break
                for y2 in range(y2lo, y2hi + 1):
                    r1 = 0 if y == 0 else y - y2 + c
                    r2 = size - 1 if y == height - 1 else y - y2 + c
                    if r1 < 0:
                        r1 = 0
                    if r2 > size - 1:
                        r2 = size - 1
                    if r1 > r2:
                        continue
                    for x2 in range(x2lo, x2hi + 1):
                        if not pool[k, t2, y2, x2]:
                            continue
                        c1 = 0 if x == 0 else x - x2 + c
                        c2 = size - 1 if x == width - 1 else x - x2 + c
                        if c1 < 0:
                            c1 = 0
                        if c2 > size - 1:
                            c2 = size - 1
                        if c1 > c2:
                            continue
                        wgt = (prefix[k, dt, r2 + 1, c2 + 1]
                               - prefix[k, dt, r1, c2 + 1]
                               - prefix[k, dt, r2 + 1, c1]
                               + prefix[k, dt, r1, c1])
                        if wgt == 0.0:
                            continue
                        r0 = responses[k, t2, y2, x2]
                        b0 = np.searchsorted(edges[k], r0, side="right") - 1
                        if b0 < 0:
                            b0 = 0
                        elif b0 > last_bin:
                            b0 = last_bin
                        base = beta[k, b0]
                        for v in range(n_levels):
                            r1v = r0 + wgt * (values[v] - cur)
                            b1 = np.searchsorted(edges[k], r1v, side="right") - 1
                            if b1 < 0:
                                b1 = 0
                            elif b1 > last_bin:
                                b1 = last_bin
                            denergy[v] += beta[k, b1] - base
        emin = denergy[0]
        for v in range(1, n_levels):
            if denergy[v] < emin:
                emin = denergy[v]
        total = 0.0
        for v in range(n_levels):
            weights[v] = np.exp(-(denergy[v] - emin))
            total += weights[v]
        u = uniforms[si] * total
        pick = n_levels - 1
        acc = 0.0
        for v in range(n_levels):
            acc += weights[v]
            if u < acc:
                pick = v
                break
        new = values[pick]
        if new != cur:
            delta = new - cur
            for k in range(n_filters):
                size = ksize[k]
                c = size // 2
                y2lo = max(y - (size - 1 - c), 0)
                y2hi = min(y + c, height - 1)
                x2lo = max(x - (size - 1 - c), 0)
                x2hi = min(x + c, width - 1)
                for dt in range(tfr[k]):
                    t2 = t + dt
                    if t2 >= n_frames:
                        break
                    for y2 in range(y2lo, y2hi + 1):
                        r1 = 0 if y == 0 else y - y2 + c
                        r2 = size - 1 if y == height - 1 else y - y2 + c
                        if r1 < 0:
                            r1 = 0
                        if r2 > size - 1:
                            r2 = size - 1
                        if r1 > r2:
                            continue
                        for x2 in range(x2lo, x2hi + 1):
                            if not pool[k, t2, y2, x2]:
                                continue
                            c1 = 0 if x == 0 else x - x2 + c
                            c2 = size - 1 if x == width - 1 else x - x2 + c
                            if c1 < 0:
                                c1 = 0
                            if c2 > size - 1:
                                c2 = size - 1
                            if c1 > c2:
                                continue
                            wgt = (prefix[k, dt, r2 + 1, c2 + 1]
                                   - prefix[k, dt, r1, c2 + 1]
                                   - prefix[k, dt, r2 + 1, c1]
                                   + prefix[k, dt, r1, c1])
                            responses[k, t2, y2, x2] += wgt * delta
            state[t, y, x] = new


class _SamplingContext:
    """Packed arrays reused across sweeps of one lattice."""

    def __init__(self, model, shape, region_mask=None):
        self.prefix, self.tfr, self.ksize = _pack_kernels(model.filters)
        self.pool = np.zeros((model.n_filters,) + shape, dtype=bool)
        for i, f in enumerate(model.filters):
            self.pool[i] = support_mask(shape, f, region_mask)
        self.edges = model.bin_edges

    def responses(self, model, state):
        if model.n_filters == 0:
            return np.zeros((0,) + state.shape)
        return np.stack([convolve(state, f) for f in model.filters])

    def histograms(self, model, responses):
        rows = []
        for k in range(model.n_filters):
            vals = responses[k][self.pool[k]]
            rows.append(build_histogram(vals, model.bin_edges[k]).mass)
        return np.array(rows) if rows else np.zeros((0, model.n_bins))


def gibbs_sweep(model, state, sample_mask, values, rng, pool_region=None,
                visit="raster", n_sweeps=1, context=None, responses=None):
    """Run single-site Gibbs scans over sample_mask, in place.

    Sites outside sample_mask are never written: preceding frames and any
    conditioned surround stay bit-identical, which is what stitches the
    synthesis seamlessly into its context. pool_region (default: the
    sample mask) picks the responses whose histogram the energy reads.
    """
    state = np.asarray(state)
    if state.dtype != np.float64:
        raise ValueError("state must be a float64 array of intensity levels")
    values = np.ascontiguousarray(values, dtype=np.float64)
    if pool_region is None:
        pool_region = sample_mask
    if context is None:
        context = _SamplingContext(model, state.shape, pool_region)
    sites = _visit_sites(sample_mask, visit, block=_checker_block(model))
    if responses is None:
        responses = context.responses(model, state)
    for _ in range(n_sweeps):
        uniforms = rng.random(sites.shape[0])
        if model.n_filters == 0:
            # no constraints: i.i.d. uniform over the levels
            picks = np.minimum((uniforms * len(values)).astype(np.int64),
                               len(values) - 1)
            state[sites[:, 0], sites[:, 1], sites[:, 2]] = values[picks]
            continue
        _sweep_kernel(state, responses, model.beta, context.edges,
                      context.prefix, context.tfr, context.ksize,
                      context.pool, sites, values, uniforms)
    return state


def chain_histogram_mean(model, state, sample_mask, values, rng, n_sweeps,
                         burn=0, visit="raster"):
    """Average pooled histograms over a long frozen-potential run.

    The Monte Carlo side of enumeration cross-checks: burn in, then
    collect the pooled histogram after every sweep.
    """
    context = _SamplingContext(model, state.shape, sample_mask)
    responses = context.responses(model, state)
    if burn:
        gibbs_sweep(model, state, sample_mask, values, rng, visit=visit,
                    n_sweeps=burn, context=context, responses=responses)
    acc = np.zeros((model.n_filters, model.n_bins))
    for _ in range(n_sweeps):
        gibbs_sweep(model, state, sample_mask, values, rng, visit=visit,
                    context=context, responses=responses)
        acc += context.histograms(model, responses)
    return acc / max(n_sweeps, 1)


def learn_potentials(observed, region_mask, filters, cfg=None, state=None,
                     sample_mask=None, targets=None, rng=None):
    """Fit potentials so sampled histograms match the observed ones.

    Iterates sample / pool / update until every filter's TV gap is within
    cfg.epsilon or cfg.max_iters sweeps pass; one sweep per update keeps
    the chain warm. Exceeding the cap is reported on the model via
    final_tv, not raised. The synthesis state evolves in place when
    supplied, so the caller gets the matched sample with the model.
    """
    cfg = cfg or SamplerConfig()
    filters = list(filters)
    data = _as_float(observed)
    values = level_values(cfg.bit_depth)
    if targets is None:
        targets = [
            pooled_histogram(data, f, n_bins=cfg.n_bins, region_mask=region_mask)
            for f in filters
        ]
    if targets:
        edges = np.array([t.bin_edges for t in targets])
        target_mass = np.array([t.mass for t in targets])
    else:
        edges = np.zeros((0, cfg.n_bins + 1))
        target_mass = np.zeros((0, cfg.n_bins))
    model = GibbsModel(filters=tuple(filters),
                       beta=np.zeros_like(target_mass),
                       bin_edges=edges, targets=target_mass,
                       bit_depth=cfg.bit_depth)
    rng = rng or np.random.default_rng(cfg.seed)
    if sample_mask is None:
        sample_mask = region_mask if region_mask is not None else np.ones(data.shape, dtype=bool)
    if state is None:
        state = data.copy()
        noise = values[rng.integers(0, len(values), size=int(sample_mask.sum()))]
        state[sample_mask] = noise
    context = _SamplingContext(model, state.shape, sample_mask)
    responses = context.responses(model, state)
    lr = cfg.learning_rate
    converged = False
    trace = []
    tv = np.zeros(len(filters))
    for it in range(cfg.max_iters):
        syn_mass = context.histograms(model, responses)
        tv = 0.5 * np.abs(syn_mass - target_mass).sum(axis=1)
        trace.append(tv)
        if not filters or tv.max() <= cfg.epsilon:
            converged = True
            model.n_iters = it
            break
        model.beta += lr * (syn_mass - target_mass)
        if cfg.decay_every and (it + 1) % cfg.decay_every == 0:
            lr *= cfg.lr_decay
        gibbs_sweep(model, state, sample_mask, values, rng, visit=cfg.visit,
                    context=context, responses=responses)
    if not converged:
        syn_mass = context.histograms(model, responses)
        tv = 0.5 * np.abs(syn_mass - target_mass).sum(axis=1)
        trace.append(tv)
        model.n_iters = cfg.max_iters
    model.final_tv = tv
    model.tv_trace = np.array(trace) if trace else np.zeros((0, len(filters)))
    return model


def draw_from_model(model, state, sample_mask, cfg=None, rng=None):
    """Resample a region under frozen potentials for cfg.sweeps rounds.

    This is the decode-side cost: no histogram bookkeeping, just sweeps.
    """
    cfg = cfg or SamplerConfig()
    rng = rng or np.random.default_rng(cfg.seed)
    values = level_values(cfg.bit_depth)
    return gibbs_sweep(model, state, sample_mask, values, rng,
                       visit=cfg.visit, n_sweeps=cfg.sweeps)


def _full_region(region_mask, shape):
    if region_mask is None:
        return np.ones(shape, dtype=bool)
    region_mask = np.asarray(region_mask, dtype=bool)
    if region_mask.ndim == 2:
        region_mask = np.repeat(region_mask[None], shape[0], axis=0)
    if region_mask.shape != shape:
        raise ValueError(f"region mask {region_mask.shape} does not fit volume {shape}")
    return region_mask


def synthesize_st(observed, region_mask, n_frames, bank, k, cfg=None):
    """Frame-by-frame texture synthesis conditioned on the frames so far.

    Filters are chosen once for the sequence; each new frame then starts
    from white noise and is sampled until its pooled histograms match the
    targets coded from the observed volume. Multi-frame filters reach
    back into already-synthesized frames, which is the only coupling that
    carries motion forward. Returns the synthesized volume plus per-frame
    convergence rows (frame, filter, tv, iterations).
    """
    cfg = cfg or SamplerConfig()
    volume = observed if isinstance(observed, VideoVolume) else make_volume(observed)
    working = quantize(volume, cfg.bit_depth)
    if working.frames < 3:
        raise ValueError("need at least 3 observed frames for motion statistics")
    data = working.to_float()
    region_mask = _full_region(region_mask, data.shape)
    values = level_values(cfg.bit_depth)
    rng = np.random.default_rng(cfg.seed)

    filters = _choose_filters(data, region_mask, bank, k, cfg)
    targets = {
        f.id: pooled_histogram(data, f, n_bins=cfg.n_bins, region_mask=region_mask)
        for f in filters
    }

    shape = (n_frames,) + data.shape[1:]
    syn = np.zeros(shape)
    for m in range(n_frames):
        syn[m] = data[min(m, working.frames - 1)]
    report = []
    for m in range(n_frames):
        frame_mask = np.zeros(shape, dtype=bool)
        frame_mask[m] = region_mask[min(m, working.frames - 1)]
        if not frame_mask.any():
            continue
        usable = [f for f in filters if f.min_frame <= m]
        noise = values[rng.integers(0, len(values), size=int(frame_mask.sum()))]
        syn[frame_mask] = noise
        model = learn_potentials(data, None, usable, cfg, state=syn,
                                 sample_mask=frame_mask,
                                 targets=[targets[f.id] for f in usable], rng=rng)
        for f, tv in zip(usable, model.final_tv):
            report.append({"frame": m, "filter": f.name, "tv": float(tv),
                           "iterations": model.n_iters})
    out = make_volume(np.rint(syn).astype(np.uint8), cfg.bit_depth)
    return out, report


def _choose_filters(data, region_mask, bank, k, cfg):
    """A fixed filter list passes through; a bank goes through greedy
    pursuit, with a budget-capped sampler standing in for the current
    model. The zero-filter model draws plain white noise."""
    if isinstance(bank, (list, tuple)):
        return list(bank)

    preview_cfg = SamplerConfig(
        sweeps=cfg.sweeps, epsilon=cfg.epsilon, learning_rate=cfg.learning_rate,
        lr_decay=cfg.lr_decay, decay_every=cfg.decay_every,
        max_iters=min(cfg.max_iters, 30), seed=cfg.seed,
        bit_depth=cfg.bit_depth, n_bins=cfg.n_bins, visit=cfg.visit)
    values = level_values(cfg.bit_depth)

    def sampler(chosen):
        rng = np.random.default_rng((preview_cfg.seed, len(chosen)))
        state = data.copy()
        noise = values[rng.integers(0, len(values), size=int(region_mask.sum()))]
        state[region_mask] = noise
        if chosen:
            learn_potentials(data, region_mask, list(chosen), preview_cfg,
                             state=state, sample_mask=region_mask, rng=rng)
        return state

    chosen, _, _ = pursue_filters(data, region_mask, bank, k, sampler,
                                  n_bins=cfg.n_bins)
    return chosen


def implicit_param_count(models, rule="histograms"):
    """Stored-parameter count across texture regions.

    "histograms": each region costs filters x bins, the coded targets.
    "stored-sampler" counts what a decoder keeps per region, targets plus
    potentials plus filter ids: filters x (2 x bins + 1).
    """
    total = 0
    for model in models:
        if hasattr(model, "n_filters"):
            k, bins = model.n_filters, model.n_bins
        else:
            k, bins = model
        if rule == "histograms":
            total += k * bins
        elif rule == "stored-sampler":
            total += k * (2 * bins + 1)
        else:
            raise ValueError(f"unknown accounting rule {rule!r}")
    return total


def sequence_param_count(n_frames, n_filters, n_bins=DEFAULT_BIN_COUNT,
                         t_support=3):
    """Decoder-side parameters for frame-by-frame texture synthesis.

    Only frames with full temporal filter support carry a model; each
    stores, per filter, the target histogram, the fitted potentials and
    the filter id. A 5-frame sequence under 3-frame filters has 3 coded
    frames; with 6 filters and 15 bins that is 3 * 6 * 31 = 558.
    """
    coded_frames = max(0, n_frames - (t_support - 1))
    return implicit_param_count([(n_filters, n_bins)] * coded_frames,
                                rule="stored-sampler")

"""Spatio-temporal filter bank for implicit texture modeling.

Kernels are sampled from analytic forms on a square window. Three
families: static (1 frame), motion (3 frames, the pattern displaced by a
velocity per frame), flicker (2 frames, second slice negated). LoG and
Gabor slices are DC-corrected per slice so textures are encoded by
structure, not brightness. Responses look backward in time: slice dt of a
kernel is applied to frame t - dt.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass(frozen=True)
class Filter:
    """One bank element. kernel has shape (t_frames, size, size); entry
    [dt, dy + r, dx + r] weights I(x + dx, y + dy, t - dt)."""

    id: int
    name: str
    kind: str            # intensity | gradient | log | gabor
    domain: str          # static | motion | flicker
    kernel: np.ndarray
    scale: int | None = None
    orientation: float | None = None
    velocity: tuple | None = None

    @property
    def t_frames(self):
        return self.kernel.shape[0]

    @property
    def min_frame(self):
        """First frame index with full temporal support."""
        return self.t_frames - 1

    @property
    def size(self):
        return self.kernel.shape[1]


@dataclass(frozen=True)
class FilterBankSpec:
    kernel_size: int = 7
    n_scales: int = 6
    n_orientations: int = 12
    speeds: tuple = (1.0, 2.0, 3.0)

    def __post_init__(self):
        if self.kernel_size % 2 != 1 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd and positive")
        if self.n_scales < 1 or self.n_orientations < 1 or len(self.speeds) < 1:
            raise ValueError("need at least one scale, orientation and speed")


@dataclass
class FilterBank:
    spec: FilterBankSpec
    filters: list = field(default_factory=list)

    def __len__(self):
        return len(self.filters)

    def __getitem__(self, i):
        return self.filters[i]

    def by_domain(self, domain):
        return [f for f in self.filters if f.domain == domain]


# -- analytic kernel forms ----------------------------------------------

def _grid(size, offset=(0.0, 0.0)):
    r = size // 2
    ys, xs = np.mgrid[-r : r + 1, -r : r + 1].astype(np.float64)
    return xs + offset[0], ys + offset[1]


def _dc_corrected(raw_fn, env_fn, size, offset):
    """Sample raw - c * envelope at the offset grid, with c fixed so the
    centered window sums to zero.

    Tying the correction to the decaying envelope (instead of an additive
    constant) keeps shifted slices translates of one corrected analytic
    form; the residual per-slice mean is then removed exactly.
    """
    raw0, env0 = raw_fn(*_grid(size)), env_fn(*_grid(size))
    c = raw0.sum() / env0.sum()
    xs, ys = _grid(size, offset)
    k = raw_fn(xs, ys) - c * env_fn(xs, ys)
    return k - k.mean()


def log_slice(size, sigma, offset=(0.0, 0.0)):
    """Laplacian-of-Gaussian sampled at integer grid + offset, DC-free."""
    s2 = sigma * sigma

    def raw(xs, ys):
        r2 = xs * xs + ys * ys
        return -1.0 / (math.pi * s2 * s2) * (1.0 - r2 / (2.0 * s2)) * np.exp(-r2 / (2.0 * s2))

    def env(xs, ys):
        return np.exp(-(xs * xs + ys * ys) / (2.0 * s2))

    return _dc_corrected(raw, env, size, offset)


def gabor_slice(size, wavelength, theta, phase="even", offset=(0.0, 0.0)):
    """Gabor with stripes oriented along theta; even (cos) or odd (sin).

    The carrier runs along the stripe normal (-sin theta, cos theta).
    """
    sigma = 0.5 * wavelength
    wave = np.cos if phase == "even" else np.sin

    def env(xs, ys):
        return np.exp(-(xs * xs + ys * ys) / (2.0 * sigma * sigma))

    def raw(xs, ys):
        u = -xs * math.sin(theta) + ys * math.cos(theta)
        return env(xs, ys) * wave(2.0 * math.pi * u / wavelength)

    return _dc_corrected(raw, env, size, offset)


def delta_slice(size, offset=(0.0, 0.0)):
    """Bilinear unit impulse at -offset (tent function at the grid)."""
    xs, ys = _grid(size, offset)
    return np.maximum(0.0, 1.0 - np.abs(xs)) * np.maximum(0.0, 1.0 - np.abs(ys))


def gradient_slice(size, axis):
    """Two-tap finite difference embedded at the window center."""
    k = np.zeros((size, size))
    r = size // 2
    k[r, r] = -1.0
    if axis == "x":
        k[r, r + 1] = 1.0
    else:
        k[r + 1, r] = 1.0
    return k


def _log_sigma(scale_index):
    # 1-based scale; sigmas grow geometrically from under a pixel. The
    # smallest sigma keeps the window-edge tail far below response noise
    # so displaced slices stay numerically exact translates.
    return 0.35 * (1.45 ** (scale_index - 1))


def _gabor_wavelength(scale_index):
    return 2.0 * scale_index + 2.0


# -- bank construction ---------------------------------------------------

def _static_elements(spec):
    """Yield (name, kind, scale, orientation, slice_builder) in bank order.

    slice_builder(offset) samples the analytic form shifted by offset.
    """
    size = spec.kernel_size
    yield ("intensity", "intensity", None, None, lambda off: delta_slice(size, off))
    yield ("grad_x", "gradient", None, None, lambda off: gradient_slice(size, "x"))
    yield ("grad_y", "gradient", None, None, lambda off: gradient_slice(size, "y"))
    for s in range(1, spec.n_scales + 1):
        sig = _log_sigma(s)
        yield (f"log_s{s}", "log", s, None,
               lambda off, sig=sig: log_slice(size, sig, off))
    for s in range(1, spec.n_scales + 1):
        lam = _gabor_wavelength(s)
        for o in range(spec.n_orientations):
            theta = math.pi * o / spec.n_orientations
            yield (f"gabor_s{s}_o{o}", "gabor", s, theta,
                   lambda off, lam=lam, th=theta: gabor_slice(size, lam, th, "even", off))


def _motion_kernel(builder, velocity, n_frames=3):
    """Stack slices tracking a pattern that moves by +velocity per frame.

    Slices are centered on the middle frame (t - 1): the slice applied to
    frame t samples the base displaced by +velocity, the trailing slice by
    -velocity. On rigidly moving video every slice then contributes the
    same response, aligned at the middle frame.
    """
    u, v = velocity
    mid = (n_frames - 1) // 2
    return np.stack([builder(((dt - mid) * u, (dt - mid) * v))
                     for dt in range(n_frames)])


def build_filter_bank(spec=None):
    """Enumerate the full bank in a fixed, documented order.

    Order: static intensity, gradients, LoG by scale, Gabor by scale then
    orientation; motion intensity (speed, direction), motion LoG (scale,
    speed, direction), motion Gabor (scale, orientation, speed; direction
    is the stripe normal); flicker twin of every static element.
    """
    spec = spec or FilterBankSpec()
    filters = []

    def add(name, kind, domain, kernel, scale=None, orientation=None, velocity=None):
        filters.append(Filter(
            id=len(filters), name=name, kind=kind, domain=domain,
            kernel=np.ascontiguousarray(kernel, dtype=np.float64),
            scale=scale, orientation=orientation, velocity=velocity,
        ))

    statics = list(_static_elements(spec))
    for name, kind, scale, theta, builder in statics:
        add(f"static_{name}", kind, "static", builder((0.0, 0.0))[None],
            scale=scale, orientation=theta)

    size = spec.kernel_size
    directions = [2.0 * math.pi * d / spec.n_orientations
                  for d in range(spec.n_orientations)]
    for speed in spec.speeds:
        for d, phi in enumerate(directions):
            vel = (speed * math.cos(phi), speed * math.sin(phi))
            add(f"motion_intensity_v{speed:g}_d{d}", "intensity", "motion",
                _motion_kernel(lambda off: delta_slice(size, off), vel), velocity=vel)
    for s in range(1, spec.n_scales + 1):
        sig = _log_sigma(s)
        for speed in spec.speeds:
            for d, phi in enumerate(directions):
                vel = (speed * math.cos(phi), speed * math.sin(phi))
                add(f"motion_log_s{s}_v{speed:g}_d{d}", "log", "motion",
                    _motion_kernel(lambda off, sig=sig: log_slice(size, sig, off), vel),
                    scale=s, velocity=vel)
    for s in range(1, spec.n_scales + 1):
        lam = _gabor_wavelength(s)
        for o in range(spec.n_orientations):
            theta = math.pi * o / spec.n_orientations
            normal = (-math.sin(theta), math.cos(theta))
            for speed in spec.speeds:
                vel = (speed * normal[0], speed * normal[1])
                add(f"motion_gabor_s{s}_o{o}_v{speed:g}", "gabor", "motion",
                    _motion_kernel(
                        lambda off, lam=lam, th=theta: gabor_slice(size, lam, th, "even", off),
                        vel),
                    scale=s, orientation=theta, velocity=vel)

    for name, kind, scale, theta, builder in statics:
        base = builder((0.0, 0.0))
        add(f"flicker_{name}", kind, "flicker", np.stack([base, -base]),
            scale=scale, orientation=theta)

    return FilterBank(spec=spec, filters=filters)


def bank_size(spec):
    """Closed-form element count for a spec."""
    s, o, v = spec.n_scales, spec.n_orientations, len(spec.speeds)
    n_static = 3 + s + s * o
    n_motion = v * o + s * v * o + s * o * v
    return 2 * n_static + n_motion


# -- convolution and pooling ---------------------------------------------

def convolve(volume, filt):
    """Response map of one filter over a volume.

    Spatial borders are edge-clamped. Frames before filt.min_frame lack
    temporal support and are left at zero; exclude them when pooling.
    volume may be a VideoVolume or a float array shaped (t, h, w).
    """
    data = volume.to_float() if hasattr(volume, "to_float") else np.asarray(volume, dtype=np.float64)
    n_frames = data.shape[0]
    out = np.zeros_like(data)
    for t in range(filt.min_frame, n_frames):
        acc = out[t]
        for dt in range(filt.t_frames):
            acc += ndimage.correlate(data[t - dt], filt.kernel[dt], mode="nearest")
    return out


def support_mask(volume_shape, filt, region_mask=None):
    """Sites whose response is defined: temporal support, optional region."""
    mask = np.zeros(volume_shape, dtype=bool)
    mask[filt.min_frame :] = True
    if region_mask is not None:
        mask &= region_mask
    return mask


def pooled_histogram(volume, filt, n_bins=15, edges=None, region_mask=None,
                     responses=None):
    """Histogram of a filter's responses pooled over a region.

    Bin edges freeze to the pooled min/max when not supplied; pass the
    observed-side edges when histogramming a synthesis.
    """
    from .video import build_histogram, make_bin_edges

    if responses is None:
        responses = convolve(volume, filt)
    shape = responses.shape
    mask = support_mask(shape, filt, region_mask)
    vals = responses[mask]
    if vals.size == 0:
        raise ValueError(
            f"filter {filt.name} has no supported responses in the region"
        )
    if edges is None:
        edges = make_bin_edges(vals.min(), vals.max(), n_bins)
    return build_histogram(vals, edges)


def pursue_filters(observed, region_mask, bank, k, current_model_sampler,
                   n_bins=15, min_gain=0.0):
    """Greedy filter selection by largest histogram gap.

    At each step the current model synthesizes via the callback (called
    with the chosen-so-far filters); the candidate whose observed-vs-
    synthesized histogram gap (L1 over bins) is largest joins the model.
    Ties break toward the lower filter id. Returns (filters, gains,
    target_histograms).
    """
    from .video import l1_gap

    candidates = list(bank.filters if hasattr(bank, "filters") else bank)
    targets = {}
    for f in candidates:
        targets[f.id] = pooled_histogram(observed, f, n_bins=n_bins,
                                         region_mask=region_mask)
    chosen, gains = [], []
    chosen_ids = set()
    for _ in range(k):
        syn = current_model_sampler(chosen)
        syn_region = None
        if region_mask is not None and getattr(syn, "data", syn).shape == observed.data.shape:
            syn_region = region_mask
        best_gap, best_f = -1.0, None
        for f in candidates:
            if f.id in chosen_ids:
                continue
            h_obs = targets[f.id]
            h_syn = pooled_histogram(syn, f, edges=h_obs.bin_edges,
                                     region_mask=syn_region)
            gap = l1_gap(h_syn, h_obs)
            if gap > best_gap + 1e-12:
                best_gap, best_f = gap, f
        if best_f is None or best_gap < min_gain:
            break
        chosen.append(best_f)
        chosen_ids.add(best_f.id)
        gains.append(best_gap)
    return chosen, gains, [targets[f.id] for f in chosen]


# -- serialization -------------------------------------------------------

def bank_to_json(bank, path=None):
    """Self-describing JSON: the spec plus kernel values per filter."""
    doc = {
        "spec": {
            "kernel_size": bank.spec.kernel_size,
            "n_scales": bank.spec.n_scales,
            "n_orientations": bank.spec.n_orientations,
            "speeds": list(bank.spec.speeds),
        },
        "filters": [
            {
                "id": f.id,
                "name": f.name,
                "kind": f.kind,
                "domain": f.domain,
                "scale": f.scale,
                "orientation": f.orientation,
                "velocity": list(f.velocity) if f.velocity else None,
                "kernel": f.kernel.tolist(),
            }
            for f in bank.filters
        ],
    }
    text = json.dumps(doc)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def bank_from_json(source):
    """Inverse of bank_to_json; accepts a JSON string or a file path."""
    if isinstance(source, str) and source.lstrip().startswith("{"):
        doc = json.loads(source)
    else:
        with open(source) as fh:
            doc = json.load(fh)
    spec = FilterBankSpec(
        kernel_size=doc["spec"]["kernel_size"],
        n_scales=doc["spec"]["n_scales"],
        n_orientations=doc["spec"]["n_orientations"],
        speeds=tuple(doc["spec"]["speeds"]),
    )
    filters = [
        Filter(
            id=d["id"], name=d["name"], kind=d["kind"], domain=d["domain"],
            kernel=np.asarray(d["kernel"], dtype=np.float64),
            scale=d["scale"], orientation=d["orientation"],
            velocity=tuple(d["velocity"]) if d["velocity"] else None,
        )
        for d in doc["filters"]
    ]
    return FilterBank(spec=spec, filters=filters)

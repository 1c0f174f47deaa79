"""Sparse-coding primitives for the explicit regions.

Common primitives compress an 11x11 patch to an 11-value 1D profile:
a cross-section swept along the stroke orientation (edges, ridges) or
around the center (blobs). Profile extraction is the exact least-squares
projection onto the span of bilinear profile-interpolation weights, so
rendering a primitive back never increases residual energy. Special
primitives store the full patch verbatim and exist for trackable content
that no profiled primitive explains.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .filters import gabor_slice, log_slice

PRIMITIVE_SIZE = 11

COMMON_KINDS = ("common-edge", "common-ridge", "common-blob")


@dataclass(frozen=True)
class SketchElement:
    """One bank entry: a unit-norm, zero-mean 11x11 kernel."""

    filter_id: int
    kind: str  # edge | ridge | blob
    orientation: float | None
    scale: int
    kernel: np.ndarray


@dataclass(frozen=True)
class SketchFilterBank:
    elements: tuple
    size: int = PRIMITIVE_SIZE

    def __len__(self):
        return len(self.elements)

    @property
    def kernels(self):
        return np.stack([el.kernel for el in self.elements])


def _normalized(kernel):
    k = kernel - kernel.mean()
    norm = np.linalg.norm(k)
    if norm <= 1e-12:
        raise ValueError("degenerate sketch kernel")
    return k / norm


def build_sketch_bank(n_orientations=18, n_scales=8, size=PRIMITIVE_SIZE):
    """Gabor pairs on an orientations x scales grid, plus one blob per scale.

    The even (cosine) phase responds to ridges, the odd (sine) phase to
    step edges; blobs are Laplacian-of-Gaussian kernels. Wavelengths run
    3..(2 + n_scales) px so the largest period still fits the window.
    """
    elements = []
    for s in range(n_scales):
        wavelength = 3.0 + s
        for o in range(n_orientations):
            theta = math.pi * o / n_orientations
            for phase, kind in (("even", "ridge"), ("odd", "edge")):
                k = _normalized(gabor_slice(size, wavelength, theta, phase=phase))
                elements.append(SketchElement(len(elements), kind, theta, s, k))
    for s in range(n_scales):
        sigma = 0.35 * 1.45 ** s
        k = _normalized(log_slice(size, sigma))
        elements.append(SketchElement(len(elements), "blob", None, s, k))
    return SketchFilterBank(elements=tuple(elements), size=size)


def fit_filter(patch, bank):
    """Best bank element for a patch: argmax |<patch - mean, kernel>|.

    Returns (filter id, signed coefficient); ties go to the lowest id.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if patch.shape != (bank.size, bank.size):
        raise ValueError(f"patch shape {patch.shape} does not match bank size {bank.size}")
    centered = patch - patch.mean()
    coeffs = np.tensordot(bank.kernels, centered, axes=([1, 2], [0, 1]))
    best = int(np.argmax(np.abs(coeffs)))
    return best, float(coeffs[best])


# -- profiles ---------------------------------------------------------------

def _offset_grid(size):
    r = size // 2
    d = np.arange(size) - r
    return np.meshgrid(d, d)  # dx, dy with dy varying along rows


def _bilinear_weights(coords, n_knots, lo):
    """Rows of bilinear interpolation weights onto knots lo, lo+1, ..."""
    c = np.clip(coords, lo, lo + n_knots - 1)
    base = np.floor(c).astype(int)
    base = np.minimum(base, lo + n_knots - 2)
    frac = c - base
    w = np.zeros((coords.size, n_knots))
    rows = np.arange(coords.size)
    w[rows, base - lo] = 1.0 - frac
    w[rows, base - lo + 1] += frac
    return w


def _profile_weights(orientation, size=PRIMITIVE_SIZE):
    """Weights mapping an 11-value cross-section profile to patch pixels.

    The profile axis is the stroke normal; pixels sharing a projection
    share a value, which is what makes the render constant along the
    stroke orientation.
    """
    dx, dy = _offset_grid(size)
    nx, ny = -math.sin(orientation), math.cos(orientation)
    proj = (dx * nx + dy * ny).ravel()
    r = size // 2
    return _bilinear_weights(proj, size, -r)


def _radial_weights(size=PRIMITIVE_SIZE):
    """Weights mapping a 6-value radial profile (r = 0..5) to pixels;
    corner radii clamp into the outermost knot."""
    dx, dy = _offset_grid(size)
    rad = np.hypot(dx, dy).ravel()
    return _bilinear_weights(rad, size // 2 + 1, 0)


def _project_profile(patch, weights):
    """Least-squares profile and its render; exact orthogonal projection."""
    q, *_ = np.linalg.lstsq(weights, patch.ravel(), rcond=None)
    render = (weights @ q).reshape(patch.shape)
    return q, render


N_PROFILE_ORIENTATIONS = 18

_profile_operators = {}


def _profile_operator(orientation):
    key = round(float(orientation), 12)
    op = _profile_operators.get(key)
    if op is None:
        w = _profile_weights(orientation)
        op = (w, np.linalg.pinv(w))
        _profile_operators[key] = op
    return op


@dataclass(frozen=True, eq=False)
class Primitive:
    """A dictionary element: profiled common patch or verbatim special."""

    kind: str
    profile: np.ndarray  # 11 values (common) or 11x11 (special)
    orientation: float | None = None
    scale: int | None = None
    source_filter: int | None = None
    velocity: tuple | None = None

    def __post_init__(self):
        prof = np.asarray(self.profile, dtype=np.float64)
        if self.kind == "special":
            if prof.shape != (PRIMITIVE_SIZE, PRIMITIVE_SIZE):
                raise ValueError("special primitives store the full 11x11 patch")
        elif self.kind in COMMON_KINDS:
            if prof.shape != (PRIMITIVE_SIZE,):
                raise ValueError("common primitives store an 11-value profile")
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "profile", prof)

    @property
    def n_frames(self):
        return 3 if self.velocity is not None else 1

    def render(self, dt=0):
        """11x11 patch at frame offset dt; content shifts by dt * velocity.

        Samples outside the stored support clamp to its edge.
        """
        size = PRIMITIVE_SIZE
        r = size // 2
        u, v = self.velocity if self.velocity is not None else (0, 0)
        dx, dy = _offset_grid(size)
        sx = dx - dt * u
        sy = dy - dt * v
        if self.kind == "special":
            iy = np.clip(sy + r, 0, size - 1)
            ix = np.clip(sx + r, 0, size - 1)
            return self.profile[iy, ix]
        knots = np.arange(-r, r + 1, dtype=np.float64)
        if self.kind == "common-blob":
            rad = np.clip(np.hypot(sx, sy), 0, r)
            return np.interp(rad.ravel(), knots[r:], self.profile[r:]).reshape(size, size)
        nx, ny = -math.sin(self.orientation), math.cos(self.orientation)
        proj = np.clip(sx * nx + sy * ny, -r, r)
        return np.interp(proj.ravel(), knots, self.profile).reshape(size, size)


@dataclass(frozen=True)
class Placement:
    """One primitive instance: top-left anchor (x, y) at frame t."""

    primitive_id: int
    x: int
    y: int
    t: int
    coefficient: float = 0.0
    sigma2: float = 0.0


def generate_primitive(patch, element):
    """Profile a patch along the fitted element's geometry.

    Gabor-like fits average along the stroke orientation (edge for odd
    phase, ridge for even); blob fits average circularly. Averaging is the
    least-squares projection, so re-rendering reproduces the projection
    exactly and residual energy never exceeds the patch's. The filter
    decides the primitive family; the profile orientation is re-picked
    over the full orientation grid by least residual, because the raw
    response argmax tilts away from the true stroke direction when the
    stroke is off-center in the patch.
    """
    patch = np.asarray(patch, dtype=np.float64)
    if element.kind == "blob":
        q6, _ = _project_profile(patch, _radial_weights())
        profile = np.concatenate([q6[:0:-1], q6])
        return Primitive(kind="common-blob", profile=profile, scale=element.scale,
                         source_filter=element.filter_id)
    flat = patch.ravel()
    candidates = [math.pi * o / N_PROFILE_ORIENTATIONS
                  for o in range(N_PROFILE_ORIENTATIONS)]
    if element.orientation is not None and element.orientation not in candidates:
        candidates.append(element.orientation)
    best = None
    for theta in candidates:
        w, w_pinv = _profile_operator(theta)
        q = w_pinv @ flat
        resid = float(((flat - w @ q) ** 2).sum())
        if best is None or resid < best[0] - 1e-9 * (1.0 + best[0]):
            best = (resid, theta, q)
    _, theta, q = best
    kind = "common-edge" if element.kind == "edge" else "common-ridge"
    return Primitive(kind=kind, profile=q, orientation=theta,
                     scale=element.scale, source_filter=element.filter_id)


def attach_velocity(primitive, velocities, probs, cfg=None):
    """Set the primitive's velocity to the posterior argmax; a posterior
    whose entropy reaches the threshold flags the primitive intrackable
    (velocity None, 1-frame replay)."""
    from .sketch import EntropyConfig

    cfg = cfg or EntropyConfig()
    probs = np.asarray(probs, dtype=np.float64)
    nz = probs[probs > 0]
    entropy = float(-(nz * np.log(nz)).sum())
    if entropy >= cfg.entropy_threshold:
        return replace(primitive, velocity=None)
    best = velocities[int(np.argmax(probs))]
    return replace(primitive, velocity=(int(best[0]), int(best[1])))


def extract_special_primitives(volume, bricks, cfg=None):
    """Verbatim 11x11 primitives for trackable bricks, velocity attached
    from the velocity posterior at each brick's center."""
    from .sketch import EntropyConfig, velocity_posterior

    cfg = cfg or EntropyConfig()
    data = volume.to_float() if hasattr(volume, "to_float") else np.asarray(volume, dtype=np.float64)
    primitives = []
    placements = []
    r = PRIMITIVE_SIZE // 2
    for brick in bricks:
        if brick.n_frames != 3:
            raise ValueError("special primitives come from 3-frame trackable bricks")
        patch = data[brick.t, brick.y : brick.y + brick.size, brick.x : brick.x + brick.size]
        grid, probs = velocity_posterior(
            data[brick.t - 1], data[brick.t], (brick.x + r, brick.y + r), cfg)
        best = grid[int(np.argmax(probs))]
        prim = Primitive(kind="special", profile=patch,
                         velocity=(int(best[0]), int(best[1])))
        placements.append(Placement(primitive_id=len(primitives),
                                    x=brick.x, y=brick.y, t=brick.t))
        primitives.append(prim)
    return primitives, placements


# -- matching pursuit -------------------------------------------------------

def _response_stack(work, bank):
    return np.stack([ndimage.correlate(work, el.kernel, mode="nearest")
                     for el in bank.elements])


def matching_pursuit(frame, bank, max_count=None, suppression_radius=7.0,
                     stop_factor=3.0, t=0):
    """Greedy sparse instancing of one frame with free placement.

    Repeatedly takes the (filter, position) pair with the largest absolute
    response, profiles the observed patch there into a primitive, and
    suppresses further selections within suppression_radius. Responses
    come from the observed frame throughout: local suppression, not
    residual subtraction, prevents duplicate strokes, so every primitive
    codes observed content rather than subtraction artifacts. Stops when
    the best remaining response falls under stop_factor times the median
    absolute response, or at max_count placements.
    """
    work = np.asarray(frame, dtype=np.float64)
    h, w = work.shape
    size = bank.size
    r = size // 2
    if h < size or w < size:
        raise ValueError("frame smaller than the primitive size")
    allowed = np.zeros((h, w), dtype=bool)
    allowed[r : h - r, r : w - r] = True
    responses = _response_stack(work, bank)
    abs_resp = np.abs(responses)
    threshold = stop_factor * np.median(abs_resp[:, allowed])
    # numerical floor: DC-free kernels leave ~1e-13 dust on flat frames
    threshold = max(threshold, 1e-8 * (1.0 + np.abs(work).max()))
    ys, xs = np.mgrid[0:h, 0:w]
    placements = []
    primitives = []
    while max_count is None or len(placements) < max_count:
        masked = abs_resp * allowed[None, :, :]
        fid, cy, cx = np.unravel_index(int(np.argmax(masked)), masked.shape)
        best = masked[fid, cy, cx]
        if best <= threshold:
            break
        patch = work[cy - r : cy + r + 1, cx - r : cx + r + 1]
        prim = generate_primitive(patch, bank.elements[fid])
        placements.append(Placement(
            primitive_id=len(primitives), x=int(cx - r), y=int(cy - r), t=t,
            coefficient=float(responses[fid, cy, cx]),
            sigma2=float(((patch - prim.render()) ** 2).mean())))
        primitives.append(prim)
        allowed &= (ys - cy) ** 2 + (xs - cx) ** 2 > suppression_radius ** 2
    return placements, primitives


# -- reconstruction and accounting -------------------------------------------

def reconstruct_explicit(placements, dictionary, volume, suppression_radius=7.0):
    """Render all placements into an empty volume and score them.

    Returns (reconstruction, covered mask, err_ex); err_ex is the mean
    absolute intensity difference over covered sites normalized by the
    intensity range, or None when nothing is covered. Placements sharing
    a frame must keep centers farther apart than the suppression radius;
    overlapping domains paint in order, later placements on top.
    """
    data = volume.to_float() if hasattr(volume, "to_float") else np.asarray(volume, dtype=np.float64)
    max_value = volume.max_value if hasattr(volume, "max_value") else 255
    size = PRIMITIVE_SIZE
    r = size // 2
    by_frame = {}
    for pl in placements:
        by_frame.setdefault(pl.t, []).append((pl.x + r, pl.y + r))
    for t, centers in by_frame.items():
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                dx = centers[i][0] - centers[j][0]
                dy = centers[i][1] - centers[j][1]
                if dx * dx + dy * dy <= suppression_radius ** 2:
                    raise ValueError(
                        f"placements at {centers[i]} and {centers[j]} in frame {t} "
                        f"violate the {suppression_radius}px spacing rule")
    recon = np.zeros_like(data)
    mask = np.zeros(data.shape, dtype=bool)
    for pl in placements:
        prim = dictionary[pl.primitive_id]
        offsets = (-1, 0, 1) if prim.velocity is not None else (0,)
        for dt in offsets:
            f = pl.t + dt
            if not (0 <= f < data.shape[0]):
                continue
            block = (slice(f, f + 1), slice(pl.y, pl.y + size), slice(pl.x, pl.x + size))
            recon[block] = prim.render(dt)
            mask[block] = True
    if not mask.any():
        return recon, mask, None
    err = float(np.abs(recon[mask] - data[mask]).mean() / max_value)
    return recon, mask, err


@dataclass(frozen=True)
class ExplicitParamCount:
    explicit: int
    velocity: int
    n_common: int
    n_special: int


def explicit_param_count(placements, dictionary):
    """Parameter accounting: 12 per common placement (11-value profile +
    type), 123 per special (121 verbatim values + its 2 velocity
    components); common trackable velocities are counted separately."""
    explicit = velocity = n_common = n_special = 0
    for pl in placements:
        prim = dictionary[pl.primitive_id]
        if prim.kind == "special":
            explicit += PRIMITIVE_SIZE * PRIMITIVE_SIZE + 2
            n_special += 1
        else:
            explicit += PRIMITIVE_SIZE + 1
            n_common += 1
            if prim.velocity is not None:
                velocity += 2
    return ExplicitParamCount(explicit=explicit, velocity=velocity,
                              n_common=n_common, n_special=n_special)

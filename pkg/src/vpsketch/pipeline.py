"""End-to-end encoder and synthesizer.

encode() partitions a clip into explicit bricks and implicit texture
regions, fits one primitive per brick and one texture model per region,
and packs everything into a VpsCode. synthesize() decodes: primitives
render first, then each region is Gibbs-sampled frame by frame against
the archived target histograms with the explicit sites held fixed, so
texture grows seamlessly into the sketch. Potentials are relearned at
decode time; the archive carries targets only.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .filters import FilterBankSpec, build_filter_bank, pooled_histogram, \
    pursue_filters, support_mask, convolve
from .ma_frame import MaConfig, MaModel, cluster_map_from_statistics, learn_ma, \
    occlusion_masks, velocity_statistics
from .primitives import Placement, build_sketch_bank, \
    extract_special_primitives, fit_filter, generate_primitive, attach_velocity, \
    reconstruct_explicit
from .sketch import EntropyConfig, partition, velocity_posterior, \
    _normalized_dictionary, _posterior_from_ssd, _entropy_of_weights
from .st_frame import GibbsModel, SamplerConfig, learn_potentials, level_values
from .video import Histogram, VideoVolume, bin_index, make_bin_edges, \
    make_volume, quantize
from .vpscode import VpsCode


@dataclass(frozen=True)
class PipelineConfig:
    """One knob set for the whole encode/decode path.

    model picks the texture family for every implicit region: "st"
    constrains spatio-temporal filter histograms, "ma" constrains
    appearance histograms plus clustered velocity histograms. Filter
    names, when given, skip pursuit; fast_pursuit scores all candidate
    gaps against the initial unconstrained synthesis instead of
    re-synthesizing after each accepted filter.
    """

    model: str = "ma"
    seed: int = 0
    n_regions: int = 2
    v_max: int = 3
    h0: float | None = None
    patch_size: int = 11
    bank_spec: FilterBankSpec = field(default_factory=FilterBankSpec)
    k_filters: int = 4
    st_filter_names: tuple | None = None
    ma_filter_names: tuple = ("static_intensity", "static_grad_x",
                              "static_grad_y", "flicker_intensity")
    k_v: int = 2
    fast_pursuit: bool = False
    sketch_orientations: int = 18
    sketch_scales: int = 8
    st: SamplerConfig = field(default_factory=SamplerConfig)
    ma: MaConfig = field(default_factory=MaConfig)

    def __post_init__(self):
        if self.model not in ("st", "ma"):
            raise ValueError(f"unknown implicit model family {self.model!r}")
        if self.k_v < 1:
            raise ValueError("k_v must be >= 1")

    def entropy_config(self):
        return EntropyConfig(patch_size=self.patch_size, v_max=self.v_max,
                             h0=self.h0, n_regions=self.n_regions)


@dataclass
class SynthesisReport:
    """Quality summary of one synthesis (or one observed/synthesized pair).

    err_ex is the mean absolute intensity gap over explicit sites,
    normalized by the intensity range; err_im is the mean L1 gap between
    pooled filter-response histograms, one term per (region, filter)
    channel. err_ex lies in [0, 1]; the L1 gap lies in [0, 2] for
    normalized histograms (halve it for total variation).
    """

    err_ex: float | None = None
    err_im: float | None = None
    frame_err_ex: list = field(default_factory=list)
    frame_err_im: list = field(default_factory=list)
    filter_tv: dict = field(default_factory=dict)
    convergence: list = field(default_factory=list)
    runtime: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.err_ex is not None and not (0.0 <= self.err_ex <= 1.0):
            raise ValueError(f"err_ex {self.err_ex} outside [0, 1]")
        if self.err_im is not None and not (0.0 <= self.err_im <= 2.0):
            raise ValueError(f"err_im {self.err_im} outside [0, 2]")


# -- explicit coding -------------------------------------------------------

def _patch_sketch_entropy(patch, dictionary, cfg):
    """Posterior entropy over dictionary elements for one patch; equals
    the sketchability map value at the patch center away from borders."""
    kernels = _normalized_dictionary(dictionary)
    flat = np.asarray(patch, dtype=np.float64).ravel()
    n_pix = flat.size
    energy = max(float((flat * flat).sum() - flat.sum() ** 2 / n_pix), 0.0)
    ssd = np.array([[max(energy - float(k.ravel() @ flat) ** 2, 0.0)]
                    for k in kernels])
    return float(_entropy_of_weights(_posterior_from_ssd(ssd, n_pix, cfg.sigma))[0])


def _code_explicit(volume, labeling, sketch_bank, ecfg):
    """One primitive per brick.

    Sketchable bricks become profiled common primitives (trackable ones
    carry a velocity); trackable bricks no profile explains become
    verbatim specials. Common placements come out in greedy order,
    largest |coefficient| first; specials follow.
    """
    data = volume.to_float()
    commons = []
    specials = []
    for brick in labeling.bricks:
        patch = data[brick.t, brick.y : brick.y + brick.size,
                     brick.x : brick.x + brick.size]
        fid, coeff = fit_filter(patch, sketch_bank)
        if brick.n_frames == 3:
            if _patch_sketch_entropy(patch, sketch_bank.elements, ecfg) \
                    >= ecfg.entropy_threshold:
                specials.append(brick)
                continue
            prim = generate_primitive(patch, sketch_bank.elements[fid])
            r = brick.size // 2
            grid, probs = velocity_posterior(
                data[brick.t - 1], data[brick.t],
                (brick.x + r, brick.y + r), ecfg)
            prim = attach_velocity(prim, grid, probs, ecfg)
        else:
            prim = generate_primitive(patch, sketch_bank.elements[fid])
        sigma2 = float(((patch - prim.render()) ** 2).mean())
        commons.append((abs(coeff), brick, prim,
                        Placement(primitive_id=0, x=brick.x, y=brick.y,
                                  t=brick.t, coefficient=coeff, sigma2=sigma2)))
    commons.sort(key=lambda rec: (-rec[0], rec[3].t, rec[3].y, rec[3].x))
    dictionary = []
    placements = []
    for _, _, prim, pl in commons:
        placements.append(replace(pl, primitive_id=len(dictionary)))
        dictionary.append(prim)
    if specials:
        prims, places = extract_special_primitives(volume, specials, ecfg)
        base = len(dictionary)
        dictionary.extend(prims)
        placements.extend(replace(pl, primitive_id=pl.primitive_id + base)
                          for pl in places)
    return dictionary, placements


# -- implicit coding -------------------------------------------------------

def _named_filters(bank, names):
    by_name = {f.name: f for f in bank.filters}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise ValueError(f"bank has no filters named {missing}")
    return [by_name[n] for n in names]


def _pursued_filters(data, region3d, bank, cfg):
    """Greedy histogram-gap pursuit over the bank for one region."""
    st = cfg.st
    values = level_values(st.bit_depth)
    preview = replace(st, max_iters=min(st.max_iters, 30))
    n_region = int(region3d.sum())

    def sampler(chosen):
        rng = np.random.default_rng((st.seed, len(chosen)))
        state = data.copy()
        state[region3d] = values[rng.integers(len(values), size=n_region)]
        if chosen and not cfg.fast_pursuit:
            learn_potentials(data, region3d, list(chosen), preview,
                             state=state, sample_mask=region3d, rng=rng)
        return state

    chosen, _, _ = pursue_filters(data, region3d, bank, cfg.k_filters,
                                  sampler, n_bins=st.n_bins)
    return chosen


def _fit_st_model(volume, region3d, rid, bank, cfg):
    st = cfg.st
    data = quantize(volume, st.bit_depth).to_float()
    if cfg.st_filter_names is not None:
        filters = _named_filters(bank, cfg.st_filter_names)
    else:
        filters = _pursued_filters(data, region3d, bank, cfg)
    targets = [pooled_histogram(data, f, n_bins=st.n_bins, region_mask=region3d)
               for f in filters]
    k = len(filters)
    return GibbsModel(
        filters=tuple(filters),
        beta=np.zeros((k, st.n_bins)),
        bin_edges=(np.stack([t.bin_edges for t in targets])
                   if k else np.zeros((0, st.n_bins + 1))),
        targets=(np.stack([t.mass for t in targets])
                 if k else np.zeros((0, st.n_bins))),
        region=rid, bit_depth=st.bit_depth)


def _fit_ma_model(volume, labeling, rid, bank, cfg):
    ma = cfg.ma
    work = quantize(volume, ma.bit_depth)
    data = work.to_float()
    region3d = labeling.label_map == rid
    union2d = region3d.any(axis=0)
    occ3d = occlusion_masks(labeling)

    k_v = min(cfg.k_v, int(union2d.sum()))
    stats = velocity_statistics(
        work, union2d, k_v,
        cfg=EntropyConfig(patch_size=ma.patch_size, v_max=ma.v_max),
        seed=cfg.seed)
    stats = [(mem, hist) for mem, hist in stats if mem]
    targets_v = np.stack([hist.mass for _, hist in stats])
    cluster_map = cluster_map_from_statistics(stats, union2d.shape)

    filters = tuple(_named_filters(bank, cfg.ma_filter_names))
    k = len(filters)
    edges = np.zeros((k, ma.n_bins + 1))
    targets_s = np.zeros((k, ma.n_bins))
    for i, f in enumerate(filters):
        mask = support_mask(data.shape, f, region3d)
        if f.domain == "flicker":
            mask &= ~occ3d
        vals = convolve(data, f)[mask]
        if vals.size == 0:
            raise ValueError(f"filter {f.name} has no pooled sites in region {rid}")
        edges[i] = make_bin_edges(vals.min(), vals.max(), ma.n_bins)
        targets_s[i] = np.bincount(bin_index(vals, edges[i]),
                                   minlength=ma.n_bins) / vals.size
    return MaModel(
        filters=filters, beta_s=np.zeros((k, ma.n_bins)), bin_edges=edges,
        targets_s=targets_s, cluster_map=cluster_map, targets_v=targets_v,
        beta_v=np.zeros_like(targets_v), v_max=ma.v_max, m=ma.m,
        smoothness=ma.smoothness, bit_depth=ma.bit_depth,
        omega_mode=ma.omega_mode)


def encode(video, config=None):
    """Partition, sparse-code the bricks, fit a texture model per region.

    Deterministic given config.seed. Returns a validated VpsCode with
    accounting filled in; potentials are left at zero (the decoder
    relearns them from the stored targets).
    """
    cfg = config or PipelineConfig()
    volume = video if isinstance(video, VideoVolume) else make_volume(video)
    if volume.frames < 3:
        raise ValueError("encoding needs at least 3 frames")
    ecfg = cfg.entropy_config()
    sketch_bank = build_sketch_bank(n_orientations=cfg.sketch_orientations,
                                    n_scales=cfg.sketch_scales)
    labeling = partition(volume, ecfg, dictionary=sketch_bank.elements,
                         rng=np.random.default_rng(cfg.seed))
    dictionary, placements = _code_explicit(volume, labeling, sketch_bank, ecfg)
    bank = build_filter_bank(cfg.bank_spec)
    models = {}
    for rid in labeling.implicit_region_ids:
        if cfg.model == "st":
            models[rid] = _fit_st_model(volume, labeling.label_map == rid,
                                        rid, bank, cfg)
        else:
            models[rid] = _fit_ma_model(volume, labeling, rid, bank, cfg)
    return VpsCode(labeling=labeling, dictionary=dictionary,
                   placements=placements, models=models,
                   bank_spec=cfg.bank_spec, bit_depth=volume.bit_depth)


# -- synthesis ---------------------------------------------------------------

def _rescale(values, from_depth, to_depth):
    if from_depth == to_depth:
        return values
    return values * (((1 << to_depth) - 1) / ((1 << from_depth) - 1))


def _frame_labels(labeling, t):
    """Label slice for frame t; frames past the coded window reuse the
    last coded frame's partition."""
    return labeling.label_map[min(t, labeling.label_map.shape[0] - 1)]


def _synthesize_st_frame(model, st_state, m, mask2d, cfg, rng, report_rows, rid):
    """White-noise the frame's region sites, then learn-and-sample until
    their pooled histograms match the archived targets."""
    frame_mask = np.zeros(st_state.shape, dtype=bool)
    frame_mask[m] = mask2d
    values = level_values(model.bit_depth)
    st_state[frame_mask] = values[rng.integers(len(values), size=int(mask2d.sum()))]
    rows = [i for i, f in enumerate(model.filters) if f.min_frame <= m]
    if not rows:
        return
    usable = [model.filters[i] for i in rows]
    targets = [Histogram(bin_edges=model.bin_edges[i], mass=model.targets[i])
               for i in rows]
    scfg = replace(cfg.st, bit_depth=model.bit_depth)
    fit = learn_potentials(st_state, None, usable, scfg, state=st_state,
                           sample_mask=frame_mask, targets=targets, rng=rng)
    for f, tv in zip(usable, fit.final_tv):
        report_rows.append({"frame": m, "region": rid, "channel": f.name,
                            "tv": float(tv), "iterations": fit.n_iters})


def synthesize(code, n_frames=None, seed=0, config=None):
    """Decode a VpsCode: explicit reconstruction first, then per-frame
    texture sampling with explicit sites as fixed boundary.

    Frames beyond the coded window keep sampling the (stationary) texture
    models while the explicit reconstruction freezes at the last coded
    frame. Returns (volume, report); the report's err_im compares the
    synthesized pooled histograms against the archived targets.
    """
    t0 = time.perf_counter()
    cfg = config or PipelineConfig()
    coded_t, h, w = code.shape
    if n_frames is None:
        n_frames = coded_t
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    max_value = (1 << code.bit_depth) - 1
    rng = np.random.default_rng(seed)

    blank = make_volume(np.zeros(code.shape, dtype=np.uint8), code.bit_depth)
    recon, exmask, _ = reconstruct_explicit(code.placements, code.dictionary, blank)
    recon = np.clip(recon, 0.0, max_value)

    canvas = np.zeros((n_frames, h, w))
    for t in range(n_frames):
        tc = min(t, coded_t - 1)
        canvas[t][exmask[tc]] = recon[tc][exmask[tc]]

    st_states = {rid: np.zeros((n_frames, h, w)) for rid, m in code.models.items()
                 if isinstance(m, GibbsModel)}
    report_rows = []

    for t in range(n_frames):
        labels = _frame_labels(code.labeling, t)
        prev_labels = _frame_labels(code.labeling, t - 1) if t else None
        # fixed boundary: every shadow state carries this frame's
        # non-region content at its own level scale before sampling
        for rid in st_states:
            st_states[rid][t] = np.rint(
                _rescale(canvas[t], code.bit_depth, code.models[rid].bit_depth))
        for rid in sorted(code.models):
            model = code.models[rid]
            mask2d = labels == rid
            if not mask2d.any():
                continue
            if isinstance(model, GibbsModel):
                _synthesize_st_frame(model, st_states[rid], t, mask2d, cfg,
                                     rng, report_rows, rid)
                canvas[t][mask2d] = _rescale(st_states[rid][t][mask2d],
                                             model.bit_depth, code.bit_depth)
            else:
                frame = _synthesize_ma_frame(
                    model, canvas, t, mask2d, prev_labels,
                    code.bit_depth, cfg, rng, report_rows, rid)
                canvas[t][mask2d] = _rescale(frame[mask2d], model.bit_depth,
                                             code.bit_depth)

    out = make_volume(np.clip(np.rint(canvas), 0, max_value).astype(np.uint8),
                      code.bit_depth)
    report = SynthesisReport(seed=seed, convergence=report_rows)
    _fill_target_gaps(out, code, report)
    report.runtime = time.perf_counter() - t0
    return out, report


def _synthesize_ma_frame(model, canvas, t, mask2d, prev_labels,
                         canvas_depth, cfg, rng, report_rows, rid):
    """Relearn the joint model's potentials for this frame and sample it."""
    h, w = mask2d.shape
    n_levels = 1 << model.bit_depth
    cmap = np.where(mask2d, model.cluster_map, -1).astype(np.int64)
    macfg = replace(cfg.ma, bit_depth=model.bit_depth, m=model.m,
                    v_max=model.v_max, smoothness=model.smoothness,
                    omega_mode=model.omega_mode)
    if t == 0:
        # no predecessor: every site synthesizes as newly exposed, from
        # the full level range under the static filters alone
        statics = tuple(f for f in model.filters if f.domain == "static")
        idx = [i for i, f in enumerate(model.filters) if f.domain == "static"]
        prev = np.zeros((h, w))
        occluded = mask2d.copy()
        prev_valid = np.zeros((h, w), dtype=bool)
        filters, edges = statics, model.bin_edges[idx]
        targets_s = model.targets_s[idx]
    else:
        prev = np.rint(_rescale(canvas[t - 1], canvas_depth, model.bit_depth))
        prev_explicit = (prev_labels < 0) if prev_labels is not None \
            else np.zeros((h, w), dtype=bool)
        occluded = mask2d & prev_explicit
        prev_valid = ~prev_explicit
        filters, edges, targets_s = model.filters, model.bin_edges, model.targets_s

    # Algorithm-2 start: uniform velocities, intensities displaced along
    # them where the source is usable, uniform noise elsewhere
    init = np.rint(_rescale(canvas[t], canvas_depth, model.bit_depth))
    side = 2 * model.v_max + 1
    field = rng.integers(side * side, size=(h, w))
    vxs, vys = field % side - model.v_max, field // side - model.v_max
    ys = np.clip(np.arange(h)[:, None] - vys, 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] - vxs, 0, w - 1)
    copied = prev[ys, xs]
    ok = prev_valid[ys, xs] & ~occluded
    noise = rng.integers(n_levels, size=(h, w)).astype(np.float64)
    init[mask2d] = np.where(ok, copied, noise)[mask2d]
    velocities = np.stack([vxs, vys], axis=-1)

    dummy = make_volume(
        np.stack([prev, prev]).astype(np.uint8), model.bit_depth)
    fit = learn_ma(dummy, mask2d, filters, model.n_clusters, cfg=macfg,
                   state=init, velocities=velocities,
                   targets_s=targets_s, targets_v=model.targets_v,
                   cluster_map=cmap, occluded=occluded, bin_edges=edges,
                   prev_valid=prev_valid, rng=rng)
    names = [f.name for f in filters] \
        + [f"velocity_{c}" for c in range(model.n_clusters)]
    for name, tv in zip(names, fit.final_tv):
        report_rows.append({"frame": t, "region": rid, "channel": name,
                            "tv": float(tv), "iterations": fit.n_iters})
    return init  # learn_ma evolved it in place


def _region_frames(code, rid, frames):
    """Region mask stretched to `frames` by repeating the last coded frame."""
    region3d = code.labeling.label_map == rid
    if region3d.shape[0] != frames:
        base = np.zeros((frames,) + region3d.shape[1:], dtype=bool)
        n = min(frames, region3d.shape[0])
        base[:n] = region3d[:n]
        base[n:] = region3d[-1]
        region3d = base
    return region3d


def _fill_target_gaps(volume, code, report):
    """Pooled synthesized histograms vs the archived targets."""
    gaps = []
    per_frame = {t: [] for t in range(volume.frames)}
    for rid in sorted(code.models):
        model = code.models[rid]
        region3d = _region_frames(code, rid, volume.frames)
        depth = model.bit_depth
        data = quantize(volume, depth).to_float()
        filters = model.filters
        edges = model.bin_edges
        targets = model.targets if isinstance(model, GibbsModel) else model.targets_s
        for i, f in enumerate(filters):
            mask = support_mask(data.shape, f, region3d)
            if not mask.any():
                continue
            resp = convolve(data, f)
            mass = np.bincount(bin_index(resp[mask], edges[i]),
                               minlength=targets.shape[1]) / mask.sum()
            gap = float(np.abs(mass - targets[i]).sum())
            gaps.append(gap)
            report.filter_tv[f"region{rid}/{f.name}"] = 0.5 * gap
            for t in range(volume.frames):
                fm = np.zeros_like(mask)
                fm[t] = mask[t]
                if not fm.any():
                    continue
                fmass = np.bincount(bin_index(resp[fm], edges[i]),
                                    minlength=targets.shape[1]) / fm.sum()
                per_frame[t].append(float(np.abs(fmass - targets[i]).sum()))
    report.err_im = float(np.mean(gaps)) if gaps else None
    report.frame_err_im = [float(np.mean(v)) if v else None
                           for t, v in sorted(per_frame.items())]


def compute_metrics(observed, synthesized, code):
    """Fidelity of a synthesis against the clip it was coded from.

    err_ex averages |I_syn - I_obs| / range over the explicit sites of the
    coded window.  err_im averages, over every (region, filter) channel, the
    L1 gap between the two pooled response histograms, each volume quantized
    to that model's level count and binned on the archived edges.
    """
    t0 = time.perf_counter()
    if observed.data.shape != synthesized.data.shape:
        raise ValueError(f"volume dimensions differ: {observed.data.shape} "
                         f"vs {synthesized.data.shape}")
    if observed.bit_depth != synthesized.bit_depth:
        raise ValueError(
            f"bit depths differ: {observed.bit_depth} vs {synthesized.bit_depth}")
    frames = observed.frames
    coded_t = code.shape[0]
    rng_span = float(observed.max_value)

    blank = make_volume(np.zeros(code.shape, dtype=np.uint8), code.bit_depth)
    _, exmask, _ = reconstruct_explicit(code.placements, code.dictionary, blank)
    obs = observed.to_float()
    syn = synthesized.to_float()
    diffs, frame_ex = [], []
    for t in range(frames):
        if t >= coded_t or not exmask[t].any():
            frame_ex.append(None)
            continue
        d = np.abs(syn[t][exmask[t]] - obs[t][exmask[t]]) / rng_span
        diffs.append(d)
        frame_ex.append(float(d.mean()))
    err_ex = float(np.concatenate(diffs).mean()) if diffs else None

    gaps = []
    per_frame = {t: [] for t in range(frames)}
    filter_tv = {}
    for rid in sorted(code.models):
        model = code.models[rid]
        region3d = _region_frames(code, rid, frames)
        data_s = quantize(synthesized, model.bit_depth).to_float()
        data_o = quantize(observed, model.bit_depth).to_float()
        edges = model.bin_edges
        for i, f in enumerate(model.filters):
            mask = support_mask(data_s.shape, f, region3d)
            if not mask.any():
                continue
            n_bins = len(edges[i]) - 1
            resp_s = convolve(data_s, f)
            resp_o = convolve(data_o, f)
            mass_s = np.bincount(bin_index(resp_s[mask], edges[i]),
                                 minlength=n_bins) / mask.sum()
            mass_o = np.bincount(bin_index(resp_o[mask], edges[i]),
                                 minlength=n_bins) / mask.sum()
            gap = float(np.abs(mass_s - mass_o).sum())
            gaps.append(gap)
            filter_tv[f"region{rid}/{f.name}"] = 0.5 * gap
            for t in range(frames):
                fm = np.zeros_like(mask)
                fm[t] = mask[t]
                if not fm.any():
                    continue
                fs = np.bincount(bin_index(resp_s[fm], edges[i]),
                                 minlength=n_bins) / fm.sum()
                fo = np.bincount(bin_index(resp_o[fm], edges[i]),
                                 minlength=n_bins) / fm.sum()
                per_frame[t].append(float(np.abs(fs - fo).sum()))
    err_im = float(np.mean(gaps)) if gaps else None
    frame_im = [float(np.mean(v)) if v else None
                for t, v in sorted(per_frame.items())]
    return SynthesisReport(err_ex=err_ex, err_im=err_im, frame_err_ex=frame_ex,
                           frame_err_im=frame_im, filter_tv=filter_tv,
                           runtime=time.perf_counter() - t0)


def primitive_type_report(code, cutoffs=(50, 100, 150, 200)):
    """Blob-like vs edge-like counts among the first N placements.

    Placements are walked in pursuit order; special primitives sit in the
    window but count toward neither bucket.  Returns {N: (blobs, edges)}
    with N clipped to the number of placements available.
    """
    kinds = [code.dictionary[p.primitive_id].kind for p in code.placements]
    out = {}
    for n in cutoffs:
        head = kinds[:n]
        blobs = sum(1 for k in head if k == "common-blob")
        edges = sum(1 for k in head if k in ("common-edge", "common-ridge"))
        out[n] = (blobs, edges)
    return out

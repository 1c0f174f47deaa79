"""Archive container for a coded video.

A code is a single zip file: a JSON manifest for structure and
accounting, a run-length-encoded label map, primitive profiles as
float16, and per-region model tables as float64 blobs. Entry timestamps
are pinned and manifest keys sorted, so equal codes are equal bytes.

Potentials are not stored. A decoder relearns them against the archived
target histograms, so an implicit region costs its targets: filters x
bins for a spatio-temporal model, plus the velocity-cluster histograms
and cluster map for a joint intensity-velocity model. Filter kernels are
likewise not stored; the manifest carries the bank spec and models
reference filters by id into the rebuilt bank.
"""
from __future__ import annotations

import json
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .filters import FilterBankSpec, build_filter_bank
from .ma_frame import MaModel
from .primitives import PRIMITIVE_SIZE, Placement, Primitive, explicit_param_count
from .st_frame import GibbsModel
from .video import Brick, RegionLabeling

FORMAT_NAME = "vpscode"
FORMAT_VERSION = 1

# fixed zip timestamp: archives must be byte-identical across runs
_EPOCH = (1980, 1, 1, 0, 0, 0)


# -- run-length coding ---------------------------------------------------

def rle_encode(arr):
    """Flattened run-length coding: uint32 count, int16 values, uint32 runs."""
    flat = np.asarray(arr).ravel()
    if flat.size == 0:
        return np.uint32(0).tobytes()
    if flat.min() < np.iinfo(np.int16).min or flat.max() > np.iinfo(np.int16).max:
        raise ValueError("labels out of int16 range")
    breaks = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], breaks])
    ends = np.concatenate([breaks, [flat.size]])
    values = flat[starts].astype("<i2")
    runs = (ends - starts).astype("<u4")
    return np.uint32(len(values)).tobytes() + values.tobytes() + runs.tobytes()


def rle_decode(blob, shape):
    """Inverse of rle_encode; returns an int16 array of the given shape."""
    n = int(np.frombuffer(blob[:4], dtype="<u4")[0])
    values = np.frombuffer(blob[4 : 4 + 2 * n], dtype="<i2")
    runs = np.frombuffer(blob[4 + 2 * n : 4 + 6 * n], dtype="<u4")
    out = np.repeat(values, runs).astype(np.int16)
    expected = int(np.prod(shape)) if len(shape) else 0
    if out.size != expected:
        raise ValueError(f"run-length data decodes to {out.size} sites, expected {expected}")
    return out.reshape(shape)


# -- accounting ----------------------------------------------------------

@dataclass(frozen=True)
class Accounting:
    """Stored-parameter counts and the raw-byte baseline."""

    explicit: int
    velocity: int
    implicit: int
    n_common: int
    n_special: int
    raw_bytes: int


def model_param_count(model):
    """Stored parameters of one region model: its target histograms."""
    if isinstance(model, MaModel):
        k_s, n_bins = model.targets_s.shape
        return k_s * n_bins + model.n_clusters * model.n_velocities
    return model.n_filters * model.n_bins


def recompute_accounting(code):
    ex = explicit_param_count(code.placements, code.dictionary)
    implicit = sum(model_param_count(m) for m in code.models.values())
    raw_bits = code.labeling.label_map.size * code.bit_depth
    return Accounting(explicit=ex.explicit, velocity=ex.velocity,
                      implicit=implicit, n_common=ex.n_common,
                      n_special=ex.n_special, raw_bytes=(raw_bits + 7) // 8)


# -- the code container ---------------------------------------------------

@dataclass
class VpsCode:
    """Complete hybrid code: labeling, dictionary + placements, region
    models, and the filter-bank spec they draw kernels from.

    code_bytes is measured at save/load time (an archive cannot store its
    own compressed size); everything in accounting is recomputable from
    the other fields and checked by validate().
    """

    labeling: RegionLabeling
    dictionary: list
    placements: list
    models: dict
    bank_spec: FilterBankSpec = field(default_factory=FilterBankSpec)
    bit_depth: int = 8
    accounting: Accounting | None = None
    code_bytes: int | None = None

    def __post_init__(self):
        # structure first: accounting recomputation indexes the dictionary,
        # so a dangling placement must be reported before it runs
        self._check_structure()
        if self.accounting is None:
            self.accounting = recompute_accounting(self)
        self.validate()

    @property
    def shape(self):
        return self.labeling.label_map.shape

    def validate(self):
        self._check_structure()
        if self.accounting != recompute_accounting(self):
            raise ValueError("stored accounting disagrees with the code contents")

    def _check_structure(self):
        region_ids = set(self.labeling.implicit_region_ids)
        model_ids = set(self.models)
        if region_ids != model_ids:
            raise ValueError(
                f"implicit regions {sorted(region_ids)} and models "
                f"{sorted(model_ids)} do not match one-to-one")
        n = len(self.dictionary)
        for pl in self.placements:
            if not (0 <= pl.primitive_id < n):
                raise ValueError(f"placement references missing primitive {pl.primitive_id}")
        brick_keys = sorted((b.x, b.y, b.t) for b in self.labeling.bricks)
        place_keys = sorted((p.x, p.y, p.t) for p in self.placements)
        if brick_keys != place_keys:
            raise ValueError("explicit bricks and placements do not match one-to-one")
        h, w = self.shape[1:]
        for rid, model in self.models.items():
            if isinstance(model, MaModel):
                if model.cluster_map.shape != (h, w):
                    raise ValueError(f"cluster map for region {rid} does not fit the frame")
                inside = model.cluster_map >= 0
                uncovered = (self.labeling.label_map == rid) & ~inside[None]
                if uncovered.any():
                    raise ValueError(f"cluster map misses sites of region {rid}")

    def compression_ratio(self):
        if self.code_bytes is None:
            return None
        return self.code_bytes / self.accounting.raw_bytes


# -- save ------------------------------------------------------------------

def _spec_dict(spec):
    return {"kernel_size": spec.kernel_size, "n_scales": spec.n_scales,
            "n_orientations": spec.n_orientations, "speeds": list(spec.speeds)}


def _primitive_meta(prim):
    return {
        "kind": prim.kind,
        "orientation": prim.orientation,
        "scale": prim.scale,
        "source_filter": prim.source_filter,
        "velocity": list(prim.velocity) if prim.velocity is not None else None,
    }


def _model_meta(model, bank_by_id):
    for f in model.filters:
        ref = bank_by_id.get(f.id)
        if ref is None or ref.name != f.name:
            raise ValueError(f"model filter {f.name} is not in the archive bank")
    if isinstance(model, MaModel):
        return {
            "type": "ma",
            "filter_ids": [f.id for f in model.filters],
            "n_bins": int(model.targets_s.shape[1]),
            "k_v": model.n_clusters,
            "v_max": model.v_max,
            "m": model.m,
            "smoothness": model.smoothness,
            "omega_mode": model.omega_mode,
            "bit_depth": model.bit_depth,
        }
    return {
        "type": "st",
        "filter_ids": [f.id for f in model.filters],
        "n_bins": model.n_bins,
        "bit_depth": model.bit_depth,
    }


def _model_tables(model):
    if isinstance(model, MaModel):
        parts = [model.bin_edges, model.targets_s, model.targets_v]
    else:
        parts = [model.bin_edges, model.targets]
    return b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in parts)


def save_code(code, path):
    """Write the archive; returns its size in bytes and records it on the
    code object."""
    code.validate()
    bank = build_filter_bank(code.bank_spec)
    bank_by_id = {f.id: f for f in bank.filters}
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "shape": list(code.shape),
        "bit_depth": code.bit_depth,
        "bank_spec": _spec_dict(code.bank_spec),
        "bricks": [[b.x, b.y, b.t, b.size, b.n_frames] for b in code.labeling.bricks],
        "primitives": [_primitive_meta(p) for p in code.dictionary],
        "placements": [[p.primitive_id, p.x, p.y, p.t, p.coefficient, p.sigma2]
                       for p in code.placements],
        "models": {str(rid): _model_meta(m, bank_by_id)
                   for rid, m in sorted(code.models.items())},
        "accounting": {
            "explicit": code.accounting.explicit,
            "velocity": code.accounting.velocity,
            "implicit": code.accounting.implicit,
            "n_common": code.accounting.n_common,
            "n_special": code.accounting.n_special,
            "raw_bytes": code.accounting.raw_bytes,
        },
    }
    entries = [("manifest.json",
                json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())]
    entries.append(("labeling.rle", rle_encode(code.labeling.label_map)))
    profiles = b"".join(
        np.ascontiguousarray(p.profile, dtype="<f2").tobytes() for p in code.dictionary)
    entries.append(("profiles.bin", profiles))
    for rid, model in sorted(code.models.items()):
        entries.append((f"model_{rid}.bin", _model_tables(model)))
        if isinstance(model, MaModel):
            entries.append((f"cluster_{rid}.rle", rle_encode(model.cluster_map)))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED,
                         compresslevel=9) as zf:
        for name, blob in entries:
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, blob, compresslevel=9)
    code.code_bytes = os.path.getsize(path)
    return code.code_bytes


# -- load ------------------------------------------------------------------

def _read_tables(blob, shapes):
    out = []
    offset = 0
    for shape in shapes:
        n = int(np.prod(shape))
        out.append(np.frombuffer(blob, dtype="<f8", count=n,
                                 offset=offset).reshape(shape).copy())
        offset += 8 * n
    if offset != len(blob):
        raise ValueError("model table blob has trailing bytes")
    return out


def load_code(path):
    """Read an archive back into a validated VpsCode."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise ValueError(f"cannot read code archive {path}: {exc}") from exc
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("format") != FORMAT_NAME:
            raise ValueError(f"{path} is not a {FORMAT_NAME} archive")
        if manifest.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path} has unsupported version {manifest.get('version')}")
        shape = tuple(manifest["shape"])
        spec = FilterBankSpec(
            kernel_size=manifest["bank_spec"]["kernel_size"],
            n_scales=manifest["bank_spec"]["n_scales"],
            n_orientations=manifest["bank_spec"]["n_orientations"],
            speeds=tuple(manifest["bank_spec"]["speeds"]))
        bank = build_filter_bank(spec)
        by_id = {f.id: f for f in bank.filters}

        label_map = rle_decode(zf.read("labeling.rle"), shape)
        bricks = [Brick(x=x, y=y, t=t, size=size, n_frames=nf)
                  for x, y, t, size, nf in manifest["bricks"]]
        labeling = RegionLabeling(label_map=label_map, bricks=bricks)

        profiles = np.frombuffer(zf.read("profiles.bin"), dtype="<f2")
        dictionary = []
        offset = 0
        for meta in manifest["primitives"]:
            size = PRIMITIVE_SIZE ** 2 if meta["kind"] == "special" else PRIMITIVE_SIZE
            prof = profiles[offset : offset + size].astype(np.float64)
            offset += size
            if meta["kind"] == "special":
                prof = prof.reshape(PRIMITIVE_SIZE, PRIMITIVE_SIZE)
            dictionary.append(Primitive(
                kind=meta["kind"], profile=prof, orientation=meta["orientation"],
                scale=meta["scale"], source_filter=meta["source_filter"],
                velocity=tuple(meta["velocity"]) if meta["velocity"] else None))
        if offset != profiles.size:
            raise ValueError("profile blob has trailing values")

        placements = [Placement(primitive_id=pid, x=x, y=y, t=t,
                                coefficient=coeff, sigma2=s2)
                      for pid, x, y, t, coeff, s2 in manifest["placements"]]

        models = {}
        for key, meta in manifest["models"].items():
            rid = int(key)
            filters = tuple(by_id[i] for i in meta["filter_ids"])
            k, L = len(filters), meta["n_bins"]
            blob = zf.read(f"model_{rid}.bin")
            if meta["type"] == "ma":
                k_v = meta["k_v"]
                n_v = (2 * meta["v_max"] + 1) ** 2
                edges, targets_s, targets_v = _read_tables(
                    blob, [(k, L + 1), (k, L), (k_v, n_v)])
                cluster_map = rle_decode(zf.read(f"cluster_{rid}.rle"),
                                         shape[1:]).astype(np.int64)
                models[rid] = MaModel(
                    filters=filters, beta_s=np.zeros((k, L)), bin_edges=edges,
                    targets_s=targets_s, cluster_map=cluster_map,
                    targets_v=targets_v, beta_v=np.zeros((k_v, n_v)),
                    v_max=meta["v_max"], m=meta["m"],
                    smoothness=meta["smoothness"], bit_depth=meta["bit_depth"],
                    omega_mode=meta["omega_mode"])
            elif meta["type"] == "st":
                edges, targets = _read_tables(blob, [(k, L + 1), (k, L)])
                models[rid] = GibbsModel(
                    filters=filters, beta=np.zeros((k, L)), bin_edges=edges,
                    targets=targets, region=rid, bit_depth=meta["bit_depth"])
            else:
                raise ValueError(f"unknown model type {meta['type']!r} in {path}")

        acc = manifest["accounting"]
        code = VpsCode(
            labeling=labeling, dictionary=dictionary, placements=placements,
            models=models, bank_spec=spec, bit_depth=manifest["bit_depth"],
            accounting=Accounting(
                explicit=acc["explicit"], velocity=acc["velocity"],
                implicit=acc["implicit"], n_common=acc["n_common"],
                n_special=acc["n_special"], raw_bytes=acc["raw_bytes"]))
    code.code_bytes = os.path.getsize(path)
    return code

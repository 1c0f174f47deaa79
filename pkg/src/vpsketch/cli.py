"""Command line: encode, synth, metrics, maps, report.

Exit codes: 0 on success, 2 on usage errors (argparse), 1 on data errors
with a message naming the offending file. All randomness flows from
--seed; repeated runs with the same flags produce identical bytes.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, replace

import numpy as np

from .figures import (
    save_convergence_figure,
    save_filter_gap_figure,
    save_frame_error_figure,
    save_type_report_figure,
)
from .filters import FilterBankSpec
from .ma_frame import MaConfig
from .pipeline import (
    PipelineConfig,
    compute_metrics,
    encode,
    primitive_type_report,
    synthesize,
)
from .primitives import build_sketch_bank
from .sketch import sketchability_map, trackability_map
from .st_frame import SamplerConfig
from .video_io import load_video, save_video, _write_pgm
from .vpscode import load_code, save_code


# -- config files ----------------------------------------------------------

def _config_from_dict(raw, path):
    """JSON object -> PipelineConfig; nested st/ma/bank_spec sections."""
    try:
        raw = dict(raw)
        kwargs = {}
        if "st" in raw:
            kwargs["st"] = SamplerConfig(**raw.pop("st"))
        if "ma" in raw:
            kwargs["ma"] = MaConfig(**raw.pop("ma"))
        if "bank_spec" in raw:
            spec = dict(raw.pop("bank_spec"))
            if "speeds" in spec:
                spec["speeds"] = tuple(spec["speeds"])
            kwargs["bank_spec"] = FilterBankSpec(**spec)
        for key in ("st_filter_names", "ma_filter_names"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        return PipelineConfig(**raw, **kwargs)
    except TypeError as exc:
        raise ValueError(f"bad config {path}: {exc}") from exc


def _load_config(path):
    if path is None:
        return PipelineConfig()
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"bad config {path}: {exc}") from exc
    return _config_from_dict(raw, path)


def _apply_overrides(cfg, args):
    if getattr(args, "model", None):
        cfg = replace(cfg, model=args.model)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


# -- subcommands -------------------------------------------------------------

def _cmd_encode(args):
    cfg = _apply_overrides(_load_config(args.config), args)
    volume = load_video(args.input)
    code = encode(volume, cfg)
    n = save_code(code, args.output)
    acc = code.accounting
    print(f"coded {args.input}: {len(code.placements)} placements, "
          f"{len(code.models)} texture regions")
    print(f"explicit parameters: {acc.explicit:,}")
    print(f"velocity parameters: {acc.velocity:,}")
    print(f"implicit parameters: {acc.implicit:,}")
    print(f"archive {args.output}: {n:,} bytes "
          f"({100.0 * n / acc.raw_bytes:.2f}% of raw)")
    return 0


def _cmd_synth(args):
    code = load_code(args.code)
    cfg = _load_config(args.config)
    volume, report = synthesize(code, n_frames=args.frames, seed=args.seed,
                                config=cfg)
    save_video(volume, args.output)
    if report.err_im is not None:
        print(f"synthesized {volume.frames} frames; "
              f"mean histogram gap {report.err_im:.4f}")
    else:
        print(f"synthesized {volume.frames} frames (no implicit regions)")
    print(f"runtime: {report.runtime:.2f}s")
    if args.report_dir:
        os.makedirs(args.report_dir, exist_ok=True)
        out = os.path.join(args.report_dir, "synthesis_report.json")
        with open(out, "w") as fh:
            json.dump(asdict(report), fh, indent=2, sort_keys=True)
        save_convergence_figure(report,
                                os.path.join(args.report_dir, "convergence.png"))
        save_filter_gap_figure(report,
                               os.path.join(args.report_dir, "filter_gaps.png"))
        print(f"report written to {args.report_dir}")
    return 0


def _fmt(value):
    return "" if value is None else f"{value:.6f}"


def _cmd_metrics(args):
    observed = load_video(args.observed)
    synthesized = load_video(args.synthesized)
    code = load_code(args.code)
    report = compute_metrics(observed, synthesized, code)
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(asdict(report), fh, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "err_ex", "err_im"])
        for t in range(observed.frames):
            writer.writerow([t, _fmt(report.frame_err_ex[t]),
                             _fmt(report.frame_err_im[t])])
        writer.writerow(["overall", _fmt(report.err_ex), _fmt(report.err_im)])
    save_filter_gap_figure(report, os.path.join(out_dir, "filter_gaps.png"))
    save_frame_error_figure(report, os.path.join(out_dir, "frame_errors.png"))
    print(f"err_ex: {_fmt(report.err_ex) or 'n/a'}")
    print(f"err_im: {_fmt(report.err_im) or 'n/a'}")
    print(f"metrics written to {out_dir}")
    return 0


def _cmd_maps(args):
    cfg = _load_config(args.config)
    volume = load_video(args.input)
    ecfg = cfg.entropy_config()
    bank = build_sketch_bank(n_orientations=cfg.sketch_orientations,
                             n_scales=cfg.sketch_scales)
    os.makedirs(args.output, exist_ok=True)
    sketch_full = np.log(len(bank.elements))
    track_full = np.log(ecfg.n_velocities)
    data = volume.to_float()
    written = 0
    for t in range(volume.frames):
        smap = sketchability_map(data[t], bank.elements, ecfg)
        frame = np.rint(255.0 * np.clip(smap / sketch_full, 0.0, 1.0))
        _write_pgm(frame.astype(np.uint8), 255,
                   os.path.join(args.output, f"sketch_{t:03d}.pgm"))
        written += 1
        if t >= 1:
            tmap = trackability_map(volume, t, ecfg)
            frame = np.rint(255.0 * np.clip(tmap / track_full, 0.0, 1.0))
            _write_pgm(frame.astype(np.uint8), 255,
                       os.path.join(args.output, f"track_{t:03d}.pgm"))
            written += 1
    print(f"wrote {written} heatmaps to {args.output} "
          "(dark = sketchable / trackable)")
    return 0


def _cmd_report(args):
    code = load_code(args.code)
    acc = code.accounting
    t, h, w = code.shape
    print(f"code {args.code}: {w}x{h}, {t} frames, {code.bit_depth}-bit")
    print(f"explicit parameters: {acc.explicit:,}")
    print(f"velocity parameters: {acc.velocity:,}")
    print(f"implicit parameters: {acc.implicit:,}")
    print(f"common primitives: {acc.n_common:,}; specials: {acc.n_special:,}")
    print(f"texture regions: {len(code.models)}")
    if code.code_bytes:
        print(f"archive: {code.code_bytes:,} bytes "
              f"({100.0 * code.compression_ratio():.2f}% of raw)")
    counts = primitive_type_report(code)
    print("primitive types in pursuit order:")
    print("      N   blob   edge")
    for n in sorted(counts):
        blobs, edges = counts[n]
        print(f"  {n:>5} {blobs:>6} {edges:>6}")
    if args.out_dir:
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "type_report.csv"), "w",
                  newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["first_n", "blob_like", "edge_like"])
            for n in sorted(counts):
                writer.writerow([n, counts[n][0], counts[n][1]])
        save_type_report_figure(counts,
                                os.path.join(args.out_dir, "type_report.png"))
        print(f"report written to {args.out_dir}")
    return 0


# -- parser -------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="vpsketch",
        description="Hybrid sparse-plus-texture video coder")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("encode", help="code a video into an archive")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--model", choices=("st", "ma"))
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("synth", help="synthesize video from an archive")
    p.add_argument("code")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--frames", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config")
    p.add_argument("--report-dir")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("metrics", help="compare observed and synthesized clips")
    p.add_argument("observed")
    p.add_argument("synthesized")
    p.add_argument("code")
    p.add_argument("-o", "--out-dir", default=".")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("maps", help="write sketchability/trackability heatmaps")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--config")
    p.set_defaults(func=_cmd_maps)

    p = sub.add_parser("report", help="print accounting and primitive types")
    p.add_argument("code")
    p.add_argument("-o", "--out-dir")
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

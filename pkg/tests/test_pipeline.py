"""End-to-end coder tests.

Clips are built from ideal dictionary content; a step edge marching over a
flat background splits cleanly (edge bricks explicit, background one
texture region), so explicit reconstruction must be exact and both error
metrics have known values. Noise clips exercise the opposite corner:
nothing sketchable or trackable, everything implicit.
"""
import numpy as np
import pytest

from vpsketch.filters import FilterBankSpec
from vpsketch.ma_frame import MaConfig, MaModel
from vpsketch.pipeline import (
    PipelineConfig,
    SynthesisReport,
    compute_metrics,
    encode,
    primitive_type_report,
    synthesize,
)
from vpsketch.primitives import reconstruct_explicit
from vpsketch.st_frame import SamplerConfig
from vpsketch.video import make_volume
from vpsketch.vpscode import load_code, save_code

SMALL_SPEC = FilterBankSpec(kernel_size=3, n_scales=1, n_orientations=2,
                            speeds=(1.0,))


def _cfg(model="st", **kw):
    kw.setdefault("st_filter_names", ("static_intensity", "static_grad_x"))
    return PipelineConfig(
        model=model, seed=0, n_regions=1, v_max=3, bank_spec=SMALL_SPEC,
        st=SamplerConfig(sweeps=4, max_iters=40, epsilon=0.01, seed=0,
                         bit_depth=4, n_bins=5),
        ma=MaConfig(seed=0, max_iters=6, m=4, v_max=1, smoothness=0.5,
                    learning_rate=8.0, bit_depth=4, n_bins=5),
        **kw)


def band_clip(t=5, h=33, w=44, bg=120, lo=60, hi=180):
    """Vertical step edge inside one brick column, moving 1 px/frame."""
    frames = np.full((t, h, w), bg, dtype=np.uint8)
    for k in range(t):
        x = 16 + k
        frames[k, 11:22, 11:x] = lo
        frames[k, 11:22, x:22] = hi
    return make_volume(frames, 8)


def noise_clip(t=5, h=33, w=33, seed=7):
    rng = np.random.default_rng(seed)
    return make_volume(rng.integers(0, 256, size=(t, h, w)).astype(np.uint8), 8)


@pytest.fixture(scope="module")
def band_code():
    vol = band_clip()
    return vol, encode(vol, _cfg())


class TestEncode:
    def test_band_splits_into_edge_bricks_and_one_region(self, band_code):
        vol, code = band_code
        kinds = {code.dictionary[p.primitive_id].kind for p in code.placements}
        assert kinds <= {"common-edge", "common-ridge"}
        assert len(code.placements) == 3
        assert sorted(code.models) == [0]
        vels = {code.dictionary[p.primitive_id].velocity for p in code.placements}
        assert (1, 0) in vels  # the 3-frame brick tracks the edge motion
        code.validate()

    def test_noise_goes_fully_implicit(self):
        code = encode(noise_clip(), _cfg())
        assert code.placements == []
        assert sorted(code.models) == [0]
        assert code.accounting.explicit == 0
        assert code.accounting.implicit == 2 * 5

    def test_needs_three_frames(self):
        with pytest.raises(ValueError, match="at least 3 frames"):
            encode(noise_clip(t=2), _cfg())

    def test_unknown_filter_name(self):
        with pytest.raises(ValueError, match="no filters named"):
            encode(noise_clip(), _cfg(st_filter_names=("static_intensity", "bogus")))

    def test_repeat_encode_is_byte_identical(self, band_code, tmp_path):
        vol, code = band_code
        again = encode(vol, _cfg())
        a, b = tmp_path / "a.vps", tmp_path / "b.vps"
        save_code(code, a)
        save_code(again, b)
        assert a.read_bytes() == b.read_bytes()

    def test_ma_model_per_region(self):
        code = encode(noise_clip(), _cfg(model="ma", k_v=1))
        model = code.models[0]
        assert isinstance(model, MaModel)
        assert model.targets_v.shape == (1, 9)
        names = [f.name for f in model.filters]
        assert "flicker_intensity" in names
        code.validate()


class TestSynthesize:
    def test_explicit_sites_equal_reconstruction(self, band_code):
        vol, code = band_code
        out, _ = synthesize(code, seed=3, config=_cfg())
        blank = make_volume(np.zeros_like(vol.data), 8)
        recon, exmask, _ = reconstruct_explicit(code.placements, code.dictionary,
                                                blank)
        want = np.clip(np.rint(recon), 0, 255)
        assert np.array_equal(out.data[exmask].astype(np.float64), want[exmask])

    def test_all_explicit_code_replays_exactly(self):
        # rigid translation: every brick trackable, no implicit region
        rng = np.random.default_rng(3)
        base = rng.integers(0, 256, size=(33, 33))
        frames = np.stack([np.roll(base, k, axis=1) for k in range(3)])
        vol = make_volume(frames.astype(np.uint8), 8)
        code = encode(vol, _cfg())
        assert code.models == {}
        out, report = synthesize(code, seed=9, config=_cfg())
        blank = make_volume(np.zeros_like(vol.data), 8)
        recon, _, _ = reconstruct_explicit(code.placements, code.dictionary, blank)
        assert np.array_equal(out.data.astype(np.float64),
                              np.clip(np.rint(recon), 0, 255))
        assert report.err_im is None

    def test_same_seed_same_output(self, band_code):
        _, code = band_code
        a, _ = synthesize(code, seed=5, config=_cfg())
        b, _ = synthesize(code, seed=5, config=_cfg())
        assert np.array_equal(a.data, b.data)

    def test_checkerboard_visit_deterministic(self, band_code):
        _, code = band_code
        cfg = _cfg()
        from dataclasses import replace
        cfg = replace(cfg, st=replace(cfg.st, visit="checkerboard"))
        a, _ = synthesize(code, seed=5, config=cfg)
        b, _ = synthesize(code, seed=5, config=cfg)
        assert np.array_equal(a.data, b.data)

    def test_loaded_code_synthesizes_identically(self, band_code, tmp_path):
        vol, code = band_code
        path = tmp_path / "band.vps"
        save_code(code, path)
        fresh, _ = synthesize(code, seed=2, config=_cfg())
        loaded, _ = synthesize(load_code(path), seed=2, config=_cfg())
        assert np.array_equal(fresh.data, loaded.data)

    def test_extends_past_coded_window(self, band_code):
        _, code = band_code
        out, report = synthesize(code, n_frames=7, seed=1, config=_cfg())
        assert out.frames == 7
        # the explicit part freezes at the last coded frame
        frozen = code.labeling.label_map[4] < 0
        assert np.array_equal(out.data[5][frozen], out.data[6][frozen])
        assert len(report.frame_err_im) == 7

    def test_rejects_empty_target(self, band_code):
        _, code = band_code
        with pytest.raises(ValueError, match="n_frames"):
            synthesize(code, n_frames=0, config=_cfg())

    def test_report_tracks_convergence(self, band_code):
        _, code = band_code
        _, report = synthesize(code, seed=3, config=_cfg())
        assert report.err_im is not None and report.err_im <= 0.05
        assert set(report.filter_tv) == {"region0/static_intensity",
                                         "region0/static_grad_x"}
        channels = {row["channel"] for row in report.convergence}
        assert channels == {"static_intensity", "static_grad_x"}

    def test_ma_round_trip_runs(self, tmp_path):
        vol = band_clip(h=22, w=33)
        cfg = _cfg(model="ma", k_v=1)
        code = encode(vol, cfg)
        path = tmp_path / "ma.vps"
        save_code(code, path)
        out, report = synthesize(load_code(path), seed=4, config=cfg)
        assert out.frames == vol.frames
        m = compute_metrics(vol, out, code)
        assert m.err_ex == 0.0
        assert report.err_im is not None


class TestMetrics:
    def test_observed_against_itself_is_zero(self, band_code):
        vol, code = band_code
        report = compute_metrics(vol, vol, code)
        assert report.err_ex == 0.0
        assert report.err_im == 0.0
        assert all(v in (0.0, None) for v in report.frame_err_ex)

    def test_explicit_off_by_one_level(self, band_code):
        vol, code = band_code
        bumped = vol.data.copy()
        explicit = code.labeling.label_map < 0
        bumped[explicit] += 1
        report = compute_metrics(vol, make_volume(bumped, 8), code)
        assert report.err_ex == pytest.approx(1.0 / 255.0)
        # implicit sites untouched, so the pooled histograms agree exactly
        assert report.err_im == 0.0

    def test_dimension_mismatch(self, band_code):
        vol, code = band_code
        with pytest.raises(ValueError, match="dimensions differ"):
            compute_metrics(vol, noise_clip(h=11, w=11), code)

    def test_round_trip_within_encoding_residual(self, band_code):
        vol, code = band_code
        out, _ = synthesize(code, seed=3, config=_cfg())
        report = compute_metrics(vol, out, code)
        worst = max(pl.sigma2 for pl in code.placements) ** 0.5
        assert report.err_ex <= worst / 255.0 + 1e-9
        assert report.err_im <= 0.05

    def test_report_bounds_enforced(self):
        with pytest.raises(ValueError):
            SynthesisReport(err_ex=1.5)
        with pytest.raises(ValueError):
            SynthesisReport(err_im=2.5)


class TestTypeReport:
    def test_edges_only(self, band_code):
        _, code = band_code
        n = len(code.placements)
        assert primitive_type_report(code) == {50: (0, n), 100: (0, n),
                                               150: (0, n), 200: (0, n)}

    def test_blobs_only(self):
        # noise background: a flat one would hand its bump-adjacent bricks
        # to the tracker (static structure in the patch window) as specials
        rng = np.random.default_rng(11)
        frames = rng.integers(70, 91, size=(3, 33, 33)).astype(np.uint8)
        yy, xx = np.mgrid[0:11, 0:11] - 5.0
        bump = (150.0 * np.exp(-(xx ** 2 + yy ** 2) / 6.0)).astype(np.uint8)
        for x0, y0 in ((0, 0), (11, 11), (22, 22)):
            frames[:, y0 : y0 + 11, x0 : x0 + 11] += bump
        code = encode(make_volume(frames, 8), _cfg())
        n = len(code.placements)
        assert n > 0
        assert primitive_type_report(code)[50] == (n, 0)

    def test_dots_beat_lines_on_blob_fraction(self):
        bg = np.full((3, 33, 33), 80, dtype=np.uint8)
        yy, xx = np.mgrid[0:11, 0:11] - 5.0
        dots = bg.copy()
        bump = (140.0 * np.exp(-(xx ** 2 + yy ** 2) / 6.0)).astype(np.uint8)
        for x0, y0 in ((0, 0), (11, 11), (22, 22)):
            dots[:, y0 : y0 + 11, x0 : x0 + 11] += bump
        lines = bg.copy()
        lines[:, :, 4:7] = 210
        lines[:, :, 26:29] = 210

        def blob_fraction(volume):
            counts = primitive_type_report(encode(volume, _cfg()))[200]
            return counts[0] / max(sum(counts), 1)

        assert blob_fraction(make_volume(dots, 8)) \
            > blob_fraction(make_volume(lines, 8))


class TestConfig:
    def test_model_flag_validated(self):
        with pytest.raises(ValueError, match="model"):
            PipelineConfig(model="hmm")

    def test_cluster_count_validated(self):
        with pytest.raises(ValueError, match="k_v"):
            PipelineConfig(k_v=0)

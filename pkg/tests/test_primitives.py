"""Tests for the sketch bank, profiled primitives, matching pursuit,
special primitives, reconstruction, and explicit parameter accounting."""
import math

import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from vpsketch.primitives import (
    Placement,
    Primitive,
    build_sketch_bank,
    explicit_param_count,
    extract_special_primitives,
    fit_filter,
    generate_primitive,
    matching_pursuit,
    attach_velocity,
    reconstruct_explicit,
)
from vpsketch.sketch import EntropyConfig, velocity_grid, velocity_posterior
from vpsketch.video import Brick, make_volume


@pytest.fixture(scope="module")
def bank():
    return build_sketch_bank()


# -- oracle: exhaustive first pursuit step ---------------------------------

def oracle_response_field(frame, bank):
    """Brute-force |coefficient| for every filter at every fully-interior
    center; exterior centers are -inf. Independent of the pursuit's own
    convolution path."""
    r = bank.size // 2
    h, w = frame.shape
    windows = np.lib.stride_tricks.sliding_window_view(frame, (bank.size, bank.size))
    vals = np.abs(np.einsum("kij,yxij->kyx", bank.kernels, windows))
    field = np.full((len(bank), h, w), -np.inf)
    field[:, r : h - r, r : w - r] = vals
    return field


def step_edge(theta_deg, size=32, lo=30.0, hi=220.0):
    d = np.arange(size) - size // 2
    dx, dy = np.meshgrid(d, d)
    theta = math.radians(theta_deg)
    nx, ny = -math.sin(theta), math.cos(theta)
    # tolerance keeps boundary pixels on one side despite fp dust in cos/sin
    return np.where(dx * nx + dy * ny < -1e-9, lo, hi)


def pursuit_fixtures():
    rng = np.random.default_rng(31)
    fixtures = [step_edge(90.0), step_edge(40.0)]
    bar = np.full((32, 32), 60.0)
    bar[15:18, :] = 230.0
    fixtures.append(bar)
    d = np.arange(32) - 16
    dx, dy = np.meshgrid(d, d)
    fixtures.append(np.exp(-0.5 * (np.hypot(dx, dy) / 2.5) ** 2) * 180 + 40)
    fixtures.append(gaussian_filter(rng.normal(size=(32, 32)), 1.5) * 90 + 128)
    return fixtures


class TestSketchBank:
    def test_size_and_families(self, bank):
        assert len(bank) == 18 * 8 * 2 + 8
        kinds = [el.kind for el in bank.elements]
        assert kinds.count("blob") == 8
        assert kinds.count("edge") == kinds.count("ridge") == 18 * 8

    def test_kernels_zero_mean_unit_norm(self, bank):
        for el in bank.elements:
            assert abs(el.kernel.mean()) < 1e-12
            assert math.isclose(np.linalg.norm(el.kernel), 1.0, rel_tol=1e-9)
            assert el.kernel.shape == (11, 11)

    def test_orientation_grid(self, bank):
        thetas = sorted({el.orientation for el in bank.elements if el.orientation is not None})
        assert len(thetas) == 18
        np.testing.assert_allclose(np.diff(thetas), math.pi / 18)


class TestFitFilter:
    def test_bank_kernel_recovers_itself(self, bank):
        el = bank.elements[37]
        patch = el.kernel * 50.0 + 77.0
        fid, coef = fit_filter(patch, bank)
        assert fid == el.filter_id
        assert math.isclose(coef, 50.0, rel_tol=1e-9)

    def test_flat_patch_zero_coefficient_lowest_id(self, bank):
        fid, coef = fit_filter(np.full((11, 11), 9.0), bank)
        assert fid == 0
        assert abs(coef) < 1e-9

    def test_oblique_edge_orientation_within_one_step(self, bank):
        patch = step_edge(40.0)[10:21, 10:21]
        fid, _ = fit_filter(patch, bank)
        el = bank.elements[fid]
        assert el.kind == "edge"
        assert abs(math.degrees(el.orientation) - 40.0) <= 10.0

    def test_shape_mismatch_rejected(self, bank):
        with pytest.raises(ValueError):
            fit_filter(np.zeros((12, 12)), bank)


class TestGeneratePrimitive:
    def test_vertical_edge_columns_constant(self, bank):
        patch = step_edge(90.0)[10:21, 10:21]
        prim = generate_primitive(patch, bank.elements[fit_filter(patch, bank)[0]])
        assert prim.kind == "common-edge"
        render = prim.render()
        assert np.abs(np.diff(render, axis=0)).max() < 1e-6

    def test_horizontal_edge_rows_constant(self, bank):
        patch = step_edge(0.0)[10:21, 10:21]
        prim = generate_primitive(patch, bank.elements[fit_filter(patch, bank)[0]])
        assert prim.kind == "common-edge"
        assert np.abs(np.diff(prim.render(), axis=1)).max() < 1e-6

    def test_blob_quarter_turn_invariant(self, bank):
        d = np.arange(11) - 5
        dx, dy = np.meshgrid(d, d)
        patch = np.exp(-0.5 * (np.hypot(dx, dy) / 2.0) ** 2) * 150 + 30
        fid, _ = fit_filter(patch, bank)
        el = bank.elements[fid]
        assert el.kind == "blob"
        render = generate_primitive(patch, el).render()
        for k in (1, 2, 3):
            assert np.abs(render - np.rot90(render, k)).max() < 1e-6

    def test_profile_beats_raw_filter_on_noisy_edge(self, bank):
        rng = np.random.default_rng(41)
        patch = step_edge(90.0)[10:21, 10:21] + rng.normal(0, 6, size=(11, 11))
        fid, coef = fit_filter(patch, bank)
        el = bank.elements[fid]
        prim = generate_primitive(patch, el)
        err_profile = ((patch - prim.render()) ** 2).sum()
        err_filter = ((patch - patch.mean() - coef * el.kernel) ** 2).sum()
        assert err_profile <= err_filter

    def test_projection_idempotent(self, bank):
        rng = np.random.default_rng(42)
        patch = rng.normal(size=(11, 11)) * 40 + 120
        el = bank.elements[5]
        once = generate_primitive(patch, el).render()
        twice = generate_primitive(once, el).render()
        np.testing.assert_allclose(twice, once, atol=1e-9)

    def test_residual_energy_never_grows(self, bank):
        rng = np.random.default_rng(43)
        for el in (bank.elements[0], bank.elements[33], bank.elements[-1]):
            patch = rng.normal(size=(11, 11)) * 50 + 100
            render = generate_primitive(patch, el).render()
            assert ((patch - render) ** 2).sum() <= (
                (patch - patch.mean()) ** 2).sum() + 1e-9


class TestMatchingPursuit:
    def test_first_step_matches_exhaustive_search(self, bank):
        for frame in pursuit_fixtures():
            placements, prims = matching_pursuit(frame, bank, max_count=1)
            assert len(placements) == 1
            field = oracle_response_field(frame, bank)
            best = field.max()
            chosen = (prims[0].source_filter, placements[0].y + 5, placements[0].x + 5)
            assert field[chosen] >= best - 1e-9 * (1.0 + best)
            ties = np.argwhere(field >= best - 1e-6 * (1.0 + best))
            if len(ties) == 1:  # unique max: indices must agree exactly
                assert tuple(ties[0]) == chosen

    def test_single_ideal_edge_one_placement(self, bank):
        # 11-row strip: one primitive spans the full height, so a single
        # ideal step should be explained by exactly one placement
        frame = np.full((11, 32), 100.0)
        frame[:, 16:] = 215.0
        placements, prims = matching_pursuit(frame, bank)
        assert len(placements) == 1
        assert abs((placements[0].x + 5) - 15.5) <= 1.0
        assert prims[0].kind == "common-edge"

    def test_flat_region_no_placements(self, bank):
        placements, _ = matching_pursuit(np.full((32, 32), 55.0), bank)
        assert placements == []

    def test_residual_energy_monotone(self, bank):
        # three separated ideal steps of decreasing amplitude
        frame = np.full((11, 44), 80.0)
        frame[:, 8:] += 150.0
        frame[:, 22:] -= 100.0
        frame[:, 36:] -= 40.0
        placements, prims = matching_pursuit(frame, bank, max_count=4)
        assert len(placements) == 3
        # residual = error of the placed renders against a flat-mean baseline
        model = np.full_like(frame, frame.mean())
        energy = [float(((frame - model) ** 2).sum())]
        for pl, prim in zip(placements, prims):
            model[pl.y : pl.y + 11, pl.x : pl.x + 11] = prim.render()
            energy.append(float(((frame - model) ** 2).sum()))
        assert all(b <= a + 1e-6 for a, b in zip(energy, energy[1:]))
        # and strictly decreasing here: every placement explains real structure
        assert all(b < a for a, b in zip(energy, energy[1:]))

    def test_suppression_enforces_minimum_spacing(self, bank):
        rng = np.random.default_rng(44)
        frame = gaussian_filter(rng.normal(size=(40, 40)), 1.2) * 120 + 128
        placements, _ = matching_pursuit(frame, bank, max_count=8, suppression_radius=7.0)
        centers = [(p.x + 5, p.y + 5) for p in placements]
        for i in range(len(centers)):
            for j in range(i + 1, len(centers)):
                d = math.hypot(centers[i][0] - centers[j][0], centers[i][1] - centers[j][1])
                assert d > 7.0

    def test_too_small_frame_rejected(self, bank):
        with pytest.raises(ValueError):
            matching_pursuit(np.zeros((8, 8)), bank)


class TestAttachVelocity:
    def _edge_primitive(self, bank):
        patch = step_edge(90.0)[10:21, 10:21]
        return generate_primitive(patch, bank.elements[fit_filter(patch, bank)[0]])

    def test_translating_edge_gets_its_velocity(self, bank):
        rng = np.random.default_rng(45)
        prev = rng.integers(0, 256, size=(30, 30)).astype(float)
        curr = np.roll(prev, 1, axis=1)
        grid, probs = velocity_posterior(prev, curr, (15, 15))
        prim = attach_velocity(self._edge_primitive(bank), grid, probs)
        assert prim.velocity == (1, 0)
        assert prim.n_frames == 3

    def test_static_content_zero_velocity(self, bank):
        rng = np.random.default_rng(46)
        frame = rng.integers(0, 256, size=(30, 30)).astype(float)
        grid, probs = velocity_posterior(frame, frame, (15, 15))
        prim = attach_velocity(self._edge_primitive(bank), grid, probs)
        assert prim.velocity == (0, 0)

    def test_uniform_posterior_flags_intrackable(self, bank):
        cfg = EntropyConfig()
        grid = velocity_grid(cfg.v_max)
        probs = np.full(len(grid), 1.0 / len(grid))
        prim = attach_velocity(self._edge_primitive(bank), grid, probs, cfg)
        assert prim.velocity is None
        assert prim.n_frames == 1


class TestSpecialPrimitives:
    def test_empty_bricks_empty_output(self):
        vol = make_volume(np.zeros((3, 22, 22), dtype=np.uint8), 8)
        prims, placements = extract_special_primitives(vol, [])
        assert prims == [] and placements == []

    def test_moving_texture_kernel(self):
        rng = np.random.default_rng(47)
        strip = rng.integers(0, 256, size=(11, 33))
        vol = np.full((3, 33, 33), 128, dtype=np.uint8)
        for t in range(3):
            vol[t, 11:22, :] = np.roll(strip, 2 * (t - 1), axis=1)
        v = make_volume(vol, 8)
        brick = Brick(x=11, y=11, t=1, n_frames=3)
        prims, placements = extract_special_primitives(v, [brick])
        assert len(prims) == 1
        assert prims[0].kind == "special"
        assert prims[0].velocity == (2, 0)
        np.testing.assert_array_equal(prims[0].profile, v.to_float()[1, 11:22, 11:22])

    def test_static_patch_replays_exactly(self):
        rng = np.random.default_rng(48)
        frame = rng.integers(0, 256, size=(22, 22))
        vol = make_volume(np.stack([frame] * 3), 8)
        brick = Brick(x=5, y=5, t=1, n_frames=3)
        prims, placements = extract_special_primitives(vol, [brick])
        assert prims[0].velocity == (0, 0)
        recon, mask, err = reconstruct_explicit(placements, prims, vol)
        assert err == 0.0
        assert mask[:, 5:16, 5:16].all()

    def test_one_frame_brick_rejected(self):
        vol = make_volume(np.zeros((3, 22, 22), dtype=np.uint8), 8)
        with pytest.raises(ValueError):
            extract_special_primitives(vol, [Brick(x=0, y=0, t=0, n_frames=1)])


class TestReconstruction:
    def test_primitive_composition_reconstructs_exactly(self, bank):
        blob_el = next(el for el in bank.elements if el.kind == "blob")
        edge_patch = step_edge(90.0)[10:21, 10:21]
        d = np.arange(11) - 5
        dx, dy = np.meshgrid(d, d)
        blob_patch = np.exp(-0.5 * (np.hypot(dx, dy) / 2.0) ** 2) * 120 + 50
        prims = [
            generate_primitive(edge_patch, bank.elements[fit_filter(edge_patch, bank)[0]]),
            generate_primitive(blob_patch, blob_el),
        ]
        from dataclasses import replace
        prims.append(replace(prims[0], velocity=(1, 0)))
        placements = [
            Placement(primitive_id=0, x=0, y=0, t=0),
            Placement(primitive_id=1, x=20, y=20, t=0),
            Placement(primitive_id=2, x=11, y=11, t=1),
        ]
        data = np.zeros((3, 40, 40))
        for pl in placements:
            prim = prims[pl.primitive_id]
            for dt in ((-1, 0, 1) if prim.velocity is not None else (0,)):
                data[pl.t + dt, pl.y : pl.y + 11, pl.x : pl.x + 11] = prim.render(dt)
        recon, mask, err = reconstruct_explicit(placements, prims, data)
        assert err == 0.0
        np.testing.assert_allclose(recon[mask], data[mask])

    def test_no_placements_marker(self):
        vol = make_volume(np.zeros((2, 22, 22), dtype=np.uint8), 8)
        recon, mask, err = reconstruct_explicit([], [], vol)
        assert err is None
        assert not mask.any()

    def test_spacing_rule_enforced(self, bank):
        patch = step_edge(90.0)[10:21, 10:21]
        prim = generate_primitive(patch, bank.elements[fit_filter(patch, bank)[0]])
        placements = [Placement(primitive_id=0, x=0, y=0, t=0),
                      Placement(primitive_id=0, x=4, y=4, t=0)]
        with pytest.raises(ValueError):
            reconstruct_explicit(placements, [prim], np.zeros((1, 22, 22)))

    def test_pursuit_output_reconstructs_ideal_edges(self, bank):
        frame = np.full((11, 40), 60.0)
        frame[:, 16:28] = 200.0  # bar: two ideal steps 12px apart
        placements, prims = matching_pursuit(frame, bank)
        assert len(placements) == 2
        recon, mask, err = reconstruct_explicit(placements, prims, frame[None])
        assert err is not None
        assert err <= 0.02

    def test_three_frame_replay_shifts_content(self, bank):
        patch = step_edge(90.0)[10:21, 10:21]
        from dataclasses import replace
        prim = replace(generate_primitive(patch, bank.elements[fit_filter(patch, bank)[0]]),
                       velocity=(2, 0))
        before, home, after = prim.render(-1), prim.render(0), prim.render(1)
        # interior columns are exact translates along the velocity
        np.testing.assert_allclose(before[:, :9], home[:, 2:], atol=1e-12)
        np.testing.assert_allclose(after[:, 2:], home[:, :9], atol=1e-12)


class TestExplicitParamCount:
    def test_table_replay_300_common(self):
        prims = [Primitive(kind="common-ridge", profile=np.zeros(11), orientation=0.3,
                           velocity=(1, 0) if i % 2 == 0 else None)
                 for i in range(300)]
        placements = [Placement(primitive_id=i, x=0, y=0, t=0) for i in range(300)]
        count = explicit_param_count(placements, prims)
        assert count.explicit == 3600
        assert count.velocity == 2 * 150
        assert count.n_common == 300

    def test_ten_special(self):
        prims = [Primitive(kind="special", profile=np.zeros((11, 11)), velocity=(0, 1))
                 for _ in range(10)]
        placements = [Placement(primitive_id=i, x=0, y=0, t=1) for i in range(10)]
        count = explicit_param_count(placements, prims)
        assert count.explicit == 1230
        assert count.n_special == 10

    def test_empty(self):
        count = explicit_param_count([], [])
        assert count.explicit == 0 and count.velocity == 0


class TestPrimitiveValidation:
    def test_common_profile_shape_enforced(self):
        with pytest.raises(ValueError):
            Primitive(kind="common-edge", profile=np.zeros((11, 11)))

    def test_special_patch_shape_enforced(self):
        with pytest.raises(ValueError):
            Primitive(kind="special", profile=np.zeros(11))

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            Primitive(kind="texton", profile=np.zeros(11))

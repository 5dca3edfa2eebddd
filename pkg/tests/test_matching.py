"""Tests for sparse and dense correspondence search."""

import numpy as np
import pytest

from splatloc.errors import InsufficientMatchesError
from splatloc.field import GaussianField
from splatloc.fitting import LandmarkSet, sample_landmarks
from splatloc.maps import FeatureMap
from splatloc.matching import (
    CoarseMatches,
    DetectOptions,
    Keypoint,
    detect_keypoints,
    match_dense_coarse,
    match_sparse,
    pool_coarse,
    refine_matches,
    write_matches_csv,
)
from splatloc.rendering import render
from splatloc.synthetic import SyntheticSceneSpec, gen_synthetic_scene

from helpers import default_camera, front_facing_pose, unit_rows


def random_map(rng, height, width, dim, valid_p=1.0):
    validity = rng.uniform(size=(height, width)) < valid_p
    data = unit_rows(rng, height * width, dim).reshape(height, width, dim)
    data = np.where(validity[:, :, None], data, 0.0).astype(np.float32)
    return FeatureMap(data=data, validity=validity)


def rendered_query(n=600, dim=16, width=64, seed=5):
    field, _ = gen_synthetic_scene(
        SyntheticSceneSpec(primitive_count=n, feature_dim=dim, rng_seed=seed)
    )
    cam = default_camera(width=width, height=width, f=1.25 * width)
    fm = render(field, cam, front_facing_pose(2.5)).features
    return field, fm


def one_hot_field(n, dim, rng):
    positions = rng.uniform(-1, 1, size=(n, 3))
    features = np.zeros((n, dim), dtype=np.float32)
    features[np.arange(n), np.arange(n) % dim] = 1.0
    return GaussianField(
        positions=positions,
        rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
        scales=np.full((n, 3), 0.05),
        opacities=np.full(n, 0.9),
        features=features,
    )


class TestKeypoint:
    def test_non_unit_descriptor_rejected(self):
        with pytest.raises(ValueError):
            Keypoint(pixel=np.array([1.0, 2.0]), descriptor=np.array([0.5, 0.5]), score=1.0)


class TestDetectKeypoints:
    def test_self_render_scores_high(self):
        field, fm = rendered_query()
        lm = sample_landmarks(field, anchor_count=256, nn=6)
        kpts = detect_keypoints(fm, field, lm)
        assert len(kpts) > 20
        scores = np.array([k.score for k in kpts])
        assert (scores > 0.95).mean() >= 0.9

    def test_nms_min_distance(self):
        field, fm = rendered_query()
        lm = sample_landmarks(field, anchor_count=256, nn=6)
        opts = DetectOptions(nms_radius=4)
        kpts = detect_keypoints(fm, field, lm, opts)
        px = np.stack([k.pixel for k in kpts])
        diff = px[:, None, :] - px[None, :, :]
        dist = np.sqrt(np.square(diff).sum(axis=2))
        dist[np.diag_indices(len(kpts))] = np.inf
        assert dist.min() >= opts.nms_radius

    def test_all_invalid_returns_empty(self):
        field, _ = rendered_query(n=50, width=16)
        lm = sample_landmarks(field, anchor_count=16, nn=3)
        fm = FeatureMap(
            data=np.zeros((16, 16, 16), dtype=np.float32),
            validity=np.zeros((16, 16), dtype=bool),
        )
        assert detect_keypoints(fm, field, lm) == []

    def test_max_kpts_and_floor(self):
        field, fm = rendered_query()
        lm = sample_landmarks(field, anchor_count=256, nn=6)
        assert len(detect_keypoints(fm, field, lm, DetectOptions(max_kpts=5))) == 5
        assert detect_keypoints(fm, field, lm, DetectOptions(sim_floor=1.01)) == []

    def test_descriptor_copied_from_map(self):
        field, fm = rendered_query()
        lm = sample_landmarks(field, anchor_count=256, nn=6)
        for kp in detect_keypoints(fm, field, lm, DetectOptions(max_kpts=10)):
            x, y = int(kp.pixel[0]), int(kp.pixel[1])
            assert fm.validity[y, x]
            np.testing.assert_array_equal(kp.descriptor, fm.data[y, x].astype(np.float64))

    def test_deterministic(self):
        field, fm = rendered_query()
        lm = sample_landmarks(field, anchor_count=256, nn=6)
        a = detect_keypoints(fm, field, lm)
        b = detect_keypoints(fm, field, lm)
        assert len(a) == len(b)
        for ka, kb in zip(a, b):
            assert np.array_equal(ka.pixel, kb.pixel) and ka.score == kb.score


class TestMatchSparse:
    def test_exact_copy_matches(self):
        rng = np.random.default_rng(0)
        field = one_hot_field(12, 16, rng)
        lm = LandmarkSet(indices=np.arange(12))
        kpts = [
            Keypoint(
                pixel=np.array([float(i), float(i)]),
                descriptor=field.features[i].astype(np.float64),
                score=1.0,
            )
            for i in range(2, 12)
        ]
        sm = match_sparse(kpts, field, lm, threshold=0.7)
        assert len(sm) == 10
        assert np.array_equal(np.sort(sm.primitive_indices), np.arange(2, 12))
        np.testing.assert_allclose(sm.similarity, 1.0, atol=1e-6)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        n_k, n_l, dim = 25, 18, 8
        field = one_hot_field(n_l, 16, rng)
        feats = unit_rows(rng, n_l, dim)
        field = GaussianField(
            positions=field.positions,
            rotations=field.rotations,
            scales=field.scales,
            opacities=field.opacities,
            features=feats.astype(np.float32),
        )
        lm = LandmarkSet(indices=np.arange(n_l))
        desc = unit_rows(rng, n_k, dim)
        kpts = [
            Keypoint(pixel=np.array([float(i), 0.0]), descriptor=desc[i], score=1.0)
            for i in range(n_k)
        ]
        threshold = 0.0
        sm = match_sparse(kpts, field, lm, threshold=threshold)

        lfeat = lm.features(field)
        sims = desc @ lfeat.T
        expected = []
        for i in range(n_k):
            j = int(np.argmax(sims[i]))
            if int(np.argmax(sims[:, j])) == i and sims[i, j] >= threshold:
                expected.append((i, j, sims[i, j]))
        assert len(sm) == len(expected)
        for (i, j, s), qpx, pidx, sim in zip(
            expected, sm.query_px, sm.primitive_indices, sm.similarity
        ):
            assert pidx == lm.indices[j]
            assert qpx[0] == float(i)
            assert sim == s

    def test_shared_best_landmark_yields_one_match(self):
        rng = np.random.default_rng(1)
        field = one_hot_field(8, 16, rng)
        lm = LandmarkSet(indices=np.arange(8))
        dup = field.features[0].astype(np.float64)
        kpts = [
            Keypoint(pixel=np.array([0.0, 0.0]), descriptor=dup, score=1.0),
            Keypoint(pixel=np.array([5.0, 0.0]), descriptor=dup, score=1.0),
        ] + [
            Keypoint(
                pixel=np.array([float(i), 1.0]),
                descriptor=field.features[i].astype(np.float64),
                score=1.0,
            )
            for i in range(1, 8)
        ]
        sm = match_sparse(kpts, field, lm, threshold=0.7)
        assert np.count_nonzero(sm.primitive_indices == 0) <= 1

    def test_insufficient_matches_raises(self):
        rng = np.random.default_rng(2)
        field = one_hot_field(16, 16, rng)
        lm = LandmarkSet(indices=np.arange(16))
        kpts = [
            Keypoint(
                pixel=np.array([float(i), 0.0]),
                descriptor=field.features[i].astype(np.float64),
                score=1.0,
            )
            for i in range(3)
        ]
        with pytest.raises(InsufficientMatchesError) as err:
            match_sparse(kpts, field, lm, threshold=0.7)
        assert err.value.count == 3


class TestPoolCoarse:
    def test_constant_map_identity(self):
        data = np.zeros((16, 16, 4), dtype=np.float32)
        data[:, :, 1] = 1.0
        fm = FeatureMap(data=data, validity=np.ones((16, 16), dtype=bool))
        pooled = pool_coarse(fm, factor=8)
        assert pooled.data.shape == (2, 2, 4)
        assert pooled.validity.all()
        np.testing.assert_allclose(pooled.data[:, :, 1], 1.0, atol=1e-7)

    def test_factor_one_unchanged(self):
        fm = random_map(np.random.default_rng(0), 8, 8, 4, valid_p=0.7)
        assert pool_coarse(fm, factor=1) is fm

    def test_non_divisible_rejected(self):
        fm = random_map(np.random.default_rng(0), 9, 8, 4)
        with pytest.raises(ValueError):
            pool_coarse(fm, factor=8)

    def test_matches_direct_oracle(self):
        fm = random_map(np.random.default_rng(4), 16, 24, 4, valid_p=0.6)
        factor = 4
        pooled = pool_coarse(fm, factor)
        for bi in range(4):
            for bj in range(6):
                block_v = fm.validity[
                    bi * factor : (bi + 1) * factor, bj * factor : (bj + 1) * factor
                ]
                block_d = fm.data[
                    bi * factor : (bi + 1) * factor, bj * factor : (bj + 1) * factor
                ].astype(np.float64)
                count = int(block_v.sum())
                expect_valid = 2 * count >= factor * factor
                assert pooled.validity[bi, bj] == expect_valid
                if expect_valid:
                    mean = block_d[block_v].mean(axis=0)
                    mean /= np.linalg.norm(mean)
                    np.testing.assert_allclose(
                        pooled.data[bi, bj].astype(np.float64), mean, atol=1e-6
                    )
                else:
                    assert np.all(pooled.data[bi, bj] == 0.0)

    def test_half_valid_rule_boundary(self):
        validity = np.zeros((2, 4), dtype=bool)
        validity[0, :2] = True  # left 2x2 block: 2/4 valid -> valid
        validity[0, 2] = True  # right block: 1/4 valid -> invalid
        data = np.zeros((2, 4, 2), dtype=np.float32)
        data[validity] = [1.0, 0.0]
        fm = FeatureMap(data=data, validity=validity)
        pooled = pool_coarse(fm, factor=2)
        assert pooled.validity[0, 0]
        assert not pooled.validity[0, 1]


def dual_softmax_oracle(fq, fr, temperature, conf_floor):
    """Explicit per-row/per-column softmax and exhaustive mutual argmax."""
    q_cells = [tuple(rc) for rc in np.argwhere(fq.validity)]
    r_cells = [tuple(rc) for rc in np.argwhere(fr.validity)]
    q = fq.data[fq.validity].astype(np.float64)
    r = fr.data[fr.validity].astype(np.float64)
    corr = (q @ r.T) / temperature
    n, m = corr.shape
    pr = np.empty_like(corr)
    for i in range(n):
        row = corr[i]
        e = np.exp(row - row.max())
        pr[i] = e / e.sum()
    pc = np.empty_like(corr)
    for j in range(m):
        col = np.ascontiguousarray(corr[:, j])
        e = np.exp(col - col.max())
        pc[:, j] = e / e.sum()
    prob = pr * pc
    pairs = []
    for i in range(n):
        j = int(np.argmax(prob[i]))
        if int(np.argmax(prob[:, j])) == i and prob[i, j] >= conf_floor:
            pairs.append((q_cells[i], r_cells[j], prob[i, j]))
    return pairs, pr, prob


class TestMatchDenseCoarse:
    def test_planted_permutation_recovered(self):
        rng = np.random.default_rng(0)
        n = 9
        data = np.zeros((3, 3, n), dtype=np.float32)
        for k in range(n):
            data[k // 3, k % 3, k] = 1.0
        fq = FeatureMap(data=data, validity=np.ones((3, 3), dtype=bool))
        perm = rng.permutation(n)
        rdata = data.reshape(n, n)[perm].reshape(3, 3, n)
        fr = FeatureMap(data=rdata, validity=np.ones((3, 3), dtype=bool))
        cm = match_dense_coarse(fq, fr)
        assert len(cm) == n
        for q_cell, r_cell in zip(cm.query_cells, cm.render_cells):
            qk = q_cell[0] * 3 + q_cell[1]
            rk = r_cell[0] * 3 + r_cell[1]
            assert perm[rk] == qk

    def test_bit_identical_to_oracle(self):
        rng = np.random.default_rng(8)
        fq = random_map(rng, 6, 7, 8, valid_p=0.8)
        fr = random_map(rng, 5, 8, 8, valid_p=0.8)
        cm = match_dense_coarse(fq, fr, temperature=0.1, conf_floor=0.0)
        pairs, pr, prob = dual_softmax_oracle(fq, fr, 0.1, 0.0)
        assert len(cm) == len(pairs)
        for k, (q_cell, r_cell, conf) in enumerate(pairs):
            assert tuple(cm.query_cells[k]) == q_cell
            assert tuple(cm.render_cells[k]) == r_cell
            assert cm.confidence[k] == conf  # bitwise
        np.testing.assert_allclose(pr.sum(axis=1), 1.0, atol=1e-6)
        assert prob.min() >= 0.0 and prob.max() <= 1.0

    def test_confidence_floor_monotone(self):
        rng = np.random.default_rng(9)
        fq = random_map(rng, 6, 6, 8)
        fr = random_map(rng, 6, 6, 8)
        low = match_dense_coarse(fq, fr, conf_floor=0.05)
        high = match_dense_coarse(fq, fr, conf_floor=0.5)
        low_set = {
            (tuple(q), tuple(r)) for q, r in zip(low.query_cells, low.render_cells)
        }
        high_set = {
            (tuple(q), tuple(r)) for q, r in zip(high.query_cells, high.render_cells)
        }
        assert high_set <= low_set

    def test_injective_both_sides(self):
        rng = np.random.default_rng(10)
        fq = random_map(rng, 8, 8, 8)
        fr = random_map(rng, 8, 8, 8)
        cm = match_dense_coarse(fq, fr, conf_floor=0.0)
        q_ids = [tuple(c) for c in cm.query_cells]
        r_ids = [tuple(c) for c in cm.render_cells]
        assert len(set(q_ids)) == len(q_ids)
        assert len(set(r_ids)) == len(r_ids)

    def test_flip_equivariance(self):
        rng = np.random.default_rng(11)
        fq = random_map(rng, 6, 6, 8, valid_p=0.9)
        fr = random_map(rng, 6, 6, 8, valid_p=0.9)
        cm = match_dense_coarse(fq, fr, conf_floor=0.0)
        fq_f = FeatureMap(
            data=np.ascontiguousarray(fq.data[::-1]),
            validity=np.ascontiguousarray(fq.validity[::-1]),
        )
        fr_f = FeatureMap(
            data=np.ascontiguousarray(fr.data[::-1]),
            validity=np.ascontiguousarray(fr.validity[::-1]),
        )
        cm_f = match_dense_coarse(fq_f, fr_f, conf_floor=0.0)
        orig = {
            (tuple(q), tuple(r)) for q, r in zip(cm.query_cells, cm.render_cells)
        }
        flipped = {
            ((5 - q[0], q[1]), (5 - r[0], r[1]))
            for q, r in zip(cm_f.query_cells, cm_f.render_cells)
        }
        assert orig == flipped

    def test_self_match_identity(self):
        _, fm = rendered_query(n=600, dim=32, width=64)
        coarse = pool_coarse(fm, 8)
        cm = match_dense_coarse(coarse, coarse)
        n_valid = int(coarse.validity.sum())
        identity = (cm.query_cells == cm.render_cells).all(axis=1).sum()
        assert identity >= 0.99 * n_valid

    def test_empty_inputs_give_empty_result(self):
        empty = FeatureMap(
            data=np.zeros((4, 4, 8), dtype=np.float32),
            validity=np.zeros((4, 4), dtype=bool),
        )
        other = random_map(np.random.default_rng(0), 4, 4, 8)
        assert len(match_dense_coarse(empty, other)) == 0
        assert len(match_dense_coarse(other, empty)) == 0


def shifted_map(fm, shift):
    data = np.zeros_like(fm.data)
    valid = np.zeros_like(fm.validity)
    data[:, shift:] = fm.data[:, :-shift]
    valid[:, shift:] = fm.validity[:, :-shift]
    return FeatureMap(data=data, validity=valid)


class TestRefineMatches:
    def test_planted_shift_recovered(self):
        _, fq = rendered_query()
        fr = shifted_map(fq, 3)
        qc, rc = pool_coarse(fq, 8), pool_coarse(fr, 8)
        cells = np.argwhere(qc.validity & rc.validity)
        coarse = CoarseMatches(
            query_cells=cells, render_cells=cells, confidence=np.ones(len(cells))
        )
        dm = refine_matches(fq, fr, coarse, window=8, factor=8, subpixel=True)
        assert len(dm) > 30
        dx = dm.render_px[:, 0] - dm.query_px[:, 0]
        dy = dm.render_px[:, 1] - dm.query_px[:, 1]
        assert np.median(np.abs(dx - 3)) < 0.5
        assert np.median(np.abs(dy)) < 0.5

    def test_identical_window_refines_to_anchor(self):
        data = np.zeros((16, 16, 4), dtype=np.float32)
        data[:, :, 0] = 1.0
        fm = FeatureMap(data=data, validity=np.ones((16, 16), dtype=bool))
        coarse = CoarseMatches(
            query_cells=np.array([[1, 1]]),
            render_cells=np.array([[1, 1]]),
            confidence=np.array([0.9]),
        )
        dm = refine_matches(fm, fm, coarse, window=8, factor=8, subpixel=True)
        np.testing.assert_allclose(dm.render_px, [[12.0, 12.0]], atol=1e-12)

    def test_within_half_window_of_anchor(self):
        rng = np.random.default_rng(6)
        fq = random_map(rng, 32, 32, 8)
        fr = random_map(rng, 32, 32, 8)
        cells = np.array([[r, c] for r in range(4) for c in range(4)])
        perm = np.random.default_rng(1).permutation(16)
        coarse = CoarseMatches(
            query_cells=cells, render_cells=cells[perm], confidence=np.ones(16)
        )
        dm = refine_matches(fq, fr, coarse, window=8, factor=8, subpixel=True)
        anchors = coarse.render_cells[:, ::-1] * 8 + 4  # (col,row) -> x,y
        assert np.all(np.abs(dm.render_px - anchors) <= 4.0)

    def test_confidence_carried(self):
        rng = np.random.default_rng(2)
        fq = random_map(rng, 16, 16, 8)
        fr = random_map(rng, 16, 16, 8)
        conf = np.array([0.4, 0.7])
        coarse = CoarseMatches(
            query_cells=np.array([[0, 0], [1, 1]]),
            render_cells=np.array([[1, 0], [0, 1]]),
            confidence=conf,
        )
        dm = refine_matches(fq, fr, coarse)
        np.testing.assert_array_equal(dm.confidence, conf)

    def test_invalid_window_dropped(self):
        rng = np.random.default_rng(3)
        fq = random_map(rng, 16, 16, 8)
        fr = random_map(rng, 16, 16, 8)
        validity = fr.validity.copy()
        validity[8:16, 0:8] = False  # cell (1, 0) entirely invalid
        fr = FeatureMap(
            data=np.where(validity[:, :, None], fr.data, 0.0), validity=validity
        )
        coarse = CoarseMatches(
            query_cells=np.array([[0, 0], [1, 1]]),
            render_cells=np.array([[1, 0], [1, 1]]),
            confidence=np.array([0.9, 0.8]),
        )
        dm = refine_matches(fq, fr, coarse)
        assert len(dm) == 1
        np.testing.assert_array_equal(dm.query_px, [[12.0, 12.0]])

    def test_invalid_query_center_dropped(self):
        rng = np.random.default_rng(3)
        fq = random_map(rng, 16, 16, 8)
        fr = random_map(rng, 16, 16, 8)
        validity = fq.validity.copy()
        validity[4, 4] = False
        fq = FeatureMap(
            data=np.where(validity[:, :, None], fq.data, 0.0), validity=validity
        )
        coarse = CoarseMatches(
            query_cells=np.array([[0, 0]]),
            render_cells=np.array([[0, 0]]),
            confidence=np.array([0.9]),
        )
        assert len(refine_matches(fq, fr, coarse)) == 0

    def test_hard_argmax_matches_loop_oracle(self):
        rng = np.random.default_rng(12)
        fq = random_map(rng, 24, 24, 8)
        fr = random_map(rng, 24, 24, 8, valid_p=0.85)
        cells = np.array([[r, c] for r in range(3) for c in range(3)])
        coarse = CoarseMatches(
            query_cells=cells, render_cells=cells[::-1], confidence=np.ones(9)
        )
        dm = refine_matches(fq, fr, coarse, window=8, factor=8, subpixel=False)
        k = 0
        for (qr, qc_), (rr, rc_) in zip(coarse.query_cells, coarse.render_cells):
            if not fq.validity[qr * 8 + 4, qc_ * 8 + 4]:
                continue
            desc = fq.data[qr * 8 + 4, qc_ * 8 + 4].astype(np.float64)
            best, best_key = None, None
            for yy in range(rr * 8, rr * 8 + 8):
                for xx in range(rc_ * 8, rc_ * 8 + 8):
                    if not fr.validity[yy, xx]:
                        continue
                    s = float(desc @ fr.data[yy, xx].astype(np.float64))
                    cheb = max(abs(yy - (rr * 8 + 4)), abs(xx - (rc_ * 8 + 4)))
                    key = (-s, cheb, yy, xx)
                    if best_key is None or key < best_key:
                        best_key, best = key, (xx, yy)
            if best is None:
                continue
            assert tuple(dm.render_px[k]) == (float(best[0]), float(best[1]))
            k += 1
        assert k == len(dm)

    def test_empty_coarse_gives_empty(self):
        fm = random_map(np.random.default_rng(0), 16, 16, 4)
        coarse = CoarseMatches(
            query_cells=np.zeros((0, 2), dtype=np.int64),
            render_cells=np.zeros((0, 2), dtype=np.int64),
            confidence=np.zeros(0),
        )
        assert len(refine_matches(fm, fm, coarse)) == 0


class TestMatchesCsv:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        fq = random_map(rng, 16, 16, 8)
        fr = random_map(rng, 16, 16, 8)
        coarse = CoarseMatches(
            query_cells=np.array([[0, 1], [1, 0]]),
            render_cells=np.array([[0, 0], [1, 1]]),
            confidence=np.array([0.5, 0.25]),
        )
        dm = refine_matches(fq, fr, coarse)
        path = tmp_path / "matches.csv"
        write_matches_csv(dm, path)
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "u_q,v_q,u_r,v_r,conf"
        assert len(lines) == len(dm) + 1
        row = [float(v) for v in lines[1].split(",")]
        np.testing.assert_allclose(row[:2], dm.query_px[0], atol=1e-6)
        np.testing.assert_allclose(row[2:4], dm.render_px[0], atol=1e-6)

import json
import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from sfdnet import numcore as nc
from sfdnet.numcore import Tensor, finite_diff_check
from sfdnet.sfd import (
    ChannelSelection,
    MiningError,
    SfdConfig,
    channel_cosines,
    cosine_sim,
    debug_records,
    disc_loss,
    mine_pairs,
    select_all,
    select_channels,
)


def py_cos(a, b):
    a, b = list(map(float, a)), list(map(float, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    dot = sum(x * y for x, y in zip(a, b))
    return max(-1.0, min(1.0, dot / (max(na, 1e-12) * max(nb, 1e-12))))


def brute_mine(v, y):
    inter, inner = [], []
    for i in range(len(y)):
        best_inter, best_inner = None, None
        for j in range(len(y)):
            if j == i:
                continue
            s = py_cos(v[i], v[j])
            if y[j] != y[i]:
                if best_inter is None or s > best_inter[0]:
                    best_inter = (s, j)
            elif best_inner is None or s < best_inner[0]:
                best_inner = (s, j)
        inter.append(best_inter[1])
        inner.append(best_inner[1])
    return inter, inner


def brute_channels(a, b, mode):
    out = []
    for p in range(a.shape[-1]):
        s = py_cos(a[:, :, p].ravel(), b[:, :, p].ravel())
        if (mode == "inter" and s > 0) or (mode == "inner" and s < 0):
            out.append(p)
    return out


def scalar_disc_loss(maps, inter, inner, psi):
    """Per-sample hinge recomputed from scratch with python floats."""
    total = 0.0
    for i in range(len(maps)):
        neg, pos = [], []
        for p in range(maps.shape[-1]):
            s_inter = py_cos(maps[i, :, :, p].ravel(), maps[inter[i], :, :, p].ravel())
            s_inner = py_cos(maps[i, :, :, p].ravel(), maps[inner[i], :, :, p].ravel())
            if s_inter > 0:
                neg.append(s_inter)
            if s_inner < 0:
                pos.append(s_inner)
        neg_mean = sum(neg) / len(neg) if neg else 0.0
        pos_mean = sum(pos) / len(pos) if pos else 0.0
        total += max(neg_mean + psi - pos_mean, 0.0)
    return total / len(maps)


def balanced_labels(rng, B, N):
    y = np.repeat(np.arange(N), B // N)
    return rng.permutation(y)


class TestCosine:
    def test_examples(self):
        a = np.array([1.0, -2.0, 3.0])
        assert cosine_sim(a, a) == pytest.approx(1.0, abs=1e-15)
        assert cosine_sim([1.0, 0.0], [0.0, 2.0]) == 0.0
        assert cosine_sim(a, 5 * a) == pytest.approx(1.0, abs=1e-15)
        assert cosine_sim(np.zeros(3), a) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(nc.ShapeError):
            cosine_sim([1.0, 2.0], [1.0, 2.0, 3.0])


class TestMining:
    def test_hand_example(self):
        deg = np.deg2rad([0, 30, 50, 170, 100])
        v = np.stack([np.cos(deg), np.sin(deg)], axis=1)
        y = [0, 0, 1, 1, 0]
        mined = mine_pairs(v, y)
        assert mined.inter_idx.tolist() == [2, 2, 1, 4, 2]
        assert mined.inner_idx.tolist() == [4, 4, 3, 2, 0]
        assert mined.inter_sim[0] == pytest.approx(math.cos(np.deg2rad(50)))
        assert mined.inner_sim[4] == pytest.approx(math.cos(np.deg2rad(100)))

    def test_identical_copies(self):
        a, b = np.array([1.0, 2.0, 0.5]), np.array([-1.0, 0.3, 2.0])
        mined = mine_pairs([a, a, b, b], [0, 0, 1, 1])
        np.testing.assert_allclose(mined.inner_sim, 1.0)
        assert mined.inner_idx.tolist() == [1, 0, 3, 2]
        assert mined.inter_idx.tolist() == [2, 2, 0, 0]

    def test_ties_go_to_lowest_index(self):
        v = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
        mined = mine_pairs(v, [0, 0, 1, 1, 1])
        assert mined.inter_idx.tolist() == [2, 2, 0, 0, 0]
        assert mined.inner_idx.tolist() == [1, 0, 3, 2, 2]

    def test_brute_force_on_random_batches(self):
        for t in range(100):
            r = np.random.default_rng([11, t])
            v = r.normal(size=(32, 6))
            y = balanced_labels(r, 32, 4)
            mined = mine_pairs(v, y)
            inter, inner = brute_mine(v, y)
            assert mined.inter_idx.tolist() == inter
            assert mined.inner_idx.tolist() == inner

    def test_partner_invariants(self, rng):
        v = rng.normal(size=(12, 5))
        y = balanced_labels(rng, 12, 3)
        m = mine_pairs(v, y)
        idx = np.arange(12)
        assert np.all(y[m.inter_idx] != y) and np.all(y[m.inner_idx] == y) and np.all(m.inner_idx != idx)
        assert np.all(np.abs(m.inter_sim) <= 1) and np.all(np.abs(m.inner_sim) <= 1)

    def test_missing_partner(self):
        with pytest.raises(MiningError):
            mine_pairs(np.eye(3), [0, 1, 1])
        with pytest.raises(MiningError):
            mine_pairs(np.eye(3), [0, 0, 0])


class TestChannelSelection:
    def test_self_and_negation(self, rng):
        a = rng.normal(size=(2, 2, 8))
        a[:, :, 3] = 0.0
        everything_but_3 = [p for p in range(8) if p != 3]
        assert select_channels(a, a, "inter").tolist() == everything_but_3
        assert select_channels(a, -a, "inner").tolist() == everything_but_3
        assert select_channels(a, a, "inner").tolist() == []

    def test_zero_cosine_excluded(self):
        a = np.zeros((2, 2, 2))
        b = np.zeros((2, 2, 2))
        a[0, 0, 0], b[1, 1, 0] = 1.0, 1.0
        a[:, :, 1], b[:, :, 1] = 1.0, 1.0
        assert select_channels(a, b, "inter").tolist() == [1]
        assert select_channels(a, b, "inner").tolist() == []

    def test_brute_force_on_random_pairs(self):
        for t in range(100):
            r = np.random.default_rng([12, t])
            a, b = r.normal(size=(2, 2, 8)), r.normal(size=(2, 2, 8))
            for mode in ("inter", "inner"):
                assert select_channels(a, b, mode).tolist() == brute_channels(a, b, mode)

    def test_channel_cosine_oracle(self, rng):
        a, b = rng.normal(size=(3, 2, 5)), rng.normal(size=(3, 2, 5))
        expected = [py_cos(a[:, :, p].ravel(), b[:, :, p].ravel()) for p in range(5)]
        np.testing.assert_allclose(channel_cosines(a, b), expected, atol=1e-12)

    def test_errors(self, rng):
        with pytest.raises(nc.ShapeError):
            select_channels(np.ones((2, 2, 3)), np.ones((2, 2, 4)), "inter")
        with pytest.raises(ValueError):
            select_channels(np.ones((2, 2, 3)), np.ones((2, 2, 3)), "both")


def _random_problem(seed, B=4, N=2, shape=(2, 2, 2)):
    r = np.random.default_rng(seed)
    maps = r.normal(size=(B, *shape))
    v = r.normal(size=(B, 5))
    y = balanced_labels(r, B, N)
    mined = mine_pairs(v, y)
    return maps, mined, select_all(maps, mined)


class TestDiscLoss:
    def test_scalar_oracle(self):
        maps = np.array([
            [[[1.0, 0.2], [0.5, -1.0]], [[0.3, 0.9], [-0.4, 0.1]]],
            [[[0.8, -0.6], [0.1, 0.4]], [[-0.2, 0.7], [0.9, -0.3]]],
            [[[-0.5, 0.3], [0.6, 0.8]], [[0.2, -0.9], [0.4, 0.5]]],
            [[[0.7, 0.1], [-0.3, -0.2]], [[0.5, 0.6], [-0.8, 0.9]]],
        ])
        v = np.array([[1.0, 0.1], [0.9, -0.4], [0.2, 1.0], [-0.3, 0.8]])
        y = [0, 0, 1, 1]
        mined = mine_pairs(v, y)
        sel = select_all(maps, mined)
        got = disc_loss(Tensor(maps), mined, sel, SfdConfig(psi=0.1)).item()
        want = scalar_disc_loss(maps, mined.inter_idx, mined.inner_idx, 0.1)
        assert got == pytest.approx(want, abs=1e-12)

    def test_list_input_matches_batch(self):
        maps, mined, sel = _random_problem(3, B=6, N=3)
        a = disc_loss(Tensor(maps), mined, sel, SfdConfig()).item()
        b = disc_loss([m for m in maps], mined, sel, SfdConfig()).item()
        assert a == pytest.approx(b, abs=1e-14)

    def test_both_sets_empty_gives_psi(self):
        # class 0 lives on pixel (0,0), class 1 on pixel (1,1): inter cosines are 0, inner cosines 1
        maps = np.zeros((4, 2, 2, 3))
        maps[0, 0, 0], maps[1, 0, 0] = [1.0, 2.0, 0.5], [2.0, 1.0, 1.0]
        maps[2, 1, 1], maps[3, 1, 1] = [1.0, 1.0, 1.0], [0.5, 3.0, 2.0]
        mined = mine_pairs(np.eye(4), [0, 0, 1, 1])
        sel = select_all(maps, mined)
        assert all(s.p_neg.size == 0 and s.p_pos.size == 0 for s in sel)
        assert disc_loss(Tensor(maps), mined, sel, SfdConfig(psi=0.25)).item() == pytest.approx(0.25)
        assert disc_loss(Tensor(maps), mined, sel, SfdConfig(psi=0.0)).item() == 0.0

    def test_hinge_floor(self):
        maps, mined, _ = _random_problem(5)
        cos_inter = channel_cosines(maps, maps[mined.inter_idx])
        cos_inner = channel_cosines(maps, maps[mined.inner_idx])
        # hand-picked sets so that neg-mean + psi <= pos-mean for every sample
        sel = []
        for i in range(4):
            neg = np.array([int(np.argmin(cos_inter[i]))])
            pos = np.array([int(np.argmax(cos_inner[i]))])
            assert cos_inter[i, neg[0]] + 0.01 <= cos_inner[i, pos[0]]
            sel.append(ChannelSelection(neg, pos))
        assert disc_loss(Tensor(maps), mined, sel, SfdConfig(psi=0.01)).item() == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative_and_at_least_psi(self, seed):
        maps, mined, sel = _random_problem(seed, B=6, N=3, shape=(2, 3, 4))
        loss = disc_loss(Tensor(maps), mined, sel, SfdConfig(psi=0.1)).item()
        assert loss >= 0.1 - 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
    def test_positive_rescaling_keeps_decisions(self, seed, scale):
        r = np.random.default_rng(seed)
        maps = r.normal(size=(6, 2, 2, 4))
        v = r.normal(size=(6, 5))
        y = balanced_labels(r, 6, 3)
        m1, m2 = mine_pairs(v, y), mine_pairs(v * scale, y)
        assert m1.inter_idx.tolist() == m2.inter_idx.tolist()
        assert m1.inner_idx.tolist() == m2.inner_idx.tolist()
        for s1, s2 in zip(select_all(maps, m1), select_all(maps * scale, m1)):
            assert s1.p_neg.tolist() == s2.p_neg.tolist() and s1.p_pos.tolist() == s2.p_pos.tolist()

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.05, 0.5))
    def test_monotone_in_inter_similarity(self, seed, step):
        maps, mined, sel = _random_problem(seed, B=4, N=2, shape=(2, 2, 3))
        i, j = 0, int(mined.inter_idx[0])
        assume(sel[0].p_neg.size > 0 and mined.inner_idx[0] != j)
        # freeze every other sample's term at psi so only sample 0 varies
        frozen = [sel[0]] + [ChannelSelection(np.array([], int), np.array([], int)) for _ in range(3)]
        u = int(sel[0].p_neg[0])
        before = disc_loss(Tensor(maps), mined, frozen, SfdConfig(psi=0.1)).item()
        moved = maps.copy()
        a = maps[i, :, :, u].ravel()
        b = maps[j, :, :, u].ravel()
        # rotate b away from a inside their common plane
        b_new = b - step * np.linalg.norm(b) * a / np.linalg.norm(a)
        moved[j, :, :, u] = b_new.reshape(2, 2)
        assume(py_cos(a, b_new) < py_cos(a, b))
        after = disc_loss(Tensor(moved), mined, frozen, SfdConfig(psi=0.1)).item()
        assert after < before

    def test_gradient_on_random_batches(self):
        checked, seed = 0, 0
        while checked < 20:
            seed += 1
            maps, mined, sel = _random_problem([99, seed], B=4, N=2, shape=(2, 2, 3))
            cos_inter = channel_cosines(maps, maps[mined.inter_idx])
            cos_inner = channel_cosines(maps, maps[mined.inner_idx])
            if np.min(np.abs(cos_inter)) < 1e-3 or np.min(np.abs(cos_inner)) < 1e-3:
                continue
            cfg = SfdConfig(psi=0.1)
            f = lambda t: disc_loss(t, mined, sel, cfg)  # noqa: E731
            assert finite_diff_check(f, maps) <= 1e-4
            checked += 1


def test_debug_records_schema(rng):
    maps, mined, sel = _random_problem(8)
    lines = debug_records(mined, sel, sample_ids=[10, 11, 12, 13]).splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[2])
    assert set(rec) == {"sample_id", "inter_idx", "inner_idx", "p_neg", "p_pos"}
    assert rec["sample_id"] == 12 and rec["inter_idx"] == int(mined.inter_idx[2])
    assert rec["p_neg"] == sel[2].p_neg.tolist()


def test_config_validation():
    with pytest.raises(ValueError):
        SfdConfig(psi=-0.1).validate()
    with pytest.raises(ValueError):
        SfdConfig(psi=float("nan")).validate()

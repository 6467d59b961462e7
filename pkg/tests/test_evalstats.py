import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats as sst

from inpaintssl import evalstats as ev
from inpaintssl.tensorcore import ShapeError


def brute_force_p(a, b):
    # independent oracle: scipy mid-ranks, every sign assignment enumerated
    d = np.asarray(a, float) - np.asarray(b, float)
    d = d[d != 0]
    ranks = sst.rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        if np.dot(signs, ranks) >= observed - 1e-9:
            hits += 1
    return hits / 2 ** len(d)


def test_dice_examples():
    p = np.zeros((20, 20), bool)
    p[:5, :] = True                       # 100 pixels
    g = np.zeros((20, 20), bool)
    g[:5, :10] = True
    g[10:15, :10] = True                  # 100 pixels, 50 shared
    assert ev.dice_coeff(p, g) == 0.5
    assert ev.dice_coeff(p, p) == 1.0
    assert ev.dice_coeff(p, ~p) == 0.0
    assert ev.dice_coeff(np.zeros(4), np.zeros(4)) == 1.0
    with pytest.raises(ShapeError):
        ev.dice_coeff(np.zeros(3), np.zeros(4))


def test_per_class_dice_threshold():
    probs = np.zeros((4, 4, 2))
    probs[..., 0] = 0.7
    gt = np.zeros((4, 4, 2))
    gt[..., 0] = 1
    assert ev.per_class_dice(probs, gt).tolist() == [1.0, 1.0]
    probs[..., 1] = 0.6
    assert ev.per_class_dice(probs, gt).tolist() == [1.0, 0.0]


def test_inpaint_l2():
    x = np.random.default_rng(0).normal(size=(6, 5, 3))
    assert ev.inpaint_l2(x, x) == 0.0
    g = np.zeros((4, 4))
    p = g.copy()
    p.flat[:7] = 1.0
    assert ev.inpaint_l2(p, g) == 7.0
    y = np.random.default_rng(1).normal(size=(6, 5, 3))
    loop = sum((x[i, j, c] - y[i, j, c]) ** 2 for i in range(6) for j in range(5) for c in range(3)) / 3
    assert abs(ev.inpaint_l2(x, y) - loop) < 1e-12
    with pytest.raises(ShapeError):
        ev.inpaint_l2(x, y[:5])


def test_clinical_measurements():
    m = np.zeros((20, 20), bool)
    m[:10, :10] = True
    assert ev.tissue_area(m, 0.5) == 50.0
    assert ev.tissue_volume(np.stack([m, m]), 2.0) == 400.0
    raw = np.full((20, 20), 37.5)
    assert ev.mean_intensity(raw, m) == 37.5
    assert ev.mean_intensity(raw, np.zeros((20, 20), bool)) is None
    with pytest.raises(ShapeError):
        ev.mean_intensity(raw, m[:5])


def test_percent_error_examples():
    assert ev.percent_error(110, 100) == pytest.approx(10.0)
    assert ev.percent_error(100, 100) == 0.0
    assert ev.percent_error(12, 30) == pytest.approx(60.0)
    assert ev.percent_error(5, 0) is None
    assert ev.percent_error(None, 3) is None


def test_wilcoxon_five_positive():
    assert ev.wilcoxon_one_sided([2, 3, 4, 5, 6], [1, 1, 1, 1, 1]) == 0.03125


def test_wilcoxon_undefined_and_errors():
    a = [0.3, 0.5, 0.6, 0.1, 0.9]
    assert ev.wilcoxon_one_sided(a, a) is None
    with pytest.raises(ValueError):
        ev.wilcoxon_one_sided([1, 2, 3, 4], [0, 0, 0, 0])
    with pytest.raises(ShapeError):
        ev.wilcoxon_one_sided([1, 2], [1, 2, 3])
    with pytest.raises(ValueError):
        ev.wilcoxon_one_sided([2, 3, 4, 5, 6], [1] * 5, method="bootstrap")


def test_wilcoxon_exact_matches_enumeration_200_samples():
    rng = np.random.default_rng(0)
    for i in range(200):
        n = 5 + i % 6
        a = rng.normal(size=n)
        # rounding forces some tied magnitudes and zero differences
        b = np.round(a - rng.normal(0.3, 1.0, size=n), 1) if i % 2 else rng.normal(size=n)
        a = np.round(a, 1) if i % 2 else a
        d = a - b
        if np.count_nonzero(d) < 5:
            continue
        assert ev.wilcoxon_one_sided(a, b, "exact") == pytest.approx(brute_force_p(a, b), abs=1e-15)


def test_wilcoxon_matches_scipy_exact_without_ties():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = rng.normal(size=(2, 9))
        ref = sst.wilcoxon(a, b, alternative="greater", method="exact").pvalue
        assert ev.wilcoxon_one_sided(a, b) == pytest.approx(ref, abs=1e-12)


def test_wilcoxon_approximation_close_at_n12():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = rng.normal(size=12)
        b = a - rng.normal(0.2, 1.0, size=12)
        exact = ev.wilcoxon_one_sided(a, b, "exact")
        assert exact == pytest.approx(brute_force_p(a, b), abs=1e-15)
        assert abs(ev.wilcoxon_one_sided(a, b, "approx") - exact) < 0.01


def test_wilcoxon_auto_switches_above_25():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(2, 30))
    assert ev.wilcoxon_one_sided(a, b) == ev.wilcoxon_one_sided(a, b, "approx")
    ref = sst.wilcoxon(a, b, alternative="greater", method="approx", correction=True).pvalue
    assert ev.wilcoxon_one_sided(a, b) == pytest.approx(ref, abs=1e-12)


def test_rank_strategies_picks_top3_intersection():
    rng = np.random.default_rng(4)
    base = {d: rng.random(20) for d in ("ct", "mr")}
    shift = {("r", 32, "pd"): 0.20, ("r", 16, "pd"): 0.15, ("p", 8, "rnd"): 0.12, ("p", 64, "pd"): -0.1}
    shift[("r", 8, "rnd")] = -0.2
    mr_shift = dict(shift)
    mr_shift[("p", 8, "rnd")] = -0.05
    mr_shift[("r", 8, "rnd")] = 0.1
    ssl = {"ct": {s: base["ct"] + v + rng.normal(0, 0.01, 20) for s, v in shift.items()},
           "mr": {s: base["mr"] + v + rng.normal(0, 0.01, 20) for s, v in mr_shift.items()}}
    res = ev.rank_strategies(ssl, base, top_k=3)
    assert not res.no_intersection
    assert res.optimal in {("r", 32, "pd"), ("r", 16, "pd")}
    assert sorted(res.candidates) == [("r", 16, "pd"), ("r", 32, "pd")]
    for d, r in res.rankings.items():
        assert sorted(r.order) == sorted(shift)
        ps = [p for _, p in r.rows]
        assert ps == sorted(ps)


def test_rank_single_dataset_is_its_own_top1():
    rng = np.random.default_rng(5)
    sup = rng.random(10)
    ssl = {"ct": {("a", 1, "x"): sup + 0.3, ("b", 2, "y"): sup + rng.normal(0, 0.1, 10)}}
    res = ev.rank_strategies(ssl, {"ct": sup})
    assert res.optimal == res.rankings["ct"].order[0] == ("a", 1, "x")


def test_rank_disjoint_tops_no_intersection():
    sup = np.linspace(0, 1, 10)
    gains = np.linspace(0.1, 0.5, 10)
    names = [("s", k, "x") for k in range(6)]
    ct = {s: sup + (gains if i < 3 else -gains) for i, s in enumerate(names)}
    mr = {s: sup + (-gains if i < 3 else gains) for i, s in enumerate(names)}
    res = ev.rank_strategies({"ct": ct, "mr": mr}, {"ct": sup, "mr": sup}, top_k=3)
    assert res.no_intersection and res.optimal is None


def test_rank_ties_broken_lexicographically():
    sup = np.zeros(6)
    same = np.arange(1, 7) / 10
    ssl = {"ct": {("b", 1, "x"): same, ("a", 2, "y"): same, ("a", 1, "z"): same}}
    res = ev.rank_strategies(ssl, {"ct": sup})
    assert res.rankings["ct"].order == [("a", 1, "z"), ("a", 2, "y"), ("b", 1, "x")]


def test_rank_missing_cell_lists_it():
    sup = np.arange(6.0)
    with pytest.raises(ev.IncompleteGridError) as exc:
        ev.rank_strategies({"ct": {("a", 1, "x"): sup + 1}, "mr": {}}, {"ct": sup, "mr": sup})
    assert exc.value.missing == [("mr", ("a", 1, "x"))]


masks = st.integers(0, 2 ** 32 - 1).map(lambda s: np.random.default_rng(s).random((2, 6, 6)) > 0.5)


@settings(max_examples=100, deadline=None)
@given(m=masks)
def test_dice_symmetric_and_bounded(m):
    p, g = m
    assert ev.dice_coeff(p, g) == ev.dice_coeff(g, p)
    assert 0.0 <= ev.dice_coeff(p, g) <= 1.0
    if p.any():
        assert ev.dice_coeff(p, p) == 1.0


@settings(max_examples=100, deadline=None)
@given(x=st.floats(-1e6, 1e6), y=st.floats(-1e6, 1e6).filter(lambda v: abs(v) > 1e-6),
       k=st.floats(-1e3, 1e3).filter(lambda v: abs(v) > 1e-3))
def test_percent_error_scale_invariant(x, y, k):
    assert ev.percent_error(k * x, k * y) == pytest.approx(ev.percent_error(x, y), rel=1e-9, abs=1e-9)
    assert ev.percent_error(x, y) >= 0


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1), n_strats=st.integers(1, 6))
def test_ranking_is_permutation_with_sorted_p(seed, n_strats):
    rng = np.random.default_rng(seed)
    sup = rng.random(8)
    ssl = {"ct": {("t", k, "s"): sup + rng.normal(0, 0.2, 8) for k in range(n_strats)}}
    res = ev.rank_strategies(ssl, {"ct": sup})
    r = res.rankings["ct"]
    assert sorted(r.order) == sorted(ssl["ct"])
    ps = [p for _, p in r.rows if p is not None]
    assert ps == sorted(ps)

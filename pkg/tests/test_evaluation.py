from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from stfl.errors import ReportError, ShapeError, UndefinedCIError
from stfl.evaluation import (MetricSample, confidence_interval, dice, evaluate_on_union, format_pm, improvement_report,
                             iou, metrics_table, threshold_logits)


def _m(rows):
    return np.array([[int(c) for c in r] for r in rows.split()], dtype=np.uint8)


# (pred, truth, |P∩T|, |P|, |T|, |P∪T|) counted by hand
HAND_PAIRS = [
    ("1100 0000", "1111 0000", 2, 2, 4, 4),
    ("1111 0000", "1111 0000", 4, 4, 4, 4),
    ("1100 0000", "0011 0000", 0, 2, 2, 4),
    ("0000 0000", "0000 0000", 0, 0, 0, 0),
    ("0000 0000", "0100 0000", 0, 0, 1, 1),
    ("1000 0000", "0000 0000", 0, 1, 0, 1),
    ("1111 1111", "1000 0001", 2, 8, 2, 8),
    ("110 011 000", "010 010 010", 2, 4, 3, 5),
    ("101 010 101", "111 000 111", 4, 5, 6, 7),
    ("1110 1110 0000", "0111 0111 0000", 4, 6, 6, 8),
    ("1 1 1 0", "0 1 1 1", 2, 3, 3, 4),
    ("10000 00000 00001", "10000 00000 00000", 1, 2, 1, 2),
]


@pytest.mark.parametrize("p,t,inter,np_,nt,union", HAND_PAIRS)
def test_hand_counted_pairs(p, t, inter, np_, nt, union):
    P, T = _m(p), _m(t)
    exp_dice = 1.0 if np_ + nt == 0 else 2 * inter / (np_ + nt)
    exp_iou = 1.0 if union == 0 else inter / union
    assert dice(P, T) == exp_dice
    assert iou(P, T) == exp_iou
    assert dice(T, P) == dice(P, T) and iou(T, P) == iou(P, T)


def test_documented_examples():
    assert dice(*map(_m, ("1100 0000", "1111 0000"))) == pytest.approx(0.6667, abs=1e-4)
    assert iou(*map(_m, ("1100 0000", "1111 0000"))) == 0.5


def test_dice_iou_identity_on_random_pairs():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        shape = tuple(rng.integers(1, 20, size=2))
        d = rng.random()
        P, T = rng.random(shape) < d, rng.random(shape) < rng.random()
        dv, iv = dice(P, T), iou(P, T)
        assert iv <= dv <= 1.0
        assert abs(dv - 2 * iv / (1 + iv)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_metrics_invariant_under_pixel_permutation(seed):
    rng = np.random.default_rng(seed)
    P, T = rng.random((8, 8)) < 0.3, rng.random((8, 8)) < 0.3
    perm = rng.permutation(64)
    Pp, Tp = P.reshape(-1)[perm].reshape(8, 8), T.reshape(-1)[perm].reshape(8, 8)
    assert dice(P, T) == dice(Pp, Tp) and iou(P, T) == iou(Pp, Tp)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros((2, 2)), np.zeros((2, 3)))


def test_threshold_is_strict():
    assert threshold_logits(np.array([0.0, 1e-6, -1e-6])).tolist() == [0, 1, 0]


def _clients(n, rng):
    out = []
    for _ in range(n):
        y = (rng.random((6, 1, 16, 16)) < 0.1).astype(np.uint8)
        out.append(SimpleNamespace(val_x=np.concatenate([y, y], axis=1).astype(np.float32), val_y=y))
    return out


def test_evaluate_on_union_oracle_and_zero_logits():
    rng = np.random.default_rng(1)
    clients = _clients(3, rng)
    oracle = lambda cfg, params, x: np.where(x[:, :1] > 0, 10.0, -10.0)
    assert evaluate_on_union(None, None, clients, predict=oracle) == (1.0, 1.0)
    zero = lambda cfg, params, x: np.zeros_like(x[:, :1])
    d, i = evaluate_on_union(None, None, clients, predict=zero)
    n_empty = sum(int(c.val_y[j].sum() == 0) for c in clients for j in range(6))
    assert d == pytest.approx(n_empty / 18) and i == pytest.approx(n_empty / 18)


def test_evaluate_on_union_counts_every_validation_sample():
    rng = np.random.default_rng(2)
    clients = _clients(4, rng)
    seen = []

    def spy(cfg, params, x):
        seen.append(len(x))
        return np.zeros_like(x[:, :1])

    evaluate_on_union(None, None, clients, predict=spy)
    assert sum(seen) == 4 * 6


def test_confidence_interval_examples():
    assert confidence_interval([0.5, 0.5, 0.5]) == (0.5, 0.0)
    m, h = confidence_interval([0.4, 0.5, 0.6])
    assert m == pytest.approx(0.5)
    assert h == pytest.approx(4.303 * 0.1 / np.sqrt(3), abs=1e-4)
    assert h == pytest.approx(0.2484, abs=1e-4)
    with pytest.raises(UndefinedCIError):
        confidence_interval([0.3])


def test_ci_half_width_shrinks_like_inverse_sqrt_n():
    rng = np.random.default_rng(3)
    for n in (10, 40, 160):
        mean_hw = np.mean([confidence_interval(rng.normal(0, 1, n))[1] for _ in range(10000 // 10)])
        # expected half-width: t(0.975, n-1) * E[s] / sqrt(n), E[s] ≈ 1 for these n
        expected = stats.t.ppf(0.975, n - 1) / np.sqrt(n)
        assert abs(mean_hw - expected) / expected < 0.10
    hw = lambda n: np.mean([confidence_interval(rng.normal(0, 1, n))[1] for _ in range(2500)])
    ratio = hw(20) / hw(80)
    assert abs(ratio - 2.0 * (2.093 / 1.990)) / 2.0 < 0.10


def test_format_pm():
    assert format_pm(0.4142, 0.0121) == "0.414 ± 0.012"
    assert format_pm(0.4142, None) == "0.414"


def _sample(scheme, trial, per_noise, n=3, dt="synthetic", d=0.5):
    return MetricSample(scheme, dt, n, trial, d, d / (2 - d), tuple(per_noise))


def test_improvement_examples():
    rows = improvement_report([_sample("vanilla", 0, [("inversion", 0.40)]),
                               _sample("client_specific", 0, [("inversion", 0.50)])])
    assert len(rows) == 1
    assert rows[0]["pct_mean"] == pytest.approx(25.0) and rows[0]["noise_pattern"] == "inversion"
    same = [("clean", 0.7), ("inversion", 0.4), ("gaussian", 0.6)]
    rows = improvement_report([_sample("vanilla", t, same) for t in range(3)]
                              + [_sample("universal", t, same) for t in range(3)])
    assert all(r["pct_mean"] == 0.0 and r["n_pairs"] == 3 for r in rows)


def test_improvement_averages_over_pairs_and_clients():
    rows = improvement_report([
        _sample("vanilla", 0, [("inversion", 0.4), ("inversion", 0.6)]),
        _sample("client_specific", 0, [("inversion", 0.6), ("inversion", 0.6)]),
        _sample("vanilla", 1, [("inversion", 0.5)], n=4),
        _sample("client_specific", 1, [("inversion", 0.5)], n=4),
    ])
    (row,) = rows
    assert row["pct_mean"] == pytest.approx((20.0 + 0.0) / 2)
    assert row["pct_best"] == pytest.approx(20.0)


def test_missing_baseline_names_cell():
    with pytest.raises(ReportError, match=r"n_clients=4.*trial=7"):
        improvement_report([_sample("universal", 7, [("inversion", 0.5)], n=4)])


def test_metrics_table_shape():
    samples = [_sample(s, t, [], d=0.4 + 0.01 * t) for s in ("centralized", "vanilla") for t in range(5)]
    rows = metrics_table(samples)
    assert [r["scheme"] for r in rows] == ["vanilla", "vanilla", "centralized", "centralized"]
    assert all(r["n_trials"] == 5 and r["ci"] > 0 for r in rows)
    single = metrics_table([_sample("vanilla", 0, [])])
    assert single[0]["ci"] is None and single[0]["n_trials"] == 1

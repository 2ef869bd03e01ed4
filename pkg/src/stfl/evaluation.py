"""Dice / IOU metrics, Student-t confidence intervals and the two report shapes.

Report shapes:

* metrics table: one row per (scheme, dataset_type, n_clients, metric) with
  mean, 95% CI half-width and trial count;
* improvement table: per (dataset_type, noise pattern, scheme) percentage
  change in Dice relative to vanilla FedAvg on matched runs.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import stats

from stfl.errors import ReportError, ShapeError, UndefinedCIError

THRESHOLD = 0.5


def _binary_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred)
    t = np.asarray(truth)
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    return p.astype(bool), t.astype(bool)


def dice(pred, truth) -> float:
    """2|P∩T| / (|P|+|T|); two empty masks score 1.0."""
    p, t = _binary_pair(pred, truth)
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def iou(pred, truth) -> float:
    """|P∩T| / |P∪T|; two empty masks score 1.0."""
    p, t = _binary_pair(pred, truth)
    union = int((p | t).sum())
    if union == 0:
        return 1.0
    return int((p & t).sum()) / union


def threshold_logits(logits: np.ndarray) -> np.ndarray:
    # strict: sigmoid(0) = 0.5 is background
    prob = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return (prob > THRESHOLD).astype(np.uint8)


def default_predict(unet_cfg, params, x: np.ndarray) -> np.ndarray:
    from stfl.models import unet_forward

    return unet_forward(unet_cfg, params, x).data


def sample_scores(unet_cfg, params, xs: np.ndarray, ys: np.ndarray, predict: Callable | None = None,
                  batch: int = 8) -> tuple[list[float], list[float]]:
    """Per-sample Dice and IOU of thresholded predictions on (xs, ys)."""
    predict = predict or default_predict
    dices, ious = [], []
    for start in range(0, len(xs), batch):
        logits = predict(unet_cfg, params, xs[start:start + batch])
        for pm, tm in zip(threshold_logits(logits), ys[start:start + batch]):
            dices.append(dice(pm[0], tm[0]))
            ious.append(iou(pm[0], tm[0]))
    return dices, ious


def evaluate_on_union(unet_cfg, params, clients: Sequence, predict: Callable | None = None) -> tuple[float, float]:
    """Mean Dice and IOU over the union of every client's validation samples.

    ``clients`` hold prepared two-channel inputs (``val_x``) and masks
    (``val_y``), stylized exactly as in training.
    """
    dices, ious = [], []
    for c in clients:
        d, i = sample_scores(unet_cfg, params, c.val_x, c.val_y, predict)
        dices += d
        ious += i
    if not dices:
        raise ReportError("validation union is empty")
    return float(np.mean(dices)), float(np.mean(ious))


def confidence_interval(samples: Sequence[float], level: float = 0.95) -> tuple[float, float]:
    """(mean, half-width) of the Student-t interval."""
    x = np.asarray(samples, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise UndefinedCIError(f"confidence interval needs >= 2 samples, got {n}")
    t = stats.t.ppf(0.5 + level / 2, n - 1)
    return float(x.mean()), float(t * x.std(ddof=1) / math.sqrt(n))


def format_pm(mean: float, half_width: float | None, digits: int = 3) -> str:
    if half_width is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ± {half_width:.{digits}f}"


@dataclass(frozen=True)
class MetricSample:
    scheme: str
    dataset_type: str
    n_clients: int
    trial_seed: int
    dice: float
    iou: float
    per_noise: tuple = ()  # ((noise_kind, dice), ...) on each client's own train ∪ val data


def metrics_table(samples: Iterable[MetricSample]) -> list[dict]:
    groups: dict[tuple, list[MetricSample]] = defaultdict(list)
    for s in samples:
        groups[(s.scheme, s.dataset_type, s.n_clients)].append(s)
    rows = []
    for (scheme, dtype, n), group in sorted(groups.items(), key=lambda kv: (kv[0][1], kv[0][2], _scheme_rank(kv[0][0]))):
        for metric in ("dice", "iou"):
            vals = [getattr(s, metric) for s in group]
            mean, ci = (confidence_interval(vals) if len(vals) >= 2 else (float(np.mean(vals)), None))
            rows.append({"scheme": scheme, "dataset_type": dtype, "n_clients": n, "metric": metric,
                         "mean": mean, "ci": ci, "n_trials": len(vals)})
    return rows


SCHEME_ORDER = ("vanilla", "universal", "client_specific", "centralized")


def _scheme_rank(s: str) -> int:
    return SCHEME_ORDER.index(s) if s in SCHEME_ORDER else len(SCHEME_ORDER)


def improvement_report(samples: Iterable[MetricSample], baseline: str = "vanilla") -> list[dict]:
    """Per-noise % Dice improvement over ``baseline`` on matched (n_clients, trial) runs.

    Each row carries the mean over matched pairs (``pct_mean``) and the best
    single pair (``pct_best``).
    """
    samples = list(samples)
    base = {(s.dataset_type, s.n_clients, s.trial_seed): s for s in samples if s.scheme == baseline}
    acc: dict[tuple, list[float]] = defaultdict(list)
    for s in samples:
        if s.scheme == baseline:
            continue
        cell = (s.dataset_type, s.n_clients, s.trial_seed)
        b = base.get(cell)
        if b is None:
            raise ReportError(f"no {baseline} baseline for scheme={s.scheme} dataset_type={cell[0]} "
                              f"n_clients={cell[1]} trial={cell[2]}")
        b_noise = _noise_means(b.per_noise)
        for kind, d in _noise_means(s.per_noise).items():
            if kind not in b_noise:
                raise ReportError(f"baseline lacks noise pattern {kind!r} for cell {cell}")
            bv = b_noise[kind]
            pct = 0.0 if d == bv else (100.0 * (d - bv) / bv if bv > 0 else math.inf)
            acc[(s.dataset_type, kind, s.scheme)].append(pct)
    return [{"dataset_type": dt, "noise_pattern": kind, "scheme": scheme,
             "pct_mean": float(np.mean(v)), "pct_best": float(np.max(v)), "n_pairs": len(v)}
            for (dt, kind, scheme), v in sorted(acc.items(), key=lambda kv: (kv[0][0], kv[0][1], _scheme_rank(kv[0][2])))]


def _noise_means(per_noise) -> dict[str, float]:
    acc: dict[str, list[float]] = defaultdict(list)
    for kind, d in per_noise:
        acc[kind].append(d)
    return {k: float(np.mean(v)) for k, v in acc.items()}

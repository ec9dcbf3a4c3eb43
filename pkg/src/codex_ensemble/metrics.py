"""Multi-label evaluation measures and the confidence/scope table.

Rank measures use the ">=" convention throughout: the depth of label j is the
number of labels scoring at least as high as j.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateRecord,
    EmptySelection,
    IndexOutOfRange,
    NoTrueLabels,
    ShapeMismatch,
)

DEFAULT_SCOPES = (0.03, 0.10, 0.20, 0.30, 0.50, 1.00)
_CHUNK = 2048


def _check(scores, truth):
    S = np.asarray(scores, dtype=np.float64)
    T = np.asarray(truth).astype(bool)
    if S.ndim == 1:
        S, T = S[None, :], T[None, :] if T.ndim == 1 else T
    if S.shape != T.shape:
        raise ShapeMismatch(f"scores {S.shape} vs truth {T.shape}")
    return S, T


def _depths(S: np.ndarray) -> np.ndarray:
    """depth[i, j] = #{k : S[i, k] >= S[i, j]}."""
    out = np.empty(S.shape, dtype=np.int64)
    for a in range(0, S.shape[0], _CHUNK):
        block = S[a:a + _CHUNK]
        out[a:a + _CHUNK] = (block[:, None, :] >= block[:, :, None]).sum(axis=2)
    return out


def _binarize(scores, threshold):
    return np.asarray(scores, dtype=np.float64) >= threshold


def micro_f1(scores, truth, threshold: float = 0.5) -> float:
    S, T = _check(scores, truth)
    P = S >= threshold
    tp = np.sum(P & T)
    fp = np.sum(P & ~T)
    fn = np.sum(~P & T)
    denom = 2 * tp + fp + fn
    return float(2 * tp / denom) if denom else 0.0


def jaccard_per_record(scores, truth, threshold: float = 0.5) -> np.ndarray:
    S, T = _check(scores, truth)
    P = S >= threshold
    inter = np.sum(P & T, axis=1)
    union = np.sum(P | T, axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def jaccard(scores, truth, threshold: float = 0.5) -> float:
    return float(np.mean(jaccard_per_record(scores, truth, threshold)))


def lrap(scores, truth) -> float:
    """Label-ranking average precision."""
    S, T = _check(scores, truth)
    n_true = T.sum(axis=1)
    if np.any(n_true == 0):
        raise NoTrueLabels("every record needs at least one true label")
    total = 0.0
    for a in range(0, S.shape[0], _CHUNK):
        block, tb = S[a:a + _CHUNK], T[a:a + _CHUNK]
        ge = block[:, None, :] >= block[:, :, None]  # ge[i, j, k]: k scores >= j
        depth_all = ge.sum(axis=2)
        depth_true = (ge & tb[:, None, :]).sum(axis=2)
        ratio = np.where(tb, depth_true / depth_all, 0.0)
        total += float(np.sum(ratio.sum(axis=1) / tb.sum(axis=1)))
    return total / S.shape[0]


def ranking_loss(scores, truth) -> float:
    """Mean fraction of (true, false) pairs with score_true <= score_false."""
    S, T = _check(scores, truth)
    n_true = T.sum(axis=1)
    n_false = T.shape[1] - n_true
    if np.any(n_true == 0) or np.any(n_false == 0):
        raise DegenerateRecord("every record needs at least one true and one false label")
    total = 0.0
    for a in range(0, S.shape[0], _CHUNK):
        block, tb = S[a:a + _CHUNK], T[a:a + _CHUNK]
        bad = (block[:, :, None] <= block[:, None, :]) & tb[:, :, None] & ~tb[:, None, :]
        total += float(np.sum(bad.sum(axis=(1, 2)) / (n_true[a:a + _CHUNK] * n_false[a:a + _CHUNK])))
    return total / S.shape[0]


def coverage_error(scores, truth) -> float:
    S, T = _check(scores, truth)
    if np.any(T.sum(axis=1) == 0):
        raise NoTrueLabels("every record needs at least one true label")
    depth = _depths(S)
    return float(np.mean(np.where(T, depth, 0).max(axis=1)))


def principal_accuracy(scores, principal) -> float:
    S = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    p = np.asarray(principal, dtype=np.int64).reshape(-1)
    if p.shape[0] != S.shape[0]:
        raise ShapeMismatch(f"{S.shape[0]} score rows vs {p.shape[0]} principal indices")
    if np.any(p < 0) or np.any(p >= S.shape[1]):
        raise IndexOutOfRange("principal index outside label range")
    # np.argmax returns the first maximum: ties go to the lowest index
    return float(np.mean(np.argmax(S, axis=1) == p))


@dataclass(frozen=True)
class EvalReport:
    lrap: float
    ranking_loss: float
    coverage_error: float
    micro_f1: float
    jaccard: float
    principal_accuracy: float
    n_records: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            lines.append(f"{k}={v}" if isinstance(v, int) else f"{k}={v:.6f}")
        return "\n".join(lines) + "\n"


def evaluate(scores, truth, principal, threshold: float = 0.5) -> EvalReport:
    S, T = _check(scores, truth)
    return EvalReport(
        lrap=lrap(S, T),
        ranking_loss=ranking_loss(S, T),
        coverage_error=coverage_error(S, T),
        micro_f1=micro_f1(S, T, threshold),
        jaccard=jaccard(S, T, threshold),
        principal_accuracy=principal_accuracy(S, principal),
        n_records=int(S.shape[0]),
    )


def selection_size(scope: float, n: int) -> int:
    # round() guards against float products like 0.07 * 100 = 7.000000000000001
    return int(math.ceil(round(scope * n, 9)))


@dataclass(frozen=True)
class ScopeRow:
    scope: float
    n_selected: int
    lrap: float
    coverage_error: float
    ranking_loss: float


def scope_report(confidences, scores, truth, principal=None, scopes: Sequence[float] = DEFAULT_SCOPES) -> list[ScopeRow]:
    """Rank metrics over the ceil(scope * N) most confident records, per scope.

    Equal confidences keep record order.
    """
    S, T = _check(scores, truth)
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    if conf.shape[0] != S.shape[0]:
        raise ShapeMismatch(f"{conf.shape[0]} confidences vs {S.shape[0]} records")
    order = np.argsort(-conf, kind="stable")
    rows = []
    for s in scopes:
        k = selection_size(s, S.shape[0])
        if k <= 0:
            raise EmptySelection(f"scope {s} selects no record")
        idx = order[:k]
        rows.append(ScopeRow(float(s), k, lrap(S[idx], T[idx]),
                             coverage_error(S[idx], T[idx]), ranking_loss(S[idx], T[idx])))
    return rows


def format_scope_table(rows: Sequence[ScopeRow]) -> str:
    out = [f"{'Data Scope':>10}  {'N':>6}  {'AP':>6}  {'CR':>8}  {'RL':>6}"]
    for r in rows:
        out.append(f"{r.scope * 100:>9.0f}%  {r.n_selected:>6d}  {r.lrap:>6.3f}  "
                   f"{r.coverage_error:>8.2f}  {r.ranking_loss:>6.3f}")
    return "\n".join(out) + "\n"


def prior_rank_scores(train_truth, n_records: int) -> np.ndarray:
    """Score every record by training label frequency (the no-information ranking)."""
    freq = np.asarray(train_truth, dtype=np.float64).mean(axis=0)
    return np.tile(freq, (n_records, 1))


def accuracy_by_category(scores, principal, categories: Sequence[str]) -> dict[str, tuple[int, float]]:
    """Principal accuracy grouped by true principal category: name -> (support, accuracy)."""
    S = np.asarray(scores, dtype=np.float64)
    p = np.asarray(principal)
    hit = np.argmax(S, axis=1) == p
    out = {}
    for j in np.unique(p):
        mask = p == j
        out[categories[j]] = (int(mask.sum()), float(hit[mask].mean()))
    return out

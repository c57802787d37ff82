"""Detection metrics over labeled score sets: EER, minimum normalized
detection cost, and DET-curve points.

All three are rank statistics of the scores: any strictly increasing
transform of the scores leaves them unchanged. Decisions accept a trial
when its score is greater than or equal to the threshold.

Score files are text, one record per line:
``trial-id<TAB>score<TAB>target|nontarget`` (label column omitted for
unlabeled scores). DET files are ``P_fa<TAB>P_miss`` per line.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._util import atomic_write


@dataclass(frozen=True)
class OperatingPoint:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError("p_target must be in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("c_miss and c_fa must be positive")


@dataclass
class ScoreSet:
    trial_ids: list = field(default_factory=list)
    scores: np.ndarray = field(default_factory=lambda: np.empty(0))
    labels: Optional[np.ndarray] = None  # bool array, True = target; None if unlabeled

    @classmethod
    def from_records(cls, records) -> "ScoreSet":
        ids, scores, labels = [], [], []
        for rec in records:
            ids.append(str(rec[0]))
            scores.append(float(rec[1]))
            labels.append(rec[2])
        has_labels = [lab is not None for lab in labels]
        if any(has_labels) and not all(has_labels):
            raise ValueError("score set mixes labeled and unlabeled records")
        out = cls(
            trial_ids=ids,
            scores=np.asarray(scores, dtype=np.float64),
            labels=np.asarray(labels, dtype=bool) if all(has_labels) and labels else None,
        )
        if out.scores.size and not np.all(np.isfinite(out.scores)):
            raise ValueError("scores contain non-finite values")
        return out

    def split(self):
        """Return (target scores, nontarget scores); both must be non-empty."""
        if self.labels is None:
            raise ValueError("score set is unlabeled")
        tar = self.scores[self.labels]
        non = self.scores[~self.labels]
        if tar.size == 0 or non.size == 0:
            raise ValueError(
                f"need at least one target and one nontarget trial, have "
                f"{tar.size} targets and {non.size} nontargets"
            )
        return tar, non


def _staircase(scores: ScoreSet):
    """Error rates at every distinct threshold, ascending, plus the
    reject-everything endpoint.

    Returns (thresholds, P_fa, P_miss); the final threshold is the smallest
    float above the maximum score.
    """
    tar, non = scores.split()
    tar = np.sort(tar)
    non = np.sort(non)
    cuts = np.unique(np.concatenate([tar, non]))
    # accept iff score >= threshold
    p_fa = 1.0 - np.searchsorted(non, cuts, side="left") / non.size
    p_miss = np.searchsorted(tar, cuts, side="left") / tar.size
    thresholds = np.append(cuts, np.nextafter(cuts[-1], np.inf))
    p_fa = np.append(p_fa, 0.0)
    p_miss = np.append(p_miss, 1.0)
    return thresholds, p_fa, p_miss


def eer(scores: ScoreSet):
    """Equal error rate with linear interpolation at the crossing.

    Returns (eer, threshold); scores equal to the threshold count as
    accepts.
    """
    thresholds, p_fa, p_miss = _staircase(scores)
    diff = p_miss - p_fa  # nondecreasing, starts at -1, ends at +1
    k = int(np.searchsorted(diff >= 0.0, True))
    if diff[k] == 0.0:
        return float(p_fa[k]), float(thresholds[k])
    lo, hi = k - 1, k
    frac = -diff[lo] / (diff[hi] - diff[lo])
    value = p_fa[lo] + frac * (p_fa[hi] - p_fa[lo])
    threshold = thresholds[lo] + frac * (thresholds[hi] - thresholds[lo])
    return float(value), float(threshold)


def min_dcf(scores: ScoreSet, op: OperatingPoint = OperatingPoint()):
    """Minimum normalized detection cost over all thresholds.

    Cost is c_miss * P_miss * p_target + c_fa * P_fa * (1 - p_target),
    normalized by the better of the two trivial decisions, so the result
    never exceeds 1. Returns (min_dcf, threshold).
    """
    thresholds, p_fa, p_miss = _staircase(scores)
    cost = op.c_miss * p_miss * op.p_target + op.c_fa * p_fa * (1.0 - op.p_target)
    floor = min(op.c_miss * op.p_target, op.c_fa * (1.0 - op.p_target))
    k = int(np.argmin(cost))
    return float(cost[k] / floor), float(thresholds[k])


def det_points(scores: ScoreSet):
    """DET staircase: one (P_fa, P_miss) point per distinct threshold, in
    threshold order, ending at the reject-everything corner."""
    _, p_fa, p_miss = _staircase(scores)
    return list(zip(p_fa.tolist(), p_miss.tolist()))


def write_scores(scores: ScoreSet, path: str) -> None:
    with atomic_write(path, "w") as fh:
        for i, trial_id in enumerate(scores.trial_ids):
            cols = [trial_id, repr(float(scores.scores[i]))]
            if scores.labels is not None:
                cols.append("target" if scores.labels[i] else "nontarget")
            fh.write("\t".join(cols) + "\n")


def read_scores(path: str) -> ScoreSet:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ValueError(
                    f"{path}: line {lineno}: expected 2 or 3 tab-separated columns, got {len(cols)}"
                )
            try:
                value = float(cols[1])
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: bad score {cols[1]!r}") from None
            label = None
            if len(cols) == 3:
                if cols[2] == "target":
                    label = True
                elif cols[2] == "nontarget":
                    label = False
                else:
                    raise ValueError(
                        f"{path}: line {lineno}: label must be 'target' or 'nontarget', got {cols[2]!r}"
                    )
            records.append((cols[0], value, label))
    return ScoreSet.from_records(records)


def write_det(points, path: str) -> None:
    with atomic_write(path, "w") as fh:
        for p_fa, p_miss in points:
            fh.write(f"{p_fa!r}\t{p_miss!r}\n")

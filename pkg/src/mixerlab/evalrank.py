"""Metrics, significance-based ranking, and Gaussian-blended inference.

The ranking pipeline turns per-case scores into pairwise significant wins
(bootstrap over AUC for classification, Wilcoxon signed-rank over per-case
Dice for segmentation), normalized [0.1, 1] rank scores with tie
averaging, and a geometric-mean aggregate across datasets.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm as _normal
from scipy.stats import rankdata

from .errors import ConfigError, DataError


# ---------------------------------------------------------------------------
# case scores
# ---------------------------------------------------------------------------


@dataclass
class CaseScores:
    """Per-case results of one submission (mixer + kernel) on one dataset."""

    submission: str
    dataset: str
    case_ids: list[str]
    labels: Optional[np.ndarray] = None  # (n,) int, classification
    scores: Optional[np.ndarray] = None  # (n, k) float, classification
    dsc: Optional[np.ndarray] = None  # (n,) float, segmentation

    def __post_init__(self):
        n = len(self.case_ids)
        for name in ("labels", "scores", "dsc"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.asarray(arr)
                setattr(self, name, arr)
                if arr.shape[0] != n:
                    raise DataError(f"{name} has {arr.shape[0]} rows for {n} cases")

    def same_cases(self, other: "CaseScores") -> bool:
        return self.case_ids == other.case_ids


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _auc_rank(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with ties contributing one half."""
    npos = int(positive.sum())
    nneg = positive.size - npos
    if npos == 0 or nneg == 0:
        raise DataError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[positive].sum() - npos * (npos + 1) / 2.0
    return float(u / (npos * nneg))


def auc_macro(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro one-vs-rest AUC over the classes present in ``labels``.

    A class column with no positive labels is skipped with a warning;
    fewer than two present classes is an error.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise DataError("scores must be (n, k) aligned with labels")
    present = np.unique(labels)
    if present.size < 2:
        raise DataError("AUC needs at least two classes present")
    aucs = []
    for cls in range(scores.shape[1]):
        positive = labels == cls
        if not positive.any():
            warnings.warn(f"class {cls} absent from labels; skipped in macro AUC")
            continue
        if positive.all():
            warnings.warn(f"class {cls} is the only label; skipped in macro AUC")
            continue
        aucs.append(_auc_rank(scores[:, cls], positive))
    return float(np.mean(aucs))


def f1_macro(pred_labels: np.ndarray, true_labels: np.ndarray) -> float:
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.size == 0 or pred.shape != true.shape:
        raise DataError("f1_macro needs equal-length non-empty label arrays")
    classes = np.union1d(np.unique(pred), np.unique(true))
    f1s = []
    for cls in classes:
        tp = int(((pred == cls) & (true == cls)).sum())
        fp = int(((pred == cls) & (true != cls)).sum())
        fn = int(((pred != cls) & (true == cls)).sum())
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def dsc(pred_mask: np.ndarray, true_mask: np.ndarray, ignore_background: bool = True) -> float:
    """Per-case Dice: mean over foreground classes, skipping classes empty
    in both the prediction and the target."""
    pred = np.asarray(pred_mask)
    true = np.asarray(true_mask)
    if pred.size == 0 or pred.shape != true.shape:
        raise DataError("dsc needs equal-shape non-empty masks")
    classes = np.union1d(np.unique(pred), np.unique(true))
    if ignore_background:
        classes = classes[classes != 0]
    vals = []
    for cls in classes:
        a = pred == cls
        b = true == cls
        if not a.any() and not b.any():
            continue
        vals.append(2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum()))
    if not vals:
        raise DataError("no class to score (all empty)")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# significance comparators
# ---------------------------------------------------------------------------

A_WINS, B_WINS, TIE = "A_wins", "B_wins", "tie"


@dataclass
class BootstrapResult:
    verdict: str
    ci_low: float
    ci_high: float
    used_repeats: int


def bootstrap_auc_win(
    a: CaseScores,
    b: CaseScores,
    repeats: int = 5000,
    alpha: float = 0.05,
    seed: int = 0,
) -> BootstrapResult:
    """Percentile bootstrap CI of AUC(A) - AUC(B) on shared cases.

    Resample r draws its case indices from a generator seeded with
    ``seed ^ r``, so repeats are reproducible and order-independent. A wins
    when the whole two-sided CI sits above zero, B when below; resamples
    that collapse to a single class are skipped.
    """
    if repeats < 100:
        raise ConfigError("bootstrap needs at least 100 repeats")
    if not a.same_cases(b):
        raise DataError("submissions must share the identical case list and order")
    if a.labels is None or b.labels is None or a.scores is None or b.scores is None:
        raise DataError("bootstrap comparison needs labels and scores")
    if not np.array_equal(a.labels, b.labels):
        raise DataError("submissions disagree on case labels")
    n = len(a.case_ids)
    diffs = []
    for r in range(repeats):
        rng = np.random.default_rng(seed ^ r)
        idx = rng.integers(0, n, size=n)
        labels = a.labels[idx]
        if np.unique(labels).size < 2:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            da = auc_macro(a.scores[idx], labels)
            db = auc_macro(b.scores[idx], labels)
        diffs.append(da - db)
    if not diffs:
        raise DataError("every bootstrap resample was degenerate")
    arr = np.asarray(diffs)
    lo = float(np.percentile(arr, 100 * alpha / 2))
    hi = float(np.percentile(arr, 100 * (1 - alpha / 2)))
    if lo > 0:
        verdict = A_WINS
    elif hi < 0:
        verdict = B_WINS
    else:
        verdict = TIE
    return BootstrapResult(verdict, lo, hi, len(diffs))


@dataclass
class WilcoxonResult:
    verdict: str
    p_value: float
    w_pos: float
    w_neg: float
    n_effective: int


def _wilcoxon_exact_tail(doubled_ranks: list[int], w2: int) -> tuple[float, float]:
    """P(W+ <= w) and P(W+ >= w) over all 2^n sign assignments, exact.

    Works on ranks doubled into integers so tie-averaged half ranks stay
    exact; counts fit comfortably in int64 for n <= 25.
    """
    total = sum(doubled_ranks)
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for dr in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[dr:] = counts[: total + 1 - dr]
        counts = counts + shifted
    denom = float(2 ** len(doubled_ranks))
    p_le = counts[: w2 + 1].sum() / denom
    p_ge = counts[w2:].sum() / denom
    return float(p_le), float(p_ge)


def wilcoxon_signed_rank(
    a_values: Sequence[float],
    b_values: Sequence[float],
    alpha: float = 0.05,
    two_sided: bool = True,
    exact_limit: int = 25,
) -> WilcoxonResult:
    """Paired signed-rank test on per-case values (zero differences dropped).

    Exact sign-assignment distribution up to ``exact_limit`` cases, normal
    approximation with tie correction beyond. The verdict combines
    significance with the direction of the rank sums.
    """
    a = np.asarray(a_values, dtype=np.float64)
    b = np.asarray(b_values, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise DataError("wilcoxon needs equal-length non-empty paired samples")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return WilcoxonResult(TIE, 1.0, 0.0, 0.0, 0)
    ranks = rankdata(np.abs(d), method="average")
    w_pos = float(ranks[d > 0].sum())
    w_neg = float(ranks[d < 0].sum())

    if n <= exact_limit:
        doubled = [int(round(2 * r)) for r in ranks]
        w2 = int(round(2 * w_pos))
        p_le, p_ge = _wilcoxon_exact_tail(doubled, w2)
        if two_sided:
            p = min(1.0, 2.0 * min(p_le, p_ge))
        else:
            p = p_ge if w_pos >= w_neg else p_le
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
        if var <= 0:
            return WilcoxonResult(TIE, 1.0, w_pos, w_neg, n)
        z = (w_pos - mu) / math.sqrt(var)
        if two_sided:
            p = float(2.0 * _normal.sf(abs(z)))
        else:
            p = float(_normal.sf(z) if w_pos >= w_neg else _normal.cdf(z))

    if p < alpha and w_pos != w_neg:
        verdict = A_WINS if w_pos > w_neg else B_WINS
    else:
        verdict = TIE
    return WilcoxonResult(verdict, p, w_pos, w_neg, n)


# ---------------------------------------------------------------------------
# round-robin ranking
# ---------------------------------------------------------------------------


def pairwise_wins(
    submissions: Sequence[CaseScores],
    comparator: str = "bootstrap",
    **kwargs,
) -> dict[str, int]:
    """Round-robin significant-win counts over one dataset."""
    if len(submissions) < 2:
        raise ConfigError("need at least two submissions to compare")
    first = submissions[0]
    for sub in submissions[1:]:
        if not first.same_cases(sub):
            raise DataError(
                f"case lists differ between {first.submission!r} and {sub.submission!r}"
            )
    if callable(comparator):
        compare: Callable = comparator
    elif comparator == "bootstrap":
        compare = lambda x, y: bootstrap_auc_win(x, y, **kwargs).verdict
    elif comparator == "wilcoxon":
        compare = lambda x, y: wilcoxon_signed_rank(x.dsc, y.dsc, **kwargs).verdict
    else:
        raise ConfigError(f"unknown comparator {comparator!r}")
    wins = {sub.submission: 0 for sub in submissions}
    for i in range(len(submissions)):
        for j in range(i + 1, len(submissions)):
            verdict = compare(submissions[i], submissions[j])
            if verdict == A_WINS:
                wins[submissions[i].submission] += 1
            elif verdict == B_WINS:
                wins[submissions[j].submission] += 1
    return wins


def normalize_ranks(wins: dict[str, int]) -> dict[str, float]:
    """Positional scores on [0.1, 1]: ascending win order, the 1-indexed
    position p scores 0.1 + (p-1) * 0.9/(n-1), equal win counts share the
    arithmetic mean of their positions' scores."""
    n = len(wins)
    if n < 2:
        raise ConfigError("ranking needs at least two submissions")
    by_wins = sorted(wins.items(), key=lambda kv: kv[1])
    step = 0.9 / (n - 1)
    scores = [0.1 + p * step for p in range(n)]
    out: dict[str, float] = {}
    i = 0
    while i < n:
        j = i
        while j < n and by_wins[j][1] == by_wins[i][1]:
            j += 1
        shared = float(np.mean(scores[i:j]))
        for name, _ in by_wins[i:j]:
            out[name] = shared
        i = j
    return out


def aggregate_geomean(per_dataset: dict[str, dict[str, Optional[float]]]) -> dict[str, float]:
    """Geometric mean of normalized ranks across datasets.

    Every dataset must carry an entry for every submission; an explicit
    None marks "did not submit" and drops that dataset from the mean.
    """
    if not per_dataset:
        raise ConfigError("no datasets to aggregate")
    datasets = list(per_dataset)
    submissions = list(per_dataset[datasets[0]])
    out: dict[str, float] = {}
    for sub in submissions:
        vals = []
        for ds in datasets:
            if sub not in per_dataset[ds]:
                raise DataError(f"submission {sub!r} missing from dataset {ds!r}")
            v = per_dataset[ds][sub]
            if v is None:
                continue
            if v <= 0:
                raise DataError(f"rank score must be positive, got {v}")
            vals.append(math.log(v))
        if not vals:
            raise DataError(f"submission {sub!r} has no scored dataset")
        out[sub] = math.exp(float(np.mean(vals)))
    return out


# ---------------------------------------------------------------------------
# sliding-window inference
# ---------------------------------------------------------------------------


def _axis_starts(size: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def gaussian_importance(patch_hw: tuple[int, int], sigma: Optional[float] = None) -> np.ndarray:
    """Separable Gaussian weight map, peak 1 at the patch center, sigma
    defaulting to patch/8 per axis; strictly positive everywhere."""
    ph, pw = patch_hw
    maps = []
    for size in (ph, pw):
        s = (size / 8.0) if sigma is None else sigma
        coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
        maps.append(np.exp(-0.5 * (coords / s) ** 2))
    return np.outer(maps[0], maps[1])


def sliding_window_infer(
    predict: Callable[[np.ndarray], np.ndarray],
    image: np.ndarray,
    patch_hw: tuple[int, int],
    overlap: float = 0.25,
    sigma: Optional[float] = None,
    uniform_weights: bool = False,
) -> np.ndarray:
    """Tile the image with ``overlap``, weight per-patch logits with the
    Gaussian importance map, and blend by the accumulated weight.

    The grid strides by patch*(1-overlap) and clamps the final row/column
    to the image edge. A grid that is exactly one full-image window
    returns the model output directly (the weights cancel).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise DataError("sliding_window_infer expects a (C, H, W) image")
    _, h, w = image.shape
    ph, pw = patch_hw
    if ph > h or pw > w:
        raise DataError(f"patch {ph}x{pw} larger than image {h}x{w}")
    if not (0.0 <= overlap < 1.0):
        raise ConfigError("overlap must be in [0, 1)")
    if (ph, pw) == (h, w):
        return np.asarray(predict(image), dtype=np.float64)

    stride_h = max(1, int(round(ph * (1.0 - overlap))))
    stride_w = max(1, int(round(pw * (1.0 - overlap))))
    weight = (
        np.ones((ph, pw)) if uniform_weights else gaussian_importance(patch_hw, sigma)
    )
    num = None
    den = np.zeros((h, w))
    for top in _axis_starts(h, ph, stride_h):
        for left in _axis_starts(w, pw, stride_w):
            logits = np.asarray(predict(image[:, top : top + ph, left : left + pw]))
            if num is None:
                num = np.zeros((logits.shape[0], h, w))
            num[:, top : top + ph, left : left + pw] += logits * weight
            den[top : top + ph, left : left + pw] += weight
    return num / den


# ---------------------------------------------------------------------------
# CSV interfaces
# ---------------------------------------------------------------------------


def write_case_scores_csv(cs: CaseScores) -> str:
    buf = io.StringIO()
    if cs.dsc is not None:
        buf.write("case_id,dsc\n")
        for cid, v in zip(cs.case_ids, cs.dsc):
            buf.write(f"{cid},{float(v)!r}\n")
    else:
        k = cs.scores.shape[1]
        buf.write("case_id,label," + ",".join(f"score_{i}" for i in range(k)) + "\n")
        for cid, label, row in zip(cs.case_ids, cs.labels, cs.scores):
            buf.write(f"{cid},{int(label)}," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def read_case_scores_csv(text: str, submission: str, dataset: str) -> CaseScores:
    lines = [ln for ln in text.strip().split("\n") if ln]
    if not lines:
        raise DataError("empty case-scores CSV")
    header = lines[0].split(",")
    if header[:2] == ["case_id", "dsc"]:
        ids, vals = [], []
        for ln in lines[1:]:
            cid, _, v = ln.partition(",")
            ids.append(cid)
            vals.append(float(v))
        return CaseScores(submission, dataset, ids, dsc=np.asarray(vals))
    if header[:2] != ["case_id", "label"] or not all(h.startswith("score_") for h in header[2:]):
        raise DataError(f"unrecognized case-scores header: {header}")
    ids, labels, rows = [], [], []
    for ln in lines[1:]:
        parts = ln.split(",")
        ids.append(parts[0])
        labels.append(int(parts[1]))
        rows.append([float(v) for v in parts[2:]])
    return CaseScores(submission, dataset, ids, labels=np.asarray(labels), scores=np.asarray(rows))


def rank_table_csv(
    dataset_order: list[str],
    wins_per_dataset: dict[str, dict[str, int]],
    ranks_per_dataset: dict[str, dict[str, Optional[float]]],
    global_ranks: dict[str, float],
) -> str:
    """Leaderboard CSV: one row per submission, best global rank first."""
    buf = io.StringIO()
    cols = ["submission"]
    for ds in dataset_order:
        cols.extend([f"{ds}_wins", f"{ds}_rank"])
    cols.append("global")
    buf.write(",".join(cols) + "\n")
    order = sorted(global_ranks, key=lambda s: (-global_ranks[s], s))
    for sub in order:
        row = [sub]
        for ds in dataset_order:
            wins = wins_per_dataset[ds].get(sub)
            rank = ranks_per_dataset[ds].get(sub)
            row.append("" if wins is None else str(wins))
            row.append("" if rank is None else repr(round(float(rank), 6)))
        row.append(repr(round(float(global_ranks[sub]), 6)))
        buf.write(",".join(row) + "\n")
    return buf.getvalue()

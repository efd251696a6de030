"""Volumetric metrics, cross-validation splits, significance tests and ablations."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .errors import InvalidInputError
from .prompting import ALL_VARIANTS, REGION_LABELS, Variant, two_pass_segment
from .volume_io import CaseArchive, MODALITIES, validate_labels

logger = logging.getLogger(__name__)

REPORT_REGIONS = ("NCR", "ED", "ET", "WT", "TC")
TABLE_REGIONS = ("NCR", "ED", "ET", "WT")
REPORT_COLUMNS = ("case_id", "region", "dice", "iou", "variant", "fold", "seed")
EXACT_WILCOXON_MAX_N = 25


# -- overlap metrics -------------------------------------------------------------


def _binary_pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    """2|A∩B| / (|A| + |B|); two empty masks score 1."""
    pred, gt = _binary_pair(pred, gt)
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def iou(pred, gt) -> float:
    """|A∩B| / |A∪B|; two empty masks score 1."""
    pred, gt = _binary_pair(pred, gt)
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def composite_masks(mask) -> dict[str, np.ndarray]:
    """Whole tumor {1,2,4}, tumor core {1,4} and enhancing tumor {4}."""
    mask = np.asarray(mask)
    validate_labels(mask)
    return {
        "WT": mask > 0,
        "TC": (mask == 1) | (mask == 4),
        "ET": mask == 4,
    }


def region_masks(mask) -> dict[str, np.ndarray]:
    """Binary masks for every reported region (sub-regions plus composites)."""
    comp = composite_masks(mask)
    mask = np.asarray(mask)
    return {"NCR": mask == 1, "ED": mask == 2, "ET": comp["ET"], "WT": comp["WT"], "TC": comp["TC"]}


# -- reports -------------------------------------------------------------------------


@dataclass
class CaseMetrics:
    case_id: str
    dice: dict[str, float]
    iou: dict[str, float]


@dataclass
class MetricsReport:
    cases: list[CaseMetrics] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)
    variant: str = "full"
    fold: int = 0
    seed: int = 0
    attention_rows: list[dict] = field(default_factory=list)

    @property
    def n_cases(self) -> int:
        return len(self.cases)

    def scores(self, metric: str, region: str) -> np.ndarray:
        return np.array([getattr(c, metric)[region] for c in self.cases], dtype=np.float64)

    def aggregate(self) -> dict[str, dict[str, tuple[float, float]]]:
        """{region: {"dice": (mean, std), "iou": (mean, std)}}, population std."""
        out = {}
        for region in REPORT_REGIONS:
            out[region] = {}
            for metric in ("dice", "iou"):
                s = self.scores(metric, region)
                out[region][metric] = (
                    (float(s.mean()), float(s.std())) if s.size else (float("nan"), float("nan"))
                )
        return out

    def rows(self) -> list[dict]:
        rows = []
        for c in self.cases:
            for region in REPORT_REGIONS:
                rows.append(
                    {
                        "case_id": c.case_id,
                        "region": region,
                        "dice": c.dice[region],
                        "iou": c.iou[region],
                        "variant": self.variant,
                        "fold": self.fold,
                        "seed": self.seed,
                    }
                )
        return rows

    def to_csv(self, path) -> None:
        write_report_csv(path, self.rows())

    def write_attention_csv(self, path, modalities=MODALITIES) -> None:
        cols = ["case", "slice", "sub_region"] + [f"alpha_{m}" for m in modalities]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(cols)
            for row in self.attention_rows:
                writer.writerow(
                    [row["case"], row["slice"], row["sub_region"]] + [repr(float(a)) for a in row["alpha"]]
                )


def write_report_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for r in rows:
            writer.writerow(
                [r["case_id"], r["region"], repr(float(r["dice"])), repr(float(r["iou"])),
                 r["variant"], r["fold"], r["seed"]]
            )


def case_metrics(case_id: str, pred, gt) -> CaseMetrics:
    pred_regions, gt_regions = region_masks(pred), region_masks(gt)
    return CaseMetrics(
        case_id,
        {r: dice(pred_regions[r], gt_regions[r]) for r in REPORT_REGIONS},
        {r: iou(pred_regions[r], gt_regions[r]) for r in REPORT_REGIONS},
    )


def evaluate_predictions(pairs, variant: str = "full", fold: int = 0, seed: int = 0) -> MetricsReport:
    """Score precomputed ``(case_id, pred, gt)`` triples."""
    report = MetricsReport(variant=variant, fold=fold, seed=seed)
    for case_id, pred, gt in pairs:
        report.cases.append(case_metrics(case_id, pred, gt))
    return report


def evaluate_dataset(
    model,
    attention,
    cases: list[tuple[str, CaseArchive]],
    variant: Variant = Variant(),
    tau: float = 0.5,
    refine_iters: int = 1,
    fold: int = 0,
    seed: int = 0,
    jobs: int = 1,
) -> MetricsReport:
    """Run two-pass inference on every case and score it.

    A case whose inference raises is recorded in ``failed`` and left out of
    the aggregates. Results are ordered by input position whatever ``jobs`` is.
    """
    if not cases:
        raise InvalidInputError("no cases to evaluate")

    def run(item):
        case_id, case = item
        try:
            pred, alpha = two_pass_segment(
                model, attention, case.imgs, variant, tau, refine_iters, return_attention=True
            )
            return case_id, case_metrics(case_id, pred, case.gts), alpha, None
        except Exception as exc:  # recorded per case, not fatal for the run
            logger.warning("inference failed on %s: %s", case_id, exc)
            return case_id, None, None, f"{type(exc).__name__}: {exc}"

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, cases))
    else:
        results = [run(c) for c in cases]

    report = MetricsReport(variant=variant.name, fold=fold, seed=seed)
    for case_id, metrics, alpha, error in results:
        if error is not None:
            report.failed.append((case_id, error))
            continue
        report.cases.append(metrics)
        if alpha is not None:
            for z in range(alpha.shape[0]):
                for r, label in enumerate(REGION_LABELS):
                    report.attention_rows.append(
                        {"case": case_id, "slice": z, "sub_region": ("NCR", "ED", "ET")[r],
                         "alpha": alpha[z, :, r].tolist()}
                    )
    return report


# -- splits ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldSplit:
    folds: tuple[tuple[str, ...], ...]

    @property
    def k(self) -> int:
        return len(self.folds)

    def train_val(self, fold: int) -> tuple[list[str], list[str]]:
        val = list(self.folds[fold])
        train = [c for i, f in enumerate(self.folds) if i != fold for c in f]
        return train, val

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.folds).encode()).hexdigest()


def kfold_split(case_ids, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then contiguous folds whose sizes differ by at most one."""
    case_ids = list(case_ids)
    if k < 1 or k > len(case_ids):
        raise InvalidInputError(f"k={k} folds need 1 <= k <= {len(case_ids)} cases")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    parts = np.array_split(order, k)
    return FoldSplit(tuple(tuple(case_ids[i] for i in part) for part in parts))


def holdout_split(case_ids, train_frac: float = 0.8, seed: int = 0) -> FoldSplit:
    """Two-fold split: fold 0 is the held-out set, fold 1 the training set."""
    case_ids = list(case_ids)
    if not 0 < train_frac < 1:
        raise InvalidInputError(f"train_frac must be in (0, 1), got {train_frac}")
    if len(case_ids) < 2:
        raise InvalidInputError("need at least two cases for a held-out split")
    order = np.random.default_rng(seed).permutation(len(case_ids))
    n_train = min(max(int(round(train_frac * len(case_ids))), 1), len(case_ids) - 1)
    train = tuple(case_ids[i] for i in order[:n_train])
    val = tuple(case_ids[i] for i in order[n_train:])
    return FoldSplit((val, train))


# -- Wilcoxon signed-rank -------------------------------------------------------------


def _exact_lower_tail(doubled_ranks: np.ndarray, w_doubled: int) -> float:
    """P(T <= w) for T = sum of a random subset of the (doubled, integer) ranks."""
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        counts[r:] = counts[r:] + counts[: total + 1 - r].copy()
    return float(counts[: w_doubled + 1].sum() / counts.sum())


def wilcoxon_signed_rank(scores_a, scores_b) -> float:
    """Two-sided Wilcoxon signed-rank p-value for paired scores.

    Zero differences are dropped. Up to 25 nonzero differences the null
    distribution is enumerated exactly (midranks for ties); beyond that a
    normal approximation with tie and continuity corrections is used.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise InvalidInputError(f"paired score vectors differ in shape: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise InvalidInputError("need at least one pair")
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = stats.rankdata(np.abs(d))  # midranks for ties
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = 2.0 * _exact_lower_tail(doubled, int(round(2 * w)))
        return min(1.0, p)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(((tie_counts**3) - tie_counts).sum()) / 48.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    if z <= 0:
        return 1.0
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


# -- ablation -------------------------------------------------------------------------------


class AblationError(RuntimeError):
    def __init__(self, message: str, partial: "AblationResult"):
        super().__init__(message)
        self.partial = partial


@dataclass
class AblationResult:
    reports: dict[str, MetricsReport] = field(default_factory=dict)
    split_digest: dict[str, str] = field(default_factory=dict)

    def table(self) -> list[dict]:
        """One row per variant: {"variant", region: (mean, std)} over Dice."""
        rows = []
        for v in ALL_VARIANTS:
            if v.name not in self.reports:
                continue
            agg = self.reports[v.name].aggregate()
            rows.append({"variant": v.name, **{r: agg[r]["dice"] for r in TABLE_REGIONS}})
        return rows

    def all_rows(self) -> list[dict]:
        out = []
        for v in ALL_VARIANTS:
            if v.name in self.reports:
                out.extend(self.reports[v.name].rows())
        return out


def ablation_run(
    dataset: list[tuple[str, CaseArchive]],
    base_config,
    model_config=None,
    split: FoldSplit | None = None,
    train_frac: float = 0.8,
    variants=ALL_VARIANTS,
    jobs: int = 1,
    progress=None,
    fold: int = 0,
) -> AblationResult:
    """Train and evaluate each ablation variant on one shared split.

    Every variant starts from the same seed and sees the same train/held-out
    cases (fold ``fold`` of ``split`` is held out); the split digest is
    recorded per variant so this can be checked.
    """
    from .training import train_new

    ids = [cid for cid, _ in dataset]
    by_id = dict(dataset)
    if split is None:
        split = holdout_split(ids, train_frac, seed=base_config.seed)
    train_ids, val_ids = split.train_val(fold)
    result = AblationResult()
    for v in variants:
        cfg = replace(base_config, use_attention=v.use_attention, use_prompting=v.use_prompting)
        try:
            ckpt, _ = train_new([by_id[i] for i in train_ids], cfg, model_config)
            report = evaluate_dataset(
                ckpt.model, ckpt.attention, [(i, by_id[i]) for i in val_ids], v,
                cfg.tau, cfg.refine_iters, fold=fold, seed=cfg.seed, jobs=jobs,
            )
        except Exception as exc:
            raise AblationError(f"variant {v.name} failed: {exc}", result) from exc
        result.reports[v.name] = report
        result.split_digest[v.name] = split.digest()
        if progress is not None:
            progress(v.name, report)
    return result

"""Markdown tables and static plots built from evaluation CSVs.

Three table layouts are produced from per-case report rows:

* a per-run whole-tumor table (Dice and IoU, one row per run, e.g. one
  per single-modality model plus the multi-modal one),
* an ablation table (one row per variant, Dice for NCR/ED/ET/WT),
* a per-sub-region table (one row per run, Dice for NCR/ED/ET/WT).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .evaluation import REPORT_COLUMNS, REPORT_REGIONS, TABLE_REGIONS
from .prompting import ALL_VARIANTS

VARIANT_LABELS = {
    "baseline": "Fine-tuned multi-modal",
    "+attention": "+ Attention",
    "+prompting": "+ Prompting",
    "full": "Full framework",
}
REGION_TITLES = {
    "NCR": "Necrotic core", "ED": "Edema", "ET": "Enhancing tumor", "WT": "Whole tumor", "TC": "Tumor core",
}


class ReportFormatError(InvalidInputError):
    """A results CSV is malformed; ``column`` names the offending column."""

    def __init__(self, message: str, column: str):
        super().__init__(message)
        self.column = column


@dataclass
class Run:
    label: str
    rows: list[dict]

    def scores(self, region: str, metric: str = "dice") -> np.ndarray:
        return np.array([r[metric] for r in self.rows if r["region"] == region], dtype=np.float64)

    def summary(self, region: str, metric: str = "dice") -> tuple[float, float]:
        s = self.scores(region, metric)
        if s.size == 0:
            return float("nan"), float("nan")
        return float(s.mean()), float(s.std())


def read_report_csv(path) -> list[dict]:
    """Parse and validate one report CSV."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in REPORT_COLUMNS:
            if col not in header:
                raise ReportFormatError(f"{path}: missing column '{col}'", col)
        rows = []
        for line, raw in enumerate(reader, start=2):
            if raw["region"] not in REPORT_REGIONS:
                raise ReportFormatError(f"{path}:{line}: bad value {raw['region']!r} in column 'region'", "region")
            row = dict(raw)
            for col in ("dice", "iou"):
                try:
                    row[col] = float(raw[col])
                except (TypeError, ValueError):
                    raise ReportFormatError(f"{path}:{line}: non-numeric value in column '{col}'", col) from None
                if not 0.0 <= row[col] <= 1.0:
                    raise ReportFormatError(f"{path}:{line}: value {row[col]} outside [0, 1] in column '{col}'", col)
            rows.append(row)
    return rows


def runs_from_files(specs) -> list[Run]:
    """Build runs from ``path`` or ``label=path`` strings.

    A file holding several variants (an ablation CSV) contributes one run
    per variant, labelled by the variant name; otherwise the label is the
    explicit one or the file stem.
    """
    runs = []
    for spec in specs:
        label, _, path = spec.rpartition("=")
        rows = read_report_csv(path)
        variants = list(dict.fromkeys(r["variant"] for r in rows))
        if len(variants) > 1:
            for v in variants:
                runs.append(Run(f"{label}:{v}" if label else v, [r for r in rows if r["variant"] == v]))
        else:
            runs.append(Run(label or Path(path).stem, rows))
    return runs


def fmt(mean: float, std: float, digits: int = 4) -> str:
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def markdown_table(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def whole_tumor_table(runs: list[Run]) -> str:
    return markdown_table(
        ["Run", "Dice Score", "IoU"],
        [[r.label, fmt(*r.summary("WT", "dice")), fmt(*r.summary("WT", "iou"))] for r in runs],
    )


def ablation_table(rows: list[dict], digits: int = 2) -> str:
    """Table from ``AblationResult.table()``-style rows, or from runs named by variant."""
    header = ["Method"] + [f"{REGION_TITLES[r]} Dice" for r in TABLE_REGIONS]
    body = [
        [VARIANT_LABELS.get(row["variant"], row["variant"])] + [fmt(*row[r], digits) for r in TABLE_REGIONS]
        for row in rows
    ]
    return markdown_table(header, body)


def ablation_rows_from_runs(runs: list[Run]) -> list[dict]:
    by_name = {r.label.rpartition(":")[2]: r for r in runs}
    return [
        {"variant": v.name, **{reg: by_name[v.name].summary(reg) for reg in TABLE_REGIONS}}
        for v in ALL_VARIANTS
        if v.name in by_name
    ]


def subregion_table(runs: list[Run], digits: int = 2) -> str:
    header = ["Run"] + [f"{REGION_TITLES[r]} Dice" for r in TABLE_REGIONS]
    return markdown_table(header, [[r.label] + [fmt(*r.summary(reg), digits) for reg in TABLE_REGIONS] for r in runs])


def read_attention_csv(path) -> tuple[list[str], list[dict]]:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in ("case", "slice", "sub_region"):
            if col not in header:
                raise ReportFormatError(f"{path}: missing column '{col}'", col)
        modalities = [c[len("alpha_"):] for c in header if c.startswith("alpha_")]
        if not modalities:
            raise ReportFormatError(f"{path}: no 'alpha_<modality>' columns", "alpha_*")
        rows = []
        for line, raw in enumerate(reader, start=2):
            try:
                rows.append({"sub_region": raw["sub_region"],
                             "alpha": [float(raw[f"alpha_{m}"]) for m in modalities]})
            except (TypeError, ValueError):
                raise ReportFormatError(f"{path}:{line}: non-numeric attention weight", "alpha_*") from None
    return modalities, rows


def attention_summary(modalities: list[str], rows: list[dict]) -> str:
    """Mean ± std attention weight per (sub-region, modality)."""
    body = []
    for region in ("NCR", "ED", "ET"):
        a = np.array([r["alpha"] for r in rows if r["sub_region"] == region], dtype=np.float64)
        if a.size == 0:
            continue
        body.append([REGION_TITLES[region]] + [fmt(a[:, m].mean(), a[:, m].std(), 3) for m in range(len(modalities))])
    return markdown_table(["Sub-region"] + modalities, body)


def bar_chart(runs: list[Run], path, regions=TABLE_REGIONS, title: str = "Dice by region") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(max(6, 1.6 * len(regions) * max(1, len(runs)) / 2), 4))
    width = 0.8 / max(1, len(runs))
    x = np.arange(len(regions))
    for i, run in enumerate(runs):
        stats = [run.summary(r) for r in regions]
        ax.bar(x + i * width - 0.4 + width / 2, [s[0] for s in stats], width,
               yerr=[s[1] for s in stats], capsize=3, label=run.label)
    ax.set_xticks(x, [REGION_TITLES[r] for r in regions])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("Dice")
    ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def write_report(runs: list[Run], out_dir, attention_csv=None) -> list[Path]:
    """Write ``report.md`` and bar charts into ``out_dir``; return the files written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    parts = ["# Segmentation results\n\n", "## Whole tumor per run\n\n", whole_tumor_table(runs)]
    abl = ablation_rows_from_runs(runs)
    if abl:
        parts += ["\n## Ablation\n\n", ablation_table(abl)]
    parts += ["\n## Per-sub-region Dice\n\n", subregion_table(runs)]
    if attention_csv is not None:
        modalities, rows = read_attention_csv(attention_csv)
        parts += ["\n## Attention weights (mean ± std over slices)\n\n", attention_summary(modalities, rows)]

    for name, regions, title in (
        ("dice_by_region.png", TABLE_REGIONS, "Dice by region"),
        ("wt_dice.png", ("WT",), "Whole-tumor Dice"),
    ):
        bar_chart(runs, out_dir / name, regions, title)
        written.append(out_dir / name)
    parts += ["\n![Dice by region](dice_by_region.png)\n", "\n![Whole-tumor Dice](wt_dice.png)\n"]
    (out_dir / "report.md").write_text("".join(parts))
    written.insert(0, out_dir / "report.md")
    return written

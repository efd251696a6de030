"""Command-line entry point: ``subseg <command> [options]``.

Commands: phantom, preprocess, train, infer, eval, ablate, report, rerun.
Exit status is 0 on success, 1 on invalid input or usage, 2 on a runtime
failure. Every artifact-producing command writes a JSON manifest next to
its outputs; ``subseg rerun <manifest>`` replays it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ArchiveFormatError, ConfigError, InvalidInputError

logger = logging.getLogger("subregion_seg")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DATA_ENV = "SUBSEG_DATA"
VALIDATION_ERRORS = (InvalidInputError, ConfigError, ArchiveFormatError, FileNotFoundError, json.JSONDecodeError)


class UsageError(Exception):
    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class ArgumentParser(argparse.ArgumentParser):
    """Raise instead of exiting so usage errors map onto exit code 1."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}", self.format_usage())


# -- manifests ------------------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seeds: dict
    inputs: list[str]
    outputs: list[str]
    code_version: str = __version__
    duration_s: float = 0.0
    details: dict = field(default_factory=dict)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text())
            return cls(**data)
        except (TypeError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"{path}: not a run manifest ({exc})") from None


def _abs(path: str) -> str:
    return str(Path(path).expanduser().resolve())


def _labelled_abs(spec: str) -> str:
    label, sep, path = spec.rpartition("=")
    return f"{label}{sep}{_abs(path)}"


def canonical_argv(parser: argparse.ArgumentParser, command: str, args) -> list[str]:
    """Rebuild a complete argv (every option explicit) from parsed args."""
    out = [command]
    for action in parser._actions:
        if not action.option_strings or isinstance(action, argparse._HelpAction):
            continue
        value = getattr(args, action.dest, None)
        opt = max(action.option_strings, key=len)
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                out.append(opt)
        elif value is None:
            continue
        elif isinstance(value, (list, tuple)):
            out += [opt, *map(str, value)]
        else:
            out += [opt, str(value)]
    positionals = [a for a in parser._actions if not a.option_strings]
    for action in positionals:
        value = getattr(args, action.dest, None)
        if value is not None:
            out += [*map(str, value)] if isinstance(value, list) else [str(value)]
    return out


def _manifest_path(output: Path) -> Path:
    return output / "manifest.json" if output.is_dir() else output.with_name(output.stem + ".manifest.json")


# -- helpers -----------------------------------------------------------------------------


def _data_dir(args) -> Path:
    data = args.data or os.environ.get(DATA_ENV)
    if not data:
        raise InvalidInputError(f"no --data given and ${DATA_ENV} is not set")
    path = Path(data)
    if not path.is_dir():
        raise InvalidInputError(f"data directory does not exist: {path}")
    return path


def _load_dataset(directory: Path):
    from .volume_io import list_cases, load_case

    paths = list_cases(directory)
    if not paths:
        raise InvalidInputError(f"no case archives (*.npz) in {directory}")
    cases = [(p.stem, load_case(p)) for p in paths]
    channels = {c.imgs.shape[-1] for _, c in cases}
    if len(channels) != 1:
        raise InvalidInputError(f"cases in {directory} mix modality counts {sorted(channels)}")
    return cases


def _dataset_modalities(directory: Path, n_channels: int) -> tuple[str, ...]:
    from .volume_io import MODALITIES

    meta = directory / "dataset.json"
    if meta.exists():
        names = tuple(json.loads(meta.read_text()).get("modalities", ()))
        if len(names) == n_channels:
            return names
    return MODALITIES if n_channels == 4 else tuple(f"M{i}" for i in range(n_channels))


def _write_dataset_meta(directory: Path, modalities, n_cases: int) -> None:
    (directory / "dataset.json").write_text(
        json.dumps({"modalities": list(modalities), "n_cases": n_cases}, indent=2) + "\n"
    )


def _train_config(args):
    from .training import TrainConfig

    cfg = TrainConfig()
    if getattr(args, "config", None):
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    overrides = {}
    for name in ("epochs", "batch_size", "seed"):
        if getattr(args, name, None) is not None:
            overrides[name] = getattr(args, name)
    if getattr(args, "lr", None) is not None:
        overrides["base_lr"] = args.lr
    if getattr(args, "no_attention", False):
        overrides["use_attention"] = False
    if getattr(args, "no_prompting", False):
        overrides["use_prompting"] = False
    return replace(cfg, **overrides).validate()


def _model_config(preset: str, in_channels: int):
    from .model import ModelConfig

    return ModelConfig.preset(preset == "desk", in_channels)


def _set_threads(n: int) -> None:
    import torch

    torch.set_num_threads(max(1, n))


# -- commands ----------------------------------------------------------------------------


def cmd_phantom(args) -> RunManifest:
    from .phantom import PhantomRanges, PhantomSpec, generate_dataset
    from .volume_io import MODALITIES, save_case

    try:
        size = tuple(int(s) for s in args.size.lower().split("x"))
    except ValueError:
        raise InvalidInputError(f"--size must look like 24x64x64, got {args.size!r}") from None
    if len(size) != 3:
        raise InvalidInputError(f"--size needs three dimensions, got {args.size!r}")
    if args.n < 1:
        raise InvalidInputError("--n must be >= 1")
    # radii shrink with the volume; 10/6/3 voxels at the default 24x64x64
    r = 10.0 * min(1.0, size[0] / 24, size[1] / 64, size[2] / 64)
    base = PhantomSpec(
        size=size,
        tumor_center=tuple((s - 1) / 2 for s in size),
        radii=(r, 0.6 * r, 0.3 * r),
        noise_sigma=args.noise,
        seed=args.seed,
    )
    ranges = PhantomRanges(center_shift=args.center_shift, radius_scale=tuple(args.radius_scale))
    cases = generate_dataset(args.n, base, seed=args.seed, ranges=ranges)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, case in enumerate(cases):
        path = out / f"case_{i:03d}.npz"
        if args.raw:
            # per-modality float arrays, the layout preprocess reads
            np.savez_compressed(
                path, **{m.lower(): case.imgs[..., k].astype(np.float32) for k, m in enumerate(MODALITIES)},
                seg=case.gts, spacing=case.spacing,
            )
        else:
            save_case(case, path)
        written.append(str(path))
    if not args.raw:
        _write_dataset_meta(out, MODALITIES, len(cases))
    logger.info("wrote %d phantom cases to %s", len(cases), out)
    return RunManifest(
        "phantom", [], {"base_spec": asdict(base), "ranges": asdict(ranges), "raw": args.raw},
        {"seed": args.seed}, [], written,
    )


def _raw_case_paths(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    if not path.is_dir():
        raise InvalidInputError(f"input does not exist: {path}")
    if any(path.glob("*.npy")):
        return [path]
    found = sorted(p for p in path.iterdir() if (p.is_file() and p.suffix == ".npz") or p.is_dir())
    if not found:
        raise InvalidInputError(f"no raw cases (*.npz files or case directories) in {path}")
    return found


def cmd_preprocess(args) -> RunManifest:
    from concurrent.futures import ThreadPoolExecutor

    from .volume_io import MODALITIES, preprocess_case, read_raw_case, save_case

    sources = _raw_case_paths(Path(args.input))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def run(src: Path):
        mods, seg, spacing = read_raw_case(src)
        archive, offset = preprocess_case(mods, seg, spacing, args.lo, args.hi, args.single_modality)
        dest = out / f"{src.stem}.npz"
        save_case(archive, dest)
        return str(dest), offset

    if args.jobs > 1:
        with ThreadPoolExecutor(args.jobs) as pool:
            results = list(pool.map(run, sources))
    else:
        results = [run(s) for s in sources]
    modalities = (args.single_modality,) if args.single_modality else MODALITIES
    _write_dataset_meta(out, modalities, len(results))
    logger.info("preprocessed %d cases into %s", len(results), out)
    return RunManifest(
        "preprocess", [], {"lo": args.lo, "hi": args.hi, "single_modality": args.single_modality},
        {}, [str(s) for s in sources], [r[0] for r in results],
        details={"crop_offsets": {Path(r[0]).stem: r[1] for r in results}},
    )


def _split_ids(ids, args, seed):
    from .evaluation import holdout_split

    if getattr(args, "split", None) is None:
        return ids, ids
    split = holdout_split(ids, args.split, seed=seed)
    train_ids, val_ids = split.train_val(0)
    return train_ids, val_ids


def cmd_train(args) -> RunManifest:
    from .training import train_new

    _set_threads(args.threads)
    data = _data_dir(args)
    cases = _load_dataset(data)
    cfg = _train_config(args)
    m = cases[0][1].imgs.shape[-1]
    model_cfg = _model_config(args.preset, m)
    train_ids, _ = _split_ids([cid for cid, _ in cases], args, cfg.seed)
    by_id = dict(cases)
    ckpt, history = train_new(
        [by_id[i] for i in train_ids], cfg, model_cfg, modalities=_dataset_modalities(data, m)
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt.save(out)
    hist_path = out.with_name(out.stem + ".history.csv")
    history.to_csv(hist_path)
    last = history.records[-1]
    logger.info("trained %s in %.1fs; final dice ncr/ed/et %.3f/%.3f/%.3f",
                cfg.variant.name, history.seconds, last.dice_ncr, last.dice_ed, last.dice_et)
    return RunManifest(
        "train", [], {"train": cfg.to_dict(), "model": model_cfg.to_dict(), "split": args.split},
        {"seed": cfg.seed}, [str(data)], [str(out), str(hist_path)],
        details={"train_cases": list(train_ids), "steps": history.total_steps},
    )


def _load_checkpoint(path):
    from .training import Checkpoint

    if not Path(path).is_file():
        raise InvalidInputError(f"checkpoint does not exist: {path}")
    return Checkpoint.load(path)


def cmd_infer(args) -> RunManifest:
    from .prompting import Variant, two_pass_segment
    from .volume_io import load_case

    _set_threads(args.threads)
    ckpt = _load_checkpoint(args.model)
    if not Path(args.case).is_file():
        raise InvalidInputError(f"case does not exist: {args.case}")
    case = load_case(args.case)
    variant = Variant.from_name(args.variant) if args.variant else ckpt.variant
    pred = two_pass_segment(ckpt.model, ckpt.attention, case.imgs, variant, args.tau, args.refine_iters, args.margin)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        np.savez_compressed(fh, pred=pred.astype(np.uint8))
    return RunManifest(
        "infer", [], {"tau": args.tau, "refine_iters": args.refine_iters, "margin": args.margin,
                      "variant": variant.name},
        {}, [str(args.model), str(args.case)], [str(out)],
    )


def _summary_lines(report) -> list[str]:
    agg = report.aggregate()
    lines = [f"{report.n_cases} cases, {len(report.failed)} failed ({report.variant})"]
    for region, metrics in agg.items():
        d, j = metrics["dice"], metrics["iou"]
        lines.append(f"  {region:4s} dice {d[0]:.4f} ± {d[1]:.4f}   iou {j[0]:.4f} ± {j[1]:.4f}")
    return lines


def cmd_eval(args) -> RunManifest:
    from .evaluation import MetricsReport, evaluate_dataset, kfold_split, write_report_csv
    from .training import TrainConfig, train_new

    _set_threads(args.threads)
    ckpt = _load_checkpoint(args.model)
    data = _data_dir(args)
    cases = _load_dataset(data)
    ids = [cid for cid, _ in cases]
    by_id = dict(cases)
    seed = args.seed if args.seed is not None else int(ckpt.train_config.get("seed", 0))

    reports: list[MetricsReport] = []
    if args.cv:
        # each fold is scored by a model retrained on the other folds
        cfg = TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else TrainConfig()
        cfg = replace(cfg, seed=seed)
        split = kfold_split(ids, args.cv, seed=seed)
        for fold in range(split.k):
            train_ids, val_ids = split.train_val(fold)
            fold_ckpt, _ = train_new([by_id[i] for i in train_ids], cfg, ckpt.model.config,
                                     modalities=ckpt.modalities)
            reports.append(evaluate_dataset(
                fold_ckpt.model, fold_ckpt.attention, [(i, by_id[i]) for i in val_ids], ckpt.variant,
                args.tau, args.refine_iters, fold=fold, seed=seed, jobs=args.jobs,
            ))
    else:
        _, val_ids = _split_ids(ids, args, seed)
        reports.append(evaluate_dataset(
            ckpt.model, ckpt.attention, [(i, by_id[i]) for i in val_ids], ckpt.variant,
            args.tau, args.refine_iters, fold=0, seed=seed, jobs=args.jobs,
        ))

    merged = MetricsReport(variant=reports[0].variant, seed=seed)
    for r in reports:
        merged.failed += r.failed
        merged.attention_rows += r.attention_rows
    rows = [row for r in reports for row in r.rows()]
    if not rows:
        raise RuntimeError(f"inference failed on every case: {merged.failed[:3]}")
    for case_id, err in merged.failed:
        logger.warning("case %s failed: %s", case_id, err)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report_csv(out, rows)
    outputs = [str(out)]
    if ckpt.variant.use_attention:
        att_path = Path(args.attention_out) if args.attention_out else out.with_name(out.stem + ".attention.csv")
        merged.write_attention_csv(att_path, ckpt.modalities)
        outputs.append(str(att_path))
    for r in reports:
        print("\n".join(_summary_lines(r)))
    return RunManifest(
        "eval", [], {"tau": args.tau, "refine_iters": args.refine_iters, "cv": args.cv, "split": args.split,
                     "variant": ckpt.variant.name},
        {"seed": seed}, [str(args.model), str(data)], outputs,
        details={"failed": merged.failed},
    )


def _ordering_holds(table) -> bool:
    wt = {row["variant"]: row["WT"][0] for row in table}
    return wt["full"] >= wt["+attention"] >= wt["baseline"]


def cmd_ablate(args) -> RunManifest:
    from .evaluation import AblationError, FoldSplit, MetricsReport, ablation_run, holdout_split, kfold_split
    from .evaluation import write_report_csv
    from .prompting import ALL_VARIANTS
    from .reporting import ablation_table

    _set_threads(args.threads)
    data = _data_dir(args)
    cases = _load_dataset(data)
    ids = [cid for cid, _ in cases]
    base = _train_config(args)
    model_cfg = _model_config(args.preset, cases[0][1].imgs.shape[-1])
    seeds = args.seeds if args.seeds else [base.seed]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_suffix(".csv")

    per_seed, rows, pooled = {}, [], {v.name: MetricsReport(variant=v.name) for v in ALL_VARIANTS}
    failure = None
    for seed in seeds:
        cfg = replace(base, seed=seed)
        split: FoldSplit = kfold_split(ids, args.cv, seed) if args.cv else holdout_split(ids, args.split, seed)
        folds = range(split.k) if args.cv else [0]
        seed_reports = {v.name: MetricsReport(variant=v.name, seed=seed) for v in ALL_VARIANTS}
        for fold in folds:
            try:
                result = ablation_run(cases, cfg, model_cfg, split, fold=fold, jobs=args.jobs,
                                      progress=lambda name, rep: logger.info(
                                          "seed %d fold %d %s done", seed, fold, name))
            except AblationError as exc:
                result, failure = exc.partial, exc
            for name, rep in result.reports.items():
                rows += rep.rows()
                seed_reports[name].cases += rep.cases
                pooled[name].cases += rep.cases
            if failure is not None:
                break
        per_seed[seed] = [
            {"variant": n, **{reg: r.aggregate()[reg]["dice"] for reg in ("NCR", "ED", "ET", "WT")}}
            for n, r in seed_reports.items() if r.cases
        ]
        if failure is not None:
            break

    write_report_csv(csv_path, rows)
    table = [
        {"variant": n, **{reg: r.aggregate()[reg]["dice"] for reg in ("NCR", "ED", "ET", "WT")}}
        for n, r in pooled.items() if r.cases
    ]
    parts = ["# Ablation\n\n", ablation_table(table)]
    complete = [s for s, t in per_seed.items() if len(t) == len(ALL_VARIANTS)]
    if complete:
        parts.append("\n## Whole-tumor Dice per seed\n\n")
        parts.append("| Seed | " + " | ".join(v.name for v in ALL_VARIANTS) + " | Full ≥ +Attention ≥ baseline |\n")
        parts.append("|---" * (len(ALL_VARIANTS) + 2) + "|\n")
        for s in complete:
            wt = {row["variant"]: row["WT"][0] for row in per_seed[s]}
            parts.append(f"| {s} | " + " | ".join(f"{wt[v.name]:.4f}" for v in ALL_VARIANTS)
                         + f" | {'yes' if _ordering_holds(per_seed[s]) else 'no'} |\n")
        held = sum(_ordering_holds(per_seed[s]) for s in complete)
        parts.append(f"\nOrdering holds in {held} of {len(complete)} seeds.\n")
    out.write_text("".join(parts))
    print("".join(parts))
    manifest = RunManifest(
        "ablate", [], {"train": base.to_dict(), "model": model_cfg.to_dict(), "split": args.split, "cv": args.cv},
        {"seeds": list(seeds)}, [str(data)], [str(out), str(csv_path)],
    )
    if failure is not None:
        manifest.details["error"] = str(failure)
        _finish(manifest, args, out)
        raise failure
    return manifest


def cmd_report(args) -> RunManifest:
    from .reporting import runs_from_files, write_report

    for spec in args.results:
        path = spec.rpartition("=")[2]
        if not Path(path).is_file():
            raise InvalidInputError(f"results file does not exist: {path}")
    runs = runs_from_files(args.results)
    written = write_report(runs, args.out, args.attention)
    for p in written:
        print(p)
    return RunManifest("report", [], {}, {}, list(args.results) + ([args.attention] if args.attention else []),
                       [str(p) for p in written])


def cmd_rerun(args):
    manifest = RunManifest.load(args.manifest)
    logger.info("re-running: subseg %s", " ".join(manifest.argv))
    code = dispatch(manifest.argv)
    if code != EXIT_OK:
        raise SystemExit(code)
    return None


# -- parser / dispatch ---------------------------------------------------------------------


def build_parser() -> tuple[ArgumentParser, dict[str, ArgumentParser]]:
    from .volume_io import MODALITIES

    parser = ArgumentParser(prog="subseg", description=(
        "Multi-modal tumor sub-region segmentation with modality attention and box prompting."))
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    subs = {}

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        subs[name] = p
        return p

    p = add("phantom", "generate synthetic phantom cases")
    p.add_argument("--n", type=int, default=20, help="number of cases")
    p.add_argument("--size", default="24x64x64", help="volume size DxHxW")
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise std on the [0, 255] scale")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--center-shift", type=float, default=3.0, help="max per-axis tumor center shift (voxels)")
    p.add_argument("--radius-scale", type=float, nargs=2, default=[0.8, 1.1], metavar=("LO", "HI"))
    p.add_argument("--raw", action="store_true",
                   help="write per-modality arrays (preprocess input) instead of archives")
    p.add_argument("--out", type=_abs, required=True, help="output directory")

    p = add("preprocess", "clip, normalize and ROI-crop raw cases into archives")
    p.add_argument("--in", dest="input", type=_abs, required=True, help="raw case file or directory of cases")
    p.add_argument("--out", type=_abs, required=True, help="output directory")
    p.add_argument("--lo", type=float, default=0.5, help="lower clipping percentile")
    p.add_argument("--hi", type=float, default=99.5, help="upper clipping percentile")
    p.add_argument("--single-modality", choices=MODALITIES, help="keep only this modality")
    p.add_argument("--jobs", type=int, default=1)

    def training_flags(p):
        p.add_argument("--data", type=_abs, help=f"case directory (default ${DATA_ENV})")
        p.add_argument("--config", type=_abs, help="TrainConfig JSON file")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float, help="base learning rate")
        p.add_argument("--preset", choices=["desk", "paper"], default="desk", help="model size preset")
        p.add_argument("--threads", type=int, default=1, help="torch intra-op threads")

    p = add("train", "train a segmenter")
    training_flags(p)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-prompting", action="store_true")
    p.add_argument("--split", type=float, help="train only on this fraction of a seeded split")
    p.add_argument("--out", type=_abs, required=True, help="checkpoint path")

    p = add("infer", "segment one preprocessed case")
    p.add_argument("--model", type=_abs, required=True)
    p.add_argument("--case", type=_abs, required=True)
    p.add_argument("--out", type=_abs, required=True, help="output .npz (key 'pred')")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--refine-iters", type=int, default=1)
    p.add_argument("--margin", type=int, default=0, help="box margin in pixels")
    p.add_argument("--variant", choices=["baseline", "+attention", "+prompting", "full"],
                   help="override the checkpoint's variant")
    p.add_argument("--threads", type=int, default=1)

    p = add("eval", "evaluate a checkpoint and write a per-case report CSV")
    p.add_argument("--model", type=_abs, required=True)
    p.add_argument("--data", type=_abs, help=f"case directory (default ${DATA_ENV})")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cv", type=int, help="k-fold cross-validation (retrains per fold)")
    g.add_argument("--split", type=float, help="score the held-out part of a seeded split")
    p.add_argument("--seed", type=int, help="split seed (default: the checkpoint's training seed)")
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--refine-iters", type=int, default=1)
    p.add_argument("--attention-out", type=_abs, help="attention CSV path")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=_abs, required=True, help="report CSV path")

    p = add("ablate", "train and evaluate all four ablation variants")
    training_flags(p)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--cv", type=int)
    g.add_argument("--split", type=float, default=0.8)
    p.add_argument("--seeds", type=int, nargs="+", help="one ablation per seed")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=_abs, required=True, help="markdown table path")

    p = add("report", "markdown tables and bar charts from report CSVs")
    p.add_argument("--results", type=_labelled_abs, nargs="+", required=True, metavar="[LABEL=]CSV")
    p.add_argument("--attention", type=_abs, help="attention CSV from eval")
    p.add_argument("--out", type=_abs, required=True, help="output directory")

    p = add("rerun", "re-execute a run from its manifest")
    p.add_argument("manifest", type=_abs)
    return parser, subs


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
    "rerun": cmd_rerun,
}


def _finish(manifest: RunManifest, args, output) -> None:
    manifest.argv = args._argv
    manifest.duration_s = round(time.perf_counter() - args._t0, 3)
    manifest.write(_manifest_path(Path(output)))


def dispatch(argv=None) -> int:
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage + str(exc) + "\n")
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    logging.getLogger("subregion_seg").setLevel(args.log_level)
    args._argv = canonical_argv(subs[args.command], args.command, args)
    args._t0 = time.perf_counter()
    try:
        manifest = COMMANDS[args.command](args)
        if manifest is not None:
            _finish(manifest, args, args.out)
    except SystemExit as exc:
        return int(exc.code or 0)
    except VALIDATION_ERRORS as exc:
        sys.stderr.write(f"subseg {args.command}: error: {exc}\n")
        return EXIT_INVALID
    except Exception as exc:  # anything else is a runtime failure
        logger.debug("runtime failure", exc_info=True)
        sys.stderr.write(f"subseg {args.command}: failed: {type(exc).__name__}: {exc}\n")
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv=None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())

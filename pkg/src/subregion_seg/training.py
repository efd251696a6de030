"""Losses, augmentation, one-vs-all target sampling and the training loop."""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .attention import ModalityAttention, fuse_region
from .errors import ConfigError, InvalidInputError
from .model import (
    ModelConfig,
    PromptableSegmenter,
    arrays_to_state,
    build_model,
    load_arrays,
    mean_fuse,
    save_arrays,
    state_to_arrays,
)
from .prompting import (
    REGION_LABELS,
    Variant,
    batch_bboxes,
    combine_subregions,
    two_pass_segment,
)
from .volume_io import MODALITIES, CaseArchive

logger = logging.getLogger(__name__)

IOU_SMOOTH = 1.0


class TrainingError(RuntimeError):
    pass


# -- losses ------------------------------------------------------------------------


def _check_shapes(logits, target):
    if logits.shape != target.shape:
        raise InvalidInputError(f"logits {tuple(logits.shape)} vs target {tuple(target.shape)}")


def ce_per_sample(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy averaged over the last two (spatial) axes."""
    return F.binary_cross_entropy_with_logits(logits, target, reduction="none").mean(dim=(-2, -1))


def dice_loss_per_sample(logits: torch.Tensor, target: torch.Tensor, smooth: float = IOU_SMOOTH):
    """1 - smoothed soft Dice over the last two (spatial) axes."""
    p = torch.sigmoid(logits)
    inter = (p * target).sum(dim=(-2, -1))
    denom = p.sum(dim=(-2, -1)) + target.sum(dim=(-2, -1))
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def ce_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against a {0, 1} target."""
    target = torch.as_tensor(target, dtype=logits.dtype)
    _check_shapes(logits, target)
    return F.binary_cross_entropy_with_logits(logits, target)


def iou_loss(logits: torch.Tensor, target: torch.Tensor, smooth: float = IOU_SMOOTH) -> torch.Tensor:
    """1 - soft Dice over the last two axes, averaged over any leading axes."""
    target = torch.as_tensor(target, dtype=logits.dtype)
    _check_shapes(logits, target)
    return dice_loss_per_sample(logits, target, smooth).mean()


def combined_loss(logits, target, lambda_seg: float = 1.0, lambda_iou: float = 1.0) -> torch.Tensor:
    if lambda_seg < 0 or lambda_iou < 0:
        raise InvalidInputError("loss weights must be >= 0")
    return lambda_seg * ce_loss(logits, target) + lambda_iou * iou_loss(logits, target)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps < 1:
        raise InvalidInputError(f"total_steps must be >= 1, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise InvalidInputError(f"step {step} outside [0, {total_steps}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


# -- sampling and augmentation ----------------------------------------------------------


def sample_subregion_target(gt_slice: np.ndarray, rng: np.random.Generator):
    """Pick one sub-region present in the slice (any of the three if none is)."""
    gt_slice = np.asarray(gt_slice)
    present = [r for r in REGION_LABELS if (gt_slice == r).any()]
    candidates = present or list(REGION_LABELS)
    r = candidates[int(rng.integers(len(candidates)))]
    return r, (gt_slice == r)


@dataclass
class AugmentConfig:
    rotate_deg: float = 15.0
    scale: tuple[float, float] = (0.9, 1.1)
    intensity_jitter_frac: float = 0.1

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(0.0, (1.0, 1.0), 0.0)


def apply_augmentation(image, mask, angle_deg: float, scale: float, jitter):
    """Rotate/scale about the slice center, then scale each modality by ``jitter``."""
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    jitter = np.broadcast_to(np.asarray(jitter, dtype=np.float64), (image.shape[-1],))
    if angle_deg != 0.0 or scale != 1.0:
        t = math.radians(angle_deg)
        # output -> input coordinate map
        mat = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]]) / scale
        center = (np.asarray(mask.shape, dtype=np.float64) - 1) / 2
        offset = center - mat @ center
        image = np.stack(
            [
                ndimage.affine_transform(image[..., m], mat, offset=offset, order=1, mode="nearest")
                for m in range(image.shape[-1])
            ],
            axis=-1,
        )
        mask = ndimage.affine_transform(mask, mat, offset=offset, order=0, mode="constant", cval=0)
    if np.any(jitter != 1.0):
        image = np.clip(image * jitter, 0.0, 255.0)
    return image, mask


def augment(image, mask, rng: np.random.Generator, config: AugmentConfig = AugmentConfig()):
    angle = rng.uniform(-config.rotate_deg, config.rotate_deg) if config.rotate_deg else 0.0
    lo, hi = config.scale
    scale = rng.uniform(lo, hi) if hi > lo else lo
    j = config.intensity_jitter_frac
    m = np.asarray(image).shape[-1]
    jitter = rng.uniform(1 - j, 1 + j, size=m) if j else np.ones(m)
    return apply_augmentation(image, mask, angle, scale, jitter)


# -- config / history / checkpoint -------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 2e-3
    batch_size: int = 8
    lambda_seg: float = 1.0
    lambda_iou: float = 1.0
    seed: int = 0
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    tau: float = 0.5
    use_attention: bool = True
    use_prompting: bool = True
    refine_iters: int = 1
    box_margin: int = 0

    @classmethod
    def paper(cls) -> "TrainConfig":
        return cls(epochs=200, base_lr=3e-5, batch_size=2)

    @property
    def variant(self) -> Variant:
        return Variant(self.use_attention, self.use_prompting)

    def validate(self) -> "TrainConfig":
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if not self.base_lr > 0:
            problems.append("base_lr must be > 0")
        if self.lambda_seg < 0 or self.lambda_iou < 0:
            problems.append("lambdas must be >= 0")
        if not 0 < self.tau < 1:
            problems.append("tau must be in (0, 1)")
        if self.refine_iters < 1:
            problems.append("refine_iters must be >= 1")
        if problems:
            raise ConfigError("invalid TrainConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["augmentation"]["scale"] = list(self.augmentation.scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown TrainConfig field '{unknown[0]}'")
        aug = d.pop("augmentation", None)
        if aug is not None:
            aug_known = {f.name for f in dataclasses.fields(AugmentConfig)}
            bad = sorted(set(aug) - aug_known)
            if bad:
                raise ConfigError(f"unknown augmentation field '{bad[0]}'")
            aug = dict(aug)
            if "scale" in aug:
                aug["scale"] = tuple(aug["scale"])
            d["augmentation"] = AugmentConfig(**aug)
        return cls(**d).validate()


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_ce: float
    loss_iou: float
    dice_ncr: float
    dice_ed: float
    dice_et: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    total_steps: int = 0
    seconds: float = 0.0

    CSV_COLUMNS = ("epoch", "lr", "loss_ce", "loss_iou", "dice_ncr", "dice_ed", "dice_et")

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for rec in self.records:
                writer.writerow([repr(getattr(rec, c)) if c != "epoch" else rec.epoch for c in self.CSV_COLUMNS])


@dataclass
class Checkpoint:
    model: PromptableSegmenter
    attention: ModalityAttention
    variant: Variant = Variant()
    train_config: dict = field(default_factory=dict)
    modalities: tuple[str, ...] = MODALITIES

    def save(self, path) -> None:
        arrays = state_to_arrays(self.model, "model")
        arrays.update(state_to_arrays(self.attention, "attention"))
        meta = {
            "format": "subregion_seg.checkpoint/1",
            "model_config": self.model.config.to_dict(),
            "variant": {"use_attention": self.variant.use_attention, "use_prompting": self.variant.use_prompting},
            "train_config": self.train_config,
            "modalities": list(self.modalities),
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path, expected_config: ModelConfig | None = None) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        try:
            cfg = ModelConfig.from_dict(meta["model_config"]).validate()
        except KeyError:
            from .errors import ArchiveFormatError

            raise ArchiveFormatError(f"{path}: missing model_config", key="model_config") from None
        if expected_config is not None and expected_config.to_dict() != cfg.to_dict():
            raise ConfigError(f"{path}: checkpoint config does not match the expected model config")
        model = build_model(cfg)
        attention = ModalityAttention(cfg.prompt_embed_dim)
        arrays_to_state(model, arrays, "model", path)
        arrays_to_state(attention, arrays, "attention", path)
        v = meta.get("variant", {})
        return cls(
            model.eval(),
            attention.eval(),
            Variant(v.get("use_attention", True), v.get("use_prompting", True)),
            meta.get("train_config", {}),
            tuple(meta.get("modalities", MODALITIES)),
        )


# -- training loop -------------------------------------------------------------------------


def tumor_slices(cases: list[CaseArchive]) -> list[tuple[int, int]]:
    out = []
    for i, case in enumerate(cases):
        has = case.gts.reshape(case.gts.shape[0], -1).any(axis=1)
        out.extend((i, int(z)) for z in np.flatnonzero(has))
    return out


def _resize_pair(image: np.ndarray, mask: np.ndarray, size):
    if image.shape[:2] == tuple(size):
        return image, mask
    zoom = (size[0] / image.shape[0], size[1] / image.shape[1])
    image = np.stack([ndimage.zoom(image[..., m], zoom, order=1) for m in range(image.shape[-1])], -1)
    mask = ndimage.zoom(mask, zoom, order=0)
    return np.clip(image, 0, 255), mask


def build_batch(cases, index, config: TrainConfig, epoch: int, positions, input_size):
    """Augmented images, binary targets and region indices for one batch.

    Each sample draws from its own generator seeded by (seed, epoch, position),
    so batches do not depend on how work is scheduled.
    """
    images, targets, regions = [], [], []
    for pos in positions:
        case_i, z = index[pos]
        rng = np.random.default_rng([config.seed, epoch, int(pos)])
        case = cases[case_i]
        img, gt = _resize_pair(case.imgs[z].astype(np.float64), case.gts[z], input_size)
        img, gt = augment(img, gt, rng, config.augmentation)
        r, target = sample_subregion_target(gt, rng)
        images.append(img)
        targets.append(target)
        regions.append(REGION_LABELS.index(r))
    return (
        np.stack(images),
        np.stack(targets).astype(np.float64),
        np.asarray(regions, dtype=np.int64),
    )


def training_loss(model, attention, images, targets, regions, config: TrainConfig):
    """Loss for one batch under the configured ablation variant.

    Returns ``(loss, ce, iou)`` where ce/iou are unweighted batch means.
    """
    variant = config.variant
    dtype = model.dtype
    x = torch.as_tensor(images, dtype=dtype)
    t = torch.as_tensor(targets, dtype=dtype)
    reg = torch.as_tensor(regions)
    b = x.shape[0]
    rows = torch.arange(b)

    feats = model.encode_per_modality(x)
    alpha = attention(feats) if variant.use_attention else None

    if variant.use_attention and not variant.use_prompting:
        fused = fuse_region(feats, alpha[rows, :, reg])
        pass1 = model.decode_mask(fused)[rows, reg]
        all_pass1 = None
    else:
        all_pass1 = model.decode_mask(mean_fuse(feats))
        pass1 = all_pass1[rows, reg]

    outputs = [(pass1, t, torch.ones(b, dtype=torch.bool))]
    if variant.use_prompting:
        labels = combine_subregions(torch.sigmoid(all_pass1.detach()), config.tau)
        region_labels = torch.as_tensor(REGION_LABELS)[reg]
        boxes, valid = batch_bboxes(labels, region_labels.to(labels.dtype), config.box_margin)
        if valid.any():
            idx = torch.nonzero(valid).reshape(-1)
            sub = feats.select(idx)
            fused = fuse_region(sub, alpha[idx, :, reg[idx]]) if variant.use_attention else mean_fuse(sub)
            emb = model.encode_prompt(boxes[idx])
            refined = model.decode_mask(fused, emb)[torch.arange(idx.numel()), reg[idx]]
            outputs.append((refined, t[idx], valid))

    # per-sample mean over the passes that produced an output
    n_outputs = torch.ones(b, dtype=dtype)
    ce_sum = torch.zeros(b, dtype=dtype)
    iou_sum = torch.zeros(b, dtype=dtype)
    for k, (logits, target, present) in enumerate(outputs):
        ce = ce_per_sample(logits, target)
        iou = dice_loss_per_sample(logits, target)
        if k == 0:
            ce_sum, iou_sum = ce_sum + ce, iou_sum + iou
        else:
            idx = torch.nonzero(present).reshape(-1)
            ce_sum = ce_sum.index_add(0, idx, ce)
            iou_sum = iou_sum.index_add(0, idx, iou)
            n_outputs = n_outputs.index_add(0, idx, torch.ones(idx.numel(), dtype=dtype))
    ce_mean = (ce_sum / n_outputs).mean()
    iou_mean = (iou_sum / n_outputs).mean()
    loss = config.lambda_seg * ce_mean + config.lambda_iou * iou_mean
    return loss, ce_mean.detach(), iou_mean.detach()


def subregion_dice(model, attention, cases, variant: Variant, tau: float, refine_iters: int = 1):
    """Mean per-sub-region 3D Dice over ``cases`` (empty-vs-empty counts as 1)."""
    from .evaluation import dice

    scores = {r: [] for r in REGION_LABELS}
    for case in cases:
        pred = two_pass_segment(model, attention, case.imgs, variant, tau, refine_iters)
        for r in REGION_LABELS:
            scores[r].append(dice(pred == r, case.gts == r))
    return [float(np.mean(scores[r])) for r in REGION_LABELS]


def train(
    model: PromptableSegmenter,
    attention: ModalityAttention,
    dataset: list[CaseArchive],
    config: TrainConfig,
    val_cases: list[CaseArchive] | None = None,
    steps_callback=None,
    modalities: tuple[str, ...] | None = None,
):
    """Adam + cosine schedule over every tumor-bearing slice, once per epoch.

    Dice in the history is measured on ``val_cases`` when given, otherwise on
    the first (up to) four training cases. Returns ``(Checkpoint, TrainHistory)``.
    """
    config.validate()
    if not dataset:
        raise InvalidInputError("training dataset is empty")
    m = dataset[0].imgs.shape[-1]
    if m != model.config.in_channels:
        raise InvalidInputError(f"data has {m} modalities, model expects {model.config.in_channels}")
    index = tumor_slices(dataset)
    if not index:
        raise InvalidInputError("no slice in the training set contains a tumor label")

    variant = config.variant
    params = list(model.parameters()) + (list(attention.parameters()) if variant.use_attention else [])
    optim = torch.optim.Adam(params, lr=config.base_lr, betas=(0.9, 0.999), eps=1e-8)
    steps_per_epoch = math.ceil(len(index) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    history = TrainHistory(total_steps=total_steps)
    monitor = val_cases if val_cases else dataset[:4]
    order_rng = np.random.default_rng([config.seed, 7919])
    started = time.perf_counter()
    step = 0
    for epoch in range(config.epochs):
        model.train()
        perm = order_rng.permutation(len(index))
        ce_acc = iou_acc = 0.0
        lr = config.base_lr
        for s in range(steps_per_epoch):
            positions = perm[s * config.batch_size:(s + 1) * config.batch_size]
            images, targets, regions = build_batch(
                dataset, index, config, epoch, positions, model.config.input_size
            )
            lr = cosine_lr(step, total_steps, config.base_lr)
            for group in optim.param_groups:
                group["lr"] = lr
            loss, ce, iou = training_loss(model, attention, images, targets, regions, config)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, step {step} "
                    f"(ce={ce.item()}, iou={iou.item()}, lr={lr:.3g})"
                )
            optim.zero_grad(set_to_none=True)
            loss.backward()
            optim.step()
            ce_acc += ce.item()
            iou_acc += iou.item()
            step += 1
            if steps_callback is not None:
                steps_callback(step, loss.item())
        model.eval()
        dice_scores = subregion_dice(model, attention, monitor, variant, config.tau, config.refine_iters)
        rec = EpochRecord(
            epoch + 1, lr, ce_acc / steps_per_epoch, iou_acc / steps_per_epoch, *dice_scores
        )
        history.records.append(rec)
        logger.info(
            "epoch %d/%d lr=%.3g ce=%.4f iou=%.4f dice(ncr/ed/et)=%.3f/%.3f/%.3f",
            rec.epoch, config.epochs, rec.lr, rec.loss_ce, rec.loss_iou, *dice_scores,
        )
    history.seconds = time.perf_counter() - started
    ckpt = Checkpoint(
        model.eval(),
        attention.eval(),
        variant,
        config.to_dict(),
        tuple(modalities) if modalities else MODALITIES[: model.config.in_channels],
    )
    return ckpt, history


def train_new(
    dataset, config: TrainConfig, model_config: ModelConfig | None = None, val_cases=None, modalities=None
):
    """Build a fresh model + attention from ``config.seed`` and train it."""
    m = dataset[0].imgs.shape[-1]
    model_config = model_config or ModelConfig.desk(in_channels=m)
    model = build_model(model_config, seed=config.seed)
    attention = ModalityAttention(model_config.prompt_embed_dim)
    return train(model, attention, dataset, config, val_cases, modalities=modalities)

"""Two-pass adaptive box prompting.

Pass 1 decodes every sub-region without a prompt from modality-averaged
features. Its thresholded label map yields one bounding box per
sub-region; pass 2 re-decodes each sub-region from its attention-fused
features with that box as the prompt. Sub-regions that pass 1 left empty
keep their pass-1 output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attention import ModalityAttention, fuse_region
from .errors import InvalidInputError
from .model import FeatureMapSet, FusedFeatures, PromptableSegmenter, mean_fuse
from .volume_io import MultiModalVolume, VALID_LABELS

REGION_LABELS = (1, 2, 4)  # NCR, ED, ET; also the decoder's mask-token order
# tie-break priority when two sub-regions are equally probable
PRIORITY = (4, 1, 2)


@dataclass(frozen=True)
class Variant:
    """Ablation switches. Both on is the full framework."""

    use_attention: bool = True
    use_prompting: bool = True

    @property
    def name(self) -> str:
        return {
            (False, False): "baseline",
            (True, False): "+attention",
            (False, True): "+prompting",
            (True, True): "full",
        }[(self.use_attention, self.use_prompting)]

    @classmethod
    def from_name(cls, name: str) -> "Variant":
        for v in ALL_VARIANTS:
            if v.name == name:
                return v
        raise InvalidInputError(f"unknown variant {name!r}")


ALL_VARIANTS = (
    Variant(False, False),
    Variant(True, False),
    Variant(False, True),
    Variant(True, True),
)


@dataclass(frozen=True)
class SpatialPrompt:
    sub_region: int
    box: tuple[int, int, int, int] | None  # (row_min, col_min, row_max, col_max), inclusive

    @property
    def empty(self) -> bool:
        return self.box is None


def region_index(label: int) -> int:
    try:
        return REGION_LABELS.index(int(label))
    except ValueError:
        raise InvalidInputError(f"sub-region label must be one of {REGION_LABELS}, got {label}") from None


def extract_bbox(pred: np.ndarray, r: int, margin: int = 0) -> SpatialPrompt:
    """Tightest box around ``pred == r``, grown by ``margin`` and clamped to the image."""
    region_index(r)
    pred = np.asarray(pred)
    rows = np.flatnonzero((pred == r).any(axis=1))
    if rows.size == 0:
        return SpatialPrompt(r, None)
    cols = np.flatnonzero((pred == r).any(axis=0))
    h, w = pred.shape
    box = (
        max(int(rows[0]) - margin, 0),
        max(int(cols[0]) - margin, 0),
        min(int(rows[-1]) + margin, h - 1),
        min(int(cols[-1]) + margin, w - 1),
    )
    return SpatialPrompt(r, box)


def batch_bboxes(label_maps: torch.Tensor, labels, margin: int = 0):
    """Vectorised :func:`extract_bbox` over a (B, H, W) stack.

    ``labels`` is one label or a (B,) sequence. Returns ``(boxes, valid)``
    with boxes (B, 4) long and valid (B,) bool.
    """
    b, h, w = label_maps.shape
    labels = torch.as_tensor(labels, dtype=label_maps.dtype).reshape(-1)
    region = label_maps == labels.reshape(-1, 1, 1) if labels.numel() > 1 else label_maps == labels[0]
    row_any, col_any = region.any(dim=2), region.any(dim=1)
    valid = row_any.any(dim=1)
    ar_h, ar_w = torch.arange(h), torch.arange(w)
    big = max(h, w) + 1
    r0 = torch.where(row_any, ar_h, big).min(dim=1).values
    r1 = torch.where(row_any, ar_h, -1).max(dim=1).values
    c0 = torch.where(col_any, ar_w, big).min(dim=1).values
    c1 = torch.where(col_any, ar_w, -1).max(dim=1).values
    boxes = torch.stack(
        [(r0 - margin).clamp(min=0), (c0 - margin).clamp(min=0),
         (r1 + margin).clamp(max=h - 1), (c1 + margin).clamp(max=w - 1)],
        dim=1,
    )
    boxes = torch.where(valid[:, None], boxes, torch.zeros_like(boxes))
    return boxes, valid


def combine_subregions(probs, tau: float = 0.5):
    """Merge per-sub-region probabilities into a {0, 1, 2, 4} label map.

    ``probs`` is either a mapping ``{1: p_ncr, 2: p_ed, 4: p_et}`` or an
    array (..., 3, H, W) in NCR, ED, ET order. Sub-regions at or above
    ``tau`` compete; the most probable wins, ties go ET > NCR > ED.
    """
    is_torch = isinstance(probs, torch.Tensor)
    if isinstance(probs, dict):
        if set(probs) != set(REGION_LABELS):
            raise InvalidInputError(f"need probabilities for sub-regions {REGION_LABELS}")
        maps = [np.asarray(probs[r], dtype=np.float64) for r in REGION_LABELS]
        if any(m.shape != maps[0].shape for m in maps):
            raise InvalidInputError("sub-region probability maps differ in shape")
        probs = np.stack(maps, axis=-3)
    if probs.shape[-3] != 3:
        raise InvalidInputError(f"expected 3 sub-region maps on axis -3, got shape {tuple(probs.shape)}")

    order = [REGION_LABELS.index(p) for p in PRIORITY]
    if is_torch:
        p = probs[..., order, :, :]
        cand = torch.where(p >= tau, p, torch.full_like(p, -1.0))
        best = cand.argmax(dim=-3)
        lut = torch.tensor(PRIORITY, dtype=torch.uint8)
        return torch.where(cand.max(dim=-3).values >= 0, lut[best], torch.zeros_like(lut[best]))
    p = np.asarray(probs)[..., order, :, :]
    cand = np.where(p >= tau, p, -1.0)
    # argmax returns the first maximum, i.e. the higher-priority label on ties
    best = cand.argmax(axis=-3)
    out = np.asarray(PRIORITY, dtype=np.uint8)[best]
    return np.where(cand.max(axis=-3) >= 0, out, 0).astype(np.uint8)


def refine_subregion(model: PromptableSegmenter, fused: FusedFeatures, prompt: SpatialPrompt):
    """Prompted decode of one sub-region; returns (H, W) probabilities for a single slice."""
    if prompt.empty:
        raise InvalidInputError("refine_subregion needs a non-empty prompt")
    r = region_index(prompt.sub_region)
    emb = model.encode_prompt(torch.tensor(prompt.box)).unsqueeze(0)
    logits = model.decode_mask(fused, emb)
    return torch.sigmoid(logits[:, r])[0]


# -- shared forward ----------------------------------------------------------------


@dataclass
class ForwardResult:
    pass1_logits: torch.Tensor  # (B, 3, H, W)
    logits: torch.Tensor  # (B, 3, H, W), after refinement
    alpha: torch.Tensor | None  # (B, M, 3)
    boxes: torch.Tensor | None  # (B, 3, 4) from the last refinement round
    box_valid: torch.Tensor | None  # (B, 3)


def first_pass(model, attention, feats: FeatureMapSet, variant: Variant, alpha=None):
    """Unprompted logits for all sub-regions, (B, 3, H, W)."""
    if variant.use_attention and not variant.use_prompting:
        # attention without prompting: each sub-region decoded from its fused map
        return torch.stack(
            [model.decode_mask(fuse_region(feats, alpha[..., r]))[:, r] for r in range(3)], dim=1
        )
    return model.decode_mask(mean_fuse(feats))


def refine(model, feats, alpha, logits, variant: Variant, tau: float, margin: int = 0):
    """One prompted refinement round over all sub-regions."""
    labels = combine_subregions(torch.sigmoid(logits.detach()), tau)
    out = logits.clone()
    all_boxes, all_valid = [], []
    for r, label in enumerate(REGION_LABELS):
        boxes, valid = batch_bboxes(labels, label, margin)
        all_boxes.append(boxes)
        all_valid.append(valid)
        if not valid.any():
            continue
        idx = torch.nonzero(valid).reshape(-1)
        sub = feats.select(idx)
        fused = fuse_region(sub, alpha[idx][..., r]) if variant.use_attention else mean_fuse(sub)
        emb = model.encode_prompt(boxes[idx])
        out[idx, r] = model.decode_mask(fused, emb)[:, r]
    return out, torch.stack(all_boxes, 1), torch.stack(all_valid, 1)


def forward_slices(
    model: PromptableSegmenter,
    attention: ModalityAttention | None,
    slices,
    variant: Variant = Variant(),
    tau: float = 0.5,
    refine_iters: int = 1,
    margin: int = 0,
) -> ForwardResult:
    feats = model.encode_per_modality(slices)
    alpha = None
    if variant.use_attention:
        if attention is None:
            raise InvalidInputError("variant uses attention but no attention parameters were given")
        alpha = attention(feats)
    pass1 = first_pass(model, attention, feats, variant, alpha)
    logits, boxes, valid = pass1, None, None
    if variant.use_prompting:
        for _ in range(refine_iters):
            logits, boxes, valid = refine(model, feats, alpha, logits, variant, tau, margin)
    return ForwardResult(pass1, logits, alpha, boxes, valid)


def _resize(x: torch.Tensor, size, mode: str):
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    kw = {"align_corners": False} if mode == "bilinear" else {}
    return F.interpolate(x, size=tuple(size), mode=mode, **kw)


@torch.no_grad()
def two_pass_segment(
    model: PromptableSegmenter,
    attention: ModalityAttention | None,
    volume,
    variant: Variant = Variant(),
    tau: float = 0.5,
    refine_iters: int = 1,
    margin: int = 0,
    batch_size: int = 32,
    return_attention: bool = False,
):
    """Segment a preprocessed (D, H, W, M) volume slice by slice.

    Slices whose in-plane size differs from the model input are resized
    bilinearly and the probabilities resized back before thresholding.
    Returns the (D, H, W) uint8 label volume, plus the (D, M, 3) attention
    weights when ``return_attention`` is set (None if attention is off).
    """
    x = volume.intensities if isinstance(volume, MultiModalVolume) else np.asarray(volume)
    if x.ndim != 4:
        raise InvalidInputError(f"volume must be (D, H, W, M), got shape {x.shape}")
    x = np.asarray(x, dtype=np.float64)
    if x.size and (x.min() < 0 or x.max() > 255):
        raise InvalidInputError("volume must be preprocessed onto [0, 255]")
    d, h, w, _ = x.shape
    in_size = model.config.input_size
    labels = np.zeros((d, h, w), dtype=np.uint8)
    alphas = []
    for start in range(0, d, batch_size):
        chunk = torch.as_tensor(x[start:start + batch_size], dtype=model.dtype)
        chunk = _resize(chunk.permute(0, 3, 1, 2), in_size, "bilinear").permute(0, 2, 3, 1)
        res = forward_slices(model, attention, chunk, variant, tau, refine_iters, margin)
        probs = _resize(torch.sigmoid(res.logits), (h, w), "bilinear")
        labels[start:start + batch_size] = combine_subregions(probs, tau).numpy()
        if res.alpha is not None:
            alphas.append(res.alpha.numpy())
    assert set(np.unique(labels)) <= set(VALID_LABELS)
    if return_attention:
        return labels, (np.concatenate(alphas) if alphas else None)
    return labels

"""Ingestion, intensity preprocessing and archive I/O for multi-modal volumes.

Arrays are laid out depth x height x width (x modality). Normalized
intensities live on the [0, 255] scale and are stored as uint8.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArchiveFormatError, InvalidInputError

MODALITIES: tuple[str, ...] = ("T1", "T1c", "T2", "FLAIR")
VALID_LABELS: tuple[int, ...] = (0, 1, 2, 4)
ARCHIVE_KEYS: tuple[str, ...] = ("imgs", "gts", "spacing")


@dataclass
class MultiModalVolume:
    intensities: np.ndarray  # (D, H, W, M)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality_order: tuple[str, ...] = MODALITIES

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        if self.intensities.ndim != 4:
            raise InvalidInputError(
                f"intensities must be 4D (D, H, W, M), got shape {self.intensities.shape}"
            )
        m = self.intensities.shape[-1]
        if m not in (1, len(MODALITIES)):
            raise InvalidInputError(f"modality axis must have length 1 or 4, got {m}")
        if len(self.modality_order) != m:
            raise InvalidInputError(
                f"modality_order {self.modality_order} does not match {m} channels"
            )
        self.spacing = tuple(float(s) for s in self.spacing)
        validate_spacing(self.spacing)

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape[:3])

    @property
    def n_modalities(self) -> int:
        return self.intensities.shape[-1]


@dataclass
class CaseArchive:
    imgs: np.ndarray  # uint8 (D, H, W, M)
    gts: np.ndarray  # uint8 (D, H, W)
    spacing: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float64))

    def validate(self) -> "CaseArchive":
        if not isinstance(self.imgs, np.ndarray) or self.imgs.dtype != np.uint8:
            raise ArchiveFormatError("'imgs' must be a uint8 array", key="imgs")
        if self.imgs.ndim != 4 or self.imgs.shape[-1] not in (1, 4):
            raise ArchiveFormatError(
                f"'imgs' must have shape (D, H, W, 4) or (D, H, W, 1), got {self.imgs.shape}",
                key="imgs",
            )
        if not isinstance(self.gts, np.ndarray) or self.gts.dtype != np.uint8:
            raise ArchiveFormatError("'gts' must be a uint8 array", key="gts")
        if self.gts.shape != self.imgs.shape[:3]:
            raise ArchiveFormatError(
                f"'gts' shape {self.gts.shape} does not match imgs spatial shape {self.imgs.shape[:3]}",
                key="gts",
            )
        bad = np.setdiff1d(np.unique(self.gts), VALID_LABELS)
        if bad.size:
            raise ArchiveFormatError(f"'gts' contains invalid labels {bad.tolist()}", key="gts")
        sp = self.spacing
        if not isinstance(sp, np.ndarray) or sp.dtype != np.float64 or sp.shape != (3,):
            raise ArchiveFormatError("'spacing' must be 3 float64 values", key="spacing")
        if not np.all(np.isfinite(sp)) or np.any(sp <= 0):
            raise ArchiveFormatError("'spacing' values must be finite and positive", key="spacing")
        return self

    @property
    def volume(self) -> MultiModalVolume:
        order = MODALITIES if self.imgs.shape[-1] == 4 else ("?",)
        return MultiModalVolume(self.imgs, tuple(self.spacing), order)


def validate_spacing(spacing) -> None:
    sp = np.asarray(spacing, dtype=np.float64)
    if sp.shape != (3,) or not np.all(np.isfinite(sp)) or np.any(sp <= 0):
        raise InvalidInputError(f"spacing must be 3 strictly positive values, got {spacing!r}")


def validate_labels(labels: np.ndarray) -> None:
    bad = np.setdiff1d(np.unique(labels), VALID_LABELS)
    if bad.size:
        raise InvalidInputError(f"labels must be in {VALID_LABELS}, found {bad.tolist()}")


def clip_percentiles(volume: np.ndarray, lo_pct: float = 0.5, hi_pct: float = 99.5) -> np.ndarray:
    """Clip a single-modality volume to its [lo_pct, hi_pct] percentile band.

    Percentiles use linear interpolation between the sorted flattened values.
    """
    volume = np.asarray(volume, dtype=np.float64)
    if volume.size == 0:
        raise InvalidInputError("cannot clip an empty volume")
    if not 0.0 <= lo_pct < hi_pct <= 100.0:
        raise InvalidInputError(f"need 0 <= lo_pct < hi_pct <= 100, got {lo_pct}, {hi_pct}")
    lo, hi = np.percentile(volume, [lo_pct, hi_pct], method="linear")
    return np.clip(volume, lo, hi)


def minmax_normalize(volume: np.ndarray) -> np.ndarray:
    """Affinely map a volume onto [0, 255]; a constant volume maps to zeros."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.size == 0:
        raise InvalidInputError("cannot normalize an empty volume")
    vmin, vmax = volume.min(), volume.max()
    if vmax <= vmin:
        return np.zeros_like(volume)
    # dividing first maps vmax to exactly 1.0, hence exactly 255
    out = (volume - vmin) / (vmax - vmin) * 255.0
    return np.clip(out, 0.0, 255.0)


def to_uint8(volume: np.ndarray) -> np.ndarray:
    """Round half-up onto uint8. Input must already be in [0, 255]."""
    volume = np.asarray(volume, dtype=np.float64)
    if volume.size and (volume.min() < 0.0 or volume.max() > 255.0):
        raise InvalidInputError("values outside [0, 255] cannot be stored as uint8")
    return np.floor(volume + 0.5).astype(np.uint8)


def stack_modalities(volumes) -> MultiModalVolume:
    """Stack four co-registered (T1, T1c, T2, FLAIR) volumes on a trailing axis."""
    volumes = [np.asarray(v) for v in volumes]
    if len(volumes) != len(MODALITIES):
        raise InvalidInputError(f"expected {len(MODALITIES)} modalities, got {len(volumes)}")
    shape = volumes[0].shape
    if len(shape) != 3:
        raise InvalidInputError(f"each modality must be 3D, got shape {shape}")
    for name, v in zip(MODALITIES, volumes):
        if v.shape != shape:
            raise InvalidInputError(f"{name} shape {v.shape} differs from T1 shape {shape}")
    return MultiModalVolume(np.stack(volumes, axis=-1))


def _slab(nonzero_slices: np.ndarray) -> tuple[int, int] | None:
    idx = np.flatnonzero(nonzero_slices)
    if idx.size == 0:
        return None
    return int(idx[0]), int(idx[-1]) + 1


def crop_to_labeled_roi(volume: MultiModalVolume, mask: np.ndarray):
    """Crop depth to the contiguous slab spanning every labeled slice.

    Returns ``(volume, mask, offset)`` where ``offset`` is the first kept
    slice. An all-background mask returns the inputs unchanged with offset 0.
    """
    mask = np.asarray(mask)
    if mask.shape != volume.spatial_shape:
        raise InvalidInputError(
            f"mask shape {mask.shape} does not match volume shape {volume.spatial_shape}"
        )
    slab = _slab(mask.reshape(mask.shape[0], -1).any(axis=1))
    if slab is None:
        return volume, mask, 0
    start, stop = slab
    cropped = MultiModalVolume(
        volume.intensities[start:stop], volume.spacing, volume.modality_order
    )
    return cropped, mask[start:stop], start


def crop_to_intensity_roi(volume: MultiModalVolume, mask: np.ndarray | None = None):
    """Inference-time crop: slab of slices with any nonzero intensity in any modality.

    Never looks at labels; ``mask`` (if given) is only cropped alongside.
    """
    x = volume.intensities
    slab = _slab(x.reshape(x.shape[0], -1).any(axis=1))
    if slab is None:
        return volume, mask, 0
    start, stop = slab
    cropped = MultiModalVolume(x[start:stop], volume.spacing, volume.modality_order)
    return cropped, (None if mask is None else np.asarray(mask)[start:stop]), start


def preprocess_case(
    modalities: dict[str, np.ndarray],
    seg: np.ndarray | None,
    spacing=(1.0, 1.0, 1.0),
    lo_pct: float = 0.5,
    hi_pct: float = 99.5,
    single_modality: str | None = None,
) -> tuple[CaseArchive, int]:
    """Clip, normalize, stack and ROI-crop one case into a :class:`CaseArchive`.

    With ``seg`` present the slab comes from the labels (training data);
    without it the intensity rule is used and ``gts`` is all background.
    """
    names = (single_modality,) if single_modality else MODALITIES
    missing = [n for n in names if n not in modalities]
    if missing:
        raise InvalidInputError(f"case is missing modalities {missing}")
    normed = [minmax_normalize(clip_percentiles(modalities[n], lo_pct, hi_pct)) for n in names]
    if single_modality:
        vol = MultiModalVolume(normed[0][..., None], spacing, (single_modality,))
    else:
        vol = stack_modalities(normed)
        vol.spacing = tuple(float(s) for s in spacing)
        validate_spacing(vol.spacing)

    if seg is not None:
        seg = np.asarray(seg)
        validate_labels(seg)
        vol, seg, offset = crop_to_labeled_roi(vol, seg)
    else:
        vol, _, offset = crop_to_intensity_roi(vol)
        seg = np.zeros(vol.spatial_shape, dtype=np.uint8)

    archive = CaseArchive(
        imgs=to_uint8(vol.intensities),
        gts=seg.astype(np.uint8),
        spacing=np.asarray(vol.spacing, dtype=np.float64),
    )
    return archive.validate(), offset


def save_case(archive: CaseArchive, path) -> None:
    archive.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, imgs=archive.imgs, gts=archive.gts, spacing=archive.spacing)


def load_case(path) -> CaseArchive:
    try:
        with np.load(path, allow_pickle=False) as data:
            keys = set(data.files)
            for key in ARCHIVE_KEYS:
                if key not in keys:
                    raise ArchiveFormatError(f"{path}: missing key '{key}'", key=key)
            extra = sorted(keys - set(ARCHIVE_KEYS))
            if extra:
                raise ArchiveFormatError(f"{path}: unexpected key '{extra[0]}'", key=extra[0])
            arrays = {k: data[k] for k in ARCHIVE_KEYS}
    except ArchiveFormatError:
        raise
    except (OSError, ValueError, zipfile.BadZipFile, EOFError) as exc:
        raise ArchiveFormatError(f"{path}: unreadable archive ({exc})") from exc
    return CaseArchive(**arrays).validate()


def list_cases(directory) -> list[Path]:
    """Sorted ``*.npz`` files in a directory (case id = file stem)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise InvalidInputError(f"not a directory: {directory}")
    return sorted(p for p in directory.glob("*.npz") if p.is_file())


# -- raw-case adapter ---------------------------------------------------------

_RAW_ALIASES = {
    "t1": "T1",
    "t1c": "T1c",
    "t1ce": "T1c",
    "t2": "T2",
    "flair": "FLAIR",
}


def read_raw_case(path):
    """Read an unnormalized case from plain arrays.

    Accepted layouts: an ``.npz`` with per-modality keys (``t1``, ``t1c``/
    ``t1ce``, ``t2``, ``flair``, optional ``seg`` and ``spacing``); a
    directory of ``<key>.npy`` files with optional ``spacing.json``; or an
    existing case archive (``imgs``/``gts``/``spacing``), whose channels are
    split back into modalities.

    Returns ``(modalities, seg_or_None, spacing)``.
    """
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    spacing = (1.0, 1.0, 1.0)
    if path.is_dir():
        for f in path.glob("*.npy"):
            arrays[f.stem.lower()] = np.load(f, allow_pickle=False)
        sp_file = path / "spacing.json"
        if sp_file.exists():
            spacing = tuple(json.loads(sp_file.read_text()))
    else:
        try:
            with np.load(path, allow_pickle=False) as data:
                arrays = {k.lower(): data[k] for k in data.files}
        except (OSError, ValueError, zipfile.BadZipFile) as exc:
            raise ArchiveFormatError(f"{path}: unreadable raw case ({exc})") from exc

    if "spacing" in arrays:
        spacing = tuple(float(s) for s in np.asarray(arrays.pop("spacing")).ravel())

    if "imgs" in arrays:
        imgs = arrays["imgs"]
        seg = arrays.get("gts")
        if imgs.ndim != 4:
            raise ArchiveFormatError(f"{path}: 'imgs' must be 4D", key="imgs")
        names = MODALITIES if imgs.shape[-1] == 4 else (MODALITIES[0],)
        mods = {n: imgs[..., i].astype(np.float64) for i, n in enumerate(names)}
        return mods, seg, spacing

    mods = {}
    for key, name in _RAW_ALIASES.items():
        if key in arrays:
            mods[name] = arrays[key].astype(np.float64)
    seg = arrays.get("seg", arrays.get("label"))
    if seg is not None:
        seg = np.rint(seg).astype(np.uint8)
    return mods, seg, spacing

"""Dataset ingestion, synthetic cross-camera identities, augmentation and PK sampling."""
from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "query", "gallery")
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")
# <pid>_c<camid>_<seq>.<ext>; Market-style "c1s1" camera tokens and pid -1 (distractor) accepted
FILENAME_RE = re.compile(r"^(-?\d+)_c(\d+)(?:s\d+)?_([^.]+)\.(png|jpe?g|bmp)$", re.IGNORECASE)


class DataError(Exception):
    pass


class IngestionError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


class SamplingError(DataError):
    pass


@dataclass
class ImageRecord:
    pid: int
    camid: int
    pixels: np.ndarray  # H0 x W0 x 3, float32 in [0, 1]
    split: str = "train"
    source: str = ""


class Dataset:
    """A list of records plus a dense identity index over its pids."""

    def __init__(self, records: Sequence[ImageRecord]):
        self.records = list(records)
        pids = sorted({r.pid for r in self.records})
        self.pid_to_index = {pid: i for i, pid in enumerate(pids)}

    @property
    def num_images(self) -> int:
        return len(self.records)

    @property
    def num_identities(self) -> int:
        return len(self.pid_to_index)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> ImageRecord:
        return self.records[i]

    def split(self, name: str) -> "Dataset":
        return Dataset([r for r in self.records if r.split == name])

    def labels(self) -> np.ndarray:
        """Dense identity indices, aligned with ``records``."""
        return np.array([self.pid_to_index[r.pid] for r in self.records], dtype=np.int64)

    def pids(self) -> np.ndarray:
        return np.array([r.pid for r in self.records], dtype=np.int64)

    def camids(self) -> np.ndarray:
        return np.array([r.camid for r in self.records], dtype=np.int64)

    def images(self, indices: Sequence[int] | None = None) -> np.ndarray:
        idx = range(len(self.records)) if indices is None else indices
        return np.stack([self.records[i].pixels for i in idx])

    def index_by_identity(self) -> dict[int, list[int]]:
        groups: dict[int, list[int]] = {}
        for i, r in enumerate(self.records):
            groups.setdefault(r.pid, []).append(i)
        return groups


# ---------------------------------------------------------------- ingestion


def _read_image(path: Path, size: tuple[int, int] | None) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and (im.height, im.width) != tuple(size):
            im = im.resize((size[1], size[0]), Image.BILINEAR)
        return np.asarray(im, dtype=np.float32) / 255.0


def parse_filename(name: str) -> tuple[int, int]:
    m = FILENAME_RE.match(name)
    if m is None:
        raise IngestionError(f"cannot parse pid/camid from filename {name!r}")
    return int(m.group(1)), int(m.group(2))


def load_image_folder(path, split: str = "train", size: tuple[int, int] | None = None) -> Dataset:
    """Load a flat folder of ``<pid>_c<camid>_<seq>.<ext>`` images.

    ``size`` is ``(height, width)``; images are resized with bilinear
    interpolation when given.
    """
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"not a directory: {path}")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    if not files:
        raise EmptyDatasetError(f"no images in {path}")
    records = []
    for p in files:
        pid, camid = parse_filename(p.name)
        records.append(ImageRecord(pid, camid, _read_image(p, size), split, str(p)))
    return Dataset(records)


def load_dataset_root(root, size: tuple[int, int] | None = None) -> Dataset:
    """Load ``train/``, ``query/`` and ``gallery/`` subfolders of ``root``.

    Market-1501 folder names (``bounding_box_train``, ``bounding_box_test``)
    are accepted as aliases.
    """
    root = Path(root)
    aliases = {
        "train": ("train", "bounding_box_train"),
        "query": ("query",),
        "gallery": ("gallery", "bounding_box_test"),
    }
    records: list[ImageRecord] = []
    for split, names in aliases.items():
        for name in names:
            if (root / name).is_dir():
                records += load_image_folder(root / name, split, size).records
                break
    if not records:
        raise EmptyDatasetError(f"no split folders found under {root}")
    return Dataset(records)


def load_manifest(csv_path, size: tuple[int, int] | None = None) -> Dataset:
    """Load a CSV manifest with columns ``path,pid,camid,split``."""
    csv_path = Path(csv_path)
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "pid", "camid", "split"} - set(reader.fieldnames or [])
        if missing:
            raise IngestionError(f"{csv_path}: missing columns {sorted(missing)}")
        for row in reader:
            p = Path(row["path"])
            if not p.is_absolute():
                p = csv_path.parent / p
            try:
                pid, camid = int(row["pid"]), int(row["camid"])
            except ValueError as e:
                raise IngestionError(f"{csv_path}: bad pid/camid for {row['path']}") from e
            if row["split"] not in SPLITS:
                raise IngestionError(f"{csv_path}: unknown split {row['split']!r} for {row['path']}")
            records.append(ImageRecord(pid, camid, _read_image(p, size), row["split"], str(p)))
    if not records:
        raise EmptyDatasetError(f"manifest {csv_path} lists no images")
    return Dataset(records)


def save_image_folder(dataset: Dataset, root) -> None:
    """Write records as PNGs under ``root/<split>/`` using the ingestion naming."""
    from PIL import Image

    root = Path(root)
    counters: dict[tuple[str, int, int], int] = {}
    for r in dataset.records:
        d = root / r.split
        d.mkdir(parents=True, exist_ok=True)
        key = (r.split, r.pid, r.camid)
        seq = counters.get(key, 0)
        counters[key] = seq + 1
        img = np.clip(np.rint(r.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(d / f"{r.pid:04d}_c{r.camid}_{seq}.png")


# ---------------------------------------------------------------- synthesis


@dataclass
class SyntheticConfig:
    num_ids: int = 64
    images_per_id: int = 20
    num_cameras: int = 4
    image_height: int = 64
    image_width: int = 32
    seed: int = 0
    num_test_ids: int = 0
    blobs_per_id: int = 4
    translate_px: int = 4
    color_jitter: float = 0.15
    noise_std: float = 0.08
    # per-camera affine color transform; generated from the seed when empty
    camera_tints: list = field(default_factory=list)
    camera_contrasts: list = field(default_factory=list)
    tint_scale: float = 0.25
    contrast_range: tuple = (0.5, 1.4)

    def validate(self) -> list[str]:
        errors = []
        for name in ("num_ids", "images_per_id", "num_cameras"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.num_test_ids < 0:
            errors.append("num_test_ids must be >= 0")
        if self.image_height < 16 or self.image_width < 8:
            errors.append("image dims must be at least 16x8")
        if self.camera_tints and len(self.camera_tints) != self.num_cameras:
            errors.append("camera_tints needs one entry per camera")
        if self.camera_contrasts and len(self.camera_contrasts) != self.num_cameras:
            errors.append("camera_contrasts needs one entry per camera")
        return errors


def camera_params(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-camera (tint[3], contrast) arrays, explicit or drawn from the seed."""
    rng = np.random.default_rng([cfg.seed, 0xCA3])
    tints = rng.uniform(-cfg.tint_scale, cfg.tint_scale, size=(cfg.num_cameras, 3))
    contrasts = rng.uniform(*cfg.contrast_range, size=cfg.num_cameras)
    if cfg.camera_tints:
        tints = np.asarray(cfg.camera_tints, dtype=np.float64).reshape(cfg.num_cameras, 3)
    if cfg.camera_contrasts:
        contrasts = np.asarray(cfg.camera_contrasts, dtype=np.float64)
    return tints, contrasts


def apply_camera(pixels: np.ndarray, tint: np.ndarray, contrast: float) -> np.ndarray:
    """``clip((x - 0.5) * contrast + 0.5 + tint, 0, 1)`` per channel."""
    return np.clip((pixels - 0.5) * contrast + 0.5 + tint, 0.0, 1.0)


def _base_pattern(rng: np.random.Generator, h: int, w: int, num_blobs: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # coarse body layout: upper/lower garment colors, then a few localized blobs
    img = np.empty((h, w, 3))
    split_row = int(h * rng.uniform(0.4, 0.6))
    img[:split_row] = rng.uniform(0.1, 0.9, size=3)
    img[split_row:] = rng.uniform(0.1, 0.9, size=3)
    for _ in range(num_blobs):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sy, sx = rng.uniform(0.04, 0.12) * h, rng.uniform(0.08, 0.2) * w
        color = rng.uniform(0.0, 1.0, size=3)
        mask = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2))[..., None]
        img = img * (1 - mask) + color * mask
    return img


def _shift(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.roll(img, (dy, dx), axis=(0, 1))
    # replicate borders instead of wrapping
    if dy > 0:
        out[:dy] = out[dy]
    elif dy < 0:
        out[dy:] = out[dy - 1]
    if dx > 0:
        out[:, :dx] = out[:, dx : dx + 1]
    elif dx < 0:
        out[:, dx:] = out[:, dx - 1 : dx]
    return out


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Render ``(num_ids + num_test_ids) * images_per_id`` images.

    Each identity owns a seeded blob layout. Image ``k`` of an identity is seen
    by camera ``k % num_cameras`` and gets a random translation, color jitter
    and pixel noise before the camera transform. Identities ``num_ids..`` are
    test identities: the first image per camera goes to ``query``, the rest to
    ``gallery``. With ``num_cameras > images_per_id`` some cameras never see a
    given identity.
    """
    errors = cfg.validate()
    if errors:
        raise DataError("; ".join(errors))
    h, w = cfg.image_height, cfg.image_width
    tints, contrasts = camera_params(cfg)
    records = []
    for pid in range(cfg.num_ids + cfg.num_test_ids):
        base = _base_pattern(np.random.default_rng([cfg.seed, pid, 1]), h, w, cfg.blobs_per_id)
        test = pid >= cfg.num_ids
        for k in range(cfg.images_per_id):
            rng = np.random.default_rng([cfg.seed, pid, 2, k])
            cam = k % cfg.num_cameras
            t = cfg.translate_px
            dy, dx = (rng.integers(-t, t + 1, size=2) if t > 0 else (0, 0))
            img = _shift(base, int(dy), int(dx))
            img = img + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
            img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
            img = apply_camera(np.clip(img, 0, 1), tints[cam], contrasts[cam])
            split = ("query" if k < cfg.num_cameras else "gallery") if test else "train"
            records.append(ImageRecord(pid, cam, img.astype(np.float32), split))
    return Dataset(records)


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5
    pad_pixels: int = 10
    crop: bool = True
    erase_prob: float = 0.5
    erase_area_range: tuple = (0.02, 0.4)
    erase_aspect_range: tuple = (0.3, 3.33)

    def validate(self) -> list[str]:
        errors = []
        for name in ("flip_prob", "erase_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errors.append(f"{name} must lie in [0, 1]")
        if self.pad_pixels < 0:
            errors.append("pad_pixels must be >= 0")
        lo, hi = self.erase_area_range
        if not 0 < lo <= hi < 1:
            errors.append("erase_area_range must satisfy 0 < lo <= hi < 1")
        alo, ahi = self.erase_aspect_range
        if not 0 < alo <= ahi:
            errors.append("erase_aspect_range must satisfy 0 < lo <= hi")
        return errors


NO_AUGMENT = AugmentConfig(flip_prob=0.0, pad_pixels=0, crop=False, erase_prob=0.0)


def random_erase_box(h: int, w: int, cfg: AugmentConfig, rng: np.random.Generator, attempts: int = 100):
    """Sample an erase rectangle ``(top, left, eh, ew)``; ``None`` if none fits."""
    area = h * w
    for _ in range(attempts):
        target = rng.uniform(*cfg.erase_area_range) * area
        aspect = np.exp(rng.uniform(np.log(cfg.erase_aspect_range[0]), np.log(cfg.erase_aspect_range[1])))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh < h and 0 < ew < w:
            lo, hi = cfg.erase_area_range
            if not lo * area <= eh * ew <= hi * area:
                continue  # rounding pushed the box outside the requested range
            top = int(rng.integers(0, h - eh + 1))
            left = int(rng.integers(0, w - ew + 1))
            return top, left, eh, ew
    return None


def augment(record: ImageRecord, cfg: AugmentConfig, rng: np.random.Generator) -> ImageRecord:
    img = record.pixels
    h, w = img.shape[:2]
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        img = img[:, ::-1]
    if cfg.crop and cfg.pad_pixels > 0:
        p = cfg.pad_pixels
        padded = np.pad(img, ((p, p), (p, p), (0, 0)))
        top, left = rng.integers(0, 2 * p + 1, size=2)
        img = padded[top : top + h, left : left + w]
    if cfg.erase_prob > 0 and rng.random() < cfg.erase_prob:
        box = random_erase_box(h, w, cfg, rng)
        if box is not None:
            top, left, eh, ew = box
            img = img.copy()
            img[top : top + eh, left : left + ew] = rng.random((eh, ew, img.shape[2]))
    if img is not record.pixels:
        img = np.ascontiguousarray(img, dtype=record.pixels.dtype)
    return replace(record, pixels=img)


# ---------------------------------------------------------------- PK sampling


@dataclass(frozen=True)
class BatchSpec:
    P: int = 4
    K: int = 4

    def __post_init__(self):
        if self.P < 2 or self.K < 2:
            raise ValueError("BatchSpec needs P >= 2 and K >= 2")

    @property
    def size(self) -> int:
        return self.P * self.K


@dataclass
class Batch:
    indices: np.ndarray  # dataset record indices, P*K
    labels: np.ndarray  # dense identity labels
    camids: np.ndarray
    images: np.ndarray  # B x H x W x 3


def pk_sample_indices(groups: dict[int, list[int]], spec: BatchSpec, rng: np.random.Generator) -> np.ndarray:
    pids = sorted(groups)
    if len(pids) < spec.P:
        raise SamplingError(f"need at least P={spec.P} identities, dataset has {len(pids)}")
    chosen = rng.choice(len(pids), size=spec.P, replace=False)
    out = []
    for c in chosen:
        members = groups[pids[c]]
        pick = rng.choice(len(members), size=spec.K, replace=len(members) < spec.K)
        out.extend(members[j] for j in pick)
    return np.asarray(out, dtype=np.int64)


def pk_sample(dataset: Dataset, spec: BatchSpec, rng: np.random.Generator) -> Batch:
    idx = pk_sample_indices(dataset.index_by_identity(), spec, rng)
    labels = dataset.labels()
    return Batch(idx, labels[idx], dataset.camids()[idx], dataset.images(idx))


def record_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    """Independent stream for one augmented sample, so worker count never matters."""
    return np.random.default_rng([seed, epoch, position, 0xA06])


def epoch_batches(
    dataset: Dataset,
    spec: BatchSpec,
    seed: int,
    epoch: int,
    aug: AugmentConfig | None = None,
) -> Iterator[Batch]:
    """``floor(N / (P*K))`` augmented PK batches, a pure function of ``(seed, epoch)``."""
    groups = dataset.index_by_identity()
    labels = dataset.labels()
    camids = dataset.camids()
    sampler = np.random.default_rng([seed, epoch, 0x5A3])
    for b in range(len(dataset) // spec.size):
        idx = pk_sample_indices(groups, spec, sampler)
        pixels = []
        for j, i in enumerate(idx):
            rec = dataset.records[i]
            if aug is not None:
                rec = augment(rec, aug, record_rng(seed, epoch, b * spec.size + j))
            pixels.append(rec.pixels)
        yield Batch(idx, labels[idx], camids[idx], np.stack(pixels))

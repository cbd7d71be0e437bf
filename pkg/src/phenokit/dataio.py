"""Dataset ingestion and a synthetic cell-painting generator.

On-disk layout (both for real exports and synthetic runs)::

    DIR/index.csv        Plate,Well,Site,Treatment,Role,Split,DNA,ER,RNA,AGP,Mito
    DIR/annotations.csv  treatment,annotation
    DIR/latents.csv      treatment,g0000,... (per-image morphology targets)
    DIR/images/...       one grayscale PNG per channel and site

Image paths in the index are relative to the index file.
"""
from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image

from ._util import atomic_write_text, parallel_map
from .errors import InputError
from .tensor import make_rng

logger = logging.getLogger(__name__)

CHANNELS = ("DNA", "ER", "RNA", "AGP", "Mito")
CONTROL_LABELS = ("DMSO", "EMPTY")
INDEX_COLUMNS = ("Plate", "Well", "Site", "Treatment", "Role", "Split") + CHANNELS
ROLES = ("control", "treated")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class IndexRecord:
    plate: str
    well: str
    site: str
    treatment: str
    role: str
    channel_paths: Mapping[str, Path] = field(hash=False)
    split: str = "train"

    @property
    def key(self) -> tuple[str, str, str]:
        return self.plate, self.well, self.site


def load_index(path, control_labels: Sequence[str] = CONTROL_LABELS) -> list[IndexRecord]:
    """Parse an index CSV; the treatment column may be ``Treatment`` or ``pert_name``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read index {path}: {exc}") from exc
    rows = list(csv.DictReader(text.splitlines()))
    if not text.strip() or not rows:
        raise InputError(f"index {path} has no records")
    header = set(rows[0].keys())
    treat_col = "Treatment" if "Treatment" in header else "pert_name" if "pert_name" in header else None
    missing = [c for c in ("Plate", "Well", "Site", *CHANNELS) if c not in header]
    if treat_col is None:
        missing.append("Treatment|pert_name")
    if missing:
        raise InputError(f"index {path} is missing columns: {', '.join(missing)}")

    base = path.parent
    records, seen = [], set()
    for lineno, row in enumerate(rows, start=2):
        treatment = row[treat_col]
        expected = "control" if treatment in control_labels else "treated"
        role = row.get("Role") or expected
        if role != expected:
            raise InputError(f"{path}:{lineno}: role {role!r} inconsistent with treatment {treatment!r}")
        split = row.get("Split") or "train"
        if split not in SPLITS:
            raise InputError(f"{path}:{lineno}: unknown split {split!r}")
        rec = IndexRecord(
            plate=row["Plate"], well=row["Well"], site=row["Site"], treatment=treatment, role=role,
            channel_paths={c: (base / row[c]) for c in CHANNELS}, split=split,
        )
        if rec.key in seen:
            raise InputError(f"{path}:{lineno}: duplicate plate/well/site {rec.key}")
        seen.add(rec.key)
        records.append(rec)
    return records


def write_index(records: Iterable[IndexRecord], path) -> None:
    path = Path(path)
    base = path.parent.resolve()
    lines = [",".join(INDEX_COLUMNS)]
    for r in records:
        rel = [Path(r.channel_paths[c]).resolve().relative_to(base).as_posix() for c in CHANNELS]
        lines.append(",".join([r.plate, r.well, r.site, r.treatment, r.role, r.split, *rel]))
    atomic_write_text(path, "\n".join(lines) + "\n")


class LabelEncoder:
    """Lexicographically ordered bijection between treatments and class indices."""

    def __init__(self, classes: Iterable[str]):
        self.classes = tuple(sorted(set(classes)))
        self._index = {c: i for i, c in enumerate(self.classes)}

    def __len__(self) -> int:
        return len(self.classes)

    def encode(self, treatment: str) -> int:
        return self._index[treatment]

    def decode(self, index: int) -> str:
        return self.classes[index]

    def transform(self, treatments: Iterable[str]) -> np.ndarray:
        return np.array([self._index[t] for t in treatments], dtype=np.int64)


def encode_labels(records: Sequence[IndexRecord]) -> LabelEncoder:
    if not records:
        raise InputError("cannot build a label encoder from zero records")
    return LabelEncoder(r.treatment for r in records)


def read_grayscale(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale image scaled to [0, 1] as float32."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            if mode == "L":
                divisor = 255.0
            elif mode in ("I;16", "I;16L", "I;16B", "I"):
                divisor = 65535.0
            else:
                raise InputError(f"{path}: expected a grayscale image, got mode {mode}")
            arr = np.asarray(img, dtype=np.float32)
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    return arr / np.float32(divisor)


def resize_bilinear(arr: np.ndarray, size: int) -> np.ndarray:
    if arr.shape == (size, size):
        return arr
    img = Image.fromarray(arr.astype(np.float32))
    return np.asarray(img.resize((size, size), Image.BILINEAR), dtype=np.float32)


def load_image_stack(record: IndexRecord, image_size: int) -> np.ndarray:
    """Channel-stacked float32 array [5, image_size, image_size] in canonical order."""
    planes = []
    for channel in CHANNELS:
        path = record.channel_paths.get(channel)
        if path is None or not Path(path).exists():
            raise InputError(f"missing {channel} image for {record.key}: {path}")
        planes.append(resize_bilinear(read_grayscale(path), image_size))
    return np.clip(np.stack(planes), 0.0, 1.0)


def read_vectors_csv(path, key: str = "treatment") -> tuple[list[str], np.ndarray]:
    """Read ``key,c0,c1,...`` rows into (keys, float64 matrix)."""
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            body = [row for row in reader if row]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if header is None or header[0] != key:
        raise InputError(f"{path}: first column must be {key!r}")
    keys = [row[0] for row in body]
    try:
        values = np.array([[float(v) for v in row[1:]] for row in body], dtype=np.float64)
    except ValueError as exc:
        raise InputError(f"{path}: non-numeric value ({exc})") from exc
    return keys, values.reshape(len(body), len(header) - 1)


def load_regression_targets(profile_source, records: Sequence[IndexRecord]) -> dict[str, np.ndarray]:
    """Per-treatment coordinate-wise median of the available morphology profiles.

    ``profile_source`` is either a path to a ``treatment,g0000,...`` CSV
    or a mapping from treatment to an array of profile rows. Even counts
    take the midpoint of the two central values.
    """
    if isinstance(profile_source, (str, Path)):
        keys, values = read_vectors_csv(profile_source)
        grouped: dict[str, list[np.ndarray]] = {}
        for k, v in zip(keys, values):
            grouped.setdefault(k, []).append(v)
        source = {k: np.stack(v) for k, v in grouped.items()}
    else:
        source = {k: np.atleast_2d(np.asarray(v, dtype=np.float64)) for k, v in profile_source.items()}
    needed = sorted({r.treatment for r in records})
    absent = [t for t in needed if t not in source or len(source[t]) == 0]
    if absent:
        raise InputError(f"no morphology profiles for treatments: {', '.join(absent)}")
    return {t: np.median(source[t], axis=0) for t in needed}


@dataclass
class TrainingSet:
    images: np.ndarray          # [N, 5, S, S] float32
    labels: np.ndarray          # [N] int64
    targets: np.ndarray         # [N, D] float32
    records: list[IndexRecord]
    encoder: LabelEncoder

    def __len__(self) -> int:
        return len(self.labels)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.images, self.labels, self.targets):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def load_images(records: Sequence[IndexRecord], image_size: int, workers: int | None = None) -> np.ndarray:
    stacks = parallel_map(lambda r: load_image_stack(r, image_size), records, workers)
    if not stacks:
        return np.zeros((0, len(CHANNELS), image_size, image_size), dtype=np.float32)
    return np.stack(stacks).astype(np.float32)


def load_dataset(data_dir, image_size: int, targets=None, splits: Sequence[str] = SPLITS,
                 control_labels: Sequence[str] = CONTROL_LABELS) -> TrainingSet:
    """Load index, images, labels and regression targets from a dataset directory."""
    data_dir = Path(data_dir)
    records = [r for r in load_index(data_dir / "index.csv", control_labels) if r.split in splits]
    if not records:
        raise InputError(f"{data_dir}: no records in splits {list(splits)}")
    encoder = encode_labels(records)
    medians = load_regression_targets(targets if targets is not None else data_dir / "latents.csv", records)
    return TrainingSet(
        images=load_images(records, image_size),
        labels=encoder.transform(r.treatment for r in records),
        targets=np.stack([medians[r.treatment] for r in records]).astype(np.float32),
        records=records,
        encoder=encoder,
    )


# --------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_moa_groups: int = 4
    treatments_per_group: int = 5
    wells_per_treatment: int = 2      # per plate
    sites_per_well: int = 2
    control_wells_per_plate: int = 4
    plates: int = 2
    image_size: int = 32
    channels: int = 5
    noise_sigma: float = 0.02
    plate_offset_sigma: float = 0.1   # std of per-plate, per-channel intensity offsets
    latent_dim: int = 32
    cells_per_site: int = 6
    control_label: str = "DMSO"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_moa_groups", "treatments_per_group", "wells_per_treatment", "sites_per_well",
                     "control_wells_per_plate", "plates", "image_size", "latent_dim", "cells_per_site"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.channels != len(CHANNELS):
            raise ValueError(f"channels must be {len(CHANNELS)} ({', '.join(CHANNELS)})")
        if self.noise_sigma < 0 or self.plate_offset_sigma < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.control_label not in CONTROL_LABELS:
            raise ValueError(f"control_label must be one of {CONTROL_LABELS}")

    @property
    def n_images(self) -> int:
        wells = self.n_moa_groups * self.treatments_per_group * self.wells_per_treatment
        return self.plates * (wells + self.control_wells_per_plate) * self.sites_per_well

    @property
    def n_treated_images(self) -> int:
        return (self.plates * self.n_moa_groups * self.treatments_per_group
                * self.wells_per_treatment * self.sites_per_well)


@dataclass
class SyntheticDataset:
    root: Path
    index: Path
    annotations: Path
    latents: Path
    treatment_latents: dict[str, np.ndarray]
    groups: dict[str, str]


def _well_names(n: int) -> list[str]:
    rows, cols = "ABCDEFGHIJKLMNOP", 24
    if n > len(rows) * cols:
        raise ValueError("more wells than a 384-well plate holds")
    return [f"{rows[i // cols]}{i % cols + 1:02d}" for i in range(n)]


def _render_site(params: np.ndarray, template: np.ndarray, size: int, noise: float,
                 rng: np.random.Generator, offset: np.ndarray | float = 0.0) -> np.ndarray:
    """Gaussian blob / ring cells whose per-channel look is set by ``params``.

    Cells sit at ``template`` positions displaced by ``100 * noise`` px
    jitter; brightness jitter and pixel noise also scale with ``noise``, so
    ``noise == 0`` renders identical sites for identical parameters.
    ``offset`` adds a per-channel intensity shift (the plate effect).
    """
    c = len(CHANNELS)
    amp = 0.35 + 0.25 * np.tanh(params[:c])
    sigma = 1.8 * np.exp(0.35 * np.tanh(params[c:2 * c]))
    ring = 0.5 * (1.0 + np.tanh(params[2 * c:3 * c]))
    background = 0.2 + 0.06 * np.tanh(params[3 * c:4 * c])

    n_cells = len(template)
    centres = template + 100.0 * noise * rng.standard_normal((n_cells, 2))
    jitter = 1.0 + 5.0 * noise * rng.standard_normal(n_cells)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = np.sqrt((yy[None] - centres[:, 0, None, None]) ** 2 + (xx[None] - centres[:, 1, None, None]) ** 2)

    img = np.empty((c, size, size))
    for ch in range(c):
        s = sigma[ch]
        blob = np.exp(-0.5 * (r / s) ** 2)
        annulus = np.exp(-0.5 * ((r - 1.5 * s) / (0.5 * s)) ** 2)
        cells = (1.0 - ring[ch]) * blob + ring[ch] * annulus
        img[ch] = background[ch] + amp[ch] * (jitter[:, None, None] * cells).sum(axis=0)
    img += np.broadcast_to(np.asarray(offset, dtype=np.float64), (c,))[:, None, None]
    if noise > 0:
        img += noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def gen_synthetic(spec: SyntheticSpec, out_dir) -> SyntheticDataset:
    """Write a deterministic synthetic screen to ``out_dir``.

    Every MoA group owns an orthogonal latent direction; a treatment's
    latent is its group direction plus a smaller private component. Latents
    map linearly to per-channel cell appearance (brightness, size, ring
    shape, background). Each plate adds its own per-channel intensity
    offset to every pixel, an additive batch effect shared by its controls.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out}: {exc}") from exc

    rng = make_rng(spec.seed)
    c, dim = len(CHANNELS), spec.latent_dim
    q, _ = np.linalg.qr(rng.standard_normal((dim, max(dim, spec.n_moa_groups))))
    group_dirs = q[:, :spec.n_moa_groups].T * np.sqrt(dim)
    mixing = rng.standard_normal((4 * c, dim)) / np.sqrt(dim)
    plate_offsets = spec.plate_offset_sigma * rng.standard_normal((spec.plates, c))
    margin = 3.0
    template = rng.uniform(margin, spec.image_size - 1 - margin, size=(spec.cells_per_site, 2))

    latents: dict[str, np.ndarray] = {}
    groups: dict[str, str] = {}
    for g in range(spec.n_moa_groups):
        for i in range(spec.treatments_per_group):
            name = f"moa{g}_cpd{i}"
            latents[name] = 0.9 * group_dirs[g] + 0.45 * rng.standard_normal(dim)
            groups[name] = f"MOA{g}"
    latents[spec.control_label] = np.zeros(dim)

    records: list[IndexRecord] = []
    latent_rows: list[tuple[str, np.ndarray]] = []
    for p in range(spec.plates):
        plate = f"Plate{p + 1:02d}"
        plate_dir = out / "images" / plate
        plate_dir.mkdir(parents=True, exist_ok=True)
        layout = [t for t in groups for _ in range(spec.wells_per_treatment)]
        layout += [spec.control_label] * spec.control_wells_per_plate
        order = rng.permutation(len(layout))
        wells = _well_names(len(layout))
        for pos, slot in enumerate(order):
            treatment, well = layout[slot], wells[pos]
            params = mixing @ latents[treatment]
            for s in range(spec.sites_per_well):
                site = str(s + 1)
                img = _render_site(params, template, spec.image_size, spec.noise_sigma, rng, plate_offsets[p])
                paths = {}
                for ch, channel in enumerate(CHANNELS):
                    fp = plate_dir / f"{well}_s{site}_{channel}.png"
                    Image.fromarray(np.round(img[ch] * 65535).astype(np.uint16)).save(fp)
                    paths[channel] = fp
                role = "control" if treatment == spec.control_label else "treated"
                records.append(IndexRecord(plate, well, site, treatment, role, paths, "train"))
                latent_rows.append((treatment, latents[treatment] + spec.noise_sigma * rng.standard_normal(dim)))

    write_index(records, out / "index.csv")
    atomic_write_text(out / "annotations.csv",
                      "treatment,annotation\n" + "".join(f"{t},{g}\n" for t, g in groups.items()))
    header = "treatment," + ",".join(f"g{i:04d}" for i in range(dim))
    body = "".join(t + "," + ",".join(f"{v:.9g}" for v in vec) + "\n" for t, vec in latent_rows)
    atomic_write_text(out / "latents.csv", header + "\n" + body)
    logger.info("wrote %d synthetic sites to %s", len(records), out)
    return SyntheticDataset(out, out / "index.csv", out / "annotations.csv", out / "latents.csv",
                            latents, groups)

"""Site/well/treatment profile tables, aggregation and batch correction.

The correction pipeline run by :func:`correct` is::

    site table --PCs(alpha)--> --mean--> well table --sphering--> --mean--> treatment table

where PCs subtracts ``alpha`` times the plate's mean control profile from
every row of that plate, and sphering is a ZCA whitening fitted on the
control wells of the whole run.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ._util import atomic_write_bytes, atomic_write_text
from .errors import InputError, InvariantError
from .tensor import tensor_from_bytes, tensor_to_bytes

logger = logging.getLogger(__name__)

LEVELS = ("site", "well", "treatment")


@dataclass(frozen=True)
class ProfileRow:
    plate: str | None
    well: str | None
    site: str | None
    treatment: str
    role: str
    vector: np.ndarray


@dataclass(frozen=True)
class ProfileTable:
    """Column-oriented profile table; ``vectors`` is [rows, dim] float64."""

    level: str
    plates: tuple
    wells: tuple
    sites: tuple
    treatments: tuple
    roles: tuple
    vectors: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.level not in LEVELS:
            raise InputError(f"unknown level {self.level!r}")
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 2:
            raise InputError("vectors must be a 2-D array")
        object.__setattr__(self, "vectors", vec)
        n = len(vec)
        for name in ("plates", "wells", "sites", "treatments", "roles"):
            col = tuple(getattr(self, name))
            object.__setattr__(self, name, col)
            if len(col) != n:
                raise InputError(f"column {name} has {len(col)} entries for {n} vectors")
        if not np.isfinite(vec).all():
            raise InputError("profile vectors must be finite")
        bad = set(self.roles) - {"control", "treated"}
        if bad:
            raise InputError(f"unknown roles {sorted(bad)}")
        keys = self.keys()
        if len(set(keys)) != n:
            raise InputError(f"duplicate {self.level}-level keys")

    @classmethod
    def from_rows(cls, level: str, rows: Sequence[ProfileRow], dim: int | None = None) -> "ProfileTable":
        vectors = np.array([r.vector for r in rows], dtype=np.float64)
        if not rows:
            vectors = np.zeros((0, dim or 0))
        return cls(level, tuple(r.plate for r in rows), tuple(r.well for r in rows),
                   tuple(r.site for r in rows), tuple(r.treatment for r in rows),
                   tuple(r.role for r in rows), vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.vectors)

    def keys(self) -> list[tuple]:
        if self.level == "site":
            return list(zip(self.plates, self.wells, self.sites))
        if self.level == "well":
            return list(zip(self.plates, self.wells))
        return [(t,) for t in self.treatments]

    def rows(self) -> Iterator[ProfileRow]:
        for i in range(len(self)):
            yield ProfileRow(self.plates[i], self.wells[i], self.sites[i], self.treatments[i],
                             self.roles[i], self.vectors[i])

    def with_vectors(self, vectors: np.ndarray) -> "ProfileTable":
        return ProfileTable(self.level, self.plates, self.wells, self.sites, self.treatments,
                            self.roles, vectors)

    def subset(self, mask) -> "ProfileTable":
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        pick = lambda col: tuple(col[i] for i in idx)  # noqa: E731
        return ProfileTable(self.level, pick(self.plates), pick(self.wells), pick(self.sites),
                            pick(self.treatments), pick(self.roles), self.vectors[idx])

    def is_control(self) -> np.ndarray:
        return np.array([r == "control" for r in self.roles], dtype=bool)

    def plate_ids(self) -> list[str]:
        return sorted({p for p in self.plates if p is not None})

    def check_controls(self) -> None:
        """Every plate must hold at least one control row."""
        if self.level == "treatment":
            return
        ctrl = self.is_control()
        for plate in self.plate_ids():
            if not any(c for p, c in zip(self.plates, ctrl) if p == plate):
                raise InputError(f"plate {plate} has no control wells")


# --------------------------------------------------------------------------
# aggregation


def _group_mean(vectors: np.ndarray, order: list[int]) -> np.ndarray:
    return vectors[order].mean(axis=0)


def aggregate(table: ProfileTable, to_level: str) -> ProfileTable:
    """Mean-aggregate to the next coarser level (site->well or well->treatment).

    Output rows are sorted by key and each group's members are summed in
    key order, so the result does not depend on input row order.
    """
    src, dst = LEVELS.index(table.level), LEVELS.index(to_level) if to_level in LEVELS else -1
    if dst != src + 1:
        raise InputError(f"cannot aggregate {table.level} -> {to_level}")

    if to_level == "well":
        group_key = lambda i: (table.plates[i], table.wells[i])  # noqa: E731
        member_key = lambda i: (table.sites[i],)  # noqa: E731
    else:
        group_key = lambda i: (table.treatments[i],)  # noqa: E731
        member_key = lambda i: (table.plates[i], table.wells[i])  # noqa: E731

    groups: dict[tuple, list[int]] = {}
    for i in range(len(table)):
        groups.setdefault(group_key(i), []).append(i)

    rows = []
    for key in sorted(groups):
        members = sorted(groups[key], key=member_key)
        roles = {table.roles[i] for i in members}
        if len(roles) > 1:
            raise InputError(f"group {key} mixes control and treated rows")
        treatments = {table.treatments[i] for i in members}
        if len(treatments) > 1:
            raise InputError(f"well {key} holds several treatments: {sorted(treatments)}")
        first = members[0]
        vec = _group_mean(table.vectors, members)
        if to_level == "well":
            rows.append(ProfileRow(key[0], key[1], None, table.treatments[first], table.roles[first], vec))
        else:
            rows.append(ProfileRow(None, None, None, key[0], table.roles[first], vec))
    return ProfileTable.from_rows(to_level, rows, table.dim)


# --------------------------------------------------------------------------
# phenotype correction


@dataclass(frozen=True)
class PcsConfig:
    alpha: float = 0.7

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def pcs_control_mean(table: ProfileTable, plate_id: str) -> np.ndarray:
    """Mean of all control rows (wells x sites) on one plate."""
    if table.level == "treatment":
        raise InputError("control means need site- or well-level rows")
    idx = [i for i, (p, r) in enumerate(zip(table.plates, table.roles)) if p == plate_id and r == "control"]
    if not idx:
        raise InputError(f"plate {plate_id} has no control wells")
    ordered = sorted(idx, key=lambda i: table.keys()[i])
    return table.vectors[ordered].mean(axis=0)


def pcs_apply(table: ProfileTable, alpha: float) -> ProfileTable:
    """Subtract ``alpha`` times the plate control mean from every row of that plate."""
    PcsConfig(alpha)
    if table.level == "treatment":
        raise InputError("phenotype correction applies to site- or well-level tables")
    table.check_controls()
    if alpha == 0.0:
        return table
    out = table.vectors.copy()
    plates = np.array(table.plates, dtype=object)
    for plate in table.plate_ids():
        out[plates == plate] -= alpha * pcs_control_mean(table, plate)
    return table.with_vectors(out)


# --------------------------------------------------------------------------
# sphering


@dataclass(frozen=True)
class Whitening:
    mean: np.ndarray
    matrix: np.ndarray
    epsilon: float

    def __post_init__(self):
        if not np.allclose(self.matrix, self.matrix.T, atol=1e-8, rtol=0):
            raise InvariantError("whitening matrix is not symmetric")


def sphering_fit(reference, epsilon: float | None = None) -> Whitening:
    """ZCA whitening ``U (L + eps I)^(-1/2) U^T`` of the reference covariance.

    ``reference`` is a [rows, dim] array or a ProfileTable. The covariance
    uses the unbiased (n - 1) normaliser. ``epsilon=None`` picks
    ``1e-3 * mean eigenvalue``.
    """
    x = reference.vectors if isinstance(reference, ProfileTable) else np.asarray(reference, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise InputError("sphering needs at least two reference rows")
    if epsilon is not None and epsilon < 0:
        raise InputError("epsilon must be nonnegative")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (len(x) - 1)
    if not np.isfinite(cov).all():
        raise InputError("reference covariance is not finite")
    evals, evecs = np.linalg.eigh(cov)
    evals = np.clip(evals, 0.0, None)
    if epsilon is None:
        epsilon = 1e-3 * float(evals.mean())
    with np.errstate(divide="ignore"):
        scale = 1.0 / np.sqrt(evals + epsilon)
    if not np.isfinite(scale).all():
        raise InputError("reference covariance is singular; use epsilon > 0")
    matrix = (evecs * scale) @ evecs.T
    matrix = 0.5 * (matrix + matrix.T)
    return Whitening(mean, matrix, float(epsilon))


def sphering_apply(table: ProfileTable, w: Whitening) -> ProfileTable:
    if table.dim != len(w.mean):
        raise InputError(f"table dim {table.dim} != whitening dim {len(w.mean)}")
    return table.with_vectors((table.vectors - w.mean) @ w.matrix.T)


@dataclass
class CorrectionResult:
    wells: ProfileTable          # after PCs and well aggregation, before sphering
    sphered_wells: ProfileTable
    treatments: ProfileTable
    whitening: Whitening


def correct(site_table: ProfileTable, alpha: float = 0.7, epsilon: float | None = None) -> CorrectionResult:
    """Site-level PCs, well means, sphering fitted on control wells, treatment means."""
    if site_table.level != "site":
        raise InputError("correct() expects a site-level table")
    wells = aggregate(pcs_apply(site_table, alpha), "well")
    controls = wells.subset(wells.is_control())
    whitening = sphering_fit(controls, epsilon)
    sphered = sphering_apply(wells, whitening)
    return CorrectionResult(wells, sphered, aggregate(sphered, "treatment"), whitening)


# --------------------------------------------------------------------------
# file formats


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def write_profiles_csv(table: ProfileTable, path) -> None:
    """``level,dim`` line, a column header, then one CSV row per profile."""
    buf = io.StringIO()
    buf.write(f"{table.level},{table.dim}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["plate", "well", "site", "treatment", "role", *[f"f{i:04d}" for i in range(table.dim)]])
    for row in table.rows():
        writer.writerow([row.plate or "", row.well or "", row.site or "", row.treatment, row.role,
                         *map(_fmt, row.vector)])
    atomic_write_text(path, buf.getvalue())


def read_profiles_csv(path) -> ProfileTable:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read profiles {path}: {exc}") from exc
    lines = text.splitlines()
    if len(lines) < 2:
        raise InputError(f"{path}: missing header lines")
    try:
        level, dim_text = lines[0].split(",")
        dim = int(dim_text)
    except ValueError as exc:
        raise InputError(f"{path}: first line must be 'level,dim'") from exc
    reader = csv.reader(lines[1:])
    header = next(reader)
    if header[:5] != ["plate", "well", "site", "treatment", "role"] or len(header) != 5 + dim:
        raise InputError(f"{path}: unexpected column header")
    rows = []
    for lineno, rec in enumerate(reader, start=3):
        if not rec:
            continue
        if len(rec) != 5 + dim:
            raise InputError(f"{path}:{lineno}: expected {5 + dim} fields, got {len(rec)}")
        try:
            vec = np.array([float(v) for v in rec[5:]])
        except ValueError as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
        rows.append(ProfileRow(rec[0] or None, rec[1] or None, rec[2] or None, rec[3], rec[4], vec))
    return ProfileTable.from_rows(level, rows, dim)


def write_profiles_binary(table: ProfileTable, path) -> None:
    """Lossless form: vectors as a tensor file, metadata in ``<path>.json``."""
    path = Path(path)
    atomic_write_bytes(path, tensor_to_bytes(table.vectors))
    meta = {"level": table.level, "dim": table.dim, "plates": table.plates, "wells": table.wells,
            "sites": table.sites, "treatments": table.treatments, "roles": table.roles}
    atomic_write_text(path.with_name(path.name + ".json"), json.dumps(meta, indent=1))


def read_profiles_binary(path) -> ProfileTable:
    path = Path(path)
    try:
        arr, _ = tensor_from_bytes(path.read_bytes(), 0, str(path))
        meta = json.loads(path.with_name(path.name + ".json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read profiles {path}: {exc}") from exc
    return ProfileTable(meta["level"], meta["plates"], meta["wells"], meta["sites"],
                        meta["treatments"], meta["roles"], arr.reshape(len(meta["roles"]), meta["dim"]))


def read_profiles(path) -> ProfileTable:
    """Dispatch on content: tensor payload or CSV."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(5)
    except OSError as exc:
        raise InputError(f"cannot read profiles {path}: {exc}") from exc
    return read_profiles_binary(path) if head == b"PTNS1" else read_profiles_csv(path)

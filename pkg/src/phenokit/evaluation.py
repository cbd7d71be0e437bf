"""Biological-matching metrics over treatment-level profiles.

Every treated treatment queries all other treated treatments by cosine
similarity. A retrieved treatment is relevant when it shares at least one
annotation (MoA or pathway) with the query.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .errors import InputError
from .profiles import ProfileTable

RECALL_KS = (1, 3, 5, 10)
IMAD_CLAMP = 1e9


def read_annotations(path) -> dict[str, frozenset[str]]:
    """CSV ``treatment,annotation``; repeated treatments accumulate a set."""
    sets: dict[str, set[str]] = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or not {"treatment", "annotation"} <= set(reader.fieldnames):
                raise InputError(f"{path}: need columns treatment,annotation")
            for row in reader:
                if row["annotation"]:
                    sets.setdefault(row["treatment"], set()).add(row["annotation"])
    except OSError as exc:
        raise InputError(f"cannot read annotations {path}: {exc}") from exc
    if not sets:
        raise InputError(f"{path}: no annotations")
    return {k: frozenset(v) for k, v in sets.items()}


@dataclass(frozen=True)
class RankedList:
    query: str
    items: tuple[str, ...]
    similarities: np.ndarray = field(repr=False)
    relevance: np.ndarray = field(repr=False)

    @property
    def n_relevant(self) -> int:
        return int(self.relevance.sum())


def cosine_matrix(vectors: np.ndarray, names: Sequence[str] | None = None) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        who = names[zero[0]] if names is not None else f"row {zero[0]}"
        raise InputError(f"zero-norm profile for {who}")
    unit = vectors / norms[:, None]
    return np.clip(unit @ unit.T, -1.0, 1.0)


def rank_by_similarity(names: Sequence[str], sims: np.ndarray) -> np.ndarray:
    """Indices sorted by descending similarity, ties by ascending name."""
    return np.array(sorted(range(len(names)), key=lambda i: (-sims[i], names[i])), dtype=np.int64)


def cosine_rank(table: ProfileTable, annotations: Mapping[str, frozenset]) -> list[RankedList]:
    """One ranked list per treated query that has at least one relevant partner."""
    if table.level != "treatment":
        raise InputError("cosine_rank expects a treatment-level table")
    treated = table.subset(~table.is_control())
    names = list(treated.treatments)
    if len(names) < 2:
        raise InputError("need at least two treated treatments")
    missing = [t for t in names if t not in annotations]
    if missing:
        raise InputError(f"treatments without annotations: {missing[:5]}")
    return rank_lists(names, cosine_matrix(treated.vectors, names), annotations)


def rank_lists(names: Sequence[str], sims: np.ndarray, annotations: Mapping[str, frozenset]) -> list[RankedList]:
    """Rank every other name for each query from a square similarity matrix."""
    lists = []
    for q, query in enumerate(names):
        others = [i for i in range(len(names)) if i != q]
        order = [others[j] for j in rank_by_similarity([names[i] for i in others], sims[q, others])]
        rel = np.array([bool(annotations[query] & annotations[names[i]]) for i in order])
        if not rel.any():
            continue
        lists.append(RankedList(query, tuple(names[i] for i in order), sims[q, order], rel))
    return lists


# --------------------------------------------------------------------------
# enrichment


def top_count(n: int, top_frac: float) -> int:
    if not 0.0 < top_frac <= 1.0:
        raise ValueError("top_frac must lie in (0, 1]")
    # round first so that e.g. 0.01 * 300 does not ceil to 4
    return max(1, math.ceil(round(top_frac * n, 9)))


def contingency(relevance: np.ndarray, top_frac: float = 0.01) -> tuple[int, int, int, int]:
    """(a, b, c, d): relevant/irrelevant above the cutoff, relevant/irrelevant below."""
    rel = np.asarray(relevance, dtype=bool)
    if rel.size == 0:
        raise InputError("empty ranked list")
    k = top_count(rel.size, top_frac)
    a = int(rel[:k].sum())
    c = int(rel[k:].sum())
    return a, k - a, c, rel.size - k - c


def odds_ratio(a: float, b: float, c: float, d: float) -> float:
    """Sample odds ratio a*d / (b*c), adding 0.5 to every cell if any is zero."""
    if min(a, b, c, d) == 0:
        a, b, c, d = a + 0.5, b + 0.5, c + 0.5, d + 0.5
    return (a * d) / (b * c)


def foe(lists: Sequence[RankedList], top_frac: float = 0.01) -> float:
    """Folds of enrichment: mean per-query odds ratio at the top-fraction cutoff."""
    if not lists:
        raise InputError("no ranked lists")
    return math.fsum(odds_ratio(*contingency(r.relevance, top_frac)) for r in lists) / len(lists)


# --------------------------------------------------------------------------
# precision / recall


def average_precision(relevance) -> float:
    """Mean interpolated precision over the recall points 1/R, ..., 1.

    Interpolated precision at recall r is the best precision at any rank
    whose recall is at least r; that maximum is always attained at a
    relevant rank, so only those are scanned.
    """
    rel = np.asarray(relevance, dtype=bool)
    hits = np.flatnonzero(rel) + 1
    if hits.size == 0:
        raise InputError("average precision needs at least one relevant item")
    precision = np.arange(1, hits.size + 1) / hits
    interpolated = np.maximum.accumulate(precision[::-1])[::-1]
    return math.fsum(interpolated.tolist()) / hits.size


def mean_average_precision(lists: Sequence[RankedList]) -> float:
    if not lists:
        raise InputError("no ranked lists")
    return math.fsum(average_precision(r.relevance) for r in lists) / len(lists)


def first_hit_rank(relevance) -> int:
    """1-based rank of the first relevant item (0 if none)."""
    hits = np.flatnonzero(np.asarray(relevance, dtype=bool))
    return int(hits[0]) + 1 if hits.size else 0


def recall_at_k(lists: Sequence[RankedList], k: int) -> float:
    """Fraction of queries with a relevant item among the top k."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not lists:
        return 0.0
    return sum(1 for r in lists if r.relevance[:k].any()) / len(lists)


# --------------------------------------------------------------------------
# cluster tightness


def pca_reduce(x: np.ndarray, variance: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Scores on the fewest principal axes explaining ``variance``; also returns singular values."""
    xc = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    var = s ** 2
    total = var.sum()
    if total == 0:
        return np.zeros((len(x), 1)), s[:1]
    rank = int(np.searchsorted(np.cumsum(var) / total, variance - 1e-12) + 1)
    rank = min(rank, len(s))
    return u[:, :rank] * s[:rank], s[:rank]


def pca2(scores: np.ndarray) -> np.ndarray:
    """First two principal scores (zero-padded when rank < 2)."""
    out = np.zeros((len(scores), 2))
    m = min(2, scores.shape[1])
    out[:, :m] = scores[:, :m]
    return out


def pca2_whitened(scores: np.ndarray) -> np.ndarray:
    out = pca2(scores)
    sd = out.std(axis=0)
    return np.divide(out, sd, out=np.zeros_like(out), where=sd > 0)


EMBEDDERS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"pca2": pca2, "pca2_whitened": pca2_whitened}


def mad(values: np.ndarray) -> float:
    med = np.median(values)
    return float(np.median(np.abs(values - med)))


def imad(wells, embedder: str | Callable = "pca2", coords: np.ndarray | None = None) -> float:
    """Inverse median absolute deviation of pairwise 2-D distances.

    ``wells`` is a well-level ProfileTable or a [n, dim] array. The vectors
    are reduced to the principal axes retaining 95% of the variance and
    then embedded in 2-D; ``coords`` bypasses both steps.
    """
    x = wells.vectors if isinstance(wells, ProfileTable) else np.asarray(wells, dtype=np.float64)
    if coords is None:
        if len(x) < 3:
            raise InputError("IMAD needs at least three wells")
        fn = EMBEDDERS[embedder] if isinstance(embedder, str) else embedder
        coords = fn(pca_reduce(x)[0])
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2 or len(coords) < 3:
        raise InputError("IMAD needs at least three 2-D points")
    spread = mad(pdist(coords))
    if spread < 1.0 / IMAD_CLAMP:
        warnings.warn("pairwise distances have zero spread; IMAD clamped", RuntimeWarning, stacklevel=2)
        return IMAD_CLAMP
    return 1.0 / spread


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    foe: float
    map: float
    recall_at: dict[int, float]
    imad: float | None = None
    per_query: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.map <= 1.0 or self.foe < 0:
            raise InputError("report values out of range")
        if any(not 0.0 <= v <= 1.0 for v in self.recall_at.values()):
            raise InputError("recall values must lie in [0, 1]")

    def to_dict(self) -> dict:
        out = {"foe": self.foe, "map": self.map}
        out.update({f"recall@{k}": v for k, v in sorted(self.recall_at.items())})
        out["imad"] = self.imad
        out["per_query"] = self.per_query
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        try:
            recall = {int(k.split("@")[1]): float(v) for k, v in data.items() if k.startswith("recall@")}
            return cls(float(data["foe"]), float(data["map"]), recall, data.get("imad"), data.get("per_query", []))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"malformed report: {exc}") from exc

    @classmethod
    def load(cls, path) -> "EvalReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read report {path}: {exc}") from exc


def evaluate(table: ProfileTable, annotations: Mapping[str, frozenset], top_frac: float = 0.01,
             ks: Sequence[int] = RECALL_KS, wells: ProfileTable | None = None) -> EvalReport:
    lists = cosine_rank(table, annotations)
    if not lists:
        raise InputError("no query has a relevant partner")
    per_query = [_query_summary(r, top_frac) for r in lists]
    return EvalReport(foe(lists, top_frac), mean_average_precision(lists),
                      {k: recall_at_k(lists, k) for k in ks},
                      imad(wells) if wells is not None else None, per_query)


def _query_summary(r: RankedList, top_frac: float) -> dict:
    return {"query": r.query, "average_precision": average_precision(r.relevance),
            "odds_ratio": odds_ratio(*contingency(r.relevance, top_frac)),
            "first_hit_rank": first_hit_rank(r.relevance)}


def permuted_annotations(annotations: Mapping[str, frozenset], names: Sequence[str],
                         rng: np.random.Generator) -> dict[str, frozenset]:
    """Shuffle annotation sets among ``names`` (label-permutation null)."""
    names = list(names)
    perm = rng.permutation(len(names))
    out = dict(annotations)
    out.update({names[i]: annotations[names[j]] for i, j in enumerate(perm)})
    return out


def permutation_baseline_map(table: ProfileTable, annotations: Mapping[str, frozenset],
                             n_perm: int = 100, seed: int = 0) -> float:
    """Mean MAP over label permutations of the treated treatments."""
    rng = np.random.default_rng(seed)
    names = [t for t, r in zip(table.treatments, table.roles) if r == "treated"]
    vals = []
    for _ in range(n_perm):
        lists = cosine_rank(table, permuted_annotations(annotations, names, rng))
        if lists:
            vals.append(mean_average_precision(lists))
    return float(np.mean(vals))

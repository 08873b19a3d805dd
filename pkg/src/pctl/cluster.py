"""Per-epoch k-means over momentum embeddings and the prototype bank built from it."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .encoder import DOMAINS, SOURCE, TARGET

logger = logging.getLogger(__name__)

PHI_FLOOR = 1e-8
MAX_LLOYD_ITERS = 100
# absolute slack for the monotone-objective assertion (float reassociation of means)
OBJECTIVE_SLACK = 1e-9


class ClusteringError(ValueError):
    pass


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective: float
    history: list[float]
    converged: bool


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    out = np.empty((len(points), len(centroids)))
    for j, c in enumerate(centroids):
        diff = points - c
        out[:, j] = np.einsum("nd,nd->n", diff, diff)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = [int(rng.integers(n))]
    best = _sq_dists(points, points[chosen])[:, 0]
    for _ in range(1, k):
        total = best.sum()
        if total > 0:
            idx = int(rng.choice(n, p=best / total))
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        best = np.minimum(best, _sq_dists(points, points[idx : idx + 1])[:, 0])
    return points[chosen].copy()


def _update(points: np.ndarray, assign: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    k, d = centroids.shape
    counts = np.bincount(assign, minlength=k)
    sums = np.zeros((k, d))
    np.add.at(sums, assign, points)
    new = centroids.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    empty = np.flatnonzero(~filled)
    if empty.size:
        # reseed each empty cluster at the point farthest from its own centroid
        dist = np.sum((points - new[assign]) ** 2, axis=1)
        for j in empty:
            far = int(np.argmax(dist))
            new[j] = points[far]
            dist[far] = -1.0
        logger.debug("kmeans: reseeded %d empty cluster(s)", empty.size)
    return new


def kmeans(points, k: int, seed) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    Stops at an assignment fixpoint or after 100 iterations. Equidistant points
    go to the lowest cluster index. The objective (sum of squared distances) is
    checked to be non-increasing at every iteration.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k <= 0:
        raise ClusteringError(f"k must be positive, got {k}")
    if n < k:
        raise ClusteringError(f"need at least k={k} points, got {n}")
    if not np.all(np.isfinite(x)):
        raise ClusteringError("points must be finite")
    distinct = len(np.unique(x, axis=0))
    if distinct < k:
        raise ClusteringError(f"only {distinct} distinct points for k={k} clusters")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    dist = _sq_dists(x, centroids)
    assign = np.argmin(dist, axis=1)
    objective = float(dist[np.arange(n), assign].sum())
    history = [objective]
    converged = False
    for _ in range(MAX_LLOYD_ITERS):
        centroids = _update(x, assign, centroids)
        dist = _sq_dists(x, centroids)
        new_assign = np.argmin(dist, axis=1)
        objective = float(dist[np.arange(n), new_assign].sum())
        if objective > history[-1] + OBJECTIVE_SLACK * max(1.0, history[-1]):
            raise AssertionError(f"kmeans objective increased: {history[-1]!r} -> {objective!r}")
        history.append(objective)
        if np.array_equal(new_assign, assign):
            converged = True
            break
        assign = new_assign
    if not converged:
        # centroids must be the means of the final partition
        centroids = _update(x, assign, centroids)
        dist = _sq_dists(x, centroids)
        objective = float(dist[np.arange(n), assign].sum())
    return KMeansResult(centroids, assign, objective, history, converged)


def concentration(points, centroids, assignments, alpha: float, tau_prime: float) -> np.ndarray:
    """Per-cluster concentration, rescaled so the values average to ``tau_prime``.

    The raw value for cluster i is the mean distance of its members to the
    centroid divided by ``ln(|C_i| + alpha)``. Singleton clusters take the
    largest raw value of the multi-member clusters, and raw values are floored
    at 1e-8 before the single rescale.
    """
    if alpha <= 0 or tau_prime <= 0:
        raise ClusteringError("alpha and tau_prime must be positive")
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim == 1:
        c = c[:, None]
    assign = np.asarray(assignments)
    k = len(c)
    counts = np.bincount(assign, minlength=k)
    if np.any(counts == 0):
        raise ClusteringError(f"empty cluster(s) {np.flatnonzero(counts == 0).tolist()} after repair")
    dist = np.sqrt(np.sum((x - c[assign]) ** 2, axis=1))
    totals = np.bincount(assign, weights=dist, minlength=k)
    raw = totals / (counts * np.log(counts + alpha))
    # a singleton has no spread; it borrows the loosest multi-member cluster's value
    single = counts == 1
    if np.any(single) and np.any(~single):
        raw[single] = raw[~single].max()
    raw = np.maximum(raw, PHI_FLOOR)
    return raw * (tau_prime / raw.mean())


def unit_rows(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return np.where(norm > 0, x / np.where(norm > 0, norm, 1.0), 0.0)


def nearest_prototype(unit_points: np.ndarray, unit_protos: np.ndarray) -> np.ndarray:
    """Index of the highest-cosine prototype per row (ties go to the lowest index)."""
    return np.argmax(unit_points @ unit_protos.T, axis=1)


@dataclass
class ClusteringRound:
    m: int
    k: int
    centroids: np.ndarray
    assignments: np.ndarray
    concentration: np.ndarray
    raw_centroids: np.ndarray
    ids: np.ndarray
    objective: float = 0.0

    @property
    def unit_centroids(self) -> np.ndarray:
        return unit_rows(self.centroids)

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignments, minlength=self.k)


@dataclass
class PrototypeBank:
    """Prototypes of both domains for one epoch.

    ``nearest[(anchor_domain, proto_domain)][m]`` maps each anchor-domain
    sample (in ``ids[anchor_domain]`` order) to its closest prototype of
    round m in ``proto_domain``.
    """

    epoch: int
    schedule: tuple[int, ...]
    rounds: dict[str, list[ClusteringRound]]
    ids: dict[str, np.ndarray]
    nearest: dict[tuple[str, str], list[np.ndarray]]
    _row: dict[str, dict[int, int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._row = {dom: {int(i): r for r, i in enumerate(ids)} for dom, ids in self.ids.items()}

    @property
    def M(self) -> int:
        return len(self.schedule)

    def rows_of(self, domain: str, sample_ids) -> np.ndarray:
        table = self._row[domain]
        try:
            return np.array([table[int(i)] for i in sample_ids], dtype=np.intp)
        except KeyError as exc:
            raise KeyError(f"sample id {exc.args[0]} has no nearest-prototype entry in the {domain} bank") from None

    def positives(self, anchor_domain: str, proto_domain: str, m: int, sample_ids) -> np.ndarray:
        return self.nearest[(anchor_domain, proto_domain)][m][self.rows_of(anchor_domain, sample_ids)]

    def to_dump(self) -> dict:
        return {
            "epoch": self.epoch,
            "schedule": list(self.schedule),
            "domains": {
                dom: [
                    {
                        "m": r.m,
                        "k": r.k,
                        "sizes": r.sizes.tolist(),
                        "concentration": r.concentration.tolist(),
                        "centroids": r.centroids.tolist(),
                        "objective": r.objective,
                    }
                    for r in rounds
                ]
                for dom, rounds in self.rounds.items()
            },
        }


def write_bank_dump(bank: PrototypeBank, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bank.to_dump(), fh, indent=1)


def round_seed(seed: int, m: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(m)])


def build_prototype_bank(
    embeddings: Mapping[str, tuple[Sequence[int], np.ndarray]],
    schedule: Sequence[int],
    seed: int,
    epoch: int,
    alpha: float = 10.0,
    tau_prime: float = 0.2,
) -> PrototypeBank:
    """Cluster each domain's normalised momentum embeddings once per round.

    ``embeddings`` maps domain -> (sample ids, raw momentum embeddings). The
    k-means seed depends only on ``(seed, m)``, so identical domains give
    identical prototypes.
    """
    schedule = tuple(int(k) for k in schedule)
    if not schedule:
        raise ClusteringError("cluster schedule must be non-empty")
    rounds: dict[str, list[ClusteringRound]] = {}
    ids: dict[str, np.ndarray] = {}
    units: dict[str, np.ndarray] = {}
    for dom in DOMAINS:
        if dom not in embeddings:
            continue
        dom_ids, raw = embeddings[dom]
        raw = np.asarray(raw, dtype=np.float64)
        ids[dom] = np.asarray(dom_ids, dtype=np.int64)
        if len(ids[dom]) != len(raw):
            raise ClusteringError(f"{dom}: {len(ids[dom])} ids for {len(raw)} embeddings")
        units[dom] = unit_rows(raw)
        rounds[dom] = []
        for m, k in enumerate(schedule):
            if len(raw) < k:
                raise ClusteringError(f"round m={m + 1}: k={k} exceeds the {len(raw)} {dom} samples")
            res = kmeans(units[dom], k, round_seed(seed, m))
            phi = concentration(units[dom], res.centroids, res.assignments, alpha, tau_prime)
            counts = np.bincount(res.assignments, minlength=k)
            raw_sums = np.zeros((k, raw.shape[1]))
            np.add.at(raw_sums, res.assignments, raw)
            rounds[dom].append(
                ClusteringRound(
                    m=m + 1,
                    k=k,
                    centroids=res.centroids,
                    assignments=res.assignments,
                    concentration=phi,
                    raw_centroids=raw_sums / counts[:, None],
                    ids=ids[dom],
                    objective=res.objective,
                )
            )
    nearest: dict[tuple[str, str], list[np.ndarray]] = {}
    for a in rounds:
        for p in rounds:
            nearest[(a, p)] = [nearest_prototype(units[a], r.unit_centroids) for r in rounds[p]]
    return PrototypeBank(epoch=epoch, schedule=schedule, rounds=rounds, ids=ids, nearest=nearest)


__all__ = [
    "ClusteringError",
    "ClusteringRound",
    "KMeansResult",
    "PrototypeBank",
    "SOURCE",
    "TARGET",
    "build_prototype_bank",
    "concentration",
    "kmeans",
    "nearest_prototype",
    "unit_rows",
    "write_bank_dump",
]

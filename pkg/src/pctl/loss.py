"""Contrastive and classification objectives as differentiable graphs.

All functions work on whole batches. Anchor embeddings enter as raw encoder
outputs (graph tensors); the domain-level losses L2-normalise them, the
momentum keys and the prototypes before taking any similarity.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .cluster import PrototypeBank, unit_rows
from .encoder import SOURCE, TARGET
from .numcore import Tensor

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9
DEFAULT_LAMBDA = 1.0 / 32

# fault-injection hooks used by the verification command
_faults: set[str] = set()


@contextlib.contextmanager
def inject_fault(name: str):
    _faults.add(name)
    try:
        yield
    finally:
        _faults.discard(name)


class LossConfigError(ValueError):
    pass


def check_prototype_capacity(k: int, r_prime: int, m: int | None = None) -> None:
    """A round with k prototypes can supply one positive plus at most k-1 negatives."""
    if k < r_prime + 1:
        where = f" (round m={m})" if m is not None else ""
        raise LossConfigError(
            f"k={k}{where} is below the minimum k={r_prime + 1}: drawing {r_prime} negative prototypes "
            f"plus one positive needs at least r'+1 clusters"
        )


def _as_scale(inv_temp) -> Tensor:
    t = nc.as_tensor(inv_temp)
    v = float(t.data)
    if not 0.0 < v <= 100.0:
        raise LossConfigError(f"inverse temperature {v} outside (0, 100]")
    return t


def _require_unit(name: str, rows: np.ndarray) -> None:
    norms = np.linalg.norm(rows, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"{name}: rows must be unit-norm within {UNIT_TOL}")


def _contrastive_sum(anchors: Tensor, keys: np.ndarray, idx: np.ndarray, scale) -> Tensor:
    """Sum over rows of ``-log softmax(scale * sim)[0]`` where column 0 of idx is the positive."""
    sim = nc.matmul(anchors, Tensor(np.ascontiguousarray(keys.T)))
    logits = nc.mul(nc.gather(sim, idx), scale)
    return nc.sum(nc.sub(nc.logsumexp(logits), nc.select(logits, 0)))


def _stack_idx(positive, negatives) -> np.ndarray:
    pos = np.asarray(positive, dtype=np.intp)
    neg = np.asarray(negatives, dtype=np.intp).reshape(len(pos), -1)
    if np.any(neg == pos[:, None]):
        raise ValueError("positive index appears among the negatives")
    return np.concatenate([pos[:, None], neg], axis=1)


def info_nce(anchors: Tensor, keys, positive_idx, negative_idx, inv_temp) -> Tensor:
    """Instance-level InfoNCE summed over anchors.

    Row i contrasts ``anchors[i]`` against ``keys[positive_idx[i]]`` (which is
    part of the denominator) and ``keys[negative_idx[i, :]]``. Anchors and keys
    must already be unit rows.
    """
    anchors = nc.as_tensor(anchors)
    keys = np.asarray(keys.data if isinstance(keys, Tensor) else keys, dtype=np.float64)
    _require_unit("info_nce anchors", anchors.data)
    _require_unit("info_nce keys", keys)
    idx = _stack_idx(positive_idx, negative_idx)
    out = _contrastive_sum(anchors, keys, idx, _as_scale(inv_temp))
    if "info_nce_sign" in _faults:
        out = nc.reverse_grad(out)
    return out


def proto_term(anchors: Tensor, prototypes, phi, positive_idx, negative_idx) -> Tensor:
    """Prototype contrast summed over anchors; each prototype j uses 1/phi_j as its scale."""
    anchors = nc.as_tensor(anchors)
    protos = np.asarray(prototypes, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    _require_unit("proto_term anchors", anchors.data)
    _require_unit("proto_term prototypes", protos)
    if phi.shape != (len(protos),) or np.any(phi <= 0):
        raise ValueError("concentration values must be positive, one per prototype")
    idx = _stack_idx(positive_idx, negative_idx)
    check_prototype_capacity(len(protos), idx.shape[1] - 1)
    return _contrastive_sum(anchors, protos, idx, Tensor(1.0 / phi[idx]))


# ---------------------------------------------------------------------------
# negatives
# ---------------------------------------------------------------------------


@dataclass
class NegativeSet:
    """Per-anchor negatives for one domain in one batch.

    ``instance[i]`` holds batch rows (never i); ``prototypes[m][i]`` holds
    prototype indices of round m (never the anchor's positive).
    """

    instance: np.ndarray | None
    prototypes: list[np.ndarray]
    short_pool: bool = False


STREAMS = {
    (SOURCE, "intra"): 1,
    (TARGET, "intra"): 2,
    (SOURCE, "inter"): 3,
    (TARGET, "inter"): 4,
}


def _draw_excluding(rng: np.random.Generator, pool: int, count: int, skip: int) -> np.ndarray:
    picks = rng.choice(pool - 1, size=count, replace=False)
    return np.where(picks >= skip, picks + 1, picks)


def sample_negatives(
    n: int,
    positives: Sequence[np.ndarray],
    ks: Sequence[int],
    r: int | None,
    r_prime: int,
    *,
    seed: int,
    epoch: int,
    batch_index: int,
    stream: int,
) -> NegativeSet:
    """Draw negatives uniformly without replacement, one RNG per sample.

    Each sample's generator is keyed by (seed, epoch, batch, sample, stream).
    Instance negatives come from the other ``n - 1`` batch rows (all of them
    when fewer than r exist). Pass ``r=None`` to skip instance negatives.
    """
    for m, k in enumerate(ks):
        check_prototype_capacity(k, r_prime, m + 1)
    short = False
    inst = None
    if r is not None:
        r_eff = min(r, n - 1)
        if r_eff < r:
            short = True
            if n == 1:
                logger.warning("batch of size 1: instance term reduces to the positive alone")
            else:
                logger.info("instance pool of %d is smaller than r=%d", n - 1, r)
        inst = np.empty((n, r_eff), dtype=np.intp)
    protos = [np.empty((n, r_prime), dtype=np.intp) for _ in ks]
    for i in range(n):
        rng = np.random.default_rng([seed, epoch, batch_index, i, stream])
        if inst is not None:
            inst[i] = _draw_excluding(rng, n, inst.shape[1], i)
        for m, k in enumerate(ks):
            protos[m][i] = _draw_excluding(rng, k, r_prime, int(positives[m][i]))
    return NegativeSet(inst, protos, short)


# ---------------------------------------------------------------------------
# domain-level losses
# ---------------------------------------------------------------------------


@dataclass
class DomainBatch:
    domain: str
    online: Tensor
    momentum: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        self.ids = np.asarray(self.ids)
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError(f"{self.domain}: labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class BatchNegatives:
    intra: dict[str, NegativeSet]
    inter: dict[str, NegativeSet]


def draw_batch_negatives(
    source: DomainBatch,
    target: DomainBatch,
    bank: PrototypeBank,
    r: int,
    r_prime: int,
    *,
    seed: int,
    epoch: int,
    batch_index: int,
) -> BatchNegatives:
    other = {SOURCE: TARGET, TARGET: SOURCE}
    intra, inter = {}, {}
    for batch in (source, target):
        dom = batch.domain
        own = [bank.positives(dom, dom, m, batch.ids) for m in range(bank.M)]
        intra[dom] = sample_negatives(
            len(batch), own, bank.schedule, r, r_prime,
            seed=seed, epoch=epoch, batch_index=batch_index, stream=STREAMS[(dom, "intra")],
        )
        cross = [bank.positives(dom, other[dom], m, batch.ids) for m in range(bank.M)]
        inter[dom] = sample_negatives(
            len(batch), cross, bank.schedule, None, r_prime,
            seed=seed, epoch=epoch, batch_index=batch_index, stream=STREAMS[(dom, "inter")],
        )
    return BatchNegatives(intra, inter)


def _check_epoch(bank: PrototypeBank, epoch: int | None) -> None:
    if epoch is not None and bank.epoch != epoch:
        raise RuntimeError(f"prototype bank is from epoch {bank.epoch}, current epoch is {epoch}")


def _prototype_average(anchors: Tensor, batch: DomainBatch, bank: PrototypeBank, proto_domain: str, negs: NegativeSet) -> Tensor:
    total = None
    for m, rnd in enumerate(bank.rounds[proto_domain]):
        pos = bank.positives(batch.domain, proto_domain, m, batch.ids)
        term = proto_term(anchors, rnd.unit_centroids, rnd.concentration, pos, negs.prototypes[m])
        total = term if total is None else nc.add(total, term)
    return nc.scale(total, 1.0 / bank.M)


def _proto_nce(batch: DomainBatch, bank: PrototypeBank, negs: NegativeSet, inv_temp, proto_weight: float):
    anchors = nc.l2_normalize(batch.online)
    keys = unit_rows(batch.momentum)
    inst = info_nce(anchors, keys, np.arange(len(batch)), negs.instance, inv_temp)
    proto = _prototype_average(anchors, batch, bank, batch.domain, negs)
    return nc.add(inst, nc.scale(proto, proto_weight)), inst, proto


def intra_domain_loss(
    source: DomainBatch,
    target: DomainBatch,
    bank: PrototypeBank,
    negatives: BatchNegatives,
    inv_temp,
    *,
    proto_weight: float = 1.0,
    epoch: int | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """ProtoNCE applied to each domain on its own; returns L_Intra and its parts."""
    _check_epoch(bank, epoch)
    l_target, inst_t, proto_t = _proto_nce(target, bank, negatives.intra[TARGET], inv_temp, proto_weight)
    l_source, inst_s, proto_s = _proto_nce(source, bank, negatives.intra[SOURCE], inv_temp, proto_weight)
    intra = nc.add(l_target, l_source)
    parts = {
        "info_nce_target": inst_t,
        "info_nce_source": inst_s,
        "proto_target": proto_t,
        "proto_source": proto_s,
        "target": l_target,
        "source": l_source,
        "intra": intra,
    }
    return intra, parts


def inter_domain_loss(
    source: DomainBatch,
    target: DomainBatch,
    bank: PrototypeBank,
    negatives: BatchNegatives,
    *,
    epoch: int | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Source anchors against target prototypes and vice versa; returns L_Inter and parts."""
    _check_epoch(bank, epoch)
    s2t = _prototype_average(nc.l2_normalize(source.online), source, bank, TARGET, negatives.inter[SOURCE])
    t2s = _prototype_average(nc.l2_normalize(target.online), target, bank, SOURCE, negatives.inter[TARGET])
    inter = nc.add(s2t, t2s)
    return inter, {"s2t": s2t, "t2s": t2s, "inter": inter}


@dataclass
class LossBreakdown:
    info_nce_target: float = 0.0
    info_nce_source: float = 0.0
    proto_target: float = 0.0
    proto_source: float = 0.0
    target: float = 0.0
    source: float = 0.0
    intra: float = 0.0
    s2t: float = 0.0
    t2s: float = 0.0
    inter: float = 0.0
    dual: float = 0.0
    ce_target: float = 0.0
    ce_proto_target: float = 0.0
    ce_source: float = 0.0
    ce_proto_source: float = 0.0
    l_t: float = 0.0
    l_s: float = 0.0
    total: float = 0.0
    lam: float = DEFAULT_LAMBDA

    @classmethod
    def from_tensors(cls, parts: dict[str, Tensor], lam: float) -> "LossBreakdown":
        return cls(lam=lam, **{k: v.item() for k, v in parts.items()})

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def identity_residuals(self) -> dict[str, float]:
        """Recomputed sums minus stored values; all exactly zero for a consistent breakdown."""
        return {
            "intra": (self.target + self.source) - self.intra,
            "inter": (self.s2t + self.t2s) - self.inter,
            "dual": (self.intra + self.inter) - self.dual,
            "total": (self.lam * self.dual + self.l_t + self.l_s) - self.total,
        }

    def scaled(self, c: float) -> "LossBreakdown":
        vals = {k: v * c for k, v in asdict(self).items() if k != "lam"}
        return LossBreakdown(lam=self.lam, **vals)


def dual_proto_nce(
    source: DomainBatch,
    target: DomainBatch,
    bank: PrototypeBank,
    negatives: BatchNegatives,
    inv_temp,
    *,
    proto_weight: float = 1.0,
    inter_weight: float = 1.0,
    epoch: int | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """L_Intra + L_Inter. ``inter_weight=0`` is a test hook that drops the cross-domain part."""
    intra, parts = intra_domain_loss(source, target, bank, negatives, inv_temp, proto_weight=proto_weight, epoch=epoch)
    inter, inter_parts = inter_domain_loss(source, target, bank, negatives, epoch=epoch)
    if inter_weight != 1.0:
        inter_parts = {k: nc.scale(v, inter_weight) for k, v in inter_parts.items()}
        inter_parts["inter"] = nc.add(inter_parts["s2t"], inter_parts["t2s"])
    dual = nc.add(intra, inter_parts["inter"])
    parts.update(inter_parts)
    parts["dual"] = dual
    return dual, parts


def _ce_sum(classifier: Callable[[Tensor], Tensor], inputs, labels) -> Tensor:
    return nc.sum(nc.nll(nc.log_softmax(classifier(inputs)), labels))


def classification_terms(
    batch: DomainBatch,
    bank: PrototypeBank | None,
    classifier: Callable[[Tensor], Tensor],
    *,
    proto_ce: bool = True,
) -> tuple[Tensor, Tensor | None]:
    """Cross-entropy of the batch, and the 1/M-averaged cross-entropy of its closest own-domain prototypes.

    Prototypes enter as constants, so their terms only train the classifier.
    """
    ce = _ce_sum(classifier, batch.online, batch.labels)
    if not proto_ce or bank is None:
        return ce, None
    total = None
    for m, rnd in enumerate(bank.rounds[batch.domain]):
        pos = bank.positives(batch.domain, batch.domain, m, batch.ids)
        term = _ce_sum(classifier, Tensor(rnd.raw_centroids[pos]), batch.labels)
        total = term if total is None else nc.add(total, term)
    return ce, nc.scale(total, 1.0 / bank.M)


def total_loss(
    source: DomainBatch,
    target: DomainBatch,
    bank: PrototypeBank,
    negatives: BatchNegatives,
    inv_temp,
    classifier: Callable[[Tensor], Tensor],
    lam: float = DEFAULT_LAMBDA,
    *,
    proto_weight: float = 1.0,
    inter_weight: float = 1.0,
    epoch: int | None = None,
) -> tuple[Tensor, LossBreakdown]:
    """lam * L_DualProtoNCE + L_t + L_s, summed over the batch (no per-sample averaging)."""
    dual, parts = dual_proto_nce(
        source, target, bank, negatives, inv_temp, proto_weight=proto_weight, inter_weight=inter_weight, epoch=epoch
    )
    ce_t, ce_pt = classification_terms(target, bank, classifier)
    ce_s, ce_ps = classification_terms(source, bank, classifier)
    l_t = nc.add(ce_t, ce_pt)
    l_s = nc.add(ce_s, ce_ps)
    total = nc.add(nc.add(nc.scale(dual, lam), l_t), l_s)
    parts.update(
        ce_target=ce_t, ce_proto_target=ce_pt, ce_source=ce_s, ce_proto_source=ce_ps, l_t=l_t, l_s=l_s, total=total
    )
    return total, LossBreakdown.from_tensors(parts, lam)

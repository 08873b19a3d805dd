"""Property checks run by ``pctl verify``: gradients, limit cases, clustering, EMA, temperature."""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import numcore as nc
from .cluster import build_prototype_bank, concentration, kmeans
from .encoder import (
    INV_TEMP_INIT,
    INV_TEMP_MAX,
    SOURCE,
    TARGET,
    ModelConfig,
    clamp_temperature,
    init_state,
    momentum_update,
)
from .loss import (
    DomainBatch,
    draw_batch_negatives,
    dual_proto_nce,
    info_nce,
    inter_domain_loss,
    intra_domain_loss,
    proto_term,
    total_loss,
)
from .numcore import Tensor

GRAD_TOL = 1e-4
LIMIT_TOL = 1e-9
EMA_TOL = 1e-9
LOSS_NAMES = ("info_nce", "proto_term", "intra_domain_loss", "inter_domain_loss", "dual_proto_nce", "total_loss")


@dataclass
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"[{status}] {self.name:<44s} error {self.measured:.3e}  tol {self.tolerance:.1e}{extra}"


def _result(name, measured, tol, detail="", strict=False) -> CheckResult:
    ok = measured == 0.0 if strict else measured <= tol
    return CheckResult(name, float(measured), tol, bool(ok), detail)


# ---------------------------------------------------------------------------
# toy instances
# ---------------------------------------------------------------------------


@dataclass
class ToyInstance:
    source_online: np.ndarray
    target_online: np.ndarray
    source_momentum: np.ndarray
    target_momentum: np.ndarray
    inv_temp: float
    cls_w1: np.ndarray
    cls_b1: np.ndarray
    cls_w2: np.ndarray
    bank: object
    negatives: object
    lam: float = 1.0 / 32

    def batches(self, source_online=None, target_online=None) -> tuple[DomainBatch, DomainBatch]:
        n = len(self.source_momentum)
        src = DomainBatch(
            SOURCE,
            self.source_online_t if source_online is None else source_online,
            self.source_momentum,
            np.arange(n) % 2,
            np.arange(n),
        )
        tgt = DomainBatch(
            TARGET,
            self.target_online_t if target_online is None else target_online,
            self.target_momentum,
            (np.arange(n) + 1) % 2,
            np.arange(n, 2 * n),
        )
        return src, tgt

    @property
    def source_online_t(self) -> Tensor:
        return Tensor(self.source_online)

    @property
    def target_online_t(self) -> Tensor:
        return Tensor(self.target_online)

    def classifier(self, w1=None) -> Callable[[Tensor], Tensor]:
        w1 = Tensor(self.cls_w1) if w1 is None else w1
        b1, w2 = Tensor(self.cls_b1), Tensor(self.cls_w2)
        return lambda e: nc.matmul(nc.tanh(nc.add(nc.matmul(e, w1), b1)), w2)


def make_toy(seed: int, d: int = 8, n: int = 8, k: int = 4, r: int = 2, r_prime: int = 2, schedule=None) -> ToyInstance:
    """Random embeddings, a prototype bank built from the momentum embeddings, and sampled negatives."""
    rng = np.random.default_rng(seed)
    schedule = (k,) if schedule is None else tuple(schedule)
    src_mom = rng.normal(size=(n, d))
    tgt_mom = rng.normal(size=(n, d))
    bank = build_prototype_bank(
        {SOURCE: (np.arange(n), src_mom), TARGET: (np.arange(n, 2 * n), tgt_mom)}, schedule, seed=seed, epoch=0
    )
    toy = ToyInstance(
        source_online=src_mom + 0.3 * rng.normal(size=(n, d)),
        target_online=tgt_mom + 0.3 * rng.normal(size=(n, d)),
        source_momentum=src_mom,
        target_momentum=tgt_mom,
        inv_temp=float(rng.uniform(0.5, 3.0)),
        cls_w1=rng.normal(size=(d, 6)) / math.sqrt(d),
        cls_b1=0.1 * rng.normal(size=6),
        cls_w2=rng.normal(size=(6, 2)) / math.sqrt(6),
        bank=bank,
        negatives=None,
    )
    src, tgt = toy.batches()
    toy.negatives = draw_batch_negatives(src, tgt, bank, r, r_prime, seed=seed, epoch=0, batch_index=0)
    return toy


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------


def _loss_closures(name: str, toy: ToyInstance) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray]]:
    """Scalar functions of each differentiable input of loss ``name``, with the point to check at."""
    negs, bank = toy.negatives, toy.bank

    if name == "info_nce":
        keys = toy.source_momentum / np.linalg.norm(toy.source_momentum, axis=1, keepdims=True)
        pos = np.arange(len(keys))
        neg = negs.intra[SOURCE].instance
        return {
            "anchors": (lambda t: info_nce(nc.l2_normalize(t), keys, pos, neg, toy.inv_temp), toy.source_online),
            "inv_temp": (
                lambda t: info_nce(nc.l2_normalize(toy.source_online_t), keys, pos, neg, nc.sum(t)),
                np.array([toy.inv_temp]),
            ),
        }
    if name == "proto_term":
        rnd = bank.rounds[TARGET][0]
        pos = bank.positives(TARGET, TARGET, 0, np.arange(len(toy.target_momentum), 2 * len(toy.target_momentum)))
        neg = negs.intra[TARGET].prototypes[0]
        return {
            "anchors": (
                lambda t: proto_term(nc.l2_normalize(t), rnd.unit_centroids, rnd.concentration, pos, neg),
                toy.target_online,
            )
        }

    def run(src_t, tgt_t, inv_temp, w1=None):
        src, tgt = toy.batches(src_t, tgt_t)
        if name == "intra_domain_loss":
            return intra_domain_loss(src, tgt, bank, negs, inv_temp)[0]
        if name == "inter_domain_loss":
            return inter_domain_loss(src, tgt, bank, negs)[0]
        if name == "dual_proto_nce":
            return dual_proto_nce(src, tgt, bank, negs, inv_temp)[0]
        return total_loss(src, tgt, bank, negs, inv_temp, toy.classifier(w1), toy.lam)[0]

    out = {
        "source": (lambda t: run(t, toy.target_online_t, toy.inv_temp), toy.source_online),
        "target": (lambda t: run(toy.source_online_t, t, toy.inv_temp), toy.target_online),
    }
    if name in ("intra_domain_loss", "dual_proto_nce", "total_loss"):
        out["inv_temp"] = (
            lambda t: run(toy.source_online_t, toy.target_online_t, nc.sum(t)),
            np.array([toy.inv_temp]),
        )
    if name == "total_loss":
        out["classifier"] = (
            lambda t: run(toy.source_online_t, toy.target_online_t, toy.inv_temp, t),
            toy.cls_w1,
        )
    return out


def gradient_errors(name: str, seeds: Iterable[int] = range(5)) -> float:
    worst = 0.0
    for seed in seeds:
        toy = make_toy(seed)
        for fn, point in _loss_closures(name, toy).values():
            worst = max(worst, nc.gradcheck(fn, point, 1e-5))
    return worst


def check_gradients(seeds: Iterable[int] = range(5)) -> list[CheckResult]:
    seeds = list(seeds)
    out = []
    for name in LOSS_NAMES:
        t0 = time.perf_counter()
        try:
            err = gradient_errors(name, seeds)
        except nc.GradcheckError as exc:
            out.append(CheckResult(f"gradcheck {name}", math.inf, GRAD_TOL, False, str(exc)))
            continue
        out.append(_result(f"gradcheck {name}", err, GRAD_TOL, f"{len(seeds)} seeds, {time.perf_counter() - t0:.1f}s"))
    return out


# ---------------------------------------------------------------------------
# limit cases and algebra
# ---------------------------------------------------------------------------


def uniform_info_nce(r: int, d: int = 4, inv_temp: float = 1.7) -> float:
    v = np.zeros(d)
    v[0] = 1.0
    keys = np.tile(v, (r + 1, 1))
    return info_nce(Tensor(v[None, :]), keys, [0], np.arange(1, r + 1)[None, :], inv_temp).item()


def uniform_proto_term(r_prime: int, d: int = 4, phi: float = 0.2) -> float:
    v = np.zeros(d)
    v[1] = 1.0
    protos = np.tile(v, (r_prime + 1, 1))
    return proto_term(Tensor(v[None, :]), protos, np.full(r_prime + 1, phi), [0], np.arange(1, r_prime + 1)[None, :]).item()


def symmetric_concentration(tau_prime: float = 0.2) -> np.ndarray:
    points = np.array([[-2.0], [-1.0], [1.0], [2.0]])
    return concentration(points, np.array([[-1.5], [1.5]]), np.array([0, 0, 1, 1]), alpha=10.0, tau_prime=tau_prime)


def check_limits() -> list[CheckResult]:
    out = []
    for r in (1, 2, 32):
        out.append(_result(f"uniform info_nce r={r} == ln(r+1)", abs(uniform_info_nce(r) - math.log(r + 1)), LIMIT_TOL))
    for rp in (1, 2, 32):
        out.append(_result(f"uniform proto_term r'={rp} == ln(r'+1)", abs(uniform_proto_term(rp) - math.log(rp + 1)), LIMIT_TOL))
    phi = symmetric_concentration()
    out.append(_result("symmetric concentration == tau'", float(np.max(np.abs(phi - 0.2))), LIMIT_TOL))
    return out


def loss_algebra_residual(seeds: Iterable[int] = range(5)) -> float:
    worst = 0.0
    for seed in seeds:
        toy = make_toy(seed, schedule=(4, 3))
        src, tgt = toy.batches()
        _, bd = total_loss(src, tgt, toy.bank, toy.negatives, toy.inv_temp, toy.classifier(), toy.lam)
        worst = max(worst, max(abs(v) for v in bd.identity_residuals().values()))
    return worst


def check_algebra() -> list[CheckResult]:
    return [_result("loss breakdown sums (exact)", loss_algebra_residual(), 0.0, strict=True)]


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def brute_force_partition(points: np.ndarray, k: int) -> tuple[float, set[frozenset[int]]]:
    """Lowest within-cluster sum of squares over every labelling of the points."""
    n = len(points)
    best, best_part = math.inf, None
    for labels in itertools.product(range(k), repeat=n):
        if len(set(labels)) < k:
            continue
        total = 0.0
        for j in range(k):
            members = points[[i for i in range(n) if labels[i] == j]]
            total += float(np.sum((members - members.mean(axis=0)) ** 2))
        if total < best - 1e-12:
            best = total
            best_part = {frozenset(i for i in range(n) if labels[i] == j) for j in range(k)}
    return best, best_part


def monotone_violations(instances: int = 100, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    bad = 0
    for i in range(instances):
        n = int(rng.integers(10, 60))
        k = int(rng.integers(1, 8))
        pts = rng.normal(size=(n, int(rng.integers(1, 5))))
        res = kmeans(pts, k, seed=i)
        if any(b > a + 1e-9 * max(1.0, a) for a, b in zip(res.history, res.history[1:])):
            bad += 1
    return bad


def check_clustering() -> list[CheckResult]:
    out = [_result("kmeans objective monotone (100 instances)", monotone_violations(), 0.0, strict=True)]
    pts = np.array([[0.0], [1.0], [9.0], [10.0]])
    best, part = brute_force_partition(pts, 2)
    res = kmeans(pts, 2, seed=0)
    got = {frozenset(np.flatnonzero(res.assignments == j).tolist()) for j in range(2)}
    out.append(
        _result(
            "kmeans {0,1,9,10} matches brute force",
            abs(res.objective - best),
            1e-12,
            "" if got == part else f"partition {sorted(map(sorted, got))}",
        )
    )
    if got != part:
        out[-1].passed = False
    rng = np.random.default_rng(1)
    worst = 0.0
    for seed in range(5):
        emb = {dom: (np.arange(40) + 40 * j, rng.normal(size=(40, 6))) for j, dom in enumerate((SOURCE, TARGET))}
        bank = build_prototype_bank(emb, (5, 8), seed=seed, epoch=0)
        for rounds in bank.rounds.values():
            for rnd in rounds:
                worst = max(worst, abs(rnd.concentration.mean() - 0.2))
    out.append(_result("concentration mean == tau' on every bank", worst, LIMIT_TOL))
    return out


# ---------------------------------------------------------------------------
# momentum encoder and temperature
# ---------------------------------------------------------------------------


def ema_decay_error(gamma: float = 0.9, steps: int = 20, seed: int = 0) -> float:
    """Largest |dist_t - gamma^t dist_0| over tensors and steps, with the online weights frozen."""
    state = init_state(ModelConfig(d_inst=4, d_vis=4, hidden=8, d=6), seed, gamma)
    rng = np.random.default_rng(seed)
    for key in state.momentum:
        state.momentum[key] = state.momentum[key] + rng.normal(size=state.momentum[key].shape)
    start = {key: np.linalg.norm(state.momentum[key] - state.encoder[key].data) for key in state.momentum}
    worst = 0.0
    for t in range(1, steps + 1):
        momentum_update(state)
        for key in state.momentum:
            dist = np.linalg.norm(state.momentum[key] - state.encoder[key].data)
            worst = max(worst, abs(dist - gamma**t * start[key]))
    return worst


def check_ema() -> list[CheckResult]:
    return [_result("EMA distance decays as gamma^t (t<=20)", max(ema_decay_error(g) for g in (0.5, 0.9, 0.999)), EMA_TOL)]


def check_temperature() -> list[CheckResult]:
    state = init_state(ModelConfig(d_inst=4, d_vis=4, hidden=8, d=6), 0)
    fresh = abs(float(state.inv_temp.data) - INV_TEMP_INIT)
    state.inv_temp.data[...] = 1e6
    clamp_temperature(state)
    clamped = abs(float(state.inv_temp.data) - INV_TEMP_MAX)
    return [
        _result("fresh inverse temperature == 0.07", fresh, 0.0, strict=True),
        _result("inverse temperature 1e6 clamps to 100", clamped, 0.0, strict=True),
    ]


CHECKS = {
    "gradients": check_gradients,
    "limits": check_limits,
    "algebra": check_algebra,
    "clustering": check_clustering,
    "ema": check_ema,
    "temperature": check_temperature,
}


def run_all() -> list[CheckResult]:
    out = []
    for fn in CHECKS.values():
        out.extend(fn())
    return out


__all__ = ["CHECKS", "CheckResult", "LOSS_NAMES", "ToyInstance", "make_toy", "run_all"]

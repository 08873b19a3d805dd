"""Training loops for PCTL and the two baselines, evaluation, and ablations."""

from __future__ import annotations

import csv
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numcore as nc
from .cluster import PrototypeBank, build_prototype_bank, write_bank_dump
from .data import DatasetFile, paired_batches, single_batches
from .encoder import (
    SOURCE,
    TARGET,
    ModelConfig,
    ModelState,
    clamp_temperature,
    classifier_logits,
    design_matrix,
    encode_batch,
    init_state,
    momentum_update,
    predict_label,
    predict_proba,
)
from .loss import (
    DEFAULT_LAMBDA,
    DomainBatch,
    LossBreakdown,
    check_prototype_capacity,
    classification_terms,
    draw_batch_negatives,
    total_loss,
)

logger = logging.getLogger(__name__)

MODES = ("pctl", "target_only", "fine_tune")


class TrainingAborted(RuntimeError):
    def __init__(self, epoch: int, batch: int, phase: str, cause: Exception, best_state: ModelState | None, metrics: "RunMetrics"):
        self.epoch, self.batch, self.phase = epoch, batch, phase
        self.best_state = best_state
        self.metrics = metrics
        super().__init__(f"non-finite value in phase {phase!r}, epoch {epoch}, batch {batch}: {cause}")


@dataclass
class TrainConfig:
    """Hyperparameters; defaults are the reference hyperparameters for a pretrained body, model shape is desk scale."""

    mode: str = "pctl"
    lam: float = DEFAULT_LAMBDA
    r: int = 32
    r_prime: int = 32
    k_schedule: tuple[int, ...] = (64,)
    tau_prime: float = 0.2
    alpha: float = 10.0
    gamma: float = 0.999
    lr: float = 8e-4
    body_lr: float = 8e-5
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    pretrain_epochs: int = 30
    seed: int = 0
    d: int = 32
    hidden: int = 64
    layers: int = 1
    cls_hidden: int = 32
    activation: str = "tanh"

    def __post_init__(self):
        self.k_schedule = tuple(int(k) for k in self.k_schedule)

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not self.k_schedule:
            raise ValueError("k_schedule must be non-empty")
        if self.mode == "pctl":
            for m, k in enumerate(self.k_schedule):
                check_prototype_capacity(k, self.r_prime, m + 1)
        if self.r < 0 or self.r_prime < 0:
            raise ValueError("r and r_prime must be >= 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.lr <= 0 or self.body_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.pretrain_epochs < 0:
            raise ValueError("epochs must be >= 1 and pretrain_epochs >= 0")

    def model_config(self, ds: DatasetFile) -> ModelConfig:
        return ds.model_config(hidden=self.hidden, layers=self.layers, d=self.d, cls_hidden=self.cls_hidden, activation=self.activation)


METRIC_COLUMNS = (
    ["epoch", "phase", "source_batches", "target_batches"]
    + [f for f in LossBreakdown.field_names() if f != "lam"]
    + ["lam", "inv_temp", "val_ce", "val_acc", "test_acc"]
)


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    phase_boundaries: list[int] = field(default_factory=list)
    bank_tau_errors: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def best_row(self) -> dict:
        return self.rows[self.best_epoch]

    @property
    def source_batches(self) -> int:
        return sum(r["source_batches"] for r in self.rows)

    @property
    def target_batches(self) -> int:
        return sum(r["target_batches"] for r in self.rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_metrics_csv(metrics: RunMetrics, path) -> None:
    """One row per epoch in METRIC_COLUMNS order; floats via repr so reruns compare byte-for-byte."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in metrics.rows:
            w.writerow([_fmt(row[c]) for c in METRIC_COLUMNS])


def write_timing_csv(metrics: RunMetrics, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "phase", "seconds"])
        for row, s in zip(metrics.rows, metrics.seconds):
            w.writerow([row["epoch"], row["phase"], f"{s:.3f}"])


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    ce: float
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def evaluate_arrays(state: ModelState, inputs: np.ndarray, labels: np.ndarray) -> EvalResult:
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty split")
    p1 = predict_proba(state, encode_batch(state, inputs, "online").data)
    labels = np.asarray(labels)
    pred = predict_label(p1)
    p_true = np.where(labels == 1, p1, 1.0 - p1)
    ce = float(np.mean(-np.log(np.maximum(p_true, np.finfo(float).tiny))))
    tp = int(np.sum((pred == 1) & (labels == 1)))
    fp = int(np.sum((pred == 1) & (labels == 0)))
    fn = int(np.sum((pred == 0) & (labels == 1)))
    tn = int(np.sum((pred == 0) & (labels == 0)))
    return EvalResult((tp + tn) / len(labels), ce, tp, fp, fn, tn)


def evaluate(state: ModelState, dataset: DatasetFile, split: str = "test", domain: str = TARGET) -> EvalResult:
    """Accuracy (threshold 0.5, ties positive), mean cross-entropy and confusion counts."""
    recs = dataset.split(domain, split)
    return evaluate_arrays(state, design_matrix(recs, state.config), np.array([r.y for r in recs]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class _Split:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray


def _prepare(ds: DatasetFile, mcfg: ModelConfig) -> dict[tuple[str, str], _Split]:
    out = {}
    for dom in (SOURCE, TARGET):
        for split in ("train", "val", "test"):
            recs = ds.split(dom, split)
            out[(dom, split)] = _Split(
                design_matrix(recs, mcfg),
                np.array([r.y for r in recs], dtype=np.int64),
                np.array([r.id for r in recs], dtype=np.int64),
            )
    return out


def _param_digest(state: ModelState) -> str:
    h = hashlib.sha256()
    for p in state.parameters():
        h.update(p.data.tobytes())
    for v in state.momentum.values():
        h.update(v.tobytes())
    return h.hexdigest()


def _epoch_seed(seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch), 7]).generate_state(1)[0])


class _Run:
    """Shared state for one training run (one or two phases)."""

    def __init__(self, cfg: TrainConfig, ds: DatasetFile):
        cfg.validate()
        self.cfg = cfg
        self.mcfg = cfg.model_config(ds)
        self.data = _prepare(ds, self.mcfg)
        if len(self.data[(TARGET, "val")].y) == 0:
            raise ValueError("dataset has no target validation split")
        self.state = init_state(self.mcfg, cfg.seed, cfg.gamma)
        self.metrics = RunMetrics()
        self.best_state: ModelState | None = None
        self.best_ce = np.inf
        self.bank_dump_dir = None

    def new_optimizer(self):
        groups = self.state.param_groups(self.cfg.lr, self.cfg.body_lr)
        params = [p for ps, _ in groups for p in ps]
        return params, nc.SgdMomentumState.for_groups(groups, self.cfg.momentum)

    def apply_update(self, objective: nc.Tensor, params, opt) -> None:
        nc.zero_grads(self.state.parameters())
        nc.backward(objective)
        nc.sgd_step(params, [p.grad for p in params], opt)
        clamp_temperature(self.state)
        momentum_update(self.state)

    def build_bank(self, epoch: int) -> PrototypeBank:
        emb = {}
        for dom in (SOURCE, TARGET):
            s = self.data[(dom, "train")]
            emb[dom] = (s.ids, encode_batch(self.state, s.x, "momentum"))
        bank = build_prototype_bank(emb, self.cfg.k_schedule, _epoch_seed(self.cfg.seed, epoch), epoch, self.cfg.alpha, self.cfg.tau_prime)
        err = max(abs(r.concentration.mean() - self.cfg.tau_prime) for rounds in bank.rounds.values() for r in rounds)
        if err > 1e-9 or any(np.any(r.concentration <= 0) for rounds in bank.rounds.values() for r in rounds):
            raise AssertionError(f"epoch {epoch}: concentration mean off tau' by {err}")
        self.metrics.bank_tau_errors.append(float(err))
        if self.bank_dump_dir is not None:
            write_bank_dump(bank, f"{self.bank_dump_dir}/bank_epoch{epoch:03d}.json")
        return bank

    def end_epoch(self, epoch: int, phase: str, breakdowns: list[LossBreakdown], n_src: int, n_tgt: int, t0: float, select: bool) -> None:
        val = evaluate_arrays(self.state, self.data[(TARGET, "val")].x, self.data[(TARGET, "val")].y)
        test = evaluate_arrays(self.state, self.data[(TARGET, "test")].x, self.data[(TARGET, "test")].y)
        row = {"epoch": epoch, "phase": phase, "source_batches": n_src, "target_batches": n_tgt}
        names = [f for f in LossBreakdown.field_names() if f != "lam"]
        for name in names:
            row[name] = float(np.mean([getattr(b, name) for b in breakdowns])) if breakdowns else 0.0
        row["lam"] = self.cfg.lam if phase == "main" and self.cfg.mode == "pctl" else 0.0
        row.update(inv_temp=float(self.state.inv_temp.data), val_ce=val.ce, val_acc=val.accuracy, test_acc=test.accuracy)
        self.metrics.rows.append(row)
        self.metrics.seconds.append(time.perf_counter() - t0)
        if select and val.ce < self.best_ce:
            self.best_ce = val.ce
            self.best_state = self.state.copy()
            self.metrics.best_epoch = len(self.metrics.rows) - 1
        logger.info(
            "%s epoch %d: loss %.4f val_ce %.4f val_acc %.4f test_acc %.4f",
            phase, epoch, row["total"], val.ce, val.accuracy, test.accuracy,
        )

    def abort(self, epoch, batch, phase, exc):
        return TrainingAborted(epoch, batch, phase, exc, self.best_state, self.metrics)

    # -- phases ------------------------------------------------------------

    def pctl_phase(self) -> None:
        cfg = self.cfg
        src, tgt = self.data[(SOURCE, "train")], self.data[(TARGET, "train")]
        params, opt = self.new_optimizer()
        classifier = lambda e: classifier_logits(self.state, e)  # noqa: E731
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            b = -1
            try:
                bank = self.build_bank(epoch)
                breakdowns = []
                pairs = paired_batches(len(src.y), len(tgt.y), cfg.batch_size, epoch, cfg.seed)
                for b, (si, ti) in enumerate(pairs):
                    sb = DomainBatch(SOURCE, encode_batch(self.state, src.x[si]), encode_batch(self.state, src.x[si], "momentum"), src.y[si], src.ids[si])
                    tb = DomainBatch(TARGET, encode_batch(self.state, tgt.x[ti]), encode_batch(self.state, tgt.x[ti], "momentum"), tgt.y[ti], tgt.ids[ti])
                    negs = draw_batch_negatives(sb, tb, bank, cfg.r, cfg.r_prime, seed=cfg.seed, epoch=epoch, batch_index=b)
                    total, bd = total_loss(sb, tb, bank, negs, self.state.inv_temp, classifier, cfg.lam, epoch=epoch)
                    # per-sample mean: one constant keeps lam's role relative to the summed losses
                    self.apply_update(nc.scale(total, 1.0 / len(si)), params, opt)
                    breakdowns.append(bd.scaled(1.0 / len(si)))
            except nc.NonFiniteError as exc:
                raise self.abort(epoch, b, "main", exc) from exc
            self.end_epoch(epoch, "main", breakdowns, len(pairs), len(pairs), t0, select=True)

    def ce_phase(self, domain: str, epochs: int, phase: str, select: bool) -> None:
        cfg = self.cfg
        split = self.data[(domain, "train")]
        params, opt = self.new_optimizer()
        classifier = lambda e: classifier_logits(self.state, e)  # noqa: E731
        for epoch in range(epochs):
            t0 = time.perf_counter()
            breakdowns = []
            batches = single_batches(len(split.y), cfg.batch_size, epoch, cfg.seed, domain)
            b = -1
            try:
                for b, idx in enumerate(batches):
                    db = DomainBatch(domain, encode_batch(self.state, split.x[idx]), np.zeros((len(idx), self.mcfg.d)), split.y[idx], split.ids[idx])
                    ce, _ = classification_terms(db, None, classifier, proto_ce=False)
                    self.apply_update(nc.scale(ce, 1.0 / len(idx)), params, opt)
                    v = ce.item() / len(idx)
                    if domain == TARGET:
                        breakdowns.append(LossBreakdown(ce_target=v, l_t=v, total=v, lam=0.0))
                    else:
                        breakdowns.append(LossBreakdown(ce_source=v, l_s=v, total=v, lam=0.0))
            except nc.NonFiniteError as exc:
                raise self.abort(epoch, b, phase, exc) from exc
            n = len(batches)
            self.end_epoch(epoch, phase, breakdowns, n if domain == SOURCE else 0, n if domain == TARGET else 0, t0, select)


def train_pctl(cfg: TrainConfig, dataset: DatasetFile, bank_dump_dir=None) -> tuple[ModelState, RunMetrics]:
    """Joint source/target training with the Dual ProtoNCE objective.

    Each epoch re-clusters the momentum embeddings, then runs paired batches
    through the total loss. Returns the state of the epoch with the lowest
    target-validation cross-entropy.
    """
    cfg = replace(cfg, mode="pctl")
    run = _Run(cfg, dataset)
    run.bank_dump_dir = bank_dump_dir
    run.metrics.phase_boundaries.append(0)
    run.pctl_phase()
    return run.best_state, run.metrics


def train_target_only(cfg: TrainConfig, dataset: DatasetFile) -> tuple[ModelState, RunMetrics]:
    cfg = replace(cfg, mode="target_only")
    run = _Run(cfg, dataset)
    run.metrics.phase_boundaries.append(0)
    run.ce_phase(TARGET, cfg.epochs, "main", select=True)
    return run.best_state, run.metrics


def train_fine_tune(cfg: TrainConfig, dataset: DatasetFile) -> tuple[ModelState, RunMetrics]:
    """Cross-entropy pretraining on source, then cross-entropy on target from those weights."""
    cfg = replace(cfg, mode="fine_tune")
    run = _Run(cfg, dataset)
    run.metrics.phase_boundaries.append(0)
    run.ce_phase(SOURCE, cfg.pretrain_epochs, "pretrain", select=False)
    run.metrics.extra["pretrain_final_digest"] = _param_digest(run.state)
    run.metrics.phase_boundaries.append(len(run.metrics.rows))
    run.metrics.extra["finetune_initial_digest"] = _param_digest(run.state)
    run.ce_phase(TARGET, cfg.epochs, "main", select=True)
    return run.best_state, run.metrics


TRAINERS = {"pctl": train_pctl, "target_only": train_target_only, "fine_tune": train_fine_tune}


def train(cfg: TrainConfig, dataset: DatasetFile) -> tuple[ModelState, RunMetrics]:
    cfg.validate()
    return TRAINERS[cfg.mode](cfg, dataset)


# ---------------------------------------------------------------------------
# comparisons and ablations
# ---------------------------------------------------------------------------

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
ABLATION_CONDITIONS = {
    "k=33": (33,),
    "k=64": (64,),
    "k=128": (128,),
    "k=(64,128,256)": (64, 128, 256),
}


@dataclass
class ConditionResult:
    name: str
    schedule: tuple[int, ...]
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies, ddof=1)) if len(self.accuracies) > 1 else 0.0

    def line(self) -> str:
        return f"{self.name:<24s} {100 * self.mean:6.2f} +- {100 * self.std:5.2f}  (n={len(self.accuracies)})"


def best_test_accuracy(metrics: RunMetrics) -> float:
    return float(metrics.best_row["test_acc"])


def compare_methods(cfg: TrainConfig, dataset: DatasetFile, seeds: Sequence[int] = DEFAULT_SEEDS, modes: Sequence[str] = MODES) -> dict[str, ConditionResult]:
    """Test accuracy at the best-validation epoch for each method over the seed list."""
    out = {}
    for mode in modes:
        accs = []
        for s in seeds:
            _, metrics = TRAINERS[mode](replace(cfg, seed=int(s)), dataset)
            accs.append(best_test_accuracy(metrics))
        out[mode] = ConditionResult(mode, cfg.k_schedule, accs)
    return out


def run_ablation(
    cfg: TrainConfig,
    dataset: DatasetFile,
    conditions: dict[str, Sequence[int]] | None = None,
    seeds: Sequence[int] = DEFAULT_SEEDS,
) -> list[ConditionResult]:
    """Run PCTL once per (cluster schedule, seed); all schedules are validated before any training."""
    conditions = dict(ABLATION_CONDITIONS if conditions is None else conditions)
    for name, schedule in conditions.items():
        for m, k in enumerate(schedule):
            check_prototype_capacity(int(k), cfg.r_prime, m + 1)
    results = []
    for name, schedule in conditions.items():
        accs = []
        for s in seeds:
            _, metrics = train_pctl(replace(cfg, k_schedule=tuple(schedule), seed=int(s)), dataset)
            accs.append(best_test_accuracy(metrics))
        results.append(ConditionResult(name, tuple(schedule), accs))
    return results


def format_table(results: Sequence[ConditionResult]) -> str:
    header = f"{'condition':<24s} {'acc [%]':>6s}"
    return "\n".join([header] + [r.line() for r in results])


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["k_schedule"] = list(cfg.k_schedule)
    return d


def plot_metrics(csv_path, svg_path) -> None:
    """Loss and accuracy curves from a metrics CSV, written as SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_metrics_csv(csv_path)
    x = np.arange(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for col in ("total", "dual", "l_t", "l_s", "val_ce"):
        ax1.plot(x, [float(r[col]) for r in rows], label=col)
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend()
    for col in ("val_acc", "test_acc"):
        ax2.plot(x, [float(r[col]) for r in rows], label=col)
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("accuracy")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(svg_path, format="svg")
    plt.close(fig)

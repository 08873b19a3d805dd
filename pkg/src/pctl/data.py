"""Synthetic two-domain data, its line-oriented file format, and batch sampling."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .encoder import (
    DOMAINS,
    SOURCE,
    TARGET,
    BoundingBox,
    ModelConfig,
    SampleRecord,
    ValidationError,
    design_matrix,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
DOMAIN_CODE = {SOURCE: 0, TARGET: 1}
MAX_REJECTION_ROUNDS = 1000


class DatasetFormatError(ValueError):
    pass


def _default_counts() -> dict[str, dict[str, int]]:
    return {
        SOURCE: {"train": 1536, "val": 256, "test": 256},
        TARGET: {"train": 128, "val": 256, "test": 512},
    }


@dataclass
class GeneratorConfig:
    """Knobs of the synthetic source/target generator.

    Both domains share latent clusters and a linear labelling rule. The target
    domain sees the latent through an affine map ``(I + s*E) z + s*b`` with
    ``s = shift_scale``; each domain adds its own observation noise.
    """

    n_clusters: int = 8
    latent_dim: int = 8
    cluster_spread: float = 1.5
    shift_scale: float = 0.5
    source_noise: float = 2.0
    target_noise: float = 2.0
    margin: float = 0.1
    label_noise: float = 0.0
    d_inst: int = 16
    d_vis: int = 16
    n_det: int = 4
    counts: dict[str, dict[str, int]] = field(default_factory=_default_counts)
    seed: int = 0

    def validate(self) -> None:
        scales = ("cluster_spread", "shift_scale", "source_noise", "target_noise", "margin", "label_noise")
        for name in scales:
            if getattr(self, name) < 0:
                raise ValidationError(f"generator.{name} must be >= 0")
        if self.label_noise >= 0.5:
            raise ValidationError("generator.label_noise must be < 0.5")
        for name in ("n_clusters", "latent_dim", "d_inst", "d_vis"):
            if getattr(self, name) < 1:
                raise ValidationError(f"generator.{name} must be >= 1")
        if self.latent_dim < 2:
            raise ValidationError("generator.latent_dim must be >= 2")
        if self.n_det < 0:
            raise ValidationError("generator.n_det must be >= 0")
        for dom in DOMAINS:
            for split in SPLITS:
                if self.counts.get(dom, {}).get(split, 0) < 1:
                    raise ValidationError(f"generator.counts.{dom}.{split} must be >= 1")


@dataclass(eq=False)
class DatasetFile:
    header: dict
    records: list[SampleRecord]

    def split(self, domain: str, split: str) -> list[SampleRecord]:
        return [r for r in self.records if r.domain == domain and r.split == split]

    def __eq__(self, other):
        if not isinstance(other, DatasetFile):
            return NotImplemented
        return self.header == other.header and self.records == other.records

    def model_config(self, **overrides) -> ModelConfig:
        return ModelConfig(d_inst=self.header["d_inst"], d_vis=self.header["d_vis"], **overrides)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _random_box(rng: np.random.Generator) -> BoundingBox:
    xs = np.sort(rng.uniform(0.0, 1.0, 2))
    ys = np.sort(rng.uniform(0.0, 1.0, 2))
    return BoundingBox(float(xs[0]), float(ys[0]), float(xs[1]), float(ys[1]))


def _draw_balanced_latents(rng, centers, spread, w, margin, n, label_noise):
    """Rejection-sample n latents: exactly floor/ceil(n/2) of each class, outside the margin."""
    want = {1: (n + 1) // 2, 0: n // 2}
    got: dict[int, list[np.ndarray]] = {0: [], 1: []}
    K, L = centers.shape
    for _ in range(MAX_REJECTION_ROUNDS):
        if all(len(got[c]) >= want[c] for c in (0, 1)):
            break
        cl = rng.integers(K, size=4 * n)
        z = centers[cl] + spread * 0.5 * rng.normal(size=(4 * n, L))
        score = z @ w
        keep = np.abs(score) >= margin
        for zi, yi in zip(z[keep], (score[keep] > 0).astype(int)):
            if len(got[yi]) < want[yi]:
                got[yi].append(zi)
    if any(len(got[c]) < want[c] for c in (0, 1)):
        raise ValidationError(f"could not balance labels after {MAX_REJECTION_ROUNDS} rejection rounds")
    z = np.array(got[1] + got[0])
    y = np.array([1] * want[1] + [0] * want[0])
    order = rng.permutation(n)
    z, y = z[order], y[order]
    if label_noise > 0:
        # flip an equal number of each class so the balance is preserved
        n_flip = int(round(label_noise * min(want[0], want[1])))
        pos, negs = np.flatnonzero(y == 1), np.flatnonzero(y == 0)
        flip = np.concatenate([rng.choice(pos, n_flip, replace=False), rng.choice(negs, n_flip, replace=False)])
        y[flip] = 1 - y[flip]
    return z, y


def generate_synthetic(cfg: GeneratorConfig) -> DatasetFile:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    L = cfg.latent_dim
    half = L // 2
    centers = cfg.cluster_spread * rng.normal(size=(cfg.n_clusters, L))
    w = rng.normal(size=L)
    w /= np.linalg.norm(w)
    # instruction block sees the first half of the latent, candidate/context the rest
    p_inst = rng.normal(size=(half, cfg.d_inst)) / np.sqrt(half)
    p_vis = rng.normal(size=(L - half, cfg.d_vis)) / np.sqrt(L - half)
    shift_mat = np.eye(L) + cfg.shift_scale * rng.normal(size=(L, L)) / np.sqrt(L)
    shift_vec = cfg.shift_scale * rng.normal(size=L)
    noise = {SOURCE: cfg.source_noise, TARGET: cfg.target_noise}

    records: list[SampleRecord] = []
    next_id = 0
    for dom in DOMAINS:
        for split in SPLITS:
            n = cfg.counts[dom][split]
            z, y = _draw_balanced_latents(rng, centers, cfg.cluster_spread, w, cfg.margin, n, cfg.label_noise)
            if dom == TARGET:
                z = z @ shift_mat.T + shift_vec
            for zi, yi in zip(z, y):
                sigma = noise[dom]
                inst = zi[:half] @ p_inst + sigma * rng.normal(size=cfg.d_inst)
                cand = zi[half:] @ p_vis + sigma * rng.normal(size=cfg.d_vis)
                distract = centers[rng.integers(cfg.n_clusters, size=cfg.n_det)]
                if dom == TARGET:
                    distract = distract @ shift_mat.T + shift_vec
                cont = distract[:, half:] @ p_vis + sigma * rng.normal(size=(cfg.n_det, cfg.d_vis))
                records.append(
                    SampleRecord(
                        id=next_id,
                        domain=dom,
                        y=int(yi),
                        instruction_feats=inst,
                        candidate_feat=cand,
                        candidate_box=_random_box(rng),
                        context_feats=list(cont),
                        context_boxes=[_random_box(rng) for _ in range(cfg.n_det)],
                        split=split,
                    )
                )
                next_id += 1
    header = {
        "schema": SCHEMA_VERSION,
        "d_inst": cfg.d_inst,
        "d_vis": cfg.d_vis,
        "n_det": cfg.n_det,
        "counts": {dom: {s: cfg.counts[dom][s] for s in SPLITS} for dom in DOMAINS},
        "generator": asdict(cfg),
    }
    ds = DatasetFile(header, records)
    probe = gap_probe(ds)
    header["probe"] = probe
    if cfg.shift_scale > 0 and probe["source_fit_target_acc"] >= probe["target_fit_target_acc"]:
        logger.warning("domain-gap probe: source-trained linear fit is not worse on target (%s)", probe)
    return ds


def gap_probe(ds: DatasetFile) -> dict[str, float]:
    """Least-squares linear probes scored on the target test split.

    Compares a fit on source train features with a fit on target train
    features; with a domain shift the source fit should transfer worse. Both
    fits use the same number of samples so only the gap differs.
    """
    mcfg = ModelConfig(d_inst=ds.header["d_inst"], d_vis=ds.header["d_vis"])

    n_fit = min(len(ds.split(dom, "train")) for dom in DOMAINS)

    def xy(dom, split, n=None):
        recs = ds.split(dom, split)[:n]
        x = design_matrix(recs, mcfg)
        return np.hstack([x, np.ones((len(x), 1))]), np.array([2.0 * r.y - 1.0 for r in recs])

    x_test, y_test = xy(TARGET, "test")
    out = {}
    for dom in DOMAINS:
        x, y = xy(dom, "train", n_fit)
        coef, *_ = np.linalg.lstsq(x, y, rcond=None)
        out[f"{dom}_fit_target_acc"] = float(np.mean(np.sign(x_test @ coef) == y_test))
    return out


# ---------------------------------------------------------------------------
# file format: line 1 is the header object, then one JSON object per sample
# ---------------------------------------------------------------------------


def _record_to_obj(r: SampleRecord) -> dict:
    return {
        "id": r.id,
        "domain": r.domain,
        "split": r.split,
        "y": r.y,
        "inst": r.instruction_feats.tolist(),
        "cand": r.candidate_feat.tolist(),
        "cand_box": r.candidate_box.as_list(),
        "cont": [c.tolist() for c in r.context_feats],
        "cont_boxes": [b.as_list() for b in r.context_boxes],
    }


def _obj_to_record(obj: dict) -> SampleRecord:
    return SampleRecord(
        id=int(obj["id"]),
        domain=obj["domain"],
        y=int(obj["y"]),
        instruction_feats=np.array(obj["inst"], dtype=np.float64),
        candidate_feat=np.array(obj["cand"], dtype=np.float64),
        candidate_box=BoundingBox(*obj["cand_box"]),
        context_feats=[np.array(c, dtype=np.float64) for c in obj["cont"]],
        context_boxes=[BoundingBox(*b) for b in obj["cont_boxes"]],
        split=obj.get("split", "train"),
    )


def save(ds: DatasetFile, path) -> None:
    # json writes floats with repr(), the shortest string that round-trips exactly
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(ds.header, sort_keys=True) + "\n")
        for r in ds.records:
            fh.write(json.dumps(_record_to_obj(r)) + "\n")


def load(path) -> DatasetFile:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, no header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{path}: line 1: malformed header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA_VERSION:
        raise DatasetFormatError(f"{path}: schema version {header.get('schema') if isinstance(header, dict) else None!r}, expected {SCHEMA_VERSION}")
    d_inst, d_vis = header["d_inst"], header["d_vis"]
    records = []
    seen: set[int] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = _obj_to_record(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: malformed record ({exc}); last good line {lineno - 1}") from None
        if rec.instruction_feats.shape != (d_inst,) or rec.candidate_feat.shape != (d_vis,) or any(c.shape != (d_vis,) for c in rec.context_feats):
            raise DatasetFormatError(f"{path}: line {lineno}: feature dimensions disagree with header; last good line {lineno - 1}")
        if rec.id in seen:
            raise DatasetFormatError(f"{path}: line {lineno}: duplicate id {rec.id}")
        seen.add(rec.id)
        records.append(rec)
    declared = sum(sum(v.values()) for v in header.get("counts", {}).values())
    if len(records) != declared:
        raise DatasetFormatError(
            f"{path}: header declares {declared} records but {len(records)} were read; last good line {len(lines)}"
        )
    for dom, per_split in header.get("counts", {}).items():
        for split, n in per_split.items():
            found = sum(1 for r in records if r.domain == dom and r.split == split)
            if found != n:
                raise DatasetFormatError(f"{path}: {dom}/{split} has {found} records, header says {n}")
    return DatasetFile(header, records)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


def _order(n: int, epoch: int, seed: int, domain: str) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), DOMAIN_CODE[domain]]).permutation(n)


def single_batches(n: int, batch_size: int, epoch: int, seed: int, domain: str) -> list[np.ndarray]:
    """Shuffled batches of one domain; a trailing batch shorter than 2 is dropped."""
    if batch_size < 2:
        raise ValidationError("batch_size must be >= 2")
    order = _order(n, epoch, seed, domain)
    out = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def paired_batches(n_source: int, n_target: int, batch_size: int, epoch: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Equal-size (source, target) index batches until the smaller domain runs out.

    Only full batches are paired; when the smaller domain holds fewer than
    ``batch_size`` (but at least 2) samples, a single short pair is used.
    """
    if batch_size < 2:
        raise ValidationError("batch_size must be >= 2")
    if n_source < 1 or n_target < 1:
        raise ValidationError("both domains need training samples")
    src = _order(n_source, epoch, seed, SOURCE)
    tgt = _order(n_target, epoch, seed, TARGET)
    small = min(n_source, n_target)
    if small < batch_size:
        return [(src[:small], tgt[:small])] if small >= 2 else []
    return [(src[i * batch_size : (i + 1) * batch_size], tgt[i * batch_size : (i + 1) * batch_size]) for i in range(small // batch_size)]


def batch_iter(ds: DatasetFile, batch_size: int, epoch: int, seed: int):
    """Paired training batches of records, source first."""
    src = ds.split(SOURCE, "train")
    tgt = ds.split(TARGET, "train")
    for si, ti in paired_batches(len(src), len(tgt), batch_size, epoch, seed):
        yield [src[i] for i in si], [tgt[i] for i in ti]

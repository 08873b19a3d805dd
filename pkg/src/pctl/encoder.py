"""Online/momentum encoders, the binary classifier head and model checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor

SOURCE, TARGET = "source", "target"
DOMAINS = (SOURCE, TARGET)

POS_DIM = 7
INV_TEMP_INIT = 0.07
INV_TEMP_MAX = 100.0
INV_TEMP_MIN = 1e-4


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(c) and 0.0 <= c <= 1.0 for c in coords):
            raise ValidationError(f"box coordinates must lie in [0, 1]: {coords}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValidationError(f"box corners out of order: {coords}")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


def positional_encoding(box: BoundingBox) -> np.ndarray:
    """``[x1, y1, x2, y2, w, h, w*h]`` for a normalised box."""
    w = box.x2 - box.x1
    h = box.y2 - box.y1
    return np.array([box.x1, box.y1, box.x2, box.y2, w, h, w * h], dtype=np.float64)


@dataclass(eq=False)
class SampleRecord:
    id: int
    domain: str
    y: int
    instruction_feats: np.ndarray
    candidate_feat: np.ndarray
    candidate_box: BoundingBox
    context_feats: list[np.ndarray] = field(default_factory=list)
    context_boxes: list[BoundingBox] = field(default_factory=list)
    split: str = "train"

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValidationError(f"sample {self.id}: label must be 0 or 1, got {self.y}")
        if self.domain not in DOMAINS:
            raise ValidationError(f"sample {self.id}: unknown domain {self.domain!r}")
        if len(self.context_feats) != len(self.context_boxes):
            raise ValidationError(f"sample {self.id}: {len(self.context_feats)} context features vs {len(self.context_boxes)} boxes")
        self.instruction_feats = np.asarray(self.instruction_feats, dtype=np.float64)
        self.candidate_feat = np.asarray(self.candidate_feat, dtype=np.float64)
        self.context_feats = [np.asarray(c, dtype=np.float64) for c in self.context_feats]
        for arr in (self.instruction_feats, self.candidate_feat, *self.context_feats):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"sample {self.id}: non-finite feature")

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            (self.id, self.domain, self.y, self.split, self.candidate_box) == (other.id, other.domain, other.y, other.split, other.candidate_box)
            and self.context_boxes == other.context_boxes
            and _bits_equal(self.instruction_feats, other.instruction_feats)
            and _bits_equal(self.candidate_feat, other.candidate_feat)
            and len(self.context_feats) == len(other.context_feats)
            and all(_bits_equal(a, b) for a, b in zip(self.context_feats, other.context_feats))
        )


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass
class ModelConfig:
    """Shapes of the MLP stand-in for the transformer encoder.

    ``layers``/``hidden`` play the role of #L/#H; ``d`` is the embedding size.
    """

    d_inst: int = 16
    d_vis: int = 16
    hidden: int = 64
    layers: int = 1
    d: int = 32
    cls_hidden: int = 32
    activation: str = "tanh"

    @property
    def input_dim(self) -> int:
        return self.d_inst + 2 * (self.d_vis + POS_DIM)


def sample_input(sample: SampleRecord, cfg: ModelConfig) -> np.ndarray:
    """Flatten one record into the encoder's input vector.

    Layout: instruction | candidate | candidate box PE | mean context | mean context PE.
    """
    if sample.instruction_feats.shape != (cfg.d_inst,):
        raise ValidationError(f"sample {sample.id}: instruction dim {sample.instruction_feats.shape} != ({cfg.d_inst},)")
    if sample.candidate_feat.shape != (cfg.d_vis,):
        raise ValidationError(f"sample {sample.id}: candidate dim {sample.candidate_feat.shape} != ({cfg.d_vis},)")
    if sample.context_feats:
        cont = np.stack(sample.context_feats)
        if cont.shape[1] != cfg.d_vis:
            raise ValidationError(f"sample {sample.id}: context dim {cont.shape[1]} != {cfg.d_vis}")
        cont_mean = cont.mean(axis=0)
        pe_mean = np.stack([positional_encoding(b) for b in sample.context_boxes]).mean(axis=0)
    else:
        cont_mean = np.zeros(cfg.d_vis)
        pe_mean = np.zeros(POS_DIM)
    return np.concatenate(
        [sample.instruction_feats, sample.candidate_feat, positional_encoding(sample.candidate_box), cont_mean, pe_mean]
    )


def design_matrix(samples: Sequence[SampleRecord], cfg: ModelConfig) -> np.ndarray:
    if not samples:
        return np.zeros((0, cfg.input_dim))
    return np.stack([sample_input(s, cfg) for s in samples])


# ---------------------------------------------------------------------------
# model state
# ---------------------------------------------------------------------------


@dataclass
class ModelState:
    config: ModelConfig
    encoder: dict[str, Tensor]
    momentum: dict[str, np.ndarray]
    classifier: dict[str, Tensor]
    inv_temp: Tensor
    gamma: float = 0.999

    # names of encoder tensors in the transformer stand-in ("body")
    @property
    def body_names(self) -> list[str]:
        return [n for n in self.encoder if not n.startswith("embed.")]

    @property
    def embed_names(self) -> list[str]:
        return [n for n in self.encoder if n.startswith("embed.")]

    def parameters(self) -> list[Tensor]:
        return [*self.encoder.values(), *self.classifier.values(), self.inv_temp]

    def param_groups(self, lr: float, body_lr: float) -> list[tuple[list[Tensor], float]]:
        """Two learning-rate groups: encoder body vs. embedder, classifier and temperature."""
        body = [self.encoder[n] for n in self.body_names]
        rest = [self.encoder[n] for n in self.embed_names] + list(self.classifier.values()) + [self.inv_temp]
        return [(body, body_lr), (rest, lr)]

    def copy(self) -> "ModelState":
        return ModelState(
            config=self.config,
            encoder={k: Tensor(v.data, requires_grad=True) for k, v in self.encoder.items()},
            momentum={k: v.copy() for k, v in self.momentum.items()},
            classifier={k: Tensor(v.data, requires_grad=True) for k, v in self.classifier.items()},
            inv_temp=Tensor(self.inv_temp.data, requires_grad=True),
            gamma=self.gamma,
        )


def _layer_shapes(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    shapes = [("embed", cfg.input_dim, cfg.hidden)]
    shapes += [(f"trunk{i}", cfg.hidden, cfg.hidden) for i in range(cfg.layers)]
    shapes.append(("out", cfg.hidden, cfg.d))
    return shapes


def _classifier_shapes(cfg: ModelConfig) -> list[tuple[str, int, int]]:
    return [("cls1", cfg.d, cfg.cls_hidden), ("cls2", cfg.cls_hidden, 2)]


def init_state(cfg: ModelConfig, seed: int, gamma: float = 0.999) -> ModelState:
    """Fresh parameters, uniform in +-1/sqrt(fan_in); momentum copy equals online."""
    if cfg.activation not in ("tanh", "relu"):
        raise ValidationError(f"unknown activation {cfg.activation!r}")
    rng = np.random.default_rng(seed)

    def build(shapes):
        params = {}
        for name, fan_in, fan_out in shapes:
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.W"] = Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True)
            params[f"{name}.b"] = Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True)
        return params

    encoder = build(_layer_shapes(cfg))
    classifier = build(_classifier_shapes(cfg))
    return ModelState(
        config=cfg,
        encoder=encoder,
        momentum={k: v.data.copy() for k, v in encoder.items()},
        classifier=classifier,
        inv_temp=Tensor(INV_TEMP_INIT, requires_grad=True),
        gamma=gamma,
    )


def _act(cfg: ModelConfig):
    return nc.tanh if cfg.activation == "tanh" else nc.relu


def _np_act(cfg: ModelConfig):
    return np.tanh if cfg.activation == "tanh" else (lambda x: np.maximum(x, 0.0))


def encode_batch(state: ModelState, inputs: np.ndarray, which: Literal["online", "momentum"] = "online"):
    """Encode an ``n x input_dim`` matrix.

    ``online`` returns a graph-connected Tensor; ``momentum`` returns a plain
    array computed from the momentum parameters and never carries gradients.
    """
    cfg = state.config
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != cfg.input_dim:
        raise ValidationError(f"encoder input shape {inputs.shape} != (n, {cfg.input_dim})")
    names = [name for name, _, _ in _layer_shapes(cfg)]
    if which == "momentum":
        act = _np_act(cfg)
        h = inputs
        for name in names[:-1]:
            h = act(h @ state.momentum[f"{name}.W"] + state.momentum[f"{name}.b"])
        return h @ state.momentum["out.W"] + state.momentum["out.b"]
    if which != "online":
        raise ValueError(f"which must be 'online' or 'momentum', got {which!r}")
    act = _act(cfg)
    h = Tensor(inputs)
    for name in names[:-1]:
        h = act(nc.add(nc.matmul(h, state.encoder[f"{name}.W"]), state.encoder[f"{name}.b"]))
    return nc.add(nc.matmul(h, state.encoder["out.W"]), state.encoder["out.b"])


def encode(state: ModelState, sample: SampleRecord, which: Literal["online", "momentum"] = "online") -> np.ndarray:
    """Embed a single record; returns a d-vector."""
    x = sample_input(sample, state.config)[None, :]
    out = encode_batch(state, x, which)
    return (out.data if isinstance(out, Tensor) else out)[0].copy()


def classifier_logits(state: ModelState, embeddings) -> Tensor:
    """Two-layer MLP head; column 1 is the logit for ``y = 1``."""
    emb = nc.as_tensor(embeddings)
    if emb.data.ndim != 2 or emb.shape[1] != state.config.d:
        raise ValidationError(f"classifier input shape {emb.shape} != (n, {state.config.d})")
    c = state.classifier
    h = _act(state.config)(nc.add(nc.matmul(emb, c["cls1.W"]), c["cls1.b"]))
    return nc.add(nc.matmul(h, c["cls2.W"]), c["cls2.b"])


def predict_proba(state: ModelState, embeddings: np.ndarray) -> np.ndarray:
    """p(y_hat = 1) for each row, via a stabilised two-class softmax."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[1] != state.config.d:
        raise ValidationError(f"classifier input shape {emb.shape} != (n, {state.config.d})")
    c = {k: v.data for k, v in state.classifier.items()}
    h = _np_act(state.config)(emb @ c["cls1.W"] + c["cls1.b"])
    z = h @ c["cls2.W"] + c["cls2.b"]
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def classify(state: ModelState, embedding) -> float:
    emb = np.asarray(embedding, dtype=np.float64)
    if emb.shape != (state.config.d,):
        raise ValidationError(f"embedding shape {emb.shape} != ({state.config.d},)")
    return float(predict_proba(state, emb[None, :])[0])


def predict_label(p):
    """Threshold at 0.5; an exact tie predicts the positive class."""
    return (np.asarray(p) >= 0.5).astype(int)


def momentum_update(state: ModelState) -> None:
    """theta' <- gamma*theta' + (1 - gamma)*theta for every encoder tensor."""
    g = state.gamma
    if not 0.0 <= g <= 1.0:
        raise ValidationError(f"gamma {g} outside [0, 1]")
    if state.momentum.keys() != state.encoder.keys():
        raise ValidationError("momentum and online parameter names differ")
    for name, online in state.encoder.items():
        mom = state.momentum[name]
        if mom.shape != online.shape:
            raise ValidationError(f"{name}: momentum shape {mom.shape} != {online.shape}")
        state.momentum[name] = g * mom + (1.0 - g) * online.data


def clamp_temperature(state: ModelState) -> float:
    v = float(np.clip(state.inv_temp.data, INV_TEMP_MIN, INV_TEMP_MAX))
    state.inv_temp.data[...] = v
    return v


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"PCTLCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(state: ModelState, path, extra: dict | None = None) -> None:
    """Binary container: magic, u32 version, u32 header length, JSON header, f64 blocks.

    Parameter blocks are little-endian float64 in header order: online encoder,
    momentum encoder, classifier, then 1/tau.
    """
    blocks: list[tuple[str, np.ndarray]] = []
    blocks += [(f"encoder/{k}", v.data) for k, v in state.encoder.items()]
    blocks += [(f"momentum/{k}", v) for k, v in state.momentum.items()]
    blocks += [(f"classifier/{k}", v.data) for k, v in state.classifier.items()]
    blocks.append(("inv_temp", state.inv_temp.data))
    cfg = state.config
    header = {
        "format_version": CHECKPOINT_VERSION,
        "d": cfg.d,
        "layer_sizes": [[fi, fo] for _, fi, fo in _layer_shapes(cfg)],
        "gamma": state.gamma,
        "inv_temp": float(state.inv_temp.data),
        "model": cfg.__dict__,
        "blocks": [[name, list(arr.shape)] for name, arr in blocks],
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for _, arr in blocks:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelState, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    off += 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    arrays: dict[str, np.ndarray] = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated in block {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
        off += nbytes
    cfg = ModelConfig(**header["model"])
    state = ModelState(
        config=cfg,
        encoder={k.split("/", 1)[1]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("encoder/")},
        momentum={k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("momentum/")},
        classifier={k.split("/", 1)[1]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("classifier/")},
        inv_temp=Tensor(arrays["inv_temp"], requires_grad=True),
        gamma=header["gamma"],
    )
    return state, header.get("extra", {})

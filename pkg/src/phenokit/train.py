"""Stepwise training: regression warm-up, then the joint weighted objective.

Both stages share one epoch loop so that a joint run with only the
regression term active retraces the warm-up exactly. Each epoch draws its
batch order and dropout masks from ``make_rng(seed, epoch)``.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._util import atomic_write_bytes, atomic_write_text
from .errors import CheckpointError, InputError, NonFiniteError
from .model import PhenoNet, PhenoNetConfig, forward
from .objectives import DEFAULT_WEIGHTS, LossWeights, loss_cls, loss_con, loss_mse
from .tensor import Tape, Tensor, make_rng, tensor_from_bytes, tensor_to_bytes

# (exclusive epoch threshold, rate) pairs of the published 200-epoch run.
PAPER_LR_STAGES = ((10, 2e-3), (60, 1e-3), (120, 5e-4), (200, 1e-4))
# Same staircase shape compressed into the 30-epoch desk budget.
DESK_LR_STAGES = ((10, 2e-2), (20, 1e-2), (30, 5e-3))

MOMENTUM = 0.9
CLIP_NORM = 5.0
CHECKPOINT_MAGIC = b"PKCK1"


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 30
    warmup_epochs: int = 10
    lr_stages: tuple = DESK_LR_STAGES
    weights: LossWeights = DEFAULT_WEIGHTS
    seed: int = 0
    use_cls: bool = True
    use_mse: bool = True
    use_con: bool = True
    use_diffconv: bool = True

    def __post_init__(self):
        stages = tuple((int(t), float(r)) for t, r in self.lr_stages)
        object.__setattr__(self, "lr_stages", stages)
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.max_epochs:
            raise ValueError("warmup_epochs must lie in [0, max_epochs]")
        if not stages:
            raise ValueError("lr_stages must not be empty")
        thresholds = [t for t, _ in stages]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])) or thresholds[0] <= 0:
            raise ValueError("lr stage thresholds must be positive and strictly increasing")
        if thresholds[-1] != self.max_epochs:
            raise ValueError(f"final lr stage threshold {thresholds[-1]} != max_epochs {self.max_epochs}")
        if any(r < 0 or not math.isfinite(r) for _, r in stages):
            raise ValueError("learning rates must be finite and nonnegative")

    @property
    def active(self) -> dict[str, bool]:
        return {"cls": self.use_cls, "mse": self.use_mse, "con": self.use_con}

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_stages"] = [list(s) for s in self.lr_stages]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InputError(f"unknown train config keys: {sorted(unknown)}")
        data = dict(data)
        if "weights" in data:
            wkeys = {f.name for f in dataclasses.fields(LossWeights)}
            bad = set(data["weights"]) - wkeys
            if bad:
                raise InputError(f"unknown loss weight keys: {sorted(bad)}")
            data["weights"] = LossWeights(**data["weights"])
        return cls(**data)


def lr_schedule(epoch: int, stages: Sequence[tuple[int, float]] = PAPER_LR_STAGES) -> float:
    """Piecewise-constant rate; stage i covers [threshold_{i-1}, threshold_i)."""
    if epoch < 0 or epoch >= stages[-1][0]:
        raise ValueError(f"epoch {epoch} outside [0, {stages[-1][0]})")
    for threshold, rate in stages:
        if epoch < threshold:
            return rate
    raise AssertionError("unreachable")


class SGD:
    """Momentum SGD with global gradient-norm clipping."""

    def __init__(self, params: dict[str, Tensor], momentum: float = MOMENTUM, clip: float = CLIP_NORM):
        self.params = params
        self.momentum = momentum
        self.clip = clip
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> float:
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in self.params.items()}
        norm = math.sqrt(math.fsum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
        if not math.isfinite(norm):
            raise NonFiniteError("sgd_step")
        scale = self.clip / norm if norm > self.clip else 1.0
        for k, p in self.params.items():
            v = self.velocity[k]
            v *= self.momentum
            v += grads[k] * p.data.dtype.type(scale)
            if lr != 0.0:
                p.data = p.data - p.data.dtype.type(lr) * v
        return norm


@dataclass
class TrainState:
    """Optimizer state carried between stages plus the per-epoch log."""

    optimizer: SGD | None = None
    log: list[dict] = field(default_factory=list)


def _check_dataset(data, need_labels: bool) -> None:
    if len(data) == 0:
        raise InputError("empty dataset")
    if data.targets is None or len(data.targets) != len(data):
        raise InputError("dataset lacks regression targets")
    if need_labels and len(data.labels) != len(data):
        raise InputError("dataset lacks labels")


def _prepare(net: PhenoNet, config: TrainConfig) -> PhenoNet:
    net = net.copy()
    if not config.use_diffconv:
        net.config = dataclasses.replace(net.config, theta1=0.0, theta2=0.0)
    return net


def _run_epochs(net: PhenoNet, data, config: TrainConfig, epochs: range, active: dict[str, bool],
                stage: str, state: TrainState, log_path=None) -> None:
    w = config.weights
    if state.optimizer is None:
        state.optimizer = SGD(net.params)
    opt = state.optimizer
    n = len(data)
    dtype = net.config.dtype
    if active["cls"] and int(np.max(data.labels)) >= net.config.num_classes:
        raise InputError(f"labels need {int(np.max(data.labels)) + 1} classes, head has {net.config.num_classes}")

    for epoch in epochs:
        start = time.perf_counter()
        lr = lr_schedule(epoch, config.lr_stages)
        rng = make_rng(config.seed, epoch)
        order = rng.permutation(n)
        sums = {"cls": 0.0, "mse": 0.0, "con": 0.0, "total": 0.0}
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            x = Tensor(data.images[idx].astype(dtype, copy=False))
            z = Tensor(data.targets[idx].astype(dtype, copy=False))
            net.zero_grad()
            with Tape() as tape:
                z_hat, logits = forward(x, net, "train", rng)
                terms = {}
                if active["cls"]:
                    terms["cls"] = loss_cls(logits, data.labels[idx]) * w.lambda1
                if active["mse"]:
                    terms["mse"] = loss_mse(z_hat, z) * w.lambda2
                if active["con"]:
                    terms["con"] = loss_con(z_hat, z, w.tau, w.normalize_embeddings) * w.lambda3
                total = None
                for t in terms.values():
                    total = t if total is None else total + t
            if not math.isfinite(total.item()):
                raise NonFiniteError("loss_total")
            tape.backward(total)
            opt.step(lr)
            frac = len(idx) / n
            sums["total"] += total.item() * frac
            lam = {"cls": w.lambda1, "mse": w.lambda2, "con": w.lambda3}
            for k, t in terms.items():
                sums[k] += (t.item() / lam[k] if lam[k] else 0.0) * frac
        entry = {"epoch": epoch, "stage": stage, "lr": lr,
                 "loss_cls": sums["cls"] if active["cls"] else None,
                 "loss_mse": sums["mse"] if active["mse"] else None,
                 "loss_con": sums["con"] if active["con"] else None,
                 "loss_total": sums["total"],
                 "wall_ms": round(1000 * (time.perf_counter() - start), 3)}
        state.log.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")


def train_stage_mse(net: PhenoNet, data, config: TrainConfig, state: TrainState | None = None,
                    log_path=None) -> PhenoNet:
    """Warm-up: ``warmup_epochs`` epochs minimising ``lambda2 * L_MSE`` only."""
    _check_dataset(data, need_labels=False)
    net = _prepare(net, config)
    state = state if state is not None else TrainState()
    _run_epochs(net, data, config, range(config.warmup_epochs),
                {"cls": False, "mse": True, "con": False}, "warmup", state, log_path)
    return net


def train_joint(net: PhenoNet, data, config: TrainConfig, state: TrainState | None = None,
                start_epoch: int | None = None, log_path=None) -> PhenoNet:
    """Joint weighted objective over epochs [start_epoch, max_epochs).

    ``start_epoch`` defaults to ``warmup_epochs``.
    """
    if not any(config.active.values()):
        raise InputError("no active objective")
    _check_dataset(data, need_labels=config.use_cls)
    net = _prepare(net, config)
    state = state if state is not None else TrainState()
    start = config.warmup_epochs if start_epoch is None else start_epoch
    _run_epochs(net, data, config, range(start, config.max_epochs), config.active, "joint", state, log_path)
    return net


def train(net: PhenoNet, data, config: TrainConfig, log_path=None) -> tuple[PhenoNet, list[dict]]:
    """Warm-up (when the regression term is active) followed by joint training.

    With the regression term ablated there is nothing to warm up, so the
    joint stage starts at epoch 0. Momentum carries over between stages.
    """
    if not any(config.active.values()):
        raise InputError("no active objective")
    if log_path is not None:
        atomic_write_text(log_path, "")
    state = TrainState()
    start = 0
    if config.use_mse and config.warmup_epochs > 0:
        net = train_stage_mse(net, data, config, state, log_path)
        start = config.warmup_epochs
    net = train_joint(net, data, config, state, start, log_path)
    return net, state.log


# --------------------------------------------------------------------------
# checkpoints: magic, u32 manifest length, JSON manifest, tensor payloads


def _entries(net: PhenoNet) -> list[tuple[str, np.ndarray]]:
    items = [(k, p.data) for k, p in net.params.items()]
    items += [(f"buffer:{k}", v) for k, v in net.buffers.items()]
    return items


def save_checkpoint(net: PhenoNet, path, extra: dict | None = None) -> None:
    blobs, entries, offset = [], [], 0
    for name, arr in _entries(net):
        blob = tensor_to_bytes(np.asarray(arr))
        entries.append({"name": name, "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {"config": net.config.to_dict(), "tensors": entries, "extra": extra or {}}
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    atomic_write_bytes(path, CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs))


def load_checkpoint(path) -> tuple[PhenoNet, dict]:
    """Returns (net, extra). Any inconsistency raises CheckpointError."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:5] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(buf) < 9:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack_from("<I", buf, 5)
    try:
        manifest = json.loads(buf[9:9 + mlen].decode("utf-8"))
        config = PhenoNetConfig(**manifest["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from exc
    base = 9 + mlen
    reference = PhenoNet(config)
    expected = {name: arr for name, arr in _entries(reference)}
    loaded: dict[str, np.ndarray] = {}
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise CheckpointError(f"{path}: unexpected tensor {name}")
        start = base + entry["offset"]
        arr, end = tensor_from_bytes(buf, start, f"{path}: {name}")
        if end != start + entry["length"]:
            raise CheckpointError(f"{path}: {name}: offset/length mismatch")
        if arr.shape != expected[name].shape or arr.dtype != expected[name].dtype:
            raise CheckpointError(f"{path}: {name}: shape {arr.shape} {arr.dtype} does not match config")
        loaded[name] = arr
    missing = set(expected) - set(loaded)
    if missing:
        raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in loaded.items() if not k.startswith("buffer:")}
    params = {k: params[k] for k in reference.params}
    buffers = {k[len("buffer:"):]: v for k, v in loaded.items() if k.startswith("buffer:")}
    return PhenoNet(config, params, buffers), manifest.get("extra", {})

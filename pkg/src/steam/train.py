"""SGD with momentum, step schedule, training loop, metrics and checkpoints.

Weight decay is folded into the gradient (``v = mu*v + g + wd*p``) and applies
to every trainable tensor, STEAM projections included.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .data import Dataset, batches
from .errors import CheckpointError, DimensionError, ParameterError, TrainingError
from .rng import Rng

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_acc")


# -- optimizer ----------------------------------------------------------------------------


@dataclass
class OptimizerState:
    velocities: list
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr: float = 0.1

    @classmethod
    def zeros_like(cls, params, **kw) -> "OptimizerState":
        return cls([np.zeros(p.shape) for p in params], **kw)


def sgd_step(params, grads, state: OptimizerState) -> None:
    """In-place update of ``params`` (Tensors) and ``state.velocities``."""
    if not (len(params) == len(grads) == len(state.velocities)):
        raise DimensionError(f"{len(params)} params, {len(grads)} grads, {len(state.velocities)} velocities")
    for i, (p, g, v) in enumerate(zip(params, grads, state.velocities)):
        g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != tuple(p.shape) or v.shape != tuple(p.shape):
            raise DimensionError(f"param {i}: shape {tuple(p.shape)}, grad {g.shape}, velocity {v.shape}")
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data = p.data - state.lr * v


@dataclass
class Schedule:
    initial_lr: float
    milestones: tuple = ()  # 0-based epochs at which the lr is divided
    decay_factor: float = 10.0

    def __post_init__(self):
        ms = tuple(int(m) for m in self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ParameterError(f"milestones must be strictly increasing: {ms}")
        self.milestones = ms

    @classmethod
    def scaled(cls, initial_lr: float, epochs: int, fractions=(0.3, 0.6, 0.9), decay_factor: float = 10.0):
        """Milestones at the given fractions of the epoch budget (duplicates and 0 dropped)."""
        ms = sorted({round(f * epochs) for f in fractions} - {0})
        return cls(initial_lr, tuple(m for m in ms if m < epochs), decay_factor)

    def lr_at(self, epoch: int) -> float:
        return self.initial_lr / self.decay_factor ** sum(1 for m in self.milestones if epoch >= m)


# -- metrics ------------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int  # 1-based
    lr: float
    train_loss: float
    train_acc: float
    val_acc: float
    steps: int

    def row(self) -> list:
        return [self.epoch, repr(self.lr), repr(self.train_loss), repr(self.train_acc), repr(self.val_acc)]


@dataclass
class History:
    epochs: list = field(default_factory=list)

    @property
    def steps(self) -> int:
        return sum(e.steps for e in self.epochs)

    def to_csv(self) -> str:
        lines = [f"# steam metrics v{METRICS_VERSION}", ",".join(METRICS_COLUMNS)]
        lines += [",".join(str(v) for v in e.row()) for e in self.epochs]
        return "\n".join(lines) + "\n"

    def as_array(self) -> np.ndarray:
        return np.array([[e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc, e.steps]
                         for e in self.epochs], dtype=np.float64).reshape(-1, 6)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "History":
        return cls([EpochMetrics(int(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]), int(r[5]))
                    for r in np.asarray(arr).reshape(-1, 6)])


def evaluate(model, ds: Dataset, batch_size: int = 256, topk=(1,)) -> dict:
    """Top-k accuracies (eval mode, no graph recording)."""
    if len(ds) == 0:
        raise ParameterError("cannot evaluate on an empty dataset")
    hits = {k: 0 for k in topk}
    with no_grad():
        for images, labels in batches(ds, batch_size):
            logits = model(images, training=False).data
            order = np.argsort(-logits, axis=1, kind="stable")
            for k in topk:
                hits[k] += int((order[:, :k] == labels[:, None]).any(axis=1).sum())
    return {k: hits[k] / len(ds) for k in topk}


def train_step(model, images, labels, state: OptimizerState, rng: Rng | None) -> tuple[float, int]:
    """One SGD step; returns the batch loss and the number of correct predictions."""
    params = model.parameters()
    for p in params:
        p.grad = None
    logits = model(images, training=True, rng=rng)
    loss = ad.cross_entropy(logits, labels)
    value = loss.item()
    if not math.isfinite(value):
        return value, 0
    loss.backward()
    sgd_step(params, [p.grad for p in params], state)
    return value, int((logits.data.argmax(axis=1) == labels).sum())


def train_epochs(model, ds_train: Dataset, ds_val: Dataset, schedule: Schedule, epochs: int, rng: Rng,
                 batch_size: int = 32, state: OptimizerState | None = None, start_epoch: int = 0,
                 history: History | None = None, hflip: bool = False, on_epoch=None) -> History:
    """Train from ``start_epoch`` (0-based) up to ``epochs``.

    ``rng`` drives shuffling, edge-drop sampling and augmentation, so a run is
    reproducible from its seed. ``on_epoch(epoch, history, state)`` fires after
    every completed epoch (used for checkpointing).
    """
    if len(ds_train) == 0 or len(ds_val) == 0:
        raise ParameterError("training and validation datasets must be non-empty")
    params = model.parameters()
    state = state or OptimizerState.zeros_like(params, lr=schedule.initial_lr)
    history = history or History()
    for epoch in range(start_epoch, epochs):
        state.lr = schedule.lr_at(epoch)
        loss_sum, correct, steps = 0.0, 0, 0
        for images, labels in batches(ds_train, batch_size, shuffle=True, rng=rng, hflip=hflip):
            loss, hits = train_step(model, images, labels, state, rng)
            steps += 1
            if not math.isfinite(loss):
                raise TrainingError(f"loss became {loss} at epoch {epoch + 1}, step {steps} "
                                    f"(global step {history.steps + steps})")
            loss_sum += loss * len(labels)
            correct += hits
        val_acc = evaluate(model, ds_val)[1]
        m = EpochMetrics(epoch + 1, state.lr, loss_sum / len(ds_train), correct / len(ds_train), val_acc, steps)
        history.epochs.append(m)
        log.info("epoch %d lr %.4g loss %.4f train_acc %.4f val_acc %.4f",
                 m.epoch, m.lr, m.train_loss, m.train_acc, m.val_acc)
        if on_epoch is not None:
            on_epoch(epoch + 1, history, state)
    return history


# -- checkpoints --------------------------------------------------------------------------
#
# Layout (little-endian): b"STEAMCKPT", u32 version, blob config-json, blob sha256 hex digest,
# u32 epoch, 4 x u64 rng state, f64 lr, f64 momentum, f64 weight decay, u32 record count,
# then records of (blob name, u32 ndim, ndim x u32 dims, f64 data). A blob is u32 length + bytes.
# Record names are "param/<name>", "velocity/<name>", "extra/<name>" and "history".

CKPT_MAGIC = b"STEAMCKPT"
CKPT_VERSION = 1


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


@dataclass
class Checkpoint:
    config: dict
    epoch: int
    rng_state: tuple
    params: dict  # name -> array
    velocities: dict
    lr: float = 0.0
    momentum: float = 0.9
    weight_decay: float = 1e-4
    history: History = field(default_factory=History)
    extras: dict = field(default_factory=dict)  # name -> array, e.g. normalisation statistics

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def capture(model, state: OptimizerState, epoch: int, rng: Rng, history: History | None = None,
            extras: dict | None = None) -> Checkpoint:
    named = model.named_parameters()
    return Checkpoint(model.config_dict(), epoch, rng.get_state(),
                      {n: t.data.copy() for n, t in named},
                      {n: v.copy() for (n, _), v in zip(named, state.velocities)},
                      state.lr, state.momentum, state.weight_decay, history or History(),
                      {k: np.asarray(v, dtype=np.float64) for k, v in (extras or {}).items()})


def restore(model, ckpt: Checkpoint) -> OptimizerState:
    """Load parameters into ``model`` and return the saved optimizer state."""
    if ckpt.digest != model.config_digest():
        raise CheckpointError("checkpoint config digest does not match the current model config")
    named = model.named_parameters()
    missing = [n for n, _ in named if n not in ckpt.params or n not in ckpt.velocities]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {', '.join(missing[:3])}")
    for n, t in named:
        if ckpt.params[n].shape != tuple(t.shape):
            raise CheckpointError(f"{n}: shape {ckpt.params[n].shape} vs model {tuple(t.shape)}")
        t.data = ckpt.params[n].copy()
    return OptimizerState([ckpt.velocities[n].copy() for n, _ in named],
                          ckpt.momentum, ckpt.weight_decay, ckpt.lr)


def _blob(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _record(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f8")
    return (_blob(name.encode()) + struct.pack("<I", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes())


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = json.dumps(ckpt.config, sort_keys=True).encode()
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _blob(cfg), _blob(ckpt.digest.encode()),
           struct.pack("<I4Q3d", ckpt.epoch, *ckpt.rng_state, ckpt.lr, ckpt.momentum, ckpt.weight_decay)]
    records = [("param/" + n, a) for n, a in ckpt.params.items()]
    records += [("velocity/" + n, a) for n, a in ckpt.velocities.items()]
    records += [("extra/" + n, a) for n, a in ckpt.extras.items()]
    records.append(("history", ckpt.history.as_array()))
    out.append(struct.pack("<I", len(records)))
    out += [_record(n, a) for n, a in records]
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint: {what} needs {n} bytes at byte offset {self.pos}, "
                                  f"file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def blob(self, what: str) -> bytes:
        (n,) = self.unpack("<I", what + " length")
        return self.take(n, what)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise CheckpointError("not a STEAM checkpoint (bad magic at byte offset 0)")
    (version,) = r.unpack("<I", "version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    cfg_bytes = r.blob("config")
    digest = r.blob("digest").decode()
    try:
        config = json.loads(cfg_bytes)
    except ValueError as exc:
        raise CheckpointError(f"config block is not valid JSON: {exc}") from None
    if config_digest(config) != digest:
        raise CheckpointError("stored config digest does not match the stored config")
    epoch, *rest = r.unpack("<I4Q3d", "training state")
    rng_state, (lr, momentum, wd) = tuple(rest[:4]), rest[4:]
    (count,) = r.unpack("<I", "record count")
    params, velocities, extras, history = {}, {}, {}, History()
    for _ in range(count):
        name = r.blob("record name").decode()
        (ndim,) = r.unpack("<I", f"{name} ndim")
        shape = r.unpack(f"<{ndim}I", f"{name} shape")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(8 * n, f"{name} data"), dtype="<f8").reshape(shape).astype(np.float64)
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
        elif kind == "velocity":
            velocities[key] = arr
        elif kind == "extra":
            extras[key] = arr
        elif name == "history":
            history = History.from_array(arr)
        else:
            raise CheckpointError(f"unknown record {name!r}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after byte offset {r.pos}")
    return Checkpoint(config, epoch, rng_state, params, velocities, lr, momentum, wd, history, extras)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    tmp.replace(path)


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    ckpt = decode_checkpoint(buf)
    if expected_digest is not None and ckpt.digest != expected_digest:
        raise CheckpointError("checkpoint config digest does not match the current model config")
    return ckpt

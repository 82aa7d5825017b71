"""Optimisation loop, Adam/SGD updates and the binary checkpoint format."""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .aet import AetConfig, AetParams
from .corpus import MixturePair, batch_segments
from .losses import LOSSES, make_loss, sdr_db
from .separator import SeparationModel, SeparatorParams, StftGeometry, separate_forward

__all__ = [
    "TrainConfig",
    "EpochLog",
    "AdamState",
    "adam_step",
    "sgd_step",
    "TrainingDivergedError",
    "CheckpointError",
    "train",
    "evaluate_sdr",
    "save_checkpoint",
    "load_checkpoint",
    "MAGIC",
]

logger = logging.getLogger(__name__)

MAGIC = b"AETSEPv1"
FORMAT_VERSION = 1


@dataclass
class TrainConfig:
    loss: str = "sdr"
    epochs: int = 10
    batch_size: int = 16
    dropout: float = 0.2
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    seed: int = 0
    segment_len: int = 16000
    target: str = "a"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0 or self.learning_rate < 0 or self.batch_size < 1 or self.segment_len < 1:
            raise ValueError(f"invalid training configuration: {self}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


class EpochLog(NamedTuple):
    epoch: int
    train_loss: float
    val_sdr_db: float


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, ad.Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam update; parameter arrays are replaced, not mutated."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        if m.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"optimizer state for {name} does not match parameter shape {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


def sgd_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], lr: float) -> None:
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {grads[name].shape}, parameter {p.shape}")
        p.data = p.data - lr * grads[name]


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


def evaluate_sdr(model: SeparationModel, pairs: Sequence[MixturePair], target: str = "a") -> float:
    """Mean sdr_db of inference-mode estimates over full sentences."""
    scores = []
    for pair in pairs:
        est = separate_forward(model, pair.mixture.samples).data
        ref = pair.source(target).samples
        if np.any(est) and np.any(ref):
            scores.append(sdr_db(est, ref))
    return float(np.mean(scores)) if scores else float("nan")


def train(
    model: SeparationModel,
    train_pairs: Sequence[MixturePair],
    config: TrainConfig,
    val_pairs: Optional[Sequence[MixturePair]] = None,
    checkpoint_path=None,
    state: Optional[AdamState] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> tuple[SeparationModel, list[EpochLog]]:
    """Train in place and return the model with its per-epoch log.

    Validation uses ``val_pairs`` when given, otherwise the training sentences.
    """
    if not train_pairs:
        raise ValueError("no training mixtures")
    rates = {p.mixture.sample_rate for p in train_pairs}
    if rates != {model.sample_rate}:
        raise ValueError(f"training rates {sorted(rates)} differ from the model rate {model.sample_rate}")
    loss_fn = make_loss(config.loss)
    params = model.named_parameters()
    if state is None:
        state = model.meta.get("optimizer") or AdamState()
    log = list(model.meta.get("log", []))
    first_epoch = len(log) + 1
    step = 0
    for epoch in range(first_epoch, first_epoch + config.epochs):
        losses = []
        batches = batch_segments(
            train_pairs, config.segment_len, config.batch_size, config.seed, epoch, config.target
        )
        for b, (mix_batch, src_batch) in enumerate(batches):
            terms = []
            for i, (mix, src) in enumerate(zip(mix_batch, src_batch)):
                if not np.any(src) or not np.any(mix):
                    continue
                est = separate_forward(model, mix, config.dropout, True, [config.seed, epoch, b, i])
                terms.append(loss_fn(est, src))
            if not terms:
                continue
            total = terms[0]
            for t in terms[1:]:
                total = total + t
            total = total * (1.0 / len(terms))
            value = float(total.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            total.backward()
            grads = {n: (np.zeros_like(p.data) if p.grad is None else p.grad) for n, p in params.items()}
            if config.optimizer == "adam":
                adam_step(params, grads, state, config.learning_rate)
            else:
                sgd_step(params, grads, config.learning_rate)
            losses.append(value)
            step += 1
            if on_step is not None:
                on_step(step, value)
        val = evaluate_sdr(model, val_pairs if val_pairs else train_pairs, config.target)
        entry = EpochLog(epoch, float(np.mean(losses)) if losses else float("nan"), val)
        logger.info("epoch %d: train loss %.6g, val sdr %.2f dB", *entry)
        log.append(entry)
    model.meta["log"] = log
    model.meta["optimizer"] = state
    model.meta["train_config"] = asdict(config)
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path)
    return model, log


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

def _header(model: SeparationModel) -> dict:
    head = {
        "format_version": FORMAT_VERSION,
        "frontend": model.frontend,
        "sample_rate": model.sample_rate,
        "separator_input": model.separator.input_size,
        "separator_hidden": list(model.separator.hidden_sizes),
        "log": [list(e) for e in model.meta.get("log", [])],
        "train_config": model.meta.get("train_config"),
    }
    if model.aet_config is not None:
        head["aet"] = asdict(model.aet_config)
    if model.stft_geometry is not None:
        head["stft"] = asdict(model.stft_geometry)
    state = model.meta.get("optimizer")
    head["optimizer_step"] = 0 if state is None else state.step
    return head


def save_checkpoint(model: SeparationModel, path) -> None:
    """Write ``MAGIC | header | tensors | crc32``; all integers little-endian."""
    head = _header(model)
    tensors = dict((n, t.data) for n, t in model.named_parameters().items())
    state = model.meta.get("optimizer")
    if state is not None:
        for name in sorted(state.m):
            tensors[f"opt.m.{name}"] = state.m[name]
            tensors[f"opt.v.{name}"] = state.v[name]
    head["num_tensors"] = len(tensors)
    text = "\n".join(f"{k}={json.dumps(v, sort_keys=True)}" for k, v in head.items()).encode()
    parts = [MAGIC, struct.pack("<I", len(text)), text]
    for name, arr in tensors.items():
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    payload = b"".join(parts)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))


def _parse(blob: bytes, path) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: file too short to be a checkpoint")
    magic = blob[:len(MAGIC)]
    if magic != MAGIC:
        if magic.startswith(MAGIC[:-1]):
            raise CheckpointError(f"{path}: unsupported checkpoint version {magic.decode(errors='replace')!r}")
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    payload, crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    head = {}
    for line in payload[pos:pos + hlen].decode().splitlines():
        key, _, value = line.partition("=")
        head[key] = json.loads(value)
    pos += hlen
    if head.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {head.get('format_version')}")
    tensors = {}
    for _ in range(head["num_tensors"]):
        (nlen,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        name = payload[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<I", payload, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", payload, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(payload, "<f8", count, pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return head, tensors


def load_checkpoint(path) -> SeparationModel:
    head, tensors = _parse(Path(path).read_bytes(), path)
    frontend = head["frontend"]
    hidden = head["separator_hidden"]
    n_layers = len(hidden) + 1
    layers = [
        (ad.Tensor(tensors[f"sep.{i}.weight"], True), ad.Tensor(tensors[f"sep.{i}.bias"], True))
        for i in range(n_layers)
    ]
    model = SeparationModel(frontend, SeparatorParams(layers), sample_rate=head["sample_rate"])
    if frontend == "stft":
        model.stft_geometry = StftGeometry(**head["stft"])
    else:
        model.aet_config = AetConfig(**head["aet"])
        model.aet_params = AetParams(
            ad.Tensor(tensors["aet.analysis"], True),
            ad.Tensor(tensors["aet.smoothing"], True),
            ad.Tensor(tensors["aet.smoothing_bias"], True),
            ad.Tensor(tensors["aet.synthesis"], True) if "aet.synthesis" in tensors else None,
        )
    model.meta["log"] = [EpochLog(int(e[0]), float(e[1]), float(e[2])) for e in head.get("log", [])]
    if head.get("train_config"):
        model.meta["train_config"] = head["train_config"]
    m = {k[len("opt.m."):]: v for k, v in tensors.items() if k.startswith("opt.m.")}
    if m:
        v = {k[len("opt.v."):]: a for k, a in tensors.items() if k.startswith("opt.v.")}
        model.meta["optimizer"] = AdamState(head["optimizer_step"], m, v)
    return model

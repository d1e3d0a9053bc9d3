"""Training regimes, Adam, learning-rate schedule and checkpoints.

Regimes:
  moddrop             random codes, dynamic head frozen at identity
  moddrop_plus        random codes, dynamic head trained
  moddrop_plus_plus   dynamic head plus intra-subject co-training
  independent         one fixed code for every step, head frozen
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, SegmentationModel
from .data import MultiModalSample
from .dynamic import ModalityCode, as_code
from .errors import ConfigError, FormatError, NumericsError, ShapeError
from .losses import LossConfig, combined_objective, moddrop_objective, ssim
from .metrics import MetricsReport, aggregate, subject_metrics
from .moddrop import DropoutPolicy, apply_dropout, enumerate_configs, make_rng, sample_config
from .tensor import Tensor

log = logging.getLogger(__name__)

REGIMES = ("moddrop", "moddrop_plus", "moddrop_plus_plus", "independent")
LOG_HEADER = ["epoch", "regime", "code_mode", "focal_full", "focal_missing", "ssim", "lr"]


@dataclass
class TrainConfig:
    regime: str = "moddrop_plus_plus"
    code: str | None = None  # fixed code for the independent regime
    epochs: int = 60
    batch_size: int = 8
    lr0: float = 0.01
    decay_start_epoch: int = 20
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.2
    val_every: int = 5
    threshold: float = 0.5

    def validate(self, require_code: bool = True) -> None:
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if require_code and self.regime == "independent" and not self.code:
            raise ConfigError("the independent regime needs a fixed modality code")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
        if self.epochs > 0 and not 0 <= self.decay_start_epoch < self.epochs:
            raise ConfigError("train.decay_start_epoch must lie in [0, epochs)")
        if self.lr0 < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.eps <= 0:
            raise ConfigError("invalid optimizer settings")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in [0, 1)")

    @property
    def trains_head(self) -> bool:
        return self.regime in ("moddrop_plus", "moddrop_plus_plus")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Constant ``lr0`` before ``decay_start_epoch``, then linear to 0 at ``epochs``."""
    if epoch < cfg.decay_start_epoch:
        return cfg.lr0
    return cfg.lr0 * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start_epoch)


# ---------------------------------------------------------------- Adam


def adam_update(params, grads, moments, lr, beta1, beta2, eps, step) -> None:
    """In-place Adam update with bias correction.

    ``moments`` is a list of ``(m, v)`` array pairs aligned with ``params``;
    ``step`` is the 1-based update count.
    """
    if not (len(params) == len(grads) == len(moments)):
        raise ShapeError("params, grads and moments must align")
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for p, g, (m, v) in zip(params, grads, moments):
        if m.shape != p.shape or v.shape != p.shape or g.shape != p.shape:
            raise ShapeError(f"moment/grad shape mismatch for parameter of shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, named_params: list[tuple[str, Tensor]], beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = named_params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(t.data) for n, t in named_params}
        self.v = {n: np.zeros_like(t.data) for n, t in named_params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        names = [n for n, _ in self.params]
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for _, t in self.params]
        adam_update([t.data for _, t in self.params], grads,
                    [(self.m[n], self.v[n]) for n in names], lr, self.beta1, self.beta2, self.eps, self.t)

    def state(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{n}": a for n, a in self.m.items()}
        out.update({f"adam.v.{n}": a for n, a in self.v.items()})
        return out

    def load_state(self, tensors: dict[str, np.ndarray], step: int) -> None:
        for n in self.m:
            self.m[n] = np.array(tensors[f"adam.m.{n}"], dtype=np.float64)
            self.v[n] = np.array(tensors[f"adam.v.{n}"], dtype=np.float64)
        self.t = step


# ---------------------------------------------------------------- batches & steps


def batch_arrays(samples: list[MultiModalSample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.stacked() for s in samples])
    y = np.stack([s.label.astype(np.float64) for s in samples])[:, None]
    return x, y


def draw_codes(n: int, policy: DropoutPolicy, rng: np.random.Generator) -> list[ModalityCode]:
    return [sample_config(policy, rng) for _ in range(n)]


def forward_missing(model: SegmentationModel, x: np.ndarray, codes: list[ModalityCode]) -> Tensor:
    """F_d features of each sample under its own code, concatenated along the batch."""
    feats = [model.features(apply_dropout(x[i:i + 1], c), c) for i, c in enumerate(codes)]
    return T.concat(feats, axis=0)


@dataclass
class StepReport:
    loss: float
    focal_full: float = math.nan
    focal_missing: float = math.nan
    ssim: float = math.nan
    codes: list[str] = field(default_factory=list)


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise NumericsError(f"non-finite loss {value} at {where}")


class Trainer:
    def __init__(self, model: SegmentationModel, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                 policy: DropoutPolicy | None = None):
        cfg.validate()
        self.model, self.cfg = model, cfg
        self.loss_cfg = loss_cfg or LossConfig()
        self.loss_cfg.validate()
        self.policy = policy or DropoutPolicy(model.cfg.k)
        self.policy.validate()
        if cfg.regime == "independent":
            as_code(cfg.code).validate(model.cfg.k)
        for _, t in model.dynamic_parameters():
            t.requires_grad = cfg.trains_head
        trainable = model.parameters() if cfg.trains_head else model.static_parameters()
        self.optimizer = Adam(trainable, cfg.beta1, cfg.beta2, cfg.eps)
        self.epoch = 0

    def _codes(self, n: int, rng) -> list[ModalityCode]:
        if self.cfg.regime == "independent":
            return [as_code(self.cfg.code)] * n
        return draw_codes(n, self.policy, rng)

    def co_train_step(self, samples: list[MultiModalSample], rng, lr: float) -> StepReport:
        if self.cfg.regime != "moddrop_plus_plus":
            raise ConfigError("co_train_step requires the moddrop_plus_plus regime")
        x, y = batch_arrays(samples)
        codes = self._codes(len(samples), rng)
        self.model.zero_grad()
        f = self.model.features(Tensor(x), ModalityCode.full(self.model.cfg.k))
        f_i = forward_missing(self.model, x, codes)
        pred_full = self.model.static_head(f)
        pred_missing = self.model.static_head(f_i)
        parts: dict = {}
        loss = combined_objective(pred_full, pred_missing, y, f, f_i, self.loss_cfg, parts)
        _check_finite(loss.item(), f"epoch {self.epoch}")
        T.backward(loss)
        self.optimizer.step(lr)
        return StepReport(loss.item(), parts["focal_full"], parts["focal_missing"], parts["ssim"],
                          [str(c) for c in codes])

    def train_step_static(self, samples: list[MultiModalSample], rng, lr: float) -> StepReport:
        if self.cfg.regime == "moddrop_plus_plus":
            raise ConfigError("train_step_static does not apply to moddrop_plus_plus")
        x, y = batch_arrays(samples)
        codes = self._codes(len(samples), rng)
        self.model.zero_grad()
        pred = self.model.static_head(forward_missing(self.model, x, codes))
        loss = moddrop_objective(pred, y, self.loss_cfg)
        _check_finite(loss.item(), f"epoch {self.epoch}")
        T.backward(loss)
        self.optimizer.step(lr)
        return StepReport(loss.item(), focal_missing=loss.item(), codes=[str(c) for c in codes])

    def step(self, samples, rng, lr) -> StepReport:
        if self.cfg.regime == "moddrop_plus_plus":
            return self.co_train_step(samples, rng, lr)
        return self.train_step_static(samples, rng, lr)

    def run_epoch(self, train: list[MultiModalSample]) -> list[StepReport]:
        cfg = self.cfg
        order = make_rng(cfg.seed, 0, self.epoch).permutation(len(train))
        lr = lr_at(self.epoch, cfg)
        reports = []
        for b, start in enumerate(range(0, len(train), cfg.batch_size)):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            reports.append(self.step(batch, make_rng(cfg.seed, 1, self.epoch, b), lr))
        self.epoch += 1
        return reports

    @property
    def code_mode(self) -> str:
        return f"fixed:{self.cfg.code}" if self.cfg.regime == "independent" else self.policy.mode


# ---------------------------------------------------------------- evaluation helpers


def unified_codes(k: int, cfg: TrainConfig) -> list[ModalityCode]:
    return [as_code(cfg.code)] if cfg.regime == "independent" else enumerate_configs(k)


def evaluate(model: SegmentationModel, samples: list[MultiModalSample], codes, threshold: float = 0.5,
             min_overlap: int = 1) -> dict[str, MetricsReport]:
    """Per-code metrics over subjects; absent channels are zeroed before the forward."""
    x, y = batch_arrays(samples)
    out = {}
    for code in codes:
        code = as_code(code)
        prob = model.predict(apply_dropout(x, code), code)
        subj = [subject_metrics(s.subject_id, prob[i, 0] >= threshold, y[i, 0] > 0.5, min_overlap=min_overlap)
                for i, s in enumerate(samples)]
        out[str(code)] = aggregate(subj)
    return out


def feature_similarity(model: SegmentationModel, samples: list[MultiModalSample], codes,
                       loss_cfg: LossConfig | None = None) -> float:
    """Mean SSIM between full-modality and missing-modality F_d features."""
    loss_cfg = loss_cfg or LossConfig()
    x, _ = batch_arrays(samples)
    f = model.features(Tensor(x), ModalityCode.full(model.cfg.k))
    rng_val = float(f.data.max() - f.data.min())
    vals = []
    for code in codes:
        code = as_code(code)
        f_i = model.features(apply_dropout(x, code), code)
        vals.append(ssim(T.Tensor(f.data), T.Tensor(f_i.data), loss_cfg, data_range=rng_val).item())
    return float(np.mean(vals))


def split_subjects(dataset: list, test_fraction: float = 0.2) -> tuple[list, list]:
    """Subject-wise 4:1 split: the last ``test_fraction`` of subjects are held out."""
    n_test = max(1, int(round(len(dataset) * test_fraction))) if len(dataset) > 1 else 0
    return dataset[: len(dataset) - n_test], dataset[len(dataset) - n_test:]


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"MDC1"


def _u64_to_chunks(value: int) -> np.ndarray:
    """Split an unsigned 64-bit int into four 16-bit chunks (exact in float32)."""
    return np.array([(value >> (16 * i)) & 0xFFFF for i in range(4)], dtype=np.float64)


def _chunks_to_u64(chunks: np.ndarray) -> int:
    return sum(int(c) << (16 * i) for i, c in enumerate(chunks))


def config_hash(*configs) -> int:
    blob = json.dumps([asdict(c) if hasattr(c, "__dataclass_fields__") else c for c in configs],
                      sort_keys=True, default=str)
    return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "little")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    epoch: int = 0
    seed: int = 0
    config_hash: int = 0
    rng_state: list[int] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param."):]: v for k, v in self.tensors.items() if k.startswith("param.")}

    def to_bytes(self) -> bytes:
        entries = dict(self.tensors)
        entries["meta.epoch"] = np.array([float(self.epoch)])
        entries["meta.seed"] = _u64_to_chunks(self.seed)
        entries["meta.config_hash"] = _u64_to_chunks(self.config_hash)
        entries["meta.rng"] = np.concatenate([_u64_to_chunks(w) for w in self.rng_state]) if self.rng_state \
            else np.zeros(0)
        for key, text in self.meta.items():
            entries[f"text.{key}"] = np.frombuffer(text.encode(), dtype=np.uint8).astype(np.float64)
        out = [CHECKPOINT_MAGIC, struct.pack("<I", len(entries))]
        for name in sorted(entries):
            raw = name.encode()
            out += [struct.pack("<H", len(raw)), raw, T.encode_mdt1(entries[name])]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic", 0)
        if len(buf) < 8:
            raise FormatError("truncated checkpoint header", 4)
        (count,) = struct.unpack_from("<I", buf, 4)
        pos = 8
        entries = {}
        for _ in range(count):
            if pos + 2 > len(buf):
                raise FormatError("truncated checkpoint entry name", pos)
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            if pos + nlen > len(buf):
                raise FormatError("truncated checkpoint entry name", pos)
            try:
                name = buf[pos:pos + nlen].decode()
            except UnicodeDecodeError:
                raise FormatError("entry name is not UTF-8", pos) from None
            pos += nlen
            entries[name], pos = T.decode_mdt1(buf, pos)
        if pos != len(buf):
            raise FormatError("trailing bytes after checkpoint entries", pos)
        try:
            epoch = int(entries.pop("meta.epoch")[0])
            seed = _chunks_to_u64(entries.pop("meta.seed"))
            chash = _chunks_to_u64(entries.pop("meta.config_hash"))
            rng_flat = entries.pop("meta.rng")
        except KeyError as exc:
            raise FormatError(f"checkpoint lacks {exc.args[0]}") from None
        rng_state = [_chunks_to_u64(rng_flat[i:i + 4]) for i in range(0, len(rng_flat), 4)]
        meta = {k[5:]: bytes(entries.pop(k).astype(np.uint8)).decode()
                for k in [k for k in entries if k.startswith("text.")]}
        return cls(entries, epoch, seed, chash, rng_state, meta)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def make_checkpoint(trainer: Trainer, state: dict[str, np.ndarray] | None = None,
                    extra_meta: dict[str, str] | None = None) -> Checkpoint:
    state = state if state is not None else trainer.model.state_dict()
    tensors = {f"param.{n}": a for n, a in state.items()}
    tensors.update(trainer.optimizer.state())
    tensors["adam.t"] = np.array([float(trainer.optimizer.t)])
    rng = make_rng(trainer.cfg.seed, 0, trainer.epoch).bit_generator.state
    words = [int(w) for w in rng["state"]["counter"]] + [int(w) for w in rng["state"]["key"]]
    meta = {"model": json.dumps(asdict(trainer.model.cfg)), "train": json.dumps(asdict(trainer.cfg))}
    meta.update(extra_meta or {})
    return Checkpoint(tensors, trainer.epoch, trainer.cfg.seed,
                      config_hash(trainer.model.cfg, trainer.cfg, trainer.loss_cfg, trainer.policy),
                      words, meta)


def model_from_checkpoint(ckpt: Checkpoint) -> SegmentationModel:
    try:
        mcfg = BackboneConfig(**json.loads(ckpt.meta["model"]))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint has no usable model config: {exc}") from None
    model = SegmentationModel(mcfg)
    model.load_state_dict(ckpt.params())
    return model


def train_config_from_checkpoint(ckpt: Checkpoint) -> TrainConfig:
    return TrainConfig(**json.loads(ckpt.meta["train"]))


# ---------------------------------------------------------------- orchestration


@dataclass
class TrainingResult:
    checkpoint: Checkpoint
    log: list[dict]
    model: SegmentationModel
    best_epoch: int = -1
    best_val_dsc: float = math.nan


def run_training(dataset: list[MultiModalSample], model_cfg: BackboneConfig, cfg: TrainConfig,
                 loss_cfg: LossConfig | None = None, policy: DropoutPolicy | None = None,
                 model_seed: int | None = None) -> TrainingResult:
    """Train one model; returns the best-by-validation-DSC checkpoint and per-epoch log."""
    if not dataset:
        raise ConfigError("training needs a nonempty dataset")
    cfg.validate()
    model = SegmentationModel(model_cfg, seed=cfg.seed if model_seed is None else model_seed)
    trainer = Trainer(model, cfg, loss_cfg, policy)
    n_val = int(round(len(dataset) * cfg.val_fraction)) if len(dataset) > 1 else 0
    train, val = dataset[: len(dataset) - n_val], dataset[len(dataset) - n_val:]
    if not train:
        raise ConfigError("validation split leaves no training subjects")
    codes = unified_codes(model_cfg.k, cfg)

    history: list[dict] = []
    best_state, best_epoch, best_dsc = model.state_dict(), -1, -math.inf
    for epoch in range(cfg.epochs):
        reports = trainer.run_epoch(train)
        row = {
            "epoch": epoch,
            "regime": cfg.regime,
            "code_mode": trainer.code_mode,
            "focal_full": float(np.mean([r.focal_full for r in reports])),
            "focal_missing": float(np.mean([r.focal_missing for r in reports])),
            "ssim": float(np.mean([r.ssim for r in reports])),
            "lr": lr_at(epoch, cfg),
        }
        history.append(row)
        last = epoch == cfg.epochs - 1
        if val and ((epoch + 1) % max(1, cfg.val_every) == 0 or last):
            dsc = float(np.mean([r.dsc for r in evaluate(model, val, codes, cfg.threshold).values()]))
            log.debug("epoch %d val dsc %.4f", epoch, dsc)
            if dsc > best_dsc:
                best_state, best_epoch, best_dsc = model.state_dict(), epoch, dsc
        elif not val:
            best_state, best_epoch = model.state_dict(), epoch
    if cfg.epochs > 0:
        model.load_state_dict(best_state)
    ckpt = make_checkpoint(trainer, best_state, {"best_epoch": str(best_epoch)})
    return TrainingResult(ckpt, history, model, best_epoch, best_dsc)


def write_log_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

"""Modality dropout: configuration enumeration, sampling and channel zeroing.

Inputs are laid out modality-major: channels ``[k*s, (k+1)*s)`` hold the
``s`` slices of modality ``k``. Dropping a modality replaces its channels
with zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamic import ModalityCode, as_code
from .errors import ConfigError, ShapeError
from .tensor import Tensor

MODES = ("uniform_over_configs", "bernoulli_rejection")


def enumerate_configs(k: int) -> list[ModalityCode]:
    """All non-zero K-bit codes, by descending popcount then lexicographically."""
    if not 1 <= k <= 16:
        raise ConfigError(f"modality count K must be in [1, 16], got {k}")
    codes = [format(i, f"0{k}b") for i in range(1, 2**k)]
    codes.sort(key=lambda s: (-s.count("1"), s))
    return [ModalityCode.from_string(s) for s in codes]


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator; ``stream`` derives independent substreams."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass
class DropoutPolicy:
    k: int
    p: list[float] = field(default_factory=list)
    mode: str = "uniform_over_configs"

    def __post_init__(self):
        if not self.p:
            self.p = [0.5] * self.k

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown dropout mode {self.mode!r}; expected one of {MODES}")
        if not 1 <= self.k <= 16:
            raise ConfigError(f"modality count K must be in [1, 16], got {self.k}")
        if len(self.p) != self.k:
            raise ConfigError(f"need {self.k} keep probabilities, got {len(self.p)}")
        if any(not 0.0 <= q <= 1.0 for q in self.p):
            raise ConfigError("keep probabilities must lie in [0, 1]")
        if self.mode == "bernoulli_rejection" and all(q == 0.0 for q in self.p):
            raise ConfigError("all keep probabilities are zero; rejection sampling cannot terminate")

    def probabilities(self) -> dict[str, float]:
        """Exact distribution over valid codes implied by the policy."""
        self.validate()
        codes = enumerate_configs(self.k)
        if self.mode == "uniform_over_configs":
            return {str(c): 1.0 / len(codes) for c in codes}
        raw = {str(c): float(np.prod([q if b else 1.0 - q for b, q in zip(c.bits, self.p)])) for c in codes}
        total = sum(raw.values())
        return {c: v / total for c, v in raw.items()}


def sample_config(policy: DropoutPolicy, rng: np.random.Generator) -> ModalityCode:
    policy.validate()
    if policy.mode == "uniform_over_configs":
        # integers in [1, 2^K): MSB first maps bit j to modality j
        idx = int(rng.integers(1, 2**policy.k))
        return ModalityCode.from_string(format(idx, f"0{policy.k}b"))
    p = np.asarray(policy.p)
    while True:
        bits = rng.random(policy.k) < p
        if bits.any():
            return ModalityCode(tuple(bits.tolist()))


def stack_modalities(sample) -> np.ndarray:
    """[1, K*slices, H, W] channel-concatenation of a sample's modality stacks."""
    return np.concatenate(list(sample.modalities), axis=0)[None]


def apply_dropout(x, code, k: int | None = None) -> Tensor:
    """Zero the channels of absent modalities.

    ``x`` is a sample with ``modalities`` or an [N, K*slices, H, W] array/Tensor.
    """
    code = as_code(code)
    if hasattr(x, "modalities"):
        if len(code) != len(x.modalities):
            raise ShapeError(f"code {code} has {len(code)} bits, sample has {len(x.modalities)} modalities")
        arr = stack_modalities(x)
    else:
        arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        if arr.ndim != 4:
            raise ShapeError(f"apply_dropout expects [N,C,H,W], got {arr.shape}")
        if k is not None and len(code) != k:
            raise ShapeError(f"code {code} has {len(code)} bits, expected {k}")
        if arr.shape[1] % len(code):
            raise ShapeError(f"{arr.shape[1]} channels do not split into {len(code)} modalities")
    code.validate()
    s = arr.shape[1] // len(code)
    if code.is_full:
        return Tensor(arr.copy())
    out = arr.copy()
    for j, present in enumerate(code.bits):
        if not present:
            out[:, j * s:(j + 1) * s] = 0.0
    return Tensor(out)

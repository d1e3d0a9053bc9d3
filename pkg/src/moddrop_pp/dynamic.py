"""Modality-conditioned filter scaling for the first convolution layer.

A 1x1 convolution over a K-channel 1x1 input is an affine map, so the head
is stored as a dense ``[u*v + v, K]`` weight plus bias. Its output is split
into a ``u x v`` kernel-scaling matrix and ``v`` bias scales; each kernel
``base_weight[o, i]`` is multiplied by ``M[i, o]`` and each bias by ``s[o]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import InvalidCodeError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class ModalityCode:
    bits: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def from_string(cls, text: str) -> "ModalityCode":
        if not text or set(text) - {"0", "1"}:
            raise InvalidCodeError(f"modality code must be a bit string, got {text!r}")
        return cls(tuple(c == "1" for c in text))

    @classmethod
    def full(cls, k: int) -> "ModalityCode":
        return cls((True,) * k)

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join("1" if b else "0" for b in self.bits)

    @property
    def is_full(self) -> bool:
        return all(self.bits)

    @property
    def popcount(self) -> int:
        return sum(self.bits)

    def as_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)

    def validate(self, k: int | None = None) -> None:
        if k is not None and len(self.bits) != k:
            raise ShapeError(f"modality code {self} has {len(self.bits)} bits, expected {k}")
        if not any(self.bits):
            raise InvalidCodeError("the all-zero modality code is never a valid input")


def as_code(code) -> ModalityCode:
    if isinstance(code, ModalityCode):
        return code
    if isinstance(code, str):
        return ModalityCode.from_string(code)
    return ModalityCode(tuple(code))


def scaling_param_count(u: int, v: int, p: int, q: int) -> tuple[int, int]:
    """(parameters of a fully generated layer, generated scales) with b = v biases."""
    return u * v * p * q + v, u * v + v


class DynamicHead:
    def __init__(self, k: int, u: int, v: int):
        self.k, self.u, self.v = k, u, v
        n_out = u * v + v
        self.weight = Tensor(np.zeros((n_out, k)), requires_grad=True)
        self.bias = Tensor(np.ones(n_out), requires_grad=True)

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("weight", self.weight), ("bias", self.bias)]

    @property
    def num_params(self) -> int:
        return self.weight.size + self.bias.size

    def compute_scales(self, code) -> tuple[Tensor, Tensor]:
        code = as_code(code)
        code.validate(self.k)
        flat = T.add(T.matmul(self.weight, Tensor(code.as_array())), self.bias)
        uv = self.u * self.v
        return T.reshape(flat[:uv], (self.u, self.v)), flat[uv:]


class DynamicConvLayer:
    """First convolution F_d: base kernels scaled per modality code."""

    def __init__(self, k: int, u: int, v: int, kernel: int = 3, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.k, self.u, self.v, self.kernel = k, u, v, kernel
        fan_in = u * kernel * kernel
        init = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(v, u, kernel, kernel))
        self.base_weight = Tensor(T.to_float32_precision(init), requires_grad=True)
        self.base_bias = Tensor(np.zeros(v), requires_grad=True)
        self.head = DynamicHead(k, u, v)

    @property
    def padding(self) -> int:
        return self.kernel // 2

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("base_weight", self.base_weight), ("base_bias", self.base_bias)] + [
            (f"head.{n}", t) for n, t in self.head.parameters()
        ]

    def effective_params(self, code) -> tuple[Tensor, Tensor]:
        m, s = self.head.compute_scales(code)
        return T.scale_kernels(self.base_weight, m), T.mul(s, self.base_bias)

    def static_forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.base_weight, self.base_bias, 1, self.padding)

    def forward(self, x: Tensor, code) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.u:
            raise ShapeError(f"dynamic layer expects {self.u} input channels, got shape {x.shape}")
        weight, bias = self.effective_params(code)
        return T.conv2d(x, weight, bias, 1, self.padding)


def dynamic_forward(layer: DynamicConvLayer, x: Tensor, code) -> Tensor:
    return layer.forward(x, code)


def compute_scales(head: DynamicHead, code) -> tuple[Tensor, Tensor]:
    return head.compute_scales(code)


"""Small densely connected segmentation network split into F_d and F_s.

F_d is the modality-conditioned first convolution. F_s is a stack of dense
blocks, each layer computing relu -> 3x3 conv -> concat with its input,
followed by relu -> 1x1 conv -> sigmoid. No downsampling, so the output has
the input's spatial size.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .dynamic import DynamicConvLayer, as_code, scaling_param_count
from .errors import ConfigError, ShapeError
from .tensor import Tensor

# prior lesion probability used to initialize the output bias
_OUTPUT_PRIOR = 0.05


@dataclass
class BackboneConfig:
    k: int = 4
    slices_per_modality: int = 3
    first_layer_out: int = 32
    dense_blocks: int = 3
    layers_per_block: int = 3
    growth_rate: int = 8
    kernel: int = 3

    @property
    def in_channels(self) -> int:
        return self.k * self.slices_per_modality

    def validate(self) -> None:
        if self.k < 1 or self.slices_per_modality < 1 or self.first_layer_out < 1:
            raise ConfigError("model: k, slices_per_modality and first_layer_out must be >= 1")
        if self.dense_blocks < 0 or self.layers_per_block < 0 or self.growth_rate < 1:
            raise ConfigError("model: invalid dense block configuration")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("model: kernel must be a positive odd integer")


def _he_init(rng, shape) -> Tensor:
    fan_in = int(np.prod(shape[1:]))
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return Tensor(T.to_float32_precision(w), requires_grad=True)


class SegmentationModel:
    def __init__(self, cfg: BackboneConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.f_d = DynamicConvLayer(cfg.k, cfg.in_channels, cfg.first_layer_out, cfg.kernel, rng)
        self.dense: list[list[tuple[Tensor, Tensor]]] = []
        channels = cfg.first_layer_out
        for _ in range(cfg.dense_blocks):
            block = []
            for _ in range(cfg.layers_per_block):
                w = _he_init(rng, (cfg.growth_rate, channels, cfg.kernel, cfg.kernel))
                block.append((w, Tensor(np.zeros(cfg.growth_rate), requires_grad=True)))
                channels += cfg.growth_rate
            self.dense.append(block)
        self.final_weight = _he_init(rng, (1, channels, 1, 1))
        prior = np.log(_OUTPUT_PRIOR / (1.0 - _OUTPUT_PRIOR))
        self.final_bias = Tensor(T.to_float32_precision(np.array([prior])), requires_grad=True)

    # ------------------------------------------------------------ parameters

    def dynamic_parameters(self) -> list[tuple[str, Tensor]]:
        """theta_d: the dynamic head only."""
        return [(f"f_d.{n}", t) for n, t in self.f_d.parameters() if n.startswith("head.")]

    def static_parameters(self) -> list[tuple[str, Tensor]]:
        """Base F_d parameters plus everything in F_s."""
        out = [("f_d.base_weight", self.f_d.base_weight), ("f_d.base_bias", self.f_d.base_bias)]
        for b, block in enumerate(self.dense):
            for i, (w, bias) in enumerate(block):
                out += [(f"f_s.block{b}.layer{i}.weight", w), (f"f_s.block{b}.layer{i}.bias", bias)]
        out += [("f_s.final.weight", self.final_weight), ("f_s.final.bias", self.final_bias)]
        return out

    def parameters(self) -> list[tuple[str, Tensor]]:
        return self.static_parameters() + self.dynamic_parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.parameters())
        missing = set(params) - set(state)
        if missing:
            raise ConfigError(f"state is missing parameters: {sorted(missing)}")
        for name, t in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.shape:
                raise ShapeError(f"parameter {name}: stored shape {arr.shape}, model expects {t.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.zero_grad()

    # ------------------------------------------------------------ forward

    def features(self, x: Tensor, code) -> Tensor:
        return self.f_d.forward(x, code)

    def static_head(self, f: Tensor) -> Tensor:
        """F_s: feature map -> lesion probability map."""
        h = f
        for block in self.dense:
            for w, b in block:
                new = T.conv2d(T.relu(h), w, b, 1, self.cfg.kernel // 2)
                h = T.concat_channels([h, new])
        return T.sigmoid(T.conv2d(T.relu(h), self.final_weight, self.final_bias, 1, 0))

    def forward_split(self, x: Tensor, code) -> tuple[Tensor, Tensor]:
        self._check_input(x)
        f = self.features(x, code)
        return f, self.static_head(f)

    def forward_static(self, x: Tensor) -> Tensor:
        """Forward with the F_d base parameters unscaled (the plain static network)."""
        self._check_input(x)
        return self.static_head(self.f_d.static_forward(x))

    def predict(self, x, code) -> np.ndarray:
        """Probability map as a plain array; no graph is kept."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self.forward_split(x, as_code(code))[1].data

    def _check_input(self, x: Tensor) -> None:
        u = self.cfg.in_channels
        if x.data.ndim != 4 or x.shape[1] != u:
            raise ShapeError(f"model expects [N,{u},H,W] input, got {x.shape}")
        if min(x.shape[2:]) < self.cfg.kernel:
            raise ShapeError(f"spatial extent {x.shape[2:]} smaller than kernel {self.cfg.kernel}")


@dataclass
class ParameterCensus:
    head: int
    f_d_base: int
    f_s: int
    head_scales: int
    full_generation: int

    @property
    def theta_d(self) -> int:
        return self.head

    @property
    def theta_s(self) -> int:
        return self.f_d_base + self.f_s

    @property
    def total(self) -> int:
        return self.head + self.f_d_base + self.f_s


def parameter_census(model: SegmentationModel) -> ParameterCensus:
    cfg = model.cfg
    f_d_base = model.f_d.base_weight.size + model.f_d.base_bias.size
    f_s = sum(t.size for n, t in model.static_parameters() if n.startswith("f_s."))
    full, scaled = scaling_param_count(cfg.in_channels, cfg.first_layer_out, cfg.kernel, cfg.kernel)
    return ParameterCensus(
        head=model.f_d.head.num_params,
        f_d_base=f_d_base,
        f_s=f_s,
        head_scales=scaled,
        full_generation=full,
    )


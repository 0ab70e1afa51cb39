"""The texture network: a fire-module backbone with a pooled linear head.

Backbone: Conv(3->96, 7x7/2) -> maxpool 3x3/2 -> fire1..fire3 -> maxpool ->
fire4..fire7 -> maxpool -> fire8, all ReLU-activated, max pools in ceil mode,
no padding except the 3x3 expand branches. Head: global avg+max pool concat
(1024) -> batch norm -> dropout -> linear 1024->512 -> batch norm -> dropout
-> linear 512->K -> softmax. Backbone convolutions carry biases and no batch
norm; with K=8 the trainable parameter count is exactly 1,267,400.

Parameters are grouped into four blocks for discriminative fine-tuning:
group 1 = stem conv + fire1, group 2 = fire2..fire4, group 3 = fire5..fire7,
group 4 = fire8 + head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor

DEFAULT_NUM_CLASSES = 8
DEFAULT_INPUT_SIZE = 224
DEFAULT_DROPOUT = (0.25, 0.5)
EXPECTED_PARAMETER_COUNT = 1_267_400

POOLED_FEATURES = 1024   # 512 channels x (avg, max)
HIDDEN_FEATURES = 512


@dataclass(frozen=True)
class FireSpec:
    """Channel widths of one fire module.

    One expand branch may be empty (width 0), degenerating the module into
    two stacked convolutions.
    """

    squeeze: int
    expand1x1: int
    expand3x3: int

    def __post_init__(self):
        if self.squeeze <= 0 or self.expand1x1 < 0 or self.expand3x3 < 0:
            raise ValueError(f"invalid fire widths: {self}")
        if self.out_channels <= 0:
            raise ValueError(f"fire must have at least one expand filter: {self}")
        if self.squeeze > self.out_channels:
            raise ValueError(f"squeeze exceeds expand width: {self}")

    @property
    def out_channels(self) -> int:
        return self.expand1x1 + self.expand3x3


BACKBONE_FIRE_SPECS = (
    FireSpec(16, 64, 64),
    FireSpec(16, 64, 64),
    FireSpec(32, 128, 128),
    FireSpec(32, 128, 128),
    FireSpec(48, 192, 192),
    FireSpec(48, 192, 192),
    FireSpec(64, 256, 256),
    FireSpec(64, 256, 256),
)

# fire index (1-based) -> discriminative group
_FIRE_GROUPS = {1: 1, 2: 2, 3: 2, 4: 2, 5: 3, 6: 3, 7: 3, 8: 4}


def kaiming_normal(shape: tuple[int, ...], fan_in: int,
                   gen: np.random.Generator) -> np.ndarray:
    """He initialization for ReLU layers: N(0, 2/fan_in), fan-in mode."""
    std = np.sqrt(2.0 / fan_in)
    return (gen.standard_normal(shape) * std).astype(np.float32)


class Conv2dUnit:
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int = 1, padding: int = 0,
                 gen: Optional[np.random.Generator] = None):
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        if gen is None:
            w = np.zeros((out_channels, in_channels, kernel, kernel), np.float32)
        else:
            w = kaiming_normal((out_channels, in_channels, kernel, kernel), fan_in, gen)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class LinearUnit:
    def __init__(self, in_features: int, out_features: int,
                 gen: Optional[np.random.Generator] = None):
        if gen is None:
            w = np.zeros((out_features, in_features), np.float32)
        else:
            w = kaiming_normal((out_features, in_features), in_features, gen)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class BatchNorm1dUnit:
    def __init__(self, features: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.momentum = momentum
        self.weight = Tensor(np.ones(features, np.float32), requires_grad=True)   # gamma
        self.bias = Tensor(np.zeros(features, np.float32), requires_grad=True)    # beta
        self.running_mean = np.zeros(features, np.float32)
        self.running_var = np.ones(features, np.float32)

    def __call__(self, x: Tensor, mode: str) -> Tensor:
        # a frozen batch-norm layer also stops updating its running stats
        update = mode == "train" and self.weight.requires_grad
        return T.batch_norm_1d(x, self.weight, self.bias, self.running_mean,
                               self.running_var, mode=mode, momentum=self.momentum,
                               eps=self.eps, update_running=update)

    def params(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class FireUnit:
    """1x1 squeeze feeding parallel 1x1 and padded 3x3 expands, concatenated."""

    def __init__(self, in_channels: int, spec: FireSpec,
                 gen: Optional[np.random.Generator] = None):
        if in_channels <= 0:
            raise ValueError(f"fire input channels must be positive, got {in_channels}")
        self.spec = spec
        self.squeeze = Conv2dUnit(in_channels, spec.squeeze, 1, gen=gen)
        self.expand1x1 = (Conv2dUnit(spec.squeeze, spec.expand1x1, 1, gen=gen)
                          if spec.expand1x1 else None)
        self.expand3x3 = (Conv2dUnit(spec.squeeze, spec.expand3x3, 3, padding=1, gen=gen)
                          if spec.expand3x3 else None)

    def __call__(self, x: Tensor) -> Tensor:
        s = T.relu(self.squeeze(x))
        if self.expand1x1 is None:
            return T.relu(self.expand3x3(s))
        if self.expand3x3 is None:
            return T.relu(self.expand1x1(s))
        return T.concat_channels(T.relu(self.expand1x1(s)), T.relu(self.expand3x3(s)))

    def named_units(self) -> dict[str, Conv2dUnit]:
        out = {"squeeze": self.squeeze}
        if self.expand1x1 is not None:
            out["expand1x1"] = self.expand1x1
        if self.expand3x3 is not None:
            out["expand3x3"] = self.expand3x3
        return out


def build_fire(in_channels: int, spec: FireSpec,
               rng: Optional[RngStream] = None) -> FireUnit:
    gen = rng.generator("init.fire") if rng is not None else None
    return FireUnit(in_channels, spec, gen=gen)


@dataclass
class ForwardResult:
    logits: Tensor
    probs: np.ndarray
    features: Tensor                   # last fire concat output, kept for Grad-CAM
    trace: dict[str, tuple[int, ...]] = field(default_factory=dict)


class TextureNet:
    """The full network with named parameters and layer-group bookkeeping."""

    def __init__(self, num_classes: int = DEFAULT_NUM_CLASSES,
                 input_size: int = DEFAULT_INPUT_SIZE,
                 dropout: tuple[float, float] = DEFAULT_DROPOUT,
                 rng: Optional[RngStream] = None,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.1):
        gen = rng.generator("init.network") if rng is not None else None
        self.num_classes = num_classes
        self.input_size = input_size
        self.dropout_p = tuple(dropout)
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum

        self.conv1 = Conv2dUnit(3, 96, 7, stride=2, padding=0, gen=gen)
        self.fires: list[FireUnit] = []
        in_ch = 96
        for spec in BACKBONE_FIRE_SPECS:
            self.fires.append(FireUnit(in_ch, spec, gen=gen))
            in_ch = spec.out_channels

        self.bn1 = BatchNorm1dUnit(POOLED_FEATURES, eps=bn_eps, momentum=bn_momentum)
        self.linear1 = LinearUnit(POOLED_FEATURES, HIDDEN_FEATURES, gen=gen)
        self.bn2 = BatchNorm1dUnit(HIDDEN_FEATURES, eps=bn_eps, momentum=bn_momentum)
        self.linear2 = LinearUnit(HIDDEN_FEATURES, num_classes, gen=gen)

    # ------------------------------------------------------------------ names
    def _named_units(self) -> list[tuple[str, int, object]]:
        """(prefix, group, unit) triples in canonical serialization order."""
        units: list[tuple[str, int, object]] = [("backbone.conv1", 1, self.conv1)]
        for i, fire in enumerate(self.fires, start=1):
            for sub, unit in fire.named_units().items():
                units.append((f"backbone.fire{i}.{sub}", _FIRE_GROUPS[i], unit))
        units += [
            ("head.bn1", 4, self.bn1),
            ("head.linear1", 4, self.linear1),
            ("head.bn2", 4, self.bn2),
            ("head.linear2", 4, self.linear2),
        ]
        return units

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, _, unit in self._named_units():
            for name, p in unit.params().items():
                out[f"{prefix}.{name}"] = p
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, _, unit in self._named_units():
            if isinstance(unit, BatchNorm1dUnit):
                for name, b in unit.buffers().items():
                    out[f"{prefix}.{name}"] = b
        return out

    def parameter_groups(self) -> dict[int, dict[str, Tensor]]:
        groups: dict[int, dict[str, Tensor]] = {1: {}, 2: {}, 3: {}, 4: {}}
        for prefix, group, unit in self._named_units():
            for name, p in unit.params().items():
                groups[group][f"{prefix}.{name}"] = p
        return groups

    def group_of(self, param_name: str) -> int:
        for prefix, group, unit in self._named_units():
            if param_name.startswith(prefix + "."):
                return group
        raise KeyError(param_name)

    def count_parameters(self, trainable_only: bool = False) -> int:
        return sum(p.size for p in self.named_parameters().values()
                   if not trainable_only or p.requires_grad)

    # ---------------------------------------------------------------- control
    def set_trainable(self, groups: Iterable[int]) -> None:
        groups = set(groups)
        if not groups:
            raise ValueError("set_trainable: group set must be nonempty")
        if not groups <= {1, 2, 3, 4}:
            raise ValueError(f"set_trainable: unknown groups {groups - {1, 2, 3, 4}}")
        for prefix, group, unit in self._named_units():
            flag = group in groups
            for p in unit.params().values():
                p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # ---------------------------------------------------------------- forward
    def forward(self, batch: Tensor | np.ndarray, mode: str = "eval",
                rng: Optional[np.random.Generator] = None,
                input_grad: bool = False) -> ForwardResult:
        if mode not in ("train", "eval"):
            raise ValueError(f"forward: unknown mode {mode!r}")
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if input_grad:
            x.requires_grad = True
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.input_size \
                or x.shape[3] != self.input_size:
            raise T.ShapeMismatchError(
                f"forward expects (N,3,{self.input_size},{self.input_size}) input, "
                f"got {x.shape}")
        if mode == "train" and rng is None:
            raise ValueError("forward: train mode requires an rng generator for dropout")

        trace: dict[str, tuple[int, ...]] = {}
        h = T.relu(self.conv1(x))
        trace["conv1"] = h.shape
        h = T.maxpool2d(h, 3, 2, ceil_mode=True)
        trace["maxpool1"] = h.shape
        for i, fire in enumerate(self.fires, start=1):
            h = fire(h)
            trace[f"fire{i}"] = h.shape
            if i in (3, 7):
                h = T.maxpool2d(h, 3, 2, ceil_mode=True)
                trace[f"maxpool{2 if i == 3 else 3}"] = h.shape
        features = h

        h = T.adaptive_pool_pair(h)
        trace["pool_pair"] = h.shape
        h = self.bn1(h, mode)
        h = T.dropout(h, self.dropout_p[0], mode, rng)
        h = self.linear1(h)
        trace["linear1"] = h.shape
        h = self.bn2(h, mode)
        h = T.dropout(h, self.dropout_p[1], mode, rng)
        logits = self.linear2(h)
        trace["linear2"] = logits.shape

        probs = T.softmax(logits.data)
        return ForwardResult(logits=logits, probs=probs, features=features, trace=trace)

    # ------------------------------------------------------------------ state
    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in canonical order."""
        out = {name: p.data for name, p in self.named_parameters().items()}
        out.update(self.named_buffers())
        return out

    def load_state(self, tensors: dict[str, np.ndarray],
                   backbone_only: bool = False) -> None:
        """Copy arrays into the model; missing or misshapen names are fatal."""
        params = self.named_parameters()
        buffers = self.named_buffers()
        wanted = {**params, **buffers}
        if backbone_only:
            wanted = {k: v for k, v in wanted.items() if k.startswith("backbone.")}
        missing = [k for k in wanted if k not in tensors]
        misshapen = [k for k in wanted if k in tensors
                     and tuple(tensors[k].shape) != tuple(wanted[k].shape)]
        if missing or misshapen:
            raise ValueError(
                "checkpoint does not cover the model: "
                f"missing={sorted(missing)} misshapen={sorted(misshapen)}")
        for name in wanted:
            arr = np.asarray(tensors[name], dtype=np.float32)
            if name in params and (not backbone_only or name.startswith("backbone.")):
                params[name].data = arr.copy()
            elif name in buffers:
                buffers[name][...] = arr

    def copy(self, dtype=None) -> "TextureNet":
        """Deep parameter copy; optionally cast to another float dtype."""
        clone = TextureNet(self.num_classes, self.input_size, self.dropout_p,
                           bn_eps=self.bn_eps, bn_momentum=self.bn_momentum)
        src_p, dst_p = self.named_parameters(), clone.named_parameters()
        for name, p in src_p.items():
            dst_p[name].data = p.data.astype(dtype or np.float32).copy()
            dst_p[name].requires_grad = p.requires_grad
        src_b, dst_b = self.named_buffers(), clone.named_buffers()
        for name, b in src_b.items():
            dst_b[name][...] = b
        if dtype is not None and dtype != np.float32:
            for prefix, _, unit in clone._named_units():
                if isinstance(unit, BatchNorm1dUnit):
                    unit.running_mean = unit.running_mean.astype(dtype)
                    unit.running_var = unit.running_var.astype(dtype)
        return clone


def build_network(num_classes: int = DEFAULT_NUM_CLASSES,
                  input_size: int = DEFAULT_INPUT_SIZE,
                  dropout: tuple[float, float] = DEFAULT_DROPOUT,
                  rng: Optional[RngStream] = None,
                  pretrained: Optional[dict[str, np.ndarray]] = None,
                  bn_eps: float = 1e-5, bn_momentum: float = 0.1) -> TextureNet:
    """Assemble the network.

    The head is always freshly Kaiming-initialized; the backbone either loads
    from ``pretrained`` (a name->array map that must cover every backbone
    tensor) or is Kaiming-initialized too. Batch-norm scales start at 1,
    offsets at 0, running stats at (0, 1).
    """
    if rng is None:
        rng = RngStream(0)
    model = TextureNet(num_classes=num_classes, input_size=input_size,
                       dropout=dropout, rng=rng, bn_eps=bn_eps,
                       bn_momentum=bn_momentum)
    if pretrained is not None:
        model.load_state(pretrained, backbone_only=True)
    return model


def shape_trace(model: TextureNet, batch_size: int = 1) -> dict[str, tuple[int, ...]]:
    """Run a zero batch through the model and report per-stage output shapes."""
    x = np.zeros((batch_size, 3, model.input_size, model.input_size), np.float32)
    return model.forward(x, mode="eval").trace

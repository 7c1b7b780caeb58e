"""Layers, the quantized-layer wrapper and model construction."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .quantizer import (
    FULL_PRECISION,
    Mode,
    QuantizerParams,
    init_alpha,
    init_bounds_first_batch,
    quantize_forward,
    quantize_values,
)

logger = logging.getLogger(__name__)


@dataclass
class ForwardPass:
    """Per-call switches threaded through the layers."""

    training: bool = True
    update_stats: bool = True
    overrides: dict = field(default_factory=dict)
    capture: Optional[dict] = None


class Layer:
    name = ""

    def forward(self, x: Tensor, fp: ForwardPass) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[tuple[str, Tensor]]:
        return []

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return []

    def out_shape(self, shape: tuple) -> tuple:
        return shape


class Dense(Layer):
    """Fully connected layer, ``y = x @ W (+ b)`` with W of shape [in, out].

    A bias is only allowed on layers that stay in full precision.
    """

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32, bias: bool = False):
        std = math.sqrt(2.0 / n_in)
        self.weight = Tensor(rng.standard_normal((n_in, n_out)) * std, requires_grad=True, dtype=dtype)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True, dtype=dtype) if bias else None

    def apply(self, w: Tensor, x: Tensor) -> Tensor:
        out = ad.matmul(x, w)
        return out if self.bias is None else out + self.bias

    def apply_values(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.apply(Tensor(w, dtype=w.dtype), Tensor(x, dtype=x.dtype)).data

    def out_shape(self, shape):
        if shape[-1] != self.weight.shape[0]:
            raise ad.ShapeError(f"{self.name}: expects {self.weight.shape[0]} features, got shape {shape}")
        return shape[:-1] + (self.weight.shape[1],)


class Conv2d(Layer):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, rng: np.random.Generator, dtype=np.float32):
        std = math.sqrt(2.0 / (c_in * kernel * kernel))
        self.weight = Tensor(rng.standard_normal((c_out, c_in, kernel, kernel)) * std, requires_grad=True, dtype=dtype)
        self.stride = stride
        self.padding = padding

    def apply(self, w: Tensor, x: Tensor) -> Tensor:
        return ad.conv2d(x, w, self.stride, self.padding)

    def apply_values(self, w: np.ndarray, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            return self.apply(Tensor(w, dtype=w.dtype), Tensor(x, dtype=x.dtype)).data

    def out_shape(self, shape):
        f, c, kh, kw = self.weight.shape
        if len(shape) != 3 or shape[0] != c:
            raise ad.ShapeError(f"{self.name}: expects [{c},H,W] input, got {shape}")
        h = ad.conv_output_size(shape[1], kh, self.stride, self.padding)
        w = ad.conv_output_size(shape[2], kw, self.stride, self.padding)
        if h < 1 or w < 1:
            raise ad.ShapeError(f"{self.name}: kernel {kh}x{kw} does not fit input {shape}")
        return (f, h, w)


class QuantizedLayer(Layer):
    """Dense or conv layer with weight/activation quantizers and output scale alpha.

    ``out = alpha * inner(Q_W(weight), Q_A(x))``.  An exempt layer, or one whose
    quantizers are both full precision, runs the plain inner layer.  Bounds and
    alpha are initialized from the first batch that passes through.
    """

    def __init__(self, inner: Dense | Conv2d, w_bits: int, a_bits: int, exempt: bool = False, name: str = ""):
        if getattr(inner, "bias", None) is not None and not exempt:
            raise ValueError(f"{name}: quantized layers are bias-free; only exempt layers may have a bias")
        self.inner = inner
        self.name = name
        inner.name = name
        self.exempt = exempt
        self.wq = QuantizerParams(FULL_PRECISION if exempt else w_bits, Mode.WEIGHT, name=f"{name}.wq")
        self.aq = QuantizerParams(FULL_PRECISION if exempt else a_bits, Mode.ACTIVATION, name=f"{name}.aq")
        dtype = inner.weight.dtype
        self.wq.l, self.wq.u = Tensor(0.0, True, dtype), Tensor(1.0, True, dtype)
        self.aq.l, self.aq.u = Tensor(0.0, True, dtype), Tensor(1.0, True, dtype)
        self.alpha = Tensor(1.0, requires_grad=True, dtype=dtype)
        self.initialized = False

    @property
    def weight(self) -> Tensor:
        return self.inner.weight

    @property
    def active(self) -> bool:
        return not self.exempt and (self.wq.enabled or self.aq.enabled)

    def quantizers(self) -> list[QuantizerParams]:
        if not self.active:
            return []
        return [q for q in (self.wq, self.aq) if q.enabled]

    def initialize(self, x: np.ndarray) -> None:
        w = self.weight.data
        if self.wq.enabled:
            self.wq.set_bounds(*init_bounds_first_batch(w, Mode.WEIGHT))
        if self.aq.enabled:
            self.aq.set_bounds(*init_bounds_first_batch(x, Mode.ACTIVATION))
        o = self.inner.apply_values(w, x)
        o_q = self.inner.apply_values(quantize_values(w, self.wq), quantize_values(x, self.aq))
        self.alpha.data[...] = init_alpha(o, o_q)
        self.initialized = True
        logger.debug("%s: initialized l/u and alpha=%.6g", self.name, float(self.alpha.data))

    def forward(self, x: Tensor, fp: ForwardPass) -> Tensor:
        if not self.active:
            return self.inner.apply(self.weight, x)
        if not self.initialized:
            self.initialize(x.data)
        w = quantize_forward(self.weight, self.wq, fp.overrides.get(self.wq.name), fp.capture)
        a = quantize_forward(x, self.aq, fp.overrides.get(self.aq.name), fp.capture)
        return self.inner.apply(w, a) * self.alpha

    def parameters(self):
        params = [(f"{self.name}.weight", self.weight)]
        if getattr(self.inner, "bias", None) is not None:
            params.append((f"{self.name}.bias", self.inner.bias))
        if self.active:
            params.append((f"{self.name}.alpha", self.alpha))
            for q in self.quantizers():
                params += [(f"{q.name}.l", q.l), (f"{q.name}.u", q.u)]
        return params

    def out_shape(self, shape):
        return self.inner.out_shape(shape)


class BatchNorm(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.zeros(channels), requires_grad=True, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, fp):
        return ad.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=fp.training, momentum=self.momentum, eps=self.eps,
            update_stats=fp.update_stats,
        )

    def parameters(self):
        return [(f"{self.name}.gamma", self.gamma), (f"{self.name}.beta", self.beta)]

    def buffers(self):
        return [(f"{self.name}.running_mean", self.running_mean), (f"{self.name}.running_var", self.running_var)]

    def out_shape(self, shape):
        if shape[0] != self.gamma.shape[0]:
            raise ad.ShapeError(f"{self.name}: expects {self.gamma.shape[0]} channels, got {shape}")
        return shape


class ReLU(Layer):
    def forward(self, x, fp):
        return ad.relu(x)


class GlobalAvgPool(Layer):
    def forward(self, x, fp):
        return ad.mean(x, axis=(2, 3))

    def out_shape(self, shape):
        return shape[:1]


class Flatten(Layer):
    def forward(self, x, fp):
        return ad.flatten(x)

    def out_shape(self, shape):
        return (int(np.prod(shape)),)


# ---------------------------------------------------------------------------
# model


class Model:
    def __init__(self, layers: Sequence[Layer], spec: Optional["ModelSpec"] = None):
        self.layers = list(layers)
        self.spec = spec

    def forward(
        self,
        x: Tensor,
        training: bool = True,
        overrides: Optional[dict] = None,
        capture: Optional[dict] = None,
        update_stats: bool = True,
    ) -> Tensor:
        fp = ForwardPass(training=training, update_stats=update_stats, overrides=overrides or {}, capture=capture)
        for layer in self.layers:
            x = layer.forward(x, fp)
        return x

    __call__ = forward

    def loss(self, x: Tensor, labels: np.ndarray, **kwargs) -> tuple[Tensor, Tensor]:
        logits = self.forward(x, **kwargs)
        return ad.softmax_cross_entropy(logits, labels), logits

    @property
    def dtype(self):
        params = self.parameters()
        return params[0][1].dtype if params else np.dtype(np.float32)

    def output_shape(self, input_shape: tuple) -> tuple:
        """Per-example output shape, propagated without running the layers."""
        shape = tuple(input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
        return shape

    def quantized_layers(self) -> list[QuantizedLayer]:
        return [l for l in self.layers if isinstance(l, QuantizedLayer)]

    def quantizers(self) -> list[QuantizerParams]:
        return [q for layer in self.quantized_layers() for q in layer.quantizers()]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [p for layer in self.layers for p in layer.parameters()]

    def buffers(self) -> list[tuple[str, np.ndarray]]:
        return [b for layer in self.layers for b in layer.buffers()]

    def quantizer_parameters(self) -> list[tuple[str, Tensor]]:
        """Interval bounds and output scales (trained with Adam, no weight decay)."""
        return [(n, p) for n, p in self.parameters() if n.endswith((".l", ".u", ".alpha"))]

    def weight_parameters(self) -> list[tuple[str, Tensor]]:
        qnames = {n for n, _ in self.quantizer_parameters()}
        return [(n, p) for n, p in self.parameters() if n not in qnames]

    def zero_grad(self) -> None:
        for _, p in self.parameters():
            p.grad = None

    def enforce_intervals(self) -> None:
        for q in self.quantizers():
            q.enforce_interval()

    def evaluate(self, inputs: np.ndarray, labels: np.ndarray, batch_size: int = 500) -> tuple[float, float]:
        """Mean loss and accuracy in inference mode."""
        total_loss = 0.0
        correct = 0
        n = len(labels)
        dtype = self.dtype
        with ad.no_grad():
            for start in range(0, n, batch_size):
                xb = Tensor(inputs[start : start + batch_size], dtype=dtype)
                yb = labels[start : start + batch_size]
                loss, logits = self.loss(xb, yb, training=False)
                total_loss += float(loss.data) * len(yb)
                correct += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        return total_loss / n, correct / n

    def recalibrate_bn(self, inputs: np.ndarray, batch_size: int = 500) -> None:
        """Replace BN running statistics with their average over ``inputs`` under the current weights."""
        bns = [l for l in self.layers if isinstance(l, BatchNorm)]
        if not bns:
            return
        momenta = [b.momentum for b in bns]
        try:
            with ad.no_grad():
                for k, start in enumerate(range(0, len(inputs), batch_size)):
                    for b in bns:
                        b.momentum = 1.0 / (k + 1)  # cumulative average over batches
                    self.forward(Tensor(inputs[start : start + batch_size], dtype=self.dtype), training=True)
        finally:
            for b, m in zip(bns, momenta):
                b.momentum = m

    # -- state ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        state = {n: p.data.copy() for n, p in self.parameters()}
        state.update({n: b.copy() for n, b in self.buffers()})
        return state

    def quantizer_state(self) -> dict[str, dict]:
        out = {}
        for layer in self.quantized_layers():
            out[layer.name] = {
                "exempt": layer.exempt,
                "initialized": layer.initialized,
                "alpha": float(layer.alpha.data),
                "wq": _quantizer_fields(layer.wq),
                "aq": _quantizer_fields(layer.aq),
            }
        return out

    def load_state(self, state: dict[str, np.ndarray], quantizer_state: Optional[dict] = None, weights_only: bool = False) -> None:
        """Restore arrays (and quantizer scalars) saved by :meth:`state_dict`.

        With ``weights_only`` the quantizer entries are skipped, which loads a
        full-precision model into a quantized twin.
        """
        targets = dict(self.parameters())
        buffers = dict(self.buffers())
        for name, arr in list(targets.items()) + list(buffers.items()):
            if weights_only and name.endswith((".l", ".u", ".alpha")):
                continue
            if name not in state:
                raise ValueError(f"checkpoint has no entry for '{name}' (layer {name.rsplit('.', 1)[0]})")
            dst = arr.data if isinstance(arr, Tensor) else arr
            src = np.asarray(state[name])
            if src.shape != dst.shape:
                raise ValueError(
                    f"shape mismatch in layer {name.rsplit('.', 1)[0]}: '{name}' is {dst.shape} in the model, {src.shape} in the checkpoint"
                )
            dst[...] = src
        if not weights_only:
            extra = set(state) - set(targets) - set(buffers)
            if extra:
                raise ValueError(f"checkpoint entries not present in the model: {sorted(extra)}")
        if quantizer_state is not None and not weights_only:
            for layer in self.quantized_layers():
                if layer.name not in quantizer_state:
                    raise ValueError(f"checkpoint has no quantizer state for layer {layer.name}")
                qs = quantizer_state[layer.name]
                if bool(qs["exempt"]) != layer.exempt:
                    raise ValueError(f"layer {layer.name}: exemption differs between model and checkpoint")
                layer.initialized = bool(qs["initialized"])
                layer.alpha.data[...] = qs["alpha"]
                for q, key in ((layer.wq, "wq"), (layer.aq, "aq")):
                    fields_ = qs[key]
                    if int(fields_["b"]) != q.bits or Mode(fields_["mode"]) is not q.mode:
                        raise ValueError(f"layer {layer.name}: quantizer {key} is b={q.bits}/{q.mode.value} in the model, "
                                         f"b={fields_['b']}/{fields_['mode']} in the checkpoint")
                    q.l.data[...] = fields_["l"]
                    q.u.data[...] = fields_["u"]
                    q.delta = float(fields_["delta"])
                    q.initialized = bool(fields_["initialized"])


def _quantizer_fields(q: QuantizerParams) -> dict:
    return {
        "b": q.bits,
        "l": float(q.l.data),
        "u": float(q.u.data),
        "delta": q.delta,
        "mode": q.mode.value,
        "initialized": q.initialized,
    }


# ---------------------------------------------------------------------------
# specs


_LAYER_KEYS = {
    "dense": {"in", "out"},
    "conv": {"in", "out", "kernel", "stride", "padding"},
    "bn": {"channels"},
    "relu": set(),
    "gap": set(),
    "flatten": set(),
}
_OPTIONAL_KEYS = {"dense": {"bias"}}


@dataclass
class ModelSpec:
    """Ordered layer descriptions plus bit-widths.

    ``exempt`` has one flag per dense/conv layer; by default the first and
    the last of them run in full precision.
    """

    layers: list[dict]
    input_shape: tuple
    w_bits: int = 2
    a_bits: int = 2
    exempt: Optional[list[bool]] = None

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        for i, desc in enumerate(self.layers):
            kind = desc.get("type")
            if kind not in _LAYER_KEYS:
                raise ValueError(f"layer {i}: unknown type {kind!r}")
            missing = _LAYER_KEYS[kind] - set(desc)
            unknown = set(desc) - _LAYER_KEYS[kind] - _OPTIONAL_KEYS.get(kind, set()) - {"type"}
            if missing or unknown:
                raise ValueError(f"layer {i} ({kind}): missing {sorted(missing)}, unknown {sorted(unknown)}")
        n_q = self.n_weighted
        if self.exempt is None:
            self.exempt = [i in (0, n_q - 1) for i in range(n_q)]
        elif len(self.exempt) != n_q:
            raise ValueError(f"exempt has {len(self.exempt)} flags for {n_q} dense/conv layers")
        k = 0
        for i, desc in enumerate(self.layers):
            if desc["type"] not in ("dense", "conv"):
                continue
            if desc.get("bias") and not self.exempt[k]:
                raise ValueError(f"layer {i}: bias is only allowed on exempt (full-precision) layers")
            k += 1

    @property
    def n_weighted(self) -> int:
        return sum(1 for d in self.layers if d["type"] in ("dense", "conv"))

    def output_shape(self) -> tuple:
        return build_model(self, seed=0).output_shape(self.input_shape)

    def to_dict(self) -> dict:
        return {
            "layers": [dict(d) for d in self.layers],
            "input_shape": list(self.input_shape),
            "w_bits": self.w_bits,
            "a_bits": self.a_bits,
            "exempt": list(self.exempt),
        }


def mlp_spec(sizes: Sequence[int] = (2, 32, 32, 2), w_bits: int = 2, a_bits: int = 2) -> ModelSpec:
    """Dense/ReLU stack; the full-precision first and last layers carry a bias."""
    layers: list[dict] = []
    last = len(sizes) - 2
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append({"type": "dense", "in": a, "out": b, "bias": i in (0, last)})
        if i < len(sizes) - 2:
            layers.append({"type": "relu"})
    return ModelSpec(layers, input_shape=(sizes[0],), w_bits=w_bits, a_bits=a_bits)


def cnn_spec(w_bits: int = 2, a_bits: int = 2, in_channels: int = 1, image: int = 28, classes: int = 10) -> ModelSpec:
    """Three 3x3 conv blocks (16, 32/stride 2, 32) with BN+ReLU, global pooling, dense head."""
    def conv(c_in, c_out, stride):
        return [
            {"type": "conv", "in": c_in, "out": c_out, "kernel": 3, "stride": stride, "padding": 1},
            {"type": "bn", "channels": c_out},
            {"type": "relu"},
        ]

    layers = conv(in_channels, 16, 1) + conv(16, 32, 2) + conv(32, 32, 1)
    layers += [{"type": "gap"}, {"type": "dense", "in": 32, "out": classes}]
    return ModelSpec(layers, input_shape=(in_channels, image, image), w_bits=w_bits, a_bits=a_bits)


def build_model(spec: ModelSpec, seed: int = 0, pretrained: Optional[str] = None, dtype=np.float32) -> Model:
    """Instantiate layers with He-style initialization, optionally loading full-precision weights."""
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    k = 0
    for i, desc in enumerate(spec.layers):
        kind = desc["type"]
        name = f"layers.{i}"
        if kind == "dense":
            layer: Layer = QuantizedLayer(Dense(desc["in"], desc["out"], rng, dtype, bool(desc.get("bias"))), spec.w_bits, spec.a_bits, spec.exempt[k], name)
            k += 1
        elif kind == "conv":
            inner = Conv2d(desc["in"], desc["out"], desc["kernel"], desc["stride"], desc["padding"], rng, dtype)
            layer = QuantizedLayer(inner, spec.w_bits, spec.a_bits, spec.exempt[k], name)
            k += 1
        elif kind == "bn":
            layer = BatchNorm(desc["channels"], dtype=dtype)
        elif kind == "relu":
            layer = ReLU()
        elif kind == "gap":
            layer = GlobalAvgPool()
        else:
            layer = Flatten()
        layer.name = name
        layers.append(layer)
    model = Model(layers, spec)
    model.output_shape(spec.input_shape)
    if pretrained is not None:
        from .checkpoint import read_checkpoint

        ckpt = read_checkpoint(pretrained)
        model.load_state(ckpt["model"], weights_only=True)
    return model

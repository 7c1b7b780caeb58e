"""Optimizers, cosine schedule and the training loop with the delta-update schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, batches, num_batches
from .scaling import GMode, HessianProbeReport, delta_update_pass

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizers


class Optimizer:
    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.t = 0

    def _grad(self, p: Tensor) -> Optional[np.ndarray]:
        if p.grad is None:
            return None
        g = p.grad
        if self.weight_decay:
            g = g + p.data.dtype.type(self.weight_decay) * p.data
        return g

    def state_dict(self) -> dict:
        raise NotImplementedError

    def load_state_dict(self, state: dict) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    """SGD with heavy-ball momentum: ``buf = mu * buf + g; p -= lr * buf``."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.momentum = momentum
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in self.params:
            g = self._grad(p)
            if g is None:
                continue
            if self.momentum:
                buf = self.buffers.get(name)
                if buf is None:
                    buf = self.buffers[name] = g.copy()
                else:
                    buf *= p.dtype.type(self.momentum)
                    buf += g
                g = buf
            p.data -= p.dtype.type(lr) * g

    def state_dict(self):
        return {"t": self.t, "buffers": {k: v.copy() for k, v in self.buffers.items()}}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.buffers = {k: np.array(v) for k, v in state["buffers"].items()}


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        super().__init__(params, lr, weight_decay)
        self.betas = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params:
            g = self._grad(p)
            if g is None:
                continue
            g = g.astype(np.float64)
            m = self.m.setdefault(name, np.zeros(p.shape))
            v = self.v.setdefault(name, np.zeros(p.shape))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def state_dict(self):
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()}, "v": {k: v.copy() for k, v in self.v.items()}}

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = {k: np.array(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.array(v, dtype=np.float64) for k, v in state["v"].items()}


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if total <= 0:
        raise ValueError("cosine schedule needs a positive number of steps")
    if not 0 <= t <= total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DeltaMode:
    """How EWGS scaling factors are set: ``ste``, ``fixed:<value>`` or ``adaptive``."""

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ste", "fixed", "adaptive"):
            raise ValueError(f"unknown delta mode {self.kind!r}")
        if self.value < 0 or not math.isfinite(self.value):
            raise ValueError(f"fixed scaling factor must be finite and >= 0, got {self.value}")

    @classmethod
    def parse(cls, text: str | "DeltaMode") -> "DeltaMode":
        if isinstance(text, DeltaMode):
            return text
        s = str(text).strip().lower()
        if s in ("ste", "adaptive"):
            return cls(s)
        if s.startswith("fixed:"):
            try:
                value = float(s.split(":", 1)[1])
            except ValueError as exc:
                raise ValueError(f"bad fixed scaling factor in {text!r}") from exc
            return cls("fixed", value)
        raise ValueError(f"delta mode must be 'ste', 'adaptive' or 'fixed:<value>', got {text!r}")

    @property
    def initial_delta(self) -> float:
        return self.value if self.kind == "fixed" else 0.0

    def __str__(self) -> str:
        return f"fixed:{self.value:g}" if self.kind == "fixed" else self.kind


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"
    lr_weights: float = 1e-2
    lr_quantizer: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    delta_mode: DeltaMode = field(default_factory=lambda: DeltaMode("ste"))
    delta_update_period: int = 100
    n_probes: int = 16
    g_mode: GMode = GMode.THREE_SIGMA
    eval_batch_size: int = 500
    #: re-estimate BN running statistics from the training set after the last step
    recalibrate_bn: bool = False

    def __post_init__(self):
        self.delta_mode = DeltaMode.parse(self.delta_mode)
        self.g_mode = GMode(self.g_mode)
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        for name in ("epochs", "batch_size", "delta_update_period", "n_probes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class TrainingDiverged(RuntimeError):
    def __init__(self, trainer: "Trainer", loss: float):
        super().__init__(f"training loss became non-finite ({loss}) at iteration {trainer.iteration}")
        self.trainer = trainer


METRIC_COLUMNS = ["epoch", "iteration", "split", "loss", "accuracy"]


@dataclass
class TrainResult:
    history: list[dict]
    reports: list[HessianProbeReport]
    delta_history: list[dict]

    def final(self, split: str) -> dict:
        rows = [r for r in self.history if r["split"] == split]
        if not rows:
            raise KeyError(f"no '{split}' rows in history")
        return rows[-1]


class Trainer:
    """Minibatch training with separate optimizers for weights and quantizer parameters.

    Network weights use SGD or Adam at ``lr_weights`` with weight decay;
    interval bounds and output scales use Adam at ``lr_quantizer`` without
    decay.  Both rates follow one cosine schedule over all iterations.  In
    adaptive mode the scaling factors are re-estimated after every
    ``delta_update_period`` iterations and once after the final iteration.
    """

    def __init__(self, model, train_set: Dataset, config: TrainConfig, test_set: Optional[Dataset] = None):
        self.model = model
        self.train_set = train_set
        self.test_set = test_set
        self.config = config
        cfg = config
        if cfg.optimizer == "sgd":
            self.weight_opt: Optimizer = SGD(model.weight_parameters(), cfg.lr_weights, cfg.momentum, cfg.weight_decay)
        else:
            self.weight_opt = Adam(model.weight_parameters(), cfg.lr_weights, weight_decay=cfg.weight_decay)
        self.quant_opt = Adam(model.quantizer_parameters(), cfg.lr_quantizer, weight_decay=0.0)
        self.iters_per_epoch = num_batches(len(train_set), cfg.batch_size)
        self.total_iters = cfg.epochs * self.iters_per_epoch
        self.iteration = 0
        self.history: list[dict] = []
        self.reports: list[HessianProbeReport] = []
        self.delta_history: list[dict] = []
        self.skipped_steps = 0
        self._acc = [0.0, 0, 0]  # loss sum, correct, count within the current epoch
        for q in model.quantizers():
            q.set_delta(cfg.delta_mode.initial_delta)

    # -- schedule ------------------------------------------------------
    def _delta_due(self, it: int) -> bool:
        if self.config.delta_mode.kind != "adaptive":
            return False
        return (it + 1) % self.config.delta_update_period == 0 or it + 1 == self.total_iters

    def probe_rng(self, it: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, 7919, it])

    # -- one step ------------------------------------------------------
    def step(self, xb: np.ndarray, yb: np.ndarray) -> float:
        cfg = self.config
        model = self.model
        it = self.iteration
        model.zero_grad()
        loss, logits = model.loss(Tensor(xb, dtype=model.dtype), yb, training=True)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingDiverged(self, value)
        ad.backward(loss)
        if all(p.grad is None or np.all(np.isfinite(p.grad)) for _, p in model.parameters()):
            scale = cosine_lr(it, self.total_iters, 1.0)
            self.weight_opt.step(cfg.lr_weights * scale)
            self.quant_opt.step(cfg.lr_quantizer * scale)
            model.enforce_intervals()
        else:
            self.skipped_steps += 1
            logger.warning("iteration %d: non-finite gradients, step skipped", it)
        model.zero_grad()
        self._acc[0] += value * len(yb)
        self._acc[1] += int(np.sum(np.argmax(logits.data, axis=1) == yb))
        self._acc[2] += len(yb)
        if self._delta_due(it):
            reports = delta_update_pass(model, xb, yb, cfg.n_probes, cfg.g_mode, self.probe_rng(it), iteration=it)
            self.reports.extend(reports)
            for r in reports:
                if not (math.isfinite(r.delta) and r.delta >= 0):
                    raise RuntimeError(f"invalid scaling factor {r.delta} for {r.quantizer_id}")
        self.iteration += 1
        return value

    # -- loop ----------------------------------------------------------
    def fit(self, until: Optional[int] = None) -> TrainResult:
        """Train until ``until`` iterations (default: all epochs) have run."""
        cfg = self.config
        stop = self.total_iters if until is None else min(until, self.total_iters)
        while self.iteration < stop:
            epoch, offset = divmod(self.iteration, self.iters_per_epoch)
            stream = batches(self.train_set, cfg.batch_size, shuffle_seed=[cfg.seed, epoch])
            for b, (xb, yb) in enumerate(stream):
                if b < offset:
                    continue
                if self.iteration >= stop:
                    break
                self.step(xb, yb)
            if self.iteration == self.total_iters and cfg.recalibrate_bn:
                self.model.recalibrate_bn(self.train_set.inputs, cfg.eval_batch_size)
            if self.iteration % self.iters_per_epoch == 0 and self.iteration > 0 and self._acc[2]:
                self._end_epoch(self.iteration // self.iters_per_epoch)
        if self.iteration == self.total_iters and not any(r["split"] == "train_eval" for r in self.history):
            loss, acc = self.model.evaluate(self.train_set.inputs, self.train_set.labels, cfg.eval_batch_size)
            self.history.append(_row(cfg.epochs, self.iteration, "train_eval", loss, acc))
        return self.result()

    def _end_epoch(self, epoch: int) -> None:
        loss_sum, correct, count = self._acc
        self.history.append(_row(epoch, self.iteration, "train", loss_sum / count, correct / count))
        self._acc = [0.0, 0, 0]
        if self.test_set is not None:
            loss, acc = self.model.evaluate(self.test_set.inputs, self.test_set.labels, self.config.eval_batch_size)
            self.history.append(_row(epoch, self.iteration, "test", loss, acc))
        for q in self.model.quantizers():
            self.delta_history.append({"epoch": epoch, "iteration": self.iteration, "quantizer_id": q.name, "delta": q.delta})
        last = self.history[-1]
        logger.info("epoch %d: %s loss=%.4f acc=%.4f", epoch, last["split"], last["loss"], last["accuracy"])

    def result(self) -> TrainResult:
        return TrainResult(list(self.history), list(self.reports), list(self.delta_history))

    # -- persistence ---------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "acc": list(self._acc),
            "skipped_steps": self.skipped_steps,
            "history": [dict(r) for r in self.history],
            "reports": [asdict(r) for r in self.reports],
            "delta_history": [dict(r) for r in self.delta_history],
            "weight_opt": self.weight_opt.state_dict(),
            "quant_opt": self.quant_opt.state_dict(),
        }

    def load_state_dict(self, state: dict) -> None:
        self.iteration = int(state["iteration"])
        self._acc = [float(state["acc"][0]), int(state["acc"][1]), int(state["acc"][2])]
        self.skipped_steps = int(state["skipped_steps"])
        self.history = [dict(r) for r in state["history"]]
        self.reports = [HessianProbeReport(**r) for r in state["reports"]]
        self.delta_history = [dict(r) for r in state["delta_history"]]
        self.weight_opt.load_state_dict(state["weight_opt"])
        self.quant_opt.load_state_dict(state["quant_opt"])


def _row(epoch: int, iteration: int, split: str, loss: float, acc: float) -> dict:
    return {"epoch": epoch, "iteration": iteration, "split": split, "loss": float(loss), "accuracy": float(acc)}


def train(model, dataset: Dataset, config: TrainConfig, test_set: Optional[Dataset] = None) -> TrainResult:
    return Trainer(model, dataset, config, test_set).fit()

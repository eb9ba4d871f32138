"""Adam, the step learning-rate schedule, the training loop and gradient checks."""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, NumericalError
from .evaluation import per_frame_map
from .model import TgmModel, bce_loss, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, frozen=()) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place.

    Tensors named in ``frozen`` are left untouched.
    """
    for name, g in grads.items():
        if name not in frozen and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in tensor {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if name in frozen:
            continue
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class TrainPlan:
    epochs: int = 50
    base_lr: float = 0.01
    decay: float = 0.1
    decay_every: int = 10
    seed: int = 0
    shuffle: bool = True
    # per-video loss is divided by T before backprop
    per_frame_loss: bool = True

    def validate(self) -> None:
        if self.epochs < 1 or self.decay_every < 1:
            raise ConfigError("epochs and decay_every must be positive")
        if self.base_lr < 0 or not math.isfinite(self.base_lr):
            raise ConfigError(f"learning rate must be finite and >= 0, got {self.base_lr}")


def lr_for_epoch(plan: TrainPlan, epoch: int) -> float:
    return plan.base_lr * plan.decay ** (epoch // plan.decay_every)


def split_indices(n: int, seed: int, train_fraction: float = 0.8):
    """Seeded permutation split into (train, validation) index arrays."""
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(train_fraction * n))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def evaluate(model: TgmModel, videos, threads: int = 1):
    """Per-frame mAP of ``model`` over ``(features, labels)`` pairs."""
    def run(item):
        return model.predict(item[0].values).probs

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            probs = list(pool.map(run, videos))
    else:
        probs = [run(item) for item in videos]
    return per_frame_map(probs, [labels.z.T for _, labels in videos])


def _adam_tensors(state: AdamState) -> dict:
    out = {}
    for name in state.m:
        out[f"adam.m.{name}"] = state.m[name]
        out[f"adam.v.{name}"] = state.v[name]
    return out


def save_training_checkpoint(path, model, state: AdamState, plan: TrainPlan, epoch: int):
    meta = {"epochs_done": epoch, "adam_step": state.step, "plan": asdict(plan)}
    save_checkpoint(path, model, extra_tensors=_adam_tensors(state), meta=meta)


def load_training_checkpoint(path):
    """Return ``(model, adam_state, plan, epochs_done)``."""
    model, extra, meta = load_checkpoint(path)
    state = AdamState(step=int(meta.get("adam_step", 0)))
    for name, value in extra.items():
        if name.startswith("adam.m."):
            state.m[name[len("adam.m."):]] = value
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v."):]] = value
    plan = TrainPlan(**meta["plan"]) if "plan" in meta else TrainPlan()
    return model, state, plan, int(meta.get("epochs_done", 0))


def fit(model: TgmModel, train_videos, val_videos, plan: TrainPlan,
        out_dir=None, state: Optional[AdamState] = None, start_epoch: int = 0,
        on_epoch: Optional[Callable[[dict], None]] = None, threads: int = 1):
    """Train one video per Adam step and return the per-epoch log records.

    With ``out_dir`` set, ``train_log.jsonl`` and one checkpoint per epoch
    (plus ``last.tgmm``) are written there.  A non-finite loss raises
    :class:`NumericalError`; checkpoints from earlier epochs are kept.
    """
    plan.validate()
    if not train_videos:
        raise ConfigError("training set is empty")
    state = state if state is not None else AdamState(lr=plan.base_lr)
    frozen = model.frozen
    records = []
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.jsonl"), "a" if start_epoch else "w")
    try:
        for epoch in range(start_epoch, plan.epochs):
            t0 = time.perf_counter()
            state.lr = lr_for_epoch(plan, epoch)
            order = np.arange(len(train_videos))
            if plan.shuffle:
                order = np.random.default_rng([plan.seed, epoch]).permutation(len(train_videos))
            losses = []
            for idx in order:
                features, labels = train_videos[idx]
                targets = labels.z.T
                pred, cache = model.forward(features.values)
                total, per_frame = bce_loss(pred.logits, targets)
                if not math.isfinite(total):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, video {idx}")
                scale = 1.0 / targets.shape[1] if plan.per_frame_loss else 1.0
                grads = model.backward(cache, targets, scale=scale)
                adam_step(state, model.params, grads, frozen=frozen)
                losses.append(per_frame)
            val_map = evaluate(model, val_videos, threads)["map"] if val_videos else None
            record = {
                "epoch": epoch,
                "lr": state.lr,
                "mean_loss": float(np.mean(losses)),
                "val_map": val_map,
                "wall_ms": round(1000.0 * (time.perf_counter() - t0), 3),
            }
            records.append(record)
            log.info("epoch %d lr %.2g loss %.5f val mAP %s", epoch, state.lr,
                     record["mean_loss"], val_map)
            if out_dir is not None:
                path = os.path.join(out_dir, f"epoch_{epoch:03d}.tgmm")
                save_training_checkpoint(path, model, state, plan, epoch + 1)
                save_training_checkpoint(os.path.join(out_dir, "last.tgmm"), model, state,
                                         plan, epoch + 1)
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if log_fh is not None:
            log_fh.close()
    return records


# ---------------------------------------------------------------------------
# finite-difference gradient checks


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_parameter: Optional[str]
    passed: bool
    skipped: list = field(default_factory=list)
    per_tensor: dict = field(default_factory=dict)


def relative_error(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _difference(f_plus, f_minus):
    if np.ndim(f_plus) == 0:
        return float(f_plus) - float(f_minus)
    return math.fsum(np.ravel(np.subtract(f_plus, f_minus)))


def check_gradients(f: Callable[[], float], params: dict, grads: dict, h: float = 1e-5,
                    tolerance: float = 1e-5, skip=()) -> GradCheckReport:
    """Compare ``grads`` with central differences of ``f`` over ``params``.

    ``f`` must read the arrays in ``params``, which are perturbed in place
    and restored bit-exactly.  It may return the loss as an array of terms;
    the terms are then differenced one by one and summed exactly, which keeps
    the rounding of a large total out of small gradients.  A coordinate passes when its relative error is
    below ``tolerance``, or when both values are below 1e-6 in magnitude and
    differ by less than 1e-8.
    """
    worst, worst_name = 0.0, None
    per_tensor = {}
    passed = True
    skipped = [name for name in params if name in skip]
    for name, p in params.items():
        if name in skip:
            continue
        a = np.asarray(grads[name], dtype=np.float64)
        numeric = np.empty_like(p)
        flat = p.reshape(-1)
        if not np.shares_memory(flat, p):
            raise ConfigError(f"tensor {name} must be contiguous to be perturbed in place")
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f()
            flat[i] = orig - h
            f_minus = f()
            flat[i] = orig
            numeric.reshape(-1)[i] = _difference(f_plus, f_minus) / (2.0 * h)
        rel = relative_error(a, numeric)
        tiny = (np.maximum(np.abs(a), np.abs(numeric)) < 1e-6) & (np.abs(a - numeric) < 1e-8)
        judged = np.where(tiny, 0.0, rel)
        tensor_worst = float(judged.max()) if judged.size else 0.0
        per_tensor[name] = tensor_worst
        if tensor_worst >= tolerance:
            passed = False
        if tensor_worst > worst or worst_name is None:
            worst, worst_name = tensor_worst, name
    return GradCheckReport(max_rel_err=worst, worst_parameter=worst_name, passed=passed,
                           skipped=skipped, per_tensor=per_tensor)


def grad_check(model: TgmModel, features, targets, h: float = 1e-5, tolerance: float = 1e-5,
               grads: Optional[dict] = None) -> GradCheckReport:
    """Finite-difference check of the summed BCE loss over every learnable tensor.

    ``grads`` overrides the analytic gradients (used to test the harness).
    Frozen tensors are skipped and listed in the report.
    """
    if grads is None:
        _, cache = model.forward(features)
        grads = model.backward(cache, targets)
    return check_gradients(lambda: model.loss_terms(features, targets), model.params, grads,
                           h=h, tolerance=tolerance, skip=model.frozen)


def layer_grad_check(layer, x, rng: np.random.Generator, h: float = 1e-5,
                     tolerance: float = 1e-5) -> GradCheckReport:
    """Check a single layer against the loss ``sum(R * layer(x))`` for random ``R``."""
    x = np.array(x, dtype=np.float64)
    out, cache = layer.forward(x)
    proj = rng.normal(size=out.shape)
    lg = layer.backward(cache, proj)
    params = dict(layer.params)
    params["input"] = x
    grads = dict(lg.d_params)
    grads["input"] = lg.d_input

    def f():
        return layer.forward(x)[0] * proj

    return check_gradients(f, params, grads, h=h, tolerance=tolerance, skip=layer.frozen)

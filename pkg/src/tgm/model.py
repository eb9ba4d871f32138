"""Stacked temporal layers plus a per-frame multi-label classifier."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, FormatError, UsageError
from .layers import LayerConfig, LayerForm, TemporalLayer, param_count

CHECKPOINT_MAGIC = b"TGMM"
CHECKPOINT_VERSION = 1


class Classifier(str, enum.Enum):
    PER_CLASS = "per_class_linear"
    SHARED = "shared_linear"


def _strict_keys(kind, data, allowed, required=()):
    if not isinstance(data, dict):
        raise ConfigError(f"{kind} must be a JSON object")
    unknown = set(data) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown {kind} field(s): {', '.join(sorted(unknown))}")
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"{kind} is missing field(s): {', '.join(missing)}")


@dataclass
class ModelConfig:
    num_classes: int
    d: int
    layers: list = field(default_factory=list)
    classifier: Classifier = Classifier.PER_CLASS

    def __post_init__(self):
        self.classifier = Classifier(self.classifier)
        self.layers = [lc if isinstance(lc, LayerConfig) else LayerConfig(**lc)
                       for lc in self.layers]

    def validate(self) -> None:
        if self.num_classes < 1 or self.d < 1:
            raise ConfigError("num_classes and d must be positive")
        c, d = 1, self.d
        for i, lc in enumerate(self.layers):
            lc.validate()
            if lc.c_in != c or lc.d != d:
                raise ConfigError(
                    f"layer {i} expects input ({lc.c_in}, {lc.d}, T) but receives ({c}, {d}, T)")
            c, d = lc.c_out, lc.d_out
        if self.classifier is Classifier.PER_CLASS and c != self.num_classes and \
                not (c == 1 and not self.layers):
            raise ConfigError(
                f"per-class classifier needs {self.num_classes} channels, final layer has {c}")

    @property
    def out_shape(self):
        """``(C, D)`` of the representation the classifier reads."""
        if not self.layers:
            return 1, self.d
        return self.layers[-1].c_out, self.layers[-1].d_out

    def to_dict(self) -> dict:
        out = asdict(self)
        out["classifier"] = self.classifier.value
        for lc in out["layers"]:
            lc["form"] = lc["form"].value
            lc["source"] = lc["source"].value
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        """Strict parse; layer ``c_in`` and ``d`` may be omitted and are chained."""
        _strict_keys("model config", data, ("num_classes", "d", "layers", "classifier"),
                     required=("num_classes", "d"))
        layer_fields = set(LayerConfig.__dataclass_fields__)
        c, d = 1, data["d"]
        layers = []
        for i, raw in enumerate(data.get("layers", [])):
            _strict_keys(f"layer {i}", raw, layer_fields, required=("form",))
            try:
                lc = LayerConfig(**{"c_in": c, "d": d, **raw})
            except ValueError as exc:
                raise ConfigError(f"layer {i}: {exc}") from None
            lc.validate()
            layers.append(lc)
            c, d = lc.c_out, lc.d_out
        try:
            cfg = cls(num_classes=data["num_classes"], d=data["d"], layers=layers,
                      classifier=data.get("classifier", Classifier.PER_CLASS))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg


def stack_config(num_classes, d, n_layers, form, source, channels, L, M,
                 classifier=Classifier.PER_CLASS, shared_gaussians=True) -> ModelConfig:
    """``n_layers`` layers of one form; hidden width ``channels``, last width ``num_classes``.

    Grouped stacks cannot widen, so they start with a ``tgm_single`` layer of
    width ``num_classes`` and ``channels`` is ignored.
    """
    layers = []
    c, dd = 1, d
    for i in range(n_layers):
        c_out = num_classes if i == n_layers - 1 else channels
        this_form = form
        if LayerForm(form) is LayerForm.TGM_GROUPED:
            c_out = num_classes
            if i == 0:
                this_form = LayerForm.TGM_SINGLE
        lc = LayerConfig(form=this_form, source=source, c_in=c, c_out=c_out, L=L, M=M, d=dd,
                         shared_gaussians=shared_gaussians)
        layers.append(lc)
        c, dd = lc.c_out, lc.d_out
    cfg = ModelConfig(num_classes=num_classes, d=d, layers=layers, classifier=classifier)
    cfg.validate()
    return cfg


@dataclass
class PredictionSequence:
    logits: np.ndarray
    probs: np.ndarray


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def bce_terms(logits, targets):
    """Per-entry binary cross entropy from logits."""
    # -[z log s(x) + (1-z) log(1-s(x))] = softplus(x) - z x
    return np.logaddexp(0.0, logits) - targets * logits


def bce_loss(logits, targets):
    """Binary cross entropy from logits, summed over classes and frames.

    ``targets`` has the same ``num_classes x T`` layout as ``logits``.
    Returns ``(total, per_frame_mean)``.
    """
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ConfigError(f"logits {logits.shape} and targets {targets.shape} differ")
    total = float(np.sum(bce_terms(logits, targets)))
    return total, total / logits.shape[-1]


class TgmModel:
    """Fully convolutional per-frame classifier.

    Parameters live in :attr:`params` under names like ``layer0.omega`` and
    ``classifier.weight``; the dict order is the checkpoint order.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, params: Optional[dict] = None):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.layers = []
        for i, lc in enumerate(config.layers):
            sub = None
            if params is not None:
                prefix = f"layer{i}."
                sub = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
            self.layers.append(TemporalLayer(lc, rng=rng, params=sub))
        c, d = config.out_shape
        fan_in = d if config.classifier is Classifier.PER_CLASS else c * d
        if params is not None:
            weight, bias = params["classifier.weight"], params["classifier.bias"]
        else:
            weight = np.zeros((config.num_classes, fan_in))
            bias = np.zeros(config.num_classes)
        if np.shape(weight) != (config.num_classes, fan_in) or np.shape(bias) != (config.num_classes,):
            raise ConfigError("classifier tensors do not match the model config")
        self.classifier = {"weight": np.asarray(weight, dtype=np.float64),
                           "bias": np.asarray(bias, dtype=np.float64)}
        if params is not None and set(params) != set(self.params):
            raise ConfigError(f"unexpected tensors: {sorted(set(params) ^ set(self.params))}")

    @property
    def params(self) -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            for name, value in layer.params.items():
                out[f"layer{i}.{name}"] = value
        out["classifier.weight"] = self.classifier["weight"]
        out["classifier.bias"] = self.classifier["bias"]
        return out

    @property
    def frozen(self) -> frozenset:
        return frozenset(f"layer{i}.{name}" for i, layer in enumerate(self.layers)
                         for name in layer.frozen)

    def set_prior_bias(self, videos) -> None:
        """Set classifier biases to the logit of each class's training frame rate.

        Starting from a zero bias the first updates see ``p = 0.5`` on every
        frame and the readout learns "trigger present -> no label" before the
        bias has caught up; starting at the prior avoids that detour.
        """
        z = np.concatenate([labels.z for _, labels in videos], axis=0)
        rate = np.clip(z.mean(axis=0), 1e-4, 1.0 - 1e-4)
        self.classifier["bias"][:] = np.log(rate / (1.0 - rate))

    def param_count(self) -> int:
        return sum(param_count(lc) for lc in self.config.layers) + \
            self.classifier["weight"].size + self.classifier["bias"].size

    def forward(self, features):
        """Return ``(PredictionSequence, cache)`` for a ``1 x D x T`` feature array."""
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[:2] != (1, self.config.d):
            raise ConfigError(f"model expects features (1, {self.config.d}, T), got {x.shape}")
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        w, b = self.classifier["weight"], self.classifier["bias"]
        if self.config.classifier is Classifier.PER_CLASS:
            if x.shape[0] == 1:
                logits = np.einsum("cd,dt->ct", w, x[0])
            else:
                logits = np.einsum("cd,cdt->ct", w, x)
        else:
            logits = w @ x.reshape(-1, x.shape[-1])
        logits = logits + b[:, None]
        pred = PredictionSequence(logits=logits, probs=sigmoid(logits))
        return pred, {"layers": caches, "top": x, "logits": logits}

    def predict(self, features):
        return self.forward(features)[0]

    def loss(self, features, targets):
        return bce_loss(self.forward(features)[0].logits, targets)[0]

    def loss_terms(self, features, targets):
        """Per-entry BCE whose sum is :meth:`loss`."""
        return bce_terms(self.forward(features)[0].logits, np.asarray(targets, dtype=np.float64))

    def backward(self, cache, targets, scale: float = 1.0) -> dict:
        """Gradients of ``scale * bce_loss`` for every tensor in :attr:`params`."""
        if cache is None or "logits" not in cache:
            raise UsageError("model backward needs the cache from forward()")
        targets = np.asarray(targets, dtype=np.float64)
        logits = cache["logits"]
        if targets.shape != logits.shape:
            raise ConfigError(f"targets {targets.shape} do not match logits {logits.shape}")
        d_logits = scale * (sigmoid(logits) - targets)
        x = cache["top"]
        w = self.classifier["weight"]
        grads_cls = {"bias": d_logits.sum(axis=1)}
        if self.config.classifier is Classifier.PER_CLASS:
            if x.shape[0] == 1:
                grads_cls["weight"] = np.einsum("ct,dt->cd", d_logits, x[0])
                d_x = np.einsum("ct,cd->dt", d_logits, w)[None]
            else:
                grads_cls["weight"] = np.einsum("ct,cdt->cd", d_logits, x)
                d_x = np.einsum("ct,cd->cdt", d_logits, w)
        else:
            flat = x.reshape(-1, x.shape[-1])
            grads_cls["weight"] = d_logits @ flat.T
            d_x = (w.T @ d_logits).reshape(x.shape)

        grads = {}
        for i in reversed(range(len(self.layers))):
            lg = self.layers[i].backward(cache["layers"][i], d_x)
            d_x = lg.d_input
            for name, g in lg.d_params.items():
                grads[f"layer{i}.{name}"] = g
        grads["classifier.weight"] = grads_cls["weight"]
        grads["classifier.bias"] = grads_cls["bias"]
        return {name: grads[name] for name in self.params}

    def export_kernels(self):
        return [layer.full_kernels() for layer in self.layers]


# ---------------------------------------------------------------------------
# checkpoint files


def save_checkpoint(path, model: TgmModel, extra_tensors: Optional[dict] = None,
                    meta: Optional[dict] = None) -> None:
    """Write ``TGMM`` + version + JSON header + float64 LE tensors.

    ``extra_tensors`` (e.g. optimizer moments) follow the model parameters;
    ``meta`` is stored verbatim in the header.
    """
    tensors = dict(model.params)
    for name, value in (extra_tensors or {}).items():
        if name in tensors:
            raise ConfigError(f"duplicate tensor name {name}")
        tensors[name] = value
    header = {
        "model": model.config.to_dict(),
        "tensors": [[name, list(np.shape(v))] for name, v in tensors.items()],
        "n_model_tensors": len(model.params),
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for value in tensors.values():
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(model, extra_tensors, meta)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise FormatError("checkpoint header truncated", offset=len(data))
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}", offset=0)
    version, n_header = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    if len(data) < 12 + n_header:
        raise FormatError("checkpoint header truncated", offset=len(data))
    try:
        header = json.loads(data[12:12 + n_header].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=12) from None
    offset = 12 + n_header
    tensors = {}
    for name, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * n
        if end > len(data):
            raise FormatError(f"tensor {name} truncated", offset=len(data))
        tensors[name] = np.frombuffer(data, dtype="<f8", count=n, offset=offset) \
            .astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise FormatError("trailing bytes after last tensor", offset=offset)
    names = [t[0] for t in header["tensors"]]
    n_model = header["n_model_tensors"]
    config = ModelConfig.from_dict(header["model"])
    model = TgmModel(config, params={k: tensors[k] for k in names[:n_model]})
    extra = {k: tensors[k] for k in names[n_model:]}
    return model, extra, header.get("meta", {})

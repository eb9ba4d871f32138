"""Command-line entry point: ``tgm <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .data import SynthSpec, gen_synthetic, load_dataset, save_dataset, summarize
from .errors import ConfigError, FormatError, NumericalError, UsageError
from .evaluation import report_json
from .kernel import write_kernel_csv
from .layers import LayerConfig, LayerForm, TemporalLayer, param_count, valid_sources
from .model import Classifier, ModelConfig, TgmModel, load_checkpoint, save_checkpoint
from .train import (TrainPlan, evaluate, fit, grad_check, layer_grad_check,
                    load_training_checkpoint, split_indices)

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("tgm")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}", EXIT_INPUT) from None


def _train_config(path):
    """Parse ``{"model": {...}, "train": {...}, "seed": n}`` strictly."""
    data = _read_json(path)
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(data) - {"model", "train", "seed"}
    if unknown:
        raise ConfigError(f"unknown config field(s): {', '.join(sorted(unknown))}")
    if "model" not in data:
        raise ConfigError("config is missing 'model'")
    model_cfg = ModelConfig.from_dict(data["model"])
    train = data.get("train", {})
    allowed = set(TrainPlan.__dataclass_fields__)
    if not isinstance(train, dict) or set(train) - allowed:
        raise ConfigError(f"unknown train field(s): {', '.join(sorted(set(train) - allowed))}")
    plan = TrainPlan(**train)
    if "seed" in data:
        plan = replace(plan, seed=int(data["seed"]))
    plan.validate()
    return model_cfg, plan


def _ensure_out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
        probe = os.path.join(path, ".write_test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as exc:
        raise CliError(f"output directory {path} is not writable: {exc}", EXIT_IO) from None


def _load_manifest(path):
    if path is None:
        raise CliError("--manifest is required", EXIT_INPUT)
    try:
        videos = load_dataset(path)
    except OSError as exc:
        raise CliError(f"cannot read dataset: {exc}", EXIT_IO) from None
    except json.JSONDecodeError as exc:
        raise CliError(f"manifest is not valid JSON: {exc}", EXIT_INPUT) from None
    if not videos:
        raise CliError("manifest lists no videos", EXIT_INPUT)
    return videos


def _check_dims(model: TgmModel, videos):
    for i, (feats, labels) in enumerate(videos):
        if feats.d != model.config.d or feats.c != 1:
            raise CliError(f"video {i} has features ({feats.c}, {feats.d}, T); model expects "
                           f"(1, {model.config.d}, T)", EXIT_INPUT)
        if labels.num_classes != model.config.num_classes:
            raise CliError(f"video {i} has {labels.num_classes} label classes; model has "
                           f"{model.config.num_classes}", EXIT_INPUT)


# ---------------------------------------------------------------------------


def cmd_gen_synth(args):
    data = _read_json(args.config) if args.config else {}
    spec = SynthSpec.from_dict(data)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
        spec.validate()
    if args.out is None:
        raise CliError("--out is required", EXIT_INPUT)
    _ensure_out_dir(args.out)
    videos = gen_synthetic(spec)
    try:
        save_dataset(videos, args.out)
        with open(os.path.join(args.out, "synth_spec.json"), "w") as fh:
            json.dump(spec.to_dict(), fh, indent=1)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_IO) from None
    print(json.dumps(summarize(videos)))
    return EXIT_OK


def cmd_train(args):
    if args.out is None:
        raise CliError("--out is required", EXIT_INPUT)
    videos = _load_manifest(args.manifest)
    if args.resume:
        model, state, plan, done = load_training_checkpoint(args.resume)
    else:
        if args.config is None:
            raise CliError("--config is required unless resuming", EXIT_INPUT)
        model_cfg, plan = _train_config(args.config)
        if args.seed is not None:
            plan = replace(plan, seed=args.seed)
        state, done = None, 0
        model = None
    if args.epochs is not None:
        plan = replace(plan, epochs=args.epochs)
    if args.lr is not None:
        plan = replace(plan, base_lr=args.lr)
    plan.validate()
    train_idx, val_idx = split_indices(len(videos), plan.seed)
    train = [videos[i] for i in train_idx]
    val = [videos[i] for i in val_idx]
    if model is None:
        model = TgmModel(model_cfg, seed=plan.seed)
        _check_dims(model, videos)
        model.set_prior_bias(train)
    _check_dims(model, videos)
    _ensure_out_dir(args.out)
    if not args.resume:
        save_checkpoint(os.path.join(args.out, "initial.tgmm"), model,
                        meta={"plan": plan.__dict__})
    try:
        records = fit(model, train, val, plan, out_dir=args.out, state=state,
                      start_epoch=done, threads=args.threads)
    except NumericalError as exc:
        raise CliError(str(exc), EXIT_NUMERIC) from None
    for rec in records:
        print(json.dumps(rec))
    return EXIT_OK


def cmd_eval(args):
    if args.checkpoint is None:
        raise CliError("--checkpoint is required", EXIT_INPUT)
    model, _, _ = _load_checkpoint(args.checkpoint)
    videos = _load_manifest(args.manifest)
    _check_dims(model, videos)
    print(report_json(evaluate(model, videos, threads=args.threads)))
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_IO) from None


def default_gradcheck_matrix():
    """Every layer form with every kernel source it accepts, at small shapes."""
    entries = []
    for form in LayerForm:
        for source in valid_sources(form):
            c_in = 1 if form is LayerForm.TGM_SINGLE else 2
            c_out = c_in if form is LayerForm.TGM_GROUPED else 3
            entries.append(LayerConfig(form=form, source=source, c_in=c_in, c_out=c_out,
                                       L=3, M=2, d=3))
    return entries


def cmd_gradcheck(args):
    layers = default_gradcheck_matrix()
    models = []
    if args.config:
        model_cfg, _ = _train_config(args.config)
        models.append(model_cfg)
    seed = args.seed if args.seed is not None else 0
    failures = 0
    rng = np.random.default_rng(seed)
    for lc in layers:
        layer = TemporalLayer(lc, rng=rng)
        x = rng.normal(size=(lc.c_in, lc.d, 7))
        report = layer_grad_check(layer, x, rng)
        failures += _print_report(f"layer {lc.form.value}/{lc.source.value}", report)
    for classifier in Classifier:
        cfg = ModelConfig(num_classes=3, d=4, classifier=classifier, layers=[
            LayerConfig(form="tgm_channel_combine_1x1", c_in=1, c_out=3, L=3, M=2, d=4),
            LayerConfig(form="tgm_grouped", c_in=3, c_out=3, L=3, M=2, d=4)])
        models.append(cfg)
    for cfg in models:
        model = TgmModel(cfg, seed=seed)
        # zero readout weights would make every layer gradient vanish and the check vacuous
        weight = model.params["classifier.weight"]
        weight[:] = rng.normal(size=weight.shape)
        T = 9
        x = rng.normal(size=(1, cfg.d, T))
        z = (rng.random((cfg.num_classes, T)) < 0.3).astype(float)
        grads = None
        if args.inject_bug:
            _, cache = model.forward(x)
            grads = model.backward(cache, z)
            name = next(n for n in grads if n not in model.frozen and np.any(grads[n]))
            grads[name] = grads[name] * 1.1
            print(json.dumps({"injected_bug": name}))
        report = grad_check(model, x, z, grads=grads)
        failures += _print_report(f"model {cfg.classifier.value}", report)
    print(json.dumps({"pass": failures == 0, "failures": failures}))
    return EXIT_OK if failures == 0 else 1


def _print_report(label, report):
    print(json.dumps({"check": label, "pass": report.passed,
                      "max_rel_err": report.max_rel_err,
                      "worst_parameter": report.worst_parameter,
                      "skipped": report.skipped}))
    return 0 if report.passed else 1


def cmd_params(args):
    if args.config is None:
        raise CliError("--config is required", EXIT_INPUT)
    model_cfg, _ = _train_config(args.config)
    if args.L is not None:
        for lc in model_cfg.layers:
            lc.L = args.L
    model_cfg.validate()
    total = 0
    print(f"{'layer':<7}{'form':<30}{'source':<26}{'L':>4}{'params':>12}")
    for i, lc in enumerate(model_cfg.layers):
        n = param_count(lc)
        total += n
        print(f"{i:<7}{lc.form.value:<30}{lc.source.value:<26}{lc.L:>4}{n:>12,}")
    c, d = model_cfg.out_shape
    fan_in = d if model_cfg.classifier is Classifier.PER_CLASS else c * d
    n_cls = model_cfg.num_classes * (fan_in + 1)
    print(f"{'cls':<7}{model_cfg.classifier.value:<30}{'':<26}{'':>4}{n_cls:>12,}")
    print(f"{'total':<67}{total + n_cls:>12,}")
    return EXIT_OK


def cmd_export_kernels(args):
    if args.checkpoint is None or args.out is None:
        raise CliError("--checkpoint and --out are required", EXIT_INPUT)
    model, _, _ = _load_checkpoint(args.checkpoint)
    try:
        n = write_kernel_csv(args.out, model.export_kernels())
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}", EXIT_IO) from None
    print(json.dumps({"kernels": n, "path": args.out}))
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "export-kernels": cmd_export_kernels,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tgm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--manifest")
        p.add_argument("--out")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, default=1)
        if name == "train":
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--resume", help="continue from a training checkpoint")
        if name in ("eval", "export-kernels"):
            p.add_argument("--checkpoint")
        if name == "params":
            p.add_argument("--L", type=int, help="override every layer's kernel length")
        if name == "gradcheck":
            p.add_argument("--inject-bug", action="store_true",
                           help="scale one analytic gradient by 1.1 to test the harness")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"tgm {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, FormatError, UsageError, TypeError) as exc:
        print(f"tgm {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"tgm {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"tgm {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

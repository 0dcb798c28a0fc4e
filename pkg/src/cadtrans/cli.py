"""Command-line workflow: data generation, both training stages, evaluation and exports.

Configuration is a flat ``key=value`` file (``#`` starts a comment) passed
with ``--config=PATH``; any key can be overridden as ``--key=value``.
Unknown keys are rejected. Run ``cadtrans --help`` for the full key list.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import typing
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import fileio, gradcheck
from .adm import AdmConfig
from .backbone import BackboneConfig, ConfigError
from .pipeline import (AdaptConfig, adapt_target, config_snapshot, evaluate, extract, pseudo_label_round,
                       train_source)
from .synthdata import DomainSpec, generate

logger = logging.getLogger("cadtrans")

# ADM fields derived from the backbone rather than configured
_ADM_DERIVED = {"input_side", "feature_dim", "num_classes"}


class UsageError(Exception):
    """Bad command-line or config-file input."""


@dataclass
class Key:
    name: str
    default: Any
    parse: Callable[[str], Any]
    targets: List[Tuple[type, str]]


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parser_for(tp) -> Callable[[str], Any]:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union and type(None) in args:
        inner = _parser_for(next(a for a in args if a is not type(None)))
        return lambda s: None if s.strip().lower() in ("none", "") else inner(s)
    if origin in (tuple, Tuple) or tp is tuple:
        elem = args[0] if args else float
        conv = _parser_for(elem)
        return lambda s: tuple(conv(p) for p in s.split(",") if p.strip())
    if tp is bool:
        return _parse_bool
    if tp is int:
        return lambda s: int(s.strip())
    if tp is float:
        return lambda s: float(s.strip())
    return lambda s: s.strip()


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def build_registry() -> "OrderedDict[str, Key]":
    """One flat key per dataclass field; identical names share a key."""
    reg: "OrderedDict[str, Key]" = OrderedDict()
    sources = [(DomainSpec, ""), (BackboneConfig, ""), (AdmConfig, "adm_"), (AdaptConfig, "")]
    for cls, prefix in sources:
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            if cls is AdmConfig and f.name in _ADM_DERIVED:
                continue
            name = prefix + f.name
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            tp = hints[f.name]
            if cls is DomainSpec and f.name == "hard_rotation":
                tp = Tuple[float, ...]
            if cls is AdmConfig and f.name == "channels":
                # the input width comes from the backbone; only conv outputs are configurable
                default = default[1:]
            if name in reg:
                if reg[name].default != default:
                    raise RuntimeError(f"shared key {name!r} has conflicting defaults")
                reg[name].targets.append((cls, f.name))
                continue
            reg[name] = Key(name, default, _parser_for(tp), [(cls, f.name)])
    return reg


REGISTRY = build_registry()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def parse_overrides(args: Sequence[str]) -> Dict[str, str]:
    out = {}
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise UsageError(f"unrecognized argument {arg!r} (config overrides use --key=value)")
        key, value = arg[2:].split("=", 1)
        out[key.replace("-", "_")] = value
    return out


def resolve(raw: Dict[str, str]) -> Dict[str, Any]:
    """Defaults updated by parsed ``raw`` values; unknown keys raise ``UsageError``."""
    unknown = sorted(k for k in raw if k not in REGISTRY)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    values = {name: key.default for name, key in REGISTRY.items()}
    for name, text in raw.items():
        try:
            values[name] = REGISTRY[name].parse(text)
        except ValueError as exc:
            raise UsageError(f"bad value for {name}: {exc}") from None
    return values


def _kwargs_for(cls: type, values: Dict[str, Any]) -> Dict[str, Any]:
    kw = {}
    for key in REGISTRY.values():
        for target, field_name in key.targets:
            if target is cls:
                kw[field_name] = values[key.name]
    return kw


def make_configs(values: Dict[str, Any]):
    """``(DomainSpec, BackboneConfig, AdmConfig, AdaptConfig)`` from resolved values."""
    domain = DomainSpec(**_kwargs_for(DomainSpec, values))
    bcfg = BackboneConfig(**_kwargs_for(BackboneConfig, values))
    akw = _kwargs_for(AdmConfig, values)
    akw["channels"] = (bcfg.embed_dim,) + tuple(akw["channels"])
    akw.update(input_side=bcfg.image_side // bcfg.patch_side, feature_dim=bcfg.feature_dim,
               num_classes=bcfg.num_classes)
    acfg = AdmConfig(**akw)
    return domain, bcfg, acfg, AdaptConfig(**_kwargs_for(AdaptConfig, values))


def keys_help() -> str:
    lines = ["config keys (file: key=value, command line: --key=value):"]
    width = max(len(k) for k in REGISTRY)
    for name, key in REGISTRY.items():
        lines.append(f"  {name.ljust(width)}  default: {_format(key.default)}")
    return "\n".join(lines)


# -- commands ------------------------------------------------------------------
def _checkpoint_meta(model, stage: str, epoch: int, cfg: AdaptConfig) -> Dict:
    meta = config_snapshot(model)
    meta.update(stage=stage, epoch=epoch, adapt=dataclasses.asdict(cfg))
    return meta


def _check_data(data, bcfg: BackboneConfig, what: str) -> None:
    side = data.images.shape[-1]
    if data.images.ndim != 4 or data.images.shape[1] != bcfg.in_channels or side != bcfg.image_side:
        raise ConfigError(f"{what} images have shape {data.images.shape}, model expects "
                          f"(n, {bcfg.in_channels}, {bcfg.image_side}, {bcfg.image_side})")


def cmd_gen_data(opts, values) -> int:
    domain, *_ = make_configs(values)
    os.makedirs(opts.out_dir, exist_ok=True)
    source, target = generate(domain)
    fileio.save_dataset(os.path.join(opts.out_dir, "source.cadt"), source)
    fileio.save_dataset(os.path.join(opts.out_dir, "target.cadt"), target)
    logger.info("wrote %d source and %d target samples to %s", len(source), len(target), opts.out_dir)
    return 0


def cmd_train_source(opts, values) -> int:
    _, bcfg, acfg, cfg = make_configs(values)
    data = fileio.load_dataset(opts.data)
    if data.labels is None:
        raise ValueError(f"{opts.data} has no labels section")
    _check_data(data, bcfg, "source")
    if data.labels.size and int(data.labels.max()) >= bcfg.num_classes:
        raise ConfigError(f"labels reach {int(data.labels.max())} but num_classes={bcfg.num_classes}")
    model, history = train_source(data, cfg, bcfg, acfg)
    fileio.save_checkpoint(opts.out, model, _checkpoint_meta(model, "source", cfg.source_epochs, cfg))
    logger.info("source training done: final ce=%.4f acc=%.3f", history[-1]["ce"], history[-1]["train_acc"])
    return 0


def _truth(path: Optional[str]):
    # evaluation-only path: reads the sidecar, never handed to the adaptation code
    if not path:
        return None
    data = fileio.load_dataset(path, include_sidecar=True)
    if "labels" in data.sidecar:
        return data.sidecar["labels"]
    return data.labels


def cmd_adapt(opts, values) -> int:
    *_, cfg = make_configs(values)
    model, _ = fileio.load_checkpoint(opts.model)
    target = fileio.load_dataset(opts.data)
    _check_data(target, model.backbone_cfg, "target")
    result = adapt_target(model, target.without_sidecar(), cfg, truth=_truth(opts.truth))
    if opts.metrics:
        if os.path.exists(opts.metrics):
            os.remove(opts.metrics)
        for row in result.metrics:
            fileio.append_metrics_row(opts.metrics, row)
    fileio.save_checkpoint(opts.out, result.model, _checkpoint_meta(result.model, "target", cfg.target_epochs, cfg))
    return 0


def cmd_evaluate(opts, values) -> int:
    model, _ = fileio.load_checkpoint(opts.model)
    data = fileio.load_dataset(opts.data, include_sidecar=True)
    _check_data(data, model.backbone_cfg, "evaluation")
    res = evaluate(model, data)
    if opts.predictions:
        fileio.save_container(opts.predictions, OrderedDict(predictions=res["predictions"]))
    summary = {k: v for k, v in res.items() if k != "predictions"}
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_gradcheck(opts, values) -> int:
    results = gradcheck.run_suite(seed=values["seed"], samples=opts.samples)
    ok = True
    for name, res in results.items():
        status = "ok" if res.passed else "FAIL"
        print(f"{name:8s} max_rel_error={res.max_rel_error:.3e} entries={len(res.entries)} {status}")
        ok &= res.passed
    return 0 if ok else 1


def cmd_export_features(opts, values) -> int:
    *_, cfg = make_configs(values)
    model, _ = fileio.load_checkpoint(opts.model)
    data = fileio.load_dataset(opts.data)
    _check_data(data, model.backbone_cfg, "export")
    feats = extract(model, data.images.astype(model.dtype))
    labels_c, labels_g, bank, final = pseudo_label_round(feats, cfg)
    sections = OrderedDict()
    sections["f_t"] = feats["f_t"]
    sections["f_a"] = feats["f_a"]
    sections["z_t"] = feats["z_t"]
    sections["z_a"] = feats["z_a"]
    sections["pseudo_labels"] = final.labels
    sections["labels_classifier"] = labels_c.labels
    sections["labels_assistant"] = labels_g.labels
    sections["easy"] = bank.easy_mask().astype(np.int32)
    fileio.save_container(opts.out, sections)
    logger.info("exported %d samples (%d easy, %d hard) to %s", bank.size, bank.n_easy, bank.n_hard, opts.out)
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate source/target dataset containers"),
    "train-source": (cmd_train_source, "supervised source training with ADM distillation"),
    "adapt": (cmd_adapt, "source-free adaptation on an unlabelled target set"),
    "evaluate": (cmd_evaluate, "accuracy and loss summary of a checkpoint on a dataset"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of every objective (float64)"),
    "export-features": (cmd_export_features, "write features, pseudo-labels and easy flags"),
}


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    parser = argparse.ArgumentParser(prog="cadtrans", description=__doc__.splitlines()[0],
                                     epilog=keys_help(), formatter_class=fmt)
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("-q", "--quiet", action="store_true", help="only warnings on stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (_, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text, epilog=keys_help(), formatter_class=fmt)
        p.add_argument("--config", default=argparse.SUPPRESS, help="flat key=value config file")
        if name == "gen-data":
            p.add_argument("--out-dir", required=True)
        elif name == "train-source":
            p.add_argument("--data", required=True, help="labelled source container")
            p.add_argument("--out", required=True, help="checkpoint to write")
        elif name == "adapt":
            p.add_argument("--model", required=True, help="source checkpoint")
            p.add_argument("--data", required=True, help="target container (its sidecar is ignored)")
            p.add_argument("--out", required=True, help="adapted checkpoint to write")
            p.add_argument("--metrics", help="per-epoch metrics CSV")
            p.add_argument("--truth", help="container whose labels fill the accuracy columns")
        elif name == "evaluate":
            p.add_argument("--model", required=True)
            p.add_argument("--data", required=True)
            p.add_argument("--predictions", help="write the predicted labels to this container")
        elif name == "gradcheck":
            p.add_argument("--samples", type=int, default=32, help="parameter entries per loss")
        else:
            p.add_argument("--model", required=True)
            p.add_argument("--data", required=True)
            p.add_argument("--out", required=True)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    opts, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.WARNING if opts.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        raw = {}
        if opts.config:
            with open(opts.config) as fh:
                raw.update(parse_config_text(fh.read(), opts.config))
        raw.update(parse_overrides(extra))
        values = resolve(raw)
        return COMMANDS[opts.command][0](opts, values)
    except UsageError as exc:
        print(f"cadtrans: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, fileio.FormatError, ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"cadtrans {opts.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

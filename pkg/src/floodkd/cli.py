"""Batch command line: ``floodkd <command> [--config FILE] [--set key=value ...]``.

Configuration is plain UTF-8 ``key = value`` lines (``#`` starts a comment).
Relative paths in a config file resolve against the file's directory;
paths given with ``--set`` resolve against the working directory.

Exit codes: 0 success, 2 configuration error, 3 data or contract error,
4 numerical divergence.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, replace
from datetime import timedelta
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import gradcheck
from .datagen import (AugmentConfig, SampleRecord, SceneParams, cloud_path_for, corrupt_weak_label,
                      format_timestamp, generate_scene, load_samples, parse_timestamp,
                      read_manifest, write_manifest)
from .errors import ConfigError, DataError, DivergenceError, FloodKDError
from .evaluation import (confusion, evaluate_samples, pooled_ece, render_png, report_row,
                         write_report)
from .labeling import dilate_cloud_mask, improve_weak_label, otsu_segment, weak_label_from_ndwi
from .model import load_checkpoint, save_checkpoint
from .raster import WATER, cloud_fraction, ndwi, read_mask, read_raster, write_mask, write_raster
from .seeding import derive_seed
from .trainer import (LR_GRID, WD_GRID, TrainConfig, distill_student, grid_search,
                      train_supervised, train_teacher, write_history)

log = logging.getLogger("floodkd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# key schema

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _tuple_of(kind: Callable) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(kind(p.strip()) for p in parts)
    return parse


@dataclass(frozen=True)
class Key:
    name: str
    parse: Callable[[str], Any]
    default: Any
    help: str = ""
    is_path: bool = False

    @property
    def required(self) -> bool:
        return self.default is None and self.is_path


def _path_key(name: str, help: str, required: bool = True) -> Key:
    return Key(name, str, None if required else "", help, is_path=True)


def _parser_for(default: Any) -> Callable[[str], Any]:
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        return _tuple_of(type(default[0]))
    return type(default)


def _dataclass_keys(cls, skip=(), prefix="") -> list[Key]:
    inst = cls()
    return [Key(prefix + f.name, _parser_for(getattr(inst, f.name)), getattr(inst, f.name))
            for f in dataclasses.fields(cls) if f.name not in skip]


_aug = AugmentConfig()
SCENE_KEYS = _dataclass_keys(SceneParams)
TRAIN_KEYS = _dataclass_keys(TrainConfig, skip=("augment",)) + [
    Key("aug_flip_h", _parse_bool, _aug.flip_h, "random horizontal flips"),
    Key("aug_flip_v", _parse_bool, _aug.flip_v, "random vertical flips"),
    Key("aug_crop_min", float, _aug.crop_scale_range[0], "smallest crop side fraction"),
    Key("aug_crop_max", float, _aug.crop_scale_range[1], "largest crop side fraction"),
    Key("aug_jitter", float, _aug.jitter_sigma, "std of per-band brightness jitter"),
]

COMMAND_KEYS: dict[str, list[Key]] = {
    "synth": [
        _path_key("out_dir", "output directory"),
        Key("n_scenes", int, 10, "number of scenes"),
        Key("size", int, 64, "scene side length in pixels"),
        Key("seed", int, 0, "root seed"),
        Key("source", str, "handlabel", "manifest source tag"),
        Key("start_time", str, "2020-01-01T00:00:00Z", "timestamp of the first scene"),
    ] + SCENE_KEYS,
    "weaklabel": [
        _path_key("manifest", "input manifest"),
        _path_key("out_dir", "output directory"),
        Key("improve", _parse_bool, False, "fuse the water-occurrence map"),
        Key("occ_threshold", float, 0.5, "occurrence above this marks water"),
        Key("cloud_radius", int, 3, "cloud dilation radius in pixels"),
        Key("corrupt_mode", str, "none", "none, river_dropout, overflood or speckle_noise"),
        Key("corrupt_severity", float, 0.0, "corruption strength in [0, 1]"),
        Key("seed", int, 0, "root seed for corruption"),
        Key("source", str, "weak_floods208-like", "manifest source tag of the output"),
    ],
    "otsu": [
        _path_key("manifest", "input manifest"),
        _path_key("out_dir", "output directory"),
        Key("band", str, "VV", "SAR band to threshold"),
        Key("n_bins", int, 256, "histogram bins"),
    ],
    "train": [
        _path_key("train_manifest", "labelled training manifest"),
        _path_key("val_manifest", "validation manifest", required=False),
        _path_key("out_dir", "run directory"),
        Key("bands", str, "S1", "S1 or S1+S2"),
        Key("grid", _parse_bool, False, "grid-search lr0 and weight_decay"),
        Key("lr_grid", _tuple_of(float), LR_GRID, "learning rates for grid mode"),
        Key("wd_grid", _tuple_of(float), WD_GRID, "weight decays for grid mode"),
    ] + TRAIN_KEYS,
    "teacher": [
        _path_key("train_manifest", "hand-labelled manifest"),
        _path_key("val_manifest", "validation manifest", required=False),
        _path_key("out_dir", "run directory"),
    ] + TRAIN_KEYS,
    "distill": [
        _path_key("teacher", "teacher checkpoint"),
        _path_key("source_a", "first unlabelled manifest"),
        _path_key("source_b", "second unlabelled manifest"),
        _path_key("val_manifest", "validation manifest", required=False),
        _path_key("out_dir", "run directory"),
    ] + TRAIN_KEYS,
    "eval": [
        _path_key("manifest", "manifest whose labels are the reference"),
        _path_key("out_dir", "output directory"),
        _path_key("checkpoint", "model to evaluate", required=False),
        _path_key("pred_manifest", "precomputed label masks to evaluate", required=False),
        Key("split", str, "test", "split name written to the report"),
    ],
    "render": [
        _path_key("input", "class mask (.fsm) or probability raster (.fsr)"),
        _path_key("output", "PNG path"),
    ],
    "gradcheck": [
        Key("n_seeds", int, 20, "random instances per suite"),
        Key("size", int, 16, "input side length for the model suite"),
        Key("tolerance", float, gradcheck.TOLERANCE, "largest accepted relative error"),
    ],
}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        out[k] = v
    return out


def resolve(command: str, config_path: str | None, overrides: list[str]) -> dict[str, Any]:
    """Merge defaults, config file and overrides into typed values."""
    keys = {k.name: k for k in COMMAND_KEYS[command]}
    raw: dict[str, tuple[str, Path]] = {}
    if config_path:
        path = Path(config_path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        base = path.resolve().parent
        raw.update({k: (v, base) for k, v in parse_config_text(text, str(path)).items()})
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = (v.strip(), Path.cwd())
    unknown = sorted(set(raw) - set(keys))
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    values = {}
    for name, key in keys.items():
        if name not in raw:
            if key.required:
                raise ConfigError(f"missing required key {name!r}")
            values[name] = key.default
            continue
        text, base = raw[name]
        if key.is_path:
            values[name] = str(base / text) if text else ""
            continue
        try:
            values[name] = key.parse(text)
        except ValueError as exc:
            raise ConfigError(f"bad value for {name!r}: {exc}") from None
    return values


def format_config(values: dict[str, Any]) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ",".join(map(repr, v))
        if isinstance(v, bool):
            return str(v).lower()
        return repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k} = {fmt(v)}\n" for k, v in values.items())


def _pick(cls, values: dict[str, Any], prefix: str = ""):
    names = {f.name for f in dataclasses.fields(cls)}
    return cls(**{k[len(prefix):]: v for k, v in values.items()
                  if k.startswith(prefix) and k[len(prefix):] in names})


def train_config(values: dict[str, Any]) -> TrainConfig:
    aug = AugmentConfig(values["aug_flip_h"], values["aug_flip_v"],
                        (values["aug_crop_min"], values["aug_crop_max"]), values["aug_jitter"])
    fields = {f.name for f in dataclasses.fields(TrainConfig)} - {"augment"}
    cfg = TrainConfig(**{k: values[k] for k in fields}, augment=aug)
    return cfg.validate()


def _run_dir(values: dict[str, Any]) -> Path:
    out = Path(values["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(values), encoding="utf-8")
    return out


def _rel(path: str | Path, start: Path) -> str:
    return Path(os.path.relpath(path, start)).as_posix()


def _manifest_samples(path: str, with_labels: bool = True):
    if not path:
        return []
    return load_samples(read_manifest(path), with_labels)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(v: dict[str, Any]) -> None:
    params = _pick(SceneParams, v).validate()
    if v["n_scenes"] < 0 or v["size"] < 1:
        raise ConfigError("n_scenes must be >= 0 and size >= 1")
    out = _run_dir(v)
    scenes = out / "scenes"
    scenes.mkdir(exist_ok=True)
    t0 = parse_timestamp(v["start_time"])
    records = []
    for i in range(v["n_scenes"]):
        sid = f"scene{i:05d}"
        b = generate_scene(derive_seed(v["seed"], "scene", i), v["size"], params)
        paths = {k: scenes / f"{sid}.{k}" for k in ("s1.fsr", "s2.fsr", "occ.fsr", "truth.fsm")}
        write_raster(b.s1, paths["s1.fsr"])
        write_raster(b.s2, paths["s2.fsr"])
        write_raster(b.occurrence, paths["occ.fsr"])
        write_mask(b.truth, paths["truth.fsm"])
        write_mask(b.cloud, cloud_path_for(paths["s2.fsr"]))
        records.append(SampleRecord(sid, v["source"], _rel(paths["s1.fsr"], out),
                                    _rel(paths["s2.fsr"], out), _rel(paths["truth.fsm"], out),
                                    _rel(paths["occ.fsr"], out),
                                    format_timestamp(t0 + timedelta(hours=i)),
                                    cloud_fraction(b.cloud)))
    write_manifest(out / "manifest.csv", records)
    log.info("wrote %d scenes to %s", len(records), out)


def cmd_weaklabel(v: dict[str, Any]) -> None:
    mode = v["corrupt_mode"]
    if not 0 <= v["occ_threshold"] or v["cloud_radius"] < 0:
        raise ConfigError("occ_threshold must be >= 0 and cloud_radius >= 0")
    records = read_manifest(v["manifest"])
    out = _run_dir(v)
    (out / "labels").mkdir(exist_ok=True)
    new = []
    for r in records:
        cloud = read_mask(cloud_path_for(r.s2_path))
        weak = weak_label_from_ndwi(ndwi(read_raster(r.s2_path)),
                                    dilate_cloud_mask(cloud, v["cloud_radius"]))
        if mode != "none":
            weak = corrupt_weak_label(weak, mode, v["corrupt_severity"],
                                      derive_seed(v["seed"], "corrupt", r.scene_id))
        if v["improve"]:
            weak = improve_weak_label(weak, read_raster(r.occurrence_path), v["occ_threshold"])
        label_path = out / "labels" / f"{r.scene_id}.weak.fsm"
        write_mask(weak, label_path)
        new.append(replace(r, source=v["source"], s1_path=_rel(r.s1_path, out),
                           s2_path=_rel(r.s2_path, out), label_path=_rel(label_path, out),
                           occurrence_path=_rel(r.occurrence_path, out)))
    write_manifest(out / "manifest.csv", new)


def cmd_otsu(v: dict[str, Any]) -> None:
    records = read_manifest(v["manifest"])
    out = _run_dir(v)
    (out / "labels").mkdir(exist_ok=True)
    new = []
    for r in records:
        seg = otsu_segment(read_raster(r.s1_path), v["band"], v["n_bins"])
        label_path = out / "labels" / f"{r.scene_id}.otsu.fsm"
        write_mask(seg, label_path)
        new.append(replace(r, s1_path=_rel(r.s1_path, out), s2_path=_rel(r.s2_path, out),
                           label_path=_rel(label_path, out),
                           occurrence_path=_rel(r.occurrence_path, out)))
    write_manifest(out / "manifest.csv", new)


def _save_run(out: Path, best, history) -> None:
    write_history(out / "history.csv", history)
    save_checkpoint(best, out / "best.ckpt")
    save_checkpoint(history.last if history.last is not None else best, out / "last.ckpt")


def cmd_train(v: dict[str, Any]) -> None:
    cfg = train_config(v)
    train = _manifest_samples(v["train_manifest"])
    val = _manifest_samples(v["val_manifest"])
    out = _run_dir(v)
    if v["grid"]:
        res = grid_search(v["lr_grid"], v["wd_grid"], cfg, train, val, v["bands"])
        with open(out / "grid.csv", "w", encoding="utf-8") as f:
            f.write("lr0,weight_decay,best_val_iou\n")
            f.writelines(f"{lr!r},{wd!r},{s!r}\n" for lr, wd, s in res.trials)
        best, history = res.best_net, res.best_history
    else:
        best, history = train_supervised(cfg, train, val, v["bands"])
    _save_run(out, best, history)


def cmd_teacher(v: dict[str, Any]) -> None:
    cfg = train_config(v)
    train = _manifest_samples(v["train_manifest"])
    val = _manifest_samples(v["val_manifest"])
    out = _run_dir(v)
    best, history = train_teacher(cfg, train, val)
    _save_run(out, best, history)


def cmd_distill(v: dict[str, Any]) -> None:
    cfg = train_config(v)
    teacher = load_checkpoint(v["teacher"])
    a = _manifest_samples(v["source_a"], with_labels=False)
    b = _manifest_samples(v["source_b"], with_labels=False)
    val = _manifest_samples(v["val_manifest"])
    out = _run_dir(v)
    best, history = distill_student(teacher, cfg, a, b, val)
    _save_run(out, best, history)


def cmd_eval(v: dict[str, Any]) -> None:
    if bool(v["checkpoint"]) == bool(v["pred_manifest"]):
        raise ConfigError("eval needs exactly one of 'checkpoint' or 'pred_manifest'")
    records = read_manifest(v["manifest"])
    if v["checkpoint"]:
        net = load_checkpoint(v["checkpoint"])
        bands = {2: "S1", 6: "S1+S2"}.get(net.config.in_channels)
        if bands is None:
            raise ConfigError(f"cannot evaluate a model with {net.config.in_channels} inputs")
        samples = load_samples(records)
        counts, probs = evaluate_samples(net, samples, bands)
        truths = [s.label for s in samples]
    else:
        preds = {r.scene_id: r for r in read_manifest(v["pred_manifest"])}
        missing = [r.scene_id for r in records if r.scene_id not in preds]
        if missing:
            raise DataError(f"no prediction for scene(s): {', '.join(missing[:5])}")
        counts, probs, truths = [], [], []
        for r in records:
            truth = read_mask(r.label_path)
            pred = read_mask(preds[r.scene_id].label_path)
            counts.append(confusion((pred.codes == WATER).astype(np.uint8), truth))
            probs.append((pred.codes == WATER).astype(np.float64))
            truths.append(truth)
    out = _run_dir(v)
    e = pooled_ece(probs, truths) if records else float("nan")
    write_report(out / "report.csv", [report_row(v["split"], counts, e)])


def cmd_render(v: dict[str, Any]) -> None:
    src = Path(v["input"])
    if src.suffix == ".fsm":
        render_png(read_mask(src), v["output"])
    else:
        r = read_raster(src)
        render_png(r.band("p_water") if "p_water" in r.names else r.data[0], v["output"])


def cmd_gradcheck(v: dict[str, Any]) -> None:
    if v["n_seeds"] < 1:
        raise ConfigError("n_seeds must be >= 1")
    results = gradcheck.run_suite(v["n_seeds"], v["size"])
    worst = 0.0
    for suite, r in results.items():
        print(f"{suite:14s} max_rel_error={r['max_rel_error']:.3e} seconds={r['seconds']:.2f}")
        worst = max(worst, r["max_rel_error"])
    if worst > v["tolerance"]:
        raise DivergenceError(f"gradient check failed: {worst:.3e} > {v['tolerance']:.1e}")


COMMANDS = {
    "synth": (cmd_synth, "generate synthetic paired scenes and a manifest"),
    "weaklabel": (cmd_weaklabel, "derive NDWI weak labels, optionally corrupted or improved"),
    "otsu": (cmd_otsu, "threshold SAR backscatter with Otsu's method"),
    "train": (cmd_train, "supervised training (optionally grid search)"),
    "teacher": (cmd_teacher, "train the stacked SAR+optical teacher"),
    "distill": (cmd_distill, "distil the frozen teacher into a SAR-only student"),
    "eval": (cmd_eval, "pooled IoU and calibration report"),
    "render": (cmd_render, "render a mask or probability raster as PNG"),
    "gradcheck": (cmd_gradcheck, "finite-difference gradient suites"),
}


def _keys_epilog(command: str) -> str:
    lines = ["keys (key = default):"]
    for k in COMMAND_KEYS[command]:
        default = "<required>" if k.required else format_config({"x": k.default})[4:].strip()
        lines.append(f"  {k.name} = {default}" + (f"    # {k.help}" if k.help else ""))
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="floodkd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=_keys_epilog(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key = value file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one key (repeatable)")
        p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        values = resolve(args.command, args.config, args.set)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits
            with threadpool_limits(args.threads):
                func(values)
        else:
            func(values)
    except ConfigError as exc:
        print(f"floodkd {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"floodkd {args.command}: numeric error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FloodKDError, OSError) as exc:
        print(f"floodkd {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""``adaptive-dbn`` command line.

Commands: ``synth-data``, ``train``, ``evaluate``, ``finetune``, ``prune``,
``bench`` and ``inspect``. Every setting is a flat ``key=value`` entry
(``train.learning_rate``, ``structure.generation``, ...). Values come from
the built-in defaults, then the shipped ``default.cfg``, then ``--config``
files, then ``--set`` and dedicated flags. Each run writes the resolved
settings to ``<out-dir>/resolved.cfg``; passing that file back with
``--config`` repeats the run exactly.

Exit codes: 0 success, 2 usage, 3 data, 4 model file integrity, 5 training.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (FrameStream, benchmark_inference, compare_models, paired_benchmark,
                    read_report, write_report)
from .data import (DatasetError, PreprocessConfig, SynthConfig, category_label,
                   generate_synthetic_crack_set, load_dataset, save_patches, to_patch_set)
from .dbn import DbnModel, TrainConfig, evaluate, format_ratio, predict, train_adaptive_dbn
from .finetune import (FinetuneConfig, arrow, collect_activation_stats, finetune_weights,
                       prune_inactive_neurons)
from .serialize import ModelFileError, load_model, save_features, save_model
from .structure import StructureThresholds

log = logging.getLogger("adaptive_dbn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL, EXIT_TRAINING = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class TrainingError(Exception):
    pass


# --------------------------------------------------------------------------
# settings

def _dataclass_defaults(prefix: str, cls, skip=("seed",)) -> dict:
    return {f"{prefix}.{f.name}": f.default for f in dataclasses.fields(cls)
            if f.name not in skip and not f.name.startswith("_")}


def default_settings() -> dict:
    s = {"seed": 0, "input.model": "", "data.path": "", "data.manifest": "",
         "data.synthetic": False, "data.split": "test",
         "synth.train_per_class": 1000, "synth.test_per_class": 200,
         "synth.side": SynthConfig.side, "synth.width_min": SynthConfig.width_range[0],
         "synth.width_max": SynthConfig.width_range[1],
         "synth.noise_level": SynthConfig.noise_level,
         "preprocess.target_side": PreprocessConfig.target_side,
         "preprocess.grayscale": PreprocessConfig.grayscale,
         "prune.threshold": 0.01,
         "bench.warmup": 50, "bench.iterations": 1000, "bench.forward_only": False,
         "bench.frames_dir": "", "bench.rate": 30.0, "bench.compare": ""}
    s.update(_dataclass_defaults("train", TrainConfig))
    s.update(_dataclass_defaults("structure", StructureThresholds, skip=()))
    s.update(_dataclass_defaults("finetune", FinetuneConfig))
    return s


def _coerce(key: str, raw: str, template):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"invalid value {raw!r} for {key} "
                         f"(expected {type(template).__name__})") from None
    return raw


def apply_pairs(settings: dict, pairs, origin: str) -> None:
    for pair in pairs:
        key, sep, value = pair.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{origin}: expected key=value, got {pair!r}")
        if key not in settings:
            raise UsageError(f"{origin}: unknown setting {key!r}")
        settings[key] = _coerce(key, value, settings[key])


def read_config_lines(path) -> list:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    return [line for line in (l.strip() for l in text.splitlines())
            if line and not line.startswith("#")]


def shipped_defaults_text() -> str:
    return resources.files("adaptive_dbn").joinpath("default.cfg").read_text(encoding="utf-8")


def resolve_settings(args) -> dict:
    settings = default_settings()
    shipped = [l.strip() for l in shipped_defaults_text().splitlines()
               if l.strip() and not l.startswith("#")]
    apply_pairs(settings, shipped, "default.cfg")
    for path in args.config or []:
        apply_pairs(settings, read_config_lines(path), str(path))
    apply_pairs(settings, args.set or [], "--set")
    for key, value in _flag_settings(args).items():
        if value is not None:
            settings[key] = value
    return settings


def _flag_settings(args) -> dict:
    return {"seed": args.seed,
            "input.model": getattr(args, "model", None),
            "data.path": getattr(args, "data", None),
            "data.manifest": getattr(args, "manifest", None),
            "data.synthetic": True if getattr(args, "synthetic", False) else None,
            "data.split": getattr(args, "split", None),
            "synth.train_per_class": getattr(args, "train_per_class", None),
            "synth.test_per_class": getattr(args, "test_per_class", None),
            "bench.warmup": getattr(args, "warmup", None),
            "bench.iterations": getattr(args, "iterations", None),
            "bench.forward_only": True if getattr(args, "forward_only", False) else None,
            "bench.frames_dir": getattr(args, "frames_dir", None),
            "bench.compare": getattr(args, "compare", None)}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_snapshot(settings: dict, command: str, out_dir: Path) -> Path:
    lines = [f"# adaptive-dbn {__version__} resolved settings for: {command}",
             f"# rerun with: adaptive-dbn {command} --config resolved.cfg"]
    lines += [f"{key}={format_value(settings[key])}" for key in sorted(settings)]
    path = out_dir / "resolved.cfg"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _section(settings: dict, prefix: str) -> dict:
    return {k[len(prefix) + 1:]: v for k, v in settings.items() if k.startswith(prefix + ".")}


def build_configs(settings: dict) -> dict:
    """Typed configuration objects plus per-stage seeds from one root seed."""
    if settings["seed"] < 0:
        raise UsageError("seed must be a non-negative integer")
    seeds = np.random.SeedSequence(settings["seed"]).generate_state(5)
    synth = _section(settings, "synth")
    try:
        return {
            "preprocess": PreprocessConfig(settings["preprocess.target_side"],
                                           settings["preprocess.grayscale"]),
            "synth": SynthConfig(side=synth["side"],
                                 width_range=(synth["width_min"], synth["width_max"]),
                                 noise_level=synth["noise_level"]),
            "train": TrainConfig(**_section(settings, "train"), seed=int(seeds[3])),
            "thresholds": StructureThresholds(**_section(settings, "structure")),
            "finetune": FinetuneConfig(**_section(settings, "finetune"), seed=int(seeds[4])),
            "seeds": {"train_data": int(seeds[0]), "test_data": int(seeds[1]),
                      "shuffle": int(seeds[2])},
        }
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


# --------------------------------------------------------------------------
# data

class Split:
    """A preprocessed split plus the category name of every sample."""

    def __init__(self, data, categories):
        self.data = data
        self.categories = categories


def load_splits(settings: dict, configs: dict, need=("train", "test")) -> dict:
    pre = configs["preprocess"]
    if settings["data.synthetic"]:
        seeds = configs["seeds"]
        sizes = {"train": settings["synth.train_per_class"],
                 "test": settings["synth.test_per_class"]}
        out = {}
        for name in need:
            if sizes[name] < 1:
                raise UsageError(f"synth.{name}_per_class must be >= 1")
            patches = generate_synthetic_crack_set(sizes[name], configs["synth"],
                                                   seeds[f"{name}_data"])
            if name == "train":
                order = np.random.default_rng(seeds["shuffle"]).permutation(len(patches))
                patches = [patches[k] for k in order]
            out[name] = Split(to_patch_set(patches, pre), [category_label(p) for p in patches])
        return out
    if not settings["data.path"]:
        raise UsageError("a dataset is required: pass --data DIR or --synthetic")

    root = Path(settings["data.path"])
    manifest = settings["data.manifest"] or (root / "manifest.tsv")
    manifest = manifest if Path(manifest).exists() else None
    try:
        result = load_dataset(root, manifest)
    except DatasetError as exc:
        raise DataError(str(exc)) from None
    for rel, message in result.errors:
        log.warning("skipped unreadable image %s: %s", rel, message)
    out = {}
    for name in need:
        # without a manifest every image belongs to every requested split
        patches = [p for p in result.patches if manifest is None or p.split == name]
        if not patches:
            raise DataError(f"no images assigned to the {name!r} split under {root}")
        out[name] = Split(to_patch_set(patches, pre), [category_label(p) for p in patches])
    return out


def check_compatible(model: DbnModel, split: Split) -> None:
    digest = split.data.provenance
    if model.preprocess_digest and model.preprocess_digest != digest:
        raise DataError(f"model was trained with preprocessing {model.preprocess_digest}, "
                        f"data uses {digest}; the two are incompatible")
    if model.input_dim != split.data.feature_dim:
        raise DataError(f"model expects {model.input_dim} inputs, data has "
                        f"{split.data.feature_dim}")


def category_lines(model: DbnModel, split: Split) -> list:
    """Per-category accuracy lines, ``name  96.5% (64/1834)``, and the total."""
    pred = predict(model, split.data.features)
    wrong = pred != split.data.labels
    lines = []
    for name in sorted(set(split.categories)):
        mask = np.array([c == name for c in split.categories])
        lines.append(f"{name:<28}{format_ratio(int(wrong[mask].sum()), int(mask.sum()))}")
    lines.append(f"{'Total':<28}{format_ratio(int(wrong.sum()), len(wrong))}")
    return lines


def _open_model(settings: dict) -> DbnModel:
    path = settings["input.model"]
    if not path:
        raise UsageError("a model file is required: pass --model PATH")
    try:
        return load_model(path)
    except FileNotFoundError:
        raise UsageError(f"model file {path} does not exist") from None


# --------------------------------------------------------------------------
# commands

def cmd_synth_data(settings, configs, out_dir: Path) -> list:
    pre, seeds = configs["preprocess"], configs["seeds"]
    patches, names = [], []
    for name in ("train", "test"):
        n = settings[f"synth.{name}_per_class"]
        if n < 1:
            raise UsageError(f"synth.{name}_per_class must be >= 1")
        part = generate_synthetic_crack_set(n, configs["synth"], seeds[f"{name}_data"])
        save_features(to_patch_set(part, pre), out_dir / f"features.{name}.adbf")
        patches += part
        names += [name] * len(part)
    manifest = save_patches(patches, out_dir / "images", names)
    return [f"images={len(patches)}", f"manifest={manifest}",
            f"train={names.count('train')}", f"test={names.count('test')}"]


def cmd_train(settings, configs, out_dir: Path) -> list:
    splits = load_splits(settings, configs)
    train, test = splits["train"], splits["test"]
    save_features(train.data, out_dir / "features.train.adbf")
    try:
        model = train_adaptive_dbn(train.data, configs["train"], configs["thresholds"])
    except (ArithmeticError, ValueError) as exc:
        raise TrainingError(f"training failed: {exc}") from exc
    path = save_model(model, out_dir / "model.adbn")
    lines = [f"model={path}", f"input_dim={model.input_dim}", f"hidden={arrow(model.hidden_sizes)}",
             f"parameters={model.n_parameters()}",
             "structure_events=" + str(len(model.structure_log)),
             "[train]", *category_lines(model, train), "[test]", *category_lines(model, test),
             "[structure_log]", *(ev.to_line() for ev in model.structure_log)]
    return lines


def cmd_evaluate(settings, configs, out_dir: Path) -> list:
    model = _open_model(settings)
    split_name = settings["data.split"]
    if split_name not in ("train", "test"):
        raise UsageError("data.split must be 'train' or 'test'")
    split = load_splits(settings, configs, need=(split_name,))[split_name]
    check_compatible(model, split)
    m = evaluate(model, split.data)
    return [f"split={split_name}", f"accuracy={m.accuracy!r}", *category_lines(model, split)]


def _prune(model, train, settings, configs):
    stats = collect_activation_stats(model, train.data)
    return prune_inactive_neurons(model, stats, settings["prune.threshold"],
                                  configs["thresholds"].annihilation, train.data)


def cmd_finetune(settings, configs, out_dir: Path, do_finetune: bool = True) -> list:
    model = _open_model(settings)
    splits = load_splits(settings, configs)
    train, test = splits["train"], splits["test"]
    check_compatible(model, train)
    tuned = model
    if do_finetune:
        try:
            tuned = finetune_weights(model, train.data, configs["finetune"])
        except (ArithmeticError, ValueError) as exc:
            raise TrainingError(f"fine-tuning failed: {exc}") from exc
    pruned, report = _prune(tuned, train, settings, configs)
    before, after = paired_benchmark(model, pruned, _stream(settings), settings["bench.warmup"],
                                     settings["bench.iterations"],
                                     forward_only=settings["bench.forward_only"],
                                     config=configs["preprocess"])
    report.latency_before_ms, report.latency_after_ms = before.mean_ms, after.mean_ms
    name = "model.finetuned.adbn" if do_finetune else "model.pruned.adbn"
    path = save_model(pruned, out_dir / name)
    test_before, test_after = evaluate(model, test.data), evaluate(pruned, test.data)
    return [f"model={path}",
            f"before={arrow(model.hidden_sizes)}",
            f"after={arrow(pruned.hidden_sizes)}",
            f"train_accuracy_before={evaluate(model, train.data).accuracy!r}",
            f"train_accuracy_after={evaluate(pruned, train.data).accuracy!r}",
            f"test_accuracy_before={test_before.accuracy!r}",
            f"test_accuracy_after={test_after.accuracy!r}",
            "[prune]", *report.lines(),
            "[test before]", *category_lines(model, test),
            "[test after]", *category_lines(pruned, test)]


def _stream(settings) -> FrameStream:
    frames = settings["bench.frames_dir"]
    if frames:
        return FrameStream("directory", frames, rate=settings["bench.rate"])
    return FrameStream("synthetic", rate=settings["bench.rate"], seed=settings["seed"])


def cmd_bench(settings, configs, out_dir: Path) -> list:
    model = _open_model(settings)
    if model.input_dim != configs["preprocess"].feature_dim:
        raise DataError(f"model expects {model.input_dim} inputs but preprocessing yields "
                        f"{configs['preprocess'].feature_dim}")
    try:
        stream = _stream(settings)
        stream.frames()
    except (DatasetError, ValueError) as exc:
        raise DataError(str(exc)) from None
    report = benchmark_inference(model, stream, settings["bench.warmup"],
                                 settings["bench.iterations"], settings["bench.forward_only"],
                                 configs["preprocess"], Path(settings["input.model"]).name)
    path, csv_path = write_report(report, out_dir / "bench.txt")
    lines = report.summary_lines() + [f"report={path}", f"samples={csv_path}"]
    if settings["bench.compare"]:
        try:
            baseline = read_report(settings["bench.compare"])
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read baseline report: {exc}") from None
        lines += ["[compared with " + settings["bench.compare"] + "]",
                  *compare_models(baseline, report).lines()]
    return lines


def inspect_lines(model: DbnModel) -> list:
    sizes = list(model.hidden_sizes)
    before = list(sizes)
    for ev in model.structure_log:
        if ev.kind == "prune":
            before[ev.layer] += len(ev.indices)
    lines = [f"input_dim={model.input_dim}", f"classes={model.n_classes}",
             f"parameters={model.n_parameters()}",
             f"preprocess={model.preprocess_digest or '-'}"]
    if before != sizes:
        lines += [f"before: {arrow(before)}", f"after:  {arrow(sizes)}"]
    else:
        lines.append(f"layers: {arrow(sizes)}")
    counts = {}
    for ev in model.structure_log:
        counts[ev.kind] = counts.get(ev.kind, 0) + (len(ev.indices) or 1)
    lines.append("events: " + (", ".join(f"{k}={v}" for k, v in sorted(counts.items())) or "none"))
    return lines


def cmd_inspect(settings, configs, out_dir: Path) -> list:
    return inspect_lines(_open_model(settings))


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate the synthetic crack set as PNGs and feature files"),
    "train": (cmd_train, "adaptive DBN training with a per-category accuracy report"),
    "evaluate": (cmd_evaluate, "per-category accuracy of a model on a data split"),
    "finetune": (cmd_finetune, "fine-tune a model, prune inactive neurons, report both"),
    "prune": (lambda s, c, o: cmd_finetune(s, c, o, do_finetune=False),
              "prune inactive neurons without fine-tuning"),
    "bench": (cmd_bench, "time single-image inference on a frame stream"),
    "inspect": (cmd_inspect, "print a model's layer sizes and structure summary"),
}


# --------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", action="append", metavar="FILE",
                        help="flat key=value settings file (repeatable)")
    shared.add_argument("--seed", type=int, help="root seed for every random choice")
    shared.add_argument("--out-dir", default="run", help="output directory (default: run)")
    shared.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one setting (repeatable)")
    shared.add_argument("-v", "--verbose", action="store_true", help="log progress")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", metavar="DIR", help="dataset root in category-directory layout")
    data.add_argument("--manifest", metavar="FILE", help="split manifest (default DIR/manifest.tsv)")
    data.add_argument("--synthetic", action="store_true", help="use the synthetic crack set")
    data.add_argument("--train-per-class", type=int, help="synthetic training patches per class")
    data.add_argument("--test-per-class", type=int, help="synthetic test patches per class")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--model", metavar="PATH", help="model file")

    parser = argparse.ArgumentParser(prog="adaptive-dbn", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, parents):
        return sub.add_parser(name, parents=[shared] + parents, help=COMMANDS[name][1],
                              description=COMMANDS[name][1])

    p = add("synth-data", [])
    p.add_argument("--train-per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    add("train", [data])
    p = add("evaluate", [data, model])
    p.add_argument("--split", choices=("train", "test"))
    add("finetune", [data, model])
    add("prune", [data, model])
    p = add("bench", [model])
    p.add_argument("--warmup", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--forward-only", action="store_true", help="exclude preprocessing")
    p.add_argument("--frames-dir", metavar="DIR", help="replay images from DIR")
    p.add_argument("--compare", metavar="REPORT", help="baseline bench.txt to compare against")
    add("inspect", [model])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = Path(args.out_dir)

    try:
        settings = resolve_settings(args)
        if args.command == "synth-data":
            settings["data.synthetic"] = True
        configs = build_configs(settings)
        if args.command != "inspect":
            out_dir.mkdir(parents=True, exist_ok=True)
            write_snapshot(settings, args.command, out_dir)
        lines = COMMANDS[args.command][0](settings, configs, out_dir)
        code, status = EXIT_OK, "ok"
    except UsageError as exc:
        print(f"adaptive-dbn {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        lines, code, status = [f"error={exc}"], EXIT_DATA, "data-error"
    except ModelFileError as exc:
        lines, code, status = [f"error={exc}"], EXIT_MODEL, "model-file-error"
    except TrainingError as exc:
        lines, code, status = [f"error={exc}"], EXIT_TRAINING, "training-failed"

    report = [f"command={args.command}", f"status={status}"] + lines
    if code:
        print(f"adaptive-dbn {args.command}: {lines[0][len('error='):]}", file=sys.stderr)
    else:
        # the full structure log only goes to report.txt
        shown = report[:report.index("[structure_log]")] if "[structure_log]" in report else report
        print("\n".join(shown))
    if args.command != "inspect" and out_dir.is_dir():
        (out_dir / "report.txt").write_text("\n".join(report) + "\n", encoding="utf-8")
    return code


if __name__ == "__main__":
    sys.exit(main())

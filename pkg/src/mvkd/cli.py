"""``mvkd`` command line: synthesize data, train, distill, evaluate, explain, benchmark.

Every run writes into ``<out>/<run-name>/`` and echoes its merged settings to
``config.resolved.json``. Settings come from defaults, then an optional JSON
``--config`` file, then command-line flags (later wins).

Exit codes: 0 success, 1 usage or configuration error, 2 data or file error,
3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bench import bench_fps, size_report
from .data import channel_stats, load_dataset, preprocess, read_image, synth_fire_dataset
from .distill import DistillConfig, distill_student, train_baseline, train_teacher, write_history
from .errors import ConfigError, DataError, InvalidConfig, MvkdError
from .evaluate import default_target_layer, evaluate, grad_cam, render_overlay
from .models import ModelConfig, load_checkpoint, param_count, save_checkpoint
from .tensor import Tensor

log = logging.getLogger("mvkd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything one invocation may need; unset fields keep these defaults."""

    seed: int = 0
    out: str = "runs"
    run_name: str = "run"
    # data
    data: str | None = None
    image_size: int = 64
    num_per_class: int = 100
    num_classes: int = 2
    hardness: str = "easy"
    standardize: bool = True
    # models (ModelConfig overrides)
    student: dict = field(default_factory=lambda: {"kind": "student_s", "scale": 0.25})
    teacher: dict = field(default_factory=lambda: {"kind": "teacher_vit32", "scale": 0.25, "depth": 4})
    # optimization
    temperature: float = 2.0
    alpha: float = 0.1
    lr_teacher: float = 1e-4
    lr_student: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 16
    epochs_teacher: int = 300
    epochs_student: int = 300
    patience: int = 10
    # eval / gradcam / bench inputs
    teacher_checkpoint: str | None = None
    checkpoint: str | None = None
    split: str = "test"
    image: str | None = None
    target_class: int | None = None
    target_layer: str | None = None
    bench_batch: int = 1
    warmup_iters: int = 20
    measured_iters: int = 100
    workers: int = 1
    csv: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise InvalidConfig(f"unknown config keys: {unknown}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def distill_config(self) -> DistillConfig:
        return DistillConfig(
            temperature=self.temperature,
            alpha=self.alpha,
            lr_teacher=self.lr_teacher,
            lr_student=self.lr_student,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs_teacher=self.epochs_teacher,
            epochs_student=self.epochs_student,
            patience=self.patience,
            seed=self.seed,
        )

    def model_config(self, role: str) -> ModelConfig:
        d = dict(getattr(self, role))
        d.setdefault("num_classes", self.num_classes)
        d.setdefault("input_size", self.image_size)
        return ModelConfig.from_dict(d)

    def validate(self) -> "RunConfig":
        if self.hardness not in ("easy", "hard"):
            raise InvalidConfig(f"hardness must be easy or hard, got {self.hardness!r}")
        if self.split not in ("train", "val", "test"):
            raise InvalidConfig(f"split must be train, val or test, got {self.split!r}")
        if not self.run_name or "/" in self.run_name:
            raise InvalidConfig(f"invalid run name {self.run_name!r}")
        self.distill_config().validate()
        self.model_config("student").resolved()
        self.model_config("teacher").resolved()
        return self

    @property
    def run_dir(self) -> Path:
        return Path(self.out) / self.run_name


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _json_dict(text: str) -> dict:
    try:
        value = json.loads(text)
    except json.JSONDecodeError as exc:
        raise argparse.ArgumentTypeError(f"not valid JSON: {exc}") from None
    if not isinstance(value, dict):
        raise argparse.ArgumentTypeError("expected a JSON object")
    return value


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# flag groups; every flag maps onto the RunConfig field of the same name
_DATA = {
    "data": (str, "image folder (one sub-folder per class)"),
    "image_size": (int, "square input resolution"),
    "standardize": (_bool, "standardize inputs with train-split channel statistics"),
}
_SYNTH = {
    "num_per_class": (int, "synthetic images per class"),
    "num_classes": (int, "2 (fire / non-fire) or 12 (archetypes)"),
    "hardness": (str, "easy or hard"),
    "image_size": (int, "square image resolution"),
}
_OPTIM = {
    "batch_size": (int, "mini-batch size"),
    "weight_decay": (float, "AdamW decoupled weight decay"),
    "patience": (int, "early stopping patience in epochs"),
}
_TEACHER = {
    "teacher": (_json_dict, "teacher ModelConfig overrides as JSON"),
    "lr_teacher": (float, "teacher learning rate"),
    "epochs_teacher": (int, "maximum teacher epochs"),
}
_STUDENT = {
    "student": (_json_dict, "student ModelConfig overrides as JSON"),
    "lr_student": (float, "student learning rate"),
    "epochs_student": (int, "maximum student epochs"),
}
_KD = {
    "teacher_checkpoint": (str, "trained teacher checkpoint"),
    "temperature": (float, "softmax temperature T"),
    "alpha": (float, "weight of the distillation term"),
}
_CKPT = {"checkpoint": (str, "model checkpoint")}

_COMMANDS = {
    "synth": ("write a synthetic dataset as an image folder", [_SYNTH]),
    "train-teacher": ("train the ViT teacher on labels", [_DATA, _OPTIM, _TEACHER]),
    "train-baseline": ("train the student on labels only", [_DATA, _OPTIM, _STUDENT]),
    "distill": ("train the student against labels and a frozen teacher", [_DATA, _OPTIM, _STUDENT, _KD]),
    "eval": ("confusion matrix and P/R/F1/accuracy on one split", [_DATA, _CKPT, {"split": (str, "train, val or test")}]),
    "gradcam": (
        "Grad-CAM overlay for one image",
        [
            _CKPT,
            {
                "image": (str, "input image (PPM or PNG)"),
                "image_size": (int, "resize target when the checkpoint does not fix it"),
                "target_class": (int, "class to explain (default: predicted class)"),
                "target_layer": (str, "module path of the explained layer"),
            },
        ],
    ),
    "bench": (
        "inference throughput and model size",
        [
            _CKPT,
            {
                "bench_batch": (int, "frames per forward pass"),
                "warmup_iters": (int, "untimed warmup passes"),
                "measured_iters": (int, "timed passes (>= 10)"),
                "workers": (int, "concurrent inference threads"),
                "csv": (str, "append the report to this CSV file"),
            },
        ],
    ),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvkd", description="Knowledge distillation from a ViT teacher into a MobileViT student.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    for name, (help_text, groups) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, argument_default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--config", dest="config_file", help="JSON RunConfig file")
        p.add_argument("--out", help="output root directory")
        p.add_argument("--run-name", help="run sub-directory under --out")
        p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
        seen = set()
        for group in groups:
            for key, (typ, h) in group.items():
                if key in seen:
                    continue
                seen.add(key)
                p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, help=h)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < --config file < flags."""
    values = {}
    path = getattr(args, "config_file", None)
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise InvalidConfig(f"config {path} must hold a JSON object")
        values.update(loaded)
    skip = {"command", "config_file", "verbose"}
    values.update({k: v for k, v in vars(args).items() if k not in skip})
    return RunConfig.from_dict(values).validate()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _require(cfg: RunConfig, name: str) -> str:
    value = getattr(cfg, name)
    if not value:
        raise UsageError(f"--{name.replace('_', '-')} is required for this command")
    return value


def _load_split_dataset(cfg: RunConfig, split_seed: int):
    ds = load_dataset(_require(cfg, "data"), cfg.image_size).split(seed=split_seed)
    if ds.num_classes != cfg.num_classes:
        log.info("dataset has %d classes; overriding num_classes", ds.num_classes)
        cfg.num_classes = ds.num_classes
    return ds


def _with_stats(cfg: RunConfig, model_cfg: ModelConfig, dataset) -> ModelConfig:
    if not cfg.standardize:
        return model_cfg
    mean, std = channel_stats(dataset, "train")
    return dataclasses.replace(model_cfg, input_mean=mean, input_std=std)


def _epoch_logger(verbose: bool):
    def report(rec):
        (log.info if verbose else log.debug)(
            "epoch %d  loss %.4f  val_acc %.4f", rec["epoch"], rec["train_loss"], rec["val_acc"]
        )

    return report


def _finish_training(cfg: RunConfig, run: Path, model, state, dataset, filename: str, role: str) -> None:
    meta = {
        "role": role,
        "seed": cfg.seed,
        "split_seed": cfg.seed,
        "class_names": dataset.manifest.class_names,
        "best_epoch": state.best_epoch,
        "best_val_acc": state.best_metric,
        "epochs_run": state.epoch,
    }
    save_checkpoint(model, meta, run / filename)
    write_history(run / "history.jsonl", state.history)
    dataset.manifest.save(run / "manifest.json")
    log.info("%s: best val acc %.4f at epoch %d -> %s", role, state.best_metric, state.best_epoch, run / filename)


def cmd_synth(cfg: RunConfig, run: Path, verbose: bool) -> None:
    ds = synth_fire_dataset(cfg.num_per_class, cfg.num_classes, cfg.hardness, cfg.image_size, cfg.seed)
    ds.save_folder(run / "data")
    log.info("wrote %d images to %s", len(ds), run / "data")


def cmd_train_teacher(cfg: RunConfig, run: Path, verbose: bool) -> None:
    ds = _load_split_dataset(cfg, cfg.seed)
    tcfg = _with_stats(cfg, cfg.model_config("teacher"), ds)
    model, state = train_teacher(ds, cfg.distill_config(), tcfg, _epoch_logger(verbose))
    _finish_training(cfg, run, model, state, ds, "teacher.mvkd", "teacher")


def cmd_train_baseline(cfg: RunConfig, run: Path, verbose: bool) -> None:
    ds = _load_split_dataset(cfg, cfg.seed)
    scfg = _with_stats(cfg, cfg.model_config("student"), ds)
    model, state = train_baseline(ds, cfg.distill_config(), scfg, _epoch_logger(verbose))
    _finish_training(cfg, run, model, state, ds, "baseline.mvkd", "baseline")


def cmd_distill(cfg: RunConfig, run: Path, verbose: bool) -> None:
    teacher, _ = load_checkpoint(_require(cfg, "teacher_checkpoint"))
    ds = _load_split_dataset(cfg, cfg.seed)
    scfg = _with_stats(cfg, cfg.model_config("student"), ds)
    model, state = distill_student(ds, cfg.distill_config(), scfg, teacher, _epoch_logger(verbose))
    _finish_training(cfg, run, model, state, ds, "student.mvkd", "student")


def cmd_eval(cfg: RunConfig, run: Path, verbose: bool) -> None:
    model, meta = load_checkpoint(_require(cfg, "checkpoint"))
    cfg.image_size = model.config.input_size
    ds = _load_split_dataset(cfg, int(meta.get("split_seed", cfg.seed)))
    cm, report = evaluate(model, ds, cfg.split)
    report.to_json(run / "metrics.json")
    cm.to_csv(run / "confusion.csv")
    log.info("%s accuracy %.4f  macro-F1 %.4f  (n=%d)", cfg.split, report.accuracy, report.macro_f1, report.count)


def cmd_gradcam(cfg: RunConfig, run: Path, verbose: bool) -> None:
    model, _ = load_checkpoint(_require(cfg, "checkpoint"))
    image = preprocess(read_image(_require(cfg, "image")), model.config.input_size)
    target = cfg.target_class
    if target is None:
        target = int(np.argmax(model(Tensor(image[None])).data[0]))
    layer = cfg.target_layer or default_target_layer(model)
    heat = grad_cam(model, image, target, layer, source=str(cfg.image))
    render_overlay(heat, image, run / "overlay.ppm")
    _write_json(run / "gradcam.json", {"image": str(cfg.image), "target_class": target, "layer": layer})
    log.info("overlay for class %d at %s -> %s", target, layer, run / "overlay.ppm")


def cmd_bench(cfg: RunConfig, run: Path, verbose: bool) -> None:
    path = _require(cfg, "checkpoint")
    model, _ = load_checkpoint(path)
    report = bench_fps(
        model,
        model.config.input_size,
        batch=cfg.bench_batch,
        warmup_iters=cfg.warmup_iters,
        measured_iters=cfg.measured_iters,
        workers=cfg.workers,
        seed=cfg.seed,
    )
    count, payload, total = size_report(path)
    out = report.to_dict() | {"param_count": count, "payload_bytes": payload, "file_bytes": total}
    _write_json(run / "bench.json", out)
    if cfg.csv:
        report.append_csv(cfg.csv)
    log.info("%.2f FPS  p50 %.2f ms  %d params  %d payload bytes", report.fps, report.latency_p50_ms, param_count(model), payload)


_HANDLERS = {
    "synth": cmd_synth,
    "train-teacher": cmd_train_teacher,
    "train-baseline": cmd_train_baseline,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "gradcam": cmd_gradcam,
    "bench": cmd_bench,
}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    verbose = getattr(args, "verbose", False)
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        run = cfg.run_dir
        run.mkdir(parents=True, exist_ok=True)
        _write_json(run / "config.resolved.json", cfg.to_dict() | {"command": args.command})
        _HANDLERS[args.command](cfg, run, verbose)
    except (UsageError, ConfigError) as exc:
        print(f"mvkd {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"mvkd {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (MvkdError, ArithmeticError, ValueError) as exc:
        print(f"mvkd {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())

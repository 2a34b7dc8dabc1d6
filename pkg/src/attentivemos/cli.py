"""Command-line entry point: ``attentivemos <command> [flags]``.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure, 3 check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import checkpoint
from . import config as cfgio
from .audio import read_wav
from .data import Manifest, SynthConfig, parse_manifest, synth_generate
from .errors import AttentiveMOSError, CheckpointError, ConfigError, LabelQualityError, ScheduleError
from .metrics import EvalReport
from .model import AttentiveMOS, ModelConfig
from .numerics import Tensor, finite_diff_gradcheck, zero_grad
from .training import (
    Dataset,
    LossConfig,
    SustainSchedule,
    TrainConfig,
    batch_loss,
    evaluate,
    sustain_run,
    train,
)

logger = logging.getLogger("attentivemos")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
PARAM_BOUNDS = (80_000, 92_000)
GRADCHECK_TOLS = {32: 1e-3, 64: 1e-5}
GRADCHECK_SAMPLES = 240


@dataclass
class PathsConfig:
    train_manifest: Optional[str] = None
    dev_manifest: Optional[str] = None
    test_manifest: Optional[str] = None
    root_dir: Optional[str] = None
    out_dir: str = "out"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    sustain: Optional[SustainSchedule] = None

    def to_flat(self) -> dict:
        flat = {}
        for name in ("model", "train", "loss", "paths", "synth"):
            flat.update(cfgio.to_flat(getattr(self, name), name + "."))
        if self.sustain is not None:
            flat["sustain.stages"] = cfgio.format_value(self.sustain.stages)
        return flat

    def dumps(self) -> str:
        return cfgio.dumps(self.to_flat())

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        known = set(cls().to_flat()) | {"sustain.stages"}
        unknown = sorted(set(flat) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        parts = {name: cfgio.from_flat(type_, flat, name + ".")
                 for name, type_ in (("model", ModelConfig), ("train", TrainConfig),
                                     ("loss", LossConfig), ("paths", PathsConfig), ("synth", SynthConfig))}
        if "sustain.stages" in flat:
            parts["sustain"] = cfgio.from_flat(SustainSchedule, flat, "sustain.")
        return cls(**parts)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_flat(cfgio.loads(text))
        except (TypeError, ValueError) as exc:
            if isinstance(exc, AttentiveMOSError):
                raise
            raise ConfigError(f"{path}: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, *flags: str) -> None:
    if "config" in flags:
        p.add_argument("--config", help="key=value run configuration file")
    if "checkpoint" in flags:
        p.add_argument("--checkpoint", required=True, help="model checkpoint (.amos)")
    if "manifest" in flags:
        p.add_argument("--manifest", help="CSV manifest path,mos[,sigma][,ratings]")
    p.add_argument("--out", help="output directory (overrides paths.out_dir)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--quiet", action="store_true", help="only print results")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attentivemos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    _common(sub.add_parser("train", help="train one model"), "config")
    p = sub.add_parser("predict", help="print path,prediction lines")
    _common(p, "checkpoint", "manifest")
    p.add_argument("wav", nargs="*", help="WAV files (alternative to --manifest)")
    p.add_argument("--clamp", action="store_true", help="clamp predictions to [1, 5]")
    _common(sub.add_parser("eval", help="MSE / PCC / SRCC on a manifest"), "checkpoint", "manifest")
    _common(sub.add_parser("selfteach", help="staged self-teaching run"), "config")
    _common(sub.add_parser("synth", help="write a synthetic rated corpus"), "config")
    gc = sub.add_parser("gradcheck", help="finite-difference check of gradients")
    _common(gc, "config")
    gc.add_argument("--precision", type=int, choices=(32, 64), default=64,
                    help="dtype of the analytic gradient (tolerance 1e-3 at 32, 1e-5 at 64)")
    _common(sub.add_parser("paramcount", help="count trainable parameters"), "config")
    return parser


# -- helpers ---------------------------------------------------------------

def _run_config(args) -> RunConfig:
    rc = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        rc.train = dataclasses.replace(rc.train, seed=args.seed)
        rc.synth = dataclasses.replace(rc.synth, seed=args.seed)
    if args.out:
        rc.paths = dataclasses.replace(rc.paths, out_dir=args.out)
    return rc


def _check_paths(rc: RunConfig) -> None:
    """Fail fast, before any training, when a configured manifest is missing."""
    for what in ("train_manifest", "dev_manifest", "test_manifest"):
        path = getattr(rc.paths, what)
        if path and not Path(path).is_file():
            raise ConfigError(f"paths.{what}: {path} does not exist")
    if rc.paths.root_dir and not Path(rc.paths.root_dir).is_dir():
        raise ConfigError(f"paths.root_dir: {rc.paths.root_dir} is not a directory")


def _manifest(path: Optional[str], rc: RunConfig, what: str) -> Manifest:
    if not path:
        raise ConfigError(f"paths.{what} is not set")
    root = rc.paths.root_dir
    return parse_manifest(path, root)


def _optional_dataset(path, rc: RunConfig, what: str) -> Optional[Dataset]:
    if not path:
        return None
    return Dataset.from_manifest(_manifest(path, rc, what), rc.model)


def _out_dir(rc: RunConfig) -> Path:
    out = Path(rc.paths.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _strict_waveforms(paths, model: AttentiveMOS) -> np.ndarray:
    """Load audio for inference: shorter clips are zero-padded, longer ones rejected."""
    cfg = model.config
    n = cfg.num_samples
    rows = []
    for path in paths:
        w = read_wav(path, cfg.sample_rate)
        if w.n > n:
            raise ConfigError(
                f"{path}: {w.duration:.3f} s of audio but the checkpoint expects "
                f"at most {cfg.duration_s} s"
            )
        rows.append(np.concatenate([w.samples, np.zeros(n - w.n)]))
    return np.stack(rows) if rows else np.zeros((0, n))


# -- commands --------------------------------------------------------------

def cmd_train(args) -> int:
    rc = _run_config(args)
    _check_paths(rc)
    train_manifest = _manifest(rc.paths.train_manifest, rc, "train_manifest")
    if rc.loss.kind == "ours" and not train_manifest.has_sigma:
        raise LabelQualityError("loss.kind=ours needs sigma (or ratings) for every utterance in the manifest")
    data = Dataset.from_manifest(train_manifest, rc.model)
    dev = _optional_dataset(rc.paths.dev_manifest, rc, "dev_manifest")
    model = AttentiveMOS(rc.model, seed=rc.train.seed)
    result = train(model, data, rc.loss, rc.train, dev=dev)
    out = _out_dir(rc)
    checkpoint.save(result.model, out / "model.amos")
    (out / "history.csv").write_text(result.history_csv())
    (out / "config.txt").write_text(rc.dumps())
    if dev is not None:
        rep = evaluate(result.model, dev)
        print(f"dev {rep}")
        print(rep.to_csv(header=True))
    else:
        print(f"trained {result.steps} steps; final train loss {result.history[-1].train_loss:.6f}"
              if result.history else "trained 0 steps")
    return EXIT_OK


def _predict_inputs(args) -> tuple:
    """Return (labels to print, audio paths, manifest or None)."""
    if args.manifest and args.wav:
        raise ConfigError("pass either --manifest or WAV paths, not both")
    if args.manifest:
        manifest = parse_manifest(args.manifest)
        return [e.audio_path for e in manifest], [manifest.resolve(e) for e in manifest], manifest
    if args.wav:
        return list(args.wav), [Path(w) for w in args.wav], None
    raise ConfigError("nothing to predict: give --manifest or WAV paths")


def cmd_predict(args) -> int:
    shown, paths, _ = _predict_inputs(args)
    model = checkpoint.load(args.checkpoint)
    preds = model.predict_waveforms(_strict_waveforms(paths, model))
    if args.clamp:
        preds = np.clip(preds, 1.0, 5.0)
    for path, y in zip(shown, preds):
        print(f"{path},{float(y)!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.manifest:
        raise ConfigError("eval needs --manifest")
    model = checkpoint.load(args.checkpoint)
    manifest = parse_manifest(args.manifest)
    preds = model.predict_waveforms(_strict_waveforms([manifest.resolve(e) for e in manifest], model))
    rep = EvalReport.compute(preds, manifest.mu)
    print(rep)
    print(rep.to_csv(header=True))
    return EXIT_OK


def cmd_selfteach(args) -> int:
    rc = _run_config(args)
    if rc.sustain is None:
        raise ScheduleError("selfteach needs sustain.stages in the config")
    _check_paths(rc)
    train_manifest = _manifest(rc.paths.train_manifest, rc, "train_manifest")
    if rc.loss.kind == "ours" and not train_manifest.has_sigma:
        raise LabelQualityError("loss.kind=ours needs sigma (or ratings) for every utterance in the manifest")
    data = Dataset.from_manifest(train_manifest, rc.model)
    dev = _optional_dataset(rc.paths.dev_manifest, rc, "dev_manifest")
    test = _optional_dataset(rc.paths.test_manifest, rc, "test_manifest")
    result = sustain_run(data, rc.loss, rc.sustain, rc.train, rc.model, dev=dev)

    out = _out_dir(rc)
    (out / "config.txt").write_text(rc.dumps())
    rows = ["stage,split,mse,pcc,srcc,n"]
    for m, stage in enumerate(result.stages):
        name = "base" if m == 0 else f"m={m}"
        checkpoint.save(stage.model, out / f"stage{m}.amos")
        (out / f"history_stage{m}.csv").write_text(stage.history_csv())
        for split, ds in (("dev", dev), ("test", test)):
            if ds is not None:
                rows.append(f"{name},{split},{evaluate(stage.model, ds).to_csv()}")
        if dev is None and test is None:
            rows.append(f"{name},train,{evaluate(stage.model, data).to_csv()}")
    table = "\n".join(rows) + "\n"
    (out / "stage_metrics.csv").write_text(table)
    header = "path,mu," + ",".join(f"stage{m}" for m in range(1, len(result.labels)))
    lines = [header.rstrip(",")]
    for i, path in enumerate(data.paths or [str(i) for i in range(len(data))]):
        vals = [repr(float(lab[i])) for lab in result.labels]
        lines.append(",".join([path, *vals]))
    (out / "stage_labels.csv").write_text("\n".join(lines) + "\n")
    print(table, end="")
    return EXIT_OK


def cmd_synth(args) -> int:
    rc = _run_config(args)
    out = _out_dir(rc)
    manifest = synth_generate(rc.synth, out)
    print(f"wrote {len(manifest)} utterances and manifest.csv to {out}")
    return EXIT_OK


def gradcheck_report(model_config: ModelConfig, loss: LossConfig, seed: int = 0,
                     n_samples: int = GRADCHECK_SAMPLES, tol: float | None = None, precision: int = 64):
    """End-to-end loss gradcheck on random audio and labels.

    The finite-difference side always runs in 64-bit. With ``precision=32``
    the analytic gradient comes from a float32 model holding the same
    (float32-representable) weights and float32 inputs.
    """
    if precision not in GRADCHECK_TOLS:
        raise ConfigError(f"precision must be 32 or 64, got {precision}")
    tol = GRADCHECK_TOLS[precision] if tol is None else tol
    rng = np.random.default_rng(seed)
    model = AttentiveMOS(model_config, seed=seed, dtype=np.float32 if precision == 32 else np.float64)
    waves = rng.uniform(-0.9, 0.9, size=(3, model_config.num_samples))
    if precision == 32:
        waves = waves.astype(np.float32).astype(np.float64)
    frames = model.frames_from_waveforms(waves)
    mu = rng.uniform(1.0, 5.0, size=3)
    sigma = rng.uniform(0.3, 1.2, size=3)

    analytic = None
    if precision == 32:
        zero_grad(model.parameters())
        batch_loss(loss, model.forward(frames), mu.astype(np.float32), sigma.astype(np.float32)).backward()
        analytic = {name: p.grad.copy() for name, p in model.named_parameters()}
        zero_grad(model.parameters())
        model.astype(np.float64)

    def f() -> Tensor:
        return batch_loss(loss, model.forward(frames), mu, sigma)

    return finite_diff_gradcheck(f, model.parameters(), tol=tol, n_samples=n_samples, seed=seed,
                                 analytic=analytic)


def cmd_gradcheck(args) -> int:
    rc = _run_config(args) if args.config else None
    model_cfg = rc.model if rc is not None else ModelConfig.tiny()
    loss = rc.loss if rc is not None else LossConfig()
    report = gradcheck_report(model_cfg, loss, seed=args.seed or 0, precision=args.precision)
    print(f"{args.precision}-bit {report.summary()}")
    for c in sorted(report.failures, key=lambda c: -c.rel_error)[:5]:
        print(f"  {c.name}{list(c.index)}: analytic {c.analytic:.6e} numeric {c.numeric:.6e}")
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_paramcount(args) -> int:
    rc = _run_config(args) if args.config else RunConfig()
    total = AttentiveMOS(rc.model).param_count()
    print(total)
    if rc.model == ModelConfig():
        lo, hi = PARAM_BOUNDS
        ok = lo <= total <= hi
        print(f"{'PASS' if ok else 'FAIL'}: default config within [{lo}, {hi}]")
        return EXIT_OK if ok else EXIT_CHECK
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "selfteach": cmd_selfteach,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
    "paramcount": cmd_paramcount,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ScheduleError, LabelQualityError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (AttentiveMOSError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

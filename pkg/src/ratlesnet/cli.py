"""Command-line pipeline: generate phantoms, train, predict, evaluate,
cross-validate, and run cross-study generalization.

Every run is driven by a flat key=value config file; unknown keys are
rejected and every key has a default, so an empty config is valid.  Exit
codes: 0 success, 1 usage or configuration problem, 2 malformed or
mismatched data, 3 numeric failure during computation.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import (PhantomConfig, derive_seed, generate_dataset, load_manifest,
                   load_samples, split_train_val, standardize)
from .errors import (ConfigError, FormatError, LabelError, NumericError,
                     RatlesnetError, ShapeError)
from .metrics import DiceResult, aggregate, crossval, dice, generalization_eval
from .model import ModelConfig, build_model, load_checkpoint, predict_mask, save_checkpoint
from .nifti import Mask, read_nifti, write_nifti
from .training import TrainConfig, train, write_epoch_log

_DEFAULTS: dict[str, str] = {
    # pipeline seed: shuffling, splits, per-fold derivations
    "seed": "0",
    # model topology
    "model.input_channels": "1",
    "model.num_classes": "2",
    "model.growth_rate": "18",
    "model.levels": "2",
    "model.seed": "42",
    # training loop
    "train.lr": "1e-5",
    "train.max_epochs": "1000",
    "train.patience": "5",
    "train.val_fraction": "0.2",
    # phantom generation
    "data.shape": "64,64,18",
    "data.noise_std": "0.1",
    "data.brain_intensity": "1.0",
    "data.sham_fraction": "0.5",
    "data.seed": "1234",
    "data.study": "phantom",
    "data.time_points": "2h,24h",
    "data.lesion_factor.2h": "1.25",
    "data.lesion_factor.24h": "1.6",
    "data.lesion_factor.D35": "1.4",
    "data.radius.2h": "3,4.5",
    "data.radius.24h": "6,8",
    "data.radius.D35": "5,7",
    # fallback input paths, overridden by the corresponding flags
    "data.manifest": "",
    "data.train_manifest": "",
    "data.test_manifests": "",
    # evaluation
    "eval.k": "5",
    "eval.group_by": "time_point",
}


class RunConfig:
    """Flat dotted-key configuration with typed accessors."""

    def __init__(self, values: dict[str, str]):
        unknown = sorted(set(values) - set(_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        self.values = dict(_DEFAULTS)
        self.values.update(values)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls({})
        values = {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
            key, _, value = stripped.partition("=")
            values[key.strip()] = value.strip()
        return cls(values)

    def _typed(self, key: str, kind, what: str):
        raw = self.values[key]
        try:
            return kind(raw)
        except ValueError:
            raise ConfigError(f"config key {key} needs {what}, got {raw!r}") from None

    def int_(self, key: str) -> int:
        return self._typed(key, int, "an integer")

    def float_(self, key: str) -> float:
        return self._typed(key, float, "a number")

    def floats(self, key: str, n: int) -> tuple[float, ...]:
        parts = [p for p in self.values[key].split(",") if p.strip()]
        if len(parts) != n:
            raise ConfigError(f"config key {key} needs {n} comma-separated numbers, "
                              f"got {self.values[key]!r}")
        try:
            return tuple(float(p) for p in parts)
        except ValueError:
            raise ConfigError(f"config key {key} needs numbers, got {self.values[key]!r}") from None

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            input_channels=self.int_("model.input_channels"),
            num_classes=self.int_("model.num_classes"),
            growth_rate=self.int_("model.growth_rate"),
            levels=self.int_("model.levels"),
            seed=self.int_("model.seed"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr=self.float_("train.lr"),
            max_epochs=self.int_("train.max_epochs"),
            patience=self.int_("train.patience"),
            val_fraction=self.float_("train.val_fraction"),
        )

    def phantom_config(self) -> PhantomConfig:
        shape = self.floats("data.shape", 3)
        return PhantomConfig(
            shape=tuple(int(e) for e in shape),
            noise_std=self.float_("data.noise_std"),
            brain_intensity=self.float_("data.brain_intensity"),
            lesion_intensity_factor={tp: self.float_(f"data.lesion_factor.{tp}")
                                     for tp in ("2h", "24h", "D35")},
            lesion_radius_range={tp: self.floats(f"data.radius.{tp}", 2)  # type: ignore[misc]
                                 for tp in ("2h", "24h", "D35")},
            sham_fraction=self.float_("data.sham_fraction"),
            seed=self.int_("data.seed"),
        )

    def time_points(self) -> tuple[str, ...]:
        tps = tuple(p.strip() for p in self.values["data.time_points"].split(",") if p.strip())
        if not tps:
            raise ConfigError("data.time_points must name at least one time point")
        return tps

    def seed(self) -> int:
        return self.int_("seed")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; the contract reserves 2 for
    # data errors, so usage problems are rerouted through an exception.
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _require(value: str | None, fallback: str, what: str) -> str:
    resolved = value if value else fallback
    if not resolved:
        raise _UsageError(f"missing {what}: pass the flag or set it in the config")
    return resolved


def _write_reports(report, out: str) -> None:
    out_path = Path(out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix == ".csv":
        out_path.write_text(report.to_csv())
    else:
        out_path.write_text(report.to_text())
        out_path.with_suffix(".csv").write_text(report.to_csv())


def _cmd_generate(args: argparse.Namespace) -> None:
    cfg = RunConfig.load(args.config)
    manifest = generate_dataset(cfg.phantom_config(), args.out, args.n,
                                study=cfg.values["data.study"],
                                time_points=cfg.time_points())
    print(f"wrote {len(manifest.records)} scans and manifest.tsv to {args.out}")


def _cmd_train(args: argparse.Namespace) -> None:
    cfg = RunConfig.load(args.config)
    manifest = load_manifest(_require(args.manifest, cfg.values["data.manifest"], "--manifest"))
    tc = cfg.train_config()
    seed = cfg.seed() if args.seed is None else args.seed
    train_recs, val_recs = split_train_val(manifest.records, tc.val_fraction,
                                           derive_seed(seed, 0, "split"))
    samples = {s.record.id: s for s in load_samples(manifest)}
    model = build_model(cfg.model_config())
    result = train(model, [samples[r.id] for r in train_recs],
                   [samples[r.id] for r in val_recs],
                   policy=tc.policy(), adam=tc.adam(), seed=derive_seed(seed, 0, "train"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out / "model.ckpt")
    write_epoch_log(result.history, out / "epochs.tsv")
    print(f"best epoch {result.best_epoch} (val loss {result.best_val_loss:.6f}); "
          f"checkpoint in {out}")


def _cmd_predict(args: argparse.Namespace) -> None:
    model = load_checkpoint(args.model)
    image = read_nifti(args.infile)
    if isinstance(image, Mask):
        raise FormatError(f"{args.infile} is a binary mask, not an intensity volume")
    predicted = predict_mask(model, standardize(image))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_nifti(predicted, args.out)
    print(f"wrote {args.out}")


def _cmd_evaluate(args: argparse.Namespace) -> None:
    cfg = RunConfig.load(args.config)
    manifest = load_manifest(_require(args.manifest, cfg.values["data.manifest"], "--manifest"))
    pred_dir = Path(args.pred_dir)
    results = []
    for record in manifest.records:
        pred_path = pred_dir / f"{record.id}_pred.nii"
        if not pred_path.is_file():
            raise FormatError(f"scan {record.id}: missing prediction {pred_path}")
        predicted = read_nifti(pred_path)
        if not isinstance(predicted, Mask):
            raise LabelError(f"scan {record.id}: prediction {pred_path} is not a binary mask")
        truth = read_nifti(record.mask_path)
        if not isinstance(truth, Mask):
            raise LabelError(f"scan {record.id}: ground truth {record.mask_path} is not binary")
        if predicted.values.shape != truth.values.shape:
            raise ShapeError(f"scan {record.id}: prediction shape {predicted.values.shape} "
                             f"does not match ground truth {truth.values.shape}")
        results.append(DiceResult(scan_id=record.id, dice=dice(predicted, truth),
                                  time_point=record.time_point, sham=record.sham,
                                  study=record.study))
    group_by = cfg.values["eval.group_by"]
    _write_reports(aggregate(results, group_by=group_by), args.out)
    print(f"scored {len(results)} scans; report at {args.out}")


def _cmd_crossval(args: argparse.Namespace) -> None:
    cfg = RunConfig.load(args.config)
    manifest = load_manifest(_require(args.manifest, cfg.values["data.manifest"], "--manifest"))
    seed = cfg.seed() if args.seed is None else args.seed
    outcome = crossval(manifest, cfg.int_("eval.k"), cfg.model_config(), cfg.train_config(),
                       seed=seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for fold in outcome.folds:
        save_checkpoint(fold.model, out / f"fold_{fold.fold}.ckpt")
        write_epoch_log(fold.result.history, out / f"fold_{fold.fold}_epochs.tsv")
    _write_reports(outcome.report, str(out / "report.txt"))
    (out / "audit.tsv").write_text("\n".join(outcome.audit_lines()) + "\n")
    print(f"cross-validation finished; artifacts in {out}")


def _cmd_generalize(args: argparse.Namespace) -> None:
    cfg = RunConfig.load(args.config)
    train_path = _require(args.train_manifest, cfg.values["data.train_manifest"],
                          "--train-manifest")
    test_spec = _require(args.test_manifests, cfg.values["data.test_manifests"],
                         "--test-manifests")
    train_manifest = load_manifest(train_path)
    test_manifests = [load_manifest(p.strip()) for p in test_spec.split(",") if p.strip()]
    seed = cfg.seed() if args.seed is None else args.seed
    outcome = generalization_eval(train_manifest, test_manifests, cfg.model_config(),
                                  cfg.train_config(), seed=seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(outcome.model, out / "model.ckpt")
    write_epoch_log(outcome.result.history, out / "epochs.tsv")
    _write_reports(outcome.report, str(out / "report.txt"))
    print(f"generalization run finished; artifacts in {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ratlesnet",
                     description="3D dense-block lesion segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser, config: bool = True) -> None:
        if config:
            p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--threads", type=int, default=1,
                       help="parallel workers; 1 forces fully deterministic runs")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config pipeline seed")

    p = sub.add_parser("generate", help="write synthetic phantom scans and a manifest")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n", type=int, required=True, help="number of scans")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("train", help="train a model on a manifest")
    common(p)
    p.add_argument("--manifest", default=None, help="training manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="segment one volume with a checkpoint")
    common(p, config=False)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--in", dest="infile", required=True, help="input .nii volume")
    p.add_argument("--out", required=True, help="output .nii mask")
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against a manifest")
    common(p)
    p.add_argument("--pred-dir", required=True, help="directory of <id>_pred.nii masks")
    p.add_argument("--manifest", default=None, help="manifest with ground truth")
    p.add_argument("--out", required=True, help="report path (text; .csv written alongside)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("crossval", help="k-fold cross-validation on one study")
    common(p)
    p.add_argument("--manifest", default=None, help="study manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_crossval)

    p = sub.add_parser("generalize", help="train on one study, test on others")
    common(p)
    p.add_argument("--train-manifest", default=None, help="training study manifest")
    p.add_argument("--test-manifests", default=None, help="comma-separated test manifests")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_generalize)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
        return 0
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (RatlesnetError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())

"""Command-line entry point: ``swinkoa {synth,train,eval,embed,gradcam,gradcheck}``.

Settings resolve in three layers: built-in defaults, then the YAML file
given with ``--config``, then explicit flags. The resolved settings are
written next to every command's outputs as ``run_config.yaml``.

Exit codes: 0 success, 1 validation error, 2 runtime failure (including a
failed gradient check).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from swinkoa import datagen, evaluate, interpret, train
from swinkoa.checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from swinkoa.config import ConfigError, ModelConfig, TrainConfig
from swinkoa.gradcheck import check_model

log = logging.getLogger("swinkoa")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class ValidationError(Exception):
    def __init__(self, errors):
        self.errors = [errors] if isinstance(errors, str) else list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class RunConfig:
    seed: int = 0
    experiment: int = 2
    out: str = "runs/default"
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    manifest: str | None = None
    synth: datagen.SynthSpec | None = None

    def validate(self) -> list[str]:
        errs = [f"model: {e}" for e in self.model.validate()]
        if not 1 <= self.experiment <= 5:
            errs.append(f"experiment must be 1..5, got {self.experiment}")
        if self.seed < 0 or self.seed >= 2**64:
            errs.append("seed must fit in an unsigned 64-bit integer")
        t = self.train
        if t.batch_size < 1:
            errs.append("train.batch_size must be positive")
        if t.epochs < 1 or t.finetune_epochs < 0:
            errs.append("train.epochs must be >= 1 and train.finetune_epochs >= 0")
        if not t.optimizer.lr > 0:
            errs.append("train.optimizer.lr must be positive")
        if self.manifest is not None and self.synth is not None:
            errs.append("give either data.manifest or data.synth, not both")
        if self.synth is not None:
            errs += [f"data.synth: {e}" for e in self.synth.validate()]
            if self.synth.image_size != self.model.image_size:
                errs.append("data.synth.image_size must equal model.image_size")
        return errs

    def to_dict(self) -> dict:
        data = {}
        if self.manifest is not None:
            data["manifest"] = self.manifest
        if self.synth is not None:
            data["synth"] = self.synth.to_dict()
        return {
            "seed": self.seed,
            "experiment": self.experiment,
            "out": self.out,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "data": data,
        }


def _read_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(d, dict):
        raise ValidationError(f"config {path} must be a mapping at top level")
    return d


def resolve(args) -> RunConfig:
    """Defaults, then ``--config``, then flags. Collects every error before failing."""
    raw = _read_yaml(args.config) if getattr(args, "config", None) else {}
    errs = []
    known = {"seed", "experiment", "out", "model", "train", "data"}
    errs += [f"unknown top-level key {k!r}" for k in sorted(set(raw) - known)]
    rc = RunConfig()
    for key in ("seed", "experiment", "out"):
        if key in raw:
            setattr(rc, key, raw[key])
    try:
        rc.model = ModelConfig.from_dict(raw.get("model") or {})
    except (ConfigError, TypeError) as exc:
        errs += getattr(exc, "errors", [f"model: {exc}"])
    try:
        rc.train = TrainConfig.from_dict(raw.get("train") or {})
    except TypeError as exc:
        errs.append(f"train: {exc}")
    data = raw.get("data") or {}
    errs += [f"unknown data key {k!r}" for k in sorted(set(data) - {"manifest", "synth"})]
    rc.manifest = data.get("manifest")
    if "synth" in data:
        try:
            rc.synth = datagen.SynthSpec.from_dict(data["synth"] or {})
        except (ValueError, TypeError) as exc:
            errs.append(f"data.synth: {exc}")
    # flags win
    for key in ("seed", "experiment", "out", "manifest"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(rc, key, val)
    opt = rc.train.optimizer
    if getattr(args, "epochs", None) is not None:
        rc.train.epochs = args.epochs
    if getattr(args, "finetune_epochs", None) is not None:
        rc.train.finetune_epochs = args.finetune_epochs
    if getattr(args, "lr", None) is not None:
        opt.lr = args.lr
    if getattr(args, "no_augment", False):
        rc.train.augment = False
    if rc.synth is not None:
        rc.synth.seed = rc.seed  # one seed drives data, init, shuffling and augmentation
    if not errs:
        errs += rc.validate()
    if errs:
        raise ValidationError(errs)
    return rc


def _prepare_out(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {out}: {exc}") from None
    return out


def _snapshot(out: Path, d: dict) -> None:
    with open(out / "run_config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(d, fh, sort_keys=True)


def _write_json(path: Path, d: dict) -> None:
    path.write_text(json.dumps(d, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = datagen.SynthSpec()
    raw = _read_yaml(args.config) if args.config else {}
    # accepts a bare synth spec, a {synth: ...} file or a full run config
    if "data" in raw:
        spec_d = (raw["data"] or {}).get("synth") or {}
    else:
        spec_d = raw.get("synth", raw)
    if spec_d:
        try:
            spec = datagen.SynthSpec.from_dict(spec_d)
        except (ValueError, TypeError) as exc:
            raise ValidationError(f"synth spec: {exc}") from None
    if args.seed is not None:
        spec.seed = args.seed
    elif "data" in raw and "seed" in raw:
        spec.seed = raw["seed"]  # run configs seed their data like `train` does
    errs = spec.validate()
    if errs:
        raise ValidationError(errs)
    out = _prepare_out(args.out or "data/synth")
    samples = datagen.generate_dataset(spec)
    manifest = datagen.write_dataset(samples, out)
    _snapshot(out, {"synth": spec.to_dict()})
    log.info("wrote %d samples and %s", len(samples), manifest)
    return EXIT_OK


def _load_samples(rc: RunConfig) -> list[datagen.Sample]:
    if rc.manifest:
        return datagen.load_dataset(rc.manifest, rc.model.image_size)
    spec = rc.synth or datagen.SynthSpec(seed=rc.seed, image_size=rc.model.image_size)
    return datagen.generate_dataset(spec)


def cmd_train(args) -> int:
    rc = resolve(args)
    out = _prepare_out(rc.out)
    _snapshot(out, rc.to_dict())
    samples = _load_samples(rc)
    spec = train.experiment_spec(rc.experiment, rc.train.epochs, rc.train.finetune_epochs)
    log.info("experiment %d: %s", rc.experiment, train.describe(rc.experiment))
    res = train.run_experiment(spec, samples, rc.model, rc.train, rc.seed)
    res.history.write_csv(out / "history.csv")
    save_checkpoint(res.model, out / "checkpoint.swkt", experiment=rc.experiment, seed=rc.seed,
                    epoch=len(res.history.rows))
    for site, rep in res.reports.items():
        _write_json(out / f"metrics_{site}.json", rep.to_dict())
        log.info("%s: accuracy %.4f macro-F1 %.4f", site, rep.accuracy, rep.macro_f1)
    _write_json(out / "freeze_audit.json", {
        ph.name: {"head_hash_before": b, "head_hash_after": a, "unchanged": a == b}
        for ph, (b, a) in zip(spec.phases, res.head_hashes)
    })
    return EXIT_OK


def _model_and_rows(args):
    model, meta = load_checkpoint(args.checkpoint)
    samples = datagen.load_dataset(args.manifest, model.cfg.image_size)
    if args.split != "all":
        samples = [s for s in samples if s.split == args.split]
    if not samples:
        raise ValidationError(f"no samples with split {args.split!r} in {args.manifest}")
    return model, meta, samples


def cmd_eval(args) -> int:
    model, meta, samples = _model_and_rows(args)
    out = _prepare_out(args.out or "runs/eval")
    _snapshot(out, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "split": args.split})
    sites = tuple(s for s in datagen.SITES if any(x.site == s for x in samples))
    reports = train.evaluate_sites(model, [replace(s, split="test") for s in samples], sites)
    _write_json(out / "metrics.json", {k: v.to_dict() for k, v in reports.items()})
    for k, v in reports.items():
        log.info("%s: accuracy %.4f macro-F1 %.4f", k, v.accuracy, v.macro_f1)
    return EXIT_OK


def cmd_embed(args) -> int:
    model, meta, samples = _model_and_rows(args)
    out = _prepare_out(args.out or "runs/embed")
    _snapshot(out, {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest), "split": args.split,
                    "tsne": args.tsne, "perplexity": args.perplexity, "seed": args.seed or 0})
    emb = evaluate.extract_embeddings(model, samples)
    evaluate.write_embeddings_tsv(emb, out / "embeddings.tsv")
    src, tgt = emb.by_site("source"), emb.by_site("target")
    if len(src) >= 2 and len(tgt) >= 2:
        _write_json(out / "drift.json", evaluate.drift_report(src, tgt))
    if args.tsne:
        res = interpret.tsne_2d(emb.vectors, args.perplexity, args.seed or 0, args.iters)
        emb.projection = res.embedding
        evaluate.write_embeddings_tsv(emb, out / "tsne.tsv", use_projection=True)
    log.info("embedded %d samples", len(emb))
    return EXIT_OK


def cmd_gradcam(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    try:
        image = datagen.load_image(args.image, model.cfg.image_size)
    except datagen.ManifestError as exc:
        raise ValidationError(str(exc)) from None
    cls = args.class_index
    if cls is None:
        cls = int(model.predict(image[None])[0])
    if not 0 <= cls < 5:
        raise ValidationError(f"class index must be in 0..4, got {cls}")
    out = _prepare_out(args.out or "runs/gradcam")
    _snapshot(out, {"checkpoint": str(args.checkpoint), "image": str(args.image), "class_index": cls})
    heat = interpret.gradcam(model, image, cls)
    pgm, raw = interpret.write_heatmap(heat, out / "heatmap")
    log.info("wrote %s and %s", pgm, raw)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rc = resolve(args)
    out = _prepare_out(rc.out)
    _snapshot(out, rc.to_dict())
    report = check_model(rc.model, n=args.samples, seed=rc.seed)
    _write_json(out / "gradcheck.json", report.to_dict())
    for e in report.entries:
        log.info("%-55s %s rel %.2e %s", e.name, e.index, e.rel_error, "ok" if e.passed else "FAIL")
    log.info("gradient check %s (max rel error %.2e)", "passed" if report.passed else "FAILED", report.max_rel_error)
    return EXIT_OK if report.passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swinkoa", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML settings file")
        sp.add_argument("--seed", type=_u64)
        sp.add_argument("--out", help="output directory")

    sp = sub.add_parser("synth", help="generate the synthetic two-site dataset")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="run one of the five experiments")
    common(sp)
    sp.add_argument("--experiment", type=int)
    sp.add_argument("--manifest")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--finetune-epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--no-augment", action="store_true")
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "metrics for a checkpoint"),
                                 ("embed", cmd_embed, "export latent embeddings")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--split", default="test", choices=[*datagen.SPLITS, "all"])
        if name == "embed":
            sp.add_argument("--tsne", action="store_true")
            sp.add_argument("--perplexity", type=float, default=30.0)
            sp.add_argument("--iters", type=int, default=1000)
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcam", help="GradCAM heatmap for one image")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--class", dest="class_index", type=int)
    sp.set_defaults(func=cmd_gradcam)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(sp)
    sp.add_argument("--samples", type=int, default=24)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse uses 2 for usage errors; here 2 means runtime failure
        return EXIT_INVALID if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigError) as exc:
        for e in getattr(exc, "errors", [str(exc)]):
            print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except (datagen.ManifestError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        # config/checkpoint mismatches and other contract violations
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - report, don't trace, at the CLI boundary
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: synth, split, pretrain, finetune, eval, sweep.

Settings come from defaults, then an INI config file (sections per module),
then command-line flags, in increasing precedence. Relative --out paths
resolve under $TRIMAE_OUT when that variable is set. Exit codes: 0 success,
2 config error, 3 data error, 4 numeric failure, 5 checkpoint error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys

from . import data as D
from .data import MissingnessConfig
from .encoder import EncoderConfig
from .errors import ConfigError, DataError, TrimaeError
from .mae import DecoderConfig
from .metrics import (
    evaluate_predictions,
    read_predictions,
    write_predictions,
    write_reliability_csv,
    write_report,
)
from .train import (
    TrainConfig,
    build_classifier_from_checkpoint,
    evaluate_model,
    finetune,
    load_checkpoint,
    predict_probs,
    pretrain,
)

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ConfigError(f"expected a boolean, got {text!r}") from None


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


SCHEMA = {
    "data": {
        "n_per_class": int,
        "image_size": int,
        "degrade_prob": float,
        "ratios": _parse_floats,
    },
    "encoder": {
        "profile": str,
        "heads": int,
        "attention": _parse_bool,
        "share_weights": _parse_bool,
        "widths": _parse_ints,
        "depths": _parse_ints,
        "block": str,
        "stem_channels": int,
    },
    "decoder": {"width": int},
    "train": {
        "lr_pretrain": float,
        "lr_finetune": float,
        "batch_pretrain": int,
        "batch_finetune": int,
        "pretrain_epochs": int,
        "mask_ratio": float,
        "patch_size": int,
        "early_stop_patience": int,
        "max_finetune_epochs": int,
        "augment": _parse_bool,
        "seed": int,
        "deterministic": _parse_bool,
        "freeze_attention": _parse_bool,
    },
    "missingness": {"p_full": float, "p_drop_one": float, "p_drop_two": float},
    "eval": {"bins": int},
}


def read_config(path: str | None) -> dict[str, dict]:
    """Parse and schema-validate an INI config file; unknown keys reject."""
    values: dict[str, dict] = {section: {} for section in SCHEMA}
    if path is None:
        return values
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                values[section][key] = SCHEMA[section][key](raw)
            except (ValueError, ConfigError) as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return values


def _resolve_out(path: str) -> str:
    root = os.environ.get("TRIMAE_OUT")
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def _build_encoder_cfg(file_vals: dict, args: argparse.Namespace) -> EncoderConfig:
    section = dict(file_vals.get("encoder", {}))
    profile = getattr(args, "profile", None) or section.pop("profile", "toy")
    if profile not in ("toy", "full"):
        raise ConfigError(f"profile must be 'toy' or 'full', got {profile!r}")
    if getattr(args, "heads", None) is not None:
        section["heads"] = args.heads
    if getattr(args, "no_attention", False):
        section["attention"] = False
    if profile == "toy":
        known = {"widths", "heads", "stem_channels", "attention", "share_weights", "modalities"}
        extra = {k: v for k, v in section.items() if k in known}
        cfg = EncoderConfig.toy(**extra)
    else:
        cfg = EncoderConfig(**section)
    cfg.validate()
    return cfg


def _build_train_cfg(file_vals: dict, args: argparse.Namespace, with_missingness: bool) -> TrainConfig:
    section = dict(file_vals.get("train", {}))
    overrides = {
        "pretrain_epochs": getattr(args, "epochs", None),
        "mask_ratio": getattr(args, "mask_ratio", None),
        "patch_size": getattr(args, "patch_size", None),
        "batch_pretrain": getattr(args, "batch_size", None),
        "lr_pretrain": getattr(args, "lr", None),
        "seed": getattr(args, "seed", None),
    }
    if getattr(args, "command", "") in ("finetune", "eval", "sweep"):
        overrides["batch_finetune"] = overrides.pop("batch_pretrain")
        overrides["lr_finetune"] = overrides.pop("lr_pretrain")
        overrides["max_finetune_epochs"] = getattr(args, "max_epochs", None)
        overrides["early_stop_patience"] = getattr(args, "patience", None)
    for key, value in overrides.items():
        if value is not None:
            section[key] = value
    if getattr(args, "deterministic", False):
        section["deterministic"] = True
    missingness = None
    if with_missingness:
        missingness = MissingnessConfig(**file_vals.get("missingness", {}))
    try:
        cfg = TrainConfig(missingness=missingness, **section)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    cfg.validate()
    return cfg


def _parse_modalities(text: str | None) -> tuple[str, ...] | None:
    if text is None:
        return None
    mods = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in mods if m not in D.MODALITIES]
    if bad or not mods:
        raise ConfigError(f"unknown modalities {bad or text!r}; choose from {D.MODALITIES}")
    return mods


def _load_split_samples(splits_dir: str, split: str) -> list[D.MultimodalSample]:
    manifest = os.path.join(splits_dir, split, D.MANIFEST_NAME)
    return D.load_samples(manifest)


# -- commands ------------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    file_vals = read_config(args.config)
    section = file_vals.get("data", {})
    n = args.n if args.n is not None else section.get("n_per_class", 25)
    size = args.image_size if args.image_size is not None else section.get("image_size", D.CANONICAL_SIZE)
    degrade = args.degrade_prob if args.degrade_prob is not None else section.get("degrade_prob", 0.25)
    out = _resolve_out(args.out)
    records = D.render_synthetic(n, size, args.seed, degrade)
    manifest = D.save_dataset(records, out)
    print(f"wrote {len(records)} samples to {out} (manifest: {manifest})")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    file_vals = read_config(args.config)
    ratios = _parse_floats(args.ratios) if args.ratios else file_vals.get("data", {}).get("ratios", (0.6, 0.2, 0.2))
    if len(ratios) != 3:
        raise ConfigError(f"need exactly 3 ratios, got {ratios}")
    dataset_manifest = os.path.join(args.data, D.MANIFEST_NAME)
    entries = {e.id: e for e in D.read_manifest(dataset_manifest)}
    samples = D.load_samples(dataset_manifest)
    manifest = D.stratified_split(samples, ratios, args.seed)
    out = _resolve_out(args.out or args.data)
    data_abs = os.path.abspath(args.data)
    for split, ids in manifest.splits().items():
        split_dir = os.path.join(out, split)
        rows = []
        for sid in ids:
            e = entries[sid]
            paths = {
                mod: (os.path.relpath(os.path.join(data_abs, p), split_dir) if p != "-" else "-")
                for mod, p in e.paths.items()
            }
            rows.append(D.ManifestEntry(id=sid, paths=paths, label=e.label, present=e.present))
        D.write_manifest(rows, os.path.join(split_dir, D.MANIFEST_NAME))
    summary = os.path.join(out, "split_summary.txt")
    with open(summary, "w") as fh:
        fh.write("ratios\t" + "\t".join(repr(r) for r in manifest.ratios) + "\n")
        fh.write("seed\t" + str(args.seed) + "\n")
        for label, counts in sorted(manifest.per_class_counts.items()):
            fh.write(f"class_{label}\t" + "\t".join(str(c) for c in counts) + "\n")
    print(
        f"split {len(samples)} samples -> "
        f"{len(manifest.train)}/{len(manifest.val)}/{len(manifest.test)} under {out}"
    )
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    file_vals = read_config(args.config)
    encoder_cfg = _build_encoder_cfg(file_vals, args)
    train_cfg = _build_train_cfg(file_vals, args, with_missingness=False)
    decoder_cfg = DecoderConfig(
        width=args.decoder_width or file_vals.get("decoder", {}).get("width", 256),
        patch_size=train_cfg.patch_size,
        mask_ratio=train_cfg.mask_ratio,
    )
    samples = _load_split_samples(args.splits, "train")
    out = _resolve_out(args.out)
    resume = load_checkpoint(args.resume) if args.resume else None
    _, history = pretrain(samples, encoder_cfg, decoder_cfg, train_cfg, out_dir=out, resume_from=resume)
    print(f"pretrained {len(history['loss'])} epochs; final loss {history['loss'][-1]:.6f}; wrote {out}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    file_vals = read_config(args.config)
    encoder_cfg = _build_encoder_cfg(file_vals, args)
    train_cfg = _build_train_cfg(file_vals, args, with_missingness=args.missingness)
    train_samples = _load_split_samples(args.splits, "train")
    val_samples = _load_split_samples(args.splits, "val")
    init = None
    if args.init:
        init = load_checkpoint(args.init)
    elif not args.from_scratch:
        raise ConfigError("finetune needs --init CHECKPOINT or --from-scratch")
    active = _parse_modalities(args.modalities)
    out = _resolve_out(args.out)
    _, history = finetune(
        train_samples, val_samples, encoder_cfg, train_cfg,
        out_dir=out, init_checkpoint=init, active=active,
    )
    print(
        f"finetuned {history['epochs_run']} epochs; best epoch {history['best_epoch']} "
        f"(val loss {history['best_val_loss']:.6f}); wrote {out}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    file_vals = read_config(args.config)
    n_bins = args.bins or file_vals.get("eval", {}).get("bins", 10)
    model = build_classifier_from_checkpoint(load_checkpoint(args.ckpt))
    samples = _load_split_samples(args.splits, args.split)
    if args.missing_eval:
        missing_cfg = MissingnessConfig(**file_vals.get("missingness", {}))
        samples = D.build_missing_eval_set(samples, missing_cfg, seed=args.seed)
    modalities = _parse_modalities(args.modalities)
    out = _resolve_out(args.out)
    os.makedirs(out, exist_ok=True)
    ids, labels, probs = predict_probs(model, samples, args.batch_size, modalities)
    dump = os.path.join(out, "predictions.tsv")
    write_predictions(dump, ids, labels, probs)
    # Metrics are recomputed from the dump so the emitted report always
    # matches what a downstream consumer of the file would compute.
    _, labels2, probs2 = read_predictions(dump)
    report = evaluate_predictions(labels2, probs2, n_bins=n_bins)
    write_report(os.path.join(out, "report.txt"), report)
    write_reliability_csv(os.path.join(out, "reliability.csv"), report.reliability)
    print(
        f"evaluated {report.n} samples: acc {report.acc:.4f} f1 {report.f1_macro:.4f} "
        f"auroc {report.auroc_macro:.4f} kappa {report.kappa_qw:.4f} "
        f"ece {report.ece:.4f} brier {report.brier:.4f}; wrote {out}"
    )
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    file_vals = read_config(args.config)
    encoder_cfg = _build_encoder_cfg(file_vals, args)
    ratios = _parse_floats(args.ratios)
    train_samples = _load_split_samples(args.splits, "train")
    val_samples = _load_split_samples(args.splits, "val")
    test_samples = _load_split_samples(args.splits, "test")
    out = _resolve_out(args.out)
    rows = []
    for ratio in ratios:
        args.mask_ratio = ratio
        train_cfg = _build_train_cfg(file_vals, args, with_missingness=False)
        decoder_cfg = DecoderConfig(
            width=args.decoder_width or file_vals.get("decoder", {}).get("width", 256),
            patch_size=train_cfg.patch_size,
            mask_ratio=ratio,
        )
        ratio_dir = os.path.join(out, f"ratio_{ratio:g}")
        model, _ = pretrain(train_samples, encoder_cfg, decoder_cfg, train_cfg, out_dir=ratio_dir)
        ckpt = load_checkpoint(os.path.join(ratio_dir, "pretrain.pt"))
        del model
        _, _ = finetune(
            train_samples, val_samples, encoder_cfg, train_cfg, out_dir=ratio_dir, init_checkpoint=ckpt
        )
        clf = build_classifier_from_checkpoint(load_checkpoint(os.path.join(ratio_dir, "classifier.pt")))
        report = evaluate_model(clf, test_samples, train_cfg.batch_finetune)
        write_report(os.path.join(ratio_dir, "report.txt"), report)
        rows.append((ratio, report))
        print(f"ratio {ratio:g}: acc {report.acc:.4f}")
    with open(os.path.join(out, "sweep.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mask_ratio", "acc", "f1_macro", "auroc_macro", "kappa_qw", "ece", "brier"])
        for ratio, report in rows:
            writer.writerow([ratio, *(repr(v) for v in report.scalars().values())])
    print(f"sweep over {len(rows)} ratios; wrote {os.path.join(out, 'sweep.csv')}")
    return 0


# -- parser --------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file; flags override its values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible mode")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--profile", choices=("toy", "full"), default=None, help="encoder size profile")
    p.add_argument("--heads", type=int, default=None, help="attention heads per unit")
    p.add_argument("--no-attention", action="store_true", help="replace attention units with identity")
    p.add_argument("--decoder-width", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--patch-size", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trimae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic tri-modal dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None, help="samples per class (default 25)")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--degrade-prob", type=float, default=None)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="stratified train/val/test split of a dataset")
    p.add_argument("--data", required=True, help="dataset root containing manifest.txt")
    p.add_argument("--out", default=None, help="output root (default: data root)")
    p.add_argument("--ratios", default=None, help="e.g. 0.6,0.2,0.2")
    _add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("pretrain", help="stage-1 masked-reconstruction pretraining")
    p.add_argument("--splits", required=True, help="directory containing train/manifest.txt")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--mask-ratio", type=float, default=None)
    p.add_argument("--resume", default=None, help="continue from a pretrain checkpoint")
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="stage-2 classifier training with early stopping")
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None, help="pretrain checkpoint to initialize from")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--modalities", default=None, help="comma-separated subset, e.g. vf or fundus,oct")
    p.add_argument("--missingness", action="store_true", help="sample missing modalities per epoch")
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a classifier checkpoint on a split")
    p.add_argument("--splits", required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modalities", default=None, help="restrict evaluation to a modality subset")
    p.add_argument("--missing-eval", action="store_true", help="evaluate on the enlarged missing-modality set")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=16)
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="pretrain/finetune/eval across masking ratios")
    p.add_argument("--splits", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TrimaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``siamaf {generate,train,eval,embed,peaks,ckpt}``.

Settings come from an optional flat ``section.key=value`` file passed with
``--config``; explicit flags override it. Every command writes the resolved
settings to ``run_config.txt`` next to its outputs. The default output root
is ``$SIAMAF_OUT`` (or ``./siamaf_runs``).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, decode_checkpoint, load_checkpoint, save_checkpoint
from .data import (
    PairedDataset,
    detect_peaks,
    load_dataset,
    mask_labels,
    peak_only_encode,
    rmssd,
    save_dataset,
    split_by_patient,
    synthesize_dataset,
)
from .data.dataset import _atomic_write
from .eval import ScoredSet, report_from_scored, scored_set
from .loss import LossWeights
from .model import COMPONENTS_FULL, COMPONENTS_INFERENCE, EncoderConfig, build_model, stage_activations
from .numerics import no_grad
from .train import TrainConfig, train_baseline_single_modality, train_joint

ENV_OUT = "SIAMAF_OUT"
log = logging.getLogger("siamaf")


class CliError(Exception):
    pass


# config file ---------------------------------------------------------------------

# config sections each subcommand reads
SECTIONS = {
    "generate": ("data",),
    "train": ("train", "model", "data"),
    "eval": ("eval",),
    "embed": ("embed",),
    "peaks": ("peaks",),
    "ckpt": (),
}


def read_config(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or "." not in key:
            raise CliError(f"{path}:{n}: expected 'section.key=value', got {line!r}")
        out[key.strip()] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, command: str, cfg: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in cfg.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS[command]:
            continue
        dest = name.replace("-", "_")
        if dest not in actions:
            raise CliError(f"unknown config key {key!r} for '{command}'")
        act = actions[dest]
        if isinstance(act, argparse._StoreTrueAction):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            value = act.type(raw)
        else:
            value = raw
        if act.choices is not None and value not in act.choices:
            raise CliError(f"config {key}={raw!r}: choose from {sorted(act.choices)}")
        defaults[dest] = value
    parser.set_defaults(**defaults)


def _echo(directory: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    items = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    items.update(extra or {})
    lines = [f"version={__version__}", f"command={command}"] + [f"{command}.{k}={v}" for k, v in sorted(items.items())]
    _atomic_write(directory / "run_config.txt", ("\n".join(lines) + "\n").encode())


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(ENV_OUT) or "siamaf_runs")


def _fractions(text: str) -> tuple[float, ...]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad fractions {text!r}") from None
    return vals


def _load_split(path, split: str) -> PairedDataset:
    path = Path(path)
    if not (path / "manifest").exists():
        raise CliError(f"no dataset at {path} (missing manifest)")
    splits = load_dataset(path)
    if split not in splits:
        raise CliError(f"dataset {path} has no split {split!r}; available: {sorted(splits)}")
    return splits[split]


def _modalities(text: str) -> list[str]:
    return ["ECG", "PPG"] if text == "both" else [text.upper()]


# subcommands -----------------------------------------------------------------------


def cmd_generate(args) -> Path:
    out = Path(args.out_dir) if args.out_dir else _out_root(args) / "dataset"
    data = synthesize_dataset(args.patients, args.segments_per_patient, args.af_fraction, args.seed,
                              args.noise, args.label_flip_prob)
    fractions = args.split
    if len(fractions) != 3:
        raise CliError("--split needs three fractions (train,val,test)")
    tr, va, te = split_by_patient(data, fractions, args.split_seed)
    meta = {"patients": args.patients, "segments_per_patient": args.segments_per_patient,
            "af_fraction": args.af_fraction, "seed": args.seed, "noise": args.noise}
    save_dataset(out, {"train": tr, "val": va, "test": te}, meta)
    _echo(out, "generate", args)
    print(f"wrote {len(data)} pairs to {out}")
    return out


def cmd_train(args) -> Path:
    splits = load_dataset(args.data) if (Path(args.data) / "manifest").exists() else None
    if splits is None:
        raise CliError(f"no dataset at {args.data} (missing manifest)")
    train, val = splits.get("train"), splits.get("val")
    if train is None:
        raise CliError("dataset has no train split")
    run = Path(args.run_dir) if args.run_dir else _out_root(args) / f"train_{args.mode}"
    opt = {"name": args.optimizer, "lr": args.lr}
    if args.optimizer == "sgd_momentum":
        opt["momentum"] = args.momentum
    enc = EncoderConfig(args.preset, input_length=train.length)
    if args.keep_fraction < 1.0:
        train = mask_labels(train, args.keep_fraction, args.mask_seed)
    n_lab = int((train.labels != 2).sum())
    if n_lab == 0:
        raise CliError(f"mode {args.mode!r} needs labelled training samples; none remain")
    if args.mode == "baseline":
        if args.resume:
            raise CliError("--resume applies to joint training only")
        cfg = TrainConfig.baseline(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                                   optimizer=opt if args.optimizer_set else {"name": "adam", "lr": 1e-4})
        model = build_model(enc, seed=args.seed, components=COMPONENTS_INFERENCE)
        model, hist = train_baseline_single_modality(train, args.modality, model, cfg, val)
        _atomic_write(run / "history.csv", hist.to_csv().encode())
        save_checkpoint(model, run / "final.ckpt", meta={"epoch": cfg.epochs, "mode": "baseline",
                                                        "modality": args.modality.upper()})
    else:
        weights = LossWeights(args.lam, args.lam_unpaired)
        cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, optimizer=opt, weights=weights,
                          agreement_stop_gradient=not args.no_stop_gradient, seed=args.seed,
                          semi_supervised=args.mode == "semi", checkpoint_every=args.checkpoint_every)
        model = build_model(enc, seed=args.seed, components=COMPONENTS_FULL)
        model, hist = train_joint({"train": train, "val": val}, model, cfg, out_dir=run, resume_from=args.resume)
        save_checkpoint(model, run / "inference.ckpt", inference_only=True, meta={"epoch": cfg.epochs})
    _echo(run, "train", args, {"resolved_optimizer": cfg.optimizer, "labelled_train_samples": n_lab,
                               "model_digest": model.digest})
    print(f"trained {args.mode} model -> {run}")
    return run


def cmd_eval(args) -> Path:
    data = _load_split(args.data, args.split)
    model = load_checkpoint(args.checkpoint)
    # scoring uses the encoder and the classifier only
    model = model.inference_copy().eval()
    out = Path(args.out_dir) if args.out_dir else _out_root(args) / "eval"
    scored = {}
    for mod in _modalities(args.modality):
        s = scored_set(model, data, mod)
        s.save(out / f"scored_{mod.lower()}.csv")
        scored[mod.lower()] = s
    baselines = None
    if args.compare:
        other = load_checkpoint(args.compare).inference_copy().eval()
        baselines = {Path(args.compare).stem: {m: scored_set(other, data, m.upper()) for m in scored}}
        for m, s in baselines[Path(args.compare).stem].items():
            s.save(out / f"scored_{m}_compare.csv")
    report = report_from_scored(scored, args.n_boot, args.seed, model.digest, baselines, args.alpha)
    report.save(out)
    _echo(out, "eval", args)
    for m, mm in report.modalities.items():
        print(f"{m}: AUROC {mm.auroc:.4f} (CI {mm.auroc_boot.ci_low:.4f}-{mm.auroc_boot.ci_high:.4f}) "
              f"AUPRC {mm.auprc:.4f}")
    return out


def _rows_for(model, signals, ids, segs, modality, variant):
    acts = stage_activations(model, signals)
    rows = []
    for stage, a in enumerate(acts):
        # stage maps are summarised per channel by their mean over time
        feat = a.mean(axis=2) if a.ndim == 3 else a
        name = f"stage{stage + 1}" if stage < len(acts) - 1 else "pooled"
        for i in range(len(signals)):
            rows.append((ids[i], int(segs[i]), modality, variant, name, feat[i]))
    if model.projector is not None:
        with no_grad():
            from .model import forward_pass

            z = forward_pass(model, signals).projection.data
        rows += [(ids[i], int(segs[i]), modality, variant, "projection", z[i]) for i in range(len(signals))]
    return rows


def cmd_embed(args) -> Path:
    data = _load_split(args.data, args.split)
    if args.max_samples:
        data = data.subset(np.arange(min(args.max_samples, len(data))))
    model = load_checkpoint(args.checkpoint).eval()
    out = Path(args.out_dir) if args.out_dir else _out_root(args) / "embed"
    variants = {"full": ["full"], "peak-only": ["peak-only"], "both": ["full", "peak-only"]}[args.peak_only]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "segment_index", "modality", "variant", "stage", "dim", "values"])
    all_rows = []
    for mod in _modalities(args.modality):
        sig = data.signals(mod)
        for variant in variants:
            x = sig
            if variant == "peak-only":
                x = np.stack([peak_only_encode(s, detect_peaks(s.astype(np.float64), mod)) for s in sig])
            for i in range(0, len(x), args.batch_size):
                sl = slice(i, i + args.batch_size)
                all_rows += _rows_for(model, x[sl], data.patient_ids[sl], data.segment_index[sl], mod, variant)
    for pid, seg, mod, variant, stage, v in all_rows:
        w.writerow([pid, seg, mod, variant, stage, v.size, " ".join(repr(float(f)) for f in v)])
    _atomic_write(out / "features.csv", buf.getvalue().encode())
    if args.pca2d:
        _write_pca(out / "pca2d.csv", all_rows)
    _echo(out, "embed", args)
    print(f"wrote {len(all_rows)} feature rows to {out / 'features.csv'}")
    return out


def _write_pca(path: Path, rows) -> None:
    """2-D PCA per stage, for quick looks only."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "segment_index", "modality", "variant", "stage", "pc1", "pc2"])
    for stage in dict.fromkeys(r[4] for r in rows):
        sel = [r for r in rows if r[4] == stage]
        X = np.stack([r[5] for r in sel]).astype(np.float64)
        X -= X.mean(axis=0)
        _, _, vt = np.linalg.svd(X, full_matrices=False)
        pcs = X @ vt[:2].T if vt.shape[0] >= 2 else np.c_[X @ vt[:1].T, np.zeros(len(X))]
        for r, pc in zip(sel, pcs):
            w.writerow([*r[:5], repr(float(pc[0])), repr(float(pc[1]))])
    _atomic_write(path, buf.getvalue().encode())


def cmd_peaks(args) -> Path:
    data = _load_split(args.data, args.split)
    if args.max_samples:
        data = data.subset(np.arange(min(args.max_samples, len(data))))
    out = Path(args.out_dir) if args.out_dir else _out_root(args) / "peaks"
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "segment_index", "modality", "n_peaks", "rmssd", "peaks"])
    encoded = {"ECG": data.ecg.copy(), "PPG": data.ppg.copy()}
    for mod in _modalities(args.modality):
        sig = data.signals(mod)
        for i in range(len(data)):
            x = sig[i].astype(np.float64)
            peaks = detect_peaks(x, mod)
            encoded[mod][i] = peak_only_encode(x, peaks)
            w.writerow([data.patient_ids[i], int(data.segment_index[i]), mod, len(peaks),
                        repr(rmssd(peaks, data.sampling_rate)), " ".join(map(str, peaks))])
    _atomic_write(out / "peaks.csv", buf.getvalue().encode())
    po = PairedDataset(encoded["ECG"], encoded["PPG"], data.labels, data.patient_ids, data.segment_index,
                       data.sampling_rate)
    save_dataset(out / "peak_only", {args.split: po}, {"peak_only": ",".join(_modalities(args.modality))})
    _echo(out, "peaks", args)
    print(f"wrote peaks for {len(data)} segments to {out}")
    return out


def cmd_ckpt(args) -> Path | None:
    if args.action == "info":
        kind, digest, header, state = decode_checkpoint(Path(args.checkpoint).read_bytes())
        print(f"kind={'full' if kind == 0 else 'inference'}")
        print(f"config_digest={digest}")
        print(f"components={','.join(header['components'])}")
        print(f"epoch={header.get('epoch', '')}")
        print(f"parameters={sum(a.size for a in state['params'].values())}")
        return None
    if not args.output:
        raise CliError("ckpt strip needs an output path")
    model = load_checkpoint(args.checkpoint)
    return save_checkpoint(model, args.output, inference_only=True)


# parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="siamaf", description="Joint ECG/PPG atrial fibrillation toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--config", help="flat section.key=value settings file")
    p.add_argument("--out", help=f"output root (default ${ENV_OUT} or ./siamaf_runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesize a paired ECG/PPG dataset")
    g.add_argument("--patients", type=int, default=60)
    g.add_argument("--segments-per-patient", type=int, default=60)
    g.add_argument("--af-fraction", type=float, default=0.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", choices=["clean", "moderate", "high"], default="moderate")
    g.add_argument("--label-flip-prob", type=float, default=0.0)
    g.add_argument("--split", type=_fractions, default=(0.6, 0.2, 0.2), help="train,val,test fractions")
    g.add_argument("--split-seed", type=int, default=0)
    g.add_argument("--out-dir")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a joint, semi-supervised or baseline model")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=["joint", "semi", "baseline"], default="joint")
    t.add_argument("--preset", choices=["resnet34_1d", "resnet10_1d"], default="resnet10_1d")
    t.add_argument("--epochs", type=int, default=30)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--optimizer", choices=["sgd_momentum", "adam"], default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--lam", type=float, default=1.0)
    t.add_argument("--lam-unpaired", type=float, default=1.0)
    t.add_argument("--no-stop-gradient", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--keep-fraction", type=float, default=None,
                   help="labelled share of the training split (semi default 0.01)")
    t.add_argument("--mask-seed", type=int, default=0)
    t.add_argument("--modality", choices=["ecg", "ppg"], default="ppg", help="baseline input")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--resume")
    t.add_argument("--run-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--modality", choices=["ecg", "ppg", "both"], default="both")
    e.add_argument("--n-boot", type=int, default=1000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--alpha", type=float, default=0.05)
    e.add_argument("--compare", help="second checkpoint for pairwise tests")
    e.add_argument("--out-dir")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("embed", help="export per-stage features for full and peak-only inputs")
    m.add_argument("--checkpoint", required=True)
    m.add_argument("--data", required=True)
    m.add_argument("--split", default="test")
    m.add_argument("--modality", choices=["ecg", "ppg", "both"], default="both")
    m.add_argument("--peak-only", choices=["full", "peak-only", "both"], default="full")
    m.add_argument("--max-samples", type=int, default=0)
    m.add_argument("--batch-size", type=int, default=128)
    m.add_argument("--pca2d", action="store_true", help="also write a 2-D PCA (smoke checks only)")
    m.add_argument("--out-dir")
    m.set_defaults(func=cmd_embed)

    k = sub.add_parser("peaks", help="detect peaks and write peak-only signals")
    k.add_argument("--data", required=True)
    k.add_argument("--split", default="test")
    k.add_argument("--modality", choices=["ecg", "ppg", "both"], default="both")
    k.add_argument("--max-samples", type=int, default=0)
    k.add_argument("--out-dir")
    k.set_defaults(func=cmd_peaks)

    c = sub.add_parser("ckpt", help="inspect or strip checkpoints")
    c.add_argument("action", choices=["info", "strip"])
    c.add_argument("checkpoint")
    c.add_argument("output", nargs="?")
    c.set_defaults(func=cmd_ckpt)
    return p


def _finish_train_args(args) -> None:
    if args.command != "train":
        return
    args.optimizer_set = args.optimizer is not None or args.lr is not None
    if args.optimizer is None:
        args.optimizer = "adam" if args.mode == "baseline" else "sgd_momentum"
    if args.lr is None:
        args.lr = 1e-4 if args.optimizer == "adam" else 0.1
    if args.keep_fraction is None:
        args.keep_fraction = 0.01 if args.mode == "semi" else 1.0
    if not 0.0 < args.keep_fraction <= 1.0:
        raise CliError("--keep-fraction must lie in (0, 1]")


def run_cli(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        pre, _ = parser.parse_known_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if pre.config:
            cfg = read_config(pre.config)
            _apply_config(parser._subparsers._group_actions[0].choices[pre.command], pre.command, cfg)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        _finish_train_args(args)
        args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"siamaf: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()

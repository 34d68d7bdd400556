"""``fcntag`` command line: synth, preprocess, train, evaluate, predict, inspect, plot.

Settings come from an optional ``--config`` file of ``section.key = value``
lines; command-line flags override the file.  Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from . import plots
from .data import SynthConfig, build_vocab, read_manifest, synth_generate, TagVocabulary
from .errors import FcnError, InvalidConfigError, InvalidInputError, NumericalError
from .frontend import FeatureKind, FrontendConfig
from .metrics import macro_auc, roc_curve, write_report
from .models import (MODEL_NAMES, ModelSpec, build, fcn_spec, load_checkpoint, mfcc_spec,
                     param_count, shape_trace)
from .pipeline import load_dataset, preprocess
from .train import TrainConfig, train

log = logging.getLogger("fcntag")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS: dict[str, str] = {
    "frontend.target_rate": "12000",
    "frontend.n_fft": "256",
    "frontend.hop": "256",
    "frontend.n_frames": "1366",
    "frontend.n_mels": "96",
    "frontend.n_mfcc": "30",
    "frontend.fmin": "0",
    "frontend.fmax": "",
    "model.name": "fcn4",
    "model.channels": "",
    "model.pools": "",
    "model.hidden": "",
    "train.batch_size": "32",
    "train.lr": "0.001",
    "train.beta1": "0.9",
    "train.beta2": "0.999",
    "train.eps_adam": "1e-08",
    "train.max_epochs": "30",
    "train.patience": "10",
    "train.seed": "0",
    "data.manifest": "",
    "data.features": "",
    "data.input": "",
    "data.top_k": "auto",
    "data.drop_untagged": "false",
    "synth.n_clips": "1000",
    "synth.duration_s": "5.5",
    "synth.sample_rate": "16000",
    "synth.tag_prob": "0.35",
}

# derived, informational lines written back into echoed configs
_DERIVED_PREFIX = "resolved."

TABLE_NOTE_FCN4 = (
    "note: sizes follow floor pooling of the listed pools. Annotations of 24x85 and 12x21 after\n"
    "      blocks 1 and 2 that circulate for this ladder are inconsistent with pools (4,5) and\n"
    "      (3,8); they match the 5-layer ladder instead.")

class UsageError(Exception):
    pass

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2, which is our data-error code
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")

# ---------------------------------------------------------------- configuration

def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or "." not in key:
            raise UsageError(f"{path}:{n}: expected 'section.key = value'")
        if key.startswith(_DERIVED_PREFIX):
            continue
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value.strip()
    return out

def resolve_config(args) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(read_config_file(args.config))
    flag_map = {"manifest": "data.manifest", "model": "model.name", "input": "data.input",
                "epochs": "train.max_epochs", "batch_size": "train.batch_size",
                "features": "data.features", "n_clips": "synth.n_clips"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = str(value)
    if getattr(args, "seed", None) is not None:
        cfg["train.seed"] = str(args.seed)
    return cfg

def _num(cfg, key, kind=int):
    try:
        return kind(cfg[key])
    except ValueError as exc:
        raise UsageError(f"{key} = {cfg[key]!r} is not a valid {kind.__name__}") from exc

def _ints(text: str) -> list[int] | None:
    if not text.strip():
        return None
    try:
        return [int(v) for v in text.replace(" ", "").split(",")]
    except ValueError as exc:
        raise UsageError(f"expected a comma list of integers, got {text!r}") from exc

def _pools(text: str) -> list[tuple[int, int]] | None:
    if not text.strip():
        return None
    try:
        return [tuple(int(v) for v in p.lower().split("x")) for p in text.replace(" ", "").split(",")]
    except ValueError as exc:
        raise UsageError(f"expected pools like '2x4,4x4', got {text!r}") from exc

def frontend_config(cfg: dict[str, str]) -> FrontendConfig:
    fmax = cfg["frontend.fmax"].strip()
    try:
        return FrontendConfig(
            target_rate=_num(cfg, "frontend.target_rate"), n_fft=_num(cfg, "frontend.n_fft"),
            hop=_num(cfg, "frontend.hop"), n_frames=_num(cfg, "frontend.n_frames"),
            n_mels=_num(cfg, "frontend.n_mels"), n_mfcc=_num(cfg, "frontend.n_mfcc"),
            fmin=_num(cfg, "frontend.fmin", float), fmax=float(fmax) if fmax else None)
    except InvalidConfigError as exc:
        raise UsageError(str(exc)) from exc

def train_config(cfg: dict[str, str]) -> TrainConfig:
    try:
        return TrainConfig(
            batch_size=_num(cfg, "train.batch_size"), lr=_num(cfg, "train.lr", float),
            beta1=_num(cfg, "train.beta1", float), beta2=_num(cfg, "train.beta2", float),
            eps_adam=_num(cfg, "train.eps_adam", float), max_epochs=_num(cfg, "train.max_epochs"),
            patience=_num(cfg, "train.patience"), seed=_num(cfg, "train.seed"))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc

def input_kind(cfg: dict[str, str]) -> FeatureKind:
    """The feature kind implied by the model name, checked against ``data.input``."""
    name = cfg["model.name"].lower()
    implied = {"mfcc4": FeatureKind.MFCC_STACK, "fcn4-stft": FeatureKind.LOG_STFT}.get(name)
    given = cfg["data.input"].strip()
    if not given:
        return implied or FeatureKind.LOG_MEL
    try:
        kind = FeatureKind.parse(given)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if implied is not None and kind is not implied:
        raise UsageError(f"model {name} takes {implied.short} input, not {kind.short}")
    if implied is None and kind is FeatureKind.MFCC_STACK:
        raise UsageError(f"model {name} takes mel or stft input; use mfcc4 for MFCCs")
    return kind

def model_spec(cfg: dict[str, str], fe: FrontendConfig, output_dim: int) -> ModelSpec:
    name = cfg["model.name"].lower()
    if name not in MODEL_NAMES:
        raise UsageError(f"unknown model {name!r}; valid names: {', '.join(MODEL_NAMES)}")
    kind = input_kind(cfg)
    try:
        if name == "mfcc4":
            hidden = _ints(cfg["model.hidden"])
            kw = {"hidden": hidden} if hidden else {}
            return mfcc_spec(n_frames=fe.n_frames, n_coeffs=fe.bands(kind), output_dim=output_dim, **kw)
        depth = int(name[3])
        spec = fcn_spec(depth, kind, n_frames=fe.n_frames, n_bands=fe.bands(kind),
                        channels=_ints(cfg["model.channels"]), pools=_pools(cfg["model.pools"]),
                        output_dim=output_dim)
        shape_trace(spec)
        return spec
    except InvalidConfigError as exc:
        raise UsageError(str(exc)) from exc

def describe_ladder(spec: ModelSpec) -> str:
    parts = []
    for b in spec.blocks:
        s = f"{b.kind}{b.kernel}x{b.kernel}x{b.channels}" if b.kind == "conv" else f"dense{b.channels}"
        if b.pool is not None:
            s += f"/pool{b.pool[0]}x{b.pool[1]}"
        parts.append(s)
    return ", ".join(parts)

def echo_config(out: Path, cfg: dict[str, str], extra: dict[str, str] | None = None) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"{k} = {v}" for k, v in sorted(cfg.items())]
    lines += [f"{_DERIVED_PREFIX}{k} = {v}" for k, v in (extra or {}).items()]
    (out / "config.txt").write_text("\n".join(lines) + "\n")

# ---------------------------------------------------------------- helpers

def _manifest(cfg):
    path = cfg["data.manifest"]
    if not path:
        raise UsageError("--manifest is required")
    if not Path(path).exists():
        raise InvalidInputError(f"manifest {path} does not exist")
    return read_manifest(path)

def _vocab(manifest, cfg) -> TagVocabulary:
    top = cfg["data.top_k"].strip().lower()
    if top == "auto":
        tags = {t for e in manifest.split("train") for t in e.tags}
        k = min(50, len(tags))
    else:
        k = _num(cfg, "data.top_k")
    return build_vocab(manifest, k)

def _write_vocab(path: Path, vocab: TagVocabulary) -> None:
    path.write_text("".join(f"{t}\t{c}\n" for t, c in zip(vocab.tags, vocab.counts)))

def _read_vocab(path: Path) -> TagVocabulary:
    rows = [line.split("\t") for line in path.read_text().splitlines() if line]
    return TagVocabulary(tuple(r[0] for r in rows), tuple(int(r[1]) for r in rows))

def _features(manifest, fe, kind, cfg, out: Path):
    """Preprocess into ``data.features`` (or ``out/features``); returns the clip index."""
    where = Path(cfg["data.features"]) if cfg["data.features"] else out / "features"
    result = preprocess(manifest, fe, kind, where)
    if result.failures:
        raise InvalidInputError(f"{len(result.failures)} clips failed preprocessing; "
                                f"see {where / kind.short / 'failures.csv'}")
    return result.index

# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = resolve_config(args)
    sc = SynthConfig(n_clips=_num(cfg, "synth.n_clips"), duration_s=_num(cfg, "synth.duration_s", float),
                     sample_rate=_num(cfg, "synth.sample_rate"), seed=_num(cfg, "train.seed"),
                     tag_prob=_num(cfg, "synth.tag_prob", float))
    out = Path(args.out)
    echo_config(out, cfg)
    manifest = synth_generate(sc, out)
    print(f"wrote {len(manifest)} clips and {out / 'manifest.csv'}")
    return EXIT_OK

def cmd_preprocess(args) -> int:
    cfg = resolve_config(args)
    fe = frontend_config(cfg)
    kind = FeatureKind.parse(cfg["data.input"] or "mel")
    manifest = _manifest(cfg)
    out = Path(args.out)
    echo_config(out, cfg)
    result = preprocess(manifest, fe, kind, out)
    print(f"{kind.short}: {len(result.computed)} computed, {len(result.skipped)} up to date, "
          f"{len(result.failures)} failed")
    if result.failures:
        print(f"failures listed in {out / kind.short / 'failures.csv'}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    fe = frontend_config(cfg)
    tc = train_config(cfg)
    kind = input_kind(cfg)
    manifest = _manifest(cfg)
    vocab = _vocab(manifest, cfg)
    spec = model_spec(cfg, fe, len(vocab))
    out = Path(args.out)
    echo_config(out, cfg, {"model": spec.name, "input": kind.short, "ladder": describe_ladder(spec),
                           "tags": ",".join(vocab.tags)})
    _write_vocab(out / "tags.txt", vocab)
    index = _features(manifest, fe, kind, cfg, out)
    drop = cfg["data.drop_untagged"].lower() == "true"
    train_set = load_dataset(manifest, vocab, "train", index, kind, drop)
    val_set = load_dataset(manifest, vocab, "valid", index, kind, drop)
    model = build(spec, tc.seed)
    result = train(model, train_set, val_set, tc, out_dir=out)
    print(f"{spec.name}: {len(result.history)} epochs, best validation macro AUC "
          f"{result.best_auc:.4f} at epoch {result.best_epoch}")
    return EXIT_OK

def _load_for_eval(args):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise InvalidInputError(f"checkpoint {ckpt} does not exist")
    model = load_checkpoint(ckpt)
    cfg = resolve_config(args)
    # frame count follows the checkpoint unless the config file pins it
    if not (args.config and "frontend.n_frames" in read_config_file(args.config)):
        cfg["frontend.n_frames"] = str(model.spec.input_shape[1])
    fe = frontend_config(cfg)
    kind = model.spec.input_kind
    manifest = _manifest(cfg)
    vocab_file = ckpt.parent / "tags.txt"
    vocab = _read_vocab(vocab_file) if vocab_file.exists() else build_vocab(manifest, model.spec.output_dim)
    return model, cfg, fe, kind, manifest, vocab

def cmd_evaluate(args) -> int:
    model, cfg, fe, kind, manifest, vocab = _load_for_eval(args)
    if not manifest.split(args.split):
        raise InvalidInputError(f"split {args.split!r} is empty")
    out = Path(args.out)
    echo_config(out, cfg, {"checkpoint": str(args.checkpoint), "split": args.split})
    index = _features(manifest, fe, kind, cfg, out)
    data = load_dataset(manifest, vocab, args.split, index, kind,
                        cfg["data.drop_untagged"].lower() == "true")
    if data.y.shape[1] != model.spec.output_dim:
        raise InvalidInputError(f"{data.y.shape[1]} label columns vs {model.spec.output_dim} model outputs")
    scores = model.predict(data.x)
    report = macro_auc(scores, data.y)
    write_report(out / f"auc_{args.split}.csv", report, vocab.tags)
    if args.roc:
        curves = {t: roc_curve(scores[:, k], data.y[:, k]) for k, t in enumerate(vocab.tags)
                  if report.per_tag[k] is not None}
        plots.roc_curves(curves, out / f"roc_{args.split}.svg")
    print(f"macro AUC ({args.split}, {len(data)} clips, {len(vocab) - report.n_skipped} tags): "
          f"{report.macro:.4f}")
    return EXIT_OK

def cmd_predict(args) -> int:
    model, cfg, fe, kind, manifest, vocab = _load_for_eval(args)
    entries = manifest.split(args.split)
    if not entries:
        raise InvalidInputError(f"split {args.split!r} is empty")
    out = Path(args.out)
    echo_config(out, cfg, {"checkpoint": str(args.checkpoint), "split": args.split})
    index = _features(manifest, fe, kind, cfg, out)
    data = load_dataset(manifest, vocab, args.split, index, kind)
    scores = model.predict(data.x)
    path = out / f"predictions_{args.split}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", *vocab.tags])
        for cid, row in zip(data.ids, scores):
            w.writerow([cid, *(f"{v:.6f}" for v in row)])
    print(f"wrote {len(data)} rows to {path}")
    return EXIT_OK

def cmd_inspect(args) -> int:
    if args.name is not None:
        args.model = args.name
    cfg = resolve_config(args)
    fe = frontend_config(cfg)
    spec = model_spec(cfg, fe, _num(cfg, "data.top_k") if cfg["data.top_k"] != "auto" else 50)
    trace = shape_trace(spec)
    total, rows = param_count(spec)
    print(f"{spec.name}: input {spec.input_kind.short} {spec.input_shape[0]}x{spec.input_shape[1]}, "
          f"{spec.output_dim} outputs")
    print(f"{'block':<8}{'layer':<24}{'output (HxWxD)':>16}")
    for i, (b, (h, w, d)) in enumerate(zip(spec.blocks, trace)):
        layer = f"conv {b.kernel}x{b.kernel}x{b.channels}" if b.kind == "conv" else f"dense x{b.channels}"
        if b.pool is not None:
            layer += f" MP{b.pool}"
        print(f"{i:<8}{layer:<24}{f'{h}x{w}x{d}':>16}")
    print()
    print(f"{'layer':<16}{'learned':>12}{'stats':>10}")
    for r in rows:
        print(f"{r['name']:<16}{r['learned']:>12,}{r['stats']:>10,}")
    print(f"{'total':<16}{total:>12,}")
    if spec.name == "fcn4" and not cfg["model.pools"]:
        print()
        print(TABLE_NOTE_FCN4)
    return EXIT_OK

def cmd_plot(args) -> int:
    from .train import read_history

    run = Path(args.run_dir)
    if not run.is_dir():
        raise InvalidInputError(f"{run} is not a directory")
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    histories = {}
    for path in sorted(run.rglob("history.csv")):
        label = str(path.parent.relative_to(run)) if path.parent != run else run.name
        histories[label] = read_history(path)
    if histories:
        plots.learning_curves(histories, out / "learning_curves.svg")
    plots.bins_chart(out / "bins_per_khz.svg")
    print(f"{len(histories)} runs plotted into {out}")
    if not histories:
        print("no history.csv found; only the bins-per-kHz chart was written", file=sys.stderr)
    return EXIT_OK

# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fcntag", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *, model=False, train=False):
        sp.add_argument("--config", help="file of 'section.key = value' lines")
        sp.add_argument("--seed", type=int)
        if model:
            sp.add_argument("--model", choices=MODEL_NAMES)
            sp.add_argument("--input", choices=["mel", "stft", "mfcc"])
        if train:
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch-size", type=int)

    sp = sub.add_parser("synth", help="generate the synthetic tagging corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-clips", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("preprocess", help="extract feature files for a manifest")
    common(sp)
    sp.add_argument("--manifest")
    sp.add_argument("--input", choices=["mel", "stft", "mfcc"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("train", help="train a model and keep the best checkpoint")
    common(sp, model=True, train=True)
    sp.add_argument("--manifest")
    sp.add_argument("--features", help="reuse a preprocess output directory")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("evaluate", cmd_evaluate, "per-tag and macro AUC of a checkpoint"),
                                 ("predict", cmd_predict, "write tag scores for a split")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--manifest")
        sp.add_argument("--features")
        sp.add_argument("--split", default="test", choices=["train", "valid", "test"])
        sp.add_argument("--out", required=True)
        if name == "evaluate":
            sp.add_argument("--roc", action="store_true", help="also write ROC curves as SVG")
        sp.set_defaults(func=func)

    sp = sub.add_parser("inspect", help="print the shape trace and parameter table")
    common(sp, model=True)
    sp.add_argument("name", nargs="?", help="model name (same as --model)")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("plot", help="learning curves and bins-per-kHz chart as SVG")
    sp.add_argument("run_dir")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)
    return p

def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"fcntag: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"fcntag: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FcnError, OSError, ValueError) as exc:
        print(f"fcntag: data error: {exc}", file=sys.stderr)
        return EXIT_DATA

if __name__ == "__main__":
    sys.exit(main())

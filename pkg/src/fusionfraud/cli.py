"""Command-line entry point.

Subcommands: gen-data, train, ablate, infer, serve, gradcheck.
Exit codes: 0 success, 1 validation/usage, 2 runtime/numeric, 3 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import config as cfgmod
from . import data as datamod
from . import plots
from . import serve as servemod
from .errors import (
    ConfigurationError,
    DimensionError,
    FormatError,
    GenerationError,
    InputError,
    NumericError,
    ParameterError,
    SplitError,
)
from .evaluate import ConfusionMatrix, run_ablation
from .model import (
    CANONICAL_ORDER,
    Variant,
    gradient_check_variant,
    load_params,
    save_params,
)
from .train import run_cv

GRADCHECK_TOLERANCE = 1e-5


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _add_common(p: _Parser) -> None:
    p.add_argument("--config", help="key-value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, help="fraud decision threshold (p >= t)")
    p.add_argument("--out-dir", dest="out_dir")


def _add_train_flags(p: _Parser) -> None:
    p.add_argument("--data", help="dataset path (binary or jsonl)")
    p.add_argument("--folds", type=int)
    p.add_argument("--lr-max", dest="lr_max", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--t-max", dest="t_max", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--dropout-p", dest="dropout_p", type=float)
    p.add_argument("--patience", type=int)


def build_parser() -> _Parser:
    parser = _Parser(prog="fusionfraud",
                     description="bimodal tensor-fusion fraud classifier")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", help="dataset file (default <out-dir>/dataset.<ext>)")
    p.add_argument("--format", choices=("binary", "jsonl"))
    p.add_argument("--n-total", dest="n_total", type=int)
    p.add_argument("--n-fraud", dest="n_fraud", type=int)
    p.add_argument("--weight-video", dest="weight_video", type=float)
    p.add_argument("--weight-audio", dest="weight_audio", type=float)
    p.add_argument("--weight-bimodal", dest="weight_bimodal", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--d-sig", dest="d_sig", type=int)
    p.add_argument("--amplitude", type=float)

    p = sub.add_parser("train", help="cross-validated training of one variant")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--variant")

    p = sub.add_parser("ablate", help="train and compare variants")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--variants", help="comma-separated variant names or 'all'")

    p = sub.add_parser("infer", help="single-shot inference over JSONL records")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input", required=True, help="JSONL records file, or - for stdin")

    p = sub.add_parser("serve", help="streaming inference server")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--transport", help="stdio or tcp:<port>")

    p = sub.add_parser("gradcheck", help="finite-difference check of every variant")
    _add_common(p)
    p.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)

    return parser


_FLAG_KEYS = [k for k in cfgmod._SCHEMA]


def _resolve(args) -> cfgmod.AppConfig:
    flag_values = {k: getattr(args, k, None) for k in _FLAG_KEYS}
    return cfgmod.resolve(args.config, flag_values)


def _echo_config(app: cfgmod.AppConfig, subcommand: str, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved-config.txt").write_text(app.echo(subcommand), encoding="utf-8")


def _parse_variants(text: str) -> list[Variant]:
    if text == "all":
        return list(CANONICAL_ORDER)
    names = [t.strip() for t in text.split(",") if t.strip()]
    if not names:
        raise ParameterError("no variants requested")
    return [Variant.from_cli_name(n) for n in names]


def _out_dir(app, default: str) -> Path:
    return Path(app.out_dir if app.out_dir is not None else default)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, out, err) -> int:
    app = _resolve(args)
    scfg = app.synth_config()
    fmt = app.format
    out_dir = _out_dir(app, "out-gen-data")
    ext = "tfnd" if fmt == "binary" else "jsonl"
    path = Path(app.out) if app.out is not None else out_dir / f"dataset.{ext}"
    ds = datamod.generate_synthetic(scfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    datamod.save_dataset(ds, path, format=fmt)
    _echo_config(app, "gen-data", out_dir)
    n_fraud = int(ds.labels().sum())
    out.write(f"wrote {len(ds)} records to {path} ({fmt})\n")
    out.write(f"class counts: fraud={n_fraud} legit={len(ds) - n_fraud}\n")
    ceiling = datamod.bayes_accuracy_closed_form(scfg)
    mc = datamod.bayes_accuracy_monte_carlo(scfg)
    out.write(f"bayes ceiling (closed form): {ceiling:.4f}\n")
    out.write(f"bayes ceiling (monte carlo, 1e6 draws): {mc:.4f}\n")
    out.write(f"unimodal ceilings: video={datamod.bayes_accuracy_closed_form(scfg, 'video'):.4f} "
              f"audio={datamod.bayes_accuracy_closed_form(scfg, 'audio'):.4f}\n")
    return 0


def cmd_train(args, out, err) -> int:
    app = _resolve(args)
    if app.data is None:
        raise ParameterError("train needs --data (or a 'data' config key)")
    if app.variant is None:
        raise ParameterError("train needs --variant (or a 'variant' config key)")
    variant = Variant.from_cli_name(app.variant)
    ds = datamod.load_dataset(app.data)
    plan = datamod.stratified_kfold(ds, app.folds, app.seed)
    tcfg = app.train_config()
    out_dir = _out_dir(app, f"out-train-{variant.cli_name}")
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(app, "train", out_dir)

    cv = run_cv(ds, plan, variant, tcfg)
    for fold in cv.folds:
        save_params(fold.params, out_dir / f"checkpoint-fold{fold.fold}.tfnm")
        (out_dir / f"history-fold{fold.fold}.csv").write_text(
            fold.history.to_csv(), encoding="utf-8")
    (out_dir / "report.json").write_text(
        json.dumps(cv.to_doc(), indent=2) + "\n", encoding="utf-8")
    pooled = ConfusionMatrix(
        tp=sum(f.report.cm.tp for f in cv.folds), tn=sum(f.report.cm.tn for f in cv.folds),
        fp=sum(f.report.cm.fp for f in cv.folds), fn=sum(f.report.cm.fn for f in cv.folds))
    plots.save_training_curves([f.history for f in cv.folds], out_dir / "training-curves.png")
    plots.save_confusion_heatmap(pooled, out_dir / "confusion-matrix.png",
                                 title=f"{variant.display_name}, pooled over {plan.k} folds")
    out.write(f"{variant.cli_name}: mean F1 {cv.mean['f1']:.4f} ± {cv.std['f1']:.4f}, "
              f"mean accuracy {cv.mean['accuracy']:.4f}\n")
    out.write(f"artifacts in {out_dir}\n")
    return 0


def cmd_ablate(args, out, err) -> int:
    app = _resolve(args)
    if app.data is None:
        raise ParameterError("ablate needs --data (or a 'data' config key)")
    variants = _parse_variants(app.variants)
    ds = datamod.load_dataset(app.data)
    plan = datamod.stratified_kfold(ds, app.folds, app.seed)
    tcfg = app.train_config()
    out_dir = _out_dir(app, "out-ablate")
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(app, "ablate", out_dir)

    report = run_ablation(ds, plan, variants, tcfg,
                          progress=lambda msg: err.write(msg + "\n"))
    (out_dir / "ablation.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    table = report.render_text()
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
    plots.save_ablation_bars(report, out_dir / "ablation-f1.png")
    out.write(table)
    out.write(f"artifacts in {out_dir}\n")
    return 0


def cmd_infer(args, out, err) -> int:
    app = _resolve(args)
    if app.checkpoint is None:
        raise ParameterError("infer needs --checkpoint (or a 'checkpoint' config key)")
    params = load_params(app.checkpoint)
    threshold = app.threshold
    if args.input == "-":
        lines = sys.stdin
    else:
        lines = open(args.input, "r", encoding="utf-8")
    failed = 0
    try:
        for lineno, raw in enumerate(lines, start=1):
            line = raw.strip()
            if not line:
                continue
            response = servemod.predict_line(params, threshold, line)
            if response.startswith('{"error"'):
                failed += 1
                err.write(f"line {lineno}: {json.loads(response)['error']}\n")
            else:
                out.write(response + "\n")
    finally:
        if lines is not sys.stdin:
            lines.close()
    return 1 if failed else 0


def cmd_serve(args, out, err) -> int:
    app = _resolve(args)
    if app.checkpoint is None:
        raise ParameterError("serve needs --checkpoint (or a 'checkpoint' config key)")
    params = load_params(app.checkpoint)
    transport = app.transport
    if transport == "stdio":
        return servemod.serve_stdio(params, app.threshold, sys.stdin, out, err)
    if transport.startswith("tcp:"):
        try:
            port = int(transport.split(":", 1)[1])
        except ValueError:
            raise ParameterError(f"bad tcp transport {transport!r}; use tcp:<port>") from None
        return servemod.serve_tcp(params, app.threshold, port, err)
    raise ParameterError(f"transport must be 'stdio' or 'tcp:<port>', got {transport!r}")


def cmd_gradcheck(args, out, err) -> int:
    app = _resolve(args)
    failed = []
    for variant in CANONICAL_ORDER:
        t0 = time.perf_counter()
        worst = gradient_check_variant(variant, seed=app.seed + 7,
                                       corrupt=args.corrupt_backward)
        dt = time.perf_counter() - t0
        status = "PASS" if worst < GRADCHECK_TOLERANCE else "FAIL"
        out.write(f"{variant.cli_name:24s} max_rel_error={worst:.3e}  {status}  ({dt:.1f}s)\n")
        if status == "FAIL":
            failed.append(variant.cli_name)
    if failed:
        err.write(f"gradient check failed for: {', '.join(failed)}\n")
        return 2
    out.write(f"all {len(CANONICAL_ORDER)} variants within {GRADCHECK_TOLERANCE:.0e}\n")
    return 0


# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "infer": cmd_infer,
    "serve": cmd_serve,
    "gradcheck": cmd_gradcheck,
}

_VALIDATION_ERRORS = (ParameterError, FormatError, ConfigurationError, SplitError,
                      InputError, DimensionError)
_RUNTIME_ERRORS = (NumericError, GenerationError)


def main(argv=None, out=None, err=None) -> int:
    out = out if out is not None else sys.stdout
    err = err if err is not None else sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        err.write(f"usage error: {exc}\n")
        return 1
    try:
        return _COMMANDS[args.subcommand](args, out, err)
    except _VALIDATION_ERRORS as exc:
        err.write(f"error: {exc}\n")
        return 1
    except _RUNTIME_ERRORS as exc:
        err.write(f"error: {exc}\n")
        return 2
    except KeyboardInterrupt:
        return 130
    except OSError as exc:
        err.write(f"i/o error: {exc}\n")
        return 3


if __name__ == "__main__":
    sys.exit(main())

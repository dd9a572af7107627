"""Command-line front end: ``listda {gen,train,eval,compare,bound}``.

Option precedence for ``train``: built-in defaults, then the ``--config``
file (flat ``key = value``), then explicit flags.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import shutil
import subprocess
import sys
import tempfile

import numpy as np

from . import __version__
from .bound import BOUND_METRICS, theorem2_report
from .data import (Dataset, FormatError, SyntheticSpec, SyntheticTruth, format_config,
                   generate_synthetic, parse_letor, quantize_labels, read_config, read_manifest,
                   with_manifest, write_letor, write_manifest)
from .divergence import item_level_dist, list_level_dist, subsample_equal, wasserstein1_exact
from .metrics import MetricReport, evaluate, paired_t_test, parse_metric
from .models import load_checkpoint, save_checkpoint
from .trainer import ConfigError, NumericalAbort, TrainConfig, score_lists, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    import sklearn
    return {"listda": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


class OutputDir:
    """Write into a temporary sibling directory, then rename it into place."""

    def __init__(self, path, force=False):
        self.path = os.path.abspath(path)
        if os.path.exists(self.path) and not force:
            raise UsageError(f"output directory {path} exists; pass --force to replace it")
        self.force = force
        parent = os.path.dirname(self.path)
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".tmp-" + os.path.basename(self.path) + "-", dir=parent)

    def file(self, name):
        return os.path.join(self.tmp, name)

    def write(self, name, text):
        with open(self.file(name), "w", encoding="utf-8") as fh:
            fh.write(text)

    def commit(self, command, args, inputs=(), seed=None, extra=None):
        manifest = {"command": command, "args": args, "seed": seed, "versions": _versions(),
                    "inputs": {os.path.basename(p): _sha256(p) for p in inputs if p}}
        manifest.update(extra or {})
        self.write("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        if os.path.exists(self.path):
            shutil.rmtree(self.path)
        os.rename(self.tmp, self.path)

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def _run_in(out, command, args, fn):
    try:
        inputs, seed, extra = fn(out)
    except BaseException:
        out.abort()
        raise
    out.commit(command, args, inputs, seed, extra)


def _load_dataset(path, manifest=None, domain="source", feature_dim=None):
    if not os.path.exists(path):
        raise UsageError(f"no such dataset file: {path}")
    ds = parse_letor(path, feature_dim=feature_dim, domain=domain)
    if manifest:
        ds = with_manifest(ds, *read_manifest(manifest))
    return ds


def _metric_names(metrics, cutoffs):
    names = []
    for m in metrics.split(","):
        m = m.strip()
        base, k = parse_metric(m)
        if k is not None or not cutoffs:
            names.append(m)
        else:
            names.extend(f"{m}@{c}" for c in cutoffs)
    return names


def _cutoffs(text):
    if not text:
        return []
    try:
        return [int(c) for c in text.split(",")]
    except ValueError:
        raise UsageError(f"--cutoff expects comma-separated integers, got {text!r}") from None


def _checkpoint_scorer(path):
    if not os.path.exists(path):
        raise UsageError(f"no such checkpoint: {path}")
    modules, meta = load_checkpoint(path)
    if "scorer" not in modules:
        raise UsageError(f"{path} holds no scorer")
    return modules["scorer"], meta


def _apply_columns(ds, meta):
    if "shared" in meta:
        ds = Dataset(ds.lists, ds.feature_dim, tuple(meta["shared"]) or None,
                     tuple(meta.get("disjoint", ())), ds.domain)
    return ds


# -------------------------------------------------------------------- gen

def cmd_gen(args):
    if not args.spec or not os.path.exists(args.spec):
        raise UsageError(f"spec file not found: {args.spec}")
    config = read_config(args.spec)
    if args.seed is not None:
        config["seed"] = args.seed
    try:
        spec = SyntheticSpec.from_config(config)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synthetic spec: {exc}") from None
    out = OutputDir(args.out, args.force)

    def body(out):
        source, target, truth = generate_synthetic(spec)
        write_letor(out.file("source.letor"), quantize_labels(source))
        write_letor(out.file("target.letor"), quantize_labels(target))
        write_manifest(out.file("features.manifest"), source.shared, source.disjoint)
        out.write("spec.cfg", format_config(spec.to_config()))
        facts = dict(truth.to_config())
        facts.update(_w1_flags(source, target, spec.seed))
        out.write("truth.cfg", format_config(facts))
        return [args.spec], spec.seed, {}

    _run_in(out, "gen", vars(args), body)
    print(f"wrote {args.out}")
    return EXIT_OK


def _w1_flags(source, target, seed, max_lists=256):
    """Input-space item and list W1 between the two domains, with qualitative flags."""
    rng = np.random.default_rng(seed)
    n = min(len(source), len(target), max_lists)
    xs = [source.items()[i] for i in np.sort(rng.choice(len(source), n, replace=False))]
    xt = [target.items()[i] for i in np.sort(rng.choice(len(target), n, replace=False))]
    w_list = wasserstein1_exact(list_level_dist(xs), list_level_dist(xt))
    item_s, item_t = subsample_equal(item_level_dist(xs), item_level_dist(xt), rng)
    w_item = wasserstein1_exact(item_s, item_t)
    return {"w1_item": repr(w_item), "w1_list": repr(w_list),
            "item_level_closer": str(w_item < w_list).lower(),
            "list_level_positive": str(w_list > 0).lower()}


# ------------------------------------------------------------------ train

_TRAIN_FLAGS = {"mode": "mode", "lam": "lambda", "eta_rank": "eta_rank", "eta_ad": "eta_ad",
                "steps": "steps", "seed": "seed", "loss": "loss", "batch_size": "batch_size",
                "decay_every": "decay_every", "attention": "attention",
                "disc_activation": "disc_activation"}


def _train_config(args):
    mapping = {}
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        mapping.update(read_config(args.config))
    for attr, key in _TRAIN_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None:
            if key == "lambda":
                mapping.pop("lam", None)
            mapping[key] = value
    return TrainConfig.from_mapping(mapping)


def cmd_train(args):
    if args.grid_lambda or args.grid_eta_ad:
        return _train_grid(args)
    config = _train_config(args)
    source = _load_dataset(args.source, args.manifest, "source")
    if not source.labeled or len(source) == 0:
        raise UsageError("source data must be nonempty and labeled")
    target = None
    if config.mode != "zero_shot":
        if not args.target:
            raise ConfigError("target", f"mode {config.mode} needs --target data")
        target = _load_dataset(args.target, args.manifest, "target", source.feature_dim)
    held_out = _load_dataset(args.eval, args.manifest, "eval", source.feature_dim) if args.eval else source
    metrics = _metric_names(args.metric, _cutoffs(args.cutoff))
    out = OutputDir(args.out, args.force)

    def body(out):
        result = train(source, target, config)
        meta = {"config": config.to_mapping(), "shared": list(source.shared),
                "disjoint": list(source.disjoint), "feature_dim": source.feature_dim}
        save_checkpoint(out.file("checkpoint.ckpt"), result.state.modules(), meta)
        out.write("train_log.tsv", result.log_text())
        out.write("train.cfg", format_config(config.to_mapping()))
        scores = score_lists(result.state.scorer, held_out.items())
        report = evaluate(scores, held_out.lists, metrics)
        out.write("report.tsv", report.to_tsv())
        out.write("report.txt", report.to_text())
        print(report.to_text(), end="")
        return [args.source, args.target, args.eval, args.config, args.manifest], config.seed, {}

    _run_in(out, "train", vars(args), body)
    return EXIT_OK


def _split_floats(text, flag):
    try:
        return [float(v) for v in text.split(",")] if text else [None]
    except ValueError:
        raise UsageError(f"{flag} expects comma-separated numbers, got {text!r}") from None


def _train_grid(args):
    """Run one ``train`` per grid point as independent processes, ``--jobs`` at a time."""
    lams = _split_floats(args.grid_lambda, "--grid-lambda")
    etas = _split_floats(args.grid_eta_ad, "--grid-eta-ad")
    if os.path.exists(args.out):
        if not args.force:
            raise UsageError(f"output directory {args.out} exists; pass --force to replace it")
        shutil.rmtree(args.out)
    base = [sys.executable, "-m", "listda", "train", "--source", args.source, "--metric", args.metric]
    for flag, value in (("--target", args.target), ("--manifest", args.manifest), ("--eval", args.eval),
                        ("--config", args.config), ("--cutoff", args.cutoff)):
        if value:
            base += [flag, value]
    for attr, key in _TRAIN_FLAGS.items():
        value = getattr(args, attr, None)
        if value is not None and attr not in ("lam", "eta_ad"):
            base += ["--" + key.replace("_", "-"), str(value)]
    jobs = []
    for lam in lams:
        for eta in etas:
            lam_v = lam if lam is not None else args.lam
            eta_v = eta if eta is not None else args.eta_ad
            name = "_".join(f"{k}={v}" for k, v in (("lambda", lam_v), ("eta_ad", eta_v))
                            if v is not None) or "default"
            cmd = list(base) + ["--out", os.path.join(args.out, name), "--force"]
            if lam_v is not None:
                cmd += ["--lambda", str(lam_v)]
            if eta_v is not None:
                cmd += ["--eta-ad", str(eta_v)]
            jobs.append((name, cmd))
    os.makedirs(args.out, exist_ok=True)
    codes, running = {}, []
    pending = list(jobs)
    while pending or running:
        while pending and len(running) < max(1, args.jobs):
            name, cmd = pending.pop(0)
            running.append((name, subprocess.Popen(cmd, stdout=subprocess.DEVNULL)))
        name, proc = running.pop(0)
        codes[name] = proc.wait()
    summaries = {}
    for name, _ in jobs:
        path = os.path.join(args.out, name, "report.tsv")
        if codes[name] == 0 and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                agg = MetricReport.from_tsv(fh.read()).aggregate()
            summaries[name] = ",".join(f"{m}={v:.6g}" for m, v in agg.items())
    lines = ["point\texit_code\tmeans"] + [f"{n}\t{codes[n]}\t{summaries.get(n, '-')}" for n, _ in jobs]
    with open(os.path.join(args.out, "grid.tsv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    worst = max(codes.values())
    return EXIT_OK if worst == 0 else worst


# ------------------------------------------------------------------- eval

def cmd_eval(args):
    scorer, meta = _checkpoint_scorer(args.checkpoint)
    ds = _apply_columns(_load_dataset(args.data, args.manifest, "eval", meta.get("feature_dim")), meta)
    metrics = _metric_names(args.metric, _cutoffs(args.cutoff))
    report = evaluate(score_lists(scorer, ds.items()), ds.lists, metrics)
    print(report.to_text(), end="")
    if args.out:
        out = OutputDir(args.out, args.force)

        def body(out):
            out.write("report.tsv", report.to_tsv())
            out.write("report.txt", report.to_text())
            return [args.checkpoint, args.data, args.manifest], None, {}

        _run_in(out, "eval", vars(args), body)
    return EXIT_OK


# ---------------------------------------------------------------- compare

def compare_reports(a, b, metrics=None, alpha=0.05):
    """Rows ``(metric, n, mean_a, mean_b, t, p, flag)`` over lists present in both."""
    rows = []
    for metric in metrics or [m for m in a.metrics if m in b.metrics]:
        pa, pb = a.per_list(metric), b.per_list(metric)
        common = [lid for lid in pa if lid in pb]
        va = np.array([pa[i] for i in common])
        vb = np.array([pb[i] for i in common])
        if len(common) < 2:
            rows.append((metric, len(common), float("nan"), float("nan"), None, None, "not comparable"))
            continue
        try:
            t, p = paired_t_test(va, vb)
            flag = "significant" if p <= alpha else "-"
        except ValueError:
            t, p, flag = None, None, "not comparable"
        rows.append((metric, len(common), float(va.mean()), float(vb.mean()), t, p, flag))
    return rows


def format_comparison(rows):
    head = f"{'metric':<12} {'lists':>6} {'mean_a':>9} {'mean_b':>9} {'t':>9} {'p':>9}  flag"
    lines = [head]
    for metric, n, ma, mb, t, p, flag in rows:
        ts = f"{t:9.4f}" if t is not None else f"{'-':>9}"
        ps = f"{p:9.4g}" if p is not None else f"{'-':>9}"
        lines.append(f"{metric:<12} {n:6d} {ma:9.4f} {mb:9.4f} {ts} {ps}  {flag}")
    return "\n".join(lines) + "\n"


def comparison_tsv(rows):
    lines = ["metric\tn\tmean_a\tmean_b\tt\tp\tflag"]
    for metric, n, ma, mb, t, p, flag in rows:
        lines.append("\t".join([metric, str(n), repr(ma), repr(mb),
                                "" if t is None else repr(t), "" if p is None else repr(p), flag]))
    return "\n".join(lines) + "\n"


def _read_report(path):
    if not os.path.exists(path):
        raise UsageError(f"no such report: {path}")
    with open(path, encoding="utf-8") as fh:
        return MetricReport.from_tsv(fh.read())


def cmd_compare(args):
    a, b = _read_report(args.report_a), _read_report(args.report_b)
    metrics = [m.strip() for m in args.metric.split(",")] if args.metric else None
    rows = compare_reports(a, b, metrics, alpha=args.alpha)
    print(format_comparison(rows), end="")
    if args.out:
        out = OutputDir(args.out, args.force)

        def body(out):
            out.write("compare.tsv", comparison_tsv(rows))
            out.write("compare.txt", format_comparison(rows))
            return [args.report_a, args.report_b], None, {}

        _run_in(out, "compare", vars(args), body)
    return EXIT_OK


# ------------------------------------------------------------------ bound

def cmd_bound(args):
    if args.metric not in BOUND_METRICS:
        raise UsageError(f"--metric must be one of {BOUND_METRICS} for the bound, got {args.metric!r}")
    scorer, meta = _checkpoint_scorer(args.checkpoint)
    dim = meta.get("feature_dim")
    source = _apply_columns(_load_dataset(args.source, args.manifest, "source", dim), meta)
    target = _apply_columns(_load_dataset(args.target, args.manifest, "target", dim), meta)
    truth = None
    if args.truth:
        if not args.spec:
            raise UsageError("--truth needs the --spec it was generated from")
        spec = SyntheticSpec.from_config(read_config(args.spec))
        truth = SyntheticTruth.from_config(read_config(args.truth), spec)
    report = theorem2_report(scorer, source, target, args.metric, truth=truth, n=args.n,
                             positive_min=args.positive_min, lambda_budget=args.lambda_steps,
                             seed=args.seed or 0)
    print(report.to_tsv(), end="")
    out = OutputDir(args.out, args.force)

    def body(out):
        out.write("bound.tsv", report.to_tsv())
        out.write("bound.json", report.to_json())
        return [args.checkpoint, args.source, args.target, args.truth, args.spec], args.seed, {}

    _run_in(out, "bound", vars(args), body)
    return EXIT_OK


# ----------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="listda", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"listda {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--out", required=out_required, help="output directory (created atomically)")
        p.add_argument("--force", action="store_true", help="replace an existing output directory")

    g = sub.add_parser("gen", help="generate a synthetic source/target pair")
    g.add_argument("--spec", required=True, help="synthetic spec file (key = value)")
    g.add_argument("--seed", type=int)
    common(g)

    t = sub.add_parser("train", help="train a scorer (zero_shot, item_da or list_da)")
    t.add_argument("--source", required=True)
    t.add_argument("--target")
    t.add_argument("--manifest", help="feature split sidecar")
    t.add_argument("--eval", help="labeled held-out data for the final report (default: source)")
    t.add_argument("--config", help="training options file (key = value); flags override it")
    t.add_argument("--mode", choices=["zero_shot", "item_da", "list_da"])
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--eta-rank", dest="eta_rank", type=float)
    t.add_argument("--eta-ad", dest="eta_ad", type=float)
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--loss", choices=["softmax_ce", "pairwise_logistic"])
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--decay-every", dest="decay_every", type=int)
    t.add_argument("--attention", choices=["true", "false"])
    t.add_argument("--disc-activation", choices=["relu", "tanh"])
    t.add_argument("--metric", default="ndcg,rr,map")
    t.add_argument("--cutoff", default="5,10", help="comma-separated cutoffs applied to each metric")
    t.add_argument("--grid-lambda", help="comma-separated λ values for a grid run")
    t.add_argument("--grid-eta-ad", help="comma-separated η_ad values for a grid run")
    t.add_argument("--jobs", type=int, default=1, help="parallel processes for a grid run")
    common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--manifest")
    e.add_argument("--metric", default="ndcg,rr,map")
    e.add_argument("--cutoff", default="")
    common(e, out_required=False)

    c = sub.add_parser("compare", help="paired t-test between two metric reports")
    c.add_argument("report_a")
    c.add_argument("report_b")
    c.add_argument("--metric", help="comma-separated metrics (default: all shared)")
    c.add_argument("--alpha", type=float, default=0.05)
    common(c, out_required=False)

    b = sub.add_parser("bound", help="evaluate the adaptation bound for a checkpoint")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--source", required=True)
    b.add_argument("--target", required=True)
    b.add_argument("--manifest")
    b.add_argument("--truth", help="truth.cfg written by gen")
    b.add_argument("--spec", help="spec.cfg written by gen")
    b.add_argument("--metric", default="ndcg")
    b.add_argument("--n", type=int, help="lists per domain (default: all)")
    b.add_argument("--positive-min", dest="positive_min", type=float, default=1.0)
    b.add_argument("--lambda-steps", dest="lambda_steps", type=int, default=200)
    b.add_argument("--seed", type=int)
    common(b)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare,
            "bound": cmd_bound}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericalAbort as exc:
        print(f"listda: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, FormatError, ValueError, OSError) as exc:
        print(f"listda: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

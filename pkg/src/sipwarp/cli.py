"""Command-line entry point: ``sipwarp embed`` and ``sipwarp experiment``."""

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("sipwarp")

EXPERIMENTS = ("table1", "table2", "table3")


class UsageError(Exception):
    pass


def read_config(path):
    """key=value lines; '#' starts a comment. Keys use flag names with '-' or '_'."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def _gamma_arg(text):
    if text == "median":
        return text
    try:
        g = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("gamma must be a positive number or 'median'") from None
    if not g > 0:
        raise argparse.ArgumentTypeError("gamma must be positive")
    return g


def _common(p):
    p.add_argument("--config", help="key=value file; flags given on the command line win")
    p.add_argument("--data-dir", help="dataset root (default: $SIPWARP_DATA_DIR)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP worker threads")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="sipwarp", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    e = sub.add_parser("embed", help="embed a dataset under an invariance regularizer")
    _common(e)
    e.add_argument("--dataset", choices=("idx", "multilabel", "synth"), default="idx")
    e.add_argument("--train", type=int, default=200, help="number of examples to embed")
    e.add_argument("--gamma", type=_gamma_arg, default="median")
    e.add_argument("--reg", choices=("none", "warp", "mixup", "multilabel", "transform"), default="none")
    e.add_argument("--pairs", type=int, default=None, help="mixup pairs (default: --train)")
    e.add_argument("--alpha", type=float, default=1.0, help="mixup ridge weight")
    e.add_argument("--weight", type=float, default=1.0, help="regularizer weight")
    e.add_argument("--rank", type=int, default=None, help="truncate the Nyström basis")
    e.add_argument("--multilabel-data", help="multilabel data file")
    e.add_argument("--hierarchy", help="multilabel hierarchy file")
    e.add_argument("--labels", type=int, default=10, help="label count for synthetic data")
    e.add_argument("--out", required=True, help="feature matrix (SIPMAT01); metrics go to OUT.json")

    x = sub.add_parser("experiment", help="reproduce a results table")
    _common(x)
    x.add_argument("name", choices=EXPERIMENTS)
    x.add_argument("--runs", type=int, default=10)
    x.add_argument("--dataset", default="mnist", help="mnist (tables 1-2) or synth/multilabel (table 3)")
    x.add_argument("--n", type=int, default=None, help="training size")
    x.add_argument("--p", type=int, default=None, help="mixup pairs")
    x.add_argument("--test", type=int, default=None, help="test size")
    x.add_argument("--alpha", type=float, default=None)
    x.add_argument("--weight", type=float, default=None)
    x.add_argument("--rank", type=int, default=None)
    x.add_argument("--gamma-scale", type=float, default=None, help="multiple of the median-heuristic gamma")
    x.add_argument("--multilabel-data")
    x.add_argument("--hierarchy")
    x.add_argument("--out-dir", default=".", help="directory for CSV/JSON results")
    return parser


def parse_args(argv):
    """Parse flags, letting a --config file supply defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            conf = read_config(args.config)
        except OSError as exc:
            parser.error(f"cannot read config: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for k in conf:
            if k not in known or k in ("config", "help"):
                parser.error(f"unknown config key {k!r}")
        sub.set_defaults(**{k: known[k].type(v) if known[k].type else v for k, v in conf.items()})
        args = parser.parse_args(argv)
    return args


# embed


def _load_images(args, n, rng):
    from .dataio import load_mnist

    ds = load_mnist(args.data_dir)
    if n > len(ds.images):
        raise UsageError(f"--train {n} exceeds the {len(ds.images)} available images")
    idx = np.sort(rng.permutation(len(ds.images))[:n])
    return ds.images[idx], ds.labels[idx], ds.source


def _gamma(args, X):
    from .kernelcore import median_gamma

    return median_gamma(X) if args.gamma == "median" else float(args.gamma)


def cmd_embed(args):
    from .dataio import load_multilabel, save_matrix, save_metrics, synth_hierarchical
    from .embed import batch_embed
    from .kernelcore import build_basis, nystrom_points
    from .seminorm import empty_spec

    rng = np.random.default_rng(args.seed)
    meta = {"command": "embed", **{k: v for k, v in vars(args).items() if k not in ("verbose",)}}
    images = y = T = H = None
    if args.dataset == "idx":
        images, y, source = _load_images(args, args.train, rng)
        X = images.reshape(len(images), -1)
        meta["source"] = source
    elif args.dataset == "synth":
        ds = synth_hierarchical(args.seed, args.labels, 3, args.train, 0.1)
        X, T, H = ds.features, ds.labels, ds.hierarchy
        y = ds.leaf
    else:
        if not (args.multilabel_data and args.hierarchy):
            raise UsageError("--dataset multilabel needs --multilabel-data and --hierarchy")
        md = load_multilabel(args.multilabel_data, args.hierarchy)
        from .multilabelapp import labels_to_matrix

        X, H = md.features[:args.train], md.hierarchy
        T = labels_to_matrix(md.labels[:args.train], H.m)
    basis = build_basis(X, _gamma(args, X), rank=args.rank)
    meta["gamma_value"] = basis.gamma
    meta["dim"] = basis.dim

    if args.reg in ("warp", "transform"):
        if images is None:
            raise UsageError(f"--reg {args.reg} needs an image dataset (--dataset idx)")
        from .invarianceapp import invariance_directions, invariance_spec
        from .seminorm import Mode

        Z = invariance_directions(images, basis)
        spec = invariance_spec(Z, Mode.SUM_SQ if args.reg == "warp" else Mode.MAX, args.weight)
        res = batch_embed(X, spec, basis)
        F = res.features
        meta.update(failures=res.failures, unconverged=res.unconverged)
    elif args.reg == "mixup":
        if y is None or args.dataset == "multilabel":
            raise UsageError("--reg mixup needs single-label data")
        from .mixupapp import build_family, embed_joint_all_classes, family_spec, sample_pairs

        m = int(y.max()) + 1
        p = args.train if args.pairs is None else args.pairs
        I, J = sample_pairs(len(X), p, rng)
        fam = build_family(X[I], X[J], y[I], y[J], m, basis) if p else None
        spec = family_spec(fam, args.alpha)
        Phi, conv = embed_joint_all_classes(X, spec, basis, m)
        F = Phi[np.arange(len(X)), y].T  # feature of each example at its own label
        meta.update(classes=m, pairs=p, converged=conv)
    elif args.reg == "multilabel":
        if H is None:
            raise UsageError("--reg multilabel needs --dataset synth or multilabel")
        from .multilabelapp import constraint_spec, embed_all_labels

        spec = constraint_spec(nystrom_points(X, basis), H, args.weight)
        Phi = embed_all_labels(X, spec, basis, H.m)
        F = Phi.reshape(-1, Phi.shape[2]).T  # columns ordered example-major, then label
        meta.update(labels=H.m)
    else:
        res = batch_embed(X, empty_spec(), basis)
        F = res.features
    out = Path(args.out)
    save_matrix(out, F)
    meta["shape"] = list(F.shape)
    save_metrics(out.with_name(out.name + ".json"), meta)
    print(f"wrote {F.shape[0]}x{F.shape[1]} features to {out}")
    return 0


# experiments


def _write_csv(path, rows, keys):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys)
        for r in rows:
            wr.writerow([r.get(k, "") for k in keys])


def _summary_rows(task, summary, methods):
    return [{"task": task, "method": m, "mean": f"{summary[m][0]:.6f}", "std": f"{summary[m][1]:.6f}"}
            for m in methods]


def cmd_experiment(args):
    from .dataio import load_mnist, save_metrics

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = args.name
    if name == "table1":
        from .invarianceapp import METHODS, SanityConfig, run_sanity_tasks

        ds = load_mnist(args.data_dir)
        cfg = SanityConfig(runs=args.runs, seed=args.seed)
        if args.n:
            cfg.n_train = args.n
        if args.test:
            cfg.n_test = args.test
        if args.weight is not None:
            cfg.weight_grid = (args.weight,)
        if args.gamma_scale is not None:
            cfg.gamma_scale = args.gamma_scale
        res = run_sanity_tasks(ds.images, ds.labels, cfg)
        _write_csv(out / "table1_runs.csv", res["runs"], ["run", "task", *METHODS])
        rows = [r for t, s in res["summary"].items() for r in _summary_rows(t, s, METHODS)]
    elif name == "table2":
        from .mixupapp import Table2Config, run_table2

        ds = load_mnist(args.data_dir)
        cfg = Table2Config(runs=args.runs, seed=args.seed)
        for k in ("n", "p", "rank"):
            if getattr(args, k) is not None:
                setattr(cfg, k, getattr(args, k))
        if args.p is None:
            cfg.p = cfg.n
        if args.test:
            cfg.n_test = args.test
        if args.gamma_scale is not None:
            cfg.gamma_scale = args.gamma_scale
        if args.alpha is not None:
            cfg.options.alpha = args.alpha
        res = run_table2(ds.images, ds.labels, cfg)
        _write_csv(out / "table2_runs.csv", res["runs"],
                   ["run", "Vanilla", "Embed", "vanilla_beta", "vanilla_l2", "embed_l2"])
        rows = _summary_rows(f"n={cfg.n},p={cfg.p}", res["summary"], ("Vanilla", "Embed"))
    else:
        from .dataio import load_multilabel
        from .multilabelapp import Table3Config, run_table3, write_violations_csv

        cfg = Table3Config(runs=args.runs, seed=args.seed)
        if args.n:
            cfg.n_train = args.n
        if args.test:
            cfg.n_test = args.test
        if args.weight is not None:
            cfg.options.weight = args.weight
        if args.gamma_scale is not None:
            cfg.gamma_scale = args.gamma_scale
        data = None
        if args.dataset == "multilabel":
            if not (args.multilabel_data and args.hierarchy):
                raise UsageError("table3 on multilabel data needs --multilabel-data and --hierarchy")
            data = load_multilabel(args.multilabel_data, args.hierarchy)
        elif args.dataset not in ("synth", "mnist"):
            raise UsageError(f"table3 supports --dataset synth or multilabel, not {args.dataset!r}")
        res = run_table3(cfg, data)
        keys = ["run", "ML-SVM", "Embed", "ML-SVM_implication_violations", "ML-SVM_exclusion_violations",
                "Embed_implication_violations", "Embed_exclusion_violations"]
        _write_csv(out / "table3_runs.csv", res["runs"], keys)
        if data is not None:
            last = res["runs"][-1]
            write_violations_csv(out / "table3_violations.csv",
                                 [(k, last[f"{k}_violations"], data.hierarchy) for k in ("ML-SVM", "Embed")])
        for r in res["runs"]:
            r.pop("ML-SVM_violations")
            r.pop("Embed_violations")
        rows = _summary_rows(f"{cfg.n_train}/{cfg.n_test}", res["summary"], ("ML-SVM", "Embed"))
    _write_csv(out / f"{name}_summary.csv", rows, ["task", "method", "mean", "std"])
    save_metrics(out / f"{name}.json", {"config": {k: v for k, v in vars(args).items()},
                                         "runs": res["runs"], "summary": res["summary"]})
    for r in rows:
        print(f"{r['task']:>12} {r['method']:>8}  {100 * float(r['mean']):6.2f} +- {100 * float(r['std']):5.2f}")
    return 0


def main(argv=None):
    args = parse_args(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        if args.command == "embed":
            return cmd_embed(args)
        return cmd_experiment(args)
    except UsageError as exc:
        print(f"sipwarp: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"sipwarp: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: data generation, training, sweeps, checks.

Exit codes: 0 success, 2 config/validation error, 3 runtime or numerical
error, 4 sweep finished with failed runs. Every command validates its
inputs before producing any output file.
"""
from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from . import trainer as trainer_mod
from .config import VARIANTS, RunConfig, clone_config, dump_resolved, load_config
from .errors import AmbokdError, ConfigError, ParameterError
from .trainer import BRANCHES, fmt9

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_PARTIAL = 4

OUT_ROOT_ENV = "AMBOKD_OUT_ROOT"


def _out_root() -> Path:
    return Path(os.environ.get(OUT_ROOT_ENV, "runs"))


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    digest.update(path.read_bytes())
    return digest.hexdigest()


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    _require(args.n >= 1, f"--n: must be >= 1, got {args.n}")
    _require(
        0.0 < args.positive_frac < 1.0,
        f"--positive-frac: must lie in (0, 1), got {args.positive_frac}",
    )
    _require(args.sep_a >= 0, f"--sep-a: must be >= 0, got {args.sep_a}")
    _require(args.sep_b >= 0, f"--sep-b: must be >= 0, got {args.sep_b}")
    _require(args.noise_a >= 0, f"--noise-a: must be >= 0, got {args.noise_a}")
    _require(args.noise_b >= 0, f"--noise-b: must be >= 0, got {args.noise_b}")
    _require(args.classes >= 2, f"--classes: must be >= 2, got {args.classes}")
    from .config import _parse_shape

    try:
        shape_a = _parse_shape(args.shape_a)
        shape_b = _parse_shape(args.shape_b)
        _require(len(shape_a) == 3, f"--shape-a: must be rank 3, got {args.shape_a}")
        _require(len(shape_b) == 2, f"--shape-b: must be rank 2, got {args.shape_b}")
    except ValueError as exc:
        raise ConfigError(f"--shape-a/--shape-b: {exc}") from exc
    spec = data_mod.SynthSpec(
        n_samples=args.n,
        positive_fraction=args.positive_frac,
        shape_a=shape_a,
        shape_b=shape_b,
        sep_a=args.sep_a,
        sep_b=args.sep_b,
        noise_a=args.noise_a,
        noise_b=args.noise_b,
        n_classes=args.classes,
        seed=args.seed,
    )
    ds = data_mod.generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.save(ds, out)
    print(f"wrote {out} ({len(ds)} samples, sha256 {_sha256(out)})")
    return EXIT_OK


def _config_from_args(args) -> RunConfig:
    overrides: dict[str, str] = {}
    if getattr(args, "variant", None):
        overrides["variant"] = args.variant
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = str(args.epochs)
    if getattr(args, "data", None):
        overrides["data.path"] = args.data
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set: expected key=value, got '{item}'")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    cfg = load_config(args.config, overrides)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    elif cfg.out_dir is None:
        cfg.out_dir = str(_out_root() / f"{cfg.variant}_seed{cfg.seed}")
    return cfg


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    result = trainer_mod.run_experiment(cfg)
    print(f"wrote {result.metrics_path}")
    print(f"wrote {result.checkpoint_path}")
    print(f"wrote {result.config_path}")
    return EXIT_OK


def _run_for_sweep(cfg: RunConfig):
    result = trainer_mod.run_experiment(cfg)
    final = result.reports[-1]
    return {branch: final.val[branch] for branch in BRANCHES}


def cmd_sweep(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    _require(bool(variants), "--variants: need at least one variant")
    _require(bool(seeds), "--seeds: need at least one seed")
    for v in variants:
        _require(
            v in VARIANTS,
            f"--variants: unknown variant '{v}'; valid variants: " + ", ".join(VARIANTS),
        )
    base = _config_from_args(args) if args.config else load_config(None, {})
    out_dir = Path(args.out) if args.out else _out_root() / "sweep"
    out_dir.mkdir(parents=True, exist_ok=True)

    jobs = [(variant, seed) for variant in variants for seed in seeds]

    def run_job(job):
        variant, seed = job
        cfg = clone_config(base)
        cfg.variant = variant
        cfg.seed = seed
        cfg.out_dir = str(out_dir / f"{variant}_seed{seed}")
        cfg.validate()
        try:
            return job, _run_for_sweep(cfg), None
        except (AmbokdError, OSError) as exc:
            return job, None, f"{type(exc).__name__}: {exc}"

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            outcomes = list(pool.map(run_job, jobs))
    else:
        outcomes = [run_job(job) for job in jobs]

    lines = ["variant,seed,branch,status,auc,acc,f1,precision"]
    n_failed = 0
    for (variant, seed), metrics, error in sorted(outcomes, key=lambda o: (o[0][0], o[0][1])):
        if metrics is None:
            n_failed += 1
            lines.append(f"{variant},{seed},-,failed,nan,nan,nan,nan")
            print(f"run {variant} seed {seed} failed: {error}", file=sys.stderr)
            continue
        for branch in BRANCHES:
            m = metrics[branch]
            lines.append(
                f"{variant},{seed},{branch},ok,"
                f"{fmt9(m['auc'])},{fmt9(m['acc'])},{fmt9(m['f1'])},{fmt9(m['precision'])}"
            )
    summary = out_dir / "summary.csv"
    summary.write_text("\n".join(lines) + "\n")
    print(f"wrote {summary}")
    return EXIT_PARTIAL if n_failed else EXIT_OK


def _model_from_checkpoint(args):
    cfg = load_config(args.config, {}) if args.config else load_config(None, {})
    ds = data_mod.load(args.data)
    state = trainer_mod.load_checkpoint(args.checkpoint)
    model = trainer_mod.build_model(cfg, ds, init_seed=0)
    model.load_state(state)
    return model, ds


def cmd_eval(args) -> int:
    model, ds = _model_from_checkpoint(args)
    metrics = trainer_mod.evaluate(model, ds)
    lines = ["branch,auc,acc,f1,precision"]
    for branch in BRANCHES:
        m = metrics[branch]
        line = f"{branch},{fmt9(m['auc'])},{fmt9(m['acc'])},{fmt9(m['f1'])},{fmt9(m['precision'])}"
        lines.append(line)
        print(line)
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_dump_embeddings(args) -> int:
    model, ds = _model_from_checkpoint(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer_mod.dump_embeddings(model, ds, out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _require(0.0 < args.eps <= 1e-2, f"--eps: must lie in (0, 1e-2], got {args.eps}")
    _require(args.seeds >= 1, f"--seeds: must be >= 1, got {args.seeds}")
    _require(args.tol > 0, f"--tol: must be > 0, got {args.tol}")
    if args.corrupt_block is not None:
        _require(
            args.corrupt_block in gradcheck_mod.BLOCKS,
            f"--corrupt-block: unknown block '{args.corrupt_block}'; "
            "blocks: " + ", ".join(gradcheck_mod.BLOCKS),
        )
    results = gradcheck_mod.run_suite(
        eps=args.eps, n_seeds=args.seeds, corrupt_block=args.corrupt_block
    )
    failed = []
    for block, err in results.items():
        status = "PASS" if err <= args.tol else "FAIL"
        if status == "FAIL":
            failed.append(block)
        print(f"{block}: max_rel_err={err:.3e} {status}")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ambokd",
        description="Tri-branch online distillation with adaptive modality balancing.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset file")
    p.add_argument("--n", type=int, default=2500, help="number of samples (default 2500)")
    p.add_argument("--positive-frac", type=float, default=0.29,
                   help="fraction of positive labels (default 0.29)")
    p.add_argument("--shape-a", default="3x16x16", help="image-like shape CxHxW (default 3x16x16)")
    p.add_argument("--shape-b", default="8x64", help="signal-like shape ChxT (default 8x64)")
    p.add_argument("--sep-a", type=float, default=2.0, help="class separation, modality A (default 2.0)")
    p.add_argument("--sep-b", type=float, default=1.2, help="class separation, modality B (default 1.2)")
    p.add_argument("--noise-a", type=float, default=1.0, help="noise std, modality A (default 1.0)")
    p.add_argument("--noise-b", type=float, default=1.0, help="noise std, modality B (default 1.0)")
    p.add_argument("--classes", type=int, default=2, help="number of classes (default 2)")
    p.add_argument("--seed", type=int, default=0, help="generation seed (default 0)")
    p.add_argument("--out", required=True, help="output dataset path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--variant", default=None, help="training variant (" + ", ".join(VARIANTS) + ")")
    p.add_argument("--seed", type=int, default=None, help="run seed")
    p.add_argument("--epochs", type=int, default=None, help="number of epochs")
    p.add_argument("--data", default=None, help="dataset file (otherwise synthetic per config)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run a variant x seed grid and summarize")
    p.add_argument("--variants", required=True, help="comma-separated variants")
    p.add_argument("--seeds", required=True, help="comma-separated seeds")
    p.add_argument("--config", default=None, help="base config file")
    p.add_argument("--data", default=None, help="dataset file shared by all runs")
    p.add_argument("--out", default=None, help="sweep output directory")
    p.add_argument("--epochs", type=int, default=None, help="override epochs for all runs")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--workers", type=int, default=1, help="parallel worker threads (default 1)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--config", default=None, help="config file describing the model shapes")
    p.add_argument("--out", default=None, help="optional metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable block")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    p.add_argument("--seeds", type=int, default=20, help="number of random seeds (default 20)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed (default 1e-4)")
    p.add_argument("--corrupt-block", default=None,
                   help="fault injection for testing: corrupt this block's gradient")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-embeddings", help="export per-sample branch features as CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--config", default=None, help="config file describing the model shapes")
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=cmd_dump_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AmbokdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

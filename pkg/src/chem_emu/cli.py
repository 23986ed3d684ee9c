"""``chem-emu`` command line: generate, train, eval, ablate, predict, report.

Exit codes: 0 success, 2 usage or input error, 3 runtime failure.
"""

from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
_THREADS = os.environ.get("CHEM_EMU_THREADS")
if _THREADS and _THREADS.isdigit():
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _THREADS)

import argparse  # noqa: E402
import csv  # noqa: E402
import json  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .ablation import GRIDS, run_ablation  # noqa: E402
from .config import RunConfig  # noqa: E402
from .errors import (  # noqa: E402
    ChemEmuError,
    ConfigError,
    ContractError,
    DimensionError,
    FormatError,
    ParseError,
    TrainingAborted,
)
from .kinetics import dataset as kds  # noqa: E402
from .kinetics.mechanism import demo_mechanism, load_mechanism  # noqa: E402
from .model import ModelConfig, build  # noqa: E402
from .objective import error_stats, export_error_stats, metrics, read_error_stats  # noqa: E402
from .report import heatmap_svg, loss_curve_svg, trajectory_svg, write_svg  # noqa: E402
from .train import Schedule, evaluate, load_checkpoint, read_history, train_loop, write_history  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
INPUT_ERRORS = (ConfigError, ParseError, FormatError, ContractError, DimensionError, FileNotFoundError)


class UsageError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, flush=True)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "profile", None):
        if args.config:
            raise UsageError("use either --config or --profile")
        cfg = RunConfig.from_profile(args.profile)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
    return cfg


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out DIR is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: RunConfig, out: Path) -> None:
    (out / "config.txt").write_text(cfg.dump(), encoding="utf-8")


def _load_split(data: Path, split: str) -> kds.ChemDataset:
    path = data / f"{split}.cnne"
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    return kds.read_dataset(path)


def _schedule(cfg: RunConfig) -> Schedule:
    s = cfg.section("train")
    s.pop("max_samples")
    return Schedule(**s)


def model_config(cfg: RunConfig, ds: kds.ChemDataset) -> ModelConfig:
    values = cfg.section("model")
    shape = {"n_in": ds.n_in, "n_env": ds.env.shape[1], "n_out": ds.n_out, "n_steps": ds.n_steps}
    for key, actual in shape.items():
        if values[key] is not None and values[key] != actual:
            raise ConfigError(f"model.{key} = {values[key]} but the dataset has {actual}")
        values[key] = actual
    return ModelConfig(**values)


def _limit(ds: kds.ChemDataset, n: int) -> kds.ChemDataset:
    return ds.subset(np.arange(min(n, ds.n_samples))) if n > 0 else ds


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args)
    mech_name = cfg["data.mechanism"]
    if mech_name == "demo":
        mech = demo_mechanism()
    else:
        if not Path(mech_name).is_file():
            raise FileNotFoundError(f"mechanism file not found: {mech_name}")
        mech = load_mechanism(mech_name)
    plan = kds.plan_by_name(
        cfg["data.plan"],
        t_end=cfg["data.t_end"],
        n_steps=cfg["data.n_steps"],
        significance=cfg["data.significance"],
        jitter=cfg["data.jitter"],
    )
    seed = cfg["train.seed"]
    corpus = kds.simulate_plan(mech, plan, np.random.default_rng(seed), workers=cfg["data.workers"])
    failed = sorted(corpus.errors)
    manifest = {
        "task": cfg["data.task"],
        "seed": seed,
        "mechanism": mech_name,
        "plan": cfg["data.plan"],
        "grid_samples": plan.n_samples,
        "failed": {str(i): corpus.errors[i] for i in failed},
    }
    if len(failed) > cfg["data.max_failures"] * plan.n_samples:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        _say(f"{len(failed)} of {plan.n_samples} simulations failed (limit {cfg['data.max_failures']:.0%}); see manifest.json")
        return EXIT_RUNTIME
    splits = kds.assemble(corpus, cfg["data.task"])
    for name, ds in splits.items():
        kds.write_dataset(ds, out / f"{name}.cnne")
    ref = splits["train"]
    manifest.update(
        counts={name: ds.n_samples for name, ds in splits.items()},
        norm=ref.meta.to_dict(),
        in_species=ref.in_species,
        out_species=ref.out_species,
        n_steps=ref.n_steps,
        t_end=ref.t_end,
    )
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _echo(cfg, out)
    _say(f"wrote {', '.join(f'{k}={v}' for k, v in manifest['counts'].items())} samples to {out}")
    for i in failed:
        _say(f"skipped sample {i}: {corpus.errors[i]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if not args.data:
        raise UsageError("--data DIR is required")
    data = Path(args.data)
    train = _limit(_load_split(data, "train"), cfg["train.max_samples"])
    val_path = data / "val.cnne"
    val = kds.read_dataset(val_path) if val_path.is_file() else None
    mcfg = model_config(cfg, train)
    weights = cfg.loss_weights()
    schedule = _schedule(cfg)
    resume = None
    if args.checkpoint:
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        resume = load_checkpoint(args.checkpoint)
        if resume.model_config != mcfg:
            raise ConfigError("checkpoint model configuration differs from the run configuration")
    out = _out_dir(args)
    _echo(cfg, out)
    model = build(mcfg, schedule.seed)
    run_meta = {
        "norm": train.meta.to_dict() if train.meta else None,
        "in_species": train.in_species,
        "out_species": train.out_species,
        "t_end": train.t_end,
        "task": train.task,
    }
    log = lambda row: _say(  # noqa: E731
        f"iter {row['iter']}: loss {row['loss_total']:.5g}"
        + (f", val RMSE {row['val_rmse']:.5f}" if "val_rmse" in row else "")
    )
    result = train_loop(model, train, weights, schedule, val=val, out_dir=out, resume=resume, run_meta=run_meta, log=log)
    write_history(result.history, out / "history.csv")
    final = evaluate(model, val) if val is not None and val.n_samples else evaluate(model, train)
    which = "val" if val is not None and val.n_samples else "train"
    _say(f"final {which} metrics: RMSE {final.rmse:.6f}  MAE {final.mae:.6f}  MBE {final.mbe:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.data:
        raise UsageError("--data DIR is required")
    out = _out_dir(args)
    truth = _load_split(Path(args.data), args.split)
    if args.pred:
        pred_ds = kds.read_dataset(args.pred)
        if pred_ds.traj.shape != truth.traj.shape:
            raise DimensionError(f"predictions {pred_ds.traj.shape} do not match truth {truth.traj.shape}")
        pred = pred_ds.traj
    else:
        if not args.checkpoint:
            raise UsageError("--checkpoint PATH (or --pred FILE) is required")
        if not Path(args.checkpoint).is_file():
            raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
        model = load_checkpoint(args.checkpoint).model()
        cfg = model.config
        if (truth.n_in, truth.n_out, truth.n_steps) != (cfg.n_in, cfg.n_out, cfg.n_steps):
            raise ConfigError("checkpoint and dataset shapes differ")
        pred = np.concatenate([model.predict(truth.x0[i : i + 256], truth.env[i : i + 256]) for i in range(0, truth.n_samples, 256)])
    mt = metrics(pred, truth.traj)
    stats = error_stats(pred, truth.traj)
    names = truth.out_species or [f"s{i}" for i in range(truth.n_out)]
    export_error_stats(stats, out / "error_stats.csv", names)
    k = args.worst_k
    with open(out / "worst_species.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "species_index", "species_name", "rms_err"])
        for rank, (i, name, score) in enumerate(stats.worst_species(k, names), start=1):
            w.writerow([rank, i, name, repr(score)])
    with open(out / "sample_traj.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "t_minutes", "species", "truth", "pred"])
        times = truth.times()
        for b in range(min(truth.n_samples, 8)):
            for t in range(truth.n_steps):
                for s, name in enumerate(names):
                    w.writerow([b, repr(float(times[t])), name, repr(float(truth.traj[b, t, s])), repr(float(pred[b, t, s]))])
    result = {"split": args.split, "n_samples": truth.n_samples, "rmse": mt.rmse, "mae": mt.mae, "mbe": mt.mbe}
    (out / "metrics.json").write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    _say(f"{args.split}: MAE {mt.mae:.6f}  RMSE {mt.rmse:.6f}  MBE {mt.mbe:.6f}  (n={truth.n_samples})")
    _say("worst species: " + ", ".join(f"{n} ({s:.4f})" for _, n, s in stats.worst_species(k, names)))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if not args.data:
        raise UsageError("--data DIR is required")
    if args.grid not in GRIDS:
        raise UsageError(f"--grid must be one of {', '.join(GRIDS)}")
    data = Path(args.data)
    train = _limit(_load_split(data, "train"), cfg["train.max_samples"])
    val = _load_split(data, "val")
    base = model_config(cfg, train)
    out = _out_dir(args)
    _echo(cfg, out)
    rows = run_ablation(args.grid, base, cfg.loss_weights(), _schedule(cfg), train, val, log=_say)
    path = out / f"ablation_{args.grid}.csv"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "row", "label", "val_rmse", "val_mae", "val_mbe"])
        for r in sorted(rows, key=lambda r: r.rank):
            w.writerow([r.rank, r.index, r.label, repr(r.val_rmse), repr(r.val_mae), repr(r.val_mbe)])
    _say(f"{'rank':>4}  {'configuration':<22} {'val RMSE':>10} {'val MAE':>10} {'val MBE':>10}")
    for r in sorted(rows, key=lambda r: r.rank):
        _say(f"{r.rank:>4}  {r.label:<22} {r.val_rmse:>10.5f} {r.val_mae:>10.5f} {r.val_mbe:>10.5f}")
    return EXIT_OK


def _read_table(path: str, what: str) -> tuple[list[str], np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} file not found: {path}")
    with open(p, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{what} file {path} is empty", 1)
    header = [h.strip() for h in rows[0]]
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{what}: expected {len(header)} columns, got {len(row)}", lineno)
        try:
            values.append([float(c) for c in row])
        except ValueError:
            raise ParseError(f"{what}: non-numeric value in row", lineno) from None
    if not values:
        raise ParseError(f"{what} file {path} has no data rows", 2)
    return header, np.array(values)


def cmd_predict(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint PATH is required")
    if not args.x0 or not args.env:
        raise UsageError("--x0 CSV and --env CSV are required")
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ck = load_checkpoint(args.checkpoint)
    if not ck.config.get("norm"):
        raise ContractError("checkpoint carries no normalization metadata")
    meta = kds.NormMeta.from_dict(ck.config["norm"])
    in_species = ck.config.get("in_species") or []
    out_species = ck.config.get("out_species") or [f"s{i}" for i in range(ck.model_config.n_out)]
    x_head, x0 = _read_table(args.x0, "x0")
    e_head, env = _read_table(args.env, "env")
    if in_species and x_head != in_species:
        raise ParseError(f"x0 header must list {', '.join(in_species)}", 1)
    if env.shape[1] != ck.model_config.n_env:
        raise ParseError(f"env file needs {ck.model_config.n_env} columns", 1)
    if len(x0) != len(env):
        raise ParseError(f"x0 has {len(x0)} rows but env has {len(env)}", 1 + min(len(x0), len(env)) + 1)
    for i, row in enumerate(x0, start=2):
        if np.any(row < 0):
            raise ParseError("negative concentration", i)
    model = ck.model()
    pred = model.predict(kds.f32(kds.normalize(x0, meta)), kds.f32(kds.normalize_env(env, meta)))
    denorm = kds.denormalize(pred, meta)
    T = ck.model_config.n_steps
    times = kds.output_times(float(ck.config.get("t_end", 55.0)), T)
    out = _out_dir(args)
    path = out / "prediction.csv"
    multi = len(x0) > 1
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["sample"] if multi else []) + ["t_minutes", *out_species])
        for b in range(len(x0)):
            for t in range(T):
                w.writerow(([b] if multi else []) + [repr(float(times[t]))] + [repr(float(v)) for v in denorm[b, t]])
    _say(f"wrote {len(x0) * T} rows to {path}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.out or ".")
    if not run.is_dir():
        raise FileNotFoundError(f"run directory not found: {run}")
    cfg = _config(args)
    made = []
    if (run / "history.csv").is_file():
        made.append(write_svg(run / "loss_curve.svg", loss_curve_svg(read_history(run / "history.csv"))))
    if (run / "error_stats.csv").is_file():
        stats, names = read_error_stats(run / "error_stats.csv")
        made.append(write_svg(run / "mean_heatmap.svg", heatmap_svg(stats.mean, names, "Mean of signed errors", diverging=True)))
        made.append(write_svg(run / "variance_heatmap.svg", heatmap_svg(stats.variance, names, "Variance of errors")))
    if (run / "sample_traj.csv").is_file():
        with open(run / "sample_traj.csv", encoding="utf-8") as fh:
            recs = list(csv.DictReader(fh))
        wanted = set(cfg["report.species"])
        samples = [int(s) for s in cfg["report.samples"]]
        for b in samples:
            rows = [r for r in recs if int(r["sample"]) == b and (not wanted or r["species"] in wanted)]
            if not rows:
                continue
            names = list(dict.fromkeys(r["species"] for r in rows))
            times = sorted({float(r["t_minutes"]) for r in rows})
            ti = {t: i for i, t in enumerate(times)}
            truth = np.full((len(times), len(names)), np.nan)
            pred = truth.copy()
            for r in rows:
                i, s = ti[float(r["t_minutes"])], names.index(r["species"])
                truth[i, s], pred[i, s] = float(r["truth"]), float(r["pred"])
            made.append(write_svg(run / f"trajectories_{b}.svg", trajectory_svg(times, truth, pred, names, f"Sample {b}")))
    if not made:
        raise FileNotFoundError(f"no history.csv, error_stats.csv or sample_traj.csv in {run}")
    for p in made:
        _say(f"wrote {p}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chem-emu", description="Train and evaluate a neural emulator of chemical kinetics.")
    parser.add_argument("command", choices=list(COMMANDS))
    parser.add_argument("--config", help="run configuration file (key = value)")
    parser.add_argument("--profile", help="named configuration profile (demo, paper-defaults, smoke)")
    parser.add_argument("--seed", type=int, help="overrides train.seed")
    parser.add_argument("--out", help="output directory (run directory for report)")
    parser.add_argument("--data", help="dataset directory with train/val/test .cnne files")
    parser.add_argument("--checkpoint", help="checkpoint to evaluate, predict with, or resume from")
    parser.add_argument("--grid", choices=GRIDS, default="components")
    parser.add_argument("--split", choices=kds.SPLITS, default="val")
    parser.add_argument("--x0", help="predict: CSV of initial concentrations (header = input species)")
    parser.add_argument("--env", help="predict: CSV of temperature, relative_humidity, radiation")
    parser.add_argument("--pred", help="eval: CNNE1 file holding predictions instead of a checkpoint")
    parser.add_argument("--worst-k", dest="worst_k", type=int, default=5)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"chem-emu: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except INPUT_ERRORS as exc:
        print(f"chem-emu: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingAborted as exc:
        print(f"chem-emu: training aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ChemEmuError, ArithmeticError, RuntimeError) as exc:
        print(f"chem-emu: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``lrdecay <subcommand> ...``.

Every subcommand accepts ``--config FILE.json``. Keys in the file use the flag
names with dashes turned into underscores; flags given on the command line
override file values. A run manifest (or its ``resolved_config`` block) is a
valid config file, so any run can be replayed from its echo.

Exit codes: 0 success, 2 usage, 3 validation, 4 divergence (outputs written).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, edma, ndgrad, ps10, spectrum, trainer, transfer
from .autodecay import TRACE_COLUMNS, AutoDecayConfig
from .errors import LrDecayError, ValidationError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_DIVERGED = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _floats(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format (sha1 over ``"blob <len>\\0" + data``)."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _array_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _write_json(obj, path):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def write_manifest(path, args: dict, resolved: dict, seed, hashes: dict, **extra):
    manifest = {
        "args": args,
        "resolved_config": resolved,
        "seed": seed,
        "content_hashes": hashes,
        "version": __version__,
        **extra,
    }
    _write_json(manifest, path)
    return manifest


# ---------------------------------------------------------------- config ---

DATA_DEFAULTS = {
    "data": None,
    "classes": 10,
    "simple": 10,
    "complex": 100,
    "total": 10000,
    "noise": 0.0,
    "noise_source": "fresh",
    "height": 32,
    "width": 32,
    "test_total": 2000,
    "seed": 0,
}

DEFAULTS = {
    "gen-ps10": {**DATA_DEFAULTS, "split": "train", "output": "ps10.bin"},
    "train": {
        **DATA_DEFAULTS,
        "eval_data": None,
        "hidden": "64,64",
        "schedule": "step",
        "lr": 0.1,
        "milestones": "",
        "factor": 10.0,
        "epochs": 100,
        "batch_size": 128,
        "optimizer": "sgd",
        "seeds": None,
        "jobs": 1,
        "beta": 0.9,
        "window": 10,
        "eta_tol": 0.02,
        "zeta": 0.9,
        "eps": 1e-8,
        "decay_factor": 10.0,
        "min_lr": 1e-5,
        "inject_constant_loss": None,
        "output": "run",
    },
    "spectrum": {
        **DATA_DEFAULTS,
        "hidden": "64,64",
        "snapshot": None,
        "k": 5,
        "max_iters": 1000,
        "tol": 1e-6,
        "history": None,
        "output": "-",
    },
    "quadratic": {"eigs": None, "lr": None, "steps": 100, "init": None, "trajectory": None, "output": "-"},
    "transfer": {"accs": None, "source": None, "format": "json", "output": "-"},
    "edma-sim": {"beta": 0.9, "trials": 100000, "steps": 100, "sigma2": 1.0, "seed": 0, "output": "-"},
    "plot": {"csv": None, "x": None, "y": None, "labels": None, "title": None, "output": "plot.svg"},
}


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then ``--config`` file values, then explicit flags."""
    explicit = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "func")}
    resolved = dict(DEFAULTS[command])
    cfg_path = getattr(ns, "config", None)
    if cfg_path:
        try:
            loaded = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {cfg_path}: {exc}") from None
        if isinstance(loaded, dict) and "resolved_config" in loaded:
            loaded = loaded["resolved_config"]
        if not isinstance(loaded, dict):
            raise ValidationError("config file must hold a JSON object")
        unknown = set(loaded) - set(resolved)
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {sorted(unknown)}")
        resolved.update(loaded)
    resolved.update(explicit)
    return resolved


def _spec_from(cfg: dict) -> ps10.Ps10Spec:
    return ps10.Ps10Spec(
        num_classes=int(cfg["classes"]),
        simple_per_class=int(cfg["simple"]),
        complex_per_class=int(cfg["complex"]),
        examples_total=int(cfg["total"]),
        noise_fraction=float(cfg["noise"]),
        noise_source=cfg["noise_source"],
        height=int(cfg["height"]),
        width=int(cfg["width"]),
        test_total=int(cfg["test_total"]),
        seed=int(cfg["seed"]),
    )


def _training_data(cfg: dict):
    if cfg.get("data"):
        data = ps10.load(cfg["data"])
    else:
        data = ps10.generate(_spec_from(cfg), "train")
    return data


def _hidden(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(_ints(text))


# ----------------------------------------------------------- subcommands ---

def cmd_gen_ps10(cfg: dict) -> int:
    spec = _spec_from(cfg)
    data = ps10.generate(spec, cfg["split"])
    out = Path(cfg["output"])
    ps10.save(data, out)
    side = ps10.write_sidecar(data, out.with_suffix(out.suffix + ".json"), data_path=out)
    write_manifest(
        out.with_suffix(out.suffix + ".manifest.json"),
        cfg,
        cfg,
        spec.seed,
        {"dataset": git_blob_hash(out.read_bytes())},
    )
    print(json.dumps({"output": str(out), "counts": side["counts"], "complexity_bits": side["complexity_bits"]}))
    return EXIT_OK


def _schedule(cfg: dict):
    kind = cfg["schedule"]
    lr = float(cfg["lr"])
    if kind == "constant":
        return trainer.Constant(lr)
    if kind == "step":
        ms = cfg["milestones"]
        ms = _ints(ms) if isinstance(ms, str) else [int(m) for m in ms]
        return trainer.Step(lr, tuple(ms), float(cfg["factor"]))
    if kind == "auto":
        ad = AutoDecayConfig(
            beta=float(cfg["beta"]),
            window_w=int(cfg["window"]),
            eta_tol=float(cfg["eta_tol"]),
            zeta=float(cfg["zeta"]),
            eps=float(cfg["eps"]),
            decay_factor=float(cfg["decay_factor"]),
            min_lr=float(cfg["min_lr"]),
        )
        return trainer.Auto(ad, lr)
    raise UsageError(f"unknown schedule {kind!r}")


def _train_one(cfg: dict, seed: int, outdir: Path) -> str:
    """One training run into ``outdir``; returns the termination status."""
    cfg = {**cfg, "seed": seed}
    data = _training_data(cfg)
    if cfg.get("eval_data"):
        eval_data = ps10.load(cfg["eval_data"])
    elif cfg.get("data"):
        eval_data = ps10.generate(data.spec, "test")
    else:
        eval_data = ps10.generate(_spec_from(cfg), "test")
    if len(eval_data) == 0:
        eval_data = None
    model = ndgrad.MlpConfig(
        input_dim=data.features.shape[1], hidden_dims=_hidden(cfg["hidden"]), num_classes=data.spec.num_classes,
        init_seed=seed,
    )
    tcfg = trainer.TrainConfig(
        _schedule(cfg),
        epochs=int(cfg["epochs"]),
        optimizer=cfg["optimizer"],
        batch_size=int(cfg["batch_size"]),
        seed=seed,
    )
    injector = None
    if cfg.get("inject_constant_loss") is not None:
        value = float(cfg["inject_constant_loss"])

        def injector(epoch, loss):
            return value

    result = trainer.train(model, data, tcfg, eval_data=eval_data, loss_injector=injector)

    outdir.mkdir(parents=True, exist_ok=True)
    trainer.write_metrics_csv(result, outdir / "metrics.csv")
    snapdir = outdir / "snapshots"
    snapdir.mkdir(exist_ok=True)
    snap_files = []
    for snap in result.snapshots:
        name = f"stage{snap.stage}_epoch{snap.epoch}.npy"
        trainer.save_snapshot(snap, snapdir / name)
        snap_files.append(name)
    if result.trace:
        with open(outdir / "trace.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
            w.writeheader()
            w.writerows(result.trace)
    hashes = {"dataset": git_blob_hash(data.to_bytes()), "metrics": git_blob_hash((outdir / "metrics.csv").read_bytes())}
    if eval_data is not None:
        hashes["eval_dataset"] = git_blob_hash(eval_data.to_bytes())
    write_manifest(
        outdir / "manifest.json",
        cfg,
        {**cfg, "seeds": None, "jobs": 1},
        seed,
        hashes,
        termination=result.termination,
        model=model.to_dict(),
        train_config=tcfg.to_dict(),
        snapshots=snap_files,
    )
    return result.termination


def _train_job(payload):
    cfg, seed, outdir = payload
    return _train_one(cfg, seed, Path(outdir))


def cmd_train(cfg: dict) -> int:
    _schedule(cfg)  # fail fast on bad schedule settings
    out = Path(cfg["output"])
    if cfg.get("seeds") in (None, ""):
        statuses = [_train_one(cfg, int(cfg["seed"]), out)]
    else:
        seeds = _ints(cfg["seeds"]) if isinstance(cfg["seeds"], str) else [int(s) for s in cfg["seeds"]]
        jobs = [(cfg, s, str(out / f"seed{s}")) for s in seeds]
        if int(cfg["jobs"]) > 1:
            with ProcessPoolExecutor(max_workers=int(cfg["jobs"])) as pool:
                statuses = list(pool.map(_train_job, jobs))
        else:
            statuses = [_train_job(j) for j in jobs]
    for s in statuses:
        print(s)
    return EXIT_DIVERGED if trainer.DIVERGED in statuses else EXIT_OK


def cmd_spectrum(cfg: dict) -> int:
    data = _training_data(cfg)
    model = ndgrad.MlpConfig(
        input_dim=data.features.shape[1], hidden_dims=_hidden(cfg["hidden"]), num_classes=data.spec.num_classes,
        init_seed=int(cfg["seed"]),
    )
    if cfg.get("snapshot"):
        params = trainer.load_snapshot(cfg["snapshot"], model)
    else:
        params = ndgrad.init_params(model)
    op = ndgrad.HvpOperator(model, params, data.features, data.labels)
    rep = spectrum.top_k_eigs(op, int(cfg["k"]), max_iters=int(cfg["max_iters"]), tol=float(cfg["tol"]),
                              seed=int(cfg["seed"]))
    report = {
        "eigenvalues": rep.eigenvalues,
        "intervals": [None if iv is None else list(iv) for iv in rep.intervals],
        "residuals": rep.residuals,
        "iterations_used": rep.iterations_used,
        "converged": rep.converged,
        "model_hash": _array_hash(params),
        "batch_hash": _array_hash(data.features, data.labels),
    }
    _write_json(report, cfg["output"])
    if cfg.get("history"):
        with open(cfg["history"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eigen_index", "iteration", "rayleigh"])
            for i, hist in enumerate(rep.rayleigh_history):
                for j, theta in enumerate(hist, start=1):
                    w.writerow([i, j, repr(theta)])
    return EXIT_OK


def cmd_quadratic(cfg: dict) -> int:
    if cfg.get("eigs") is None or cfg.get("lr") is None:
        raise UsageError("quadratic needs --eigs and --lr")
    eigs = _floats(cfg["eigs"]) if isinstance(cfg["eigs"], str) else [float(x) for x in cfg["eigs"]]
    init = cfg.get("init")
    if isinstance(init, str):
        init = _floats(init)
    spec = spectrum.QuadraticSpec(tuple(eigs), None if init is None else tuple(init))
    rep = spectrum.simulate_quadratic_gd(spec, float(cfg["lr"]), int(cfg["steps"]))
    out = rep.to_dict()
    out["eigenvalues"] = list(spec.eigenvalues)
    out["intervals"] = [list(spectrum.convergence_interval(lam)) for lam in spec.eigenvalues]
    with np.errstate(all="ignore"):
        out["final"] = [x if math.isfinite(x) else str(x) for x in out["final"]]
    _write_json(out, cfg["output"])
    if cfg.get("trajectory"):
        with open(cfg["trajectory"], "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", *[f"c{i}" for i in range(len(eigs))]])
            for k, row in enumerate(rep.coefficients):
                w.writerow([k, *[repr(float(x)) for x in row]])
    return EXIT_OK


def cmd_transfer(cfg: dict) -> int:
    accs = Path(cfg["accs"]) if cfg.get("accs") else transfer.reference_accuracies()
    if not accs.exists():
        raise ValidationError(f"no such file: {accs}")
    report = transfer.compute_table(accs, cfg.get("source"))
    text = report.to_markdown() + "\n" if cfg["format"] == "markdown" else report.to_json() + "\n"
    if cfg["output"] in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(cfg["output"]).write_text(text)
    return EXIT_OK


def cmd_edma_sim(cfg: dict) -> int:
    ts, pred, emp, _ = edma.simulate_variance(
        float(cfg["beta"]), int(cfg["steps"]), int(cfg["trials"]), sigma2=float(cfg["sigma2"]), seed=int(cfg["seed"])
    )
    rows = [["t", "predicted", "empirical"]] + [[int(t), repr(float(p)), repr(float(e))] for t, p, e in zip(ts, pred, emp)]
    if cfg["output"] in (None, "-"):
        csv.writer(sys.stdout, lineterminator="\n").writerows(rows)
    else:
        with open(cfg["output"], "w", newline="") as fh:
            csv.writer(fh).writerows(rows)
    return EXIT_OK


FIG8_PANELS = ("train_loss", "total_acc", "simple_acc", "complex_acc")


def _read_numeric_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise UsageError(f"{path}: no data rows")
    header, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(header):
        vals = []
        for r in body:
            cell = r[j].strip() if j < len(r) else ""
            if cell == "":
                vals.append(math.nan)
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                vals = None
                break
        cols[name] = None if vals is None else np.array(vals)
    return header, cols


def cmd_plot(cfg: dict) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = cfg.get("csv") or []
    if isinstance(paths, str):
        paths = [paths]
    if not paths:
        raise UsageError("plot needs at least one CSV")
    tables = [_read_numeric_csv(p) for p in paths]
    labels = cfg.get("labels")
    if isinstance(labels, str):
        labels = labels.split(",")
    labels = labels or [Path(p).parent.name + "/" + Path(p).stem if len(paths) > 1 else Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise UsageError("need one label per CSV")

    header = tables[0][0]
    x = cfg.get("x") or header[0]
    ys = cfg.get("y")
    if isinstance(ys, str):
        ys = ys.split(",")
    if not ys:
        ys = list(FIG8_PANELS) if all(c in header for c in FIG8_PANELS) else [c for c in header if c != x]
    for (_, cols), path in zip(tables, paths):
        for name in [x, *ys]:
            if name not in cols:
                raise UsageError(f"{path}: no column {name!r}")
            if cols[name] is None:
                raise UsageError(f"{path}: column {name!r} is not numeric")

    plt.rcParams["svg.hashsalt"] = "lrdecay"
    plt.rcParams["svg.fonttype"] = "none"
    n = len(ys)
    ncols = 2 if n > 1 else 1
    nrows = math.ceil(n / ncols)
    fig, axes = plt.subplots(nrows, ncols, figsize=(5 * ncols, 3.2 * nrows), squeeze=False)
    for ax, name in zip(axes.flat, ys):
        for (_, cols), label in zip(tables, labels):
            ax.plot(cols[x], cols[name], label=label, linewidth=1.2)
        ax.set_xlabel(x)
        ax.set_title(name)
        if len(tables) > 1:
            ax.legend(fontsize="small")
    for ax in list(axes.flat)[n:]:
        ax.set_visible(False)
    if cfg.get("title"):
        fig.suptitle(cfg["title"])
    fig.tight_layout()
    fig.savefig(cfg["output"], format="svg", metadata={"Date": None})
    plt.close(fig)
    return EXIT_OK


COMMANDS = {
    "gen-ps10": cmd_gen_ps10,
    "train": cmd_train,
    "spectrum": cmd_spectrum,
    "quadratic": cmd_quadratic,
    "transfer": cmd_transfer,
    "edma-sim": cmd_edma_sim,
    "plot": cmd_plot,
}


# ---------------------------------------------------------------- parser ---

def _data_flags(p):
    p.add_argument("--data", help="existing PS10 file (otherwise one is generated)")
    p.add_argument("--classes", type=int)
    p.add_argument("--simple", type=int, help="simple patterns per class")
    p.add_argument("--complex", type=int, help="complex patterns per class")
    p.add_argument("--total", type=int, help="training examples")
    p.add_argument("--noise", type=float, help="label-noise fraction")
    p.add_argument("--noise-source", choices=ps10.NOISE_SOURCES)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--test-total", type=int)
    p.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lrdecay", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", default=None, help="JSON config (flags override it)")
        return p

    p = add("gen-ps10", "generate a PS10 dataset file plus JSON sidecar")
    _data_flags(p)
    p.add_argument("--split", choices=["train", "test"])
    p.add_argument("-o", "--output")

    p = add("train", "train the MLP on PS10 and write metrics, snapshots and a manifest")
    _data_flags(p)
    p.add_argument("--eval-data")
    p.add_argument("--hidden", help="comma-separated hidden widths")
    p.add_argument("--schedule", choices=["constant", "step", "auto"])
    p.add_argument("--lr", type=float)
    p.add_argument("--milestones", help="comma-separated epochs (step schedule)")
    p.add_argument("--factor", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--optimizer", choices=["sgd", "gd"])
    p.add_argument("--seeds", help="comma-separated seeds; one sub-directory per seed")
    p.add_argument("--jobs", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--eta-tol", type=float)
    p.add_argument("--zeta", type=float)
    p.add_argument("--eps", type=float)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--inject-constant-loss", type=float,
                   help="test mode: feed this loss to the AutoDecay controller instead of the real one")
    p.add_argument("-o", "--output", help="output directory")

    p = add("spectrum", "top-k Hessian eigenvalues of the training loss")
    _data_flags(p)
    p.add_argument("--hidden")
    p.add_argument("--snapshot", help=".npy ParamVector (default: fresh initialisation)")
    p.add_argument("-k", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--history", help="CSV of per-iteration Rayleigh quotients")
    p.add_argument("-o", "--output")

    p = add("quadratic", "closed-form GD on a diagonal quadratic")
    p.add_argument("--eigs")
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--init")
    p.add_argument("--trajectory", help="CSV of per-step coefficients")
    p.add_argument("-o", "--output")

    p = add("transfer", "transferability ratios from a per-stage accuracy CSV")
    p.add_argument("--accs", help="accuracy CSV (default: the shipped table)")
    p.add_argument("--source")
    p.add_argument("--format", choices=["json", "markdown"])
    p.add_argument("-o", "--output")

    p = add("edma-sim", "Monte Carlo check of the smoothed-loss variance")
    p.add_argument("--beta", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--sigma2", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output")

    p = add("plot", "SVG line charts from emitted CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--x")
    p.add_argument("--y", help="comma-separated columns (default: four metric panels)")
    p.add_argument("--labels", help="comma-separated legend labels")
    p.add_argument("--title")
    p.add_argument("-o", "--output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (LrDecayError, ValueError, OSError) as exc:
        print(f"lrdecay {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())

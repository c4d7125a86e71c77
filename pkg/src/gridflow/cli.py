"""Command-line entry point: ``gridflow {gen-data,train,sample,eval,downstream}``.

Every option can come from ``--config FILE`` (a JSON object, or a manifest written
by an earlier run); flags given on the command line win.  Each successful run
writes ``<output>.manifest.json`` holding the resolved configuration, library
versions and output digests, and passing that manifest back through ``--config``
repeats the run byte for byte.

Exit codes: 0 success, 2 usage error, 3 file or data error, 4 numerical abort.
Failures print one ``gridflow-error`` line on stderr and leave no output files.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
from pathlib import Path

import numpy as np
import scipy

from . import __version__, datagen, diffusion, evaluate
from .grid import CaseFormatError, load_case, parse_case, read_case_text

log = logging.getLogger("gridflow")

DEFAULT_LAMBDA = {"case5": 1e-2, "case24": 1e-4, "case118": 5e-4}

DEFAULTS = {
    "gen-data": {"n": 1000, "threads": 1, "shunts": False},
    "train": {"steps": 30000, "batch_size": 128, "lr": 1e-3, "hidden": None, "embed_dim": 32,
              "T": 1000, "beta_1": 1e-4, "beta_T": 2e-2, "loss_out": None, "case": None},
    "sample": {"n": 1000, "lambda": None, "mode": "exact-vjp", "inequalities": True, "clip": True,
               "chunk_size": 256, "threads": 1, "case": None},
    "eval": {"bins": 50, "n": None},
    "downstream": {"steps": 3000},
}


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str, **fields):
        super().__init__(message)
        self.code, self.kind, self.fields = code, kind, fields


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(2, "usage", message)


def _hidden(text: str) -> list[int]:
    try:
        widths = [int(w) for w in text.split(",") if w]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not widths or min(widths) < 1:
        raise argparse.ArgumentTypeError("hidden widths must be positive")
    return widths


def _source(text: str) -> tuple[str, str]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {text!r}")
    return name, path


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gridflow", description=__doc__.splitlines()[0],
                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config or manifest; flags override it")
        p.add_argument("--seed", type=int, help="random seed (falls back to $GRIDFLOW_SEED, then 0)")
        p.add_argument("--quiet", action="store_true", help="only log warnings")

    p = sub.add_parser("gen-data", help="solve sampled load scenarios into a ground-truth dataset",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--case", help="bundled case name or case-file path")
    p.add_argument("--n", type=int, help="number of records")
    p.add_argument("--out", help="output dataset CSV")
    p.add_argument("--norm-out", help="also write min/max normalisation statistics")
    p.add_argument("--threads", type=int)
    p.add_argument("--shunts", action="store_true", help="keep bus shunts from the case file")

    p = sub.add_parser("train", help="fit the two decoupled denoisers", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--data", help="training dataset CSV")
    p.add_argument("--case", help="case the data belongs to (stored in the checkpoint)")
    p.add_argument("--out", help="output checkpoint")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--hidden", type=_hidden, help="comma-separated hidden widths")
    p.add_argument("--embed-dim", dest="embed_dim", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--beta-1", dest="beta_1", type=float)
    p.add_argument("--beta-T", dest="beta_T", type=float)
    p.add_argument("--loss-out", dest="loss_out", help="write the loss trace as CSV")

    p = sub.add_parser("sample", help="draw synthetic records", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--case", help="override the case stored in the checkpoint")
    p.add_argument("--n", type=int)
    p.add_argument("--out", help="output dataset CSV")
    p.add_argument("--lambda", dest="lambda", type=float, help="guidance scale; 0 disables guidance")
    p.add_argument("--mode", choices=["exact-vjp", "approximate"])
    p.add_argument("--no-inequalities", dest="inequalities", action="store_false")
    p.add_argument("--no-clip", dest="clip", action="store_false",
                   help="do not clamp the clean estimate to the normalised data range")
    p.add_argument("--chunk-size", dest="chunk_size", type=int)
    p.add_argument("--threads", type=int)

    p = sub.add_parser("eval", help="Wasserstein distance and mismatch statistics",
                       argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--real", help="ground-truth dataset CSV")
    p.add_argument("--syn", help="synthetic dataset CSV")
    p.add_argument("--case", help="bundled case name or case-file path")
    p.add_argument("--out-dir", dest="out_dir", help="report directory")
    p.add_argument("--bins", type=int)
    p.add_argument("--n", type=int, help="use the first n rows of each dataset")

    p = sub.add_parser("downstream", help="warm-start predictor comparison", argument_default=argparse.SUPPRESS)
    common(p)
    p.add_argument("--train", action="append", type=_source, help="NAME=PATH training source (repeatable)")
    p.add_argument("--test", help="held-out ground-truth CSV")
    p.add_argument("--case", help="bundled case name or case-file path")
    p.add_argument("--out-dir", dest="out_dir", help="report directory")
    p.add_argument("--steps", type=int)
    return parser


REQUIRED = {
    "gen-data": ("case", "out"),
    "train": ("data", "out"),
    "sample": ("checkpoint", "out"),
    "eval": ("real", "syn", "case", "out_dir"),
    "downstream": ("train", "test", "case", "out_dir"),
}


def resolve_config(argv: list[str]) -> dict:
    """Merge defaults, config file and flags into one flat dict."""
    ns = vars(build_parser().parse_args(argv))
    command = ns.pop("command")
    quiet = ns.pop("quiet", False)
    cfg = {"seed": None, **DEFAULTS[command]}
    if "config" in ns:
        path = ns.pop("config")
        try:
            loaded = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CliError(3, "file", f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise CliError(3, "data", f"config {path} is not valid JSON: {exc.msg}") from None
        if isinstance(loaded, dict) and "config" in loaded and "command" in loaded:
            if loaded["command"] != command:
                raise CliError(3, "data", f"manifest {path} belongs to '{loaded['command']}', not '{command}'")
            loaded = loaded["config"]
        if not isinstance(loaded, dict):
            raise CliError(3, "data", f"config {path} must hold a JSON object")
        allowed = set(cfg) | set(REQUIRED[command]) | {"norm_out", "train"}
        unknown = sorted(set(loaded) - allowed - {"command"})
        if unknown:
            raise CliError(2, "usage", f"unknown config keys: {', '.join(unknown)}")
        cfg.update({k: v for k, v in loaded.items() if k != "command"})
    cfg.update(ns)
    if cfg["seed"] is None:
        env = os.environ.get("GRIDFLOW_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise CliError(2, "usage", f"GRIDFLOW_SEED must be an integer, got {env!r}") from None
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise CliError(2, "usage", f"{command}: missing required option(s): "
                       + ", ".join("--" + m.replace("_", "-") for m in missing))
    if command == "downstream":
        cfg["train"] = [list(s) for s in cfg["train"]]
    cfg["command"] = command
    cfg["_quiet"] = quiet
    return cfg


class _Staged:
    """Output files written to temporaries and moved into place only on success."""

    def __init__(self):
        self.items: list[tuple[Path, Path]] = []

    def path(self, final) -> Path:
        final = Path(final)
        if not final.parent.is_dir():
            raise CliError(3, "file", f"output directory {final.parent} does not exist")
        fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", suffix=".tmp", dir=final.parent)
        os.close(fd)
        self.items.append((final, Path(tmp)))
        return Path(tmp)

    def commit(self) -> dict[str, str]:
        digests = {}
        for final, tmp in self.items:
            digests[str(final)] = hashlib.sha256(tmp.read_bytes()).hexdigest()
            os.replace(tmp, final)
        self.items.clear()
        return digests

    def discard(self):
        for _, tmp in self.items:
            tmp.unlink(missing_ok=True)
        self.items.clear()


def _versions() -> dict:
    return {"gridflow": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_manifest(path, cfg: dict, outputs: dict, events: dict) -> None:
    public = {k: v for k, v in cfg.items() if not k.startswith("_") and k != "command"}
    manifest = {"command": cfg["command"], "config": public, "versions": _versions(),
                "outputs": outputs, "events": events}
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _case(spec: str, shunts: bool = False):
    try:
        return load_case(spec, shunts=shunts), read_case_text(spec)
    except FileNotFoundError:
        raise CliError(3, "file", f"case {spec!r} not found (neither a file nor a bundled case)") from None
    except CaseFormatError as exc:
        raise CliError(3, "data", f"case {spec!r}: {exc}") from None


def _dataset(path: str, case=None) -> datagen.Dataset:
    try:
        ds = datagen.read_dataset_csv(path)
    except FileNotFoundError:
        raise CliError(3, "file", f"{path}: no such file") from None
    except ValueError as exc:
        raise CliError(3, "data", str(exc)) from None
    if case is not None and ds.n_bus != case.n_bus:
        raise CliError(3, "data", f"{path}: {ds.n_bus}-bus records do not match the {case.n_bus}-bus case")
    return ds


def cmd_gen_data(cfg, staged):
    case, _ = _case(cfg["case"], cfg["shunts"])
    try:
        ds = datagen.generate_dataset(case, int(cfg["n"]), int(cfg["seed"]), threads=int(cfg["threads"]))
    except datagen.GenerationError as exc:
        raise CliError(4, "numerical", str(exc)) from None
    datagen.write_dataset_csv(ds, staged.path(cfg["out"]))
    if cfg.get("norm_out"):
        datagen.write_norm_csv(datagen.fit_norm(ds), staged.path(cfg["norm_out"]))
    log.info("wrote %d records for %s (%d diverged solves redrawn)", len(ds), case.name, ds.divergences)
    return cfg["out"], {"diverged_solves": ds.divergences}


def cmd_train(cfg, staged):
    ds = _dataset(cfg["data"])
    case_text, case_name = "", ""
    if cfg.get("case"):
        case, case_text = _case(cfg["case"])
        case_name = case.name
        if case.n_bus != ds.n_bus:
            raise CliError(3, "data", f"{cfg['data']}: {ds.n_bus}-bus records do not match the case")
    tc = diffusion.TrainConfig(steps=int(cfg["steps"]), batch_size=int(cfg["batch_size"]), lr=float(cfg["lr"]),
                               hidden=tuple(cfg["hidden"]) if cfg["hidden"] else None,
                               embed_dim=int(cfg["embed_dim"]), T=int(cfg["T"]),
                               beta_1=float(cfg["beta_1"]), beta_T=float(cfg["beta_T"]))
    try:
        model, trace = diffusion.train_decoupled(ds, tc, seed=int(cfg["seed"]), case_text=case_text,
                                                 case_name=case_name, log_every=max(tc.steps // 10, 1))
    except diffusion.TrainingError as exc:
        raise CliError(4, "numerical", str(exc)) from None
    except ValueError as exc:
        raise CliError(3, "data", str(exc)) from None
    extra = {"train": diffusion.train_config_dict(tc), "seed": int(cfg["seed"]),
             "data_sha256": hashlib.sha256(Path(cfg["data"]).read_bytes()).hexdigest()}
    diffusion.save_checkpoint(model, staged.path(cfg["out"]), extra)
    if cfg.get("loss_out"):
        with open(staged.path(cfg["loss_out"]), "w", encoding="utf-8") as fh:
            fh.write("step,loss\n")
            for i, v in enumerate(trace):
                fh.write(f"{i + 1},{format(float(v), '.17g')}\n")
    return cfg["out"], {"final_loss": float(trace[-100:].mean()) if len(trace) else None}


def cmd_sample(cfg, staged):
    ckpt = cfg["checkpoint"]
    try:
        digest = hashlib.sha256(Path(ckpt).read_bytes()).hexdigest()
        model, _ = diffusion.load_checkpoint(ckpt)
    except FileNotFoundError:
        raise CliError(3, "file", f"{ckpt}: no such file") from None
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(3, "data", f"{ckpt}: unreadable checkpoint ({exc})") from None
    if cfg.get("case"):
        case, _ = _case(cfg["case"])
    elif model.case_text:
        case = parse_case(model.case_text)
    else:
        case = None
    lam = cfg["lambda"]
    if lam is None:
        lam = DEFAULT_LAMBDA.get(case.name if case else "", 0.0)
        cfg["lambda"] = lam
    if lam > 0 and case is None:
        raise CliError(3, "data", "guided sampling needs a case: pass --case or train with --case")
    if case is not None and case.n_bus != model.n_bus:
        raise CliError(3, "data", f"case has {case.n_bus} buses but the model was trained on {model.n_bus}")
    kwargs = dict(chunk_size=int(cfg["chunk_size"]), threads=int(cfg["threads"]), clip=bool(cfg["clip"]))
    events = {"checkpoint_sha256": digest, "T": model.schedule.T, "beta_1": model.schedule.beta_1,
              "beta_T": model.schedule.beta_T, "lambda": lam, "mode": cfg["mode"], "abort": None}
    try:
        if lam == 0:
            ds = diffusion.sample_unguided(model, int(cfg["n"]), int(cfg["seed"]), **kwargs)
        else:
            gc = diffusion.GuidanceConfig(float(lam), cfg["mode"], bool(cfg["inequalities"]))
            ds = diffusion.sample_guided(model, case, int(cfg["n"]), int(cfg["seed"]), gc, **kwargs)
    except diffusion.SamplingAborted as exc:
        events["abort"] = {"step": exc.step, "chains": exc.chains}
        raise CliError(4, "numerical", str(exc), step=exc.step, events=events) from None
    except ValueError as exc:
        raise CliError(3, "data", str(exc)) from None
    datagen.write_dataset_csv(ds, staged.path(cfg["out"]))
    return cfg["out"], events


def cmd_eval(cfg, staged):
    case, _ = _case(cfg["case"])
    real = _dataset(cfg["real"], case)
    syn = _dataset(cfg["syn"], case)
    n = cfg.get("n")
    if n is not None:
        if n > min(len(real), len(syn)):
            raise CliError(3, "data", f"--n {n} exceeds the dataset sizes ({len(real)}, {len(syn)})")
        real, syn = datagen.Dataset(real.data[:n]), datagen.Dataset(syn.data[:n])
    try:
        w1, _ = evaluate.wasserstein1(real, syn)
    except ValueError as exc:
        raise CliError(3, "data", str(exc)) from None
    out = Path(cfg["out_dir"])
    if not out.is_dir():
        raise CliError(3, "file", f"output directory {out} does not exist")
    evaluate.write_w1(staged.path(out / "w1.txt"), w1,
                      {"n": len(real), "metric": "euclidean, flattened per-unit records"})
    report = evaluate.mismatch_report(syn, case)
    evaluate.write_mismatch_csv(report, staged.path(out / f"mismatch_{case.name}.csv"))
    for bus in range(1, case.n_bus + 1):
        for kind in ("dp", "dq"):
            evaluate.histogram_export(report.magnitudes(kind)[:, bus - 1], int(cfg["bins"]),
                                      staged.path(out / f"hist_{bus}_{kind}.csv"))
    log.info("W1 = %.6g over %d records", w1, len(real))
    return out / "eval", {"w1": w1}


def cmd_downstream(cfg, staged):
    case, _ = _case(cfg["case"])
    test = _dataset(cfg["test"], case)
    sources = {}
    for name, path in cfg["train"]:
        if name in sources:
            raise CliError(2, "usage", f"duplicate training source name {name!r}")
        sources[name] = _dataset(path, case)
    out = Path(cfg["out_dir"])
    if not out.is_dir():
        raise CliError(3, "file", f"output directory {out} does not exist")
    result = evaluate.downstream_warmstart(sources, test, case, seed=int(cfg["seed"]), steps=int(cfg["steps"]))
    evaluate.write_downstream_csv(result, staged.path(out / "downstream.csv"))
    return out / "downstream", {}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "downstream": cmd_downstream}


def _error_line(exc: CliError) -> str:
    fields = {"code": exc.code, "kind": exc.kind}
    if "step" in exc.fields:
        fields["step"] = exc.fields["step"]
    fields["message"] = str(exc)
    return "gridflow-error " + json.dumps(fields)


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    staged = _Staged()
    cfg = None
    try:
        cfg = resolve_config(argv)
        logging.basicConfig(level=logging.WARNING if cfg["_quiet"] else logging.INFO,
                            format="%(name)s: %(message)s", stream=sys.stderr)
        primary, events = COMMANDS[cfg["command"]](cfg, staged)
        outputs = staged.commit()
        _write_manifest(f"{primary}.manifest.json", cfg, outputs, events)
        return 0
    except CliError as exc:
        staged.discard()
        if exc.code == 4 and cfg is not None and cfg.get("out") and "events" in exc.fields:
            _write_manifest(f"{cfg['out']}.manifest.json", cfg, {}, exc.fields["events"])
        print(_error_line(exc), file=sys.stderr)
        return exc.code
    except OSError as exc:
        staged.discard()
        print(_error_line(CliError(3, "file", f"{exc.filename or ''}: {exc.strerror or exc}")), file=sys.stderr)
        return 3
    except BaseException:
        staged.discard()
        raise


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

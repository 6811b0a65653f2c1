"""Command-line interface: ``choicekit fit|simulate|bench|inspect``.

Exit codes: 0 success, 1 usage error (bad flags, config, formula or paths),
2 data-validation or estimation error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from choicekit.conditional_logit import ConditionalLogitModel
from choicekit.dataset import ChoiceDataset, JointDataset
from choicekit.errors import (
    BadRegularization,
    ChoiceError,
    DuplicateTerm,
    FormulaSyntaxError,
    KeyMismatch,
    MissingUserIndex,
    ModelConfigError,
    SingularHessian,
    UnknownObservable,
    UnknownVariation,
)
from choicekit.estimation import FitOptions, fit, standard_errors
from choicekit.io import (
    ManifestError,
    encodings_to_json,
    load_dataset,
    write_coefficients,
    write_dataset_dir,
    write_json,
)
from choicekit.nested_logit import NestedLogitModel
from choicekit.synth import AXES, BenchConfig, SimSpec, run_scaling_suite, simulate, truth_to_json, write_timing_csv

USAGE_ERRORS = (FormulaSyntaxError, UnknownVariation, DuplicateTerm, UnknownObservable,
                MissingUserIndex, KeyMismatch, ModelConfigError, BadRegularization,
                ManifestError)
SE_MAX_PARAMS = 2000

FIT_DEFAULTS = {
    "model": "clm",
    "formula": None,
    "nest_formula": "",
    "item_formula": None,
    "nests": None,
    "shared_lambda": False,
    "optimizer": "adam",
    "lr": 0.01,
    "epochs": 5000,
    "batch_size": -1,
    "regularization": None,
    "reg_weight": 0.0,
    "reg_squared": False,
    "seed": 0,
    "init": "zeros",
    "std_errors": True,
    "trace_timing": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add_fit(sub):
    p = sub.add_parser("fit", help="estimate a conditional or nested logit model")
    s = argparse.SUPPRESS
    p.add_argument("--config", help="JSON file with fit settings; flags override it")
    p.add_argument("--data", default=s, help="dataset manifest JSON")
    p.add_argument("--out", default=s, help="output directory")
    p.add_argument("--model", choices=["clm", "nlm"], default=s)
    p.add_argument("--formula", default=s, help="conditional logit formula")
    p.add_argument("--nest-formula", dest="nest_formula", default=s)
    p.add_argument("--item-formula", dest="item_formula", default=s)
    p.add_argument("--nests", default=s,
                   help='JSON object (or file) mapping nest name to item labels')
    p.add_argument("--shared-lambda", dest="shared_lambda", action="store_true", default=s)
    p.add_argument("--optimizer", choices=["adam", "gd", "lbfgs"], default=s)
    p.add_argument("--lr", type=float, default=s)
    p.add_argument("--epochs", type=int, default=s)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=s)
    p.add_argument("--regularization", choices=["l1", "l2"], default=s)
    p.add_argument("--reg-weight", dest="reg_weight", type=float, default=s)
    p.add_argument("--reg-squared", dest="reg_squared", action="store_true", default=s,
                   help="use the squared L2 norm")
    p.add_argument("--seed", type=int, default=s)
    p.add_argument("--init", choices=["zeros", "normal"], default=s)
    p.add_argument("--no-se", dest="std_errors", action="store_false", default=s,
                   help="skip standard errors")
    p.add_argument("--trace-timing", dest="trace_timing", action="store_true", default=s,
                   help="fill the wall_ms trace column (makes trace.csv non-reproducible)")
    p.set_defaults(func=cmd_fit)


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="write a synthetic dataset directory")
    p.add_argument("--model", choices=["m1", "m2", "m3"], default="m1")
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--items", type=int, default=10)
    p.add_argument("--sessions", type=int, default=None, help="defaults to --users")
    p.add_argument("--records", type=int, default=10000)
    p.add_argument("--user-dim", dest="user_dim", type=int, default=30)
    p.add_argument("--item-dim", dest="item_dim", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)


def _add_bench(sub):
    p = sub.add_parser("bench", help="time fits along one scaling axis")
    p.add_argument("--axis", choices=sorted(AXES), required=True)
    p.add_argument("--grid", required=True, help="comma-separated axis values")
    p.add_argument("--models", default="m1", help="comma-separated subset of m1,m2,m3")
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--users", type=int, default=100)
    p.add_argument("--items", type=int, default=10)
    p.add_argument("--sessions", type=int, default=100)
    p.add_argument("--records", type=int, default=10000)
    p.add_argument("--user-dim", dest="user_dim", type=int, default=10)
    p.add_argument("--item-dim", dest="item_dim", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=["adam", "gd", "lbfgs"], default="lbfgs")
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--epochs", type=int, default=30000)
    p.add_argument("--out", required=True, help="timing CSV path")
    p.set_defaults(func=cmd_bench)


def _add_inspect(sub):
    p = sub.add_parser("inspect", help="summarize and validate a dataset")
    p.add_argument("--data", required=True, help="dataset manifest JSON")
    p.set_defaults(func=cmd_inspect)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="choicekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    _add_fit(sub)
    _add_simulate(sub)
    _add_bench(sub)
    _add_inspect(sub)
    return parser


# ----------------------------------------------------------------------
def resolve_fit_config(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = dict(FIT_DEFAULTS)
    flags = {k: v for k, v in vars(args).items() if k not in ("func", "command", "config")}
    if args.config:
        path = Path(args.config)
        try:
            from_file = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        unknown = set(from_file) - set(FIT_DEFAULTS) - {"data", "out"}
        if unknown:
            raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
        if "data" in from_file and not Path(from_file["data"]).is_absolute():
            from_file["data"] = str(path.parent / from_file["data"])
        cfg.update(from_file)
    cfg.update(flags)
    for key in ("data", "out"):
        if not cfg.get(key):
            raise UsageError(f"fit: --{key} is required")
    if cfg["model"] == "clm" and not cfg["formula"]:
        raise UsageError("fit: --formula is required with --model clm")
    if cfg["model"] == "nlm":
        if not cfg["item_formula"]:
            raise UsageError("fit: --item-formula is required with --model nlm")
        if not cfg["nests"]:
            raise UsageError("fit: --nests is required with --model nlm")
    if cfg["reg_weight"] and not cfg["regularization"]:
        raise UsageError("fit: --reg-weight needs --regularization l1|l2")
    return cfg


def _parse_nests(spec, item_encoding):
    if isinstance(spec, str):
        path = Path(spec)
        text = path.read_text() if not spec.lstrip().startswith("{") and path.is_file() else spec
        try:
            spec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"--nests is not valid JSON: {exc}") from None
    if not isinstance(spec, dict) or not spec:
        raise UsageError("--nests must be a nonempty JSON object of nest -> item labels")
    by_text = {str(lab): code for code, lab in enumerate(item_encoding.labels)}
    mapping = {}
    for k, (name, members) in enumerate(spec.items()):
        codes = []
        for lab in members:
            if str(lab) not in by_text:
                raise UsageError(f"--nests: unknown item label {lab!r} in nest {name!r}")
            codes.append(by_text[str(lab)])
        mapping[k] = codes
    return list(spec), mapping


def _nest_dataset(item_ds: ChoiceDataset, num_nests: int) -> ChoiceDataset:
    """Nest-level dataset sharing indices and user/session observables."""
    obs = {name: arr for name, arr in item_ds.observables.items()
           if item_ds.variation[name] in ("user", "session")}
    return ChoiceDataset(item_ds.item_index,
                         user_index=item_ds.user_index if item_ds.has_user_index else None,
                         session_index=item_ds.session_index,
                         availability=item_ds.availability, num_nests=num_nests,
                         observables=obs)


def cmd_fit(args) -> int:
    cfg = resolve_fit_config(args)
    dataset, encodings = load_dataset(cfg["data"])
    regularization = cfg["regularization"].upper() if cfg["regularization"] else None
    reg_kwargs = {}
    if regularization:
        reg_kwargs = dict(regularization=regularization, regularization_weight=cfg["reg_weight"],
                          regularization_squared=cfg["reg_squared"])
    nest_labels = None
    if cfg["model"] == "clm":
        model = ConditionalLogitModel(formula=cfg["formula"], dataset=dataset, **reg_kwargs)
        data = dataset
    else:
        nest_labels, nest_to_item = _parse_nests(cfg["nests"], encodings["item"])
        data = JointDataset(nest=_nest_dataset(dataset, len(nest_to_item)), item=dataset)
        model = NestedLogitModel(nest_to_item, nest_formula=cfg["nest_formula"] or "",
                                 item_formula=cfg["item_formula"], dataset=data,
                                 shared_lambda=cfg["shared_lambda"], **reg_kwargs)
    options = FitOptions(optimizer=cfg["optimizer"], learning_rate=cfg["lr"],
                         num_epochs=cfg["epochs"], batch_size=cfg["batch_size"],
                         seed=cfg["seed"], init=cfg["init"])
    result = fit(model, data, options)

    se_note = "computed"
    if not cfg["std_errors"]:
        se_note = "skipped (--no-se)"
    elif regularization and cfg["reg_weight"] > 0:
        se_note = "not defined for a penalized fit"
    elif model.num_params > SE_MAX_PARAMS:
        se_note = f"skipped ({model.num_params} parameters > {SE_MAX_PARAMS})"
    else:
        try:
            result.std_errors = standard_errors(model, data)
        except SingularHessian as exc:
            se_note = f"unavailable: {exc}"

    item_labels = encodings["item"].labels
    user_labels = encodings["user"].labels if "user" in encodings else None
    if cfg["model"] == "clm":
        rows = model.coefficient_rows(result.std_errors, item_labels=item_labels,
                                      user_labels=user_labels)
    else:
        rows = model.coefficient_rows(result.std_errors, item_labels=item_labels,
                                      user_labels=user_labels, nest_labels=nest_labels)

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_coefficients(rows, out / "coefficients.csv", out / "coefficients.json")
    result.write_trace(out / "trace.csv", timing=cfg["trace_timing"])
    summary = result.summary()
    summary.update({
        "model": cfg["model"],
        "num_params": int(model.num_params),
        "num_items": int(dataset.num_items),
        "std_errors": se_note,
    })
    if cfg["model"] == "nlm":
        summary["lambda"] = model.lambdas().tolist()
        summary["lambda_in_unit_interval"] = bool(model.check_lambda())
    write_json(out / "summary.json", summary)
    resolved = dict(cfg)
    resolved["data"] = str(Path(cfg["data"]).resolve())
    resolved["out"] = str(out.resolve())
    resolved["label_encodings"] = encodings_to_json(encodings)
    write_json(out / "resolved_config.json", resolved)
    print(f"fitted {cfg['model']} with {model.num_params} parameters: "
          f"log-likelihood {-result.nll:.6f}, {result.epochs} epochs, "
          f"converged={result.converged} ({result.stop_reason})")
    return 0


def cmd_simulate(args) -> int:
    spec = SimSpec(num_users=args.users, num_items=args.items,
                   num_sessions=args.sessions or args.users, num_records=args.records,
                   user_dim=args.user_dim, item_dim=args.item_dim, model=args.model,
                   seed=args.seed)
    dataset, truth = simulate(spec)
    manifest = write_dataset_dir(dataset, args.out)
    write_json(Path(args.out) / "truth.json", truth_to_json(spec, truth))
    print(f"wrote {manifest} ({len(dataset)} records); fit with --formula "
          f"'{spec.formula}'")
    return 0


def _int_list(text, what):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError(f"{what} is empty")
    return values


def cmd_bench(args) -> int:
    grid = tuple(_int_list(args.grid, "--grid"))
    models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    bad = [m for m in models if m not in ("m1", "m2", "m3")]
    if bad or not models:
        raise UsageError(f"--models must list m1, m2 or m3, got {args.models!r}")
    base = SimSpec(num_users=args.users, num_items=args.items, num_sessions=args.sessions,
                   num_records=args.records, user_dim=args.user_dim, item_dim=args.item_dim,
                   model=models[0], seed=args.seed)
    config = BenchConfig(args.axis, grid, models, args.reps, base,
                         FitOptions(optimizer=args.optimizer, learning_rate=args.lr,
                                    num_epochs=args.epochs))
    rows = run_scaling_suite(config, progress=lambda r: print(
        f"{r['axis']}={r['axis_value']} {r['model']} rep {r['rep']}: "
        f"{r['wall_seconds']:.3f} s {r['error']}".rstrip()))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_timing_csv(rows, args.out)
    failed = sum(1 for r in rows if r["error"])
    print(f"wrote {args.out} ({len(rows)} rows, {failed} failed)")
    return 2 if failed else 0


def cmd_inspect(args) -> int:
    dataset, encodings = load_dataset(args.data)
    print(dataset.summary())
    print(f"  items: {', '.join(str(x) for x in encodings['item'].labels)}")
    problems = dataset.validate()
    if problems:
        print(f"{len(problems)} invariant violation(s):", file=sys.stderr)
        for p in problems:
            print(f"  - {p}", file=sys.stderr)
        return 2
    print("all dataset invariants hold")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except USAGE_ERRORS as exc:
        print(f"usage error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ChoiceError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: data generation, imputer fitting, training,
evaluation and sweeps.

Run configurations are JSON documents with sections `dataset`,
`imputer`, `selection`, `estimator`, `model`, `train` and `regime`; a
top-level `preset` fills every model section first and explicit keys
then override it. Unknown keys anywhere are rejected rather than
ignored, so typos fail loudly.

Exit codes are stable: 0 success, 2 usage, 3 I/O, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import diffnet as dn
from . import evalkit as ev
from . import lexmodel as lx
from . import synthgen as sg
from . import trainer as tr
from .imputers import (ImputerSpec, fit_imputer, load_imputer, save_imputer)
from .lexmodel import RegimeContext

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

TOP_KEYS = ("preset", "dataset", "imputer", "selection", "estimator",
            "model", "train", "regime")
DATASET_KEYS = ("csv", "name", "n_train", "n_test", "seed")
IMPUTER_KEYS = ("kind", "c", "n_components", "v_max", "path")
SELECTION_KEYS = ("mode", "k", "lam", "tau", "n_mask_samples",
                  "n_imputation_samples")
ESTIMATOR_KEYS = ("kind", "tau", "eta", "baseline", "baseline_decay")
MODEL_KEYS = ("n_features", "n_classes", "predictor_hidden",
              "selector_hidden")
TRAIN_KEYS = ("epochs", "batch_size", "lr", "weight_decay", "seed",
              "checkpoint_every", "selector_bias_init", "surrogate_hidden",
              "surrogate_epochs", "surrogate_batch", "surrogate_lr")
REGIME_KEYS = ("name", "predictor_checkpoint")


class UsageError(Exception):
    """Configuration or flag problem; maps to exit code 2."""


def _check_keys(section: dict, allowed, where: str):
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise UsageError(f"unknown keys in {where}: {', '.join(unknown)}; "
                         f"allowed: {', '.join(allowed)}")


def load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a JSON object")
    _check_keys(doc, TOP_KEYS, "config")
    for key, allowed in (("dataset", DATASET_KEYS), ("imputer", IMPUTER_KEYS),
                         ("selection", SELECTION_KEYS),
                         ("estimator", ESTIMATOR_KEYS),
                         ("model", MODEL_KEYS), ("train", TRAIN_KEYS)):
        section = doc.get(key, {})
        if not isinstance(section, dict):
            raise UsageError(f"section {key!r} must be an object")
        _check_keys(section, allowed, f"section {key!r}")
    regime = doc.get("regime", {})
    if isinstance(regime, dict):
        _check_keys(regime, REGIME_KEYS, "section 'regime'")
    elif not isinstance(regime, str):
        raise UsageError("section 'regime' must be a string or object")
    return doc


def _regime_parts(doc):
    regime = doc.get("regime", {})
    if isinstance(regime, str):
        return regime, None
    return regime.get("name"), regime.get("predictor_checkpoint")


def resolve_lex(doc) -> lx.LexConfig:
    """Expand the preset (if any) and overlay the explicit sections."""
    model = doc.get("model", {})
    sel = doc.get("selection", {})
    est = doc.get("estimator", {})
    imp = doc.get("imputer", {})
    nf = int(model.get("n_features", sg.N_FEATURES))
    nc = int(model.get("n_classes", 2))
    hidden = tuple(model.get("predictor_hidden", (100, 100)))
    preset = doc.get("preset")
    if preset is not None:
        try:
            base = lx.preset_config(
                preset, nf, nc, k=sel.get("k", 5), lam=sel.get("lam", 0.1),
                n_components=imp.get("n_components", 10), hidden=hidden,
                tau=sel.get("tau", 0.5))
        except ValueError as e:
            raise UsageError(str(e)) from e
        d = tr.lex_config_to_dict(base)
    else:
        d = tr.lex_config_to_dict(lx.LexConfig(
            predictor=dn.MlpSpec((nf, *hidden, nc)),
            selector=dn.MlpSpec((nf, *hidden, nf)),
            imputer=ImputerSpec("constant", c=0.0)))

    if "selector_hidden" in model:
        d["selector"] = {"sizes": [nf, *model["selector_hidden"], nf],
                         "out_act": "identity"}
    if "predictor_hidden" in model:
        d["predictor"] = {"sizes": [nf, *model["predictor_hidden"], nc],
                          "out_act": "identity"}
    if imp:
        keep = {k: v for k, v in imp.items() if k != "path"}
        if "kind" in keep:
            d["imputer"] = keep
        else:
            d["imputer"].update(keep)
    if "mode" in sel:
        d["selection"] = sel["mode"]
        # switching family drops the other family's knob unless given
        if sel["mode"] == "bernoulli":
            d["k"] = sel.get("k")
            d["lam"] = sel.get("lam", 0.0)
        else:
            d["lam"] = sel.get("lam", 0.0)
    for key in ("k", "lam", "tau", "n_mask_samples", "n_imputation_samples"):
        if key in sel:
            d[key] = sel[key]
    d["estimator"].update(est)
    name, _ = _regime_parts(doc)
    if name:
        d["regime"] = name
    try:
        return tr.lex_config_from_dict(d)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid configuration: {e}") from e


def resolve_train(doc) -> tr.TrainConfig:
    lex = resolve_lex(doc)
    section = dict(doc.get("train", {}))
    for key in ("surrogate_hidden", "surrogate_epochs", "surrogate_batch",
                "surrogate_lr"):
        section.pop(key, None)
    seed = int(os.environ.get("LEX_SEED", section.get("seed", 0)))
    section["seed"] = seed
    try:
        return tr.train_config_from_dict({"lex": tr.lex_config_to_dict(lex),
                                          **section})
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid train section: {e}") from e


def surrogate_options(doc) -> dict:
    section = doc.get("train", {})
    out = {}
    if "surrogate_hidden" in section:
        out["surrogate_hidden"] = tuple(section["surrogate_hidden"])
    for key in ("surrogate_epochs", "surrogate_batch", "surrogate_lr"):
        if key in section:
            out[key] = section[key]
    return out


def load_dataset(doc) -> sg.Dataset:
    section = doc.get("dataset")
    if not section:
        raise UsageError("config needs a 'dataset' section")
    if "csv" in section:
        return sg.load_csv(section["csv"])
    if "name" not in section:
        raise UsageError("dataset section needs 'csv' or 'name'")
    name = str(section["name"]).upper()
    return sg.gen_synthetic(name, n_train=int(section.get("n_train", 10000)),
                            n_test=int(section.get("n_test", 10000)),
                            seed=int(section.get("seed", 0)))


def _load_frozen(path, spec: dn.MlpSpec) -> dn.ParamStore:
    arrays, _ = dn.load_checkpoint(path)
    if any("." in k for k in arrays):
        flat = dn.split_prefixed(arrays).get("predictor")
    else:
        flat = arrays if "w0" in arrays else None
    if flat is None:
        raise UsageError(f"checkpoint {path} holds no predictor parameters")
    store = dn.init_mlp(spec, np.random.default_rng(0), dtype=np.float64)
    store.load_arrays({k: np.asarray(v, dtype=np.float64)
                       for k, v in flat.items()})
    return store


def _write_manifest(out: Path, command: str, outputs, extra=None):
    doc = {"command": command, "outputs": sorted(str(o) for o in outputs)}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# -- commands --------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = args.dataset.upper()
    files = []
    entries = []
    for rep in range(args.replicates):
        seed = args.seed + rep
        ds = sg.gen_synthetic(name, n_train=args.n_train,
                              n_test=args.n_test, seed=seed)
        fname = f"{name.lower()}_rep{rep}.csv"
        sg.save_csv(ds, out / fname)
        files.append(fname)
        entries.append({"file": fname, "dataset": name, "seed": seed,
                        "n_train": args.n_train, "n_test": args.n_test,
                        "sha256": _sha256(out / fname)})
    _write_manifest(out, "gen-data", files + ["manifest.json"],
                    {"replicates": entries})
    print(f"wrote {len(files)} replicate(s) of {name} to {out}")
    return EXIT_OK


def cmd_fit_imputer(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = sg.load_csv(args.data)
    c = args.c if args.c is not None else (0.0 if args.kind == "constant"
                                           else None)
    spec = ImputerSpec(args.kind, c=c, n_components=args.components)
    x_train, _, _ = ds.split("train")
    x_val, _, _ = ds.split("val")
    fitted = fit_imputer(spec, x_train, x_val if len(x_val) else None,
                         seed=args.seed)
    save_imputer(out / "imputer.json", fitted)
    report = fitted.report.to_dict() if fitted.report is not None else {}
    (out / "fit_report.json").write_text(json.dumps(report, indent=2))
    _write_manifest(out, "fit-imputer",
                    ["imputer.json", "fit_report.json", "manifest.json"],
                    {"kind": args.kind})
    print(f"fitted {args.kind} imputer; report at {out / 'fit_report.json'}")
    return EXIT_OK


def _train_once(doc, cfg, dataset, out: Path):
    """Dispatch on regime: direct run, two-stage run, or run against a
    frozen predictor loaded from a checkpoint."""
    regime = cfg.lex.regime
    _, ckpt = _regime_parts(doc)
    if ckpt is not None:
        frozen = _load_frozen(ckpt, cfg.lex.predictor)
        ctx = RegimeContext(frozen_predictor=frozen) \
            if regime in ("fixed_theta_insitu", "self_posthoc") \
            else RegimeContext(surrogate=frozen)
        fitted = _fit_from_config(cfg.lex.imputer, doc, dataset)
        record, theta, gamma = tr.train(cfg, dataset, fitted, ctx,
                                        out_dir=out)
    elif regime in ("fixed_theta_insitu", "surrogate_posthoc"):
        try:
            _, _, record, theta, gamma = tr.surrogate_pipeline(
                cfg, dataset, out_dir=out, **surrogate_options(doc))
        except ValueError as e:
            raise UsageError(str(e)) from e
        fitted = fit_imputer(cfg.lex.imputer)
    else:
        fitted = _fit_from_config(cfg.lex.imputer, doc, dataset)
        record, theta, gamma = tr.train(cfg, dataset, fitted, out_dir=out)
    return record, theta, gamma, fitted


def _fit_from_config(spec: ImputerSpec, doc, dataset):
    path = doc.get("imputer", {}).get("path")
    if path is not None:
        fitted = load_imputer(path)
        if fitted.spec != spec:
            raise UsageError(f"imputer at {path} was fitted as "
                             f"{fitted.spec}, config says {spec}")
        return fitted
    x_train, _, _ = dataset.split("train")
    x_val, _, _ = dataset.split("val")
    return fit_imputer(spec, x_train, x_val if len(x_val) else None)


def cmd_train(args) -> int:
    doc = load_config(args.config)
    cfg = resolve_train(doc)
    dataset = load_dataset(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    record, theta, gamma, fitted = _train_once(doc, cfg, dataset, out)
    (out / "resolved_config.json").write_text(
        json.dumps(tr.train_config_to_dict(cfg), indent=2))
    save_imputer(out / "fitted_imputer.json", fitted)
    record.save(out / "run_record.json")
    if record.aborted:
        dump = record.diagnostics.get("dump", "")
        print(f"numerical abort at epoch {record.diagnostics.get('epoch')}; "
              f"diagnostics at {dump}", file=sys.stderr)
        return EXIT_NUMERIC
    outputs = [p.name for p in out.iterdir()]
    _write_manifest(out, "train", outputs + ["manifest.json"],
                    {"seed": cfg.seed, "regime": cfg.lex.regime})
    print(f"trained {cfg.epochs} epochs; final loss "
          f"{record.final['loss']:.4f}, train accuracy "
          f"{record.final['train_accuracy']:.4f}; record at "
          f"{out / 'run_record.json'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    cfg = tr.train_config_from_dict(
        json.loads((run / "resolved_config.json").read_text()))
    arrays, _ = dn.load_checkpoint(run / "final.ckpt")
    grouped = dn.split_prefixed(arrays)
    theta = dn.init_mlp(cfg.lex.predictor, np.random.default_rng(0),
                        dtype=np.float64)
    theta.load_arrays(grouped["predictor"])
    gamma = dn.init_mlp(cfg.lex.selector, np.random.default_rng(0),
                        dtype=np.float64)
    gamma.load_arrays(grouped["selector"])
    fitted = load_imputer(run / "fitted_imputer.json")
    dataset = sg.load_csv(args.data)
    test = dataset.split("test")
    # replicate files are named like s3_rep0.csv; recover the family
    family = dataset.name.upper().split("_")[0]
    ceiling = ev.analytic_ceiling(family, test[0]) \
        if family in sg.DATASET_NAMES else None
    model = ev.TrainedModel(cfg.lex, theta, gamma, fitted)
    metrics = ev.evaluate_model(model, test, n_masks=args.n_masks,
                                rng=args.seed, ceiling=ceiling)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(metrics.to_dict(), indent=2))
    print(f"tpr {metrics.tpr:.4f} fpr {metrics.fpr:.4f} fdr "
          f"{metrics.fdr:.4f} accuracy {metrics.accuracy:.4f}; metrics at "
          f"{out / 'eval.json'}")
    return EXIT_OK


def _parse_floats(text, fractions=False):
    vals = []
    for part in text.split(","):
        part = part.strip()
        if fractions and "/" in part:
            num, den = part.split("/")
            vals.append(float(num) / float(den))
        else:
            vals.append(float(part))
    return vals


def cmd_sweep(args) -> int:
    doc = load_config(args.config)
    base = resolve_train(doc)
    dataset = load_dataset(doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    surrogate_kwargs = surrogate_options(doc) or None
    if args.sweep == "rates":
        rates = _parse_floats(args.rates, fractions=True)
        result = ev.sweep_rates(base, dataset, rates, seeds,
                                n_masks=args.n_masks, out_dir=out,
                                jobs=args.jobs,
                                surrogate_kwargs=surrogate_kwargs)
    elif args.sweep == "constant":
        constants = _parse_floats(args.constants)
        result = ev.sweep_constant(base, dataset, constants, seeds,
                                   n_masks=args.n_masks, out_dir=out,
                                   jobs=args.jobs,
                                   surrogate_kwargs=surrogate_kwargs)
    else:
        lambdas = _parse_floats(args.lambdas)
        result = ev.sweep_lambda(base, dataset, lambdas, seeds,
                                 n_masks=args.n_masks, out_dir=out,
                                 jobs=args.jobs)
    outputs = [p.name for p in out.iterdir()]
    _write_manifest(out, "sweep", outputs + ["manifest.json"],
                    {"sweep": args.sweep, "seeds": seeds,
                     "n_failures": len(result["failures"])})
    print(f"{len(result['rows'])} aggregated rows, "
          f"{len(result['records'])} runs, "
          f"{len(result['failures'])} failures; CSV at {out / 'sweep.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lexsel",
        description="train and evaluate instance-wise feature selection "
                    "models on synthetic tabular data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic dataset replicates")
    p.add_argument("--dataset", choices=("s1", "s2", "s3"), required=True)
    p.add_argument("--n-train", type=int, default=10000)
    p.add_argument("--n-test", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--replicates", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("fit-imputer", help="fit an imputation scheme")
    p.add_argument("--kind", required=True)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--c", type=float, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_fit_imputer)

    p = sub.add_parser("train", help="train one configured run")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run directory")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-masks", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("sweep", help="run a factorial sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--sweep", choices=("rates", "constant", "lambda"),
                   required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--rates", default="2/11,3/11,4/11,5/11,6/11,7/11,8/11,"
                                      "9/11")
    p.add_argument("--constants",
                   default=",".join(str(c) for c in range(-10, 10)))
    p.add_argument("--lambdas", default="0,0.01,0.1,1,10,100")
    p.add_argument("--n-masks", type=int, default=100)
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else EXIT_OK
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except lx.NumericalError as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        # validation raised past config resolution (regime/shape checks)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

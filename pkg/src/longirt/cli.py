"""Command-line front end.

One JSON configuration file drives every workflow; commands read the blocks
they need.  All outputs land in the output directory together with a
manifest (config hash, effective seed, package versions) from which any run
can be reproduced exactly; reruns of the same config are byte-identical.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np
import jsonschema

from . import __version__
from ._kernels import backend_name
from .dataset import ColumnSchema, ItemDef, load_long_csv, save_long_csv, validate
from .inference import invariance_report
from .measurement import (
    ItemParams,
    category_prob,
    item_expectation,
    item_information,
)
from .optimizer import FitOptions, FitResult, fit
from .parameters import ParameterLayout, unpack
from .posterior import item_trajectory, marginal_trajectory
from .simulate import SimDesign, simulate_dataset, tutorial_design
from .timebasis import ModelSpec

_GRID_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["start", "stop", "num"],
    "properties": {
        "start": {"type": "number"},
        "stop": {"type": "number"},
        "num": {"type": "integer", "minimum": 2},
    },
}

_ITEMS_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": ["id", "levels"],
        "properties": {
            "id": {"type": "string"},
            "levels": {"type": "integer", "minimum": 2},
            "reversed": {"type": "boolean"},
        },
    },
}

_ITEM_PARAMS_SCHEMA = {
    "type": "array",
    "minItems": 1,
    "items": {
        "type": "object",
        "additionalProperties": False,
        "required": ["id", "discrimination", "thresholds"],
        "properties": {
            "id": {"type": "string"},
            "discrimination": {"type": "number"},
            "thresholds": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        },
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "out": {"type": "string"},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["path", "items"],
            "properties": {
                "path": {"type": "string"},
                "items": _ITEMS_SCHEMA,
                "columns": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "subject": {"type": "string"},
                        "item": {"type": "string"},
                        "time": {"type": "string"},
                        "response": {"type": "string"},
                        "subject_covariates": {"type": "array", "items": {"type": "string"}},
                        "row_covariates": {"type": "array", "items": {"type": "string"}},
                    },
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["basis", "fixed"],
            "properties": {
                "basis": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["ncs", "polynomial", "identity"]},
                        "internal_knots": {"type": "array", "items": {"type": "number"}},
                        "boundary_knots": {
                            "type": "array", "items": {"type": "number"},
                            "minItems": 2, "maxItems": 2,
                        },
                        "degree": {"type": "integer", "minimum": 1},
                    },
                },
                "fixed": {"type": "array", "items": {"type": "string"}},
                "random": {"type": "array", "items": {"type": "string"}},
                "dif": {"type": "array", "items": {"type": "string"}},
            },
        },
        "fit": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "eps_param": {"type": "number", "exclusiveMinimum": 0},
                "eps_fn": {"type": "number", "exclusiveMinimum": 0},
                "eps_rdm": {"type": "number", "exclusiveMinimum": 0},
                "max_iter": {"type": "integer", "minimum": 1},
                "n_qmc": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "threads": {"type": "integer", "minimum": 1},
            },
        },
        "simulate": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"enum": ["tutorial"]},
                "n_subjects": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "n_visits": {"type": "integer", "minimum": 1},
                "missing_prob": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "predict": {
            "type": "object",
            "additionalProperties": False,
            "required": ["fit", "grid", "profiles"],
            "properties": {
                "fit": {"type": "string"},
                "grid": _GRID_SCHEMA,
                "profiles": {
                    "type": "object",
                    "additionalProperties": {
                        "type": "object", "additionalProperties": {"type": "number"}
                    },
                },
                "items": {"type": "boolean"},
                "draws": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "qmc": {"type": "integer", "minimum": 1},
            },
        },
        "icc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fit": {"type": "string"},
                "items": _ITEM_PARAMS_SCHEMA,
                "grid": _GRID_SCHEMA,
            },
        },
        "information": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "fit": {"type": "string"},
                "items": _ITEM_PARAMS_SCHEMA,
                "grid": _GRID_SCHEMA,
            },
        },
        "invariance": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["dif", "rs"]},
                "global_test": {"enum": ["wald", "lrt"]},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def load_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {err.message}")
    return config


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) if isinstance(v, (int, float, np.floating)) else v for v in row])


def _write_json(path: Path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(outdir: Path, command: str, config: dict, effective: dict) -> None:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    manifest = {
        "command": command,
        "config_sha256": hashlib.sha256(canonical).hexdigest(),
        "effective": effective,
        "versions": {
            "longirt": __version__,
            "numpy": np.__version__,
            "python": sys.version.split()[0],
            "backend": backend_name(),
        },
    }
    import scipy

    manifest["versions"]["scipy"] = scipy.__version__
    _write_json(outdir / "manifest.json", manifest)


def _column_schema(config: dict) -> ColumnSchema:
    cols = config.get("data", {}).get("columns", {})
    return ColumnSchema(
        subject=cols.get("subject", "subject"),
        item=cols.get("item", "item"),
        time=cols.get("time", "time"),
        response=cols.get("response", "response"),
        subject_covariates=tuple(cols.get("subject_covariates", ())),
        row_covariates=tuple(cols.get("row_covariates", ())),
    )


def _items_from_config(config: dict) -> tuple[ItemDef, ...]:
    return tuple(
        ItemDef(str(i["id"]), int(i["levels"]), bool(i.get("reversed", False)))
        for i in config["data"]["items"]
    )


def _model_spec(config: dict) -> ModelSpec:
    model = config["model"]
    return ModelSpec.from_dict(
        {
            "items": config["data"]["items"],
            "basis": model["basis"],
            "fixed": model["fixed"],
            "random": model.get("random", ["1"]),
            "dif": model.get("dif", []),
        }
    )


def _fit_options(config: dict, args) -> FitOptions:
    block = dict(config.get("fit", {}))
    if args.qmc is not None:
        block["n_qmc"] = args.qmc
    if args.seed is not None:
        block["seed"] = args.seed
    if args.threads is not None:
        block["threads"] = args.threads
    return FitOptions(**block)


def _load_dataset(config: dict):
    schema = _column_schema(config)
    items = _items_from_config(config)
    return load_long_csv(config["data"]["path"], schema, items), schema


def _grid(block: dict, default=(-6.0, 6.0, 121)) -> np.ndarray:
    g = block.get("grid")
    if g is None:
        return np.linspace(*default)
    return np.linspace(g["start"], g["stop"], g["num"])


def _item_params_for_curves(config: dict, block: dict) -> list[tuple[str, ItemParams]]:
    if "items" in block:
        return [
            (str(i["id"]), ItemParams(1.0 / float(i["discrimination"]), np.asarray(i["thresholds"], dtype=float)))
            for i in block["items"]
        ]
    if "fit" in block:
        fit_doc = json.loads(Path(block["fit"]).read_text())
        out = []
        for item in fit_doc["natural"]["items"]:
            out.append(
                (item["id"], ItemParams(1.0 / item["discrimination"], np.asarray(item["thresholds"])))
            )
        return out
    raise ConfigError("icc/information needs either 'items' or 'fit' in its config block")


def fit_result_to_dict(res: FitResult) -> dict:
    return {
        "model": res.spec.to_dict(),
        "layout": {"names": list(res.layout.names), "size": res.layout.size},
        "options": {
            "eps_param": res.options.eps_param,
            "eps_fn": res.options.eps_fn,
            "eps_rdm": res.options.eps_rdm,
            "max_iter": res.options.max_iter,
            "n_qmc": res.options.n_qmc,
            "seed": res.options.seed,
        },
        "loglik": res.loglik,
        "n_iter": res.n_iter,
        "converged": res.converged,
        "criteria": {
            "param": res.criteria.param,
            "fn": res.criteria.fn,
            "rdm": res.criteria.rdm,
            "passed": list(res.criteria_passed),
        },
        "hessian_positive_definite": res.hessian_pd,
        "n_subjects": res.n_subjects,
        "n_observations": res.n_observations,
        "theta": res.theta.tolist(),
        "V": res.V.tolist(),
        "natural": {
            "beta": res.natural.beta.tolist(),
            "B": res.natural.B.tolist(),
            "items": [
                {
                    "id": item_id,
                    "discrimination": item.discrimination,
                    "thresholds": item.thresholds.tolist(),
                }
                for item_id, item in zip(res.layout.item_ids, res.natural.items)
            ],
            "gammas": res.natural.gammas.tolist(),
        },
        "natural_table": {
            "names": list(res.natural_table.names),
            "estimate": res.natural_table.estimates.tolist(),
            "se": res.natural_table.ses.tolist(),
        },
    }


def load_fit_result(path: str) -> FitResult:
    """Rebuild enough of a stored fit to run posterior computations."""
    doc = json.loads(Path(path).read_text())
    spec = ModelSpec.from_dict(doc["model"])
    layout = ParameterLayout.from_spec(spec)
    theta = np.asarray(doc["theta"])
    V = np.asarray(doc["V"])
    from .optimizer import CriteriaValues, natural_se_table

    crit = CriteriaValues(
        param=doc["criteria"]["param"], fn=doc["criteria"]["fn"], rdm=doc["criteria"]["rdm"]
    )
    return FitResult(
        spec=spec,
        layout=layout,
        options=FitOptions(**doc["options"]),
        theta=theta,
        V=V,
        loglik=doc["loglik"],
        n_iter=doc["n_iter"],
        converged=doc["converged"],
        criteria=crit,
        criteria_passed=tuple(doc["criteria"]["passed"]),
        hessian_pd=doc["hessian_positive_definite"],
        natural=unpack(theta, layout),
        natural_table=natural_se_table(theta, V, layout),
        trace=[],
        n_parameters=layout.size,
        n_subjects=doc["n_subjects"],
        n_observations=doc["n_observations"],
    )


def cmd_simulate(config: dict, outdir: Path, args) -> None:
    block = config.get("simulate", {})
    overrides = {}
    for key in ("n_subjects", "seed", "n_visits", "missing_prob"):
        if key in block:
            overrides[key] = block[key]
    if args.seed is not None:
        overrides["seed"] = args.seed
    design = tutorial_design(**overrides)
    ds, record = simulate_dataset(design)
    schema = ColumnSchema(subject_covariates=tuple(design.covariates))
    save_long_csv(ds, outdir / "simulated.csv", schema)
    _write_json(outdir / "truth.json", record)
    _write_manifest(outdir, "simulate", config, {"seed": design.seed, "n_subjects": design.n_subjects})
    print(f"wrote {outdir / 'simulated.csv'} ({len(ds.observations)} rows) and truth.json")


def cmd_fit(config: dict, outdir: Path, args) -> None:
    ds, _ = _load_dataset(config)
    report = validate(ds)
    if report.errors():
        raise RuntimeError(f"dataset failed validation: {report.errors()[0].message}")
    spec = _model_spec(config)
    options = _fit_options(config, args)

    trace_path = outdir / "iterations.csv"
    with open(trace_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loglik", "lambda", "crit_param", "crit_fn", "crit_rdm"])

        def on_iteration(rec):
            writer.writerow(
                [rec.iteration, _fmt(rec.loglik), _fmt(rec.lam),
                 _fmt(rec.crit_param), _fmt(rec.crit_fn), _fmt(rec.crit_rdm)]
            )
            fh.flush()

        result = fit(ds, spec, options, trace_callback=on_iteration)

    _write_json(outdir / "fit.json", fit_result_to_dict(result))
    table = result.natural_table
    _write_csv(
        outdir / "natural_table.csv",
        ["name", "estimate", "se"],
        zip(table.names, table.estimates, table.ses),
    )
    # fixed effects and contrasts with the two-sided Wald p, table style
    rows = []
    se = result.se()
    from scipy.special import ndtr

    for j, name in enumerate(result.layout.names):
        if name.startswith("beta:") or name.startswith("contrast:"):
            z = result.theta[j] / se[j] if se[j] > 0 else np.nan
            p = 2.0 * ndtr(-abs(z)) if np.isfinite(z) else np.nan
            rows.append([name, result.theta[j], se[j], p])
    _write_csv(outdir / "fixed_effects.csv", ["name", "estimate", "se", "p"], rows)
    _write_manifest(
        outdir, "fit", config,
        {"seed": options.seed, "n_qmc": options.n_qmc, "threads": options.threads},
    )
    status = "converged" if result.converged else "NOT converged"
    print(
        f"fit {status} in {result.n_iter} iterations, loglik {result.loglik:.4f}; "
        f"wrote fit.json, natural_table.csv, fixed_effects.csv, iterations.csv"
    )


def cmd_predict(config: dict, outdir: Path, args) -> None:
    block = config["predict"]
    res = load_fit_result(block["fit"])
    grid = _grid(block, default=(0.0, 60.0, 61))
    draws = int(block.get("draws", 2000))
    seed = args.seed if args.seed is not None else int(block.get("seed", 2000))
    rows = []
    for name, profile in sorted(block["profiles"].items()):
        summary = marginal_trajectory(res, profile, grid, n_draws=draws, seed=seed)
        for t, est, lo, hi in zip(grid, summary.estimate, summary.lower, summary.upper):
            rows.append([name, t, est, lo, hi])
    _write_csv(outdir / "latent_trajectory.csv", ["profile", "time", "estimate", "lower", "upper"], rows)

    if block.get("items", True):
        n_qmc = int(block.get("qmc", 1000)) if args.qmc is None else args.qmc
        rows = []
        for name, profile in sorted(block["profiles"].items()):
            for item_id in res.layout.item_ids:
                summary = item_trajectory(
                    res, item_id, profile, grid, n_draws=draws, n_qmc=n_qmc, seed=seed
                )
                for t, est, lo, hi in zip(grid, summary.estimate, summary.lower, summary.upper):
                    rows.append([name, item_id, t, est, lo, hi])
        _write_csv(
            outdir / "item_trajectories.csv",
            ["profile", "item", "time", "estimate", "lower", "upper"],
            rows,
        )
    _write_manifest(outdir, "predict", config, {"seed": seed, "draws": draws})
    print(f"wrote latent_trajectory.csv{' and item_trajectories.csv' if block.get('items', True) else ''}")


def cmd_icc(config: dict, outdir: Path, args) -> None:
    block = config.get("icc", {})
    items = _item_params_for_curves(config, block)
    grid = _grid(block)
    ccc_rows, exp_rows = [], []
    for item_id, params in items:
        expect = item_expectation(params, grid)
        for level in range(params.n_levels):
            probs = category_prob(params, level, grid)
            ccc_rows.extend([item_id, level, lam, p] for lam, p in zip(grid, probs))
        exp_rows.extend([item_id, lam, e] for lam, e in zip(grid, expect))
    _write_csv(outdir / "category_curves.csv", ["item", "level", "latent", "probability"], ccc_rows)
    _write_csv(outdir / "item_expectation.csv", ["item", "latent", "expectation"], exp_rows)
    _write_manifest(outdir, "icc", config, {})
    print("wrote category_curves.csv and item_expectation.csv")


def cmd_information(config: dict, outdir: Path, args) -> None:
    block = config.get("information", {})
    items = _item_params_for_curves(config, block)
    grid = _grid(block)
    rows = []
    for item_id, params in items:
        info = item_information(params, grid)
        rows.extend([item_id, lam, v] for lam, v in zip(grid, info))
    _write_csv(outdir / "item_information.csv", ["item", "latent", "information"], rows)
    _write_manifest(outdir, "information", config, {})
    print("wrote item_information.csv")


def cmd_invariance(config: dict, outdir: Path, args) -> None:
    ds, _ = _load_dataset(config)
    spec = _model_spec(config)
    if not spec.dif_terms:
        raise ConfigError("invariance requires model.dif terms")
    options = _fit_options(config, args)
    block = config.get("invariance", {})
    report = invariance_report(
        ds, spec, options,
        mode=block.get("mode", "dif"),
        global_test_kind=block.get("global_test"),
    )
    _write_json(outdir / "invariance.json", report.to_json_dict())
    (outdir / "invariance.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    _write_manifest(outdir, "invariance", config, {"seed": options.seed, "n_qmc": options.n_qmc})
    print(report.to_text())


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "icc": cmd_icc,
    "information": cmd_information,
    "invariance": cmd_invariance,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="longirt",
        description="Continuous-time longitudinal item response theory models",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON run configuration")
    parser.add_argument("--out", default=None, help="output directory (default: config 'out' or '.')")
    parser.add_argument("--threads", type=int, default=None, help="cap on worker threads")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--qmc", type=int, default=None, help="override the QMC node count")
    args = parser.parse_args(argv)

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    outdir = Path(args.out or config.get("out", "."))
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        _COMMANDS[args.command](config, outdir, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

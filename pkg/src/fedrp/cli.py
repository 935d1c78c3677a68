"""Experiment runner: JSON config in, metrics CSV + summary out.

Usage: ``fedrp run --config experiment.json`` (or ``python -m fedrp ...``).
Exit codes: 0 ok, 1 config error, 2 data error, 3 divergence, 4 transport.
Log verbosity via the FEDRP_LOG environment variable (debug/info/warning).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Any

import numpy as np

from . import attack, data, orchestrator, privacy, rng
from .admm import DivergenceError
from .models import ModelSpec
from .transport import TransportClosedError

log = logging.getLogger("fedrp")

EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3
EXIT_TRANSPORT = 4

METRICS_COLUMNS = [
    "round", "algorithm", "mean_train_loss", "test_accuracy",
    "bytes_up", "bytes_down", "epsilon_round", "epsilon_cum", "wall_ms",
]
ATTACK_COLUMNS = ["seed", "scenario", "mse", "baseline_mse", "iterations"]


class ConfigDocumentError(ValueError):
    pass


_DEFAULTS = {
    "rho": 1.0,
    "delta": 0.01,
    "eval_model": "client_zero",
    "batch_size": 64,
    "learning_rate": 0.1,
    "sigma_min": 1e-3,
    "delta_sensitivity": 1.0,
    "transport": "loopback",
    "tcp_host": "127.0.0.1",
    "tcp_port": 0,
    "master_seed": 0,
    "local_epochs": 1,
}

_MODES = ("train", "verify-dp", "meter-only", "attack")

_KNOWN_KEYS = {
    "mode", "algorithm", "clients", "rounds", "local_epochs", "batch_size",
    "learning_rate", "rho", "m", "dp_sigma", "sigma_min", "delta",
    "delta_sensitivity", "eval_model", "master_seed", "model", "dataset",
    "transport", "tcp_host", "tcp_port", "paths", "verify_dp", "attack",
}

_MODEL_KEYS = {"architecture", "input_dim", "hidden_dims", "num_classes"}
_DATASET_KEYS = {
    "kind", "classes", "per_class", "test_per_class", "dim", "separation",
    "seed", "images", "labels", "test_images", "test_labels",
}
_PATH_KEYS = {"dataset_dir", "output_dir"}


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ConfigDocumentError(f"duplicate key {key!r} in config")
        seen[key] = value
    return seen


def _require(doc: dict, key: str, path: str = "") -> Any:
    if key not in doc:
        raise ConfigDocumentError(f"missing required key {path + key!r}")
    return doc[key]


def _check_unknown(doc: dict, allowed: set[str], path: str = "") -> None:
    unknown = set(doc) - allowed
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigDocumentError(f"unknown key {path + name!r}")


def parse_config(path: str | Path) -> dict:
    """Load, validate and default-fill a config document."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigDocumentError(f"cannot read config: {exc}") from exc
    try:
        doc = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as exc:
        raise ConfigDocumentError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigDocumentError("config must be a JSON object")
    _check_unknown(doc, _KNOWN_KEYS)

    mode = _require(doc, "mode")
    if mode not in _MODES:
        raise ConfigDocumentError(f"'mode' must be one of {_MODES}, got {mode!r}")

    paths = doc.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigDocumentError("'paths' must be an object")
    _check_unknown(paths, _PATH_KEYS, "paths.")
    _require(paths, "output_dir", "paths.")
    doc["paths"] = paths

    for key, default in _DEFAULTS.items():
        doc.setdefault(key, default)

    if mode in ("train", "meter-only"):
        algorithm = _require(doc, "algorithm")
        if algorithm not in orchestrator.ALGORITHMS:
            raise ConfigDocumentError(
                f"'algorithm' must be one of {orchestrator.ALGORITHMS}, got {algorithm!r}"
            )
        model = _require(doc, "model")
        _check_unknown(model, _MODEL_KEYS, "model.")
        for key in ("architecture", "input_dim", "num_classes"):
            _require(model, key, "model.")
        _require(doc, "rounds")
        if algorithm == "fedrp" and "m" not in doc:
            raise ConfigDocumentError("missing required key 'm' (fedrp needs the projected dimension)")
        if algorithm == "fedavg_dp" and "dp_sigma" not in doc:
            raise ConfigDocumentError("missing required key 'dp_sigma' (fedavg_dp needs the noise level)")
    if mode == "train":
        _require(doc, "clients")
        dataset = _require(doc, "dataset")
        _check_unknown(dataset, _DATASET_KEYS, "dataset.")
        if _require(dataset, "kind", "dataset.") not in ("synth", "idx"):
            raise ConfigDocumentError("dataset.kind must be 'synth' or 'idx'")
    if mode == "meter-only":
        doc.setdefault("clients", 1)
    return doc


def _model_from_doc(model_doc: dict) -> ModelSpec:
    return ModelSpec(
        architecture=model_doc["architecture"],
        input_dim=int(model_doc["input_dim"]),
        num_classes=int(model_doc["num_classes"]),
        hidden_dims=tuple(model_doc.get("hidden_dims", ())),
    )


def _experiment_config(doc: dict) -> orchestrator.ExperimentConfig:
    try:
        return orchestrator.ExperimentConfig(
            algorithm=doc["algorithm"],
            model=_model_from_doc(doc["model"]),
            num_clients=int(doc["clients"]),
            rounds=int(doc["rounds"]),
            local_epochs=int(doc["local_epochs"]),
            batch_size=int(doc["batch_size"]),
            learning_rate=float(doc["learning_rate"]),
            rho=float(doc["rho"]),
            m=None if doc.get("m") is None else int(doc["m"]),
            dp_sigma=None if doc.get("dp_sigma") is None else float(doc["dp_sigma"]),
            sigma_min=float(doc["sigma_min"]),
            delta=float(doc["delta"]),
            delta_sensitivity=float(doc["delta_sensitivity"]),
            eval_model=doc["eval_model"],
            transport_mode=doc["transport"],
            tcp_host=doc["tcp_host"],
            tcp_port=int(doc["tcp_port"]),
            master_seed=int(doc["master_seed"]),
        )
    except (orchestrator.ConfigError, KeyError, TypeError, ValueError) as exc:
        raise ConfigDocumentError(f"invalid experiment config: {exc}") from exc


def _load_datasets(doc: dict) -> tuple[data.Dataset, data.Dataset]:
    src = doc["dataset"]
    kind = src["kind"]
    if kind == "synth":
        seed = int(src.get("seed", doc["master_seed"]))
        train = data.synth_gaussian(
            classes=int(src["classes"]), per_class=int(src["per_class"]),
            dim=int(src["dim"]), separation=float(src["separation"]), seed=seed,
        )
        test = data.synth_gaussian(
            classes=int(src["classes"]), per_class=int(src.get("test_per_class", src["per_class"])),
            dim=int(src["dim"]), separation=float(src["separation"]), seed=seed + 1,
        )
        return train, test
    base = Path(doc["paths"].get("dataset_dir", "."))
    train = data.load_idx(base / src["images"], base / src["labels"])
    test = data.load_idx(base / src["test_images"], base / src["test_labels"])
    return train, test


def _metrics_rows(result: orchestrator.RunResult) -> list[dict]:
    rows = []
    for m in result.metrics:
        rows.append({
            "round": m.round,
            "algorithm": result.config.algorithm,
            "mean_train_loss": f"{m.mean_train_loss:.10g}",
            "test_accuracy": f"{m.test_accuracy:.10g}",
            "bytes_up": m.bytes_up_per_client,
            "bytes_down": m.bytes_down_per_client,
            # absent (empty), not zero, for algorithms without accounting semantics
            "epsilon_round": "" if m.epsilon_round is None else f"{m.epsilon_round:.10g}",
            "epsilon_cum": "" if m.epsilon_cumulative is None else f"{m.epsilon_cumulative:.10g}",
            "wall_ms": f"{m.wall_time * 1e3:.3f}",
        })
    return rows


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


def _write_outputs(doc: dict, out_dir: Path, rows: list[dict], columns: list[str], summary: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "metrics.csv", columns, rows)
    (out_dir / "resolved_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    (out_dir / "summary.txt").write_text(summary)
    log.info("wrote %s", out_dir / "metrics.csv")


def _run_train(doc: dict, out_dir: Path) -> int:
    cfg = _experiment_config(doc)
    train_ds, test_ds = _load_datasets(doc)
    result = orchestrator.run_experiment(cfg, train_ds, test_ds)
    rows = _metrics_rows(result)
    last = result.metrics[-1]
    lines = [
        f"algorithm: {cfg.algorithm}",
        f"rounds: {cfg.rounds}  clients: {cfg.num_clients}  local_epochs: {cfg.local_epochs}",
        f"final_accuracy: {result.final_accuracy:.4f}",
        f"bytes_up_per_client_total: {sum(m.bytes_up_per_client for m in result.metrics)}",
        f"bytes_down_per_client_total: {sum(m.bytes_down_per_client for m in result.metrics)}",
        f"seed_envelope_bytes_total: {result.envelope_bytes_total}",
        f"epsilon_total: {'n/a' if last.epsilon_cumulative is None else f'{last.epsilon_cumulative:.6g}'}",
        f"max_client_param_step_diagnostic: {result.max_param_step:.6g}",
        "",
    ]
    _write_outputs(doc, out_dir, rows, METRICS_COLUMNS, "\n".join(lines))
    return 0


def _run_meter_only(doc: dict, out_dir: Path) -> int:
    cfg = _experiment_config(doc)
    preview = orchestrator.meter_preview(cfg)
    rows = [{
        "round": r,
        "algorithm": cfg.algorithm,
        "mean_train_loss": "",
        "test_accuracy": "",
        "bytes_up": preview["bytes_up_per_client_per_round"],
        "bytes_down": preview["bytes_down_per_client_per_round"],
        "epsilon_round": "",
        "epsilon_cum": "",
        "wall_ms": "",
    } for r in range(cfg.rounds)]
    up = preview["bytes_up_per_client_per_round"]
    summary = (
        f"algorithm: {cfg.algorithm}\n"
        f"param_count: {preview['param_count']}\n"
        f"bytes_up_per_client_per_round: {up} ({up / 1000:.6g} KB)\n"
        f"bytes_up_total_per_client: {preview['bytes_up_total_per_client']}\n"
    )
    _write_outputs(doc, out_dir, rows, METRICS_COLUMNS, summary)
    return 0


_VERIFY_GRID_DEFAULT = {
    "m": [1, 10, 100],
    "delta": [0.1, 0.01],
    "sensitivity_ratio": [0.01, 0.1, 1.0],
    "trials": 100_000,
    "seed": 0,
}


def run_verify_grid(
    m_values, delta_values, ratio_values, trials: int, seed: int,
    include_falsification: bool = True,
) -> dict:
    """The full verification grid plus the halved-epsilon falsification run."""
    cells = []
    all_pass = True
    for m in m_values:
        for delta in delta_values:
            for ratio in ratio_values:
                budget = privacy.FedRpBudget(
                    delta_sensitivity=ratio, sigma_min=1.0, m=m, delta=delta
                )
                report = privacy.verify_dp_empirical(
                    budget, trials, rng.derive_seed(seed, "grid", m, str(delta), str(ratio))
                )
                cells.append({
                    "m": m, "delta": delta, "ratio": ratio,
                    "epsilon": report.epsilon,
                    "upper_violations": report.upper_bound_violations,
                    "lower_tail_mass": report.lower_tail_mass,
                    "lower_tail_limit": report.lower_tail_limit,
                    "passed": report.passed,
                })
                all_pass = all_pass and report.passed
    falsification = None
    if include_falsification:
        budget = privacy.FedRpBudget(delta_sensitivity=0.01, sigma_min=1.0, m=1, delta=0.01)
        halved = privacy.epsilon_fedrp(budget) / 2.0
        report = privacy.verify_dp_empirical(
            budget, trials, rng.derive_seed(seed, "falsify"), epsilon=halved
        )
        falsification = {
            "epsilon_halved": halved,
            "lower_tail_mass": report.lower_tail_mass,
            "lower_tail_limit": report.lower_tail_limit,
            "passed": report.passed,
        }
        all_pass = all_pass and not report.passed  # the broken claim must be caught
    return {"cells": cells, "falsification": falsification, "all_pass": all_pass}


def _run_verify_dp(doc: dict, out_dir: Path) -> int:
    grid = dict(_VERIFY_GRID_DEFAULT)
    grid.update(doc.get("verify_dp", {}))
    outcome = run_verify_grid(
        grid["m"], grid["delta"], grid["sensitivity_ratio"], int(grid["trials"]), int(grid["seed"])
    )
    columns = ["m", "delta", "ratio", "epsilon", "upper_violations",
               "lower_tail_mass", "lower_tail_limit", "passed"]
    rows = [{k: cell[k] for k in columns} for cell in outcome["cells"]]
    fals = outcome["falsification"]
    lines = [f"grid cells: {len(rows)}"]
    lines += [
        f"m={c['m']} delta={c['delta']} ratio={c['ratio']}: "
        f"eps={c['epsilon']:.6g} upper={c['upper_violations']} "
        f"lower={c['lower_tail_mass']:.6g} (limit {c['lower_tail_limit']:.6g}) "
        f"{'PASS' if c['passed'] else 'FAIL'}"
        for c in outcome["cells"]
    ]
    if fals is not None:
        lines.append(
            f"falsification (halved eps={fals['epsilon_halved']:.6g}): "
            f"lower={fals['lower_tail_mass']:.6g} (limit {fals['lower_tail_limit']:.6g}) "
            f"verifier {'caught it' if not fals['passed'] else 'MISSED IT'}"
        )
    lines.append(f"overall: {'PASS' if outcome['all_pass'] else 'FAIL'}")
    lines.append("")
    _write_outputs(doc, out_dir, rows, columns, "\n".join(lines))
    return 0 if outcome["all_pass"] else EXIT_CONFIG


def _run_attack(doc: dict, out_dir: Path) -> int:
    params = doc.get("attack", {})
    outcome = attack.run_attack_benchmark(
        num_seeds=int(params.get("seeds", 20)),
        input_dim=int(params.get("input_dim", 16)),
        iters=int(params.get("iters", 2000)),
        m=int(params.get("m", 1)),
        seed=int(params.get("seed", 0)),
    )
    rows = []
    for s, (d_mse, r_mse, b_mse) in enumerate(
        zip(outcome["dlg_mses"], outcome["fedrp_mses"], outcome["baseline_mses"])
    ):
        rows.append({"seed": s, "scenario": "dlg_fedavg_gradient", "mse": f"{d_mse:.10g}",
                     "baseline_mse": f"{b_mse:.10g}", "iterations": ""})
        rows.append({"seed": s, "scenario": "fedrp_projected", "mse": f"{r_mse:.10g}",
                     "baseline_mse": f"{b_mse:.10g}", "iterations": ""})
    summary = (
        f"median dlg mse: {outcome['median_dlg']:.6g}\n"
        f"median projected-attack mse: {outcome['median_fedrp']:.6g}\n"
        f"median random baseline mse: {outcome['median_baseline']:.6g}\n"
        f"rank test p (attack better than random): {outcome['rank_test_p']:.4f}\n"
    )
    _write_outputs(doc, out_dir, rows, ATTACK_COLUMNS, summary)
    return 0


def run(doc: dict) -> int:
    """Dispatch a parsed config document; returns the process exit code."""
    out_dir = Path(doc["paths"]["output_dir"])
    mode = doc["mode"]
    try:
        if mode == "train":
            return _run_train(doc, out_dir)
        if mode == "meter-only":
            return _run_meter_only(doc, out_dir)
        if mode == "verify-dp":
            return _run_verify_dp(doc, out_dir)
        return _run_attack(doc, out_dir)
    except ConfigDocumentError:
        raise
    except orchestrator.ConfigError as exc:
        raise ConfigDocumentError(str(exc)) from exc
    except data.DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        log.error("divergence at round=%s client=%s: %s", exc.round_index, exc.client_id, exc)
        return EXIT_DIVERGENCE
    except (orchestrator.RoundAbortError, TransportClosedError) as exc:
        log.error("transport failure: %s", exc)
        return EXIT_TRANSPORT


def main(argv: list[str] | None = None) -> int:
    level = os.environ.get("FEDRP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = argparse.ArgumentParser(prog="fedrp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run_parser = sub.add_parser("run", help="execute an experiment or verification suite")
    run_parser.add_argument("--config", required=True, help="path to a JSON config document")
    args = parser.parse_args(argv)

    try:
        doc = parse_config(args.config)
        return run(doc)
    except ConfigDocumentError as exc:
        log.error("config error: %s", exc)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

"""Command-line driver.

    photocore-sim <command> --config cfg.toml [--seed N] [--out DIR]

Commands: simulate, sweep, sensitivity, ablation, rangeutil, energy,
genfixture, dnf.  The config is one TOML document with flat sections ([run],
[photocore], [cost], [sweep], [ablation], [rangeutil], [genfixture], [dnf]);
--seed and --out override [run] seed/out.

Every command is a pure function of (config, seed): outputs carry no
timestamps, floats are written in shortest round-trip form, and all
randomness is derived from the one top-level seed via purpose strings
(analog noise uses derive_seed(seed, "photocore-noise"), fixture generation
derive_seed(seed, "genfixture"), training derive_seed(seed, "dnf-train-seed")),
so reruns are byte-identical and sub-experiments are independently
reproducible.  Config or file problems exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import analysis, costmodel, dnf, fixtures
from .model import (
    ModelFormatError,
    ModelGraph,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .photocore import PhotocoreConfig
from .rng import derive_seed
from .tensor import Tensor, TensorFileError, save_tensor

COMMANDS = ("simulate", "sweep", "sensitivity", "ablation", "rangeutil",
            "energy", "genfixture", "dnf")


class ConfigError(Exception):
    """Bad or missing configuration; exits with status 2."""


# ---------------------------------------------------------------------------
# config plumbing


def _load_toml(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from exc


def _section(doc: dict, name: str) -> dict:
    sec = doc.get(name, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"[{name}] must be a table")
    return dict(sec)


def _require(sec: dict, section: str, key: str):
    if key not in sec:
        raise ConfigError(f"missing required key {key!r} in [{section}]")
    return sec[key]


def _photocore_config(doc: dict, seed: int) -> PhotocoreConfig:
    sec = _section(doc, "photocore")
    sec.pop("rng_seed", None)  # the top-level seed is the only seed
    allowed = {"tile_size", "input_bits", "weight_bits", "output_bits", "gain",
               "noise_sigma", "bypass", "scale_mode"}
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown [photocore] keys: {sorted(unknown)}")
    if "tile_size" not in sec:
        raise ConfigError("missing required key 'tile_size' in [photocore]")
    try:
        return PhotocoreConfig(rng_seed=derive_seed(seed, "photocore-noise"), **sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [photocore] config: {exc}") from exc


def _cost_params(doc: dict) -> costmodel.CostParams:
    sec = _section(doc, "cost")
    allowed = {"alpha", "beta", "t_mvp", "t_weight_send", "t_weight_load"}
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown [cost] keys: {sorted(unknown)}")
    try:
        return costmodel.CostParams(**sec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [cost] config: {exc}") from exc


def _load_inputs(run: dict, config_dir: Path) -> tuple[ModelGraph, list]:
    model_path = config_dir / _require(run, "run", "model")
    data_path = config_dir / _require(run, "run", "dataset")
    if not model_path.exists():
        raise ConfigError(f"model file does not exist: {model_path}")
    model = load_model(model_path)
    dataset = load_dataset(data_path)
    return model, dataset


def _out_dir(run: dict, override: str | None, config_dir: Path) -> Path:
    out = override if override is not None else run.get("out", "out")
    path = Path(out)
    if not path.is_absolute():
        path = config_dir / path
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------------------
# deterministic emission


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        raise TypeError("no boolean CSV cells")
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_csv(path: Path, header: str, rows) -> None:
    lines = [header]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _report_doc(rep: analysis.MetricReport) -> dict:
    doc = {
        "pixel_accuracy": rep.pixel_accuracy,
        "miou": rep.miou,
        "per_class_iou": {str(k): v for k, v in sorted(rep.per_class_iou.items())},
    }
    if rep.percent_of_fp32 is not None:
        doc["percent_of_fp32"] = rep.percent_of_fp32
    return doc


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(doc: dict, seed: int, out: Path, config_dir: Path) -> None:
    run = _section(doc, "run")
    model, dataset = _load_inputs(run, config_dir)
    cfg = _photocore_config(doc, seed)
    cost = _cost_params(doc)
    batch = int(run.get("batch", 1))
    base = analysis.evaluate_dataset(model, dataset)
    rep = analysis.evaluate_dataset(model, dataset, cfg).vs_fp32(base)
    stats = costmodel.workload_stats(model, cfg.tile_size, batch)
    for i, sample in enumerate(dataset):
        pred = analysis.predict_mask(model, sample, cfg, noise=analysis.sample_noise(cfg, i))
        save_tensor(Tensor(pred.astype(np.float32)), out / f"pred_{i:04d}.pcten")
    _write_json(
        out / "report.json",
        {
            "simulated": _report_doc(rep),
            "fp32": _report_doc(base),
            "energy_rel": costmodel.energy(model, cfg.tile_size, cfg.gain, batch, cost),
            "throughput_ips": costmodel.throughput(model, cfg.tile_size, cfg.gain, batch, cost),
            "utilization": stats.utilization,
            "config": {
                "tile_size": cfg.tile_size,
                "gain": cfg.gain,
                "bypass": cfg.bypass,
                "scale_mode": cfg.scale_mode,
                "noise_sigma_counts": cfg.sigma_counts,
                "seed": seed,
                "batch": batch,
            },
        },
    )


def _grids(doc: dict) -> tuple[list[int], list[float]]:
    sec = _section(doc, "sweep")
    tiles = sec.get("tile_sizes")
    gains = sec.get("gains", [None])
    if not isinstance(tiles, list) or not tiles:
        raise ConfigError("[sweep] tile_sizes must be a non-empty list")
    if not isinstance(gains, list) or not gains:
        raise ConfigError("[sweep] gains must be a non-empty list")
    return [int(n) for n in tiles], gains


def cmd_sweep(doc: dict, seed: int, out: Path, config_dir: Path) -> None:
    run = _section(doc, "run")
    model, dataset = _load_inputs(run, config_dir)
    cfg = _photocore_config(doc, seed)
    cost = _cost_params(doc)
    tiles, gains = _grids(doc)
    gains = [cfg.gain if g is None else float(g) for g in gains]
    rows = analysis.sweep(model, dataset, sorted(tiles), sorted(gains), cfg, cost,
                          int(run.get("batch", 1)))
    _write_csv(
        out / "sweep.csv",
        "n,gain,miou,pixel_acc,energy_rel,throughput_ips,utilization",
        [
            (r.tile_size, r.gain, r.miou, r.pixel_acc, r.energy_rel,
             r.throughput_ips, r.utilization)
            for r in rows
        ],
    )


def cmd_sensitivity(doc: dict, seed: int, out: Path, config_dir: Path) -> None:
    run = _section(doc, "run")
    model, dataset = _load_inputs(run, config_dir)
    cfg = _photocore_config(doc, seed)
    rows = analysis.layer_sensitivity_scan(model, dataset, cfg)
    _write_csv(
        out / "sensitivity.csv",
        "layer_index,layer_kind,miou_fp32,miou_quantized,miou_drop",
        [
            (r.layer_index, r.layer_kind, r.miou_fp32, r.miou_quantized, r.miou_drop)
            for r in rows
        ],
    )


def cmd_ablation(doc: dict, seed: int, out: Path, config_dir: Path) -> None:
    run = _section(doc, "run")
    model, dataset = _load_inputs(run, config_dir)
    cfg = _photocore_config(doc, seed)
    sec = _section(doc, "ablation")
    layer_index = int(_require(sec, "ablation", "layer_index"))
    base = analysis.evaluate_dataset(model, dataset)
    try:
        table = analysis.quantization_ablation(model, dataset, cfg, layer_index)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    def pct(part: float, whole: float) -> float:
        return 100.0 * part / whole if whole else 0.0

    _write_csv(
        out / "ablation.csv",
        "setting,pixel_acc_pct_fp32,miou_pct_fp32",
        [
            (setting, pct(rep.pixel_accuracy, base.pixel_accuracy),
             pct(rep.miou, base.miou))
            for setting, rep in table.items()
        ],
    )


def cmd_rangeutil(doc: dict, seed: int, out: Path, config_dir: Path) -> None:
    del seed  # FP32 statistics; nothing random
    run = _section(doc, "run")
    model, dataset = _load_inputs(run, config_dir)
    sec = _section(doc, "rangeutil")
    layer_index = int(_require(sec, "rangeutil", "layer_index"))
    bits = int(sec.get("output_bits", 11))
    try:
        ru = analysis.range_utilization(model, dataset, layer_index, bits)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _write_csv(
        out / "rangeutil.csv",
        "layer_index,max_abs,three_sigma_level_fraction",
        [(ru.layer_index, ru.max_abs, ru.three_sigma_level_fraction)],
    )
    levels = (len(ru.histogram) - 1) // 2
    grid = np.arange(-levels, levels + 1) / levels
    _write_csv(
        out / "rangeutil_hist.csv",
        "level,probability",
        list(zip(grid.tolist(), ru.histogram.tolist())),
    )


def cmd_energy(doc: dict, seed: int, out: Path, config_dir: Path) -> None:
    del seed  # analytic
    run = _section(doc, "run")
    model, _dataset = _load_inputs(run, config_dir)
    cost = _cost_params(doc)
    tiles, gains = _grids(doc)
    gains = [4.0 if g is None else float(g) for g in gains]
    batch = int(run.get("batch", 1))
    rows = []
    for n in sorted(tiles):
        stats = costmodel.workload_stats(model, n, batch)
        t = costmodel.workload_time(stats, cost)
        for g in sorted(gains):
            p = costmodel.power(g, n, cost)
            rows.append((n, g, t, p, t * p, stats.utilization))
    _write_csv(out / "energy.csv", "n,gain,time_rel,power_rel,energy_rel,utilization", rows)


def cmd_genfixture(doc: dict, seed: int, out: Path, config_dir: Path) -> None:
    del config_dir
    sec = _section(doc, "genfixture")
    kind = _require(sec, "genfixture", "kind")
    count = int(sec.get("count", 8))
    try:
        model, dataset = fixtures.build_fixture(kind, derive_seed(seed, "genfixture"), count)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    save_model(model, out / "model.json")
    save_dataset(dataset, out / "data")


def cmd_dnf(doc: dict, seed: int, out: Path, config_dir: Path) -> None:
    run = _section(doc, "run")
    model, dataset = _load_inputs(run, config_dir)
    eval_data = dataset
    if "eval_dataset" in run:
        eval_data = load_dataset(config_dir / run["eval_dataset"])
    cfg = _photocore_config(doc, seed)
    sec = _section(doc, "dnf")
    try:
        tc = dnf.TrainConfig(
            learning_rate=float(_require(sec, "dnf", "learning_rate")),
            epochs=int(sec.get("epochs", 1)),
            batch_size=int(sec.get("batch_size", 4)),
            rng_seed=derive_seed(seed, "dnf-train-seed"),
        )
    except ValueError as exc:
        raise ConfigError(f"bad [dnf] config: {exc}") from exc
    min_samples = int(sec.get("min_samples", 10000))
    profile = dnf.estimate_noise_profile(model, dataset, cfg, min_samples)
    dnf.save_profile(profile, out / "profile.json")
    trained = dnf.dnf_train(model, dataset, profile, tc)
    save_model(trained, out / "model_dnf.json")
    base = analysis.evaluate_dataset(model, eval_data)
    before = analysis.evaluate_dataset(model, eval_data, cfg).vs_fp32(base)
    after = analysis.evaluate_dataset(trained, eval_data, cfg).vs_fp32(base)
    _write_json(
        out / "dnf_report.json",
        {"fp32": _report_doc(base), "before": _report_doc(before), "after": _report_doc(after)},
    )


_DISPATCH = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "sensitivity": cmd_sensitivity,
    "ablation": cmd_ablation,
    "rangeutil": cmd_rangeutil,
    "energy": cmd_energy,
    "genfixture": cmd_genfixture,
    "dnf": cmd_dnf,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="photocore-sim", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML config file")
    parser.add_argument("--seed", type=int, default=None, help="override [run] seed")
    parser.add_argument("--out", default=None, help="override [run] out directory")
    args = parser.parse_args(argv)

    config_path = Path(args.config)
    try:
        doc = _load_toml(config_path)
        run = _section(doc, "run")
        seed = args.seed if args.seed is not None else int(run.get("seed", 0))
        out = _out_dir(run, args.out, config_path.parent)
        _DISPATCH[args.command](doc, seed, out, config_path.parent)
    except (ConfigError, ModelFormatError, TensorFileError, FileNotFoundError) as exc:
        print(f"photocore-sim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except dnf.TrainingDivergedError as exc:
        print(f"photocore-sim {args.command}: diverged: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - last-resort diagnostics
        print(f"photocore-sim {args.command}: unexpected failure: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

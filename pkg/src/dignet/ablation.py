"""Ablation sweeps: enumerate network variants, train each per seed, collect val metrics."""

from __future__ import annotations

import csv
import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

from .data import Dataset
from .model import NetworkConfig, RoutingVariant
from .training import TrainConfig, evaluate, train

AXES = ("routing", "T", "gating-extent", "modulator")
CSV_FIELDS = ("variant", "T", "miou", "pacc", "macc", "seed")
ROUTING_ORDER = ("none", "stage_wise", "last_layer", "cascaded_dig")
T_VALUES = (1, 2, 3, 4)


@dataclass(frozen=True)
class Case:
    variant: str
    network: NetworkConfig


def mask_label(mask: Sequence[bool]) -> str:
    """Stage 1 first, e.g. ``mask=000111`` gates the top three stages."""
    return "mask=" + "".join("1" if m else "0" for m in mask)


def top_down_masks(num_stages: int) -> list[tuple]:
    """No gating, then the deepest stage, then the two deepest, ... up to all stages."""
    return [tuple(i >= num_stages - k for i in range(num_stages)) for k in range(num_stages + 1)]


def cases_for_axis(axis: str, base: NetworkConfig) -> list[Case]:
    replace = dataclasses.replace
    if axis == "routing":
        return [Case(r, replace(base, routing=r, T=t)) for r in ROUTING_ORDER for t in T_VALUES]
    if axis == "T":
        return [Case(base.routing.value, replace(base, T=t)) for t in T_VALUES]
    if axis == "gating-extent":
        return [Case(mask_label(m), replace(base, gating_mask=m))
                for m in top_down_masks(base.num_stages)]
    if axis == "modulator":
        return [Case("modulator=1x1", replace(base, pyramid_rates=())),
                Case("modulator=pyramid", base if base.pyramid_rates else
                     replace(base, pyramid_rates=(1, 3, 5, 7)))]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {', '.join(AXES)}")


def run_case(case: Case, dataset: Dataset, seed: int, epochs: int,
             train_config: TrainConfig) -> dict:
    result = train(case.network, dataset, epochs, seed, train_config)
    metrics = evaluate(result.model, dataset.val, dataset.num_classes,
                       train_config.eval_batch_size)
    return {"variant": case.variant, "T": case.network.T, "miou": metrics["miou"],
            "pacc": metrics["pacc"], "macc": metrics["macc"], "seed": seed}


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("DIGNET_THREADS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"DIGNET_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("DIGNET_THREADS must be at least 1")
    return n


def run_ablation(cases: Sequence[Case], dataset: Dataset, seeds: Iterable[int], epochs: int,
                 train_config: TrainConfig, threads: int = 1) -> list[dict]:
    """Rows ordered by case, then seed, whatever order the workers finish in."""
    jobs = [(c, s) for c in cases for s in seeds]
    if threads <= 1:
        return [run_case(c, dataset, s, epochs, train_config) for c, s in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(run_case, c, dataset, s, epochs, train_config) for c, s in jobs]
        return [f.result() for f in futures]


def write_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{row[k]:.6f}" if isinstance(row[k], float) else row[k])
                             for k in CSV_FIELDS})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{"variant": r["variant"], "T": int(r["T"]), "miou": float(r["miou"]),
                 "pacc": float(r["pacc"]), "macc": float(r["macc"]), "seed": int(r["seed"])}
                for r in csv.DictReader(fh)]


def median_by_case(rows: Sequence[dict], key: str = "miou") -> dict:
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["variant"], r["T"]), []).append(r[key])
    out = {}
    for k, vals in groups.items():
        vals = sorted(vals)
        mid = len(vals) // 2
        out[k] = vals[mid] if len(vals) % 2 else 0.5 * (vals[mid - 1] + vals[mid])
    return out


__all__ = ["AXES", "CSV_FIELDS", "Case", "RoutingVariant", "cases_for_axis", "median_by_case",
           "read_csv", "run_ablation", "run_case", "thread_count", "top_down_masks",
           "write_csv"]

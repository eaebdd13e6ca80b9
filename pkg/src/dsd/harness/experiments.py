"""Ablation sweeps over one scoring axis at a time."""

from __future__ import annotations

from dataclasses import replace
from itertools import combinations
from typing import Sequence

from .. import data_synth
from ..adapt import metrics_from_scores
from ..diffusion import DSDModel
from ..errors import ConfigError
from ..scoring import ScoreConfig, score_matrices

AXES = ("layers", "heads", "pooling", "noise")
NOISE_SINGLE_LEVELS = (0.4, 0.8)


def strict_subsets(n: int) -> list[tuple[int, ...]]:
    """Every non-empty proper subset of range(n), smallest first."""
    return [c for k in range(1, n) for c in combinations(range(n), k)]


def axis_settings(axis: str, base: ScoreConfig, n_layers: int) -> list[tuple[str, ScoreConfig]]:
    if axis == "layers":
        out = [("all", replace(base, layer_set=None))]
        out += [(",".join(map(str, s)), replace(base, layer_set=s)) for s in strict_subsets(n_layers)]
        return out
    if axis == "heads":
        return [(m, replace(base, head_mode=m)) for m in ("dynamic", "uniform")]
    if axis == "pooling":
        return [(p, replace(base, pooling=p)) for p in ("lse", "max", "cosine")]
    if axis == "noise":
        out = [(f"{v:g}", replace(base, noise_levels=(v,), ensemble=False)) for v in NOISE_SINGLE_LEVELS]
        out.append(("ensemble", ScoreConfig.ensembled(**_without_levels(base))))
        return out
    raise ConfigError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def _without_levels(cfg: ScoreConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d.pop("noise_levels")
    d.pop("ensemble")
    return d


def run_ablation(
    model: DSDModel,
    instances: Sequence[data_synth.MatchInstance],
    axis: str,
    base: ScoreConfig = ScoreConfig(),
    prompts=None,
) -> list[dict]:
    """One row per setting: top-1, top-5 and per-slot accuracy."""
    settings = axis_settings(axis, base, model.config.layers)
    mats = score_matrices(model, instances, [cfg for _, cfg in settings], prompts)
    rows = []
    for (name, _), scores in zip(settings, mats):
        m = metrics_from_scores(scores, instances)
        row = {"setting": name, "top1": m["top1"], "top5": m["top5"]}
        row.update({f"slot_{k}": v for k, v in m["per_slot"].items()})
        rows.append(row)
    return rows

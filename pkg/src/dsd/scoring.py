"""Matching scores from cross-attention maps.

A pass of the denoiser over (noisy image latent, caption) yields one
attention map per (layer, head).  Each map is pooled over image tokens into
one value per text token, the text-token values are averaged (start token
excluded), heads are combined uniformly or with attribution-derived
weights, and layers are averaged.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import data_synth
from .diffusion import AttentionRecord, DSDModel, denoiser_forward, noise_latent
from .errors import ConfigError, ParameterError, UsageError
from .numerics import (
    Tensor,
    amax,
    backward,
    divide,
    enable_grad,
    getitem,
    logsumexp_over_rows,
    mean,
    multiply,
    no_grad,
    sqrt,
    stack,
    sum_,
)

POOLINGS = ("lse", "max", "cosine")
HEAD_MODES = ("uniform", "dynamic")
ENSEMBLE_LEVELS = (0.2, 0.4, 0.6, 0.8)
DEFAULT_LEVEL = 0.4
STREAM_NOISE = 20


@dataclass(frozen=True)
class ScoreConfig:
    lam: float = 5.0
    layer_set: tuple[int, ...] | None = None  # None: every layer
    head_set: tuple[int, ...] | None = None  # None: every head
    head_mode: str = "dynamic"
    pooling: str = "lse"
    noise_levels: tuple[float, ...] = (DEFAULT_LEVEL,)
    ensemble: bool = False
    include_bos: bool = False
    noise_draws: int = 1
    calibration: tuple[float, float] = (1.0, 0.0)

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if self.layer_set is not None and len(self.layer_set) == 0:
            raise ConfigError("layer_set must not be empty")
        if self.head_set is not None and len(self.head_set) == 0:
            raise ConfigError("head_set must not be empty")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}, got {self.head_mode!r}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if not self.noise_levels or any(not 0.0 < v < 1.0 for v in self.noise_levels):
            raise ConfigError(f"noise levels must be a non-empty subset of (0, 1), got {self.noise_levels}")
        if not self.ensemble and len(self.noise_levels) != 1:
            raise ConfigError("several noise levels given without the ensemble flag")
        if self.noise_draws < 1:
            raise ConfigError(f"noise_draws must be >= 1, got {self.noise_draws}")

    @classmethod
    def ensembled(cls, **kw) -> "ScoreConfig":
        return cls(noise_levels=ENSEMBLE_LEVELS, ensemble=True, **kw)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "layer_set": None if self.layer_set is None else list(self.layer_set),
            "head_set": None if self.head_set is None else list(self.head_set),
            "head_mode": self.head_mode,
            "pooling": self.pooling,
            "noise_levels": list(self.noise_levels),
            "ensemble": self.ensemble,
            "include_bos": self.include_bos,
            "noise_draws": self.noise_draws,
            "calibration": list(self.calibration),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreConfig":
        return cls(
            lam=d["lambda"],
            layer_set=None if d["layer_set"] is None else tuple(d["layer_set"]),
            head_set=None if d.get("head_set") is None else tuple(d["head_set"]),
            head_mode=d["head_mode"],
            pooling=d["pooling"],
            noise_levels=tuple(d["noise_levels"]),
            ensemble=d["ensemble"],
            include_bos=d.get("include_bos", False),
            noise_draws=d.get("noise_draws", 1),
            calibration=tuple(d.get("calibration", (1.0, 0.0))),
        )


@dataclass
class MatchScore:
    """Score of one (image, caption) pair.

    ``breakdown[l, h]`` is the weighted contribution of head ``heads[h]`` in
    layer ``layers[l]``: ``raw == breakdown.sum(-1).mean(-1)`` exactly.
    """

    raw: float
    calibrated: float
    breakdown: np.ndarray
    head_weights: np.ndarray
    layers: tuple[int, ...]
    heads: tuple[int, ...]
    columns: np.ndarray | None = None
    per_level: dict[float, float] = field(default_factory=dict)

    def aggregate(self) -> float:
        return float(aggregate(self.breakdown))


def aggregate(contributions: np.ndarray) -> np.ndarray:
    return contributions.sum(axis=-1).mean(axis=-1)


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def calibrate(raw, calibration: tuple[float, float]):
    a, b = calibration
    return _sigmoid(a * np.asarray(raw) + b)


# ---------------------------------------------------------------------------
# Pooling


def pool_lse(A: Tensor, lam: float) -> Tensor:
    """Per text token, smooth max over image tokens (axis -2)."""
    return logsumexp_over_rows(A, lam)


def pool_max(A: Tensor) -> Tensor:
    return amax(A, axis=-2)


def pool_cosine(r_x: Tensor, r_y: Tensor) -> Tensor:
    """Cosine of mean-pooled image and text tokens over their shared leading dims.

    A zero vector on either side scores 0.
    """
    k = min(r_x.shape[-1], r_y.shape[-1])
    u = getitem(mean(r_x, axis=-2), (Ellipsis, slice(0, k)))
    v = getitem(mean(r_y, axis=-2), (Ellipsis, slice(0, k)))
    dot = sum_(multiply(u, v), axis=-1)
    norms = multiply(sqrt(sum_(multiply(u, u), axis=-1)), sqrt(sum_(multiply(v, v), axis=-1)))
    # dot is exactly 0 wherever a norm is 0, so any positive stand-in works.
    safe = norms + (norms.data == 0.0).astype(np.float64)
    return divide(dot, safe)


# ---------------------------------------------------------------------------
# Single-pass scores


def _selection(records: Sequence[AttentionRecord], config: ScoreConfig) -> tuple[tuple[int, ...], tuple[int, ...]]:
    if not records:
        raise ConfigError("no attention records to score")
    have_layers = sorted({r.layer for r in records})
    have_heads = sorted({r.head for r in records})
    layers = tuple(have_layers) if config.layer_set is None else tuple(config.layer_set)
    heads = tuple(have_heads) if config.head_set is None else tuple(config.head_set)
    if not set(layers) <= set(have_layers):
        raise ConfigError(f"layer_set {layers} not within available layers {tuple(have_layers)}")
    if not set(heads) <= set(have_heads):
        raise ConfigError(f"head_set {heads} not within available heads {tuple(have_heads)}")
    if not layers or not heads:
        raise ConfigError("empty layer/head selection")
    return layers, heads


def _index(records: Sequence[AttentionRecord]) -> dict[tuple[int, int], AttentionRecord]:
    return {(r.layer, r.head): r for r in records}


def _head_scores(
    maps: dict[tuple[int, int], Tensor],
    config: ScoreConfig,
    layers: tuple[int, ...],
    heads: tuple[int, ...],
) -> tuple[Tensor, Tensor]:
    """Per-(layer, head) scores (B, L', H') and mean pooled columns (B, M)."""
    first_col = 0 if config.include_bos else 1
    per_layer = []
    for layer in layers:
        A = stack([maps[(layer, h)] for h in heads], axis=1)  # (B, H', N, M)
        pooled = pool_lse(A, config.lam) if config.pooling == "lse" else pool_max(A)
        per_layer.append(pooled)
    pooled = stack(per_layer, axis=1)  # (B, L', H', M)
    s = mean(getitem(pooled, (Ellipsis, slice(first_col, None))), axis=-1)
    return s, mean(mean(pooled, axis=1), axis=1)


def score_tensor(
    records: Sequence[AttentionRecord],
    config: ScoreConfig,
    head_weights: np.ndarray | None = None,
) -> tuple[Tensor, Tensor, np.ndarray, tuple[int, ...], tuple[int, ...], np.ndarray]:
    """Differentiable score of a batch of passes.

    Returns ``(f, contributions, weights, layers, heads, columns)``, where
    ``f`` is (B,), ``contributions`` (B, L', H').  With ``head_mode ==
    'dynamic'`` and no explicit ``head_weights`` the weights come from
    :func:`dynamic_head_weights` and are treated as constants.
    """
    layers, heads = _selection(records, config)
    idx = _index(records)
    if config.pooling == "cosine":
        per_layer = [pool_cosine(idx[(layer, heads[0])].image_repr, idx[(layer, heads[0])].text_repr) for layer in layers]
        s1 = stack(per_layer, axis=1)  # (B, L')
        s = stack([s1] * len(heads), axis=2)
        columns = np.zeros((s.shape[0], idx[(layers[0], heads[0])].attention.shape[-1]))
    else:
        s, cols = _head_scores({k: r.attention for k, r in idx.items()}, config, layers, heads)
        columns = cols.data
    if head_weights is None:
        if config.head_mode == "dynamic" and config.pooling != "cosine":
            head_weights = dynamic_head_weights(records, config)
        else:
            head_weights = np.full(s.shape, 1.0 / len(heads))
    contrib = multiply(s, head_weights)
    f = mean(sum_(contrib, axis=-1), axis=-1)
    return f, contrib, head_weights, layers, heads, columns


def dynamic_head_weights(records: Sequence[AttentionRecord], config: ScoreConfig) -> np.ndarray:
    """Softmax over heads (per layer) of gradient-times-attention attributions.

    The uniform-head score is differentiated with respect to each selected
    map A_h on a private tape; ``a_h = sum(A_h * df/dA_h)``.
    Returns (B, L', H').
    """
    if config.pooling == "cosine":
        raise UsageError("dynamic head weighting needs attention-map pooling, not cosine")
    layers, heads = _selection(records, config)
    idx = _index(records)
    leaves = {}
    for layer in layers:
        for h in heads:
            leaves[(layer, h)] = Tensor(idx[(layer, h)].attention.data, requires_grad=True)
    with enable_grad():
        s, _ = _head_scores(leaves, config, layers, heads)
        f = mean(mean(s, axis=-1), axis=-1)
        backward(sum_(f))
    attr = np.empty(s.shape)
    for li, layer in enumerate(layers):
        for hi, h in enumerate(heads):
            leaf = leaves[(layer, h)]
            if leaf.grad is None:
                raise UsageError("attention maps received no gradient")
            attr[:, li, hi] = (leaf.data * leaf.grad).sum(axis=(-2, -1))
    attr -= attr.max(axis=-1, keepdims=True)
    w = np.exp(attr)
    return w / w.sum(axis=-1, keepdims=True)


def score_passes(records: Sequence[AttentionRecord], config: ScoreConfig) -> list[MatchScore]:
    with no_grad():
        f, contrib, w, layers, heads, columns = score_tensor(records, config)
    cal = calibrate(f.data, config.calibration)
    return [
        MatchScore(float(f.data[b]), float(cal[b]), contrib.data[b], w[b], layers, heads, columns[b])
        for b in range(f.shape[0])
    ]


def score_single_pass(records: Sequence[AttentionRecord], config: ScoreConfig) -> MatchScore:
    scores = score_passes(records, config)
    if len(scores) != 1:
        raise UsageError(f"score_single_pass expects one pass, got a batch of {len(scores)}; use score_passes")
    return scores[0]


# ---------------------------------------------------------------------------
# Running passes over images and captions


def instance_noise(seed: int, t: int, shape: tuple[int, ...], draw: int = 0) -> np.ndarray:
    """Standard-normal noise fixed by (instance seed, timestep, draw index)."""
    return data_synth.rng_for(seed, STREAM_NOISE, int(t), int(draw)).standard_normal(shape)


def run_pass(
    model: DSDModel,
    z0: np.ndarray,
    tokens: np.ndarray,
    t: int,
    eps: np.ndarray,
    prompts=None,
    prompt_latent: np.ndarray | None = None,
) -> list[AttentionRecord]:
    """Noise ``z0`` (B, N, d) to step ``t`` with ``eps`` and run the denoiser.

    ``prompts`` is any object with ``offsets(latent) -> [(p_k, p_v), ...]``;
    ``prompt_latent`` defaults to ``z0``.
    """
    z_t = noise_latent(z0, t, eps, model.schedule)
    offsets = None
    if prompts is not None:
        offsets = prompts.offsets(z0 if prompt_latent is None else prompt_latent)
    _, records = denoiser_forward(model, z_t, np.full(len(tokens), t), model.encode_text(tokens), prompts=offsets)
    return records


def _contributions_for(
    model: DSDModel,
    z0: np.ndarray,
    seeds: Sequence[int],
    token_sets: Sequence[np.ndarray],
    configs: Sequence[ScoreConfig],
    prompts=None,
) -> list[tuple]:
    """Average per-head contributions over noise levels and draws, per config.

    ``z0``: (I, N, d); ``token_sets[i]``: (C, M) captions for image i (all
    instances must share C).  Passes are shared between configs that use the
    same (level, draw).  For each config returns contributions
    (I, C, L', H'), weights, layers, heads, columns (I, C, M) and the raw
    score per level.
    """
    n_img = len(z0)
    C = token_sets[0].shape[0]
    tokens = np.concatenate(token_sets, axis=0)
    latents = np.repeat(z0, C, axis=0)
    passes: dict[tuple[int, int], list[AttentionRecord]] = {}

    def records_for(t: int, draw: int):
        if (t, draw) not in passes:
            eps = np.stack([instance_noise(s, t, z0.shape[1:], draw) for s in seeds])
            with no_grad():
                passes[(t, draw)] = run_pass(model, latents, tokens, t, np.repeat(eps, C, axis=0), prompts)
        return passes[(t, draw)]

    results = []
    for config in configs:
        acc = None
        per_level: dict[float, np.ndarray] = {}
        levels = config.noise_levels
        for level in levels:
            t = model.schedule.timestep(level)
            level_acc = None
            for draw in range(config.noise_draws):
                with no_grad():
                    _, contrib, w, layers, heads, cols = score_tensor(records_for(t, draw), config)
                c = contrib.data
                level_acc = c if level_acc is None else level_acc + c
            level_c = level_acc / config.noise_draws if config.noise_draws > 1 else level_acc
            per_level[level] = aggregate(level_c).reshape(n_img, C)
            acc = level_c if acc is None else acc + level_c
        contrib = acc / len(levels) if len(levels) > 1 else acc
        shape = (n_img, C) + contrib.shape[1:]
        results.append(
            (contrib.reshape(shape), w.reshape(shape), layers, heads, cols.reshape(n_img, C, -1), per_level)
        )
    return results


def worker_count() -> int:
    """Worker threads for evaluation, from ``DSD_THREADS`` (default 1)."""
    raw = os.environ.get("DSD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DSD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DSD_THREADS must be a positive integer, got {raw!r}")
    return n


def score_matrices(
    model: DSDModel,
    instances: Sequence[data_synth.MatchInstance],
    configs: Sequence[ScoreConfig],
    prompts=None,
    batch_size: int = 64,
) -> list[np.ndarray]:
    """Raw scores (I, C) for every candidate of every instance, one matrix per config."""
    if not instances:
        return [np.zeros((0, 0)) for _ in configs]

    def run(start: int) -> list[np.ndarray]:
        chunk = instances[start : start + batch_size]
        z0 = model.latent(np.stack([inst.image for inst in chunk]))
        toks = [np.array([c.ids for c in inst.candidates]) for inst in chunk]
        res = _contributions_for(model, z0, [inst.scene.seed for inst in chunk], toks, configs, prompts)
        return [aggregate(r[0]) for r in res]

    starts = range(0, len(instances), batch_size)
    workers = worker_count()
    if workers == 1:
        parts = [run(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, starts))  # map keeps chunk order
    return [np.concatenate([p[k] for p in parts], axis=0) for k in range(len(configs))]


def score_matrix(
    model: DSDModel,
    instances: Sequence[data_synth.MatchInstance],
    config: ScoreConfig,
    prompts=None,
    batch_size: int = 64,
) -> np.ndarray:
    """Raw scores (I, C) for every candidate of every instance."""
    return score_matrices(model, instances, [config], prompts, batch_size)[0]


def score_pair(
    model: DSDModel,
    image: np.ndarray,
    captions: Sequence[data_synth.Caption],
    config: ScoreConfig,
    noise_seed: int = 0,
    prompts=None,
) -> list[MatchScore]:
    """MatchScores for several captions of one image (levels per ``config``)."""
    z0 = model.latent(np.asarray(image)[None])
    toks = np.array([c.ids for c in captions])
    contrib, w, layers, heads, cols, per_level = _contributions_for(model, z0, [noise_seed], [toks], [config], prompts)[0]
    raw = aggregate(contrib[0])
    cal = calibrate(raw, config.calibration)
    return [
        MatchScore(
            float(raw[c]),
            float(cal[c]),
            contrib[0, c],
            w[0, c],
            layers,
            heads,
            cols[0, c],
            {lv: float(v[0, c]) for lv, v in per_level.items()},
        )
        for c in range(len(captions))
    ]


def ensemble_score(image, caption, model: DSDModel, config: ScoreConfig, noise_seed: int = 0, prompts=None) -> MatchScore:
    """Mean of the single-level scores over ``config.noise_levels``."""
    if not config.ensemble:
        config = replace(config, ensemble=True)
    return score_pair(model, image, [caption], config, noise_seed, prompts)[0]


# ---------------------------------------------------------------------------
# Ranking


def rank_scores(scores: Iterable[float]) -> np.ndarray:
    """Indices by descending score; ties keep the lower index first."""
    s = np.asarray(list(scores), dtype=np.float64)
    return np.argsort(-s, kind="stable")


@dataclass
class MatchResult:
    scores: np.ndarray
    ranking: np.ndarray
    best: int
    rank_of_true: int | None = None

    @property
    def top1(self) -> bool:
        return self.rank_of_true == 0

    @property
    def top5(self) -> bool:
        return self.rank_of_true is not None and self.rank_of_true < 5


def rank_candidates(scores: Sequence[float], true_index: int | None = None) -> MatchResult:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ParameterError("no candidates to rank")
    ranking = rank_scores(s)
    rank_true = None if true_index is None else int(np.flatnonzero(ranking == true_index)[0])
    return MatchResult(s, ranking, int(ranking[0]), rank_true)


def match_candidates(
    image,
    candidates: Sequence[data_synth.Caption],
    model: DSDModel,
    config: ScoreConfig,
    true_index: int | None = None,
    noise_seed: int = 0,
    prompts=None,
) -> MatchResult:
    if len(candidates) == 0:
        raise ParameterError("no candidates to rank")
    scores = [m.raw for m in score_pair(model, image, candidates, config, noise_seed, prompts)]
    return rank_candidates(scores, true_index)


def zero_shot_calibration(model: DSDModel, config: ScoreConfig, n: int = 32, seed: int = 0) -> tuple[float, float]:
    """``(1, -median(f))`` over ``n`` generated scenes with their true captions."""
    scenes = [data_synth.generate_scene(int(s)) for s in data_synth.rng_for(seed, 21).integers(2**63, size=n)]
    insts = [data_synth.MatchInstance(s, (data_synth.tokenize(s),), 0) for s in scenes]
    f = score_matrix(model, insts, replace(config, calibration=(1.0, 0.0)))[:, 0]
    return 1.0, float(-np.median(f))

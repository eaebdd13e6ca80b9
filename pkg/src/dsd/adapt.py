"""Few-shot prompt learning on a frozen denoiser.

Each layer gets additive offsets for its key and value projections,
``W^k' = W^k + p_k(x)`` and ``W^v' = W^v + p_v(x)``, where the offsets are a
learned base prompt plus the output of a small network fed the mean-pooled
image latent.  Only these prompts and the score calibration are trained.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import data_synth
from .diffusion import DSDModel, denoiser_forward, noise_latent
from .errors import ConfigError, DimensionError, NumericError, TrainingError, UsageError
from .numerics import (
    Momentum,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp,
    enable_grad,
    log,
    matmul,
    mean,
    multiply,
    reshape,
    scale,
    sigmoid,
    softmax,
    sub,
    sum_,
    tanh,
)
from .scoring import ScoreConfig, instance_noise, rank_candidates, score_matrix, score_tensor

log_ = logging.getLogger(__name__)

TRUNK_WIDTH = 32
LOSS_MODES = ("binary", "multiclass")
PROB_FLOOR = 1e-12


@dataclass
class PromptParams:
    """Base prompts, the conditioning network and calibration.

    ``base_k[l]`` / ``base_v[l]``: (H, d', d_text).  ``trunk_w``: (d, 32),
    ``trunk_b``: (32,).  ``head_k[l]`` / ``head_v[l]``: (32, H*d'*d_text).
    ``calib_a`` and ``calib_b`` are scalars.
    """

    base_k: list[Tensor]
    base_v: list[Tensor]
    trunk_w: Tensor
    trunk_b: Tensor
    head_k: list[Tensor]
    head_v: list[Tensor]
    calib_a: Tensor
    calib_b: Tensor

    @property
    def layers(self) -> int:
        return len(self.base_k)

    @property
    def slice_shape(self) -> tuple[int, int, int]:
        return self.base_k[0].shape

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i in range(self.layers):
            out[f"prompt.layer{i}.base_k"] = self.base_k[i]
            out[f"prompt.layer{i}.base_v"] = self.base_v[i]
        out["prompt.trunk_w"] = self.trunk_w
        out["prompt.trunk_b"] = self.trunk_b
        for i in range(self.layers):
            out[f"prompt.layer{i}.head_k"] = self.head_k[i]
            out[f"prompt.layer{i}.head_v"] = self.head_v[i]
        out["prompt.calib_a"] = self.calib_a
        out["prompt.calib_b"] = self.calib_b
        return out

    @classmethod
    def from_parameters(cls, params: dict[str, np.ndarray]) -> "PromptParams":
        n = sum(1 for k in params if k.endswith(".base_k"))
        if n == 0:
            raise ConfigError("no prompt tensors found")
        try:
            t = {k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True, name=k) for k, v in params.items()}
            return cls(
                [t[f"prompt.layer{i}.base_k"] for i in range(n)],
                [t[f"prompt.layer{i}.base_v"] for i in range(n)],
                t["prompt.trunk_w"],
                t["prompt.trunk_b"],
                [t[f"prompt.layer{i}.head_k"] for i in range(n)],
                [t[f"prompt.layer{i}.head_v"] for i in range(n)],
                t["prompt.calib_a"],
                t["prompt.calib_b"],
            )
        except KeyError as e:
            raise ConfigError(f"missing prompt tensor {e.args[0]}") from None

    @property
    def calibration(self) -> tuple[float, float]:
        return float(self.calib_a.data), float(self.calib_b.data)

    def offsets(self, x_latent) -> list[tuple[Tensor, Tensor]]:
        return conditional_prompt(x_latent, self)


def init_prompts(model: DSDModel, seed: int = 0, hidden: int = TRUNK_WIDTH) -> PromptParams:
    """Zero prompts and heads (a no-op) with a randomly initialised trunk."""
    cfg = model.config
    shp = (cfg.heads, cfg.head_dim, cfg.d_text)
    flat = int(np.prod(shp))
    rng = data_synth.rng_for(seed, 30)

    def z(*s):
        return Tensor(np.zeros(s), requires_grad=True)

    return PromptParams(
        base_k=[z(*shp) for _ in range(cfg.layers)],
        base_v=[z(*shp) for _ in range(cfg.layers)],
        trunk_w=Tensor(rng.standard_normal((cfg.d, hidden)) / math.sqrt(cfg.d), requires_grad=True),
        trunk_b=z(hidden),
        head_k=[z(hidden, flat) for _ in range(cfg.layers)],
        head_v=[z(hidden, flat) for _ in range(cfg.layers)],
        calib_a=Tensor(np.array(1.0), requires_grad=True),
        calib_b=Tensor(np.array(0.0), requires_grad=True),
    )


def conditional_prompt(x_latent, params: PromptParams) -> list[tuple[Tensor, Tensor]]:
    """Per-layer ``(p_k(x), p_v(x))``, each (B, H, d', d_text).

    ``x_latent`` is the frozen image-encoder output, (B, N, d) or (N, d).
    """
    x = as_tensor(x_latent)
    if x.ndim == 2:
        x = reshape(x, (1,) + x.shape)
    d = params.trunk_w.shape[0]
    if x.ndim != 3 or x.shape[-1] != d:
        raise DimensionError(f"latent must be (B, N, {d}), got {x.shape}")
    B = x.shape[0]
    hidden = tanh(add(matmul(mean(x, axis=1), params.trunk_w), params.trunk_b))  # (B, hidden)
    shp = params.slice_shape
    out = []
    for i in range(params.layers):
        pi_k = reshape(matmul(hidden, params.head_k[i]), (B,) + shp)
        pi_v = reshape(matmul(hidden, params.head_v[i]), (B,) + shp)
        out.append((add(params.base_k[i], pi_k), add(params.base_v[i], pi_v)))
    return out


# ---------------------------------------------------------------------------
# Objectives


def binary_loss(y_hat: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over samples."""
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise DimensionError(f"labels {y.shape} do not match predictions {y_hat.shape}")
    if np.any((y != 0) & (y != 1)):
        raise UsageError("binary labels must be 0 or 1")
    p = clamp(y_hat, PROB_FLOOR, 1.0 - PROB_FLOOR)
    ll = add(multiply(y, log(p)), multiply(1.0 - y, log(sub(1.0, p))))
    return scale(mean(ll), -1.0)


def multiclass_loss(scores: Tensor, labels) -> Tensor:
    """Negative log-likelihood of the true index under a softmax over candidates.

    ``scores``: (n, C) or (C,); ``labels``: true indices.
    """
    s = scores if scores.ndim == 2 else reshape(scores, (1, scores.shape[0]))
    idx = np.atleast_1d(np.asarray(labels))
    C = s.shape[1]
    if idx.shape != (s.shape[0],) or not np.issubdtype(idx.dtype, np.integer):
        raise UsageError(f"expected {s.shape[0]} integer labels, got {labels!r}")
    if np.any((idx < 0) | (idx >= C)):
        raise UsageError(f"label outside [0, {C})")
    p = clamp(softmax(s, axis=-1), PROB_FLOOR, 1.0 - PROB_FLOOR)
    onehot = np.eye(C)[idx]
    return scale(mean(sum_(multiply(onehot, log(p)), axis=-1)), -1.0)


def loss(scores_or_prob, label, mode: str = "multiclass") -> Tensor:
    if mode == "binary":
        return binary_loss(as_tensor(scores_or_prob), label)
    if mode == "multiclass":
        return multiclass_loss(as_tensor(scores_or_prob), label)
    raise ConfigError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")


# ---------------------------------------------------------------------------
# Tuning


@dataclass(frozen=True)
class TuneConfig:
    shots: int = 64
    steps: int = 400
    lr: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    seed: int = 0
    loss_mode: str = "multiclass"
    log_every: int = 25

    def __post_init__(self):
        if self.shots <= 0:
            raise ConfigError(f"shots must be positive, got {self.shots}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.steps < 0 or self.batch_size <= 0:
            raise ConfigError("steps must be >= 0 and batch_size > 0")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class TuneResult:
    params: PromptParams
    losses: list[float] = field(default_factory=list)


def _batch_loss(
    model: DSDModel,
    params: PromptParams,
    z0: np.ndarray,
    tokens: np.ndarray,
    seeds: Sequence[int],
    truth: np.ndarray,
    score_cfg: ScoreConfig,
    mode: str,
) -> Tensor:
    """Loss over a batch of instances, z0 (B, N, d), tokens (B, C, M)."""
    B, C = tokens.shape[:2]
    latents = np.repeat(z0, C, axis=0)
    r_y = model.encode_text(tokens.reshape(B * C, -1))
    offsets = conditional_prompt(latents, params)
    total = None
    for level in score_cfg.noise_levels:
        t = model.schedule.timestep(level)
        for draw in range(score_cfg.noise_draws):
            eps = np.stack([instance_noise(s, t, z0.shape[1:], draw) for s in seeds])
            z_t = noise_latent(latents, t, np.repeat(eps, C, axis=0), model.schedule)
            _, records = denoiser_forward(model, z_t, np.full(B * C, t), r_y, prompts=offsets)
            f, *_ = score_tensor(records, score_cfg)
            total = f if total is None else add(total, f)
    n = len(score_cfg.noise_levels) * score_cfg.noise_draws
    f = reshape(scale(total, 1.0 / n) if n > 1 else total, (B, C))
    logits = multiply(f, params.calib_a)
    if mode == "multiclass":
        return multiclass_loss(logits, truth)
    labels = np.zeros((B, C))
    labels[np.arange(B), truth] = 1.0
    return binary_loss(sigmoid(add(logits, params.calib_b)), labels)


def few_shot_tune(
    model: DSDModel,
    dataset: Sequence[data_synth.MatchInstance],
    config: TuneConfig = TuneConfig(),
    score_config: ScoreConfig = ScoreConfig(),
    params: PromptParams | None = None,
) -> TuneResult:
    """Fit prompts and calibration on the first ``config.shots`` instances.

    The backbone must be frozen; its tensors never enter the optimiser.
    """
    if any(p.requires_grad for p in model.named_parameters().values()):
        raise UsageError("backbone must be frozen before tuning (call model.freeze())")
    shots = list(dataset[: config.shots])
    if not shots:
        raise UsageError("no training instances")
    C = {len(i.candidates) for i in shots}
    if len(C) != 1:
        raise UsageError("all tuning instances must have the same number of candidates")
    params = params or init_prompts(model, config.seed)
    z0 = model.latent(np.stack([i.image for i in shots]))
    tokens = np.array([[c.ids for c in i.candidates] for i in shots])
    seeds = np.array([i.scene.seed for i in shots])
    truth = np.array([i.true_index for i in shots])

    opt = Momentum(list(params.named_parameters().values()), lr=config.lr, momentum=config.momentum)
    rng = data_synth.rng_for(config.seed, 31)
    bs = min(config.batch_size, len(shots))
    losses: list[float] = []
    for step in range(config.steps):
        idx = np.sort(rng.choice(len(shots), bs, replace=False))
        opt.zero_grad()
        try:
            with enable_grad():
                value = _batch_loss(model, params, z0[idx], tokens[idx], seeds[idx], truth[idx], score_config, config.loss_mode)
                backward(value)
        except NumericError as e:
            raise TrainingError(f"non-finite value at tuning step {step}: {e}") from e
        v = value.item()
        if not math.isfinite(v):
            raise TrainingError(f"non-finite loss at tuning step {step}")
        opt.step()
        losses.append(v)
        if config.log_every and (step + 1) % config.log_every == 0:
            log_.info("tune step %d loss %.4f", step + 1, v)
    return TuneResult(params, losses)


# ---------------------------------------------------------------------------
# Evaluation


def metrics_from_scores(scores: np.ndarray, instances: Sequence[data_synth.MatchInstance]) -> dict:
    """Top-1, top-5 and per-slot pairwise accuracy from an (I, C) score matrix."""
    if len(instances) == 0:
        raise UsageError("evaluation split is empty")
    top1 = top5 = 0
    slot_hits = {s: 0 for s in data_synth.SLOTS}
    slot_n = {s: 0 for s in data_synth.SLOTS}
    for inst, row in zip(instances, scores):
        res = rank_candidates(row, inst.true_index)
        top1 += res.top1
        top5 += res.top5
        ti = inst.true_index
        for j, slot in inst.negative_slots().items():
            # Same tie rule as ranking: the lower index wins.
            win = row[ti] > row[j] or (row[ti] == row[j] and ti < j)
            slot_hits[slot] += win
            slot_n[slot] += 1
    n = len(instances)
    per_slot = {s: (slot_hits[s] / slot_n[s] if slot_n[s] else None) for s in data_synth.SLOTS}
    return {"n": n, "top1": top1 / n, "top5": top5 / n, "per_slot": per_slot}


def evaluate(
    model: DSDModel,
    params: PromptParams | None,
    instances: Sequence[data_synth.MatchInstance],
    config: ScoreConfig = ScoreConfig(),
) -> dict:
    scores = score_matrix(model, instances, config, prompts=params)
    return metrics_from_scores(scores, instances)

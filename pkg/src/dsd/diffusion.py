"""Noise schedule, forward noising, and the cross-attention epsilon-denoiser.

The denoiser is a stack of single-resolution blocks.  Each block adds a
timestep embedding to the image tokens, projects them (``phi``), lets them
attend to the text tokens through multi-head cross-attention, and applies a
feed-forward layer, all with residual connections.  Every forward pass
returns the per-(layer, head) softmax maps so that scoring can read them.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import data_synth
from .encoders import ImageEncoder, TextEncoder
from .errors import ConfigError, DimensionError, NumericError, ParameterError, TrainingError
from .numerics import (
    Adam,
    Tensor,
    add,
    as_tensor,
    backward,
    enable_grad,
    getitem,
    matmul,
    mean,
    multiply,
    no_grad,
    power,
    reshape,
    rms_norm,
    scale,
    silu,
    softmax,
    sub,
    swapaxes,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = len(data_synth.VOCAB)
    n_text: int = data_synth.CAPTION_LEN
    d_text: int = 32
    image_hw: tuple[int, int] = (data_synth.IMAGE_SIZE, data_synth.IMAGE_SIZE)
    patch: int = 4
    d: int = 32
    heads: int = 4
    layers: int = 4
    ff_hidden: int = 64
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.1

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        h, w = self.image_hw
        if h % self.patch or w % self.patch:
            raise ConfigError(f"image {h}x{w} not divisible by patch {self.patch}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def n_image(self) -> int:
        h, w = self.image_hw
        return (h // self.patch) * (w // self.patch)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_hw"] = list(self.image_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["image_hw"] = tuple(d["image_hw"])
        return cls(**d)


# ---------------------------------------------------------------------------
# Noise schedule and forward process


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # index t = 1..T; betas[0] is unused (0)
    alpha_bar: np.ndarray  # alpha_bar[0] == 1

    @property
    def T(self) -> int:
        return len(self.betas) - 1

    def timestep(self, nu: float) -> int:
        """Noise level in (0, 1) -> integer timestep ``round(nu * T)``."""
        if not 0.0 < nu < 1.0:
            raise ParameterError(f"noise level must lie in (0, 1), got {nu}")
        return int(round(nu * self.T))


def make_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.1) -> NoiseSchedule:
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ParameterError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    if T < 1:
        raise ParameterError(f"T must be positive, got {T}")
    betas = np.concatenate([[0.0], np.linspace(beta_min, beta_max, T)])
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def noise_latent(z0, t, eps, sched: NoiseSchedule):
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``; t may be per-sample.

    Arrays in, array out; a Tensor ``z0`` keeps the result on the tape.
    """
    t_arr = np.asarray(t)
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() > sched.T):
        raise ParameterError(f"timestep outside [0, {sched.T}]: {t}")
    ab = sched.alpha_bar[t_arr]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (np.ndim(eps) - ab.ndim))
    a, b = np.sqrt(ab), np.sqrt(1.0 - ab)
    eps_data = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if isinstance(z0, Tensor):
        return add(multiply(z0, a), b * eps_data)
    return a * np.asarray(z0, dtype=np.float64) + b * eps_data


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding, (B,) -> (B, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# ---------------------------------------------------------------------------
# Model


@dataclass
class Block:
    time: Tensor  # d x d, applied to the sinusoidal embedding
    phi: Tensor  # d x d self-projection of image tokens
    wq: Tensor  # d x d
    wk: Tensor  # d x d_text
    wv: Tensor  # d x d_text
    wo: Tensor  # d x d
    ff1: Tensor
    ff1_bias: Tensor
    ff2: Tensor
    ff2_bias: Tensor


@dataclass
class AttentionRecord:
    """One head's cross-attention map plus the representations it came from.

    ``attention`` has shape (B, N, M): rows are image tokens, columns text
    tokens.  ``image_repr`` is the projected image stream of that layer
    (B, N, d) and ``text_repr`` the encoded caption (B, M, d_text).
    """

    layer: int
    head: int
    attention: Tensor
    image_repr: Tensor
    text_repr: Tensor


@dataclass
class DSDModel:
    config: ModelConfig
    text: TextEncoder
    image: ImageEncoder
    position: Tensor  # N x d, added to the noisy latent
    blocks: list[Block]
    out: Tensor  # d x d
    latent_shift: Tensor = None  # N x d, fixed after the encoder statistics are taken
    latent_scale: Tensor = None  # (1,)
    schedule: NoiseSchedule = field(repr=False, default=None)

    def __post_init__(self):
        if self.latent_shift is None:
            self.latent_shift = Tensor(np.zeros((self.config.n_image, self.config.d)), name="latent.shift")
        if self.latent_scale is None:
            self.latent_scale = Tensor(np.ones(1), name="latent.scale")
        if self.schedule is None:
            self.schedule = make_schedule(self.config.T, self.config.beta_min, self.config.beta_max)

    # -- parameter bookkeeping --------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {
            "text.token_embedding": self.text.token_embedding,
            "text.position_embedding": self.text.position_embedding,
            "image.projection": self.image.projection,
            "image.position_embedding": self.image.position_embedding,
            "denoiser.position": self.position,
        }
        for i, b in enumerate(self.blocks):
            for k, v in vars(b).items():
                out[f"denoiser.block{i}.{k}"] = v
        out["denoiser.out"] = self.out
        out["latent.shift"] = self.latent_shift
        out["latent.scale"] = self.latent_scale
        return out

    def trainable_parameters(self) -> dict[str, Tensor]:
        # The patch encoder and latent statistics are fixed; see pretrain().
        return {k: v for k, v in self.named_parameters().items() if not k.startswith(("image.", "latent."))}

    def freeze(self) -> "DSDModel":
        for p in self.named_parameters().values():
            p.requires_grad = False
            p.grad = None
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    @classmethod
    def from_parameters(cls, config: ModelConfig, params: dict[str, np.ndarray]) -> "DSDModel":
        missing = [k for k in _parameter_shapes(config) if k not in params]
        if missing:
            raise ConfigError(f"checkpoint lacks {len(missing)} model tensors (e.g. {missing[0]!r})")
        for k, shape in _parameter_shapes(config).items():
            if tuple(params[k].shape) != shape:
                raise DimensionError(f"tensor {k!r} has shape {params[k].shape}, expected {shape}")
        t = {k: Tensor(params[k], name=k) for k in _parameter_shapes(config)}
        return _assemble(config, t)

    # -- forward -------------------------------------------------------------
    def latent(self, images) -> np.ndarray:
        """Standardised encoder output ``(E(x) - shift) / scale``."""
        with no_grad():
            raw = self.image.encode(images).data
        return (raw - self.latent_shift.data) / self.latent_scale.data[0]

    def fit_latent_statistics(self, images) -> None:
        """Centre per (token, channel) and scale to unit overall variance."""
        with no_grad():
            raw = self.image.encode(images).data
        shift = raw.mean(axis=0)
        sd = float((raw - shift).std())
        if not sd > 0:
            raise TrainingError("image latents have zero variance; cannot standardise")
        self.latent_shift.data = shift
        self.latent_scale.data = np.array([sd])

    def encode_text(self, tokens) -> Tensor:
        return self.text.encode(tokens)


def _parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    p3 = cfg.patch * cfg.patch * 3
    shapes = {
        "text.token_embedding": (cfg.vocab_size, cfg.d_text),
        "text.position_embedding": (cfg.n_text, cfg.d_text),
        "image.projection": (p3, cfg.d),
        "image.position_embedding": (cfg.n_image, cfg.d),
        "denoiser.position": (cfg.n_image, cfg.d),
    }
    for i in range(cfg.layers):
        pre = f"denoiser.block{i}."
        shapes.update(
            {
                pre + "time": (cfg.d, cfg.d),
                pre + "phi": (cfg.d, cfg.d),
                pre + "wq": (cfg.d, cfg.d),
                pre + "wk": (cfg.d, cfg.d_text),
                pre + "wv": (cfg.d, cfg.d_text),
                pre + "wo": (cfg.d, cfg.d),
                pre + "ff1": (cfg.d, cfg.ff_hidden),
                pre + "ff1_bias": (cfg.ff_hidden,),
                pre + "ff2": (cfg.ff_hidden, cfg.d),
                pre + "ff2_bias": (cfg.d,),
            }
        )
    shapes["denoiser.out"] = (cfg.d, cfg.d)
    shapes["latent.shift"] = (cfg.n_image, cfg.d)
    shapes["latent.scale"] = (1,)
    return shapes


def _assemble(cfg: ModelConfig, t: dict[str, Tensor]) -> DSDModel:
    blocks = [
        Block(**{k: t[f"denoiser.block{i}.{k}"] for k in Block.__dataclass_fields__}) for i in range(cfg.layers)
    ]
    return DSDModel(
        config=cfg,
        text=TextEncoder(t["text.token_embedding"], t["text.position_embedding"]),
        image=ImageEncoder(t["image.projection"], t["image.position_embedding"], cfg.patch, cfg.image_hw),
        position=t["denoiser.position"],
        blocks=blocks,
        out=t["denoiser.out"],
        latent_shift=t["latent.shift"],
        latent_scale=t["latent.scale"],
    )


def init_model(config: ModelConfig | None = None, seed: int = 0) -> DSDModel:
    """Seeded initialisation: weights ~ N(0, 1/fan_in), biases zero."""
    cfg = config or ModelConfig()
    rng = data_synth.rng_for(seed, 10)
    t: dict[str, Tensor] = {}
    for name, shape in _parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "latent.scale":
            arr = np.ones(shape)
        elif leaf.endswith("bias") or name == "latent.shift":
            arr = np.zeros(shape)
        elif name == "text.token_embedding":
            arr = rng.standard_normal(shape)
        elif "position" in name:
            arr = 0.5 * rng.standard_normal(shape)
        elif leaf in ("wk", "wv"):
            arr = rng.standard_normal(shape) / math.sqrt(shape[1])
        else:
            arr = rng.standard_normal(shape) / math.sqrt(shape[0])
        t[name] = Tensor(arr, requires_grad=not name.startswith("latent."), name=name)
    return _assemble(cfg, t)


def _head_weights(w: Tensor, heads: int, head_dim: int) -> Tensor:
    """(d, d_text) projection -> (1, H, d', d_text) head slices."""
    return reshape(w, (1, heads, head_dim, w.shape[1]))


def denoiser_forward(
    model: DSDModel,
    z_t,
    t,
    r_y: Tensor,
    prompts: Sequence[tuple[Tensor, Tensor]] | None = None,
    capture: bool = True,
) -> tuple[Tensor, list[AttentionRecord]]:
    """Predict the injected noise and capture every cross-attention map.

    ``z_t``: (B, N, d) noisy latents; ``t``: (B,) timesteps; ``r_y``:
    (B, M, d_text) encoded captions.  ``prompts``, when given, holds one
    ``(p_k, p_v)`` pair per layer, each (B, H, d', d_text); they are added
    to the head slices of W^k and W^v before projecting the text.
    """
    cfg = model.config
    z_t = as_tensor(z_t)
    if z_t.ndim != 3 or z_t.shape[1:] != (cfg.n_image, cfg.d):
        raise DimensionError(f"latent must be (B, {cfg.n_image}, {cfg.d}), got {z_t.shape}")
    B = z_t.shape[0]
    if r_y.ndim != 3 or r_y.shape != (B, cfg.n_text, cfg.d_text):
        raise DimensionError(f"text representation must be ({B}, {cfg.n_text}, {cfg.d_text}), got {r_y.shape}")
    if prompts is not None and len(prompts) != cfg.layers:
        raise DimensionError(f"expected prompts for {cfg.layers} layers, got {len(prompts)}")
    H, dh = cfg.heads, cfg.head_dim
    zero_prompt = np.zeros((B, H, dh, cfg.d_text))

    temb = Tensor(timestep_embedding(np.broadcast_to(np.asarray(t), (B,)), cfg.d)[:, None, :])
    ry = reshape(r_y, (B, 1, cfg.n_text, cfg.d_text))
    x = add(z_t, model.position)
    records: list[AttentionRecord] = []
    for layer, blk in enumerate(model.blocks):
        h = add(x, matmul(temb, blk.time))
        r_x = matmul(rms_norm(h), blk.phi)
        q = swapaxes(reshape(matmul(r_x, swapaxes(blk.wq, 0, 1)), (B, cfg.n_image, H, dh)), 1, 2)
        pk, pv = (zero_prompt, zero_prompt) if prompts is None else prompts[layer]
        wk = add(_head_weights(blk.wk, H, dh), pk)  # (B, H, d', d_text)
        wv = add(_head_weights(blk.wv, H, dh), pv)
        k = matmul(ry, swapaxes(wk, -1, -2))  # (B, H, M, d')
        v = matmul(ry, swapaxes(wv, -1, -2))
        attn = softmax(matmul(q, swapaxes(k, -1, -2)), axis=-1, scale=1.0 / math.sqrt(dh))
        o = reshape(swapaxes(matmul(attn, v), 1, 2), (B, cfg.n_image, cfg.d))
        x = add(h, matmul(o, swapaxes(blk.wo, 0, 1)))
        ff = add(matmul(silu(add(matmul(rms_norm(x), blk.ff1), blk.ff1_bias)), blk.ff2), blk.ff2_bias)
        x = add(x, ff)
        if capture:
            for head in range(H):
                records.append(AttentionRecord(layer, head, getitem(attn, (slice(None), head)), r_x, r_y))
    eps_hat = matmul(rms_norm(x), model.out)
    return eps_hat, records


# ---------------------------------------------------------------------------
# Pretraining


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 32
    lr: float = 2e-3
    lr_final: float = 2e-4
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 100


def epsilon_loss(eps_hat: Tensor, eps) -> Tensor:
    diff = sub(eps_hat, as_tensor(eps))
    return mean(multiply(diff, diff))


def pretrain(
    pairs: Sequence[tuple[np.ndarray, Sequence[int]]] | Sequence[data_synth.MatchInstance],
    config: PretrainConfig = PretrainConfig(),
    model_config: ModelConfig | None = None,
    model: DSDModel | None = None,
) -> tuple[DSDModel, list[float]]:
    """Epsilon-prediction training on positive (image, caption) pairs.

    Accepts either ``(image, token_ids)`` pairs or matching instances, whose
    true caption is used.  The patch encoder is not trained: with a pure
    noise-regression objective, a trainable encoder could shrink the latent
    toward a constant and make the task trivial.  A fresh model first fixes
    its latent standardisation from ``images``.  Returns the frozen model
    and the per-step loss trace.
    """
    if len(pairs) == 0:
        raise ConfigError("pretraining needs a non-empty dataset")
    if isinstance(pairs[0], data_synth.MatchInstance):
        images = np.stack([inst.image for inst in pairs])
        tokens = np.array([inst.positive.ids for inst in pairs])
    else:
        images = np.stack([np.asarray(p[0]) for p in pairs])
        tokens = np.array([list(p[1]) for p in pairs])
    fresh = model is None
    model = model or init_model(model_config, seed=config.seed)
    for p in model.trainable_parameters().values():
        p.requires_grad = True
    if fresh:
        model.fit_latent_statistics(images)
    z0_all = model.latent(images)
    rng = data_synth.rng_for(config.seed, 11)
    params = list(model.trainable_parameters().values())
    opt = Adam(params, lr=config.lr, grad_clip=config.grad_clip)
    T = model.schedule.T
    losses: list[float] = []
    n = len(images)
    bs = min(config.batch_size, n)
    for step in range(config.steps):
        frac = step / max(config.steps - 1, 1)
        opt.lr = config.lr * (config.lr_final / config.lr) ** frac
        idx = rng.choice(n, size=bs, replace=False) if bs < n else np.arange(n)
        t = rng.integers(1, T + 1, size=bs)
        eps = rng.standard_normal(z0_all[idx].shape)
        z_t = noise_latent(z0_all[idx], t, eps, model.schedule)
        opt.zero_grad()
        try:
            with enable_grad():
                eps_hat, _ = denoiser_forward(model, z_t, t, model.encode_text(tokens[idx]), capture=False)
                loss = epsilon_loss(eps_hat, eps)
                backward(loss)
        except NumericError as exc:
            raise TrainingError(f"pretraining diverged at step {step}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step}")
        losses.append(value)
        opt.step()
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            log.info("pretrain step %d loss %.5f", step, value)
    return model.freeze(), losses

"""Toy latent diffusion: schedule, denoiser, loss, and deterministic sampling.

The denoiser is a small stack of full-attention transformer blocks over all
frame tokens. The component router is wired into the first block only: its
weights are computed from the current token stream and the conditioning's
component tokens, and the weighted reconstructions are added to the tokens
before that block's attention. Sampling runs a deterministic reverse update
with classifier-free guidance; the temporal refiner is applied once, after
the last step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor_kernel as tk
from .local_router import (ComponentMasks, EncoderParams, LatentTokens,
                           LocalTokenSet, RouterOutput, RouterParams,
                           encode_local_components, init_encoder, init_router,
                           router_logits, router_weights, spatial_enhance)
from .temporal_ar import (PsiLayerParams, TamParams, init_psi_layer, init_tam,
                          temporal_refine, transformer_layer)
from .tensor_kernel import Tensor


class DiffusionError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    """Cumulative signal-retention coefficients for T forward steps."""

    steps: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if self.alpha_bar.shape != (self.steps + 1,):
            raise DiffusionError(
                f"alpha_bar length {self.alpha_bar.shape} for T={self.steps}")
        if self.alpha_bar[0] != 1.0:
            raise DiffusionError("alpha_bar[0] must be exactly 1")
        if not (np.diff(self.alpha_bar) < 0).all():
            raise DiffusionError("alpha_bar must be strictly decreasing")
        if self.alpha_bar[-1] <= 0.0:
            raise DiffusionError("alpha_bar must stay positive")


def make_schedule(steps: int, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta schedule; alpha_bar[t] is the product of (1 - beta_s)."""
    if steps < 1:
        raise DiffusionError(f"step count {steps} must be positive")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DiffusionError(
            f"betas must satisfy 0 < {beta_start} <= {beta_end} < 1")
    betas = np.linspace(beta_start, beta_end, steps)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(steps=steps, alpha_bar=alpha_bar)


def _check_step(t: int, schedule: NoiseSchedule) -> int:
    t = int(t)
    if not (1 <= t <= schedule.steps):
        raise DiffusionError(f"step {t} outside [1, {schedule.steps}]")
    return t


def add_noise(z0: LatentTokens, eps: LatentTokens, t: int,
              schedule: NoiseSchedule) -> LatentTokens:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    if z0.tokens.shape != eps.tokens.shape:
        raise DiffusionError(
            f"noise shape {eps.tokens.shape} vs latents {z0.tokens.shape}")
    t = _check_step(t, schedule)
    a = schedule.alpha_bar[t]
    return z0.with_tokens(tk.add(tk.scale(z0.tokens, np.sqrt(a)),
                                 tk.scale(eps.tokens, np.sqrt(1.0 - a))))


@dataclass
class ConditionBundle:
    """Identity conditioning: component tokens plus an identity vector."""

    local: LocalTokenSet
    identity_vector: Tensor      # 1 x id_dim
    is_null: bool = False


@dataclass
class DenoiserParams:
    w_in: Tensor
    b_in: Tensor
    t_table: Tensor              # (T+1) x D', learned per-step embeddings
    w_cond: Tensor               # id_dim x D'
    blocks: list[PsiLayerParams]
    heads: int
    w_out: Tensor
    b_out: Tensor
    router: RouterParams
    encoder: EncoderParams
    null_local: Tensor           # (M*L) x D, learned null component tokens
    null_identity: Tensor        # 1 x id_dim
    alpha: float
    components: int
    local_seq_len: int


@dataclass
class DenoiserResult:
    eps_hat: LatentTokens
    router: RouterOutput


@dataclass
class ModelParams:
    """Everything trainable, bundled for sampling and checkpointing."""

    denoiser: DenoiserParams
    tam: TamParams


def init_denoiser(rng: np.random.Generator, *, latent_dim: int, blocks: int,
                  heads: int, timesteps: int, id_dim: int, components: int,
                  local_seq_len: int, local_dim: int, inner_dim: int,
                  alpha: float) -> DenoiserParams:
    return DenoiserParams(
        w_in=Tensor(rng.normal(0.0, 1.0 / np.sqrt(latent_dim),
                               (latent_dim, latent_dim)), requires_grad=True),
        b_in=Tensor(np.zeros(latent_dim), requires_grad=True),
        t_table=Tensor(np.zeros((timesteps + 1, latent_dim)), requires_grad=True),
        w_cond=Tensor(rng.normal(0.0, 1.0 / np.sqrt(id_dim),
                                 (id_dim, latent_dim)), requires_grad=True),
        blocks=[init_psi_layer(rng, latent_dim) for _ in range(blocks)],
        heads=heads,
        # Zero output head: the untrained denoiser predicts exactly zero noise.
        w_out=Tensor(np.zeros((latent_dim, latent_dim)), requires_grad=True),
        b_out=Tensor(np.zeros(latent_dim), requires_grad=True),
        router=init_router(rng, components, local_seq_len, local_dim,
                           latent_dim, inner_dim),
        encoder=init_encoder(rng, latent_dim, local_seq_len, local_dim),
        null_local=Tensor(rng.normal(0.0, 0.02, (components * local_seq_len,
                                                 local_dim)), requires_grad=True),
        null_identity=Tensor(np.zeros((1, id_dim)), requires_grad=True),
        alpha=float(alpha),
        components=components,
        local_seq_len=local_seq_len,
    )


def null_condition(params: DenoiserParams) -> ConditionBundle:
    """The learned null condition used for classifier-free guidance."""
    m, l = params.components, params.local_seq_len
    tokens = [tk.slice_rows(params.null_local, i * l, (i + 1) * l)
              for i in range(m)]
    local = LocalTokenSet(tokens, [f"null_{i}" for i in range(m)])
    return ConditionBundle(local=local, identity_vector=params.null_identity,
                           is_null=True)


def condition_from_features(params: DenoiserParams,
                            component_features: Sequence[Tensor],
                            identity_vector: Tensor,
                            names: Optional[list[str]] = None) -> ConditionBundle:
    local = encode_local_components(component_features, params.encoder, names)
    if identity_vector.data.ndim == 1:
        identity_vector = tk.reshape(identity_vector,
                                     (1, identity_vector.size))
    return ConditionBundle(local=local, identity_vector=identity_vector,
                           is_null=False)


def denoiser_forward(z_t: LatentTokens, t: int, cond: ConditionBundle,
                     params: DenoiserParams) -> DenoiserResult:
    """Predict the noise content of z_t; router runs inside the first block."""
    if len(cond.local.tokens) != params.components:
        raise DiffusionError(
            f"condition carries {len(cond.local.tokens)} components, "
            f"denoiser expects {params.components}")
    t = int(t)
    if not (0 <= t < params.t_table.shape[0]):
        raise DiffusionError(f"step {t} outside the embedding table")

    h = tk.linear(z_t.tokens, params.w_in, params.b_in)
    t_emb = tk.reshape(tk.slice_rows(params.t_table, t, t + 1),
                       (h.shape[1],))
    h = tk.add_bias(h, t_emb)
    c_emb = tk.reshape(tk.matmul(cond.identity_vector, params.w_cond),
                       (h.shape[1],))
    h = tk.add_bias(h, c_emb)

    router_out: Optional[RouterOutput] = None
    for i, block in enumerate(params.blocks):
        if i == 0:
            stream = z_t.with_tokens(h)
            router_out = router_weights(
                router_logits(cond.local, stream, params.router))
            stream = spatial_enhance(stream, cond.local, router_out,
                                     params.alpha, params.router)
            h = stream.tokens
        h = transformer_layer(h, block, params.heads)

    eps_hat = tk.linear(h, params.w_out, params.b_out)
    return DenoiserResult(eps_hat=z_t.with_tokens(eps_hat), router=router_out)


def diffusion_loss(eps: LatentTokens, eps_hat: LatentTokens) -> Tensor:
    """Mean squared error over every latent element."""
    if eps.tokens.shape != eps_hat.tokens.shape:
        raise DiffusionError(
            f"prediction shape {eps_hat.tokens.shape} vs noise {eps.tokens.shape}")
    diff = tk.sub(eps.tokens, eps_hat.tokens)
    return tk.mean_all(tk.mul(diff, diff))


def ddim_step(z_t: LatentTokens, eps_hat: LatentTokens, t: int, t_prev: int,
              schedule: NoiseSchedule) -> LatentTokens:
    """Deterministic reverse update from step t to t_prev (eta = 0)."""
    t = _check_step(t, schedule)
    t_prev = int(t_prev)
    if not (0 <= t_prev < t):
        raise DiffusionError(f"t_prev {t_prev} must lie in [0, {t})")
    a_t = schedule.alpha_bar[t]
    a_p = schedule.alpha_bar[t_prev]
    x0 = tk.scale(tk.sub(z_t.tokens, tk.scale(eps_hat.tokens, np.sqrt(1.0 - a_t))),
                  1.0 / np.sqrt(a_t))
    z_prev = tk.add(tk.scale(x0, np.sqrt(a_p)),
                    tk.scale(eps_hat.tokens, np.sqrt(1.0 - a_p)))
    return z_t.with_tokens(z_prev)


def sampling_timesteps(schedule: NoiseSchedule,
                       num_steps: Optional[int] = None) -> list[tuple[int, int]]:
    """(t, t_prev) pairs from T down to 0, uniformly strided when reduced."""
    if num_steps is None or num_steps >= schedule.steps:
        ts = list(range(schedule.steps, -1, -1))
    else:
        if num_steps < 1:
            raise DiffusionError(f"sampling needs at least 1 step, got {num_steps}")
        grid = np.linspace(schedule.steps, 0, num_steps + 1)
        ts = sorted(set(int(round(v)) for v in grid), reverse=True)
    return list(zip(ts[:-1], ts[1:]))


def sample(cond: ConditionBundle, model: ModelParams, schedule: NoiseSchedule,
           *, cfg_scale: float, chunks: int, seed: int, apply_tam: bool,
           frames: int, tokens_per_frame: int,
           num_steps: Optional[int] = None) -> LatentTokens:
    """Deterministic guided sampling from seeded Gaussian noise.

    Per step the guided prediction is uncond + cfg_scale * (cond - uncond);
    the temporal refiner runs once after the last step when apply_tam is set.
    Identical (seed, params, cond) always produce bit-identical output.
    """
    cfg_scale = float(cfg_scale)
    if cfg_scale < 0:
        raise DiffusionError(f"cfg scale {cfg_scale} must be non-negative")
    dp = model.denoiser
    latent_dim = dp.w_in.shape[0]
    rng = np.random.default_rng(seed)
    z = LatentTokens(Tensor(rng.standard_normal((frames * tokens_per_frame,
                                                 latent_dim))),
                     frames, tokens_per_frame)
    null = null_condition(dp)
    for t, t_prev in sampling_timesteps(schedule, num_steps):
        eps_c = denoiser_forward(z, t, cond, dp).eps_hat
        eps_u = denoiser_forward(z, t, null, dp).eps_hat
        guided = tk.add(eps_u.tokens,
                        tk.scale(tk.sub(eps_c.tokens, eps_u.tokens), cfg_scale))
        z = ddim_step(z, z.with_tokens(guided), t, t_prev, schedule)
    if apply_tam:
        z = temporal_refine(z, model.tam, chunks)
    return z

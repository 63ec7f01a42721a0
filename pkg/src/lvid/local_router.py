"""Facial-component router over latent video tokens.

Each of M component token sequences gets a per-latent-token weight; the
weights softmax-normalize across components and gate component-conditioned
cross-attention refinements that are added back onto the latent tokens.
The raw logits are supervised against ground-truth component masks with a
per-token cross entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor_kernel as tk
from .tensor_kernel import Tensor

INIT_STD = 0.02


class RouterError(ValueError):
    pass


@dataclass
class LocalTokenSet:
    """M component token sequences, each L x D."""

    tokens: list[Tensor]
    component_names: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.component_names):
            raise RouterError("token sequences and names disagree in count")
        shapes = {t.shape for t in self.tokens}
        if len(shapes) != 1 or self.tokens[0].data.ndim != 2:
            raise RouterError(f"component token shapes must all match, got {shapes}")

    @property
    def count(self) -> int:
        return len(self.tokens)


@dataclass
class LatentTokens:
    """Latent video tokens: F frames of S tokens, D' channels, flattened."""

    tokens: Tensor
    frames: int
    tokens_per_frame: int

    def __post_init__(self):
        n = self.frames * self.tokens_per_frame
        if self.tokens.data.ndim != 2 or self.tokens.shape[0] != n:
            raise RouterError(
                f"latent tokens shape {self.tokens.shape} does not match "
                f"{self.frames} frames x {self.tokens_per_frame} tokens")

    @property
    def token_count(self) -> int:
        return self.tokens.shape[0]

    @property
    def channels(self) -> int:
        return self.tokens.shape[1]

    @property
    def frame_of_token(self) -> np.ndarray:
        return np.repeat(np.arange(self.frames), self.tokens_per_frame)

    def with_tokens(self, tokens: Tensor) -> "LatentTokens":
        return LatentTokens(tokens, self.frames, self.tokens_per_frame)


@dataclass
class RouterOutput:
    """Pre-softmax scores and normalized weights, both M x L'."""

    logits: Tensor
    weights: Tensor


@dataclass
class ComponentMasks:
    """Binary M x L' ground truth; a token column is one-hot or background (all zero)."""

    y: np.ndarray

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim != 2:
            raise RouterError(f"mask shape {self.y.shape} is not 2-D")
        if not np.isin(self.y, (0.0, 1.0)).all():
            raise RouterError("masks must be binary")
        if (self.y.sum(axis=0) > 1).any():
            raise RouterError("a token column is assigned to multiple components")

    @property
    def foreground(self) -> np.ndarray:
        return self.y.sum(axis=0) > 0

    @property
    def labels(self) -> np.ndarray:
        """Per-token component index; background tokens get -1."""
        lab = np.argmax(self.y, axis=0)
        lab[~self.foreground] = -1
        return lab


@dataclass
class PhiParams:
    """Cross-attention reconstruction: queries from latents, keys/values from context."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class EncoderParams:
    """Bias-free linear map from a component feature vector to L x D tokens."""

    w: Tensor
    seq_len: int
    token_dim: int


@dataclass
class RouterParams:
    w_m: Tensor            # M x L, one aggregator row per component
    w_l: Tensor            # D x D''
    w_z: Tensor            # D' x D''
    ln_l_gain: Tensor
    ln_l_bias: Tensor
    ln_z_gain: Tensor
    ln_z_bias: Tensor
    phi: PhiParams

    def __post_init__(self):
        if self.w_l.shape[1] != self.w_z.shape[1]:
            raise RouterError(
                f"projection spaces disagree: w_l maps into {self.w_l.shape[1]}, "
                f"w_z into {self.w_z.shape[1]}")


def init_phi(rng: np.random.Generator, query_dim: int, context_dim: int,
             attn_dim: int, out_dim: int) -> PhiParams:
    # Zero output projection: the enhancement starts as an exact no-op.
    return PhiParams(
        wq=Tensor(rng.normal(0.0, INIT_STD, (query_dim, attn_dim)), requires_grad=True),
        wk=Tensor(rng.normal(0.0, INIT_STD, (context_dim, attn_dim)), requires_grad=True),
        wv=Tensor(rng.normal(0.0, INIT_STD, (context_dim, out_dim)), requires_grad=True),
        wo=Tensor(np.zeros((out_dim, out_dim)), requires_grad=True),
    )


def init_encoder(rng: np.random.Generator, feature_dim: int, seq_len: int,
                 token_dim: int) -> EncoderParams:
    w = Tensor(rng.normal(0.0, INIT_STD, (feature_dim, seq_len * token_dim)),
               requires_grad=True)
    return EncoderParams(w=w, seq_len=seq_len, token_dim=token_dim)


def init_router(rng: np.random.Generator, components: int, seq_len: int,
                token_dim: int, latent_dim: int, inner_dim: int) -> RouterParams:
    n = lambda *s: Tensor(rng.normal(0.0, INIT_STD, s), requires_grad=True)
    return RouterParams(
        w_m=n(components, seq_len),
        w_l=n(token_dim, inner_dim),
        w_z=n(latent_dim, inner_dim),
        ln_l_gain=Tensor(np.ones(token_dim), requires_grad=True),
        ln_l_bias=Tensor(np.zeros(token_dim), requires_grad=True),
        ln_z_gain=Tensor(np.ones(latent_dim), requires_grad=True),
        ln_z_bias=Tensor(np.zeros(latent_dim), requires_grad=True),
        phi=init_phi(rng, latent_dim, token_dim, inner_dim, latent_dim),
    )


def encode_local_components(component_features: Sequence[Tensor],
                            params: EncoderParams,
                            component_names: Optional[list[str]] = None) -> LocalTokenSet:
    """Embed M component feature vectors into M token sequences of L x D."""
    feats = list(component_features)
    if component_names is None:
        component_names = [f"component_{m}" for m in range(len(feats))]
    if len(feats) != len(component_names):
        raise RouterError(
            f"expected {len(component_names)} component features, got {len(feats)}")
    tokens = []
    for f in feats:
        row = f if f.data.ndim == 2 else tk.reshape(f, (1, f.size))
        flat = tk.matmul(row, params.w)
        tokens.append(tk.reshape(flat, (params.seq_len, params.token_dim)))
    return LocalTokenSet(tokens=tokens, component_names=list(component_names))


def router_logits(local: LocalTokenSet, z: LatentTokens,
                  params: RouterParams) -> Tensor:
    """Token-wise component scores: row m is w_m . norm(l_m) W_l (norm(z) W_z)^T."""
    z_norm = tk.layer_norm(z.tokens, params.ln_z_gain, params.ln_z_bias)
    z_proj_t = tk.transpose(tk.matmul(z_norm, params.w_z))   # D'' x L'
    rows = []
    for m, l_m in enumerate(local.tokens):
        l_norm = tk.layer_norm(l_m, params.ln_l_gain, params.ln_l_bias)
        corr = tk.matmul(tk.matmul(l_norm, params.w_l), z_proj_t)   # L x L'
        rows.append(tk.matmul(tk.slice_rows(params.w_m, m, m + 1), corr))
    return tk.concat_rows(rows)


def router_weights(logits: Tensor) -> RouterOutput:
    """Normalize scores across components, independently for every token."""
    if logits.shape[0] < 2:
        raise RouterError(
            f"routing needs at least 2 components, got {logits.shape[0]}")
    return RouterOutput(logits=logits, weights=tk.softmax(logits, axis=0))


def cross_attention_phi(context: Tensor, queries: Tensor,
                        params: PhiParams) -> Tensor:
    """Reconstruct the queries from the context tokens acting as keys and values."""
    if context.data.ndim != 2 or context.shape[0] < 1:
        raise RouterError(f"empty or malformed context {context.shape}")
    q = tk.matmul(queries, params.wq)
    k = tk.matmul(context, params.wk)
    v = tk.matmul(context, params.wv)
    att = tk.scaled_dot_attention(q, k, v, tk.MASK_NONE)
    return tk.matmul(att, params.wo)


def spatial_enhance(z: LatentTokens, local: LocalTokenSet, router: RouterOutput,
                    alpha: float, params: RouterParams) -> LatentTokens:
    """Add the weight-gated component reconstructions onto the latent tokens."""
    alpha = float(alpha)
    if not np.isfinite(alpha):
        raise RouterError(f"alpha {alpha!r} is not finite")
    acc = None
    for m, l_m in enumerate(local.tokens):
        recon = cross_attention_phi(l_m, z.tokens, params.phi)
        w_col = tk.transpose(tk.slice_rows(router.weights, m, m + 1))  # L' x 1
        term = tk.mul_rows(recon, w_col)
        acc = term if acc is None else tk.add(acc, term)
    return z.with_tokens(tk.add(z.tokens, tk.scale(acc, alpha)))


def routing_loss(router: RouterOutput, masks: ComponentMasks) -> Tensor:
    """Cross entropy of the router weights against one-hot component masks.

    Background tokens (all-zero mask columns) contribute nothing; the sum is
    divided by the number of foreground tokens so the loss scale does not
    depend on sequence length.
    """
    if masks.y.shape != router.weights.shape:
        raise RouterError(
            f"mask shape {masks.y.shape} vs weights {router.weights.shape}")
    n_fg = int(masks.foreground.sum())
    if n_fg == 0:
        return tk.sum_all(tk.scale(router.weights, 0.0))
    picked = tk.mul(tk.log_clamped(router.weights), Tensor(masks.y))
    return tk.scale(tk.sum_all(picked), -1.0 / n_fg)


def router_param_list(params: RouterParams) -> list[Tensor]:
    return [params.w_m, params.w_l, params.w_z,
            params.ln_l_gain, params.ln_l_bias, params.ln_z_gain, params.ln_z_bias,
            params.phi.wq, params.phi.wk, params.phi.wv, params.phi.wo]

"""Chunk-wise temporal refinement of denoised latent tokens.

Frames are split into K contiguous chunks. Each chunk is prepended with the
last already-refined frame of its predecessor (a learned start block for the
first chunk), a causal transformer summarizes the predecessor chunk, and a
cross-attention head predicts an additive bias for the current chunk's
tokens. Chunks are processed strictly in temporal order, so refined content
never depends on later frames.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor_kernel as tk
from .local_router import LatentTokens, PhiParams, cross_attention_phi, init_phi
from .tensor_kernel import Tensor

FFN_MULT = 4

# Rotary positions are frame indices shifted by one so the learned start
# block, which sits one slot before frame 0, still gets a valid position.
ROPE_POSITION_SHIFT = 1
START_FRAME_INDEX = -1


class ChunkingError(ValueError):
    pass


class TeacherForcingError(ValueError):
    pass


@dataclass
class Chunk:
    """A contiguous group of frames plus one prepended conditioning frame."""

    payload: Tensor                     # (frames_per_chunk * S) x D'
    frame_indices: np.ndarray           # absolute frame per payload token
    index: int                          # 1-based chunk position
    tokens_per_frame: int
    conditioning: Optional[Tensor] = None   # S x D', filled by the refine loop
    conditioning_frame: int = 0              # absolute frame the conditioning copies

    def __post_init__(self):
        self.frame_indices = np.asarray(self.frame_indices, dtype=np.int64)
        s = self.tokens_per_frame
        if self.payload.shape[0] != self.frame_indices.shape[0]:
            raise ChunkingError("payload token count does not match frame index map")
        if self.payload.shape[0] % s != 0:
            raise ChunkingError("payload is not a whole number of frames")
        groups = self.frame_indices.reshape(-1, s)
        if not (groups == groups[:, :1]).all():
            raise ChunkingError("frame indices vary within a token group")
        starts = groups[:, 0]
        if not (np.diff(starts) > 0).all():
            raise ChunkingError("frame indices must strictly increase across groups")

    @classmethod
    def _trusted(cls, payload, frame_indices, index, tokens_per_frame,
                 conditioning=None, conditioning_frame=0) -> "Chunk":
        # Internal fast path for chunks derived from already-validated ones.
        out = object.__new__(cls)
        out.payload = payload
        out.frame_indices = frame_indices
        out.index = index
        out.tokens_per_frame = tokens_per_frame
        out.conditioning = conditioning
        out.conditioning_frame = conditioning_frame
        return out

    @property
    def frames(self) -> int:
        return self.payload.shape[0] // self.tokens_per_frame

    def full_tokens(self) -> Tensor:
        if self.conditioning is None:
            raise TeacherForcingError(
                f"chunk {self.index} has an unfilled conditioning slot")
        return tk.concat_rows([self.conditioning, self.payload])

    def full_frame_indices(self) -> np.ndarray:
        cond = np.full(self.tokens_per_frame, self.conditioning_frame, dtype=np.int64)
        return np.concatenate([cond, self.frame_indices])

    def last_frame(self) -> Tensor:
        s = self.tokens_per_frame
        return tk.slice_rows(self.payload, self.payload.shape[0] - s,
                             self.payload.shape[0])


@dataclass
class PsiLayerParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class PsiParams:
    layers: list[PsiLayerParams]
    heads: int
    width: int

    def __post_init__(self):
        if self.width % self.heads != 0:
            raise ValueError(f"width {self.width} not divisible by {self.heads} heads")
        if (self.width // self.heads) % 2 != 0:
            raise ValueError(
                f"per-head width {self.width // self.heads} must be even for "
                "rotary pairs")


@dataclass
class TamParams:
    psi: PsiParams
    phi: PhiParams
    start_tokens: Tensor    # S x D', zero-initialized
    beta: float


def init_psi_layer(rng: np.random.Generator, width: int) -> PsiLayerParams:
    std = 1.0 / np.sqrt(width)
    n = lambda *s: Tensor(rng.normal(0.0, std, s), requires_grad=True)
    hidden = FFN_MULT * width
    return PsiLayerParams(
        wq=n(width, width), wk=n(width, width), wv=n(width, width), wo=n(width, width),
        ln1_gain=Tensor(np.ones(width), requires_grad=True),
        ln1_bias=Tensor(np.zeros(width), requires_grad=True),
        ln2_gain=Tensor(np.ones(width), requires_grad=True),
        ln2_bias=Tensor(np.zeros(width), requires_grad=True),
        ffn_w1=n(width, hidden),
        ffn_b1=Tensor(np.zeros(hidden), requires_grad=True),
        ffn_w2=Tensor(rng.normal(0.0, 1.0 / np.sqrt(hidden), (hidden, width)),
                      requires_grad=True),
        ffn_b2=Tensor(np.zeros(width), requires_grad=True),
    )


def init_psi(rng: np.random.Generator, layers: int, heads: int, width: int) -> PsiParams:
    return PsiParams([init_psi_layer(rng, width) for _ in range(layers)],
                     heads=heads, width=width)


def init_tam(rng: np.random.Generator, layers: int, heads: int, width: int,
             attn_dim: int, tokens_per_frame: int, beta: float) -> TamParams:
    return TamParams(
        psi=init_psi(rng, layers, heads, width),
        phi=init_phi(rng, query_dim=width, context_dim=width,
                     attn_dim=attn_dim, out_dim=width),
        start_tokens=Tensor(np.zeros((tokens_per_frame, width)), requires_grad=True),
        beta=float(beta),
    )


def split_chunks(z0: LatentTokens, k: int) -> list[Chunk]:
    """Split frames into k equal chunks, conditioning slots left unfilled."""
    if k < 1:
        raise ChunkingError(f"chunk count {k} must be positive")
    if z0.frames % k != 0:
        raise ChunkingError(
            f"{z0.frames} frames are not divisible into {k} chunks")
    per_chunk = z0.frames // k
    s = z0.tokens_per_frame
    frame_of = z0.frame_of_token
    chunks = []
    for i in range(k):
        lo, hi = i * per_chunk * s, (i + 1) * per_chunk * s
        chunks.append(Chunk(
            payload=tk.slice_rows(z0.tokens, lo, hi),
            frame_indices=frame_of[lo:hi],
            index=i + 1,
            tokens_per_frame=s,
        ))
    return chunks


def reassemble(chunks: list[Chunk], frames: int, tokens_per_frame: int) -> LatentTokens:
    tokens = tk.concat_rows([c.payload for c in chunks])
    return LatentTokens(tokens, frames, tokens_per_frame)


def transformer_layer(x: Tensor, layer: PsiLayerParams, heads: int,
                      mask: tk.AttentionMask = tk.MASK_NONE,
                      positions: Optional[np.ndarray] = None) -> Tensor:
    """One pre-norm residual block: multi-head attention then feed-forward.

    ``positions`` enables rotary embedding of queries and keys; ``mask``
    restricts attention. Both default off so the same block serves the
    unmasked denoiser and the causal temporal stack.
    """
    width = x.shape[1]
    dh = width // heads
    h = tk.layer_norm(x, layer.ln1_gain, layer.ln1_bias)
    q = tk.matmul(h, layer.wq)
    k = tk.matmul(h, layer.wk)
    v = tk.matmul(h, layer.wv)
    head_outs = []
    for i in range(heads):
        lo, hi = i * dh, (i + 1) * dh
        qi = tk.slice_cols(q, lo, hi)
        ki = tk.slice_cols(k, lo, hi)
        if positions is not None:
            qi = tk.rope_apply(qi, positions)
            ki = tk.rope_apply(ki, positions)
        vi = tk.slice_cols(v, lo, hi)
        head_outs.append(tk.scaled_dot_attention(qi, ki, vi, mask))
    att = tk.matmul(tk.concat_cols(head_outs), layer.wo)
    x = tk.add(x, att)

    h2 = tk.layer_norm(x, layer.ln2_gain, layer.ln2_bias)
    f = tk.gelu(tk.linear(h2, layer.ffn_w1, layer.ffn_b1))
    f = tk.linear(f, layer.ffn_w2, layer.ffn_b2)
    return tk.add(x, f)


_MASK_CACHE: dict = {}


def _frame_mask(frame_indices: np.ndarray) -> tk.AttentionMask:
    # Frame layouts repeat heavily (every chunk, every step); reuse the mask
    # so its blocked matrix and bias are computed once per layout.
    key = frame_indices.tobytes()
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = tk.causal_by_frame(frame_indices)
        if len(_MASK_CACHE) > 256:
            _MASK_CACHE.clear()
        _MASK_CACHE[key] = mask
    return mask


def psi_forward(tokens: Tensor, frame_indices: np.ndarray, params: PsiParams) -> Tensor:
    """Pre-norm residual transformer with frame-rotary queries/keys and a
    frame-causal mask on every attention layer."""
    frame_indices = np.asarray(frame_indices, dtype=np.int64)
    if frame_indices.shape[0] != tokens.shape[0]:
        raise ChunkingError("frame index map does not cover the token list")
    if (np.diff(frame_indices) < 0).any():
        raise ChunkingError("frame indices must be non-decreasing")
    positions = frame_indices + ROPE_POSITION_SHIFT
    mask = _frame_mask(frame_indices)

    x = tokens
    for layer in params.layers:
        x = transformer_layer(x, layer, params.heads, mask, positions)
    return x


def refine_chunk(prev_enhanced: Chunk, current: Chunk,
                 params: TamParams) -> tuple[Chunk, Tensor]:
    """Predict and apply the additive bias for one chunk.

    The predecessor's already-enhanced tokens are summarized by the causal
    transformer and serve as keys/values; the current chunk's tokens (with
    the conditioning frame prepended) are the queries. Bias rows for the
    conditioning frame are computed but never applied: that frame was
    finalized by the previous chunk.
    """
    if current.conditioning is None:
        raise TeacherForcingError(
            f"chunk {current.index} reached refine_chunk without conditioning")
    context = psi_forward(prev_enhanced.full_tokens()
                          if prev_enhanced.conditioning is not None
                          else prev_enhanced.payload,
                          prev_enhanced.full_frame_indices()
                          if prev_enhanced.conditioning is not None
                          else prev_enhanced.frame_indices,
                          params.psi)
    queries = current.full_tokens()
    bias = cross_attention_phi(context, queries, params.phi)
    s = current.tokens_per_frame
    payload_bias = tk.slice_rows(bias, s, bias.shape[0])
    enhanced_payload = tk.add(current.payload, tk.scale(payload_bias, params.beta))
    enhanced = Chunk._trusted(
        payload=enhanced_payload,
        frame_indices=current.frame_indices,
        index=current.index,
        tokens_per_frame=s,
        conditioning=current.conditioning,
        conditioning_frame=current.conditioning_frame,
    )
    return enhanced, bias


def temporal_refine(z0: LatentTokens, params: TamParams, k: int) -> LatentTokens:
    """Refine all chunks strictly in temporal order and reassemble."""
    chunks = split_chunks(z0, k)
    s = z0.tokens_per_frame
    prev = Chunk._trusted(
        payload=params.start_tokens,
        frame_indices=np.full(s, START_FRAME_INDEX, dtype=np.int64),
        index=0,
        tokens_per_frame=s,
    )
    refined = []
    for chunk in chunks:
        if chunk.index == 1:
            chunk.conditioning = params.start_tokens
            chunk.conditioning_frame = START_FRAME_INDEX
        else:
            chunk.conditioning = prev.last_frame()
            chunk.conditioning_frame = int(prev.frame_indices[-1])
        enhanced, _ = refine_chunk(prev, chunk, params)
        refined.append(enhanced)
        prev = enhanced
    return reassemble(refined, z0.frames, s)


def tam_param_list(params: TamParams) -> list[Tensor]:
    out = [params.start_tokens,
           params.phi.wq, params.phi.wk, params.phi.wv, params.phi.wo]
    for layer in params.psi.layers:
        out.extend([layer.wq, layer.wk, layer.wv, layer.wo,
                    layer.ln1_gain, layer.ln1_bias, layer.ln2_gain, layer.ln2_bias,
                    layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2])
    return out

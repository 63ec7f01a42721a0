"""Deterministic synthetic latent videos with known component structure.

Every foreground token carries its subject's per-component signature plus a
smooth sinusoidal per-frame drift and bounded Gaussian noise, so component
labels are linearly recoverable and temporal smoothness is a measurable
quantity. All randomness flows through numpy's PCG64 generator seeded from
explicit integers; the generator name is recorded in dataset headers so
files remain reproducible across builds.

Temporal corruption adds an independent offset to every frame. The offsets
lie along a fixed global direction rather than spanning all channels:
corruption must be identifiable from a frame's tokens for a desk-scale
refiner to have any chance of removing it, while independence across frames
keeps it a genuine smoothness violation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .local_router import ComponentMasks

PRNG_NAME = "PCG64"
DATASET_MAGIC = b"LVID"
DATASET_VERSION = 1
BACKGROUND_BYTE = 255

DEFAULT_DRIFT_AMPLITUDE = 0.1
JITTER_RANK = 1

# Stream tags keep the per-purpose generators decoupled from one another.
_LAYOUT_TAG = 0x1A70
_MOTION_TAG = 0x307D
_JITTER_TAG = 0xC0FF
_JITTER_BASIS_TAG = 0xBA515


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


class DatasetCorruptError(ValueError):
    pass


@dataclass
class SubjectIdentity:
    id_seed: int
    component_signatures: np.ndarray    # M x D', unit rows
    identity_vector: np.ndarray         # id_dim

    @property
    def components(self) -> int:
        return self.component_signatures.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.component_signatures.shape[1]


@dataclass
class SyntheticSample:
    latents: np.ndarray                 # (F*S) x D'
    frames: int
    tokens_per_frame: int
    masks: ComponentMasks
    subject: SubjectIdentity
    motion_seed: int


def gen_subject(seed: int, components: int, latent_dim: int,
                id_dim: int = 8, max_attempts: int = 32) -> SubjectIdentity:
    """Draw unit-norm component signatures with pairwise cosine below 0.99."""
    if components < 2:
        raise GenerationError(f"need at least 2 components, got {components}")
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        sigs = rng.standard_normal((components, latent_dim))
        sigs /= np.linalg.norm(sigs, axis=1, keepdims=True)
        cos = sigs @ sigs.T
        np.fill_diagonal(cos, 0.0)
        if np.abs(cos).max() < 0.99:
            identity = rng.standard_normal(id_dim)
            return SubjectIdentity(id_seed=int(seed),
                                   component_signatures=sigs,
                                   identity_vector=identity)
    raise GenerationError(
        f"could not draw {components} distinct signatures in {max_attempts} attempts")


def component_layout(subject: SubjectIdentity, tokens_per_frame: int) -> np.ndarray:
    """Per-slot component index (-1 for background), fixed per subject."""
    m = subject.components
    s = tokens_per_frame
    if s < m:
        raise GenerationError(
            f"{s} token slots cannot host {m} components")
    per_component = max(1, s // (m + 1))
    labels = np.full(s, -1, dtype=np.int64)
    labels[:m * per_component] = np.repeat(np.arange(m), per_component)
    rng = np.random.default_rng([subject.id_seed, _LAYOUT_TAG])
    return labels[rng.permutation(s)]


def motion_phases(subject: SubjectIdentity, motion_seed: int) -> np.ndarray:
    rng = np.random.default_rng([subject.id_seed, int(motion_seed), _MOTION_TAG])
    return rng.uniform(0.0, 2.0 * np.pi, subject.latent_dim)


def drift_field(frames: int, amplitude: float, phases: np.ndarray) -> np.ndarray:
    """Per-frame smooth offset: amplitude * sin(2 pi f / F + phase_j)."""
    f = np.arange(frames)[:, None]
    return amplitude * np.sin(2.0 * np.pi * f / frames + phases[None, :])


def gen_video_latents(subject: SubjectIdentity, motion_seed: int, frames: int,
                      tokens_per_frame: int, noise_level: float,
                      drift_amplitude: float = DEFAULT_DRIFT_AMPLITUDE) -> SyntheticSample:
    """Compose signatures, smooth drift, and Gaussian noise into one sample."""
    if noise_level < 0:
        raise GenerationError(f"noise level {noise_level} must be non-negative")
    layout = component_layout(subject, tokens_per_frame)
    phases = motion_phases(subject, motion_seed)
    drift = drift_field(frames, drift_amplitude, phases)

    base = np.zeros((tokens_per_frame, subject.latent_dim))
    fg = layout >= 0
    base[fg] = subject.component_signatures[layout[fg]]

    rng = np.random.default_rng([subject.id_seed, int(motion_seed)])
    noise = noise_level * rng.standard_normal(
        (frames, tokens_per_frame, subject.latent_dim))
    latents = base[None, :, :] + drift[:, None, :] + noise
    latents = latents.reshape(frames * tokens_per_frame, subject.latent_dim)

    token_labels = np.tile(layout, frames)
    y = np.zeros((subject.components, token_labels.shape[0]))
    cols = np.flatnonzero(token_labels >= 0)
    y[token_labels[cols], cols] = 1.0
    return SyntheticSample(latents=latents, frames=frames,
                           tokens_per_frame=tokens_per_frame,
                           masks=ComponentMasks(y), subject=subject,
                           motion_seed=int(motion_seed))


def jitter_basis(latent_dim: int, rank: int = JITTER_RANK) -> np.ndarray:
    """Fixed orthonormal directions (latent_dim x rank) shared by all samples."""
    rng = np.random.default_rng(_JITTER_BASIS_TAG)
    q, _ = np.linalg.qr(rng.standard_normal((latent_dim, rank)))
    return q


def corrupt_temporal(sample: SyntheticSample, jitter: float, seed: int) -> np.ndarray:
    """Add an independent per-frame offset of RMS magnitude ``jitter``.

    Offsets are drawn per frame in the fixed global subspace from
    ``jitter_basis`` and added to every token of the frame, so per-frame
    component structure is preserved while smooth drift is broken.
    """
    if jitter < 0:
        raise GenerationError(f"jitter {jitter} must be non-negative")
    if jitter == 0:
        return sample.latents.copy()
    d = sample.subject.latent_dim
    basis = jitter_basis(d)
    rank = basis.shape[1]
    rng = np.random.default_rng([_JITTER_TAG, int(seed)])
    coeff = rng.standard_normal((sample.frames, rank)) * (
        jitter * np.sqrt(d / rank))
    offsets = coeff @ basis.T                      # F x D'
    per_token = np.repeat(offsets, sample.tokens_per_frame, axis=0)
    return sample.latents + per_token


def frame_deviation(latents: np.ndarray, frames: int,
                    tokens_per_frame: int) -> float:
    """Mean L2 distance between consecutive frames."""
    if frames < 2:
        raise GenerationError("frame deviation needs at least 2 frames")
    per = latents.reshape(frames, -1)
    return float(np.mean(np.linalg.norm(np.diff(per, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# binary dataset file


def _header(frames, tokens_per_frame, latent_dim, components, id_dim, count):
    name = PRNG_NAME.encode("ascii")
    return (DATASET_MAGIC
            + struct.pack("<H", DATASET_VERSION)
            + struct.pack("<B", len(name)) + name
            + struct.pack("<6I", frames, tokens_per_frame, latent_dim,
                          components, id_dim, count))


def header_size() -> int:
    return 4 + 2 + 1 + len(PRNG_NAME) + 6 * 4


def record_size(frames: int, tokens_per_frame: int, latent_dim: int) -> int:
    n = frames * tokens_per_frame
    return 16 + n * latent_dim * 8 + n


def save_dataset(samples: list[SyntheticSample], path) -> None:
    if not samples:
        raise DatasetFormatError("refusing to write an empty dataset")
    first = samples[0]
    f, s = first.frames, first.tokens_per_frame
    d = first.subject.latent_dim
    m = first.subject.components
    id_dim = first.subject.identity_vector.shape[0]
    with open(path, "wb") as fh:
        fh.write(_header(f, s, d, m, id_dim, len(samples)))
        for sample in samples:
            if (sample.frames, sample.tokens_per_frame) != (f, s) \
                    or sample.subject.latent_dim != d \
                    or sample.subject.components != m:
                raise DatasetFormatError("samples in one file must share shapes")
            fh.write(struct.pack("<qq", sample.subject.id_seed, sample.motion_seed))
            fh.write(np.ascontiguousarray(sample.latents, dtype="<f8").tobytes())
            labels = sample.masks.labels.copy()
            labels[labels < 0] = BACKGROUND_BYTE
            fh.write(labels.astype(np.uint8).tobytes())


def load_dataset(path) -> list[SyntheticSample]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"bad magic {blob[:4]!r}, want {DATASET_MAGIC!r}")
    off = 4
    (version,) = struct.unpack_from("<H", blob, off)
    off += 2
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    (name_len,) = struct.unpack_from("<B", blob, off)
    off += 1
    prng = blob[off:off + name_len].decode("ascii")
    off += name_len
    if prng != PRNG_NAME:
        raise DatasetFormatError(f"dataset generated with {prng!r}, not {PRNG_NAME!r}")
    f, s, d, m, id_dim, count = struct.unpack_from("<6I", blob, off)
    off += 24

    n = f * s
    samples = []
    for _ in range(count):
        need = record_size(f, s, d)
        if off + need > len(blob):
            raise DatasetCorruptError(
                f"truncated record: need {need} bytes, {len(blob) - off} left")
        id_seed, motion_seed = struct.unpack_from("<qq", blob, off)
        off += 16
        latents = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off)
        latents = latents.reshape(n, d).copy()
        off += n * d * 8
        labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off).copy()
        off += n
        y = np.zeros((m, n))
        fg = labels != BACKGROUND_BYTE
        if fg.any() and labels[fg].max() >= m:
            raise DatasetCorruptError("component byte out of range")
        y[labels[fg], np.flatnonzero(fg)] = 1.0
        subject = gen_subject(id_seed, m, d, id_dim)
        samples.append(SyntheticSample(
            latents=latents, frames=f, tokens_per_frame=s,
            masks=ComponentMasks(y), subject=subject, motion_seed=motion_seed))
    if off != len(blob):
        raise DatasetCorruptError(f"{len(blob) - off} trailing bytes")
    return samples

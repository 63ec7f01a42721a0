"""Optimization loop, configuration, evaluation, and checkpoint persistence.

Training draws a timestep and a noise sample per step (batch size 1),
optionally swaps the identity condition for the learned null condition, and
minimizes the weighted sum of the denoising error and the routing cross
entropy. The temporal refiner is trained to pull jittered latents back
toward their clean originals, either jointly or on its own. Every random
draw flows through one generator whose state is checkpointed, so a resumed
run continues bit-exactly.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor_kernel as tk
from .diffusion_core import (ConditionBundle, DenoiserParams, ModelParams,
                             NoiseSchedule, add_noise, condition_from_features,
                             denoiser_forward, diffusion_loss, init_denoiser,
                             make_schedule, null_condition)
from .local_router import LatentTokens, router_param_list, routing_loss
from .synthetic_data import (SyntheticSample, corrupt_temporal, frame_deviation)
from .temporal_ar import init_tam, tam_param_list, temporal_refine
from .tensor_kernel import Tensor

CHECKPOINT_MAGIC = b"LVCK"
CHECKPOINT_VERSION = 1
METRICS_HEADER = "step,l_diff,l_route,l_total,wall_ms"

_EVAL_TAG = 0xE7A1

MODES = ("joint", "tam-only", "router-only")


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointSchemaError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    profile: str = "desk"
    mode: str = "joint"
    lambda_diff: float = 1.0
    lambda_route: float = 1.0
    lr: float = 1e-2
    weight_decay: float = 0.0
    steps: int = 2000
    null_ratio: float = 0.1
    alpha: float = 1.0
    beta: float = 0.2
    chunks: int = 4
    timesteps: int = 20
    components: int = 4
    local_tokens: int = 8
    local_dim: int = 16
    latent_dim: int = 32
    inner_dim: int = 16
    tam_layers: int = 2
    heads: int = 2
    blocks: int = 2
    frames: int = 8
    tokens_per_frame: int = 16
    id_dim: int = 8
    seed: int = 0
    cfg_scale: float = 6.0
    jitter: float = 0.1
    tam_weight: float = 1.0
    log_interval: int = 100

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode {self.mode!r} not one of {MODES}")
        positives = ("lr", "steps", "chunks", "timesteps", "components",
                     "local_tokens", "local_dim", "latent_dim", "inner_dim",
                     "tam_layers", "heads", "blocks", "frames",
                     "tokens_per_frame", "id_dim", "log_interval")
        for name in positives:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("lambda_diff", "lambda_route", "null_ratio", "beta",
                     "cfg_scale", "jitter", "weight_decay", "tam_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.null_ratio > 1:
            raise ConfigError("null_ratio must lie in [0, 1]")
        # The documented full-scale profile keeps the published token count,
        # which is not chunk-divisible; it is never trained or sampled, and
        # split_chunks still rejects it if someone tries.
        if self.profile != "paper" and self.frames % self.chunks != 0:
            raise ConfigError(
                f"{self.frames} frames not divisible into {self.chunks} chunks")
        if self.latent_dim % self.heads != 0 \
                or (self.latent_dim // self.heads) % 2 != 0:
            raise ConfigError(
                f"latent_dim {self.latent_dim} needs an even per-head width "
                f"for {self.heads} heads")


def desk_config(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def paper_config() -> TrainConfig:
    """The published full-scale settings, for documentation and shape checks.

    Never executed end to end here: one training step at these sizes is far
    beyond a desk machine. frames * tokens_per_frame preserves the published
    17750 latent tokens.
    """
    return TrainConfig(
        profile="paper", mode="joint",
        lambda_diff=1.0, lambda_route=1.0,
        lr=3e-6, steps=10000, null_ratio=0.1,
        alpha=1.0, beta=0.2, chunks=4, timesteps=50,
        components=6, local_tokens=32, local_dim=2048,
        latent_dim=3072, inner_dim=2048, tam_layers=6,
        heads=2, blocks=2, frames=25, tokens_per_frame=710,
        id_dim=8, seed=0, cfg_scale=6.0,
    )


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def config_to_text(config: TrainConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"


def config_from_text(text: str, base: Optional[TrainConfig] = None) -> TrainConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        ftype = _FIELD_TYPES[key]
        try:
            if ftype in (int, "int"):
                values[key] = int(val)
            elif ftype in (float, "float"):
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from exc
    base = base if base is not None else TrainConfig()
    return replace(base, **values)


def load_config(path) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_text(fh.read())


# ---------------------------------------------------------------------------
# model assembly


def init_model(config: TrainConfig) -> ModelParams:
    den_rng = np.random.default_rng([config.seed, 0xD0])
    tam_rng = np.random.default_rng([config.seed, 0x7A])
    denoiser = init_denoiser(
        den_rng, latent_dim=config.latent_dim, blocks=config.blocks,
        heads=config.heads, timesteps=config.timesteps, id_dim=config.id_dim,
        components=config.components, local_seq_len=config.local_tokens,
        local_dim=config.local_dim, inner_dim=config.inner_dim,
        alpha=config.alpha)
    tam = init_tam(tam_rng, layers=config.tam_layers, heads=config.heads,
                   width=config.latent_dim, attn_dim=config.inner_dim,
                   tokens_per_frame=config.tokens_per_frame, beta=config.beta)
    return ModelParams(denoiser=denoiser, tam=tam)


def _layer_entries(prefix: str, layer) -> list[tuple[str, Tensor]]:
    return [(f"{prefix}.{n}", getattr(layer, n))
            for n in ("wq", "wk", "wv", "wo", "ln1_gain", "ln1_bias",
                      "ln2_gain", "ln2_bias", "ffn_w1", "ffn_b1",
                      "ffn_w2", "ffn_b2")]


def named_parameters(model: ModelParams) -> dict[str, Tensor]:
    den = model.denoiser
    entries: list[tuple[str, Tensor]] = [
        ("den.w_in", den.w_in), ("den.b_in", den.b_in),
        ("den.t_table", den.t_table), ("den.w_cond", den.w_cond),
        ("den.w_out", den.w_out), ("den.b_out", den.b_out),
    ]
    for i, block in enumerate(den.blocks):
        entries += _layer_entries(f"den.block{i}", block)
    r = den.router
    entries += [
        ("den.router.w_m", r.w_m), ("den.router.w_l", r.w_l),
        ("den.router.w_z", r.w_z),
        ("den.router.ln_l_gain", r.ln_l_gain), ("den.router.ln_l_bias", r.ln_l_bias),
        ("den.router.ln_z_gain", r.ln_z_gain), ("den.router.ln_z_bias", r.ln_z_bias),
        ("den.router.phi.wq", r.phi.wq), ("den.router.phi.wk", r.phi.wk),
        ("den.router.phi.wv", r.phi.wv), ("den.router.phi.wo", r.phi.wo),
        ("den.encoder.w", den.encoder.w),
        ("den.null_local", den.null_local),
        ("den.null_identity", den.null_identity),
        ("tam.start_tokens", model.tam.start_tokens),
        ("tam.phi.wq", model.tam.phi.wq), ("tam.phi.wk", model.tam.phi.wk),
        ("tam.phi.wv", model.tam.phi.wv), ("tam.phi.wo", model.tam.phi.wo),
    ]
    for i, layer in enumerate(model.tam.psi.layers):
        entries += _layer_entries(f"tam.psi{i}", layer)
    return dict(entries)


ROUTER_PREFIXES = ("den.router.", "den.encoder.", "den.null_")
TAM_PREFIX = "tam."


def mode_parameter_names(mode: str, names: Sequence[str]) -> list[str]:
    if mode == "joint":
        return list(names)
    if mode == "router-only":
        return [n for n in names if n.startswith(ROUTER_PREFIXES)]
    if mode == "tam-only":
        return [n for n in names if n.startswith(TAM_PREFIX)]
    raise ConfigError(f"mode {mode!r} not one of {MODES}")


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    moments: dict = None

    def __post_init__(self):
        if self.moments is None:
            self.moments = {}


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
               state: OptimizerState) -> None:
    """Bias-corrected moment update with decoupled weight decay, in place."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, grad in grads.items():
        p = params[name]
        if grad.shape != p.data.shape:
            raise tk.ShapeError(
                f"gradient shape {grad.shape} vs parameter {p.data.shape} ({name})")
        m, v = state.moments.get(name, (np.zeros_like(p.data),
                                        np.zeros_like(p.data)))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.moments[name] = (m, v)
        if state.weight_decay != 0.0:
            p.data -= state.lr * state.weight_decay * p.data
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def total_loss(l_diff: Tensor, l_route: Tensor, lambda_diff: float,
               lambda_route: float) -> Tensor:
    return tk.add(tk.scale(l_diff, lambda_diff), tk.scale(l_route, lambda_route))


# ---------------------------------------------------------------------------
# training


@dataclass
class StepResult:
    l_diff: float
    l_route: float
    l_tam: float
    l_total: float
    used_null: bool


def sample_condition(den: DenoiserParams, sample: SyntheticSample) -> ConditionBundle:
    feats = [Tensor(sample.subject.component_signatures[m])
             for m in range(sample.subject.components)]
    ident = Tensor(sample.subject.identity_vector.reshape(1, -1))
    return condition_from_features(den, feats, ident)


def _tam_consistency(model: ModelParams, sample: SyntheticSample,
                     jitter: float, jitter_seed: int, chunks: int) -> Tensor:
    corrupted = LatentTokens(Tensor(corrupt_temporal(sample, jitter, jitter_seed)),
                             sample.frames, sample.tokens_per_frame)
    refined = temporal_refine(corrupted, model.tam, chunks)
    diff = tk.sub(refined.tokens, Tensor(sample.latents))
    return tk.mean_all(tk.mul(diff, diff))


def train_step(batch: SyntheticSample, model: ModelParams, opt: OptimizerState,
               config: TrainConfig, rng: np.random.Generator,
               schedule: NoiseSchedule) -> StepResult:
    params = named_parameters(model)
    selected = mode_parameter_names(config.mode, params.keys())
    tape = tk.Tape()
    used_null = False
    l_diff_v = l_route_v = l_tam_v = 0.0

    if config.mode == "tam-only":
        jitter_seed = int(rng.integers(0, 2 ** 31))
        with tape:
            loss = _tam_consistency(model, batch, config.jitter, jitter_seed,
                                    config.chunks)
        l_tam_v = loss.item()
    else:
        t = int(rng.integers(1, config.timesteps + 1))
        eps_data = rng.standard_normal(batch.latents.shape)
        used_null = bool(rng.random() < config.null_ratio)
        jitter_seed = int(rng.integers(0, 2 ** 31)) if config.mode == "joint" else 0
        z0 = LatentTokens(Tensor(batch.latents), batch.frames,
                          batch.tokens_per_frame)
        eps = z0.with_tokens(Tensor(eps_data))
        with tape:
            cond = (null_condition(model.denoiser) if used_null
                    else sample_condition(model.denoiser, batch))
            z_t = add_noise(z0, eps, t, schedule)
            result = denoiser_forward(z_t, t, cond, model.denoiser)
            l_diff = diffusion_loss(eps, result.eps_hat)
            l_route = routing_loss(result.router, batch.masks)
            loss = total_loss(l_diff, l_route, config.lambda_diff,
                              config.lambda_route)
            if config.mode == "joint" and config.tam_weight > 0:
                l_tam = _tam_consistency(model, batch, config.jitter,
                                         jitter_seed, config.chunks)
                loss = tk.add(loss, tk.scale(l_tam, config.tam_weight))
                l_tam_v = l_tam.item()
        l_diff_v, l_route_v = l_diff.item(), l_route.item()

    tk.backward(tape, loss)
    grads = {}
    for name in selected:
        p = params[name]
        grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    adamw_step(params, grads, opt)
    tk.zero_grads(params.values())
    return StepResult(l_diff=l_diff_v, l_route=l_route_v, l_tam=l_tam_v,
                      l_total=loss.item(), used_null=used_null)


def train_loop(samples: Sequence[SyntheticSample], config: TrainConfig,
               model: Optional[ModelParams] = None,
               opt: Optional[OptimizerState] = None,
               rng: Optional[np.random.Generator] = None,
               steps: Optional[int] = None,
               metrics_path=None,
               start_step: int = 0) -> tuple[ModelParams, OptimizerState,
                                             np.random.Generator, list[StepResult]]:
    if not samples:
        raise EvaluationError("training needs at least one sample")
    first = samples[0]
    if (first.subject.latent_dim != config.latent_dim
            or first.subject.components != config.components
            or first.frames != config.frames
            or first.tokens_per_frame != config.tokens_per_frame):
        raise ConfigError(
            f"dataset shape (F={first.frames}, S={first.tokens_per_frame}, "
            f"D'={first.subject.latent_dim}, M={first.subject.components}) "
            f"does not match the configuration "
            f"(F={config.frames}, S={config.tokens_per_frame}, "
            f"D'={config.latent_dim}, M={config.components})")
    if model is None:
        model = init_model(config)
    if opt is None:
        opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay)
    if rng is None:
        rng = np.random.default_rng([config.seed, 0x57E9])
    schedule = make_schedule(config.timesteps)
    steps = config.steps if steps is None else steps

    writer = None
    if metrics_path is not None:
        import os
        fresh = not os.path.exists(metrics_path) or start_step == 0
        writer = open(metrics_path, "w" if fresh else "a", encoding="utf-8")
        if fresh:
            writer.write(METRICS_HEADER + "\n")

    history = []
    t0 = time.monotonic()
    try:
        for step in range(start_step, start_step + steps):
            idx = int(rng.integers(0, len(samples)))
            result = train_step(samples[idx], model, opt, config, rng, schedule)
            history.append(result)
            if writer is not None and (step + 1) % config.log_interval == 0:
                wall_ms = (time.monotonic() - t0) * 1000.0
                writer.write(f"{step + 1},{result.l_diff:.10g},"
                             f"{result.l_route:.10g},{result.l_total:.10g},"
                             f"{wall_ms:.3f}\n")
                writer.flush()
    finally:
        if writer is not None:
            writer.close()
    return model, opt, rng, history


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class MetricsReport:
    routing_accuracy: float
    mean_route_loss: float
    mean_diff_loss: float
    temporal_deviation_before: float
    temporal_deviation_after: float

    def csv_header(self) -> str:
        return ("routing_accuracy,mean_route_loss,mean_diff_loss,"
                "temporal_deviation_before,temporal_deviation_after")

    def csv_row(self) -> str:
        return (f"{self.routing_accuracy:.10g},{self.mean_route_loss:.10g},"
                f"{self.mean_diff_loss:.10g},"
                f"{self.temporal_deviation_before:.10g},"
                f"{self.temporal_deviation_after:.10g}")


def evaluate(model: ModelParams, dataset: Sequence[SyntheticSample],
             config: TrainConfig) -> MetricsReport:
    """Deterministic held-out metrics.

    Routing accuracy and loss come from the first-block router run on clean
    latents (step-1 embedding). The diffusion loss uses one per-sample
    timestep and noise draw from a fixed evaluation stream. Temporal
    deviations compare each sample's jittered version before and after
    refinement.
    """
    if not dataset:
        raise EvaluationError("evaluation needs a non-empty dataset")
    schedule = make_schedule(config.timesteps)
    den = model.denoiser
    correct = fg_total = 0
    route_losses, diff_losses, devs_before, devs_after = [], [], [], []
    for i, sample in enumerate(dataset):
        cond = sample_condition(den, sample)
        z0 = LatentTokens(Tensor(sample.latents), sample.frames,
                          sample.tokens_per_frame)
        clean = denoiser_forward(z0, 1, cond, den)
        labels = sample.masks.labels
        fg = labels >= 0
        pred = clean.router.weights.data.argmax(axis=0)
        correct += int((pred[fg] == labels[fg]).sum())
        fg_total += int(fg.sum())
        route_losses.append(routing_loss(clean.router, sample.masks).item())

        erng = np.random.default_rng([_EVAL_TAG, config.seed, i])
        t = int(erng.integers(1, config.timesteps + 1))
        eps = z0.with_tokens(Tensor(erng.standard_normal(sample.latents.shape)))
        z_t = add_noise(z0, eps, t, schedule)
        noised = denoiser_forward(z_t, t, cond, den)
        diff_losses.append(diffusion_loss(eps, noised.eps_hat).item())

        corrupted_np = corrupt_temporal(sample, config.jitter, i)
        corrupted = LatentTokens(Tensor(corrupted_np), sample.frames,
                                 sample.tokens_per_frame)
        refined = temporal_refine(corrupted, model.tam, config.chunks)
        devs_before.append(frame_deviation(corrupted_np, sample.frames,
                                           sample.tokens_per_frame))
        devs_after.append(frame_deviation(refined.tokens.data, sample.frames,
                                          sample.tokens_per_frame))
    if fg_total == 0:
        raise EvaluationError("dataset has no foreground tokens")
    return MetricsReport(
        routing_accuracy=correct / fg_total,
        mean_route_loss=float(np.mean(route_losses)),
        mean_diff_loss=float(np.mean(diff_losses)),
        temporal_deviation_before=float(np.mean(devs_before)),
        temporal_deviation_after=float(np.mean(devs_after)),
    )


# ---------------------------------------------------------------------------
# checkpoints


def _write_tensor_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<H", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<B", arr.ndim))
    fh.write(struct.pack(f"<{max(arr.ndim, 1)}I",
                         *(arr.shape if arr.ndim else (1,))))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, blob: bytes, offset: int):
        self.blob = blob
        self.off = offset

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.blob):
            raise CheckpointCorruptError(
                f"truncated checkpoint: wanted {n} bytes, "
                f"{len(self.blob) - self.off} left")
        out = self.blob[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_tensor_record(r: _Reader) -> tuple[str, np.ndarray]:
    (name_len,) = r.unpack("<H")
    name = r.take(name_len).decode("utf-8")
    (ndim,) = r.unpack("<B")
    dims = r.unpack(f"<{max(ndim, 1)}I")
    shape = tuple(dims[:ndim]) if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(r.take(count * 8), dtype="<f8").copy()
    return name, data.reshape(shape) if ndim else data.reshape(dims[:1])[0]


def save_checkpoint(path, model: ModelParams, opt: Optional[OptimizerState],
                    config: TrainConfig, rng: np.random.Generator) -> None:
    params = named_parameters(model)
    cfg_blob = config_to_text(config).encode("utf-8")
    rng_blob = json.dumps(rng.bit_generator.state).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(cfg_blob)))
        fh.write(cfg_blob)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            _write_tensor_record(fh, name, p.data)
        if opt is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", opt.step_count))
            fh.write(struct.pack("<I", len(opt.moments)))
            for name, (m, v) in opt.moments.items():
                _write_tensor_record(fh, "m:" + name, m)
                _write_tensor_record(fh, "v:" + name, v)
        fh.write(struct.pack("<I", len(rng_blob)))
        fh.write(rng_blob)


@dataclass
class Checkpoint:
    config: TrainConfig
    model: ModelParams
    opt: Optional[OptimizerState]
    rng: np.random.Generator


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}, want {CHECKPOINT_MAGIC!r}")
    r = _Reader(blob, 4)
    (version,) = r.unpack("<H")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = r.unpack("<I")
    config = config_from_text(r.take(cfg_len).decode("utf-8"))

    model = init_model(config)
    params = named_parameters(model)
    (n_tensors,) = r.unpack("<I")
    loaded = {}
    for _ in range(n_tensors):
        name, arr = _read_tensor_record(r)
        loaded[name] = arr
    for name, p in params.items():
        if name not in loaded:
            raise CheckpointSchemaError(f"checkpoint is missing tensor {name!r}")
        if loaded[name].shape != p.data.shape:
            raise CheckpointSchemaError(
                f"tensor {name!r} has shape {loaded[name].shape}, "
                f"model expects {p.data.shape}")
        p.data = loaded[name]
    extra = set(loaded) - set(params)
    if extra:
        raise CheckpointSchemaError(f"checkpoint has unknown tensors {sorted(extra)}")

    (has_opt,) = r.unpack("<B")
    opt = None
    if has_opt:
        (step_count,) = r.unpack("<Q")
        (n_moments,) = r.unpack("<I")
        opt = OptimizerState(lr=config.lr, weight_decay=config.weight_decay,
                             step_count=step_count)
        for _ in range(n_moments):
            mname, m = _read_tensor_record(r)
            vname, v = _read_tensor_record(r)
            if not (mname.startswith("m:") and vname == "v:" + mname[2:]):
                raise CheckpointSchemaError(
                    f"optimizer records out of order: {mname!r}, {vname!r}")
            opt.moments[mname[2:]] = (m, v)

    (rng_len,) = r.unpack("<I")
    state = json.loads(r.take(rng_len).decode("utf-8"))
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    if r.off != len(blob):
        raise CheckpointCorruptError(f"{len(blob) - r.off} trailing bytes")
    return Checkpoint(config=config, model=model, opt=opt, rng=rng)

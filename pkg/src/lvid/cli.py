"""Command-line surface: data generation, training, sampling, eval, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from . import synthetic_data as sd
from . import tensor_kernel as tk
from . import trainer as tr
from .diffusion_core import (diffusion_loss, denoiser_forward, make_schedule,
                             null_condition, sample)
from .local_router import (ComponentMasks, LatentTokens, router_logits,
                           router_param_list, router_weights, routing_loss,
                           spatial_enhance)
from .tensor_kernel import Tensor
from .temporal_ar import tam_param_list, temporal_refine

GRAD_LIMIT = 1e-5


def _cmd_gen_data(args) -> int:
    cfg = tr.desk_config()
    samples = []
    for i in range(args.subjects):
        subject = sd.gen_subject(args.seed + i, cfg.components, cfg.latent_dim,
                                 cfg.id_dim)
        for j in range(args.videos_per_subject):
            samples.append(sd.gen_video_latents(
                subject, j, args.frames, args.tokens_per_frame, args.noise))
    sd.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = tr.load_config(args.config)
    if args.mode is not None:
        config = tr.config_from_text(f"mode = {args.mode}", base=config)
    samples = sd.load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)

    model = opt = rng = None
    start_step = 0
    if args.resume is not None:
        ck = tr.load_checkpoint(args.resume)
        config = tr.config_from_text(f"mode = {config.mode}", base=ck.config)
        model, opt, rng = ck.model, ck.opt, ck.rng
        start_step = 0 if opt is None else opt.step_count

    metrics_path = os.path.join(args.out, "metrics.csv")
    model, opt, rng, history = tr.train_loop(
        samples, config, model=model, opt=opt, rng=rng,
        metrics_path=metrics_path, start_step=start_step)
    ckpt_path = os.path.join(args.out, "checkpoint.lvck")
    tr.save_checkpoint(ckpt_path, model, opt, config, rng)
    final = history[-1]
    print(f"trained {len(history)} steps (mode {config.mode}); "
          f"final l_total={final.l_total:.6f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics: {metrics_path}")
    return 0


def _cmd_sample(args) -> int:
    ck = tr.load_checkpoint(args.ckpt)
    config = ck.config
    schedule = make_schedule(config.timesteps)
    subject = sd.gen_subject(args.seed, config.components, config.latent_dim,
                             config.id_dim)
    dummy = sd.gen_video_latents(subject, 0, config.frames,
                                 config.tokens_per_frame, 0.0)
    cond = tr.sample_condition(ck.model.denoiser, dummy)
    out = sample(cond, ck.model, schedule,
                 cfg_scale=args.cfg_scale, chunks=args.chunks, seed=args.seed,
                 apply_tam=not args.no_tam, frames=config.frames,
                 tokens_per_frame=config.tokens_per_frame,
                 num_steps=args.steps)
    with open(args.out, "wb") as fh:
        np.save(fh, out.tokens.data)
    print(f"wrote latents {out.tokens.shape} to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    ck = tr.load_checkpoint(args.ckpt)
    samples = sd.load_dataset(args.data)
    report = tr.evaluate(ck.model, samples, ck.config)
    with open(args.report, "w", encoding="utf-8") as fh:
        fh.write(report.csv_header() + "\n")
        fh.write(report.csv_row() + "\n")
    print(f"routing_accuracy={report.routing_accuracy:.4f} "
          f"mean_route_loss={report.mean_route_loss:.4f} "
          f"mean_diff_loss={report.mean_diff_loss:.4f}")
    print(f"temporal_deviation_before={report.temporal_deviation_before:.4f} "
          f"after={report.temporal_deviation_after:.4f}")
    print(f"report: {args.report}")
    return 0


# ---------------------------------------------------------------------------
# gradient suite
#
# Every desk-profile parameter tensor is verified coordinate by coordinate
# with central differences through its real forward path. Two exact
# economies keep the exhaustive sweep inside the runtime budget:
#
#   * short token streams: no transformer/router/reconstruction parameter
#     shape depends on the token count, so those sweeps run on a few tokens;
#     parameters whose shape is coupled to the token layout (the refiner's
#     start block) are checked at the full desk layout;
#   * staged prefixes: perturbing a deep parameter cannot change anything
#     upstream of it, so each stage's constant prefix is computed once and
#     the differences re-run only the true suffix. This changes no value:
#     the prefix recomputation it skips is deterministic. The earliest
#     stage's parameters (input embeddings) sweep through the entire graph,
#     anchoring the end-to-end composition.
#
# Start blocks and zero output heads are nudged to generic values first:
# finite differences are truncation-dominated at layer norm's zero-variance
# floor, which says nothing about the correctness of the backward rules
# being verified.


def _nudge(params, rng):
    for p in params:
        if np.all(p.data == 0.0):
            p.data = rng.normal(0.0, 0.05, p.data.shape)


def _check_kernel(eps: float):
    rng = np.random.default_rng(0xEC)
    x = Tensor(rng.standard_normal((4, 6)), requires_grad=True)
    gain = Tensor(rng.standard_normal(6), requires_grad=True)
    bias = Tensor(rng.standard_normal(6), requires_grad=True)
    w = Tensor(rng.standard_normal((6, 6)), requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    frames = np.array([0, 0, 1, 2])

    def fn(ps):
        h = tk.layer_norm(x, gain, bias)
        h = tk.linear(h, w, b)
        q = tk.rope_apply(tk.slice_cols(h, 0, 4), frames)
        k = tk.rope_apply(tk.slice_cols(h, 2, 6), frames)
        v = tk.slice_cols(h, 1, 5)
        att = tk.scaled_dot_attention(q, k, v, tk.causal_by_frame(frames))
        s = tk.softmax(tk.gelu(att), axis=1)
        return tk.mean_all(tk.mul(tk.log_clamped(s), s))

    yield "kernel.composite", tk.grad_check(fn, [x, gain, bias, w, b], eps)


def _check_router(eps: float):
    cfg = tr.desk_config()
    model = tr.init_model(cfg)
    den = model.denoiser
    rng = np.random.default_rng(0x60)
    params = router_param_list(den.router) + [den.encoder.w]
    _nudge(params, rng)

    frames, per = 2, cfg.tokens_per_frame
    z = LatentTokens(Tensor(rng.standard_normal((frames * per, cfg.latent_dim))),
                     frames, per)
    feats = [Tensor(rng.standard_normal(cfg.latent_dim))
             for _ in range(cfg.components)]
    labels = rng.integers(-1, cfg.components, frames * per)
    y = np.zeros((cfg.components, frames * per))
    cols = np.flatnonzero(labels >= 0)
    y[labels[cols], cols] = 1.0
    masks = ComponentMasks(y)

    def fn(ps):
        from .local_router import encode_local_components
        local = encode_local_components(feats, den.encoder)
        router = router_weights(router_logits(local, z, den.router))
        enhanced = spatial_enhance(z, local, router, cfg.alpha, den.router)
        return tk.add(routing_loss(router, masks),
                      tk.mean_all(tk.mul(enhanced.tokens, enhanced.tokens)))

    yield "router.losses", tk.grad_check(fn, params, eps)


def _layer_params(layer):
    return [layer.wq, layer.wk, layer.wv, layer.wo,
            layer.ln1_gain, layer.ln1_bias, layer.ln2_gain, layer.ln2_bias,
            layer.ffn_w1, layer.ffn_b1, layer.ffn_w2, layer.ffn_b2]


def _check_tam(eps: float):
    from .temporal_ar import (ROPE_POSITION_SHIFT, START_FRAME_INDEX,
                              TamParams, psi_forward, transformer_layer)
    from .local_router import cross_attention_phi

    cfg = tr.desk_config()
    model = tr.init_model(cfg)
    tam = model.tam
    rng = np.random.default_rng(0x7A11)
    _nudge(tam_param_list(tam), rng)

    # Narrow single-chunk refinement: the whole Eq-4 path with the start
    # block as context, used to sweep the first transformer layer.
    narrow = 4
    tam_narrow = TamParams(
        psi=tam.psi, phi=tam.phi, beta=tam.beta,
        start_tokens=Tensor(rng.normal(0.0, 0.05, (narrow, cfg.latent_dim)),
                            requires_grad=True))
    z_n = LatentTokens(Tensor(rng.standard_normal((narrow, cfg.latent_dim))),
                       1, narrow)
    target_n = Tensor(rng.standard_normal((narrow, cfg.latent_dim)))

    def fn_full(ps):
        refined = temporal_refine(z_n, tam_narrow, 1)
        diff = tk.sub(refined.tokens, target_n)
        return tk.mean_all(tk.mul(diff, diff))

    yield "tam.layer0_full_path", tk.grad_check(
        fn_full, _layer_params(tam.psi.layers[0]) + [tam_narrow.start_tokens],
        eps)

    # Staged suffixes for the deeper layers and the reconstruction head: the
    # prefix below each stage is constant while its parameters move.
    ctx_frames = np.full(narrow, START_FRAME_INDEX, dtype=np.int64)
    positions = ctx_frames + ROPE_POSITION_SHIFT
    mask = tk.causal_by_frame(ctx_frames)
    queries = tk.concat_rows([tam_narrow.start_tokens, z_n.tokens])
    stage_in = Tensor(tam_narrow.start_tokens.data.copy())

    def prefix_through(layer_idx):
        x = stage_in
        for layer in tam.psi.layers[:layer_idx]:
            x = transformer_layer(x, layer, tam.psi.heads, mask, positions)
        return Tensor(x.data.copy())

    for idx in range(1, len(tam.psi.layers)):
        prefix = prefix_through(idx)

        def fn_layer(ps, prefix=prefix, idx=idx):
            x = prefix
            for layer in tam.psi.layers[idx:]:
                x = transformer_layer(x, layer, tam.psi.heads, mask, positions)
            bias = cross_attention_phi(x, queries, tam.phi)
            payload_bias = tk.slice_rows(bias, narrow, bias.shape[0])
            refined = tk.add(z_n.tokens, tk.scale(payload_bias, tam.beta))
            diff = tk.sub(refined, target_n)
            return tk.mean_all(tk.mul(diff, diff))

        yield f"tam.layer{idx}_suffix", tk.grad_check(
            fn_layer, _layer_params(tam.psi.layers[idx]), eps)

    ctx_const = Tensor(psi_forward(stage_in, ctx_frames, tam.psi).data.copy())

    def fn_phi(ps):
        bias = cross_attention_phi(ctx_const, queries, tam.phi)
        payload_bias = tk.slice_rows(bias, narrow, bias.shape[0])
        refined = tk.add(z_n.tokens, tk.scale(payload_bias, tam.beta))
        diff = tk.sub(refined, target_n)
        return tk.mean_all(tk.mul(diff, diff))

    yield "tam.reconstruction_suffix", tk.grad_check(
        fn_phi, [tam.phi.wq, tam.phi.wk, tam.phi.wv, tam.phi.wo], eps)

    # The start block's shape is tied to tokens-per-frame; check it at the
    # full desk layout through a two-chunk teacher-forced refinement.
    frames, chunks = 2, 2
    per = cfg.tokens_per_frame
    z = LatentTokens(Tensor(rng.standard_normal((frames * per, cfg.latent_dim))),
                     frames, per)
    target = Tensor(rng.standard_normal((frames * per, cfg.latent_dim)))

    def fn_start(ps):
        refined = temporal_refine(z, tam, chunks)
        diff = tk.sub(refined.tokens, target)
        return tk.mean_all(tk.mul(diff, diff))

    yield "tam.start_block", tk.grad_check(fn_start, [tam.start_tokens], eps)


def _check_denoiser(eps: float):
    from .diffusion_core import condition_from_features
    from .temporal_ar import transformer_layer

    cfg = tr.desk_config()
    model = tr.init_model(cfg)
    den = model.denoiser
    rng = np.random.default_rng(0xDE)
    embed_params = [den.w_in, den.b_in, den.t_table, den.w_cond]
    block_params = [_layer_params(b) for b in den.blocks]
    _nudge(embed_params + sum(block_params, []) + [den.w_out, den.b_out]
           + router_param_list(den.router), rng)

    # One frame of eight tokens: no denoiser parameter shape depends on the
    # token count, so the narrow stream only shortens the sweep.
    frames, per = 1, 8
    n = frames * per
    z_t = LatentTokens(Tensor(rng.standard_normal((n, cfg.latent_dim))),
                       frames, per)
    eps_true = z_t.with_tokens(Tensor(rng.standard_normal((n, cfg.latent_dim))))
    feats = [Tensor(rng.standard_normal(cfg.latent_dim))
             for _ in range(cfg.components)]
    ident = Tensor(rng.standard_normal((1, cfg.id_dim)))
    labels = rng.integers(0, cfg.components, n)
    y = np.zeros((cfg.components, n))
    y[labels, np.arange(n)] = 1.0
    masks = ComponentMasks(y)

    # The condition is constant with respect to every checked parameter here
    # (encoder gradients run in the router check), so encode it once.
    cond = condition_from_features(den, feats, ident)

    def objective(result):
        l_diff = diffusion_loss(eps_true, result.eps_hat)
        l_route = routing_loss(result.router, masks)
        return tr.total_loss(l_diff, l_route, cfg.lambda_diff, cfg.lambda_route)

    # Input embeddings sweep through the full pipeline: embed, router
    # injection, every block, output head, both loss terms.
    def fn_full(ps):
        return objective(denoiser_forward(z_t, 2, cond, den))

    yield "denoiser.embed_full_path", tk.grad_check(fn_full, embed_params, eps)

    def embed_and_route():
        h = tk.linear(z_t.tokens, den.w_in, den.b_in)
        h = tk.add_bias(h, tk.reshape(tk.slice_rows(den.t_table, 2, 3),
                                      (h.shape[1],)))
        h = tk.add_bias(h, tk.reshape(tk.matmul(cond.identity_vector,
                                                den.w_cond), (h.shape[1],)))
        stream = z_t.with_tokens(h)
        router = router_weights(router_logits(cond.local, stream, den.router))
        return spatial_enhance(stream, cond.local, router, den.alpha,
                               den.router).tokens

    # Block and head parameters cannot affect anything upstream of
    # themselves; sweep each through its true suffix from a precomputed
    # prefix. The routing loss is constant in these sweeps and drops out of
    # the differences entirely.
    prefix = Tensor(embed_and_route().data.copy())
    for idx, block in enumerate(den.blocks):

        def fn_block(ps, prefix=prefix, idx=idx):
            x = prefix
            for later in den.blocks[idx:]:
                x = transformer_layer(x, later, den.heads)
            pred = tk.linear(x, den.w_out, den.b_out)
            return diffusion_loss(eps_true, z_t.with_tokens(pred))

        yield f"denoiser.block{idx}_suffix", tk.grad_check(
            fn_block, block_params[idx], eps)
        prefix = Tensor(transformer_layer(prefix, block, den.heads).data.copy())

    def fn_head(ps, prefix=prefix):
        pred = tk.linear(prefix, den.w_out, den.b_out)
        return diffusion_loss(eps_true, z_t.with_tokens(pred))

    yield "denoiser.head_suffix", tk.grad_check(
        fn_head, [den.w_out, den.b_out], eps)

    # The learned null condition runs the full pipeline end to end.
    def fn_null(ps):
        result = denoiser_forward(z_t, 2, null_condition(den), den)
        return objective(result)

    yield "denoiser.null_condition", tk.grad_check(
        fn_null, [den.null_local, den.null_identity], eps)


_CHECKS = {
    "kernel": (_check_kernel,),
    "router": (_check_router,),
    "tam": (_check_tam,),
    "denoiser": (_check_denoiser,),
}
_CHECKS["all"] = _CHECKS["kernel"] + _CHECKS["router"] + _CHECKS["tam"] \
    + _CHECKS["denoiser"]


def _cmd_gradcheck(args) -> int:
    worst_overall = 0.0
    failed = False
    t0 = time.monotonic()
    for group in _CHECKS[args.module]:
        for name, err in group(args.eps):
            ok = err <= GRAD_LIMIT
            failed |= not ok
            worst_overall = max(worst_overall, err)
            print(f"{name}: max relative error {err:.3e} "
                  f"(limit {GRAD_LIMIT:.0e}) {'PASS' if ok else 'FAIL'}")
    print(f"gradcheck {args.module}: worst {worst_overall:.3e} "
          f"in {time.monotonic() - t0:.1f}s -> {'FAIL' if failed else 'PASS'}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lvid",
        description="Desk-scale latent-video diffusion with component routing "
                    "and chunk-wise temporal refinement.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--videos-per-subject", type=int, required=True)
    p.add_argument("--frames", type=int, required=True)
    p.add_argument("--tokens-per-frame", type=int, required=True)
    p.add_argument("--noise", type=float, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=list(tr.MODES))
    p.add_argument("--resume")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("sample", help="sample latents from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cfg-scale", type=float, default=6.0)
    p.add_argument("--chunks", type=int, default=4)
    p.add_argument("--no-tam", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", choices=["all", "router", "tam", "denoiser",
                                        "kernel"], default="all")
    p.add_argument("--eps", type=float, default=1e-5)
    p.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())

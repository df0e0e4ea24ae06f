"""Command-line entry points.

    channeldiff run <config.json> [--output out.csv] [--trace]
    channeldiff sweep <config.json> --axis <name> --values v1,v2,...
    channeldiff check-grad
    channeldiff oracle
    channeldiff train-codec <config.json>
    channeldiff bench

Exit code 0 on success; on failure a single machine-readable line
``error: <kind>: <message>`` goes to stderr and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np


def _cmd_run(args) -> int:
    from .harness import ScenarioConfig, run_scenario

    config = ScenarioConfig.load(args.config)
    if args.output:
        config.raw["output"] = args.output
    if args.trace:
        config.raw["trace"] = True
    agg = run_scenario(config)
    print(json.dumps(agg, sort_keys=True, default=str))
    return 0


def _cmd_sweep(args) -> int:
    from .harness import ScenarioConfig, sweep

    config = ScenarioConfig.load(args.config)
    values = [float(v) for v in args.values.split(",")]
    summaries = sweep(config, args.axis, values, output_prefix=args.output)
    for s in summaries:
        print(json.dumps(s, sort_keys=True, default=str))
    return 0


def _cmd_check_grad(args) -> int:
    """Finite-difference verification of every guidance-loss gradient."""
    from . import autodiff as ad
    from . import codec as codec_mod
    from . import ofdm
    from .priors import GmmPrior, score_op, ChannelGaussianPrior
    from .schedule import build_schedule

    rng = np.random.default_rng(args.seed)
    sch = build_schedule(200)
    m, k = 6, 3
    prior = GmmPrior([0.5, 0.5], rng.standard_normal((2, m)), np.full((2, m), 0.5))
    codec = codec_mod.linear_codec(m, k, seed=1, power_norm="frame")
    pdp = ofdm.sample_pdp(4, 4.0)
    link = ofdm.OfdmLink(k=k, n_fft=4, n_cp=4, n_pilot=1, noise_power=0.1, pdp=pdp)
    link_clip = ofdm.OfdmLink(k=k, n_fft=4, n_cp=4, n_pilot=1, clip_ratio=0.9,
                              noise_power=0.1, pdp=pdp)
    h = ofdm.sample_channel(pdp, rng)
    y = rng.standard_normal((1, 2 * link.frame_len))
    x_d = rng.standard_normal((1, m))
    t = 60

    def tweedie(leaf):
        ab = sch.abar_at(t)
        s = score_op(prior, sch, leaf, t)
        return ad.mul(ad.add(leaf, ad.mul(s, 1.0 - ab)), 1.0 / np.sqrt(ab))

    def loss_guided(v):
        w = ofdm.forward_operator(link, codec_mod.encode(codec, tweedie(v["x"])), h.pairs())
        return ad.sumsq(ad.sub(w, y))

    def loss_guided_clip(v):
        w = ofdm.forward_operator(link_clip, codec_mod.encode(codec, tweedie(v["x"])), h.pairs())
        return ad.sumsq(ad.sub(w, y))

    def loss_confirming(v):
        x0h = tweedie(v["x"])
        w = ofdm.forward_operator(link, codec_mod.encode(codec, x0h), h.pairs())
        lm = ad.sumsq(ad.sub(w, y))
        xr = codec_mod.decode(codec, ofdm.receiver_inverse(link, w, h))
        return ad.add(lm, ad.sumsq(ad.sub(xr, x_d)))

    chan = ChannelGaussianPrior(pdp)

    def loss_blind(v):
        ab = sch.abar_at(t)
        x0h = tweedie(v["x"])
        s_h = score_op(chan, sch, v["h"], t)
        h0h = ad.mul(ad.add(v["h"], ad.mul(s_h, 1.0 - ab)), 1.0 / np.sqrt(ab))
        w = ofdm.forward_operator(link, codec_mod.encode(codec, x0h), h0h)
        return ad.sumsq(ad.sub(w, y))

    cases = [
        ("quadratic shrink", lambda v: ad.sumsq(v["x"]), {"x": rng.standard_normal((1, m))}),
        ("guided measurement", loss_guided, {"x": rng.standard_normal((1, m))}),
        ("guided + clipping", loss_guided_clip, {"x": rng.standard_normal((1, m))}),
        ("confirming combined", loss_confirming, {"x": rng.standard_normal((1, m))}),
        ("blind joint", loss_blind,
         {"x": rng.standard_normal((1, m)), "h": rng.standard_normal((1, 8)) * 0.4}),
    ]
    all_ok = True
    print(f"{'case':24s} {'max_rel_err':>12s} {'boundary':>9s} status")
    for name, fn, inputs in cases:
        errors, boundary, _ = ad.finite_diff_details(fn, inputs, coords=args.coords, seed=args.seed)
        worst = float(errors.max()) if errors.size else 0.0
        ok = worst < 1e-3
        all_ok &= ok
        print(f"{name:24s} {worst:12.3e} {len(boundary):9d} {'pass' if ok else 'FAIL'}")
    return 0 if all_ok else 1


def _cmd_oracle(args) -> int:
    """Sampler-vs-conjugate-posterior agreement on the identity channel."""
    from . import rng as rngmod
    from .codec import encode, linear_codec
    from .metrics import analytic_posterior
    from .priors import GaussianPrior
    from .samplers import GuidanceConfig, guided_decode, posterior_matched_zeta
    from .schedule import build_schedule

    m, k = 16, 8
    sigma2 = 0.1
    prior = GaussianPrior(np.zeros(m), np.ones(m))
    codec = linear_codec(m, k, seed=3, power_norm="calibrated", prior=prior)
    sch = build_schedule(1000)
    x_star = prior.sample(1, rngmod.stream(args.seed, 0, "source"))
    z = encode(codec, x_star)
    noise = np.sqrt(sigma2 / 2) * rngmod.stream(args.seed, 0, "noise").standard_normal(z.shape)
    y = z + noise
    post = analytic_posterior(codec, prior, sigma2, y[0])
    zeta = posterior_matched_zeta(sch, sigma2, prior_var=1.0, gram=codec.scale**2)
    g = GuidanceConfig(zeta=zeta, gamma=0.0)
    yb = np.broadcast_to(y, (args.chains, y.shape[1])).copy()
    x0, _ = guided_decode(yb, codec, None, None, prior, sch, g,
                          rngmod.stream(args.seed, 0, "sampler"))
    mean_err = float(np.abs(x0.mean(axis=0) - post.mean()).max())
    var_err = float(np.abs(x0.var(axis=0, ddof=1) - np.diag(post.cov())).max()
                    / np.diag(post.cov()).max())
    ok = mean_err < 0.05 and var_err < 0.20
    print(f"posterior mean max deviation (prior-std units): {mean_err:.4f} (< 0.05)")
    print(f"posterior variance max relative deviation:      {var_err:.4f} (< 0.20)")
    print("pass" if ok else "FAIL")
    return 0 if ok else 1


def _cmd_train_codec(args) -> int:
    from .codec import mlp_codec, save_codec, train_codec
    from .harness import ScenarioConfig

    with open(args.config) as f:
        raw = json.load(f)
    training = raw.pop("training", {})
    config = ScenarioConfig.from_dict(raw)
    prior = config.build_prior()
    spec = config.raw["codec"]
    codec = mlp_codec(
        prior.dim, spec["k"],
        hidden=tuple(training.get("hidden", (64, 64))),
        seed=training.get("init_seed", 0),
    )
    codec = train_codec(
        codec, prior,
        link=None,
        noise_power=config.noise_power(),
        steps=training.get("steps", 3000),
        batch_size=training.get("batch_size", 64),
        learning_rate=training.get("learning_rate", 2e-3),
        seed=training.get("seed", 0),
    )
    out = args.output or training.get("output", "codec.bin")
    save_codec(codec, out)
    print(json.dumps({
        "output": out,
        "val_mse": codec.val_mse,
        "baseline_mse": codec.baseline_mse,
    }))
    return 0


def _cmd_bench(args) -> int:
    """Compare the compiled score kernels against the numpy fallback."""
    from . import _score_kernels_np as knp
    from . import kernels

    if not kernels.HAVE_COMPILED:
        print("compiled extension not available; benchmarking fallback against itself")
    rng = np.random.default_rng(0)
    print(f"{'case':34s} {'numpy':>10s} {'compiled':>10s} {'speedup':>8s}")
    for B, m, K in [(1, 16, 8), (32, 16, 8), (1000, 16, 8), (1000, 64, 2)]:
        x = rng.standard_normal((B, m))
        mu = rng.standard_normal((K, m))
        var = rng.uniform(0.5, 2.0, (K, m))
        logw = np.log(np.full(K, 1.0 / K))
        v = rng.standard_normal((B, m))
        for name, f_np, f_c, fargs in [
            ("score", knp.gmm_score, kernels.gmm_score, (x, mu, var, logw)),
            ("score_hvp", knp.gmm_score_hvp, kernels.gmm_score_hvp, (x, mu, var, logw, v)),
        ]:
            reps = max(3, int(2e6 / (B * m * K)))
            t0 = time.perf_counter()
            for _ in range(reps):
                f_np(*fargs)
            t_np = (time.perf_counter() - t0) / reps
            t0 = time.perf_counter()
            for _ in range(reps):
                f_c(*fargs)
            t_c = (time.perf_counter() - t0) / reps
            label = f"{name} B={B} m={m} K={K}"
            print(f"{label:34s} {t_np * 1e6:9.1f}u {t_c * 1e6:9.1f}u {t_np / t_c:8.2f}x")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="channeldiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and write its CSV")
    p.add_argument("config")
    p.add_argument("--output", default=None)
    p.add_argument("--trace", action="store_true", help="also write per-trial trace CSVs")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="run a scenario across one parameter axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True, help="comma-separated numbers")
    p.add_argument("--output", default=None)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("check-grad", help="finite-difference gradient verification")
    p.add_argument("--coords", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_check_grad)

    p = sub.add_parser("oracle", help="posterior-oracle agreement suite")
    p.add_argument("--chains", type=int, default=400)
    p.add_argument("--seed", type=int, default=42)
    p.set_defaults(fn=_cmd_oracle)

    p = sub.add_parser("train-codec", help="train an mlp codec and write its binary")
    p.add_argument("config")
    p.add_argument("--output", default=None)
    p.set_defaults(fn=_cmd_train_codec)

    p = sub.add_parser("bench", help="compiled-vs-numpy kernel benchmark")
    p.set_defaults(fn=_cmd_bench)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - single structured error line
        kind = type(e).__name__
        print(f"error: {kind}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

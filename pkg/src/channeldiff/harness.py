"""Scenario configuration, seeded experiment execution and CSV output.

A scenario is a JSON document with a versioned schema; defaults are filled
in at load time and the completed config is echoed into the CSV header so
every results file is self-describing.  Per-trial randomness derives from
(base seed, trial index, substream label) via `rng.stream`, so runs are
bit-reproducible and adding trials or substreams never perturbs existing
draws.

Trials execute as one vectorised batch (row i of every array belongs to
trial i and consumes only trial i's streams); rows are emitted in trial
order.  The CSV body schema is fixed:

    trial, seed, csnr_db, variant, steps, mse, psnr_db, l_m_final, d_h,
    success, frechet_gaussian

with one aggregate row flagged by trial = -1 (mean columns, success ratio,
and the fitted-Gaussian distance between the decoded set and fresh prior
samples, which only the aggregate row carries).
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import codec as codec_mod
from . import metrics, ofdm, rng
from .errors import ConfigError
from .priors import GaussianPrior, GmmPrior
from .samplers import GuidanceConfig, blind_decode, confirming_decode, guided_decode
from .schedule import build_schedule

SCHEMA_VERSION = 1

CSV_COLUMNS = [
    "trial", "seed", "csnr_db", "variant", "steps", "mse", "psnr_db",
    "l_m_final", "d_h", "success", "frechet_gaussian",
]

SCENARIOS = ("awgn", "fading", "fading_clip", "fading_isi", "blind")
VARIANTS = ("guided", "confirming", "blind")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "scenario",
    "seed": 0,
    "trials": 100,
    "source_prior": {
        "kind": "gaussian",
        "mean": [0.0] * 16,
        "variance": [1.0] * 16,
    },
    "codec": {
        "kind": "linear",
        "k": 8,
        "seed": 0,
        "power_norm": "calibrated",
        "decode": "mmse",
    },
    "link": {
        "scenario": "awgn",
        "csnr_db": 10.0,
        "n_fft": 256,
        "n_cp": 10,
        "n_pilot": 1,
        "clip_ratio": None,
        "taps": 8,
        "decay": 4.0,
        "interleaver_seed": 0,
    },
    "sampler": {
        "variant": "guided",
        "steps": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "zeta": 0.02,
        "gamma": 0.001,
        "zeta_h": None,
        "tau": 20.0,
        "eta": 1.0,
        "zeta_mode": "constant",
        "grad_mode": "full_backprop",
    },
    "psnr_peak": None,
    "success_psnr_db": 15.0,
    "trace": False,
    "output": "results.csv",
}


def _merge_defaults(cfg: dict, defaults: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in cfg.items():
        if key not in defaults:
            raise ConfigError(f"unknown config field '{path}{key}'")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"field '{path}{key}' must be an object")
            out[key] = _merge_defaults(value, defaults[key], path=f"{path}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class ScenarioConfig:
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        merged = _merge_defaults(d, DEFAULTS)
        cfg = cls(raw=merged)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str) -> "ScenarioConfig":
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON ({e.msg})") from e
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def dump(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.raw, f, indent=2, sort_keys=True)
            f.write("\n")

    # -- validation ---------------------------------------------------------

    def validate(self) -> None:
        r = self.raw
        if r["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {r['schema_version']}")
        if r["trials"] < 1:
            raise ConfigError("trials must be >= 1")
        link, sampler = r["link"], r["sampler"]
        if link["scenario"] not in SCENARIOS:
            raise ConfigError(f"unknown scenario '{link['scenario']}'")
        if sampler["variant"] not in VARIANTS:
            raise ConfigError(f"unknown sampler variant '{sampler['variant']}'")
        blind_scenario = link["scenario"] == "blind"
        if blind_scenario and sampler["variant"] != "blind":
            raise ConfigError(
                "the pilot-free 'blind' scenario provides no channel estimate; "
                f"sampler variant '{sampler['variant']}' requires one"
            )
        if sampler["variant"] == "blind" and not blind_scenario:
            raise ConfigError("the blind sampler runs only under the 'blind' scenario")
        if r["codec"]["kind"] == "linear" and "path" in r["codec"]:
            raise ConfigError("linear codecs are built inline; 'path' is for mlp codecs")

    # -- construction of the experiment objects -----------------------------

    def build_prior(self):
        spec = self.raw["source_prior"]
        kind = spec.get("kind")
        if kind == "gaussian":
            return GaussianPrior(np.asarray(spec["mean"]), np.asarray(spec["variance"]))
        if kind == "gmm":
            if "means_seed" in spec:
                g = np.random.default_rng(spec["means_seed"])
                K, m = spec["components"], spec["dim"]
                means = g.standard_normal((K, m)) * spec.get("means_scale", 1.0)
                if "means_offset" in spec:
                    means = means + spec["means_offset"]
                weights = np.asarray(spec.get("weights", [1.0 / K] * K))
                variances = np.full((K, m), spec.get("variance", 1.0))
            else:
                weights = np.asarray(spec["weights"])
                means = np.asarray(spec["means"])
                variances = np.asarray(spec["variances"])
            return GmmPrior(weights, means, variances)
        raise ConfigError(f"unknown prior kind '{kind}'")

    def noise_power(self) -> float:
        return ofdm.csnr_to_noise_power(self.raw["link"]["csnr_db"])

    def build_codec(self, prior):
        spec = self.raw["codec"]
        m = prior.dim
        if "path" in spec and spec["path"]:
            codec = codec_mod.load_codec(spec["path"])
            if codec.m != m:
                raise ConfigError(
                    f"codec at {spec['path']} expects m={codec.m}, prior has dim {m}"
                )
            return codec
        if spec["kind"] == "linear":
            return codec_mod.linear_codec(
                m,
                spec["k"],
                seed=spec.get("seed", 0),
                power_norm=spec.get("power_norm", "calibrated"),
                prior=prior,
                decode=spec.get("decode", "mmse"),
                noise_power=ofdm.csnr_to_noise_power(
                    spec.get("decode_csnr_db", self.raw["link"]["csnr_db"])
                ),
            )
        if spec["kind"] == "mlp":
            raise ConfigError("mlp codecs must be trained first (see train-codec) and given by path")
        raise ConfigError(f"unknown codec kind '{spec['kind']}'")

    def build_link(self, codec) -> ofdm.OfdmLink | None:
        link = self.raw["link"]
        if link["scenario"] == "awgn":
            return None
        clip = link["clip_ratio"]
        if link["scenario"] == "fading_clip" and clip is None:
            raise ConfigError("fading_clip needs a finite clip_ratio")
        n_cp = 0 if link["scenario"] == "fading_isi" else link["n_cp"]
        n_pilot = 0 if link["scenario"] == "blind" else link["n_pilot"]
        return ofdm.OfdmLink(
            k=codec.k,
            n_fft=link["n_fft"],
            n_cp=n_cp,
            n_pilot=n_pilot,
            clip_ratio=math.inf if clip is None else float(clip),
            interleaver_seed=link["interleaver_seed"],
            noise_power=self.noise_power(),
            pdp=ofdm.sample_pdp(link["taps"], link["decay"]),
        )

    def build_guidance(self) -> GuidanceConfig:
        s = self.raw["sampler"]
        return GuidanceConfig(
            zeta=s["zeta"],
            gamma=s["gamma"],
            zeta_h=s["zeta_h"],
            tau=s["tau"],
            eta=s["eta"],
            zeta_mode=s["zeta_mode"],
            grad_mode=s["grad_mode"],
        )

    def build_schedule(self):
        s = self.raw["sampler"]
        return build_schedule(s["steps"], s["beta_start"], s["beta_end"])


# ---------------------------------------------------------------------------
# execution


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    return format(float(x), ".12g")


def run_scenario(config: ScenarioConfig, output: str | None = None) -> dict:
    """Execute all trials, write the CSV, return the aggregate summary."""
    r = config.raw
    prior = config.build_prior()
    codec = config.build_codec(prior)
    link = config.build_link(codec)
    schedule = config.build_schedule()
    guidance = config.build_guidance()
    variant = r["sampler"]["variant"]
    sigma2 = config.noise_power()
    base_seed = r["seed"]
    B = r["trials"]
    peak = r["psnr_peak"] or metrics.prior_peak(prior)

    xs = np.stack([prior.sample(1, rng.stream(base_seed, i, "source"))[0] for i in range(B)])
    z = ad.value_of(codec_mod.encode(codec, xs))

    h_star = None
    if link is None:
        noise = np.stack(
            [ofdm.sample_awgn_noise(codec.k, sigma2, 1, rng.stream(base_seed, i, "noise"))[0]
             for i in range(B)]
        )
        y = z + noise
    else:
        taps = np.stack(
            [ofdm.sample_channel(link.pdp, rng.stream(base_seed, i, "channel")).taps
             for i in range(B)]
        )
        h_star = ofdm.ChannelRealization(taps)
        noise = np.stack(
            [ofdm.sample_frame_noise(link, 1, rng.stream(base_seed, i, "noise"))[0]
             for i in range(B)]
        )
        y = ad.value_of(ofdm.ofdm_transmit(link, z, h_star, noise=noise))

    sampler_streams = [rng.stream(base_seed, i, "sampler") for i in range(B)]
    h_est = None
    if link is not None and variant in ("guided", "confirming"):
        h_est = ofdm.ChannelRealization(
            ofdm.estimate_channel_lmmse(link, y).taps, role="estimate"
        )

    d_h = None
    if variant == "guided":
        x0, trace = guided_decode(y, codec, link, h_est, prior, schedule, guidance, sampler_streams)
    elif variant == "confirming":
        x0, trace = confirming_decode(
            y, codec, link, h_est, prior, schedule, guidance, sampler_streams,
            noise_power=sigma2,
        )
    else:
        pdp = link.pdp
        x0, h0, trace = blind_decode(
            y, codec, link, pdp, prior, schedule, guidance, sampler_streams, h_star=h_star
        )
        d_h = np.sum(np.abs(h0 - h_star.taps) ** 2, axis=1)

    steps = trace.steps
    rows = []
    mses = np.mean((x0 - xs) ** 2, axis=1)
    for i in range(B):
        p = metrics.psnr(xs[i], x0[i], peak)
        rows.append(metrics.TrialReport(
            trial=i,
            seed=base_seed,
            csnr_db=r["link"]["csnr_db"],
            variant=variant,
            steps=steps,
            mse=float(mses[i]),
            psnr_db=p,
            l_m_final=float(trace.l_m_final[i]),
            d_h=float(d_h[i]) if d_h is not None else None,
            success=bool(p >= r["success_psnr_db"]),
        ))

    fresh = prior.sample(max(2000, prior.dim + 1), rng.stream(base_seed, 2**20, "source"))
    agg = {
        "mse": float(np.mean(mses)),
        "psnr_db": metrics.psnr(xs, x0, peak),
        "l_m_final": float(np.mean(trace.l_m_final)),
        "d_h": float(np.mean(d_h)) if d_h is not None else None,
        "success_ratio": metrics.success_ratio(rows),
        "frechet_gaussian": metrics.frechet_gaussian(x0, fresh),
        "steps": steps,
        "variant": variant,
        "csnr_db": r["link"]["csnr_db"],
    }

    out_path = output or r["output"]
    _write_csv(out_path, config, rows, agg)
    if r["trace"]:
        _write_traces(out_path, trace, variant)
    return agg


def _write_csv(path: str, config: ScenarioConfig, rows, agg: dict) -> None:
    lines = [
        f"# generated {time.strftime('%Y-%m-%dT%H:%M:%S%z')}",
        f"# config {json.dumps(config.raw, sort_keys=True)}",
        ",".join(CSV_COLUMNS),
    ]
    for t in rows:
        lines.append(",".join([
            _fmt(t.trial), _fmt(t.seed), _fmt(t.csnr_db), t.variant, _fmt(t.steps),
            _fmt(t.mse), _fmt(t.psnr_db), _fmt(t.l_m_final), _fmt(t.d_h),
            _fmt(t.success), "",
        ]))
    lines.append(",".join([
        "-1", _fmt(config.raw["seed"]), _fmt(agg["csnr_db"]), agg["variant"],
        _fmt(agg["steps"]), _fmt(agg["mse"]), _fmt(agg["psnr_db"]),
        _fmt(agg["l_m_final"]), _fmt(agg["d_h"]), _fmt(agg["success_ratio"]),
        _fmt(agg["frechet_gaussian"]),
    ]))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _write_traces(out_path: str, trace, variant: str) -> None:
    stem = out_path[:-4] if out_path.endswith(".csv") else out_path
    n_steps, B = trace.l_m.shape
    for i in range(B):
        lines = ["step,t,l_m,l_c,d_h"]
        for s in range(n_steps):
            lc = trace.l_c[s, i] if trace.l_c is not None else None
            dh = trace.d_h[s, i] if trace.d_h is not None else None
            lines.append(
                f"{s + 1},{trace.t[s]},{_fmt(trace.l_m[s, i])},{_fmt(lc)},{_fmt(dh)}"
            )
        with open(f"{stem}.trace{i:04d}.csv", "w") as f:
            f.write("\n".join(lines) + "\n")


SWEEPABLE = {
    "csnr_db": ("link", "csnr_db"),
    "zeta": ("sampler", "zeta"),
    "zeta_h": ("sampler", "zeta_h"),
    "gamma": ("sampler", "gamma"),
    "eta": ("sampler", "eta"),
    "tau": ("sampler", "tau"),
    "clip_ratio": ("link", "clip_ratio"),
}


def sweep(config: ScenarioConfig, axis: str, values, output_prefix: str | None = None) -> list[dict]:
    """Run the scenario once per axis value (shared base seed), one CSV per
    value plus a combined summary CSV with one aggregate row per value."""
    if axis not in SWEEPABLE:
        raise ConfigError(f"unknown sweep axis '{axis}' (choose from {sorted(SWEEPABLE)})")
    section, key = SWEEPABLE[axis]
    base = config.to_dict()
    prefix = output_prefix or base["output"]
    stem = prefix[:-4] if prefix.endswith(".csv") else prefix
    summaries = []
    for v in values:
        d = copy.deepcopy(base)
        d[section][key] = v
        d["output"] = f"{stem}.{axis}{_fmt(v)}.csv"
        sub = ScenarioConfig.from_dict(d)
        agg = run_scenario(sub)
        agg[axis] = v
        summaries.append(agg)
    lines = [f"{axis},steps,mse,psnr_db,l_m_final,d_h,success_ratio,frechet_gaussian"]
    for s in summaries:
        lines.append(",".join([
            _fmt(s[axis]), _fmt(s["steps"]), _fmt(s["mse"]), _fmt(s["psnr_db"]),
            _fmt(s["l_m_final"]), _fmt(s["d_h"]), _fmt(s["success_ratio"]),
            _fmt(s["frechet_gaussian"]),
        ]))
    with open(f"{stem}.{axis}.summary.csv", "w") as f:
        f.write("\n".join(lines) + "\n")
    return summaries

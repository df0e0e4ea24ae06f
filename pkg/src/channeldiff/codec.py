"""Encoder/decoder pairs mapping source vectors to channel symbols.

Two kinds:

* ``linear`` - z = pair(A x) with either per-frame power normalisation
  (every transmitted frame has mean |z_i|^2 exactly 1) or a calibrated
  constant scale chosen so the power constraint holds in expectation over
  the source prior.  The calibrated variant keeps the encoder exactly
  linear, which is what the conjugate-Gaussian posterior oracle and the
  pseudo-inverse recovery tests require.
* ``mlp`` - small tanh networks on both sides, trained end-to-end through
  the differentiable channel.

Complex pairing convention everywhere: even real index -> real part, odd ->
imaginary part of consecutive channel symbols.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import ofdm
from .errors import ParameterError, ShapeError, TrainingDivergence


@dataclass
class Codec:
    kind: str                      # "linear" | "mlp"
    m: int
    k: int
    power_norm: str = "frame"      # "frame" | "calibrated"
    # linear parameters
    A: np.ndarray | None = None    # (2k, m)
    B: np.ndarray | None = None    # (m, 2k)
    b0: np.ndarray | None = None   # decoder intercept
    scale: float = 1.0             # calibrated encoder scale
    # mlp parameters: lists of (W, b)
    enc_layers: list = field(default_factory=list)
    dec_layers: list = field(default_factory=list)

    @property
    def rho(self) -> float:
        return self.k / self.m


def linear_codec(
    m: int,
    k: int,
    seed: int = 0,
    power_norm: str = "frame",
    prior=None,
    decode: str = "pinv",
    noise_power: float | None = None,
) -> Codec:
    """Build a linear codec with orthonormal encoder rows.

    decode="pinv" inverts the (scaled) encoder by least squares;
    decode="mmse" builds the affine conditional-mean decoder for the given
    prior and noise power (identity channel).  power_norm="calibrated"
    requires a prior to set the constant scale.
    """
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((2 * k, m))
    if 2 * k <= m:
        q, _ = np.linalg.qr(raw.T)     # (m, 2k) orthonormal columns
        A = q.T
    else:
        q, _ = np.linalg.qr(raw)       # (2k, m) orthonormal columns
        A = q
    codec = Codec(kind="linear", m=m, k=k, power_norm=power_norm, A=A)

    if power_norm == "calibrated":
        if prior is None:
            raise ParameterError("calibrated normalisation needs a source prior")
        mean, cov = prior.moments()
        e_power = float(np.trace(A @ cov @ A.T) + np.sum((A @ mean) ** 2))
        codec.scale = float(np.sqrt(k / e_power))
    elif power_norm != "frame":
        raise ParameterError(f"unknown power_norm '{power_norm}'")

    M = codec.scale * A
    if decode == "pinv":
        codec.B = np.linalg.pinv(M)
        codec.b0 = np.zeros(m)
    elif decode == "mmse":
        if prior is None or noise_power is None:
            raise ParameterError("mmse decoding needs a prior and a noise power")
        mean, cov = prior.moments()
        S_zz = M @ cov @ M.T + (noise_power / 2.0) * np.eye(2 * k)
        S_xz = cov @ M.T
        codec.B = S_xz @ np.linalg.inv(S_zz)
        codec.b0 = mean - codec.B @ (M @ mean)
    else:
        raise ParameterError(f"unknown decode mode '{decode}'")
    return codec


def mlp_codec(m: int, k: int, hidden: tuple = (64, 64), seed: int = 0) -> Codec:
    """Untrained tanh-MLP codec (train with `train_codec`)."""
    rng = np.random.default_rng(seed)

    def make(sizes):
        layers = []
        for fi, fo in zip(sizes[:-1], sizes[1:]):
            layers.append((rng.standard_normal((fo, fi)) * np.sqrt(1.0 / fi), np.zeros(fo)))
        return layers

    return Codec(
        kind="mlp",
        m=m,
        k=k,
        power_norm="frame",
        enc_layers=make([m, *hidden, 2 * k]),
        dec_layers=make([2 * k, *hidden, m]),
    )


def _mlp_forward(layers, x):
    h = x
    for i, (W, b) in enumerate(layers):
        h = ad.add_bias(ad.matmul(h, W), b)
        if i < len(layers) - 1:
            h = ad.tanh(h)
    return h


def encode(codec: Codec, x, return_flags: bool = False):
    """Map source vectors (B, m) to interleaved channel symbols (B, 2k).

    Differentiable end to end, normalisation included.  With
    `return_flags` also returns the boolean mask of rows whose
    pre-normalisation power was zero (those rows are transmitted as zeros).
    """
    xv = ad.value_of(x)
    if xv.ndim != 2 or xv.shape[1] != codec.m:
        raise ShapeError(f"source must be (B, {codec.m}), got {xv.shape}")
    if codec.kind == "linear":
        u = ad.matmul(x, codec.A)
    else:
        u = _mlp_forward(codec.enc_layers, x)
    if codec.power_norm == "calibrated":
        z = ad.mul(u, codec.scale)
        degenerate = np.zeros(xv.shape[0], dtype=bool)
    else:
        uv = ad.value_of(u)
        degenerate = np.sum(uv * uv, axis=-1) == 0.0
        z = ad.power_normalize(u, float(codec.k))
    if return_flags:
        return z, degenerate
    return z


def decode(codec: Codec, latent):
    """Map interleaved received symbols (B, 2k) back to (B, m)."""
    lv = ad.value_of(latent)
    if lv.ndim != 2 or lv.shape[1] != 2 * codec.k:
        raise ShapeError(f"latent must be (B, {2 * codec.k}), got {lv.shape}")
    if codec.kind == "linear":
        return ad.add_bias(ad.matmul(latent, codec.B), codec.b0)
    return _mlp_forward(codec.dec_layers, latent)


def linear_mmse_value(codec: Codec, prior, noise_power: float) -> float:
    """Closed-form MSE of the affine-MMSE decoder for this linear codec over
    an identity channel: tr(S - S M^T (M S M^T + s2/2 I)^{-1} M S)."""
    if codec.kind != "linear":
        raise ParameterError("closed form applies to linear codecs only")
    mean, cov = prior.moments()
    M = codec.scale * codec.A
    S_zz = M @ cov @ M.T + (noise_power / 2.0) * np.eye(2 * codec.k)
    S_xz = cov @ M.T
    return float(np.trace(cov - S_xz @ np.linalg.solve(S_zz, S_xz.T)))


# ---------------------------------------------------------------------------
# end-to-end training


def train_codec(
    codec: Codec,
    source_prior,
    link: ofdm.OfdmLink | None = None,
    noise_power: float | None = None,
    steps: int = 3000,
    batch_size: int = 64,
    learning_rate: float = 2e-3,
    seed: int = 0,
    val_size: int = 512,
) -> Codec:
    """Minimise E || D(W^{-1}(W(E(x)) + n)) - x ||^2 by Adam on the tape.

    `link=None` trains over the plain AWGN channel with the given noise
    power; a real link draws one fading realisation per batch and uses the
    true taps on the receive side (clean rate-distortion training).  Sets
    `codec.val_mse` and `codec.baseline_mse` (prior-mean predictor) on exit.
    """
    if codec.kind != "mlp":
        raise ParameterError("only mlp codecs are trainable")
    if link is None and noise_power is None:
        raise ParameterError("AWGN training needs an explicit noise power")
    sigma2 = link.noise_power if link is not None else noise_power
    rng = np.random.default_rng(seed)

    params = codec.enc_layers + codec.dec_layers
    mom1 = [np.zeros_like(p) for Wb in params for p in Wb]
    mom2 = [np.zeros_like(p) for Wb in params for p in Wb]
    b1, b2, eps = 0.9, 0.999, 1e-8

    for step in range(1, steps + 1):
        x = source_prior.sample(batch_size, rng)
        tape = ad.Tape()
        enc_leaves = [(tape.leaf(W), tape.leaf(b)) for W, b in codec.enc_layers]
        dec_leaves = [(tape.leaf(W), tape.leaf(b)) for W, b in codec.dec_layers]
        xin = tape.leaf(x)
        z = _mlp_forward(enc_leaves, xin)
        z = ad.power_normalize(z, float(codec.k))
        if link is None:
            noise = np.sqrt(sigma2 / 2.0) * rng.standard_normal((batch_size, 2 * codec.k))
            received = ad.add(z, noise)
        else:
            h = ofdm.sample_channel(link.pdp, rng)
            noise = ofdm.sample_frame_noise(link, batch_size, rng)
            y = ad.add(ofdm.forward_operator(link, z, h.pairs()), noise)
            received = ofdm.receiver_inverse(link, y, h)
        xr = _mlp_forward(dec_leaves, received)
        loss = ad.sumsq(ad.sub(xr, xin))
        lval = float(ad.value_of(loss)) / batch_size
        if not np.isfinite(lval):
            raise TrainingDivergence(f"codec training loss non-finite at step {step}")
        tape.backward(loss)

        flat = [p for Wb in enc_leaves + dec_leaves for p in Wb]
        for j, leaf in enumerate(flat):
            g = (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)) / batch_size
            mom1[j] = b1 * mom1[j] + (1 - b1) * g
            mom2[j] = b2 * mom2[j] + (1 - b2) * g * g
            leaf.value -= learning_rate * (mom1[j] / (1 - b1**step)) / (
                np.sqrt(mom2[j] / (1 - b2**step)) + eps
            )
        n_enc = len(enc_leaves)
        codec.enc_layers = [(W.value, b.value) for W, b in enc_leaves]
        codec.dec_layers = [(W.value, b.value) for W, b in dec_leaves]

    # held-out validation against the prior-mean predictor
    xv = source_prior.sample(val_size, rng)
    z = encode(codec, xv)
    if link is None:
        received = z + np.sqrt(sigma2 / 2.0) * rng.standard_normal(z.shape)
    else:
        h = ofdm.sample_channel(link.pdp, rng)
        y = ofdm.forward_operator(link, z, h.pairs()) + ofdm.sample_frame_noise(link, val_size, rng)
        received = ofdm.receiver_inverse(link, y, h)
    xr = decode(codec, received)
    mean, cov = source_prior.moments()
    codec.val_mse = float(np.mean(np.sum((xr - xv) ** 2, axis=1)))  # type: ignore[attr-defined]
    codec.baseline_mse = float(np.mean(np.sum((xv - mean) ** 2, axis=1)))  # type: ignore[attr-defined]
    return codec


# ---------------------------------------------------------------------------
# serialisation: little-endian flat binary with a JSON header


MAGIC = b"CDCD"


def _arrays_of(codec: Codec):
    if codec.kind == "linear":
        return [codec.A, codec.B, codec.b0]
    out = []
    for W, b in codec.enc_layers + codec.dec_layers:
        out.extend([W, b])
    return out


def save_codec(codec: Codec, path: str) -> None:
    """File layout: 4-byte magic, u32-LE header length, JSON header, then the
    parameter arrays as float64 little-endian in header order."""
    header = {
        "kind": codec.kind,
        "m": codec.m,
        "k": codec.k,
        "power_norm": codec.power_norm,
        "scale": codec.scale,
        "shapes": [list(a.shape) for a in _arrays_of(codec)],
        "enc_depth": len(codec.enc_layers),
        "dec_depth": len(codec.dec_layers),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for a in _arrays_of(codec):
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_codec(path: str) -> Codec:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ParameterError(f"{path} is not a codec file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen))
        arrays = []
        for shape in header["shapes"]:
            n = int(np.prod(shape)) if shape else 1
            a = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape).copy()
            arrays.append(a)
    codec = Codec(
        kind=header["kind"],
        m=header["m"],
        k=header["k"],
        power_norm=header["power_norm"],
        scale=header["scale"],
    )
    if codec.kind == "linear":
        codec.A, codec.B, codec.b0 = arrays
    else:
        pairs = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)]
        codec.enc_layers = pairs[: header["enc_depth"]]
        codec.dec_layers = pairs[header["enc_depth"] :]
    return codec

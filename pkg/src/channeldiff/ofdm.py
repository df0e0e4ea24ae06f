"""OFDM multipath link: forward operator, receiver inverse, estimation.

Frame layout (complex samples): n_pilot pilot OFDM symbols followed by
ceil(k / n_fft) data symbols, each symbol carrying a cyclic prefix of n_cp
samples.  Pilots are all-ones (unit power) on every subcarrier.  Data
symbols occupy evenly spread subcarriers when k is smaller than the grid.

The pipeline is: interleave -> map to grid (pilots prepended) -> unitary
IDFT per symbol -> insert CP -> magnitude clipping -> truncated linear
convolution with the channel taps -> additive noise.  Everything except the
noise is built from tape primitives, so the same function yields gradients
with respect to both the latent and (for blind decoding) the taps.

Conventions: signals are interleaved real pairs (B, 2n); channel taps are
complex; the frequency response is the unnormalised DFT of the zero-padded
taps, which is what the unitary transmit/receive transforms pair with so
that Y_f = H_f * Z_f per subcarrier.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, ShapeError

P_S = 1.0  # nominal transmitted symbol power; CSNR and clipping reference it


def sample_pdp(L: int, r: float) -> np.ndarray:
    """Exponential power-delay profile exp(-l/r), normalised to sum to 1."""
    if L < 1:
        raise ParameterError("need at least one tap")
    if not (r > 0):
        raise ParameterError("decay constant must be positive")
    w = np.exp(-np.arange(L) / r)
    return w / w.sum()


def csnr_to_noise_power(csnr_db: float) -> float:
    """sigma_n^2 for unit symbol power."""
    return P_S * 10.0 ** (-csnr_db / 10.0)


@dataclass(frozen=True)
class ChannelRealization:
    """A set of L complex taps plus what they represent."""

    taps: np.ndarray
    role: str = "ground_truth"  # ground_truth | estimate | diffusion_state

    def __post_init__(self):
        object.__setattr__(self, "taps", np.asarray(self.taps, dtype=np.complex128))

    @property
    def L(self) -> int:
        return self.taps.shape[-1]

    def pairs(self) -> np.ndarray:
        """Interleaved rows for the tape pipeline: (1, 2L) for shared taps,
        (B, 2L) when the realization carries one tap set per trial."""
        return ad.to_pairs(self.taps).reshape(-1, 2 * self.L)


def sample_channel(pdp: np.ndarray, rng: np.random.Generator) -> ChannelRealization:
    """Rayleigh-fading taps: h_l ~ CN(0, pdp_l), independent across taps."""
    pdp = np.asarray(pdp, dtype=float)
    std = np.sqrt(pdp / 2.0)
    taps = std * (rng.standard_normal(pdp.size) + 1j * rng.standard_normal(pdp.size))
    return ChannelRealization(taps, role="ground_truth")


def interleave_permutation(k: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(k)


def _pairs_idx(idx: np.ndarray) -> np.ndarray:
    """Expand complex-symbol indices to interleaved float columns."""
    return np.column_stack((2 * idx, 2 * idx + 1)).ravel()


@dataclass(frozen=True)
class OfdmLink:
    """Static description of one link; all index maps precomputed."""

    k: int
    n_fft: int = 256
    n_cp: int = 10
    n_pilot: int = 1
    clip_ratio: float = np.inf  # np.inf means no clipping
    interleaver_seed: int = 0
    noise_power: float = 0.1
    pdp: np.ndarray = field(default_factory=lambda: sample_pdp(8, 4.0))

    def __post_init__(self):
        object.__setattr__(self, "pdp", np.asarray(self.pdp, dtype=float))
        if self.k < 1 or self.n_fft < 1 or self.n_cp < 0 or self.n_pilot < 0:
            raise ParameterError("invalid link geometry")
        if not (self.clip_ratio > 0):
            raise ParameterError("clipping ratio must be positive (use inf for none)")
        if self.noise_power < 0:
            raise ParameterError("noise power must be non-negative")
        if abs(self.pdp.sum() - 1.0) > 1e-10:
            raise ParameterError("power-delay profile must sum to 1")

    @property
    def L(self) -> int:
        return self.pdp.size

    @property
    def n_data_sym(self) -> int:
        return -(-self.k // self.n_fft)

    @property
    def n_sym(self) -> int:
        return self.n_pilot + self.n_data_sym

    @property
    def frame_len(self) -> int:
        """Complex samples per transmitted frame."""
        return self.n_sym * (self.n_cp + self.n_fft)

    @cached_property
    def perm(self) -> np.ndarray:
        return interleave_permutation(self.k, self.interleaver_seed)

    @cached_property
    def inv_perm(self) -> np.ndarray:
        inv = np.empty(self.k, dtype=np.intp)
        inv[self.perm] = np.arange(self.k)
        return inv

    @cached_property
    def data_positions(self) -> np.ndarray:
        """Complex indices of the k data symbols inside the data grid
        (length n_data_sym * n_fft), evenly spread within each symbol."""
        pos = []
        remaining = self.k
        for s in range(self.n_data_sym):
            c = min(self.n_fft, remaining)
            sub = (np.arange(c) * self.n_fft) // c
            pos.append(s * self.n_fft + sub)
            remaining -= c
        return np.concatenate(pos)

    @cached_property
    def cp_insert_idx(self) -> np.ndarray:
        """Gather map building the CP-extended frame from the bare symbols."""
        idx = []
        for s in range(self.n_sym):
            base = s * self.n_fft
            idx.append(np.arange(base + self.n_fft - self.n_cp, base + self.n_fft))
            idx.append(np.arange(base, base + self.n_fft))
        return np.concatenate(idx)

    @cached_property
    def cp_strip_idx(self) -> np.ndarray:
        blk = self.n_cp + self.n_fft
        idx = []
        for s in range(self.n_sym):
            idx.append(np.arange(s * blk + self.n_cp, (s + 1) * blk))
        return np.concatenate(idx)

    def freq_response(self, taps: np.ndarray) -> np.ndarray:
        """Unnormalised DFT of the zero-padded taps: H_f = sum_l h_l e^{-2pi i f l / n_fft}."""
        return np.fft.fft(np.asarray(taps, dtype=np.complex128), n=self.n_fft, axis=-1)

    @cached_property
    def _lmmse_eig(self):
        """Eigendecomposition of R_HH = F diag(pdp) F^H over the first L
        DFT columns (shared by every noise level; pseudo-inverse semantics
        at sigma_n^2 = 0 follow from zeroing the null eigenvalues)."""
        F = np.fft.fft(np.eye(self.n_fft, self.L), axis=0)
        R = F @ np.diag(self.pdp) @ F.conj().T
        lam, U = np.linalg.eigh(R)
        lam = np.clip(lam.real, 0.0, None)
        return lam, U


def clip_papr(time_signal, c: float, p_s: float = P_S):
    """Limit each complex sample's amplitude to c*sqrt(p_s); c = inf is the
    identity.  Accepts interleaved pairs (tape-capable)."""
    if not (c > 0):
        raise ParameterError("clipping ratio must be positive")
    return ad.clip_mag(time_signal, c * np.sqrt(p_s))


def interleave(z, perm_or_link):
    """Seeded pseudorandom shuffle of the k complex symbols (interleaved input)."""
    perm = perm_or_link.perm if isinstance(perm_or_link, OfdmLink) else perm_or_link
    return ad.take(z, _pairs_idx(np.asarray(perm, dtype=np.intp)))


def deinterleave(z, perm_or_link):
    perm = perm_or_link.perm if isinstance(perm_or_link, OfdmLink) else perm_or_link
    perm = np.asarray(perm, dtype=np.intp)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return ad.take(z, _pairs_idx(inv))


def _check_latent(link: OfdmLink, z) -> np.ndarray:
    zv = ad.value_of(z)
    if zv.ndim != 2 or zv.shape[1] != 2 * link.k:
        raise ShapeError(
            f"latent must be (B, {2 * link.k}) interleaved pairs, got {zv.shape}"
        )
    return zv


def forward_operator(link: OfdmLink | None, z, taps_pairs):
    """Noiseless W_h(z): the deterministic transmit pipeline through taps.

    `link=None` is the plain AWGN configuration (identity channel, no OFDM
    machinery): the operator is the identity on z.  Both `z` and
    `taps_pairs` may be tape nodes.
    """
    if link is None:
        return z
    zv = _check_latent(link, z)
    B = zv.shape[0]

    x = interleave(z, link)
    grid = ad.put(x, _pairs_idx(link.data_positions), 2 * link.n_data_sym * link.n_fft)
    if link.n_pilot > 0:
        pilot = np.zeros((B, 2 * link.n_pilot * link.n_fft))
        pilot[:, 0::2] = 1.0  # all-ones pilot symbol on every subcarrier
        grid = ad.concat([pilot, grid], axis=1)
    time = ad.idft_blocks(grid, link.n_fft)
    framed = ad.take(time, _pairs_idx(link.cp_insert_idx))
    framed = clip_papr(framed, link.clip_ratio)
    return ad.conv_taps(framed, taps_pairs)


def ofdm_transmit(link: OfdmLink, z, h: ChannelRealization, noise: np.ndarray | None = None):
    """Received frame y = W_h(z) (+ noise if provided), interleaved pairs."""
    y = forward_operator(link, z, h.pairs())
    if noise is not None:
        nv = np.asarray(noise)
        if np.iscomplexobj(nv):
            nv = ad.to_pairs(nv)
        if nv.shape != np.shape(ad.value_of(y)):
            raise ShapeError(f"noise shape {nv.shape} != frame shape {np.shape(ad.value_of(y))}")
        y = ad.add(y, nv)
    return y


def sample_frame_noise(link: OfdmLink, batch: int, rng: np.random.Generator) -> np.ndarray:
    """CN(0, sigma_n^2) per complex frame sample, interleaved (B, 2n)."""
    std = np.sqrt(link.noise_power / 2.0)
    return std * rng.standard_normal((batch, 2 * link.frame_len))


def sample_awgn_noise(k: int, noise_power: float, batch: int, rng: np.random.Generator) -> np.ndarray:
    std = np.sqrt(noise_power / 2.0)
    return std * rng.standard_normal((batch, 2 * k))


def _frame_to_grid(link: OfdmLink, y):
    """CP strip + per-symbol unitary DFT; returns the full frequency grid."""
    yv = ad.value_of(y)
    if yv.ndim != 2 or yv.shape[1] != 2 * link.frame_len:
        raise ShapeError(f"frame must be (B, {2 * link.frame_len}), got {yv.shape}")
    body = ad.take(y, _pairs_idx(link.cp_strip_idx))
    return ad.dft_blocks(body, link.n_fft)


def extract_pilot_grid(link: OfdmLink, y) -> np.ndarray:
    """Frequency-domain pilot symbols, complex (B, n_pilot, n_fft)."""
    if link.n_pilot == 0:
        raise ParameterError("link carries no pilots")
    grid = ad.value_of(_frame_to_grid(link, y))
    c = ad.to_complex(grid)
    return c.reshape(c.shape[0], link.n_sym, link.n_fft)[:, : link.n_pilot, :]


def estimate_channel_lmmse(link: OfdmLink, y, pdp: np.ndarray | None = None,
                           noise_power: float | None = None) -> ChannelRealization:
    """Pilot-based LMMSE channel estimate.

    LS first (pilots are all-ones, so H_LS is the pilot grid itself, averaged
    over pilot symbols), then the prior smoothing
    H = R_HH (R_HH + sigma_n^2 I)^{-1} H_LS with R_HH implied by the pdp.
    The smoothed response lies exactly in the L-tap subspace, so taps are
    recovered by the orthogonal projection F^H H / n_fft.

    Estimation is for a single received frame (batch of size 1).
    """
    if link.n_pilot == 0:
        raise ParameterError("cannot estimate the channel without pilots")
    pilots = extract_pilot_grid(link, y)
    h_ls = pilots.mean(axis=1)  # (B, n_fft); unit pilots make LS a pass-through
    sigma2 = link.noise_power if noise_power is None else noise_power
    sigma2 = sigma2 / link.n_pilot
    if pdp is None or np.array_equal(np.asarray(pdp, dtype=float), link.pdp):
        lam, U = link._lmmse_eig
    else:
        F = np.fft.fft(np.eye(link.n_fft, len(pdp)), axis=0)
        R = F @ np.diag(np.asarray(pdp, dtype=float)) @ F.conj().T
        lam, U = np.linalg.eigh(R)
        lam = np.clip(lam.real, 0.0, None)
    with np.errstate(invalid="ignore", divide="ignore"):
        gain = np.where(lam > 1e-12 * lam.max(), lam / (lam + sigma2), 0.0)
    h_freq = (U * gain[None, :]) @ (U.conj().T @ h_ls[..., None])
    h_freq = h_freq[..., 0]
    F_L = np.fft.fft(np.eye(link.n_fft, link.L), axis=0)
    taps = (F_L.conj().T @ h_freq[..., None])[..., 0] / link.n_fft
    if taps.shape[0] == 1:
        taps = taps[0]
    return ChannelRealization(taps, role="estimate")


def estimate_channel_ls(link: OfdmLink, y) -> np.ndarray:
    """Raw least-squares per-subcarrier estimate (no prior smoothing)."""
    if link.n_pilot == 0:
        raise ParameterError("cannot estimate the channel without pilots")
    return extract_pilot_grid(link, y).mean(axis=1)


def equalize_mmse(link: OfdmLink, data_grid, h: ChannelRealization | np.ndarray,
                  noise_power: float | None = None):
    """Per-subcarrier MMSE equalisation Z_f = conj(H_f) Y_f / (|H_f|^2 + sigma_n^2).

    `data_grid` is the interleaved frequency grid of the data symbols,
    (B, 2 * n_data_sym * n_fft); sigma_n^2 = 0 reduces to zero-forcing.
    Tape-capable in the grid argument (H is a receiver-side constant).
    """
    H = link.freq_response(h.taps) if isinstance(h, ChannelRealization) else np.asarray(h)
    sigma2 = link.noise_power if noise_power is None else noise_power
    w = np.conj(H) / (np.abs(H) ** 2 + sigma2)
    w_tiled = np.tile(w, link.n_data_sym)  # (n,) shared or (B, n) per-trial taps
    w_pairs = ad.to_pairs(w_tiled)
    if w_pairs.ndim == 1:
        w_pairs = w_pairs[None, :]
    return ad.cmul(data_grid, w_pairs)


def receiver_inverse(link: OfdmLink | None, y, h: ChannelRealization | None = None,
                     noise_power: float | None = None):
    """W_h^{-1}(y): CP removal, DFT, pilot split, MMSE equalisation,
    deinterleave; returns the latent estimate (B, 2k).  Tape-capable in y.

    With `link=None` (plain AWGN) the inverse is the identity.
    """
    if link is None:
        return y
    if h is None:
        raise ParameterError("receiver inverse needs a channel estimate")
    grid = _frame_to_grid(link, y)
    data = ad.take(
        grid,
        np.arange(2 * link.n_pilot * link.n_fft, 2 * link.n_sym * link.n_fft),
    )
    eq = equalize_mmse(link, data, h, noise_power=noise_power)
    z = ad.take(eq, _pairs_idx(link.data_positions))
    return deinterleave(z, link)

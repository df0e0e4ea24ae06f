"""Reverse-mode automatic differentiation over a flat tape.

The guidance losses used by the samplers are compositions of a fixed
primitive vocabulary: affine maps, tanh, complex multiply/conjugate and
DFT/IDFT on interleaved real pairs, magnitude clipping, truncated tap
convolution, gathers/scatters, per-row power normalisation and squared
norms.  Each primitive here works on plain ndarrays *or* on `Var` nodes;
passing at least one `Var` records the operation, so the OFDM and codec
pipelines are written once and reused for both simulation and gradients.

Complex vectors are stored as interleaved real pairs along the last axis
(even columns real, odd columns imaginary).  For a real-valued loss the
gradient with respect to such a pair, packed back into a complex number,
obeys the usual R^2 convention: d(a*b) propagates as conj(b)*g.

Values are float64 arrays shaped (batch, n); reductions produce (batch,) or
scalars.  Weight matrices may also be leaves (used when training codecs and
score networks).
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

# ---------------------------------------------------------------------------
# tape machinery


class Var:
    """One tape node: a value plus how to push gradients to its parents."""

    __slots__ = ("value", "tape", "parents", "vjps", "name", "grad")

    def __init__(self, value, tape, parents, vjps, name):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjps = vjps
        self.name = name
        self.grad = None

    # Small operator sugar so pipeline code stays readable.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, const):
        return mul(self, 1.0 / const)


class Tape:
    """Records operations in execution order; graphs are acyclic by
    construction.  One tape per loss evaluation, confined to its creator."""

    def __init__(self, check_finite: bool = False):
        self.nodes: list[Var] = []
        self.check_finite = check_finite
        self.clip_boundary_hits = 0  # rows that touched a clip radius exactly

    def leaf(self, value, name: str | None = None) -> Var:
        v = Var(np.asarray(value, dtype=float), self, (), (), name or "leaf")
        self.nodes.append(v)
        return v

    def record(self, value, pairs, name: str) -> Var:
        """Append a computed node; `pairs` is a list of (parent Var, vjp)."""
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NumericError(name)
        parents = tuple(p for p, _ in pairs)
        vjps = tuple(f for _, f in pairs)
        v = Var(value, self, parents, vjps, name)
        self.nodes.append(v)
        return v

    def backward(self, root: Var) -> None:
        """Accumulate gradients of the scalar `root` into every node's .grad."""
        if np.size(root.value) != 1:
            raise ShapeError("backward root must be scalar")
        for n in self.nodes:
            n.grad = None
        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            g = node.grad
            if g is None:
                continue
            for parent, vjp in zip(node.parents, node.vjps):
                contrib = vjp(g)
                if parent.grad is None:
                    parent.grad = contrib
                else:
                    parent.grad = parent.grad + contrib


def value_of(a):
    return a.value if isinstance(a, Var) else np.asarray(a, dtype=float)


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# interleaved-pair helpers (zero-copy views onto contiguous float64)


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).view(np.complex128)


def _r(c: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(c).view(np.float64)


def to_pairs(z: np.ndarray) -> np.ndarray:
    """Complex array -> interleaved real pairs along the last axis."""
    return _r(np.asarray(z, dtype=np.complex128))


def to_complex(u: np.ndarray) -> np.ndarray:
    """Interleaved real pairs -> complex array."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] % 2:
        raise ShapeError("interleaved array needs an even last dimension")
    return _c(u).copy()


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    pairs = []
    if isinstance(a, Var):
        pairs.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Var):
        pairs.append((b, lambda g: _unbroadcast(g, bv.shape)))
    return tape.record(out, pairs, "add")


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    pairs = []
    if isinstance(a, Var):
        pairs.append((a, lambda g: _unbroadcast(g, av.shape)))
    if isinstance(b, Var):
        pairs.append((b, lambda g: _unbroadcast(-g, bv.shape)))
    return tape.record(out, pairs, "sub")


def mul(a, b):
    """Elementwise (broadcasting) product; either side may be a Var."""
    av, bv = value_of(a), value_of(b)
    out = av * bv
    tape = _tape_of(a, b)
    if tape is None:
        return out
    pairs = []
    if isinstance(a, Var):
        pairs.append((a, lambda g: _unbroadcast(g * bv, av.shape)))
    if isinstance(b, Var):
        pairs.append((b, lambda g: _unbroadcast(g * av, bv.shape)))
    return tape.record(out, pairs, "mul")


def matmul(x, w):
    """Row-major affine core: out[b] = x[b] @ w.T with w shaped (p, n)."""
    xv, wv = value_of(x), value_of(w)
    out = xv @ wv.T
    tape = _tape_of(x, w)
    if tape is None:
        return out
    pairs = []
    if isinstance(x, Var):
        pairs.append((x, lambda g: g @ wv))
    if isinstance(w, Var):
        pairs.append((w, lambda g: g.T @ xv))
    return tape.record(out, pairs, "matmul")


def add_bias(x, b):
    xv, bv = value_of(x), value_of(b)
    out = xv + bv[None, :]
    tape = _tape_of(x, b)
    if tape is None:
        return out
    pairs = []
    if isinstance(x, Var):
        pairs.append((x, lambda g: g))
    if isinstance(b, Var):
        pairs.append((b, lambda g: g.sum(axis=0)))
    return tape.record(out, pairs, "add_bias")


def tanh(x):
    xv = value_of(x)
    out = np.tanh(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, [(x, lambda g: g * (1.0 - out * out))], "tanh")


def concat(parts, axis: int = 1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    tape = _tape_of(*parts)
    if tape is None:
        return out
    pairs = []
    offset = 0
    for p, v in zip(parts, vals):
        n = v.shape[axis]
        if isinstance(p, Var):
            sl = [slice(None)] * out.ndim
            sl[axis] = slice(offset, offset + n)
            pairs.append((p, lambda g, sl=tuple(sl): g[sl]))
        offset += n
    return tape.record(out, pairs, "concat")


def take(x, idx):
    """Column gather: out = x[:, idx].  Used for permutations, slicing and
    cyclic-prefix handling; duplicate indices are accumulated on the way
    back."""
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = xv[:, idx]
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        dx = np.zeros_like(xv)
        np.add.at(dx, (slice(None), idx), g)
        return dx

    return tape.record(out, [(x, vjp)], "take")


def put(x, idx, n_out: int):
    """Column scatter into zeros: out[:, idx] = x, out shape (B, n_out)."""
    xv = value_of(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((xv.shape[0], n_out))
    out[:, idx] = xv
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, [(x, lambda g: g[:, idx])], "put")


def row_sumsq(x):
    """Per-row squared Euclidean norm, shape (B,)."""
    xv = value_of(x)
    out = np.sum(xv * xv, axis=-1)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, [(x, lambda g: 2.0 * xv * g[..., None])], "row_sumsq")


def total(x):
    """Sum of all entries (the scalar handed to Tape.backward)."""
    xv = value_of(x)
    out = np.sum(xv)
    tape = _tape_of(x)
    if tape is None:
        return out
    return tape.record(out, [(x, lambda g: np.broadcast_to(g, xv.shape))], "total")


def sumsq(x):
    return total(row_sumsq(x))


def power_normalize(x, target_sumsq: float):
    """Rescale each row to squared norm `target_sumsq`; zero rows stay zero."""
    xv = value_of(x)
    norms = np.sqrt(np.sum(xv * xv, axis=-1, keepdims=True))
    ok = norms[:, 0] > 0.0
    scale = np.zeros_like(norms)
    scale[ok, 0] = np.sqrt(target_sumsq) / norms[ok, 0]
    out = xv * scale
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        # s * (I - u u^T) per row, u = x/|x|.
        u = np.zeros_like(xv)
        u[ok] = xv[ok] / norms[ok]
        inner = np.sum(u * g, axis=-1, keepdims=True)
        return scale * (g - u * inner)

    return tape.record(out, [(x, vjp)], "power_normalize")


# -- complex primitives on interleaved pairs --------------------------------


def cmul(a, b):
    """Elementwise complex product of interleaved pairs (either side may be a
    Var; a constant side may broadcast along the batch axis)."""
    av, bv = value_of(a), value_of(b)
    ac, bc = _c(av), _c(bv)
    out = _r(ac * bc)
    tape = _tape_of(a, b)
    if tape is None:
        return out
    pairs = []
    if isinstance(a, Var):
        pairs.append((a, lambda g: _unbroadcast(_r(_c(g) * np.conj(bc)), av.shape)))
    if isinstance(b, Var):
        pairs.append((b, lambda g: _unbroadcast(_r(_c(g) * np.conj(ac)), bv.shape)))
    return tape.record(out, pairs, "cmul")


def cconj(a):
    av = value_of(a)
    out = _r(np.conj(_c(av)))
    tape = _tape_of(a)
    if tape is None:
        return out
    return tape.record(out, [(a, lambda g: _r(np.conj(_c(g))))], "cconj")


def _blocks(u: np.ndarray, n_fft: int) -> np.ndarray:
    c = _c(u)
    if c.shape[-1] % n_fft:
        raise ShapeError(f"{c.shape[-1]} symbols do not split into blocks of {n_fft}")
    return c.reshape(c.shape[0], -1, n_fft)


def dft_blocks(x, n_fft: int):
    """Unitary DFT applied per length-n_fft block of an interleaved signal."""
    xv = value_of(x)
    out = _r(np.fft.fft(_blocks(xv, n_fft), norm="ortho").reshape(xv.shape[0], -1))
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        return _r(np.fft.ifft(_blocks(g, n_fft), norm="ortho").reshape(g.shape[0], -1))

    return tape.record(out, [(x, vjp)], "dft_blocks")


def idft_blocks(x, n_fft: int):
    """Unitary inverse DFT per block; adjoint of dft_blocks."""
    xv = value_of(x)
    out = _r(np.fft.ifft(_blocks(xv, n_fft), norm="ortho").reshape(xv.shape[0], -1))
    tape = _tape_of(x)
    if tape is None:
        return out

    def vjp(g):
        return _r(np.fft.fft(_blocks(g, n_fft), norm="ortho").reshape(g.shape[0], -1))

    return tape.record(out, [(x, vjp)], "idft_blocks")


def clip_mag(x, radius: float):
    """Clamp complex magnitudes to `radius` (phase preserved).

    Backward rule: identity strictly inside the radius; at or above it the
    true Jacobian of r*z/|z|, which zeroes the radial component and scales
    the tangential one by r/|z|.
    """
    xv = value_of(x)
    if not np.isfinite(radius):
        tape = _tape_of(x)
        if tape is None:
            return xv.copy()
        return tape.record(xv.copy(), [(x, lambda g: g)], "clip_mag")
    c = _c(xv)
    mag = np.abs(c)
    over = mag >= radius
    _register_clip_mask(over)
    scale = np.ones_like(mag)
    scale[over] = radius / mag[over]
    out = _r(c * scale)
    tape = _tape_of(x)
    if tape is None:
        return out
    tape.clip_boundary_hits += int(np.count_nonzero(np.isclose(mag, radius)))

    def vjp(g):
        gc = _c(g)
        u = np.zeros_like(c)
        u[over] = c[over] / mag[over]
        radial = np.real(np.conj(u) * gc)
        return _r(scale * (gc - u * radial))

    return tape.record(out, [(x, vjp)], "clip_mag")


def conv_taps(sig, taps):
    """Truncated linear convolution of an interleaved signal with complex
    taps: out[i] = sum_l taps[l] * sig[i-l], output length = input length.

    `taps` is (B, 2L) or (1, 2L); both arguments may be Vars, which is what
    lets blind decoding differentiate through the channel itself.
    """
    sv, tv = value_of(sig), value_of(taps)
    sc, tc = _c(sv), _c(tv)
    B, n = sc.shape
    L = tc.shape[-1]
    out = np.zeros((B, n), dtype=np.complex128)
    for l in range(L):
        out[:, l:] += tc[:, l : l + 1] * sc[:, : n - l]
    out = _r(out)
    tape = _tape_of(sig, taps)
    if tape is None:
        return out
    pairs = []
    if isinstance(sig, Var):

        def vjp_sig(g):
            gc = _c(g)
            ds = np.zeros_like(sc)
            for l in range(L):
                ds[:, : n - l] += np.conj(tc[:, l : l + 1]) * gc[:, l:]
            return _r(ds)

        pairs.append((sig, vjp_sig))
    if isinstance(taps, Var):

        def vjp_taps(g):
            gc = _c(g)
            dt = np.zeros((B, L), dtype=np.complex128)
            for l in range(L):
                dt[:, l] = np.sum(np.conj(sc[:, : n - l]) * gc[:, l:], axis=-1)
            return _unbroadcast(_r(dt), tv.shape)

        pairs.append((taps, vjp_taps))
    return tape.record(out, pairs, "conv_taps")


# ---------------------------------------------------------------------------
# loss evaluation and the finite-difference oracle


def eval_with_grad(loss_fn, inputs: dict, check_finite: bool = True):
    """Evaluate a scalar loss built from the primitives above and return
    (loss value, gradients w.r.t. every named input)."""
    tape = Tape(check_finite=check_finite)
    leaves = {k: tape.leaf(v, name=k) for k, v in inputs.items()}
    out = loss_fn(leaves)
    if not isinstance(out, Var):
        raise ShapeError("loss_fn must return a tape node; got a plain value")
    tape.backward(out)
    grads = {
        k: (lv.grad if lv.grad is not None else np.zeros_like(lv.value))
        for k, lv in leaves.items()
    }
    return float(out.value), grads


def finite_diff_details(loss_fn, inputs: dict, step: float = 1e-5, coords: int = 20, seed: int = 0):
    """Central-difference check of the analytic gradient on sampled
    coordinates.  Returns (relative errors, boundary flags, coordinate ids).

    A coordinate is flagged as a clip boundary (and excluded from the error
    list) when its two perturbed evaluations disagree about which samples sit
    at/above a clip radius, i.e. the loss is only subdifferentiable there.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    inputs = {k: np.asarray(v, dtype=float) for k, v in inputs.items()}
    _, grads = eval_with_grad(loss_fn, inputs, check_finite=False)
    sizes = {k: v.size for k, v in inputs.items()}
    flat = [(k, i) for k in sorted(inputs) for i in range(sizes[k])]
    rng = np.random.default_rng(seed)
    chosen = [flat[i] for i in rng.choice(len(flat), size=min(coords, len(flat)), replace=False)]

    def perturbed(key, i, delta):
        shifted = {k: v.copy() for k, v in inputs.items()}
        shifted[key].flat[i] += delta
        return _clip_sensitive_eval(loss_fn, shifted)

    errors, boundary, ids = [], [], []
    for key, i in chosen:
        (fp, mask_p), (fm, mask_m) = perturbed(key, i, step), perturbed(key, i, -step)
        fd = (fp - fm) / (2.0 * step)
        if mask_p != mask_m:
            boundary.append((key, i))
            continue
        an = grads[key].flat[i]
        errors.append(abs(an - fd) / (abs(fd) + 1e-12))
        ids.append((key, i))
    return np.asarray(errors), boundary, ids


def _clip_sensitive_eval(loss_fn, inputs: dict):
    """Plain evaluation that also fingerprints the active clip set."""
    tape = Tape()
    leaves = {k: tape.leaf(v) for k, v in inputs.items()}
    marker: list = []
    _ACTIVE_MASKS.append(marker)
    try:
        out = loss_fn(leaves)
    finally:
        _ACTIVE_MASKS.pop()
    fingerprint = tuple(m.tobytes() for m in marker)
    return float(out.value), fingerprint


# Collection hook: clip_mag contributes its active-set mask whenever a
# collector is on the stack (used only by the finite-difference oracle).
_ACTIVE_MASKS: list = []


def _register_clip_mask(mask: np.ndarray) -> None:
    if _ACTIVE_MASKS:
        _ACTIVE_MASKS[-1].append(mask.copy())


def finite_diff_check(loss_fn, inputs: dict, step: float = 1e-5, coords: int = 20, seed: int = 0) -> float:
    """Max relative |analytic - central difference| over sampled coordinates,
    clip-boundary coordinates excluded."""
    errors, _, _ = finite_diff_details(loss_fn, inputs, step=step, coords=coords, seed=seed)
    return float(errors.max()) if errors.size else 0.0

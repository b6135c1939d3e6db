"""Seeded toy transformer and the linear reference map.

The transformer is a pre-norm causal decoder stack (RMS norm, multi-head
self-attention, SiLU feed-forward) whose every scalar operation is carried
out through :mod:`chaoscope.numerics`, so precision and summation order are
fully controlled.  Tokens are processed one at a time against a cache of
earlier keys and values; this is exactly the causal computation, and it lets
a perturbation confined to one position reuse the unperturbed prefix without
changing a single bit of the result.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import PrecisionMode, ReductionOrder, contract, contract_last, reduce_axis

__all__ = [
    "ModelConfig",
    "ToyModel",
    "EmbeddingPoint",
    "LstOutput",
    "LinearOracle",
    "LocalMap",
    "NumericalAbort",
    "build_model",
    "forward",
    "layer_taps",
    "oracle_forward",
    "logit_margin",
    "export_weights",
    "load_weights",
]

NORM_EPS = 1e-6
_CHUNK_ROWS = 2048


class NumericalAbort(ArithmeticError):
    """A forward pass produced NaN or infinity."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_layers: int = 8
    n_heads: int = 4
    d_ff: int | None = None
    vocab_size: int = 256
    seq_len: int = 8
    seed: int = 0
    precision: PrecisionMode = PrecisionMode.FP32
    reduction: ReductionOrder = field(default_factory=ReductionOrder.sequential)

    def __post_init__(self):
        object.__setattr__(self, "precision", PrecisionMode.parse(self.precision))
        object.__setattr__(self, "reduction", ReductionOrder.parse(self.reduction))
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2 for a logit margin")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_ff": self.d_ff,
            "vocab_size": self.vocab_size,
            "seq_len": self.seq_len,
            "seed": self.seed,
            "precision": self.precision.value,
            "reduction": str(self.reduction),
        }


@dataclass(frozen=True)
class EmbeddingPoint:
    """A full input embedding sequence plus the position perturbations touch.

    ``perturb_position=None`` means perturbations act on every position at
    once (the slice is then the whole flattened sequence).
    """

    x: np.ndarray
    seq_len: int
    d_model: int
    perturb_position: int | None = -1

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64).reshape(-1)
        if x.size != self.seq_len * self.d_model:
            raise ValueError(f"embedding has {x.size} entries, expected {self.seq_len}x{self.d_model}")
        x.flags.writeable = False
        object.__setattr__(self, "x", x)
        p = self.perturb_position
        if p is not None:
            if not -self.seq_len <= p < self.seq_len:
                raise ValueError(f"perturb_position {p} out of range for seq_len {self.seq_len}")
            object.__setattr__(self, "perturb_position", p % self.seq_len)

    @classmethod
    def random(cls, config: ModelConfig, seed: int, scale: float = 0.02,
               perturb_position: int | None = -1) -> EmbeddingPoint:
        rng = np.random.default_rng([0xE3B, seed])
        x = scale * rng.standard_normal(config.seq_len * config.d_model)
        return cls(x, config.seq_len, config.d_model, perturb_position)

    @property
    def rows(self) -> np.ndarray:
        return self.x.reshape(self.seq_len, self.d_model)

    @property
    def slice(self) -> np.ndarray:
        if self.perturb_position is None:
            return self.x.copy()
        return self.rows[self.perturb_position].copy()

    def with_slice(self, values) -> EmbeddingPoint:
        values = np.asarray(values, dtype=np.float64)
        if self.perturb_position is None:
            return replace(self, x=values.reshape(-1))
        rows = self.rows.copy()
        rows[self.perturb_position] = values
        return replace(self, x=rows.reshape(-1))

    def digest(self) -> str:
        h = hashlib.sha256(self.x.astype("<f8").tobytes())
        h.update(repr((self.seq_len, self.d_model, self.perturb_position)).encode())
        return h.hexdigest()[:16]


def logit_margin(logits) -> np.ndarray:
    """Largest minus second-largest logit along the last axis (float64)."""
    z = np.asarray(logits, dtype=np.float64)
    top2 = np.partition(z, -2, axis=-1)[..., -2:]
    return top2[..., 1] - top2[..., 0]


@dataclass(frozen=True)
class LstOutput:
    m: np.ndarray
    logits: np.ndarray
    margin: float
    argmax_token: int

    @classmethod
    def from_arrays(cls, m, logits) -> LstOutput:
        # np.argmax returns the first maximum: ties go to the lowest index
        return cls(m, logits, float(logit_margin(logits)), int(np.argmax(logits)))


def _rms_norm(h, gain, mode, order):
    d = h.shape[-1]
    ss = contract_last(h, h, order, mode)
    ms = mode.div(ss, mode.scalar(d))
    inv = mode.div(mode.scalar(1.0), mode.sqrt(mode.add(ms, mode.scalar(NORM_EPS))))
    return mode.mul(mode.mul(h, inv[..., None]), gain)


def _silu(x, mode):
    with np.errstate(over="ignore"):
        t = mode.exp(mode.sub(mode.scalar(0.0), x))
    return mode.div(x, mode.add(mode.scalar(1.0), t))


class ToyModel:
    """Immutable seeded transformer; see :func:`build_model`."""

    def __init__(self, config: ModelConfig, weights: dict[str, np.ndarray]):
        self.config = config
        mode = config.precision
        self.weights = {}
        for name, w in weights.items():
            w = mode.round(w).copy()
            w.flags.writeable = False
            self.weights[name] = w

    @property
    def precision(self) -> PrecisionMode:
        return self.config.precision

    @property
    def unembedding(self) -> np.ndarray:
        return self.weights["unembed"]

    def at_precision(self, precision: PrecisionMode | str) -> ToyModel:
        """Same weights (widened exactly or rounded) run under another precision."""
        cfg = replace(self.config, precision=PrecisionMode.parse(precision))
        return ToyModel(cfg, {k: np.asarray(v, dtype=np.float64) for k, v in self.weights.items()})

    def with_reduction(self, reduction: ReductionOrder | str) -> ToyModel:
        cfg = replace(self.config, reduction=ReductionOrder.parse(reduction))
        return ToyModel(cfg, self.weights)

    # -- core -------------------------------------------------------------

    def _layer(self, i, h, cache):
        cfg = self.config
        mode, order = cfg.precision, cfg.reduction
        w = self.weights
        a = _rms_norm(h, w[f"l{i}.g_attn"], mode, order)
        q = contract(a, w[f"l{i}.wq"], order, mode)
        k = contract(a, w[f"l{i}.wk"], order, mode)
        v = contract(a, w[f"l{i}.wv"], order, mode)
        keys, values = cache
        keys.append(k)
        values.append(v)
        batch = np.broadcast_shapes(*(x.shape[:-1] for x in keys))
        nh, dh = cfg.n_heads, cfg.d_head
        K = np.stack([np.broadcast_to(x, batch + (cfg.d_model,)) for x in keys]).reshape(
            (len(keys),) + batch + (nh, dh))
        V = np.stack([np.broadcast_to(x, batch + (cfg.d_model,)) for x in values]).reshape(
            (len(values),) + batch + (nh, dh))
        qh = q.reshape(q.shape[:-1] + (nh, dh))
        scores = contract_last(qh[None], K, order, mode)  # (T, ..., H)
        scores = mode.mul(np.moveaxis(scores, 0, -1), mode.scalar(1.0 / np.sqrt(dh)))
        shifted = mode.sub(scores, scores.max(axis=-1, keepdims=True))
        e = mode.exp(shifted)
        p = mode.div(e, reduce_axis(e, order, mode, axis=-1)[..., None])
        weighted = mode.mul(np.moveaxis(p, -1, 0)[..., None], V)  # (T, ..., H, dh)
        o = reduce_axis(weighted, order, mode, axis=0)
        o = o.reshape(o.shape[:-2] + (cfg.d_model,))
        h = mode.add(h, contract(o, w[f"l{i}.wo"], order, mode))
        b = _rms_norm(h, w[f"l{i}.g_ff"], mode, order)
        u = _silu(contract(b, w[f"l{i}.w1"], order, mode), mode)
        return mode.add(h, contract(u, w[f"l{i}.w2"], order, mode))

    def _token(self, pos, x_row, caches, taps=None):
        mode = self.config.precision
        h = mode.add(mode.round(x_row), self.weights["pos"][pos])
        if taps is not None:
            taps.append(h)
        for i in range(self.config.n_layers):
            h = self._layer(i, h, caches[i])
            if taps is not None:
                taps.append(h)
        return h

    def _head(self, h):
        mode, order = self.config.precision, self.config.reduction
        m = _rms_norm(h, self.weights["g_final"], mode, order)
        return m, contract(m, self.weights["unembed"], order, mode)

    def local_map(self, point: EmbeddingPoint) -> LocalMap:
        return LocalMap(self, point)


def build_model(config: ModelConfig) -> ToyModel:
    """Draw all weights from a generator seeded by ``config.seed``.

    Matrices are Gaussian with scale ``1/sqrt(d_model)``; norm gains are
    ``1 + 0.1 * N(0, 1)``.  The draw order is fixed so the result is a pure
    function of the seed and the shapes.
    """
    cfg = config
    rng = np.random.default_rng([0x70E, cfg.seed & 0xFFFFFFFFFFFFFFFF])
    s = 1.0 / np.sqrt(cfg.d_model)
    d, f = cfg.d_model, cfg.d_ff
    weights: dict[str, np.ndarray] = {"pos": 0.02 * rng.standard_normal((cfg.seq_len, d))}
    for i in range(cfg.n_layers):
        weights[f"l{i}.g_attn"] = 1.0 + 0.1 * rng.standard_normal(d)
        for name in ("wq", "wk", "wv", "wo"):
            weights[f"l{i}.{name}"] = s * rng.standard_normal((d, d))
        weights[f"l{i}.g_ff"] = 1.0 + 0.1 * rng.standard_normal(d)
        weights[f"l{i}.w1"] = s * rng.standard_normal((f, d))
        weights[f"l{i}.w2"] = s * rng.standard_normal((d, f))
    weights["g_final"] = 1.0 + 0.1 * rng.standard_normal(d)
    weights["unembed"] = s * rng.standard_normal((cfg.vocab_size, d))
    return ToyModel(cfg, weights)


class LocalMap:
    """A model viewed as a function of the perturbed slice of one base point.

    The unperturbed prefix (positions before ``perturb_position``) is run
    once and cached; :meth:`evaluate` then only recomputes the positions a
    perturbation can reach.
    """

    def __init__(self, model: ToyModel, point: EmbeddingPoint):
        cfg = model.config
        if point.seq_len != cfg.seq_len or point.d_model != cfg.d_model:
            raise ValueError("embedding point shape does not match the model config")
        self.model = model
        self.point = point
        self.precision = cfg.precision
        self.x0 = cfg.precision.round(point.slice)
        self.n_layers = cfg.n_layers
        rows = point.rows
        start = 0 if point.perturb_position is None else point.perturb_position
        self._start = start
        self._prefix = [([], []) for _ in range(cfg.n_layers)]
        for pos in range(start):
            model._token(pos, rows[pos][None], self._prefix)

    @property
    def unembedding(self) -> np.ndarray:
        return self.model.unembedding

    def evaluate(self, xs, taps: bool = False):
        """Run a batch of slice values ``xs`` of shape ``(B, n)``.

        Returns ``(m, logits)`` or ``(m, logits, taps)`` with taps shaped
        ``(n_layers + 1, B, d_model)``.
        """
        xs = np.atleast_2d(xs)
        outs = []
        for lo in range(0, xs.shape[0], _CHUNK_ROWS):
            outs.append(self._evaluate(xs[lo:lo + _CHUNK_ROWS], taps))
        if len(outs) == 1:
            return outs[0]
        return tuple(np.concatenate(parts, axis=1 if i == 2 else 0) for i, parts in enumerate(zip(*outs)))

    def _evaluate(self, xs, want_taps):
        model, cfg = self.model, self.model.config
        rows = self.point.rows
        B = xs.shape[0]
        if self.point.perturb_position is None:
            xs = xs.reshape(B, cfg.seq_len, cfg.d_model)
        caches = [(list(k), list(v)) for k, v in self._prefix]
        h = None
        tap_list = [] if want_taps else None
        tap_pos = cfg.seq_len - 1 if self.point.perturb_position is None else self._start
        for pos in range(self._start, cfg.seq_len):
            if self.point.perturb_position is None:
                row = xs[:, pos]
            elif pos == self._start:
                row = xs
            else:
                row = np.broadcast_to(rows[pos], (B, cfg.d_model))
            record = tap_list if pos == tap_pos else None
            h = model._token(pos, row, caches, record)
        m, logits = model._head(h)
        if want_taps:
            # the last tap is read out through the final norm, like m itself
            tap_list[-1] = _rms_norm(tap_list[-1], model.weights["g_final"], cfg.precision, cfg.reduction)
            return m, logits, np.stack(tap_list)
        return m, logits

    def lst(self, xs) -> np.ndarray:
        return self.evaluate(xs)[0]


def forward(model: ToyModel, point: EmbeddingPoint) -> LstOutput:
    """Run the full sequence and read out the last position.

    Raises :class:`NumericalAbort` when the hidden state or logits are not finite.
    """
    lm = model.local_map(point)
    m, logits = lm.evaluate(lm.x0[None])
    if not (np.all(np.isfinite(m)) and np.all(np.isfinite(logits))):
        raise NumericalAbort("non-finite value in forward pass")
    return LstOutput.from_arrays(m[0], logits[0])


def layer_taps(model: ToyModel, point: EmbeddingPoint) -> list[np.ndarray]:
    """Hidden state at the perturbed position after embedding and after each layer.

    The final entry passes through the output norm, so for the default
    (last) perturbed position it equals ``forward(...).m`` bit for bit.  With
    ``perturb_position=None`` the taps follow the last position.
    """
    lm = model.local_map(point)
    _, _, taps = lm.evaluate(lm.x0[None], taps=True)
    if not np.all(np.isfinite(taps)):
        raise NumericalAbort("non-finite value in forward pass")
    return [t[0] for t in taps]


# -- linear reference map ---------------------------------------------------


def _random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True)
class LinearOracle:
    """``x -> A x (+ offset)`` with a known SVD ``A = U diag(sigma) V^T``.

    The optional offset shifts the output away from zero so that bitwise
    output changes are governed by the output lattice; it does not change
    the Jacobian.
    """

    A: np.ndarray
    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray
    precision: PrecisionMode = PrecisionMode.FP64
    reduction: ReductionOrder = field(default_factory=ReductionOrder.sequential)
    offset: np.ndarray | None = None
    unembedding: np.ndarray | None = None

    @classmethod
    def from_spectrum(cls, sigma, seed: int = 0, precision=PrecisionMode.FP64,
                      reduction=None, offset=None, unembedding=None) -> LinearOracle:
        sigma = np.sort(np.asarray(sigma, dtype=np.float64))[::-1]
        n = sigma.size
        rng = np.random.default_rng([0x0AC, seed])
        u = _random_orthogonal(rng, n)
        v = _random_orthogonal(rng, n)
        return cls._from_factors(u, sigma, v, precision, reduction, offset, unembedding)

    @classmethod
    def from_matrix_factors(cls, u, sigma, v, precision=PrecisionMode.FP64, reduction=None,
                            offset=None, unembedding=None) -> LinearOracle:
        return cls._from_factors(np.asarray(u, dtype=np.float64), np.asarray(sigma, dtype=np.float64),
                                 np.asarray(v, dtype=np.float64), precision, reduction, offset, unembedding)

    @classmethod
    def _from_factors(cls, u, sigma, v, precision, reduction, offset, unembedding):
        # same sign convention as the SVD module: largest |v_k| component positive
        flip = np.sign(v[np.argmax(np.abs(v), axis=0), np.arange(v.shape[1])])
        u, v = u * flip, v * flip
        A = (u * sigma) @ v.T
        return cls(A, u, sigma, v, PrecisionMode.parse(precision),
                   ReductionOrder.parse(reduction or "sequential"),
                   None if offset is None else np.asarray(offset, dtype=np.float64),
                   None if unembedding is None else np.asarray(unembedding, dtype=np.float64))

    @classmethod
    def identity(cls, n: int, **kw) -> LinearOracle:
        eye = np.eye(n)
        return cls.from_matrix_factors(eye, np.ones(n), eye, **kw)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def with_precision(self, precision) -> LinearOracle:
        return replace(self, precision=PrecisionMode.parse(precision))

    def local_map(self, x0) -> _OracleMap:
        return _OracleMap(self, x0)


def oracle_forward(oracle: LinearOracle, x) -> np.ndarray:
    """``A x`` (plus offset) under the oracle's precision and reduction order."""
    x = np.asarray(x)
    if x.shape[-1] != oracle.dim:
        raise ValueError(f"input length {x.shape[-1]} does not match oracle dimension {oracle.dim}")
    mode = oracle.precision
    y = contract(mode.round(x), oracle.A, oracle.reduction, mode)
    if oracle.offset is not None:
        y = mode.add(y, mode.round(oracle.offset))
    return y


class _OracleMap:
    """LocalMap counterpart for :class:`LinearOracle` (a single 'layer')."""

    n_layers = 1

    def __init__(self, oracle: LinearOracle, x0):
        self.oracle = oracle
        self.precision = oracle.precision
        self.x0 = oracle.precision.round(np.asarray(x0, dtype=np.float64))
        if self.x0.shape != (oracle.dim,):
            raise ValueError("base point length does not match oracle dimension")

    @property
    def unembedding(self):
        return self.oracle.unembedding

    def evaluate(self, xs, taps: bool = False):
        xs = np.atleast_2d(xs)
        mode = self.precision
        m = oracle_forward(self.oracle, xs)
        if self.oracle.unembedding is not None:
            logits = contract(m, self.oracle.unembedding, self.oracle.reduction, mode)
        else:
            logits = m
        if taps:
            return m, logits, np.stack([mode.round(xs), m])
        return m, logits

    def lst(self, xs) -> np.ndarray:
        return self.evaluate(xs)[0]


# -- weight export -------------------------------------------------------------

_MAGIC = b"CHSCWTS1"


def export_weights(model: ToyModel, path: str | Path) -> None:
    """Write weights as little-endian arrays, each behind a name/shape header."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(model.weights)))
        for name in sorted(model.weights):
            arr = np.asarray(model.weights[name])
            code = b"d" if arr.dtype == np.float64 else b"f"
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw + code + struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8" if code == b"d" else "<f4").tobytes())


def load_weights(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ValueError(f"{path}: not a weight file")
    off = len(_MAGIC)
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + n].decode()
        off += n
        code = data[off:off + 1]
        (ndim,) = struct.unpack_from("<B", data, off + 1)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        dt = np.dtype("<f8" if code == b"d" else "<f4")
        size = int(np.prod(shape)) * dt.itemsize
        out[name] = np.frombuffer(data[off:off + size], dtype=dt).reshape(shape).copy()
        off += size
    return out

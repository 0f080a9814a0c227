"""Coordinate MLP with positional encoding and hand-written reverse mode.

Parameters live in one flat buffer (:class:`ParamSet`); each layer's weight
and bias are views into it, so optimizers, Fisher diagonals and prune masks
can all work on a single vector.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .exceptions import ConfigurationError, NumericError

_MAGIC = b"INPS"
_FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 4, np.dtype("<f8"): 8}


class ParamSet:
    """Flat-addressable list of ``(weight[out, in], bias[out])`` layers."""

    def __init__(self, shapes, data=None, dtype=np.float32, frozen=False, version=0):
        self.shapes = [(int(o), int(i)) for o, i in shapes]
        n = sum(o * i + o for o, i in self.shapes)
        if data is None:
            data = np.zeros(n, dtype=dtype)
        data = np.ascontiguousarray(data)
        if data.ndim != 1 or data.size != n:
            raise ConfigurationError(f"flat buffer has {data.size} entries, layers need {n}")
        if any(o <= 0 or i <= 0 for o, i in self.shapes):
            raise ConfigurationError("layer dimensions must be positive")
        self.data = data
        self.frozen = bool(frozen)
        self.version = int(version)
        if self.frozen:
            self.data.flags.writeable = False

    @property
    def layers(self):
        out, k = [], 0
        for o, i in self.shapes:
            w = self.data[k:k + o * i].reshape(o, i)
            k += o * i
            b = self.data[k:k + o]
            k += o
            out.append((w, b))
        return out

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zeros_like(self):
        return ParamSet(self.shapes, np.zeros_like(self.data))

    def copy(self):
        return ParamSet(self.shapes, self.data.copy(), frozen=False, version=self.version)

    def checksum(self):
        return hashlib.sha256(self.data.tobytes()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, ParamSet):
            return NotImplemented
        return self.shapes == other.shapes and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"ParamSet(shapes={self.shapes}, dtype={self.dtype}, frozen={self.frozen}, version={self.version})"

    # -- serialization ---------------------------------------------------

    def to_bytes(self):
        dt = self.data.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ConfigurationError(f"unsupported scalar type {self.data.dtype}")
        head = struct.pack(
            "<4sHBBiI", _MAGIC, _FORMAT_VERSION, _DTYPE_CODES[dt], int(self.frozen),
            self.version, len(self.shapes),
        )
        dims = b"".join(struct.pack("<II", o, i) for o, i in self.shapes)
        return head + dims + self.data.astype(dt, copy=False).tobytes()

    @classmethod
    def from_bytes(cls, blob):
        head_size = struct.calcsize("<4sHBBiI")
        if len(blob) < head_size:
            raise ValueError("truncated ParamSet blob")
        magic, ver, code, frozen, version, n_layers = struct.unpack_from("<4sHBBiI", blob)
        if magic != _MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if ver != _FORMAT_VERSION:
            raise ValueError(f"unsupported ParamSet format version {ver}")
        dtype = {4: np.dtype("<f4"), 8: np.dtype("<f8")}[code]
        off = head_size
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", blob, off))
            off += 8
        n = sum(o * i + o for o, i in shapes)
        data = np.frombuffer(blob, dtype=dtype, count=n, offset=off).astype(dtype.newbyteorder("="))
        return cls(shapes, data, frozen=bool(frozen), version=version)


def snapshot(params, T):
    """Deep, frozen copy of ``params`` tagged with task index ``T``."""
    if not np.all(np.isfinite(params.data)):
        raise NumericError("cannot snapshot non-finite parameters")
    return ParamSet(params.shapes, params.data.copy(), frozen=True, version=T)


def param_bytes(params):
    return int(params.size * params.data.itemsize)


# -- encoding ------------------------------------------------------------


@dataclass(frozen=True)
class EncodingConfig:
    L_pos: int = 6
    L_dir: int = 2
    include_identity: bool = True

    def dim(self, L, n=3):
        return n * (int(self.include_identity) + 2 * L)


def encode(v, L, include_identity=True):
    """Sin/cos features of ``v`` at frequencies ``2**k * pi``, ``k < L``.

    The last axis of ``v`` is the vector axis; output blocks are ordered
    ``[v, sin(f0 v), cos(f0 v), sin(f1 v), ...]``.
    """
    v = np.asarray(v)
    parts = [v] if include_identity else []
    for k in range(L):
        a = (2.0 ** k * np.pi) * v
        parts.append(np.sin(a))
        parts.append(np.cos(a))
    if not parts:
        return np.zeros(v.shape[:-1] + (0,), dtype=v.dtype)
    return np.concatenate(parts, axis=-1)


# -- generic MLP (used by the ray generator and for tests) ----------------


def init_params(shapes, rng, dtype=np.float32):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    ps = ParamSet(shapes, dtype=dtype)
    for w, b in ps.layers:
        bound = 1.0 / np.sqrt(w.shape[1])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
        b[...] = rng.uniform(-bound, bound, size=b.shape)
    return ps


def mlp_forward(params, x):
    """ReLU hidden layers, linear output. Returns (output, cache)."""
    hs = [x]
    h = x
    layers = params.layers
    for k, (w, b) in enumerate(layers):
        a = h @ w.T + b
        h = np.maximum(a, 0) if k < len(layers) - 1 else a
        hs.append(h)
    return h, hs


def mlp_backward(params, cache, grad_out):
    grad = params.zeros_like()
    g = grad_out
    layers = params.layers
    glayers = grad.layers
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        gw, gb = glayers[k]
        if k < len(layers) - 1:
            g = g * (cache[k + 1] > 0)
        gw[...] = g.T @ cache[k]
        gb[...] = g.sum(axis=0)
        g = g @ w
    return grad


# -- NeRF field network --------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    """Trunk of ``depth`` ReLU layers on encoded position, a density/feature
    head, then a direction-conditioned colour branch."""

    encoding: EncodingConfig = field(default_factory=EncodingConfig)
    depth: int = 4
    width: int = 128
    dir_width: int | None = None
    pos_scale: float = 1.0  # positions are multiplied by this before encoding

    @property
    def branch_width(self):
        return self.dir_width if self.dir_width is not None else max(self.width // 2, 1)

    def layer_shapes(self):
        enc = self.encoding
        d_pos = enc.dim(enc.L_pos)
        d_dir = enc.dim(enc.L_dir)
        shapes = []
        fan_in = d_pos
        for _ in range(self.depth):
            shapes.append((self.width, fan_in))
            fan_in = self.width
        shapes.append((1 + self.width, fan_in))
        shapes.append((self.branch_width, self.width + d_dir))
        shapes.append((3, self.branch_width))
        return shapes


@dataclass
class NetworkOutput:
    color: np.ndarray
    sigma: np.ndarray


def init_network(cfg, rng, dtype=np.float32):
    return init_params(cfg.layer_shapes(), rng, dtype)


def _check_dims(params, cfg):
    if params.shapes != cfg.layer_shapes():
        raise ConfigurationError(
            f"parameter layout {params.shapes} does not match network config {cfg.layer_shapes()}"
        )


def _field_forward(params, cfg, p, d):
    _check_dims(params, cfg)
    enc = cfg.encoding
    dt = params.dtype
    x = encode(np.asarray(p, dtype=dt) * dt.type(cfg.pos_scale), enc.L_pos, enc.include_identity)
    ed = encode(np.asarray(d, dtype=dt), enc.L_dir, enc.include_identity)
    layers = params.layers
    hs = [x]
    h = x
    for k in range(cfg.depth):
        w, b = layers[k]
        h = np.maximum(h @ w.T + b, 0)
        hs.append(h)
    w, b = layers[cfg.depth]
    o = h @ w.T + b
    s_raw = o[:, 0]
    g = np.concatenate([o[:, 1:], ed], axis=1)
    w, b = layers[cfg.depth + 1]
    hb = np.maximum(g @ w.T + b, 0)
    w, b = layers[cfg.depth + 2]
    c = expit(hb @ w.T + b)
    sigma = np.logaddexp(0, s_raw).astype(dt, copy=False)
    return c, sigma, (hs, s_raw, g, hb, c)


def forward(params, cfg, p, d):
    """Colour in [0, 1] and density >= 0 for a batch of points ``p`` viewed along ``d``."""
    p = np.atleast_2d(p)
    d = np.atleast_2d(d)
    c, sigma, _ = _field_forward(params, cfg, p, d)
    return NetworkOutput(c, sigma)


def _flush(a):
    # zero subnormals in place; float32 arithmetic on them is dozens of times slower
    a[np.abs(a) < np.finfo(a.dtype).tiny] = 0
    return a


def field_backward(params, cfg, cache, grad_c, grad_sigma):
    """Contract upstream gradients on (colour, density) with the network Jacobian."""
    if not (np.all(np.isfinite(grad_c)) and np.all(np.isfinite(grad_sigma))):
        raise NumericError("non-finite upstream gradient")
    hs, s_raw, g, hb, c = cache
    layers = params.layers
    grad = params.zeros_like()
    gl = grad.layers
    D = cfg.depth

    dz = _flush(grad_c * c * (1 - c))
    w, _ = layers[D + 2]
    gl[D + 2][0][...] = dz.T @ hb
    gl[D + 2][1][...] = dz.sum(axis=0)
    dhb = (dz @ w) * (hb > 0)

    w, _ = layers[D + 1]
    gl[D + 1][0][...] = dhb.T @ g
    gl[D + 1][1][...] = dhb.sum(axis=0)
    dg = dhb @ w

    do = np.empty((dg.shape[0], 1 + cfg.width), dtype=dg.dtype)
    do[:, 0] = grad_sigma * expit(s_raw)
    do[:, 1:] = dg[:, :cfg.width]
    _flush(do)
    w, _ = layers[D]
    gl[D][0][...] = do.T @ hs[D]
    gl[D][1][...] = do.sum(axis=0)
    dh = do @ w

    for k in range(D - 1, -1, -1):
        dh = dh * (hs[k + 1] > 0)
        gl[k][0][...] = dh.T @ hs[k]
        gl[k][1][...] = dh.sum(axis=0)
        if k:
            dh = dh @ layers[k][0]
    return grad


def backward(params, cfg, p, d, grad_c, grad_sigma):
    """Gradient of ``sum(grad_c * c + grad_sigma * sigma)`` w.r.t. every parameter."""
    p = np.atleast_2d(p)
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    _, _, cache = _field_forward(params, cfg, p, np.atleast_2d(d))
    dt = params.dtype
    return field_backward(
        params, cfg, cache,
        np.asarray(grad_c, dtype=dt).reshape(-1, 3),
        np.asarray(grad_sigma, dtype=dt).reshape(-1),
    )

"""Complex-valued neural building blocks over the tape: linear layers
without bias, vector-neuron nonlinearities, filter-response normalization
for tangent features, real MLPs, an Adam optimizer and checkpoint I/O.

Checkpoint byte layout (little-endian throughout):

    magic   4 bytes  b"STCK"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name utf-8 bytes,
        dtype    u8   (0=float32, 1=float64, 2=complex64, 3=complex128),
        ndim     u8,  dims ndim x u32,
        data     raw little-endian array bytes
"""

from __future__ import annotations

import struct

import numpy as np

from . import tape as T

_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1,
                np.dtype("complex64"): 2, np.dtype("complex128"): 3}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}
_MAGIC = b"STCK"
_VERSION = 1


class ParameterStore:
    """Named parameters with gradient slots, plus init RNG and dtypes."""

    def __init__(self, rng: np.random.Generator | None = None, dtype=np.float64):
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.real_dtype = np.dtype(dtype)
        self.complex_dtype = np.dtype(np.complex128 if self.real_dtype == np.float64
                                      else np.complex64)
        self.params: dict[str, T.Tensor] = {}

    def add(self, name: str, array: np.ndarray) -> T.Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = T.parameter(np.ascontiguousarray(array))
        self.params[name] = t
        return t

    def complex_init(self, name: str, shape, fan_in: int, zero=False) -> T.Tensor:
        """Complex weight with independent Gaussian real/imag parts so that
        E|w|^2 = 1/fan_in (or exactly zero)."""
        if zero:
            w = np.zeros(shape, dtype=self.complex_dtype)
        else:
            s = np.sqrt(0.5 / max(fan_in, 1))
            w = (self.rng.standard_normal(shape) * s
                 + 1j * self.rng.standard_normal(shape) * s).astype(self.complex_dtype)
        return self.add(name, w)

    def real_init(self, name: str, shape, fan_in: int, zero=False) -> T.Tensor:
        if zero:
            w = np.zeros(shape, dtype=self.real_dtype)
        else:
            w = (self.rng.standard_normal(shape)
                 * np.sqrt(1.0 / max(fan_in, 1))).astype(self.real_dtype)
        return self.add(name, w)

    def constant(self, name: str, array) -> T.Tensor:
        return self.add(name, np.asarray(array).astype(
            self.complex_dtype if np.iscomplexobj(array) else self.real_dtype))

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict):
        for k, p in self.params.items():
            if k not in state:
                raise KeyError(f"checkpoint is missing parameter {k!r}")
            a = np.asarray(state[k])
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k!r}: {a.shape} vs {p.data.shape}")
            p.data = a.astype(p.data.dtype)


def write_checkpoint_stream(fh, state: dict, version: int = _VERSION):
    fh.write(_MAGIC)
    fh.write(struct.pack("<II", version, len(state)))
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        code = _DTYPE_CODES[arr.dtype]
        nb = name.encode("utf-8")
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def read_checkpoint_stream(fh, label="stream") -> dict:
    if fh.read(4) != _MAGIC:
        raise ValueError(f"{label}: not a checkpoint")
    version, count = struct.unpack("<II", fh.read(8))
    if version != _VERSION:
        raise ValueError(f"{label}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", fh.read(2))
        name = fh.read(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", fh.read(2))
        dims = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
        dt = _CODE_DTYPES[code]
        data = np.frombuffer(fh.read(int(np.prod(dims, dtype=np.int64)) * dt.itemsize),
                             dtype=dt.newbyteorder("<")).astype(dt)
        out[name] = data.reshape(dims)
    return out


def save_checkpoint(path, store_or_state, version: int = _VERSION):
    state = (store_or_state.state_dict() if isinstance(store_or_state, ParameterStore)
             else dict(store_or_state))
    with open(path, "wb") as fh:
        write_checkpoint_stream(fh, state, version)


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return read_checkpoint_stream(fh, label=str(path))


# ---------------------------------------------------------------------------
# layers


class ComplexLinear:
    """Channel map with complex weights and no bias (bias would break
    rotation equivariance of tangent features)."""

    def __init__(self, store: ParameterStore, name: str, in_ch: int, out_ch: int,
                 zero=False):
        self.w = store.complex_init(f"{name}.w", (out_ch, in_ch), fan_in=in_ch, zero=zero)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.matmul_last(x, self.w)


class VectorNeuron:
    """Pointwise nonlinearity for tangent features.

    With K, Q the outputs of two linear layers, each output channel is
    Q + ReLU(-Re(conj(Q) K)) / (|K|^2 + delta) * K: the part of Q
    anti-aligned with K is folded back along K, leaving Q unchanged when
    the two already agree. Commutes with per-point rotations.
    """

    def __init__(self, store: ParameterStore, name: str, in_ch: int, out_ch: int,
                 delta: float = 1e-6):
        self.lin_k = ComplexLinear(store, f"{name}.k", in_ch, out_ch)
        self.lin_q = ComplexLinear(store, f"{name}.q", in_ch, out_ch)
        self.delta = delta

    def __call__(self, x: T.Tensor) -> T.Tensor:
        k = self.lin_k(x)
        q = self.lin_q(x)
        return vn_combine(q, k, self.delta)


def vn_combine(q: T.Tensor, k: T.Tensor, delta: float) -> T.Tensor:
    inner = T.creal(T.mul(T.conj(q), k))
    gate = T.relu(T.neg(inner))
    coeff = T.div(gate, T.cabs2(k) + float(delta))
    return T.add(q, T.mul(coeff, k))


class FRN:
    """Per-channel filter-response normalization for tangent features:
    x_c -> a_c x_c / sqrt(E |x_c|^2 + delta_c) with a learnable complex
    gain and a learnable positive offset. The expectation is a weighted
    mean over the population axes (vertex areas on a mesh, uniform over
    one-ring samples)."""

    def __init__(self, store: ParameterStore, name: str, channels: int,
                 init_delta: float = 1e-6):
        self.gain = store.constant(f"{name}.a", np.ones(channels, dtype=np.complex128))
        self.log_delta = store.constant(
            f"{name}.logdelta", np.full(channels, np.log(init_delta)))

    def __call__(self, x: T.Tensor, weights: np.ndarray, axes) -> T.Tensor:
        w = np.asarray(weights, dtype=x.data.real.dtype)
        e = T.rsum(T.mul(T.cabs2(x), w), axis=axes, keepdims=True)
        denom = T.sqrt(e + T.exp(self.log_delta))
        return T.mul(T.div(x, denom), self.gain)


class RealMLP:
    """Fully connected real network with SiLU between layers and biases."""

    def __init__(self, store: ParameterStore, name: str, widths,
                 zero_last=False):
        self.weights = []
        self.biases = []
        for i in range(len(widths) - 1):
            zero = zero_last and i == len(widths) - 2
            self.weights.append(store.real_init(f"{name}.w{i}", (widths[i + 1], widths[i]),
                                                fan_in=widths[i], zero=zero))
            self.biases.append(store.constant(f"{name}.b{i}", np.zeros(widths[i + 1])))
        self.n = len(self.weights)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for i in range(self.n):
            x = T.add(T.matmul_last(x, self.weights[i]), self.biases[i])
            if i < self.n - 1:
                x = T.silu(x)
        return x


# ---------------------------------------------------------------------------
# optimization


def cosine_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    if total <= 1:
        return lr_end
    frac = min(max(step / (total - 1), 0.0), 1.0)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * frac))


class Adam:
    """First-order adaptive-moment optimizer. Complex parameters are
    updated through their real-component views."""

    def __init__(self, store: ParameterStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}
        for k, p in store.params.items():
            view = self._view(p.data)
            self.m[k] = np.zeros_like(view)
            self.v[k] = np.zeros_like(view)

    @staticmethod
    def _view(a: np.ndarray) -> np.ndarray:
        if a.dtype == np.complex128:
            return a.view(np.float64)
        if a.dtype == np.complex64:
            return a.view(np.float32)
        return a

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.store.params.items():
            if p.grad is None:
                continue
            g = self._view(np.ascontiguousarray(p.grad))
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            self._view(p.data)[...] -= lr * update

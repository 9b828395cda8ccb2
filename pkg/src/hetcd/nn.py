"""Small fully convolutional networks with hand-written backward passes.

Tensors are NHWC. A layer's ``forward`` returns ``(output, cache)`` and its
``backward(grad, cache)`` returns the input gradient while *accumulating*
parameter gradients into ``layer.grads``; call ``zero_grad`` between steps.
Passing caches explicitly lets one network be applied several times in a
single step (e.g. F(x) and later F(G(y))).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

LEAKY_SLOPE = 0.3
ACTIVATIONS = ("leaky_relu", "tanh", "sigmoid", "linear")


# -- activations -------------------------------------------------------------

def leaky_relu(x, beta=LEAKY_SLOPE):
    return np.where(x > 0, x, beta * x) if beta > 1 else np.maximum(x, beta * x)


def leaky_relu_grad(x, beta=LEAKY_SLOPE):
    # the kink at 0 takes the negative-side slope
    return np.where(x > 0, np.ones((), x.dtype), np.asarray(beta, x.dtype))


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "leaky_relu":
        return leaky_relu(z)
    if name == "tanh":
        return np.tanh(z)
    if name == "sigmoid":
        return sigmoid(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Derivative w.r.t. the pre-activation ``z`` given the output ``a``."""
    if name == "leaky_relu":
        return leaky_relu_grad(z)
    if name == "tanh":
        return 1.0 - a * a
    if name == "sigmoid":
        return a * (1.0 - a)
    if name == "linear":
        return np.ones_like(z)
    raise ValueError(f"unknown activation {name!r}")


# -- initialisation ----------------------------------------------------------

def truncated_normal(shape, std: float, rng: np.random.Generator, bound: float = 2.0) -> np.ndarray:
    """N(0, std^2) restricted to [-bound*std, bound*std] by redrawing outliers."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def glorot_truncated_init(shape, rng: np.random.Generator, fan_in: int | None = None,
                          fan_out: int | None = None) -> np.ndarray:
    """Glorot-scaled truncated normal. Conv kernels ``(3, 3, Cin, Cout)`` use receptive-field fans."""
    if fan_in is None or fan_out is None:
        receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
        fan_in = shape[-2] * receptive
        fan_out = shape[-1] * receptive
    return truncated_normal(shape, np.sqrt(2.0 / (fan_in + fan_out)), rng)


# -- layers ------------------------------------------------------------------

class MissingCacheError(RuntimeError):
    pass


class Layer:
    params: dict
    grads: dict

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.zero_grad()
        return self


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero padding 1, followed by an activation."""

    def __init__(self, c_in: int, c_out: int, activation: str = "leaky_relu",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        rng = np.random.default_rng() if rng is None else rng
        self.c_in, self.c_out, self.activation = c_in, c_out, activation
        self.params = {
            "w": glorot_truncated_init((3, 3, c_in, c_out), rng).astype(dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }
        self.grads = {}
        self.zero_grad()

    # The padded batch is flattened to rows of length C; in that layout every
    # 3x3 tap is a constant row offset, so each tap is one contiguous matmul.
    # Outputs are produced on the padded grid and the 1-px frame is discarded.

    def _offsets(self, w: int) -> list[int]:
        return [(i - 1) * (w + 2) + (j - 1) for i in range(3) for j in range(3)]

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[-1] != self.c_in:
            raise ValueError(f"conv expects (N, H, W, {self.c_in}) input, got {x.shape}")
        n, h, w, _ = x.shape
        kern = self.params["w"]
        margin = w + 3
        total = n * (h + 2) * (w + 2)
        ext = np.zeros((total + 2 * margin, self.c_in), dtype=np.result_type(x, kern))
        ext[margin:margin + total] = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0))).reshape(total, -1)
        zf = np.zeros((total, self.c_out), dtype=ext.dtype)
        for t, off in enumerate(self._offsets(w)):
            zf += ext[margin + off:margin + off + total] @ kern[t // 3, t % 3]
        z = zf.reshape(n, h + 2, w + 2, self.c_out)[:, 1:-1, 1:-1, :] + self.params["b"]
        a = activate(self.activation, z)
        return a, (ext, z, a)

    def backward(self, grad: np.ndarray, cache):
        if cache is None:
            raise MissingCacheError("conv backward called without a forward cache")
        ext, z, a = cache
        n, h, w, _ = z.shape
        kern = self.params["w"]
        margin = w + 3
        total = n * (h + 2) * (w + 2)
        gz = grad * activation_grad(self.activation, z, a)
        gfull = np.zeros((n, h + 2, w + 2, self.c_out), dtype=gz.dtype)
        gfull[:, 1:-1, 1:-1, :] = gz
        gflat = gfull.reshape(total, self.c_out)
        dext = np.zeros_like(ext)
        dw = self.grads["w"]
        for t, off in enumerate(self._offsets(w)):
            rows = slice(margin + off, margin + off + total)
            i, j = divmod(t, 3)
            dw[i, j] += ext[rows].T @ gflat
            dext[rows] += gflat @ kern[i, j].T
        self.grads["b"] += gz.sum(axis=(0, 1, 2))
        dx = dext[margin:margin + total].reshape(n, h + 2, w + 2, self.c_in)
        return dx[:, 1:-1, 1:-1, :]


class Dense(Layer):
    """Affine map on the last axis followed by an activation."""

    def __init__(self, n_in: int, n_out: int, activation: str = "sigmoid",
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = np.random.default_rng() if rng is None else rng
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.params = {
            "w": glorot_truncated_init((n_in, n_out), rng).astype(dtype),
            "b": np.zeros(n_out, dtype=dtype),
        }
        self.grads = {}
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"dense expects last dim {self.n_in}, got {x.shape}")
        z = x @ self.params["w"] + self.params["b"]
        a = activate(self.activation, z)
        return a, (x, z, a)

    def backward(self, grad, cache):
        if cache is None:
            raise MissingCacheError("dense backward called without a forward cache")
        x, z, a = cache
        gz = grad * activation_grad(self.activation, z, a)
        self.grads["w"] += x.reshape(-1, self.n_in).T @ gz.reshape(-1, self.n_out)
        self.grads["b"] += gz.reshape(-1, self.n_out).sum(axis=0)
        return gz @ self.params["w"].T


class GlobalAvgPool(Layer):
    """``(N, H, W, C) -> (N, C)`` spatial mean."""

    def __init__(self):
        self.params, self.grads = {}, {}

    def forward(self, x):
        return x.mean(axis=(1, 2)), x.shape

    def backward(self, grad, cache):
        n, h, w, c = cache
        return np.broadcast_to(grad[:, None, None, :] / (h * w), cache).copy()


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None):
    """Inverted dropout; returns ``(output, mask)`` where mask is None when inactive."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if not training or rate == 0.0:
        return x, None
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * keep, keep


class Dropout(Layer):
    def __init__(self, rate: float = 0.2):
        self.rate = rate
        self.params, self.grads = {}, {}

    def forward(self, x, training: bool = False, rng=None, mask=None):
        if mask is not None:
            return x * mask, mask
        return dropout(x, self.rate, training, rng)

    def backward(self, grad, cache):
        return grad if cache is None else grad * cache


class Sequential:
    """Layer stack; dropout layers draw from the rng passed to ``forward``."""

    def __init__(self, layers: list, name: str = ""):
        self.layers = layers
        self.name = name

    def forward(self, x, training: bool = False, rng=None, masks=None):
        caches = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                x, c = layer.forward(x, training, rng, None if masks is None else masks[i])
            else:
                x, c = layer.forward(x)
            caches.append(c)
        return x, caches

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, grad, caches):
        if caches is None or len(caches) != len(self.layers):
            raise MissingCacheError(f"{self.name or 'network'} backward needs one cache per layer")
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, cache)
        return grad

    def param_layers(self):
        return [l for l in self.layers if l.params]

    def parameters(self) -> list[np.ndarray]:
        return [l.params[k] for l in self.param_layers() for k in sorted(l.params)]

    def gradients(self) -> list[np.ndarray]:
        return [l.grads[k] for l in self.param_layers() for k in sorted(l.params)]

    def weight_arrays(self) -> list[tuple[Layer, str]]:
        """Kernel and dense weights (biases excluded), for weight decay."""
        return [(l, "w") for l in self.param_layers()]

    def zero_grad(self):
        for l in self.param_layers():
            l.zero_grad()

    def astype(self, dtype):
        for l in self.param_layers():
            l.astype(dtype)
        return self

    def n_params(self) -> int:
        return sum(p.size for p in self.parameters())


def conv_stack(c_in: int, filters: list[int], out_activation: str, rng,
               dropout_rate: float = 0.2, dtype=np.float32, name: str = "") -> Sequential:
    """Convolutions with leaky-ReLU + dropout on hidden layers and ``out_activation`` last."""
    layers = []
    prev = c_in
    for i, f in enumerate(filters):
        last = i == len(filters) - 1
        layers.append(Conv3x3(prev, f, out_activation if last else "leaky_relu", rng, dtype))
        if not last and dropout_rate > 0:
            layers.append(Dropout(dropout_rate))
        prev = f
    return Sequential(layers, name)


# -- optimiser ---------------------------------------------------------------

class Adam:
    """Adam with bias correction; updates the parameter arrays in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 1e-5, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        if len(grads) != len(self.params):
            raise ValueError("one gradient per parameter block required")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype, copy=False)


def adam_step(params, grads, state: Adam | None = None, **kw) -> Adam:
    """Functional wrapper: one Adam update, creating the state on first use."""
    state = Adam(params, **kw) if state is None else state
    state.step(grads)
    return state


# -- gradient checking -------------------------------------------------------

def numerical_gradient(f, arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


# -- checkpoints -------------------------------------------------------------

CKPT_MAGIC = b"HCDM"
CKPT_VERSION = 1


def save_checkpoint(path, descriptor: dict, params: list[np.ndarray]) -> None:
    desc = json.dumps(descriptor, sort_keys=True).encode()
    total = sum(p.size for p in params)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<III", CKPT_VERSION, len(desc), total))
        fh.write(desc)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path) -> tuple[dict, np.ndarray]:
    """Returns the architecture descriptor and the flat float32 parameter vector."""
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {buf[:4]!r}")
    version, dlen, total = struct.unpack_from("<III", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    desc = json.loads(buf[off:off + dlen].decode())
    off += dlen
    if len(buf) - off != 4 * total:
        raise ValueError(f"checkpoint payload length mismatch at byte offset {off}")
    return desc, np.frombuffer(buf, dtype="<f4", offset=off).copy()


def assign_flat(params: list[np.ndarray], flat: np.ndarray) -> None:
    off = 0
    for p in params:
        p[...] = flat[off:off + p.size].reshape(p.shape)
        off += p.size
    if off != flat.size:
        raise ValueError(f"checkpoint holds {flat.size} values, model needs {off}")

"""Parameter storage, affine layers, the Adam optimizer, and checkpoint I/O."""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import ShapeMismatch, Tensor

CHECKPOINT_MAGIC = b"AP2APNN1"
CHECKPOINT_VERSION = 1


class ParamStore:
    """Named trainable tensors. Layers register into one shared store so the
    whole model serializes as a flat name -> array mapping."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def items(self):
        return self._params.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeMismatch(f"{k}: checkpoint shape {arr.shape} != model shape {t.data.shape}")
            t.data = arr.copy()


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    k = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-k, k, size=shape)


class Linear:
    """y = x @ W.T + b with fan-in-scaled uniform init."""

    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int,
                 rng: np.random.Generator, zero: bool = False):
        if zero:
            w = np.zeros((n_out, n_in))
            b = np.zeros(n_out)
        else:
            w = uniform_init(rng, (n_out, n_in), n_in)
            b = uniform_init(rng, (n_out,), n_in)
        self.weight = store.add(f"{name}.weight", w)
        self.bias = store.add(f"{name}.bias", b)
        self.n_in = n_in
        self.n_out = n_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"linear expects width {self.n_in}, got {x.shape}")
        return x @ self.weight.T + self.bias


class MLP:
    """Stack of Linear layers with tanh between them.

    ``final_activation`` keeps the output bounded in (-1, 1); heads that
    decode unbounded quantities leave it off.
    """

    def __init__(self, store: ParamStore, name: str, widths, rng,
                 final_activation: bool = False, zero_last: bool = False):
        self.layers = []
        n = len(widths) - 1
        for i in range(n):
            zero = zero_last and i == n - 1
            self.layers.append(Linear(store, f"{name}.{i}", widths[i], widths[i + 1], rng, zero=zero))
        self.final_activation = final_activation

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_activation:
                x = x.tanh()
        return x


class Adam:
    """Adam over one ParamStore; state keyed by parameter name."""

    def __init__(self, store: ParamStore, lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8,
                 names: list[str] | None = None):
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.names = list(names) if names is not None else list(store.names())
        self._m = {k: np.zeros_like(store[k].data) for k in self.names}
        self._v = {k: np.zeros_like(store[k].data) for k in self.names}

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for k in self.names:
            p = self.store[k]
            if p.grad is None:
                continue
            m = self._m[k]
            v = self._v[k]
            m *= self.b1
            m += (1.0 - self.b1) * p.grad
            v *= self.b2
            v += (1.0 - self.b2) * p.grad * p.grad
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self._m, "v": self._v}


def grad_norm(store: ParamStore) -> float:
    total = 0.0
    for t in store.tensors():
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm. Returns
    the pre-clip norm."""
    norm = grad_norm(store)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for t in store.tensors():
            if t.grad is not None:
                t.grad *= scale
    return norm


# -- checkpoint format ------------------------------------------------------
#
# magic "AP2APNN1" | u32 version | u32 tensor count | per tensor:
#   u16 name length, utf-8 name, u8 ndim, u32 x ndim dims, float64 data.
# All integers and floats little-endian.


def save_params(path, arrays: dict[str, np.ndarray] | ParamStore):
    if isinstance(arrays, ParamStore):
        arrays = arrays.state_dict()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a parameter checkpoint (magic {magic!r})")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim)) if ndim else ()
            n = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out[name] = data.astype(np.float64)
    return out

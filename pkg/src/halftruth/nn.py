"""Parameter containers on top of the autograd ops, plus the binary checkpoint format."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd.ops import LSTM_KEYS, MHA_KEYS, BatchNormState
from .autograd.tensor import Tensor, parameter
from .corpus import atomic_write_bytes


class Module:
    """Attribute-discovered parameters and buffers, torch style.

    Parameters are ``Tensor`` attributes with ``requires_grad``; buffers are
    the arrays inside ``BatchNormState`` attributes. Names are dotted
    attribute paths, in definition order.
    """

    training = True
    rng: np.random.Generator | None = None

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, Tensor) and v.requires_grad:
                        yield f"{prefix}{name}.{k}", v
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield from v.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, BatchNormState):
                yield f"{prefix}{name}.running_mean", value.running_mean
                yield f"{prefix}{name}.running_var", value.running_var
                yield f"{prefix}{name}.num_batches_tracked", value.num_batches_tracked
        for name, child in self._children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def set_rng(self, rng: np.random.Generator) -> "Module":
        for m in self.modules():
            m.rng = rng
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (float64 is for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name, value in vars(m).items():
                if isinstance(value, BatchNormState):
                    setattr(
                        m,
                        name,
                        BatchNormState(
                            value.running_mean.astype(dtype),
                            value.running_var.astype(dtype),
                            value.num_batches_tracked.astype(dtype),
                        ),
                    )
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        targets = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(targets) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, arr in state.items():
            ref = targets[name].data if name in targets else buffers[name]
            if tuple(arr.shape) != ref.shape:
                raise ValueError(f"{name}: shape {tuple(arr.shape)} != model shape {ref.shape}")
        for name, arr in state.items():
            if name in targets:
                targets[name].data = np.array(arr, dtype=targets[name].dtype)
            else:
                buffers[name][...] = arr


def count_params(model: Module) -> int:
    return int(sum(p.size for p in model.parameters()))


def _uniform(rng, bound, shape):
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = parameter(_uniform(rng, bound, (n_in, n_out)))
        self.bias = parameter(_uniform(rng, bound, (n_out,)))

    def __call__(self, x):
        return ag.affine(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, c_in, c_out, kernel, rng, groups=1, padding=0):
        bound = 1.0 / np.sqrt(c_in // groups * kernel)
        self.weight = parameter(_uniform(rng, bound, (c_out, c_in // groups, kernel)))
        self.bias = parameter(_uniform(rng, bound, (c_out,)))
        self.groups, self.padding = groups, padding

    def __call__(self, x):
        return ag.conv1d(x, self.weight, self.bias, groups=self.groups, padding=self.padding)


class Conv2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, padding=0):
        bound = 1.0 / np.sqrt(c_in * kernel * kernel)
        self.weight = parameter(_uniform(rng, bound, (c_out, c_in, kernel, kernel)))
        self.bias = parameter(_uniform(rng, bound, (c_out,)))
        self.padding = padding

    def __call__(self, x):
        return ag.conv2d(x, self.weight, self.bias, padding=self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(channels, np.float32))
        self.beta = parameter(np.zeros(channels, np.float32))
        self.stats = BatchNormState.create(channels)
        self.momentum, self.eps = momentum, eps

    def __call__(self, x):
        return ag.batch_norm(x, self.gamma, self.beta, self.stats, self.training, self.momentum, self.eps)


class MultiheadAttention(Module):
    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if d_model % n_heads:
            raise ValueError(f"d_model {d_model} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        bound = 1.0 / np.sqrt(d_model)
        self.proj = {}
        for k in MHA_KEYS:
            shape = (d_model, d_model) if k.startswith("w") else (d_model,)
            self.proj[k] = parameter(_uniform(rng, bound, shape))

    def __call__(self, q, k, v):
        return ag.multi_head_attention(q, k, v, self.proj, self.n_heads)


class LSTMDirection(Module):
    """One direction of one LSTM layer.

    With ``chrono_horizon`` the gate biases use chrono initialisation: forget
    bias ``log(U(1, horizon - 1))`` and the negated value on the input gate,
    so units start out as slow integrators with memory up to ``horizon`` steps.
    """

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, chrono_horizon: int | None = None):
        bound = 1.0 / np.sqrt(hidden)
        self.w_ih = parameter(_uniform(rng, bound, (n_in, 4 * hidden)))
        self.w_hh = parameter(_uniform(rng, bound, (hidden, 4 * hidden)))
        self.b_ih = parameter(_uniform(rng, bound, (4 * hidden,)))
        self.b_hh = parameter(_uniform(rng, bound, (4 * hidden,)))
        if chrono_horizon is not None:
            forget = np.log(rng.uniform(1.0, chrono_horizon - 1.0, hidden)).astype(np.float32)
            self.b_ih.data[:hidden] = -forget
            self.b_ih.data[hidden : 2 * hidden] = forget
            self.b_hh.data[: 2 * hidden] = 0.0

    def weights(self) -> dict:
        return {k: getattr(self, k) for k in LSTM_KEYS}


class BiLSTM(Module):
    def __init__(self, n_in: int, hidden: int, layers: int, rng: np.random.Generator, chrono_horizon=None):
        self.forward_dirs = []
        self.backward_dirs = []
        for layer in range(layers):
            width = n_in if layer == 0 else 2 * hidden
            self.forward_dirs.append(LSTMDirection(width, hidden, rng, chrono_horizon))
            self.backward_dirs.append(LSTMDirection(width, hidden, rng, chrono_horizon))

    def __call__(self, x):
        params = [{"fw": f.weights(), "bw": b.weights()} for f, b in zip(self.forward_dirs, self.backward_dirs)]
        return ag.lstm_bidirectional(x, params)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CAFW"
CKPT_VERSION = 1


def checkpoint_bytes(model: Module) -> bytes:
    state = model.state_dict()
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(state))]
    for name, arr in state.items():
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)) + enc)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(model: Module, path) -> None:
    atomic_write_bytes(path, checkpoint_bytes(model))


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (magic {data[:4]!r})")
    try:
        version, count = struct.unpack_from("<HI", data, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        pos = 10
        state = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", data, pos)
            dims = struct.unpack_from(f"<{rank}I", data, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if pos + 4 * size > len(data):
                raise ValueError(f"{path}: truncated checkpoint")
            state[name] = np.frombuffer(data, "<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return state


def load_checkpoint(model: Module, path) -> None:
    model.load_state_dict(read_checkpoint(path))

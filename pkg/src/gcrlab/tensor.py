"""Small differentiable substrate shared by the critic and the policy.

Everything runs in float64 on CPU. Parameters live in a :class:`ParamStore`
(an ordered map of named leaf tensors); networks are plain functions of
``(inputs, params)`` so the same store can be checkpointed, cloned for PPO's
old/new pair, or perturbed for finite-difference checks.
"""
from __future__ import annotations

import io
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"GCRCKPT\n"
CHECKPOINT_FORMAT_VERSION = 1

ACTIVATIONS = ("identity", "relu", "tanh", "sigmoid")


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Raised when a loss, gradient or parameter stops being finite."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


class ParamStore:
    """Named parameter tensors with a monotonically increasing version.

    Shapes are fixed once a name is added. ``version`` is bumped by trainers
    after every optimizer step and is written to checkpoints.
    """

    def __init__(self, kind: str, meta: Mapping | None = None):
        self.kind = kind
        self.meta = dict(meta or {})
        self.entries: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.version = 0

    def add(self, name: str, shape, rng: np.random.Generator | None = None,
            init: str = "xavier", fan: tuple[int, int] | None = None) -> torch.Tensor:
        if name in self.entries:
            raise KeyError(f"duplicate parameter {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "xavier":
            if fan is None:
                fan_in = shape[0] if shape else 1
                fan_out = shape[-1] if len(shape) > 1 else 1
            else:
                fan_in, fan_out = fan
            s = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-s, s, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = torch.tensor(data, dtype=DTYPE, requires_grad=True)
        self.entries[name] = t
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def tensors(self) -> list[torch.Tensor]:
        return list(self.entries.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.entries.items()}

    def num_values(self) -> int:
        return sum(v.numel() for v in self.entries.values())

    def bump(self) -> None:
        self.version += 1

    def sub(self, prefix: str) -> dict[str, torch.Tensor]:
        """Entries under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.entries.items() if k.startswith(p)}

    def clone(self) -> "ParamStore":
        out = ParamStore(self.kind, self.meta)
        for k, v in self.entries.items():
            out.entries[k] = v.detach().clone().requires_grad_(True)
        out.version = self.version
        return out

    def load_state(self, other: "ParamStore") -> None:
        if other.shapes() != self.shapes():
            raise DimensionError("parameter shapes differ")
        with torch.no_grad():
            for k, v in other.entries.items():
                self.entries[k].copy_(v)
        self.version = other.version

    def flat(self) -> np.ndarray:
        return np.concatenate([v.detach().numpy().ravel() for v in self.entries.values()])

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(v).all()) for v in self.entries.values())

    def equal(self, other: "ParamStore") -> bool:
        return self.shapes() == other.shapes() and all(
            torch.equal(v, other.entries[k]) for k, v in self.entries.items())

    # checkpoint I/O ----------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "kind": self.kind,
            "version": self.version,
            "meta": self.meta,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.entries.items()],
        }
        hb = json.dumps(header, sort_keys=True).encode()
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        buf.write(struct.pack("<Q", len(hb)))
        buf.write(hb)
        for v in self.entries.values():
            buf.write(v.detach().numpy().astype("<f8").tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamStore":
        if not blob.startswith(CHECKPOINT_MAGIC):
            raise ValueError("not a checkpoint file")
        off = len(CHECKPOINT_MAGIC)
        (hlen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        header = json.loads(blob[off:off + hlen])
        off += hlen
        if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {header['format_version']}")
        store = cls(header["kind"], header.get("meta"))
        store.version = header["version"]
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
            off += 8 * count
            store.entries[spec["name"]] = torch.tensor(arr.astype(np.float64), requires_grad=True)
        if off != len(blob):
            raise ValueError("trailing bytes in checkpoint")
        return store

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        return cls.from_bytes(Path(path).read_bytes())


# forward ops -------------------------------------------------------------

def _activate(x: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "identity":
        return x
    if activation == "relu":
        return torch.relu(x)
    if activation == "tanh":
        return torch.tanh(x)
    if activation == "sigmoid":
        return torch.sigmoid(x)
    raise ValueError(f"unknown activation {activation!r}")


def dense_forward(x: torch.Tensor, weights: torch.Tensor, bias: torch.Tensor,
                  activation: str = "identity") -> torch.Tensor:
    """``activation(x @ weights + bias)`` over the last axis of ``x``."""
    if x.shape[-1] != weights.shape[0] or bias.shape[-1] != weights.shape[-1]:
        raise DimensionError(
            f"dense: input {tuple(x.shape)} weights {tuple(weights.shape)} bias {tuple(bias.shape)}")
    return _activate(x @ weights + bias, activation)


def dense(x: torch.Tensor, params: Mapping[str, torch.Tensor], name: str,
          activation: str = "identity") -> torch.Tensor:
    return dense_forward(x, params[f"{name}.W"], params[f"{name}.b"], activation)


def add_dense(store: ParamStore, name: str, n_in: int, n_out: int, rng) -> None:
    store.add(f"{name}.W", (n_in, n_out), rng)
    store.add(f"{name}.b", (n_out,), init="zeros")


GRU_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def add_gru(store: ParamStore, name: str, n_in: int, n_hidden: int, rng) -> None:
    for gate in ("z", "r", "h"):
        store.add(f"{name}.W_{gate}", (n_in, n_hidden), rng)
        store.add(f"{name}.U_{gate}", (n_hidden, n_hidden), rng)
        store.add(f"{name}.b_{gate}", (n_hidden,), init="zeros")


def gru_cell(x: torch.Tensor, h_prev: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """One GRU step; ``params`` holds ``W_z, U_z, b_z, W_r, U_r, b_r, W_h, U_h, b_h``.

    h' = z * h + (1 - z) * h~,  h~ = tanh(x W_h + (r * h) U_h + b_h)

    so an update gate of 1 carries the previous state through unchanged.
    """
    if x.shape[-1] != params["W_z"].shape[0] or h_prev.shape[-1] != params["U_z"].shape[0]:
        raise DimensionError(f"gru: x {tuple(x.shape)} h {tuple(h_prev.shape)}")
    z = torch.sigmoid(x @ params["W_z"] + h_prev @ params["U_z"] + params["b_z"])
    r = torch.sigmoid(x @ params["W_r"] + h_prev @ params["U_r"] + params["b_r"])
    h_tilde = torch.tanh(x @ params["W_h"] + (r * h_prev) @ params["U_h"] + params["b_h"])
    return z * h_prev + (1.0 - z) * h_tilde


def gru_sequence(xs: torch.Tensor, h0: torch.Tensor, params: Mapping[str, torch.Tensor],
                 reverse: bool = False) -> list[torch.Tensor]:
    """Run :func:`gru_cell` along axis 1 of ``xs``; returns the hidden state after each step.

    Input projections for all steps are computed in one matmul per gate.
    """
    if xs.shape[-1] != params["W_z"].shape[0]:
        raise DimensionError(f"gru: x {tuple(xs.shape)}")
    xz = xs @ params["W_z"] + params["b_z"]
    xr = xs @ params["W_r"] + params["b_r"]
    xh = xs @ params["W_h"] + params["b_h"]
    T = xs.shape[1]
    steps = range(T - 1, -1, -1) if reverse else range(T)
    h, out = h0, [None] * T
    for t in steps:
        z = torch.sigmoid(xz[:, t] + h @ params["U_z"])
        r = torch.sigmoid(xr[:, t] + h @ params["U_r"])
        h_tilde = torch.tanh(xh[:, t] + (r * h) @ params["U_h"])
        h = z * h + (1.0 - z) * h_tilde
        out[t] = h
    return out


def softmax(logits: torch.Tensor, beta: float = 1.0, dim: int = -1,
            mask: torch.Tensor | None = None) -> torch.Tensor:
    """Max-shifted softmax of ``beta * logits``; ``mask`` (True = keep) zeroes entries exactly."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if logits.numel() == 0 or logits.shape[dim] == 0:
        raise ValueError("softmax of an empty vector")
    z = beta * logits
    if mask is not None:
        z = z.masked_fill(~mask, float("-inf"))
    z = z - z.amax(dim=dim, keepdim=True).detach()
    e = torch.exp(z)
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(logits: torch.Tensor, beta: float = 1.0, dim: int = -1,
                mask: torch.Tensor | None = None) -> torch.Tensor:
    z = beta * logits
    if mask is not None:
        z = z.masked_fill(~mask, float("-inf"))
    return z - torch.logsumexp(z, dim=dim, keepdim=True)


def softmax_cross_entropy(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``."""
    return -log_softmax(logits).gather(-1, target.long().unsqueeze(-1)).mean()


PROB_FLOOR = 1e-6


def clamp_probs(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)


def weighted_bce(probs: torch.Tensor, targets: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Sum of ``weights * BCE(probs, targets)``; probs are clamped first."""
    p = clamp_probs(probs)
    t = as_tensor(targets)
    return -(as_tensor(weights) * (t * torch.log(p) + (1.0 - t) * torch.log1p(-p))).sum()


# gradients -------------------------------------------------------------

def backward(loss: torch.Tensor, params: ParamStore | Mapping[str, torch.Tensor],
             retain_graph: bool = False) -> dict[str, torch.Tensor]:
    """d(loss)/d(param) for every entry; parameters the loss ignores get zeros."""
    if loss.numel() != 1:
        raise DimensionError("backward needs a scalar loss")
    entries = params.entries if isinstance(params, ParamStore) else dict(params)
    names = list(entries)
    grads = torch.autograd.grad(loss, [entries[n] for n in names],
                                allow_unused=True, retain_graph=retain_graph)
    out = {}
    for n, g in zip(names, grads):
        out[n] = torch.zeros_like(entries[n]) if g is None else g.detach()
    return out


def finite_difference_check(loss_fn, params: ParamStore, rng: np.random.Generator,
                            n_points: int = 100, h: float = 1e-5,
                            rtol: float = 1e-4, atol: float = 1e-6,
                            names: Iterable[str] | None = None) -> list[tuple[str, tuple, float, float]]:
    """Compare analytic gradients with central differences at random coordinates.

    Every named tensor gets at least one probe; the rest of ``n_points`` are
    spread uniformly over all coordinates. Returns the failing probes as
    ``(name, index, analytic, numeric)``.
    """
    names = list(names) if names is not None else params.names()
    loss = loss_fn(params)
    grads = backward(loss, params)
    probes: list[tuple[str, tuple]] = []
    for n in names:
        shape = tuple(params[n].shape)
        probes.append((n, tuple(int(rng.integers(s)) for s in shape)))
    sizes = np.array([params[n].numel() for n in names], dtype=float)
    while len(probes) < n_points:
        n = names[int(rng.choice(len(names), p=sizes / sizes.sum()))]
        shape = tuple(params[n].shape)
        probes.append((n, tuple(int(rng.integers(s)) for s in shape)))
    failures = []
    with torch.no_grad():
        for n, idx in probes:
            t = params[n]
            orig = t[idx].item()
            t[idx] = orig + h
            up = loss_fn(params).item()
            t[idx] = orig - h
            down = loss_fn(params).item()
            t[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = grads[n][idx].item()
            if not math.isclose(analytic, numeric, rel_tol=rtol, abs_tol=atol):
                failures.append((n, idx, analytic, numeric))
    return failures

"""Minimal differentiable networks on numpy, float64 throughout.

A :class:`Net` is a small DAG of dense layers. All weights live in one flat
:class:`ParamVector`; layer weights are reshaped views into it, so optimizers
and Polyak averaging operate on a single array.

Activation derivatives at a pre-activation of exactly zero take the
right-hand slope (1 for relu and leaky relu).
"""
from __future__ import annotations

from functools import cached_property
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

GROUPS = ("trunk", "trunc_heads", "shift_heads", "q_head", "actor")
LEAKY_SLOPE = 0.01
PARAMS_FORMAT_HEADER = "# compositeq-params v1"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class Slot:
    name: str
    group: str
    shape: tuple[int, ...]
    offset: int

    @cached_property
    def size(self) -> int:
        return int(np.prod(self.shape))


class ParamVector:
    """Flat parameter array with a layout map of named, group-labelled slots."""

    def __init__(self, layout: Sequence[Slot], values: np.ndarray | None = None):
        self.layout = tuple(layout)
        total = sum(s.size for s in self.layout)
        expected = 0
        for s in self.layout:
            if s.offset != expected:
                raise ValueError("layout slots must tile the vector contiguously")
            if s.group not in GROUPS:
                raise ValueError(f"unknown parameter group {s.group!r}")
            expected += s.size
        if values is None:
            values = np.zeros(total)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (total,):
            raise ShapeError(f"expected {total} values, got shape {values.shape}")
        self.values = values
        self._index = {s.name: s for s in self.layout}
        self._views: dict[str, np.ndarray] = {}
        self._views_base: np.ndarray | None = None

    def __len__(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        # Views are cached per backing array; rebinding ``values`` rebuilds them.
        if self._views_base is not self.values:
            self._views = {s.name: self.values[s.offset : s.offset + s.size].reshape(s.shape)
                           for s in self.layout}
            self._views_base = self.values
        return self._views[name]

    def group_mask(self, group: str) -> np.ndarray:
        mask = np.zeros(self.values.size, dtype=bool)
        for s in self.layout:
            if s.group == group:
                mask[s.offset : s.offset + s.size] = True
        return mask

    def groups(self) -> set[str]:
        return {s.group for s in self.layout}

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.values.copy())

    def dumps(self) -> str:
        lines = [PARAMS_FORMAT_HEADER]
        for s in self.layout:
            shape = "x".join(str(d) for d in s.shape)
            lines.append(f"slot {s.name} {s.group} {shape} {s.offset}")
        lines.append("values")
        lines.extend(repr(float(v)) for v in self.values)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ParamVector":
        lines = text.splitlines()
        if not lines or lines[0].strip() != PARAMS_FORMAT_HEADER:
            raise ValueError("missing or unsupported parameter file header")
        layout = []
        i = 1
        while lines[i].startswith("slot "):
            _, name, group, shape, offset = lines[i].split()
            layout.append(Slot(name, group, tuple(int(d) for d in shape.split("x")), int(offset)))
            i += 1
        if lines[i].strip() != "values":
            raise ValueError("expected 'values' section")
        values = np.array([float(v) for v in lines[i + 1 :] if v.strip()])
        return cls(layout, values)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "ParamVector":
        return cls.loads(Path(path).read_text())


def _act(kind: str, z: np.ndarray, bound: float) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "leaky_relu":
        return np.where(z >= 0.0, z, LEAKY_SLOPE * z)
    if kind == "tanh_scaled":
        return bound * np.tanh(z)
    raise ValueError(f"unknown activation {kind!r}")


def _act_grad(kind: str, z: np.ndarray, bound: float) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "relu":
        return (z >= 0.0).astype(z.dtype)
    if kind == "leaky_relu":
        return np.where(z >= 0.0, 1.0, LEAKY_SLOPE)
    if kind == "tanh_scaled":
        return bound * (1.0 - np.tanh(z) ** 2)
    raise ValueError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    source: str  # "input" or the name of an earlier layer
    out_dim: int
    activation: str = "identity"
    group: str = "trunk"
    bound: float = 1.0


@dataclass(frozen=True)
class MlpSpec:
    """Chain of dense layers: ``layer_sizes = [in, hidden..., out]``."""

    layer_sizes: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    bound: float = 1.0

    def __post_init__(self) -> None:
        if len(self.layer_sizes) < 3:
            raise ValueError("an MLP needs at least one hidden layer")
        if any(d < 1 for d in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if self.hidden_activation not in ("relu", "leaky_relu"):
            raise ValueError("hidden activation must be relu or leaky_relu")
        if self.output_activation not in ("identity", "tanh_scaled"):
            raise ValueError("output activation must be identity or tanh_scaled")
        if self.output_activation == "tanh_scaled" and self.bound <= 0:
            raise ValueError("tanh_scaled needs a positive bound")


class Net:
    """Dense-layer DAG with cached forward pass and exact reverse-mode gradients."""

    def __init__(self, input_dim: int, layers: Sequence[LayerSpec], outputs: Sequence[str],
                 rng: np.random.Generator | None = None):
        self.input_dim = input_dim
        self.layers = tuple(layers)
        self.outputs = tuple(outputs)
        dims = {"input": input_dim}
        slots, offset = [], 0
        for L in self.layers:
            if L.source not in dims:
                raise ValueError(f"layer {L.name} reads unknown source {L.source}")
            if L.name in dims:
                raise ValueError(f"duplicate layer name {L.name}")
            in_dim = dims[L.source]
            for suffix, shape in (("W", (in_dim, L.out_dim)), ("b", (L.out_dim,))):
                slots.append(Slot(f"{L.name}.{suffix}", L.group, shape, offset))
                offset += int(np.prod(shape))
            dims[L.name] = L.out_dim
        self.dims = dims
        self.params = ParamVector(slots)
        self._cache: dict | None = None
        if rng is not None:
            self.init_params(rng)

    def init_params(self, rng: np.random.Generator) -> None:
        """Uniform in ``+-1/sqrt(fan_in)`` for weights and biases."""
        for L in self.layers:
            W = self.params.view(f"{L.name}.W")
            bound = 1.0 / np.sqrt(W.shape[0])
            W[...] = rng.uniform(-bound, bound, W.shape)
            self.params.view(f"{L.name}.b")[...] = rng.uniform(-bound, bound, W.shape[1])

    def set_params(self, values: np.ndarray) -> None:
        self.params.values[...] = values

    def forward(self, x: np.ndarray) -> dict[str, np.ndarray]:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"expected input of shape (B, {self.input_dim}), got {x.shape}")
        acts = {"input": x}
        pre = {}
        for L in self.layers:
            z = acts[L.source] @ self.params.view(f"{L.name}.W") + self.params.view(f"{L.name}.b")
            pre[L.name] = z
            acts[L.name] = _act(L.activation, z, L.bound)
        self._cache = {"acts": acts, "pre": pre}
        return {name: acts[name] for name in self.outputs}

    def backward(self, cotangents: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Gradient of ``sum(cotangent * output)`` w.r.t. parameters and input.

        Uses the activations cached by the last :meth:`forward`.
        """
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        acts, pre = self._cache["acts"], self._cache["pre"]
        grad = np.zeros_like(self.params.values)
        douts = {name: np.zeros_like(a) for name, a in acts.items()}
        for name, c in cotangents.items():
            if c.shape != acts[name].shape:
                raise ShapeError(f"cotangent for {name} has shape {c.shape}, want {acts[name].shape}")
            douts[name] = douts[name] + c
        for L in reversed(self.layers):
            dz = douts[L.name] * _act_grad(L.activation, pre[L.name], L.bound)
            W = self.params.view(f"{L.name}.W")
            wslot = self.params._index[f"{L.name}.W"]
            bslot = self.params._index[f"{L.name}.b"]
            grad[wslot.offset : wslot.offset + wslot.size] = (acts[L.source].T @ dz).ravel()
            grad[bslot.offset : bslot.offset + bslot.size] = dz.sum(axis=0)
            douts[L.source] = douts[L.source] + dz @ W.T
        return grad, douts["input"]

    def layer_grad(self, layer: str, cotangent: np.ndarray) -> np.ndarray:
        """Full-size gradient touching only ``layer``'s own weights, for a cotangent on its output."""
        if self._cache is None:
            raise RuntimeError("layer_grad called before forward")
        L = next(l for l in self.layers if l.name == layer)
        dz = cotangent * _act_grad(L.activation, self._cache["pre"][layer], L.bound)
        grad = np.zeros_like(self.params.values)
        wslot = self.params._index[f"{layer}.W"]
        bslot = self.params._index[f"{layer}.b"]
        grad[wslot.offset : wslot.offset + wslot.size] = (self._cache["acts"][L.source].T @ dz).ravel()
        grad[bslot.offset : bslot.offset + bslot.size] = dz.sum(axis=0)
        return grad

    def clone(self) -> "Net":
        other = Net(self.input_dim, self.layers, self.outputs)
        other.set_params(self.params.values)
        return other


def mlp(spec: MlpSpec, group: str = "trunk", out_group: str | None = None,
        rng: np.random.Generator | None = None, output: str = "out") -> Net:
    sizes = spec.layer_sizes
    layers, src = [], "input"
    for i, d in enumerate(sizes[1:-1]):
        layers.append(LayerSpec(f"h{i + 1}", src, d, spec.hidden_activation, group))
        src = f"h{i + 1}"
    layers.append(LayerSpec(output, src, sizes[-1], spec.output_activation,
                            out_group or group, spec.bound))
    return Net(sizes[0], layers, [output], rng)


def composite_critic(state_dim: int, action_dim: int, n: int, hidden: int = 500,
                     rng: np.random.Generator | None = None) -> Net:
    """Trunk of two leaky-relu layers on ``state ++ action``; truncated heads off
    the trunk; shifted heads off one further layer; full Q off a third.
    """
    H = hidden
    layers = [
        LayerSpec("fc1", "input", H, "leaky_relu", "trunk"),
        LayerSpec("fc2", "fc1", H, "leaky_relu", "trunk"),
        LayerSpec("trunc", "fc2", n, "identity", "trunc_heads"),
        LayerSpec("mid", "fc2", H, "leaky_relu", "trunk"),
        LayerSpec("shift", "mid", n, "identity", "shift_heads"),
        LayerSpec("tail", "mid", H, "leaky_relu", "trunk"),
        LayerSpec("q", "tail", 1, "identity", "q_head"),
    ]
    return Net(state_dim + action_dim, layers, ["trunc", "shift", "q"], rng)


def plain_critic(state_dim: int, action_dim: int, hidden: Sequence[int] = (500, 500),
                 outputs: int = 1, rng: np.random.Generator | None = None,
                 output_name: str = "q") -> Net:
    spec = MlpSpec((state_dim + action_dim, *hidden, outputs), "leaky_relu", "identity")
    return mlp(spec, "trunk", "q_head", rng, output=output_name)


def actor_net(state_dim: int, action_dim: int, hidden: Sequence[int] = (400, 300),
              bound: float = 1.0, rng: np.random.Generator | None = None) -> Net:
    spec = MlpSpec((state_dim, *hidden, action_dim), "relu", "tanh_scaled", bound)
    return mlp(spec, "actor", "actor", rng, output="action")


def forward(net: Net, s: np.ndarray, a: np.ndarray) -> dict[str, np.ndarray]:
    """Critic evaluation on state-action pairs; heads are ordered by horizon index."""
    s = np.atleast_2d(s)
    a = np.atleast_2d(a)
    return net.forward(np.concatenate([s, a], axis=1))

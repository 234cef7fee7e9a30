"""Minimal reverse-mode differentiation over dense numpy operations.

A :class:`Tape` records primitive operations (affine maps, elementwise
nonlinearities, slicing/concatenation, fused linear combinations, masked
losses) as they execute; :func:`backward` replays them in exact reverse
order, accumulating gradients additively at fan-out.  All ops accept a mix
of :class:`Node` handles and plain arrays; with no nodes involved they just
compute, so the same model code serves both training and inference.

Also hosts the parameter store for the dynamics network (plus the optional
uncertainty head) and the Adam optimizer.
"""

from __future__ import annotations

import logging
import math

import numpy as np

logger = logging.getLogger("polyode")

__all__ = [
    "Tape",
    "Node",
    "backward",
    "ModelParams",
    "BoundParams",
    "ParamGrads",
    "AdamState",
    "adam_step",
    "mlp_forward",
]


class Node:
    """Handle to a value recorded on a tape."""

    __slots__ = ("value", "tape", "id")

    def __init__(self, value, tape, node_id):
        self.value = value
        self.tape = tape
        self.id = node_id

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.shape})"


class Tape:
    """Operation record; entries hold (parent nodes, per-parent grad fns)."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries: list[tuple[tuple, tuple]] = []

    def leaf(self, value) -> Node:
        node = Node(np.asarray(value, dtype=float), self, len(self.entries))
        self.entries.append(((), ()))
        return node

    def __len__(self):
        return len(self.entries)


def val(x):
    """Raw ndarray behind a Node, or x itself."""
    return x.value if isinstance(x, Node) else x


def _find_tape(*xs):
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    return None


def _emit(value, pairs):
    """Record a value whose gradient flows to the Node inputs in ``pairs``."""
    pairs = [(p, fn) for p, fn in pairs if isinstance(p, Node)]
    if not pairs:
        return value
    tape = pairs[0][0].tape
    node = Node(value, tape, len(tape.entries))
    tape.entries.append((tuple(p for p, _ in pairs), tuple(fn for _, fn in pairs)))
    return node


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(tape: Tape, loss) -> list:
    """Gradients of a scalar loss with respect to every node on the tape.

    Returns a list aligned with tape node ids (None where no gradient
    flows).  Non-parameter constants never appear on the tape and therefore
    receive no gradient slots.
    """
    if not isinstance(loss, Node) or loss.tape is not tape:
        raise ValueError("loss is not a node recorded on this tape")
    if np.size(loss.value) != 1:
        raise ValueError("loss must be a scalar node")
    grads: list = [None] * len(tape.entries)
    grads[loss.id] = np.ones_like(np.asarray(loss.value, dtype=float))
    for i in range(loss.id, -1, -1):
        g = grads[i]
        if g is None:
            continue
        parents, fns = tape.entries[i]
        for p, fn in zip(parents, fns):
            contrib = fn(g)
            if grads[p.id] is None:
                grads[p.id] = contrib
            else:
                grads[p.id] = grads[p.id] + contrib
    return grads


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b):
    va, vb = val(a), val(b)
    out = va + vb
    return _emit(
        out,
        [
            (a, lambda g: _unbroadcast(g, np.shape(va))),
            (b, lambda g: _unbroadcast(g, np.shape(vb))),
        ],
    )


def sub(a, b):
    va, vb = val(a), val(b)
    out = va - vb
    return _emit(
        out,
        [
            (a, lambda g: _unbroadcast(g, np.shape(va))),
            (b, lambda g: _unbroadcast(-g, np.shape(vb))),
        ],
    )


def mul(a, b):
    va, vb = val(a), val(b)
    out = va * vb
    return _emit(
        out,
        [
            (a, lambda g: _unbroadcast(g * vb, np.shape(va))),
            (b, lambda g: _unbroadcast(g * va, np.shape(vb))),
        ],
    )


def div(a, b):
    va, vb = val(a), val(b)
    out = va / vb
    return _emit(
        out,
        [
            (a, lambda g: _unbroadcast(g / vb, np.shape(va))),
            (b, lambda g: _unbroadcast(-g * va / (vb * vb), np.shape(vb))),
        ],
    )


def neg(a):
    va = val(a)
    return _emit(-va, [(a, lambda g: -g)])


def scale(a, s: float):
    va = val(a)
    return _emit(va * s, [(a, lambda g: g * s)])


def lincomb(terms):
    """Fused sum of coef * x over (coef, x) pairs; coefs are constants
    (floats or broadcastable arrays), never differentiated."""
    acc = None
    pairs = []
    for coef, x in terms:
        vx = val(x)
        term = coef * vx
        acc = term if acc is None else acc + term
        shape = np.shape(vx)
        pairs.append((x, lambda g, c=coef, s=shape: _unbroadcast(g * c, s)))
    return _emit(acc, pairs)


def _swap(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b):
    va, vb = val(a), val(b)
    if np.ndim(va) < 2 or np.ndim(vb) < 2:
        raise ValueError("matmul operands must be at least 2-D")
    out = va @ vb
    return _emit(
        out,
        [
            (a, lambda g: _unbroadcast(g @ _swap(vb), np.shape(va))),
            (b, lambda g: _unbroadcast(_swap(va) @ g, np.shape(vb))),
        ],
    )


def affine(x, w, b):
    """x @ w + b in one tape entry."""
    vx, vw, vb = val(x), val(w), val(b)
    out = vx @ vw + vb
    return _emit(
        out,
        [
            (x, lambda g: _unbroadcast(g @ _swap(vw), np.shape(vx))),
            (w, lambda g: _unbroadcast(_swap(vx) @ g, np.shape(vw))),
            (b, lambda g: _unbroadcast(g, np.shape(vb))),
        ],
    )


def tanh(a):
    out = np.tanh(val(a))
    return _emit(out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a):
    va = val(a)
    out = np.where(va >= 0, 1.0 / (1.0 + np.exp(-np.abs(va))), np.exp(-np.abs(va)) / (1.0 + np.exp(-np.abs(va))))
    return _emit(out, [(a, lambda g: g * out * (1.0 - out))])


def exp(a):
    out = np.exp(val(a))
    return _emit(out, [(a, lambda g: g * out)])


def log(a):
    va = val(a)
    return _emit(np.log(va), [(a, lambda g: g / va)])


def softplus(a):
    va = val(a)
    out = np.logaddexp(0.0, va)
    sig = np.where(va >= 0, 1.0 / (1.0 + np.exp(-np.abs(va))), np.exp(-np.abs(va)) / (1.0 + np.exp(-np.abs(va))))
    return _emit(out, [(a, lambda g: g * sig)])


def slice_last(a, lo: int, hi: int):
    va = val(a)
    out = va[..., lo:hi]

    def bw(g):
        z = np.zeros(np.shape(va))
        z[..., lo:hi] = g
        return z

    return _emit(out, [(a, bw)])


def concat_last(parts):
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=-1)
    pairs = []
    lo = 0
    for p, v in zip(parts, vals):
        hi = lo + v.shape[-1]
        pairs.append((p, lambda g, lo=lo, hi=hi: g[..., lo:hi]))
        lo = hi
    return _emit(out, pairs)


def reshape(a, shape):
    va = val(a)
    out = np.reshape(va, shape)
    return _emit(out, [(a, lambda g: np.reshape(g, np.shape(va)))])


def sum_all(a):
    va = val(a)
    out = np.asarray(np.sum(va))
    return _emit(out, [(a, lambda g: np.broadcast_to(np.asarray(g), np.shape(va)))])


def masked_sq_err(pred, target, mask):
    """Sum of squared masked residuals in one tape entry."""
    vp = val(pred)
    md = np.asarray(mask, dtype=float) * (vp - np.asarray(target, dtype=float))
    out = np.asarray(np.sum(md * md))
    return _emit(out, [(pred, lambda g: (2.0 * g) * md)])


# ---------------------------------------------------------------------------
# parameter store


def _glorot(rng, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _validate_chain(layers, name):
    for i in range(len(layers) - 1):
        if layers[i][0].shape[1] != layers[i + 1][0].shape[0]:
            raise ValueError(
                f"{name} layer {i}: output width {layers[i][0].shape[1]} does not "
                f"feed layer {i + 1} input width {layers[i + 1][0].shape[0]}"
            )
    for i, (w, b) in enumerate(layers):
        if b.shape != (w.shape[1],):
            raise ValueError(f"{name} layer {i}: bias shape {b.shape} != ({w.shape[1]},)")


class ModelParams:
    """Flat parameter store for the dynamics network and optional sigma head.

    ``layers`` is a list of (weight, bias) pairs with weights stored
    (in_width, out_width); the sigma head is a second independent stack.
    """

    def __init__(self, layers, sigma_layers=None):
        self.layers = [
            (np.asarray(w, dtype=float), np.asarray(b, dtype=float)) for w, b in layers
        ]
        _validate_chain(self.layers, "phi")
        if sigma_layers is not None:
            self.sigma_layers = [
                (np.asarray(w, dtype=float), np.asarray(b, dtype=float))
                for w, b in sigma_layers
            ]
            _validate_chain(self.sigma_layers, "sigma")
        else:
            self.sigma_layers = None

    @classmethod
    def init(cls, widths, sigma_widths=None, seed: int = 0) -> "ModelParams":
        """Glorot-uniform weights, zero biases, for the given width chains."""
        rng = np.random.default_rng(seed)
        layers = [
            (_glorot(rng, widths[i], widths[i + 1]), np.zeros(widths[i + 1]))
            for i in range(len(widths) - 1)
        ]
        sigma = None
        if sigma_widths is not None:
            sigma = [
                (_glorot(rng, sigma_widths[i], sigma_widths[i + 1]), np.zeros(sigma_widths[i + 1]))
                for i in range(len(sigma_widths) - 1)
            ]
        return cls(layers, sigma)

    def _all_arrays(self):
        arrs = []
        for w, b in self.layers:
            arrs.extend((w, b))
        if self.sigma_layers is not None:
            for w, b in self.sigma_layers:
                arrs.extend((w, b))
        return arrs

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self._all_arrays())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._all_arrays()])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.size != self.n_params:
            raise ValueError(f"expected {self.n_params} parameters, got {vec.size}")
        lo = 0
        for a in self._all_arrays():
            a[...] = vec[lo : lo + a.size].reshape(a.shape)
            lo += a.size

    def shapes(self) -> dict:
        d = {"layers": [list(w.shape) for w, _ in self.layers]}
        if self.sigma_layers is not None:
            d["sigma_layers"] = [list(w.shape) for w, _ in self.sigma_layers]
        return d

    @classmethod
    def from_flat(cls, vec: np.ndarray, shapes: dict) -> "ModelParams":
        """Rebuild from a flat vector and the shape chain; validates sizes."""

        def widths_to_layers(shape_list):
            return [(np.zeros((si, so)), np.zeros(so)) for si, so in shape_list]

        params = cls(
            widths_to_layers(shapes["layers"]),
            widths_to_layers(shapes["sigma_layers"]) if shapes.get("sigma_layers") else None,
        )
        params.set_flat(vec)
        return params

    def copy(self) -> "ModelParams":
        return ModelParams(
            [(w.copy(), b.copy()) for w, b in self.layers],
            None
            if self.sigma_layers is None
            else [(w.copy(), b.copy()) for w, b in self.sigma_layers],
        )

    def bind(self, tape: Tape) -> "BoundParams":
        return BoundParams(self, tape)


class BoundParams:
    """ModelParams registered as leaves on a tape for one forward/backward."""

    def __init__(self, params: ModelParams, tape: Tape):
        self.tape = tape
        self.layers = [(tape.leaf(w), tape.leaf(b)) for w, b in params.layers]
        self.sigma_layers = (
            None
            if params.sigma_layers is None
            else [(tape.leaf(w), tape.leaf(b)) for w, b in params.sigma_layers]
        )

    def grads(self, grad_list) -> "ParamGrads":
        def pull(node):
            g = grad_list[node.id]
            return np.zeros(np.shape(node.value)) if g is None else g

        layers = [(pull(w), pull(b)) for w, b in self.layers]
        sigma = (
            None
            if self.sigma_layers is None
            else [(pull(w), pull(b)) for w, b in self.sigma_layers]
        )
        return ParamGrads(layers, sigma)


class ParamGrads:
    """Gradient arrays aligned with a ModelParams structure."""

    def __init__(self, layers, sigma_layers=None):
        self.layers = layers
        self.sigma_layers = sigma_layers

    def _all_arrays(self):
        arrs = []
        for w, b in self.layers:
            arrs.extend((w, b))
        if self.sigma_layers is not None:
            for w, b in self.sigma_layers:
                arrs.extend((w, b))
        return arrs

    def flat(self) -> np.ndarray:
        return np.concatenate([np.asarray(a).ravel() for a in self._all_arrays()])

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(np.square(a))) for a in self._all_arrays())))

    def scaled(self, factor: float) -> "ParamGrads":
        layers = [(w * factor, b * factor) for w, b in self.layers]
        sigma = (
            None
            if self.sigma_layers is None
            else [(w * factor, b * factor) for w, b in self.sigma_layers]
        )
        return ParamGrads(layers, sigma)


def mlp_forward(params, x, tape: Tape = None, head: str = "phi"):
    """Alternating affine + tanh layers with a final affine layer.

    ``params`` is a ModelParams (plain numpy forward) or BoundParams
    (records to its tape); passing ``tape`` with a ModelParams binds it
    first.  ``head`` selects the dynamics stack or the sigma stack.
    """
    if tape is not None and isinstance(params, ModelParams):
        params = params.bind(tape)
    layers = params.layers if head == "phi" else params.sigma_layers
    if layers is None:
        raise ValueError("model has no sigma head")
    squeeze = np.ndim(val(x)) == 1
    h = reshape(x, (1, -1)) if squeeze else x
    width = np.shape(val(h))[-1]
    expect = np.shape(val(layers[0][0]))[0]
    if width != expect:
        raise ValueError(f"layer 0: input width {width} != expected {expect}")
    for i, (w, b) in enumerate(layers):
        h = affine(h, w, b)
        if i < len(layers) - 1:
            h = tanh(h)
    return reshape(h, (-1,)) if squeeze else h


# ---------------------------------------------------------------------------
# Adam


class AdamState:
    """First/second moment vectors, step counter, and hyperparameters."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = None
        self.v = None


def adam_step(params: ModelParams, grads, state: AdamState) -> ModelParams:
    """One Adam update with bias correction (in place on ``params``).

    Non-finite gradients skip the update and log a warning instead of
    corrupting the moments.
    """
    g = grads.flat() if hasattr(grads, "flat") else np.asarray(grads, dtype=float)
    if not np.all(np.isfinite(g)):
        logger.warning("adam: skipping update, non-finite gradient")
        return params
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params.set_flat(params.flat() - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return params

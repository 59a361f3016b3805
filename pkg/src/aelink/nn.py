"""Feed-forward kernel with exact reverse-mode gradients.

Only the layers needed by the transceiver networks exist here: dense
(affine) layers with ReLU/linear/softmax outputs, average-power
normalization, the fixed channel multiply, additive noise and the two
ways receiver CSI can enter the decoder (raw tap concatenation, or a fixed
matched filter ``[H^H y, H^H H]`` at a fixed gain).  Everything is computed in float64 and operates on
batches of row vectors.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np

from aelink.channel import ChannelRealization, apply_channel, apply_channel_adjoint
from aelink.errors import ContractError, DegenerateInputError

CHECKPOINT_FORMAT = "aelink-params"
CHECKPOINT_VERSION = 1

PROB_FLOOR = 1e-12
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

LAYER_KINDS = (
    "input",
    "dense_relu",
    "dense_linear",
    "normalize",
    "channel",
    "noise",
    "csi",
    "matched",
    "dense_softmax",
)
CSI_KINDS = ("csi", "matched")
DENSE_KINDS = ("dense_relu", "dense_linear", "dense_softmax")


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ContractError("weights must be 2-D and bias 1-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ContractError(
                f"bias length {self.bias.shape[0]} != out width {self.weights.shape[0]}"
            )
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ContractError("layer parameters must be finite")

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy())

    @classmethod
    def unchecked(cls, weights, bias) -> "DenseLayer":
        # gradient containers and oracle copies skip validation so that a
        # diverging run can still be inspected
        obj = cls.__new__(cls)
        obj.weights = weights
        obj.bias = bias
        return obj


@dataclass
class NetworkParameters:
    """Ordered dense-layer parameters. Also used to hold gradients."""

    layers: list[DenseLayer] = field(default_factory=list)

    def __iter__(self) -> Iterator[DenseLayer]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i) -> DenseLayer:
        return self.layers[i]

    def copy(self) -> "NetworkParameters":
        return NetworkParameters([layer.copy() for layer in self.layers])

    def zeros_like(self) -> "NetworkParameters":
        return NetworkParameters(
            [DenseLayer(np.zeros_like(l.weights), np.zeros_like(l.bias)) for l in self.layers]
        )

    @property
    def size(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers)

    def arrays(self) -> list[np.ndarray]:
        """Flat list [W0, b0, W1, b1, ...] of the underlying arrays (not copies)."""
        out = []
        for layer in self.layers:
            out.extend((layer.weights, layer.bias))
        return out

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def same_shape(self, other: "NetworkParameters") -> bool:
        if len(self) != len(other):
            return False
        return all(a.shape == b.shape for a, b in zip(self.arrays(), other.arrays()))


GradientSet = NetworkParameters


def glorot_layer(in_width: int, out_width: int, rng: np.random.Generator) -> DenseLayer:
    limit = np.sqrt(6.0 / (in_width + out_width))
    weights = rng.uniform(-limit, limit, size=(out_width, in_width))
    return DenseLayer(weights, np.zeros(out_width))


# ---------------------------------------------------------------------------
# Elementary layers
# ---------------------------------------------------------------------------


def affine_forward(params: DenseLayer, x) -> np.ndarray:
    """Return ``W @ x + b`` for a single vector or each row of a batch."""
    x = np.asarray(x, dtype=params.weights.dtype)
    if x.shape[-1] != params.in_width:
        raise ContractError(f"input width {x.shape[-1]} != layer in_width {params.in_width}")
    return x @ params.weights.T + params.bias


def affine_backward(params: DenseLayer, x: np.ndarray, grad_out: np.ndarray):
    """Gradients of a batched affine layer.

    Returns ``(grad_x, DenseLayer(grad_W, grad_b))``; batch gradients are
    summed over rows.
    """
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(grad_out)
    grad_w = g2.T @ x2
    grad_b = g2.sum(axis=0)
    grad_x = grad_out @ params.weights
    return grad_x, DenseLayer.unchecked(grad_w, grad_b)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(pre_activation: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # subgradient at exactly 0 is 0
    return np.where(pre_activation > 0, grad_out, 0.0)


def softmax(z, axis: int = -1) -> np.ndarray:
    z = np.asarray(z)
    if z.size == 0:
        raise ContractError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ContractError("softmax input must be finite")
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(p, s, floor: float = PROB_FLOOR):
    """Mean categorical cross-entropy ``-log p[s]``.

    Parameters
    ----------
    p : array, shape (M,) or (B, M)
        Probability vector(s).
    s : int or int array of shape (B,)
        Target message index per row.
    floor : float
        Probabilities below this are clamped before taking the log.

    Returns
    -------
    loss : float
        Mean loss over the rows.
    saturated : bool
        True if any target probability hit the floor.
    """
    p2 = np.atleast_2d(np.asarray(p))
    s_arr = np.atleast_1d(np.asarray(s))
    if s_arr.shape[0] != p2.shape[0]:
        raise ContractError("one target index per probability row is required")
    if np.any(s_arr < 0) or np.any(s_arr >= p2.shape[1]):
        raise ContractError(f"message index out of range for M = {p2.shape[1]}")
    target = p2[np.arange(p2.shape[0]), s_arr]
    saturated = bool(np.any(target < floor))
    losses = -np.log(np.maximum(target, floor))
    return float(losses.mean()), saturated


def power_normalize(r) -> np.ndarray:
    """Scale each row to squared norm equal to its length, keeping direction."""
    r = np.asarray(r, dtype=np.float64)
    norms = np.linalg.norm(r, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateInputError("cannot normalize the zero vector")
    return np.sqrt(r.shape[-1]) * r / norms


def power_normalize_backward(r: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # J = sqrt(N) * (I/|r| - r r^T/|r|^3), symmetric
    width = r.shape[-1]
    norms = np.linalg.norm(r, axis=-1, keepdims=True)
    proj = np.sum(r * grad_out, axis=-1, keepdims=True)
    return np.sqrt(width) * (grad_out / norms - r * proj / norms**3)


def awgn_layer(x, beta: float, rng: Optional[np.random.Generator] = None, noise=None):
    """Add Gaussian noise of variance ``beta`` per real dimension.

    Either ``rng`` draws fresh noise or a fixed ``noise`` array is added.
    Returns ``(y, noise)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if beta < 0:
        raise ContractError(f"noise variance must be non-negative, got {beta}")
    if noise is None:
        if beta == 0:
            noise = np.zeros_like(x)
        else:
            if rng is None:
                raise ContractError("an rng is required to draw noise")
            noise = np.sqrt(beta) * rng.standard_normal(x.shape)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != x.shape:
        raise ContractError("noise shape must match the signal")
    return x + noise, noise


def awgn_backward(grad_out: np.ndarray) -> np.ndarray:
    """Noise is a constant of the pass: identity Jacobian."""
    return grad_out


def sgd_update(theta: NetworkParameters, grads: GradientSet, eta: float) -> NetworkParameters:
    if not theta.same_shape(grads):
        raise ContractError("gradient shapes do not match the parameters")
    return NetworkParameters(
        [
            DenseLayer(p.weights - eta * g.weights, p.bias - eta * g.bias)
            for p, g in zip(theta, grads)
        ]
    )


# ---------------------------------------------------------------------------
# Whole-network forward/backward
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if self.width < 1:
            raise ContractError("layer width must be positive")


@dataclass(frozen=True)
class Architecture:
    """Ordered layer layout of a transceiver network.

    ``heads`` softmax outputs of width ``num_messages`` each share the final
    dense layer (its rows are split into per-head blocks).
    """

    layers: tuple
    num_messages: int
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        kinds = [l.kind for l in self.layers]
        if not kinds or kinds[0] != "input":
            raise ContractError("architecture must start with an input layer")
        if kinds[-1] != "dense_softmax":
            raise ContractError("architecture must end with a softmax layer")
        if kinds.count("normalize") > 1:
            raise ContractError("at most one normalization layer is allowed")
        if "channel" in kinds:
            i = kinds.index("channel")
            if i + 1 >= len(kinds) or kinds[i + 1] != "noise":
                raise ContractError("the channel multiply must immediately precede noise")
        if self.layers[0].width != self.heads * self.num_messages:
            raise ContractError("input width must be heads * num_messages")
        if self.layers[-1].width != self.heads * self.num_messages:
            raise ContractError("softmax width must be heads * num_messages")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.kind in ("normalize", "channel", "noise") and cur.width != prev.width:
                raise ContractError(f"{cur.kind} layer must preserve width")
            if cur.kind in CSI_KINDS and cur.width <= prev.width:
                raise ContractError(f"{cur.kind} layer must widen its input")

    def dense_shapes(self) -> list[tuple[int, int]]:
        """(out_width, in_width) of each dense layer in order."""
        shapes = []
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.kind in DENSE_KINDS:
                shapes.append((cur.width, prev.width))
        return shapes

    @property
    def csi_width(self) -> int:
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.kind in CSI_KINDS:
                return cur.width - prev.width
        return 0

    @property
    def signal_width(self) -> int:
        for layer in self.layers:
            if layer.kind == "normalize":
                return layer.width
        raise ContractError("architecture has no normalization layer")

    def to_dict(self) -> dict:
        return {
            "layers": [[l.kind, l.width] for l in self.layers],
            "num_messages": self.num_messages,
            "heads": self.heads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(
            tuple(LayerSpec(k, int(w)) for k, w in d["layers"]),
            int(d["num_messages"]),
            int(d.get("heads", 1)),
        )


def init_parameters(arch: Architecture, rng: np.random.Generator) -> NetworkParameters:
    return NetworkParameters([glorot_layer(i, o, rng) for o, i in arch.dense_shapes()])


class Network:
    """Architecture plus parameters; mutated only through :meth:`step`."""

    def __init__(self, arch: Architecture, params: NetworkParameters):
        shapes = [l.weights.shape for l in params]
        if shapes != arch.dense_shapes():
            raise ContractError(f"parameter shapes {shapes} do not match {arch.dense_shapes()}")
        self.arch = arch
        self.params = params
        self.version = 0

    def step(self, grads: GradientSet, eta: float) -> None:
        self.params = sgd_update(self.params, grads, eta)
        self.version += 1


@dataclass
class ForwardTrace:
    """Activations of one forward pass and the stochastic draws it used."""

    outputs: list  # one entry per architecture layer
    pre_activations: dict  # layer index -> pre-activation of dense layers
    messages: np.ndarray  # (B, heads)
    channel: Optional[ChannelRealization]
    noise: Optional[np.ndarray]
    network_id: int
    version: int

    @property
    def probabilities(self) -> np.ndarray:
        """Softmax outputs with shape (B, heads, M)."""
        return self.outputs[-1]


def one_hot_rows(messages: np.ndarray, num_messages: int) -> np.ndarray:
    """(B, heads) message indices -> (B, heads * M) concatenated one-hot rows."""
    b, heads = messages.shape
    out = np.zeros((b, heads, num_messages))
    out[np.arange(b)[:, None], np.arange(heads)[None, :], messages] = 1.0
    return out.reshape(b, heads * num_messages)


def _as_message_rows(messages, heads: int, num_messages: int) -> np.ndarray:
    m = np.asarray(messages)
    if not np.issubdtype(m.dtype, np.integer):
        raise ContractError("messages must be integers")
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1) if heads == 1 else m.reshape(1, -1)
    if m.ndim != 2 or m.shape[1] != heads:
        raise ContractError(f"expected messages of shape (B, {heads})")
    if np.any(m < 0) or np.any(m >= num_messages):
        raise ContractError(f"message index out of range for M = {num_messages}")
    return m.astype(np.int64)


def matched_scale(m_r: int) -> float:
    """Fixed gain on ``[H^H y, H^H H]``.

    With unit Rayleigh taps the diagonal of ``H^H H`` has mean square
    ``m_r * (m_r + 1)``; dividing by its root keeps the decoder input near
    unit scale, which is what the Glorot initialization assumes.
    """
    return 1.0 / np.sqrt(m_r * (m_r + 1.0))


def _propagate(network, r, start, stop, channel, beta, rng, noise, dtype, outputs, pre):
    """Run architecture layers ``start..stop-1`` on ``r``; returns (r, noise used)."""
    arch = network.arch
    batch = r.shape[0]
    used_noise = None
    dense_before = sum(1 for l in arch.layers[:start] if l.kind in DENSE_KINDS)
    params = iter(network.params.layers[dense_before:])
    for idx in range(start, stop):
        layer = arch.layers[idx]
        if layer.kind in DENSE_KINDS:
            p = next(params)
            if dtype != np.float64:
                p = DenseLayer.unchecked(p.weights.astype(dtype), p.bias.astype(dtype))
            z = affine_forward(p, r)
            pre[idx] = z
            if layer.kind == "dense_relu":
                r = np.maximum(z, 0)
            elif layer.kind == "dense_linear":
                r = z
            else:
                r = softmax(z.reshape(batch, arch.heads, arch.num_messages))
        elif layer.kind == "normalize":
            norms = np.sqrt(np.sum(r * r, axis=-1, keepdims=True))
            if np.any(norms == 0):
                raise DegenerateInputError("cannot normalize the zero vector")
            r = np.sqrt(dtype(layer.width)) * r / norms
        elif layer.kind == "channel":
            if channel is None:
                raise ContractError("this architecture needs a channel realization")
            if channel.batch not in (1, batch):
                raise ContractError("one channel realization per message is required")
            r = apply_channel(channel, r)
        elif layer.kind == "noise":
            if noise is not None:
                noise = np.asarray(noise)
                if noise.shape != r.shape:
                    raise ContractError("frozen noise shape does not match the signal")
                used_noise = noise
            elif beta > 0:
                if rng is None:
                    raise ContractError("an rng is required to draw noise")
                used_noise = np.sqrt(beta) * rng.standard_normal(r.shape)
            elif beta < 0:
                raise ContractError(f"noise variance must be non-negative, got {beta}")
            else:
                used_noise = np.zeros(r.shape)
            r = r + used_noise.astype(dtype)
        elif layer.kind == "csi":
            if channel is None:
                raise ContractError("receiver CSI requested but no channel was given")
            csi = channel.as_real()
            if csi.shape[0] == 1 and batch > 1:
                csi = np.repeat(csi, batch, axis=0)
            if csi.shape[0] != batch or r.shape[-1] + csi.shape[-1] != layer.width:
                raise ContractError("CSI width does not match the architecture")
            r = np.concatenate([r, csi.astype(dtype)], axis=-1)
        elif layer.kind == "matched":
            if channel is None:
                raise ContractError("matched-filter front end needs the channel")
            gram = channel.gram_real()
            if gram.shape[0] == 1 and batch > 1:
                gram = np.repeat(gram, batch, axis=0)
            if gram.shape[0] != batch or r.shape[-1] + gram.shape[-1] != layer.width:
                raise ContractError("matched-filter width does not match the architecture")
            r = matched_scale(channel.m_r) * np.concatenate(
                [apply_channel_adjoint(channel, r), gram.astype(dtype)], axis=-1)
        outputs.append(r)
    return r, used_noise


def _layer_index(arch: Architecture, kind: str) -> int:
    for i, layer in enumerate(arch.layers):
        if layer.kind == kind:
            return i
    raise ContractError(f"architecture has no {kind} layer")


def forward(
    network: Network,
    messages,
    channel: Optional[ChannelRealization] = None,
    beta: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
    dtype=np.float64,
):
    """Run the full transceiver chain.

    Parameters
    ----------
    network : Network
    messages : int array, shape (B,) / (B, heads) or scalar
    channel : ChannelRealization, optional
        One realization per batch row.  Required when the architecture has
        a channel layer.
    beta : float
        Noise variance per real dimension, used when ``noise`` is None.
    rng : numpy Generator, optional
        Source for the noise draw.
    noise : array, optional
        Fixed noise to add instead of a fresh draw.
    dtype : numpy dtype
        Working precision; float64 for everything except oracle checks.

    Returns
    -------
    probs : ndarray, shape (B, heads, M)
    trace : ForwardTrace
    """
    arch = network.arch
    msgs = _as_message_rows(messages, arch.heads, arch.num_messages)
    r = one_hot_rows(msgs, arch.num_messages).astype(dtype)
    outputs = [r]
    pre = {}
    r, used_noise = _propagate(
        network, r, 1, len(arch.layers), channel, beta, rng, noise, dtype, outputs, pre
    )
    trace = ForwardTrace(
        outputs=outputs,
        pre_activations=pre,
        messages=msgs,
        channel=channel,
        noise=used_noise,
        network_id=id(network),
        version=network.version,
    )
    return r, trace


def encode(network: Network, messages) -> np.ndarray:
    """Transmitter half: messages -> power-normalized signal rows."""
    arch = network.arch
    msgs = _as_message_rows(messages, arch.heads, arch.num_messages)
    r = one_hot_rows(msgs, arch.num_messages)
    stop = _layer_index(arch, "normalize") + 1
    r, _ = _propagate(network, r, 1, stop, None, 0.0, None, None, np.float64, [], {})
    return r


def receive(network: Network, y, channel: Optional[ChannelRealization] = None) -> np.ndarray:
    """Receiver half: received signal rows (after noise) -> (B, heads, M) probabilities."""
    arch = network.arch
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    start = _layer_index(arch, "noise") + 1
    if y.shape[-1] != arch.layers[start - 1].width:
        raise ContractError(
            f"received width {y.shape[-1]} != expected {arch.layers[start - 1].width}"
        )
    has_csi = arch.layers[start].kind in CSI_KINDS
    if has_csi and channel is None:
        raise ContractError("this receiver was built with genie CSI; pass the channel")
    if not has_csi and channel is not None:
        raise ContractError("this receiver takes no CSI input")
    r, _ = _propagate(network, y, start, len(arch.layers), channel, 0.0, None, None,
                      np.float64, [], {})
    return r


def head_losses(probs: np.ndarray, messages: np.ndarray, floor: float = PROB_FLOOR):
    """Mean cross-entropy of each head; returns (losses, saturated)."""
    losses = []
    saturated = False
    for h in range(probs.shape[1]):
        loss, sat = cross_entropy(probs[:, h, :], messages[:, h], floor)
        losses.append(loss)
        saturated = saturated or sat
    return np.array(losses), saturated


def backward(
    network: Network,
    trace: ForwardTrace,
    messages=None,
    head_weights: Optional[Sequence[float]] = None,
    scale: float = 1.0,
) -> GradientSet:
    """Exact gradient of the (weighted, batch-mean) cross-entropy loss.

    The sampled channel taps and noise recorded in ``trace`` are treated as
    constants.  ``head_weights`` default to 1 for a single head.
    """
    arch = network.arch
    if trace.network_id != id(network) or trace.version != network.version:
        raise ContractError("trace was produced by a different or since-updated network")
    msgs = trace.messages
    if messages is not None:
        given = _as_message_rows(messages, arch.heads, arch.num_messages)
        if given.shape != msgs.shape or np.any(given != msgs):
            raise ContractError("messages do not match the forward trace")
    if head_weights is None:
        if arch.heads != 1:
            raise ContractError("head_weights are required for multi-head networks")
        head_weights = [1.0]
    w = np.asarray(head_weights, dtype=np.float64)
    if w.shape != (arch.heads,):
        raise ContractError(f"expected {arch.heads} head weights")

    batch = msgs.shape[0]
    probs = trace.outputs[-1]
    targets = one_hot_rows(msgs, arch.num_messages).reshape(probs.shape)
    grad = (scale / batch) * w[None, :, None] * (probs - targets)
    grad = grad.reshape(batch, arch.heads * arch.num_messages)

    grads = []
    param_idx = len(network.params) - 1
    for idx in range(len(arch.layers) - 1, 0, -1):
        layer = arch.layers[idx]
        below = trace.outputs[idx - 1]
        if layer.kind in DENSE_KINDS:
            if layer.kind == "dense_relu":
                grad = relu_backward(trace.pre_activations[idx], grad)
            grad, g = affine_backward(network.params[param_idx], below, grad)
            grads.append(g)
            param_idx -= 1
        elif layer.kind == "normalize":
            grad = power_normalize_backward(below, grad)
        elif layer.kind == "channel":
            grad = apply_channel_adjoint(trace.channel, grad)
        elif layer.kind == "noise":
            grad = awgn_backward(grad)
        elif layer.kind == "csi":
            grad = grad[:, : below.shape[-1]]
        elif layer.kind == "matched":
            grad = matched_scale(trace.channel.m_r) * apply_channel(
                trace.channel, grad[:, : below.shape[-1]])
    grads.reverse()
    return NetworkParameters(grads)


def batch_loss(network: Network, trace: ForwardTrace, head_weights=None) -> float:
    w = np.ones(1) if head_weights is None else np.asarray(head_weights, dtype=np.float64)
    losses, _ = head_losses(trace.outputs[-1], trace.messages)
    return float(np.dot(w, losses))


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


@dataclass
class GradcheckResult:
    max_rel_error: float
    checked: int
    excluded: int
    worst_index: int


def _frozen_loss(network, params, messages, channel, noise, head_weights, dtype):
    probe = Network(network.arch, params)
    probs, trace = forward(probe, messages, channel, noise=noise, dtype=dtype)
    w = np.ones(1) if head_weights is None else np.asarray(head_weights)
    total = 0.0
    for h in range(probs.shape[1]):
        target = probs[np.arange(probs.shape[0]), h, trace.messages[:, h]]
        total = total + w[h] * np.mean(-np.log(target))
    masks = [trace.pre_activations[i] > 0 for i in sorted(trace.pre_activations)]
    return total, masks


def finite_diff_gradcheck(
    network: Network,
    messages,
    channel: Optional[ChannelRealization],
    noise: Optional[np.ndarray],
    epsilon: float = 1e-5,
    head_weights=None,
    oracle_dtype=np.longdouble,
) -> GradcheckResult:
    """Compare analytic gradients with central differences.

    The channel and noise draws are frozen and reused for every perturbed
    evaluation.  The difference quotients are evaluated in ``oracle_dtype``
    (extended precision by default) so that round-off in the loss does not
    swamp small gradient entries; the analytic side stays in float64.
    Parameters whose perturbation flips any ReLU mask sit on a kink and are
    excluded from the maximum.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ContractError("epsilon must lie in [1e-7, 1e-3]")
    _, trace = forward(network, messages, channel, noise=noise)
    analytic = backward(network, trace, head_weights=head_weights).flat()

    base = network.params
    oracle = NetworkParameters(
        [
            DenseLayer.unchecked(
                l.weights.astype(oracle_dtype), l.bias.astype(oracle_dtype)
            )
            for l in base
        ]
    )
    _, base_masks = _frozen_loss(network, oracle, messages, channel, noise, head_weights, oracle_dtype)
    arrays = oracle.arrays()
    worst = 0.0
    worst_idx = -1
    excluded = 0
    flat_idx = 0
    for arr in arrays:
        view = arr.reshape(-1)
        for j in range(view.size):
            orig = view[j]
            view[j] = orig + epsilon
            lp, mp = _frozen_loss(network, oracle, messages, channel, noise, head_weights, oracle_dtype)
            view[j] = orig - epsilon
            lm, mm = _frozen_loss(network, oracle, messages, channel, noise, head_weights, oracle_dtype)
            view[j] = orig
            kink = any(
                np.any(a != b) or np.any(a != c) for a, b, c in zip(base_masks, mp, mm)
            )
            if kink:
                excluded += 1
            else:
                numeric = float((lp - lm) / (2 * epsilon))
                a = analytic[flat_idx]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if rel > worst:
                    worst, worst_idx = rel, flat_idx
            flat_idx += 1
    return GradcheckResult(worst, flat_idx - excluded, excluded, worst_idx)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_parameters(path, params: NetworkParameters, arch: Optional[Architecture] = None,
                    metadata: Optional[dict] = None) -> None:
    """Write parameters to an ``.npz`` container with a JSON header.

    Arrays are stored as raw float64 in row-major order, so a roundtrip is
    bit-exact.  Zip member timestamps are pinned so that equal parameters
    give byte-identical files.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "widths": [[l.out_width, l.in_width] for l in params],
        "architecture": arch.to_dict() if arch is not None else None,
        "metadata": metadata or {},
    }
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for i, layer in enumerate(params):
        arrays[f"W{i}"] = np.ascontiguousarray(layer.weights)
        arrays[f"b{i}"] = np.ascontiguousarray(layer.bias)
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH)
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, arr, allow_pickle=False)


def load_parameters(path):
    """Inverse of :func:`save_parameters`; returns (params, arch, metadata)."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ContractError(f"{path}: not a parameter checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ContractError(f"{path}: unsupported checkpoint version {header.get('version')}")
        layers = []
        for i, (out_w, in_w) in enumerate(header["widths"]):
            layer = DenseLayer(data[f"W{i}"], data[f"b{i}"])
            if layer.weights.shape != (out_w, in_w):
                raise ContractError(f"{path}: layer {i} shape mismatch")
            layers.append(layer)
    arch = Architecture.from_dict(header["architecture"]) if header["architecture"] else None
    return NetworkParameters(layers), arch, header["metadata"]

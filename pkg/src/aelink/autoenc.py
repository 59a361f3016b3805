"""SISO and 2x2 MIMO channel autoencoders: construction, training, inference."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from aelink import nn
from aelink.channel import ChannelRealization, draw_channel, ebn0_to_beta
from aelink.errors import ContractError, TrainingDiverged
from aelink.nn import Architecture, LayerSpec, Network, NetworkParameters

log = logging.getLogger(__name__)

CSI_MODES = ("genie", "none")
RX_FRONTENDS = ("matched", "concat")
FADING_MODES = ("block", "per-use")
CHANNEL_MODES = ("rayleigh", "awgn-only")


@dataclass(frozen=True)
class SystemConfig:
    """An (n, k) system: k bits per message over n complex channel uses.

    For MIMO, ``k`` bits are carried per transmit antenna (one message per
    stream).
    """

    n: int
    k: int
    m_t: int = 1
    m_r: int = 1

    def __post_init__(self):
        if self.n < 1 or self.k < 1:
            raise ContractError("n and k must be positive")
        if self.m_t < 1 or self.m_r < 1:
            raise ContractError("antenna counts must be at least 1")

    @property
    def M(self) -> int:
        return 2**self.k

    @property
    def rate(self) -> float:
        return self.k / self.n

    @property
    def bits_per_message(self) -> int:
        return self.k * self.m_t

    @property
    def bits_per_use(self) -> float:
        return self.m_t * self.k / self.n

    @property
    def signal_width(self) -> int:
        return 2 * self.n * self.m_t

    @property
    def energy_per_use(self) -> float:
        # unit power per real dimension on every antenna
        return 2.0 * self.m_t

    def beta(self, ebn0_db: float) -> float:
        return ebn0_to_beta(ebn0_db, self.bits_per_use, self.energy_per_use)


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 0.01
    train_ebn0_db: float = 6.0
    iterations: int = 10_000
    seed: int = 0
    csi_rx: str = "genie"
    rx_frontend: str = "matched"
    fading: str = "block"
    channel: str = "rayleigh"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("batch size must be at least 1")
        if not self.learning_rate > 0:
            raise ContractError("learning rate must be positive")
        if self.iterations < 1:
            raise ContractError("iterations must be at least 1")
        if self.csi_rx not in CSI_MODES:
            raise ContractError(f"csi_rx must be one of {CSI_MODES}")
        if self.rx_frontend not in RX_FRONTENDS:
            raise ContractError(f"rx_frontend must be one of {RX_FRONTENDS}")
        if self.fading not in FADING_MODES:
            raise ContractError(f"fading must be one of {FADING_MODES}")
        if self.channel not in CHANNEL_MODES:
            raise ContractError(f"channel must be one of {CHANNEL_MODES}")


@dataclass
class MimoTrainConfig(TrainConfig):
    # the 2x2 receiver needs a longer, faster schedule than SISO to get
    # below its error floor
    batch_size: int = 512
    learning_rate: float = 0.1
    train_ebn0_db: float = 15.0
    iterations: int = 30_000
    gamma: float = 0.5

    def __post_init__(self):
        super().__post_init__()
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError("gamma must lie in [0, 1]")


@dataclass
class TrainedModel:
    system: SystemConfig
    arch: Architecture
    params: NetworkParameters
    train: TrainConfig
    losses: list = field(default_factory=list)
    iterations_done: int = 0

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1] if self.losses else None

    @property
    def csi_rx(self) -> str:
        return "genie" if self.arch.csi_width else "none"

    @property
    def is_mimo(self) -> bool:
        return self.system.m_t > 1

    def network(self) -> Network:
        return Network(self.arch, self.params)


def one_hot(s, M: int) -> np.ndarray:
    s_arr = np.asarray(s)
    if np.any(s_arr < 0) or np.any(s_arr >= M):
        raise ContractError(f"message index out of range for M = {M}")
    out = np.zeros(s_arr.shape + (M,))
    np.put_along_axis(out, s_arr[..., None].astype(np.int64), 1.0, axis=-1)
    return out


def messages_to_bits(s, k: int) -> np.ndarray:
    """Big-endian k-bit expansion; works elementwise on arrays."""
    s_arr = np.asarray(s, dtype=np.int64)
    if np.any(s_arr < 0) or np.any(s_arr >= 2**k):
        raise ContractError(f"message out of range for k = {k}")
    shifts = np.arange(k - 1, -1, -1)
    return ((s_arr[..., None] >> shifts) & 1).astype(np.int8)


def bits_to_message(bits, k: Optional[int] = None) -> np.ndarray:
    b = np.asarray(bits, dtype=np.int64)
    k = b.shape[-1] if k is None else k
    if b.shape[-1] != k or np.any((b != 0) & (b != 1)):
        raise ContractError(f"expected {k} binary digits")
    weights = 1 << np.arange(k - 1, -1, -1)
    out = b @ weights
    return out


def weighted_loss(loss_1: float, loss_2: float, gamma: float) -> float:
    """gamma * L1 + (1 - gamma) * L2."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError("gamma must lie in [0, 1]")
    return gamma * loss_1 + (1.0 - gamma) * loss_2


def build_architecture(system: SystemConfig, csi_rx: str = "genie", fading: str = "block",
                       hidden: Optional[int] = None, rx_frontend: str = "matched") -> Architecture:
    """Layer layout for a SISO (m=1) or MIMO (m=2) autoencoder.

    Hidden layers are 2M wide for SISO and 4M for MIMO; the transmitted
    signal is 2n (SISO) or 4n (MIMO) real dimensions.  With genie CSI the
    decoder sees either ``[y, H]`` (``concat``) or ``[H^H y, H^H H]``
    (``matched``).
    """
    if system.m_t != system.m_r:
        raise ContractError("only square antenna configurations are supported")
    M = system.M
    heads = system.m_t
    if hidden is None:
        hidden = 2 * M if heads == 1 else 4 * M
    sig = system.signal_width
    layers = [
        LayerSpec("input", heads * M),
        LayerSpec("dense_relu", hidden),
        LayerSpec("dense_linear", sig),
        LayerSpec("normalize", sig),
        LayerSpec("channel", sig),
        LayerSpec("noise", sig),
    ]
    if csi_rx == "genie":
        uses = 1 if fading == "block" else system.n
        if rx_frontend == "concat":
            layers.append(LayerSpec("csi", sig + 2 * uses * system.m_r * system.m_t))
        elif rx_frontend == "matched":
            layers.append(LayerSpec("matched", sig + 2 * uses * system.m_t * system.m_t))
        else:
            raise ContractError(f"rx_frontend must be one of {RX_FRONTENDS}")
    elif csi_rx != "none":
        raise ContractError(f"csi_rx must be one of {CSI_MODES}")
    layers += [LayerSpec("dense_relu", hidden), LayerSpec("dense_softmax", heads * M)]
    return Architecture(tuple(layers), M, heads)


def _build(system: SystemConfig, train: TrainConfig) -> TrainedModel:
    arch = build_architecture(system, train.csi_rx, train.fading,
                              rx_frontend=train.rx_frontend)
    rng = np.random.default_rng([train.seed, 0])
    params = nn.init_parameters(arch, rng)
    return TrainedModel(system, arch, params, train)


def build_siso_autoencoder(system: SystemConfig, train: Optional[TrainConfig] = None) -> TrainedModel:
    train = TrainConfig() if train is None else train
    if system.m_t != 1 or system.m_r != 1:
        raise ContractError("a SISO autoencoder needs m_t = m_r = 1")
    return _build(system, train)


def build_mimo_autoencoder(system: SystemConfig,
                           train: Optional[MimoTrainConfig] = None) -> TrainedModel:
    train = MimoTrainConfig() if train is None else train
    if system.m_t != 2 or system.m_r != 2:
        raise ContractError("a MIMO autoencoder needs m_t = m_r = 2")
    return _build(system, train)


def transmit(model: TrainedModel, s) -> np.ndarray:
    """Encoder output for message(s).

    SISO: ``s`` is an int or an int array of shape (B,).  MIMO: a pair
    ``(s1, s2)`` or an array of shape (B, 2).  Returns a (B, width) array,
    or a 1-D signal for a single message.
    """
    msgs = np.asarray(s)
    single = msgs.ndim == 0 or (model.is_mimo and msgs.ndim == 1)
    x = nn.encode(model.network(), msgs)
    return x[0] if single else x


def decode(model: TrainedModel, y, csi: Optional[ChannelRealization] = None):
    """Most likely message(s) and the softmax output(s) for received signal(s).

    Returns ``(s_hat, probs)``; for a single received vector ``s_hat`` is an
    int (SISO) or a length-2 array (MIMO), and ``probs`` drops its batch axis.
    Ties go to the lowest index.
    """
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    if model.arch.csi_width and csi is None:
        raise ContractError("model was trained with genie CSI; csi is required")
    if not model.arch.csi_width and csi is not None:
        raise ContractError("model was trained without receiver CSI")
    probs = nn.receive(model.network(), y, csi)
    s_hat = np.argmax(probs, axis=-1)
    if not model.is_mimo:
        s_hat = s_hat[:, 0]
        probs = probs[:, 0, :]
    if single:
        return (int(s_hat[0]) if not model.is_mimo else s_hat[0]), probs[0]
    return s_hat, probs


def draw_training_channel(model: TrainedModel, rng: np.random.Generator, batch: int,
                          channel: Optional[str] = None, fading: Optional[str] = None
                          ) -> ChannelRealization:
    system = model.system
    channel = model.train.channel if channel is None else channel
    fading = model.train.fading if fading is None else fading
    uses = 1 if fading == "block" else system.n
    if channel == "awgn-only":
        return ChannelRealization.identity(batch, system.m_t, uses)
    return draw_channel(rng, batch, system.m_r, system.m_t, uses)


def _train(model: TrainedModel, train: TrainConfig, rng: Optional[np.random.Generator],
           head_weights) -> TrainedModel:
    system = model.system
    if rng is None:
        rng = np.random.default_rng([train.seed, 1])
    net = Network(model.arch, model.params.copy())
    beta = system.beta(train.train_ebn0_db)
    # a saturated softmax floors near -log(1e-12) ~ 27.6, so stay well below that
    limit = 5.0 * math.log(system.M)
    heads = model.arch.heads
    losses = list(model.losses)
    model_view = dataclasses.replace(model, train=train)
    for it in range(train.iterations):
        msgs = rng.integers(0, system.M, size=(train.batch_size, heads))
        channel = draw_training_channel(model_view, rng, train.batch_size)
        probs, trace = nn.forward(net, msgs, channel, beta, rng)
        per_head, _ = nn.head_losses(probs, trace.messages)
        loss = float(np.dot(head_weights, per_head))
        if not math.isfinite(loss) or loss > limit:
            raise TrainingDiverged(
                f"loss {loss:.4g} at iteration {it} exceeds {limit:.4g}; "
                f"try a smaller learning rate (now {train.learning_rate})"
            )
        grads = nn.backward(net, trace, head_weights=head_weights)
        try:
            net.step(grads, train.learning_rate)
        except ContractError as exc:
            # non-finite parameters after the update
            raise TrainingDiverged(
                f"parameters blew up at iteration {it} ({exc}); "
                f"try a smaller learning rate (now {train.learning_rate})"
            ) from exc
        losses.append(loss)
        if (it + 1) % 1000 == 0:
            log.debug("iteration %d loss %.5f", it + 1, loss)
    return TrainedModel(system, model.arch, net.params, train, losses,
                        model.iterations_done + train.iterations)


def train_siso(model: TrainedModel, train: Optional[TrainConfig] = None,
               rng: Optional[np.random.Generator] = None) -> TrainedModel:
    """Mini-batch SGD on the mean cross-entropy with fresh channel/noise draws."""
    if model.is_mimo:
        raise ContractError("train_siso needs a SISO model")
    return _train(model, model.train if train is None else train, rng, np.ones(1))


def train_mimo(model: TrainedModel, train: Optional[MimoTrainConfig] = None,
               rng: Optional[np.random.Generator] = None) -> TrainedModel:
    """SGD on gamma * L1 + (1 - gamma) * L2 over the two receiver heads."""
    if not model.is_mimo:
        raise ContractError("train_mimo needs a MIMO model")
    train = model.train if train is None else train
    gamma = getattr(train, "gamma", 0.5)
    return _train(model, train, rng, np.array([gamma, 1.0 - gamma]))


def train_model(model: TrainedModel, train=None, rng=None) -> TrainedModel:
    return (train_mimo if model.is_mimo else train_siso)(model, train, rng)


def codewords(model: TrainedModel) -> tuple[np.ndarray, np.ndarray]:
    """Every message (or message pair) and its transmitted signal."""
    M = model.system.M
    if model.is_mimo:
        msgs = np.array([(a, b) for a in range(M) for b in range(M)])
    else:
        msgs = np.arange(M)
    return msgs, transmit(model, msgs)


def save_model(model: TrainedModel, path) -> None:
    train = dataclasses.asdict(model.train)
    train["kind"] = "mimo" if isinstance(model.train, MimoTrainConfig) else "siso"
    meta = {
        "system": dataclasses.asdict(model.system),
        "train": train,
        "seed": model.train.seed,
        "final_loss": model.final_loss,
        "iterations_done": model.iterations_done,
        "csi_rx": model.csi_rx,
        "fading": model.train.fading,
    }
    nn.save_parameters(path, model.params, model.arch, meta)


def load_model(path) -> TrainedModel:
    params, arch, meta = nn.load_parameters(path)
    if arch is None or "system" not in meta:
        raise ContractError(f"{path}: not an autoencoder checkpoint")
    system = SystemConfig(**meta["system"])
    train = dict(meta["train"])
    kind = train.pop("kind", "siso")
    cfg = MimoTrainConfig(**train) if kind == "mimo" else TrainConfig(**train)
    model = TrainedModel(system, arch, params, cfg, iterations_done=meta.get("iterations_done", 0))
    if meta.get("final_loss") is not None:
        model.losses = [meta["final_loss"]]
    return model

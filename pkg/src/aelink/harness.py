"""Monte Carlo BER engine, Eb/N0 sweeps and result files.

Every point is simulated in fixed-size chunks of trials.  Chunk ``c`` of
point ``p`` draws from its own generator seeded by ``(seed, p, c)`` and
chunks are reduced strictly in order, so results do not depend on how
many worker processes evaluated them.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from aelink import __version__, autoenc, baselines
from aelink.channel import ChannelRealization, apply_channel, ebn0_to_beta
from aelink.errors import ContractError

log = logging.getLogger(__name__)

LINK_KINDS = (
    "ae-siso",
    "ae-mimo",
    "conv-siso-uncoded",
    "conv-siso-hamming",
    "conv-mimo-ml",
    "conv-mimo-zf",
    "random-guess",
)
CHANNEL_ALIASES = {"awgn": "awgn-only", "awgn-only": "awgn-only", "rayleigh": "rayleigh"}
CSV_HEADER = ["link", "channel", "ebn0_db", "bits", "errors", "ber", "stderr", "censored", "seed"]
OUTPUT_DIR_ENV = "AELINK_OUTPUT_DIR"
MAX_RESAMPLE_ROUNDS = 100


def canonical_channel(name: str) -> str:
    try:
        return CHANNEL_ALIASES[name]
    except KeyError:
        raise ContractError(f"unknown channel mode {name!r}") from None


@dataclass
class LinkUnderTest:
    """A named end-to-end link.

    ``model`` is a :class:`~aelink.autoenc.TrainedModel` for the ``ae-*``
    kinds and ignored otherwise.  ``decode`` selects hard or soft Hamming
    decoding.  ``fading`` defaults to the model's training mode for learned
    links and to block fading for conventional ones.
    """

    kind: str
    channel: str = "rayleigh"
    model: Optional[autoenc.TrainedModel] = None
    decode: str = "hard"
    fading: Optional[str] = None
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LINK_KINDS:
            raise ContractError(f"unknown link kind {self.kind!r}")
        self.channel = canonical_channel(self.channel)
        if self.kind.startswith("ae-"):
            if self.model is None:
                raise ContractError(f"{self.kind} needs a trained model")
            if self.model.is_mimo != (self.kind == "ae-mimo"):
                raise ContractError(f"model does not match link kind {self.kind}")
            if self.fading is None:
                self.fading = self.model.train.fading
            if self.model.arch.csi_width and self.fading != self.model.train.fading:
                raise ContractError("a genie-CSI receiver is tied to its training fading mode")
        elif self.fading is None:
            self.fading = "block"
        if self.fading not in autoenc.FADING_MODES:
            raise ContractError(f"fading must be one of {autoenc.FADING_MODES}")
        if self.decode not in ("hard", "soft"):
            raise ContractError("decode must be 'hard' or 'soft'")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "conv-siso-hamming":
            return f"{self.kind}-{self.decode}"
        return self.kind

    @property
    def bits_per_trial(self) -> int:
        if self.kind == "conv-siso-uncoded":
            return 1
        if self.kind in ("conv-siso-hamming", "conv-mimo-ml", "conv-mimo-zf", "random-guess"):
            return 4
        return self.model.system.bits_per_message

    def describe(self) -> dict:
        d = {"kind": self.kind, "label": self.label, "channel": self.channel,
             "fading": self.fading}
        if self.kind == "conv-siso-hamming":
            d["decode"] = self.decode
        if self.model is not None:
            d["system"] = asdict(self.model.system)
            d["train"] = asdict(self.model.train)
            d["csi_rx"] = self.model.csi_rx
        return d


@dataclass
class TrialResult:
    bits: int = 0
    errors: int = 0
    blocks: int = 0
    block_errors: int = 0
    failures: int = 0

    def __iadd__(self, other: "TrialResult") -> "TrialResult":
        self.bits += other.bits
        self.errors += other.errors
        self.blocks += other.blocks
        self.block_errors += other.block_errors
        self.failures += other.failures
        return self


@dataclass
class BerPoint:
    ebn0_db: float
    bits: int
    errors: int
    censored: bool = False
    blocks: int = 0
    block_errors: int = 0
    failures: int = 0

    def __post_init__(self):
        if self.bits < 1:
            raise ContractError("a BER point needs at least one simulated bit")
        if not 0 <= self.errors <= self.bits:
            raise ContractError("bit errors must lie in [0, bits]")

    @property
    def ber(self) -> float:
        return self.errors / self.bits

    @property
    def standard_error(self) -> float:
        p = self.ber
        return math.sqrt(p * (1.0 - p) / self.bits)

    @property
    def bler(self) -> float:
        return self.block_errors / self.blocks if self.blocks else float("nan")

    @property
    def bler_standard_error(self) -> float:
        p = self.bler
        return math.sqrt(p * (1.0 - p) / self.blocks) if self.blocks else float("nan")


@dataclass(frozen=True)
class StopRule:
    min_errors: int = 100
    max_bits: int = 10**7
    chunk_bits: int = 1 << 14

    def __post_init__(self):
        if self.min_errors < 1:
            raise ContractError("min_errors must be at least 1")
        if self.max_bits < self.min_errors:
            raise ContractError("max_bits must be at least min_errors")
        if self.chunk_bits < 1:
            raise ContractError("chunk_bits must be positive")


@dataclass
class SweepSpec:
    link: LinkUnderTest
    ebn0_db: Sequence[float]
    stop: StopRule = field(default_factory=StopRule)
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.workers < 1:
            raise ContractError("workers must be at least 1")


@dataclass
class SweepResult:
    link: LinkUnderTest
    points: list
    seed: int
    stop: StopRule


class SweepAborted(RuntimeError):
    def __init__(self, points, cause):
        super().__init__(f"sweep aborted after {len(points)} points: {cause}")
        self.points = points
        self.cause = cause


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


def _complex_noise(rng, beta, shape):
    return np.sqrt(beta) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def _siso_taps(rng, link, count, uses):
    if link.channel == "awgn-only":
        return np.ones((count, uses), dtype=np.complex128)
    draw = uses if link.fading == "per-use" else 1
    taps = (rng.standard_normal((count, draw)) + 1j * rng.standard_normal((count, draw))) / np.sqrt(2)
    return np.broadcast_to(taps, (count, uses))


def _mimo_taps(rng, link, count):
    if link.channel == "awgn-only":
        return np.broadcast_to(np.eye(2, dtype=np.complex128), (count, 2, 2)).copy()
    return (rng.standard_normal((count, 2, 2)) + 1j * rng.standard_normal((count, 2, 2))) / np.sqrt(2)


def _score(sent_bits, got_bits) -> TrialResult:
    wrong = sent_bits != got_bits
    return TrialResult(
        bits=int(wrong.size),
        errors=int(wrong.sum()),
        blocks=int(wrong.shape[0]),
        block_errors=int(wrong.reshape(wrong.shape[0], -1).any(axis=1).sum()),
    )


def run_trials(link: LinkUnderTest, ebn0_db: float, rng: np.random.Generator,
               count: int) -> TrialResult:
    """Send ``count`` random messages over the link and count bit errors."""
    kind = link.kind
    if kind == "random-guess":
        sent = rng.integers(0, 2, (count, 4))
        return _score(sent, rng.integers(0, 2, (count, 4)))

    if kind == "conv-siso-uncoded":
        bits = rng.integers(0, 2, (count, 1))
        h = _siso_taps(rng, link, count, 1)
        beta = ebn0_to_beta(ebn0_db, 1.0)
        y = h * baselines.bpsk_modulate(bits) + _complex_noise(rng, beta, (count, 1))
        return _score(bits, baselines.bpsk_demodulate(y, h))

    if kind == "conv-siso-hamming":
        data = rng.integers(0, 2, (count, 4))
        h = _siso_taps(rng, link, count, 7)
        beta = ebn0_to_beta(ebn0_db, 4.0 / 7.0)
        y = h * baselines.bpsk_modulate(baselines.hamming74_encode(data))
        y = y + _complex_noise(rng, beta, (count, 7))
        if link.decode == "hard":
            got = baselines.hamming74_decode(baselines.bpsk_demodulate(y, h), "hard")
        else:
            got = baselines.hamming74_decode(baselines.bpsk_soft(y, h), "soft")
        return _score(data, got)

    if kind in ("conv-mimo-ml", "conv-mimo-zf"):
        bits = rng.integers(0, 2, (count, 4))
        x = baselines.qpsk_modulate(bits)
        # two unit-energy QPSK streams, 4 bits per channel use
        beta = ebn0_to_beta(ebn0_db, 4.0, energy_per_use=2.0)
        H = _mimo_taps(rng, link, count)
        y = np.einsum("bij,bj->bi", H, x) + _complex_noise(rng, beta, (count, 2))
        failures = 0
        if kind == "conv-mimo-ml":
            got = baselines.mimo_ml_detect(y, H)
        else:
            z, ok = baselines.zf_equalize(y, H)
            rounds = 0
            while not ok.all():
                bad = np.flatnonzero(~ok)
                failures += bad.size
                rounds += 1
                if rounds > MAX_RESAMPLE_ROUNDS:
                    raise RuntimeError("zero-forcing kept failing after resampling the channel")
                H[bad] = _mimo_taps(rng, link, bad.size)
                y[bad] = np.einsum("bij,bj->bi", H[bad], x[bad]) + _complex_noise(rng, beta, (bad.size, 2))
                z[bad], ok[bad] = baselines.zf_equalize(y[bad], H[bad])
            got = baselines.qpsk_modulate(baselines.qpsk_demodulate(z))
        result = _score(bits, baselines.qpsk_demodulate(got))
        result.failures = failures
        return result

    # learned links
    model = link.model
    system = model.system
    shape = (count, system.m_t) if model.is_mimo else (count,)
    msgs = rng.integers(0, system.M, shape)
    chan = autoenc.draw_training_channel(model, rng, count, link.channel, link.fading)
    x = autoenc.transmit(model, msgs)
    y = apply_channel(chan, x) + np.sqrt(system.beta(ebn0_db)) * rng.standard_normal(x.shape)
    s_hat, _ = autoenc.decode(model, y, chan if model.arch.csi_width else None)
    k = system.k
    return _score(autoenc.messages_to_bits(msgs, k).reshape(count, -1),
                  autoenc.messages_to_bits(s_hat, k).reshape(count, -1))


def run_trial(link: LinkUnderTest, ebn0_db: float, rng: np.random.Generator):
    """One message through the link; returns ``(bits sent, bit errors)``."""
    r = run_trials(link, ebn0_db, rng, 1)
    return r.bits, r.errors


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------


def chunk_rng(seed: int, point_index: int, chunk_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, point_index, chunk_index]))


def _run_chunk(link, ebn0_db, seed, point_index, chunk_index, trials) -> TrialResult:
    return run_trials(link, ebn0_db, chunk_rng(seed, point_index, chunk_index), trials)


def _done(total: TrialResult, stop: StopRule) -> bool:
    return total.errors >= stop.min_errors or total.bits >= stop.max_bits


def monte_carlo_ber(link: LinkUnderTest, ebn0_db: float, stop: StopRule = StopRule(),
                    seed: int = 0, workers: int = 1, point_index: int = 0,
                    executor=None) -> BerPoint:
    """Simulate one Eb/N0 point until the stopping rule is met.

    Chunks are checked against the rule in index order; chunks computed
    speculatively by other workers beyond the stopping chunk are discarded.
    """
    trials = max(1, math.ceil(stop.chunk_bits / link.bits_per_trial))
    total = TrialResult()
    chunk = 0
    own_pool = None
    if workers > 1 and executor is None:
        own_pool = executor = ProcessPoolExecutor(max_workers=workers)
    try:
        while not _done(total, stop):
            if workers > 1:
                futures = [
                    executor.submit(_run_chunk, link, ebn0_db, seed, point_index, chunk + i, trials)
                    for i in range(workers)
                ]
                results = [f.result() for f in futures]
            else:
                results = [_run_chunk(link, ebn0_db, seed, point_index, chunk, trials)]
            for r in results:
                total += r
                chunk += 1
                if _done(total, stop):
                    break
    finally:
        if own_pool is not None:
            own_pool.shutdown()
    return BerPoint(
        ebn0_db=float(ebn0_db),
        bits=total.bits,
        errors=total.errors,
        censored=total.errors < stop.min_errors,
        blocks=total.blocks,
        block_errors=total.block_errors,
        failures=total.failures,
    )


def run_sweep(spec: SweepSpec, progress: Optional[Callable[[int, BerPoint], None]] = None
              ) -> list:
    """One :class:`BerPoint` per requested Eb/N0, in order.

    Raises :class:`SweepAborted` carrying the points finished so far if any
    point fails.
    """
    points = []
    pool = ProcessPoolExecutor(max_workers=spec.workers) if spec.workers > 1 else None
    try:
        for i, ebn0 in enumerate(spec.ebn0_db):
            try:
                point = monte_carlo_ber(spec.link, ebn0, spec.stop, spec.seed, spec.workers,
                                        point_index=i, executor=pool)
            except Exception as exc:
                raise SweepAborted(points, exc) from exc
            points.append(point)
            log.info("%s %s Eb/N0=%g dB: %d/%d errors, BER=%.4g%s", spec.link.label,
                     spec.link.channel, ebn0, point.errors, point.bits, point.ber,
                     " (censored)" if point.censored else "")
            if progress is not None:
                progress(i, point)
    finally:
        if pool is not None:
            pool.shutdown()
    return points


# ---------------------------------------------------------------------------
# Result files
# ---------------------------------------------------------------------------

PLOT_SCRIPT = '''"""Plot BER curves from {csv_name} (generated file)."""
import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

path = sys.argv[1] if len(sys.argv) > 1 else "{csv_name}"
curves = defaultdict(list)
with open(path, newline="") as fh:
    for row in csv.DictReader(fh):
        curves[row["link"] + " / " + row["channel"]].append(
            (float(row["ebn0_db"]), float(row["ber"])))
for label, pts in sorted(curves.items()):
    pts = [p for p in sorted(pts) if p[1] > 0]
    plt.semilogy([p[0] for p in pts], [p[1] for p in pts], marker="o", label=label)
plt.xlabel("Eb/N0 [dB]")
plt.ylabel("BER")
plt.grid(True, which="both", alpha=0.3)
plt.legend()
plt.savefig(path.rsplit(".", 1)[0] + ".png", dpi=150)
'''


def default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "."))


def write_results(results: Sequence[SweepResult], path, metadata: Optional[dict] = None,
                  plot_script: bool = False) -> Path:
    """Write sweep results as CSV plus a ``.meta.json`` sidecar.

    Floats are written with ``repr`` so that parsing them back gives the
    identical double.
    """
    path = Path(path)
    rows = []
    for res in results:
        for p in res.points:
            rows.append([
                res.link.label, res.link.channel, repr(float(p.ebn0_db)), str(p.bits),
                str(p.errors), repr(p.ber), repr(p.standard_error), str(int(p.censored)),
                str(res.seed),
            ])
    meta = {
        "artifact_version": __version__,
        "snr_axis": "Eb/N0 [dB]; noise variance per real dimension = "
                    "energy_per_use / (2 * bits_per_use * 10**(ebn0_db/10))",
        "links": [
            {**res.link.describe(), "seed": res.seed, "stop": asdict(res.stop),
             "failures": [p.failures for p in res.points]}
            for res in results
        ],
    }
    if metadata:
        meta.update(metadata)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            writer.writerows(rows)
        with open(str(path) + ".meta.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        if plot_script:
            with open(path.with_suffix(".plot.py"), "w") as fh:
                fh.write(PLOT_SCRIPT.format(csv_name=path.name))
    except OSError as exc:
        raise OSError(f"could not write results to {path}: {exc}") from exc
    return path


def read_results(path) -> list:
    """Parse a results CSV back into typed dicts."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != CSV_HEADER:
            raise ContractError(f"{path}: unexpected header {header}")
        for row in reader:
            rec = dict(zip(header, row))
            out.append({
                "link": rec["link"],
                "channel": rec["channel"],
                "ebn0_db": float(rec["ebn0_db"]),
                "bits": int(rec["bits"]),
                "errors": int(rec["errors"]),
                "ber": float(rec["ber"]),
                "stderr": float(rec["stderr"]),
                "censored": bool(int(rec["censored"])),
                "seed": int(rec["seed"]),
            })
    return out

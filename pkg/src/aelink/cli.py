"""Command-line entry point.

Subcommands: ``train``, ``sweep``, ``baseline``, ``gradcheck`` and
``codewords``.  Every option can also be given in a config file of
``key = value`` lines grouped under ``[global]`` or ``[<subcommand>]``
headers; command-line values win.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

from aelink import __version__, autoenc, baselines, harness, nn
from aelink.channel import ChannelRealization, draw_channel

log = logging.getLogger("aelink")

GRADCHECK_TOLERANCE = 1e-5


def parse_grid(text: str) -> list:
    """``"0:14:2"`` (inclusive stop) or ``"0,5,10"`` -> list of floats."""
    text = text.strip()
    if not text:
        return []
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise argparse.ArgumentTypeError(f"bad grid {text!r}; use start:stop:step")
        start, stop, step = parts
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(max(count, 0))]
    try:
        return [float(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad Eb/N0 list {text!r}") from None


def _add_system_args(p, default_system="siso"):
    p.add_argument("--system", choices=["siso", "mimo"], default=default_system)
    p.add_argument("--n", type=int, default=None, help="channel uses per message (7 SISO, 1 MIMO)")
    p.add_argument("--k", type=int, default=None, help="bits per message/stream (4 SISO, 2 MIMO)")


def _add_train_args(p):
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--train-ebn0", type=float, default=None, help="training Eb/N0 in dB")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--csi", choices=autoenc.CSI_MODES, default="genie")
    p.add_argument("--rx-frontend", choices=autoenc.RX_FRONTENDS, default="matched")
    p.add_argument("--fading", choices=autoenc.FADING_MODES, default="block")
    p.add_argument("--channel", choices=["rayleigh", "awgn"], default="rayleigh")
    p.add_argument("--gamma", type=float, default=0.5, help="MIMO head-1 loss weight")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--workers", type=int, default=1)
    common.add_argument("--output", "-o", default=None,
                        help=f"output path (default: under ${harness.OUTPUT_DIR_ENV} or .)")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = argparse.ArgumentParser(
        prog="aelink", parents=[common],
        description="Autoencoder transceivers over Rayleigh fading: training and BER sweeps.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    # subcommands accept the global flags too, without clobbering them
    sub_common = argparse.ArgumentParser(add_help=False)
    for action in common._actions:
        sub_common._add_action(_suppressed(action))

    p = sub.add_parser("train", parents=[sub_common], help="build and train an autoencoder")
    _add_system_args(p)
    _add_train_args(p)

    p = sub.add_parser("sweep", parents=[sub_common], help="Monte Carlo BER sweep")
    p.add_argument("--link", default="conv-siso-uncoded",
                   help="comma-separated link kinds: " + ", ".join(harness.LINK_KINDS))
    p.add_argument("--model", default=None, help="checkpoint for ae-* links")
    p.add_argument("--channel", choices=["rayleigh", "awgn", "awgn-only"], default="rayleigh")
    p.add_argument("--fading", choices=autoenc.FADING_MODES, default=None)
    p.add_argument("--decode", choices=["hard", "soft"], default="hard")
    p.add_argument("--ebn0", type=parse_grid, default=None,
                   help="start:stop:step or comma list (default 0:14:2 SISO, 0:20:2 MIMO)")
    p.add_argument("--min-errors", type=int, default=100)
    p.add_argument("--max-bits", type=int, default=10**7)
    p.add_argument("--chunk-bits", type=int, default=1 << 14)
    p.add_argument("--plot", action="store_true", help="also write a matplotlib script")

    p = sub.add_parser("baseline", parents=[sub_common], help="closed-form BER curves to CSV")
    p.add_argument("--modulation", choices=["bpsk"], default="bpsk")
    p.add_argument("--code", choices=["none", "hamming74-hard"], default="none")
    p.add_argument("--channel", choices=["awgn", "rayleigh"], default="awgn")
    p.add_argument("--ebn0", type=parse_grid, default=parse_grid("0:14:1"))

    p = sub.add_parser("gradcheck", parents=[sub_common],
                       help="finite-difference check of the analytic gradients")
    _add_system_args(p)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--rx-frontend", choices=autoenc.RX_FRONTENDS, default="matched")
    p.add_argument("--fading", choices=autoenc.FADING_MODES, default="block")

    p = sub.add_parser("codewords", parents=[sub_common], help="dump a trained encoder's signals")
    p.add_argument("--model", required=True)
    return parser


def _suppressed(action):
    import copy

    clone = copy.copy(action)
    clone.default = argparse.SUPPRESS
    return clone


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def apply_config(parser: argparse.ArgumentParser, path: str) -> None:
    """Install config-file values as parser defaults."""
    cfg = configparser.ConfigParser(interpolation=None)
    if not cfg.read(path):
        parser.error(f"cannot read config file {path}")
    subs = _subparsers(parser)
    for section in cfg.sections():
        if section == "global":
            targets = [parser] + list(subs.values())
        elif section in subs:
            targets = [subs[section]]
        else:
            parser.error(f"{path}: unknown section [{section}]")
        for key, raw in cfg.items(section):
            dest = key.replace("-", "_")
            found = False
            for target in targets:
                for action in target._actions:
                    if action.dest != dest or dest in ("help", "config", "command"):
                        continue
                    found = True
                    if isinstance(action, argparse._StoreTrueAction):
                        action.default = cfg.getboolean(section, key)
                    else:
                        # argparse runs string defaults through the option's type
                        action.default = raw
            if not found:
                parser.error(f"{path}: unknown option {key!r} in [{section}]")


def _output_path(args, default_name: str) -> Path:
    if args.output:
        return Path(args.output)
    return harness.default_output_dir() / default_name


def _system_from_args(args) -> autoenc.SystemConfig:
    if args.system == "siso":
        return autoenc.SystemConfig(args.n or 7, args.k or 4)
    return autoenc.SystemConfig(args.n or 1, args.k or 2, 2, 2)


def cmd_train(args) -> int:
    system = _system_from_args(args)
    cls = autoenc.MimoTrainConfig if args.system == "mimo" else autoenc.TrainConfig
    overrides = {
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "train_ebn0_db": args.train_ebn0,
        "iterations": args.iterations,
    }
    kwargs = {k: v for k, v in overrides.items() if v is not None}
    kwargs.update(seed=args.seed, csi_rx=args.csi, rx_frontend=args.rx_frontend,
                  fading=args.fading, channel=harness.canonical_channel(args.channel))
    if args.system == "mimo":
        kwargs["gamma"] = args.gamma
    train = cls(**kwargs)
    if args.system == "mimo":
        model = autoenc.build_mimo_autoencoder(system, train)
    else:
        model = autoenc.build_siso_autoencoder(system, train)
    log.info("training %s (n=%d, k=%d) for %d iterations, csi_rx=%s, fading=%s",
             args.system, system.n, system.k, train.iterations, train.csi_rx, train.fading)
    t0 = time.time()
    model = autoenc.train_model(model)
    path = _output_path(args, f"model-{args.system}.npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    autoenc.save_model(model, path)
    print(f"trained in {time.time() - t0:.1f} s, final loss {model.final_loss:.5f}; "
          f"checkpoint written to {path}")
    return 0


def cmd_sweep(args) -> int:
    kinds = [k.strip() for k in args.link.split(",") if k.strip()]
    model = autoenc.load_model(args.model) if args.model else None
    stop = harness.StopRule(args.min_errors, args.max_bits, args.chunk_bits)
    results = []
    for kind in kinds:
        link = harness.LinkUnderTest(
            kind, args.channel, model=model if kind.startswith("ae-") else None,
            decode=args.decode, fading=args.fading,
        )
        grid = args.ebn0
        if grid is None:
            grid = parse_grid("0:20:2" if "mimo" in kind else "0:14:2")
        spec = harness.SweepSpec(link, grid, stop, args.seed, args.workers)
        try:
            points = harness.run_sweep(spec)
        except harness.SweepAborted as exc:
            results.append(harness.SweepResult(link, exc.points, args.seed, stop))
            final = _output_path(args, "ber.csv")
            path = harness.write_results(results, final.with_name(final.stem + ".partial" + final.suffix))
            print(f"sweep failed: {exc.cause}; partial results in {path}", file=sys.stderr)
            return 1
        results.append(harness.SweepResult(link, points, args.seed, stop))
        for p in points:
            print(f"{link.label:>24} {link.channel:>9} {p.ebn0_db:6.2f} dB  "
                  f"BER {p.ber:.4e} ± {p.standard_error:.1e}  ({p.errors}/{p.bits})"
                  + ("  censored" if p.censored else ""))
    path = harness.write_results(results, _output_path(args, "ber.csv"),
                                 plot_script=args.plot)
    print(f"results written to {path}")
    return 0


def cmd_baseline(args) -> int:
    grid = args.ebn0
    channel = harness.canonical_channel(args.channel)
    if args.code == "none":
        curve = "bpsk-uncoded"
        fn = baselines.theory_ber_bpsk_awgn if channel == "awgn-only" else baselines.theory_ber_bpsk_rayleigh
    else:
        if channel != "awgn-only":
            print("the hard-decision Hamming closed form is for AWGN only", file=sys.stderr)
            return 1
        curve = "bpsk-hamming74-hard-bler"
        fn = baselines.theory_bler_hamming74_hard_awgn
    path = _output_path(args, f"theory-{curve}-{channel}.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["curve", "channel", "ebn0_db", "ber"])
        for db in grid:
            w.writerow([curve, channel, repr(float(db)), repr(float(fn(db)))])
    print(f"theory curve written to {path}")
    return 0


def gradcheck_network(system: autoenc.SystemConfig, seed: int = 0, batch: int = 4,
                      epsilon: float = 1e-5, rx_frontend: str = "matched",
                      fading: str = "block"):
    """Build a fresh network and finite-difference check it on one frozen batch."""
    is_mimo = system.m_t > 1
    cls = autoenc.MimoTrainConfig if is_mimo else autoenc.TrainConfig
    train = cls(seed=seed, rx_frontend=rx_frontend, fading=fading)
    build = autoenc.build_mimo_autoencoder if is_mimo else autoenc.build_siso_autoencoder
    model = build(system, train)
    net = model.network()
    rng = np.random.default_rng([seed, 2])
    msgs = rng.integers(0, system.M, (batch, system.m_t))
    uses = 1 if fading == "block" else system.n
    channel = draw_channel(rng, batch, system.m_r, system.m_t, uses)
    noise = np.sqrt(system.beta(train.train_ebn0_db)) * rng.standard_normal((batch, system.signal_width))
    weights = [train.gamma, 1 - train.gamma] if is_mimo else None
    return nn.finite_diff_gradcheck(net, msgs, channel, noise, epsilon, head_weights=weights)


def cmd_gradcheck(args) -> int:
    system = _system_from_args(args)
    t0 = time.time()
    result = gradcheck_network(system, args.seed, args.batch, args.epsilon, args.rx_frontend,
                               args.fading)
    ok = result.max_rel_error < args.tolerance
    print(f"{args.system} (n={system.n}, k={system.k}): max relative error "
          f"{result.max_rel_error:.3e} over {result.checked} parameters "
          f"({result.excluded} on ReLU kinks excluded) in {time.time() - t0:.1f} s: "
          + ("PASS" if ok else f"FAIL (tolerance {args.tolerance:g})"))
    return 0 if ok else 1


def cmd_codewords(args) -> int:
    model = autoenc.load_model(args.model)
    msgs, x = autoenc.codewords(model)
    path = _output_path(args, "codewords.csv")
    path.parent.mkdir(parents=True, exist_ok=True)
    msgs = msgs.reshape(len(msgs), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"s{i + 1}" for i in range(msgs.shape[1])]
                   + [f"x{j // 2}_{'im' if j % 2 else 're'}" for j in range(x.shape[1])])
        for m, row in zip(msgs, x):
            w.writerow([int(v) for v in m] + [repr(float(v)) for v in row])
    d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)
    d_min = d[~np.eye(len(x), dtype=bool)].min()
    print(f"{len(x)} codewords written to {path}; minimum pairwise distance {d_min:.4f}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "baseline": cmd_baseline,
    "gradcheck": cmd_gradcheck,
    "codewords": cmd_codewords,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        apply_config(parser, known.config)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"aelink {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``irs-cdrn <subcommand> [options]``.

Exit codes: 0 ok, 2 configuration or usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .cdrn import (
    CdrnModel, CheckpointError, NumericalError, cdrn_forward, cdrn_loss_grads, export_block_activations,
    load_checkpoint,
)
from .config import ConfigError, ExperimentConfig, load_config
from .estimators import denoise_observation
from .harness import SWEEP, generate_dataset, noise_vars, run_sweep, substream, train_models
from .linalg import LinAlgError
from .nn import finite_difference_check
from .protocol import build_dft_schedule, build_pilot_book, observe

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
log = logging.getLogger("irs_cdrn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p):
    p.add_argument("--config", type=Path, help="experiment .cfg file")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", type=Path, help="output directory or file")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="irs-cdrn", description="IRS uplink channel estimation experiments")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-dataset", help="write a training/test set to .npz")
    _common(p)
    p.add_argument("--snr", type=float, help="SNR in dB (default: first grid point)")

    p = sub.add_parser("train", help="train CDRN checkpoints for the SNR grid")
    _common(p)

    p = sub.add_parser("evaluate", help="Monte Carlo sweep using existing checkpoints")
    _common(p)
    p.add_argument("--checkpoints", type=Path, help="checkpoint directory")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("sweep", help="train (if needed) and evaluate; writes results.csv")
    _common(p)
    p.add_argument("--workers", type=int)

    p = sub.add_parser("dump-activations", help="write per-block activations for fresh trials")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--snr", type=float, help="SNR in dB (default: first grid point)")
    p.add_argument("--trials", type=int, default=100)

    p = sub.add_parser("selftest", help="gradient checks and protocol identities")
    p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _config(args) -> ExperimentConfig:
    over = {"seed": args.seed}
    if getattr(args, "workers", None) is not None:
        over["workers"] = args.workers
    if args.cmd in ("train", "evaluate", "sweep") and args.out is not None:
        over["out_dir"] = args.out
    if args.config is None:
        raise ConfigError("--config is required")
    return load_config(args.config, over)


def _cmd_generate(args) -> int:
    cfg = _config(args)
    snr = cfg.snr_db[0] if args.snr is None else args.snr
    split = generate_dataset(cfg, snr)
    out = args.out or Path(cfg.out_dir) / f"dataset_snr{snr:+.2f}dB.npz"
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, train_inputs=split.train.inputs, train_labels=split.train.labels,
             test_inputs=split.test.inputs, test_labels=split.test.labels,
             train_users=split.train_users, test_users=split.test_users,
             noise_var_z=split.noise_var_z)
    print(out)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _config(args)
    train_models(cfg)
    print(Path(cfg.out_dir) / "checkpoints")
    return EXIT_OK


def _write_result(cfg, res) -> int:
    path = res.write_csv(Path(cfg.out_dir) / "results.csv")
    sys.stdout.write(res.to_csv())
    log.info("wrote %s", path)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    from .harness import load_models
    cfg = _config(args)
    models = None
    if "cdrn" in cfg.estimators:
        models = load_models(cfg, args.checkpoints or Path(cfg.out_dir) / "checkpoints")
    return _write_result(cfg, run_sweep(cfg, models))


def _cmd_sweep(args) -> int:
    cfg = _config(args)
    models = train_models(cfg) if "cdrn" in cfg.estimators else None
    return _write_result(cfg, run_sweep(cfg, models))


def _cmd_dump(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint)
    s = cfg.system
    if (model.M, model.N) != (s.M, s.N):
        raise ConfigError(f"checkpoint is for M={model.M}, N={model.N}; config has M={s.M}, N={s.N}")
    snr = cfg.snr_db[0] if args.snr is None else args.snr
    from .channel import realize_channels
    _, sv = noise_vars(cfg, snr)
    rng = substream(cfg, SWEEP, 999_999_999, 0)      # kept apart from sweep trial keys
    sched = build_dft_schedule(s.N, s.C)
    ch = realize_channels(s, cfg.links, rng, batch=args.trials)
    Xt = denoise_observation(observe(ch, sched, build_pilot_book(s.K, s.L, s.pilot_power), sv, rng),
                             sched).reshape(-1, s.M, s.N + 1)
    out = args.out or Path(cfg.out_dir) / f"activations_snr{snr:+.2f}dB.bin"
    out.parent.mkdir(parents=True, exist_ok=True)
    export_block_activations(Xt, model, out)
    print(out)
    return EXIT_OK


def selftest(verbose: bool = False) -> bool:
    """Quick correctness checks; returns True when all pass."""
    ok = True

    def report(name, passed, detail):
        nonlocal ok
        ok &= bool(passed)
        if verbose or not passed:
            print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")

    P = build_dft_schedule(32, 33).P
    dev = float(np.max(np.abs(P @ P.conj().T - 33 * np.eye(33))))
    report("dft schedule", dev < 1e-9, f"max dev {dev:.2e}")

    from .channel import SystemConfig, realize_channels
    sys_ = SystemConfig(M=4, N=5, K=6, C=7, L=6)
    ch = realize_channels(sys_, None, np.random.default_rng(0))
    X = observe(ch, build_dft_schedule(5, 7), build_pilot_book(6, 6), 0.0, None).X
    dev = float(np.max(np.abs(X - ch.H @ build_dft_schedule(5, 7).P)))
    report("noise-free protocol", dev < 1e-10, f"max err {dev:.2e}")

    rng = np.random.default_rng(1)
    model = CdrnModel.init(3, 3, D=2, n_layers=3, filters=8, seed=2)
    for p in model.parameters():
        p += 0.05 * rng.standard_normal(p.shape)
    x = rng.standard_normal((4, 3, 4, 2))
    y = rng.standard_normal((4, 3, 4, 2))
    out, res = cdrn_forward(x, model, "eval")
    dev = float(np.max(np.abs(out - (x - sum(res)))))
    report("residual decomposition", dev < 1e-12, f"max err {dev:.2e}")

    from .cdrn import cdrn_loss
    _, grads = cdrn_loss_grads(model, x, y, "train")
    worst = 0.0
    for p, g in zip(model.parameters(), grads):
        def fn(v, p=p):
            p[...] = v
            return cdrn_loss(model, x, y, "train")
        orig = p.copy()
        # absolute floor: biases feeding BN have an exact zero gradient
        worst = max(worst, finite_difference_check(fn, orig, g, floor=1e-5))
        p[...] = orig
    report("model gradient", worst < 1e-4, f"worst rel err {worst:.2e}")
    return ok


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"generate-dataset": _cmd_generate, "train": _cmd_train, "evaluate": _cmd_evaluate,
                "sweep": _cmd_sweep, "dump-activations": _cmd_dump}
    try:
        if args.cmd == "selftest":
            passed = selftest(verbose=True)
            return EXIT_OK if passed else EXIT_NUMERIC
        return handlers[args.cmd](args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

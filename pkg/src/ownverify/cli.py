"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 usage error, 3 attack did not
converge, 4 oracle unreachable.
"""
from __future__ import annotations

import argparse
import json
import logging
import signal
import sys
import threading
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from .attack import AttackParams, generate_ifdgsm, make_request
from .errors import OracleUnreachable
from .experiment import load_config, run_experiment, write_report
from .metrics import ssim
from .network import NetworkSpec, init_network, load_model, save_model, spec_by_name
from .protocol import (DEFAULT_SSIM_FLOOR, DEFAULT_THRESHOLD, VerificationRequest,
                       owner_verify, third_party_verify)
from .service import ENDPOINT_ENV, RemoteOracle, serve
from .train import DEFAULT_BATCH, DEFAULT_EPOCHS, DEFAULT_LR, accuracy, train

log = logging.getLogger("ownverify")

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_UNREACHABLE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _fmt(v: float) -> str:
    return repr(float(v))


def _bool(v: bool) -> str:
    return "true" if v else "false"


def _load_spec(name: str) -> NetworkSpec:
    path = Path(name)
    if path.suffix == ".json" and path.exists():
        return NetworkSpec.from_dict(json.loads(path.read_text(encoding="utf-8")))
    try:
        return spec_by_name(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _attack_params(args) -> AttackParams:
    try:
        return AttackParams(epsilon=args.eps, alpha_com=args.alpha_com, l=args.l,
                            t_diff=args.t_diff, n_max=args.n_max, alpha_floor=args.alpha_floor)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _add_attack_flags(p):
    defaults = AttackParams()
    p.add_argument("--eps", type=float, default=defaults.epsilon)
    p.add_argument("--alpha-com", type=float, default=defaults.alpha_com)
    p.add_argument("--l", type=int, default=defaults.l)
    p.add_argument("--t-diff", type=float, default=defaults.t_diff)
    p.add_argument("--n-max", type=int, default=defaults.n_max)
    p.add_argument("--alpha-floor", type=float, default=defaults.alpha_floor)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.per_class <= 0 or args.k < 2 or args.side < 1:
        raise UsageError("--per-class must be positive, --k at least 2, --side positive")
    dataset = D.builtin_synthetic_dataset(args.k, args.per_class, args.side, args.seed,
                                          args.noise)
    manifest = D.write_dataset(dataset, args.out, args.format)
    print(f"wrote images={len(dataset)} manifest={manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _load_spec(args.spec)
    dataset = D.load_dataset(args.data)
    train_set, test_set = D.split_dataset(dataset, args.test_fraction, args.seed)
    net = init_network(spec, args.seed)
    result = train(net, train_set, args.epochs, args.lr, args.batch, args.seed,
                   provenance=f"{args.spec} seed={args.seed}")
    save_model(result.network, args.out)
    test_acc = accuracy(result.network, test_set) if len(test_set) else float("nan")
    print(f"accuracy train={result.train_accuracy:.6f} test={test_acc:.6f}")
    return EXIT_OK


def cmd_attack(args) -> int:
    model = load_model(args.model)
    x = D.load_image(args.image)
    params = _attack_params(args)
    c = model.predict(x)
    if args.c_prime == c:
        raise UsageError(f"--c-prime {args.c_prime} equals the source class")
    if not 0 <= args.c_prime < model.num_classes:
        raise UsageError(f"--c-prime must lie in [0, {model.num_classes})")
    try:
        request = make_request(model, x, args.c_prime, args.p_target)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    x_adv, trace = generate_ifdgsm(request, model, params)
    T.save_tensor(x_adv, args.out_image)
    if args.out_trace:
        trace.write_csv(args.out_trace)
    if args.out_preview:
        Path(args.out_preview).write_bytes(D.encode_pgm(x_adv))
    p = trace.final_probs
    mean = trace.final_mean_p_cprime
    print(f"attack converged={_bool(trace.converged)} iterations={trace.iterations_used} "
          f"c={c} c_prime={args.c_prime} p_c={_fmt(p[c])} p_cprime={_fmt(p[args.c_prime])} "
          f"mean_p_cprime={'nan' if mean is None else _fmt(mean)} ssim={_fmt(ssim(x, x_adv))}")
    return EXIT_OK if trace.converged else EXIT_NOT_CONVERGED


def cmd_serve(args) -> int:
    model = load_model(args.model)
    try:
        handle = serve(model, args.bind, args.mode, args.tag)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(f"serving endpoint={handle.endpoint} mode={args.mode}", flush=True)
    stop.wait()
    handle.close()
    print("stopped", flush=True)
    return EXIT_OK


def _suspect_oracle(args):
    if args.suspect_model:
        return load_model(args.suspect_model)
    return RemoteOracle(args.suspect_endpoint, timeout=args.timeout, retries=args.retries)


def cmd_verify(args) -> int:
    x = D.load_image(args.image)
    try:
        request = VerificationRequest(x, args.c_prime, args.p_target)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    suspect = _suspect_oracle(args)
    if args.mode == "owner":
        if not args.model:
            raise UsageError("--model is required in owner mode")
        owner = load_model(args.model)
        if owner.predict(x) == args.c_prime:
            raise UsageError("--c-prime equals the owner's source class")
        verdict, x_adv, trace = owner_verify(owner, suspect, request, _attack_params(args),
                                             args.threshold, args.ssim_floor)
        if args.out_image:
            T.save_tensor(x_adv, args.out_image)
    else:
        if not args.adv_image:
            raise UsageError("--adv-image is required in third-party mode")
        verdict = third_party_verify(T.load_tensor(args.adv_image), request, suspect,
                                     args.threshold, not args.owner_not_converged,
                                     args.ssim_floor)
    print(verdict.line())
    return EXIT_OK if verdict.attack_converged else EXIT_NOT_CONVERGED


def _parse_overrides(pairs) -> dict:
    from .experiment import parse_config_text
    return parse_config_text("\n".join(pairs))


def cmd_experiment(args) -> int:
    overrides = _parse_overrides(args.set or [])
    for key in ("seed", "out", "workers", "n_images", "threshold"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    try:
        cfg = load_config(args.config, overrides)
        cfg.validate()
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None
    report = run_experiment(cfg)
    paths = write_report(report, cfg.out, cfg.bin_width)
    sys.stdout.write(report.summary())
    print(f"wrote histogram={paths['histogram']} heatmap={paths['heatmap']} "
          f"summary={paths['summary']}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ownverify", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset as PGM + manifest")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--side", type=int, default=16)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--format", choices=["pgm", "tnsr"], default="pgm")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and save it as NNET")
    p.add_argument("--spec", required=True, help="cnn-small, mlp-small, or a JSON spec file")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    p.add_argument("--lr", type=float, default=DEFAULT_LR)
    p.add_argument("--batch", type=int, default=DEFAULT_BATCH)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="steer p(c') to --p-target on a local model")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True, help="PGM or TNSR image")
    p.add_argument("--c-prime", type=int, required=True)
    p.add_argument("--p-target", type=float, required=True)
    _add_attack_flags(p)
    p.add_argument("--out-image", required=True, help="adversarial image (TNSR)")
    p.add_argument("--out-trace", help="per-iteration CSV")
    p.add_argument("--out-preview", help="8-bit PGM preview (display only)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("serve", help="serve a model as a gray-box oracle")
    p.add_argument("--model", required=True)
    p.add_argument("--bind", default="127.0.0.1:7878")
    p.add_argument("--mode", default="full", help="full or rounded(d)")
    p.add_argument("--tag", help="model_tag to include in responses (testing only)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("verify", help="owner or third-party verification")
    p.add_argument("--mode", choices=["owner", "third-party"], required=True)
    p.add_argument("--model", help="owner model (owner mode)")
    p.add_argument("--adv-image", help="owner-supplied probe image, TNSR (third-party mode)")
    p.add_argument("--owner-not-converged", action="store_true",
                   help="owner reports that its attack did not converge")
    p.add_argument("--image", required=True)
    p.add_argument("--c-prime", type=int, required=True)
    p.add_argument("--p-target", type=float, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--suspect-endpoint", help=f"host:port (default ${ENDPOINT_ENV})")
    group.add_argument("--suspect-model", help="local NNET file standing in for the suspect")
    p.add_argument("--timeout", type=float, default=5.0)
    p.add_argument("--retries", type=int, default=3)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--ssim-floor", type=float, default=DEFAULT_SSIM_FLOOR)
    p.add_argument("--out-image")
    _add_attack_flags(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("experiment", help="owner x suspect separation experiment")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--workers", type=int)
    p.add_argument("--n-images", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"ownverify: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OracleUnreachable as exc:
        print(f"ownverify: oracle unreachable: {exc}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("internal error", exc_info=True)
        print(f"ownverify: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())

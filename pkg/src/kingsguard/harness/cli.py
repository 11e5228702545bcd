"""Command-line entry point.

    kingsguard prep --in prog.kasm --out prog.kgim --key HEX [--path-bound N] [--dump-cfg] [--dump-adps]
    kingsguard run prog.kgim [--key HEX] [--protections on|off] [--trace FILE] [--stats] [--max-steps N]
    kingsguard attack av1|av2|av3|av4|scada [--protections on|off|both]
    kingsguard fuzz --seed S --programs N --pairs M [--mutate]

Exit status: 0 success, 1 failed run or unmet expectation, 2 usage error.
"""
from __future__ import annotations

import argparse
import os
import sys

from ..binprep import DEFAULT_PATH_BOUND, prep
from ..binprep.image import parse_image
from ..errors import KingsguardError, StepBudgetExceeded
from ..system import Simulator, SystemConfig
from . import fuzz
from . import scenarios

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
KEY_ENV = "KINGSGUARD_KEY"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _hex_key(text: str) -> bytes:
    try:
        key = bytes.fromhex(text)
    except ValueError:
        raise argparse.ArgumentTypeError("key must be hexadecimal") from None
    if not key:
        raise argparse.ArgumentTypeError("key must not be empty")
    return key


def _positive(text: str) -> int:
    value = int(text, 0)
    if value <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return text == "on"


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kingsguard", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    pp = sub.add_parser("prep", help="assemble and sign a program image")
    pp.add_argument("--in", dest="source", required=True)
    pp.add_argument("--out", required=True)
    pp.add_argument("--key", type=_hex_key, required=True)
    pp.add_argument("--path-bound", type=_positive, default=DEFAULT_PATH_BOUND)
    pp.add_argument("--dump-cfg", action="store_true")
    pp.add_argument("--dump-adps", action="store_true")

    rp = sub.add_parser("run", help="execute an image")
    rp.add_argument("image")
    rp.add_argument("--key", type=_hex_key, default=None,
                    help=f"image verification key (default: ${KEY_ENV})")
    rp.add_argument("--protections", type=_on_off, default=True)
    rp.add_argument("--trace")
    rp.add_argument("--stats", action="store_true")
    rp.add_argument("--max-steps", type=_positive, default=1_000_000)
    rp.add_argument("--config", help="JSON platform configuration")
    rp.add_argument("--interrupt-at", type=_positive, action="append", default=[],
                    help="deliver an interrupt at this cycle (repeatable)")

    ap = sub.add_parser("attack", help="reproduce an attack scenario")
    ap.add_argument("scenario", choices=[*scenarios.AV_NAMES, "scada"])
    ap.add_argument("--protections", choices=["on", "off", "both"], default="both")

    fp = sub.add_parser("fuzz", help="differential noninterference fuzzing")
    fp.add_argument("--seed", type=int, required=True)
    fp.add_argument("--programs", type=_positive, required=True)
    fp.add_argument("--pairs", type=_positive, required=True)
    fp.add_argument("--mutate", action="store_true",
                    help="plant a propagation bug; success means a counterexample is found")
    return p


def cmd_prep(args) -> int:
    with open(args.source, encoding="utf-8") as fh:
        source = fh.read()
    built = prep(source, args.key, args.path_bound)
    with open(args.out, "wb") as fh:
        fh.write(built.image)
    print(f"wrote {args.out}: {len(built.image)} bytes, {len(built.program.text)} instructions, "
          f"{len(built.program.sensitive) // 8} sensitive words, {len(built.digests)} path hashes")
    if args.dump_cfg:
        print(built.cfg.dump())
    if args.dump_adps:
        for path in built.paths:
            print(path.describe(built.cfg))
    return EXIT_OK


def cmd_run(args) -> int:
    key = args.key
    if key is None:
        env = os.environ.get(KEY_ENV)
        if not env:
            print(f"run: no key given (use --key or ${KEY_ENV})", file=sys.stderr)
            return EXIT_USAGE
        key = _hex_key(env)
    config = SystemConfig.from_json(args.config) if args.config else SystemConfig()
    config = SystemConfig(**{**config.__dict__, "protections": args.protections})
    with open(args.image, "rb") as fh:
        image = parse_image(fh.read())
    sim = Simulator(image, key, config)
    try:
        report = sim.run(args.max_steps, args.interrupt_at)
        budget = False
    except StepBudgetExceeded as exc:
        report, budget = exc.report, True
    if args.trace:
        sim.trace.write(args.trace)
    status = "budget exhausted" if budget else ("halted" if report.halted else f"trap {report.trap}")
    print(f"{status} after {report.steps} steps")
    if report.trap:
        print(f"  {sim.state.trap_detail}")
    for idx, value in report.host_outputs:
        print(f"host read sr{idx} = {value:#x}")
    if args.stats:
        for name, value in report.counters:
            print(f"{name:>26} {value}")
        for kind, n in sorted(report.violation_counts().items()):
            print(f"{kind:>26} {n}")
    return EXIT_OK if report.halted and not report.trap else EXIT_FAIL


def cmd_attack(args) -> int:
    modes = {"on": [True], "off": [False], "both": [False, True]}[args.protections]
    reports = []
    for prot in modes:
        if args.scenario == "scada":
            reports += [scenarios.run_scada(prot, v) for v in scenarios.SCADA_VARIANTS]
        else:
            reports.append(scenarios.run_scenario(args.scenario, prot, attack=True))
            reports.append(scenarios.run_scenario(args.scenario, prot, attack=False))
    for rep in reports:
        print(rep.summary())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


def cmd_fuzz(args) -> int:
    propagate = fuzz.and_propagate if args.mutate else fuzz.dift.propagate
    summary = fuzz.fuzz_noninterference(args.seed, args.programs, args.pairs, propagate)
    print(summary.text())
    if args.mutate:
        return EXIT_OK if summary.distinguishable else EXIT_FAIL
    return EXIT_OK if not summary.distinguishable else EXIT_FAIL


COMMANDS = {"prep": cmd_prep, "run": cmd_run, "attack": cmd_attack, "fuzz": cmd_fuzz}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except OSError as exc:
        print(f"{args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KingsguardError, ValueError) as exc:
        print(f"{args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())

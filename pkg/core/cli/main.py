import argparse
import os
import sys
from typing import List, Optional

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def set_threads(threads: int) -> None:
    """Sets the XLA CPU thread flags; must run before the first computation. One thread is bit-reproducible."""
    flags = [f for f in os.environ.get('XLA_FLAGS', '').split()
             if not f.startswith(('--xla_cpu_multi_thread_eigen', 'intra_op_parallelism_threads'))]
    flags += [f"--xla_cpu_multi_thread_eigen={'false' if threads == 1 else 'true'}",
              f"intra_op_parallelism_threads={threads}"]
    os.environ['XLA_FLAGS'] = ' '.join(flags)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='caloric', description='Schrodinger map flow and caloric gauge simulator')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='run the pipeline described by a config file')
    run.add_argument('--config', required=True, help='TOML run configuration')
    run.add_argument('--out', default=None, help='output directory (overrides [output] directory)')
    run.add_argument('--threads', type=int, default=None, help='XLA CPU threads (overrides [numerics] threads)')
    run.add_argument('--quiet', action='store_true')

    check = sub.add_parser('check', help='run the invariant suite on small bump data')
    check.add_argument('--target', required=True, help='target kind')
    check.add_argument('--grid', type=int, required=True, help='grid points per side')
    check.add_argument('--out', default=None, help='output directory')
    check.add_argument('--threads', type=int, default=1)
    check.add_argument('--quiet', action='store_true')

    envelope = sub.add_parser('envelope', help='frequency envelopes of a field dump')
    envelope.add_argument('--dump', required=True, help='field dump file')
    envelope.add_argument('--out', default='.', help='directory for envelopes.csv')
    envelope.add_argument('--delta', type=float, default=1 / 800)
    envelope.add_argument('--sigma', type=float, nargs='*', default=[0.0])
    envelope.add_argument('--iterates', action='store_true', help='also write the iterated envelopes')
    return parser


def check_config_text(target: str, n: int, out: str) -> str:
    """Config of the `check` subcommand: the full pipeline on a small bump, with a short Schrodinger run."""
    return '\n'.join([
        f'target = "{target}"',
        '[grid]', f'n = {n}',
        '[initial_data]', 'family = "bump"', 'amplitude = 0.03', 'width = 1.5',
        '[flow]', 'mode = "full"',
        '[numerics]', 'T = 0.01',
        '[diagnostics]', 'decay_fits = false',
        '[output]', f'directory = "{out}"',
        '',
    ])


def _run(args) -> int:
    from core.cli.config import load_config
    config = load_config(args.config)
    updates = {}
    if args.out is not None:
        updates['output'] = config.output.model_copy(update={'directory': args.out})
    if args.threads is not None:
        updates['numerics'] = config.numerics.model_copy(update={'threads': args.threads})
    config = config.model_copy(update=updates)
    set_threads(config.numerics.threads)
    from core.cli.runner import Runner
    return Runner(config, verbose=not args.quiet).run()['status']


def _check(args) -> int:
    from core.cli.config import parse_config
    out = args.out if args.out is not None else f"caloric_check_{args.target}_{args.grid}"
    config = parse_config(check_config_text(args.target, args.grid, out))
    set_threads(args.threads)
    from core.cli.runner import Runner
    return Runner(config, verbose=not args.quiet).run()['status']


def _envelope(args) -> int:
    from core.diagnostics.envelopes import MAX_ITERATE, envelope_family, envelope_iterate, envelope_rows, \
        field_envelope
    from core.spectral.io import read_field_dump, write_table
    from core.spectral.littlewood_paley import LittlewoodPaley
    grid, values = read_field_dump(args.dump)
    lp = LittlewoodPaley(grid)
    rows = []
    for sigma in args.sigma:
        env = field_envelope(lp, values, sigma, args.delta)
        rows += [(int(k), float(sigma), float(v), args.delta, 0) for k, v in zip(env.shells, env.values)]
    if args.iterates:
        base = envelope_family(lp, values, args.delta)
        for j in range(1, MAX_ITERATE + 1):
            rows += list(envelope_rows(envelope_iterate(base, j)))
    write_table(os.path.join(args.out, 'envelopes.csv'), rows, ['k', 'sigma', 'value', 'delta', 'iterate_j'])
    print(f"envelope 0: {{'shells': {len(lp.shells)}, 'rows': {len(rows)}}}")
    return EXIT_OK


COMMANDS = {'run': _run, 'check': _check, 'envelope': _envelope}


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns 0 on success, 1 on an invariant failure or module error, 2 on a usage or config error."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_:
        return EXIT_USAGE if exit_.code else EXIT_OK
    from core.errors import CaloricError, ConfigError
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except CaloricError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())

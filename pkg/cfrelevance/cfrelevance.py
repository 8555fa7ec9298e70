#!/usr/bin/env python
#
# 17/10/2026
# cfrelevance: confidence-filtered relevance for naturalness classifiers
#
# Released under GNU GENERAL PUBLIC LICENSE v3. (Use at your own risk)
#

import argparse
import dataclasses
import logging
import sys

from . import __version__
from . import pipeline
from .config import RunConfig, setup_environment
from .errors import CFRError, StageError

logger = logging.getLogger('cfrelevance')

COMMANDS = {
    'gen': ("write a synthetic planted-texture dataset", pipeline.run_gen),
    'train': ("train the toy transformer on the train split", pipeline.run_train),
    'uncertainty': ("fit the DDU model and score every sample", pipeline.run_uncertainty),
    'explain': ("write relevance maps for every image", pipeline.run_explain),
    'analyze': ("write the CFR report table and summary", pipeline.run_analyze),
    'report': ("print a digest of the last analysis", pipeline.run_report),
    'run': ("gen, train, uncertainty, explain and analyze in one go", pipeline.run_pipeline),
}


def _flag_options():
    "one --flag per RunConfig field; None means 'not given'"
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("-v", "--verbose", help="increase output verbosity", action="count")
    parent.add_argument("-c", "--config", help="config file with 'key = value' lines", default=None)
    for f in dataclasses.fields(RunConfig):
        if f.name == 'verbose':
            continue
        flag = '--' + f.name.replace('_', '-')
        if f.type is bool:
            parent.add_argument(flag, dest=f.name, action='store_const', const=True, default=None)
        elif f.type is tuple:
            parent.add_argument(flag, dest=f.name, help="comma separated, e.g. 10,30,50,100", default=None)
        else:
            parent.add_argument(flag, dest=f.name, type=f.type, default=None)
    return parent


def parseArgs(argv):
    parser = argparse.ArgumentParser(prog='cfrelevance',
                                     description="Confidence-filtered relevance for naturalness classifiers")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    commands = parser.add_subparsers(dest='command', metavar='command')
    parent = _flag_options()
    for name, (text, _) in COMMANDS.items():
        commands.add_parser(name, help=text, parents=[parent])
    if not argv:
        parser.print_usage(sys.stderr)
        return None
    return parser.parse_args(argv)


def setup_logging(verbose):
    level = logging.WARNING
    if verbose == 1:
        level = logging.INFO
    elif verbose and verbose >= 2:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger('cfrelevance').setLevel(level)


def main_core(args):
    setup_logging(args.verbose)
    try:
        config = setup_environment(args)
    except (CFRError, OSError) as e:
        print("cfrelevance: config: %s" % e, file=sys.stderr)
        return 1
    config.verbose = args.verbose or 0

    _, command = COMMANDS[args.command]
    try:
        result = command(config)
    except StageError as e:
        print("cfrelevance: %s" % e, file=sys.stderr)
        return 1
    except (CFRError, OSError) as e:
        print("cfrelevance: %s: %s" % (args.command, e), file=sys.stderr)
        return 1

    if args.command == 'report':
        sys.stdout.write(result)
    return 0


def dispatch(argv):
    "exit status of one command line"
    try:
        args = parseArgs(list(argv))
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2
    if args is None or args.command is None:
        return 2
    return main_core(args)


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

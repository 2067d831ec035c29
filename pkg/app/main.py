import argparse
import sys
from typing import List, Optional

from pydantic import ValidationError

from app.commands import catalog, experiments, gen, merge, plan, report, verify
from app.config import settings
from app.errors import BlockMergeError
from app.utils import logger, set_verbosity

VALIDATION_EXIT_CODE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockmerge",
        description="Budget-aware block-level checkpoint merging: catalog, plan, execute, verify",
    )
    parser.add_argument("--workspace", default=settings.WORKSPACE_DIR, help="snapshot store and ledger root")
    parser.add_argument("--log-level", default=None, help="stderr log level (DEBUG, INFO, WARNING, ...)")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in (gen, catalog, plan, merge, verify, report, experiments):
        module.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one command and map its outcome to an exit code"""
    args = build_parser().parse_args(argv)
    if args.log_level:
        set_verbosity(args.log_level.upper())
    try:
        return args.handler(args)
    except BlockMergeError as e:
        logger.error(f"{e.error_code}: {e.detail}")
        print(f"error {e.error_code}: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"Invalid input: {e}")
        print(f"error validation: {e}", file=sys.stderr)
        return VALIDATION_EXIT_CODE


if __name__ == "__main__":
    sys.exit(main())

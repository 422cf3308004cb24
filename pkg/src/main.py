"""
Application en ligne de commande demixbench.
"""

import logging
import sys
from typing import Optional

from src.commands.bench import dispatch, parse_args


def main(argv: Optional[list[str]] = None) -> int:
    """Point d'entree: configure la journalisation puis execute la commande."""
    args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return dispatch(args)


if __name__ == "__main__":
    sys.exit(main())

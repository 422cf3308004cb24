"""
Point d'entree pour lancer le banc d'essai.
Usage: uv run python main.py <run|grid|sweep|format|selftest> ...
"""

import sys

from src.main import main

if __name__ == "__main__":
    sys.exit(main())

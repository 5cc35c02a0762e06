"""Module entrypoint for `python -m perturbex`."""

from __future__ import annotations

from perturbex.entrypoint import main

if __name__ == "__main__":
    raise SystemExit(main())

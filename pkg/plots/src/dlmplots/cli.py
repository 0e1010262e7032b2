"""Render one figure per spec file: dlmplot figure.spec [more.spec ...]"""

from __future__ import annotations

import sys

from .figures import render
from .specfile import SpecError, parse_spec


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: dlmplot SPECFILE [SPECFILE ...]", file=sys.stderr)
        return 0 if argv else 2
    for path in argv:
        try:
            spec = parse_spec(path)
            render(spec)
            print(f"figure: {spec.output}")
        except SpecError as exc:
            print(f"spec error: {exc}", file=sys.stderr)
            return 2
        except OSError as exc:
            print(f"file error: {exc}", file=sys.stderr)
            return 4
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

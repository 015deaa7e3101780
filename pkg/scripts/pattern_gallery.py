"""Print every interleaving pattern's step layout on a small grid.

Usage: python3 scripts/pattern_gallery.py [--T 4] [--K 4]
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from tokenweave.patterns import PatternKind, STEREO_KINDS, build_pattern, format_pattern, step_counts


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--T", type=int, default=4)
    ap.add_argument("--K", type=int, default=4)
    args = ap.parse_args()
    for kind in PatternKind:
        if kind in STEREO_KINDS and args.K % 2:
            print(f"== {kind.value}: skipped (needs even K)\n")
            continue
        pattern = build_pattern(kind, args.T, args.K)
        counts = step_counts(pattern)
        print(f"== {kind.value} (exact {counts.exact}, nominal {counts.nominal})")
        print(format_pattern(pattern))
        print()
    return 0


if __name__ == "__main__":
    sys.exit(main())

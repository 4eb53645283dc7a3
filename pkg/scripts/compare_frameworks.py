"""svfdt versus terminal-server on one scenario over several seeds (delay, accuracy, bytes)."""

from __future__ import annotations

import argparse

from fedtwin.cli import parse_seeds
from fedtwin.harness import compare
from fedtwin.scenario import canonical_scenario, load


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", help="scenario file (default: built-in canonical)")
    ap.add_argument("--seeds", type=parse_seeds, default=parse_seeds("1..5"))
    ap.add_argument("--duration", type=float, default=None)
    args = ap.parse_args(argv)
    sc = load(args.scenario) if args.scenario else canonical_scenario()
    if args.duration:
        sc = sc.replace(duration=args.duration)
    cmp = compare(sc, seeds=args.seeds)
    print(cmp.table())
    for fw in cmp.frameworks:
        per_frame = [r.link_bytes("edge->cloud") / max(1, r.camera_frames) for r in cmp.reports[fw].values()]
        print(f"{fw}: edge->cloud bytes per camera frame {sum(per_frame) / len(per_frame):.1f}")
    return 1 if cmp.flags else 0


if __name__ == "__main__":
    raise SystemExit(main())

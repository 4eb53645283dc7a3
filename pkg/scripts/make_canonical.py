"""Write the built-in canonical scenario to scenarios/canonical.json (and one file per density)."""

from __future__ import annotations

import argparse
from pathlib import Path

from fedtwin.scenario import canonical_scenario, dump


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parent.parent / "scenarios"))
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump(canonical_scenario(), out / "canonical.json")
    for density in ("light", "heavy", "asymmetric"):
        dump(canonical_scenario(density), out / f"canonical_{density}.json")
    print(f"scenarios written to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())

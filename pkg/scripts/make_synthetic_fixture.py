#!/usr/bin/env python3
"""Regenerate the committed synthetic prediction log.

20,000 records sampled (seed 7) from the small 3x3 process with
p_minus=1/5, p_plus=4/5 and the symmetric utility, written on the raw
[-1, 1] reporting scale.  The test suite pins byte-level goldens against
this file, so rerunning the script should be a no-op unless the sampler
or the log schema deliberately changes.
"""

from fractions import Fraction
from pathlib import Path

from aligncal.constructions import ConstructionSpec, build_small_example
from aligncal.core import Utility
from aligncal.data import synthesize_log, write_records

OUT = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    proc = build_small_example(
        ConstructionSpec(
            "small_3x3", Fraction(1, 5), Fraction(4, 5), Utility(1, 0, 1, 0)
        )
    )
    records = synthesize_log(proc, 20_000, seed=7, task="synthetic")
    OUT.mkdir(parents=True, exist_ok=True)
    path = OUT / "synthetic_small3x3_seed7.csv"
    write_records(path, records)
    print(f"wrote {path} ({len(records)} records)")


if __name__ == "__main__":
    main()

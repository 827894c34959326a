"""Regenerate the bundled sample CSV (synthetic stand-in for the public sample).

The layout is the raw long format: one row per (configuration, benchmark)
with hardware columns, a DIMM part number, and a few columns outside the
schema that ingest trims away.
"""
import csv
import sys
from pathlib import Path

import numpy as np

from ncpp.schema import default_schema
from ncpp.synth import SynthConfig, generate

OUT = Path(__file__).resolve().parents[1] / "src" / "ncpp" / "data" / "sample_spr_int.csv"


def main(path=OUT) -> None:
    schema = default_schema()
    data, _ = generate(SynthConfig(n_records=40, suite="SPECrate2017_int_base", noise=0.01, seed=2024), schema)
    rng = np.random.default_rng(2024)
    # memory columns are re-derived from the part number on ingest
    derived = {"DIMM_rank", "Density", "Organization", "CL"}
    names = [n for n in schema.names if n not in derived]
    extra = ["Hostname", "Kernel", "BIOS_Version"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(extra + names + ["DIMM.PartNo", "Suite", "Benchmark", "Score"])
        for i, r in enumerate(data.records):
            host = f"node-{i:03d}"
            kernel = str(rng.choice(["5.15.0-86-generic", "5.14.0-284.el9.x86_64"]))
            bios = f"SE5C7411.86B.{int(rng.integers(8000, 9999))}"
            vals = [r.features[n] for n in names]
            vals = [f"{v:g}" if isinstance(v, float) else v for v in vals]
            for bench, score in zip(data.suite.benchmarks, r.labels):
                w.writerow([host, kernel, bios] + vals + [r.features["DIMM.PartNo"], data.suite.name,
                                                          bench, f"{score:.2f}"])


if __name__ == "__main__":
    main(*sys.argv[1:])

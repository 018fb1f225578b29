"""Model size and compression ratio of every preset at each bit width.

    python3 scripts/size_table.py [--csv out.csv]
"""

import argparse
import csv
import sys

from snnq import model_io as mio
from snnq.network import PRESETS, build_network, preset

BITS = (32, 8, 4, 2, 1)


def rows():
    for name in PRESETS:
        net = build_network(preset(name), seed=0)
        for bits in BITS:
            size = mio.model_size_bytes(net, bits)
            yield {
                "preset": name,
                "params": net.param_count(),
                "bits": bits,
                "size_bytes": size,
                "size_mb": round(mio.megabytes(size), 4),
                "compression_ratio": round(mio.compression_ratio(net, bits), 3),
            }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--csv", help="also write the table to this file")
    args = ap.parse_args(argv)
    table = list(rows())
    out = open(args.csv, "w", newline="") if args.csv else None
    for fh in filter(None, (sys.stdout, out)):
        w = csv.DictWriter(fh, list(table[0]))
        w.writeheader()
        w.writerows(table)
    if out:
        out.close()


if __name__ == "__main__":
    main()

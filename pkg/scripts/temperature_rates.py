"""Binary QAT under proportional temperature schedules T = rate * epoch.

Trains the tiny preset at 1 bit once per rate and writes one metrics CSV
per rate plus a summary of final accuracies.

    python3 scripts/temperature_rates.py --rates 5 10 20 --epochs 50
"""

import argparse
import logging
from pathlib import Path

from snnq.data import SyntheticSpec, gen_synthetic, split, to_arrays
from snnq.network import build_network, preset
from snnq.trainer import TrainConfig, train


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", type=float, nargs="+", default=[5.0, 10.0, 20.0])
    ap.add_argument("--epochs", type=int, default=50)
    ap.add_argument("--bits", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/temperature")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    samples = gen_synthetic(SyntheticSpec(samples_per_class=250), seed=args.seed)
    train_s, test_s = split(samples, 0.2, seed=args.seed)
    task = to_arrays(train_s), to_arrays(test_s)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    finals = {}
    for rate in args.rates:
        net = build_network(preset("desk-tiny", bits=args.bits), seed=args.seed)
        cfg = TrainConfig(epochs=args.epochs, bits=args.bits, seed=args.seed, t0=0.0, rate=rate)
        hist = train(net, *task, cfg)
        (out / f"rate_{rate:g}.csv").write_text(hist.to_csv())
        finals[rate] = hist[-1].test_acc
    print("rate,final_test_acc")
    for rate, acc in finals.items():
        print(f"{rate:g},{acc:.4f}")
    print(f"spread_points,{100 * (max(finals.values()) - min(finals.values())):.2f}")


if __name__ == "__main__":
    main()

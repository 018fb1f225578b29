"""Command-line entry point: ``snnq <command> [options]``.

Options may also come from a ``key=value`` file given with ``--config``;
command-line flags win over the file. ``SNNQ_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import data as dt
from . import model_io as mio
from .network import build_network, parse_topology, preset
from .neuron import LifParams, SurrogateParams
from .trainer import TrainConfig, evaluate, gradcheck, train

log = logging.getLogger("snnq")

SWEEP_BITS = (32, 8, 4, 2, 1)
SWEEP_COLUMNS = ("bits", "train_acc", "test_acc", "acc_drop", "size_bytes", "size_mb", "compression_ratio")


@dataclass
class CliConfig:
    preset: str = "desk-tiny"
    timesteps: int = 10
    # training
    epochs: int = 500
    lr0: float = 1e-3
    t_max: int = 64
    batch_size: int = 16
    seed: int = 0
    bits: int = 32
    t0: float = 1.0
    rate: float = 2.0
    half_width: float = 1.0
    leak: float = 0.01
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    # synthetic data
    n_classes: int = 3
    samples_per_class: int = 250
    events_per_sample: int = 1500
    noise_rate: float = 0.1
    jitter: int = 1
    test_fraction: float = 0.2
    slicing: str = "count"
    # paths
    data: str = ""
    out: str = "run"
    model: str = ""

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def network_spec(self, bits: int | None = None):
        return preset(
            self.preset,
            timesteps=self.timesteps,
            bits=self.bits if bits is None else bits,
            neuron=LifParams(self.tau, self.v_threshold, self.v_reset),
            surrogate=SurrogateParams(self.half_width, self.leak),
        )

    def synthetic_spec(self) -> dt.SyntheticSpec:
        _, h, w = self.network_spec().input_shape
        return dt.SyntheticSpec(
            n_classes=self.n_classes,
            samples_per_class=self.samples_per_class,
            height=h,
            width=w,
            events_per_sample=self.events_per_sample,
            noise_rate=self.noise_rate,
            jitter=self.jitter,
        )


_FIELDS = {f.name: f for f in fields(CliConfig)}


def _coerce(name: str, text: str):
    kind = type(getattr(CliConfig(), name))
    return kind(text) if kind is not str else text


def read_config_file(path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, val)
    return values


def format_config(cfg: CliConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in asdict(cfg).items())


def resolve_config(args: argparse.Namespace) -> CliConfig:
    values = read_config_file(args.config) if args.config else {}
    for name in _FIELDS:
        given = getattr(args, name, None)
        if given is not None:
            values[name] = given
    cfg = CliConfig(**values)
    for line in format_config(cfg).splitlines():
        log.info("config %s", line)
    return cfg


# ---------------------------------------------------------------------------
# datasets


def load_samples(cfg: CliConfig):
    if cfg.data:
        files = sorted(Path(cfg.data).glob("*.aer"))
        if not files:
            raise FileNotFoundError(f"no .aer event files in {cfg.data}")
        return [(s, s.label) for s in map(dt.read_event_file, files)]
    return dt.gen_synthetic(cfg.synthetic_spec(), seed=cfg.seed)


def load_splits(cfg: CliConfig):
    train_s, test_s = dt.split(load_samples(cfg), cfg.test_fraction, seed=cfg.seed)
    return (dt.to_arrays(train_s, cfg.timesteps, cfg.slicing),
            dt.to_arrays(test_s, cfg.timesteps, cfg.slicing))


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: CliConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = dt.gen_synthetic(cfg.synthetic_spec(), seed=cfg.seed)
    for i, (stream, _) in enumerate(samples):
        dt.write_event_file(stream, out / f"sample_{i:05d}.aer")
    print(f"wrote {len(samples)} event files ({cfg.n_classes} classes) to {out}")
    return 0


def _train_one(cfg: CliConfig, splits, bits: int):
    net = build_network(cfg.network_spec(bits), seed=cfg.seed)
    history = train(net, *splits, replace(cfg.train_config(), bits=bits))
    return net, history


def cmd_train(cfg: CliConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    net, history = _train_one(cfg, load_splits(cfg), cfg.bits)
    last = history[-1]
    (out / "metrics.csv").write_text(history.to_csv())
    (out / "config.txt").write_text(format_config(cfg))
    mio.save_checkpoint(net, out / "model.snnc", epoch=last.epoch, temperature=last.temperature, seed=cfg.seed)
    print(f"final test_acc={last.test_acc:.4f}; wrote {out / 'model.snnc'} and {out / 'metrics.csv'}")
    return 0


def _require_model(cfg: CliConfig) -> Path:
    if not cfg.model:
        raise ValueError("--model is required")
    return Path(cfg.model)


def cmd_eval(cfg: CliConfig) -> int:
    net = mio.load_any(_require_model(cfg))
    _, test = load_splits(replace(cfg, timesteps=net.spec.timesteps))
    print(f"accuracy={evaluate(net, test):.4f}")
    return 0


def cmd_export(cfg: CliConfig) -> int:
    net = mio.load_checkpoint(_require_model(cfg))
    path = Path(cfg.out)
    if path.suffix != ".snnq":
        path.mkdir(parents=True, exist_ok=True)
        path = path / "model.snnq"
    summary = mio.export_quantized(net, path)
    print(f"wrote {path}: {summary['bytes']} bytes, compression_ratio={summary['compression_ratio']:.3f}")
    return 0


def cmd_import_eval(cfg: CliConfig) -> int:
    net = mio.import_quantized(_require_model(cfg))
    _, test = load_splits(replace(cfg, timesteps=net.spec.timesteps))
    print(f"accuracy={evaluate(net, test):.4f}")
    return 0


GRADCHECK_TOPOLOGY = ("4Conv3-MP2-Dense20-AP10", (2, 8, 8))


def cmd_gradcheck(cfg: CliConfig) -> int:
    topo, shape = GRADCHECK_TOPOLOGY
    spec = parse_topology(topo, shape, timesteps=4, bits=cfg.bits,
                          neuron=LifParams(cfg.tau, cfg.v_threshold, cfg.v_reset),
                          surrogate=SurrogateParams(cfg.half_width, cfg.leak))
    net = build_network(spec, seed=cfg.seed, dtype=np.float64)
    net.set_temperature(cfg.t0)
    frames = np.random.default_rng(cfg.seed).poisson(4.0, size=(4,) + shape).astype(np.float64)
    report = gradcheck(net, (frames, 0))
    print(report.summary())
    return 0 if report.passed and report.flip_fraction < 0.02 else 1


def sweep_rows(cfg: CliConfig, bits_list=SWEEP_BITS):
    splits = load_splits(cfg)
    rows = []
    base = None
    for bits in bits_list:
        net, history = _train_one(cfg, splits, bits)
        last = history[-1]
        if bits == 32:
            base = last.test_acc
        size = mio.model_size_bytes(net, bits)
        rows.append({
            "bits": bits,
            "train_acc": last.train_acc,
            "test_acc": last.test_acc,
            "acc_drop": (base - last.test_acc) if base is not None else float("nan"),
            "size_bytes": size,
            "size_mb": mio.megabytes(size),
            "compression_ratio": mio.compression_ratio(net, bits),
        })
    return rows


def cmd_sweep_bits(cfg: CliConfig) -> int:
    rows = sweep_rows(cfg)
    buf = io.StringIO()
    w = csv.DictWriter(buf, SWEEP_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return 0


COMMANDS = {
    "synth": (cmd_synth, "write synthetic event files"),
    "train": (cmd_train, "train and write checkpoint + metrics CSV"),
    "eval": (cmd_eval, "accuracy of a checkpoint or quantized file"),
    "export": (cmd_export, "pack a checkpoint into a low-bit model file"),
    "import-eval": (cmd_import_eval, "load a packed model file and report accuracy"),
    "gradcheck": (cmd_gradcheck, "compare BPTT gradients with finite differences"),
    "sweep-bits": (cmd_sweep_bits, "train at 32/8/4/2/1 bits; accuracy and compression table"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snnq", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key=value config file")
        for f in fields(CliConfig):
            kind = type(getattr(CliConfig(), f.name))
            p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)
        p.add_argument("--classes", dest="n_classes", type=int, default=None, help=argparse.SUPPRESS)
    return parser


def _thread_limit():
    n = os.environ.get("SNNQ_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def dispatch(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except (ValueError, TypeError, OSError) as exc:
        print(f"snnq: error: {exc}", file=sys.stderr)
        return 2
    func = COMMANDS[args.command][0]
    try:
        with _thread_limit():
            return func(cfg)
    except Exception as exc:  # noqa: BLE001 - one-line diagnostic for any runtime failure
        print(f"snnq {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()

"""Command-line entry point: ``train``, ``eval``, ``inject``, ``bound``, ``selftest``."""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

from .fixedpoint import NORMAL, RQUANT, Granularity, IntegerRepr, QuantScheme, RangeMode, Rounding

log = logging.getLogger("bitrobust")

PRESETS = ("normal", "rquant", "clipping", "randbet")
CHECKPOINT_NAME = "checkpoint.bnn"
TRACE_NAME = "trace.csv"
REPORT_NAME = "report.csv"
PROFILED_NAME = "profiled.csv"
INJECTED_NAME = "injected.bnn"
PROFILED_COLUMNS = ("model", "map", "offsets", "sample_seed", "te", "rte_mean", "n_test")


class ConfigError(ValueError):
    pass


def _opt_float(text: str):
    return None if text.strip().lower() in ("", "none") else float(text)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _enum(kind):
    def parse(text: str):
        text = text.strip().lower()
        if text in ("", "none"):
            return None
        try:
            return kind[text.upper()]
        except KeyError:
            raise ValueError(f"expected one of {', '.join(e.name.lower() for e in kind)}") from None

    return parse


def _choice(*options):
    def parse(text: str):
        text = text.strip().lower()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _path(text: str):
    return text.strip() or None


# key -> (parser, default text, help)
CONFIG_KEYS = {
    "preset": (_choice(*PRESETS), "rquant", "training mode: normal | rquant | clipping | randbet"),
    "m": (int, "8", "bits per stored weight, 2..8"),
    "granularity": (_enum(Granularity), "", "override: global | per_group"),
    "range_mode": (_enum(RangeMode), "", "override: symmetric | asymmetric"),
    "integer_repr": (_enum(IntegerRepr), "", "override: signed | unsigned"),
    "rounding": (_enum(Rounding), "", "override: truncate | nearest"),
    "hidden": (_ints, "256,128", "hidden layer widths, comma separated"),
    "epochs": (int, "10", "training epochs"),
    "batch_size": (int, "32", "mini-batch size"),
    "lr": (float, "0.05", "initial learning rate"),
    "lr_milestones": (_floats, "0.4,0.6,0.8", "epoch fractions after which lr is multiplied by lr_factor"),
    "lr_factor": (float, "0.1", "lr multiplier at each milestone"),
    "momentum": (float, "0.9", "SGD momentum"),
    "weight_decay": (float, "0.0005", "L2 weight decay"),
    "wmax": (_opt_float, "", "weight clipping bound; required by clipping and randbet"),
    "p_train": (_opt_float, "", "training bit error rate; required by randbet"),
    "lambda": (float, "1.0", "weight of the perturbed gradient"),
    "gate_threshold": (float, "1.75", "smoothed clean loss below which bit error injection starts"),
    "loss": (_choice("cross_entropy", "label_smoothed"), "cross_entropy", "training loss"),
    "smooth_target": (float, "0.9", "target probability of the true class for label_smoothed"),
    "master_seed": (int, "0", "seed for initialization, shuffling and training bit errors"),
    "chips": (int, "50", "size of the evaluation chip panel"),
    "chip_seed": (int, "0", "seed of the evaluation chip panel"),
    "p_eval": (_floats, "0,0.001,0.005,0.01,0.015", "evaluation bit error rates, comma separated"),
    "map_seed": (int, "0", "sampling seed for fractional profiled-map probabilities"),
    "bound_delta": (float, "0.01", "failure probability used for the bound line in the report header"),
    "train_images": (_path, "", "IDX training images (optionally gzipped)"),
    "train_labels": (_path, "", "IDX training labels"),
    "test_images": (_path, "", "IDX test images"),
    "test_labels": (_path, "", "IDX test labels"),
    "n_train": (int, "0", "use the first n training examples (0 = all)"),
    "n_test": (int, "0", "use the first n test examples (0 = all)"),
    "model_name": (_path, "", "name written to the report (default: the preset)"),
    "out": (_path, ".", "output directory (overridden by --out)"),
}

@dataclass
class Experiment:
    values: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.values[key]

    def resolve(self, key) -> Path:
        value = self.values[key]
        if value is None:
            raise ConfigError(f"{key} is not set")
        path = Path(value)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def name(self) -> str:
        return self.values["model_name"] or self.values["preset"]

    def scheme(self) -> QuantScheme:
        base = NORMAL if self.values["preset"] == "normal" else RQUANT
        changes = {"m": self.values["m"]}
        for key in ("granularity", "range_mode", "integer_repr", "rounding"):
            if self.values[key] is not None:
                changes[key] = self.values[key]
        try:
            return base.replace(**changes)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self):
        from .smallnet import LossKind, LossSpec
        from .trainer import TrainConfig

        loss = LossSpec(LossKind[self.values["loss"].upper()], self.values["smooth_target"])
        try:
            return TrainConfig(
                epochs=self.values["epochs"],
                batch_size=self.values["batch_size"],
                lr=self.values["lr"],
                lr_milestones=self.values["lr_milestones"],
                lr_factor=self.values["lr_factor"],
                momentum=self.values["momentum"],
                weight_decay=self.values["weight_decay"],
                wmax=self.values["wmax"],
                p_train=self.values["p_train"],
                lam=self.values["lambda"],
                gate_threshold=self.values["gate_threshold"],
                scheme=self.scheme(),
                loss=loss,
                master_seed=self.values["master_seed"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def parse_config(text: str, base_dir: Path = Path(".")) -> Experiment:
    """Parse flat ``key = value`` lines with ``#`` comments; unknown keys are rejected."""
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    try:
        parser.read_string("[experiment]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    raw = dict(parser["experiment"])
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    values = {}
    for key, (parse, default, _) in CONFIG_KEYS.items():
        text_value = raw.get(key, default)
        try:
            values[key] = parse(text_value)
        except ValueError as exc:
            raise ConfigError(f"{key} = {text_value!r}: {exc}") from None
    _validate(values)
    exp = Experiment(values, base_dir)
    exp.scheme()  # surfaces invalid precision or scheme combinations now
    return exp


def _validate(values: dict) -> None:
    preset = values["preset"]
    if preset in ("clipping", "randbet") and values["wmax"] is None:
        raise ConfigError(f"preset {preset} requires wmax")
    if preset == "randbet" and values["p_train"] is None:
        raise ConfigError("preset randbet requires p_train")
    if preset != "randbet" and values["p_train"] is not None:
        raise ConfigError("p_train is only used by preset randbet")
    if preset in ("normal", "rquant") and values["wmax"] is not None:
        raise ConfigError(f"wmax is not used by preset {preset}; use clipping or randbet")
    if any(h < 1 for h in values["hidden"]):
        raise ConfigError("hidden layer widths must be positive")
    if values["chips"] < 1:
        raise ConfigError("chips must be at least 1")
    for p in values["p_eval"]:
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"p_eval entry {p} outside [0, 1]")
    if values["n_train"] < 0 or values["n_test"] < 0:
        raise ConfigError("n_train and n_test must be non-negative")


def load_config(path) -> Experiment:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)


def _out_dir(args, exp: Experiment | None = None) -> Path:
    if args.out is not None:
        out = Path(args.out)
    elif exp is not None:
        out = exp.resolve("out")
    else:
        out = Path(".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_split(exp: Experiment, split: str):
    from .datasets import load_idx

    x, y = load_idx(exp.resolve(f"{split}_images"), exp.resolve(f"{split}_labels"))
    n = exp[f"n_{split}"]
    if n:
        x, y = x[:n], y[:n]
    if len(y) == 0:
        raise ConfigError(f"{split} set is empty")
    return x, y


def _offsets(text: str | None) -> list[int]:
    if text is None:
        return [0]
    try:
        offsets = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--offsets must be a comma separated list of integers, got {text!r}") from None
    if not offsets:
        raise ConfigError("--offsets is empty")
    return offsets


def cmd_train(args) -> int:
    from .smallnet import Model
    from .trainer import train, write_trace

    exp = load_config(args.config)
    if args.seed is not None:
        exp.values["master_seed"] = args.seed
    cfg = exp.train_config()
    x, y = _load_split(exp, "train")
    dims = (x.shape[1], *exp["hidden"], int(y.max()) + 1)
    model = Model.init(dims, seed=exp["master_seed"])
    log.info("training %s %s on %d examples", exp.name, dims, len(y))
    final, trace = train(model, x, y, cfg)
    out = _out_dir(args, exp)
    final.save(out / CHECKPOINT_NAME)
    write_trace(out / TRACE_NAME, trace)
    print(f"wrote {out / CHECKPOINT_NAME} and {out / TRACE_NAME}")
    return 0


def cmd_eval(args) -> int:
    from .biterror import ProfiledMap, sample_chips
    from .evalharness import BOUND_NOTE, fmt6, profiled_rte, prop1_bound, report_rows, robust_sweep, write_report
    from .smallnet import Model

    exp = load_config(args.config)
    if args.seed is not None:
        exp.values["chip_seed"] = args.seed
    model = Model.load(args.checkpoint)
    scheme = exp.scheme()
    if model.quantized is not None and model.quantized.scheme != scheme:
        raise ConfigError(f"checkpoint was quantized with {model.quantized.scheme}, config asks for {scheme}")
    x, y = _load_split(exp, "test")
    chips = sample_chips(exp["chip_seed"], exp["chips"], model.weights.size, scheme.m)
    reports = robust_sweep(model, x, y, chips, exp["p_eval"], scheme)
    delta = exp["bound_delta"]
    eps = prop1_bound(len(y), exp["chips"], delta)
    note = f"bound eps(n={len(y)}, l={exp['chips']}, delta={delta:g}) = {eps:.6g}; {BOUND_NOTE}"
    rows = report_rows(exp.name, scheme, exp["wmax"], exp["p_train"], reports)
    out = _out_dir(args, exp)
    write_report(out / REPORT_NAME, rows, note)
    for r in reports:
        print(f"p={r.p:g} te={r.te:.4f} rte={r.rte_mean:.4f} +- {r.rte_std:.4f}")
    if args.map is not None:
        pmap = ProfiledMap.load(args.map)
        offsets = _offsets(args.offsets)
        rte = profiled_rte(model, x, y, pmap, offsets, exp["map_seed"], scheme)
        with open(out / PROFILED_NAME, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(PROFILED_COLUMNS)
            writer.writerow(
                [exp.name, pmap.label, ",".join(map(str, offsets)), exp["map_seed"], fmt6(reports[0].te), fmt6(rte), len(y)]
            )
        print(f"profiled map {pmap.label} over {len(offsets)} offset(s): rte={rte:.4f}")
    print(f"wrote {out / REPORT_NAME}")
    return 0


def cmd_inject(args) -> int:
    from .biterror import (
        InjectionReport,
        ProfiledMap,
        apply_mask,
        inject_random,
        profiled_expected_flips,
        profiled_mask,
        sample_chips,
    )
    from .fixedpoint import dequantize
    from .smallnet import Model

    if (args.p is None) == (args.map is None):
        raise ConfigError("give exactly one of --p or --map")
    model = Model.load(args.checkpoint)
    q = model.quantized
    if q is None:
        raise ConfigError("checkpoint holds no quantized weights")
    seed = 0 if args.seed is None else args.seed
    if args.map is not None:
        pmap = ProfiledMap.load(args.map)
        offsets = _offsets(args.offsets)
        if len(offsets) != 1:
            raise ConfigError("inject takes a single offset")
        noisy, report = apply_mask(q, profiled_mask(q, pmap, offsets[0], seed))
        report = InjectionReport(report.flipped_bits, profiled_expected_flips(q, pmap, offsets[0]), report.affected_weights)
    else:
        (chip,) = sample_chips(seed, 1, q.size, q.scheme.m)
        noisy, report = inject_random(q, chip, args.p)
    out = _out_dir(args)
    Model(model.dims, dequantize(noisy), noisy).save(out / INJECTED_NAME)
    print(report)
    print(f"wrote {out / INJECTED_NAME}")
    return 0


def cmd_bound(args) -> int:
    from .evalharness import BOUND_NOTE, prop1_bound

    eps = prop1_bound(args.n, args.l, args.delta)
    print(f"eps = {eps:.6g}")
    print(BOUND_NOTE)
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_all

    failures = 0
    for name, ok, detail in run_all():
        failures += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name}{': ' + detail if detail else ''}")
    return 1 if failures else 0


def _config_help() -> str:
    width = max(map(len, CONFIG_KEYS))
    lines = ["config file keys (one 'key = value' per line, '#' starts a comment):"]
    for key, (_, default, text) in CONFIG_KEYS.items():
        shown = f" [default: {default}]" if default else ""
        lines.append(f"  {key:<{width}}  {text}{shown}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bitrobust",
        description="Bit error robust fixed-point networks: training, injection and evaluation.",
        epilog=_config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, epilog=_config_help(), formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a model; writes checkpoint.bnn and trace.csv")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--out", help="output directory")

    p = add("eval", cmd_eval, "sweep bit error rates over a chip panel; writes report.csv")
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--checkpoint", required=True, help="checkpoint to evaluate")
    p.add_argument("--map", help="profiled bit error map to replay as well")
    p.add_argument("--offsets", help="comma separated cell offsets for --map (default 0)")
    p.add_argument("--seed", type=int, help="override chip_seed")
    p.add_argument("--out", help="output directory")

    p = add("inject", cmd_inject, "inject bit errors into a checkpoint once; writes injected.bnn")
    p.add_argument("--checkpoint", required=True, help="quantized checkpoint")
    p.add_argument("--p", type=float, help="random bit error rate")
    p.add_argument("--map", help="profiled bit error map")
    p.add_argument("--offsets", help="cell offset for --map (default 0)")
    p.add_argument("--seed", type=int, help="chip seed, or sampling seed for --map (default 0)")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("bound", help="excess term of the robust error generalization bound")
    p.set_defaults(func=cmd_bound)
    p.add_argument("n", type=int, help="number of test examples")
    p.add_argument("l", type=int, help="number of sampled bit error patterns")
    p.add_argument("delta", type=float, help="failure probability")

    p = sub.add_parser("selftest", help="run quick invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"bitrobust {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"bitrobust {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

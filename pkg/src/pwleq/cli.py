"""Command-line experiment runner.

Config files are flat ``key = value`` lines with dotted sections, e.g.::

    channel.snr_db = 18
    train.pretrain_epochs = 60
    pwl.fitter = minimax
    pwl.segments = 3,5,7,9
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import activation as act
from .channel import ChannelConfig, Dataset, build_dataset, load_dataset, measured_snr_db, save_dataset
from .hwcost import cost_report
from .metrics import QResult, evaluate, evaluate_unequalized
from .model import EXACT, ActivationSet, fixed_point_activations, load_model, save_model, swap_activations, window_arrays
from .training import TrainConfig, TrainingLog, pretrain, retrain, train_scratch

log = logging.getLogger("pwleq")

FITTERS = ("hard", "chord", "minimax")
RESULT_HEADER = "label,segments,mode,ber,q_db,n_bits"
DEFAULT_TEST_SYMBOLS = 2047 * 61 + 81  # 2048 windows, 499,712 bits of 16-QAM


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PwlConfig:
    fitter: str = "minimax"
    segments: tuple[int, ...] = (3, 5, 7, 9)
    half_range: float = 3.0

    def __post_init__(self):
        if self.fitter not in FITTERS:
            raise UsageError(f"unknown fitter {self.fitter!r}; choose from {', '.join(FITTERS)}")
        bad = [k for k in self.segments if k not in act.ALLOWED_SEGMENTS]
        if bad:
            raise UsageError(f"segments {bad} not in {act.ALLOWED_SEGMENTS}")
        if self.fitter == "hard" and set(self.segments) - {3}:
            raise UsageError("the hard fitter only exists for 3 segments")


@dataclass(frozen=True)
class ExperimentConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain_epochs: int = 60
    retrain_epochs: int = 30
    scratch_epochs: int = 60
    scratch_segments: tuple[int, ...] = (3,)
    pwl: PwlConfig = field(default_factory=PwlConfig)
    fixed_point: act.FixedFormat | None = None
    test_symbols: int = DEFAULT_TEST_SYMBOLS
    out: Path = Path("pwleq-out")

    def test_config(self) -> ChannelConfig:
        """Held-out link realisation: same impairments, independent symbols
        and noise."""
        return replace(self.channel, n_symbols=self.test_symbols, seed=self.channel.seed + 1)


def _coerce(text: str, typ: str):
    text = text.strip()
    if typ in ("int",):
        return int(text)
    if typ in ("float",):
        return float(text)
    return text


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def parse_config_text(text: str) -> dict[str, str]:
    values = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def build_config(values: dict[str, str], seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    values = dict(values)
    sections: dict[str, dict] = {"channel": {}, "train": {}, "pwl": {}, "fixed_point": {}, "experiment": {}}
    for key, value in values.items():
        section, _, name = key.partition(".")
        if section not in sections or not name:
            raise UsageError(f"unknown config key {key!r}")
        sections[section][name] = value

    def typed(cls, raw: dict, skip=()):
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for name, value in raw.items():
            if name in skip:
                continue
            if name not in types:
                raise UsageError(f"unknown key {name!r} for {cls.__name__}")
            out[name] = _coerce(value, types[name])
        return out

    epoch_keys = ("pretrain_epochs", "retrain_epochs", "scratch_epochs", "scratch_segments")
    channel = ChannelConfig(**typed(ChannelConfig, sections["channel"]))
    train = TrainConfig(**typed(TrainConfig, sections["train"], skip=epoch_keys))
    pwl_raw = sections["pwl"]
    pwl = PwlConfig(
        fitter=pwl_raw.get("fitter", PwlConfig.fitter),
        segments=_int_list(pwl_raw["segments"]) if "segments" in pwl_raw else PwlConfig.segments,
        half_range=float(pwl_raw.get("half_range", PwlConfig.half_range)),
    )
    fixed = None
    if sections["fixed_point"]:
        fixed = act.FixedFormat(**typed(act.FixedFormat, sections["fixed_point"]))
    exp = sections["experiment"]
    tr = sections["train"]
    cfg = ExperimentConfig(
        channel=channel,
        train=train,
        pretrain_epochs=int(tr.get("pretrain_epochs", ExperimentConfig.pretrain_epochs)),
        retrain_epochs=int(tr.get("retrain_epochs", ExperimentConfig.retrain_epochs)),
        scratch_epochs=int(tr.get("scratch_epochs", ExperimentConfig.scratch_epochs)),
        scratch_segments=_int_list(tr["scratch_segments"]) if "scratch_segments" in tr else (3,),
        pwl=pwl,
        fixed_point=fixed,
        test_symbols=int(exp.get("test_symbols", DEFAULT_TEST_SYMBOLS)),
        out=Path(exp.get("out", "pwleq-out")),
    )
    if seed is not None:
        cfg = replace(cfg, channel=replace(cfg.channel, seed=seed), train=replace(cfg.train, seed=seed))
    if out is not None:
        cfg = replace(cfg, out=Path(out))
    return cfg


def load_config(path: str | None, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    values = {}
    if path is not None:
        try:
            values = parse_config_text(Path(path).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    return build_config(values, seed, out)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def make_specs(fitter: str, segments: int, half_range: float) -> tuple[act.PwlSpec, act.PwlSpec]:
    return (
        make_spec(act.ActivationKind.SIGMOID, fitter, segments, half_range),
        make_spec(act.ActivationKind.TANH, fitter, segments, half_range),
    )


def make_spec(kind: act.ActivationKind, fitter: str, segments: int, half_range: float) -> act.PwlSpec:
    if fitter == "hard":
        if segments != 3:
            raise UsageError("the hard fitter only exists for 3 segments")
        return act.fit_hard(kind)
    if fitter == "chord":
        return act.fit_chord(kind, segments, half_range)
    if fitter == "minimax":
        return act.fit_minimax(kind, segments)
    raise UsageError(f"unknown fitter {fitter!r}; choose from {', '.join(FITTERS)}")


def _ensure_out(cfg: ExperimentConfig) -> Path:
    try:
        cfg.out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {cfg.out}: {exc.strerror}") from exc
    return cfg.out


def _dataset(cfg: ExperimentConfig, data: str | None) -> Dataset:
    return load_dataset(data) if data else build_dataset(cfg.channel)


def _test_partition(cfg: ExperimentConfig):
    ds = build_dataset(cfg.test_config())
    return window_arrays(ds.rx, ds.tx)


def _write_log(path: Path, logbook: TrainingLog) -> None:
    path.write_text(logbook.text())


def _eval_record(label: str, segments: int, acts: ActivationSet, params, test, order: int) -> tuple[QResult, str]:
    res = evaluate(params, acts, test[0], test[1], order)
    return res, res.record(label, segments, acts.mode)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig) -> Path:
    out = _ensure_out(cfg)
    ds = build_dataset(cfg.channel)
    path = save_dataset(out / "dataset.csv", ds)
    print(f"wrote {path}: {len(ds.tx)} symbols, measured SNR {measured_snr_db(ds):.2f} dB")
    return path


def cmd_approx(kind: str, fitter: str, segments: int | None, half_range: float | None, out: Path) -> Path:
    k = act.ActivationKind.parse(kind)
    if fitter not in FITTERS:
        raise UsageError(f"unknown fitter {fitter!r}; choose from {', '.join(FITTERS)}")
    segments = 3 if segments is None else segments
    half_range = PwlConfig.half_range if half_range is None else half_range
    spec = make_spec(k, fitter, segments, half_range)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{k.value}_{fitter}_{segments}.pwl"
    path.write_text(spec.to_record() + "\n")
    print(spec.to_record())
    print(f"max_abs_error {act.max_abs_error(spec)!r}")
    return path


def cmd_pretrain(cfg: ExperimentConfig, data: str | None = None) -> Path:
    out = _ensure_out(cfg)
    params, logbook = pretrain(_dataset(cfg, data), replace(cfg.train, epochs=cfg.pretrain_epochs))
    _write_log(out / "pretrain.log", logbook)
    path = save_model(out / "pretrain.ckpt", params, EXACT)
    print(f"wrote {path} (best epoch {logbook.best_epoch})")
    return path


def cmd_retrain(cfg: ExperimentConfig, model: str, data: str | None = None) -> list[Path]:
    out = _ensure_out(cfg)
    params, _ = load_model(model)
    ds = _dataset(cfg, data)
    paths = []
    for k in cfg.pwl.segments:
        sig, tanh = make_specs(cfg.pwl.fitter, k, cfg.pwl.half_range)
        tc = replace(cfg.train, epochs=cfg.retrain_epochs, seed=cfg.train.seed + k)
        new, logbook = retrain(params, sig, tanh, ds, tc)
        _write_log(out / f"retrain_K{k}.log", logbook)
        paths.append(save_model(out / f"retrain_K{k}.ckpt", new, swap_activations(EXACT, sig, tanh)))
        print(f"wrote {paths[-1]} (best epoch {logbook.best_epoch})")
    return paths


def cmd_scratch(cfg: ExperimentConfig, data: str | None = None) -> list[Path]:
    out = _ensure_out(cfg)
    ds = _dataset(cfg, data)
    paths = []
    for k in cfg.pwl.segments:
        sig, tanh = make_specs(cfg.pwl.fitter, k, cfg.pwl.half_range)
        tc = replace(cfg.train, epochs=cfg.scratch_epochs, seed=cfg.train.seed + k)
        new, logbook = train_scratch(sig, tanh, ds, tc)
        _write_log(out / f"scratch_K{k}.log", logbook)
        paths.append(save_model(out / f"scratch_K{k}.ckpt", new, swap_activations(EXACT, sig, tanh)))
        print(f"wrote {paths[-1]} (best epoch {logbook.best_epoch})")
    return paths


def cmd_evaluate(cfg: ExperimentConfig, model: str, label: str = "evaluate") -> str:
    params, acts = load_model(model)
    if cfg.fixed_point is not None and acts.mode == "pwl":
        acts = fixed_point_activations(acts, cfg.fixed_point)
    test = _test_partition(cfg)
    _, line = _eval_record(label, acts.segments, acts, params, test, cfg.channel.qam_order)
    print(line)
    return line


def _sweep_one(args):
    """Worker for one segment count: swap-only and re-trained results."""
    cfg, params, k, test = args
    order = cfg.channel.qam_order
    sig, tanh = make_specs(cfg.pwl.fitter, k, cfg.pwl.half_range)
    acts = swap_activations(EXACT, sig, tanh)
    _, no_retrain = _eval_record("no-retrain", k, acts, params, test, order)
    tc = replace(cfg.train, epochs=cfg.retrain_epochs, seed=cfg.train.seed + k)
    new, logbook = retrain(params, sig, tanh, build_dataset(cfg.channel), tc)
    _, with_retrain = _eval_record("retrain", k, acts, new, test, order)
    return k, no_retrain, with_retrain, logbook, new


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PWLEQ_THREADS", "1")))
    except ValueError:
        raise UsageError("PWLEQ_THREADS must be an integer") from None


def cmd_sweep(cfg: ExperimentConfig) -> Path:
    """Pretrain once, then for each K evaluate the swapped model before and
    after re-training. Rows are flushed as soon as they are known."""
    out = _ensure_out(cfg)
    order = cfg.channel.qam_order
    ds = build_dataset(cfg.channel)
    test = _test_partition(cfg)
    params, logbook = pretrain(ds, replace(cfg.train, epochs=cfg.pretrain_epochs))
    _write_log(out / "pretrain.log", logbook)
    save_model(out / "pretrain.ckpt", params, EXACT)

    raw = evaluate_unequalized(test[0], test[1], order)
    (out / "unequalized.csv").write_text(RESULT_HEADER + "\n" + raw.record("unequalized", 0, "none") + "\n")

    results = out / "results.csv"
    with results.open("w") as fh:
        fh.write(RESULT_HEADER + "\n")
        _, line = _eval_record("exact", 0, EXACT, params, test, order)
        fh.write(line + "\n")
        fh.flush()
        jobs = [(cfg, params, k, test) for k in cfg.pwl.segments]
        workers = min(_threads(), len(jobs))
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                outcomes = list(pool.map(_sweep_one, jobs))
        else:
            outcomes = map(_sweep_one, jobs)
        retrained = {}
        for k, no_retrain, with_retrain, klog, new in outcomes:
            fh.write(no_retrain + "\n" + with_retrain + "\n")
            fh.flush()
            _write_log(out / f"retrain_K{k}.log", klog)
            retrained[k] = klog
            sig, tanh = make_specs(cfg.pwl.fitter, k, cfg.pwl.half_range)
            save_model(out / f"retrain_K{k}.ckpt", new, swap_activations(EXACT, sig, tanh))

    if cfg.scratch_segments:
        lines = ["segments,retrain_final_q_db,target_q_db,retrain_epochs_to_target,scratch_epochs_to_target"]
        for k in cfg.scratch_segments:
            if k not in retrained:
                continue
            sig, tanh = make_specs(cfg.pwl.fitter, k, cfg.pwl.half_range)
            final_q = retrained[k].best.val_q_db
            target = final_q - 0.1
            tc = replace(cfg.train, epochs=cfg.scratch_epochs, seed=cfg.train.seed + k)
            # only the epoch count to the target is needed, so stop there
            _, slog = train_scratch(sig, tanh, ds, tc, stop_at_q=target)
            _write_log(out / f"scratch_K{k}.log", slog)
            lines.append(
                f"{k},{final_q!r},{target!r},{retrained[k].epochs_to_reach(target)},{slog.epochs_to_reach(target)}"
            )
        (out / "scratch.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {results}")
    return results


def cmd_cost(segments: tuple[int, ...], shift_add: bool, out: Path | None = None) -> str:
    text = cost_report(segments, shift_add)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.csv").write_text(text)
    sys.stdout.write(text)
    return text


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="overrides channel and training seeds")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    p = argparse.ArgumentParser(prog="pwleq", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic channel dataset")
    a = sub.add_parser("approx", parents=[common], help="fit a PWL approximation")
    a.add_argument("kind", choices=[k.value for k in act.ActivationKind])
    a.add_argument("fitter")
    a.add_argument("segments", nargs="?", type=int)
    a.add_argument("half_range", nargs="?", type=float)
    for name in ("pretrain", "scratch"):
        s = sub.add_parser(name, parents=[common])
        s.add_argument("--data", help="dataset file (default: regenerate from config)")
    r = sub.add_parser("retrain", parents=[common])
    r.add_argument("--model", required=True)
    r.add_argument("--data")
    e = sub.add_parser("evaluate", parents=[common])
    e.add_argument("--model", required=True)
    sub.add_parser("sweep", parents=[common], help="reproduce the Q vs segments experiment")
    c = sub.add_parser("cost", parents=[common], help="hardware cost table")
    c.add_argument("--segments", default="3,5,7,9")
    c.add_argument("--shift-add", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        if args.command == "approx":
            cmd_approx(args.kind, args.fitter, args.segments, args.half_range, Path(args.out or "."))
        elif args.command == "cost":
            cmd_cost(_int_list(args.segments), args.shift_add, Path(args.out) if args.out else None)
        else:
            cfg = load_config(args.config, args.seed, args.out)
            if args.command == "generate":
                cmd_generate(cfg)
            elif args.command == "pretrain":
                cmd_pretrain(cfg, args.data)
            elif args.command == "retrain":
                cmd_retrain(cfg, args.model, args.data)
            elif args.command == "scratch":
                cmd_scratch(cfg, args.data)
            elif args.command == "evaluate":
                cmd_evaluate(cfg, args.model)
            elif args.command == "sweep":
                cmd_sweep(cfg)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"pwleq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

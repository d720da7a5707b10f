"""``nvwb`` command line.

Every command reads an optional ``key = value`` config file (``--config``)
and ``--set key=value`` overrides; overrides win. Exit codes: 0 success,
2 invalid input, 3 fit did not converge, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import keyvalue
from .errors import ConfigError, FitError, WorkbenchError
from .fitting import Dataset, b_field_from_splitting, derive_pi_pulses, fit
from .kinetics import RateTable
from .readout import (
    PhaseProtocol,
    contrast_curve,
    contrast_decay_time,
    multiscale_windows,
    run_protocol,
)
from .sequences import ProtocolSpec, build, export_timing_table, parse_sweep, validate
from .workbench import (
    PRESETS,
    SyntheticConfig,
    load_image,
    preset_model,
    pipeline_run,
    relaxometry_sweep,
    roi_mask,
    seed_from_env,
    synthesize,
)

EXIT_OK, EXIT_INVALID, EXIT_NO_CONVERGENCE, EXIT_IO = 0, 2, 3, 4


class NotConverged(Exception):
    def __init__(self, payload: str):
        super().__init__("fit did not converge")
        self.payload = payload


# ---- config plumbing ---------------------------------------------------------

def load_config(path, overrides) -> dict:
    cfg = keyvalue.parse(Path(path).read_text()) if path else {}
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = value.strip()
    return cfg


class Config:
    """Typed access to a flat config that remembers which keys were read."""

    def __init__(self, raw: dict):
        self.raw = dict(raw)
        self.used: set[str] = set()

    def _get(self, key, default):
        if key in self.raw:
            self.used.add(key)
            return self.raw[key], True
        return default, False

    def str(self, key, default=None):
        return self._get(key, default)[0]

    def float(self, key, default=None):
        v, found = self._get(key, default)
        return keyvalue.to_float(key, v) if found else v

    def int(self, key, default=None):
        v, found = self._get(key, default)
        if not found:
            return v
        try:
            f = float(v)
            if f != int(f):
                raise ValueError
            return int(f)
        except (ValueError, OverflowError):
            raise ConfigError(f"{key}: not an integer: {v!r}") from None

    def bool(self, key, default=None):
        v, found = self._get(key, default)
        return keyvalue.to_bool(key, v) if found else v

    def pop_prefixed(self, prefix) -> dict:
        out = {k: v for k, v in self.raw.items() if k.startswith(prefix)}
        self.used.update(out)
        return out

    def check_unused(self):
        unknown = sorted(set(self.raw) - self.used)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def rate_table(cfg: Config) -> RateTable:
    path = cfg.str("rates")
    table = RateTable.from_text(Path(path).read_text()) if path else RateTable.default()
    gamma = cfg.float("gamma_sl")
    if gamma is not None:
        table = table.with_gamma_sl(gamma)
    eta = cfg.float("eta")
    if eta is not None:
        table = table.with_eta(eta)
    return table


def phase_protocol(cfg: Config, eta: float) -> PhaseProtocol:
    return PhaseProtocol.default(
        eta,
        init=cfg.float("init_s", 3.2e-3),
        wait=cfg.float("wait_s", 1e-6),
        readout=cfg.float("readout_s", 3.2e-3),
        sample_count=cfg.int("sample_count", 2000),
    )


def protocol_spec(cfg: Config) -> ProtocolSpec:
    keys = ("kind", "sweep", "init_laser_ns", "exposure_ns", "pi_half_ns", "pi_ns",
            "include_reference", "guard_ns", "repeats")
    items = {}
    spec_path = cfg.str("protocol_file")
    if spec_path:
        items.update(keyvalue.parse(Path(spec_path).read_text()))
    for k in keys:
        v = cfg.str(k)
        if v is not None:
            items[k] = v
    if "kind" not in items and cfg.str("protocol"):
        items["kind"] = cfg.str("protocol")
    return ProtocolSpec.from_text(keyvalue.dump(items))


def emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def config_comments(cfg: Config) -> str:
    return "".join(f"# {k} = {cfg.raw[k]}\n" for k in sorted(cfg.raw))


# ---- commands ----------------------------------------------------------------

def cmd_simulate_readout(cfg: Config, args) -> int:
    table = rate_table(cfg)
    protocol = phase_protocol(cfg, table.eta)
    limit = min(protocol.init.duration, protocol.readout.duration)
    w_max = cfg.float("w_max_s", limit)
    windows = multiscale_windows(w_max, cfg.int("n_windows", 400), cfg.float("w_min_s", 1e-9))
    curve = contrast_curve(table, protocol, windows)
    decay = None
    if cfg.bool("decay_fit", True):
        try:
            decay = contrast_decay_time(curve)
        except FitError:
            decay = None
    traj_out = cfg.str("trajectory_out")
    fmt = cfg.str("format", "csv")
    cfg.check_unused()
    if traj_out:
        parts = run_protocol(table, protocol)
        for ph, traj in zip(protocol.phases, parts):
            Path(f"{traj_out}.{ph.label}.csv").write_text(traj.to_csv(table))
    if fmt == "json":
        doc = json.loads(curve.to_json(decay))
        doc["config"] = cfg.raw
        emit(json.dumps(doc, indent=1) + "\n", args.out)
    elif fmt == "csv":
        emit(config_comments(cfg) + curve.to_csv(), args.out)
    else:
        raise ConfigError(f"format must be csv or json, got {fmt!r}")
    return EXIT_OK


def cmd_simulate_relaxometry(cfg: Config, args) -> int:
    table = rate_table(cfg)
    protocol = phase_protocol(cfg, table.eta)
    window = cfg.float("window_s", 5e-4)
    delays = np.array(parse_sweep(cfg.str("delays_s", "0:0.02:0.0005")))
    cfg.check_unused()
    c = relaxometry_sweep(table, protocol, delays, window)
    rows = "".join(f"{d!r},{v!r}\n" for d, v in zip(delays.tolist(), c.tolist()))
    emit(config_comments(cfg) + "delay_s,contrast\n" + rows, args.out)
    return EXIT_OK


def cmd_sequence_emit(cfg: Config, args) -> int:
    spec = protocol_spec(cfg)
    value = cfg.float("value")
    out_dir = cfg.str("out_dir")
    cfg.check_unused()
    values = [value] if value is not None else list(spec.sweep)
    if value is None and len(values) > 1 and not out_dir:
        raise ConfigError("sweep has several values: set 'value' or 'out_dir'")
    tables = []
    for v in values:
        seq = build(spec, v)
        problems = validate(seq)
        if problems:
            raise ConfigError("; ".join(f"{p.kind}: {p.detail}" for p in problems))
        tables.append(export_timing_table(seq))
    if out_dir:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for n, text in enumerate(tables):
            (d / f"sequence_{n:04d}.csv").write_text(text)
    else:
        emit(tables[0], args.out)
    return EXIT_OK


def cmd_fit(cfg: Config, args) -> int:
    data_path = cfg.str("data")
    if not data_path:
        raise ConfigError("fit needs 'data' (a CSV dataset)")
    kind = cfg.str("kind")
    if not kind:
        raise ConfigError("fit needs 'kind'")
    n_dips = cfg.int("n_dips")
    revivals = cfg.int("revivals")
    max_iter = cfg.int("max_iter", 500)
    theta0 = {k[6:]: keyvalue.to_float(k, v) for k, v in cfg.pop_prefixed("theta.").items()}
    cfg.check_unused()
    data = Dataset.from_csv(Path(data_path).read_text())
    result = fit(data, kind, theta0 or None, n_dips=n_dips, revivals=revivals, max_iter=max_iter)
    doc = json.loads(result.to_json())
    doc["config"] = cfg.raw
    derived = {}
    if kind == "rabi":
        half, full = derive_pi_pulses(result.params["omega"])
        derived = {"tau_pi_half_s": half, "tau_pi_s": full}
    elif kind == "lorentzian_multi" and result.model.n_dips >= 2:
        fs = sorted(v for k, v in result.params.items() if k.startswith("f"))
        derived = {"b_field_gauss": b_field_from_splitting(fs[0], fs[-1])}
    doc["derived"] = derived
    text = json.dumps(doc, indent=1) + "\n"
    if not result.converged:
        raise NotConverged(text)
    emit(text, args.out)
    return EXIT_OK


def cmd_synth(cfg: Config, args) -> int:
    preset = cfg.str("preset")
    seed = seed_from_env(cfg.int("seed", 0))
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        n_points = cfg.int("n_points")
        base = SyntheticConfig.preset(preset, cfg.float("noise_fraction", 0.2), seed, n_points)
        sigma = cfg.float("noise_sigma", base.noise_sigma)
        config = SyntheticConfig(base.kind, base.params, base.x_start, base.x_stop,
                                 base.n_points, sigma, seed, base.n_dips)
    else:
        raw = {k: v for k, v in cfg.raw.items() if k != "seed"}
        cfg.used.update(raw)
        raw["seed"] = str(seed)
        config = SyntheticConfig.from_mapping(raw)
    cfg.check_unused()
    data = synthesize(config)
    header = "".join(f"# {line}\n" for line in config.to_text().splitlines())
    emit(header + data.to_csv(), args.out)
    return EXIT_OK


def cmd_pipeline(cfg: Config, args) -> int:
    table = rate_table(cfg)
    spec = protocol_spec(cfg)
    seed = seed_from_env(cfg.int("seed", 0))
    window = cfg.float("window_s", 5e-4)
    sigma = cfg.float("noise_sigma", 0.0)
    theta = {k[6:]: keyvalue.to_float(k, v) for k, v in cfg.pop_prefixed("theta.").items()}
    cfg.check_unused()
    report = pipeline_run(spec, table, None, window, sigma, seed, theta or None)
    doc = report.to_dict()
    doc["config"] = {"file": cfg.raw, **doc["config"]}
    text = json.dumps(doc, indent=1) + "\n"
    if not report.fit.converged:
        raise NotConverged(text)
    emit(text, args.out)
    return EXIT_OK


def cmd_roi(cfg: Config, args) -> int:
    path = cfg.str("image")
    if not path:
        raise ConfigError("roi needs 'image' (PGM or CSV grid)")
    threshold = cfg.float("threshold", 0.85)
    mask_out = cfg.str("mask_out")
    cfg.check_unused()
    img = load_image(path)
    mask, mean = roi_mask(img, threshold)
    if mask_out:
        Path(mask_out).write_text("".join(",".join("1" if m else "0" for m in row) + "\n"
                                          for row in mask))
    doc = {"image": path, "width": img.width, "height": img.height, "threshold": threshold,
           "pixels": int(mask.sum()), "mean": mean, "max": float(img.pixels.max())}
    emit(json.dumps(doc, indent=1) + "\n", args.out)
    return EXIT_OK


def cmd_presets(cfg: Config, args) -> int:
    cfg.check_unused()
    doc = {}
    for name in PRESETS:
        m = preset_model(name)
        doc[name] = {"kind": m.kind, "theta": m.params, "x_range": PRESETS[name][1]}
    emit(json.dumps(doc, indent=1) + "\n", args.out)
    return EXIT_OK


# ---- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable; wins over --config)")
    common.add_argument("--out", help="output file (default: stdout)")

    p = argparse.ArgumentParser(prog="nvwb", description="NV-ensemble simulation and fitting workbench")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="rate-model simulations")
    simsub = sim.add_subparsers(dest="what", required=True)
    simsub.add_parser("readout", parents=[common], help="contrast versus integration window") \
        .set_defaults(func=cmd_simulate_readout)
    simsub.add_parser("relaxometry", parents=[common], help="contrast versus dark delay") \
        .set_defaults(func=cmd_simulate_relaxometry)

    seq = sub.add_parser("sequence", help="pulse sequences")
    seqsub = seq.add_subparsers(dest="what", required=True)
    seqsub.add_parser("emit", parents=[common], help="write laser/microwave/camera timing tables") \
        .set_defaults(func=cmd_sequence_emit)

    sub.add_parser("fit", parents=[common], help="fit a contrast dataset").set_defaults(func=cmd_fit)
    sub.add_parser("synth", parents=[common], help="synthetic dataset with seeded noise") \
        .set_defaults(func=cmd_synth)
    sub.add_parser("pipeline", parents=[common], help="simulate -> fit end to end") \
        .set_defaults(func=cmd_pipeline)
    sub.add_parser("roi", parents=[common], help="85%%-of-maximum region of a fluorescence image") \
        .set_defaults(func=cmd_roi)
    sub.add_parser("presets", parents=[common], help="list the built-in parameter presets") \
        .set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = Config(load_config(args.config, args.set))
        return args.func(cfg, args)
    except NotConverged as exc:
        if args.out:
            Path(args.out).write_text(exc.payload)
        else:
            sys.stdout.write(exc.payload)
        print("nvwb: fit did not converge", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except FitError as exc:
        print(f"nvwb: {exc}", file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except OSError as exc:
        print(f"nvwb: {exc}", file=sys.stderr)
        return EXIT_IO
    except (WorkbenchError, ValueError) as exc:
        print(f"nvwb: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())

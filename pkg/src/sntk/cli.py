"""Command-line experiment runner.

Subcommands: normal-form-sweep, train, landscape, two-modes, probe. Every
command takes --config (plain-text `key = value` file, `#` comments),
--seed, and --out; command-line flags override config-file values, and
the fully resolved configuration is written next to the outputs so any
run can be reproduced bit-exactly. All outputs are CSV.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sntk import kernel, normal_forms, rnn, training

SWEEP_CSV = "sweep.csv"
METRICS_CSV = "metrics.csv"
EVENTS_CSV = "bifurcations.csv"
LANDSCAPE_CSV = "landscape.csv"
PROBE_CSV = "probe.csv"
TEACHER_CKPT = "teacher.rnn"
RESOLVED_CONFIG = "config_resolved.txt"

_KINDS = {k.value: k for k in normal_forms.NormalFormKind}


class ConfigError(Exception):
    pass


class _Required:
    def __repr__(self):
        return "<required>"


REQUIRED = _Required()


def _parse_pair(text: str) -> tuple[float, float]:
    parts = text.replace(",", " ").split()
    if len(parts) != 2:
        raise ValueError(f"expected two numbers, got {text!r}")
    return float(parts[0]), float(parts[1])


def _parse_plant(text: str) -> list[tuple[float, float]]:
    pairs = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        a, b = chunk.split(",")
        pairs.append((float(a), float(b)))
    if not pairs:
        raise ValueError("empty fixed-point spec")
    return pairs


@dataclass(frozen=True)
class Opt:
    name: str
    conv: type | None  # str -> value; None keeps the raw string
    default: object
    help: str = ""

    def convert(self, raw: str):
        if self.conv is None:
            return raw
        try:
            return self.conv(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {self.name}: {raw!r} ({exc})") from exc


def _fmt_value(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(repr(float(x)) for x in value)
    return str(value)


GLOBAL_OPTS = [
    Opt("seed", int, 0, "base seed for every random stream"),
    Opt("out", None, REQUIRED, "output directory"),
]

SWEEP_OPTS = GLOBAL_OPTS + [
    Opt("kind", str, "pitchfork", "one of: " + ", ".join(_KINDS)),
    Opt("g_min", float, 0.5),
    Opt("g_max", float, 1.5),
    Opt("g_steps", int, 101),
    Opt("h0_low", float, -0.05),
    Opt("h0_high", float, 0.05),
    Opt("count", int, 64, "initial conditions per grid point"),
    Opt("T", int, 30, "timesteps per trajectory"),
]

TRAIN_CORE_OPTS = GLOBAL_OPTS + [
    Opt("hidden_size", int, 16),
    Opt("batch_size", int, 32),
    Opt("horizon", int, 15, "unrolled timesteps"),
    Opt("learning_rate", float, 5e-3),
    Opt("iterations", int, 20000),
    Opt("optimizer", str, "sgd", "sgd | natgrad"),
    Opt("natgrad_epsilon", float, 1e-4),
    Opt("natgrad_power_iters", int, 10),
    Opt("metrics_every", int, 50),
    Opt("ic_bounds", float, 1.0),
    Opt("loss_mode", str, "readout", "readout | full_state"),
    Opt("fixed_dataset", int, 0, "1: reuse one batch for every iteration"),
    Opt("probe_batch", int, 0, "evaluate kernel metrics on a fixed probe batch"),
    Opt("checkpoint_every", int, 0),
]

TRAIN_OPTS = TRAIN_CORE_OPTS + [
    Opt("plant", str, "0.75,0.75;0.75,-0.75", "teacher fixed points, readout plane"),
    Opt("plant_extra_scale", float, 0.1, "magnitude of the non-readout components"),
    Opt("plant_base_scale", float, 0.5, "shrink factor for the base weights kept"
        " on the complement of the planted directions"),
    Opt("teacher_checkpoint", str, "", "load the teacher instead of planting one"),
]

TWO_MODES_OPTS = TRAIN_CORE_OPTS + [
    Opt("teacher_eigs", _parse_pair, REQUIRED, "two unstable moduli, e1 > e2 > 1"),
    Opt("teacher_base_scale", float, 0.5, "spectral radius of the contractive rest"),
]

LANDSCAPE_OPTS = GLOBAL_OPTS + [
    Opt("checkpoint", str, REQUIRED),
    Opt("direction", str, "top-eig", "'top-eig' or a file of m floats"),
    Opt("alpha_min", float, -0.5),
    Opt("alpha_max", float, 0.5),
    Opt("alpha_steps", int, 41),
    Opt("batch_size", int, 32),
    Opt("horizon", int, 15),
    Opt("ic_bounds", float, 1.0),
]

PROBE_OPTS = GLOBAL_OPTS + [
    Opt("checkpoint", str, REQUIRED),
    Opt("batch_size", int, 32),
    Opt("horizon", int, 15),
    Opt("ic_bounds", float, 1.0),
    Opt("teacher_checkpoint", str, "", "also report the trajectory loss against this teacher"),
]

COMMANDS = {
    "normal-form-sweep": SWEEP_OPTS,
    "train": TRAIN_OPTS,
    "landscape": LANDSCAPE_OPTS,
    "two-modes": TWO_MODES_OPTS,
    "probe": PROBE_OPTS,
}


def parse_config_file(path: Path) -> dict[str, str]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected `key = value`")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_options(args: argparse.Namespace, opts: list[Opt]) -> dict:
    """Merge CLI flags over config-file values over defaults."""
    file_values = {}
    if args.config:
        file_values = parse_config_file(Path(args.config))
        known = {o.name for o in opts}
        unknown = sorted(set(file_values) - known - {"command"})
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    for opt in opts:
        cli_value = getattr(args, opt.name)
        if cli_value is not None:
            resolved[opt.name] = cli_value
        elif opt.name in file_values:
            resolved[opt.name] = opt.convert(file_values[opt.name])
        elif opt.default is REQUIRED:
            raise ConfigError(f"missing required option: {opt.name}")
        else:
            resolved[opt.name] = opt.default
    return resolved


def write_resolved_config(out_dir: Path, command: str, resolved: dict) -> None:
    lines = [f"command = {command}"]
    for key in sorted(resolved):
        lines.append(f"{key} = {_fmt_value(resolved[key])}")
    (out_dir / RESOLVED_CONFIG).write_text("\n".join(lines) + "\n")


def write_csv(path: Path, header: list[str], rows: list[list[str]]) -> None:
    lines = [",".join(header)] + [",".join(row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _prepare_out(resolved: dict, command: str, out: str) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_resolved_config(out_dir, command, resolved)
    return out_dir


fmt = training.format_float


def cmd_normal_form_sweep(cfg: dict, out: str) -> int:
    if cfg["kind"] not in _KINDS:
        raise ConfigError(f"unknown kind {cfg['kind']!r}; pick from {sorted(_KINDS)}")
    if cfg["count"] < 1:
        raise ConfigError("count must be >= 1")
    if cfg["g_steps"] < 1:
        raise ConfigError("g_steps must be >= 1")
    if cfg["T"] < 1:
        raise ConfigError("T must be >= 1")
    if cfg["h0_low"] > cfg["h0_high"]:
        raise ConfigError("need h0_low <= h0_high")
    out_dir = _prepare_out(cfg, "normal-form-sweep", out)
    grid = np.linspace(cfg["g_min"], cfg["g_max"], cfg["g_steps"]).tolist()
    sampler = normal_forms.H0Sampler(
        low=cfg["h0_low"], high=cfg["h0_high"], count=cfg["count"], seed=cfg["seed"]
    )
    rows = normal_forms.landscape_sweep(_KINDS[cfg["kind"]], grid, sampler, cfg["T"])
    write_csv(
        out_dir / SWEEP_CSV,
        ["g", "mean_norm"],
        [[fmt(g), fmt(v)] for g, v in rows],
    )
    return 0


def make_planted_teacher(
    N, pairs, extra_scale, seed, base_scale=0.5, readout=(0, 1)
) -> rnn.RnnModel:
    """Teacher with mirrored stable fixed points at the given readout coordinates.

    base_scale shrinks the Xavier base weights before planting, which
    controls how contractive the teacher is transverse to the planted
    directions (the planted fixed points themselves are exact either way).
    """
    base = rnn.init_xavier(N, [seed, 10])
    base = rnn.RnnModel(W=base_scale * base.W, b=base.b, readout=readout)
    rng = np.random.default_rng([seed, 11])
    points = []
    for a, b in pairs:
        x = extra_scale * rng.standard_normal(N)
        x[readout[0]] = a
        x[readout[1]] = b
        points.append(x)
    return rnn.plant_fixed_points(base, points)


def make_two_mode_teacher(N, e1, e2, base_scale, seed, readout=(0, 1)) -> rnn.RnnModel:
    """Teacher with eigenvalues exactly {e1, e2} plus a contractive random block."""
    base = rnn.init_xavier(N, [seed, 10])
    W = base.W.copy()
    W *= base_scale / rnn.spectral_radius(base)
    W[:2, :] = 0.0
    W[:, :2] = 0.0
    W[0, 0] = e1
    W[1, 1] = e2
    return rnn.RnnModel(W=W, b=np.zeros(N), readout=readout)


def _train_config(cfg: dict) -> training.TrainConfig:
    try:
        return training.TrainConfig(
            N=cfg["hidden_size"],
            B=cfg["batch_size"],
            T=cfg["horizon"],
            learning_rate=cfg["learning_rate"],
            iterations=cfg["iterations"],
            optimizer=cfg["optimizer"],
            natgrad_epsilon=cfg["natgrad_epsilon"],
            natgrad_power_iters=cfg["natgrad_power_iters"],
            metrics_every=cfg["metrics_every"],
            seed=cfg["seed"],
            ic_bounds=cfg["ic_bounds"],
            loss_mode=cfg["loss_mode"],
            fixed_dataset=bool(cfg["fixed_dataset"]),
            probe_batch=cfg["probe_batch"],
            checkpoint_every=cfg["checkpoint_every"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _run_training(cfg, out, teacher, command, extra_metrics=None, extra_names=()):
    config = _train_config(cfg)
    if teacher.N != config.N:
        raise ConfigError(
            f"teacher has N={teacher.N}, but hidden_size={config.N} was requested"
        )
    out_dir = _prepare_out(cfg, command, out)
    rnn.save_checkpoint(teacher, out_dir / TEACHER_CKPT)
    student = rnn.init_xavier(config.N, [config.seed, 12])
    try:
        result = training.train(
            config, student, teacher, out_dir=out_dir, extra_metrics=extra_metrics
        )
    except training.TrainingDiverged as exc:
        training.write_metrics_csv(exc.records, out_dir / METRICS_CSV)
        print(f"error: {exc}", file=sys.stderr)
        return 3
    training.write_metrics_csv(
        result.records, out_dir / METRICS_CSV, result.extras, extra_names
    )
    crossings = (
        training.detect_bifurcation(result.records)
        if len(result.records) >= 2
        else []
    )
    write_csv(
        out_dir / EVENTS_CSV,
        ["crossing_iteration"],
        [[fmt(c)] for c in crossings],
    )
    return 0


def cmd_train(cfg: dict, out: str) -> int:
    if cfg["teacher_checkpoint"]:
        teacher = _load_model(cfg["teacher_checkpoint"])
    else:
        try:
            pairs = _parse_plant(cfg["plant"])
        except ValueError as exc:
            raise ConfigError(f"bad --plant spec: {exc}") from exc
        teacher = make_planted_teacher(
            cfg["hidden_size"],
            pairs,
            cfg["plant_extra_scale"],
            cfg["seed"],
            cfg["plant_base_scale"],
        )
    return _run_training(cfg, out, teacher, "train")


def cmd_two_modes(cfg: dict, out: str) -> int:
    e1, e2 = cfg["teacher_eigs"]
    if not e1 > e2 > 1.0:
        raise ConfigError(f"need e1 > e2 > 1, got {e1}, {e2}")
    teacher = make_two_mode_teacher(
        cfg["hidden_size"], e1, e2, cfg["teacher_base_scale"], cfg["seed"]
    )

    def eig_metrics(model):
        top = rnn.eigen_moduli(model, 2)
        return {"student_eig1": top[0], "student_eig2": top[1]}

    return _run_training(
        cfg,
        out,
        teacher,
        "two-modes",
        extra_metrics=eig_metrics,
        extra_names=("student_eig1", "student_eig2"),
    )


def _load_model(path: str) -> rnn.RnnModel:
    try:
        return rnn.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {path}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad checkpoint {path}: {exc}") from exc


def _draw_h0(cfg: dict, N: int) -> np.ndarray:
    rng = np.random.default_rng([cfg["seed"], 20])
    return rng.uniform(-cfg["ic_bounds"], cfg["ic_bounds"], size=(cfg["batch_size"], N))


def _load_direction(spec: str, model, h0, T) -> np.ndarray:
    if spec == "top-eig":
        jac = kernel.state_jacobian(model, h0, T)
        _, direction = kernel.top_eigpair(kernel.fisher_matrix(jac))
        return direction
    try:
        values = [float(x) for x in Path(spec).read_text().split()]
    except OSError as exc:
        raise ConfigError(f"cannot read direction file {spec}: {exc}") from exc
    u = np.asarray(values, dtype=float)
    if u.shape != (rnn.num_params(model.N),):
        raise ConfigError(
            f"direction file must hold {rnn.num_params(model.N)} floats, got {u.size}"
        )
    norm = np.linalg.norm(u)
    if norm == 0:
        raise ConfigError("direction file holds a zero vector")
    return u / norm


def cmd_landscape(cfg: dict, out: str) -> int:
    if cfg["alpha_steps"] < 1:
        raise ConfigError("alpha_steps must be >= 1")
    model = _load_model(cfg["checkpoint"])
    out_dir = _prepare_out(cfg, "landscape", out)
    h0 = _draw_h0(cfg, model.N)
    direction = _load_direction(cfg["direction"], model, h0, cfg["horizon"])
    alphas = np.linspace(cfg["alpha_min"], cfg["alpha_max"], cfg["alpha_steps"])
    rows = kernel.landscape_sweep(model, h0, cfg["horizon"], direction, alphas)
    write_csv(
        out_dir / LANDSCAPE_CSV,
        ["alpha", "spec_norm", "stable_rank"],
        [[fmt(a), fmt(s), fmt(r)] for a, s, r in rows],
    )
    return 0


def cmd_probe(cfg: dict, out: str) -> int:
    model = _load_model(cfg["checkpoint"])
    out_dir = _prepare_out(cfg, "probe", out)
    h0 = _draw_h0(cfg, model.N)
    jac = kernel.state_jacobian(model, h0, cfg["horizon"])
    summary = kernel.sntk_summary(jac)
    header = ["spec_norm", "frob_norm", "stable_rank", "dominance_ratio"]
    if summary.spec_norm > 0:
        dec = kernel.decompose(jac, summary.top_eigvec)
        dominance = dec.dominance_ratio
    else:
        dominance = 0.0
    row = [
        fmt(summary.spec_norm),
        fmt(summary.frob_norm),
        fmt(summary.stable_rank),
        fmt(dominance),
    ]
    if cfg["teacher_checkpoint"]:
        teacher = _load_model(cfg["teacher_checkpoint"])
        if teacher.N != model.N:
            raise ConfigError("teacher and probed model disagree on N")
        straj = rnn.simulate(model, h0, cfg["horizon"])
        ttraj = rnn.simulate(teacher, h0, cfg["horizon"])
        header.append("loss")
        row.append(fmt(rnn.readout_loss(straj, ttraj, model.readout)))
    write_csv(out_dir / PROBE_CSV, header, [row])
    return 0


_HANDLERS = {
    "normal-form-sweep": cmd_normal_form_sweep,
    "train": cmd_train,
    "landscape": cmd_landscape,
    "two-modes": cmd_two_modes,
    "probe": cmd_probe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sntk",
        description="State-space tangent kernel experiments for dynamical models.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in COMMANDS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key = value config file")
        for opt in opts:
            flag = "--" + opt.name.replace("_", "-")
            if opt.conv is _parse_pair:
                p.add_argument(
                    flag, dest=opt.name, default=None, nargs=2, type=float,
                    metavar=("E1", "E2"), help=opt.help,
                )
            else:
                p.add_argument(
                    flag, dest=opt.name, default=None,
                    type=opt.conv if opt.conv is not None else str, help=opt.help,
                )
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if isinstance(getattr(args, "teacher_eigs", None), list):
        args.teacher_eigs = tuple(args.teacher_eigs)
    try:
        resolved = resolve_options(args, COMMANDS[args.command])
        return _HANDLERS[args.command](resolved, resolved["out"])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

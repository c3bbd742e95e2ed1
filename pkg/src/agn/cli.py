"""``agn`` command line: synth, train, eval, predict, gradcheck.

Exit codes: 0 success, 1 usage, 2 data or parse failure, 3 numeric
acceptance failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import load_model, save_model
from .errors import AGNError, ConfigError, CorruptCheckpointError, InputError, ParseError
from .model import ModelConfig, build

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_HORIZONS = (2, 4, 8, 10)

log = logging.getLogger("agn")


class UsageError(AGNError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; 2 is reserved for data errors here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run configuration


TRAIN_DEFAULTS = {"epochs": 50, "batch_size": 16, "lr": 5e-4, "lr_decay": 0.96, "lr_floor": 1e-4, "stride": 1}
MODEL_DEFAULTS = {f.name: f.default for f in dataclasses.fields(ModelConfig) if f.name != "coord_dim"}
CONFIG_KEYS = {**MODEL_DEFAULTS, **TRAIN_DEFAULTS}


def _coerce(key: str, raw: str):
    default = CONFIG_KEYS[key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(","))
        return type(default)(raw)
    except ValueError:
        raise UsageError(f"bad value for {key}: {raw!r}") from None


def read_config_file(path) -> dict:
    """Parse UTF-8 ``key=value`` lines; ``#`` starts a comment."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw)
    return out


def resolve_config(args) -> dict:
    """Defaults, then the config file, then ``--set`` pairs, then explicit flags."""
    given = {}
    if getattr(args, "config", None):
        given.update(read_config_file(args.config))
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        if key not in CONFIG_KEYS:
            raise UsageError(f"unknown key {key!r}")
        given[key] = _coerce(key, raw)
    given.update({k: getattr(args, k) for k in CONFIG_KEYS if getattr(args, k, None) is not None})
    values = {**CONFIG_KEYS, **given}
    values["seed"] = given["seed"] if "seed" in given else env_seed()
    # the joint count normally comes from the data; a stated one must agree
    values["n_joints"] = given.get("n_joints")
    return values


def env_seed() -> int:
    """``AGN_SEED`` when set, else 0."""
    env = os.environ.get("AGN_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"AGN_SEED must be an integer, got {env!r}") from None


def resolve_seed(args) -> int:
    return args.seed if getattr(args, "seed", None) is not None else env_seed()


def model_config(values: dict, n_joints: int) -> ModelConfig:
    if values.get("n_joints") not in (None, n_joints):
        raise InputError(f"data has {n_joints} joints but the configuration says {values['n_joints']}")
    fields = {k: values[k] for k in MODEL_DEFAULTS}
    fields["n_joints"] = n_joints
    try:
        return ModelConfig(**fields)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None


def write_config(values: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key in CONFIG_KEYS:
            v = values[key]
            if v is None:
                continue
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            fh.write(f"{key}={v}\n")


def _load_sequence(path) -> D.MotionSequence:
    if not Path(path).exists():
        raise InputError(f"no such file: {path}")
    return D.load(path)


def _parse_horizons(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad --horizons {text!r}") from None


def _parse_edges(text: str) -> list[tuple[int, int]]:
    try:
        return [tuple(int(v) for v in e.split("-")) for e in text.split(",") if e.strip()]
    except ValueError:
        raise UsageError(f"bad --edges {text!r}, expected e.g. 0-1,1-2") from None


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.bones:
        try:
            bones = [float(b) for b in args.bones.split(",")]
        except ValueError:
            raise UsageError(f"bad --bones {args.bones!r}") from None
    else:
        if args.joints < 1:
            raise UsageError("--joints must be >= 1")
        bones = [args.bone_length] * args.joints
    if args.frames < 1:
        raise UsageError("--frames must be >= 1")
    if args.fps <= 0 or args.noise < 0:
        raise UsageError("--fps must be > 0 and --noise >= 0")
    try:
        seq = D.synthesize(bones, args.frames, fps=args.fps, noise_sd=args.noise, seed=resolve_seed(args))
    except InputError as exc:
        raise UsageError(str(exc)) from None
    D.save(seq, args.out, args.format)
    print(f"joints={seq.n_joints} frames={seq.n_frames} fps={seq.fps:g}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .report import plot_loss_history
    from .training import TrainConfig, train, write_history

    values = resolve_config(args)
    seq = _load_sequence(args.data)
    cfg = model_config(values, seq.n_joints)
    if values["stride"] < 1 or values["epochs"] < 0 or values["batch_size"] < 1:
        raise UsageError("stride and batch_size must be >= 1, epochs >= 0")
    pairs = D.windows(seq, cfg.t_in, cfg.t_out, values["stride"])
    if not pairs:
        raise InputError(f"{args.data}: {seq.n_frames} frames is shorter than t_in + t_out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_config({**values, "n_joints": cfg.n_joints}, out / "config.txt")
    model, store = build(cfg, seed=values["seed"])
    log.info("model with %d parameters, %d training windows", store.n_params(), len(pairs))
    tc = TrainConfig(epochs=values["epochs"], batch_size=values["batch_size"], lr=values["lr"],
                     lr_decay=values["lr_decay"], lr_floor=values["lr_floor"], seed=values["seed"],
                     checkpoint_dir=str(out))
    history = train(model, pairs, tc)
    save_model(model, out / "model.agnc")
    write_history(history, out / "loss.csv")
    if history:
        plot_loss_history(history, out / "loss.png")
        print(f"epochs={tc.epochs} iterations={len(history)} "
              f"first_loss={history[0].loss:.4f} final_loss={history[-1].loss:.4f}")
    else:
        print("epochs=0 iterations=0")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .report import plot_eval
    from .training import evaluate

    model = load_model(args.checkpoint)
    cfg = model.config
    seq = _load_sequence(args.data)
    if seq.n_joints != cfg.n_joints:
        raise InputError(f"{args.data} has {seq.n_joints} joints, checkpoint expects {cfg.n_joints}")
    if args.horizons is None:
        horizons = [h for h in DEFAULT_HORIZONS if h <= cfg.t_out] or [cfg.t_out]
    else:
        horizons = _parse_horizons(args.horizons)
        bad = [h for h in horizons if not 1 <= h <= cfg.t_out]
        if bad or not horizons:
            raise UsageError(f"horizons {bad or horizons} outside 1..{cfg.t_out} (t_out of checkpoint)")
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    pairs = D.windows(seq, cfg.t_in, cfg.t_out, args.stride)
    if not pairs:
        raise InputError(f"{args.data}: {seq.n_frames} frames is shorter than t_in + t_out")
    report = evaluate(model, pairs, horizons, fps=seq.fps)
    print(report.table())
    if args.csv:
        report.to_csv(args.csv)
        if not args.no_plot:
            plot_eval(report, Path(args.csv).with_suffix(".png"))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_model(args.checkpoint)
    cfg = model.config
    seq = _load_sequence(args.input)
    if seq.n_joints != cfg.n_joints:
        raise InputError(f"{args.input} has {seq.n_joints} joints, checkpoint expects {cfg.n_joints}")
    if seq.n_frames < cfg.t_in:
        raise InputError(f"{args.input}: need at least {cfg.t_in} frames, got {seq.n_frames}")
    window = seq.joint_major()[:, -cfg.t_in:, :]
    pred = model.predict(window)
    truth = None
    if args.truth:
        tseq = _load_sequence(args.truth)
        if tseq.n_joints != cfg.n_joints or tseq.n_frames < cfg.t_out:
            raise InputError(f"{args.truth}: need {cfg.n_joints} joints and at least {cfg.t_out} frames")
        truth = tseq.joint_major()[:, :cfg.t_out, :]
    edges = _parse_edges(args.edges) if args.edges else None
    if edges and any(len(e) != 2 or not all(0 <= j < cfg.n_joints for j in e) for e in edges):
        raise UsageError(f"--edges must join joints 0..{cfg.n_joints - 1}")
    D.export(pred, args.out, truth=truth, format=args.format, edges=edges, fps=seq.fps)
    print(f"wrote {args.out} ({cfg.n_joints} joints x {cfg.t_out} frames)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import gradient_suite

    if args.tolerance < 0:
        raise UsageError("--tolerance must be >= 0")
    rows = gradient_suite(seed=resolve_seed(args), max_coords=args.coords)
    failed = 0
    print(f"{'item':<14} {'max_rel_err':>12}  status")
    for name, err in rows:
        ok = err <= args.tolerance and np.isfinite(err)
        failed += not ok
        print(f"{name:<14} {err:>12.3e}  {'pass' if ok else 'FAIL'}")
    print(f"{len(rows) - failed}/{len(rows)} within tolerance {args.tolerance:g}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_model_flags(p):
    p.add_argument("--config", help="key=value file; flags override it")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-decay", dest="lr_decay", type=float)
    p.add_argument("--stride", type=int, help="window stride over the training sequence")
    p.add_argument("--t-in", dest="t_in", type=int)
    p.add_argument("--t-out", dest="t_out", type=int)
    p.add_argument("--d-p", dest="d_p", type=int)
    p.add_argument("--temporal-dim", dest="temporal_dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agn", description="Attractor-guided motion prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", help="generate a synthetic articulated chain sequence")
    p.add_argument("--joints", type=int, default=3)
    p.add_argument("--bones", help="comma separated bone lengths (mm); overrides --joints")
    p.add_argument("--bone-length", dest="bone_length", type=float, default=100.0)
    p.add_argument("--frames", type=int, default=500)
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian noise sd in mm")
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=["motb", "csv"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a MOTB/CSV sequence")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-horizon MPJPE against the zero-velocity baseline")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--horizons", help="comma separated frame offsets (default 2,4,8,10)")
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--csv", help="write the table as CSV (and a PNG next to it)")
    p.add_argument("--no-plot", dest="no_plot", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict the frames after a sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["csv", "svg"])
    p.add_argument("--truth", help="sequence whose first t_out frames are drawn as ground truth")
    p.add_argument("--edges", help="skeleton edges for SVG, e.g. 0-1,1-2 (default: chain)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="central-difference check of every layer")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--coords", type=int, default=40, help="coordinates sampled per tensor")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptCheckpointError, ParseError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

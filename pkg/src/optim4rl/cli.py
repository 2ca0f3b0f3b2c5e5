"""Command-line front end.

Subcommands: train, meta-train, eval, collect-grads, grad-hist,
identity.  Every run takes its settings from an optional flat key-value
config file plus flag overrides (flags win), writes the fully resolved
config next to its outputs, and exits 0 on success, 2 on config or
usage errors, 1 on runtime failure.
"""

import argparse
import os
import sys

import numpy as np

from . import experiments as ex
from . import metatrain as mt
from .gridworld import ENV_NAMES


class ConfigError(Exception):
    pass


def _parse_envs(value):
    if value == "all6":
        return tuple(ENV_NAMES)
    return tuple(v.strip() for v in value.split(",") if v.strip())


# Per-command schema: key -> (parser, default).  Defaults of None defer
# to the downstream dataclass or function defaults.
_COMMON_OUT = ("out", str, None)

SCHEMAS = {
    "train": [
        ("env", str, "small_dense_short"),
        ("optimizer", str, "adam"),
        ("alpha", float, None),
        ("seed", int, 0),
        ("iterations", int, 5000),
        ("eval_every", int, 100),
        ("eval_episodes", int, 10),
        ("checkpoint", str, ""),
        _COMMON_OUT,
    ],
    "meta-train": [
        ("envs", _parse_envs, ("small_dense_short",)),
        ("units", int, 4),
        ("optimizer", str, "optim4rl"),
        ("inner_steps", int, 4),
        ("reset_interval", int, 512),
        ("meta_lr", float, 1e-4),
        ("iterations", int, 1000),
        ("seed", int, 0),
        ("alpha", float, None),
        ("checkpoint_every", int, 0),
        _COMMON_OUT,
    ],
    "eval": [
        ("env", str, "small_dense_short"),
        ("episodes", int, 200),
        ("seed", int, 0),
        _COMMON_OUT,
    ],
    "collect-grads": [
        ("env", str, "big_dense_long"),
        ("optimizer", str, "rmsprop"),
        ("alpha", float, None),
        ("iterations", int, 1000),
        ("seed", int, 0),
        ("coords", int, 0),
        ("warmup", int, 0),
        _COMMON_OUT,
    ],
    "grad-hist": [
        ("data", str, ""),
        ("bins", int, 50),
        _COMMON_OUT,
    ],
    "identity": [
        ("data", str, ""),
        ("mode", str, "processed"),
        ("epochs", int, 1000),
        ("seed", int, 0),
        ("lr", float, None),
        ("batch", int, 256),
        ("seq_len", int, 20),
        ("max_scalars", int, 1_000_000),
        _COMMON_OUT,
    ],
}


def _read_config_file(path, schema):
    """Flat `key = value` lines; '#' starts a comment.  Unknown keys and
    malformed lines are rejected with their line number."""
    known = {key: parse for key, parse, _ in schema}
    out = {}
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}")
    for ln, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{ln}: expected `key = value`, got {raw!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in known:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        try:
            out[key] = known[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}:{ln}: bad value for {key!r}: {e}")
    return out


def _resolve(args, schema):
    """Merge file config and flag overrides over the schema defaults."""
    settings = dict((key, default) for key, _, default in schema)
    if args.config:
        settings.update(_read_config_file(args.config, schema))
    for key, _, _ in schema:
        flag_val = getattr(args, key)
        if flag_val is not None:
            settings[key] = flag_val
    return settings


def _format_value(v):
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _write_resolved(out_dir, settings, schema):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w") as f:
        for key, _, _ in schema:
            value = settings[key]
            if value is None:
                continue
            f.write(f"{key} = {_format_value(value)}\n")


def _require_out(settings):
    if not settings.get("out"):
        raise ConfigError("an output directory is required (--out or `out = ...`)")
    return settings["out"]


def _cmd_train(settings):
    out = _require_out(settings)
    cfg = ex.RunConfig(env=settings["env"], optimizer=settings["optimizer"],
                       alpha=settings["alpha"], seed=settings["seed"],
                       iterations=settings["iterations"],
                       eval_every=settings["eval_every"],
                       eval_episodes=settings["eval_episodes"],
                       checkpoint=settings["checkpoint"], out_dir=out)
    settings["alpha"] = cfg.alpha
    _write_resolved(out, settings, SCHEMAS["train"])
    ex.run_training(cfg)


def _cmd_meta_train(settings):
    out = _require_out(settings)
    cfg = mt.MetaTrainConfig(envs=settings["envs"], n_units=settings["units"],
                             optimizer=settings["optimizer"],
                             inner_steps=settings["inner_steps"],
                             reset_interval=settings["reset_interval"],
                             meta_lr=settings["meta_lr"],
                             iterations=settings["iterations"],
                             seed=settings["seed"], alpha=settings["alpha"],
                             checkpoint_every=settings["checkpoint_every"])
    _write_resolved(out, settings, SCHEMAS["meta-train"])
    mt.meta_train(cfg, out_dir=out)


def _cmd_eval(settings):
    out = _require_out(settings)
    _write_resolved(out, settings, SCHEMAS["eval"])
    ret = ex.random_policy_baseline(settings["env"], settings["episodes"],
                                    settings["seed"])
    ex.write_csv(os.path.join(out, "baseline.csv"), "env,seed,episodes,return",
                 [(settings["env"], settings["seed"], settings["episodes"], ret)])


def _cmd_collect_grads(settings):
    out = _require_out(settings)
    _write_resolved(out, settings, SCHEMAS["collect-grads"])
    coords = settings["coords"] or None
    ex.collect_gradients(settings["env"], settings["optimizer"],
                         settings["iterations"], settings["seed"],
                         alpha=settings["alpha"], coords=coords,
                         warmup=settings["warmup"],
                         out=os.path.join(out, "gradients.bin"))


def _cmd_grad_hist(settings):
    out = _require_out(settings)
    if not settings["data"]:
        raise ConfigError("grad-hist needs a dataset path (--data)")
    _write_resolved(out, settings, SCHEMAS["grad-hist"])
    dataset = ex.GradientDataset.load(settings["data"])
    edges, mass = ex.grad_histogram(dataset, bins=settings["bins"])
    rows = [(float(edges[i]), float(edges[i + 1]), float(mass[i]))
            for i in range(mass.size)]
    ex.write_csv(os.path.join(out, "histogram.csv"), ex.HIST_CSV_HEADER, rows)


def _cmd_identity(settings):
    out = _require_out(settings)
    if not settings["data"]:
        raise ConfigError("identity needs a dataset path (--data)")
    _write_resolved(out, settings, SCHEMAS["identity"])
    dataset = ex.GradientDataset.load(settings["data"])
    result = ex.identity_experiment(dataset, settings["mode"],
                                    epochs=settings["epochs"],
                                    seed=settings["seed"],
                                    lrs=settings["lr"],
                                    batch=settings["batch"],
                                    seq_len=settings["seq_len"],
                                    max_scalars=settings["max_scalars"])
    rows = [(i + 1, result["loss"][i], result["accuracy"][i])
            for i in range(len(result["loss"]))]
    ex.write_csv(os.path.join(out, f"identity_{settings['mode']}.csv"),
                 ex.CURVE_CSV_HEADER, rows)
    ex.write_csv(os.path.join(out, f"identity_{settings['mode']}_summary.csv"),
                 "mode,lr,final_accuracy",
                 [(result["mode"], result["lr"], result["final_accuracy"])])


COMMANDS = {
    "train": _cmd_train,
    "meta-train": _cmd_meta_train,
    "eval": _cmd_eval,
    "collect-grads": _cmd_collect_grads,
    "grad-hist": _cmd_grad_hist,
    "identity": _cmd_identity,
}


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="optim4rl",
        description="Gridworld experiments with learned and classical optimizers.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, schema in SCHEMAS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="flat key=value config file; flags override it")
        for key, parse, _ in schema:
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, type=parse, default=None)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    schema = SCHEMAS[args.command]
    try:
        settings = _resolve(args, schema)
        COMMANDS[args.command](settings)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

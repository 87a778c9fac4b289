"""Command-line entry point for the full training and evaluation pipeline.

Subcommands: gen-synth, pretrain, calibrate, account, train-dp, probe,
finetune, report. Exit codes: 0 success, 1 configuration error, 2 runtime
error, 3 infeasible privacy budget.

Run configuration is a flat key-value text file with section prefixes
(``model.``, ``data.``, ``optim.``, ``privacy.``, ``run.``); unknown keys are
rejected and every value is validated before any computation starts. The
effective configuration, per-step metrics, periodic checkpoints, and a
privacy statement (written even for aborted runs) land in the run's output
directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import accountant, checkpoint, data, dp_optim, evaluate, mae

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_INFEASIBLE = 3


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration


def _positive(kind, name):
    def convert(text):
        value = kind(text)
        if value <= 0:
            raise ConfigError(f"{name} must be positive, got {text}")
        return value

    return convert


def _nonnegative(kind, name):
    def convert(text):
        value = kind(text)
        if value < 0:
            raise ConfigError(f"{name} must be >= 0, got {text}")
        return value

    return convert


def _bool(text):
    if text.lower() in ("true", "yes", "1"):
        return True
    if text.lower() in ("false", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _choice(*options):
    def convert(text):
        if text not in options:
            raise ConfigError(f"expected one of {options}, got {text!r}")
        return text

    return convert


def _auto_or(convert):
    def inner(text):
        if text == "auto":
            return "auto"
        return convert(text)

    return inner


def _unit_interval(text):
    value = float(text)
    if not 0.0 <= value < 1.0:
        raise ConfigError(f"expected a value in [0, 1), got {text}")
    return value


# key -> (converter, default); defaults follow the published pretraining
# conventions (clip 0.1, noise 0.5, epsilon 8, delta 1/2n, AdamW with warmup
# then cosine decay) at desk-scale batch and step counts
CONFIG_KEYS = {
    "model.preset": (_choice(*mae.PRESETS), "micro"),
    "model.image_size": (_positive(int, "model.image_size"), None),
    "model.channels": (_positive(int, "model.channels"), None),
    "model.patch_size": (_positive(int, "model.patch_size"), None),
    "model.encoder_depth": (_positive(int, "model.encoder_depth"), None),
    "model.encoder_width": (_positive(int, "model.encoder_width"), None),
    "model.encoder_heads": (_positive(int, "model.encoder_heads"), None),
    "model.decoder_depth": (_positive(int, "model.decoder_depth"), None),
    "model.decoder_width": (_positive(int, "model.decoder_width"), None),
    "model.decoder_heads": (_positive(int, "model.decoder_heads"), None),
    "model.mask_ratio": (_unit_interval, 0.75),
    "model.loss_on_masked_only": (_bool, True),
    "model.normalize_patch_targets": (_bool, False),
    "data.train": (str, None),
    "optim.optimizer": (_choice("sgd", "adamw"), "adamw"),
    "optim.clip_norm": (_positive(float, "optim.clip_norm"), 0.1),
    "optim.noise_multiplier": (_auto_or(_nonnegative(float, "optim.noise_multiplier")), 0.5),
    "optim.base_lr": (_positive(float, "optim.base_lr"), 1e-3),
    "optim.warmup_steps": (_nonnegative(int, "optim.warmup_steps"), 50),
    "optim.total_steps": (_positive(int, "optim.total_steps"), 500),
    "optim.lr_floor": (_unit_interval, 0.1),
    "optim.beta1": (_unit_interval, 0.9),
    "optim.beta2": (_unit_interval, 0.95),
    "optim.weight_decay": (_nonnegative(float, "optim.weight_decay"), 0.005),
    "optim.eps_opt": (_positive(float, "optim.eps_opt"), 1e-8),
    "optim.expected_batch_size": (_positive(int, "optim.expected_batch_size"), 64),
    "privacy.epsilon": (_positive(float, "privacy.epsilon"), 8.0),
    "privacy.delta": (_auto_or(_positive(float, "privacy.delta")), "auto"),
    "run.seed": (int, 0),
    "run.out": (str, None),
    "run.checkpoint_every": (_nonnegative(int, "run.checkpoint_every"), 0),
}

MODEL_FIELDS = [k.split(".", 1)[1] for k in CONFIG_KEYS
                if k.startswith("model.") and k != "model.preset"]


def parse_config(path) -> dict:
    """Read and validate a run configuration file; unknown keys are fatal."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key or not raw:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        converter, _ = CONFIG_KEYS[key]
        try:
            values[key] = converter(raw)
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {e}") from None
    config = {key: default for key, (_, default) in CONFIG_KEYS.items()}
    config.update(values)
    return config


def resolve_model(config) -> mae.MaeConfig:
    base = dataclasses.asdict(mae.PRESETS[config["model.preset"]])
    for field in MODEL_FIELDS:
        value = config[f"model.{field}"]
        if value is not None:
            base[field] = value
    base["mask_ratio"] = config["model.mask_ratio"]
    base["loss_on_masked_only"] = config["model.loss_on_masked_only"]
    base["normalize_patch_targets"] = config["model.normalize_patch_targets"]
    try:
        return mae.MaeConfig(**base)
    except ValueError as e:
        raise ConfigError(f"invalid model configuration: {e}") from None


def resolve_optim(config) -> dp_optim.DpOptimConfig:
    sigma = config["optim.noise_multiplier"]
    try:
        return dp_optim.DpOptimConfig(
            clip_norm=config["optim.clip_norm"],
            noise_multiplier=None if sigma == "auto" else sigma,
            optimizer=config["optim.optimizer"],
            base_lr=config["optim.base_lr"],
            warmup_steps=config["optim.warmup_steps"],
            total_steps=config["optim.total_steps"],
            lr_floor=config["optim.lr_floor"],
            beta1=config["optim.beta1"],
            beta2=config["optim.beta2"],
            weight_decay=config["optim.weight_decay"],
            eps_opt=config["optim.eps_opt"],
            expected_batch_size=config["optim.expected_batch_size"],
        )
    except ValueError as e:
        raise ConfigError(f"invalid optimizer configuration: {e}") from None


def require_dataset(config) -> data.DatasetManifest:
    root = config["data.train"]
    if root is None:
        raise ConfigError("data.train must point at a dataset directory")
    if not Path(root).is_dir():
        raise ConfigError(f"data.train directory {root} does not exist")
    return data.load_dataset(root)


def require_out(config) -> Path:
    if config["run.out"] is None:
        raise ConfigError("run.out must name an output directory")
    out = Path(config["run.out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_effective_config(out: Path, config) -> None:
    lines = [f"{key} = {config[key]}" for key in CONFIG_KEYS if config[key] is not None]
    (out / "config.effective").write_text("\n".join(lines) + "\n")


class RunLock:
    """Exclusive ownership of an output directory for the run's duration."""

    def __init__(self, out: Path):
        self.path = out / "lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"output directory is locked by another run ({self.path})"
            ) from None
        with os.fdopen(fd, "w") as f:
            f.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        try:
            self.path.unlink()
        except OSError:
            pass
        return False


def write_privacy_statement(out: Path, sigma: float, q: float, delta: float,
                            steps_planned: int, steps_completed: int) -> None:
    """Recompute the realized guarantee from the actual mechanism parameters."""
    if steps_completed == 0:
        epsilon, alpha = 0.0, math.nan
    elif sigma == 0.0:
        epsilon, alpha = math.inf, math.nan
    else:
        curve = accountant.compose(accountant.rdp_curve(q, sigma), steps_completed)
        epsilon, alpha = accountant.rdp_to_dp(curve, delta)
    text = (
        f"sigma = {sigma:.12g}\n"
        f"q = {q:.12g}\n"
        f"steps_planned = {steps_planned}\n"
        f"steps_completed = {steps_completed}\n"
        f"delta = {delta:.12g}\n"
        f"epsilon = {epsilon:.12g}\n"
        f"accountant_alpha = {alpha:.12g}\n"
    )
    (out / "privacy.txt").write_text(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args) -> int:
    if args.resolution < 4:
        raise ConfigError(f"--resolution must be at least 4, got {args.resolution}")
    if args.count < 1:
        raise ConfigError(f"--count must be at least 1, got {args.count}")
    manifest = data.generate_synthetic(args.count, args.resolution, args.seed,
                                       args.out, role=args.role, classes=args.classes)
    print(f"wrote {manifest.n} images to {manifest.root} (digest {manifest.digest[:16]})")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    budget = accountant.PrivacyBudget(args.epsilon, args.delta)
    sigma = accountant.calibrate_sigma(budget, args.q, args.steps)
    print(f"{sigma:.12g}")
    return EXIT_OK


def cmd_account(args) -> int:
    budget = accountant.dp_guarantee(
        accountant.MechanismParams(args.q, args.sigma, args.steps), args.delta)
    print(f"{budget.epsilon:.12g}")
    return EXIT_OK


def _load_init(path) -> mae.MaeParams:
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    return mae.load_model(path)


def cmd_pretrain(args) -> int:
    config = parse_config(args.config)
    model_config = resolve_model(config)
    dataset = require_dataset(config)
    optim = resolve_optim(config)
    out = require_out(config)
    seed = config["run.seed"]

    start_step, state = 0, None
    with RunLock(out):
        write_effective_config(out, config)
        if args.resume:
            params = _load_init(args.resume)
            state_path = f"{args.resume}.state"
            if not Path(state_path).is_file():
                raise ConfigError(f"optimizer state {state_path} does not exist")
            state, start_step = dp_optim.load_opt_state(state_path)
        else:
            params = mae.init_params(model_config, seed)
        params, reports, state = dp_optim.train_nonprivate(
            params, dataset, optim, master_seed=seed,
            metrics_path=out / "metrics.csv",
            checkpoint_dir=out if config["run.checkpoint_every"] else None,
            checkpoint_every=config["run.checkpoint_every"],
            start_step=start_step, state=state)
        final = out / "final.tensors"
        mae.save_model(final, params)
        dp_optim.save_opt_state(f"{final}.state", state, optim.total_steps)
    if reports:
        print(f"pretrained {len(reports)} steps; final loss {reports[-1][1]:.6g}")
    return EXIT_OK


def cmd_train_dp(args) -> int:
    config = parse_config(args.config)
    model_config = resolve_model(config)
    dataset = require_dataset(config)
    optim = resolve_optim(config)
    out = require_out(config)
    seed = config["run.seed"]

    n = dataset.n
    q = optim.expected_batch_size / n
    if q > 1.0:
        raise ConfigError(
            f"optim.expected_batch_size {optim.expected_batch_size} exceeds dataset size {n}"
        )
    delta = config["privacy.delta"]
    if delta == "auto":
        delta = 1.0 / (2 * n)
    budget = accountant.PrivacyBudget(config["privacy.epsilon"], delta)

    if args.init:
        params = _load_init(args.init)
        if params.config != model_config:
            raise ConfigError(
                "model configuration in the checkpoint differs from the config file"
            )
    else:
        params = mae.init_params(model_config, seed)

    with RunLock(out):
        write_effective_config(out, config)
        # calibration happens before any data is touched; infeasible budgets
        # abort with the bracket diagnostics
        sigma = optim.noise_multiplier
        if sigma is None:
            sigma = accountant.calibrate_sigma(budget, q, optim.total_steps)
            optim = dataclasses.replace(optim, noise_multiplier=sigma)
        write_privacy_statement(out, sigma, q, delta, optim.total_steps, 0)

        result = None
        try:
            result = dp_optim.train_dp(
                params, dataset, optim, budget=budget, master_seed=seed,
                metrics_path=out / "metrics.csv",
                checkpoint_dir=out if config["run.checkpoint_every"] else None,
                checkpoint_every=config["run.checkpoint_every"])
        finally:
            steps_done = result.steps_completed if result else _count_metric_rows(out)
            write_privacy_statement(out, sigma, q, delta, optim.total_steps, steps_done)

        mae.save_model(out / "final.tensors", result.params)
        if result.interrupted:
            print(f"interrupted after {result.steps_completed} steps; "
                  f"privacy statement reflects completed work", file=sys.stderr)
            return EXIT_RUNTIME
    eps = result.realized_epsilon
    print(f"trained {result.steps_completed} steps; realized epsilon {eps:.12g} "
          f"at delta {delta:.12g}")
    return EXIT_OK


def _count_metric_rows(out: Path) -> int:
    path = out / "metrics.csv"
    if not path.is_file():
        return 0
    return max(0, len(path.read_text().splitlines()) - 1)


def _load_eval_pair(root):
    root = Path(root)
    train_dir, eval_dir = root / "train", root / "eval"
    if not train_dir.is_dir() or not eval_dir.is_dir():
        raise ConfigError(f"--data {root} must contain train/ and eval/ datasets")
    return data.load_dataset(train_dir), data.load_dataset(eval_dir)


def cmd_probe(args) -> int:
    params = _load_init(args.checkpoint)
    train, eval_set = _load_eval_pair(args.data)
    result = evaluate.linear_probe(params, train, eval_set, seed=args.seed)
    if args.log:
        evaluate.append_result(args.log, args.run_id, "probe", "probe", result)
    print(f"{result.accuracy:.12g}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    if args.shots < 1:
        raise ConfigError(f"--shots must be at least 1, got {args.shots}")
    params = _load_init(args.checkpoint)
    train, eval_set = _load_eval_pair(args.data)
    spec = evaluate.FewShotSpec(shots=args.shots, epochs=args.epochs)
    result = evaluate.few_shot_finetune(params, spec, train, eval_set, seed=args.seed)
    if args.log:
        evaluate.append_result(args.log, args.run_id, "finetune", args.shots, result)
    print(f"{result.accuracy:.12g}")
    return EXIT_OK


def cmd_report(args) -> int:
    run = Path(args.run)
    metrics = run / "metrics.csv"
    if not metrics.is_file():
        raise RuntimeError(f"no metrics file in {run}")
    lines = metrics.read_text().splitlines()
    if len(lines) < 2:
        raise RuntimeError(f"metrics file in {run} has no steps")
    header = lines[0].split(",")
    rows = [line.split(",") for line in lines[1:]]

    loss_series = run / "loss_vs_step.csv"
    eps_series = run / "epsilon_vs_step.csv"
    step_i = header.index("step")
    loss_i = header.index("loss_mean")
    eps_i = header.index("epsilon") if "epsilon" in header else None
    loss_series.write_text(
        "step,loss_mean\n" + "\n".join(f"{r[step_i]},{r[loss_i]}" for r in rows) + "\n")
    if eps_i is not None:
        eps_series.write_text(
            "step,epsilon\n" + "\n".join(f"{r[step_i]},{r[eps_i]}" for r in rows) + "\n")

    print(",".join(header))
    for row in rows:
        print(",".join(row))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpmae",
        description="differentially private masked-autoencoder training lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="render a procedural synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--resolution", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--role", default="synthetic-pretrain")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("pretrain", help="non-private warm-start training")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint path prefix to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("calibrate", help="noise multiplier for a target budget")
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("account", help="epsilon for given mechanism parameters")
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("train-dp", help="differentially private training")
    p.add_argument("--config", required=True)
    p.add_argument("--init", default=None, help="warm-start checkpoint")
    p.set_defaults(func=cmd_train_dp)

    p = sub.add_parser("probe", help="linear probe of a frozen encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="directory containing train/ and eval/ labeled datasets")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None)
    p.add_argument("--run-id", default="probe")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("finetune", help="K-shot full-model fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True,
                   help="directory containing train/ and eval/ labeled datasets")
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", default=None)
    p.add_argument("--run-id", default="finetune")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("report", help="consolidated metrics and plot series")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except evaluate.FewShotSpecError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except accountant.InfeasibleBudgetError as e:
        print(f"infeasible privacy budget: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValueError, RuntimeError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Differentially private optimization and the training loops.

The DP step works on flat float64 parameter vectors: clip each per-sample
gradient row to norm C, sum the rows, add a single Gaussian draw of standard
deviation sigma*C per coordinate, divide by the expected batch size, and feed
the result to SGD or decoupled-weight-decay AdamW.

Normalization convention: the update divides by the EXPECTED batch size n*q,
not the realized Poisson batch size. Dividing by the realized size would make
the denominator data-dependent and invalidate the sensitivity analysis; an
empty batch therefore still performs a pure-noise step, keeping the step
count data-independent.

Randomness is drawn from streams derived as (master_seed, purpose, step), so
runs are reproducible and the noise stream is independent of data order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import accountant, checkpoint, data, mae, seeds
from .autodiff import PerSampleGrads, per_sample_backward, backward, reduce_sum

METRICS_HEADER = "step,loss_mean,preclip_median_norm,clipped_fraction,realized_batch,lr,epsilon"


@dataclass
class DpOptimConfig:
    clip_norm: float = 0.1
    noise_multiplier: float | None = 0.5  # None: calibrate from the budget
    optimizer: str = "adamw"
    base_lr: float = 1e-3
    warmup_steps: int = 50
    total_steps: int = 500
    lr_floor: float = 0.1  # cosine decays to this fraction of base_lr
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.005
    eps_opt: float = 1e-8
    expected_batch_size: int = 64

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise ValueError(f"clip norm must be positive, got {self.clip_norm}")
        if self.noise_multiplier is not None and self.noise_multiplier < 0:
            raise ValueError(f"noise multiplier must be >= 0, got {self.noise_multiplier}")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.total_steps < 1:
            raise ValueError(f"total steps must be >= 1, got {self.total_steps}")
        if self.expected_batch_size < 1:
            raise ValueError("expected batch size must be >= 1")


@dataclass
class OptimState:
    t: int
    m: np.ndarray
    v: np.ndarray


@dataclass
class DpStepReport:
    step: int
    loss_mean: float
    preclip_min: float
    preclip_median: float
    preclip_max: float
    clipped_fraction: float
    realized_batch: int
    lr: float
    epsilon: float


@dataclass
class TrainResult:
    params: "mae.MaeParams"
    reports: list
    # None only when zero steps completed; infinite epsilon when sigma was 0
    realized_budget: accountant.PrivacyBudget | None
    sigma: float
    q: float
    steps_completed: int
    interrupted: bool = False

    @property
    def realized_epsilon(self) -> float:
        if self.steps_completed == 0:
            return 0.0
        return self.realized_budget.epsilon


def lr_at(config: DpOptimConfig, step: int) -> float:
    """Linear warmup then cosine decay to lr_floor * base_lr; step is 0-based."""
    if step < config.warmup_steps:
        return config.base_lr * (step + 1) / config.warmup_steps
    span = max(1, config.total_steps - 1 - config.warmup_steps)
    progress = min(1.0, (step - config.warmup_steps) / span)
    cosine = 0.5 * (1.0 + math.cos(math.pi * progress))
    return config.base_lr * (config.lr_floor + (1.0 - config.lr_floor) * cosine)


def clip_per_sample(grads: PerSampleGrads, clip_norm: float,
                    norms: np.ndarray | None = None) -> PerSampleGrads:
    """Scale each row by min(1, C/||row||); zero rows pass through unchanged.

    `norms` may carry precomputed row norms to avoid a second pass.
    """
    if clip_norm <= 0:
        raise ValueError(f"clip norm must be positive, got {clip_norm}")
    if norms is None:
        norms = grads.row_norms()
    factors = np.minimum(1.0, clip_norm / np.maximum(norms, 1e-300))
    return PerSampleGrads(
        batch_size=grads.batch_size,
        grads=grads.grads * factors[:, None],
        offsets=grads.offsets,
    )


def noisy_mean(grads: PerSampleGrads, sigma: float, clip_norm: float,
               batch_norm: float, rng: np.random.Generator) -> np.ndarray:
    """(sum of clipped rows + N(0, (sigma C)^2 I)) / batch_norm.

    Exactly one noise draw, one coordinate per parameter. `batch_norm` is the
    expected batch size; with an empty Poisson batch the result is pure noise.
    """
    if batch_norm <= 0:
        raise ValueError(f"batch normalization must be positive, got {batch_norm}")
    if grads.batch_size:
        max_norm = float(grads.row_norms().max())
        if max_norm > clip_norm * (1 + 1e-6):
            raise ValueError(
                f"rows must be clipped before noising: norm {max_norm} > C={clip_norm}"
            )
    total = grads.grads.sum(axis=0)
    noise = rng.standard_normal(total.shape[0])
    return (total + sigma * clip_norm * noise) / batch_norm


def dp_sgd_step(theta: np.ndarray, noisy_grad: np.ndarray, lr: float) -> np.ndarray:
    return theta - lr * noisy_grad


def init_adamw_state(dim: int) -> OptimState:
    return OptimState(t=0, m=np.zeros(dim), v=np.zeros(dim))


def dp_adamw_step(theta: np.ndarray, state: OptimState, noisy_grad: np.ndarray,
                  config: DpOptimConfig, lr: float):
    """One decoupled-weight-decay adaptive step with bias-corrected moments."""
    t = state.t + 1
    m = config.beta1 * state.m + (1 - config.beta1) * noisy_grad
    v = config.beta2 * state.v + (1 - config.beta2) * noisy_grad**2
    m_hat = m / (1 - config.beta1**t)
    v_hat = v / (1 - config.beta2**t)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + config.eps_opt)
                          + config.weight_decay * theta)
    return theta, OptimState(t=t, m=m, v=v)


def save_opt_state(path, state: OptimState, step: int) -> None:
    """Optimizer moments plus the step index a resumed run continues from."""
    checkpoint.save_tensors(path, {
        "m": state.m, "v": state.v,
        "t": np.array([state.t], dtype=np.float64),
        "step": np.array([step], dtype=np.float64),
    })


def load_opt_state(path):
    arrays = checkpoint.load_tensors(path)
    state = OptimState(t=int(arrays["t"][0]), m=arrays["m"], v=arrays["v"])
    return state, int(arrays["step"][0])


# ---------------------------------------------------------------------------
# flat parameter vector helpers


def flatten_params(params: "mae.MaeParams"):
    """(theta, offsets) over the model's parameters in declaration order."""
    offsets, total = {}, 0
    for name in params.names():
        size = params[name].data.size
        offsets[name] = (total, total + size, params[name].data.shape)
        total += size
    theta = np.empty(total)
    for name, (start, stop, shape) in offsets.items():
        theta[start:stop] = params[name].data.reshape(-1)
    return theta, offsets


def assign_params(params: "mae.MaeParams", theta: np.ndarray, offsets) -> None:
    """Publish a flat vector back into the model's named tensors."""
    arrays = {name: theta[start:stop].reshape(shape).copy()
              for name, (start, stop, shape) in offsets.items()}
    params.load_arrays(arrays)


def _apply_update(theta, state, grad_vec, config, lr):
    if config.optimizer == "sgd":
        return dp_sgd_step(theta, grad_vec, lr), state
    return dp_adamw_step(theta, state, grad_vec, config, lr)


def _batch_masks(config_model: "mae.MaeConfig", master_seed: int, step: int, count: int):
    rng = seeds.derive(master_seed, "mask", step)
    mask_seeds = rng.integers(2**63, size=count)
    return [mae.random_mask(config_model.num_patches, config_model.mask_ratio, int(s))
            for s in mask_seeds]


def _format_row(values) -> str:
    return ",".join(f"{v:.12g}" if isinstance(v, float) else str(v) for v in values)


# ---------------------------------------------------------------------------
# training loops


def train_dp(params: "mae.MaeParams", dataset: "data.DatasetManifest",
             config: DpOptimConfig, budget: accountant.PrivacyBudget | None,
             master_seed: int, metrics_path=None, checkpoint_dir=None,
             checkpoint_every: int = 0) -> TrainResult:
    """DP training: Poisson batch, per-sample grads, clip, noise, update.

    Runs exactly config.total_steps steps (fewer only on interrupt, reported
    honestly). The realized privacy budget is recomputed by the accountant
    from the actual (sigma, q, steps, delta) used, never copied from the
    requested budget. With sigma=0 no privacy is claimed (epsilon infinite).
    """
    n = dataset.n
    q = config.expected_batch_size / n
    if q > 1.0:
        raise ValueError(f"expected batch {config.expected_batch_size} exceeds n={n}")
    delta = budget.delta if budget is not None else 1.0 / (2 * n)

    sigma = config.noise_multiplier
    if sigma is None:
        if budget is None:
            raise ValueError("either a noise multiplier or a privacy budget is required")
        sigma = accountant.calibrate_sigma(budget, q, config.total_steps)

    theta, offsets = flatten_params(params)
    state = init_adamw_state(theta.size)
    per_step_curve = accountant.rdp_curve(q, sigma) if sigma > 0 else None

    def eps_at_step(steps_done: int) -> float:
        if per_step_curve is None or steps_done == 0:
            return math.inf if steps_done else 0.0
        eps, _ = accountant.rdp_to_dp(
            accountant.compose(per_step_curve, steps_done), delta)
        return eps

    reports = []
    interrupted = False
    metrics = open(metrics_path, "w") if metrics_path else None
    if metrics:
        metrics.write(METRICS_HEADER + "\n")
    try:
        for t in range(config.total_steps):
            try:
                batch_idx = data.poisson_sample(n, q, seeds.derive(master_seed, "poisson", t))
                realized = batch_idx.size
                if realized:
                    assign_params(params, theta, offsets)
                    images = data.fetch(dataset, batch_idx)
                    masks = _batch_masks(params.config, master_seed, t, realized)
                    _, losses = mae.mae_forward(params, images, masks)
                    psg = per_sample_backward(losses, params.values())
                    norms = psg.row_norms()
                    clipped = clip_per_sample(psg, config.clip_norm, norms=norms)
                    loss_mean = float(losses.data.mean())
                    stats = (float(norms.min()), float(np.median(norms)), float(norms.max()))
                    clipped_fraction = float(np.mean(norms > config.clip_norm))
                else:
                    clipped = PerSampleGrads(0, np.zeros((0, theta.size)), offsets)
                    loss_mean = math.nan
                    stats = (math.nan, math.nan, math.nan)
                    clipped_fraction = 0.0

                grad_vec = noisy_mean(clipped, sigma, config.clip_norm,
                                      config.expected_batch_size,
                                      seeds.derive(master_seed, "noise", t))
                lr = lr_at(config, t)
                theta, state = _apply_update(theta, state, grad_vec, config, lr)
                if not np.all(np.isfinite(theta)):
                    raise FloatingPointError(f"non-finite parameters after step {t + 1}")

                report = DpStepReport(
                    step=t + 1, loss_mean=loss_mean, preclip_min=stats[0],
                    preclip_median=stats[1], preclip_max=stats[2],
                    clipped_fraction=clipped_fraction, realized_batch=int(realized),
                    lr=lr, epsilon=eps_at_step(t + 1),
                )
                reports.append(report)
                if metrics:
                    metrics.write(_format_row([
                        report.step, report.loss_mean, report.preclip_median,
                        report.clipped_fraction, report.realized_batch,
                        report.lr, report.epsilon,
                    ]) + "\n")
                    metrics.flush()
                if checkpoint_dir and checkpoint_every and (t + 1) % checkpoint_every == 0:
                    assign_params(params, theta, offsets)
                    mae.save_model(f"{checkpoint_dir}/step_{t + 1:06d}.tensors", params)
            except KeyboardInterrupt:
                interrupted = True
                break
    finally:
        if metrics:
            metrics.close()
    assign_params(params, theta, offsets)

    steps_done = len(reports)
    realized = None
    if steps_done:
        realized = accountant.PrivacyBudget(epsilon=eps_at_step(steps_done), delta=delta)
    return TrainResult(params=params, reports=reports, realized_budget=realized,
                       sigma=sigma, q=q, steps_completed=steps_done,
                       interrupted=interrupted)


def train_nonprivate(params: "mae.MaeParams", dataset: "data.DatasetManifest",
                     config: DpOptimConfig, master_seed: int, metrics_path=None,
                     checkpoint_dir=None, checkpoint_every: int = 0,
                     start_step: int = 0, state: OptimState | None = None,
                     stop_step: int | None = None):
    """Standard mini-batch training (the non-private warm-start stage).

    Uniform batches without replacement; full-batch backward of the mean
    loss. Step randomness is (master_seed, purpose, step)-derived and the
    learning-rate schedule always spans config.total_steps, so a run resumed
    from (params, state, start_step) continues bit-exactly; `stop_step` just
    pauses it early.
    """
    n = dataset.n
    batch = min(config.expected_batch_size, n)
    theta, offsets = flatten_params(params)
    if state is None:
        state = init_adamw_state(theta.size)

    reports = []
    metrics = None
    if metrics_path:
        metrics = open(metrics_path, "a" if start_step else "w")
        if not start_step:
            metrics.write("step,loss_mean,lr\n")
    end_step = config.total_steps if stop_step is None else min(stop_step, config.total_steps)
    try:
        for t in range(start_step, end_step):
            rng = seeds.derive(master_seed, "batch", t)
            batch_idx = rng.choice(n, size=batch, replace=False)
            assign_params(params, theta, offsets)
            images = data.fetch(dataset, batch_idx)
            masks = _batch_masks(params.config, master_seed, t, batch)
            _, losses = mae.mae_forward(params, images, masks)
            loss = reduce_sum(losses)
            grads = backward(loss, params.values())
            grad_vec = np.concatenate(
                [grads[name].reshape(-1) for name in params.names()]) / batch
            lr = lr_at(config, t)
            theta, state = _apply_update(theta, state, grad_vec, config, lr)
            loss_mean = float(losses.data.mean())
            reports.append((t + 1, loss_mean, lr))
            if metrics:
                metrics.write(_format_row([t + 1, loss_mean, lr]) + "\n")
                metrics.flush()
            if checkpoint_dir and checkpoint_every and (t + 1) % checkpoint_every == 0:
                assign_params(params, theta, offsets)
                stem = f"{checkpoint_dir}/step_{t + 1:06d}.tensors"
                mae.save_model(stem, params)
                save_opt_state(f"{stem}.state", state, t + 1)
    finally:
        if metrics:
            metrics.close()
    assign_params(params, theta, offsets)
    return params, reports, state

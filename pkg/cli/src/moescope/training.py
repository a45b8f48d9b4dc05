"""
Training loop: Adam with a warmup + inverse-square-root learning rate,
global-norm gradient clipping, the metrics CSV, periodic evaluation and
checkpoints.

Step s (1-based) trains on the batch sampled from numpy.random.default_rng(
[seed, s]). Batches therefore depend only on the seed and the step, which is
what makes a resumed run reproduce the uninterrupted one bit for bit.
"""

import csv
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass

import numpy as np
from tqdm import tqdm

from .checkpoint import (
    ADAM_M_PREFIX,
    ADAM_V_PREFIX,
    PARAM_PREFIX,
    save_checkpoint,
)
from .config import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    CHECKPOINT_SUFFIX,
    DEFAULT_PEAK_LR,
    DEFAULT_W_BALANCE,
    DEFAULT_W_Z_LOGITS,
    DEFAULT_W_Z_ROUTER,
    EVAL_FILE_NAME,
    GRAD_CLIP_NORM,
    METRICS_FILE_NAME,
)
from .errors import ConfigError, NumericError
from .model import LossWeights, loss_components, token_accuracy
from .objectives import (
    MixtureConfig,
    causal_lm_denoisers,
    collate,
    sample_batch,
)
from .tensor import Tape

log = logging.getLogger(__name__)

METRICS_COLUMNS = [
    "step",
    "loss_ce",
    "loss_b",
    "loss_zr",
    "loss_zl",
    "acc",
    "drop_frac",
    "lr",
]

EVAL_COLUMNS = ["step", "tag", "loss_ce", "acc", "drop_frac"]

# Seed component that keeps evaluation batches apart from training steps
EVAL_STREAM = 2**31


@dataclass
class TrainConfig:
    batch_size: int = 8
    steps: int = 200
    seq_len: int = 64
    peak_lr: float = DEFAULT_PEAK_LR
    warmup_steps: int = 20
    w_balance: float = DEFAULT_W_BALANCE
    w_z_logits: float = DEFAULT_W_Z_LOGITS
    w_z_router: float = DEFAULT_W_Z_ROUTER
    checkpoint_every: int = 100
    eval_every: int = 0  # 0 turns periodic evaluation off
    eval_batch_size: int = 16
    grad_clip: float = GRAD_CLIP_NORM
    seed: int = 0

    def __post_init__(self):
        for name in (
            "batch_size",
            "steps",
            "seq_len",
            "warmup_steps",
            "checkpoint_every",
            "eval_batch_size",
        ):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.warmup_steps >= self.steps:
            raise ConfigError(
                f"warmup_steps ({self.warmup_steps}) must be smaller than"
                f" steps ({self.steps})"
            )
        if self.peak_lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("peak_lr and grad_clip must be positive")
        if self.eval_every < 0 or self.seed < 0:
            raise ConfigError("eval_every and seed must not be negative")
        # Validates the weights
        self.loss_weights()

    def loss_weights(self):
        return LossWeights(self.w_balance, self.w_z_logits, self.w_z_router)


@dataclass
class StepMetrics:
    step: int
    loss_ce: float
    loss_b: float
    loss_zr: float
    loss_zl: float
    acc: float
    drop_frac: float
    lr: float

    def row(self):
        # plain floats: the csv module writes repr(), which numpy scalars
        # would render as np.float64(...)
        return [int(self.step)] + [
            float(getattr(self, column)) for column in METRICS_COLUMNS[1:]
        ]

    def is_finite(self):
        losses = (self.loss_ce, self.loss_b, self.loss_zr, self.loss_zl)
        return all(math.isfinite(value) for value in losses)


def lr_at(step, cfg):
    """
    Linear warmup from 0 to peak_lr over warmup_steps, then
    peak_lr * sqrt(warmup_steps / step).
    """
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * math.sqrt(cfg.warmup_steps / step)


class AdamOptimizer:
    """
    Adam with bias correction. Parameters are updated in place; first and
    second moments are kept per parameter name.
    """

    def __init__(
        self, params, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p) for name, p in params.items()}
        self.v = {name: np.zeros_like(p) for name, p in params.items()}

    def step(self, grads, lr):
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, param in self.params.items():
            grad = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * grad
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * (
                grad * grad
            )
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self):
        tensors = {ADAM_M_PREFIX + name: m for name, m in self.m.items()}
        tensors.update({ADAM_V_PREFIX + name: v for name, v in self.v.items()})
        return tensors

    def load_state(self, checkpoint):
        """Restores moments (and the step count) from a Checkpoint"""
        moments_m = checkpoint.section(ADAM_M_PREFIX)
        moments_v = checkpoint.section(ADAM_V_PREFIX)
        if set(moments_m) != set(self.params) or set(moments_v) != set(
            self.params
        ):
            raise ConfigError("checkpoint optimizer state does not match")
        self.m = moments_m
        self.v = moments_v
        self.t = checkpoint.step


def clip_gradients(grads, max_norm):
    """Scales grads in place to global L2 norm max_norm; returns the norm"""
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


def evaluate(model, batch):
    """
    Loss components, token accuracy and drop fraction on a collated batch,
    without recording a tape.

    :returns: dict with loss_ce, loss_b, loss_zr, loss_zl, acc, drop_frac

    """
    out = model.forward(
        batch.inputs,
        prefix_lengths=batch.prefix_lengths,
        lengths=batch.lengths,
    )
    parts = loss_components(
        out.logits, batch.targets, out.aux, model.config.loss_weights
    )
    return {
        "loss_ce": parts.ce,
        "loss_b": parts.balance,
        "loss_zr": parts.z_router,
        "loss_zl": parts.z_logits,
        "acc": token_accuracy(out.logits, batch.targets),
        "drop_frac": out.drop_fraction,
    }


class Trainer:
    """
    Runs training steps for a model. run() is a generator of StepMetrics, so
    callers decide what to do with each step (write it, stop early, ...).
    """

    def __init__(
        self, model, corpora, mixture, cfg, optimizer=None, start_step=0
    ):
        self.model = model
        self.corpora = corpora
        self.mixture = mixture
        self.cfg = cfg
        self.optimizer = optimizer or AdamOptimizer(model.params)
        self.weights = cfg.loss_weights()
        self.step_count = start_step
        missing = mixture.domain_tags() - set(corpora)
        if missing:
            raise ConfigError(
                f"no corpus for domain tags: {', '.join(sorted(missing))}"
            )

    def batch_for(self, step):
        rng = np.random.default_rng([self.cfg.seed, step])
        examples = sample_batch(
            self.corpora,
            self.mixture,
            step,
            rng,
            self.cfg.batch_size,
            self.cfg.seq_len,
        )
        return collate(examples)

    def train_step(self, step):
        batch = self.batch_for(step)
        tape = Tape()
        out = self.model.forward(
            batch.inputs,
            tape=tape,
            prefix_lengths=batch.prefix_lengths,
            lengths=batch.lengths,
        )
        parts = loss_components(
            out.logits, batch.targets, out.aux, self.weights
        )
        lr = lr_at(step, self.cfg)
        metrics = StepMetrics(
            step=step,
            loss_ce=parts.ce,
            loss_b=parts.balance,
            loss_zr=parts.z_router,
            loss_zl=parts.z_logits,
            acc=token_accuracy(out.logits, batch.targets),
            drop_frac=out.drop_fraction,
            lr=lr,
        )
        if not metrics.is_finite() or not math.isfinite(parts.total.item()):
            raise NumericError(f"non-finite loss at step {step}: {metrics}")

        tape.backward(parts.total)
        grads = {
            name: (
                leaf.grad
                if leaf.grad is not None
                else np.zeros_like(leaf.data)
            )
            for name, leaf in out.params.items()
        }
        clip_gradients(grads, self.cfg.grad_clip)
        self.optimizer.step(grads, lr)
        self.step_count = step
        return metrics

    def run(self, progress=True):
        """Trains from the current step up to cfg.steps, yielding metrics"""
        steps = range(self.step_count + 1, self.cfg.steps + 1)
        for step in tqdm(
            steps, desc="training", file=sys.stderr, disable=not progress
        ):
            yield self.train_step(step)

    def state_tensors(self):
        tensors = {
            PARAM_PREFIX + name: p for name, p in self.model.params.items()
        }
        tensors.update(self.optimizer.state_tensors())
        return tensors


def eval_batch(corpora, cfg):
    """
    A fixed causal-LM batch over the evaluation corpora, equally weighted.
    """
    tags = sorted(corpora)
    mixture = MixtureConfig(
        domains=[(tag, 1.0 / len(tags)) for tag in tags],
        denoisers=causal_lm_denoisers(),
    )
    rng = np.random.default_rng([cfg.seed, EVAL_STREAM])
    examples = sample_batch(
        corpora, mixture, 0, rng, cfg.eval_batch_size, cfg.seq_len
    )
    return collate(examples)


def _prepare_csv(path, columns, start_step):
    """
    Starts a fresh CSV with the given header, or on resume keeps only the
    header and the rows up to start_step.
    """
    kept = []
    if start_step > 0 and os.path.exists(path):
        with open(path, newline="") as handle:
            reader = csv.reader(handle)
            next(reader, None)
            kept = [row for row in reader if row and int(row[0]) <= start_step]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(columns)
        writer.writerows(kept)


def checkpoint_path(out_dir, step):
    return os.path.join(out_dir, f"step-{step:06d}{CHECKPOINT_SUFFIX}")


def _evaluate_held_out(model, held_out, step, path):
    """Appends one eval.csv row per held-out corpus"""
    rows = []
    for tag, batch in held_out.items():
        scores = evaluate(model, batch)
        log.info(
            "step %d eval on %s: loss_ce=%.4f acc=%.4f drop_frac=%.4f",
            step,
            tag,
            scores["loss_ce"],
            scores["acc"],
            scores["drop_frac"],
        )
        rows.append(
            [step, tag]
            + [float(scores[column]) for column in EVAL_COLUMNS[2:]]
        )
    with open(path, "a", newline="") as handle:
        csv.writer(handle).writerows(rows)


def train(
    model,
    corpora,
    mixture,
    cfg,
    out_dir,
    config_record=None,
    optimizer=None,
    start_step=0,
    eval_corpora=None,
    progress=True,
):
    """
    Trains the model, appending one metrics row per step to
    <out_dir>/metrics.csv and writing a checkpoint every checkpoint_every
    steps and at the end.

    :param corpora: dict domain_tag -> Corpus for training
    :param mixture: MixtureConfig (with its switch points)
    :param cfg: TrainConfig
    :param config_record: dict stored in every checkpoint next to the model
        config (typically the effective run configuration)
    :param optimizer: AdamOptimizer restored from a checkpoint, when resuming
    :param start_step: last step already trained, when resuming
    :param eval_corpora: optional dict of held-out corpora evaluated every
        cfg.eval_every steps into <out_dir>/eval.csv
    :returns: list of StepMetrics of the steps trained
    :raises NumericError: after writing nan-step-<step>.omoe when a loss
        stops being finite

    """
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(model, corpora, mixture, cfg, optimizer, start_step)
    record = {"model": model.config.to_dict(), "train": asdict(cfg)}
    record.update(config_record or {})
    held_out = {}
    eval_path = os.path.join(out_dir, EVAL_FILE_NAME)
    if eval_corpora and cfg.eval_every:
        held_out = {
            tag: eval_batch({tag: eval_corpora[tag]}, cfg)
            for tag in sorted(eval_corpora)
        }
        _prepare_csv(eval_path, EVAL_COLUMNS, start_step)

    metrics_path = os.path.join(out_dir, METRICS_FILE_NAME)
    _prepare_csv(metrics_path, METRICS_COLUMNS, start_step)
    history = []
    with open(metrics_path, "a", newline="") as handle:
        writer = csv.writer(handle)
        steps = trainer.run(progress=progress)
        while True:
            try:
                metrics = next(steps)
            except StopIteration:
                break
            except NumericError:
                failed = trainer.step_count + 1
                snapshot = f"nan-step-{failed}{CHECKPOINT_SUFFIX}"
                save_checkpoint(
                    os.path.join(out_dir, snapshot),
                    record,
                    trainer.step_count,
                    trainer.state_tensors(),
                )
                log.error("loss stopped being finite at step %d", failed)
                raise

            writer.writerow(metrics.row())
            handle.flush()
            history.append(metrics)
            step = metrics.step
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                save_checkpoint(
                    checkpoint_path(out_dir, step),
                    record,
                    step,
                    trainer.state_tensors(),
                )
            if held_out and step % cfg.eval_every == 0:
                _evaluate_held_out(model, held_out, step, eval_path)
    if history:
        log.info(
            "finished step %d: loss_ce=%.4f acc=%.4f",
            history[-1].step,
            history[-1].loss_ce,
            history[-1].acc,
        )
    return history

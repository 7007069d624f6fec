from typing import Callable, Literal, Sequence, Any
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
import copy
import logging
import math
import pickle
import sys

import numpy as np
import torch
import torch.nn.functional as F
from tqdm import tqdm

from ._common import IGNORE_INDEX, LABELS, T_LossMode, T_Mode, mode_flags, stable_hash
from ._struct import struct
from ._pointers import Pointer
from ._issues import LengthIssue
from ._errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DivergenceError,
    Error,
    ShapeError,
    ValidationError,
)
from ._codec import convert, serialize, unstructure
from ._numtok import NUM_ID, Vocab, build_vocab
from ._corpus import (
    AnnotatedNote,
    class_weights,
    generate_corpus,
    generate_unannotated,
    load_class_labels,
    load_terms,
    split_corpus,
)
from ._model import Encoder, ModelConfig, label_mixing_matrix
from ._loss import (
    LossBreakdown,
    LossLog,
    UncertaintyWeights,
    combined_fixed,
    mlm_loss,
    number_loss_logscaled,
    number_loss_mse,
)
from ._batch import Batch, encode_notes, iter_batches, masked_batches
from ._config import LabConfig, TrainConfig, config_hash, resolved_model_config
from ._eval import RunMetrics, evaluate_classifier, write_metrics

__all__ = [
    "AdamState",
    "adamw_step",
    "AdamW",
    "cosine_schedule",
    "pretrain_objective",
    "classify_objective",
    "train_step",
    "Checkpoint",
    "CHECKPOINT_FORMAT",
    "save_checkpoint",
    "load_checkpoint",
    "snapshot",
    "build_model",
    "model_from_checkpoint",
    "prefinetune",
    "finetune_classify",
    "lab_vocab",
    "run_seed",
    "run_protocol",
    "aggregate_metrics",
]

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "numlesa.checkpoint"
CHECKPOINT_VERSION = 1

T_Stage = Literal["initial", "prefinetune", "finetune"]
Objective = Callable[[Encoder, Batch], "tuple[torch.Tensor, LossBreakdown] | None"]


@struct(eq=False)
class AdamState:
    step: int = 0
    exp_avg: torch.Tensor | None = None
    exp_avg_sq: torch.Tensor | None = None


def adamw_step(
    param: torch.Tensor,
    grad: torch.Tensor,
    state: AdamState | None,
    lr: float,
    weight_decay: float = 0.01,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[torch.Tensor, AdamState]:
    """One AdamW update with decoupled weight decay; inputs are left untouched."""
    if param.shape != grad.shape:
        raise ShapeError("adamw_step", param.shape, grad.shape)
    state = state or AdamState()
    exp_avg = torch.zeros_like(param) if state.exp_avg is None else state.exp_avg
    exp_avg_sq = torch.zeros_like(param) if state.exp_avg_sq is None else state.exp_avg_sq
    beta1, beta2 = betas
    step = state.step + 1
    exp_avg = beta1 * exp_avg + (1 - beta1) * grad
    exp_avg_sq = beta2 * exp_avg_sq + (1 - beta2) * grad * grad
    bias_correction1 = 1 - beta1**step
    bias_correction2 = 1 - beta2**step
    denom = exp_avg_sq.sqrt() / math.sqrt(bias_correction2) + eps
    updated = param * (1 - lr * weight_decay) - (lr / bias_correction1) * exp_avg / denom
    return updated, AdamState(step=step, exp_avg=exp_avg, exp_avg_sq=exp_avg_sq)


class AdamW(torch.optim.Optimizer):
    """AdamW over ``adamw_step``, keeping its moments in the regular optimizer state."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, not {lr}")
        defaults = dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                previous = AdamState(
                    step=state.get("step", 0),
                    exp_avg=state.get("exp_avg"),
                    exp_avg_sq=state.get("exp_avg_sq"),
                )
                updated, current = adamw_step(
                    p,
                    p.grad,
                    previous,
                    lr=group["lr"],
                    weight_decay=group["weight_decay"],
                    betas=group["betas"],
                    eps=group["eps"],
                )
                p.copy_(updated)
                state["step"] = current.step
                state["exp_avg"] = current.exp_avg
                state["exp_avg_sq"] = current.exp_avg_sq
        return loss


def cosine_schedule(step: int, warmup_steps: int, total_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if not total_steps > warmup_steps >= 0:
        raise ValueError(
            f"need total_steps > warmup_steps >= 0, got {total_steps} and {warmup_steps}"
        )
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if step >= total_steps:
        return 0.0
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))


def pretrain_objective(
    model: Encoder,
    batch: Batch,
    loss_mode: T_LossMode = "fixed",
    weights: UncertaintyWeights | None = None,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Stage A loss: MLM alone, or MLM with number prediction when values are embedded.

    The number losses only look at masked positions that held a number.
    """
    output = model(batch.ids, batch.values, batch.attention_mask)
    l1 = mlm_loss(model.head_lm(output.hidden), batch.y1, batch.mlm_positions)
    if not model.config.xval_enabled:
        value = l1.item()
        return l1, LossBreakdown(l1=value, l2=0.0, l_tilde2=0.0, combined=value, w1=1.0, w2=0.0)

    is_number = batch.y1 == NUM_ID
    if is_number.any():
        positions = batch.mlm_positions.clone()
        positions[batch.mlm_positions] = is_number
        f2 = model.head_num(output.hidden)
        y2 = batch.y2[is_number]
        l2 = number_loss_mse(f2, y2, positions)
        l_tilde2 = number_loss_logscaled(f2, y2, positions)
    else:
        l2 = l_tilde2 = l1.new_zeros(())

    match loss_mode:
        case "fixed":
            combined = combined_fixed(l1, l_tilde2)
            sigma1 = sigma2 = 1.0
            w1 = w2 = 0.5
        case "uncertainty":
            if weights is None:
                raise ValueError("uncertainty weighting needs an UncertaintyWeights module")
            combined = weights(l1, l2)
            sigma1, sigma2 = (_.item() for _ in weights.sigmas())
            w1, w2 = 1 / sigma1**2, 1 / (2 * sigma2**2)
        case _:
            raise ValueError(f"unknown loss mode {loss_mode!r}")
    breakdown = LossBreakdown(
        l1=l1.item(),
        l2=l2.item(),
        l_tilde2=l_tilde2.item(),
        combined=combined.item(),
        sigma1=sigma1,
        sigma2=sigma2,
        w1=w1,
        w2=w2,
    )
    return combined, breakdown


def classify_objective(
    model: Encoder, batch: Batch, class_weights: torch.Tensor | None = None
) -> tuple[torch.Tensor, LossBreakdown] | None:
    """Stage B token cross-entropy over labelled NUM tokens; None when the batch has none."""
    if batch.labels is None or not (batch.labels != IGNORE_INDEX).any():
        return None
    output = model(batch.ids, batch.values, batch.attention_mask)
    logits = model.head_classify(output.hidden)
    loss = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        batch.labels.reshape(-1),
        weight=class_weights,
        ignore_index=IGNORE_INDEX,
    )
    value = loss.item()
    return loss, LossBreakdown(l1=value, l2=0.0, l_tilde2=0.0, combined=value, w1=1.0, w2=0.0)


def train_step(
    model: Encoder,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    objective: Objective,
) -> LossBreakdown | None:
    model.train()
    optimizer.zero_grad()
    result = objective(model, batch)
    if result is None:
        return None
    loss, breakdown = result
    if not breakdown.is_finite():
        raise DivergenceError("training loss is no longer finite", breakdown)
    loss.backward()
    optimizer.step()
    return breakdown


@struct(eq=False)
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    vocab: Vocab
    state: dict[str, torch.Tensor]
    optimizer_state: dict[str, Any] | None = None
    weights_state: dict[str, torch.Tensor] | None = None
    stage: T_Stage = "initial"
    seed: int = 0
    epoch: int = 0
    step: int = 0
    best_metric: float = math.inf
    config_hash: str = ""
    # epochs without improvement and the best state so far; set on resume checkpoints
    stale: int = 0
    best: "Checkpoint | None" = None


def _checkpoint_hash(model_config: ModelConfig, train_config: TrainConfig, vocab: Vocab) -> str:
    return stable_hash(
        serialize(
            {
                "model": unstructure(model_config),
                "train": unstructure(train_config),
                "vocab": vocab.digest,
            }
        )
    )


def snapshot(
    model: Encoder,
    train_config: TrainConfig,
    vocab: Vocab,
    *,
    stage: T_Stage,
    seed: int,
    epoch: int = 0,
    step: int = 0,
    best_metric: float = math.inf,
    optimizer: torch.optim.Optimizer | None = None,
    weights: UncertaintyWeights | None = None,
    stale: int = 0,
    best: Checkpoint | None = None,
) -> Checkpoint:
    """Detached copy of the current training state."""
    return Checkpoint(
        model_config=model.config,
        train_config=train_config,
        vocab=vocab,
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        optimizer_state=None if optimizer is None else copy.deepcopy(optimizer.state_dict()),
        weights_state=None
        if weights is None
        else {k: v.detach().clone() for k, v in weights.state_dict().items()},
        stage=stage,
        seed=seed,
        epoch=epoch,
        step=step,
        best_metric=best_metric,
        config_hash=_checkpoint_hash(model.config, train_config, vocab),
        stale=stale,
        best=best,
    )


def _payload(checkpoint: Checkpoint) -> dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": unstructure(checkpoint.model_config),
        "train_config": unstructure(checkpoint.train_config),
        "vocab": list(checkpoint.vocab.tokens),
        "vocab_digest": checkpoint.vocab.digest,
        "state": checkpoint.state,
        "optimizer_state": checkpoint.optimizer_state,
        "weights_state": checkpoint.weights_state,
        "stage": checkpoint.stage,
        "seed": checkpoint.seed,
        "epoch": checkpoint.epoch,
        "step": checkpoint.step,
        "best_metric": checkpoint.best_metric,
        "config_hash": checkpoint.config_hash,
        "stale": checkpoint.stale,
        "best": None if checkpoint.best is None else _payload(checkpoint.best),
    }


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    torch.save(_payload(checkpoint), path)


def _from_payload(payload: Any, path: str | Path) -> Checkpoint:
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a numlesa checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    try:
        model_config = convert(payload["model_config"], ModelConfig)
        train_config = convert(payload["train_config"], TrainConfig)
        vocab = Vocab(tokens=tuple(payload["vocab"]))
    except (ValidationError, KeyError) as exc:
        raise CheckpointError(f"checkpoint {path} has an invalid header: {exc}") from exc
    if vocab.digest != payload["vocab_digest"]:
        raise CheckpointError(f"checkpoint {path} vocabulary does not match its digest")
    if len(vocab) != model_config.vocab_size:
        raise CheckpointError(
            f"checkpoint {path} vocabulary has {len(vocab)} tokens, model expects {model_config.vocab_size}"
        )
    expected = _checkpoint_hash(model_config, train_config, vocab)
    if payload["config_hash"] != expected:
        raise CheckpointError(f"checkpoint {path} config hash does not match its contents")
    best = payload.get("best")
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        vocab=vocab,
        state=payload["state"],
        optimizer_state=payload["optimizer_state"],
        weights_state=payload["weights_state"],
        stage=payload["stage"],
        seed=payload["seed"],
        epoch=payload["epoch"],
        step=payload["step"],
        best_metric=payload["best_metric"],
        config_hash=payload["config_hash"],
        stale=payload.get("stale", 0),
        best=None if best is None else _from_payload(best, path),
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return _from_payload(payload, path)


def build_model(model_config: ModelConfig, vocab: Vocab, seed: int) -> Encoder:
    mixing = None
    if model_config.lesa_enabled:
        mixing = label_mixing_matrix(load_class_labels(), vocab, model_config.dtype)
    return Encoder(model_config, mixing, seed=seed)


def model_from_checkpoint(checkpoint: Checkpoint) -> Encoder:
    model = build_model(checkpoint.model_config, checkpoint.vocab, checkpoint.seed)
    try:
        model.load_state_dict(checkpoint.state)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint weights do not fit the model: {exc}") from exc
    return model


def _check_mode(model_config: ModelConfig, mode: T_Mode) -> None:
    if mode_flags(mode) != (model_config.lesa_enabled, model_config.xval_enabled):
        raise CheckpointError(
            f"model was built with lesa={model_config.lesa_enabled} xval={model_config.xval_enabled}, "
            f"which does not match mode {mode!r}"
        )


def _mean_loss(model: Encoder, batches: Sequence[Batch], objective: Objective) -> float:
    model.eval()
    losses = []
    with torch.no_grad():
        for batch in batches:
            result = objective(model, batch)
            if result is not None:
                losses.append(result[1].combined)
    if not losses:
        raise DataError("validation split yielded no usable batch")
    return math.fsum(losses) / len(losses)


def _check_resume(
    resume: Checkpoint, model: Encoder, config: TrainConfig, vocab: Vocab, stage: T_Stage, seed: int
) -> None:
    if resume.best is None:
        raise CheckpointError("checkpoint holds no training progress to resume from")
    if resume.stage != stage or resume.seed != seed:
        raise CheckpointError(
            f"cannot resume {stage} of seed {seed} from {resume.stage} of seed {resume.seed}"
        )
    if resume.config_hash != _checkpoint_hash(model.config, config, vocab):
        raise CheckpointError(
            "resume checkpoint was written with another model, training config or vocabulary"
        )


def _fit(
    model: Encoder,
    make_batches: Callable[[np.random.Generator], list[Batch]],
    val_batches: Sequence[Batch],
    objective: Objective,
    config: TrainConfig,
    vocab: Vocab,
    *,
    stage: T_Stage,
    seed: int,
    steps_per_epoch: int,
    weights: UncertaintyWeights | None = None,
    loss_log: LossLog | None = None,
    resume: Checkpoint | None = None,
    resume_path: Path | None = None,
) -> Checkpoint:
    """Train with early stopping on the validation loss; the model ends at its best state.

    With ``resume_path`` the full training state is written there after every
    epoch. Passing that checkpoint back as ``resume`` continues from the next
    epoch exactly as if the run had never stopped.
    """
    groups = [{"params": list(model.parameters())}]
    if weights is not None:
        groups.append({"params": list(weights.parameters()), "weight_decay": 0.0})
    optimizer = AdamW(
        groups,
        lr=config.lr,
        betas=config.betas,
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    total_steps = max(1, config.max_epochs * steps_per_epoch)
    warmup_steps = config.warmup_steps(total_steps, steps_per_epoch)

    if resume is None:
        best_metric = _mean_loss(model, val_batches, objective)
        logger.info("%s seed %d epoch 0: validation loss %.4f", stage, seed, best_metric)
        best = snapshot(
            model, config, vocab, stage=stage, seed=seed, best_metric=best_metric,
            optimizer=optimizer, weights=weights,
        )
        first_epoch, step, stale = 1, 0, 0
    else:
        _check_resume(resume, model, config, vocab, stage, seed)
        model.load_state_dict(resume.state)
        optimizer.load_state_dict(resume.optimizer_state)
        if weights is not None:
            weights.load_state_dict(resume.weights_state)
        best, best_metric = resume.best, resume.best_metric
        first_epoch, step, stale = resume.epoch + 1, resume.step, resume.stale
        logger.info("%s seed %d: resuming after epoch %d, step %d", stage, seed, resume.epoch, step)

    remaining = range(first_epoch, config.max_epochs + 1) if stale < config.patience else range(0)
    epochs = tqdm(remaining, desc=stage, disable=not sys.stderr.isatty(), leave=False)
    for epoch in epochs:
        rng = np.random.default_rng([seed, epoch])
        train_losses = []
        for batch in make_batches(rng):
            lr = cosine_schedule(step, warmup_steps, total_steps, config.lr)
            for group in optimizer.param_groups:
                group["lr"] = lr
            breakdown = train_step(model, optimizer, batch, objective)
            if breakdown is None:
                continue
            step += 1
            train_losses.append(breakdown.combined)
            logger.debug("%s step %d: %r", stage, step, breakdown)
            if loss_log is not None:
                loss_log.write(step, breakdown, epoch=epoch, lr=lr, stage=stage, seed=seed)
        val_loss = _mean_loss(model, val_batches, objective)
        train_loss = math.fsum(train_losses) / len(train_losses) if train_losses else math.nan
        logger.info(
            "%s seed %d epoch %d: train loss %.4f, validation loss %.4f",
            stage, seed, epoch, train_loss, val_loss,
        )
        if loss_log is not None:
            loss_log.flush()
        if val_loss < best_metric:
            best_metric = val_loss
            stale = 0
            best = snapshot(
                model, config, vocab, stage=stage, seed=seed, epoch=epoch, step=step,
                best_metric=best_metric, optimizer=optimizer, weights=weights,
            )
        else:
            stale += 1
        if resume_path is not None:
            save_checkpoint(
                resume_path,
                snapshot(
                    model, config, vocab, stage=stage, seed=seed, epoch=epoch, step=step,
                    best_metric=best_metric, optimizer=optimizer, weights=weights,
                    stale=stale, best=best,
                ),
            )
        if stale >= config.patience:
            logger.info("%s seed %d: stopping after %d stale epochs", stage, seed, stale)
            break
    model.load_state_dict(best.state)
    if weights is not None:
        weights.load_state_dict(best.weights_state)
    return best


def _open_log(
    run_dir: str | Path | None, stage: T_Stage, resume: Checkpoint | None = None
) -> LossLog | None:
    if run_dir is None:
        return None
    Path(run_dir).mkdir(parents=True, exist_ok=True)
    return LossLog(
        Path(run_dir) / f"loss_{stage}.jsonl", keep_through=None if resume is None else resume.step
    )


def _resume_path(run_dir: str | Path | None, stage: T_Stage) -> Path | None:
    return None if run_dir is None else Path(run_dir) / f"resume_{stage}.pt"


def prefinetune(
    model: Encoder,
    unannotated: Sequence[AnnotatedNote],
    config: TrainConfig,
    vocab: Vocab,
    seed: int = 0,
    run_dir: str | Path | None = None,
    resume: Checkpoint | None = None,
) -> Checkpoint:
    """Stage A: masked-language-model training on unannotated notes.

    The trailing ``holdout_fraction`` of the notes gives the validation loss
    used for early stopping; their masks are drawn once. With ``run_dir`` the
    loss log and ``resume_prefinetune.pt`` are written there.
    """
    if not unannotated:
        raise DataError("stage A needs at least one unannotated note")
    _check_mode(model.config, config.mode)
    examples = encode_notes(unannotated, vocab, model.config.max_length)
    n_val = max(1, round(config.holdout_fraction * len(examples)))
    train = examples[:-n_val] or examples
    val = examples[-n_val:]
    val_batches = masked_batches(
        val, config.batch_size, config.mask_rate, np.random.default_rng([seed, 0]),
        shuffle=False, dtype=model.config.dtype,
    )
    if not val_batches:
        raise DataError("no token of the validation notes was masked")

    weights = None
    if model.config.xval_enabled and config.loss_mode == "uncertainty":
        weights = UncertaintyWeights(model.config.dtype)

    def objective(model: Encoder, batch: Batch):
        return pretrain_objective(model, batch, config.loss_mode, weights)

    def make_batches(rng: np.random.Generator) -> list[Batch]:
        return masked_batches(
            train, config.batch_size, config.mask_rate, rng, dtype=model.config.dtype
        )

    loss_log = _open_log(run_dir, "prefinetune", resume)
    try:
        return _fit(
            model, make_batches, val_batches, objective, config, vocab,
            stage="prefinetune", seed=seed,
            steps_per_epoch=math.ceil(len(train) / config.batch_size),
            weights=weights, loss_log=loss_log,
            resume=resume, resume_path=_resume_path(run_dir, "prefinetune"),
        )
    finally:
        if loss_log is not None:
            loss_log.close()


def finetune_classify(
    checkpoint: Checkpoint,
    corpus: Sequence[AnnotatedNote],
    config: TrainConfig,
    run_dir: str | Path | None = None,
    exclude_o: bool = False,
    eval_batch_size: int = 32,
    resume: Checkpoint | None = None,
) -> tuple[Checkpoint, RunMetrics]:
    """Stage B: token classification on the annotated corpus, scored on its test split."""
    _check_mode(checkpoint.model_config, config.mode)
    model = model_from_checkpoint(checkpoint)
    vocab, seed = checkpoint.vocab, checkpoint.seed
    train, val, test = split_corpus(corpus, seed=config.split_seed)
    max_length = model.config.max_length
    train_examples = encode_notes(train, vocab, max_length, with_labels=True)
    val_examples = encode_notes(val, vocab, max_length, with_labels=True)
    dtype = model.config.dtype

    weight_tensor = None
    if config.class_weighted:
        weights = class_weights(train)
        weight_tensor = torch.tensor([weights[label] for label in LABELS], dtype=dtype)

    def objective(model: Encoder, batch: Batch):
        return classify_objective(model, batch, weight_tensor)

    def make_batches(rng: np.random.Generator) -> list[Batch]:
        return list(iter_batches(train_examples, config.batch_size, rng, dtype))

    val_batches = list(iter_batches(val_examples, config.batch_size, dtype=dtype))
    loss_log = _open_log(run_dir, "finetune", resume)
    try:
        best = _fit(
            model, make_batches, val_batches, objective, config, vocab,
            stage="finetune", seed=seed,
            steps_per_epoch=math.ceil(len(train_examples) / config.batch_size),
            loss_log=loss_log,
            resume=resume, resume_path=_resume_path(run_dir, "finetune"),
        )
    finally:
        if loss_log is not None:
            loss_log.close()
    metrics = evaluate_classifier(model, test, vocab, exclude_o, eval_batch_size, seed=seed)
    logger.info("finetune seed %d: test macro F1 %.4f", seed, metrics.macro_f1)
    return best, metrics


def lab_vocab(
    config: LabConfig,
    corpus: Sequence[AnnotatedNote],
    unannotated: Sequence[AnnotatedNote] = (),
) -> Vocab:
    """Vocabulary over both corpora plus the class keywords and comparison terms."""
    keywords = [keyword for label in load_class_labels() for keyword in label.keywords]
    extra = [*keywords, *load_terms(config.eval.terms)]
    return build_vocab([*corpus, *unannotated, *extra], cap=config.train.vocab_cap)


def run_seed(
    config: LabConfig,
    seed: int,
    corpus: Sequence[AnnotatedNote],
    unannotated: Sequence[AnnotatedNote],
    vocab: Vocab,
    run_dir: str | Path,
) -> RunMetrics:
    """Both stages for one seed, persisting checkpoints and metrics under ``run_dir``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(resolved_model_config(config, len(vocab)), vocab, seed)
    checkpoint = snapshot(model, config.train, vocab, stage="initial", seed=seed)
    save_checkpoint(run_dir / "initial.pt", checkpoint)
    if config.train.prefinetune:
        checkpoint = prefinetune(model, unannotated, config.train, vocab, seed, run_dir)
        save_checkpoint(run_dir / "prefinetune.pt", checkpoint)
    checkpoint, metrics = finetune_classify(
        checkpoint, corpus, config.train, run_dir, config.eval.exclude_o, config.eval.batch_size
    )
    save_checkpoint(run_dir / "finetune.pt", checkpoint)
    write_metrics(run_dir / "metrics.json", metrics)
    return metrics


def _init_worker() -> None:
    # one thread per process so parallel seeds do not oversubscribe the cpu
    torch.set_num_threads(1)


def run_protocol(
    config: LabConfig,
    run_dir: str | Path,
    jobs: int = 1,
    corpus: Sequence[AnnotatedNote] | None = None,
    unannotated: Sequence[AnnotatedNote] | None = None,
    vocab: Vocab | None = None,
) -> RunMetrics:
    """Run every configured seed and aggregate their test metrics.

    Per-seed results land in ``run_dir/seed-<n>``. If any seed fails, the
    completed seeds are summarised in ``partial.json`` and the first error is
    raised. Variants that are compared against each other should share one
    ``vocab`` so their seeds start from the same weights.
    """
    seeds = config.train.seeds
    if len(seeds) < 2:
        raise ConfigError(
            [
                LengthIssue(
                    value=seeds, pointer=Pointer.root / "train" / "seeds", comparator="ge", limit=2
                )
            ]
        )
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if corpus is None:
        corpus = generate_corpus(config.corpus)
    if unannotated is None:
        unannotated = generate_unannotated(config.corpus) if config.train.prefinetune else []
    if vocab is None:
        vocab = lab_vocab(config, corpus, unannotated)
    args = [(config, seed, corpus, unannotated, vocab, run_dir / f"seed-{seed}") for seed in seeds]

    results: dict[int, RunMetrics] = {}
    failures: dict[int, BaseException] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker) as pool:
            futures = {seed: pool.submit(run_seed, *arg) for seed, arg in zip(seeds, args)}
            for seed, future in futures.items():
                try:
                    results[seed] = future.result()
                except Exception as exc:
                    failures[seed] = exc
    else:
        for seed, arg in zip(seeds, args):
            try:
                results[seed] = run_seed(*arg)
            except Exception as exc:
                failures[seed] = exc
                break

    if failures:
        partial = {
            "completed": {seed: unstructure(metrics) for seed, metrics in results.items()},
            "failed": {seed: f"{exc.__class__.__name__}: {exc}" for seed, exc in failures.items()},
            "config_hash": config_hash(config),
        }
        (run_dir / "partial.json").write_bytes(serialize(_string_keys(partial)))
        seed, exc = next(iter(failures.items()))
        logger.error("seed %d failed; %d seeds completed", seed, len(results))
        if isinstance(exc, Error):
            raise exc
        raise Error(f"seed {seed} failed: {exc}") from exc

    aggregate = aggregate_metrics([results[seed] for seed in seeds])
    write_metrics(run_dir / "metrics.json", aggregate)
    return aggregate


def _string_keys(data):
    if isinstance(data, dict):
        return {str(k): _string_keys(v) for k, v in data.items()}
    return data


def aggregate_metrics(runs: Sequence[RunMetrics]) -> RunMetrics:
    """Mean and sample standard deviation across runs; confusion counts are summed."""
    if not runs:
        raise ValueError("cannot aggregate zero runs")
    per_class = np.array([[run.per_class_f1[label] for label in LABELS] for run in runs])
    macro = np.array([run.macro_f1 for run in runs])
    ddof = 1 if len(runs) > 1 else 0
    per_class_std = per_class.std(axis=0, ddof=ddof)
    confusion = np.sum([np.asarray(run.confusion) for run in runs], axis=0)
    return RunMetrics(
        per_class_f1={label: float(_) for label, _ in zip(LABELS, per_class.mean(axis=0))},
        macro_f1=float(macro.mean()),
        confusion=tuple(tuple(int(_) for _ in row) for row in confusion),
        seed=None,
        per_class_std={label: float(_) for label, _ in zip(LABELS, per_class_std)},
        macro_f1_std=float(macro.std(ddof=ddof)),
        n_seeds=len(runs),
    )

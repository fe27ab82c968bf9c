"""SFT and DPO objectives with an AdamW + warmup/cosine training loop.

SFT minimizes the autoregressive NLL of teacher expansions given the
query prompt. DPO trains the policy against a frozen reference on
chosen/rejected pairs:

    loss = -mean log sigmoid(beta * [(lp_pol(y+) - lp_pol(y-))
                                     - (lp_ref(y+) - lp_ref(y-))])

Gradients flow only into the policy; the reference provides the
contrastive baseline and never updates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .lm import LmModel, SequenceBatch, clone_frozen, sequence_log_probs
from .prompts import query_from_prompt


class TrainingError(Exception):
    pass


@dataclass(frozen=True)
class SftConfig:
    lr: float = 2e-5
    batch_size: int = 2
    grad_accum: int = 4  # effective batch = batch_size * grad_accum
    epochs: int = 2
    warmup_fraction: float = 0.10


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.05
    lr: float = 2e-6
    batch_size: int = 2
    grad_accum: int = 4
    epochs: int = 2
    warmup_fraction: float = 0.05

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be > 0")


@dataclass
class TrainReport:
    step_losses: list[float] = field(default_factory=list)
    step_lrs: list[float] = field(default_factory=list)
    epoch_mean_losses: list[float] = field(default_factory=list)
    step_margins: list[float] = field(default_factory=list)  # DPO only, beta-scaled
    margin_before: float | None = None  # DPO: dataset mean inner bracket, beta-scaled
    margin_after: float | None = None
    degenerate_pairs: int = 0
    checkpoint_path: str | None = None

    @property
    def steps(self) -> int:
        return len(self.step_losses)


def write_train_report(report: TrainReport, path) -> None:
    """Emit one JSON line per optimizer step plus a trailing summary line."""
    with open(path, "w", encoding="utf-8") as out:
        for i, loss in enumerate(report.step_losses):
            rec = {"step": i, "loss": loss, "lr": report.step_lrs[i]}
            if report.step_margins:
                rec["margin"] = report.step_margins[i]
            out.write(json.dumps(rec) + "\n")
        summary = {
            "epoch_mean_losses": report.epoch_mean_losses,
            "steps": report.steps,
            "degenerate_pairs": report.degenerate_pairs,
            "margin_before": report.margin_before,
            "margin_after": report.margin_after,
            "checkpoint_path": report.checkpoint_path,
        }
        out.write(json.dumps({"summary": summary}) + "\n")


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def sft_loss_tensor(model: LmModel, batch: SequenceBatch) -> torch.Tensor:
    """NLL summed over continuation tokens, averaged over sequences."""
    if float(batch.mask.sum()) == 0.0:
        raise TrainingError("batch has no supervised positions")
    return -sequence_log_probs(model, batch).mean()


def sft_loss(model: LmModel, batch: SequenceBatch) -> tuple[float, dict[str, torch.Tensor]]:
    loss = sft_loss_tensor(model, batch)
    grads = _extract_grads(model, loss)
    return float(loss.detach()), grads


def dpo_loss_from_logps(
    pol_chosen: torch.Tensor,
    pol_rejected: torch.Tensor,
    ref_chosen: torch.Tensor,
    ref_rejected: torch.Tensor,
    beta: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Core DPO objective over cached per-pair log-probabilities.

    Returns (loss, inner) where inner is the per-pair bracket
    (lp_pol+ - lp_pol-) - (lp_ref+ - lp_ref-); the loss is
    softplus(-beta * inner) averaged over pairs (== -log sigmoid).
    """
    inner = (pol_chosen - pol_rejected) - (ref_chosen - ref_rejected)
    return F.softplus(-beta * inner).mean(), inner


@dataclass
class DpoMarginStats:
    inner_per_pair: list[float]  # unscaled bracket values
    degenerate: int  # pairs with token-identical chosen/rejected

    def mean_margin(self, beta: float) -> float:
        return beta * sum(self.inner_per_pair) / len(self.inner_per_pair)


DpoBatch = list[tuple[list[int], list[int], list[int]]]  # (x, y_plus, y_minus)


def dpo_loss_tensor(
    policy: LmModel, reference: LmModel, batch: DpoBatch, beta: float
) -> tuple[torch.Tensor, DpoMarginStats]:
    if not batch:
        raise TrainingError("empty DPO batch")
    vocab = policy.vocab
    chosen = SequenceBatch.from_pairs([(x, yp) for x, yp, _ in batch], vocab)
    rejected = SequenceBatch.from_pairs([(x, ym) for x, _, ym in batch], vocab)
    pol_c = sequence_log_probs(policy, chosen)
    pol_r = sequence_log_probs(policy, rejected)
    with torch.no_grad():
        ref_c = sequence_log_probs(reference, chosen)
        ref_r = sequence_log_probs(reference, rejected)
    loss, inner = dpo_loss_from_logps(pol_c, pol_r, ref_c, ref_r, beta)
    degenerate = sum(1 for _, yp, ym in batch if yp == ym)
    stats = DpoMarginStats(
        inner_per_pair=[float(v) for v in inner.detach()], degenerate=degenerate
    )
    return loss, stats


def dpo_loss(
    policy: LmModel, reference: LmModel, batch: DpoBatch, beta: float
) -> tuple[float, dict[str, torch.Tensor], DpoMarginStats]:
    loss, stats = dpo_loss_tensor(policy, reference, batch, beta)
    grads = _extract_grads(policy, loss)
    return float(loss.detach()), grads, stats


def _extract_grads(model: LmModel, loss: torch.Tensor) -> dict[str, torch.Tensor]:
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {
        name: (g.detach().clone() if g is not None else torch.zeros_like(p))
        for (name, p), g in zip(named, grads)
    }


# ---------------------------------------------------------------------------
# Schedules and the shared loop
# ---------------------------------------------------------------------------


def lr_factor(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Linear warmup to 1.0, then cosine decay 0.5 * (1 + cos(pi * progress))."""
    warmup_steps = int(round(total_steps * warmup_fraction))
    if step < warmup_steps:
        return (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return 0.5 * (1.0 + math.cos(math.pi * progress))


def _micro_batches(n: int, batch_size: int) -> int:
    return (n + batch_size - 1) // batch_size


def _train_loop(model, examples, cfg, seed: int, micro_loss_fn, report: TrainReport):
    """Epoch/accumulation engine shared by SFT and DPO.

    micro_loss_fn(items) must return (loss tensor, aux) for one micro-batch;
    aux is an optional diagnostic (the DPO margin) averaged per optimizer
    step into report.step_margins.
    """
    n = len(examples)
    if n == 0:
        raise TrainingError("empty training set")
    if cfg.batch_size < 1 or cfg.grad_accum < 1 or cfg.epochs < 1:
        raise TrainingError("batch_size, grad_accum and epochs must be >= 1")
    micro_per_epoch = _micro_batches(n, cfg.batch_size)
    steps_per_epoch = (micro_per_epoch + cfg.grad_accum - 1) // cfg.grad_accum
    total_steps = cfg.epochs * steps_per_epoch
    optimizer = torch.optim.AdamW(
        [p for p in model.parameters() if p.requires_grad],
        lr=cfg.lr,
        betas=(0.9, 0.999),
        eps=1e-8,
        weight_decay=0.01,
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)  # bit-reproducibility over speed at this scale
    try:
        step = 0
        for _ in range(cfg.epochs):
            order = rng.permutation(n)
            micro = [
                [examples[j] for j in order[i : i + cfg.batch_size]]
                for i in range(0, n, cfg.batch_size)
            ]
            epoch_losses = []
            for group_start in range(0, len(micro), cfg.grad_accum):
                group = micro[group_start : group_start + cfg.grad_accum]
                optimizer.zero_grad(set_to_none=True)
                group_losses = []
                group_aux = []
                for items in group:
                    loss, aux = micro_loss_fn(items)
                    if not torch.isfinite(loss):
                        raise TrainingError(f"non-finite loss at step {step}")
                    (loss / len(group)).backward()
                    group_losses.append(float(loss.detach()))
                    if aux is not None:
                        group_aux.append(aux)
                factor = lr_factor(step, total_steps, cfg.warmup_fraction)
                for pg in optimizer.param_groups:
                    pg["lr"] = cfg.lr * factor
                optimizer.step()
                step_loss = sum(group_losses) / len(group_losses)
                report.step_losses.append(step_loss)
                report.step_lrs.append(cfg.lr * factor)
                if group_aux:
                    report.step_margins.append(sum(group_aux) / len(group_aux))
                epoch_losses.append(step_loss)
                step += 1
            report.epoch_mean_losses.append(sum(epoch_losses) / len(epoch_losses))
    finally:
        torch.set_num_threads(prev_threads)
    return model


# ---------------------------------------------------------------------------
# Dataset preparation for the whitespace toy LM
# ---------------------------------------------------------------------------


def fit_example(
    x: list[int], y: list[int], max_context: int | None
) -> tuple[list[int], list[int]]:
    """Trim (x, y) so [bos] + x + y fits the model context, keeping the end
    of x (the query) and the front of y."""
    if max_context is None:
        return x, y
    budget = max_context - 1
    if len(x) >= budget:
        x = x[-(budget - 1) :]
    y = y[: budget - len(x)]
    if not y:
        raise TrainingError("context too small for any supervision")
    return x, y


def sft_examples_from_records(
    records, vocab, composition: str = "both", max_context: int | None = None
) -> list[tuple[list[int], list[int]]]:
    """(condition, target) id pairs from expansion records.

    composition selects the supervision targets: "both" uses e1 and e2 as
    separate examples, "e1"/"e2" a single source. The whitespace LM is
    conditioned on the query text itself.
    """
    if composition not in ("both", "e1", "e2"):
        raise ValueError(f"unknown composition: {composition!r}")
    examples = []
    for record in records:
        x = vocab.encode(record.query)
        targets = {
            "both": (record.e1, record.e2),
            "e1": (record.e1,),
            "e2": (record.e2,),
        }[composition]
        for target in targets:
            if not target:
                continue
            y = vocab.encode(target) + [vocab.eos]
            examples.append(fit_example(x, y, max_context))
    return examples


def dpo_examples_from_pairs(pairs, vocab, max_context: int | None = None) -> DpoBatch:
    """(x, y_plus, y_minus) id triples; the condition is the query extracted
    from each pair's stored zero-shot prompt."""
    examples = []
    for pair in pairs:
        x = vocab.encode(query_from_prompt(pair.prompt))
        yp = vocab.encode(pair.chosen) + [vocab.eos]
        ym = vocab.encode(pair.rejected) + [vocab.eos]
        x1, yp = fit_example(x, yp, max_context)
        x2, ym = fit_example(x, ym, max_context)
        examples.append((x1, yp, ym))
    return examples


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def train_sft(
    model: LmModel,
    examples: list[tuple[list[int], list[int]]],
    cfg: SftConfig = SftConfig(),
    seed: int = 0,
) -> tuple[LmModel, TrainReport]:
    """Fine-tune `model` in place on (condition, target) id pairs."""
    report = TrainReport()
    vocab = model.vocab

    def micro_loss(items):
        return sft_loss_tensor(model, SequenceBatch.from_pairs(items, vocab)), None

    _train_loop(model, examples, cfg, seed, micro_loss, report)
    return model, report


def dataset_mean_margin(
    policy: LmModel, reference: LmModel, examples: DpoBatch, beta: float
) -> float:
    """Beta-scaled mean implicit-reward margin over a pair set."""
    with torch.no_grad():
        total = 0.0
        for i in range(0, len(examples), 32):
            _, stats = dpo_loss_tensor(policy, reference, examples[i : i + 32], beta)
            total += sum(stats.inner_per_pair)
    return beta * total / len(examples)


def train_dpo(
    policy: LmModel,
    examples: DpoBatch,
    cfg: DpoConfig = DpoConfig(),
    seed: int = 0,
    reference: LmModel | None = None,
) -> tuple[LmModel, TrainReport]:
    """Optimize the DPO objective; the reference stays frozen throughout.

    By default the reference is a frozen snapshot of `policy` at entry
    (the SFT initialization); pass `reference` to use another baseline,
    e.g. the raw pre-SFT model.
    """
    if reference is None:
        reference = clone_frozen(policy)
    report = TrainReport()
    report.degenerate_pairs = sum(1 for _, yp, ym in examples if yp == ym)
    report.margin_before = dataset_mean_margin(policy, reference, examples, cfg.beta)

    def micro_loss(items):
        loss, stats = dpo_loss_tensor(policy, reference, items, cfg.beta)
        return loss, stats.mean_margin(cfg.beta)

    _train_loop(policy, examples, cfg, seed, micro_loss, report)
    report.margin_after = dataset_mean_margin(policy, reference, examples, cfg.beta)
    return policy, report

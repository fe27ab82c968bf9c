import copy
import math

import numpy as np
import pytest
import torch

from qedistill.lm import (
    BigramLM,
    SequenceBatch,
    TinyTransformerLM,
    Vocab,
    clone_frozen,
    greedy_generate,
    log_prob,
)
from qedistill.training import (
    DpoConfig,
    SftConfig,
    TrainingError,
    dataset_mean_margin,
    dpo_loss,
    dpo_loss_from_logps,
    dpo_loss_tensor,
    lr_factor,
    sft_loss,
    sft_loss_tensor,
    train_dpo,
    train_sft,
)

WORDS6 = ("apple", "berry", "cedar", "delta", "ember", "fjord")
LN2 = math.log(2.0)


@pytest.fixture
def vocab10():
    return Vocab(tokens=("<bos>", "<eos>", "<pad>", "<unk>") + WORDS6)


def randomize(model, seed):
    rng = np.random.Generator(np.random.PCG64(seed))
    with torch.no_grad():
        for _, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            p.copy_(torch.from_numpy(rng.normal(0, 1.0, size=tuple(p.shape))))
    return model


def random_batch(vocab, rng, n_pairs=3):
    out = []
    for _ in range(n_pairs):
        x = [int(i) for i in rng.integers(4, len(vocab), rng.integers(1, 4))]
        yp = [int(i) for i in rng.integers(4, len(vocab), rng.integers(1, 5))]
        ym = [int(i) for i in rng.integers(4, len(vocab), rng.integers(1, 5))]
        out.append((x, yp, ym))
    return out


# --- SFT loss ----------------------------------------------------------------


def test_sft_uniform_loss(vocab10):
    model = BigramLM(vocab10)  # uniform init
    batch = SequenceBatch.from_pairs(
        [(vocab10.encode("delta"), vocab10.encode("apple berry cedar"))], vocab10
    )
    loss, grads = sft_loss(model, batch)
    assert loss == pytest.approx(3 * math.log(10), abs=1e-12)
    assert set(grads) == {"table"}


def test_sft_loss_nonnegative(vocab10):
    rng = np.random.Generator(np.random.PCG64(0))
    for seed in range(5):
        model = randomize(BigramLM(vocab10), seed)
        pairs = [(x, yp) for x, yp, _ in random_batch(vocab10, rng)]
        loss, _ = sft_loss(model, SequenceBatch.from_pairs(pairs, vocab10))
        assert loss >= 0.0


def test_sft_all_masked_batch_errors(vocab10):
    model = BigramLM(vocab10)
    batch = SequenceBatch.from_pairs([(vocab10.encode("apple"), [])], vocab10)
    with pytest.raises(TrainingError, match="supervised"):
        sft_loss(model, batch)


# --- DPO loss ----------------------------------------------------------------


def test_dpo_identity_policy_equals_reference(vocab10):
    rng = np.random.Generator(np.random.PCG64(1))
    for seed in range(5):
        policy = randomize(BigramLM(vocab10), 50 + seed)
        reference = clone_frozen(policy)
        batch = random_batch(vocab10, rng, n_pairs=4)
        loss, _, stats = dpo_loss(policy, reference, batch, beta=0.05)
        assert abs(loss - LN2) < 1e-9
        assert all(abs(v) < 1e-9 for v in stats.inner_per_pair)


def test_dpo_beta_to_zero_limit(vocab10):
    policy = randomize(BigramLM(vocab10), 60)
    reference = randomize(BigramLM(vocab10), 61)  # different parameters
    rng = np.random.Generator(np.random.PCG64(2))
    batch = random_batch(vocab10, rng)
    loss, _, _ = dpo_loss(policy, reference, batch, beta=1e-12)
    assert abs(loss - LN2) < 1e-9


def test_dpo_constant_shift_invariance():
    # The inner bracket depends only on differences: shifting both policy
    # log-probs by a constant leaves the loss untouched.
    pol_c = torch.tensor([-3.0, -5.0, -2.5], dtype=torch.float64)
    pol_r = torch.tensor([-4.0, -4.5, -6.0], dtype=torch.float64)
    ref_c = torch.tensor([-3.3, -4.0, -3.1], dtype=torch.float64)
    ref_r = torch.tensor([-3.9, -5.2, -4.4], dtype=torch.float64)
    base, _ = dpo_loss_from_logps(pol_c, pol_r, ref_c, ref_r, beta=0.05)
    for shift in (-7.0, 0.1, 42.0):
        shifted, _ = dpo_loss_from_logps(
            pol_c + shift, pol_r + shift, ref_c, ref_r, beta=0.05
        )
        assert float(shifted) == pytest.approx(float(base), abs=1e-12)


def test_dpo_degenerate_identical_pair(vocab10):
    policy = randomize(BigramLM(vocab10), 70)
    reference = randomize(BigramLM(vocab10), 71)
    y = vocab10.encode("apple berry")
    batch = [(vocab10.encode("cedar"), y, list(y))]
    loss, grads, stats = dpo_loss(policy, reference, batch, beta=0.05)
    assert loss == pytest.approx(LN2, abs=1e-12)
    assert stats.degenerate == 1
    assert all(torch.all(g == 0) for g in grads.values())


def test_dpo_gradients_only_touch_policy(vocab10):
    policy = randomize(BigramLM(vocab10), 80)
    reference = clone_frozen(randomize(BigramLM(vocab10), 81))
    rng = np.random.Generator(np.random.PCG64(3))
    loss, stats = dpo_loss_tensor(policy, reference, random_batch(vocab10, rng), 0.05)
    loss.backward()
    assert policy.table.grad is not None
    assert reference.table.grad is None


# --- finite-difference checks on the losses ----------------------------------


def fd_grad(loss_fn, param, indices, h=1e-6):
    out = []
    with torch.no_grad():
        for idx in indices:
            orig = float(param.view(-1)[idx])
            param.view(-1)[idx] = orig + h
            up = float(loss_fn())
            param.view(-1)[idx] = orig - h
            down = float(loss_fn())
            param.view(-1)[idx] = orig
            out.append((up - down) / (2 * h))
    return np.array(out)


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def test_sft_gradient_matches_finite_differences(vocab10):
    rng = np.random.Generator(np.random.PCG64(5))
    pairs = [(x, yp) for x, yp, _ in random_batch(vocab10, rng, 3)]
    batch = SequenceBatch.from_pairs(pairs, vocab10)
    for trial in range(5):
        model = randomize(BigramLM(vocab10), 200 + trial)
        _, grads = sft_loss(model, batch)
        analytic = grads["table"].numpy().ravel()
        indices = rng.choice(model.table.numel(), size=60, replace=False)
        with torch.no_grad():
            fd = fd_grad(lambda: sft_loss_tensor(model, batch), model.table, indices)
        assert rel_err(fd, analytic[indices]) < 1e-4


def test_dpo_gradient_matches_finite_differences(vocab10):
    rng = np.random.Generator(np.random.PCG64(6))
    batch = random_batch(vocab10, rng, 3)
    reference = randomize(BigramLM(vocab10), 300)
    for p in reference.parameters():
        p.requires_grad_(False)
    for trial in range(5):
        policy = randomize(BigramLM(vocab10), 400 + trial)
        _, grads, _ = dpo_loss(policy, reference, batch, beta=0.05)
        analytic = grads["table"].numpy().ravel()
        indices = rng.choice(policy.table.numel(), size=60, replace=False)
        fd = fd_grad(
            lambda: dpo_loss_tensor(policy, reference, batch, 0.05)[0],
            policy.table,
            indices,
        )
        assert rel_err(fd, analytic[indices]) < 1e-4


def test_transformer_sft_gradient_matches_fd(vocab10):
    rng = np.random.Generator(np.random.PCG64(7))
    model = TinyTransformerLM(vocab10, seed=8, d_model=16, n_layers=1, n_heads=2, context=16)
    pairs = [(x, yp) for x, yp, _ in random_batch(vocab10, rng, 2)]
    batch = SequenceBatch.from_pairs(pairs, vocab10)
    loss = sft_loss_tensor(model, batch)
    named = sorted(model.named_parameters())
    grads = torch.autograd.grad(loss, [p for _, p in named])
    analytic = dict(zip([n for n, _ in named], grads))
    fd_all, an_all = [], []
    for name, param in named:
        indices = rng.choice(param.numel(), size=min(6, param.numel()), replace=False)
        fd = fd_grad(lambda: sft_loss_tensor(model, batch), param, indices)
        fd_all.append(fd)
        an_all.append(analytic[name].numpy().ravel()[indices])
    assert rel_err(np.concatenate(fd_all), np.concatenate(an_all)) < 1e-3


# --- schedule -----------------------------------------------------------------


def test_lr_factor_warmup_then_cosine():
    total, frac = 100, 0.10
    assert lr_factor(0, total, frac) == pytest.approx(0.1)
    assert lr_factor(9, total, frac) == pytest.approx(1.0)
    # After warmup: cosine from 1 toward 0.
    assert lr_factor(10, total, frac) == pytest.approx(1.0)
    mid = lr_factor(10 + 45, total, frac)
    assert mid == pytest.approx(0.5 * (1 + math.cos(math.pi * 0.5)), abs=1e-12)
    assert lr_factor(99, total, frac) < 0.01


def test_lr_factor_no_warmup():
    assert lr_factor(0, 10, 0.0) == pytest.approx(1.0)


# --- training loops -----------------------------------------------------------


def memorizable_examples(vocab, n=20):
    rng = np.random.Generator(np.random.PCG64(9))
    examples = []
    for i in range(n):
        x = [int(rng.integers(4, len(vocab)))]
        y = [int(j) for j in rng.integers(4, len(vocab), 3)] + [vocab.eos]
        examples.append((x, y))
    return examples


def test_train_sft_reduces_loss(vocab10):
    examples = memorizable_examples(vocab10)
    model = BigramLM(vocab10, seed=0)
    cfg = SftConfig(lr=0.2, batch_size=2, grad_accum=2, epochs=5)
    model, report = train_sft(model, examples, cfg, seed=0)
    assert report.epoch_mean_losses[-1] < report.epoch_mean_losses[0]
    assert report.steps == len(report.step_losses)
    expected_steps = 5 * math.ceil(math.ceil(20 / 2) / 2)
    assert report.steps == expected_steps


def test_train_sft_epoch_losses_strictly_decrease(vocab10):
    examples = memorizable_examples(vocab10)
    model = BigramLM(vocab10, seed=0)
    cfg = SftConfig(lr=0.2, batch_size=2, grad_accum=4, epochs=4)
    _, report = train_sft(model, examples, cfg, seed=0)
    for earlier, later in zip(report.epoch_mean_losses, report.epoch_mean_losses[1:]):
        assert later < earlier


def test_train_sft_deterministic(vocab10):
    examples = memorizable_examples(vocab10)
    cfg = SftConfig(lr=0.2, batch_size=2, grad_accum=2, epochs=3)
    a, _ = train_sft(BigramLM(vocab10, seed=0), list(examples), cfg, seed=0)
    b, _ = train_sft(BigramLM(vocab10, seed=0), list(examples), cfg, seed=0)
    assert torch.equal(a.table, b.table)


def test_train_sft_memorizes_bigram_consistent_set(vocab10):
    # Bigram-memorizable: every context token has exactly one continuation
    # across the whole set (two disjoint chains ending in eos).
    chains = [([4], [5, 6, vocab10.eos]), ([7], [8, 9, vocab10.eos])]
    examples = [(list(x), list(y)) for x, y in chains for _ in range(10)]
    model = BigramLM(vocab10, seed=0)
    cfg = SftConfig(lr=0.5, batch_size=2, grad_accum=1, epochs=10)
    model, _ = train_sft(model, examples, cfg, seed=0)
    reproduced = sum(
        1 for x, y in examples if greedy_generate(model, x, len(y)) == y
    )
    assert reproduced / len(examples) >= 0.8


def test_train_sft_empty_dataset_rejected(vocab10):
    with pytest.raises(TrainingError):
        train_sft(BigramLM(vocab10), [], SftConfig())


def test_train_dpo_single_pair_ascent(vocab10):
    policy = randomize(BigramLM(vocab10), 500)
    x = vocab10.encode("apple")
    yp = vocab10.encode("berry cedar") + [vocab10.eos]
    ym = vocab10.encode("delta ember") + [vocab10.eos]
    gap_before = log_prob(policy, x, yp) - log_prob(policy, x, ym)
    cfg = DpoConfig(beta=0.05, lr=0.2, batch_size=1, grad_accum=1, epochs=30)
    policy, report = train_dpo(policy, [(x, yp, ym)], cfg, seed=0)
    gap_after = log_prob(policy, x, yp) - log_prob(policy, x, ym)
    assert gap_after > gap_before
    assert report.margin_before == pytest.approx(0.0, abs=1e-12)
    assert report.margin_after > 0.0


def test_train_dpo_reference_stays_frozen(vocab10):
    policy = randomize(BigramLM(vocab10), 600)
    snapshot = copy.deepcopy(policy)
    rng = np.random.Generator(np.random.PCG64(10))
    batch = random_batch(vocab10, rng, 10)
    cfg = DpoConfig(beta=0.05, lr=0.1, batch_size=2, grad_accum=2, epochs=3)
    reference = clone_frozen(policy)
    policy, _ = train_dpo(policy, batch, cfg, seed=0, reference=reference)
    for (x, yp, ym) in batch[:3]:
        assert log_prob(reference, x, yp) == log_prob(snapshot, x, yp)
        assert log_prob(reference, x, ym) == log_prob(snapshot, x, ym)
    assert log_prob(policy, *batch[0][:2]) != log_prob(snapshot, *batch[0][:2])


def test_train_dpo_margin_grows_on_synthetic_pairs(vocab10):
    rng = np.random.Generator(np.random.PCG64(11))
    pairs = random_batch(vocab10, rng, 50)
    pairs = [p for p in pairs if p[1] != p[2]]
    policy = randomize(BigramLM(vocab10), 700)
    cfg = DpoConfig(beta=0.05, lr=0.1, batch_size=2, grad_accum=4, epochs=3)
    policy, report = train_dpo(policy, pairs, cfg, seed=0)
    assert report.margin_before == pytest.approx(0.0, abs=1e-12)
    assert report.margin_after > report.margin_before
    assert report.margin_after > 0.0
    assert len(report.step_margins) == report.steps


def test_train_dpo_bit_reproducible(vocab10):
    rng = np.random.Generator(np.random.PCG64(12))
    pairs = random_batch(vocab10, rng, 12)
    cfg = DpoConfig(beta=0.05, lr=0.1, batch_size=2, grad_accum=2, epochs=2)
    a, _ = train_dpo(randomize(BigramLM(vocab10), 800), list(pairs), cfg, seed=3)
    b, _ = train_dpo(randomize(BigramLM(vocab10), 800), list(pairs), cfg, seed=3)
    assert torch.equal(a.table, b.table)


def test_dataset_mean_margin_zero_at_init(vocab10):
    policy = randomize(BigramLM(vocab10), 900)
    reference = clone_frozen(policy)
    rng = np.random.Generator(np.random.PCG64(13))
    batch = random_batch(vocab10, rng, 40)
    assert dataset_mean_margin(policy, reference, batch, 0.05) == pytest.approx(
        0.0, abs=1e-12
    )


def test_dpo_config_validation():
    with pytest.raises(ValueError):
        DpoConfig(beta=0.0)

"""Minimal trainable autoregressive LMs housing the policy and reference.

Two architectures: a bigram softmax table (exactly differentiable, the
easiest gradient oracle) and a tiny causal transformer. Everything runs in
float64 on CPU so finite-difference checks have headroom, and all
initialization is drawn from a seeded numpy generator for bit
reproducibility.
"""

from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

BOS, EOS, PAD, UNK = "<bos>", "<eos>", "<pad>", "<unk>"
SPECIAL_TOKENS = (BOS, EOS, PAD, UNK)

CKPT_MAGIC = b"QXLM\x00"
CKPT_VERSION = 1


class CorruptCheckpointError(Exception):
    pass


@dataclass(frozen=True)
class Vocab:
    """Whitespace-piece vocabulary with fixed special tokens at indices 0-3."""

    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if self.tokens[:4] != SPECIAL_TOKENS:
            raise ValueError("vocab must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be unique")
        object.__setattr__(
            self, "_ids", {t: i for i, t in enumerate(self.tokens)}
        )

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def bos(self) -> int:
        return 0

    @property
    def eos(self) -> int:
        return 1

    @property
    def pad(self) -> int:
        return 2

    @property
    def unk(self) -> int:
        return 3

    def encode(self, text: str) -> list[int]:
        ids = self._ids
        return [ids.get(piece, self.unk) for piece in text.split()]

    def decode(self, ids: list[int]) -> str:
        return " ".join(self.tokens[i] for i in ids)


def build_vocab(texts: list[str]) -> Vocab:
    pieces = sorted({p for text in texts for p in text.split()} - set(SPECIAL_TOKENS))
    return Vocab(tokens=SPECIAL_TOKENS + tuple(pieces))


class BigramLM(nn.Module):
    """V x V logits table: p(next | prev) = softmax(table[prev])."""

    arch = "bigram_softmax"
    max_context: int | None = None

    def __init__(self, vocab: Vocab, seed: int = 0):
        super().__init__()
        self.vocab = vocab
        self.seed = seed
        v = len(vocab)
        # Uniform distribution at init: all-zero logits.
        self.table = nn.Parameter(torch.zeros((v, v), dtype=torch.float64))

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        return self.table[input_ids]


class TinyTransformerLM(nn.Module):
    """Two-block causal transformer (d=32, two heads, context 64)."""

    arch = "tiny_transformer"

    def __init__(
        self,
        vocab: Vocab,
        seed: int = 0,
        d_model: int = 32,
        n_layers: int = 2,
        n_heads: int = 2,
        context: int = 64,
    ):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        self.vocab = vocab
        self.seed = seed
        self.d_model, self.n_layers, self.n_heads = d_model, n_layers, n_heads
        self.max_context = context
        v = len(vocab)
        self.tok_emb = nn.Parameter(torch.empty((v, d_model), dtype=torch.float64))
        self.pos_emb = nn.Parameter(torch.empty((context, d_model), dtype=torch.float64))
        self.blocks = nn.ModuleList(
            _TransformerBlock(d_model, n_heads) for _ in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(d_model, dtype=torch.float64)
        self.head = nn.Linear(d_model, v, bias=False, dtype=torch.float64)
        _init_weights(self, seed)

    def forward(self, input_ids: torch.Tensor) -> torch.Tensor:
        t = input_ids.shape[-1]
        if t > self.max_context:
            raise ValueError(f"sequence length {t} exceeds context {self.max_context}")
        h = self.tok_emb[input_ids] + self.pos_emb[:t]
        for block in self.blocks:
            h = block(h)
        return self.head(self.ln_f(h))


class _TransformerBlock(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.ln1 = nn.LayerNorm(d_model, dtype=torch.float64)
        self.attn_qkv = nn.Linear(d_model, 3 * d_model, dtype=torch.float64)
        self.attn_out = nn.Linear(d_model, d_model, dtype=torch.float64)
        self.ln2 = nn.LayerNorm(d_model, dtype=torch.float64)
        self.mlp_in = nn.Linear(d_model, 4 * d_model, dtype=torch.float64)
        self.mlp_out = nn.Linear(4 * d_model, d_model, dtype=torch.float64)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        b, t, d = h.shape
        hd = d // self.n_heads
        q, k, v = self.attn_qkv(self.ln1(h)).split(d, dim=-1)
        q = q.view(b, t, self.n_heads, hd).transpose(1, 2)
        k = k.view(b, t, self.n_heads, hd).transpose(1, 2)
        v = v.view(b, t, self.n_heads, hd).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / hd**0.5
        causal = torch.tril(torch.ones((t, t), dtype=torch.bool, device=h.device))
        scores = scores.masked_fill(~causal, float("-inf"))
        att = torch.softmax(scores, dim=-1) @ v
        h = h + self.attn_out(att.transpose(1, 2).reshape(b, t, d))
        x = self.ln2(h)
        return h + self.mlp_out(F.gelu(self.mlp_in(x)))


def _init_weights(model: nn.Module, seed: int) -> None:
    """Deterministic init: scaled-normal weights, zero biases, unit norms."""
    rng = np.random.Generator(np.random.PCG64(seed))
    with torch.no_grad():
        for name, param in sorted(model.named_parameters(), key=lambda kv: kv[0]):
            if name.endswith(("ln1.weight", "ln2.weight", "ln_f.weight")):
                param.fill_(1.0)
            elif name.endswith("bias"):
                param.zero_()
            else:
                values = rng.normal(0.0, 0.02, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values))


LmModel = BigramLM | TinyTransformerLM


def _check_length(model: LmModel, total: int) -> None:
    limit = model.max_context
    if limit is not None and total > limit:
        raise ValueError(f"sequence length {total} exceeds context {limit}")


@dataclass
class SequenceBatch:
    """Padded (prompt, continuation) batch; the mask covers only continuation
    positions."""

    input_ids: torch.Tensor   # (B, T): [bos] + x + y without its last token
    target_ids: torch.Tensor  # (B, T): x + y shifted left by one
    mask: torch.Tensor        # (B, T) float64, 1.0 exactly on y positions

    @staticmethod
    def from_pairs(pairs: list[tuple[list[int], list[int]]], vocab: Vocab) -> "SequenceBatch":
        if not pairs:
            raise ValueError("empty batch")
        rows = [[vocab.bos] + list(x) + list(y) for x, y in pairs]
        width = max(len(r) - 1 for r in rows)
        b = len(rows)
        input_ids = torch.full((b, width), vocab.pad, dtype=torch.long)
        target_ids = torch.full((b, width), vocab.pad, dtype=torch.long)
        mask = torch.zeros((b, width), dtype=torch.float64)
        for i, ((x, y), row) in enumerate(zip(pairs, rows)):
            n = len(row) - 1
            input_ids[i, :n] = torch.tensor(row[:-1], dtype=torch.long)
            target_ids[i, :n] = torch.tensor(row[1:], dtype=torch.long)
            # Continuation y occupies the last len(y) target positions.
            mask[i, len(x) : len(x) + len(y)] = 1.0
        return SequenceBatch(input_ids=input_ids, target_ids=target_ids, mask=mask)


def sequence_log_probs(model: LmModel, batch: SequenceBatch) -> torch.Tensor:
    """Differentiable per-sequence sum of continuation log-probabilities."""
    _check_length(model, batch.input_ids.shape[1])
    logits = model(batch.input_ids)
    logp = torch.log_softmax(logits, dim=-1)
    token_logp = logp.gather(-1, batch.target_ids.unsqueeze(-1)).squeeze(-1)
    return (token_logp * batch.mask).sum(dim=-1)


def log_prob(model: LmModel, x: list[int], y: list[int]) -> float:
    """Sum of log p(y_t | x, y_<t) over continuation tokens (0.0 if y empty)."""
    if not y:
        return 0.0
    batch = SequenceBatch.from_pairs([(x, y)], model.vocab)
    with torch.no_grad():
        return float(sequence_log_probs(model, batch)[0])


def greedy_generate(model: LmModel, x: list[int], max_len: int) -> list[int]:
    """Argmax decoding until eos or max_len tokens; ties take the lowest id."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    vocab = model.vocab
    context = [vocab.bos] + list(x)
    out: list[int] = []
    with torch.no_grad():
        for _ in range(max_len):
            window = context
            if model.max_context is not None:
                window = context[-model.max_context :]
            ids = torch.tensor([window], dtype=torch.long)
            logits = model(ids)[0, -1].numpy()
            next_id = int(np.argmax(logits))  # first max: lowest token id
            out.append(next_id)
            if next_id == vocab.eos:
                break
            context.append(next_id)
    return out


def clone_frozen(model: LmModel) -> LmModel:
    """Deep copy with gradients disabled; training the source never touches it."""
    frozen = copy.deepcopy(model)
    for param in frozen.parameters():
        param.requires_grad_(False)
    frozen.eval()
    return frozen


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary with vocab + params + seed.
# ---------------------------------------------------------------------------

_ARCH_CODES = {"bigram_softmax": 0, "tiny_transformer": 1}


def _write_str(out, s: str) -> None:
    raw = s.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def save_checkpoint(model: LmModel, path) -> None:
    with open(path, "wb") as out:
        out.write(CKPT_MAGIC)
        out.write(struct.pack("<I", CKPT_VERSION))
        out.write(struct.pack("<B", _ARCH_CODES[model.arch]))
        out.write(struct.pack("<q", model.seed))
        if model.arch == "tiny_transformer":
            out.write(
                struct.pack(
                    "<IIII",
                    model.d_model,
                    model.n_layers,
                    model.n_heads,
                    model.max_context,
                )
            )
        out.write(struct.pack("<I", len(model.vocab)))
        for token in model.vocab.tokens:
            _write_str(out, token)
        state = model.state_dict()
        out.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            tensor = state[name]
            _write_str(out, name)
            array = tensor.detach().numpy().astype("<f8")
            out.write(struct.pack("<B", array.ndim))
            for dim in array.shape:
                out.write(struct.pack("<Q", dim))
            out.write(array.tobytes())


def load_checkpoint(path) -> LmModel:
    with open(path, "rb") as fh:
        data = fh.read()
    buf = io.BytesIO(data)

    def take(n: int) -> bytes:
        chunk = buf.read(n)
        if len(chunk) != n:
            raise CorruptCheckpointError(f"{path}: truncated checkpoint")
        return chunk

    def unpack(fmt: str):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    def read_str() -> str:
        (n,) = unpack("<I")
        return take(n).decode("utf-8")

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = unpack("<I")
    if version != CKPT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported version {version}")
    (arch_code,) = unpack("<B")
    (seed,) = unpack("<q")
    if arch_code == _ARCH_CODES["tiny_transformer"]:
        d_model, n_layers, n_heads, context = unpack("<IIII")
    elif arch_code != _ARCH_CODES["bigram_softmax"]:
        raise CorruptCheckpointError(f"{path}: unknown architecture {arch_code}")
    (n_tokens,) = unpack("<I")
    vocab = Vocab(tokens=tuple(read_str() for _ in range(n_tokens)))
    if arch_code == _ARCH_CODES["bigram_softmax"]:
        model: LmModel = BigramLM(vocab, seed=seed)
    else:
        model = TinyTransformerLM(
            vocab,
            seed=seed,
            d_model=d_model,
            n_layers=n_layers,
            n_heads=n_heads,
            context=context,
        )
    (n_params,) = unpack("<I")
    state = {}
    for _ in range(n_params):
        name = read_str()
        (ndim,) = unpack("<B")
        shape = tuple(unpack("<Q")[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = take(count * 8)
        state[name] = torch.from_numpy(
            np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        )
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CorruptCheckpointError(f"{path}: parameter mismatch ({exc})") from exc
    if not all(torch.isfinite(p).all() for p in model.parameters()):
        raise CorruptCheckpointError(f"{path}: non-finite parameters")
    return model

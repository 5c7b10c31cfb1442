"""Tiny causal decoder LM that reads adapted visual tokens followed by text.

Sequence layout: ``[visual tokens][BOS][prompt][target][EOS]``. Positions
count through the whole sequence, visual tokens included. The loss mask is
true exactly on target and EOS positions; position ``p`` is predicted from
the logits at ``p - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DataError, DimensionError
from .synthdata import CAPTION_SYMBOLS

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
VISUAL = -1  # id placeholder on visual positions
OUT_INIT_SCALE = 0.1


class Vocab:
    def __init__(self, symbols):
        symbols = list(symbols)
        if tuple(symbols[:3]) != SPECIALS:
            raise ConfigurationError(f"vocabulary must start with {SPECIALS}")
        if len(set(symbols)) != len(symbols):
            raise ConfigurationError("vocabulary symbols must be unique")
        self.symbols = symbols
        self.index = {s: i for i, s in enumerate(symbols)}

    @classmethod
    def default(cls) -> "Vocab":
        return cls(SPECIALS + CAPTION_SYMBOLS)

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.symbols == other.symbols

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[t] for t in text.split()]
        except KeyError as exc:
            raise ConfigurationError(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.symbols[i] for i in ids)

    def to_text(self) -> str:
        return "\n".join(self.symbols) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        return cls(text.splitlines())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        try:
            return cls.from_text(Path(path).read_text())
        except OSError as exc:
            raise DataError(f"cannot read vocabulary {path}: {exc}") from exc


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context: int = 80
    mlp_hidden: int = 128


def init_decoder(cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float64) -> dict[str, np.ndarray]:
    d, v = cfg.d_model, cfg.vocab_size
    p = {
        "tok_emb": (0.1 * rng.standard_normal((v, d))).astype(dtype),
        "pos_emb": (0.1 * rng.standard_normal((cfg.context, d))).astype(dtype),
    }
    for i in range(cfg.n_layers):
        for k, val in nx.init_attention(rng, d, dtype=dtype).items():
            p[f"blocks.{i}.attn.{k}"] = val
        p[f"blocks.{i}.mlp.ln_gain"] = np.ones(d, dtype=dtype)
        p[f"blocks.{i}.mlp.ln_shift"] = np.zeros(d, dtype=dtype)
        p[f"blocks.{i}.mlp.w1"] = nx.glorot(rng, d, cfg.mlp_hidden, dtype=dtype)
        p[f"blocks.{i}.mlp.b1"] = np.zeros(cfg.mlp_hidden, dtype=dtype)
        p[f"blocks.{i}.mlp.w2"] = nx.glorot(rng, cfg.mlp_hidden, d, dtype=dtype)
        p[f"blocks.{i}.mlp.b2"] = np.zeros(d, dtype=dtype)
    p["final.ln_gain"] = np.ones(d, dtype=dtype)
    p["final.ln_shift"] = np.zeros(d, dtype=dtype)
    # small output projection: an untrained model predicts near-uniformly
    p["out.w"] = (OUT_INIT_SCALE * nx.glorot(rng, d, v)).astype(dtype)
    p["out.b"] = np.zeros(v, dtype=dtype)
    return p


def _sub(params, prefix):
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# Sequences
# ---------------------------------------------------------------------------


@dataclass
class MultimodalSequence:
    visual: np.ndarray  # (T, D_LLM)
    ids: np.ndarray  # (L,) token id per position, VISUAL on visual positions
    loss_mask: np.ndarray  # (L,) bool

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_visual(self) -> int:
        return self.visual.shape[0]


def assemble(visual: np.ndarray, prompt_ids, target_ids, d_model: int | None = None) -> MultimodalSequence:
    visual = np.asarray(visual)
    if visual.ndim != 2:
        raise DimensionError(f"assemble: visual tokens must be (T, D), got {visual.shape}")
    if d_model is not None and visual.shape[1] != d_model:
        raise DimensionError(f"assemble: visual width {visual.shape[1]} != D_LLM {d_model}")
    prompt_ids = list(prompt_ids)
    target_ids = list(target_ids)
    if not target_ids:
        raise ConfigurationError("assemble: target must not be empty")
    t = visual.shape[0]
    text = [BOS, *prompt_ids, *target_ids, EOS]
    ids = np.array([VISUAL] * t + text, dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[len(ids) - len(target_ids) - 1:] = True
    return MultimodalSequence(visual=visual, ids=ids, loss_mask=mask)


@dataclass
class Batch:
    """Right-padded batch of sequences, ready for the decoder."""

    ids: np.ndarray  # (B, L) with PAD after each sequence and VISUAL on visual slots
    loss_mask: np.ndarray  # (B, L)
    visual: list[np.ndarray]
    n_visual: np.ndarray  # (B,)
    lengths: np.ndarray  # (B,)


def collate(seqs: list[MultimodalSequence]) -> Batch:
    length = max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s.ids
        mask[i, :len(s)] = s.loss_mask
    return Batch(ids, mask, [s.visual for s in seqs],
                 np.array([s.n_visual for s in seqs]), np.array([len(s) for s in seqs]))


def embed(params, batch: Batch) -> np.ndarray:
    """Input embeddings (B, L, D): visual rows where given, token rows elsewhere."""
    tok = params["tok_emb"]
    ids = np.where(batch.ids == VISUAL, PAD, batch.ids)
    x = tok[ids]
    for i, v in enumerate(batch.visual):
        x[i, :v.shape[0]] = v
    return x


# ---------------------------------------------------------------------------
# Transformer body
# ---------------------------------------------------------------------------


def forward(params, cfg: DecoderConfig, x: np.ndarray, keep_cache: bool = False):
    """Logits ``(B, L, V)`` for input embeddings ``x`` of shape ``(B, L, D)``."""
    length = x.shape[-2]
    if length > cfg.context:
        raise ConfigurationError(f"sequence length {length} exceeds context {cfg.context}")
    x = x + params["pos_emb"][:length]
    caches = []
    for i in range(cfg.n_layers):
        x, c_attn = nx.attention_block(x, _sub(params, f"blocks.{i}.attn."), causal=True, n_heads=cfg.n_heads)
        mp = _sub(params, f"blocks.{i}.mlp.")
        h, c_ln = nx.layer_norm(x, mp["ln_gain"], mp["ln_shift"])
        a, c_l1 = nx.linear_layer(h, mp["w1"], mp["b1"])
        g, c_g = nx.gelu(a)
        m, c_l2 = nx.linear_layer(g, mp["w2"], mp["b2"])
        x = x + m
        caches.append((c_attn, c_ln, c_l1, c_g, c_l2))
    h, c_final = nx.layer_norm(x, params["final.ln_gain"], params["final.ln_shift"])
    logits, c_out = nx.linear_layer(h, params["out.w"], params["out.b"])
    return logits, ((caches, c_final, c_out, length) if keep_cache else None)


def backward(dlogits: np.ndarray, cache, cfg: DecoderConfig):
    """Returns ``(grads, dx)`` where ``dx`` is the gradient w.r.t. the input embeddings."""
    caches, c_final, c_out, length = cache
    grads = {}
    dh, grads["out.w"], grads["out.b"] = nx.linear_layer_backward(dlogits, c_out)
    dx, grads["final.ln_gain"], grads["final.ln_shift"] = nx.layer_norm_backward(dh, c_final)
    for i in reversed(range(cfg.n_layers)):
        c_attn, c_ln, c_l1, c_g, c_l2 = caches[i]
        pre = f"blocks.{i}.mlp."
        dg, grads[pre + "w2"], grads[pre + "b2"] = nx.linear_layer_backward(dx, c_l2)
        da = nx.gelu_backward(dg, c_g)
        dh, grads[pre + "w1"], grads[pre + "b1"] = nx.linear_layer_backward(da, c_l1)
        dx_ln, grads[pre + "ln_gain"], grads[pre + "ln_shift"] = nx.layer_norm_backward(dh, c_ln)
        dx = dx + dx_ln
        dx, g_attn = nx.attention_block_backward(dx, c_attn)
        for k, v in g_attn.items():
            grads[f"blocks.{i}.attn.{k}"] = v
    d_pos = np.zeros((cfg.context, dx.shape[-1]), dtype=dx.dtype)
    d_pos[:length] = dx.reshape(-1, length, dx.shape[-1]).sum(axis=0)
    grads["pos_emb"] = d_pos
    return grads, dx


def _targets(batch: Batch):
    """(rows, prediction positions, target ids) of every masked position."""
    rows, cols = np.nonzero(batch.loss_mask)
    if rows.size == 0:
        raise ConfigurationError("lm_loss: loss mask selects no positions")
    if cols.min() < 1:
        raise ConfigurationError("lm_loss: first position cannot be a target")
    return rows, cols - 1, batch.ids[rows, cols]


def batch_loss(params, cfg: DecoderConfig, batch: Batch, need_grads: bool = True):
    """Mean next-token cross-entropy over masked positions.

    Returns ``(loss, grads, d_visual)``; ``d_visual`` is a list holding the
    gradient w.r.t. each sequence's visual tokens. With ``need_grads=False``
    the last two entries are None.
    """
    x = embed(params, batch)
    logits, cache = forward(params, cfg, x, keep_cache=need_grads)
    rows, pos, tgt = _targets(batch)
    loss, dsel = nx.cross_entropy_rows(logits[rows, pos], tgt)
    if not need_grads:
        return loss, None, None
    dlogits = np.zeros_like(logits)
    dlogits[rows, pos] = dsel
    grads, dx = backward(dlogits, cache, cfg)
    d_tok = np.zeros_like(params["tok_emb"])
    text = batch.ids != VISUAL
    np.add.at(d_tok, batch.ids[text], dx[text])
    grads["tok_emb"] = d_tok
    d_visual = [dx[i, :v.shape[0]] for i, v in enumerate(batch.visual)]
    return loss, grads, d_visual


def grouped_batch_loss(params, cfg: DecoderConfig, seqs: list[MultimodalSequence], need_grads: bool = True):
    """``batch_loss`` over ``seqs`` without padding waste.

    Sequences are bucketed by length and each bucket runs as its own batch;
    losses and gradients are recombined with per-bucket target counts, so the
    result equals the padded batch up to float rounding (causal attention
    never looks at trailing pads). ``d_visual`` keeps the order of ``seqs``.
    """
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(len(s), []).append(i)
    total = sum(int(s.loss_mask.sum()) for s in seqs)
    loss = 0.0
    grads = None
    d_visual: list = [None] * len(seqs)
    for length in sorted(groups):
        idx = groups[length]
        sub = [seqs[i] for i in idx]
        w = sum(int(s.loss_mask.sum()) for s in sub) / total
        g_loss, g_grads, g_dvis = batch_loss(params, cfg, collate(sub), need_grads)
        loss += w * g_loss
        if not need_grads:
            continue
        if grads is None:
            grads = {k: w * v for k, v in g_grads.items()}
        else:
            for k, v in g_grads.items():
                grads[k] += w * v
        for i, dv in zip(idx, g_dvis):
            d_visual[i] = w * dv
    if not need_grads:
        return loss, None, None
    return loss, grads, d_visual


def per_sequence_loss(params, cfg: DecoderConfig, batch: Batch) -> np.ndarray:
    """Mean masked cross-entropy of each sequence separately, shape (B,)."""
    x = embed(params, batch)
    logits, _ = forward(params, cfg, x)
    rows, pos, tgt = _targets(batch)
    logp = nx.log_softmax(logits[rows, pos])
    nll = -logp[np.arange(len(rows)), tgt]
    total = np.bincount(rows, weights=nll, minlength=len(batch.ids))
    count = np.bincount(rows, minlength=len(batch.ids))
    return total / np.maximum(count, 1)


def lm_loss(params, cfg: DecoderConfig, seq: MultimodalSequence):
    """Loss and gradients for a single sequence; see :func:`batch_loss`."""
    loss, grads, d_visual = batch_loss(params, cfg, collate([seq]))
    return loss, grads, d_visual[0]


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass
class Generation:
    ids: list[int]
    truncated: bool


def generate_batch(params, cfg: DecoderConfig, visuals, prompts, max_len: int) -> list[Generation]:
    """Greedy decoding for several prompts at once; stops at EOS or ``max_len``."""
    seqs = []
    for v, p in zip(visuals, prompts):
        t = v.shape[0]
        seqs.append(np.array([VISUAL] * t + [BOS, *p], dtype=np.int64))
    n = len(seqs)
    out = [[] for _ in range(n)]
    done = np.zeros(n, dtype=bool)
    truncated = np.zeros(n, dtype=bool)
    if max_len <= 0:
        return [Generation([], True) for _ in range(n)]
    for _ in range(max_len):
        live = [i for i in range(n) if not done[i]]
        if not live:
            break
        for i in live:
            if len(seqs[i]) >= cfg.context:
                done[i] = truncated[i] = True
        live = [i for i in live if not done[i]]
        if not live:
            break
        length = max(len(seqs[i]) for i in live)
        ids = np.full((len(live), length), PAD, dtype=np.int64)
        for r, i in enumerate(live):
            ids[r, :len(seqs[i])] = seqs[i]
        batch = Batch(ids, np.zeros_like(ids, dtype=bool), [visuals[i] for i in live],
                      np.array([visuals[i].shape[0] for i in live]), np.array([len(seqs[i]) for i in live]))
        logits, _ = forward(params, cfg, embed(params, batch))
        for r, i in enumerate(live):
            nxt = int(np.argmax(logits[r, len(seqs[i]) - 1]))
            if nxt == EOS:
                done[i] = True
                continue
            out[i].append(nxt)
            seqs[i] = np.append(seqs[i], nxt)
    truncated |= ~done
    return [Generation(out[i], bool(truncated[i])) for i in range(n)]


def generate(params, cfg: DecoderConfig, visual: np.ndarray, prompt_ids, max_len: int) -> Generation:
    return generate_batch(params, cfg, [np.asarray(visual)], [list(prompt_ids)], max_len)[0]

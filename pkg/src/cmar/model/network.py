"""Pre-LN transformer classifier with activation recording and neuron patching."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..data import Label, Story
from .config import Arch, ModelConfig
from .tokens import N_SPECIALS, PAD_ID, TokenizedEvent, tokenize

DTYPE = torch.float64
N_CLASSES = len(Label)


class LengthExceeded(ValueError):
    pass


class PatchOutOfBounds(IndexError):
    pass


@dataclass(frozen=True)
class ActivationTrace:
    """Recorded forward pass.

    hidden: (n_layers + 1, seq_len, d_model); index 0 is the embedding state.
    attention: (n_layers, n_heads, seq_len, seq_len); rows are queries.
    """

    hidden: torch.Tensor
    attention: torch.Tensor


@dataclass(frozen=True)
class Patch:
    layer: int
    positions: Sequence[int]
    dims: Sequence[int]
    donor: ActivationTrace


@dataclass
class _Masks:
    thread: torch.Tensor  # (B, T, T) bool, keys allowed per query
    cross: torch.Tensor | None  # (B, T, T) bool for two-tier cross-thread layers
    active: torch.Tensor | None  # (B, T, 1) bool, positions updated by cross layers


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        d, f = cfg.d_model, cfg.ff_dim
        self.n_heads = cfg.n_heads
        self.ln1_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.w_qkv = nn.Parameter(_init((d, 3 * d), d, gen))
        self.b_qkv = nn.Parameter(torch.zeros(3 * d, dtype=DTYPE))
        self.w_o = nn.Parameter(_init((d, d), d, gen))
        self.b_o = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.ln2_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.w_ff1 = nn.Parameter(_init((d, f), d, gen))
        self.b_ff1 = nn.Parameter(torch.zeros(f, dtype=DTYPE))
        self.w_ff2 = nn.Parameter(_init((f, d), f, gen))
        self.b_ff2 = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, h: torch.Tensor, allowed: torch.Tensor, n_query: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Update the first ``n_query`` positions (all by default); every position serves as key/value."""
        B, T, d = h.shape
        Q = T if n_query is None else n_query
        dh = d // self.n_heads
        x = F.layer_norm(h, (d,), self.ln1_w, self.ln1_b)
        kv = x @ self.w_qkv[:, d:] + self.b_qkv[d:]
        q = x[:, :Q] @ self.w_qkv[:, :d] + self.b_qkv[:d]
        q = q.reshape(B, Q, self.n_heads, dh).transpose(1, 2)
        k, v = (t.reshape(B, T, self.n_heads, dh).transpose(1, 2) for t in kv.split(d, dim=-1))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(~allowed[:, None, :Q], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        ctx = (self.drop(attn) @ v).transpose(1, 2).reshape(B, Q, d)
        h = h[:, :Q] + self.drop(ctx @ self.w_o + self.b_o)
        x = F.layer_norm(h, (d,), self.ln2_w, self.ln2_b)
        h = h + self.drop(F.gelu(x @ self.w_ff1 + self.b_ff1) @ self.w_ff2 + self.b_ff2)
        return h, attn


def _init(shape: tuple[int, ...], fan_in: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(shape, generator=gen, dtype=DTYPE) / math.sqrt(fan_in)


class RumourTransformer(nn.Module):
    """One-tier or two-tier encoder over a tokenized story.

    Two-tier models restrict the first ``cfg.n_thread_layers`` layers to
    attention inside each thread block; the remaining layers update only the
    [CLS] positions, which attend to one another. Other positions are carried
    through those layers unchanged.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        vocab = cfg.vocab_buckets + N_SPECIALS
        self.tok_emb = nn.Parameter(torch.randn(vocab, cfg.d_model, generator=gen, dtype=DTYPE) * 0.5)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_len, cfg.d_model, generator=gen, dtype=DTYPE) * 0.1)
        self.blocks = nn.ModuleList(Block(cfg, gen) for _ in range(cfg.n_layers))
        self.lnf_w = nn.Parameter(torch.ones(cfg.d_model, dtype=DTYPE))
        self.lnf_b = nn.Parameter(torch.zeros(cfg.d_model, dtype=DTYPE))
        self.w_head = nn.Parameter(_init((cfg.d_model, N_CLASSES), cfg.d_model, gen))
        self.b_head = nn.Parameter(torch.zeros(N_CLASSES, dtype=DTYPE))
        # inference mode unless a trainer switches dropout on
        self.eval()

    # -- building blocks -------------------------------------------------

    def embed(self, ids: torch.Tensor) -> torch.Tensor:
        T = ids.shape[-1]
        return self.tok_emb[ids] + self.pos_emb[:T]

    def masks(self, ids: torch.Tensor, segments: torch.Tensor) -> _Masks:
        B, T = ids.shape
        valid = ids != PAD_ID
        eye = torch.eye(T, dtype=torch.bool).expand(B, T, T)
        if self.cfg.arch is Arch.ONE_TIER:
            return _Masks(valid[:, None, :] | eye, None, None)
        same = segments[:, :, None] == segments[:, None, :]
        thread = (same & valid[:, None, :]) | eye
        # story [CLS] sits at position 0 with segment -1; thread [CLS] opens each block
        first = torch.ones_like(segments, dtype=torch.bool)
        first[:, 1:] = segments[:, 1:] != segments[:, :-1]
        active = first & valid
        cross = (active[:, :, None] & active[:, None, :]) | eye
        return _Masks(thread, cross, active[:, :, None])

    def run(
        self,
        h: torch.Tensor,
        masks: _Masks,
        start: int = 0,
        patches: Sequence[Patch] = (),
        record: bool = False,
    ) -> tuple[torch.Tensor, list[torch.Tensor], list[torch.Tensor]]:
        """Run layers ``start+1 .. n_layers`` from the layer-``start`` state and return logits."""
        hidden, attns = [], []
        h = _apply_patches(h, start, patches)
        if record:
            hidden.append(h)
        L = self.cfg.n_layers
        # The readout sees only [CLS], so the last block computes that row on its own. When the
        # full state is needed too, its [CLS] row is taken from the same computation so every
        # path yields bit-identical logits.
        full_last = record or any(p.layer == L for p in patches)
        for i in range(start, L):
            block = self.blocks[i]
            allowed = masks.thread if i < self.cfg.n_thread_layers else masks.cross
            if i < L - 1:
                new, attn = block(h, allowed)
            else:
                new, attn = block(h, allowed, n_query=1)
                if full_last:
                    rest, attn_rest = block(h, allowed)
                    new = torch.cat([new, rest[:, 1:]], dim=1)
                    attn = torch.cat([attn, attn_rest[:, :, 1:]], dim=2)
            if i < self.cfg.n_thread_layers:
                h = new
            else:
                n = new.shape[1]
                h = torch.where(masks.active[:, :n], new, h[:, :n])
            h = _apply_patches(h, i + 1, patches)
            if record:
                hidden.append(h)
                attns.append(attn)
        cls = F.layer_norm(h[:, 0], (self.cfg.d_model,), self.lnf_w, self.lnf_b)
        return cls @ self.w_head + self.b_head, hidden, attns

    def forward(self, ids: torch.Tensor, segments: torch.Tensor) -> torch.Tensor:
        return self.run(self.embed(ids), self.masks(ids, segments))[0]


def _apply_patches(h: torch.Tensor, layer: int, patches: Sequence[Patch]) -> torch.Tensor:
    todo = [p for p in patches if p.layer == layer]
    if not todo:
        return h
    h = h.clone()
    for p in todo:
        pos = torch.as_tensor(list(p.positions), dtype=torch.long)
        dims = torch.as_tensor(list(p.dims), dtype=torch.long)
        if len(pos) and len(dims):
            src = p.donor.hidden[layer][pos[:, None], dims[None, :]]
            h[:, pos[:, None], dims[None, :]] = src
    return h


# --------------------------------------------------------------------------- functional API


def _tensors(te: TokenizedEvent, cfg: ModelConfig) -> tuple[torch.Tensor, torch.Tensor]:
    if len(te) > cfg.max_len:
        raise LengthExceeded(f"sequence of {len(te)} tokens exceeds max_len={cfg.max_len}")
    if te.arch is not cfg.arch:
        raise ValueError(f"event tokenized for {te.arch.value}, model is {cfg.arch.value}")
    ids = torch.tensor([te.token_ids], dtype=torch.long)
    segs = torch.tensor([te.segments], dtype=torch.long)
    return ids, segs


def _probs(logits: torch.Tensor) -> np.ndarray:
    return torch.softmax(logits, dim=-1).detach().numpy()


def forward(model: RumourTransformer, te: TokenizedEvent) -> tuple[np.ndarray, ActivationTrace]:
    """Class probabilities (true, false, unverified) and the full activation trace."""
    ids, segs = _tensors(te, model.cfg)
    with torch.no_grad():
        logits, hidden, attns = model.run(model.embed(ids), model.masks(ids, segs), record=True)
    trace = ActivationTrace(
        hidden=torch.stack([h[0] for h in hidden]),
        attention=torch.stack([a[0] for a in attns]),
    )
    return _probs(logits)[0], trace


def _check_patches(model: RumourTransformer, te: TokenizedEvent, patches: Sequence[Patch]) -> None:
    T, d, L = len(te), model.cfg.d_model, model.cfg.n_layers
    for p in patches:
        if not 0 <= p.layer <= L:
            raise PatchOutOfBounds(f"layer {p.layer} outside 0..{L}")
        if p.donor.hidden.shape[1] != T:
            raise PatchOutOfBounds(f"donor length {p.donor.hidden.shape[1]} != sequence length {T}")
        if p.donor.hidden.shape[0] <= p.layer:
            raise PatchOutOfBounds(f"donor has no layer {p.layer}")
        if any(not 0 <= i < T for i in p.positions):
            raise PatchOutOfBounds("position out of range")
        if any(not 0 <= i < d for i in p.dims):
            raise PatchOutOfBounds("dimension out of range")


def forward_with_patch(model: RumourTransformer, te: TokenizedEvent, patches: Sequence[Patch]) -> np.ndarray:
    """Forward pass where each patch overwrites the layer output with donor values.

    Patches at the same layer are applied in list order, so later ones win on
    overlapping entries.
    """
    _check_patches(model, te, patches)
    ids, segs = _tensors(te, model.cfg)
    with torch.no_grad():
        logits, _, _ = model.run(model.embed(ids), model.masks(ids, segs), patches=patches)
    return _probs(logits)[0]


def run_from_layer(model: RumourTransformer, te: TokenizedEvent, states: torch.Tensor, layer: int) -> np.ndarray:
    """Probabilities for a batch of replacement states at ``layer``; states is (N, T, d)."""
    ids, segs = _tensors(te, model.cfg)
    masks = model.masks(ids, segs)
    with torch.no_grad():
        logits, _, _ = model.run(states, masks, start=layer)
    return _probs(logits)


def forward_batch(model: RumourTransformer, te: TokenizedEvent, token_ids: np.ndarray) -> np.ndarray:
    """Probabilities for (N, T) token-id variants that share ``te``'s layout."""
    _, segs = _tensors(te, model.cfg)
    ids = torch.as_tensor(np.asarray(token_ids), dtype=torch.long)
    with torch.no_grad():
        logits = model(ids, segs.expand(ids.shape[0], -1))
    return _probs(logits)


def embeddings(model: RumourTransformer, te: TokenizedEvent) -> torch.Tensor:
    ids, _ = _tensors(te, model.cfg)
    with torch.no_grad():
        return model.embed(ids)[0]


def logits_from_embeddings(
    model: RumourTransformer, te: TokenizedEvent, states: torch.Tensor, target: int
) -> tuple[np.ndarray, np.ndarray]:
    """Target logit and its gradient for each of N layer-0 states, shaped (N,) and (N, T, d)."""
    ids, segs = _tensors(te, model.cfg)
    masks = model.masks(ids, segs)
    states = states.detach().clone().requires_grad_(True)
    logits, _, _ = model.run(states, masks)
    out = logits[:, target]
    (grad,) = torch.autograd.grad(out.sum(), states)
    return out.detach().numpy(), grad.numpy()


def input_gradients(model: RumourTransformer, te: TokenizedEvent, target: int) -> np.ndarray:
    """d logit[target] / d layer-0 state, shaped (seq_len, d_model)."""
    if not 0 <= target < N_CLASSES:
        raise ValueError(f"class index {target} out of range")
    _, grad = logits_from_embeddings(model, te, embeddings(model, te)[None], target)
    return grad[0]


def argmax_label(probs: np.ndarray) -> Label:
    # np.argmax returns the first maximum, i.e. ties go to the lower class index
    return Label(int(np.argmax(probs)))


def predict(model: RumourTransformer, story: Story) -> tuple[Label, np.ndarray]:
    probs, _ = forward(model, tokenize(story, model.cfg))
    return argmax_label(probs), probs

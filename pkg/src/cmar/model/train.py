from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from ..data import Dataset
from ..evaluation import macro_f1
from .config import ModelConfig
from .network import RumourTransformer
from .tokens import MASK_ID, N_SPECIALS, PAD_ID, TokenizedEvent, tokenize

log = logging.getLogger(__name__)


class Divergence(RuntimeError):
    pass


@dataclass(frozen=True)
class OptConfig:
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 8
    weight_decay: float = 0.1
    word_dropout: float = 0.1
    clip_norm: float = 1.0  # 0 disables gradient clipping
    warmup: float = 0.1  # fraction of steps with linear warmup, then cosine decay; <0 keeps lr constant
    seed: int = 0


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float
    dev_f1: float


@dataclass
class TrainResult:
    model: RumourTransformer
    initial_dev_f1: float
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = 0  # 0 means the initialization was kept

    @property
    def best_dev_f1(self) -> float:
        if self.best_epoch == 0:
            return self.initial_dev_f1
        return self.log[self.best_epoch - 1].dev_f1


def collate(events: list[TokenizedEvent]) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(te) for te in events)
    ids = torch.full((len(events), T), PAD_ID, dtype=torch.long)
    segs = torch.full((len(events), T), -2, dtype=torch.long)
    for i, te in enumerate(events):
        ids[i, : len(te)] = torch.tensor(te.token_ids)
        segs[i, : len(te)] = torch.tensor(te.segments)
    return ids, segs


def predict_events(model: RumourTransformer, events: list[TokenizedEvent], batch_size: int = 64) -> list[int]:
    was_training = model.training
    model.eval()
    preds: list[int] = []
    with torch.no_grad():
        for i in range(0, len(events), batch_size):
            ids, segs = collate(events[i : i + batch_size])
            preds.extend(int(p) for p in torch.argmax(model(ids, segs), dim=-1))
    model.train(was_training)
    return preds


def _lr_lambda(warmup: float, total_steps: int):
    if warmup < 0:
        return lambda step: 1.0
    n_warm = max(1, int(warmup * total_steps))

    def factor(step: int) -> float:
        if step < n_warm:
            return (step + 1) / n_warm
        progress = (step - n_warm) / max(1, total_steps - n_warm)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return factor


def train(train_set: Dataset, dev_set: Dataset, cfg: ModelConfig, opt: OptConfig) -> TrainResult:
    """Adam on cross-entropy; keeps the parameters of the best dev macro-F1 epoch.

    Ties in dev F1 keep the earlier epoch. Everything is seeded, batches are
    processed sequentially, and arithmetic is float64, so reruns are bitwise
    identical.
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    model = RumourTransformer(cfg)
    train_events = [tokenize(s, cfg) for s in train_set]
    train_labels = torch.tensor([int(s.label) for s in train_set], dtype=torch.long)
    dev_events = [tokenize(s, cfg) for s in dev_set]
    dev_labels = [int(s.label) for s in dev_set]

    def dev_f1() -> float:
        if not dev_events:
            return float("nan")
        return macro_f1(predict_events(model, dev_events), dev_labels)

    result = TrainResult(model=model, initial_dev_f1=dev_f1())
    best_state = copy.deepcopy(model.state_dict())
    best_f1 = result.initial_dev_f1
    optimizer = torch.optim.AdamW(model.parameters(), lr=opt.lr, weight_decay=opt.weight_decay)
    steps_per_epoch = math.ceil(len(train_events) / opt.batch_size)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer, _lr_lambda(opt.warmup, steps_per_epoch * opt.epochs)
    )
    rng = np.random.default_rng(opt.seed)
    torch_gen = torch.Generator().manual_seed(opt.seed)

    for epoch in range(1, opt.epochs + 1):
        model.train()
        order = rng.permutation(len(train_events))
        total, count = 0.0, 0
        for start in range(0, len(order), opt.batch_size):
            idx = order[start : start + opt.batch_size]
            ids, segs = collate([train_events[i] for i in idx])
            if opt.word_dropout > 0:
                # hide random words behind [MASK], the token interventions use
                words = ids >= N_SPECIALS
                drop = torch.rand(ids.shape, generator=torch_gen, dtype=torch.float64) < opt.word_dropout
                ids = torch.where(words & drop, MASK_ID, ids)
            with torch.random.fork_rng(devices=[]):
                # dropout masks come from the trainer's own generator
                torch.manual_seed(int(torch.randint(2**62, (1,), generator=torch_gen)))
                loss = F.cross_entropy(model(ids, segs), train_labels[idx])
                if not math.isfinite(loss.item()):
                    raise Divergence(f"non-finite loss at epoch {epoch}")
                optimizer.zero_grad()
                loss.backward()
            if opt.clip_norm > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), opt.clip_norm)
            optimizer.step()
            scheduler.step()
            if not all(torch.isfinite(p).all() for p in model.parameters()):
                raise Divergence(f"non-finite parameters at epoch {epoch}")
            total += loss.item() * len(idx)
            count += len(idx)
        f1 = dev_f1()
        result.log.append(EpochLog(epoch, total / count, f1))
        log.info("epoch %d loss %.4f dev_f1 %.4f", epoch, total / count, f1)
        # with no dev set the last epoch wins
        if not dev_events or f1 > best_f1:
            best_f1 = f1
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    model.eval()
    return result

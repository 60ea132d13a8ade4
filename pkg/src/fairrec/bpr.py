"""Matrix-factorization base recommender trained with pairwise ranking.

The trained user/item embeddings are frozen and handed downstream; every later
stage scores candidates with the same inner product used here.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .data import InteractionDataset

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "base-1"


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""


class CheckpointError(RuntimeError):
    """Raised when a checkpoint cannot be read or belongs to another format."""


@dataclass
class EmbeddingSpace:
    """Frozen user/item embedding matrices from the base recommender."""

    user_embeddings: torch.Tensor  # (num_users, d)
    item_embeddings: torch.Tensor  # (num_items, d)

    @property
    def dim(self) -> int:
        return int(self.user_embeddings.shape[1])

    def validate(self) -> None:
        if self.user_embeddings.shape[1] != self.item_embeddings.shape[1]:
            raise ValueError("user/item embedding dimensions differ")
        if not torch.isfinite(self.user_embeddings).all() or not torch.isfinite(self.item_embeddings).all():
            raise ValueError("embeddings contain non-finite entries")

    def detach_frozen(self) -> "EmbeddingSpace":
        return EmbeddingSpace(
            self.user_embeddings.detach().clone().requires_grad_(False),
            self.item_embeddings.detach().clone().requires_grad_(False),
        )


def score(user_emb: torch.Tensor, item_emb: torch.Tensor) -> torch.Tensor:
    """Inner-product score; broadcasting over leading batch dimensions."""
    if user_emb.shape[-1] != item_emb.shape[-1]:
        raise ValueError(f"dimension mismatch: {user_emb.shape[-1]} vs {item_emb.shape[-1]}")
    return (user_emb * item_emb).sum(dim=-1)


def bpr_loss(pos_scores: torch.Tensor, neg_scores: torch.Tensor) -> torch.Tensor:
    """Mean pairwise ranking loss -ln sigma(y+ - y-); ln 2 at tied scores."""
    loss = -F.logsigmoid(pos_scores - neg_scores).mean()
    if not torch.isfinite(loss):
        raise TrainingDivergedError("pairwise ranking loss is non-finite")
    return loss


class NegativeSampler:
    """Uniform sampling over items a user has never rated (any label)."""

    def __init__(self, dataset: InteractionDataset):
        self.num_items = dataset.num_items
        self._rated = [set(r.tolist()) for r in dataset.rated]

    def sample(self, user: int, rng: np.random.Generator) -> int:
        rated = self._rated[user]
        if len(rated) >= self.num_items:
            raise ValueError(f"user {user} has rated every item; no negatives exist")
        while True:
            cand = int(rng.integers(self.num_items))
            if cand not in rated:
                return cand

    def sample_batch(self, users: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return np.asarray([self.sample(int(u), rng) for u in users], dtype=np.int64)


@dataclass
class BaseTrainConfig:
    dim: int = 64
    lr: float = 5e-5
    batch_size: int = 256
    max_epochs: int = 500
    early_stop_patience: int = 10
    seed: int = 0
    init_std: float = 0.1
    eval_negatives: int = 99
    eval_seed: int = 1234

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.dim < 1 or self.batch_size < 1:
            raise ValueError("dim and batch_size must be >= 1")


def _training_pairs(dataset: InteractionDataset) -> tuple[np.ndarray, np.ndarray]:
    users = np.concatenate(
        [np.full(len(items), u, dtype=np.int64) for u, items in enumerate(dataset.train_items)]
    )
    items = np.concatenate(dataset.train_items).astype(np.int64)
    return users, items


def train_base(
    dataset: InteractionDataset,
    config: BaseTrainConfig | None = None,
    progress_log: Path | None = None,
) -> EmbeddingSpace:
    """Train the base recommender to convergence under validation early stopping.

    Returns frozen embeddings; intermediate state never escapes. Aborts with
    :class:`TrainingDivergedError` if the loss goes non-finite.
    """
    from .evaluation import rank_metrics  # local import to avoid a cycle

    config = config or BaseTrainConfig()
    config.validate()
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)

    user_emb = torch.randn(dataset.num_users, config.dim) * config.init_std
    item_emb = torch.randn(dataset.num_items, config.dim) * config.init_std
    user_emb.requires_grad_(True)
    item_emb.requires_grad_(True)
    optimizer = torch.optim.Adam([user_emb, item_emb], lr=config.lr)

    pair_users, pair_items = _training_pairs(dataset)
    if len(pair_users) == 0:
        raise ValueError("dataset has no training positives")
    sampler = NegativeSampler(dataset)

    best_metric = -math.inf
    best_state: tuple[torch.Tensor, torch.Tensor] | None = None
    epochs_since_best = 0
    records = []

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(pair_users))
        epoch_loss = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            users = pair_users[batch]
            pos = pair_items[batch]
            neg = sampler.sample_batch(users, rng)
            u = user_emb[users]
            loss = bpr_loss(score(u, item_emb[pos]), score(u, item_emb[neg]))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss) * len(batch)
        epoch_loss /= len(order)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"epoch {epoch}: mean loss {epoch_loss}")

        with torch.no_grad():
            ndcg, hit = rank_metrics(
                user_emb.detach(),
                item_emb.detach(),
                dataset,
                seed=config.eval_seed,
                num_negatives=config.eval_negatives,
                split="valid",
            )
        records.append({"epoch": epoch, "loss": epoch_loss, "valid_ndcg10": ndcg, "valid_hit10": hit})
        log.info("base epoch %d: loss=%.5f valid N@10=%.4f H@10=%.4f", epoch, epoch_loss, ndcg, hit)
        if progress_log is not None:
            import json

            with open(progress_log, "a") as fh:
                fh.write(json.dumps(records[-1]) + "\n")

        if ndcg > best_metric:
            best_metric = ndcg
            best_state = (user_emb.detach().clone(), item_emb.detach().clone())
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.early_stop_patience:
                log.info("early stopping at epoch %d (best valid N@10=%.4f)", epoch, best_metric)
                break

    assert best_state is not None
    space = EmbeddingSpace(best_state[0], best_state[1])
    space.validate()
    return space


def save_embeddings(space: EmbeddingSpace, path: Path | str, config: BaseTrainConfig | None = None, upstream: dict | None = None) -> None:
    """Checkpoint both embedding matrices with a config echo."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "user_embeddings": space.user_embeddings,
        "item_embeddings": space.item_embeddings,
        "dim": space.dim,
        "config": asdict(config) if config else None,
        "upstream": upstream or {},
    }
    torch.save(payload, path)


def load_embeddings(path: Path | str) -> tuple[EmbeddingSpace, dict]:
    """Load a checkpoint written by :func:`save_embeddings`; returns (space, metadata)."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"cannot read embedding checkpoint {path}: {exc}") from exc
    version = payload.get("format_version") if isinstance(payload, dict) else None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: file has {version!r}, this build expects {CHECKPOINT_VERSION!r}"
        )
    space = EmbeddingSpace(payload["user_embeddings"], payload["item_embeddings"])
    space.validate()
    meta = {k: payload.get(k) for k in ("config", "upstream", "dim")}
    return space.detach_frozen(), meta

"""Round-synchronous FedAvg over prepared two-channel client data.

Every round the server broadcasts its weights, each client runs one local
epoch from those weights, and the server replaces its weights with the
uniform mean of the returned ones. The centralized baseline runs the same
loop on a single pooled client.
"""
from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from stfl.engine import OptimizerState, ParamVector, Tape, Tensor, backward, bce_with_logits_loss, optimizer_step
from stfl.errors import ConfigError, NumericFault, ProtocolError
from stfl.evaluation import evaluate_on_union, sample_scores
from stfl.models import UNetConfig, init_unet, make_two_channel, unet_forward
from stfl.phantom import ClientDataset, derive_seed
from stfl.style import StyleArtifacts

log = logging.getLogger(__name__)

_INIT = 101


@dataclass
class FederationConfig:
    n_clients: int
    rounds: int = 35
    local_epochs_per_round: int = 1
    scheme: str = "none"
    seed: int = 0
    learning_rate: float = 3e-3
    batch_size: int = 4
    optimizer: str = "adam"
    unet: UNetConfig = field(default_factory=UNetConfig)
    jobs: int = 1

    def __post_init__(self):
        if self.rounds < 0 or self.local_epochs_per_round < 1 or self.batch_size < 1:
            raise ConfigError("rounds must be >= 0, local_epochs_per_round and batch_size >= 1")
        if self.unet.in_channels != 2:
            raise ConfigError("the segmentation U-Net takes two input channels")

    def to_dict(self) -> dict:
        d = dict(vars(self))
        d["unet"] = vars(self.unet)
        return d


@dataclass
class PreparedClient:
    """Two-channel model inputs for one client, built once per scheme."""
    client_id: int
    noise_kind: str
    is_style_target: bool
    train_x: np.ndarray  # (n, 2, H, W)
    train_y: np.ndarray  # (n, 1, H, W)
    val_x: np.ndarray
    val_y: np.ndarray

    @property
    def all_x(self) -> np.ndarray:
        return np.concatenate([self.train_x, self.val_x])

    @property
    def all_y(self) -> np.ndarray:
        return np.concatenate([self.train_y, self.val_y])


def prepare_client(client: ClientDataset, artifacts: StyleArtifacts | None = None) -> PreparedClient:
    styler = artifacts.stylizer_for(client) if artifacts is not None else None
    stylized = styler.stylize_many(client.images) if styler is not None else [None] * len(client)
    x = np.concatenate([make_two_channel(img, s) for img, s in zip(client.images, stylized)])
    y = client.masks[:, None].astype(np.float32)
    tr, va = client.train_indices, client.val_indices
    return PreparedClient(client.client_id, client.noise.kind, client.is_style_target,
                          x[tr], y[tr], x[va], y[va])


def prepare_clients(clients: Sequence[ClientDataset], artifacts: StyleArtifacts | None = None) -> list[PreparedClient]:
    return [prepare_client(c, artifacts) for c in clients]


def pool_clients(clients: Sequence[PreparedClient]) -> PreparedClient:
    """Concatenate every client's data into one, for centralized training."""
    if not clients:
        raise ConfigError("nothing to pool")
    if len(clients) == 1:
        return clients[0]
    return PreparedClient(
        min(c.client_id for c in clients), "pooled", False,
        np.concatenate([c.train_x for c in clients]), np.concatenate([c.train_y for c in clients]),
        np.concatenate([c.val_x for c in clients]), np.concatenate([c.val_y for c in clients]))


@dataclass
class RoundRecord:
    round_index: int
    client_losses: dict  # client_id → mean training loss over the local epoch
    digest: str  # aggregated parameters
    chain: str  # sha256(previous chain ‖ digest)
    val_dice: float
    val_iou: float


def aggregate(updates: Sequence[ParamVector], weights: Sequence[float] | None = None) -> ParamVector:
    """Weighted elementwise mean with weights normalized to sum 1.

    Updates are summed in a canonical order (by value digest), so the result
    does not depend on the order in which clients report.
    """
    if not updates:
        raise ProtocolError("aggregate called with no updates")
    layout = updates[0].layout_hash
    for i, u in enumerate(updates):
        if u.layout_hash != layout:
            raise ProtocolError(f"update {i} has layout {u.layout_hash[:12]}, expected {layout[:12]}")
    w = np.ones(len(updates)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(updates),):
        raise ProtocolError(f"{len(w)} weights for {len(updates)} updates")
    if (w < 0).any() or not w.sum() > 0:
        raise ProtocolError("aggregation weights must be >= 0 with a positive sum")
    if len(updates) == 1:
        return updates[0]
    w = w / math.fsum(w)  # exact, so independent of report order
    order = sorted(range(len(updates)), key=lambda i: (updates[i].digest(), w[i]))
    out = []
    for name in updates[0]:
        acc = np.zeros(updates[0][name].shape, dtype=np.float64)
        for i in order:
            acc += w[i] * updates[i][name]
        out.append((name, acc.astype(updates[0][name].dtype)))
    return ParamVector(out)


def train_loss(cfg: FederationConfig, params: ParamVector, client: PreparedClient, batch: int = 8) -> float:
    """Mean BCE of ``params`` over the client's training split (no gradient)."""
    total = 0.0
    for s in range(0, len(client.train_x), batch):
        out = unet_forward(cfg.unet, params, client.train_x[s:s + batch])
        total += bce_with_logits_loss(out, client.train_y[s:s + batch]).item() * len(out.data)
    return total / len(client.train_x)


def local_train(client: PreparedClient, params: ParamVector, cfg: FederationConfig, seed: int) -> tuple[ParamVector, float]:
    """Local epochs from the broadcast weights; returns full updated weights and mean batch loss."""
    rng = np.random.default_rng(seed)
    opt = OptimizerState(cfg.optimizer, cfg.learning_rate)
    n = len(client.train_x)
    losses = []
    for _ in range(cfg.local_epochs_per_round):
        order = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = np.sort(order[s:s + cfg.batch_size])
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
            with Tape() as tape:
                out = unet_forward(cfg.unet, leaves, client.train_x[idx])
                loss = bce_with_logits_loss(out, client.train_y[idx])
            grads = backward(tape, loss, list(leaves.values()))
            params = optimizer_step(opt, params, dict(zip(leaves, grads)))
            losses.append(loss.item())
    return params, float(np.mean(losses)) if losses else 0.0


class ClientFailure(NumericFault):
    """A client's local training failed; ``records`` holds the rounds completed so far."""

    def __init__(self, client_id: int, round_index: int, records: list, cause: Exception):
        super().__init__(f"client {client_id} failed in round {round_index}: {cause}")
        self.client_id = client_id
        self.round_index = round_index
        self.records = records


def _chain(prev: str, digest: str) -> str:
    return hashlib.sha256((prev + digest).encode()).hexdigest()


def run_federated(cfg: FederationConfig, clients: Sequence[PreparedClient], init_params: ParamVector | None = None,
                  on_round: Callable[[RoundRecord], None] | None = None,
                  trainer: Callable = local_train) -> tuple[ParamVector, list[RoundRecord]]:
    """FedAvg for ``cfg.rounds`` rounds; returns the best-validation-Dice parameters and all records."""
    if len(clients) != cfg.n_clients:
        raise ConfigError(f"config expects {cfg.n_clients} clients, got {len(clients)}")
    params = init_params if init_params is not None else init_unet(cfg.unet, derive_seed(cfg.seed, _INIT))
    layout = params.layout_hash
    best, best_dice = params, -1.0
    records: list[RoundRecord] = []
    chain = params.digest()
    pool = ThreadPoolExecutor(max_workers=cfg.jobs) if cfg.jobs > 1 else None
    try:
        for r in range(cfg.rounds):
            broadcast = params

            def work(c, r=r, broadcast=broadcast):
                try:
                    return trainer(c, broadcast, cfg, derive_seed(cfg.seed, r, c.client_id))
                except Exception as exc:  # noqa: BLE001 - rewrapped with client context
                    raise ClientFailure(c.client_id, r, records, exc) from exc

            results = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            params = aggregate([p for p, _ in results])
            if params.layout_hash != layout:
                raise ProtocolError("parameter layout changed during federation")
            dice_v, iou_v = evaluate_on_union(cfg.unet, params, clients)
            digest = params.digest()
            chain = _chain(chain, digest)
            rec = RoundRecord(r, {c.client_id: loss for c, (_, loss) in zip(clients, results)},
                              digest, chain, dice_v, iou_v)
            records.append(rec)
            if on_round is not None:
                on_round(rec)
            log.info("round %d dice=%.4f iou=%.4f", r, dice_v, iou_v)
            if dice_v > best_dice:
                best, best_dice = params, dice_v
    finally:
        if pool:
            pool.shutdown()
    return best, records


def run_centralized(cfg: FederationConfig, clients: Sequence[PreparedClient], epochs: int | None = None,
                    init_params: ParamVector | None = None,
                    on_round: Callable[[RoundRecord], None] | None = None) -> tuple[ParamVector, list[RoundRecord]]:
    """Same training loop on the pooled data of all clients, without aggregation."""
    pooled = pool_clients(clients)
    c = FederationConfig(**{**vars(cfg), "n_clients": 1, "rounds": cfg.rounds if epochs is None else epochs,
                            "jobs": 1})
    return run_federated(c, [pooled], init_params, on_round)


def per_client_scores(cfg: FederationConfig, params: ParamVector, clients: Sequence[PreparedClient]) -> list[dict]:
    """Dice/IOU of ``params`` on each client's own train ∪ validation data."""
    out = []
    for c in clients:
        d, i = sample_scores(cfg.unet, params, c.all_x, c.all_y)
        out.append({"client_id": c.client_id, "noise": c.noise_kind, "is_style_target": c.is_style_target,
                    "dice": float(np.mean(d)), "iou": float(np.mean(i))})
    return out

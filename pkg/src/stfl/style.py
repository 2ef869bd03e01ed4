"""CycleGAN style normalization toward the shared target style.

Generators are 1-channel U-Nets with a sigmoid head, discriminators are
PatchGANs scored with a least-squares adversarial loss. Training alternates a
joint generator update with a joint discriminator update, batch size 1.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from stfl.engine import (OptimizerState, ParamVector, Tape, Tensor, backward, checkpoint, l1_loss,
                         mse_loss, optimizer_step)
from stfl.errors import ConfigError, NumericFault, ShapeError
from stfl.models import PatchGANConfig, UNetConfig, init_patchgan, init_unet, patchgan_forward, unet_forward
from stfl.phantom import ClientDataset, StyleSet, derive_seed

log = logging.getLogger(__name__)

SCHEMES = ("none", "universal", "client_specific")
BLOCKS = ("G", "F", "D_t", "D_s")


def generator_config(base_channels: int = 8, depth: int = 3, norm: str = "instance") -> UNetConfig:
    # The outermost convs stay unnormalized, as in the usual U-Net generator.
    # With them normalized the output intensity is pinned per image and G is
    # slow to learn even the identity.
    return UNetConfig(in_channels=1, base_channels=base_channels, depth=depth, out_channels=1,
                      norm=norm, head="sigmoid", outer_norm=False)


@dataclass
class CycleGANState:
    G: ParamVector  # source → target
    F: ParamVector  # target → source
    D_t: ParamVector
    D_s: ParamVector
    gen_cfg: UNetConfig = field(default_factory=generator_config)
    disc_cfg: PatchGANConfig = field(default_factory=PatchGANConfig)
    lambda_cycle: float = 10.0
    lambda_identity: float = 1.0
    epoch: int = 0
    resolution: int = 64
    history: list = field(default_factory=list)

    def stylize(self, img: np.ndarray) -> np.ndarray:
        return stylize(self, img)

    def stylize_many(self, images: np.ndarray, batch: int = 8) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 3 or images.shape[1:] != (self.resolution, self.resolution):
            raise ShapeError(f"stylize: expected (n, {self.resolution}, {self.resolution}) images, got {images.shape}")
        out = [unet_forward(self.gen_cfg, self.G, images[i:i + batch, None]).data[:, 0]
               for i in range(0, len(images), batch)]
        res = np.concatenate(out).astype(np.float32)
        if res.min() < 0 or res.max() > 1:
            raise NumericFault("generator output left [0, 1]")
        return res

    def params(self) -> ParamVector:
        """All four networks as one vector with G/, F/, D_t/, D_s/ prefixes."""
        items = []
        for b in BLOCKS:
            items += list(getattr(self, b).prefixed(f"{b}/").items())
        return ParamVector(items)

    def meta(self) -> dict:
        return {"kind": "cyclegan", "lambda_cycle": self.lambda_cycle, "lambda_identity": self.lambda_identity,
                "epoch": self.epoch, "resolution": self.resolution,
                "gen_cfg": vars(self.gen_cfg), "disc_cfg": vars(self.disc_cfg)}


def stylize(state, img: np.ndarray) -> np.ndarray:
    """Apply the source→target generator (inference only) to one image."""
    img = np.asarray(img, dtype=np.float32)
    if img.shape != (state.resolution, state.resolution):
        raise ShapeError(f"stylize: image {img.shape} does not match training resolution {state.resolution}")
    return state.stylize_many(img[None])[0]


def init_cyclegan(seed: int, resolution: int = 64, gen_cfg: UNetConfig | None = None,
                  disc_cfg: PatchGANConfig | None = None, lambda_cycle: float = 10.0,
                  lambda_identity: float | None = None) -> CycleGANState:
    gen_cfg = gen_cfg or generator_config()
    disc_cfg = disc_cfg or PatchGANConfig()
    if lambda_identity is None:
        # a strong identity term fights mappings that must move every pixel (inversion)
        lambda_identity = 0.1 * lambda_cycle
    if lambda_cycle < 0 or lambda_identity < 0:
        raise ConfigError("CycleGAN loss weights must be >= 0")
    return CycleGANState(
        G=init_unet(gen_cfg, derive_seed(seed, 1)), F=init_unet(gen_cfg, derive_seed(seed, 2)),
        D_t=init_patchgan(disc_cfg, derive_seed(seed, 3)), D_s=init_patchgan(disc_cfg, derive_seed(seed, 4)),
        gen_cfg=gen_cfg, disc_cfg=disc_cfg, lambda_cycle=lambda_cycle, lambda_identity=lambda_identity,
        resolution=resolution)


def _leaves(p: ParamVector) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def _train_step(st: CycleGANState, opt: dict, x: np.ndarray, y: np.ndarray) -> dict:
    gc, dc = st.gen_cfg, st.disc_cfg
    G, F = _leaves(st.G), _leaves(st.F)
    with Tape() as tape:
        fake_y = unet_forward(gc, G, x)
        fake_x = unet_forward(gc, F, y)
        rec_x = unet_forward(gc, F, fake_y)
        rec_y = unet_forward(gc, G, fake_x)
        adv = mse_loss(patchgan_forward(dc, st.D_t, fake_y), 1.0) + mse_loss(patchgan_forward(dc, st.D_s, fake_x), 1.0)
        cyc = l1_loss(rec_x, x) + l1_loss(rec_y, y)
        total = adv + st.lambda_cycle * cyc
        idt_val = 0.0
        if st.lambda_identity > 0:
            idt = l1_loss(unet_forward(gc, G, y), y) + l1_loss(unet_forward(gc, F, x), x)
            total = total + st.lambda_identity * idt
            idt_val = idt.item()
    # one backward pass serves both generators
    grads = backward(tape, total, list(G.values()) + list(F.values()))
    gG = dict(zip(G, grads[:len(G)]))
    gF = dict(zip(F, grads[len(G):]))
    st.G = optimizer_step(opt["G"], st.G, gG)
    st.F = optimizer_step(opt["F"], st.F, gF)

    Dt, Ds = _leaves(st.D_t), _leaves(st.D_s)
    fy, fx = fake_y.detach(), fake_x.detach()
    with Tape() as tape:
        lt = 0.5 * (mse_loss(patchgan_forward(dc, Dt, y), 1.0) + mse_loss(patchgan_forward(dc, Dt, fy), 0.0))
        ls = 0.5 * (mse_loss(patchgan_forward(dc, Ds, x), 1.0) + mse_loss(patchgan_forward(dc, Ds, fx), 0.0))
        dloss = lt + ls
    grads = backward(tape, dloss, list(Dt.values()) + list(Ds.values()))
    st.D_t = optimizer_step(opt["D_t"], st.D_t, dict(zip(Dt, grads[:len(Dt)])))
    st.D_s = optimizer_step(opt["D_s"], st.D_s, dict(zip(Ds, grads[len(Dt):])))
    return {"adv": adv.item(), "cycle": cyc.item(), "identity": idt_val, "disc": dloss.item()}


def train_cyclegan(source: Sequence[np.ndarray] | np.ndarray, target: StyleSet | np.ndarray, epochs: int = 30,
                   seed: int = 0, *, lambda_cycle: float = 10.0, lambda_identity: float | None = None,
                   learning_rate: float = 1e-3, beta1: float = 0.5,
                   gen_cfg: UNetConfig | None = None, disc_cfg: PatchGANConfig | None = None,
                   on_epoch: Callable[[int, dict], None] | None = None) -> CycleGANState:
    """Unpaired source→target CycleGAN; one shuffled pass over ``source`` per epoch."""
    src = np.asarray(source, dtype=np.float32)
    tgt = np.asarray(target.images if isinstance(target, StyleSet) else target, dtype=np.float32)
    if src.ndim != 3 or len(src) == 0 or tgt.ndim != 3 or len(tgt) == 0:
        raise ConfigError("train_cyclegan needs non-empty source and target image stacks")
    if len(src) < 10 or len(tgt) < 10:
        raise ConfigError(f"train_cyclegan needs >= 10 source and target images, got {len(src)} and {len(tgt)}")
    if src.shape[1:] != tgt.shape[1:] or src.shape[1] != src.shape[2]:
        raise ShapeError(f"source {src.shape[1:]} and target {tgt.shape[1:]} must be equal square grids")
    if epochs < 0:
        raise ConfigError("epochs must be >= 0")
    st = init_cyclegan(seed, src.shape[1], gen_cfg, disc_cfg, lambda_cycle, lambda_identity)
    opt = {b: OptimizerState("adam", learning_rate, beta1=beta1) for b in BLOCKS}
    rng = np.random.default_rng(derive_seed(seed, 5))
    for epoch in range(epochs):
        order = rng.permutation(len(src))
        partners = rng.integers(0, len(tgt), size=len(src))
        sums = {"adv": 0.0, "cycle": 0.0, "identity": 0.0, "disc": 0.0}
        for i, j in zip(order, partners):
            try:
                losses = _train_step(st, opt, src[i][None, None], tgt[j][None, None])
            except NumericFault as exc:
                raise NumericFault(f"CycleGAN training hit a numeric fault at epoch {epoch}: {exc}") from exc
            for k, v in losses.items():
                sums[k] += v
        rec = {"epoch": epoch, **{k: v / len(src) for k, v in sums.items()}}
        st.history.append(rec)
        st.epoch = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, rec)
        log.debug("cyclegan epoch %d %s", epoch, rec)
    return st


def universal_source(clients: Sequence[ClientDataset], shared_fraction: float, seed: int) -> np.ndarray:
    """Deterministic subsample of every non-style-target client's training images, pooled."""
    if not 0 < shared_fraction <= 1:
        raise ConfigError(f"shared_fraction must be in (0, 1], got {shared_fraction}")
    pooled = []
    for c in clients:
        if c.is_style_target:
            continue
        n = int(round(shared_fraction * len(c.train_indices)))
        pick = np.random.default_rng(derive_seed(seed, c.client_id, 11)).permutation(len(c.train_indices))[:n]
        idx = [c.train_indices[i] for i in sorted(pick)]
        pooled.extend(c.images[idx])
    if not pooled:
        raise ConfigError("universal CycleGAN source pool is empty")
    return np.stack(pooled)


def train_universal(clients: Sequence[ClientDataset], shared_fraction: float, target: StyleSet,
                    epochs: int = 30, seed: int = 0, **kw) -> CycleGANState:
    return train_cyclegan(universal_source(clients, shared_fraction, seed), target, epochs, seed, **kw)


def train_client_specific(clients: Sequence[ClientDataset], target: StyleSet, epochs: int = 30,
                          seed: int = 0, cache: dict | None = None, **kw) -> dict[int, CycleGANState]:
    """One CycleGAN per non-target client.

    ``cache`` memoizes trainings by (source, target, seed, settings) so a client
    whose data recurs across experiment configurations is trained once.
    """
    out = {}
    for c in clients:
        if c.is_style_target:
            continue
        src = c.images[c.train_indices]
        cseed = derive_seed(seed, c.client_id)
        key = _training_key(src, target, epochs, cseed, kw) if cache is not None else None
        if key is not None and key in cache:
            out[c.client_id] = cache[key]
            continue
        out[c.client_id] = train_cyclegan(src, target, epochs, cseed, **kw)
        if key is not None:
            cache[key] = out[c.client_id]
    return out


def _training_key(src: np.ndarray, target, epochs: int, seed: int, kw: dict) -> str:
    tgt = target.images if isinstance(target, StyleSet) else np.asarray(target)
    h = hashlib.sha256(np.ascontiguousarray(src, dtype=np.float32).tobytes())
    h.update(np.ascontiguousarray(tgt, dtype=np.float32).tobytes())
    h.update(repr((epochs, seed, sorted((k, repr(v)) for k, v in kw.items()))).encode())
    return h.hexdigest()


class IdentityStyle:
    """Stylizer that returns its input; used to check protocol neutrality."""

    resolution = None

    def stylize_many(self, images: np.ndarray) -> np.ndarray:
        return np.asarray(images, dtype=np.float32).copy()

    def stylize(self, img: np.ndarray) -> np.ndarray:
        return np.asarray(img, dtype=np.float32).copy()


@dataclass
class StyleArtifacts:
    """The per-scheme set of stylizers, keyed by client id."""
    kind: str = "none"
    stylizers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ConfigError(f"style scheme must be one of {SCHEMES}, got {self.kind!r}")

    def stylizer_for(self, client: ClientDataset):
        if self.kind == "none" or client.is_style_target:
            return None
        if self.kind == "universal":
            return self.stylizers["universal"]
        try:
            return self.stylizers[client.client_id]
        except KeyError:
            raise ConfigError(f"no client-specific stylizer for client {client.client_id}") from None

    @classmethod
    def universal(cls, state) -> "StyleArtifacts":
        return cls("universal", {"universal": state})

    @classmethod
    def client_specific(cls, states: Mapping[int, object]) -> "StyleArtifacts":
        return cls("client_specific", dict(states))

    @classmethod
    def identity(cls, kind: str, clients: Sequence[ClientDataset]) -> "StyleArtifacts":
        stub = IdentityStyle()
        if kind == "universal":
            return cls.universal(stub)
        if kind == "client_specific":
            return cls.client_specific({c.client_id: stub for c in clients if not c.is_style_target})
        return cls("none")


def save_cyclegan(state: CycleGANState, path) -> None:
    path = Path(path)
    checkpoint.save(path, state.params(), state.meta())
    path.with_suffix(".history.json").write_text(json.dumps(state.history, indent=1), encoding="utf-8")


def load_cyclegan(path) -> CycleGANState:
    path = Path(path)
    params, meta = checkpoint.load(path)
    if meta.get("kind") != "cyclegan":
        raise ConfigError(f"{path} is not a CycleGAN checkpoint")
    hist_path = path.with_suffix(".history.json")
    history = json.loads(hist_path.read_text(encoding="utf-8")) if hist_path.exists() else []
    return CycleGANState(
        G=params.select("G/"), F=params.select("F/"), D_t=params.select("D_t/"), D_s=params.select("D_s/"),
        gen_cfg=UNetConfig(**meta["gen_cfg"]), disc_cfg=PatchGANConfig(**meta["disc_cfg"]),
        lambda_cycle=meta["lambda_cycle"], lambda_identity=meta["lambda_identity"], epoch=meta["epoch"],
        resolution=meta["resolution"], history=history)

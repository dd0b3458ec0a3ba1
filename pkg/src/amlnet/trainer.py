"""Optimization loop, checkpoints and the k-fold protocol."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn as nn

from .core import AmlConfig, build_models, discriminator_step, generator_step
from .data import SegDataset
from .discriminator import DiscConfig, PatchDiscriminator
from .generator import GeneratorConfig, UNetGenerator
from .metrics import ConfusionMatrix

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.9
    eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 2
    folds: int = 5
    repeats: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        for name in ("lr", "eps", "epochs", "batch_size", "repeats"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")


class Adam:
    """Adam with bias correction over an explicit parameter list.

    ``step`` takes the gradients as a list aligned with ``params`` so callers
    decide exactly which parameters a loss is allowed to move.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.9, eps=1e-8, names=None):
        self.params = list(params)
        self.names = list(names) if names is not None else [str(i) for i in range(len(self.params))]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @classmethod
    def for_module(cls, module: nn.Module, cfg: TrainConfig) -> "Adam":
        named = [(n, p) for n, p in module.named_parameters()]
        return cls([p for _, p in named], cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                   names=[n for n, _ in named])

    @torch.no_grad()
    def step(self, grads) -> None:
        grads = list(grads)
        for name, g in zip(self.names, grads):
            if not torch.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m.mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
            v.mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
            p.sub_(self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps))

    def state(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst.copy_(src)
        for dst, src in zip(self.v, state["v"]):
            dst.copy_(src)


def config_digest(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"AMLCKPT\0"
CKPT_VERSION = 1


def save_checkpoint(path, tensors: dict, meta: dict) -> None:
    """Versioned container: magic, version, manifest length, JSON manifest, raw payloads.

    Payloads are little-endian, C-contiguous, concatenated in manifest order.
    """
    entries, payloads, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(manifest)))
        fh.write(manifest)
        for raw in payloads:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        version, mlen = struct.unpack("<IQ", fh.read(12))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        manifest = json.loads(fh.read(mlen))
        body = fh.read()
    tensors = {}
    for e in manifest["tensors"]:
        raw = body[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return tensors, manifest["meta"]


@dataclass
class Model:
    """Generator, discriminator and their optimizers, built from one config."""
    G: UNetGenerator
    D: PatchDiscriminator
    aml: AmlConfig
    opt_g: Adam
    opt_d: Adam

    @classmethod
    def build(cls, gen_cfg, disc_cfg, aml_cfg, train_cfg, seed: int) -> "Model":
        torch.manual_seed(seed)
        G, D = build_models(gen_cfg, disc_cfg, aml_cfg)
        return cls(G, D, aml_cfg, Adam.for_module(G, train_cfg), Adam.for_module(D, train_cfg))

    def tensors(self) -> dict:
        out = {}
        for prefix, mod in (("G", self.G), ("D", self.D)):
            for k, v in mod.state_dict().items():
                out[f"{prefix}.{k}"] = v
        for prefix, opt in (("opt_g", self.opt_g), ("opt_d", self.opt_d)):
            for name, m, v in zip(opt.names, opt.m, opt.v):
                out[f"{prefix}.m.{name}"] = m
                out[f"{prefix}.v.{name}"] = v
        return out

    def load_tensors(self, tensors: dict, opt_steps: tuple[int, int] = (0, 0)) -> None:
        for prefix, mod in (("G", self.G), ("D", self.D)):
            sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
            mod.load_state_dict(sd)
        for prefix, opt, t in (("opt_g", self.opt_g, opt_steps[0]), ("opt_d", self.opt_d, opt_steps[1])):
            opt.load_state({
                "t": t,
                "m": [tensors[f"{prefix}.m.{n}"] for n in opt.names],
                "v": [tensors[f"{prefix}.v.{n}"] for n in opt.names],
            })


def save_model(path, model: Model, meta: dict) -> None:
    meta = {**meta, "opt_steps": [model.opt_g.t, model.opt_d.t]}
    save_checkpoint(path, model.tensors(), meta)


# ------------------------------------------------------------------ training

@torch.no_grad()
def predict(G: UNetGenerator, imgs: torch.Tensor, batch_size: int = 8) -> np.ndarray:
    was = G.training
    G.eval()
    try:
        preds = [G(imgs[s:s + batch_size], "inference").logits.argmax(1)
                 for s in range(0, len(imgs), batch_size)]
    finally:
        G.train(was)
    return torch.cat(preds).numpy()


def evaluate(G: UNetGenerator, ds: SegDataset, batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix(ds.num_classes)
    if len(ds) == 0:
        return cm
    imgs, masks = ds.tensors()
    cm.accumulate(predict(G, imgs, batch_size), masks.numpy())
    return cm


@dataclass
class TrainResult:
    model: Model
    best_epoch: int
    best_val_miou: float
    history: list = field(default_factory=list)   # per-epoch dicts
    best_state: Optional[dict] = None


def train_step(model: Model, img, mask) -> dict:
    """One discriminator update followed by one generator update."""
    model.G.train()
    model.D.train()
    l_disc = discriminator_step(img, mask, model.G, model.D, model.aml, model.opt_d)
    bundle, _ = generator_step(img, mask, model.G, model.D, model.aml, model.opt_g)
    bundle.l_disc = l_disc.detach()
    return bundle.as_dict()


def train_model(train_ds: SegDataset, val_ds: SegDataset, gen_cfg: GeneratorConfig,
                disc_cfg: DiscConfig, aml_cfg: AmlConfig, cfg: TrainConfig,
                seed: Optional[int] = None,
                on_step: Optional[Callable[[dict], None]] = None,
                on_epoch: Optional[Callable[[int, Model], None]] = None) -> TrainResult:
    """Train for ``cfg.epochs`` and keep the epoch with the highest validation mIoU.

    Ties go to the earliest epoch. The returned model holds the selected weights.
    """
    seed = cfg.seed if seed is None else seed
    model = Model.build(gen_cfg, disc_cfg, aml_cfg, cfg, seed)
    rng = np.random.default_rng(seed)
    best, best_epoch, best_state = -1.0, -1, None
    history, step = [], 0
    for epoch in range(cfg.epochs):
        for img, mask in train_ds.batches(cfg.batch_size, rng):
            losses = train_step(model, img, mask)
            step += 1
            if on_step is not None:
                on_step({"step": step, "epoch": epoch, **losses})
        miou = evaluate(model.G, val_ds).mean_iou() if len(val_ds) else float("nan")
        history.append({"epoch": epoch, "miou": miou})
        log.info("epoch %d val mIoU %.4f", epoch, miou)
        if on_epoch is not None:
            on_epoch(epoch, model)
        if miou > best:
            best, best_epoch = miou, epoch
            best_state = {k: v.clone() for k, v in model.tensors().items()}
            best_steps = (model.opt_g.t, model.opt_d.t)
    if best_state is not None:
        model.load_tensors(best_state, best_steps)
    return TrainResult(model, best_epoch, best, history, best_state)


# ---------------------------------------------------------- cross-validation

def fold_indices(n: int, folds: int, seed: int) -> list:
    """Seeded permutation split into ``folds`` near-equal disjoint parts."""
    if n < folds:
        raise ValueError(f"{n} items cannot fill {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    parts = [sorted(int(i) for i in p) for p in np.array_split(perm, folds)]
    for i, p in enumerate(parts):
        if not p:
            raise ValueError(f"fold {i} is empty")
    return parts


@dataclass
class CVRow:
    repeat: int
    fold: int
    best_epoch: int
    val_miou: float
    cm: ConfusionMatrix

    @property
    def miou(self) -> float:
        return self.cm.mean_iou()


@dataclass
class CVResult:
    rows: list
    class_names: tuple

    def table(self) -> list:
        """One dict per (repeat, fold) with per-class IoU and mean IoU."""
        out = []
        for r in self.rows:
            d = {"repeat": r.repeat, "fold": r.fold, "best_epoch": r.best_epoch,
                 "val_miou": r.val_miou}
            for c, name in enumerate(self.class_names):
                d[name] = r.cm.iou(c)
            d["miou"] = r.miou
            out.append(d)
        return out

    def summary(self) -> dict:
        """Mean and population std over all folds x repeats."""
        tab = self.table()
        keys = list(self.class_names) + ["miou", "val_miou"]
        return {k: (float(np.mean([t[k] for t in tab])), float(np.std([t[k] for t in tab])))
                for k in keys}


def run_cross_validation(dataset: SegDataset, gen_cfg: GeneratorConfig, disc_cfg: DiscConfig,
                         aml_cfg: AmlConfig, cfg: TrainConfig,
                         test_ds: Optional[SegDataset] = None,
                         train_fn: Callable = train_model) -> CVResult:
    """k-fold protocol repeated with re-seeded initialization.

    Folds are drawn once from ``cfg.seed``; each repeat only changes the
    initialization seed. Each row is scored on ``test_ds`` when given,
    otherwise on its own validation fold.
    """
    parts = fold_indices(len(dataset), cfg.folds, cfg.seed)
    rows = []
    for r in range(cfg.repeats):
        for f, val_idx in enumerate(parts):
            train_idx = [i for j, p in enumerate(parts) if j != f for i in p]
            train, val = dataset.subset(train_idx), dataset.subset(val_idx)
            res = train_fn(train, val, copy.deepcopy(gen_cfg), disc_cfg, aml_cfg, cfg,
                           seed=cfg.seed + 1000 * (r + 1))
            scored = test_ds if test_ds is not None else val
            rows.append(CVRow(r, f, res.best_epoch, res.best_val_miou, evaluate(res.model.G, scored)))
    return CVResult(rows, dataset.class_names)


def run_meta(gen_cfg, disc_cfg, aml_cfg, train_cfg) -> dict:
    return {"generator": asdict(gen_cfg), "discriminator": asdict(disc_cfg),
            "aml": asdict(aml_cfg), "train": asdict(train_cfg)}

"""Small 3D encoder-decoder segmentation network.

The net is a U-Net with one conv block per encoder level (two at the
deepest level) and one per decoder level. A block is
conv -> instance norm -> ReLU -> channel (3D) dropout. Decoder levels use
trilinear upsampling followed by concatenation with the encoder skip.

Gradients come from torch autograd; the numpy-facing helpers in this module
take and return ``(H, W, D)`` arrays.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import FingerprintMismatchError, FormatError
from .metrics import dice_score
from .numerics import derive_seed, make_rng
from .volumes import Sample, read_vtf, write_vtf

log = logging.getLogger(__name__)

VARIANTS = ("plain", "noskip", "wide")
DICE_EPS = 1e-5
CHECKPOINT_VERSION = 1


@dataclass
class NetConfig:
    channels: tuple[int, ...] = (8, 16, 32)
    levels: int = 3
    kernel: int = 3
    dropout_rate: float = 0.2
    norm_eps: float = 1e-5
    classes: int = 2
    variant: str = "plain"

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != self.levels or self.levels < 2:
            raise ValueError(f"need levels >= 2 and one channel count per level, "
                             f"got levels={self.levels}, channels={self.channels}")
        if any(c < 1 for c in self.channels) or self.classes < 2:
            raise ValueError("channel counts must be positive and classes >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(2 * c for c in self.channels) if self.variant == "wide" else self.channels

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 1
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")


@dataclass(frozen=True)
class LayerInfo:
    layer_id: str
    kind: str  # conv, norm, act, dropout, down, up, concat, head
    channels: int


class SegNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        k = cfg.kernel
        self.convs = nn.ModuleDict()
        self.norms = nn.ModuleDict()
        self.registry: list[LayerInfo] = []
        self._plan: list[tuple] = []

        def block(name, cin, cout):
            self.convs[name] = nn.Conv3d(cin, cout, k, padding=k // 2)
            self.norms[name] = nn.InstanceNorm3d(cout, eps=cfg.norm_eps, affine=True)
            self.registry += [LayerInfo(name, "conv", cout), LayerInfo(f"{name}.norm", "norm", cout),
                              LayerInfo(f"{name}.act", "act", cout),
                              LayerInfo(f"{name}.dropout", "dropout", cout)]
            self._plan.append(("block", name))

        cin = 1
        for lvl in range(1, cfg.levels + 1):
            if lvl > 1:
                self.registry.append(LayerInfo(f"down{lvl}", "down", cin))
                self._plan.append(("down", lvl))
            if lvl < cfg.levels:
                block(f"enc{lvl}", cin, w[lvl - 1])
                self._plan.append(("save", lvl))
            else:
                block(f"enc{lvl}a", cin, w[lvl - 1])
                block(f"enc{lvl}b", w[lvl - 1], w[lvl - 1])
            cin = w[lvl - 1]
        for lvl in range(cfg.levels - 1, 0, -1):
            self.registry.append(LayerInfo(f"up{lvl}", "up", cin))
            self._plan.append(("up", lvl))
            if cfg.variant != "noskip":
                cin += w[lvl - 1]
                self.registry.append(LayerInfo(f"cat{lvl}", "concat", cin))
                self._plan.append(("cat", lvl))
            block(f"dec{lvl}", cin, w[lvl - 1])
            cin = w[lvl - 1]
        self.head = nn.Conv3d(cin, cfg.classes, 1)
        self.registry.append(LayerInfo("head", "head", cfg.classes))

    # -- registry views -------------------------------------------------------
    @property
    def conv_layer_ids(self) -> list[str]:
        return [l.layer_id for l in self.registry if l.kind == "conv"]

    @property
    def encoder_end_id(self) -> str:
        return f"enc{self.cfg.levels}b"

    @property
    def penultimate_id(self) -> str:
        return self.conv_layer_ids[-1]

    def channels_of(self, layer_id: str) -> int:
        return next(l.channels for l in self.registry if l.layer_id == layer_id and l.kind == "conv")

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    # -- forward ----------------------------------------------------------------
    def forward(self, x: torch.Tensor, capture: bool = False, dropout_active: bool = False,
                generator: torch.Generator | None = None):
        """``x`` is (B, 1, H, W, D). Returns ``(logits, features)`` where
        features maps conv layer ids to post-activation maps (empty unless
        ``capture``)."""
        div = 2 ** (self.cfg.levels - 1)
        if x.ndim != 5 or x.shape[1] != 1 or any(s % div for s in x.shape[2:]):
            raise ValueError(f"input must be (B, 1, H, W, D) with extents divisible by {div}, "
                             f"got {tuple(x.shape)}")
        feats: dict[str, torch.Tensor] = {}
        skips: dict[int, torch.Tensor] = {}
        keep = 1.0 - self.cfg.dropout_rate
        for step in self._plan:
            op = step[0]
            if op == "block":
                name = step[1]
                x = F.relu(self.norms[name](self.convs[name](x)))
                if capture:
                    feats[name] = x
                if dropout_active and self.cfg.dropout_rate > 0:
                    drop = torch.bernoulli(
                        torch.full((x.shape[0], x.shape[1], 1, 1, 1), keep, dtype=x.dtype),
                        generator=generator)
                    x = x * drop / keep
            elif op == "save":
                skips[step[1]] = x
            elif op == "down":
                x = F.max_pool3d(x, 2)
            elif op == "up":
                x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            elif op == "cat":
                x = torch.cat([x, skips[step[1]]], dim=1)
        return self.head(x), feats


# --------------------------------------------------------------------------
# construction and numpy-facing helpers


def build_net(cfg: NetConfig, seed: int = 0) -> SegNet:
    """He-initialised network (kernels ~ N(0, 2/fan_in), zero biases)."""
    net = SegNet(cfg)
    gen = torch.Generator().manual_seed(derive_seed(seed, "init"))
    with torch.no_grad():
        for conv in list(net.convs.values()) + [net.head]:
            fan_in = conv.weight[0].numel()
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in))
            conv.bias.zero_()
    net.eval()
    return net


def _dtype(net: SegNet) -> torch.dtype:
    return next(net.parameters()).dtype


def _to_input(net: SegNet, image: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(image), dtype=_dtype(net))[None, None]


def _generator(seed: int | None) -> torch.Generator | None:
    return None if seed is None else torch.Generator().manual_seed(int(seed))


def forward(net: SegNet, image: np.ndarray, capture: bool = False, dropout_active: bool = False,
            seed: int | None = None) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Logits (C, H, W, D) and, with ``capture``, per-layer features (N, h, w, d)."""
    with torch.no_grad():
        logits, feats = net(_to_input(net, image), capture, dropout_active, _generator(seed))
    return logits[0].numpy(), {k: v[0].numpy() for k, v in feats.items()}


def dice_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Dice loss averaged over classes.

    ``logits`` is (B, C, ...) and ``target`` the integer labels (B, ...).
    """
    c = logits.shape[1]
    if target.min() < 0 or target.max() >= c:
        raise ValueError(f"target labels must lie in [0, {c}), got [{int(target.min())}, {int(target.max())}]")
    p = torch.softmax(logits, dim=1)
    t = F.one_hot(target.long(), c).movedim(-1, 1).to(p.dtype)
    dims = (0,) + tuple(range(2, p.ndim))
    inter = (p * t).sum(dims)
    ratio = (2.0 * inter + DICE_EPS) / (p.sum(dims) + t.sum(dims) + DICE_EPS)
    return 1.0 - ratio.mean()


def backward(net: SegNet, image: np.ndarray, target: np.ndarray, dropout_active: bool = False,
             seed: int | None = None) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of the Dice loss w.r.t. every parameter and the input."""
    x = _to_input(net, image).requires_grad_(True)
    net.zero_grad(set_to_none=True)
    logits, _ = net(x, False, dropout_active, _generator(seed))
    loss = dice_loss(logits, torch.as_tensor(np.asarray(target), dtype=torch.long)[None])
    loss.backward()
    grads = {name: p.grad.detach().numpy().copy() for name, p in net.named_parameters()}
    net.zero_grad(set_to_none=True)
    return grads, x.grad[0, 0].numpy().copy()


def predict_mask(net: SegNet, image: np.ndarray) -> np.ndarray:
    """Voxelwise argmax (ties go to the lower class index)."""
    logits, _ = forward(net, image)
    return np.argmax(logits, axis=0).astype(np.uint8)


def predict(net: SegNet, image: np.ndarray):
    """Single deterministic pass returning ``(mask, features)``."""
    logits, feats = forward(net, image, capture=True)
    return np.argmax(logits, axis=0).astype(np.uint8), feats


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    step: int = 0
    m: list[torch.Tensor] = field(default_factory=list)
    v: list[torch.Tensor] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls(0, [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              cfg: TrainConfig) -> AdamState:
    """Bias-corrected ADAM update applied in place to ``params``."""
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(cfg.learning_rate * (m / c1) / ((v / c2).sqrt() + cfg.eps))
    return state


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_dice: float
    seconds: float


@dataclass
class TrainLog:
    initial_loss: float = float("nan")
    epochs: list[EpochLog] = field(default_factory=list)

    @property
    def final_val_dice(self) -> float:
        return self.epochs[-1].val_dice if self.epochs else float("nan")


def mean_dice(net: SegNet, samples: Sequence[Sample], c: int = 1) -> float:
    scores = [dice_score(predict_mask(net, s.image), s.mask, c) for s in samples if s.mask is not None]
    return float(np.mean(scores)) if scores else float("nan")


def train(train_samples: Sequence[Sample], val_samples: Sequence[Sample], net_cfg: NetConfig,
          train_cfg: TrainConfig,
          progress: Callable[[EpochLog], None] | None = None) -> tuple[SegNet, TrainLog]:
    """Train with Dice loss and ADAM, batch size 1, dropout active.

    Sample order is reshuffled every epoch from the train seed; validation
    Dice (foreground class) is logged after each epoch.
    """
    if not train_samples:
        raise ValueError("no training samples")
    net = build_net(net_cfg, train_cfg.seed)
    params = list(net.parameters())
    state = AdamState.zeros_like(params)
    rng = make_rng(derive_seed(train_cfg.seed, "order"))
    gen = torch.Generator().manual_seed(derive_seed(train_cfg.seed, "dropout"))
    inputs = [_to_input(net, s.image) for s in train_samples]
    targets = [torch.as_tensor(s.mask, dtype=torch.long)[None] for s in train_samples]
    out = TrainLog()
    with torch.no_grad():
        out.initial_loss = float(np.mean([dice_loss(net(x)[0], t).item() for x, t in zip(inputs, targets)]))
    for epoch in range(1, train_cfg.epochs + 1):
        t0 = time.perf_counter()
        net.train()
        losses = []
        for i in rng.permutation(len(inputs)):
            logits, _ = net(inputs[i], False, True, gen)
            loss = dice_loss(logits, targets[i])
            grads = torch.autograd.grad(loss, params)
            adam_step(params, grads, state, train_cfg)
            losses.append(loss.item())
        net.eval()
        entry = EpochLog(epoch, float(np.mean(losses)), mean_dice(net, val_samples),
                         time.perf_counter() - t0)
        out.epochs.append(entry)
        log.info("epoch %d loss %.4f val dice %.4f (%.1fs)", entry.epoch, entry.train_loss,
                 entry.val_dice, entry.seconds)
        if progress:
            progress(entry)
    return net, out


# --------------------------------------------------------------------------
# uncertainty and attacks


def mc_dropout_score(net: SegNet, image: np.ndarray, n: int = 20, seed: int = 0) -> float:
    """Mean over voxels of the variance of the foreground probability across
    ``n`` dropout-active passes."""
    if n < 2:
        raise ValueError(f"MC dropout needs n >= 2 samples, got {n}")
    x = _to_input(net, image).expand(n, -1, -1, -1, -1).contiguous(memory_format=torch.channels_last_3d)
    with torch.no_grad():
        logits, _ = net(x, False, True, _generator(seed))
        fg = 1.0 - torch.softmax(logits.double(), dim=1)[:, 0]
    return float(fg.var(dim=0, unbiased=False).mean())


def fgsm_attack(net: SegNet, image: np.ndarray, epsilon: float,
                target: np.ndarray | None = None) -> np.ndarray:
    """One signed-gradient ascent step on the Dice loss.

    The label is the network's own prediction unless ``target`` is given.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    if epsilon == 0:
        return np.array(image, copy=True)
    label = predict_mask(net, image) if target is None else target
    _, g = backward(net, image, label)
    return (np.asarray(image) + epsilon * np.sign(g)).astype(np.asarray(image).dtype)


# --------------------------------------------------------------------------
# checkpoints


def fingerprint(net: SegNet) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(asdict(net.cfg), sort_keys=True).encode())
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(net: SegNet, path: str | Path, train_seed: int | None = None,
                    extra: dict | None = None) -> str:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in net.state_dict().items():
        fname = f"params/{name}.vtf"
        write_vtf(t.detach().to(torch.float32).numpy(), path / fname)
        entries.append({"name": name, "shape": list(t.shape), "file": fname})
    fp = fingerprint(net)
    doc = {"version": CHECKPOINT_VERSION, "config": asdict(net.cfg),
           "registry": [asdict(l) for l in net.registry], "params": entries,
           "train_seed": train_seed, "fingerprint": fp, "dropout_placement": "after every block activation"}
    if extra:
        doc.update(extra)
    (path / "registry.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    return fp


def load_checkpoint(path: str | Path) -> SegNet:
    path = Path(path)
    try:
        doc = json.loads((path / "registry.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint registry: {exc}") from exc
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    net = SegNet(NetConfig.from_dict(doc["config"]))
    state = {}
    for e in doc["params"]:
        state[e["name"]] = torch.from_numpy(read_vtf(path / e["file"]).astype(np.float32))
    net.load_state_dict(state)
    net.eval()
    actual = fingerprint(net)
    if actual != doc["fingerprint"]:
        raise FingerprintMismatchError(doc["fingerprint"], actual)
    return net


def checkpoint_info(path: str | Path) -> dict:
    return json.loads((Path(path) / "registry.json").read_text())

"""Two-branch late-fusion classifier.

The vision branch is a compact convolutional backbone followed by a two-layer
MLP head; the tactile branch embeds the 7-feature descriptor and runs it
through a single pre-norm transformer encoder layer. Branch logits are mixed
by a softmax-normalized pair of learnable weights.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .features import N_FEATURES, FeatureNormalizer
from .nn import Conv2d, GroupNorm, LayerNorm, Linear, Module, ModuleList, MultiHeadAttention
from .tensor import ConfigError, Parameter, ShapeError, Tensor, make_rng

GROUPS = ("vision", "tactile", "fusion")


@dataclass
class TactileBranchConfig:
    n_classes: int = 5
    d_model: int = 64
    heads: int = 4
    d_ffn: int = 256
    dropout: float = 0.1
    head_hidden: int = 32

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by {self.heads} heads")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class VisionBranchConfig:
    """Backbone: one stride-2 3x3 conv stage per entry of ``backbone_channels[:-1]``,
    then a 1x1 projection to ``backbone_channels[-1] == feature_dim``."""

    n_classes: int = 5
    input_size: int = 224
    backbone_channels: tuple = (16, 32, 64, 128, 1280)
    feature_dim: int = 1280
    squeeze_excitation: bool = True
    se_reduction: int = 4
    norm_groups: int = 4
    head_hidden: int = 256
    dropout: float = 0.1
    n_unfrozen_tensors: int = 20

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if len(self.backbone_channels) < 2:
            raise ConfigError("backbone needs at least one conv stage and a projection width")
        if self.backbone_channels[-1] != self.feature_dim:
            raise ConfigError(
                f"feature_dim {self.feature_dim} must equal the projection width {self.backbone_channels[-1]}"
            )
        for c in self.backbone_channels[:-1]:
            if c % self.norm_groups:
                raise ConfigError(f"stage width {c} not divisible by norm_groups={self.norm_groups}")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.n_unfrozen_tensors < 0:
            raise ConfigError("n_unfrozen_tensors must be non-negative")


# ---------------------------------------------------------------------------
# tactile branch


class EncoderLayer(Module):
    """Pre-norm encoder: x + MHA(LN(x)), then h + FFN(LN(h))."""

    def __init__(self, cfg: TactileBranchConfig, rng):
        super().__init__()
        self.dropout = cfg.dropout
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn_in = Linear(cfg.d_model, cfg.d_ffn, rng)
        self.ffn_out = Linear(cfg.d_ffn, cfg.d_model, rng)

    def __call__(self, x, rng=None):
        a = ops.dropout(self.attn(self.norm1(x)), self.dropout, self.training, rng)
        h = x + a
        f = self.ffn_out(ops.relu(self.ffn_in(self.norm2(h))))
        return h + ops.dropout(f, self.dropout, self.training, rng)


class TactileBranch(Module):
    def __init__(self, cfg: TactileBranchConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.embed = Linear(N_FEATURES, cfg.d_model, rng)
        self.encoder = EncoderLayer(cfg, rng)
        self.head_norm = LayerNorm(cfg.d_model)
        self.head_hidden = Linear(cfg.d_model, cfg.head_hidden, rng)
        self.head_out = Linear(cfg.head_hidden, cfg.n_classes, rng)

    def position_code(self, dtype) -> np.ndarray:
        # single-token sequence: position 0 only
        return ops.sinusoidal_encoding(1, self.cfg.d_model, dtype=dtype)[0]

    def __call__(self, features, rng=None) -> Tensor:
        x = ops.as_tensor(features)
        if x.ndim != 2 or x.shape[1] != N_FEATURES:
            raise ShapeError(f"tactile branch expects [B, {N_FEATURES}] features, got {x.shape}")
        B = x.shape[0]
        d = self.cfg.d_model
        tokens = self.embed(x) + self.position_code(self.embed.weight.dtype)
        h = self.encoder(ops.reshape(tokens, (B, 1, d)), rng)
        h = ops.reshape(h, (B, d))
        h = ops.dropout(self.head_norm(h), self.cfg.dropout, self.training, rng)
        return self.head_out(ops.relu(self.head_hidden(h)))


# ---------------------------------------------------------------------------
# vision branch


class SqueezeExcite(Module):
    def __init__(self, channels: int, reduction: int, rng):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.reduce = Linear(channels, hidden, rng)
        self.expand = Linear(hidden, channels, rng)

    def __call__(self, x) -> Tensor:
        # x is channels-last [B, H, W, C]
        B, C = x.shape[0], x.shape[-1]
        s = ops.sigmoid(self.expand(ops.relu(self.reduce(ops.global_avg_pool(x, channels_last=True)))))
        return x * ops.reshape(s, (B, 1, 1, C))


class ConvStage(Module):
    def __init__(self, c_in: int, c_out: int, cfg: VisionBranchConfig, rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel=3, stride=2, pad=1, rng=rng, channels_last=True)
        self.norm = GroupNorm(c_out, cfg.norm_groups, channels_last=True)
        if cfg.squeeze_excitation:
            self.se = SqueezeExcite(c_out, cfg.se_reduction, rng)
        else:
            self.se = None

    def __call__(self, x) -> Tensor:
        h = ops.relu(self.norm(self.conv(x)))
        return self.se(h) if self.se is not None else h


class Backbone(Module):
    """Compact stand-in feature extractor ending in global average pooling.

    Takes NCHW images; activations are kept channels-last internally.
    """

    def __init__(self, cfg: VisionBranchConfig, rng):
        super().__init__()
        widths = cfg.backbone_channels
        self.stages = ModuleList()
        c_in = 3
        for c in widths[:-1]:
            self.stages.append(ConvStage(c_in, c, cfg, rng))
            c_in = c
        self.project = Conv2d(c_in, widths[-1], kernel=1, stride=1, pad=0, rng=rng, channels_last=True)

    def __call__(self, x) -> Tensor:
        h = ops.transpose(x, (0, 2, 3, 1))
        for stage in self.stages:
            h = stage(h)
        return ops.global_avg_pool(ops.relu(self.project(h)), channels_last=True)


class VisionHead(Module):
    """Dropout -> Linear(feature_dim, hidden) -> ReLU -> Dropout -> Linear(hidden, C)."""

    def __init__(self, cfg: VisionBranchConfig, rng):
        super().__init__()
        self.p = cfg.dropout
        self.hidden = Linear(cfg.feature_dim, cfg.head_hidden, rng)
        self.out = Linear(cfg.head_hidden, cfg.n_classes, rng)

    def __call__(self, feats, rng=None) -> Tensor:
        h = ops.dropout(feats, self.p, self.training, rng)
        h = ops.relu(self.hidden(h))
        h = ops.dropout(h, self.p, self.training, rng)
        return self.out(h)


class VisionBranch(Module):
    def __init__(self, cfg: VisionBranchConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.head = VisionHead(cfg, rng)

    def __call__(self, images, rng=None) -> Tensor:
        x = ops.as_tensor(images)
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1:] != (3, s, s):
            raise ShapeError(f"vision branch expects [B, 3, {s}, {s}] images, got {x.shape}")
        return self.head(self.backbone(x), rng)


# ---------------------------------------------------------------------------
# fusion and output


class FusionWeights(Module):
    """Two learnable logits (vision, tactile); effective weights are their softmax."""

    def __init__(self):
        super().__init__()
        self.w = Parameter(np.zeros(2))

    def alphas(self) -> Tensor:
        return ops.simplex_weights(self.w)

    def alpha_values(self) -> tuple[float, float]:
        a = self.alphas().data
        return float(a[0]), float(a[1])


def fuse(z_v, z_t, fw: FusionWeights | Tensor) -> Tensor:
    """alpha_v * z_v + alpha_t * z_t with alpha = softmax(fusion logits)."""
    z_v, z_t = ops.as_tensor(z_v), ops.as_tensor(z_t)
    if z_v.shape != z_t.shape:
        raise ShapeError(f"fuse: vision logits {z_v.shape} vs tactile logits {z_t.shape}")
    w = fw.w if isinstance(fw, FusionWeights) else fw
    alpha = ops.simplex_weights(w)
    return alpha[0] * z_v + alpha[1] * z_t


def predict(fused_logits) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (probabilities, argmax class with lowest-index ties, confidence)."""
    z = fused_logits.data if isinstance(fused_logits, Tensor) else np.asarray(fused_logits)
    P = ops.softmax(Tensor._wrap(z)).data
    y_hat = P.argmax(axis=-1)
    conf = P.max(axis=-1)
    return P, y_hat, conf


@dataclass
class ModelOutput:
    vision_logits: Tensor
    tactile_logits: Tensor
    fused_logits: Tensor
    probabilities: np.ndarray
    predicted: np.ndarray
    confidence: np.ndarray


class SurformerModel(Module):
    def __init__(
        self,
        vision_cfg: VisionBranchConfig | None = None,
        tactile_cfg: TactileBranchConfig | None = None,
        seed: int = 0,
        normalizer: FeatureNormalizer | None = None,
    ):
        super().__init__()
        vision_cfg = vision_cfg or VisionBranchConfig()
        tactile_cfg = tactile_cfg or TactileBranchConfig(n_classes=vision_cfg.n_classes)
        if vision_cfg.n_classes != tactile_cfg.n_classes:
            raise ConfigError(
                f"branches disagree on class count: {vision_cfg.n_classes} vs {tactile_cfg.n_classes}"
            )
        ss_vision, ss_tactile = np.random.SeedSequence(seed).spawn(2)
        self.vision_cfg = vision_cfg
        self.tactile_cfg = tactile_cfg
        self.seed = seed
        self.normalizer = normalizer
        self.vision = VisionBranch(vision_cfg, make_rng(ss_vision))
        self.tactile = TactileBranch(tactile_cfg, make_rng(ss_tactile))
        self.fusion = FusionWeights()
        self._name_parameters()
        apply_freeze_policy(self, vision_cfg.n_unfrozen_tensors)

    @property
    def n_classes(self) -> int:
        return self.vision_cfg.n_classes

    def groups(self) -> dict[str, list[Parameter]]:
        return {
            "vision": self.vision.parameters(),
            "tactile": self.tactile.parameters(),
            "fusion": self.fusion.parameters(),
        }

    def forward(self, images, features, rng: np.random.Generator | None = None) -> ModelOutput:
        if self.training and rng is None:
            rng = make_rng(0)
        z_v = self.vision(images, rng)
        z_t = self.tactile(features, rng)
        z = fuse(z_v, z_t, self.fusion)
        P, y_hat, conf = predict(z)
        return ModelOutput(z_v, z_t, z, P, y_hat, conf)

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data[...] = arr

    def config_dict(self) -> dict:
        v = asdict(self.vision_cfg)
        v["backbone_channels"] = list(v["backbone_channels"])
        return {"vision": v, "tactile": asdict(self.tactile_cfg), "seed": self.seed}


def apply_freeze_policy(model: SurformerModel, n_unfrozen: int = 20) -> None:
    """Freeze every backbone tensor except the last ``n_unfrozen`` in construction order."""
    backbone = model.vision.backbone.parameters()
    if n_unfrozen < 0:
        raise ConfigError("n_unfrozen must be non-negative")
    if n_unfrozen > len(backbone):
        warnings.warn(
            f"n_unfrozen={n_unfrozen} exceeds the {len(backbone)} backbone tensors; unfreezing all",
            stacklevel=2,
        )
        n_unfrozen = len(backbone)
    cut = len(backbone) - n_unfrozen
    for i, p in enumerate(backbone):
        p.trainable = i >= cut
    for p in model.vision.head.parameters() + model.tactile.parameters() + model.fusion.parameters():
        p.trainable = True


def count_parameters(model: SurformerModel) -> dict[str, int]:
    vision = model.vision.parameters()
    counts = {
        "vision_total": sum(p.data.size for p in vision),
        "vision_trainable": sum(p.data.size for p in vision if p.trainable),
        "tactile_total": sum(p.data.size for p in model.tactile.parameters()),
        "fusion_total": sum(p.data.size for p in model.fusion.parameters()),
    }
    counts["grand_total"] = counts["vision_total"] + counts["tactile_total"] + counts["fusion_total"]
    return {k: int(v) for k, v in counts.items()}

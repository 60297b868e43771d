"""Architecture configuration and the shape arithmetic derived from it."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

NUM_GRADES = 5
IN_CHANS = 3
CLASSIFIER_MODES = ("multi-head", "single-head")


class ConfigError(ValueError):
    """One or more configuration problems; ``errors`` lists all of them."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 4
    base_channels: int = 24
    stage_depths: tuple[int, ...] = (2, 2, 2, 2)
    stage_heads: tuple[int, ...] = (2, 4, 8, 16)
    window_size: int = 4
    mlp_ratio: int = 4
    use_relative_position_bias: bool = True
    head_layer_sizes: tuple[int, ...] = (384, 48, 48, 1)
    classifier_mode: str = "multi-head"
    # fixed input normalisation applied before patch partition
    pixel_mean: float = 0.5
    pixel_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(self.stage_depths))
        object.__setattr__(self, "stage_heads", tuple(self.stage_heads))
        object.__setattr__(self, "head_layer_sizes", tuple(self.head_layer_sizes))

    # -- validation ---------------------------------------------------------

    def validate(self) -> list[str]:
        errs = []
        if self.patch_size < 1 or self.image_size < 1:
            errs.append("image_size and patch_size must be positive")
        elif self.image_size % (self.patch_size * 8):
            errs.append(
                f"image_size {self.image_size} must be divisible by patch_size*2^3 = {self.patch_size * 8}"
            )
        if len(self.stage_depths) != 4:
            errs.append(f"stage_depths needs 4 entries, got {len(self.stage_depths)}")
        if len(self.stage_heads) != 4:
            errs.append(f"stage_heads needs 4 entries, got {len(self.stage_heads)}")
        if any(d < 1 for d in self.stage_depths):
            errs.append("every stage needs at least one block")
        if self.base_channels < 1:
            errs.append("base_channels must be positive")
        if self.window_size < 1:
            errs.append("window_size must be positive")
        if not self.pixel_std > 0:
            errs.append("pixel_std must be positive")
        if len(self.stage_heads) == 4 and self.base_channels >= 1:
            for s, h in enumerate(self.stage_heads):
                dim = self.stage_dim(s)
                if h < 1 or dim % h:
                    errs.append(f"stage {s} dim {dim} not divisible by {h} heads")
        if not errs:
            for s in range(4):
                side = self.stage_resolution(s)
                m, _ = self.stage_window(s)
                if side % m:
                    errs.append(f"stage {s} grid {side} not divisible by window {m}")
        if self.mlp_ratio < 1:
            errs.append("mlp_ratio must be positive")
        if not self.head_layer_sizes or any(n < 1 for n in self.head_layer_sizes):
            errs.append("head_layer_sizes must be a non-empty list of positive sizes")
        elif self.head_layer_sizes[-1] != 1:
            errs.append(f"last head layer must have 1 output, got {self.head_layer_sizes[-1]}")
        if self.classifier_mode not in CLASSIFIER_MODES:
            errs.append(f"classifier_mode must be one of {CLASSIFIER_MODES}, got {self.classifier_mode!r}")
        return errs

    def check(self) -> "ModelConfig":
        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self

    # -- derived shapes ------------------------------------------------------

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * IN_CHANS

    @property
    def feature_dim(self) -> int:
        return self.stage_dim(3)

    def stage_dim(self, s: int) -> int:
        return self.base_channels * 2**s

    def stage_resolution(self, s: int) -> int:
        return self.image_size // (self.patch_size * 2**s)

    def stage_window(self, s: int) -> tuple[int, int]:
        """(effective window, shift) for stage ``s``; small grids use one window and no shift."""
        side = self.stage_resolution(s)
        if side <= self.window_size:
            return side, 0
        return self.window_size, self.window_size // 2

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """(grid height, grid width, channels) emitted by each stage."""
        return [(self.stage_resolution(s), self.stage_resolution(s), self.stage_dim(s)) for s in range(4)]

    def classifier_sizes(self) -> list[int]:
        if self.classifier_mode == "multi-head":
            return [self.feature_dim, *self.head_layer_sizes]
        return [self.feature_dim, *self.head_layer_sizes[:-1], NUM_GRADES]

    def parameter_count(self) -> int:
        """Closed-form number of scalars in a model built from this config."""
        C = self.base_channels
        n = self.patch_dim * C + C + 2 * C  # embedding + its norm
        for s in range(4):
            d = self.stage_dim(s)
            if s > 0:
                prev = self.stage_dim(s - 1)
                n += 2 * 4 * prev + 4 * prev * d  # merge norm + bias-free reduction
            m, _ = self.stage_window(s)
            hidden = self.mlp_ratio * d
            block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * hidden + hidden + hidden * d + d)
            if self.use_relative_position_bias:
                block += (2 * m - 1) ** 2 * self.stage_heads[s]
            n += self.stage_depths[s] * block
        n += 2 * self.feature_dim
        sizes = self.classifier_sizes()
        mlp = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
        n += NUM_GRADES * mlp if self.classifier_mode == "multi-head" else mlp
        return n

    # -- (de)serialisation ---------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("stage_depths", "stage_heads", "head_layer_sizes"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError([f"unknown model config key {k!r}" for k in unknown])
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


TOY = ModelConfig()

SWIN_B = ModelConfig(
    image_size=224,
    patch_size=4,
    base_channels=128,
    stage_depths=(2, 2, 18, 2),
    stage_heads=(4, 8, 16, 32),
    window_size=7,
)


@dataclass
class AdamWConfig:
    lr: float = 3e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.05

    def to_dict(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay}


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 300
    finetune_epochs: int = 300
    optimizer: AdamWConfig = field(default_factory=AdamWConfig)
    augment: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = self.optimizer.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        opt = d.pop("optimizer", {}) or {}
        if "betas" in opt:
            opt["betas"] = tuple(opt["betas"])
        return cls(optimizer=AdamWConfig(**opt), **d)

"""Three 3D-convolutional clip encoders sharing one contract.

All variants take (B, 3, 16, 112, 112) clips and emit a (B, feature_dim)
vector via global average pooling after five downsampling stages. The
stage stride schedule is pinned here: stage 1 keeps time and halves
space, stages 2-5 halve all three axes, leaving a 1x4x4 grid at the top.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

ARCHITECTURES = ("c3d", "r3d", "r2plus1d")
FULL_WIDTHS = (64, 128, 256, 512, 512)
TINY_WIDTHS = (8, 16, 32, 64, 64)
STAGE_STRIDES = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2))
INPUT_CHANNELS = 3
INPUT_FRAMES = 16
INPUT_SIZE = 112


@dataclass(frozen=True)
class BackboneConfig:
    """Architecture selector plus per-stage channel widths."""

    arch: str
    widths: tuple[int, ...] = FULL_WIDTHS

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        if len(self.widths) != len(STAGE_STRIDES):
            raise ValueError(f"need {len(STAGE_STRIDES)} stage widths, got {self.widths}")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"stage widths must be positive, got {self.widths}")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @classmethod
    def tiny(cls, arch: str) -> "BackboneConfig":
        return cls(arch=arch, widths=TINY_WIDTHS)

    @classmethod
    def preset(cls, arch: str, size: str) -> "BackboneConfig":
        if size == "tiny":
            return cls.tiny(arch)
        if size == "full":
            return cls(arch=arch)
        raise ValueError(f"unknown preset {size!r}, expected tiny or full")

    def to_dict(self) -> dict:
        return {"arch": self.arch, "widths": list(self.widths)}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(arch=d["arch"], widths=tuple(d["widths"]))


def _conv_stage(cin: int, cout: int, stride: tuple[int, int, int]) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, stride=stride, padding=1, bias=False),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


def _full_conv(cin: int, cout: int, stride: tuple[int, int, int]) -> nn.Module:
    return nn.Conv3d(cin, cout, 3, stride=stride, padding=1, bias=False)


class ResidualStage(nn.Module):
    """Two 3x3x3 convolutions with an additive identity shortcut."""

    def __init__(self, cin: int, cout: int, stride: tuple[int, int, int], conv=_full_conv):
        super().__init__()
        self.conv1 = conv(cin, cout, stride)
        self.bn1 = nn.BatchNorm3d(cout)
        self.conv2 = conv(cout, cout, (1, 1, 1))
        self.bn2 = nn.BatchNorm3d(cout)
        self.relu = nn.ReLU(inplace=True)
        if cin != cout or stride != (1, 1, 1):
            self.project = nn.Sequential(
                nn.Conv3d(cin, cout, 1, stride=stride, bias=False),
                nn.BatchNorm3d(cout),
            )
        else:
            self.project = nn.Identity()

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.project(x))


def factored_mid_channels(cin: int, cout: int) -> int:
    """Midpoint width that keeps a (1,3,3)+(3,1,1) pair at the parameter
    count of one 3x3x3 convolution: floor(27*cin*cout / (9*cin + 3*cout))."""
    return (27 * cin * cout) // (9 * cin + 3 * cout)


class FactoredConv(nn.Module):
    """A 3x3x3 convolution split into spatial (1,3,3) then temporal (3,1,1)."""

    def __init__(self, cin: int, cout: int, stride: tuple[int, int, int]):
        super().__init__()
        mid = factored_mid_channels(cin, cout)
        st, sy, sx = stride
        self.spatial = nn.Conv3d(
            cin, mid, (1, 3, 3), stride=(1, sy, sx), padding=(0, 1, 1), bias=False
        )
        self.bn = nn.BatchNorm3d(mid)
        self.relu = nn.ReLU(inplace=True)
        self.temporal = nn.Conv3d(
            mid, cout, (3, 1, 1), stride=(st, 1, 1), padding=(1, 0, 0), bias=False
        )

    def forward(self, x):
        return self.temporal(self.relu(self.bn(self.spatial(x))))


class FactoredResidualStage(ResidualStage):
    """ResidualStage with both 3x3x3 convolutions factored."""

    def __init__(self, cin: int, cout: int, stride: tuple[int, int, int]):
        super().__init__(cin, cout, stride, conv=FactoredConv)


class FeatureBackbone(nn.Module):
    """Five stages then global spatiotemporal average pooling."""

    def __init__(self, config: BackboneConfig):
        super().__init__()
        self.config = config
        stage_cls = {
            "c3d": _conv_stage,
            "r3d": ResidualStage,
            "r2plus1d": FactoredResidualStage,
        }[config.arch]
        stages = []
        cin = INPUT_CHANNELS
        for width, stride in zip(config.widths, STAGE_STRIDES):
            stages.append(stage_cls(cin, width, stride))
            cin = width
        self.stages = nn.ModuleList(stages)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _check_input(self, x: torch.Tensor) -> None:
        expected = (INPUT_CHANNELS, INPUT_FRAMES, INPUT_SIZE, INPUT_SIZE)
        if x.ndim != 5 or tuple(x.shape[1:]) != expected:
            raise ValueError(
                f"expected clip batch of shape (B, {', '.join(map(str, expected))}), "
                f"got {tuple(x.shape)}"
            )

    def forward_stages(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Activations after each stage, for attention visualization."""
        self._check_input(x)
        outputs = []
        for stage in self.stages:
            x = stage(x)
            outputs.append(x)
        return outputs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        for stage in self.stages:
            x = stage(x)
        return x.mean(dim=(2, 3, 4))


def init_parameters(module: nn.Module, seed: int) -> None:
    """Seeded He-normal conv init, unit batch-norm, uniform linear init.

    Uses a private torch.Generator so results do not depend on (or
    disturb) global RNG state.
    """
    gen = torch.Generator().manual_seed(int(seed))
    for m in module.modules():
        if isinstance(m, nn.Conv3d):
            fan_out = m.out_channels * int(np.prod(m.kernel_size))
            m.weight.data.normal_(0.0, float(np.sqrt(2.0 / fan_out)), generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()
        elif isinstance(m, nn.BatchNorm3d):
            m.weight.data.fill_(1.0)
            m.bias.data.zero_()
        elif isinstance(m, nn.Linear):
            bound = 1.0 / np.sqrt(m.in_features)
            m.weight.data.uniform_(-bound, bound, generator=gen)
            if m.bias is not None:
                m.bias.data.uniform_(-bound, bound, generator=gen)


def build_backbone(config: BackboneConfig, seed: int = 0) -> FeatureBackbone:
    model = FeatureBackbone(config)
    init_parameters(model, seed)
    return model


def save_backbone(model: FeatureBackbone, path: str | Path) -> None:
    """Self-describing archive: config record plus named parameter blocks."""
    torch.save(
        {
            "kind": "backbone",
            "config": model.config.to_dict(),
            "state": model.state_dict(),
        },
        Path(path),
    )


def load_backbone(
    path: str | Path, expected: BackboneConfig | None = None
) -> FeatureBackbone:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise OSError(f"cannot load backbone archive {path}: {exc}")
    if not isinstance(blob, dict) or blob.get("kind") != "backbone":
        raise ValueError(f"{path} is not a backbone archive")
    config = BackboneConfig.from_dict(blob["config"])
    if expected is not None and config != expected:
        raise ValueError(
            f"checkpoint config {config} does not match expected {expected}"
        )
    model = FeatureBackbone(config)
    state = blob["state"]
    dtypes = {
        v.dtype for v in state.values() if torch.is_tensor(v) and v.is_floating_point()
    }
    if len(dtypes) == 1:
        # Adopt the archive's precision before copying, so float64 weights
        # are not squeezed through float32 parameters.
        model.to(next(iter(dtypes)))
    model.load_state_dict(state)
    return model


def numeric_gradient_check(
    model: nn.Module,
    batch: torch.Tensor,
    loss_head=None,
    num_params: int = 60,
    step: float = 1e-6,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central finite differences.

    The model is evaluated in double precision with normalization layers
    in frozen-statistics mode so the forward map is deterministic. At
    least num_params randomly chosen parameter entries are probed.
    """
    model = model.double().eval()
    batch = batch.double()
    rng = np.random.default_rng(seed)
    if loss_head is None:
        out_dim = model(batch[:1]).shape[-1]
        weights = torch.from_numpy(rng.standard_normal(out_dim))

        def loss_head(features: torch.Tensor) -> torch.Tensor:
            return (features @ weights).sum()

    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(num_params, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    model.zero_grad()
    loss_head(model(batch)).backward()
    analytic = [p.grad.detach().clone().reshape(-1) for p in params]

    def loss_value() -> float:
        with torch.no_grad():
            return float(loss_head(model(batch)))

    worst = 0.0
    for flat in sorted(int(i) for i in picks):
        pi = int(np.searchsorted(offsets, flat, side="right")) - 1
        j = flat - int(offsets[pi])
        slot = params[pi].data.reshape(-1)
        original = float(slot[j])
        slot[j] = original + step
        up = loss_value()
        slot[j] = original - step
        down = loss_value()
        slot[j] = original
        fd = (up - down) / (2.0 * step)
        ana = float(analytic[pi][j])
        err = abs(ana - fd) / max(abs(ana), abs(fd), 1e-5)
        worst = max(worst, err)
    return worst

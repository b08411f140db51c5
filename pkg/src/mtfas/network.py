"""Feature extractor, depth head, parsing U-net with attention skip, meta learner.

All modules work on channels-first tensors. The parsing U-net has no encoder
of its own: it decodes the extractor's feature map and skips, so the encoder
weights and the extractor weights are the same tensors.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from .data import DEPTH_SIZE, N_PARSING

GROUPS = ("theta_F", "theta_D", "theta_S", "theta_M")
_GROUP_MODULES = {"theta_F": "extractor", "theta_D": "depth_head", "theta_S": "parser", "theta_M": "meta_learner"}


@dataclass(frozen=True)
class NetConfig:
    input_size: int = 64
    in_channels: int = 6
    widths: tuple[int, int, int] = (32, 64, 128)
    asc_channels: int = 32
    hidden: int = 128
    eca_kernel: int = 3
    n_parsing: int = N_PARSING
    depth_size: int = DEPTH_SIZE

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3:
            raise ValueError("widths must list three encoder channel counts")
        if self.input_size % 8:
            raise ValueError(f"input_size must be a multiple of 8, got {self.input_size}")
        if self.eca_kernel % 2 == 0:
            raise ValueError("eca_kernel must be odd")

    @property
    def embedding_size(self) -> int:
        return self.widths[2] + self.asc_channels


class FeatureMap(NamedTuple):
    values: torch.Tensor  # B x C x h x w
    skips: tuple[torch.Tensor, ...]  # encoder activations at H/2 and H/4


class ForwardOutputs(NamedTuple):
    depth_pred: torch.Tensor
    parsing_logits: torch.Tensor
    asc_feature: torch.Tensor
    embedding: torch.Tensor
    live_prob: torch.Tensor
    logit: torch.Tensor
    metric_embedding: torch.Tensor


class Trunk(NamedTuple):
    """Everything the meta procedure needs that does not depend on theta_M."""

    pooled: torch.Tensor
    depth_pred: torch.Tensor
    parsing_logits: torch.Tensor


def _norm(channels: int) -> nn.GroupNorm:
    # per-sample normalization: no running statistics to carry through inner updates
    return nn.GroupNorm(math.gcd(8, channels), channels)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, n_convs: int = 2):
        layers = []
        for i in range(n_convs):
            layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1), _norm(cout), nn.SiLU()]
        super().__init__(*layers)


class Extractor(nn.Module):
    """Three conv blocks, each followed by a 2x average-pool downsample."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w1, w2, w3 = cfg.widths
        self.in_channels = cfg.in_channels
        self.blocks = nn.ModuleList(
            [ConvBlock(cfg.in_channels, w1), ConvBlock(w1, w2), ConvBlock(w2, w3)]
        )

    def forward(self, x: torch.Tensor) -> FeatureMap:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected B x {self.in_channels} x H x W input, got {tuple(x.shape)}")
        if x.shape[2] != x.shape[3] or x.shape[2] % 8:
            raise ValueError(f"input must be square with side divisible by 8, got {tuple(x.shape[2:])}")
        acts = []
        for block in self.blocks:
            x = F.avg_pool2d(block(x), 2)
            acts.append(x)
        return FeatureMap(acts[-1], tuple(acts[:-1]))


class DepthHead(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        c = cfg.widths[2]
        self.size = cfg.depth_size
        self.conv1 = nn.Conv2d(c, c // 2, 3, padding=1)
        self.conv2 = nn.Conv2d(c // 2, 1, 3, padding=1)

    def forward(self, f: FeatureMap) -> torch.Tensor:
        x = f.values
        if x.shape[-1] != self.size:
            x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        return torch.sigmoid(self.conv2(F.silu(self.conv1(x))))[:, 0]


class ECA(nn.Module):
    """Efficient channel attention: pooled channel descriptor -> 1-D conv -> sigmoid gate."""

    def __init__(self, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv1d(1, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        desc = x.mean(dim=(2, 3))[:, None, :]  # B x 1 x C
        return torch.sigmoid(self.conv(desc))[:, 0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.weights(x)[:, :, None, None]


class ParsingDecoder(nn.Module):
    """U-net decoder over the shared encoder plus the attention skip branch."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        w1, w2, w3 = cfg.widths
        self.up1 = ConvBlock(w3 + w2, w2)
        self.up2 = ConvBlock(w2 + w1, w1)
        self.up3 = ConvBlock(w1, w1)
        self.classifier = nn.Conv2d(w1, cfg.n_parsing, 1)
        self.asc_conv = ConvBlock(w1, cfg.asc_channels, n_convs=1)
        self.eca = ECA(cfg.eca_kernel)

    def decode(self, f: FeatureMap) -> tuple[torch.Tensor, torch.Tensor]:
        """Parsing logits at input resolution and the last decoder activation."""
        if len(f.skips) != 2:
            raise ValueError(f"decoder needs two encoder skips, got {len(f.skips)}")
        x = f.values
        for skip, stage in zip(reversed(f.skips), (self.up1, self.up2)):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if skip.shape[0] != x.shape[0] or skip.shape[2:] != x.shape[2:]:
                raise ValueError(f"skip shape {tuple(skip.shape)} does not match decoder stage {tuple(x.shape)}")
            x = stage(torch.cat([x, skip], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        last = self.up3(x)
        return self.classifier(last), last

    def attention_skip(self, decoder_last: torch.Tensor, grid: int) -> torch.Tensor:
        return F.adaptive_avg_pool2d(self.eca(self.asc_conv(decoder_last)), grid)


class MetaLearner(nn.Module):
    """Two fully connected layers; the first layer's output is the metric embedding."""

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.fc1 = nn.Linear(cfg.embedding_size, cfg.hidden)
        self.fc2 = nn.Linear(cfg.hidden, 1)

    def forward(self, pooled: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        hidden = self.fc1(pooled)
        return self.fc2(F.silu(hidden))[:, 0], hidden


class FASNet(nn.Module):
    def __init__(self, cfg: NetConfig | None = None):
        super().__init__()
        self.cfg = cfg or NetConfig()
        self.extractor = Extractor(self.cfg)
        self.depth_head = DepthHead(self.cfg)
        self.parser = ParsingDecoder(self.cfg)
        self.meta_learner = MetaLearner(self.cfg)

    @property
    def parsing_encoder(self) -> Extractor:
        return self.extractor

    def groups(self) -> dict[str, dict[str, nn.Parameter]]:
        return {g: dict(getattr(self, m).named_parameters()) for g, m in _GROUP_MODULES.items()}

    def extract_features(self, x: torch.Tensor) -> FeatureMap:
        return self.extractor(x)

    def estimate_depth(self, f: FeatureMap) -> torch.Tensor:
        return self.depth_head(f)

    def parse_face(self, f: FeatureMap) -> tuple[torch.Tensor, torch.Tensor]:
        return self.parser.decode(f)

    def attention_skip(self, decoder_last: torch.Tensor, grid: int) -> torch.Tensor:
        return self.parser.attention_skip(decoder_last, grid)

    @staticmethod
    def pool(f: FeatureMap, asc_feature: torch.Tensor) -> torch.Tensor:
        return torch.cat([f.values.mean(dim=(2, 3)), asc_feature.mean(dim=(2, 3))], dim=1)

    def classify(self, f: FeatureMap, asc_feature: torch.Tensor, theta_M: dict | None = None):
        """(live_prob, embedding); `theta_M` substitutes the meta learner's parameters."""
        pooled = self.pool(f, asc_feature)
        logit, _ = self.meta_forward(pooled, theta_M)
        return torch.sigmoid(logit), pooled

    def meta_forward(self, pooled: torch.Tensor, theta_M: dict | None = None):
        if theta_M is None:
            return self.meta_learner(pooled)
        return functional_call(self.meta_learner, theta_M, (pooled,))

    def trunk(self, x: torch.Tensor, f: FeatureMap | None = None) -> Trunk:
        f = self.extract_features(x) if f is None else f
        logits, last = self.parse_face(f)
        asc = self.attention_skip(last, f.values.shape[-1])
        return Trunk(self.pool(f, asc), self.estimate_depth(f), logits)

    def forward(self, x: torch.Tensor, theta_M: dict | None = None) -> ForwardOutputs:
        f = self.extract_features(x)
        logits, last = self.parse_face(f)
        asc = self.attention_skip(last, f.values.shape[-1])
        pooled = self.pool(f, asc)
        logit, hidden = self.meta_forward(pooled, theta_M)
        return ForwardOutputs(
            depth_pred=self.estimate_depth(f),
            parsing_logits=logits,
            asc_feature=asc,
            embedding=pooled,
            live_prob=torch.sigmoid(logit),
            logit=logit,
            metric_embedding=hidden,
        )


def build_model(cfg: NetConfig | None = None, seed: int = 0) -> FASNet:
    torch.manual_seed(seed)
    return FASNet(cfg)


# ---------------------------------------------------------------------------
# checkpoints: one blob per parameter group plus meta.json
# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: FASNet, step: int = 0, optimizer=None, rng_state=None, extra=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for group, module in _GROUP_MODULES.items():
        torch.save(getattr(model, module).state_dict(), path / f"{group}.pt")
    if optimizer is not None:
        torch.save(optimizer.state_dict(), path / "optimizer.pt")
    meta = {"arch": asdict(model.cfg), "step": int(step), "rng_state": rng_state}
    if extra:
        meta.update(extra)
    tmp = path / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=1))
    tmp.replace(path / "meta.json")
    return path


def load_checkpoint(path: str | Path) -> tuple[FASNet, dict]:
    """Rebuild the model from meta.json and restore every parameter group."""
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"checkpoint {path} has no meta.json")
    meta = json.loads(meta_path.read_text())
    model = FASNet(NetConfig(**meta["arch"]))
    for group, module in _GROUP_MODULES.items():
        state = torch.load(path / f"{group}.pt", weights_only=True)
        getattr(model, module).load_state_dict(state)
    opt_path = path / "optimizer.pt"
    meta["optimizer_state"] = torch.load(opt_path, weights_only=True) if opt_path.is_file() else None
    return model, meta

"""Backbones and the single-/multi-input classifier topologies."""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from fruitform.data.records import NUM_CLASSES
from fruitform.errors import ValidationError
from fruitform.io_utils import PathLike, atomic_write_bytes, sha256_bytes

BACKBONE_KINDS = ("tiny", "cidis", "mobilenetv2", "vgg16")

# normative CIDIS-like layer table: (out_channels, kernel) per conv block,
# each block = conv 3x3 (same padding) -> ReLU -> max-pool 2x2
CIDIS_BLOCKS = ((32, 3), (64, 3), (128, 3), (128, 3))
TINY_BLOCKS = ((16, 3), (32, 3))
TINY_GRID = 8  # adaptive pool grid kept by the Tiny backbone before its projection


@dataclass
class BackboneSpec:
    kind: str = "tiny"
    input_side: int = 64
    input_channels: int = 3
    feature_dim: int = 32
    seed: int = 0
    weights: Optional[str] = None  # path to a weights file; random init when None

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValidationError(f"unknown backbone kind {self.kind!r}; choose from {BACKBONE_KINDS}")
        if self.input_channels not in (1, 3):
            raise ValidationError("input_channels must be 1 or 3")
        if self.feature_dim < 1 or self.input_side < 1:
            raise ValidationError("feature_dim and input_side must be positive")


def conv_block(c_in: int, c_out: int, k: int) -> List[nn.Module]:
    return [nn.Conv2d(c_in, c_out, k, padding=k // 2), nn.ReLU(inplace=True), nn.MaxPool2d(2)]


class MirrorContrast(nn.Module):
    """Feature grid plus its squared differences from its left-right and up-down mirrors, flattened.

    Squared rather than absolute differences keep the map smooth for finite-difference checks.
    """

    expansion = 3

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        return torch.cat([g, (g - g.flip(3)) ** 2, (g - g.flip(2)) ** 2], dim=1).flatten(1)


class Backbone(nn.Module):
    """Image -> feature vector of exactly ``spec.feature_dim`` values."""

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        layers: List[nn.Module] = []
        c = spec.input_channels
        if spec.kind in ("tiny", "cidis"):
            blocks = TINY_BLOCKS if spec.kind == "tiny" else CIDIS_BLOCKS
            for c_out, k in blocks:
                layers += conv_block(c, c_out, k)
                c = c_out
            self.features = nn.Sequential(*layers)
            if spec.kind == "tiny":
                # keep a coarse spatial grid; global pooling cannot see left/right asymmetry
                self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(TINY_GRID), MirrorContrast())
                self.project = nn.Sequential(
                    nn.Linear(MirrorContrast.expansion * c * TINY_GRID * TINY_GRID, spec.feature_dim),
                    nn.ReLU(inplace=True))
            else:
                self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
                self.project = nn.Identity() if spec.feature_dim == c else nn.Linear(c, spec.feature_dim)
        else:
            self.features, c = _torchvision_features(spec.kind, spec.input_channels)
            self.pool = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())
            self.project = nn.Identity() if spec.feature_dim == c else nn.Linear(c, spec.feature_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.pool(self.features(x)))


def _torchvision_features(kind: str, channels: int) -> Tuple[nn.Module, int]:
    from torchvision import models

    if kind == "mobilenetv2":
        feats = models.mobilenet_v2(weights=None).features
        if channels != 3:
            old = feats[0][0]
            feats[0][0] = nn.Conv2d(channels, old.out_channels, old.kernel_size, old.stride,
                                    old.padding, bias=False)
        return feats, 1280
    feats = models.vgg16(weights=None).features
    if channels != 3:
        old = feats[0]
        feats[0] = nn.Conv2d(channels, old.out_channels, old.kernel_size, old.stride, old.padding)
    return feats, 512


def cidis_param_count(input_channels: int = 3) -> int:
    total, c = 0, input_channels
    for c_out, k in CIDIS_BLOCKS:
        total += k * k * c * c_out + c_out
        c = c_out
    return total


def _seeded(build, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_backbone(spec: BackboneSpec) -> Backbone:
    model = _seeded(lambda: Backbone(spec), spec.seed)
    if spec.weights:
        load_weights(model, spec.weights)
    return model


@dataclass
class SingleInputSpec:
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"topology": "single", **asdict(self)}


@dataclass
class MultiInputSpec:
    rgb_branch: BackboneSpec = field(default_factory=BackboneSpec)
    silhouette_branch: BackboneSpec = field(
        default_factory=lambda: BackboneSpec(input_channels=1, seed=1))
    hidden: Tuple[int, ...] = (256,)
    replicate_silhouette: bool = False
    freeze_rgb: bool = False
    freeze_silhouette: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.rgb_branch.input_channels != 3:
            raise ValidationError("the RGB branch takes 3 channels")
        want = 3 if self.replicate_silhouette else 1
        if self.silhouette_branch.input_channels != want:
            raise ValidationError(f"silhouette branch must take {want} channel(s) "
                                  f"(replicate_silhouette={self.replicate_silhouette})")
        if self.rgb_branch.input_side != self.silhouette_branch.input_side:
            raise ValidationError("both branches must share the input side")
        self.hidden = tuple(int(h) for h in self.hidden)

    @property
    def fused_dim(self) -> int:
        return self.rgb_branch.feature_dim + self.silhouette_branch.feature_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return {"topology": "multi", **d}


class SingleInputNet(nn.Module):
    def __init__(self, spec: SingleInputSpec):
        super().__init__()
        self.spec = spec
        self.backbone = build_backbone(spec.backbone)
        self.head = _seeded(lambda: nn.Linear(spec.backbone.feature_dim, NUM_CLASSES), spec.seed)

    @property
    def input_side(self) -> int:
        return self.spec.backbone.input_side

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Returns logits; see :func:`forward_single` for probabilities."""
        return self.head(self.backbone(x))


class MultiInputNet(nn.Module):
    """RGB branch + silhouette branch -> concatenation -> MLP -> 4 logits."""

    def __init__(self, spec: MultiInputSpec):
        super().__init__()
        self.spec = spec
        self.rgb_branch = build_backbone(spec.rgb_branch)
        self.silhouette_branch = build_backbone(spec.silhouette_branch)

        def mlp():
            layers: List[nn.Module] = []
            width = spec.fused_dim
            for h in spec.hidden:
                layers += [nn.Linear(width, h), nn.ReLU(inplace=True)]
                width = h
            layers.append(nn.Linear(width, NUM_CLASSES))
            return nn.Sequential(*layers)

        self.mlp = _seeded(mlp, spec.seed)
        for p in self.rgb_branch.parameters():
            p.requires_grad_(not spec.freeze_rgb)
        for p in self.silhouette_branch.parameters():
            p.requires_grad_(not spec.freeze_silhouette)

    @property
    def input_side(self) -> int:
        return self.spec.rgb_branch.input_side

    def fuse(self, rgb: torch.Tensor, sil: torch.Tensor) -> torch.Tensor:
        if self.spec.replicate_silhouette and sil.shape[1] == 1:
            sil = sil.expand(-1, 3, -1, -1)
        return torch.cat([self.rgb_branch(rgb), self.silhouette_branch(sil)], dim=1)

    def forward(self, rgb: torch.Tensor, sil: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.fuse(rgb, sil))


Model = Union[SingleInputNet, MultiInputNet]


def build_model(spec) -> Model:
    if isinstance(spec, SingleInputSpec):
        return SingleInputNet(spec)
    if isinstance(spec, MultiInputSpec):
        return MultiInputNet(spec)
    raise ValidationError(f"not a model spec: {spec!r}")


def spec_from_dict(d: dict):
    d = dict(d)
    topology = d.pop("topology")
    if topology == "single":
        return SingleInputSpec(backbone=BackboneSpec(**d["backbone"]), seed=d.get("seed", 0))
    if topology == "multi":
        d["rgb_branch"] = BackboneSpec(**d["rgb_branch"])
        d["silhouette_branch"] = BackboneSpec(**d["silhouette_branch"])
        d["hidden"] = tuple(d["hidden"])
        return MultiInputSpec(**d)
    raise ValidationError(f"unknown topology {topology!r}")


def is_multi(model: nn.Module) -> bool:
    return isinstance(model, MultiInputNet)


# -- forward helpers --------------------------------------------------------

def _check_batch(x: torch.Tensor, channels: int, side: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels or x.shape[2] != side or x.shape[3] != side:
        raise ValidationError(
            f"{what} batch has shape {tuple(x.shape)}, expected (N, {channels}, {side}, {side})")


def forward_single(model: SingleInputNet, batch: torch.Tensor) -> torch.Tensor:
    spec = model.spec.backbone
    _check_batch(batch, spec.input_channels, spec.input_side, "RGB")
    with torch.no_grad():
        return torch.softmax(model(batch), dim=1)


def forward_multi(model: MultiInputNet, rgb: torch.Tensor, sil: torch.Tensor,
                  rgb_ids: Optional[Sequence[str]] = None,
                  sil_ids: Optional[Sequence[str]] = None) -> torch.Tensor:
    if rgb_ids is not None or sil_ids is not None:
        if rgb_ids is None or sil_ids is None or len(rgb_ids) != len(sil_ids):
            raise ValidationError("rgb and silhouette batches must carry the same number of ids")
        for i, (a, b) in enumerate(zip(rgb_ids, sil_ids)):
            if a != b:
                raise ValidationError(f"batches misaligned at index {i}: rgb {a!r} vs silhouette {b!r}")
    if rgb.shape[0] != sil.shape[0]:
        raise ValidationError(f"batch sizes differ: rgb {rgb.shape[0]}, silhouette {sil.shape[0]}")
    _check_batch(rgb, 3, model.input_side, "RGB")
    _check_batch(sil, 1 if not model.spec.replicate_silhouette else sil.shape[1],
                 model.input_side, "silhouette")
    with torch.no_grad():
        return torch.softmax(model(rgb, sil), dim=1)


def predict_classes(probs: torch.Tensor) -> torch.Tensor:
    """Argmax per row; torch returns the first maximum, i.e. the lowest class code."""
    return torch.argmax(probs, dim=1)


# -- gradient check ---------------------------------------------------------

@dataclass
class ParamCheck:
    max_rel_error: float
    checked: int  # coordinates compared
    skipped: int  # coordinates whose probe crossed a ReLU/max-pool switch


def _activation_pattern(net: nn.Module, run) -> List[torch.Tensor]:
    """ReLU sign masks and max-pool argmax indices recorded during one forward pass."""
    pattern: List[torch.Tensor] = []

    def relu_hook(_m, _inp, out):
        pattern.append(out > 0)

    def pool_hook(m, inp, _out):
        _, idx = nn.functional.max_pool2d(inp[0], m.kernel_size, m.stride, m.padding,
                                          m.dilation, m.ceil_mode, return_indices=True)
        pattern.append(idx)

    handles = []
    for mod in net.modules():
        if isinstance(mod, nn.ReLU):
            handles.append(mod.register_forward_hook(relu_hook))
        elif isinstance(mod, nn.MaxPool2d):
            handles.append(mod.register_forward_hook(pool_hook))
    try:
        value = run()
    finally:
        for h in handles:
            h.remove()
    return [value] + pattern


def _same_pattern(a: List[torch.Tensor], b: List[torch.Tensor]) -> bool:
    return all(torch.equal(x, y) for x, y in zip(a[1:], b[1:]))


def gradient_check_details(model: nn.Module, inputs: Sequence[torch.Tensor], labels: torch.Tensor,
                           k: int = 5, step: float = 1e-4, seed: int = 0,
                           max_tries: int = 200) -> Dict[str, ParamCheck]:
    """Analytic vs central-difference gradients on ``k`` coordinates per parameter tensor.

    Runs on a float64 copy of ``model``. A central difference is only valid
    when no ReLU or max-pool switches inside ``[-step, +step]``; such
    coordinates are skipped and another one is drawn, up to ``max_tries``.
    """
    import copy

    net = copy.deepcopy(model).double()
    net.eval()
    inputs = [x.double() for x in inputs]
    loss_fn = nn.CrossEntropyLoss()

    def loss() -> torch.Tensor:
        return loss_fn(net(*inputs), labels)

    net.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    results: Dict[str, ParamCheck] = {}
    with torch.no_grad():
        base = _activation_pattern(net, loss)
        for name, p in net.named_parameters():
            if not p.requires_grad or p.grad is None:
                continue
            flat, grad = p.view(-1), p.grad.view(-1)
            want = min(k, flat.numel())
            order = rng.permutation(flat.numel())[:max_tries]
            worst, checked, skipped = 0.0, 0, 0
            for i in order:
                if checked == want:
                    break
                orig = flat[i].item()
                flat[i] = orig + step
                up = _activation_pattern(net, loss)
                flat[i] = orig - step
                down = _activation_pattern(net, loss)
                flat[i] = orig
                if not (_same_pattern(up, base) and _same_pattern(down, base)):
                    skipped += 1
                    continue
                numeric = (up[0].item() - down[0].item()) / (2 * step)
                analytic = grad[i].item()
                denom = max(abs(analytic), abs(numeric), 1e-8)
                worst = max(worst, abs(analytic - numeric) / denom)
                checked += 1
            results[name] = ParamCheck(worst, checked, skipped)
    return results


def gradient_check(model: nn.Module, inputs: Sequence[torch.Tensor], labels: torch.Tensor,
                   k: int = 5, step: float = 1e-4, seed: int = 0) -> float:
    details = gradient_check_details(model, inputs, labels, k, step, seed)
    short = [n for n, c in details.items() if c.checked < min(k, dict(model.named_parameters())[n].numel())]
    if short:
        raise ValidationError(f"could not find {k} kink-free coordinates for {short}")
    return max(c.max_rel_error for c in details.values())


# -- weights files ----------------------------------------------------------
# A zip holding one .npy per parameter plus ``manifest.json`` = {name: [dims...]}.

MANIFEST_ENTRY = "manifest.json"


def weights_bytes(model: nn.Module) -> bytes:
    state = model.state_dict()
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        manifest = {name: list(t.shape) for name, t in state.items()}
        zf.writestr(_zinfo(MANIFEST_ENTRY), json.dumps(manifest))
        for name, t in state.items():
            arr = io.BytesIO()
            np.save(arr, t.detach().cpu().numpy(), allow_pickle=False)
            zf.writestr(_zinfo(f"{name}.npy"), arr.getvalue())
    return buf.getvalue()


def _zinfo(name: str) -> zipfile.ZipInfo:
    # fixed timestamp keeps the archive byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_weights(model: nn.Module, path: PathLike) -> Path:
    return atomic_write_bytes(path, weights_bytes(model))


def load_weights(model: nn.Module, path: PathLike) -> None:
    """Validate the shape manifest against ``model`` before assigning anything."""
    with zipfile.ZipFile(path) as zf:
        manifest = json.loads(zf.read(MANIFEST_ENTRY))
        state = model.state_dict()
        for name, t in state.items():
            if name not in manifest:
                raise ValidationError(f"weights file {path} lacks layer {name!r}")
            if list(t.shape) != list(manifest[name]):
                raise ValidationError(f"shape mismatch at layer {name!r}: model {list(t.shape)}, "
                                      f"file {manifest[name]}")
        unexpected = [n for n in manifest if n not in state]
        if unexpected:
            raise ValidationError(f"weights file {path} has unknown layer {unexpected[0]!r}")
        arrays = {}
        for name in state:
            arr = np.load(io.BytesIO(zf.read(f"{name}.npy")), allow_pickle=False)
            if list(arr.shape) != list(manifest[name]):
                raise ValidationError(f"layer {name!r} array does not match its manifest shape")
            arrays[name] = torch.from_numpy(arr)
    model.load_state_dict(arrays)


def weights_hash(model: nn.Module) -> str:
    h = []
    for name, t in model.state_dict().items():
        h.append(name.encode())
        h.append(t.detach().cpu().contiguous().numpy().tobytes())
    return sha256_bytes(b"\0".join(h))

"""Point-pillar features, diamond context block and range-image encoder-decoder.

Parameters live in a flat ``dict[str, Tensor]``. Batch-norm running
statistics are stored there as well, as tensors that do not require
gradients, so a checkpoint captures the full inference state.
"""
from __future__ import annotations

import ast
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import ContractError, FormatError
from .pointcloud import PointCloud
from .projection import (
    PillarGridConfig,
    PointPixelMap,
    SphericalConfig,
    pillar_assign,
    pixel_coordinates,
    select_winners,
)
from .tensor import CIRCULAR, ZERO, Tensor, checkpoint, ops
from .tensor.conv import conv2d
from .tensor.core import get_default_dtype

RANGE_CHANNELS = ("x", "y", "z", "remission", "range")


@dataclass(frozen=True)
class ModelConfig:
    """Network hyper-parameters.

    ``channels`` is the encoder width at full resolution, ``point_features``
    the per-point input width of the pillar branch and ``projected_channels``
    the width of the features written into the range image. The encoder has
    ``num_stages`` stride-2 stages, so the image height and width must be
    multiples of ``2 ** num_stages``.
    """

    channels: int = 64
    point_features: int = 7
    projected_channels: int = 192
    num_classes: int = 19
    projection: SphericalConfig = field(default_factory=SphericalConfig)
    pillars: PillarGridConfig = field(default_factory=PillarGridConfig)
    num_stages: int = 4
    leaky_slope: float = 0.01
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    use_ppl: bool = True
    use_dcb: bool = True
    ppl_pool: str = "max"
    ppl_batch_norm: bool = True
    circular_padding: bool = True
    range_channels: tuple[str, ...] = RANGE_CHANNELS

    def __post_init__(self):
        for name in ("channels", "projected_channels", "num_classes", "num_stages"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.point_features != 7:
            raise ContractError("point features are x, y, z, remission and three offsets (7)")
        if self.projected_channels % 2:
            raise ContractError("projected_channels must be even")
        if self.ppl_pool not in ("max", "mean"):
            raise ContractError(f"unknown pillar pooling {self.ppl_pool!r}")
        unknown = set(self.range_channels) - set(RANGE_CHANNELS)
        if unknown or not self.range_channels:
            raise ContractError(f"range channels must be drawn from {RANGE_CHANNELS}")
        gx, gy = self.pillars.grid_size
        if self.use_ppl and (gx % 4 or gy % 4):
            raise ContractError("pillar grid sides must be multiples of 4")

    @property
    def stride(self) -> int:
        return 2 ** self.num_stages

    @property
    def image_channels(self) -> int:
        """Channels of the range image entering the 2-D network."""
        return self.projected_channels if self.use_ppl else len(self.range_channels)

    @property
    def padding(self):
        return CIRCULAR if self.circular_padding else ZERO

    def check_image(self, height: int, width: int) -> None:
        if height % self.stride or width % self.stride:
            raise ContractError(
                f"range image {height}x{width} not divisible by {self.stride}"
            )

    @classmethod
    def toy(cls, height: int = 16, width: int = 128, channels: int = 8, num_classes: int = 5,
            **overrides) -> "ModelConfig":
        """Small configuration for tests and the synthetic training set."""
        base = dict(
            channels=channels,
            projected_channels=2 * channels,
            num_classes=num_classes,
            projection=SphericalConfig.from_degrees(width, height, 3.0, 25.0),
            pillars=PillarGridConfig((2.5, 2.5, 10.0), (-40.0, -40.0, -5.0), (32, 32)),
        )
        base.update(overrides)
        return cls(**base)

    def to_text(self) -> str:
        """``key = value`` manifest; nested configs are flattened with dots."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, (SphericalConfig, PillarGridConfig)):
                for k, v in asdict(value).items():
                    lines.append(f"{f.name}.{k} = {v!r}")
            else:
                lines.append(f"{f.name} = {value!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        flat: dict[str, object] = {}
        for line in text.splitlines():
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"bad manifest line {line!r}")
            try:
                flat[key.strip()] = ast.literal_eval(value.strip())
            except (ValueError, SyntaxError) as exc:
                raise FormatError(f"bad manifest value in {line!r}") from exc
        nested: dict[str, dict] = {"projection": {}, "pillars": {}}
        top = {}
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if tail:
                if head not in nested:
                    raise FormatError(f"unknown manifest key {key!r}")
                nested[head][tail] = value
            else:
                top[key] = value
        known = {f.name for f in fields(cls)}
        if set(top) - known:
            raise FormatError(f"unknown manifest keys {sorted(set(top) - known)}")
        return cls(projection=SphericalConfig(**nested["projection"]),
                   pillars=PillarGridConfig(**nested["pillars"]), **top)


# ----------------------------------------------------------------------------
# parameters


def _conv_shape(cout: int, cin: int, k: int) -> tuple[int, ...]:
    return (cout, cin, k, k)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every parameter; batch-norm layers contribute four entries."""
    shapes: dict[str, tuple[int, ...]] = {}

    def bn(name, c):
        for suffix in ("gamma", "beta", "running_mean", "running_var"):
            shapes[f"{name}.{suffix}"] = (c,)

    def conv_bn(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = _conv_shape(cout, cin, k)
        bn(f"{name}.bn", cout)

    half = cfg.projected_channels // 2
    if cfg.use_ppl:
        shapes["ppl.fc1.weight"] = (cfg.point_features, half)
        shapes["ppl.fc1.bias"] = (half,)
        shapes["ppl.fc2.weight"] = (half, half)
        shapes["ppl.fc2.bias"] = (half,)
        if cfg.ppl_batch_norm:
            bn("ppl.fc1.bn", half)
            bn("ppl.fc2.bn", half)
        conv_bn("ppl.bev.down1", half, half)
        conv_bn("ppl.bev.down2", half, half)
        conv_bn("ppl.bev.up1", half, half)
        conv_bn("ppl.bev.up2", half, half)

    cin = cfg.image_channels
    if cfg.use_dcb:
        for b, bin_ in enumerate((cin, half, half), start=1):
            for k in (3, 5, 7):
                shapes[f"dcb.block{b}.k{k}.weight"] = _conv_shape(half, bin_, k)
            bn(f"dcb.block{b}.bn", half)
        shapes["dcb.skip_in.weight"] = _conv_shape(half, cin, 1)
        shapes["dcb.skip_out.weight"] = _conv_shape(half, half, 1)
        cin = cfg.projected_channels

    def res(name, c):
        conv_bn(f"{name}.conv1", c, c)
        conv_bn(f"{name}.conv2", c, c)

    c = cfg.channels
    conv_bn("stem", cin, c)
    for s in range(cfg.num_stages):
        res(f"enc{s}.res", c)
        conv_bn(f"enc{s}.down", c, 2 * c)
        c *= 2
    res("bottleneck", c)
    for s in reversed(range(cfg.num_stages)):
        conv_bn(f"dec{s}.up", c, c // 2)
        c //= 2
        res(f"dec{s}.res", c)
    shapes["head.weight"] = _conv_shape(cfg.num_classes, c, 1)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def is_buffer(name: str) -> bool:
    return name.endswith(".running_mean") or name.endswith(".running_var")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=None) -> dict[str, Tensor]:
    """Kaiming-uniform weights (bound ``sqrt(6 / fan_in)``), zero biases, unit BN scale."""
    dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".weight"):
            fan_in = shape[0] if len(shape) == 2 else int(np.prod(shape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        elif name.endswith(".gamma") or name.endswith(".running_var"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=not is_buffer(name), name=name)
    return params


def parameter_count(cfg: ModelConfig) -> int:
    """Number of trainable scalars (running statistics excluded)."""
    return int(sum(np.prod(s) for n, s in parameter_shapes(cfg).items() if not is_buffer(n)))


def check_params(params: dict[str, Tensor], cfg: ModelConfig) -> None:
    expected = parameter_shapes(cfg)
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ContractError(f"parameter names differ: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ContractError(f"{name} has shape {params[name].shape}, expected {shape}")


def save_model(path, params: dict[str, Tensor], cfg: ModelConfig) -> None:
    """Checkpoint plus a ``<path>.manifest`` text file describing ``cfg``."""
    checkpoint.save(path, {k: v.data for k, v in params.items()})
    with open(f"{path}.manifest", "w", encoding="utf-8") as fh:
        fh.write(cfg.to_text())


def load_model(path) -> tuple[dict[str, Tensor], ModelConfig]:
    with open(f"{path}.manifest", encoding="utf-8") as fh:
        cfg = ModelConfig.from_text(fh.read())
    arrays = checkpoint.load(path)
    params = {k: Tensor(v, requires_grad=not is_buffer(k), name=k) for k, v in arrays.items()}
    check_params(params, cfg)
    return params, cfg


# ----------------------------------------------------------------------------
# layers


def _bn(x: Tensor, params, name: str, cfg: ModelConfig, training: bool) -> Tensor:
    return ops.batch_norm(x, params[f"{name}.gamma"], params[f"{name}.beta"],
                          params[f"{name}.running_mean"], params[f"{name}.running_var"],
                          training=training, momentum=cfg.bn_momentum, eps=cfg.bn_eps)


def _conv_bn_act(x, params, name, cfg, training, stride=1, dilation=1, mode=None):
    mode = cfg.padding if mode is None else mode
    y = conv2d(x, params[f"{name}.weight"], stride=stride, dilation=dilation, mode=mode)
    return ops.leaky_relu(_bn(y, params, f"{name}.bn", cfg, training), cfg.leaky_slope)


def _residual(x, params, name, cfg, training):
    y = _conv_bn_act(x, params, f"{name}.conv1", cfg, training, dilation=1)
    y = conv2d(y, params[f"{name}.conv2.weight"], dilation=2, mode=cfg.padding)
    y = _bn(y, params, f"{name}.conv2.bn", cfg, training)
    return ops.leaky_relu(ops.add(y, x), cfg.leaky_slope)


def _fc(x, params, name, cfg, training):
    y = ops.add_bias(ops.matmul(x, params[f"{name}.weight"]), params[f"{name}.bias"])
    if cfg.ppl_batch_norm:
        y = _bn(y, params, f"{name}.bn", cfg, training)
    return ops.leaky_relu(y, cfg.leaky_slope)


def point_features(cloud: PointCloud, offsets: np.ndarray, dtype=None) -> np.ndarray:
    """``[x, y, z, remission, dx, dy, dz]`` per point."""
    dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
    feats = np.column_stack([cloud.xyz, cloud.remission, offsets])
    return feats.astype(dtype)


def ppl_forward(features: Tensor, pillar_index, params, cfg: ModelConfig,
                batch_size: int = 1, training: bool = True) -> Tensor:
    """Per-point features ``[N, projected_channels]`` from the pillar branch.

    ``pillar_index`` is the flat cell id of each point, offset by
    ``frame * n_cells`` when several frames share the call; ``-1`` marks
    points outside the grid, which receive zero pillar features.
    """
    pillar_index = np.asarray(pillar_index, dtype=np.int64)
    if features.ndim != 2 or features.shape[1] != cfg.point_features:
        raise ContractError(f"point features of shape {features.shape}, expected [N, {cfg.point_features}]")
    if pillar_index.shape != (features.shape[0],):
        raise ContractError("one pillar index per point is required")
    gx, gy = cfg.pillars.grid_size
    n_cells = batch_size * gx * gy
    local = _fc(features, params, "ppl.fc1", cfg, training)
    per_pillar = _fc(local, params, "ppl.fc2", cfg, training)
    pool = ops.segment_max if cfg.ppl_pool == "max" else ops.segment_mean
    pooled = pool(per_pillar, pillar_index, n_cells)
    half = local.shape[1]
    bev = ops.transpose(ops.reshape(pooled, (batch_size, gy, gx, half)), (0, 3, 1, 2))
    bev = _conv_bn_act(bev, params, "ppl.bev.down1", cfg, training, stride=2, mode=ZERO)
    bev = _conv_bn_act(bev, params, "ppl.bev.down2", cfg, training, stride=2, mode=ZERO)
    bev = _conv_bn_act(ops.upsample_nearest(bev), params, "ppl.bev.up1", cfg, training, mode=ZERO)
    bev = _conv_bn_act(ops.upsample_nearest(bev), params, "ppl.bev.up2", cfg, training, mode=ZERO)
    cells = ops.reshape(ops.transpose(bev, (0, 2, 3, 1)), (n_cells, half))
    gathered = ops.gather_rows(cells, pillar_index)
    return ops.concat([local, gathered], axis=1)


def _diamond(x, params, name, cfg, training):
    branches = [conv2d(x, params[f"{name}.k{k}.weight"], mode=cfg.padding) for k in (3, 5, 7)]
    return ops.leaky_relu(_bn(ops.add_n(branches), params, f"{name}.bn", cfg, training),
                          cfg.leaky_slope)


def dcb_forward(image: Tensor, params, cfg: ModelConfig, training: bool = True) -> Tensor:
    """Diamond context block on ``[B, C_in, H, W]`` (or ``[C_in, H, W]``)."""
    squeeze = image.ndim == 3
    x = ops.reshape(image, (1,) + image.shape) if squeeze else image
    expected = params["dcb.skip_in.weight"].shape[1]
    if x.ndim != 4 or x.shape[1] != expected:
        raise ContractError(f"diamond block input {image.shape} does not have {expected} channels")
    out1 = _diamond(x, params, "dcb.block1", cfg, training)
    out2 = _diamond(out1, params, "dcb.block2", cfg, training)
    out2 = ops.add(out2, conv2d(x, params["dcb.skip_in.weight"], mode=cfg.padding))
    out3 = _diamond(out2, params, "dcb.block3", cfg, training)
    y = ops.concat([out3, conv2d(out2, params["dcb.skip_out.weight"], mode=cfg.padding)], axis=1)
    return ops.reshape(y, y.shape[1:]) if squeeze else y


def encdec_forward(image: Tensor, params, cfg: ModelConfig, training: bool = True) -> Tensor:
    """Logits ``[B, num_classes, H, W]`` (or ``[num_classes, H, W]``)."""
    squeeze = image.ndim == 3
    x = ops.reshape(image, (1,) + image.shape) if squeeze else image
    if x.ndim != 4:
        raise ContractError(f"encoder input must be 3-d or 4-d, got {image.shape}")
    cfg.check_image(x.shape[2], x.shape[3])
    x = _conv_bn_act(x, params, "stem", cfg, training)
    skips = []
    for s in range(cfg.num_stages):
        x = _residual(x, params, f"enc{s}.res", cfg, training)
        skips.append(x)
        x = _conv_bn_act(x, params, f"enc{s}.down", cfg, training, stride=2)
    x = _residual(x, params, "bottleneck", cfg, training)
    for s in reversed(range(cfg.num_stages)):
        x = _conv_bn_act(ops.upsample_nearest(x), params, f"dec{s}.up", cfg, training)
        x = _residual(ops.add(x, skips[s]), params, f"dec{s}.res", cfg, training)
    logits = conv2d(x, params["head.weight"], params["head.bias"], mode=cfg.padding)
    return ops.reshape(logits, logits.shape[1:]) if squeeze else logits


# ----------------------------------------------------------------------------
# full pipeline


class FrameInputs(NamedTuple):
    """Geometry of one frame that does not depend on parameters."""

    features: np.ndarray       # [N, point_features]
    pillar_index: np.ndarray   # [N], -1 outside the grid
    range_features: np.ndarray  # [N, len(range_channels)]
    pixel_map: PointPixelMap
    winner: np.ndarray         # [H*W] point index per pixel, -1 when empty

    @property
    def valid_mask(self) -> np.ndarray:
        return self.winner >= 0

    @property
    def num_points(self) -> int:
        return self.features.shape[0]


def prepare_frame(cloud: PointCloud, cfg: ModelConfig, dtype=None) -> FrameInputs:
    if cloud.count == 0:
        raise ContractError("cannot segment an empty cloud")
    proj = cfg.projection
    grid = pillar_assign(cloud, cfg.pillars)
    pmap = pixel_coordinates(cloud.xyz, proj)
    ranges = cloud.range
    winner = select_winners(pmap.flat_index(proj.width), ranges, proj.height * proj.width)
    columns = {"x": cloud.xyz[:, 0], "y": cloud.xyz[:, 1], "z": cloud.xyz[:, 2],
               "remission": cloud.remission, "range": ranges}
    dtype = np.dtype(dtype) if dtype is not None else get_default_dtype()
    range_feats = np.column_stack([columns[c] for c in cfg.range_channels]).astype(dtype)
    return FrameInputs(point_features(cloud, grid.offsets, dtype), grid.pillar_index,
                       range_feats, pmap, winner)


class ForwardOutput(NamedTuple):
    pixel_logits: Tensor       # [B, num_classes, H, W]
    point_logits: list         # per frame, Tensor [N_b, num_classes]


def _offset(index: np.ndarray, shift: int) -> np.ndarray:
    return np.where(index >= 0, index + shift, -1)


def forward_frames(frames: Sequence[FrameInputs], params, cfg: ModelConfig,
                   training: bool = True) -> ForwardOutput:
    """Run a batch of frames through the network.

    Points are projected winner-takes-pixel; empty pixels carry zeros. The
    pixel logits are gathered back to every point, so points sharing a pixel
    share logits and points that fall outside the image get zeros.
    """
    if not frames:
        raise ContractError("empty batch")
    h, w = cfg.projection.height, cfg.projection.width
    cfg.check_image(h, w)
    n_pix = h * w
    b = len(frames)
    starts = np.cumsum([0] + [f.num_points for f in frames])
    winners = np.concatenate([_offset(f.winner, int(s)) for f, s in zip(frames, starts)])
    if cfg.use_ppl:
        n_cells = cfg.pillars.n_cells
        feats = Tensor(np.concatenate([f.features for f in frames]))
        pillars = np.concatenate([_offset(f.pillar_index, i * n_cells) for i, f in enumerate(frames)])
        point_feats = ppl_forward(feats, pillars, params, cfg, batch_size=b, training=training)
    else:
        point_feats = Tensor(np.concatenate([f.range_features for f in frames]))
    c = point_feats.shape[1]
    pixels = ops.gather_rows(point_feats, winners)
    image = ops.transpose(ops.reshape(pixels, (b, h, w, c)), (0, 3, 1, 2))
    if cfg.use_dcb:
        image = dcb_forward(image, params, cfg, training)
    logits = encdec_forward(image, params, cfg, training)
    k = cfg.num_classes
    flat_logits = ops.reshape(ops.transpose(logits, (0, 2, 3, 1)), (b * n_pix, k))
    per_point = []
    for i, f in enumerate(frames):
        index = _offset(f.pixel_map.flat_index(w), i * n_pix)
        per_point.append(ops.gather_rows(flat_logits, index))
    return ForwardOutput(logits, per_point)


def tornado_forward(cloud: PointCloud, params, cfg: ModelConfig, training: bool = False) -> Tensor:
    """Per-point logits ``[N, num_classes]`` for one cloud."""
    return forward_frames([prepare_frame(cloud, cfg)], params, cfg, training).point_logits[0]


def feature_shapes(cfg: ModelConfig, height: int, width: int) -> dict[str, tuple[int, int, int]]:
    """Channel and spatial size after each stage, without running the network."""
    cfg.check_image(height, width)
    shapes = {"input": (cfg.image_channels, height, width)}
    c = cfg.projected_channels if cfg.use_dcb else cfg.image_channels
    if cfg.use_dcb:
        shapes["dcb"] = (c, height, width)
    c, hh, ww = cfg.channels, height, width
    shapes["stem"] = (c, hh, ww)
    for s in range(cfg.num_stages):
        c, hh, ww = 2 * c, hh // 2, ww // 2
        shapes[f"enc{s}"] = (c, hh, ww)
    for s in reversed(range(cfg.num_stages)):
        c, hh, ww = c // 2, hh * 2, ww * 2
        shapes[f"dec{s}"] = (c, hh, ww)
    shapes["logits"] = (cfg.num_classes, height, width)
    return shapes


def with_num_classes(cfg: ModelConfig, num_classes: int) -> ModelConfig:
    return replace(cfg, num_classes=num_classes)

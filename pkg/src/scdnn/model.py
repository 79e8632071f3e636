"""Model assembly: a 1-D ResNet backbone whose stage outputs pass through
spectral enhancement blocks, pooled into a linear classifier head.

Architecture, front to back:

    stem:   conv(k=7, stride=2, pad=3) -> batchnorm -> relu
            [-> maxpool(k=3, stride=2, pad=1) when enabled]
    stages: residual blocks per backbone depth; stages after the first
            downsample by stride 2 with a 1x1 projection shortcut
    per stage: optional SATSE block on the stage output
    head:   concat(avg-pool, max-pool) -> linear -> logits

Binary model files: magic "SCDN", version u16 LE, u32-length-prefixed
UTF-8 config (key=value lines), u32 entry count, then per entry a
u16-length-prefixed name, dtype u8 (0 = f64, 1 = f32), rank u8, dims u32
each, and the raw little-endian values. Entries cover both trainable
parameters and batchnorm running statistics, so a round trip is bitwise.
"""

import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .autodiff import ShapeError, Tensor
from .layers import (
    BatchNorm1d,
    Conv1d,
    Linear,
    max_pool1d,
    pooled_features,
    relu,
)
from .satse import MASK_INDEX_MODES, SatseBlock

__all__ = [
    "ModelConfig",
    "ScdnnModel",
    "ModelIOError",
    "BACKBONES",
    "build_model",
    "model_forward",
    "save_model",
    "load_model",
    "tiny_config",
]

MODEL_MAGIC = b"SCDN"
MODEL_VERSION = 1

# backbone name -> (block kind, blocks per stage, channel expansion)
BACKBONES = {
    "resnet18": ("basic", (2, 2, 2, 2), 1),
    "resnet34": ("basic", (3, 4, 6, 3), 1),
    "resnet50": ("bottleneck", (3, 4, 6, 3), 4),
}

_DEFAULT_WIDTHS = (64, 128, 256, 512)


class ModelIOError(IOError):
    """Raised for malformed or truncated model files."""


@dataclass
class ModelConfig:
    """Complete architecture description; serializable as key=value lines."""

    n_classes: int
    n_leads: int = 12
    backbone: str = "resnet18"
    satse_blocks_enabled: tuple = (True, True, True, True)
    fixed_phi: float | None = None
    mask_index_mode: str = "symmetric"
    double_softmax: bool = False
    stem_maxpool: bool = True
    precision: str = "real64"
    input_length: int | None = None
    n_stages: int = 4
    stage_widths: tuple | None = None
    phi_init: float = 0.4
    gamma_init: float = 0.5
    tie_lambdas: bool = False

    def __post_init__(self):
        self.satse_blocks_enabled = tuple(bool(v) for v in self.satse_blocks_enabled)
        if self.stage_widths is not None:
            self.stage_widths = tuple(int(v) for v in self.stage_widths)
        self.validate()

    def validate(self):
        if self.n_classes < 1:
            raise ValueError("at least one class is required")
        if self.n_leads < 1:
            raise ValueError("n_leads must be positive")
        if self.backbone not in BACKBONES:
            raise ValueError(
                f"unsupported backbone {self.backbone!r}; "
                f"choose from {sorted(BACKBONES)}"
            )
        if self.fixed_phi is not None and not 0.0 < self.fixed_phi < 1.0:
            raise ValueError(f"fixed_phi must lie in (0, 1), got {self.fixed_phi}")
        if self.mask_index_mode not in MASK_INDEX_MODES:
            raise ValueError(f"unknown mask_index_mode {self.mask_index_mode!r}")
        if self.precision not in ("real32", "real64"):
            raise ValueError(f"precision must be real32 or real64")
        if not 1 <= self.n_stages <= 4:
            raise ValueError("n_stages must be between 1 and 4")
        if len(self.satse_blocks_enabled) != 4:
            raise ValueError("satse_blocks_enabled must list 4 booleans")
        if self.stage_widths is not None and len(self.stage_widths) != self.n_stages:
            raise ValueError("stage_widths must supply one width per stage")
        if self.input_length is not None and self.input_length < 8:
            raise ValueError("input_length must be at least 8")

    @property
    def dtype(self):
        return np.float64 if self.precision == "real64" else np.float32

    def widths(self):
        return (
            self.stage_widths
            if self.stage_widths is not None
            else _DEFAULT_WIDTHS[: self.n_stages]
        )

    def to_text(self):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(int(x)) if isinstance(x, bool) else str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno} is not key=value: {line!r}")
            k, v = line.split("=", 1)
            raw[k.strip()] = v.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name not in raw:
                continue
            v = raw.pop(f.name)
            if v == "None":
                kwargs[f.name] = None
            elif f.name in ("satse_blocks_enabled",):
                kwargs[f.name] = tuple(x in ("1", "True", "true") for x in v.split(","))
            elif f.name in ("stage_widths",):
                kwargs[f.name] = tuple(int(x) for x in v.split(","))
            elif f.name in ("n_classes", "n_leads", "input_length", "n_stages"):
                kwargs[f.name] = int(v)
            elif f.name in ("fixed_phi", "phi_init", "gamma_init"):
                kwargs[f.name] = float(v)
            elif f.name in ("double_softmax", "stem_maxpool", "tie_lambdas"):
                kwargs[f.name] = v in ("1", "True", "true")
            else:
                kwargs[f.name] = v
        if raw:
            raise ValueError(f"unknown config keys: {sorted(raw)}")
        return cls(**kwargs)

    def with_satse_count(self, count):
        """Enable the first `count` blocks, front stages first."""
        if not 0 <= count <= 4:
            raise ValueError("satse block count must be 0..4")
        return replace(self, satse_blocks_enabled=tuple(i < count for i in range(4)))


def tiny_config(n_classes=3, n_leads=12, input_length=64, widths=(4, 8),
                **overrides):
    """A two-stage configuration small enough for exhaustive gradient checks."""
    return ModelConfig(
        n_classes=n_classes,
        n_leads=n_leads,
        input_length=input_length,
        n_stages=len(widths),
        stage_widths=tuple(widths),
        **overrides,
    )


def _conv_out_len(length, kernel, stride, padding):
    return (length + 2 * padding - kernel) // stride + 1


class _BasicBlock:
    """conv3-bn-relu-conv3-bn plus shortcut; stride applies to the first conv."""

    expansion = 1

    def __init__(self, c_in, width, stride, rng, dtype):
        c_out = width * self.expansion
        self.conv1 = Conv1d(c_in, width, 3, stride, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm1d(width, dtype=dtype)
        self.conv2 = Conv1d(width, c_out, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm1d(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.proj = Conv1d(c_in, c_out, 1, stride, 0, bias=False, rng=rng,
                               dtype=dtype)
            self.proj_bn = BatchNorm1d(c_out, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x, mode, update_running):
        h = relu(self.bn1.forward(self.conv1.forward(x), mode, update_running))
        h = self.bn2.forward(self.conv2.forward(h), mode, update_running)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj_bn.forward(
                self.proj.forward(x), mode, update_running
            )
        return relu(h + shortcut)

    def named_layers(self):
        out = {"conv1": self.conv1, "bn1": self.bn1,
               "conv2": self.conv2, "bn2": self.bn2}
        if self.proj is not None:
            out["proj"] = self.proj
            out["proj_bn"] = self.proj_bn
        return out


class _BottleneckBlock:
    """1x1 reduce, 3x3, 1x1 expand (x4), as in the deeper backbone variants."""

    expansion = 4

    def __init__(self, c_in, width, stride, rng, dtype):
        c_out = width * self.expansion
        self.conv1 = Conv1d(c_in, width, 1, 1, 0, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm1d(width, dtype=dtype)
        self.conv2 = Conv1d(width, width, 3, stride, 1, bias=False, rng=rng,
                            dtype=dtype)
        self.bn2 = BatchNorm1d(width, dtype=dtype)
        self.conv3 = Conv1d(width, c_out, 1, 1, 0, bias=False, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm1d(c_out, dtype=dtype)
        if stride != 1 or c_in != c_out:
            self.proj = Conv1d(c_in, c_out, 1, stride, 0, bias=False, rng=rng,
                               dtype=dtype)
            self.proj_bn = BatchNorm1d(c_out, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x, mode, update_running):
        h = relu(self.bn1.forward(self.conv1.forward(x), mode, update_running))
        h = relu(self.bn2.forward(self.conv2.forward(h), mode, update_running))
        h = self.bn3.forward(self.conv3.forward(h), mode, update_running)
        shortcut = x
        if self.proj is not None:
            shortcut = self.proj_bn.forward(
                self.proj.forward(x), mode, update_running
            )
        return relu(h + shortcut)

    def named_layers(self):
        out = {"conv1": self.conv1, "bn1": self.bn1, "conv2": self.conv2,
               "bn2": self.bn2, "conv3": self.conv3, "bn3": self.bn3}
        if self.proj is not None:
            out["proj"] = self.proj
            out["proj_bn"] = self.proj_bn
        return out


class ScdnnModel:
    """Backbone + spectral enhancement + classifier with a stable name registry."""

    def __init__(self, config, seed=0):
        if config.input_length is None:
            raise ValueError("config.input_length must be set before building")
        self.config = config
        self.seed = seed
        dtype = config.dtype
        rng = np.random.default_rng(seed)
        kind, blocks_per_stage, expansion = BACKBONES[config.backbone]
        block_cls = _BasicBlock if kind == "basic" else _BottleneckBlock
        widths = config.widths()

        self.stem_conv = Conv1d(config.n_leads, widths[0], 7, 2, 3, bias=False,
                                rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm1d(widths[0], dtype=dtype)

        length = _conv_out_len(config.input_length, 7, 2, 3)
        if config.stem_maxpool:
            length = _conv_out_len(length, 3, 2, 1)

        shared_low = shared_high = None
        if config.tie_lambdas:
            shared_low = Tensor(np.asarray(0.0, dtype), requires_grad=True)
            shared_high = Tensor(np.asarray(0.0, dtype), requires_grad=True)
        self._shared_lambdas = (shared_low, shared_high)

        self.stages = []
        self.satse = []
        self.stage_shapes = []
        c_in = widths[0]
        for s in range(config.n_stages):
            stride = 1 if s == 0 else 2
            blocks = []
            for b in range(blocks_per_stage[s]):
                blocks.append(
                    block_cls(c_in, widths[s], stride if b == 0 else 1, rng, dtype)
                )
                c_in = widths[s] * expansion
            length = _conv_out_len(length, 3, stride, 1) if stride == 2 else length
            if length < 1:
                raise ValueError(
                    f"input_length {config.input_length} is too short for "
                    f"{config.n_stages} stages"
                )
            self.stages.append(blocks)
            self.stage_shapes.append((c_in, length))
            if config.satse_blocks_enabled[s]:
                self.satse.append(
                    SatseBlock(
                        c_in,
                        length,
                        phi_init=(config.fixed_phi if config.fixed_phi is not None
                                  else config.phi_init),
                        gamma_init=config.gamma_init,
                        mask_index_mode=config.mask_index_mode,
                        train_phi=config.fixed_phi is None,
                        dtype=dtype,
                        lambda_low=shared_low,
                        lambda_high=shared_high,
                    )
                )
            else:
                self.satse.append(None)

        self.head = Linear(2 * c_in, config.n_classes, rng=rng, dtype=dtype)
        self._build_registry()

    # -- registry --------------------------------------------------------

    def _build_registry(self):
        params = {}
        buffers = []
        decay_exempt = set()

        def add_layer(prefix, layer):
            if isinstance(layer, Conv1d):
                params[f"{prefix}.weight"] = layer.weight
                if layer.bias is not None:
                    params[f"{prefix}.bias"] = layer.bias
            elif isinstance(layer, BatchNorm1d):
                params[f"{prefix}.scale"] = layer.scale
                params[f"{prefix}.shift"] = layer.shift
                decay_exempt.update({f"{prefix}.scale", f"{prefix}.shift"})
                buffers.append((f"{prefix}.running_mean", layer, "running_mean"))
                buffers.append((f"{prefix}.running_var", layer, "running_var"))
            elif isinstance(layer, Linear):
                params[f"{prefix}.weight"] = layer.weight
                params[f"{prefix}.bias"] = layer.bias

        add_layer("stem.conv", self.stem_conv)
        add_layer("stem.bn", self.stem_bn)
        for s, blocks in enumerate(self.stages):
            for b, block in enumerate(blocks):
                for lname, layer in block.named_layers().items():
                    add_layer(f"stage{s + 1}.block{b + 1}.{lname}", layer)
            sat = self.satse[s]
            if sat is not None:
                prefix = f"satse{s + 1}"
                params[f"{prefix}.phi"] = sat.phi
                params[f"{prefix}.gamma"] = sat.gamma
                params[f"{prefix}.weight_re"] = sat.weight_re
                params[f"{prefix}.weight_im"] = sat.weight_im
                decay_exempt.update({f"{prefix}.phi", f"{prefix}.gamma"})
        shared_low, shared_high = self._shared_lambdas
        if shared_low is not None:
            params["satse.lambda_low"] = shared_low
            params["satse.lambda_high"] = shared_high
            decay_exempt.update({"satse.lambda_low", "satse.lambda_high"})
        else:
            for s, sat in enumerate(self.satse):
                if sat is not None:
                    params[f"satse{s + 1}.lambda_low"] = sat.lambda_low
                    params[f"satse{s + 1}.lambda_high"] = sat.lambda_high
                    decay_exempt.update(
                        {f"satse{s + 1}.lambda_low", f"satse{s + 1}.lambda_high"}
                    )
        add_layer("head.fc", self.head)

        self._params = params
        self._buffers = buffers
        self.weight_decay_exempt = frozenset(decay_exempt)

    def named_parameters(self):
        """All leaf tensors, including frozen ones, keyed by stable names."""
        return dict(self._params)

    def trainable_parameters(self):
        return {k: v for k, v in self._params.items() if v.requires_grad}

    def named_buffers(self):
        """Live views of non-trainable state (batchnorm running statistics)."""
        return {name: getattr(obj, attr) for name, obj, attr in self._buffers}

    def parameter_count(self):
        return sum(p.data.size for p in self._params.values())

    # -- forward ---------------------------------------------------------

    def forward(self, x, mode="eval", update_running=None):
        """Run (B, n_leads, L) input to (B, n_classes) logits."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.dtype))
        if x.data.ndim != 3 or x.data.shape[1] != self.config.n_leads:
            raise ShapeError(
                f"expected input with {self.config.n_leads} leads "
                f"(B, {self.config.n_leads}, L), got {x.data.shape}"
            )
        if update_running is None:
            update_running = mode == "train"
        h = relu(self.stem_bn.forward(self.stem_conv.forward(x), mode,
                                      update_running))
        if self.config.stem_maxpool:
            h = max_pool1d(h, 3, 2, 1)
        for s, blocks in enumerate(self.stages):
            try:
                for block in blocks:
                    h = block.forward(h, mode, update_running)
                if self.satse[s] is not None:
                    h = self.satse[s].forward(h)
            except FloatingPointError as exc:
                raise FloatingPointError(f"stage {s + 1}: {exc}") from exc
            if not np.all(np.isfinite(h.data)):
                raise FloatingPointError(
                    f"non-finite activations after stage {s + 1}"
                )
        return self.head.forward(pooled_features(h))

    # -- parameter maintenance --------------------------------------------

    def clamp_satse(self):
        for sat in self.satse:
            if sat is not None:
                sat.clamp()

    def satse_snapshot(self):
        """Per-stage (phi, gamma, lambda_low, lambda_high), padded to 4 stages.

        Disabled or absent blocks report the configured initial values so the
        trace keeps a fixed column layout.
        """
        rows = []
        for s in range(4):
            sat = self.satse[s] if s < len(self.satse) else None
            if sat is None:
                phi = (self.config.fixed_phi if self.config.fixed_phi is not None
                       else self.config.phi_init)
                rows.append((phi, self.config.gamma_init, 0.0, 0.0))
            else:
                r = sat.report()
                rows.append((r["phi"], r["gamma"], r["lambda_low"],
                             r["lambda_high"]))
        return rows

    def zero_grad(self):
        for p in self._params.values():
            p.grad = None


def build_model(config, seed=0):
    """Deterministic construction: identical seeds give identical parameters."""
    return ScdnnModel(config, seed)


def model_forward(model, batch, mode="eval"):
    return model.forward(batch, mode)


# -- persistence --------------------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}
_CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def _entries(model):
    for name, p in model._params.items():
        yield name, p.data
    for name in sorted(dict(model.named_buffers())):
        yield name, model.named_buffers()[name]


def save_model(model, path):
    """Write every parameter and running statistic, bitwise recoverable."""
    chunks = [MODEL_MAGIC, struct.pack("<H", MODEL_VERSION)]
    cfg = model.config.to_text().encode("utf-8")
    chunks.append(struct.pack("<I", len(cfg)))
    chunks.append(cfg)
    entries = list(_entries(model))
    chunks.append(struct.pack("<I", len(entries)))
    for name, arr in entries:
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        code = _DTYPE_CODES[arr.dtype]
        chunks.append(struct.pack("<BB", code, arr.ndim))
        for d in arr.shape:
            chunks.append(struct.pack("<I", d))
        chunks.append(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise ModelIOError(
                f"truncated model file: needed {n} bytes for {what} at "
                f"offset {self.offset}"
            )
        out = self.data[self.offset : self.offset + n]
        self.offset += n
        return out

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_model(path):
    """Rebuild a model from disk; any structural mismatch raises ModelIOError."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MODEL_MAGIC:
        raise ModelIOError(f"bad magic: not a model file ({path})")
    version = r.u16("version")
    if version != MODEL_VERSION:
        raise ModelIOError(f"unsupported model format version {version}")
    cfg_len = r.u32("config length")
    try:
        config = ModelConfig.from_text(r.take(cfg_len, "config").decode("utf-8"))
    except ValueError as exc:
        raise ModelIOError(f"invalid embedded config: {exc}") from exc

    model = build_model(config, seed=0)
    params = model._params
    buffers = {name: (obj, attr) for name, obj, attr in model._buffers}
    expected = set(params) | set(buffers)
    seen = set()
    n_entries = r.u32("entry count")
    for _ in range(n_entries):
        name = r.take(r.u16("name length"), "name").decode("utf-8")
        code, rank = struct.unpack("<BB", r.take(2, "dtype/rank"))
        if code not in _CODE_DTYPES:
            raise ModelIOError(f"unknown dtype code {code} for entry {name!r}")
        shape = tuple(r.u32("dim") for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = r.take(count * _CODE_DTYPES[code].itemsize, f"values of {name!r}")
        arr = np.frombuffer(raw, dtype=_CODE_DTYPES[code]).reshape(shape).copy()
        if name in params:
            if params[name].data.shape != arr.shape:
                raise ModelIOError(
                    f"entry {name!r} has shape {arr.shape}, model expects "
                    f"{params[name].data.shape}"
                )
            params[name].data = arr.astype(params[name].data.dtype, copy=False)
        elif name in buffers:
            obj, attr = buffers[name]
            setattr(obj, attr, arr.astype(getattr(obj, attr).dtype, copy=False))
        else:
            raise ModelIOError(f"unexpected entry {name!r} in model file")
        seen.add(name)
    missing = expected - seen
    if missing:
        raise ModelIOError(f"model file is missing entries: {sorted(missing)[:5]}")
    return model

"""Full network assembly and checkpoint persistence.

The encoder is a plain strided CNN (no pretrained backbone): each of the
four stages halves the resolution with a stride-2 3x3 conv, refines with
a stride-1 3x3 conv (layer norm + GeLU after both), and projects to the
shared channel width with a 1x1 conv.  The decoder applies scale-aware
attention to the four stages, walks back up through adaptive
up-attention, and emits one single-logit head per stage, all resized to
the input resolution.  Head 1 (finest stage) is the inference output.

Checkpoints serialize the parameter store plus the canonical config
text; a SHA-256 fingerprint of that text guards against loading weights
into a structurally different model.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .blocks import (
    STAGES,
    LsaConfig,
    ParamStore,
    adaptive_up_attention,
    init_adaptive_up_attention,
    init_scale_aware_attention,
    local_scale_attention_param_count,
    scale_aware_attention,
    scale_aware_attention_param_count,
    _he_conv,
    _layernorm,
)
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    IncompatibleCheckpointError,
    IntegrityError,
)
from .optim import AdamState
from .tensor import Rng, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; stage count is fixed at four."""

    in_channels: int = 1
    channels: int = 64
    input_size: tuple[int, int] = (64, 64)
    lsa: Optional[LsaConfig] = None
    seed: int = 0
    sa2_enabled: bool = True

    def __post_init__(self):
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels must be 1 or 3, got {self.in_channels}")
        h, w = self.input_size
        if h < 32 or w < 32:
            raise ConfigError(f"input size must be at least 32x32, got {h}x{w}")
        if h % 16 != 0 or w % 16 != 0:
            raise ConfigError(f"input size must be divisible by 16, got {h}x{w}")
        if self.lsa is None:
            object.__setattr__(self, "lsa", LsaConfig(channels=self.channels))
        elif self.lsa.channels != self.channels:
            raise ConfigError(
                f"lsa.channels ({self.lsa.channels}) must equal model "
                f"channels ({self.channels})")

    def canonical(self) -> str:
        """Deterministic text form; the checkpoint fingerprint hashes this."""
        kernels = ",".join(str(k) for k in self.lsa.kernel_sizes)
        lines = [
            f"channels = {self.channels}",
            f"in_channels = {self.in_channels}",
            f"input_h = {self.input_size[0]}",
            f"input_w = {self.input_size[1]}",
            f"lsa.groups = {self.lsa.groups}",
            f"lsa.kernel_sizes = {kernels}",
            f"sa2_enabled = {'true' if self.sa2_enabled else 'false'}",
            f"seed = {self.seed}",
            f"stages = {STAGES}",
        ]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @staticmethod
    def from_canonical(text: str) -> "ModelConfig":
        fields: dict[str, str] = {}
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        try:
            channels = int(fields["channels"])
            kernels = tuple(int(k) for k in fields["lsa.kernel_sizes"].split(","))
            if int(fields["stages"]) != STAGES:
                raise ConfigError(
                    f"stage count is fixed at {STAGES}, got {fields['stages']}")
            return ModelConfig(
                in_channels=int(fields["in_channels"]),
                channels=channels,
                input_size=(int(fields["input_h"]), int(fields["input_w"])),
                lsa=LsaConfig(channels=channels,
                              groups=int(fields["lsa.groups"]),
                              kernel_sizes=kernels),
                seed=int(fields["seed"]),
                sa2_enabled=fields.get("sa2_enabled", "true") == "true",
            )
        except KeyError as missing:
            raise ConfigError(f"config text lacks key {missing}") from None


@dataclass
class ModelOutput:
    """Per-stage logits, finest first, all at the input resolution."""

    logits: list[Tensor]

    def probability_map(self) -> Tensor:
        """Foreground probabilities from the inference head (stage 1)."""
        return T.sigmoid(self.logits[0])


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def init_model_params(cfg: ModelConfig, dtype=T.F32) -> ParamStore:
    """Deterministic He-normal initialization of every parameter."""
    rng = Rng(cfg.seed)
    store = ParamStore()
    c = cfg.channels
    for s in range(1, STAGES + 1):
        cin = cfg.in_channels if s == 1 else c
        _he_conv(store, f"enc{s}.down", c, cin, 3, rng, dtype)
        _layernorm(store, f"enc{s}.norm1", c, dtype)
        _he_conv(store, f"enc{s}.conv", c, c, 3, rng, dtype)
        _layernorm(store, f"enc{s}.norm2", c, dtype)
        _he_conv(store, f"enc{s}.proj", c, c, 1, rng, dtype)
    if cfg.sa2_enabled:
        init_scale_aware_attention(store, "sa2", cfg.lsa, rng, dtype)
    for s in range(STAGES, 0, -1):
        init_adaptive_up_attention(store, f"aua{s}", c, deepest=(s == STAGES),
                                   rng=rng, dtype=dtype)
    for s in range(1, STAGES + 1):
        _he_conv(store, f"head{s}", 1, c, 1, rng, dtype)
    return store


def model_param_count(cfg: ModelConfig) -> int:
    """Closed-form total parameter count for a config."""
    c = cfg.channels
    enc_stage1 = (9 * c * cfg.in_channels + c) + 2 * c \
        + (9 * c * c + c) + 2 * c + (c * c + c)
    enc_rest = (9 * c * c + c) + 2 * c + (9 * c * c + c) + 2 * c + (c * c + c)
    total = enc_stage1 + (STAGES - 1) * enc_rest
    if cfg.sa2_enabled:
        total += scale_aware_attention_param_count(cfg.lsa)
    total += (9 * c * c + c) + 2 * c                      # deepest decoder
    total += (STAGES - 1) * ((c * c + c) + (18 * c * c + c) + 2 * c)
    total += STAGES * (c + 1)                             # heads
    return total


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def encoder_forward(image: Tensor, store: ParamStore,
                    cfg: ModelConfig) -> list[Tensor]:
    """Produce the four projected stage features, finest first."""
    h, w = cfg.input_size
    if image.ndim != 4 or image.shape[1] != cfg.in_channels \
            or image.shape[2] != h or image.shape[3] != w:
        raise DimensionError(
            f"image shape {image.shape} does not match configured "
            f"(N, {cfg.in_channels}, {h}, {w})")
    stages = []
    t = image
    for s in range(1, STAGES + 1):
        t = T.conv2d(t, store[f"enc{s}.down.weight"],
                     store[f"enc{s}.down.bias"], stride=2, pad=1)
        t = T.gelu(T.layernorm_c(t, store[f"enc{s}.norm1.gamma"],
                                 store[f"enc{s}.norm1.beta"]))
        t = T.conv2d(t, store[f"enc{s}.conv.weight"],
                     store[f"enc{s}.conv.bias"], stride=1, pad=1)
        t = T.gelu(T.layernorm_c(t, store[f"enc{s}.norm2.gamma"],
                                 store[f"enc{s}.norm2.beta"]))
        stages.append(T.conv2d(t, store[f"enc{s}.proj.weight"],
                               store[f"enc{s}.proj.bias"]))
    return stages


def model_forward(image: Tensor, store: ParamStore,
                  cfg: ModelConfig) -> ModelOutput:
    """Run the full network; pure in (params, image)."""
    feats = encoder_forward(image, store, cfg)
    if cfg.sa2_enabled:
        outs = scale_aware_attention(feats, store, "sa2", cfg.lsa)
    else:
        outs = list(feats)

    decoded: list[Optional[Tensor]] = [None] * STAGES
    decoded[STAGES - 1] = adaptive_up_attention(
        outs[STAGES - 1], None, store, f"aua{STAGES}")
    for s in range(STAGES - 1, 0, -1):
        decoded[s - 1] = adaptive_up_attention(
            outs[s - 1], decoded[s], store, f"aua{s}")

    h, w = cfg.input_size
    logits = []
    for s in range(1, STAGES + 1):
        head = T.conv2d(decoded[s - 1], store[f"head{s}.weight"],
                        store[f"head{s}.bias"])
        logits.append(T.bilinear_resize(head, h, w))
    return ModelOutput(logits=logits)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"SA2C"
_CHECKPOINT_VERSION = 1
_ADAM_MAGIC = b"ADAM"


def _write_name(fp, name: str) -> None:
    raw = name.encode()
    if len(raw) > 0xFFFF:
        raise ContractError(f"parameter name too long: {name!r}")
    fp.write(struct.pack("<H", len(raw)))
    fp.write(raw)


def _read_name(fp) -> str:
    (n,) = struct.unpack("<H", T._read_exact(fp, 2, "name length"))
    return T._read_exact(fp, n, "name").decode()


def save_checkpoint(path, store: ParamStore, cfg: ModelConfig,
                    adam_state: Optional[AdamState] = None) -> None:
    """Serialize parameters (and optional optimizer state) to one file."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<B", _CHECKPOINT_VERSION))
    config_bytes = cfg.canonical().encode()
    buf.write(struct.pack("<I", len(config_bytes)))
    buf.write(config_bytes)
    buf.write(struct.pack("<I", len(store)))
    for name, tensor in store.items():
        _write_name(buf, name)
        T.write_tensor(buf, tensor)
    if adam_state is not None:
        buf.write(_ADAM_MAGIC)
        buf.write(struct.pack("<Q", adam_state.step))
        buf.write(struct.pack("<I", len(adam_state.m)))
        for name in adam_state.m:
            _write_name(buf, name)
            T.write_tensor(buf, Tensor(adam_state.m[name]))
            T.write_tensor(buf, Tensor(adam_state.v[name]))
    with open(path, "wb") as fp:
        fp.write(buf.getvalue())


def load_checkpoint(path, expected_config: Optional[ModelConfig] = None):
    """Read back (params, config, adam_state or None).

    When ``expected_config`` is given, a fingerprint mismatch is rejected
    before any tensor is materialized.
    """
    with open(path, "rb") as fp:
        magic = T._read_exact(fp, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise IntegrityError(f"bad checkpoint magic {magic!r} at byte 0")
        (version,) = struct.unpack("<B", T._read_exact(fp, 1, "version"))
        if version != _CHECKPOINT_VERSION:
            raise IntegrityError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", T._read_exact(fp, 4, "config length"))
        config_bytes = T._read_exact(fp, cfg_len, "config")
        fingerprint = hashlib.sha256(config_bytes).hexdigest()
        if expected_config is not None:
            expected = expected_config.fingerprint()
            if fingerprint != expected:
                raise IncompatibleCheckpointError(
                    f"checkpoint fingerprint {fingerprint} does not match "
                    f"model fingerprint {expected}")
        cfg = ModelConfig.from_canonical(config_bytes.decode())

        (count,) = struct.unpack("<I", T._read_exact(fp, 4, "entry count"))
        store = ParamStore()
        for _ in range(count):
            name = _read_name(fp)
            store.add(name, T.read_tensor(fp))

        adam_state = None
        maybe_magic = fp.read(4)
        if maybe_magic == _ADAM_MAGIC:
            (step,) = struct.unpack("<Q", T._read_exact(fp, 8, "adam step"))
            (n,) = struct.unpack("<I", T._read_exact(fp, 4, "adam count"))
            m: dict[str, np.ndarray] = {}
            v: dict[str, np.ndarray] = {}
            for _ in range(n):
                name = _read_name(fp)
                m[name] = T.read_tensor(fp).data
                v[name] = T.read_tensor(fp).data
            adam_state = AdamState(m=m, v=v, step=step)
            maybe_magic = fp.read(4)
        if maybe_magic:
            raise IntegrityError(
                f"trailing bytes in checkpoint at byte {fp.tell() - len(maybe_magic)}")
    return store, cfg, adam_state


def checkpoint_fingerprint(path) -> str:
    """Fingerprint stored in a checkpoint, without loading the tensors."""
    with open(path, "rb") as fp:
        magic = T._read_exact(fp, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise IntegrityError(f"bad checkpoint magic {magic!r} at byte 0")
        T._read_exact(fp, 1, "version")
        (cfg_len,) = struct.unpack("<I", T._read_exact(fp, 4, "config length"))
        config_bytes = T._read_exact(fp, cfg_len, "config")
    return hashlib.sha256(config_bytes).hexdigest()

"""The dual-branch network: shared stem, static appearance branch,
spatiotemporal strip branch with lateral connections, per-part projection
heads and per-part classifiers.

Data flow for a clip of T frames at 64 x 44 (default sizes):

  stem (framewise)          -> [T,  64, 32, 22]
  static blocks 2-3         -> [T, 256, 16, 11]
    temporal max            -> [256, 16, 11]
    16 horizontal strips    -> static parts   [16, 256]
  strip pooling of the stem -> horiz [64, T, 32], vert [64, T, 22]
  strip-conv block 1 (+pool)-> [128, T, 16] / [128, T, 11]
    + strip-pooled static block-2 output (lateral add)
  strip-conv block 2        -> [256, T, 16] / [256, T, 11]
    + strip-pooled static block-3 output (lateral add)
    per-strip temporal pool -> dynamic parts  [16+11, 256]
  concat -> [43, 256] -> per-part FC -> features; train mode adds
  per-part BN + linear classifier logits.

Clips are processed batched internally (frames folded into the conv
batch axis) so batch norm sees the whole training batch.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .configio import from_kv, parse_kv_text, to_kv_lines
from .layers import BatchNorm, LstcLayer
from .tensor import NonFiniteError, Tensor


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches; channel plan (64, 128, 256) matches the
    reference design, smaller plans are for desk-scale runs."""

    n_classes: int
    input_hw: tuple[int, int] = (64, 44)
    channels: tuple[int, int, int] = (64, 128, 256)
    embed_dim: int = 256
    n_static_strips: int = 16
    lstc_kernel: int = 3
    asymmetric: bool = True
    gbsp_direction: str = "both"  # both | h | v | gsp
    head: str = "lstp"  # lstp | gstp
    gbsp_mode: str = "max"  # max | mean | gem
    head_mode: str = "max"
    gem_p: float = 6.5
    static_only: bool = False
    lrelu_slope: float = 0.01
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.n_classes < 1:
            raise ValueError(f"n_classes must be >= 1, got {self.n_classes}")
        if self.gbsp_direction not in ("both", "h", "v", "gsp"):
            raise ValueError(f"unknown gbsp_direction {self.gbsp_direction!r}")
        if self.head not in ("lstp", "gstp"):
            raise ValueError(f"unknown head {self.head!r}")
        for m in (self.gbsp_mode, self.head_mode):
            if m not in ("max", "mean", "gem"):
                raise ValueError(f"unknown pooling mode {m!r}")
        if self.lstc_kernel % 2 == 0:
            raise ValueError(f"lstc_kernel must be odd, got {self.lstc_kernel}")
        h2, w2 = self.feature_hw
        if h2 < 1 or w2 < 1:
            raise ValueError(f"input {self.input_hw} too small for two pooling stages")
        if h2 % self.n_static_strips != 0:
            raise ValueError(
                f"n_static_strips={self.n_static_strips} must divide final feature height {h2}"
            )

    @property
    def stem_hw(self) -> tuple[int, int]:
        return self.input_hw[0] // 2, self.input_hw[1] // 2

    @property
    def feature_hw(self) -> tuple[int, int]:
        h1, w1 = self.stem_hw
        return h1 // 2, w1 // 2

    def dynamic_part_counts(self) -> list[tuple[str, int]]:
        """(tag prefix, part count) per active dynamic path."""
        if self.static_only:
            return []
        h2, w2 = self.feature_hw
        if self.gbsp_direction == "gsp":
            return [("dyn-gsp", 1 if self.head == "lstp" else 1)]
        paths = []
        if self.gbsp_direction in ("both", "h"):
            paths.append(("dyn-horiz", h2 if self.head == "lstp" else 1))
        if self.gbsp_direction in ("both", "v"):
            paths.append(("dyn-vert", w2 if self.head == "lstp" else 1))
        return paths

    @property
    def n_parts(self) -> int:
        return self.n_static_strips + sum(n for _, n in self.dynamic_part_counts())

    def part_tags(self) -> list[str]:
        tags = [f"static-strip {i}" for i in range(self.n_static_strips)]
        for prefix, count in self.dynamic_part_counts():
            tags += [f"{prefix} {i}" for i in range(count)]
        return tags


VARIANTS = ("full", "static_only", "gsp_lstc", "h_only", "v_only", "gbsp_lstc", "gstp_head")


def apply_variant(config: ModelConfig, variant: str) -> ModelConfig:
    """Rewrite config switches for one ablation variant."""
    if variant == "full":
        return replace(config, static_only=False, gbsp_direction="both", asymmetric=True,
                       head="lstp")
    if variant == "static_only":
        return replace(config, static_only=True)
    if variant == "gsp_lstc":
        return replace(config, static_only=False, gbsp_direction="gsp", asymmetric=False)
    if variant == "h_only":
        return replace(config, static_only=False, gbsp_direction="h", asymmetric=False)
    if variant == "v_only":
        return replace(config, static_only=False, gbsp_direction="v", asymmetric=False)
    if variant == "gbsp_lstc":
        return replace(config, static_only=False, gbsp_direction="both", asymmetric=False)
    if variant == "gstp_head":
        return replace(config, static_only=False, gbsp_direction="both", asymmetric=True,
                       head="gstp")
    raise ValueError(f"unknown ablation variant {variant!r}; expected one of {VARIANTS}")


@dataclass
class PartFeatureSet:
    """Per-part embeddings of one clip, plus training-time logits."""

    features: Tensor  # [n_parts, embed_dim]
    logits: Tensor | None  # [n_parts, n_classes] in train mode
    part_tags: list[str]


@contextmanager
def _layer(name: str):
    try:
        yield
    except NonFiniteError as e:
        raise NonFiniteError(f"{e} (layer {name})") from e


def _he_std(fan_in: int, slope: float) -> float:
    return float(np.sqrt(2.0 / ((1.0 + slope * slope) * fan_in)))


class ConvBn:
    """Same-padded conv + batch norm + leaky ReLU on [N, C, A, B]."""

    def __init__(self, rng, c_in: int, c_out: int, k: int, cfg: ModelConfig):
        std = _he_std(c_in * k * k, cfg.lrelu_slope)
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.bn = BatchNorm(c_out, eps=cfg.bn_eps, momentum=cfg.bn_momentum)
        self.k = k
        self.slope = cfg.lrelu_slope

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        pad = self.k // 2
        out = T.conv2d(x, self.weight, self.bias, pad=(pad, pad))
        out = self.bn(out, training)
        return T.leaky_relu(out, self.slope)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)] + [
            ("bn." + n, t) for n, t in self.bn.parameters()
        ]

    def buffers(self):
        return [("bn." + n, b) for n, b in self.bn.buffers()]


class LstcnModel:
    """Full parameter set plus the forward pass."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c1, c2, c3 = config.channels
        a = config.lstc_kernel
        kw = dict(bn_eps=config.bn_eps, bn_momentum=config.bn_momentum,
                  lrelu_slope=config.lrelu_slope)

        self.stem = [ConvBn(rng, 1, c1, 5, config), ConvBn(rng, c1, c1, 3, config)]
        self.static2 = [ConvBn(rng, c1, c2, 3, config), ConvBn(rng, c2, c2, 3, config)]
        self.static3 = [ConvBn(rng, c2, c3, 3, config), ConvBn(rng, c3, c3, 3, config)]

        self.lstc_blocks: dict[str, list[list[LstcLayer]]] = {}
        if not config.static_only:
            dirs = {"both": ("h", "v"), "h": ("h",), "v": ("v",), "gsp": ("g",)}[
                config.gbsp_direction
            ]
            for d in dirs:
                block1 = [
                    LstcLayer(rng, c1, c2, a, config.asymmetric, **kw),
                    LstcLayer(rng, c2, c2, a, config.asymmetric, **kw),
                ]
                block2 = [
                    LstcLayer(rng, c2, c3, a, config.asymmetric, **kw),
                    LstcLayer(rng, c3, c3, a, config.asymmetric, **kw),
                ]
                self.lstc_blocks[d] = [block1, block2]

        p, e = config.n_parts, config.embed_dim
        std = _he_std(c3, config.lrelu_slope)
        self.part_fc_w = Tensor(rng.normal(0.0, std, size=(p, c3, e)), requires_grad=True)
        self.part_fc_b = Tensor(np.zeros((p, 1, e)), requires_grad=True)
        self.cls_bn = BatchNorm(p * e, eps=config.bn_eps, momentum=config.bn_momentum)
        std = _he_std(e, config.lrelu_slope)
        self.cls_w = Tensor(
            rng.normal(0.0, std, size=(p, e, config.n_classes)), requires_grad=True
        )
        self.cls_b = Tensor(np.zeros((p, 1, config.n_classes)), requires_grad=True)

    # -- parameter walking -------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for name, block in (("stem", self.stem), ("static2", self.static2),
                            ("static3", self.static3)):
            for i, layer in enumerate(block):
                out += [(f"{name}.{i}.{n}", t) for n, t in layer.parameters()]
        for d in sorted(self.lstc_blocks):
            for bi, block in enumerate(self.lstc_blocks[d], start=1):
                for li, layer in enumerate(block):
                    out += [(f"lstc{bi}_{d}.{li}.{n}", t) for n, t in layer.parameters()]
        out += [
            ("head.part_fc_w", self.part_fc_w),
            ("head.part_fc_b", self.part_fc_b),
            ("head.cls_bn.gamma", self.cls_bn.gamma),
            ("head.cls_bn.beta", self.cls_bn.beta),
            ("head.cls_w", self.cls_w),
            ("head.cls_b", self.cls_b),
        ]
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, block in (("stem", self.stem), ("static2", self.static2),
                            ("static3", self.static3)):
            for i, layer in enumerate(block):
                out += [(f"{name}.{i}.{n}", b) for n, b in layer.buffers()]
        for d in sorted(self.lstc_blocks):
            for bi, block in enumerate(self.lstc_blocks[d], start=1):
                for li, layer in enumerate(block):
                    out += [(f"lstc{bi}_{d}.{li}.{n}", b) for n, b in layer.buffers()]
        out += [
            ("head.cls_bn.running_mean", self.cls_bn.running_mean),
            ("head.cls_bn.running_var", self.cls_bn.running_var),
        ]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def fuse(self) -> None:
        """Merge asymmetric branches into single kernels for inference."""
        for blocks in self.lstc_blocks.values():
            for block in blocks:
                for layer in block:
                    layer.fuse()

    def unfuse(self) -> None:
        for blocks in self.lstc_blocks.values():
            for block in blocks:
                for layer in block:
                    layer.bank = replace(layer.bank, fused=None)

    # -- forward -----------------------------------------------------------

    def forward(self, clip, mode: str = "eval") -> PartFeatureSet:
        """Embed one clip [T, 1, H, W] (or [T, H, W]) into per-part features."""
        data = clip.data if isinstance(clip, Tensor) else np.asarray(clip, dtype=np.float64)
        if data.ndim == 3:
            data = data[:, None, :, :]
        if data.ndim != 4 or data.shape[1] != 1:
            raise ValueError(f"clip must be [T, 1, H, W], got shape {data.shape}")
        feats, logits, tags = self.forward_batch(
            Tensor(data[None]) if not isinstance(clip, Tensor) else clip.reshape((1,) + data.shape),
            mode,
        )
        return PartFeatureSet(
            features=feats.reshape(feats.shape[1:]),
            logits=logits.reshape(logits.shape[1:]) if logits is not None else None,
            part_tags=tags,
        )

    def forward_batch(self, clips: Tensor, mode: str = "train"):
        """Embed clips [B, T, 1, H, W]; returns (features [B, P, E],
        logits [B, P, K] or None, part tags)."""
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        training = mode == "train"
        cfg = self.config
        if clips.ndim != 5 or clips.shape[2] != 1:
            raise ValueError(f"clips must be [B, T, 1, H, W], got shape {clips.shape}")
        b, t = clips.shape[0], clips.shape[1]
        if t < 3:
            raise ValueError(f"clips must have at least 3 frames, got T={t}")
        if (clips.shape[3], clips.shape[4]) != cfg.input_hw:
            raise ValueError(
                f"clip frame size {clips.shape[3:5]} != configured input {cfg.input_hw}"
            )
        c1, c2, c3 = cfg.channels
        h1, w1 = cfg.stem_hw
        h2, w2 = cfg.feature_hw
        mode_kw = dict(p=cfg.gem_p)

        x = clips.reshape((b * t, 1) + cfg.input_hw)
        with _layer("stem"):
            f = self.stem[0](x, training)
            f = self.stem[1](f, training)
            f = T.maxpool2d(f, (2, 2))  # [B*T, c1, h1, w1]
        with _layer("static2"):
            s2 = self.static2[0](f, training)
            s2 = self.static2[1](s2, training)
            s2 = T.maxpool2d(s2, (2, 2))  # [B*T, c2, h2, w2]
        with _layer("static3"):
            s3 = self.static3[0](s2, training)
            s3 = self.static3[1](s3, training)  # [B*T, c3, h2, w2]

        with _layer("static-head"):
            stat = T.reduce(s3.reshape((b, t, c3, h2, w2)), (1,), "max")  # temporal set pool
            n = cfg.n_static_strips
            bands = stat.reshape((b, c3, n, h2 // n, w2))
            strip = T.reduce(bands, (3, 4), "max") + T.reduce(bands, (3, 4), "mean")
            static_parts = strip.transpose((0, 2, 1))  # [B, n, c3]

        part_blocks = [static_parts]
        if not cfg.static_only:
            fb = f.reshape((b, t, c1, h1, w1))
            s2b = s2.reshape((b, t, c2, h2, w2))
            s3b = s3.reshape((b, t, c3, h2, w2))
            for d in sorted(self.lstc_blocks):
                with _layer(f"lstc-{d}"):
                    part_blocks.append(
                        self._dynamic_path(d, fb, s2b, s3b, training, mode_kw)
                    )

        parts = T.concat(part_blocks, axis=1) if len(part_blocks) > 1 else part_blocks[0]
        with _layer("part-fc"):
            pbc = parts.transpose((1, 0, 2))  # [P, B, c3]
            feats = T.matmul(pbc, self.part_fc_w) + self.part_fc_b  # [P, B, E]
            features = feats.transpose((1, 0, 2))  # [B, P, E]

        logits = None
        if training:
            with _layer("classifier"):
                p, e = cfg.n_parts, cfg.embed_dim
                flat = features.reshape((b, p * e))
                normed = self.cls_bn(flat, training).reshape((b, p, e)).transpose((1, 0, 2))
                logits = (T.matmul(normed, self.cls_w) + self.cls_b).transpose((1, 0, 2))
        return features, logits, cfg.part_tags()

    def _dynamic_path(self, d: str, fb, s2b, s3b, training: bool, mode_kw) -> Tensor:
        """One strip direction: pool, two conv blocks with lateral adds, head."""
        cfg = self.config
        pool_axis = {"h": 4, "v": 3}.get(d)
        if d == "g":
            strips = T.reduce(fb, (3, 4), cfg.gbsp_mode, keepdims=True, **mode_kw)
            strips = strips.reshape(strips.shape[:3] + (1,))
            lat2 = T.reduce(s2b, (3, 4), cfg.gbsp_mode, keepdims=True, **mode_kw)
            lat2 = lat2.reshape(lat2.shape[:3] + (1,))
            lat3 = T.reduce(s3b, (3, 4), cfg.gbsp_mode, keepdims=True, **mode_kw)
            lat3 = lat3.reshape(lat3.shape[:3] + (1,))
        else:
            strips = T.reduce(fb, (pool_axis,), cfg.gbsp_mode, **mode_kw)
            lat2 = T.reduce(s2b, (pool_axis,), cfg.gbsp_mode, **mode_kw)
            lat3 = T.reduce(s3b, (pool_axis,), cfg.gbsp_mode, **mode_kw)
        # [B, T, C, S] -> [B, C, T, S] so (T, S) is the conv plane
        x = strips.transpose((0, 2, 1, 3))
        block1, block2 = self.lstc_blocks[d]
        x = block1[0](x, training)
        x = block1[1](x, training)
        if d != "g":
            x = T.maxpool2d(x, (1, 2))  # halve the strip axis, keep T
        x = x + lat2.transpose((0, 2, 1, 3))
        x = block2[0](x, training)
        x = block2[1](x, training)
        x = x + lat3.transpose((0, 2, 1, 3))
        if cfg.head == "lstp":
            dyn = T.reduce(x, (2,), cfg.head_mode, **mode_kw)  # [B, C, S]
            return dyn.transpose((0, 2, 1))  # [B, S, C]
        dyn = T.reduce(x, (2, 3), cfg.head_mode, **mode_kw)  # [B, C]
        return dyn.reshape((dyn.shape[0], 1, dyn.shape[1]))


def build_model(config: ModelConfig, seed: int = 0) -> LstcnModel:
    """Deterministic parameter init: same config and seed, same bits."""
    return LstcnModel(config, np.random.default_rng(seed))


def forward_ablation(model: LstcnModel, clip, variant: str, mode: str = "eval") -> PartFeatureSet:
    """Forward of a model constructed for one named ablation variant."""
    expected = apply_variant(model.config, variant)
    if expected != model.config:
        raise ValueError(
            f"model config does not match variant {variant!r}; build with apply_variant first"
        )
    return model.forward(clip, mode)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"LSTCNCK1"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_DTYPE_TAGS = {"f64": 0, "f32": 1}


def save_checkpoint(model: LstcnModel, path, dtype: str = "f64") -> None:
    """Versioned binary container: magic, version, config text block, then
    length-prefixed named tensor records (params and BN running stats)."""
    if dtype not in _DTYPE_TAGS:
        raise ValueError(f"checkpoint dtype must be f64 or f32, got {dtype!r}")
    tag = _DTYPE_TAGS[dtype]
    records = [(n, t.data) for n, t in model.named_parameters()]
    records += [(n, b) for n, b in model.named_buffers()]
    meta = "\n".join(to_kv_lines(model.config)) + f"\nckpt_dtype = {dtype}\n"
    meta_bytes = meta.encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            nb = name.encode("utf-8")
            payload = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError(f"truncated checkpoint: expected {n} bytes for {what}, got {len(data)}")
    return data


def load_checkpoint(path, expected_config: ModelConfig | None = None,
                    strict: bool = True) -> LstcnModel:
    """Rebuild a model from a checkpoint file.

    strict mode errors on unknown tensor names; a config mismatch against
    ``expected_config`` is always an error.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 8, "magic")
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<I", _read_exact(fh, 4, "meta length"))
        meta = _read_exact(fh, meta_len, "metadata").decode("utf-8")
        kv = parse_kv_text(meta)
        kv.pop("ckpt_dtype", None)
        config = from_kv(ModelConfig, kv)
        if expected_config is not None and config != expected_config:
            diffs = []
            for key in sorted(kv):
                a, b = getattr(config, key), getattr(expected_config, key)
                if a != b:
                    diffs.append(f"{key}: checkpoint={a!r} runtime={b!r}")
            raise ValueError(f"{path}: config mismatch: " + "; ".join(diffs))

        model = build_model(config, seed=0)
        targets = dict(model.named_parameters())
        buffers = dict(model.named_buffers())
        (n_records,) = struct.unpack("<I", _read_exact(fh, 4, "record count"))
        seen = set()
        for _ in range(n_records):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            tag, ndim = struct.unpack("<BB", _read_exact(fh, 2, "dtype/ndim"))
            if tag not in _DTYPES:
                raise ValueError(f"{path}: unknown dtype tag {tag} for {name}")
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "shape"))
            (nbytes,) = struct.unpack("<Q", _read_exact(fh, 8, "payload length"))
            payload = _read_exact(fh, nbytes, f"payload of {name}")
            arr = np.frombuffer(payload, dtype=_DTYPES[tag]).reshape(shape).astype(np.float64)
            seen.add(name)
            if name in targets:
                if targets[name].data.shape != arr.shape:
                    raise ValueError(
                        f"{path}: tensor {name} shape {arr.shape} != model shape "
                        f"{targets[name].data.shape}"
                    )
                targets[name].data = arr
            elif name in buffers:
                buffers[name][...] = arr
            elif strict:
                raise ValueError(f"{path}: unknown tensor name {name!r} in checkpoint")
        missing = (set(targets) | set(buffers)) - seen
        if missing:
            raise ValueError(f"{path}: checkpoint missing tensors: {sorted(missing)[:5]}")
    return model

"""ViT encoder + UNETR-style 2D convolutional decoder with a two-channel sigmoid head.

Encoder parameter names follow the promptable-segmentation checkpoint layout
(``patch_embed.proj``, ``pos_embed``, ``blocks.N.{norm1,attn,norm2,mlp}``), so
the image encoder of such a checkpoint can be imported by stripping its
``image_encoder.`` prefix. The prompt encoder, mask decoder and the encoder
neck are never instantiated here.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "callosum-snapshot-v1"
CKPT_ENCODER_PREFIX = "image_encoder."
CKPT_NECK_PREFIX = "image_encoder.neck."


class ConfigError(ValueError):
    pass


class SurgeryError(ValueError):
    pass


@dataclasses.dataclass
class EncoderConfig:
    input_px: int = 1024
    token_patch_px: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    tap_layers: tuple | None = None
    in_chans: int = 3
    mlp_ratio: float = 4.0
    window_size: int = 0
    global_attn_layers: tuple = ()
    use_rel_pos: bool = False
    decoder_features: int = 16

    def __post_init__(self):
        if self.tap_layers is None:
            self.tap_layers = tuple(self.depth * k // 4 for k in (1, 2, 3, 4))
        self.tap_layers = tuple(int(t) for t in self.tap_layers)
        self.global_attn_layers = tuple(int(t) for t in self.global_attn_layers)
        self.validate()

    def validate(self):
        if self.token_patch_px <= 0 or self.input_px <= 0:
            raise ConfigError("input_px and token_patch_px must be positive")
        if self.input_px % self.token_patch_px:
            raise ConfigError(f"input_px {self.input_px} not divisible by token_patch_px {self.token_patch_px}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        taps = self.tap_layers
        if len(taps) != 4:
            raise ConfigError(f"tap_layers needs 4 entries, got {len(taps)}")
        if any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1 or taps[-1] > self.depth:
            raise ConfigError(f"tap_layers {list(taps)} must be strictly increasing within [1, {self.depth}]")
        if any(not 0 <= g < self.depth for g in self.global_attn_layers):
            raise ConfigError("global_attn_layers out of range")
        if self.in_chans not in (1, 3):
            raise ConfigError("in_chans must be 1 or 3")
        if self.decoder_features < 1:
            raise ConfigError("decoder_features must be >= 1")

    @property
    def grid(self):
        return self.input_px // self.token_patch_px

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("tap_layers", "global_attn_layers"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown encoder config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["tap_layers"] = list(self.tap_layers)
        d["global_attn_layers"] = list(self.global_attn_layers)
        return d


def sam_base_config(input_px=1024, **overrides):
    """ViT-B layout of the promptable-segmentation image encoder."""
    cfg = dict(
        input_px=input_px, embed_dim=768, depth=12, heads=12, window_size=14,
        global_attn_layers=(2, 5, 8, 11), use_rel_pos=True,
    )
    cfg.update(overrides)
    return EncoderConfig(**cfg)


def toy_config(**overrides):
    cfg = dict(input_px=224, embed_dim=128, depth=4, heads=4, decoder_features=8)
    cfg.update(overrides)
    return EncoderConfig(**cfg)


# -- encoder -----------------------------------------------------------------


def _rel_pos_table(q_size, k_size, rel_pos):
    max_dist = 2 * max(q_size, k_size) - 1
    if rel_pos.shape[0] != max_dist:
        rel_pos = F.interpolate(rel_pos.T[None], size=max_dist, mode="linear")[0].T
    q = torch.arange(q_size, device=rel_pos.device)[:, None] * max(k_size / q_size, 1.0)
    k = torch.arange(k_size, device=rel_pos.device)[None, :] * max(q_size / k_size, 1.0)
    idx = (q - k) + (k_size - 1) * max(q_size / k_size, 1.0)
    return rel_pos[idx.long()]


class Attention(nn.Module):
    def __init__(self, dim, heads, rel_pos_size=None):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.use_rel_pos = rel_pos_size is not None
        if self.use_rel_pos:
            self.rel_pos_h = nn.Parameter(torch.zeros(2 * rel_pos_size - 1, dim // heads))
            self.rel_pos_w = nn.Parameter(torch.zeros(2 * rel_pos_size - 1, dim // heads))

    def forward(self, x):
        b, h, w, _ = x.shape
        qkv = self.qkv(x).reshape(b, h * w, 3, self.heads, -1).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.reshape(3, b * self.heads, h * w, -1).unbind(0)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        if self.use_rel_pos:
            rh = _rel_pos_table(h, h, self.rel_pos_h)
            rw = _rel_pos_table(w, w, self.rel_pos_w)
            rq = q.reshape(b * self.heads, h, w, -1)
            bias_h = torch.einsum("bhwc,hkc->bhwk", rq, rh)
            bias_w = torch.einsum("bhwc,wkc->bhwk", rq, rw)
            attn = (attn.view(-1, h, w, h, w) + bias_h[..., None] + bias_w[..., None, :]).view(-1, h * w, h * w)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).view(b, self.heads, h, w, -1).permute(0, 2, 3, 1, 4).reshape(b, h, w, -1)
        return self.proj(out)


class MLP(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.lin1 = nn.Linear(dim, hidden)
        self.lin2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.lin2(F.gelu(self.lin1(x)))


def _window_partition(x, ws):
    b, h, w, c = x.shape
    ph, pw = (ws - h % ws) % ws, (ws - w % ws) % ws
    if ph or pw:
        x = F.pad(x, (0, 0, 0, pw, 0, ph))
    hp, wp = h + ph, w + pw
    x = x.view(b, hp // ws, ws, wp // ws, ws, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(-1, ws, ws, c), (hp, wp)


def _window_unpartition(windows, ws, padded, size):
    hp, wp = padded
    h, w = size
    b = windows.shape[0] // ((hp // ws) * (wp // ws))
    x = windows.view(b, hp // ws, wp // ws, ws, ws, -1).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, hp, wp, -1)[:, :h, :w].contiguous()


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio, window_size, rel_pos_size):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads, rel_pos_size)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = MLP(dim, int(dim * mlp_ratio))
        self.window_size = window_size

    def forward(self, x):
        shortcut = x
        x = self.norm1(x)
        if self.window_size > 0:
            size = x.shape[1:3]
            x, padded = _window_partition(x, self.window_size)
            x = self.attn(x)
            x = _window_unpartition(x, self.window_size, padded, size)
        else:
            x = self.attn(x)
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        p, d = cfg.token_patch_px, cfg.embed_dim
        self.patch_embed = nn.Module()
        self.patch_embed.proj = nn.Conv2d(cfg.in_chans, d, kernel_size=p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, cfg.grid, cfg.grid, d))
        blocks = []
        for i in range(cfg.depth):
            windowed = cfg.window_size > 0 and i not in cfg.global_attn_layers
            ws = cfg.window_size if windowed else 0
            rel = (ws if windowed else cfg.grid) if cfg.use_rel_pos else None
            blocks.append(Block(d, cfg.heads, cfg.mlp_ratio, ws, rel))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        """Return the token maps ``(B, C, g, g)`` after each tapped block."""
        x = self.patch_embed.proj(x).permute(0, 2, 3, 1) + self.pos_embed
        taps = set(self.cfg.tap_layers)
        feats = []
        for i, blk in enumerate(self.blocks, start=1):
            x = blk(x)
            if i in taps:
                feats.append(x.permute(0, 3, 1, 2))
        return feats


# -- decoder -----------------------------------------------------------------


class ConvBlock(nn.Module):
    """conv3x3 -> instance norm -> leaky ReLU, twice."""

    def __init__(self, cin, cout):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm1 = nn.InstanceNorm2d(cout)
        self.norm2 = nn.InstanceNorm2d(cout)

    def forward(self, x):
        x = F.leaky_relu(self.norm1(self.conv1(x)), 0.01)
        return F.leaky_relu(self.norm2(self.conv2(x)), 0.01)


class ProjectUp(nn.Module):
    """Token map -> ``2**n_up`` upsampled skip features (transposed conv + conv block per step)."""

    def __init__(self, cin, cout, n_up):
        super().__init__()
        self.init = nn.ConvTranspose2d(cin, cout, 2, stride=2, bias=False)
        self.steps = nn.ModuleList(
            nn.Sequential(nn.ConvTranspose2d(cout, cout, 2, stride=2, bias=False), ConvBlock(cout, cout))
            for _ in range(n_up - 1)
        )

    def forward(self, x):
        x = self.init(x)
        for step in self.steps:
            x = step(x)
        return x


class UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 2, stride=2, bias=False)
        self.conv = ConvBlock(2 * cout, cout)

    def forward(self, x, skip):
        x = self.up(x)
        if x.shape[-2:] != skip.shape[-2:]:
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.conv(torch.cat([x, skip], dim=1))


class Decoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, out_channels=2):
        super().__init__()
        f, d = cfg.decoder_features, cfg.embed_dim
        self.enc1 = ConvBlock(1, f)
        self.enc2 = ProjectUp(d, 2 * f, 3)
        self.enc3 = ProjectUp(d, 4 * f, 2)
        self.enc4 = ProjectUp(d, 8 * f, 1)
        self.dec5 = UpBlock(d, 8 * f)
        self.dec4 = UpBlock(8 * f, 4 * f)
        self.dec3 = UpBlock(4 * f, 2 * f)
        self.dec2 = UpBlock(2 * f, f)
        self.head = nn.Conv2d(f, out_channels, 1)

    def forward(self, image, feats):
        z1, z2, z3, z4 = feats
        s1 = self.enc1(image)
        s2 = self.enc2(z1)
        s3 = self.enc3(z2)
        s4 = self.enc4(z3)
        x = self.dec5(z4, s4)
        x = self.dec4(x, s3)
        x = self.dec3(x, s2)
        x = self.dec2(x, s1)
        return self.head(x)


class SegModel(nn.Module):
    """Encoder + decoder mapping ``(B, 1, S, S)`` images in [0, 1] to ``(B, 2, S, S)`` probabilities.

    Channel 0 scores myelinated axon, channel 1 myelin sheath.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ImageEncoder(cfg)
        self.decoder = Decoder(cfg)

    def logits(self, x):
        s = self.cfg.input_px
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2] != s or x.shape[3] != s:
            raise ValueError(f"expected input of shape (B, 1, {s}, {s}), got {tuple(x.shape)}")
        enc_in = x.expand(-1, self.cfg.in_chans, -1, -1) if self.cfg.in_chans > 1 else x
        return self.decoder(x, self.encoder(enc_in))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


# -- construction ------------------------------------------------------------


def _init_weights(model: SegModel):
    nn.init.trunc_normal_(model.encoder.pos_embed, std=0.02)
    for m in model.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_random(cfg: EncoderConfig, seed=0) -> SegModel:
    """Deterministically initialised model, independent of global RNG state."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        model = SegModel(cfg)
        _init_weights(model)
    return model


def forward(model: SegModel, batch) -> np.ndarray | torch.Tensor:
    """Run inference. Numpy input (``uint8`` or float in [0, 1]) returns numpy float32."""
    as_numpy = isinstance(batch, np.ndarray)
    if as_numpy:
        arr = batch.astype(np.float32) / 255.0 if batch.dtype == np.uint8 else batch.astype(np.float32)
        param = next(model.parameters())
        batch = torch.from_numpy(arr).to(device=param.device, dtype=param.dtype)
    with torch.no_grad():
        out = model(batch)
    return out.float().cpu().numpy() if as_numpy else out


def count_parameters(model):
    return sum(p.numel() for p in model.parameters())


def to_class_mask(prob, threshold=0.5) -> np.ndarray:
    """Binarise a ``(2, H, W)`` probability pair into a class mask.

    Background where both channels are below ``threshold``; otherwise the
    higher-scoring channel wins, ties going to myelin.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    prob = np.asarray(prob)
    if prob.ndim != 3 or prob.shape[0] != 2:
        raise ValueError(f"expected (2, H, W) probabilities, got {prob.shape}")
    axon, myelin = prob[0], prob[1]
    out = np.where(myelin >= axon, 2, 1).astype(np.uint8)
    out[(axon < threshold) & (myelin < threshold)] = 0
    return out


# -- checkpoint surgery ------------------------------------------------------


@dataclasses.dataclass
class LoadReport:
    loaded: list = dataclasses.field(default_factory=list)
    discarded: dict = dataclasses.field(default_factory=dict)
    missing: list = dataclasses.field(default_factory=list)
    uninitialized: list = dataclasses.field(default_factory=list)
    resampled: dict = dataclasses.field(default_factory=dict)

    def to_text(self):
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)


def load_checkpoint_archive(path) -> dict:
    """Read a named-parameter archive (torch ``.pt/.pth`` or numpy ``.npz``)."""
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path) as z:
            return {k: torch.from_numpy(z[k]) for k in z.files}
    obj = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(obj, dict) and "state_dict" in obj and isinstance(obj["state_dict"], dict):
        obj = obj["state_dict"]
    if not isinstance(obj, dict):
        raise SurgeryError(f"{path}: not a named-parameter archive")
    return obj


def _discard_reason(name):
    if name.startswith(CKPT_NECK_PREFIX):
        return "encoder neck"
    if name.startswith("prompt_encoder."):
        return "prompt encoder"
    if name.startswith("mask_decoder."):
        return "mask decoder"
    return "not part of the image encoder"


def surgery_import(checkpoint, cfg: EncoderConfig, seed=0):
    """Build a model whose encoder comes from a promptable-segmentation checkpoint.

    Only the image encoder's patch embedding, positional embedding and
    transformer blocks are kept; the neck, prompt encoder, mask decoder and
    anything else are discarded. The decoder is freshly initialised.

    Returns ``(model, report)``. ``report.loaded``, ``report.discarded`` and
    ``report.missing`` partition the checkpoint's names; ``missing`` holds
    image-encoder names this encoder has no slot for.
    """
    if not isinstance(checkpoint, dict):
        checkpoint = load_checkpoint_archive(checkpoint)
    model = init_random(cfg, seed)
    target = model.encoder.state_dict()
    report = LoadReport()
    new_state = {}

    encoder_names = [n for n in checkpoint if n.startswith(CKPT_ENCODER_PREFIX) and not n.startswith(CKPT_NECK_PREFIX)]
    if not encoder_names:
        raise SurgeryError("checkpoint contains no image-encoder parameters")
    pe = checkpoint.get(CKPT_ENCODER_PREFIX + "patch_embed.proj.weight")
    if pe is not None and pe.shape[0] != cfg.embed_dim:
        raise SurgeryError(f"embed_dim mismatch: checkpoint {pe.shape[0]}, config {cfg.embed_dim}")

    for name, value in checkpoint.items():
        if not name.startswith(CKPT_ENCODER_PREFIX) or name.startswith(CKPT_NECK_PREFIX):
            report.discarded[name] = _discard_reason(name)
            continue
        local = name[len(CKPT_ENCODER_PREFIX):]
        if local not in target:
            report.missing.append(name)
            continue
        value = torch.as_tensor(value).detach().to(torch.float32)
        want = target[local].shape
        if value.shape != want:
            value, how = _adapt(local, value, want)
            report.resampled[name] = how
        new_state[local] = value
        report.loaded.append(name)

    report.uninitialized = sorted(k for k in target if k not in new_state)
    model.encoder.load_state_dict(new_state, strict=False)
    if report.discarded:
        logger.info("surgery discarded %d checkpoint entries", len(report.discarded))
    return model, report


def _adapt(local, value, want):
    if local == "pos_embed":
        if value.ndim != 4 or value.shape[-1] != want[-1]:
            raise SurgeryError(f"pos_embed shape {tuple(value.shape)} incompatible with {tuple(want)}")
        grid = value.permute(0, 3, 1, 2)
        out = F.interpolate(grid, size=want[1:3], mode="bicubic", align_corners=False)
        return out.permute(0, 2, 3, 1).contiguous(), f"bicubic {value.shape[1]}x{value.shape[2]} -> {want[1]}x{want[2]}"
    if local.endswith(("rel_pos_h", "rel_pos_w")) and value.ndim == 2 and value.shape[1] == want[1]:
        out = F.interpolate(value.T[None], size=want[0], mode="linear")[0].T.contiguous()
        return out, f"linear {value.shape[0]} -> {want[0]}"
    if local == "patch_embed.proj.weight" and value.shape[0] == want[0] and value.shape[2:] == want[2:]:
        if want[1] == 1:
            # summing colour kernels == feeding a replicated grayscale image
            return value.sum(dim=1, keepdim=True), f"channels {value.shape[1]} -> 1 (sum)"
    raise SurgeryError(f"shape mismatch for {local}: checkpoint {tuple(value.shape)} vs model {tuple(want)}")


def export_encoder_checkpoint(model: SegModel) -> dict:
    """Encoder weights under promptable-segmentation checkpoint names."""
    return {CKPT_ENCODER_PREFIX + k: v.detach().clone() for k, v in model.encoder.state_dict().items()}


# -- snapshots ---------------------------------------------------------------


def save_snapshot(model: SegModel, path, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": SNAPSHOT_FORMAT,
        "config": model.cfg.to_dict(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "meta": dict(meta or {}),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_snapshot(path):
    """Return ``(model, meta)`` from a snapshot written by :func:`save_snapshot`."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != SNAPSHOT_FORMAT:
        raise ValueError(f"{path}: not a model snapshot")
    model = SegModel(EncoderConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("meta", {})


def snapshot_id(path):
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]
    return f"{Path(path).name}@{digest}"

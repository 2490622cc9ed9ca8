"""Time-conditioned encoder-only transformer that outputs concrete scores.

Blocks use adaptive layer norm (shift/scale/gate from a sinusoidal time
embedding) and rotary position encoding on queries and keys. The head emits
one logit per clean token and position; scores are ``exp(logits)``. The
modulation and head layers start at zero, so a fresh network outputs
scores of exactly 1.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ContextOverflow, IncompatibleCheckpoint, InvalidConfig, NumericalFailure

CHECKPOINT_MAGIC = b"AIDD"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 128
    depth: int = 4
    heads: int = 4
    context_length: int = 256
    mlp_ratio: int = 4
    time_freq_dim: int = 128
    conditioning: str = "adaln"

    def validate(self):
        if self.vocab_size < 1:
            raise InvalidConfig("vocab_size must be >= 1")
        if self.dim < 1 or self.depth < 0 or self.heads < 1 or self.mlp_ratio < 1:
            raise InvalidConfig(f"invalid model sizes: {self}")
        if self.dim % self.heads:
            raise InvalidConfig(f"dim {self.dim} is not divisible by heads {self.heads}")
        if (self.dim // self.heads) % 2:
            raise InvalidConfig("rotary encoding needs an even head dimension")
        if self.context_length < 1:
            raise InvalidConfig("context_length must be >= 1")
        if self.time_freq_dim < 2 or self.time_freq_dim % 2:
            raise InvalidConfig("time_freq_dim must be even and >= 2")
        if self.conditioning != "adaln":
            raise InvalidConfig(f"unsupported conditioning {self.conditioning!r}")
        return self


def timestep_embedding(t, dim, max_period=10000.0):
    """Sinusoidal features of ``1000 * t``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def rotary_tables(length, head_dim, dtype, base=10000.0):
    inv = 1.0 / base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = torch.arange(length, dtype=torch.float64)[:, None] * inv[None]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def apply_rotary(x, cos, sin):
    """Rotate consecutive feature pairs of ``x`` (..., L, head_dim) by position angle."""
    x1, x2 = x[..., 0::2], x[..., 1::2]
    out = torch.stack([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    return out.flatten(-2)


def modulate(x, shift, scale):
    return x * (1 + scale[:, None]) + shift[:, None]


class TimeEmbedding(nn.Module):
    def __init__(self, dim, freq_dim):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        return self.mlp(timestep_embedding(t, self.freq_dim).to(self.mlp[0].weight.dtype))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(
            nn.Linear(dim, mlp_ratio * dim), nn.GELU(approximate="tanh"), nn.Linear(mlp_ratio * dim, dim)
        )
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))
        nn.init.zeros_(self.ada[1].weight)
        nn.init.zeros_(self.ada[1].bias)

    def attention(self, x, cos, sin, key_padding_mask):
        b, l, d = x.shape
        q, k, v = self.qkv(x).view(b, l, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
        logits = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        out = torch.softmax(logits, dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, l, d))

    def forward(self, x, c, cos, sin, key_padding_mask=None):
        shift1, scale1, gate1, shift2, scale2, gate2 = self.ada(c).chunk(6, dim=-1)
        x = x + gate1[:, None] * self.attention(modulate(self.norm1(x), shift1, scale1), cos, sin, key_padding_mask)
        x = x + gate2[:, None] * self.mlp(modulate(self.norm2(x), shift2, scale2))
        return x


class ScoreNetwork(nn.Module):
    def __init__(self, config):
        super().__init__()
        self.config = config.validate()
        d = config.dim
        self.embed = nn.Embedding(config.vocab_size + 1, d)
        self.time = TimeEmbedding(d, config.time_freq_dim)
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.final_ada = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.head = nn.Linear(d, config.vocab_size)
        for layer in (self.final_ada[1], self.head):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    @property
    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())

    @property
    def dtype(self):
        return self.embed.weight.dtype

    def log_score(self, x, t, key_padding_mask=None):
        x = torch.as_tensor(x, dtype=torch.long)
        if x.ndim == 1:
            x = x[None]
        b, l = x.shape
        if l > self.config.context_length:
            raise ContextOverflow(f"sequence length {l} exceeds context {self.config.context_length}")
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1).expand(b)
        c = self.time(t)
        h = self.embed(x)
        cos, sin = rotary_tables(l, self.config.dim // self.config.heads, h.dtype)
        for block in self.blocks:
            h = block(h, c, cos, sin, key_padding_mask)
        shift, scale = self.final_ada(c).chunk(2, dim=-1)
        return self.head(modulate(self.final_norm(h), shift, scale))

    def forward(self, x, t, key_padding_mask=None):
        """Scores ``(B, L, N)``, strictly positive."""
        return torch.exp(self.log_score(x, t, key_padding_mask))

    def score_fn(self):
        """Numpy adapter ``(ids, t) -> float64 scores`` for the reverse sampler."""

        def fn(ids, t):
            ids = np.asarray(ids)
            with torch.no_grad():
                out = self(torch.as_tensor(ids), t).double().numpy()
            return out.reshape(ids.shape + out.shape[-1:])

        return fn

    def is_finite(self):
        return all(bool(torch.isfinite(p).all()) for p in self.parameters())


def init_network(config, seed=0):
    """Build a network with parameters drawn from ``seed`` only."""
    config.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return ScoreNetwork(config)


def gradients(net, loss):
    """Reverse-mode gradients of ``loss`` for every trainable parameter, keyed by name."""
    named = [(n, p) for n, p in net.named_parameters() if p.requires_grad]
    if not named:
        return {}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    out = {}
    for (name, p), g in zip(named, grads):
        g = torch.zeros_like(p) if g is None else g
        if not bool(torch.isfinite(g).all()):
            raise NumericalFailure(f"non-finite gradient for {name}")
        out[name] = g
    return out


# -- checkpoint container --------------------------------------------------------

_HEAD = struct.Struct("<4sHI")


def write_container(path, header, tensors):
    """``AIDD`` file: magic, version, JSON header with a tensor manifest, f32 payload."""
    manifest = []
    chunks = []
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    blob = json.dumps({**header, "manifest": manifest}, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_HEAD.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)) + blob + b"".join(chunks))


def read_container(path):
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise IncompatibleCheckpoint(f"{path}: truncated")
    magic, version, n = _HEAD.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpoint(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        header = json.loads(data[_HEAD.size : _HEAD.size + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IncompatibleCheckpoint(f"{path}: corrupt header") from e
    offset = _HEAD.size + n
    tensors = {}
    for entry in header["manifest"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(data):
            raise IncompatibleCheckpoint(f"{path}: payload truncated at {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(data[offset:end], dtype="<f4").reshape(entry["shape"]).copy()
        offset = end
    if offset != len(data):
        raise IncompatibleCheckpoint(f"{path}: trailing bytes after payload")
    return header, tensors


def save_network(net, path, meta=None):
    tensors = [(f"param/{k}", v.detach().cpu().numpy()) for k, v in net.state_dict().items()]
    write_container(path, {"kind": "model", "config": asdict(net.config), "meta": meta or {}}, tensors)


def network_from_container(header, tensors):
    try:
        config = ModelConfig(**header["config"])
    except (KeyError, TypeError) as e:
        raise IncompatibleCheckpoint(f"bad model config in checkpoint: {e}") from e
    net = ScoreNetwork(config)
    state = {k[len("param/") :]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("param/")}
    try:
        net.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise IncompatibleCheckpoint(str(e)) from e
    return net


def load_network(path):
    header, tensors = read_container(path)
    return network_from_container(header, tensors)

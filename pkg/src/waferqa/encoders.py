"""Frozen stand-in image/text encoders and the shared word vocabulary.

Both encoders are randomly initialized from a fixed seed and never trained.
The image encoder is a small random convolutional stem pooled per patch, a
raw-pixel patch projection and two self-attention blocks, plus a whitened
whole-image summary; the text encoder is an embedding table, sinusoidal
positions and one self-attention block.
"""
from __future__ import annotations

import math
import re
from importlib import resources
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import InputError, ShapeError

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, SEP, UNK)

LABEL_TEXT = {
    "good": "good",
    "hole": "hole",
    "particle": "particle",
    "scratch": "scratch",
    "pattern_deformation": "pattern deformation",
}

_TOKEN_RE = re.compile(r"[a-z]+|\d|[^\sa-z\d]")


def tokenize(text: str) -> list[str]:
    """Lowercase words, single digits and single punctuation marks."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise InputError("vocabulary must start with the special tokens")
        if len(set(tokens)) != len(tokens):
            raise InputError("duplicate tokens in vocabulary")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = set("0123456789")
        for text in texts:
            words.update(tokenize(text))
        words.difference_update(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + sorted(words))

    @classmethod
    def default(cls) -> "Vocabulary":
        """Vocabulary over every text file shipped in ``waferqa/data``."""
        data = resources.files("waferqa") / "data"
        texts = [f.read_text() for f in sorted(data.iterdir(), key=lambda p: p.name)
                 if f.name.endswith((".json", ".txt", ".tsv"))]
        texts += list(LABEL_TEXT.values())
        from .wafersynth import PROCESS_STEPS
        from .qa import GRID_NAMES
        texts += [s.lower() for s in PROCESS_STEPS] + ["w"]
        texts += [cell for row in GRID_NAMES for cell in row] + [str(k) for k in range(10)]
        return cls.build(texts)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(t, unk) for t in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.itos):
                raise InputError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            tok = self.itos[i]
            if tok == EOS:
                break
            if tok in SPECIAL_TOKENS:
                continue
            words.append(tok)
        return " ".join(words)


def sinusoidal_positions(n: int, dim: int) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(n, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * freq)
    pe[:, 1::2] = torch.cos(pos * freq[: dim // 2])
    return pe.float()


class _Block(nn.Module):
    """Pre-norm transformer block with an optional key padding mask."""

    def __init__(self, dim: int, heads: int = 4):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        b, n, d = x.shape
        q, k, v = self.qkv(self.ln1(x)).view(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        att = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        if key_mask is not None:
            att = att.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        y = (att.softmax(-1) @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(y)
        return x + self.mlp(self.ln2(x))


def _freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


class FrozenImageEncoder(nn.Module):
    """Patch tokens from a random conv stem and raw pixels, mixed by two
    attention blocks, plus a whole-image summary added to every token.

    The summary whitens global max/mean statistics of both stem layers with a
    PCA fitted once by ``calibrate`` on unlabelled reference images (the frozen
    analogue of pretrained normalisation statistics). Until calibrated the
    summary is zero.
    """

    def __init__(self, height: int, width: int, dim: int = 64, patch_size: int = 16,
                 stem_channels: int = 32, seed: int = 1234, reference_images=None):
        super().__init__()
        if height % patch_size or width % patch_size:
            raise ShapeError("image dims must be multiples of the patch size")
        self.height, self.width, self.patch_size, self.dim = height, width, patch_size, dim
        self.grid = (height // patch_size, width // patch_size)
        gen = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(1, stem_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(stem_channels, stem_channels, 3, padding=1)
        self.raw = nn.Linear(patch_size * patch_size, dim)
        self.feat = nn.Linear(2 * stem_channels, dim)
        self.pos = nn.Parameter(torch.zeros(self.grid[0] * self.grid[1], dim))
        self.blocks = nn.ModuleList([_Block(dim), _Block(dim)])
        self.norm = nn.LayerNorm(dim)
        n_stats = 4 * stem_channels
        self.register_buffer("stat_mean", torch.zeros(n_stats))
        self.register_buffer("stat_proj", torch.zeros(n_stats, dim))
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    fan_in = p[0].numel()
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))
                else:
                    p.copy_(0.1 * torch.randn(p.shape, generator=gen))
            self.conv1.weight.mul_(2.0)
            self.conv1.bias.copy_(torch.rand(stem_channels, generator=gen) * 2.0 - 1.0)
            self.pos.copy_(0.5 * torch.randn(self.pos.shape, generator=gen))
            for m in self.modules():
                if isinstance(m, nn.LayerNorm):
                    m.weight.fill_(1.0)
                    m.bias.zero_()
        _freeze(self)
        if reference_images is not None:
            self.calibrate(reference_images)

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    def _prepare(self, images) -> tuple[torch.Tensor, bool]:
        x = torch.as_tensor(images, dtype=torch.float32)
        squeeze = x.dim() == 2
        if squeeze:
            x = x[None]
        if x.dim() != 3 or tuple(x.shape[-2:]) != (self.height, self.width):
            raise ShapeError(f"expected image(s) of shape {(self.height, self.width)}, got {tuple(x.shape)}")
        return x[:, None] - 0.5, squeeze

    def _stem(self, x):
        h1 = F.relu(self.conv1(x))
        return h1, F.relu(self.conv2(h1))

    @staticmethod
    def _stats(h1, h2) -> torch.Tensor:
        return torch.cat([h2.amax(dim=(2, 3)), h2.mean(dim=(2, 3)), h1.amax(dim=(2, 3)), h1.mean(dim=(2, 3))], 1)

    @torch.no_grad()
    def calibrate(self, images, shrink: float = 1e-2) -> None:
        """Fit the whitening PCA of the standardised global statistics (float64 SVD,
        components sign-fixed so the result does not depend on the solver)."""
        x, _ = self._prepare(images)
        stats = self._stats(*self._stem(x)).double()
        if stats.shape[0] < 2:
            raise InputError("calibration needs at least two reference images")
        mean = stats.mean(0)
        std = stats.std(0).clamp_min(1e-4)
        centred = (stats - mean) / std / math.sqrt(stats.shape[0] - 1)
        _, s, vt = torch.linalg.svd(centred, full_matrices=False)
        k = min(self.dim, vt.shape[0])
        comps = vt[:k]
        sign = torch.sign(comps.gather(1, comps.abs().argmax(1, keepdim=True)))
        comps = comps * sign
        scale = 1.0 / torch.sqrt(s[:k] ** 2 + shrink * s[0] ** 2)
        proj = torch.zeros_like(self.stat_proj, dtype=torch.float64)
        proj[:, :k] = (comps / std).t() * scale
        self.stat_mean.copy_(mean.float())
        self.stat_proj.copy_(proj.float())

    def forward(self, images) -> torch.Tensor:
        x, squeeze = self._prepare(images)
        ps = self.patch_size
        h1, h = self._stem(x)
        pooled = torch.cat([F.avg_pool2d(h, ps), F.max_pool2d(h, ps)], dim=1)  # (B, 2C, g, g)
        pooled = pooled.flatten(2).transpose(1, 2)
        patches = F.unfold(x, ps, stride=ps).transpose(1, 2)  # (B, g*g, ps*ps)
        tokens = self.raw(patches) + self.feat(pooled) + self.pos
        for blk in self.blocks:
            tokens = blk(tokens)
        summary = (self._stats(h1, h) - self.stat_mean) @ self.stat_proj
        out = self.norm(tokens) + summary[:, None]
        return out[0] if squeeze else out


class FrozenTextEncoder(nn.Module):
    def __init__(self, vocab: Vocabulary, dim: int = 64, max_tokens: int = 16, seed: int = 1234):
        super().__init__()
        self.vocab, self.dim, self.max_tokens = vocab, dim, max_tokens
        gen = torch.Generator().manual_seed(seed + 1)
        self.embed = nn.Embedding(len(vocab), dim)
        self.block = _Block(dim)
        self.register_buffer("positions", sinusoidal_positions(max_tokens, dim), persistent=False)
        with torch.no_grad():
            self.embed.weight.copy_(torch.randn(len(vocab), dim, generator=gen))
            for name, p in self.block.named_parameters():
                if "ln" in name:
                    continue
                if p.dim() > 1:
                    p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(p.shape[1]))
                else:
                    p.copy_(0.1 * torch.randn(p.shape, generator=gen))
        _freeze(self)

    def token_ids(self, text: str) -> list[int]:
        return self.vocab.encode(text)[: self.max_tokens]

    def forward(self, texts: str | Sequence[str]) -> torch.Tensor:
        single = isinstance(texts, str)
        batch = [texts] if single else list(texts)
        ids = torch.full((len(batch), self.max_tokens), self.vocab.pad_id, dtype=torch.long)
        valid = torch.zeros(len(batch), self.max_tokens, dtype=torch.bool)
        for i, text in enumerate(batch):
            toks = self.token_ids(text)
            ids[i, : len(toks)] = torch.tensor(toks, dtype=torch.long)
            valid[i, : len(toks)] = True
        emb = self.embed(ids)
        out = emb.clone()
        has_tokens = valid.any(dim=1)
        if has_tokens.any():
            sel = has_tokens.nonzero().flatten()
            enc = self.block(emb[sel] + self.positions, key_mask=valid[sel])
            out[sel] = torch.where(valid[sel, :, None], enc, emb[sel])
        return out[0] if single else out

    def encode_labels(self, label_set: Sequence[str]) -> torch.Tensor:
        if len(label_set) < 2:
            raise InputError("label set needs at least two entries")
        if len(set(label_set)) != len(label_set):
            raise InputError(f"duplicate labels in {list(label_set)}")
        rows = []
        for label in label_set:
            ids = self.vocab.encode(label)
            if not ids:
                raise InputError(f"label {label!r} has no tokens")
            rows.append(self.embed.weight[ids].mean(0))
        mat = torch.stack(rows)
        return mat / mat.norm(dim=1, keepdim=True).clamp_min(1e-12)


def encode_image(encoder: FrozenImageEncoder, image) -> torch.Tensor:
    with torch.no_grad():
        return encoder(image)


def encode_text(encoder: FrozenTextEncoder, text: str) -> torch.Tensor:
    with torch.no_grad():
        return encoder(text)


def encode_labels(encoder: FrozenTextEncoder, label_set: Sequence[str]) -> torch.Tensor:
    with torch.no_grad():
        return encoder.encode_labels(label_set)


def label_strings(labels: Sequence[str]) -> list[str]:
    return [LABEL_TEXT[l] for l in labels]


def as_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()

"""Graph-conditioned skeletal-temporal transformer denoiser.

The network embeds every joint of every frame as its own token. An
enrichment stage prepends the embedded rest pose as an extra temporal token
(frame 0) and adds a per-joint name embedding to all tokens; a stack of
layers then alternates attention across joints (biased by pairwise graph
distances and relation types) and attention across frames (restricted to a
centered window, with the rest-pose token globally visible), each followed
by a feed-forward block. The output projection predicts the clean motion.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .skeleton import RelationKind, Skeleton


@dataclass
class DenoiserConfig:
    layers: int = 4
    latent: int = 128
    heads: int = 4
    window: int = 31
    d_max: int = 5
    max_joints: int = 143
    steps: int = 100
    feature_dim: int = 13
    name_dim: int = 64
    ffn_mult: int = 4

    def __post_init__(self):
        if min(
            self.layers,
            self.latent,
            self.heads,
            self.window,
            self.d_max,
            self.max_joints,
            self.steps,
        ) < 1:
            raise ValueError("all config values must be positive")
        if self.latent % self.heads != 0:
            raise ValueError("latent size must be divisible by the head count")
        if self.window % 2 == 0:
            raise ValueError("temporal window must be odd")

    @property
    def head_dim(self) -> int:
        return self.latent // self.heads


# --- joint-name embedders -------------------------------------------------


class HashedNameEmbedder:
    """Deterministic bag-of-subwords hash embedding for joint names.

    Words and their character trigrams are hashed (stable across runs and
    machines) into a signed ``dim``-bucket vector, then L2-normalized.
    Identical strings always map to identical vectors, which is what lets
    joints share semantics across skeletons.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def _subwords(self, name: str):
        for word in name.split():
            yield word
            padded = f"^{word}$"
            for i in range(len(padded) - 2):
                yield padded[i : i + 3]

    def embed(self, name: str) -> np.ndarray:
        cached = self._cache.get(name)
        if cached is not None:
            return cached
        vec = np.zeros(self.dim)
        for sw in self._subwords(name):
            digest = hashlib.sha256(sw.encode("utf-8")).digest()
            bucket = int.from_bytes(digest[:4], "little") % self.dim
            sign = 1.0 if digest[4] % 2 == 0 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
        self._cache[name] = vec
        return vec


class TableNameEmbedder:
    """Name embeddings loaded from a precomputed table file.

    File format: one entry per line, ``name<TAB>v1 v2 ... vD``. Unknown
    names fall back to hashing unless ``strict`` is set.
    """

    def __init__(self, table: dict[str, np.ndarray], strict: bool = False):
        if not table:
            raise ValueError("embedding table is empty")
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise ValueError("embedding table has inconsistent dimensions")
        self.dim = dims.pop()
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.strict = strict
        self._fallback = HashedNameEmbedder(self.dim)

    @classmethod
    def from_file(cls, path, strict: bool = False) -> "TableNameEmbedder":
        table = {}
        with open(path, "r", encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                name, values = line.split("\t", 1)
                table[name] = np.array([float(v) for v in values.split()])
        return cls(table, strict=strict)

    def embed(self, name: str) -> np.ndarray:
        vec = self.table.get(name)
        if vec is not None:
            return vec
        if self.strict:
            raise KeyError(f"no embedding for joint name {name!r}")
        return self._fallback.embed(name)


def write_name_embedding_file(path, table: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for name, vec in table.items():
            values = " ".join(f"{v:.9g}" for v in np.asarray(vec).ravel())
            f.write(f"{name}\t{values}\n")


# --- batched skeleton condition --------------------------------------------


@dataclass
class SkeletonBatch:
    """Per-sample structural conditions, padded to a common joint count."""

    rest: torch.Tensor  # (B, J, 13)
    dist: torch.Tensor  # (B, J, J) long
    rel: torch.Tensor  # (B, J, J) long
    names: torch.Tensor  # (B, J, name_dim)
    joint_mask: torch.Tensor  # (B, J) bool

    @classmethod
    def from_skeletons(
        cls,
        skeletons: Sequence[Skeleton],
        embedder,
        j_max: Optional[int] = None,
        dtype: torch.dtype = torch.float32,
        device=None,
        d_max: Optional[int] = None,
    ) -> "SkeletonBatch":
        b = len(skeletons)
        j_max = j_max or max(s.joint_count for s in skeletons)
        name_dim = embedder.dim
        rest = torch.zeros(b, j_max, 13, dtype=dtype, device=device)
        dist = torch.zeros(b, j_max, j_max, dtype=torch.long, device=device)
        rel = torch.full(
            (b, j_max, j_max),
            int(RelationKind.NO_RELATION),
            dtype=torch.long,
            device=device,
        )
        names = torch.zeros(b, j_max, name_dim, dtype=dtype, device=device)
        mask = torch.zeros(b, j_max, dtype=torch.bool, device=device)
        for i, s in enumerate(skeletons):
            j = s.joint_count
            if j > j_max:
                raise ValueError(f"skeleton has {j} joints, batch allows {j_max}")
            rest[i, :j] = torch.as_tensor(s.pose_features, dtype=dtype)
            distances = torch.as_tensor(s.distances, dtype=torch.long)
            if d_max is not None:
                # capping an already capped tree distance is still exact
                distances = distances.clamp(max=d_max)
            dist[i, :j, :j] = distances
            rel[i, :j, :j] = torch.as_tensor(s.relations, dtype=torch.long)
            vecs = np.stack([embedder.embed(nm) for nm in s.names])
            names[i, :j] = torch.as_tensor(vecs, dtype=dtype)
            mask[i, :j] = True
        return cls(rest=rest, dist=dist, rel=rel, names=names, joint_mask=mask)


# --- attention ------------------------------------------------------------


def sinusoidal_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of (...,) positions into (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0)
        * torch.arange(half, dtype=positions.dtype, device=positions.device)
        / max(half - 1, 1)
    )
    args = positions.unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2 == 1:
        emb = F.pad(emb, (0, 1))
    return emb


def graph_attention_logits(
    q: torch.Tensor,
    k: torch.Tensor,
    e_d_q: torch.Tensor,
    e_d_k: torch.Tensor,
    e_r_q: torch.Tensor,
    e_r_k: torch.Tensor,
    dist: torch.Tensor,
    rel: torch.Tensor,
    latent: int,
) -> torch.Tensor:
    """Skeletal attention logits with the graph bias terms.

    For joints i (query) and j (key), per head::

        a_ij = (q_i . k_j
                + q_i . E_q^dist[d_ij] + k_j . E_k^dist[d_ij]
                + q_i . E_q^rel[r_ij]  + k_j . E_k^rel[r_ij]) / sqrt(latent)

    Shapes: q, k are (B, T, J, H, hd); the embedding tables are
    (H, rows, hd); dist/rel are (B, J, J). Returns (B, H, T, J, J).
    """
    base = torch.einsum("btihd,btjhd->bhtij", q, k)
    ed_q = e_d_q[:, dist].permute(1, 0, 2, 3, 4)  # (B, H, J, J, hd)
    ed_k = e_d_k[:, dist].permute(1, 0, 2, 3, 4)
    er_q = e_r_q[:, rel].permute(1, 0, 2, 3, 4)
    er_k = e_r_k[:, rel].permute(1, 0, 2, 3, 4)
    bias_d = torch.einsum("btihd,bhijd->bhtij", q, ed_q) + torch.einsum(
        "btjhd,bhijd->bhtij", k, ed_k
    )
    bias_r = torch.einsum("btihd,bhijd->bhtij", q, er_q) + torch.einsum(
        "btjhd,bhijd->bhtij", k, er_k
    )
    return (base + bias_d + bias_r) / math.sqrt(latent)


class SkeletalAttention(nn.Module):
    """Per-frame self-attention over all joints with graph-derived bias."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        hd = config.head_dim
        self.qkv = nn.Linear(config.latent, 3 * config.latent)
        self.out = nn.Linear(config.latent, config.latent)
        self.dist_q = nn.Parameter(torch.zeros(config.heads, config.d_max + 1, hd))
        self.dist_k = nn.Parameter(torch.zeros(config.heads, config.d_max + 1, hd))
        self.rel_q = nn.Parameter(torch.zeros(config.heads, len(RelationKind), hd))
        self.rel_k = nn.Parameter(torch.zeros(config.heads, len(RelationKind), hd))
        for table in (self.dist_q, self.dist_k, self.rel_q, self.rel_k):
            nn.init.normal_(table, std=0.02)

    def forward(
        self,
        h: torch.Tensor,
        dist: torch.Tensor,
        rel: torch.Tensor,
        joint_mask: torch.Tensor,
        need_weights: bool = False,
    ):
        b, t, j, f = h.shape
        cfg = self.config
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(b, t, j, cfg.heads, cfg.head_dim)
        k = k.view(b, t, j, cfg.heads, cfg.head_dim)
        v = v.view(b, t, j, cfg.heads, cfg.head_dim)
        logits = graph_attention_logits(
            q,
            k,
            self.dist_q,
            self.dist_k,
            self.rel_q,
            self.rel_k,
            dist,
            rel,
            cfg.latent,
        )
        key_mask = joint_mask[:, None, None, None, :]
        logits = logits.masked_fill(~key_mask, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = torch.einsum("bhtij,btjhd->btihd", attn, v).reshape(b, t, j, f)
        out = self.out(out)
        if need_weights:
            return out, attn
        return out


class TemporalAttention(nn.Module):
    """Per-joint self-attention over frames within a centered window.

    Token 0 is the rest-pose condition: it is visible to every frame and
    attends over the whole sequence regardless of the window.
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        self.qkv = nn.Linear(config.latent, 3 * config.latent)
        self.out = nn.Linear(config.latent, config.latent)

    def window_mask(self, tokens: int, device) -> torch.Tensor:
        idx = torch.arange(tokens, device=device)
        near = (idx[:, None] - idx[None, :]).abs() <= (self.config.window - 1) // 2
        near[0, :] = True
        near[:, 0] = True
        return near

    def forward(
        self, h: torch.Tensor, token_mask: torch.Tensor, need_weights: bool = False
    ):
        b, t, j, f = h.shape
        cfg = self.config
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(b, t, j, cfg.heads, cfg.head_dim)
        k = k.view(b, t, j, cfg.heads, cfg.head_dim)
        v = v.view(b, t, j, cfg.heads, cfg.head_dim)
        logits = torch.einsum("btjhd,bsjhd->bhjts", q, k) / math.sqrt(cfg.head_dim)
        allowed = self.window_mask(t, h.device)[None, None, None, :, :]
        allowed = allowed & token_mask[:, None, None, None, :]
        logits = logits.masked_fill(~allowed, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        out = torch.einsum("bhjts,bsjhd->btjhd", attn, v).reshape(b, t, j, f)
        out = self.out(out)
        if need_weights:
            return out, attn
        return out


class SttLayer(nn.Module):
    """Skeletal attention, temporal attention, feed-forward; pre-norm residuals."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.norm_skel = nn.LayerNorm(config.latent)
        self.norm_temp = nn.LayerNorm(config.latent)
        self.norm_ffn = nn.LayerNorm(config.latent)
        self.skeletal = SkeletalAttention(config)
        self.temporal = TemporalAttention(config)
        self.ffn = nn.Sequential(
            nn.Linear(config.latent, config.ffn_mult * config.latent),
            nn.GELU(),
            nn.Linear(config.ffn_mult * config.latent, config.latent),
        )

    def forward(self, h, dist, rel, joint_mask, token_mask):
        h = h + self.skeletal(self.norm_skel(h), dist, rel, joint_mask)
        h = h + self.temporal(self.norm_temp(h), token_mask)
        h = h + self.ffn(self.norm_ffn(h))
        return h


@dataclass
class ActivationTap:
    """Read-only capture of one layer's output during a forward pass.

    ``activations`` holds the motion-frame tokens (the rest-pose token is
    excluded) with shape (B, frames, joints, latent).
    """

    layer: int
    activations: Optional[torch.Tensor] = None


class Denoiser(nn.Module):
    """Predicts the clean motion from a noised motion, a diffusion step, and
    a skeleton condition."""

    def __init__(self, config: DenoiserConfig, name_embedder=None):
        super().__init__()
        self.config = config
        self.name_embedder = name_embedder or HashedNameEmbedder(config.name_dim)
        if self.name_embedder.dim != config.name_dim:
            raise ValueError("name embedder dimension does not match the config")
        self.input_proj = nn.Linear(config.feature_dim, config.latent)
        self.rest_proj = nn.Linear(config.feature_dim, config.latent)
        self.name_proj = nn.Linear(config.name_dim, config.latent)
        self.time_mlp = nn.Sequential(
            nn.Linear(config.latent, config.latent),
            nn.SiLU(),
            nn.Linear(config.latent, config.latent),
        )
        self.layers = nn.ModuleList(
            SttLayer(config) for _ in range(config.layers)
        )
        self.final_norm = nn.LayerNorm(config.latent)
        self.out_proj = nn.Linear(config.latent, config.feature_dim)

    @property
    def dtype(self) -> torch.dtype:
        return self.input_proj.weight.dtype

    @property
    def device(self):
        return self.input_proj.weight.device

    def make_condition(
        self, skeletons: Sequence[Skeleton], j_max: Optional[int] = None
    ) -> SkeletonBatch:
        return SkeletonBatch.from_skeletons(
            skeletons,
            self.name_embedder,
            j_max=j_max,
            dtype=self.dtype,
            device=self.device,
            d_max=self.config.d_max,
        )

    def capture_activations(self, layer: int) -> ActivationTap:
        if not (0 <= layer < self.config.layers):
            raise ValueError(
                f"layer {layer} out of range [0, {self.config.layers})"
            )
        return ActivationTap(layer=layer)

    def enrich(
        self,
        x: torch.Tensor,
        cond: SkeletonBatch,
        crop_index: torch.Tensor | int = 0,
    ) -> torch.Tensor:
        """Embed motion tokens, prepend the rest-pose token as frame 0, add
        name embeddings, and add the crop-relative positional encoding."""
        b, n, j, d = x.shape
        if j > self.config.max_joints:
            raise ValueError(
                f"{j} joints exceeds the configured maximum {self.config.max_joints}"
            )
        if d != self.config.feature_dim:
            raise ValueError(f"expected feature dim {self.config.feature_dim}")
        h = self.input_proj(x)
        rest_tok = self.rest_proj(cond.rest).unsqueeze(1)  # (B, 1, J, F)
        h = torch.cat([rest_tok, h], dim=1)
        h = h + self.name_proj(cond.names).unsqueeze(1)
        if not torch.is_tensor(crop_index):
            crop_index = torch.full((b,), int(crop_index), device=x.device)
        positions = torch.zeros(b, n + 1, dtype=self.dtype, device=x.device)
        positions[:, 1:] = crop_index.to(self.dtype).unsqueeze(1) + torch.arange(
            1, n + 1, dtype=self.dtype, device=x.device
        )
        h = h + sinusoidal_embedding(positions, self.config.latent).unsqueeze(2)
        return h

    def forward(
        self,
        x: torch.Tensor,
        t: torch.Tensor | int,
        cond: SkeletonBatch,
        crop_index: torch.Tensor | int = 0,
        frame_mask: Optional[torch.Tensor] = None,
        tap: Optional[ActivationTap] = None,
    ) -> torch.Tensor:
        """Denoise ``x`` (B, N, J, 13) at diffusion step ``t`` (in [1, T]).

        Padded positions (per ``frame_mask`` and the condition's joint mask)
        are zeroed in the output.
        """
        b, n, j, _ = x.shape
        if not torch.is_tensor(t):
            t = torch.full((b,), int(t), device=x.device, dtype=torch.long)
        if torch.any(t < 1) or torch.any(t > self.config.steps):
            raise ValueError(f"diffusion step out of range [1, {self.config.steps}]")
        if frame_mask is None:
            frame_mask = torch.ones(b, n, dtype=torch.bool, device=x.device)
        if cond.joint_mask.shape != (b, j):
            raise ValueError("condition joint mask does not match the input")

        h = self.enrich(x, cond, crop_index)
        temb = self.time_mlp(sinusoidal_embedding(t.to(self.dtype), self.config.latent))
        h = h + temb[:, None, None, :]

        token_mask = torch.cat(
            [torch.ones(b, 1, dtype=torch.bool, device=x.device), frame_mask], dim=1
        )
        for idx, layer in enumerate(self.layers):
            h = layer(h, cond.dist, cond.rel, cond.joint_mask, token_mask)
            if tap is not None and tap.layer == idx:
                captured = h[:, 1:].detach().clone()
                valid = frame_mask[:, :, None, None] & cond.joint_mask[:, None, :, None]
                tap.activations = captured * valid.to(captured.dtype)

        h = self.final_norm(h)
        out = self.out_proj(h[:, 1:])
        valid = frame_mask[:, :, None, None] & cond.joint_mask[:, None, :, None]
        return out * valid.to(out.dtype)

    def parameter_shapes(self) -> dict[str, list[int]]:
        return {name: list(p.shape) for name, p in self.named_parameters()}

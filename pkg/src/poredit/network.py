"""Transformer backbone: 3D patch embedding, positional/conditional
embeddings, alternating plain/shifted window attention blocks, condition-
modulated final projection, unpatchify.

All math runs on the DiffTensor engine. Window partitioning, cyclic shifts
and the shifted-window attention mask follow the standard windowed-attention
construction; the relative-position bias is a per-head (2M-1)^3 table indexed
by the flattened coordinate offset of each ordered token pair."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndtensor as nd
from . import rng

MASK_NEG = -1e9
CKPT_MAGIC = b"PDTC"


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    patch: int = 8
    embed_dim: int = 96
    depth: int = 4
    heads: int = 4
    window: int = 4
    mlp_ratio: float = 4.0
    cond_dropout: float = 0.1
    s2_cond_dim: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.input_size % self.patch:
            raise ValueError(f"input_size {self.input_size} not divisible by patch {self.patch}")
        latent = self.input_size // self.patch
        if latent % self.window:
            raise ValueError(f"latent edge {latent} not divisible by window {self.window}")
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.depth % 2:
            raise ValueError("depth must be even (plain/shifted blocks alternate in pairs)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype}")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0,1)")

    @property
    def latent_edge(self) -> int:
        return self.input_size // self.patch

    @property
    def tokens(self) -> int:
        return self.latent_edge**3

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def shift(self) -> int:
        # no shift when a single window spans the latent grid
        return self.window // 2 if self.latent_edge > self.window else 0


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    """(D,H,W) -> (N, p^3): non-overlapping cubes, patches and intra-patch
    voxels both in z-major raster order."""
    d, h, w = x.shape
    g = x.reshape(d // p, p, h // p, p, w // p, p)
    return g.transpose(0, 2, 4, 1, 3, 5).reshape(-1, p**3)


def embed_scalar(s: float, d: int) -> np.ndarray:
    """Sinusoidal frequency embedding: Emb(s,2i)=sin(s/10000^(2i/d))."""
    if d % 2:
        raise ValueError("embedding dimension must be even")
    i = np.arange(d // 2, dtype=np.float64)
    freq = s / np.power(10000.0, 2.0 * i / d)
    out = np.empty(d, dtype=np.float64)
    out[0::2] = np.sin(freq)
    out[1::2] = np.cos(freq)
    return out


def _relative_position_index(m: int) -> np.ndarray:
    """(M^3, M^3) flattened (2M-1)^3 offset index for ordered token pairs."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m), np.arange(m), indexing="ij"), axis=-1).reshape(-1, 3)
    diff = coords[:, None, :] - coords[None, :, :] + (m - 1)
    return (diff[..., 0] * (2 * m - 1) + diff[..., 1]) * (2 * m - 1) + diff[..., 2]


def _window_codes(edge: int, m: int, shift: int) -> np.ndarray:
    """Per-axis region codes for the shifted-window mask."""
    codes = np.zeros(edge, dtype=np.int64)
    if shift == 0:
        return codes
    codes[edge - m : edge - shift] = 1
    codes[edge - shift :] = 2
    return codes


def _attn_mask(edge: int, m: int, shift: int) -> np.ndarray | None:
    """Additive mask (NW, 1, M^3, M^3) blocking logically non-adjacent pairs
    composed into one window by the cyclic shift."""
    if shift == 0:
        return None
    ax = _window_codes(edge, m, shift)
    img = ax[:, None, None] * 9 + ax[None, :, None] * 3 + ax[None, None, :]
    wins = patchify(img.astype(np.float64), m)  # (NW, M^3) of region codes
    diff = wins[:, :, None] != wins[:, None, :]
    return np.where(diff, MASK_NEG, 0.0)[:, None, :, :]


class PoreDiTModel:
    """Parameter set + shape configuration; forward builds a gradient graph
    unless called inside ndtensor.no_grad()."""

    def __init__(self, config: ModelConfig, params: dict[str, nd.DiffTensor], phi_mean: float = 0.0, phi_std: float = 1.0, meta: dict | None = None):
        self.config = config
        self.params = params
        self.phi_mean = float(phi_mean)
        self.phi_std = float(phi_std)
        self.meta = dict(meta or {})
        self._rel_idx = _relative_position_index(config.window)
        self._mask = _attn_mask(config.latent_edge, config.window, config.shift)

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "PoreDiTModel":
        dt = np.dtype(config.dtype)
        c = config.embed_dim
        p3 = config.patch**3
        hid = int(config.mlp_ratio * c)
        table = (2 * config.window - 1) ** 3

        gen = rng.stream(seed, "init-params")

        def w(*shape, scale=0.02):
            return nd.parameter((gen.standard_normal(shape) * scale).astype(dt))

        def zeros(*shape):
            return nd.parameter(np.zeros(shape, dtype=dt))

        def ones(*shape):
            return nd.parameter(np.ones(shape, dtype=dt))

        params: dict[str, nd.DiffTensor] = {
            "patch.w": w(p3, c),
            "patch.b": zeros(c),
            "pos": w(config.tokens, c),
            "null_cond": w(1, c),
            "tmlp.w1": w(c, c),
            "tmlp.b1": zeros(c),
            "tmlp.w2": w(c, c),
            "tmlp.b2": zeros(c),
            "pmlp.w1": w(c, c),
            "pmlp.b1": zeros(c),
            "pmlp.w2": w(c, c),
            "pmlp.b2": zeros(c),
        }
        if config.s2_cond_dim:
            params.update(
                {
                    "smlp.w1": w(config.s2_cond_dim, c),
                    "smlp.b1": zeros(c),
                    "smlp.w2": w(c, c),
                    "smlp.b2": zeros(c),
                }
            )
        for i in range(config.depth):
            pre = f"block{i}."
            params.update(
                {
                    pre + "ln1.g": ones(c),
                    pre + "ln1.b": zeros(c),
                    pre + "qkv.w": w(c, 3 * c),
                    pre + "qkv.b": zeros(3 * c),
                    pre + "attn_out.w": w(c, c),
                    pre + "attn_out.b": zeros(c),
                    pre + "bias_table": zeros(table, config.heads),
                    pre + "ln2.g": ones(c),
                    pre + "ln2.b": zeros(c),
                    pre + "mlp.w1": w(c, hid),
                    pre + "mlp.b1": zeros(hid),
                    pre + "mlp.w2": w(hid, c),
                    pre + "mlp.b2": zeros(c),
                }
            )
        # condition-regressed scale/shift starts as identity; output starts at 0
        ada_b = np.concatenate([np.ones(c), np.zeros(c)]).astype(dt)
        params.update(
            {
                "final.ada.w": zeros(c, 2 * c),
                "final.ada.b": nd.parameter(ada_b),
                "final.out.w": zeros(c, p3),
                "final.out.b": zeros(p3),
            }
        )
        return cls(config, params)

    def copy(self) -> "PoreDiTModel":
        """Deep copy: independent parameter tensors, shared config."""
        params = {k: nd.parameter(v.data.copy()) for k, v in self.params.items()}
        return PoreDiTModel(self.config, params, self.phi_mean, self.phi_std,
                            dict(self.meta))

    def count_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # ------------------------------------------------------------------
    # forward pieces

    def _mlp2(self, prefix: str, x: nd.DiffTensor) -> nd.DiffTensor:
        p = self.params
        h = nd.silu(nd.matmul(x, p[prefix + ".w1"]) + p[prefix + ".b1"])
        return nd.matmul(h, p[prefix + ".w2"]) + p[prefix + ".b2"]

    def build_condition(self, t: float, phi: float | None, s2_feats=None, drop: bool = False) -> nd.DiffTensor:
        """c = MLP_t(emb(t)) + physical part; when dropped, the physical part
        (porosity and any S2 features) is replaced by the null embedding while
        the time component is kept."""
        c = self.config.embed_dim
        emb_t = nd.as_tensor(embed_scalar(float(t), c).reshape(1, c))
        c_t = self._mlp2("tmlp", emb_t)
        if drop or phi is None:
            return c_t + self.params["null_cond"]
        phi_norm = (float(phi) - self.phi_mean) / self.phi_std
        emb_p = nd.as_tensor(embed_scalar(phi_norm, c).reshape(1, c))
        c_phys = self._mlp2("pmlp", emb_p)
        if self.config.s2_cond_dim:
            if s2_feats is None:
                raise ValueError("model expects s2 condition features")
            feats = np.asarray(s2_feats, dtype=np.float64).reshape(1, self.config.s2_cond_dim)
            c_phys = c_phys + self._mlp2("smlp", nd.as_tensor(feats))
        return c_t + c_phys

    def patch_embed(self, x_t: np.ndarray) -> nd.DiffTensor:
        cfg = self.config
        if x_t.shape != (cfg.input_size,) * 3:
            raise ValueError(f"volume shape {x_t.shape} does not match config input_size {cfg.input_size}")
        flat = nd.as_tensor(patchify(np.asarray(x_t, dtype=np.float64), cfg.patch))
        return nd.matmul(flat, self.params["patch.w"]) + self.params["patch.b"]

    def _window_partition(self, grid: nd.DiffTensor) -> nd.DiffTensor:
        e, m, c = self.config.latent_edge, self.config.window, self.config.embed_dim
        n = e // m
        g = nd.reshape(grid, (n, m, n, m, n, m, c))
        g = nd.permute(g, (0, 2, 4, 1, 3, 5, 6))
        return nd.reshape(g, (n**3, m**3, c))

    def _window_merge(self, wins: nd.DiffTensor) -> nd.DiffTensor:
        e, m, c = self.config.latent_edge, self.config.window, self.config.embed_dim
        n = e // m
        g = nd.reshape(wins, (n, n, n, m, m, m, c))
        g = nd.permute(g, (0, 3, 1, 4, 2, 5, 6))
        return nd.reshape(g, (e, e, e, c))

    def window_attention(self, grid: nd.DiffTensor, block: int, shifted: bool) -> nd.DiffTensor:
        cfg = self.config
        p = self.params
        pre = f"block{block}."
        m3 = cfg.window**3
        h, d = cfg.heads, cfg.head_dim
        shift = cfg.shift if shifted else 0
        if shift:
            grid = nd.roll(grid, (-shift,) * 3, (0, 1, 2))
        wins = self._window_partition(grid)  # (NW, M^3, C)
        nw = wins.shape[0]
        qkv = nd.matmul(wins, p[pre + "qkv.w"]) + p[pre + "qkv.b"]
        q, k, v = nd.split(qkv, [cfg.embed_dim] * 3, axis=-1)

        def heads(x):
            return nd.permute(nd.reshape(x, (nw, m3, h, d)), (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        attn = nd.matmul(q, nd.permute(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(d))
        bias = nd.permute(nd.gather_rows(p[pre + "bias_table"], self._rel_idx), (2, 0, 1))
        attn = attn + bias
        if shift and self._mask is not None:
            attn = attn + nd.as_tensor(self._mask)
        out = nd.matmul(nd.softmax(attn), v)  # (NW, h, M^3, d)
        out = nd.reshape(nd.permute(out, (0, 2, 1, 3)), (nw, m3, cfg.embed_dim))
        out = nd.matmul(out, p[pre + "attn_out.w"]) + p[pre + "attn_out.b"]
        merged = self._window_merge(out)
        if shift:
            merged = nd.roll(merged, (shift,) * 3, (0, 1, 2))
        return merged

    def _block(self, grid: nd.DiffTensor, i: int) -> nd.DiffTensor:
        p = self.params
        pre = f"block{i}."
        attn = self.window_attention(nd.layer_norm(grid, p[pre + "ln1.g"], p[pre + "ln1.b"]), i, shifted=bool(i % 2))
        grid = attn + grid
        hmid = nd.gelu(nd.matmul(nd.layer_norm(grid, p[pre + "ln2.g"], p[pre + "ln2.b"]), p[pre + "mlp.w1"]) + p[pre + "mlp.b1"])
        mlp = nd.matmul(hmid, p[pre + "mlp.w2"]) + p[pre + "mlp.b2"]
        return mlp + grid

    def final_layer(self, z: nd.DiffTensor, cond: nd.DiffTensor) -> nd.DiffTensor:
        """Condition-regressed scale/shift layer norm, GELU, output projection,
        unpatchify to a logits volume."""
        cfg = self.config
        p = self.params
        c = cfg.embed_dim
        ada = nd.matmul(nd.silu(cond), p["final.ada.w"]) + p["final.ada.b"]
        gamma, beta = nd.split(ada, [c, c], axis=-1)
        zhat = nd.layer_norm(z) * gamma + beta
        vhat = nd.matmul(nd.gelu(zhat), p["final.out.w"]) + p["final.out.b"]  # (N, p^3)
        return self.unpatchify(vhat)

    def unpatchify(self, vhat: nd.DiffTensor) -> nd.DiffTensor:
        cfg = self.config
        e, p = cfg.latent_edge, cfg.patch
        g = nd.reshape(vhat, (e, e, e, p, p, p))
        g = nd.permute(g, (0, 3, 1, 4, 2, 5))
        return nd.reshape(g, (cfg.input_size,) * 3)

    def forward_logits(
        self, x_t: np.ndarray, t: float, phi: float | None, s2_feats=None, drop_condition: bool = False
    ) -> nd.DiffTensor:
        cfg = self.config
        z = self.patch_embed(x_t)
        cond = self.build_condition(t, phi, s2_feats=s2_feats, drop=drop_condition)
        z = z + self.params["pos"] + cond
        grid = nd.reshape(z, (cfg.latent_edge,) * 3 + (cfg.embed_dim,))
        for i in range(cfg.depth):
            grid = self._block(grid, i)
        z = nd.reshape(grid, (cfg.tokens, cfg.embed_dim))
        return self.final_layer(z, cond)

    def forward(self, x_t: np.ndarray, t: float, phi: float | None, s2_feats=None, drop_condition: bool = False) -> np.ndarray:
        with nd.no_grad():
            return self.forward_logits(x_t, t, phi, s2_feats=s2_feats, drop_condition=drop_condition).data

    # ------------------------------------------------------------------
    # checkpoint IO: JSON header + raw little-endian float32 payload

    def save(self, path) -> None:
        names = sorted(self.params)
        manifest = []
        offset = 0
        blobs = []
        for name in names:
            arr = np.ascontiguousarray(self.params[name].data, dtype="<f4")
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = {
            "config": asdict(self.config),
            "phi_mean": self.phi_mean,
            "phi_std": self.phi_std,
            "meta": self.meta,
            "tensors": manifest,
        }
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", len(hb)))
            f.write(hb)
            for b in blobs:
                f.write(b)

    @classmethod
    def load(cls, path) -> "PoreDiTModel":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != CKPT_MAGIC:
                raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
            (hlen,) = struct.unpack("<I", f.read(4))
            header = json.loads(f.read(hlen))
            payload = f.read()
        config = ModelConfig(**header["config"])
        dt = np.dtype(config.dtype)
        params = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
            params[entry["name"]] = nd.parameter(arr.reshape(shape).astype(dt))
        return cls(config, params, header.get("phi_mean", 0.0), header.get("phi_std", 1.0), header.get("meta"))


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count; must match the runtime count."""
    c = config.embed_dim
    p3 = config.patch**3
    hid = int(config.mlp_ratio * c)
    n = config.tokens
    table = (2 * config.window - 1) ** 3
    total = p3 * c + c  # patch projection
    total += n * c  # positional table
    total += c  # null condition
    total += 2 * (2 * c * c + 2 * c)  # time + porosity MLPs
    if config.s2_cond_dim:
        total += config.s2_cond_dim * c + c + c * c + c
    per_block = 4 * c  # two layer norms
    per_block += 3 * c * c + 3 * c + c * c + c  # qkv + output projections
    per_block += table * config.heads  # relative position bias
    per_block += c * hid + hid + hid * c + c  # MLP
    total += config.depth * per_block
    total += c * 2 * c + 2 * c  # condition scale/shift regressor
    total += c * p3 + p3  # output projection
    return total

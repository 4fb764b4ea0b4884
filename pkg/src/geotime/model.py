"""Geo-temporal embedding network.

Three modality encoders (image features, location, time) produce token
matrices; one shared transformer block refines any single modality or
pair of modalities; each modality's token segment is mean-pooled, projected
with its own head and L2-normalized. A pair's embedding is the normalized
sum of its two constituent embeddings. Two MLP heads classify the image
embedding into HEALPix cells and month x hour bins.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import atomic_write_bytes, load_tensors, save_tensors
from .geomath import N_TIME_BINS, check_nside

MODALITIES = ("v", "l", "t")
# the six input configurations, in training order
CONFIGURATIONS = (("v",), ("l",), ("t",), ("v", "l"), ("v", "t"), ("l", "t"))


class DegenerateFusionError(ValueError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    n_freq: int = 10
    n_tokens_v: int = 1
    n_tokens_l: int = 1
    n_tokens_t: int = 1
    img_feat_dim: int = 32
    geo_nside: int = 8
    tau: float = 0.07
    init_seed: int = 0

    def __post_init__(self):
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.n_freq <= 0:
            raise ValueError("n_freq must be positive")
        if min(self.n_tokens_v, self.n_tokens_l, self.n_tokens_t) < 1:
            raise ValueError("every modality needs at least one token")
        if self.img_feat_dim <= 0:
            raise ValueError("img_feat_dim must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        check_nside(self.geo_nside)

    @property
    def n_geo_classes(self) -> int:
        return 12 * self.geo_nside**2

    @property
    def n_time_classes(self) -> int:
        return N_TIME_BINS

    def n_tokens(self, modality: str) -> int:
        return {"v": self.n_tokens_v, "l": self.n_tokens_l, "t": self.n_tokens_t}[modality]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def init_params(cfg: ModelConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Fresh parameters; weights ~ N(0, 1/fan_in), biases 0, LN gains 1."""
    rng = np.random.default_rng(cfg.init_seed if seed is None else seed)
    d = cfg.d
    p: dict[str, np.ndarray] = {}

    def lin(name, n_in, n_out):
        p[name + "_w"] = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
        p[name + "_b"] = np.zeros(n_out)

    def ln(name):
        p[name + "_g"] = np.ones(d)
        p[name + "_b"] = np.zeros(d)

    n_rff = 4 * cfg.n_freq
    for enc, nt in (("loc", cfg.n_tokens_l), ("time", cfg.n_tokens_t)):
        lin(f"{enc}_fc1", n_rff, d)
        lin(f"{enc}_fc2", d, d * nt)
        ln(f"{enc}_ln")
    lin("img_fc", cfg.img_feat_dim, d * cfg.n_tokens_v)
    ln("img_ln")

    ln("blk_ln1")
    for k in "qkvo":
        p[f"blk_w{k}"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d))
        p[f"blk_b{k}"] = np.zeros(d)
    ln("blk_ln2")
    p["blk_mlp_w1"] = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, 4 * d))
    p["blk_mlp_b1"] = np.zeros(4 * d)
    p["blk_mlp_w2"] = rng.normal(0.0, 1.0 / np.sqrt(4 * d), size=(4 * d, d))
    p["blk_mlp_b2"] = np.zeros(d)

    for m in MODALITIES:
        lin(f"proj_{m}", d, d)
    lin("geo_fc1", d, d)
    lin("geo_fc2", d, cfg.n_geo_classes)
    lin("tod_fc1", d, d)
    lin("tod_fc2", d, cfg.n_time_classes)
    return p


def as_tensors(params: dict[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# encoders


def rff_features(points, n_freq: int = 10) -> np.ndarray:
    """Sinusoidal features of 2-D inputs at frequencies 2**0 .. 2**(n_freq-1).

    For each frequency f the block is [sin(f a), cos(f a), sin(f b), cos(f b)];
    output width is 4 * n_freq.
    """
    pts = np.asarray(points, dtype=float)
    freqs = 2.0 ** np.arange(n_freq)
    a = pts[..., 0:1] * freqs
    b = pts[..., 1:2] * freqs
    out = np.stack([np.sin(a), np.cos(a), np.sin(b), np.cos(b)], axis=-1)
    return out.reshape(pts.shape[:-1] + (4 * n_freq,))


def location_rff(coords, n_freq: int) -> np.ndarray:
    return rff_features(np.radians(np.asarray(coords, dtype=float)), n_freq)


def time_rff(torus, n_freq: int) -> np.ndarray:
    return rff_features(2 * np.pi * np.asarray(torus, dtype=float), n_freq)


def _tokens(h: Tensor, n_tokens: int, d: int, p: dict[str, Tensor], ln: str) -> Tensor:
    h = ad.reshape(h, (h.shape[0], n_tokens, d))
    return ad.layer_norm_affine(h, p[ln + "_g"], p[ln + "_b"])


def _encode_2d(feats: np.ndarray, p, enc: str, n_tokens: int, d: int) -> Tensor:
    h = ad.relu(ad.linear(Tensor(feats), p[f"{enc}_fc1_w"], p[f"{enc}_fc1_b"]))
    h = ad.linear(h, p[f"{enc}_fc2_w"], p[f"{enc}_fc2_b"])
    return _tokens(h, n_tokens, d, p, f"{enc}_ln")


def encode_location(coords, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, 2) degrees -> (B, N_L, d) tokens."""
    feats = location_rff(np.atleast_2d(coords), cfg.n_freq)
    return _encode_2d(feats, p, "loc", cfg.n_tokens_l, cfg.d)


def encode_time(torus, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, 2) torus points -> (B, N_T, d) tokens."""
    feats = time_rff(np.atleast_2d(torus), cfg.n_freq)
    return _encode_2d(feats, p, "time", cfg.n_tokens_t, cfg.d)


def adapt_image(feats, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B, img_feat_dim) precomputed image features -> (B, N_V, d) tokens."""
    x = np.atleast_2d(np.asarray(feats, dtype=float))
    if x.shape[-1] != cfg.img_feat_dim:
        raise ad.DimensionError(
            f"image features have width {x.shape[-1]}, model expects {cfg.img_feat_dim}"
        )
    h = ad.linear(Tensor(x), p["img_fc_w"], p["img_fc_b"])
    return _tokens(h, cfg.n_tokens_v, cfg.d, p, "img_ln")


# ---------------------------------------------------------------------------
# fusion


def fusion_block(x: Tensor, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    return ad.transformer_block(x, p, cfg.heads, prefix="blk_")


def _pool_project(x: Tensor, modality: str, p: dict[str, Tensor]) -> Tensor:
    pooled = ad.mean_rows(x)
    return ad.l2_normalize(ad.linear(pooled, p[f"proj_{modality}_w"], p[f"proj_{modality}_b"]))


def fuse(tokens: dict[str, Tensor], p: dict[str, Tensor], cfg: ModelConfig, return_parts: bool = False):
    """Embed one modality or a pair through the shared block.

    `tokens` maps modality letters ('v', 'l', 't') to (B, N_x, d) token
    tensors. A single modality yields its unit embedding. A pair is
    concatenated along tokens, passed through the block, and each modality's
    own rows are pooled and projected; the result is the normalized sum of
    the two unit embeddings. With ``return_parts`` a pair returns
    ``(fused, {modality: unit embedding})``.
    """
    mods = [m for m in MODALITIES if m in tokens]
    if not 1 <= len(mods) <= 2 or len(mods) != len(tokens):
        raise ValueError(f"fuse takes one or two of {MODALITIES}, got {sorted(tokens)}")
    if len(mods) == 1:
        m = mods[0]
        out = _pool_project(fusion_block(tokens[m], p, cfg), m, p)
        return (out, {m: out}) if return_parts else out

    x = ad.concat_rows([tokens[m] for m in mods])
    y = fusion_block(x, p, cfg)
    parts = {}
    start = 0
    for m in mods:
        n = tokens[m].shape[-2]
        parts[m] = _pool_project(ad.slice_rows(y, start, start + n), m, p)
        start += n
    fused = average_unit(parts[mods[0]], parts[mods[1]])
    return (fused, parts) if return_parts else fused


def average_unit(a: Tensor, b: Tensor) -> Tensor:
    """(a + b) / ||a + b|| for unit vectors; raises on (near) antipodal pairs."""
    s = ad.add(a, b)
    norms = np.sqrt((s.data * s.data).sum(axis=-1))
    if np.any(norms < 1e-12):
        raise DegenerateFusionError("constituent embeddings are antipodal; fused direction undefined")
    return ad.l2_normalize(s)


def embed_six(feats, coords, torus, p: dict[str, Tensor], cfg: ModelConfig) -> dict[str, Tensor]:
    """All six embeddings for a batch of (image features, location, time) triplets.

    Keys: 'v', 'l', 't', 'vl', 'vt', 'lt'.
    """
    tok = {"v": adapt_image(feats, p, cfg), "l": encode_location(coords, p, cfg), "t": encode_time(torus, p, cfg)}
    return {"".join(c): fuse({m: tok[m] for m in c}, p, cfg) for c in CONFIGURATIONS}


# ---------------------------------------------------------------------------
# heads


def _head_logits(v: Tensor, p: dict[str, Tensor], head: str) -> Tensor:
    h = ad.relu(ad.linear(v, p[f"{head}_fc1_w"], p[f"{head}_fc1_b"]))
    return ad.linear(h, p[f"{head}_fc2_w"], p[f"{head}_fc2_b"])


def geo_logits(v: Tensor, p: dict[str, Tensor]) -> Tensor:
    return _head_logits(v, p, "geo")


def time_logits(v: Tensor, p: dict[str, Tensor]) -> Tensor:
    return _head_logits(v, p, "tod")


def classify_geo(v, p: dict[str, Tensor]) -> np.ndarray:
    """Probabilities over HEALPix cells for unit image embeddings."""
    return ad.softmax_rows(geo_logits(ad.as_tensor(v), p)).data


def classify_time(v, p: dict[str, Tensor]) -> np.ndarray:
    """Probabilities over the 288 month x hour bins (flat index hour*12 + month)."""
    return ad.softmax_rows(time_logits(ad.as_tensor(v), p)).data


# ---------------------------------------------------------------------------
# frozen model wrapper


class GeoTimeModel:
    """Config plus parameters, with batched inference helpers returning numpy arrays."""

    chunk = 4096

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params = init_params(config) if params is None else params

    @property
    def tensors(self) -> dict[str, Tensor]:
        return as_tensors(self.params)

    def _chunked(self, fn, *arrays) -> np.ndarray:
        arrays = [np.atleast_2d(np.asarray(a, dtype=float)) for a in arrays]
        n = arrays[0].shape[0]
        if n == 0:
            return np.zeros((0, self.config.d))
        p = self.tensors
        out = [fn(p, *(a[i : i + self.chunk] for a in arrays)) for i in range(0, n, self.chunk)]
        return np.concatenate(out, axis=0)

    def _tokens(self, p, m, x):
        cfg = self.config
        return {"v": adapt_image, "l": encode_location, "t": encode_time}[m](x, p, cfg)

    def embed(self, **inputs) -> np.ndarray:
        """Unit embeddings for one or two modalities.

        Keyword names are ``image`` (features), ``location`` (degrees) and
        ``time`` (torus points); e.g. ``embed(image=f, time=t)`` gives the
        fused image-time embedding.
        """
        key = {"image": "v", "location": "l", "time": "t"}
        unknown = set(inputs) - set(key)
        if unknown or not inputs:
            raise ValueError(f"embed takes image=, location= and/or time=, got {sorted(inputs)}")
        mods = [key[k] for k in ("image", "location", "time") if k in inputs]
        names = [k for k in ("image", "location", "time") if k in inputs]

        def run(p, *xs):
            return fuse({m: self._tokens(p, m, x) for m, x in zip(mods, xs)}, p, self.config).data

        return self._chunked(run, *(inputs[n] for n in names))

    def classify_geo(self, vbar) -> np.ndarray:
        return self._chunked(lambda p, v: classify_geo(v, p), vbar)

    def classify_time(self, vbar) -> np.ndarray:
        return self._chunked(lambda p, v: classify_time(v, p), vbar)

    def save(self, path: str | Path, width: int = 8) -> None:
        """Write parameters (binary) and ``<path>.json`` with the config."""
        path = Path(path)
        save_tensors(path, {f"param/{k}": v for k, v in self.params.items()}, width=width)
        atomic_write_bytes(config_path(path), json.dumps(self.config.to_dict(), indent=2).encode())

    @classmethod
    def load(cls, path: str | Path) -> "GeoTimeModel":
        path = Path(path)
        cfg = ModelConfig.from_dict(json.loads(config_path(path).read_text()))
        raw = load_tensors(path)
        params = {k[len("param/") :]: v.astype(np.float64) for k, v in raw.items() if k.startswith("param/")}
        expected = init_params(cfg)
        missing = set(expected) - set(params)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks parameters {sorted(missing)}")
        for k, v in expected.items():
            if params[k].shape != v.shape:
                raise ValueError(f"{path}: parameter {k} has shape {params[k].shape}, expected {v.shape}")
        return cls(cfg, params)


def config_path(checkpoint: str | Path) -> Path:
    checkpoint = Path(checkpoint)
    return checkpoint.with_name(checkpoint.name + ".json")

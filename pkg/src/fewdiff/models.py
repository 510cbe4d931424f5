"""Model stack: shared image encoder, per-modality decoders, text
encoder, projection head, learnable temperature, checkpoints.

One transformer trunk serves both modalities; only the patch-embedding
layers are modality-specific. Decoders are narrower and shallower than
the encoder and consume visible-token features plus a single shared
mask token replicated over masked positions. The text encoder is causal
and pools at <eos>. All contrastive embeddings leave here L2-normalized.
"""

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import dataio
from .numerics import Tensor, make_rng
from .numerics import tensor as T


@dataclass
class ModelConfig:
    channels: dict                 # modality -> spectral band count
    patch_size: int = 11
    D: int = 128
    heads: int = 4
    layers: int = 4
    mlp_ratio: int = 4
    D_dec: int = 64
    layers_dec: int = 2
    D_txt: int = 128
    heads_txt: int = 4
    layers_txt: int = 2
    E: int = 64
    context_length: int = 32
    vocab_size: int = 0            # filled once the vocab is built
    T: int = 50
    dtype: str = "float32"

    def __post_init__(self):
        if self.patch_size % 2 == 0:
            raise ValueError("patch size must be odd")
        if self.D % self.heads or self.D_txt % self.heads_txt:
            raise ValueError("width must be divisible by head count")

    @property
    def P(self):
        return self.patch_size * self.patch_size

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


class Module:
    """Parameter container with stable insertion-ordered traversal."""

    def __init__(self):
        self._params = {}
        self._children = {}

    def add_param(self, name, array):
        t = Tensor(np.ascontiguousarray(array), requires_grad=True)
        self._params[name] = t
        return t

    def add_child(self, name, module):
        self._children[name] = module
        return module

    def parameters(self, prefix=""):
        for name, t in self._params.items():
            yield (prefix + name, t)
        for name, child in self._children.items():
            yield from child.parameters(prefix + name + ".")

    def num_params(self):
        return sum(t.data.size for _, t in self.parameters())

    def zero_grad(self):
        for _, t in self.parameters():
            t.zero_grad()


def _w(rng, fan_in, fan_out, dtype):
    return (rng.standard_normal((fan_in, fan_out)) * 0.02).astype(dtype)


class Linear(Module):
    def __init__(self, rng, fan_in, fan_out, dtype):
        super().__init__()
        self.w = self.add_param("w", _w(rng, fan_in, fan_out, dtype))
        self.b = self.add_param("b", np.zeros(fan_out, dtype=dtype))

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


class LayerNorm(Module):
    def __init__(self, dim, dtype):
        super().__init__()
        self.gamma = self.add_param("gamma", np.ones(dim, dtype=dtype))
        self.beta = self.add_param("beta", np.zeros(dim, dtype=dtype))

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class Attention(Module):
    """Multi-head self-attention; optionally causal."""

    def __init__(self, rng, dim, heads, dtype, causal=False):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.causal = causal
        self.wq = self.add_child("wq", Linear(rng, dim, dim, dtype))
        self.wk = self.add_child("wk", Linear(rng, dim, dim, dtype))
        self.wv = self.add_child("wv", Linear(rng, dim, dim, dtype))
        self.wo = self.add_child("wo", Linear(rng, dim, dim, dtype))
        self._dtype = dtype

    def _split(self, x, B, L):
        x = T.reshape(x, (B, L, self.heads, self.head_dim))
        return T.transpose(x, (0, 2, 1, 3))

    def __call__(self, x):
        B, L, D = x.shape
        q = self._split(self.wq(x), B, L)
        k = self._split(self.wk(x), B, L)
        v = self._split(self.wv(x), B, L)
        scores = T.mul(T.matmul(q, T.swap_last2(k)), 1.0 / np.sqrt(self.head_dim))
        if self.causal:
            mask = np.triu(np.full((L, L), -1e9, dtype=self._dtype), k=1)
            scores = T.add(scores, Tensor(mask))
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, D))
        return self.wo(ctx)


class Block(Module):
    """Pre-layer-norm transformer block."""

    def __init__(self, rng, dim, heads, mlp_ratio, dtype, causal=False):
        super().__init__()
        self.ln1 = self.add_child("ln1", LayerNorm(dim, dtype))
        self.attn = self.add_child("attn", Attention(rng, dim, heads, dtype, causal))
        self.ln2 = self.add_child("ln2", LayerNorm(dim, dtype))
        self.fc1 = self.add_child("fc1", Linear(rng, dim, dim * mlp_ratio, dtype))
        self.fc2 = self.add_child("fc2", Linear(rng, dim * mlp_ratio, dim, dtype))

    def __call__(self, x):
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.fc2(T.gelu(self.fc1(self.ln2(x)))))


class Trunk(Module):
    def __init__(self, rng, dim, heads, layers, mlp_ratio, dtype, causal=False):
        super().__init__()
        self.blocks = [
            self.add_child(f"block{i}", Block(rng, dim, heads, mlp_ratio, dtype, causal))
            for i in range(layers)]
        self.ln_f = self.add_child("ln_f", LayerNorm(dim, dtype))

    def __call__(self, x):
        for blk in self.blocks:
            x = blk(x)
        return self.ln_f(x)


def timestep_basis(t_vec, dim):
    """Sinusoidal features of integer timesteps, frequency-banded."""
    t = np.asarray(t_vec, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


class ImageEncoder(Module):
    """Shared trunk; modality-specific pixel-vector embeddings.

    The class token, each visible token's positional entry, and the
    projected timestep features are added before the trunk; the timestep
    component goes to every token including the class token.
    """

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        dt = config.np_dtype
        for m, c in sorted(config.channels.items()):
            self.add_child(f"embed_{m}", Linear(rng, c, config.D, dt))
        self.cls = self.add_param("cls", (rng.standard_normal((1, config.D)) * 0.02).astype(dt))
        self.pos = self.add_param("pos", (rng.standard_normal((config.P, config.D)) * 0.02).astype(dt))
        self.t_proj = self.add_child("t_proj", Linear(rng, config.D, config.D, dt))
        self.trunk = self.add_child("trunk", Trunk(
            rng, config.D, config.heads, config.layers, config.mlp_ratio, dt))

    def embed_tokens(self, patches, modality):
        """(B, V, C_m) pixel vectors -> (B, V, D)."""
        if modality not in self.config.channels:
            raise ValueError(f"unknown modality {modality!r}")
        c = self.config.channels[modality]
        x = patches if isinstance(patches, Tensor) else Tensor(
            np.asarray(patches, dtype=self.config.np_dtype))
        if x.shape[-1] != c:
            raise ValueError(
                f"modality {modality!r} expects {c} channels, got {x.shape[-1]}")
        return self._children[f"embed_{m_key(modality)}"](x)

    def run_trunk(self, token_embs, positions, t_vec):
        """Prepend class token, add positions/timestep, run the trunk.

        Returns (class features (B, D), token features (B, V, D)).
        """
        B, V, D = token_embs.shape
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape != (B, V):
            raise ValueError(f"positions shape {positions.shape} != {(B, V)}")
        if positions.size and (positions.min() < 0 or positions.max() >= self.config.P):
            raise ValueError("position index out of range")
        t_vec = np.asarray(t_vec).reshape(-1)
        if t_vec.shape[0] == 1:
            t_vec = np.repeat(t_vec, B)
        if t_vec.shape[0] != B:
            raise ValueError(f"timestep vector length {t_vec.shape[0]} != batch {B}")
        if t_vec.min() < 0 or t_vec.max() > self.config.T:
            raise ValueError(f"timestep out of range [0, {self.config.T}]")

        x = T.add(token_embs, T.embedding(self.pos, positions))
        cls = T.broadcast_to(T.reshape(self.cls, (1, 1, D)), (B, 1, D))
        seq = T.concat([cls, x], axis=1)
        basis = Tensor(timestep_basis(t_vec, D).astype(self.config.np_dtype))
        p_dt = T.reshape(self.t_proj(basis), (B, 1, D))
        seq = T.add(seq, p_dt)
        out = self.trunk(seq)
        rows = np.zeros((B, 1), dtype=np.int64)
        cls_feat = T.reshape(T.gather_tokens(out, rows), (B, D))
        tok_idx = np.broadcast_to(np.arange(1, V + 1), (B, V))
        return cls_feat, T.gather_tokens(out, tok_idx)

    def encode(self, patches, positions, t, modality):
        """Per-modality convenience wrapper around embed + trunk."""
        embs = self.embed_tokens(patches, modality)
        B = embs.shape[0]
        t_vec = np.full(B, t) if np.isscalar(t) else t
        return self.run_trunk(embs, positions, t_vec)


def m_key(modality):
    if not isinstance(modality, str) or not modality:
        raise ValueError(f"bad modality {modality!r}")
    return modality


def tokenize_patch(patch, channels):
    """(..., S, S, C) patch -> (..., S*S, C) per-pixel token vectors."""
    p = np.asarray(patch)
    if p.shape[-1] != channels:
        raise ValueError(f"expected {channels} channels, got {p.shape[-1]}")
    s1, s2 = p.shape[-3], p.shape[-2]
    return p.reshape(*p.shape[:-3], s1 * s2, channels)


class Decoder(Module):
    """Lightweight per-modality decoder reconstructing the full grid."""

    def __init__(self, config, rng, modality):
        super().__init__()
        self.config = config
        self.modality = modality
        dt = config.np_dtype
        c = config.channels[modality]
        self.proj = self.add_child("proj", Linear(rng, config.D, config.D_dec, dt))
        self.mask_token = self.add_param("mask_token", np.zeros((1, config.D_dec), dtype=dt))
        self.pos = self.add_param("pos", (rng.standard_normal((config.P, config.D_dec)) * 0.02).astype(dt))
        self.trunk = self.add_child("trunk", Trunk(
            rng, config.D_dec, config.heads, config.layers_dec, config.mlp_ratio, dt))
        self.head = self.add_child("head", Linear(rng, config.D_dec, c, dt))

    def __call__(self, visible_feats, visible_positions, masked_positions):
        B, V, _ = visible_feats.shape
        vis = np.asarray(visible_positions, dtype=np.int64)
        msk = np.asarray(masked_positions, dtype=np.int64)
        if vis.ndim == 1:
            vis = np.broadcast_to(vis, (B, vis.shape[0]))
        if msk.ndim == 1:
            msk = np.broadcast_to(msk, (B, msk.shape[0]))
        P = self.config.P
        if vis.shape[1] + msk.shape[1] != P or not np.array_equal(
            np.sort(np.concatenate([vis, msk], axis=1), axis=1),
            np.broadcast_to(np.arange(P), (B, P)),
        ):
            raise ValueError("visible+masked positions must partition the grid")

        x_v = T.add(self.proj(visible_feats), T.embedding(self.pos, vis))
        M = msk.shape[1]
        if M:
            mask_tok = T.broadcast_to(
                T.reshape(self.mask_token, (1, 1, self.config.D_dec)),
                (B, M, self.config.D_dec))
            x_m = T.add(mask_tok, T.embedding(self.pos, msk))
            seq = T.concat([x_v, x_m], axis=1)
        else:
            seq = x_v
        out = self.head(self.trunk(seq))
        # back to grid order: sequence row i carries position perm[i]
        perm = np.concatenate([vis, msk], axis=1)
        inv = np.argsort(perm, axis=1)
        return T.gather_tokens(out, inv)


class TextEncoder(Module):
    """Causal transformer over prompt tokens, pooled at <eos>."""

    def __init__(self, config, rng):
        super().__init__()
        if config.vocab_size < 5:
            raise ValueError("vocab_size must be set before building the text encoder")
        self.config = config
        dt = config.np_dtype
        self.tok = self.add_param(
            "tok", (rng.standard_normal((config.vocab_size, config.D_txt)) * 0.02).astype(dt))
        self.pos = self.add_param(
            "pos", (rng.standard_normal((config.context_length, config.D_txt)) * 0.02).astype(dt))
        self.trunk = self.add_child("trunk", Trunk(
            rng, config.D_txt, config.heads_txt, config.layers_txt,
            config.mlp_ratio, dt, causal=True))
        self.proj = self.add_child("proj", Linear(rng, config.D_txt, config.E, dt))

    def __call__(self, ids):
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        B, L = ids.shape
        if L != self.config.context_length:
            raise ValueError(f"ids padded length {L} != {self.config.context_length}")
        eos_counts = (ids == dataio.EOS).sum(axis=1)
        if not np.all(eos_counts == 1):
            raise ValueError("each prompt must contain exactly one <eos>")
        x = T.add(T.embedding(self.tok, ids),
                  T.reshape(T.embedding(self.pos, np.arange(L)), (1, L, -1)))
        out = self.trunk(x)
        eos_idx = np.argmax(ids == dataio.EOS, axis=1)[:, None]
        pooled = T.reshape(T.gather_tokens(out, eos_idx), (B, self.config.D_txt))
        return T.l2_normalize(self.proj(pooled))


class ProjectionHead(Module):
    """Class-token feature (D) -> embedding space (E)."""

    def __init__(self, config, rng):
        super().__init__()
        self.fc = self.add_child("fc", Linear(rng, config.D, config.E, config.np_dtype))

    def __call__(self, feats):
        return T.l2_normalize(self.fc(feats))


class Temperature(Module):
    """Scalar stored as log(1/tau); tau kept inside [0.01, 100]."""

    TAU_MIN, TAU_MAX = 0.01, 100.0

    def __init__(self, config, init_tau=0.07):
        super().__init__()
        self.log_scale = self.add_param(
            "log_scale", np.array([np.log(1.0 / init_tau)], dtype=config.np_dtype))

    def scale(self):
        """exp(log(1/tau)) = 1/tau, the logit multiplier."""
        return T.exp(self.log_scale)

    def clamp(self):
        lo = np.log(1.0 / self.TAU_MAX)
        hi = np.log(1.0 / self.TAU_MIN)
        np.clip(self.log_scale.data, lo, hi, out=self.log_scale.data)

    @property
    def tau(self):
        return float(np.exp(-self.log_scale.data[0]))


class Model(Module):
    """Everything trainable, grouped by pipeline stage."""

    def __init__(self, config, seed=0):
        super().__init__()
        self.config = config
        rng = make_rng(seed, "init")
        self.encoder = self.add_child("encoder", ImageEncoder(config, rng))
        for m in sorted(config.channels):
            self.add_child(f"decoder_{m}", Decoder(config, rng, m))
        if config.vocab_size >= 5:
            self.text = self.add_child("text", TextEncoder(config, rng))
        else:
            self.text = None
        self.head = self.add_child("head", ProjectionHead(config, rng))
        self.temperature = self.add_child("temperature", Temperature(config))

    def decoder(self, modality):
        return self._children[f"decoder_{modality}"]

    def embed_image(self, patches, modality):
        """Full-visibility, t=0 pass producing unit-norm z_image."""
        tokens = tokenize_patch(patches, self.config.channels[modality])
        B = tokens.shape[0] if tokens.ndim == 3 else 1
        if tokens.ndim == 2:
            tokens = tokens[None]
        positions = np.broadcast_to(np.arange(self.config.P), (B, self.config.P))
        cls_feat, _ = self.encoder.encode(tokens, positions, 0, modality)
        return self.head(cls_feat)


def pretrain_parameters(model):
    """Stage-1 trainables: encoder + both decoders."""
    params = list(model.encoder.parameters("encoder."))
    for m in sorted(model.config.channels):
        params.extend(model.decoder(m).parameters(f"decoder_{m}."))
    return params


def finetune_parameters(model, include_text=True):
    """Stage-2 trainables: encoder + head + temperature (+ text)."""
    params = list(model.encoder.parameters("encoder."))
    params.extend(model.head.parameters("head."))
    params.extend(model.temperature.parameters("temperature."))
    if include_text and model.text is not None:
        params.extend(model.text.parameters("text."))
    return params


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"MMCK"


def save_checkpoint(path, model, stats=None, schedule_config=None, extra=None):
    """magic + version u8 + 3 reserved + u32 manifest length + JSON
    manifest + float32 parameter blobs in manifest order."""
    params = list(model.parameters())
    manifest = {
        "config": asdict(model.config),
        "stats": stats or {},
        "schedule": schedule_config or {},
        "extra": extra or {},
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params],
    }
    doc = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<BBBB", 1, 0, 0, 0))
        f.write(struct.pack("<I", len(doc)))
        f.write(doc)
        for _, t in params:
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (manifest dict, name -> float32 array)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12 or blob[:4] != _CKPT_MAGIC:
        raise dataio.FormatError(f"{path}: not a checkpoint (bad magic)")
    if blob[4] != 1:
        raise dataio.FormatError(f"{path}: unsupported checkpoint version {blob[4]}")
    (doc_len,) = struct.unpack_from("<I", blob, 8)
    try:
        manifest = json.loads(blob[12:12 + doc_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise dataio.FormatError(f"{path}: bad manifest ({exc})") from None
    offset = 12 + doc_len
    arrays = {}
    for entry in manifest["params"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 4 * n
        if end > len(blob):
            raise dataio.FormatError(f"{path}: parameter blob truncated at {offset}")
        arrays[entry["name"]] = np.frombuffer(
            blob, dtype="<f4", count=n, offset=offset).reshape(entry["shape"]).copy()
        offset = end
    return manifest, arrays


def restore_model(path):
    """Rebuild a Model from a checkpoint file."""
    manifest, arrays = load_checkpoint(path)
    config = ModelConfig(**manifest["config"])
    model = Model(config)
    own = dict(model.parameters())
    if set(own) != set(arrays):
        missing = set(own) ^ set(arrays)
        raise dataio.FormatError(f"{path}: parameter set mismatch ({sorted(missing)[:4]}...)")
    for name, arr in arrays.items():
        t = own[name]
        if tuple(t.shape) != tuple(arr.shape):
            raise dataio.FormatError(
                f"{path}: shape mismatch for {name}: {t.shape} vs {arr.shape}")
        t.data = arr.astype(config.np_dtype)
    return model, manifest

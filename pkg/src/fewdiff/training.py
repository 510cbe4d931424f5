"""Two training stages: unsupervised mask-diffusion pretraining of the
shared image encoder, then few-shot contrastive fine-tuning against
class-prompt text embeddings.

Both loops emit one record per optimizer step, strictly ordered by
(epoch, step), and are deterministic given the config seed: data order,
mask plans, diffusion noise and timestep draws each come from their own
derived stream.
"""

import dataclasses
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .dataio import (PROMPT_TEMPLATES, build_vocab, catalog_corpus,
                     extract_patch_batch, prompts_for)
from .diffusion import build_schedule, forward_diffuse, sample_mask
from .losses import flc_loss, umd_loss
from .models import (Linear, Model, ModelConfig, finetune_parameters,
                     load_checkpoint, pretrain_parameters, tokenize_patch)
from .numerics import NonFiniteError, make_rng
from .numerics import kernels
from .numerics import tensor as T
from .numerics.rng import derive_seed

LR0 = 1e-4
WEIGHT_DECAY = 1e-5

_STAGES = ("pretrain", "finetune")
_SCHEDULES = ("cosine", "step")
# stage -> (epochs, batch size, lr schedule)
_STAGE_DEFAULTS = {
    "pretrain": (100, 256, "cosine"),
    "finetune": (150, 64, "step"),
}


@dataclass
class TrainConfig:
    """Run settings for one stage; None fields take stage defaults.

    The four use_* toggles switch off, respectively: the text branch
    (replaced by a linear classifier over z_image), the diffusion noise,
    the token masking, and the whole pretraining stage.
    """

    stage: str
    epochs: int = None
    batch_size: int = None
    schedule: str = None
    seed: int = 0
    mask_ratio: float = 0.7
    T: int = 50
    prompt: str = "p1"
    use_text: bool = True
    use_diffusion: bool = True
    use_mask: bool = True
    use_pretraining: bool = True

    def __post_init__(self):
        if self.stage not in _STAGES:
            raise ValueError(f"stage must be one of {_STAGES}, got {self.stage!r}")
        d_epochs, d_batch, d_sched = _STAGE_DEFAULTS[self.stage]
        if self.epochs is None:
            self.epochs = d_epochs
        if self.batch_size is None:
            self.batch_size = d_batch
        if self.schedule is None:
            self.schedule = d_sched
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.schedule not in _SCHEDULES:
            raise ValueError(
                f"schedule must be one of {_SCHEDULES}, got {self.schedule!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must be in [0, 1), got {self.mask_ratio}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.prompt not in PROMPT_TEMPLATES:
            raise ValueError(f"unknown prompt template {self.prompt!r}")


_CONFIG_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


def train_config_from_json(text):
    """Parse a config document; unknown keys are rejected."""
    doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError("config document must be a JSON object")
    unknown = sorted(set(doc) - _CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    return TrainConfig(**doc)


def train_config_to_json(config):
    return json.dumps(dataclasses.asdict(config), sort_keys=True)


# ---------------------------------------------------------------------------
# optimizer and schedules
# ---------------------------------------------------------------------------

class Adam(object):
    """Adam with decoupled weight decay shrinking each parameter before
    its moment update. A step aborts before touching any parameter if a
    gradient is non-finite."""

    def __init__(self, params, lr=LR0, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=WEIGHT_DECAY):
        self.params = list(params)
        if not self.params:
            raise ValueError("optimizer needs at least one parameter")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}
        self.steps = 0

    def step(self):
        grads = {}
        for name, t in self.params:
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(
                    f"non-finite gradient for {name} at step {self.steps + 1}")
            grads[name] = g
        self.steps += 1
        bc1 = 1.0 - self.beta1 ** self.steps
        bc2 = 1.0 - self.beta2 ** self.steps
        for name, t in self.params:
            kernels.adam_step(
                t.data, grads[name].astype(t.data.dtype, copy=False),
                self.m[name], self.v[name], self.lr, self.beta1, self.beta2,
                self.eps, self.weight_decay, bc1, bc2)
            if not np.all(np.isfinite(t.data)):
                raise NonFiniteError(
                    f"non-finite parameter {name} after step {self.steps}")


def lr_at(kind, epoch, total, lr0=LR0):
    """cosine: half-cosine decay to zero over the run; step: x0.1 every
    50 epochs."""
    if kind not in _SCHEDULES:
        raise ValueError(f"unknown schedule {kind!r}")
    if not 0 <= epoch < total:
        raise ValueError(f"epoch {epoch} outside [0, {total})")
    if kind == "cosine":
        return lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / total))
    return lr0 * 0.1 ** (epoch // 50)


@dataclass
class TrainResult:
    model: Model
    records: list
    head: Linear = None   # linear classifier, text-branch-off runs only
    vocab: object = None


def _emit(records, log, record):
    records.append(record)
    if log is not None:
        log(record)


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def stack_pool(samples):
    """List of PatchSample -> {modality: (N, S, S, C) float32}."""
    samples = list(samples)
    if not samples:
        raise ValueError("empty pretraining pool")
    mods = sorted(samples[0].patches)
    return {m: np.stack([s.patches[m] for s in samples]).astype(np.float32)
            for m in mods}


def pretrain(config, pool, model_config=None, log=None):
    """Mask-diffusion pretraining over an unlabeled patch pool.

    Per sample: one mask plan shared by both modalities, one timestep
    drawn uniformly from {1..T}, noise applied to the visible tokens
    only; the loss sums each modality's reconstruction MSE over the
    full token grid.
    """
    if config.stage != "pretrain":
        raise ValueError(f"pretrain() called with stage {config.stage!r}")
    arrays = pool if isinstance(pool, dict) else stack_pool(pool)
    mods = sorted(arrays)
    if not mods:
        raise ValueError("empty pretraining pool")
    sizes = {m: len(arrays[m]) for m in mods}
    if len(set(sizes.values())) != 1:
        raise ValueError(f"modalities disagree on pool size: {sizes}")
    n_pool = sizes[mods[0]]
    if n_pool == 0:
        raise ValueError("empty pretraining pool")

    patch_size = arrays[mods[0]].shape[1]
    channels = {m: arrays[m].shape[-1] for m in mods}
    if model_config is None:
        model_config = ModelConfig(channels=channels, patch_size=patch_size,
                                   T=config.T)
    if model_config.channels != channels:
        raise ValueError(
            f"model channels {model_config.channels} != pool {channels}")
    if model_config.patch_size != patch_size:
        raise ValueError(
            f"model patch size {model_config.patch_size} != pool {patch_size}")
    if config.T > model_config.T:
        raise ValueError(
            f"config T={config.T} exceeds model timestep range {model_config.T}")
    arrays = {m: arrays[m].astype(model_config.np_dtype, copy=False)
              for m in mods}

    model = Model(model_config, seed=config.seed)
    schedule = build_schedule(config.T)
    opt = Adam(pretrain_parameters(model))
    shuffle_rng = make_rng(config.seed, "shuffle")
    mask_rng = make_rng(config.seed, "mask")
    noise_rng = make_rng(config.seed, "noise")
    t_rng = make_rng(config.seed, "timestep")

    records = []
    for epoch in range(config.epochs):
        opt.lr = lr_at(config.schedule, epoch, config.epochs)
        order = shuffle_rng.permutation(n_pool)
        for step, lo in enumerate(range(0, n_pool, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            batch = {m: arrays[m][idx] for m in mods}
            loss = _pretrain_step(model, schedule, batch, config,
                                  mask_rng, noise_rng, t_rng, opt)
            _emit(records, log, {"stage": "pretrain", "epoch": epoch,
                                 "step": step, "loss": loss, "lr": opt.lr})
    return TrainResult(model=model, records=records)


def _pretrain_step(model, schedule, batch, config, mask_rng, noise_rng,
                   t_rng, opt):
    cfg = model.config
    mods = sorted(cfg.channels)
    b = len(batch[mods[0]])
    ratio = config.mask_ratio if config.use_mask else 0.0
    plans = [sample_mask(cfg.P, ratio, mask_rng) for _ in range(b)]
    vis = np.stack([p.visible for p in plans])
    msk = np.stack([p.masked for p in plans])
    if config.use_diffusion:
        t_vec = t_rng.integers(1, config.T + 1, size=b)
    else:
        t_vec = np.zeros(b, dtype=np.int64)

    rows = np.arange(b)[:, None]
    total = None
    for m in mods:
        tokens = tokenize_patch(batch[m], cfg.channels[m])
        x0_v = tokens[rows, vis]
        if config.use_diffusion:
            eps = noise_rng.standard_normal(x0_v.shape)
            x_t = np.stack([
                forward_diffuse(x0_v[i], int(t_vec[i]), eps[i], schedule)
                for i in range(b)]).astype(tokens.dtype)
        else:
            x_t = x0_v
        _, tok_feats = model.encoder.encode(x_t, vis, t_vec, m)
        x_hat = model.decoder(m)(tok_feats, vis, msk)
        loss_m = umd_loss(x_hat, tokens)
        total = loss_m if total is None else T.add(total, loss_m)

    model.zero_grad()
    total.backward()
    opt.step()
    return float(total.data)


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def _encoder_arrays(checkpoint):
    """name -> array for the encoder subtree of a Model or checkpoint path."""
    if isinstance(checkpoint, Model):
        return {n: t.data for n, t in checkpoint.parameters()
                if n.startswith("encoder.")}
    _, arrays = load_checkpoint(checkpoint)
    return {n: a for n, a in arrays.items() if n.startswith("encoder.")}


def _load_encoder(model, checkpoint):
    own = {n: t for n, t in model.parameters() if n.startswith("encoder.")}
    src = _encoder_arrays(checkpoint)
    if set(own) != set(src):
        diff = sorted(set(own) ^ set(src))
        raise ValueError(f"checkpoint encoder mismatch: {diff[:4]}")
    for name, t in own.items():
        arr = src[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ValueError(
                f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
        t.data = np.asarray(arr, dtype=t.data.dtype).copy()


def _label_cross_entropy(logits, labels):
    """Mean -log softmax(logits)[i, labels[i]]; labels is an int array."""
    b, k = logits.shape
    onehot = np.zeros((b, k), dtype=logits.dtype)
    onehot[np.arange(b), np.asarray(labels)] = 1.0
    picked = T.sum_(T.mul(T.log_softmax(logits), T.constant(onehot)))
    return T.mul(picked, -1.0 / b)


def finetune(config, checkpoint, split, catalog, cubes, model_config=None,
             vocab=None, log=None):
    """Few-shot contrastive fine-tuning from a pretrained encoder.

    Each step takes one image per class (uniform over its shots) paired
    with the class's prompt under the configured template; the encoder,
    projection head, text encoder and temperature update jointly. With
    the text toggle off a linear classifier over z_image is trained
    instead. Decoders play no role in this stage.
    """
    if config.stage != "finetune":
        raise ValueError(f"finetune() called with stage {config.stage!r}")
    classes = sorted(split.shots)
    n_classes = len(catalog)
    if classes != list(range(n_classes)):
        raise ValueError(
            f"split covers classes {classes}, catalog has {n_classes}")
    mods = sorted(cubes)
    channels = {m: cubes[m].shape[-1] for m in mods}
    if model_config is None:
        model_config = ModelConfig(channels=channels, T=config.T)
    if model_config.channels != channels:
        raise ValueError(
            f"model channels {model_config.channels} != cubes {channels}")

    if config.use_text:
        if vocab is None:
            vocab = build_vocab(catalog_corpus(catalog),
                                model_config.context_length)
        cfg = dataclasses.replace(model_config, vocab_size=len(vocab))
    else:
        vocab = None
        cfg = dataclasses.replace(model_config, vocab_size=0)

    model = Model(cfg, seed=config.seed)
    if checkpoint is not None and not config.use_pretraining:
        warnings.warn("pretraining toggle is off: checkpoint ignored, "
                      "starting from random init")
        checkpoint = None
    if checkpoint is not None:
        _load_encoder(model, checkpoint)

    head = None
    if config.use_text:
        prompts = prompts_for(catalog, config.prompt)
        prompt_ids = np.stack([vocab.encode(p) for p in prompts])
        params = finetune_parameters(model, include_text=True)
    else:
        head = Linear(make_rng(derive_seed(config.seed, 1), "init"),
                      cfg.E, n_classes, cfg.np_dtype)
        params = [(n, t) for n, t in finetune_parameters(model, include_text=False)
                  if not n.startswith("temperature.")]
        params += head.parameters("classifier.")

    shot_patches = {
        k: {m: extract_patch_batch(cubes[m], split.shots[k],
                                   cfg.patch_size).astype(cfg.np_dtype)
            for m in mods}
        for k in classes}

    opt = Adam(params)
    data_rng = make_rng(config.seed, "data")
    steps_per_epoch = max(1, split.n)
    records = []
    for epoch in range(config.epochs):
        opt.lr = lr_at(config.schedule, epoch, config.epochs)
        for step in range(steps_per_epoch):
            if n_classes > config.batch_size:
                chosen = np.sort(data_rng.choice(
                    n_classes, size=config.batch_size, replace=False))
            else:
                chosen = np.arange(n_classes)
            picks = {int(k): int(data_rng.integers(split.n)) for k in chosen}
            batch = {m: np.stack([shot_patches[int(k)][m][picks[int(k)]]
                                  for k in chosen])
                     for m in mods}
            z_imgs = {m: model.embed_image(batch[m], m) for m in mods}
            if config.use_text:
                z_txt = model.text(prompt_ids[chosen])
                loss = flc_loss(z_imgs, z_txt, model.temperature.scale())
            else:
                per = None
                for m in mods:
                    ce = _label_cross_entropy(head(z_imgs[m]), chosen)
                    per = ce if per is None else T.add(per, ce)
                loss = T.mul(per, 1.0 / len(mods))
            model.zero_grad()
            if head is not None:
                head.zero_grad()
            loss.backward()
            opt.step()
            if config.use_text:
                model.temperature.clamp()
            _emit(records, log, {"stage": "finetune", "epoch": epoch,
                                 "step": step, "loss": float(loss.data),
                                 "lr": opt.lr})
    return TrainResult(model=model, records=records, head=head, vocab=vocab)

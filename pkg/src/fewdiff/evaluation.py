"""Classification by text similarity, confusion-matrix metrics, map
rendering, feature dumps, and the ablation harness that reruns the full
pipeline per setting.
"""

import dataclasses
from dataclasses import dataclass

import numpy as np

from .dataio import (Cube, PatchSample, build_vocab, catalog_corpus,
                     extract_patch_batch, pool_stats, prompts_for,
                     sample_fewshot, standardize, synth_scene)
from .models import Linear, ModelConfig
from .numerics import no_grad
from .training import TrainConfig, finetune, pretrain


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    confusion: np.ndarray    # (K, K), rows = truth, cols = prediction
    oa: float
    aa: float
    kappa: float
    per_class: list          # recall per class; None for zero support
    zero_support: list       # class ids with no true samples

    def to_dict(self):
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "confusion": self.confusion.tolist(),
            "per_class": self.per_class,
        }


def confusion_matrix(predictions, truths, k):
    preds = np.asarray(predictions).reshape(-1)
    trues = np.asarray(truths).reshape(-1)
    if preds.size == 0:
        raise ValueError("empty prediction set")
    if preds.shape != trues.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {trues.shape}")
    for name, arr in (("prediction", preds), ("truth", trues)):
        if arr.min() < 0 or arr.max() >= k:
            raise ValueError(f"{name} labels outside [0, {k})")
    c = np.zeros((k, k), dtype=np.int64)
    np.add.at(c, (trues, preds), 1)
    return c


def metrics(predictions, truths, k=None):
    """OA, AA, Kappa and per-class recalls from a confusion matrix.

    AA averages recalls over classes that appear in the truth; absent
    classes are reported separately instead of contributing 0/0.
    """
    trues = np.asarray(truths).reshape(-1)
    preds = np.asarray(predictions).reshape(-1)
    if k is None:
        if preds.size == 0:
            raise ValueError("empty prediction set")
        k = int(max(preds.max(), trues.max())) + 1
    c = confusion_matrix(preds, trues, k)
    total = int(c.sum())
    row = c.sum(axis=1)
    col = c.sum(axis=0)
    oa = float(np.trace(c)) / total
    per_class = [float(c[i, i]) / row[i] if row[i] else None for i in range(k)]
    zero = [i for i in range(k) if row[i] == 0]
    live = [r for r in per_class if r is not None]
    aa = float(np.mean(live))
    pe = float(np.dot(row, col)) / (total * total)
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return MetricsReport(confusion=c, oa=oa, aa=aa, kappa=float(kappa),
                         per_class=per_class, zero_support=zero)


# ---------------------------------------------------------------------------
# classification
# ---------------------------------------------------------------------------

def class_text_embeddings(model, catalog, template, vocab=None):
    """One unit vector per class: each of the class's prompts under the
    template is embedded, averaged, and re-normalized."""
    if model.text is None:
        raise ValueError("model has no text branch")
    if vocab is None:
        vocab = build_vocab(catalog_corpus(catalog),
                            model.config.context_length)
    if len(vocab) != model.config.vocab_size:
        raise ValueError(
            f"vocabulary size {len(vocab)} != model's {model.config.vocab_size}")
    if template is None:
        per_class = [list(c.prompts) for c in catalog.classes]
    else:
        per_class = [[p] for p in prompts_for(catalog, template)]
    out = []
    with no_grad():
        for prompts in per_class:
            if not prompts:
                raise ValueError("class has an empty prompt list")
            ids = np.stack([vocab.encode(p) for p in prompts])
            z = model.text(ids).data
            mean = z.mean(axis=0)
            out.append(mean / np.linalg.norm(mean))
    return np.stack(out)


def _scores(model, patches, scorer):
    """Similarity of each sample to each class, averaged over modalities.
    `scorer` is either a (K, E) embedding matrix or a linear head."""
    mods = sorted(patches)
    total = None
    with no_grad():
        for m in mods:
            z = model.embed_image(np.asarray(patches[m]), m)
            if isinstance(scorer, Linear):
                s = scorer(z).data
            else:
                s = z.data @ np.asarray(scorer).T
            total = s if total is None else total + s
    return total / len(mods)


def classify(model, patches, scorer):
    """Predicted class ids; ties go to the lowest id.

    `patches` is a {modality: (B, S, S, C)} dict or a single PatchSample.
    """
    single = isinstance(patches, PatchSample)
    if single:
        patches = {m: p[None] for m, p in patches.patches.items()}
    ids = np.argmax(_scores(model, patches, scorer), axis=1)
    return int(ids[0]) if single else ids


def predict_coords(model, cubes, coords, scorer, chunk=256):
    """Classify the patches centered at `coords`, chunked to bound the
    working set."""
    coords = np.asarray(coords)
    size = model.config.patch_size
    out = np.empty(len(coords), dtype=np.int64)
    for lo in range(0, len(coords), chunk):
        sel = coords[lo:lo + chunk]
        patches = {m: extract_patch_batch(cubes[m], sel, size)
                   for m in sorted(cubes)}
        out[lo:lo + chunk] = classify(model, patches, scorer)
    return out


# ---------------------------------------------------------------------------
# map rendering
# ---------------------------------------------------------------------------

def render_map(grid, palette, unlabeled=None):
    """Binary PPM (P6) bytes for a (H, W) prediction grid; unlabeled
    pixels are black."""
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise ValueError(f"grid must be 2-D, got {grid.shape}")
    palette = np.asarray(palette, dtype=np.uint8)
    if palette.ndim != 2 or palette.shape[1] != 3:
        raise ValueError(f"palette must be (K, 3), got {palette.shape}")
    if unlabeled is None:
        unlabeled = np.zeros(grid.shape, dtype=bool)
    unlabeled = np.asarray(unlabeled, dtype=bool)
    if unlabeled.shape != grid.shape:
        raise ValueError("unlabeled mask shape differs from grid")
    live = grid[~unlabeled]
    if live.size and (live.min() < 0 or live.max() >= len(palette)):
        raise ValueError(f"class id outside palette of {len(palette)}")
    h, w = grid.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    safe = np.where(unlabeled, 0, grid)
    rgb[~unlabeled] = palette[safe][~unlabeled]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


# ---------------------------------------------------------------------------
# feature dumps
# ---------------------------------------------------------------------------

@dataclass
class FeatureDump:
    rows: list                 # {"coords", "modality", "feature", "label"}
    projection: np.ndarray     # (n_rows, 2) or None
    notice: str = None


def _pca2(x):
    """Two principal components by eigendecomposition of the covariance;
    each component's largest-magnitude entry is made positive."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / len(x)
    vals, vecs = np.linalg.eigh(cov)
    comps = vecs[:, ::-1][:, :2]
    for j in range(comps.shape[1]):
        i = np.argmax(np.abs(comps[:, j]))
        if comps[i, j] < 0:
            comps[:, j] = -comps[:, j]
    return xc @ comps, comps, mean


def dump_features(model, samples):
    """Unit-norm embeddings of each sample under every modality, plus a
    deterministic 2-component projection (skipped below 3 samples)."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples to embed")
    rows = []
    feats = []
    with no_grad():
        for s in samples:
            for m in sorted(s.patches):
                z = model.embed_image(s.patches[m][None], m).data[0]
                rows.append({"coords": tuple(s.center), "modality": m,
                             "feature": z.copy(), "label": s.class_id})
                feats.append(z)
    if len(samples) < 3:
        return FeatureDump(rows=rows, projection=None,
                           notice="PCA skipped: fewer than 3 samples")
    proj, _, _ = _pca2(np.stack(feats))
    return FeatureDump(rows=rows, projection=proj)


# ---------------------------------------------------------------------------
# full pipeline and ablation harness
# ---------------------------------------------------------------------------

@dataclass
class Experiment:
    """Everything one synthetic run needs; the ablation axes override
    single fields of this."""

    K: int = 4
    H: int = 48
    W: int = 48
    C_A: int = 16
    C_B: int = 1
    noise_sigma: float = 0.35
    smooth_radius: int = 1
    n_shots: int = 2
    pool: int = 700
    patch_size: int = 11
    mask_ratio: float = 0.7
    T: int = 50
    prompt: str = "p1"
    pretrain_epochs: int = 100
    finetune_epochs: int = 150
    pretrain_batch: int = 256
    finetune_batch: int = 64
    use_text: bool = True
    use_diffusion: bool = True
    use_mask: bool = True
    use_pretraining: bool = True
    # encoder/decoder/text sizes; smaller than the ModelConfig defaults
    # so a full run stays in desk-scale minutes
    D: int = 64
    heads: int = 4
    layers: int = 2
    mlp_ratio: int = 2
    D_dec: int = 32
    layers_dec: int = 1
    D_txt: int = 64
    heads_txt: int = 4
    layers_txt: int = 2
    E: int = 32
    context_length: int = 32


@dataclass
class RunResult:
    report: MetricsReport
    model: object
    head: Linear
    vocab: object
    stats: dict
    catalog: object
    labelmap: object
    pretrain_records: list
    finetune_records: list


def _model_config(exp, channels):
    return ModelConfig(
        channels=channels, patch_size=exp.patch_size, D=exp.D,
        heads=exp.heads, layers=exp.layers, mlp_ratio=exp.mlp_ratio,
        D_dec=exp.D_dec, layers_dec=exp.layers_dec, D_txt=exp.D_txt,
        heads_txt=exp.heads_txt, layers_txt=exp.layers_txt, E=exp.E,
        context_length=exp.context_length, T=exp.T)


def run_experiment(exp, seed, log=None):
    """Scene -> split -> standardize -> (pretrain) -> finetune -> held-out
    metrics, all streams derived from `seed`."""
    cube_a, cube_b, labelmap, catalog = synth_scene(
        exp.K, exp.H, exp.W, exp.C_A, exp.C_B, exp.noise_sigma,
        exp.smooth_radius, seed)
    cubes = {"a": cube_a, "b": cube_b}
    split = sample_fewshot(labelmap, exp.n_shots, exp.pool, seed)

    stats = {m: pool_stats(cubes[m], split.pool, exp.patch_size)
             for m in cubes}
    cubes = {m: Cube(standardize(cubes[m].values, stats[m])) for m in cubes}
    mc = _model_config(exp, {m: cubes[m].shape[-1] for m in sorted(cubes)})

    checkpoint = None
    pre_records = []
    if exp.use_pretraining:
        pre_cfg = TrainConfig(
            stage="pretrain", epochs=exp.pretrain_epochs,
            batch_size=exp.pretrain_batch, seed=seed,
            mask_ratio=exp.mask_ratio, T=exp.T,
            use_diffusion=exp.use_diffusion, use_mask=exp.use_mask)
        pool = {m: extract_patch_batch(cubes[m], split.pool, exp.patch_size)
                for m in cubes}
        pre = pretrain(pre_cfg, pool, model_config=mc, log=log)
        checkpoint = pre.model
        pre_records = pre.records

    ft_cfg = TrainConfig(
        stage="finetune", epochs=exp.finetune_epochs,
        batch_size=exp.finetune_batch, seed=seed, T=exp.T,
        prompt=exp.prompt, use_text=exp.use_text,
        use_pretraining=exp.use_pretraining)
    ft = finetune(ft_cfg, checkpoint, split, catalog, cubes,
                  model_config=mc, log=log)

    if exp.use_text:
        scorer = class_text_embeddings(ft.model, catalog, exp.prompt,
                                       vocab=ft.vocab)
    else:
        scorer = ft.head
    preds = predict_coords(ft.model, cubes, split.eval_coords, scorer)
    truths = labelmap.labels[split.eval_coords[:, 0], split.eval_coords[:, 1]]
    report = metrics(preds, truths, k=exp.K)
    return RunResult(report=report, model=ft.model, head=ft.head,
                     vocab=ft.vocab, stats=stats, catalog=catalog,
                     labelmap=labelmap, pretrain_records=pre_records,
                     finetune_records=ft.records)


_AXES = ("pool_size", "components", "prompts", "mask_ratio", "patch_size")


def ablation_settings(axis):
    """(label, field overrides) per setting of the named axis."""
    if axis == "pool_size":
        return [(str(v), {"pool": v}) for v in (300, 500, 700)]
    if axis == "components":
        return [
            ("w/o Text", {"use_text": False}),
            ("w/o Diffusion", {"use_diffusion": False}),
            ("w/o Mask", {"use_mask": False}),
            ("w/o Unsupervised", {"use_pretraining": False}),
            ("full", {}),
        ]
    if axis == "prompts":
        return [(p, {"prompt": p}) for p in ("p1", "p2", "p3", "p4", "p5")]
    if axis == "mask_ratio":
        return [(f"{v / 10:.1f}", {"mask_ratio": v / 10})
                for v in range(1, 10)]
    if axis == "patch_size":
        return [(str(v), {"patch_size": v}) for v in (5, 7, 9, 11, 13)]
    raise ValueError(f"unknown ablation axis {axis!r}; have {_AXES}")


def ablate(base, axis, seeds, log=None):
    """Rerun the pipeline per setting per seed; mean and population std
    of each metric per setting."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    rows = []
    for label, overrides in ablation_settings(axis):
        exp = dataclasses.replace(base, **overrides)
        reports = [run_experiment(exp, s).report for s in seeds]
        row = {"setting": label, "seeds": seeds}
        for name in ("oa", "aa", "kappa"):
            vals = [getattr(r, name) for r in reports]
            row[f"{name}_mean"] = float(np.mean(vals))
            row[f"{name}_std"] = float(np.std(vals))
        rows.append(row)
        if log is not None:
            log(row)
    return rows

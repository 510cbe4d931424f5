"""Command-line front end: scene synthesis, the two training stages,
evaluation, map rendering, ablation sweeps, and the gradient checker.

One binary, one subcommand per run. Every flag can also be given as a
key in a JSON config file (underscored flag name); explicit flags win
over config values. Environment variables are never consulted. Logs go
to standard error; machine-readable output goes to files or standard
output. Exit codes: 0 success, 1 usage, 2 data or format error, 3
non-finite numbers encountered.
"""

import argparse
import json
import os
import sys

import numpy as np
import threadpoolctl

from . import dataio, evaluation, losses, training
from .models import Linear, ModelConfig, restore_model, save_checkpoint
from .numerics import NonFiniteError, derive_seed, gradcheck, make_rng
from .numerics import tensor as T

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

CUBE_FILES = {"a": "a.cube", "b": "b.cube"}
LABELS_FILE = "labels.bin"
CATALOG_FILE = "catalog.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit on bad flags."""

    def error(self, message):
        raise UsageError(message)


def _log(args, msg):
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# config-file merging
# ---------------------------------------------------------------------------

def _apply_config(args, defaults):
    """Overlay config-file values under explicit flags.

    Flags parse with default=None, so a None dest means "not given";
    the value then comes from the config file if present, else from
    `defaults`. Config keys must name real settings of the subcommand.
    Returns the set of keys given explicitly (flag or config).
    """
    if args.config is not None:
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except OSError as exc:
            raise dataio.FormatError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise dataio.FormatError(f"{args.config}: bad JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise dataio.FormatError(f"{args.config}: config must be a JSON object")
        unknown = sorted(set(doc) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    else:
        doc = {}
    given = set()
    for key, fallback in defaults.items():
        if getattr(args, key, None) is not None:
            given.add(key)
        elif key in doc:
            setattr(args, key, doc[key])
            given.add(key)
        else:
            setattr(args, key, fallback)
    return given


def _common_flags(parser):
    parser.add_argument("--config", metavar="FILE",
                        help="JSON config file; explicit flags override it")
    parser.add_argument("--threads", type=int, metavar="N",
                        help="BLAS worker threads (default: logical cores)")
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="single thread and byte-stable outputs")
    parser.add_argument("--quiet", action="store_true", default=None,
                        help="suppress progress logs on stderr")


_COMMON_DEFAULTS = {"threads": None, "deterministic": False, "quiet": False}


def _limit_threads(args):
    if args.threads is not None and args.threads < 1:
        raise UsageError(f"--threads must be >= 1, got {args.threads}")
    n = 1 if args.deterministic else (args.threads or os.cpu_count() or 1)
    threadpoolctl.threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# shared flag groups
# ---------------------------------------------------------------------------

def _scene_flags(parser):
    parser.add_argument("--classes", type=int, metavar="K")
    parser.add_argument("--height", type=int)
    parser.add_argument("--width", type=int)
    parser.add_argument("--channels-a", type=int, metavar="C")
    parser.add_argument("--channels-b", type=int, metavar="C")
    parser.add_argument("--noise-sigma", type=float)
    parser.add_argument("--smooth-radius", type=int)


_SCENE_DEFAULTS = {"classes": 4, "height": 48, "width": 48, "channels_a": 16,
                   "channels_b": 1, "noise_sigma": 0.35, "smooth_radius": 1}


def _model_flags(parser):
    parser.add_argument("--patch-size", type=int)
    parser.add_argument("--dim", type=int, help="encoder width")
    parser.add_argument("--heads", type=int)
    parser.add_argument("--layers", type=int)
    parser.add_argument("--mlp-ratio", type=int)
    parser.add_argument("--dec-dim", type=int)
    parser.add_argument("--dec-layers", type=int)
    parser.add_argument("--txt-dim", type=int)
    parser.add_argument("--txt-heads", type=int)
    parser.add_argument("--txt-layers", type=int)
    parser.add_argument("--embed-dim", type=int, help="shared embedding size")
    parser.add_argument("--context-length", type=int)
    parser.add_argument("--timesteps", type=int, metavar="T")


_MODEL_DEFAULTS = {"patch_size": 11, "dim": 64, "heads": 4, "layers": 2,
                   "mlp_ratio": 2, "dec_dim": 32, "dec_layers": 1,
                   "txt_dim": 64, "txt_heads": 4, "txt_layers": 2,
                   "embed_dim": 32, "context_length": 32, "timesteps": 50}


def _model_config(args, channels, vocab_size=0):
    return ModelConfig(
        channels=channels, patch_size=args.patch_size, D=args.dim,
        heads=args.heads, layers=args.layers, mlp_ratio=args.mlp_ratio,
        D_dec=args.dec_dim, layers_dec=args.dec_layers, D_txt=args.txt_dim,
        heads_txt=args.txt_heads, layers_txt=args.txt_layers,
        E=args.embed_dim, context_length=args.context_length,
        vocab_size=vocab_size, T=args.timesteps)


def _split_flags(parser):
    parser.add_argument("--shots", type=int, metavar="N",
                        help="labeled samples per class")
    parser.add_argument("--pool", type=int, metavar="M",
                        help="label-blind pretraining pool size")
    parser.add_argument("--split-seed", type=int,
                        help="seed for the shot/pool draw (default: --seed)")


_SPLIT_DEFAULTS = {"shots": 2, "pool": 700, "split_seed": None}


def _load_scene(scene_dir):
    cubes = {}
    for m, name in CUBE_FILES.items():
        cubes[m] = dataio.load_cube(os.path.join(scene_dir, name))
    labels = dataio.load_labels(os.path.join(scene_dir, LABELS_FILE))
    catalog = dataio.load_catalog(os.path.join(scene_dir, CATALOG_FILE))
    if labels.labels.shape != cubes["a"].shape[:2]:
        raise dataio.FormatError(
            f"labels {labels.labels.shape} do not cover cube "
            f"{cubes['a'].shape[:2]}")
    return cubes, labels, catalog


def _make_split(args, labels):
    seed = args.split_seed if args.split_seed is not None else args.seed
    return dataio.sample_fewshot(labels, args.shots, args.pool, seed)


def _standardized(cubes, stats):
    return {m: dataio.Cube(dataio.standardize(c.values, stats[m]))
            for m, c in cubes.items()}


def _stats_to_json(stats):
    return {m: {"mean": st.mean.tolist(), "std": st.std.tolist()}
            for m, st in stats.items()}


def _stats_from_json(doc):
    return {m: dataio.ChannelStats(mean=np.asarray(d["mean"], dtype=np.float64),
                                   std=np.asarray(d["std"], dtype=np.float64))
            for m, d in doc.items()}


def _split_extra(args):
    return {"seed": args.split_seed if args.split_seed is not None
            else args.seed,
            "shots": args.shots, "pool": args.pool}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args):
    os.makedirs(args.out, exist_ok=True)
    cube_a, cube_b, labels, catalog = dataio.synth_scene(
        K=args.classes, H=args.height, W=args.width, C_A=args.channels_a,
        C_B=args.channels_b, noise_sigma=args.noise_sigma,
        smooth_radius=args.smooth_radius, seed=args.seed)
    dataio.save_cube(cube_a, os.path.join(args.out, CUBE_FILES["a"]))
    dataio.save_cube(cube_b, os.path.join(args.out, CUBE_FILES["b"]))
    dataio.save_labels(labels, os.path.join(args.out, LABELS_FILE))
    dataio.save_catalog(catalog, os.path.join(args.out, CATALOG_FILE))
    _log(args, f"scene written to {args.out}: {args.height}x{args.width}, "
               f"{args.classes} classes, C_A={args.channels_a} "
               f"C_B={args.channels_b}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

def _train_log(args):
    seen = set()

    def log(rec):
        # one stderr line per epoch (at its first step)
        key = (rec["stage"], rec["epoch"])
        if key not in seen:
            seen.add(key)
            _log(args, f"{rec['stage']} epoch {rec['epoch']}: "
                       f"loss {rec['loss']:.4f} lr {rec['lr']:.2e}")
    return log


def _write_records(args, records):
    if args.records_out is None:
        return
    with open(args.records_out, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    _log(args, f"{len(records)} loss records written to {args.records_out}")


def cmd_pretrain(args):
    cubes, labels, _ = _load_scene(args.scene)
    split = _make_split(args, labels)
    stats = {m: dataio.pool_stats(c, split.pool, args.patch_size)
             for m, c in cubes.items()}
    cubes = _standardized(cubes, stats)
    channels = {m: c.shape[-1] for m, c in cubes.items()}
    mc = _model_config(args, channels)
    tc = training.TrainConfig(
        stage="pretrain", epochs=args.epochs, batch_size=args.batch_size,
        schedule=args.schedule, seed=args.seed, mask_ratio=args.mask_ratio,
        T=args.timesteps, use_diffusion=not args.no_diffusion,
        use_mask=not args.no_mask)
    pool = {m: dataio.extract_patch_batch(c, split.pool, args.patch_size)
            for m, c in cubes.items()}
    result = training.pretrain(tc, pool, model_config=mc, log=_train_log(args))
    _write_records(args, result.records)
    save_checkpoint(
        args.out, result.model, stats=_stats_to_json(stats),
        schedule_config={"T": tc.T},
        extra={"stage": "pretrain",
               "train": json.loads(training.train_config_to_json(tc)),
               "split": _split_extra(args)})
    _log(args, f"checkpoint written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------

def cmd_finetune(args):
    cubes, labels, catalog = _load_scene(args.scene)
    use_pretraining = not args.no_pretraining
    if not use_pretraining and args.checkpoint is not None:
        _log(args, "note: --no-pretraining set, checkpoint ignored")
        args.checkpoint = None
    if use_pretraining and args.checkpoint is None:
        raise UsageError("finetune needs --checkpoint (or --no-pretraining)")

    pre_model = None
    if args.checkpoint is not None:
        pre_model, manifest = restore_model(args.checkpoint)
        stats = _stats_from_json(manifest["stats"])
        # split settings recorded at pretrain time fill flags not given
        sp = manifest.get("extra", {}).get("split", {})
        if "split_seed" not in args.given and "seed" in sp:
            args.split_seed = sp["seed"]
        if "shots" not in args.given and "shots" in sp:
            args.shots = sp["shots"]
        if "pool" not in args.given and "pool" in sp:
            args.pool = sp["pool"]
        mc = ModelConfig(**manifest["config"])
        split = _make_split(args, labels)
    else:
        split = _make_split(args, labels)
        stats = {m: dataio.pool_stats(c, split.pool, args.patch_size)
                 for m, c in cubes.items()}
        mc = None
    cubes = _standardized(cubes, stats)
    channels = {m: c.shape[-1] for m, c in cubes.items()}
    if mc is None:
        mc = _model_config(args, channels)
    elif mc.channels != channels:
        raise dataio.FormatError(
            f"checkpoint channels {mc.channels} != scene {channels}")

    tc = training.TrainConfig(
        stage="finetune", epochs=args.epochs, batch_size=args.batch_size,
        schedule=args.schedule, seed=args.seed, T=mc.T, prompt=args.prompt,
        use_text=not args.no_text, use_pretraining=use_pretraining)
    result = training.finetune(tc, pre_model, split, catalog, cubes,
                               model_config=mc, log=_train_log(args))
    _write_records(args, result.records)
    extra = {"stage": "finetune",
             "train": json.loads(training.train_config_to_json(tc)),
             "split": _split_extra(args)}
    if result.head is not None:
        extra["classifier"] = {"w": result.head.w.data.tolist(),
                               "b": result.head.b.data.tolist()}
    save_checkpoint(args.out, result.model, stats=_stats_to_json(stats),
                    schedule_config={"T": mc.T}, extra=extra)
    _log(args, f"checkpoint written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _json_bytes(obj):
    return (json.dumps(obj, sort_keys=True, separators=(",", ":"))
            + "\n").encode("utf-8")


def _write_payload(args, payload, path, what):
    if path is None:
        sys.stdout.buffer.write(payload)
        sys.stdout.buffer.flush()
    else:
        with open(path, "wb") as f:
            f.write(payload)
        _log(args, f"{what} written to {path}")


def _scorer_from_checkpoint(model, manifest, catalog):
    extra = manifest.get("extra", {})
    train = extra.get("train", {})
    if train.get("use_text", True):
        vocab = dataio.build_vocab(dataio.catalog_corpus(catalog),
                                   model.config.context_length)
        template = train.get("prompt", "p1")
        return evaluation.class_text_embeddings(model, catalog, template,
                                                vocab=vocab)
    cls = extra.get("classifier")
    if cls is None:
        raise dataio.FormatError(
            "checkpoint trained without text lacks its classifier head")
    dtype = model.config.np_dtype
    w = np.asarray(cls["w"], dtype=dtype)
    b = np.asarray(cls["b"], dtype=dtype)
    if w.shape != (model.config.E, len(catalog)) or b.shape != (len(catalog),):
        raise dataio.FormatError(
            f"classifier head shape {w.shape}/{b.shape} does not fit "
            f"E={model.config.E}, {len(catalog)} classes")
    head = Linear(make_rng(0, "init"), w.shape[0], w.shape[1], dtype)
    head.w.data = w
    head.b.data = b
    return head


def cmd_eval(args):
    cubes, labels, catalog = _load_scene(args.scene)
    model, manifest = restore_model(args.checkpoint)
    if manifest.get("extra", {}).get("stage") != "finetune":
        raise dataio.FormatError(
            f"{args.checkpoint}: eval needs a finetune checkpoint")
    stats = _stats_from_json(manifest["stats"])
    cubes = _standardized(cubes, stats)
    sp = manifest["extra"].get("split", {})
    if "split_seed" not in args.given:
        if "seed" not in sp:
            raise UsageError("checkpoint lacks split info; give --split-seed")
        args.split_seed = sp["seed"]
    if "shots" not in args.given and "shots" in sp:
        args.shots = sp["shots"]
    if "pool" not in args.given and "pool" in sp:
        args.pool = sp["pool"]
    split = _make_split(args, labels)
    scorer = _scorer_from_checkpoint(model, manifest, catalog)
    coords = split.eval_coords
    preds = evaluation.predict_coords(model, cubes, coords, scorer,
                                      chunk=args.chunk)
    truths = labels.labels[coords[:, 0], coords[:, 1]]
    report = evaluation.metrics(preds, truths, k=len(catalog))
    _write_payload(args, _json_bytes(report.to_dict()), args.metrics_out,
                   "metrics")
    if args.map_out is not None:
        h, w = labels.labels.shape
        grid_coords = np.indices((h, w)).reshape(2, -1).T
        full = evaluation.predict_coords(model, cubes, grid_coords, scorer,
                                         chunk=args.chunk)
        data = evaluation.render_map(full.reshape(h, w), catalog.palette)
        with open(args.map_out, "wb") as f:
            f.write(data)
        _log(args, f"map written to {args.map_out}")
    _log(args, f"OA {report.oa:.4f} AA {report.aa:.4f} "
               f"kappa {report.kappa:.4f} on {len(coords)} pixels")
    return EXIT_OK


# ---------------------------------------------------------------------------
# render-map
# ---------------------------------------------------------------------------

def cmd_render_map(args):
    labels = dataio.load_labels(args.labels)
    if args.catalog is not None:
        catalog = dataio.load_catalog(args.catalog)
    else:
        k = int(labels.labels.max()) + 1
        catalog = dataio.default_catalog(max(k, 2))
    data = evaluation.render_map(labels.labels, catalog.palette,
                                 unlabeled=labels.labels < 0)
    with open(args.out, "wb") as f:
        f.write(data)
    _log(args, f"map written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def cmd_ablate(args):
    exp = evaluation.Experiment(
        K=args.classes, H=args.height, W=args.width, C_A=args.channels_a,
        C_B=args.channels_b, noise_sigma=args.noise_sigma,
        smooth_radius=args.smooth_radius, n_shots=args.shots, pool=args.pool,
        patch_size=args.patch_size, mask_ratio=args.mask_ratio,
        T=args.timesteps, prompt=args.prompt,
        pretrain_epochs=args.pretrain_epochs,
        finetune_epochs=args.finetune_epochs,
        pretrain_batch=args.pretrain_batch,
        finetune_batch=args.finetune_batch, D=args.dim, heads=args.heads,
        layers=args.layers, mlp_ratio=args.mlp_ratio, D_dec=args.dec_dim,
        layers_dec=args.dec_layers, D_txt=args.txt_dim,
        heads_txt=args.txt_heads, layers_txt=args.txt_layers,
        E=args.embed_dim, context_length=args.context_length)
    seeds = _parse_seeds(args.seeds)

    def log(row):
        _log(args, f"[{row['setting']}] OA mean {row['oa_mean']:.4f} "
                   f"std {row['oa_std']:.4f} over seeds {row['seeds']}")
    rows = evaluation.ablate(exp, args.axis, seeds, log=log)
    _write_payload(args, _json_bytes(rows), args.out, "report")
    return EXIT_OK


def _parse_seeds(text):
    try:
        seeds = [int(s) for s in str(text).split(",") if s != ""]
    except ValueError:
        raise UsageError(f"bad --seeds value: {text!r}") from None
    if not seeds:
        raise UsageError("--seeds must list at least one seed")
    return seeds


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _suite_entries(rng):
    """(name, build, inputs) triples covering every differentiable op
    plus both training losses. Shapes are drawn from `rng`, so each call
    sees fresh sizes."""
    def dims(*hi):
        return tuple(int(rng.integers(2, h + 1)) for h in hi)

    b, n, m, k = dims(3, 5, 4, 4)
    L, D = dims(6, 6)
    entries = [
        ("add", lambda x, y: T.sum_(T.add(x, y)),
         [rng.standard_normal((n, m)), rng.standard_normal((n, m))]),
        ("sub", lambda x, y: T.sum_(T.mul(T.sub(x, y), T.sub(x, y))),
         [rng.standard_normal((n, m)), rng.standard_normal((n, m))]),
        ("mul", lambda x, y: T.sum_(T.mul(x, y)),
         [rng.standard_normal((n, m)), rng.standard_normal((n, m))]),
        ("exp", lambda x: T.sum_(T.exp(x)),
         [rng.standard_normal((n, m)) * 0.5]),
        ("gelu", lambda x: T.sum_(T.gelu(x)), [rng.standard_normal((n, m))]),
        ("matmul", lambda x, y: T.sum_(T.matmul(x, y)),
         [rng.standard_normal((n, m)), rng.standard_normal((m, k))]),
        ("matmul_batched", lambda x, y: T.sum_(T.matmul(x, y)),
         [rng.standard_normal((b, n, m)), rng.standard_normal((b, m, k))]),
        ("linear", lambda x, w, c: T.sum_(T.linear(x, w, c)),
         [rng.standard_normal((n, m)), rng.standard_normal((m, k)),
          rng.standard_normal(k)]),
        ("softmax", lambda x: T.sum_(T.mul(T.softmax(x), T.softmax(x))),
         [rng.standard_normal((n, m))]),
        ("log_softmax", lambda x: T.sum_(T.log_softmax(x)),
         [rng.standard_normal((n, m))]),
        ("layer_norm", lambda x, g, c: T.sum_(T.layer_norm(x, g, c)),
         [rng.standard_normal((n, m)), 1.0 + 0.1 * rng.standard_normal(m),
          0.1 * rng.standard_normal(m)]),
        ("reshape", lambda x: T.sum_(T.mul(T.reshape(x, (m, n)),
                                           T.reshape(x, (m, n)))),
         [rng.standard_normal((n, m))]),
        ("transpose", lambda x: T.sum_(T.mul(T.transpose(x, (1, 0)), 2.0)),
         [rng.standard_normal((n, m))]),
        ("swap_last2", lambda x: T.sum_(T.mul(T.swap_last2(x),
                                              T.swap_last2(x))),
         [rng.standard_normal((b, n, m))]),
        ("broadcast_to", lambda x: T.sum_(T.mul(T.broadcast_to(x, (k, n, m)),
                                                1.5)),
         [rng.standard_normal((n, m))]),
        ("concat", lambda x, y: T.sum_(T.mul(T.concat([x, y], 1),
                                             T.concat([x, y], 1))),
         [rng.standard_normal((n, m)), rng.standard_normal((n, k))]),
        ("sum", lambda x: T.sum_(T.mul(T.sum_(x, axis=0), 3.0)),
         [rng.standard_normal((n, m))]),
        ("mean", lambda x: T.sum_(T.mul(T.mean_(x, axis=1, keepdims=True),
                                        T.mean_(x, axis=1, keepdims=True))),
         [rng.standard_normal((n, m))]),
        ("l2norm", lambda x: T.sum_(T.l2norm(x)),
         [rng.standard_normal((n, m)) + 2.0]),
    ]

    # a fixed weighting makes the normalized-direction gradient generic
    wmat = rng.standard_normal((n, m))
    entries.append(
        ("l2_normalize", lambda x: T.sum_(T.mul(T.l2_normalize(x), wmat)),
         [rng.standard_normal((n, m)) + 1.0]))

    ids = rng.integers(0, n, size=(2, 3))
    entries.append(
        ("embedding", lambda tab: T.sum_(T.mul(T.embedding(tab, ids),
                                               T.embedding(tab, ids))),
         [rng.standard_normal((n, m))]))
    pos = np.stack([rng.permutation(L)[:3] for _ in range(2)])
    entries.append(
        ("gather_tokens", lambda x: T.sum_(T.mul(T.gather_tokens(x, pos),
                                                 T.gather_tokens(x, pos))),
         [rng.standard_normal((2, L, D))]))

    grid = rng.standard_normal((2, L, D))
    entries.append(
        ("umd_loss", lambda x: losses.umd_loss(x, grid),
         [grid + 0.3 * rng.standard_normal((2, L, D))]))
    masked = np.stack([rng.permutation(L)[:2] for _ in range(2)])
    entries.append(
        ("umd_loss_positions",
         lambda x: losses.umd_loss(x, grid, positions=masked),
         [grid + 0.3 * rng.standard_normal((2, L, D))]))

    def flc(za, zb, zt):
        z_imgs = {"a": T.l2_normalize(za), "b": T.l2_normalize(zb)}
        return losses.flc_loss(z_imgs, T.l2_normalize(zt), 1.0 / 0.07)
    entries.append(
        ("flc_loss", flc,
         [rng.standard_normal((3, 4)), rng.standard_normal((3, 4)),
          rng.standard_normal((3, 4))]))
    return entries


def gradient_suite(seed=0, rounds=3, h=gradcheck.DEFAULT_H,
                   tol=gradcheck.DEFAULT_TOL, report=None):
    """Check every differentiable op and both losses against central
    finite differences at `rounds` random shapes each. Returns a list
    of (name, worst_rel_err, passed) triples."""
    worst = {}
    for r in range(rounds):
        rng = make_rng(derive_seed(seed, r), "eval")
        for name, build, inputs in _suite_entries(rng):
            err = gradcheck.check_gradients(build, inputs, h=h, tol=np.inf)
            worst[name] = max(worst.get(name, 0.0), err)
    out = []
    for name, err in worst.items():
        ok = err <= tol
        out.append((name, err, ok))
        if report is not None:
            report(f"{'ok  ' if ok else 'FAIL'} {name:18s} rel err {err:.3e}")
    return out


def cmd_gradcheck(args):
    lines = []
    results = gradient_suite(seed=args.seed, rounds=args.rounds,
                             report=lines.append)
    sys.stdout.write("\n".join(lines) + "\n")
    bad = [name for name, _, ok in results if not ok]
    if bad:
        _log(args, f"gradient check FAILED for: {', '.join(bad)}")
        return EXIT_NUMERIC
    _log(args, f"all {len(results)} gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser():
    root = _Parser(prog="fewdiff", description=__doc__.split("\n\n")[0])
    sub = root.add_subparsers(dest="command", metavar="command")
    defaults = {}

    p = sub.add_parser("synth", help="generate a synthetic two-modality scene",
                       description="Write a.cube, b.cube, labels.bin and "
                                   "catalog.json into --out.")
    _common_flags(p)
    _scene_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", metavar="DIR")
    d = dict(_COMMON_DEFAULTS, **_SCENE_DEFAULTS)
    d.update(seed=0, out=None)
    defaults["synth"] = d

    p = sub.add_parser("pretrain", help="stage 1: mask-diffusion pretraining",
                       description="Self-supervised pretraining over the "
                                   "label-blind pool of a scene directory.")
    _common_flags(p)
    _model_flags(p)
    _split_flags(p)
    p.add_argument("--scene", metavar="DIR")
    p.add_argument("--out", metavar="CKPT")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--schedule", choices=["cosine", "step"])
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--no-diffusion", action="store_true", default=None)
    p.add_argument("--no-mask", action="store_true", default=None)
    p.add_argument("--records-out", metavar="FILE",
                   help="write per-step loss records as JSON lines")
    d = dict(_COMMON_DEFAULTS, **_MODEL_DEFAULTS)
    d.update(_SPLIT_DEFAULTS)
    d.update(scene=None, out=None, seed=0, epochs=100, batch_size=256,
             schedule="cosine", mask_ratio=0.7, no_diffusion=False,
             no_mask=False, records_out=None)
    defaults["pretrain"] = d

    p = sub.add_parser("finetune", help="stage 2: few-shot contrastive tuning",
                       description="Contrastive fine-tuning from a pretrain "
                                   "checkpoint on the scene's labeled shots.")
    _common_flags(p)
    _model_flags(p)
    _split_flags(p)
    p.add_argument("--scene", metavar="DIR")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--out", metavar="CKPT")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--schedule", choices=["cosine", "step"])
    p.add_argument("--prompt", choices=sorted(dataio.PROMPT_TEMPLATES))
    p.add_argument("--no-text", action="store_true", default=None)
    p.add_argument("--no-pretraining", action="store_true", default=None)
    p.add_argument("--records-out", metavar="FILE",
                   help="write per-step loss records as JSON lines")
    d = dict(_COMMON_DEFAULTS, **_MODEL_DEFAULTS)
    d.update(_SPLIT_DEFAULTS)
    d.update(scene=None, checkpoint=None, out=None, seed=0, epochs=150,
             batch_size=64, schedule="step", prompt="p1", no_text=False,
             no_pretraining=False, records_out=None)
    defaults["finetune"] = d

    p = sub.add_parser("eval", help="classify held-out pixels, report metrics",
                       description="Evaluate a finetune checkpoint on the "
                                   "scene's held-out labeled pixels.")
    _common_flags(p)
    _split_flags(p)
    p.add_argument("--scene", metavar="DIR")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--metrics-out", metavar="FILE",
                   help="metrics JSON path (default: stdout)")
    p.add_argument("--map-out", metavar="FILE",
                   help="also render a full-scene classification map (PPM)")
    p.add_argument("--chunk", type=int, help="pixels per forward batch")
    d = dict(_COMMON_DEFAULTS)
    d.update(_SPLIT_DEFAULTS)
    d.update(scene=None, checkpoint=None, metrics_out=None, map_out=None,
             chunk=256)
    defaults["eval"] = d

    p = sub.add_parser("render-map", help="render a label file to a PPM image")
    _common_flags(p)
    p.add_argument("--labels", metavar="FILE")
    p.add_argument("--catalog", metavar="FILE",
                   help="class catalog for colors (default: built-in palette)")
    p.add_argument("--out", metavar="FILE")
    d = dict(_COMMON_DEFAULTS)
    d.update(labels=None, catalog=None, out=None)
    defaults["render-map"] = d

    p = sub.add_parser("ablate", help="run an ablation sweep on synthetic scenes",
                       description="Axes: components, pool_size, prompts, "
                                   "mask_ratio, patch_size.")
    _common_flags(p)
    _scene_flags(p)
    _model_flags(p)
    p.add_argument("--axis", choices=["components", "pool_size", "prompts",
                                      "mask_ratio", "patch_size"])
    p.add_argument("--seeds", metavar="S0,S1,...")
    p.add_argument("--shots", type=int)
    p.add_argument("--pool", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--prompt", choices=sorted(dataio.PROMPT_TEMPLATES))
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--pretrain-batch", type=int)
    p.add_argument("--finetune-batch", type=int)
    p.add_argument("--out", metavar="FILE", help="report JSON (default: stdout)")
    d = dict(_COMMON_DEFAULTS, **_SCENE_DEFAULTS)
    d.update(_MODEL_DEFAULTS)
    d.update(shots=2, pool=700, mask_ratio=0.7, prompt="p1",
             pretrain_epochs=100, finetune_epochs=150, pretrain_batch=256,
             finetune_batch=64, axis=None, seeds="0,1,2", out=None)
    defaults["ablate"] = d

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _common_flags(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int, help="random shapes per op")
    d = dict(_COMMON_DEFAULTS)
    d.update(seed=0, rounds=3)
    defaults["gradcheck"] = d

    return root, defaults


_REQUIRED = {
    "synth": ["out"],
    "pretrain": ["scene", "out"],
    "finetune": ["scene", "out"],
    "eval": ["scene", "checkpoint"],
    "render-map": ["labels", "out"],
    "ablate": ["axis"],
    "gradcheck": [],
}

_HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "render-map": cmd_render_map,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    root, defaults = build_parser()
    try:
        args = root.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required (see --help)")
        args.given = _apply_config(args, defaults[args.command])
        for key in _REQUIRED[args.command]:
            if getattr(args, key) is None:
                flag = "--" + key.replace("_", "-")
                raise UsageError(f"{args.command} requires {flag}")
        _limit_threads(args)
        return _HANDLERS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:   # argparse --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (dataio.FormatError, FileNotFoundError, ValueError) as exc:
        # bad files and value-level mismatches (pool larger than the
        # scene, channel disagreements, unknown template names)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"error: non-finite numbers: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

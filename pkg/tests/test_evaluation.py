"""Metric formulas against a scalar double-loop oracle, map rendering
against hand-written fixtures, PCA and classification behavior, and the
ablation harness's settings table."""

import numpy as np
import pytest

from fewdiff import dataio
from fewdiff import evaluation as ev
from fewdiff.models import Linear, Model, ModelConfig
from fewdiff.numerics import make_rng


# --- metrics ---------------------------------------------------------------

def test_metrics_perfect_agreement():
    r = ev.metrics([0] * 50 + [1] * 50, [0] * 50 + [1] * 50, k=2)
    assert (r.oa, r.aa, r.kappa) == (1.0, 1.0, 1.0)
    assert np.array_equal(r.confusion, [[50, 0], [0, 50]])


def test_metrics_fixed_confusion():
    preds = [0] * 40 + [1] * 10 + [0] * 10 + [1] * 40
    trues = [0] * 50 + [1] * 50
    r = ev.metrics(preds, trues, k=2)
    assert r.oa == 0.8 and r.aa == 0.8
    assert abs(r.kappa - 0.6) < 1e-15


def test_metrics_constant_predictor_balanced():
    r = ev.metrics([0] * 100, [0] * 50 + [1] * 50, k=2)
    assert r.oa == 0.5 and r.kappa == 0.0


def _loop_metrics(preds, trues, k):
    n = len(preds)
    c = [[0] * k for _ in range(k)]
    for p, t in zip(preds, trues):
        c[t][p] += 1
    oa = sum(c[i][i] for i in range(k)) / n
    recalls = []
    for i in range(k):
        row = sum(c[i])
        if row:
            recalls.append(c[i][i] / row)
    aa = sum(recalls) / len(recalls)
    pe = sum(sum(c[i]) * sum(c[j][i] for j in range(k)) for i in range(k)) / n / n
    kappa = 1.0 if pe == 1.0 else (oa - pe) / (1.0 - pe)
    return oa, aa, kappa


def test_metrics_against_double_loop_oracle():
    rng = make_rng(0, "eval")
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        n = int(rng.integers(1, 60))
        preds = rng.integers(0, k, size=n)
        trues = rng.integers(0, k, size=n)
        r = ev.metrics(preds, trues, k=k)
        oa, aa, kappa = _loop_metrics(preds.tolist(), trues.tolist(), k)
        assert abs(r.oa - oa) < 1e-12
        assert abs(r.aa - aa) < 1e-12
        assert abs(r.kappa - kappa) < 1e-12
        assert -1.0 <= r.kappa <= 1.0


def test_metrics_zero_support_class_reported():
    r = ev.metrics([0, 1, 0], [0, 1, 1], k=3)
    assert r.zero_support == [2]
    assert r.per_class[2] is None
    # AA over the two live classes only
    assert abs(r.aa - (1.0 + 0.5) / 2) < 1e-15


def test_metrics_kappa_one_iff_diagonal():
    r = ev.metrics([2] * 7, [2] * 7, k=3)
    assert r.kappa == 1.0
    r2 = ev.metrics([0, 1], [0, 0], k=2)
    assert r2.kappa < 1.0


def test_metrics_input_validation():
    with pytest.raises(ValueError, match="empty"):
        ev.metrics([], [], k=2)
    with pytest.raises(ValueError, match="length"):
        ev.metrics([0, 1], [0], k=2)
    with pytest.raises(ValueError, match="outside"):
        ev.metrics([0, 2], [0, 1], k=2)


# --- map rendering ---------------------------------------------------------

def test_render_map_single_pixel():
    data = ev.render_map(np.array([[0]]), [(255, 0, 0)])
    assert data == b"P6\n1 1\n255\n\xff\x00\x00"


def test_render_map_all_unlabeled_black():
    grid = np.zeros((2, 3), dtype=int)
    data = ev.render_map(grid, [(9, 9, 9)], unlabeled=np.ones((2, 3), bool))
    assert data == b"P6\n3 2\n255\n" + b"\x00" * 18


def test_render_map_checkerboard_bytes():
    grid = np.array([[0, 1], [1, 0]])
    palette = [(255, 0, 0), (0, 255, 0)]
    want = (b"P6\n2 2\n255\n"
            b"\xff\x00\x00" b"\x00\xff\x00"
            b"\x00\xff\x00" b"\xff\x00\x00")
    assert ev.render_map(grid, palette) == want


def test_render_map_parses_as_p6():
    rng = make_rng(1, "eval")
    grid = rng.integers(0, 3, size=(5, 4))
    pal = rng.integers(0, 256, size=(3, 3))
    data = ev.render_map(grid, pal)
    # independent minimal P6 reader
    assert data.startswith(b"P6\n")
    header, payload = data.split(b"255\n", 1)
    dims = header.split(b"\n")[1].split()
    w, h = int(dims[0]), int(dims[1])
    assert (w, h) == (4, 5)
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    assert np.array_equal(img, pal[grid])


def test_render_map_rejects_bad_ids():
    with pytest.raises(ValueError, match="class id"):
        ev.render_map(np.array([[5]]), [(0, 0, 0)])


def test_render_map_unlabeled_id_ignored():
    # a bogus id under the unlabeled mask must not trip validation
    grid = np.array([[-1, 0]])
    mask = np.array([[True, False]])
    data = ev.render_map(grid, [(1, 2, 3)], unlabeled=mask)
    assert data.endswith(b"\x00\x00\x00\x01\x02\x03")


# --- PCA and feature dumps -------------------------------------------------

def test_pca_recovers_planar_points():
    rng = make_rng(2, "eval")
    basis, _ = np.linalg.qr(rng.standard_normal((8, 2)))
    coords = rng.standard_normal((40, 2)) * [3.0, 1.5]
    x = coords @ basis.T + rng.standard_normal(8) * 0.0 + 5.0
    proj, comps, mean = ev._pca2(x)
    recon = proj @ comps.T + mean
    assert np.max(np.abs(recon - x)) < 1e-6


def test_pca_sign_deterministic():
    rng = make_rng(3, "eval")
    x = rng.standard_normal((30, 5))
    _, c1, _ = ev._pca2(x)
    _, c2, _ = ev._pca2(-x + 2 * x.mean(axis=0))   # mirrored cloud
    for j in range(2):
        i = np.argmax(np.abs(c1[:, j]))
        assert c1[i, j] > 0
        i = np.argmax(np.abs(c2[:, j]))
        assert c2[i, j] > 0


@pytest.fixture(scope="module")
def tiny_model():
    cfg = ModelConfig(channels={"a": 2, "b": 1}, patch_size=3, D=8, heads=2,
                      layers=1, mlp_ratio=2, D_dec=8, layers_dec=1, D_txt=8,
                      heads_txt=2, layers_txt=1, E=4, context_length=12,
                      vocab_size=40, T=5)
    return Model(cfg, seed=0)


def _sample(rng, class_id=0):
    return dataio.PatchSample(
        patches={"a": rng.standard_normal((3, 3, 2)).astype(np.float32),
                 "b": rng.standard_normal((3, 3, 1)).astype(np.float32)},
        center=(1, 1), class_id=class_id)


def test_dump_features_row_count_and_determinism(tiny_model):
    rng = make_rng(4, "eval")
    samples = [_sample(rng, i % 2) for i in range(5)]
    d1 = ev.dump_features(tiny_model, samples)
    d2 = ev.dump_features(tiny_model, samples)
    assert len(d1.rows) == 5 * 2
    assert d1.projection.shape == (10, 2)
    assert np.array_equal(d1.projection, d2.projection)
    for r1, r2 in zip(d1.rows, d2.rows):
        assert np.array_equal(r1["feature"], r2["feature"])
        assert abs(np.linalg.norm(r1["feature"]) - 1.0) < 1e-5


def test_dump_features_skips_pca_below_three(tiny_model):
    rng = make_rng(5, "eval")
    d = ev.dump_features(tiny_model, [_sample(rng), _sample(rng)])
    assert d.projection is None
    assert "fewer than 3" in d.notice
    assert len(d.rows) == 4


# --- classification --------------------------------------------------------

def test_classify_single_class_always_zero(tiny_model):
    rng = make_rng(6, "eval")
    emb = np.ones((1, 4)) / 2.0
    patches = {"a": rng.standard_normal((3, 3, 3, 2)),
               "b": rng.standard_normal((3, 3, 3, 1))}
    assert np.array_equal(ev.classify(tiny_model, patches, emb), [0, 0, 0])


def test_classify_matches_own_embedding(tiny_model):
    rng = make_rng(7, "eval")
    s = _sample(rng)
    patches = {m: p[None] for m, p in s.patches.items()}
    z = ev._scores(tiny_model, patches, np.eye(4))   # raw mean embedding
    emb = np.zeros((3, 4))
    emb[2] = z[0] / np.linalg.norm(z[0])
    assert ev.classify(tiny_model, s, emb) == 2


def test_classify_scale_invariant_and_tie_lowest(tiny_model):
    rng = make_rng(8, "eval")
    patches = {"a": rng.standard_normal((2, 3, 3, 2)),
               "b": rng.standard_normal((2, 3, 3, 1))}
    emb = np.stack([np.eye(4)[0], np.eye(4)[1], np.eye(4)[2]])
    base = ev.classify(tiny_model, patches, emb)
    assert np.array_equal(base, ev.classify(tiny_model, patches, emb * 7.5))
    dup = np.stack([emb[int(base[0])], emb[int(base[0])]])  # tie: ids 0 and 1
    assert ev.classify(tiny_model, patches, dup)[0] == 0


def test_classify_accepts_linear_head(tiny_model):
    rng = make_rng(9, "eval")
    head = Linear(rng, 4, 3, np.dtype("float32"))
    patches = {"a": rng.standard_normal((2, 3, 3, 2)),
               "b": rng.standard_normal((2, 3, 3, 1))}
    ids = ev.classify(tiny_model, patches, head)
    assert ids.shape == (2,) and set(ids) <= {0, 1, 2}


def test_predict_coords_chunking_consistent(tiny_model):
    ca = dataio.Cube(make_rng(10, "eval").standard_normal((9, 9, 2)).astype(np.float32))
    cb = dataio.Cube(make_rng(11, "eval").standard_normal((9, 9, 1)).astype(np.float32))
    cubes = {"a": ca, "b": cb}
    coords = np.array([[r, c] for r in range(9) for c in range(0, 9, 2)])
    emb = np.linalg.qr(make_rng(12, "eval").standard_normal((4, 4)))[0][:3]
    a = ev.predict_coords(tiny_model, cubes, coords, emb, chunk=7)
    b = ev.predict_coords(tiny_model, cubes, coords, emb, chunk=1000)
    assert np.array_equal(a, b)


# --- class text embeddings -------------------------------------------------

def test_class_text_embeddings_unit_and_single_prompt():
    catalog = dataio.default_catalog(3)
    vocab = dataio.build_vocab(dataio.catalog_corpus(catalog), 32)
    cfg = ModelConfig(channels={"a": 1, "b": 1}, patch_size=3, D=8, heads=2,
                      layers=1, mlp_ratio=2, D_dec=8, layers_dec=1, D_txt=8,
                      heads_txt=2, layers_txt=1, E=4, context_length=32,
                      vocab_size=len(vocab), T=5)
    model = Model(cfg, seed=1)
    emb = ev.class_text_embeddings(model, catalog, "p2", vocab=vocab)
    assert emb.shape == (3, 4)
    assert np.allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-6)
    # single prompt per class under a template: equals that prompt's
    # embedding exactly
    from fewdiff.numerics import no_grad
    with no_grad():
        ids = vocab.encode(dataio.prompts_for(catalog, "p2")[0])
        direct = model.text(ids[None]).data[0]
    assert np.allclose(emb[0], direct, atol=1e-6)


def test_class_text_embeddings_vocab_mismatch():
    catalog = dataio.default_catalog(2)
    vocab = dataio.build_vocab(dataio.catalog_corpus(catalog), 32)
    cfg = ModelConfig(channels={"a": 1, "b": 1}, patch_size=3, D=8, heads=2,
                      layers=1, mlp_ratio=2, D_dec=8, layers_dec=1, D_txt=8,
                      heads_txt=2, layers_txt=1, E=4, context_length=32,
                      vocab_size=len(vocab) + 3, T=5)
    model = Model(cfg, seed=1)
    with pytest.raises(ValueError, match="vocabulary size"):
        ev.class_text_embeddings(model, catalog, "p1", vocab=vocab)


# --- ablation harness ------------------------------------------------------

def test_ablation_settings_components_exact_rows():
    labels = [s for s, _ in ev.ablation_settings("components")]
    assert labels == ["w/o Text", "w/o Diffusion", "w/o Mask",
                      "w/o Unsupervised", "full"]


def test_ablation_settings_axes():
    assert [s for s, _ in ev.ablation_settings("pool_size")] == ["300", "500", "700"]
    assert [s for s, _ in ev.ablation_settings("prompts")] == ["p1", "p2", "p3", "p4", "p5"]
    ratios = [o["mask_ratio"] for _, o in ev.ablation_settings("mask_ratio")]
    assert ratios == [round(0.1 * k, 1) for k in range(1, 10)]
    assert [o["patch_size"] for _, o in ev.ablation_settings("patch_size")] == [5, 7, 9, 11, 13]
    with pytest.raises(ValueError, match="unknown ablation axis"):
        ev.ablation_settings("optimizer")


def _tiny_exp(**kw):
    base = dict(H=14, W=14, C_A=3, C_B=1, pool=30, patch_size=3, T=5,
                pretrain_epochs=1, finetune_epochs=2, pretrain_batch=16,
                D=8, heads=2, layers=1, mlp_ratio=2, D_dec=8, layers_dec=1,
                D_txt=8, heads_txt=2, layers_txt=1, E=4, context_length=20,
                noise_sigma=0.3)
    base.update(kw)
    return ev.Experiment(**base)


def test_run_experiment_deterministic():
    a = ev.run_experiment(_tiny_exp(), seed=4)
    b = ev.run_experiment(_tiny_exp(), seed=4)
    assert a.report.to_dict() == b.report.to_dict()


def test_run_experiment_component_toggles():
    for _, overrides in ev.ablation_settings("components"):
        exp = _tiny_exp(**overrides)
        res = ev.run_experiment(exp, seed=2)
        assert 0.0 <= res.report.oa <= 1.0
        if not overrides.get("use_text", True):
            assert res.head is not None
        if not overrides.get("use_pretraining", True):
            assert res.pretrain_records == []


def test_ablate_report_shape():
    rows = ev.ablate(_tiny_exp(), "prompts", seeds=[0])
    assert [r["setting"] for r in rows] == ["p1", "p2", "p3", "p4", "p5"]
    for r in rows:
        for key in ("oa_mean", "oa_std", "aa_mean", "aa_std",
                    "kappa_mean", "kappa_std"):
            assert isinstance(r[key], float)
        assert r["seeds"] == [0]

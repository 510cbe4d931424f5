"""Training objectives: masked-restoration MSE and the bidirectional
temperature-scaled contrastive loss over image/text embedding pairs.

The contrastive batch carries one image per class, so the identity
assignment is the target in both directions; each modality is aligned
to the shared text embeddings separately and the per-modality losses
are averaged (a fused mode exists for the ablation harness).
"""

import numpy as np

from .numerics import Tensor
from .numerics import tensor as T


def umd_loss(x_hat, x0, positions=None):
    """Mean squared error between reconstruction and clean tokens.

    `positions` (B, M) restricts the loss to those grid rows (the
    masked-only ablation); default covers every position equally.
    """
    x0 = x0 if isinstance(x0, Tensor) else Tensor(np.asarray(x0, dtype=x_hat.dtype))
    if x_hat.shape != x0.shape:
        raise ValueError(f"reconstruction shape {x_hat.shape} != target {x0.shape}")
    if positions is not None:
        x_hat = T.gather_tokens(x_hat, positions)
        x0 = T.gather_tokens(x0, positions)
    diff = T.sub(x_hat, x0)
    return T.mean_(T.mul(diff, diff))


def similarity_probs(z, Z, tau):
    """softmax(z . Z_i / tau) over rows of Z, max-subtracted. Plain
    numpy; used for probability readouts, not for training gradients."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z)
    Z = np.asarray(Z)
    logits = z @ Z.T / tau
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def _check_unit_rows(name, z):
    norms = np.linalg.norm(z.data, axis=-1)
    if np.max(np.abs(norms - 1.0)) > 1e-6:
        raise ValueError(f"{name} rows must be unit-norm (max dev {np.max(np.abs(norms - 1.0)):.2e})")


def _diag_cross_entropy(logits):
    """Mean over rows of -log softmax(logits)[i, i]."""
    n = logits.shape[0]
    eye = Tensor(np.eye(n, dtype=logits.dtype))
    picked = T.sum_(T.mul(T.log_softmax(logits), eye))
    return T.mul(picked, -1.0 / n)


def flc_loss(z_imgs, z_txt, scale, fusion="per_modality"):
    """Bidirectional contrastive loss against shared text embeddings.

    z_imgs: modality -> (N, E) image embeddings, unit rows in
    per-modality mode, raw head features in fused mode (they are
    averaged then normalized here). z_txt: (N, E) unit rows, one text
    per class. scale: scalar Tensor holding 1/tau.
    """
    if not z_imgs:
        raise ValueError("no image embeddings given")
    txt = z_txt.data
    if len(np.unique(txt, axis=0)) != txt.shape[0]:
        raise ValueError("duplicate class texts in batch: targets ill-defined")
    _check_unit_rows("text embeddings", z_txt)

    if fusion == "fused":
        stack = list(z_imgs.values())
        acc = stack[0]
        for z in stack[1:]:
            acc = T.add(acc, z)
        z_imgs = {"fused": T.l2_normalize(T.mul(acc, 1.0 / len(stack)))}
    elif fusion != "per_modality":
        raise ValueError(f"unknown fusion mode {fusion!r}")

    total = None
    for name, z_img in z_imgs.items():
        _check_unit_rows(f"image embeddings ({name})", z_img)
        if z_img.shape != z_txt.shape:
            raise ValueError(
                f"image/text shape mismatch: {z_img.shape} vs {z_txt.shape}")
        logits = T.mul(T.matmul(z_img, T.swap_last2(z_txt)), scale)
        per_m = T.mul(
            T.add(_diag_cross_entropy(logits),
                  _diag_cross_entropy(T.swap_last2(logits))),
            0.5)
        total = per_m if total is None else T.add(total, per_m)
    return T.mul(total, 1.0 / len(z_imgs))

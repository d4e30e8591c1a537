"""Two-stage SADA training, the ERM baseline and leave-one-domain-out runs.

Stage 1 learns the encoder with the representation loss
``disc + beta * local_align`` on raw and stain-transformed batches. Stage 2
freezes the encoder and fits a linear softmax classifier on pooled features.
The ERM baseline trains the same encoder and classifier end to end with
cross-entropy only.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from ._validation import check_image_batch, check_labels
from .augmentation import augment_from_decompositions, decompose_batch, derive_seed
from .losses import disc_loss, local_align_loss, rep_loss, softmax, softmax_cross_entropy
from .metrics import confusion_matrix, f1_scores
from .networks import (
    classifier_backward,
    classifier_forward,
    encoder_backward,
    encoder_forward,
    extract_patches,
    images_to_od,
    init_classifier,
    init_encoder,
    init_local_projector,
    local_projector_backward,
    local_projector_forward,
    params_digest,
    sgd_step,
)
from .stain_separation import SnmfConfig
from .synth import DomainData

__all__ = [
    "TrainConfig",
    "TrainReport",
    "Stage1Result",
    "train_stage1",
    "train_stage2",
    "fit_linear_head",
    "train_erm_baseline",
    "pooled_features",
    "predict",
    "evaluate",
    "split_domain",
    "loo_experiment",
    "SADAClassifier",
    "ERMClassifier",
]

logger = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``learning_rate`` defaults to 5e-5, the scale suited to a large
    pretrained backbone; the toy encoder trained from scratch with plain SGD
    needs much larger rates (see ``toy_config`` and ``toy_erm_config``).

    ``include_transformed`` puts transformed embeddings into the contrastive
    softmax denominator. With raw embeddings alone, transformed positives sit
    only in the numerator, and the loss can be driven far below zero by
    pushing raw embeddings away from the anchors, which teaches the encoder
    to tell raw from restained images. Training therefore enables it by
    default.
    """

    steps: int = 4000
    batch_size: int = 32
    learning_rate: float = 5e-5
    classifier_learning_rate: float | None = None
    k: int = 3
    beta: float = 0.1
    tau: float = 0.1
    seed: int = 0
    grid: int = 4
    feature_dim: int = 64
    embed_dim: int = 32
    local_dim: int = 128
    include_transformed: bool = True
    freeze_backbone: bool = False
    per_domain_batches: bool = False
    grad_clip: float | None = None
    snmf: SnmfConfig = field(default_factory=SnmfConfig)

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        for name in ("batch_size", "grid", "feature_dim", "embed_dim", "local_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive when set")

    @property
    def clf_lr(self):
        if self.classifier_learning_rate is None:
            return self.learning_rate
        return self.classifier_learning_rate

    def to_dict(self):
        d = asdict(self)
        d["snmf"] = asdict(self.snmf)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "snmf" in d and isinstance(d["snmf"], dict):
            d["snmf"] = SnmfConfig(**d["snmf"])
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def toy_config(**overrides):
    """SADA settings for the synthetic benchmark at desk scale.

    Rates were picked on in-domain validation splits only.
    """
    base = TrainConfig(
        steps=2000,
        learning_rate=0.01,
        classifier_learning_rate=0.5,
        grad_clip=20.0,
        local_dim=32,
        snmf=SnmfConfig(max_iters=100, tol=1e-5),
    )
    return replace(base, **overrides)


def toy_erm_config(**overrides):
    """ERM baseline settings, tuned the same way as ``toy_config``."""
    base = {"learning_rate": 1.0, "classifier_learning_rate": 0.3, "grad_clip": None}
    return toy_config(**{**base, **overrides})


__all__ += ["toy_config", "toy_erm_config"]


@dataclass
class TrainReport:
    method: str
    held_out_domain: int | None
    stage1_curve: list
    stage2_curve: list
    confusion: np.ndarray
    f1_micro: float
    f1_macro: float
    per_class: np.ndarray
    in_domain_f1_micro: float | None = None
    in_domain_f1_macro: float | None = None

    def to_dict(self):
        return {
            "method": self.method,
            "held_out_domain": self.held_out_domain,
            "stage1_curve": [float(v) for v in self.stage1_curve],
            "stage2_curve": [float(v) for v in self.stage2_curve],
            "confusion": np.asarray(self.confusion).tolist(),
            "f1_micro": float(self.f1_micro),
            "f1_macro": float(self.f1_macro),
            "per_class": [float(v) for v in self.per_class],
            "in_domain_f1_micro": self.in_domain_f1_micro,
            "in_domain_f1_macro": self.in_domain_f1_macro,
        }


@dataclass
class Stage1Result:
    encoder: dict
    local_projector: dict
    curve: list


def _pool(train_domains):
    if isinstance(train_domains, DomainData):
        train_domains = [train_domains]
    images = np.concatenate([d.images for d in train_domains])
    labels = np.concatenate([d.labels for d in train_domains])
    dom = np.concatenate([np.full(len(d.labels), i) for i, d in enumerate(train_domains)])
    return images, labels, dom


class _Batcher:
    """Draws index batches: pooled across domains, or ``batch_size`` per domain."""

    def __init__(self, dom, cfg, rng):
        self.rng = rng
        self.cfg = cfg
        self.groups = [np.flatnonzero(dom == d) for d in np.unique(dom)]
        self.n = len(dom)

    def __call__(self):
        bs = self.cfg.batch_size
        if self.cfg.per_domain_batches:
            parts = [self.rng.choice(g, size=min(bs, len(g)), replace=False) for g in self.groups]
            return np.concatenate(parts)
        return self.rng.choice(self.n, size=min(bs, self.n), replace=False)


def _check_finite(value, step, stage):
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss in {stage} at step {step}")


def _unit(u, step):
    norms = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norms < _NORM_FLOOR):
        raise FloatingPointError(f"projected embedding collapsed to zero norm at step {step}")
    return u / norms, norms


def _unit_backward(g, z, norms):
    return (g - z * np.sum(z * g, axis=-1, keepdims=True)) / norms


def _clip_scale(grad_dicts, max_norm):
    if max_norm is None:
        return 1.0
    sq = sum(float(np.sum(g * g)) for d in grad_dicts for g in d.values())
    norm = np.sqrt(sq)
    return 1.0 if norm <= max_norm else max_norm / norm


def _patch_dim(images, grid):
    s = images.shape[1]
    return (s // grid) ** 2 * 3


def train_stage1(train_domains, cfg, decompositions=None):
    """Representation learning with stain-based augmentation.

    Parameters
    ----------
    train_domains : sequence of DomainData
    cfg : TrainConfig
    decompositions : list of StainDecomposition, optional
        Precomputed SNMF results aligned with the pooled training images.
        Computed here when omitted.

    Returns
    -------
    Stage1Result
    """
    images, labels, dom = _pool(train_domains)
    n, size = images.shape[0], images.shape[1]
    k = cfg.k
    if n < max(k, 2):
        raise ValueError(f"need at least {max(k, 2)} training images")
    if decompositions is None:
        decompositions = decompose_batch(images, cfg.snmf, derive_seed(cfg.seed, 100))
    if len(decompositions) != n:
        raise ValueError("decompositions do not align with the training images")

    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    enc = init_encoder(rng, _patch_dim(images, cfg.grid), cfg.feature_dim, cfg.embed_dim)
    proj = init_local_projector(rng, cfg.feature_dim, cfg.local_dim)
    batcher = _Batcher(dom, cfg, np.random.default_rng(derive_seed(cfg.seed, 2)))
    aug_rng = np.random.default_rng(derive_seed(cfg.seed, 3))
    curve = []

    for step in range(cfg.steps):
        idx = batcher()
        b = len(idx)
        _, samples = augment_from_decompositions(
            [decompositions[i] for i in idx], size, size, k, aug_rng,
            derive_seed(cfg.seed, 4, step))
        trans = np.stack([s.image.pixels for row in samples for s in row])
        batch = np.concatenate([images[idx], trans])
        patches = extract_patches(images_to_od(batch), cfg.grid)
        F, _, u, enc_cache = encoder_forward(enc, patches)

        z_all, norms = _unit(u, step)
        z = z_all[:b]
        z_t = z_all[b:].reshape(b, k - 1, -1)
        disc = disc_loss(z, z_t, labels[idx], cfg.tau, cfg.include_transformed)

        if cfg.beta > 0:
            E, proj_cache = local_projector_forward(proj, F)
            E_raw = E[:b]
            E_t = E[b:].reshape(b, k - 1, *E.shape[1:])
            la = local_align_loss(E_raw, E_t, k)
        else:
            la = None
        total = rep_loss(disc, la, cfg.beta) if la is not None else disc
        _check_finite(total.value, step, "stage 1")
        curve.append(total.value)

        gz = np.concatenate([total.gradients["z"], total.gradients["z_t"].reshape(-1, z.shape[1])])
        gu = _unit_backward(gz, z_all, norms)
        pgrads, gF = {}, None
        if la is not None:
            gE = np.concatenate([total.gradients["E"],
                                 total.gradients["E_t"].reshape(-1, *E.shape[1:])])
            pgrads, gF = local_projector_backward(proj, proj_cache, gE)
        egrads = encoder_backward(enc, enc_cache, gF=gF, gu=gu)
        if cfg.freeze_backbone:
            egrads = {key: egrads[key] for key in ("P", "c")}
        scale = _clip_scale([pgrads, egrads], cfg.grad_clip)
        sgd_step(proj, pgrads, cfg.learning_rate * scale)
        sgd_step(enc, egrads, cfg.learning_rate * scale)
        if step % 500 == 0:
            logger.debug("stage 1 step %d loss %.5f", step, total.value)

    return Stage1Result(enc, proj, curve)


def pooled_features(encoder, images, grid):
    """Globally pooled backbone features ``(N, Db)`` for a uint8 batch."""
    out = []
    for start in range(0, len(images), 256):
        patches = extract_patches(images_to_od(images[start:start + 256]), grid)
        out.append(encoder_forward(encoder, patches)[1])
    return np.concatenate(out) if out else np.zeros((0, encoder["A"].shape[1]))


def fit_linear_head(feats, labels, cfg, n_classes, groups=None):
    """Softmax classifier on fixed features with plain SGD.

    Features are standardized with statistics frozen at the start, stored in
    the classifier as ``mu``/``sd``.

    Returns
    -------
    classifier : dict
    curve : list of float
    """
    feats = np.asarray(feats, dtype=np.float64)
    labels = np.asarray(labels)
    groups = np.zeros(len(labels), dtype=np.int64) if groups is None else np.asarray(groups)
    rng = np.random.default_rng(derive_seed(cfg.seed, 5))
    clf = init_classifier(rng, feats.shape[1], n_classes)
    # fixed standardization keeps one step size usable across encoders
    clf["mu"] = feats.mean(axis=0)
    clf["sd"] = np.maximum(feats.std(axis=0), 1e-6)
    batcher = _Batcher(groups, cfg, np.random.default_rng(derive_seed(cfg.seed, 6)))
    curve = []
    for step in range(cfg.steps):
        idx = batcher()
        h = feats[idx]
        res = softmax_cross_entropy(classifier_forward(clf, h), labels[idx])
        _check_finite(res.value, step, "stage 2")
        curve.append(res.value)
        grads, _ = classifier_backward(clf, h, res.gradients["logits"])
        sgd_step(clf, grads, cfg.clf_lr)
    return clf, curve


def train_stage2(encoder, train_domains, cfg, n_classes=None):
    """Fit a linear softmax classifier on frozen pooled features.

    Returns
    -------
    classifier : dict
    curve : list of float
    """
    images, labels, dom = _pool(train_domains)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    digest = params_digest(encoder)
    feats = pooled_features(encoder, images, cfg.grid)
    clf, curve = fit_linear_head(feats, labels, cfg, n_classes, dom)
    if params_digest(encoder) != digest:
        raise RuntimeError("stage 2 modified the encoder")
    return clf, curve


def train_erm_baseline(train_domains, cfg, n_classes=None):
    """End-to-end cross-entropy training of encoder and classifier.

    Returns
    -------
    encoder : dict
    classifier : dict
    curve : list of float
    """
    images, labels, dom = _pool(train_domains)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    rng = np.random.default_rng(derive_seed(cfg.seed, 1))
    enc = init_encoder(rng, _patch_dim(images, cfg.grid), cfg.feature_dim, cfg.embed_dim)
    clf = init_classifier(np.random.default_rng(derive_seed(cfg.seed, 5)),
                          cfg.feature_dim, n_classes)
    batcher = _Batcher(dom, cfg, np.random.default_rng(derive_seed(cfg.seed, 2)))
    curve = []
    for step in range(cfg.steps):
        idx = batcher()
        patches = extract_patches(images_to_od(images[idx]), cfg.grid)
        _, h, _, cache = encoder_forward(enc, patches)
        res = softmax_cross_entropy(classifier_forward(clf, h), labels[idx])
        _check_finite(res.value, step, "erm")
        curve.append(res.value)
        cgrads, gh = classifier_backward(clf, h, res.gradients["logits"])
        egrads = encoder_backward(enc, cache, gh=gh)
        del egrads["P"], egrads["c"]
        scale = _clip_scale([cgrads, egrads], cfg.grad_clip)
        sgd_step(clf, cgrads, cfg.clf_lr * scale)
        sgd_step(enc, egrads, cfg.learning_rate * scale)
    return enc, clf, curve


def predict_proba(encoder, classifier, images, grid):
    return softmax(classifier_forward(classifier, pooled_features(encoder, images, grid)))


def predict(encoder, classifier, images, grid):
    return np.argmax(predict_proba(encoder, classifier, images, grid), axis=1)


__all__.append("predict_proba")


def evaluate(encoder, classifier, images, labels, grid, n_classes):
    """Confusion matrix and F1 scores on a labelled set."""
    pred = predict(encoder, classifier, images, grid)
    cm = confusion_matrix(labels, pred, n_classes)
    micro, macro, per_class = f1_scores(cm)
    return cm, micro, macro, per_class


def split_domain(data, test_fraction, seed):
    """Stratified train/test split of one domain."""
    idx = np.arange(len(data.labels))
    counts = np.bincount(data.labels)
    stratify = data.labels if counts[counts > 0].min() >= 2 else None
    tr, te = train_test_split(idx, test_size=test_fraction, random_state=seed % (2**32),
                              stratify=stratify)
    tr, te = np.sort(tr), np.sort(te)
    return (DomainData(data.spec, data.images[tr], data.labels[tr]),
            DomainData(data.spec, data.images[te], data.labels[te]))


def loo_experiment(domains, cfg, erm_cfg=None, test_fraction=0.2):
    """Hold out each domain in turn; train SADA and ERM on the rest.

    Parameters
    ----------
    domains : sequence of DomainData
    cfg : TrainConfig
        SADA settings; its seed also drives the splits and SNMF.
    erm_cfg : TrainConfig, optional
        Baseline settings; defaults to ``cfg``. Its seed is replaced by the
        fold seed so both methods share initialization and batch order.
    test_fraction : float
        Share of each training domain kept aside for the in-domain score.

    Returns
    -------
    list of dict
        ``{"held_out": domain_id, "sada": TrainReport, "erm": TrainReport}``
        per fold.
    """
    if len(domains) < 3:
        raise ValueError("leave-one-domain-out needs at least three domains")
    erm_cfg = cfg if erm_cfg is None else erm_cfg
    n_classes = int(max(d.labels.max() for d in domains)) + 1
    splits = [split_domain(d, test_fraction, derive_seed(cfg.seed, 50, i))
              for i, d in enumerate(domains)]
    # SNMF depends only on the image and its seed, so decompose each split once
    decs = [decompose_batch(tr.images, cfg.snmf, derive_seed(cfg.seed, 100, i))
            for i, (tr, _) in enumerate(splits)]

    reports = []
    for held, target in enumerate(domains):
        train = [splits[i][0] for i in range(len(domains)) if i != held]
        test_in = [splits[i][1] for i in range(len(domains)) if i != held]
        train_decs = [dec for i in range(len(domains)) if i != held for dec in decs[i]]
        in_images, in_labels, _ = _pool(test_in)
        fold_cfg = replace(cfg, seed=derive_seed(cfg.seed, 200, held))

        s1 = train_stage1(train, fold_cfg, train_decs)
        clf, curve2 = train_stage2(s1.encoder, train, fold_cfg, n_classes)
        sada = _report("sada", target, s1.encoder, clf, s1.curve, curve2,
                       in_images, in_labels, fold_cfg.grid, n_classes)

        erm_fold = replace(erm_cfg, seed=fold_cfg.seed)
        enc_e, clf_e, curve_e = train_erm_baseline(train, erm_fold, n_classes)
        erm = _report("erm", target, enc_e, clf_e, curve_e, [],
                      in_images, in_labels, erm_fold.grid, n_classes)
        logger.info("held-out domain %d: SADA macro %.3f, ERM macro %.3f",
                    target.spec.domain_id, sada.f1_macro, erm.f1_macro)
        reports.append({"held_out": target.spec.domain_id, "sada": sada, "erm": erm})
    return reports


def _report(method, target, enc, clf, curve1, curve2, in_images, in_labels, grid, n_classes):
    cm, micro, macro, per_class = evaluate(enc, clf, target.images, target.labels, grid, n_classes)
    _, in_micro, in_macro, _ = evaluate(enc, clf, in_images, in_labels, grid, n_classes)
    return TrainReport(method, target.spec.domain_id, curve1, curve2, cm, micro, macro,
                       per_class, in_micro, in_macro)


class _ToyClassifierBase(ClassifierMixin, BaseEstimator):
    # learning rates left as None take the tuned toy default of each method
    _make_config = staticmethod(toy_config)

    def __init__(self, steps=2000, batch_size=32, learning_rate=None,
                 classifier_learning_rate=None, k=3, beta=0.1, tau=0.1, grid=4,
                 feature_dim=64, embed_dim=32, local_dim=32, random_state=0):
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.classifier_learning_rate = classifier_learning_rate
        self.k = k
        self.beta = beta
        self.tau = tau
        self.grid = grid
        self.feature_dim = feature_dim
        self.embed_dim = embed_dim
        self.local_dim = local_dim
        self.random_state = random_state

    def _config(self):
        overrides = dict(
            steps=self.steps, batch_size=self.batch_size, k=self.k, beta=self.beta,
            tau=self.tau, grid=self.grid, feature_dim=self.feature_dim,
            embed_dim=self.embed_dim, local_dim=self.local_dim, seed=self.random_state)
        if self.learning_rate is not None:
            overrides["learning_rate"] = self.learning_rate
        if self.classifier_learning_rate is not None:
            overrides["classifier_learning_rate"] = self.classifier_learning_rate
        return self._make_config(**overrides)

    def _train_domains(self, X, y, groups):
        images = check_image_batch(X)
        y = check_labels(y, len(images))
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        y_enc = y_enc.reshape(-1)
        if groups is None:
            groups = np.zeros(len(y_enc), dtype=np.int64)
        groups = np.asarray(groups)
        domains = []
        for g in np.unique(groups):
            m = groups == g
            domains.append(DomainData(None, images[m], y_enc[m]))
        return domains

    def predict_proba(self, X):
        check_is_fitted(self, "encoder_")
        return predict_proba(self.encoder_, self.classifier_, check_image_batch(X), self.grid)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def transform(self, X):
        """Pooled backbone features of ``X``."""
        check_is_fitted(self, "encoder_")
        return pooled_features(self.encoder_, check_image_batch(X), self.grid)


class SADAClassifier(_ToyClassifierBase):
    """Two-stage stain-aware classifier on uint8 RGB image batches.

    ``fit(X, y, groups=None)`` runs representation learning with stain
    augmentation, then trains a linear head on the frozen encoder. ``groups``
    (source domain per image) only matters for per-domain batching.
    """

    def fit(self, X, y, groups=None):
        domains = self._train_domains(X, y, groups)
        cfg = self._config()
        s1 = train_stage1(domains, cfg)
        clf, curve2 = train_stage2(s1.encoder, domains, cfg, len(self.classes_))
        self.encoder_ = s1.encoder
        self.local_projector_ = s1.local_projector
        self.classifier_ = clf
        self.stage1_curve_ = s1.curve
        self.stage2_curve_ = curve2
        return self


class ERMClassifier(_ToyClassifierBase):
    """Same architecture trained end to end with cross-entropy alone."""

    _make_config = staticmethod(toy_erm_config)

    def fit(self, X, y, groups=None):
        domains = self._train_domains(X, y, groups)
        enc, clf, curve = train_erm_baseline(domains, self._config(), len(self.classes_))
        self.encoder_ = enc
        self.classifier_ = clf
        self.loss_curve_ = curve
        return self

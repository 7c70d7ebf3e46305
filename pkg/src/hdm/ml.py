"""Classifiers (shrinkage LDA, CART, random forest, linear SVM) and metrics.

All models are deterministic given their seed. Ties, whether in votes,
split gains or class scores, go to the lowest class or column index.
Labels are the four task strings in ``LABELS``.
"""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

LABELS = ("rest", "0-back", "2-back", "3-back")
N_CLASSES = len(LABELS)
_CODE = {name: i for i, name in enumerate(LABELS)}

MODEL_KINDS = ("lda", "cart", "rf", "svm")


class UndefinedMetricWarning(RuntimeWarning):
    pass


def encode(labels: Sequence[str]) -> np.ndarray:
    try:
        return np.array([_CODE[lab] for lab in labels], dtype=np.int64)
    except KeyError as err:
        raise ValueError(f"unknown label {err.args[0]!r}; expected one of {LABELS}") from None


def decode(codes) -> list[str]:
    return [LABELS[int(c)] for c in codes]


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    depth: int | None = None
    n_trees: int = 50
    max_features: str | int | None = "sqrt"
    min_leaf: int = 2
    shrinkage: float = 1e-3
    lam: float = 1e-3
    epochs: int = 20
    seed: int = 0
    name: str | None = None

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {self.kind!r}")

    @property
    def label(self) -> str:
        return self.name or self.kind.upper()

    def to_dict(self) -> dict:
        return asdict(self)


def standard_models(seed: int = 0) -> list[ModelSpec]:
    """The seven classifier rows of the comparison table.

    The radial-kernel SVM row is filled by a linear SVM with weaker
    regularisation and is named accordingly.
    """
    return [
        ModelSpec("svm", lam=1e-3, seed=seed, name="SVM-L"),
        ModelSpec("svm", lam=1e-4, seed=seed, name="SVM-R(linear)"),
        ModelSpec("rf", n_trees=50, seed=seed, name="RF-50"),
        ModelSpec("rf", n_trees=100, seed=seed, name="RF-100"),
        ModelSpec("cart", depth=6, seed=seed, name="CART-6"),
        ModelSpec("cart", depth=10, seed=seed, name="CART-10"),
        ModelSpec("lda", seed=seed, name="LDA"),
    ]


def _check_xy(X, y):
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix contains non-finite values")
    codes = encode(y) if len(y) and isinstance(y[0], str) else np.asarray(y, dtype=np.int64)
    if codes.size != X.shape[0]:
        raise ValueError("row count and label count differ")
    if np.unique(codes).size < 2:
        raise ValueError("training set needs at least two classes")
    return X, codes


class _Model:
    n_features: int

    def _check(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} feature columns, got {X.shape[-1] if X.ndim else 0}")
        return X

    def predict(self, X) -> list[str]:
        return decode(self.predict_codes(X))


class LDA(_Model):
    """Pooled-covariance LDA with ``shrinkage * trace / d`` added to the diagonal."""

    def __init__(self, shrinkage: float = 1e-3):
        self.shrinkage = shrinkage

    def fit(self, X, y):
        X, codes = _check_xy(X, y)
        n, d = X.shape
        self.n_features = d
        self.classes_ = np.unique(codes)
        means = np.stack([X[codes == c].mean(axis=0) for c in self.classes_])
        priors = np.array([np.mean(codes == c) for c in self.classes_])
        Xc = X - means[np.searchsorted(self.classes_, codes)]
        dof = n - self.classes_.size if n > self.classes_.size else n
        Xs = Xc / math.sqrt(dof)
        trace = float(np.sum(Xs * Xs))
        lam = self.shrinkage * trace / d if trace > 0 else self.shrinkage
        # (Sigma + lam I)^-1 M^T through the thin SVD of the scaled scatter
        _, s, vt = np.linalg.svd(Xs, full_matrices=False)
        proj = vt @ means.T
        W = vt.T @ (proj / (s[:, None] ** 2 + lam))
        if vt.shape[0] < d:
            W += (means.T - vt.T @ proj) / lam
        self.coef_ = W
        self.intercept_ = -0.5 * np.sum(means.T * W, axis=0) + np.log(priors)
        return self

    def decision(self, X):
        return self._check(X) @ self.coef_ + self.intercept_

    def predict_codes(self, X):
        return self.classes_[np.argmax(self.decision(X), axis=1)]

    def to_dict(self):
        return {"kind": "lda", "n_features": self.n_features, "classes": self.classes_.tolist(),
                "coef": self.coef_.tolist(), "intercept": self.intercept_.tolist()}

    @classmethod
    def from_dict(cls, d):
        m = cls()
        m.n_features = d["n_features"]
        m.classes_ = np.array(d["classes"], dtype=np.int64)
        m.coef_ = np.array(d["coef"], dtype=float).reshape(m.n_features, -1)
        m.intercept_ = np.array(d["intercept"], dtype=float)
        return m


def _node_impurity(counts: np.ndarray) -> float:
    n = counts.sum()
    return float(n - (counts * counts).sum() / n) if n else 0.0


def _best_split(X, codes, idx, features, min_leaf, block=256):
    """Lowest weighted Gini split over ``features`` (ascending column order).

    Returns ``(impurity, feature, threshold)`` or ``None``.
    """
    n = idx.size
    best = None
    nl = np.arange(1, n, dtype=float)[:, None]
    nr = n - nl
    for start in range(0, features.size, block):
        feats = features[start:start + block]
        Xn = X[np.ix_(idx, feats)]
        order = np.argsort(Xn, axis=0, kind="stable")
        xs = np.take_along_axis(Xn, order, axis=0)
        ys = codes[idx][order]
        left_sq = np.zeros((n - 1, feats.size))
        right_sq = np.zeros_like(left_sq)
        for c in range(N_CLASSES):
            cum = np.cumsum(ys == c, axis=0, dtype=np.int64)
            lc = cum[:-1].astype(float)
            rc = cum[-1] - lc
            left_sq += lc * lc
            right_sq += rc * rc
        imp = (nl - left_sq / nl) + (nr - right_sq / nr)
        ok = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        imp = np.where(ok, imp, np.inf)
        rows = np.argmin(imp, axis=0)
        vals = imp[rows, np.arange(feats.size)]
        j = int(np.argmin(vals))
        if np.isfinite(vals[j]) and (best is None or vals[j] < best[0]):
            i = rows[j]
            lo, hi = xs[i, j], xs[i + 1, j]
            thr = 0.5 * (lo + hi)
            if not lo <= thr < hi:
                thr = lo
            best = (float(vals[j]), int(feats[j]), float(thr))
    return best


class DecisionTree(_Model):
    """CART with Gini impurity; ``x[feature] <= threshold`` goes left."""

    def __init__(self, depth: int | None = None, min_leaf: int = 2, max_features: int | None = None, rng=None):
        self.depth = depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.rng = rng

    def fit(self, X, y):
        X, codes = _check_xy(X, y)
        self._grow(X, codes)
        return self

    def _grow(self, X, codes):
        n, d = X.shape
        self.n_features = d
        feature, threshold, left, right, value = [], [], [], [], []

        def new_node():
            for arr in (feature, left, right, value):
                arr.append(-1)
            threshold.append(0.0)
            return len(feature) - 1

        root = new_node()
        stack = [(root, np.arange(n), 0)]
        while stack:
            node, idx, level = stack.pop()
            counts = np.bincount(codes[idx], minlength=N_CLASSES)
            value[node] = int(np.argmax(counts))
            if (self.depth is not None and level >= self.depth) or idx.size < 2 * self.min_leaf \
                    or np.count_nonzero(counts) < 2:
                continue
            if self.max_features is not None and self.max_features < d:
                feats = np.sort(self.rng.choice(d, self.max_features, replace=False))
            else:
                feats = np.arange(d)
            split = _best_split(X, codes, idx, feats, self.min_leaf)
            if split is None or not split[0] < _node_impurity(counts):
                continue
            _, f, thr = split
            go_left = X[idx, f] <= thr
            feature[node], threshold[node] = f, thr
            l_node, r_node = new_node(), new_node()
            left[node], right[node] = l_node, r_node
            # right pushed first so the left subtree is numbered first
            stack.append((r_node, idx[~go_left], level + 1))
            stack.append((l_node, idx[go_left], level + 1))
        self.feature_ = np.array(feature, dtype=np.int64)
        self.threshold_ = np.array(threshold, dtype=float)
        self.left_ = np.array(left, dtype=np.int64)
        self.right_ = np.array(right, dtype=np.int64)
        self.value_ = np.array(value, dtype=np.int64)

    def predict_codes(self, X):
        X = self._check(X)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature_[node]
            inner = f >= 0
            if not inner.any():
                break
            go_left = X[rows[inner], f[inner]] <= self.threshold_[node[inner]]
            node[inner] = np.where(go_left, self.left_[node[inner]], self.right_[node[inner]])
        return self.value_[node]

    def to_dict(self):
        return {"kind": "cart", "n_features": self.n_features, "feature": self.feature_.tolist(),
                "threshold": self.threshold_.tolist(), "left": self.left_.tolist(),
                "right": self.right_.tolist(), "value": self.value_.tolist()}

    @classmethod
    def from_dict(cls, d):
        t = cls()
        t.n_features = d["n_features"]
        t.feature_ = np.array(d["feature"], dtype=np.int64)
        t.threshold_ = np.array(d["threshold"], dtype=float)
        t.left_ = np.array(d["left"], dtype=np.int64)
        t.right_ = np.array(d["right"], dtype=np.int64)
        t.value_ = np.array(d["value"], dtype=np.int64)
        return t


def _resolve_max_features(spec, d: int) -> int | None:
    if spec is None:
        return None
    if spec == "sqrt":
        return max(1, int(math.sqrt(d)))
    return int(spec)


def bootstrap_indices(seed_seq: np.random.SeedSequence, n: int) -> tuple[np.ndarray, np.random.Generator]:
    rng = np.random.default_rng(seed_seq)
    return rng.integers(0, n, n), rng


class RandomForest(_Model):
    """Bagged CART with per-split feature subsampling and majority vote."""

    def __init__(self, n_trees=50, depth=None, min_leaf=2, max_features="sqrt", seed=0, n_jobs=1):
        self.n_trees = n_trees
        self.depth = depth
        self.min_leaf = min_leaf
        self.max_features = max_features
        self.seed = seed
        self.n_jobs = n_jobs

    def fit(self, X, y):
        X, codes = _check_xy(X, y)
        n, d = X.shape
        self.n_features = d
        m = _resolve_max_features(self.max_features, d)
        seeds = np.random.SeedSequence(self.seed).spawn(self.n_trees)

        def grow(ss):
            boot, rng = bootstrap_indices(ss, n)
            tree = DecisionTree(self.depth, self.min_leaf, m, rng)
            tree._grow(X[boot], codes[boot])
            return tree

        if self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                self.trees_ = list(pool.map(grow, seeds))
        else:
            self.trees_ = [grow(ss) for ss in seeds]
        return self

    def predict_codes(self, X):
        X = self._check(X)
        votes = np.zeros((X.shape[0], N_CLASSES), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.trees_:
            np.add.at(votes, (rows, tree.predict_codes(X)), 1)
        return np.argmax(votes, axis=1)

    def to_dict(self):
        return {"kind": "rf", "n_features": self.n_features, "trees": [t.to_dict() for t in self.trees_]}

    @classmethod
    def from_dict(cls, d):
        f = cls(n_trees=len(d["trees"]))
        f.n_features = d["n_features"]
        f.trees_ = [DecisionTree.from_dict(t) for t in d["trees"]]
        return f


class LinearSVM(_Model):
    """One-vs-rest hinge-loss SVM trained by Pegasos subgradient steps.

    Features are standardised with training statistics; a constant column
    plays the role of the bias. Each epoch visits rows in a seeded
    permutation and the returned weights average the final epoch's iterates.
    """

    def __init__(self, lam=1e-3, epochs=20, seed=0):
        self.lam = lam
        self.epochs = epochs
        self.seed = seed

    def _augment(self, X):
        Z = (X - self.mean_) / self.scale_
        return np.hstack([Z, np.ones((Z.shape[0], 1))])

    def fit(self, X, y):
        X, codes = _check_xy(X, y)
        n, d = X.shape
        self.n_features = d
        self.classes_ = np.unique(codes)
        self.mean_ = X.mean(axis=0)
        sd = X.std(axis=0)
        self.scale_ = np.where(sd > 0, sd, 1.0)
        Z = self._augment(X)
        Y = np.where(codes[:, None] == self.classes_[None, :], 1.0, -1.0)
        W = np.zeros((self.classes_.size, d + 1))
        avg = np.zeros_like(W)
        rng = np.random.default_rng(self.seed)
        radius = 1.0 / math.sqrt(self.lam)
        t = 0
        for epoch in range(self.epochs):
            last = epoch == self.epochs - 1
            for i in rng.permutation(n):
                t += 1
                eta = 1.0 / (self.lam * t)
                z = Z[i]
                viol = Y[i] * (W @ z) < 1.0
                W *= 1.0 - eta * self.lam
                W[viol] += eta * Y[i, viol, None] * z
                norms = np.linalg.norm(W, axis=1)
                W *= np.minimum(1.0, radius / np.maximum(norms, 1e-300))[:, None]
                if last:
                    avg += W
        self.coef_ = avg / n if self.epochs else W
        return self

    def decision(self, X):
        return self._augment(self._check(X)) @ self.coef_.T

    def predict_codes(self, X):
        return self.classes_[np.argmax(self.decision(X), axis=1)]

    def to_dict(self):
        return {"kind": "svm", "n_features": self.n_features, "classes": self.classes_.tolist(),
                "mean": self.mean_.tolist(), "scale": self.scale_.tolist(), "coef": self.coef_.tolist()}

    @classmethod
    def from_dict(cls, d):
        m = cls()
        m.n_features = d["n_features"]
        m.classes_ = np.array(d["classes"], dtype=np.int64)
        m.mean_ = np.array(d["mean"], dtype=float)
        m.scale_ = np.array(d["scale"], dtype=float)
        m.coef_ = np.array(d["coef"], dtype=float).reshape(m.classes_.size, -1)
        return m


_LOADERS = {"lda": LDA, "cart": DecisionTree, "rf": RandomForest, "svm": LinearSVM}


def train(spec: ModelSpec, X, y, n_jobs: int = 1):
    if spec.kind == "lda":
        model = LDA(spec.shrinkage)
    elif spec.kind == "cart":
        model = DecisionTree(spec.depth, spec.min_leaf)
    elif spec.kind == "rf":
        model = RandomForest(spec.n_trees, spec.depth, spec.min_leaf, spec.max_features, spec.seed, n_jobs)
    else:
        model = LinearSVM(spec.lam, spec.epochs, spec.seed)
    return model.fit(X, y)


def predict(model, X) -> list[str]:
    return model.predict(X)


def dump_model(model) -> str:
    return json.dumps(model.to_dict())


def load_model(text: str):
    d = json.loads(text)
    return _LOADERS[d["kind"]].from_dict(d)


@dataclass
class ConfusionMatrix:
    """Counts with rows = actual and columns = predicted, in ``LABELS`` order."""

    counts: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64))

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (N_CLASSES, N_CLASSES) or np.any(self.counts < 0):
            raise ValueError("confusion matrix must be a non-negative 4x4 count table")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)

    def to_csv(self) -> str:
        lines = ["actual," + ",".join(LABELS)]
        for lab, row in zip(LABELS, self.counts):
            lines.append(lab + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def confusion(actual: Sequence[str], predicted: Sequence[str]) -> ConfusionMatrix:
    if len(actual) != len(predicted):
        raise ValueError("actual and predicted differ in length")
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(cm, (encode(actual), encode(predicted)), 1)
    return ConfusionMatrix(cm)


@dataclass
class MetricsReport:
    accuracy: float
    recall: dict[str, float]
    precision: dict[str, float]
    macro_recall: float
    macro_precision: float
    undefined: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy plus per-class recall (diag / row sum) and precision (diag / column sum).

    Zero denominators give 0 and are listed in ``undefined``.
    """
    c = cm.counts
    if cm.total <= 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(c).astype(float)
    rows, cols = c.sum(axis=1), c.sum(axis=0)
    recall, precision, undefined = {}, {}, []
    for i, lab in enumerate(LABELS):
        if rows[i]:
            recall[lab] = diag[i] / rows[i]
        else:
            recall[lab] = 0.0
            undefined.append(f"recall:{lab}")
        if cols[i]:
            precision[lab] = diag[i] / cols[i]
        else:
            precision[lab] = 0.0
            undefined.append(f"precision:{lab}")
    if undefined:
        warnings.warn(f"undefined metrics set to 0: {undefined}", UndefinedMetricWarning, stacklevel=2)
    return MetricsReport(
        accuracy=float(diag.sum() / cm.total),
        recall=recall,
        precision=precision,
        macro_recall=float(np.mean(list(recall.values()))),
        macro_precision=float(np.mean(list(precision.values()))),
        undefined=undefined,
    )

"""Reference differentiable point-set classifier with exact gradients.

A shared per-point MLP with ReLU activations, a symmetric max-pool into a
global feature vector, and a linear head.  Forward, backward (w.r.t.
parameters and inputs) and a forward-mode directional derivative are all
written out by hand in numpy so the gradient contract is exact and the
whole model stays deterministic in double precision.

Max-pool ties route the gradient to the smallest point index (numpy
argmax order); the ReLU subgradient at 0 is 0.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"PCPM"

# widths are (input_dim, hidden..., feature_dim)
ARCHS = {
    "ref-small": (3, 64, 128, 256),
    "ref-variant": (3, 32, 64, 128),
}


def mean_pairwise_row_cosine(W: np.ndarray) -> float:
    """Mean cosine similarity over all distinct row pairs of a matrix."""
    W = np.asarray(W, dtype=np.float64)
    norms = np.sqrt((W**2).sum(axis=1))
    if np.any(norms <= 0.0):
        raise ValueError("degenerate head row")
    U = W / norms[:, None]
    S = U @ U.T
    c = W.shape[0]
    if c < 2:
        raise ValueError("need at least two rows")
    iu = np.triu_indices(c, k=1)
    return float(S[iu].mean())


class PointSetClassifier:
    """Max-pool point-set network with a flat float64 parameter vector."""

    def __init__(self, arch: str, num_classes: int, params: np.ndarray | None = None):
        if arch not in ARCHS:
            raise ValueError(f"unknown architecture {arch!r}")
        if num_classes < 2:
            raise ValueError("need at least two classes")
        self.arch = arch
        self.widths = ARCHS[arch]
        self.feature_dim = self.widths[-1]
        self.num_classes = num_classes
        self._layout = self._build_layout()
        size = sum(int(np.prod(shape)) for _, shape in self._layout)
        if params is None:
            params = np.zeros(size, dtype=np.float64)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (size,):
            raise ValueError(f"expected {size} parameters, got {params.shape}")
        self.params = params
        self._views = {}
        offset = 0
        for name, shape in self._layout:
            count = int(np.prod(shape))
            self._views[name] = self.params[offset : offset + count].reshape(shape)
            offset += count

    def _build_layout(self):
        layout = []
        for i in range(len(self.widths) - 1):
            layout.append((f"W{i + 1}", (self.widths[i], self.widths[i + 1])))
            layout.append((f"b{i + 1}", (self.widths[i + 1],)))
        layout.append(("Wh", (self.num_classes, self.feature_dim)))
        layout.append(("bh", (self.num_classes,)))
        return layout

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    @property
    def descriptor(self) -> str:
        return f"{self.arch};classes={self.num_classes}"

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def copy(self) -> "PointSetClassifier":
        return PointSetClassifier(self.arch, self.num_classes, self.params.copy())

    # -- forward / backward -------------------------------------------------

    def forward_batch(self, X: np.ndarray, want_cache: bool = False):
        """Run a (B, n, 3) batch; returns (features (B,d), logits (B,C))."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3 or X.shape[2] != self.widths[0]:
            raise ValueError(f"expected (B, n, {self.widths[0]}) input, got {X.shape}")
        B, n, _ = X.shape
        act = X.reshape(B * n, -1)
        zs, acts = [], [act]
        for i in range(self.n_layers):
            z = act @ self._views[f"W{i + 1}"] + self._views[f"b{i + 1}"]
            act = np.maximum(z, 0.0)
            zs.append(z)
            acts.append(act)
        H = act.reshape(B, n, self.feature_dim)
        idx = H.argmax(axis=1)
        G = np.take_along_axis(H, idx[:, None, :], axis=1)[:, 0, :]
        logits = G @ self._views["Wh"].T + self._views["bh"]
        if not want_cache:
            return G, logits
        cache = {"X": X, "zs": zs, "acts": acts, "idx": idx, "G": G, "B": B, "n": n}
        return G, logits, cache

    def forward(self, x: np.ndarray):
        """Single-cloud forward; returns (features (d,), logits (C,))."""
        pts = np.asarray(getattr(x, "points", x), dtype=np.float64)
        G, logits = self.forward_batch(pts[None])
        return G[0], logits[0]

    def backward_batch(
        self,
        cache,
        d_features: np.ndarray | None = None,
        d_logits: np.ndarray | None = None,
        want_params: bool = True,
        want_inputs: bool = False,
    ):
        """Backpropagate batch cotangents; returns (flat param grad, input grad)."""
        B, n = cache["B"], cache["n"]
        G = cache["G"]
        dG = np.zeros_like(G)
        pgrad = np.zeros_like(self.params) if want_params else None
        grads = {}
        if pgrad is not None:
            offset = 0
            for name, shape in self._layout:
                count = int(np.prod(shape))
                grads[name] = pgrad[offset : offset + count].reshape(shape)
                offset += count
        if d_logits is not None:
            dG += d_logits @ self._views["Wh"]
            if want_params:
                grads["Wh"] += d_logits.T @ G
                grads["bh"] += d_logits.sum(axis=0)
        if d_features is not None:
            dG += d_features
        dH = np.zeros((B, n, self.feature_dim))
        np.put_along_axis(dH, cache["idx"][:, None, :], dG[:, None, :], axis=1)
        d_act = dH.reshape(B * n, self.feature_dim)
        for i in range(self.n_layers, 0, -1):
            dz = d_act * (cache["zs"][i - 1] > 0.0)
            if want_params:
                grads[f"W{i}"] += cache["acts"][i - 1].T @ dz
                grads[f"b{i}"] += dz.sum(axis=0)
            d_act = dz @ self._views[f"W{i}"].T
        dX = d_act.reshape(B, n, self.widths[0]) if want_inputs else None
        return pgrad, dX

    # -- forward-mode directional derivative --------------------------------

    def forward_jvp(
        self,
        X: np.ndarray,
        d_params: np.ndarray | None = None,
        d_inputs: np.ndarray | None = None,
    ):
        """Directional derivative of (features, logits) along a perturbation.

        Also returns a kink clearance: the smallest step size (in units of
        the perturbation) at which some ReLU pre-activation or max-pool
        winner would cross over.  Finite-difference probes with h well
        below the clearance stay on one smooth piece of the network.
        """
        X = np.asarray(X, dtype=np.float64)
        B, n, _ = X.shape
        dviews = {}
        if d_params is not None:
            d_params = np.asarray(d_params, dtype=np.float64)
            offset = 0
            for name, shape in self._layout:
                count = int(np.prod(shape))
                dviews[name] = d_params[offset : offset + count].reshape(shape)
                offset += count
        act = X.reshape(B * n, -1)
        dact = (
            np.asarray(d_inputs, dtype=np.float64).reshape(B * n, -1)
            if d_inputs is not None
            else np.zeros_like(act)
        )
        clearance = np.inf
        tiny = 1e-300
        for i in range(self.n_layers):
            W = self._views[f"W{i + 1}"]
            z = act @ W + self._views[f"b{i + 1}"]
            dz = dact @ W
            if dviews:
                dz = dz + act @ dviews[f"W{i + 1}"] + dviews[f"b{i + 1}"]
            moving = np.abs(dz) > 0.0
            if moving.any():
                ratios = np.abs(z[moving]) / (np.abs(dz[moving]) + tiny)
                clearance = min(clearance, float(ratios.min()))
            mask = z > 0.0
            act = z * mask
            dact = dz * mask
        H = act.reshape(B, n, self.feature_dim)
        dH = dact.reshape(B, n, self.feature_dim)
        idx = H.argmax(axis=1)
        G = np.take_along_axis(H, idx[:, None, :], axis=1)[:, 0, :]
        dG = np.take_along_axis(dH, idx[:, None, :], axis=1)[:, 0, :]
        if n > 1:
            part = np.partition(H, n - 2, axis=1)
            second = part[:, n - 2, :]
            gaps = G - second
            # the runner-up per channel, for its derivative
            order = np.argsort(H, axis=1)
            runner = order[:, n - 2, :]
            d_second = np.take_along_axis(dH, runner[:, None, :], axis=1)[:, 0, :]
            rates = np.abs(dG - d_second)
            moving = rates > 0.0
            if moving.any():
                ratios = gaps[moving] / (rates[moving] + tiny)
                clearance = min(clearance, float(ratios.min()))
        Wh = self._views["Wh"]
        d_logits = dG @ Wh.T
        if dviews:
            d_logits = d_logits + G @ dviews["Wh"].T + dviews["bh"]
        return dG, d_logits, clearance

    # -- checkpoints ---------------------------------------------------------

    def save(self, path) -> None:
        desc = self.descriptor.encode("utf-8")
        with open(Path(path), "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<I", len(desc)))
            fh.write(desc)
            fh.write(struct.pack("<Q", self.params.size))
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path) -> "PointSetClassifier":
        with open(Path(path), "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
            (dlen,) = struct.unpack("<I", fh.read(4))
            descriptor = fh.read(dlen).decode("utf-8")
            (count,) = struct.unpack("<Q", fh.read(8))
            params = np.frombuffer(fh.read(count * 8), dtype="<f8").copy()
        arch, _, classes = descriptor.partition(";classes=")
        return cls(arch, int(classes), params)


def init_classifier(
    seed: int, arch: str = "ref-small", num_classes: int = 4
) -> PointSetClassifier:
    """Deterministically initialized classifier for a fixed seed."""
    model = PointSetClassifier(arch, num_classes)
    rng = np.random.default_rng(seed)
    for i in range(model.n_layers):
        W = model[f"W{i + 1}"]
        W[...] = rng.normal(0.0, np.sqrt(2.0 / W.shape[0]), W.shape)
    Wh = model["Wh"]
    Wh[...] = rng.normal(0.0, np.sqrt(1.0 / model.feature_dim), Wh.shape)
    return model


def grad_params(model, loss, points, labels) -> np.ndarray:
    """Flat gradient of a batch loss with respect to the parameters."""
    feats, logits, cache = model.forward_batch(points, want_cache=True)
    _, d_feat, d_logits = loss.value_and_grads(feats, logits, labels)
    pgrad, _ = model.backward_batch(cache, d_feat, d_logits, want_params=True)
    return pgrad


def grad_input(model, loss, points, labels) -> np.ndarray:
    """Per-sample (B, n, 3) gradient of a batch loss w.r.t. the inputs."""
    feats, logits, cache = model.forward_batch(points, want_cache=True)
    _, d_feat, d_logits = loss.value_and_grads(feats, logits, labels)
    _, dX = model.backward_batch(
        cache, d_feat, d_logits, want_params=False, want_inputs=True
    )
    return dX


def last_layer_cosine_stats(model: PointSetClassifier) -> float:
    """Mean pairwise cosine similarity of the linear head's rows."""
    return mean_pairwise_row_cosine(model["Wh"])


class LinearClassifier:
    """Bias-free linear classifier with sqrt(d)-normalized rows."""

    def __init__(self, W: np.ndarray):
        self.W = np.asarray(W, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] < 2:
            raise ValueError("weight matrix must be (C, d) with C >= 2")

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def normalize_rows(self) -> "LinearClassifier":
        norms = np.sqrt((self.W**2).sum(axis=1))
        if np.any(norms <= 0.0):
            raise ValueError("degenerate row")
        self.W = self.W * (np.sqrt(self.dim) / norms)[:, None]
        return self

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return X @ self.W.T

    def max_pairwise_cosine(self) -> float:
        norms = np.sqrt((self.W**2).sum(axis=1))
        U = self.W / norms[:, None]
        S = U @ U.T
        iu = np.triu_indices(self.W.shape[0], k=1)
        return float(S[iu].max())

"""Class-conditional noise predictor over 2D points.

A small tanh MLP with hand-written forward/backward passes over one flat
float64 parameter vector. Inputs are the noisy point, a sinusoidal embedding
of the integer timestep, and a one-hot class embedding that reserves label 0
for the null condition used by classifier-free guidance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, MismatchError
from .flatfile import read_flat_file, write_flat_file
from .optim import AdamState, adam_step
from .schedule import NoiseSchedule, posterior_coeffs

__all__ = [
    "NULL_LABEL",
    "POINT_DIM",
    "ClassSpec",
    "TwoMarginalDataset",
    "TrainConfig",
    "check_class_separation",
    "Denoiser",
    "default_class_params",
    "sample_two_marginal_dataset",
    "predict",
    "cfg_predict",
    "cfg_predict_batch",
    "time_embedding",
    "loss_and_grad",
    "train_step",
    "train",
    "ancestral_sample",
    "ancestral_sample_batch",
    "save_checkpoint",
    "load_checkpoint",
]

NULL_LABEL = 0
POINT_DIM = 2

# Tail mass of either class beyond the midpoint plane must stay below this
# for the two marginals to count as separated.
_MAX_OVERLAP_TAIL = 1e-3


@dataclass(frozen=True)
class ClassSpec:
    """Isotropic Gaussian generator for one class."""

    mean: np.ndarray
    std: float


@dataclass(frozen=True)
class TwoMarginalDataset:
    """Labeled 2D samples from two separated class-conditional Gaussians."""

    points: np.ndarray
    labels: np.ndarray
    class_params: tuple[ClassSpec, ClassSpec]


@dataclass(frozen=True)
class TrainConfig:
    """Denoiser training hyperparameters."""

    steps: int = 4000
    batch_size: int = 128
    learning_rate: float = 1e-3
    null_cond_prob: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.null_cond_prob < 1.0:
            raise ValueError(f"null_cond_prob must be in [0, 1), got {self.null_cond_prob}")


def default_class_params() -> tuple[ClassSpec, ClassSpec]:
    return (
        ClassSpec(mean=np.array([-2.0, 0.0]), std=0.5),
        ClassSpec(mean=np.array([2.0, 0.0]), std=0.5),
    )


def check_class_separation(class_params: tuple[ClassSpec, ClassSpec]) -> None:
    for k, spec in enumerate(class_params):
        if spec.std <= 0.0 or not np.isfinite(spec.std):
            raise ValueError(f"class {k + 1} has degenerate std {spec.std}")
        if np.asarray(spec.mean).shape != (POINT_DIM,):
            raise ValueError(f"class {k + 1} mean must be a 2-vector")
    gap = float(np.linalg.norm(np.asarray(class_params[0].mean) - np.asarray(class_params[1].mean)))
    worst = max(spec.std for spec in class_params)
    tail = 0.5 * math.erfc(gap / (2.0 * worst) / math.sqrt(2.0))
    if tail >= _MAX_OVERLAP_TAIL:
        raise ValueError(
            f"classes overlap: tail mass {tail:.2e} beyond the midpoint exceeds {_MAX_OVERLAP_TAIL}"
        )


def sample_two_marginal_dataset(
    n: int,
    class_params: tuple[ClassSpec, ClassSpec] | None = None,
    seed: int = 0,
) -> TwoMarginalDataset:
    """Draw n/2 points per class; deterministic for a fixed seed."""
    n = int(n)
    if n < 2 or n % 2 != 0:
        raise ValueError(f"need an even n >= 2, got {n}")
    if class_params is None:
        class_params = default_class_params()
    check_class_separation(class_params)
    rng = np.random.default_rng(seed)
    half = n // 2
    points = np.empty((n, POINT_DIM))
    labels = np.empty(n, dtype=np.int64)
    for k, spec in enumerate(class_params):
        block = slice(k * half, (k + 1) * half)
        points[block] = np.asarray(spec.mean) + spec.std * rng.standard_normal((half, POINT_DIM))
        labels[block] = k + 1
    return TwoMarginalDataset(points=points, labels=labels, class_params=class_params)


@dataclass
class Denoiser:
    """Flat-parameter tanh MLP predicting the injected noise.

    ``arch`` lists every layer width including input and output, e.g.
    (13, 64, 64, 2). ``opt_state`` is training-only bookkeeping and is not
    part of checkpoints. Reads are safe to share; ``train_step`` mutates
    and must be externally serialized.
    """

    params: np.ndarray
    arch: tuple[int, ...]
    num_classes: int
    t_embed_dim: int
    opt_state: AdamState | None = field(default=None, repr=False)

    @classmethod
    def create(
        cls,
        num_classes: int = 2,
        t_embed_dim: int = 8,
        hidden: tuple[int, ...] = (64, 64),
        seed: int = 0,
        random_head: bool = False,
    ) -> "Denoiser":
        """Fresh denoiser with fan-in-scaled random hidden layers.

        The final layer is zeroed by default so an untrained model predicts
        exactly zero noise; ``random_head=True`` gives it the same
        initialization scale instead, producing a non-degenerate
        random-weight model.
        """
        if t_embed_dim % 2 != 0 or t_embed_dim <= 0:
            raise ValueError(f"t_embed_dim must be a positive even integer, got {t_embed_dim}")
        if num_classes < 1:
            raise ValueError(f"need num_classes >= 1, got {num_classes}")
        in_dim = POINT_DIM + t_embed_dim + num_classes + 1
        arch = (in_dim, *hidden, POINT_DIM)
        rng = np.random.default_rng(seed)
        params = np.zeros(param_count(arch))
        for (w, b), is_last in zip(_layer_views(params, arch), _last_flags(arch)):
            if not is_last or random_head:
                w[:] = rng.standard_normal(w.shape) / math.sqrt(w.shape[0])
        return cls(params=params, arch=arch, num_classes=num_classes, t_embed_dim=t_embed_dim)


def param_count(arch: tuple[int, ...]) -> int:
    return sum(a * b + b for a, b in zip(arch[:-1], arch[1:]))


def _last_flags(arch: tuple[int, ...]):
    n = len(arch) - 1
    return [k == n - 1 for k in range(n)]


def _layer_views(params: np.ndarray, arch: tuple[int, ...]):
    """Yield (W, b) views into the flat vector, in layer order."""
    views = []
    off = 0
    for a, b in zip(arch[:-1], arch[1:]):
        w = params[off : off + a * b].reshape(a, b)
        off += a * b
        bias = params[off : off + b]
        off += b
        views.append((w, bias))
    return views


def time_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps, shape (n, dim)."""
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    ang = np.asarray(t, dtype=float)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _check_label(d: Denoiser, y: int) -> int:
    y = int(y)
    if not 0 <= y <= d.num_classes:
        raise ValueError(f"label {y} invalid; expected 0 (null) .. {d.num_classes}")
    return y


def _features(d: Denoiser, x: np.ndarray, y: np.ndarray, t: np.ndarray) -> np.ndarray:
    n = x.shape[0]
    onehot = np.zeros((n, d.num_classes + 1))
    onehot[np.arange(n), y] = 1.0
    return np.concatenate([x, time_embedding(t, d.t_embed_dim), onehot], axis=1)


def _forward(d: Denoiser, x: np.ndarray, y: np.ndarray, t: np.ndarray):
    """Batched forward pass; returns (output, activation cache)."""
    h = _features(d, x, y, t)
    cache = [h]
    layers = _layer_views(d.params, d.arch)
    for w, b in layers[:-1]:
        h = np.tanh(h @ w + b)
        cache.append(h)
    w, b = layers[-1]
    return h @ w + b, cache


def _backward(d: Denoiser, cache: list[np.ndarray], cotangent: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of the forward pass w.r.t. the flat params."""
    grad = np.zeros_like(d.params)
    layers = _layer_views(d.params, d.arch)
    gviews = _layer_views(grad, d.arch)
    g = cotangent
    for k in range(len(layers) - 1, -1, -1):
        w, _ = layers[k]
        gw, gb = gviews[k]
        gw[:] = cache[k].T @ g
        gb[:] = g.sum(axis=0)
        if k > 0:
            g = (g @ w.T) * (1.0 - cache[k] ** 2)
    return grad


def predict(d: Denoiser, x_t: np.ndarray, y: int, t: int) -> np.ndarray:
    """Noise prediction for a single point; pure in all arguments."""
    y = _check_label(d, y)
    t = int(t)
    if t < 1:
        raise ValueError(f"timestep {t} must be >= 1")
    out, _ = _forward(
        d,
        np.asarray(x_t, dtype=float).reshape(1, POINT_DIM),
        np.array([y]),
        np.array([t]),
    )
    return out[0]


def cfg_predict(d: Denoiser, x_t: np.ndarray, y: int, t: int, omega: float) -> np.ndarray:
    """Guided prediction e_null + omega * (e_y - e_null).

    omega = 1 returns the conditional prediction exactly and omega = 0 the
    unconditional one, with no arithmetic on the endpoints.
    """
    if omega == 1.0:
        return predict(d, x_t, y, t)
    if omega == 0.0:
        return predict(d, x_t, NULL_LABEL, t)
    e_null = predict(d, x_t, NULL_LABEL, t)
    e_cond = predict(d, x_t, y, t)
    return e_null + omega * (e_cond - e_null)


def cfg_predict_batch(
    d: Denoiser, x_t: np.ndarray, y: int, t: int, omega: float
) -> np.ndarray:
    """Guided prediction for a batch of points sharing one label and timestep."""
    y = _check_label(d, y)
    n = x_t.shape[0]
    ts = np.full(n, int(t))
    if omega == 1.0:
        return _forward(d, x_t, np.full(n, y), ts)[0]
    if omega == 0.0:
        return _forward(d, x_t, np.full(n, NULL_LABEL), ts)[0]
    e_null = _forward(d, x_t, np.full(n, NULL_LABEL), ts)[0]
    e_cond = _forward(d, x_t, np.full(n, y), ts)[0]
    return e_null + omega * (e_cond - e_null)


def loss_and_grad(
    d: Denoiser,
    s: NoiseSchedule,
    x0: np.ndarray,
    y: np.ndarray,
    t: np.ndarray,
    eps: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Noise-prediction MSE and its exact parameter gradient.

    The batch loss is mean_i ||eps_hat_i - eps_i||^2 with x_t formed as
    sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps. Deterministic given
    the explicit (x0, y, t, eps), which is what makes finite-difference
    checks of the gradient possible.
    """
    ab = s.alpha_bar[t][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    out, cache = _forward(d, x_t, y, t)
    resid = out - eps
    loss = float(np.mean(np.sum(resid**2, axis=1)))
    grad = _backward(d, cache, 2.0 * resid / x0.shape[0])
    return loss, grad


def train_step(
    d: Denoiser,
    batch: tuple[np.ndarray, np.ndarray],
    s: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One noise-prediction training step; returns the pre-update loss.

    Samples per-example timesteps and noises, drops the condition to the
    null label with probability ``null_cond_prob``, and applies one Adam
    update. Mutates ``d.params`` (single-writer contract).
    """
    x0, labels = batch
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    t = rng.integers(1, s.T + 1, size=n)
    eps = rng.standard_normal((n, POINT_DIM))
    y = np.where(rng.random(n) < cfg.null_cond_prob, NULL_LABEL, labels)
    loss, grad = loss_and_grad(d, s, x0, y, t, eps)
    if not math.isfinite(loss):
        raise DivergenceError(f"training loss is non-finite ({loss})")
    if d.opt_state is None:
        d.opt_state = AdamState.for_params(d.params)
    adam_step(d.params, grad, d.opt_state, cfg.learning_rate)
    return loss


def train(
    d: Denoiser,
    dataset: TwoMarginalDataset,
    s: NoiseSchedule,
    cfg: TrainConfig,
) -> list[float]:
    """Run ``cfg.steps`` training steps; returns the per-step loss history."""
    rng = np.random.default_rng(cfg.seed)
    n = dataset.points.shape[0]
    losses = []
    for _ in range(cfg.steps):
        idx = rng.integers(0, n, size=min(cfg.batch_size, n))
        losses.append(train_step(d, (dataset.points[idx], dataset.labels[idx]), s, cfg, rng))
    return losses


def ancestral_sample_batch(
    d: Denoiser,
    y: int,
    n: int,
    s: NoiseSchedule,
    omega: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """n independent ancestral samples conditioned on y, shape (n, 2).

    Runs the full fine-grained generative chain from pure noise. The final
    step has sigma_1 = 0, so the last transition is deterministic.
    """
    x = rng.standard_normal((n, POINT_DIM))
    for t in range(s.T, 0, -1):
        pc = posterior_coeffs(s, t)
        eps_hat = cfg_predict_batch(d, x, y, t, omega)
        x_tilde = (x - math.sqrt(1.0 - s.alpha_bar[t]) * eps_hat) / math.sqrt(s.alpha_bar[t])
        x = pc.gamma * x_tilde + pc.delta * x + pc.sigma * rng.standard_normal((n, POINT_DIM))
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite state in the generative chain at t={t}")
    return x


def ancestral_sample(
    d: Denoiser,
    y: int,
    s: NoiseSchedule,
    omega: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One ancestral sample conditioned on y."""
    return ancestral_sample_batch(d, y, 1, s, omega, rng)[0]


def save_checkpoint(d: Denoiser, path, T: int) -> None:
    """Write the model as a flat file: header (arch, num_classes,
    t_embed_dim, T) followed by the parameter vector as little-endian
    float64. ``T`` records the schedule length the model was trained on."""
    header = {
        "arch": ",".join(str(v) for v in d.arch),
        "num_classes": str(d.num_classes),
        "t_embed_dim": str(d.t_embed_dim),
        "T": str(int(T)),
    }
    write_flat_file(path, "checkpoint", header, d.params)


def load_checkpoint(path) -> tuple[Denoiser, int]:
    """Read a checkpoint; returns the model and the schedule length T."""
    kind, header, payload = read_flat_file(path)
    if kind != "checkpoint":
        raise MismatchError(f"{path}: expected a checkpoint file, found kind {kind!r}")
    arch = tuple(int(v) for v in header["arch"].split(","))
    if payload.size != param_count(arch):
        raise MismatchError(
            f"{path}: parameter payload has {payload.size} floats, arch {arch} "
            f"needs {param_count(arch)}"
        )
    d = Denoiser(
        params=payload.copy(),
        arch=arch,
        num_classes=int(header["num_classes"]),
        t_embed_dim=int(header["t_embed_dim"]),
    )
    return d, int(header["T"])

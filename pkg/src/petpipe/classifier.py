"""FDG vs PSMA tracer classification from coronal and sagittal MIPs.

Each plane is encoded by a parameter-free 8x8 mean-pool of its normalized
224x224 MIP (64 features). One MLP is trained per plane, and a fusion MLP is
trained on the concatenated coronal + sagittal features (128 inputs). All
MLPs are ``in -> 32 (ReLU) -> 2`` and trained with Adam on softmax
cross-entropy plus L2 weight decay.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import FormatError, ParameterError, TrainingError
from .mip import INPUT_SIZE, MipImage, Plane, classifier_input
from .volume import VoxelGrid, zscore_normalize

GRID = 8
BLOCK = INPUT_SIZE // GRID
N_FEATURES = GRID * GRID
HIDDEN = 32
MODEL_FORMAT = "petpipe-tracer-classifier/1"


class TracerClass(enum.IntEnum):
    FDG = 0
    PSMA = 1

    @classmethod
    def parse(cls, value) -> TracerClass:
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ParameterError(f"unknown tracer {value!r} (expected fdg or psma)") from None

    @property
    def label(self) -> str:
        return self.name.lower()


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float
    weight_decay: float = 0.0
    batch_size: int = 16
    rng_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ParameterError(f"batch size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            raise ParameterError("weight decay must be non-negative")


def plane_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=50, learning_rate=5e-4, weight_decay=5e-4, rng_seed=seed)


def fusion_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=20, learning_rate=1e-4, rng_seed=seed)


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    rng_seed: int = 0
    config: TrainConfig | None = None
    initial_loss: float = math.nan
    final_loss: float = math.nan

    def __post_init__(self) -> None:
        self.w1, self.b1, self.w2, self.b2 = (np.asarray(a, dtype=np.float64) for a in self.arrays())
        n_in, n_hidden = self.w1.shape
        if self.b1.shape != (n_hidden,) or self.w2.shape != (n_hidden, 2) or self.b2.shape != (2,):
            raise ParameterError("MLP parameter shapes are inconsistent")
        if not all(np.isfinite(a).all() for a in self.arrays()):
            raise ParameterError("MLP parameters must be finite")

    @property
    def n_inputs(self) -> int:
        return self.w1.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.w1, self.b1, self.w2, self.b2)

    def to_dict(self) -> dict:
        return {
            "architecture": {"layers": [self.n_inputs, self.w1.shape[1], 2], "activation": "relu"},
            "weights": {name: a.ravel().tolist() for name, a in zip(("w1", "b1", "w2", "b2"), self.arrays())},
            "rng_seed": self.rng_seed,
            "config": asdict(self.config) if self.config else None,
            "initial_loss": self.initial_loss,
            "final_loss": self.final_loss,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MlpParams:
        try:
            n_in, n_hidden, n_out = d["architecture"]["layers"]
            w = d["weights"]
            if n_out != 2:
                raise ParameterError("only 2-class MLPs are supported")
            return cls(
                np.reshape(w["w1"], (n_in, n_hidden)),
                np.reshape(w["b1"], (n_hidden,)),
                np.reshape(w["w2"], (n_hidden, 2)),
                np.reshape(w["b2"], (2,)),
                rng_seed=int(d.get("rng_seed", 0)),
                config=TrainConfig(**d["config"]) if d.get("config") else None,
                initial_loss=float(d.get("initial_loss", math.nan)),
                final_loss=float(d.get("final_loss", math.nan)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed MLP description: {exc}") from None


def extract_features(img: MipImage) -> np.ndarray:
    """Mean of each 28x28 block of a 224x224 image, blocks in row-major order."""
    if img.pixels.shape != (INPUT_SIZE, INPUT_SIZE):
        raise ParameterError(f"feature extraction needs a {INPUT_SIZE}x{INPUT_SIZE} image, got {img.pixels.shape}")
    return img.pixels.reshape(GRID, BLOCK, GRID, BLOCK).mean(axis=(1, 3)).ravel()


def pet_features(pet: VoxelGrid) -> tuple[np.ndarray, np.ndarray]:
    """(coronal, sagittal) features of a PET volume: z-score, project, resize, normalize, pool."""
    normed, _ = zscore_normalize(pet)
    return (
        extract_features(classifier_input(normed, Plane.CORONAL)),
        extract_features(classifier_input(normed, Plane.SAGITTAL)),
    )


# ------------------------------------------------------------------ MLP core


def init_params(n_in: int, seed: int, n_hidden: int = HIDDEN) -> MlpParams:
    rng = np.random.default_rng(seed)
    return MlpParams(
        w1=rng.normal(0.0, math.sqrt(2.0 / n_in), (n_in, n_hidden)),
        b1=np.zeros(n_hidden),
        w2=rng.normal(0.0, math.sqrt(1.0 / n_hidden), (n_hidden, 2)),
        b2=np.zeros(2),
        rng_seed=seed,
    )


def logits(params: MlpParams, x: np.ndarray) -> np.ndarray:
    h = np.maximum(x @ params.w1 + params.b1, 0.0)
    return h @ params.w2 + params.b2


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(
    params: MlpParams, x: np.ndarray, y: np.ndarray, weight_decay: float = 0.0
) -> tuple[float, tuple[np.ndarray, ...]]:
    """Mean softmax cross-entropy + 0.5 * weight_decay * ||theta||^2 and its gradient."""
    n = x.shape[0]
    pre = x @ params.w1 + params.b1
    h = np.maximum(pre, 0.0)
    z = h @ params.w2 + params.b2
    zs = z - z.max(axis=1, keepdims=True)
    logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), y].mean()
    loss += 0.5 * weight_decay * sum(float(np.sum(a * a)) for a in params.arrays())

    dz = np.exp(logp)
    dz[np.arange(n), y] -= 1.0
    dz /= n
    gw2 = h.T @ dz
    gb2 = dz.sum(axis=0)
    dh = (dz @ params.w2.T) * (pre > 0)
    gw1 = x.T @ dh
    gb1 = dh.sum(axis=0)
    grads = tuple(g + weight_decay * a for g, a in zip((gw1, gb1, gw2, gb2), params.arrays()))
    return float(loss), grads


def _as_xy(features: Sequence[np.ndarray], labels: Sequence) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(np.stack([np.asarray(f, dtype=np.float64) for f in features]))
    y = np.asarray([int(TracerClass.parse(l)) for l in labels], dtype=np.int64)
    if not np.isfinite(x).all():
        raise ParameterError("features must be finite")
    return x, y


def train_mlp(x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> MlpParams:
    """Adam training; deterministic given ``cfg.rng_seed``."""
    if x.shape[0] == 0:
        raise TrainingError("training set is empty")
    if np.unique(y).size < 2:
        raise TrainingError("training set must contain both tracer classes")
    params = init_params(x.shape[1], cfg.rng_seed)
    rng = np.random.default_rng(cfg.rng_seed + 1)
    m = [np.zeros_like(a) for a in params.arrays()]
    v = [np.zeros_like(a) for a in params.arrays()]
    initial, _ = loss_and_grad(params, x, y, cfg.weight_decay)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        for start in range(0, x.shape[0], cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grads = loss_and_grad(params, x[idx], y[idx], cfg.weight_decay)
            step += 1
            new = []
            for i, (a, g) in enumerate(zip(params.arrays(), grads)):
                m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g
                v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g * g
                mhat = m[i] / (1 - cfg.beta1**step)
                vhat = v[i] / (1 - cfg.beta2**step)
                new.append(a - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.adam_eps))
            params.w1, params.b1, params.w2, params.b2 = new
    final, _ = loss_and_grad(params, x, y, cfg.weight_decay)
    params.config = cfg
    params.initial_loss = initial
    params.final_loss = final
    return params


def train_features(dataset: Sequence[tuple[np.ndarray, object]], cfg: TrainConfig) -> MlpParams:
    if not dataset:
        raise TrainingError("training set is empty")
    x, y = _as_xy([d[0] for d in dataset], [d[1] for d in dataset])
    return train_mlp(x, y, cfg)


def train_plane(dataset: Sequence[tuple[MipImage, object]], cfg: TrainConfig) -> MlpParams:
    """Per-plane classifier on pooled features of normalized 224x224 MIPs."""
    return train_features([(extract_features(img), label) for img, label in dataset], cfg)


def train_fusion(dataset: Sequence[tuple[np.ndarray, np.ndarray, object]], cfg: TrainConfig) -> MlpParams:
    """Fusion classifier on [coronal features, sagittal features]."""
    return train_features([(np.concatenate([cor, sag]), label) for cor, sag, label in dataset], cfg)


def predict(params: MlpParams, features: np.ndarray) -> tuple[TracerClass, float]:
    """Most probable tracer and its softmax probability; a 0.5 tie goes to FDG."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (params.n_inputs,):
        raise ParameterError(f"expected {params.n_inputs} features, got shape {x.shape}")
    p = softmax(logits(params, x))
    cls = TracerClass.FDG if p[0] >= p[1] else TracerClass.PSMA
    return cls, float(p[int(cls)])


def evaluate_accuracy(params: MlpParams, dataset: Sequence[tuple[np.ndarray, object]]) -> float:
    if not dataset:
        raise ParameterError("cannot evaluate on an empty dataset")
    hits = sum(predict(params, f)[0] == TracerClass.parse(label) for f, label in dataset)
    return hits / len(dataset)


class CrossValidation(NamedTuple):
    accuracies: list[float]
    mean: float


def cross_validate(dataset: Sequence[tuple[np.ndarray, object]], k: int, cfg: TrainConfig) -> CrossValidation:
    """k-fold CV: seeded shuffle, then contiguous folds."""
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    if k > len(dataset):
        raise ParameterError(f"k = {k} exceeds dataset size {len(dataset)}")
    order = np.random.default_rng(cfg.rng_seed).permutation(len(dataset))
    folds = np.array_split(order, k)
    accs = []
    for fold in folds:
        held = set(fold.tolist())
        train = [dataset[i] for i in order if i not in held]
        test = [dataset[i] for i in fold]
        accs.append(evaluate_accuracy(train_features(train, cfg), test))
    return CrossValidation(accs, float(np.mean(accs)))


# ------------------------------------------------------------ model bundle


@dataclass
class TracerClassifier:
    """Trained per-plane models plus the fusion model used for inference."""

    fusion: MlpParams
    coronal: MlpParams | None = None
    sagittal: MlpParams | None = None
    metadata: dict = field(default_factory=dict)

    def classify_features(self, cor: np.ndarray, sag: np.ndarray) -> tuple[TracerClass, float]:
        return predict(self.fusion, np.concatenate([cor, sag]))

    def classify(self, pet: VoxelGrid) -> tuple[TracerClass, float]:
        return self.classify_features(*pet_features(pet))

    def save(self, path) -> None:
        doc = {
            "format": MODEL_FORMAT,
            "feature_encoder": {"kind": "mean_pool", "grid": GRID, "input_size": INPUT_SIZE},
            "models": {
                name: m.to_dict()
                for name, m in (("fusion", self.fusion), ("coronal", self.coronal), ("sagittal", self.sagittal))
                if m is not None
            },
            "metadata": self.metadata,
        }
        Path(path).write_text(json.dumps(doc, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> TracerClassifier:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ParameterError(f"model file {path} does not exist") from None
        except (OSError, ValueError) as exc:
            raise FormatError(f"cannot parse model file {path}: {exc}") from None
        if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
            raise FormatError(f"{path} is not a petpipe classifier model")
        models = doc.get("models", {})
        if "fusion" not in models:
            raise FormatError(f"{path} has no fusion model")
        return cls(
            fusion=MlpParams.from_dict(models["fusion"]),
            coronal=MlpParams.from_dict(models["coronal"]) if "coronal" in models else None,
            sagittal=MlpParams.from_dict(models["sagittal"]) if "sagittal" in models else None,
            metadata=doc.get("metadata", {}),
        )


def train_classifier(
    samples: Sequence[tuple[np.ndarray, np.ndarray, object]],
    plane_cfg: TrainConfig | None = None,
    fus_cfg: TrainConfig | None = None,
) -> TracerClassifier:
    """Train coronal, sagittal and fusion models from (cor, sag, label) features."""
    plane_cfg = plane_cfg or plane_config()
    fus_cfg = fus_cfg or fusion_config()
    return TracerClassifier(
        fusion=train_fusion(samples, fus_cfg),
        coronal=train_features([(c, l) for c, _, l in samples], plane_cfg),
        sagittal=train_features([(s, l) for _, s, l in samples], plane_cfg),
    )

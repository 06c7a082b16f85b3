"""Three-stage detector training and inference.

Stage 1 trains the MLP body under the weighted angular-margin softmax,
contrastive and centre losses; stage 2 swaps those heads for one two-way
softmax head trained with binary cross-entropy; stage 3 fits a Gaussian to
bonafide body embeddings so inputs can be judged by Mahalanobis distance.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import losses, metrics, nnet
from .errors import ConfigError, DegeneracyError, FormatError, IntegrityError, ShapeError, StateError, TrainingError
from .features import EmbeddingVector, stack_embeddings
from .manifest import DatasetManifest, GeneratorClass, Label

DECISION_MODES = ("probability_boundary", "log_score_threshold", "mahalanobis_threshold")
AGGREGATIONS = ("mean", "min", "max")
COVARIANCE_MODES = ("full", "diagonal", "auto")
CHECKPOINT_MAGIC = b"DSDDET\x00\x01"


@dataclass(frozen=True)
class StageConfig:
    stage1_epochs: int = 30
    stage2_epochs: int = 30
    lr: float = 1e-5
    batch_size: int = 64
    seed: int = 0
    hidden: tuple[int, ...] = (256, 128)
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    covariance: str = "full"
    reg_scale: float = 1e-6
    distance_percentile: float = 95.0
    decision_mode: str = "probability_boundary"
    boundary: float = 0.5
    log_threshold: float = 0.0
    aggregation: str = "mean"
    embedding_source: str = "ingested"

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 1:
            raise ConfigError("epochs must be >= 1 for every stage")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("hidden widths must be positive")
        if self.covariance not in COVARIANCE_MODES:
            raise ConfigError(f"covariance must be one of {COVARIANCE_MODES}")
        if self.decision_mode not in DECISION_MODES:
            raise ConfigError(f"decision_mode must be one of {DECISION_MODES}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if not 0 < self.boundary < 1:
            raise ConfigError("boundary must lie in (0, 1)")
        if not 0 < self.distance_percentile <= 100:
            raise ConfigError("distance_percentile must lie in (0, 100]")
        if not self.reg_scale > 0:
            raise ConfigError("reg_scale must be positive")
        if self.embedding_source not in ("surrogate", "ingested"):
            raise ConfigError("embedding_source must be 'surrogate' or 'ingested'")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_snapshot(cls, d: dict) -> "StageConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["loss"] = losses.LossConfig(**d["loss"])
        return cls(**d)


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag])


# --- data ----------------------------------------------------------------------

@dataclass
class TrainingSet:
    x: np.ndarray  # (n, D) float64
    labels3: np.ndarray  # 0 bonafide, 1 tts, 2 vc, -1 fake of unknown type
    utt_ids: list[str]
    segment_index: np.ndarray

    @property
    def is_fake(self) -> np.ndarray:
        return self.labels3 != losses.BONAFIDE

    @property
    def binary(self) -> np.ndarray:
        return self.is_fake.astype(np.int64)

    def __len__(self) -> int:
        return self.x.shape[0]

    def subset(self, mask) -> "TrainingSet":
        mask = np.asarray(mask)
        return TrainingSet(self.x[mask], self.labels3[mask], [u for u, k in zip(self.utt_ids, mask) if k],
                           self.segment_index[mask])


_CLASS_CODE = {GeneratorClass.NONE: 0, GeneratorClass.TTS: 1, GeneratorClass.VC: 2, GeneratorClass.UNKNOWN: -1}


def assemble(manifest: DatasetManifest, embeddings: Sequence[EmbeddingVector]) -> TrainingSet:
    """Join segment embeddings to their manifest records by utterance id."""
    x = stack_embeddings(embeddings)
    labels, ids, seg = [], [], []
    for v in embeddings:
        if v.source_utt not in manifest:
            raise IntegrityError(f"embedding for {v.source_utt!r} has no manifest record")
        rec = manifest[v.source_utt]
        labels.append(_CLASS_CODE[rec.generator_class])
        ids.append(v.source_utt)
        seg.append(v.segment_index)
    return TrainingSet(x, np.asarray(labels, dtype=np.int64), ids, np.asarray(seg, dtype=np.int64))


def from_arrays(x, labels3, utt_ids=None) -> TrainingSet:
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if utt_ids is None:
        utt_ids = [f"s{i:06d}" for i in range(n)]
    return TrainingSet(x, np.asarray(labels3, dtype=np.int64), list(utt_ids), np.zeros(n, dtype=np.int64))


# --- Mahalanobis ---------------------------------------------------------------

@dataclass
class MahalanobisModel:
    mean: np.ndarray
    covariance: np.ndarray
    reg: float
    precision: np.ndarray
    diagonal: bool = False

    @property
    def dim(self) -> int:
        return self.mean.size

    @classmethod
    def from_covariance(cls, mean, covariance, reg: float, diagonal: bool = False) -> "MahalanobisModel":
        """Precompute the inverse of ``covariance + reg * I``."""
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(covariance, dtype=np.float64)
        if not reg > 0:
            raise ConfigError("regularisation must be positive")
        if cov.shape != (mean.size, mean.size):
            raise ShapeError(f"covariance {cov.shape} does not match mean of dim {mean.size}")
        a = cov + reg * np.eye(mean.size)
        if diagonal:
            precision = np.diag(1.0 / np.diag(a))
        else:
            precision = np.linalg.inv(a)
            precision = 0.5 * (precision + precision.T)
        return cls(mean, cov, float(reg), precision, diagonal)


def default_reg(cov: np.ndarray, scale: float = 1e-6) -> float:
    return max(scale * float(np.trace(cov)) / cov.shape[0], 1e-9)


def fit_mahalanobis(emb, covariance: str = "full", reg: float | None = None,
                    reg_scale: float = 1e-6) -> MahalanobisModel:
    """Sample mean, unbiased covariance and the inverse of ``cov + reg * I``."""
    emb = np.asarray(emb, dtype=np.float64)
    n, d = emb.shape
    if covariance not in COVARIANCE_MODES:
        raise ConfigError(f"covariance must be one of {COVARIANCE_MODES}")
    if covariance == "auto":
        covariance = "full" if n > d else "diagonal"
    if n < 2:
        raise DegeneracyError(f"need at least 2 bonafide samples, got {n}")
    if covariance == "full" and n <= d:
        raise DegeneracyError(
            f"{n} samples for a {d}-dim full covariance (need > {d}); "
            "use covariance=diagonal or a larger regularisation"
        )
    mu = emb.mean(axis=0)
    centered = emb - mu
    if covariance == "diagonal":
        cov = np.diag(np.sum(centered * centered, axis=0) / (n - 1))
    else:
        cov = centered.T @ centered / (n - 1)
        cov = 0.5 * (cov + cov.T)
    if reg is None:
        reg = default_reg(cov, reg_scale)
    return MahalanobisModel.from_covariance(mu, cov, reg, diagonal=covariance == "diagonal")


def mahalanobis_distance(model: MahalanobisModel, x) -> np.ndarray | float:
    """``sqrt((x - mean)^T precision (x - mean))`` for one vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != model.dim:
        raise ShapeError(f"expected dimension {model.dim}, got {x.shape}")
    diff = x2 - model.mean
    # row-wise (diff @ P) . diff; with P = I this is bit-identical to the Euclidean norm
    q = np.sum((diff @ model.precision) * diff, axis=1)
    d = np.sqrt(np.maximum(q, 0.0))
    return float(d[0]) if single else d


# --- detector ------------------------------------------------------------------

@dataclass
class TrainedDetector:
    body: nnet.MlpModel
    center: np.ndarray
    config: StageConfig
    asoftmax_weights: np.ndarray | None = None
    head: nnet.Dense | None = None
    mahalanobis: MahalanobisModel | None = None
    distance_threshold: float | None = None
    decision_mode: str = "probability_boundary"
    stages: list[int] = field(default_factory=list)
    history: dict = field(default_factory=dict)
    run_config_hash: str = ""

    @property
    def input_dim(self) -> int:
        return self.body.input_dim

    @property
    def classifier(self) -> nnet.MlpModel:
        if self.head is None:
            raise StateError("detector has no two-way head; run stage 2 first")
        return nnet.MlpModel(self.body.layers + [self.head])

    def embed(self, x) -> np.ndarray:
        return nnet.forward_cache(self.body, x)[-1]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def train_stage1(data: TrainingSet, cfg: StageConfig, epochs: int | None = None) -> TrainedDetector:
    """Train the body with the combined three-head objective.

    Fakes of unknown generator type have no three-way label and are left out;
    the count is recorded in ``history['stage1_excluded_unknown']``.
    """
    epochs = cfg.stage1_epochs if epochs is None else epochs
    known = data.labels3 >= 0
    excluded = int((~known).sum())
    data = data.subset(known)
    if not np.any(data.labels3 == losses.BONAFIDE):
        raise TrainingError("stage 1 needs bonafide samples to define the centre")
    if len(data) < 2:
        raise TrainingError("stage 1 needs at least two samples")

    init_rng = _rng(cfg.seed, 1)
    body = nnet.build_mlp(data.x.shape[1], cfg.hidden, seed=int(init_rng.integers(2**32)))
    emb_dim = cfg.hidden[-1]
    bound = 1.0 / np.sqrt(emb_dim)
    class_w = init_rng.uniform(-bound, bound, size=(emb_dim, losses.N_STAGE1_CLASSES))
    bona0 = nnet.forward_cache(body, data.x[data.labels3 == losses.BONAFIDE])[-1]
    center = bona0.mean(axis=0)

    params = body.params() + [class_w]
    state = nnet.AdamState.zeros_like(params)
    rng = _rng(cfg.seed, 2)
    hist = {"epoch": [], "loss": [], "asoftmax": [], "contrastive": [], "center": []}
    for epoch in range(epochs):
        totals = np.zeros(4)
        for idx in _batches(len(data), cfg.batch_size, rng):
            xb, yb = data.x[idx], data.labels3[idx]
            acts = nnet.forward_cache(body, xb)
            pairs = losses.make_pairs(yb != losses.BONAFIDE, rng, cap=cfg.loss.pair_cap_factor * len(idx))
            res = losses.stage1_combined(acts[-1], yb, cfg.loss, center, class_w, pairs=pairs)
            grads = nnet.backward(body, xb, res.grad_embeddings, acts=acts) + [res.grad_class_weights]
            params, state = nnet.adam_step(params, grads, state, cfg.lr)
            body = body.with_params(params[:-1])
            class_w = params[-1]
            center = res.new_center
            totals += len(idx) * np.array([res.loss, *res.parts.values()])
        totals /= len(data)
        hist["epoch"].append(epoch + 1)
        for key, val in zip(("loss", "asoftmax", "contrastive", "center"), totals):
            hist[key].append(float(val))
    return TrainedDetector(
        body=body,
        center=center,
        config=cfg,
        asoftmax_weights=class_w,
        stages=[1],
        history={"stage1": hist, "stage1_excluded_unknown": excluded},
    )


def train_stage2(detector: TrainedDetector, data: TrainingSet, cfg: StageConfig | None = None,
                 epochs: int | None = None) -> TrainedDetector:
    """Replace the stage-1 heads with a fresh two-way head and train body + head with BCE."""
    cfg = cfg or detector.config
    epochs = cfg.stage2_epochs if epochs is None else epochs
    if 1 not in detector.stages or detector.asoftmax_weights is None:
        raise StateError("stage 2 requires a detector that has completed stage 1")
    if data.x.shape[1] != detector.input_dim:
        raise ShapeError(f"embeddings have dim {data.x.shape[1]}, detector expects {detector.input_dim}")

    head_rng = _rng(cfg.seed, 3)
    head = nnet.init_dense(detector.body.output_dim, 2, head_rng, activation="none")
    model = nnet.MlpModel([*detector.body.copy().layers, head])
    params = model.params()
    state = nnet.AdamState.zeros_like(params)
    rng = _rng(cfg.seed, 4)
    y = data.binary
    hist = {"epoch": [], "loss": []}
    for epoch in range(epochs):
        total = 0.0
        for idx in _batches(len(data), cfg.batch_size, rng):
            acts = nnet.forward_cache(model, data.x[idx])
            loss, g = losses.bce_with_logits(acts[-1], y[idx])
            grads = nnet.backward(model, data.x[idx], g, acts=acts)
            params, state = nnet.adam_step(params, grads, state, cfg.lr)
            model = model.with_params(params)
            total += loss * len(idx)
        hist["epoch"].append(epoch + 1)
        hist["loss"].append(total / len(data))
    history = dict(detector.history)
    history["stage2"] = hist
    return replace(
        detector,
        body=nnet.MlpModel(model.layers[:-1]),
        head=model.layers[-1],
        config=cfg,
        stages=sorted(set(detector.stages) | {2}),
        history=history,
    )


def fit_bonafide_distribution(detector: TrainedDetector, bonafide_x, cfg: StageConfig | None = None,
                              reg: float | None = None) -> TrainedDetector:
    """Fit the bonafide Gaussian on body embeddings and set the distance threshold.

    The threshold is the configured percentile of the fitting set's own distances.
    """
    cfg = cfg or detector.config
    emb = detector.embed(bonafide_x)
    model = fit_mahalanobis(emb, cfg.covariance, reg=reg, reg_scale=cfg.reg_scale)
    dist = mahalanobis_distance(model, emb)
    tau = float(np.percentile(dist, cfg.distance_percentile))
    return replace(
        detector,
        mahalanobis=model,
        distance_threshold=tau,
        stages=sorted(set(detector.stages) | {3}),
    )


def train(data: TrainingSet, cfg: StageConfig, stages: Sequence[int] = (1, 2, 3),
          run_config_hash: str = "") -> TrainedDetector:
    stages = sorted(set(stages))
    if not stages or stages[0] != 1 or stages != list(range(1, stages[-1] + 1)):
        raise ConfigError(f"stages must be a prefix of 1,2,3, got {stages}")
    det = train_stage1(data, cfg)
    if 2 in stages:
        det = train_stage2(det, data, cfg)
    if 3 in stages:
        det = fit_bonafide_distribution(det, data.x[data.labels3 == losses.BONAFIDE], cfg)
    return replace(det, decision_mode=cfg.decision_mode, run_config_hash=run_config_hash)


# --- inference -----------------------------------------------------------------

@dataclass
class Decisions:
    is_fake: np.ndarray
    p_bonafide: np.ndarray
    p_fake: np.ndarray
    log_score: np.ndarray
    distance: np.ndarray  # NaN when no bonafide distribution is fitted

    @property
    def labels(self) -> list[str]:
        return [Label.FAKE.value if f else Label.BONAFIDE.value for f in self.is_fake]


def _decide(detector: TrainedDetector, mode: str, log_score, p_fake, distance) -> np.ndarray:
    cfg = detector.config
    if mode == "probability_boundary":
        return metrics.predict_fake(p_fake, cfg.boundary)
    if mode == "log_score_threshold":
        return np.asarray(log_score) < cfg.log_threshold
    if mode == "mahalanobis_threshold":
        if detector.mahalanobis is None or detector.distance_threshold is None:
            raise StateError("mahalanobis_threshold mode needs a fitted bonafide distribution (stage 3)")
        return np.asarray(distance) > detector.distance_threshold
    raise ConfigError(f"unknown decision mode {mode!r}")


def infer(detector: TrainedDetector, x, mode: str | None = None) -> Decisions:
    """Score embeddings row by row and label them under the decision mode."""
    mode = mode or detector.decision_mode
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != detector.input_dim:
        raise ShapeError(f"embeddings have dim {x.shape[1]}, detector expects {detector.input_dim}")
    if mode == "mahalanobis_threshold" and detector.mahalanobis is None:
        raise StateError("mahalanobis_threshold mode needs a fitted bonafide distribution (stage 3)")
    out = nnet.forward(detector.classifier, x)
    p_fake = out.probabilities[:, 1]
    p_bona = out.probabilities[:, 0]
    ls = np.atleast_1d(metrics.log_score(p_bona, p_fake))
    if detector.mahalanobis is not None:
        dist = mahalanobis_distance(detector.mahalanobis, out.penultimate_embedding)
    else:
        dist = np.full(x.shape[0], np.nan)
    return Decisions(_decide(detector, mode, ls, p_fake, dist), p_bona, p_fake, ls, dist)


@dataclass
class UtteranceDecisions:
    utt_ids: list[str]
    is_fake: np.ndarray
    log_score: np.ndarray
    distance: np.ndarray
    n_segments: np.ndarray


def aggregate(utt_ids: Sequence[str], values, how: str = "mean") -> tuple[list[str], np.ndarray, np.ndarray]:
    """Reduce per-segment values to one per utterance, in first-seen order."""
    if how not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
    values = np.asarray(values, dtype=np.float64)
    groups: dict[str, list[int]] = {}
    for i, u in enumerate(utt_ids):
        groups.setdefault(u, []).append(i)
    fn = {"mean": np.mean, "min": np.min, "max": np.max}[how]
    ids = list(groups)
    return ids, np.array([fn(values[groups[u]]) for u in ids]), np.array([len(groups[u]) for u in ids])


def infer_utterances(detector: TrainedDetector, x, utt_ids: Sequence[str], mode: str | None = None,
                     how: str | None = None) -> UtteranceDecisions:
    """Utterance-level decisions from aggregated segment log-scores (and distances)."""
    mode = mode or detector.decision_mode
    how = how or detector.config.aggregation
    seg = infer(detector, x, mode)
    ids, ls, counts = aggregate(utt_ids, seg.log_score, how)
    _, dist, _ = aggregate(utt_ids, seg.distance, how)
    if mode == "probability_boundary":
        b = detector.config.boundary
        # P_F > b  <=>  log10(P_B/P_F) < log10((1-b)/b)
        fake = ls < np.log10((1.0 - b) / b)
    else:
        fake = _decide(detector, mode, ls, None, dist)
    return UtteranceDecisions(ids, fake, ls, dist, counts)


# --- checkpoint ----------------------------------------------------------------
# magic | u32 header length | JSON header (sorted keys) | MLP block | float64 arrays

def detector_to_bytes(det: TrainedDetector) -> bytes:
    arrays = {"center": det.center}
    if det.asoftmax_weights is not None:
        arrays["asoftmax_weights"] = det.asoftmax_weights
    if det.mahalanobis is not None:
        arrays["mahalanobis_mean"] = det.mahalanobis.mean
        arrays["mahalanobis_covariance"] = det.mahalanobis.covariance
        arrays["mahalanobis_precision"] = det.mahalanobis.precision
    header = {
        "version": 1,
        "config": det.config.snapshot(),
        "decision_mode": det.decision_mode,
        "stages": det.stages,
        "has_head": det.head is not None,
        "run_config_hash": det.run_config_hash,
        "distance_threshold": det.distance_threshold,
        "mahalanobis": None if det.mahalanobis is None else {
            "reg": det.mahalanobis.reg, "diagonal": det.mahalanobis.diagonal,
        },
        "arrays": [[k, list(v.shape)] for k, v in arrays.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    model = nnet.MlpModel(det.body.layers + ([det.head] if det.head is not None else []))
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(hbytes)))
    buf.write(hbytes)
    buf.write(nnet.model_to_bytes(model))
    for v in arrays.values():
        buf.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return buf.getvalue()


def detector_from_bytes(data: bytes) -> TrainedDetector:
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a detector checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", data, pos)
        header = json.loads(data[pos + 4:pos + 4 + hlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"corrupt checkpoint header ({exc})") from None
    if header.get("version") != 1:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}")
    pos += 4 + hlen
    model, pos = nnet.model_from_bytes(data, pos)
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        if pos + 8 * count > len(data):
            raise FormatError("truncated checkpoint payload")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * count
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes in checkpoint")
    layers = model.layers
    head = layers[-1] if header["has_head"] else None
    body = nnet.MlpModel(layers[:-1] if head is not None else layers)
    maha = None
    if header["mahalanobis"] is not None:
        maha = MahalanobisModel(
            arrays["mahalanobis_mean"], arrays["mahalanobis_covariance"], header["mahalanobis"]["reg"],
            arrays["mahalanobis_precision"], header["mahalanobis"]["diagonal"],
        )
    return TrainedDetector(
        body=body,
        center=arrays["center"],
        config=StageConfig.from_snapshot(header["config"]),
        asoftmax_weights=arrays.get("asoftmax_weights"),
        head=head,
        mahalanobis=maha,
        distance_threshold=header["distance_threshold"],
        decision_mode=header["decision_mode"],
        stages=header["stages"],
        run_config_hash=header.get("run_config_hash", ""),
    )


def save_detector(det: TrainedDetector, path: str | os.PathLike) -> str:
    """Write via a temporary file and rename, so a crash never leaves a partial checkpoint.

    Returns the SHA-256 of the written bytes.
    """
    path = Path(path)
    blob = detector_to_bytes(det)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return hashlib.sha256(blob).hexdigest()


def load_detector(path: str | os.PathLike) -> TrainedDetector:
    return detector_from_bytes(Path(path).read_bytes())

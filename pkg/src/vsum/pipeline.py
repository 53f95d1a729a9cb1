"""Training, evaluation, and checkpointing for the full summarizer.

A training step processes one whole video (variable length makes cross-video
frame batching awkward): attention encoder -> classifier scores, the shared
LSTM encoder embeds both the raw and attended sequences, the decoder
reconstructs features, and the mode's loss combination is backpropagated
into an Adam update with global-norm gradient clipping. Everything is
deterministic given the seed; checkpoints round-trip byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import attention, dataio, metrics, objectives, recurrent, summarize
from . import diffcore as dc
from .diffcore import Tensor
from .errors import DataError, FormatError, NumericError, UsageError

_DTYPES = {"float64": np.float64, "float32": np.float32}


def _default_subspace_dims(n_heads: int, d: int) -> list:
    if n_heads == 24 and d == 1024:
        return [64] * 12 + [128] * 12
    return [max(1, d // n_heads)] * n_heads


@dataclass
class TrainConfig:
    mode: str = "supervised"
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 50
    seed: int = 0
    n_heads: int = 24
    n_layers: int = 3
    d: int = 1024
    subspace_dims: list = field(default_factory=list)
    lstm_units: int = 512
    budget_fraction: float = 0.15
    grad_clip: float = 5.0
    scaled_attention: bool = True
    cls_weight: float = 1.0
    rec_weight: float = 1.0
    con_weight: float = 1.0
    div_weight: float = 1.0
    rec_mean: bool = False
    labels_fraction: float | None = None
    standardize: bool = True
    div_scope: str = "video"
    dtype: str = "float64"

    def __post_init__(self):
        if not self.subspace_dims:
            self.subspace_dims = _default_subspace_dims(self.n_heads, self.d)
        self.subspace_dims = [int(v) for v in self.subspace_dims]
        if self.mode not in objectives.MODES:
            raise UsageError(f"mode must be one of {objectives.MODES}, got {self.mode!r}")
        if self.lr <= 0:
            raise UsageError(f"learning rate must be positive, got {self.lr}")
        if min(self.n_heads, self.n_layers, self.d, self.lstm_units, self.epochs) < 1:
            raise UsageError("model dimensions and epochs must be positive")
        if len(self.subspace_dims) != self.n_heads or min(self.subspace_dims) < 1:
            raise UsageError(
                f"subspace_dims needs {self.n_heads} positive entries, got {self.subspace_dims}")
        if self.dtype not in _DTYPES:
            raise UsageError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.div_scope not in ("video", "boundaries"):
            raise UsageError(
                f"div_scope must be 'video' or 'boundaries', got {self.div_scope!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def loss_weights(self) -> dict:
        return {"cls": self.cls_weight, "rec": self.rec_weight,
                "con": self.con_weight, "div": self.div_weight}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(payload) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class Normalizer:
    """Per-dimension feature standardization fitted on the train split.

    Keeps the encoder's dot-product logits at a sane scale whatever the
    source of the features; rides along in the checkpoint.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, feature_blocks) -> "Normalizer":
        stacked = np.concatenate([np.asarray(b, dtype=np.float64) for b in feature_blocks])
        std = stacked.std(axis=0)
        return cls(mean=stacked.mean(axis=0), std=np.maximum(std, 1e-8))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.std

    def to_lists(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_lists(cls, payload) -> "Normalizer":
        return cls(mean=np.asarray(payload["mean"], dtype=np.float64),
                   std=np.asarray(payload["std"], dtype=np.float64))


@dataclass
class ModelParams:
    encoder: attention.EncoderParams
    autoenc: recurrent.AutoencoderParams
    classifier: objectives.ClassifierParams
    normalizer: Normalizer | None = None

    def named_tensors(self) -> list:
        out = []
        for li, layer in enumerate(self.encoder.layers):
            for hi, head in enumerate(layer.heads):
                prefix = f"enc/l{li:02d}/h{hi:02d}"
                out += [(f"{prefix}/proj", head.proj), (f"{prefix}/wq", head.wq),
                        (f"{prefix}/wk", head.wk), (f"{prefix}/wv", head.wv)]
            out.append((f"enc/l{li:02d}/mix", layer.mix))
        out += [("ae/enc/w", self.autoenc.encoder.w_gates),
                ("ae/enc/b", self.autoenc.encoder.b_gates),
                ("ae/dec/w", self.autoenc.decoder.w_gates),
                ("ae/dec/b", self.autoenc.decoder.b_gates),
                ("ae/out_proj", self.autoenc.out_proj),
                ("clf/w", self.classifier.w),
                ("clf/b", self.classifier.b)]
        return out

    def tensors(self) -> list:
        return [t for _, t in self.named_tensors()]


def init_model(cfg: TrainConfig, rng: np.random.Generator) -> ModelParams:
    dtype = cfg.np_dtype
    return ModelParams(
        encoder=attention.init_encoder(cfg.d, cfg.subspace_dims, cfg.n_layers, rng, dtype=dtype),
        autoenc=recurrent.init_autoencoder(cfg.d, cfg.lstm_units, rng, dtype=dtype),
        classifier=objectives.init_classifier(cfg.d, rng, dtype=dtype),
    )


# ---------------------------------------------------------------------------
# optimizer


def init_moments(params: ModelParams) -> dict:
    return {
        "step": 0,
        "m": {name: np.zeros_like(t.data) for name, t in params.named_tensors()},
        "v": {name: np.zeros_like(t.data) for name, t in params.named_tensors()},
    }


def adam_step(named_params: list, grads: dict, moments: dict, cfg: TrainConfig,
              context: str = "") -> None:
    """One Adam update with bias correction, clipping gradients first.

    ``grads`` maps names to arrays (missing or None means zero gradient).
    The global norm over all gradients is clipped to cfg.grad_clip before
    the moment updates; NaN gradients abort with diagnostics.
    """
    resolved = {}
    sq_norm = 0.0
    for name, t in named_params:
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(t.data)
        if np.isnan(g).any():
            raise NumericError(f"NaN gradient in {name} {context}".strip())
        resolved[name] = g
        sq_norm += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq_norm)
    if cfg.grad_clip and norm > cfg.grad_clip:
        factor = cfg.grad_clip / norm
        resolved = {name: g * factor for name, g in resolved.items()}
    moments["step"] += 1
    t_step = moments["step"]
    bc1 = 1.0 - cfg.beta1 ** t_step
    bc2 = 1.0 - cfg.beta2 ** t_step
    for name, tensor in named_params:
        g = resolved[name]
        m = moments["m"][name]
        v = moments["v"][name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        update = (cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps))
        tensor.data -= update.astype(tensor.data.dtype)


# ---------------------------------------------------------------------------
# per-video forward pass


def _fallback_segmentation(video: dataio.Video) -> summarize.ShotSegmentation:
    # roughly five seconds per shot when no boundaries are annotated
    target = max(1, int(round(5 * video.fps)))
    target = min(target, video.n_frames)
    return summarize.segment_uniform(video.n_frames, target)


def video_segmentation(video: dataio.Video) -> summarize.ShotSegmentation:
    return video.boundaries if video.boundaries is not None else _fallback_segmentation(video)


def _model_input(video: dataio.Video, params: ModelParams, cfg: TrainConfig) -> np.ndarray:
    feats = video.features
    if params.normalizer is not None:
        feats = params.normalizer.apply(feats)
    return np.ascontiguousarray(feats, dtype=cfg.np_dtype)


def video_losses(video: dataio.Video, params: ModelParams, cfg: TrainConfig):
    """Build the mode's loss graph for one video.

    Returns (total tensor or None, LossReport or None); None means no term
    is active for this video (e.g. unlabeled video with rec/con disabled).
    """
    mode = cfg.mode
    w = cfg.loss_weights()
    want_cls = (mode != "unsupervised" and video.labels.present and w["cls"] != 0.0)
    want_rec = w["rec"] != 0.0
    want_con = w["con"] != 0.0
    want_div = (mode == "unsupervised" and w["div"] != 0.0)
    if not (want_cls or want_rec or want_con or want_div):
        return None, None

    x_data = _model_input(video, params, cfg)
    x = Tensor(x_data)
    z, _ = attention.encoder_forward(x, params.encoder, scaled=cfg.scaled_attention)

    cls_t = rec_t = con_t = div_t = None
    if want_cls or want_div:
        scores = objectives.classify(z, params.classifier)
        if want_cls:
            cls_t = objectives.cls_loss(scores, video.labels)
        if want_div:
            # "video" scope spans one segment: redundant background frames are
            # similar to most of the video and get suppressed hardest
            if cfg.div_scope == "video":
                div_seg = summarize.ShotSegmentation((0,), video.n_frames)
            else:
                div_seg = video_segmentation(video)
            div_t = objectives.div_loss(x_data.astype(np.float64), scores, div_seg)
    if want_rec or want_con:
        e_x = recurrent.encode_sequence(x, params.autoenc.encoder)
        if want_con:
            e_z = recurrent.encode_sequence(z, params.autoenc.encoder)
            con_t = recurrent.con_loss(e_x, e_z)
        if want_rec:
            x_hat = recurrent.decode_sequence(e_x, video.n_frames, params.autoenc.decoder,
                                              params.autoenc.out_proj)
            rec_t = recurrent.rec_loss(x_hat, x, mean_over_frames=cfg.rec_mean)

    total = objectives.combine_total(mode, cls=cls_t, rec=rec_t, con=con_t,
                                     div=div_t, weights=w)
    report = objectives.total_loss(mode, cls=cls_t, rec=rec_t, con=con_t,
                                   div=div_t, weights=w)
    return total, report


def video_scores(video: dataio.Video, params: ModelParams, cfg: TrainConfig) -> np.ndarray:
    """Highlight probabilities for every frame of a video."""
    x = Tensor(_model_input(video, params, cfg))
    z, _ = attention.encoder_forward(x, params.encoder, scaled=cfg.scaled_attention)
    return objectives.classify(z, params.classifier).data[:, 0].astype(np.float64)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MCVC"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHI")   # magic, version, header byte length


def save_checkpoint(path, params: ModelParams, moments: dict, step: int,
                    cfg: TrainConfig) -> None:
    named = params.named_tensors()
    tensor_meta = [{"name": name, "rows": t.data.shape[0], "cols": t.data.shape[1],
                    "dtype": t.data.dtype.name} for name, t in named]
    header = {
        "config": cfg.to_dict(),
        "config_hash": config_hash(cfg),
        "step": int(step),
        "adam_step": int(moments["step"]),
        "normalizer": (None if params.normalizer is None
                       else params.normalizer.to_lists()),
        "tensors": tensor_meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        for _, t in named:
            fh.write(np.ascontiguousarray(t.data).tobytes())
        for kind in ("m", "v"):
            for name, _ in named:
                fh.write(np.ascontiguousarray(moments[kind][name]).tobytes())


def load_checkpoint(path):
    """Returns (params, moments, step, cfg)."""
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise FormatError(f"{path}: checkpoint header truncated at byte {len(blob)}")
    magic, version, header_len = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header_end = _CKPT_HEADER.size + header_len
    try:
        header = json.loads(blob[_CKPT_HEADER.size:header_end].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: unreadable checkpoint header ({e})") from e
    cfg = TrainConfig.from_dict(header["config"])
    params = init_model(cfg, np.random.default_rng(0))
    if header.get("normalizer") is not None:
        params.normalizer = Normalizer.from_lists(header["normalizer"])
    named = params.named_tensors()
    if [m["name"] for m in header["tensors"]] != [n for n, _ in named]:
        raise FormatError(f"{path}: tensor names do not match the config's architecture")

    offset = header_end
    arrays = {}
    for meta in header["tensors"]:
        dtype = np.dtype(meta["dtype"])
        count = meta["rows"] * meta["cols"]
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: tensor {meta['name']} truncated at byte {offset}")
        arrays[meta["name"]] = np.frombuffer(
            blob, dtype=dtype, count=count, offset=offset).reshape(
            meta["rows"], meta["cols"]).copy()
        offset += nbytes
    for name, t in named:
        if arrays[name].shape != t.data.shape:
            raise FormatError(f"{path}: tensor {name} has shape {arrays[name].shape}, "
                              f"expected {t.data.shape}")
        t.data = arrays[name]
    moments = {"step": int(header["adam_step"]), "m": {}, "v": {}}
    for kind in ("m", "v"):
        for meta in header["tensors"]:
            dtype = np.dtype(meta["dtype"])
            count = meta["rows"] * meta["cols"]
            nbytes = count * dtype.itemsize
            if offset + nbytes > len(blob):
                raise FormatError(f"{path}: moment {kind}/{meta['name']} truncated "
                                  f"at byte {offset}")
            moments[kind][meta["name"]] = np.frombuffer(
                blob, dtype=dtype, count=count, offset=offset).reshape(
                meta["rows"], meta["cols"]).copy()
            offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes after checkpoint")
    return params, moments, int(header["step"]), cfg


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    params: ModelParams
    cfg: TrainConfig
    checkpoint_path: Path | None
    log_path: Path | None
    history: list   # one dict per epoch


def _mask_labels(videos: list, fraction: float, rng: np.random.Generator) -> None:
    n_keep = int(round(fraction * len(videos)))
    keep = set(rng.choice(len(videos), size=n_keep, replace=False).tolist())
    for i, v in enumerate(videos):
        if i not in keep:
            v.labels = objectives.LabelSet.absent()


def train(manifest_path, cfg: TrainConfig, out_dir=None) -> TrainResult:
    """Train on the manifest's train split; optionally write checkpoint + log.

    The log is JSON lines: one record per step with the loss components
    (absent terms are null) and one per epoch with the mean total.
    """
    dataset = dataio.load_dataset(manifest_path)
    videos = dataset.subset("train")
    if not videos:
        raise DataError(f"{manifest_path}: no videos in the train split")
    if dataset.feature_dim != cfg.d:
        raise DataError(
            f"feature width {dataset.feature_dim} does not match config d={cfg.d}")

    rng = np.random.default_rng(cfg.seed)
    params = init_model(cfg, rng)
    if cfg.standardize:
        params.normalizer = Normalizer.fit(v.features for v in videos)
    if cfg.labels_fraction is not None and cfg.mode != "unsupervised":
        # separate stream keeps init and epoch order identical across fractions
        _mask_labels(videos, cfg.labels_fraction, np.random.default_rng([cfg.seed, 1]))
    labeled = [v for v in videos if v.labels.present]
    if cfg.mode == "supervised":
        if not labeled:
            raise UsageError("supervised mode needs labeled videos; manifest has none")
        if len(labeled) < len(videos):
            raise UsageError(
                "supervised mode needs every train video labeled; use semi mode "
                f"({len(videos) - len(labeled)} unlabeled)")

    moments = init_moments(params)
    named = params.named_tensors()
    history = []
    log_fh = None
    checkpoint_path = log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_dir / "checkpoint.mcvc"
        log_path = out_dir / "train_log.jsonl"
        log_fh = open(log_path, "w")

    def log(record):
        if log_fh is not None:
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")

    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = rng.permutation(len(videos))
            epoch_totals = []
            for vi in order:
                video = videos[int(vi)]
                total, report = video_losses(video, params, cfg)
                if total is None:
                    log({"step": step, "epoch": epoch, "video_id": video.video_id,
                         "mode": cfg.mode, "skipped": True})
                    continue
                if not math.isfinite(total.item()):
                    raise NumericError(
                        f"non-finite loss at step {step} (epoch {epoch}, "
                        f"video {video.video_id})")
                dc.zero_grads(t for _, t in named)
                dc.backward(total)
                grads = {name: t.grad for name, t in named}
                adam_step(named, grads, moments, cfg,
                          context=f"at step {step} (epoch {epoch}, video {video.video_id})")
                record = {"step": step, "epoch": epoch, "video_id": video.video_id}
                record.update(report.as_dict())
                log(record)
                epoch_totals.append(report.total)
                step += 1
            mean_total = float(np.mean(epoch_totals)) if epoch_totals else None
            history.append({"epoch": epoch, "mean_total": mean_total,
                            "n_steps": len(epoch_totals)})
            log({"epoch": epoch, "epoch_mean_total": mean_total,
                 "n_steps": len(epoch_totals)})
    finally:
        if log_fh is not None:
            log_fh.close()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, moments, step, cfg)
    return TrainResult(params=params, cfg=cfg, checkpoint_path=checkpoint_path,
                       log_path=log_path, history=history)


# ---------------------------------------------------------------------------
# evaluation and inspection


def evaluate(params: ModelParams, cfg: TrainConfig, manifest_path,
             aggregation: str = "mean", budget_fraction: float | None = None,
             scorer: str = "model", scorer_seed: int = 0, split: str = "test") -> dict:
    """F1 via budgeted summaries against keyshots; tau/rho on raw scores.

    ``scorer`` may be "model", "random", or "uniform"; the baselines ignore
    the model. Correlations average annotators within a video, then videos.
    """
    if scorer not in ("model", "random", "uniform"):
        raise UsageError(f"scorer must be model, random, or uniform, got {scorer!r}")
    dataset = dataio.load_dataset(manifest_path)
    videos = dataset.subset(split)
    if not videos:
        raise DataError(f"{manifest_path}: no videos in the {split!r} split")
    if scorer == "model":
        if params is None:
            raise UsageError("model scorer needs a checkpoint")
        if dataset.feature_dim != cfg.d:
            raise DataError(
                f"feature width {dataset.feature_dim} does not match checkpoint d={cfg.d}")
    budget = cfg.budget_fraction if budget_fraction is None else float(budget_fraction)
    rng = np.random.default_rng(scorer_seed)

    per_video = {}
    f1s, taus, rhos = [], [], []
    for video in videos:
        if scorer == "model":
            scores = video_scores(video, params, cfg)
        elif scorer == "random":
            scores = rng.uniform(size=video.n_frames)
        else:
            scores = np.full(video.n_frames, 0.5)
        seg = video_segmentation(video)
        mask = summarize.make_summary(scores, seg, budget_fraction=budget)
        entry = {"f1": None, "tau": None, "rho": None}
        if video.annotations.keyshots is not None:
            entry["f1"] = metrics.fscore_multi(mask, video.annotations, aggregation)
            f1s.append(entry["f1"])
        if video.annotations.importance is not None:
            tau, rho = metrics.rank_protocol(scores, video.annotations)
            entry["tau"], entry["rho"] = tau, rho
            taus.append(tau)
            rhos.append(rho)
        per_video[video.video_id] = entry

    def mean_or_none(vals):
        return float(np.mean(vals)) if vals else None

    return {
        "per_video": per_video,
        "aggregate": {"mean_f1": mean_or_none(f1s), "mean_tau": mean_or_none(taus),
                      "mean_rho": mean_or_none(rhos)},
        "protocol": {"aggregation": aggregation, "budget_fraction": budget,
                     "scorer": scorer, "split": split, "n_videos": len(videos),
                     "correlation_averaging": "annotators per video, then videos"},
    }


def inspect(params: ModelParams, cfg: TrainConfig, features_path, out_dir) -> Path:
    """Export every layer/head attention map for one video's features."""
    feats = dataio.read_features(features_path)
    if feats.shape[1] != cfg.d:
        raise DataError(
            f"feature width {feats.shape[1]} does not match checkpoint d={cfg.d}")
    if params.normalizer is not None:
        feats = params.normalizer.apply(feats)
    x = Tensor(np.ascontiguousarray(feats, dtype=cfg.np_dtype))
    _, all_maps = attention.encoder_forward(x, params.encoder, scaled=cfg.scaled_attention)
    return attention.export_attention_maps(all_maps, out_dir)

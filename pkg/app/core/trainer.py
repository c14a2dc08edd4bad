"""Joint training of codebooks and decoder through the straight-through encoder.

Per batch: encode_forward -> decoder_forward -> loss -> decoder_backward ->
encode_backward -> Adam on every trainable group. The forward value is always
the hard reconstruction.
"""
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple
import logging
import time

import numpy as np
from pydantic import BaseModel, Field

from .binary_format import sha256_file, write_atomic
from .codebook import Codebook, fit_codebook, save_codebook
from .config import build_config
from .decoder import (
    DecoderWeights,
    decoder_backward,
    decoder_forward,
    decoder_forward_cached,
    init_decoder,
    init_lora,
    save_decoder,
)
from .descriptor_store import DescriptorSet, split_holdout
from .dpq_encoder import encode_backward, encode_forward
from .errors import BatchTooSmallError, ConfigError, NumericError, TrainingError
from .evalbench import recall_at_k
from .losses import LossConfig, LossVariant, loss_and_grad
from .models import EpochMetrics, TrainReport, ValidationMetrics
from .numerics import AdamState, adam_step, make_rng, row_distances

logger = logging.getLogger(__name__)

LORA_PARAMS = ("A1", "B1", "A2", "B2")
DECODER_PARAMS = ("W1", "W2")


class TrainConfig(BaseModel):
    epochs: int = Field(30, ge=0)
    batch_size: int = Field(1000, ge=2)
    lr: float = Field(0.001, ge=0)
    lr_codebook: Optional[float] = Field(None, ge=0)
    lr_decoder: Optional[float] = Field(None, ge=0)
    margin: float = Field(0.9, ge=0)
    tau: float = Field(0.05, gt=0)
    lambda_d: float = Field(1.0, ge=0)
    M: int = Field(4, ge=1)
    K: int = Field(256, ge=1)
    hidden: int = Field(256, ge=1)
    seed: int = Field(0, ge=0)
    lora_mode: bool = False
    lora_rank: int = Field(2, ge=1)
    loss_variant: LossVariant = "triplet_combined"
    npair_n: int = Field(10, ge=2)
    kmeans_iters: int = Field(25, ge=1)
    val_fraction: float = Field(0.1, ge=0, lt=1)
    freeze_codebook: bool = False
    use_decoder: bool = True
    decoder_init: Literal["identity", "kaiming"] = "identity"
    val_noise_sigma: float = Field(0.0, ge=0)
    keep_best: bool = False

    @classmethod
    def from_file(cls, path: Optional[Path] = None, **overrides) -> "TrainConfig":
        return build_config(cls, path, **overrides)

    def loss_config(self) -> LossConfig:
        return LossConfig(
            margin=self.margin, lambda_d=self.lambda_d, variant=self.loss_variant, npair_n=self.npair_n
        )


def _chunks(n: int, size: int) -> List[np.ndarray]:
    """Near-equal consecutive pieces of at most ``size`` rows, none smaller than 2 when n ≥ 2"""
    count = max(1, -(-n // size))
    if n >= 2:
        count = min(count, n // 2)
    return [piece for piece in np.array_split(np.arange(n), count) if piece.size]


def _reconstruct(x: np.ndarray, codebook: Codebook, decoder: Optional[DecoderWeights], tau: float) -> np.ndarray:
    out = encode_forward(x, codebook, tau, keep_cache=False).output
    return out if decoder is None else decoder_forward(out, decoder)


def _noisy(x: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma == 0:
        return x
    # a different stream from make_rng(seed), which benchmark queries draw from
    return x + make_rng(seed + 1).normal(0.0, sigma, size=x.shape)


def validate(
    descriptor_set: DescriptorSet,
    codebook: Codebook,
    decoder: Optional[DecoderWeights],
    cfg: TrainConfig,
    database: Optional[DescriptorSet] = None,
) -> ValidationMetrics:
    """Loss, reconstruction error and recall@1 of the set's descriptors against reconstructions.

    Queries are the raw descriptors plus ``cfg.val_noise_sigma`` Gaussian noise,
    matched by id against the reconstructed ``database`` (the set itself when
    omitted). ``decoder=None`` scores hard PQ alone. Nothing is mutated.
    """
    x = descriptor_set.descriptors
    out = _reconstruct(x, codebook, decoder, cfg.tau)
    loss_cfg = cfg.loss_config()
    groups = descriptor_set.group_ids

    total = 0.0
    for piece in _chunks(descriptor_set.n, cfg.batch_size):
        piece_groups = None if groups is None else np.asarray(groups)[piece]
        loss, _ = loss_and_grad(x[piece], out[piece], loss_cfg, piece_groups)
        total += loss * piece.size
    errors = row_distances(x, out)

    if database is None:
        database, map_out = descriptor_set, out
    else:
        map_out = _reconstruct(database.descriptors, codebook, decoder, cfg.tau)
    queries = descriptor_set.with_descriptors(_noisy(x, cfg.val_noise_sigma, cfg.seed))
    recall1 = recall_at_k(queries, database.with_descriptors(map_out), descriptor_set.ids, 1)
    return ValidationMetrics(
        loss=total / descriptor_set.n,
        recon_mean=float(errors.mean()),
        recon_median=float(np.median(errors)),
        recall1=recall1,
    )


class Trainer:
    """Owns the mutable parameters and Adam moments of one run.

    ``lora_only`` freezes the codebook and the base decoder weights and trains
    the LoRA factors attached to the decoder.
    """

    def __init__(self, cfg: TrainConfig, codebook: Codebook, decoder: DecoderWeights, lora_only: bool = False):
        if lora_only and decoder.lora is None:
            raise ConfigError("LoRA training needs a decoder with LoRA factors attached")
        self.cfg = cfg
        self.loss_cfg = cfg.loss_config()
        self.lora_only = lora_only
        self.use_decoder = cfg.use_decoder or lora_only
        self.train_codebook = not (cfg.freeze_codebook or lora_only)
        self.centroids = codebook.centroids.copy()
        self.base = decoder
        self.params: Dict[str, np.ndarray] = {}
        self.states: Dict[str, AdamState] = {}
        self._init_params(decoder)

    def _init_params(self, decoder: DecoderWeights) -> None:
        lr_codebook = self.cfg.lr if self.cfg.lr_codebook is None else self.cfg.lr_codebook
        lr_decoder = self.cfg.lr if self.cfg.lr_decoder is None else self.cfg.lr_decoder
        if self.train_codebook:
            self.params["centroids"] = self.centroids
            self.states["centroids"] = AdamState.zeros(self.centroids.shape, lr=lr_codebook)
        if self.lora_only:
            names = LORA_PARAMS
            source = decoder.lora
        elif self.use_decoder:
            names = DECODER_PARAMS
            source = decoder
        else:
            names, source = (), None
        for name in names:
            value = np.array(getattr(source, name), dtype=np.float64)
            self.params[name] = value
            self.states[name] = AdamState.zeros(value.shape, lr=lr_decoder)

    @property
    def codebook(self) -> Codebook:
        return Codebook(centroids=self.params.get("centroids", self.centroids))

    @property
    def decoder(self) -> DecoderWeights:
        if self.lora_only:
            lora = self.base.lora.model_copy(update={name: self.params[name] for name in LORA_PARAMS})
            return self.base.model_copy(update={"lora": lora})
        if "W1" in self.params:
            return DecoderWeights(W1=self.params["W1"], W2=self.params["W2"], lora=self.base.lora)
        return self.base

    def step(self, x: np.ndarray, group_ids: Optional[np.ndarray], epoch: int, batch: int) -> float:
        codebook = self.codebook
        fwd = encode_forward(x, codebook, self.cfg.tau, keep_cache=self.train_codebook)
        cache = None
        out = fwd.output
        if self.use_decoder:
            out, cache = decoder_forward_cached(fwd.output, self.decoder)

        loss, grad_out = loss_and_grad(x, out, self.loss_cfg, group_ids)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad_out)):
            logger.error(f"Non-finite loss {loss} at epoch {epoch}, batch {batch}")
            raise TrainingError(f"Training diverged: loss={loss}", epoch, batch)

        grads: Dict[str, np.ndarray] = {}
        grad_q = grad_out
        if cache is not None:
            decoder_grads = decoder_backward(cache, grad_out)
            grad_q = decoder_grads.q
            for name in self.params:
                if name != "centroids":
                    grads[name] = getattr(decoder_grads, name)
        if self.train_codebook:
            grads["centroids"], _ = encode_backward(fwd, grad_q)

        try:
            for name, grad in grads.items():
                self.states[name], self.params[name] = adam_step(self.states[name], self.params[name], grad)
        except NumericError as e:
            logger.error(f"Update failed at epoch {epoch}, batch {batch}: {e.message}")
            raise TrainingError(e.message, epoch, batch) from e
        return loss

    def _metrics(self, epoch: int, train_loss: float, val_set: DescriptorSet,
                 map_set: Optional[DescriptorSet]) -> EpochMetrics:
        decoder = self.decoder if self.use_decoder else None
        metrics = validate(val_set, self.codebook, decoder, self.cfg, map_set)
        values = (train_loss, metrics.loss, metrics.recon_mean, metrics.recall1)
        if not all(np.isfinite(values)):
            raise TrainingError(f"Non-finite epoch metrics {values}", epoch, -1)
        return EpochMetrics(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=metrics.loss,
            recon_err=metrics.recon_mean,
            recon_median=metrics.recon_median,
            recall1=metrics.recall1,
        )

    def _snapshot(self) -> Dict[str, np.ndarray]:
        return {name: value.copy() for name, value in self.params.items()}

    def fit(
        self, train_set: DescriptorSet, val_set: DescriptorSet, map_set: Optional[DescriptorSet] = None
    ) -> TrainReport:
        """Run ``cfg.epochs`` epochs; validation queries are matched against ``map_set`` when given.

        With ``cfg.keep_best`` the parameters of the epoch with the highest
        validation recall@1 are restored at the end (epoch 0 included, the
        earliest epoch wins ties).
        """
        cfg = self.cfg
        started = time.perf_counter()
        n_batches = train_set.n // cfg.batch_size
        groups = None if train_set.group_ids is None else np.asarray(train_set.group_ids)
        rng = make_rng(cfg.seed)

        initial_train = validate(train_set, self.codebook, self.decoder if self.use_decoder else None, cfg).loss
        initial = self._metrics(0, initial_train, val_set, map_set)
        logger.info(f"Epoch 0: {initial.to_line()}")
        epochs: List[EpochMetrics] = []
        best_epoch, best_recall, best_params = 0, initial.recall1, self._snapshot()

        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(train_set.n)
            losses = []
            for batch in range(n_batches):
                rows = order[batch * cfg.batch_size:(batch + 1) * cfg.batch_size]
                batch_groups = None if groups is None else groups[rows]
                losses.append(self.step(train_set.descriptors[rows], batch_groups, epoch, batch))
            metrics = self._metrics(epoch, float(np.mean(losses)), val_set, map_set)
            epochs.append(metrics)
            logger.info(f"Epoch {epoch}/{cfg.epochs}: {metrics.to_line()}")
            if cfg.keep_best and metrics.recall1 > best_recall:
                best_epoch, best_recall, best_params = epoch, metrics.recall1, self._snapshot()

        if cfg.keep_best:
            self.params.update(best_params)
            logger.info(f"Keeping epoch {best_epoch} (validation recall@1 {best_recall:.6g})")

        return TrainReport(
            config=cfg.model_dump(),
            initial=initial,
            epochs=epochs,
            best_epoch=best_epoch if cfg.keep_best else None,
            wall_time_s=time.perf_counter() - started,
        )


def _prepare(descriptor_set: DescriptorSet, cfg: TrainConfig) -> Tuple[DescriptorSet, DescriptorSet]:
    if descriptor_set.dim % cfg.M != 0:
        raise ConfigError(f"D={descriptor_set.dim} is not divisible by M={cfg.M}")
    train_set, val_set = split_holdout(descriptor_set, cfg.val_fraction, cfg.seed)
    if train_set.n < cfg.batch_size:
        raise BatchTooSmallError(
            f"Training split has {train_set.n} rows, fewer than one batch of {cfg.batch_size}"
        )
    if val_set is None or val_set.n < 2:
        logger.warning("Validation split has fewer than 2 rows; validating on the training split")
        val_set = train_set
    return train_set, val_set


def _decoder_scheme(cfg: TrainConfig, dim: int) -> str:
    if cfg.decoder_init == "identity" and cfg.hidden < 2 * dim:
        logger.warning(
            f"identity initialization needs hidden ≥ 2·D (D={dim}, hidden={cfg.hidden}); using kaiming"
        )
        return "kaiming"
    return cfg.decoder_init


def train(
    descriptor_set: DescriptorSet, cfg: TrainConfig, init_codebook: Optional[Codebook] = None
) -> Tuple[Codebook, DecoderWeights, TrainReport]:
    """Start from a PQ codebook, then train codebook and decoder jointly.

    The codebook is fitted on the training split unless ``init_codebook`` is
    given. Deterministic given the data and ``cfg.seed``; the last incomplete
    batch of every epoch is dropped.
    """
    logger.info(f"Training with {cfg.model_dump()}")
    train_set, val_set = _prepare(descriptor_set, cfg)
    if init_codebook is None:
        codebook = fit_codebook(train_set, cfg.M, cfg.K, cfg.kmeans_iters, cfg.seed)
    elif (init_codebook.M, init_codebook.K, init_codebook.dim) != (cfg.M, cfg.K, descriptor_set.dim):
        raise ConfigError(
            f"Initial codebook has M={init_codebook.M}, K={init_codebook.K}, D={init_codebook.dim}; "
            f"config asks for M={cfg.M}, K={cfg.K} on D={descriptor_set.dim}"
        )
    else:
        codebook = init_codebook
    decoder = init_decoder(descriptor_set.dim, cfg.hidden, cfg.seed, _decoder_scheme(cfg, descriptor_set.dim))
    trainer = Trainer(cfg, codebook, decoder)
    report = trainer.fit(train_set, val_set, descriptor_set)
    logger.info(
        f"Training finished: recon {report.initial.recon_err:.6g} -> "
        f"{(report.epochs[-1] if report.epochs else report.initial).recon_err:.6g}"
    )
    return trainer.codebook, trainer.decoder, report


def finetune_lora(
    descriptor_set: DescriptorSet, base: Tuple[Codebook, DecoderWeights], cfg: TrainConfig
) -> Tuple[DecoderWeights, TrainReport]:
    """Train rank-``cfg.lora_rank`` factors on top of a frozen codebook and decoder"""
    if not cfg.lora_mode:
        raise ConfigError("finetune_lora needs lora_mode=true")
    codebook, decoder = base
    if codebook.dim != descriptor_set.dim or decoder.dim != descriptor_set.dim:
        raise ConfigError(
            f"Base model dimension (codebook {codebook.dim}, decoder {decoder.dim}) "
            f"does not match descriptors ({descriptor_set.dim})"
        )
    logger.info(f"LoRA finetuning with {cfg.model_dump()}")
    train_set, val_set = _prepare(descriptor_set, cfg.model_copy(update={"M": codebook.M}))
    adapted = init_lora(decoder, cfg.lora_rank, cfg.seed)
    trainer = Trainer(cfg, codebook, adapted, lora_only=True)
    report = trainer.fit(train_set, val_set, descriptor_set)
    return trainer.decoder, report


def save_checkpoint(
    codebook: Codebook, decoder: DecoderWeights, report: TrainReport, prefix: Path
) -> TrainReport:
    """Write <prefix>.cbk, <prefix>.dec and <prefix>.rpt; returns the report with file hashes"""
    prefix = Path(prefix)
    paths = {
        "codebook": Path(f"{prefix}.cbk"),
        "decoder": Path(f"{prefix}.dec"),
    }
    save_codebook(codebook, paths["codebook"])
    save_decoder(decoder, paths["decoder"])
    write_atomic(Path(f"{prefix}.rpt"), report.to_text().encode("utf-8"))
    hashes = {name: sha256_file(path) for name, path in paths.items()}
    logger.info(f"Saved checkpoint {prefix} ({', '.join(f'{k}={v[:12]}' for k, v in hashes.items())})")
    return report.model_copy(update={"checkpoint_hashes": hashes})

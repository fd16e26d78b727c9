"""Alternating training of decoder and LISTA encoder.

Per mini-batch: encoder prediction -> FISTA codes z* (held constant) ->
one Adam step on the decoder reconstruction loss -> optional column
projection -> one Adam step on the encoder regression loss. After every
epoch the validation set is scored with amortized codes only and the best
model so far is checkpointed.
"""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .eval import batched_decode, batched_encode, psnr, sparsity
from .inference import InferenceConfig, InferenceDivergedError, fista_infer
from .models import (Decoder, LinearDecoder, ListaEncoder, decoder_grad_params, encoder_grad_params,
                     init_encoder, init_linear_decoder, init_mlp_decoder, project_columns_unit_norm,
                     save_checkpoint)
from .numerics import Rng, all_finite, col_norms
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

VARIANTS = ("SDL", "VDL", "SDL-NL", "VDL-NL")
METRICS_HEADER = ["epoch", "train_energy", "val_energy", "val_psnr", "val_sparsity_pct",
                  "mean_l1", "mean_component_std"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "SDL"
    epochs: int = 10
    batch_size: int = 250
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    lr_dec: float = 1e-3
    lr_enc: float = 3e-4
    wd_b_dec: float = 0.0
    wd_b_enc: float = 0.0
    lista_L: int = 3
    latent_dim: int = 128
    hidden_dim: int = 512
    seed: int = 0
    lr_dec_anneal_every: int = 0  # halve lr_dec every N epochs; 0 disables
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ablation: bool = False  # allow an unconstrained decoder with beta == 0 (collapse study)

    @property
    def nonlinear(self) -> bool:
        return self.variant.endswith("-NL")

    @property
    def project_columns(self) -> bool:
        return self.variant.startswith("SDL")

    def validate(self) -> "TrainConfig":
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        self.inference.validate()
        if self.project_columns and self.inference.beta != 0:
            raise ValueError(f"{self.variant} requires beta == 0, got {self.inference.beta}")
        if not self.project_columns and not self.inference.beta > 0 and not self.ablation:
            raise ValueError(f"{self.variant} requires beta > 0")
        if self.inference.beta > 0 and self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 with variance regularization")
        if self.epochs < 0 or self.batch_size < 1 or self.lista_L < 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lista_L >= 0 required")
        return self


@dataclass
class EpochRecord:
    epoch: int
    train_energy: float
    val_energy: float
    val_psnr: float
    val_sparsity_pct: float
    mean_l1: float
    mean_component_std: float
    median_l1: float
    mean_col_norm: float
    mean_fista_iters: float
    aborted: bool = False
    component_std: np.ndarray | None = field(default=None, repr=False)

    def row(self) -> list:
        return [self.epoch] + [getattr(self, k) for k in METRICS_HEADER[1:]]


@dataclass
class TrainReport:
    records: list[EpochRecord]
    best_epoch: int | None
    best_checkpoint: str | None
    decoder: Decoder
    encoder: ListaEncoder
    best_decoder: Decoder
    best_encoder: ListaEncoder
    init_col_norm: float


def init_models(d: int, cfg: TrainConfig) -> tuple[Decoder, ListaEncoder]:
    rng = Rng(cfg.seed).child("init")
    if cfg.nonlinear:
        dec: Decoder = init_mlp_decoder(d, cfg.latent_dim, cfg.hidden_dim, rng.child("dec"),
                                        unit_columns=cfg.project_columns)
    else:
        dec = init_linear_decoder(d, cfg.latent_dim, rng.child("dec"), unit_columns=cfg.project_columns)
    enc = init_encoder(d, cfg.latent_dim, cfg.lista_L, rng.child("enc"))
    return dec, enc


def mean_column_norm(dec: Decoder) -> float:
    if isinstance(dec, LinearDecoder):
        return float(col_norms(dec.W).mean())
    return float(np.concatenate([col_norms(dec.W1), col_norms(dec.W2)]).mean())


def collapse_metrics(codes: list[np.ndarray], dec: Decoder | None = None) -> dict:
    """Code-norm statistics over a list of code batches (one entry per batch).

    ``component_std`` is the per-component std (n-1) averaged over batches and
    ``mean_component_std`` its mean.
    """
    if not codes:
        raise ValueError("collapse_metrics needs at least one batch")
    l1 = np.concatenate([np.abs(z.astype(np.float64)).sum(axis=0) for z in codes])
    stds = np.array([np.std(z.astype(np.float64), axis=1, ddof=1) if z.shape[1] > 1
                     else np.zeros(z.shape[0]) for z in codes])
    comp = stds.mean(axis=0)
    out = {"mean_l1": float(l1.mean()), "median_l1": float(np.median(l1)),
           "mean_component_std": float(comp.mean()), "component_std": comp}
    out["mean_col_norm"] = mean_column_norm(dec) if dec is not None else float("nan")
    return out


def _check_finite(dec: Decoder, enc: ListaEncoder) -> None:
    if not all_finite(*dec.params().values(), *enc.params().values()):
        raise TrainingError("NaN/Inf encountered in model parameters")


def _val_stats(dec, enc, val: Dataset, lam: float):
    z = batched_encode(enc, val.samples)
    recon = batched_decode(dec, z)
    r = (val.samples - recon).astype(np.float64)
    energy = 0.5 * np.einsum("ij,ij->j", r, r) + lam * np.abs(z).sum(axis=0, dtype=np.float64)
    return float(energy.mean()), float(psnr(val.samples, recon, val.peak).mean()), sparsity(z)


def _meta(cfg: TrainConfig, epoch: int, extra: dict[str, float] | None = None) -> dict[str, float]:
    inf = cfg.inference
    out = {"lambda": inf.lam, "beta": inf.beta, "T": inf.T, "gamma": inf.gamma, "eta": inf.eta,
           "max_iters": float(inf.max_iters), "tol": inf.tol, "nonneg": float(inf.nonneg),
           "lipschitz_step": float(inf.step_mode == "lipschitz"),
           "mean_reduction": float(inf.reduction == "mean"),
           "variant": float(VARIANTS.index(cfg.variant)), "epoch": float(epoch), "seed": float(cfg.seed)}
    out.update(extra or {})
    return out


def inference_from_meta(meta: dict[str, float], **overrides) -> InferenceConfig:
    """Rebuild the inference settings recorded in a training checkpoint."""
    cfg = InferenceConfig(lam=meta.get("lambda", 0.0), beta=meta.get("beta", 0.0), T=meta.get("T", 0.5),
                          gamma=meta.get("gamma", 0.0), eta=meta.get("eta", 1.0),
                          max_iters=int(meta.get("max_iters", 200)), tol=meta.get("tol", 1e-3),
                          nonneg=bool(meta.get("nonneg", 1.0)),
                          step_mode="lipschitz" if meta.get("lipschitz_step", 0.0) else "absolute",
                          reduction="mean" if meta.get("mean_reduction", 0.0) else "sum")
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def write_metrics_csv(path: str | os.PathLike, records: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in records:
            w.writerow([r.epoch] + [f"{v:.6g}" for v in r.row()[1:]])


def train(dataset: Dataset, valset: Dataset, cfg: TrainConfig, out_dir: str | os.PathLike | None = None,
          models: tuple[Decoder, ListaEncoder] | None = None,
          meta: dict[str, float] | None = None) -> TrainReport:
    """Run ``cfg.epochs`` epochs; ``meta`` is stored alongside the checkpoints."""
    cfg.validate()
    X = np.ascontiguousarray(dataset.samples, dtype=np.float32)
    d, N = X.shape
    if valset.d != d:
        raise ValueError(f"validation dimension {valset.d} != training dimension {d}")
    dec, enc = models if models is not None else init_models(d, cfg)
    inf = cfg.inference
    min_batch = 2 if inf.beta > 0 else 1

    dec_state = AdamState(cfg.lr_dec, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                          weight_decay={"b1": cfg.wd_b_dec} if cfg.nonlinear else {})
    enc_state = AdamState(cfg.lr_enc, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                          weight_decay={"b": cfg.wd_b_enc})
    shuffle = Rng(cfg.seed).child("shuffle")
    proj_rng = Rng(cfg.seed).child("reinit")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    init_norm = mean_column_norm(dec)
    records: list[EpochRecord] = []
    best_energy = np.inf
    best_epoch = None
    best_path = None
    best_dec, best_enc = dec.copy(), enc.copy()

    for epoch in range(1, cfg.epochs + 1):
        if cfg.lr_dec_anneal_every > 0 and epoch > 1 and (epoch - 1) % cfg.lr_dec_anneal_every == 0:
            dec_state.lr *= 0.5
        perm = shuffle.gen.permutation(N)
        energies, codes, iters = [], [], []
        aborted = False
        for start in range(0, N, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if idx.size < min_batch:
                continue
            Y = X[:, idx]
            try:
                res = fista_infer(Y, dec, enc, inf, z0=None)
            except InferenceDivergedError as exc:
                log.warning("epoch %d: %s; aborting the rest of this epoch", epoch, exc)
                aborted = True
                break
            z_star = res.codes
            adam_step(dec_state, dec.params(), decoder_grad_params(dec, z_star, Y))
            if cfg.project_columns:
                project_columns_unit_norm(dec, proj_rng)
            adam_step(enc_state, enc.params(), encoder_grad_params(enc, Y, z_star))
            _check_finite(dec, enc)
            energies.append(res.final_energy)
            codes.append(z_star)
            iters.append(res.iters_run)

        if not codes:
            raise TrainingError(f"epoch {epoch}: no batch completed")
        stats = collapse_metrics(codes, dec)
        v_energy, v_psnr, v_sp = _val_stats(dec, enc, valset, inf.lam)
        rec = EpochRecord(epoch, float(np.mean(energies)), v_energy, v_psnr, v_sp,
                          stats["mean_l1"], stats["mean_component_std"], stats["median_l1"],
                          stats["mean_col_norm"], float(np.mean(iters)), aborted, stats["component_std"])
        records.append(rec)
        log.info("epoch %d train %.5g val %.5g psnr %.3f sparsity %.2f%% l1 %.4g std %.4g iters %.1f",
                 epoch, rec.train_energy, v_energy, v_psnr, v_sp, rec.mean_l1,
                 rec.mean_component_std, rec.mean_fista_iters)
        if v_energy < best_energy:
            best_energy, best_epoch = v_energy, epoch
            best_dec, best_enc = dec.copy(), enc.copy()
            if out is not None:
                best_path = str(out / "best.spck")
                save_checkpoint(best_path, dec, enc, _meta(cfg, epoch, meta))
        if out is not None:
            write_metrics_csv(out / "metrics.csv", records)

    if out is not None:
        save_checkpoint(out / "last.spck", dec, enc, _meta(cfg, cfg.epochs, meta))
        if not records:
            write_metrics_csv(out / "metrics.csv", records)
    return TrainReport(records, best_epoch, best_path, dec, enc, best_dec, best_enc, init_norm)

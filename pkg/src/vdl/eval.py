"""Reconstruction metrics, denoising, atom probing/rendering, dictionary
recovery scoring and the low-data linear probe."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .data import Dataset, add_gaussian_noise
from .inference import per_sample_energy
from .models import (Checkpoint, Decoder, LinearDecoder, ListaEncoder, decode, encode,
                     encoder_backward, init_encoder, load_checkpoint)
from .numerics import Rng, col_norms
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
ZERO_EPS = 1e-12

TRADEOFF_HEADER = ["lambda", "sparsity_pct", "psnr"]
DENOISE_HEADER = ["sigma", "psnr_clean_recon", "psnr_noisy_input", "psnr_noisy_recon",
                  "sparsity_clean", "sparsity_noisy"]


def psnr(reference: np.ndarray, candidate: np.ndarray, peak: float | None = None) -> np.ndarray:
    """Per-column PSNR in dB, capped at 99.

    ``peak=None`` uses the dynamic range (max - min) of ``reference``; for
    dataset evaluation pass the training split's recorded ``Dataset.peak``.
    """
    reference = np.asarray(reference, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if reference.shape != candidate.shape:
        raise ValueError(f"shape mismatch: {reference.shape} vs {candidate.shape}")
    if reference.ndim == 1:
        reference, candidate = reference[:, None], candidate[:, None]
    if peak is None:
        peak = float(reference.max() - reference.min())
    if not peak > 0:
        raise ValueError(f"peak must be > 0, got {peak}")
    mse = np.mean((reference - candidate) ** 2, axis=0)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(peak * peak / mse)
    return np.minimum(out, PSNR_CAP)


def sparsity(z: np.ndarray) -> float:
    """Percentage of code entries that are exactly (|z| <= 1e-12) zero."""
    z = np.asarray(z)
    if z.size == 0:
        return 100.0
    return 100.0 * float(np.count_nonzero(np.abs(z) <= ZERO_EPS)) / z.size


@dataclass
class EvalRecord:
    psnr_mean: float
    psnr: np.ndarray
    sparsity_pct: float
    mean_l1: float
    mean_component_std: float


def _peak(ds: Dataset) -> float | None:
    return ds.peak


def evaluate(dec: Decoder, enc: ListaEncoder, ds: Dataset, batch_size: int = 1000) -> EvalRecord:
    """Amortized-inference reconstruction quality and code statistics on ``ds``."""
    codes = batched_encode(enc, ds.samples, batch_size)
    recon = batched_decode(dec, codes, batch_size)
    p = psnr(ds.samples, recon, _peak(ds))
    std = float(np.std(codes.astype(np.float64), axis=1, ddof=1).mean()) if codes.shape[1] > 1 else 0.0
    return EvalRecord(float(p.mean()), p, sparsity(codes),
                      float(np.abs(codes).sum(axis=0, dtype=np.float64).mean()), std)


def batched_encode(enc: ListaEncoder, Y: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    return np.concatenate([encode(enc, Y[:, i:i + batch_size]) for i in range(0, Y.shape[1], batch_size)]
                          or [np.zeros((enc.out_dim, 0), dtype=Y.dtype)], axis=1)


def batched_decode(dec: Decoder, Z: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    return np.concatenate([decode(dec, Z[:, i:i + batch_size]) for i in range(0, Z.shape[1], batch_size)]
                          or [np.zeros((dec.out_dim, 0), dtype=Z.dtype)], axis=1)


def amortized_energy(dec: Decoder, enc: ListaEncoder, Y: np.ndarray, lam: float) -> np.ndarray:
    z = encode(enc, Y)
    return per_sample_energy(z, Y, dec, lam)


# -- denoising --------------------------------------------------------------

@dataclass
class DenoiseRecord:
    sigma: float
    psnr_clean_recon: float
    psnr_noisy_input: float
    psnr_noisy_recon: float
    sparsity_clean: float
    sparsity_noisy: float

    def row(self) -> list[float]:
        return [getattr(self, k) for k in DENOISE_HEADER]


def denoise_eval(ckpt: Checkpoint | str | os.PathLike, testset: Dataset, sigma: float,
                 rng: Rng) -> DenoiseRecord:
    """Table-1-style denoising numbers using the encoder for inference.

    All PSNR values compare against the clean inputs.
    """
    if not isinstance(ckpt, Checkpoint):
        ckpt = load_checkpoint(ckpt)
    if ckpt.encoder is None:
        raise ValueError("denoising needs a checkpoint with an encoder")
    y = testset.samples
    y_noisy = add_gaussian_noise(y, sigma, rng)
    z = batched_encode(ckpt.encoder, y)
    z_noisy = batched_encode(ckpt.encoder, y_noisy)
    peak = _peak(testset)
    return DenoiseRecord(
        sigma=float(sigma),
        psnr_clean_recon=float(psnr(y, batched_decode(ckpt.decoder, z), peak).mean()),
        psnr_noisy_input=float(psnr(y, y_noisy, peak).mean()),
        psnr_noisy_recon=float(psnr(y, batched_decode(ckpt.decoder, z_noisy), peak).mean()),
        sparsity_clean=sparsity(z),
        sparsity_noisy=sparsity(z_noisy),
    )


# -- atoms ------------------------------------------------------------------

def atoms(dec: Decoder) -> np.ndarray:
    """Atoms as the columns of a ``d x l`` matrix.

    For the MLP decoder atom ``i`` is ``W2 @ W1[:, i]``: the one-hot probe
    with the hidden bias and ReLU removed.
    """
    if isinstance(dec, LinearDecoder):
        return dec.W.copy()
    return dec.W2 @ dec.W1


def export_atom_grid(atom_matrix: np.ndarray, rows: int, cols: int, path: str | os.PathLike,
                     tile_shape: tuple[int, int] | None = None) -> tuple[int, int]:
    """Write atoms as a grid of min-max scaled tiles into an 8-bit binary PGM.

    Tiles are square unless ``tile_shape`` is given; a non-square atom
    length without an explicit tile shape is an error. Tiles are separated
    by 1-pixel black lines. Returns (height, width).
    """
    atom_matrix = np.asarray(atom_matrix, dtype=np.float64)
    d, k = atom_matrix.shape
    if tile_shape is None:
        side = int(round(np.sqrt(d)))
        if side * side != d:
            raise ValueError(f"atom length {d} is not a perfect square")
        tile_shape = (side, side)
    th, tw = tile_shape
    if th * tw != d:
        raise ValueError(f"tile shape {tile_shape} does not hold atoms of length {d}")
    if rows * cols < k:
        raise ValueError(f"a {rows}x{cols} grid cannot hold {k} atoms")
    H = rows * th + (rows - 1)
    Wd = cols * tw + (cols - 1)
    img = np.zeros((H, Wd), dtype=np.uint8)
    for i in range(k):
        a = atom_matrix[:, i]
        lo, hi = a.min(), a.max()
        tile = np.zeros(d) if hi - lo <= 0 else (a - lo) / (hi - lo) * 255.0
        r, c = divmod(i, cols)
        y0, x0 = r * (th + 1), c * (tw + 1)
        img[y0:y0 + th, x0:x0 + tw] = np.round(tile).astype(np.uint8).reshape(th, tw)
    write_pgm(path, img)
    return H, Wd


def write_pgm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = open(path, "rb").read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def grid_shape(k: int) -> tuple[int, int]:
    cols = int(np.ceil(np.sqrt(k)))
    return int(np.ceil(k / cols)), cols


# -- dictionary recovery ----------------------------------------------------

def match_atoms(learned: np.ndarray, planted: np.ndarray, threshold: float = 0.9) -> tuple[float, float]:
    """Greedy matching on absolute cosine similarity.

    Returns the fraction of planted atoms whose matched |cosine| reaches
    ``threshold`` and the mean matched |cosine| over planted atoms.
    """
    learned = np.asarray(learned, dtype=np.float64)
    planted = np.asarray(planted, dtype=np.float64)
    if learned.shape[0] != planted.shape[0]:
        raise ValueError(f"atom dimension mismatch: {learned.shape[0]} vs {planted.shape[0]}")
    ln = learned / np.maximum(col_norms(learned), 1e-300)
    pn = planted / np.maximum(col_norms(planted), 1e-300)
    C = np.abs(pn.T @ ln)  # planted x learned
    n_p = C.shape[0]
    best = np.zeros(n_p)
    C = C.copy()
    for _ in range(min(C.shape)):
        i, j = np.unravel_index(np.argmax(C), C.shape)
        if C[i, j] < 0:
            break
        best[i] = C[i, j]
        C[i, :] = -1.0
        C[:, j] = -1.0
    return float(np.mean(best >= threshold)), float(best.mean())


# -- linear probe -----------------------------------------------------------

@dataclass
class ProbeConfig:
    samples_per_class: int = 10
    epochs: int = 200
    lr: float = 1e-3
    seed: int = 0
    top_k: tuple[int, ...] = (1, 3)
    n_classes: int = 10


@dataclass
class ProbeResult:
    top1: float
    top3: float
    val_top1: float | None = None
    best_epoch: int = 0
    extra: dict = field(default_factory=dict)


def stratified_indices(labels: np.ndarray, per_class: int, n_classes: int, rng: Rng) -> np.ndarray:
    out = []
    for c in range(n_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise ValueError(f"class {c} has zero samples")
        if idx.size < per_class:
            raise ValueError(f"class {c} has only {idx.size} samples, need {per_class}")
        out.append(rng.gen.choice(idx, size=per_class, replace=False))
    return np.sort(np.concatenate(out))


def _softmax_xent_grad(logits: np.ndarray, labels: np.ndarray):
    z = logits - logits.max(axis=0, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=0, keepdims=True)
    n = labels.size
    loss = -float(np.log(p[labels, np.arange(n)] + 1e-300).mean())
    g = p
    g[labels, np.arange(n)] -= 1.0
    return loss, g / n


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int) -> float:
    top = np.argsort(-logits, axis=0, kind="stable")[:k]
    return 100.0 * float(np.mean((top == labels[None, :]).any(axis=0)))


def _train_classifier(feats_fn, extra_params: dict[str, np.ndarray], backward_fn,
                      X: np.ndarray, y: np.ndarray, Xval, yval, cfg: ProbeConfig):
    """Full-batch Adam on softmax cross-entropy.

    ``feats_fn(X)`` maps inputs to features; when ``backward_fn`` is given the
    feature extractor is trained too (its parameters live in ``extra_params``).
    Keeps the best-validation epoch when validation data is available and
    ``samples_per_class >= 2``.
    """
    f = feats_fn(X)
    params = {"Wc": np.zeros((cfg.n_classes, f.shape[0])), "bc": np.zeros(cfg.n_classes)}
    params.update(extra_params)
    state = AdamState(lr=cfg.lr)
    select = Xval is not None and cfg.samples_per_class >= 2
    best = (-1.0, 0, {k: v.copy() for k, v in params.items()})
    for epoch in range(1, cfg.epochs + 1):
        f = feats_fn(X)
        logits = params["Wc"] @ f + params["bc"][:, None]
        _, g = _softmax_xent_grad(logits, y)
        grads = {"Wc": g @ f.T, "bc": g.sum(axis=1)}
        if backward_fn is not None:
            grads.update(backward_fn(X, params["Wc"].T @ g))
        adam_step(state, params, grads)
        if select:
            acc = topk_accuracy(params["Wc"] @ feats_fn(Xval) + params["bc"][:, None], yval, 1)
            if acc > best[0]:
                best = (acc, epoch, {k: v.copy() for k, v in params.items()})
    if select:
        for k, v in best[2].items():
            params[k][...] = v
        return params, best[0], best[1]
    return params, None, cfg.epochs


def _probe_split(train: Dataset, cfg: ProbeConfig):
    if train.labels is None:
        raise ValueError("probe needs a labelled training set")
    idx = stratified_indices(train.labels, cfg.samples_per_class, cfg.n_classes, Rng(cfg.seed).child("probe.subset"))
    return train.samples[:, idx].astype(np.float64), train.labels[idx]


def _finish(params, feats_fn, test: Dataset, val_acc, best_epoch) -> ProbeResult:
    logits = params["Wc"] @ feats_fn(test.samples.astype(np.float64)) + params["bc"][:, None]
    return ProbeResult(topk_accuracy(logits, test.labels, 1), topk_accuracy(logits, test.labels, 3),
                       val_acc, best_epoch)


def probe(enc: ListaEncoder | Checkpoint | str | os.PathLike, train: Dataset, test: Dataset,
          cfg: ProbeConfig, val: Dataset | None = None) -> ProbeResult:
    """Linear classifier on frozen encoder features."""
    if isinstance(enc, (str, os.PathLike)):
        enc = load_checkpoint(enc)
    if isinstance(enc, Checkpoint):
        enc = enc.encoder
    frozen = ListaEncoder(enc.U.astype(np.float64), enc.S.astype(np.float64),
                          enc.b.astype(np.float64), enc.L)
    X, y = _probe_split(train, cfg)
    feats = lambda A: encode(frozen, A)  # noqa: E731
    Xv, yv = (val.samples.astype(np.float64), val.labels) if val is not None else (None, None)
    params, va, be = _train_classifier(feats, {}, None, X, y, Xv, yv, cfg)
    return _finish(params, feats, test, va, be)


def probe_linear_raw(train: Dataset, test: Dataset, cfg: ProbeConfig,
                     val: Dataset | None = None) -> ProbeResult:
    """Baseline: linear classifier on the (standardised) pixels."""
    X, y = _probe_split(train, cfg)
    feats = lambda A: A  # noqa: E731
    Xv, yv = (val.samples.astype(np.float64), val.labels) if val is not None else (None, None)
    params, va, be = _train_classifier(feats, {}, None, X, y, Xv, yv, cfg)
    return _finish(params, feats, test, va, be)


def probe_lista_raw(train: Dataset, test: Dataset, cfg: ProbeConfig, latent_dim: int = 128,
                    L: int = 3, val: Dataset | None = None) -> ProbeResult:
    """Baseline: freshly initialised LISTA encoder + linear layer trained end to end."""
    X, y = _probe_split(train, cfg)
    enc = init_encoder(X.shape[0], latent_dim, L, Rng(cfg.seed).child("probe.lista"), dtype=np.float64)
    extra = {"U": enc.U, "S": enc.S, "b": enc.b}
    feats = lambda A: encode(enc, A)  # noqa: E731
    backward = lambda A, g: encoder_backward(enc, A, g)  # noqa: E731
    Xv, yv = (val.samples.astype(np.float64), val.labels) if val is not None else (None, None)
    params, va, be = _train_classifier(feats, extra, backward, X, y, Xv, yv, cfg)
    enc.U, enc.S, enc.b = params["U"], params["S"], params["b"]
    return _finish(params, feats, test, va, be)


# -- trade-off curve --------------------------------------------------------

def tradeoff_curve(checkpoints: Sequence[Checkpoint | str | os.PathLike], testset: Dataset) -> list[list[float]]:
    rows = []
    for c in checkpoints:
        ckpt = c if isinstance(c, Checkpoint) else load_checkpoint(c)
        rec = evaluate(ckpt.decoder, ckpt.encoder, testset)
        rows.append([ckpt.meta.get("lambda", float("nan")), rec.sparsity_pct, rec.psnr_mean])
    rows.sort(key=lambda r: r[1])
    return rows


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence[float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, (float, np.floating)) else v for v in r])

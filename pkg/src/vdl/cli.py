"""Command-line interface: train, infer, denoise, atoms, probe, tradeoff, synth.

Configs are plain ``key = value`` lines with ``#`` comments. Resolution order
(later wins): preset, config file, ``--set key=value`` overrides, then the
global ``--seed`` / ``--out`` flags. Every command writes the resolved
config next to its outputs so the run can be repeated with ``--config``.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from contextlib import nullcontext
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import spck
from .data import (DataError, Dataset, PatchPipelineConfig, apply_standardization, extract_patches,
                   load_dataset, load_idx, load_mnist, read_image_dir, save_dataset, split, standardize,
                   synth_sparse)
from .eval import (DENOISE_HEADER, TRADEOFF_HEADER, ProbeConfig, atoms, denoise_eval, export_atom_grid,
                   grid_shape, probe, probe_linear_raw, sparsity, tradeoff_curve, write_csv)
from .inference import InferenceConfig, batch_energy, fista_infer
from .models import Checkpoint, LinearDecoder, MlpDecoder, ListaEncoder, encode, load_checkpoint, save_checkpoint
from .numerics import Rng
from .training import TrainConfig, TrainingError, inference_from_meta, train

log = logging.getLogger("vdl")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2
RESOLVED_NAME = "config.resolved"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = ""
    variant: str = "SDL"
    epochs: int = 10
    batch_size: int = 250
    # inference
    lam: float = 0.0
    beta: float = 0.0
    T: float = 0.5
    gamma: float = 0.0
    eta: float = 1.0
    max_iters: int = 200
    tol: float = 1e-3
    nonneg: bool = True
    step_mode: str = "absolute"
    reduction: str = "sum"
    # optimisation / architecture
    lr_dec: float = 1e-3
    lr_enc: float = 3e-4
    wd_b_dec: float = 0.0
    wd_b_enc: float = 0.0
    lr_dec_anneal_every: int = 0
    lista_L: int = 3
    latent_dim: int = 128
    hidden_dim: int = 512
    seed: int = 0
    # data
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    dataset: str = ""
    image_dir: str = ""
    n_val: int = 5000
    n_train: int = 0  # 0 = everything left after the validation split
    patch_train: int = 200000
    patch_val: int = 20000
    patch_test: int = 20000
    out: str = "runs/default"

    def train_config(self) -> TrainConfig:
        return TrainConfig(variant=self.variant, epochs=self.epochs, batch_size=self.batch_size,
                           inference=self.inference_config(), lr_dec=self.lr_dec, lr_enc=self.lr_enc,
                           wd_b_dec=self.wd_b_dec, wd_b_enc=self.wd_b_enc, lista_L=self.lista_L,
                           latent_dim=self.latent_dim, hidden_dim=self.hidden_dim, seed=self.seed,
                           lr_dec_anneal_every=self.lr_dec_anneal_every)

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(lam=self.lam, beta=self.beta, T=self.T, gamma=self.gamma, eta=self.eta,
                               max_iters=self.max_iters, tol=self.tol, nonneg=self.nonneg,
                               step_mode=self.step_mode, reduction=self.reduction)


ALIASES = {"lambda": "lam"}
FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


# -- presets ---------------------------------------------------------------

def _lambda_tag(lam: float) -> str:
    if lam == 0:
        return "0"
    mant, exp = f"{lam:e}".split("e")
    return f"{float(mant):g}e{int(exp)}"


def _rows():
    # dataset, variant, epochs, lambdas, gamma, beta, T, lr_dec, lr_enc, wd_b_dec, wd_b_enc, eta_z, anneal
    yield "mnist", "SDL", 200, (0, 1e-4, 5e-4, 1e-3, 3e-3, 5e-3), 1, 0, 0.5, 1e-3, 3e-4, 0, 0, 1, 0
    yield "mnist", "VDL", 200, (0, 1e-3, 3e-3, 5e-3, 1e-2, 2e-2), 5, 10, 0.5, 3e-4, 1e-4, 0, 0, 0.5, 0
    yield "mnist", "SDL-NL", 200, (0, 1e-3, 3e-3, 5e-3, 1e-2, 2e-2), 1, 0, 0.5, 1e-3, 1e-4, 1e-3, 0, 1, 0
    yield "mnist", "VDL-NL", 200, (0, 1e-3, 3e-3, 5e-3, 1e-2, 2e-2), 100, 10, 0.5, 3e-4, 1e-4, 1e-3, 0, 0.5, 0
    yield "imagenet", "SDL", 100, (0, 5e-4, 1e-3, 2e-3, 3e-3, 5e-3), 1, 0, 0.5, 1e-3, 1e-4, 0, 1e-2, 0.5, 0
    yield "imagenet", "VDL", 100, (0, 1e-3, 3e-3, 5e-3, 1e-2, 1.5e-2), 5, 10, 0.5, 3e-4, 1e-4, 0, 1e-2, 0.5, 0
    yield "imagenet", "SDL-NL", 100, (0, 1e-3, 3e-3, 5e-3, 8e-3, 1e-2), 1, 0, 0.5, 1e-3, 1e-4, 1e-2, 1e-2, 0.5, 0
    yield "imagenet", "VDL-NL", 100, (0, 1e-3, 2e-3, 3e-3, 5e-3), 20, 10, 0.5, 5e-5, 1e-4, 1e-1, 1e-2, 0.5, 30
    yield "imagenet", "VDL-NL", 100, (1e-2, 2e-2), 40, 10, 0.5, 5e-5, 1e-4, 1e-1, 1e-2, 0.5, 30


def _build_presets() -> dict[str, dict]:
    out = {}
    for ds, variant, ep, lams, gamma, beta, T, lr_d, lr_e, wd_d, wd_e, eta, anneal in _rows():
        for lam in lams:
            name = f"{ds}_{variant.lower().replace('-', '_')}_lambda{_lambda_tag(lam)}"
            out[name] = {"variant": variant, "epochs": ep, "lam": float(lam), "gamma": float(gamma),
                         "beta": float(beta), "T": T, "lr_dec": lr_d, "lr_enc": lr_e, "wd_b_dec": float(wd_d),
                         "wd_b_enc": float(wd_e), "eta": float(eta), "lr_dec_anneal_every": anneal,
                         "latent_dim": 128 if ds == "mnist" else 256, "batch_size": 250, "max_iters": 200,
                         "tol": 1e-3, "reduction": "mean", "step_mode": "absolute"}
    return out


PRESETS = _build_presets()


# -- config parsing ----------------------------------------------------------

def _coerce(key: str, raw: str):
    typ = FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {raw!r} (expected {typ})") from None
    return raw


def _key(name: str) -> str:
    name = ALIASES.get(name.strip(), name.strip())
    if name not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {name!r}")
    return name


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        k, v = line.split("=", 1)
        key = _key(k)
        out[key] = _coerce(key, v)
    return out


def parse_overrides(items: list[str]) -> dict[str, object]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        k, v = item.split("=", 1)
        key = _key(k)
        out[key] = _coerce(key, v)
    return out


def resolve_config(config_path: str | None = None, preset: str | None = None,
                   overrides: list[str] | None = None, seed: int | None = None,
                   out: str | None = None) -> RunConfig:
    values: dict[str, object] = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {config_path}")
        values = parse_config_text(path.read_text(encoding="utf-8"), str(config_path))
    extra = parse_overrides(overrides or [])
    name = preset or extra.get("preset") or values.get("preset") or ""
    merged: dict[str, object] = {}
    if name:
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}")
        merged.update(PRESETS[name])
        merged["preset"] = name
    merged.update({k: v for k, v in values.items() if k != "preset"})
    merged.update({k: v for k, v in extra.items() if k != "preset"})
    if seed is not None:
        merged["seed"] = seed
    if out is not None:
        merged["out"] = out
    return RunConfig(**merged)


def format_config(cfg: RunConfig) -> str:
    lines = ["# resolved configuration"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_NAME
    path.write_text(format_config(cfg), encoding="utf-8")
    return path


# -- data helpers ------------------------------------------------------------

def _require(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} configured")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {path}")
    return p


def load_training_data(cfg: RunConfig) -> dict[str, Dataset]:
    root = Rng(cfg.seed)
    if cfg.dataset:
        ds = load_dataset(_require(cfg.dataset, "dataset"))
        if len(ds) == 0:
            raise DataError("empty input")
        train_ds, val_ds = split(ds, cfg.n_val, root.child("split"))
        if train_ds.peak is None:
            train_ds.peak = float(train_ds.samples.max() - train_ds.samples.min())
        val_ds.peak = train_ds.peak
        return {"train": train_ds, "val": val_ds}
    if cfg.image_dir:
        images = read_image_dir(_require(cfg.image_dir, "image directory"))
        pcfg = PatchPipelineConfig(n_train=cfg.patch_train, n_val=cfg.patch_val, n_test=cfg.patch_test,
                                   seed=cfg.seed)
        return extract_patches(images, pcfg, root.child("patches"))
    images = _require(cfg.train_images, "train_images")
    labels = _require(cfg.train_labels, "train_labels") if cfg.train_labels else None
    test_images = _require(cfg.test_images, "test_images") if cfg.test_images else None
    test_labels = _require(cfg.test_labels, "test_labels") if cfg.test_labels else None
    return load_mnist(images, labels, test_images, test_labels, n_val=cfg.n_val,
                      n_train=cfg.n_train or None, rng=root)


def load_eval_set(path: str, labels: str | None, ckpt: Checkpoint | None) -> Dataset:
    """A standardised dataset from an SPCK dataset file or IDX images.

    IDX inputs are standardised with the statistics recorded in ``ckpt``
    when available, else with their own.
    """
    p = _require(path, "input")
    if p.read_bytes()[:4] == spck.MAGIC:
        ds = load_dataset(p)
    else:
        raw = load_idx(p, _require(labels, "labels") if labels else None)
        if len(raw) == 0:
            raise DataError("empty input")
        meta = ckpt.meta if ckpt is not None else {}
        if "data_mean" in meta:
            ds = apply_standardization(raw, meta["data_mean"], meta["data_std"])
            ds.peak = meta.get("data_peak")
        else:
            ds = standardize(raw)
    if len(ds) == 0:
        raise DataError("empty input")
    if ds.peak is None:
        ds.peak = float(ds.samples.max() - ds.samples.min())
    return ds


def _check_dim(ckpt: Checkpoint, ds: Dataset) -> None:
    if ckpt.decoder.out_dim != ds.d:
        raise DataError(f"shape mismatch: checkpoint expects inputs of dimension {ckpt.decoder.out_dim}, "
                        f"input has {ds.d}")


# -- commands ------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    tcfg = cfg.train_config().validate()
    splits = load_training_data(cfg)
    tr, va = splits["train"], splits["val"]
    if len(tr) == 0:
        raise DataError("empty input")
    write_resolved(cfg, out)
    meta = {"data_mean": tr.mean, "data_std": tr.std, "data_peak": tr.peak or 0.0}
    report = train(tr, va, tcfg, out_dir=out, meta=meta)
    if "test" in splits:
        save_dataset(out / "test.spck", splits["test"])
    last = report.records[-1] if report.records else None
    if last is not None:
        print(f"best_epoch={report.best_epoch} val_psnr={last.val_psnr:.4f} "
              f"val_sparsity={last.val_sparsity_pct:.2f}% checkpoint={report.best_checkpoint}")
    else:
        print("no epochs run")
    return EXIT_OK


def _inference_cfg(ckpt: Checkpoint, cfg: RunConfig, set_keys: set[str]) -> InferenceConfig:
    inf = inference_from_meta(ckpt.meta)
    explicit = cfg.inference_config()
    for f in fields(InferenceConfig):
        if f.name in set_keys:
            setattr(inf, f.name, getattr(explicit, f.name))
    return inf.validate()


def _as64(ckpt: Checkpoint):
    dec = ckpt.decoder
    if isinstance(dec, LinearDecoder):
        dec = LinearDecoder(dec.W.astype(np.float64))
    else:
        dec = MlpDecoder(dec.W1.astype(np.float64), dec.b1.astype(np.float64), dec.W2.astype(np.float64))
    enc = ckpt.encoder
    if enc is not None:
        enc = ListaEncoder(enc.U.astype(np.float64), enc.S.astype(np.float64), enc.b.astype(np.float64), enc.L)
    return dec, enc


def cmd_infer(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    ds = load_eval_set(args.input, args.labels, ckpt)
    _check_dim(ckpt, ds)
    inf = _inference_cfg(ckpt, cfg, args.set_keys)
    if args.fista:
        dec, enc = _as64(ckpt)
        Y = ds.samples.astype(np.float64)
        res = fista_infer(Y, dec, enc, inf)
        codes, energy = res.codes, res.final_energy
        extra = f" iters={res.iters_run} converged={res.converged}"
    else:
        if ckpt.encoder is None:
            raise ConfigError("checkpoint has no encoder; use --fista")
        codes = encode(ckpt.encoder, ds.samples)
        energy = batch_energy(codes, ds.samples, ckpt.decoder, None, dataclasses.replace(inf, gamma=0.0))
        extra = ""
    out = Path(args.output) if args.output else Path(cfg.out) / "codes.spck"
    out.parent.mkdir(parents=True, exist_ok=True)
    spck.save(out, {"codes": codes})
    write_resolved(cfg, out.parent)
    l1 = float(np.abs(codes).sum(axis=0, dtype=np.float64).mean())
    print(f"n={codes.shape[1]} sparsity={sparsity(codes):.4f}% mean_l1={l1:.6g} energy={energy:.10g}{extra}")
    return EXIT_OK


def cmd_denoise(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    ds = load_eval_set(args.input, args.labels, ckpt)
    _check_dim(ckpt, ds)
    noise = Rng(cfg.seed).child("noise")
    rows = [denoise_eval(ckpt, ds, s, noise.child(f"sigma={s}")).row() for s in args.sigma]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "denoise.csv", DENOISE_HEADER, rows)
    write_resolved(cfg, out)
    for r in rows:
        print(",".join(f"{v:.6g}" for v in r))
    return EXIT_OK


def cmd_atoms(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    A = atoms(ckpt.decoder)
    rows, cols = grid_shape(A.shape[1])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = Path(args.output) if args.output else out / "atoms.pgm"
    h, w = export_atom_grid(A, rows, cols, path)
    write_resolved(cfg, out)
    print(f"{A.shape[1]} atoms -> {path} ({w}x{h})")
    return EXIT_OK


def cmd_probe(args, cfg: RunConfig) -> int:
    ckpts = [(c, load_checkpoint(_require(c, "checkpoint"))) for c in args.checkpoints]
    ref = ckpts[0][1]
    train_ds = load_eval_set(args.train, args.train_labels, ref)
    test_ds = load_eval_set(args.test, args.test_labels, ref)
    if train_ds.labels is None or test_ds.labels is None:
        raise DataError("probe needs labelled train and test inputs")
    rows = []
    for s in range(args.seeds):
        pcfg = ProbeConfig(samples_per_class=args.samples_per_class, epochs=args.epochs, seed=cfg.seed + s)
        base = probe_linear_raw(train_ds, test_ds, pcfg)
        rows.append(["linear_raw", cfg.seed + s, base.top1, base.top3])
        for name, ck in ckpts:
            _check_dim(ck, train_ds)
            r = probe(ck, train_ds, test_ds, pcfg)
            rows.append([name, cfg.seed + s, r.top1, r.top3])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "probe.csv", ["model", "seed", "top1", "top3"], rows)
    write_resolved(cfg, out)
    for r in rows:
        print(f"{r[0]} seed={r[1]} top1={r[2]:.2f} top3={r[3]:.2f}")
    return EXIT_OK


def cmd_tradeoff(args, cfg: RunConfig) -> int:
    ckpts = [load_checkpoint(_require(c, "checkpoint")) for c in args.checkpoints]
    ds = load_eval_set(args.test, args.labels, ckpts[0])
    for c in ckpts:
        _check_dim(c, ds)
    rows = tradeoff_curve(ckpts, ds)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "tradeoff.csv", TRADEOFF_HEADER, rows)
    write_resolved(cfg, out)
    for r in rows:
        print(",".join(f"{v:.6g}" for v in r))
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    if args.n < 1:
        raise ConfigError("empty input: --n must be >= 1")
    ds, planted, Z = synth_sparse(args.d, args.l, args.k, args.n, args.noise, Rng(cfg.seed).child("synth"))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "synth.spck", ds)
    save_checkpoint(out / "planted.spck", planted, None,
                    {"seed": float(cfg.seed), "k_active": float(args.k), "noise_std": args.noise})
    spck.save(out / "planted_codes.spck", {"codes": Z})
    write_resolved(cfg, out)
    print(f"wrote {out / 'synth.spck'} ({args.d}x{args.n}) and {out / 'planted.spck'} seed={cfg.seed}")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "denoise": cmd_denoise, "atoms": cmd_atoms,
            "probe": cmd_probe, "tradeoff": cmd_tradeoff, "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--preset", help="named hyperparameter preset (see --list-presets)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="cap BLAS threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vdl", description=__doc__.splitlines()[0])
    p.add_argument("--list-presets", action="store_true", help="print preset names and exit")
    sub = p.add_subparsers(dest="command")

    sub.add_parser("train", parents=[common], help="train a model")

    s = sub.add_parser("infer", parents=[common], help="compute codes for an input file")
    s.add_argument("checkpoint")
    s.add_argument("input", help="SPCK dataset or IDX images")
    s.add_argument("--labels")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--amortized", action="store_true", help="encoder codes (default)")
    mode.add_argument("--fista", action="store_true", help="FISTA codes initialised from the encoder")
    s.add_argument("--output", help="codes file (default OUT/codes.spck)")

    s = sub.add_parser("denoise", parents=[common], help="denoising evaluation")
    s.add_argument("checkpoint")
    s.add_argument("input")
    s.add_argument("--labels")
    s.add_argument("--sigma", type=float, action="append", help="noise std (repeatable; default 1.0)")

    s = sub.add_parser("atoms", parents=[common], help="render decoder atoms to a PGM grid")
    s.add_argument("checkpoint")
    s.add_argument("--output")

    s = sub.add_parser("probe", parents=[common], help="low-data linear probe on frozen encoders")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--train", required=True)
    s.add_argument("--train-labels")
    s.add_argument("--test", required=True)
    s.add_argument("--test-labels")
    s.add_argument("--samples-per-class", type=int, default=10)
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--seeds", type=int, default=5)

    s = sub.add_parser("tradeoff", parents=[common], help="sparsity / PSNR trade-off table")
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--test", required=True)
    s.add_argument("--labels")

    s = sub.add_parser("synth", parents=[common], help="planted-dictionary synthetic data")
    s.add_argument("--d", type=int, default=20)
    s.add_argument("--l", type=int, default=30)
    s.add_argument("--k", type=int, default=3)
    s.add_argument("--n", type=int, default=5000)
    s.add_argument("--noise", type=float, default=0.01)
    return p


def _threads(n: int | None):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_presets:
        print("\n".join(sorted(PRESETS)))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "sigma", None) is None and args.command == "denoise":
        args.sigma = [1.0]
    try:
        args.set_keys = set(parse_overrides(args.overrides))
        if args.config:
            args.set_keys |= set(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
        cfg = resolve_config(args.config, args.preset, args.overrides, args.seed, args.out)
        with _threads(args.threads):
            return COMMANDS[args.command](args, cfg)
    except (TrainingError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())

import csv

import numpy as np
import pytest

import vdl.training as training
from vdl.data import Dataset, synth_sparse, split
from vdl.inference import InferenceConfig
from vdl.models import load_checkpoint
from vdl.numerics import Rng, col_norms
from vdl.training import (TrainConfig, TrainingError, collapse_metrics, inference_from_meta, init_models,
                          train)


@pytest.fixture(scope="module")
def synth():
    ds, planted, _ = synth_sparse(8, 6, 2, 300, 0.01, Rng(0))
    ds.peak = float(ds.samples.max() - ds.samples.min())
    tr, va = split(ds, 60, Rng(1))
    return tr, va


def cfg_for(variant="SDL", **kw):
    inf = kw.pop("inference", None) or InferenceConfig(lam=0.05, beta=0.0 if variant.startswith("SDL") else 1.0,
                                                       T=0.5, gamma=0.5, eta=1.0, step_mode="lipschitz")
    base = dict(variant=variant, epochs=2, batch_size=25, latent_dim=6, hidden_dim=5, lr_dec=1e-2, lr_enc=1e-2,
                lista_L=2, seed=3, inference=inf)
    base.update(kw)
    return TrainConfig(**base)


def params_of(dec, enc):
    return {k: v.copy() for k, v in {**dec.params(), **{"enc_" + k: v for k, v in enc.params().items()}}.items()}


def test_zero_epochs_keeps_initialization(synth):
    tr, va = synth
    cfg = cfg_for(epochs=0)
    rep = train(tr, va, cfg)
    assert rep.records == [] and rep.best_epoch is None
    d0, e0 = init_models(tr.d, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(params_of(d0, e0).values(),
                                                    params_of(rep.decoder, rep.encoder).values()))


@pytest.mark.parametrize("variant", ["SDL", "VDL"])
def test_zero_lr_changes_nothing(variant):
    ds = Dataset(np.random.default_rng(0).standard_normal((8, 4)).astype(np.float32), peak=4.0)
    cfg = cfg_for(variant, epochs=1, batch_size=4, lr_dec=0.0, lr_enc=0.0)
    d0, e0 = init_models(8, cfg)
    before = params_of(d0, e0)
    r1 = train(ds, ds, cfg)
    r2 = train(ds, ds, cfg)
    after = params_of(r1.decoder, r1.encoder)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert r1.records[0].train_energy == r2.records[0].train_energy


@pytest.mark.parametrize("variant", ["SDL", "VDL", "SDL-NL", "VDL-NL"])
def test_reproducible_bit_for_bit(synth, variant, tmp_path):
    tr, va = synth
    train(tr, va, cfg_for(variant), out_dir=tmp_path / "a")
    train(tr, va, cfg_for(variant), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    train(tr, va, cfg_for(variant, seed=4), out_dir=tmp_path / "c")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "c" / "metrics.csv").read_bytes()


@pytest.mark.parametrize("variant", ["SDL", "SDL-NL"])
def test_sdl_unit_columns_after_every_step(synth, variant, monkeypatch):
    tr, va = synth
    seen = []
    real = training.project_columns_unit_norm

    def spy(dec, rng=None):
        real(dec, rng)
        mats = [dec.W] if hasattr(dec, "W") else [dec.W1, dec.W2]
        seen.append(max(float(np.abs(col_norms(m) - 1).max()) for m in mats))
    monkeypatch.setattr(training, "project_columns_unit_norm", spy)
    train(tr, va, cfg_for(variant))
    assert len(seen) == 2 * 10 and max(seen) <= 1e-6


def test_codes_are_constant_through_updates(synth, monkeypatch):
    tr, va = synth
    log = []
    real = training.fista_infer

    def spy(*a, **kw):
        res = real(*a, **kw)
        log.append((res.codes, res.codes.copy()))
        return res
    monkeypatch.setattr(training, "fista_infer", spy)
    train(tr, va, cfg_for("VDL"))
    assert log and all(np.array_equal(a, b) for a, b in log)


def test_best_checkpoint_reload(synth, tmp_path):
    tr, va = synth
    cfg = cfg_for("SDL", epochs=4)
    rep = train(tr, va, cfg, out_dir=tmp_path)
    energies = [r.val_energy for r in rep.records]
    assert rep.best_epoch == int(np.argmin(energies)) + 1
    ck = load_checkpoint(rep.best_checkpoint)
    again = training._val_stats(ck.decoder, ck.encoder, va, cfg.inference.lam)[0]
    assert again == pytest.approx(min(energies), rel=1e-5)
    assert ck.meta["epoch"] == rep.best_epoch
    inf = inference_from_meta(ck.meta)
    assert inf.lam == pytest.approx(cfg.inference.lam) and inf.step_mode == "lipschitz"
    with open(tmp_path / "metrics.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == training.METRICS_HEADER and len(rows) == 5
    assert (tmp_path / "last.spck").exists()


def test_train_energy_is_mean_batch_energy(synth, monkeypatch):
    tr, va = synth
    got = []
    real = training.fista_infer

    def spy(*a, **kw):
        res = real(*a, **kw)
        got.append(res.final_energy)
        return res
    monkeypatch.setattr(training, "fista_infer", spy)
    rep = train(tr, va, cfg_for("SDL", epochs=1))
    assert rep.records[0].train_energy == pytest.approx(np.mean(got), rel=1e-12)


def test_lr_anneal_halves(synth, monkeypatch):
    tr, va = synth
    lrs = []
    real = training.adam_step

    def spy(state, params, grads):
        if "W" in params:
            lrs.append(state.lr)
        return real(state, params, grads)
    monkeypatch.setattr(training, "adam_step", spy)
    train(tr, va, cfg_for("SDL", epochs=5, lr_dec_anneal_every=2, lr_dec=0.04))
    per_epoch = [lrs[i * 10] for i in range(5)]
    assert per_epoch == pytest.approx([0.04, 0.04, 0.02, 0.02, 0.01])


def test_config_validation():
    with pytest.raises(ValueError):
        cfg_for("SDL", inference=InferenceConfig(beta=1.0)).validate()
    with pytest.raises(ValueError):
        cfg_for("VDL", inference=InferenceConfig(beta=0.0)).validate()
    cfg_for("VDL", inference=InferenceConfig(beta=0.0), ablation=True).validate()
    with pytest.raises(ValueError):
        cfg_for("VDL", batch_size=1).validate()
    with pytest.raises(ValueError):
        cfg_for("XYZ").validate()


def test_nan_parameters_raise(synth):
    tr, va = synth
    cfg = cfg_for("SDL", epochs=1)
    dec, enc = init_models(tr.d, cfg)
    enc.U[0, 0] = np.nan
    with pytest.raises((TrainingError, FloatingPointError)):
        train(tr, va, cfg, models=(dec, enc))


def test_collapse_metrics_examples():
    m = collapse_metrics([np.zeros((4, 5))])
    assert m["mean_l1"] == 0 and np.all(m["component_std"] == 0)
    z = np.array([[0.0, 1.0, 0.0, 1.0], [2.0, 3.0, 2.0, 3.0]])
    T = np.std(z[0], ddof=1)
    assert collapse_metrics([z])["mean_component_std"] == pytest.approx(T)
    g = np.random.default_rng(0)
    batches = [g.standard_normal((3, 7)).astype(np.float32) for _ in range(4)]
    m = collapse_metrics(batches)
    l1 = [sum(abs(float(v)) for v in b[:, i]) for b in batches for i in range(7)]
    assert m["mean_l1"] == pytest.approx(sum(l1) / len(l1), rel=1e-7)
    import statistics
    stds = [[statistics.stdev([float(v) for v in b[j]]) for j in range(3)] for b in batches]
    assert m["mean_component_std"] == pytest.approx(sum(map(sum, stds)) / 12, rel=1e-7)
    with pytest.raises(ValueError):
        collapse_metrics([])

import numpy as np
import pytest

from afmflow import afm
from afmflow.afm import AfmConfig, ForecastEnsemble
from afmflow.bundle import load_bundle, save_bundle
from afmflow.dynsys import ForecastDataset, generate_dataset
from afmflow.numcore import GradTape

TINY = dict(window=4, batch_size=8, max_steps=6, enc_hidden=3, enc_layers=1, h_dim=3,
            mlp_hidden=5, mlp_depth=2, emb_dim=4, ode_steps=3, smooth_window=2,
            checkpoint_every=1)


@pytest.fixture(scope="module")
def trained():
    ds = generate_dataset("brusselator", n_train=5, n_test=3, seed=0)
    bundle, rec = afm.train(ds, AfmConfig(**TINY))
    return ds, bundle, rec


def test_defaults():
    cfg = AfmConfig()
    assert (cfg.lr, cfg.batch_size, cfg.sigma_path, cfg.ode_steps) == (0.003, 128, 1e-4, 16)


@pytest.mark.parametrize("bad", [dict(window=0), dict(batch_size=0), dict(lr_schedule="step"),
                                 dict(emb_dim=5), dict(ode_method="rk4"), dict(sigma_path=-1.0)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        AfmConfig(**bad)


def test_target_times_cover_prediction_window():
    ts = afm.target_times((75, 75, 50), 10)
    assert ts[0] == 75 and ts[-1] == 149
    assert afm.target_times((75, 75, 50), 100)[0] == 100
    with pytest.raises(ValueError):
        afm.target_times((75, 75, 50), 200)


def test_batch_is_teacher_forced():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(4, 20, 2))
    cfg = AfmConfig(window=3, batch_size=16)
    b = afm.sample_batch(data, np.zeros((4, 20, 0)), (8, 8, 4), cfg, rng)
    for k in range(16):
        i, t = b.traj[k], b.t[k]
        assert 8 <= t < 16
        assert np.array_equal(b.windows[k], data[i, t - 3:t])
        assert np.array_equal(b.y1[k], data[i, t])
    np.testing.assert_allclose(b.target, b.y1 - b.y0)
    assert b.from_data.all()


def test_lr_schedule_endpoints():
    cfg = AfmConfig(max_steps=11, lr=0.01, lr_final_frac=0.1)
    assert afm.learning_rate(cfg, 1) == pytest.approx(0.01)
    assert afm.learning_rate(cfg, 11) == pytest.approx(0.001)
    assert afm.learning_rate(AfmConfig(lr_schedule="constant", lr=0.5), 7) == 0.5


def test_training_is_deterministic(trained):
    ds, bundle, rec = trained
    again, rec2 = afm.train(ds, AfmConfig(**TINY))
    assert np.array_equal(again.params.flat(), bundle.params.flat())
    assert [r.loss for r in rec] == [r.loss for r in rec2]
    assert len(rec) == 6 and bundle.kind == "afm"


def test_window_longer_than_history_rejected():
    ds = generate_dataset("brusselator", n_train=2, n_test=1, seed=0)
    with pytest.raises(ValueError):
        afm.train(ds, AfmConfig(**dict(TINY, window=150)))


def test_training_divergence_reported():
    ds = generate_dataset("brusselator", n_train=2, n_test=1, seed=0)
    ds.train[0, 80, 0] = np.inf
    with pytest.raises((afm.TrainingDiverged, ValueError)):
        afm.train(ds, AfmConfig(**dict(TINY, max_steps=30, window=1)))


def test_forecast_shapes_and_reproducibility(trained):
    ds, bundle, _ = trained
    e1 = afm.forecast(bundle, ds.test[:, :75], horizon=7, n_samples=4, seed=3)
    e2 = afm.forecast(bundle, ds.test[:, :75], horizon=7, n_samples=4, seed=3, chunk=5)
    e3 = afm.forecast(bundle, ds.test[:, :75], horizon=7, n_samples=4, seed=4)
    assert e1.samples.shape == (3, 4, 7, 2) and e1.start == 75
    np.testing.assert_allclose(e1.samples, e2.samples, rtol=1e-12)
    assert not np.array_equal(e1.samples, e3.samples)
    assert e1.valid.all() and e1.provenance["model_kind"] == "afm"


def test_forecast_single_history_and_errors(trained):
    ds, bundle, _ = trained
    e = afm.forecast(bundle, ds.test[0, :10], horizon=2, n_samples=2)
    assert e.samples.shape == (1, 2, 2, 2)
    with pytest.raises(ValueError):
        afm.forecast(bundle, ds.test[:, :75], horizon=0)
    with pytest.raises(ValueError):
        afm.forecast(bundle, ds.test[:, :2], horizon=3)
    with pytest.raises(ValueError):
        afm.forecast(bundle, ds.test[:, :75, :1], horizon=3)


def test_untrained_model_samples_base_noise():
    # zero-initialised output layer: the flow is the identity, so samples are N(0, 1) in
    # standardized units
    ds = generate_dataset("brusselator", n_train=3, n_test=1, seed=0)
    bundle, _ = afm.train(ds, AfmConfig(**dict(TINY, max_steps=0)))
    e = afm.forecast(bundle, ds.test[:, :75], horizon=1, n_samples=4000, seed=0)
    z = (e.samples[0, :, 0] - ds.mean) / ds.std
    np.testing.assert_allclose(z.mean(0), 0.0, atol=0.06)
    np.testing.assert_allclose(z.std(0), 1.0, atol=0.05)


def test_quantiles_monotone_and_match_numpy():
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(50, 3))
    q = afm.quantiles(arr, (0.1, 0.5, 0.9))
    np.testing.assert_allclose(q, np.quantile(arr, (0.1, 0.5, 0.9), axis=0))
    assert np.all(np.diff(q, axis=0) >= 0)
    with pytest.raises(ValueError):
        afm.quantiles(arr[:1])
    with pytest.raises(ValueError):
        afm.quantiles(arr, (0.5, 0.1))


def test_quantiles_skip_excluded_paths():
    s = np.arange(12.0).reshape(1, 4, 3, 1)
    valid = np.ones((1, 4), bool)
    s[0, 3] = np.nan
    valid[0, 3] = False
    ens = ForecastEnsemble(s, valid, 0, np.array([0]))
    q = afm.quantiles(ens, (0.5,))
    assert q.shape == (1, 1, 3, 1) and q[0, 0, 0, 0] == 3.0


def test_forecast_csv_roundtrip(tmp_path, trained):
    ds, bundle, _ = trained
    e = afm.forecast(bundle, ds.test[:, :75], horizon=3, n_samples=2, seed=0,
                     instance_ids=np.array([10, 11, 12]))
    afm.write_forecast_csv(tmp_path / "f.csv", [e])
    afm.write_quantiles_csv(tmp_path / "q.csv", [e])
    back = afm.read_forecast_csv(tmp_path / "f.csv")
    assert sorted(back) == [10, 11, 12]
    ts, arr = back[11]
    assert ts.tolist() == [75, 76, 77]
    np.testing.assert_array_equal(arr, e.samples[1])
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines[0] == "instance_id,t,dim,level,value" and len(lines) == 1 + 3 * 3 * 2 * 5


def test_bundle_roundtrip(tmp_path, trained):
    ds, bundle, rec = trained
    save_bundle(bundle, tmp_path / "m")
    back = load_bundle(tmp_path / "m")
    assert back.model_id() == bundle.model_id() and back.kind == "afm"
    a = afm.forecast(bundle, ds.test[:, :75], horizon=2, n_samples=2, seed=1)
    b = afm.forecast(back, ds.test[:, :75], horizon=2, n_samples=2, seed=1)
    assert np.array_equal(a.samples, b.samples)
    (tmp_path / "m" / "params.bin").write_bytes(b"\0" * 8)
    with pytest.raises(ValueError):
        load_bundle(tmp_path / "m")
    afm.write_train_log(tmp_path / "log.csv", rec)
    assert (tmp_path / "log.csv").read_text().splitlines()[0] == "step,loss,wall_time"


def test_quantile_examples():
    assert afm.quantiles(np.array([1.0, 2, 3, 4, 5])[:, None], (0.5,))[0, 0] == 3.0
    assert np.all(afm.quantiles(np.full((7, 2), 4.2), (0.1, 0.9)) == 4.2)
    z = np.random.default_rng(0).standard_normal((10000, 1))
    q = afm.quantiles(z, (0.05, 0.95))[:, 0]
    np.testing.assert_allclose(q, [-1.645, 1.645], atol=0.07)


def test_initial_loss_is_mean_squared_coupling_distance(trained):
    # zero output layer: the velocity is 0, so the loss is E||y1 - y0||^2 under the coupling
    ds = trained[0]
    cfg = AfmConfig(**dict(TINY, max_steps=0, batch_size=10000))
    params, arch = afm.init_model(ds.n, 0, cfg, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    data = ds.normalize(ds.train)
    batch = afm.sample_batch(data, ds.train_cov, ds.split, cfg, rng)
    loss = afm.batch_loss(GradTape(params, record=False), arch, batch).value[0, 0]
    # independent Monte-Carlo estimate: y1 from the prediction window, y0 ~ N(0, I)
    y1 = data[:, 75:150].reshape(-1, ds.n)
    y1 = y1[rng.integers(0, y1.shape[0], 10000)]
    mc = np.mean(np.sum((y1 - rng.standard_normal(y1.shape)) ** 2, axis=1))
    assert loss == pytest.approx(mc, rel=0.1)


def test_markov_contract(trained):
    # only the last w steps of history matter
    ds, bundle, _ = trained
    hist = ds.test[:, :30].copy()
    other = hist.copy()
    other[:, :-TINY["window"]] = 123.0
    a = afm.forecast(bundle, hist, horizon=3, n_samples=2, seed=0)
    b = afm.forecast(bundle, other, horizon=3, n_samples=2, seed=0)
    assert np.array_equal(a.samples, b.samples)
    c = afm.forecast(bundle, ds.test[:, 20:30], horizon=3, n_samples=2, seed=0)
    assert np.array_equal(a.samples, c.samples)


def test_single_path_bitwise_reproducible(trained):
    ds, bundle, _ = trained
    a = afm.forecast(bundle, ds.test[0, :75], horizon=1, n_samples=1, seed=11)
    b = afm.forecast(bundle, ds.test[0, :75], horizon=1, n_samples=1, seed=11)
    assert a.samples.tobytes() == b.samples.tobytes()


@pytest.mark.slow
def test_constant_process_oracle():
    # each trajectory holds one value forever: the conditional is a point mass at y_{t-1}
    rng = np.random.default_rng(0)
    N, T = 600, 12
    levels = rng.uniform(-2, 2, size=(N, 1, 1))
    y = np.repeat(levels, T, axis=1)
    ds = ForecastDataset("const", np.arange(T, dtype=float), y[:500], y[500:], (1, 10, 1))
    bundle, _ = afm.train(ds, AfmConfig(window=1, max_steps=2000, seed=0))
    hist = ds.test[:, :1]
    e = afm.forecast(bundle, hist, horizon=5, n_samples=20, seed=1)
    z = (e.samples - ds.mean) / ds.std  # (I, S, 5, 1)
    z_prev = ((hist - ds.mean) / ds.std)[:, None]  # (I, 1, 1, 1)
    one_step = np.abs(z[:, :, 0] - z_prev[:, :, 0]).mean()
    assert one_step < 0.05
    incr = np.abs(np.diff(z, axis=2))
    assert np.quantile(incr, 0.95) < 0.1

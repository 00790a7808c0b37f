import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fiberae.autodiff as ad
from fiberae.autoencoder import (
    AeRxParams,
    AeTxParams,
    ConfigMismatchError,
    TrainConfig,
    ae_rx,
    ae_tx,
    combined_symbol_response,
    desk_channel,
    export_learned_artifacts,
    init_params,
    load_checkpoint,
    load_embedding,
    load_pulse,
    save_checkpoint,
    train,
    train_step,
    window_indices,
)
from fiberae.conventional import Constellation, conventional_tx
from fiberae.signal import ComplexSignal, SymbolBlock, ideal_lowpass, normalize_power, upsample

SMALL = (32, 32)


def tiny_cfg(**kw):
    base = dict(
        channel=desk_channel("ad", n_ssfm_steps=4),
        m=4,
        n_b=16,
        hidden=SMALL,
        iterations=4,
        n_taps=8 * 4 + 1,
        eval_blocks=2,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("m", [16, 256])
def test_ae_tx_reproduces_conventional_tx(m):
    cfg = desk_channel("a")
    block = SymbolBlock.random(512, m, np.random.default_rng(0))
    tx = AeTxParams.conventional(m, cfg.osf)
    a = ae_tx(block.indices, tx, 1e-3, cfg).samples
    b = conventional_tx(block, Constellation.square_qam(m), 1e-3, cfg).samples
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-6


def test_ae_tx_with_impulse_shaper():
    cfg = desk_channel("a")
    rng = np.random.default_rng(1)
    w = rng.uniform(-1, 1, (8, 2))
    f = np.zeros(17, dtype=complex)
    f[8] = 1.0
    s = rng.integers(0, 8, 64)
    out = ae_tx(s, AeTxParams(w, f), 2e-4, cfg).samples
    c = w[s, 0] + 1j * w[s, 1]
    c = c / np.sqrt(np.mean(np.abs(c) ** 2))
    ref = normalize_power(ideal_lowpass(upsample(c, cfg.osf, cfg.f_sim), cfg.bw), 2e-4).samples
    np.testing.assert_allclose(out, ref, atol=1e-12 * np.max(np.abs(ref)))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-7, 1e-2))
def test_ae_tx_power_contract(seed, power):
    cfg = desk_channel("a")
    rng = np.random.default_rng(seed)
    tx = AeTxParams(rng.standard_normal((16, 2)), rng.standard_normal(33) + 1j * rng.standard_normal(33))
    x = ae_tx(rng.integers(0, 16, 64), tx, power, cfg)
    assert abs(x.power / power - 1) < 1e-10


def test_param_validation():
    with pytest.raises(ValueError):
        AeTxParams(np.zeros((4, 3)), np.ones(3))
    with pytest.raises(ValueError):
        AeTxParams(np.zeros((4, 2)), np.ones(4))
    with pytest.raises(ValueError):
        AeTxParams.init(4, 8, n_taps=30)
    with pytest.raises(ValueError):
        TrainConfig(n_adj=200, n_b=256)


@pytest.mark.parametrize("n_adj,dim", [(0, 2), (20, 82)])
def test_rx_input_dimension(n_adj, dim):
    assert AeRxParams.init(n_adj, 16, SMALL).input_dim == dim


def test_window_indices_wrap():
    idx = window_indices(5, 1)
    np.testing.assert_array_equal(idx[0], [4, 0, 1])
    np.testing.assert_array_equal(idx[4], [3, 4, 0])


def test_untrained_rx_outputs_distributions():
    cfg = desk_channel("adn")
    rng = np.random.default_rng(2)
    y = ComplexSignal(0.01 * (rng.standard_normal(64 * cfg.osf) + 1j * rng.standard_normal(64 * cfg.osf)), cfg.f_sim)
    for n_adj in (0, 3):
        probs = ae_rx(y, AeRxParams.init(n_adj, 16, SMALL, rng), n_adj, 1e-4, cfg)
        assert probs.shape == (64, 16)
        assert np.all(probs >= 0)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_initial_loss_near_log_m():
    cfg = TrainConfig(iterations=1)
    tx, rx = init_params(cfg)
    p = {"W": tx.w, "F": ad.from_complex(tx.f)}
    for i, (w, b) in enumerate(rx.weights):
        p[f"dense{i}.w"], p[f"dense{i}.b"] = w, b
    loss, _ = train_step(p, ad.AdamState(p), cfg, 0)
    assert abs(loss / np.log(cfg.m) - 1) < 0.1


def test_loss_gradient_wrt_embedding_and_shaper():
    cfg = tiny_cfg()
    tx, rx = init_params(cfg)
    s = np.random.default_rng(3).integers(0, cfg.m, cfg.n_b)
    base = {"F": ad.from_complex(tx.f)}
    for i, (w, b) in enumerate(rx.weights):
        base[f"dense{i}.w"], base[f"dense{i}.b"] = w, b
    n_layers = len(cfg.hidden) + 1

    err, _, _ = ad.grad_check(_leaf_graph(cfg, s, base, "W", n_layers), tx.w)
    assert err < 1e-4
    err, _, _ = ad.grad_check(_leaf_graph(cfg, s, dict(base, W=tx.w), "F", n_layers), base["F"])
    assert err < 1e-4


def _leaf_graph(cfg, s, fixed, name, n_layers):
    """Loss as a function of one parameter tensor, built with the library's own graph pieces."""
    from fiberae.autoencoder import ae_rx_logits, ae_tx_var, lowpass_var, ssfm_var

    def f(t, x):
        v = {k: t.constant(val) for k, val in fixed.items() if k != name}
        v[name] = x
        sig = ae_tx_var(s, v["W"], v["F"], cfg.launch_power, cfg.channel)
        sig = lowpass_var(sig, cfg.channel)
        y = lowpass_var(ssfm_var(sig, cfg.channel, 5), cfg.channel)
        layers = [(v[f"dense{i}.w"], v[f"dense{i}.b"]) for i in range(n_layers)]
        return ad.softmax_cross_entropy(ae_rx_logits(y, layers, 0, cfg.launch_power, cfg.channel), s)

    return f


def test_training_is_deterministic():
    cfg = tiny_cfg(iterations=5)
    a, b = train(cfg), train(cfg)
    assert a.losses == b.losses
    np.testing.assert_array_equal(a.tx.f, b.tx.f)
    assert a.mi_bits == b.mi_bits
    c = train(cfg.replace(seed=1))
    assert c.losses != a.losses


def test_noiseless_training_learns_qpsk():
    ch = desk_channel("a", enable_awgn=False)
    cfg = TrainConfig(channel=ch, m=4, iterations=2000, lr_rx=1e-3, hidden=(128, 128), eval_blocks=4)

    class Reached(Exception):
        pass

    def cb(step, loss):
        if loss < 0.01:
            raise Reached(step)

    with pytest.raises(Reached):
        train(cfg, callback=cb)


def test_mi_never_exceeds_log2_m():
    res = train(tiny_cfg(iterations=3))
    assert 0 <= res.mi_bits <= np.log2(4)
    assert res.se == res.mi_bits


def test_divergence_is_flagged(monkeypatch):
    import fiberae.autoencoder as ae_mod

    real = ae_mod.forward_loss

    def poisoned(tape, p, *args):
        loss, v = real(tape, p, *args)
        return ad.scale(loss, np.nan), v

    monkeypatch.setattr(ae_mod, "forward_loss", poisoned)
    res = train(tiny_cfg(iterations=3))
    assert res.diverged and res.losses == []
    assert np.isnan(res.mi_bits)


def test_checkpoint_round_trip_and_resume(tmp_path):
    cfg = tiny_cfg(iterations=4)
    full = train(cfg)
    half = train(cfg.replace(iterations=2))
    path = tmp_path / "ck.npz"
    save_checkpoint(path, half, cfg.replace(iterations=2))
    loaded, meta = load_checkpoint(path, cfg)
    assert meta["config_hash"] == cfg.config_hash()
    np.testing.assert_array_equal(loaded.tx.w, half.tx.w)
    assert loaded.losses == half.losses
    resumed = train(cfg, resume=loaded)
    assert resumed.losses == full.losses
    np.testing.assert_array_equal(resumed.tx.f, full.tx.f)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, cfg.replace(seed=9))
    assert not list(tmp_path.glob("*.tmp"))


def test_conventional_export(tmp_path):
    cfg = desk_channel("a")
    tx = AeTxParams.conventional(256, cfg.osf)
    paths = export_learned_artifacts(tx, cfg, 1e-3, tmp_path)
    c = load_embedding(paths["emb"])
    np.testing.assert_allclose(c.points, Constellation.square_qam(256).points, atol=1e-14)
    pulse = load_pulse(paths["pulse"])
    assert set(pulse) == {"t_s", "tx_power_norm", "tx_phase_rad", "rx_power_norm", "rx_phase_rad", "nyquist_ref"}
    assert np.max(np.abs(pulse["tx_power_norm"] - pulse["nyquist_ref"])) < 2e-3
    again = export_learned_artifacts(tx, cfg, 1e-3, tmp_path / "b")
    assert paths["pulse"].read_bytes() == again["pulse"].read_bytes()


def test_combined_response_of_sinc_without_cd_is_a_single_tap():
    cfg = desk_channel("a")
    h = combined_symbol_response(AeTxParams.conventional(16, cfg.osf), cfg)
    e = np.abs(h) ** 2
    assert 1 - e.max() / e.sum() < 1e-4
    h_cd = combined_symbol_response(AeTxParams.conventional(16, cfg.osf), desk_channel("ad"))
    e = np.abs(h_cd) ** 2
    assert 1 - e.max() / e.sum() > 0.5


def test_config_hash_ignores_run_length():
    cfg = TrainConfig()
    assert cfg.config_hash() == cfg.replace(iterations=5, eval_blocks=3).config_hash()
    assert cfg.config_hash() != cfg.replace(seed=1).config_hash()
    assert cfg.config_hash() != cfg.replace(channel=desk_channel("a")).config_hash()

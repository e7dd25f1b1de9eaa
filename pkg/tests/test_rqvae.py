import numpy as np
import pytest

import oracles
from poisid import numcore as nc
from poisid.rqvae import (
    RQVAE,
    TrainingDivergedError,
    compactness_loss,
    infer_indices,
    kmeans,
    kmeans_init,
    loss_diversity,
    loss_quant,
    loss_recon,
    nearest_codewords,
    quantize,
    utilization_loss,
)
from poisid.features import FeatureMatrix


def toy_X(n=10, width=12, seed=0):
    rng = np.random.default_rng(seed)
    return (rng.random((n, width)) < 0.3).astype(float)


def toy_model(**kw):
    base = dict(num_layers=2, codebook_size=4, code_dim=8, encoder_hidden=(16,), max_epochs=2, batch_size=10)
    base.update(kw)
    return RQVAE(**base)


# -- quantization ------------------------------------------------------------


def test_exact_codeword_hit():
    rng = np.random.default_rng(0)
    C1 = rng.normal(size=(8, 5))
    C2 = np.vstack([rng.normal(size=(3, 5)) + 5, np.zeros((1, 5))])
    C3 = np.vstack([np.zeros((1, 5)), rng.normal(size=(3, 5)) + 5])
    q = quantize(C1[7:8], [C1, C2, C3])
    assert q.indices.tolist() == [[7, 3, 0]]
    assert np.all(q.final_residual == 0)


def test_greedy_layerwise_brute_force():
    rng = np.random.default_rng(1)
    books = [rng.normal(size=(2, 3)) for _ in range(4)]
    z = rng.normal(size=(50, 3))
    q = quantize(z, books)
    for i in range(50):
        r = z[i].copy()
        for l, C in enumerate(books):
            d = [float(((r - c) ** 2).sum()) for c in C]
            k = min(range(2), key=lambda j: (d[j], j))
            assert q.indices[i, l] == k
            r = r - C[k]


def test_ties_pick_lowest_index():
    C = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    assert nearest_codewords(np.zeros((1, 2)), C).tolist() == [0]
    assert nearest_codewords(np.array([[1.0, 0.0]]), C).tolist() == [0]


def test_residual_identity():
    rng = np.random.default_rng(2)
    z = rng.normal(size=(1000, 16)) * 3
    books = [rng.normal(size=(32, 16)) for _ in range(3)]
    q = quantize(z, books)
    assert np.max(np.linalg.norm(q.quantized + q.final_residual - z, axis=1)) < 1e-12
    for l in range(1, 3):
        assert np.allclose(q.residuals[l], q.residuals[l - 1] - q.codewords[l - 1], atol=0, rtol=0)


# -- losses ------------------------------------------------------------------


def test_recon_values():
    p = np.array([[1.0, 0.0, 1.0]])
    assert loss_recon(p, p).item() == 0.0
    assert loss_recon(p, p + np.array([[0.0, 1.0, 0.0]])).item() == 1.0
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(7, 4)), rng.normal(size=(7, 4))
    assert abs(loss_recon(a, b).item() - oracles.recon(a.tolist(), b.tolist())) < 1e-10


def test_quant_values():
    r = [np.array([[1.0, 2.0]])]
    e = [np.array([[0.0, 4.0]])]
    # ||(1,-2)||^2 = 5; with beta 0.25: 5 + 1.25.
    assert loss_quant(r, e, 0.25).item() == pytest.approx(6.25, abs=1e-12)
    assert loss_quant(r, r, 0.25).item() == 0.0


def test_quant_beta_zero_gives_encoder_no_gradient():
    r = nc.parameter([[1.0, 2.0], [0.5, -1.0]])
    C = nc.parameter([[0.0, 4.0]])
    e = nc.take_rows(C, [0, 0])
    nc.backward(loss_quant([r], [e], 0.0))
    assert (r.grad is None or np.all(r.grad == 0)) and np.any(C.grad != 0)


def test_quant_term_isolation():
    # Codebook gradient equals that of term 1 alone, encoder gradient that of term 2 alone.
    rng = np.random.default_rng(4)
    rv, cv = rng.normal(size=(5, 3)), rng.normal(size=(2, 3))
    idx = [0, 1, 1, 0, 1]

    def grads(which):
        r, C = nc.parameter(rv), nc.parameter(cv)
        e = nc.take_rows(C, idx)
        if which == "both":
            loss = loss_quant([r], [e], 0.25)
        elif which == "codebook":
            loss = nc.mean_row_sqnorm(nc.sub(nc.stop_gradient(r), e))
        else:
            loss = nc.scale(nc.mean_row_sqnorm(nc.sub(r, nc.stop_gradient(e))), 0.25)
        nc.backward(loss)
        return r.grad, C.grad

    r_both, c_both = grads("both")
    _, c_only = grads("codebook")
    r_only, _ = grads("encoder")
    assert np.allclose(c_both, c_only, rtol=0, atol=1e-14)
    assert np.allclose(r_both, r_only, rtol=0, atol=1e-14)


def test_utilization_cases():
    assert utilization_loss([0, 1, 2, 3] * 5, 4) == 0.0
    for K in (2, 4, 32):
        assert utilization_loss([3 % K] * 40, K) == pytest.approx(2 * (K - 1) / K, abs=1e-12)
    rng = np.random.default_rng(5)
    idx = rng.integers(0, 6, size=37)
    assert abs(utilization_loss(idx, 6) - oracles.utilize(list(idx), 6)) < 1e-12


def test_compactness_matches_double_loop():
    rng = np.random.default_rng(6)
    v = rng.normal(size=(9, 4))
    idx = np.array([2, 2, 0, 2, 1, 1, 3, 0, 0])
    got = compactness_loss(v, idx, 4).item()
    assert abs(got - oracles.compactness(v.tolist(), idx.tolist(), 4)) < 1e-10
    three = v[:3]
    assert abs(compactness_loss(three, [0, 0, 0], 2).item() - oracles.compactness(three.tolist(), [0, 0, 0], 2)) < 1e-10


def test_diversity_value_is_sum_of_parts():
    rng = np.random.default_rng(7)
    r = [rng.normal(size=(12, 3)) for _ in range(2)]
    C = [rng.normal(size=(4, 3)) for _ in range(2)]
    idx = np.stack([nearest_codewords(r[l], C[l]) for l in range(2)], axis=1)
    expected = sum(oracles.utilize(list(idx[:, l]), 4) + oracles.compactness(r[l].tolist(), list(idx[:, l]), 4) for l in range(2))
    for tau in (None, 0.02):
        got = loss_diversity(idx, r, 4, C, "assigned", tau).item()
        assert abs(got - expected) < 1e-10


# -- k-means -----------------------------------------------------------------


def test_kmeans_k_points():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(5, 3))
    C = kmeans(X, 5, 10, np.random.default_rng(0))
    assert sorted(map(tuple, C)) == sorted(map(tuple, X))


def test_kmeans_two_blobs():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(200, 2)) * 0.1 + [5, 5]
    b = rng.normal(size=(200, 2)) * 0.1 + [-5, 0]
    C = kmeans(np.vstack([a, b]), 2, 20, np.random.default_rng(1))
    C = C[np.argsort(C[:, 0])]
    assert np.abs(C[0] - [-5, 0]).max() < 0.1 and np.abs(C[1] - [5, 5]).max() < 0.1


def test_kmeans_degenerate_batch_warns():
    with pytest.warns(UserWarning, match="degenerate"):
        C = kmeans(np.ones((10, 3)), 4, 5, np.random.default_rng(0))
    assert np.all(C == 1.0)


def test_second_layer_initialized_on_residuals():
    rng = np.random.default_rng(10)
    z = rng.normal(size=(400, 4))
    z -= z.mean(0)
    books = kmeans_init(z, 2, 8, 20, np.random.default_rng(0))
    resid = z - books[0][nearest_codewords(z, books[0])]
    # Lloyd centroids make per-cluster residuals mean-zero, so their mean is ~0.
    assert np.abs(resid.mean(0)).max() < 1e-10
    assert np.abs(books[1].mean(0)).max() < np.abs(books[0]).max()


# -- gradients and training -------------------------------------------------


@pytest.mark.parametrize(
    "kw",
    [dict(), dict(utilization_tau=None), dict(compactness_operand="codewords"), dict(diversity_weight=0.0, quant_weight=0.0)],
)
def test_total_loss_gradient_matches_finite_differences(kw):
    X = toy_X()
    model = toy_model(**kw).fit(X)
    errors = oracles.fd_check(model, X)
    assert max(errors.values()) < 1e-4, errors


def test_beta_zero_lambda_zero_codebooks_only_from_codebook_term():
    X = toy_X()
    model = toy_model(commitment_beta=0.0, diversity_weight=0.0).fit(X)
    errors = oracles.fd_check(model, X)
    assert max(errors.values()) < 1e-4
    # With mu = 0 as well the codebooks receive no gradient at all.
    model.set_params(quant_weight=0.0)
    model.store_.zero_grad()
    nc.backward(model.forward(X)["total"])
    assert np.all(model.store_.grad("codebook0") == 0)
    assert np.any(model.store_.grad("enc0.W") != 0)


def test_step_zero_total_equals_parts():
    X = toy_X()
    model = toy_model(quant_weight=0.7, diversity_weight=0.25).fit(X)
    out = model.forward(X)
    expect = out["recon"].item() + 0.7 * out["quant"].item() + 0.25 * out["div"].item()
    assert out["total"].item() == pytest.approx(expect, abs=1e-12)
    params = model.store_.values()
    assert out["total"].item() == pytest.approx(oracles.total_loss(params, params, X, oracles.model_cfg(model)), abs=1e-10)


def test_encode_decode_shapes_and_determinism():
    X = toy_X(40, 30)
    model = RQVAE(codebook_size=8, max_epochs=2, batch_size=40).fit(X)
    Z = model.encode(X)
    assert Z.shape == (40, 64) and np.all(np.isfinite(Z))
    assert np.array_equal(model.encode(X), Z)
    assert model.decode(Z).shape == (40, 30)
    idx = model.transform(X)
    assert idx.shape == (40, 3) and idx.max() < 8 and idx.min() >= 0
    assert np.array_equal(model.transform(X[::-1])[::-1], idx)
    with pytest.raises(ValueError):
        model.transform(X[:, :5])


def test_training_halves_reconstruction_error():
    X = toy_X(50, 40, seed=11)
    model = RQVAE(num_layers=2, codebook_size=8, code_dim=16, encoder_hidden=(64, 32), max_epochs=150, patience=150,
                  batch_size=25, learning_rate=3e-3, random_state=0)
    model.fit(X)
    first = model.history_[0]["monitor_recon"]
    assert model.history_[model.best_epoch_ - 1]["monitor_recon"] < 0.5 * first


def test_plain_autoencoder_trend():
    X = toy_X(40, 20, seed=12)
    model = toy_model(quant_weight=0.0, diversity_weight=0.0, max_epochs=60, patience=60, batch_size=40,
                      learning_rate=3e-3).fit(X)
    rec = [row["recon"] for row in model.history_]
    assert np.mean(rec[-10:]) < np.mean(rec[:10])


def test_fixed_seed_identical_codebooks():
    X = toy_X(30, 20)
    a = toy_model(max_epochs=5, random_state=3).fit(X)
    b = toy_model(max_epochs=5, random_state=3).fit(X)
    for Ca, Cb in zip(a.codebooks_, b.codebooks_):
        assert Ca.tobytes() == Cb.tobytes()


def test_report_has_entropy_and_collisions():
    X = toy_X(30, 20)
    model = toy_model(max_epochs=3).fit(X)
    lines = model.report_lines()
    assert lines[0].split("\t") == ["epoch", "L_total", "L_recon", "L_quant", "L_div", "monitor_recon", "entropy", "collisions"]
    assert len(lines) == 1 + model.n_iter_
    assert len(lines[1].split("\t")[6].split(",")) == 2


def test_validation_holdout_and_early_stop():
    X = toy_X(40, 20)
    model = toy_model(max_epochs=200, patience=3, validation_fraction=0.25, learning_rate=0.05).fit(X)
    assert model.n_iter_ < 200
    best = min(row["monitor_recon"] for row in model.history_)
    assert model.history_[model.best_epoch_ - 1]["monitor_recon"] == best


def test_save_load_round_trip(tmp_path):
    X = toy_X(30, 20)
    model = toy_model(max_epochs=3).fit(X)
    model.save(tmp_path)
    back = RQVAE.load(tmp_path)
    assert back.get_params() == model.get_params()
    assert np.array_equal(back.transform(X), model.transform(X))
    assert np.array_equal(back.reconstruct(X), model.reconstruct(X))
    fm = FeatureMatrix([f"p{i}" for i in range(30)], X, ((0, 20),))
    tuples = infer_indices(back, fm)
    assert tuples == infer_indices(model, fm)
    assert all(len(t) == 2 for t in tuples.values())


def test_divergence_restores_last_good_state():
    X = toy_X(20, 10)
    model = toy_model(max_epochs=50, patience=50, learning_rate=1e200)
    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError):
        model.fit(X)
    assert all(np.all(np.isfinite(v)) for v in model.store_.values().values())


def test_config_errors_listed_together():
    with pytest.raises(ValueError, match="codebook_size.*diversity_weight"):
        RQVAE(codebook_size=1, diversity_weight=2.0).fit(toy_X())

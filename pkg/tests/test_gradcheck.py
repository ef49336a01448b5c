import numpy as np
import pytest

from speclk import gradcheck as G
from speclk import losses as L


def test_small_run_passes():
    rep = G.check_all_gradients(50, rng=np.random.default_rng(1))
    assert rep.passed
    assert rep.checks == 50 * len(G.DEFAULT_KINDS)
    assert set(rep.per_kind) == {str(k) for k in G.DEFAULT_KINDS}


def test_zero_tolerance_fails_and_names_worst_case():
    rep = G.check_all_gradients(5, rng=np.random.default_rng(2), tolerance=0.0)
    assert not rep.passed
    assert rep.worst_case["loss"] in rep.per_kind
    assert {"trial", "V", "index", "p", "z_q"} <= set(rep.worst_case)


def test_zero_trials_is_an_empty_pass():
    rep = G.check_all_gradients(0)
    assert rep.passed and rep.checks == 0 and rep.worst_case is None


def test_wrong_gradient_is_caught(monkeypatch):
    monkeypatch.setattr(G, "analytic_grad", lambda kind, p, z: 1.01 * L.loss_and_grad(kind, p, np.exp(z) / np.exp(z).sum()).grad)
    rep = G.check_all_gradients(5, rng=np.random.default_rng(3), kinds=(L.LossKind.forward_kl(),))
    assert not rep.passed


def test_finite_difference_on_a_quadratic_free_case():
    # for forward KL the logit gradient is q - p exactly
    p = np.array([0.2, 0.3, 0.5])
    z = np.array([0.1, -0.4, 0.3])
    fd = G.finite_diff_grad(L.LossKind.forward_kl(), p, z)
    q = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(fd, q - p, atol=1e-9)


def test_kink_coordinates_are_skipped():
    p = np.array([0.5, 0.5])
    z = np.zeros(2)  # q == p: every coordinate sits on a kink of TV
    err, _, skipped = G.check_one(L.LossKind.tv(), p, z)
    assert skipped == 2 and err == 0.0


def test_report_serializes():
    d = G.check_all_gradients(2, rng=np.random.default_rng(0)).to_dict()
    assert d["trials"] == 2 and "max_rel_error" in d


@pytest.mark.parametrize("k", [1, 10, 100])
def test_magnitude_regime(k):
    spec = G.RegimeSpec(100_000, k)
    for name, (measured, predicted) in G.magnitude_report(spec).items():
        assert 0.5 <= measured / predicted <= 2.0, name
    comps = G.component_table(spec)
    assert comps["tv"]["on_support"] < 0 and abs(comps["tv"]["off_support"]) < 1e-6
    assert comps["forward_kl"]["off_support"] > 0


def test_regime_spec_validation():
    with pytest.raises(ValueError):
        G.RegimeSpec(10, 10)

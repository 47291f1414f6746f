import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import labels_for, shuffled_sources, unit_rows, view
from ntf import losses as L
from ntf.errors import ContractError
from ntf.gradcheck import LOSSES, TOLERANCE, check_loss
from ntf.tensor import Rng, Tensor


def random_batch(rng, max_sources=6, max_c=8):
    n_src = int(rng.integers(2, max_sources + 1))
    c = int(rng.integers(2, max_c + 1))
    sid = shuffled_sources(rng, n_src)
    return sid, c


# ------------------------------------------------------------ spot values


def test_het_single_pair_is_zero():
    z = np.array([[1.0, 0.0], [0.6, 0.8]])
    assert L.loss_het(view(z, [0, 0]), 0.07).item() == pytest.approx(0.0, abs=1e-12)


def test_het_identical_rows_is_four_ln3_for_any_tau():
    z = np.tile([[0.6, 0.8]], (4, 1))
    for tau in (0.07, 0.5, 3.0):
        assert abs(L.loss_het(view(z, [0, 0, 1, 1]), tau).item() - 4 * math.log(3)) <= 1e-9


def test_hom_values():
    z = np.tile([[0.0, 1.0]], (4, 1))
    assert L.loss_hom(view(z, [0, 0, 1, 1])).item() == 0.0
    anti = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    assert abs(L.loss_hom(view(anti, [0, 0, 1, 1])).item() - 4.0) <= 1e-9


def test_hom_single_source_is_contract_error():
    with pytest.raises(ContractError):
        L.loss_hom(view(np.eye(2), [3, 3]))


def test_het_empty_is_contract_error():
    with pytest.raises(ContractError):
        view(np.zeros((0, 2)), [])


@pytest.mark.parametrize("mode,expected", [("signed", -1.0), ("absolute", 1.0), ("squared", 1.0)])
def test_ort_modes(mode, expected):
    T_ = lambda a: Tensor(np.array([a], dtype=np.float64))  # noqa: E731
    assert L.loss_ort(T_([1.0, 0.0]), T_([0.0, 1.0]), mode).item() == pytest.approx(0.0, abs=1e-12)
    assert L.loss_ort(T_([1.0, 0.0]), T_([1.0, 0.0]), mode).item() == pytest.approx(1.0, abs=1e-12)
    assert L.loss_ort(T_([1.0, 0.0]), T_([-1.0, 0.0]), mode).item() == pytest.approx(expected, abs=1e-12)


def test_combine_tra_weighted_sum_and_flags():
    parts = [Tensor(np.float64(v)) for v in (2.0, 3.0, 1.0)]
    assert L.combine_tra(*parts, L.LossConfig(lam=0.1)).item() == pytest.approx(5.1, abs=1e-12)
    assert L.combine_tra(*parts, L.LossConfig(enable_het=False, enable_ort=False)).item() == 2.0
    assert L.combine_tra(*parts, L.LossConfig(lam=0.0)).item() == 5.0


def test_ce_values():
    assert abs(L.loss_ce(Tensor(np.zeros((5, 1))), [0, 1, 1, 0, 1]).item() - math.log(2)) <= 1e-9
    logit = math.log(0.25 / 0.75)
    assert L.loss_ce(Tensor(np.array([[logit]])), [1]).item() == pytest.approx(-math.log(0.25), abs=1e-12)
    assert L.loss_ce(Tensor(np.array([[40.0], [-40.0]])), [1, 0]).item() <= 1e-6


def test_combine_d():
    l_ext, l_ce = Tensor(np.float64(1.0)), Tensor(np.float64(0.5))
    assert L.combine_d(l_ext, l_ce, L.LossConfig(gamma=0.5)).item() == 1.25
    assert L.combine_d(l_ext, l_ce, L.LossConfig(gamma=0.0)).item() == 1.0
    assert L.LossConfig().gamma == 0.5 and L.LossConfig().lam == 0.1


def test_ext_identical_rows_no_aux():
    z = np.tile([[1.0, 0.0]], (4, 1))
    b = view(z, [0, 0, 1, 1], [0, 0, 1, 1])
    assert abs(L.loss_ext(b, None, 0.3).item() - 4 * math.log(3)) <= 1e-9


def test_ext_anchor_without_positive_raises():
    z = unit_rows(Rng(0), 4, 3)
    with pytest.raises(ContractError):
        L.loss_ext(view(z, [0, 0, 1, 1], [0, 1, 1, 1]), None)


def test_ext_aux_row_identical_to_reals():
    """An aux copy of the shared real feature is a maximal real numerator and a fake negative."""
    rng = Rng(3)
    r = unit_rows(rng, 1, 4)[0]
    fakes = unit_rows(rng, 2, 4)
    z = np.stack([r, r, fakes[0], fakes[1]])
    lab = [0, 0, 1, 1]
    aux = r[None]
    tau = 0.5
    b = view(z, [0, 0, 1, 1], lab)
    assert L.loss_ext(b, aux, tau).item() == pytest.approx(oracles.loss_ext(z, lab, aux, tau), abs=1e-12)
    in_batch = [np.exp(r @ z[k] / tau) for k in (1, 2, 3)]
    assert np.exp(r @ aux[0] / tau) >= max(in_batch) - 1e-12
    for i in (2, 3):  # fake anchors: only the denominator changes
        other = 5 - i
        cand = [z[k] for k in range(4) if k != i]
        base = -math.log(math.exp(z[i] @ z[other] / tau) / sum(math.exp(z[i] @ c / tau) for c in cand))
        extended = -math.log(math.exp(z[i] @ z[other] / tau)
                             / sum(math.exp(z[i] @ c / tau) for c in cand + [aux[0]]))
        assert extended > base


def test_ext_fake_anchor_terms_grow_with_aux():
    z = unit_rows(Rng(4), 6, 5)
    lab = np.array([0, 0, 0, 0, 1, 1])
    sid = [0, 0, 1, 1, 2, 2]
    aux = unit_rows(Rng(5), 4, 5)
    zt = np.asarray(z)

    def fake_term(aux_rows):
        cand = [zt[k] for k in range(6) if k != 4] + list(aux_rows)
        denom = sum(math.exp(zt[4] @ c / 0.2) for c in cand)
        return -math.log(math.exp(zt[4] @ zt[5] / 0.2) / denom)

    assert fake_term(aux) > fake_term([])
    b = view(z, sid, lab)
    assert L.loss_ext(b, aux, 0.2).item() == pytest.approx(oracles.loss_ext(z, lab, aux, 0.2), abs=1e-12)


# ------------------------------------------------------------- oracles


def _oracle_batches(n=50, seed=11):
    rng = Rng(seed)
    for i in range(n):
        r = rng.substream(i)
        sid, c = random_batch(r)
        yield r, sid, c


def test_het_hom_ort_match_double_loop_oracles():
    for r, sid, c in _oracle_batches():
        H, E = unit_rows(r, len(sid), c), unit_rows(r, len(sid), c)
        tau = float(r.uniform(0.05, 1.0))
        assert abs(L.loss_het(view(E, sid), tau).item() - oracles.loss_het(E, sid, tau)) <= 1e-10
        assert abs(L.loss_hom(view(H, sid)).item() - oracles.loss_hom(H, sid)) <= 1e-10
        for mode in L.ORT_MODES:
            got = L.loss_ort(Tensor(H), Tensor(E), mode).item()
            assert abs(got - oracles.loss_ort(H, E, mode)) <= 1e-10


def test_tra_matches_oracle_with_flags():
    for r, sid, c in _oracle_batches(seed=12):
        H, E = unit_rows(r, len(sid), c), unit_rows(r, len(sid), c)
        cfg = L.LossConfig(tau=float(r.uniform(0.05, 1)), lam=float(r.uniform(0, 1)),
                           enable_het=bool(r.integers(0, 2)), enable_ort=bool(r.integers(0, 2)))
        got, _ = L.loss_tra(view(H, sid), view(E, sid), cfg)
        want = oracles.loss_tra(H, E, sid, cfg.tau, cfg.lam, cfg.enable_het, cfg.enable_ort)
        assert abs(got.item() - want) <= 1e-10


def test_ext_and_supcon_match_oracles():
    for r, sid, c in _oracle_batches(seed=13):
        lab = labels_for(r, sid)
        Z = unit_rows(r, len(sid), c)
        aux = unit_rows(r, int(np.sum(lab == 0)), c)
        tau = float(r.uniform(0.05, 1.0))
        b = view(Z, sid, lab)
        assert abs(L.loss_ext(b, aux, tau).item() - oracles.loss_ext(Z, lab, aux, tau)) <= 1e-10
        assert abs(L.loss_ext(b, aux, tau, use_log=False).item()
                   - oracles.loss_ext(Z, lab, aux, tau, use_log=False)) <= 1e-10
        assert abs(L.loss_ext(b, None, tau).item() - oracles.supcon(Z, lab, tau)) <= 1e-10


def test_ce_and_d_match_oracles():
    for r, sid, c in _oracle_batches(seed=14):
        lab = labels_for(r, sid)
        Z = unit_rows(r, len(sid), c)
        aux = unit_rows(r, int(np.sum(lab == 0)), c)
        logits = r.normal(scale=3.0, size=(len(sid), 1))
        cfg = L.LossConfig(tau=float(r.uniform(0.05, 1)), gamma=float(r.uniform(0, 2)))
        assert abs(L.loss_ce(Tensor(logits), lab).item() - oracles.loss_ce(logits[:, 0], lab)) <= 1e-10
        got, _ = L.loss_d(view(Z, sid, lab), aux, Tensor(logits), lab, cfg)
        want = oracles.loss_ext(Z, lab, aux, cfg.tau) + cfg.gamma * oracles.loss_ce(logits[:, 0], lab)
        assert abs(got.item() - want) <= 1e-10


def test_ce_clamp_matches_oracle_at_extremes():
    logits = np.array([[30.0], [-30.0], [0.3]])
    lab = [0, 1, 1]
    assert abs(L.loss_ce(Tensor(logits), lab).item() - oracles.loss_ce(logits[:, 0], lab)) <= 1e-10


# -------------------------------------------------------------- gradients


@pytest.mark.parametrize("name", LOSSES)
def test_finite_difference(name):
    result = check_loss(name, seed=3)
    assert result.worst <= TOLERANCE, result


def test_hom_gradient_flows_through_first_argmax_pair_on_ties():
    z = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [-1.0, 0.0]])
    Z = Tensor(z, requires_grad=True)
    from ntf.tensor import GradTape

    with GradTape() as tape:
        loss = L.loss_hom(L.PairedBatchView(Z, [0, 0, 1, 1]))
    g = tape.backward(loss, [Z])[Z]
    touched = np.flatnonzero(np.abs(g).sum(axis=1))
    np.testing.assert_array_equal(touched, [0, 2])


# ------------------------------------------------------------- properties


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_losses_are_permutation_invariant(seed):
    r = Rng(seed)
    sid, c = random_batch(r)
    lab = labels_for(r, sid)
    H, E = unit_rows(r, len(sid), c), unit_rows(r, len(sid), c)
    aux = unit_rows(r, int(np.sum(lab == 0)), c)
    logits = r.normal(size=(len(sid), 1))
    p = r.permutation(len(sid))

    def values(order):
        return np.array([
            L.loss_het(view(E[order], sid[order]), 0.2).item(),
            L.loss_hom(view(H[order], sid[order])).item(),
            L.loss_ort(Tensor(H[order]), Tensor(E[order])).item(),
            L.loss_ext(view(E[order], sid[order], lab[order]), aux, 0.2).item(),
            L.loss_ce(Tensor(logits[order]), lab[order]).item(),
        ])

    np.testing.assert_allclose(values(p), values(np.arange(len(sid))), atol=1e-12, rtol=0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_non_negativity_and_hom_bound(seed):
    r = Rng(seed)
    sid, c = random_batch(r)
    lab = labels_for(r, sid)
    Z = unit_rows(r, len(sid), c)
    assert L.loss_het(view(Z, sid), 0.1).item() >= 0
    assert 0 <= L.loss_hom(view(Z, sid)).item() <= 4 + 1e-12
    assert L.loss_ext(view(Z, sid, lab), unit_rows(r, 3, c), 0.1).item() >= 0
    assert L.loss_ce(Tensor(r.normal(size=(len(sid), 1))), lab).item() >= 0


def test_anchor_is_excluded_from_its_own_denominator():
    r = Rng(21)
    sid = shuffled_sources(r, 3)
    Z = unit_rows(r, 6, 4)
    tau = 0.3
    got = L.loss_het(view(Z, sid), tau).item()
    z = Z.tolist()
    with_self = 0.0
    for i in range(6):
        p = oracles.partner(list(sid), i)
        denom = sum(math.exp(oracles.dot(z[i], z[k]) / tau) for k in range(6))
        with_self += -math.log(math.exp(oracles.dot(z[i], z[p]) / tau) / denom)
    assert abs(got - oracles.loss_het(Z, sid, tau)) <= 1e-10
    assert abs(got - with_self) > 1e-3


def test_view_rejects_non_unit_rows_and_bad_pairing():
    with pytest.raises(ContractError):
        view(np.ones((2, 2)), [0, 0])
    with pytest.raises(ContractError):
        view(unit_rows(Rng(0), 3, 2), [0, 0, 1])
    b = view(unit_rows(Rng(0), 4, 2), [5, 9, 9, 5])
    np.testing.assert_array_equal(b.pairing, [3, 2, 1, 0])

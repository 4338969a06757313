import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ghostsgd.certificate import (
    PathCertificate,
    bypass_path,
    ghost_level,
    ghost_loss,
    verify_path_certificate,
)
from ghostsgd.data import Ridge2D


def straight_path(samples=20, gamma=-30.0):
    t = np.linspace(0, 1, samples)
    w = np.column_stack([-1 + 2 * t, np.zeros(samples)])
    return PathCertificate.from_path(Ridge2D(), t, w, np.full(samples, gamma), epsilon=0.55)


def test_demo_path_is_valid():
    cert = bypass_path()
    rep = verify_path_certificate(cert)
    assert rep.valid and rep.monotone and rep.first_violation is None
    assert np.all(np.diff(cert.f_ext) <= 1e-9)
    assert cert.f_orig[-1] < cert.f_orig[0] - cert.epsilon
    assert rep.drop == pytest.approx(0.6, abs=1e-12)


def test_demo_path_crosses_the_ridge():
    cert = bypass_path()
    land = Ridge2D()
    ridge = land.critical_points()[1]
    assert cert.w[0, 0] < ridge < cert.w[-1, 0]
    assert cert.f_orig.max() > cert.f_orig[0] + 0.7
    assert cert.f_ghost[-1] < 1e-12


def test_constant_path_is_invalid():
    t = np.linspace(0, 1, 15)
    w = np.tile([-1.0, 0.0], (15, 1))
    rep = verify_path_certificate(PathCertificate.from_path(Ridge2D(), t, w, np.zeros(15), epsilon=0.55))
    assert rep.monotone and not rep.valid
    assert rep.drop == 0.0
    assert "epsilon" in rep.message


def test_climbing_the_ridge_without_ghost_help_is_caught():
    rep = verify_path_certificate(straight_path())
    assert not rep.monotone and not rep.valid
    assert rep.first_violation == 1
    assert rep.max_rise > 0.1


def with_rise(cert, index, rise):
    """Copy of ``cert`` whose f_ext climbs by exactly ``rise`` into sample ``index``."""
    f_ghost = cert.f_ghost.copy()
    f_ghost[index] = cert.f_ext[index - 1] + rise - cert.f_orig[index]
    return PathCertificate(cert.t, cert.w, cert.gamma, cert.f_orig, f_ghost, cert.epsilon)


def test_single_rise_is_reported_at_its_index():
    rep = verify_path_certificate(with_rise(bypass_path(), 57, 2e-9))
    assert not rep.valid and not rep.monotone
    assert rep.first_violation == 57
    assert "sample 57" in rep.message


def test_rise_within_tolerance_is_accepted():
    rep = verify_path_certificate(with_rise(bypass_path(), 57, 5e-10))
    assert rep.valid


def test_too_few_samples():
    with pytest.raises(ValueError, match="10"):
        verify_path_certificate(straight_path(samples=9))
    with pytest.raises(ValueError):
        bypass_path(samples=9)


def test_non_finite_path_is_invalid():
    cert = straight_path()
    f_orig = cert.f_orig.copy()
    f_orig[4] = np.nan
    rep = verify_path_certificate(PathCertificate(cert.t, cert.w, cert.gamma, f_orig, cert.f_ghost,
                                                  cert.epsilon))
    assert not rep.valid and rep.first_violation == 4


def test_tight_descent_budget_is_rejected():
    with pytest.raises(ValueError, match="budget"):
        bypass_path(gamma0=-5.0)


def test_ghost_loss_values():
    assert ghost_loss(0.0) == pytest.approx(np.log(2), abs=1e-15)
    assert ghost_loss(-800.0) == 0.0
    assert ghost_loss(800.0) == 800.0


@settings(max_examples=200, deadline=None)
@given(gamma=st.floats(-30, 30))
def test_ghost_level_inverts_ghost_loss(gamma):
    assert ghost_level(ghost_loss(gamma)) == pytest.approx(gamma, abs=1e-9)


def test_ghost_level_needs_positive_targets():
    with pytest.raises(ValueError):
        ghost_level([0.5, 0.0])

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recycle_hand.camera import BehindCameraError, CameraIntrinsics, project, project_vjp


def test_optical_axis_hits_principal_point():
    uv = project([[0.0, 0.0, 1.0]], (500.0, 500.0, 0.0, 0.0))
    np.testing.assert_array_equal(uv, [[0.0, 0.0]])


def test_projective_scale_invariance_example():
    mc = (400.0, 380.0, 60.0, 70.0)
    a = project([[0.05, 0.10, 1.0]], mc)
    b = project([[0.10, 0.20, 2.0]], mc)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_hand_evaluated_pinhole():
    mc = CameraIntrinsics(500.0, 500.0, 112.0, 112.0, 224, 224)
    # 500 * 0.1 / 2 + 112 = 137, 500 * 0.2 / 2 + 112 = 162
    np.testing.assert_allclose(project([[0.1, 0.2, 2.0]], mc), [[137.0, 162.0]], atol=1e-12)


def test_behind_camera_names_index():
    with pytest.raises(BehindCameraError) as exc:
        project([[0, 0, 1.0], [0, 0, 1.0], [0.1, 0, -0.5]], (1.0, 1.0, 0.0, 0.0))
    assert exc.value.index == 2
    with pytest.raises(BehindCameraError):
        project([[0, 0, 5e-5]], (1.0, 1.0, 0.0, 0.0))


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        CameraIntrinsics(1.0, 1.0, -0.1, 1.0, 4, 4)


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-2, 2), y=st.floats(-2, 2), z=st.floats(0.05, 10),
    lam=st.floats(0.01, 100),
)
def test_scale_invariance_property(x, y, z, lam):
    mc = (123.0, 97.0, 31.0, 40.0)
    a = project([[x, y, z]], mc)
    b = project([[lam * x, lam * y, lam * z]], mc)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_projection_gradient_matches_central_differences(rng):
    # every Jacobian entry d(u or v)/d(x, y, z, fx, fy, cx, cy) against central differences;
    # |x|, |y| >= 1 cm keeps every entry well above the differencing roundoff floor
    eps = 1e-6
    mc = np.array([110.0, 95.0, 30.0, 34.0])
    worst = 0.0
    for _ in range(100):
        xy = rng.uniform(0.01, 0.2, size=2) * rng.choice([-1.0, 1.0], size=2)
        p = np.array([xy[0], xy[1], rng.uniform(0.3, 1.5)])
        for out in range(2):
            w = np.zeros((1, 2))
            w[0, out] = 1.0
            gp, gm = project_vjp(p[None], mc, w)
            analytic = np.concatenate([gp[0], gm])
            for i in range(7):
                e = np.zeros(7)
                e[i] = eps
                hi = project((p + e[:3])[None], mc + e[3:])[0, out]
                lo = project((p - e[:3])[None], mc - e[3:])[0, out]
                fd = (hi - lo) / (2 * eps)
                a = analytic[i]
                if a == 0.0:
                    assert fd == 0.0
                    continue
                worst = max(worst, abs(fd - a) / max(abs(fd), abs(a)))
    assert worst < 1e-5

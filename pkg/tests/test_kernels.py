"""The numba kernels and their numpy twins must agree."""
import os
import subprocess
import sys

import numpy as np
import pytest

from mnnca import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")


@needs_numba
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
@pytest.mark.parametrize("M,dil,size", [(1, 1, 3), (4, 1, 3), (1, 3, 3), (2, 2, 5), (1, 7, 3)])
def test_depthwise_paths_agree(rng, dtype, tol, M, dil, size):
    C = 3
    x = rng.standard_normal((2, C, 6, 5)).astype(dtype)
    w = rng.standard_normal((C * M, size, size)).astype(dtype)
    g = rng.standard_normal((2, C * M, 6, 5)).astype(dtype)
    np.testing.assert_allclose(K._nb_dw_forward(x, w, dil), K._np_dw_forward(x, w, dil),
                               atol=tol, rtol=tol)
    np.testing.assert_allclose(K._nb_dw_backward_input(g, w, dil, C),
                               K._np_dw_backward_input(g, w, dil, C), atol=tol, rtol=tol)
    np.testing.assert_allclose(K._nb_dw_backward_weight(g, x, dil, size, size),
                               K._np_dw_backward_weight(g, x, dil, size, size),
                               atol=tol * 10, rtol=tol)


@needs_numba
def test_gradient_noise_paths_agree(rng):
    theta = rng.uniform(0, 2 * np.pi, (5, 7))
    grads = np.stack([np.sin(theta), np.cos(theta)], axis=-1)
    np.testing.assert_allclose(K._nb_gradient_noise(grads, 40, 30),
                               K._np_gradient_noise(grads, 40, 30), atol=1e-14)


def test_numpy_fallback_flag():
    code = ("from mnnca import _kernels as K, seeds, engine; import numpy as np;"
            "assert not K.USE_NUMBA;"
            "x = np.random.default_rng(0).standard_normal((1, 2, 5, 5));"
            "k = engine.Kernel(np.ones((2, 1, 3, 3)), groups=2);"
            "print(float(engine.conv2d_circular(x, k).data.sum()), seeds.perlin2d(8, 8, 2, 0).sum())")
    env = dict(os.environ, MNNCA_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    a, b = map(float, out.stdout.split())
    assert np.isfinite(a) and np.isfinite(b)

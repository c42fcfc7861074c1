import numpy as np
import pytest

from relitex import envlight, geometry, renderer


@pytest.fixture(scope="session")
def sphere_mesh():
    return geometry.uv_sphere()


@pytest.fixture(scope="session")
def small_sphere():
    return geometry.uv_sphere(rings=16, segments=32)


@pytest.fixture(scope="session")
def box_mesh():
    return geometry.box()


@pytest.fixture(scope="session")
def studio_env():
    return envlight.procedural_studio_env(0)


@pytest.fixture(scope="session")
def studio_light(studio_env):
    return envlight.prefilter(studio_env)


@pytest.fixture(scope="session")
def uniform_env():
    rad = np.ones((32, 64, 3), dtype=np.float32)
    return envlight.EnvironmentLight(radiance=rad)


def smooth_gradient_env(width=64, ambient=0.6, gain=0.9):
    """Low-contrast directional environment (about 2.5:1).

    Split-sum is a factorized approximation; on high-contrast lighting its
    inherent error at roughness near 1 exceeds any useful tolerance, so the
    shading-vs-Monte-Carlo comparisons run on lighting smooth enough to sit
    inside the approximation's validity range while still being directional
    enough to expose mip-mapping, LUT, and irradiance-convention bugs.
    """
    h = width // 2
    us = (np.arange(width) + 0.5) / width
    vs = (np.arange(h) + 0.5) / h
    phi = (us - 0.5) * 2 * np.pi
    theta = vs * np.pi
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    d = np.stack(np.broadcast_arrays(st * np.cos(phi)[None, :],
                                     ct + 0 * phi[None, :],
                                     st * np.sin(phi)[None, :]), axis=-1)
    axis = np.array([0.6, 0.7, -0.4])
    axis /= np.linalg.norm(axis)
    lobe = np.maximum(d @ axis, 0.0) ** 2
    rad = (ambient + gain * lobe)[..., None] * np.array([1.0, 0.95, 0.9])
    return envlight.EnvironmentLight(radiance=rad.astype(np.float32))


@pytest.fixture(scope="session")
def gradient_env():
    return smooth_gradient_env()


@pytest.fixture(scope="session")
def gradient_light(gradient_env):
    return envlight.prefilter(gradient_env)


@pytest.fixture(scope="session")
def uniform_light(uniform_env):
    return envlight.prefilter(uniform_env)


@pytest.fixture(scope="session")
def front_camera():
    dist = renderer.fit_distance(np.deg2rad(45.0))
    return renderer.camera_from_angles(0.0, 0.0, dist, np.deg2rad(45.0), (96, 96))


def make_camera(azimuth, elevation, resolution):
    dist = renderer.fit_distance(np.deg2rad(45.0))
    return renderer.camera_from_angles(azimuth, elevation, dist,
                                       np.deg2rad(45.0), resolution)

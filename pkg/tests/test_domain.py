"""Domain geometry: inside tests, measures, sampling, file round-trips."""

import os

import numpy as np
import pytest

from vasogrow.domain import (
    PerfusionDomain,
    read_polyline_csv,
    read_surface_ascii,
    write_polyline_csv,
    write_surface_ascii,
)
from vasogrow.errors import DomainError, SamplingError


def test_disk_area_matches_circle():
    dom = PerfusionDomain.disk(10.0, n_boundary=512)
    assert dom.measure() == pytest.approx(np.pi * 100.0, rel=1e-3)


def test_disk_inside_classification():
    dom = PerfusionDomain.disk(2.0, center=(1.0, -1.0))
    pts = np.array([[1.0, -1.0], [2.9, -1.0], [3.1, -1.0], [1.0, 1.1]])
    assert dom.inside(pts).tolist() == [True, True, False, False]


def test_nonconvex_polygon_inside():
    # L-shape: the notch (upper-right quadrant of the bbox) is outside.
    verts = np.array([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]], dtype=float)
    dom = PerfusionDomain(vertices=verts)
    assert dom.measure() == pytest.approx(3.0)
    pts = np.array([[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]])
    assert dom.inside(pts).tolist() == [True, True, True, False]


def test_sampling_uniform_inside_and_seeded():
    dom = PerfusionDomain.disk(5.0)
    a = dom.sample_uniform(400, np.random.default_rng(11))
    b = dom.sample_uniform(400, np.random.default_rng(11))
    assert np.array_equal(a, b)
    assert a.shape == (400, 3)
    assert np.all(a[:, 2] == 0.0)
    assert bool(np.all(dom.inside(a)))
    # uniformity sanity: mean radius of uniform disk samples is 2R/3
    r = np.hypot(a[:, 0], a[:, 1])
    assert r.mean() == pytest.approx(2.0 * 5.0 / 3.0, rel=0.06)


def test_sampling_excludes_removed_region():
    dom = PerfusionDomain.disk(5.0)
    # remove the half-space x < -2 (single plane, normal pointing +x)
    cut = dom.with_removed_region(np.array([[-2.0, 0, 0, 1.0, 0, 0]]))
    pts = cut.sample_uniform(300, np.random.default_rng(3))
    assert np.all(pts[:, 0] >= -2.0)
    # slab removal: intersection of two half-spaces
    slab = dom.with_removed_region(
        np.array([[-1.0, 0, 0, -1.0, 0, 0], [1.0, 0, 0, 1.0, 0, 0]])
    )
    probe = np.array([[0.0, 0.0, 0.0], [-3.0, 0.0, 0.0], [3.0, 0.0, 0.0]])
    assert slab.inside(probe).tolist() == [False, True, True]


def test_sampling_error_on_empty_domain():
    dom = PerfusionDomain.disk(1.0)
    gone = dom.with_removed_region(np.array([[100.0, 0, 0, 1.0, 0, 0]]))
    with pytest.raises(SamplingError):
        gone.sample_uniform(10, np.random.default_rng(0))


def test_degenerate_polygon_rejected():
    with pytest.raises(DomainError):
        PerfusionDomain(vertices=np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    with pytest.raises(DomainError):
        PerfusionDomain(vertices=np.array([[0.0, 0.0], [1.0, 0.0]]))


def test_box3d_volume_and_inside():
    dom = PerfusionDomain.box3d(lengths=(2.0, 3.0, 4.0), origin=(-1.0, 0.0, 0.0))
    assert dom.measure() == pytest.approx(24.0)
    pts = np.array(
        [[0.0, 1.5, 2.0], [-0.99, 0.01, 0.01], [1.5, 1.0, 1.0], [0.0, 3.5, 1.0]]
    )
    assert dom.inside(pts).tolist() == [True, True, False, False]


def test_box3d_sampling_inside():
    dom = PerfusionDomain.box3d(lengths=(1.0, 2.0, 0.5))
    pts = dom.sample_uniform(200, np.random.default_rng(7))
    assert bool(np.all(dom.inside(pts)))
    assert pts[:, 1].max() <= 2.0 and pts[:, 2].max() <= 0.5


def test_polyline_roundtrip(tmp_path):
    dom = PerfusionDomain.disk(3.0, center=(0.5, -0.25), n_boundary=64)
    p = os.path.join(tmp_path, "outline.csv")
    write_polyline_csv(dom, p)
    back = read_polyline_csv(p)
    assert np.array_equal(back.vertices, dom.vertices)


def test_polyline_bad_header(tmp_path):
    p = os.path.join(tmp_path, "bad.csv")
    with open(p, "w") as fh:
        fh.write("a,b\n0,0\n1,0\n0,1\n")
    with pytest.raises(DomainError):
        read_polyline_csv(p)


def test_surface_roundtrip(tmp_path):
    dom = PerfusionDomain.box3d(lengths=(1.0, 1.5, 2.0))
    p = os.path.join(tmp_path, "shape.txt")
    write_surface_ascii(dom, p)
    back = read_surface_ascii(p)
    assert back.measure() == pytest.approx(3.0, rel=1e-12)
    pts = np.array([[0.5, 0.75, 1.0], [1.5, 0.75, 1.0]])
    assert back.inside(pts).tolist() == [True, False]

import numpy as np
import pytest

from petpipe.classifier import TracerClass
from petpipe.errors import GenerationError, ParameterError
from petpipe.phantom import (
    PhantomSpec,
    degraded_prediction,
    generate_cohort,
    generate_phantom,
    region_mean,
)


@pytest.fixture(scope="module")
def cohort():
    return [generate_phantom(s) for s in generate_cohort(20, seed=300)]


def test_no_lesions_gives_empty_gt():
    ph = generate_phantom(PhantomSpec("fdg", lesion_count=0, rng_seed=2))
    assert not ph.gt.foreground.any()


def test_deterministic():
    spec = PhantomSpec("psma", rng_seed=9)
    a, b = generate_phantom(spec), generate_phantom(spec)
    assert np.array_equal(a.pet.data, b.pet.data) and np.array_equal(a.ct.data, b.ct.data)
    assert np.array_equal(a.gt.labels, b.gt.labels) and np.array_equal(a.anatomy.labels, b.anatomy.labels)


def test_brain_uptake_ratio():
    for seed in range(20):
        fdg = generate_phantom(PhantomSpec("fdg", rng_seed=seed))
        psma = generate_phantom(PhantomSpec("psma", rng_seed=seed))
        assert region_mean(fdg, "brain") > 5 * region_mean(psma, "brain")


def test_geometry_and_value_invariants(cohort):
    for ph in cohort:
        assert not (ph.gt.foreground & (ph.anatomy.labels > 0)).any()
        assert np.isfinite(ph.pet.data).all() and ph.pet.data.min() >= 0
        assert ph.pet.dims == ph.ct.dims == ph.gt.dims == ph.anatomy.dims
        # every lesion voxel keeps the lesion SUV floor
        assert (ph.pet.data[ph.gt.foreground] >= 3.0).all()


def test_class_separability(cohort):
    fdg, psma = cohort[:20], cohort[20:]
    mean = lambda group, organ: np.mean([region_mean(p, organ) for p in group])
    assert mean(fdg, "brain") > mean(psma, "brain")
    assert mean(psma, "kidneys") > mean(fdg, "kidneys")


def test_cohort_layout():
    specs = generate_cohort(1, seed=4)
    assert [s.tracer for s in specs] == [TracerClass.FDG, TracerClass.PSMA]
    assert [s.rng_seed for s in specs] == [4, 5]
    assert generate_cohort(3, seed=8) == generate_cohort(3, seed=8)
    with pytest.raises(ParameterError):
        generate_cohort(0)


def test_spec_validation():
    with pytest.raises(ParameterError):
        PhantomSpec("fdg", lesion_count=9)
    with pytest.raises(ParameterError):
        PhantomSpec("fdg", lesion_suv=(1.0, 4.0))
    with pytest.raises(ParameterError):
        PhantomSpec("fdg", dims=(4, 64, 128))
    with pytest.raises(GenerationError):
        generate_phantom(PhantomSpec("fdg", lesion_radius=(40, 40)))


def test_degraded_prediction(cohort):
    for i, ph in enumerate(cohort[:6]):
        pred = degraded_prediction(ph, seed=i)
        again = degraded_prediction(ph, seed=i)
        assert np.array_equal(pred.labels, again.labels)
        assert pred.spacing == ph.gt.spacing
        assert pred.foreground.any()
        assert not np.array_equal(pred.foreground, ph.gt.foreground)

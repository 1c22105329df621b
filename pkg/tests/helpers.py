import numpy as np

from petpipe.volume import BinaryMask


def mask(arr, spacing=(1.0, 1.0, 1.0)):
    return BinaryMask(np.asarray(arr, dtype=bool), spacing)


def random_mask_array(rng, max_side=16, shape=None):
    shape = shape or tuple(int(s) for s in rng.integers(1, max_side + 1, 3))
    density = rng.uniform(0.05, 0.6)
    return rng.random(shape) < density

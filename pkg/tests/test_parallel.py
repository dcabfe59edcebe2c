import numpy as np

from mfl.parallel import block_map, split_blocks
from mfl.rng import substream


def _draw(keys):
    return {"x": np.array([substream(0, "aux", k).standard_normal() for k in keys]), "none": None}


def test_split_blocks_independent_of_jobs():
    assert [len(b) for b in split_blocks(range(2500))] == [1000, 1000, 500]


def test_block_map_invariant_under_jobs():
    one = block_map(_draw, range(2500), jobs=1)
    three = block_map(_draw, range(2500), jobs=3)
    assert np.array_equal(one["x"], three["x"])
    assert one["none"] is None
    assert one["x"].shape == (2500,)

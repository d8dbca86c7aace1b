import numpy as np
import pytest

from layerfuse.repr_store import LayerReadoutDataset, validate


def make_dataset(n_pairs=8, dim=4, layers=(0, 1, 2), final_layer=None,
                 seed=0, split_tag="unsplit", hard_negatives=None):
    """Random valid dataset; final layer defaults to the last stored layer."""
    rng = np.random.default_rng(seed)
    layers = list(layers)
    if final_layer is None:
        final_layer = layers[-1]
    shape = (len(layers), n_pairs, dim)
    ds = LayerReadoutDataset(
        dim=dim,
        layers=layers,
        final_layer=final_layer,
        text_readouts=rng.standard_normal(shape).astype(np.float32),
        vision_readouts=rng.standard_normal(shape).astype(np.float32),
        pair_ids=[f"pair-{i:04d}" for i in range(n_pairs)],
        split_tag=split_tag,
        hard_negatives=hard_negatives,
    )
    validate(ds)
    return ds


@pytest.fixture
def tiny_dataset():
    return make_dataset()

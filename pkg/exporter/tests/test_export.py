"""Export path against a hand-computed two-block forward."""

import numpy as np
import pytest
import torch

import toybackbone
from layerfuse.repr_store import load_dump, validate
from lrd_exporter import ExportError, ExportSpec, export_readouts, parse_layers

PAIRS = [
    ("p0", "abcd", "img/cafe.png"),
    ("p1", "be", "img/dab.png"),
    ("p2", "fghe", "img/egg.png"),
    ("p3", "h", "img/fad.png"),
    ("p4", "gcab", "img/he.png"),
]


def hand_hidden(strings, scale=1.0):
    """Replay the toy forward in numpy doubles: ids, mask, h0, h1."""
    ids = toybackbone.pad_ids([toybackbone.tokenize(s) for s in strings])
    mask = (ids != 0).astype(np.float64)
    emb = toybackbone.embedding_table()[ids] * scale
    h0 = emb @ toybackbone.block0_weight().T
    h1 = h0 @ toybackbone.block1_weight().T + toybackbone.block1_bias()
    return ids, mask, h0, h1


def masked_mean(hidden, mask):
    return (hidden * mask[..., None]).sum(axis=1) / mask.sum(axis=1, keepdims=True)


def eos_rows(hidden, mask):
    last = mask.sum(axis=1).astype(int) - 1
    return hidden[np.arange(hidden.shape[0]), last]


def run_export(tmp_path, name, **overrides):
    kwargs = dict(model="<in-memory>", layers=[0, 1], pairs=PAIRS,
                  out=str(tmp_path / name), backbone=toybackbone.ToyBackbone())
    kwargs.update(overrides)
    payload, _ = export_readouts(ExportSpec(**kwargs))
    return load_dump(payload)


def test_mean_readout_matches_hand_forward(tmp_path):
    ds = run_export(tmp_path, "mean.lrd", readout="mean")
    validate(ds)
    _, mask_t, h0_t, h1_t = hand_hidden([p[1] for p in PAIRS])
    _, mask_v, h0_v, h1_v = hand_hidden(
        ["cafe", "dab", "egg", "fad", "he"], scale=toybackbone.IMAGE_SCALE)
    for layer, ht, hv in [(0, h0_t, h0_v), (1, h1_t, h1_v)]:
        np.testing.assert_allclose(ds.text(layer), masked_mean(ht, mask_t), atol=1e-5)
        np.testing.assert_allclose(ds.vision(layer), masked_mean(hv, mask_v), atol=1e-5)


def test_eos_readout_matches_hand_forward(tmp_path):
    ds = run_export(tmp_path, "eos.lrd", readout="eos")
    validate(ds)
    _, mask_t, h0_t, h1_t = hand_hidden([p[1] for p in PAIRS])
    np.testing.assert_allclose(ds.text(0), eos_rows(h0_t, mask_t), atol=1e-5)
    np.testing.assert_allclose(ds.text(1), eos_rows(h1_t, mask_t), atol=1e-5)


def test_eos_picks_last_real_token_not_padding(tmp_path):
    # "be" pads to the width of "abcd"; a readout at the padded tail would
    # surface block1's bias instead of the token-1 hidden state.
    ds = run_export(tmp_path, "pad.lrd", readout="eos", batch_size=5)
    _, _, _, h1_alone = hand_hidden(["be"])
    np.testing.assert_allclose(ds.text(1)[1], h1_alone[0, 1], atol=1e-5)
    bias_row = toybackbone.block1_bias()
    assert np.abs(ds.text(1)[1] - bias_row).max() > 0.1


def test_mean_over_all_includes_padding(tmp_path):
    valid = run_export(tmp_path, "valid.lrd", mean_over="valid")
    plain = run_export(tmp_path, "all.lrd", mean_over="all")
    _, mask, _, h1 = hand_hidden([p[1] for p in PAIRS])
    np.testing.assert_allclose(plain.text(1), h1.mean(axis=1), atol=1e-5)
    # rows with padding must differ between the two conventions
    padded = mask.sum(axis=1) < mask.shape[1]
    diff = np.abs(plain.text(1) - valid.text(1)).max(axis=1)
    assert diff[padded].min() > 1e-3
    assert diff[~padded].max() < 1e-6


def test_anchor_side_is_final_layer(tmp_path):
    ds = run_export(tmp_path, "anchor.lrd")
    assert ds.final_layer == 1
    np.testing.assert_array_equal(ds.anchors_text(), ds.text(1))
    np.testing.assert_array_equal(ds.anchors_vision(), ds.vision(1))


def test_final_block_added_when_omitted(tmp_path):
    ds = run_export(tmp_path, "implicit.lrd", layers=[0])
    assert ds.layers == [0, 1]
    assert ds.final_layer == 1


def test_permutation_and_batching_stability(tmp_path):
    order = [0, 1, 2, 3, 4]
    shuffled = [3, 0, 4, 2, 1]
    a = run_export(tmp_path, "a.lrd", batch_size=2)
    b = run_export(tmp_path, "b.lrd", batch_size=3,
                   pairs=[PAIRS[i] for i in shuffled],
                   backbone=toybackbone.ToyBackbone())
    pos_b = {pid: i for i, pid in enumerate(b.pair_ids)}
    for layer in (0, 1):
        for i, (pid, _, _) in enumerate(PAIRS):
            np.testing.assert_allclose(
                a.text(layer)[i], b.text(layer)[pos_b[pid]], atol=1e-5)
            np.testing.assert_allclose(
                a.vision(layer)[i], b.vision(layer)[pos_b[pid]], atol=1e-5)


def test_dump_is_float32_and_finite(tmp_path):
    ds = run_export(tmp_path, "dtype.lrd")
    assert ds.text_readouts.dtype == np.float32
    assert ds.vision_readouts.dtype == np.float32
    assert np.isfinite(ds.text_readouts).all()


def test_half_precision_backbone_still_writes_float32(tmp_path):
    model = toybackbone.ToyBackbone().half()
    original = model.text_batch

    def half_text_batch(texts):
        embeds, mask = original(texts)
        return embeds.half(), mask

    model.text_batch = half_text_batch
    model.image_batch = half_text_batch  # stems tokenize the same way
    ds = run_export(tmp_path, "half.lrd",
                    pairs=[("q0", "abcd", "be"), ("q1", "fg", "he")],
                    backbone=model)
    assert ds.text_readouts.dtype == np.float32
    _, mask, _, h1 = hand_hidden(["abcd", "fg"])
    # half precision costs accuracy, not correctness
    np.testing.assert_allclose(ds.text(1), masked_mean(h1, mask), atol=5e-3)


def test_layer_out_of_range_is_rejected(tmp_path):
    with pytest.raises(ExportError, match="outside the model's 0..1"):
        run_export(tmp_path, "range.lrd", layers=[0, 5])


def test_duplicate_layer_request_collapses(tmp_path):
    ds = run_export(tmp_path, "dupes.lrd", layers=[1, 0, 1, 0])
    assert ds.layers == [0, 1]


def test_spec_rejects_bad_inputs(tmp_path):
    base = dict(model="m", layers=[0], pairs=PAIRS, out="x.lrd")
    with pytest.raises(ExportError, match="readout"):
        ExportSpec(**base, readout="cls")
    with pytest.raises(ExportError, match="batch size"):
        ExportSpec(**base, batch_size=0)
    with pytest.raises(ExportError, match="unique"):
        ExportSpec(model="m", layers=[0], out="x.lrd",
                   pairs=[("p0", "a", "b"), ("p0", "c", "d")])
    with pytest.raises(ExportError, match="no layers"):
        ExportSpec(model="m", layers=[], pairs=PAIRS, out="x.lrd")


def test_parse_layers_forms():
    assert parse_layers("2..5") == [2, 3, 4, 5]
    assert parse_layers("0,3,7") == [0, 3, 7]
    assert parse_layers("4") == [4]
    assert parse_layers(" 1..1 ") == [1]
    for bad in ("x..y", "3..1", "1,,2", ""):
        with pytest.raises(ExportError):
            parse_layers(bad)


def test_oom_maps_to_batch_size_advice(tmp_path):
    model = toybackbone.ToyBackbone()

    def exploding_run(embeds, mask):
        raise RuntimeError("CUDA out of memory. Tried to allocate 2.00 GiB")

    model.run = exploding_run
    with pytest.raises(ExportError, match="--batch-size below 2"):
        export_readouts(ExportSpec(model="<in-memory>", layers=[0], pairs=PAIRS,
                                   out=str(tmp_path / "oom.lrd"),
                                   backbone=model, batch_size=2))


def test_run_must_drive_requested_blocks(tmp_path):
    model = toybackbone.ToyBackbone()

    def skipping_run(embeds, mask):
        out = model.blocks[1](embeds)
        return out[0]

    model.run = skipping_run
    with pytest.raises(ExportError, match="never drove blocks \\[0\\]"):
        export_readouts(ExportSpec(model="<in-memory>", layers=[0, 1], pairs=PAIRS,
                                   out=str(tmp_path / "skip.lrd"), backbone=model))


def test_no_gradients_leak_into_export(tmp_path):
    model = toybackbone.ToyBackbone()
    run_export(tmp_path, "grad.lrd", backbone=model)
    assert all(p.grad is None for p in model.parameters())

"""Backbone adapter contract and checkpoint loading.

The exporter never modifies a model: it registers forward hooks on the
model's decoder blocks and reads the hidden states as they stream past.
Any backbone works if it quacks like this:

    model.blocks        sequence of modules, one per decoder block; hidden
                        state l is the output of blocks[l] shaped (B, T, D)
                        (tuple outputs are fine, element 0 is taken)
    model.text_batch(texts)  -> (embeds (B, T, D), mask (B, T))
    model.image_batch(paths) -> (embeds (B, T, D), mask (B, T))
    model.run(embeds, mask)  -> final hidden states; must drive every block

``mask`` marks real tokens (1) vs right padding (0); readouts rely on it
for last-token extraction and masked pooling. Inputs may be embedded in
whatever native precision the model uses — casting to 32-bit happens only
at dump-write time.
"""

from __future__ import annotations

from pathlib import Path

import torch

_PROTOCOL = ("blocks", "text_batch", "image_batch", "run")


class ModelLoadError(RuntimeError):
    pass


def check_backbone(model: object) -> None:
    missing = [name for name in _PROTOCOL if not hasattr(model, name)]
    if missing:
        raise ModelLoadError(
            f"model does not satisfy the backbone contract: missing {missing}; "
            "see lrd_exporter.backbones for the expected surface")
    if len(model.blocks) == 0:
        raise ModelLoadError("model exposes zero decoder blocks")


def load_model(identifier: str) -> object:
    """Resolve a model identifier to a backbone object.

    A path to a torch checkpoint is loaded directly and must already
    satisfy the adapter contract. Anything else needs a wrapper module:
    write a small adapter class around your backbone and save it with
    ``torch.save``.
    """
    path = Path(identifier)
    if not path.exists():
        raise ModelLoadError(
            f"model identifier {identifier!r} is not a local checkpoint path; "
            "wrap the backbone in an adapter (see lrd_exporter.backbones) and "
            "torch.save it first")
    try:
        model = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001 - surface every unpickling failure
        raise ModelLoadError(f"failed to load {identifier!r}: {exc}") from exc
    check_backbone(model)
    if hasattr(model, "eval"):
        model.eval()
    return model

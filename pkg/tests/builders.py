"""Random instance builders shared by unit and acceptance tests."""

import numpy as np

from cmr.encoders import HyperParams, init_params
from cmr.train import BatchInputs


def random_instance(rng, d=8, batch=2, queue=4, text_dim=6, visual_dim=5, hidden=6, tau=0.5):
    """Parameters plus one mini-batch with random queue contents and masks.

    Text weights use unit gain so the loss is far from flat; tau is kept moderate
    so central differences stay well conditioned.
    """
    hp = HyperParams(embed_dim=d, prefix_len=2, desc_tokens=2, hidden=hidden, temperature=tau)
    params = init_params(hp, text_dim, visual_dim, seed=int(rng.integers(1 << 31)))
    params["q.w1"] = rng.normal(0, 1 / np.sqrt(text_dim), params["q.w1"].shape)
    params["desc.w"] = rng.normal(0, 1 / np.sqrt(text_dim), params["desc.w"].shape)
    params["vmn.w2"] = rng.normal(0, 1 / np.sqrt(hidden), params["vmn.w2"].shape)
    for k in ("q.b1", "vmn.b1", "desc.b", "vmn.b2", "q.b2"):
        params[k] = rng.normal(0, 0.1, params[k].shape)

    def units(n):
        x = rng.standard_normal((n, d))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    mask = rng.random((batch, queue)) < 0.7
    rev = rng.random((batch, batch)) < 0.7
    np.fill_diagonal(rev, False)
    inputs = BatchInputs(
        query_x=rng.standard_normal((batch, text_dim)),
        visual_x=rng.standard_normal((batch, visual_dim)),
        text_x=rng.standard_normal((batch, text_dim)),
        queue_emb=units(queue),
        queue_vbar=units(queue),
        mask=mask,
        rev_mask=rev,
    )
    return hp, params, inputs

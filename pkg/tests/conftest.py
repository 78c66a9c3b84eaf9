import pytest
import torch

from omninet import cnp
from omninet.tasks import LANGUAGE_VOCAB, TASK_NAMES, make_task


def tiny_config(**kw):
    heads = tuple(
        cnp.TaskHead(t.name, t.task_id, t.vocab_size, t.max_len) for t in map(make_task, TASK_NAMES)
    )
    base = dict(d_model=8, n_h=2, n_layers=1, d_ff=16, tasks=heads, dropout=0.0,
                lang_vocab_size=len(LANGUAGE_VOCAB), d_emb=4, vision_channels=(3, 4, 4, 4))
    return cnp.ModelConfig(**{**base, **kw})


@pytest.fixture
def tiny_model():
    return cnp.OmniNetModel(tiny_config())


@pytest.fixture
def tiny_model64():
    return cnp.OmniNetModel(tiny_config(precision="float64"))


def identity_projection(model, d):
    """Make encode()'s domain projection the identity on the input half."""
    with torch.no_grad():
        w = torch.zeros(d, 2 * d, dtype=model.dtype)
        w[:, :d] = torch.eye(d)
        model.domain_proj.weight.copy_(w)
        model.domain_proj.bias.zero_()

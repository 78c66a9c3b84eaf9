import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from omninet.cache import CacheState, SpatioTemporalTensor, compute_gate, encode, reset
from omninet.cnp import OmniNetModel

from conftest import identity_projection, tiny_config

f64 = torch.float64


def brute_force_gate(links, scores):
    """Enumerate (call, time, space) triples and copy the matching temporal score."""
    cols = []
    offset = 0
    for t, s in links:
        for i in range(t):
            for _ in range(s if s > 1 else 0):
                cols.append(scores[..., offset + i])
        offset += t
    if not cols:
        return scores.new_zeros(*scores.shape[:-1], 0)
    return torch.stack(cols, -1)


def encode_shapes(model, shapes, d=8, domain=0):
    state = CacheState()
    for t, s in shapes:
        encode(state, SpatioTemporalTensor(torch.randn(t, s, d)), domain, model)
    return state


def test_text_input_adds_no_spatial_rows(tiny_model):
    state = encode_shapes(tiny_model, [(3, 1)])
    assert (state.R, state.P, state.links) == (3, 0, [(3, 1)])
    assert state.temporal.shape == (1, 3, 8)


def test_image_then_text(tiny_model):
    state = encode_shapes(tiny_model, [(1, 4), (2, 1)])
    assert (state.R, state.P, state.links) == (3, 4, [(1, 4), (2, 1)])
    assert state.spatial.shape == (1, 4, 8)


def test_video_rows_are_time_major():
    model = OmniNetModel(tiny_config(precision="float64"))
    identity_projection(model, 8)
    # tagged basis: x[i, j] = e_(4i + j) plus the domain embedding, which is
    # dropped by the identity projection
    x = torch.eye(8, dtype=f64).reshape(2, 4, 8)
    state = encode(CacheState(), SpatioTemporalTensor(x), 0, model)
    assert (state.R, state.P) == (2, 8)
    rows = state.spatial[0].argmax(-1).tolist()
    assert rows == list(range(8))  # frame0-pos0..3, then frame1-pos0..3


def test_domain_bounds(tiny_model):
    with pytest.raises(IndexError):
        encode(CacheState(), SpatioTemporalTensor(torch.randn(1, 1, 8)), 2, tiny_model)


def test_gate_examples():
    g = compute_gate([(2, 3)], torch.tensor([[[0.25, 0.75]]]))
    assert g.flatten().tolist() == [0.25, 0.25, 0.25, 0.75, 0.75, 0.75]
    g = compute_gate([(2, 1), (1, 3)], torch.tensor([[[0.2, 0.3, 0.5]]]))
    assert g.flatten().tolist() == [0.5, 0.5, 0.5]
    g = compute_gate([(2, 1), (3, 1)], torch.rand(2, 4, 5))
    assert g.shape == (2, 4, 0)


def test_gate_rejects_wrong_key_dimension():
    from omninet.errors import ContractError

    with pytest.raises(ContractError):
        compute_gate([(2, 3)], torch.rand(1, 1, 3))


link_lists = st.lists(st.tuples(st.integers(1, 8), st.integers(1, 8)), min_size=1, max_size=6)


@settings(max_examples=200, deadline=None)
@given(link_lists, st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_gate_matches_brute_force(links, n_h, n, seed):
    r = sum(t for t, _ in links)
    scores = torch.rand(n_h, n, r, generator=torch.Generator().manual_seed(seed))
    g = compute_gate(links, scores)
    assert g.shape == (n_h, n, sum(t * s for t, s in links if s > 1))
    assert torch.equal(g, brute_force_gate(links, scores))


@settings(max_examples=100, deadline=None)
@given(link_lists, st.integers(0, 2**31))
def test_gate_mass_per_call(links, seed):
    scores = torch.softmax(torch.randn(2, 3, sum(t for t, _ in links), generator=torch.Generator().manual_seed(seed), dtype=f64), -1)
    g = compute_gate(links, scores)
    t_off = p_off = 0
    for t, s in links:
        if s > 1:
            block = g[..., p_off : p_off + t * s].sum(-1)
            assert torch.allclose(block, s * scores[..., t_off : t_off + t].sum(-1))
            p_off += t * s
        t_off += t


@settings(max_examples=25, deadline=None)
@given(link_lists)
def test_bookkeeping_closed_forms(links):
    model = OmniNetModel(tiny_config())
    state = encode_shapes(model, links)
    assert state.links == links
    assert state.R == sum(t for t, _ in links) == state.temporal.shape[1]
    assert state.P == sum(t * s for t, s in links if s > 1)
    if state.P:
        assert state.spatial.shape[1] == state.P


def test_spatial_rows_align_with_gate_columns():
    model = OmniNetModel(tiny_config(precision="float64"))
    identity_projection(model, 8)
    links = [(2, 3), (3, 1), (1, 4), (3, 2)]
    state = CacheState()
    for k, (t, s) in enumerate(links):
        x = torch.zeros(t, s, 8, dtype=f64)
        for i in range(t):
            for j in range(s):
                x[i, j, :3] = torch.tensor([k, i, j], dtype=f64)
        encode(state, SpatioTemporalTensor(x), 0, model)
    temporal_index = {}
    r = 0
    for k, (t, _) in enumerate(links):
        for i in range(t):
            temporal_index[(k, i)] = r
            r += 1
    # scores whose value is the temporal row index
    scores = torch.arange(state.R, dtype=f64).expand(1, 1, state.R)
    gate = compute_gate(state.links, scores)[0, 0]
    spatial = state.spatial[0]
    for p in range(state.P):
        k, i, j = (int(round(v)) for v in spatial[p, :3].tolist())
        assert links[k][1] > 1 and 0 <= j < links[k][1]
        assert gate[p].item() == temporal_index[(k, i)]
    triples = [(int(round(a)), int(round(b)), int(round(c))) for a, b, c in spatial[:, :3].tolist()]
    assert [row[1:] for row in state.trace() if row[0] == "spatial"] == triples


def test_permuting_inputs_permutes_cache_rows(tiny_model):
    a = SpatioTemporalTensor(torch.randn(2, 3, 8))
    b = SpatioTemporalTensor(torch.randn(1, 4, 8))
    tiny_model.eval()
    ab = encode(encode(CacheState(), a, 0, tiny_model), b, 1, tiny_model)
    ba = encode(encode(CacheState(), b, 1, tiny_model), a, 0, tiny_model)
    assert torch.equal(ab.temporal_blocks[0], ba.temporal_blocks[1])
    assert torch.equal(ab.spatial_blocks[1], ba.spatial_blocks[0])
    assert ab.links == ba.links[::-1]


def test_reset(tiny_model):
    state = encode_shapes(tiny_model, [(2, 3), (1, 1), (4, 2)])
    reset(state)
    assert state == CacheState()
    reset(state)
    assert state == CacheState()
    encode(state, SpatioTemporalTensor(torch.randn(1, 1, 8)), 0, tiny_model)
    assert (state.R, state.P) == (1, 0)


def test_trace_dump(tiny_model):
    state = encode_shapes(tiny_model, [(1, 2), (2, 1)])
    lines = state.dump_trace().splitlines()
    assert lines == [
        "temporal\t0\t0\t-1",
        "temporal\t1\t0\t-1",
        "temporal\t1\t1\t-1",
        "spatial\t0\t0\t0",
        "spatial\t0\t0\t1",
    ]

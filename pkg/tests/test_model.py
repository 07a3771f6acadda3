import math

import numpy as np
import pytest

from conftest import micro_config, random_sequence
from sclm import numerics as nx
from sclm.gradcheck import numeric_grad, relative_error
from sclm.masks import causal_mask
from sclm.model import (EncoderInput, ModelConfig, RegistryError, assemble_inputs, connect,
                        decoder_forward, deepnorm_constants, embed_tokens, encode_span,
                        encode_spans, forward, information_flow_check, init_params,
                        semicausal_loss, sinusoid_table)
from sclm.spans import SpanLayout, target_positions, prediction_source
from sclm.textdata import BOS, PAD, VOCAB_SIZE, PackedSequence


def seq_of(ids, n=None):
    ids = np.asarray(ids, dtype=np.int64)
    return PackedSequence(ids, [(0, len(ids))])


def test_parameter_tree_names(micro_params):
    names = set(micro_params)
    assert "embed" in names and "enc.text.pos" in names and "conn.text.0.w" in names
    assert not any("out" in n or "lm_head" in n for n in names)
    assert micro_params["embed"].shape == (VOCAB_SIZE, 16)
    mlp = init_params(micro_config(connector="mlp"), seed=0)
    assert {f"conn.text.{j}.w" for j in range(3)} <= set(mlp)


def test_config_round_trip():
    cfg = micro_config(vector=True, connector="mlp")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        micro_config(d_dec=15)


def test_init_is_seeded():
    a = init_params(micro_config(), seed=3).snapshot()
    b = init_params(micro_config(), seed=3).snapshot()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_sinusoid_table():
    t = sinusoid_table(5, 4)
    assert np.allclose(t[0], [0, 1, 0, 1])
    assert np.isclose(t[3, 0], math.sin(3)) and np.isclose(t[3, 3], math.cos(3 / 100))


# -- encoder -----------------------------------------------------------------

def test_encode_span_shapes_and_errors(micro_params):
    out = encode_span(EncoderInput("text", np.array([5])), micro_params)
    assert out.shape == (1, 8)
    with pytest.raises(RegistryError):
        encode_span(EncoderInput("audio", np.array([5])), micro_params)
    with pytest.raises(nx.ShapeError):
        encode_span(EncoderInput("text", np.arange(17)), micro_params)


def test_encoder_is_bidirectional(micro_params):
    x = np.array([10, 20, 30, 40, 50])
    y = x.copy()
    y[[0, 3]] = y[[3, 0]]
    a = encode_span(EncoderInput("text", x), micro_params).data
    b = encode_span(EncoderInput("text", y), micro_params).data
    assert not np.allclose(a[0], b[0]) and not np.allclose(a[3], b[3])
    # a change at the last position reaches the first (no causal mask)
    z = x.copy()
    z[4] = 99
    c = encode_span(EncoderInput("text", z), micro_params).data
    assert not np.array_equal(a[0], c[0])


def test_zero_parameters_leave_positions_only():
    p = init_params(micro_config(), seed=0)
    for name, t in p.items():
        if name.startswith("enc.") and name != "enc.text.pos" and not name.endswith(".g"):
            t.data[...] = 0
    a = encode_span(EncoderInput("text", np.array([1, 2, 3])), p).data
    b = encode_span(EncoderInput("text", np.array([7, 8, 9, 4])), p).data
    assert np.allclose(a, b[:3], atol=1e-6)
    pos = p["enc.text.pos"].data[:3]
    ref = (pos - pos.mean(-1, keepdims=True)) / np.sqrt(pos.var(-1, keepdims=True) + 1e-5)
    assert np.allclose(a, ref, atol=1e-5)


def test_batched_encoding_matches_single(micro_params):
    spans = [np.array([1, 2, 3]), np.array([9]), np.array([4, 5, 6, 7, 8])]
    out, lengths = encode_spans(spans, "text", micro_params)
    for i, s in enumerate(spans):
        single = encode_span(EncoderInput("text", s), micro_params).data
        assert np.allclose(out.data[i, :lengths[i]], single, atol=1e-6)


def test_vector_modality_encoder():
    p = init_params(micro_config(vector=True), seed=1)
    out = encode_span(EncoderInput("vec", np.ones((4, 5))), p)
    assert out.shape == (4, 8)
    with pytest.raises(nx.ShapeError):
        encode_span(EncoderInput("vec", np.ones((4, 3))), p)


# -- connector ---------------------------------------------------------------

def test_connector_identity_and_zero():
    p = init_params(micro_config(d_dec=8, d_enc=8), seed=0)
    x = nx.tensor(np.random.default_rng(0).normal(size=(3, 8)))
    p["conn.text.0.w"].data[...] = np.eye(8)
    assert np.allclose(connect(x, p, "text").data, x.data)
    p["conn.text.0.w"].data[...] = 0
    assert np.array_equal(connect(x, p, "text").data, np.zeros((3, 8)))
    with pytest.raises(nx.ShapeError):
        connect(nx.tensor(np.ones((3, 5))), p, "text")


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_connector_gradients(kind):
    p = init_params(micro_config(connector=kind, init_std=0.3), seed=0).astype(np.float64)
    rng = np.random.default_rng(0)
    x = nx.parameter(rng.normal(size=(3, 8)), dtype=np.float64)
    w = nx.tensor(rng.normal(size=(3, 16)), dtype=np.float64)

    def build():
        return nx.total(nx.mul(connect(x, p, "text"), w))

    for t in [x] + [t for k, t in p.items() if k.startswith("conn.")]:
        p.zero_grad()
        x.zero_grad()
        build().backward()
        assert relative_error(t.grad, numeric_grad(build, t)).max() < 1e-4


# -- assembly and decoder ----------------------------------------------------

def test_empty_layout_assembly_is_gpt_input(micro_params, rng):
    seq = random_sequence(rng, 12)
    a = assemble_inputs(seq, SpanLayout(12), micro_params).data[0]
    ref = micro_params["embed"].data[seq.ids] * math.sqrt(16) + sinusoid_table(12, 16)
    assert np.allclose(a, ref, atol=1e-6)
    assert np.array_equal(a, embed_tokens(seq.ids, micro_params).data[0])


def test_span_rows_take_encoder_path(micro_params, rng):
    seq = random_sequence(rng, 12, docs=1, pad=0)
    lay = SpanLayout(12, ((4, 7),))
    a = assemble_inputs(seq, lay, micro_params).data[0]
    b = assemble_inputs(seq, SpanLayout(12), micro_params).data[0]
    differs = ~np.isclose(a, b).all(axis=1)
    assert differs.tolist() == [False] * 3 + [True] * 3 + [False] * 6


def test_two_modalities_in_one_sequence():
    p = init_params(micro_config(vector=True), seed=2)
    ids = np.array([BOS, 1, 2, 3, 4, 5, 6, 7, 8, 9])
    seq = seq_of(ids)
    lay = SpanLayout(10, ((2, 4), (6, 9)), ("text", "vec"))
    feats = {1: np.random.default_rng(0).normal(size=(3, 5))}
    x = assemble_inputs(seq, lay, p, feats)
    assert x.shape == (1, 10, 16)
    # perturbing the vector payload moves exactly the vec span rows
    feats2 = {1: feats[1] + 1.0}
    y = assemble_inputs(seq, lay, p, feats2)
    moved = ~np.isclose(x.data[0], y.data[0]).all(axis=1)
    assert np.flatnonzero(moved).tolist() == [5, 6, 7]
    with pytest.raises(nx.ShapeError):
        assemble_inputs(seq, lay, p, None)


def test_spans_are_encoded_independently(micro_params):
    ids = np.array([BOS, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11])
    lay = SpanLayout(12, ((2, 5), (7, 10)))
    a = assemble_inputs(seq_of(ids), lay, micro_params).data[0]
    ids2 = ids.copy()
    ids2[2] = 77
    b = assemble_inputs(seq_of(ids2), lay, micro_params).data[0]
    assert np.array_equal(a[6:9], b[6:9])
    assert not np.array_equal(a[1:4], b[1:4])


def test_assembly_shape_checks(micro_params):
    with pytest.raises(nx.ShapeError):
        assemble_inputs(seq_of([BOS, 1, 2, 3]), SpanLayout(5), micro_params)


def test_decoder_shapes_and_limits(micro_params):
    out = decoder_forward(embed_tokens(np.array([BOS]), micro_params), micro_params)
    assert out.shape == (1, 1, VOCAB_SIZE)
    with pytest.raises(nx.ShapeError):
        decoder_forward(embed_tokens(np.zeros(33, dtype=np.int64), micro_params), micro_params)
    x = embed_tokens(np.random.default_rng(0).integers(0, 256, size=(2, 20)), micro_params)
    assert np.isfinite(decoder_forward(x, micro_params).data).all()


def test_decoder_is_causal(micro_params, rng):
    seq = random_sequence(rng, 16, pad=0)
    base = forward(seq, SpanLayout(16), micro_params).data[0]
    for q in range(16):
        ids = seq.ids.copy()
        ids[q] = (ids[q] + 1) % 256
        out = forward(seq_of(ids), SpanLayout(16), micro_params).data[0]
        moved = np.flatnonzero(~(out == base).all(axis=1))
        assert moved.min() >= q and q in moved


def test_weight_tying(micro_params):
    ids = np.array([BOS, 5, 6, 7])
    lay = SpanLayout(4)
    before = forward(seq_of(ids), lay, micro_params).data[0]
    micro_params["embed"].data[9] += 0.5  # token 9 is not in the input
    after = forward(seq_of(ids), lay, micro_params).data[0]
    changed_cols = np.flatnonzero(~np.isclose(before, after).all(axis=0))
    assert changed_cols.tolist() == [9]
    micro_params["embed"].data[5] += 0.5  # token 5 is in the input
    again = forward(seq_of(ids), lay, micro_params).data[0]
    assert not np.array_equal(again[:, :5], after[:, :5])


def test_deepnorm_runs_and_scales():
    alpha, beta = deepnorm_constants(2)
    assert np.isclose(alpha, 4 ** 0.25) and np.isclose(beta, 16 ** -0.25)
    p = init_params(micro_config(dec_layers=2, deepnorm=True), seed=0)
    plain = init_params(micro_config(dec_layers=2), seed=0)
    assert np.isclose(p["dec.0.attn.v.w"].data.std() / plain["dec.0.attn.v.w"].data.std(), beta)
    out = forward(seq_of([BOS, 1, 2, 3]), SpanLayout(4, ((2, 4),)), p)
    assert np.isfinite(out.data).all()


# -- loss --------------------------------------------------------------------

def brute_force_loss(logits, ids, layout):
    terms = []
    for t in target_positions(layout):
        if ids[t - 1] == PAD:
            continue
        row = logits[prediction_source(layout, t) - 1].astype(np.float64)
        z = math.log(sum(math.exp(v - row.max()) for v in row)) + row.max()
        terms.append(z - row[ids[t - 1]])
    return sum(terms) / len(terms)


def test_loss_matches_hand_enumeration(micro_params):
    ids = np.array([BOS, 11, 12, 13, 14, 15, 16, 17])
    lay = SpanLayout(8, ((4, 6),))
    logits = forward(seq_of(ids), lay, micro_params).data[0]
    loss = semicausal_loss(seq_of(ids), lay, micro_params).item()
    # T = {2,3,4,6,7,8}; x6 from decoder position 5
    lp = nx.log_softmax(logits.astype(np.float64))
    manual = -np.mean([lp[0, 11], lp[1, 12], lp[2, 13], lp[4, 15], lp[5, 16], lp[6, 17]])
    assert abs(loss - manual) < 1e-5
    assert abs(loss - brute_force_loss(logits, ids, lay)) < 1e-5


def test_empty_layout_loss_is_causal_loss(micro_params, rng):
    seq = random_sequence(rng, 20)
    loss = semicausal_loss(seq, SpanLayout(20), micro_params)
    logits = decoder_forward(embed_tokens(seq.ids, micro_params), micro_params).data[0]
    keep = seq.ids[1:] != PAD
    ref = nx.cross_entropy(nx.tensor(logits[:-1][keep]), seq.ids[1:][keep])
    assert loss.data.tobytes() == ref.data.tobytes()


def test_loss_shift_invariance(micro_params, rng):
    seq = random_sequence(rng, 16, pad=0)
    lay = SpanLayout(16, ((3, 6),))
    logits = forward(seq, lay, micro_params).data[0].astype(np.float64)
    a = brute_force_loss(logits, seq.ids, lay)
    b = brute_force_loss(logits + 123.0, seq.ids, lay)
    assert abs(a - b) < 1e-9
    assert abs(a - semicausal_loss(seq, lay, micro_params).item()) < 1e-5


def test_loss_without_targets_raises(micro_params):
    seq = PackedSequence(np.array([BOS] + [PAD] * 7), [(0, 1), (1, 8)])
    with pytest.raises(nx.ContractError):
        semicausal_loss(seq, SpanLayout(8), micro_params)


def test_score_mask_restricts_targets(micro_params):
    ids = np.array([BOS, 1, 2, 3, 4, 5])
    mask = np.array([0, 0, 0, 0, 1, 1], bool)
    logits = forward(seq_of(ids), SpanLayout(6), micro_params).data[0]
    lp = nx.log_softmax(logits.astype(np.float64))
    ref = -(lp[3, 4] + lp[4, 5]) / 2
    got = semicausal_loss(seq_of(ids), SpanLayout(6), micro_params, score_masks=mask).item()
    assert abs(got - ref) < 1e-5


# -- information flow --------------------------------------------------------

def test_flow_empty_layout_is_causal(micro_params, rng):
    seq = random_sequence(rng, 12)
    rep = information_flow_check(seq, SpanLayout(12), micro_params)
    assert rep.ok
    assert np.array_equal(rep.moved, causal_mask(12).allow)


def test_flow_span_perturbation(micro_params):
    ids = np.array([BOS, 1, 2, 3, 4, 5, 6, 7, 8, 9])
    lay = SpanLayout(10, ((3, 6),))
    rep = information_flow_check(seq_of(ids), lay, micro_params)
    assert rep.ok
    # interior position 4 (0-based 3) moves every same-span output and everything later
    assert np.flatnonzero(rep.moved[:, 3]).tolist() == list(range(2, 10))
    # no future perturbation moves an earlier logit outside the span
    q, k = np.indices((10, 10))
    assert not rep.moved[(k > q) & (rep.allowed == 0)].any()


def test_flow_vector_modality():
    p = init_params(micro_config(vector=True), seed=4)
    seq = seq_of(np.array([BOS, 1, 2, 3, 4, 5, 6, 7]))
    lay = SpanLayout(8, ((3, 6),), ("vec",))
    rep = information_flow_check(seq, lay, p, {0: np.ones((3, 5))})
    assert rep.ok and rep.moved[2, 4]


def test_flow_check_limits_size(micro_params):
    with pytest.raises(ValueError):
        information_flow_check(seq_of(np.zeros(65, dtype=np.int64)), SpanLayout(65), micro_params)


def test_end_to_end_gradients_sampled():
    cfg = micro_config(dec_layers=1, enc_layers=1, d_dec=8, d_enc=4, init_std=0.3)
    p = init_params(cfg, seed=0).astype(np.float64)
    ids = np.array([BOS, 3, 4, 5, 6, 7, 8, 9])
    lay = SpanLayout(8, ((3, 6),))

    def build():
        return semicausal_loss(seq_of(ids), lay, p)

    p.zero_grad()
    build().backward()
    rng = np.random.default_rng(0)
    for name, t in p.items():
        idx = rng.choice(t.data.size, size=min(4, t.data.size), replace=False)
        num = numeric_grad(build, t, index=idx)
        assert relative_error(t.grad, num).max() < 1e-3, name

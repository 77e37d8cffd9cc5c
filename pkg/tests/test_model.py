import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stormcast.autograd import ShapeError, Tensor, gradcheck, no_grad
from stormcast.model import (
    HEAD_NODES,
    NODE_ORDER,
    Block,
    ModelConfig,
    UNetPP,
    block_parameter_count,
    count_parameters,
    in_edges,
    node_in_channels,
    plain_block,
    residual_block,
)

M_TABLE = {(0, 0): 10, (1, 0): 16, (2, 0): 32, (3, 0): 64, (0, 1): 48,
           (1, 1): 96, (2, 1): 192, (0, 2): 64, (1, 2): 128, (0, 3): 80}


def closed_form_block(variant, m, n):
    # fusion (m*n + n) + two 3x3 convs with bias + two bn affine pairs
    if variant == "runetpp":
        return m * n + 18 * n * n + 7 * n
    return 9 * m * n + 9 * n * n + 6 * n


def closed_form_model(variant, bw=16):
    total = 3 * (bw + 1)
    for (i, j), m in M_TABLE.items():
        m = m if (i, j) == (0, 0) else m * bw // 16
        total += closed_form_block(variant, m, bw * 2 ** i)
    return total


def zero_all(blk):
    for t in blk.params.values():
        t.data[...] = 0.0


# ---------------------------------------------------------------- topology


def test_m_table():
    assert {n: node_in_channels(*n, 16, 10) for n in NODE_ORDER} == M_TABLE


def test_node_and_head_counts():
    assert len(NODE_ORDER) == 10 and len(HEAD_NODES) == 3
    assert len(in_edges(0, 3)) == 4
    assert len(in_edges(3, 0)) == 1


def test_node_order_is_topological():
    seen = set()
    for node in NODE_ORDER:
        for kind, src in in_edges(*node):
            if src is not None:
                assert src in seen, (node, kind, src)
        seen.add(node)


def test_upsampled_input_is_last():
    for i, j in NODE_ORDER:
        kinds = [k for k, _ in in_edges(i, j)]
        if j > 0:
            assert kinds[-1] == "up" and all(k == "skip" for k in kinds[:-1])
            assert [s[1] for k, s in in_edges(i, j) if k == "skip"] == list(range(j))


def test_variant_parity():
    a, b = UNetPP(ModelConfig("runetpp", 4)), UNetPP(ModelConfig("unetpp", 4))
    assert a.blocks.keys() == b.blocks.keys()
    for node in a.blocks:
        assert (a.blocks[node].m, a.blocks[node].n) == (b.blocks[node].m, b.blocks[node].n)


# ---------------------------------------------------------------- shapes


def test_three_heads_training_one_inference():
    model = UNetPP(ModelConfig(base_width=4))
    x = Tensor(np.random.default_rng(0).random((2, 10, 32, 32)))
    heads = model(x, training=True)
    assert sorted(heads) == ["y01", "y02", "y03"]
    assert all(h.shape == (2, 1, 32, 32) for h in heads.values())
    with no_grad():
        inf = model(x, training=False)
    assert list(inf) == ["y03"]


def test_full_tile_shape():
    # batch size is independent of the per-sample computation; two samples suffice
    model = UNetPP(ModelConfig(base_width=16))
    x = np.random.default_rng(1).random((2, 10, 160, 144))
    model(Tensor(x), training=True)  # populate running stats
    with no_grad():
        out = model(Tensor(x), training=False)["y03"]
    assert out.shape == (2, 1, 160, 144)


@pytest.mark.parametrize("shape", [(1, 10, 20, 16), (1, 10, 16, 12), (1, 9, 16, 16)])
def test_bad_input_shape(shape):
    with pytest.raises(ShapeError):
        UNetPP(ModelConfig(base_width=2))(Tensor(np.zeros(shape)))


@pytest.mark.parametrize("variant", ["runetpp", "unetpp"])
def test_block_full_tile_shape(variant):
    blk = Block(variant, 48, 16)
    fn = residual_block if variant == "runetpp" else plain_block
    assert fn(Tensor(np.random.default_rng(0).random((2, 48, 160, 144))), blk, True).shape == (2, 16, 160, 144)


@pytest.mark.parametrize("variant", ["runetpp", "unetpp"])
def test_zero_weights_give_zero(variant):
    blk = Block(variant, 6, 4)
    zero_all(blk)
    fn = residual_block if variant == "runetpp" else plain_block
    out = fn(Tensor(np.random.default_rng(0).random((2, 6, 8, 8))), blk, True)
    assert not out.data.any()


def test_block_width_mismatch():
    with pytest.raises(ShapeError):
        residual_block(Tensor(np.zeros((1, 5, 8, 8))), Block("runetpp", 6, 4), True)


# ---------------------------------------------------------------- parameter counts


def test_single_head_like_conv_count():
    blk = Block("runetpp", 10, 16)
    assert blk.params["fusion.weight"].data.size + blk.params["fusion.bias"].data.size == 176


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.sampled_from(["runetpp", "unetpp"]))
def test_block_count_matches_closed_form(m, n, variant):
    assert block_parameter_count(variant, m, n) == closed_form_block(variant, m, n)


def test_plain_smaller_at_equal_widths():
    assert block_parameter_count("unetpp", 16, 16) == 4704
    assert block_parameter_count("runetpp", 16, 16) == 4976
    assert block_parameter_count("unetpp", 16, 16) < block_parameter_count("runetpp", 16, 16)


@pytest.mark.parametrize("variant,expected", [("runetpp", 552_499), ("unetpp", 561_555)])
def test_model_count_matches_oracle(variant, expected):
    assert closed_form_model(variant) == expected
    assert count_parameters(UNetPP(ModelConfig(variant, 16))) == expected


def test_width_8_count():
    assert count_parameters(UNetPP(ModelConfig("runetpp", 8))) == closed_form_model("runetpp", 8) == 138_907


# ---------------------------------------------------------------- initialization


def test_same_seed_bit_identical():
    a, b = UNetPP(ModelConfig(base_width=4, seed=3)), UNetPP(ModelConfig(base_width=4, seed=3))
    for (na, ta), (nb, tb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    c = UNetPP(ModelConfig(base_width=4, seed=4))
    assert not np.array_equal(a.blocks[(0, 0)].params["conv1.weight"].data,
                              c.blocks[(0, 0)].params["conv1.weight"].data)


def test_init_statistics():
    model = UNetPP(ModelConfig(base_width=16))
    w = model.blocks[(1, 0)].params["conv1.weight"].data  # 32x32x3x3, fan-in 288
    assert abs(w.std() / np.sqrt(2 / 288) - 1) < 0.1
    w16 = np.concatenate([model.blocks[(0, j)].params["conv2.weight"].data.ravel() for j in range(4)])
    assert abs(w16.std() / np.sqrt(2 / 144) - 1) < 0.1
    for name, t in model.named_parameters():
        if name.endswith(".bias"):
            assert not t.data.any()
        if name.endswith(".gamma"):
            assert (t.data == 1).all()
        if name.endswith(".beta"):
            assert not t.data.any()


def test_zero_head_weights_zero_logits():
    model = UNetPP(ModelConfig(base_width=2))
    for head in model.heads.values():
        head["weight"].data[...] = 0.0
    heads = model(Tensor(np.random.default_rng(0).random((2, 10, 8, 8))))
    assert all(not h.data.any() for h in heads.values())


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("variant", ["runetpp", "unetpp"])
def test_block_gradcheck(variant):
    rng = np.random.default_rng(5)
    blk = Block(variant, 3, 2)
    for t in blk.params.values():
        t.data[...] = rng.normal(size=t.shape)
    fn = residual_block if variant == "runetpp" else plain_block
    x = Tensor(rng.normal(size=(2, 3, 6, 6)), requires_grad=True)
    errs = gradcheck(lambda x, *ps: fn(x, blk, True), [x, *blk.params.values()], eps=1e-5)
    assert max(errs) < 1e-4


def test_full_model_gradcheck_sample():
    model = UNetPP(ModelConfig(base_width=2, seed=1))
    rng = np.random.default_rng(2)
    x = Tensor(rng.random((1, 10, 16, 16)))
    params = model.parameters()
    # 50 scalar parameters drawn across the whole model
    flat = [(k, i) for k, p in enumerate(params) for i in range(p.data.size)]
    picks = [flat[j] for j in rng.choice(len(flat), 50, replace=False)]
    by_param: dict[int, list[int]] = {}
    for k, i in picks:
        by_param.setdefault(k, []).append(i)
    chosen = sorted(by_param)

    def fn(*ps):
        heads = model(x, training=True)
        return heads["y01"] + heads["y02"] + heads["y03"]

    errs = gradcheck(fn, [params[k] for k in chosen], eps=1e-5,
                     indices={q: np.array(by_param[k]) for q, k in enumerate(chosen)})
    assert len(errs) == len(chosen)
    assert max(errs) < 1e-3

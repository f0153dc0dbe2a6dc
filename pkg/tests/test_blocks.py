import numpy as np
import pytest

from oracles import KinkWatch, checked_instances
from robustcnn import tensor as T
from robustcnn.blocks import (
    FULL,
    BlockKind,
    BlockSpec,
    NormActPlacement,
    build_block,
    conv_sequence,
    expansion_conv_index,
    optimal_placement,
    parse_descriptor,
)
from robustcnn.gradcheck import grad_check, numeric_grad, relative_error
from robustcnn.layers import Initializer
from robustcnn.tensor import Tensor

KINDS = [BlockKind.DW, BlockKind.INVERTED_DW, BlockKind.UP_INVERTED_DW, BlockKind.DOWN_INVERTED_DW]


def high_init(seed=0):
    return Initializer(np.random.default_rng(seed), T.HIGH)


@pytest.mark.parametrize(
    "kind,seq",
    [
        (BlockKind.DW, [(32, 8, 1), (8, 8, 8), (8, 32, 1)]),
        (BlockKind.INVERTED_DW, [(8, 32, 1), (32, 32, 32), (32, 8, 1)]),
        (BlockKind.UP_INVERTED_DW, [(8, 8, 8), (8, 32, 1), (32, 8, 1)]),
        (BlockKind.DOWN_INVERTED_DW, [(8, 32, 1), (32, 8, 1), (8, 8, 8)]),
    ],
)
def test_conv_sequences(kind, seq):
    cin = 32 if kind is BlockKind.DW else 8
    got = [(p.in_channels, p.out_channels, p.groups) for p in conv_sequence(kind, cin, 8, 7, 1)]
    assert got == seq


def test_optimal_placement_table():
    assert {k: expansion_conv_index(k) for k in KINDS} == {
        BlockKind.DW: 3,
        BlockKind.INVERTED_DW: 1,
        BlockKind.UP_INVERTED_DW: 2,
        BlockKind.DOWN_INVERTED_DW: 1,
    }
    assert optimal_placement("DW").name == "Norm1Act3"
    assert optimal_placement("up-inverted-dw").name == "Norm1Act2"
    assert optimal_placement(BlockKind.INVERTED_DW).name == "Norm1Act1"
    assert optimal_placement(BlockKind.DOWN_INVERTED_DW).name == "Norm1Act1"


@pytest.mark.parametrize("kind", KINDS)
def test_norm_act_counts(kind):
    full = build_block(BlockSpec(kind, 8, 3), init=high_init())
    reduced = build_block(BlockSpec(kind, 8, 3, placement=optimal_placement(kind)), init=high_init())
    assert (full.norm_count, full.act_count) == (3, 3)
    assert (reduced.norm_count, reduced.act_count) == (1, 1)
    names = [name for name, _ in reduced.branch.children()]
    i = expansion_conv_index(kind)
    assert names.index("norm1") == names.index("conv1") + 1
    assert names.index(f"act{i}") > names.index(f"conv{i}")


def test_shape_examples():
    blk = build_block(BlockSpec(BlockKind.UP_INVERTED_DW, 96, 7), init=Initializer())
    shape = blk.trace((1, 96, 56, 56), "b", [])
    assert shape == (1, 96, 56, 56)
    assert blk.shortcut is None

    blk = build_block(BlockSpec(BlockKind.DW, 96, 3, stride=2), in_channels=384, init=Initializer())
    assert blk.trace((1, 384, 56, 56), "b", []) == (1, 384, 28, 28)
    assert blk.shortcut is not None


@pytest.mark.parametrize("kind", KINDS)
def test_small_forward_matches_trace(kind, rng):
    spec = BlockSpec(kind, 4, 5, stride=2, placement=optimal_placement(kind))
    cin = 16 if kind is BlockKind.DW else 4
    blk = build_block(spec, in_channels=cin, init=high_init())
    x = Tensor(rng.standard_normal((2, cin, 8, 8)), dtype=T.HIGH)
    assert blk(x).shape == blk.trace(x.shape, "b", [])


@pytest.mark.parametrize("kind", KINDS)
def test_zero_branch_is_identity(kind, rng):
    spec = BlockSpec(kind, 4, 3, placement=optimal_placement(kind), drop_path=0.0)
    blk = build_block(spec, init=high_init(), zero_init_last=True)
    x = Tensor(rng.standard_normal((2, spec.out_channels, 6, 6)), dtype=T.HIGH)
    np.testing.assert_array_equal(blk(x).data, x.data)


def test_spec_validation():
    for bad in (dict(kernel=4), dict(stride=3), dict(width=0)):
        with pytest.raises(ValueError):
            BlockSpec(BlockKind.DW, **{"width": 8, **bad})
    with pytest.raises(ValueError):
        NormActPlacement(4, 1)


def test_descriptor_roundtrip():
    spec = BlockSpec(BlockKind.UP_INVERTED_DW, 96, 11, 2, NormActPlacement(1, 2))
    text = spec.descriptor()
    assert text == "UpInvertedDW:w96:k11:s2:norm1:act2"
    assert parse_descriptor(text) == spec
    assert parse_descriptor("DW:w8:k3:s1:normall:actall").placement == FULL
    with pytest.raises(ValueError):
        parse_descriptor("DW:w8:k3")


def test_placement_parse():
    assert NormActPlacement.parse("Norm1Act3") == NormActPlacement(1, 3)
    assert NormActPlacement.parse("full") == FULL


def _instance(kind, seed, dtype=T.HIGH, width=2, hw=4):
    r = np.random.default_rng(seed)
    spec = BlockSpec(kind, width, 3, stride=1 + seed % 2, placement=optimal_placement(kind), drop_path=0.0)
    cin = 4 * width if kind is BlockKind.DW else width
    blk = build_block(spec, in_channels=cin, init=Initializer(np.random.default_rng(seed), dtype))
    x = Tensor(r.standard_normal((2, cin, hw, hw)), dtype=dtype)
    probe = Tensor(r.standard_normal(blk.trace(x.shape, "b", [])), dtype=dtype)
    return blk, x, probe


@pytest.mark.parametrize("kind", KINDS)
def test_block_gradcheck(kind):
    results = checked_instances(lambda s: _instance(kind, s), 20, h=1e-3, richardson=True)
    worst = max(r.max_rel_err for r in results)
    assert worst < 1e-6, worst


def test_block_gradients_standard_precision():
    """Float32 backward of a full block on 2x8x8x8 inputs within 1e-3 of the true gradient.

    In float32 a finite difference is too noisy to serve as the reference, so
    the reference is taken on an exact float64 twin of the same block.
    """
    checked, seed = 0, 0
    while checked < 5:
        blk32, x32, probe32 = _instance(BlockKind.UP_INVERTED_DW, seed, T.STANDARD, width=8, hw=8)
        blk64, x64, probe64 = _instance(BlockKind.UP_INVERTED_DW, seed, T.HIGH, width=8, hw=8)
        seed += 1
        for p32, p64 in zip(blk32.parameters(), blk64.parameters()):
            p64.data[...] = p32.data
        x64.data[...] = x32.data
        probe64.data[...] = probe32.data

        x32.requires_grad = True
        got = T.backward(T.tensor_sum(T.mul(blk32(x32), probe32)))[x32]
        f = lambda: T.tensor_sum(T.mul(blk64(x64), probe64))  # noqa: E731
        with KinkWatch() as watch:
            with T.no_grad():
                f()
            watch.mark()
            ref = numeric_grad(f, x64, 1e-3, richardson=True)
        if watch.crossed:
            continue
        assert relative_error(got.astype(np.float64), ref).max() < 1e-3
        checked += 1
    assert seed < 20

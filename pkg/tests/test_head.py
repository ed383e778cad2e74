import numpy as np
import pytest

from chrnn import head
from chrnn.tensor import ContractError, ShapeError, gradcheck


def test_concat_order_and_width(rng):
    a = np.full((2, 1, 1, 3), 1.0)
    b = np.full((2, 2, 2, 3), 2.0)
    H = head.concat_scales([a, b])
    assert H.shape == (2, 15)
    assert H[0, :3].tolist() == [1, 1, 1] and np.all(H[:, 3:] == 2)
    g = rng.normal(size=(1, 2, 3, 2))
    # row-major cells: r outer, c inner
    assert head.concat_scales([g])[0].tolist() == [v for r in range(2) for c in range(3) for v in g[0, r, c]]
    full = [np.zeros((1, r, r, 256)) for r in (1, 2, 3, 6)]
    assert head.concat_scales(full).shape[1] == 12_800
    single = np.arange(4.0).reshape(1, 1, 1, 4)
    np.testing.assert_array_equal(head.concat_scales([single])[0], [0, 1, 2, 3])
    with pytest.raises(ContractError):
        head.concat_scales([a, None])
    parts = head.split_scales(head.concat_scales([a, b]), [a.shape, b.shape])
    np.testing.assert_array_equal(parts[1], b)


def test_head_forward_basics(rng):
    p = head.init_head_params(rng, 6, (5, 4), 3, np.float64)
    assert head.n_hidden_layers(p) == 2
    p["head.out.W"][:] = 0
    probs, _ = head.head_forward(rng.normal(size=(4, 6)), p)
    np.testing.assert_allclose(probs, 1 / 3)
    p1 = head.init_head_params(rng, 2, (), 2, np.float64)
    p1["head.out.W"][:] = 0
    assert head.head_forward(np.ones((1, 2)), p1)[0].tolist() == [[0.5, 0.5]]
    with pytest.raises(ShapeError):
        head.head_forward(np.ones((1, 7)), head.init_head_params(rng, 6, (5,), 3))


def test_probabilities_normalized(rng):
    p = head.init_head_params(rng, 10, (8, 8), 5, np.float64)
    probs, _ = head.head_forward(rng.normal(size=(16, 10)) * 50, p)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(1), 1, atol=1e-6)


def test_head_gradcheck_with_dropout(rng):
    p = head.init_head_params(rng, 7, (6, 5), 4, np.float64)
    for k in p:
        if k.endswith(".b"):
            p[k] += 0.1
    p["H"] = rng.normal(size=(3, 7))
    y = np.array([0, 3, 1])
    masks = [(rng.random((3, 6)) > 0.5) * 2.0, (rng.random((3, 5)) > 0.5) * 2.0]

    def f():
        probs, _ = head.head_forward(p["H"], p, masks)
        return float(np.mean(-np.log(probs[np.arange(3), y])))

    probs, cache = head.head_forward(p["H"], p, masks)
    dH, g = head.head_loss_backward(probs, y, cache, p)
    g["H"] = dH
    rep = gradcheck(f, p, g)
    assert rep.passed, rep

import numpy as np
import pytest

from pbbn import model as M
from pbbn.layers import Conv3DSpec
from pbbn.model import PbbnConfig, build, closed_form_params, count_params, describe, summarize

PUBLISHED = {
    (2, 2, False): 437442, (2, 3, False): 1975170, (2, 4, False): 5934210,
    (3, 2, False): 1619650, (3, 3, False): 7583362, (3, 4, False): 23243650,
    (2, 2, True): 58178, (3, 3, True): 455170,
}

# Block, layer, filters, stride, output of the two-pyramid two-branch listing; the
# max-pool output is 96x96x4x64 (the pool halves the temporal extent, 7 -> 4).
TABLE_P2B2 = [
    ("Input", "3DConv", "3×3×3×3×64", "1×1×2", "96×96×7×64"),
    ("Input", "BN", "-", "-", "96×96×7×64"),
    ("Input", "ReLU", "-", "-", "96×96×7×64"),
    ("Input", "MaxPool", "3×3×3", "1×1×2", "96×96×4×64"),
    ("P1-B1", "3DConv", "1×1×3×64×64", "2×2×1", "48×48×4×64"),
    ("P1-B1", "BN", "-", "-", "48×48×4×64"),
    ("P1-B2", "3DConv", "3×3×3×64×64", "1×1×1", "96×96×4×64"),
    ("P1-B2", "BN", "-", "-", "96×96×4×64"),
    ("P1-B2", "ReLU", "-", "-", "96×96×4×64"),
    ("P1-B2", "3DConv", "1×1×3×64×64", "2×2×1", "48×48×4×64"),
    ("P1-B2", "BN", "-", "-", "48×48×4×64"),
    ("Add", "ADD", "-", "-", "48×48×4×64"),
    ("Add", "ReLU", "-", "-", "48×48×4×64"),
    ("P2-B1", "3DConv", "1×1×3×64×128", "2×2×1", "24×24×4×128"),
    ("P2-B1", "BN", "-", "-", "24×24×4×128"),
    ("P2-B2", "3DConv", "3×3×3×64×128", "1×1×1", "48×48×4×128"),
    ("P2-B2", "BN", "-", "-", "48×48×4×128"),
    ("P2-B2", "ReLU", "-", "-", "48×48×4×128"),
    ("P2-B2", "3DConv", "1×1×3×128×128", "2×2×1", "24×24×4×128"),
    ("P2-B2", "BN", "-", "-", "24×24×4×128"),
    ("Add", "ADD", "-", "-", "24×24×4×128"),
    ("Add", "ReLU", "-", "-", "24×24×4×128"),
    ("Output", "AvgPool", "24×24×4", "-", "1×1×1×128"),
    ("Output", "FC", "1×128", "-", "2"),
]

SMALL = dict(base_channels=4, input_h=16, input_w=16, frames=5, channels=1)


def rows(cfg):
    return [(r.block, r.kind, r.filters, r.stride, "×".join(map(str, r.output)))
            for r in count_params(cfg).rows]


def test_p2b2_layer_listing():
    assert rows(PbbnConfig(2, 2)) == TABLE_P2B2


def test_dws_replaces_branch_convs_only():
    std, dws = rows(PbbnConfig(2, 2)), rows(PbbnConfig(2, 2, dws=True))
    assert dws[:4] == std[:4]
    kinds = [r[1] for r in dws]
    assert "3DConv" not in kinds[4:]
    assert kinds.count("DWConv") == kinds.count("PWConv") == 6
    # depthwise then BN, ReLU, pointwise for the first conv of P1-B1
    assert dws[4:8] == [("P1-B1", "DWConv", "1×1×3×64", "2×2×1", "48×48×4×64"),
                        ("P1-B1", "BN", "-", "-", "48×48×4×64"),
                        ("P1-B1", "ReLU", "-", "-", "48×48×4×64"),
                        ("P1-B1", "PWConv", "1×1×1×64×64", "1×1×1", "48×48×4×64")]


def test_smallest_member():
    cfg = PbbnConfig(1, 1, **SMALL)
    names = [e.name for e in describe(cfg).entries()]
    assert names == ["input.conv", "input.bn", "input.relu", "input.pool", "p1.b1.conv1",
                     "p1.b1.bn1", "p1.relu", "output.pool", "output.fc"]
    spec = describe(cfg).pyramids[0][0][0].spec
    assert (spec.kernel, spec.stride) == ((1, 1, 3), (2, 2, 1))


@pytest.mark.parametrize("key,total", list(PUBLISHED.items()), ids=lambda v: str(v))
def test_published_counts(key, total):
    p, b, dws = key
    cfg = PbbnConfig(p, b, dws=dws)
    assert count_params(cfg).total == total
    assert closed_form_params(cfg) == total


@pytest.mark.parametrize("key", [(2, 2, False), (2, 2, True), (3, 3, True), (2, 3, False)])
def test_built_model_count_matches(key):
    p, b, dws = key
    model = M.Model(PbbnConfig(p, b, dws=dws))
    assert model.num_params == count_params(model).total == PUBLISHED[key]


@pytest.mark.parametrize("p", [1, 2, 3])
@pytest.mark.parametrize("b", [1, 2, 3, 4])
@pytest.mark.parametrize("dws", [False, True])
def test_closed_form_cross_check(p, b, dws):
    cfg = PbbnConfig(p, b, dws=dws)
    assert count_params(cfg).total == closed_form_params(cfg)


@pytest.mark.parametrize("dws", [False, True])
def test_count_monotone(dws):
    c = {(p, b): count_params(PbbnConfig(p, b, dws=dws)).total for p in (1, 2, 3) for b in (1, 2, 3, 4)}
    for p in (1, 2, 3):
        for b in (1, 2, 3):
            assert c[p, b + 1] > c[p, b]
    for p in (1, 2):
        for b in (1, 2, 3, 4):
            assert c[p + 1, b] > c[p, b]


@pytest.mark.parametrize("p", [1, 2, 3])
@pytest.mark.parametrize("b", [2, 3, 4])
def test_dws_shrinks(p, b):
    assert count_params(PbbnConfig(p, b, dws=True)).total < count_params(PbbnConfig(p, b)).total


def test_report_total_is_row_sum():
    rep = count_params(PbbnConfig(3, 2))
    assert rep.total == sum(r.params for r in rep.rows)


@pytest.mark.parametrize("p", [1, 2, 3])
def test_pyramid_law(p):
    cfg = PbbnConfig(3, 2)
    d = describe(cfg)
    h, w, t, _ = d.shapes["input.pool"]
    assert d.shapes[f"p{p}.relu"] == (h // 2 ** p, w // 2 ** p, t, 64 * 2 ** (p - 1))


@pytest.mark.parametrize("p,b,dws", [(1, 1, False), (1, 3, True), (2, 2, False), (2, 2, True),
                                     (3, 2, False)])
def test_forward_trace_matches_descriptor(p, b, dws):
    cfg = PbbnConfig(p, b, dws=dws, **{**SMALL, "input_h": 24, "input_w": 24})
    trace = []
    probs = build(cfg, seed=1).forward(np.zeros((2, *cfg.input_shape), np.float32), trace=trace)
    assert probs.shape == (2, 2)
    shapes = describe(cfg).shapes
    assert [name for name, _ in trace] == list(shapes)
    assert all(shape == shapes[name] for name, shape in trace)


def test_branch_shape_disagreement_is_an_error(monkeypatch):
    original = M._branch_entries

    def skewed(cfg, p, l):
        entries = original(cfg, p, l)
        if l == 2:
            last = [e for e in entries if isinstance(e.spec, Conv3DSpec)][-1]
            s = last.spec
            last.spec = Conv3DSpec(s.kh, s.kw, s.kt, s.c_in, s.c_out)  # drop the stride
        return entries

    monkeypatch.setattr(M, "_branch_entries", skewed)
    with pytest.raises(ValueError, match="disagree"):
        describe(PbbnConfig(1, 2, **SMALL))


def test_zero_input_gives_even_odds():
    cfg = PbbnConfig(2, 2, **SMALL)
    probs = build(cfg, seed=3).forward(np.zeros((1, *cfg.input_shape)))
    assert probs.tolist() == [[0.5, 0.5]]


def test_identical_rows_identical_outputs():
    cfg = PbbnConfig(2, 2, dws=True, **SMALL)
    x = np.random.default_rng(0).random((1, *cfg.input_shape)).astype(np.float32)
    probs = build(cfg, seed=3).forward(np.concatenate([x, x]))
    assert np.array_equal(probs[0], probs[1])
    assert np.allclose(probs.sum(axis=1), 1)


def test_infer_forward_is_pure():
    cfg = PbbnConfig(2, 2, dws=True, **SMALL)
    model = build(cfg, seed=4)
    before = [(n, a.copy()) for n, a in model.state()]
    x = np.random.default_rng(1).random((2, *cfg.input_shape))
    p1 = model.forward(x, mode="infer")
    p2 = model.forward(x, mode="infer")
    assert np.array_equal(p1, p2)
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(before, model.state()))


def test_train_forward_updates_running_stats():
    cfg = PbbnConfig(1, 2, **SMALL)
    model = build(cfg, seed=4)
    model.forward(np.random.default_rng(1).random((2, *cfg.input_shape)), mode="train")
    assert not np.all(dict(model.named_buffers())["input.bn.running_mean"] == 0)


def test_forward_shape_mismatch():
    cfg = PbbnConfig(1, 1, **SMALL)
    with pytest.raises(ValueError):
        build(cfg).forward(np.zeros((1, 16, 16, 4, 1)))


def test_config_validation():
    with pytest.raises(ValueError):
        PbbnConfig(3, 2, input_h=23, input_w=96)  # needs >= 24 for three pyramids
    with pytest.raises(ValueError):
        PbbnConfig(0, 2)
    PbbnConfig(3, 2, input_h=24, input_w=24)


def test_config_text_round_trip():
    cfg = PbbnConfig(3, 4, dws=True, base_channels=8, input_h=40, input_w=32, frames=10, channels=1)
    text = cfg.to_text()
    assert text.splitlines()[:8] == ["pyramids=3", "branches=4", "dws=1", "base_channels=8",
                                     "input_h=40", "input_w=32", "frames=10", "channels=1"]
    assert PbbnConfig.from_text(text) == cfg


def test_config_text_rejects_unknown_key():
    with pytest.raises(ValueError):
        PbbnConfig.from_text("pyramids=2\nwidth=3\n")


def test_summary_first_row_and_footer():
    text = summarize(PbbnConfig(2, 2))
    first = text.splitlines()[3].split()
    assert first == ["Input", "3DConv", "3×3×3×3×64", "1×1×2", "96×96×7×64", "5248"]
    assert text.splitlines()[-2] == "Total params: 437442"


def test_summary_dws_shows_stages():
    text = summarize(PbbnConfig(2, 2, dws=True))
    assert "DWConv" in text and "PWConv" in text
    assert "Total params: 58178" in text


def test_summary_of_built_model_matches_config():
    cfg = PbbnConfig(2, 3, **SMALL)
    assert summarize(build(cfg)) == summarize(cfg)


def test_initialization():
    cfg = PbbnConfig(2, 2, dws=True, **SMALL)
    a, b = build(cfg, seed=7), build(cfg, seed=7)
    assert all(np.array_equal(x, y) for (_, x), (_, y) in zip(a.state(), b.state()))
    params = dict(a.named_parameters())
    w = params["input.conv.weight"]
    assert np.abs(w).max() <= np.sqrt(6 / 27) and np.abs(w).max() > 0.5 * np.sqrt(6 / 27)
    dw = params["p1.b2.conv1.dw.weight"]
    assert np.abs(dw).max() <= np.sqrt(6 / 27)
    assert np.all(params["input.bn.gamma"] == 1) and np.all(params["input.bn.beta"] == 0)
    assert np.all(params["output.fc.bias"] == 0)
    buffers = dict(a.named_buffers())
    assert np.all(buffers["input.bn.running_var"] == 1)
    assert not np.array_equal(w, dict(build(cfg, seed=8).named_parameters())["input.conv.weight"])


def test_state_names_deterministic():
    cfg = PbbnConfig(2, 2, dws=True, **SMALL)
    assert [n for n, _ in build(cfg, 1).state()] == [n for n, _ in build(cfg, 2).state()]


def test_load_state_mismatch():
    model = build(PbbnConfig(1, 2, **SMALL))
    state = dict(model.state())
    state.pop("output.fc.bias")
    with pytest.raises(ValueError):
        model.load_state(state)
    state = dict(model.state())
    state["output.fc.bias"] = np.zeros(3, np.float32)
    with pytest.raises(ValueError):
        model.load_state(state)


def test_astype_and_copy():
    model = build(PbbnConfig(1, 2, **SMALL), seed=2)
    m64 = model.astype(np.float64)
    assert m64.dtype == np.float64
    assert all(np.array_equal(a, b) for (_, a), (_, b) in zip(model.state(), m64.state()))
    clone = model.copy()
    dict(clone.named_parameters())["output.fc.weight"][0, 0] += 1
    assert not np.array_equal(dict(clone.named_parameters())["output.fc.weight"],
                              dict(model.named_parameters())["output.fc.weight"])

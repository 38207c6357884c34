import math

import numpy as np
import pytest
import sympy
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hybridhead import analysis as A
from hybridhead.config import preset
from hybridhead.model import all_swa_config, build, reference_config

SMALL = preset("toy").replace(name="small", blocks=3, hidden=16, attn_heads=2, query_groups=1, ssm_state=4,
                              mlp_hidden=24, window=4, meta_tokens=3, vocab=20, num_full_attn=1)


@pytest.fixture(scope="module")
def model():
    m = build(SMALL, seed=11)
    for blk in m.blocks:  # sharper attention than the 0.02 init gives
        blk.mixer.w_q.data *= 20
        if blk.mixer.w_k is not None:
            blk.mixer.w_k.data *= 20
    return m


TOKENS = np.array([0, 3, 7, 7, 1, 9, 2, 4, 4, 5])


def test_attention_map_matches_forward(model):
    inputs, probe = A.layer_inputs(model, TOKENS)
    for layer in range(SMALL.blocks):
        probs = probe["layers"][layer]["attn_probs"][0]
        for h in range(SMALL.attn_heads):
            assert np.max(np.abs(A.materialize_attn(model, TOKENS, layer, h) - probs[h])) <= 1e-14


def test_map_times_values_is_head_output(model):
    inputs, probe = A.layer_inputs(model, TOKENS)
    hd = SMALL.head_dim
    for layer in range(SMALL.blocks):
        _, _, v = A.attention_operands(model, inputs, layer)
        out = probe["layers"][layer]["attn_out"][0]
        for h in range(SMALL.attn_heads):
            m = A.materialize_attn(model, TOKENS, layer, h)
            ref = out[:, h * hd:(h + 1) * hd]
            got = m @ v[h // (SMALL.attn_heads // SMALL.query_groups)]
            assert np.max(np.abs(got - ref)) <= 1e-10 * np.max(np.abs(ref))


def test_length_one_map():
    m = build(SMALL.replace(meta_tokens=0), seed=0)
    assert A.materialize_attn(m, np.array([3]), 0, 0).tolist() == [[1.0]]


def test_uniform_logits_give_uniform_rows():
    m = build(SMALL.replace(meta_tokens=0), seed=0)
    m.blocks[0].mixer.w_q.data[:] = 0
    mat = A.materialize_attn(m, np.arange(6), 0, 1)
    for i in range(6):
        assert np.allclose(mat[i, : i + 1], 1 / (i + 1), atol=1e-15)


def test_limit_refusal(model):
    with pytest.raises(A.AnalysisLimitError, match="limit of 8"):
        A.materialize_attn(model, np.arange(6), 0, 0, limit=8)


def test_ssm_operator_reproduces_scan(model):
    inputs, probe = A.layer_inputs(model, TOKENS)
    for layer in range(SMALL.blocks):
        u, dt, Am, B, C, _ = A.ssm_operands(model, inputs, layer)
        alpha = A.ssm_operator(dt, Am, B, C)
        got = np.einsum("cij,jc->ic", alpha, u)
        ref = probe["layers"][layer]["scan_out"][0]
        assert np.max(np.abs(got - ref)) <= 1e-8 * np.max(np.abs(ref))


def test_ssm_map_rows_and_support(model):
    for h in range(SMALL.ssm_heads):
        mat = A.materialize_ssm(model, TOKENS, 1, h)
        assert np.all(np.abs(mat.sum(1) - 1) <= 1e-12)
        assert np.all(np.triu(mat, 1) == 0)


def test_constant_parameters_decay_monotone():
    L, N = 12, 3
    dt = np.full((L, 1), 0.3)
    Am = -np.array([[0.5, 1.0, 2.0]])
    B = np.ones((L, N))
    C = np.ones((L, N))
    alpha = A.ssm_operator(dt, Am, B, C)[0]
    for i in range(L):
        row = alpha[i, : i + 1]
        assert np.all(np.diff(row) > 0)  # older positions weigh less


class TestEntropy:
    def test_uniform_and_onehot(self):
        rep = A.AttentionMapReport(0, 4, 1, [A.MapEntry(0, 0, "attn", np.tril(np.ones((4, 4))) / np.arange(1, 5)[:, None]),
                                              A.MapEntry(0, 0, "ssm", np.eye(4))])
        ent = A.entropy(rep)
        assert ent["ssm"] == [0.0]
        assert ent["attn"][0] == pytest.approx(np.mean([math.log(n) for n in range(1, 5)]), abs=1e-15)

    def test_comparison_series(self, model):
        with_meta = A.build_report(model, TOKENS)
        without = A.build_report(build(SMALL.replace(meta_tokens=0), seed=11), TOKENS)
        rows = A.entropy_comparison(with_meta, without)
        assert len(rows) == 2 * SMALL.blocks
        assert {"layer", "kind", "with_meta", "without_meta"} <= set(rows[0])


class TestErf:
    def test_two_token_half(self):
        assert A.erf_from_rows(np.array([[[0.5, 0.5]]])) == 0.5

    def test_self_only_zero(self):
        assert A.erf_from_rows(np.array([[[0.0, 0.0, 1.0]]])) == 0.0

    @given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
    def test_equals_naive(self, N, H, S, seed):
        rows = np.random.default_rng(seed).dirichlet(np.ones(S), size=(N, H))
        assert A.erf_from_rows(rows) == A.erf_naive(rows)

    @pytest.mark.parametrize("S", [1, 2, 5, 17, 40])
    @pytest.mark.parametrize("blocks", [1, 3, 6])
    def test_uniform_closed_form(self, S, blocks):
        n, h, s, NN, SS = sympy.symbols("n h s N S", integer=True, positive=True)
        term = 2 * (SS - s) * (NN - n + 1) / (NN * (NN + 1) * SS)
        closed = sympy.summation(sympy.summation(term, (s, 1, SS)), (n, 1, NN))
        closed = sympy.simplify(closed)
        assert sympy.simplify(closed - (SS - 1) / 2) == 0
        cfg = SMALL.replace(blocks=blocks, meta_tokens=0, num_full_attn=blocks)
        assert abs(A.erf_uniform(cfg, S) - float(closed.subs({NN: blocks, SS: S}))) <= 1e-12

    @given(st.integers(1, 12), st.integers(1, 80), st.integers(1, 10))
    def test_global_at_least_swa(self, blocks, S, window):
        cfg = SMALL.replace(blocks=blocks, window=window, meta_tokens=0, num_full_attn=min(3, blocks))
        assert A.erf_uniform(reference_config(cfg), S) >= A.erf_uniform(all_swa_config(cfg), S)

    def test_swa_closed_form(self):
        cfg = all_swa_config(SMALL.replace(meta_tokens=0, window=4))
        assert A.erf_uniform(cfg, 30) == pytest.approx(1.5, abs=1e-12)

    def test_from_model(self, model):
        assert A.erf(model, TOKENS) > 0


class TestCategories:
    def test_partition(self, model):
        rep = A.build_report(model, TOKENS)
        res = A.categorize(rep)
        for row in res["per_map"]:
            assert abs(row["Meta"] + row["BOS"] + row["Self"] + row["Cross"] - 1) <= 1e-9

    def test_no_meta(self):
        m = build(SMALL.replace(meta_tokens=0), seed=1)
        res = A.categorize(A.build_report(m, TOKENS))
        assert all(r["Meta"] == 0 for r in res["per_map"])

    def test_hand_case(self):
        mat = np.array([
            [1.0, 0, 0, 0],
            [0.5, 0.5, 0, 0],
            [0.2, 0.3, 0.5, 0],
            [0.1, 0.2, 0.3, 0.4],
        ])
        c = A._categories(mat, 1)
        # real rows 1..3; BOS column 1; BOS row diagonal is BOS
        assert c == pytest.approx({"Meta": 0.8 / 3, "BOS": 1.0 / 3, "Self": 0.9 / 3, "Cross": 0.3 / 3})

    @given(st.integers(0, 4), st.integers(1, 10), st.integers(0, 2**31))
    def test_partition_random(self, m, n, seed):
        L = m + n
        rng = np.random.default_rng(seed)
        mat = np.tril(rng.uniform(size=(L, L)))
        mat /= mat.sum(1, keepdims=True)
        c = A._categories(mat, m)
        assert abs(sum(c.values()) - 1) <= 1e-9
        if m == 0:
            assert c["Meta"] == 0


class TestImportance:
    def test_zero_branch_equals_beta_zero(self, model):
        from hybridhead.model import forward
        z = model.with_branch_zeroed(1, "ssm")
        manual = model.copy()
        manual.blocks[1].mixer.beta2.data[:] = 0
        assert np.array_equal(forward(z, TOKENS).data, forward(manual, TOKENS).data)

    def test_already_zero_gives_zero_delta(self, model):
        z = model.with_branch_zeroed(0, "attn")

        def score(mdl):
            from hybridhead.model import forward
            return float(forward(mdl, TOKENS).data.sum())

        assert A.head_importance(z, score, 0, "attn") == 0.0

    def test_sweep_shape(self, model):
        from hybridhead.model import forward
        sweep = A.importance_sweep(model, lambda mdl: float(forward(mdl, TOKENS).data[-1].max()))
        assert np.array(sweep["deltas"]).shape == (SMALL.blocks, 2)
        assert sweep["flagged"][0]["layer"] == 0 and sweep["flagged"][0]["branch"] == "ssm"


def test_branch_magnitudes(model):
    rows = A.branch_magnitudes(model, TOKENS)
    assert len(rows) == SMALL.blocks and all(r["ssm_rms"] > 0 for r in rows)


def test_csv_long_format():
    text = A.to_csv(A.long_rows([{"layer": 0, "head": 1, "kind": "attn", "Meta": 0.25}]))
    assert text.splitlines() == ["layer,head,kind,metric,value", "0,1,attn,Meta,0.25"]


@given(arrays(np.float64, (5, 5), elements=st.floats(0.01, 1)))
def test_report_rows_stochastic(mat):
    mat = np.tril(mat)
    mat /= mat.sum(1, keepdims=True)
    rep = A.AttentionMapReport(0, 5, 1, [A.MapEntry(0, 0, "attn", mat)])
    assert np.allclose(rep.last_rows(), mat[-1][None, None])

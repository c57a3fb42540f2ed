import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from guardedml import dsl
from guardedml.dsl import (
    AGGREGATES, BinOp, Call, EvalError, FrozenAggregates, Ident, Neg, Num,
    ParseError, apply_expr, audit_expr, fit_expr, parse_expr, print_expr,
    same_structure,
)
from guardedml.tabular import Dataset, numeric_column


def ds_of(**cols):
    return Dataset(tuple(numeric_column(k, v) for k, v in cols.items()))


class TestParse:
    def test_standardize_shape(self):
        e = parse_expr("(x - mean(x)) / sd(x)")
        assert isinstance(e, BinOp) and e.op == "/"
        assert isinstance(e.left, BinOp) and e.left.op == "-"
        assert isinstance(e.left.right, Call) and e.left.right.func == "mean"
        assert isinstance(e.right, Call) and e.right.func == "sd"

    def test_syntax_error_position(self):
        with pytest.raises(ParseError) as err:
            parse_expr("x +")
        assert err.value.pos == 3

    def test_nested_aggregate_rejected(self):
        with pytest.raises(ParseError, match="nested aggregate"):
            parse_expr("mean(mean(x))")

    def test_nested_aggregate_through_elementwise(self):
        with pytest.raises(ParseError, match="nested aggregate"):
            parse_expr("mean(log(sd(x)))")

    def test_unknown_function_rejected(self):
        with pytest.raises(ParseError, match="unknown function"):
            parse_expr("foo(x)")

    def test_precedence(self):
        e = parse_expr("1 + 2 * 3")
        assert e.op == "+" and e.right.op == "*"
        e = parse_expr("-x * 2")  # unary minus binds tighter than *
        assert e.op == "*" and isinstance(e.left, Neg)

    def test_arity_enforced(self):
        with pytest.raises(ParseError, match="one argument"):
            parse_expr("mean(x, y)")

    def test_identifier_with_dots(self):
        e = parse_expr("col.a + 1")
        assert isinstance(e.left, Ident) and e.left.name == "col.a"


class TestEvaluate:
    def test_fit_freezes_mean_and_sd(self, small_numeric_ds):
        e = parse_expr("(x - mean(x)) / sd(x)")
        frozen = fit_expr(e, small_numeric_ds)
        assert sorted(v for _, v in frozen.values) == [1.0, 2.0]

    def test_apply_to_new_rows(self, small_numeric_ds):
        e = parse_expr("(x - mean(x)) / sd(x)")
        frozen = fit_expr(e, small_numeric_ds)
        vals, warnings = apply_expr(e, frozen, ds_of(x=[4.0]))
        assert vals.tolist() == [2.0] and warnings == []

    def test_apply_to_analysis_itself(self, small_numeric_ds):
        e = parse_expr("(x - mean(x)) / sd(x)")
        frozen = fit_expr(e, small_numeric_ds)
        vals, _ = apply_expr(e, frozen, small_numeric_ds)
        assert vals.tolist() == [-1.0, 0.0, 1.0]

    def test_q25_matches_order_statistic_oracle(self):
        # independent oracle: linear interpolation between order statistics
        def q25_oracle(values):
            v = sorted(values)
            h = (len(v) - 1) * 0.25
            lo = int(np.floor(h))
            return v[lo] + (h - lo) * (v[lo + 1] - v[lo])

        data = [1.0, 2.0, 3.0, 4.0]
        e = parse_expr("q25(x)")
        frozen = fit_expr(e, ds_of(x=data))
        assert frozen.values[0][1] == pytest.approx(q25_oracle(data), abs=1e-12)
        rng = np.random.default_rng(4)
        for _ in range(20):
            data = rng.normal(size=rng.integers(2, 30)).tolist()
            frozen = fit_expr(e, ds_of(x=data))
            assert frozen.values[0][1] == pytest.approx(q25_oracle(data), abs=1e-12)

    def test_zero_sd_gives_missing_and_warning(self):
        e = parse_expr("(x - mean(x)) / sd(x)")
        frozen = fit_expr(e, ds_of(x=[2.0, 2.0, 2.0]))
        vals, warnings = apply_expr(e, frozen, ds_of(x=[1.0, 5.0]))
        assert np.isnan(vals).all()
        assert any(w.rule == "div-zero" for w in warnings)

    def test_missing_inputs_propagate(self):
        e = parse_expr("x + 1")
        vals, _ = apply_expr(e, FrozenAggregates(()), ds_of(x=[1.0, np.nan]))
        assert vals[0] == 2.0 and np.isnan(vals[1])

    def test_log_of_nonpositive_warns(self):
        e = parse_expr("log(x)")
        vals, warnings = apply_expr(e, FrozenAggregates(()), ds_of(x=[-1.0, 1.0]))
        assert np.isnan(vals[0]) and vals[1] == 0.0
        assert warnings[0].rule == "log-domain"

    def test_aggregates_ignore_missing(self):
        e = parse_expr("mean(x)")
        frozen = fit_expr(e, ds_of(x=[1.0, np.nan, 3.0]))
        assert frozen.values[0][1] == 2.0

    def test_all_missing_aggregate_rejected(self):
        e = parse_expr("mean(x)")
        with pytest.raises(EvalError, match="all-missing"):
            fit_expr(e, ds_of(x=[np.nan, np.nan]))

    def test_purity_bit_identical(self):
        rng = np.random.default_rng(0)
        data = ds_of(x=rng.normal(size=50), y=rng.normal(size=50))
        e = parse_expr("sqrt(abs(x * y - mean(x))) / (sd(y) + q75(x))")
        frozen = fit_expr(e, data)
        a, _ = apply_expr(e, frozen, data)
        b, _ = apply_expr(e, frozen, data)
        assert np.array_equal(a, b, equal_nan=True)

    def test_fold_isolation(self):
        e = parse_expr("(x - mean(x)) / sd(x)")
        analysis = ds_of(x=[1.0, 2.0, 3.0])
        frozen_1 = fit_expr(e, analysis)
        # any change to non-analysis data cannot reach the fit
        frozen_2 = fit_expr(e, analysis)
        assert frozen_1 == frozen_2


# hypothesis AST generator for the printer round trip
_names = st.sampled_from(["x", "y", "col_1", "a.b"])


def _exprs(inside_agg):
    leaf = st.one_of(
        st.floats(min_value=0.0, max_value=1e6, allow_nan=False).map(
            lambda v: Num(float(v), dsl.Span(0, 0))),
        _names.map(lambda n: Ident(n, dsl.Span(0, 0))),
    )
    def extend(children):
        ops = [
            st.tuples(children, children, st.sampled_from("+-*/")).map(
                lambda t: BinOp(t[2], t[0], t[1], dsl.Span(0, 0))),
            children.map(lambda c: Neg(c, dsl.Span(0, 0))),
            st.tuples(st.sampled_from(["log", "exp", "abs", "sqrt"]), children).map(
                lambda t: Call(t[0], (t[1],), dsl.Span(0, 0))),
        ]
        if not inside_agg:
            ops.append(st.tuples(st.sampled_from(AGGREGATES), _exprs(True)).map(
                lambda t: Call(t[0], (t[1],), dsl.Span(0, 0))))
        return st.one_of(*ops)
    return st.recursive(leaf, extend, max_leaves=12)


@given(_exprs(False))
@settings(max_examples=150, deadline=None)
def test_print_parse_fixpoint(expr):
    text = print_expr(expr)
    reparsed = parse_expr(text)
    assert same_structure(expr, reparsed)
    assert print_expr(reparsed) == text


class TestAudit:
    def test_clean_expression(self):
        assert audit_expr("(x - mean(x)) / sd(x)", columns={"x"}) == []

    def test_read_file_rejected_under_r1_and_r2(self):
        rules = {f.rule for f in audit_expr("read_file(x)", columns={"x"})}
        assert rules == {"R1", "R2"}

    def test_unknown_bare_identifier_r1(self):
        findings = audit_expr("x + zz", columns={"x"})
        assert [f.rule for f in findings] == ["R1"]

    def test_unknown_bare_identifier_skipped_without_schema(self):
        assert audit_expr("x + zz", columns=None) == []

    def test_unknown_function_checked_without_schema(self):
        assert {f.rule for f in audit_expr("fetch_remote(x)")} == {"R1", "R2"}

    def test_io_tokens_each_rejected(self):
        for tok in ("read", "write", "load", "save", "open", "system",
                    "download", "connect", "env", "fetch"):
            findings = audit_expr(f"{tok}_thing", columns={f"{tok}_thing"})
            assert any(f.rule == "R2" for f in findings), tok

    def test_embedded_literal_table_r3(self):
        expr = "lookup(" + ", ".join(str(i) for i in range(30)) + ")"
        rules = {f.rule for f in audit_expr(expr, columns=set())}
        assert "R3" in rules

    def test_25_literals_allowed(self):
        expr = " + ".join(str(i) for i in range(25))
        assert not any(f.rule == "R3" for f in audit_expr(expr, columns=set()))

    def test_unparseable_text_fails_closed(self):
        findings = audit_expr("x ++", columns={"x"})
        assert findings[0].severity == "reject" and findings[0].rule == "syntax"

    def test_audit_on_ast_not_text(self):
        # formatting cannot hide findings: same AST, different whitespace
        a = audit_expr("read_file( x )", columns={"x"})
        b = audit_expr("read_file(x)", columns={"x"})
        assert {f.rule for f in a} == {f.rule for f in b}

    @given(st.sampled_from(sorted(dsl.IO_TOKENS)), st.booleans())
    @settings(max_examples=20, deadline=None)
    def test_audit_soundness_on_io_tokens(self, token, as_call):
        text = f"{token}(x)" if as_call else f"x + {token}"
        findings = audit_expr(text, columns={"x", token} if not as_call else {"x"})
        assert any(f.rule == "R2" for f in findings)

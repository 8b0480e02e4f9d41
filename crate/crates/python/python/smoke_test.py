"""Smoke test for the raise_sql extension.

Build and install first:  maturin develop  (or: pip install <built wheel>)
Then run:                 python -m pytest python/smoke_test.py
"""

import sqlite3

import pytest

import raise_sql


@pytest.fixture()
def pets(tmp_path):
    path = tmp_path / "pets.sqlite"
    con = sqlite3.connect(path)
    con.executescript(
        """
        CREATE TABLE pet (id INTEGER PRIMARY KEY, name TEXT, species TEXT, age REAL);
        INSERT INTO pet VALUES (1, 'Rex', 'dog', 3), (2, 'Tom', 'cat', 5.5), (3, 'Fido', 'dog', 1);
        """
    )
    con.close()
    return raise_sql.Database(str(path))


def test_protocol_round_trip():
    call = {"tool": "run_query", "sql": "SELECT f(a, ')') FROM t WHERE (b = 1)"}
    text = "thinking " + raise_sql.render_invocation(call) + " trailing"
    inner, end = raise_sql.scan_stream(text)
    assert text[:end].endswith("[EXECUTE]")
    assert raise_sql.parse_invocation(inner) == call
    assert raise_sql.parse_invocation("READ_TABLE_NAMES()") == {"tool": "read_table_names"}
    with pytest.raises(ValueError):
        raise_sql.parse_invocation("drop_everything()")


def test_tools_are_read_only(pets):
    assert pets.db_id == "pets"
    assert "pet" in pets.read_table_names()
    assert "species" in pets.read_table_columns("pet")
    assert "2" in pets.run_query("SELECT COUNT(*) FROM pet WHERE species = 'dog'")
    assert "read-only" in pets.execute("run_query(DELETE FROM pet)")
    assert pets.query("SELECT COUNT(*) FROM pet") == [[3]]


def test_execution_match(pets):
    gold = pets.query("SELECT name FROM pet WHERE species = 'dog'")
    pred = pets.query("SELECT name FROM pet WHERE species = 'dog' ORDER BY name DESC")
    assert raise_sql.execution_match(pred, gold)
    assert raise_sql.execution_match([[1.0]], [[1]])
    assert not raise_sql.execution_match([[1, "a"]], [["a", 1]])


def test_control_policy():
    assert raise_sql.apply_control(1400, 1400) == "none"
    assert raise_sql.apply_control(1401, 1401) == "nudge"
    assert raise_sql.apply_control(1401, 1401, tool_call=True) == "none"
    assert raise_sql.apply_control(10001, 5000) == "terminate"


def test_selection_and_sampling():
    rounds = [1, 3, None, 2]
    curve = [raise_sql.best_of_n(rounds, n) for n in range(1, 5)]
    assert curve == [0.25, 0.5, 0.75, 0.75]
    items = [(f"s{i}", "simple") for i in range(60)]
    items += [(f"m{i}", "moderate") for i in range(30)]
    items += [(f"c{i}", "challenging") for i in range(10)]
    sample = raise_sql.stratified_sample(items, 0.1, 42)
    assert [s[0] for s in sample].count("s") == 6
    assert [s[0] for s in sample].count("m") == 3
    assert [s[0] for s in sample].count("c") == 1
    assert sample == raise_sql.stratified_sample(items, 0.1, 42)


def test_rewrite_and_extract():
    sql = "SELECT DISTINCT a, b FROM t WHERE c = 1"
    assert raise_sql.rewrite_select_list(sql, ["b"]) == "SELECT DISTINCT b FROM t WHERE c = 1"
    assert raise_sql.extract_final_sql("answer:\n```sql\nSELECT 1\n```") == "SELECT 1"
    assert raise_sql.round_real(0.1234565) == 0.123456


def test_scripted_exploration(pets):
    trace = pets.explore(
        "How many dogs?",
        [
            "[RUN] read_table_names() [EXECUTE]",
            "[RUN] run_query(SELECT COUNT(*) FROM pet WHERE species = 'dog') [EXECUTE]",
            "```sql\nSELECT COUNT(*) FROM pet WHERE species = 'dog'\n```",
        ],
    )
    assert trace["termination"] == "natural"
    assert [op["call"]["tool"] for op in trace["operations"]] == ["read_table_names", "run_query"]
    static = pets.explore("How many dogs?", ["[RUN] run_query(SELECT 1) [EXECUTE]", "done"], agent_kind="static")
    assert static["operations"] == []

import math

import pandas as pd
import pytest

from db import clear_db, insert_reports, load_reports, summarize_reports


@pytest.fixture
def db_path(tmp_path):
    return tmp_path / "ledger" / "runs.db"


def _row(tag, seed, ind_cf, measure="L"):
    return {"tag": tag, "baseline": "coffee", "arch": "transformer", "dataset": "games", "measure": measure,
            "lam": 0.2, "eta": 0.6, "seed": seed, "n_samples": 3, "ind_cf": ind_cf, "grp_cf": 0.1, "ddp": 0.2,
            "bleu1": 10.0, "bleu4": 1.0, "rouge1": 20.0, "rouge2": 5.0, "rougeL": 18.0, "rmse": 1.1,
            "config_hash": "abc"}


def test_empty_ledger(db_path):
    assert load_reports(db_path).empty
    assert summarize_reports(load_reports(db_path)).empty


def test_insert_and_load(db_path):
    assert insert_reports([_row("a", 0, 1.0), _row("a", 1, 3.0)], db_path) == 2
    df = load_reports(db_path)
    assert df["ind_cf"].tolist() == [1.0, 3.0]
    assert df["created_at"].notna().all()


def test_missing_keys_become_null(db_path):
    insert_reports([{"tag": "partial", "measure": "F"}], db_path)
    df = load_reports(db_path)
    assert df.loc[0, "tag"] == "partial" and pd.isna(df.loc[0, "ind_cf"])


def test_summary_over_seeds(db_path):
    insert_reports([_row("a", 0, 1.0), _row("a", 1, 3.0), _row("b", 0, 5.0), _row("a", 0, 2.0, "F")], db_path)
    summary = summarize_reports(load_reports(db_path)).set_index(["tag", "measure"])
    assert summary.loc[("a", "L"), "ind_cf_mean"] == 2.0
    assert summary.loc[("a", "L"), "ind_cf_std"] == pytest.approx(math.sqrt(2))
    assert summary.loc[("a", "L"), "runs"] == 2
    assert summary.loc[("b", "L"), "runs"] == 1


def test_clear(db_path):
    insert_reports([_row("a", 0, 1.0)], db_path)
    clear_db(db_path)
    assert load_reports(db_path).empty
